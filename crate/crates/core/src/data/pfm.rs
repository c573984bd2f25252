//! Single-channel PFM disparity maps. Header is three whitespace-separated
//! tokens ("Pf", "W H", scale) followed by exactly one whitespace byte and
//! a raw float32 payload stored bottom-up; the sign of the scale encodes the
//! payload byte order. Files are written little-endian with scale -1.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize, what: &str) -> Result<&'a [u8]> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::data(format!("pfm: missing {}", what)));
    }
    Ok(&bytes[start..*pos])
}

fn parse<N: std::str::FromStr>(tok: &[u8], what: &str) -> Result<N> {
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| {
            Error::data(format!(
                "pfm: bad {} {:?}",
                what,
                String::from_utf8_lossy(tok)
            ))
        })
}

/// Read a grayscale PFM file. Returns the `[H, W]` map (row 0 on top) and
/// the magnitude of the scale header.
pub fn read_pfm<T: Scalar>(path: &Path) -> Result<(Tensor<T>, f64)> {
    let bytes = fs::read(path)?;
    let mut pos = 0;
    let magic = next_token(&bytes, &mut pos, "magic")?;
    match magic {
        b"Pf" => {}
        b"PF" => {
            return Err(Error::data(
                "pfm: color ('PF') not supported, disparity maps are single-channel 'Pf'",
            ))
        }
        other => {
            return Err(Error::data(format!(
                "pfm: expected 'Pf' magic, got {:?}",
                String::from_utf8_lossy(other)
            )))
        }
    }
    let w: usize = parse(next_token(&bytes, &mut pos, "width")?, "width")?;
    let h: usize = parse(next_token(&bytes, &mut pos, "height")?, "height")?;
    let scale: f64 = parse(next_token(&bytes, &mut pos, "scale")?, "scale")?;
    if scale == 0.0 {
        return Err(Error::data("pfm: scale must be nonzero"));
    }
    if w == 0 || h == 0 {
        return Err(Error::data(format!("pfm: degenerate extents {}x{}", w, h)));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::data("pfm: header not terminated by whitespace"));
    }
    pos += 1;

    let need = w * h * 4;
    let payload = &bytes[pos..];
    if payload.len() != need {
        return Err(Error::data(format!(
            "pfm: payload is {} bytes, {}x{} floats need {}",
            payload.len(),
            w,
            h,
            need
        )));
    }
    let little_endian = scale < 0.0;
    let mut data = vec![T::zero(); h * w];
    for row in 0..h {
        // Rows are stored bottom-up.
        let dst = h - 1 - row;
        for x in 0..w {
            let o = (row * w + x) * 4;
            let raw: [u8; 4] = payload[o..o + 4].try_into().expect("length checked");
            let v = if little_endian {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
            data[dst * w + x] = cast::<T>(v as f64);
        }
    }
    Ok((Tensor::from_vec(&[h, w], data)?, scale.abs()))
}

/// Write an `[H, W]` map as little-endian grayscale PFM with scale -1.
pub fn write_pfm<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let [h, w] = t.dims::<2>()?;
    let mut out = Vec::with_capacity(32 + h * w * 4);
    out.extend_from_slice(format!("Pf\n{} {}\n-1.0\n", w, h).as_bytes());
    let d = t.data();
    for row in (0..h).rev() {
        for x in 0..w {
            let v = d[row * w + x].to_f64() as f32;
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}
