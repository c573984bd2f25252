//! Versioned binary checkpoints: a flat map of named tensors with shape
//! headers. Everything is little-endian. The element width is tagged so an
//! f32 training checkpoint cannot be silently loaded into an f64 model.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::StateMap;
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DVOL";
const VERSION: u32 = 1;

fn dtype_tag<T: Scalar>() -> u8 {
    std::mem::size_of::<T>() as u8
}

pub fn save_checkpoint<T: Scalar>(path: &Path, state: &StateMap<T>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&[dtype_tag::<T>()])?;
    f.write_all(&(state.len() as u32).to_le_bytes())?;
    for (name, t) in state {
        let bytes = name.as_bytes();
        f.write_all(&(bytes.len() as u16).to_le_bytes())?;
        f.write_all(bytes)?;
        f.write_all(&[t.shape().len() as u8])?;
        for &d in t.shape() {
            f.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            match dtype_tag::<T>() {
                4 => f.write_all(&(v.to_f64() as f32).to_le_bytes())?,
                _ => f.write_all(&v.to_f64().to_le_bytes())?,
            }
        }
    }
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<StateMap<T>> {
    let mut f = fs::File::open(path).map_err(|e| {
        Error::Checkpoint(format!("{}: {}", path.display(), e))
    })?;
    let mut read_exact = |n: usize| -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        f.read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint(format!("{}: truncated", path.display())))?;
        Ok(buf)
    };

    if read_exact(4)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(read_exact(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: version {} unsupported, expected {}",
            path.display(),
            version,
            VERSION
        )));
    }
    let tag = read_exact(1)?[0];
    if tag != dtype_tag::<T>() {
        return Err(Error::Checkpoint(format!(
            "{}: element width {} does not match the model's {}",
            path.display(),
            tag,
            dtype_tag::<T>()
        )));
    }
    let count = u32::from_le_bytes(read_exact(4)?.try_into().unwrap());

    let mut state = StateMap::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(read_exact(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(read_exact(name_len)?)
            .map_err(|_| Error::Checkpoint(format!("{}: non-utf8 tensor name", path.display())))?;
        let ndim = read_exact(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(read_exact(4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = read_exact(numel * tag as usize)?;
        let data: Vec<T> = payload
            .chunks_exact(tag as usize)
            .map(|c| match tag {
                4 => cast::<T>(f32::from_le_bytes(c.try_into().unwrap()) as f64),
                _ => cast::<T>(f64::from_le_bytes(c.try_into().unwrap())),
            })
            .collect();
        if state.insert(name.clone(), Tensor::from_vec(&shape, data)?).is_some() {
            return Err(Error::Checkpoint(format!(
                "{}: duplicate tensor {:?}",
                path.display(),
                name
            )));
        }
    }
    Ok(state)
}
