//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "IVCKPT\0\0"
//! version  u32      1
//! count    u32      number of tensors
//! count x { name_len u32, name utf-8, ndim u32, dims u64 x ndim }
//! values   f64 LE, every tensor row-major in table order
//! ```

use std::io::{Read, Write};

use super::{ModelError, ParamStore};
use crate::diffnum::Tensor;

const MAGIC: &[u8; 8] = b"IVCKPT\0\0";
const VERSION: u32 = 1;

fn read_u32(r: &mut impl Read) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, ModelError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

impl ParamStore {
    pub fn save(&self, mut w: impl Write) -> Result<(), ModelError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        for (name, t) in self.names().iter().zip(self.tensors()) {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
        }
        for t in self.tensors() {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a checkpoint whose table is exactly this store's names and
    /// shapes, replacing the values.
    pub fn load_into(&mut self, mut r: impl Read) -> Result<(), ModelError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ModelError::Checkpoint("bad magic bytes".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        if count != self.len() {
            return Err(ModelError::Checkpoint(format!("{count} tensors in file, model has {}", self.len())));
        }
        let mut shapes = Vec::with_capacity(count);
        for i in 0..count {
            let len = read_u32(&mut r)? as usize;
            if len > 4096 {
                return Err(ModelError::Checkpoint(format!("implausible name length {len}")));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| ModelError::Checkpoint("name is not utf-8".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            let shape = (0..ndim).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let expected = (&self.names()[i], self.tensors()[i].shape());
            if (&name, shape.as_slice()) != expected {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {i}: file has {name} {shape:?}, model expects {} {:?}",
                    expected.0, expected.1
                )));
            }
            shapes.push(shape);
        }
        let (_, tensors) = self.names_and_tensors_mut();
        for (t, shape) in tensors.iter_mut().zip(shapes) {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            *t = Tensor::new(shape, data)?;
        }
        Ok(())
    }
}
