//! Self-describing binary checkpoint:
//!
//! ```text
//! "LPBCKPT\n" | version u32 | dtype u8 (4 = f32, 8 = f64) | config json (u32 length + bytes)
//! | tensor count u32 | per tensor: name (u32 length + utf8), rank u32, dims u64.., values
//! ```
//!
//! All integers and values are little-endian; tensors are row-major. The head's
//! running normalization statistics follow the trainable tensors.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::Array1;

use super::{EncoderConfig, Float, Model, ParamLayout, Params};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"LPBCKPT\n";
pub const CHECKPOINT_VERSION: u32 = 1;
const RUNNING_MEAN: &str = "head.norm.running_mean";
const RUNNING_VAR: &str = "head.norm.running_var";

fn dtype_of<A>() -> u8 {
    std::mem::size_of::<A>() as u8
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_values<A: Float>(out: &mut Vec<u8>, values: &[A]) {
    for v in values {
        let x = v.to_f64().unwrap();
        match dtype_of::<A>() {
            4 => out.extend_from_slice(&(x as f32).to_le_bytes()),
            _ => out.extend_from_slice(&x.to_le_bytes()),
        }
    }
}

fn put_tensor<A: Float>(out: &mut Vec<u8>, name: &str, shape: &[usize], values: &[A]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len() as u32);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    put_values(out, values);
}

pub fn save_checkpoint<A: Float>(model: &Model<A>, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    out.push(dtype_of::<A>());
    let config = serde_json::to_vec(&model.config)?;
    put_u32(&mut out, config.len() as u32);
    out.extend_from_slice(&config);
    let layout = model.layout();
    put_u32(&mut out, layout.entries.len() as u32 + 2);
    for spec in &layout.entries {
        let values = &model.params.data[spec.offset..spec.offset + spec.len()];
        put_tensor(&mut out, &spec.name, &spec.shape, values);
    }
    let d = model.config.hidden;
    put_tensor(&mut out, RUNNING_MEAN, &[d], model.bn_mean.as_slice().unwrap());
    put_tensor(&mut out, RUNNING_VAR, &[d], model.bn_var.as_slice().unwrap());
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

struct Reader {
    cur: Cursor<Vec<u8>>,
}

impl Reader {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let remaining = self.cur.get_ref().len() as u64 - self.cur.position();
        if (n as u64) > remaining {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let mut buf = vec![0; n];
        self.cur.read_exact(&mut buf).expect("length checked");
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap()))
    }

    fn values<A: Float>(&mut self, dtype: u8, n: usize, what: &str) -> Result<Vec<A>> {
        let raw = self.bytes(n * dtype as usize, what)?;
        let vals = if dtype == 4 {
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect::<Vec<_>>()
        } else {
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        Ok(vals.into_iter().map(|x| A::from_f64(x).unwrap()).collect())
    }
}

pub fn load_checkpoint<A: Float>(path: &Path) -> Result<Model<A>> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        cur: Cursor::new(data),
    };
    if r.bytes(MAGIC.len(), "header").ok().as_deref() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad header)",
            path.display()
        )));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let dtype = r.bytes(1, "dtype")?[0];
    if dtype != 4 && dtype != 8 {
        return Err(Error::Checkpoint(format!("unknown dtype tag {dtype}")));
    }
    let n = r.u32("config length")? as usize;
    let config: EncoderConfig = serde_json::from_slice(&r.bytes(n, "config")?)
        .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    config.validate()?;
    let layout = Arc::new(ParamLayout::new(&config));
    let count = r.u32("tensor count")? as usize;
    if count != layout.entries.len() + 2 {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {count}",
            layout.entries.len() + 2
        )));
    }
    let mut params = Params::<A>::zeros(layout.clone());
    let d = config.hidden;
    let mut expected: Vec<(String, Vec<usize>)> = layout
        .entries
        .iter()
        .map(|s| (s.name.clone(), s.shape.clone()))
        .collect();
    expected.push((RUNNING_MEAN.into(), vec![d]));
    expected.push((RUNNING_VAR.into(), vec![d]));
    let mut offset = 0;
    let mut running = Vec::new();
    for (name, shape) in expected {
        let len = r.u32("tensor name")? as usize;
        let found = String::from_utf8(r.bytes(len, "tensor name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
        let rank = r.u32("tensor rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u64("tensor dims").map(|x| x as usize))
            .collect::<Result<Vec<_>>>()?;
        if found != name || dims != shape {
            return Err(Error::Checkpoint(format!(
                "expected tensor {name} {shape:?}, found {found} {dims:?}"
            )));
        }
        let size: usize = dims.iter().product();
        let values = r.values::<A>(dtype, size, &name)?;
        if name == RUNNING_MEAN || name == RUNNING_VAR {
            running.push(Array1::from(values));
        } else {
            params.data[offset..offset + size].copy_from_slice(&values);
            offset += size;
        }
    }
    let mut model = Model::from_params(config, params);
    model.bn_var = running.pop().unwrap();
    model.bn_mean = running.pop().unwrap();
    Ok(model)
}
