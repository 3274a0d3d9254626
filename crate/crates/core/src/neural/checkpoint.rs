//! `.eck` checkpoint files (little-endian):
//!
//! ```text
//! "ECK1" | u32 version=1 | u8 variant | u32 C | u32 K
//! 6 x f64 channel mean | 6 x f64 channel std | u32 tensor count
//! per tensor: u16 name length, UTF-8 name, u8 rank, rank x u32 extents, f32 payload
//! ```

use std::fs;
use std::path::Path;

use crate::codec::{ByteReader, ByteWriter};
use crate::dataset::ChannelStats;
use crate::error::{shape_err, Error, Result};
use crate::neural::model::{param_table, ModelParams, NamedTensor, Variant};
use crate::neural::tensor::{Real, Tensor};
use crate::simulate::N_CHANNELS;

const MAGIC: &[u8; 4] = b"ECK1";
const VERSION: u32 = 1;

pub fn checkpoint_bytes<T: Real>(params: &ModelParams<T>) -> Result<Vec<u8>> {
    let mut w = ByteWriter::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u8(params.variant.code());
    w.u32(params.channels as u32);
    w.u32(params.k as u32);
    params
        .stats
        .mean
        .iter()
        .chain(&params.stats.std)
        .for_each(|&v| w.f64(v));
    w.u32(params.tensors.len() as u32);
    for t in &params.tensors {
        let name = t.name.as_bytes();
        w.u16(
            u16::try_from(name.len())
                .map_err(|_| Error::InvalidArgument(format!("tensor name {} too long", t.name)))?,
        );
        w.bytes(name);
        w.u8(t.tensor.shape().len() as u8);
        for &e in t.tensor.shape() {
            w.u32(e as u32);
        }
        w.f32s(t.tensor.data().iter().map(|v| v.as_f64() as f32));
    }
    Ok(w.buf)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ModelParams<f32>> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let code = r.u8("variant")?;
    let variant = Variant::from_code(code).ok_or_else(|| Error::Malformed(format!("unknown variant code {code}")))?;
    let channels = r.u32("width")? as usize;
    let k = r.u32("attention channels")? as usize;
    let mut stats = ChannelStats {
        mean: [0.0; N_CHANNELS],
        std: [0.0; N_CHANNELS],
    };
    for v in stats.mean.iter_mut().chain(stats.std.iter_mut()) {
        *v = r.f64("channel stats")?;
    }
    let table = param_table(variant, channels, k);
    let count = r.u32("tensor count")? as usize;
    if count != table.len() {
        return Err(shape_err(format!(
            "{variant} with C={channels}, K={k} has {} tensors, file declares {count}",
            table.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for (expected, role, shape) in table {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let extents = (0..rank)
            .map(|_| r.u32("extent").map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        if name != expected || extents != shape {
            return Err(shape_err(format!(
                "tensor {name} {extents:?} does not match expected {expected} {shape:?}"
            )));
        }
        let data = r.f32s(shape.iter().product(), &name)?;
        tensors.push(NamedTensor {
            name,
            role,
            tensor: Tensor::new(shape, data)?,
        });
    }
    r.finish()?;
    let params = ModelParams {
        variant,
        channels,
        k,
        tensors,
        stats,
    };
    params.validate()?;
    Ok(params)
}

pub fn save_checkpoint<T: Real>(params: &ModelParams<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, checkpoint_bytes(params)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams<f32>> {
    checkpoint_from_bytes(&fs::read(path)?)
}

/// Loads a checkpoint and refuses it unless it holds `variant`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, variant: Variant) -> Result<ModelParams<f32>> {
    let p = load_checkpoint(path)?;
    if p.variant != variant {
        return Err(Error::VariantMismatch {
            requested: variant.to_string(),
            found: p.variant.to_string(),
        });
    }
    Ok(p)
}
