//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "GIMPCKPT" | version u32
//! config_len u32 | config JSON
//! num_events u64
//! scaler_dim u32 | shift f64 × dim | scale f64 × dim
//! tensor_count u32
//! per tensor: name_len u32 | name | ndim u32 | dims u64 × ndim | data f64 × prod(dims)
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a save/load cycle is exact.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array1;

use crate::dataset::DemographicsScaler;
use crate::error::{Error, Result};
use crate::model::{GraphImputer, ModelConfig, ModelParams};

const MAGIC: &[u8; 8] = b"GIMPCKPT";
pub const VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64s(w: &mut impl Write, vs: &[f64]) -> Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

pub fn write_checkpoint(model: &GraphImputer, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    let config = serde_json::to_vec(&model.config)?;
    put_u32(w, config.len() as u32)?;
    w.write_all(&config)?;
    put_u64(w, model.params.event_embeddings.nrows() as u64)?;
    put_u32(w, model.scaler.shift.len() as u32)?;
    put_f64s(w, model.scaler.shift.as_slice().expect("standard layout"))?;
    put_f64s(w, model.scaler.scale.as_slice().expect("standard layout"))?;

    let names = model.params.names();
    let shapes = model.params.shapes();
    let slices = model.params.slices();
    put_u32(w, names.len() as u32)?;
    for ((name, shape), data) in names.iter().zip(&shapes).zip(&slices) {
        put_u32(w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        put_u32(w, shape.len() as u32)?;
        for &d in shape {
            put_u64(w, d as u64)?;
        }
        put_f64s(w, data)?;
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<GraphImputer> {
    let bad = |m: String| Error::Checkpoint(m);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = get_u32(r)? as usize;
    let mut config = vec![0u8; len];
    r.read_exact(&mut config)?;
    let config: ModelConfig = serde_json::from_slice(&config)?;
    let num_events = get_u64(r)? as usize;
    let dim = get_u32(r)? as usize;
    let scaler = DemographicsScaler {
        shift: Array1::from(get_f64s(r, dim)?),
        scale: Array1::from(get_f64s(r, dim)?),
    };

    let count = get_u32(r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    let mut found = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = get_u32(r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8".into()))?;
        let ndim = get_u32(r)? as usize;
        let shape = (0..ndim).map(|_| get_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let size = shape.iter().product();
        tensors.push(get_f64s(r, size)?);
        found.push((name, shape));
    }
    let params = ModelParams::from_slices(&config, num_events, &tensors)?;
    for ((name, shape), (want_name, want_shape)) in found.iter().zip(params.names().iter().zip(params.shapes())) {
        if name != want_name || *shape != want_shape {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint tensor `{name}` {shape:?} does not match `{want_name}` {want_shape:?}"
            )));
        }
    }
    Ok(GraphImputer { config, params, scaler })
}

pub fn save(model: &GraphImputer, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<GraphImputer> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut r)
}
