//! Binary parameter checkpoints.
//!
//! Layout, all little-endian: 8-byte magic, `u32` version, `u64` seed,
//! `u64` count of width words, the widths `(input, cond, embed, n_hidden,
//! hidden…, output)` as `u64`, `u64` parameter count, then the `f64`
//! parameters in declaration order.

use std::io::{Read, Write};

use super::mlp::{MlpParams, MlpSpec};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CPLDMLP\0";
pub const CHECKPOINT_VERSION: u32 = 1;

fn widths(spec: &MlpSpec) -> Vec<u64> {
    let mut w = vec![
        spec.input as u64,
        spec.cond as u64,
        spec.embed as u64,
        spec.hidden.len() as u64,
    ];
    w.extend(spec.hidden.iter().map(|&h| h as u64));
    w.push(spec.output as u64);
    w
}

pub fn save_params<W: Write>(params: &MlpParams, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&params.seed().to_le_bytes())?;
    let ws = widths(params.spec());
    w.write_all(&(ws.len() as u64).to_le_bytes())?;
    for v in ws {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&(params.flat().len() as u64).to_le_bytes())?;
    for v in params.flat() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

/// Load a checkpoint; when `expected` is given its widths must match.
pub fn load_params<R: Read>(mut r: R, expected: Option<&MlpSpec>) -> Result<MlpParams> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut vb = [0u8; 4];
    r.read_exact(&mut vb)
        .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
    let version = u32::from_le_bytes(vb);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let seed = read_u64(&mut r)?;
    let nw = read_u64(&mut r)? as usize;
    if !(5..=1024).contains(&nw) {
        return Err(Error::Checkpoint("implausible width header".into()));
    }
    let ws: Vec<usize> = (0..nw)
        .map(|_| read_u64(&mut r).map(|v| v as usize))
        .collect::<Result<_>>()?;
    let n_hidden = ws[3];
    if ws.len() != 5 + n_hidden {
        return Err(Error::Checkpoint("width header inconsistent".into()));
    }
    let spec = MlpSpec {
        input: ws[0],
        cond: ws[1],
        embed: ws[2],
        hidden: ws[4..4 + n_hidden].to_vec(),
        output: ws[4 + n_hidden],
    };
    if let Some(e) = expected {
        if e != &spec {
            return Err(Error::Checkpoint(format!(
                "widths {spec:?} do not match expected {e:?}"
            )));
        }
    }
    let n = read_u64(&mut r)? as usize;
    if n != spec.num_params() {
        return Err(Error::Checkpoint("parameter count mismatch".into()));
    }
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(f64::from_bits(read_u64(&mut r)?));
    }
    MlpParams::from_flat(spec, seed, data)
}
