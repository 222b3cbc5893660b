//! Flat binary checkpoint format.
//!
//! Little-endian throughout; byte-exact round-trip (f32 bit patterns are
//! preserved). Layout:
//!
//! ```text
//! magic   8 bytes  "SAFECKP1"
//! u8      strategy (0 = plain, 1..3 = training strategy)
//! u8      has sm_encoder_2
//! u8      has sc_decoder_2
//! u32     L
//! u32*L   d_i
//! u32     base_width
//! u32     input_channels
//! u32     h, u32 w
//! u32     common_depth, u32 branch_depth
//! u32     parameter count
//! then per parameter, in canonical group order:
//!   u32     name length, name bytes (UTF-8)
//!   u8      trainable flag
//!   u32     ndim, u32*ndim dims
//!   f32*N   values (little-endian bit patterns)
//! ```

use std::fs;
use std::path::Path;

use super::{NetError, SafeConfig, SafeNetwork};
use crate::rng::Rng;

const MAGIC: &[u8; 8] = b"SAFECKP1";

pub(super) fn to_bytes(net: &SafeNetwork) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(net.strategy());
    out.push(net.has_alt_trunk() as u8);
    out.push(net.has_alt_decoder() as u8);
    let cfg = net.config();
    push_u32(&mut out, cfg.branches as u32);
    for &d in &cfg.d {
        push_u32(&mut out, d as u32);
    }
    push_u32(&mut out, cfg.base_width as u32);
    push_u32(&mut out, cfg.input_channels as u32);
    push_u32(&mut out, cfg.input_hw.0 as u32);
    push_u32(&mut out, cfg.input_hw.1 as u32);
    push_u32(&mut out, cfg.common_depth as u32);
    push_u32(&mut out, cfg.branch_depth as u32);

    let params = net.params();
    push_u32(&mut out, params.len() as u32);
    for p in params {
        let name = p.name().as_bytes();
        push_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name);
        out.push(p.trainable() as u8);
        let shape = p.shape();
        push_u32(&mut out, shape.len() as u32);
        for &d in &shape {
            push_u32(&mut out, d as u32);
        }
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub(super) fn from_bytes(bytes: &[u8]) -> Result<SafeNetwork, NetError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(NetError::Checkpoint(format!(
            "bad magic {magic:?} at offset 0 (expected {MAGIC:?})"
        )));
    }
    let strategy = r.u8()?;
    let has_sm_alt = r.u8()? != 0;
    let has_sc_alt = r.u8()? != 0;
    let branches = r.u32()? as usize;
    if branches == 0 || branches > 1024 {
        return Err(NetError::Checkpoint(format!("implausible branch count {branches}")));
    }
    let mut d = Vec::with_capacity(branches);
    for _ in 0..branches {
        d.push(r.u32()? as usize);
    }
    let config = SafeConfig {
        branches,
        d,
        base_width: r.u32()? as usize,
        input_channels: r.u32()? as usize,
        input_hw: (r.u32()? as usize, r.u32()? as usize),
        common_depth: r.u32()? as usize,
        branch_depth: r.u32()? as usize,
    };
    config.validate()?;

    // Rebuild the canonical structure, then overwrite every parameter.
    let mut net = SafeNetwork::build(&config, &mut Rng::from_seed(0))?;
    net.set_strategy(strategy);
    if has_sm_alt {
        net.install_sm_encoder_alt();
    }
    if has_sc_alt {
        net.install_sc_decoder_alt();
    }

    let count = r.u32()? as usize;
    let mut params = net.params_mut();
    if count != params.len() {
        return Err(NetError::Checkpoint(format!(
            "parameter count {count} does not match the {} parameters of this architecture",
            params.len()
        )));
    }
    for p in params.iter_mut() {
        let at = r.pos;
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| NetError::Checkpoint(format!("non-UTF-8 parameter name at offset {at}")))?
            .to_string();
        if name != p.name() {
            return Err(NetError::Checkpoint(format!(
                "parameter '{name}' at offset {at} does not match expected '{}'",
                p.name()
            )));
        }
        let trainable = r.u8()? != 0;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        if shape != p.shape() {
            return Err(NetError::Checkpoint(format!(
                "parameter '{name}' shape {shape:?} does not match expected {:?}",
                p.shape()
            )));
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        p.set_data(&data);
        p.set_trainable(trainable);
    }
    if r.pos != bytes.len() {
        return Err(NetError::Checkpoint(format!(
            "{} trailing bytes at offset {}",
            bytes.len() - r.pos,
            r.pos
        )));
    }
    Ok(net)
}

/// Writes a checkpoint file.
pub fn save_checkpoint(net: &SafeNetwork, path: &Path) -> Result<(), NetError> {
    fs::write(path, net.to_bytes())
        .map_err(|e| NetError::Checkpoint(format!("write {}: {e}", path.display())))
}

/// Reads a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<SafeNetwork, NetError> {
    let bytes = fs::read(path)
        .map_err(|e| NetError::Checkpoint(format!("read {}: {e}", path.display())))?;
    from_bytes(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        if self.pos + n > self.bytes.len() {
            return Err(NetError::Checkpoint(format!(
                "truncated at offset {} (wanted {n} more bytes of {})",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, NetError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, NetError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}
