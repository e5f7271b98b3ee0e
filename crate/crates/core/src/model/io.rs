//! Weight files.
//!
//! Layout (little-endian): magic `CSDN`, `u16` format version, the config
//! block (every [`NetworkConfig`] size in declaration order as `u32`), a
//! `u32` entry count, then per entry the name
//! (`u16` length + UTF-8), a kind tag (`u8`, see [`ParamKind`]) and the
//! tensor (dtype tag, rank, `u32` dims, raw values). Running statistics are
//! stored as entries with non-learnable kinds. Readers ignore anything after
//! the last entry, so checkpoints are valid weight files.

use std::path::Path;

use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

use super::config::NetworkConfig;
use super::csdn::Csdn;
use super::params::{ParamKind, ParameterStore};

pub const MAGIC: &[u8; 4] = b"CSDN";
pub const FORMAT_VERSION: u16 = 1;

fn encode_config(e: &mut Encoder, c: &NetworkConfig) {
    let sizes = [
        c.in_frames,
        c.num_classes,
        c.downsample_r,
        c.shallow_channels[0],
        c.shallow_channels[1],
        c.shallow_channels[2],
        c.stem_channels,
        c.ge_stage_channels[0],
        c.ge_stage_channels[1],
        c.ge_stage_channels[2],
        c.ge_expansion,
        c.ge_layers[0],
        c.ge_layers[1],
        c.ge_layers[2],
        c.fusion_channels,
        c.head_channels,
        c.aux_channels,
    ];
    for s in sizes {
        e.u32(s as u32);
    }
}

fn decode_config(d: &mut Decoder<'_>) -> Result<NetworkConfig> {
    let mut s = [0usize; 17];
    for v in &mut s {
        *v = d.u32()? as usize;
    }
    let cfg = NetworkConfig {
        in_frames: s[0],
        num_classes: s[1],
        downsample_r: s[2],
        shallow_channels: [s[3], s[4], s[5]],
        stem_channels: s[6],
        ge_stage_channels: [s[7], s[8], s[9]],
        ge_expansion: s[10],
        ge_layers: [s[11], s[12], s[13]],
        fusion_channels: s[14],
        head_channels: s[15],
        aux_channels: s[16],
    };
    cfg.validate()?;
    Ok(cfg)
}

pub(crate) fn encode_store<T: Scalar>(e: &mut Encoder, store: &ParameterStore<T>) {
    e.u32(store.len() as u32);
    for (name, entry) in store.iter() {
        e.str(name);
        e.u8(entry.kind.tag());
        e.tensor(&entry.value);
    }
}

pub(crate) fn decode_store<T: Scalar>(d: &mut Decoder<'_>) -> Result<ParameterStore<T>> {
    let count = d.u32()?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let name = d.str()?;
        let tag = d.u8()?;
        let kind = ParamKind::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown kind tag {} for `{}`", tag, name)))?;
        let value = d.tensor()?;
        store.insert(name, kind, value).map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(store)
}

pub(crate) fn encode_weights<T: Scalar>(e: &mut Encoder, net: &Csdn<T>) {
    e.bytes(MAGIC);
    e.u16(FORMAT_VERSION);
    encode_config(e, net.config());
    encode_store(e, net.params());
}

pub(crate) fn decode_weights<T: Scalar>(d: &mut Decoder<'_>) -> Result<(NetworkConfig, ParameterStore<T>)> {
    if d.take(4)? != MAGIC {
        return Err(Error::Format("not a CSDN weight file (bad magic)".into()));
    }
    let version = d.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {} (expected {})", version, FORMAT_VERSION)));
    }
    let cfg = decode_config(d)?;
    let store = decode_store(d)?;
    Ok((cfg, store))
}

pub fn weights_to_bytes<T: Scalar>(net: &Csdn<T>) -> Vec<u8> {
    let mut e = Encoder::default();
    encode_weights(&mut e, net);
    e.buf
}

/// Parses a weight file; the stored config decides the architecture.
pub fn weights_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Csdn<T>> {
    let (cfg, store) = decode_weights(&mut Decoder::new(bytes))?;
    Csdn::from_parts(cfg, store)
}

pub fn save_weights<T: Scalar>(net: &Csdn<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, weights_to_bytes(net)).map_err(|e| Error::io(path, e))
}

pub fn load_weights<T: Scalar>(path: impl AsRef<Path>) -> Result<Csdn<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    weights_from_bytes(&bytes)
}

/// Loads the parameters of a weight file into an existing network, which
/// keeps its own config; mismatched shapes name the offending parameter.
pub fn load_weights_into<T: Scalar>(net: &mut Csdn<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, store) = decode_weights::<T>(&mut Decoder::new(&bytes))?;
    net.params_mut().load_from(&store)
}
