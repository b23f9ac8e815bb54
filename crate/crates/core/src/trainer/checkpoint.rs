//! Binary checkpoint: an 8-byte magic, a little-endian `u32` version, a
//! `u64`-length TOML header, a `u32` tensor count and then named tensors
//! (`u32` name length, name, `u32` rank, `u64` dims, little-endian `f32`
//! data). Network tensors come first in traversal order, then the Adam
//! moments as `adam.{g,d}.{m,v}.<name>` in name order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{init_params, NetConfig, ParamKind, Params};
use crate::tensor::{Rng, RngState, Tensor};

use super::adam::AdamState;
use super::{Progress, TrainConfig, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CG3DCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    train: TrainConfig,
    net: NetConfig,
    progress: Progress,
    /// `seed:word_position`; both exceed TOML's integer range.
    rng: String,
    adam_g_step: u64,
    adam_d_step: u64,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let rng = state.rng.state();
    let header = Header {
        train: state.train.clone(),
        net: state.net.clone(),
        progress: state.progress.clone(),
        rng: format!("{}:{}", rng.seed, rng.word_pos),
        adam_g_step: state.adam_g.step,
        adam_d_step: state.adam_d.step,
    };
    let text = toml::to_string(&header).map_err(|e| Error::config(format!("checkpoint header: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());

    let mut body = Vec::new();
    let mut count = 0u32;
    state.nets.visit("", &mut |name, t, _| {
        put_tensor(&mut body, name, t);
        count += 1;
    });
    for (tag, adam) in [("g", &state.adam_g), ("d", &state.adam_d)] {
        for (moment, map) in [("m", &adam.m), ("v", &adam.v)] {
            for (name, t) in map {
                put_tensor(&mut body, &format!("adam.{tag}.{moment}.{name}"), t);
                count += 1;
            }
        }
    }
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let n = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(n)?)
            .map_err(|_| Error::format(self.path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::format(self.path, format!("tensor {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let len = len
            .filter(|l| l.checked_mul(4).is_some_and(|b| b <= self.bytes.len()))
            .ok_or_else(|| Error::format(self.path, format!("tensor {name} is too large")))?;
        let data = self
            .take(len * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

/// Parses checkpoint bytes; `path` only labels errors.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<TrainState> {
    let mut r = Reader { bytes, pos: 0, path };
    let magic = r.take(8).map_err(|_| Error::format(path, "not a checkpoint"))?;
    let version = r.u32();
    match version {
        Ok(CHECKPOINT_VERSION) if magic == CHECKPOINT_MAGIC => {}
        _ => {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: format!(
                    "magic {:?}, version {}",
                    String::from_utf8_lossy(magic),
                    version.map_or_else(|_| "?".to_string(), |v| v.to_string())
                ),
                expected: format!(
                    "magic {:?}, version {CHECKPOINT_VERSION}",
                    String::from_utf8_lossy(CHECKPOINT_MAGIC)
                ),
            })
        }
    }
    let len = r.u64()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::format(path, "header is not UTF-8"))?;
    let header: Header = toml::from_str(text).map_err(|e| Error::format(path, format!("header: {e}")))?;
    header.train.validate()?;
    let rng = header
        .rng
        .split_once(':')
        .and_then(|(s, w)| Some(RngState { seed: s.parse().ok()?, word_pos: w.parse().ok()? }))
        .ok_or_else(|| Error::format(path, format!("bad rng state {:?}", header.rng)))?;

    let mut nets = init_params(&header.net, &Rng::new(header.train.seed))?;
    let count = r.u32()? as usize;
    let mut expected = Vec::new();
    nets.visit("", &mut |name, t, kind| {
        expected.push((name.to_string(), t.shape().to_vec(), kind));
    });
    if count < expected.len() {
        return Err(Error::format(path, format!("{count} tensors, the network has {}", expected.len())));
    }
    let mut loaded = Vec::with_capacity(expected.len());
    for (name, shape, _) in &expected {
        let (found, t) = r.tensor()?;
        if &found != name || t.shape() != &shape[..] {
            return Err(Error::Incompatible(format!(
                "checkpoint tensor {found} {:?} where the network expects {name} {shape:?}",
                t.shape()
            )));
        }
        loaded.push(t);
    }
    let mut it = loaded.into_iter();
    nets.visit_mut("", &mut |_, t, _| *t = it.next().expect("counted above"));

    let trainable: BTreeMap<&str, &[usize]> = expected
        .iter()
        .filter(|(_, _, k)| *k == ParamKind::Trainable)
        .map(|(n, s, _)| (n.as_str(), &s[..]))
        .collect();
    let mut adam_g = AdamState { step: header.adam_g_step, ..AdamState::default() };
    let mut adam_d = AdamState { step: header.adam_d_step, ..AdamState::default() };
    for _ in expected.len()..count {
        let (name, t) = r.tensor()?;
        let parsed = name.strip_prefix("adam.").and_then(|rest| {
            let (tag, rest) = rest.split_once('.')?;
            let (moment, param) = rest.split_once('.')?;
            Some((tag, moment, param))
        });
        let (tag, moment, param) = parsed.ok_or_else(|| Error::format(path, format!("unexpected tensor {name}")))?;
        if trainable.get(param) != Some(&t.shape()) {
            return Err(Error::Incompatible(format!("optimizer moment {name} matches no parameter")));
        }
        let adam = match tag {
            "g" => &mut adam_g,
            "d" => &mut adam_d,
            _ => return Err(Error::format(path, format!("unexpected tensor {name}"))),
        };
        let map = match moment {
            "m" => &mut adam.m,
            "v" => &mut adam.v,
            _ => return Err(Error::format(path, format!("unexpected tensor {name}"))),
        };
        map.insert(param.to_string(), t);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after the last tensor"));
    }
    Ok(TrainState {
        train: header.train,
        net: header.net,
        nets,
        adam_g,
        adam_d,
        progress: header.progress,
        rng: Rng::from_state(rng),
    })
}

/// Writes through a temporary file so a crash never leaves a torn checkpoint.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
