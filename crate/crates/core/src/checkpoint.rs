//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "BUPMCKPT"            8-byte magic
//! u32 version           currently 1
//! [u8; 32]              SHA-256 of the model configuration
//! u32 block count
//! blocks: u32 name length, name (UTF-8), u32 rank, rank x u64 extents, f64 values
//! ```
//!
//! Weights are stored under their parameter names. Phase, progress, optimizer moments
//! and metrics use the `meta.`, `optim.` and `metric.` prefixes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::AdamState;
use crate::train::{Phase, PhaseProgress};

pub const MAGIC: &[u8; 8] = b"BUPMCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Last phase that ran, with its progress; `None` for a fresh model.
    pub phase: Option<Phase>,
    pub progress: PhaseProgress,
    pub metrics: BTreeMap<String, f64>,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Checkpoint {
            model,
            phase: None,
            progress: PhaseProgress::default(),
            metrics: BTreeMap::new(),
        }
    }

    /// Progress to resume `phase` from: this checkpoint's if it stopped inside that
    /// phase, otherwise a fresh start.
    pub fn resume(&self, phase: Phase) -> PhaseProgress {
        if self.phase == Some(phase) {
            self.progress.clone()
        } else {
            PhaseProgress::default()
        }
    }

    fn blocks(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        let scalar = |name: &str, v: f64| (name.to_string(), Vec::new(), vec![v]);
        for (name, t) in self.model.params() {
            out.push((name, t.shape().to_vec(), t.data().to_vec()));
        }
        let cfg = &self.model.config.backbone;
        out.push((
            "meta.backbone_channels".into(),
            vec![cfg.channels_per_stage.len()],
            cfg.channels_per_stage.iter().map(|&c| c as f64).collect(),
        ));
        out.push(scalar("meta.input_channels", cfg.input_channels as f64));
        let phase_code = match self.phase {
            None => 0.0,
            Some(Phase::One) => 1.0,
            Some(Phase::TwoA) => 2.0,
            Some(Phase::TwoB) => 3.0,
        };
        out.push(scalar("meta.phase", phase_code));
        let p = &self.progress;
        out.push(scalar("meta.epoch", p.epochs as f64));
        out.push(scalar("meta.best_val", p.best_val));
        out.push(scalar("meta.stale", p.stale as f64));
        out.push(scalar(
            "meta.converged",
            if p.converged { 1.0 } else { 0.0 },
        ));
        if let Some(adam) = &p.adam {
            out.push(scalar("optim.adam.step", adam.step as f64));
            for (name, (m, v)) in &adam.moments {
                out.push((format!("optim.adam.m.{name}"), vec![m.len()], m.clone()));
                out.push((format!("optim.adam.v.{name}"), vec![v.len()], v.clone()));
            }
        }
        for (name, v) in &self.metrics {
            out.push(scalar(&format!("metric.{name}"), *v));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let blocks = self.blocks();
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&self.model.config.digest());
        buf.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
        for (name, shape, data) in blocks {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for e in shape {
                buf.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(bad("missing BUPMCKPT magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let count = r.u32()? as usize;
        let mut blocks: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| bad("block name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| bad("extent too large"))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| bad(format!("block {name} is truncated")))?;
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            if blocks.insert(name.clone(), (shape, data)).is_some() {
                return Err(bad(format!("duplicate block {name}")));
            }
        }
        if r.remaining() != 0 {
            return Err(bad("trailing bytes after the last block"));
        }
        decode(blocks, digest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn bad(message: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        message: message.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(bad("unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

fn decode(
    mut blocks: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    digest: [u8; 32],
) -> Result<Checkpoint> {
    let mut scalar = |name: &str| -> Result<f64> {
        match blocks.remove(name) {
            Some((shape, data)) if shape.is_empty() => Ok(data[0]),
            Some(_) => Err(bad(format!("{name} must be a scalar"))),
            None => Err(bad(format!("missing block {name}"))),
        }
    };
    let input_channels = scalar("meta.input_channels")? as usize;
    let phase = match scalar("meta.phase")? as u8 {
        0 => None,
        1 => Some(Phase::One),
        2 => Some(Phase::TwoA),
        3 => Some(Phase::TwoB),
        other => return Err(bad(format!("unknown phase code {other}"))),
    };
    let epochs = scalar("meta.epoch")? as usize;
    let best_val = scalar("meta.best_val")?;
    let stale = scalar("meta.stale")? as usize;
    let converged = scalar("meta.converged")? != 0.0;
    let adam_step = blocks.remove("optim.adam.step").map(|(_, d)| d[0] as u64);
    let (_, channels) = blocks
        .remove("meta.backbone_channels")
        .ok_or_else(|| bad("missing block meta.backbone_channels"))?;
    let config = ModelConfig {
        backbone: BackboneConfig {
            channels_per_stage: channels.iter().map(|&c| c as usize).collect(),
            input_channels,
        },
    };
    config.backbone.validate()?;
    if config.digest() != digest {
        return Err(bad(
            "configuration digest does not match the stored architecture",
        ));
    }
    let mut model = Model::init(config, 0)?;
    for (name, p) in model.params_mut() {
        let (shape, data) = blocks
            .remove(&name)
            .ok_or_else(|| bad(format!("missing weight block {name}")))?;
        if shape != p.shape() {
            return Err(bad(format!(
                "{name} has shape {shape:?}, expected {:?}",
                p.shape()
            )));
        }
        p.data_mut().copy_from_slice(&data);
    }
    let mut adam = adam_step.map(|step| AdamState {
        step,
        moments: BTreeMap::new(),
    });
    let mut metrics = BTreeMap::new();
    for (name, (shape, data)) in blocks {
        if let Some(metric) = name.strip_prefix("metric.") {
            if !shape.is_empty() {
                return Err(bad(format!("{name} must be a scalar")));
            }
            metrics.insert(metric.to_string(), data[0]);
        } else if let (Some(state), Some(rest)) = (adam.as_mut(), name.strip_prefix("optim.adam."))
        {
            let (which, param) = rest
                .split_once('.')
                .ok_or_else(|| bad(format!("malformed optimizer block {name}")))?;
            let entry = state.moments.entry(param.to_string()).or_default();
            match which {
                "m" => entry.0 = data,
                "v" => entry.1 = data,
                _ => return Err(bad(format!("malformed optimizer block {name}"))),
            }
        } else {
            return Err(bad(format!("unknown block {name}")));
        }
    }
    Ok(Checkpoint {
        model,
        phase,
        progress: PhaseProgress {
            epochs,
            best_val,
            stale,
            converged,
            adam,
        },
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let model = Model::init(ModelConfig::default(), 3).unwrap();
        let mut moments = BTreeMap::new();
        moments.insert(
            "verifier.dense0.bias".to_string(),
            (vec![0.5; 16], vec![0.25; 16]),
        );
        let mut ck = Checkpoint::new(model);
        ck.phase = Some(Phase::TwoA);
        ck.progress = PhaseProgress {
            epochs: 4,
            best_val: 0.125,
            stale: 1,
            converged: false,
            adam: Some(AdamState { step: 37, moments }),
        };
        ck.metrics.insert("val_loss".into(), 0.3);
        ck
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..8], b"BUPMCKPT");
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let fresh = Checkpoint::new(Model::init(ModelConfig::default(), 1).unwrap());
        let again = Checkpoint::from_bytes(&fresh.to_bytes()).unwrap();
        assert_eq!(again, fresh);
        assert_eq!(again.progress.best_val, f64::INFINITY);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
        let mut flipped = bytes.clone();
        flipped[14] ^= 0xff;
        assert!(Checkpoint::from_bytes(&flipped).is_err());
        let mut longer = bytes;
        longer.push(0);
        assert!(Checkpoint::from_bytes(&longer).is_err());
    }

    #[test]
    fn resume_only_matching_phase() {
        let ck = sample();
        assert_eq!(ck.resume(Phase::TwoA).epochs, 4);
        assert_eq!(ck.resume(Phase::TwoB), PhaseProgress::default());
    }
}
