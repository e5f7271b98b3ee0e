//! Checkpoint files: a weight file followed by the optimizer moments and a
//! trailer with the training position.

use std::path::Path;

use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};
use crate::model::io::{decode_weights, encode_weights};
use crate::model::Csdn;
use crate::tensor::Scalar;

use super::optim::{AdamState, Moments};

const OPTIMIZER_TAG: &[u8; 4] = b"ADAM";
const TRAILER_TAG: &[u8; 4] = b"TRLR";

#[derive(Clone, Debug)]
pub struct Checkpoint<T: Scalar> {
    pub net: Csdn<T>,
    /// `None` for a plain weight file.
    pub optimizer: Option<AdamState<T>>,
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: u64,
    pub seed: u64,
    /// Best validation score so far, if any validation ran.
    pub best_score: Option<f64>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::default();
        encode_weights(&mut e, &self.net);
        if let Some(opt) = &self.optimizer {
            e.bytes(OPTIMIZER_TAG);
            e.u64(opt.step);
            e.u32(opt.moments.len() as u32);
            for (name, mo) in &opt.moments {
                e.str(name);
                e.tensor(&mo.m);
                e.tensor(&mo.v);
            }
        }
        e.bytes(TRAILER_TAG);
        e.u64(self.epoch as u64);
        e.u64(self.global_step);
        e.u64(self.seed);
        e.u8(self.best_score.is_some() as u8);
        e.f64(self.best_score.unwrap_or(0.0));
        e.buf
    }

    /// Parses a checkpoint or a plain weight file (which yields epoch 0 and
    /// no optimizer state).
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes);
        let (cfg, store) = decode_weights::<T>(&mut d)?;
        let net = Csdn::from_parts(cfg, store)?;
        let mut ck = Checkpoint { net, optimizer: None, epoch: 0, global_step: 0, seed: 0, best_score: None };
        if d.remaining() == 0 {
            return Ok(ck);
        }
        let mut tag = d.take(4)?;
        if tag == OPTIMIZER_TAG {
            let step = d.u64()?;
            let mut opt = AdamState { step, ..Default::default() };
            for _ in 0..d.u32()? {
                let name = d.str()?;
                let (m, v) = (d.tensor()?, d.tensor()?);
                opt.moments.insert(name, Moments { m, v });
            }
            opt.check_against(ck.net.params())?;
            ck.optimizer = Some(opt);
            tag = d.take(4)?;
        }
        if tag != TRAILER_TAG {
            return Err(Error::Format("unrecognized section after the weights".into()));
        }
        ck.epoch = d.u64()? as usize;
        ck.global_step = d.u64()?;
        ck.seed = d.u64()?;
        let has_best = d.u8()? != 0;
        let best = d.f64()?;
        ck.best_score = has_best.then_some(best);
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        // Write then rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
