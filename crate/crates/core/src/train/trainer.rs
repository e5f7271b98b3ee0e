use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::autodiff::Tape;
use crate::data::{batches, derive_seed, Batch, Sample};
use crate::error::{Error, Result};
use crate::loss::{hybrid_loss, LossConfig};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{Csdn, ForwardOptions};

use super::checkpoint::Checkpoint;
use super::optim::{adam_step, AdamState};
use super::TrainConfig;

pub const LOG_HEADER: &str = "epoch,loss,lr,val_dsc_lumen,val_dsc_eem,val_hd95_lumen,val_hd95_eem";

const SHUFFLE_STREAM: u64 = 2;
const AUGMENT_STREAM: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValSummary {
    pub dsc_lumen: f64,
    pub dsc_eem: f64,
    pub hd95_lumen: Option<f64>,
    pub hd95_eem: Option<f64>,
}

impl ValSummary {
    pub fn from_report(r: &MetricsReport) -> Self {
        ValSummary { dsc_lumen: r.lumen.dsc, dsc_eem: r.eem.dsc, hd95_lumen: r.lumen.hd95_mm, hd95_eem: r.eem.hd95_mm }
    }

    /// Model-selection score: mean of the two region DSCs.
    pub fn score(&self) -> f64 {
        0.5 * (self.dsc_lumen + self.dsc_eem)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// Zero-based epoch index.
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub val: Option<ValSummary>,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{:.6}", v));
        let mut s = format!("{},{:.8},{:e}", self.epoch, self.loss, self.lr);
        match &self.val {
            Some(v) => {
                let _ = write!(s, ",{:.6},{:.6},{},{}", v.dsc_lumen, v.dsc_eem, opt(v.hd95_lumen), opt(v.hd95_eem));
            }
            None => s.push_str(",,,,"),
        }
        s
    }
}

/// Owns the network and optimizer state of one training run.
pub struct Trainer {
    net: Csdn<f32>,
    state: AdamState<f32>,
    cfg: TrainConfig,
    loss: LossConfig,
    epoch: usize,
    global_step: u64,
    best: Option<f64>,
}

impl Trainer {
    pub fn new(net: Csdn<f32>, cfg: TrainConfig, loss: LossConfig) -> Result<Self> {
        cfg.validate()?;
        loss.validate()?;
        Ok(Trainer { net, state: AdamState::default(), cfg, loss, epoch: 0, global_step: 0, best: None })
    }

    /// Continues from a checkpoint. The checkpoint's seed replaces
    /// `cfg.seed` so shuffling and augmentation stay on the original
    /// trajectory. A plain weight file starts with fresh moments.
    pub fn resume(ck: Checkpoint<f32>, mut cfg: TrainConfig, loss: LossConfig) -> Result<Self> {
        let state = match ck.optimizer {
            Some(s) => {
                if cfg.seed != ck.seed {
                    log::warn!("using the checkpoint's seed {} instead of {}", ck.seed, cfg.seed);
                }
                cfg.seed = ck.seed;
                s
            }
            None => {
                log::warn!("checkpoint has no optimizer state; starting with fresh moments");
                AdamState::default()
            }
        };
        let mut t = Trainer::new(ck.net, cfg, loss)?;
        t.state = state;
        t.epoch = ck.epoch;
        t.global_step = ck.global_step;
        t.best = ck.best_score;
        Ok(t)
    }

    pub fn net(&self) -> &Csdn<f32> {
        &self.net
    }

    pub fn into_net(self) -> Csdn<f32> {
        self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn optimizer(&self) -> &AdamState<f32> {
        &self.state
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn best_score(&self) -> Option<f64> {
        self.best
    }

    pub fn checkpoint(&self) -> Checkpoint<f32> {
        Checkpoint {
            net: self.net.clone(),
            optimizer: Some(self.state.clone()),
            epoch: self.epoch,
            global_step: self.global_step,
            seed: self.cfg.seed,
            best_score: self.best,
        }
    }

    /// Loss of the batch under train-mode forward, without updating anything.
    pub fn batch_loss(&self, batch: &Batch) -> Result<f64> {
        let mut tape = Tape::inference();
        let x = tape.constant(batch.frames.clone());
        let (out, _) = self.net.forward(&mut tape, x, ForwardOptions::train())?;
        let l = hybrid_loss(&mut tape, out.main, &out.aux, &batch.labels, &self.loss)?;
        Ok(tape.value(l).data()[0] as f64)
    }

    /// One optimizer step on `batch` at rate `lr`; returns the batch loss.
    /// `batch_index` only labels errors.
    pub fn step(&mut self, batch: &Batch, lr: f64, batch_index: usize) -> Result<f64> {
        let non_finite = |ids: &[String]| {
            log::error!("non-finite loss at epoch {} batch {} (samples {})", self.epoch, batch_index, ids.join(" "));
            Error::NonFiniteLoss { epoch: self.epoch, batch: batch_index }
        };
        let mut tape = Tape::new();
        let x = tape.constant(batch.frames.clone());
        let forward = self.net.forward(&mut tape, x, ForwardOptions::train()).and_then(|(out, bn)| {
            let l = hybrid_loss(&mut tape, out.main, &out.aux, &batch.labels, &self.loss)?;
            Ok((l, bn))
        });
        let (l, bn) = match forward {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => return Err(non_finite(&batch.ids)),
            Err(e) => return Err(e),
        };
        let loss = tape.value(l).data()[0] as f64;
        if !loss.is_finite() {
            return Err(non_finite(&batch.ids));
        }
        let grads = match tape.backward(l) {
            Ok(g) => g.into_named(),
            Err(Error::NonFinite { .. }) => return Err(non_finite(&batch.ids)),
            Err(e) => return Err(e),
        };
        adam_step(self.net.params_mut(), &grads, &mut self.state, &self.cfg.adam, lr)?;
        self.net.apply_bn_updates(bn)?;
        self.global_step += 1;
        Ok(loss)
    }

    /// Batches of epoch `epoch`: shuffle and augmentation seeds derive from
    /// the run seed and the epoch index.
    pub fn epoch_batches<'a>(&'a self, train: &'a [Sample], epoch: usize) -> Result<impl Iterator<Item = Batch> + 'a> {
        let seed = self.cfg.seed;
        batches(
            train,
            self.cfg.batch_size,
            Some(derive_seed(seed, SHUFFLE_STREAM, epoch as u64)),
            Some((&self.cfg.augment, derive_seed(seed, AUGMENT_STREAM, epoch as u64))),
        )
    }

    /// Runs the next epoch; returns the mean batch loss.
    pub fn train_epoch(&mut self, train: &[Sample]) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let epoch = self.epoch;
        let lr = self.cfg.lr_at_epoch(epoch);
        let list: Vec<Batch> = self.epoch_batches(train, epoch)?.collect();
        let mut total = 0.0;
        for (i, b) in list.iter().enumerate() {
            total += self.step(b, lr, i)?;
        }
        self.epoch += 1;
        Ok(total / list.len() as f64)
    }

    pub fn validate(&self, val: &[Sample]) -> Result<MetricsReport> {
        evaluate(&self.net, val, self.cfg.batch_size)
    }

    /// Trains until `cfg.epochs` epochs are complete. With `out`, appends to
    /// `train_log.csv` and writes `last.ckpt` and `best.ckpt` there.
    pub fn fit(&mut self, train: &[Sample], val: &[Sample], out: Option<&Path>) -> Result<Vec<EpochRecord>> {
        let mut records = Vec::new();
        if let Some(dir) = out {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        while self.epoch < self.cfg.epochs {
            let epoch = self.epoch;
            let lr = self.cfg.lr_at_epoch(epoch);
            let start = std::time::Instant::now();
            let loss = self.train_epoch(train)?;
            let last = self.epoch == self.cfg.epochs;
            let due = (epoch + 1).is_multiple_of(self.cfg.val_every) || last;
            let val = if due && !val.is_empty() { Some(ValSummary::from_report(&self.validate(val)?)) } else { None };
            let mut improved = false;
            if let Some(v) = &val {
                if self.best.is_none_or(|b| v.score() > b) {
                    self.best = Some(v.score());
                    improved = true;
                }
            }
            let rec = EpochRecord { epoch, loss, lr, val };
            log::info!(
                "epoch {} loss {:.5} lr {:.2e}{} ({:.1}s)",
                epoch,
                loss,
                lr,
                val.map_or_else(String::new, |v| format!(" val dsc lumen {:.4} eem {:.4}", v.dsc_lumen, v.dsc_eem)),
                start.elapsed().as_secs_f64()
            );
            if let Some(dir) = out {
                append_log(&dir.join("train_log.csv"), &rec)?;
                if improved {
                    self.checkpoint().save(dir.join("best.ckpt"))?;
                }
                if (epoch + 1).is_multiple_of(self.cfg.checkpoint_every) || last {
                    self.checkpoint().save(dir.join("last.ckpt"))?;
                }
            }
            records.push(rec);
        }
        Ok(records)
    }
}

fn append_log(path: &Path, rec: &EpochRecord) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(LOG_HEADER);
        text.push('\n');
    }
    text.push_str(&rec.csv_row());
    text.push('\n');
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
