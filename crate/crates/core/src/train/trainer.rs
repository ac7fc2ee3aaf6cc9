use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::{cosine_lr, AdamW, AdamWConfig, PROB_CLAMP};
use crate::autodiff::{Graph, Tensor};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::eval::{confusion_metrics, predict_scores};
use crate::model::{save_checkpoint, Checkpoint, Model, ParamMode};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Storage {
    /// Parameters and moments are rounded to `f32` after every step, so
    /// 32-bit checkpoints reload exactly.
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub eta_min: f64,
    pub seed: u64,
    pub shuffle: bool,
    pub storage: Storage,
    /// Decision threshold for validation metrics.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            lr0: 0.005,
            epochs: 50,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            eta_min: 0.0,
            seed: 0,
            shuffle: true,
            storage: Storage::F32,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "batch_size and epochs must be at least 1".into(),
            ));
        }
        if !(self.lr0 > 0.0) || self.eta_min < 0.0 || self.weight_decay < 0.0 || !(self.eps > 0.0) {
            return Err(Error::Config(
                "lr0 and eps must be positive, eta_min and weight_decay non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config(format!(
                "betas {:?} must lie in [0, 1)",
                self.betas
            )));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            betas: self.betas,
            eps: self.eps,
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        cosine_lr(epoch, self.epochs, self.lr0, self.eta_min)
    }
}

/// Loss and parameter gradients for one example.
pub fn sample_gradients(model: &Model, sample: &Sample) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut graph = Graph::new();
    let x = graph.constant(Tensor::new(&sample.dims, sample.input.clone())?);
    let fwd = model.forward(&mut graph, x, ParamMode::Trainable)?;
    let loss = graph.bce_logits(fwd.logits, f64::from(sample.label), PROB_CLAMP)?;
    let grads = graph.backward(loss)?;
    let per_param = fwd
        .params
        .iter()
        .zip(&model.params)
        .map(|(&v, p)| grads.get_or_zeros(v, p.tensor.len()))
        .collect();
    Ok((graph.value(loss).item(), per_param))
}

/// Model plus optimizer, stepped one mini-batch at a time.
pub struct Trainer {
    pub model: Model,
    pub optimizer: AdamW,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(mut model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.storage == Storage::F32 {
            model.round_to_f32();
        }
        let sizes: Vec<usize> = model.params.iter().map(|p| p.tensor.len()).collect();
        let optimizer = AdamW::new(config.adamw(), &sizes);
        Ok(Trainer {
            model,
            optimizer,
            config,
        })
    }

    /// Continue from a checkpoint, reusing its optimizer moments if present.
    pub fn resume(ckpt: Checkpoint, config: TrainConfig) -> Result<Self> {
        let mut trainer = Trainer::new(ckpt.model, config)?;
        if let Some(state) = ckpt.optimizer {
            trainer.optimizer.state = state;
        }
        Ok(trainer)
    }

    /// Mean-loss gradient step on `batch`; returns the summed per-example
    /// loss. Examples run in parallel but gradients are summed in batch order.
    pub fn step(&mut self, batch: &[&Sample], lr: f64) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let model = &self.model;
        let results: Vec<Result<(f64, Vec<Vec<f64>>)>> = batch
            .par_iter()
            .map(|s| sample_gradients(model, s))
            .collect();
        let mut loss_sum = 0.0;
        let mut total: Option<Vec<Vec<f64>>> = None;
        for r in results {
            let (loss, grads) = r?;
            loss_sum += loss;
            match &mut total {
                None => total = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
        let mut grads = total.expect("batch is not empty");
        let scale = 1.0 / batch.len() as f64;
        grads.iter_mut().flatten().for_each(|g| *g *= scale);

        let names: Vec<String> = self.model.params.iter().map(|p| p.name.clone()).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let mut slices: Vec<&mut [f64]> = self
            .model
            .params
            .iter_mut()
            .map(|p| p.tensor.data_mut())
            .collect();
        self.optimizer.step(&mut slices, &grads, &names, lr)?;
        if self.config.storage == Storage::F32 {
            self.model.round_to_f32();
            self.optimizer.round_to_f32();
        }
        Ok(loss_sum)
    }

    pub fn checkpoint(&self, epoch: usize) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            epoch,
            seed: self.config.seed,
            optimizer: Some(self.optimizer.state.clone()),
        }
    }

    /// Example order for `epoch`.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        if self.config.shuffle {
            order.shuffle(&mut rng_for(self.config.seed, "shuffle", epoch as u64));
        }
        order
    }

    /// Train for one epoch; returns the mean per-example loss.
    pub fn run_epoch(&mut self, train: &[Sample], epoch: usize) -> Result<f64> {
        let lr = self.config.lr(epoch);
        let order = self.epoch_order(train.len(), epoch);
        let mut loss = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            loss += self.step(&batch, lr)?;
        }
        Ok(loss / train.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_tpr: f64,
    pub val_tnr: f64,
    pub val_f1: f64,
    pub val_auroc: Option<f64>,
}

pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best: Checkpoint,
    pub final_checkpoint: Checkpoint,
    /// 1-based epoch of `best`.
    pub best_epoch: usize,
    pub steps: u64,
}

pub const HISTORY_HEADER: &str = "epoch,lr,train_loss,val_tpr,val_tnr,val_f1,val_auroc";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        let auroc = r.val_auroc.map_or_else(String::new, |a| a.to_string());
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.lr, r.train_loss, r.val_tpr, r.val_tnr, r.val_f1, auroc
        ));
    }
    out
}

/// Full training run. With `out_dir`, writes `history.csv`, `best.json` and
/// `final.json` (each checkpoint beside its `.f32` blob). The best
/// checkpoint has the highest validation F1, earliest epoch on ties; with
/// no validation data it is the final one.
pub fn train_loop(
    model: Model,
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut trainer = Trainer::new(model, config.clone())?;
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    for epoch in 0..config.epochs {
        let lr = config.lr(epoch);
        let train_loss = trainer.run_epoch(train, epoch)?;
        let record = if val.is_empty() {
            EpochRecord {
                epoch: epoch + 1,
                lr,
                train_loss,
                val_tpr: 0.0,
                val_tnr: 0.0,
                val_f1: 0.0,
                val_auroc: None,
            }
        } else {
            let scores = predict_scores(&trainer.model, val)?;
            let labels: Vec<u8> = val.iter().map(|s| s.label).collect();
            let report = confusion_metrics(&scores, &labels, config.threshold)?;
            if best.as_ref().is_none_or(|(f1, _, _)| report.f1 > *f1) {
                best = Some((report.f1, epoch + 1, trainer.checkpoint(epoch + 1)));
            }
            EpochRecord {
                epoch: epoch + 1,
                lr,
                train_loss,
                val_tpr: report.tpr,
                val_tnr: report.tnr,
                val_f1: report.f1,
                val_auroc: report.auroc,
            }
        };
        log::info!(
            "epoch {}/{} lr {:.5} loss {:.4} val f1 {:.4}",
            record.epoch,
            config.epochs,
            lr,
            train_loss,
            record.val_f1
        );
        history.push(record);
        if let Some(dir) = out_dir {
            write_history(&history, dir)?;
        }
    }
    let final_checkpoint = trainer.checkpoint(config.epochs);
    let (best_epoch, best) = match best {
        Some((_, e, c)) => (e, c),
        None => (config.epochs, final_checkpoint.clone()),
    };
    if let Some(dir) = out_dir {
        save_checkpoint(&best, &dir.join("best.json"))?;
        save_checkpoint(&final_checkpoint, &dir.join("final.json"))?;
    }
    Ok(TrainOutcome {
        history,
        best,
        final_checkpoint,
        best_epoch,
        steps: trainer.optimizer.state.step,
    })
}

fn write_history(history: &[EpochRecord], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("history.csv");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(history_csv(history).as_bytes())
        .map_err(|e| Error::io(&path, e))
}
