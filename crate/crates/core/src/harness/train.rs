//! AdamW training with polynomial or plateau learning-rate decay.
//!
//! Batch order is a Fisher-Yates shuffle drawn from `(seed, epoch)`, so a
//! run is fully determined by the configuration and can resume from any
//! epoch boundary.

use serde::{Deserialize, Serialize};

use super::data::SyntheticDataset;
use crate::config::{RunConfig, Schedule, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::{MetricReport, PredictionSet};
use crate::model::Hsvlt;
use crate::nn::Mode;
use crate::param::ParamRef;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Offset so batch shuffles never share a stream with parameter init.
const SHUFFLE_STREAM: u64 = 0x5348_5546_0000_0000;

/// Decoupled weight decay Adam over every trainable parameter.
#[derive(Clone, Debug)]
pub struct AdamW {
    params: Vec<ParamRef>,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Number of updates applied so far.
    pub t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(params: Vec<ParamRef>, cfg: &TrainConfig) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            params,
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn params(&self) -> &[ParamRef] {
        &self.params
    }

    /// `p ← p(1 − lr·wd) − lr·m̂/(√v̂ + eps)`. Parameters without a gradient
    /// still decay.
    pub fn step(&mut self, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, p) in self.params.iter().enumerate() {
            let grad = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
            let mut data = p.value().to_vec();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                data[i] = data[i] * (1.0 - lr * self.weight_decay) - lr * update;
            }
            p.set_data(data)?;
        }
        Ok(())
    }
}

/// Learning rate at `step` of `total` under polynomial decay.
pub fn poly_lr(lr0: f64, step: usize, total: usize, power: f64) -> f64 {
    let p = (step as f64 / total.max(1) as f64).min(1.0);
    lr0 * (1.0 - p).powf(power)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_map: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub epoch: usize,
    /// Plateau schedule multiplier.
    pub lr_scale: f64,
    pub best_loss: Option<f64>,
    pub bad_epochs: usize,
    pub loss_history: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
}

/// Forward every sample in eval mode, batch by batch, and return sigmoid scores (N, T).
pub fn predict_scores(model: &Hsvlt, data: &SyntheticDataset, batch_size: usize) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut scores = Vec::with_capacity(data.len() * data.num_labels());
    for chunk in idx.chunks(batch_size.max(1)) {
        let (images, _) = data.batch(chunk)?;
        scores.extend_from_slice(model.predict(&images)?.data());
    }
    Ok(scores)
}

pub fn evaluate(model: &Hsvlt, data: &SyntheticDataset, batch_size: usize) -> Result<(MetricReport, Vec<f64>)> {
    if data.num_labels() != model.cfg.num_labels {
        return Err(Error::ShapeMismatch {
            op: "evaluate",
            lhs: vec![data.len(), data.num_labels()],
            rhs: vec![model.cfg.num_labels],
        });
    }
    let scores = predict_scores(model, data, batch_size)?;
    let set = PredictionSet::new(scores.clone(), data.truth_flags(), data.len(), data.num_labels())?;
    Ok((MetricReport::compute(&set, 3)?, scores))
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Hsvlt,
    pub optimizer: AdamW,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Hsvlt::new(&cfg.model)?;
        let optimizer = AdamW::new(model.store.trainable().cloned().collect(), &cfg.train);
        Ok(Self {
            cfg: cfg.clone(),
            model,
            optimizer,
            state: TrainState { lr_scale: 1.0, ..TrainState::default() },
        })
    }

    pub fn batches_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.cfg.train.batch_size)
    }

    pub fn total_steps(&self, n: usize) -> usize {
        self.cfg.train.epochs * self.batches_per_epoch(n)
    }

    pub fn current_lr(&self, n: usize) -> f64 {
        let t = &self.cfg.train;
        match t.schedule {
            Schedule::Poly => poly_lr(t.lr, self.state.step, self.total_steps(n), t.power),
            Schedule::Plateau => t.lr * self.state.lr_scale,
        }
    }

    /// Sample order of `epoch`.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        Rng::derive(self.cfg.model.seed ^ SHUFFLE_STREAM, epoch as u64).shuffle(&mut order);
        order
    }

    /// Mean BCE of one batch.
    pub fn loss(&self, images: &Tensor, truths: &Tensor) -> Result<Tensor> {
        self.model.forward(images, Mode::Train)?.bce_with_logits(truths)
    }

    /// One optimizer update; returns the batch loss before the update.
    pub fn train_step(&mut self, images: &Tensor, truths: &Tensor, n: usize) -> Result<f64> {
        let lr = self.current_lr(n);
        self.model.store.zero_grad();
        let loss = self.loss(images, truths)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Divergence { step: self.state.step, loss: value });
        }
        loss.backward()?;
        self.optimizer.step(lr)?;
        self.state.step += 1;
        self.state.loss_history.push(value);
        Ok(value)
    }

    /// One pass over `data`; appends an [`EpochRecord`] with the training-set mAP.
    pub fn run_epoch(&mut self, data: &SyntheticDataset) -> Result<EpochRecord> {
        let n = data.len();
        let lr = self.current_lr(n);
        let order = self.epoch_order(self.state.epoch, n);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(self.cfg.train.batch_size) {
            let (images, truths) = data.batch(chunk)?;
            total += self.train_step(&images, &truths, n)?;
            batches += 1;
        }
        let mean_loss = total / batches as f64;
        if self.cfg.train.schedule == Schedule::Plateau {
            self.update_plateau(mean_loss);
        }
        let (report, _) = evaluate(&self.model, data, self.cfg.train.batch_size)?;
        let record = EpochRecord { epoch: self.state.epoch, mean_loss, train_map: report.map, lr };
        self.state.epoch += 1;
        self.state.epochs.push(record.clone());
        Ok(record)
    }

    fn update_plateau(&mut self, loss: f64) {
        match self.state.best_loss {
            Some(best) if loss >= best => {
                self.state.bad_epochs += 1;
                if self.state.bad_epochs >= self.cfg.train.plateau_patience {
                    self.state.lr_scale *= self.cfg.train.plateau_factor;
                    self.state.bad_epochs = 0;
                }
            }
            _ => {
                self.state.best_loss = Some(loss);
                self.state.bad_epochs = 0;
            }
        }
    }

    /// Trains until `train.epochs` or until the training mAP reaches
    /// `train.target_map`. `on_epoch` sees every record as it is produced.
    pub fn fit(&mut self, data: &SyntheticDataset, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<()> {
        if data.num_labels() != self.cfg.model.num_labels || data.meta.size != self.cfg.model.image_size[0] {
            return Err(Error::Config(format!(
                "dataset has {} labels at {}px, model expects {} at {:?}",
                data.num_labels(),
                data.meta.size,
                self.cfg.model.num_labels,
                self.cfg.model.image_size
            )));
        }
        while self.state.epoch < self.cfg.train.epochs {
            let record = self.run_epoch(data)?;
            on_epoch(&record);
            if self.cfg.train.target_map.is_some_and(|t| record.train_map >= t) {
                break;
            }
        }
        Ok(())
    }

    /// 1-based epoch at which training mAP first reached `target`.
    pub fn epochs_to(&self, target: f64) -> Option<usize> {
        self.state.epochs.iter().find(|r| r.train_map >= target).map(|r| r.epoch + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{Init, ParamStore};

    #[test]
    fn poly_schedule_values() {
        assert_eq!(poly_lr(1e-5, 0, 100, 0.9), 1e-5);
        assert!((poly_lr(1e-5, 50, 100, 0.9) - 1e-5 * 0.5f64.powf(0.9)).abs() < 1e-20);
        assert_eq!(poly_lr(1e-5, 100, 100, 0.9), 0.0);
    }

    #[test]
    fn adamw_first_step_matches_closed_form() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        let p = store.param("w", &[2], Init::Ones, &mut rng).unwrap();
        p.set_data(vec![1.0, -2.0]).unwrap();
        let cfg = TrainConfig::default();
        let mut opt = AdamW::new(vec![p.clone()], &cfg);
        p.value().mul(&Tensor::new(vec![3.0, 0.5], &[2]).unwrap()).unwrap().sum().backward().unwrap();
        opt.step(0.1).unwrap();
        // first bias-corrected step is g/(|g|+eps) = sign(g) up to eps
        let expect = |x: f64, g: f64| x * (1.0 - 0.1 * 0.01) - 0.1 * g / (g.abs() + 1e-8);
        let got = p.value().to_vec();
        assert!((got[0] - expect(1.0, 3.0)).abs() < 1e-15);
        assert!((got[1] - expect(-2.0, 0.5)).abs() < 1e-15);
    }

    #[test]
    fn plateau_cuts_lr_after_patience() {
        let mut cfg = RunConfig::desk();
        cfg.train.schedule = Schedule::Plateau;
        cfg.train.plateau_patience = 2;
        let mut tr = Trainer::new(&cfg).unwrap();
        for loss in [1.0, 0.9, 0.95, 0.92] {
            tr.update_plateau(loss);
        }
        assert!((tr.current_lr(8) - cfg.train.lr * 0.1).abs() < 1e-18);
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let tr = Trainer::new(&RunConfig::desk()).unwrap();
        let a = tr.epoch_order(0, 10);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_eq!(a, tr.epoch_order(0, 10));
        assert_ne!(a, tr.epoch_order(1, 10));
    }

    #[test]
    fn steps_lower_the_loss_on_a_fixed_batch() {
        let mut cfg = RunConfig::desk();
        cfg.train.epochs = 10;
        let data = SyntheticDataset::generate(0, 8, 5, 32).unwrap();
        let mut tr = Trainer::new(&cfg).unwrap();
        let (images, truths) = data.batch(&(0..8).collect::<Vec<_>>()).unwrap();
        let first = tr.train_step(&images, &truths, 8).unwrap();
        for _ in 0..5 {
            tr.train_step(&images, &truths, 8).unwrap();
        }
        let last = tr.loss(&images, &truths).unwrap().item();
        assert!(last < first, "{last} !< {first}");
        assert_eq!(tr.state.loss_history.len(), 6);
    }
}
