//! Training loop: cross-entropy on the readout, SGD with momentum and cosine-annealed
//! learning rate, and per-epoch metric capture.

use serde::Serialize;

use crate::data::{Augment, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{epoch_rows, firing_rate, MetricRow};
use crate::model::{Architecture, ForwardOptions, Model, ParamKind};
use crate::rng::Rng;
use crate::stbp::{backward, BackwardOptions, GradientSet};
use crate::surrogate::{SgConfig, SgFamily, WidthConvention};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub v_th: f64,
    pub tau_init: f64,
    pub timesteps: usize,
    pub adaptive_sg: bool,
    pub trainable_decay: bool,
    pub sg_family: SgFamily,
    /// Width used when `adaptive_sg` is off.
    pub fixed_kappa: f64,
    pub width_convention: WidthConvention,
    pub detach_reset: bool,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            v_th: 0.5,
            tau_init: 0.2,
            timesteps: 2,
            adaptive_sg: true,
            trainable_decay: true,
            sg_family: SgFamily::Rectangular,
            fixed_kappa: 1.0,
            width_convention: WidthConvention::PeakMatched,
            detach_reset: false,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.batch_size == 0 || self.timesteps == 0 {
            return bad("batch_size and timesteps must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("need lr >= 0, momentum in [0, 1) and weight_decay >= 0");
        }
        if !(self.v_th > 0.0) || !(self.tau_init > 0.0 && self.tau_init < 1.0) || !(self.fixed_kappa > 0.0) {
            return bad("need v_th > 0, tau_init in (0, 1) and kappa > 0");
        }
        Ok(())
    }

    pub fn sg(&self) -> SgConfig {
        SgConfig { family: self.sg_family, kappa: self.fixed_kappa, adaptive: self.adaptive_sg, convention: self.width_convention }
    }
}

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch(format!("logits {shape:?} for {} labels", labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= shape[1]) {
        return Err(Error::InvalidArgument(format!("label {l} out of range for {} classes", shape[1])));
    }
    logits.check_finite("logits")?;
    Ok((shape[0], shape[1]))
}

/// Mean negative log-softmax at the true class, and its gradient w.r.t. the logits.
pub fn cross_entropy_grad(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, z) = check_labels(logits, labels)?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; n * z];
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits.data()[i * z..(i + 1) * z];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|o| (o - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[y];
        for k in 0..z {
            grad[i * z + k] = ((row[k] - lse).exp() - f64::from(u8::from(k == y))) / n as f64;
        }
    }
    Ok((loss / n as f64, Tensor::new(vec![n, z], grad)?))
}

pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    Ok(cross_entropy_grad(logits, labels)?.0)
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let z = logits.shape()[1];
    logits
        .data()
        .chunks(z)
        .map(|r| r.iter().enumerate().fold(0, |best, (k, &v)| if v > r[best] { k } else { best }))
        .collect()
}

/// `lr0 * (1 + cos(pi * epoch / epochs)) / 2`.
pub fn cosine_lr(lr0: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs == 0 {
        return lr0;
    }
    lr0 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos()) / 2.0
}

/// Momentum buffers aligned with [`Model::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    buffers: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(model: &Model) -> Self {
        Self { buffers: model.params().iter().map(|(_, _, p)| vec![0.0; p.len()]).collect() }
    }

    /// `m <- momentum * m + g + wd * p; p <- p - lr * m`. Decay parameters never receive
    /// weight decay and stay fixed unless `trainable_decay`.
    pub fn step(&mut self, model: &mut Model, grads: &GradientSet, lr: f64, momentum: f64, weight_decay: f64, trainable_decay: bool) -> Result<()> {
        let gs = grads.slices();
        let mut params = model.params_mut();
        if gs.len() != params.len() || params.len() != self.buffers.len() {
            return Err(Error::ShapeMismatch("gradient set does not match the model".into()));
        }
        for (((kind, p), g), m) in params.iter_mut().zip(gs).zip(&mut self.buffers) {
            if p.len() != g.len() {
                return Err(Error::ShapeMismatch("gradient slice length".into()));
            }
            let wd = match kind {
                ParamKind::Rho if !trainable_decay => continue,
                ParamKind::Rho => 0.0,
                _ => weight_decay,
            };
            for ((pi, gi), mi) in p.iter_mut().zip(g).zip(m.iter_mut()) {
                *mi = momentum * *mi + gi + wd * *pi;
                *pi -= lr * *mi;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_accuracy: f64,
    /// Statistics of the epoch's first forward pass.
    pub rows: Vec<MetricRow>,
    pub firing_rates: Vec<f64>,
}

impl EpochReport {
    pub fn mean_grad_available(&self) -> f64 {
        self.rows.iter().map(|r| r.grad_available).sum::<f64>() / self.rows.len().max(1) as f64
    }
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    opt: Sgd,
    shuffle_rng: Rng,
    augment_rng: Rng,
    pub epoch: usize,
}

impl Trainer {
    /// Initializes the model from stream 1 of `seed`; shuffling and augmentation use
    /// streams 2 and 3.
    pub fn new(cfg: TrainConfig, mut arch: Architecture, seed: u64) -> Result<Self> {
        cfg.validate()?;
        arch.timesteps = cfg.timesteps;
        let root = Rng::new(seed);
        let model = Model::new(arch, cfg.v_th, cfg.tau_init, &mut root.derive(1))?;
        Ok(Self { opt: Sgd::new(&model), model, shuffle_rng: root.derive(2), augment_rng: root.derive(3), cfg, epoch: 0 })
    }

    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochReport> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let lr = cosine_lr(self.cfg.lr, self.epoch, self.cfg.epochs);
        let sg = self.cfg.sg();
        let mut order: Vec<usize> = (0..data.len()).collect();
        self.shuffle_rng.shuffle(&mut order);
        let augment = Augment::default();
        let mut loss_sum = 0.0;
        let mut correct = 0;
        let mut rows = Vec::new();
        let mut rates = Vec::new();
        for (b, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let aug = self.cfg.augment.then_some((&augment, &mut self.augment_rng));
            let (x, labels) = data.batch(chunk, self.cfg.timesteps, aug)?;
            let (logits, tape) = match self.model.forward(&x, &ForwardOptions::train(sg)) {
                Ok(r) => r,
                Err(Error::NonFinite(what)) => return Err(self.diverged(&format!("non-finite {what}"))),
                Err(e) => return Err(e),
            };
            if b == 0 {
                rows = epoch_rows(self.epoch, &tape);
                rates = firing_rate(&tape);
            }
            let (loss, grad) = match cross_entropy_grad(&logits, &labels) {
                Ok(r) if r.0.is_finite() => r,
                Ok(_) | Err(Error::NonFinite(_)) => return Err(self.diverged("non-finite loss")),
                Err(e) => return Err(e),
            };
            loss_sum += loss * chunk.len() as f64;
            correct += argmax_rows(&logits).iter().zip(&labels).filter(|(p, y)| p == y).count();
            let grads = backward(&self.model, &tape, &grad, &BackwardOptions { detach_reset: self.cfg.detach_reset })?;
            self.opt.step(&mut self.model, &grads, lr, self.cfg.momentum, self.cfg.weight_decay, self.cfg.trainable_decay)?;
        }
        let report = EpochReport {
            epoch: self.epoch,
            lr,
            loss: loss_sum / data.len() as f64,
            train_accuracy: correct as f64 / data.len() as f64,
            rows,
            firing_rates: rates,
        };
        self.epoch += 1;
        Ok(report)
    }

    /// Mean loss and accuracy with running normalization statistics.
    pub fn evaluate(&mut self, data: &Dataset) -> Result<(f64, f64)> {
        if data.is_empty() {
            return Ok((0.0, 0.0));
        }
        let sg = self.cfg.sg();
        let idx: Vec<usize> = (0..data.len()).collect();
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in idx.chunks(self.cfg.batch_size) {
            let (x, labels) = data.batch(chunk, self.cfg.timesteps, None)?;
            let (logits, _) = self.model.forward(&x, &ForwardOptions::eval(sg))?;
            loss_sum += cross_entropy(&logits, &labels)? * chunk.len() as f64;
            correct += argmax_rows(&logits).iter().zip(&labels).filter(|(p, y)| p == y).count();
        }
        Ok((loss_sum / data.len() as f64, correct as f64 / data.len() as f64))
    }

    /// Per-layer firing rates over the first batch of `data` in inference mode.
    pub fn probe_rates(&mut self, data: &Dataset) -> Result<Vec<f64>> {
        let n = data.len().min(self.cfg.batch_size);
        if n == 0 {
            return Err(Error::InvalidArgument("no samples to measure firing rates on".into()));
        }
        let idx: Vec<usize> = (0..n).collect();
        let (x, _) = data.batch(&idx, self.cfg.timesteps, None)?;
        let (_, tape) = self.model.forward(&x, &ForwardOptions::eval(self.cfg.sg()))?;
        Ok(firing_rate(&tape))
    }

    fn diverged(&self, what: &str) -> Error {
        let mut msg = format!("{what} at epoch {}; layer state:", self.epoch);
        for (name, l) in self.model.layer_names().iter().zip(self.model.spiking_layers()) {
            let wmax = l.synapse.weight.data().iter().fold(0.0f64, |a, w| a.max(w.abs()));
            msg.push_str(&format!(
                "\n  {name}: tau={:.6} gamma_bar={:.6} beta_bar={:.6} max|w|={wmax:.6e}",
                l.tau(),
                l.gamma_bar(),
                l.beta_bar()
            ));
        }
        Error::Diverged(msg)
    }
}
