//! Two gradient oracles for the STBP engine.
//!
//! * Relaxed finite differences: spike wires carry the surrogate's antiderivative, so the
//!   engine's backward is the exact gradient of a smooth loss that central differences can
//!   check. Widths (and, in detached mode, reset gates) are frozen from a base forward.
//! * Brute force: forward-mode dual numbers pushed through a scalar re-implementation of a
//!   tiny fully-connected network, applying the surrogate at every spike node.
//!
//! Both use the loss `L = sum_{n,k} c_{nk} o_{nk}` for fixed coefficients `c`.

use crate::error::{Error, Result};
use crate::model::{Architecture, ForwardOptions, Frozen, LayerSpec, Model, ParamKind, SpikeMode, Stage, SynapseKind};
use crate::neuron::rho_from_decay;
use crate::normalization::NormMode;
use crate::rng::Rng;
use crate::stbp::{backward, BackwardOptions};
use crate::surrogate::{SgConfig, SgFamily};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for relative errors, so gradients that are zero up to round-off do not
/// divide by zero.
pub const REL_FLOOR: f64 = 1e-8;
pub const BRUTE_MAX_PARAMS: usize = 64;
pub const BRUTE_MAX_STEPS: usize = 4;

fn linear_loss(logits: &Tensor, coeffs: &Tensor) -> f64 {
    logits.data().iter().zip(coeffs.data()).map(|(o, c)| o * c).sum()
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn relaxed_opts<'a>(sg: SgConfig, frozen: Option<&'a Frozen>) -> ForwardOptions<'a> {
    ForwardOptions { sg, norm_mode: NormMode::TrainFrozen, spike_mode: SpikeMode::Relaxed, frozen }
}

/// Loss of the relaxed network.
pub fn relaxed_forward(model: &mut Model, x: &Tensor, coeffs: &Tensor, sg: SgConfig, frozen: Option<&Frozen>) -> Result<f64> {
    let (logits, _) = model.forward(x, &relaxed_opts(sg, frozen))?;
    Ok(linear_loss(&logits, coeffs))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdRecord {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FdReport {
    pub records: Vec<FdRecord>,
    /// Picks discarded because a perturbation crossed a kink of the relaxation.
    pub resampled: usize,
}

impl FdReport {
    pub fn max_rel_error(&self) -> f64 {
        self.records.iter().map(|r| r.rel_error).fold(0.0, f64::max)
    }

    pub fn merge(&mut self, other: FdReport) {
        self.records.extend(other.records);
        self.resampled += other.resampled;
    }
}

/// Relaxed loss plus the smooth-piece index of every membrane potential.
fn relaxed_eval(model: &mut Model, x: &Tensor, coeffs: &Tensor, sg: SgConfig, frozen: &Frozen) -> Result<(f64, Vec<u8>)> {
    let (logits, tape) = model.forward(x, &relaxed_opts(sg, Some(frozen)))?;
    let mut sig = Vec::new();
    for l in tape.layers() {
        for t in 0..l.steps {
            sig.extend(l.v_at(t).iter().map(|&v| sg.piece(v, l.v_th, l.kappas[t])));
        }
    }
    Ok((linear_loss(&logits, coeffs), sig))
}

/// Parameter indices to probe: every decay, a few affine entries, then random weights.
fn pick_order(model: &Model, rng: &mut Rng) -> Vec<usize> {
    let mut rho = Vec::new();
    let mut affine = Vec::new();
    let mut weights = Vec::new();
    let mut offset = 0;
    for (_, kind, values) in model.params() {
        let range = offset..offset + values.len();
        match kind {
            ParamKind::Rho => rho.extend(range),
            ParamKind::Gamma | ParamKind::Beta => affine.extend(range),
            ParamKind::Weight => weights.extend(range),
        }
        offset += values.len();
    }
    rng.shuffle(&mut affine);
    rng.shuffle(&mut weights);
    let mut order = rho;
    let take = affine.len().min(6);
    order.extend(affine.drain(..take));
    // interleave the remainder so a short budget still touches both kinds
    let mut rest: Vec<usize> = weights.into_iter().chain(affine).collect();
    rng.shuffle(&mut rest);
    order.extend(rest);
    order
}

/// Compares engine gradients of the relaxed network with central differences on `picks`
/// parameters.
pub fn relaxed_fd_check(
    model: &mut Model,
    x: &Tensor,
    coeffs: &Tensor,
    sg: SgConfig,
    detach_reset: bool,
    picks: usize,
    rng: &mut Rng,
) -> Result<FdReport> {
    let (_, base) = model.forward(x, &relaxed_opts(sg, None))?;
    let frozen = base.frozen(detach_reset);
    let (_, tape) = model.forward(x, &relaxed_opts(sg, Some(&frozen)))?;
    let grads = backward(model, &tape, coeffs, &BackwardOptions { detach_reset })?.flatten();
    let (_, base_sig) = relaxed_eval(model, x, coeffs, sg, &frozen)?;
    let names: Vec<String> = model
        .params()
        .iter()
        .flat_map(|(n, _, v)| (0..v.len()).map(move |i| format!("{n}[{i}]")))
        .collect();
    let mut report = FdReport::default();
    for idx in pick_order(model, rng) {
        if report.records.len() == picks {
            break;
        }
        let orig = *model.flat_param_mut(idx).expect("index from params");
        let eval = |m: &mut Model, value: f64| -> Result<(f64, Vec<u8>)> {
            *m.flat_param_mut(idx).expect("index from params") = value;
            relaxed_eval(m, x, coeffs, sg, &frozen)
        };
        let plus = eval(model, orig + FD_STEP);
        let minus = eval(model, orig - FD_STEP);
        *model.flat_param_mut(idx).expect("index from params") = orig;
        let ((lp, sp), (lm, sm)) = (plus?, minus?);
        if sp != base_sig || sm != base_sig {
            report.resampled += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * FD_STEP);
        let analytic = grads[idx];
        report.records.push(FdRecord {
            name: names[idx].clone(),
            index: idx,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    Ok(report)
}

/// Randomizes affine and decay parameters away from their symmetric initial values.
pub fn perturb_for_check(model: &mut Model, rng: &mut Rng) {
    for layer in model.spiking_layers_mut() {
        if let Some(n) = &mut layer.norm {
            for g in &mut n.gamma {
                *g = rng.uniform(0.5, 1.5);
            }
            for b in &mut n.beta {
                *b = rng.uniform(-0.5, 0.5);
            }
        }
        layer.neuron.rho = rho_from_decay(rng.uniform(0.1, 0.6));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdSuiteCase {
    pub preset: String,
    pub timesteps: usize,
    pub detach_reset: bool,
    pub params_checked: usize,
    pub max_rel_error: f64,
}

/// MLP-64 and ConvS at `T in {1, 2, 4}` in each of `detach_modes`, `picks` parameters per case.
pub fn fd_suite(seed: u64, picks: usize, family: SgFamily, detach_modes: &[bool]) -> Result<(Vec<FdSuiteCase>, FdReport)> {
    let mut rng = Rng::new(seed);
    let mut cases = Vec::new();
    let mut all = FdReport::default();
    for (preset, input, batch) in [("mlp-64", [6, 1, 1], 4), ("convs", [1, 8, 8], 3)] {
        for steps in [1, 2, 4] {
            for &detach in detach_modes {
                let arch = Architecture::preset(preset, input, 3, steps)?;
                let mut model = Model::new(arch, 0.5, 0.2, &mut rng)?;
                perturb_for_check(&mut model, &mut rng);
                let x = rng.normal_tensor(&[steps, batch, input[0], input[1], input[2]], 1.0);
                let coeffs = rng.normal_tensor(&[batch, 3], 1.0);
                let sg = SgConfig { family, ..SgConfig::default() };
                let rep = relaxed_fd_check(&mut model, &x, &coeffs, sg, detach, picks, &mut rng)?;
                cases.push(FdSuiteCase {
                    preset: preset.to_string(),
                    timesteps: steps,
                    detach_reset: detach,
                    params_checked: rep.records.len(),
                    max_rel_error: rep.max_rel_error(),
                });
                all.merge(rep);
            }
        }
    }
    Ok((cases, all))
}

#[derive(Debug, Clone, PartialEq)]
struct Dual {
    v: f64,
    d: Vec<f64>,
}

impl Dual {
    fn constant(v: f64, n: usize) -> Self {
        Self { v, d: vec![0.0; n] }
    }

    fn variable(v: f64, n: usize, index: usize) -> Self {
        let mut d = vec![0.0; n];
        d[index] = 1.0;
        Self { v, d }
    }

    fn add(&self, o: &Dual) -> Dual {
        Dual { v: self.v + o.v, d: self.d.iter().zip(&o.d).map(|(a, b)| a + b).collect() }
    }

    fn sub(&self, o: &Dual) -> Dual {
        Dual { v: self.v - o.v, d: self.d.iter().zip(&o.d).map(|(a, b)| a - b).collect() }
    }

    fn mul(&self, o: &Dual) -> Dual {
        Dual { v: self.v * o.v, d: self.d.iter().zip(&o.d).map(|(a, b)| a * o.v + self.v * b).collect() }
    }

    fn scale(&self, c: f64) -> Dual {
        Dual { v: self.v * c, d: self.d.iter().map(|a| a * c).collect() }
    }

    /// `f(self)` given `f` and `f'` at `self.v`.
    fn chain(&self, f: f64, df: f64) -> Dual {
        Dual { v: f, d: self.d.iter().map(|a| a * df).collect() }
    }

    fn one_minus(&self) -> Dual {
        Dual { v: 1.0 - self.v, d: self.d.iter().map(|a| -a).collect() }
    }
}

/// Gradient of `sum c * logits` w.r.t. every parameter (in [`Model::params`] order) for a
/// tiny fully-connected network, computed by forward-mode accumulation over the unrolled
/// graph with hard spikes and the surrogate at each spike node.
pub fn brute_force_grad(model: &Model, x: &Tensor, coeffs: &Tensor, sg: SgConfig, detach_reset: bool) -> Result<Vec<f64>> {
    let flat = model.flat_params();
    let p = flat.len();
    let shape = x.shape();
    if p > BRUTE_MAX_PARAMS {
        return Err(Error::InvalidArgument(format!("brute-force oracle limited to {BRUTE_MAX_PARAMS} parameters, model has {p}")));
    }
    if shape.len() != 5 || shape[0] > BRUTE_MAX_STEPS {
        return Err(Error::InvalidArgument(format!("brute-force oracle limited to T <= {BRUTE_MAX_STEPS}, got input {shape:?}")));
    }
    let (steps, batch) = (shape[0], shape[1]);
    let features: usize = shape[2..].iter().product();
    let mut cursor = 0usize;
    let mut take = |len: usize| -> Vec<Dual> {
        let out = (cursor..cursor + len).map(|i| Dual::variable(flat[i], p, i)).collect();
        cursor += len;
        out
    };
    // acts[t][n][i]
    let mut acts: Vec<Vec<Vec<Dual>>> = (0..steps)
        .map(|t| {
            (0..batch)
                .map(|n| (0..features).map(|i| Dual::constant(x.data()[(t * batch + n) * features + i], p)).collect())
                .collect()
        })
        .collect();
    for stage in &model.stages {
        let layer = match stage {
            Stage::Spiking(l) => l,
            _ => return Err(Error::InvalidArgument("brute-force oracle handles fully-connected stages only".into())),
        };
        let (fan_in, out) = match layer.synapse.kind {
            SynapseKind::Fc { in_features, out_features } => (in_features, out_features),
            SynapseKind::Conv(_) => return Err(Error::InvalidArgument("brute-force oracle handles fully-connected stages only".into())),
        };
        let w = take(out * fan_in);
        let affine = layer.norm.as_ref().map(|_| (take(out), take(out)));
        let rho = take(1).pop().expect("one decay");
        let mut cur: Vec<Vec<Vec<Dual>>> = acts
            .iter()
            .map(|frame| {
                frame
                    .iter()
                    .map(|xin| {
                        (0..out)
                            .map(|o| {
                                let mut acc = Dual::constant(0.0, p);
                                for i in 0..fan_in {
                                    acc = acc.add(&w[o * fan_in + i].mul(&xin[i]));
                                }
                                acc
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        if let (Some((gamma, beta)), Some(norm)) = (&affine, &layer.norm) {
            let count = (steps * batch) as f64;
            let a = norm.alpha * norm.v_th;
            for o in 0..out {
                let mut mean = Dual::constant(0.0, p);
                for frame in &cur {
                    for row in frame {
                        mean = mean.add(&row[o]);
                    }
                }
                let mean = mean.scale(1.0 / count);
                let mut var = Dual::constant(0.0, p);
                for frame in &cur {
                    for row in frame {
                        let dev = row[o].sub(&mean);
                        var = var.add(&dev.mul(&dev));
                    }
                }
                let var = var.scale(1.0 / count);
                let s = (var.v + norm.eps).sqrt();
                let inv_std = var.chain(1.0 / s, -0.5 / (s * s * s));
                for frame in &mut cur {
                    for row in frame.iter_mut() {
                        let xh = row[o].sub(&mean).mul(&inv_std);
                        row[o] = gamma[o].mul(&xh).scale(a).add(&beta[o]);
                    }
                }
            }
        }
        let tau_v = 1.0 / (1.0 + (-rho.v).exp());
        let tau = rho.chain(tau_v, tau_v * (1.0 - tau_v));
        let v_th = layer.neuron.v_th;
        let gamma_bar = affine.as_ref().map_or(1.0, |(g, _)| g.iter().map(|d| d.v).sum::<f64>() / out as f64);
        let mut spikes: Vec<Vec<Vec<Dual>>> = Vec::with_capacity(steps);
        let mut v_prev: Vec<Vec<Dual>> = Vec::new();
        for (t, frame) in cur.into_iter().enumerate() {
            let kappa = sg.width_at(tau_v, gamma_bar, v_th, t + 1);
            let mut v_now = Vec::with_capacity(batch);
            let mut s_now = Vec::with_capacity(batch);
            for (n, row) in frame.into_iter().enumerate() {
                let mut vs = Vec::with_capacity(out);
                let mut ss = Vec::with_capacity(out);
                for (o, input) in row.into_iter().enumerate() {
                    let v = if t == 0 {
                        input
                    } else {
                        let prev_v: &Dual = &v_prev[n][o];
                        let prev_s: &Dual = &spikes[t - 1][n][o];
                        let gate = if detach_reset { Dual::constant(prev_s.v, p) } else { prev_s.clone() };
                        tau.mul(prev_v).mul(&gate.one_minus()).add(&input)
                    };
                    let fired = if v.v >= v_th { 1.0 } else { 0.0 };
                    let s = v.chain(fired, sg.grad(v.v, v_th, kappa));
                    vs.push(v);
                    ss.push(s);
                }
                v_now.push(vs);
                s_now.push(ss);
            }
            v_prev = v_now;
            spikes.push(s_now);
        }
        acts = spikes;
    }
    let classes = model.readout.shape()[0];
    let w_out = take(classes * features_of(&acts));
    let fan = features_of(&acts);
    let mut loss = Dual::constant(0.0, p);
    for frame in &acts {
        for (n, row) in frame.iter().enumerate() {
            for k in 0..classes {
                let c = coeffs.data()[n * classes + k] / steps as f64;
                for j in 0..fan {
                    loss = loss.add(&w_out[k * fan + j].mul(&row[j]).scale(c));
                }
            }
        }
    }
    if cursor != p {
        return Err(Error::InvalidArgument("parameter walk did not cover the model".into()));
    }
    Ok(loss.d)
}

fn features_of(acts: &[Vec<Vec<Dual>>]) -> usize {
    acts[0][0].len()
}

/// Engine gradient of the same linear loss with hard spikes.
pub fn engine_grad(model: &mut Model, x: &Tensor, coeffs: &Tensor, sg: SgConfig, detach_reset: bool) -> Result<Vec<f64>> {
    let (_, tape) = model.forward(x, &ForwardOptions::probe(sg))?;
    Ok(backward(model, &tape, coeffs, &BackwardOptions { detach_reset })?.flatten())
}

pub struct TinyInstance {
    pub model: Model,
    pub x: Tensor,
    pub coeffs: Tensor,
    pub sg: SgConfig,
}

/// Random network with at most 3 spiking layers of at most 4 neurons, `T <= 4` and at most
/// 64 parameters.
pub fn tiny_instance(rng: &mut Rng) -> Result<TinyInstance> {
    loop {
        let steps = 1 + rng.below(BRUTE_MAX_STEPS);
        let inputs = 1 + rng.below(3);
        let depth = 1 + rng.below(3);
        let layers: Vec<LayerSpec> = (0..depth).map(|_| LayerSpec::Fc { out: 1 + rng.below(4) }).collect();
        let classes = 1 + rng.below(3);
        let normalize = rng.coin();
        let arch = Architecture { input: [inputs, 1, 1], layers, timesteps: steps, classes, normalize };
        let v_th = rng.uniform(0.3, 1.0);
        let mut model = Model::new(arch, v_th, 0.2, rng)?;
        if model.param_count() > BRUTE_MAX_PARAMS {
            continue;
        }
        perturb_for_check(&mut model, rng);
        for (_, slice) in model.params_mut() {
            for v in slice.iter_mut() {
                // larger weights push more neurons across threshold
                *v *= 1.5;
            }
        }
        let batch = 2 + rng.below(2);
        let x = rng.normal_tensor(&[steps, batch, inputs, 1, 1], 1.0);
        let coeffs = rng.normal_tensor(&[batch, classes], 1.0);
        let family = [SgFamily::Rectangular, SgFamily::Triangular, SgFamily::Sigmoid, SgFamily::Atan][rng.below(4)];
        let sg = SgConfig { family, kappa: rng.uniform(0.3, 1.5), adaptive: rng.coin(), ..SgConfig::default() };
        return Ok(TinyInstance { model, x, coeffs, sg });
    }
}

/// `|a - b| <= tol * max(1, |a|, |b|)` elementwise; returns the worst scaled difference.
pub fn max_scaled_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / 1f64.max(x.abs()).max(y.abs())).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BruteReport {
    pub instances: usize,
    pub max_scaled_diff: f64,
    pub nonzero_grads: usize,
}

pub fn brute_suite(seed: u64, instances: usize, detach_reset: bool) -> Result<BruteReport> {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    let mut nonzero = 0;
    for _ in 0..instances {
        let mut inst = tiny_instance(&mut rng)?;
        let oracle = brute_force_grad(&inst.model, &inst.x, &inst.coeffs, inst.sg, detach_reset)?;
        let engine = engine_grad(&mut inst.model, &inst.x, &inst.coeffs, inst.sg, detach_reset)?;
        worst = worst.max(max_scaled_diff(&oracle, &engine));
        nonzero += engine.iter().filter(|g| **g != 0.0).count();
    }
    Ok(BruteReport { instances, max_scaled_diff: worst, nonzero_grads: nonzero })
}
