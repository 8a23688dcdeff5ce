//! Instrumentation: membrane-potential statistics against their predicted distribution,
//! gradient-available proportions, firing rates and the AC/MAC energy model.

use serde::Serialize;

use crate::model::{LayerTape, Model, Stage, TapeCache};

/// Energy per accumulate, joules.
pub const E_AC: f64 = 0.9e-12;
/// Energy per multiply-accumulate, joules.
pub const E_MAC: f64 = 4.6e-12;

/// Count, mean and unbiased variance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Moments {
    pub count: usize,
    pub mean: f64,
    pub var: f64,
}

impl Moments {
    pub fn of<'a>(values: impl IntoIterator<Item = &'a f64>) -> Self {
        // two-pass over a buffered copy keeps the variance free of cancellation
        let v: Vec<f64> = values.into_iter().copied().collect();
        let count = v.len();
        if count == 0 {
            return Self::default();
        }
        let mean = v.iter().sum::<f64>() / count as f64;
        let var = if count > 1 {
            v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (count - 1) as f64
        } else {
            0.0
        };
        Self { count, mean, var }
    }
}

/// Predicted `(mean, variance)` of the normalized input current.
pub fn predicted_input(beta_bar: f64, gamma_bar: f64, v_th: f64) -> (f64, f64) {
    (beta_bar, (gamma_bar * v_th).powi(2))
}

/// Predicted `(mean, variance)` of the membrane potential at 1-based step `t` for neurons
/// that did not fire at `t - 1`.
pub fn predicted_potential(beta_bar: f64, gamma_bar: f64, v_th: f64, tau: f64, t: usize) -> (f64, f64) {
    let (m, v) = predicted_input(beta_bar, gamma_bar, v_th);
    if t <= 1 {
        (m, v)
    } else {
        ((1.0 + tau) * m, (1.0 + tau * tau) * v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerStepStats {
    pub layer: String,
    /// 1-based.
    pub t: usize,
    pub input: Moments,
    pub potential: Moments,
    /// Potential restricted to neurons silent at the previous step (all neurons at `t = 1`).
    pub potential_no_reset: Moments,
}

/// Per-(layer, timestep) statistics over batch and space.
pub fn mpd_stats(tape: &TapeCache) -> Vec<LayerStepStats> {
    tape.layers().into_iter().flat_map(layer_stats).collect()
}

fn layer_stats(l: &LayerTape) -> Vec<LayerStepStats> {
    (0..l.steps)
        .map(|t| {
            let v = l.v_at(t);
            let nr = if t == 0 {
                Moments::of(v)
            } else {
                Moments::of(v.iter().zip(l.s_at(t - 1)).filter(|(_, &s)| s == 0.0).map(|(v, _)| v))
            };
            LayerStepStats { layer: l.name.clone(), t: t + 1, input: Moments::of(l.current_at(t)), potential: Moments::of(v), potential_no_reset: nr }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoremRow {
    pub layer: String,
    pub t: usize,
    pub empirical_input: (f64, f64),
    pub predicted_input: (f64, f64),
    pub empirical_potential: (f64, f64),
    pub predicted_potential: (f64, f64),
    /// `|empirical - predicted|` of the potential mean and variance.
    pub abs_dev: (f64, f64),
    pub rel_dev: (f64, f64),
}

/// Empirical input and (no-reset) potential statistics next to their predictions.
pub fn theorem_check(tape: &TapeCache) -> Vec<TheoremRow> {
    let mut rows = Vec::new();
    for l in tape.layers() {
        for s in layer_stats(l) {
            let pi = predicted_input(l.beta_bar, l.gamma_bar, l.v_th);
            let pv = predicted_potential(l.beta_bar, l.gamma_bar, l.v_th, l.tau, s.t);
            let ev = (s.potential_no_reset.mean, s.potential_no_reset.var);
            let abs = ((ev.0 - pv.0).abs(), (ev.1 - pv.1).abs());
            let rel = (abs.0 / pv.0.abs().max(1e-12), abs.1 / pv.1.abs().max(1e-12));
            rows.push(TheoremRow {
                layer: s.layer,
                t: s.t,
                empirical_input: (s.input.mean, s.input.var),
                predicted_input: pi,
                empirical_potential: ev,
                predicted_potential: pv,
                abs_dev: abs,
                rel_dev: rel,
            });
        }
    }
    rows
}

/// Fraction of `v` with `|v - v_th| < kappa / 2`.
pub fn proportion_in_support(v: &[f64], v_th: f64, kappa: f64) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().filter(|&&x| (x - v_th).abs() < kappa / 2.0).count() as f64 / v.len() as f64
}

/// `[layer][t]` gradient-available proportions using the widths recorded in the tape.
pub fn grad_available_proportion(tape: &TapeCache) -> Vec<Vec<f64>> {
    tape.layers()
        .iter()
        .map(|l| (0..l.steps).map(|t| proportion_in_support(l.v_at(t), l.v_th, l.kappas[t])).collect())
        .collect()
}

/// Per-layer mean spike value over neurons, timesteps and batch.
pub fn firing_rate(tape: &TapeCache) -> Vec<f64> {
    tape.layers().iter().map(|l| l.s.iter().sum::<f64>() / l.s.len() as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub layer: String,
    pub t: usize,
    pub kappa: f64,
    pub tau: f64,
    pub gamma_bar: f64,
    pub beta_bar: f64,
    pub input_mean: f64,
    pub input_var: f64,
    pub pred_input_mean: f64,
    pub pred_input_var: f64,
    pub v_mean: f64,
    pub v_var: f64,
    pub v_nr_count: usize,
    pub v_nr_mean: f64,
    pub v_nr_var: f64,
    pub pred_v_mean: f64,
    pub pred_v_var: f64,
    pub grad_available: f64,
    pub firing_rate: f64,
}

pub const CSV_HEADER: &str = "epoch,layer,t,kappa,tau,gamma_bar,beta_bar,input_mean,input_var,pred_input_mean,pred_input_var,v_mean,v_var,v_nr_count,v_nr_mean,v_nr_var,pred_v_mean,pred_v_var,grad_available,firing_rate";

impl MetricRow {
    pub fn csv_line(&self) -> String {
        // `{:e}` is the shortest round-trip form, so rows are bit-faithful and deterministic
        format!(
            "{},{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.epoch,
            self.layer,
            self.t,
            self.kappa,
            self.tau,
            self.gamma_bar,
            self.beta_bar,
            self.input_mean,
            self.input_var,
            self.pred_input_mean,
            self.pred_input_var,
            self.v_mean,
            self.v_var,
            self.v_nr_count,
            self.v_nr_mean,
            self.v_nr_var,
            self.pred_v_mean,
            self.pred_v_var,
            self.grad_available,
            self.firing_rate
        )
    }
}

/// One row per (layer, timestep) from a recorded forward.
pub fn epoch_rows(epoch: usize, tape: &TapeCache) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for l in tape.layers() {
        for s in layer_stats(l) {
            let i = s.t - 1;
            let (pim, piv) = predicted_input(l.beta_bar, l.gamma_bar, l.v_th);
            let (pvm, pvv) = predicted_potential(l.beta_bar, l.gamma_bar, l.v_th, l.tau, s.t);
            let spikes = l.s_at(i);
            rows.push(MetricRow {
                epoch,
                layer: s.layer,
                t: s.t,
                kappa: l.kappas[i],
                tau: l.tau,
                gamma_bar: l.gamma_bar,
                beta_bar: l.beta_bar,
                input_mean: s.input.mean,
                input_var: s.input.var,
                pred_input_mean: pim,
                pred_input_var: piv,
                v_mean: s.potential.mean,
                v_var: s.potential.var,
                v_nr_count: s.potential_no_reset.count,
                v_nr_mean: s.potential_no_reset.mean,
                v_nr_var: s.potential_no_reset.var,
                pred_v_mean: pvm,
                pred_v_var: pvv,
                grad_available: proportion_in_support(l.v_at(i), l.v_th, l.kappas[i]),
                firing_rate: spikes.iter().sum::<f64>() / spikes.len() as f64,
            });
        }
    }
    rows
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunMetrics {
    pub rows: Vec<MetricRow>,
}

impl RunMetrics {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv_line());
            s.push('\n');
        }
        s
    }

    /// Mean gradient-available proportion over all rows of `epoch`.
    pub fn mean_grad_available(&self, epoch: usize) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.epoch == epoch).map(|r| r.grad_available).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyLayer {
    pub name: String,
    pub ac: f64,
    pub mac: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyReport {
    pub layers: Vec<EnergyLayer>,
    pub total_ac: f64,
    pub total_mac: f64,
    pub energy_mj: f64,
}

/// `(adds * 0.9 pJ + mults * 4.6 pJ)` in millijoules.
pub fn energy_mj(adds: f64, mults: f64) -> f64 {
    (adds * E_AC + mults * E_MAC) * 1e3
}

impl EnergyReport {
    fn from_layers(layers: Vec<EnergyLayer>) -> Self {
        let total_ac = layers.iter().map(|l| l.ac).sum();
        let total_mac = layers.iter().map(|l| l.mac).sum();
        Self { layers, total_ac, total_mac, energy_mj: energy_mj(total_ac, total_mac) }
    }
}

/// Synapses in forward order with the index of the spiking layer feeding them
/// (`None` for real-valued input).
fn synapse_sources(model: &Model) -> Vec<(String, u64, Option<usize>)> {
    let mut out = Vec::new();
    let mut source: Option<usize> = None;
    let mut layer = 0;
    for (i, st) in model.stages.iter().enumerate() {
        match st {
            Stage::Spiking(l) => {
                out.push((format!("s{i}"), l.synapse.ann_ops(), source));
                source = Some(layer);
                layer += 1;
            }
            Stage::Residual(b) => {
                out.push((format!("s{i}.a"), b.first.synapse.ann_ops(), source));
                out.push((format!("s{i}.b"), b.second.synapse.ann_ops(), Some(layer)));
                if let Some(sc) = &b.shortcut {
                    out.push((format!("s{i}.shortcut"), sc.ann_ops(), source));
                }
                source = Some(layer + 1);
                layer += 2;
            }
            Stage::Pool { .. } => {}
        }
    }
    out.push(("readout".into(), model.readout.len() as u64, None));
    out
}

/// Per-sample energy of the spiking network. A synapse driven by spikes performs
/// `rate * T * ops` accumulates, where `rate` is its source layer's firing rate; the
/// encoding layer and the readout perform `T * ops` multiply-accumulates.
pub fn energy_estimate(model: &Model, firing_rates: &[f64], timesteps: usize) -> EnergyReport {
    let t = timesteps as f64;
    let layers = synapse_sources(model)
        .into_iter()
        .map(|(name, ops, src)| {
            let ops = ops as f64;
            match (src, name.as_str()) {
                (_, "readout") | (None, _) => EnergyLayer { name, ac: 0.0, mac: t * ops },
                (Some(s), _) => EnergyLayer { name, ac: firing_rates.get(s).copied().unwrap_or(0.0) * t * ops, mac: 0.0 },
            }
        })
        .collect();
    EnergyReport::from_layers(layers)
}

/// Per-sample energy of the iso-architecture ANN: every synapse is multiply-accumulate.
pub fn ann_energy(model: &Model) -> EnergyReport {
    let layers = synapse_sources(model).into_iter().map(|(name, ops, _)| EnergyLayer { name, ac: 0.0, mac: ops as f64 }).collect();
    EnergyReport::from_layers(layers)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Table3Row {
    pub method: &'static str,
    pub timesteps: Option<usize>,
    /// Millions of additions.
    pub adds_m: f64,
    /// Millions of multiplications.
    pub mults_m: f64,
    pub printed_mj: f64,
}

impl Table3Row {
    pub fn label(&self) -> String {
        match self.timesteps {
            Some(t) => format!("{} T={t}", self.method),
            None => self.method.to_string(),
        }
    }

    /// The ANN row lists its MACs under both columns; they are one set of operations.
    pub fn computed_mj(&self) -> f64 {
        if self.timesteps.is_none() {
            energy_mj(0.0, self.mults_m * 1e6)
        } else {
            energy_mj(self.adds_m * 1e6, self.mults_m * 1e6)
        }
    }
}

/// Published ResNet-19 / CIFAR10 operation counts and energies.
pub const TABLE3: [Table3Row; 6] = [
    Table3Row { method: "ANN", timesteps: None, adds_m: 2285.35, mults_m: 2285.35, printed_mj: 10.51 },
    Table3Row { method: "STBP-tdBN", timesteps: Some(2), adds_m: 890.20, mults_m: 7.08, printed_mj: 0.83 },
    Table3Row { method: "LSG", timesteps: Some(2), adds_m: 677.72, mults_m: 7.08, printed_mj: 0.64 },
    Table3Row { method: "MPD-AGL", timesteps: Some(2), adds_m: 579.33, mults_m: 7.08, printed_mj: 0.55 },
    Table3Row { method: "MPD-AGL", timesteps: Some(4), adds_m: 1004.70, mults_m: 14.16, printed_mj: 0.96 },
    Table3Row { method: "MPD-AGL", timesteps: Some(6), adds_m: 1303.21, mults_m: 21.25, printed_mj: 1.25 },
];
