//! Statistical sweep of the predicted input-current and membrane-potential distributions
//! over random affine parameters, thresholds and decays.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::{predicted_input, predicted_potential};
use crate::neuron::unroll_with;
use crate::normalization::{NormMode, TdbnLayer};
use crate::rng::Rng;

/// Elements per timestep below which the sweep warns about statistical power.
pub const MIN_POWERED_SAMPLES: usize = 100_000;
/// Acceptance half-width in standard errors.
pub const SE_MULTIPLIER: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepConfig {
    pub seed: u64,
    pub draws: usize,
    /// Elements per timestep (batch times channels).
    pub samples: usize,
    pub steps: usize,
    pub taus: Vec<f64>,
    pub min_channels: usize,
    pub max_channels: usize,
    pub v_th_range: (f64, f64),
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            draws: 20,
            samples: MIN_POWERED_SAMPLES,
            steps: 4,
            taus: vec![0.1, 0.2, 0.5],
            min_channels: 4,
            max_channels: 64,
            v_th_range: (0.25, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quantity {
    InputMean,
    InputVar,
    /// Potential of neurons silent at the previous step.
    PotentialMean,
    PotentialVar,
    /// `tau * I(t-1) + I(t)`: a potential reset at `t - 2` and silent at `t - 1` without
    /// conditioning on the silence. The prediction's exact premise; diagnostic only.
    WindowPotentialMean,
    WindowPotentialVar,
}

impl Quantity {
    pub fn name(self) -> &'static str {
        match self {
            Self::InputMean => "input-mean",
            Self::InputVar => "input-var",
            Self::PotentialMean => "potential-mean",
            Self::PotentialVar => "potential-var",
            Self::WindowPotentialMean => "window-potential-mean",
            Self::WindowPotentialVar => "window-potential-var",
        }
    }

    pub fn is_diagnostic(self) -> bool {
        matches!(self, Self::WindowPotentialMean | Self::WindowPotentialVar)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub draw: usize,
    pub channels: usize,
    pub v_th: f64,
    /// `None` for input-current checks.
    pub tau: Option<f64>,
    /// 1-based.
    pub t: usize,
    pub quantity: Quantity,
    pub empirical: f64,
    pub standard_error: f64,
    /// Predicted interval before widening by the standard error (a point for means).
    pub predicted: (f64, f64),
    pub pass: bool,
}

impl Check {
    fn new(draw: &Draw, tau: Option<f64>, t: usize, quantity: Quantity, empirical: f64, se: f64, predicted: (f64, f64)) -> Self {
        let margin = SE_MULTIPLIER * se;
        let pass = empirical >= predicted.0 - margin && empirical <= predicted.1 + margin;
        Self { draw: draw.index, channels: draw.gamma.len(), v_th: draw.v_th, tau, t, quantity, empirical, standard_error: se, predicted, pass }
    }

    /// Signed distance outside the predicted interval in standard errors (0 inside).
    pub fn excess_se(&self) -> f64 {
        let d = if self.empirical < self.predicted.0 {
            self.empirical - self.predicted.0
        } else if self.empirical > self.predicted.1 {
            self.empirical - self.predicted.1
        } else {
            0.0
        };
        d / self.standard_error.max(f64::MIN_POSITIVE)
    }

    pub fn line(&self) -> String {
        let tau = self.tau.map_or("-".to_string(), |t| format!("{t}"));
        format!(
            "{} draw={} C={} v_th={:.4} tau={} t={} {} empirical={:.6} predicted=[{:.6}, {:.6}] se={:.2e} excess={:+.2}se",
            if self.pass { "PASS" } else { "FAIL" },
            self.draw,
            self.channels,
            self.v_th,
            tau,
            self.t,
            self.quantity.name(),
            self.empirical,
            self.predicted.0,
            self.predicted.1,
            self.standard_error,
            self.excess_se()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub checks: Vec<Check>,
    pub warnings: Vec<String>,
}

impl SweepReport {
    /// Input-current checks.
    pub fn input_checks(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| matches!(c.quantity, Quantity::InputMean | Quantity::InputVar))
    }

    /// Conditioned potential checks.
    pub fn potential_checks(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| matches!(c.quantity, Quantity::PotentialMean | Quantity::PotentialVar))
    }

    pub fn diagnostics(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| c.quantity.is_diagnostic())
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().filter(|c| !c.quantity.is_diagnostic()).all(|c| c.pass)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for w in &self.warnings {
            out.push_str(&format!("warning: {w}\n"));
        }
        for c in &self.checks {
            out.push_str(&c.line());
            out.push('\n');
        }
        let tally = |it: &mut dyn Iterator<Item = &Check>| {
            let (mut pass, mut total) = (0, 0);
            for c in it {
                total += 1;
                pass += usize::from(c.pass);
            }
            (pass, total)
        };
        let (p1, n1) = tally(&mut self.input_checks());
        let (p2, n2) = tally(&mut self.potential_checks());
        let (pd, nd) = tally(&mut self.diagnostics());
        out.push_str(&format!("input-current checks: {p1}/{n1} pass\n"));
        out.push_str(&format!("membrane-potential checks: {p2}/{n2} pass\n"));
        out.push_str(&format!("two-step window diagnostics: {pd}/{nd} pass (not gating)\n"));
        out
    }
}

struct Draw {
    index: usize,
    gamma: Vec<f64>,
    beta: Vec<f64>,
    v_th: f64,
}

/// Channel-averaged mean and within-channel variance, each with a standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: f64,
    pub mean_se: f64,
    pub var: f64,
    pub var_se: f64,
}

/// `values` is laid out `[batch, channels]`; entries with `keep[i] == false` are skipped.
/// Channels with fewer than four kept entries are ignored.
pub fn channel_stats(values: &[f64], channels: usize, keep: Option<&[bool]>) -> ChannelStats {
    let mut per: Vec<Vec<f64>> = vec![Vec::new(); channels];
    for (i, &v) in values.iter().enumerate() {
        if keep.is_none_or(|k| k[i]) {
            per[i % channels].push(v);
        }
    }
    let (mut mean, mut mean_se2, mut var, mut var_se2, mut used) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for xs in per.iter().filter(|xs| xs.len() >= 4) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let s2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
        mean += m;
        mean_se2 += s2 / n;
        var += s2;
        var_se2 += (m4 - s2 * s2).max(0.0) / n;
        used += 1;
    }
    if used == 0 {
        return ChannelStats { mean: f64::NAN, mean_se: f64::NAN, var: f64::NAN, var_se: f64::NAN };
    }
    let c = used as f64;
    ChannelStats { mean: mean / c, mean_se: mean_se2.sqrt() / c, var: var / c, var_se: var_se2.sqrt() / c }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Runs the sweep: per draw, standard-normal inputs pass through a normalization layer with
/// random per-channel affine parameters, then through LIF neurons at each decay.
pub fn theorem_sweep(cfg: &SweepConfig) -> Result<SweepReport> {
    if cfg.draws == 0 || cfg.steps == 0 || cfg.samples == 0 || cfg.min_channels == 0 || cfg.min_channels > cfg.max_channels {
        return Err(Error::InvalidArgument("sweep needs draws, steps, samples > 0 and a valid channel range".into()));
    }
    if cfg.taus.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
        return Err(Error::InvalidArgument("decays must lie in (0, 1)".into()));
    }
    let mut warnings = Vec::new();
    if cfg.samples < MIN_POWERED_SAMPLES {
        warnings.push(format!(
            "{} elements per step is below {MIN_POWERED_SAMPLES}; statistical power is insufficient and checks may be unreliable",
            cfg.samples
        ));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut checks = Vec::new();
    let steps = cfg.steps;
    for index in 0..cfg.draws {
        let channels = rng.range_inclusive(cfg.min_channels as i64, cfg.max_channels as i64) as usize;
        let gamma: Vec<f64> = (0..channels).map(|_| rng.uniform(0.5, 1.5)).collect();
        let beta: Vec<f64> = (0..channels).map(|_| rng.uniform(-0.5, 0.5)).collect();
        let v_th = rng.uniform(cfg.v_th_range.0, cfg.v_th_range.1);
        let draw = Draw { index, gamma, beta, v_th };
        let batch = cfg.samples.div_ceil(channels).max(2);
        let width = batch * channels;

        let mut norm = TdbnLayer::new(channels, v_th);
        norm.gamma.clone_from(&draw.gamma);
        norm.beta.clone_from(&draw.beta);
        let x = rng.normal_tensor(&[steps, batch, channels], 1.0);
        let (current, _) = norm.forward(&x, NormMode::Train)?;
        let current = current.data();

        let gamma_bar = mean(&draw.gamma);
        let gamma_sq = draw.gamma.iter().map(|g| g * g).sum::<f64>() / channels as f64;
        let beta_bar = mean(&draw.beta);
        let band = |scale: f64| (scale * (gamma_bar * v_th).powi(2), scale * gamma_sq * v_th * v_th);

        for t in 0..steps {
            let st = channel_stats(&current[t * width..(t + 1) * width], channels, None);
            let (pm, _) = predicted_input(beta_bar, gamma_bar, v_th);
            checks.push(Check::new(&draw, None, t + 1, Quantity::InputMean, st.mean, st.mean_se, (pm, pm)));
            checks.push(Check::new(&draw, None, t + 1, Quantity::InputVar, st.var, st.var_se, band(1.0)));
        }

        for &tau in &cfg.taus {
            let (v, s) = unroll_with(current, steps, width, tau, None, |_, v| f64::from(u8::from(v >= v_th)));
            for t in 0..steps {
                let (pm, _) = predicted_potential(beta_bar, gamma_bar, v_th, tau, t + 1);
                let scale = if t == 0 { 1.0 } else { 1.0 + tau * tau };
                let range = t * width..(t + 1) * width;
                let keep: Option<Vec<bool>> = (t > 0).then(|| s[(t - 1) * width..t * width].iter().map(|&x| x == 0.0).collect());
                let st = channel_stats(&v[range.clone()], channels, keep.as_deref());
                checks.push(Check::new(&draw, Some(tau), t + 1, Quantity::PotentialMean, st.mean, st.mean_se, (pm, pm)));
                checks.push(Check::new(&draw, Some(tau), t + 1, Quantity::PotentialVar, st.var, st.var_se, band(scale)));
                if t > 0 {
                    let window: Vec<f64> = current[range.clone()].iter().zip(&current[range.start - width..range.start]).map(|(i, p)| i + tau * p).collect();
                    let fr = channel_stats(&window, channels, None);
                    checks.push(Check::new(&draw, Some(tau), t + 1, Quantity::WindowPotentialMean, fr.mean, fr.mean_se, (pm, pm)));
                    checks.push(Check::new(&draw, Some(tau), t + 1, Quantity::WindowPotentialVar, fr.var, fr.var_se, band(scale)));
                }
            }
        }
    }
    Ok(SweepReport { checks, warnings })
}
