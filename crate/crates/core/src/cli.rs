//! Subcommand bodies behind the `snn` binary. Each writes its report to `out` and returns
//! whether every check it runs passed.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint::save_checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::gradcheck::{brute_suite, fd_suite, BRUTE_MAX_PARAMS};
use crate::metrics::{ann_energy, energy_estimate, EnergyReport, MetricRow, Table3Row, CSV_HEADER, TABLE3};
use crate::model::Model;
use crate::rng::Rng;
use crate::surrogate::SgFamily;
use crate::trainer::Trainer;
use crate::verify::{theorem_sweep, SweepConfig};

/// Allowed gap between a computed and a printed energy.
pub const TABLE3_TOLERANCE_MJ: f64 = 0.01;
pub const FD_THRESHOLD: f64 = 1e-4;
pub const BRUTE_THRESHOLD: f64 = 1e-10;

pub const LOCK_FILE: &str = ".lock";
pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const FINAL_CHECKPOINT: &str = "checkpoint-final.spkt";

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::InvalidArgument(format!(
                "output directory {} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_accuracy: f64,
    pub mean_grad_available: f64,
    pub firing_rates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoremDeviation {
    pub layer: String,
    pub t: usize,
    pub input_mean: f64,
    pub input_var: f64,
    pub potential_mean: f64,
    pub potential_var: f64,
}

impl TheoremDeviation {
    fn of(r: &MetricRow) -> Self {
        Self {
            layer: r.layer.clone(),
            t: r.t,
            input_mean: r.input_mean - r.pred_input_mean,
            input_var: r.input_var - r.pred_input_var,
            potential_mean: r.v_nr_mean - r.pred_v_mean,
            potential_var: r.v_nr_var - r.pred_v_var,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub data_seed: u64,
    pub arch: String,
    pub parameters: usize,
    pub dataset: String,
    pub train_samples: usize,
    pub val_samples: usize,
    pub epochs: Vec<EpochSummary>,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    /// Signed empirical-minus-predicted statistics from the last epoch's first forward.
    pub theorem_deviations: Vec<TheoremDeviation>,
    pub firing_rates: Vec<f64>,
    pub energy: EnergyReport,
    pub ann_energy: EnergyReport,
}

/// Trains under `cfg` (whose seed must already be resolved) and writes the run directory.
pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<RunSummary> {
    let seed = cfg.seed.ok_or_else(|| Error::InvalidArgument("seed must be resolved before training".into()))?;
    cfg.validate()?;
    let _lock = OutputLock::acquire(&cfg.out)?;
    fs::write(cfg.out.join(CONFIG_FILE), cfg.to_text())?;

    let data = cfg.load_dataset()?;
    let (val, train) = data.split(cfg.val_fraction);
    if train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let arch = cfg.architecture(data.sample_shape, data.classes)?;
    let arch_name = arch.layers_string();
    let mut trainer = Trainer::new(cfg.train.clone(), arch, seed)?;
    writeln!(out, "train: seed={seed} arch={arch_name} params={} train={} val={}", trainer.model.param_count(), train.len(), val.len())?;

    let mut metrics = File::create(cfg.out.join(METRICS_FILE))?;
    writeln!(metrics, "{CSV_HEADER}")?;
    let mut epochs = Vec::new();
    let mut last_rows = Vec::new();
    for e in 0..cfg.train.epochs {
        let rep = trainer.train_epoch(&train)?;
        for r in &rep.rows {
            writeln!(metrics, "{}", r.csv_line())?;
        }
        metrics.flush()?;
        writeln!(
            out,
            "epoch {e}: lr={:.5} loss={:.5} acc={:.4} grad_available={:.4}",
            rep.lr,
            rep.loss,
            rep.train_accuracy,
            rep.mean_grad_available()
        )?;
        epochs.push(EpochSummary {
            epoch: rep.epoch,
            lr: rep.lr,
            loss: rep.loss,
            train_accuracy: rep.train_accuracy,
            mean_grad_available: rep.mean_grad_available(),
            firing_rates: rep.firing_rates.clone(),
        });
        last_rows = rep.rows;
        if cfg.checkpoint_every > 0 && (e + 1) % cfg.checkpoint_every == 0 {
            save_checkpoint(&trainer.model.to_named_tensors(), cfg.out.join(format!("checkpoint-epoch{:04}.spkt", e + 1)))?;
        }
    }
    save_checkpoint(&trainer.model.to_named_tensors(), cfg.out.join(FINAL_CHECKPOINT))?;

    let (val_loss, val_accuracy) = if val.is_empty() {
        (None, None)
    } else {
        let (l, a) = trainer.evaluate(&val)?;
        writeln!(out, "validation: loss={l:.5} acc={a:.4}")?;
        (Some(l), Some(a))
    };
    let rates = trainer.probe_rates(if val.is_empty() { &train } else { &val })?;
    let summary = RunSummary {
        seed,
        data_seed: cfg.data_seed,
        arch: arch_name,
        parameters: trainer.model.param_count(),
        dataset: cfg.dataset.to_string(),
        train_samples: train.len(),
        val_samples: val.len(),
        epochs,
        val_loss,
        val_accuracy,
        theorem_deviations: last_rows.iter().map(TheoremDeviation::of).collect(),
        energy: energy_estimate(&trainer.model, &rates, cfg.train.timesteps),
        ann_energy: ann_energy(&trainer.model),
        firing_rates: rates,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    fs::write(cfg.out.join(SUMMARY_FILE), json + "\n")?;
    Ok(summary)
}

pub fn cmd_verify(cfg: &SweepConfig, out: &mut dyn Write) -> Result<bool> {
    writeln!(
        out,
        "verify: seed={} draws={} samples={} steps={} taus={:?} channels={}..={}",
        cfg.seed, cfg.draws, cfg.samples, cfg.steps, cfg.taus, cfg.min_channels, cfg.max_channels
    )?;
    let report = theorem_sweep(cfg)?;
    write!(out, "{}", report.render())?;
    let ok = report.all_pass();
    writeln!(out, "verify: {}", if ok { "PASS" } else { "FAIL" })?;
    Ok(ok)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Parameters checked per finite-difference case.
    pub picks: usize,
    pub instances: usize,
    pub family: SgFamily,
    pub detach_reset: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { seed: 0, picks: 40, instances: 50, family: SgFamily::Rectangular, detach_reset: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckOutcome {
    pub fd_params: usize,
    pub fd_max_rel_error: f64,
    pub fd_resampled: usize,
    pub brute_instances: usize,
    pub brute_max_scaled_diff: f64,
}

impl GradcheckOutcome {
    pub fn pass(&self) -> bool {
        self.fd_max_rel_error <= FD_THRESHOLD && self.brute_max_scaled_diff <= BRUTE_THRESHOLD
    }
}

pub fn gradcheck(opts: &GradcheckOptions) -> Result<(GradcheckOutcome, String)> {
    let mut text = format!(
        "gradcheck: seed={} picks={} instances={} family={} detach_reset={}\n",
        opts.seed, opts.picks, opts.instances, opts.family, opts.detach_reset
    );
    let (cases, fd) = fd_suite(opts.seed, opts.picks, opts.family, &[opts.detach_reset])?;
    for c in &cases {
        text.push_str(&format!(
            "relaxed-fd {} T={} params={} max_rel_error={:.3e}\n",
            c.preset, c.timesteps, c.params_checked, c.max_rel_error
        ));
    }
    let brute = brute_suite(opts.seed, opts.instances, opts.detach_reset)?;
    let outcome = GradcheckOutcome {
        fd_params: fd.records.len(),
        fd_max_rel_error: fd.max_rel_error(),
        fd_resampled: fd.resampled,
        brute_instances: brute.instances,
        brute_max_scaled_diff: brute.max_scaled_diff,
    };
    text.push_str(&format!(
        "relaxed-fd: {} params, max relative error {:.3e} (threshold {FD_THRESHOLD:e}), {} picks resampled\n",
        outcome.fd_params, outcome.fd_max_rel_error, outcome.fd_resampled
    ));
    text.push_str(&format!(
        "brute-force: {} instances (<= {BRUTE_MAX_PARAMS} params), max scaled difference {:.3e} (threshold {BRUTE_THRESHOLD:e})\n",
        outcome.brute_instances, outcome.brute_max_scaled_diff
    ));
    text.push_str(&format!("gradcheck: {}\n", if outcome.pass() { "PASS" } else { "FAIL" }));
    Ok((outcome, text))
}

pub fn cmd_gradcheck(opts: &GradcheckOptions, out: &mut dyn Write) -> Result<bool> {
    let (outcome, text) = gradcheck(opts)?;
    write!(out, "{text}")?;
    Ok(outcome.pass())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table3Line {
    pub row: Table3Row,
    pub computed_mj: f64,
    /// `computed - printed`.
    pub diff_mj: f64,
    pub within_tolerance: bool,
    /// The computed value rounds to a different two-decimal figure than the printed one.
    pub rounding_gap: bool,
}

pub fn table3_lines() -> Vec<Table3Line> {
    TABLE3
        .iter()
        .map(|row| {
            let computed_mj = row.computed_mj();
            let diff_mj = computed_mj - row.printed_mj;
            Table3Line {
                row: *row,
                computed_mj,
                diff_mj,
                within_tolerance: diff_mj.abs() <= TABLE3_TOLERANCE_MJ,
                rounding_gap: ((computed_mj * 100.0).round() - (row.printed_mj * 100.0).round()).abs() > 0.5,
            }
        })
        .collect()
}

pub fn render_table3(lines: &[Table3Line]) -> String {
    let mut s = format!("{:<14} {:>12} {:>12} {:>13} {:>11} {:>9}  flag\n", "method", "adds (M)", "mults (M)", "computed (mJ)", "printed (mJ)", "diff");
    for l in lines {
        let flag = match (l.within_tolerance, l.rounding_gap) {
            (false, _) => format!("OUT OF TOLERANCE (|diff| > {TABLE3_TOLERANCE_MJ})"),
            (true, true) => format!("rounding gap: computed rounds to {:.2}", l.computed_mj),
            (true, false) => "ok".to_string(),
        };
        s.push_str(&format!(
            "{:<14} {:>12.2} {:>12.2} {:>13.4} {:>12.2} {:>+9.4}  {flag}\n",
            l.row.label(),
            l.row.adds_m,
            l.row.mults_m,
            l.computed_mj,
            l.row.printed_mj,
            l.diff_mj
        ));
    }
    let ok = lines.iter().filter(|l| l.within_tolerance).count();
    s.push_str(&format!("rows within +-{TABLE3_TOLERANCE_MJ} mJ: {ok}/{}\n", lines.len()));
    s
}

/// Last-epoch per-layer firing rates from a metrics file: each layer's mean over its
/// timestep rows, layers in order of first appearance.
pub fn rates_from_metrics(csv: &str) -> Result<Vec<f64>> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).ok_or_else(|| Error::InvalidArgument(format!("metrics header lacks {name}")));
    let (ce, cl, cr) = (col("epoch")?, col("layer")?, col("firing_rate")?);
    let rows: Vec<Vec<&str>> = lines.filter(|l| !l.trim().is_empty()).map(|l| l.split(',').collect()).collect();
    let parse = |v: &str| v.parse::<f64>().map_err(|_| Error::InvalidArgument(format!("bad metrics value {v:?}")));
    let last = rows.iter().map(|r| parse(r[ce])).collect::<Result<Vec<_>>>()?.into_iter().fold(f64::NAN, f64::max);
    if last.is_nan() {
        return Err(Error::InvalidArgument("missing firing rates: metrics file has no rows".into()));
    }
    let mut layers: Vec<(String, f64, usize)> = Vec::new();
    for r in &rows {
        if parse(r[ce])? != last {
            continue;
        }
        let rate = parse(r[cr])?;
        match layers.iter_mut().find(|l| l.0 == r[cl]) {
            Some(l) => {
                l.1 += rate;
                l.2 += 1;
            }
            None => layers.push((r[cl].to_string(), rate, 1)),
        }
    }
    Ok(layers.into_iter().map(|(_, s, n)| s / n as f64).collect())
}

/// Energy of the architecture in `cfg` at the given firing rates.
pub fn energy_for(cfg: &RunConfig, rates: &[f64]) -> Result<(EnergyReport, EnergyReport)> {
    if let Some(r) = rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::InvalidArgument(format!("firing rate {r} outside [0, 1]")));
    }
    let data = cfg.load_dataset()?;
    let arch = cfg.architecture(data.sample_shape, data.classes)?;
    let model = Model::new(arch, cfg.train.v_th, cfg.train.tau_init, &mut Rng::new(0))?;
    let layers = model.spiking_layers().len();
    if rates.len() != layers {
        return Err(Error::InvalidArgument(format!("need {layers} firing rates, got {}", rates.len())));
    }
    Ok((energy_estimate(&model, rates, cfg.train.timesteps), ann_energy(&model)))
}

pub fn render_energy(report: &EnergyReport, ann: &EnergyReport) -> String {
    let mut s = format!("{:<14} {:>16} {:>16}\n", "synapse", "AC", "MAC");
    for l in &report.layers {
        s.push_str(&format!("{:<14} {:>16.1} {:>16.1}\n", l.name, l.ac, l.mac));
    }
    s.push_str(&format!("{:<14} {:>16.1} {:>16.1}\n", "total", report.total_ac, report.total_mac));
    s.push_str(&format!("energy: {:.6e} mJ per sample\n", report.energy_mj));
    s.push_str(&format!("iso-architecture ANN: {:.1} MAC, {:.6e} mJ per sample\n", ann.total_mac, ann.energy_mj));
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DataSource;
    use crate::data::SyntheticTask;

    #[test]
    fn table3_flags() {
        let lines = table3_lines();
        let by = |label: &str| lines.iter().find(|l| l.row.label() == label).unwrap().clone();
        assert!((by("ANN").computed_mj - 10.51261).abs() < 1e-9);
        let t4 = by("MPD-AGL T=4");
        assert!(t4.within_tolerance && t4.rounding_gap);
        assert!(!by("MPD-AGL T=6").within_tolerance);
        assert!(by("LSG T=2").within_tolerance);
        let text = render_table3(&lines);
        assert!(text.contains("rounding gap: computed rounds to 0.97"));
        assert!(text.contains("rows within +-0.01 mJ: 5/6"));
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = OutputLock::acquire(dir.path()).unwrap();
        assert!(OutputLock::acquire(dir.path()).is_err());
        drop(a);
        assert!(OutputLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn rates_from_last_epoch() {
        let csv = format!("{CSV_HEADER}\n");
        assert!(rates_from_metrics(&csv).is_err());
        let row = |e: usize, l: &str, t: usize, r: f64| {
            let mut f = vec!["0".to_string(); CSV_HEADER.split(',').count()];
            f[0] = e.to_string();
            f[1] = l.to_string();
            f[2] = t.to_string();
            *f.last_mut().unwrap() = r.to_string();
            f.join(",")
        };
        let csv = [CSV_HEADER.to_string(), row(0, "s0", 1, 0.9), row(1, "s0", 1, 0.1), row(1, "s0", 2, 0.3), row(1, "s1", 1, 0.5)].join("\n");
        assert_eq!(rates_from_metrics(&csv).unwrap(), vec![0.2, 0.5]);
    }

    #[test]
    fn zero_rates_give_mac_only_energy() {
        let cfg = RunConfig { dataset: DataSource::Synthetic(SyntheticTask::GaussianBlobs), ..RunConfig::default() };
        let (e, ann) = energy_for(&cfg, &[0.0, 0.0]).unwrap();
        assert_eq!(e.total_ac, 0.0);
        assert!(e.total_mac > 0.0 && ann.total_mac > e.total_mac / 2.0);
        assert!(energy_for(&cfg, &[0.0]).is_err());
        assert!(energy_for(&cfg, &[0.0, 1.5]).is_err());
    }

    #[test]
    fn zero_epoch_run_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig { seed: Some(1), out: dir.path().join("run"), samples: 40, ..RunConfig::default() };
        let mut sink = Vec::new();
        let mut zero = cfg.clone();
        zero.train.epochs = 0;
        let s = cmd_train(&zero, &mut sink).unwrap();
        assert!(s.epochs.is_empty());
        let metrics = fs::read_to_string(zero.out.join(METRICS_FILE)).unwrap();
        assert_eq!(metrics, format!("{CSV_HEADER}\n"));
        let echo = fs::read_to_string(zero.out.join(CONFIG_FILE)).unwrap();
        assert_eq!(RunConfig::parse(&echo).unwrap(), zero);
        assert!(zero.out.join(SUMMARY_FILE).exists() && zero.out.join(FINAL_CHECKPOINT).exists());
        assert!(!zero.out.join(LOCK_FILE).exists());
    }
}
