//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest harness so every
//! line is printed; exits nonzero if any criterion fails.

use std::process::Command;
use std::time::{Duration, Instant};

use snn_core::cli::{table3_lines, TABLE3_TOLERANCE_MJ};
use snn_core::data::{gen_synthetic, Dataset, SyntheticParams, SyntheticTask};
use snn_core::gradcheck::{brute_suite, fd_suite};
use snn_core::model::{Architecture, ForwardOptions, Model};
use snn_core::neuron::rho_from_decay;
use snn_core::rng::Rng;
use snn_core::surrogate::{SgConfig, SgFamily};
use snn_core::trainer::{TrainConfig, Trainer};
use snn_core::verify::{theorem_sweep, Check, SweepConfig, SweepReport};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn within(elapsed: Duration, limit: Duration) -> (bool, String) {
    (elapsed < limit, format!("runtime {:.2}s (limit {}s)", elapsed.as_secs_f64(), limit.as_secs()))
}

fn energy_table() -> Outcome {
    let start = Instant::now();
    let output = Command::new(env!("CARGO_BIN_EXE_snn")).args(["energy", "--table3-mode"]).output().expect("run snn");
    let (fast, rt) = within(start.elapsed(), Duration::from_secs(1));
    let text = String::from_utf8_lossy(&output.stdout);
    let lines = table3_lines();
    let mut detail = Vec::new();
    for l in &lines {
        let shown = text.contains(&format!("{:.4}", l.computed_mj));
        if !l.within_tolerance || !shown {
            detail.push(format!("{} computed {:.4} vs printed {:.2} (diff {:+.4})", l.row.label(), l.computed_mj, l.row.printed_mj, l.diff_mj));
        }
    }
    let ok = output.status.success() && fast && detail.is_empty();
    let ok_rows = lines.iter().filter(|l| l.within_tolerance).count();
    outcome(ok, format!("{ok_rows}/{} rows within +-{TABLE3_TOLERANCE_MJ} mJ; {rt}; {}", lines.len(), detail.join("; ")))
}

fn worst(checks: &[&Check]) -> String {
    checks
        .iter()
        .max_by(|a, b| a.excess_se().abs().total_cmp(&b.excess_se().abs()))
        .map_or("none".into(), |c| c.line())
}

fn sweep() -> (SweepReport, Duration) {
    let start = Instant::now();
    let report = theorem_sweep(&SweepConfig::default()).expect("sweep");
    (report, start.elapsed())
}

fn input_distribution(report: &SweepReport, elapsed: Duration) -> Outcome {
    let checks: Vec<&Check> = report.input_checks().collect();
    let failing: Vec<&Check> = checks.iter().copied().filter(|c| !c.pass).collect();
    let (fast, rt) = within(elapsed, Duration::from_secs(60));
    outcome(
        failing.is_empty() && fast && report.warnings.is_empty(),
        format!("{}/{} input mean/variance checks within 3 SE over 20 draws; {rt}; worst: {}", checks.len() - failing.len(), checks.len(), worst(&checks)),
    )
}

fn potential_distribution(report: &SweepReport, elapsed: Duration) -> Outcome {
    let checks: Vec<&Check> = report.potential_checks().collect();
    let failing: Vec<&Check> = checks.iter().copied().filter(|c| !c.pass).collect();
    let first: Vec<&Check> = checks.iter().copied().filter(|c| c.t == 1).collect();
    let window: Vec<&Check> = report.diagnostics().collect();
    let (fast, rt) = within(elapsed, Duration::from_secs(60));
    outcome(
        failing.is_empty() && fast,
        format!(
            "{}/{} conditioned potential checks pass (t=1: {}/{}; two-step window diagnostic: {}/{}); {rt}; worst: {}",
            checks.len() - failing.len(),
            checks.len(),
            first.iter().filter(|c| c.pass).count(),
            first.len(),
            window.iter().filter(|c| c.pass).count(),
            window.len(),
            worst(&failing)
        ),
    )
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let (mut fd_params, mut fd_max, mut brute_n, mut brute_max) = (0, 0.0f64, 0, 0.0f64);
    for detach in [false, true] {
        let (_, rep) = fd_suite(7, 40, SgFamily::Rectangular, &[detach]).expect("fd suite");
        fd_params += rep.records.len();
        fd_max = fd_max.max(rep.max_rel_error());
        let b = brute_suite(7, 50, detach).expect("brute suite");
        brute_n += b.instances;
        brute_max = brute_max.max(b.max_scaled_diff);
    }
    let (fast, rt) = within(start.elapsed(), Duration::from_secs(120));
    outcome(
        fd_params >= 200 && fd_max <= 1e-4 && brute_n >= 100 && brute_max <= 1e-10 && fast,
        format!("relaxed FD {fd_params} params max rel {fd_max:.2e} (<= 1e-4); brute force {brute_n} instances over both reset modes max {brute_max:.2e} (<= 1e-10); {rt}"),
    )
}

fn adaptive_width() -> Outcome {
    let sg = SgConfig::default();
    let w1 = sg.width_at(0.2, 1.0, 0.5, 1);
    let w2 = sg.width_at(0.2, 1.0, 0.5, 2);
    let w4 = sg.width_at(0.2, 1.0, 0.5, 4);
    let exact = w1 == 1.0 && (w2 - 1.019804).abs() <= 1e-6 && w4 == w2;

    let mut rng = Rng::new(1);
    let arch = Architecture::preset("mlp-64", [4, 1, 1], 2, 3).expect("arch");
    let mut model = Model::new(arch, 0.5, 0.2, &mut rng).expect("model");
    let x = rng.normal_tensor(&[3, 8, 4, 1, 1], 1.0);
    let (_, before) = model.forward(&x, &ForwardOptions::train(sg)).expect("forward");
    let first = before.layers()[0].kappas.clone();
    for l in model.spiking_layers_mut() {
        l.norm.as_mut().expect("tdbn").gamma.iter_mut().for_each(|g| *g = 1.3);
        l.neuron.rho = rho_from_decay(0.5);
    }
    let (_, after) = model.forward(&x, &ForwardOptions::train(sg)).expect("forward");
    let k = &after.layers()[0].kappas;
    let expect = [1.3, 1.3 * 1.25f64.sqrt(), 1.3 * 1.25f64.sqrt()];
    let responsive = k.iter().zip(expect).all(|(a, b)| (a - b).abs() < 1e-12);
    outcome(
        exact && responsive && (first[0] - 1.0).abs() < 1e-12,
        format!("widths t=1 {w1}, t>1 {w2:.7}; after gamma 1.3 and tau 0.5 the next forward uses {k:.6?} (expected {expect:.6?})"),
    )
}

fn image_blobs() -> Dataset {
    let params = SyntheticParams { dim: 64, classes: 4, separation: 4.0, ..SyntheticParams::default() };
    let mut d = gen_synthetic(SyntheticTask::GaussianBlobs, 192, 2024, &params).expect("corpus");
    d.sample_shape = [1, 8, 8];
    d
}

fn final_grad_available(data: &Dataset, adaptive: bool, seed: u64) -> f64 {
    let cfg = TrainConfig { epochs: 50, batch_size: 32, adaptive_sg: adaptive, trainable_decay: adaptive, ..TrainConfig::default() };
    let arch = Architecture::preset("convs", data.sample_shape, data.classes, cfg.timesteps).expect("arch");
    let mut tr = Trainer::new(cfg, arch, seed).expect("trainer");
    let mut last = 0.0;
    for _ in 0..50 {
        last = tr.train_epoch(data).expect("epoch").mean_grad_available();
    }
    last
}

fn gradient_availability() -> Outcome {
    let data = image_blobs();
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..5 {
        let adaptive = final_grad_available(&data, true, seed);
        let fixed = final_grad_available(&data, false, seed);
        wins += usize::from(adaptive > fixed);
        pairs.push(format!("{adaptive:.4}/{fixed:.4}"));
    }
    outcome(wins >= 4, format!("adaptive beats fixed width in {wins}/5 seeds (adaptive/fixed: {})", pairs.join(", ")))
}

fn best_train_accuracy(data: &Dataset, adaptive: bool, seed: u64) -> (f64, usize) {
    let cfg = TrainConfig { epochs: 50, batch_size: 32, timesteps: 2, adaptive_sg: adaptive, ..TrainConfig::default() };
    let arch = Architecture::preset("mlp-64", data.sample_shape, data.classes, 2).expect("arch");
    let mut tr = Trainer::new(cfg, arch, seed).expect("trainer");
    for e in 0..50 {
        let acc = tr.train_epoch(data).expect("epoch").train_accuracy;
        if acc >= 0.95 {
            return (acc, e + 1);
        }
    }
    (0.0, 50)
}

fn ablation_accuracy(train: &Dataset, test: &Dataset, adaptive: bool, decay: bool, seed: u64) -> f64 {
    let cfg = TrainConfig { epochs: 50, batch_size: 32, adaptive_sg: adaptive, trainable_decay: decay, ..TrainConfig::default() };
    let arch = Architecture::preset("mlp-64", train.sample_shape, train.classes, cfg.timesteps).expect("arch");
    let mut tr = Trainer::new(cfg, arch, seed).expect("trainer");
    for _ in 0..50 {
        tr.train_epoch(train).expect("epoch");
    }
    tr.evaluate(test).expect("evaluate").1
}

fn learning_sanity() -> Outcome {
    let blobs = gen_synthetic(SyntheticTask::GaussianBlobs, 512, 1, &SyntheticParams::default()).expect("blobs");
    let fixed = best_train_accuracy(&blobs, false, 0);
    let adaptive = best_train_accuracy(&blobs, true, 0);
    let sanity = fixed.0 >= 0.95 && adaptive.0 >= 0.95;

    let rings = gen_synthetic(SyntheticTask::XorRings, 640, 3, &SyntheticParams::default()).expect("rings");
    let (test, train) = rings.split(0.25);
    let mut ordered = 0;
    let mut rows = Vec::new();
    for seed in 0..5 {
        let acc = [(false, false), (false, true), (true, false), (true, true)].map(|(a, d)| ablation_accuracy(&train, &test, a, d, seed));
        let holds = acc.windows(2).all(|w| w[0] <= w[1]);
        ordered += usize::from(holds);
        rows.push(format!("[{:.3} {:.3} {:.3} {:.3}]", acc[0], acc[1], acc[2], acc[3]));
    }
    outcome(
        sanity && ordered >= 3,
        format!(
            "blobs >= 95% train accuracy: fixed at epoch {}, adaptive at epoch {}; ablation order (vanilla, +decay, +adaptive width, both) holds in {ordered}/5 seeds: {}",
            fixed.1,
            adaptive.1,
            rows.join(" ")
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = dir.path().join("run.txt");
    std::fs::write(&cfg, "# identical for both runs\nepochs = 6\nsamples = 256\nsg_family = triangular\n").expect("write config");
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_snn"))
            .args(["train", "--seed", "11", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .stdout(std::process::Stdio::null())
            .status()
            .expect("run snn");
        assert!(status.success());
        std::fs::read(out.join("metrics.csv")).expect("metrics")
    };
    let (a, b) = (run("a"), run("b"));
    let rows = a.iter().filter(|&&c| c == b'\n').count().saturating_sub(1);
    outcome(a == b && rows > 0, format!("two runs with seed 11: metrics.csv {} bytes, {rows} rows, byte-identical: {}", a.len(), a == b))
}

fn main() {
    let mut all = true;
    let mut report = |n: usize, name: &str, o: Outcome| {
        all &= o.pass;
        println!("{} criterion {n} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    };
    report(1, "energy arithmetic", energy_table());
    let (sweep_report, elapsed) = sweep();
    report(2, "input-current distribution", input_distribution(&sweep_report, elapsed));
    report(3, "membrane-potential distribution", potential_distribution(&sweep_report, elapsed));
    report(4, "gradient correctness", gradients());
    report(5, "adaptive width fidelity", adaptive_width());
    report(6, "gradient availability", gradient_availability());
    report(7, "learning sanity and ablation order", learning_sanity());
    report(8, "determinism", determinism());
    if !all {
        std::process::exit(1);
    }
}
