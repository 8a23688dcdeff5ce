use proptest::prelude::*;

use snn_core::checkpoint::{load_checkpoint, save_checkpoint};
use snn_core::config::{DataSource, RunConfig};
use snn_core::data::{write_raster, Event, EventStream, Raster};
use snn_core::metrics::{energy_mj, firing_rate, grad_available_proportion, proportion_in_support, E_AC, E_MAC};
use snn_core::model::{Architecture, ForwardOptions, Model};
use snn_core::rng::Rng;
use snn_core::surrogate::SgConfig;
use snn_core::trainer::{cross_entropy, TrainConfig, Trainer};

fn checker_raster(n: usize) -> Raster {
    let (c, h, w) = (1, 8, 8);
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    let mut rng = Rng::new(9);
    for i in 0..n {
        let label = (i % 2) as u8;
        labels.push(label);
        for y in 0..h {
            for x in 0..w {
                let on = if label == 0 { x < w / 2 } else { y < h / 2 };
                let noise = rng.uniform(0.0, 40.0);
                pixels.push((if on { 200.0 } else { 20.0 } + noise) as u8);
            }
        }
    }
    Raster { channels: c, height: h, width: w, labels, pixels }
}

#[test]
fn raster_file_trains_a_conv_net() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.imgs");
    write_raster(&path, &checker_raster(64)).unwrap();
    let cfg = RunConfig { dataset: DataSource::Raster(path), arch: "convs".into(), ..RunConfig::default() };
    let data = cfg.load_dataset().unwrap();
    assert_eq!(data.sample_shape, [1, 8, 8]);
    let arch = cfg.architecture(data.sample_shape, data.classes).unwrap();
    let mut tr = Trainer::new(TrainConfig { epochs: 6, batch_size: 16, ..TrainConfig::default() }, arch, 1).unwrap();
    let mut last = 0.0;
    for _ in 0..6 {
        last = tr.train_epoch(&data).unwrap().train_accuracy;
    }
    assert!(last > 0.9, "{last}");
}

#[test]
fn event_streams_feed_time_axis() {
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = String::new();
    for i in 0..8 {
        let label = i % 2;
        // class 0 fires early on the left, class 1 late on the right
        let mut events: Vec<Event> = (0..40u64)
            .map(|k| {
                let early = label == 0;
                Event { t: if early { k } else { 100 + k }, x: if early { 1 } else { 6 }, y: (k % 8) as usize, polarity: k % 2 == 0 }
            })
            .chain([Event { t: 0, x: 0, y: 0, polarity: true }, Event { t: 140, x: 7, y: 7, polarity: false }])
            .collect();
        events.sort_by_key(|e| e.t);
        let stream = EventStream::new(events, 8, 8).unwrap();
        std::fs::write(dir.path().join(format!("s{i}.txt")), stream.to_text()).unwrap();
        manifest.push_str(&format!("{label} s{i}.txt\n"));
    }
    std::fs::write(dir.path().join("list.txt"), manifest).unwrap();
    let mut cfg = RunConfig { dataset: DataSource::Events(dir.path().join("list.txt")), arch: "convs".into(), ..RunConfig::default() };
    cfg.event_frames = 2;
    cfg.event_height = 4;
    cfg.event_width = 4;
    cfg.train.timesteps = 2;
    let data = cfg.load_dataset().unwrap();
    assert_eq!((data.frames, data.sample_shape), (2, [2, 4, 4]));
    let arch = cfg.architecture(data.sample_shape, data.classes).unwrap();
    let mut tr = Trainer::new(TrainConfig { epochs: 2, batch_size: 4, timesteps: 2, ..TrainConfig::default() }, arch, 0).unwrap();
    tr.train_epoch(&data).unwrap();
    // the time axis must match the model's steps
    let bad = Trainer::new(TrainConfig { timesteps: 3, ..TrainConfig::default() }, cfg.architecture(data.sample_shape, data.classes).unwrap(), 0);
    assert!(bad.unwrap().train_epoch(&data).is_err());
}

#[test]
fn checkpoint_restores_inference() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(4);
    let arch = Architecture::preset("minires", [2, 8, 8], 3, 2).unwrap();
    let mut a = Model::new(arch.clone(), 0.5, 0.2, &mut rng).unwrap();
    let x = rng.normal_tensor(&[2, 5, 2, 8, 8], 1.0);
    // one training-mode pass moves the running statistics away from their defaults
    a.forward(&x, &ForwardOptions::train(SgConfig::default())).unwrap();
    let path = dir.path().join("m.spkt");
    save_checkpoint(&a.to_named_tensors(), &path).unwrap();
    let mut b = Model::new(arch, 0.5, 0.2, &mut Rng::new(99)).unwrap();
    b.load_named_tensors(&load_checkpoint(&path).unwrap()).unwrap();
    let eval = ForwardOptions::eval(SgConfig::default());
    assert_eq!(a.forward(&x, &eval).unwrap().0, b.forward(&x, &eval).unwrap().0);
}

#[test]
fn metric_emission_leaves_the_model_alone() {
    let mut rng = Rng::new(2);
    let arch = Architecture::preset("convs", [1, 8, 8], 2, 2).unwrap();
    let mut m = Model::new(arch, 0.5, 0.2, &mut rng).unwrap();
    let x = rng.normal_tensor(&[2, 4, 1, 8, 8], 1.0);
    let (_, tape) = m.forward(&x, &ForwardOptions::train(SgConfig::default())).unwrap();
    let before = m.flat_params();
    let ga = grad_available_proportion(&tape);
    let fr = firing_rate(&tape);
    assert_eq!(m.flat_params(), before);
    assert!(ga.iter().flatten().chain(&fr).all(|p| (0.0..=1.0).contains(p)));
}

proptest! {
    #[test]
    fn support_proportion_is_monotone_in_width(v in prop::collection::vec(-3.0f64..3.0, 1..200), k1 in 0.01f64..4.0, k2 in 0.01f64..4.0) {
        let (lo, hi) = if k1 <= k2 { (k1, k2) } else { (k2, k1) };
        let a = proportion_in_support(&v, 0.5, lo);
        let b = proportion_in_support(&v, 0.5, hi);
        prop_assert!(a <= b);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn energy_is_the_weighted_sum(adds in 0.0f64..1e10, mults in 0.0f64..1e10) {
        let expect = (adds * E_AC + mults * E_MAC) * 1e3;
        prop_assert!((energy_mj(adds, mults) - expect).abs() <= 1e-12 * expect.max(1.0));
    }

    #[test]
    fn firing_rates_lie_in_unit_interval(seed in 0u64..500, v_th in 0.05f64..2.0, t in 1usize..4) {
        let mut rng = Rng::new(seed);
        let arch = Architecture::preset("mlp-64", [3, 1, 1], 2, t).unwrap();
        let mut m = Model::new(arch, v_th, 0.3, &mut rng).unwrap();
        let x = rng.normal_tensor(&[t, 4, 3, 1, 1], 2.0);
        let (logits, tape) = m.forward(&x, &ForwardOptions::train(SgConfig::default())).unwrap();
        prop_assert!(firing_rate(&tape).iter().all(|r| (0.0..=1.0).contains(r)));
        prop_assert!(cross_entropy(&logits, &[0, 1, 1, 0]).unwrap() >= 0.0);
    }
}
