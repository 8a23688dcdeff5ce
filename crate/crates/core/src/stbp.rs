//! Spatio-temporal backpropagation through the recorded forward tape.
//!
//! Per neuron, walking `t` backwards with `dv_next = dL/dV(t+1)`:
//!
//! ```text
//! ds    = dL/dS(t) + dv_next * (-tau * V(t))          (reset path)
//! dv    = ds * h(V(t)) + dv_next * tau * (1 - S(t))
//! dtau += dv * V(t-1) * (1 - S(t-1))
//! ```
//!
//! `h` is the surrogate at the width the forward used; the width is a constant here.

use crate::error::{Error, Result};
use crate::model::{LayerTape, Model, SpikingLayer, Stage, StageTape, TapeCache};
use crate::normalization::tdbn_backward;
use crate::surrogate::SgConfig;
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BackwardOptions {
    /// Drop the `-tau * V` term through the reset gate.
    pub detach_reset: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: Vec<f64>,
    pub gamma: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
    pub rho: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StageGrads {
    Spiking(LayerGrads),
    Pool,
    Residual { first: LayerGrads, second: LayerGrads, shortcut: Option<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub stages: Vec<StageGrads>,
    pub readout: Vec<f64>,
}

impl GradientSet {
    /// Same order as [`Model::params`].
    pub fn slices(&self) -> Vec<&[f64]> {
        fn layer<'a>(out: &mut Vec<&'a [f64]>, g: &'a LayerGrads) {
            out.push(&g.weight);
            if let (Some(gm), Some(bt)) = (&g.gamma, &g.beta) {
                out.push(gm);
                out.push(bt);
            }
            out.push(std::slice::from_ref(&g.rho));
        }
        let mut out = Vec::new();
        for st in &self.stages {
            match st {
                StageGrads::Spiking(g) => layer(&mut out, g),
                StageGrads::Residual { first, second, shortcut } => {
                    layer(&mut out, first);
                    layer(&mut out, second);
                    if let Some(s) = shortcut {
                        out.push(s);
                    }
                }
                StageGrads::Pool => {}
            }
        }
        out.push(&self.readout);
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().into_iter().flatten().copied().collect()
    }

    pub fn layers(&self) -> Vec<&LayerGrads> {
        let mut out = Vec::new();
        for st in &self.stages {
            match st {
                StageGrads::Spiking(g) => out.push(g),
                StageGrads::Residual { first, second, .. } => {
                    out.push(first);
                    out.push(second);
                }
                StageGrads::Pool => {}
            }
        }
        out
    }

    pub fn global_norm(&self) -> f64 {
        self.slices().iter().flat_map(|s| s.iter()).map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Gradients of the loss w.r.t. every parameter given `loss_grad = dL/dlogits` of shape
/// `[N, classes]`.
pub fn backward(model: &Model, tape: &TapeCache, loss_grad: &Tensor, opts: &BackwardOptions) -> Result<GradientSet> {
    let classes = model.readout.shape()[0];
    if loss_grad.shape() != [tape.batch, classes] {
        return Err(Error::ShapeMismatch(format!(
            "loss gradient {:?} vs logits [{}, {classes}]",
            loss_grad.shape(),
            tape.batch
        )));
    }
    if tape.stages.len() != model.stages.len() {
        return Err(Error::MissingTape(format!("tape has {} stages, model {}", tape.stages.len(), model.stages.len())));
    }
    loss_grad.check_finite("loss gradient")?;
    let (steps, batch) = (tape.steps, tape.batch);
    let frames = steps * batch;

    // readout: logits = (1/T) sum_t W x_t
    let scaled: Vec<f64> = loss_grad.data().iter().map(|g| g / steps as f64).collect();
    let mut grad_y = Vec::with_capacity(frames * classes);
    for _ in 0..steps {
        grad_y.extend_from_slice(&scaled);
    }
    let mut readout = vec![0.0; model.readout.len()];
    let mut upstream = tensor::linear_backward(&tape.readout_input, frames, &model.readout, &grad_y, &mut readout, true)
        .expect("input gradient requested");

    let mut stages = Vec::with_capacity(model.stages.len());
    for (i, (stage, st_tape)) in model.stages.iter().zip(&tape.stages).enumerate().rev() {
        let want_input = i > 0;
        let grads = match (stage, st_tape) {
            (Stage::Spiking(layer), StageTape::Spiking(lt)) => {
                let (g, _, d_in) = layer_backward(layer, lt, &upstream, tape.sg, opts, want_input)?;
                if let Some(d) = d_in {
                    upstream = d;
                }
                StageGrads::Spiking(g)
            }
            (Stage::Pool { input }, StageTape::Pool { .. }) => {
                let [c, h, w] = *input;
                upstream = tensor::avgpool2_backward_raw(&upstream, frames * c, h, w);
                StageGrads::Pool
            }
            (Stage::Residual(block), StageTape::Residual { first, second }) => {
                let (g2, d_cur2, d_first_s) = layer_backward(&block.second, second, &upstream, tape.sg, opts, true)?;
                let d_first_s = d_first_s.expect("input gradient requested");
                let (g1, _, d_in1) = layer_backward(&block.first, first, &d_first_s, tape.sg, opts, want_input)?;
                let mut shortcut_grad = None;
                let mut d_skip = match &block.shortcut {
                    Some(sc) => {
                        let mut gw = vec![0.0; sc.weight.len()];
                        let d = sc.backward(&first.input, frames, &d_cur2, &mut gw, want_input);
                        shortcut_grad = Some(gw);
                        d
                    }
                    None => want_input.then(|| d_cur2.clone()),
                };
                if let (Some(d), Some(d1)) = (&mut d_skip, d_in1) {
                    for (a, b) in d.iter_mut().zip(&d1) {
                        *a += b;
                    }
                    upstream = std::mem::take(d);
                }
                StageGrads::Residual { first: g1, second: g2, shortcut: shortcut_grad }
            }
            _ => return Err(Error::MissingTape(format!("stage {i} tape does not match the model"))),
        };
        stages.push(grads);
    }
    stages.reverse();
    let out = GradientSet { stages, readout };
    if out.slices().iter().any(|s| s.iter().any(|g| !g.is_finite())) {
        return Err(Error::NonFinite("parameter gradient".into()));
    }
    Ok(out)
}

/// Returns the layer's parameter gradients, the gradient w.r.t. its pre-normalization
/// synaptic current and, when requested, w.r.t. its input.
fn layer_backward(
    layer: &SpikingLayer,
    lt: &LayerTape,
    d_spikes: &[f64],
    sg: SgConfig,
    opts: &BackwardOptions,
    want_input: bool,
) -> Result<(LayerGrads, Vec<f64>, Option<Vec<f64>>)> {
    let (d_current, d_tau) = lif_backward(lt, d_spikes, sg, opts.detach_reset);
    let tau = lt.tau;
    let (d_pre, gamma, beta) = match &layer.norm {
        Some(_) => {
            let cache = lt.norm_cache.as_ref();
            let up = Tensor::new(
                vec![lt.steps, lt.batch, lt.out_shape[0], lt.out_shape[1] * lt.out_shape[2]],
                d_current,
            )?;
            let (dx, dg, db) = tdbn_backward(&up, cache)?;
            (dx.into_data(), Some(dg), Some(db))
        }
        None => (d_current, None, None),
    };
    let mut weight = vec![0.0; layer.synapse.weight.len()];
    let d_in = layer.synapse.backward(&lt.input, lt.steps * lt.batch, &d_pre, &mut weight, want_input);
    let grads = LayerGrads { weight, gamma, beta, rho: d_tau * tau * (1.0 - tau), tau: d_tau };
    Ok((grads, d_pre, d_in))
}

/// Temporal recursion through the membrane. Returns `(dL/dI, dL/dtau)` where `I` is the
/// post-normalization input current.
pub fn lif_backward(lt: &LayerTape, d_spikes: &[f64], sg: SgConfig, detach_reset: bool) -> (Vec<f64>, f64) {
    let w = lt.width();
    let steps = lt.steps;
    let tau = lt.tau;
    let gates = lt.reset_gates.as_deref().unwrap_or(&lt.s);
    // frozen gates are constants, so no gradient flows through them
    let reset_path = !detach_reset && lt.reset_gates.is_none();
    let mut d_cur = vec![0.0; steps * w];
    let mut dv_next = vec![0.0; w];
    let mut d_tau = 0.0;
    for t in (0..steps).rev() {
        let kappa = lt.kappas[t];
        let last = t + 1 == steps;
        for i in 0..w {
            let idx = t * w + i;
            let v = lt.v[idx];
            let mut ds = d_spikes[idx];
            let mut dv = 0.0;
            if !last {
                if reset_path {
                    ds += dv_next[i] * (-tau * v);
                }
                dv += dv_next[i] * tau * (1.0 - gates[idx]);
            }
            dv += ds * sg.grad(v, lt.v_th, kappa);
            d_cur[idx] = dv;
            if t > 0 {
                let prev = idx - w;
                d_tau += dv * lt.v[prev] * (1.0 - gates[prev]);
            }
            dv_next[i] = dv;
        }
    }
    (d_cur, d_tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, ForwardOptions, LayerSpec};
    use crate::neuron::rho_from_decay;
    use crate::rng::Rng;

    /// One input feature wired to one neuron, no normalization, identity readout.
    fn single_neuron(steps: usize, w: f64, tau: f64) -> Model {
        let arch = Architecture { input: [1, 1, 1], layers: vec![LayerSpec::Fc { out: 1 }], timesteps: steps, classes: 1, normalize: false };
        let mut m = Model::new(arch, 0.5, tau, &mut Rng::new(0)).unwrap();
        if let Stage::Spiking(l) = &mut m.stages[0] {
            l.synapse.weight.data_mut()[0] = w;
            l.neuron.rho = rho_from_decay(tau);
        }
        m.readout.data_mut()[0] = 1.0;
        m
    }

    #[test]
    fn single_neuron_two_steps_by_hand() {
        // x = (0.3, 0.4), w = 1, tau = 0.2, V_th = 0.5, rectangular width 1
        // V1 = 0.3 (silent), V2 = 0.06 + 0.4 = 0.46 (silent)
        // L = o = (S1 + S2) / 2, so dL/dS_t = 0.5
        // dV2 = 0.5 * h(0.46) = 0.5 ; dV1 = 0.5 * h(0.3) + dV2 * tau = 0.5 + 0.1 = 0.6
        // with reset path: ds1 += dV2 * (-tau * V1) = -0.03 -> dV1 = 0.47 * 1 + 0.1 = 0.57
        // dtau = dV2 * V1 = 0.15 ; drho = 0.15 * 0.2 * 0.8 = 0.024
        let mut m = single_neuron(2, 1.0, 0.2);
        let x = Tensor::new(vec![2, 1, 1, 1, 1], vec![0.3, 0.4]).unwrap();
        let sg = SgConfig::fixed(crate::surrogate::SgFamily::Rectangular, 1.0);
        let (logits, tape) = m.forward(&x, &ForwardOptions::train(sg)).unwrap();
        assert_eq!(logits.data(), &[0.0]);
        let g = backward(&m, &tape, &Tensor::full(&[1, 1], 1.0), &BackwardOptions::default()).unwrap();
        let l = g.layers()[0];
        assert!((l.tau - 0.15).abs() < 1e-12);
        assert!((l.rho - 0.024).abs() < 1e-12);
        // dW = dV1 * x1 + dV2 * x2 = 0.57 * 0.3 + 0.5 * 0.4
        assert!((l.weight[0] - (0.57 * 0.3 + 0.5 * 0.4)).abs() < 1e-12, "{}", l.weight[0]);
        let g = backward(&m, &tape, &Tensor::full(&[1, 1], 1.0), &BackwardOptions { detach_reset: true }).unwrap();
        assert!((g.layers()[0].weight[0] - (0.6 * 0.3 + 0.5 * 0.4)).abs() < 1e-12);
    }

    #[test]
    fn spike_gates_the_temporal_path() {
        // x = (0.7, 0.2): V1 = 0.7 fires, V2 = 0.2
        // dV2 = 0.5 * h(0.2) = 0.5 ; temporal term vanishes since S1 = 1
        // reset path: ds1 = 0.5 + 0.5 * (-0.2 * 0.7) = 0.43 ; dV1 = 0.43 * h(0.7) = 0.43
        // dtau = dV2 * V1 * (1 - S1) = 0
        let mut m = single_neuron(2, 1.0, 0.2);
        let x = Tensor::new(vec![2, 1, 1, 1, 1], vec![0.7, 0.2]).unwrap();
        let sg = SgConfig::fixed(crate::surrogate::SgFamily::Rectangular, 1.0);
        let (logits, tape) = m.forward(&x, &ForwardOptions::train(sg)).unwrap();
        assert_eq!(logits.data(), &[0.5]);
        let g = backward(&m, &tape, &Tensor::full(&[1, 1], 1.0), &BackwardOptions::default()).unwrap();
        let l = g.layers()[0];
        assert_eq!(l.tau, 0.0);
        assert!((l.weight[0] - (0.43 * 0.7 + 0.5 * 0.2)).abs() < 1e-12);
    }

    #[test]
    fn two_neurons_three_steps_by_hand() {
        // independent neurons, inputs (0.3, 0.3, 0.3) and (0.6, 0.1, 0.45), tau 0.5, width 1
        // neuron a: V = 0.3, 0.45, 0.525 -> spikes 0,0,1
        // neuron b: V = 0.6, 0.1, 0.5   -> spikes 1,0,1
        let arch = Architecture { input: [2, 1, 1], layers: vec![LayerSpec::Fc { out: 2 }], timesteps: 3, classes: 1, normalize: false };
        let mut m = Model::new(arch, 0.5, 0.5, &mut Rng::new(0)).unwrap();
        if let Stage::Spiking(l) = &mut m.stages[0] {
            l.synapse.weight.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        }
        m.readout.data_mut().copy_from_slice(&[1.0, 1.0]);
        let x = Tensor::new(vec![3, 1, 2, 1, 1], vec![0.3, 0.6, 0.3, 0.1, 0.3, 0.45]).unwrap();
        let sg = SgConfig::fixed(crate::surrogate::SgFamily::Rectangular, 1.0);
        let (_, tape) = m.forward(&x, &ForwardOptions::train(sg)).unwrap();
        let lt = &tape.layers()[0];
        assert_eq!(lt.s, vec![0.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        let third = 1.0 / 3.0;
        let (d_cur, d_tau) = lif_backward(lt, &[third; 6], sg, false);
        // a: dV3 = 1/3 ; ds2 = 1/3 - 0.5*0.45/3 ; dV2 = ds2 + 0.5/3 ; ds1 = 1/3 - dV2*0.15 ; dV1 = ds1 + dV2*0.5
        let dv3a = third;
        let dv2a = (third - 0.5 * 0.45 * dv3a) + 0.5 * dv3a;
        let dv1a = (third - 0.5 * 0.3 * dv2a) + 0.5 * dv2a;
        // b: dV3 = 1/3 ; dV2 = (1/3 - 0.05/3) + 0.5/3 ; dV1 = (1/3 - 0.3 * dV2) (gate closed)
        let dv3b = third;
        let dv2b = (third - 0.5 * 0.1 * dv3b) + 0.5 * dv3b;
        let dv1b = third - 0.5 * 0.6 * dv2b;
        let expect = [dv1a, dv1b, dv2a, dv2b, dv3a, dv3b];
        for (g, e) in d_cur.iter().zip(expect) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
        let dtau = dv2a * 0.3 + dv3a * 0.45 + dv2b * 0.0 + dv3b * 0.1;
        assert!((d_tau - dtau).abs() < 1e-12);
    }

    #[test]
    fn mismatched_loss_gradient_rejected() {
        let mut m = single_neuron(1, 1.0, 0.2);
        let x = Tensor::new(vec![1, 1, 1, 1, 1], vec![0.3]).unwrap();
        let (_, tape) = m.forward(&x, &ForwardOptions::train(SgConfig::default())).unwrap();
        assert!(backward(&m, &tape, &Tensor::zeros(&[2, 1]), &BackwardOptions::default()).is_err());
    }

    #[test]
    fn gradient_layout_matches_parameters() {
        let mut rng = Rng::new(8);
        let arch = Architecture::preset("minires", [2, 8, 8], 3, 2).unwrap();
        let mut m = Model::new(arch, 0.5, 0.2, &mut rng).unwrap();
        let x = rng.normal_tensor(&[2, 3, 2, 8, 8], 1.0);
        let (_, tape) = m.forward(&x, &ForwardOptions::train(SgConfig::default())).unwrap();
        let g = backward(&m, &tape, &rng.normal_tensor(&[3, 3], 1.0), &BackwardOptions::default()).unwrap();
        let shapes: Vec<usize> = m.params().iter().map(|(_, _, p)| p.len()).collect();
        let got: Vec<usize> = g.slices().iter().map(|s| s.len()).collect();
        assert_eq!(shapes, got);
        assert!(g.global_norm() > 0.0);
    }
}
