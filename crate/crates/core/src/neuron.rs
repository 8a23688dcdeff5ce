//! Iterative leaky integrate-and-fire dynamics with hard reset:
//!
//! ```text
//! V(t) = tau * V(t-1) * (1 - S(t-1)) + I(t)
//! S(t) = 1 if V(t) >= V_th else 0
//! ```
//!
//! The decay is parameterized per layer as `tau = sigmoid(rho)`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pre-decay value giving `tau = 0.2`, i.e. `-ln 4`.
pub const RHO_FOR_TAU_0_2: f64 = -1.386_294_361_119_890_6;

pub fn decay_from_rho(rho: f64) -> f64 {
    1.0 / (1.0 + (-rho).exp())
}

/// Inverse of [`decay_from_rho`] for `tau` in (0, 1).
pub fn rho_from_decay(tau: f64) -> f64 {
    (tau / (1.0 - tau)).ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeuronConfig {
    pub v_th: f64,
    pub rho: f64,
}

impl NeuronConfig {
    pub fn new(v_th: f64, tau: f64) -> Result<Self> {
        if !(v_th > 0.0 && v_th.is_finite()) {
            return Err(Error::InvalidArgument(format!("threshold must be positive, got {v_th}")));
        }
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::InvalidArgument(format!("decay must lie in (0, 1), got {tau}")));
        }
        Ok(Self { v_th, rho: rho_from_decay(tau) })
    }

    pub fn tau(&self) -> f64 {
        decay_from_rho(self.rho)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuronState {
    /// Membrane potentials, time-major `[T, ...]`.
    pub v: Tensor,
    /// Binary spikes, same shape as `v`.
    pub s: Tensor,
}

pub fn lif_step(
    v_prev: &Tensor,
    s_prev: &Tensor,
    input_current: &Tensor,
    cfg: &NeuronConfig,
) -> Result<(Tensor, Tensor)> {
    if v_prev.shape() != s_prev.shape() || v_prev.shape() != input_current.shape() {
        return Err(Error::ShapeMismatch(format!(
            "lif_step shapes {:?}, {:?}, {:?}",
            v_prev.shape(),
            s_prev.shape(),
            input_current.shape()
        )));
    }
    if s_prev.data().iter().any(|&s| s != 0.0 && s != 1.0) {
        return Err(Error::InvalidArgument("previous spikes must be binary".into()));
    }
    let tau = cfg.tau();
    let mut v = input_current.clone();
    let mut s = Tensor::zeros(v.shape());
    for (i, vi) in v.data_mut().iter_mut().enumerate() {
        *vi += tau * v_prev.data()[i] * (1.0 - s_prev.data()[i]);
    }
    for (si, &vi) in s.data_mut().iter_mut().zip(v.data()) {
        *si = if vi >= cfg.v_th { 1.0 } else { 0.0 };
    }
    v.check_finite("lif_step")?;
    Ok((v, s))
}

/// Generic time unroll over `steps` frames of `width` neurons each, starting from rest.
///
/// `fire(t, v)` produces the output carried on the spike wire. `reset_gates`, when given,
/// replaces the spike value in the `(1 - S)` reset factor (used to freeze the reset
/// during gradient checks). Returns `(v, s)` flattened time-major.
pub fn unroll_with(
    inputs: &[f64],
    steps: usize,
    width: usize,
    tau: f64,
    reset_gates: Option<&[f64]>,
    mut fire: impl FnMut(usize, f64) -> f64,
) -> (Vec<f64>, Vec<f64>) {
    debug_assert_eq!(inputs.len(), steps * width);
    let mut v = vec![0.0; steps * width];
    let mut s = vec![0.0; steps * width];
    for t in 0..steps {
        let base = t * width;
        for i in 0..width {
            let carry = if t == 0 {
                0.0
            } else {
                let prev = base - width + i;
                let gate = reset_gates.map_or(s[prev], |g| g[prev]);
                tau * v[prev] * (1.0 - gate)
            };
            let vi = carry + inputs[base + i];
            v[base + i] = vi;
            s[base + i] = fire(t, vi);
        }
    }
    (v, s)
}

/// Unrolls `inputs: [T, ...]` from rest and records potentials and spikes at every step.
pub fn unroll_layer(inputs: &Tensor, cfg: &NeuronConfig) -> Result<NeuronState> {
    let steps = inputs.shape().first().copied().unwrap_or(0);
    if steps == 0 {
        return Err(Error::InvalidShape("unroll needs at least one timestep".into()));
    }
    let width = inputs.len() / steps;
    let v_th = cfg.v_th;
    let (v, s) = unroll_with(inputs.data(), steps, width, cfg.tau(), None, |_, v| {
        if v >= v_th {
            1.0
        } else {
            0.0
        }
    });
    let v = Tensor::new(inputs.shape().to_vec(), v)?;
    let s = Tensor::new(inputs.shape().to_vec(), s)?;
    Ok(NeuronState { v, s })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(tau: f64, v_th: f64) -> NeuronConfig {
        NeuronConfig::new(v_th, tau).unwrap()
    }

    fn t1(x: f64) -> Tensor {
        Tensor::scalar(x)
    }

    #[test]
    fn resting_state_stays_at_rest() {
        let (v, s) = lif_step(&t1(0.0), &t1(0.0), &t1(0.0), &cfg(0.2, 0.5)).unwrap();
        assert_eq!((v.data()[0], s.data()[0]), (0.0, 0.0));
    }

    #[test]
    fn hand_evaluated_steps() {
        let (v, s) = lif_step(&t1(0.4), &t1(0.0), &t1(0.3), &cfg(0.2, 0.5)).unwrap();
        assert!((v.data()[0] - 0.38).abs() < 1e-12);
        assert_eq!(s.data()[0], 0.0);
        let (v, s) = lif_step(&t1(0.9), &t1(1.0), &t1(0.6), &cfg(0.2, 0.5)).unwrap();
        assert!((v.data()[0] - 0.6).abs() < 1e-12);
        assert_eq!(s.data()[0], 1.0);
    }

    #[test]
    fn threshold_boundary_fires() {
        let (_, s) = lif_step(&t1(0.0), &t1(0.0), &t1(0.5), &cfg(0.2, 0.5)).unwrap();
        assert_eq!(s.data()[0], 1.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(lif_step(&t1(0.0), &t1(0.5), &t1(0.0), &cfg(0.2, 0.5)).is_err());
        let two = Tensor::zeros(&[2]);
        assert!(lif_step(&t1(0.0), &t1(0.0), &two, &cfg(0.2, 0.5)).is_err());
        assert!(NeuronConfig::new(0.0, 0.2).is_err());
    }

    #[test]
    fn decay_parameterization() {
        assert_eq!(decay_from_rho(0.0), 0.5);
        assert!((decay_from_rho(-(4.0f64).ln()) - 0.2).abs() < 1e-15);
        assert!((decay_from_rho(RHO_FOR_TAU_0_2) - 0.2).abs() < 1e-15);
        let hi = decay_from_rho(30.0);
        assert!(hi < 1.0 && hi > 0.999_999);
        assert!((cfg(0.2, 0.5).tau() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn single_step_unroll_matches_lif_step() {
        let x = Tensor::new(vec![1, 3], vec![0.2, 0.5, 0.9]).unwrap();
        let st = unroll_layer(&x, &cfg(0.2, 0.5)).unwrap();
        let z = Tensor::zeros(&[3]);
        let (v, s) = lif_step(&z, &z, &x.clone().reshape(&[3]).unwrap(), &cfg(0.2, 0.5)).unwrap();
        assert_eq!(st.v.data(), v.data());
        assert_eq!(st.s.data(), s.data());
    }

    #[test]
    fn subthreshold_converges_to_geometric_limit() {
        let (tau, v_th, i) = (0.2, 0.5, 0.3);
        assert!(i < v_th * (1.0 - tau));
        let x = Tensor::full(&[60, 1], i);
        let st = unroll_layer(&x, &cfg(tau, v_th)).unwrap();
        assert!(st.s.data().iter().all(|&s| s == 0.0));
        let limit = i / (1.0 - tau);
        assert!((st.v.data()[59] - limit).abs() < 1e-12);
    }

    #[test]
    fn threshold_input_fires_every_step() {
        let x = Tensor::full(&[3, 1], 0.5);
        let st = unroll_layer(&x, &cfg(0.2, 0.5)).unwrap();
        assert_eq!(st.s.data(), &[1.0, 1.0, 1.0]);
        assert_eq!(st.v.data(), &[0.5, 0.5, 0.5]);
    }

    proptest! {
        #[test]
        fn reset_erases_previous_potential(v1 in -5.0f64..5.0, v2 in -5.0f64..5.0, i in -2.0f64..2.0) {
            let c = cfg(0.3, 0.5);
            let (a, _) = lif_step(&t1(v1), &t1(1.0), &t1(i), &c).unwrap();
            let (b, _) = lif_step(&t1(v2), &t1(1.0), &t1(i), &c).unwrap();
            prop_assert_eq!(a.data()[0], b.data()[0]);
        }

        #[test]
        fn potential_monotone_in_input_and_history(v in 0.01f64..3.0, i in -2.0f64..2.0, d in 0.001f64..1.0, tau in 0.01f64..0.99) {
            let c = cfg(tau, 0.5);
            let z = t1(0.0);
            let (base, _) = lif_step(&t1(v), &z, &t1(i), &c).unwrap();
            let (more_i, _) = lif_step(&t1(v), &z, &t1(i + d), &c).unwrap();
            let (more_v, _) = lif_step(&t1(v + d), &z, &t1(i), &c).unwrap();
            prop_assert!(more_i.data()[0] > base.data()[0]);
            prop_assert!(more_v.data()[0] > base.data()[0]);
        }
    }
}
