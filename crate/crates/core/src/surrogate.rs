//! Surrogate derivatives for the spike step and the membrane-distribution-driven
//! width rule.
//!
//! Every family is written in terms of the offset `x = V - V_th` and a width `kappa`,
//! and integrates to one over the real line. Under the default peak-matched
//! convention each family peaks at `1 / kappa`, the height of the rectangle.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest width the rule may produce; `gamma_bar` can collapse toward zero in training.
pub const KAPPA_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SgFamily {
    Rectangular,
    Triangular,
    Sigmoid,
    Atan,
}

impl SgFamily {
    pub const ALL: [SgFamily; 4] = [Self::Rectangular, Self::Triangular, Self::Sigmoid, Self::Atan];

    /// Surrogate derivative `dS/dV` at offset `x`.
    pub fn grad(self, x: f64, kappa: f64) -> f64 {
        match self {
            Self::Rectangular => {
                if x.abs() < kappa / 2.0 {
                    1.0 / kappa
                } else {
                    0.0
                }
            }
            Self::Triangular => (1.0 - x.abs() / kappa).max(0.0) / kappa,
            Self::Sigmoid => {
                // logistic with temperature kappa / 4 has peak slope 1 / kappa
                let s = logistic(4.0 * x / kappa);
                4.0 / kappa * s * (1.0 - s)
            }
            Self::Atan => {
                let z = std::f64::consts::PI * x / kappa;
                1.0 / (kappa * (1.0 + z * z))
            }
        }
    }

    /// Antiderivative of [`grad`](Self::grad) rising from 0 to 1: the differentiable
    /// spike relaxation whose slope is exactly the surrogate.
    pub fn relaxed_spike(self, x: f64, kappa: f64) -> f64 {
        match self {
            Self::Rectangular => (x / kappa + 0.5).clamp(0.0, 1.0),
            Self::Triangular => {
                if x <= -kappa {
                    0.0
                } else if x <= 0.0 {
                    (x + kappa).powi(2) / (2.0 * kappa * kappa)
                } else if x < kappa {
                    1.0 - (kappa - x).powi(2) / (2.0 * kappa * kappa)
                } else {
                    1.0
                }
            }
            Self::Sigmoid => logistic(4.0 * x / kappa),
            Self::Atan => (std::f64::consts::PI * x / kappa).atan() / std::f64::consts::PI + 0.5,
        }
    }

    /// Index of the smooth piece of [`relaxed_spike`](Self::relaxed_spike) containing `x`.
    /// Points where this changes are the kinks a finite-difference check must avoid.
    pub fn piece(self, x: f64, kappa: f64) -> u8 {
        match self {
            Self::Rectangular => {
                if x < -kappa / 2.0 {
                    0
                } else if x <= kappa / 2.0 {
                    1
                } else {
                    2
                }
            }
            Self::Triangular => {
                if x < -kappa {
                    0
                } else if x < 0.0 {
                    1
                } else if x < kappa {
                    2
                } else {
                    3
                }
            }
            Self::Sigmoid | Self::Atan => 0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Rectangular => "rectangular",
            Self::Triangular => "triangular",
            Self::Sigmoid => "sigmoid",
            Self::Atan => "atan",
        }
    }
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl fmt::Display for SgFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SgFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rectangular" | "rect" => Ok(Self::Rectangular),
            "triangular" | "tri" => Ok(Self::Triangular),
            "sigmoid" => Ok(Self::Sigmoid),
            "atan" | "arctan" => Ok(Self::Atan),
            other => Err(Error::InvalidArgument(format!("unknown surrogate family {other:?}"))),
        }
    }
}

/// How `kappa` maps onto the non-rectangular families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WidthConvention {
    /// Peak derivative equals `1 / kappa`, like the rectangle.
    PeakMatched,
    /// The family is evaluated at width `kappa / 2`, so the triangle's support coincides
    /// with the rectangle's `[V_th - kappa/2, V_th + kappa/2]`.
    SupportMatched,
}

impl fmt::Display for WidthConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PeakMatched => "peak-matched",
            Self::SupportMatched => "support-matched",
        })
    }
}

impl FromStr for WidthConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "peak-matched" | "peak" => Ok(Self::PeakMatched),
            "support-matched" | "support" => Ok(Self::SupportMatched),
            other => Err(Error::InvalidArgument(format!("unknown width convention {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgConfig {
    pub family: SgFamily,
    /// Width used when `adaptive` is off.
    pub kappa: f64,
    pub adaptive: bool,
    pub convention: WidthConvention,
}

impl Default for SgConfig {
    fn default() -> Self {
        Self {
            family: SgFamily::Rectangular,
            kappa: 1.0,
            adaptive: true,
            convention: WidthConvention::PeakMatched,
        }
    }
}

impl SgConfig {
    pub fn fixed(family: SgFamily, kappa: f64) -> Self {
        Self { family, kappa, adaptive: false, convention: WidthConvention::PeakMatched }
    }

    /// Width for timestep `t` (1-based) of a layer with decay `tau` and affine mean `gamma_bar`.
    pub fn width_at(&self, tau: f64, gamma_bar: f64, v_th: f64, t: usize) -> f64 {
        if self.adaptive {
            adaptive_width(tau, gamma_bar, v_th, t)
        } else {
            self.kappa.max(KAPPA_FLOOR)
        }
    }

    /// Width actually handed to the family's formula.
    pub fn family_width(&self, kappa: f64) -> f64 {
        match (self.family, self.convention) {
            (SgFamily::Rectangular, _) | (_, WidthConvention::PeakMatched) => kappa,
            (_, WidthConvention::SupportMatched) => kappa / 2.0,
        }
    }

    pub fn grad(&self, v: f64, v_th: f64, kappa: f64) -> f64 {
        self.family.grad(v - v_th, self.family_width(kappa))
    }

    pub fn relaxed_spike(&self, v: f64, v_th: f64, kappa: f64) -> f64 {
        self.family.relaxed_spike(v - v_th, self.family_width(kappa))
    }

    pub fn piece(&self, v: f64, v_th: f64, kappa: f64) -> u8 {
        self.family.piece(v - v_th, self.family_width(kappa))
    }
}

/// `kappa = 2 * gamma_bar * V_th` at the first step and
/// `2 * sqrt(1 + tau^2) * gamma_bar * V_th` afterwards, floored at [`KAPPA_FLOOR`].
pub fn adaptive_width(tau: f64, gamma_bar: f64, v_th: f64, t: usize) -> f64 {
    let spread = if t <= 1 { 1.0 } else { (1.0 + tau * tau).sqrt() };
    (2.0 * spread * gamma_bar * v_th).max(KAPPA_FLOOR)
}

fn check_kappa(kappa: f64) -> Result<()> {
    if kappa > 0.0 && kappa.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("surrogate width must be positive, got {kappa}")))
    }
}

/// `(1/kappa) * 1[|v - V_th| < kappa/2]`, elementwise.
pub fn rect_sg(v: &Tensor, v_th: f64, kappa: f64) -> Result<Tensor> {
    family_sg(SgFamily::Rectangular, v, v_th, kappa)
}

pub fn family_sg(family: SgFamily, v: &Tensor, v_th: f64, kappa: f64) -> Result<Tensor> {
    check_kappa(kappa)?;
    Ok(v.map(|x| family.grad(x - v_th, kappa)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn at(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn rectangle_values() {
        assert_eq!(rect_sg(&at(0.5), 0.5, 1.0).unwrap().data()[0], 1.0);
        assert_eq!(rect_sg(&at(1.0), 0.5, 1.0).unwrap().data()[0], 0.0);
        assert_eq!(rect_sg(&at(0.3), 0.5, 1.0).unwrap().data()[0], 1.0);
        assert_eq!(rect_sg(&at(0.5), 0.5, 0.25).unwrap().data()[0], 4.0);
        assert!(rect_sg(&at(0.5), 0.5, 0.0).is_err());
        assert!(rect_sg(&at(0.5), 0.5, -1.0).is_err());
    }

    #[test]
    fn adaptive_width_values() {
        assert_eq!(adaptive_width(0.2, 1.0, 0.5, 1), 1.0);
        let k2 = adaptive_width(0.2, 1.0, 0.5, 2);
        assert!((k2 - 1.04f64.sqrt()).abs() < 1e-15);
        assert!((k2 - 1.019804).abs() < 1e-6);
        assert_eq!(adaptive_width(0.0, 1.0, 0.5, 3), 1.0);
        assert_eq!(adaptive_width(0.2, 0.0, 0.5, 2), KAPPA_FLOOR);
        assert_eq!(adaptive_width(0.2, -3.0, 0.5, 1), KAPPA_FLOOR);
    }

    #[test]
    fn every_family_peaks_at_inverse_width() {
        for f in SgFamily::ALL {
            for kappa in [0.3, 1.0, 2.5] {
                let g = family_sg(f, &at(0.5), 0.5, kappa).unwrap().data()[0];
                assert!((g - 1.0 / kappa).abs() < 1e-14, "{f} at {kappa}: {g}");
            }
        }
    }

    #[test]
    fn triangle_support_edge_is_zero() {
        assert_eq!(SgFamily::Triangular.grad(0.7, 0.7), 0.0);
        assert_eq!(SgFamily::Triangular.grad(-0.7, 0.7), 0.0);
    }

    #[test]
    fn sigmoid_off_peak_matches_direct_formula() {
        let kappa = 0.8;
        let got = family_sg(SgFamily::Sigmoid, &at(0.5 + kappa), 0.5, kappa).unwrap().data()[0];
        // derivative of 1/(1+exp(-4x/k)) at x = k: (4/k) e^-4 / (1+e^-4)^2
        let e = (-4.0f64).exp();
        let expected = 4.0 / kappa * e / (1.0 + e).powi(2);
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.088_313_531_066_455_58).abs() < 1e-12);
    }

    #[test]
    fn unknown_family_tag() {
        assert!("gaussian".parse::<SgFamily>().is_err());
        assert_eq!("aTan".parse::<SgFamily>().unwrap(), SgFamily::Atan);
    }

    #[test]
    fn relaxed_spike_midpoint_and_saturation() {
        for f in SgFamily::ALL {
            assert!((f.relaxed_spike(0.0, 1.0) - 0.5).abs() < 1e-15);
        }
        assert_eq!(SgFamily::Rectangular.relaxed_spike(0.6, 1.0), 1.0);
        assert_eq!(SgFamily::Rectangular.relaxed_spike(-0.6, 1.0), 0.0);
    }

    #[test]
    fn relaxed_spike_slope_is_the_surrogate() {
        let h = 1e-6;
        for f in SgFamily::ALL {
            for &x in &[-1.3, -0.31, -0.05, 0.02, 0.27, 0.9] {
                let fd = (f.relaxed_spike(x + h, 0.8) - f.relaxed_spike(x - h, 0.8)) / (2.0 * h);
                assert!((fd - f.grad(x, 0.8)).abs() < 1e-6, "{f} at {x}");
            }
        }
    }

    #[test]
    fn families_integrate_to_one() {
        // composite Simpson on a wide window; the heavy atan tail is handled analytically
        for f in SgFamily::ALL {
            for kappa in [0.5, 1.0, 1.7] {
                let (a, b, n) = (-40.0, 40.0, 400_000);
                let h = (b - a) / n as f64;
                let mut s = f.grad(a, kappa) + f.grad(b, kappa);
                for i in 1..n {
                    let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                    s += w * f.grad(a + i as f64 * h, kappa);
                }
                let mut integral = s * h / 3.0;
                if f == SgFamily::Atan {
                    let tail = 1.0 - 2.0 * (std::f64::consts::PI * b / kappa).atan() / std::f64::consts::PI;
                    integral += tail;
                }
                let tol = if f == SgFamily::Rectangular { 1e-3 } else { 1e-6 };
                assert!((integral - 1.0).abs() < tol, "{f} kappa {kappa}: {integral}");
            }
        }
    }

    #[test]
    fn rectangle_integrates_exactly() {
        // the rectangle is piecewise constant: midpoint sums on a grid aligned with the
        // support edges are exact up to rounding
        for kappa in [0.25, 1.0, 2.0] {
            let n = 1_000_000;
            let (a, b) = (-kappa, kappa);
            let h = (b - a) / n as f64;
            let s: f64 = (0..n).map(|i| SgFamily::Rectangular.grad(a + (i as f64 + 0.5) * h, kappa)).sum::<f64>() * h;
            assert!((s - 1.0).abs() < 1e-6, "{s}");
        }
    }

    #[test]
    fn support_matched_convention() {
        let cfg = SgConfig { family: SgFamily::Triangular, kappa: 1.0, adaptive: false, convention: WidthConvention::SupportMatched };
        assert_eq!(cfg.grad(0.5 + 0.5, 0.5, 1.0), 0.0);
        assert!(cfg.grad(0.5 + 0.49, 0.5, 1.0) > 0.0);
        let rect = SgConfig { family: SgFamily::Rectangular, ..cfg };
        assert_eq!(rect.grad(0.5, 0.5, 1.0), 1.0);
    }

    proptest! {
        #[test]
        fn width_monotone_in_tau_and_linear(t1 in 0.0f64..0.99, dt in 0.0f64..0.5, g in 0.1f64..3.0, v in 0.1f64..2.0, t in 2usize..8) {
            prop_assert!(adaptive_width(t1 + dt, g, v, t) >= adaptive_width(t1, g, v, t));
            let base = adaptive_width(t1, g, v, t);
            prop_assert!((adaptive_width(t1, 2.0 * g, v, t) - 2.0 * base).abs() < 1e-12);
            prop_assert!((adaptive_width(t1, g, 3.0 * v, t) - 3.0 * base).abs() < 1e-12);
        }

        #[test]
        fn support_count_monotone_in_width(vs in prop::collection::vec(-2.0f64..3.0, 1..50), k in 0.01f64..3.0, dk in 0.0f64..2.0) {
            let v = Tensor::new(vec![vs.len()], vs).unwrap();
            let narrow = rect_sg(&v, 0.5, k).unwrap().data().iter().filter(|&&x| x > 0.0).count();
            let wide = rect_sg(&v, 0.5, k + dk).unwrap().data().iter().filter(|&&x| x > 0.0).count();
            prop_assert!(wide >= narrow);
        }
    }
}
