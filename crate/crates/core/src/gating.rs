//! Temperature-controlled gates on the encoder: one per parameter
//! (unstructured) or one per unit/channel (structured).
//!
//! Forward factor is `1` for `m >= 0` and `2σ(m/τ)` below zero; the backward
//! pass always uses the smooth branch's derivative.

use crate::error::{invalid, Result};
use crate::nn::{Architecture, Grads, Mask, Network, Scalar, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    Unstructured,
    Structured,
}

impl std::str::FromStr for GateMode {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unstructured" | "u" => Ok(GateMode::Unstructured),
            "structured" | "s" => Ok(GateMode::Structured),
            other => invalid(format!("unknown gate mode '{other}'")),
        }
    }
}

impl std::fmt::Display for GateMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GateMode::Unstructured => "unstructured",
            GateMode::Structured => "structured",
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gate factor `g(m)`.
pub fn gate_factor(m: f64, tau: f64) -> f64 {
    if m >= 0.0 {
        1.0
    } else {
        2.0 * sigmoid(m / tau)
    }
}

/// Straight-through surrogate `dg/dm = (2/τ) σ(m/τ)(1 − σ(m/τ))`.
pub fn gate_slope(m: f64, tau: f64) -> f64 {
    let s = sigmoid(m / tau);
    2.0 / tau * s * (1.0 - s)
}

pub fn masked_weight(w: f64, m: f64, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return invalid(format!("temperature must be positive, got {tau}"));
    }
    Ok(if m >= 0.0 { w } else { w * gate_factor(m, tau) })
}

pub fn masked_activation(z: f64, m: f64, tau: f64) -> Result<f64> {
    masked_weight(z, m, tau)
}

pub fn gate_gradient(w_or_z: f64, m: f64, tau: f64, upstream: f64) -> f64 {
    upstream * w_or_z * gate_slope(m, tau)
}

/// Gates plus the mask they induce, owned so a [`Mask`] can borrow it.
pub enum MaskBuf<T> {
    None,
    Weights(Vec<Tensor<T>>),
    Units(Vec<Vec<T>>),
}

impl<T: Scalar> MaskBuf<T> {
    pub fn as_mask(&self) -> Mask<'_, T> {
        match self {
            MaskBuf::None => Mask::None,
            MaskBuf::Weights(w) => Mask::Weights(w),
            MaskBuf::Units(u) => Mask::Units(u),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateSet<T> {
    pub mode: GateMode,
    pub tau: f64,
    pub m: Vec<Tensor<T>>,
}

impl<T: Scalar> GateSet<T> {
    /// All gates at zero (fully open), `τ = 1`.
    pub fn new(arch: &Architecture, mode: GateMode) -> Self {
        let m = match mode {
            GateMode::Unstructured => arch.param_shapes()[..arch.encoder_param_tensors()]
                .iter()
                .map(|s| Tensor::zeros(s))
                .collect(),
            GateMode::Structured => arch.encoder_units().iter().map(|&(_, u)| Tensor::zeros(&[u])).collect(),
        };
        GateSet { mode, tau: 1.0, m }
    }

    pub fn len(&self) -> usize {
        self.m.iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cast<U: Scalar>(&self) -> GateSet<U> {
        GateSet { mode: self.mode, tau: self.tau, m: self.m.iter().map(|t| t.cast()).collect() }
    }

    pub fn check(&self, arch: &Architecture) -> Result<()> {
        let want = GateSet::<T>::new(arch, self.mode);
        if want.m.len() != self.m.len() || want.m.iter().zip(&self.m).any(|(a, b)| a.shape != b.shape) {
            return invalid("gate shapes do not match the encoder");
        }
        if !(self.tau > 0.0) {
            return invalid("temperature must be positive");
        }
        Ok(())
    }

    fn factor_tensors(&self, hard: bool) -> Vec<Tensor<T>> {
        self.m
            .iter()
            .map(|t| Tensor {
                shape: t.shape.clone(),
                data: t
                    .data
                    .iter()
                    .map(|&m| {
                        let m = m.as_f64();
                        if hard {
                            if m >= 0.0 { T::one() } else { T::zero() }
                        } else {
                            T::of(gate_factor(m, self.tau))
                        }
                    })
                    .collect(),
            })
            .collect()
    }

    /// Binary mask: 1 where `m >= 0`.
    pub fn harden(&self) -> Vec<Vec<bool>> {
        self.m.iter().map(|t| t.data.iter().map(|m| *m >= T::zero()).collect()).collect()
    }

    /// Mask for a forward pass, soft or hard.
    pub fn mask(&self, net: &Network<T>, hard: bool) -> MaskBuf<T> {
        let f = self.factor_tensors(hard);
        match self.mode {
            GateMode::Unstructured => MaskBuf::Weights(
                net.encoder_params()
                    .iter()
                    .zip(&f)
                    .map(|(w, g)| Tensor {
                        shape: w.shape.clone(),
                        data: w.data.iter().zip(&g.data).map(|(a, b)| *a * *b).collect(),
                    })
                    .collect(),
            ),
            GateMode::Structured => MaskBuf::Units(f.into_iter().map(|t| t.data).collect()),
        }
    }

    /// Gradient with respect to `m` from gradients of a pass run under
    /// `self.mask(net, false)`.
    pub fn gate_grads(&self, net: &Network<T>, g: &Grads<T>) -> Vec<Tensor<T>> {
        let tau = self.tau;
        match self.mode {
            GateMode::Unstructured => self
                .m
                .iter()
                .zip(net.encoder_params())
                .zip(&g.params)
                .map(|((m, w), up)| Tensor {
                    shape: m.shape.clone(),
                    data: m
                        .data
                        .iter()
                        .zip(&w.data)
                        .zip(&up.data)
                        .map(|((m, w), u)| T::of(gate_gradient(w.as_f64(), m.as_f64(), tau, u.as_f64())))
                        .collect(),
                })
                .collect(),
            GateMode::Structured => self
                .m
                .iter()
                .zip(&g.units)
                .map(|(m, up)| Tensor {
                    shape: m.shape.clone(),
                    data: m
                        .data
                        .iter()
                        .zip(up)
                        .map(|(m, u)| T::of(gate_gradient(1.0, m.as_f64(), tau, u.as_f64())))
                        .collect(),
                })
                .collect(),
        }
    }

    /// Fraction of gates with `m < 0`.
    pub fn sparsity(&self) -> f64 {
        let n = self.len();
        if n == 0 {
            return 0.0;
        }
        let closed = self.m.iter().flat_map(|t| &t.data).filter(|m| **m < T::zero()).count();
        closed as f64 / n as f64
    }

    /// Fraction of encoder parameters removed by the hard mask. For structured
    /// gates a closed unit takes its incoming weights and its bias with it.
    pub fn param_sparsity(&self, arch: &Architecture) -> f64 {
        match self.mode {
            GateMode::Unstructured => self.sparsity(),
            GateMode::Structured => {
                let shapes = arch.param_shapes();
                let total: usize = shapes[..arch.encoder_param_tensors()].iter().map(|s| s.iter().product::<usize>()).sum();
                let mut removed = 0;
                for (idx, ((_, units), m)) in arch.encoder_units().iter().zip(&self.m).enumerate() {
                    let w: usize = shapes[2 * idx].iter().product();
                    let per_unit = w / units + 1;
                    removed += m.data.iter().filter(|v| **v < T::zero()).count() * per_unit;
                }
                if total == 0 {
                    0.0
                } else {
                    removed as f64 / total as f64
                }
            }
        }
    }

    pub fn halve_temperature(&mut self) {
        self.tau *= 0.5;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn scalar_examples() {
        assert_eq!(masked_weight(2.0, 0.0, 1.0).unwrap(), 2.0);
        assert_eq!(masked_weight(-1.5, 0.7, 0.5).unwrap(), -1.5);
        assert_abs_diff_eq!(masked_weight(2.0, -3.0, 0.1).unwrap(), 4.0 * sigmoid(-30.0), epsilon = 1e-25);
        assert_abs_diff_eq!(masked_weight(2.0, -3.0, 0.1).unwrap(), 3.74e-13, epsilon = 1e-15);
        assert_eq!(masked_activation(1.0, 0.0, 1.0).unwrap(), 1.0);
        assert_abs_diff_eq!(masked_activation(5.0, -10.0, 1.0).unwrap(), 4.54e-4, epsilon = 1e-6);
        assert_eq!(masked_activation(3.0, 2.0, 1.0).unwrap(), 3.0);
        assert!(masked_weight(1.0, 0.0, 0.0).is_err());
        assert!(masked_weight(1.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn surrogate_examples() {
        assert_abs_diff_eq!(gate_gradient(1.0, 0.0, 1.0, 1.0), 0.5, epsilon = 1e-15);
        assert_eq!(gate_gradient(1.0, 0.3, 1.0, 0.0), 0.0);
        assert!(gate_gradient(1.0, 800.0, 1.0, 1.0).abs() < 1e-300);
        assert!(gate_gradient(1.0, -800.0, 1.0, 1.0).abs() < 1e-300);
    }

    #[test]
    fn temperature_schedule() {
        let arch = Architecture::mlp_default(1, 2, 2, 3, 2);
        let mut g = GateSet::<f32>::new(&arch, GateMode::Structured);
        g.halve_temperature();
        assert_eq!(g.tau, 0.5);
        g.halve_temperature();
        assert_eq!(g.tau, 0.25);
        let mut g = GateSet::<f32>::new(&arch, GateMode::Structured);
        for _ in 0..20 {
            g.halve_temperature();
        }
        assert_eq!(g.tau, 2f64.powi(-20));
    }

    #[test]
    fn harden_and_sparsity() {
        let arch = Architecture::mlp_default(1, 2, 2, 5, 2);
        let mut g = GateSet::<f64>::new(&arch, GateMode::Structured);
        assert!(g.harden().iter().flatten().all(|b| *b));
        assert_eq!(g.sparsity(), 0.0);
        for t in &mut g.m {
            t.data.fill(-1.0);
        }
        assert!(g.harden().iter().flatten().all(|b| !*b));
        assert_eq!(g.sparsity(), 1.0);
        assert_abs_diff_eq!(g.param_sparsity(&arch), 1.0, epsilon = 1e-12);
        g.m[0].data = vec![1.0, -1.0, 0.0, -0.5, 2.0];
        assert_eq!(g.harden()[0], vec![true, false, true, false, true]);
        let mut u = GateSet::<f64>::new(&Architecture::mlp_default(1, 10, 10, 7, 2), GateMode::Unstructured);
        let flat: usize = u.len();
        let mut left = flat * 46 / 100;
        for t in &mut u.m {
            for v in &mut t.data {
                if left > 0 {
                    *v = -1.0;
                    left -= 1;
                }
            }
        }
        assert_abs_diff_eq!(u.sparsity(), (flat * 46 / 100) as f64 / flat as f64, epsilon = 1e-15);
    }

    #[test]
    fn structured_param_sparsity_counts_fan_in() {
        // 4 inputs → 2 units → 1 unit bottleneck.
        let arch = Architecture {
            input: vec![4],
            layers: vec![
                crate::nn::LayerSpec::Dense { in_dim: 4, out_dim: 2 },
                crate::nn::LayerSpec::Dense { in_dim: 2, out_dim: 1 },
                crate::nn::LayerSpec::Dense { in_dim: 1, out_dim: 2 },
            ],
            bottleneck: 2,
        };
        let mut g = GateSet::<f64>::new(&arch, GateMode::Structured);
        g.m[0].data[1] = -0.1;
        // one closed unit: 4 weights + 1 bias out of 4*2+2 + 2+1 = 13
        assert_abs_diff_eq!(g.param_sparsity(&arch), 5.0 / 13.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g.sparsity(), 1.0 / 3.0, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn open_gates_are_exact(w in -1e6f64..1e6, m in 0.0f64..100.0, k in 0i32..30) {
            let tau = 2f64.powi(-k);
            prop_assert_eq!(masked_weight(w, m, tau).unwrap().to_bits(), w.to_bits());
        }

        #[test]
        fn factor_monotone_and_bounded(a in -50.0f64..50.0, b in -50.0f64..50.0, k in 0i32..20) {
            let tau = 2f64.powi(-k);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (fl, fh) = (gate_factor(lo, tau), gate_factor(hi, tau));
            prop_assert!(fl <= fh);
            prop_assert!((0.0..=1.0).contains(&fl));
        }

        #[test]
        fn cold_gates_match_hard(m in prop_oneof![-10.0f64..-0.01, 0.01f64..10.0], z in -100.0f64..100.0) {
            let tau = 2f64.powi(-20);
            let soft = masked_activation(z, m, tau).unwrap();
            let hard = if m >= 0.0 { z } else { 0.0 };
            prop_assert!((soft - hard).abs() <= 1e-6);
        }
    }

    #[test]
    fn continuous_at_zero() {
        for tau in [1.0, 0.1, 1e-4] {
            assert_eq!(gate_factor(0.0, tau), 1.0);
            assert_abs_diff_eq!(gate_factor(-1e-12, tau), 1.0, epsilon = 1e-6);
        }
    }
}
