//! The generic CAM combiner and its mean-squared-error geometry.
//!
//! Given a complete-case estimate `θ̂₀` and, for each adjustment pattern, a pair
//! `(θ̂_{0,m}, θ̂_m)` computed on disjoint row sets, the combined estimate is
//! `θ̂₀ − γᵀ(θ̂_{0,M} − θ̂_M)`. With `Ω = Cov(θ̂₀, θ̂_{0,M})`,
//! `Λ = Var(θ̂_{0,M} − θ̂_M)`, `B = E(θ̂_{0,M} − θ̂_M)` and `b₀` the bias of `θ̂₀`,
//! the change in MSE is exactly
//! `γᵀ(Λ + BBᵀ)γ − 2γᵀ(Ω + b₀B)`, minimised at `γ* = Λ⁻¹Ω` when `B = 0`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CamError, Result};
use crate::linalg::symmetric_pinv;

/// Complete-case estimate plus the adjustment statistics, in adjustment-set order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamComponents {
    pub theta0: f64,
    pub theta0_m: Vec<f64>,
    pub theta_m: Vec<f64>,
}

impl CamComponents {
    pub fn new(theta0: f64, theta0_m: Vec<f64>, theta_m: Vec<f64>) -> Result<Self> {
        if theta0_m.len() != theta_m.len() {
            return Err(CamError::DimensionMismatch {
                expected: theta0_m.len(),
                got: theta_m.len(),
            });
        }
        Ok(CamComponents {
            theta0,
            theta0_m,
            theta_m,
        })
    }

    pub fn len(&self) -> usize {
        self.theta0_m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta0_m.is_empty()
    }

    /// `θ̂_{0,M} − θ̂_M`.
    pub fn differences(&self) -> Vec<f64> {
        self.theta0_m
            .iter()
            .zip(&self.theta_m)
            .map(|(a, b)| a - b)
            .collect()
    }
}

/// `θ̂₀ − γᵀ(θ̂_{0,M} − θ̂_M)`.
pub fn combine(c: &CamComponents, gamma: &[f64]) -> Result<f64> {
    if gamma.len() != c.len() || c.theta_m.len() != c.len() {
        return Err(CamError::DimensionMismatch {
            expected: c.len(),
            got: gamma.len(),
        });
    }
    let adjust: f64 = gamma
        .iter()
        .zip(c.theta0_m.iter().zip(&c.theta_m))
        .map(|(g, (a, b))| g * (a - b))
        .sum();
    if adjust == 0.0 {
        // keeps combine(c, 0) == theta0 bit-for-bit, including signed zero
        return Ok(c.theta0);
    }
    Ok(c.theta0 - adjust)
}

/// `(Ω, Λ, B, b₀)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MseGeometry {
    pub omega: Vec<f64>,
    pub lambda: Vec<Vec<f64>>,
    pub bias_b: Vec<f64>,
    pub bias0: f64,
}

impl MseGeometry {
    /// Unbiased geometry (`B = 0`, `b₀ = 0`).
    pub fn new(omega: Vec<f64>, lambda: Vec<Vec<f64>>) -> Result<Self> {
        let k = omega.len();
        Self::with_bias(omega, lambda, vec![0.0; k], 0.0)
    }

    pub fn with_bias(
        omega: Vec<f64>,
        lambda: Vec<Vec<f64>>,
        bias_b: Vec<f64>,
        bias0: f64,
    ) -> Result<Self> {
        let k = omega.len();
        let bad = lambda.len() != k || lambda.iter().any(|r| r.len() != k);
        if bad || bias_b.len() != k {
            return Err(CamError::DimensionMismatch {
                expected: k,
                got: if bad { lambda.len() } else { bias_b.len() },
            });
        }
        Ok(MseGeometry {
            omega,
            lambda,
            bias_b,
            bias0,
        })
    }

    pub fn dim(&self) -> usize {
        self.omega.len()
    }

    fn lambda_matrix(&self) -> DMatrix<f64> {
        let k = self.dim();
        DMatrix::from_fn(k, k, |i, j| self.lambda[i][j])
    }
}

/// Exact `MSE(θ̂_γ) − MSE(θ̂₀)`.
pub fn mse_difference(gamma: &[f64], g: &MseGeometry) -> Result<f64> {
    let k = g.dim();
    if gamma.len() != k {
        return Err(CamError::DimensionMismatch {
            expected: k,
            got: gamma.len(),
        });
    }
    let mut quad = 0.0;
    for i in 0..k {
        for j in 0..k {
            quad += gamma[i] * (g.lambda[i][j] + g.bias_b[i] * g.bias_b[j]) * gamma[j];
        }
    }
    let lin: f64 = (0..k)
        .map(|i| gamma[i] * (g.omega[i] + g.bias0 * g.bias_b[i]))
        .sum();
    Ok(quad - 2.0 * lin)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimalGamma {
    pub gamma: Vec<f64>,
    /// `ΩᵀΛ⁺Ω`, the MSE reduction at `gamma`.
    pub reduction: f64,
    pub rank: usize,
    /// `Λ` had an eigenvalue below `−1e−10 × max|λ|`.
    pub indefinite: bool,
}

/// `γ* = Λ⁺Ω` for an unbiased geometry.
///
/// `Λ` is symmetrised first; eigenvalues below `1e−10` times the largest are
/// treated as zero.
pub fn optimal_gamma(g: &MseGeometry) -> Result<OptimalGamma> {
    if g.bias_b.iter().any(|&b| b != 0.0) {
        return Err(CamError::NonZeroBias);
    }
    let k = g.dim();
    let p = symmetric_pinv(&g.lambda_matrix());
    let omega = DVector::from_column_slice(&g.omega);
    let gamma = &p.pinv * &omega;
    let reduction = if k == 0 { 0.0 } else { omega.dot(&gamma) };
    Ok(OptimalGamma {
        gamma: gamma.iter().copied().collect(),
        reduction,
        rank: p.rank,
        indefinite: p.indefinite,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_gamma_returns_theta0() {
        let c = CamComponents::new(1.25, vec![0.3, -2.0], vec![7.0, 1.0]).unwrap();
        assert_eq!(combine(&c, &[0.0, 0.0]).unwrap().to_bits(), 1.25f64.to_bits());
    }

    #[test]
    fn combine_examples() {
        let c = CamComponents::new(1.0, vec![2.0], vec![2.0]).unwrap();
        assert_eq!(combine(&c, &[5.0]).unwrap(), 1.0);
        let c = CamComponents::new(1.0, vec![0.4], vec![0.1]).unwrap();
        assert!((combine(&c, &[0.5]).unwrap() - 0.85).abs() < 1e-15);
        assert!(combine(&c, &[0.5, 0.1]).is_err());
    }

    #[test]
    fn mse_difference_examples() {
        let g = MseGeometry::new(vec![1.0], vec![vec![2.0]]).unwrap();
        assert_eq!(mse_difference(&[0.0], &g).unwrap(), 0.0);
        // brute-force grid minimum of 2γ² − 2γ sits at 0.5 with value −0.5
        let (best_gamma, best) = (0..=2000)
            .map(|i| -1.0 + i as f64 * 0.001)
            .map(|t| (t, 2.0 * t * t - 2.0 * t))
            .fold((0.0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
        assert!((best_gamma - 0.5).abs() < 1e-9);
        assert!((mse_difference(&[0.5], &g).unwrap() - best).abs() < 1e-12);

        let g = MseGeometry::with_bias(
            vec![0.0, 0.0],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![1.0, 1.0],
            0.0,
        )
        .unwrap();
        assert_eq!(mse_difference(&[1.0, 0.0], &g).unwrap(), 2.0);
    }

    #[test]
    fn optimal_gamma_examples() {
        let g = MseGeometry::new(vec![1.0], vec![vec![2.0]]).unwrap();
        let o = optimal_gamma(&g).unwrap();
        assert!((o.gamma[0] - 0.5).abs() < 1e-15);
        assert!((o.reduction - 0.5).abs() < 1e-15);

        let g = MseGeometry::new(vec![0.0, 0.0], vec![vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap();
        let o = optimal_gamma(&g).unwrap();
        assert_eq!(o.gamma, vec![0.0, 0.0]);
        assert_eq!(o.reduction, 0.0);

        let g = MseGeometry::new(vec![1.0, 0.0], vec![vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let o = optimal_gamma(&g).unwrap();
        assert!((o.gamma[0] - 1.0).abs() < 1e-15);
        assert_eq!(o.gamma[1], 0.0);
        assert!((o.reduction - 1.0).abs() < 1e-15);
        assert_eq!(o.rank, 1);
    }

    #[test]
    fn optimal_gamma_refuses_bias() {
        let g = MseGeometry::with_bias(vec![1.0], vec![vec![1.0]], vec![0.1], 0.0).unwrap();
        assert_eq!(optimal_gamma(&g).unwrap_err(), CamError::NonZeroBias);
    }

    #[test]
    fn optimal_gamma_flags_indefinite_lambda() {
        let g = MseGeometry::new(vec![1.0, 1.0], vec![vec![1.0, 0.0], vec![0.0, -0.5]]).unwrap();
        assert!(optimal_gamma(&g).unwrap().indefinite);
    }

    /// Exhaustive oracle: two missing patterns, discrete atoms, and
    /// pattern-specific distributions so that `B ≠ 0`.
    #[test]
    fn mse_formula_matches_exhaustive_enumeration() {
        // atoms (x, y) with probabilities; complete rows draw from p, incomplete from q
        let atoms = [(0.0, 0.5), (1.0, 1.5), (2.0, 1.0), (3.0, 3.5)];
        let p = [0.1, 0.4, 0.3, 0.2];
        let q = [0.3, 0.2, 0.2, 0.3];
        let theta = 1.3;
        let phi = |y: f64| y * y - y;
        let (n0, n1, n2) = (2usize, 2usize, 1usize);
        let n = n0 + n1 + n2;
        let total = atoms.len().pow(n as u32);
        let gammas = [[0.3, -0.2], [1.0, 0.5], [-0.7, 2.0]];
        let mut acc = Moments::default();
        let mut mse = [0.0; 3];
        let mut mse0 = 0.0;
        for code in 0..total {
            let mut c = code;
            let mut idx = Vec::with_capacity(n);
            for _ in 0..n {
                idx.push(c % atoms.len());
                c /= atoms.len();
            }
            let prob: f64 = idx
                .iter()
                .enumerate()
                .map(|(k, &a)| if k < n0 { p[a] } else { q[a] })
                .product();
            let mean = |rows: &[usize], f: &dyn Fn(usize) -> f64| {
                rows.iter().map(|&a| f(a)).sum::<f64>() / rows.len() as f64
            };
            let t0 = mean(&idx[..n0], &|a| atoms[a].0);
            let t01 = mean(&idx[..n0], &|a| phi(atoms[a].1));
            let t02 = mean(&idx[..n0], &|a| atoms[a].1);
            let t1 = mean(&idx[n0..n0 + n1], &|a| phi(atoms[a].1));
            let t2 = mean(&idx[n0 + n1..], &|a| atoms[a].1);
            acc.add(prob, t0, [t01 - t1, t02 - t2], [t01, t02]);
            let comp = CamComponents::new(t0, vec![t01, t02], vec![t1, t2]).unwrap();
            for (k, g) in gammas.iter().enumerate() {
                mse[k] += prob * (combine(&comp, g).unwrap() - theta).powi(2);
            }
            mse0 += prob * (t0 - theta).powi(2);
        }
        let geom = acc.geometry(theta);
        for (k, g) in gammas.iter().enumerate() {
            let exact = mse[k] - mse0;
            let formula = mse_difference(g, &geom).unwrap();
            assert!((exact - formula).abs() < 1e-12, "{exact} vs {formula}");
        }
        assert!(geom.bias_b.iter().any(|b| b.abs() > 1e-3));
    }

    #[derive(Default)]
    struct Moments {
        e0: f64,
        e00: f64,
        ed: [f64; 2],
        edd: [[f64; 2]; 2],
        e0a: [f64; 2],
        ea: [f64; 2],
    }

    impl Moments {
        fn add(&mut self, p: f64, t0: f64, d: [f64; 2], a: [f64; 2]) {
            self.e0 += p * t0;
            self.e00 += p * t0 * t0;
            for i in 0..2 {
                self.ed[i] += p * d[i];
                self.e0a[i] += p * t0 * a[i];
                self.ea[i] += p * a[i];
                for j in 0..2 {
                    self.edd[i][j] += p * d[i] * d[j];
                }
            }
        }

        fn geometry(&self, theta: f64) -> MseGeometry {
            let omega = (0..2).map(|i| self.e0a[i] - self.e0 * self.ea[i]).collect();
            let lambda = (0..2)
                .map(|i| (0..2).map(|j| self.edd[i][j] - self.ed[i] * self.ed[j]).collect())
                .collect();
            MseGeometry::with_bias(omega, lambda, self.ed.to_vec(), self.e0 - theta).unwrap()
        }
    }

    fn psd_and_omega() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>, Vec<f64>)> {
        (1usize..=4).prop_flat_map(|k| {
            (
                prop::collection::vec(-2.0f64..2.0, k * k),
                prop::collection::vec(-2.0f64..2.0, k),
                prop::collection::vec(-3.0f64..3.0, k),
            )
                .prop_map(move |(a, omega, gamma)| {
                    // Λ = AAᵀ is PSD
                    let lambda = (0..k)
                        .map(|i| {
                            (0..k)
                                .map(|j| (0..k).map(|l| a[i * k + l] * a[j * k + l]).sum())
                                .collect()
                        })
                        .collect();
                    (lambda, omega, gamma)
                })
        })
    }

    proptest! {
        #[test]
        fn optimal_gamma_minimises((lambda, omega, gamma) in psd_and_omega()) {
            let g = MseGeometry::new(omega, lambda).unwrap();
            let o = optimal_gamma(&g).unwrap();
            let best = mse_difference(&o.gamma, &g).unwrap();
            let other = mse_difference(&gamma, &g).unwrap();
            let scale = 1.0 + best.abs() + other.abs();
            prop_assert!(best <= other + 1e-8 * scale);
        }

        #[test]
        fn mse_difference_is_quadratic_in_scale((lambda, omega, gamma) in psd_and_omega(), b0 in -1.0f64..1.0) {
            let k = omega.len();
            let g = MseGeometry::with_bias(omega, lambda, vec![0.25; k], b0).unwrap();
            let at = |t: f64| {
                let scaled: Vec<f64> = gamma.iter().map(|v| v * t).collect();
                mse_difference(&scaled, &g).unwrap()
            };
            let (f0, f1, f2) = (at(0.0), at(1.0), at(2.0));
            // fit f(t) = a t² + b t + c through t ∈ {0,1,2}
            let a = (f2 - 2.0 * f1 + f0) / 2.0;
            let b = f1 - f0 - a;
            prop_assert_eq!(f0, 0.0);
            let f3 = at(3.0);
            prop_assert!((f3 - (9.0 * a + 3.0 * b)).abs() <= 1e-9 * (1.0 + f3.abs()));
        }
    }
}
