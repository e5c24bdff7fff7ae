//! Model data in the eigenbasis of the linear operator.
//!
//! Mode indices are 1-based in every public API (`k = 1` is the slow,
//! neutral mode). Storage is 0-based internally.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::validation::ValidationReport;

/// Eigenvalues, noise amplitudes and linear growth parameter of the model
/// `dv = (-L v / eps^2 + nu v + B(v, v) / eps) dt + Q dW / eps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    eigenvalues: Vec<f64>,
    noise: Vec<f64>,
    nu: f64,
    alpha: f64,
    basis_scales: Vec<f64>,
}

impl ModelSpec {
    /// Builds a spec with unit basis scales and `alpha = 0`.
    ///
    /// Only the lengths are checked here; invariants are reported by
    /// [`validate_spec`].
    pub fn new(eigenvalues: Vec<f64>, noise: Vec<f64>, nu: f64) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::invalid("eigenvalues", "need at least one mode"));
        }
        if noise.len() != eigenvalues.len() {
            return Err(Error::LengthMismatch {
                expected: eigenvalues.len(),
                found: noise.len(),
            });
        }
        let n = eigenvalues.len();
        Ok(Self {
            eigenvalues,
            noise,
            nu,
            alpha: 0.0,
            basis_scales: vec![1.0; n],
        })
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_nu(mut self, nu: f64) -> Self {
        self.nu = nu;
        self
    }

    pub fn with_noise(mut self, noise: Vec<f64>) -> Result<Self> {
        if noise.len() != self.n() {
            return Err(Error::LengthMismatch {
                expected: self.n(),
                found: noise.len(),
            });
        }
        self.noise = noise;
        Ok(self)
    }

    pub fn with_basis_scales(mut self, scales: Vec<f64>) -> Result<Self> {
        if scales.len() != self.n() {
            return Err(Error::LengthMismatch {
                expected: self.n(),
                found: scales.len(),
            });
        }
        self.basis_scales = scales;
        Ok(self)
    }

    /// Truncation level N.
    pub fn n(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `lambda_k`, 1-based.
    pub fn lambda(&self, k: usize) -> f64 {
        self.eigenvalues[k - 1]
    }

    /// `q_k`, 1-based.
    pub fn q(&self, k: usize) -> f64 {
        self.noise[k - 1]
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn noise(&self) -> &[f64] {
        &self.noise
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn basis_scales(&self) -> &[f64] {
        &self.basis_scales
    }

    /// Modes `k >= 2` with nonzero noise amplitude, 1-based.
    pub fn forced_modes(&self) -> Vec<usize> {
        (2..=self.n()).filter(|&k| self.q(k) != 0.0).collect()
    }

    /// Partial sum `sum_{k>=2} q_k^2 lambda_k^(alpha-1)`.
    pub fn noise_trace(&self) -> f64 {
        (2..=self.n())
            .filter(|&k| self.lambda(k) > 0.0)
            .map(|k| self.q(k).powi(2) * self.lambda(k).powf(self.alpha - 1.0))
            .sum()
    }
}

/// Coefficients of a function in the eigenbasis. `coeffs[0]` multiplies `e_1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralField {
    coeffs: Vec<f64>,
}

impl SpectralField {
    pub fn zeros(n: usize) -> Self {
        Self {
            coeffs: vec![0.0; n],
        }
    }

    pub fn from_vec(coeffs: Vec<f64>) -> Self {
        Self { coeffs }
    }

    /// Unit vector `e_k`, 1-based.
    pub fn unit(n: usize, k: usize) -> Self {
        let mut f = Self::zeros(n);
        f.coeffs[k - 1] = 1.0;
        f
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Coefficient of `e_k`, 1-based.
    pub fn get(&self, k: usize) -> f64 {
        self.coeffs[k - 1]
    }

    pub fn set(&mut self, k: usize, value: f64) {
        self.coeffs[k - 1] = value;
    }

    /// Slow amplitude `X = <x, e_1>`.
    pub fn slow(&self) -> f64 {
        self.coeffs[0]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_finite())
    }

    pub fn ensure_len(&self, n: usize) -> Result<()> {
        if self.coeffs.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                found: self.coeffs.len(),
            });
        }
        Ok(())
    }
}

impl std::ops::Add for &SpectralField {
    type Output = SpectralField;

    fn add(self, rhs: &SpectralField) -> SpectralField {
        SpectralField::from_vec(
            self.coeffs
                .iter()
                .zip(&rhs.coeffs)
                .map(|(a, b)| a + b)
                .collect(),
        )
    }
}

impl std::ops::Sub for &SpectralField {
    type Output = SpectralField;

    fn sub(self, rhs: &SpectralField) -> SpectralField {
        SpectralField::from_vec(
            self.coeffs
                .iter()
                .zip(&rhs.coeffs)
                .map(|(a, b)| a - b)
                .collect(),
        )
    }
}

/// Diagonal of the stationary covariance of the fast OU modes,
/// `q_k^2 / (2 lambda_k)` for `k >= 2` and zero on the slow mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveCovariance {
    pub diag: Vec<f64>,
}

impl EffectiveCovariance {
    /// Entry `k`, 1-based.
    pub fn get(&self, k: usize) -> f64 {
        self.diag[k - 1]
    }
}

pub fn validate_spec(spec: &ModelSpec) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n = spec.n();
    if n < 2 {
        report.push(format!("N = {n} < 2: no fast modes"));
    }
    for (i, &l) in spec.eigenvalues.iter().enumerate() {
        if !l.is_finite() {
            report.push(format!("λ_{} is not finite", i + 1));
        }
    }
    if spec.lambda(1) != 0.0 {
        report.push(format!("λ_1 ≠ 0 (λ_1 = {})", spec.lambda(1)));
    }
    for k in 2..=n {
        let l = spec.lambda(k);
        if l == 0.0 {
            report.push(format!("λ_{k} = 0"));
        } else if l < 0.0 {
            report.push(format!("λ_{k} < 0 (λ_{k} = {l})"));
        }
        if l < spec.lambda(k - 1) {
            report.push(format!("λ_{k} < λ_{} (eigenvalues not ordered)", k - 1));
        }
    }
    if spec.q(1) != 0.0 {
        report.push(format!("q_1 ≠ 0 (q_1 = {})", spec.q(1)));
    }
    for k in 1..=n {
        let q = spec.q(k);
        if !q.is_finite() {
            report.push(format!("q_{k} is not finite"));
        } else if q < 0.0 {
            report.push(format!("q_{k} < 0 (q_{k} = {q})"));
        }
    }
    if !(0.0..2.0).contains(&spec.alpha) {
        report.push(format!("α = {} outside [0, 2)", spec.alpha));
    }
    if !spec.nu.is_finite() {
        report.push("ν is not finite");
    }
    for (i, &c) in spec.basis_scales.iter().enumerate() {
        if !(c > 0.0 && c.is_finite()) {
            report.push(format!("c_{} = {c} is not a positive scale", i + 1));
        }
    }
    report
        .diagnostics
        .insert("noise_trace_partial_sum".into(), spec.noise_trace());
    report
}

pub(crate) fn require_valid(spec: &ModelSpec) -> Result<()> {
    let report = validate_spec(spec);
    if report.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidSpec(report))
    }
}

/// `||f||_alpha = sqrt(sum_k (1 + lambda_k)^alpha f_k^2)`.
pub fn sobolev_norm(field: &SpectralField, spec: &ModelSpec, alpha: f64) -> Result<f64> {
    field.ensure_len(spec.n())?;
    Ok(weighted_norm(field.as_slice(), spec.eigenvalues(), alpha))
}

pub(crate) fn weighted_norm(coeffs: &[f64], eigenvalues: &[f64], alpha: f64) -> f64 {
    if alpha == 0.0 {
        return coeffs.iter().map(|c| c * c).sum::<f64>().sqrt();
    }
    coeffs
        .iter()
        .zip(eigenvalues)
        .map(|(c, l)| (1.0 + l).powf(alpha) * c * c)
        .sum::<f64>()
        .sqrt()
}

/// Precomputed `(1 + lambda_k)^alpha` weights for hot loops.
pub(crate) fn sobolev_weights(spec: &ModelSpec, alpha: f64) -> Vec<f64> {
    spec.eigenvalues()
        .iter()
        .map(|l| (1.0 + l).powf(alpha))
        .collect()
}

pub(crate) fn norm_with_weights(coeffs: &[f64], weights: &[f64]) -> f64 {
    coeffs
        .iter()
        .zip(weights)
        .map(|(c, w)| w * c * c)
        .sum::<f64>()
        .sqrt()
}

pub fn project_slow(field: &SpectralField) -> SpectralField {
    let mut out = SpectralField::zeros(field.len());
    if !field.is_empty() {
        out.coeffs[0] = field.coeffs[0];
    }
    out
}

pub fn project_fast(field: &SpectralField) -> SpectralField {
    let mut out = field.clone();
    if !out.is_empty() {
        out.coeffs[0] = 0.0;
    }
    out
}

pub fn effective_covariance(spec: &ModelSpec) -> Result<EffectiveCovariance> {
    require_valid(spec)?;
    let mut diag = vec![0.0; spec.n()];
    for k in 2..=spec.n() {
        diag[k - 1] = spec.q(k).powi(2) / (2.0 * spec.lambda(k));
    }
    Ok(EffectiveCovariance { diag })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(l: &[f64], q: &[f64]) -> ModelSpec {
        ModelSpec::new(l.to_vec(), q.to_vec(), 0.0).unwrap()
    }

    #[test]
    fn burgers_like_spec_is_valid() {
        assert!(validate_spec(&spec(&[0.0, 3.0, 8.0], &[0.0, 1.0, 1.0])).is_empty());
    }

    #[test]
    fn noise_on_slow_mode_is_reported() {
        let r = validate_spec(&spec(&[0.0, 3.0, 8.0], &[0.5, 1.0, 1.0]));
        assert!(r.contains("q_1 ≠ 0"), "{r}");
    }

    #[test]
    fn degenerate_kernel_is_reported() {
        let r = validate_spec(&spec(&[0.0, 0.0, 8.0], &[0.0, 1.0, 1.0]));
        assert!(r.contains("λ_2 = 0"), "{r}");
    }

    #[test]
    fn validator_reports_noise_trace() {
        let r = validate_spec(&spec(&[0.0, 3.0, 8.0], &[0.0, 1.0, 2.0]));
        let t = r.diagnostics["noise_trace_partial_sum"];
        assert!((t - (1.0 / 3.0 + 4.0 / 8.0)).abs() < 1e-15);
    }

    #[test]
    fn sobolev_norm_examples() {
        let s = spec(&[0.0, 3.0, 8.0], &[0.0; 3]);
        let f = SpectralField::from_vec(vec![3.0, 4.0, 0.0]);
        assert_eq!(sobolev_norm(&f, &s, 0.0).unwrap(), 5.0);

        let s2 = spec(&[0.0, 3.0], &[0.0; 2]);
        let g = SpectralField::from_vec(vec![1.0, 1.0]);
        assert!((sobolev_norm(&g, &s2, 1.0).unwrap() - 5f64.sqrt()).abs() < 1e-15);
        assert_eq!(
            sobolev_norm(&SpectralField::zeros(2), &s2, 1.0).unwrap(),
            0.0
        );
    }

    #[test]
    fn sobolev_norm_rejects_length_mismatch() {
        let s = spec(&[0.0, 3.0], &[0.0; 2]);
        let err = sobolev_norm(&SpectralField::zeros(3), &s, 0.0).unwrap_err();
        assert!(matches!(
            err,
            Error::LengthMismatch {
                expected: 2,
                found: 3
            }
        ));
    }

    #[test]
    fn projections_split_slow_and_fast() {
        let f = SpectralField::from_vec(vec![2.0, 5.0, 7.0]);
        assert_eq!(project_slow(&f).as_slice(), &[2.0, 0.0, 0.0]);
        assert_eq!(project_fast(&f).as_slice(), &[0.0, 5.0, 7.0]);
    }

    #[test]
    fn effective_covariance_examples() {
        let sigma = 1.7_f64;
        let c = effective_covariance(&spec(&[0.0, 3.0, 8.0], &[0.0, sigma, 0.0])).unwrap();
        assert_eq!(c.diag[0], 0.0);
        assert!((c.get(2) - sigma * sigma / 6.0).abs() < 1e-15);
        assert_eq!(c.get(3), 0.0);

        let zero = effective_covariance(&spec(&[0.0, 3.0, 8.0], &[0.0; 3])).unwrap();
        assert!(zero.diag.iter().all(|&d| d == 0.0));

        let c = effective_covariance(&spec(&[0.0, 3.0, 8.0], &[0.0, 1.0, 1.0])).unwrap();
        assert_eq!(c.diag, vec![0.0, 1.0 / 6.0, 1.0 / 16.0]);
    }

    #[test]
    fn effective_covariance_requires_valid_spec() {
        let err = effective_covariance(&spec(&[0.0, 3.0], &[1.0, 1.0])).unwrap_err();
        assert!(matches!(err, Error::InvalidSpec(_)));
    }

    proptest! {
        #[test]
        fn projections_recompose(coeffs in prop::collection::vec(-1e3f64..1e3, 1..20)) {
            let f = SpectralField::from_vec(coeffs);
            let slow = project_slow(&f);
            let fast = project_fast(&f);
            prop_assert_eq!(&(&slow + &fast), &f);
            prop_assert_eq!(&project_slow(&slow), &slow);
            prop_assert_eq!(&project_fast(&fast), &fast);
            prop_assert!(project_slow(&fast).as_slice().iter().all(|&c| c == 0.0));
        }

        #[test]
        fn alpha_zero_norm_is_euclidean(coeffs in prop::collection::vec(-1e3f64..1e3, 2..20)) {
            let n = coeffs.len();
            let l: Vec<f64> = (1..=n).map(|k| (k * k - 1) as f64).collect();
            let s = ModelSpec::new(l, vec![0.0; n], 0.0).unwrap();
            let f = SpectralField::from_vec(coeffs.clone());
            let euclid = coeffs.iter().map(|c| c * c).sum::<f64>().sqrt();
            prop_assert_eq!(sobolev_norm(&f, &s, 0.0).unwrap(), euclid);
        }

        #[test]
        fn covariance_follows_noise_rescaling(
            q in prop::collection::vec(0.0f64..3.0, 4),
            c in prop::collection::vec(0.1f64..4.0, 4),
        ) {
            let mut q = q;
            q[0] = 0.0;
            let l = vec![0.0, 3.0, 8.0, 15.0];
            let base = ModelSpec::new(l.clone(), q.clone(), 0.0).unwrap();
            let scaled_q: Vec<f64> = q.iter().zip(&c).map(|(q, c)| q / c).collect();
            let scaled = ModelSpec::new(l.clone(), scaled_q.clone(), 0.0).unwrap();
            let back_q: Vec<f64> = scaled_q.iter().zip(&c).map(|(q, c)| q * c).collect();
            let back = ModelSpec::new(l.clone(), back_q, 0.0).unwrap();
            let d0 = effective_covariance(&base).unwrap();
            let d1 = effective_covariance(&scaled).unwrap();
            let d2 = effective_covariance(&back).unwrap();
            for k in 2..=4 {
                let want = (q[k - 1] / c[k - 1]).powi(2) / (2.0 * l[k - 1]);
                prop_assert!((d1.get(k) - want).abs() <= 1e-14 * want.max(1.0));
                prop_assert!((d2.get(k) - d0.get(k)).abs() <= 1e-14 * d0.get(k).max(1.0));
            }
        }
    }
}
