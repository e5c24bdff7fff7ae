//! Coefficients of the reduced amplitude equation
//! `da = (nu~ a - eta~ a^3) dt + sqrt(sigma_b + sigma_a a^2) dB` (Itô form).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{effective_covariance, require_valid, EffectiveCovariance, ModelSpec};
use crate::tensor::{require_assumption3, BilinearTensor};

/// Value of one truncated series together with its truncation diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesTerm {
    pub value: f64,
    /// Sum of the terms whose largest mode index equals N.
    pub last_shell: f64,
    /// Estimated magnitude of the omitted tail, from the decay of the last
    /// two shells. `None` when the shells do not decay.
    pub tail_estimate: Option<f64>,
}

impl SeriesTerm {
    fn from_shells(shells: &[f64]) -> Self {
        let value = shells.iter().rev().sum();
        let n = shells.len();
        let last = shells.last().copied().unwrap_or(0.0);
        let tail_estimate = if n < 2 {
            Some(0.0)
        } else {
            power_law_tail(shells[n - 2].abs(), last.abs(), n)
        };
        Self {
            value,
            last_shell: last,
            tail_estimate,
        }
    }
}

/// Tail of `sum_{K > N} s_K` assuming `s_K ~ C K^-p`, with `p` fitted to the
/// last two shells `prev = |s_{N-1}|`, `last = |s_N|`.
fn power_law_tail(prev: f64, last: f64, n: usize) -> Option<f64> {
    if last == 0.0 {
        return Some(0.0);
    }
    if prev <= last || n < 3 {
        return None;
    }
    let nf = n as f64;
    let p = (prev / last).ln() / (nf / (nf - 1.0)).ln();
    if p <= 1.0 {
        return None;
    }
    Some(last * nf / (p - 1.0))
}

/// Per-series breakdown of the coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientBreakdown {
    /// `sum 2 B_k11^2 q_k^2 / lambda_k^2`; equals `sigma_a / 2`.
    pub ito_correction: SeriesTerm,
    /// `sum B_k11 B_llk q_l^2 / (lambda_k lambda_l)`.
    pub mean_flow: SeriesTerm,
    /// `sum 2 B_kl1 B_k1l q_k^2 / ((lambda_k + lambda_l) lambda_k)`.
    pub fast_interaction: SeriesTerm,
    pub eta: SeriesTerm,
    pub sigma_a: SeriesTerm,
    pub sigma_b: SeriesTerm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeCoefficients {
    /// Linear parameter of the full model.
    pub nu: f64,
    pub nu_tilde: f64,
    pub eta_tilde: f64,
    pub sigma_a: f64,
    pub sigma_b: f64,
    pub breakdown: Option<CoefficientBreakdown>,
}

impl AmplitudeCoefficients {
    /// Coefficients given directly, without a series breakdown.
    pub fn new(nu_tilde: f64, eta_tilde: f64, sigma_a: f64, sigma_b: f64) -> Self {
        Self {
            nu: nu_tilde,
            nu_tilde,
            eta_tilde,
            sigma_a,
            sigma_b,
            breakdown: None,
        }
    }

    /// Drops the cubic term (linearization at `a = 0`).
    pub fn linearized(&self) -> Self {
        Self {
            eta_tilde: 0.0,
            ..*self
        }
    }

    pub fn drift(&self, a: f64) -> f64 {
        self.nu_tilde * a - self.eta_tilde * a * a * a
    }

    pub fn diffusion(&self, a: f64) -> f64 {
        (self.sigma_b + self.sigma_a * a * a).sqrt()
    }

    pub fn stratonovich(&self) -> StratonovichCoefficients {
        to_stratonovich(self)
    }
}

/// Same equation written with a Stratonovich integral.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StratonovichCoefficients {
    pub nu_strat: f64,
    pub eta_tilde: f64,
    pub sigma_a: f64,
    pub sigma_b: f64,
}

pub fn compute_coefficients(
    spec: &ModelSpec,
    tensor: &BilinearTensor,
) -> Result<AmplitudeCoefficients> {
    require_valid(spec)?;
    require_assumption3(tensor)?;
    if tensor.n() != spec.n() {
        return Err(Error::LengthMismatch {
            expected: spec.n(),
            found: tensor.n(),
        });
    }
    let n = spec.n();
    let lam = |k: usize| spec.lambda(k);
    let q2 = |k: usize| spec.q(k).powi(2);
    let b = |k, l, m| tensor.get(k, l, m);

    // Shell index = largest mode index in the term, 2..=N.
    let shells = || vec![0.0; n - 1];
    let mut ito = shells();
    let mut mean_flow = shells();
    let mut cross = shells();
    let mut eta = shells();
    let mut sa = shells();
    let mut sb = shells();

    for k in 2..=n {
        let bk11 = b(k, 1, 1);
        ito[k - 2] += 2.0 * bk11 * bk11 * q2(k) / (lam(k) * lam(k));
        sa[k - 2] += 4.0 * bk11 * bk11 * q2(k) / (lam(k) * lam(k));
        eta[k - 2] -= 2.0 * bk11 * b(1, 1, k) / lam(k);
        for l in 2..=n {
            let shell = k.max(l) - 2;
            if bk11 != 0.0 {
                mean_flow[shell] += bk11 * b(l, l, k) * q2(l) / (lam(k) * lam(l));
            }
            let bkl1 = b(k, l, 1);
            if bkl1 != 0.0 {
                cross[shell] += 2.0 * bkl1 * b(k, 1, l) / (lam(k) + lam(l)) * q2(k) / lam(k);
                let s = lam(k) + lam(l);
                sb[shell] += 2.0 * bkl1 * bkl1 * q2(k) * q2(l) / (s * s * lam(k));
            }
        }
    }

    let breakdown = CoefficientBreakdown {
        ito_correction: SeriesTerm::from_shells(&ito),
        mean_flow: SeriesTerm::from_shells(&mean_flow),
        fast_interaction: SeriesTerm::from_shells(&cross),
        eta: SeriesTerm::from_shells(&eta),
        sigma_a: SeriesTerm::from_shells(&sa),
        sigma_b: SeriesTerm::from_shells(&sb),
    };
    Ok(AmplitudeCoefficients {
        nu: spec.nu(),
        nu_tilde: spec.nu()
            + breakdown.ito_correction.value
            + breakdown.mean_flow.value
            + breakdown.fast_interaction.value,
        eta_tilde: breakdown.eta.value,
        sigma_a: breakdown.sigma_a.value,
        sigma_b: breakdown.sigma_b.value,
        breakdown: Some(breakdown),
    })
}

/// Sparse entry `Gamma_{row, col}`, 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaEntry {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// The vector `gamma` and operator `Gamma` through which the fast noise
/// reaches the slow mode:
/// `<y, gamma> = 2 <e_1, B(e_1, L^-1 Q y)>`,
/// `<y, Gamma z> = <e_1, B (I (x)_s L)^-1 (z (x) Q y)>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseInteraction {
    /// `gamma_k` at index `k - 1`; `gamma_1 = 0`.
    pub gamma: Vec<f64>,
    /// Nonzero entries `Gamma_{mk} = 2 q_m B_{km1} / (lambda_k + lambda_m)`.
    pub gamma_op: Vec<GammaEntry>,
    n: usize,
}

impl NoiseInteraction {
    pub fn n(&self) -> usize {
        self.n
    }

    /// `||gamma||^2`.
    pub fn sigma_a(&self) -> f64 {
        self.gamma.iter().map(|g| g * g).sum()
    }

    /// `tr(Gamma Qhat Gamma^*)`.
    pub fn sigma_b(&self, qhat: &EffectiveCovariance) -> f64 {
        self.gamma_op
            .iter()
            .map(|e| e.value * e.value * qhat.get(e.col))
            .sum()
    }

    /// `<gamma, x>` for a full-length coefficient slice.
    pub fn gamma_dot(&self, x: &[f64]) -> f64 {
        self.gamma.iter().zip(x).map(|(g, x)| g * x).sum()
    }

    /// `out = Gamma z`.
    pub fn apply_gamma_op(&self, z: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for e in &self.gamma_op {
            out[e.row - 1] += e.value * z[e.col - 1];
        }
    }

    pub fn is_zero(&self) -> bool {
        self.gamma.iter().all(|&g| g == 0.0) && self.gamma_op.is_empty()
    }
}

pub fn noise_interaction(spec: &ModelSpec, tensor: &BilinearTensor) -> Result<NoiseInteraction> {
    require_valid(spec)?;
    require_assumption3(tensor)?;
    if tensor.n() != spec.n() {
        return Err(Error::LengthMismatch {
            expected: spec.n(),
            found: tensor.n(),
        });
    }
    let n = spec.n();
    let mut gamma = vec![0.0; n];
    for k in 2..=n {
        gamma[k - 1] = 2.0 * tensor.get(k, 1, 1) * spec.q(k) / spec.lambda(k);
    }
    let mut gamma_op = Vec::new();
    for row in 2..=n {
        let qm = spec.q(row);
        if qm == 0.0 {
            continue;
        }
        for col in 2..=n {
            let bkm1 = tensor.get(col, row, 1);
            if bkm1 != 0.0 {
                gamma_op.push(GammaEntry {
                    row,
                    col,
                    value: 2.0 * qm * bkm1 / (spec.lambda(col) + spec.lambda(row)),
                });
            }
        }
    }
    Ok(NoiseInteraction { gamma, gamma_op, n })
}

/// Diffusion `g(a) = sqrt(sigma_b + sigma_a a^2)` has `g g'/2 = sigma_a a / 2`,
/// so the Stratonovich linear drift is `nu~ - sigma_a / 2`.
pub fn to_stratonovich(c: &AmplitudeCoefficients) -> StratonovichCoefficients {
    StratonovichCoefficients {
        nu_strat: c.nu_tilde - 0.5 * c.sigma_a,
        eta_tilde: c.eta_tilde,
        sigma_a: c.sigma_a,
        sigma_b: c.sigma_b,
    }
}

pub fn from_stratonovich(s: &StratonovichCoefficients) -> AmplitudeCoefficients {
    AmplitudeCoefficients::new(
        s.nu_strat + 0.5 * s.sigma_a,
        s.eta_tilde,
        s.sigma_a,
        s.sigma_b,
    )
}

/// Almost-sure growth rate of the linearization at zero, `nu~ - sigma_a/2`.
/// Only defined when the additive part vanishes.
pub fn lyapunov_exponent(c: &AmplitudeCoefficients) -> Result<f64> {
    if c.sigma_b != 0.0 {
        return Err(Error::NotApplicable(format!(
            "Lyapunov exponent needs sigma_b = 0, got {}",
            c.sigma_b
        )));
    }
    Ok(c.nu_tilde - 0.5 * c.sigma_a)
}

/// Effective covariance paired with the noise interaction, for callers that
/// need both.
pub fn interaction_with_covariance(
    spec: &ModelSpec,
    tensor: &BilinearTensor,
) -> Result<(NoiseInteraction, EffectiveCovariance)> {
    Ok((
        noise_interaction(spec, tensor)?,
        effective_covariance(spec)?,
    ))
}
