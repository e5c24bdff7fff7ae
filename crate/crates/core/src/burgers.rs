//! The modified stochastic Burgers equation
//! `du = ((d_xx + 1) u + u u_x + eps^2 nu u) dt + eps Q dW` on `[0, pi]`
//! with Dirichlet conditions, expanded in sine modes (`lambda_k = k^2 - 1`).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::ModelSpec;
use crate::tensor::{burgers_tensor, BilinearTensor};

/// How the forcing acts on the fast modes, stated in physical terms so the
/// same profile can be expressed in either basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseProfile {
    None,
    /// Forcing `sigma sin(index x) dw(t)` with a scalar Wiener process.
    SingleMode {
        index: usize,
        sigma: f64,
    },
    /// Space-time white noise of strength `sigma`, restricted to modes
    /// `k >= 2`: `q_k = sigma` in the orthonormal basis.
    White {
        sigma: f64,
    },
    /// Amplitudes `q_1..q_N` given directly in the working basis.
    Custom {
        q: Vec<f64>,
    },
}

/// `lambda_k = k^2 - 1`, `k = 1..=n`.
pub fn eigenvalues(n: usize) -> Vec<f64> {
    (1..=n).map(|k| (k * k - 1) as f64).collect()
}

/// Scale between the plain `sin(kx)` basis and the orthonormal one.
pub fn plain_basis_scale() -> f64 {
    (PI / 2.0).sqrt()
}

/// Noise amplitudes for `profile` in the chosen basis.
pub fn noise_amplitudes(n: usize, profile: &NoiseProfile, normalized: bool) -> Result<Vec<f64>> {
    let mut q = vec![0.0; n];
    let c = plain_basis_scale();
    match profile {
        NoiseProfile::None => {}
        NoiseProfile::SingleMode { index, sigma } => {
            if *index < 1 || *index > n {
                return Err(Error::invalid(
                    "noise.index",
                    format!("{index} outside 1..={n}"),
                ));
            }
            q[index - 1] = if normalized { sigma * c } else { *sigma };
        }
        NoiseProfile::White { sigma } => {
            for qk in q.iter_mut().skip(1) {
                *qk = if normalized { *sigma } else { sigma / c };
            }
        }
        NoiseProfile::Custom { q: given } => {
            if given.len() != n {
                return Err(Error::LengthMismatch {
                    expected: n,
                    found: given.len(),
                });
            }
            q.copy_from_slice(given);
        }
    }
    Ok(q)
}

/// Spec and tensor for the Burgers model on `n` modes.
pub fn model(
    n: usize,
    nu: f64,
    profile: NoiseProfile,
    normalized: bool,
) -> Result<(ModelSpec, BilinearTensor)> {
    let tensor = burgers_tensor(n, normalized)?;
    let q = noise_amplitudes(n, &profile, normalized)?;
    let scale = if normalized { 1.0 } else { plain_basis_scale() };
    let spec = ModelSpec::new(eigenvalues(n), q, nu)?.with_basis_scales(vec![scale; n])?;
    Ok((spec, tensor))
}

/// Partial sum with a rigorous bound on the omitted tail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundedSum {
    pub value: f64,
    pub tail_bound: f64,
}

/// The closed-form `c_b` series quoted for white noise,
/// `(1 / 2 pi^2) sum_{k>=2} 1 / ((2k^2 + 2k + 1)(k^2 - 1)(k^2 + 2k))`.
///
/// This does not agree with the direct double sum for `sigma_b`; compare
/// [`cb_adjacent_series`].
pub fn cb_closed_form(k_max: usize) -> BoundedSum {
    let value: f64 = (2..=k_max)
        .rev()
        .map(|k| {
            let k = k as f64;
            1.0 / ((2.0 * k * k + 2.0 * k + 1.0) * (k * k - 1.0) * (k * k + 2.0 * k))
        })
        .sum();
    // term_k <= 1 / (2 (k-1)^6)
    let kf = k_max as f64;
    let tail = 1.0 / (2.0 * kf.powi(6)) + 1.0 / (10.0 * kf.powi(5));
    let s = 1.0 / (2.0 * PI * PI);
    BoundedSum {
        value: s * value,
        tail_bound: s * tail,
    }
}

/// `sigma_b / sigma^4` for white noise, summed over the only nonzero
/// couplings `B_{k,k+-1,1} = -1/4` of the plain basis:
/// `(1 / 2 pi^2) sum_k [1/((lambda_k + lambda_{k+1})^2 lambda_k)
///                     + 1/((lambda_k + lambda_{k-1})^2 lambda_k)]`.
pub fn cb_adjacent_series(k_max: usize) -> BoundedSum {
    let value: f64 = (2..=k_max)
        .rev()
        .map(|k| {
            let kf = k as f64;
            let lam = kf * kf - 1.0;
            let up = 2.0 * kf * kf + 2.0 * kf - 1.0;
            let down = 2.0 * kf * kf - 2.0 * kf - 1.0;
            let mut t = 1.0 / (up * up * lam);
            if k >= 3 {
                t += 1.0 / (down * down * lam);
            }
            t
        })
        .sum();
    // term_k <= 4 / k^6 for k >= 3
    let kf = k_max as f64;
    let s = 1.0 / (2.0 * PI * PI);
    BoundedSum {
        value: s * value,
        tail_bound: s * 4.0 / (5.0 * kf.powi(5)),
    }
}

/// `(nu~ - nu) / sigma^2` for white noise from the same adjacent-mode
/// reduction: `1/(36 pi) - (1/(4 pi)) sum_k [1/(k-1) - 1/(k+2)] / (2k^2 + 2k - 1)`.
pub fn nu_shift_adjacent_series(k_max: usize) -> BoundedSum {
    let value: f64 = (2..=k_max)
        .rev()
        .map(|k| {
            let k = k as f64;
            (1.0 / (k - 1.0) - 1.0 / (k + 2.0)) / (2.0 * k * k + 2.0 * k - 1.0)
        })
        .sum();
    // term_k = 3 / ((k-1)(k+2)(2k^2+2k-1)) <= 3 / (2 (k-1)^4)
    let kf = k_max as f64;
    BoundedSum {
        value: 1.0 / (36.0 * PI) - value / (4.0 * PI),
        tail_bound: 3.0 / (2.0 * 3.0 * (kf - 1.0).powi(3)) / (4.0 * PI),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::compute_coefficients;
    use crate::spectral::validate_spec;

    #[test]
    fn burgers_spec_is_valid() {
        for normalized in [true, false] {
            let (spec, _) = model(8, 1.0, NoiseProfile::White { sigma: 1.0 }, normalized).unwrap();
            assert!(validate_spec(&spec).is_empty());
            assert_eq!(spec.eigenvalues()[..3], [0.0, 3.0, 8.0]);
        }
    }

    #[test]
    fn noise_profiles_in_both_bases() {
        let c = plain_basis_scale();
        let q = noise_amplitudes(
            4,
            &NoiseProfile::SingleMode {
                index: 2,
                sigma: 2.0,
            },
            true,
        )
        .unwrap();
        assert_eq!(q, vec![0.0, 2.0 * c, 0.0, 0.0]);
        let q = noise_amplitudes(
            4,
            &NoiseProfile::SingleMode {
                index: 2,
                sigma: 2.0,
            },
            false,
        )
        .unwrap();
        assert_eq!(q, vec![0.0, 2.0, 0.0, 0.0]);
        let q = noise_amplitudes(3, &NoiseProfile::White { sigma: 1.0 }, false).unwrap();
        assert_eq!(q, vec![0.0, 1.0 / c, 1.0 / c]);
        assert!(noise_amplitudes(
            3,
            &NoiseProfile::SingleMode {
                index: 4,
                sigma: 1.0
            },
            true
        )
        .is_err());
        assert!(noise_amplitudes(3, &NoiseProfile::Custom { q: vec![0.0; 2] }, true).is_err());
    }

    #[test]
    fn adjacent_series_matches_mode_sums() {
        let (spec, t) = model(200, 0.0, NoiseProfile::White { sigma: 1.0 }, false).unwrap();
        let c = compute_coefficients(&spec, &t).unwrap();
        let cb = cb_adjacent_series(199);
        // The truncated mode sum and the series differ only by boundary
        // terms at k = 200, of order 1e-15.
        assert!(
            (c.sigma_b - cb.value).abs() < 1e-13,
            "{} vs {}",
            c.sigma_b,
            cb.value
        );
        let nu = nu_shift_adjacent_series(199);
        assert!(
            (c.nu_tilde - nu.value).abs() < 1e-8,
            "{} vs {}",
            c.nu_tilde,
            nu.value
        );
    }

    #[test]
    fn closed_form_tail_bound_is_honest() {
        let coarse = cb_closed_form(50);
        let fine = cb_closed_form(5000);
        assert!((fine.value - coarse.value).abs() <= coarse.tail_bound);
        let coarse = cb_adjacent_series(50);
        let fine = cb_adjacent_series(5000);
        assert!((fine.value - coarse.value).abs() <= coarse.tail_bound);
        let coarse = nu_shift_adjacent_series(50);
        let fine = nu_shift_adjacent_series(5000);
        assert!((fine.value - coarse.value).abs() <= coarse.tail_bound);
    }
}
