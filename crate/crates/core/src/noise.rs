//! Random streams and exact Ornstein-Uhlenbeck sampling for the fast modes
//! `dz = -eps^-2 L z dt + eps^-1 Q dW`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{require_valid, ModelSpec, SpectralField};

/// Deterministic Gaussian stream keyed by `(seed, replica_id)`.
///
/// Each replica owns a distinct ChaCha stream of the same key, so replicas
/// never overlap and their order of execution does not matter.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    seed: u64,
    replica_id: u64,
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(seed: u64, replica_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(replica_id);
        Self {
            seed,
            replica_id,
            rng,
        }
    }

    /// Stream for an independent use of the same replica, e.g. the
    /// uncoupled side of a weak-error comparison.
    pub fn with_domain(seed: u64, domain: u64, replica_id: u64) -> Self {
        let mut s = NoiseStream::new(mix(seed, domain), replica_id);
        s.seed = seed;
        s
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn replica_id(&self) -> u64 {
        self.replica_id
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for x in out {
            *x = self.standard_normal();
        }
    }
}

// splitmix64 finalizer
fn mix(seed: u64, domain: u64) -> u64 {
    let mut z = seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OUState {
    pub t: f64,
    pub z: SpectralField,
    pub epsilon: f64,
}

/// `1 - exp(-x)` without cancellation.
pub(crate) fn one_minus_exp(x: f64) -> f64 {
    -(-x).exp_m1()
}

/// `x - (1 - e^{-x})`, accurate for small `x`.
fn excess(x: f64) -> f64 {
    if x < 1e-3 {
        x * x * (0.5 - x * (1.0 / 6.0 - x / 24.0))
    } else {
        x - one_minus_exp(x)
    }
}

fn check_eps(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid(
            "epsilon",
            format!("{epsilon} must be positive"),
        ));
    }
    Ok(())
}

fn check_step(h: f64) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid("h", format!("{h} must be positive")));
    }
    Ok(())
}

/// Precomputed exact transition of the fast OU modes over one step `h`.
///
/// With `a = lambda / eps^2` the noise part of a step is
/// `eps^-1 q J`, `J = int_0^h e^{-a(h-s)} dW(s)`. `J` is sampled jointly with
/// the Wiener increment `dW` so that coupled solvers can reuse `dW`.
#[derive(Debug, Clone)]
pub struct OuPropagator {
    h: f64,
    /// Modes with `q_k != 0`, 0-based.
    forced: Vec<usize>,
    decay: Vec<f64>,
    /// Regression of the noise integral on `dW` and the residual s.d.
    w_coef: Vec<f64>,
    resid_sd: Vec<f64>,
    /// Marginal s.d. of the noise integral.
    marginal_sd: Vec<f64>,
}

impl OuPropagator {
    pub fn new(spec: &ModelSpec, epsilon: f64, h: f64) -> Result<Self> {
        check_eps(epsilon)?;
        check_step(h)?;
        let n = spec.n();
        let eps2 = epsilon * epsilon;
        let mut decay = vec![1.0; n];
        let mut w_coef = vec![0.0; n];
        let mut resid_sd = vec![0.0; n];
        let mut marginal_sd = vec![0.0; n];
        let mut forced = Vec::new();
        for i in 0..n {
            let lam = spec.eigenvalues()[i];
            let q = spec.noise()[i];
            let a = lam / eps2;
            decay[i] = (-a * h).exp();
            if q == 0.0 {
                continue;
            }
            forced.push(i);
            // Var J, Cov(J, dW) / h
            let (var_j, beta) = if a * h < 1e-12 {
                (h, 1.0)
            } else {
                (
                    one_minus_exp(2.0 * a * h) / (2.0 * a),
                    one_minus_exp(a * h) / (a * h),
                )
            };
            let resid = (var_j - beta * beta * h).max(0.0);
            let s = q / epsilon;
            w_coef[i] = s * beta;
            resid_sd[i] = s * resid.sqrt();
            marginal_sd[i] = s * var_j.sqrt();
        }
        Ok(Self {
            h,
            forced,
            decay,
            w_coef,
            resid_sd,
            marginal_sd,
        })
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn decay(&self) -> &[f64] {
        &self.decay
    }

    pub fn forced(&self) -> &[usize] {
        &self.forced
    }

    /// Exact step `z <- e^{-a h} z + noise`. One normal per forced mode.
    pub fn step(&self, z: &mut [f64], stream: &mut NoiseStream) {
        for (zi, d) in z.iter_mut().zip(&self.decay) {
            *zi *= d;
        }
        for &i in &self.forced {
            z[i] += self.marginal_sd[i] * stream.standard_normal();
        }
    }

    /// Draws the noise integrals into `noise` and, for forced modes, the
    /// matching Wiener increments into `dw` (zero elsewhere). Two normals
    /// per forced mode, in mode order.
    pub fn draw_coupled(&self, stream: &mut NoiseStream, noise: &mut [f64], dw: &mut [f64]) {
        let sqrt_h = self.h.sqrt();
        noise.iter_mut().for_each(|x| *x = 0.0);
        dw.iter_mut().for_each(|x| *x = 0.0);
        for &i in &self.forced {
            let w = sqrt_h * stream.standard_normal();
            let r = stream.standard_normal();
            dw[i] = w;
            noise[i] = self.w_coef[i] * w + self.resid_sd[i] * r;
        }
    }
}

/// Independent draws from the stationary law `N(0, q_k^2 / (2 lambda_k))`.
pub fn ou_stationary_sample(
    spec: &ModelSpec,
    epsilon: f64,
    stream: &mut NoiseStream,
) -> Result<OUState> {
    require_valid(spec)?;
    check_eps(epsilon)?;
    let mut z = SpectralField::zeros(spec.n());
    fill_stationary(spec, z.as_mut_slice(), stream);
    Ok(OUState { t: 0.0, z, epsilon })
}

pub(crate) fn fill_stationary(spec: &ModelSpec, z: &mut [f64], stream: &mut NoiseStream) {
    for k in spec.forced_modes() {
        let var = spec.q(k).powi(2) / (2.0 * spec.lambda(k));
        z[k - 1] = var.sqrt() * stream.standard_normal();
    }
}

/// One exact step of length `h`.
pub fn ou_step(
    state: &OUState,
    h: f64,
    spec: &ModelSpec,
    stream: &mut NoiseStream,
) -> Result<OUState> {
    state.z.ensure_len(spec.n())?;
    let prop = OuPropagator::new(spec, state.epsilon, h)?;
    let mut z = state.z.clone();
    prop.step(z.as_mut_slice(), stream);
    z.set(1, 0.0);
    Ok(OUState {
        t: state.t + h,
        z,
        epsilon: state.epsilon,
    })
}

/// Mean and variance of `z_k(t + h)` given `z_k(t) = z0`.
pub fn ou_transition_moments(
    spec: &ModelSpec,
    k: usize,
    epsilon: f64,
    h: f64,
    z0: f64,
) -> Result<(f64, f64)> {
    check_eps(epsilon)?;
    check_step(h)?;
    if k < 2 || k > spec.n() {
        return Err(Error::invalid("k", format!("{k} outside 2..={}", spec.n())));
    }
    let lam = spec.lambda(k);
    let x = lam * h / (epsilon * epsilon);
    let var = spec.q(k).powi(2) * one_minus_exp(2.0 * x) / (2.0 * lam);
    Ok(((-x).exp() * z0, var))
}

/// `2 int_0^D int_0^r e^{-rho (r - u)} du dr`, i.e. the integral of
/// `e^{-rho |r - u|}` over `[0, D]^2`.
pub fn exp_kernel_square_integral(rho: f64, d: f64) -> f64 {
    if rho == 0.0 {
        return d * d;
    }
    2.0 * excess(rho * d) / (rho * rho)
}

/// Exact `E (int_s^t zhat_k dr)^2` for the stationary OU mode `k`.
pub fn integrated_ou_moment_oracle(
    spec: &ModelSpec,
    k: usize,
    epsilon: f64,
    s: f64,
    t: f64,
) -> Result<f64> {
    check_eps(epsilon)?;
    if k < 2 || k > spec.n() {
        return Err(Error::invalid("k", format!("{k} outside 2..={}", spec.n())));
    }
    if !(t >= s) {
        return Err(Error::invalid(
            "t",
            format!("need t >= s, got s = {s}, t = {t}"),
        ));
    }
    let lam = spec.lambda(k);
    let qhat = spec.q(k).powi(2) / (2.0 * lam);
    Ok(qhat * exp_kernel_square_integral(lam / (epsilon * epsilon), t - s))
}

/// Exact `E (int_0^D (P - E P) dr)^2` for the monomial `P = prod zhat_{modes}`
/// of stationary OU modes, via Wick pairings.
///
/// Every pairing of the `2p` factors at times `r` and `u` contributes
/// `prod Qhat * e^{-rho |r-u|}`, with `rho` the sum of the rates of the pairs
/// that cross between the two times. Pairings without crossings make up
/// `(E P)^2` and are dropped.
pub fn monomial_average_oracle(
    spec: &ModelSpec,
    modes: &[usize],
    epsilon: f64,
    d: f64,
) -> Result<f64> {
    check_eps(epsilon)?;
    if modes.is_empty() || modes.len() > 4 {
        return Err(Error::invalid("modes", "between 1 and 4 factors supported"));
    }
    for &k in modes {
        if k < 2 || k > spec.n() {
            return Err(Error::invalid(
                "modes",
                format!("{k} outside 2..={}", spec.n()),
            ));
        }
    }
    let eps2 = epsilon * epsilon;
    // (mode, side)
    let items: Vec<(usize, bool)> = modes
        .iter()
        .map(|&k| (k, false))
        .chain(modes.iter().map(|&k| (k, true)))
        .collect();
    let mut total = 0.0;
    let mut used = vec![false; items.len()];
    wick(
        &items,
        &mut used,
        1.0,
        0.0,
        false,
        &mut |w, rho| {
            total += w * exp_kernel_square_integral(rho, d);
        },
        spec,
        eps2,
    );
    Ok(total)
}

/// `E prod zhat_{modes}` at one time for the stationary OU modes.
pub fn monomial_mean(spec: &ModelSpec, modes: &[usize]) -> f64 {
    fn pair(spec: &ModelSpec, rest: &[usize]) -> f64 {
        let Some((&first, tail)) = rest.split_first() else {
            return 1.0;
        };
        let mut total = 0.0;
        for j in 0..tail.len() {
            if tail[j] != first {
                continue;
            }
            let mut others = tail.to_vec();
            others.remove(j);
            let qhat = spec.q(first).powi(2) / (2.0 * spec.lambda(first));
            total += qhat * pair(spec, &others);
        }
        total
    }
    pair(spec, modes)
}

#[allow(clippy::too_many_arguments)]
fn wick(
    items: &[(usize, bool)],
    used: &mut [bool],
    weight: f64,
    rho: f64,
    crossed: bool,
    emit: &mut dyn FnMut(f64, f64),
    spec: &ModelSpec,
    eps2: f64,
) {
    let Some(first) = used.iter().position(|u| !u) else {
        if crossed {
            emit(weight, rho);
        }
        return;
    };
    used[first] = true;
    for j in first + 1..items.len() {
        if used[j] || items[j].0 != items[first].0 {
            continue;
        }
        let k = items[first].0;
        let lam = spec.lambda(k);
        let qhat = spec.q(k).powi(2) / (2.0 * lam);
        let cross = items[j].1 != items[first].1;
        used[j] = true;
        wick(
            items,
            used,
            weight * qhat,
            if cross { rho + lam / eps2 } else { rho },
            crossed || cross,
            emit,
            spec,
            eps2,
        );
        used[j] = false;
    }
    used[first] = false;
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec2(q2: f64) -> ModelSpec {
        ModelSpec::new(vec![0.0, 3.0, 8.0], vec![0.0, q2, 0.0], 0.0).unwrap()
    }

    #[test]
    fn same_key_same_stream() {
        let mut a = NoiseStream::new(7, 3);
        let mut b = NoiseStream::new(7, 3);
        let mut c = NoiseStream::new(7, 4);
        let xs: Vec<f64> = (0..16).map(|_| a.standard_normal()).collect();
        let ys: Vec<f64> = (0..16).map(|_| b.standard_normal()).collect();
        let zs: Vec<f64> = (0..16).map(|_| c.standard_normal()).collect();
        assert_eq!(xs, ys);
        assert_ne!(xs, zs);
        let mut d = NoiseStream::with_domain(7, 1, 3);
        assert_ne!(d.standard_normal(), xs[0]);
    }

    #[test]
    fn stationary_variance() {
        for eps in [1.0, 0.1] {
            let spec = spec2(1.0);
            let mut s = NoiseStream::new(11, 0);
            let n = 100_000;
            let mut sum2 = 0.0;
            let mut sum4 = 0.0;
            for _ in 0..n {
                let z = ou_stationary_sample(&spec, eps, &mut s).unwrap().z;
                assert_eq!(z.get(1), 0.0);
                assert_eq!(z.get(3), 0.0);
                let x = z.get(2).powi(2);
                sum2 += x;
                sum4 += x * x;
            }
            let m = sum2 / n as f64;
            let se = ((sum4 / n as f64 - m * m) / n as f64).sqrt();
            assert!((m - 1.0 / 6.0).abs() < 3.0 * se, "{m} +- {se}");
        }
    }

    #[test]
    fn zero_noise_is_zero() {
        let spec = spec2(0.0);
        let z = ou_stationary_sample(&spec, 0.5, &mut NoiseStream::new(1, 0)).unwrap();
        assert!(z.z.as_slice().iter().all(|&x| x == 0.0));
        assert!(ou_stationary_sample(&spec, 0.0, &mut NoiseStream::new(1, 0)).is_err());
    }

    #[test]
    fn deterministic_decay() {
        let spec = spec2(0.0);
        let mut z = SpectralField::zeros(3);
        z.set(2, 1.0);
        let st = OUState {
            t: 0.0,
            z,
            epsilon: 1.0,
        };
        let next = ou_step(&st, 1.0, &spec, &mut NoiseStream::new(0, 0)).unwrap();
        assert_eq!(next.z.get(2), (-3.0f64).exp());
        assert!(ou_step(&st, 0.0, &spec, &mut NoiseStream::new(0, 0)).is_err());
    }

    #[test]
    fn semigroup_of_transition_moments() {
        let spec = spec2(1.3);
        let (eps, h, z0) = (0.3, 0.01, 0.7);
        let (m1, v1) = ou_transition_moments(&spec, 2, eps, h / 2.0, z0).unwrap();
        let (m2, v2) = ou_transition_moments(&spec, 2, eps, h / 2.0, m1).unwrap();
        let decay = (-3.0 * (h / 2.0) / (eps * eps)).exp();
        let (m, v) = ou_transition_moments(&spec, 2, eps, h, z0).unwrap();
        assert!((m2 - m).abs() < 1e-14);
        assert!((decay * decay * v1 + v2 - v).abs() < 1e-14);
    }

    #[test]
    fn coupled_draw_has_exact_marginals() {
        // Var(noise) and Cov(noise, dW) against closed forms, by simulation.
        let spec = spec2(1.0);
        let (eps, h) = (0.5, 0.05);
        let p = OuPropagator::new(&spec, eps, h).unwrap();
        let mut s = NoiseStream::new(3, 0);
        let (mut noise, mut dw) = (vec![0.0; 3], vec![0.0; 3]);
        let n = 200_000;
        let (mut sxx, mut sxw) = (0.0, 0.0);
        for _ in 0..n {
            p.draw_coupled(&mut s, &mut noise, &mut dw);
            sxx += noise[1] * noise[1];
            sxw += noise[1] * dw[1];
        }
        let a = 3.0 / (eps * eps);
        let var = (1.0 - (-2.0 * a * h).exp()) / (2.0 * a) / (eps * eps);
        let cov = (1.0 - (-a * h).exp()) / a / eps;
        let (vx, cxw) = (sxx / n as f64, sxw / n as f64);
        assert!(
            (vx - var).abs() < 4.0 * var * (2.0 / n as f64).sqrt(),
            "{vx} {var}"
        );
        assert!(
            (cxw - cov).abs() < 4.0 * (var * h / n as f64).sqrt(),
            "{cxw} {cov}"
        );
    }

    #[test]
    fn autocovariance_over_long_path() {
        let spec = spec2(1.0);
        let (eps, h) = (1.0, 0.1);
        let p = OuPropagator::new(&spec, eps, h).unwrap();
        let mut s = NoiseStream::new(5, 0);
        let mut z = ou_stationary_sample(&spec, eps, &mut s)
            .unwrap()
            .z
            .into_vec();
        let n = 200_000;
        let mut path = Vec::with_capacity(n);
        for _ in 0..n {
            path.push(z[1]);
            p.step(&mut z, &mut s);
        }
        let lag = 2;
        let est: f64 = path.windows(lag + 1).map(|w| w[0] * w[lag]).sum::<f64>() / (n - lag) as f64;
        let truth = (1.0 / 6.0) * (-3.0 * h * lag as f64).exp();
        // integrated autocorrelation of the product is a few steps
        let se = (1.0 / 6.0) * (10.0 / n as f64).sqrt();
        assert!((est - truth).abs() < 4.0 * se, "{est} {truth}");
    }

    #[test]
    fn moment_oracle_limits() {
        let spec = spec2(1.0);
        assert_eq!(
            integrated_ou_moment_oracle(&spec, 2, 0.1, 0.5, 0.5).unwrap(),
            0.0
        );
        assert_eq!(
            integrated_ou_moment_oracle(&spec2(0.0), 2, 0.1, 0.0, 1.0).unwrap(),
            0.0
        );
        assert!(integrated_ou_moment_oracle(&spec, 1, 0.1, 0.0, 1.0).is_err());
        let r = integrated_ou_moment_oracle(&spec, 2, 0.02, 0.0, 1.0).unwrap()
            / integrated_ou_moment_oracle(&spec, 2, 0.01, 0.0, 1.0).unwrap();
        assert!((r - 4.0).abs() < 1e-2, "{r}");
        let tiny = integrated_ou_moment_oracle(&spec, 2, 0.1, 0.0, 1e-9).unwrap();
        assert!(tiny > 0.0 && tiny < 1e-18);
    }

    #[test]
    fn wick_oracle_matches_hand_formulas() {
        let spec =
            ModelSpec::new(vec![0.0, 3.0, 8.0, 15.0], vec![0.0, 1.0, 0.5, 2.0], 0.0).unwrap();
        let (eps, d) = (0.3, 1.0);
        let qh = |k: usize| spec.q(k).powi(2) / (2.0 * spec.lambda(k));
        let a = |k: usize| spec.lambda(k) / (eps * eps);
        let i = |rho: f64| {
            let x = rho * d;
            2.0 * (x - 1.0 + (-x).exp()) / (rho * rho)
        };
        let first = monomial_average_oracle(&spec, &[3], eps, d).unwrap();
        assert!(
            (first - integrated_ou_moment_oracle(&spec, 3, eps, 0.0, d).unwrap()).abs() < 1e-15
        );
        let diag = monomial_average_oracle(&spec, &[2, 2], eps, d).unwrap();
        assert!((diag - 2.0 * qh(2).powi(2) * i(2.0 * a(2))).abs() < 1e-14);
        let off = monomial_average_oracle(&spec, &[2, 4], eps, d).unwrap();
        assert!((off - qh(2) * qh(4) * i(a(2) + a(4))).abs() < 1e-14);
        let tri = monomial_average_oracle(&spec, &[2, 3, 4], eps, d).unwrap();
        assert!((tri - qh(2) * qh(3) * qh(4) * i(a(2) + a(3) + a(4))).abs() < 1e-15);
        let cube = monomial_average_oracle(&spec, &[2, 2, 2], eps, d).unwrap();
        let want = 9.0 * qh(2).powi(3) * i(a(2)) + 6.0 * qh(2).powi(3) * i(3.0 * a(2));
        assert!((cube - want).abs() < 1e-14);
        assert_eq!(monomial_mean(&spec, &[2, 2]), qh(2));
        assert_eq!(monomial_mean(&spec, &[2, 3]), 0.0);
        assert!((monomial_mean(&spec, &[2, 2, 2, 2]) - 3.0 * qh(2).powi(2)).abs() < 1e-15);
        let zero = ModelSpec::new(vec![0.0, 3.0, 8.0], vec![0.0, 1.0, 0.0], 0.0).unwrap();
        assert_eq!(
            monomial_average_oracle(&zero, &[2, 3], eps, d).unwrap(),
            0.0
        );
    }

    proptest! {
        #[test]
        fn step_is_reproducible(seed in any::<u64>(), rep in 0u64..1000, eps in 0.05f64..1.0) {
            let spec = spec2(1.0);
            let p = OuPropagator::new(&spec, eps, 0.01).unwrap();
            let mut z1 = vec![0.0, 0.3, 0.0];
            let mut z2 = z1.clone();
            let (mut s1, mut s2) = (NoiseStream::new(seed, rep), NoiseStream::new(seed, rep));
            for _ in 0..10 {
                p.step(&mut z1, &mut s1);
                p.step(&mut z2, &mut s2);
            }
            prop_assert_eq!(z1, z2);
        }

        #[test]
        fn oracle_is_monotone_in_interval(eps in 0.05f64..1.0, d in 0.01f64..2.0) {
            let spec = spec2(1.0);
            let a = integrated_ou_moment_oracle(&spec, 2, eps, 0.0, d).unwrap();
            let b = integrated_ou_moment_oracle(&spec, 2, eps, 0.0, 1.5 * d).unwrap();
            prop_assert!(b > a && a > 0.0);
        }
    }
}
