//! Exponential Euler integration of the rescaled slow-fast system
//! `dv = (-eps^-2 L v + nu v + eps^-1 B(v, v)) dt + eps^-1 Q dW`.
//!
//! The linear part and the noise integral are exact over each step; the
//! nonlinearity and `nu v` are frozen at the left endpoint. An OU companion
//! `z` is advanced with the same noise integrals, so `P_s v - z` isolates the
//! effect of the nonlinear coupling.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{one_minus_exp, NoiseStream, OuPropagator};
use crate::spectral::{
    norm_with_weights, require_valid, sobolev_weights, ModelSpec, SpectralField,
};
use crate::tensor::BilinearTensor;

pub const DEFAULT_KAPPA: f64 = 0.1;
pub const DEFAULT_TAU_SCALE: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpdeState {
    pub t: f64,
    pub v: SpectralField,
    pub epsilon: f64,
    pub tau_star_hit: bool,
    pub kappa: f64,
    /// Prefactor `s` in the stopping rule `||v||_alpha >= s eps^-kappa`.
    pub tau_scale: f64,
}

impl SpdeState {
    pub fn new(v: SpectralField, epsilon: f64) -> Self {
        Self {
            t: 0.0,
            v,
            epsilon,
            tau_star_hit: false,
            kappa: DEFAULT_KAPPA,
            tau_scale: DEFAULT_TAU_SCALE,
        }
    }

    pub fn threshold(&self) -> f64 {
        stopping_threshold(self.epsilon, self.kappa, self.tau_scale)
    }
}

pub fn stopping_threshold(epsilon: f64, kappa: f64, tau_scale: f64) -> f64 {
    tau_scale * epsilon.powf(-kappa)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpdeConfig {
    pub epsilon: f64,
    pub h: f64,
    pub t_end: f64,
    pub kappa: f64,
    /// `f64::INFINITY` disables the stopping time.
    pub tau_scale: f64,
    /// Record every `record_every` steps (plus the first and last step).
    pub record_every: usize,
    pub record_increments: bool,
    pub record_snapshots: bool,
}

impl SpdeConfig {
    /// Defaults: `h = eps^2 / 8`, `kappa = 0.1`, records every 10 steps.
    pub fn new(epsilon: f64, t_end: f64) -> Self {
        Self {
            epsilon,
            h: epsilon * epsilon / 8.0,
            t_end,
            kappa: DEFAULT_KAPPA,
            tau_scale: DEFAULT_TAU_SCALE,
            record_every: 10,
            record_increments: false,
            record_snapshots: false,
        }
    }

    pub fn with_h(mut self, h: f64) -> Self {
        self.h = h;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let eps = self.epsilon;
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::invalid("epsilon", format!("{eps} must be positive")));
        }
        if !(self.h > 0.0 && self.h <= eps * eps / 4.0 * (1.0 + 1e-12)) {
            return Err(Error::invalid(
                "h",
                format!("{} must lie in (0, eps^2/4 = {}]", self.h, eps * eps / 4.0),
            ));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(Error::invalid(
                "t_end",
                format!("{} must be positive", self.t_end),
            ));
        }
        if !(self.kappa >= 0.0) {
            return Err(Error::invalid("kappa", "must be nonnegative"));
        }
        if !(self.tau_scale > 0.0) {
            return Err(Error::invalid("tau_scale", "must be positive"));
        }
        if self.record_every == 0 {
            return Err(Error::invalid("record_every", "must be at least 1"));
        }
        Ok(())
    }

    /// Number of steps and the step actually used, `t_end / steps <= h`.
    pub fn resolved_steps(&self) -> (usize, f64) {
        let steps = ((self.t_end / self.h) - 1e-9).ceil().max(1.0) as usize;
        (steps, self.t_end / steps as f64)
    }
}

/// Step-by-step driver holding the precomputed propagators.
#[derive(Debug, Clone)]
pub struct SpdeIntegrator<'a> {
    tensor: &'a BilinearTensor,
    inv_eps: f64,
    nu: f64,
    prop: OuPropagator,
    phi: Vec<f64>,
    weights: Vec<f64>,
    threshold: f64,
    t: f64,
    v: Vec<f64>,
    z: Vec<f64>,
    noise: Vec<f64>,
    dw: Vec<f64>,
    bvv: Vec<f64>,
    stopped: bool,
}

impl<'a> SpdeIntegrator<'a> {
    /// `z0` is the initial OU companion; `None` starts it at `P_s v0`.
    pub fn new(
        spec: &ModelSpec,
        tensor: &'a BilinearTensor,
        epsilon: f64,
        h: f64,
        threshold: f64,
        v0: &SpectralField,
        z0: Option<&SpectralField>,
    ) -> Result<Self> {
        require_valid(spec)?;
        let n = spec.n();
        if tensor.n() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                found: tensor.n(),
            });
        }
        v0.ensure_len(n)?;
        let prop = OuPropagator::new(spec, epsilon, h)?;
        let eps2 = epsilon * epsilon;
        let phi = spec
            .eigenvalues()
            .iter()
            .map(|&l| {
                let x = l * h / eps2;
                if x < 1e-12 {
                    h
                } else {
                    one_minus_exp(x) * eps2 / l
                }
            })
            .collect();
        let z = match z0 {
            Some(z) => {
                z.ensure_len(n)?;
                let mut z = z.as_slice().to_vec();
                z[0] = 0.0;
                z
            }
            None => {
                let mut z = v0.as_slice().to_vec();
                z[0] = 0.0;
                z
            }
        };
        Ok(Self {
            tensor,
            inv_eps: 1.0 / epsilon,
            nu: spec.nu(),
            prop,
            phi,
            weights: sobolev_weights(spec, spec.alpha()),
            threshold,
            t: 0.0,
            v: v0.as_slice().to_vec(),
            z,
            noise: vec![0.0; n],
            dw: vec![0.0; n],
            bvv: vec![0.0; n],
            stopped: false,
        })
    }

    pub fn h(&self) -> f64 {
        self.prop.h()
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    /// OU companion driven by the same noise.
    pub fn z(&self) -> &[f64] {
        &self.z
    }

    /// Wiener increments of the last step (zero on unforced modes).
    pub fn last_increments(&self) -> &[f64] {
        &self.dw
    }

    /// 0-based indices of forced modes, the order in which increments are drawn.
    pub fn forced(&self) -> &[usize] {
        self.prop.forced()
    }

    pub fn stopped(&self) -> bool {
        self.stopped
    }

    pub fn norm(&self) -> f64 {
        norm_with_weights(&self.v, &self.weights)
    }

    /// `||P_s v||_alpha`.
    pub fn fast_norm(&self) -> f64 {
        norm_with_weights(&self.v[1..], &self.weights[1..])
    }

    /// `||P_s v - z||_alpha`.
    pub fn residual_norm(&self) -> f64 {
        self.v[1..]
            .iter()
            .zip(&self.z[1..])
            .zip(&self.weights[1..])
            .map(|((v, z), w)| w * (v - z) * (v - z))
            .sum::<f64>()
            .sqrt()
    }

    /// Advances one step. Returns whether the stopping threshold was reached.
    pub fn step(&mut self, stream: &mut NoiseStream) -> Result<bool> {
        if self.stopped {
            return Err(Error::PastStoppingTime { t: self.t });
        }
        self.tensor.quadratic_into(&self.v, &mut self.bvv);
        self.prop
            .draw_coupled(stream, &mut self.noise, &mut self.dw);
        let decay = self.prop.decay();
        #[allow(clippy::needless_range_loop)]
        for i in 0..self.v.len() {
            let forcing = self.nu * self.v[i] + self.inv_eps * self.bvv[i];
            self.v[i] = decay[i] * self.v[i] + self.phi[i] * forcing + self.noise[i];
            self.z[i] = decay[i] * self.z[i] + self.noise[i];
        }
        self.t += self.prop.h();
        let norm = self.norm();
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                t: self.t,
                what: format!("||v|| = {norm}, X = {}", self.v[0]),
            });
        }
        if norm >= self.threshold {
            self.stopped = true;
        }
        Ok(self.stopped)
    }
}

/// One exponential Euler step of the full system.
pub fn spde_step(
    state: &SpdeState,
    h: f64,
    spec: &ModelSpec,
    tensor: &BilinearTensor,
    stream: &mut NoiseStream,
) -> Result<SpdeState> {
    if state.tau_star_hit {
        return Err(Error::PastStoppingTime { t: state.t });
    }
    let mut it = SpdeIntegrator::new(
        spec,
        tensor,
        state.epsilon,
        h,
        state.threshold(),
        &state.v,
        None,
    )?;
    let hit = it.step(stream)?;
    Ok(SpdeState {
        t: state.t + h,
        v: SpectralField::from_vec(it.v.clone()),
        tau_star_hit: hit,
        ..state.clone()
    })
}

/// Wiener increments of the forced modes, one row per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Increments {
    /// 1-based mode indices, the column order of `dw`.
    pub modes: Vec<usize>,
    pub h: f64,
    pub dw: Vec<f64>,
}

impl Increments {
    pub fn steps(&self) -> usize {
        if self.modes.is_empty() {
            0
        } else {
            self.dw.len() / self.modes.len()
        }
    }

    /// Increments of mode `k` (1-based), if forced.
    pub fn mode(&self, k: usize) -> Option<Vec<f64>> {
        let j = self.modes.iter().position(|&m| m == k)?;
        let w = self.modes.len();
        Some(self.dw.iter().skip(j).step_by(w).copied().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    StoppingTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub epsilon: f64,
    pub h: f64,
    pub times: Vec<f64>,
    pub x: Vec<f64>,
    pub fast_norm: Vec<f64>,
    pub residual_norm: Vec<f64>,
    /// `min(T, tau*)`.
    pub tau_star: f64,
    pub outcome: Outcome,
    /// Full `v` at each recorded time.
    pub snapshots: Option<Vec<Vec<f64>>>,
    /// OU companion at each recorded time.
    pub ou_snapshots: Option<Vec<Vec<f64>>>,
    pub increments: Option<Increments>,
}

impl PathRecord {
    pub fn sup_residual(&self) -> f64 {
        self.residual_norm.iter().fold(0.0, |m, &r| m.max(r))
    }

    /// Columns `t,X,norm_fast,norm_residual_vs_ou`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,X,norm_fast,norm_residual_vs_ou\n");
        for i in 0..self.times.len() {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                self.times[i], self.x[i], self.fast_norm[i], self.residual_norm[i]
            );
        }
        s
    }

    /// Snapshot matrix, one row per recorded time, one column per mode.
    pub fn snapshots_csv(&self) -> Option<String> {
        let snaps = self.snapshots.as_ref()?;
        let n = snaps.first().map_or(0, Vec::len);
        let mut s = String::from("t");
        for k in 1..=n {
            let _ = write!(s, ",v{k}");
        }
        s.push('\n');
        for (t, row) in self.times.iter().zip(snaps) {
            let _ = write!(s, "{t}");
            for x in row {
                let _ = write!(s, ",{x}");
            }
            s.push('\n');
        }
        Some(s)
    }
}

/// Runs to `min(T, tau*)` from `v0`, recording on a grid of `record_every` steps.
pub fn simulate_full(
    spec: &ModelSpec,
    tensor: &BilinearTensor,
    config: &SpdeConfig,
    v0: &SpectralField,
    stream: &mut NoiseStream,
) -> Result<PathRecord> {
    simulate_full_from(spec, tensor, config, v0, None, stream)
}

/// As [`simulate_full`] with an explicit starting point for the OU companion.
pub fn simulate_full_from(
    spec: &ModelSpec,
    tensor: &BilinearTensor,
    config: &SpdeConfig,
    v0: &SpectralField,
    z0: Option<&SpectralField>,
    stream: &mut NoiseStream,
) -> Result<PathRecord> {
    config.validate()?;
    let (steps, h) = config.resolved_steps();
    let threshold = stopping_threshold(config.epsilon, config.kappa, config.tau_scale);
    let mut it = SpdeIntegrator::new(spec, tensor, config.epsilon, h, threshold, v0, z0)?;
    let cap = steps / config.record_every + 2;
    let mut rec = PathRecord {
        epsilon: config.epsilon,
        h,
        times: Vec::with_capacity(cap),
        x: Vec::with_capacity(cap),
        fast_norm: Vec::with_capacity(cap),
        residual_norm: Vec::with_capacity(cap),
        tau_star: config.t_end,
        outcome: Outcome::Completed,
        snapshots: config.record_snapshots.then(Vec::new),
        ou_snapshots: config.record_snapshots.then(Vec::new),
        increments: config.record_increments.then(|| Increments {
            modes: it.forced().iter().map(|i| i + 1).collect(),
            h,
            dw: Vec::with_capacity(steps * it.forced().len()),
        }),
    };
    let push = |rec: &mut PathRecord, it: &SpdeIntegrator, t: f64| {
        rec.times.push(t);
        rec.x.push(it.v[0]);
        rec.fast_norm.push(it.fast_norm());
        rec.residual_norm.push(it.residual_norm());
        if let Some(s) = rec.snapshots.as_mut() {
            s.push(it.v.clone());
        }
        if let Some(s) = rec.ou_snapshots.as_mut() {
            s.push(it.z.clone());
        }
    };
    push(&mut rec, &it, 0.0);
    if it.norm() >= threshold {
        rec.tau_star = 0.0;
        rec.outcome = Outcome::StoppingTime;
        return Ok(rec);
    }
    for step in 1..=steps {
        let hit = it.step(stream)?;
        if let Some(inc) = rec.increments.as_mut() {
            for &i in it.prop.forced() {
                inc.dw.push(it.dw[i]);
            }
        }
        // exact grid time, free of accumulated rounding
        let t = if step == steps {
            config.t_end
        } else {
            step as f64 * h
        };
        if hit {
            push(&mut rec, &it, t);
            rec.tau_star = t;
            rec.outcome = Outcome::StoppingTime;
            break;
        }
        if step % config.record_every == 0 || step == steps {
            push(&mut rec, &it, t);
        }
    }
    Ok(rec)
}

/// Sup over the grid of the ansatz residual `eps * ||v - a e_1 - z||_alpha`,
/// i.e. `u - eps a(eps^2 t) e_1 - eps R` with `R = z`, in original variables
/// (coefficients in the working basis).
pub fn reconstruct_ansatz(record: &PathRecord, a_path: &[f64]) -> Result<f64> {
    if a_path.len() != record.times.len() {
        return Err(Error::LengthMismatch {
            expected: record.times.len(),
            found: a_path.len(),
        });
    }
    Ok(ansatz_residual_series(record, a_path)
        .into_iter()
        .fold(0.0, f64::max))
}

pub fn ansatz_residual_series(record: &PathRecord, a_path: &[f64]) -> Vec<f64> {
    record
        .x
        .iter()
        .zip(a_path)
        .zip(&record.residual_norm)
        .map(|((x, a), r)| record.epsilon * ((x - a) * (x - a) + r * r).sqrt())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::burgers::{model, NoiseProfile};

    fn linear_spec(q: Vec<f64>, nu: f64) -> (ModelSpec, BilinearTensor) {
        let n = q.len();
        let eig = (1..=n).map(|k| (k * k - 1) as f64).collect();
        (
            ModelSpec::new(eig, q, nu).unwrap(),
            BilinearTensor::zeros(n).unwrap(),
        )
    }

    #[test]
    fn pure_linear_decay_is_exact() {
        let (spec, t) = linear_spec(vec![0.0; 4], 0.0);
        let v0 = SpectralField::from_vec(vec![0.5, 1.0, -2.0, 0.25]);
        let eps = 0.3;
        let h = eps * eps / 8.0;
        let st = spde_step(
            &SpdeState::new(v0.clone(), eps),
            h,
            &spec,
            &t,
            &mut NoiseStream::new(0, 0),
        )
        .unwrap();
        for k in 1..=4 {
            let want = (-spec.lambda(k) * h / (eps * eps)).exp() * v0.get(k);
            assert!((st.v.get(k) - want).abs() <= 1e-15, "mode {k}");
        }
    }

    #[test]
    fn slow_mode_growth() {
        let (spec, t) = linear_spec(vec![0.0; 3], 1.0);
        let h = 1e-3;
        let st = spde_step(
            &SpdeState::new(SpectralField::unit(3, 1), 0.5),
            h,
            &spec,
            &t,
            &mut NoiseStream::new(0, 0),
        )
        .unwrap();
        assert!((st.v.get(1) - h.exp()).abs() < h * h);
    }

    #[test]
    fn no_coupling_keeps_companion_exact() {
        let (spec, t) = linear_spec(vec![0.0, 1.0, 0.5, 0.2], 0.0);
        let v0 = SpectralField::from_vec(vec![0.0, 0.3, -0.1, 0.0]);
        let mut cfg = SpdeConfig::new(0.2, 0.5);
        cfg.tau_scale = f64::INFINITY;
        let rec = simulate_full(&spec, &t, &cfg, &v0, &mut NoiseStream::new(1, 0)).unwrap();
        assert_eq!(rec.sup_residual(), 0.0);
        let (spec0, _) = linear_spec(vec![0.0; 4], 0.0);
        let rec = simulate_full(&spec0, &t, &cfg, &v0, &mut NoiseStream::new(1, 0)).unwrap();
        assert_eq!(rec.sup_residual(), 0.0);
    }

    #[test]
    fn stopping_time_truncates_record() {
        // rigged: strong linear growth of the slow mode
        let (spec, t) = linear_spec(vec![0.0; 3], 20.0);
        let mut cfg = SpdeConfig::new(0.5, 2.0);
        cfg.record_every = 1000;
        let rec = simulate_full(
            &spec,
            &t,
            &cfg,
            &SpectralField::unit(3, 1),
            &mut NoiseStream::new(0, 0),
        )
        .unwrap();
        assert_eq!(rec.outcome, Outcome::StoppingTime);
        let thr = stopping_threshold(0.5, cfg.kappa, cfg.tau_scale);
        let last = *rec.x.last().unwrap();
        assert!(last >= thr);
        // the previous step was below the threshold
        let prev = last / (1.0 + 20.0 * rec.h);
        assert!(prev < thr);
        assert_eq!(*rec.times.last().unwrap(), rec.tau_star);
        assert!(rec.tau_star < 2.0);
        assert!(rec.times.windows(2).all(|w| w[0] < w[1]));
        let mut st = SpdeState::new(SpectralField::unit(3, 1), 0.5);
        st.tau_star_hit = true;
        assert!(matches!(
            spde_step(&st, 0.01, &spec, &t, &mut NoiseStream::new(0, 0)),
            Err(Error::PastStoppingTime { .. })
        ));
    }

    #[test]
    fn rejects_large_steps_and_nan() {
        let (spec, t) = linear_spec(vec![0.0; 3], 0.0);
        let cfg = SpdeConfig::new(0.2, 1.0).with_h(0.02);
        assert!(simulate_full(
            &spec,
            &t,
            &cfg,
            &SpectralField::zeros(3),
            &mut NoiseStream::new(0, 0)
        )
        .is_err());
        let mut cfg = SpdeConfig::new(0.2, 1.0);
        cfg.tau_scale = f64::INFINITY;
        let v0 = SpectralField::from_vec(vec![f64::NAN, 0.0, 0.0]);
        let err = simulate_full(&spec, &t, &cfg, &v0, &mut NoiseStream::new(0, 0)).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn increments_are_recorded_in_step_order() {
        let (spec, t) = model(
            8,
            1.0,
            NoiseProfile::SingleMode {
                index: 2,
                sigma: 1.0,
            },
            false,
        )
        .unwrap();
        let mut cfg = SpdeConfig::new(0.4, 0.2);
        cfg.record_increments = true;
        let rec = simulate_full(
            &spec,
            &t,
            &cfg,
            &SpectralField::unit(8, 1),
            &mut NoiseStream::new(9, 2),
        )
        .unwrap();
        let inc = rec.increments.unwrap();
        assert_eq!(inc.modes, vec![2]);
        let (steps, _) = cfg.resolved_steps();
        assert_eq!(inc.steps(), steps);
        // replay the draws: dW is the first of each pair of normals
        let mut s = NoiseStream::new(9, 2);
        for w in &inc.dw {
            let x = inc.h.sqrt() * s.standard_normal();
            let _ = s.standard_normal();
            assert_eq!(*w, x);
        }
    }

    #[test]
    fn ansatz_residual_telescopes() {
        let (spec, t) = model(
            8,
            1.0,
            NoiseProfile::SingleMode {
                index: 2,
                sigma: 1.0,
            },
            false,
        )
        .unwrap();
        let cfg = SpdeConfig::new(0.2, 0.5);
        let rec = simulate_full(
            &spec,
            &t,
            &cfg,
            &SpectralField::unit(8, 1),
            &mut NoiseStream::new(4, 0),
        )
        .unwrap();
        let r = reconstruct_ansatz(&rec, &rec.x).unwrap();
        assert_eq!(r, 0.2 * rec.sup_residual());
        assert!(reconstruct_ansatz(&rec, &rec.x[1..]).is_err());
    }

    #[test]
    fn csv_shapes() {
        let (spec, t) = linear_spec(vec![0.0, 1.0, 0.0], 0.0);
        let mut cfg = SpdeConfig::new(0.5, 0.1);
        cfg.record_snapshots = true;
        let rec = simulate_full(
            &spec,
            &t,
            &cfg,
            &SpectralField::unit(3, 1),
            &mut NoiseStream::new(0, 0),
        )
        .unwrap();
        let csv = rec.to_csv();
        assert!(csv.starts_with("t,X,norm_fast,norm_residual_vs_ou\n"));
        assert_eq!(csv.lines().count(), rec.times.len() + 1);
        let snaps = rec.snapshots_csv().unwrap();
        assert!(snaps.starts_with("t,v1,v2,v3\n"));
    }
}
