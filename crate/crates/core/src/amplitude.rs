//! The scalar amplitude equation
//! `da = (nu~ a - eta~ a^3) dt + sqrt(sigma_b + sigma_a a^2) dB` (Ito).

use serde::{Deserialize, Serialize};

use crate::coeffs::{AmplitudeCoefficients, StratonovichCoefficients};
use crate::error::{Error, Result};
use crate::noise::NoiseStream;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    EulerMaruyama,
    Milstein,
}

/// How the diffusion coefficient is written.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionForm {
    /// `sqrt(sigma_b + sigma_a a^2)`.
    #[default]
    Symmetric,
    /// `sqrt(sigma_a) a`; only for `sigma_b = 0`. Equal in law to the
    /// symmetric form, and the form in which the slow-mode martingale drives
    /// the amplitude pathwise.
    Linear,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AmplitudeOptions {
    pub scheme: Scheme,
    pub form: DiffusionForm,
}

impl AmplitudeOptions {
    fn check(&self, coeffs: &AmplitudeCoefficients) -> Result<()> {
        if self.form == DiffusionForm::Linear && coeffs.sigma_b != 0.0 {
            return Err(Error::NotApplicable(format!(
                "linear diffusion form needs sigma_b = 0, got {}",
                coeffs.sigma_b
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeState {
    pub t: f64,
    pub a: f64,
    pub coeffs: AmplitudeCoefficients,
}

/// Where Brownian increments come from.
pub enum IncrementSource<'a> {
    Stream(&'a mut NoiseStream),
    /// One increment per step, consumed in order.
    Supplied(&'a [f64]),
}

fn diffusion(c: &AmplitudeCoefficients, form: DiffusionForm, a: f64) -> f64 {
    match form {
        DiffusionForm::Symmetric => (c.sigma_b + c.sigma_a * a * a).sqrt(),
        DiffusionForm::Linear => c.sigma_a.sqrt() * a,
    }
}

#[inline]
fn advance(c: &AmplitudeCoefficients, opts: AmplitudeOptions, a: f64, h: f64, db: f64) -> f64 {
    let mut next = a + c.drift(a) * h + diffusion(c, opts.form, a) * db;
    if opts.scheme == Scheme::Milstein {
        next += 0.5 * c.sigma_a * a * (db * db - h);
    }
    next
}

fn check_h(h: f64) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid("h", format!("{h} must be positive")));
    }
    Ok(())
}

/// One step with increment `db`.
pub fn amplitude_step(
    state: &AmplitudeState,
    h: f64,
    db: f64,
    opts: AmplitudeOptions,
) -> Result<AmplitudeState> {
    check_h(h)?;
    opts.check(&state.coeffs)?;
    let a = advance(&state.coeffs, opts, state.a, h, db);
    if !a.is_finite() {
        return Err(Error::NonFinite {
            t: state.t + h,
            what: format!("a = {a}"),
        });
    }
    Ok(AmplitudeState {
        t: state.t + h,
        a,
        coeffs: state.coeffs,
    })
}

/// One step drawing `dB = sqrt(h) xi` from `stream`.
pub fn amplitude_step_stream(
    state: &AmplitudeState,
    h: f64,
    stream: &mut NoiseStream,
    opts: AmplitudeOptions,
) -> Result<AmplitudeState> {
    check_h(h)?;
    let db = h.sqrt() * stream.standard_normal();
    amplitude_step(state, h, db, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmplitudePath {
    pub times: Vec<f64>,
    pub a: Vec<f64>,
}

impl AmplitudePath {
    pub fn last(&self) -> f64 {
        *self.a.last().expect("path has at least the initial point")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,a\n");
        for (t, a) in self.times.iter().zip(&self.a) {
            s.push_str(&format!("{t},{a}\n"));
        }
        s
    }
}

/// Integrates on the grid `t_j = j T / steps`, `steps = ceil(T / h)`, and
/// records every `record_every` steps and at `T`. With supplied increments
/// the number of steps is the slice length and `h` must match `T / steps`.
pub fn simulate_amplitude(
    coeffs: &AmplitudeCoefficients,
    a0: f64,
    t_end: f64,
    h: f64,
    source: IncrementSource<'_>,
    opts: AmplitudeOptions,
    record_every: usize,
) -> Result<AmplitudePath> {
    let steps = grid_steps(t_end, h, &source)?;
    opts.check(coeffs)?;
    let h = t_end / steps as f64;
    let sqrt_h = h.sqrt();
    let record_every = record_every.max(1);
    let mut path = AmplitudePath {
        times: vec![0.0],
        a: vec![a0],
    };
    let mut a = a0;
    let mut source = source;
    for j in 1..=steps {
        let db = match &mut source {
            IncrementSource::Stream(s) => sqrt_h * s.standard_normal(),
            IncrementSource::Supplied(w) => w[j - 1],
        };
        a = advance(coeffs, opts, a, h, db);
        if !a.is_finite() {
            return Err(Error::NonFinite {
                t: j as f64 * h,
                what: format!("a = {a}"),
            });
        }
        if j % record_every == 0 || j == steps {
            path.times
                .push(if j == steps { t_end } else { j as f64 * h });
            path.a.push(a);
        }
    }
    Ok(path)
}

fn grid_steps(t_end: f64, h: f64, source: &IncrementSource<'_>) -> Result<usize> {
    check_h(h)?;
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(Error::invalid("t_end", format!("{t_end} must be positive")));
    }
    let steps = ((t_end / h) - 1e-9).ceil().max(1.0) as usize;
    if let IncrementSource::Supplied(w) = source {
        if w.len() != steps {
            return Err(Error::LengthMismatch {
                expected: steps,
                found: w.len(),
            });
        }
    }
    Ok(steps)
}

/// Heun (midpoint) integration of the Stratonovich form
/// `da = (nu_s a - eta a^3) dt + sqrt(sigma_b + sigma_a a^2) o dB`.
pub fn simulate_stratonovich(
    coeffs: &StratonovichCoefficients,
    a0: f64,
    t_end: f64,
    h: f64,
    source: IncrementSource<'_>,
    record_every: usize,
) -> Result<AmplitudePath> {
    let steps = grid_steps(t_end, h, &source)?;
    let h = t_end / steps as f64;
    let sqrt_h = h.sqrt();
    let record_every = record_every.max(1);
    let f = |a: f64| coeffs.nu_strat * a - coeffs.eta_tilde * a * a * a;
    let g = |a: f64| (coeffs.sigma_b + coeffs.sigma_a * a * a).sqrt();
    let mut path = AmplitudePath {
        times: vec![0.0],
        a: vec![a0],
    };
    let mut a = a0;
    let mut source = source;
    for j in 1..=steps {
        let db = match &mut source {
            IncrementSource::Stream(s) => sqrt_h * s.standard_normal(),
            IncrementSource::Supplied(w) => w[j - 1],
        };
        let pred = a + f(a) * h + g(a) * db;
        a += 0.5 * (f(a) + f(pred)) * h + 0.5 * (g(a) + g(pred)) * db;
        if !a.is_finite() {
            return Err(Error::NonFinite {
                t: j as f64 * h,
                what: format!("a = {a}"),
            });
        }
        if j % record_every == 0 || j == steps {
            path.times
                .push(if j == steps { t_end } else { j as f64 * h });
            path.a.push(a);
        }
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::to_stratonovich;
    use proptest::prelude::*;

    fn landau() -> AmplitudeCoefficients {
        AmplitudeCoefficients::new(1.0, 1.0 / 12.0, 0.0, 0.0)
    }

    #[test]
    fn landau_path_approaches_fixed_point() {
        let mut s = NoiseStream::new(0, 0);
        let p = simulate_amplitude(
            &landau(),
            1.0,
            20.0,
            1e-3,
            IncrementSource::Stream(&mut s),
            Default::default(),
            100,
        )
        .unwrap();
        assert!((p.last() - 12f64.sqrt()).abs() < 1e-4, "{}", p.last());
        assert!(p.a.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn zero_is_invariant() {
        let c = AmplitudeCoefficients::new(1.0, 0.1, 2.0, 0.0);
        let mut s = NoiseStream::new(3, 0);
        let p = simulate_amplitude(
            &c,
            0.0,
            5.0,
            1e-2,
            IncrementSource::Stream(&mut s),
            Default::default(),
            1,
        )
        .unwrap();
        assert!(p.a.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn linear_decay_against_exact() {
        let c = AmplitudeCoefficients::new(-1.0, 0.0, 0.0, 0.0);
        let mut s = NoiseStream::new(0, 0);
        let p = simulate_amplitude(
            &c,
            1.0,
            1.0,
            1e-4,
            IncrementSource::Stream(&mut s),
            Default::default(),
            1000,
        )
        .unwrap();
        assert!((p.last() - (-1.0f64).exp()).abs() <= 1e-3);
        assert_eq!(*p.times.last().unwrap(), 1.0);
    }

    #[test]
    fn step_matches_path() {
        let c = AmplitudeCoefficients::new(0.5, 0.1, 0.3, 0.2);
        let w = [0.01, -0.03, 0.02];
        let p = simulate_amplitude(
            &c,
            0.7,
            0.03,
            0.01,
            IncrementSource::Supplied(&w),
            Default::default(),
            1,
        )
        .unwrap();
        let mut st = AmplitudeState {
            t: 0.0,
            a: 0.7,
            coeffs: c,
        };
        for (j, dw) in w.iter().enumerate() {
            st = amplitude_step(&st, 0.01, *dw, Default::default()).unwrap();
            assert_eq!(st.a, p.a[j + 1]);
        }
    }

    #[test]
    fn linear_form_rejected_with_sigma_b() {
        let c = AmplitudeCoefficients::new(0.5, 0.1, 0.3, 0.2);
        let opts = AmplitudeOptions {
            form: DiffusionForm::Linear,
            ..Default::default()
        };
        let st = AmplitudeState {
            t: 0.0,
            a: 1.0,
            coeffs: c,
        };
        assert!(matches!(
            amplitude_step(&st, 0.01, 0.0, opts),
            Err(Error::NotApplicable(_))
        ));
    }

    #[test]
    fn supplied_length_must_match_grid() {
        let w = [0.0; 5];
        assert!(simulate_amplitude(
            &landau(),
            1.0,
            1.0,
            0.1,
            IncrementSource::Supplied(&w),
            Default::default(),
            1
        )
        .is_err());
    }

    #[test]
    fn nonfinite_is_reported() {
        let c = AmplitudeCoefficients::new(0.0, -1.0, 0.0, 0.0);
        let mut s = NoiseStream::new(0, 0);
        let r = simulate_amplitude(
            &c,
            10.0,
            10.0,
            0.5,
            IncrementSource::Stream(&mut s),
            Default::default(),
            1,
        );
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn strong_order_of_euler() {
        // reference at h/64 with summed increments
        let c = AmplitudeCoefficients::new(1.0, 1.0 / 12.0, 0.5, 0.3);
        let t_end = 1.0;
        let hs: [f64; 3] = [1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0];
        let mut errs = vec![0.0; hs.len()];
        let reps = 200;
        for r in 0..reps {
            for (i, &h) in hs.iter().enumerate() {
                let fine_h: f64 = h / 64.0;
                let n_fine = (t_end / fine_h).round() as usize;
                let mut s = NoiseStream::new(42, (r * 10 + i) as u64);
                let fine: Vec<f64> = (0..n_fine)
                    .map(|_| fine_h.sqrt() * s.standard_normal())
                    .collect();
                let coarse: Vec<f64> = fine.chunks(64).map(|c| c.iter().sum()).collect();
                let a = simulate_amplitude(
                    &c,
                    1.0,
                    t_end,
                    h,
                    IncrementSource::Supplied(&coarse),
                    Default::default(),
                    usize::MAX,
                )
                .unwrap();
                let b = simulate_amplitude(
                    &c,
                    1.0,
                    t_end,
                    fine_h,
                    IncrementSource::Supplied(&fine),
                    Default::default(),
                    usize::MAX,
                )
                .unwrap();
                errs[i] += (a.last() - b.last()).abs() / reps as f64;
            }
        }
        let x: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
        let y: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
        let (mx, my) = (x.iter().sum::<f64>() / 3.0, y.iter().sum::<f64>() / 3.0);
        let slope = x
            .iter()
            .zip(&y)
            .map(|(a, b)| (a - mx) * (b - my))
            .sum::<f64>()
            / x.iter().map(|a| (a - mx).powi(2)).sum::<f64>();
        assert!(slope >= 0.4, "slope {slope}, errs {errs:?}");
    }

    #[test]
    fn ito_and_stratonovich_agree_in_mean_square() {
        let c = AmplitudeCoefficients::new(1.0, 1.0 / 12.0, 0.5, 0.2);
        let strat = to_stratonovich(&c);
        let reps = 4000;
        for h in [1e-2, 1e-3] {
            let (mut s1, mut s2) = (Vec::with_capacity(reps), Vec::with_capacity(reps));
            for r in 0..reps {
                let mut a = NoiseStream::new(1, r as u64);
                let mut b = NoiseStream::new(2, r as u64);
                let p = simulate_amplitude(
                    &c,
                    1.0,
                    1.0,
                    h,
                    IncrementSource::Stream(&mut a),
                    Default::default(),
                    usize::MAX,
                )
                .unwrap();
                let q = simulate_stratonovich(
                    &strat,
                    1.0,
                    1.0,
                    h,
                    IncrementSource::Stream(&mut b),
                    usize::MAX,
                )
                .unwrap();
                s1.push(p.last().powi(2));
                s2.push(q.last().powi(2));
            }
            let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let var = |v: &[f64]| {
                let mu = m(v);
                v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (v.len() - 1) as f64
            };
            let se = ((var(&s1) + var(&s2)) / reps as f64).sqrt();
            assert!(
                (m(&s1) - m(&s2)).abs() < 4.0 * se,
                "h {h}: {} vs {}",
                m(&s1),
                m(&s2)
            );
        }
    }

    proptest! {
        #[test]
        fn sign_symmetry_without_additive_noise(
            a0 in -3.0f64..3.0,
            nu in -1.0f64..1.0,
            sa in 0.0f64..2.0,
            seed in any::<u64>(),
            milstein in any::<bool>(),
        ) {
            let c = AmplitudeCoefficients::new(nu, 1.0 / 12.0, sa, 0.0);
            let mut s = NoiseStream::new(seed, 0);
            let w: Vec<f64> = (0..200).map(|_| 0.1 * s.standard_normal()).collect();
            let neg: Vec<f64> = w.iter().map(|x| -x).collect();
            let opts = AmplitudeOptions {
                scheme: if milstein { Scheme::Milstein } else { Scheme::EulerMaruyama },
                ..Default::default()
            };
            let p = simulate_amplitude(&c, a0, 2.0, 0.01, IncrementSource::Supplied(&w), opts, 1).unwrap();
            let q = simulate_amplitude(&c, -a0, 2.0, 0.01, IncrementSource::Supplied(&neg), opts, 1).unwrap();
            for (x, y) in p.a.iter().zip(&q.a) {
                prop_assert_eq!(x.abs(), y.abs());
                prop_assert_eq!(*x, -*y);
            }
        }
    }
}
