//! Fast exact checks run by `spde-amp selftest`.

use std::f64::consts::PI;

use spde_amplitude::burgers::{self, NoiseProfile};
use spde_amplitude::config::RunConfig;
use spde_amplitude::noise::{ou_transition_moments, NoiseStream};
use spde_amplitude::report::regression_selftest;
use spde_amplitude::spectral::effective_covariance;
use spde_amplitude::tensor::{check_assumption3, rescale_basis};
use spde_amplitude::{compute_coefficients, noise_interaction, Result};

pub struct Outcome {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn single_mode() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for sigma in [0.5, 1.0, 2.0] {
        let (spec, tensor) =
            burgers::model(64, 0.0, NoiseProfile::SingleMode { index: 2, sigma }, false)?;
        let c = compute_coefficients(&spec, &tensor)?;
        let s2 = sigma * sigma;
        for (got, want) in [
            (c.eta_tilde, 1.0 / 12.0),
            (c.sigma_a, s2 / 36.0),
            (c.sigma_b, 0.0),
            (c.nu_tilde, s2 / 72.0 - s2 / 88.0),
        ] {
            worst = worst.max((got - want).abs());
        }
    }
    Ok(Outcome {
        name: "single_mode_burgers_coefficients",
        pass: worst <= 1e-12,
        detail: format!("max abs error {worst:e}"),
    })
}

fn white_sigma_a() -> Result<Outcome> {
    let (spec, tensor) = burgers::model(64, 1.0, NoiseProfile::White { sigma: 1.0 }, true)?;
    let c = compute_coefficients(&spec, &tensor)?;
    let err = (c.sigma_a - 1.0 / (18.0 * PI)).abs();
    Ok(Outcome {
        name: "white_noise_sigma_a",
        pass: err <= 1e-12,
        detail: format!("sigma_a = {}, error {err:e}", c.sigma_a),
    })
}

fn operator_forms() -> Result<Outcome> {
    let (spec, tensor) = burgers::model(16, 1.0, NoiseProfile::White { sigma: 1.3 }, true)?;
    let c = compute_coefficients(&spec, &tensor)?;
    let inter = noise_interaction(&spec, &tensor)?;
    let qhat = effective_covariance(&spec)?;
    let ea = (inter.sigma_a() - c.sigma_a).abs();
    let eb = (inter.sigma_b(&qhat) - c.sigma_b).abs();
    Ok(Outcome {
        name: "gamma_operator_matches_series",
        pass: ea <= 1e-12 && eb <= 1e-12,
        detail: format!("sigma_a error {ea:e}, sigma_b error {eb:e}"),
    })
}

fn rescaling() -> Result<Outcome> {
    let n = 12;
    let (spec, tensor) = burgers::model(n, 1.0, NoiseProfile::White { sigma: 1.0 }, true)?;
    let base = compute_coefficients(&spec, &tensor)?;
    let c: Vec<f64> = (1..=n).map(|k| 1.0 + 0.1 * k as f64).collect();
    let (t2, q2) = rescale_basis(&tensor, spec.noise(), &c)?;
    let spec2 = spec.clone().with_noise(q2)?;
    let got = compute_coefficients(&spec2, &t2)?;
    let c1 = c[0];
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-300);
    let worst = rel(got.nu_tilde, base.nu_tilde)
        .max(rel(got.sigma_a, base.sigma_a))
        .max(rel(got.eta_tilde, base.eta_tilde * c1 * c1))
        .max(rel(got.sigma_b, base.sigma_b / (c1 * c1)));
    Ok(Outcome {
        name: "basis_rescaling",
        pass: worst <= 1e-12,
        detail: format!("max relative error {worst:e}"),
    })
}

fn tensor_assumption() -> Result<Outcome> {
    let tensor = spde_amplitude::tensor::burgers_tensor(32, false)?;
    let report = check_assumption3(&tensor);
    Ok(Outcome {
        name: "burgers_tensor_structure",
        pass: report.is_empty(),
        detail: format!("{} violations", report.len()),
    })
}

fn ou_moments() -> Result<Outcome> {
    let (spec, _) = burgers::model(
        4,
        1.0,
        NoiseProfile::SingleMode {
            index: 2,
            sigma: 1.0,
        },
        false,
    )?;
    let lambda = spec.lambda(2);
    let (mean, var) = ou_transition_moments(&spec, 2, 0.1, 1e3, 0.7)?;
    let pass = close(mean, 0.0, 1e-12) && close(var, 1.0 / (2.0 * lambda), 1e-12);
    Ok(Outcome {
        name: "ou_stationary_limit",
        pass,
        detail: format!("mean {mean:e}, variance {var}"),
    })
}

fn streams() -> Result<Outcome> {
    let mut a = NoiseStream::new(1, 0);
    let mut b = NoiseStream::new(1, 0);
    let mut c = NoiseStream::new(1, 1);
    let (xa, xb, xc) = (
        a.standard_normal(),
        b.standard_normal(),
        c.standard_normal(),
    );
    Ok(Outcome {
        name: "noise_streams",
        pass: xa == xb && xa != xc,
        detail: "same seed repeats, replicas differ".into(),
    })
}

fn regression() -> Result<Outcome> {
    let r = regression_selftest();
    Ok(Outcome {
        name: "rate_regression",
        pass: r.is_ok(),
        detail: r
            .err()
            .map_or_else(|| "planted slopes recovered".into(), |e| e.to_string()),
    })
}

fn config_round_trip() -> Result<Outcome> {
    let cfg = RunConfig {
        epsilons: Some(vec![0.4, 0.2]),
        ..RunConfig::default()
    };
    let back = RunConfig::parse(&cfg.to_toml()?)?;
    Ok(Outcome {
        name: "config_round_trip",
        pass: back == cfg,
        detail: "parse(serialize(c)) == c".into(),
    })
}

type Check = fn() -> Result<Outcome>;

pub fn run() -> Vec<Outcome> {
    let checks: [(&'static str, Check); 9] = [
        ("single_mode_burgers_coefficients", single_mode),
        ("white_noise_sigma_a", white_sigma_a),
        ("gamma_operator_matches_series", operator_forms),
        ("basis_rescaling", rescaling),
        ("burgers_tensor_structure", tensor_assumption),
        ("ou_stationary_limit", ou_moments),
        ("noise_streams", streams),
        ("rate_regression", regression),
        ("config_round_trip", config_round_trip),
    ];
    checks
        .into_iter()
        .map(|(name, f)| {
            f().unwrap_or_else(|e| Outcome {
                name,
                pass: false,
                detail: format!("error: {e}"),
            })
        })
        .collect()
}
