use spde_amplitude::analysis::{
    coupled_error_experiment, qv_discrepancy_experiment, stabilization_experiment, CoupledConfig,
    QvConfig, RunContext, SlowPath, StabilizationConfig,
};
use spde_amplitude::burgers::{self, NoiseProfile};

fn ctx() -> RunContext {
    RunContext::new(20240501, 1)
}

#[test]
fn coupled_residual_rates() {
    let r = coupled_error_experiment(&CoupledConfig::default(), &ctx()).unwrap();
    let ou = r.slope("ou_residual").unwrap().fit.slope;
    assert!((ou - 1.0).abs() <= 0.4, "ou residual slope {ou}");
    let ansatz = r.slope("ansatz_residual").unwrap().fit.slope;
    assert!(ansatz >= 1.1, "ansatz residual slope {ansatz}");
}

#[test]
fn coupled_without_noise_is_landau_tracking() {
    let cfg = CoupledConfig {
        sigma: 0.0,
        batch: 2,
        ..Default::default()
    };
    let r = coupled_error_experiment(&cfg, &ctx()).unwrap();
    let slope = r.slope("sup_error").unwrap().fit.slope;
    assert!(slope >= 0.8, "{slope}");
    assert!(r.check_named("sup_error_monotone").unwrap().pass);
}

#[test]
fn pure_fast_qv_statistic() {
    let (spec, tensor) = burgers::model(32, 1.0, NoiseProfile::White { sigma: 1.0 }, true).unwrap();
    let cfg = QvConfig {
        slow: SlowPath::Zero,
        slope_threshold: 0.7,
        ..Default::default()
    };
    let r = qv_discrepancy_experiment(&spec, &tensor, &cfg, &ctx()).unwrap();
    assert!(r.pass, "{:?}", r.checks);
    assert!(r.slope("sup_qv_discrepancy").unwrap().fit.slope >= 0.7);
}

#[test]
fn stabilization_without_noise_grows_at_nu() {
    let cfg = StabilizationConfig {
        sigma_squared: vec![0.0],
        full_sigma_squared: vec![],
        amplitude_batch: 4,
        amplitude_t_end: 10.0,
        ..Default::default()
    };
    let r = stabilization_experiment(&cfg, &ctx()).unwrap();
    let e = r.cells[0].estimate("amplitude_exponent").unwrap();
    assert!((e.mean - 1.0).abs() <= 0.05, "{}", e.mean);
}

#[test]
fn stabilization_sign_change_at_defaults() {
    let r = stabilization_experiment(&StabilizationConfig::default(), &ctx()).unwrap();
    assert_eq!(r.grid["sign_change"], serde_json::Value::Bool(true));
    assert!(r.pass, "{:?}", r.checks);
}
