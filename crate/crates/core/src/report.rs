//! Experiment reports, order-stable statistics and log-log rate fits.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Neumaier-compensated sum, evaluated in iteration order.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for x in values {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Sample statistics of a batch of per-replica values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub name: String,
    pub mean: f64,
    pub variance: f64,
    pub std_error: f64,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<f64>,
}

impl Estimate {
    pub fn from_samples(name: impl Into<String>, values: &[f64]) -> Self {
        let n = values.len();
        let mean = if n == 0 {
            f64::NAN
        } else {
            compensated_sum(values.iter().copied()) / n as f64
        };
        let variance = if n < 2 {
            0.0
        } else {
            compensated_sum(values.iter().map(|x| (x - mean) * (x - mean))) / (n - 1) as f64
        };
        Self {
            name: name.into(),
            mean,
            variance,
            std_error: if n == 0 {
                f64::NAN
            } else {
                (variance / n as f64).sqrt()
            },
            n,
            reference: None,
        }
    }

    /// A derived quantity with a known standard error.
    pub fn derived(name: impl Into<String>, mean: f64, std_error: f64, n: usize) -> Self {
        Self {
            name: name.into(),
            mean,
            variance: std_error * std_error * n as f64,
            std_error,
            n,
            reference: None,
        }
    }

    pub fn with_reference(mut self, reference: f64) -> Self {
        self.reference = Some(reference);
        self
    }

    /// `|mean - reference| <= k * std_error`.
    pub fn within(&self, k: f64) -> bool {
        match self.reference {
            Some(r) => (self.mean - r).abs() <= k * self.std_error,
            None => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub params: BTreeMap<String, f64>,
    pub estimates: Vec<Estimate>,
    pub replicas: usize,
    pub censored: usize,
    pub censoring_fraction: f64,
}

impl Cell {
    pub fn new(
        params: impl IntoIterator<Item = (&'static str, f64)>,
        replicas: usize,
        censored: usize,
    ) -> Self {
        Self {
            params: params
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            estimates: Vec::new(),
            replicas,
            censored,
            censoring_fraction: if replicas == 0 {
                0.0
            } else {
                censored as f64 / replicas as f64
            },
        }
    }

    pub fn estimate(&self, name: &str) -> Option<&Estimate> {
        self.estimates.iter().find(|e| e.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_std_error: f64,
    /// 95% interval for the slope.
    pub ci: [f64; 2],
    pub points: usize,
}

/// Least squares fit of `log error = intercept + slope log eps`.
pub fn rate_regression(points: &[(f64, f64)]) -> Result<RateFit> {
    if points.len() < 3 {
        return Err(Error::invalid(
            "points",
            format!("need at least 3, got {}", points.len()),
        ));
    }
    for &(e, y) in points {
        if !(e > 0.0 && e.is_finite()) {
            return Err(Error::invalid(
                "points",
                format!("nonpositive abscissa {e}"),
            ));
        }
        if !(y > 0.0 && y.is_finite()) {
            return Err(Error::invalid(
                "points",
                format!("nonpositive error value {y}"),
            ));
        }
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = compensated_sum(xs.iter().copied()) / n;
    let my = compensated_sum(ys.iter().copied()) / n;
    let sxx = compensated_sum(xs.iter().map(|x| (x - mx) * (x - mx)));
    if sxx == 0.0 {
        return Err(Error::invalid("points", "abscissae are all equal"));
    }
    let sxy = compensated_sum(xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)));
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss = compensated_sum(xs.iter().zip(&ys).map(|(x, y)| {
        let r = y - intercept - slope * x;
        r * r
    }));
    let dof = n - 2.0;
    let se = if dof > 0.0 {
        (rss / dof / sxx).sqrt()
    } else {
        0.0
    };
    let t = StudentsT::new(0.0, 1.0, dof.max(1.0))
        .map_err(|e| Error::invalid("points", e.to_string()))?
        .inverse_cdf(0.975);
    Ok(RateFit {
        slope,
        intercept,
        slope_std_error: se,
        ci: [slope - t * se, slope + t * se],
        points: points.len(),
    })
}

/// Recovers planted slopes on synthetic data; run before experiment batches.
pub fn regression_selftest() -> Result<()> {
    let eps = [0.4, 0.2, 0.1, 0.05];
    let exact: Vec<(f64, f64)> = eps.iter().map(|&e| (e, 3.0 * e * e)).collect();
    let fit = rate_regression(&exact)?;
    let flat: Vec<(f64, f64)> = eps.iter().map(|&e| (e, 0.7)).collect();
    let fit0 = rate_regression(&flat)?;
    if (fit.slope - 2.0).abs() > 1e-9 || fit0.slope.abs() > 1e-9 {
        return Err(Error::NotApplicable(format!(
            "rate regression self-test failed: slopes {} and {}",
            fit.slope, fit0.slope
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeReport {
    pub quantity: String,
    pub fit: RateFit,
    /// `(eps, value)` pairs the fit was made on.
    pub data: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub version: String,
    pub seed: u64,
    pub grid: BTreeMap<String, serde_json::Value>,
    pub cells: Vec<Cell>,
    pub slopes: Vec<SlopeReport>,
    pub checks: Vec<Check>,
    pub pass: bool,
    /// Resolved run configuration, filled in by front ends.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl ExperimentReport {
    pub fn new(experiment: &str, seed: u64) -> Self {
        Self {
            experiment: experiment.to_string(),
            version: VERSION.to_string(),
            seed,
            grid: BTreeMap::new(),
            cells: Vec::new(),
            slopes: Vec::new(),
            checks: Vec::new(),
            pass: true,
            config: None,
        }
    }

    pub fn grid_value(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
        self.grid.insert(key.to_string(), v);
    }

    pub fn check(&mut self, name: impl Into<String>, pass: bool, detail: impl Into<String>) {
        self.pass &= pass;
        self.checks.push(Check {
            name: name.into(),
            pass,
            detail: detail.into(),
        });
    }

    /// Fits a slope across cells and records it; a failed fit becomes a
    /// failed check.
    pub fn fit_slope(&mut self, quantity: &str, data: &[(f64, f64)]) -> Option<RateFit> {
        match rate_regression(data) {
            Ok(fit) => {
                self.slopes.push(SlopeReport {
                    quantity: quantity.to_string(),
                    fit,
                    data: data.iter().map(|&(e, y)| [e, y]).collect(),
                });
                Some(fit)
            }
            Err(e) => {
                self.check(format!("{quantity}_fit"), false, e.to_string());
                None
            }
        }
    }

    pub fn slope(&self, quantity: &str) -> Option<&SlopeReport> {
        self.slopes.iter().find(|s| s.quantity == quantity)
    }

    pub fn check_named(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// One row per cell: parameters, then `mean`/`se` per estimate.
    pub fn to_csv(&self) -> String {
        let mut params: Vec<&String> = Vec::new();
        let mut names: Vec<&String> = Vec::new();
        for c in &self.cells {
            for k in c.params.keys() {
                if !params.contains(&k) {
                    params.push(k);
                }
            }
            for e in &c.estimates {
                if !names.contains(&&e.name) {
                    names.push(&e.name);
                }
            }
        }
        let mut s = String::new();
        let mut header: Vec<String> = params.iter().map(|p| p.to_string()).collect();
        for n in &names {
            header.push(format!("{n}_mean"));
            header.push(format!("{n}_se"));
        }
        header.push("censoring_fraction".into());
        s.push_str(&header.join(","));
        s.push('\n');
        for c in &self.cells {
            let mut row: Vec<String> = params
                .iter()
                .map(|p| c.params.get(*p).map_or(String::new(), |v| v.to_string()))
                .collect();
            for n in &names {
                match c.estimate(n) {
                    Some(e) => {
                        row.push(e.mean.to_string());
                        row.push(e.std_error.to_string());
                    }
                    None => {
                        row.push(String::new());
                        row.push(String::new());
                    }
                }
            }
            row.push(c.censoring_fraction.to_string());
            let _ = writeln!(s, "{}", row.join(","));
        }
        s
    }
}

/// Prefixes CSV text with `#` lines carrying the version and the resolved
/// configuration as compact JSON.
pub fn annotate_csv(csv: &str, config: &serde_json::Value) -> String {
    let mut s = format!("# spde-amplitude {VERSION}\n# config {config}\n");
    s.push_str(csv);
    s
}

/// Output of a one-off coefficient computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientReport {
    pub version: String,
    pub coefficients: crate::coeffs::AmplitudeCoefficients,
    /// `nu_tilde - sigma_a / 2`, only when `sigma_b = 0`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lyapunov_exponent: Option<f64>,
    pub config: serde_json::Value,
}

impl CoefficientReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseStream;
    use proptest::prelude::*;

    #[test]
    fn planted_power_law() {
        let pts: Vec<(f64, f64)> = [0.4, 0.2, 0.1].iter().map(|&e| (e, 5.0 * e * e)).collect();
        let f = rate_regression(&pts).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-9);
        assert!((f.intercept - 5f64.ln()).abs() < 1e-9);
        let pts: Vec<(f64, f64)> = [0.4, 0.2, 0.1].iter().map(|&e| (e, 0.3)).collect();
        assert!(rate_regression(&pts).unwrap().slope.abs() < 1e-12);
        regression_selftest().unwrap();
    }

    #[test]
    fn noisy_quarter_power() {
        let mut s = NoiseStream::new(17, 0);
        let pts: Vec<(f64, f64)> = [0.4, 0.2, 0.1]
            .iter()
            .map(|&e: &f64| (e, e.powf(0.25) * (1.0 + 0.05 * s.standard_normal())))
            .collect();
        let f = rate_regression(&pts).unwrap();
        assert!((f.slope - 0.25).abs() < 0.1, "{}", f.slope);
        assert!(f.ci[0] <= f.slope && f.slope <= f.ci[1]);
    }

    #[test]
    fn regression_rejects_bad_input() {
        assert!(rate_regression(&[(0.1, 1.0), (0.2, 2.0)]).is_err());
        assert!(rate_regression(&[(0.1, 1.0), (0.2, 0.0), (0.3, 1.0)]).is_err());
        assert!(rate_regression(&[(0.1, 1.0), (0.1, 2.0), (0.1, 1.0)]).is_err());
    }

    #[test]
    fn sample_statistics() {
        let e = Estimate::from_samples("x", &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(e.mean, 2.5);
        assert!((e.variance - 5.0 / 3.0).abs() < 1e-15);
        assert!((e.std_error - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
        assert!(e.clone().with_reference(2.0).within(1.0));
    }

    #[test]
    fn compensation_recovers_small_terms() {
        let v = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(v), 2.0);
    }

    #[test]
    fn json_and_csv() {
        let mut r = ExperimentReport::new("demo", 3);
        r.grid_value("epsilons", [0.4, 0.2]);
        let mut c = Cell::new([("epsilon", 0.4)], 10, 1);
        c.estimates.push(Estimate::from_samples("err", &[1.0, 3.0]));
        r.cells.push(c);
        r.check("ok", true, "");
        let back = ExperimentReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        let csv = r.to_csv();
        assert_eq!(
            csv.lines().next().unwrap(),
            "epsilon,err_mean,err_se,censoring_fraction"
        );
        assert_eq!(csv.lines().nth(1).unwrap(), "0.4,2,1,0.1");
        r.check("bad", false, "");
        assert!(!r.pass);
    }

    proptest! {
        #[test]
        fn slope_is_scale_invariant(p in -3.0f64..3.0, c in 0.01f64..100.0) {
            let pts: Vec<(f64, f64)> = [0.4, 0.2, 0.1, 0.05].iter().map(|&e: &f64| (e, c * e.powf(p))).collect();
            let f = rate_regression(&pts).unwrap();
            prop_assert!((f.slope - p).abs() < 1e-9);
        }
    }
}
