//! Sparse symmetric tensor `B_{klm} = <B(e_k, e_l), e_m>` of the quadratic
//! nonlinearity.
//!
//! Only the `k <= l` half is stored; reads symmetrize. Text import keeps a
//! record of any pair `(k, l, m)`, `(l, k, m)` supplied with different values
//! so that [`check_assumption3`] can report it.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::SpectralField;
use crate::validation::ValidationReport;

/// Upper bound on mode indices accepted from external input.
pub const MAX_MODES: usize = 1 << 16;

type Key = (usize, usize, usize);

/// A pair of entries that should be equal by symmetry but were supplied with
/// different values. The stored canonical value is their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Asymmetry {
    pub key: Key,
    pub value: f64,
    pub swapped_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BilinearTensor {
    n: usize,
    entries: BTreeMap<Key, f64>,
    asymmetries: Vec<Asymmetry>,
    plan: Contraction,
}

/// Flattened canonical entries for the hot contraction loops (0-based).
#[derive(Debug, Clone, PartialEq, Default)]
struct Contraction {
    k: Vec<u32>,
    l: Vec<u32>,
    m: Vec<u32>,
    value: Vec<f64>,
}

impl BilinearTensor {
    /// The zero tensor on `n` modes.
    pub fn zeros(n: usize) -> Result<Self> {
        Self::from_triples(n, std::iter::empty())
    }

    /// Builds a tensor from `((k, l, m), value)` triples, 1-based.
    ///
    /// Either orientation of `(k, l)` may be given. Supplying the same
    /// oriented key twice is an error; supplying both orientations with
    /// different values is recorded as an asymmetry.
    pub fn from_triples(n: usize, triples: impl IntoIterator<Item = (Key, f64)>) -> Result<Self> {
        if n == 0 || n > MAX_MODES {
            return Err(Error::invalid("n", format!("{n} not in 1..={MAX_MODES}")));
        }
        let mut raw: BTreeMap<Key, f64> = BTreeMap::new();
        for ((k, l, m), v) in triples {
            for idx in [k, l, m] {
                if idx == 0 || idx > n {
                    return Err(Error::invalid(
                        "index",
                        format!("({k}, {l}, {m}) outside 1..={n}"),
                    ));
                }
            }
            if !v.is_finite() {
                return Err(Error::invalid(
                    "value",
                    format!("B_({k},{l},{m}) = {v} is not finite"),
                ));
            }
            if raw.insert((k, l, m), v).is_some() {
                return Err(Error::invalid(
                    "index",
                    format!("duplicate entry ({k}, {l}, {m})"),
                ));
            }
        }

        let mut entries = BTreeMap::new();
        let mut asymmetries = Vec::new();
        for (&(k, l, m), &v) in &raw {
            if k > l {
                if !raw.contains_key(&(l, k, m)) && v != 0.0 {
                    entries.insert((l, k, m), v);
                }
                continue;
            }
            let value = match raw.get(&(l, k, m)) {
                Some(&w) if k != l && w != v => {
                    asymmetries.push(Asymmetry {
                        key: (k, l, m),
                        value: v,
                        swapped_value: w,
                    });
                    0.5 * (v + w)
                }
                _ => v,
            };
            if value != 0.0 {
                entries.insert((k, l, m), value);
            }
        }
        Ok(Self::assemble(n, entries, asymmetries))
    }

    fn assemble(n: usize, entries: BTreeMap<Key, f64>, asymmetries: Vec<Asymmetry>) -> Self {
        let mut plan = Contraction::default();
        for (&(k, l, m), &v) in &entries {
            plan.k.push((k - 1) as u32);
            plan.l.push((l - 1) as u32);
            plan.m.push((m - 1) as u32);
            plan.value.push(v);
        }
        Self {
            n,
            entries,
            asymmetries,
            plan,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// `B_{klm}`, 1-based, symmetric in `(k, l)`.
    pub fn get(&self, k: usize, l: usize, m: usize) -> f64 {
        let key = if k <= l { (k, l, m) } else { (l, k, m) };
        self.entries.get(&key).copied().unwrap_or(0.0)
    }

    /// Stored canonical entries `(k <= l, m) -> value`.
    pub fn entries(&self) -> impl Iterator<Item = (Key, f64)> + '_ {
        self.entries.iter().map(|(&k, &v)| (k, v))
    }

    pub fn nonzeros(&self) -> usize {
        self.entries.len()
    }

    pub fn asymmetries(&self) -> &[Asymmetry] {
        &self.asymmetries
    }

    /// `w_m = sum_{k,l} B_{klm} u_k v_l`.
    pub fn apply(&self, u: &SpectralField, v: &SpectralField) -> Result<SpectralField> {
        u.ensure_len(self.n)?;
        v.ensure_len(self.n)?;
        let mut out = SpectralField::zeros(self.n);
        self.apply_into(u.as_slice(), v.as_slice(), out.as_mut_slice());
        Ok(out)
    }

    /// Slice form of [`apply`](Self::apply); `out` is overwritten.
    pub fn apply_into(&self, u: &[f64], v: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let p = &self.plan;
        for i in 0..p.value.len() {
            let (k, l, m) = (p.k[i] as usize, p.l[i] as usize, p.m[i] as usize);
            let uv = if k == l {
                u[k] * v[k]
            } else {
                u[k] * v[l] + u[l] * v[k]
            };
            out[m] += p.value[i] * uv;
        }
    }

    /// `B(v, v)` into `out`.
    pub fn quadratic_into(&self, v: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let p = &self.plan;
        for i in 0..p.value.len() {
            let (k, l, m) = (p.k[i] as usize, p.l[i] as usize, p.m[i] as usize);
            let vv = if k == l {
                v[k] * v[k]
            } else {
                2.0 * v[k] * v[l]
            };
            out[m] += p.value[i] * vv;
        }
    }

    /// Plain-text triple list, one `k l m value` per line, canonical half only.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (&(k, l, m), v) in &self.entries {
            let _ = writeln!(s, "{k} {l} {m} {v:e}");
        }
        s
    }

    /// Parses a triple list. Blank lines and `#` comments are ignored.
    /// When `n` is `None` the dimension is the largest index seen.
    pub fn parse_text(text: &str, n: Option<usize>) -> Result<Self> {
        let mut triples = Vec::new();
        let mut max_index = 0usize;
        for (i, raw_line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected `k l m value`, found {} fields", fields.len()),
                });
            }
            let mut idx = [0usize; 3];
            for (slot, field) in idx.iter_mut().zip(&fields[..3]) {
                let parsed: usize = field.parse().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("bad index `{field}`"),
                })?;
                if parsed == 0 || parsed > MAX_MODES {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("index {parsed} outside 1..={MAX_MODES}"),
                    });
                }
                *slot = parsed;
            }
            let value: f64 = fields[3].parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad value `{}`", fields[3]),
            })?;
            if !value.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("value `{}` is not finite", fields[3]),
                });
            }
            max_index = max_index.max(idx[0]).max(idx[1]).max(idx[2]);
            triples.push(((idx[0], idx[1], idx[2]), value));
        }
        let n = match n {
            Some(n) if n < max_index => {
                return Err(Error::Parse {
                    line: 0,
                    message: format!("index {max_index} exceeds declared dimension {n}"),
                })
            }
            Some(n) => n,
            None => max_index.max(1),
        };
        Self::from_triples(n, triples)
    }
}

/// Burgers nonlinearity `B(u, v) = (uv)'/2` on `[0, pi]` with Dirichlet
/// conditions, in the sine basis.
///
/// With `normalized` the basis is `sqrt(2/pi) sin(kx)`; otherwise it is the
/// plain `sin(kx)` basis, where every entry is scaled by `sqrt(pi/2)`.
pub fn burgers_tensor(n: usize, normalized: bool) -> Result<BilinearTensor> {
    if n < 2 {
        return Err(Error::invalid(
            "n",
            format!("Burgers tensor needs N >= 2, got {n}"),
        ));
    }
    let prefactor = if normalized {
        1.0 / (2.0 * (2.0 * PI).sqrt())
    } else {
        0.25
    };
    let mut entries = BTreeMap::new();
    for k in 1..=n {
        for l in k..=n {
            if k + l <= n {
                entries.insert((k, l, k + l), prefactor * (k + l) as f64);
            }
            let d = l - k;
            if d >= 1 {
                entries.insert((k, l, d), -prefactor * d as f64);
            }
        }
    }
    Ok(BilinearTensor::assemble(n, entries, Vec::new()))
}

/// Symmetry and centering (`B_{kk1} = 0`) of the nonlinearity.
pub fn check_assumption3(tensor: &BilinearTensor) -> ValidationReport {
    let mut report = ValidationReport::default();
    for a in &tensor.asymmetries {
        let (k, l, m) = a.key;
        report.push(format!(
            "asymmetric pair ({k},{l},{m}) = {} vs ({l},{k},{m}) = {}",
            a.value, a.swapped_value
        ));
    }
    for k in 1..=tensor.n {
        let v = tensor.get(k, k, 1);
        if v != 0.0 {
            report.push(format!("centering violated at ({k},{k},1) = {v}"));
        }
    }
    report
}

pub(crate) fn require_assumption3(tensor: &BilinearTensor) -> Result<()> {
    let report = check_assumption3(tensor);
    if report.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidTensor(report))
    }
}

/// Change to the basis `e'_k = c_k e_k`:
/// `B'_{klm} = B_{klm} c_k c_l / c_m` and `q'_k = q_k / c_k`.
pub fn rescale_basis(
    tensor: &BilinearTensor,
    q: &[f64],
    c: &[f64],
) -> Result<(BilinearTensor, Vec<f64>)> {
    if c.len() != tensor.n {
        return Err(Error::LengthMismatch {
            expected: tensor.n,
            found: c.len(),
        });
    }
    if q.len() != tensor.n {
        return Err(Error::LengthMismatch {
            expected: tensor.n,
            found: q.len(),
        });
    }
    if let Some((i, &value)) = c
        .iter()
        .enumerate()
        .find(|(_, &v)| !(v > 0.0 && v.is_finite()))
    {
        return Err(Error::NonPositiveScale {
            index: i + 1,
            value,
        });
    }
    let entries = tensor
        .entries
        .iter()
        .map(|(&(k, l, m), &v)| ((k, l, m), v * c[k - 1] * c[l - 1] / c[m - 1]))
        .collect();
    let asymmetries = tensor
        .asymmetries
        .iter()
        .map(|a| {
            let (k, l, m) = a.key;
            let s = c[k - 1] * c[l - 1] / c[m - 1];
            Asymmetry {
                key: a.key,
                value: a.value * s,
                swapped_value: a.swapped_value * s,
            }
        })
        .collect();
    let q_scaled = q.iter().zip(c).map(|(q, c)| q / c).collect();
    Ok((
        BilinearTensor::assemble(tensor.n, entries, asymmetries),
        q_scaled,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const P: f64 = 0.398_942_280_401_432_7; // 1/sqrt(2 pi)

    #[test]
    fn burgers_entries_match_closed_form() {
        let t = burgers_tensor(8, true).unwrap();
        assert!((t.get(1, 1, 2) - P).abs() < 1e-15);
        assert!((t.get(2, 1, 1) + P / 2.0).abs() < 1e-15);
        assert!((t.get(1, 2, 1) + P / 2.0).abs() < 1e-15);
        assert_eq!(t.get(2, 2, 1), 0.0);
        assert!((t.get(2, 3, 5) - 5.0 * P / 2.0).abs() < 1e-15);
    }

    #[test]
    fn burgers_requires_two_modes() {
        assert!(burgers_tensor(1, true).is_err());
    }

    #[test]
    fn burgers_tensor_is_symmetric_centered_and_sparse() {
        for n in [2, 3, 7, 32] {
            let t = burgers_tensor(n, n % 2 == 0).unwrap();
            assert!(check_assumption3(&t).is_empty());
            for ((k, l, m), _) in t.entries() {
                assert!(k <= l);
                assert!(m == k + l || m == l - k, "({k},{l},{m})");
                assert_eq!(t.get(k, l, m), t.get(l, k, m));
            }
            for k in 1..=n {
                assert_eq!(t.get(k, k, 1), 0.0);
            }
        }
    }

    #[test]
    fn apply_to_slow_unit_vector_hits_mode_two() {
        let t = burgers_tensor(5, true).unwrap();
        let e1 = SpectralField::unit(5, 1);
        let w = t.apply(&e1, &e1).unwrap();
        assert!((w.get(2) - t.get(1, 1, 2)).abs() < 1e-15);
        for k in [1, 3, 4, 5] {
            assert_eq!(w.get(k), 0.0);
        }
        let zero = t.apply(&SpectralField::zeros(5), &e1).unwrap();
        assert!(zero.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn apply_rejects_dimension_mismatch() {
        let t = burgers_tensor(4, true).unwrap();
        assert!(t
            .apply(&SpectralField::zeros(3), &SpectralField::zeros(4))
            .is_err());
    }

    #[test]
    fn injected_centering_violation_is_named() {
        let mut triples: Vec<_> = burgers_tensor(3, true).unwrap().entries().collect();
        triples.push(((2, 2, 1), 0.5));
        let t = BilinearTensor::from_triples(3, triples).unwrap();
        let r = check_assumption3(&t);
        assert!(r.contains("(2,2,1)"), "{r}");
    }

    #[test]
    fn injected_asymmetry_is_named() {
        let t = BilinearTensor::from_triples(3, [((1, 2, 1), 0.1), ((2, 1, 1), 0.3)]).unwrap();
        let r = check_assumption3(&t);
        assert!(r.contains("(1,2,1)") && r.contains("(2,1,1)"), "{r}");
        assert!((t.get(2, 1, 1) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn duplicate_triple_is_rejected() {
        assert!(BilinearTensor::from_triples(3, [((1, 2, 3), 1.0), ((1, 2, 3), 1.0)]).is_err());
    }

    #[test]
    fn unit_rescale_is_identity() {
        let t = burgers_tensor(6, true).unwrap();
        let q = vec![0.0, 1.0, 0.5, 0.0, 2.0, 1.0];
        let (t2, q2) = rescale_basis(&t, &q, &[1.0; 6]).unwrap();
        assert_eq!(t2, t);
        assert_eq!(q2, q);
    }

    #[test]
    fn rescaled_normalized_burgers_is_plain_sine_basis() {
        let n = 16;
        let c = vec![(PI / 2.0).sqrt(); n];
        let (t, _) = rescale_basis(&burgers_tensor(n, true).unwrap(), &vec![0.0; n], &c).unwrap();
        let plain = burgers_tensor(n, false).unwrap();
        assert_eq!(t.nonzeros(), plain.nonzeros());
        for ((k, l, m), v) in plain.entries() {
            assert!((t.get(k, l, m) - v).abs() < 1e-15, "({k},{l},{m})");
        }
    }

    #[test]
    fn nonpositive_scale_is_rejected() {
        let t = burgers_tensor(3, true).unwrap();
        let err = rescale_basis(&t, &[0.0; 3], &[1.0, 0.0, 1.0]).unwrap_err();
        assert!(matches!(err, Error::NonPositiveScale { index: 2, .. }));
    }

    #[test]
    fn text_format_round_trips() {
        let t = burgers_tensor(9, true).unwrap();
        let back = BilinearTensor::parse_text(&t.to_text(), Some(9)).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn text_parser_reports_line_numbers() {
        let err = BilinearTensor::parse_text("# header\n1 1 2 0.5\n1 2 x 0.1\n", None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        assert!(BilinearTensor::parse_text("0 1 1 1.0", None).is_err());
        assert!(BilinearTensor::parse_text("1 1 2 nan", None).is_err());
        assert!(BilinearTensor::parse_text("1 1 4 1.0", Some(3)).is_err());
        let t = BilinearTensor::parse_text("1 1 2 0.5 # trailing\n\n", None).unwrap();
        assert_eq!(t.n(), 2);
        assert_eq!(t.get(1, 1, 2), 0.5);
    }

    proptest! {
        #[test]
        fn apply_is_exactly_symmetric(
            u in prop::collection::vec(-10.0f64..10.0, 12),
            v in prop::collection::vec(-10.0f64..10.0, 12),
        ) {
            let t = burgers_tensor(12, true).unwrap();
            let u = SpectralField::from_vec(u);
            let v = SpectralField::from_vec(v);
            prop_assert_eq!(t.apply(&u, &v).unwrap(), t.apply(&v, &u).unwrap());
            let mut q = vec![0.0; 12];
            t.quadratic_into(u.as_slice(), &mut q);
            let full = t.apply(&u, &u).unwrap();
            for (a, b) in q.iter().zip(full.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn rescale_round_trip_restores_tensor(c in prop::collection::vec(0.2f64..5.0, 10)) {
            let t = burgers_tensor(10, true).unwrap();
            let q: Vec<f64> = (0..10).map(|k| if k == 0 { 0.0 } else { 1.0 / k as f64 }).collect();
            let (t1, q1) = rescale_basis(&t, &q, &c).unwrap();
            let inv: Vec<f64> = c.iter().map(|c| 1.0 / c).collect();
            let (t2, q2) = rescale_basis(&t1, &q1, &inv).unwrap();
            for ((k, l, m), v) in t.entries() {
                prop_assert!((t2.get(k, l, m) - v).abs() <= 1e-14);
            }
            for (a, b) in q.iter().zip(&q2) {
                prop_assert!((a - b).abs() <= 1e-14);
            }
        }
    }
}
