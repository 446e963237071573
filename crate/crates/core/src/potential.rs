//! Alignment potentials between a predicted feature map `h` and a conditioning
//! feature map `h*`, both `N x d`.
//!
//! - IPA: `V = sum_nm P_nm <h_n, h*_m>` for a weight matrix `P`. The average
//!   concept variant uses the h-dependent weights `1 / (N^2 |mean h| |mean h*|)`,
//!   which makes it the cosine between the two spatial means.
//! - SPA: `V = T log sum_n exp(<h_n, h*_i> / T)` for a single target row.
//! - Composite: a nonnegative weighted sum of the above.
//!
//! Gradients are analytic and taken with respect to `h`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::feature::{FeatureMap, DEGENERATE_NORM};

#[derive(Clone, Debug, PartialEq)]
pub enum WeightKind {
    FullMap,
    /// 1-based indices of the kept patches.
    Mask(Vec<usize>),
    AverageConcept,
    /// 1-based index of the conditioning patch.
    SingleConcept(usize),
    Custom,
}

/// `P` together with the configuration it came from. The average-concept kind
/// carries no entries.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMatrix {
    kind: WeightKind,
    n: usize,
    entries: Option<Array2<f64>>,
}

impl WeightMatrix {
    pub fn kind(&self) -> &WeightKind {
        &self.kind
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> Option<&Array2<f64>> {
        self.entries.as_ref()
    }

    /// A user-supplied nonnegative `N x N` matrix.
    pub fn custom(entries: Array2<f64>) -> Result<Self> {
        let (r, c) = entries.dim();
        if r != c || r == 0 {
            return Err(Error::Shape(format!("weight matrix must be square and non-empty, got {r}x{c}")));
        }
        if entries.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::Invalid("weight matrix entries must be finite and nonnegative".into()));
        }
        Ok(WeightMatrix {
            kind: WeightKind::Custom,
            n: r,
            entries: Some(entries),
        })
    }
}

/// Builds `P` for one of the standard configurations over `n` patches.
pub fn make_weight_matrix(kind: WeightKind, n: usize) -> Result<WeightMatrix> {
    if n == 0 {
        return Err(Error::Invalid("patch count must be at least 1".into()));
    }
    let entries = match &kind {
        WeightKind::FullMap => Some(Array2::eye(n) / n as f64),
        WeightKind::Mask(set) => {
            if set.is_empty() {
                return Err(Error::Invalid("mask selects no patches".into()));
            }
            let mut sorted = set.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != set.len() {
                return Err(Error::Invalid(format!("mask {set:?} repeats an index")));
            }
            let mut p = Array2::zeros((n, n));
            for &i in set {
                check_index(i, n)?;
                p[[i - 1, i - 1]] = 1.0 / set.len() as f64;
            }
            Some(p)
        }
        WeightKind::SingleConcept(i) => {
            check_index(*i, n)?;
            let mut p = Array2::zeros((n, n));
            p.column_mut(i - 1).fill(1.0 / n as f64);
            Some(p)
        }
        WeightKind::AverageConcept => None,
        WeightKind::Custom => {
            return Err(Error::Invalid("use WeightMatrix::custom for explicit weights".into()));
        }
    };
    Ok(WeightMatrix { kind, n, entries })
}

fn check_index(i: usize, n: usize) -> Result<()> {
    if i == 0 || i > n {
        return Err(Error::Invalid(format!("patch index {i} outside 1..={n}")));
    }
    Ok(())
}

/// A potential bound to its conditioning features.
#[derive(Clone, Debug, PartialEq)]
pub enum PotentialSpec {
    Ipa { weights: WeightMatrix, target: FeatureMap },
    Spa { target: Array1<f64>, temperature: f64 },
    Composite(Vec<(f64, PotentialSpec)>),
}

impl PotentialSpec {
    pub fn ipa(weights: WeightMatrix, target: FeatureMap) -> Result<Self> {
        if weights.size() != target.len() {
            return Err(Error::Shape(format!(
                "weight matrix over {} patches, conditioning map has {}",
                weights.size(),
                target.len()
            )));
        }
        Ok(PotentialSpec::Ipa { weights, target })
    }

    pub fn spa(target: Array1<f64>, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Invalid(format!("SPA temperature must be > 0, got {temperature}")));
        }
        Ok(PotentialSpec::Spa { target, temperature })
    }

    pub fn composite(terms: Vec<(f64, PotentialSpec)>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::Invalid("composite potential needs at least one term".into()));
        }
        if terms.iter().any(|(w, _)| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Invalid("composite weights must be finite and nonnegative".into()));
        }
        Ok(PotentialSpec::Composite(terms))
    }
}

fn check_map(h: &FeatureMap, n: usize, d: usize) -> Result<()> {
    if h.len() != n || h.dim() != d {
        return Err(Error::Shape(format!(
            "feature map is {}x{}, potential expects {n}x{d}",
            h.len(),
            h.dim()
        )));
    }
    Ok(())
}

fn mean_row(rows: &Array2<f64>) -> Array1<f64> {
    rows.mean_axis(ndarray::Axis(0)).expect("non-empty map")
}

fn checked_norm(v: &Array1<f64>) -> Result<f64> {
    let norm = v.dot(v).sqrt();
    if !(norm >= DEGENERATE_NORM) {
        return Err(Error::Degenerate {
            norm,
            floor: DEGENERATE_NORM,
        });
    }
    Ok(norm)
}

/// Similarities `<h_n, target>` for every patch.
pub fn similarities(h: &FeatureMap, target: ArrayView1<f64>) -> Array1<f64> {
    h.rows().dot(&target)
}

/// `softmax(s / T)` with a max shift.
pub fn softmax(s: &Array1<f64>, temperature: f64) -> Array1<f64> {
    let max = s.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut w = s.mapv(|v| ((v - max) / temperature).exp());
    let total = w.sum();
    w /= total;
    w
}

/// The scalar potential.
pub fn eval_potential(spec: &PotentialSpec, h: &FeatureMap) -> Result<f64> {
    match spec {
        PotentialSpec::Ipa { weights, target } => {
            check_map(h, target.len(), target.dim())?;
            match weights.entries() {
                Some(p) => {
                    let gram = h.rows().dot(&target.rows().t());
                    Ok((p * &gram).sum())
                }
                None => {
                    let a = mean_row(h.rows());
                    let b = mean_row(target.rows());
                    Ok(a.dot(&b) / (checked_norm(&a)? * checked_norm(&b)?))
                }
            }
        }
        PotentialSpec::Spa { target, temperature } => {
            if h.dim() != target.len() || h.is_empty() {
                return Err(Error::Shape(format!(
                    "feature rows have dimension {}, SPA target has {}",
                    h.dim(),
                    target.len()
                )));
            }
            let s = similarities(h, target.view());
            let max = s.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let sum: f64 = s.iter().map(|&v| ((v - max) / temperature).exp()).sum();
            Ok(max + temperature * sum.ln())
        }
        PotentialSpec::Composite(terms) => terms
            .iter()
            .map(|(w, p)| Ok(w * eval_potential(p, h)?))
            .sum(),
    }
}

/// `dV/dh`, shaped like `h`.
pub fn grad_potential(spec: &PotentialSpec, h: &FeatureMap) -> Result<Array2<f64>> {
    match spec {
        PotentialSpec::Ipa { weights, target } => {
            check_map(h, target.len(), target.dim())?;
            match weights.entries() {
                Some(p) => Ok(p.dot(target.rows())),
                None => {
                    let n = h.len() as f64;
                    let a = mean_row(h.rows());
                    let b = mean_row(target.rows());
                    let (na, nb) = (checked_norm(&a)?, checked_norm(&b)?);
                    let cos = a.dot(&b) / (na * nb);
                    // d cos(a, b) / da = (b/|b| - cos a/|a|) / |a|, and da/dh_n = 1/N.
                    let row = (&b / nb - &(&a * (cos / na))) / (na * n);
                    let mut g = Array2::zeros(h.rows().raw_dim());
                    for mut r in g.rows_mut() {
                        r.assign(&row);
                    }
                    Ok(g)
                }
            }
        }
        PotentialSpec::Spa { target, temperature } => {
            if h.dim() != target.len() || h.is_empty() {
                return Err(Error::Shape(format!(
                    "feature rows have dimension {}, SPA target has {}",
                    h.dim(),
                    target.len()
                )));
            }
            let w = softmax(&similarities(h, target.view()), *temperature);
            let mut g = Array2::zeros(h.rows().raw_dim());
            for (mut row, wk) in g.rows_mut().into_iter().zip(w.iter()) {
                row.assign(&(target * *wk));
            }
            Ok(g)
        }
        PotentialSpec::Composite(terms) => {
            let mut g = Array2::zeros(h.rows().raw_dim());
            for (w, p) in terms {
                g.scaled_add(*w, &grad_potential(p, h)?);
            }
            Ok(g)
        }
    }
}

/// SPA gradient assembled as `N * softmax_k * (IPA single-concept gradient)_k`,
/// the IPA weights being `P_nm = 1[m = i] / N`.
pub fn spa_grad_via_ipa(target: ArrayView1<f64>, temperature: f64, h: &FeatureMap) -> Result<Array2<f64>> {
    let n = h.len();
    let mut conditioning = Array2::zeros((n, target.len()));
    conditioning.row_mut(0).assign(&target);
    let ipa = PotentialSpec::ipa(
        make_weight_matrix(WeightKind::SingleConcept(1), n)?,
        FeatureMap::new(conditioning),
    )?;
    let base = grad_potential(&ipa, h)?;
    let w = softmax(&similarities(h, target), temperature);
    let mut g = base;
    for (mut row, wk) in g.rows_mut().into_iter().zip(w.iter()) {
        row *= n as f64 * wk;
    }
    Ok(g)
}

/// Textual potential configuration, bound to conditioning features later.
///
/// Grammar: `ipa:full`, `ipa:mask=2,3`, `ipa:single=1`, `ipa:avg`,
/// `spa:i=1,T=0.1`, and composites such as
/// `comp:0.7*ipa:avg+0.3*spa:i=1,T=0.1`. Indices are 1-based.
#[derive(Clone, Debug, PartialEq)]
pub enum PotentialTemplate {
    IpaFull,
    IpaMask(Vec<usize>),
    IpaSingle(usize),
    IpaAverage,
    Spa { index: usize, temperature: f64 },
    Composite(Vec<(f64, PotentialTemplate)>),
}

impl PotentialTemplate {
    /// Attaches the conditioning feature map `h*`.
    pub fn bind(&self, target: &FeatureMap) -> Result<PotentialSpec> {
        let n = target.len();
        let ipa = |kind| PotentialSpec::ipa(make_weight_matrix(kind, n)?, target.clone());
        match self {
            PotentialTemplate::IpaFull => ipa(WeightKind::FullMap),
            PotentialTemplate::IpaMask(set) => ipa(WeightKind::Mask(set.clone())),
            PotentialTemplate::IpaSingle(i) => ipa(WeightKind::SingleConcept(*i)),
            PotentialTemplate::IpaAverage => ipa(WeightKind::AverageConcept),
            PotentialTemplate::Spa { index, temperature } => {
                check_index(*index, n)?;
                PotentialSpec::spa(target.row(index - 1).to_owned(), *temperature)
            }
            PotentialTemplate::Composite(terms) => PotentialSpec::composite(
                terms
                    .iter()
                    .map(|(w, t)| Ok((*w, t.bind(target)?)))
                    .collect::<Result<Vec<_>>>()?,
            ),
        }
    }

    fn parse_simple(text: &str, whole: &str) -> Result<Self> {
        let err = |reason: String| Error::PotentialSyntax {
            text: whole.to_string(),
            reason,
        };
        let parse_index = |s: &str| -> Result<usize> {
            let i: usize = s.trim().parse().map_err(|_| err(format!("bad patch index `{s}`")))?;
            if i == 0 {
                return Err(err("patch indices are 1-based".into()));
            }
            Ok(i)
        };
        let (family, rest) = text
            .split_once(':')
            .ok_or_else(|| err(format!("`{text}` lacks a family prefix (ipa:, spa:, comp:)")))?;
        match family.trim() {
            "ipa" => match rest.trim() {
                "full" => Ok(PotentialTemplate::IpaFull),
                "avg" => Ok(PotentialTemplate::IpaAverage),
                other => {
                    if let Some(list) = other.strip_prefix("mask=") {
                        let set = list.split(',').map(parse_index).collect::<Result<Vec<_>>>()?;
                        Ok(PotentialTemplate::IpaMask(set))
                    } else if let Some(i) = other.strip_prefix("single=") {
                        Ok(PotentialTemplate::IpaSingle(parse_index(i)?))
                    } else {
                        Err(err(format!("unknown IPA configuration `{other}`")))
                    }
                }
            },
            "spa" => {
                let (mut index, mut temperature) = (None, None);
                for field in rest.split(',') {
                    let (k, v) = field
                        .split_once('=')
                        .ok_or_else(|| err(format!("expected key=value, found `{field}`")))?;
                    match k.trim() {
                        "i" => index = Some(parse_index(v)?),
                        "T" => {
                            let t: f64 = v.trim().parse().map_err(|_| err(format!("bad temperature `{v}`")))?;
                            if !(t > 0.0 && t.is_finite()) {
                                return Err(err("temperature must be > 0".into()));
                            }
                            temperature = Some(t);
                        }
                        other => return Err(err(format!("unknown SPA key `{other}`"))),
                    }
                }
                Ok(PotentialTemplate::Spa {
                    index: index.ok_or_else(|| err("SPA needs i=<index>".into()))?,
                    temperature: temperature.ok_or_else(|| err("SPA needs T=<temperature>".into()))?,
                })
            }
            "comp" => Err(err("composites cannot be nested".into())),
            other => Err(err(format!("unknown potential family `{other}`"))),
        }
    }
}

/// Splits composite terms on `+`, ignoring exponent signs such as `1e+3`.
fn split_terms(s: &str) -> Vec<&str> {
    let bytes = s.as_bytes();
    let mut out = Vec::new();
    let mut start = 0;
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'+' && i > 0 && !matches!(bytes[i - 1], b'e' | b'E') {
            out.push(&s[start..i]);
            start = i + 1;
        }
    }
    out.push(&s[start..]);
    out
}

impl FromStr for PotentialTemplate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let text = s.trim();
        let err = |reason: String| Error::PotentialSyntax {
            text: s.to_string(),
            reason,
        };
        if let Some(body) = text.strip_prefix("comp:") {
            let mut terms = Vec::new();
            for term in split_terms(body) {
                let (w, inner) = term
                    .split_once('*')
                    .ok_or_else(|| err(format!("composite term `{term}` needs the form <weight>*<potential>")))?;
                let w: f64 = w.trim().parse().map_err(|_| err(format!("bad weight `{w}`")))?;
                if !(w >= 0.0 && w.is_finite()) {
                    return Err(err(format!("composite weight {w} must be >= 0")));
                }
                terms.push((w, Self::parse_simple(inner.trim(), s)?));
            }
            return Ok(PotentialTemplate::Composite(terms));
        }
        Self::parse_simple(text, s)
    }
}

impl fmt::Display for PotentialTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PotentialTemplate::IpaFull => write!(f, "ipa:full"),
            PotentialTemplate::IpaAverage => write!(f, "ipa:avg"),
            PotentialTemplate::IpaSingle(i) => write!(f, "ipa:single={i}"),
            PotentialTemplate::IpaMask(set) => {
                let list: Vec<String> = set.iter().map(|i| i.to_string()).collect();
                write!(f, "ipa:mask={}", list.join(","))
            }
            PotentialTemplate::Spa { index, temperature } => write!(f, "spa:i={index},T={temperature:?}"),
            PotentialTemplate::Composite(terms) => {
                write!(f, "comp:")?;
                for (k, (w, t)) in terms.iter().enumerate() {
                    if k > 0 {
                        write!(f, "+")?;
                    }
                    write!(f, "{w:?}*{t}")?;
                }
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn unit(rows: Array2<f64>) -> FeatureMap {
        FeatureMap::normalize(rows).unwrap()
    }

    #[test]
    fn weight_matrix_configurations() {
        let full = make_weight_matrix(WeightKind::FullMap, 1).unwrap();
        assert_eq!(full.entries().unwrap(), &array![[1.0]]);
        let mask = make_weight_matrix(WeightKind::Mask(vec![2]), 3).unwrap();
        assert_eq!(
            mask.entries().unwrap(),
            &array![[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]]
        );
        let single = make_weight_matrix(WeightKind::SingleConcept(1), 2).unwrap();
        assert_eq!(single.entries().unwrap(), &array![[0.5, 0.0], [0.5, 0.0]]);
        assert!(make_weight_matrix(WeightKind::AverageConcept, 4).unwrap().entries().is_none());
        for kind in [WeightKind::FullMap, WeightKind::Mask(vec![1, 3]), WeightKind::SingleConcept(2)] {
            let p = make_weight_matrix(kind, 4).unwrap();
            assert!((p.entries().unwrap().sum() - 1.0).abs() <= 1e-9);
        }
        assert!(make_weight_matrix(WeightKind::Mask(vec![]), 3).is_err());
        assert!(make_weight_matrix(WeightKind::Mask(vec![4]), 3).is_err());
        assert!(make_weight_matrix(WeightKind::SingleConcept(0), 3).is_err());
        assert!(make_weight_matrix(WeightKind::SingleConcept(3), 2).is_err());
        assert!(WeightMatrix::custom(array![[0.5, -0.1], [0.0, 0.6]]).is_err());
    }

    #[test]
    fn ipa_self_similarity_is_one() {
        let h = unit(array![[1.0, 2.0, 0.5], [-0.3, 0.1, 0.9]]);
        let spec = PotentialTemplate::IpaFull.bind(&h).unwrap();
        assert!((eval_potential(&spec, &h).unwrap() - 1.0).abs() < 1e-15);
        let g = grad_potential(&spec, &h).unwrap();
        assert_eq!(g, h.rows() / 2.0);
    }

    #[test]
    fn spa_single_patch_is_the_dot_product() {
        let h = unit(array![[0.6, 0.8]]);
        let target = array![0.0, 1.0];
        for t in [1e-3, 0.1, 1.0, 10.0, 1e3] {
            let spec = PotentialSpec::spa(target.clone(), t).unwrap();
            assert!((eval_potential(&spec, &h).unwrap() - 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn spa_reference_value() {
        let h = FeatureMap::new(array![[1.0, 0.0], [0.0, 1.0]]);
        let spec = PotentialSpec::spa(array![1.0, 0.0], 1.0).unwrap();
        let expected = (1f64.exp() + 1.0).ln();
        assert!((eval_potential(&spec, &h).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 1.31326).abs() < 1e-5);
    }

    #[test]
    fn spa_gradient_symbolic_two_patches() {
        // sims s = (0.6, 0), T = 0.5: weights e^{1.2}/(e^{1.2}+1), 1/(e^{1.2}+1).
        let h = FeatureMap::new(array![[0.6, 0.8], [0.0, 1.0]]);
        let target = array![1.0, 0.0];
        let spec = PotentialSpec::spa(target.clone(), 0.5).unwrap();
        let g = grad_potential(&spec, &h).unwrap();
        let z = 1.2f64.exp() + 1.0;
        let expected = array![[1.2f64.exp() / z, 0.0], [1.0 / z, 0.0]];
        assert!((&g - &expected).iter().all(|d| d.abs() < 1e-15));
        let via = spa_grad_via_ipa(target.view(), 0.5, &h).unwrap();
        assert!((&g - &via).iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn average_concept_is_cosine_of_means() {
        let h = FeatureMap::new(array![[1.0, 0.0], [1.0, 2.0]]);
        let hs = FeatureMap::new(array![[0.0, 1.0], [0.0, 3.0]]);
        let spec = PotentialTemplate::IpaAverage.bind(&hs).unwrap();
        let v = eval_potential(&spec, &h).unwrap();
        assert!((v - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        let zero = FeatureMap::new(array![[1.0, 0.0], [-1.0, 0.0]]);
        assert!(matches!(eval_potential(&spec, &zero), Err(Error::Degenerate { .. })));
        assert!(matches!(grad_potential(&spec, &zero), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn composite_is_weighted_sum() {
        let h = unit(array![[1.0, 0.2], [0.3, -1.0]]);
        let hs = unit(array![[0.5, 0.5], [1.0, 0.0]]);
        let comp: PotentialTemplate = "comp:0.7*ipa:avg+0.3*spa:i=1,T=0.1".parse().unwrap();
        let spec = comp.bind(&hs).unwrap();
        let a = eval_potential(&PotentialTemplate::IpaAverage.bind(&hs).unwrap(), &h).unwrap();
        let b = eval_potential(&PotentialTemplate::Spa { index: 1, temperature: 0.1 }.bind(&hs).unwrap(), &h).unwrap();
        assert!((eval_potential(&spec, &h).unwrap() - (0.7 * a + 0.3 * b)).abs() < 1e-15);
    }

    #[test]
    fn shape_errors() {
        let h = unit(array![[1.0, 0.0]]);
        let hs = unit(array![[1.0, 0.0], [0.0, 1.0]]);
        let spec = PotentialTemplate::IpaFull.bind(&hs).unwrap();
        assert!(matches!(eval_potential(&spec, &h), Err(Error::Shape(_))));
        let spa = PotentialSpec::spa(array![1.0, 0.0, 0.0], 1.0).unwrap();
        assert!(matches!(grad_potential(&spa, &h), Err(Error::Shape(_))));
        assert!(PotentialSpec::spa(array![1.0], 0.0).is_err());
        assert!(PotentialSpec::composite(vec![]).is_err());
        assert!(PotentialTemplate::Spa { index: 3, temperature: 1.0 }.bind(&hs).is_err());
    }

    #[test]
    fn parse_examples() {
        use PotentialTemplate::*;
        let cases = [
            ("ipa:full", IpaFull),
            ("ipa:mask=2,3", IpaMask(vec![2, 3])),
            ("ipa:single=1", IpaSingle(1)),
            ("ipa:avg", IpaAverage),
            ("spa:i=1,T=0.1", Spa { index: 1, temperature: 0.1 }),
            ("spa:T=1e+3,i=2", Spa { index: 2, temperature: 1e3 }),
            (
                "comp:0.7*ipa:avg+0.3*spa:i=1,T=0.1",
                Composite(vec![(0.7, IpaAverage), (0.3, Spa { index: 1, temperature: 0.1 })]),
            ),
        ];
        for (text, expected) in cases {
            assert_eq!(text.parse::<PotentialTemplate>().unwrap(), expected, "{text}");
        }
        for bad in [
            "ipa", "ipa:foo", "spa:i=1", "spa:i=0,T=1", "spa:i=1,T=-1", "xyz:full", "comp:ipa:full",
            "comp:-1*ipa:full", "comp:1*comp:1*ipa:full", "ipa:mask=",
        ] {
            assert!(bad.parse::<PotentialTemplate>().is_err(), "{bad}");
        }
    }

    fn template() -> impl Strategy<Value = PotentialTemplate> {
        let simple = prop_oneof![
            Just(PotentialTemplate::IpaFull),
            Just(PotentialTemplate::IpaAverage),
            (1usize..9).prop_map(PotentialTemplate::IpaSingle),
            prop::collection::vec(1usize..9, 1..4).prop_map(PotentialTemplate::IpaMask),
            (1usize..9, 1e-4f64..1e4).prop_map(|(index, temperature)| PotentialTemplate::Spa { index, temperature }),
        ];
        prop_oneof![
            simple.clone(),
            prop::collection::vec((0.0f64..10.0, simple), 1..4).prop_map(PotentialTemplate::Composite),
        ]
    }

    proptest! {
        #[test]
        fn text_form_round_trips(t in template()) {
            let text = t.to_string();
            prop_assert_eq!(text.parse::<PotentialTemplate>().unwrap(), t);
        }

        #[test]
        fn ipa_is_bounded_for_unit_rows(
            n in 1usize..6,
            seed in prop::collection::vec(-1.0f64..1.0, 6 * 3 * 2),
            kind in 0usize..3,
        ) {
            let d = 3;
            let rows = |off: usize| Array2::from_shape_fn((n, d), |(i, j)| seed[off + i * d + j] + 1e-3);
            let (Ok(h), Ok(hs)) = (FeatureMap::normalize(rows(0)), FeatureMap::normalize(rows(18))) else {
                return Ok(());
            };
            let kind = match kind {
                0 => WeightKind::FullMap,
                1 => WeightKind::Mask(vec![1]),
                _ => WeightKind::SingleConcept(n),
            };
            let spec = PotentialSpec::ipa(make_weight_matrix(kind, n).unwrap(), hs).unwrap();
            prop_assert!(eval_potential(&spec, &h).unwrap().abs() <= 1.0 + 1e-12);
        }
    }
}
