//! Two-sample statistics and model diagnostics.

use std::cmp::Ordering;

use rand::seq::index;
use rand::Rng;
use serde::Serialize;

use crate::batch::{Point2, SampleBatch};
use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::feature::FeatureMap;
use crate::net::ModelParams;
use crate::potential::{make_weight_matrix, PotentialSpec, WeightKind};
use crate::rng::{stream, Role};
use crate::sampler::{sample_sde, Guidance, GuidanceConvention, SamplerConfig};
use crate::toy::{self, Cell};

/// Default per-side cap for all-pairs statistics.
pub const PAIR_CAP: usize = 4000;
const ROW_CHUNK: usize = 64;

fn lex(a: &Point2, b: &Point2) -> Ordering {
    a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1]))
}

/// Sorted copy, subsampled to `cap` points with a seeded draw that depends
/// only on the length. Sorting first makes the statistic invariant under
/// permutations of the input, and both sides use the same draw so equal
/// multisets give exactly zero.
fn prepare(points: &[Point2], cap: usize, seed: u64) -> Vec<Point2> {
    let mut sorted = points.to_vec();
    sorted.sort_by(lex);
    if sorted.len() <= cap {
        return sorted;
    }
    let mut picks = index::sample(&mut stream(seed, Role::Subsample, 0), sorted.len(), cap).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|i| sorted[i]).collect()
}

fn mean_distance(x: &[Point2], y: &[Point2], par: Parallelism) -> f64 {
    let partial = par.map_chunks(x, ROW_CHUNK, |_, rows| {
        let mut acc = 0.0;
        for p in rows {
            let mut row = 0.0;
            for q in y {
                row += ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
            }
            acc += row;
        }
        acc
    });
    partial.into_iter().sum::<f64>() / (x.len() as f64 * y.len() as f64)
}

/// `2 E|A - B| - E|A - A'| - E|B - B'|` as a V-statistic, clamped at 0.
pub fn energy_distance(a: &SampleBatch, b: &SampleBatch) -> Result<f64> {
    energy_distance_with(&a.points, &b.points, PAIR_CAP, 0, Parallelism::default())
}

pub fn energy_distance_with(a: &[Point2], b: &[Point2], cap: usize, seed: u64, par: Parallelism) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Invalid("energy distance needs two non-empty batches".into()));
    }
    if cap == 0 {
        return Err(Error::Invalid("subsample cap must be >= 1".into()));
    }
    let a = prepare(a, cap, seed);
    let b = prepare(b, cap, seed);
    let ab = mean_distance(&a, &b, par);
    let aa = mean_distance(&a, &a, par);
    let bb = mean_distance(&b, &b, par);
    let e = 2.0 * ab - aa - bb;
    if !e.is_finite() {
        return Err(Error::NonFinite("energy distance".into()));
    }
    Ok(e.max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GridSettings {
    pub lo: f64,
    pub hi: f64,
    /// Cells along x1 and x2.
    pub resolution: [usize; 2],
    pub smoothing: f64,
}

impl Default for GridSettings {
    fn default() -> Self {
        GridSettings {
            lo: -1.5,
            hi: 1.5,
            resolution: [40, 40],
            smoothing: 1e-4,
        }
    }
}

/// Counts over a square grid; points outside are clamped into boundary cells.
#[derive(Clone, Debug, PartialEq)]
pub struct GridHistogram {
    pub settings: GridSettings,
    pub counts: Vec<u64>,
    pub total: u64,
}

impl GridHistogram {
    pub fn new(points: &[Point2], settings: GridSettings) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Invalid("histogram of an empty batch".into()));
        }
        let [nx, ny] = settings.resolution;
        if nx == 0 || ny == 0 || !(settings.hi > settings.lo) || !(settings.smoothing > 0.0) {
            return Err(Error::Invalid(format!("bad grid settings {settings:?}")));
        }
        let mut counts = vec![0u64; nx * ny];
        let width = settings.hi - settings.lo;
        let bin = |v: f64, n: usize| -> usize {
            let k = ((v - settings.lo) / width * n as f64).floor();
            if k.is_nan() || k < 0.0 {
                0
            } else {
                (k as usize).min(n - 1)
            }
        };
        for p in points {
            counts[bin(p[1], ny) * nx + bin(p[0], nx)] += 1;
        }
        Ok(GridHistogram {
            settings,
            counts,
            total: points.len() as u64,
        })
    }

    /// `(c / n + eps) / (1 + K eps)` per cell.
    pub fn masses(&self) -> Vec<f64> {
        let eps = self.settings.smoothing;
        let k = self.counts.len() as f64;
        let n = self.total as f64;
        self.counts.iter().map(|&c| (c as f64 / n + eps) / (1.0 + k * eps)).collect()
    }
}

/// `sum (p - q)(ln p - ln q)` over smoothed grid masses.
pub fn symmetric_kl_grid(a: &SampleBatch, b: &SampleBatch, grid: GridSettings) -> Result<f64> {
    symmetric_kl_points(&a.points, &b.points, grid)
}

pub fn symmetric_kl_points(a: &[Point2], b: &[Point2], grid: GridSettings) -> Result<f64> {
    let p = GridHistogram::new(a, grid)?.masses();
    let q = GridHistogram::new(b, grid)?.masses();
    Ok(p.iter().zip(&q).map(|(p, q)| (p - q) * (p.ln() - q.ln())).sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Coverage {
    pub in_support: f64,
    pub c1: f64,
    pub c2: f64,
}

/// Fractions of points inside the cells dilated by `margin`.
pub fn coverage(points: &[Point2], margin: f64) -> Result<Coverage> {
    if !(margin >= 0.0) {
        return Err(Error::Invalid(format!("margin must be >= 0, got {margin}")));
    }
    if points.is_empty() {
        return Err(Error::Invalid("coverage of an empty batch".into()));
    }
    let (mut any, mut c1, mut c2) = (0usize, 0usize, 0usize);
    for &p in points {
        let in1 = Cell::C1.contains(p, margin);
        let in2 = Cell::C2.contains(p, margin);
        any += (in1 || in2) as usize;
        c1 += in1 as usize;
        c2 += in2 as usize;
    }
    let n = points.len() as f64;
    Ok(Coverage {
        in_support: any as f64 / n,
        c1: c1 as f64 / n,
        c2: c2 as f64 / n,
    })
}

/// Mean `<h(x, 0), phi(x)>` over support points.
pub fn alignment_score(params: &ModelParams, points: &[Point2]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Invalid("alignment score of an empty batch".into()));
    }
    let mut total = 0.0;
    for chunk in points.chunks(512) {
        let tape = params.forward_batch(ModelParams::input_rows(chunk, 0.0).view())?;
        let h = params.project_batch(&tape)?.features;
        for (i, &x) in chunk.iter().enumerate() {
            let f = toy::phi_vec(x)?;
            total += h[[i, 0]] * f[0] + h[[i, 1]] * f[1];
        }
    }
    Ok(total / points.len() as f64)
}

/// Mean of `V(phi(x), target)` over a batch, with `phi` evaluated at the
/// nearest support point.
pub fn mean_feature_potential(points: &[Point2], potential: &PotentialSpec) -> Result<f64> {
    let mut total = 0.0;
    for &x in points {
        let f = FeatureMap::unit_vector(toy::phi_vec(toy::project_to_support(x))?)?;
        total += crate::potential::eval_potential(potential, &f)?;
    }
    Ok(total / points.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedScanConfig {
    pub pairs: usize,
    pub lambda: f64,
    pub n_per_condition: usize,
    pub sampler: SamplerConfig,
    pub convention: GuidanceConvention,
    pub seed: u64,
}

impl Default for EmbedScanConfig {
    fn default() -> Self {
        EmbedScanConfig {
            pairs: 20,
            lambda: 2.0,
            n_per_condition: 256,
            sampler: SamplerConfig::default(),
            convention: GuidanceConvention::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmbedPair {
    pub phi1: [f64; 2],
    pub phi2: [f64; 2],
    pub feature_dist2: f64,
    pub d2: f64,
    pub d2_std_error: f64,
    /// `d2 / feature_dist2`; absent below the distance floor.
    pub ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmbedScanReport {
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
    pub ratio: f64,
    pub correlation: f64,
    pub pairs: Vec<EmbedPair>,
}

/// Pairs with squared feature distance below this are skipped.
pub const RATIO_FLOOR: f64 = 1e-6;

/// Random unit-vector condition pairs, reproducible from the seed.
pub fn random_pairs(count: usize, seed: u64) -> Vec<([f64; 2], [f64; 2])> {
    (0..count)
        .map(|k| {
            let mut rng = stream(seed, Role::EmbedPairs, k as u64);
            let mut unit = || {
                let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                [a.cos(), a.sin()]
            };
            (unit(), unit())
        })
        .collect()
}

/// Sample mean and covariance of `phi` over a batch (nearest support point).
fn feature_moments(points: &[Point2]) -> Result<([f64; 2], [[f64; 2]; 2])> {
    let phis = points
        .iter()
        .map(|&x| toy::phi_vec(toy::project_to_support(x)))
        .collect::<Result<Vec<_>>>()?;
    let n = phis.len() as f64;
    let mut m = [0.0; 2];
    for f in &phis {
        m[0] += f[0] / n;
        m[1] += f[1] / n;
    }
    let mut c = [[0.0; 2]; 2];
    for f in &phis {
        let d = [f[0] - m[0], f[1] - m[1]];
        for i in 0..2 {
            for j in 0..2 {
                c[i][j] += d[i] * d[j] / (n - 1.0).max(1.0);
            }
        }
    }
    Ok((m, c))
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    sxy / (sxx * syy).sqrt()
}

/// Estimates `d^2 = lambda <E_1[phi] - E_2[phi], phi1 - phi2>` for each pair
/// from guided samples and summarizes the ratio to `|phi1 - phi2|^2`.
///
/// Each condition is sampled with the `ipa:full` potential, the one the
/// closed form assumes; `phi` of samples outside the support is taken at the
/// nearest support point.
pub fn embed_scan(
    params: &ModelParams,
    pairs: &[([f64; 2], [f64; 2])],
    config: &EmbedScanConfig,
) -> Result<EmbedScanReport> {
    if !(config.lambda >= 0.0) {
        return Err(Error::Invalid(format!("lambda must be >= 0, got {}", config.lambda)));
    }
    if config.n_per_condition < 2 {
        return Err(Error::Invalid("need at least two samples per condition".into()));
    }
    let moments = |target: [f64; 2], seed: u64| -> Result<([f64; 2], [[f64; 2]; 2])> {
        let potential = PotentialSpec::ipa(
            make_weight_matrix(WeightKind::FullMap, 1)?,
            FeatureMap::unit_vector(target)?,
        )?;
        let cfg = SamplerConfig {
            seed,
            ..config.sampler.clone()
        };
        let batch = sample_sde(
            params,
            &cfg,
            config.n_per_condition,
            Some(Guidance::new(potential, config.lambda)?.with_convention(config.convention)),
        )?;
        feature_moments(&batch.points)
    };
    let n = config.n_per_condition as f64;
    let mut out = Vec::with_capacity(pairs.len());
    for (k, &(phi1, phi2)) in pairs.iter().enumerate() {
        let delta = [phi1[0] - phi2[0], phi1[1] - phi2[1]];
        let dist2 = delta[0] * delta[0] + delta[1] * delta[1];
        if dist2 < RATIO_FLOOR {
            out.push(EmbedPair {
                phi1,
                phi2,
                feature_dist2: dist2,
                d2: 0.0,
                d2_std_error: 0.0,
                ratio: None,
            });
            continue;
        }
        let base = config.seed.wrapping_mul(1_000_003).wrapping_add(2 * k as u64);
        let (m1, c1) = moments(phi1, base)?;
        let (m2, c2) = moments(phi2, base + 1)?;
        let d2 = config.lambda * ((m1[0] - m2[0]) * delta[0] + (m1[1] - m2[1]) * delta[1]);
        let quad = |c: [[f64; 2]; 2]| {
            delta[0] * delta[0] * c[0][0] + 2.0 * delta[0] * delta[1] * c[0][1] + delta[1] * delta[1] * c[1][1]
        };
        let se = config.lambda * ((quad(c1) + quad(c2)) / n).sqrt();
        log::info!("pair {}: |dphi|^2 {dist2:.4} d2 {d2:.4} +- {se:.4}", k + 1);
        out.push(EmbedPair {
            phi1,
            phi2,
            feature_dist2: dist2,
            d2,
            d2_std_error: se,
            ratio: Some(d2 / dist2),
        });
    }
    let ratios: Vec<f64> = out.iter().filter_map(|p| p.ratio).collect();
    if ratios.is_empty() {
        return Err(Error::Invalid("every pair was below the distance floor".into()));
    }
    let a = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let b = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let used: Vec<&EmbedPair> = out.iter().filter(|p| p.ratio.is_some()).collect();
    let correlation = pearson(
        &used.iter().map(|p| p.d2).collect::<Vec<_>>(),
        &used.iter().map(|p| p.feature_dist2).collect::<Vec<_>>(),
    );
    Ok(EmbedScanReport {
        a,
        b,
        ratio: b / a,
        correlation,
        pairs: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn energy_distance_closed_forms() {
        let a = vec![[0.0, 0.0]; 10];
        let b = vec![[3.0, 4.0]; 10];
        let e = energy_distance_with(&a, &b, PAIR_CAP, 0, Parallelism::default()).unwrap();
        assert!((e - 10.0).abs() < 1e-12);
        let p0 = toy::sample_p0(500, 1).unwrap();
        assert_eq!(energy_distance(&p0, &p0).unwrap(), 0.0);
        assert!(energy_distance_with(&[], &a, PAIR_CAP, 0, Parallelism::default()).is_err());
    }

    #[test]
    fn energy_distance_subsamples_deterministically() {
        let a = toy::sample_p0(5000, 2).unwrap().points;
        let b = toy::sample_p0(5000, 3).unwrap().points;
        let e1 = energy_distance_with(&a, &b, 1000, 7, Parallelism::Sequential).unwrap();
        let e2 = energy_distance_with(&a, &b, 1000, 7, Parallelism::default()).unwrap();
        assert_eq!(e1.to_bits(), e2.to_bits());
        assert!(e1 < 0.02, "{e1}");
    }

    proptest! {
        #[test]
        fn energy_distance_is_zero_on_permuted_copies(
            pts in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..60),
            rot in 0usize..60,
        ) {
            let a: Vec<Point2> = pts.iter().map(|&(x, y)| [x, y]).collect();
            let mut b = a.clone();
            let r = rot % b.len();
            b.rotate_left(r);
            b.reverse();
            let e = energy_distance_with(&a, &b, 40, 1, Parallelism::default()).unwrap();
            prop_assert_eq!(e, 0.0);
        }

        #[test]
        fn energy_distance_is_nonnegative(
            a in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..40),
            b in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..40),
        ) {
            let a: Vec<Point2> = a.into_iter().map(|(x, y)| [x, y]).collect();
            let b: Vec<Point2> = b.into_iter().map(|(x, y)| [x, y]).collect();
            prop_assert!(energy_distance_with(&a, &b, PAIR_CAP, 0, Parallelism::default()).unwrap() >= 0.0);
        }

        #[test]
        fn skl_is_symmetric_and_nonnegative(
            a in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..40),
            b in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..40),
        ) {
            let a: Vec<Point2> = a.into_iter().map(|(x, y)| [x, y]).collect();
            let b: Vec<Point2> = b.into_iter().map(|(x, y)| [x, y]).collect();
            let g = GridSettings::default();
            let ab = symmetric_kl_points(&a, &b, g).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, symmetric_kl_points(&b, &a, g).unwrap());
        }
    }

    #[test]
    fn skl_two_cell_closed_form() {
        let eps: f64 = 1e-4;
        let grid = GridSettings {
            resolution: [2, 1],
            ..Default::default()
        };
        let v = symmetric_kl_points(&[[-1.0, 0.0]], &[[1.0, 0.0]], grid).unwrap();
        // p = ((1+e)/(1+2e), e/(1+2e)) and q swapped.
        let expected = 2.0 / (1.0 + 2.0 * eps) * ((1.0 + eps) / eps).ln();
        assert!((v - expected).abs() < 1e-12 * expected);
        let same = symmetric_kl_points(&[[-1.0, 0.0]], &[[-1.0, 0.0]], grid).unwrap();
        assert_eq!(same, 0.0);
    }

    #[test]
    fn histogram_masses_sum_to_one_and_clamp() {
        let pts = vec![[-9.0, -9.0], [9.0, 9.0], [0.1, 0.1], [f64::MAX, 0.0]];
        let h = GridHistogram::new(&pts, GridSettings::default()).unwrap();
        assert_eq!(h.counts[0], 1);
        assert_eq!(h.counts[40 * 40 - 1], 1);
        assert_eq!(h.counts.iter().sum::<u64>(), 4);
        assert!((h.masses().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn coverage_fractions() {
        let inside = vec![[-0.5, 0.5]; 7];
        let c = coverage(&inside, 0.0).unwrap();
        assert_eq!((c.in_support, c.c1, c.c2), (1.0, 1.0, 0.0));
        let p0 = toy::sample_p0(100_000, 4).unwrap();
        let c = coverage(&p0.points, 0.0).unwrap();
        assert_eq!(c.in_support, 1.0);
        assert!((c.c1 - 0.5).abs() <= 0.0095);
        let far = coverage(&[[1.04, -0.5], [1.06, -0.5]], 0.05).unwrap();
        assert_eq!(far.in_support, 0.5);
    }

    #[test]
    fn alignment_score_of_random_net_is_small() {
        let p = ModelParams::init(crate::net::Arch::small(64), &mut stream(5, Role::Init, 0)).unwrap();
        let pts = toy::sample_p0(1000, 5).unwrap().points;
        let s = alignment_score(&p, &pts).unwrap();
        assert!(s.abs() <= 1.0);
    }

    #[test]
    fn pearson_and_pairs() {
        // sxy = 4.5, sxx = 2, syy = 61/6.
        let expected = 4.5 / (2.0f64 * 61.0 / 6.0).sqrt();
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.5]) - expected).abs() < 1e-14);
        assert!(pearson(&[1.0, 1.0], &[1.0, 2.0]).is_nan());
        let pairs = random_pairs(5, 3);
        assert_eq!(pairs, random_pairs(5, 3));
        for (a, b) in pairs {
            assert!((a[0].hypot(a[1]) - 1.0).abs() < 1e-12);
            assert!((b[0].hypot(b[1]) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn embed_scan_skips_identical_pairs() {
        let p = ModelParams::init(crate::net::Arch::small(16), &mut stream(6, Role::Init, 0)).unwrap();
        let cfg = EmbedScanConfig {
            n_per_condition: 16,
            sampler: SamplerConfig {
                steps: 5,
                ..Default::default()
            },
            ..Default::default()
        };
        let pairs = [([1.0, 0.0], [1.0, 0.0]), ([1.0, 0.0], [0.0, 1.0]), ([0.0, -1.0], [-1.0, 0.0])];
        let r = embed_scan(&p, &pairs, &cfg).unwrap();
        assert_eq!(r.pairs[0].ratio, None);
        assert!(r.a <= r.b);
        let json = serde_json::to_value(&r).unwrap();
        assert!(json.get("A").is_some() && json.get("correlation").is_some());
        let zero = embed_scan(&p, &pairs[1..2], &EmbedScanConfig { lambda: 0.0, ..cfg }).unwrap();
        assert_eq!(zero.pairs[0].d2, 0.0);
    }
}
