//! The two-square toy world.
//!
//! Data density: uniform with value 1/2 on `C1 = [-1,0]x[0,1]` and
//! `C2 = [0,1]x[-1,0]`. Feature map: a point on the unit circle built from the
//! normalized distance `t` to the cell center and the normalized distances
//! `h`, `w` to the nearest vertical and horizontal cell edges,
//! `phi = [t, h - w] / |[t, h - w]|`.
//!
//! Also here: exact samplers for the data density and for its tilt
//! `p0 * exp(lambda <phi, phi_c>)`, and the closed-form Gaussian world used to
//! check score/velocity conversions.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::batch::{Point2, SampleBatch};
use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::feature::FeatureMap;
use crate::rng::{stream, Role, StreamRng};

/// One of the two support squares.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Cell {
    C1,
    C2,
}

impl Cell {
    pub const ALL: [Cell; 2] = [Cell::C1, Cell::C2];

    /// `([x_min, x_max], [y_min, y_max])`.
    pub fn bounds(self) -> ([f64; 2], [f64; 2]) {
        match self {
            Cell::C1 => ([-1.0, 0.0], [0.0, 1.0]),
            Cell::C2 => ([0.0, 1.0], [-1.0, 0.0]),
        }
    }

    pub fn center(self) -> Point2 {
        let (bx, by) = self.bounds();
        [0.5 * (bx[0] + bx[1]), 0.5 * (by[0] + by[1])]
    }

    /// Membership in the cell dilated by `margin`.
    pub fn contains(self, x: Point2, margin: f64) -> bool {
        let (bx, by) = self.bounds();
        x[0] >= bx[0] - margin && x[0] <= bx[1] + margin && x[1] >= by[0] - margin && x[1] <= by[1] + margin
    }

    /// Nearest point of the closed cell.
    pub fn clamp(self, x: Point2) -> Point2 {
        let (bx, by) = self.bounds();
        [x[0].clamp(bx[0], bx[1]), x[1].clamp(by[0], by[1])]
    }
}

/// The cell containing `x`; the shared corner at the origin reports `C1`.
pub fn cell_of(x: Point2) -> Option<Cell> {
    Cell::ALL.into_iter().find(|c| c.contains(x, 0.0))
}

/// Data density `p0(x)`.
pub fn density(x: Point2) -> f64 {
    if cell_of(x).is_some() {
        0.5
    } else {
        0.0
    }
}

/// Nearest point of `C1 u C2`.
pub fn project_to_support(x: Point2) -> Point2 {
    let a = Cell::C1.clamp(x);
    let b = Cell::C2.clamp(x);
    let d = |p: Point2| (p[0] - x[0]).powi(2) + (p[1] - x[1]).powi(2);
    if d(a) <= d(b) {
        a
    } else {
        b
    }
}

/// Divisors applied to the raw distances before building `phi`.
///
/// The reference convention divides each distance by its largest value inside
/// a unit cell, so `t`, `h`, `w` all lie in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhiNormalization {
    pub center: f64,
    pub edge: f64,
}

impl Default for PhiNormalization {
    fn default() -> Self {
        PhiNormalization {
            center: std::f64::consts::FRAC_1_SQRT_2,
            edge: 0.5,
        }
    }
}

/// Normalized `(t, h, w)` for a point in the support.
pub fn phi_components(x: Point2, norm: &PhiNormalization) -> Result<(f64, f64, f64)> {
    let cell = cell_of(x).ok_or_else(|| Error::Domain(format!("({}, {}) lies outside C1 u C2", x[0], x[1])))?;
    let c = cell.center();
    let (bx, by) = cell.bounds();
    let t = ((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2)).sqrt() / norm.center;
    let h = (x[0] - bx[0]).min(bx[1] - x[0]) / norm.edge;
    let w = (x[1] - by[0]).min(by[1] - x[1]) / norm.edge;
    Ok((t, h, w))
}

/// Feature vector under a given normalization convention.
///
/// At the cell center (`t = 0`, `h = w`) the direction is undefined and
/// `[1, 0]` is returned; points within 1e-12 of that set are treated alike.
pub fn phi_with(x: Point2, norm: &PhiNormalization) -> Result<[f64; 2]> {
    let (t, h, w) = phi_components(x, norm)?;
    let r = (t * t + (h - w) * (h - w)).sqrt();
    if r <= 1e-12 {
        return Ok([1.0, 0.0]);
    }
    Ok([t / r, (h - w) / r])
}

/// Feature vector under the reference normalization.
pub fn phi_vec(x: Point2) -> Result<[f64; 2]> {
    phi_with(x, &PhiNormalization::default())
}

/// Feature map `phi(x)` as a `1 x 2` unit row.
pub fn phi(x: Point2) -> Result<FeatureMap> {
    FeatureMap::unit_vector(phi_vec(x)?)
}

fn draw_p0(rng: &mut StreamRng) -> Point2 {
    let cell = if rng.random::<bool>() { Cell::C1 } else { Cell::C2 };
    let (bx, by) = cell.bounds();
    [bx[0] + rng.random::<f64>(), by[0] + rng.random::<f64>()]
}

const P0_CHUNK: usize = 4096;

/// `n` i.i.d. draws from the data density.
pub fn sample_p0(n: usize, seed: u64) -> Result<SampleBatch> {
    sample_p0_with(n, seed, Parallelism::default())
}

pub fn sample_p0_with(n: usize, seed: u64, par: Parallelism) -> Result<SampleBatch> {
    if n == 0 {
        return Err(Error::Invalid("sample count must be at least 1".into()));
    }
    let chunks = par.map_ranges(n, P0_CHUNK, |k, range| {
        let mut rng = stream(seed, Role::DataSample, k as u64);
        range.map(|_| draw_p0(&mut rng)).collect::<Vec<_>>()
    });
    Ok(SampleBatch::new(chunks.concat(), seed).with_setting("source", "p0"))
}

/// Target feature and guidance strength of a tilted distribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditionFeature {
    target: [f64; 2],
    lambda: f64,
}

impl ConditionFeature {
    pub fn new(target: [f64; 2], lambda: f64) -> Result<Self> {
        let norm = (target[0] * target[0] + target[1] * target[1]).sqrt();
        if !((norm - 1.0).abs() <= 1e-6) {
            return Err(Error::Invalid(format!("condition feature norm {norm}, expected 1")));
        }
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::Invalid(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        Ok(ConditionFeature { target, lambda })
    }

    pub fn target(&self) -> [f64; 2] {
        self.target
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Acceptance probability `exp(lambda (<phi(x), target> - 1))`.
    pub fn acceptance(&self, x: Point2) -> Result<f64> {
        let f = phi_vec(x)?;
        let dot = f[0] * self.target[0] + f[1] * self.target[1];
        Ok((self.lambda * (dot - 1.0)).exp())
    }

    /// Unnormalized tilted density `p0(x) exp(lambda <phi(x), target>)`.
    pub fn tilted_density(&self, x: Point2) -> f64 {
        match phi_vec(x) {
            Ok(f) => 0.5 * (self.lambda * (f[0] * self.target[0] + f[1] * self.target[1])).exp(),
            Err(_) => 0.0,
        }
    }
}

const ORACLE_CHUNK: usize = 1024;
/// Proposals after which a chunk checks its acceptance rate.
const ORACLE_PROBE: u64 = 1 << 20;
const MIN_ACCEPTANCE: f64 = 1e-6;

/// Exact samples from `p0 * exp(lambda <phi, target>)` by rejection from `p0`
/// with envelope `exp(lambda)`.
pub fn rejection_sample(cond: &ConditionFeature, n: usize, seed: u64) -> Result<SampleBatch> {
    rejection_sample_with(cond, n, seed, Parallelism::default())
}

pub fn rejection_sample_with(cond: &ConditionFeature, n: usize, seed: u64, par: Parallelism) -> Result<SampleBatch> {
    if n == 0 {
        return Err(Error::Invalid("sample count must be at least 1".into()));
    }
    let chunks = par.map_ranges(n, ORACLE_CHUNK, |k, range| -> Result<Vec<Point2>> {
        let mut rng = stream(seed, Role::Oracle, k as u64);
        let mut out = Vec::with_capacity(range.len());
        let mut proposals = 0u64;
        while out.len() < range.len() {
            let x = draw_p0(&mut rng);
            proposals += 1;
            if rng.random::<f64>() < cond.acceptance(x)? {
                out.push(x);
            }
            if proposals == ORACLE_PROBE {
                let rate = out.len() as f64 / proposals as f64;
                if rate < MIN_ACCEPTANCE {
                    return Err(Error::EnvelopeTooTight { rate, proposals });
                }
            }
        }
        Ok(out)
    });
    let points = chunks.into_iter().collect::<Result<Vec<_>>>()?.concat();
    Ok(SampleBatch::new(points, seed)
        .with_setting("source", "oracle")
        .with_setting("lambda", cond.lambda)
        .with_setting("feature", format!("{},{}", cond.target[0], cond.target[1])))
}

/// Standard normal 2-vector.
pub fn gaussian_point<R: Rng>(rng: &mut R) -> Point2 {
    [StandardNormal.sample(rng), StandardNormal.sample(rng)]
}

fn gaussian_world_variance(t: f64, sigma0: f64) -> Result<f64> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Domain(format!("time {t} outside (0, 1)")));
    }
    if !(sigma0 >= 0.0 && sigma0.is_finite()) {
        return Err(Error::Invalid(format!("sigma0 must be finite and >= 0, got {sigma0}")));
    }
    Ok((1.0 - t).powi(2) * sigma0 * sigma0 + t * t)
}

/// Score of `p_t` when `p0 = N(0, sigma0^2 I)` and `p1 = N(0, I)`.
pub fn gaussian_world_score(x: Point2, t: f64, sigma0: f64) -> Result<Point2> {
    let var = gaussian_world_variance(t, sigma0)?;
    Ok([-x[0] / var, -x[1] / var])
}

/// Optimal velocity `E[x1 - x0 | x_t = x]` in the Gaussian world, from the
/// joint Gaussian regression (independent of the score route).
pub fn gaussian_world_velocity(x: Point2, t: f64, sigma0: f64) -> Result<Point2> {
    let var = gaussian_world_variance(t, sigma0)?;
    let gain = (t - (1.0 - t) * sigma0 * sigma0) / var;
    Ok([gain * x[0], gain * x[1]])
}

/// The analytic Gaussian world as a velocity model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianWorld {
    pub sigma0: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phi_reference_point() {
        // t = 0.25/(sqrt2/2), h = 0.25/0.5, w = 0.5/0.5.
        let t: f64 = 0.25 / std::f64::consts::FRAC_1_SQRT_2;
        let (h, w) = (0.5, 1.0);
        let r = (t * t + (h - w) * (h - w)).sqrt();
        let f = phi_vec([-0.25, 0.5]).unwrap();
        assert!((f[0] - t / r).abs() < 1e-15);
        assert!((f[1] - (h - w) / r).abs() < 1e-15);
        assert!((f[0] - 0.5774).abs() < 1e-4);
        assert!((f[1] + 0.8165).abs() < 1e-4);
    }

    #[test]
    fn phi_domain_and_center() {
        assert!(matches!(phi_vec([0.5, 0.5]), Err(Error::Domain(_))));
        assert_eq!(phi_vec([-0.5, 0.5]).unwrap(), [1.0, 0.0]);
        assert_eq!(phi_vec([0.5, -0.5]).unwrap(), [1.0, 0.0]);
        assert!(phi([0.0, 0.0]).is_ok());
    }

    #[test]
    fn phi_is_unit_with_nonnegative_first_component() {
        let batch = sample_p0(10_000, 5).unwrap();
        for &x in &batch.points {
            let f = phi_vec(x).unwrap();
            assert!(((f[0] * f[0] + f[1] * f[1]).sqrt() - 1.0).abs() <= 1e-12);
            assert!(f[0] >= 0.0);
        }
    }

    #[test]
    fn phi_reflection_symmetry() {
        let batch = sample_p0(500, 6).unwrap();
        let norm = PhiNormalization::default();
        for &x in &batch.points {
            let c = cell_of(x).unwrap().center();
            let mirrored = [2.0 * c[0] - x[0], x[1]];
            let (t1, h1, w1) = phi_components(x, &norm).unwrap();
            let (t2, h2, w2) = phi_components(mirrored, &norm).unwrap();
            assert!((t1 - t2).abs() < 1e-12 && (h1 - h2).abs() < 1e-12 && (w1 - w2).abs() < 1e-12);
        }
    }

    #[test]
    fn p0_support_balance_and_determinism() {
        let batch = sample_p0(100_000, 1).unwrap();
        assert!(batch.points.iter().all(|&x| cell_of(x).is_some()));
        let c1 = batch.points.iter().filter(|&&x| Cell::C1.contains(x, 0.0)).count() as f64 / 1e5;
        assert!((0.49..=0.51).contains(&c1), "C1 fraction {c1}");
        assert_eq!(batch, sample_p0(100_000, 1).unwrap());
        assert_eq!(
            sample_p0_with(9000, 2, Parallelism::Sequential).unwrap(),
            sample_p0(9000, 2).unwrap()
        );
        assert!(sample_p0(0, 1).is_err());
    }

    #[test]
    fn condition_validation() {
        assert!(ConditionFeature::new([1.0, 1.0], 1.0).is_err());
        assert!(ConditionFeature::new([1.0, 0.0], -1.0).is_err());
        assert!(ConditionFeature::new([1.0, 0.0], f64::NAN).is_err());
        let c = ConditionFeature::new([-1.0, 0.0], 2.0).unwrap();
        assert!(c.acceptance([-0.5, 0.5]).unwrap() <= 1.0);
    }

    #[test]
    fn oracle_support_and_determinism() {
        let c = ConditionFeature::new([0.0, -1.0], 2.0).unwrap();
        let a = rejection_sample(&c, 3000, 4).unwrap();
        assert_eq!(a.len(), 3000);
        assert!(a.points.iter().all(|&x| cell_of(x).is_some()));
        assert_eq!(a, rejection_sample_with(&c, 3000, 4, Parallelism::Sequential).unwrap());
    }

    #[test]
    fn oracle_rejects_hopeless_envelopes() {
        let c = ConditionFeature::new([-1.0, 0.0], 40.0).unwrap();
        assert!(matches!(
            rejection_sample(&c, 10, 1),
            Err(Error::EnvelopeTooTight { .. })
        ));
    }

    #[test]
    fn gaussian_world_point_mass() {
        let v = gaussian_world_velocity([1.0, 0.0], 0.5, 0.0).unwrap();
        let s = gaussian_world_score([1.0, 0.0], 0.5, 0.0).unwrap();
        assert_eq!(v, [2.0, 0.0]);
        assert_eq!(s, [-4.0, 0.0]);
        // v = -x/(1-t) - t/(1-t) s
        assert_eq!(-1.0 / 0.5 - 0.5 / 0.5 * s[0], v[0]);
    }

    #[test]
    fn gaussian_world_satisfies_the_velocity_score_relation() {
        let mut rng = stream(3, Role::GradCheck, 0);
        for _ in 0..1000 {
            let sigma0 = rng.random_range(0.0..2.0);
            let t = rng.random_range(1e-3..1.0 - 1e-3);
            let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let v = gaussian_world_velocity(x, t, sigma0).unwrap();
            let s = gaussian_world_score(x, t, sigma0).unwrap();
            for i in 0..2 {
                let rhs = -x[i] / (1.0 - t) - t / (1.0 - t) * s[i];
                assert!((v[i] - rhs).abs() <= 1e-12 * (1.0 + v[i].abs()), "{} vs {}", v[i], rhs);
            }
        }
        let s = gaussian_world_score([1.0, -2.0], 0.3, 1.0).unwrap();
        let var = 0.7f64 * 0.7 + 0.09;
        assert_eq!(s, [-1.0 / var, 2.0 / var]);
        assert!(gaussian_world_score([0.0, 0.0], 0.0, 1.0).is_err());
        assert!(gaussian_world_velocity([0.0, 0.0], 1.0, 1.0).is_err());
    }

    #[test]
    fn projection_onto_support() {
        assert_eq!(project_to_support([-0.5, 0.5]), [-0.5, 0.5]);
        assert_eq!(project_to_support([-1.3, 0.5]), [-1.0, 0.5]);
        assert_eq!(project_to_support([0.7, 0.4]), [0.7, 0.0]);
        assert!(cell_of(project_to_support([1.4, 1.4])).is_some());
    }
}
