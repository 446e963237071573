//! Central finite-difference checks of every analytic gradient.
//!
//! Entries whose ReLU activation pattern changes inside the difference
//! stencil are not differentiable there and are skipped (and counted).

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::feature::FeatureMap;
use crate::net::{backward, Arch, ModelParams, Tape};
use crate::potential::{eval_potential, grad_potential, make_weight_matrix, PotentialSpec, WeightKind};
use crate::rng::{stream, Role, StreamRng};
use crate::toy;
use crate::train::{compound_loss, Example};

/// Relative errors use `max(|analytic|, |numeric|, REL_FLOOR)` as denominator.
pub const REL_FLOOR: f64 = 1e-6;
pub const NET_STEP: f64 = 1e-5;
pub const POTENTIAL_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub instances: usize,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            seed: 0,
            instances: 100,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub instances: usize,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub suites: Vec<SuiteReport>,
    pub passed: bool,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Default)]
struct Tally {
    checked: usize,
    skipped: usize,
    max: f64,
}

impl Tally {
    fn record(&mut self, analytic: f64, numeric: f64) {
        self.checked += 1;
        let e = rel_err(analytic, numeric);
        if e > self.max || e.is_nan() {
            self.max = if e.is_nan() { f64::INFINITY } else { e };
        }
    }

    fn report(self, name: &str, instances: usize, tolerance: f64) -> SuiteReport {
        SuiteReport {
            name: name.to_string(),
            instances,
            checked: self.checked,
            skipped_kinks: self.skipped,
            max_rel_err: self.max,
            passed: self.checked > 0 && self.max <= tolerance,
        }
    }
}

fn rng_for(cfg: &GradCheckConfig, suite: u64) -> StreamRng {
    stream(cfg.seed, Role::GradCheck, suite)
}

/// Small random network with nonzero biases so no unit sits exactly at a kink.
fn random_net(rng: &mut StreamRng) -> Result<ModelParams> {
    let depth = rng.random_range(3..=5);
    let arch = Arch {
        depth,
        hidden: rng.random_range(4..=10),
        tap: rng.random_range(1..depth),
        head_hidden: rng.random_range(3..=8),
        ..Arch::default()
    };
    let mut p = ModelParams::init(arch, rng)?;
    for d in p.layers.iter_mut().chain(p.head.iter_mut()) {
        d.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    Ok(p)
}

/// Signs of every ReLU input, velocity layers then head.
fn pattern(p: &ModelParams, tape: &Tape) -> Result<Vec<bool>> {
    let mut out = Vec::new();
    for z in &tape.pre[..tape.pre.len() - 1] {
        out.extend(z.iter().map(|&v| v > 0.0));
    }
    out.extend(p.project_batch(tape)?.hidden_pre.iter().map(|&v| v > 0.0));
    Ok(out)
}

struct NetProbe {
    dv: [f64; 2],
    dh: [f64; 2],
    x: [f64; 2],
    t: f64,
}

impl NetProbe {
    fn value(&self, p: &ModelParams, x: [f64; 2]) -> Result<(f64, Vec<bool>)> {
        let tape = p.forward_batch(ModelParams::input_rows(&[x], self.t).view())?;
        let h = p.project_batch(&tape)?.features;
        let v = tape.velocity();
        let value = self.dv[0] * v[[0, 0]] + self.dv[1] * v[[0, 1]] + self.dh[0] * h[[0, 0]] + self.dh[1] * h[[0, 1]];
        Ok((value, pattern(p, &tape)?))
    }
}

/// Gradients of `<dv, v(x, t)> + <dh, h(x, t)>` in parameters and input.
pub fn check_flow_net(cfg: &GradCheckConfig) -> Result<SuiteReport> {
    let mut rng = rng_for(cfg, 1);
    let mut tally = Tally::default();
    let mut done = 0;
    while done < cfg.instances {
        let p = random_net(&mut rng)?;
        let probe = NetProbe {
            dv: [rng.sample(StandardNormal), rng.sample(StandardNormal)],
            dh: [rng.sample(StandardNormal), rng.sample(StandardNormal)],
            x: [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)],
            t: rng.random_range(0.0..1.0),
        };
        let Ok((_, base)) = probe.value(&p, probe.x) else {
            continue; // degenerate head output; draw another instance
        };
        let tape = p.forward_batch(ModelParams::input_rows(&[probe.x], probe.t).view())?;
        let (grads, dx) = backward(
            &p,
            &tape,
            Some(probe.dv),
            Some(&FeatureMap::new(Array2::from_shape_vec((1, 2), probe.dh.to_vec()).expect("1x2"))),
        )?;
        let analytic = grads.slices().into_iter().flatten().copied().collect::<Vec<_>>();
        let mut k = 0;
        let mut q = p.clone();
        for (si, len) in p.slices().iter().map(|s| s.len()).enumerate() {
            for j in 0..len {
                let orig = q.slices()[si][j];
                q.slices_mut()[si][j] = orig + NET_STEP;
                let plus = probe.value(&q, probe.x)?;
                q.slices_mut()[si][j] = orig - NET_STEP;
                let minus = probe.value(&q, probe.x)?;
                q.slices_mut()[si][j] = orig;
                if plus.1 != base || minus.1 != base {
                    tally.skipped += 1;
                } else {
                    tally.record(analytic[k], (plus.0 - minus.0) / (2.0 * NET_STEP));
                }
                k += 1;
            }
        }
        for j in 0..2 {
            let (mut xp, mut xm) = (probe.x, probe.x);
            xp[j] += NET_STEP;
            xm[j] -= NET_STEP;
            let (plus, minus) = (probe.value(&p, xp)?, probe.value(&p, xm)?);
            if plus.1 != base || minus.1 != base {
                tally.skipped += 1;
            } else {
                tally.record(dx[j], (plus.0 - minus.0) / (2.0 * NET_STEP));
            }
        }
        done += 1;
    }
    Ok(tally.report("flow_net", cfg.instances, cfg.tolerance))
}

/// Parameter gradients of `L_diff + beta * L_align` on small batches.
pub fn check_compound_loss(cfg: &GradCheckConfig) -> Result<SuiteReport> {
    let mut rng = rng_for(cfg, 2);
    let mut tally = Tally::default();
    let mut done = 0;
    while done < cfg.instances {
        let p = random_net(&mut rng)?;
        let beta = rng.random_range(0.0..1.0);
        let n = rng.random_range(1..=6);
        let x0s = toy::sample_p0(n, rng.random())?.points;
        let batch = x0s
            .into_iter()
            .map(|x0| Example::new(x0, toy::gaussian_point(&mut rng), rng.random_range(0.0..1.0)))
            .collect::<Result<Vec<_>>>()?;
        let eval = |q: &ModelParams| -> Result<(f64, Vec<bool>)> {
            let out = compound_loss(q, &batch, beta, Parallelism::Sequential)?;
            let mut pat = Vec::new();
            for ex in &batch {
                let (xt, _) = crate::train::interpolate(ex.x0, ex.x1, ex.t);
                let tape = q.forward_batch(ModelParams::input_rows(&[xt], ex.t).view())?;
                pat.extend(pattern(q, &tape)?);
            }
            Ok((out.loss_diff + beta * out.loss_align, pat))
        };
        let Ok((_, base)) = eval(&p) else {
            continue;
        };
        let grads = compound_loss(&p, &batch, beta, Parallelism::Sequential)?.grads;
        let analytic = grads.slices().into_iter().flatten().copied().collect::<Vec<_>>();
        let mut q = p.clone();
        let mut k = 0;
        for (si, len) in p.slices().iter().map(|s| s.len()).enumerate() {
            for j in 0..len {
                let orig = q.slices()[si][j];
                q.slices_mut()[si][j] = orig + NET_STEP;
                let plus = eval(&q)?;
                q.slices_mut()[si][j] = orig - NET_STEP;
                let minus = eval(&q)?;
                q.slices_mut()[si][j] = orig;
                if plus.1 != base || minus.1 != base {
                    tally.skipped += 1;
                } else {
                    tally.record(analytic[k], (plus.0 - minus.0) / (2.0 * NET_STEP));
                }
                k += 1;
            }
        }
        done += 1;
    }
    Ok(tally.report("compound_loss", cfg.instances, cfg.tolerance))
}

fn random_unit_rows(rng: &mut StreamRng, n: usize, d: usize) -> Result<FeatureMap> {
    let rows = Array2::from_shape_simple_fn((n, d), || rng.sample(StandardNormal));
    FeatureMap::normalize(rows)
}

fn random_unit(rng: &mut StreamRng, d: usize) -> Result<Array1<f64>> {
    Ok(random_unit_rows(rng, 1, d)?.into_rows().row(0).to_owned())
}

/// Potential variants covered by [`check_potential`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PotentialCase {
    IpaFull,
    IpaMask,
    IpaAverage,
    IpaSingle,
    Spa(f64),
    Composite,
}

impl PotentialCase {
    pub const ALL: [PotentialCase; 8] = [
        PotentialCase::IpaFull,
        PotentialCase::IpaMask,
        PotentialCase::IpaAverage,
        PotentialCase::IpaSingle,
        PotentialCase::Spa(0.1),
        PotentialCase::Spa(1.0),
        PotentialCase::Spa(10.0),
        PotentialCase::Composite,
    ];

    pub fn name(&self) -> String {
        match self {
            PotentialCase::IpaFull => "ipa_full".into(),
            PotentialCase::IpaMask => "ipa_mask".into(),
            PotentialCase::IpaAverage => "ipa_average".into(),
            PotentialCase::IpaSingle => "ipa_single".into(),
            PotentialCase::Spa(t) => format!("spa_T{t}"),
            PotentialCase::Composite => "composite".into(),
        }
    }

    /// A random instance with `N <= 8` patches of dimension `d <= 16`.
    pub fn instance(&self, rng: &mut StreamRng) -> Result<(PotentialSpec, FeatureMap)> {
        let n = rng.random_range(1..=8);
        let d = rng.random_range(2..=16);
        let h = random_unit_rows(rng, n, d)?;
        let ipa = |rng: &mut StreamRng, kind: WeightKind| -> Result<PotentialSpec> {
            PotentialSpec::ipa(make_weight_matrix(kind, n)?, random_unit_rows(rng, n, d)?)
        };
        let spec = match *self {
            PotentialCase::IpaFull => ipa(rng, WeightKind::FullMap)?,
            PotentialCase::IpaMask => {
                let mut mask: Vec<usize> = (1..=n).filter(|_| rng.random_bool(0.5)).collect();
                if mask.is_empty() {
                    mask.push(rng.random_range(1..=n));
                }
                ipa(rng, WeightKind::Mask(mask))?
            }
            PotentialCase::IpaAverage => ipa(rng, WeightKind::AverageConcept)?,
            PotentialCase::IpaSingle => {
                let i = rng.random_range(1..=n);
                ipa(rng, WeightKind::SingleConcept(i))?
            }
            PotentialCase::Spa(t) => PotentialSpec::spa(random_unit(rng, d)?, t)?,
            PotentialCase::Composite => PotentialSpec::composite(vec![
                (0.7, ipa(rng, WeightKind::AverageConcept)?),
                (0.3, PotentialSpec::spa(random_unit(rng, d)?, 0.1)?),
            ])?,
        };
        Ok((spec, h))
    }
}

/// `dV/dh` against central differences of `V` in every entry of `h`.
pub fn check_potential(case: PotentialCase, cfg: &GradCheckConfig, suite: u64) -> Result<SuiteReport> {
    let mut rng = rng_for(cfg, suite);
    let mut tally = Tally::default();
    for _ in 0..cfg.instances {
        let (spec, h) = case.instance(&mut rng)?;
        let g = grad_potential(&spec, &h)?;
        let mut rows = h.rows().clone();
        for idx in 0..rows.len() {
            let (i, j) = (idx / rows.ncols(), idx % rows.ncols());
            let orig = rows[[i, j]];
            rows[[i, j]] = orig + POTENTIAL_STEP;
            let plus = eval_potential(&spec, &FeatureMap::new(rows.clone()))?;
            rows[[i, j]] = orig - POTENTIAL_STEP;
            let minus = eval_potential(&spec, &FeatureMap::new(rows.clone()))?;
            rows[[i, j]] = orig;
            tally.record(g[[i, j]], (plus - minus) / (2.0 * POTENTIAL_STEP));
        }
    }
    Ok(tally.report(&case.name(), cfg.instances, cfg.tolerance))
}

/// Every suite, in a fixed order.
pub fn run_all(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.instances == 0 {
        return Err(Error::Invalid("need at least one instance per suite".into()));
    }
    let mut suites = vec![check_flow_net(cfg)?, check_compound_loss(cfg)?];
    for (k, case) in PotentialCase::ALL.iter().enumerate() {
        suites.push(check_potential(*case, cfg, 10 + k as u64)?);
    }
    let passed = suites.iter().all(|s| s.passed);
    Ok(GradCheckReport {
        seed: cfg.seed,
        tolerance: cfg.tolerance,
        suites,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(rel_err(1.0, 1.0), 0.0);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((rel_err(0.0, 1e-9) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn small_run_passes() {
        let cfg = GradCheckConfig {
            seed: 4,
            instances: 5,
            ..Default::default()
        };
        let report = run_all(&cfg).unwrap();
        assert_eq!(report.suites.len(), 10);
        for s in &report.suites {
            assert!(s.passed, "{s:?}");
        }
    }

    #[test]
    fn broken_gradient_is_caught() {
        let mut t = Tally::default();
        t.record(1.0, 1.001);
        assert!(!t.report("x", 1, 1e-4).passed);
    }
}
