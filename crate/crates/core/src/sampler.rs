//! Reverse-time samplers: probability-flow Euler and Euler-Maruyama, with
//! optional potential guidance.
//!
//! Time runs on a uniform grid from `t_start` down to `t_end`. Model
//! evaluations (velocity, score conversion, guidance) use `t` clamped to
//! `[t_end, 1 - t_end]`; the diffusion coefficient uses the grid time.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2};

use crate::batch::{Point2, SampleBatch};
use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::feature::FeatureMap;
use crate::net::ModelParams;
use crate::potential::{grad_potential, PotentialSpec};
use crate::rng::{stream, Role, StreamRng};
use crate::toy::{self, GaussianWorld};

/// Chains advanced together in one batched network call.
pub const CHAIN_CHUNK: usize = 256;

/// Anything that can report a velocity field, optionally with the input
/// gradient of a potential of its projected features.
pub trait VelocityModel: Sync {
    fn velocity(&self, points: &[Point2], t: f64) -> Result<Vec<Point2>>;

    /// Velocity and `grad_x V(h(x, t))` for every point.
    fn velocity_and_guidance(
        &self,
        _points: &[Point2],
        _t: f64,
        _potential: &PotentialSpec,
    ) -> Result<(Vec<Point2>, Vec<Point2>)> {
        Err(Error::Invalid("this model has no feature head to guide with".into()))
    }
}

fn rows_to_points(a: &Array2<f64>) -> Vec<Point2> {
    a.rows().into_iter().map(|r| [r[0], r[1]]).collect()
}

impl VelocityModel for ModelParams {
    fn velocity(&self, points: &[Point2], t: f64) -> Result<Vec<Point2>> {
        let tape = self.forward_batch(ModelParams::input_rows(points, t).view())?;
        Ok(rows_to_points(tape.velocity()))
    }

    fn velocity_and_guidance(
        &self,
        points: &[Point2],
        t: f64,
        potential: &PotentialSpec,
    ) -> Result<(Vec<Point2>, Vec<Point2>)> {
        let tape = self.forward_batch(ModelParams::input_rows(points, t).view())?;
        let head = self.project_batch(&tape)?;
        let mut dh = Array2::zeros(head.features.dim());
        for i in 0..points.len() {
            let h = FeatureMap::from_unit_rows(head.features.slice(s![i..i + 1, ..]).to_owned())?;
            let g = grad_potential(potential, &h)?;
            dh.row_mut(i).assign(&g.row(0));
        }
        let grads = self.backward_batch(&tape, Some(&head), None, Some(dh.view()), false)?;
        Ok((rows_to_points(tape.velocity()), rows_to_points(&grads.input)))
    }
}

impl VelocityModel for GaussianWorld {
    fn velocity(&self, points: &[Point2], t: f64) -> Result<Vec<Point2>> {
        points
            .iter()
            .map(|&x| toy::gaussian_world_velocity(x, t, self.sigma0))
            .collect()
    }
}

/// Score from a velocity by inverting the velocity/score relation.
pub fn velocity_to_score(v: Point2, x: Point2, t: f64, eps: f64) -> Result<Point2> {
    if !(t >= eps && t <= 1.0 - eps) {
        return Err(Error::Domain(format!("time {t} outside [{eps}, {}]", 1.0 - eps)));
    }
    Ok([-((1.0 - t) * v[0] + x[0]) / t, -((1.0 - t) * v[1] + x[1]) / t])
}

/// How the potential gradient enters the drift.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GuidanceConvention {
    /// `-2 lambda t grad V`.
    #[default]
    Full,
    /// `-lambda t grad V`: the tilt added to the score only.
    Half,
}

impl GuidanceConvention {
    pub fn factor(self) -> f64 {
        match self {
            GuidanceConvention::Full => 2.0,
            GuidanceConvention::Half => 1.0,
        }
    }
}

impl FromStr for GuidanceConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(GuidanceConvention::Full),
            "half" => Ok(GuidanceConvention::Half),
            _ => Err(Error::Invalid(format!("unknown guidance convention `{s}` (expected full or half)"))),
        }
    }
}

impl fmt::Display for GuidanceConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GuidanceConvention::Full => "full",
            GuidanceConvention::Half => "half",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Guidance {
    pub potential: PotentialSpec,
    pub lambda: f64,
    pub convention: GuidanceConvention,
}

impl Guidance {
    pub fn new(potential: PotentialSpec, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Invalid(format!("guidance scale must be >= 0, got {lambda}")));
        }
        Ok(Guidance {
            potential,
            lambda,
            convention: GuidanceConvention::default(),
        })
    }

    pub fn with_convention(mut self, convention: GuidanceConvention) -> Self {
        self.convention = convention;
        self
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mode {
    Ode,
    #[default]
    Sde,
    GuidedSde,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ode" => Ok(Mode::Ode),
            "sde" => Ok(Mode::Sde),
            "guided_sde" => Ok(Mode::GuidedSde),
            _ => Err(Error::Invalid(format!("unknown sampler mode `{s}` (expected ode, sde or guided_sde)"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Ode => "ode",
            Mode::Sde => "sde",
            Mode::GuidedSde => "guided_sde",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub t_start: f64,
    /// Last grid time, also the clip applied to model evaluations.
    pub t_end: f64,
    pub mode: Mode,
    pub guidance: Option<Guidance>,
    pub seed: u64,
    /// Multiplies the Brownian increment; 1 except in diagnostics.
    pub noise_scale: f64,
    pub record_trajectory: bool,
    pub parallelism: Parallelism,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 250,
            t_start: 1.0,
            t_end: 1e-3,
            mode: Mode::default(),
            guidance: None,
            seed: 0,
            noise_scale: 1.0,
            record_trajectory: false,
            parallelism: Parallelism::default(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Invalid("steps must be >= 1".into()));
        }
        if !(0.0 < self.t_end && self.t_end < self.t_start && self.t_start <= 1.0) {
            return Err(Error::Invalid(format!(
                "need 0 < t_end < t_start <= 1, got t_end {} and t_start {}",
                self.t_end, self.t_start
            )));
        }
        if self.t_end >= 0.5 {
            return Err(Error::Invalid(format!("t_end {} leaves an empty clip range", self.t_end)));
        }
        if let Some(g) = &self.guidance {
            if !(g.lambda >= 0.0 && g.lambda.is_finite()) {
                return Err(Error::Invalid(format!("guidance scale must be >= 0, got {}", g.lambda)));
            }
        }
        if self.mode == Mode::GuidedSde && self.guidance.is_none() {
            return Err(Error::Invalid("guided_sde needs a potential and a guidance scale".into()));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Invalid(format!("noise scale must be >= 0, got {}", self.noise_scale)));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        (self.t_start - self.t_end) / self.steps as f64
    }

    /// Grid time before step `k`; `grid_time(steps)` is `t_end`.
    pub fn grid_time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.t_end
        } else {
            self.t_start - k as f64 * self.dt()
        }
    }

    pub fn clip(&self, t: f64) -> f64 {
        t.clamp(self.t_end, 1.0 - self.t_end)
    }

    fn guidance_in_use(&self) -> Option<&Guidance> {
        match (self.mode, &self.guidance) {
            (Mode::GuidedSde, Some(g)) if g.lambda != 0.0 => Some(g),
            _ => None,
        }
    }

    pub fn settings(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("mode".into(), self.mode.to_string());
        m.insert("steps".into(), self.steps.to_string());
        m.insert("t_start".into(), format!("{:?}", self.t_start));
        m.insert("t_end".into(), format!("{:?}", self.t_end));
        m.insert("seed".into(), self.seed.to_string());
        if self.noise_scale != 1.0 {
            m.insert("noise_scale".into(), format!("{:?}", self.noise_scale));
        }
        if let (Mode::GuidedSde, Some(g)) = (self.mode, &self.guidance) {
            m.insert("lambda".into(), format!("{:?}", g.lambda));
            m.insert("guidance_convention".into(), g.convention.to_string());
        }
        m
    }
}

/// Reverse-time drift `v - t s`, plus the guidance term when given.
///
/// `t` is clamped to `[eps, 1 - eps]` before any model call.
pub fn drift(
    model: &dyn VelocityModel,
    points: &[Point2],
    t: f64,
    eps: f64,
    guidance: Option<&Guidance>,
) -> Result<Vec<Point2>> {
    let tc = t.clamp(eps, 1.0 - eps);
    let (v, grad) = match guidance {
        Some(g) if g.lambda != 0.0 => {
            let (v, grad) = model.velocity_and_guidance(points, tc, &g.potential)?;
            (v, Some((grad, g.convention.factor() * g.lambda * tc)))
        }
        _ => (model.velocity(points, tc)?, None),
    };
    let mut out = Vec::with_capacity(points.len());
    for (i, (&vi, &x)) in v.iter().zip(points).enumerate() {
        let s = velocity_to_score(vi, x, tc, eps)?;
        let mut d = [vi[0] - tc * s[0], vi[1] - tc * s[1]];
        if let Some((grad, scale)) = &grad {
            d[0] -= scale * grad[i][0];
            d[1] -= scale * grad[i][1];
        }
        out.push(d);
    }
    Ok(out)
}

/// Final batch, plus per-step states when requested.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    /// `steps + 1` snapshots of every chain, initial noise first.
    pub states: Option<Vec<Vec<Point2>>>,
    pub batch: SampleBatch,
}

struct ChunkRun {
    final_states: Vec<Point2>,
    states: Option<Vec<Vec<Point2>>>,
}

fn run_chunk(model: &dyn VelocityModel, cfg: &SamplerConfig, chains: std::ops::Range<usize>) -> Result<ChunkRun> {
    let mut rngs: Vec<StreamRng> = chains
        .clone()
        .map(|c| stream(cfg.seed, Role::SamplerNoise, c as u64))
        .collect();
    let mut x: Vec<Point2> = rngs.iter_mut().map(toy::gaussian_point).collect();
    let mut states = cfg.record_trajectory.then(|| vec![x.clone()]);
    let dt = cfg.dt();
    let guidance = cfg.guidance_in_use();
    for k in 0..cfg.steps {
        let t = cfg.grid_time(k);
        let step = match cfg.mode {
            Mode::Ode => model.velocity(&x, cfg.clip(t))?,
            Mode::Sde | Mode::GuidedSde => drift(model, &x, t, cfg.t_end, guidance)?,
        };
        let noise = (2.0 * t * dt).sqrt() * cfg.noise_scale;
        for ((xi, d), rng) in x.iter_mut().zip(&step).zip(rngs.iter_mut()) {
            xi[0] -= dt * d[0];
            xi[1] -= dt * d[1];
            if cfg.mode != Mode::Ode {
                let xi_noise = toy::gaussian_point(rng);
                xi[0] += noise * xi_noise[0];
                xi[1] += noise * xi_noise[1];
            }
        }
        if x.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::SamplerAborted { step: k + 1, t });
        }
        if let Some(s) = states.as_mut() {
            s.push(x.clone());
        }
    }
    Ok(ChunkRun { final_states: x, states })
}

/// Runs `n` independent chains. Chain `c` draws all its randomness from
/// stream `(seed, SamplerNoise, c)`, so results do not depend on chunking or
/// thread count.
pub fn sample(model: &dyn VelocityModel, config: &SamplerConfig, n: usize) -> Result<TrajectoryRecord> {
    config.validate()?;
    let runs = config
        .parallelism
        .map_ranges(n, CHAIN_CHUNK, |_, range| run_chunk(model, config, range));
    let mut points = Vec::with_capacity(n);
    let mut states: Option<Vec<Vec<Point2>>> = config.record_trajectory.then(|| vec![Vec::with_capacity(n); config.steps + 1]);
    for run in runs {
        let run = run?;
        points.extend(run.final_states);
        if let (Some(all), Some(chunk)) = (states.as_mut(), run.states) {
            for (dst, src) in all.iter_mut().zip(chunk) {
                dst.extend(src);
            }
        }
    }
    let mut batch = SampleBatch::new(points, config.seed);
    batch.settings = config.settings();
    Ok(TrajectoryRecord { states, batch })
}

/// Probability-flow ODE samples.
pub fn sample_ode(model: &dyn VelocityModel, config: &SamplerConfig, n: usize) -> Result<SampleBatch> {
    let cfg = SamplerConfig {
        mode: Mode::Ode,
        ..config.clone()
    };
    Ok(sample(model, &cfg, n)?.batch)
}

/// Euler-Maruyama samples; guided when `guidance` is given.
pub fn sample_sde(
    model: &dyn VelocityModel,
    config: &SamplerConfig,
    n: usize,
    guidance: Option<Guidance>,
) -> Result<SampleBatch> {
    let cfg = SamplerConfig {
        mode: if guidance.is_some() { Mode::GuidedSde } else { Mode::Sde },
        guidance,
        ..config.clone()
    };
    Ok(sample(model, &cfg, n)?.batch)
}
