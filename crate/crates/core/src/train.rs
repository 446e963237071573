//! Training with the compound objective `L_diff + beta * L_align` and Adam.
//!
//! `L_diff` regresses the velocity onto `x1 - x0` along the linear path
//! `x_t = (1 - t) x0 + t x1`; `L_align` is minus the mean cosine between the
//! projected tapped features at `(x_t, t)` and `phi(x0)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::batch::Point2;
use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::net::{Arch, ModelParams};
use crate::rng::{stream, Role};
use crate::toy;

/// Rows per gradient chunk. Fixed so the reduction order never depends on the
/// thread count.
pub const GRAD_CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub dataset_size: usize,
    pub learning_rate: f64,
    pub beta: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub arch: Arch,
    pub parallelism: Parallelism,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 512,
            dataset_size: 100_000,
            learning_rate: 1e-3,
            beta: 0.5,
            adam: AdamConfig::default(),
            seed: 0,
            arch: Arch::default(),
            parallelism: Parallelism::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Invalid(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.batch_size > self.dataset_size {
            return Err(Error::Invalid(format!(
                "batch size {} must be in 1..={}",
                self.batch_size, self.dataset_size
            )));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Invalid("Adam betas must lie in [0, 1) and epsilon be > 0".into()));
        }
        Ok(())
    }

    /// Flat description of everything that determines the trained weights.
    pub fn settings(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("dataset_size", self.dataset_size.to_string());
        put("learning_rate", format!("{:?}", self.learning_rate));
        put("beta", format!("{:?}", self.beta));
        put("adam_beta1", format!("{:?}", self.adam.beta1));
        put("adam_beta2", format!("{:?}", self.adam.beta2));
        put("adam_eps", format!("{:?}", self.adam.eps));
        put("seed", self.seed.to_string());
        put("depth", self.arch.depth.to_string());
        put("hidden", self.arch.hidden.to_string());
        put("tap", self.arch.tap.to_string());
        put("head_hidden", self.arch.head_hidden.to_string());
        m
    }
}

/// Per-epoch losses of a training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub loss_diff: Vec<f64>,
    pub loss_align: Vec<f64>,
    pub wall_seconds: f64,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    /// `epoch,loss_diff,loss_align`, epochs numbered from 1.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss_diff,loss_align\n");
        for (e, (d, a)) in self.loss_diff.iter().zip(&self.loss_align).enumerate() {
            let _ = writeln!(out, "{},{:.16e},{:.16e}", e + 1, d, a);
        }
        out
    }
}

/// Point on the linear path and its time derivative.
pub fn interpolate(x0: Point2, x1: Point2, t: f64) -> (Point2, Point2) {
    (
        [(1.0 - t) * x0[0] + t * x1[0], (1.0 - t) * x0[1] + t * x1[1]],
        [x1[0] - x0[0], x1[1] - x0[1]],
    )
}

/// One training example: clean point, its feature, noise and time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Example {
    pub x0: Point2,
    pub phi0: [f64; 2],
    pub x1: Point2,
    pub t: f64,
}

impl Example {
    pub fn new(x0: Point2, x1: Point2, t: f64) -> Result<Self> {
        Ok(Example {
            x0,
            phi0: toy::phi_vec(x0)?,
            x1,
            t,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss_diff: f64,
    pub loss_align: f64,
    /// Gradient of `loss_diff + beta * loss_align`.
    pub grads: ModelParams,
}

struct ChunkOutput {
    sq_err: f64,
    cos: f64,
    grads: ModelParams,
}

fn chunk_loss(params: &ModelParams, chunk: &[Example], beta: f64, scale: f64) -> Result<ChunkOutput> {
    let b = chunk.len();
    let mut input = Array2::zeros((b, 3));
    let mut target = Array2::zeros((b, 2));
    for (i, ex) in chunk.iter().enumerate() {
        let (xt, xdot) = interpolate(ex.x0, ex.x1, ex.t);
        input[[i, 0]] = xt[0];
        input[[i, 1]] = xt[1];
        input[[i, 2]] = ex.t;
        target[[i, 0]] = xdot[0];
        target[[i, 1]] = xdot[1];
    }
    let tape = params.forward_batch(input.view())?;
    let head = params.project_batch(&tape)?;
    let residual = tape.velocity() - &target;
    let sq_err = residual.iter().map(|r| r * r).sum::<f64>();
    let mut cos = 0.0;
    let mut dh = Array2::zeros((b, 2));
    for (i, ex) in chunk.iter().enumerate() {
        cos += head.features[[i, 0]] * ex.phi0[0] + head.features[[i, 1]] * ex.phi0[1];
        dh[[i, 0]] = -beta * scale * ex.phi0[0];
        dh[[i, 1]] = -beta * scale * ex.phi0[1];
    }
    let dv = residual * (2.0 * scale);
    let grads = params.backward_batch(
        &tape,
        Some(&head),
        Some(dv.view()),
        (beta != 0.0).then(|| dh.view()),
        true,
    )?;
    Ok(ChunkOutput {
        sq_err,
        cos,
        grads: grads.params.expect("requested"),
    })
}

/// Losses and gradients of the compound objective over a batch.
pub fn compound_loss(params: &ModelParams, batch: &[Example], beta: f64, par: Parallelism) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let chunks = par.map_chunks(batch, GRAD_CHUNK, |_, c| chunk_loss(params, c, beta, scale));
    let mut grads = params.zeros_like();
    let (mut sq_err, mut cos) = (0.0, 0.0);
    for chunk in chunks {
        let chunk = chunk?;
        sq_err += chunk.sq_err;
        cos += chunk.cos;
        grads.add_scaled(&chunk.grads, 1.0);
    }
    Ok(LossOutput {
        loss_diff: sq_err * scale,
        loss_align: -cos * scale,
        grads,
    })
}

/// First and second moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ModelParams,
    pub v: ModelParams,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        AdamState {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// In-place Adam update with bias correction.
    pub fn update(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64, cfg: &AdamConfig) -> Result<()> {
        if grads.slices().iter().any(|s| s.iter().any(|g| !g.is_finite())) {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powf(self.step as f64);
        let c2 = 1.0 - cfg.beta2.powf(self.step as f64);
        let ms = self.m.slices_mut();
        let vs = self.v.slices_mut();
        for (((p, g), m), v) in params.slices_mut().into_iter().zip(grads.slices()).zip(ms).zip(vs) {
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Functional Adam step.
pub fn adam_step(
    params: &ModelParams,
    grads: &ModelParams,
    state: &AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(ModelParams, AdamState)> {
    let mut p = params.clone();
    let mut s = state.clone();
    s.update(&mut p, grads, lr, cfg)?;
    Ok((p, s))
}

/// Fresh initialization for a configuration.
pub fn init_params(config: &TrainConfig) -> Result<ModelParams> {
    ModelParams::init(config.arch, &mut stream(config.seed, Role::Init, 0))
}

pub fn train(config: &TrainConfig) -> Result<(ModelParams, TrainReport)> {
    train_with_progress(config, |_, _, _| {})
}

/// Runs the full loop, calling `progress(epoch, loss_diff, loss_align)` after
/// every epoch.
pub fn train_with_progress(
    config: &TrainConfig,
    mut progress: impl FnMut(usize, f64, f64),
) -> Result<(ModelParams, TrainReport)> {
    config.validate()?;
    let started = Instant::now();
    let mut params = init_params(config)?;
    let mut report = TrainReport::default();
    if config.epochs == 0 {
        return Ok((params, report));
    }
    let data = toy::sample_p0(config.dataset_size, config.seed)?;
    let features = data
        .points
        .iter()
        .map(|&x| toy::phi_vec(x))
        .collect::<Result<Vec<_>>>()?;
    let mut adam = AdamState::new(&params);
    let batches = config.dataset_size / config.batch_size;
    let mut order: Vec<usize> = (0..config.dataset_size).collect();
    let mut examples = Vec::with_capacity(config.dataset_size);

    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut stream(config.seed, Role::Shuffle, epoch as u64));
        let mut noise = stream(config.seed, Role::TrainNoise, epoch as u64);
        examples.clear();
        for &i in &order {
            let x1 = toy::gaussian_point(&mut noise);
            let t: f64 = noise.random();
            examples.push(Example {
                x0: data.points[i],
                phi0: features[i],
                x1,
                t,
            });
        }
        let (mut diff_sum, mut align_sum) = (0.0, 0.0);
        for b in 0..batches {
            let batch = &examples[b * config.batch_size..(b + 1) * config.batch_size];
            let abort = |reason: String| Error::TrainingAborted {
                epoch: epoch + 1,
                batch: b + 1,
                reason,
            };
            let out = compound_loss(&params, batch, config.beta, config.parallelism).map_err(|e| abort(e.to_string()))?;
            if !out.loss_diff.is_finite() || !out.loss_align.is_finite() {
                return Err(abort(format!(
                    "non-finite loss (diff {}, align {})",
                    out.loss_diff, out.loss_align
                )));
            }
            adam.update(&mut params, &out.grads, config.learning_rate, &config.adam)
                .map_err(|e| abort(e.to_string()))?;
            diff_sum += out.loss_diff;
            align_sum += out.loss_align;
        }
        let (d, a) = (diff_sum / batches as f64, align_sum / batches as f64);
        report.loss_diff.push(d);
        report.loss_align.push(a);
        log::info!("epoch {}/{}: loss_diff {d:.5} loss_align {a:.5}", epoch + 1, config.epochs);
        progress(epoch + 1, d, a);
    }
    report.wall_seconds = started.elapsed().as_secs_f64();
    Ok((params, report))
}
