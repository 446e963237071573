use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use tiltflow::checkpoint::{load_checkpoint, save_checkpoint_with_config};
use tiltflow::config::RunConfig;
use tiltflow::eval::{self, EmbedScanConfig, GridSettings};
use tiltflow::gradcheck::{self, GradCheckConfig};
use tiltflow::sampler::{self, Guidance, Mode, SamplerConfig};
use tiltflow::toy::{self, ConditionFeature};
use tiltflow::{train, Error, FeatureMap, ModelParams, SampleBatch};

use crate::args::{Cli, Command, Common, Overrides};
use crate::Failure;

type CmdResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Loads the config file (if any) and applies flag overrides.
fn resolve(common: &Common, groups: &[&dyn Overrides]) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path).map_err(|e| match e {
            Error::Io { path, source } => usage(format!("cannot read config file {}: {source}", path.display())),
            other => usage(other.to_string()),
        })?,
        None => RunConfig::default(),
    };
    let mut pairs = Vec::new();
    common.overrides(&mut pairs);
    for g in groups {
        g.overrides(&mut pairs);
    }
    for (key, value) in pairs {
        cfg.set(key, &value).map_err(|e| usage(format!("--{}: {e}", key.replace('_', "-"))))?;
    }
    Ok(cfg)
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    p.as_deref().ok_or_else(|| usage(format!("missing required --{flag}")))
}

fn load_model(cfg: &RunConfig) -> Result<ModelParams, Failure> {
    Ok(load_checkpoint(required(&cfg.ckpt, "ckpt")?)?)
}

fn read_batch(path: &Path) -> Result<SampleBatch, Failure> {
    Ok(SampleBatch::read_csv(path)?)
}

/// The condition feature, normalized with a warning when not unit length.
fn condition(cfg: &RunConfig) -> Result<[f64; 2], Failure> {
    let f = cfg.feature.ok_or_else(|| usage("missing required --feature"))?;
    let norm = f[0].hypot(f[1]);
    if norm.is_nan() || norm <= 1e-12 {
        return Err(usage("--feature has zero length"));
    }
    if (norm - 1.0).abs() > 1e-9 {
        log::warn!("feature ({}, {}) has norm {norm}; normalizing", f[0], f[1]);
    }
    Ok([f[0] / norm, f[1] / norm])
}

fn check_lambda(cfg: &RunConfig) -> CmdResult {
    if !(cfg.lambda >= 0.0 && cfg.lambda.is_finite()) {
        return Err(usage(format!("--lambda must be >= 0, got {}", cfg.lambda)));
    }
    Ok(())
}

fn sampler_config(cfg: &RunConfig, guidance: Option<Guidance>) -> Result<SamplerConfig, Failure> {
    let sc = SamplerConfig {
        steps: cfg.steps,
        t_start: cfg.t_start,
        t_end: cfg.t_end,
        mode: if guidance.is_some() { Mode::GuidedSde } else { cfg.mode },
        guidance,
        seed: cfg.seed,
        ..Default::default()
    };
    sc.validate().map_err(|e| usage(e.to_string()))?;
    Ok(sc)
}

fn guidance(cfg: &RunConfig) -> Result<Guidance, Failure> {
    check_lambda(cfg)?;
    let target = FeatureMap::unit_vector(condition(cfg)?)?;
    let potential = cfg.potential.bind(&target).map_err(|e| usage(e.to_string()))?;
    Ok(Guidance::new(potential, cfg.lambda)?.with_convention(cfg.guidance_convention))
}

fn write_batch(cfg: &RunConfig, batch: &SampleBatch) -> CmdResult {
    let out = required(&cfg.out, "out")?;
    batch.write_csv(out)?;
    cfg.write_sidecar(out)?;
    log::info!("wrote {} samples to {}", batch.len(), out.display());
    Ok(())
}

fn emit_json(cfg: &RunConfig, value: &Value) -> CmdResult {
    let text = serde_json::to_string_pretty(value).expect("serializable report") + "\n";
    match &cfg.out {
        Some(out) => {
            std::fs::write(out, text).map_err(|source| Error::Io {
                path: out.clone(),
                source,
            })?;
            cfg.write_sidecar(out)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

pub fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Train { common, train } => cmd_train(&resolve(&common, &[&train])?),
        Command::Sample { common, sampler } => cmd_sample(&resolve(&common, &[&sampler])?),
        Command::Guide {
            common,
            sampler,
            guidance,
        } => cmd_guide(&resolve(&common, &[&sampler, &guidance])?),
        Command::Oracle { common, guidance, n } => {
            let mut cfg = resolve(&common, &[&guidance])?;
            if let Some(n) = n {
                cfg.n = n;
            }
            cmd_oracle(&cfg)
        }
        Command::Eval { common, eval } => cmd_eval(&resolve(&common, &[&eval])?),
        Command::Gradcheck {
            common,
            instances,
            tolerance,
        } => {
            let mut cfg = resolve(&common, &[])?;
            cfg.instances = instances.unwrap_or(cfg.instances);
            cfg.tolerance = tolerance.unwrap_or(cfg.tolerance);
            cmd_gradcheck(&cfg)
        }
        Command::Embedscan {
            common,
            sampler,
            guidance,
            pairs,
            n_per_condition,
        } => {
            let mut cfg = resolve(&common, &[&sampler, &guidance])?;
            cfg.pairs = pairs.unwrap_or(cfg.pairs);
            cfg.n_per_condition = n_per_condition.unwrap_or(cfg.n_per_condition);
            cmd_embedscan(&cfg)
        }
        Command::Plot { common, a, b } => {
            let mut cfg = resolve(&common, &[])?;
            cfg.a = a.or(cfg.a);
            cfg.b = b.or(cfg.b);
            cmd_plot(&cfg)
        }
    }
}

fn cmd_train(cfg: &RunConfig) -> CmdResult {
    let tc = cfg.train.clone();
    tc.validate().map_err(|e| usage(e.to_string()))?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("model.ckpt"));
    let (params, report) = train::train(&tc)?;
    save_checkpoint_with_config(&params, &out, Some(&tc.settings()))?;
    let mut loss = out.as_os_str().to_owned();
    loss.push(".loss.csv");
    let loss = PathBuf::from(loss);
    std::fs::write(&loss, report.to_csv()).map_err(|source| Error::Io {
        path: loss.clone(),
        source,
    })?;
    let cfg = RunConfig {
        out: Some(out.clone()),
        ..cfg.clone()
    };
    cfg.write_sidecar(&out)?;
    log::info!(
        "trained {} epochs in {:.1}s; wrote {} and {}",
        tc.epochs,
        report.wall_seconds,
        out.display(),
        loss.display()
    );
    Ok(())
}

fn cmd_sample(cfg: &RunConfig) -> CmdResult {
    if cfg.mode == Mode::GuidedSde {
        return Err(usage("sample draws unguided samples; use `guide` for guided_sde"));
    }
    let sc = sampler_config(cfg, None)?;
    let model = load_model(cfg)?;
    let batch = sampler::sample(&model, &sc, cfg.n)?.batch;
    write_batch(cfg, &batch)
}

fn cmd_guide(cfg: &RunConfig) -> CmdResult {
    if cfg.mode == Mode::Ode {
        return Err(usage("guidance needs the SDE sampler; drop --mode ode"));
    }
    let sc = sampler_config(cfg, Some(guidance(cfg)?))?;
    let model = load_model(cfg)?;
    let batch = sampler::sample(&model, &sc, cfg.n)?.batch;
    write_batch(cfg, &batch)
}

fn cmd_oracle(cfg: &RunConfig) -> CmdResult {
    check_lambda(cfg)?;
    let cond = ConditionFeature::new(condition(cfg)?, cfg.lambda).map_err(|e| usage(e.to_string()))?;
    let batch = toy::rejection_sample(&cond, cfg.n, cfg.seed)?;
    write_batch(cfg, &batch)
}

fn cmd_eval(cfg: &RunConfig) -> CmdResult {
    let a = read_batch(required(&cfg.a, "a")?)?;
    let report = match cfg.metric.as_str() {
        "coverage" => json!({ "coverage": eval::coverage(&a.points, cfg.margin)? }),
        metric => {
            let b = read_batch(required(&cfg.b, "b")?)?;
            if a.is_empty() || b.is_empty() {
                return Err(usage("eval needs non-empty batches"));
            }
            if metric == "energy" {
                json!({ "energy_distance": eval::energy_distance_with(
                    &a.points,
                    &b.points,
                    eval::PAIR_CAP,
                    cfg.seed,
                    Default::default(),
                )? })
            } else {
                json!({ "skl": eval::symmetric_kl_grid(&a, &b, GridSettings::default())? })
            }
        }
    };
    emit_json(cfg, &report)
}

fn cmd_gradcheck(cfg: &RunConfig) -> CmdResult {
    let report = gradcheck::run_all(&GradCheckConfig {
        seed: cfg.seed,
        instances: cfg.instances,
        tolerance: cfg.tolerance,
    })?;
    for s in &report.suites {
        log::info!(
            "{:<14} max rel err {:.2e} over {} entries ({} skipped at kinks): {}",
            s.name,
            s.max_rel_err,
            s.checked,
            s.skipped_kinks,
            if s.passed { "pass" } else { "FAIL" }
        );
    }
    emit_json(cfg, &json!({ "gradcheck": report }))?;
    if !report.passed {
        return Err(Failure::Runtime(Error::Invalid("gradient check failed".into())));
    }
    Ok(())
}

fn cmd_embedscan(cfg: &RunConfig) -> CmdResult {
    check_lambda(cfg)?;
    let sc = sampler_config(
        &RunConfig {
            mode: Mode::Sde,
            ..cfg.clone()
        },
        None,
    )?;
    let model = load_model(cfg)?;
    let pairs = eval::random_pairs(cfg.pairs, cfg.seed);
    let scan = EmbedScanConfig {
        pairs: cfg.pairs,
        lambda: cfg.lambda,
        n_per_condition: cfg.n_per_condition,
        sampler: sc,
        convention: cfg.guidance_convention,
        seed: cfg.seed,
    };
    let report = eval::embed_scan(&model, &pairs, &scan)?;
    log::info!("A {:.4} B {:.4} B/A {:.3} correlation {:.3}", report.a, report.b, report.ratio, report.correlation);
    emit_json(cfg, &json!({ "embed_scan": report }))
}

fn cmd_plot(cfg: &RunConfig) -> CmdResult {
    let base = read_batch(required(&cfg.a, "a")?)?;
    let overlay = cfg.b.as_deref().map(read_batch).transpose()?;
    if base.is_empty() && overlay.as_ref().is_none_or(|o| o.is_empty()) {
        log::warn!("nothing to plot; writing axes only");
    }
    let svg = tiltflow::plot::scatter_svg(&base.points, overlay.as_ref().map(|o| o.points.as_slice()));
    let out = required(&cfg.out, "out")?;
    std::fs::write(out, svg).map_err(|source| Error::Io {
        path: out.to_path_buf(),
        source,
    })?;
    cfg.write_sidecar(out)?;
    Ok(())
}
