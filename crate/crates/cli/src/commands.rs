use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use macformer::encoder::Fusion;
use macformer::eval::{bench, evaluate, prepare_dataset, robustness_sweep, DegradationAxis};
use macformer::generator::generate_synthetic_scenario;
use macformer::mtos::{checkpoint, log_to_csv, restore, Trainer};
use macformer::nn::checkpoint::write_atomic;
use macformer::nn::Checkpoint;
use macformer::scene::{parse_scenario, serialize_scenario, Scenario};
use macformer::Error;
use serde::Serialize;

use crate::config::RunConfig;
use crate::{Axis, Cli, Command};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// 2 for validation problems, 3 for numeric-health aborts, 4 for IO.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Io { .. } => 4,
                Error::NumericHealth(_) => 3,
                _ => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 4;
        }
    }
    2
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.train.seed = cfg.seed;
    if cli.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()).into());
    }
    Ok(cfg)
}

fn prepare_out(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes)?;
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value).context("serializing JSON")?;
    v.push(b'\n');
    Ok(v)
}

/// Seed of the `index`-th generated scenario.
pub fn scenario_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index)
}

/// Every `*.json` scenario in `dir` except the manifest, in file-name order.
pub fn load_corpus(dir: &Path) -> Result<Vec<Scenario>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json") && p.file_name().is_some_and(|n| n != MANIFEST_FILE))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::EmptyDataset).with_context(|| format!("no scenario files in {}", dir.display()));
    }
    files.iter().map(|p| load_scenario(p)).collect()
}

fn load_scenario(path: &Path) -> Result<Scenario> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    parse_scenario(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<(macformer::model::Model, macformer::nn::ParamStore, Option<Trainer>)> {
    let ck = Checkpoint::load(path)?;
    restore(&ck).with_context(|| format!("restoring {}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .context("starting the worker pool")?;
    match &cli.command {
        Command::GenData { count } => gen_data(&cli, cfg, *count),
        Command::Train {
            data,
            resume,
            epochs,
            no_couple_loss,
            no_capture_loss,
        } => {
            let mut cfg = cfg;
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            cfg.train.use_couple_loss &= !no_couple_loss;
            cfg.train.use_capture_loss &= !no_capture_loss;
            train(&cli, cfg, data, resume.as_deref())
        }
        Command::Predict {
            checkpoint,
            scenario,
            joint,
        } => predict(&cli, cfg, checkpoint, scenario, *joint),
        Command::Eval { checkpoint, data } => eval(&cli, cfg, checkpoint, data),
        Command::Robustness {
            checkpoint,
            data,
            axis,
            levels,
        } => robustness(&cli, cfg, checkpoint, data, *axis, levels),
        Command::Bench {
            compare_fusion,
            passes,
            warmup,
            batch,
        } => run_bench(&cli, cfg, *compare_fusion, *passes, *warmup, *batch),
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    count: usize,
    seed: u64,
    scenario_seeds: Vec<u64>,
    files: Vec<String>,
    generator: &'a macformer::generator::GeneratorConfig,
}

fn gen_data(cli: &Cli, cfg: RunConfig, count: Option<usize>) -> Result<()> {
    cfg.data.generator.validate()?;
    let count = count.unwrap_or(cfg.data.count);
    prepare_out(&cli.out, &cfg)?;
    let mut files = Vec::with_capacity(count);
    let mut seeds = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let seed = scenario_seed(cfg.seed, i);
        let s = generate_synthetic_scenario(seed, &cfg.data.generator)?;
        let name = format!("{i:06}.json");
        write(&cli.out.join(&name), &serialize_scenario(&s))?;
        files.push(name);
        seeds.push(seed);
    }
    let manifest = Manifest {
        count,
        seed: cfg.seed,
        scenario_seeds: seeds,
        files,
        generator: &cfg.data.generator,
    };
    write(&cli.out.join(MANIFEST_FILE), &to_json(&manifest)?)?;
    info!("wrote {count} scenarios to {}", cli.out.display());
    Ok(())
}

fn train(cli: &Cli, cfg: RunConfig, data: &Path, resume: Option<&Path>) -> Result<()> {
    let scenarios = load_corpus(data)?;
    let (model, mut store, mut trainer) = match resume {
        Some(path) => {
            let (model, store, trainer) = load_checkpoint(path)?;
            let Some(mut trainer) = trainer else {
                bail!(Error::Checkpoint(format!("{} holds no optimizer state", path.display())));
            };
            if model.config != cfg.model {
                warn!("resuming with the model configuration stored in {}", path.display());
            }
            trainer.config.epochs = cfg.train.epochs;
            trainer.config.use_couple_loss = cfg.train.use_couple_loss;
            trainer.config.use_capture_loss = cfg.train.use_capture_loss;
            (model, store, trainer)
        }
        None => {
            cfg.validate()?;
            let (model, store) = macformer::model::Model::new(cfg.model.clone(), cfg.seed)?;
            let trainer = Trainer::new(cfg.train.clone(), &store)?;
            (model, store, trainer)
        }
    };
    let mut resolved = cfg;
    resolved.model = model.config.clone();
    resolved.train = trainer.config.clone();
    let inputs = prepare_dataset(&model.config, &scenarios, true)
        .with_context(|| format!("corpus {} does not fit the model configuration", data.display()))?;
    prepare_out(&cli.out, &resolved)?;

    let first_epoch = trainer.epoch;
    info!(
        "training {} scenarios from epoch {first_epoch} to {}",
        inputs.len(),
        trainer.config.epochs
    );
    let result = trainer.train(&model, &mut store, &inputs, cli.threads);
    let log_path = cli.out.join(LOG_FILE);
    let mut csv = log_to_csv(&trainer.log)?;
    if resume.is_some() && log_path.exists() && first_epoch > 0 {
        let mut previous = fs::read(&log_path).map_err(|e| io_err(&log_path, e))?;
        let body = csv.iter().position(|&b| b == b'\n').map_or(&csv[..0], |i| &csv[i + 1..]);
        previous.extend_from_slice(body);
        csv = previous;
    }
    write(&log_path, &csv)?;
    result?;
    checkpoint(&model, &store, Some(&trainer))?.save(&cli.out.join(CHECKPOINT_FILE))?;
    if let Some(last) = trainer.log.last() {
        info!("epoch {} loss {:.5}", last.epoch, last.loss_total);
    }
    Ok(())
}

fn predict(cli: &Cli, cfg: RunConfig, ckpt: &Path, scenario: &Path, joint: bool) -> Result<()> {
    let (model, store, _) = load_checkpoint(ckpt)?;
    let s = load_scenario(scenario)?;
    let incompatible = |e: Error| match e {
        Error::Shape(m) | Error::Capacity(m) => Error::Checkpoint(format!(
            "{} does not fit the checkpoint's model: {m}",
            scenario.display()
        )),
        other => other,
    };
    let anchor = s.meta.history.saturating_sub(1);
    let output = if joint {
        let mut sets = Vec::new();
        for a in &s.agents {
            if !a.states.get(anchor).is_some_and(|st| st.valid) {
                warn!("agent {} is not observed at the last history step; skipped", a.id);
                continue;
            }
            sets.push(model.predict_scenario(&store, &s, a.id).map_err(incompatible)?);
        }
        to_json(&sets)?
    } else {
        let target = s
            .target()
            .ok_or_else(|| Error::Label(format!("{} has no target agent", scenario.display())))?;
        to_json(&model.predict_scenario(&store, &s, target.id).map_err(incompatible)?)?
    };
    let mut resolved = cfg;
    resolved.model = model.config.clone();
    prepare_out(&cli.out, &resolved)?;
    write(&cli.out.join("predictions.json"), &output)?;
    print!("{}", String::from_utf8_lossy(&output));
    Ok(())
}

fn eval(cli: &Cli, cfg: RunConfig, ckpt: &Path, data: &Path) -> Result<()> {
    let (model, store, _) = load_checkpoint(ckpt)?;
    let scenarios = load_corpus(data)?;
    let report = evaluate(&model, &store, &scenarios)?;
    let mut resolved = cfg;
    resolved.model = model.config.clone();
    prepare_out(&cli.out, &resolved)?;
    let csv = report.to_csv()?;
    write(&cli.out.join("metrics.csv"), &csv)?;
    print!("{}", String::from_utf8_lossy(&csv));
    Ok(())
}

fn robustness(cli: &Cli, cfg: RunConfig, ckpt: &Path, data: &Path, axis: Axis, levels: &[f64]) -> Result<()> {
    let (model, store, _) = load_checkpoint(ckpt)?;
    let scenarios = load_corpus(data)?;
    let axis = match axis {
        Axis::Mask => DegradationAxis::MaskRate,
        Axis::Noise => DegradationAxis::NoiseSigma,
    };
    let curve = robustness_sweep(&model, &store, &scenarios, axis, levels, cfg.seed)?;
    let mut resolved = cfg;
    resolved.model = model.config.clone();
    prepare_out(&cli.out, &resolved)?;
    let stem = format!("robustness_{}", axis.as_str());
    write(&cli.out.join(format!("{stem}.csv")), &curve.to_csv()?)?;
    write(&cli.out.join(format!("{stem}.svg")), curve.to_svg().as_bytes())?;
    info!("wrote {stem}.csv and {stem}.svg to {}", cli.out.display());
    Ok(())
}

fn run_bench(cli: &Cli, cfg: RunConfig, compare: bool, passes: usize, warmup: usize, batch: usize) -> Result<()> {
    cfg.model.validate()?;
    let mut fusions = vec![Fusion::Bilateral];
    if compare {
        fusions.push(Fusion::Stack);
    }
    let mut csv = String::from("fusion,param_count,fusion_param_count,median_forward_latency_ms,batch,passes\n");
    for fusion in fusions {
        let mc = macformer::model::ModelConfig {
            fusion,
            ..cfg.model.clone()
        };
        let r = bench(&mc, &cfg.data.generator, cfg.seed, batch, passes, warmup)?;
        let name = match fusion {
            Fusion::Bilateral => "bilateral",
            Fusion::Stack => "stack",
        };
        csv.push_str(&format!(
            "{name},{},{},{},{},{}\n",
            r.param_count, r.fusion_param_count, r.median_forward_latency_ms, r.batch, r.passes
        ));
    }
    prepare_out(&cli.out, &cfg)?;
    write(&cli.out.join("bench.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}
