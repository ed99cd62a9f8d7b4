//! Experiment runner behind the `osnn` binary.
//!
//! A run reads one [`ExperimentConfig`], dispatches on its task and writes
//! every artifact as `<stem>-<hash>.<ext>` in the output directory, where
//! `<hash>` is the first 12 hex digits of the config hash.

pub mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use osnn::butterfly::{configure_dft, configure_hadamard, expressivity_report, ExpressivityMode};
use osnn::cost::{wdm_multiplier, ComponentLibrary, CostReport};
use osnn::data::{load_mnist, Dataset};
use osnn::devices::{sample_measurements, ChipInstance, Mapping, MeasurementPlan};
use osnn::numerics::{Complex64, ComplexMatrix};
use osnn::layers::{build_paper_model, default_gain, BlockedLinear, ConvSpec, Layer, OsnnModel};
use osnn::training::{
    calibrate_devices, evaluate, evaluate_on_chip, fit_dpe, metrics_csv, prune_sigma_groups, train, Backend, DpeModel,
    Evaluation, PruneMask,
};
use osnn::OsnnError;

pub use config::{ConfigError, ExperimentConfig, Task};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Osnn(#[from] OsnnError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl RunError {
    /// Process exit code: 2 for configuration errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            _ => 1,
        }
    }
}

pub type RunResult<T> = std::result::Result<T, RunError>;

/// What a run produced.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub task: Task,
    pub config_hash: String,
    pub artifacts: Vec<PathBuf>,
    pub report: serde_json::Value,
}

impl RunSummary {
    /// Path of the artifact whose file name starts with `stem-`.
    pub fn artifact(&self, stem: &str) -> Option<&Path> {
        let prefix = format!("{}-", stem);
        self.artifacts
            .iter()
            .find(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with(&prefix)))
            .map(|p| p.as_path())
    }
}

struct Outputs {
    dir: PathBuf,
    hash: String,
    artifacts: Vec<PathBuf>,
}

impl Outputs {
    fn short(&self) -> &str {
        &self.hash[..12]
    }

    fn write(&mut self, stem: &str, ext: &str, contents: &str) -> RunResult<()> {
        let path = self.dir.join(format!("{}-{}.{}", stem, self.short(), ext));
        std::fs::write(&path, contents).map_err(|source| RunError::Io {
            path: path.clone(),
            source,
        })?;
        self.artifacts.push(path);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, stem: &str, value: &T) -> RunResult<()> {
        let text = serde_json::to_string_pretty(value).expect("artifact serializes");
        self.write(stem, "json", &text)
    }

    /// CSV with a leading comment naming the config hash.
    fn csv(&mut self, stem: &str, body: &str) -> RunResult<()> {
        let text = format!("# config_hash={}\n{}", self.hash, body);
        self.write(stem, "csv", &text)
    }
}

/// Runs `config` and writes its artifacts.
pub fn run(config: &ExperimentConfig) -> RunResult<RunSummary> {
    config.validate()?;
    let hash = config.hash();
    std::fs::create_dir_all(&config.out_dir).map_err(|source| RunError::Io {
        path: config.out_dir.clone(),
        source,
    })?;
    let mut out = Outputs {
        dir: config.out_dir.clone(),
        hash: hash.clone(),
        artifacts: Vec::new(),
    };
    out.json("config", config)?;
    let body = match config.task {
        Task::Train => run_train(config, &mut out)?,
        Task::Eval => run_eval(config, &mut out)?,
        Task::ChipEval => run_chip_eval(config, &mut out)?,
        Task::Prune => run_prune(config, &mut out)?,
        Task::Fidelity => run_fidelity(config)?,
        Task::Cost => run_cost(config, &mut out)?,
        Task::DpeFit => run_dpe_fit(config, &mut out)?,
        Task::Calibrate => run_calibrate(config, &mut out)?,
    };
    let report = json!({
        "task": config.task.name(),
        "config_hash": hash,
        "seed": config.seed,
        "results": body,
    });
    out.json("report", &report)?;
    Ok(RunSummary {
        task: config.task,
        config_hash: hash,
        artifacts: out.artifacts,
        report,
    })
}

fn train_set(config: &ExperimentConfig) -> RunResult<Dataset> {
    let (img, lab) = config.data.train_paths();
    let ds = load_mnist(&img, &lab, "train")?;
    Ok(match config.data.train_limit {
        Some(n) => ds.head(n),
        None => ds,
    })
}

fn test_set(config: &ExperimentConfig) -> RunResult<Dataset> {
    let (img, lab) = config.data.test_paths();
    let ds = load_mnist(&img, &lab, "test")?;
    Ok(match config.data.test_subset {
        Some(n) if n < ds.len() => {
            let mut idx: Vec<usize> = (0..ds.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
            idx.truncate(n);
            idx.sort_unstable();
            ds.select(&idx, "test-subset")
        }
        _ => ds,
    })
}

/// The configured model: a checkpoint, or a fresh one seeded by the master
/// seed.
pub fn build_model(config: &ExperimentConfig) -> RunResult<OsnnModel> {
    let mc = &config.model;
    if let Some(path) = &mc.checkpoint {
        return Ok(OsnnModel::load(path)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let Some(specs) = &mc.layers else {
        return Ok(build_paper_model(mc.k, mc.transform, &mut rng)?);
    };
    let mut cur = mc.input;
    let mut layers = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let path = format!("model.layers[{}]", i);
        let layer = match *spec {
            config::LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let cs = ConvSpec::new(cur[0], out_channels, (kernel, kernel), stride, padding)
                    .map_err(|e| ConfigError::new(&path, e.to_string()))?;
                let (h, w) = cs.output_size(cur[1], cur[2]).map_err(|e| ConfigError::new(&path, e.to_string()))?;
                let mut linear = BlockedLinear::with_transform(out_channels, cs.patch_len(), mc.k, mc.transform)?;
                linear.init_uniform(&mut rng);
                cur = [out_channels, h, w];
                Layer::Conv {
                    spec: cs,
                    gain: default_gain(mc.k, cs.patch_len()),
                    linear,
                }
            }
            config::LayerSpec::Relu => Layer::Relu,
            config::LayerSpec::AdaptiveAvgPool { out_h, out_w } => {
                cur = [cur[0], out_h, out_w];
                Layer::AdaptiveAvgPool { out_h, out_w }
            }
            config::LayerSpec::Flatten => {
                cur = [cur.iter().product(), 1, 1];
                Layer::Flatten
            }
            config::LayerSpec::Linear { out_features } => {
                let fan_in: usize = cur.iter().product();
                let mut linear = BlockedLinear::with_transform(out_features, fan_in, mc.k, mc.transform)?;
                linear.init_uniform(&mut rng);
                cur = [out_features, 1, 1];
                Layer::Linear {
                    gain: default_gain(mc.k, fan_in),
                    linear,
                }
            }
        };
        layers.push(layer);
    }
    OsnnModel::new(mc.input, layers).map_err(|e| ConfigError::new("model.layers", e.to_string()).into())
}

fn first_layer(model: &OsnnModel) -> RunResult<BlockedLinear> {
    model
        .blocked_layers()
        .next()
        .cloned()
        .ok_or_else(|| ConfigError::new("model", "has no blocked layer").into())
}

fn chip(config: &ExperimentConfig, model: &OsnnModel) -> RunResult<ChipInstance> {
    let cc = &config.chip;
    let mut chip = match &cc.instance {
        Some(path) => ChipInstance::load(path)?,
        None => ChipInstance::fabricate(&first_layer(model)?, cc.variation, cc.noise)?,
    };
    chip.set_noise(cc.noise)?;
    Ok(chip)
}

fn confusion_csv(confusion: &[Vec<usize>]) -> String {
    let mut s = String::from("true");
    for j in 0..confusion.len() {
        write!(s, ",{}", j).unwrap();
    }
    s.push('\n');
    for (i, row) in confusion.iter().enumerate() {
        write!(s, "{}", i).unwrap();
        for c in row {
            write!(s, ",{}", c).unwrap();
        }
        s.push('\n');
    }
    s
}

/// Mean accuracy over the configured noise streams; the confusion matrix
/// is the one of the first stream.
fn averaged(seeds: usize, base: u64, mut eval: impl FnMut(u64) -> RunResult<Evaluation>) -> RunResult<(f64, Evaluation)> {
    let mut first = None;
    let mut total = 0.0;
    for s in 0..seeds {
        let e = eval(base.wrapping_add(s as u64))?;
        total += e.accuracy;
        first.get_or_insert(e);
    }
    Ok((total / seeds as f64, first.expect("at least one seed")))
}

fn run_train(config: &ExperimentConfig, out: &mut Outputs) -> RunResult<serde_json::Value> {
    let model = build_model(config)?;
    let tr = train_set(config)?;
    let te = test_set(config)?;
    let backend = match &config.model.dpe {
        Some(path) => Backend::Dpe(Box::new(load_json::<DpeModel>(path)?)),
        None => Backend::Ideal,
    };
    let outcome = train(&model, &tr, Some(&te), &config.train_config(), &backend)?;
    let ev = evaluate(&outcome.model, &te, &osnn::devices::NoiseSpec::none(), config.seed, config.threads)?;
    out.csv("metrics", &metrics_csv(&outcome.metrics))?;
    out.json("model", &outcome.model)?;
    out.csv("confusion", &confusion_csv(&ev.confusion))?;
    Ok(json!({
        "epochs": outcome.metrics.len(),
        "test_images": te.len(),
        "test_accuracy": ev.accuracy,
        "test_loss": ev.loss,
    }))
}

fn run_eval(config: &ExperimentConfig, out: &mut Outputs) -> RunResult<serde_json::Value> {
    if config.model.checkpoint.is_none() {
        return Err(ConfigError::new("model.checkpoint", "eval needs a trained checkpoint").into());
    }
    let model = build_model(config)?;
    let te = test_set(config)?;
    let (acc, ev) = averaged(config.eval.noise_seeds, config.seed, |s| {
        Ok(evaluate(&model, &te, &config.eval.noise, s, config.threads)?)
    })?;
    out.csv("confusion", &confusion_csv(&ev.confusion))?;
    Ok(json!({
        "test_images": te.len(),
        "noise_seeds": config.eval.noise_seeds,
        "accuracy": acc,
        "label_counts": te.label_histogram(10),
    }))
}

fn run_chip_eval(config: &ExperimentConfig, out: &mut Outputs) -> RunResult<serde_json::Value> {
    if config.model.checkpoint.is_none() {
        return Err(ConfigError::new("model.checkpoint", "chip-eval needs a trained checkpoint").into());
    }
    let model = build_model(config)?;
    let mut chip = chip(config, &model)?;
    let mut calibrated_here = false;
    if config.eval.mapping == Mapping::Calibrated && chip.calibration().is_none() {
        let table = calibrate_devices(&chip, config.chip.calibration_points)?;
        chip.set_calibration(table)?;
        calibrated_here = true;
    }
    let te = test_set(config)?;
    let (acc, ev) = averaged(config.eval.noise_seeds, config.seed, |s| {
        Ok(evaluate_on_chip(&model, &chip, &te, config.eval.mapping, config.eval.mode, s, config.threads)?)
    })?;
    out.json("chip", &chip)?;
    out.csv("confusion", &confusion_csv(&ev.confusion))?;
    Ok(json!({
        "test_images": te.len(),
        "noise_seeds": config.eval.noise_seeds,
        "mapping": config.eval.mapping,
        "mode": config.eval.mode,
        "calibrated_here": calibrated_here,
        "accuracy": acc,
    }))
}

fn run_prune(config: &ExperimentConfig, out: &mut Outputs) -> RunResult<serde_json::Value> {
    let model = build_model(config)?;
    let tr = train_set(config)?;
    let te = test_set(config)?;
    let none = osnn::devices::NoiseSpec::none();
    let before = evaluate(&model, &te, &none, config.seed, config.threads)?;
    let outcome = prune_sigma_groups(&model, &tr, Some(&te), &config.train_config())?;
    let after = evaluate(&outcome.model, &te, &none, config.seed, config.threads)?;
    let area = masked_area(config, &outcome.model, &outcome.mask)?;
    out.csv("metrics", &metrics_csv(&outcome.metrics))?;
    out.json("model", &outcome.model)?;
    out.json("mask", &outcome.mask)?;
    out.csv("confusion", &confusion_csv(&after.confusion))?;
    Ok(json!({
        "test_images": te.len(),
        "accuracy_before": before.accuracy,
        "accuracy_after": after.accuracy,
        "prune": outcome.report,
        "area_mm2_unpruned": area.0,
        "area_mm2_pruned": area.1,
        "area_reduction": 1.0 - area.1 / area.0,
    }))
}

fn library(config: &ExperimentConfig) -> RunResult<ComponentLibrary> {
    let cc = &config.cost;
    match &cc.library_file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| RunError::Io {
                path: path.clone(),
                source,
            })?;
            ComponentLibrary::from_toml(&text).map_err(|e| ConfigError::new("cost.library_file", e.to_string()).into())
        }
        None => ComponentLibrary::preset(&cc.library).map_err(|e| ConfigError::new("cost.library", e.to_string()).into()),
    }
}

/// Total area of every blocked layer, without and with `mask`.
pub fn masked_area(config: &ExperimentConfig, model: &OsnnModel, mask: &PruneMask) -> RunResult<(f64, f64)> {
    let lib = library(config)?;
    let rate = config.cost.reconfig_rate;
    let routing = &config.cost.routing;
    let mut full = 0.0;
    let mut pruned = 0.0;
    for (layer, lm) in model.blocked_layers().zip(&mask.layers) {
        let (m, n, k) = (layer.m(), layer.n(), layer.k());
        let all = osnn::training::LayerMask {
            kept: vec![true; lm.kept.len()],
            ..lm.clone()
        };
        full += CostReport::with_mask(m, n, k, &all, &lib, routing, rate)?.area_mm2;
        pruned += CostReport::with_mask(m, n, k, lm, &lib, routing, rate)?.area_mm2;
    }
    Ok((full, pruned))
}

fn run_fidelity(config: &ExperimentConfig) -> RunResult<serde_json::Value> {
    let fc = &config.fidelity;
    let modes = [
        ExpressivityMode::BOnly,
        ExpressivityMode::Bsp,
        ExpressivityMode::SigmaOnly,
        ExpressivityMode::MultiWavelengthNonneg,
    ];
    let report = expressivity_report(fc.k, fc.targets, &modes, config.seed, &fc.budget)?;
    // Fixed transforms the networks must reach exactly.
    let reach = |cfg: osnn::butterfly::PhaseConfiguration, target: ComplexMatrix| -> RunResult<f64> {
        let u = cfg.network().transfer_matrix(&cfg)?;
        Ok(osnn::butterfly::fidelity(&u, &target))
    };
    let norm = 1.0 / (fc.k as f64).sqrt();
    let dft_target = ComplexMatrix::from_fn(fc.k, fc.k, |r, c| {
        Complex64::from_polar(norm, -2.0 * std::f64::consts::PI * (r * c) as f64 / fc.k as f64)
    });
    let hadamard_target = ComplexMatrix::from_fn(fc.k, fc.k, |r, c| {
        Complex64::new(if (r & c).count_ones() % 2 == 0 { norm } else { -norm }, 0.0)
    });
    let dft = reach(configure_dft(fc.k, false)?, dft_target)?;
    let hadamard = reach(configure_hadamard(fc.k)?, hadamard_target)?;
    Ok(json!({
        "report": report,
        "dft_fidelity": dft,
        "hadamard_fidelity": hadamard,
    }))
}

fn run_cost(config: &ExperimentConfig, out: &mut Outputs) -> RunResult<serde_json::Value> {
    let cc = &config.cost;
    let lib = library(config)?;
    let mut reports = Vec::new();
    let mut table = String::new();
    for &arch in &cc.architectures {
        let mut r = CostReport::new(arch, cc.m, cc.n, cc.k, &lib, &cc.routing, cc.reconfig_rate)
            .map_err(|e| ConfigError::new("cost", e.to_string()))?;
        if cc.wdm {
            r = r.with_wdm(wdm_multiplier(cc.k)?);
        }
        r.check()?;
        table.push_str(&r.table());
        table.push('\n');
        reports.push(r);
    }
    out.json("cost", &reports)?;
    out.write("cost", "txt", &format!("# config_hash={}\n{}", out.hash.clone(), table))?;
    Ok(serde_json::to_value(&reports).expect("reports serialize"))
}

fn run_dpe_fit(config: &ExperimentConfig, out: &mut Outputs) -> RunResult<serde_json::Value> {
    let model = build_model(config)?;
    let chip = chip(config, &model)?;
    let samples = sample_measurements(&chip, config.chip.measurements, &MeasurementPlan::default(), config.seed)?;
    let layer = chip.layer();
    let init = DpeModel::nominal(layer.b_config(), layer.p_config())?;
    let budget = osnn::training::DpeBudget {
        seed: config.seed,
        ..config.chip.dpe
    };
    let fit = fit_dpe(&samples, &init, &budget)?;
    let mut trace = String::from("epoch,train_mse\n");
    for (i, v) in fit.trace.iter().enumerate() {
        writeln!(trace, "{},{:.9e}", i, v).unwrap();
    }
    out.csv("metrics", &trace)?;
    out.json("dpe", &fit.model)?;
    out.json("chip", &chip)?;
    Ok(json!({
        "measurements": samples.len(),
        "parameters": fit.model.parameter_count(),
        "train_rmse": fit.train_rmse,
        "holdout_rmse": fit.holdout_rmse,
        "epochs": fit.trace.len(),
    }))
}

fn run_calibrate(config: &ExperimentConfig, out: &mut Outputs) -> RunResult<serde_json::Value> {
    let model = build_model(config)?;
    let mut chip = chip(config, &model)?;
    let table = calibrate_devices(&chip, config.chip.calibration_points)?;
    let worst = table.worst_residual();
    chip.set_calibration(table)?;
    out.json("chip", &chip)?;
    Ok(json!({
        "sweep_points": config.chip.calibration_points,
        "worst_residual": worst,
    }))
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> RunResult<T> {
    let text = std::fs::read_to_string(path).map_err(|source| RunError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| ConfigError::new(path.display().to_string(), e.to_string()).into())
}
