//! Run-config files and the `run`, `grid`, `bound` and `data` commands.
//!
//! A config file is flat `key = value` text; `#` starts a comment. Every
//! key maps onto one [`ExperimentConfig`] field or one grid setting.
//! Unknown or repeated keys are rejected with the offending line number;
//! missing keys keep the desk-scale defaults (or those of the `preset` key).

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use crate::analysis::{self, BoundParams, GridResult, GridSpec, TargetMetric, Variant};
use crate::engine::{self, Aggregation, ExperimentConfig, GlobalScheduler, LocalScheduler, ModelKind, Simulation};
use crate::error::{Error, Result};
use crate::metrics::{fmt_real, MetricsRecord, MetricsWriter};
use crate::schedulers::BetaClipMode;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "FEDSCHED_SEED";

/// Grid axes and variants for `cmd_grid`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSettings {
    pub alpha0_values: Vec<f64>,
    pub beta0_values: Vec<f64>,
    pub variants: Vec<Variant>,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigFile {
    pub experiment: ExperimentConfig,
    pub grid: Option<GridSettings>,
}

impl ConfigFile {
    pub fn grid_spec(&self) -> Result<GridSpec> {
        let g = self
            .grid
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("grid_alpha0, grid_beta0 and grid_variants are required".into()))?;
        Ok(GridSpec {
            alpha0_values: g.alpha0_values.clone(),
            beta0_values: g.beta0_values.clone(),
            base: self.experiment.clone(),
            variants: g.variants.clone(),
            seeds: g.seeds,
        })
    }
}

fn global_name(s: GlobalScheduler) -> &'static str {
    match s {
        GlobalScheduler::Fixed => "fixed",
        GlobalScheduler::FedHyperG => "fedhyper_g",
        GlobalScheduler::FedExp => "fedexp",
        GlobalScheduler::Decay => "decay",
        GlobalScheduler::Adam => "adam",
        GlobalScheduler::Adagrad => "adagrad",
        GlobalScheduler::Momentum => "momentum",
    }
}

fn parse_global(s: &str) -> std::result::Result<GlobalScheduler, String> {
    Ok(match s {
        "fixed" => GlobalScheduler::Fixed,
        "fedhyper_g" => GlobalScheduler::FedHyperG,
        "fedexp" => GlobalScheduler::FedExp,
        "decay" => GlobalScheduler::Decay,
        "adam" => GlobalScheduler::Adam,
        "adagrad" => GlobalScheduler::Adagrad,
        "momentum" => GlobalScheduler::Momentum,
        other => return Err(format!("unknown global scheduler `{other}`")),
    })
}

fn local_name(s: LocalScheduler) -> &'static str {
    match s {
        LocalScheduler::Fixed => "fixed",
        LocalScheduler::FedHyperSL => "fedhyper_sl",
        LocalScheduler::FedHyperCL => "fedhyper_cl",
        LocalScheduler::Decay => "decay",
    }
}

fn parse_local(s: &str) -> std::result::Result<LocalScheduler, String> {
    Ok(match s {
        "fixed" => LocalScheduler::Fixed,
        "fedhyper_sl" => LocalScheduler::FedHyperSL,
        "fedhyper_cl" => LocalScheduler::FedHyperCL,
        "decay" => LocalScheduler::Decay,
        other => return Err(format!("unknown local scheduler `{other}`")),
    })
}

fn model_name(m: ModelKind) -> &'static str {
    match m {
        ModelKind::Quadratic => "quadratic",
        ModelKind::LogisticRegression => "logistic_regression",
        ModelKind::Mlp => "mlp",
    }
}

/// `global+local`, e.g. `fedhyper_g+fedhyper_cl`.
pub fn variant_label(v: &Variant) -> String {
    format!("{}+{}", global_name(v.global), local_name(v.local))
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    let (g, l) = s
        .split_once('+')
        .ok_or_else(|| format!("variant `{s}` must look like global+local"))?;
    Ok(Variant {
        global: parse_global(g.trim())?,
        local: parse_local(l.trim())?,
    })
}

fn parse_num<T: std::str::FromStr>(s: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map_err(|e| format!("`{s}`: {e}"))
}

fn parse_list(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(',').map(|v| parse_num::<f64>(v.trim())).collect()
}

fn parse_bool(s: &str) -> std::result::Result<bool, String> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(format!("expected true or false, got `{other}`")),
    }
}

fn parse_opt_real(s: &str) -> std::result::Result<Option<f64>, String> {
    if s == "none" {
        Ok(None)
    } else {
        parse_num(s).map(Some)
    }
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn fmt_opt_real(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_else(|| "none".into())
}

/// Applies a named preset; `desk` is the default.
fn apply_preset(cfg: &mut ExperimentConfig, name: &str) -> std::result::Result<(), String> {
    match name {
        "desk" => *cfg = ExperimentConfig::default(),
        "full" => {
            *cfg = ExperimentConfig::default();
            cfg.num_clients = 100;
            cfg.clients_per_round = 10;
        }
        other => return Err(format!("unknown preset `{other}` (expected desk or full)")),
    }
    Ok(())
}

pub fn parse_config(text: &str) -> Result<ConfigFile> {
    let mut entries: Vec<(usize, String, String)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::ConfigParse {
            line: idx + 1,
            key: line.to_string(),
            message: "expected `key = value`".into(),
        })?;
        let key = key.trim().to_string();
        if let Some((first, _, _)) = entries.iter().find(|(_, k, _)| *k == key) {
            return Err(Error::ConfigParse {
                line: idx + 1,
                key,
                message: format!("duplicate key (first set on line {first})"),
            });
        }
        entries.push((idx + 1, key, value.trim().to_string()));
    }

    let mut cfg = ExperimentConfig::default();
    if let Some((line, key, value)) = entries.iter().find(|(_, k, _)| k == "preset") {
        apply_preset(&mut cfg, value).map_err(|message| Error::ConfigParse {
            line: *line,
            key: key.clone(),
            message,
        })?;
    }
    let mut grid_alpha = None;
    let mut grid_beta = None;
    let mut grid_variants = None;
    let mut grid_seeds = 1usize;

    for (line, key, value) in &entries {
        let v = value.as_str();
        let res: std::result::Result<(), String> = (|| {
            match key.as_str() {
                "preset" => {}
                "model" => {
                    cfg.model = match v {
                        "quadratic" => ModelKind::Quadratic,
                        "logistic_regression" => ModelKind::LogisticRegression,
                        "mlp" => ModelKind::Mlp,
                        other => return Err(format!("unknown model `{other}`")),
                    }
                }
                "input_dim" => cfg.input_dim = parse_num(v)?,
                "num_classes" => cfg.num_classes = parse_num(v)?,
                "hidden_dim" => cfg.hidden_dim = parse_num(v)?,
                "quadratic_center" => cfg.quadratic_center = parse_list(v)?,
                "client_centers" => {
                    cfg.client_centers = if v == "none" {
                        None
                    } else {
                        Some(
                            v.split(';')
                                .map(|c| parse_list(c.trim()))
                                .collect::<std::result::Result<_, _>>()?,
                        )
                    }
                }
                "samples_per_class" => cfg.samples_per_class = parse_num(v)?,
                "cluster_spread" => cfg.cluster_spread = parse_num(v)?,
                "test_fraction" => cfg.test_fraction = parse_num(v)?,
                "num_clients" => cfg.num_clients = parse_num(v)?,
                "clients_per_round" => cfg.clients_per_round = parse_num(v)?,
                "rounds" => cfg.rounds = parse_num(v)?,
                "local_steps" => cfg.local_steps = parse_num(v)?,
                "batch_size" => cfg.batch_size = parse_num(v)?,
                "initial_alpha" => cfg.initial_alpha = parse_num(v)?,
                "initial_beta" => cfg.initial_beta = parse_num(v)?,
                "scheduler_global" => cfg.scheduler_global = parse_global(v)?,
                "scheduler_local" => cfg.scheduler_local = parse_local(v)?,
                "gamma_alpha" => cfg.bounds.gamma_alpha = parse_num(v)?,
                "gamma_beta" => cfg.bounds.gamma_beta = parse_num(v)?,
                "beta_clip" => {
                    cfg.bounds.beta_mode = match v {
                        "relative" => BetaClipMode::Relative,
                        "absolute" => BetaClipMode::Absolute,
                        other => return Err(format!("unknown beta_clip `{other}`")),
                    }
                }
                "decay_factor" => cfg.decay_factor = parse_num(v)?,
                "fedexp_epsilon" => cfg.fedexp_epsilon = parse_num(v)?,
                "adam_beta1" => cfg.optimizer.adam_beta1 = parse_num(v)?,
                "adam_beta2" => cfg.optimizer.adam_beta2 = parse_num(v)?,
                "adam_tau" => cfg.optimizer.adam_tau = parse_num(v)?,
                "adagrad_tau" => cfg.optimizer.adagrad_tau = parse_num(v)?,
                "momentum" => cfg.optimizer.momentum = parse_num(v)?,
                "dirichlet_alpha" => cfg.dirichlet_alpha = parse_num(v)?,
                "aggregation" => {
                    cfg.aggregation = match v {
                        "uniform" => Aggregation::Uniform,
                        "size_weighted" => Aggregation::SizeWeighted,
                        other => return Err(format!("unknown aggregation `{other}`")),
                    }
                }
                "freeze_hypergradients" => cfg.freeze_hypergradients = parse_bool(v)?,
                "seed" => cfg.seed = parse_num(v)?,
                "workers" => cfg.workers = parse_num(v)?,
                "record_wall_time" => cfg.record_wall_time = parse_bool(v)?,
                "target_loss" => cfg.target_loss = parse_opt_real(v)?,
                "target_accuracy" => cfg.target_accuracy = parse_opt_real(v)?,
                "grid_alpha0" => grid_alpha = Some(parse_list(v)?),
                "grid_beta0" => grid_beta = Some(parse_list(v)?),
                "grid_variants" => {
                    grid_variants = Some(
                        v.split(',')
                            .map(|s| parse_variant(s.trim()))
                            .collect::<std::result::Result<Vec<_>, _>>()?,
                    )
                }
                "grid_seeds" => grid_seeds = parse_num(v)?,
                _ => return Err("unknown key".into()),
            }
            Ok(())
        })();
        res.map_err(|message| Error::ConfigParse {
            line: *line,
            key: key.clone(),
            message,
        })?;
    }

    let grid = match (grid_alpha, grid_beta, grid_variants) {
        (None, None, None) => None,
        (Some(alpha0_values), Some(beta0_values), Some(variants)) => Some(GridSettings {
            alpha0_values,
            beta0_values,
            variants,
            seeds: grid_seeds,
        }),
        _ => {
            return Err(Error::InvalidConfig(
                "grid_alpha0, grid_beta0 and grid_variants must be given together".into(),
            ))
        }
    };
    Ok(ConfigFile { experiment: cfg, grid })
}

/// Writes every key explicitly; `parse_config` reads it back unchanged.
pub fn serialize_config(file: &ConfigFile) -> String {
    let c = &file.experiment;
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    kv("model", model_name(c.model).into());
    kv("input_dim", c.input_dim.to_string());
    kv("num_classes", c.num_classes.to_string());
    kv("hidden_dim", c.hidden_dim.to_string());
    kv("quadratic_center", fmt_list(&c.quadratic_center));
    kv(
        "client_centers",
        c.client_centers
            .as_ref()
            .map(|cs| cs.iter().map(|v| fmt_list(v)).collect::<Vec<_>>().join("; "))
            .unwrap_or_else(|| "none".into()),
    );
    kv("samples_per_class", c.samples_per_class.to_string());
    kv("cluster_spread", format!("{:?}", c.cluster_spread));
    kv("test_fraction", format!("{:?}", c.test_fraction));
    kv("num_clients", c.num_clients.to_string());
    kv("clients_per_round", c.clients_per_round.to_string());
    kv("rounds", c.rounds.to_string());
    kv("local_steps", c.local_steps.to_string());
    kv("batch_size", c.batch_size.to_string());
    kv("initial_alpha", format!("{:?}", c.initial_alpha));
    kv("initial_beta", format!("{:?}", c.initial_beta));
    kv("scheduler_global", global_name(c.scheduler_global).into());
    kv("scheduler_local", local_name(c.scheduler_local).into());
    kv("gamma_alpha", format!("{:?}", c.bounds.gamma_alpha));
    kv("gamma_beta", format!("{:?}", c.bounds.gamma_beta));
    kv(
        "beta_clip",
        match c.bounds.beta_mode {
            BetaClipMode::Relative => "relative",
            BetaClipMode::Absolute => "absolute",
        }
        .into(),
    );
    kv("decay_factor", format!("{:?}", c.decay_factor));
    kv("fedexp_epsilon", format!("{:?}", c.fedexp_epsilon));
    kv("adam_beta1", format!("{:?}", c.optimizer.adam_beta1));
    kv("adam_beta2", format!("{:?}", c.optimizer.adam_beta2));
    kv("adam_tau", format!("{:?}", c.optimizer.adam_tau));
    kv("adagrad_tau", format!("{:?}", c.optimizer.adagrad_tau));
    kv("momentum", format!("{:?}", c.optimizer.momentum));
    kv("dirichlet_alpha", format!("{:?}", c.dirichlet_alpha));
    kv(
        "aggregation",
        match c.aggregation {
            Aggregation::Uniform => "uniform",
            Aggregation::SizeWeighted => "size_weighted",
        }
        .into(),
    );
    kv("freeze_hypergradients", c.freeze_hypergradients.to_string());
    kv("seed", c.seed.to_string());
    kv("workers", c.workers.to_string());
    kv("record_wall_time", c.record_wall_time.to_string());
    kv("target_loss", fmt_opt_real(c.target_loss));
    kv("target_accuracy", fmt_opt_real(c.target_accuracy));
    if let Some(g) = &file.grid {
        kv("grid_alpha0", fmt_list(&g.alpha0_values));
        kv("grid_beta0", fmt_list(&g.beta0_values));
        kv(
            "grid_variants",
            g.variants.iter().map(variant_label).collect::<Vec<_>>().join(", "),
        );
        kv("grid_seeds", g.seeds.to_string());
    }
    s
}

/// Reads a config file and applies the seed override from the environment.
pub fn load_config(path: &Path) -> Result<ConfigFile> {
    let text = fs::read_to_string(path)?;
    let mut file = parse_config(&text)?;
    if let Ok(seed) = std::env::var(SEED_ENV) {
        file.experiment.seed = seed
            .trim()
            .parse()
            .map_err(|e| Error::InvalidConfig(format!("{SEED_ENV}=`{seed}`: {e}")))?;
    }
    file.experiment.validate()?;
    Ok(file)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub records: Vec<MetricsRecord>,
    pub time_to_loss_target: Option<usize>,
    pub time_to_accuracy_target: Option<usize>,
}

impl RunSummary {
    pub fn one_line(&self, cfg: &ExperimentConfig) -> String {
        let last = self.records.last().expect("a finished run has at least one round");
        let mut s = format!("rounds={} final_train_loss={:.6}", self.records.len(), last.train_loss);
        if let Some(a) = last.test_accuracy {
            let _ = write!(s, " final_test_accuracy={a:.4}");
        }
        let _ = write!(s, " final_alpha={:.4}", last.alpha);
        let show = |t: Option<usize>| t.map_or_else(|| "not reached".to_string(), |r| format!("round {r}"));
        if let Some(target) = cfg.target_loss {
            let _ = write!(s, " loss<={target}: {}", show(self.time_to_loss_target));
        }
        if let Some(target) = cfg.target_accuracy {
            let _ = write!(s, " accuracy>={target}: {}", show(self.time_to_accuracy_target));
        }
        s
    }
}

/// Runs one experiment, streaming metrics rows to `output` as they arrive.
/// On divergence the rows already written stay on disk.
pub fn cmd_run(config: &Path, output: &Path, workers: Option<usize>) -> Result<(ExperimentConfig, RunSummary)> {
    let mut cfg = load_config(config)?.experiment;
    if let Some(w) = workers {
        cfg.workers = w;
        cfg.validate()?;
    }
    let mut writer = MetricsWriter::new(BufWriter::new(File::create(output)?))?;
    let records = engine::run_experiment_with(&cfg, |r| writer.write(r))?;
    let summary = RunSummary {
        time_to_loss_target: cfg
            .target_loss
            .and_then(|t| analysis::time_to_target(&records, t, TargetMetric::LossBelow)),
        time_to_accuracy_target: cfg
            .target_accuracy
            .and_then(|t| analysis::time_to_target(&records, t, TargetMetric::AccuracyAbove)),
        records,
    };
    Ok((cfg, summary))
}

fn write_matrix(path: &Path, alpha0: &[f64], beta0: &[f64], cells: &[Vec<f64>]) -> Result<()> {
    let mut s = String::from("alpha0\\beta0");
    for b in beta0 {
        let _ = write!(s, ",{b:?}");
    }
    s.push('\n');
    for (a, row) in alpha0.iter().zip(cells) {
        let _ = write!(s, "{a:?}");
        for v in row {
            let _ = write!(s, ",{}", fmt_real(*v));
        }
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// Files written by [`write_grid`], in creation order.
pub fn write_grid(result: &GridResult, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (v, variant) in result.variants.iter().enumerate() {
        let path = dir.join(format!("abs_{}.csv", variant_label(variant)));
        write_matrix(&path, &result.alpha0_values, &result.beta0_values, &result.accuracy[v])?;
        written.push(path);
    }
    let baseline = variant_label(&result.variants[0]);
    for (v, variant) in result.variants.iter().enumerate().skip(1) {
        let path = dir.join(format!("delta_{}_vs_{baseline}.csv", variant_label(variant)));
        write_matrix(&path, &result.alpha0_values, &result.beta0_values, &result.delta(v))?;
        written.push(path);
    }
    let mut failures = String::from("alpha0,beta0,variant,seed,reason\n");
    for f in &result.failures {
        let _ = writeln!(
            failures,
            "{:?},{:?},{},{},{}",
            f.alpha0,
            f.beta0,
            variant_label(&result.variants[f.variant]),
            f.seed,
            f.reason.replace([',', '\n'], ";")
        );
    }
    let path = dir.join("failures.csv");
    fs::write(&path, failures)?;
    written.push(path);
    Ok(written)
}

pub fn cmd_grid(config: &Path, out_dir: &Path) -> Result<(GridResult, Vec<PathBuf>)> {
    let spec = load_config(config)?.grid_spec()?;
    let result = analysis::robustness_grid(&spec)?;
    let files = write_grid(&result, out_dir)?;
    Ok((result, files))
}

/// Text report of `P`, `Q` and the bound; one row per `T` with a sweep.
pub fn cmd_bound(params: &BoundParams, sweep: Option<&[usize]>) -> Result<String> {
    params.validate()?;
    let mut out = String::new();
    match sweep {
        None => {
            let _ = writeln!(out, "P={}", analysis::bound_p(params));
            let _ = writeln!(out, "Q={}", analysis::bound_q(params));
            let _ = writeln!(out, "bound={}", analysis::bound_value(params));
        }
        Some(ts) => {
            out.push_str("T,P,Q,bound\n");
            for &t in ts {
                let p = params.with_rounds(t);
                p.validate()?;
                let _ = writeln!(
                    out,
                    "{t},{},{},{}",
                    analysis::bound_p(&p),
                    analysis::bound_q(&p),
                    analysis::bound_value(&p)
                );
            }
        }
    }
    Ok(out)
}

/// Dumps the generated training split as delimited text.
pub fn cmd_data(config: &Path, output: &Path) -> Result<usize> {
    let cfg = load_config(config)?.experiment;
    let sim = Simulation::new(cfg)?;
    sim.train_set().write_text(BufWriter::new(File::create(output)?))?;
    Ok(sim.train_set().len())
}

/// Reads a dataset written by [`cmd_data`].
pub fn read_dataset(path: &Path) -> Result<crate::datagen::Dataset> {
    crate::datagen::Dataset::read_text(BufReader::new(File::open(path)?))
}
