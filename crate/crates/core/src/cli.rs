//! Command-line pipeline: `gen-model → calibrate → rank → linearize → eval`,
//! plus the standalone `cost` calculator.
//!
//! Settings come from an optional JSON config file (`--config`), with
//! command-line flags taking precedence.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation_io::{
    dump_path, list_dump_layers, write_payload, DumpHeader, Role, HEADER_LEN,
};
use crate::calibration::{layer_from_dumps, synthetic_corpus, LayerStatistics};
use crate::costmodel::{cache_table, prefill_speedup, CacheTable, InferenceProfile};
use crate::error::{NblError, Result};
use crate::lmmse::{fit_lmmse, LinearMap};
use crate::ranking::{greedy_select, score_layer, select_one_shot, sort_scores, Criterion, LayerScore, SelectionPlan, Strategy};
use crate::spectral::Regularization;
use crate::stats::MomentAccumulator;
use crate::toymodel::{load_model_file, logit_drift, save_model_file, LogitDrift, ToyConfig, ToyTransformer};

/// Sequences forwarded together before their activations are appended to dumps.
const CALIBRATION_BATCH: usize = 64;

#[derive(Debug, Parser)]
#[command(name = "nbl", version, about = "Linearize attention sublayers with closed-form LMMSE maps")]
pub struct Cli {
    /// JSON pipeline config; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a randomly initialized toy model.
    GenModel(GenModelArgs),
    /// Dump per-layer attention inputs/outputs for a token stream.
    Calibrate(PipelineFlags),
    /// Score every dumped layer and write a JSON report.
    Rank(PipelineFlags),
    /// Fit linear maps for the selected layers and write the compressed model.
    Linearize(PipelineFlags),
    /// Compare two models on held-out tokens.
    Eval(EvalArgs),
    /// Print the KV-cache table and prefill speedups.
    Cost(CostArgs),
}

#[derive(Debug, Args)]
pub struct GenModelArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 2)]
    pub kv_groups: usize,
    #[arg(long, default_value_t = 256)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 256)]
    pub vocab: usize,
    #[arg(long, default_value_t = 128)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl GenModelArgs {
    pub fn toy_config(&self) -> ToyConfig {
        ToyConfig {
            layers: self.layers,
            d_model: self.d_model,
            heads: self.heads,
            kv_groups: self.kv_groups,
            d_ff: self.d_ff,
            vocab: self.vocab,
            max_len: self.max_len,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct PipelineFlags {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// JSON file with an array of token-id sequences.
    #[arg(long)]
    pub tokens: Option<PathBuf>,
    #[arg(long)]
    pub corpus_seed: Option<u64>,
    #[arg(long)]
    pub corpus_tokens: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub eval_seed: Option<u64>,
    #[arg(long)]
    pub eval_tokens: Option<usize>,
    #[arg(long)]
    pub dump_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub criterion: Option<Criterion>,
    #[arg(long, value_enum)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub ridge: Option<f64>,
    #[arg(long)]
    pub floor_rel: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model_a: Option<PathBuf>,
    #[arg(long)]
    pub model_b: PathBuf,
    #[command(flatten)]
    pub pipeline: PipelineFlags,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[arg(long = "ctx", num_args = 1.., value_delimiter = ',', default_values_t = [512u64, 1024, 2048, 4096, 128000])]
    pub contexts: Vec<u64>,
    #[arg(long = "m", num_args = 1.., value_delimiter = ',', default_values_t = [0u64, 4, 8, 12, 16])]
    pub linearized: Vec<u64>,
    #[arg(long, default_value_t = 64)]
    pub batch: u64,
    #[arg(long, default_value_t = 4096)]
    pub dim: u64,
    #[arg(long, default_value_t = 32)]
    pub heads: u64,
    #[arg(long, default_value_t = 8)]
    pub groups: u64,
    #[arg(long, default_value_t = 32)]
    pub layers: u64,
    #[arg(long, default_value_t = 2)]
    pub bytes: u64,
    /// Also write the table as JSON to this path.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub model: Option<PathBuf>,
    pub tokens: Option<PathBuf>,
    pub corpus_seed: u64,
    pub corpus_tokens: usize,
    pub seq_len: usize,
    pub eval_seed: u64,
    pub eval_tokens: usize,
    pub dump_dir: Option<PathBuf>,
    pub criterion: Criterion,
    pub strategy: Strategy,
    pub m: usize,
    pub report: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub ridge_rel: f64,
    pub floor_rel: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let reg = Regularization::default();
        PipelineConfig {
            model: None,
            tokens: None,
            corpus_seed: 0,
            corpus_tokens: 50_000,
            seq_len: 128,
            eval_seed: 1,
            eval_tokens: 8192,
            dump_dir: None,
            criterion: Criterion::CcaBound,
            strategy: Strategy::OneShot,
            m: 0,
            report: None,
            out: None,
            ridge_rel: reg.ridge_rel,
            floor_rel: reg.floor_rel,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| NblError::MissingInput(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| NblError::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn apply(&mut self, f: &PipelineFlags) {
        macro_rules! set {
            ($($field:ident => $target:ident),* $(,)?) => {
                $(if let Some(v) = &f.$field { self.$target = v.clone().into(); })*
            };
        }
        set!(
            model => model, tokens => tokens, corpus_seed => corpus_seed,
            corpus_tokens => corpus_tokens, seq_len => seq_len, eval_seed => eval_seed,
            eval_tokens => eval_tokens, dump_dir => dump_dir, criterion => criterion,
            strategy => strategy, m => m, report => report, out => out,
            ridge => ridge_rel, floor_rel => floor_rel,
        );
    }

    pub fn regularization(&self) -> Result<Regularization> {
        if self.ridge_rel.is_nan() || self.ridge_rel < 0.0 || self.floor_rel.is_nan() || self.floor_rel <= 0.0 {
            return Err(NblError::InvalidConfig("ridge must be >= 0 and floor_rel > 0".into()));
        }
        Ok(Regularization {
            ridge_rel: self.ridge_rel,
            floor_rel: self.floor_rel,
        })
    }

    fn require<'a>(&self, value: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
        value
            .as_deref()
            .filter(|p| !p.as_os_str().is_empty())
            .ok_or_else(|| NblError::InvalidConfig(format!("--{name} is required")))
    }

    fn model_path(&self) -> Result<&Path> {
        self.require(&self.model, "model")
    }

    fn dump_dir(&self) -> Result<&Path> {
        self.require(&self.dump_dir, "dump-dir")
    }

    /// Calibration sequences: the token file if given, else the synthetic corpus.
    pub fn calibration_sequences(&self, model: &ToyConfig) -> Result<Vec<Vec<u32>>> {
        self.sequences(model, self.corpus_seed, self.corpus_tokens)
    }

    pub fn eval_sequences(&self, model: &ToyConfig) -> Result<Vec<Vec<u32>>> {
        self.sequences(model, self.eval_seed, self.eval_tokens)
    }

    fn sequences(&self, model: &ToyConfig, seed: u64, count: usize) -> Result<Vec<Vec<u32>>> {
        if let Some(path) = &self.tokens {
            let text = fs::read_to_string(path)
                .map_err(|e| NblError::MissingInput(format!("{}: {e}", path.display())))?;
            let seqs: Vec<Vec<u32>> = serde_json::from_str(&text)
                .map_err(|e| NblError::InvalidConfig(format!("{}: {e}", path.display())))?;
            if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
                return Err(NblError::InvalidConfig("token file has empty sequences".into()));
            }
            return Ok(seqs);
        }
        if count == 0 {
            return Err(NblError::InvalidConfig("token count must be positive".into()));
        }
        synthetic_corpus(seed, count, self.seq_len.min(model.max_len), model.vocab)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrateSummary {
    pub layers: usize,
    pub token_count: u64,
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub index: usize,
    pub criterion: Criterion,
    pub score: f64,
    pub selected: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rho: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub criterion: Criterion,
    pub strategy: Strategy,
    pub m: usize,
    pub token_count: u64,
    /// Sorted ascending by score (first round for greedy).
    pub layers: Vec<ReportEntry>,
    pub selected: Vec<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub rounds: Vec<Vec<ReportEntry>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEval {
    pub layer: usize,
    pub fit_nmse: f64,
    pub empirical_nmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub token_count: u64,
    pub drift: LogitDrift,
    pub perplexity_a: f64,
    pub perplexity_b: f64,
    pub layers: Vec<LayerEval>,
}

pub fn cmd_gen_model(config: &ToyConfig, out: &Path) -> Result<ToyTransformer> {
    let model = ToyTransformer::init_random(*config)?;
    save_model_file(&model, out)?;
    Ok(model)
}

/// Streams NBLA dumps for every layer into `dump_dir`.
pub fn cmd_calibrate(cfg: &PipelineConfig) -> Result<CalibrateSummary> {
    let model = load_model_file(cfg.model_path()?)?;
    let dir = cfg.dump_dir()?;
    let seqs = cfg.calibration_sequences(&model.config)?;
    fs::create_dir_all(dir)?;
    let d = model.config.d_model;
    let total: u64 = seqs.iter().map(|s| s.len() as u64).sum();
    let layers: BTreeSet<usize> = (0..model.num_layers()).collect();

    let mut files = Vec::new();
    let mut sinks = Vec::new();
    for &k in &layers {
        for role in [Role::Input, Role::Output] {
            let path = dump_path(dir, k, role);
            let header = DumpHeader::new(k as u16, role, d as u32, total);
            let mut w = BufWriter::new(File::create(&path)?);
            w.write_all(&header.to_bytes())?;
            files.push(path);
            sinks.push(w);
        }
    }
    for batch in seqs.chunks(CALIBRATION_BATCH) {
        let captured = batch
            .par_iter()
            .map(|s| model.forward(s, &layers).map(|(_, c)| c))
            .collect::<Result<Vec<_>>>()?;
        for cap in &captured {
            for (k, (x, y)) in &cap.layers {
                write_payload(x, &mut sinks[2 * k])?;
                write_payload(y, &mut sinks[2 * k + 1])?;
            }
        }
    }
    for mut s in sinks {
        s.flush()?;
    }
    debug_assert!(files.iter().all(|f| {
        fs::metadata(f).map(|m| m.len() == HEADER_LEN as u64 + 4 * d as u64 * total).unwrap_or(false)
    }));
    Ok(CalibrateSummary {
        layers: layers.len(),
        token_count: total,
        files,
    })
}

/// Per-layer statistics from every dump pair in `dir`, ascending by layer.
pub fn statistics_from_dumps(dir: &Path) -> Result<Vec<LayerStatistics>> {
    let layers = list_dump_layers(dir)?;
    if layers.is_empty() {
        return Err(NblError::MissingInput(format!("no dumps in {}", dir.display())));
    }
    layers
        .par_iter()
        .map(|&k| layer_from_dumps(dir, k).and_then(|a| a.finish()))
        .collect()
}

fn entries(scores: &[LayerScore], selected: &[usize]) -> Vec<ReportEntry> {
    scores
        .iter()
        .map(|s| ReportEntry {
            index: s.layer_index,
            criterion: s.criterion,
            score: s.score,
            selected: selected.contains(&s.layer_index),
            rho: s.rho_spectrum.as_ref().map(|r| r.rho.clone()),
        })
        .collect()
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn score_all(stats: &[LayerStatistics], criterion: Criterion, reg: &Regularization) -> Result<Vec<LayerScore>> {
    let mut scores = stats
        .par_iter()
        .map(|s| score_layer(s, criterion, reg))
        .collect::<Result<Vec<_>>>()?;
    sort_scores(&mut scores);
    Ok(scores)
}

pub fn cmd_rank(cfg: &PipelineConfig) -> Result<RankReport> {
    let reg = cfg.regularization()?;
    let report = match cfg.strategy {
        Strategy::OneShot => {
            let stats = statistics_from_dumps(cfg.dump_dir()?)?;
            if cfg.m > stats.len() {
                return Err(NblError::InvalidArgument(format!("m = {} exceeds {} layers", cfg.m, stats.len())));
            }
            let scores = score_all(&stats, cfg.criterion, &reg)?;
            let plan = select_one_shot(&scores, cfg.m)?;
            RankReport {
                criterion: cfg.criterion,
                strategy: Strategy::OneShot,
                m: cfg.m,
                token_count: stats[0].covariances.sample_count,
                layers: entries(&scores, &plan.layers),
                selected: plan.layers,
                rounds: Vec::new(),
            }
        }
        Strategy::Greedy => {
            let model = load_model_file(cfg.model_path()?)?;
            let seqs = cfg.calibration_sequences(&model.config)?;
            let outcome = greedy_select(&model, &seqs, cfg.m, cfg.criterion, &reg)?;
            let token_count = seqs.iter().map(|s| s.len() as u64).sum();
            let first = if let Some(r) = outcome.rounds.first() {
                r.clone()
            } else {
                let accs = crate::calibration::calibrate(&model, &seqs, &model.attention_layers())?;
                let stats = accs.iter().map(|a| a.finish()).collect::<Result<Vec<_>>>()?;
                score_all(&stats, cfg.criterion, &reg)?
            };
            let selected = outcome.plan.layers.clone();
            RankReport {
                criterion: cfg.criterion,
                strategy: Strategy::Greedy,
                m: cfg.m,
                token_count,
                layers: entries(&first, &selected),
                rounds: outcome.rounds.iter().map(|r| entries(r, &selected)).collect(),
                selected,
            }
        }
    };
    if let Some(path) = &cfg.report {
        write_json(&report, path)?;
    }
    Ok(report)
}

fn read_report(path: &Path) -> Result<RankReport> {
    let text = fs::read_to_string(path)
        .map_err(|e| NblError::MissingInput(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Fits maps for the selected layers and writes the substituted model.
pub fn cmd_linearize(cfg: &PipelineConfig) -> Result<(SelectionPlan, ToyTransformer)> {
    let reg = cfg.regularization()?;
    let model = load_model_file(cfg.model_path()?)?;
    let out = cfg.require(&cfg.out, "out")?;
    if cfg.m > model.num_layers() {
        return Err(NblError::InvalidArgument(format!(
            "m = {} exceeds {} layers",
            cfg.m,
            model.num_layers()
        )));
    }
    let (plan, compressed) = match cfg.strategy {
        Strategy::Greedy => {
            let seqs = cfg.calibration_sequences(&model.config)?;
            let outcome = greedy_select(&model, &seqs, cfg.m, cfg.criterion, &reg)?;
            (outcome.plan, outcome.model)
        }
        Strategy::OneShot => {
            let dir = cfg.dump_dir()?;
            let plan = match cfg.report.as_deref().filter(|p| p.exists()) {
                Some(path) => {
                    let report = read_report(path)?;
                    let scores: Vec<LayerScore> = report
                        .layers
                        .iter()
                        .map(|e| LayerScore {
                            layer_index: e.index,
                            criterion: e.criterion,
                            score: e.score,
                            rho_spectrum: None,
                        })
                        .collect();
                    select_one_shot(&scores, cfg.m)?
                }
                None => {
                    let stats = statistics_from_dumps(dir)?;
                    select_one_shot(&score_all(&stats, cfg.criterion, &reg)?, cfg.m)?
                }
            };
            let maps = plan
                .layers
                .par_iter()
                .map(|&k| -> Result<LinearMap> {
                    let stats = layer_from_dumps(dir, k)?.finish()?;
                    fit_lmmse(&stats.covariances, k, &reg)
                })
                .collect::<Result<Vec<_>>>()?;
            let compressed = model.substitute(&plan, &maps)?;
            (plan, compressed)
        }
    };
    save_model_file(&compressed, out)?;
    Ok((plan, compressed))
}

/// Drift, perplexities, and per-layer NMSE of `b`'s linear maps measured on
/// `a`'s own sublayer activations.
pub fn cmd_eval(cfg: &PipelineConfig, model_a: &Path, model_b: &Path) -> Result<EvalReport> {
    let a = load_model_file(model_a)?;
    let b = load_model_file(model_b)?;
    if a.config.vocab != b.config.vocab {
        return Err(NblError::InvalidArgument(format!(
            "vocab mismatch: {} vs {}",
            a.config.vocab, b.config.vocab
        )));
    }
    let seqs = cfg.eval_sequences(&a.config)?;
    let drift = logit_drift(&a, &b, &seqs)?;
    let scored: Vec<Vec<u32>> = seqs.iter().filter(|s| s.len() >= 2).cloned().collect();
    let perplexity_a = a.corpus_perplexity(&scored)?;
    let perplexity_b = b.corpus_perplexity(&scored)?;

    let maps: Vec<&LinearMap> = (0..b.num_layers()).filter_map(|k| b.linear_map(k)).collect();
    let wanted: BTreeSet<usize> = maps.iter().map(|m| m.source_layer).collect();
    let d = a.config.d_model;
    let mut moments: Vec<MomentAccumulator> = maps.iter().map(|_| MomentAccumulator::new(d, d)).collect();
    let mut sq_err = vec![0.0f64; maps.len()];
    for s in &seqs {
        let (_, cap) = a.forward(s, &wanted)?;
        for (i, map) in maps.iter().enumerate() {
            let (x, y) = cap
                .get(map.source_layer)
                .ok_or_else(|| NblError::InvalidArgument(format!("model A has no layer {}", map.source_layer)))?;
            let yhat = map.apply_f64(&x.to_f64())?;
            sq_err[i] += (y.to_f64() - yhat).norm_squared();
            moments[i].accumulate(x, y)?;
        }
    }
    let layers = maps
        .iter()
        .zip(&moments)
        .zip(&sq_err)
        .map(|((map, acc), err)| -> Result<LayerEval> {
            let cs = acc.finalize()?;
            let n = acc.count() as f64;
            let total = cs.c_yy.trace();
            let empirical_nmse = if total > 0.0 { err / (n - 1.0) / total } else { 0.0 };
            Ok(LayerEval {
                layer: map.source_layer,
                fit_nmse: map.fit_nmse,
                empirical_nmse,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = EvalReport {
        token_count: seqs.iter().map(|s| s.len() as u64).sum(),
        drift,
        perplexity_a,
        perplexity_b,
        layers,
    };
    if let Some(path) = &cfg.report {
        write_json(&report, path)?;
    }
    Ok(report)
}

pub fn cmd_cost(args: &CostArgs) -> Result<CacheTable> {
    let base = InferenceProfile {
        layers: args.layers,
        linearized: 0,
        context: 1,
        d_model: args.dim,
        batch: args.batch,
        heads: args.heads,
        kv_groups: args.groups,
        bytes_per_elem: args.bytes,
    };
    base.validate()?;
    let table = cache_table(&base, &args.contexts, &args.linearized)?;
    if let Some(path) = &args.json {
        write_json(&table, path)?;
    }
    Ok(table)
}

fn build_config(file: Option<&Path>, flags: &PipelineFlags) -> Result<PipelineConfig> {
    let mut cfg = match file {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    cfg.apply(flags);
    Ok(cfg)
}

/// Runs one parsed command, printing a human-readable summary to `out`.
pub fn run<W: Write>(cli: &Cli, out: &mut W) -> Result<()> {
    let file = cli.config.as_deref();
    match &cli.command {
        Command::GenModel(args) => {
            let model = cmd_gen_model(&args.toy_config(), &args.out)?;
            writeln!(
                out,
                "wrote {} ({} layers, d={}, vocab={})",
                args.out.display(),
                model.num_layers(),
                model.config.d_model,
                model.config.vocab
            )?;
        }
        Command::Calibrate(flags) => {
            let cfg = build_config(file, flags)?;
            let summary = cmd_calibrate(&cfg)?;
            writeln!(out, "tokens: {}", summary.token_count)?;
            writeln!(out, "wrote {} dump files for {} layers", summary.files.len(), summary.layers)?;
        }
        Command::Rank(flags) => {
            let cfg = build_config(file, flags)?;
            let report = cmd_rank(&cfg)?;
            writeln!(out, "{:>6}  {:>12}  selected", "layer", report.criterion.name())?;
            for e in &report.layers {
                writeln!(out, "{:>6}  {:>12.6}  {}", e.index, e.score, if e.selected { "*" } else { "" })?;
            }
        }
        Command::Linearize(flags) => {
            let cfg = build_config(file, flags)?;
            let (plan, _) = cmd_linearize(&cfg)?;
            writeln!(out, "linearized layers: {:?}", plan.layers)?;
        }
        Command::Eval(args) => {
            let cfg = build_config(file, &args.pipeline)?;
            let model_a = match &args.model_a {
                Some(p) => p.clone(),
                None => cfg.model_path()?.to_path_buf(),
            };
            let report = cmd_eval(&cfg, &model_a, &args.model_b)?;
            writeln!(out, "tokens: {}", report.token_count)?;
            writeln!(out, "mean KL: {:.6e}  max |dlogit|: {:.6e}", report.drift.mean_kl, report.drift.max_abs)?;
            writeln!(out, "perplexity A: {:.4}  B: {:.4}", report.perplexity_a, report.perplexity_b)?;
            for l in &report.layers {
                writeln!(out, "layer {:>3}: fit NMSE {:.6}  held-out NMSE {:.6}", l.layer, l.fit_nmse, l.empirical_nmse)?;
            }
        }
        Command::Cost(args) => {
            let table = cmd_cost(args)?;
            write!(out, "{}", table.render())?;
            for &m in &args.linearized {
                if m == 0 {
                    continue;
                }
                let speedups = args
                    .contexts
                    .iter()
                    .map(|&n| {
                        let p = InferenceProfile { context: n, linearized: m, ..table.base };
                        prefill_speedup(&p).map(|s| format!("{n}: {s:.3}x"))
                    })
                    .collect::<Result<Vec<_>>>()?;
                writeln!(out, "prefill speedup NBL-{m}: {}", speedups.join(", "))?;
            }
        }
    }
    Ok(())
}

/// Caps rayon's pool from `NBL_THREADS` (unset or 0 = automatic).
pub fn configure_threads() {
    if let Some(n) = std::env::var("NBL_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

/// Process exit code for a result: 0 ok, 2 validation error, 1 runtime error.
pub fn exit_code(result: &Result<()>) -> u8 {
    match result {
        Ok(()) => 0,
        Err(e) if e.is_validation() => 2,
        Err(_) => 1,
    }
}
