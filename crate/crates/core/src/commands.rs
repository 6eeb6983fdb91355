//! Command-line entry points: the thin binary delegates everything here.
//!
//! Every command reads one [`RunConfig`] (TOML or JSON), honors the global
//! `--seed`, `--out`, and `--workers` overrides, writes its artifacts under
//! the run directory, and records them in `manifest.json`. Commands that
//! depend on earlier stages fail with a `MissingArtifact` error naming the
//! file and the command that produces it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::annotate::{annotate, build_prompt, Prompt, TemplateRegistry};
use crate::backbone::{
    curves_to_csv, Backbone, BackboneExample, EmbeddingMatrix,
};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::grpo::{curve_to_csv, mix_seed, prepare_examples, run_pipeline};
use crate::guidance::{
    extract_attributes, guided_forecast, train_joint, AttributeClass, ConditionalHead,
    ForecastRecord, JointExample,
};
use crate::indicators::compute_panel;
use crate::market::{
    ingest_csv, make_windows, split_chronological, synth_market, write_csv, ColumnSchema,
    DatasetManifest, OhlcvBar, PriceWindow, WindowPair,
};
use crate::plot::{equity_svg, forecast_svg};
use crate::policy::{parse_output, PolicyCheckpoint, ToyPolicy, ToyPolicySpec};
use crate::portfolio::{align_panel, backtest as run_backtest, ledger_to_csv, BacktestResult};

/// Verbal technical-analysis forecasting workbench.
#[derive(Debug, Parser)]
#[command(name = "tickertalk", version, about)]
pub struct Cli {
    /// Path to a run config (.toml or .json); defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the run directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the worker-thread count.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generates a seeded synthetic market into the run directory.
    Synth,
    /// Ingests an OHLCV CSV file into the run's price store.
    Ingest {
        /// Source CSV file.
        #[arg(long)]
        input: PathBuf,
        /// Symbol name when the file has no symbol column.
        #[arg(long)]
        symbol: Option<String>,
    },
    /// Computes indicator panels and verbal annotations per symbol.
    Annotate,
    /// Trains a model stage.
    Train {
        #[command(subcommand)]
        target: TrainTarget,
    },
    /// Produces guided forecasts for the latest window of every symbol.
    Forecast,
    /// Runs the daily-rebalanced Markowitz backtest on guided forecasts.
    Backtest,
    /// Writes a markdown report summarizing all artifacts present.
    Report,
}

#[derive(Debug, Subcommand)]
pub enum TrainTarget {
    /// Supervised dual-branch backbone.
    Backbone,
    /// Three-stage verbal reasoner (RL, rejection SFT, RL).
    Reasoner,
    /// Conditional guidance head on the frozen backbone.
    Joint,
}

/// Parses argv and runs; returns the process exit code (0 ok, 1 runtime
/// failure, 2 usage or config error) and prints failures as one JSON object
/// on stderr.
pub fn execute<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.exit_code() == 0 { 0 } else { 2 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(err) => {
            let kind = match &err {
                Error::Config(_) => "config",
                Error::Parameter(_) => "parameter",
                Error::MissingArtifact(_) => "missing_artifact",
                Error::Schema(_) => "schema",
                Error::Ingestion { .. } => "ingestion",
                Error::Domain(_) => "domain",
                Error::Divergence { .. } => "divergence",
                Error::Io(_) => "io",
                Error::Csv(_) => "csv",
                Error::Json(_) => "json",
            };
            eprintln!(
                "{}",
                serde_json::json!({ "error": kind, "message": err.to_string() })
            );
            match err {
                Error::Config(_) | Error::Parameter(_) => 2,
                _ => 1,
            }
        }
    }
}

/// Loads the config and dispatches one command.
pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    if let Some(workers) = cli.workers {
        cfg.workers = workers;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;

    match cli.command {
        Command::Synth => cmd_synth(&cfg),
        Command::Ingest { input, symbol } => cmd_ingest(&cfg, &input, symbol.as_deref()),
        Command::Annotate => cmd_annotate(&cfg),
        Command::Train { target } => match target {
            TrainTarget::Backbone => cmd_train_backbone(&cfg),
            TrainTarget::Reasoner => cmd_train_reasoner(&cfg),
            TrainTarget::Joint => cmd_train_joint(&cfg),
        },
        Command::Forecast => cmd_forecast(&cfg),
        Command::Backtest => cmd_backtest(&cfg),
        Command::Report => cmd_report(&cfg),
    }
}

/// Per-run manifest of produced artifacts, keyed by command.
#[derive(Debug, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub steps: BTreeMap<String, Vec<String>>,
}

impl RunManifest {
    fn path(out_dir: &Path) -> PathBuf {
        out_dir.join("manifest.json")
    }

    fn load_or_default(out_dir: &Path) -> Result<Self> {
        let path = Self::path(out_dir);
        if path.exists() {
            Ok(serde_json::from_str(&std::fs::read_to_string(&path)?)?)
        } else {
            Ok(Self::default())
        }
    }

    fn record(cfg: &RunConfig, step: &str, artifacts: &[PathBuf]) -> Result<()> {
        let mut manifest = Self::load_or_default(&cfg.out_dir)?;
        manifest.seed = cfg.seed;
        manifest.steps.insert(
            step.to_string(),
            artifacts
                .iter()
                .map(|p| {
                    p.strip_prefix(&cfg.out_dir)
                        .unwrap_or(p)
                        .to_string_lossy()
                        .into_owned()
                })
                .collect(),
        );
        std::fs::write(
            Self::path(&cfg.out_dir),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }
}

fn require(path: &Path, produced_by: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(format!(
            "{} not found; run `tickertalk {produced_by}` first",
            path.display()
        )))
    }
}

fn prices_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("prices")
}

fn checkpoint(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join("checkpoints").join(name)
}

/// Reads every `prices/*.csv` back into per-symbol bar series.
fn load_prices(cfg: &RunConfig) -> Result<BTreeMap<String, Vec<OhlcvBar>>> {
    let dir = prices_dir(cfg);
    require(&dir, "synth")?;
    let schema = ColumnSchema::default();
    let mut out = BTreeMap::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "csv").unwrap_or(false))
        .collect();
    entries.sort();
    for path in entries {
        let symbol = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let result = ingest_csv(&path, &schema)?;
        for (name, bars) in result.bars_by_symbol {
            let key = if name.is_empty() { symbol.clone() } else { name };
            out.insert(key, bars);
        }
    }
    if out.is_empty() {
        return Err(Error::MissingArtifact(format!(
            "no price CSVs in {}; run `tickertalk synth` or `tickertalk ingest` first",
            dir.display()
        )));
    }
    Ok(out)
}

/// Windows and chronological split for every symbol, pooled and re-sorted
/// by anchor date so the split stays chronological across symbols.
fn build_pairs(
    cfg: &RunConfig,
    bars_by_symbol: &BTreeMap<String, Vec<OhlcvBar>>,
) -> Result<Vec<WindowPair>> {
    let mut pairs = Vec::new();
    for (symbol, bars) in bars_by_symbol {
        let windows = make_windows(
            symbol,
            bars,
            cfg.windows.t,
            cfg.windows.horizon,
            cfg.windows.stride,
        )?;
        pairs.extend(windows.pairs);
    }
    if pairs.is_empty() {
        return Err(Error::Parameter(
            "price history is too short to build any training windows".into(),
        ));
    }
    Ok(pairs)
}

fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let dir = prices_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    let symbols: Vec<String> = (0..cfg.synth.symbols).map(|i| format!("SYN{i}")).collect();
    // one independent stream per symbol: output is identical for any
    // worker count
    let mut artifacts = Vec::new();
    let bars: Vec<(String, Vec<OhlcvBar>)> = run_parallel(cfg.workers, &symbols, |i, symbol| {
        let bars = synth_market(mix_seed(cfg.seed, i), cfg.synth.days, &cfg.synth.regime)?;
        Ok((symbol.clone(), bars))
    })?;
    for (symbol, series) in &bars {
        let path = dir.join(format!("{symbol}.csv"));
        write_csv(series, &path)?;
        artifacts.push(path);
    }
    let pairs = build_pairs(cfg, &bars.iter().cloned().collect())?;
    let split = split_chronological(pairs, cfg.windows.train_frac, cfg.windows.val_frac)?;
    split.check_no_leakage()?;
    let manifest = DatasetManifest {
        symbols: symbols.clone(),
        first_date: bars[0].1.first().unwrap().date,
        last_date: bars[0].1.last().unwrap().date,
        t: cfg.windows.t,
        horizon: cfg.windows.horizon,
        train_pairs: split.train.len(),
        validation_pairs: split.validation.len(),
        test_pairs: split.test.len(),
        seed: cfg.seed,
    };
    let manifest_path = cfg.out_dir.join("dataset.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    artifacts.push(manifest_path);
    RunManifest::record(cfg, "synth", &artifacts)
}

/// Runs `f` over items on up to `workers` threads, preserving input order.
fn run_parallel<T: Sync, R: Send>(
    workers: usize,
    items: &[T],
    f: impl Fn(usize, &T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let mut slots: Vec<Option<Result<R>>> = Vec::new();
    slots.resize_with(items.len(), || None);
    std::thread::scope(|scope| {
        for (c, slot_chunk) in slots.chunks_mut(chunk).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (j, slot) in slot_chunk.iter_mut().enumerate() {
                    let idx = c * chunk + j;
                    *slot = Some(f(idx, &items[idx]));
                }
            });
        }
    });
    slots.into_iter().map(|r| r.expect("worker filled slot")).collect()
}

fn cmd_ingest(cfg: &RunConfig, input: &Path, symbol: Option<&str>) -> Result<()> {
    if !input.exists() {
        return Err(Error::MissingArtifact(format!(
            "input file {} does not exist",
            input.display()
        )));
    }
    let dir = prices_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    let result = ingest_csv(input, &ColumnSchema::default())?;
    let mut artifacts = Vec::new();
    for (name, bars) in &result.bars_by_symbol {
        let symbol = if name.is_empty() {
            symbol
                .map(str::to_string)
                .or_else(|| {
                    input
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                })
                .ok_or_else(|| Error::Parameter("cannot infer a symbol name".into()))?
        } else {
            name.clone()
        };
        let path = dir.join(format!("{symbol}.csv"));
        write_csv(bars, &path)?;
        artifacts.push(path);
    }
    let diag_path = cfg.out_dir.join("ingest_diagnostics.json");
    std::fs::write(
        &diag_path,
        serde_json::to_string_pretty(&result.rejected)?,
    )?;
    artifacts.push(diag_path);
    RunManifest::record(cfg, "ingest", &artifacts)
}

fn cmd_annotate(cfg: &RunConfig) -> Result<()> {
    let bars_by_symbol = load_prices(cfg)?;
    let ind_dir = cfg.out_dir.join("indicators");
    let ann_dir = cfg.out_dir.join("annotations");
    std::fs::create_dir_all(&ind_dir)?;
    std::fs::create_dir_all(&ann_dir)?;
    let registry = TemplateRegistry::default();
    let mut artifacts = Vec::new();
    for (symbol, bars) in &bars_by_symbol {
        let panel = compute_panel(bars, &cfg.indicators)?;
        let panel_path = ind_dir.join(format!("{symbol}.csv"));
        std::fs::write(&panel_path, panel.to_csv())?;
        artifacts.push(panel_path);

        if bars.len() < cfg.windows.t {
            return Err(Error::Parameter(format!(
                "{symbol} has {} bars; need at least t = {}",
                bars.len(),
                cfg.windows.t
            )));
        }
        let window = PriceWindow::new(symbol, bars[bars.len() - cfg.windows.t..].to_vec())?;
        let report = annotate(&window, bars, &cfg.indicators)?;
        let text_path = ann_dir.join(format!("{symbol}.txt"));
        std::fs::write(&text_path, &report.text)?;
        artifacts.push(text_path);

        let prompt = build_prompt(&window, &report, cfg.windows.horizon, "default", &registry)?;
        let prompt_path = ann_dir.join(format!("{symbol}.prompt.json"));
        std::fs::write(&prompt_path, serde_json::to_string_pretty(&prompt)?)?;
        artifacts.push(prompt_path);
    }
    RunManifest::record(cfg, "annotate", &artifacts)
}

fn embedding_path(cfg: &RunConfig) -> PathBuf {
    checkpoint(cfg, "embedding.bin")
}

fn cmd_train_backbone(cfg: &RunConfig) -> Result<()> {
    let bars_by_symbol = load_prices(cfg)?;
    let pairs = build_pairs(cfg, &bars_by_symbol)?;
    let split = split_chronological(pairs, cfg.windows.train_frac, cfg.windows.val_frac)?;
    split.check_no_leakage()?;
    let train: Vec<BackboneExample> =
        split.train.iter().map(BackboneExample::from_pair).collect();
    let validation: Vec<BackboneExample> = split
        .validation
        .iter()
        .map(BackboneExample::from_pair)
        .collect();

    std::fs::create_dir_all(cfg.out_dir.join("checkpoints"))?;
    std::fs::create_dir_all(cfg.out_dir.join("curves"))?;
    let mut backbone_cfg = cfg.backbone.clone();
    backbone_cfg.seed = cfg.seed;
    let embedding =
        EmbeddingMatrix::synth(cfg.seed, backbone_cfg.vocab_rows, backbone_cfg.d_model);
    embedding.save(&embedding_path(cfg))?;
    let mut backbone = Backbone::new(backbone_cfg, &embedding)?;
    let curves = backbone.train(
        &train,
        &validation,
        cfg.backbone_train.epochs,
        cfg.backbone_train.learning_rate,
    )?;
    let ckpt = checkpoint(cfg, "backbone.bin");
    backbone.save(&ckpt)?;
    let curve_path = cfg.out_dir.join("curves").join("backbone.csv");
    std::fs::write(&curve_path, curves_to_csv(&curves))?;
    RunManifest::record(
        cfg,
        "train backbone",
        &[ckpt, embedding_path(cfg), curve_path],
    )
}

fn reasoner_spec(cfg: &RunConfig) -> ToyPolicySpec {
    ToyPolicySpec {
        horizon: cfg.windows.horizon,
        ..ToyPolicySpec::default()
    }
}

fn cmd_train_reasoner(cfg: &RunConfig) -> Result<()> {
    let bars_by_symbol = load_prices(cfg)?;
    let pairs = build_pairs(cfg, &bars_by_symbol)?;
    let split = split_chronological(pairs, cfg.windows.train_frac, cfg.windows.val_frac)?;
    let registry = TemplateRegistry::default();
    let train = prepare_examples(
        &split.train,
        &bars_by_symbol,
        &cfg.indicators,
        &registry,
        "default",
    )?;
    let validation = prepare_examples(
        &split.validation,
        &bars_by_symbol,
        &cfg.indicators,
        &registry,
        "default",
    )?;

    let base = ToyPolicy::from_checkpoint(&PolicyCheckpoint::zeros(reasoner_spec(cfg), cfg.seed))?;
    let report = run_pipeline(&base, &train, &validation, &cfg.pipeline, cfg.seed)?;

    std::fs::create_dir_all(cfg.out_dir.join("checkpoints"))?;
    std::fs::create_dir_all(cfg.out_dir.join("curves"))?;
    std::fs::create_dir_all(cfg.out_dir.join("metrics"))?;
    let ckpt = checkpoint(cfg, "reasoner.bin");
    report
        .stage3
        .to_checkpoint("rl_for_reasoning", cfg.pipeline.stage3_steps, cfg.seed)
        .save(&ckpt)?;
    let c1 = cfg.out_dir.join("curves").join("reasoner_stage1.csv");
    std::fs::write(&c1, curve_to_csv(&report.stage1_curve))?;
    let c3 = cfg.out_dir.join("curves").join("reasoner_stage3.csv");
    std::fs::write(&c3, curve_to_csv(&report.stage3_curve))?;
    let stages = cfg.out_dir.join("metrics").join("reasoner_stages.json");
    std::fs::write(&stages, serde_json::to_string_pretty(&report.stage_metrics)?)?;
    RunManifest::record(cfg, "train reasoner", &[ckpt, c1, c3, stages])
}

/// Greedy reasoner attributes for one window's prompt.
fn reasoner_condition(policy: &ToyPolicy, prompt: &Prompt) -> AttributeClass {
    let output = policy.greedy(prompt);
    let parsed = parse_output(&output.text, prompt.horizon);
    extract_attributes(parsed.forecast.as_deref())
}

fn load_stack(cfg: &RunConfig) -> Result<(Backbone, ToyPolicy)> {
    let backbone_path = checkpoint(cfg, "backbone.bin");
    require(&backbone_path, "train backbone")?;
    require(&embedding_path(cfg), "train backbone")?;
    let embedding = EmbeddingMatrix::load(&embedding_path(cfg))?;
    let backbone = Backbone::load(&backbone_path, &embedding)?;
    let reasoner_path = checkpoint(cfg, "reasoner.bin");
    require(&reasoner_path, "train reasoner")?;
    let reasoner = ToyPolicy::from_checkpoint(&PolicyCheckpoint::load(&reasoner_path)?)?;
    Ok((backbone, reasoner))
}

fn cmd_train_joint(cfg: &RunConfig) -> Result<()> {
    let (backbone, reasoner) = load_stack(cfg)?;
    let bars_by_symbol = load_prices(cfg)?;
    let pairs = build_pairs(cfg, &bars_by_symbol)?;
    let split = split_chronological(pairs, cfg.windows.train_frac, cfg.windows.val_frac)?;
    let registry = TemplateRegistry::default();

    let to_joint = |pairs: &[WindowPair]| -> Result<Vec<JointExample>> {
        let examples = prepare_examples(
            pairs,
            &bars_by_symbol,
            &cfg.indicators,
            &registry,
            "default",
        )?;
        Ok(pairs
            .iter()
            .zip(&examples)
            .map(|(pair, ex)| JointExample {
                example: BackboneExample::from_pair(pair),
                condition: reasoner_condition(&reasoner, &ex.prompt),
            })
            .collect())
    };
    let train = to_joint(&split.train)?;
    let validation = to_joint(&split.validation)?;

    let mut guidance_cfg = cfg.guidance.clone();
    guidance_cfg.seed = cfg.seed;
    let mut head = ConditionalHead::new(cfg.windows.horizon, cfg.seed);
    let curves = train_joint(&backbone, &mut head, &train, &validation, &guidance_cfg)?;

    std::fs::create_dir_all(cfg.out_dir.join("curves"))?;
    let ckpt = checkpoint(cfg, "head.bin");
    head.save(&ckpt)?;
    let curve_path = cfg.out_dir.join("curves").join("joint.csv");
    std::fs::write(&curve_path, curves_to_csv(&curves))?;
    RunManifest::record(cfg, "train joint", &[ckpt, curve_path])
}

fn load_head(cfg: &RunConfig) -> Result<ConditionalHead> {
    let path = checkpoint(cfg, "head.bin");
    require(&path, "train joint")?;
    ConditionalHead::load(&path)
}

/// Guided forecast for one window, in normalized price space.
fn guided_record(
    cfg: &RunConfig,
    backbone: &Backbone,
    head: &ConditionalHead,
    reasoner: &ToyPolicy,
    window: &PriceWindow,
    history: &[OhlcvBar],
    registry: &TemplateRegistry,
) -> Result<ForecastRecord> {
    let report = annotate(window, history, &cfg.indicators)?;
    let prompt = build_prompt(window, &report, cfg.windows.horizon, "default", &registry)?;
    let output = reasoner.greedy(&prompt);
    let parsed = parse_output(&output.text, prompt.horizon);
    let attributes = extract_attributes(parsed.forecast.as_deref());

    let example = BackboneExample {
        features: features_of(window),
        target_norm: vec![0.0; cfg.windows.horizon],
    };
    let y_uncond = backbone.forecast_uncond(&example.features)?;
    let y_cond = head.conditional_forward(&y_uncond, &attributes)?;
    let guided = guided_forecast(&y_uncond, &y_cond, cfg.guidance.s)?;
    Ok(ForecastRecord {
        symbol: window.symbol.clone(),
        anchor: window.anchor(),
        y_uncond: guided.y_uncond,
        y_cond: guided.y_cond,
        y_final: guided.y_final,
        s: guided.scale_used,
        attributes,
        trace: parsed.trace,
    })
}

fn features_of(window: &PriceWindow) -> ndarray::Array2<f64> {
    let rows = window.feature_rows();
    let mut features = ndarray::Array2::zeros((rows.len(), 6));
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            features[[i, j]] = v;
        }
    }
    features
}

fn cmd_forecast(cfg: &RunConfig) -> Result<()> {
    let (backbone, reasoner) = load_stack(cfg)?;
    let head = load_head(cfg)?;
    let bars_by_symbol = load_prices(cfg)?;
    let registry = TemplateRegistry::default();
    let fc_dir = cfg.out_dir.join("forecasts");
    let plot_dir = cfg.out_dir.join("plots");
    std::fs::create_dir_all(&fc_dir)?;
    std::fs::create_dir_all(&plot_dir)?;
    let mut artifacts = Vec::new();
    for (symbol, bars) in &bars_by_symbol {
        if bars.len() < cfg.windows.t {
            continue;
        }
        let window = PriceWindow::new(symbol, bars[bars.len() - cfg.windows.t..].to_vec())?;
        let record = guided_record(
            cfg, &backbone, &head, &reasoner, &window, bars, &registry,
        )?;
        let path = fc_dir.join(format!("{symbol}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&record)?)?;
        artifacts.push(path);

        let history = window.normalized_adj();
        let svg = forecast_svg(&history, &record.y_uncond, &record.y_final)?;
        let svg_path = plot_dir.join(format!("forecast_{symbol}.svg"));
        std::fs::write(&svg_path, svg)?;
        artifacts.push(svg_path);
    }
    RunManifest::record(cfg, "forecast", &artifacts)
}

fn cmd_backtest(cfg: &RunConfig) -> Result<()> {
    let (backbone, reasoner) = load_stack(cfg)?;
    let head = load_head(cfg)?;
    let bars_by_symbol = load_prices(cfg)?;
    let registry = TemplateRegistry::default();
    let panel = align_panel(&bars_by_symbol)?;
    let t = cfg.windows.t;

    // date-index lookup per symbol so each rebalance can cut a window
    // ending at the decision date
    let bar_index: BTreeMap<&String, BTreeMap<chrono::NaiveDate, usize>> = bars_by_symbol
        .iter()
        .map(|(s, bars)| {
            (
                s,
                bars.iter().enumerate().map(|(i, b)| (b.date, i)).collect(),
            )
        })
        .collect();

    let result: BacktestResult = run_backtest(&panel, &cfg.backtest, |idx, panel| {
        let date = panel.dates[idx];
        let mut mu = Vec::with_capacity(panel.symbols.len());
        for symbol in &panel.symbols {
            let bars = &bars_by_symbol[symbol];
            let end = *bar_index[symbol].get(&date).ok_or_else(|| {
                Error::Domain(format!("{symbol} has no bar on {date}"))
            })?;
            if end + 1 < t {
                mu.push(0.0); // not enough history yet: no view
                continue;
            }
            let window = PriceWindow::new(symbol, bars[end + 1 - t..=end].to_vec())?;
            let record = guided_record(
                cfg,
                &backbone,
                &head,
                &reasoner,
                &window,
                &bars[..=end],
                &registry,
            )?;
            // denormalize the final path and read off an implied daily
            // return over the horizon
            let transform = window.norm_transform();
            let last_price = bars[end].adj_close;
            let horizon_price = transform.denormalize(*record.y_final.last().unwrap());
            let implied = (horizon_price / last_price).max(1e-6);
            mu.push(implied.powf(1.0 / record.y_final.len() as f64) - 1.0);
        }
        Ok(mu)
    })?;

    let bt_dir = cfg.out_dir.join("backtest");
    let plot_dir = cfg.out_dir.join("plots");
    std::fs::create_dir_all(&bt_dir)?;
    std::fs::create_dir_all(&plot_dir)?;
    let ledger_path = bt_dir.join("ledger.csv");
    std::fs::write(&ledger_path, ledger_to_csv(&result))?;
    let summary_path = bt_dir.join("summary.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&result.metrics)?)?;
    let equities: Vec<f64> = result.rows.iter().map(|r| r.equity).collect();
    let svg_path = plot_dir.join("equity.svg");
    std::fs::write(&svg_path, equity_svg(&equities)?)?;
    for warning in &result.warnings {
        eprintln!("warning: {warning}");
    }
    RunManifest::record(cfg, "backtest", &[ledger_path, summary_path, svg_path])
}

fn cmd_report(cfg: &RunConfig) -> Result<()> {
    let manifest_path = RunManifest::path(&cfg.out_dir);
    require(&manifest_path, "synth")?;
    let manifest = RunManifest::load_or_default(&cfg.out_dir)?;
    let mut md = String::from("# Run report\n\n");
    md.push_str(&format!("- seed: {}\n", manifest.seed));
    md.push_str(&format!("- run directory: {}\n\n", cfg.out_dir.display()));

    md.push_str("## Completed steps\n\n");
    for (step, artifacts) in &manifest.steps {
        md.push_str(&format!("### {step}\n\n"));
        for a in artifacts {
            md.push_str(&format!("- `{a}`\n"));
        }
        md.push('\n');
    }

    let stages = cfg.out_dir.join("metrics").join("reasoner_stages.json");
    if stages.exists() {
        let metrics: Vec<crate::grpo::StageMetrics> =
            serde_json::from_str(&std::fs::read_to_string(&stages)?)?;
        md.push_str("## Reasoner stages (validation MSE)\n\n");
        md.push_str("| stage | validation MSE |\n|---|---|\n");
        for m in &metrics {
            md.push_str(&format!("| {} | {:.6} |\n", m.stage, m.validation_mse));
        }
        md.push('\n');
    }

    let summary = cfg.out_dir.join("backtest").join("summary.json");
    if summary.exists() {
        let metrics: crate::portfolio::PortfolioMetrics =
            serde_json::from_str(&std::fs::read_to_string(&summary)?)?;
        md.push_str("## Backtest\n\n");
        md.push_str(&format!(
            "- total return: {:.4}\n- annualized vol: {:.4}\n- max drawdown: {:.4}\n- \
             Sharpe: {:.4}\n- days: {}\n\n",
            metrics.total_return,
            metrics.annualized_vol,
            metrics.max_drawdown,
            metrics.sharpe,
            metrics.days
        ));
        md.push_str("![equity](plots/equity.svg)\n");
    }

    let path = cfg.out_dir.join("report.md");
    std::fs::write(&path, md)?;
    RunManifest::record(cfg, "report", &[path])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(dir: &Path) -> PathBuf {
        let toml = r#"
seed = 11
workers = 2

[synth]
symbols = 2
days = 70

[windows]
t = 8
horizon = 4
train_frac = 0.6
val_frac = 0.2

[pipeline]
stage1_steps = 3
stage3_steps = 3
sft_epochs = 2
rollout_groups = 1

[pipeline.grpo]
group_size = 4
steps = 3

[backbone]
d_model = 8
heads = 2
n_blocks = 1
pca_k = 3
hidden = 8
t = 8
horizon = 4
vocab_rows = 12

[backbone_train]
epochs = 2
learning_rate = 0.02

[guidance]
epochs = 2

[backtest]
lookback = 5
"#;
        let path = dir.join("run.toml");
        std::fs::write(&path, format!("out_dir = {:?}\n{toml}", dir.join("run"))).unwrap();
        path
    }

    fn run_args(config: &Path, args: &[&str]) -> i32 {
        let mut argv = vec!["tickertalk".to_string()];
        argv.extend(args.iter().map(|s| s.to_string()));
        argv.push("--config".into());
        argv.push(config.to_string_lossy().into_owned());
        execute(argv)
    }

    #[test]
    fn full_pipeline_runs_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config(dir.path());
        let run = dir.path().join("run");
        assert_eq!(run_args(&config, &["synth"]), 0);
        assert!(run.join("prices/SYN0.csv").exists());
        assert!(run.join("dataset.json").exists());
        assert_eq!(run_args(&config, &["annotate"]), 0);
        assert!(run.join("annotations/SYN0.txt").exists());
        assert_eq!(run_args(&config, &["train", "backbone"]), 0);
        assert_eq!(run_args(&config, &["train", "reasoner"]), 0);
        assert_eq!(run_args(&config, &["train", "joint"]), 0);
        assert_eq!(run_args(&config, &["forecast"]), 0);
        assert!(run.join("forecasts/SYN1.json").exists());
        assert_eq!(run_args(&config, &["backtest"]), 0);
        assert!(run.join("backtest/ledger.csv").exists());
        assert_eq!(run_args(&config, &["report"]), 0);
        let report = std::fs::read_to_string(run.join("report.md")).unwrap();
        assert!(report.contains("Backtest"));
        let manifest: RunManifest = serde_json::from_str(
            &std::fs::read_to_string(run.join("manifest.json")).unwrap(),
        )
        .unwrap();
        assert!(manifest.steps.contains_key("train joint"));
    }

    #[test]
    fn missing_prerequisites_fail_with_exit_one() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config(dir.path());
        // no synth yet: training has nothing to read
        assert_eq!(run_args(&config, &["train", "backbone"]), 1);
        assert_eq!(run_args(&config, &["forecast"]), 1);
    }

    #[test]
    fn bad_config_exits_two() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "unknown_key = 1\n").unwrap();
        assert_eq!(run_args(&path, &["synth"]), 2);
        // unknown subcommand is a usage error
        assert_eq!(execute(["tickertalk", "frobnicate"]), 2);
    }

    #[test]
    fn synth_is_deterministic_per_seed_and_worker_count() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config(dir.path());
        assert_eq!(run_args(&config, &["synth", "--workers", "1"]), 0);
        let first = std::fs::read_to_string(dir.path().join("run/prices/SYN1.csv")).unwrap();
        assert_eq!(run_args(&config, &["synth", "--workers", "4"]), 0);
        let second = std::fs::read_to_string(dir.path().join("run/prices/SYN1.csv")).unwrap();
        assert_eq!(first, second);

        let other = dir.path().join("other");
        assert_eq!(
            run_args(
                &config,
                &["synth", "--seed", "12", "--out", other.to_str().unwrap()]
            ),
            0
        );
        let reseeded = std::fs::read_to_string(other.join("prices/SYN1.csv")).unwrap();
        assert_ne!(first, reseeded);
    }
}
