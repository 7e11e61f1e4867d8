//! `tdnnas` command-line front end.
//!
//! Every command prints one JSON document on stdout (or a short text
//! summary with `--human`). Artifacts such as checkpoints, latency tables
//! and record files go to `--out`. Failures exit with status 1 and a JSON
//! error object on stderr.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use tdnnas::costmodel::{
    build_latency_table, build_latency_table_for, count_macs, count_params, estimate_latency, op_keys, AnalyticRunner, LatencyTable,
    Runner, TimingRunner,
};
use tdnnas::evalkit::evaluate;
use tdnnas::harness::checkpoint::{
    load_checkpoint, predictor_checkpoint, predictor_from_checkpoint, save_checkpoint, subnet_checkpoint,
    supernet_from_checkpoint,
};
use tdnnas::harness::formats::{format_scores, format_trials, from_jsonl, parse_trials, to_jsonl, CollectedRecord};
use tdnnas::harness::pipeline::{collect_records, evaluate_subnet, fit_predictor, score_trials, train_supernet, PipelineConfig};
use tdnnas::harness::{generate_dataset, Dataset};
use tdnnas::predictor::{predict, AccuracyRecord, PredictorModel};
use tdnnas::searcher::{grid_search, mpea, random_search, spec_cost, Constraint, CostMetric, SearchResult, SearchSpace};
use tdnnas::space::{
    degrees_of_freedom, enumerate_grid, sample_subnet, space_size, SamplerState, SpaceConfig, Stage, SubnetSpec,
};
use tdnnas::supernet::{SupernetConfig, SupernetWeights};

#[derive(Parser)]
#[command(name = "tdnnas", version, about = "Weight-sharing architecture search for dynamic TDNNs")]
struct Cli {
    /// Pipeline configuration (JSON). Without it, `space` and `cost` use the
    /// full-scale supernet and every other command uses the toy pipeline.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed the command consumes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Training stage: stop point for `train`, sampling space elsewhere.
    #[arg(long, global = true)]
    stage: Option<Stage>,
    /// Budget on multiply-accumulates (e.g. 600e6).
    #[arg(long, global = true)]
    budget_macs: Option<f64>,
    #[arg(long, global = true)]
    budget_params: Option<f64>,
    /// Latency budget in milliseconds (needs `--table`).
    #[arg(long, global = true)]
    budget_latency: Option<f64>,
    /// Input length in frames for MACs.
    #[arg(long, global = true)]
    frames: Option<usize>,
    /// Output file, or directory for `train`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Plain-text output instead of JSON.
    #[arg(long, global = true)]
    human: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search-space sizes, samples and the uniform grid.
    #[command(subcommand)]
    Space(SpaceCmd),
    /// MACs, parameters and latency tables.
    #[command(subcommand)]
    Cost(CostCmd),
    /// Progressive supernet training with per-stage checkpoints.
    #[command(subcommand)]
    Train(TrainCmd),
    /// Sample subnets, recalibrate batch norm, measure EER/minDCF.
    CollectRecords {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Fit or query the accuracy predictor.
    #[command(subcommand)]
    Predictor(PredictorCmd),
    /// Constrained search by random sampling, grid or evolution.
    #[command(subcommand)]
    Search(SearchCmd),
    /// Write the standalone weights of one subnet.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        spec: String,
    },
    /// Score a trial list with one subnet.
    #[command(subcommand)]
    Eval(EvalCmd),
}

#[derive(Subcommand)]
enum SpaceCmd {
    Size {
        /// Width step of a fine-grained space instead of the coarse one.
        #[arg(long)]
        granularity: Option<usize>,
    },
    Sample {
        #[arg(long, default_value_t = 1)]
        n: usize,
    },
    Grid,
}

#[derive(Clone, Copy, ValueEnum)]
enum RunnerKind {
    Analytic,
    Timing,
}

#[derive(Subcommand)]
enum CostCmd {
    Macs {
        #[arg(long)]
        spec: String,
    },
    Params {
        #[arg(long)]
        spec: String,
    },
    LatencyTable {
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long, value_enum, default_value_t = RunnerKind::Analytic)]
        runner: RunnerKind,
        /// Cover the operators of the uniform grid instead of the coarse space.
        #[arg(long)]
        grid: bool,
    },
    Estimate {
        #[arg(long)]
        spec: String,
        #[arg(long)]
        table: PathBuf,
    },
}

#[derive(Subcommand)]
enum TrainCmd {
    /// Progressive shrinking; `--stage` stops after that stage and `--out`
    /// names the checkpoint directory.
    Progressive {
        #[arg(long)]
        resume: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum PredictorCmd {
    Train {
        #[arg(long)]
        records: PathBuf,
    },
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        spec: String,
    },
}

#[derive(clap::Args)]
struct Scorer {
    /// Predictor checkpoint used as the accuracy estimate.
    #[arg(long)]
    predictor: Option<PathBuf>,
    /// Supernet checkpoint; subnets are measured on the synthetic trials.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Latency table for `--budget-latency`.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Subcommand)]
enum SearchCmd {
    Random {
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[command(flatten)]
        scorer: Scorer,
    },
    Grid {
        #[command(flatten)]
        scorer: Scorer,
    },
    Mpea {
        #[command(flatten)]
        scorer: Scorer,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Score a trial list with one subnet; `--out` receives the scores.
    Trials {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        spec: String,
        /// Trial list (`label id_a id_b`); defaults to the generated one.
        #[arg(long)]
        trials: Option<PathBuf>,
    },
}

struct Ctx {
    cli_seed: Option<u64>,
    stage: Option<Stage>,
    frames: Option<usize>,
    out: Option<PathBuf>,
    human: bool,
    explicit_config: bool,
    pipeline: PipelineConfig,
}

impl Ctx {
    /// Supernet for `space` and `cost`: configured, else full scale.
    fn cost_supernet(&self) -> SupernetConfig {
        if self.explicit_config {
            self.pipeline.supernet.clone()
        } else {
            SupernetConfig::full_scale()
        }
    }

    fn out(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| anyhow!("this command needs --out"))
    }

    fn emit(&self, value: Value, human: impl FnOnce(&Value) -> String) -> Result<()> {
        let text = if self.human { human(&value) } else { serde_json::to_string(&value)? };
        write_stdout(&format!("{text}\n"))
    }
}

/// Writes to stdout; a reader that closed the pipe early is not an error.
fn write_stdout(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn read_spec(arg: &str) -> Result<SubnetSpec> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        fs::read_to_string(arg).with_context(|| format!("reading spec {arg}"))?
    };
    serde_json::from_str(&text).with_context(|| format!("parsing spec {arg}"))
}

fn load_supernet(path: &Path, cfg: &PipelineConfig) -> Result<SupernetWeights> {
    let weights = supernet_from_checkpoint(&load_checkpoint(path)?)?;
    if weights.config != cfg.supernet {
        bail!("checkpoint {} was trained with a different supernet config", path.display());
    }
    Ok(weights)
}

fn load_predictor(path: &Path) -> Result<PredictorModel> {
    Ok(predictor_from_checkpoint(&load_checkpoint(path)?)?)
}

fn constraint(cli: &Cli, ctx: &Ctx) -> Result<Constraint> {
    let frames = ctx.frames.unwrap_or(ctx.pipeline.search.frames);
    let given: Vec<(CostMetric, f64)> = [
        (CostMetric::Macs, cli.budget_macs),
        (CostMetric::Params, cli.budget_params),
        (CostMetric::LatencyMs, cli.budget_latency),
    ]
    .into_iter()
    .filter_map(|(m, b)| b.map(|b| (m, b)))
    .collect();
    match given.as_slice() {
        [] => Ok(Constraint::new(ctx.pipeline.search.metric, ctx.pipeline.search.budget, frames)?),
        [(m, b)] => Ok(Constraint::new(*m, *b, frames)?),
        _ => bail!("give at most one of --budget-macs, --budget-params, --budget-latency"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("{}", json!({ "error": chain.first(), "causes": &chain[1..] }));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let mut pipeline = match &cli.config {
        Some(p) => PipelineConfig::from_json(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        pipeline.init_seed = s;
        pipeline.train.seed = s;
        pipeline.collect.seed = s;
        pipeline.predictor.seed = s;
        pipeline.search.evolution.seed = s;
    }
    let ctx = Ctx {
        cli_seed: cli.seed,
        stage: cli.stage,
        frames: cli.frames,
        out: cli.out.clone(),
        human: cli.human,
        explicit_config: cli.config.is_some(),
        pipeline,
    };
    match &cli.command {
        Command::Space(cmd) => space(cmd, &ctx),
        Command::Cost(cmd) => cost(cmd, &ctx),
        Command::Train(TrainCmd::Progressive { resume }) => train(resume.as_deref(), &ctx),
        Command::CollectRecords { checkpoint, n } => collect(checkpoint, *n, &ctx),
        Command::Predictor(cmd) => predictor(cmd, &ctx),
        Command::Search(cmd) => search(cmd, cli, &ctx),
        Command::Export { checkpoint, spec } => export(checkpoint, spec, &ctx),
        Command::Eval(EvalCmd::Trials { checkpoint, spec, trials }) => eval_trials(checkpoint, spec, trials.as_deref(), &ctx),
    }
}

fn space(cmd: &SpaceCmd, ctx: &Ctx) -> Result<()> {
    let supernet = ctx.cost_supernet();
    let stage = ctx.stage.unwrap_or(Stage::Width2);
    let coarse = || -> Result<SpaceConfig> { Ok(supernet.space(stage)?) };
    match cmd {
        SpaceCmd::Size { granularity } => {
            let cfg = match granularity {
                Some(c) => {
                    let (f, b) = (supernet.max_front_width, supernet.max_back_width);
                    SpaceConfig::stepped((f / 4, f), (b / 4, b), *c)?
                }
                None => coarse()?,
            };
            let size = space_size(&cfg);
            let value = match u64::try_from(&size) {
                Ok(n) => json!(n),
                Err(_) => json!(size.to_string()),
            };
            ctx.emit(json!({ "stage": cfg.stage, "granularity": cfg.granularity_c, "size": value }), |_| {
                format!("{} space (c={}): {size} subnets", cfg.stage, cfg.granularity_c)
            })
        }
        SpaceCmd::Sample { n } => {
            let cfg = coarse()?;
            let mut sampler = SamplerState::new(ctx.cli_seed.unwrap_or(0));
            let specs: Vec<SubnetSpec> = (0..*n).map(|_| sample_subnet(&cfg, &mut sampler)).collect();
            ctx.emit(serde_json::to_value(&specs)?, |_| specs.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("\n"))
        }
        SpaceCmd::Grid => {
            let grid = grid_space(&supernet)?;
            let specs = enumerate_grid(&grid);
            let dof = degrees_of_freedom(&coarse()?);
            ctx.emit(json!({ "count": specs.len(), "degrees_of_freedom": dof, "specs": specs }), |_| {
                format!("{} grid subnets, {dof} degrees of freedom", specs.len())
            })
        }
    }
}

/// Uniform grid that fits inside `supernet`: every coarse block width `C`
/// whose tripled back width is available.
fn grid_space(supernet: &SupernetConfig) -> Result<tdnnas::space::GridSpace> {
    if *supernet == SupernetConfig::full_scale() {
        return Ok(tdnnas::space::GridSpace::full_scale());
    }
    let widths: Vec<usize> = supernet
        .space(Stage::Width2)?
        .width_front_options
        .into_iter()
        .filter(|w| 3 * w <= supernet.max_back_width)
        .collect();
    if widths.is_empty() {
        bail!("no grid width C with 3C <= max_back_width");
    }
    Ok(tdnnas::space::GridSpace {
        depths: vec![2, 3, 4],
        kernels: supernet.kernel_options.clone(),
        widths,
    })
}

fn make_runner(kind: RunnerKind, cfg: SupernetConfig) -> Box<dyn Runner> {
    match kind {
        RunnerKind::Analytic => Box::new(AnalyticRunner::new(cfg)),
        RunnerKind::Timing => Box::new(TimingRunner::new(cfg)),
    }
}

fn cost(cmd: &CostCmd, ctx: &Ctx) -> Result<()> {
    let supernet = ctx.cost_supernet();
    let frames = ctx.frames.unwrap_or(supernet.frames);
    match cmd {
        CostCmd::Macs { spec } => {
            let spec = read_spec(spec)?;
            let macs = count_macs(&spec, &supernet, frames)?;
            ctx.emit(json!({ "spec": spec, "frames": frames, "macs": macs }), |_| {
                format!("{spec}: {:.2}M MACs at {frames} frames", macs as f64 / 1e6)
            })
        }
        CostCmd::Params { spec } => {
            let spec = read_spec(spec)?;
            let params = count_params(&spec, &supernet)?;
            ctx.emit(json!({ "spec": spec, "params": params }), |_| format!("{spec}: {:.2}M parameters", params as f64 / 1e6))
        }
        CostCmd::LatencyTable { repeats, warmup, runner, grid } => {
            let mut runner = make_runner(*runner, supernet.clone());
            let table = if *grid {
                let keys: BTreeSet<_> = enumerate_grid(&grid_space(&supernet)?).iter().flat_map(op_keys).collect();
                build_latency_table_for(keys.into_iter().collect(), runner.as_mut(), *repeats, *warmup, frames)?
            } else {
                build_latency_table(&supernet.space(Stage::Width2)?, runner.as_mut(), *repeats, *warmup, frames)?
            };
            let out = ctx.out()?;
            fs::write(out, table.to_json())?;
            ctx.emit(
                json!({ "table": out, "device": table.device, "entries": table.entries.len(), "failures": table.failures.len(), "low_confidence": table.low_confidence }),
                |v| format!("wrote {} entries to {}", v["entries"], out.display()),
            )
        }
        CostCmd::Estimate { spec, table } => {
            let spec = read_spec(spec)?;
            let table = LatencyTable::from_json(&fs::read_to_string(table)?)?;
            let ms = estimate_latency(&spec, &table)?;
            ctx.emit(json!({ "spec": spec, "latency_ms": ms, "device": table.device }), |_| {
                format!("{spec}: {ms:.3} ms on {}", table.device)
            })
        }
    }
}

fn dataset(ctx: &Ctx) -> Result<Dataset> {
    Ok(generate_dataset(&ctx.pipeline.dataset)?)
}

fn train(resume: Option<&Path>, ctx: &Ctx) -> Result<()> {
    let out = ctx.out()?;
    fs::create_dir_all(out)?;
    let data = dataset(ctx)?;
    let resume = resume.map(load_checkpoint).transpose()?;
    let (_, reports) = train_supernet(&ctx.pipeline, &data, resume.as_ref(), ctx.stage, Some(out))?;
    let summary: Vec<Value> = reports
        .iter()
        .map(|r| {
            json!({
                "stage": r.stage,
                "space_size": r.space_size,
                "initial_loss": r.initial_loss,
                "epoch_losses": r.epoch_losses,
                "checkpoint": tdnnas::harness::pipeline::checkpoint_path(out, r.stage),
            })
        })
        .collect();
    ctx.emit(json!({ "stages": summary }), |v| {
        v["stages"]
            .as_array()
            .into_iter()
            .flatten()
            .map(|s| format!("{}: loss {} -> {}", s["stage"], s["initial_loss"], s["epoch_losses"].as_array().and_then(|a| a.last()).unwrap_or(&Value::Null)))
            .collect::<Vec<_>>()
            .join("\n")
    })
}

fn collect(checkpoint: &Path, n: Option<usize>, ctx: &Ctx) -> Result<()> {
    let weights = load_supernet(checkpoint, &ctx.pipeline)?;
    let data = dataset(ctx)?;
    let space = ctx.pipeline.space(ctx.stage.unwrap_or(Stage::Width2))?;
    let n = n.unwrap_or(ctx.pipeline.collect.n_records);
    let records = collect_records(&weights, &space, &data, &ctx.pipeline.eval, n, ctx.pipeline.collect.seed)?;
    let text = to_jsonl(&records)?;
    match &ctx.out {
        Some(out) => {
            fs::write(out, &text)?;
            ctx.emit(json!({ "records": records.len(), "out": out }), |_| format!("wrote {} records to {}", records.len(), out.display()))
        }
        None => {
            write_stdout(&text)
        }
    }
}

fn predictor(cmd: &PredictorCmd, ctx: &Ctx) -> Result<()> {
    match cmd {
        PredictorCmd::Train { records } => {
            let text = fs::read_to_string(records)?;
            let collected: Vec<CollectedRecord> = from_jsonl(&text)?;
            let plain: Vec<AccuracyRecord> = collected.into_iter().map(|r| r.record).collect();
            let space = ctx.pipeline.space(ctx.stage.unwrap_or(Stage::Width2))?;
            let (model, report) = fit_predictor(
                &plain,
                &space,
                ctx.pipeline.predictor_metric,
                &ctx.pipeline.predictor,
                ctx.pipeline.collect.validation_fraction,
            )?;
            let out = ctx.out()?;
            save_checkpoint(&predictor_checkpoint(&model)?, out)?;
            let last = |v: &[f64]| v.last().copied();
            ctx.emit(
                json!({
                    "model": out,
                    "best_train_mae": last(&report.best_train_mae),
                    "validation_mae": report.validation_mae,
                }),
                |v| format!("predictor saved to {} (train MAE {}, validation MAE {})", out.display(), v["best_train_mae"], v["validation_mae"]),
            )
        }
        PredictorCmd::Predict { model, spec } => {
            let model = load_predictor(model)?;
            let spec = read_spec(spec)?;
            let value = predict(&model, &spec, &model.space)?;
            ctx.emit(json!({ "spec": spec, "metric": model.metric, "prediction": value }), |_| {
                format!("{spec}: predicted {:?} {value:.5}", model.metric)
            })
        }
    }
}

fn search(cmd: &SearchCmd, cli: &Cli, ctx: &Ctx) -> Result<()> {
    let scorer = match cmd {
        SearchCmd::Random { scorer, .. } | SearchCmd::Grid { scorer } | SearchCmd::Mpea { scorer } => scorer,
    };
    let constraint = constraint(cli, ctx)?;
    let supernet = ctx.pipeline.supernet.clone();
    let table = match (&scorer.table, constraint.metric) {
        (Some(p), _) => Some(LatencyTable::from_json(&fs::read_to_string(p)?)?),
        (None, CostMetric::LatencyMs) => bail!("--budget-latency needs --table"),
        (None, _) => None,
    };
    let cost_fn = |s: &SubnetSpec| spec_cost(s, &constraint, &supernet, table.as_ref());
    let space = ctx.pipeline.space(Stage::Width2)?;

    let model = scorer.predictor.as_deref().map(load_predictor).transpose()?;
    let measured = match (&scorer.checkpoint, &model) {
        (Some(p), None) => Some((load_supernet(p, &ctx.pipeline)?, dataset(ctx)?)),
        (None, Some(_)) => None,
        _ => bail!("give exactly one of --predictor or --checkpoint"),
    };
    let metric = ctx.pipeline.predictor_metric;
    let mut accuracy = |s: &SubnetSpec| -> tdnnas::Result<f64> {
        match (&model, &measured) {
            (Some(m), _) => predict(m, s, &m.space),
            (None, Some((w, d))) => {
                let (m, _) = evaluate_subnet(w, s, d, &ctx.pipeline.eval)?;
                Ok(match metric {
                    tdnnas::predictor::Metric::Eer => m.eer,
                    tdnnas::predictor::Metric::Dcf => m.min_dcf,
                })
            }
            (None, None) => unreachable!("scorer checked above"),
        }
    };
    let seed = ctx.pipeline.search.evolution.seed;
    let result: SearchResult = match cmd {
        SearchCmd::Random { n, .. } => {
            let space = model.as_ref().map_or(space, |m| m.space.clone());
            random_search(&space, *n, &mut accuracy, &constraint, &cost_fn, seed)?
        }
        SearchCmd::Grid { .. } => {
            let grid = enumerate_grid(&grid_space(&supernet)?);
            if let Some(m) = &model {
                if let Some(outside) = grid.iter().find(|s| !m.space.contains(s)) {
                    bail!("grid member {outside} lies outside the predictor's training space; score the grid with --checkpoint");
                }
            }
            grid_search(&grid, &mut accuracy, &constraint, &cost_fn)?
        }
        SearchCmd::Mpea { .. } => {
            let space = model.as_ref().map_or(space, |m| m.space.clone());
            mpea(&space, &mut accuracy, &constraint, &cost_fn, &ctx.pipeline.search.evolution)?
        }
    };
    if let Some(out) = &ctx.out {
        fs::write(out, result.to_json())?;
    }
    let value: Value = serde_json::from_str(&result.to_json())?;
    ctx.emit(value, |_| match (&result.best_spec, &result.best_metrics) {
        (Some(s), Some(m)) => format!("best {s}: metric {:.5}, cost {:.4e} (budget {:.4e})", m.metric, m.cost, constraint.budget),
        _ => format!("no feasible subnet under budget {:.4e}", constraint.budget),
    })
}

fn export(checkpoint: &Path, spec: &str, ctx: &Ctx) -> Result<()> {
    let weights = load_supernet(checkpoint, &ctx.pipeline)?;
    let spec = read_spec(spec)?;
    let subnet = weights.export_subnet(&spec)?;
    let out = ctx.out()?;
    save_checkpoint(&subnet_checkpoint(&subnet)?, out)?;
    ctx.emit(json!({ "spec": spec, "params": subnet.param_count(), "out": out }), |_| {
        format!("exported {spec} ({} parameters) to {}", subnet.param_count(), out.display())
    })
}

fn eval_trials(checkpoint: &Path, spec: &str, trials: Option<&Path>, ctx: &Ctx) -> Result<()> {
    let weights = load_supernet(checkpoint, &ctx.pipeline)?;
    let spec = read_spec(spec)?;
    let mut data = dataset(ctx)?;
    if let Some(p) = trials {
        data.trials = parse_trials(&fs::read_to_string(p)?)?;
    }
    let mut w = weights.clone();
    let eval = &ctx.pipeline.eval;
    let n = eval.recalibration_utterances.min(data.train.len());
    w.recalibrate_bn(&spec, &data.train.features, n, eval.recalibration_batch)?;
    let scores = score_trials(&w, &spec, &data, eval)?;
    let labels: Vec<bool> = data.trials.iter().map(|t| t.target).collect();
    let metrics = evaluate(&scores, &labels)?;
    if let Some(out) = &ctx.out {
        let rows: Vec<(String, String, f64)> = data.trials.iter().zip(&scores).map(|(t, s)| (t.a.clone(), t.b.clone(), *s)).collect();
        fs::write(out, format_scores(&rows))?;
        fs::write(out.with_extension("trials"), format_trials(&data.trials))?;
    }
    ctx.emit(json!({ "spec": spec, "trials": scores.len(), "metrics": metrics }), |_| {
        format!("{spec}: EER {:.2}%, minDCF {:.4} over {} trials", 100.0 * metrics.eer, metrics.min_dcf, scores.len())
    })
}
