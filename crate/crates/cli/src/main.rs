use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use moe_congestion::diagnostics::{PhaseThresholds, SpreadBaseline};
use moe_congestion::eval::{
    analyze_series, diagnose_trace, diagnostics_tsv, elbow_report, evaluate_trace, fit_checkpoint,
    read_series_csv, BootstrapOptions, CheckpointSeries, DiagnoseConfig, EvalConfig, SeriesConfig,
    DEFAULT_T_MAX,
};
use moe_congestion::identify::{
    random_quality, synthetic_recovery, RecoveryConfig, DEFAULT_GAMMA_MAX,
};
use moe_congestion::rng::stream_rng;
use moe_congestion::simplex::entropy_normalized;
use moe_congestion::traces::generate::{generate, LayerPlan, TraceSpec};
use moe_congestion::traces::{
    observed_load, read_trace_file, LoadMode, Manifest, QualityMethod, RoutingTrace,
};

mod output;

use output::{write_atomic, Outputs};

/// Fit, diagnose and track the congestion game behind MoE routing.
#[derive(Debug, Parser)]
#[command(name = "moe-congestion", version)]
struct Cli {
    /// Seed for every stochastic step.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Emit JSON records instead of tab-separated tables.
    #[arg(long, global = true)]
    json: bool,
    /// Write results into this directory instead of stdout.
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true, env = "MOE_CONGESTION_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-layer congestion fit of one trace.
    Fit(FitArgs),
    /// Fit a checkpoint series and label its training phases.
    Dynamics(DynamicsArgs),
    /// Per-layer scope diagnostics.
    Diagnose(DiagnoseArgs),
    /// Recover planted congestion levels from noisy synthetic equilibria.
    Synth(SynthArgs),
    /// Held-out load prediction of every baseline.
    Eval(EvalArgs),
    /// Summarize a trace file.
    TraceInfo { trace: PathBuf },
    /// Sample a synthetic trace from planted equilibria.
    TraceGen(TraceGenArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Quality {
    Mean,
    Median,
    Trimmed10,
    #[value(name = "split_half", alias = "split-half")]
    SplitHalf,
}

impl From<Quality> for QualityMethod {
    fn from(q: Quality) -> Self {
        match q {
            Quality::Mean => QualityMethod::Mean,
            Quality::Median => QualityMethod::Median,
            Quality::Trimmed10 => QualityMethod::Trimmed10,
            Quality::SplitHalf => QualityMethod::SplitHalf,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Load {
    Dispatch,
    Probability,
}

impl From<Load> for LoadMode {
    fn from(l: Load) -> Self {
        match l {
            Load::Dispatch => LoadMode::Dispatch,
            Load::Probability => LoadMode::Probability,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Baseline {
    Unconditional,
    PairwiseMax,
}

#[derive(Debug, Args)]
struct FitOpts {
    #[arg(long, value_enum, default_value = "mean")]
    quality: Quality,
    #[arg(long, value_enum, default_value = "dispatch")]
    load: Load,
    /// Upper end of the γ search interval.
    #[arg(long, default_value_t = DEFAULT_GAMMA_MAX)]
    gamma_max: f64,
}

#[derive(Debug, Args)]
struct FitArgs {
    trace: PathBuf,
    /// Layers to report, e.g. `0,3,8-11`; all by default.
    #[arg(long)]
    layers: Option<String>,
    /// Auxiliary-loss coefficient; overrides the trace header.
    #[arg(long)]
    alpha: Option<f64>,
    /// Bootstrap resamples over batches for confidence intervals.
    #[arg(long, value_name = "B")]
    bootstrap: Option<usize>,
    #[command(flatten)]
    fit: FitOpts,
}

#[derive(Debug, Args)]
struct DynamicsArgs {
    /// Checkpoint manifest, or a precomputed series with `--series`.
    input: PathBuf,
    /// Treat the input as a CSV of per-checkpoint values.
    #[arg(long)]
    series: bool,
    /// Expert count for the γ_c column of a precomputed series.
    #[arg(long)]
    experts: Option<usize>,
    #[arg(long, value_name = "B")]
    bootstrap: Option<usize>,
    #[arg(long, default_value_t = 1.5)]
    surge_ratio: f64,
    #[arg(long, default_value_t = 0.6)]
    relax_ratio: f64,
    #[arg(long, default_value_t = 0.05)]
    dormant_threshold: f64,
    #[command(flatten)]
    fit: FitOpts,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    trace: PathBuf,
    #[arg(long)]
    alpha: Option<f64>,
    /// Reference load for the continuation spread.
    #[arg(long, value_enum, default_value = "unconditional")]
    baseline: Baseline,
    #[command(flatten)]
    fit: FitOpts,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Planted congestion levels.
    #[arg(long, value_delimiter = ',', default_values_t = [5.0, 10.0, 15.0, 20.0, 30.0, 40.0])]
    gammas: Vec<f64>,
    /// Standard deviation of the quality noise.
    #[arg(long, default_value_t = 0.1)]
    sigma_q: f64,
    /// Trials per planted level.
    #[arg(long, default_value_t = 50)]
    trials: usize,
    #[arg(long, default_value_t = 64)]
    experts: usize,
    /// Quality spread B0 of every instance.
    #[arg(long, default_value_t = 1.5)]
    spread: f64,
    #[arg(long, default_value_t = DEFAULT_GAMMA_MAX)]
    gamma_max: f64,
}

#[derive(Debug, Args)]
struct EvalArgs {
    trace: PathBuf,
    /// Token types for the multi-type baselines.
    #[arg(long, default_value_t = 4)]
    clusters: usize,
    /// Layers whose logits are clustered; all by default.
    #[arg(long)]
    cluster_layers: Option<String>,
    /// Shares of the A/B/C split.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0])]
    fractions: Vec<f64>,
    /// Upper end of the temperature search interval.
    #[arg(long, default_value_t = DEFAULT_T_MAX)]
    t_max: f64,
    /// Also report k-means inertia for these cluster counts.
    #[arg(long, value_delimiter = ',')]
    elbow: Option<Vec<usize>>,
    #[command(flatten)]
    fit: FitOpts,
}

#[derive(Debug, Args)]
struct TraceGenArgs {
    /// Destination trace file.
    output: PathBuf,
    /// Congestion per layer; a single value applies to every layer.
    #[arg(long, value_delimiter = ',', default_value = "10")]
    gamma: Vec<f64>,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 16)]
    experts: usize,
    #[arg(long, default_value_t = 2)]
    top_k: usize,
    #[arg(long, default_value_t = 20)]
    batches: usize,
    #[arg(long, default_value_t = 200)]
    tokens_per_batch: usize,
    /// Quality spread of every planted quality vector.
    #[arg(long, default_value_t = 2.0)]
    spread: f64,
    /// Number of token types, drawn with equal shares.
    #[arg(long, default_value_t = 1)]
    types: usize,
    /// Half-width of the uniform logit noise.
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    /// Logit shift per type index.
    #[arg(long, default_value_t = 0.0)]
    type_offset: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Auxiliary-loss coefficient recorded in the header.
    #[arg(long)]
    alpha: Option<f32>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}

/// The cause chain, skipping causes their parent already quotes.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("thread count must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let ctx = Ctx {
        seed: cli.seed,
        json: cli.json,
    };
    let outputs = match cli.command {
        Command::Fit(a) => cmd_fit(&ctx, a)?,
        Command::Dynamics(a) => cmd_dynamics(&ctx, a)?,
        Command::Diagnose(a) => cmd_diagnose(&ctx, a)?,
        Command::Synth(a) => cmd_synth(&ctx, a)?,
        Command::Eval(a) => cmd_eval(&ctx, a)?,
        Command::TraceInfo { trace } => cmd_trace_info(&ctx, &trace)?,
        Command::TraceGen(a) => return cmd_trace_gen(&ctx, a),
    };
    outputs.emit(cli.out_dir.as_deref())
}

struct Ctx {
    seed: u64,
    json: bool,
}

impl Ctx {
    fn single(&self, stem: &str, table: String, value: serde_json::Value) -> Outputs {
        let mut out = Outputs::default();
        if self.json {
            out.push(format!("{stem}.json"), to_json(&value));
        } else {
            out.push(format!("{stem}.tsv"), table);
        }
        out
    }

    fn bootstrap(&self, resamples: Option<usize>) -> Option<BootstrapOptions> {
        resamples.map(|resamples| BootstrapOptions {
            resamples,
            seed: self.seed,
            ..Default::default()
        })
    }
}

fn to_json(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("JSON output");
    s.push('\n');
    s
}

fn read_trace(path: &Path) -> Result<RoutingTrace> {
    Ok(read_trace_file(path)?)
}

/// Parse `0,3,8-11` into sorted, distinct layer indices below `count`.
fn parse_layers(spec: &str, count: usize) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (lo, hi) = match part.split_once('-') {
            Some((a, b)) => (a.trim().parse::<usize>()?, b.trim().parse::<usize>()?),
            None => {
                let v = part
                    .parse::<usize>()
                    .with_context(|| format!("bad layer {part:?}"))?;
                (v, v)
            }
        };
        if lo > hi || hi >= count {
            bail!("layer range {part:?} is outside 0..{count}");
        }
        out.extend(lo..=hi);
    }
    out.sort_unstable();
    out.dedup();
    if out.is_empty() {
        bail!("empty layer selection");
    }
    Ok(out)
}

fn fmt_f(v: Option<f64>, prec: usize) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x:.prec$}"),
        _ => "-".into(),
    }
}

fn cmd_fit(ctx: &Ctx, a: FitArgs) -> Result<Outputs> {
    let trace = read_trace(&a.trace)?;
    let selected = match &a.layers {
        Some(s) => parse_layers(s, trace.layers())?,
        None => (0..trace.layers()).collect(),
    };
    let cfg = SeriesConfig {
        quality_method: a.fit.quality.into(),
        load_mode: a.fit.load.into(),
        gamma_max: a.fit.gamma_max,
        bootstrap: ctx.bootstrap(a.bootstrap),
        ..Default::default()
    };
    let row = fit_checkpoint(&trace, 0, None, a.alpha, &cfg)?;

    let mut table = String::from(
        "layer\tgamma_eff\tresidual\tgamma_explicit\tgamma_implicit\tci_low\tci_high\tboundary\tin_scope\tB0\tH\tgamma_c\tfloored\n",
    );
    let mut records = Vec::new();
    for l in row.layers.iter().filter(|l| selected.contains(&l.layer)) {
        let f = &l.fit;
        let _ = writeln!(
            table,
            "{}\t{:.4}\t{:.3e}\t{:.4}\t{:.4}\t{}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{}",
            l.layer,
            f.gamma_eff,
            f.residual,
            f.gamma_explicit,
            f.gamma_implicit,
            fmt_f(f.ci_low, 4),
            fmt_f(f.ci_high, 4),
            f.boundary,
            f.in_scope(),
            l.spread,
            l.entropy,
            l.gamma_c,
            l.floored,
        );
        records.push(json!({
            "layer": l.layer,
            "gamma_eff": f.gamma_eff,
            "residual": f.residual,
            "gamma_explicit": f.gamma_explicit,
            "gamma_implicit": f.gamma_implicit,
            "ci_low": f.ci_low,
            "ci_high": f.ci_high,
            "boundary": f.boundary,
            "in_scope": f.in_scope(),
            "B0": l.spread,
            "H": l.entropy,
            "gamma_c": l.gamma_c,
            "floored": l.floored,
        }));
    }
    let ci = row.record.ci;
    let _ = writeln!(
        table,
        "# layer average (in-scope layers) gamma_eff {:.4}{}; alpha {}",
        row.record.gamma_eff,
        ci.map_or(String::new(), |(lo, hi)| format!(" [{lo:.4}, {hi:.4}]")),
        fmt_f(row.alpha, 4),
    );
    let value = json!({
        "layers": records,
        "gamma_eff": row.record.gamma_eff,
        "ci": ci,
        "alpha": row.alpha,
        "gamma_explicit": row.gamma_explicit,
        "gamma_implicit": row.gamma_implicit,
    });
    Ok(ctx.single("fit", table, value))
}

fn cmd_dynamics(ctx: &Ctx, a: DynamicsArgs) -> Result<Outputs> {
    let thresholds = PhaseThresholds {
        surge_ratio: a.surge_ratio,
        relax_ratio: a.relax_ratio,
        dormant_threshold: a.dormant_threshold,
    };
    let (series, given) = if a.series {
        if a.bootstrap.is_some() {
            bail!("--bootstrap needs traces; a precomputed series has none");
        }
        let (records, phases) = read_series_csv(&a.input)?;
        let s = CheckpointSeries::from_records(records, a.experts, thresholds)?;
        (s, Some(phases))
    } else {
        let manifest = Manifest::read(&a.input)?;
        let cfg = SeriesConfig {
            quality_method: a.fit.quality.into(),
            load_mode: a.fit.load.into(),
            gamma_max: a.fit.gamma_max,
            bootstrap: ctx.bootstrap(a.bootstrap),
            thresholds,
        };
        (analyze_series(&manifest, &cfg)?, None)
    };

    // Agreement with labels that came with a precomputed series.
    let agreement = given.and_then(|given| {
        let pairs: Vec<_> = series
            .rows
            .iter()
            .zip(&given)
            .filter_map(|(r, g)| Some((r.phase?, (*g)?)))
            .collect();
        (!pairs.is_empty()).then(|| (pairs.iter().filter(|(a, b)| a == b).count(), pairs.len()))
    });

    let mut out = Outputs::default();
    if ctx.json {
        let value = json!({
            "series": series,
            "labels_agree": agreement.map(|(k, n)| json!({"agree": k, "labelled": n})),
        });
        out.push("dynamics.json", to_json(&value));
    } else {
        let mut table = series.to_tsv();
        if let Some((k, n)) = agreement {
            let _ = writeln!(table, "# labels agree with input {k}/{n}");
        }
        out.push("dynamics.tsv", table);
    }
    out.push_file_only("plot.json", series.to_plot_json() + "\n");
    Ok(out)
}

fn cmd_diagnose(ctx: &Ctx, a: DiagnoseArgs) -> Result<Outputs> {
    let trace = read_trace(&a.trace)?;
    let cfg = DiagnoseConfig {
        quality_method: a.fit.quality.into(),
        load_mode: a.fit.load.into(),
        gamma_max: a.fit.gamma_max,
        alpha: a.alpha,
        spread_baseline: match a.baseline {
            Baseline::Unconditional => SpreadBaseline::Unconditional,
            Baseline::PairwiseMax => SpreadBaseline::PairwiseMax,
        },
    };
    let rows = diagnose_trace(&trace, &cfg)?;
    let value = serde_json::to_value(&rows)?;
    Ok(ctx.single("diagnose", diagnostics_tsv(&rows), value))
}

fn cmd_synth(ctx: &Ctx, a: SynthArgs) -> Result<Outputs> {
    let report = synthetic_recovery(&RecoveryConfig {
        gammas: a.gammas,
        sigma_q: a.sigma_q,
        trials: a.trials,
        experts: a.experts,
        spread: a.spread,
        seed: ctx.seed,
        gamma_max: a.gamma_max,
    })?;
    let mut table = report.to_tsv();
    let _ = writeln!(
        table,
        "# sigma_q {} median relative error {:.4} mean {:.4}; {} trials dropped",
        report.sigma_q, report.median_error, report.mean_error, report.failed
    );
    let value = serde_json::to_value(&report)?;
    Ok(ctx.single("synth", table, value))
}

fn cmd_eval(ctx: &Ctx, a: EvalArgs) -> Result<Outputs> {
    let trace = read_trace(&a.trace)?;
    let cluster_layers = a
        .cluster_layers
        .as_deref()
        .map(|s| parse_layers(s, trace.layers()))
        .transpose()?;
    let fractions: [f64; 3] = a
        .fractions
        .as_slice()
        .try_into()
        .context("--fractions takes three values")?;
    let cfg = EvalConfig {
        fractions,
        clusters: a.clusters,
        cluster_layers: cluster_layers.clone(),
        quality_method: a.fit.quality.into(),
        load_mode: a.fit.load.into(),
        gamma_max: a.fit.gamma_max,
        t_max: a.t_max,
        seed: ctx.seed,
    };
    let report = evaluate_trace(&trace, &cfg)?;
    let elbow = match &a.elbow {
        Some(ks) => {
            let layers = cluster_layers.unwrap_or_else(|| (0..trace.layers()).collect());
            Some(elbow_report(
                &trace,
                &layers,
                &trace.all_tokens(),
                ks,
                ctx.seed,
            )?)
        }
        None => None,
    };
    let mut table = report.to_tsv();
    for (k, inertia) in elbow.iter().flatten() {
        let _ = writeln!(table, "# elbow k={k} inertia {inertia:.6}");
    }
    let value = json!({ "report": report, "elbow": elbow });
    Ok(ctx.single("eval", table, value))
}

fn cmd_trace_info(ctx: &Ctx, path: &Path) -> Result<Outputs> {
    let trace = read_trace(path)?;
    let all = trace.all_tokens();
    let mut table = format!(
        "# experts {} layers {} top_k {} tokens {} batches {} lambda {} alpha {}\nlayer\tmax_load\tmin_load\tH\tfloored\n",
        trace.experts(),
        trace.layers(),
        trace.top_k(),
        trace.tokens(),
        trace.batch_count(),
        trace.lambda(),
        trace.alpha().map_or("-".into(), |a| a.to_string()),
    );
    let mut layers = Vec::new();
    for l in 0..trace.layers() {
        let obs = observed_load(&trace, l, &all, LoadMode::Dispatch)?;
        let h = entropy_normalized(&obs.load);
        let _ = writeln!(
            table,
            "{l}\t{:.6}\t{:.6}\t{h:.4}\t{}",
            obs.load.max(),
            obs.load.min(),
            obs.floored
        );
        layers.push(json!({
            "layer": l,
            "max_load": obs.load.max(),
            "min_load": obs.load.min(),
            "H": h,
            "floored": obs.floored,
        }));
    }
    let value = json!({
        "experts": trace.experts(),
        "layers": trace.layers(),
        "top_k": trace.top_k(),
        "tokens": trace.tokens(),
        "batches": trace.batch_count(),
        "lambda": trace.lambda(),
        "alpha": trace.alpha(),
        "per_layer": layers,
    });
    Ok(ctx.single("trace_info", table, value))
}

fn cmd_trace_gen(ctx: &Ctx, a: TraceGenArgs) -> Result<()> {
    let gammas = match a.gamma.len() {
        1 => vec![a.gamma[0]; a.layers],
        n if n == a.layers => a.gamma.clone(),
        n => bail!("{n} gamma values for {} layers", a.layers),
    };
    if a.types == 0 {
        bail!("need at least one token type");
    }
    if !(a.spread.is_finite() && a.spread > 0.0) {
        bail!("quality spread must be positive");
    }
    // Qualities use their own stream so they do not shift with sampling
    // parameters.
    let mut rng = stream_rng(ctx.seed, 1);
    let layers = gammas
        .iter()
        .map(|&gamma| LayerPlan {
            gamma,
            qualities: (0..a.types)
                .map(|_| random_quality(&mut rng, a.experts, a.spread))
                .collect(),
        })
        .collect();
    let spec = TraceSpec {
        top_k: a.top_k,
        lambda: a.lambda,
        alpha: a.alpha,
        batches: a.batches,
        tokens_per_batch: a.tokens_per_batch,
        type_weights: vec![1.0 / a.types as f64; a.types],
        layers,
        noise: a.noise,
        type_offset: a.type_offset,
        seed: ctx.seed,
    };
    let (trace, _) = generate(&spec)?;
    write_atomic(&a.output, &moe_congestion::traces::encode(&trace))
}
