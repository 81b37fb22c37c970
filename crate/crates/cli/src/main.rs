use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use curvehalt::advisory::Advisor;
use curvehalt::criteria::{select_k, Criterion, HaltPolicy};
use curvehalt::inference::{forecast, Epoch, InferenceConfig, LearningCurve, RunId};
use curvehalt::io::{
    assemble_traces, emit_manifest, emit_report, emit_series, emit_trace, parse_manifest,
    parse_trace, Manifest, ReportDocument, ReportEntry, ReportFormat, RunDescriptor, TraceRows,
};
use curvehalt::race::{gen_corpus, gen_synthetic, sweep, FitCache, RaceConfig, SynthConfig, Traces};
use curvehalt::seeding::fit_seed;
use curvehalt::{Error, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "curvehalt", version, about = "Early stopping for training-run races")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replay one race from a trace file under one policy.
    Simulate(SimulateArgs),
    /// Replay races over a grid of criteria and deltas.
    Sweep(SweepArgs),
    /// Print the order statistic k used by the halting threshold.
    Ktable(KtableArgs),
    /// Write a synthetic race as trace CSV plus manifest.
    Synth(SynthArgs),
    /// Serve halting advice over JSON lines on stdin/stdout.
    Serve(ServeArgs),
    /// Fit one run's prefix and print its horizon prediction.
    Fit(FitArgs),
}

#[derive(Args, Clone)]
struct PolicyArgs {
    #[arg(long, default_value = "f")]
    criterion: Criterion,
    #[arg(long, default_value_t = 0.5)]
    delta: f64,
    #[arg(long)]
    guards: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Warm-up epochs before any decision.
    #[arg(long, default_value_t = 5)]
    min_epochs: Epoch,
    /// Force the threshold's order statistic.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args, Clone)]
struct SamplerArgs {
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    chain_length: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    thinning: Option<usize>,
}

impl SamplerArgs {
    fn config(&self) -> InferenceConfig {
        let mut c = InferenceConfig::default();
        if let Some(v) = self.chains {
            c.chains = v;
        }
        if let Some(v) = self.chain_length {
            c.chain_length = v;
        }
        if let Some(v) = self.burn_in {
            c.burn_in = v;
        }
        if let Some(v) = self.thinning {
            c.thinning = v;
        }
        c
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OutputFormat {
    Table,
    Json,
}

impl From<OutputFormat> for ReportFormat {
    fn from(f: OutputFormat) -> Self {
        match f {
            OutputFormat::Table => ReportFormat::Table,
            OutputFormat::Json => ReportFormat::Machine,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    traces: PathBuf,
    /// JSON sidecar with horizon_T and run list.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Horizon T; defaults to the manifest, then to the longest run.
    #[arg(long)]
    horizon: Option<Epoch>,
    #[command(flatten)]
    policy: PolicyArgs,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[arg(long, value_enum, default_value = "table")]
    format: OutputFormat,
    #[arg(long)]
    testbed: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Trace files, one race each.
    #[arg(long, num_args = 1..)]
    traces: Vec<PathBuf>,
    /// Generate this many synthetic races instead of reading traces.
    #[arg(long, conflicts_with = "traces")]
    synthetic: Option<usize>,
    #[arg(long, default_value_t = 20)]
    runs: usize,
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    #[arg(long)]
    horizon: Option<Epoch>,
    #[arg(long, value_delimiter = ',', default_value = "a,b,c,d,e,f,successive-halving")]
    criteria: Vec<Criterion>,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5")]
    deltas: Vec<f64>,
    #[arg(long)]
    guards: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    min_epochs: Epoch,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[arg(long, value_enum, default_value = "table")]
    format: OutputFormat,
    #[arg(long)]
    testbed: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write one CSV row per (criterion, delta).
    #[arg(long)]
    series: Option<PathBuf>,
}

#[derive(Args)]
struct KtableArgs {
    #[arg(long, default_value_t = 20)]
    max_n: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5")]
    deltas: Vec<f64>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    runs: usize,
    #[arg(long, default_value_t = 50)]
    horizon: Epoch,
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    /// Minimum spacing between asymptotes; 0 draws them independently.
    #[arg(long, default_value_t = 0.05)]
    gap: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for traces.csv and manifest.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    horizon: Epoch,
    #[command(flatten)]
    policy: PolicyArgs,
    #[command(flatten)]
    sampler: SamplerArgs,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    run: String,
    /// Use only the first N epochs.
    #[arg(long)]
    epochs: Option<Epoch>,
    #[arg(long)]
    horizon: Option<Epoch>,
    #[arg(long, default_value_t = 0.5)]
    delta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    sampler: SamplerArgs,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Domain(_) => 3,
        Error::InsufficientData { .. } => 4,
        Error::Format { .. } => 5,
        Error::Protocol(_) => 6,
        Error::NotFound(_) => 7,
        Error::Io(_) => 8,
        Error::Json(_) => 9,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Ktable(a) => ktable(a),
        Command::Synth(a) => synth(a),
        Command::Serve(a) => serve(a),
        Command::Fit(a) => fit(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = json!({"error": {"class": e.class(), "message": e.to_string()}});
            eprintln!("{body}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn policy(args: &PolicyArgs) -> HaltPolicy {
    HaltPolicy {
        warmup_epochs: args.min_epochs,
        k_override: args.k,
        ..HaltPolicy::new(args.criterion, args.delta).with_guards(args.guards)
    }
}

fn read(path: &Path) -> Result<String> {
    Ok(fs::read_to_string(path)?)
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn load_traces(path: &Path, manifest: Option<&Path>, horizon: Option<Epoch>) -> Result<Traces> {
    let rows = parse_trace(&read(path)?)?;
    let manifest = match manifest {
        Some(m) => {
            let m = parse_manifest(&read(m)?)?;
            if let Some(h) = horizon.filter(|&h| h != m.horizon) {
                return Err(Error::Domain(format!(
                    "--horizon {h} disagrees with manifest horizon_T {}",
                    m.horizon
                )));
            }
            m
        }
        None => {
            let longest = rows.values().map(Vec::len).max().unwrap_or(0) as Epoch;
            Manifest::for_rows(horizon.unwrap_or(longest).max(1), &rows)
        }
    };
    assemble_traces(rows, &manifest)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "traces".to_string(), |s| s.to_string_lossy().into_owned())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let traces = load_traces(&a.traces, a.manifest.as_deref(), a.horizon)?;
    let config = RaceConfig {
        horizon: traces.horizon,
        policy: policy(&a.policy),
        inference: a.sampler.config(),
        master_seed: a.policy.seed,
    };
    let cache = FitCache::new();
    let cells = sweep(
        std::slice::from_ref(&traces),
        &[config.policy.criterion],
        &[config.policy.delta],
        &config,
        &cache,
    )?;
    let doc = ReportDocument {
        testbed: a.testbed.unwrap_or_else(|| stem(&a.traces)),
        horizon: config.horizon,
        master_seed: config.master_seed,
        warmup_epochs: config.policy.warmup_epochs,
        inference: config.inference.clone(),
        entries: cells
            .into_iter()
            .map(|c| ReportEntry::from_cell(c, a.policy.guards))
            .collect(),
    };
    write_or_print(a.out.as_deref(), &emit_report(&doc, a.format.into()))
}

fn run_sweep(a: SweepArgs) -> Result<()> {
    let (races, testbed) = match a.synthetic {
        Some(count) => {
            let base = SynthConfig::new(a.runs, a.horizon.unwrap_or(50), a.noise, a.seed);
            let corpus = gen_corpus(&base, count)?;
            (corpus.into_iter().map(|c| c.traces).collect::<Vec<_>>(), "synthetic".to_string())
        }
        None => {
            if a.traces.is_empty() {
                return Err(Error::Domain("sweep needs --traces or --synthetic".into()));
            }
            let races = a
                .traces
                .iter()
                .map(|p| load_traces(p, None, a.horizon))
                .collect::<Result<Vec<_>>>()?;
            (races, stem(&a.traces[0]))
        }
    };
    let horizon = races[0].horizon;
    if races.iter().any(|r| r.horizon != horizon) {
        return Err(Error::Domain("all races in a sweep must share one horizon".into()));
    }
    let base = RaceConfig {
        horizon,
        policy: HaltPolicy {
            warmup_epochs: a.min_epochs,
            ..HaltPolicy::new(a.criteria[0], a.deltas[0]).with_guards(a.guards)
        },
        inference: a.sampler.config(),
        master_seed: a.seed,
    };
    let cache = FitCache::new();
    let cells = sweep(&races, &a.criteria, &a.deltas, &base, &cache)?;
    let doc = ReportDocument {
        testbed: a.testbed.unwrap_or(testbed),
        horizon,
        master_seed: a.seed,
        warmup_epochs: a.min_epochs,
        inference: base.inference.clone(),
        entries: cells
            .into_iter()
            .map(|c| ReportEntry::from_cell(c, a.guards))
            .collect(),
    };
    if let Some(p) = &a.series {
        fs::write(p, emit_series(&doc))?;
    }
    write_or_print(a.out.as_deref(), &emit_report(&doc, a.format.into()))
}

fn ktable(a: KtableArgs) -> Result<()> {
    let mut out = String::from("n");
    for d in &a.deltas {
        out.push_str(&format!("\tdelta={d}"));
    }
    out.push('\n');
    for n in 1..=a.max_n {
        out.push_str(&n.to_string());
        for &d in &a.deltas {
            out.push_str(&format!("\t{}", select_k(n, d)?));
        }
        out.push('\n');
    }
    write_or_print(None, &out)
}

fn synth(a: SynthArgs) -> Result<()> {
    let config = SynthConfig {
        min_gap: (a.gap > 0.0).then_some(a.gap),
        ..SynthConfig::new(a.runs, a.horizon, a.noise, a.seed)
    };
    let corpus = gen_synthetic(&config)?;
    fs::create_dir_all(&a.out)?;
    let rows: TraceRows = corpus.traces.runs.clone();
    let manifest = Manifest {
        horizon: a.horizon,
        runs: corpus
            .truth
            .iter()
            .map(|t| RunDescriptor {
                id: t.run_id.clone(),
                config: Some(json!({
                    "family": t.family.name(),
                    "params": t.params,
                    "offset": t.offset,
                    "asymptote": t.asymptote,
                })),
            })
            .collect(),
    };
    fs::write(a.out.join("traces.csv"), emit_trace(&rows))?;
    fs::write(a.out.join("manifest.json"), emit_manifest(&manifest))?;
    println!("{}", json!({"best_run": corpus.best_run, "runs": a.runs, "horizon_T": a.horizon}));
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let config = RaceConfig {
        horizon: a.horizon,
        policy: policy(&a.policy),
        inference: a.sampler.config(),
        master_seed: a.policy.seed,
    };
    let mut advisor = Advisor::new(config)?;
    let stdin = io::stdin();
    let mut stdout = io::stdout().lock();
    for line in stdin.lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        writeln!(stdout, "{}", advisor.handle_line(&line))?;
        stdout.flush()?;
    }
    Ok(())
}

fn fit(a: FitArgs) -> Result<()> {
    let traces = load_traces(&a.traces, a.manifest.as_deref(), a.horizon)?;
    let id = RunId::new(a.run.clone());
    let values = traces
        .runs
        .get(&id)
        .ok_or_else(|| Error::NotFound(format!("unknown run {id}")))?;
    let used = a.epochs.map_or(values.len(), |e| (e as usize).min(values.len()));
    let curve = LearningCurve::from_values(id.clone(), values[..used].to_vec(), traces.horizon)?;
    let inference = InferenceConfig {
        seed: fit_seed(a.seed, id.as_str(), used as Epoch),
        quantile_delta: a.delta,
        ..a.sampler.config()
    };
    let (posterior, prediction) = forecast(&curve, &inference)?;
    let m = posterior.samples.len() as f64;
    let mut weights: BTreeMap<String, f64> = BTreeMap::new();
    for s in &posterior.samples {
        for c in &s.components {
            *weights.entry(c.family.name().to_string()).or_default() += c.weight / m;
        }
    }
    let sigma = posterior.samples.iter().map(|s| s.noise_sigma).sum::<f64>() / m * posterior.scale;
    let body = json!({
        "run_id": id,
        "epochs_used": used,
        "horizon_T": traces.horizon,
        "delta": a.delta,
        "prediction": {
            "point_estimate": prediction.point_estimate,
            "conservative_estimate": prediction.conservative_estimate,
            "validity": prediction.validity,
            "samples": prediction.samples.len(),
        },
        "posterior": {
            "acceptance_rate": posterior.acceptance_rate,
            "mean_noise_sigma": sigma,
            "mean_weights": weights,
        },
    });
    println!("{}", serde_json::to_string_pretty(&body)?);
    Ok(())
}
