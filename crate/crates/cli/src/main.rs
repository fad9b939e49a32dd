use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use pfsurprisal::experiments::{
    condition_records, fit_deltas, run_condition, run_study, run_trajectory_study, Backend, ConditionRecord,
    Context, ExperimentConfig, StudyPlan,
};
use pfsurprisal::io::{self, format_float, Format};
use pfsurprisal::oracle::{self, build_chain_with_budget, DEFAULT_STATE_BUDGET};
use pfsurprisal::{
    asymptotic_expected_surprisal, coefficient_of_variation_sq, fixation_time, kl_cost,
    linear_diffusion_delta, marginal_word_prob, second_order_delta, surprisal, with_worker_threads,
    Error, ModelSpec, StartMode,
};

const EXIT_INVALID: u8 = 2;
const EXIT_BUDGET: u8 = 3;

#[derive(Parser)]
#[command(name = "pfsurprisal", version, about = "Expected surprisal under particle-filter resampling")]
struct Cli {
    /// Worker threads (default: all cores). Output does not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo trajectory of the expected surprisal.
    Simulate(SimulateArgs),
    /// Exact trajectory and absorption time from the composition chain.
    Oracle(OracleArgs),
    /// Second-order and linear-diffusion predictions at the prior.
    Approx(ApproxArgs),
    /// Runs a study plan or a single grid and writes its CSVs.
    Experiment(ExperimentArgs),
    /// Correlates true and predicted per-step increases from a records file.
    Fit(FitArgs),
}

#[derive(Args, Clone)]
struct SpecArgs {
    /// Prior over structures, comma separated.
    #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
    prior: Vec<f64>,
    /// Likelihood of the word under each structure, comma separated.
    #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
    q: Vec<f64>,
    /// Admit zero likelihoods (infinite surprisal is then reported, not rejected).
    #[arg(long)]
    allow_parse_failure: bool,
}

impl SpecArgs {
    fn spec(&self) -> pfsurprisal::Result<ModelSpec> {
        if self.allow_parse_failure {
            ModelSpec::allowing_parse_failure(self.prior.clone(), self.q.clone())
        } else {
            ModelSpec::new(self.prior.clone(), self.q.clone())
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StartArg {
    /// Step 0 is the initial particle draw.
    Empirical,
    /// Step 0 is the exact prior; particles are drawn at step 1.
    Exact,
}

impl From<StartArg> for StartMode {
    fn from(s: StartArg) -> Self {
        match s {
            StartArg::Empirical => StartMode::Empirical,
            StartArg::Exact => StartMode::Exact,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    MonteCarlo,
    Exact,
    Auto,
}

impl From<BackendArg> for Backend {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::MonteCarlo => Backend::MonteCarlo,
            BackendArg::Exact => Backend::Exact,
            BackendArg::Auto => Backend::Auto,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    spec: SpecArgs,
    /// Particle count.
    #[arg(long)]
    n: u64,
    /// Last resampling step.
    #[arg(long)]
    steps: usize,
    #[arg(long, default_value_t = 50_000)]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "empirical")]
    start: StartArg,
    /// Output file (`.json` for JSON, CSV otherwise); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    spec: SpecArgs,
    #[arg(long)]
    n: u64,
    #[arg(long)]
    steps: usize,
    #[arg(long, value_enum, default_value = "empirical")]
    start: StartArg,
    /// Largest chain (number of compositions) to build.
    #[arg(long, default_value_t = DEFAULT_STATE_BUDGET)]
    budget: usize,
    /// Output file for the trajectory; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write every transition of the chain to this CSV.
    #[arg(long)]
    chain_out: Option<PathBuf>,
}

#[derive(Args)]
struct ApproxArgs {
    #[command(flatten)]
    spec: SpecArgs,
    #[arg(long)]
    n: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// 5×10⁴ trajectory trials and 10⁶ fit trials.
    Full,
    /// 10⁴ trajectory trials and 10⁵ fit trials.
    Desk,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Study plan (TOML, or JSON for `.json`). Conflicts with the grid flags.
    #[arg(long, conflicts_with_all = ["q", "context", "ns"])]
    config: Option<PathBuf>,
    /// Built-in plan used when neither --config nor grid flags are given.
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// Output directory.
    #[arg(long, env = "PFSURPRISAL_OUT_DIR", default_value = "results")]
    out_dir: PathBuf,
    /// Overrides the seed of every study.
    #[arg(long)]
    seed: Option<u64>,
    /// Print the selected plan as TOML and exit.
    #[arg(long)]
    print_config: bool,

    /// Grid mode: a likelihood vector; repeat for each grid value.
    #[arg(long, value_delimiter = ';')]
    q: Vec<String>,
    /// Grid mode: NAME=p1,p2,…; repeat for each context.
    #[arg(long)]
    context: Vec<String>,
    /// Grid mode: particle counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    ns: Vec<u64>,
    /// Grid mode: last resampling step.
    #[arg(long, default_value_t = 5)]
    steps: usize,
    /// Grid mode: trials per condition.
    #[arg(long, default_value_t = 10_000)]
    trials: u64,
    #[arg(long, value_enum, default_value = "empirical")]
    start: StartArg,
    #[arg(long, value_enum, default_value = "monte-carlo")]
    backend: BackendArg,
    #[arg(long)]
    allow_parse_failure: bool,
    #[arg(long, default_value_t = DEFAULT_STATE_BUDGET)]
    budget: usize,
}

#[derive(Args)]
struct FitArgs {
    /// Condition records (CSV, or JSON for `.json`).
    #[arg(long)]
    records: PathBuf,
    /// Fit report JSON.
    #[arg(long)]
    out: PathBuf,
    /// Scatter points CSV.
    #[arg(long)]
    points: Option<PathBuf>,
}

fn parse_probs(text: &str, what: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .with_context(|| format!("{what}: `{s}` is not a number"))
        })
        .collect()
}

fn write_records(records: &[ConditionRecord], out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => io::emit_records(records, path, Format::from_path(path))
            .with_context(|| format!("writing {}", path.display())),
        None => Ok(io::write_csv(records, std::io::stdout().lock())?),
    }
}

fn key_value(out: &mut impl Write, key: &str, value: f64) -> std::io::Result<()> {
    writeln!(out, "{key},{}", format_float(value))
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let spec = args.spec.spec()?;
    let summary = run_condition(
        &spec,
        args.n,
        args.steps,
        args.trials,
        args.seed,
        args.start.into(),
        Backend::MonteCarlo,
        0,
    )?;
    let records = condition_records("simulate", "custom", &args.spec.q, &summary);
    write_records(&records, args.out.as_deref())
}

fn oracle_cmd(args: OracleArgs) -> Result<()> {
    let spec = args.spec.spec()?;
    let chain = build_chain_with_budget(&spec, args.n, args.budget)?;
    let summary = oracle::exact_ensemble(&chain, &spec, args.steps, args.start.into())?;
    let records = condition_records("oracle", "custom", &args.spec.q, &summary);
    write_records(&records, args.out.as_deref())?;
    if let Some(path) = &args.chain_out {
        let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        io::write_chain_csv(&chain, std::io::BufWriter::new(f))?;
    }
    let absorption = oracle::exact_absorption_time(&chain)?;
    let asymptote = asymptotic_expected_surprisal(&spec, spec.prior())?;
    // the trajectory owns stdout when no --out is given
    let mut sink: Box<dyn Write> = if args.out.is_some() {
        Box::new(std::io::stdout().lock())
    } else {
        Box::new(std::io::stderr().lock())
    };
    writeln!(sink, "states,{}", chain.len())?;
    key_value(&mut sink, "absorption_time", absorption)?;
    key_value(&mut sink, "fixation_time_diffusion", fixation_time(spec.prior(), args.n))?;
    key_value(&mut sink, "asymptotic_surprisal", asymptote)?;
    Ok(())
}

fn approx(args: ApproxArgs) -> Result<()> {
    let spec = args.spec.spec()?;
    if args.n == 0 {
        bail!(Error::InvalidArgument("particle count must be ≥ 1".into()));
    }
    let prior = spec.prior();
    let sample = std::slice::from_ref(prior);
    let mut out = std::io::stdout().lock();
    writeln!(out, "quantity,value")?;
    key_value(&mut out, "surprisal", surprisal(marginal_word_prob(&spec, prior)?)?)?;
    key_value(&mut out, "asymptotic_surprisal", asymptotic_expected_surprisal(&spec, prior)?)?;
    key_value(&mut out, "kl_cost", kl_cost(&spec, prior)?)?;
    key_value(&mut out, "cv_sq", coefficient_of_variation_sq(&spec, prior)?)?;
    key_value(&mut out, "second_order_delta", second_order_delta(&spec, sample, args.n, 0)?.value)?;
    key_value(&mut out, "fixation_time", fixation_time(prior, args.n))?;
    key_value(&mut out, "linear_diffusion_delta", linear_diffusion_delta(&spec, sample, args.n, 0)?.value)?;
    Ok(())
}

fn grid_config(args: &ExperimentArgs) -> Result<ExperimentConfig> {
    let q_likelihoods = args
        .q
        .iter()
        .map(|q| parse_probs(q, "--q"))
        .collect::<Result<Vec<_>>>()?;
    let contexts = args
        .context
        .iter()
        .map(|c| {
            let (name, prior) = c
                .split_once('=')
                .with_context(|| format!("--context `{c}` is not NAME=p1,p2,…"))?;
            Ok(Context::new(name, parse_probs(prior, "--context")?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentConfig {
        q_likelihoods,
        contexts,
        particle_counts: args.ns.clone(),
        steps: args.steps,
        trials: args.trials,
        seed: args.seed.unwrap_or(0),
        start_mode: args.start.into(),
        allow_parse_failure: args.allow_parse_failure,
        backend: args.backend.into(),
        state_budget: args.budget,
    })
}

fn experiment(args: ExperimentArgs) -> Result<()> {
    let grid_mode = !(args.q.is_empty() && args.context.is_empty() && args.ns.is_empty());
    if grid_mode {
        let config = grid_config(&args)?;
        if args.print_config {
            print!("{}", config.to_toml_string()?);
            return Ok(());
        }
        config.validate()?;
        let records = run_trajectory_study(&config, "grid")?;
        let path = args.out_dir.join("trajectories.csv");
        io::emit_records(&records, &path, Format::Csv)?;
        println!("{}", path.display());
        return Ok(());
    }

    let mut plan = match &args.config {
        Some(path) => StudyPlan::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => match args.preset {
            Preset::Full => StudyPlan::full(),
            Preset::Desk => StudyPlan::desk(),
        },
    };
    if let Some(seed) = args.seed {
        plan.apply_seed(seed);
    }
    if args.print_config {
        print!("{}", plan.to_toml_string()?);
        return Ok(());
    }
    let outputs = run_study(&plan)?;
    for path in io::write_study(&outputs, &args.out_dir)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn fit(args: FitArgs) -> Result<()> {
    let records: Vec<ConditionRecord> =
        io::load_records(&args.records).with_context(|| format!("reading {}", args.records.display()))?;
    let report = fit_deltas(&records)?;
    io::emit_report(&report, &args.out)?;
    if let Some(path) = &args.points {
        io::emit_records(&report.points, path, Format::Csv)?;
    }
    let mut out = std::io::stdout().lock();
    key_value(&mut out, "pearson_r2_second_order", report.pearson_r2_second_order)?;
    key_value(&mut out, "pearson_r2_linear_diffusion", report.pearson_r2_linear_diffusion)?;
    key_value(&mut out, "spearman_rho_second_order", report.spearman_rho_second_order)?;
    key_value(&mut out, "spearman_rho_linear_diffusion", report.spearman_rho_linear_diffusion)?;
    writeln!(out, "excluded_points,{}", report.excluded_points)?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::StateBudgetExceeded { .. }) => EXIT_BUDGET,
        Some(
            Error::InvalidProbability { .. }
            | Error::NotNormalized { .. }
            | Error::DimensionMismatch { .. }
            | Error::NoStructures
            | Error::ZeroLikelihood { .. }
            | Error::InvalidArgument(_)
            | Error::Config { .. }
            | Error::Toml(_),
        ) => EXIT_INVALID,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = || match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Oracle(a) => oracle_cmd(a),
        Command::Approx(a) => approx(a),
        Command::Experiment(a) => experiment(a),
        Command::Fit(a) => fit(a),
    };
    let result = with_worker_threads(cli.threads, run).map_err(anyhow::Error::from).and_then(|r| r);
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
