use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use optimist_core::divergence::{conjugate_upper, ConjugateInput, DivergenceKind};
use optimist_core::harness::{
    format_summary, run_sweep, summarize, write_csv, AlgorithmId, EnvironmentSpec, ExperimentConfig, FeatureKind,
    RegretLog,
};
use optimist_core::oracles::exact_conjugate;
use optimist_core::verify::run_oracle_suite;
use optimist_core::Result;

#[derive(Parser)]
#[command(name = "optimist", version, about = "Optimistic exploration experiments for episodic MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one algorithm over every seed and write the regret log as CSV.
    Run(RunArgs),
    /// Run several algorithms on the same environment and seeds.
    Sweep(SweepArgs),
    /// Run the oracle suite and print a pass/fail table.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print (exact oracle, upper bound) conjugate pairs for each `--z`.
    Conjugate(ConjugateArgs),
}

#[derive(Args)]
struct ExperimentArgs {
    /// JSON experiment config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in environment (`chain` or `random`) used when no config is given.
    #[arg(long, default_value = "chain")]
    env: String,
    #[arg(long, default_value_t = 6)]
    states: usize,
    #[arg(long, default_value_t = 2)]
    actions: usize,
    #[arg(long, default_value_t = 20)]
    horizon: usize,
    /// Seed of the random environment generator.
    #[arg(long, default_value_t = 0)]
    env_seed: u64,
    #[arg(long)]
    episodes: Option<u64>,
    #[arg(long)]
    delta: Option<f64>,
    /// Number of run seeds `0..n`.
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    features: Option<FeatureKind>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    alpha_scale: Option<f64>,
    /// CSV destination; without one the CSV goes to stdout and the summary to stderr.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    #[arg(long)]
    alg: Option<AlgorithmId>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    #[arg(long, value_delimiter = ',', default_value = "tv,bernstein,kl,rkl,chi2,lsvi")]
    algs: Vec<AlgorithmId>,
}

#[derive(Args)]
struct ConjugateArgs {
    #[arg(long)]
    kind: DivergenceKind,
    /// Reference vector, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    p_hat: Vec<f64>,
    #[arg(long)]
    eps: f64,
    /// Value vector, comma separated; repeat for several vectors.
    #[arg(long, required = true)]
    z: Vec<String>,
    /// Visit count entering the lower-order bonus terms.
    #[arg(long, default_value_t = 1.0)]
    count: f64,
    /// Remaining horizon entering the lower-order bonus terms; defaults to max |z|.
    #[arg(long)]
    horizon: Option<f64>,
}

impl ExperimentArgs {
    fn resolve(&self, alg: Option<AlgorithmId>) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_json_file(path)?,
            None => {
                let env = EnvironmentSpec::builtin(&self.env, self.states, self.actions, self.horizon, self.env_seed)?;
                ExperimentConfig::new(env, alg.unwrap_or(AlgorithmId::Tv), 5000, 0.05, (0..10).collect())
            }
        };
        if let Some(alg) = alg {
            cfg.algorithm = alg;
        }
        if let Some(k) = self.episodes {
            cfg.episodes = k;
        }
        if let Some(d) = self.delta {
            cfg.delta = d;
        }
        if let Some(n) = self.seeds {
            cfg.seeds = (0..n).collect();
        }
        if let Some(f) = self.features {
            cfg.features = f;
        }
        if self.dim.is_some() {
            cfg.dim = self.dim;
        }
        if self.alpha_scale.is_some() {
            cfg.alpha_scale = self.alpha_scale;
        }
        if self.output.is_some() {
            cfg.output = self.output.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn emit(logs: &[RegretLog], output: Option<&PathBuf>) -> Result<()> {
    let summary = format_summary(&summarize(logs));
    match output {
        Some(path) => {
            let file = std::fs::File::create(path)?;
            write_csv(logs, std::io::BufWriter::new(file))?;
            print!("{summary}");
        }
        None => {
            write_csv(logs, std::io::stdout().lock())?;
            eprint!("{summary}");
        }
    }
    Ok(())
}

fn parse_vector(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| optimist_core::Error::Config(format!("`{v}` is not a number")))
        })
        .collect()
}

fn conjugate(args: &ConjugateArgs) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "exact upper")?;
    for text in &args.z {
        let z = parse_vector(text)?;
        let horizon = args.horizon.unwrap_or_else(|| z.iter().fold(0.0, |m, v| m.max(v.abs())));
        let input = ConjugateInput::new(&z, args.eps, &args.p_hat).with_extras(horizon, args.count, z.len());
        let upper = conjugate_upper(args.kind, &input)?;
        match exact_conjugate(args.kind, &input) {
            Ok(exact) => writeln!(out, "{exact} {upper}")?,
            Err(optimist_core::Error::Domain(_)) => writeln!(out, "empty {upper}")?,
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.experiment.resolve(args.alg)?;
            let logs = run_sweep(&cfg, &[cfg.algorithm])?;
            emit(&logs, cfg.output.as_ref())?;
        }
        Command::Sweep(args) => {
            let cfg = args.experiment.resolve(args.algs.first().copied())?;
            let logs = run_sweep(&cfg, &args.algs)?;
            emit(&logs, cfg.output.as_ref())?;
        }
        Command::Verify { seed } => {
            let outcomes = run_oracle_suite(seed)?;
            for o in &outcomes {
                println!("{o}");
            }
            return Ok(outcomes.iter().all(|o| o.passed));
        }
        Command::Conjugate(args) => conjugate(&args)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
