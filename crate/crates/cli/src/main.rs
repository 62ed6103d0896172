use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use glauber_learn::dynamics::{random_configuration, simulate_ct, simulate_dt, Trajectory};
use glauber_learn::gibbs::find_indistinguishable_beta;
use glauber_learn::harness::{
    generate_instance, run_benchmark, run_sparsitron_trial_with, verify_suite, Algorithm, ExperimentConfig,
    InstanceFamily,
};
use glauber_learn::params::{recover_parameters, ParamsError, RecoveryOptions};
use glauber_learn::poly::{ModelBounds, ModelFile, MrfModel};
use glauber_learn::structure::{derive_params, find_markov_blanket_with, HeuristicLearner, StructureError};

/// Learn binary Markov random fields from Glauber dynamics.
#[derive(Parser)]
#[command(name = "glauber-learn", version)]
struct Cli {
    /// Master seed; every random stream is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory for output files.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate Glauber dynamics and write the trajectory.
    Simulate(SimulateArgs),
    /// Recover the dependency graph from a trajectory.
    LearnStructure(StructureArgs),
    /// Recover the Hamiltonian given the dependency graph.
    LearnParams(ParamsArgs),
    /// Run Sparsitron on i.i.d. sparse-parity samples and report every block.
    Baseline(BaselineArgs),
    /// Run a benchmark grid from a JSON config.
    Bench(BenchArgs),
    /// Search for the indistinguishable lower-bound pair.
    VerifyLb(VerifyLbArgs),
    /// Run the verification battery.
    VerifySuite,
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Spn,
    DoubleParity,
    IsingChain,
}

#[derive(Args)]
struct ModelArgs {
    /// JSON model file.
    #[arg(long, conflicts_with = "family")]
    model: Option<PathBuf>,
    /// Generate a model from a family instead.
    #[arg(long, value_enum)]
    family: Option<Family>,
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Coupling for the Ising chain.
    #[arg(long, default_value_t = 0.3)]
    beta: f64,
}

impl ModelArgs {
    fn family(&self) -> Result<InstanceFamily> {
        Ok(match (&self.model, self.family) {
            (Some(path), _) => InstanceFamily::ModelFile { path: path.clone() },
            (None, Some(Family::Spn)) => InstanceFamily::Spn,
            (None, Some(Family::DoubleParity)) => InstanceFamily::DoubleParity,
            (None, Some(Family::IsingChain)) => InstanceFamily::IsingChain { beta: self.beta },
            (None, None) => bail!("give --model or --family"),
        })
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TimeMode {
    Continuous,
    Discrete,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum, default_value_t = TimeMode::Continuous)]
    mode: TimeMode,
    /// Time horizon (continuous) or number of steps (discrete).
    #[arg(long)]
    horizon: f64,
    /// Trajectory file; `.bin` selects the binary format. Defaults to stdout,
    /// or `trajectory.txt` in the output directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LearnMode {
    Theory,
    Heuristic,
}

#[derive(Args)]
struct StructureArgs {
    /// Trajectory file (`.bin` for binary).
    #[arg(long)]
    trajectory: PathBuf,
    #[arg(long, value_enum, default_value_t = LearnMode::Heuristic)]
    mode: LearnMode,
    /// Model file supplying `(k, d, alpha, lambda)` in theory mode.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Interaction order; required unless a model file gives it.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Failure probability for the theory-mode constants.
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    /// Window override: time units (theory) or steps (heuristic).
    #[arg(long)]
    window: Option<f64>,
    /// Blocks between stopping times (theory).
    #[arg(long)]
    burn_in: Option<u64>,
    /// Decision threshold (theory).
    #[arg(long)]
    kappa: Option<f64>,
    /// Required stopping times per pair (theory).
    #[arg(long)]
    required: Option<f64>,
    /// Skip the horizon check when constants are overridden.
    #[arg(long)]
    skip_horizon_check: bool,
}

#[derive(Args)]
struct ParamsArgs {
    /// Discrete-time trajectory file.
    #[arg(long)]
    trajectory: PathBuf,
    /// Model file whose dependency graph and bounds are used.
    #[arg(long)]
    model: Option<PathBuf>,
    /// JSON adjacency list `[[1], [0, 2], ...]`, instead of a model.
    #[arg(long, conflicts_with = "model")]
    graph: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    /// Radius of the coefficient ball.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    samples_per_node: Option<usize>,
    #[arg(long, default_value_t = 1)]
    min_samples: usize,
    /// Steps between samples; defaults to `ceil(4 n ln d)`.
    #[arg(long)]
    spacing: Option<u64>,
    #[arg(long, default_value_t = 1e-6)]
    eps_opt: f64,
    #[arg(long, default_value_t = 20_000)]
    max_iters: usize,
    /// Also fit monomials of full degree `k` through the node.
    #[arg(long)]
    include_degree_k: bool,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 1500.0)]
    time_cap_s: f64,
    #[arg(long)]
    max_blocks: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    block_size: usize,
    #[arg(long, default_value_t = 1000)]
    test_size: usize,
    #[arg(long, default_value_t = 2.0)]
    lambda: f64,
}

#[derive(Args)]
struct BenchArgs {
    /// JSON file mirroring the experiment config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cells as `n:k`, comma separated.
    #[arg(long, value_delimiter = ',')]
    grid: Vec<String>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    time_cap_s: Option<f64>,
    #[arg(long)]
    max_blocks: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    algorithms: Vec<String>,
}

#[derive(Args)]
struct VerifyLbArgs {
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1e-12)]
    tol: f64,
}

/// Non-error outcomes with their own exit codes.
enum Status {
    Done,
    Insufficient(String),
    VerificationFailed(String),
}

fn main() -> ExitCode {
    // Usage errors exit with 1 so that 2 keeps meaning insufficient data.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(Status::Done) => ExitCode::SUCCESS,
        Ok(Status::Insufficient(msg)) => {
            eprintln!("insufficient data: {msg}");
            ExitCode::from(2)
        }
        Ok(Status::VerificationFailed(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> Result<Status> {
    if let Some(dir) = &cli.out_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    match &cli.command {
        Command::Simulate(a) => simulate(cli, a),
        Command::LearnStructure(a) => learn_structure(cli, a),
        Command::LearnParams(a) => learn_params(cli, a),
        Command::Baseline(a) => baseline(cli, a),
        Command::Bench(a) => bench(cli, a),
        Command::VerifyLb(a) => verify_lb(cli, a),
        Command::VerifySuite => verify(cli),
    }
}

/// Write `text` to `name` in the output directory, or to stdout without one.
fn emit(cli: &Cli, name: &str, text: &str) -> Result<()> {
    match &cli.out_dir {
        Some(dir) => fs::write(dir.join(name), text).with_context(|| format!("writing {name}")),
        None => {
            let mut out = io::stdout().lock();
            out.write_all(text.as_bytes())?;
            if !text.ends_with('\n') {
                writeln!(out)?;
            }
            Ok(())
        }
    }
}

fn is_binary(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "bin")
}

fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let file = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let traj = if is_binary(path) { Trajectory::read_binary(file)? } else { Trajectory::read_text(file)? };
    Ok(traj)
}

fn read_model(path: &Path) -> Result<MrfModel> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(ModelFile::from_json(&text)?.into_model()?)
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> Result<Status> {
    let instance = generate_instance(&a.model.family()?, a.model.n, a.model.k, cli.seed)?;
    let model = &instance.model;
    let x0 = random_configuration(model.n(), cli.seed);
    let traj = match a.mode {
        TimeMode::Continuous => simulate_ct(model, a.horizon, &x0, cli.seed)?,
        TimeMode::Discrete => simulate_dt(model, a.horizon.round() as u64, &x0, cli.seed)?,
    };
    let output = a.output.clone().or_else(|| cli.out_dir.as_ref().map(|d| d.join("trajectory.txt")));
    if let Some(dir) = &cli.out_dir {
        fs::write(dir.join("model.json"), model.to_file().to_json())?;
    }
    match output {
        Some(path) => {
            let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
            if is_binary(&path) {
                traj.write_binary(&mut w)?;
            } else {
                traj.write_text(&mut w)?;
            }
            w.flush()?;
            eprintln!("{} events written to {}", traj.events().len(), path.display());
        }
        None => traj.write_text(BufWriter::new(io::stdout().lock()))?,
    }
    Ok(Status::Done)
}

fn model_bounds(a: &StructureArgs) -> Result<ModelBounds> {
    let from_file = a.model.as_deref().map(read_model).transpose()?.map(|m| m.bounds());
    let pick = |flag: Option<f64>, file: Option<f64>, name: &str| {
        flag.or(file).with_context(|| format!("--{name} is required without --model"))
    };
    Ok(ModelBounds {
        k: pick(a.k.map(|v| v as f64), from_file.map(|b| b.k as f64), "k")? as usize,
        d: pick(a.d.map(|v| v as f64), from_file.map(|b| b.d as f64), "d")? as usize,
        alpha: pick(a.alpha, from_file.map(|b| b.alpha), "alpha")?,
        lambda: pick(a.lambda, from_file.map(|b| b.lambda), "lambda")?,
    })
}

fn learn_structure(cli: &Cli, a: &StructureArgs) -> Result<Status> {
    let traj = read_trajectory(&a.trajectory)?;
    match a.mode {
        LearnMode::Theory => {
            let b = model_bounds(a)?;
            let params = derive_params(b.k, b.d, b.alpha, b.lambda, a.delta, traj.n())?
                .with_overrides(a.window, a.burn_in, a.kappa, a.required)?;
            match find_markov_blanket_with(&traj, &params, !a.skip_horizon_check) {
                Ok(graph) => emit(cli, "graph.json", &serde_json::to_string_pretty(&graph)?)?,
                Err(e @ (StructureError::Insufficient { .. } | StructureError::HorizonTooShort { .. })) => {
                    return Ok(Status::Insufficient(e.to_string()))
                }
                Err(e) => return Err(e.into()),
            }
        }
        LearnMode::Heuristic => {
            let k = match (a.k, &a.model) {
                (Some(k), _) => k,
                (None, Some(path)) => read_model(path)?.bounds().k,
                (None, None) => bail!("--k is required without --model"),
            };
            let mut learner = HeuristicLearner::new(traj.n(), k, a.window.map(|w| w.round() as u64))?;
            learner.process_block(&traj)?;
            let ranking: Vec<Vec<usize>> = (0..traj.n()).map(|i| learner.top(i, k.saturating_sub(1))).collect();
            let report = serde_json::json!({
                "n": traj.n(),
                "k": k,
                "window": learner.window(),
                "labels": traj.labels(),
                "top_candidates": ranking,
                "pairs": learner.top_pairs(),
            });
            emit(cli, "ranking.json", &serde_json::to_string_pretty(&report)?)?;
        }
    }
    Ok(Status::Done)
}

fn learn_params(cli: &Cli, a: &ParamsArgs) -> Result<Status> {
    let traj = read_trajectory(&a.trajectory)?;
    let (graph, k, lambda) = match (&a.model, &a.graph) {
        (Some(path), _) => {
            let model = read_model(path)?;
            let b = model.bounds();
            (model.graph().to_vec(), a.k.unwrap_or(b.k), a.lambda.unwrap_or(b.lambda))
        }
        (None, Some(path)) => {
            let graph: Vec<Vec<usize>> = serde_json::from_str(&fs::read_to_string(path)?)?;
            let k = a.k.context("--k is required with --graph")?;
            let lambda = a.lambda.context("--lambda is required with --graph")?;
            (graph, k, lambda)
        }
        (None, None) => bail!("give --model or --graph"),
    };
    let options = RecoveryOptions {
        eps_opt: a.eps_opt,
        max_iters: a.max_iters,
        samples_per_node: a.samples_per_node,
        min_samples: a.min_samples,
        spacing: a.spacing,
        include_degree_k: a.include_degree_k,
    };
    match recover_parameters(&traj, &graph, k, lambda, &options) {
        Ok(recovered) => {
            let file = MrfModel::with_derived_bounds(recovered.psi.clone()).to_file();
            emit(cli, "recovered.json", &file.to_json())?;
            if let Some(dir) = &cli.out_dir {
                fs::write(dir.join("diagnostics.json"), serde_json::to_string_pretty(&recovered.nodes)?)?;
            }
            Ok(Status::Done)
        }
        Err(e @ (ParamsError::TooFewSamples { .. } | ParamsError::Aggregated(_))) => Ok(Status::Insufficient(e.to_string())),
        Err(e) => Err(e.into()),
    }
}

fn baseline(cli: &Cli, a: &BaselineArgs) -> Result<Status> {
    let config = ExperimentConfig {
        seed: cli.seed,
        time_cap_s: a.time_cap_s,
        max_blocks: a.max_blocks,
        sparsitron_block_size: a.block_size,
        sparsitron_test_size: a.test_size,
        sparsitron_lambda: a.lambda,
        ..Default::default()
    };
    config.validate()?;
    let instance = generate_instance(&InstanceFamily::Spn, a.n, a.k, cli.seed)?;
    let mut csv = String::from("block,elapsed_s,best_risk,top3_monomials,success\n");
    let record = run_sparsitron_trial_with(&instance, &config, a.k, cli.seed, |b, success| {
        let tops: Vec<String> =
            b.top3.iter().map(|m| m.iter().map(usize::to_string).collect::<Vec<_>>().join("-")).collect();
        csv.push_str(&format!("{},{:.6},{:.6},{},{}\n", b.block, b.elapsed_s, b.best_risk, tops.join(";"), success));
    })?;
    if let Some(reason) = &record.refused {
        eprintln!("refused: {reason}");
    }
    emit(cli, "baseline.csv", &csv)?;
    eprintln!(
        "planted parity {:?}: success {} after {} blocks",
        instance.support(),
        record.success,
        record.blocks
    );
    Ok(Status::Done)
}

fn parse_cell(cell: &str) -> Result<(usize, usize)> {
    let (n, k) = cell.split_once(':').with_context(|| format!("cell {cell:?} is not n:k"))?;
    Ok((n.trim().parse()?, k.trim().parse()?))
}

fn bench(cli: &Cli, a: &BenchArgs) -> Result<Status> {
    let mut config: ExperimentConfig = match &a.config {
        Some(path) => serde_json::from_str(&fs::read_to_string(path)?).context("parsing config")?,
        None => ExperimentConfig::default(),
    };
    config.seed = cli.seed;
    if !a.grid.is_empty() {
        config.grid = a.grid.iter().map(|c| parse_cell(c)).collect::<Result<_>>()?;
    }
    if !a.algorithms.is_empty() {
        config.algorithms = a
            .algorithms
            .iter()
            .map(|s| match s.as_str() {
                "dynamics" => Ok(Algorithm::Dynamics),
                "sparsitron" => Ok(Algorithm::Sparsitron),
                other => bail!("unknown algorithm {other:?}"),
            })
            .collect::<Result<_>>()?;
    }
    config.trials = a.trials.unwrap_or(config.trials);
    config.time_cap_s = a.time_cap_s.unwrap_or(config.time_cap_s);
    config.max_blocks = a.max_blocks.or(config.max_blocks);
    if cli.out_dir.is_some() {
        config.out_dir = cli.out_dir.clone();
    }
    let record = run_benchmark(&config)?;
    print!("{}", record.table());
    Ok(Status::Done)
}

fn verify_lb(cli: &Cli, a: &VerifyLbArgs) -> Result<Status> {
    let witness = find_indistinguishable_beta(a.alpha, a.tol)?;
    emit(cli, "lower_bound.json", &serde_json::to_string_pretty(&witness)?)?;
    if witness.max_discrepancy <= 1e-8 && witness.edge_in_first && !witness.edge_in_second {
        Ok(Status::Done)
    } else {
        Ok(Status::VerificationFailed(format!("discrepancy {:.3e}", witness.max_discrepancy)))
    }
}

fn verify(cli: &Cli) -> Result<Status> {
    let report = verify_suite(cli.seed);
    print!("{}", report.render());
    if let Some(dir) = &cli.out_dir {
        fs::write(dir.join("verify.json"), serde_json::to_string_pretty(&report)?)?;
    }
    if report.passed() {
        Ok(Status::Done)
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        Ok(Status::VerificationFailed(failed.join(", ")))
    }
}
