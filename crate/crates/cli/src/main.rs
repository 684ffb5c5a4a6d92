use std::path::{Path, PathBuf};
use std::process::ExitCode;

use brwtail::analysis::{FitOptions, TailKind};
use brwtail::harness::verify::{verify, Criterion, VerifyContext};
use brwtail::harness::{
    fit_stage, mgf_stage, perpetuity_stage, renewal_stage, resolve_output, simulate_stage, spine_tail_stage,
    ExperimentConfig, RunManifest,
};
use brwtail::model::{calibrate, DisplacementParams, Family, FreeParams, Regime};
use brwtail::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "brwtail", version, about = "Tails of killed branching random walks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate a model and print its log-Laplace transform.
    Phi(PhiArgs),
    /// Estimate (or reload) the renewal table of the model's walk.
    Renewal(RunArgs),
    /// Simulate the killed branching walk at every configured start height.
    Simulate(RunArgs),
    /// Naive and spine importance-sampling tail estimates of the truncated martingales.
    SpineTail(RunArgs),
    /// Perpetuities along the conditioned walk.
    Perpetuity(RunArgs),
    /// Moment-generating-function recursion and its bound certificate.
    Mgf(RunArgs),
    /// Fit an exponential or power tail to one CSV column.
    Fit(FitArgs),
    /// Run acceptance criteria end to end; exits 1 if any fails.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Gaussian,
    Lattice,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    Boundary,
    Subcritical,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Exponential,
    Power,
}

#[derive(Args)]
struct PhiArgs {
    #[arg(long, value_enum, default_value = "lattice")]
    family: FamilyArg,
    #[arg(long, value_enum, default_value = "boundary")]
    regime: RegimeArg,
    /// Per-child displacement variance (Gaussian family).
    #[arg(long)]
    sigma2: Option<f64>,
    /// Step magnitude (lattice family).
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    /// Points at which to print Φ; repeatable. Defaults to 0, 0.25, ..., 2.
    #[arg(long)]
    theta: Vec<f64>,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config in TOML; built-in defaults when omitted.
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Replica count for this stage.
    #[arg(long)]
    replicas: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "D_trunc")]
    column: String,
    #[arg(long, value_enum, default_value = "exponential")]
    kind: KindArg,
    /// Quantile range as two numbers, e.g. `--range 0.9 0.999`.
    #[arg(long, num_args = 2, default_values_t = [0.9, 0.999])]
    range: Vec<f64>,
    #[arg(long, default_value_t = 200)]
    bootstrap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Defaults to `<input>.fit.json` next to the input.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Criteria such as AC2, or `all`.
    #[arg(required = true)]
    criteria: Vec<String>,
    #[arg(long, default_value_t = 20240611)]
    seed: u64,
}

#[derive(Clone, Copy)]
enum Stage {
    Renewal,
    Simulate,
    SpineTail,
    Perpetuity,
    Mgf,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Renewal => "renewal",
            Stage::Simulate => "simulate",
            Stage::SpineTail => "spine-tail",
            Stage::Perpetuity => "perpetuity",
            Stage::Mgf => "mgf",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Phi(args) => phi(&args).map(|()| true),
        Command::Renewal(args) => run_stage(Stage::Renewal, &args).map(|()| true),
        Command::Simulate(args) => run_stage(Stage::Simulate, &args).map(|()| true),
        Command::SpineTail(args) => run_stage(Stage::SpineTail, &args).map(|()| true),
        Command::Perpetuity(args) => run_stage(Stage::Perpetuity, &args).map(|()| true),
        Command::Mgf(args) => run_stage(Stage::Mgf, &args).map(|()| true),
        Command::Fit(args) => fit(&args).map(|()| true),
        Command::Verify(args) => run_verify(&args),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn phi(args: &PhiArgs) -> brwtail::Result<()> {
    let family = match args.family {
        FamilyArg::Gaussian => Family::GaussianBinary,
        FamilyArg::Lattice => Family::LatticeBinary,
    };
    let regime = match args.regime {
        RegimeArg::Boundary => Regime::Boundary,
        RegimeArg::Subcritical => Regime::Subcritical,
    };
    let free = FreeParams { variance: args.sigma2, step: args.step, gamma: args.gamma, rho: args.rho };
    let model = calibrate(family, free, regime).map_err(|e| e.in_stage("phi"))?;
    match model.params {
        DisplacementParams::Gaussian { mean, variance } => println!("mean\t{mean}\nvariance\t{variance}"),
        DisplacementParams::Lattice { step, up_prob } => println!("step\t{step}\nup_prob\t{up_prob}"),
    }
    println!("Phi(1)\t{}", model.biggins_transform(1.0)?);
    println!("Phi'(1)\t{}", model.biggins_derivative(1.0)?);
    if let Some(k) = model.kappa.value() {
        println!("kappa\t{k}");
    }
    if let (Some(g), Some(r)) = (model.gamma, model.rho) {
        println!("gamma\t{g}\nrho\t{r}");
    }
    println!("theta\tPhi");
    let thetas = if args.theta.is_empty() { (0..=8).map(|i| 0.25 * i as f64).collect() } else { args.theta.clone() };
    for t in thetas {
        println!("{t}\t{}", model.biggins_transform(t).map_err(|e| e.in_stage("phi"))?);
    }
    Ok(())
}

fn load_config(stage: Stage, args: &RunArgs) -> brwtail::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = args.workers {
        cfg.workers = Some(workers);
    }
    if let Some(dir) = &args.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(r) = args.replicas {
        match stage {
            Stage::Renewal => cfg.walk.replicas = r,
            Stage::Simulate => cfg.engine.replicas = r,
            Stage::SpineTail => cfg.spine.replicas = r,
            Stage::Perpetuity => cfg.perpetuity.replicas = r,
            Stage::Mgf => return Err(Error::Config("mgf has no replicas".into())),
        }
    }
    Ok(cfg)
}

fn run_stage(stage: Stage, args: &RunArgs) -> brwtail::Result<()> {
    let cfg = load_config(stage, args).map_err(|e| e.in_stage(stage.name()))?;
    let manifest = match stage {
        Stage::Renewal => renewal_stage(&cfg),
        Stage::Simulate => simulate_stage(&cfg),
        Stage::SpineTail => spine_tail_stage(&cfg),
        Stage::Perpetuity => perpetuity_stage(&cfg),
        Stage::Mgf => mgf_stage(&cfg),
    }?;
    report(&cfg.resolved_output_dir(), &manifest);
    Ok(())
}

fn report(dir: &Path, manifest: &RunManifest) {
    println!("{} -> {}", manifest.stage, dir.display());
    for name in manifest.outputs.keys() {
        println!("  {name}");
    }
    for cert in &manifest.pruning {
        println!("  pruning certificate x={}: relative D mass {}", cert.x, cert.relative_d);
    }
}

fn fit(args: &FitArgs) -> brwtail::Result<()> {
    let kind = match args.kind {
        KindArg::Exponential => TailKind::Exponential,
        KindArg::Power => TailKind::Power,
    };
    let output = match &args.output {
        Some(p) => resolve_output(p),
        None => {
            let mut name = args.input.file_name().unwrap_or_default().to_os_string();
            name.push(".fit.json");
            args.input.with_file_name(name)
        }
    };
    let opts = FitOptions { bootstrap: args.bootstrap, seed: args.seed };
    let fit = fit_stage(&args.input, &args.column, kind, (args.range[0], args.range[1]), &opts, &output)?;
    println!("rate_or_index\t{}", fit.rate_or_index);
    println!("prefactor\t{}", fit.prefactor);
    println!("r_squared\t{}", fit.r_squared);
    println!("bootstrap_ci\t{}\t{}", fit.bootstrap_ci.0, fit.bootstrap_ci.1);
    println!("model_comparison\t{}", fit.model_comparison);
    println!("wrote {}", output.display());
    Ok(())
}

fn run_verify(args: &VerifyArgs) -> brwtail::Result<bool> {
    let criteria: Vec<Criterion> = if args.criteria.iter().any(|c| c.eq_ignore_ascii_case("all")) {
        Criterion::ALL.to_vec()
    } else {
        args.criteria.iter().map(|c| c.parse()).collect::<brwtail::Result<_>>().map_err(|e| e.in_stage("verify"))?
    };
    let ctx = VerifyContext::new(args.seed);
    let mut all = true;
    for c in criteria {
        let report = verify(c, &ctx)?;
        println!("{}", report.line());
        println!("{}", report.details());
        all &= report.passed;
    }
    Ok(all)
}
