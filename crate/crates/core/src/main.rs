use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use gainlab::experiment::{
    emit_report, generate_problem, gradient_check_suite, run_experiment, ExperimentConfig,
    OutputFormat, OutputTarget, GAIN_DISTANCE_THRESHOLD, GRADIENT_CHECK_THRESHOLD,
    STATIONARITY_THRESHOLD,
};
use gainlab::objectives::{finite_difference_gradient, gradient};
use gainlab::{
    analytic_gain, cross_objective_equivalence, stationarity_residual, GainError, GainMatrix,
    Matrix, ObjectiveKind, OptimizerConfig,
};

#[derive(Parser)]
#[command(
    name = "gainlab",
    version,
    about = "Checks that the Kalman gain minimizes trace, log-determinant and entropy of the analysis covariance"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Run a seeded batch of random problems and write a report.
    Run {
        #[arg(long, default_value_t = 4)]
        state_dim: usize,
        #[arg(long, default_value_t = 3)]
        obs_dim: usize,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10.0)]
        cond: f64,
        #[arg(long, default_value_t = 1e-9)]
        grad_tol: f64,
        #[arg(long, default_value_t = 5000)]
        max_iters: usize,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        /// Output file, or `-` for standard output.
        #[arg(long, default_value = "-")]
        out: String,
        /// Worker threads; the report is identical for any value.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Verbose verification of a single problem instance.
    Check {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        state_dim: usize,
        #[arg(long)]
        obs_dim: usize,
        #[arg(long, default_value_t = 10.0)]
        cond: f64,
        #[arg(long, default_value_t = 1e-9)]
        grad_tol: f64,
        #[arg(long, default_value_t = 5000)]
        max_iters: usize,
    },
    /// Compare the analytic log-det gradient with central differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 6)]
        max_dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10.0)]
        cond: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run {
            state_dim,
            obs_dim,
            trials,
            seed,
            cond,
            grad_tol,
            max_iters,
            format,
            out,
            workers,
        } => {
            let config = ExperimentConfig {
                state_dim,
                obs_dim,
                trials,
                master_seed: seed,
                cond_target: cond,
                grad_tol,
                max_iters,
                output_format: match format {
                    Format::Json => OutputFormat::Json,
                    Format::Csv => OutputFormat::Csv,
                },
                output_path: if out == "-" {
                    OutputTarget::Stdout
                } else {
                    OutputTarget::File(PathBuf::from(out))
                },
            };
            run(&config, workers)
        }
        Command::Check {
            seed,
            state_dim,
            obs_dim,
            cond,
            grad_tol,
            max_iters,
        } => check(seed, state_dim, obs_dim, cond, grad_tol, max_iters),
        Command::Gradcheck {
            instances,
            max_dim,
            seed,
            cond,
        } => gradcheck(instances, max_dim, seed, cond),
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

fn run(config: &ExperimentConfig, workers: Option<usize>) -> Result<bool, GainError> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        if w == 0 {
            return Err(GainError::InvalidParameter("workers must be at least 1".into()));
        }
        pool = pool.num_threads(w);
    }
    let pool = pool
        .build()
        .map_err(|e| GainError::InvalidParameter(format!("thread pool: {e}")))?;
    let report = pool.install(|| run_experiment(config))?;
    emit_report(&report, config.output_format, &config.output_path)?;
    Ok(report.all_passed())
}

fn print_matrix(label: &str, m: &Matrix) {
    println!("{label}:");
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols())
            .map(|j| format!("{:>14.6e}", m.get(i, j)))
            .collect();
        println!("  [{}]", row.join(" "));
    }
}

fn check(
    seed: u64,
    state_dim: usize,
    obs_dim: usize,
    cond: f64,
    grad_tol: f64,
    max_iters: usize,
) -> Result<bool, GainError> {
    let p = generate_problem(state_dim, obs_dim, seed, cond)?;
    let config = OptimizerConfig {
        grad_tol,
        max_iters,
        ..Default::default()
    };
    let eq = cross_objective_equivalence(&p, &config)?;
    println!("problem: seed={seed} state_dim={state_dim} obs_dim={obs_dim} cond={cond}");
    print_matrix("analytic gain", eq.analytic_gain.matrix());

    let mut ok = true;
    for kind in ObjectiveKind::ALL {
        let run = eq.run(kind);
        let dist = eq.distance_to_analytic(kind);
        ok &= dist <= GAIN_DISTANCE_THRESHOLD;
        println!();
        print_matrix(&format!("optimized gain ({})", kind.name()), run.final_gain.matrix());
        println!(
            "  iterations={} converged={} grad_norm={:e} objective={:e} distance_to_analytic={:e}",
            run.iterations,
            run.converged,
            run.final_gradient_norm(),
            run.final_objective,
            dist
        );
    }

    println!();
    println!("gradient check at K = 0:");
    let zero = GainMatrix::zeros(state_dim, obs_dim);
    for kind in ObjectiveKind::ALL {
        let analytic = gradient(kind, &p, &zero)?;
        let fd = finite_difference_gradient(&p, &zero, kind)?;
        let rel = analytic.matrix().sub(fd.matrix())?.frobenius_norm()
            / (1.0 + analytic.frobenius_norm());
        ok &= rel <= GRADIENT_CHECK_THRESHOLD;
        println!("  {:<8} relative_error={rel:e}", kind.name());
    }

    let k_star = analytic_gain(&p)?;
    let residual = stationarity_residual(&p, &k_star)?;
    let scale = 1.0 + p.cross_covariance().frobenius_norm();
    ok &= residual <= STATIONARITY_THRESHOLD * scale;
    println!();
    println!("stationarity residual at analytic gain: {residual:e} (scale {scale:e})");
    println!("pairwise gain distances: trace-logdet={:e} trace-entropy={:e} logdet-entropy={:e}",
        eq.distance_trace_logdet, eq.distance_trace_entropy, eq.distance_logdet_entropy);
    println!("result: {}", if ok { "PASS" } else { "FAIL" });
    Ok(ok)
}

fn gradcheck(instances: usize, max_dim: usize, seed: u64, cond: f64) -> Result<bool, GainError> {
    if instances == 0 {
        return Err(GainError::InvalidParameter("instances must be at least 1".into()));
    }
    let records = gradient_check_suite(instances, max_dim, seed, cond)?;
    let mut worst = 0.0f64;
    let mut failures = 0;
    for r in &records {
        let pass = r.relative_error <= GRADIENT_CHECK_THRESHOLD;
        failures += usize::from(!pass);
        worst = worst.max(r.relative_error);
        println!(
            "instance {:>4} n={} m={} grad_norm={:e} relative_error={:e} {}",
            r.instance,
            r.state_dim,
            r.obs_dim,
            r.gradient_norm,
            r.relative_error,
            if pass { "ok" } else { "FAIL" }
        );
    }
    println!(
        "gradcheck: {} instances, {} failures, max relative error {:e} (threshold {:e})",
        records.len(),
        failures,
        worst,
        GRADIENT_CHECK_THRESHOLD
    );
    Ok(failures == 0)
}
