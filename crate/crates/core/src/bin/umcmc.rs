//! Command-line front end: `run`, `certify`, `meeting-times`, `fit-cv`.
//!
//! Exit codes are part of the contract: 0 success, 1 usage or config error,
//! 2 certification failure, 3 runtime failure (non-meeting chains, IO).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use unbiased_mcmc::bound::fit_geometric_tail;
use unbiased_mcmc::config::{parse_config, ExperimentConfig};
use unbiased_mcmc::harness::{
    run_certification, run_experiment, run_fit_cv, run_meeting_times, HarnessError,
};
use unbiased_mcmc::output::{
    write_certification, write_cv_fits, write_meeting_times, write_run_report,
};

const EXIT_OK: u8 = 0;
const EXIT_USAGE: u8 = 1;
const EXIT_CERTIFICATION_FAILED: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(
    name = "umcmc",
    version,
    about = "Unbiased MCMC with coupled chains: estimation, control variates, certified variance bounds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the replicate/fit/estimate protocol and write CSV outputs.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override run.root_seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override run.workers.
        #[arg(long)]
        workers: Option<usize>,
        /// Override run.out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check every premise and conclusion of the variance bound on a finite
    /// chain with exact constants; exits 2 if any check fails.
    Certify {
        #[arg(long)]
        config: PathBuf,
    },
    /// Simulate meeting times and fit the geometric tail envelope.
    MeetingTimes {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fit control variates on the fitting half and print θ, skipping
    /// estimation.
    FitCv {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    let code = match cli.command {
        Command::Run { config, seed, workers, out } => cmd_run(&config, seed, workers, out),
        Command::Certify { config } => cmd_certify(&config),
        Command::MeetingTimes { config } => cmd_meeting_times(&config),
        Command::FitCv { config } => cmd_fit_cv(&config),
    };
    ExitCode::from(code)
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig, u8> {
    parse_config(path).map_err(|err| {
        eprintln!("error: {err}");
        EXIT_USAGE
    })
}

fn harness_exit(err: &HarnessError) -> u8 {
    match err {
        HarnessError::Usage(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn cmd_run(
    config: &PathBuf,
    seed: Option<u64>,
    workers: Option<usize>,
    out: Option<PathBuf>,
) -> u8 {
    let mut cfg = match load_config(config) {
        Ok(cfg) => cfg,
        Err(code) => return code,
    };
    if let Some(seed) = seed {
        cfg.run.root_seed = seed;
    }
    if let Some(workers) = workers {
        if workers == 0 {
            eprintln!("error: --workers must be at least 1");
            return EXIT_USAGE;
        }
        cfg.run.workers = workers;
    }
    if let Some(out) = out {
        cfg.run.out_dir = out;
    }
    let report = match run_experiment(&cfg) {
        Ok(report) => report,
        Err(err) => {
            if let HarnessError::NotMet { partial, .. } = &err {
                // Flush what we have so the failure is diagnosable.
                let path = cfg.run.out_dir.join("meeting_times.csv");
                match write_meeting_times(partial, &path) {
                    Ok(()) => eprintln!("partial meeting times written to {}", path.display()),
                    Err(io) => eprintln!("could not flush partial meeting times: {io}"),
                }
            }
            eprintln!("error: {err}");
            return harness_exit(&err);
        }
    };
    match write_run_report(&report, &cfg.run.out_dir) {
        Ok(paths) => {
            for path in &paths {
                log::info!("wrote {}", path.display());
            }
        }
        Err(err) => {
            eprintln!("error: {err}");
            return EXIT_RUNTIME;
        }
    }
    println!("coordinate  strategy      mean            variance        vr");
    for s in &report.summaries {
        println!(
            "{:<11} {:<13} {:<15.8} {:<15.8e} {:.3e}",
            s.coordinate, s.strategy, s.mean, s.variance, s.vr_factor
        );
    }
    if let Some((lo, med, hi)) = report.tau_summary() {
        println!("meeting times: min {lo}, median {med}, max {hi}");
    }
    println!(
        "{} replicates ({} fitted on, {} estimated from) in {:.2?}",
        report.meeting_times.len(),
        report.fitting_replicates.len(),
        report.estimation_replicates.len(),
        report.wall_clock
    );
    EXIT_OK
}

fn cmd_certify(config: &PathBuf) -> u8 {
    let cfg = match load_config(config) {
        Ok(cfg) => cfg,
        Err(code) => return code,
    };
    let outcome = match run_certification(&cfg) {
        Ok(outcome) => outcome,
        Err(err) => {
            eprintln!("error: {err}");
            return harness_exit(&err);
        }
    };
    let path = cfg.run.out_dir.join("certification.csv");
    if let Err(err) = write_certification(&outcome.report, &path) {
        eprintln!("error: {err}");
        return EXIT_RUNTIME;
    }
    log::info!("wrote {}", path.display());
    let mut certified = 0usize;
    let mut inconclusive = 0usize;
    let mut failed = Vec::new();
    for row in &outcome.report.rows {
        match row.status {
            unbiased_mcmc::bound::CheckStatus::Certified => certified += 1,
            unbiased_mcmc::bound::CheckStatus::Inconclusive => inconclusive += 1,
            unbiased_mcmc::bound::CheckStatus::Failed => {
                failed.push(format!("{} [{}]", row.check, row.index))
            }
        }
    }
    println!(
        "checks: {certified} certified, {inconclusive} inconclusive, {} failed",
        failed.len()
    );
    println!(
        "sigma_hat = {:.6}, bound rhs = {:.6}, margin = {:.6}",
        outcome.sigma_hat,
        outcome.rhs,
        outcome.rhs - outcome.sigma_hat
    );
    if !failed.is_empty() {
        for name in &failed {
            eprintln!("FAILED: {name}");
        }
        return EXIT_CERTIFICATION_FAILED;
    }
    EXIT_OK
}

fn cmd_meeting_times(config: &PathBuf) -> u8 {
    let cfg = match load_config(config) {
        Ok(cfg) => cfg,
        Err(code) => return code,
    };
    let pairs = match run_meeting_times(&cfg) {
        Ok(pairs) => pairs,
        Err(err) => {
            if let HarnessError::NotMet { partial, .. } = &err {
                let path = cfg.run.out_dir.join("meeting_times.csv");
                if write_meeting_times(partial, &path).is_ok() {
                    eprintln!("partial meeting times written to {}", path.display());
                }
            }
            eprintln!("error: {err}");
            return harness_exit(&err);
        }
    };
    let path = cfg.run.out_dir.join("meeting_times.csv");
    if let Err(err) = write_meeting_times(&pairs, &path) {
        eprintln!("error: {err}");
        return EXIT_RUNTIME;
    }
    log::info!("wrote {}", path.display());
    let taus: Vec<usize> = pairs.iter().map(|&(_, tau)| tau).collect();
    match fit_geometric_tail(&taus) {
        Ok(fit) => {
            println!(
                "tail envelope: P(tau > t) <= C * delta^t with C = {:.6}, delta = {:.6}{}",
                fit.tail_c,
                fit.tail_delta,
                if fit.degenerate { " (all replicates met at t = 1)" } else { "" }
            );
            EXIT_OK
        }
        Err(err) => {
            eprintln!("error: {err}");
            EXIT_RUNTIME
        }
    }
}

fn cmd_fit_cv(config: &PathBuf) -> u8 {
    let cfg = match load_config(config) {
        Ok(cfg) => cfg,
        Err(code) => return code,
    };
    let fits = match run_fit_cv(&cfg) {
        Ok(fits) => fits,
        Err(err) => {
            eprintln!("error: {err}");
            return harness_exit(&err);
        }
    };
    let rows: Vec<unbiased_mcmc::harness::CvFitRow> = fits
        .iter()
        .map(|fit| unbiased_mcmc::harness::CvFitRow {
            coordinate: fit.coordinate,
            approach: match fit.approach {
                unbiased_mcmc::cv::CvApproach::Empirical => "cv-empirical",
                unbiased_mcmc::cv::CvApproach::Bound => "cv-bound",
            },
            objective_before: fit.report.objective_before,
            objective_after: fit.report.objective_after,
            theta_norm: fit.report.theta.norm(),
        })
        .collect();
    let path = cfg.run.out_dir.join("cvfit.csv");
    if let Err(err) = write_cv_fits(&rows, &path) {
        eprintln!("error: {err}");
        return EXIT_RUNTIME;
    }
    log::info!("wrote {}", path.display());
    for fit in &fits {
        println!(
            "coordinate {} ({}): objective {:.6e} -> {:.6e} via {}",
            fit.coordinate,
            fit.approach,
            fit.report.objective_before,
            fit.report.objective_after,
            fit.report.solver_info
        );
        println!("  theta = {:?}", fit.report.theta.theta());
    }
    EXIT_OK
}
