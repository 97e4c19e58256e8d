use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use dpulr::accountant::{best_epsilon_on_grid, default_alpha_grid, Mechanism, RatioGrid, SrgmParams};
use dpulr::error::Result;
use dpulr::harness::{emit_metrics, train, verify_gradient, RunConfig};
use dpulr::par::with_thread_cap;

#[derive(Parser)]
#[command(name = "dpulr", version, about = "Private forward-noise training and privacy accounting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON config; writes metrics.csv, params.bin and run.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Best (ε, α) after a number of steps, as JSON.
    Epsilon {
        #[arg(long)]
        q: f64,
        #[arg(long)]
        sigma0: f64,
        #[arg(long)]
        nb: u64,
        #[arg(long)]
        nbar: u64,
        #[arg(long)]
        steps: u64,
        #[arg(long)]
        delta: f64,
        /// Only use orders where the bound is proven.
        #[arg(long)]
        strict: bool,
        /// Price plain subsampling instead (drops the rejection term).
        #[arg(long)]
        sgm: bool,
    },
    /// Rejection-term to Gaussian-term ratio over an (N̄, N_B) grid, as CSV.
    BoundRatio {
        #[arg(long, default_value_t = 0.01)]
        q: f64,
        #[arg(long, default_value_t = 4.0)]
        sigma0: f64,
        #[arg(long, default_value_t = 1.1)]
        alpha: f64,
        #[arg(long, default_value_t = 1000)]
        nbar_min: u64,
        #[arg(long, default_value_t = 100_000)]
        nbar_max: u64,
        #[arg(long, default_value_t = 21)]
        nbar_points: usize,
        /// Smallest N_B as a fraction of qN̄.
        #[arg(long, default_value_t = 0.5)]
        frac_min: f64,
        #[arg(long, default_value_t = 0.95)]
        frac_max: f64,
        #[arg(long, default_value_t = 10)]
        frac_points: usize,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte-Carlo moment checks of the gradient proxy, as JSON.
    VerifyGradient {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-2)]
        sigma: f64,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
    },
}

#[derive(Serialize)]
struct RunSummary<'a> {
    algorithm: dpulr::harness::Algorithm,
    steps: usize,
    steps_per_epoch: usize,
    epochs: usize,
    train_size: usize,
    valid_size: usize,
    final_epsilon: f64,
    final_alpha: f64,
    delta: f64,
    regime_valid: bool,
    total_rejections: u64,
    config: &'a RunConfig,
}

fn run_train(config: PathBuf, out: PathBuf) -> Result<()> {
    let cfg = RunConfig::from_file(&config)?;
    let (train_set, valid_set) = cfg.load_data()?;
    log::info!(
        "{} training and {} validation examples, {} steps",
        train_set.len(),
        valid_set.len(),
        cfg.total_steps()
    );
    let outcome = train(&cfg, &train_set, &valid_set)?;
    std::fs::create_dir_all(&out)?;
    emit_metrics(&outcome.rows(), &out.join("metrics.csv"))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(out.join("params.bin"))?);
    outcome.params.write_to(&mut f)?;
    f.flush()?;
    let last = outcome.records.last();
    let summary = RunSummary {
        algorithm: cfg.algorithm,
        steps: outcome.records.len(),
        steps_per_epoch: cfg.steps_per_epoch(),
        epochs: cfg.epochs,
        train_size: train_set.len(),
        valid_size: valid_set.len(),
        final_epsilon: last.map_or(0.0, |r| r.row.epsilon),
        final_alpha: last.map_or(f64::NAN, |r| r.row.alpha_star),
        delta: cfg.privacy.delta,
        regime_valid: last.is_some_and(|r| r.regime_valid),
        total_rejections: outcome.records.iter().map(|r| r.rejections).sum(),
        config: &cfg,
    };
    std::fs::write(out.join("run.json"), serde_json::to_string_pretty(&summary)?)?;
    if let Some(r) = last {
        println!(
            "steps {} valid_acc {} epsilon {:.4} (alpha {})",
            summary.steps,
            r.row.valid_acc.map_or("-".into(), |a| format!("{a:.4}")),
            r.row.epsilon,
            r.row.alpha_star
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out } => run_train(config, out),
        Command::Epsilon {
            q,
            sigma0,
            nb,
            nbar,
            steps,
            delta,
            strict,
            sgm,
        } => {
            let p = SrgmParams::new(q, sigma0, nb, nbar)?;
            let mechanism = if sgm { Mechanism::Sgm } else { Mechanism::Srgm };
            let report = best_epsilon_on_grid(mechanism, &p, steps, delta, strict, &default_alpha_grid())?;
            println!("{}", serde_json::to_string(&report)?);
            Ok(())
        }
        Command::BoundRatio {
            q,
            sigma0,
            alpha,
            nbar_min,
            nbar_max,
            nbar_points,
            frac_min,
            frac_max,
            frac_points,
            out,
        } => {
            let grid = RatioGrid {
                q,
                sigma0,
                alpha,
                n_bar_min: nbar_min,
                n_bar_max: nbar_max,
                n_bar_points: nbar_points,
                frac_min,
                frac_max,
                frac_points,
            };
            let mut text = String::from("nbar,nb,ratio\n");
            for p in grid.evaluate()? {
                text.push_str(&format!("{},{},{:e}\n", p.n_bar, p.n_b, p.ratio));
            }
            match out {
                Some(path) => std::fs::write(path, text)?,
                None => std::io::stdout().write_all(text.as_bytes())?,
            }
            Ok(())
        }
        Command::VerifyGradient { seed, sigma, samples } => {
            let report = verify_gradient(seed, sigma, samples)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match with_thread_cap(|| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
