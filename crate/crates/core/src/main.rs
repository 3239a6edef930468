use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use pcsgm::ensemble::ParticleEnsemble;
use pcsgm::runner::{self, SamplerConfig};
use pcsgm::transport::{self, DEFAULT_SINKHORN_ITERS};

#[derive(Parser)]
#[command(name = "pcsgm", version, about = "Predictor-corrector score-based sampler")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as CSV.
    Dataset {
        /// gauss2-asym, two-moons or swiss-roll-rescaled
        name: String,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the sampler over the config's T2 grid and write results JSON.
    #[command(alias = "sweep")]
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output.results` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a results file against its bounds; exits nonzero on a violation.
    Bounds {
        #[arg(long)]
        results: PathBuf,
    },
    /// W2 distance between two CSV point clouds.
    W2 {
        a: PathBuf,
        b: PathBuf,
        /// Use debiased Sinkhorn with this regularization instead of exact matching.
        #[arg(long)]
        sinkhorn: Option<f64>,
        #[arg(long, default_value_t = DEFAULT_SINKHORN_ITERS)]
        max_iters: usize,
    },
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> anyhow::Result<ExitCode> {
    match Cli::parse().command {
        Command::Dataset {
            name,
            n,
            noise,
            seed,
            out,
        } => {
            let ds = runner::generate_dataset(&name, n, noise, seed)?;
            ds.write_csv(&out)?;
            println!("wrote {} points to {}", ds.len(), out.display());
        }
        Command::Run { config, out } => {
            let cfg = SamplerConfig::from_file(&config)?;
            let path = out
                .or_else(|| cfg.output.results.clone())
                .unwrap_or_else(|| config.with_extension("json"));
            let res = runner::run_to(&cfg, Some(&path))?;
            println!("{:>8} {:>14} {:>14} {:>12} {:>12}", "t2", "w2_corrector", "w2_final", "floor_t1", "floor_p");
            let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
            for e in &res.entries {
                print!(
                    "{:>8} {:>14} {:>14} {:>12} {:>12}",
                    e.t2,
                    fmt(e.w2_corrector),
                    fmt(e.w2_final),
                    fmt(e.w2_corrector_floor),
                    fmt(e.w2_final_floor)
                );
                match &e.error {
                    Some(err) => println!("  error: {err}"),
                    None => println!(),
                }
            }
            println!("results written to {} ({:.1} s)", path.display(), res.timing.total_s);
        }
        Command::Bounds { results } => {
            let report = runner::verify_bounds(&results)?;
            print!("{}", report.table());
            println!(
                "{} satisfied, {} violated, {} gated",
                report.satisfied(),
                report.violations(),
                report.rows.len() - report.satisfied() - report.violations()
            );
            if !report.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::W2 {
            a,
            b,
            sinkhorn,
            max_iters,
        } => {
            let ea = ParticleEnsemble::read_csv(&a).with_context(|| format!("reading {}", a.display()))?;
            let eb = ParticleEnsemble::read_csv(&b).with_context(|| format!("reading {}", b.display()))?;
            match sinkhorn {
                None => println!("{}", transport::w2_exact(&ea, &eb)?),
                Some(eps) => {
                    let r = transport::w2_sinkhorn(&ea, &eb, eps, max_iters)?;
                    println!("{}", r.value);
                    if !r.converged {
                        eprintln!(
                            "warning: Sinkhorn stopped after {} iterations (marginal error {:e})",
                            r.iterations, r.marginal_error
                        );
                    }
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
