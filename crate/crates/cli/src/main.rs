use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use latticeloss::experiment::{self, SweepConfig, VerifyConfig, DEFAULT_LAMBDAS};
use latticeloss::latency::{self, EndWordPolicy};
use latticeloss::toy::{self, Method, TrainConfig};
use latticeloss::{par, PenaltyConfig, PenaltySide};

/// Default multiplier from the speech-scale lambda grid to the toy task.
const DEFAULT_LAMBDA_SCALE: f64 = 20.0;

#[derive(Parser)]
#[command(
    name = "latticeloss",
    version,
    about = "Transducer loss with delay penalization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the dynamic-programming loss against the path-enumeration oracle.
    Verify {
        #[arg(long, default_value_t = 200)]
        corpus: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Offset added to the computed loss and gradients; any non-zero
        /// value should make the run fail.
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        perturb: f64,
    },
    /// Penalized-lattice statistics over a lambda grid on random lattices.
    Sweep {
        /// Comma-separated, ascending.
        #[arg(long, value_delimiter = ',', default_values_t = default_sweep_lambdas())]
        lambdas: Vec<f64>,
        /// Lattice size as TxUxV.
        #[arg(long, default_value = "8x3x6", value_parser = parse_dims)]
        dims: (usize, usize, usize),
        #[arg(long, default_value_t = 8)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy streaming model and log per-epoch held-out delay.
    TrainToy {
        /// Delay-penalty lambdas on the speech-scale grid (comma-separated); a
        /// lambda = 0 baseline is always included.
        #[arg(long = "lambda", value_delimiter = ',', default_values_t = DEFAULT_LAMBDAS.to_vec())]
        lambdas: Vec<f64>,
        /// Multiplier applied to every delay-penalty lambda before training.
        #[arg(long, default_value_t = DEFAULT_LAMBDA_SCALE)]
        lambda_scale: f64,
        /// Also train with FastEmit at this lambda (not rescaled).
        #[arg(long)]
        fastemit: Option<f64>,
        #[arg(long, value_enum, default_value_t = Side::Nonblank)]
        side: Side,
        #[arg(long)]
        epochs: Option<usize>,
        /// Number of seeds; runs use seeds `seed..seed + k`.
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Word-level MAD and MED between timestamped hypothesis and reference files.
    Latency {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Include every utterance in MED, not only those whose last words match.
        #[arg(long)]
        med_all: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Side {
    Nonblank,
    Blank,
}

fn default_sweep_lambdas() -> Vec<f64> {
    SweepConfig::default().lambdas
}

fn parse_dims(s: &str) -> std::result::Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 3 {
        return Err(format!("expected TxUxV, got {s:?}"));
    }
    let mut nums = [0usize; 3];
    for (n, p) in nums.iter_mut().zip(&parts) {
        *n = p
            .trim()
            .parse()
            .map_err(|_| format!("bad dimension {p:?} in {s:?}"))?;
    }
    Ok((nums[0], nums[1], nums[2]))
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Verify {
            corpus,
            seed,
            perturb,
        } => {
            let cfg = VerifyConfig {
                seed,
                corpus,
                perturb,
                ..Default::default()
            };
            let report = experiment::verify(&cfg)?;
            print!("{report}");
            if report.passed() {
                println!("all checks passed");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("verification failed");
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Sweep {
            lambdas,
            dims: (frames, tokens, vocab),
            trials,
            seed,
            out,
        } => {
            let cfg = SweepConfig {
                lambdas,
                seed,
                trials,
                frames,
                tokens,
                vocab,
            };
            let rows = experiment::sweep(&cfg)?;
            write_out(&out, &experiment::sweep_csv(&rows))?;
            println!("wrote {} rows to {}", rows.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::TrainToy {
            lambdas,
            lambda_scale,
            fastemit,
            side,
            epochs,
            seeds,
            seed,
            out,
        } => {
            if !lambda_scale.is_finite() || lambda_scale < 0.0 {
                bail!("--lambda-scale must be finite and >= 0");
            }
            if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
                bail!("lambdas must be finite and >= 0");
            }
            let side = match side {
                Side::Nonblank => PenaltySide::NonBlank,
                Side::Blank => PenaltySide::Blank,
            };
            let mut scaled: Vec<f64> = lambdas.iter().map(|l| l * lambda_scale).collect();
            scaled.push(0.0);
            scaled.sort_by(f64::total_cmp);
            scaled.dedup();
            let mut methods: Vec<Method> = scaled
                .iter()
                .map(|&l| Method::DelayPenalty(PenaltyConfig::new(l).with_side(side)))
                .collect();
            if let Some(fe) = fastemit {
                if !fe.is_finite() || fe < 0.0 {
                    bail!("--fastemit must be finite and >= 0");
                }
                methods.push(Method::FastEmit(fe));
            }
            let mut cfg = TrainConfig::default();
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(k) = seeds {
                cfg.seeds = (seed..seed + k).collect();
            } else {
                let k = cfg.seeds.len() as u64;
                cfg.seeds = (seed..seed + k).collect();
            }
            let runs = toy::train_all(&cfg, &methods)?;
            write_out(&out, &toy::train_csv(&runs))?;
            print!("{}", toy::summary(&runs, &methods));
            Ok(ExitCode::SUCCESS)
        }
        Command::Latency {
            hyp,
            reference,
            med_all,
        } => {
            let read = |p: &Path| -> Result<_> {
                let text =
                    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                latency::parse_timestamps(&text).with_context(|| format!("parsing {}", p.display()))
            };
            let pairs = latency::pair_by_id(read(&hyp)?, read(&reference)?);
            let utts: Vec<_> = pairs.into_iter().map(|(_, p)| p).collect();
            let policy = if med_all {
                EndWordPolicy::All
            } else {
                EndWordPolicy::MatchedOnly
            };
            let report = latency::latency_report(&utts, policy)?;
            println!("utterances: {}", utts.len());
            println!("matched words: {}", report.matched_pairs);
            println!("MAD: {:.3} ms", report.mad * 1000.0);
            println!(
                "MED: {:.3} ms over {} utterances",
                report.med * 1000.0,
                report.med_utterances
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match par::with_threads(par::threads_from_env(), || run(cli.command)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
