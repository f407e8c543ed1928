//! Validation corpus and lambda sweeps on synthetic lattices.

use std::fmt;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::lattice::Lattice;
use crate::loss::{forward, loss_and_grad, viterbi};
use crate::oracle::{self, path_count, DEFAULT_BUDGET};
use crate::par;
use crate::penalty::{
    apply_penalty, delay_score, fastemit_loss_and_grad, path_score, penalized_loss_and_grad,
    PenaltyConfig,
};
use crate::synth;

/// Per-frame lambda grid for speech-scale transducer training (10 ms to
/// 40 ms encoder frames).
pub const DEFAULT_LAMBDAS: [f64; 5] = [0.0015, 0.0030, 0.0060, 0.0075, 0.0100];

/// Grid for the monotone-delay check: zero, the experiment grid, and two
/// larger values.
pub const MONOTONE_LAMBDAS: [f64; 8] = [0.0, 0.0015, 0.0030, 0.0060, 0.0075, 0.0100, 0.05, 0.1];

pub const SWEEP_HEADER: &str = "# latticeloss-sweep v1";

pub mod tol {
    pub const LOSS: f64 = 1e-10;
    pub const GRAD: f64 = 1e-9;
    pub const FD_STEP: f64 = 1e-5;
    pub const FD_REL: f64 = 1e-6;
    pub const PENALIZED_WEIGHTS: f64 = 1e-12;
    pub const MONOTONE_SLACK: f64 = 1e-12;
    pub const CENTER_GRAD: f64 = 1e-10;
    pub const CENTER_LOSS: f64 = 1e-12;
    pub const HALVING_RANGE: (f64, f64) = (3.5, 4.5);
    /// Lambdas at which the exact and softmax forms of the augmented
    /// gradient are compared.
    pub const AUGMENTED_LAMBDAS: [f64; 2] = [1e-3, 1e-2];
}

/// Central-difference error measure: `|fd - analytic| / max(|analytic|, floor)`.
pub const FD_REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct VerifyConfig {
    pub seed: u64,
    pub corpus: usize,
    /// Added to the dynamic-programming loss and gradients before they are
    /// compared. Non-zero values must make the run fail.
    pub perturb: f64,
    pub max_frames: usize,
    pub max_tokens: usize,
    /// Lattices (from the start of the corpus) that get finite-difference probes.
    pub fd_lattices: usize,
    pub fd_probes: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: 200,
            perturb: 0.0,
            max_frames: 6,
            max_tokens: 4,
            fd_lattices: 20,
            fd_probes: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    /// Observed worst value (error, ratio, or violation count).
    pub observed: f64,
    pub limit: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub corpus: usize,
    pub checks: Vec<CheckOutcome>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckOutcome> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "corpus: {} lattices", self.corpus)?;
        for c in &self.checks {
            writeln!(
                f,
                "{} {:<28} observed {:.3e}  limit {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.observed,
                c.limit
            )?;
        }
        Ok(())
    }
}

/// The random validation corpus: lattice `i` comes from stream `i` of
/// `seed`, with `T` in `1..=max_frames`, `U` in `0..=max_tokens` and
/// entries uniform in `[-5, 0)`.
pub fn corpus_lattice(seed: u64, index: usize, max_frames: usize, max_tokens: usize) -> Lattice {
    use rand::Rng;
    let mut rng = synth::rng(seed, index as u64);
    let frames = rng.gen_range(1..=max_frames);
    let tokens = rng.gen_range(0..=max_tokens);
    synth::random_lattice(&mut rng, frames, tokens, -5.0, 0.0)
}

#[derive(Debug, Default, Clone)]
struct LatticeErrors {
    loss: f64,
    grad: f64,
    fd: f64,
    penalized_weights: f64,
    penalized_occupation: f64,
    augmented_bound_violation: f64,
    /// max gap at each of lambda and lambda/2, per augmented lambda
    gaps: Vec<(f64, f64)>,
    monotone_violations: usize,
    center_grad: f64,
    center_loss: f64,
    fastemit_ratio: f64,
}

fn fd_probe_errors(lat: &Lattice, seed: u64, index: usize, probes: usize, perturb: f64) -> f64 {
    use rand::Rng;
    let analytic = loss_and_grad(lat);
    let mut rng = synth::rng(seed ^ 0x5fd_0001, index as u64);
    let frames = lat.num_frames();
    let tokens = lat.num_tokens();
    let h = tol::FD_STEP;
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let t = rng.gen_range(0..frames);
        let on_y = tokens > 0 && rng.gen_bool(0.5);
        let u = if on_y {
            rng.gen_range(0..tokens)
        } else {
            rng.gen_range(0..=tokens)
        };
        let eval = |delta: f64| {
            let mut l = lat.clone();
            let g = if on_y {
                l.y_grid_mut()
            } else {
                l.blank_grid_mut()
            };
            *g.get_mut(t, u) += delta;
            -forward(&l).1
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let an = if on_y {
            analytic.grad_y.get(t, u)
        } else {
            analytic.grad_blank.get(t, u)
        } + perturb;
        worst = worst.max((fd - an).abs() / an.abs().max(FD_REL_FLOOR));
    }
    worst
}

fn check_lattice(lat: &Lattice, index: usize, cfg: &VerifyConfig) -> Result<LatticeErrors> {
    let mut e = LatticeErrors::default();
    let eps = cfg.perturb;
    let frames = lat.num_frames();
    let tokens = lat.num_tokens();

    let total = forward(lat).1 + eps;
    e.loss = (total - oracle::oracle_loss(lat)?).abs();

    let dp = loss_and_grad(lat);
    let (oy, ob) = oracle::oracle_grad(lat)?;
    e.grad = dp
        .grad_y
        .map(|g| g + eps)
        .max_abs_diff(&oy)
        .max(dp.grad_blank.map(|g| g + eps).max_abs_diff(&ob));

    if index < cfg.fd_lattices {
        e.fd = fd_probe_errors(lat, cfg.seed, index, cfg.fd_probes, eps);
    }

    for &lambda in &tol::AUGMENTED_LAMBDAS {
        let obj = oracle::oracle_delay_regularized_objective(lat, lambda)?;
        let penalized = apply_penalty(lat, &PenaltyConfig::new(lambda));
        let pw = oracle::oracle_weights_and_davg(&penalized)?;
        let weight_err = pw
            .weights
            .iter()
            .zip(&obj.approx_grads)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        e.penalized_weights = e.penalized_weights.max(weight_err);

        // the production path's occupations must equal the tilted weights
        let pr = penalized_loss_and_grad(lat, &PenaltyConfig::new(lambda));
        let occ = occupation_from_weights(lat, &obj.approx_grads)?;
        let occ_err = pr
            .grad_y
            .map(|g| g + eps)
            .max_abs_diff(&occ.0)
            .max(pr.grad_blank.map(|g| g + eps).max_abs_diff(&occ.1));
        e.penalized_occupation = e.penalized_occupation.max(occ_err);

        let spread = obj
            .delay_scores
            .iter()
            .map(|d| (d - obj.d_avg).abs())
            .fold(0.0, f64::max);
        let gap = max_gap(&obj.exact_grads, &obj.approx_grads);
        let bound = 2.0 * lambda * lambda * spread * spread;
        e.augmented_bound_violation = e.augmented_bound_violation.max(gap - bound);
        let half = oracle::oracle_delay_regularized_objective(lat, lambda / 2.0)?;
        e.gaps
            .push((gap, max_gap(&half.exact_grads, &half.approx_grads)));
    }

    let mut prev = f64::NEG_INFINITY;
    for &lambda in &MONOTONE_LAMBDAS {
        let d = oracle::oracle_weights_and_davg(&apply_penalty(lat, &PenaltyConfig::new(lambda)))?;
        if d.d_avg < prev - tol::MONOTONE_SLACK {
            e.monotone_violations += 1;
        }
        prev = d.d_avg;
    }

    let lambda = 0.01;
    let c = penalized_loss_and_grad(lat, &PenaltyConfig::new(lambda));
    let n = penalized_loss_and_grad(lat, &PenaltyConfig::new(lambda).with_centered(false));
    e.center_grad = c
        .grad_y
        .max_abs_diff(&n.grad_y)
        .max(c.grad_blank.max_abs_diff(&n.grad_blank));
    let expected = lambda * tokens as f64 * (frames as f64 - 1.0) / 2.0;
    e.center_loss = ((n.loss - c.loss) - expected).abs();

    let fe = fastemit_loss_and_grad(lat, 0.25);
    e.fastemit_ratio = fe
        .grad_y
        .as_slice()
        .iter()
        .zip(dp.grad_y.as_slice())
        .filter(|(_, &p)| p != 0.0)
        .map(|(&f, &p)| (f / p - 1.25).abs())
        .fold(0.0, f64::max);
    Ok(e)
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Negated per-transition sums of the given path weights (enumeration order).
fn occupation_from_weights(lat: &Lattice, weights: &[f64]) -> Result<(crate::Grid, crate::Grid)> {
    let frames = lat.num_frames();
    let tokens = lat.num_tokens();
    let en = oracle::enumerate_paths(frames, tokens)?;
    let mut gy = crate::Grid::filled(frames, tokens, 0.0);
    let mut gb = crate::Grid::filled(frames, tokens + 1, 0.0);
    for (p, &w) in en.paths.iter().zip(weights) {
        let mut u = 0;
        for t in 0..frames {
            while u < tokens && p.frames[u] == t {
                *gy.get_mut(t, u) -= w;
                u += 1;
            }
            *gb.get_mut(t, u) -= w;
        }
    }
    Ok((gy, gb))
}

/// Runs the full oracle-versus-DP validation over a seeded corpus.
pub fn verify(cfg: &VerifyConfig) -> Result<VerifyReport> {
    if cfg.corpus == 0 {
        return Err(Error::NoData("verification corpus is empty".into()));
    }
    let per_lattice = par::map_range(cfg.corpus, |i| {
        let lat = corpus_lattice(cfg.seed, i, cfg.max_frames, cfg.max_tokens);
        check_lattice(&lat, i, cfg)
    });
    let errs = per_lattice.into_iter().collect::<Result<Vec<_>>>()?;

    let worst = |f: fn(&LatticeErrors) -> f64| errs.iter().map(f).fold(0.0, f64::max);
    let mut checks = Vec::new();
    let mut push = |name, observed: f64, limit: f64| {
        checks.push(CheckOutcome {
            name,
            observed,
            limit: if limit == 0.0 {
                "= 0".to_string()
            } else {
                format!("<= {limit:e}")
            },
            passed: observed <= limit,
        });
    };
    push("loss_vs_oracle", worst(|e| e.loss), tol::LOSS);
    push("grad_vs_oracle", worst(|e| e.grad), tol::GRAD);
    push("grad_vs_finite_difference", worst(|e| e.fd), tol::FD_REL);
    push(
        "penalized_weights_exact",
        worst(|e| e.penalized_weights),
        tol::PENALIZED_WEIGHTS,
    );
    push(
        "penalized_occupation",
        worst(|e| e.penalized_occupation),
        tol::GRAD,
    );
    push(
        "augmented_gap_bound",
        worst(|e| e.augmented_bound_violation),
        0.0,
    );
    push("centering_grad", worst(|e| e.center_grad), tol::CENTER_GRAD);
    push("centering_loss", worst(|e| e.center_loss), tol::CENTER_LOSS);
    push("fastemit_scale", worst(|e| e.fastemit_ratio), 1e-12);
    let violations: usize = errs.iter().map(|e| e.monotone_violations).sum();
    push("monotone_d_avg_violations", violations as f64, 0.0);

    for (k, &lambda) in tol::AUGMENTED_LAMBDAS.iter().enumerate() {
        let full = errs.iter().map(|e| e.gaps[k].0).fold(0.0, f64::max);
        let half = errs.iter().map(|e| e.gaps[k].1).fold(0.0, f64::max);
        let ratio = full / half;
        let (lo, hi) = tol::HALVING_RANGE;
        checks.push(CheckOutcome {
            name: if lambda == 1e-3 {
                "halving_ratio_lambda_1e-3"
            } else {
                "halving_ratio_lambda_1e-2"
            },
            observed: ratio,
            limit: format!("in [{lo}, {hi}]"),
            passed: (lo..=hi).contains(&ratio),
        });
    }
    Ok(VerifyReport {
        corpus: cfg.corpus,
        checks,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
    pub seed: u64,
    pub trials: usize,
    pub frames: usize,
    pub tokens: usize,
    pub vocab: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let mut lambdas = vec![0.0];
        lambdas.extend(DEFAULT_LAMBDAS);
        Self {
            lambdas,
            seed: 0,
            trials: 8,
            frames: 8,
            tokens: 3,
            vocab: 6,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() {
            return Err(Error::InvalidConfig("lambda list is empty".into()));
        }
        if self.lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::InvalidConfig(
                "lambdas must be finite and >= 0".into(),
            ));
        }
        if self.lambdas.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidConfig(
                "lambdas must be sorted ascending".into(),
            ));
        }
        if self.trials == 0 || self.frames == 0 || self.vocab < 2 {
            return Err(Error::InvalidConfig(
                "need trials >= 1, T >= 1 and V >= 2".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub trial: usize,
    /// Posterior-mean delay score under the penalized lattice; `None` when
    /// the lattice is too large to enumerate.
    pub d_avg: Option<f64>,
    /// Delay score of the penalized lattice's Viterbi path.
    pub viterbi_delay: f64,
    /// Negated unpenalized score of that path.
    pub loss: f64,
}

pub fn sweep(cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let enumerable = path_count(cfg.frames, cfg.tokens) <= DEFAULT_BUDGET;
    let per_trial = par::map_range(cfg.trials, |trial| -> Result<Vec<SweepRow>> {
        let mut rng = synth::rng(cfg.seed, trial as u64);
        let lat = synth::random_normalized_lattice(&mut rng, cfg.frames, cfg.tokens, cfg.vocab);
        cfg.lambdas
            .iter()
            .map(|&lambda| {
                let penalized = apply_penalty(&lat, &PenaltyConfig::new(lambda));
                let d_avg = if enumerable {
                    Some(oracle::oracle_weights_and_davg(&penalized)?.d_avg)
                } else {
                    None
                };
                let (path, _) = viterbi(&penalized);
                Ok(SweepRow {
                    lambda,
                    trial,
                    d_avg,
                    viterbi_delay: delay_score(&path, cfg.frames),
                    loss: -path_score(&lat, &path)?,
                })
            })
            .collect()
    });
    let mut rows = per_trial
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect::<Vec<_>>();
    // lambdas are sorted, so a stable sort on the index keeps (lambda, trial) order
    rows.sort_by(|a, b| a.lambda.total_cmp(&b.lambda).then(a.trial.cmp(&b.trial)));
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::new();
    out.push_str(SWEEP_HEADER);
    out.push('\n');
    out.push_str("lambda,trial,d_avg,viterbi_delay,loss\n");
    for r in rows {
        let d = r.d_avg.map_or_else(|| "NA".to_string(), |d| format!("{d}"));
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.lambda, r.trial, d, r.viterbi_delay, r.loss
        );
    }
    out
}
