//! Brute-force reference computations over every alignment path.
//!
//! Nothing here touches the forward-backward code: scores are summed path
//! by path and reduced with a plain max-shifted log-sum-exp, so agreement
//! with `loss` is independent evidence.

use crate::error::{Error, Result};
use crate::lattice::{Grid, Lattice};
use crate::loss::AlignmentPath;
use crate::penalty::{delay_score, path_score};

/// Default cap on the number of enumerated paths.
pub const DEFAULT_BUDGET: u128 = 1_000_000;

#[derive(Debug, Clone)]
pub struct PathEnumeration {
    pub paths: Vec<AlignmentPath>,
    pub count: usize,
}

/// Per-path quantities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathDiagnostics {
    pub delay_score: f64,
    pub path_score: f64,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct WeightsAndDelay {
    pub weights: Vec<f64>,
    pub d_avg: f64,
}

/// Delay-regularized objective, evaluated exactly by enumeration.
#[derive(Debug, Clone)]
pub struct DelayObjective {
    /// Total log-probability `log sum_i exp(s_i)`.
    pub log_prob: f64,
    /// `lambda * sum_i d_i w_i`
    pub delay_term: f64,
    pub augmented: f64,
    pub d_avg: f64,
    pub weights: Vec<f64>,
    pub delay_scores: Vec<f64>,
    /// `(1 + lambda (d_i - d_avg)) w_i`
    pub exact_grads: Vec<f64>,
    /// `exp(lambda (d_i - d_avg) + s_i) / sum_j exp(s_j)`, before renormalizing.
    pub unnormalized_grads: Vec<f64>,
    /// `exp(lambda d_i + s_i) / sum_j exp(lambda d_j + s_j)`
    pub approx_grads: Vec<f64>,
}

/// `C(n, k)` without overflow for the sizes the oracle accepts.
pub fn binomial(n: u64, k: u64) -> u128 {
    let k = k.min(n.saturating_sub(k));
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Number of complete paths through a `T x U` lattice: `C(T - 1 + U, U)`.
pub fn path_count(num_frames: usize, num_tokens: usize) -> u128 {
    binomial((num_frames - 1 + num_tokens) as u64, num_tokens as u64)
}

pub fn enumerate_paths(num_frames: usize, num_tokens: usize) -> Result<PathEnumeration> {
    enumerate_paths_with_budget(num_frames, num_tokens, DEFAULT_BUDGET)
}

/// Every non-decreasing emission-frame sequence, in lexicographic order.
pub fn enumerate_paths_with_budget(
    num_frames: usize,
    num_tokens: usize,
    budget: u128,
) -> Result<PathEnumeration> {
    if num_frames == 0 {
        return Err(Error::DimensionMismatch("lattice needs T >= 1".into()));
    }
    let needed = path_count(num_frames, num_tokens);
    if needed > budget {
        return Err(Error::BudgetExceeded { needed, budget });
    }
    let mut paths = Vec::with_capacity(needed as usize);
    let mut current = vec![0usize; num_tokens];
    fill(&mut paths, &mut current, 0, 0, num_frames);
    debug_assert_eq!(paths.len() as u128, needed);
    let count = paths.len();
    Ok(PathEnumeration { paths, count })
}

fn fill(
    out: &mut Vec<AlignmentPath>,
    current: &mut [usize],
    pos: usize,
    min: usize,
    frames: usize,
) {
    if pos == current.len() {
        out.push(AlignmentPath::new(current.to_vec()));
        return;
    }
    for f in min..frames {
        current[pos] = f;
        fill(out, current, pos + 1, f, frames);
    }
}

pub(crate) fn check_path(lat: &Lattice, path: &AlignmentPath) -> Result<()> {
    if path.num_tokens() != lat.num_tokens() {
        return Err(Error::DimensionMismatch(format!(
            "path has {} tokens, lattice has {}",
            path.num_tokens(),
            lat.num_tokens()
        )));
    }
    if !path.is_valid_for(lat.num_frames()) {
        return Err(Error::DimensionMismatch(format!(
            "emission frames {:?} are not non-decreasing within T={}",
            path.frames,
            lat.num_frames()
        )));
    }
    Ok(())
}

/// Max-shifted log-sum-exp, summed left to right.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

fn softmax(values: &[f64]) -> Vec<f64> {
    let norm = log_sum_exp(values);
    values.iter().map(|&v| (v - norm).exp()).collect()
}

fn scores(lat: &Lattice, paths: &[AlignmentPath]) -> Vec<f64> {
    paths
        .iter()
        .map(|p| path_score(lat, p).expect("enumerated paths fit the lattice"))
        .collect()
}

fn centered_delay(path: &AlignmentPath, num_frames: usize, centered: bool) -> f64 {
    if centered {
        delay_score(path, num_frames)
    } else {
        -path.frames.iter().map(|&f| f as f64).sum::<f64>()
    }
}

pub fn oracle_loss(lat: &Lattice) -> Result<f64> {
    let en = enumerate_paths(lat.num_frames(), lat.num_tokens())?;
    Ok(log_sum_exp(&scores(lat, &en.paths)))
}

/// Path weights `w_i = exp(s_i - L)` and `d_avg = sum_i d_i w_i`, in
/// enumeration order.
pub fn oracle_weights_and_davg(lat: &Lattice) -> Result<WeightsAndDelay> {
    let en = enumerate_paths(lat.num_frames(), lat.num_tokens())?;
    let weights = softmax(&scores(lat, &en.paths));
    let d_avg = en
        .paths
        .iter()
        .zip(&weights)
        .map(|(p, w)| delay_score(p, lat.num_frames()) * w)
        .sum();
    Ok(WeightsAndDelay { weights, d_avg })
}

pub fn path_diagnostics(lat: &Lattice) -> Result<Vec<PathDiagnostics>> {
    let en = enumerate_paths(lat.num_frames(), lat.num_tokens())?;
    let s = scores(lat, &en.paths);
    let w = softmax(&s);
    Ok(en
        .paths
        .iter()
        .zip(s.iter().zip(&w))
        .map(|(p, (&path_score, &weight))| PathDiagnostics {
            delay_score: delay_score(p, lat.num_frames()),
            path_score,
            weight,
        })
        .collect())
}

/// Occupation gradients by summing path weights over every path that uses
/// each transition. Same sign convention as `LossResult`.
pub fn oracle_grad(lat: &Lattice) -> Result<(Grid, Grid)> {
    let frames = lat.num_frames();
    let tokens = lat.num_tokens();
    let en = enumerate_paths(frames, tokens)?;
    let weights = softmax(&scores(lat, &en.paths));
    let mut occ_y = Grid::filled(frames, tokens, 0.0);
    let mut occ_blank = Grid::filled(frames, tokens + 1, 0.0);
    for (path, &w) in en.paths.iter().zip(&weights) {
        let mut u = 0;
        for t in 0..frames {
            while u < tokens && path.frames[u] == t {
                *occ_y.get_mut(t, u) += w;
                u += 1;
            }
            *occ_blank.get_mut(t, u) += w;
        }
    }
    Ok((occ_y.map(|v| -v), occ_blank.map(|v| -v)))
}

/// Centered delay scores.
pub fn oracle_delay_regularized_objective(lat: &Lattice, lambda: f64) -> Result<DelayObjective> {
    oracle_delay_regularized_objective_with(lat, lambda, true)
}

pub fn oracle_delay_regularized_objective_with(
    lat: &Lattice,
    lambda: f64,
    centered: bool,
) -> Result<DelayObjective> {
    let frames = lat.num_frames();
    let en = enumerate_paths(frames, lat.num_tokens())?;
    let s = scores(lat, &en.paths);
    let log_prob = log_sum_exp(&s);
    let weights: Vec<f64> = s.iter().map(|&si| (si - log_prob).exp()).collect();
    let d: Vec<f64> = en
        .paths
        .iter()
        .map(|p| centered_delay(p, frames, centered))
        .collect();
    let d_avg: f64 = d.iter().zip(&weights).map(|(di, wi)| di * wi).sum();
    let delay_term = lambda * d_avg;

    let exact_grads = d
        .iter()
        .zip(&weights)
        .map(|(di, wi)| (1.0 + lambda * (di - d_avg)) * wi)
        .collect();
    let unnormalized_grads = d
        .iter()
        .zip(&s)
        .map(|(di, si)| (lambda * (di - d_avg) + si - log_prob).exp())
        .collect();
    let tilted: Vec<f64> = d.iter().zip(&s).map(|(di, si)| lambda * di + si).collect();
    let approx_grads = softmax(&tilted);

    Ok(DelayObjective {
        log_prob,
        delay_term,
        augmented: log_prob + delay_term,
        d_avg,
        weights,
        delay_scores: d,
        exact_grads,
        unnormalized_grads,
        approx_grads,
    })
}
