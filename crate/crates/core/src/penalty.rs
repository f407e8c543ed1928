//! Delay penalty on the lattice inputs and the FastEmit baseline.
//!
//! Adding `lambda * ((T - 1) / 2 - t)` to every `y(t, u)` adds exactly
//! `lambda * d` to the score of a path whose delay score is `d`, so the
//! ordinary forward-backward on the shifted lattice yields path posteriors
//! proportional to `exp(s + lambda * d)`.

use crate::error::Result;
use crate::lattice::Lattice;
use crate::loss::{loss_and_grad, AlignmentPath, LossResult};
use crate::oracle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PenaltySide {
    /// Reward early non-blank emissions.
    #[default]
    NonBlank,
    /// Charge early blanks, the mirror image.
    Blank,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyConfig {
    pub lambda: f64,
    pub side: PenaltySide,
    /// Measure frame offsets from the middle frame `(T - 1) / 2` instead of
    /// from frame 0. Only moves the loss value, never the gradients.
    pub centered: bool,
}

impl PenaltyConfig {
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            side: PenaltySide::NonBlank,
            centered: true,
        }
    }

    pub fn with_side(mut self, side: PenaltySide) -> Self {
        self.side = side;
        self
    }

    pub fn with_centered(mut self, centered: bool) -> Self {
        self.centered = centered;
        self
    }

    /// Offset for frame `t` in a lattice of `num_frames` frames.
    #[inline]
    pub fn offset(&self, t: usize, num_frames: usize) -> f64 {
        if self.centered {
            (num_frames as f64 - 1.0) / 2.0 - t as f64
        } else {
            -(t as f64)
        }
    }
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self::new(0.0)
    }
}

/// Returns a copy of `lat` with the delay penalty folded into its inputs.
/// The result is not renormalized.
pub fn apply_penalty(lat: &Lattice, cfg: &PenaltyConfig) -> Lattice {
    let mut out = lat.clone();
    if cfg.lambda == 0.0 {
        return out;
    }
    let frames = lat.num_frames();
    match cfg.side {
        PenaltySide::NonBlank => {
            let grid = out.y_grid_mut();
            for t in 0..frames {
                let shift = cfg.lambda * cfg.offset(t, frames);
                for u in 0..grid.cols() {
                    *grid.get_mut(t, u) += shift;
                }
            }
        }
        PenaltySide::Blank => {
            let grid = out.blank_grid_mut();
            for t in 0..frames {
                let shift = cfg.lambda * cfg.offset(t, frames);
                for u in 0..grid.cols() {
                    *grid.get_mut(t, u) -= shift;
                }
            }
        }
    }
    out.set_normalized(false);
    out
}

/// `sum_u ((T - 1) / 2 - frames[u])`; larger means earlier emission.
pub fn delay_score(path: &AlignmentPath, num_frames: usize) -> f64 {
    let mid = (num_frames as f64 - 1.0) / 2.0;
    path.frames.iter().map(|&f| mid - f as f64).sum()
}

/// Sum of the log-probabilities of every transition on `path`: the `U`
/// emissions plus one blank per frame, taken at the token count the path
/// holds when leaving that frame.
pub fn path_score(lat: &Lattice, path: &AlignmentPath) -> Result<f64> {
    oracle::check_path(lat, path)?;
    let mut score = 0.0;
    let mut u = 0;
    for t in 0..lat.num_frames() {
        while u < path.frames.len() && path.frames[u] == t {
            score += lat.y(t, u);
            u += 1;
        }
        score += lat.blank(t, u);
    }
    Ok(score)
}

/// Production training path: the ordinary loss on the penalized lattice.
pub fn penalized_loss_and_grad(lat: &Lattice, cfg: &PenaltyConfig) -> LossResult {
    loss_and_grad(&apply_penalty(lat, cfg))
}

/// FastEmit-style regularization: non-blank occupation gradients are scaled
/// by `1 + lambda`; blank gradients and the loss value are left alone.
pub fn fastemit_loss_and_grad(lat: &Lattice, lambda: f64) -> LossResult {
    let mut r = loss_and_grad(lat);
    if lambda != 0.0 {
        let scale = 1.0 + lambda;
        for g in r.grad_y.as_mut_slice() {
            *g *= scale;
        }
    }
    r
}

/// Exact per-path derivatives of the augmented objective next to the
/// softmax form the penalty actually optimizes, both from enumeration.
#[derive(Debug, Clone)]
pub struct AugmentedGrads {
    /// `(1 + lambda (d_i - d_avg)) w_i`
    pub exact: Vec<f64>,
    /// `exp(lambda d_i + s_i) / sum_j exp(lambda d_j + s_j)`
    pub approx: Vec<f64>,
    pub d_avg: f64,
}

impl AugmentedGrads {
    pub fn max_gap(&self) -> f64 {
        self.exact
            .iter()
            .zip(&self.approx)
            .map(|(e, a)| (e - a).abs())
            .fold(0.0, f64::max)
    }
}

/// Delay scores follow `cfg.centered`; the side is irrelevant here since the
/// augmented objective is stated in terms of emission frames.
pub fn exact_augmented_grads(lat: &Lattice, cfg: &PenaltyConfig) -> Result<AugmentedGrads> {
    let obj = oracle::oracle_delay_regularized_objective_with(lat, cfg.lambda, cfg.centered)?;
    Ok(AugmentedGrads {
        exact: obj.exact_grads,
        approx: obj.approx_grads,
        d_avg: obj.d_avg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const LN_HALF: f64 = -std::f64::consts::LN_2;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn sample() -> Lattice {
        Lattice::new(
            3,
            2,
            vec![-0.5, -1.5, -0.2, -2.0, -0.8, -0.3],
            vec![-0.7, -0.1, -1.9, -0.6, -0.4, -0.9, -1.2, -0.05, -0.33],
            true,
        )
        .unwrap()
    }

    #[test]
    fn zero_lambda_is_identity() {
        let lat = sample();
        for side in [PenaltySide::NonBlank, PenaltySide::Blank] {
            for centered in [true, false] {
                let cfg = PenaltyConfig::new(0.0)
                    .with_side(side)
                    .with_centered(centered);
                assert_eq!(apply_penalty(&lat, &cfg), lat);
                assert_eq!(penalized_loss_and_grad(&lat, &cfg), loss_and_grad(&lat));
            }
        }
    }

    #[test]
    fn middle_frame_row_is_unchanged() {
        let lat = Lattice::uniform(5, 2, -1.0);
        let out = apply_penalty(&lat, &PenaltyConfig::new(0.01));
        assert!(!out.is_normalized());
        assert_eq!(out.y(2, 0), -1.0);
        assert_abs_diff_eq!(out.y(0, 1), -1.0 + 0.02, epsilon = 1e-15);
        assert_abs_diff_eq!(out.y(4, 0), -1.0 - 0.02, epsilon = 1e-15);
        assert_eq!(out.blank_grid(), lat.blank_grid());
    }

    #[test]
    fn blank_side_moves_the_other_way() {
        let lat = Lattice::uniform(5, 1, -1.0);
        let cfg = PenaltyConfig::new(0.01).with_side(PenaltySide::Blank);
        let out = apply_penalty(&lat, &cfg);
        assert_eq!(out.y_grid(), lat.y_grid());
        assert_abs_diff_eq!(out.blank(0, 0), -1.0 - 0.02, epsilon = 1e-15);
        assert_abs_diff_eq!(out.blank(4, 1), -1.0 + 0.02, epsilon = 1e-15);
    }

    #[test]
    fn delay_score_cases() {
        assert_eq!(delay_score(&AlignmentPath::new(vec![2]), 5), 0.0);
        assert_eq!(delay_score(&AlignmentPath::new(vec![0, 0]), 5), 4.0);
        assert_eq!(delay_score(&AlignmentPath::new(vec![3]), 4), -1.5);
    }

    #[test]
    fn path_score_cases() {
        let lat = Lattice::new(1, 1, vec![-0.3], vec![-9.0, -0.7], false).unwrap();
        assert_abs_diff_eq!(
            path_score(&lat, &AlignmentPath::new(vec![0])).unwrap(),
            -1.0,
            epsilon = 1e-15
        );
        let lat =
            Lattice::new(2, 1, vec![-0.4, -1.1], vec![-0.9, -0.2, -5.0, -0.6], false).unwrap();
        assert_abs_diff_eq!(
            path_score(&lat, &AlignmentPath::new(vec![1])).unwrap(),
            -0.9 + -1.1 + -0.6,
            epsilon = 1e-15
        );
        let lat = Lattice::uniform(3, 2, LN_HALF);
        for frames in [[0, 0], [0, 2], [1, 1], [2, 2]] {
            assert_abs_diff_eq!(
                path_score(&lat, &AlignmentPath::new(frames.to_vec())).unwrap(),
                5.0 * LN_HALF,
                epsilon = 1e-15
            );
        }
        assert!(path_score(&lat, &AlignmentPath::new(vec![0])).is_err());
        assert!(path_score(&lat, &AlignmentPath::new(vec![1, 0])).is_err());
        assert!(path_score(&lat, &AlignmentPath::new(vec![0, 3])).is_err());
    }

    #[test]
    fn two_path_posterior_tilts_early() {
        let lat = Lattice::uniform(2, 1, LN_HALF);
        let r = penalized_loss_and_grad(&lat, &PenaltyConfig::new(0.1));
        assert_abs_diff_eq!(-r.grad_y.get(0, 0), sigmoid(0.1), epsilon = 1e-14);
        assert_abs_diff_eq!(-r.grad_y.get(1, 0), 1.0 - sigmoid(0.1), epsilon = 1e-14);
        assert_abs_diff_eq!(-r.grad_y.get(0, 0), 0.52498, epsilon = 1e-5);
    }

    #[test]
    fn centering_only_moves_the_loss() {
        let lat = sample();
        let lambda = 0.37;
        let c = penalized_loss_and_grad(&lat, &PenaltyConfig::new(lambda));
        let n = penalized_loss_and_grad(&lat, &PenaltyConfig::new(lambda).with_centered(false));
        assert!(c.grad_y.max_abs_diff(&n.grad_y) <= 1e-10);
        assert!(c.grad_blank.max_abs_diff(&n.grad_blank) <= 1e-10);
        // every path emits U tokens, each gaining lambda * (T-1)/2 more when centered
        let expected = lambda * 2.0 * (3.0 - 1.0) / 2.0;
        assert_abs_diff_eq!(n.loss - c.loss, expected, epsilon = 1e-12);
    }

    #[test]
    fn augmented_two_path_example() {
        let lat = Lattice::uniform(2, 1, LN_HALF);
        let aug = exact_augmented_grads(&lat, &PenaltyConfig::new(0.1)).unwrap();
        assert_abs_diff_eq!(aug.d_avg, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(aug.exact[0], 0.525, epsilon = 1e-14);
        assert_abs_diff_eq!(aug.exact[1], 0.475, epsilon = 1e-14);
        assert_abs_diff_eq!(aug.approx[0], sigmoid(0.1), epsilon = 1e-14);
        assert_abs_diff_eq!(aug.approx[1], 1.0 - sigmoid(0.1), epsilon = 1e-14);
        assert!(aug.max_gap() <= 0.1f64.powi(2) * 0.5f64.powi(2));
    }

    #[test]
    fn augmented_zero_lambda_gives_weights() {
        let lat = sample();
        let aug = exact_augmented_grads(&lat, &PenaltyConfig::new(0.0)).unwrap();
        let w = oracle::oracle_weights_and_davg(&lat).unwrap();
        assert_eq!(aug.exact, w.weights);
    }

    #[test]
    fn fastemit_scales_only_emissions() {
        let lat = Lattice::uniform(2, 1, LN_HALF);
        let plain = loss_and_grad(&lat);
        assert_eq!(fastemit_loss_and_grad(&lat, 0.0), plain);
        let fe = fastemit_loss_and_grad(&lat, 0.1);
        assert_eq!(fe.loss, plain.loss);
        assert_eq!(fe.grad_blank, plain.grad_blank);
        assert_abs_diff_eq!(-fe.grad_y.get(0, 0), 0.55, epsilon = 1e-15);
        assert_abs_diff_eq!(-fe.grad_y.get(1, 0), 0.55, epsilon = 1e-15);
    }
}
