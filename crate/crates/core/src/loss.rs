//! Log-space forward-backward over the alignment lattice.
//!
//! `alpha(t, u)` is the log-probability of reaching node `(t, u)` from
//! `(0, 0)`; `beta(t, u)` is the log-probability of completing the lattice
//! from `(t, u)`, terminal blank included. Missing predecessors and
//! successors contribute `-inf`.

use crate::error::{Error, Result};
use crate::lattice::{log_softmax_into, Grid, Lattice, TokenizedUtterance};

/// `log(exp(a) + exp(b))`, stable for large magnitudes. `-inf` is the
/// identity; a NaN input yields NaN.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        return f64::NAN;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    hi + (lo - hi).exp().ln_1p()
}

#[derive(Debug, Clone)]
pub struct AlphaBetaGrids {
    pub alpha: Grid,
    pub beta: Grid,
}

/// Loss in the minimization convention: `loss = -log P(y | x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub loss: f64,
    /// `d loss / d y(t, u)`, shape `T x U`.
    pub grad_y: Grid,
    /// `d loss / d blank(t, u)`, shape `T x (U + 1)`.
    pub grad_blank: Grid,
}

/// Emission frames of one complete alignment; `frames[u]` is the frame at
/// which token `u` is emitted.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AlignmentPath {
    pub frames: Vec<usize>,
}

impl AlignmentPath {
    pub fn new(frames: Vec<usize>) -> Self {
        Self { frames }
    }

    pub fn num_tokens(&self) -> usize {
        self.frames.len()
    }

    /// Non-decreasing and every frame below `num_frames`.
    pub fn is_valid_for(&self, num_frames: usize) -> bool {
        self.frames.windows(2).all(|w| w[0] <= w[1])
            && self.frames.last().is_none_or(|&f| f < num_frames)
    }
}

/// Forward recursion. Returns the alpha grid and the total log-probability
/// `alpha(T-1, U) + blank(T-1, U)`.
pub fn forward(lat: &Lattice) -> (Grid, f64) {
    let frames = lat.num_frames();
    let tokens = lat.num_tokens();
    let mut alpha = Grid::filled(frames, tokens + 1, f64::NEG_INFINITY);
    alpha.set(0, 0, 0.0);
    for t in 0..frames {
        for u in 0..=tokens {
            if t == 0 && u == 0 {
                continue;
            }
            let emit = if u > 0 {
                alpha.get(t, u - 1) + lat.y(t, u - 1)
            } else {
                f64::NEG_INFINITY
            };
            let advance = if t > 0 {
                alpha.get(t - 1, u) + lat.blank(t - 1, u)
            } else {
                f64::NEG_INFINITY
            };
            alpha.set(t, u, log_add(emit, advance));
        }
    }
    let total = alpha.get(frames - 1, tokens) + lat.blank(frames - 1, tokens);
    (alpha, total)
}

/// Backward recursion; `beta(0, 0)` equals the forward total.
pub fn backward(lat: &Lattice) -> Grid {
    let frames = lat.num_frames();
    let tokens = lat.num_tokens();
    let mut beta = Grid::filled(frames, tokens + 1, f64::NEG_INFINITY);
    beta.set(frames - 1, tokens, lat.blank(frames - 1, tokens));
    for t in (0..frames).rev() {
        for u in (0..=tokens).rev() {
            if t == frames - 1 && u == tokens {
                continue;
            }
            // blank(T-1, u < U) is never read: the last frame can only emit.
            let emit = if u < tokens {
                lat.y(t, u) + beta.get(t, u + 1)
            } else {
                f64::NEG_INFINITY
            };
            let advance = if t + 1 < frames {
                lat.blank(t, u) + beta.get(t + 1, u)
            } else {
                f64::NEG_INFINITY
            };
            beta.set(t, u, log_add(emit, advance));
        }
    }
    beta
}

pub fn alpha_beta(lat: &Lattice) -> (AlphaBetaGrids, f64) {
    let (alpha, total) = forward(lat);
    let beta = backward(lat);
    (AlphaBetaGrids { alpha, beta }, total)
}

/// Loss and occupation gradients. `-grad` of every transition is the
/// posterior probability that an alignment uses it.
pub fn loss_and_grad(lat: &Lattice) -> LossResult {
    let frames = lat.num_frames();
    let tokens = lat.num_tokens();
    let (AlphaBetaGrids { alpha, beta }, total) = alpha_beta(lat);

    let mut grad_y = Grid::filled(frames, tokens, 0.0);
    let mut grad_blank = Grid::filled(frames, tokens + 1, 0.0);
    for t in 0..frames {
        for u in 0..=tokens {
            let a = alpha.get(t, u);
            if u < tokens {
                let occ = (a + lat.y(t, u) + beta.get(t, u + 1) - total).exp();
                grad_y.set(t, u, -occ);
            }
            if t + 1 < frames {
                let occ = (a + lat.blank(t, u) + beta.get(t + 1, u) - total).exp();
                grad_blank.set(t, u, -occ);
            }
        }
    }
    grad_blank.set(frames - 1, tokens, -1.0);

    LossResult {
        loss: -total,
        grad_y,
        grad_blank,
    }
}

/// Highest-scoring complete alignment. Ties go to the emitting transition,
/// so among equal-score paths the earliest-emitting one is returned.
pub fn viterbi(lat: &Lattice) -> (AlignmentPath, f64) {
    let frames = lat.num_frames();
    let tokens = lat.num_tokens();
    // best completion score from each node, max-plus mirror of `backward`
    let mut best = Grid::filled(frames, tokens + 1, f64::NEG_INFINITY);
    best.set(frames - 1, tokens, lat.blank(frames - 1, tokens));
    for t in (0..frames).rev() {
        for u in (0..=tokens).rev() {
            if t == frames - 1 && u == tokens {
                continue;
            }
            let (emit, advance) = viterbi_candidates(lat, &best, t, u);
            best.set(t, u, emit.max(advance));
        }
    }

    let mut path = Vec::with_capacity(tokens);
    let (mut t, mut u) = (0, 0);
    while !(t == frames - 1 && u == tokens) {
        let (emit, advance) = viterbi_candidates(lat, &best, t, u);
        if emit >= advance {
            path.push(t);
            u += 1;
        } else {
            t += 1;
        }
    }
    (AlignmentPath::new(path), best.get(0, 0))
}

#[inline]
fn viterbi_candidates(lat: &Lattice, best: &Grid, t: usize, u: usize) -> (f64, f64) {
    let emit = if u < lat.num_tokens() {
        lat.y(t, u) + best.get(t, u + 1)
    } else {
        f64::NEG_INFINITY
    };
    let advance = if t + 1 < lat.num_frames() {
        lat.blank(t, u) + best.get(t + 1, u)
    } else {
        f64::NEG_INFINITY
    };
    (emit, advance)
}

/// Gradients of the loss with respect to the raw logits, by the chain rule
/// through the per-node log-softmax. Output layout matches `utt.logits`.
pub fn logit_grads(utt: &TokenizedUtterance, result: &LossResult) -> Result<Vec<f64>> {
    utt.validate()?;
    let frames = utt.num_frames;
    let tokens = utt.tokens.len();
    if result.grad_y.rows() != frames
        || result.grad_y.cols() != tokens
        || result.grad_blank.cols() != tokens + 1
    {
        return Err(Error::DimensionMismatch(format!(
            "loss result is {}x{}, utterance is T={frames}, U={tokens}",
            result.grad_y.rows(),
            result.grad_y.cols()
        )));
    }
    let vocab = utt.vocab_size;
    let mut out = vec![0.0; utt.logits.len()];
    let mut logp = vec![0.0; vocab];
    for t in 0..frames {
        for u in 0..=tokens {
            let g_blank = result.grad_blank.get(t, u);
            let g_tok = if u < tokens {
                result.grad_y.get(t, u)
            } else {
                0.0
            };
            if g_blank == 0.0 && g_tok == 0.0 {
                continue;
            }
            let g_sum = g_blank + g_tok;
            log_softmax_into(utt.node_logits(t, u), &mut logp);
            let row = &mut out[utt.logit_index(t, u, 0)..utt.logit_index(t, u, 0) + vocab];
            for (v, r) in row.iter_mut().enumerate() {
                *r = -g_sum * logp[v].exp();
            }
            row[utt.blank_id] += g_blank;
            if u < tokens {
                row[utt.tokens[u]] += g_tok;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const LN_HALF: f64 = -std::f64::consts::LN_2;

    #[test]
    fn log_add_cases() {
        assert_abs_diff_eq!(log_add(0.0, 0.0), std::f64::consts::LN_2, epsilon = 1e-15);
        assert_eq!(log_add(f64::NEG_INFINITY, -3.5), -3.5);
        assert_eq!(log_add(-3.5, f64::NEG_INFINITY), -3.5);
        assert_eq!(
            log_add(f64::NEG_INFINITY, f64::NEG_INFINITY),
            f64::NEG_INFINITY
        );
        assert_abs_diff_eq!(
            log_add(1000.0, 1000.0),
            1000.0 + std::f64::consts::LN_2,
            epsilon = 1e-12
        );
        assert!(log_add(f64::NAN, 0.0).is_nan());
        assert!(log_add(0.0, f64::NAN).is_nan());
    }

    #[test]
    fn single_path_lattice() {
        let lat = Lattice::new(1, 1, vec![-0.3], vec![-9.0, -0.7], false).unwrap();
        let (_, total) = forward(&lat);
        assert_abs_diff_eq!(total, -1.0, epsilon = 1e-15);
        let r = loss_and_grad(&lat);
        assert_eq!(r.grad_y.get(0, 0), -1.0);
        assert_eq!(r.grad_blank.get(0, 1), -1.0);
        assert_eq!(r.grad_blank.get(0, 0), 0.0);
        let (path, score) = viterbi(&lat);
        assert_eq!(path.frames, vec![0]);
        assert_abs_diff_eq!(score, -1.0, epsilon = 1e-15);
    }

    #[test]
    fn two_frame_one_token_by_hand() {
        // y = [[y00], [y10]], blank = [[b00, b01], [b10, b11]]
        let lat =
            Lattice::new(2, 1, vec![-0.4, -1.1], vec![-0.9, -0.2, -5.0, -0.6], false).unwrap();
        let expected = log_add(-0.4 + -0.2, -0.9 + -1.1) + -0.6;
        let (_, total) = forward(&lat);
        assert_abs_diff_eq!(total, expected, epsilon = 1e-15);
        let beta = backward(&lat);
        assert_abs_diff_eq!(beta.get(0, 0), expected, epsilon = 1e-15);
        assert_eq!(beta.get(1, 1), -0.6);
    }

    #[test]
    fn uniform_three_by_two() {
        let lat = Lattice::uniform(3, 2, LN_HALF);
        let expected = 6f64.ln() - 5.0 * 2f64.ln();
        let (_, total) = forward(&lat);
        assert_abs_diff_eq!(total, expected, epsilon = 1e-14);
        assert_abs_diff_eq!(total, -1.673976, epsilon = 1e-6);
        assert_abs_diff_eq!(backward(&lat).get(0, 0), expected, epsilon = 1e-14);
        let (path, _) = viterbi(&lat);
        assert_eq!(path.frames, vec![0, 0]);
    }

    #[test]
    fn two_equal_paths_share_occupation() {
        let r = loss_and_grad(&Lattice::uniform(2, 1, LN_HALF));
        assert_abs_diff_eq!(r.grad_y.get(0, 0), -0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(r.grad_y.get(1, 0), -0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(r.grad_blank.get(0, 0), -0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(r.grad_blank.get(0, 1), -0.5, epsilon = 1e-15);
        assert_eq!(r.grad_blank.get(1, 1), -1.0);
    }

    #[test]
    fn no_tokens_is_a_single_blank_path() {
        let lat = Lattice::new(3, 0, vec![], vec![-0.1, -0.2, -0.3], false).unwrap();
        let r = loss_and_grad(&lat);
        assert_abs_diff_eq!(r.loss, 0.6, epsilon = 1e-15);
        assert!(r
            .grad_blank
            .as_slice()
            .iter()
            .all(|&g| (g + 1.0).abs() < 1e-15));
        let (path, score) = viterbi(&lat);
        assert!(path.frames.is_empty());
        assert_abs_diff_eq!(score, -0.6, epsilon = 1e-15);
    }

    #[test]
    fn dead_blank_entries_are_ignored() {
        let base = Lattice::new(
            3,
            2,
            vec![-0.5, -1.5, -0.2, -2.0, -0.8, -0.3],
            vec![-0.7, -0.1, -1.9, -0.6, -0.4, -0.9, -1.2, -0.05, -0.33],
            false,
        )
        .unwrap();
        let mut poked = base.clone();
        poked.blank_grid_mut().set(2, 0, 40.0);
        poked.blank_grid_mut().set(2, 1, -1e6);
        let a = loss_and_grad(&base);
        let b = loss_and_grad(&poked);
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.grad_y, b.grad_y);
        assert_eq!(a.grad_blank, b.grad_blank);
        assert_eq!(viterbi(&base), viterbi(&poked));
    }

    #[test]
    fn logit_grads_uniform_single_path() {
        // T=1, U=1, V=2, blank=0, token=1: node (0,0) consumes the token,
        // node (0,1) consumes the blank, each with occupation 1.
        let utt = TokenizedUtterance {
            tokens: vec![1],
            blank_id: 0,
            num_frames: 1,
            vocab_size: 2,
            logits: vec![0.0; 4],
        };
        let lat = crate::lattice::lattice_from_logits(&utt).unwrap();
        let r = loss_and_grad(&lat);
        let g = logit_grads(&utt, &r).unwrap();
        // d(-log p_1)/dz = p - onehot(1) = (0.5, -0.5)
        assert_abs_diff_eq!(g[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(g[1], -0.5, epsilon = 1e-15);
        // d(-log p_0)/dz = (-0.5, 0.5)
        assert_abs_diff_eq!(g[2], -0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(g[3], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn logit_grads_zero_for_unvisited_nodes() {
        // T=2, U=1: node (1, 0) is only left via y(1,0), node (0,1) only via
        // blank(0,1). Make y(0,0) overwhelmingly likely so (1,0) is ~unvisited,
        // and check the dead node (1,0) blank contributes nothing.
        let mut logits = vec![0.0; 2 * 2 * 3];
        let utt_shape = TokenizedUtterance {
            tokens: vec![2],
            blank_id: 0,
            num_frames: 2,
            vocab_size: 3,
            logits: logits.clone(),
        };
        logits[utt_shape.logit_index(0, 0, 2)] = 800.0;
        let utt = TokenizedUtterance {
            logits,
            ..utt_shape
        };
        let lat = crate::lattice::lattice_from_logits(&utt).unwrap();
        let r = loss_and_grad(&lat);
        let g = logit_grads(&utt, &r).unwrap();
        let start = utt.logit_index(1, 0, 0);
        assert!(g[start..start + 3].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn logit_grads_dimension_mismatch() {
        let utt = TokenizedUtterance {
            tokens: vec![1],
            blank_id: 0,
            num_frames: 1,
            vocab_size: 2,
            logits: vec![0.0; 4],
        };
        let other = loss_and_grad(&Lattice::uniform(2, 1, LN_HALF));
        assert!(logit_grads(&utt, &other).is_err());
    }
}
