//! Seeded synthetic inputs. All randomness is ChaCha8 (`rand_chacha`),
//! seeded from a `u64` with one stream per independent item so results do
//! not depend on evaluation order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::lattice::{lattice_from_logits, Lattice, TokenizedUtterance};

pub fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Lattice with entries drawn uniformly from `[lo, hi)`.
pub fn random_lattice<R: Rng>(
    rng: &mut R,
    num_frames: usize,
    num_tokens: usize,
    lo: f64,
    hi: f64,
) -> Lattice {
    let y = (0..num_frames * num_tokens)
        .map(|_| rng.gen_range(lo..hi))
        .collect();
    let blank = (0..num_frames * (num_tokens + 1))
        .map(|_| rng.gen_range(lo..hi))
        .collect();
    Lattice::new(num_frames, num_tokens, y, blank, false).expect("finite entries")
}

/// Utterance with blank id 0, tokens drawn from `1..V` and logits uniform in
/// `[-scale, scale)`.
pub fn random_utterance<R: Rng>(
    rng: &mut R,
    num_frames: usize,
    num_tokens: usize,
    vocab: usize,
    scale: f64,
) -> TokenizedUtterance {
    assert!(vocab >= 2);
    let tokens = (0..num_tokens).map(|_| rng.gen_range(1..vocab)).collect();
    let logits = (0..num_frames * (num_tokens + 1) * vocab)
        .map(|_| rng.gen_range(-scale..scale))
        .collect();
    TokenizedUtterance {
        tokens,
        blank_id: 0,
        num_frames,
        vocab_size: vocab,
        logits,
    }
}

pub fn random_normalized_lattice<R: Rng>(
    rng: &mut R,
    num_frames: usize,
    num_tokens: usize,
    vocab: usize,
) -> Lattice {
    let utt = random_utterance(rng, num_frames, num_tokens, vocab, 2.0);
    lattice_from_logits(&utt).expect("well-formed synthetic utterance")
}
