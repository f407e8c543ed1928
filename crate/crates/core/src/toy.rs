//! Desk-scale streaming transducer for observing emission-delay drift.
//!
//! Tokens come in confusable pairs. The evidence for token `u` spans frames
//! `[a_u, a_u + k]`: a cue shared by its pair covers the whole span and a
//! weaker cue identifying the token appears only on the last frames, so a
//! model that waits recognizes more reliably. The model is a causal linear map
//! from a short window of past frames plus a previous-token bias to logits,
//! trained by plain minibatch gradient descent through [`logit_grads`].

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::lattice::{lattice_from_logits, TokenizedUtterance};
use crate::loss::{logit_grads, viterbi, LossResult};
use crate::par;
use crate::penalty::{fastemit_loss_and_grad, penalized_loss_and_grad, PenaltyConfig, PenaltySide};
use crate::synth;

pub const TRAIN_HEADER: &str = "# latticeloss-train v1";

const BLANK: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyTaskConfig {
    pub frames: usize,
    pub tokens: usize,
    /// Vocabulary including blank (id 0); tokens are `1..vocab`.
    pub vocab: usize,
    /// Evidence for a token covers frames `[a, a + spread]`.
    pub spread: usize,
    /// Trailing frames of the evidence window that carry the token-specific
    /// cue.
    pub cue_frames: usize,
    /// Strength of the cue shared by a pair of confusable tokens, present
    /// over the whole evidence window.
    pub group_amplitude: f64,
    /// Strength of the cue that tells the two tokens of a pair apart.
    pub cue_amplitude: f64,
    /// Standard deviation of the Gaussian noise on every feature.
    pub noise: f64,
}

impl Default for ToyTaskConfig {
    fn default() -> Self {
        Self {
            frames: 24,
            tokens: 3,
            vocab: 9,
            spread: 4,
            cue_frames: 3,
            group_amplitude: 2.0,
            cue_amplitude: 0.5,
            noise: 0.5,
        }
    }
}

impl ToyTaskConfig {
    /// Tokens `2g + 1` and `2g + 2` form group `g`.
    pub fn groups(&self) -> usize {
        self.vocab / 2
    }

    /// One channel per token followed by one per group.
    pub fn channels(&self) -> usize {
        self.vocab - 1 + self.groups()
    }

    fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.frames == 0 {
            return Err(Error::InvalidConfig(
                "toy task needs V >= 2 and T >= 1".into(),
            ));
        }
        if self.cue_frames == 0 || self.cue_frames > self.spread + 1 {
            return Err(Error::InvalidConfig(format!(
                "cue frames must be in 1..={}",
                self.spread + 1
            )));
        }
        // each token needs its evidence window plus a one-frame gap
        if self.tokens * (self.spread + 2) + 1 > self.frames {
            return Err(Error::InvalidConfig(format!(
                "{} tokens with spread {} do not fit in {} frames",
                self.tokens, self.spread, self.frames
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ToyUtterance {
    /// Row-major `T x channels`.
    pub features: Vec<f64>,
    pub tokens: Vec<usize>,
    /// First frame carrying evidence for each token.
    pub onsets: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ToyTask {
    pub config: ToyTaskConfig,
    pub utterances: Vec<ToyUtterance>,
}

impl ToyTask {
    pub fn generate<R: Rng>(config: ToyTaskConfig, count: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let channels = config.channels();
        let token_channels = config.vocab - 1;
        let noise = Normal::new(0.0, config.noise)
            .map_err(|e| Error::InvalidConfig(format!("noise: {e}")))?;
        let slack = config.frames - 1 - config.tokens * (config.spread + 2);
        let utterances = (0..count)
            .map(|_| {
                let tokens: Vec<usize> = (0..config.tokens)
                    .map(|_| rng.gen_range(1..config.vocab))
                    .collect();
                // distribute the free frames as random gaps before each window
                let mut gaps = vec![0usize; config.tokens + 1];
                for _ in 0..slack {
                    let g = rng.gen_range(0..gaps.len());
                    gaps[g] += 1;
                }
                let mut onsets = Vec::with_capacity(config.tokens);
                let mut cursor = 1;
                for g in gaps.iter().take(config.tokens) {
                    cursor += g;
                    onsets.push(cursor);
                    cursor += config.spread + 2;
                }
                let mut features: Vec<f64> = (0..config.frames * channels)
                    .map(|_| noise.sample(rng))
                    .collect();
                for (&tok, &onset) in tokens.iter().zip(&onsets) {
                    let group = ((tok - 1) / 2).min(config.groups().saturating_sub(1));
                    for j in 0..=config.spread {
                        let row = (onset + j) * channels;
                        features[row + token_channels + group] += config.group_amplitude;
                        if j + config.cue_frames > config.spread {
                            features[row + tok - 1] += config.cue_amplitude;
                        }
                    }
                }
                ToyUtterance {
                    features,
                    tokens,
                    onsets,
                }
            })
            .collect();
        Ok(Self { config, utterances })
    }
}

/// `logits(t, u, v) = sum_j W_j[v] . x(t - j) + E[prev(u)][v] + b[v]`,
/// where `prev(u)` is the previous token (blank id for `u = 0`) and frames
/// before 0 read as zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub window: usize,
    pub vocab: usize,
    pub channels: usize,
    /// `window x vocab x channels`
    pub weights: Vec<f64>,
    /// `vocab x vocab`, indexed `[prev][v]`
    pub embed: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ToyModel {
    pub fn init<R: Rng>(
        window: usize,
        vocab: usize,
        channels: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut draw =
            |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-scale..scale)).collect() };
        Self {
            window,
            vocab,
            channels,
            weights: draw(window * vocab * channels),
            embed: draw(vocab * vocab),
            bias: vec![0.0; vocab],
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            weights: vec![0.0; self.weights.len()],
            embed: vec![0.0; self.embed.len()],
            bias: vec![0.0; self.bias.len()],
            ..*self
        }
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .chain(self.embed.iter_mut())
            .chain(self.bias.iter_mut())
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(&self.embed).chain(&self.bias)
    }

    fn add_scaled(&mut self, other: &ToyModel, scale: f64) {
        for (p, g) in self.params_mut().zip(other.params()) {
            *p += scale * g;
        }
    }

    /// Acoustic part of the logits, `T x vocab`.
    fn frame_logits(&self, utt: &ToyUtterance, frames: usize) -> Vec<f64> {
        let (v_n, c_n) = (self.vocab, self.channels);
        let mut out = vec![0.0; frames * v_n];
        for t in 0..frames {
            for j in 0..self.window.min(t + 1) {
                let x = &utt.features[(t - j) * c_n..(t - j + 1) * c_n];
                for v in 0..v_n {
                    let w = &self.weights[(j * v_n + v) * c_n..(j * v_n + v + 1) * c_n];
                    out[t * v_n + v] += w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            for v in 0..v_n {
                out[t * v_n + v] += self.bias[v];
            }
        }
        out
    }

    pub fn utterance(&self, utt: &ToyUtterance, frames: usize) -> TokenizedUtterance {
        let v_n = self.vocab;
        let tokens = utt.tokens.len();
        let acoustic = self.frame_logits(utt, frames);
        let mut logits = Vec::with_capacity(frames * (tokens + 1) * v_n);
        for t in 0..frames {
            for u in 0..=tokens {
                let prev = if u == 0 { BLANK } else { utt.tokens[u - 1] };
                for v in 0..v_n {
                    logits.push(acoustic[t * v_n + v] + self.embed[prev * v_n + v]);
                }
            }
        }
        TokenizedUtterance {
            tokens: utt.tokens.clone(),
            blank_id: BLANK,
            num_frames: frames,
            vocab_size: v_n,
            logits,
        }
    }

    /// Parameter gradient from logit gradients laid out as in `utterance`.
    fn backprop(&self, utt: &ToyUtterance, frames: usize, dlogits: &[f64]) -> ToyModel {
        let (v_n, c_n) = (self.vocab, self.channels);
        let tokens = utt.tokens.len();
        let mut grad = self.zeros_like();
        let mut frame_grad = vec![0.0; frames * v_n];
        for t in 0..frames {
            for u in 0..=tokens {
                let prev = if u == 0 { BLANK } else { utt.tokens[u - 1] };
                let row = &dlogits[(t * (tokens + 1) + u) * v_n..(t * (tokens + 1) + u + 1) * v_n];
                for (v, &g) in row.iter().enumerate() {
                    frame_grad[t * v_n + v] += g;
                    grad.embed[prev * v_n + v] += g;
                }
            }
        }
        for t in 0..frames {
            for v in 0..v_n {
                let g = frame_grad[t * v_n + v];
                if g == 0.0 {
                    continue;
                }
                grad.bias[v] += g;
                for j in 0..self.window.min(t + 1) {
                    let x = &utt.features[(t - j) * c_n..(t - j + 1) * c_n];
                    let w = &mut grad.weights[(j * v_n + v) * c_n..(j * v_n + v + 1) * c_n];
                    for (wg, &xv) in w.iter_mut().zip(x) {
                        *wg += g * xv;
                    }
                }
            }
        }
        grad
    }
}

/// Training regularizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    /// Delay penalty on the lattice inputs; `lambda = 0` is the plain loss.
    DelayPenalty(PenaltyConfig),
    /// Non-blank gradient scaling by `1 + lambda`.
    FastEmit(f64),
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::DelayPenalty(c) if c.side == PenaltySide::Blank => "delay-blank",
            Method::DelayPenalty(_) => "delay",
            Method::FastEmit(_) => "fastemit",
        }
    }

    pub fn lambda(&self) -> f64 {
        match self {
            Method::DelayPenalty(c) => c.lambda,
            Method::FastEmit(l) => *l,
        }
    }

    fn loss_and_grad(&self, lat: &crate::Lattice) -> LossResult {
        match self {
            Method::DelayPenalty(cfg) => penalized_loss_and_grad(lat, cfg),
            Method::FastEmit(l) => fastemit_loss_and_grad(lat, *l),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub task: ToyTaskConfig,
    pub window: usize,
    pub train_size: usize,
    pub heldout_size: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub init_scale: f64,
    pub epochs: usize,
    /// Leading epochs trained on the plain loss before the regularizer is
    /// switched on; every method of a seed shares this trajectory.
    pub warmup_epochs: usize,
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: ToyTaskConfig::default(),
            window: 3,
            train_size: 64,
            heldout_size: 128,
            batch_size: 8,
            learning_rate: 0.015,
            init_scale: 0.1,
            epochs: 30,
            warmup_epochs: 10,
            seeds: (0..10).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training objective (the regularized loss actually optimized);
    /// `None` before the first epoch.
    pub train_objective: Option<f64>,
    /// Mean unpenalized loss per held-out utterance.
    pub heldout_loss: f64,
    /// Mean over held-out tokens of Viterbi emission frame minus evidence onset.
    pub mean_delay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub method: Method,
    pub seed: u64,
    pub epochs: Vec<EpochStats>,
}

/// Unpenalized held-out loss and mean Viterbi delay, in frames.
pub fn evaluate(model: &ToyModel, task: &ToyTask) -> Result<(f64, f64)> {
    let frames = task.config.frames;
    let per_utt = par::map(&task.utterances, |utt| -> Result<(f64, f64, usize)> {
        let lat = lattice_from_logits(&model.utterance(utt, frames))?;
        let loss = -crate::loss::forward(&lat).1;
        let (path, _) = viterbi(&lat);
        let delay: f64 = path
            .frames
            .iter()
            .zip(&utt.onsets)
            .map(|(&f, &a)| f as f64 - a as f64)
            .sum();
        Ok((loss, delay, path.frames.len()))
    });
    let mut loss = 0.0;
    let mut delay = 0.0;
    let mut count = 0;
    for r in per_utt {
        let (l, d, n) = r?;
        loss += l;
        delay += d;
        count += n;
    }
    let n = task.utterances.len().max(1) as f64;
    Ok((loss / n, if count > 0 { delay / count as f64 } else { 0.0 }))
}

/// Trains one model from `seed` and logs held-out statistics after every
/// epoch. Epoch 0 is the untrained model.
pub fn train_run(cfg: &TrainConfig, method: Method, seed: u64) -> Result<RunLog> {
    if cfg.batch_size == 0 || cfg.train_size == 0 || cfg.heldout_size == 0 {
        return Err(Error::InvalidConfig(
            "batch, train and held-out sizes must be positive".into(),
        ));
    }
    let mut data_rng = synth::rng(seed, 0);
    let train = ToyTask::generate(cfg.task, cfg.train_size, &mut data_rng)?;
    let heldout = ToyTask::generate(cfg.task, cfg.heldout_size, &mut synth::rng(seed, 1))?;
    let mut model = ToyModel::init(
        cfg.window,
        cfg.task.vocab,
        cfg.task.channels(),
        cfg.init_scale,
        &mut synth::rng(seed, 2),
    );
    let mut order_rng = synth::rng(seed, 3);
    let frames = cfg.task.frames;

    let mut epochs = Vec::with_capacity(cfg.epochs + 1);
    let (heldout_loss, mean_delay) = evaluate(&model, &heldout)?;
    epochs.push(EpochStats {
        epoch: 0,
        train_objective: None,
        heldout_loss,
        mean_delay,
    });

    let mut order: Vec<usize> = (0..train.utterances.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut objective = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let grads = par::map(batch, |&i| -> Result<(f64, ToyModel)> {
                let utt = &train.utterances[i];
                let tok = model.utterance(utt, frames);
                let lat = lattice_from_logits(&tok)?;
                let r = if epoch <= cfg.warmup_epochs {
                    crate::loss::loss_and_grad(&lat)
                } else {
                    method.loss_and_grad(&lat)
                };
                let dlogits = logit_grads(&tok, &r)?;
                Ok((r.loss, model.backprop(utt, frames, &dlogits)))
            });
            let mut total = model.zeros_like();
            for g in grads {
                let (loss, grad) = g.map_err(|e| diverged(e, seed, epoch))?;
                objective += loss;
                total.add_scaled(&grad, 1.0);
            }
            model.add_scaled(&total, -cfg.learning_rate / batch.len() as f64);
        }
        let (heldout_loss, mean_delay) =
            evaluate(&model, &heldout).map_err(|e| diverged(e, seed, epoch))?;
        let train_objective = objective / train.utterances.len() as f64;
        if !train_objective.is_finite() || !heldout_loss.is_finite() {
            return Err(Error::Diverged {
                seed,
                epoch,
                detail: format!("train objective {train_objective}, held-out loss {heldout_loss}"),
            });
        }
        epochs.push(EpochStats {
            epoch,
            train_objective: Some(train_objective),
            heldout_loss,
            mean_delay,
        });
    }
    Ok(RunLog {
        method,
        seed,
        epochs,
    })
}

fn diverged(e: Error, seed: u64, epoch: usize) -> Error {
    match e {
        Error::NonFinite { grid, t, u } => Error::Diverged {
            seed,
            epoch,
            detail: format!("non-finite {grid} log-probability at ({t}, {u})"),
        },
        other => other,
    }
}

/// Every method for every seed. Runs are independent and evaluated in
/// parallel; the output order is `methods x seeds`.
pub fn train_all(cfg: &TrainConfig, methods: &[Method]) -> Result<Vec<RunLog>> {
    if cfg.seeds.is_empty() {
        return Err(Error::InvalidConfig("need at least one seed".into()));
    }
    let jobs: Vec<(Method, u64)> = methods
        .iter()
        .flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();
    par::map(&jobs, |&(m, s)| train_run(cfg, m, s))
        .into_iter()
        .collect()
}

/// Seed-averaged curve for one method: `(epoch, heldout_loss, mean_delay)`.
pub fn average_curve(runs: &[RunLog], method: Method) -> Vec<(usize, f64, f64)> {
    let selected: Vec<&RunLog> = runs.iter().filter(|r| r.method == method).collect();
    let Some(first) = selected.first() else {
        return Vec::new();
    };
    let n = selected.len() as f64;
    (0..first.epochs.len())
        .map(|e| {
            let loss = selected
                .iter()
                .map(|r| r.epochs[e].heldout_loss)
                .sum::<f64>()
                / n;
            let delay = selected.iter().map(|r| r.epochs[e].mean_delay).sum::<f64>() / n;
            (first.epochs[e].epoch, loss, delay)
        })
        .collect()
}

/// Counts adjacent epoch pairs in the second half of a curve that move
/// against `direction` (`+1.0` for non-decreasing, `-1.0` for
/// non-increasing).
pub fn trend_violations(delays: &[f64], direction: f64) -> usize {
    let start = delays.len() / 2;
    delays[start..]
        .windows(2)
        .filter(|w| (w[1] - w[0]) * direction < 0.0)
        .count()
}

pub fn train_csv(runs: &[RunLog]) -> String {
    let mut out = String::new();
    out.push_str(TRAIN_HEADER);
    out.push('\n');
    out.push_str("method,lambda,seed,epoch,train_objective,heldout_loss,mean_delay\n");
    for run in runs {
        for e in &run.epochs {
            let obj = e
                .train_objective
                .map_or_else(|| "NA".to_string(), |v| format!("{v}"));
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                run.method.label(),
                run.method.lambda(),
                run.seed,
                e.epoch,
                obj,
                e.heldout_loss,
                e.mean_delay
            );
        }
    }
    out
}

/// Final-epoch comparison, one line per method.
pub fn summary(runs: &[RunLog], methods: &[Method]) -> String {
    let mut out = String::from("method        lambda      final_delay  final_heldout_loss\n");
    for &m in methods {
        if let Some(&(_, loss, delay)) = average_curve(runs, m).last() {
            let _ = writeln!(
                out,
                "{:<13} {:<11} {:<12.4} {:.6}",
                m.label(),
                m.lambda(),
                delay,
                loss
            );
        }
    }
    out
}
