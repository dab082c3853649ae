//! Two-stage training: encoder + CTD first, then the FTD decoder on a frozen encoder.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{ctd_loss_and_grads, ftd_loss_and_grads, Params, UetdWeights};
use super::{Branch, Mode, UetdConfig};
use crate::error::{Error, Result};
use crate::tensor::Mat;
use crate::tokenizer::{SchemeKind, TokenSequence};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Reference hyperparameters for a branch: Adam, weight decay 5e-5,
    /// dropout 0.1, batch 512 (CTD) / 256 (FTD), per-scheme learning rates.
    pub fn reference(branch: Branch, kind: SchemeKind, use_relative: bool) -> Self {
        let (learning_rate, dropout) = match (branch, kind, use_relative) {
            (Branch::Ctd, SchemeKind::StPrp, true) => (1e-5, 0.1),
            (Branch::Ctd, SchemeKind::StPrp, false) => (2e-3, 0.1),
            (Branch::Ctd, SchemeKind::TPrp, _) => (5e-6, 0.1),
            (Branch::Ctd, SchemeKind::KsPrp, _) => (5e-6, 0.1),
            (Branch::Ctd, SchemeKind::FsPrp, _) => (1e-5, 0.1),
            (Branch::Ftd, SchemeKind::StPrp, true) => (2e-3, 0.1),
            (Branch::Ftd, SchemeKind::StPrp, false) => (5e-4, 0.1),
            (Branch::Ftd, SchemeKind::TPrp, _) => (3e-3, 0.1),
            (Branch::Ftd, SchemeKind::KsPrp, _) => (1e-4, 0.2),
            (Branch::Ftd, SchemeKind::FsPrp, _) => (5e-4, 0.1),
        };
        let epochs = match (branch, kind, use_relative) {
            (Branch::Ctd, SchemeKind::StPrp, true) => 20,
            _ => 30,
        };
        TrainConfig {
            learning_rate,
            batch_size: match branch {
                Branch::Ctd => 512,
                Branch::Ftd => 256,
            },
            epochs,
            weight_decay: 5e-5,
            dropout,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Adam with L2 weight decay folded into the gradient.
pub struct Adam {
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Updates every tensor of `params` whose name satisfies `trainable`.
    pub fn step<P: Params>(&mut self, params: &mut P, grads: &P, trainable: &dyn Fn(&str) -> bool) {
        let mut g_list: Vec<&Mat> = Vec::new();
        grads.visit("", &mut |name, m| {
            if trainable(&name) {
                g_list.push(m);
            }
        });
        if self.first.is_empty() {
            self.first = g_list.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut idx = 0;
        params.visit_mut("", &mut |name, p| {
            if !trainable(&name) {
                return;
            }
            let g = g_list[idx].as_slice();
            let m = &mut self.first[idx];
            let v = &mut self.second[idx];
            for (((w, &gi), mi), vi) in p.as_mut_slice().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let grad = gi + self.weight_decay * *w;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * grad;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * grad * grad;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            idx += 1;
        });
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
}

impl std::fmt::Display for EpochLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "epoch {} loss {:.12e}", self.epoch, self.loss)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights from the epoch with the lowest training loss.
    pub weights: UetdWeights,
    pub log: Vec<EpochLog>,
    /// `epoch` of the kept log entry (1-based).
    pub best_epoch: usize,
}

impl TrainOutcome {
    pub fn log_text(&self) -> String {
        self.log.iter().map(|l| format!("{l}\n")).collect()
    }
}

fn stack(seqs: &[&Mat], n_tokens: usize, dim: usize) -> Result<Mat> {
    let mut data = Vec::with_capacity(seqs.len() * n_tokens * dim);
    for s in seqs {
        if s.shape() != (n_tokens, dim) {
            return Err(Error::Shape(format!(
                "sequence {:?} in a dataset of {}x{}",
                s.shape(),
                n_tokens,
                dim
            )));
        }
        data.extend_from_slice(s.as_slice());
    }
    Ok(Mat::from_vec(seqs.len() * n_tokens, dim, data))
}

fn gather(rows: &Mat, block: usize, indices: &[usize]) -> Mat {
    let cols = rows.cols();
    let mut data = Vec::with_capacity(indices.len() * block * cols);
    for &i in indices {
        data.extend_from_slice(&rows.as_slice()[i * block * cols..(i + 1) * block * cols]);
    }
    Mat::from_vec(indices.len() * block, cols, data)
}

struct Streams {
    shuffle: ChaCha8Rng,
    dropout: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let mut shuffle = ChaCha8Rng::seed_from_u64(seed);
        shuffle.set_stream(1);
        let mut dropout = ChaCha8Rng::seed_from_u64(seed);
        dropout.set_stream(2);
        Streams { shuffle, dropout }
    }
}

fn check_loss(loss: f64, epoch: usize, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(format!("loss {loss} at epoch {epoch}, step {step}")))
    }
}

/// Seeds fresh weights from `train.seed` and trains the encoder, CTD decoder,
/// embedding and projection to reconstruct their input.
pub fn train_ctd(dataset: &[TokenSequence], config: UetdConfig, train: &TrainConfig) -> Result<TrainOutcome> {
    let weights = UetdWeights::init(config, train.seed)?;
    train_ctd_from(dataset, weights, train)
}

pub fn train_ctd_from(dataset: &[TokenSequence], mut weights: UetdWeights, train: &TrainConfig) -> Result<TrainOutcome> {
    let train = *train;
    train.validate()?;
    if dataset.is_empty() {
        return Err(Error::Argument("empty CTD training set".into()));
    }
    let c = weights.config;
    let refs: Vec<&Mat> = dataset.iter().map(|s| &s.tokens).collect();
    let all = stack(&refs, c.n_tokens, c.token_dim)?;
    let trainable = |name: &str| !name.starts_with("ftd.");
    let mut adam = Adam::new(train.learning_rate, train.weight_decay);
    let mut streams = Streams::new(train.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = Vec::with_capacity(train.epochs);
    let mut best: Option<(f64, usize, UetdWeights)> = None;

    for epoch in 1..=train.epochs {
        order.shuffle(&mut streams.shuffle);
        let mut total = 0.0;
        for (step, idx) in order.chunks(train.batch_size).enumerate() {
            let batch = gather(&all, c.n_tokens, idx);
            let mut mode = Mode::Train {
                rng: &mut streams.dropout,
                dropout: train.dropout,
            };
            let (loss, grads) = ctd_loss_and_grads(&weights, &batch, &mut mode)?;
            check_loss(loss, epoch, step)?;
            total += loss * idx.len() as f64;
            adam.step(&mut weights, &grads, &trainable);
        }
        let loss = total / dataset.len() as f64;
        log::info!("ctd epoch {epoch} loss {loss:.6e}");
        log.push(EpochLog { epoch, loss });
        if best.as_ref().is_none_or(|(b, _, _)| loss < *b) {
            best = Some((loss, epoch, weights.clone()));
        }
    }
    let (_, best_epoch, weights) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        weights,
        log,
        best_epoch,
    })
}

/// Trains only the FTD decoder to map `encode(prev)` to `next`. Every other
/// parameter is copied unchanged from `pretrained`. The frozen encoder runs
/// in eval mode, so its memories are computed once up front.
pub fn train_ftd(
    pairs: &[(TokenSequence, TokenSequence)],
    pretrained: &UetdWeights,
    train: &TrainConfig,
) -> Result<TrainOutcome> {
    let train = *train;
    train.validate()?;
    if pairs.is_empty() {
        return Err(Error::Argument("empty FTD training set".into()));
    }
    let c = pretrained.config;
    let prev: Vec<&Mat> = pairs.iter().map(|(p, _)| &p.tokens).collect();
    let next: Vec<&Mat> = pairs.iter().map(|(_, n)| &n.tokens).collect();
    let prev = stack(&prev, c.n_tokens, c.token_dim)?;
    let targets = stack(&next, c.n_tokens, c.token_dim)?;
    let memory = encode_in_chunks(pretrained, &prev, 256)?;

    let mut weights = pretrained.clone();
    let trainable = |name: &str| name.starts_with("ftd.");
    let mut adam = Adam::new(train.learning_rate, train.weight_decay);
    let mut streams = Streams::new(train.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut log = Vec::with_capacity(train.epochs);
    let mut best: Option<(f64, usize, super::Decoder)> = None;

    for epoch in 1..=train.epochs {
        order.shuffle(&mut streams.shuffle);
        let mut total = 0.0;
        for (step, idx) in order.chunks(train.batch_size).enumerate() {
            let mem = gather(&memory, c.n_tokens, idx);
            let tgt = gather(&targets, c.n_tokens, idx);
            let mut mode = Mode::Train {
                rng: &mut streams.dropout,
                dropout: train.dropout,
            };
            let (loss, grads) = ftd_loss_and_grads(&weights, &mem, &tgt, &mut mode)?;
            check_loss(loss, epoch, step)?;
            total += loss * idx.len() as f64;
            adam.step(&mut weights, &grads, &trainable);
        }
        let loss = total / pairs.len() as f64;
        log::info!("ftd epoch {epoch} loss {loss:.6e}");
        log.push(EpochLog { epoch, loss });
        if best.as_ref().is_none_or(|(b, _, _)| loss < *b) {
            best = Some((loss, epoch, weights.ftd.clone()));
        }
    }
    let (_, best_epoch, ftd) = best.expect("at least one epoch");
    let mut out = pretrained.clone();
    out.ftd = ftd;
    Ok(TrainOutcome {
        weights: out,
        log,
        best_epoch,
    })
}

/// Eval-mode encoding of a token stack, `chunk` sequences at a time.
pub(crate) fn encode_in_chunks(w: &UetdWeights, tokens: &Mat, chunk: usize) -> Result<Mat> {
    let c = w.config;
    let n_seq = tokens.rows() / c.n_tokens;
    let mut out = Vec::with_capacity(n_seq * c.n_tokens * c.model_dim);
    let indices: Vec<usize> = (0..n_seq).collect();
    for idx in indices.chunks(chunk.max(1)) {
        let block = gather(tokens, c.n_tokens, idx);
        out.extend_from_slice(w.encode_batch(&block, &mut Mode::Eval)?.as_slice());
    }
    Ok(Mat::from_vec(n_seq * c.n_tokens, c.model_dim, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_presets() {
        let c = TrainConfig::reference(Branch::Ctd, SchemeKind::StPrp, true);
        assert_eq!((c.batch_size, c.epochs, c.learning_rate), (512, 20, 1e-5));
        assert_eq!((c.weight_decay, c.dropout), (5e-5, 0.1));
        let f = TrainConfig::reference(Branch::Ftd, SchemeKind::StPrp, true);
        assert_eq!((f.batch_size, f.epochs, f.learning_rate), (256, 30, 2e-3));
        let k = TrainConfig::reference(Branch::Ftd, SchemeKind::KsPrp, true);
        assert_eq!(k.dropout, 0.2);
    }

    #[test]
    fn bad_train_config_rejected() {
        let mut c = TrainConfig::reference(Branch::Ctd, SchemeKind::StPrp, true);
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = crate::model::Linear::zeros(1, 1);
        p.w.set(0, 0, 1.0);
        let mut g = crate::model::Linear::zeros(1, 1);
        g.w.set(0, 0, 2.0);
        g.b.set(0, 0, -3.0);
        let mut adam = Adam::new(0.1, 0.0);
        adam.step(&mut p, &g, &|_| true);
        // first Adam step moves each coordinate by lr against the gradient sign
        assert!((p.w.get(0, 0) - 0.9).abs() < 1e-9);
        assert!((p.b.get(0, 0) - 0.1).abs() < 1e-9);
    }
}
