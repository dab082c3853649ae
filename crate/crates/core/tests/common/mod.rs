//! Independent oracles shared by integration tests and the acceptance suite.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skelvad::model::{ctd_loss_and_grads, ftd_loss_and_grads, mse_loss, Mode, Params, UetdWeights};
use skelvad::tensor::Mat;
use skelvad::tokenizer::{SchemeKind, TokenizationScheme};
use skelvad::{Branch, PoseWindow, UetdConfig};

pub fn tiny_config() -> UetdConfig {
    UetdConfig {
        n_heads: 2,
        n_layers: 1,
        ff_dim: 16,
        model_dim: 8,
        token_dim: 4,
        n_tokens: 4,
        dropout: 0.0,
    }
}

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
}

/// Initialized weights with every tensor (biases, gains, queries) jittered
/// so no gradient is trivially zero.
pub fn jittered_weights(config: UetdConfig, seed: u64) -> UetdWeights {
    let mut w = UetdWeights::init(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdead_beef);
    w.visit_mut("", &mut |_, m| {
        for v in m.as_mut_slice() {
            *v += rng.gen_range(-0.2..0.2);
        }
    });
    w
}

#[derive(Debug)]
pub struct GradMismatch {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Central differences over every scalar of every tensor in `groups`,
/// compared against `analytic` at `|a - n| <= atol + rtol * max(|a|, |n|)`.
pub fn finite_difference_check(
    weights: &UetdWeights,
    analytic: &UetdWeights,
    groups: &[&str],
    loss: &dyn Fn(&UetdWeights) -> f64,
    eps: f64,
    rtol: f64,
    atol: f64,
) -> (usize, Vec<GradMismatch>) {
    let mut names = Vec::new();
    let mut grads = Vec::new();
    analytic.visit("", &mut |name, m| {
        if groups.iter().any(|g| name.starts_with(g)) {
            names.push(name);
            grads.push(m.as_slice().to_vec());
        }
    });
    let mut checked = 0;
    let mut bad = Vec::new();
    for (name, grad) in names.iter().zip(&grads) {
        for (i, &a) in grad.iter().enumerate() {
            let eval = |delta: f64| {
                let mut w = weights.clone();
                w.visit_mut("", &mut |n, m| {
                    if &n == name {
                        m.as_mut_slice()[i] += delta;
                    }
                });
                loss(&w)
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            checked += 1;
            if (a - numeric).abs() > atol + rtol * a.abs().max(numeric.abs()) {
                bad.push(GradMismatch {
                    name: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    (checked, bad)
}

pub fn ctd_eval_loss(w: &UetdWeights, tokens: &Mat) -> f64 {
    let mem = w.encode_batch(tokens, &mut Mode::Eval).unwrap();
    let out = w.decode_batch(&mem, Branch::Ctd, &mut Mode::Eval).unwrap();
    mse_loss(&out, tokens).unwrap()
}

pub fn ftd_eval_loss(w: &UetdWeights, prev: &Mat, next: &Mat) -> f64 {
    let mem = w.encode_batch(prev, &mut Mode::Eval).unwrap();
    let out = w.decode_batch(&mem, Branch::Ftd, &mut Mode::Eval).unwrap();
    mse_loss(&out, next).unwrap()
}

/// Runs both branch checks on the tiny config; returns (scalars checked, mismatches).
pub fn tiny_gradient_check(seed: u64) -> (usize, Vec<GradMismatch>) {
    let cfg = tiny_config();
    let w = jittered_weights(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_mat(&mut rng, 2 * cfg.n_tokens, cfg.token_dim, 1.0);
    let y = random_mat(&mut rng, 2 * cfg.n_tokens, cfg.token_dim, 1.0);

    let (_, g_ctd) = ctd_loss_and_grads(&w, &x, &mut Mode::Eval).unwrap();
    let (n1, mut bad) = finite_difference_check(
        &w,
        &g_ctd,
        &["embed.", "encoder.", "ctd.", "proj."],
        &|v| ctd_eval_loss(v, &x),
        1e-6,
        1e-3,
        1e-6,
    );
    let mem = w.encode_batch(&x, &mut Mode::Eval).unwrap();
    let (_, g_ftd) = ftd_loss_and_grads(&w, &mem, &y, &mut Mode::Eval).unwrap();
    let (n2, bad2) = finite_difference_check(
        &w,
        &g_ftd,
        &["ftd."],
        &|v| ftd_eval_loss(v, &x, &y),
        1e-6,
        1e-3,
        1e-6,
    );
    bad.extend(bad2);
    (n1 + n2, bad)
}

/// Slot of a window scalar inside a scheme's token matrix, by closed form.
/// `channel` 0 = absolute, 1 = relative.
pub fn oracle_slot(
    kind: SchemeKind,
    use_relative: bool,
    beta: usize,
    k: usize,
    frame: usize,
    kp: usize,
    axis: usize,
    channel: usize,
) -> Option<(usize, usize)> {
    if channel == 1 && !use_relative {
        return None;
    }
    let slot = match kind {
        SchemeKind::StPrp => {
            let token = axis * (beta / 2) + frame / 2;
            let offset = channel * 2 * k + (frame % 2) * k + kp;
            (token, offset)
        }
        SchemeKind::TPrp => (frame, channel * 2 * k + axis * k + kp),
        SchemeKind::KsPrp => (kp, channel * 2 * beta + axis * beta + frame),
        SchemeKind::FsPrp => (axis * k + kp, channel * beta + frame),
    };
    Some(slot)
}

/// Builds a token matrix by scattering every scalar to its oracle slot.
pub fn oracle_tokens(window: &PoseWindow, scheme: TokenizationScheme) -> Mat {
    let (n, dim) = scheme.token_shape(window.beta, window.keypoints);
    let mut m = Mat::filled(n, dim, f64::NAN);
    for frame in 0..window.beta {
        for kp in 0..window.keypoints {
            for axis in 0..2 {
                for ch in 0..2 {
                    if let Some((t, o)) = oracle_slot(
                        scheme.kind,
                        scheme.use_relative,
                        window.beta,
                        window.keypoints,
                        frame,
                        kp,
                        axis,
                        ch,
                    ) {
                        let v = if ch == 0 {
                            window.abs(frame, kp, axis)
                        } else {
                            window.rel(frame, kp, axis)
                        };
                        m.set(t, o, v);
                    }
                }
            }
        }
    }
    m
}

pub fn random_window(rng: &mut ChaCha8Rng, beta: usize, k: usize) -> PoseWindow {
    let abs = (0..beta * k * 2).map(|_| rng.gen_range(0.0..1.0)).collect();
    PoseWindow::from_absolute("rand", rng.gen_range(0..100), rng.gen_range(0..1000), beta, k, abs).unwrap()
}

/// Mann-Whitney statistic over all (anomalous, normal) pairs, ties counted half.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// EER by brute force: FPR/FNR counted from scratch at every distinct
/// threshold (plus +inf), crossing found by linear interpolation.
pub fn brute_force_eer(scores: &[f64], labels: &[u8]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    thresholds.insert(0, f64::INFINITY);
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    let rates: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let mut fp = 0.0;
            let mut tp = 0.0;
            for (s, l) in scores.iter().zip(labels) {
                if *s >= t {
                    if *l == 1 {
                        tp += 1.0;
                    } else {
                        fp += 1.0;
                    }
                }
            }
            (fp / neg, 1.0 - tp / pos)
        })
        .collect();
    for w in rates.windows(2) {
        let (f1, n1) = w[0];
        let (f2, n2) = w[1];
        let d1 = f1 - n1;
        let d2 = f2 - n2;
        if d1 == 0.0 {
            return f1;
        }
        if d1 < 0.0 && d2 >= 0.0 {
            let lambda = -d1 / (d2 - d1);
            return f1 + lambda * (f2 - f1);
        }
    }
    let (f, n) = *rates.last().unwrap();
    (f + n) / 2.0
}
