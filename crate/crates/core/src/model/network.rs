use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{apply_mask, AttnCache, FfCache, LnCache};
use super::{Attention, Branch, FeedForward, LayerNorm, Linear, Mode, UetdConfig};
use crate::error::{Error, Result};
use crate::tensor::Mat;
use crate::tokenizer::{positional_encoding, TokenSequence};

/// Named traversal over every learnable tensor, in a fixed order.
pub trait Params {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Mat));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, m| n += m.len());
        n
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Params for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat)) {
        f(join(prefix, "w"), &self.w);
        f(join(prefix, "b"), &self.b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Mat)) {
        f(join(prefix, "w"), &mut self.w);
        f(join(prefix, "b"), &mut self.b);
    }
}

impl Params for LayerNorm {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Mat)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

impl Params for Attention {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat)) {
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
        self.o.visit(&join(prefix, "o"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Mat)) {
        self.q.visit_mut(&join(prefix, "q"), f);
        self.k.visit_mut(&join(prefix, "k"), f);
        self.v.visit_mut(&join(prefix, "v"), f);
        self.o.visit_mut(&join(prefix, "o"), f);
    }
}

impl Params for FeedForward {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat)) {
        self.up.visit(&join(prefix, "up"), f);
        self.down.visit(&join(prefix, "down"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Mat)) {
        self.up.visit_mut(&join(prefix, "up"), f);
        self.down.visit_mut(&join(prefix, "down"), f);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub ln_attn: LayerNorm,
    pub attn: Attention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl Params for EncoderLayer {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat)) {
        self.ln_attn.visit(&join(prefix, "ln_attn"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.ln_ff.visit(&join(prefix, "ln_ff"), f);
        self.ff.visit(&join(prefix, "ff"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Mat)) {
        self.ln_attn.visit_mut(&join(prefix, "ln_attn"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ln_ff.visit_mut(&join(prefix, "ln_ff"), f);
        self.ff.visit_mut(&join(prefix, "ff"), f);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderLayer {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub ln_cross: LayerNorm,
    pub cross_attn: Attention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl Params for DecoderLayer {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat)) {
        self.ln_self.visit(&join(prefix, "ln_self"), f);
        self.self_attn.visit(&join(prefix, "self_attn"), f);
        self.ln_cross.visit(&join(prefix, "ln_cross"), f);
        self.cross_attn.visit(&join(prefix, "cross_attn"), f);
        self.ln_ff.visit(&join(prefix, "ln_ff"), f);
        self.ff.visit(&join(prefix, "ff"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Mat)) {
        self.ln_self.visit_mut(&join(prefix, "ln_self"), f);
        self.self_attn.visit_mut(&join(prefix, "self_attn"), f);
        self.ln_cross.visit_mut(&join(prefix, "ln_cross"), f);
        self.cross_attn.visit_mut(&join(prefix, "cross_attn"), f);
        self.ln_ff.visit_mut(&join(prefix, "ln_ff"), f);
        self.ff.visit_mut(&join(prefix, "ff"), f);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
    pub ln_out: LayerNorm,
}

impl Params for Encoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layers.{i}")), f);
        }
        self.ln_out.visit(&join(prefix, "ln_out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Mat)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layers.{i}")), f);
        }
        self.ln_out.visit_mut(&join(prefix, "ln_out"), f);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    /// Learned input sequence, `n_tokens × model_dim`.
    pub queries: Mat,
    pub layers: Vec<DecoderLayer>,
    pub ln_out: LayerNorm,
}

impl Params for Decoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat)) {
        f(join(prefix, "queries"), &self.queries);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layers.{i}")), f);
        }
        self.ln_out.visit(&join(prefix, "ln_out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Mat)) {
        f(join(prefix, "queries"), &mut self.queries);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layers.{i}")), f);
        }
        self.ln_out.visit_mut(&join(prefix, "ln_out"), f);
    }
}

/// All learnable parameters. Top-level groups are named `embed`, `encoder`,
/// `ctd`, `ftd` and `proj`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UetdWeights {
    pub config: UetdConfig,
    pub embed: Linear,
    pub encoder: Encoder,
    pub ctd: Decoder,
    pub ftd: Decoder,
    pub proj: Linear,
}

impl Params for UetdWeights {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat)) {
        self.embed.visit(&join(prefix, "embed"), f);
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.ctd.visit(&join(prefix, "ctd"), f);
        self.ftd.visit(&join(prefix, "ftd"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Mat)) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.ctd.visit_mut(&join(prefix, "ctd"), f);
        self.ftd.visit_mut(&join(prefix, "ftd"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

fn decoder_zeros(c: &UetdConfig) -> Decoder {
    let d = c.model_dim;
    Decoder {
        queries: Mat::zeros(c.n_tokens, d),
        layers: (0..c.n_layers)
            .map(|_| DecoderLayer {
                ln_self: LayerNorm::zeros(d),
                self_attn: Attention::zeros(d),
                ln_cross: LayerNorm::zeros(d),
                cross_attn: Attention::zeros(d),
                ln_ff: LayerNorm::zeros(d),
                ff: FeedForward::zeros(d, c.ff_dim),
            })
            .collect(),
        ln_out: LayerNorm::zeros(d),
    }
}

// Forward caches.

struct EncLayerCache {
    ln_attn: LnCache,
    a: Mat,
    attn: AttnCache,
    attn_mask: Option<Mat>,
    ln_ff: LnCache,
    f_in: Mat,
    ff: FfCache,
    ff_mask: Option<Mat>,
}

pub(crate) struct EncCache {
    tokens: Mat,
    embed_mask: Option<Mat>,
    layers: Vec<EncLayerCache>,
    ln_out: LnCache,
}

struct DecLayerCache {
    ln_self: LnCache,
    s_in: Mat,
    self_attn: AttnCache,
    self_mask: Option<Mat>,
    ln_cross: LnCache,
    c_in: Mat,
    cross_attn: AttnCache,
    cross_mask: Option<Mat>,
    ln_ff: LnCache,
    f_in: Mat,
    ff: FfCache,
    ff_mask: Option<Mat>,
}

pub(crate) struct DecCache {
    layers: Vec<DecLayerCache>,
    ln_out: LnCache,
    hidden: Mat,
}

impl UetdWeights {
    /// Zero-valued weights of the right shapes; also the gradient container.
    pub fn zeros(config: UetdConfig) -> Self {
        let d = config.model_dim;
        UetdWeights {
            config,
            embed: Linear::zeros(config.token_dim, d),
            encoder: Encoder {
                layers: (0..config.n_layers)
                    .map(|_| EncoderLayer {
                        ln_attn: LayerNorm::zeros(d),
                        attn: Attention::zeros(d),
                        ln_ff: LayerNorm::zeros(d),
                        ff: FeedForward::zeros(d, config.ff_dim),
                    })
                    .collect(),
                ln_out: LayerNorm::zeros(d),
            },
            ctd: decoder_zeros(&config),
            ftd: decoder_zeros(&config),
            proj: Linear::zeros(d, config.token_dim),
        }
    }

    /// Seeded initialization: Glorot-uniform linear weights
    /// (`U(±sqrt(6 / (fan_in + fan_out)))`), query rows drawn the same way
    /// with `(n_tokens, model_dim)` as fans, zero biases, unit LayerNorm gains.
    pub fn init(config: UetdConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut w = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        w.visit_mut("", &mut |name, m| {
            if name.ends_with(".w") || name.ends_with(".queries") {
                let bound = (6.0 / (m.rows() + m.cols()) as f64).sqrt();
                for v in m.as_mut_slice() {
                    *v = rng.gen_range(-bound..bound);
                }
            } else if name.ends_with(".gamma") {
                m.fill(1.0);
            }
        });
        Ok(w)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config)
    }

    pub fn decoder(&self, branch: Branch) -> &Decoder {
        match branch {
            Branch::Ctd => &self.ctd,
            Branch::Ftd => &self.ftd,
        }
    }

    fn decoder_mut(&mut self, branch: Branch) -> &mut Decoder {
        match branch {
            Branch::Ctd => &mut self.ctd,
            Branch::Ftd => &mut self.ftd,
        }
    }

    fn check_tokens(&self, tokens: &Mat) -> Result<usize> {
        let c = &self.config;
        if tokens.cols() != c.token_dim || tokens.rows() == 0 || !tokens.rows().is_multiple_of(c.n_tokens) {
            return Err(Error::Shape(format!(
                "token block {:?} does not stack {}x{} sequences",
                tokens.shape(),
                c.n_tokens,
                c.token_dim
            )));
        }
        Ok(tokens.rows() / c.n_tokens)
    }

    fn check_memory(&self, memory: &Mat) -> Result<usize> {
        let c = &self.config;
        if memory.cols() != c.model_dim || memory.rows() == 0 || !memory.rows().is_multiple_of(c.n_tokens) {
            return Err(Error::Shape(format!(
                "memory block {:?} does not stack {}x{} sequences",
                memory.shape(),
                c.n_tokens,
                c.model_dim
            )));
        }
        Ok(memory.rows() / c.n_tokens)
    }

    /// Encodes a stack of `batch` token sequences (`batch · n_tokens` rows).
    pub fn encode_batch(&self, tokens: &Mat, mode: &mut Mode<'_>) -> Result<Mat> {
        let batch = self.check_tokens(tokens)?;
        Ok(self.encode_forward(tokens, batch, mode).0)
    }

    /// Decodes a stack of memories into generated token blocks.
    pub fn decode_batch(&self, memory: &Mat, branch: Branch, mode: &mut Mode<'_>) -> Result<Mat> {
        let batch = self.check_memory(memory)?;
        let (hidden, _) = self.decode_forward(memory, batch, branch, mode);
        Ok(self.proj.forward(&hidden))
    }

    pub fn encode(&self, seq: &TokenSequence, mode: &mut Mode<'_>) -> Result<Mat> {
        self.encode_batch(&seq.tokens, mode)
    }

    /// Non-autoregressive generation; the result carries `like`'s scheme and origin.
    pub fn decode(
        &self,
        memory: &Mat,
        branch: Branch,
        like: &TokenSequence,
        mode: &mut Mode<'_>,
    ) -> Result<TokenSequence> {
        Ok(TokenSequence {
            tokens: self.decode_batch(memory, branch, mode)?,
            scheme: like.scheme,
            origin: like.origin.clone(),
        })
    }

    /// Eval-mode `decode(encode(seq))`.
    pub fn generate(&self, seq: &TokenSequence, branch: Branch) -> Result<TokenSequence> {
        let memory = self.encode(seq, &mut Mode::Eval)?;
        self.decode(&memory, branch, seq, &mut Mode::Eval)
    }

    pub(crate) fn encode_forward(&self, tokens: &Mat, batch: usize, mode: &mut Mode<'_>) -> (Mat, EncCache) {
        let c = &self.config;
        let mut x = self.embed.forward(tokens);
        let pe = positional_encoding(c.n_tokens, c.model_dim).expect("model_dim validated even");
        for b in 0..batch {
            for t in 0..c.n_tokens {
                let row = x.row_mut(b * c.n_tokens + t);
                for (v, p) in row.iter_mut().zip(pe.row(t)) {
                    *v += p;
                }
            }
        }
        let embed_mask = mode.mask(x.rows(), x.cols());
        apply_mask(&mut x, &embed_mask);

        let mut layers = Vec::with_capacity(self.encoder.layers.len());
        for layer in &self.encoder.layers {
            let (a, ln_attn) = layer.ln_attn.forward(&x);
            let (mut s, attn) = layer.attn.forward(&a, &a, batch, c.n_heads);
            let attn_mask = mode.mask(s.rows(), s.cols());
            apply_mask(&mut s, &attn_mask);
            let mut x_mid = x;
            x_mid.add_assign(&s);
            let (f_in, ln_ff) = layer.ln_ff.forward(&x_mid);
            let (mut f, ff) = layer.ff.forward(&f_in, mode);
            let ff_mask = mode.mask(f.rows(), f.cols());
            apply_mask(&mut f, &ff_mask);
            let mut x_out = x_mid;
            x_out.add_assign(&f);
            x = x_out;
            layers.push(EncLayerCache {
                ln_attn,
                a,
                attn,
                attn_mask,
                ln_ff,
                f_in,
                ff,
                ff_mask,
            });
        }
        let (memory, ln_out) = self.encoder.ln_out.forward(&x);
        (
            memory,
            EncCache {
                tokens: tokens.clone(),
                embed_mask,
                layers,
                ln_out,
            },
        )
    }

    /// Returns the decoder's final hidden state (before the shared projection).
    pub(crate) fn decode_forward(
        &self,
        memory: &Mat,
        batch: usize,
        branch: Branch,
        mode: &mut Mode<'_>,
    ) -> (Mat, DecCache) {
        let c = &self.config;
        let dec = self.decoder(branch);
        let mut x = Mat::zeros(batch * c.n_tokens, c.model_dim);
        for b in 0..batch {
            for t in 0..c.n_tokens {
                x.row_mut(b * c.n_tokens + t).copy_from_slice(dec.queries.row(t));
            }
        }
        let mut layers = Vec::with_capacity(dec.layers.len());
        for layer in &dec.layers {
            let (s_in, ln_self) = layer.ln_self.forward(&x);
            let (mut s, self_attn) = layer.self_attn.forward(&s_in, &s_in, batch, c.n_heads);
            let self_mask = mode.mask(s.rows(), s.cols());
            apply_mask(&mut s, &self_mask);
            let mut x_s = x;
            x_s.add_assign(&s);

            let (c_in, ln_cross) = layer.ln_cross.forward(&x_s);
            let (mut ca, cross_attn) = layer.cross_attn.forward(&c_in, memory, batch, c.n_heads);
            let cross_mask = mode.mask(ca.rows(), ca.cols());
            apply_mask(&mut ca, &cross_mask);
            let mut x_c = x_s;
            x_c.add_assign(&ca);

            let (f_in, ln_ff) = layer.ln_ff.forward(&x_c);
            let (mut f, ff) = layer.ff.forward(&f_in, mode);
            let ff_mask = mode.mask(f.rows(), f.cols());
            apply_mask(&mut f, &ff_mask);
            let mut x_out = x_c;
            x_out.add_assign(&f);
            x = x_out;
            layers.push(DecLayerCache {
                ln_self,
                s_in,
                self_attn,
                self_mask,
                ln_cross,
                c_in,
                cross_attn,
                cross_mask,
                ln_ff,
                f_in,
                ff,
                ff_mask,
            });
        }
        let (hidden, ln_out) = dec.ln_out.forward(&x);
        (
            hidden.clone(),
            DecCache {
                layers,
                ln_out,
                hidden,
            },
        )
    }

    /// Backpropagates `d_out` (gradient w.r.t. projected outputs). Accumulates
    /// projection and decoder gradients into `g`; returns `dL/dmemory`.
    pub(crate) fn decode_backward(
        &self,
        cache: &DecCache,
        memory: &Mat,
        branch: Branch,
        d_out: &Mat,
        g: &mut UetdWeights,
    ) -> Mat {
        let c = self.config;
        let dec = self.decoder(branch);
        let d_hidden = self.proj.backward(&cache.hidden, d_out, &mut g.proj);
        let gd = g.decoder_mut(branch);
        let mut dx = dec.ln_out.backward(&cache.ln_out, &d_hidden, &mut gd.ln_out);
        let mut d_memory = Mat::zeros(memory.rows(), memory.cols());
        for (i, layer) in dec.layers.iter().enumerate().rev() {
            let lc = &cache.layers[i];
            let gl = &mut gd.layers[i];
            // x_out = x_c + drop(ff(ln_ff(x_c)))
            let mut df = dx.clone();
            apply_mask(&mut df, &lc.ff_mask);
            let d_fin = layer.ff.backward(&lc.ff, &lc.f_in, &df, &mut gl.ff);
            dx.add_assign(&layer.ln_ff.backward(&lc.ln_ff, &d_fin, &mut gl.ln_ff));
            // x_c = x_s + drop(cross(ln_cross(x_s), memory))
            let mut dca = dx.clone();
            apply_mask(&mut dca, &lc.cross_mask);
            let (d_cin, d_mem) =
                layer
                    .cross_attn
                    .backward(&lc.cross_attn, &lc.c_in, memory, &dca, c.n_heads, &mut gl.cross_attn);
            d_memory.add_assign(&d_mem);
            dx.add_assign(&layer.ln_cross.backward(&lc.ln_cross, &d_cin, &mut gl.ln_cross));
            // x_s = x + drop(self(ln_self(x)))
            let mut ds = dx.clone();
            apply_mask(&mut ds, &lc.self_mask);
            let (d_q, d_kv) =
                layer
                    .self_attn
                    .backward(&lc.self_attn, &lc.s_in, &lc.s_in, &ds, c.n_heads, &mut gl.self_attn);
            let mut d_sin = d_q;
            d_sin.add_assign(&d_kv);
            dx.add_assign(&layer.ln_self.backward(&lc.ln_self, &d_sin, &mut gl.ln_self));
        }
        // queries are tiled across the batch
        let n = c.n_tokens;
        let gq = gd.queries.as_mut_slice();
        for r in 0..dx.rows() {
            let t = r % n;
            for (acc, v) in gq[t * c.model_dim..(t + 1) * c.model_dim].iter_mut().zip(dx.row(r)) {
                *acc += v;
            }
        }
        d_memory
    }

    /// Backpropagates `d_memory` through the encoder and embedding into `g`.
    pub(crate) fn encode_backward(&self, cache: &EncCache, d_memory: &Mat, g: &mut UetdWeights) {
        let c = self.config;
        let mut dx = self
            .encoder
            .ln_out
            .backward(&cache.ln_out, d_memory, &mut g.encoder.ln_out);
        for (i, layer) in self.encoder.layers.iter().enumerate().rev() {
            let lc = &cache.layers[i];
            let gl = &mut g.encoder.layers[i];
            let mut df = dx.clone();
            apply_mask(&mut df, &lc.ff_mask);
            let d_fin = layer.ff.backward(&lc.ff, &lc.f_in, &df, &mut gl.ff);
            dx.add_assign(&layer.ln_ff.backward(&lc.ln_ff, &d_fin, &mut gl.ln_ff));
            let mut ds = dx.clone();
            apply_mask(&mut ds, &lc.attn_mask);
            let (d_q, d_kv) = layer
                .attn
                .backward(&lc.attn, &lc.a, &lc.a, &ds, c.n_heads, &mut gl.attn);
            let mut d_a = d_q;
            d_a.add_assign(&d_kv);
            dx.add_assign(&layer.ln_attn.backward(&lc.ln_attn, &d_a, &mut gl.ln_attn));
        }
        apply_mask(&mut dx, &cache.embed_mask);
        self.embed.backward_params(&cache.tokens, &dx, &mut g.embed);
    }
}

/// Mean squared error over all elements.
pub fn mse_loss(generated: &Mat, target: &Mat) -> Result<f64> {
    if generated.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "generated {:?} vs target {:?}",
            generated.shape(),
            target.shape()
        )));
    }
    if generated.is_empty() {
        return Err(Error::Argument("mse of empty sequences".into()));
    }
    let sum: f64 = generated
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / generated.len() as f64)
}

/// `d mse / d generated`.
pub fn mse_grad(generated: &Mat, target: &Mat) -> Mat {
    let scale = 2.0 / generated.len() as f64;
    let data = generated
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(a, b)| scale * (a - b))
        .collect();
    Mat::from_vec(generated.rows(), generated.cols(), data)
}

/// Reconstruction loss `mse(proj(ctd(encode(x))), x)` and its gradient for
/// every parameter except the FTD decoder.
pub fn ctd_loss_and_grads(w: &UetdWeights, tokens: &Mat, mode: &mut Mode<'_>) -> Result<(f64, UetdWeights)> {
    let batch = w.check_tokens(tokens)?;
    let (memory, enc_cache) = w.encode_forward(tokens, batch, mode);
    let (hidden, dec_cache) = w.decode_forward(&memory, batch, Branch::Ctd, mode);
    let out = w.proj.forward(&hidden);
    let loss = mse_loss(&out, tokens)?;
    let mut g = w.zeros_like();
    let d_memory = w.decode_backward(&dec_cache, &memory, Branch::Ctd, &mse_grad(&out, tokens), &mut g);
    w.encode_backward(&enc_cache, &d_memory, &mut g);
    Ok((loss, g))
}

/// Prediction loss `mse(proj(ftd(memory)), target)` for a fixed (frozen-encoder)
/// memory. Only the FTD group of the returned gradient is populated, plus the
/// projection's, which frozen training ignores.
pub fn ftd_loss_and_grads(
    w: &UetdWeights,
    memory: &Mat,
    target: &Mat,
    mode: &mut Mode<'_>,
) -> Result<(f64, UetdWeights)> {
    let batch = w.check_memory(memory)?;
    w.check_tokens(target)?;
    if target.rows() != memory.rows() {
        return Err(Error::Shape("target and memory batch sizes differ".into()));
    }
    let (hidden, dec_cache) = w.decode_forward(memory, batch, Branch::Ftd, mode);
    let out = w.proj.forward(&hidden);
    let loss = mse_loss(&out, target)?;
    let mut g = w.zeros_like();
    w.decode_backward(&dec_cache, memory, Branch::Ftd, &mse_grad(&out, target), &mut g);
    Ok((loss, g))
}
