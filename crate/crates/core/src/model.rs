//! Pre-norm transformer encoder-decoder.
//!
//! The encoder reads the source tokens; the decoder reads the target prefix
//! under a causal mask and attends to the encoder states. Each decoder row
//! `t` is the log-distribution of the token that follows `prefix[..=t]`.
//!
//! Source and target share one token embedding table. Positions use learned
//! embeddings. The output projection is a separate matrix.

use rand::distr::{Distribution, Uniform};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{TokenId, BOS, MAX_SOURCE_TOKENS, PAD};
use crate::error::{Error, Result};
use crate::tensor::{dropout_mask, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub ff_size: usize,
    pub num_heads: usize,
    pub dropout_rate: f64,
    pub vocab_size: usize,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Two layers, 64 hidden, 128 feed-forward, 4 heads.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            num_layers: 2,
            hidden_size: 64,
            ff_size: 128,
            num_heads: 4,
            dropout_rate: 0.1,
            vocab_size,
            max_src_len: 64,
            max_tgt_len: 16,
            seed: 0,
        }
    }

    /// Six layers, 768 hidden, 2048 feed-forward.
    pub fn full_scale(vocab_size: usize) -> Self {
        ModelConfig {
            num_layers: 6,
            hidden_size: 768,
            ff_size: 2048,
            num_heads: 8,
            dropout_rate: 0.1,
            vocab_size,
            max_src_len: MAX_SOURCE_TOKENS,
            max_tgt_len: 256,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden_size", self.hidden_size),
            ("ff_size", self.ff_size),
            ("num_heads", self.num_heads),
            ("vocab_size", self.vocab_size),
            ("max_src_len", self.max_src_len),
            ("max_tgt_len", self.max_tgt_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::config(
                "num_heads",
                format!(
                    "hidden_size {} is not divisible by {}",
                    self.hidden_size, self.num_heads
                ),
            ));
        }
        if self.max_src_len > MAX_SOURCE_TOKENS {
            return Err(Error::config(
                "max_src_len",
                format!("exceeds the {MAX_SOURCE_TOKENS}-token limit"),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Equal in everything except the seed.
    pub fn same_architecture(&self, other: &ModelConfig) -> bool {
        ModelConfig {
            seed: 0,
            ..self.clone()
        } == ModelConfig {
            seed: 0,
            ..other.clone()
        }
    }

    fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Uniform,
    Zeros,
    Ones,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Clone, Copy, Debug)]
struct FeedForward {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    norm1: Norm,
    attn: Attention,
    norm2: Norm,
    ffn: FeedForward,
}

#[derive(Clone, Copy, Debug)]
struct DecoderLayer {
    norm1: Norm,
    self_attn: Attention,
    norm2: Norm,
    cross_attn: Attention,
    norm3: Norm,
    ffn: FeedForward,
}

/// Where each named parameter lives in the flat parameter list.
#[derive(Clone, Debug)]
struct Layout {
    tok_emb: usize,
    src_pos: usize,
    tgt_pos: usize,
    encoder: Vec<EncoderLayer>,
    enc_norm: Norm,
    decoder: Vec<DecoderLayer>,
    dec_norm: Norm,
    out_w: usize,
    out_b: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

struct LayoutBuilder {
    specs: Vec<ParamSpec>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            gain: self.add(format!("{prefix}.gain"), vec![d], Init::Ones),
            bias: self.add(format!("{prefix}.bias"), vec![d], Init::Zeros),
        }
    }

    fn attention(&mut self, prefix: &str, d: usize) -> Attention {
        let mut proj = |n: &str| {
            (
                self.add(format!("{prefix}.w{n}"), vec![d, d], Init::Uniform),
                self.add(format!("{prefix}.b{n}"), vec![d], Init::Zeros),
            )
        };
        let (wq, bq) = proj("q");
        let (wk, bk) = proj("k");
        let (wv, bv) = proj("v");
        let (wo, bo) = proj("o");
        Attention {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, ff: usize) -> FeedForward {
        FeedForward {
            w1: self.add(format!("{prefix}.w1"), vec![d, ff], Init::Uniform),
            b1: self.add(format!("{prefix}.b1"), vec![ff], Init::Zeros),
            w2: self.add(format!("{prefix}.w2"), vec![ff, d], Init::Uniform),
            b2: self.add(format!("{prefix}.b2"), vec![d], Init::Zeros),
        }
    }
}

impl Layout {
    fn new(cfg: &ModelConfig) -> (Layout, Vec<ParamSpec>) {
        let d = cfg.hidden_size;
        let mut b = LayoutBuilder { specs: Vec::new() };
        let tok_emb = b.add(
            "embed.tokens".into(),
            vec![cfg.vocab_size, d],
            Init::Uniform,
        );
        let src_pos = b.add(
            "embed.src_positions".into(),
            vec![cfg.max_src_len, d],
            Init::Uniform,
        );
        let tgt_pos = b.add(
            "embed.tgt_positions".into(),
            vec![cfg.max_tgt_len, d],
            Init::Uniform,
        );
        let encoder = (0..cfg.num_layers)
            .map(|l| {
                let p = format!("encoder.{l}");
                EncoderLayer {
                    norm1: b.norm(&format!("{p}.norm1"), d),
                    attn: b.attention(&format!("{p}.self_attn"), d),
                    norm2: b.norm(&format!("{p}.norm2"), d),
                    ffn: b.ffn(&format!("{p}.ffn"), d, cfg.ff_size),
                }
            })
            .collect();
        let enc_norm = b.norm("encoder.final_norm", d);
        let decoder = (0..cfg.num_layers)
            .map(|l| {
                let p = format!("decoder.{l}");
                DecoderLayer {
                    norm1: b.norm(&format!("{p}.norm1"), d),
                    self_attn: b.attention(&format!("{p}.self_attn"), d),
                    norm2: b.norm(&format!("{p}.norm2"), d),
                    cross_attn: b.attention(&format!("{p}.cross_attn"), d),
                    norm3: b.norm(&format!("{p}.norm3"), d),
                    ffn: b.ffn(&format!("{p}.ffn"), d, cfg.ff_size),
                }
            })
            .collect();
        let dec_norm = b.norm("decoder.final_norm", d);
        let out_w = b.add(
            "output.weight".into(),
            vec![d, cfg.vocab_size],
            Init::Uniform,
        );
        let out_b = b.add("output.bias".into(), vec![cfg.vocab_size], Init::Zeros);
        let layout = Layout {
            tok_emb,
            src_pos,
            tgt_pos,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
            out_w,
            out_b,
        };
        (layout, b.specs)
    }
}

/// All learnable weights of one model, in a fixed named order.
#[derive(Clone, Debug)]
pub struct TransformerParams {
    config: ModelConfig,
    layout: Layout,
    specs: Vec<ParamSpec>,
    tensors: Vec<Tensor>,
}

impl PartialEq for TransformerParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.tensors == other.tensors
    }
}

impl TransformerParams {
    /// Reassembles parameters from tensors listed in manifest order.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        cfg.validate()?;
        let (layout, specs) = Layout::new(cfg);
        if tensors.len() != specs.len() {
            return Err(Error::ConfigMismatch(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if s.shape != t.shape() {
                return Err(Error::ConfigMismatch(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
        }
        Ok(TransformerParams {
            config: cfg.clone(),
            layout,
            specs,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.specs.iter().map(|s| s.name.as_str())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// The shared token embedding table, `[vocab_size × hidden_size]`.
    pub fn token_embeddings(&self) -> &Tensor {
        &self.tensors[self.layout.tok_emb]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.specs
            .iter()
            .position(|s| s.name == name)
            .map(|i| &self.tensors[i])
    }

    /// `(name, shape)` for every parameter; equal manifests mean equal
    /// architectures.
    pub fn shape_manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.specs
            .iter()
            .map(|s| (s.name.clone(), s.shape.clone()))
            .collect()
    }

    fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if !self.config.same_architecture(cfg) {
            return Err(Error::ConfigMismatch(
                "parameters were built for a different architecture".into(),
            ));
        }
        Ok(())
    }
}

/// Weights are uniform in `±1/√hidden_size`, biases zero and layer-norm
/// gains one. Deterministic in `cfg.seed`.
pub fn init_params(cfg: &ModelConfig) -> Result<TransformerParams> {
    cfg.validate()?;
    let (layout, specs) = Layout::new(cfg);
    let bound = 1.0 / (cfg.hidden_size as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tensors = specs
        .iter()
        .map(|s| {
            let n = s.shape.iter().product();
            let values = match s.init {
                Init::Uniform => (0..n).map(|_| dist.sample(&mut rng)).collect(),
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            Tensor::new(s.shape.clone(), values)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TransformerParams {
        config: cfg.clone(),
        layout,
        specs,
        tensors,
    })
}

/// Dropout masks sampled on demand from `rng` at rate `rate`.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut dyn RngCore,
}

impl Dropout<'_> {
    fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.rate == 0.0 {
            return Ok(x);
        }
        let mask = dropout_mask(tape.shape(x), self.rate, &mut *self.rng);
        tape.dropout(x, mask)
    }
}

/// Stochastic parts of a forward pass. The default is evaluation mode.
#[derive(Default)]
pub struct ForwardNoise<'a> {
    pub dropout: Option<Dropout<'a>>,
    /// Multiplies the source token embeddings elementwise,
    /// `[src_len × hidden_size]`.
    pub src_embedding_scale: Option<&'a Tensor>,
}

impl ForwardNoise<'_> {
    pub fn eval() -> Self {
        ForwardNoise::default()
    }

    fn drop(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self.dropout.as_mut() {
            Some(d) => d.apply(tape, x),
            None => Ok(x),
        }
    }
}

/// Places every parameter on `tape`, as trainable leaves or constants.
pub fn bind<'a>(tape: &mut Tape<'a>, params: &'a TransformerParams, trainable: bool) -> Vec<Var> {
    params
        .tensors
        .iter()
        .map(|t| tape.leaf_ref(t, trainable))
        .collect()
}

fn check_tokens(tokens: &[TokenId], cfg: &ModelConfig) -> Result<Vec<usize>> {
    tokens
        .iter()
        .map(|&t| {
            if (t as usize) < cfg.vocab_size {
                Ok(t as usize)
            } else {
                Err(Error::TokenOutOfRange {
                    id: t,
                    vocab_size: cfg.vocab_size,
                })
            }
        })
        .collect()
}

fn check_source(src: &[TokenId], cfg: &ModelConfig) -> Result<Vec<usize>> {
    if src.is_empty() {
        return Err(Error::InvalidInput("empty source".into()));
    }
    if src.len() > cfg.max_src_len {
        return Err(Error::InvalidInput(format!(
            "source of {} tokens exceeds max_src_len {}",
            src.len(),
            cfg.max_src_len
        )));
    }
    check_tokens(src, cfg)
}

fn check_prefix(prefix: &[TokenId], cfg: &ModelConfig) -> Result<Vec<usize>> {
    if prefix.first() != Some(&BOS) {
        return Err(Error::InvalidInput(
            "target prefix must start with BOS".into(),
        ));
    }
    if prefix.len() > cfg.max_tgt_len {
        return Err(Error::InvalidInput(format!(
            "target prefix of {} tokens exceeds max_tgt_len {}",
            prefix.len(),
            cfg.max_tgt_len
        )));
    }
    check_tokens(prefix, cfg)
}

fn layer_norm(tape: &mut Tape, vars: &[Var], n: Norm, x: Var) -> Result<Var> {
    tape.layer_norm(x, vars[n.gain], vars[n.bias])
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Multi-head attention of `queries` over `keys_values`. `keep(i, j)` says
/// whether query `i` may see key `j`.
fn attention(
    tape: &mut Tape,
    vars: &[Var],
    a: Attention,
    cfg: &ModelConfig,
    queries: Var,
    keys_values: Var,
    keep: impl Fn(usize, usize) -> bool,
) -> Result<Var> {
    let n = tape.shape(queries)[0];
    let m = tape.shape(keys_values)[0];
    let q = linear(tape, queries, vars[a.wq], vars[a.bq])?;
    let k = linear(tape, keys_values, vars[a.wk], vars[a.bk])?;
    let v = linear(tape, keys_values, vars[a.wv], vars[a.bv])?;
    let mask: Vec<bool> = (0..n)
        .flat_map(|i| (0..m).map(move |j| (i, j)))
        .map(|(i, j)| keep(i, j))
        .collect();
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let qh = tape.narrow(q, 1, h * dh, dh)?;
        let kh = tape.narrow(k, 1, h * dh, dh)?;
        let vh = tape.narrow(v, 1, h * dh, dh)?;
        let scores = tape.matmul_t(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let weights = tape.masked_softmax(scores, 1, mask.clone())?;
        heads.push(tape.matmul(weights, vh)?);
    }
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat(&heads, 1)?
    };
    linear(tape, joined, vars[a.wo], vars[a.bo])
}

fn feed_forward(tape: &mut Tape, vars: &[Var], f: FeedForward, x: Var) -> Result<Var> {
    let h = linear(tape, x, vars[f.w1], vars[f.b1])?;
    let h = tape.relu(h)?;
    linear(tape, h, vars[f.w2], vars[f.b2])
}

/// Encoder states `[src_len × hidden_size]` on `tape`. PAD source tokens are
/// masked out as attention keys.
pub fn encode_on(
    tape: &mut Tape,
    params: &TransformerParams,
    vars: &[Var],
    src: &[TokenId],
    noise: &mut ForwardNoise,
) -> Result<Var> {
    let cfg = &params.config;
    let ids = check_source(src, cfg)?;
    let lay = &params.layout;
    let mut x = tape.embedding(vars[lay.tok_emb], &ids)?;
    if let Some(scale) = noise.src_embedding_scale {
        if scale.shape() != tape.shape(x) {
            return Err(Error::shape(
                "embedding noise",
                format!("{:?} vs {:?}", scale.shape(), tape.shape(x)),
            ));
        }
        let s = tape.constant(scale.clone());
        x = tape.mul(x, s)?;
    }
    let positions: Vec<usize> = (0..ids.len()).collect();
    let pos = tape.embedding(vars[lay.src_pos], &positions)?;
    x = tape.add(x, pos)?;
    x = noise.drop(tape, x)?;
    let key_kept: Vec<bool> = src.iter().map(|&t| t != PAD).collect();
    for layer in &lay.encoder {
        let h = layer_norm(tape, vars, layer.norm1, x)?;
        let a = attention(tape, vars, layer.attn, cfg, h, h, |_, j| key_kept[j])?;
        let a = noise.drop(tape, a)?;
        x = tape.add(x, a)?;
        let h = layer_norm(tape, vars, layer.norm2, x)?;
        let f = feed_forward(tape, vars, layer.ffn, h)?;
        let f = noise.drop(tape, f)?;
        x = tape.add(x, f)?;
    }
    layer_norm(tape, vars, lay.enc_norm, x)
}

/// Log-probabilities `[prefix_len × vocab_size]` given encoder states.
pub fn decode_on(
    tape: &mut Tape,
    params: &TransformerParams,
    vars: &[Var],
    src: &[TokenId],
    memory: Var,
    prefix: &[TokenId],
    noise: &mut ForwardNoise,
) -> Result<Var> {
    let cfg = &params.config;
    let ids = check_prefix(prefix, cfg)?;
    if tape.shape(memory) != [src.len(), cfg.hidden_size] {
        return Err(Error::shape(
            "decode",
            format!(
                "memory {:?} does not match a source of {} tokens",
                tape.shape(memory),
                src.len()
            ),
        ));
    }
    let lay = &params.layout;
    let mut y = tape.embedding(vars[lay.tok_emb], &ids)?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let pos = tape.embedding(vars[lay.tgt_pos], &positions)?;
    y = tape.add(y, pos)?;
    y = noise.drop(tape, y)?;
    let key_kept: Vec<bool> = src.iter().map(|&t| t != PAD).collect();
    for layer in &lay.decoder {
        let h = layer_norm(tape, vars, layer.norm1, y)?;
        let a = attention(tape, vars, layer.self_attn, cfg, h, h, |i, j| j <= i)?;
        let a = noise.drop(tape, a)?;
        y = tape.add(y, a)?;
        let h = layer_norm(tape, vars, layer.norm2, y)?;
        let c = attention(tape, vars, layer.cross_attn, cfg, h, memory, |_, j| {
            key_kept[j]
        })?;
        let c = noise.drop(tape, c)?;
        y = tape.add(y, c)?;
        let h = layer_norm(tape, vars, layer.norm3, y)?;
        let f = feed_forward(tape, vars, layer.ffn, h)?;
        let f = noise.drop(tape, f)?;
        y = tape.add(y, f)?;
    }
    let h = layer_norm(tape, vars, lay.dec_norm, y)?;
    let logits = linear(tape, h, vars[lay.out_w], vars[lay.out_b])?;
    tape.log_softmax(logits, 1)
}

/// Full encoder-decoder pass on `tape`.
pub fn forward_on(
    tape: &mut Tape,
    params: &TransformerParams,
    vars: &[Var],
    src: &[TokenId],
    prefix: &[TokenId],
    noise: &mut ForwardNoise,
) -> Result<Var> {
    let memory = encode_on(tape, params, vars, src, noise)?;
    decode_on(tape, params, vars, src, memory, prefix, noise)
}

/// Next-token log-probabilities for every prefix position.
pub fn forward(
    params: &TransformerParams,
    cfg: &ModelConfig,
    src: &[TokenId],
    prefix: &[TokenId],
    mut noise: ForwardNoise,
) -> Result<Tensor> {
    params.check(cfg)?;
    let mut tape = Tape::new();
    let vars = bind(&mut tape, params, false);
    let out = forward_on(&mut tape, params, &vars, src, prefix, &mut noise)?;
    Ok(tape.value(out).clone())
}

/// Evaluation-mode encoder states `[src_len × hidden_size]`.
pub fn encode(params: &TransformerParams, cfg: &ModelConfig, src: &[TokenId]) -> Result<Tensor> {
    params.check(cfg)?;
    let mut tape = Tape::new();
    let vars = bind(&mut tape, params, false);
    let out = encode_on(&mut tape, params, &vars, src, &mut ForwardNoise::eval())?;
    Ok(tape.value(out).clone())
}

/// Evaluation-mode decoder pass over precomputed encoder states.
pub fn decode(
    params: &TransformerParams,
    cfg: &ModelConfig,
    src: &[TokenId],
    memory: &Tensor,
    prefix: &[TokenId],
) -> Result<Tensor> {
    params.check(cfg)?;
    let mut tape = Tape::new();
    let vars = bind(&mut tape, params, false);
    let mem = tape.constant(memory.clone());
    let out = decode_on(
        &mut tape,
        params,
        &vars,
        src,
        mem,
        prefix,
        &mut ForwardNoise::eval(),
    )?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{EOS, PAD};

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            hidden_size: 8,
            ff_size: 16,
            num_heads: 2,
            dropout_rate: 0.1,
            vocab_size: 16,
            max_src_len: 12,
            max_tgt_len: 8,
            seed: 11,
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = tiny();
        assert_eq!(init_params(&cfg).unwrap(), init_params(&cfg).unwrap());
        let other = ModelConfig {
            seed: 12,
            ..cfg.clone()
        };
        assert_ne!(init_params(&cfg).unwrap(), init_params(&other).unwrap());
    }

    #[test]
    fn init_std_matches_uniform_closed_form() {
        let cfg = ModelConfig::desk(200);
        let p = init_params(&cfg).unwrap();
        let w = p.by_name("output.weight").unwrap().values();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        let expected = (1.0 / 64f64.sqrt()) / 3f64.sqrt();
        assert!(
            (std - expected).abs() / expected < 0.2,
            "std {std} vs {expected}"
        );
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig {
            num_heads: 3,
            ..tiny()
        };
        assert!(matches!(
            init_params(&bad),
            Err(Error::InvalidConfig { .. })
        ));
        let bad = ModelConfig {
            dropout_rate: 1.0,
            ..tiny()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            max_src_len: 513,
            ..tiny()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn forward_shape_and_normalization() {
        let cfg = tiny();
        let p = init_params(&cfg).unwrap();
        let out = forward(&p, &cfg, &[4, 5, 6, 7], &[BOS, 8, 9], ForwardNoise::eval()).unwrap();
        assert_eq!(out.shape(), &[3, 16]);
        for r in 0..3 {
            let s: f64 = out.row(r).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_input_errors() {
        let cfg = tiny();
        let p = init_params(&cfg).unwrap();
        assert!(forward(&p, &cfg, &[], &[BOS], ForwardNoise::eval()).is_err());
        assert!(matches!(
            forward(&p, &cfg, &[16], &[BOS], ForwardNoise::eval()),
            Err(Error::TokenOutOfRange { id: 16, .. })
        ));
        assert!(forward(&p, &cfg, &[4], &[4], ForwardNoise::eval()).is_err());
        assert!(forward(&p, &cfg, &[4], &[BOS; 9], ForwardNoise::eval()).is_err());
        assert!(forward(&p, &cfg, &[4; 13], &[BOS], ForwardNoise::eval()).is_err());
        let other = ModelConfig {
            hidden_size: 16,
            ..cfg.clone()
        };
        assert!(matches!(
            forward(&p, &other, &[4], &[BOS], ForwardNoise::eval()),
            Err(Error::ConfigMismatch(_))
        ));
    }

    #[test]
    fn causal_rows_ignore_future_tokens() {
        let cfg = tiny();
        let p = init_params(&cfg).unwrap();
        let src = [4, 5, 6];
        let a = forward(&p, &cfg, &src, &[BOS, 7, 8], ForwardNoise::eval()).unwrap();
        let b = forward(&p, &cfg, &src, &[BOS, 7, 8, 9, EOS], ForwardNoise::eval()).unwrap();
        let c = forward(&p, &cfg, &src, &[BOS, 7, 12], ForwardNoise::eval()).unwrap();
        for r in 0..3 {
            assert_eq!(a.row(r), b.row(r));
        }
        assert_eq!(a.row(0), c.row(0));
        assert_eq!(a.row(1), c.row(1));
        assert_ne!(a.row(2), c.row(2));
    }

    #[test]
    fn cached_encoder_matches_monolithic_forward() {
        let cfg = tiny();
        let p = init_params(&cfg).unwrap();
        let src = [4, 9, 5, 6, 11];
        let memory = encode(&p, &cfg, &src).unwrap();
        assert_eq!(memory.shape(), &[5, 8]);
        let prefix = [BOS, 7, 8, 9];
        let cached = decode(&p, &cfg, &src, &memory, &prefix).unwrap();
        let full = forward(&p, &cfg, &src, &prefix, ForwardNoise::eval()).unwrap();
        for (a, b) in cached.values().iter().zip(full.values()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn padding_does_not_affect_real_positions() {
        let cfg = tiny();
        let p = init_params(&cfg).unwrap();
        let src = [4, 9, 5];
        let padded = [4, 9, 5, PAD, PAD];
        let a = encode(&p, &cfg, &src).unwrap();
        let b = encode(&p, &cfg, &padded).unwrap();
        for r in 0..3 {
            for (x, y) in a.row(r).iter().zip(b.row(r)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let fa = forward(&p, &cfg, &src, &[BOS, 6], ForwardNoise::eval()).unwrap();
        let fb = forward(&p, &cfg, &padded, &[BOS, 6], ForwardNoise::eval()).unwrap();
        for (x, y) in fa.values().iter().zip(fb.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_mode_is_deterministic_and_dropout_is_not() {
        use rand::SeedableRng;
        let cfg = tiny();
        let p = init_params(&cfg).unwrap();
        let src = [4, 5, 6, 7];
        let prefix = [BOS, 8];
        let a = forward(&p, &cfg, &src, &prefix, ForwardNoise::eval()).unwrap();
        let b = forward(&p, &cfg, &src, &prefix, ForwardNoise::eval()).unwrap();
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noisy = forward(
            &p,
            &cfg,
            &src,
            &prefix,
            ForwardNoise {
                dropout: Some(Dropout {
                    rate: 0.3,
                    rng: &mut rng,
                }),
                src_embedding_scale: None,
            },
        )
        .unwrap();
        assert_ne!(a, noisy);
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let cfg = tiny();
        let p = init_params(&cfg).unwrap();
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &p, true);
        let lp = forward_on(
            &mut tape,
            &p,
            &vars,
            &[4, 5, 6, 7, 4],
            &[BOS, 8, 9, 10],
            &mut ForwardNoise::eval(),
        )
        .unwrap();
        let w = tape.constant(
            Tensor::new(vec![4, 16], (0..64).map(|i| ((i * 7) % 5) as f64).collect()).unwrap(),
        );
        let prod = tape.mul(lp, w).unwrap();
        let loss = tape.sum(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (name, v) in p.names().zip(&vars) {
            let g = grads.values(*v).unwrap();
            let norm: f64 = g.iter().map(|x| x * x).sum();
            assert!(norm > 0.0, "{name} has zero gradient");
        }
    }
}
