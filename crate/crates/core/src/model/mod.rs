//! A small post-layer-norm transformer encoder with masked-token,
//! next-sentence and pair-matching heads.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError};

use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, ParamSet, ParamVars, Tensor, Var};
use crate::rng::Stream;

const LN_EPS: f64 = 1e-12;
const MASKED_SCORE: f64 = -1e9;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("{what} id {id} out of range (limit {limit})")]
    IdOutOfRange {
        what: &'static str,
        id: usize,
        limit: usize,
    },
    #[error("input shape mismatch: {0}")]
    InputShape(String),
    #[error("masked-token loss needs at least one masked position")]
    EmptyMask,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub n_segments: usize,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            max_len: 32,
            d_model: 32,
            n_heads: 4,
            n_layers: 2,
            d_ff: 64,
            n_segments: 2,
            dropout_rate: 0.0,
        }
    }
}

impl ModelConfig {
    /// Under 500 parameters; used for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            vocab_size: 8,
            max_len: 8,
            d_model: 4,
            n_heads: 2,
            n_layers: 1,
            d_ff: 8,
            n_segments: 2,
            dropout_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::InvalidConfig(m));
        if self.vocab_size == 0 || self.max_len == 0 || self.d_model == 0 || self.d_ff == 0 {
            return fail("sizes must be positive".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_segments == 0 {
            return fail("n_segments must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} not in [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Which pair-matching head to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PairHead {
    QaMatch,
    QqMatch,
}

impl PairHead {
    fn prefix(self) -> &'static str {
        match self {
            PairHead::QaMatch => "head.qa_match",
            PairHead::QqMatch => "head.qq_match",
        }
    }
}

/// Names of encoder parameters; everything else is a pre-training head.
pub fn is_encoder_param(name: &str) -> bool {
    !name.starts_with("head.")
}

fn layer_name(layer: usize, rest: &str) -> String {
    format!("layer{layer}.{rest}")
}

/// Fresh parameters: truncated-normal weights (std 0.02), zero biases, unit layer-norm gains.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let (v, d, ff) = (config.vocab_size, config.d_model, config.d_ff);
    let mut rng = Stream::new(seed).split("init");
    let mut p = ParamSet::new();
    let mut weight = |p: &mut ParamSet, name: String, shape: &[usize]| -> Result<()> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.truncated_normal(INIT_STD)).collect();
        p.insert(name, Tensor::new(shape.to_vec(), data)?)?;
        Ok(())
    };
    let zeros = |p: &mut ParamSet, name: String, n: usize| p.insert(name, Tensor::zeros(&[n]));
    let ones = |p: &mut ParamSet, name: String, n: usize| p.insert(name, Tensor::full(&[n], 1.0));

    weight(&mut p, "embeddings.token".into(), &[v, d])?;
    weight(&mut p, "embeddings.position".into(), &[config.max_len, d])?;
    weight(&mut p, "embeddings.segment".into(), &[config.n_segments, d])?;
    ones(&mut p, "embeddings.ln.gain".into(), d)?;
    zeros(&mut p, "embeddings.ln.bias".into(), d)?;
    for l in 0..config.n_layers {
        for proj in ["query", "key", "value", "output"] {
            weight(&mut p, layer_name(l, &format!("attn.{proj}.w")), &[d, d])?;
            zeros(&mut p, layer_name(l, &format!("attn.{proj}.b")), d)?;
        }
        ones(&mut p, layer_name(l, "attn.ln.gain"), d)?;
        zeros(&mut p, layer_name(l, "attn.ln.bias"), d)?;
        weight(&mut p, layer_name(l, "ffn.in.w"), &[d, ff])?;
        zeros(&mut p, layer_name(l, "ffn.in.b"), ff)?;
        weight(&mut p, layer_name(l, "ffn.out.w"), &[ff, d])?;
        zeros(&mut p, layer_name(l, "ffn.out.b"), d)?;
        ones(&mut p, layer_name(l, "ffn.ln.gain"), d)?;
        zeros(&mut p, layer_name(l, "ffn.ln.bias"), d)?;
    }
    weight(&mut p, "pooler.w".into(), &[d, d])?;
    zeros(&mut p, "pooler.b".into(), d)?;
    // The masked-token head reuses embeddings.token as its output projection.
    zeros(&mut p, "head.mlm.bias".into(), v)?;
    for head in ["head.nsp", "head.qa_match", "head.qq_match"] {
        weight(&mut p, format!("{head}.w"), &[d, 2])?;
        zeros(&mut p, format!("{head}.b"), 2)?;
    }
    Ok(p)
}

/// Token ids, segment ids and key mask for a `[batch, seq]` block, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderInput {
    pub batch: usize,
    pub seq: usize,
    pub tokens: Vec<usize>,
    pub segments: Vec<usize>,
    /// `true` where a position may be attended to.
    pub attention_mask: Vec<bool>,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// `[batch, seq, d_model]`
    pub token_states: Var,
    /// `[batch, d_model]`: first position through a tanh projection.
    pub pooled: Var,
    pub batch: usize,
    pub seq: usize,
}

/// Dropout source for training-mode forwards; `None` means evaluation mode.
pub type Dropout<'a> = Option<&'a mut Stream>;

fn dropout(g: &mut Graph, x: Var, rate: f64, rng: &mut Dropout<'_>) -> Result<Var> {
    let Some(rng) = rng.as_deref_mut() else {
        return Ok(x);
    };
    if rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let n = g.value(x).len();
    let mask: Vec<f64> = (0..n).map(|_| if rng.bernoulli(rate) { 0.0 } else { keep }).collect();
    let mask = g.constant(Tensor::new(g.shape(x).to_vec(), mask)?);
    Ok(g.mul(x, mask)?)
}

fn check_input(config: &ModelConfig, input: &EncoderInput) -> Result<()> {
    let n = input.batch * input.seq;
    if input.tokens.len() != n || input.segments.len() != n || input.attention_mask.len() != n {
        return Err(ModelError::InputShape(format!(
            "expected {n} entries for [{}, {}]",
            input.batch, input.seq
        )));
    }
    if input.seq > config.max_len {
        return Err(ModelError::IdOutOfRange {
            what: "position",
            id: input.seq - 1,
            limit: config.max_len,
        });
    }
    if let Some(&id) = input.tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(ModelError::IdOutOfRange {
            what: "token",
            id,
            limit: config.vocab_size,
        });
    }
    if let Some(&id) = input.segments.iter().find(|&&s| s >= config.n_segments) {
        return Err(ModelError::IdOutOfRange {
            what: "segment",
            id,
            limit: config.n_segments,
        });
    }
    Ok(())
}

pub fn encode(
    g: &mut Graph,
    config: &ModelConfig,
    p: &ParamVars,
    input: &EncoderInput,
    mut drop: Dropout<'_>,
) -> Result<EncoderOutput> {
    check_input(config, input)?;
    let (b, s, d) = (input.batch, input.seq, config.d_model);
    let rate = config.dropout_rate;

    let positions: Vec<usize> = (0..b).flat_map(|_| 0..s).collect();
    let tok = g.gather(p.get("embeddings.token")?, &input.tokens)?;
    let pos = g.gather(p.get("embeddings.position")?, &positions)?;
    let seg = g.gather(p.get("embeddings.segment")?, &input.segments)?;
    let x = g.add(tok, pos)?;
    let x = g.add(x, seg)?;
    let x = g.layer_norm(x, p.get("embeddings.ln.gain")?, p.get("embeddings.ln.bias")?, LN_EPS)?;
    let mut x = dropout(g, x, rate, &mut drop)?;

    let mut bias = Vec::with_capacity(b * s * s);
    for bi in 0..b {
        for _ in 0..s {
            for j in 0..s {
                let keep = input.attention_mask[bi * s + j];
                bias.push(if keep { 0.0 } else { MASKED_SCORE });
            }
        }
    }
    let bias = g.constant(Tensor::new(vec![b, s, s], bias)?);

    let (h, dh) = (config.n_heads, config.head_dim());
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    for l in 0..config.n_layers {
        let w = |n: &str| p.get(&layer_name(l, n));
        let q = g.linear(x, w("attn.query.w")?, w("attn.query.b")?)?;
        let k = g.linear(x, w("attn.key.w")?, w("attn.key.b")?)?;
        let v = g.linear(x, w("attn.value.w")?, w("attn.value.b")?)?;
        let mut heads = Vec::with_capacity(h);
        for hi in 0..h {
            let split = |g: &mut Graph, m: Var| -> Result<Var> {
                let part = g.slice(m, 1, hi * dh, dh)?;
                Ok(g.reshape(part, &[b, s, dh])?)
            };
            let (qh, kh, vh) = (split(g, q)?, split(g, k)?, split(g, v)?);
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, inv_sqrt)?;
            let scores = g.add(scores, bias)?;
            let weights = g.softmax(scores)?;
            heads.push(g.matmul(weights, vh)?);
        }
        let ctx = g.concat(&heads, 2)?;
        let ctx = g.reshape(ctx, &[b * s, d])?;
        let attn = g.linear(ctx, w("attn.output.w")?, w("attn.output.b")?)?;
        let attn = dropout(g, attn, rate, &mut drop)?;
        let res = g.add(x, attn)?;
        x = g.layer_norm(res, w("attn.ln.gain")?, w("attn.ln.bias")?, LN_EPS)?;

        let hidden = g.linear(x, w("ffn.in.w")?, w("ffn.in.b")?)?;
        let hidden = g.gelu(hidden)?;
        let ffn = g.linear(hidden, w("ffn.out.w")?, w("ffn.out.b")?)?;
        let ffn = dropout(g, ffn, rate, &mut drop)?;
        let res = g.add(x, ffn)?;
        x = g.layer_norm(res, w("ffn.ln.gain")?, w("ffn.ln.bias")?, LN_EPS)?;
    }

    let token_states = g.reshape(x, &[b, s, d])?;
    let first = g.slice(token_states, 1, 0, 1)?;
    let first = g.reshape(first, &[b, d])?;
    let pooled = g.linear(first, p.get("pooler.w")?, p.get("pooler.b")?)?;
    let pooled = g.tanh(pooled)?;
    Ok(EncoderOutput {
        token_states,
        pooled,
        batch: b,
        seq: s,
    })
}

/// Rows of `token_states` at `(example, position)` pairs, as `[n, d_model]`.
pub fn gather_positions(g: &mut Graph, out: &EncoderOutput, positions: &[(usize, usize)]) -> Result<Var> {
    let d = g.shape(out.token_states)[2];
    let mut flat = Vec::with_capacity(positions.len());
    for &(bi, pi) in positions {
        if bi >= out.batch || pi >= out.seq {
            return Err(ModelError::IdOutOfRange {
                what: "mask position",
                id: bi * out.seq + pi,
                limit: out.batch * out.seq,
            });
        }
        flat.push(bi * out.seq + pi);
    }
    let states = g.reshape(out.token_states, &[out.batch * out.seq, d])?;
    Ok(g.gather(states, &flat)?)
}

/// Mean cross-entropy of the tied-embedding vocabulary projection over masked positions.
pub fn mlm_loss(
    g: &mut Graph,
    config: &ModelConfig,
    p: &ParamVars,
    out: &EncoderOutput,
    mask_positions: &[(usize, usize)],
    mask_targets: &[usize],
) -> Result<Var> {
    if mask_positions.is_empty() {
        return Err(ModelError::EmptyMask);
    }
    if mask_positions.len() != mask_targets.len() {
        return Err(ModelError::InputShape(format!(
            "{} mask positions but {} targets",
            mask_positions.len(),
            mask_targets.len()
        )));
    }
    if let Some(&id) = mask_targets.iter().find(|&&t| t >= config.vocab_size) {
        return Err(ModelError::IdOutOfRange {
            what: "mask target",
            id,
            limit: config.vocab_size,
        });
    }
    let rows = gather_positions(g, out, mask_positions)?;
    let logits = mlm_logits(g, p, rows)?;
    Ok(g.cross_entropy(logits, mask_targets)?)
}

/// Vocabulary logits `[n, vocab]` for `[n, d_model]` states.
pub fn mlm_logits(g: &mut Graph, p: &ParamVars, rows: Var) -> Result<Var> {
    let emb_t = g.transpose(p.get("embeddings.token")?)?;
    let logits = g.matmul(rows, emb_t)?;
    Ok(g.add_bias(logits, p.get("head.mlm.bias")?)?)
}

fn binary_head_loss(g: &mut Graph, p: &ParamVars, prefix: &str, out: &EncoderOutput, labels: &[bool]) -> Result<Var> {
    if labels.len() != out.batch {
        return Err(ModelError::InputShape(format!(
            "{} labels for batch of {}",
            labels.len(),
            out.batch
        )));
    }
    let logits = g.linear(
        out.pooled,
        p.get(&format!("{prefix}.w"))?,
        p.get(&format!("{prefix}.b"))?,
    )?;
    let targets: Vec<usize> = labels.iter().map(|&l| usize::from(l)).collect();
    Ok(g.cross_entropy(logits, &targets)?)
}

/// Two-class cross-entropy of the next-sentence head on the pooled state.
pub fn nsp_loss(g: &mut Graph, p: &ParamVars, out: &EncoderOutput, labels: &[bool]) -> Result<Var> {
    binary_head_loss(g, p, "head.nsp", out, labels)
}

/// Two-class cross-entropy of a pair-matching head on the pooled state.
pub fn pair_loss(g: &mut Graph, p: &ParamVars, head: PairHead, out: &EncoderOutput, labels: &[bool]) -> Result<Var> {
    binary_head_loss(g, p, head.prefix(), out, labels)
}
