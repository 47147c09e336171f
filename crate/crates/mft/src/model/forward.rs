use indexmap::IndexMap;
use mft_autograd::{Real, Tape, Tensor, TensorError, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{CcrMode, MftConfig, LAYER_NORM_EPS};
use super::params::MftParameters;
use super::trace::{AttentionTrace, Matrix};
use crate::error::{MftError, Result};
use crate::ingest::{ClipSample, Context};

/// Parameters placed on a tape, by name.
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    /// Gradients flow into the leaves only when `trainable`.
    pub fn new<T: Real>(tape: &mut Tape<T>, params: &MftParameters<T>, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Binds externally created leaves, in ledger order.
    pub fn from_vars(config: &MftConfig, vars: &[Var]) -> Result<Self> {
        let names = config.param_shapes();
        if names.len() != vars.len() {
            return Err(MftError::Contract(format!(
                "{} leaves for {} parameters",
                vars.len(),
                names.len()
            )));
        }
        Ok(Bound {
            vars: names.into_keys().zip(vars.iter().copied()).collect(),
        })
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| MftError::Contract(format!("parameter {name} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Sinusoidal encoding for positions `0..rows`: sin on even and cos on odd
/// columns, frequency `10000^(-2k/d)` for column pair `k`.
pub fn positional_encoding<T: Real>(rows: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(rows * d);
    for pos in 0..rows {
        for j in 0..d {
            let k = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * k / d as f64);
            data.push(T::of(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![rows, d], data).expect("positional encoding shape")
}

fn to_matrix<T: Real>(t: &Tensor<T>) -> Matrix {
    let (r, c) = t.dims2().expect("attention weights are matrices");
    (0..r)
        .map(|i| t.data()[i * c..(i + 1) * c].iter().map(|x| x.as_f64()).collect())
        .collect()
}

/// The pipeline stages recorded onto one tape.
pub struct Stages<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    pub bound: &'a Bound,
    pub config: &'a MftConfig,
}

impl<T: Real> Stages<'_, T> {
    fn p(&self, name: &str) -> Result<Var> {
        self.bound.var(name)
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        let y = self.tape.matmul(x, w)?;
        Ok(self.tape.add(y, b)?)
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p(&format!("{prefix}.gain"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        Ok(self.tape.layer_norm(x, g, b, LAYER_NORM_EPS)?)
    }

    /// Multi-head scaled dot-product attention with output projection.
    /// Returns the projected output and each head's weights.
    pub fn attention(&mut self, prefix: &str, query: Var, source: Var) -> Result<(Var, Vec<Matrix>)> {
        let dh = self.config.head_dim();
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let wq = self.p(&format!("{prefix}.wq.weight"))?;
        let wk = self.p(&format!("{prefix}.wk.weight"))?;
        let wv = self.p(&format!("{prefix}.wv.weight"))?;
        let q = self.tape.matmul(query, wq)?;
        let k = self.tape.matmul(source, wk)?;
        let v = self.tape.matmul(source, wv)?;
        let mut outputs = Vec::with_capacity(self.config.heads);
        let mut weights = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = self.tape.slice(q, 1, cols.clone())?;
            let kh = self.tape.slice(k, 1, cols.clone())?;
            let vh = self.tape.slice(v, 1, cols)?;
            let kt = self.tape.transpose(kh)?;
            let logits = self.tape.matmul(qh, kt)?;
            let logits = self.tape.scale(logits, scale)?;
            let alpha = self.tape.softmax(logits, 1)?;
            weights.push(to_matrix(self.tape.value(alpha)));
            outputs.push(self.tape.matmul(alpha, vh)?);
        }
        let joined = if outputs.len() == 1 {
            outputs[0]
        } else {
            self.tape.concat(&outputs, 1)?
        };
        let out = self.linear(joined, &format!("{prefix}.wo"))?;
        Ok((out, weights))
    }

    /// Affine per-frame projection of an N×w context matrix to N×d.
    pub fn embed_context(&mut self, context: Context, raw: &Tensor<f64>) -> Result<Var> {
        let width = self.config.flavor.width(context);
        if raw.rank() != 2 || raw.shape()[1] != width {
            return Err(MftError::Tensor(TensorError::Shape {
                op: "embed_context",
                detail: format!("context {} needs width {width}, got {:?}", context.symbol(), raw.shape()),
            }));
        }
        let x = self.tape.constant(raw.cast::<T>());
        self.linear(x, &format!("ctx.{}.embed", context.symbol()))
    }

    /// Prepends the context token and adds the positional encoding to every row.
    pub fn positional_encode(&mut self, context: Context, embedded: Var) -> Result<Var> {
        let cls = self.p(&format!("ctx.{}.cls", context.symbol()))?;
        let seq = self.tape.concat(&[cls, embedded], 0)?;
        let rows = self.tape.shape(seq)[0];
        let pe = self.tape.constant(positional_encoding(rows, self.config.model_dim));
        Ok(self.tape.add(seq, pe)?)
    }

    /// Self-attention over one context sequence, then residual and norm.
    pub fn mi_attention(&mut self, context: Context, seq: Var) -> Result<(Var, Vec<Matrix>)> {
        let s = context.symbol();
        let (att, alpha) = self.attention(&format!("ctx.{s}.mi"), seq, seq)?;
        let res = self.tape.add(att, seq)?;
        Ok((self.norm(res, &format!("ctx.{s}.mi.norm"))?, alpha))
    }

    /// Self-attention over `[global; context tokens]`, then residual and norm.
    pub fn ccf_fuse(&mut self, tokens: &[Var]) -> Result<(Var, Vec<Matrix>)> {
        if tokens.len() < 2 {
            return Err(MftError::Config(format!(
                "cross-context fusion needs at least 2 tokens, got {}",
                tokens.len()
            )));
        }
        let set = self.tape.concat(tokens, 0)?;
        let (att, alpha) = self.attention("ccf.mc", set, set)?;
        let res = self.tape.add(att, set)?;
        Ok((self.norm(res, "ccf.norm")?, alpha))
    }

    /// Row-wise feed-forward block with residual and norm.
    pub fn icr_ffn(&mut self, context: Context, seq: Var) -> Result<Var> {
        let s = context.symbol();
        let hidden = self.linear(seq, &format!("ctx.{s}.icr.ffn1"))?;
        let hidden = self.tape.relu(hidden)?;
        let out = self.linear(hidden, &format!("ctx.{s}.icr.ffn2"))?;
        let res = self.tape.add(out, seq)?;
        self.norm(res, &format!("ctx.{s}.icr.norm"))
    }

    /// Attention with row 0 as the only query and all rows as keys and values.
    pub fn gi_attention(&mut self, context: Context, seq: Var) -> Result<(Var, Vec<Matrix>)> {
        let query = self.tape.slice(seq, 0, 0..1)?;
        self.attention(&format!("ctx.{}.gi", context.symbol()), query, seq)
    }

    /// Replaces the context token of `rows` by `updated`, then FFN and guided attention.
    pub fn icr_refine(&mut self, context: Context, updated: Var, rows: Var) -> Result<(Var, Vec<Matrix>)> {
        let seq = self.tape.concat(&[updated, rows], 0)?;
        let seq = self.icr_ffn(context, seq)?;
        self.gi_attention(context, seq)
    }

    /// Refines the global token against `[global; refined context tokens]`.
    pub fn ccr_refine(&mut self, global: Var, refined: &[Var]) -> Result<(Var, Vec<Matrix>)> {
        let parts: Vec<Var> = std::iter::once(global).chain(refined.iter().copied()).collect();
        let set = self.tape.concat(&parts, 0)?;
        let k = parts.len();
        match self.config.ccr_mode {
            CcrMode::GcAttn => self.attention("ccr.gc", global, set),
            CcrMode::MeanPool => {
                let weights = Tensor::full(&[1, k], T::of(1.0 / k as f64));
                let trace = vec![to_matrix(&weights)];
                let w = self.tape.constant(weights);
                Ok((self.tape.matmul(w, set)?, trace))
            }
            CcrMode::ModalityAttn => {
                let score = self.p("ccr.modality.score")?;
                let scores = self.tape.matmul(set, score)?;
                let scores = self.tape.transpose(scores)?;
                let alpha = self.tape.softmax(scores, 1)?;
                let trace = vec![to_matrix(self.tape.value(alpha))];
                Ok((self.tape.matmul(alpha, set)?, trace))
            }
        }
    }

    /// MLP head; dropout draws from `rng` only when `training`.
    pub fn head<R: Rng>(&mut self, token: Var, training: bool, rng: &mut R) -> Result<Var> {
        let hidden = self.linear(token, "head.fc1")?;
        let hidden = self.tape.relu(hidden)?;
        let hidden = self.tape.dropout(hidden, self.config.dropout_p, training, rng)?;
        let logit = self.linear(hidden, "head.fc2")?;
        Ok(self.tape.sigmoid(logit)?)
    }

    fn run<R: Rng>(
        &mut self,
        clip: &ClipSample,
        order: &[Context],
        training: bool,
        rng: &mut R,
    ) -> Result<(Var, AttentionTrace)> {
        let n = self.config.n_frames;
        let mut trace = AttentionTrace {
            tokens: std::iter::once("global".to_string())
                .chain(order.iter().map(|c| c.symbol().to_string()))
                .collect(),
            contexts: order.iter().map(|c| c.symbol().to_string()).collect(),
            ..Default::default()
        };
        let mut tokens = vec![self.p("global.cls")?];
        let mut sequences = Vec::with_capacity(order.len());
        for &c in order {
            let f = self.embed_context(c, clip.context(c))?;
            let seq = self.positional_encode(c, f)?;
            let (fused, alpha) = self.mi_attention(c, seq)?;
            trace.mi.push(alpha);
            tokens.push(self.tape.slice(fused, 0, 0..1)?);
            sequences.push(self.tape.slice(fused, 0, 1..n + 1)?);
        }
        let (fused_tokens, alpha) = self.ccf_fuse(&tokens)?;
        trace.mc = alpha;
        let global = self.tape.slice(fused_tokens, 0, 0..1)?;
        let mut refined = Vec::with_capacity(order.len());
        for (i, &c) in order.iter().enumerate() {
            let updated = self.tape.slice(fused_tokens, 0, i + 1..i + 2)?;
            let (token, alpha) = self.icr_refine(c, updated, sequences[i])?;
            trace.gi.push(alpha);
            refined.push(token);
        }
        let (final_token, alpha) = self.ccr_refine(global, &refined)?;
        trace.gc = alpha;
        Ok((self.head(final_token, training, rng)?, trace))
    }
}

fn check_clip(config: &MftConfig, clip: &ClipSample) -> Result<()> {
    for c in config.contexts() {
        let shape = clip.context(c).shape();
        let expected = [config.n_frames, config.flavor.width(c)];
        if shape != expected {
            return Err(MftError::Config(format!(
                "clip {} context {} has shape {shape:?}, {} model expects {expected:?}",
                clip.pedestrian_id,
                c.symbol(),
                config.flavor.name()
            )));
        }
    }
    Ok(())
}

/// Records the full pipeline on `tape` and returns the 1×1 probability node.
/// Dropout draws from `rng` only when `training`.
pub fn forward_on_tape<T: Real, R: Rng>(
    tape: &mut Tape<T>,
    config: &MftConfig,
    bound: &Bound,
    clip: &ClipSample,
    training: bool,
    rng: &mut R,
) -> Result<(Var, AttentionTrace)> {
    forward_ordered(tape, config, bound, clip, training, rng, &config.contexts())
}

/// Like [`forward_on_tape`] with an explicit context token order.
pub(crate) fn forward_ordered<T: Real, R: Rng>(
    tape: &mut Tape<T>,
    config: &MftConfig,
    bound: &Bound,
    clip: &ClipSample,
    training: bool,
    rng: &mut R,
    order: &[Context],
) -> Result<(Var, AttentionTrace)> {
    check_clip(config, clip)?;
    let mut stages = Stages { tape, bound, config };
    stages.run(clip, order, training, rng)
}

/// Crossing probability and attention trace for one clip.
pub fn forward<T: Real, R: Rng>(
    config: &MftConfig,
    params: &MftParameters<T>,
    clip: &ClipSample,
    training: bool,
    rng: &mut R,
) -> Result<(f64, AttentionTrace)> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params, false);
    let (prob, trace) = forward_on_tape(&mut tape, config, &bound, clip, training, rng)?;
    Ok((tape.value(prob).item().as_f64(), trace))
}

/// Evaluation-mode forward pass.
pub fn predict<T: Real>(
    config: &MftConfig,
    params: &MftParameters<T>,
    clip: &ClipSample,
) -> Result<(f64, AttentionTrace)> {
    // eval mode never draws from the stream
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    forward(config, params, clip, false, &mut unused)
}
