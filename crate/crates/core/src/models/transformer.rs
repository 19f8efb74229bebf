use super::{check_inputs, ModelConfig, ModelError, ParamId, ParamStore};
use crate::diffnum::{DiffError, Tape, Tensor, Var};
use crate::rng::Stream;

const LN_EPS: f64 = 1e-5;

/// Sinusoidal encoding of position `t`: `sin(w_i t)` at even `i`, `cos(w_i t)`
/// at odd `i`, with `w_i = 10000^(-2 floor(i/2) / width)`.
pub fn positional_encoding(t: usize, width: usize) -> Vec<f64> {
    (0..width)
        .map(|i| {
            let w = 10000f64.powf(-((2 * (i / 2)) as f64) / width as f64);
            let a = w * t as f64;
            if i % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

fn key_width(tape: &Tape, q: Var, k: Var, v: Var, key_dim: usize) -> Result<(), DiffError> {
    let (qs, ks, vs) = (tape.value(q).shape(), tape.value(k).shape(), tape.value(v).shape());
    let rank = qs.len();
    let ok = (rank == 2 || rank == 3)
        && ks.len() == rank
        && vs.len() == rank
        && qs[rank - 1] == key_dim
        && ks[rank - 1] == key_dim
        && ks[rank - 2] == vs[rank - 2]
        && qs[..rank - 2] == ks[..rank - 2]
        && ks[..rank - 2] == vs[..rank - 2];
    if ok {
        Ok(())
    } else {
        Err(DiffError::dimension("attention", qs, ks))
    }
}

/// `softmax_rows(q k^T / sqrt(key_dim))`, for `[T, key_dim]` operands or
/// batched `[B, T, key_dim]` ones.
pub fn attention_weights(tape: &mut Tape, q: Var, k: Var, key_dim: usize) -> Result<Var, DiffError> {
    let scores = if tape.value(q).shape().len() == 3 { tape.batched_matmul_nt(q, k)? } else { tape.matmul_nt(q, k)? };
    let scaled = tape.scale(scores, 1.0 / (key_dim as f64).sqrt())?;
    tape.softmax_rows(scaled)
}

/// Scaled dot-product attention `softmax_rows(q k^T / sqrt(key_dim)) v`.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, key_dim: usize) -> Result<Var, DiffError> {
    key_width(tape, q, k, v, key_dim)?;
    let a = attention_weights(tape, q, k, key_dim)?;
    if tape.value(q).shape().len() == 3 {
        tape.batched_matmul(a, v)
    } else {
        tape.matmul(a, v)
    }
}

/// Projection weights of one multi-head attention block, all `width x width`.
/// Head `m` uses rows `m*dk .. (m+1)*dk` of `w_q`, `w_k` and `w_v`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

/// Multi-head self-attention over `x_in`, which holds `batch` sequences of
/// `seq_len` rows each (`[batch*seq_len, width]`). Returns the same shape.
pub fn multi_head(
    tape: &mut Tape,
    x_in: Var,
    batch: usize,
    seq_len: usize,
    heads: usize,
    w: AttentionWeights,
) -> Result<Var, DiffError> {
    let xs = tape.value(x_in).shape().to_vec();
    let width = *xs.last().unwrap();
    if heads == 0 || width % heads != 0 {
        return Err(DiffError::Contract(format!("width {width} is not divisible by head count {heads}")));
    }
    if xs.len() != 2 || xs[0] != batch * seq_len {
        return Err(DiffError::dimension("multi_head", &xs, &[batch * seq_len, width]));
    }
    for p in [w.w_q, w.w_k, w.w_v, w.w_o] {
        let s = tape.value(p).shape();
        if s != [width, width] {
            return Err(DiffError::dimension("multi_head", s, &[width, width]));
        }
    }
    let dk = width / heads;
    let q = tape.matmul_nt(x_in, w.w_q)?;
    let k = tape.matmul_nt(x_in, w.w_k)?;
    let v = tape.matmul_nt(x_in, w.w_v)?;
    let mut outs = Vec::with_capacity(heads);
    for m in 0..heads {
        let mut part = |src: Var| -> Result<Var, DiffError> {
            let s = if heads == 1 { src } else { tape.slice_cols(src, m * dk, dk)? };
            tape.reshape(s, &[batch, seq_len, dk])
        };
        let (qh, kh, vh) = (part(q)?, part(k)?, part(v)?);
        let a = attention(tape, qh, kh, vh, dk)?;
        outs.push(tape.reshape(a, &[batch * seq_len, dk])?);
    }
    let z = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    tape.matmul_nt(z, w.w_o)
}

#[derive(Clone, Debug)]
struct Layer {
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_o: ParamId,
    ln1: Option<(ParamId, ParamId)>,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2: Option<(ParamId, ParamId)>,
}

/// Encoder-only transformer: learned input embedding plus sinusoidal
/// positions, post-norm encoder layers, last-token pooling, then `w_logit`.
#[derive(Clone, Debug)]
pub struct TransformerNet {
    pub d: usize,
    pub k: usize,
    pub width: usize,
    pub heads: usize,
    pub residual: bool,
    pub params: ParamStore,
    w_embed: ParamId,
    b_embed: ParamId,
    layers: Vec<Layer>,
    w_logit: ParamId,
}

impl TransformerNet {
    pub fn new(config: &ModelConfig, d: usize, k: usize, seed: u64) -> Self {
        let mut rng = Stream::new(seed);
        let (width, ffn) = (config.width, config.ffn);
        let mut p = ParamStore::new();
        let w_embed = p.add_weight("w_embed", width, d, &mut rng);
        let b_embed = p.add_uniform("b_embed", &[width], d, &mut rng);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let norm = |p: &mut ParamStore, tag: &str| {
                config.layer_norm.then(|| {
                    (
                        p.add(format!("l{l}.{tag}_gain"), Tensor::ones(&[width])),
                        p.add(format!("l{l}.{tag}_bias"), Tensor::zeros(&[width])),
                    )
                })
            };
            let w_q = p.add_weight(&format!("l{l}.w_q"), width, width, &mut rng);
            let w_k = p.add_weight(&format!("l{l}.w_k"), width, width, &mut rng);
            let w_v = p.add_weight(&format!("l{l}.w_v"), width, width, &mut rng);
            let w_o = p.add_weight(&format!("l{l}.w_o"), width, width, &mut rng);
            let ln1 = norm(&mut p, "ln1");
            let w1 = p.add_weight(&format!("l{l}.w1"), ffn, width, &mut rng);
            let b1 = p.add_uniform(&format!("l{l}.b1"), &[ffn], width, &mut rng);
            let w2 = p.add_weight(&format!("l{l}.w2"), width, ffn, &mut rng);
            let b2 = p.add_uniform(&format!("l{l}.b2"), &[width], ffn, &mut rng);
            let ln2 = norm(&mut p, "ln2");
            layers.push(Layer { w_q, w_k, w_v, w_o, ln1, w1, b1, w2, b2, ln2 });
        }
        let w_logit = p.add_weight("w_logit", d * k, width, &mut rng);
        Self {
            d,
            k,
            width,
            heads: config.heads,
            residual: config.residual,
            params: p,
            w_embed,
            b_embed,
            layers,
            w_logit,
        }
    }

    pub fn w_logit(&self) -> ParamId {
        self.w_logit
    }

    fn sublayer_end(&self, tape: &mut Tape, vars: &[Var], x: Var, y: Var, ln: Option<(ParamId, ParamId)>) -> Result<Var, DiffError> {
        let mut out = if self.residual { tape.add(x, y)? } else { y };
        if let Some((gain, bias)) = ln {
            out = tape.layer_norm_rows(out, LN_EPS)?;
            out = tape.mul_row(out, vars[gain.0])?;
            out = tape.add_row(out, vars[bias.0])?;
        }
        Ok(out)
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], inputs: &Tensor) -> Result<Var, ModelError> {
        let (b, t) = check_inputs(inputs, self.d)?;
        let flat = tape.constant(inputs.reshape(&[b * t, self.d])?)?;
        let emb = tape.matmul_nt(flat, vars[self.w_embed.0])?;
        let emb = tape.add_row(emb, vars[self.b_embed.0])?;
        let mut pe = Vec::with_capacity(b * t * self.width);
        for _ in 0..b {
            for step in 0..t {
                pe.extend(positional_encoding(step, self.width));
            }
        }
        let pe = tape.constant(Tensor::matrix(b * t, self.width, pe))?;
        let mut x = tape.add(emb, pe)?;

        for layer in &self.layers {
            let w = AttentionWeights {
                w_q: vars[layer.w_q.0],
                w_k: vars[layer.w_k.0],
                w_v: vars[layer.w_v.0],
                w_o: vars[layer.w_o.0],
            };
            let z = multi_head(tape, x, b, t, self.heads, w)?;
            let z = self.sublayer_end(tape, vars, x, z, layer.ln1)?;
            let f = tape.matmul_nt(z, vars[layer.w1.0])?;
            let f = tape.add_row(f, vars[layer.b1.0])?;
            let f = tape.relu(f)?;
            let f = tape.matmul_nt(f, vars[layer.w2.0])?;
            let f = tape.add_row(f, vars[layer.b2.0])?;
            x = self.sublayer_end(tape, vars, z, f, layer.ln2)?;
        }

        let last: Vec<usize> = (0..b).map(|i| i * t + t - 1).collect();
        let pooled = tape.select_rows(x, &last)?;
        Ok(tape.matmul_nt(pooled, vars[self.w_logit.0])?)
    }
}
