//! A small frozen decoder-only transformer (RMSNorm, RoPE attention, SwiGLU
//! FFN) that exposes its pre-RoPE key/value states.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{dot, matmul, swish, Matrix, Real};

pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub hidden: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub rope_base: f64,
    pub ffn_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 2,
            head_dim: 8,
            hidden: 16,
            vocab: 256,
            max_seq: 512,
            rope_base: 10000.0,
            ffn_dim: 64,
        }
    }
}

impl ModelConfig {
    /// Total key width across heads (`d_k`).
    pub fn kv_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    /// Width of one token's concatenated key/value vector (`2·d_k`).
    pub fn kv_width(&self) -> usize {
        2 * self.kv_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("hidden", self.hidden),
            ("vocab", self.vocab),
            ("max_seq", self.max_seq),
            ("ffn_dim", self.ffn_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.hidden != self.n_heads * self.head_dim {
            return Err(Error::Config(format!(
                "hidden {} != n_heads {} * head_dim {}",
                self.hidden, self.n_heads, self.head_dim
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::Config("head_dim must be even for rotary embedding".into()));
        }
        if !(self.rope_base > 0.0) {
            return Err(Error::Config("rope_base must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm: Vec<T>,
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
    pub w_o: Matrix<T>,
    pub ffn_norm: Vec<T>,
    pub w_gate: Matrix<T>,
    pub w_up: Matrix<T>,
    pub w_down: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub seed: u64,
    pub embed: Matrix<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Vec<T>,
    pub lm_head: Matrix<T>,
}

/// Uniform ±sqrt(6/fan_in) where fan_in is the row count.
pub(crate) fn uniform_init<T: Real>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<T> {
    let bound = (6.0 / rows as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| T::c(rng.gen_range(-bound..=bound)))
}

pub fn init_model<T: Real>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.hidden;
    let dk = config.kv_dim();
    let f = config.ffn_dim;
    let embed = uniform_init(config.vocab, d, &mut rng);
    let layers = (0..config.n_layers)
        .map(|_| LayerParams {
            attn_norm: vec![T::one(); d],
            w_q: uniform_init(d, d, &mut rng),
            w_k: uniform_init(d, dk, &mut rng),
            w_v: uniform_init(d, dk, &mut rng),
            w_o: uniform_init(d, d, &mut rng),
            ffn_norm: vec![T::one(); d],
            w_gate: uniform_init(d, f, &mut rng),
            w_up: uniform_init(d, f, &mut rng),
            w_down: uniform_init(f, d, &mut rng),
        })
        .collect();
    let lm_head = uniform_init(d, config.vocab, &mut rng);
    Ok(ModelParams {
        config: config.clone(),
        seed,
        embed,
        layers,
        final_norm: vec![T::one(); d],
        lm_head,
    })
}

impl<T: Real> ModelParams<T> {
    /// Named tensors in a fixed order (vectors as 1×n matrices).
    pub fn named_tensors(&self) -> Vec<(String, Matrix<T>)> {
        let mut out = vec![("embed".to_string(), self.embed.clone())];
        for (l, p) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.attn_norm"), Matrix::row_vector(&p.attn_norm)));
            out.push((format!("layers.{l}.w_q"), p.w_q.clone()));
            out.push((format!("layers.{l}.w_k"), p.w_k.clone()));
            out.push((format!("layers.{l}.w_v"), p.w_v.clone()));
            out.push((format!("layers.{l}.w_o"), p.w_o.clone()));
            out.push((format!("layers.{l}.ffn_norm"), Matrix::row_vector(&p.ffn_norm)));
            out.push((format!("layers.{l}.w_gate"), p.w_gate.clone()));
            out.push((format!("layers.{l}.w_up"), p.w_up.clone()));
            out.push((format!("layers.{l}.w_down"), p.w_down.clone()));
        }
        out.push(("final_norm".into(), Matrix::row_vector(&self.final_norm)));
        out.push(("lm_head".into(), self.lm_head.clone()));
        out
    }

    /// Rebuilds parameters from tensors in [`Self::named_tensors`] order.
    pub fn from_named_tensors(config: ModelConfig, seed: u64, tensors: Vec<(String, Matrix<T>)>) -> Result<Self> {
        config.validate()?;
        let template = init_model::<T>(&config, 0)?.named_tensors();
        if template.len() != tensors.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                template.len(),
                tensors.len()
            )));
        }
        for ((tn, tm), (n, m)) in template.iter().zip(&tensors) {
            if tn != n || tm.shape() != m.shape() {
                return Err(Error::Format(format!("tensor {n} {:?} does not match {tn} {:?}", m.shape(), tm.shape())));
            }
        }
        let mut it = tensors.into_iter().map(|(_, m)| m);
        let mut next = || it.next().expect("count checked");
        let embed = next();
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerParams {
                attn_norm: next().into_data(),
                w_q: next(),
                w_k: next(),
                w_v: next(),
                w_o: next(),
                ffn_norm: next().into_data(),
                w_gate: next(),
                w_up: next(),
                w_down: next(),
            });
        }
        let final_norm = next().into_data();
        let lm_head = next();
        Ok(Self { config, seed, embed, layers, final_norm, lm_head })
    }

    /// SHA-256 over every parameter's little-endian bytes, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in self.named_tensors() {
            h.update(name.as_bytes());
            for x in m.data() {
                h.update(x.f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let cv = |v: &Vec<T>| v.iter().map(|x| U::c(x.f64())).collect::<Vec<U>>();
        ModelParams {
            config: self.config.clone(),
            seed: self.seed,
            embed: self.embed.cast(),
            layers: self
                .layers
                .iter()
                .map(|p| LayerParams {
                    attn_norm: cv(&p.attn_norm),
                    w_q: p.w_q.cast(),
                    w_k: p.w_k.cast(),
                    w_v: p.w_v.cast(),
                    w_o: p.w_o.cast(),
                    ffn_norm: cv(&p.ffn_norm),
                    w_gate: p.w_gate.cast(),
                    w_up: p.w_up.cast(),
                    w_down: p.w_down.cast(),
                })
                .collect(),
            final_norm: cv(&self.final_norm),
            lm_head: self.lm_head.cast(),
        }
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(Error::Input(format!("token id {t} outside vocabulary of {}", self.config.vocab)));
        }
        Ok(())
    }

    pub fn embed_tokens(&self, tokens: &[u32]) -> Result<Matrix<T>> {
        self.check_tokens(tokens)?;
        let d = self.config.hidden;
        let mut h = Matrix::zeros(tokens.len(), d);
        for (i, &t) in tokens.iter().enumerate() {
            h.row_mut(i).copy_from_slice(self.embed.row(t as usize));
        }
        Ok(h)
    }
}

/// Pre-RoPE key/value states: one `tokens × 2·d_k` matrix per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct KvTrace<T> {
    pub layers: Vec<Matrix<T>>,
}

impl<T: Real> KvTrace<T> {
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, Matrix::rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token(&self, layer: usize, t: usize) -> &[T] {
        self.layers[layer].row(t)
    }
}

/// Rotates consecutive pairs of `v` by `position · base^(-2i/D)`.
pub fn apply_rope<T: Real>(v: &[T], position: usize, base: f64) -> Result<Vec<T>> {
    rope_signed(v, position as f64, base)
}

/// Inverse rotation (rotation by `-position`).
pub fn remove_rope<T: Real>(v: &[T], position: usize, base: f64) -> Result<Vec<T>> {
    rope_signed(v, -(position as f64), base)
}

fn rope_signed<T: Real>(v: &[T], position: f64, base: f64) -> Result<Vec<T>> {
    if v.len() % 2 != 0 {
        return Err(Error::Shape(format!("rotary embedding needs an even width, got {}", v.len())));
    }
    let mut out = v.to_vec();
    rope_in_place(&mut out, position, base);
    Ok(out)
}

pub(crate) fn rope_in_place<T: Real>(v: &mut [T], position: f64, base: f64) {
    let dim = v.len();
    for i in 0..dim / 2 {
        let freq = base.powf(-2.0 * i as f64 / dim as f64);
        let (s, c) = (position * freq).sin_cos();
        let (s, c) = (T::c(s), T::c(c));
        let a = v[2 * i];
        let b = v[2 * i + 1];
        v[2 * i] = a * c - b * s;
        v[2 * i + 1] = a * s + b * c;
    }
}

/// Row-wise RMSNorm with gain.
pub fn rms_norm<T: Real>(x: &Matrix<T>, gain: &[T]) -> Matrix<T> {
    let n = x.cols();
    let mut out = x.clone();
    for i in 0..x.rows() {
        let r = rms_inv(x.row(i));
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = *o * r * gain[j];
        }
    }
    debug_assert_eq!(gain.len(), n);
    out
}

pub(crate) fn rms_inv<T: Real>(row: &[T]) -> T {
    let ms = row.iter().map(|&v| v * v).sum::<T>() / T::c(row.len() as f64);
    T::one() / (ms + T::c(RMS_EPS)).sqrt()
}

/// Queries and concatenated pre-RoPE key/values for a block of hidden states.
pub struct Projection<T> {
    pub q: Matrix<T>,
    pub kv: Matrix<T>,
}

pub fn project<T: Real>(layer: &LayerParams<T>, h: &Matrix<T>) -> Projection<T> {
    let x = rms_norm(h, &layer.attn_norm);
    let q = matmul(&x, &layer.w_q).expect("layer shapes validated");
    let k = matmul(&x, &layer.w_k).expect("layer shapes validated");
    let v = matmul(&x, &layer.w_v).expect("layer shapes validated");
    Projection { q, kv: concat_cols(&k, &v) }
}

pub(crate) fn concat_cols<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(a.rows(), a.cols() + b.cols());
    for i in 0..a.rows() {
        let row = out.row_mut(i);
        row[..a.cols()].copy_from_slice(a.row(i));
        row[a.cols()..].copy_from_slice(b.row(i));
    }
    out
}

/// Attention outputs plus per-head probabilities `[heads][Lq × Lkv]`
/// (masked entries are zero).
pub struct AttentionOutput<T> {
    pub context: Matrix<T>,
    pub probs: Vec<Matrix<T>>,
    /// RoPE'd queries and keys, kept for the backward pass.
    pub(crate) q_rot: Matrix<T>,
    pub(crate) k_rot: Matrix<T>,
}

/// Causal multi-head attention over an arbitrary set of keys.
///
/// `q` holds pre-RoPE queries at `q_pos`; `kv` holds pre-RoPE key/value rows
/// at `k_pos`. A key participates for a query iff its position is not later
/// than the query's. Keys are visited in the given order, so identical key
/// sets produce bitwise identical rows.
pub fn attention<T: Real>(
    config: &ModelConfig,
    q: &Matrix<T>,
    q_pos: &[usize],
    kv: &Matrix<T>,
    k_pos: &[usize],
) -> Result<AttentionOutput<T>> {
    let (nh, hd, dk) = (config.n_heads, config.head_dim, config.kv_dim());
    if q.cols() != nh * hd || kv.cols() != 2 * dk || q.rows() != q_pos.len() || kv.rows() != k_pos.len() {
        return Err(Error::Shape("attention operand shapes disagree with the model config".into()));
    }
    let base = config.rope_base;
    let mut q_rot = q.clone();
    for (i, &p) in q_pos.iter().enumerate() {
        for h in 0..nh {
            rope_in_place(&mut q_rot.row_mut(i)[h * hd..(h + 1) * hd], p as f64, base);
        }
    }
    let mut k_rot = Matrix::zeros(kv.rows(), dk);
    for (j, &p) in k_pos.iter().enumerate() {
        let row = k_rot.row_mut(j);
        row.copy_from_slice(&kv.row(j)[..dk]);
        for h in 0..nh {
            rope_in_place(&mut row[h * hd..(h + 1) * hd], p as f64, base);
        }
    }
    let scale = T::one() / T::c(hd as f64).sqrt();
    let mut context = Matrix::zeros(q.rows(), nh * hd);
    let mut probs = Vec::with_capacity(nh);
    let mut scores = Vec::with_capacity(kv.rows());
    for h in 0..nh {
        let mut p_h = Matrix::zeros(q.rows(), kv.rows());
        for i in 0..q.rows() {
            let qi = &q_rot.row(i)[h * hd..(h + 1) * hd];
            scores.clear();
            let mut m = T::neg_infinity();
            for j in 0..kv.rows() {
                if k_pos[j] <= q_pos[i] {
                    let s = dot(qi, &k_rot.row(j)[h * hd..(h + 1) * hd]) * scale;
                    m = m.max(s);
                    scores.push((j, s));
                }
            }
            if scores.is_empty() {
                return Err(Error::Input(format!("query at position {} sees no keys", q_pos[i])));
            }
            let mut z = T::zero();
            for (_, s) in scores.iter_mut() {
                *s = (*s - m).exp();
                z = z + *s;
            }
            let ctx = &mut context.row_mut(i)[h * hd..(h + 1) * hd];
            for &(j, e) in scores.iter() {
                let p = e / z;
                p_h.set(i, j, p);
                let vj = &kv.row(j)[dk + h * hd..dk + (h + 1) * hd];
                for (c, &v) in ctx.iter_mut().zip(vj) {
                    *c = *c + p * v;
                }
            }
        }
        probs.push(p_h);
    }
    Ok(AttentionOutput { context, probs, q_rot, k_rot })
}

/// Gradients of the attention inputs given the upstream context gradient.
pub(crate) fn attention_backward<T: Real>(
    config: &ModelConfig,
    out: &AttentionOutput<T>,
    kv: &Matrix<T>,
    q_pos: &[usize],
    k_pos: &[usize],
    d_ctx: &Matrix<T>,
) -> (Matrix<T>, Matrix<T>) {
    let (nh, hd, dk) = (config.n_heads, config.head_dim, config.kv_dim());
    let scale = T::one() / T::c(hd as f64).sqrt();
    let mut dq_rot = Matrix::zeros(q_pos.len(), nh * hd);
    let mut dk_rot = Matrix::zeros(k_pos.len(), dk);
    let mut d_kv = Matrix::zeros(k_pos.len(), 2 * dk);
    for h in 0..nh {
        let p = &out.probs[h];
        for i in 0..q_pos.len() {
            let dci = &d_ctx.row(i)[h * hd..(h + 1) * hd];
            // dP_ij = dctx_i · v_j ; dS = P ⊙ (dP − Σ P dP)
            let mut dp = vec![T::zero(); k_pos.len()];
            let mut acc = T::zero();
            for j in 0..k_pos.len() {
                let pij = p.get(i, j);
                if pij == T::zero() {
                    continue;
                }
                let vj = &kv.row(j)[dk + h * hd..dk + (h + 1) * hd];
                dp[j] = dot(dci, vj);
                acc = acc + pij * dp[j];
                let dvj = &mut d_kv.row_mut(j)[dk + h * hd..dk + (h + 1) * hd];
                for (d, &g) in dvj.iter_mut().zip(dci) {
                    *d = *d + pij * g;
                }
            }
            for j in 0..k_pos.len() {
                let pij = p.get(i, j);
                if pij == T::zero() {
                    continue;
                }
                let ds = pij * (dp[j] - acc) * scale;
                let qi = &out.q_rot.row(i)[h * hd..(h + 1) * hd];
                let kj = &out.k_rot.row(j)[h * hd..(h + 1) * hd];
                for (d, &k) in dq_rot.row_mut(i)[h * hd..(h + 1) * hd].iter_mut().zip(kj) {
                    *d = *d + ds * k;
                }
                for (d, &q) in dk_rot.row_mut(j)[h * hd..(h + 1) * hd].iter_mut().zip(qi) {
                    *d = *d + ds * q;
                }
            }
        }
    }
    // The transpose of a rotation is the inverse rotation.
    let base = config.rope_base;
    for (i, &pos) in q_pos.iter().enumerate() {
        for h in 0..nh {
            rope_in_place(&mut dq_rot.row_mut(i)[h * hd..(h + 1) * hd], -(pos as f64), base);
        }
    }
    for (j, &pos) in k_pos.iter().enumerate() {
        let mut g = dk_rot.row(j).to_vec();
        for h in 0..nh {
            rope_in_place(&mut g[h * hd..(h + 1) * hd], -(pos as f64), base);
        }
        d_kv.row_mut(j)[..dk].copy_from_slice(&g);
    }
    (dq_rot, d_kv)
}

/// Residual add of the attention output followed by the SwiGLU FFN block.
pub fn finish_layer<T: Real>(layer: &LayerParams<T>, h: &Matrix<T>, context: &Matrix<T>) -> Matrix<T> {
    let attn = matmul(context, &layer.w_o).expect("layer shapes validated");
    let h1 = h.add(&attn).expect("same shape");
    let x = rms_norm(&h1, &layer.ffn_norm);
    let g = matmul(&x, &layer.w_gate).expect("layer shapes validated");
    let u = matmul(&x, &layer.w_up).expect("layer shapes validated");
    let act = g.zip_map(&u, |a, b| swish(a) * b).expect("same shape");
    let f = matmul(&act, &layer.w_down).expect("layer shapes validated");
    h1.add(&f).expect("same shape")
}

pub fn lm_logits<T: Real>(params: &ModelParams<T>, h: &Matrix<T>) -> Matrix<T> {
    let x = rms_norm(h, &params.final_norm);
    matmul(&x, &params.lm_head).expect("head shape validated")
}

/// Full causal forward pass; returns logits and the pre-RoPE KV trace.
pub fn dense_forward<T: Real>(params: &ModelParams<T>, tokens: &[u32]) -> Result<(Matrix<T>, KvTrace<T>)> {
    chunk_prefill(params, tokens, tokens.len().max(1))
}

/// Processes `tokens` in sequential chunks of `chunk_len` against a growing
/// KV cache.
pub fn chunk_prefill<T: Real>(
    params: &ModelParams<T>,
    tokens: &[u32],
    chunk_len: usize,
) -> Result<(Matrix<T>, KvTrace<T>)> {
    if chunk_len == 0 {
        return Err(Error::Input("chunk length must be at least 1".into()));
    }
    let cfg = &params.config;
    if tokens.len() > cfg.max_seq {
        return Err(Error::Input(format!("{} tokens exceed max_seq {}", tokens.len(), cfg.max_seq)));
    }
    params.check_tokens(tokens)?;
    let mut caches: Vec<Vec<T>> = vec![Vec::new(); cfg.n_layers];
    let mut logits = Matrix::zeros(tokens.len(), cfg.vocab);
    let w = cfg.kv_width();
    for start in (0..tokens.len()).step_by(chunk_len) {
        let end = (start + chunk_len).min(tokens.len());
        let mut h = params.embed_tokens(&tokens[start..end])?;
        let q_pos: Vec<usize> = (start..end).collect();
        let k_pos: Vec<usize> = (0..end).collect();
        for (l, layer) in params.layers.iter().enumerate() {
            let proj = project(layer, &h);
            caches[l].extend_from_slice(proj.kv.data());
            let kv = Matrix::from_vec(end, w, caches[l].clone())?;
            let att = attention(cfg, &proj.q, &q_pos, &kv, &k_pos)?;
            h = finish_layer(layer, &h, &att.context);
        }
        let lg = lm_logits(params, &h);
        for i in 0..end - start {
            logits.row_mut(start + i).copy_from_slice(lg.row(i));
        }
    }
    let layers = caches
        .into_iter()
        .map(|c| Matrix::from_vec(tokens.len(), w, c))
        .collect::<Result<Vec<_>>>()?;
    Ok((logits, KvTrace { layers }))
}

/// Mean natural-log cross-entropy over rows.
pub fn ntp_loss<T: Real>(logits: &Matrix<T>, targets: &[u32]) -> Result<T> {
    if logits.rows() != targets.len() {
        return Err(Error::Shape(format!("{} logit rows vs {} targets", logits.rows(), targets.len())));
    }
    if targets.is_empty() {
        return Ok(T::zero());
    }
    let mut total = T::zero();
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        if t as usize >= row.len() {
            return Err(Error::Input(format!("target {t} outside vocabulary")));
        }
        total = total + log_sum_exp(row) - row[t as usize];
    }
    Ok(total / T::c(targets.len() as f64))
}

pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig { max_seq: 64, ..ModelConfig::default() }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model::<f32>(&small(), 42).unwrap();
        let b = init_model::<f32>(&small(), 42).unwrap();
        assert_eq!(a, b);
        let c = init_model::<f32>(&small(), 43).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn init_bound_for_fan_in_six() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m: Matrix<f64> = uniform_init(6, 50, &mut rng);
        assert!(m.data().iter().all(|x| x.abs() <= 1.0));
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig { hidden: 15, ..small() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let zero = ModelConfig { n_layers: 0, ..small() };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn rope_properties() {
        let v: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        assert_eq!(apply_rope(&v, 0, 10000.0).unwrap(), v);
        let r = apply_rope(&v, 17, 10000.0).unwrap();
        for i in 0..4 {
            let n0 = v[2 * i].hypot(v[2 * i + 1]);
            let n1 = r[2 * i].hypot(r[2 * i + 1]);
            assert!((n0 - n1).abs() < 1e-6);
        }
        let back = remove_rope(&r, 17, 10000.0).unwrap();
        for (a, b) in back.iter().zip(&v) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(apply_rope(&[1.0f32, 2.0, 3.0], 1, 10000.0), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_shapes_and_token_errors() {
        let p = init_model::<f32>(&small(), 1).unwrap();
        let (logits, trace) = dense_forward(&p, &[5]).unwrap();
        assert_eq!(logits.shape(), (1, 256));
        assert_eq!(trace.layers.len(), 4);
        assert_eq!(trace.len(), 1);
        assert!(matches!(dense_forward(&p, &[256]), Err(Error::Input(_))));
        assert!(matches!(chunk_prefill(&p, &[1, 2], 0), Err(Error::Input(_))));
    }

    #[test]
    fn ntp_loss_cases() {
        let uniform = Matrix::<f64>::zeros(3, 10);
        let l = ntp_loss(&uniform, &[1, 2, 3]).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        let mut peaked = Matrix::<f64>::zeros(1, 10);
        peaked.set(0, 4, 1000.0);
        assert!(ntp_loss(&peaked, &[4]).unwrap() < 1e-6);
        assert!(matches!(ntp_loss(&uniform, &[1]), Err(Error::Shape(_))));
    }
}
