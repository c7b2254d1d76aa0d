//! Codec training against a frozen toy model.
//!
//! Each step runs a dense ground-truth pass, then a layer-by-layer forward in
//! which every compressed layer retrieves references, compresses and
//! reconstructs each token, and attends over the reconstructed KV. The loss
//! is the reconstruction error plus next-token cross-entropy; gradients reach
//! the codec through both terms.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::CodecParams;
use crate::error::{Error, Result};
use crate::model::{dense_forward, KvTrace, ModelParams};
use crate::reference::ReferenceSet;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Matrix, Real};

/// Which KV a reference token contributes to later retrievals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceSource {
    /// The token's reconstructed KV, as at inference time.
    #[default]
    Reconstructed,
    /// The token's raw KV.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradMode {
    #[default]
    Analytic,
    /// Analytic gradients, plus a central-difference check of sampled
    /// coordinates on the first step.
    FiniteDiffCheck,
}

/// Per-token compression settings shared by the forward pass and training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeltaOptions {
    pub stride: usize,
    pub k_refs: usize,
    /// Layers that keep their raw KV.
    pub filter_layers: Vec<usize>,
    pub reference_source: ReferenceSource,
}

impl Default for DeltaOptions {
    fn default() -> Self {
        Self { stride: 10, k_refs: 4, filter_layers: vec![0], reference_source: ReferenceSource::Reconstructed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seq_len: usize,
    pub seed: u64,
    pub grad_mode: GradMode,
    /// `(mse, ntp)` loss coefficients.
    pub loss_weights: (f64, f64),
    pub delta: DeltaOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            warmup_fraction: 0.02,
            total_steps: 500,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            seq_len: 64,
            seed: 0,
            grad_mode: GradMode::Analytic,
            loss_weights: (1.0, 1.0),
            delta: DeltaOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1)".into()));
        }
        if self.seq_len == 0 {
            return Err(Error::Config("seq_len must be at least 1".into()));
        }
        if self.delta.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub ntp: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub mse: f64,
    pub ntp: f64,
    pub total: f64,
    pub lr: f64,
}

/// Result of [`deltakv_forward`]. The tape borrows the model and codec.
pub struct DeltaForward<'a, T> {
    pub logits: Matrix<T>,
    pub mse: T,
    pub reconstructed: KvTrace<T>,
    pub tape: Tape<'a, T>,
    logits_node: NodeId,
    mse_node: NodeId,
}

impl<T: Real> DeltaForward<'_, T> {
    /// Codec gradients of `mse_up·mse + ntp_up·ntp`.
    pub fn grads(&mut self, targets: &[u32], mse_up: T, ntp_up: T) -> Result<CodecParams<T>> {
        let ce = self.tape.cross_entropy(self.logits_node, targets)?;
        self.tape.backward(&[(self.mse_node, mse_up), (ce, ntp_up)])
    }
}

fn check_codec<T: Real>(model: &ModelParams<T>, codec: &CodecParams<T>, opts: &DeltaOptions) -> Result<()> {
    if codec.config.input_dim != model.config.kv_width() {
        return Err(Error::Shape(format!(
            "codec input width {} vs model KV width {}",
            codec.config.input_dim,
            model.config.kv_width()
        )));
    }
    if opts.stride == 0 {
        return Err(Error::Config("stride must be at least 1".into()));
    }
    Ok(())
}

/// Layer-by-layer forward with per-token retrieval, compression and
/// reconstruction on every non-filter layer.
pub fn deltakv_forward<'a, T: Real>(
    model: &'a ModelParams<T>,
    codec: &'a CodecParams<T>,
    tokens: &[u32],
    opts: &DeltaOptions,
) -> Result<DeltaForward<'a, T>> {
    check_codec(model, codec, opts)?;
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    let (_, truth) = dense_forward(model, tokens)?;
    forward_against(model, codec, tokens, opts, &truth)
}

// Truth KV does not depend on the codec, so callers probing many codecs
// compute it once.
fn forward_against<'a, T: Real>(
    model: &'a ModelParams<T>,
    codec: &'a CodecParams<T>,
    tokens: &[u32],
    opts: &DeltaOptions,
    truth: &KvTrace<T>,
) -> Result<DeltaForward<'a, T>> {
    let cfg = &model.config;
    let w = cfg.kv_width();
    let n = tokens.len();
    let mut tape = Tape::new(cfg, codec);
    let mut h = tape.leaf(model.embed_tokens(tokens)?);
    let mut sq_terms = Vec::new();
    let mut recon_layers = Vec::with_capacity(cfg.n_layers);
    for (l, layer) in model.layers.iter().enumerate() {
        let x = tape.rms_norm(h, &layer.attn_norm);
        let q = tape.matmul_w(x, &layer.w_q)?;
        let k = tape.matmul_w(x, &layer.w_k)?;
        let v = tape.matmul_w(x, &layer.w_v)?;
        let kv = tape.concat(k, v);
        let kv_hat = if opts.filter_layers.contains(&l) {
            kv
        } else {
            let mut refs = ReferenceSet::<T>::new(opts.stride, w)?;
            let mut ref_nodes = Vec::new();
            let mut rows = Vec::with_capacity(n);
            for i in 0..n {
                let raw = tape.row(kv, i);
                let entries = refs.topk(tape.value(raw).data(), opts.k_refs, i);
                let bar = if entries.is_empty() {
                    tape.leaf(Matrix::zeros(1, w))
                } else {
                    tape.mean(entries.iter().map(|&e| ref_nodes[e]).collect())?
                };
                let hat = tape.codec_round_trip(raw, bar)?;
                sq_terms.push(tape.sq_err(hat, truth.token(l, i)));
                let src = match opts.reference_source {
                    ReferenceSource::Reconstructed => hat,
                    ReferenceSource::Raw => raw,
                };
                if refs.maybe_append(i, tape.value(src).data())? {
                    ref_nodes.push(src);
                }
                rows.push(hat);
            }
            tape.stack(rows)?
        };
        recon_layers.push(tape.value(kv_hat).clone());
        let ctx = tape.attention(q, kv_hat)?;
        let o = tape.matmul_w(ctx, &layer.w_o)?;
        let h1 = tape.add(h, o)?;
        let x2 = tape.rms_norm(h1, &layer.ffn_norm);
        let g = tape.matmul_w(x2, &layer.w_gate)?;
        let u = tape.matmul_w(x2, &layer.w_up)?;
        let a = tape.swiglu(g, u)?;
        let f = tape.matmul_w(a, &layer.w_down)?;
        h = tape.add(h1, f)?;
    }
    let xf = tape.rms_norm(h, &model.final_norm);
    let logits_node = tape.matmul_w(xf, &model.lm_head)?;
    let mse_node = if sq_terms.is_empty() { tape.leaf(Matrix::zeros(1, 1)) } else { tape.sum(sq_terms)? };
    Ok(DeltaForward {
        logits: tape.value(logits_node).clone(),
        mse: tape.scalar(mse_node),
        reconstructed: KvTrace { layers: recon_layers },
        tape,
        logits_node,
        mse_node,
    })
}

/// `total = mse + ntp`, unweighted.
pub fn hybrid_loss<T: Real>(mse: T, logits: &Matrix<T>, targets: &[u32]) -> Result<LossBreakdown> {
    let ntp = crate::model::ntp_loss(logits, targets)?.f64();
    let mse = mse.f64();
    Ok(LossBreakdown { mse, ntp, total: mse + ntp })
}

/// Weighted hybrid loss of one sequence, forward only.
pub fn sequence_loss<T: Real>(
    model: &ModelParams<T>,
    codec: &CodecParams<T>,
    tokens: &[u32],
    targets: &[u32],
    opts: &DeltaOptions,
    weights: (f64, f64),
) -> Result<f64> {
    let fwd = deltakv_forward(model, codec, tokens, opts)?;
    let b = hybrid_loss(fwd.mse, &fwd.logits, targets)?;
    Ok(weights.0 * b.mse + weights.1 * b.ntp)
}

/// Learning-rate multiplier: linear warmup to 1 over
/// `warmup_fraction·total_steps`, then linear decay to 0 at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_fraction: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let s = step as f64;
    let total = total_steps as f64;
    let warm = warmup_fraction * total;
    if s < warm {
        s / warm
    } else {
        ((total - s) / (total - warm)).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T> {
    pub m: Vec<Matrix<T>>,
    pub v: Vec<Matrix<T>>,
    pub step: u64,
}

impl<T: Real> AdamWState<T> {
    pub fn new(params: &CodecParams<T>) -> Self {
        let zeros: Vec<Matrix<T>> = params.tensors().iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamWHyper {
    fn from(c: &TrainConfig) -> Self {
        Self { lr: c.learning_rate, beta1: c.beta1, beta2: c.beta2, eps: c.eps, weight_decay: c.weight_decay }
    }
}

/// One decoupled-weight-decay Adam update with bias correction at the
/// effective rate `hyper.lr · factor`.
pub fn adamw_step<T: Real>(
    params: &mut CodecParams<T>,
    grads: &CodecParams<T>,
    state: &mut AdamWState<T>,
    hyper: &AdamWHyper,
    factor: f64,
) -> Result<()> {
    if grads.tensors().len() != params.tensors().len() || state.m.len() != params.tensors().len() {
        return Err(Error::Shape("optimizer state does not match parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let lr = hyper.lr * factor;
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (slot, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = &grads.tensors()[slot];
        if g.shape() != p.shape() {
            return Err(Error::Shape(format!("gradient slot {slot} has shape {:?}", g.shape())));
        }
        let m = state.m[slot].data_mut();
        let v = state.v[slot].data_mut();
        for (i, x) in p.data_mut().iter_mut().enumerate() {
            let gi = g.data()[i].f64();
            let mi = b1 * m[i].f64() + (1.0 - b1) * gi;
            let vi = b2 * v[i].f64() + (1.0 - b2) * gi * gi;
            m[i] = T::c(mi);
            v[i] = T::c(vi);
            let decayed = x.f64() * (1.0 - lr * hyper.weight_decay);
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + hyper.eps);
            *x = T::c(decayed - update);
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub codec: CodecParams<T>,
    pub history: Vec<LossRecord>,
    /// Largest relative error of the first-step gradient check, if run.
    pub fd_max_rel_error: Option<f64>,
}

/// Denominator floor for relative errors, as a fraction of `max(|L|, 1)`.
/// A central difference carries rounding noise near `ε·|L|/h`, so
/// coordinates whose true gradient is zero would otherwise report noise as
/// relative error.
pub const FD_REL_FLOOR: f64 = 1e-5;

/// Central differences of the weighted loss against the analytic gradient
/// for the given `(slot, index)` coordinates. Returns the largest relative
/// error `|a − n| / max(|a|, |n|, FD_REL_FLOOR·max(|L|, 1))`.
#[allow(clippy::too_many_arguments)]
pub fn finite_diff_check<T: Real>(
    model: &ModelParams<T>,
    codec: &CodecParams<T>,
    analytic: &CodecParams<T>,
    tokens: &[u32],
    targets: &[u32],
    opts: &DeltaOptions,
    weights: (f64, f64),
    coords: &[(usize, usize)],
    h: f64,
) -> Result<f64> {
    check_codec(model, codec, opts)?;
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    let (_, truth) = dense_forward(model, tokens)?;
    let loss = |c: &CodecParams<T>| -> Result<f64> {
        let fwd = forward_against(model, c, tokens, opts, &truth)?;
        let b = hybrid_loss(fwd.mse, &fwd.logits, targets)?;
        Ok(weights.0 * b.mse + weights.1 * b.ntp)
    };
    let floor = FD_REL_FLOOR * loss(codec)?.abs().max(1.0);
    let mut worst: f64 = 0.0;
    let mut probe = codec.clone();
    for &(slot, idx) in coords {
        let orig = probe.tensors()[slot].data()[idx];
        probe.tensors_mut()[slot].data_mut()[idx] = T::c(orig.f64() + h);
        let up = loss(&probe)?;
        probe.tensors_mut()[slot].data_mut()[idx] = T::c(orig.f64() - h);
        let down = loss(&probe)?;
        probe.tensors_mut()[slot].data_mut()[idx] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.tensors()[slot].data()[idx].f64();
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Trains the codec on `total_steps` sequences drawn from `corpus`. Each
/// sequence must carry `seq_len + 1` tokens: inputs plus shifted targets.
pub fn train<T: Real>(
    model: &ModelParams<T>,
    codec: &CodecParams<T>,
    corpus: &mut dyn Iterator<Item = Vec<u32>>,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    check_codec(model, codec, &config.delta)?;
    let mut params = codec.clone();
    let mut state = AdamWState::new(&params);
    let hyper = AdamWHyper::from(config);
    let mut history = Vec::with_capacity(config.total_steps);
    let mut fd = None;
    let (wm, wn) = config.loss_weights;
    for step in 0..config.total_steps {
        let seq = corpus
            .next()
            .ok_or_else(|| Error::Input(format!("corpus exhausted after {step} sequences")))?;
        if seq.len() != config.seq_len + 1 {
            return Err(Error::Input(format!("sequence of {} tokens, expected {}", seq.len(), config.seq_len + 1)));
        }
        let (tokens, targets) = (&seq[..config.seq_len], &seq[1..]);
        let grads = {
            let mut fwd = deltakv_forward(model, &params, tokens, &config.delta)?;
            let b = hybrid_loss(fwd.mse, &fwd.logits, targets)?;
            let factor = lr_schedule(step, config.total_steps, config.warmup_fraction);
            history.push(LossRecord { step, mse: b.mse, ntp: b.ntp, total: b.total, lr: config.learning_rate * factor });
            fwd.grads(targets, T::c(wm), T::c(wn))?
        };
        if step == 0 && config.grad_mode == GradMode::FiniteDiffCheck {
            let coords = sample_coords(&params, 8, config.seed);
            let h = if T::BYTES == 8 { 1e-5 } else { 1e-2 };
            fd = Some(finite_diff_check(model, &params, &grads, tokens, targets, &config.delta, config.loss_weights, &coords, h)?);
        }
        let factor = lr_schedule(step, config.total_steps, config.warmup_fraction);
        adamw_step(&mut params, &grads, &mut state, &hyper, factor)?;
    }
    Ok(TrainOutcome { codec: params, history, fd_max_rel_error: fd })
}

/// Seeded sample of `(slot, index)` parameter coordinates.
pub fn sample_coords<T: Real>(params: &CodecParams<T>, n: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_fd);
    let sizes: Vec<usize> = params.tensors().iter().map(|m| m.data().len()).collect();
    (0..n)
        .map(|_| {
            let slot = rng.gen_range(0..sizes.len());
            (slot, rng.gen_range(0..sizes[slot]))
        })
        .collect()
}

pub fn write_loss_csv(history: &[LossRecord], out: &mut dyn Write) -> Result<()> {
    writeln!(out, "step,mse,ntp,total,lr")?;
    for r in history {
        writeln!(out, "{},{:.8e},{:.8e},{:.8e},{:.8e}", r.step, r.mse, r.ntp, r.total, r.lr)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{CodecConfig, CodecVariant};
    use crate::model::{init_model, ModelConfig};

    fn small() -> ModelParams<f64> {
        let cfg = ModelConfig { n_layers: 2, n_heads: 2, head_dim: 4, hidden: 8, vocab: 16, ffn_dim: 12, ..Default::default() };
        init_model(&cfg, 3).unwrap()
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_schedule(10, 500, 0.02), 1.0);
        assert!(lr_schedule(500, 500, 0.02).abs() < 1e-9);
        assert_eq!(lr_schedule(5, 500, 0.02), 0.5);
        assert_eq!(lr_schedule(0, 10, 0.0), 1.0);
    }

    #[test]
    fn zero_grad_decay_only() {
        let codec = CodecParams::<f64>::init(&CodecConfig::for_kv_width(CodecVariant::Light, 8), 1).unwrap();
        let mut p = codec.clone();
        let mut st = AdamWState::new(&p);
        let hyper = AdamWHyper { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.5 };
        adamw_step(&mut p, &codec.zeros_like(), &mut st, &hyper, 1.0).unwrap();
        for (a, b) in p.tensors().iter().zip(codec.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x, y * (1.0 - 0.05));
            }
        }
    }

    #[test]
    fn identity_codec_on_zero_mse() {
        let m = small();
        let c = CodecParams::init(&CodecConfig::for_kv_width(CodecVariant::IdentityLinear, 16), 0).unwrap();
        let opts = DeltaOptions { stride: 2, k_refs: 2, filter_layers: vec![0], ..Default::default() };
        let fwd = deltakv_forward(&m, &c, &[1, 2, 3, 4, 5], &opts).unwrap();
        assert!(fwd.mse < 1e-20);
        let (dense, _) = dense_forward(&m, &[1, 2, 3, 4, 5]).unwrap();
        for (a, b) in fwd.logits.data().iter().zip(dense.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn width_mismatch() {
        let m = small();
        let c = CodecParams::<f64>::init(&CodecConfig::for_kv_width(CodecVariant::Light, 12), 0).unwrap();
        assert!(matches!(deltakv_forward(&m, &c, &[1], &DeltaOptions::default()), Err(Error::Shape(_))));
    }

    #[test]
    fn exhausted_corpus() {
        let m = small();
        let c = CodecParams::init(&CodecConfig::for_kv_width(CodecVariant::Light, 16), 0).unwrap();
        let cfg = TrainConfig { total_steps: 2, seq_len: 4, ..Default::default() };
        let mut it = vec![vec![1u32, 2, 3, 4, 5]].into_iter();
        assert!(matches!(train(&m, &c, &mut it, &cfg), Err(Error::Input(_))));
    }
}
