//! Filter-layer token scoring, budgeted selection and the generation engine.
//!
//! Filter layers attend over their complete uncompressed cache and score
//! every cached token. The sparse layers after a filter layer (its group)
//! attend only over sink, recent and the selected compressed tokens, which
//! are reconstructed on demand into temp slots shared by the group.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::cache::{CacheConfig, CacheManager, LatentMode, RequestId, SlotMapVariant};
use crate::codec::{CodecConfig, CodecParams, CodecVariant};
use crate::error::{Error, Result};
use crate::model::{argmax, attention, finish_layer, lm_logits, project, ModelParams};
use crate::tensor::{Matrix, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub filter_layers: Vec<usize>,
    /// Fraction `r` of cached tokens each sparse group attends to.
    pub budget: f64,
    pub stride: usize,
    pub k_refs: usize,
    pub n_sink: usize,
    pub n_recent: usize,
    pub quantize_latent: bool,
    pub codec_variant: CodecVariant,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            filter_layers: vec![0],
            budget: 0.3,
            stride: 10,
            k_refs: 4,
            n_sink: 4,
            n_recent: 32,
            quantize_latent: false,
            codec_variant: CodecVariant::Light,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if !(self.budget > 0.0 && self.budget <= 1.0) {
            return Err(Error::Config(format!("budget {} outside (0, 1]", self.budget)));
        }
        if self.stride == 0 || self.k_refs == 0 {
            return Err(Error::Config("stride and k_refs must be at least 1".into()));
        }
        if let Some(&l) = self.filter_layers.iter().find(|&&l| l >= n_layers) {
            return Err(Error::Config(format!("filter layer {l} outside 0..{n_layers}")));
        }
        if !self.filter_layers.contains(&0) {
            return Err(Error::Config("layer 0 must be a filter layer so every sparse layer has a selection".into()));
        }
        Ok(())
    }

    /// Distinct filter layers.
    pub fn l_full(&self) -> usize {
        self.filter_layers.iter().collect::<BTreeSet<_>>().len()
    }
}

/// `KR = L_full/L + (L_sparse/L)·(1/s + latent_ratio/q)`.
pub fn keep_ratio(l_full: usize, l_total: usize, stride: usize, latent_ratio: f64, q: f64) -> f64 {
    let l = l_total as f64;
    let full = l_full as f64 / l;
    let sparse = (l_total - l_full) as f64 / l;
    full + sparse * (1.0 / stride as f64 + latent_ratio / q)
}

/// `CR = L_full/L + (L_sparse/L)·r`.
pub fn compute_ratio(l_full: usize, l_total: usize, budget: f64) -> f64 {
    let l = l_total as f64;
    l_full as f64 / l + (l_total - l_full) as f64 / l * budget
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetInputs {
    pub l_full: usize,
    pub l_total: usize,
    pub stride: usize,
    /// `d_c / 2d_k`.
    pub latent_ratio: f64,
    /// Byte shrink of a latent from quantization (1 when unquantized).
    pub q: f64,
    pub budget: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetRatios {
    pub kr: f64,
    pub cr: f64,
    /// The bare sparse-layer budget, reported beside the formula value.
    pub budget: f64,
}

pub fn compute_budget_ratios(inputs: &BudgetInputs) -> Result<BudgetRatios> {
    let BudgetInputs { l_full, l_total, stride, latent_ratio, q, budget } = *inputs;
    if l_total == 0 || l_full > l_total {
        return Err(Error::Config(format!("need 0 < L_total and L_full ≤ L_total, got {l_full}/{l_total}")));
    }
    if stride == 0 || !(q > 0.0) {
        return Err(Error::Config("stride and q must be positive".into()));
    }
    Ok(BudgetRatios { kr: keep_ratio(l_full, l_total, stride, latent_ratio, q), cr: compute_ratio(l_full, l_total, budget), budget })
}

/// `s_j = max_h mean_i A[h, i, j]` over `[heads][L_q × L_kv]` probabilities.
pub fn omnikv_score<T: Real>(attn: &[Matrix<T>]) -> Result<Vec<T>> {
    let first = attn.first().ok_or_else(|| Error::Shape("no attention heads".into()))?;
    let (lq, lkv) = first.shape();
    if attn.iter().any(|a| a.shape() != (lq, lkv)) || lq == 0 {
        return Err(Error::Shape("attention heads disagree in shape or have no queries".into()));
    }
    let n = T::c(lq as f64);
    let mut scores = vec![T::neg_infinity(); lkv];
    for a in attn {
        for (j, s) in scores.iter_mut().enumerate() {
            let mut sum = T::zero();
            for i in 0..lq {
                sum = sum + a.get(i, j);
            }
            *s = s.max(sum / n);
        }
    }
    Ok(scores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult<T> {
    pub scores: Vec<T>,
    /// Ascending logical indices.
    pub selected: Vec<usize>,
}

/// Token budget `⌈r·n⌉`, with a small tolerance so that products such as
/// `0.3·10` that land just above an integer do not round up.
pub fn budget_count(r: f64, n: usize) -> usize {
    (((r * n as f64) - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Protected indices plus the highest-scoring others, up to the budget.
/// Protected indices are always kept, even beyond the budget.
pub fn select_topk_tokens<T: Real>(scores: &[T], r: f64, protected: &BTreeSet<usize>) -> Result<SelectionResult<T>> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::Config(format!("budget {r} outside (0, 1]")));
    }
    let n = scores.len();
    let budget = budget_count(r, n);
    let mut chosen: BTreeSet<usize> = protected.iter().copied().filter(|&p| p < n).collect();
    let mut rest: Vec<usize> = (0..n).filter(|j| !chosen.contains(j)).collect();
    rest.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let room = budget.saturating_sub(chosen.len());
    chosen.extend(rest.into_iter().take(room));
    Ok(SelectionResult { scores: scores.to_vec(), selected: chosen.into_iter().collect() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub model: crate::model::ModelConfig,
    pub model_seed: u64,
    /// Explicit codec shape; defaults to the variant's standard proportions.
    pub codec: Option<CodecConfig>,
    pub codec_seed: u64,
    pub controller: ControllerConfig,
    pub full_capacity: usize,
    pub latent_capacity: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            model: crate::model::ModelConfig::default(),
            model_seed: 0,
            codec: None,
            codec_seed: 0,
            controller: ControllerConfig::default(),
            full_capacity: 16384,
            latent_capacity: 16384,
        }
    }
}

impl EngineConfig {
    pub fn codec_config(&self) -> CodecConfig {
        self.codec.clone().unwrap_or_else(|| CodecConfig::for_kv_width(self.controller.codec_variant, self.model.kv_width()))
    }

    pub fn cache_config(&self) -> CacheConfig {
        let c = &self.controller;
        CacheConfig {
            n_layers: self.model.n_layers,
            kv_width: self.model.kv_width(),
            latent_dim: self.codec_config().latent_dim,
            filter_layers: c.filter_layers.clone(),
            stride: c.stride,
            k_refs: c.k_refs,
            n_sink: c.n_sink,
            n_recent: c.n_recent,
            latent_mode: if c.quantize_latent { LatentMode::Quantized } else { LatentMode::Raw },
            full_capacity: self.full_capacity,
            latent_capacity: self.latent_capacity,
            slot_map: SlotMapVariant::PerLayer,
        }
    }
}

/// Per-step record written to generation transcripts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub token: u32,
    pub selected: usize,
    pub reconstructions: u64,
    pub live_bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation<T> {
    pub prompt: Vec<u32>,
    pub tokens: Vec<u32>,
    /// Logits that produced each generated token (last prompt position first).
    pub logits: Vec<Vec<T>>,
    pub records: Vec<StepRecord>,
}

/// Single-request engine over one model, one codec and one cache.
pub struct Engine<T> {
    model: ModelParams<T>,
    codec: CodecParams<T>,
    config: ControllerConfig,
    cache: CacheManager<T>,
    req: RequestId,
    len: usize,
    groups: Vec<(usize, Vec<usize>)>,
    codec_calls: Vec<u64>,
    last_selected: usize,
    last_selection: Option<SelectionResult<T>>,
}

impl<T: Real> Engine<T> {
    pub fn new(model: ModelParams<T>, codec: CodecParams<T>, config: ControllerConfig, cache: CacheConfig) -> Result<Self> {
        let n = model.config.n_layers;
        config.validate(n)?;
        if codec.config.input_dim != model.config.kv_width() || cache.latent_dim != codec.latent_dim() {
            return Err(Error::Shape("codec widths disagree with the model or cache".into()));
        }
        if cache.filter_layers != config.filter_layers || cache.n_layers != n {
            return Err(Error::Config("cache layout disagrees with the controller".into()));
        }
        let mut filters: Vec<usize> = config.filter_layers.clone();
        filters.sort_unstable();
        filters.dedup();
        let groups = filters
            .iter()
            .enumerate()
            .map(|(i, &f)| {
                let end = filters.get(i + 1).copied().unwrap_or(n);
                (f, (f + 1..end).collect())
            })
            .collect();
        let mut cache = CacheManager::new(cache)?;
        cache.register(0)?;
        Ok(Self {
            model,
            codec,
            config,
            cache,
            req: 0,
            len: 0,
            groups,
            codec_calls: vec![0; n],
            last_selected: 0,
            last_selection: None,
        })
    }

    pub fn from_config(config: &EngineConfig) -> Result<Self> {
        let model = crate::model::init_model(&config.model, config.model_seed)?;
        let codec = CodecParams::init(&config.codec_config(), config.codec_seed)?;
        Self::new(model, codec, config.controller.clone(), config.cache_config())
    }

    pub fn model(&self) -> &ModelParams<T> {
        &self.model
    }

    pub fn codec(&self) -> &CodecParams<T> {
        &self.codec
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn cache(&self) -> &CacheManager<T> {
        &self.cache
    }

    pub fn request_id(&self) -> RequestId {
        self.req
    }

    /// Tokens processed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// `(filter layer, sparse layers)` groups.
    pub fn groups(&self) -> &[(usize, Vec<usize>)] {
        &self.groups
    }

    /// Codec, latent-pool or reference-set uses per layer.
    pub fn codec_calls(&self) -> &[u64] {
        &self.codec_calls
    }

    /// Selection of the first group in the most recent step.
    pub fn last_selection(&self) -> Option<&SelectionResult<T>> {
        self.last_selection.as_ref()
    }

    /// Drops the cache and starts a fresh request.
    pub fn reset(&mut self) -> Result<()> {
        self.cache.release(self.req)?;
        self.req += 1;
        self.cache.register(self.req)?;
        self.len = 0;
        Ok(())
    }

    /// Runs one chunk through every layer and returns its logits.
    fn forward_chunk(&mut self, tokens: &[u32]) -> Result<Matrix<T>> {
        let cfg = self.model.config.clone();
        let n0 = self.len;
        let c = tokens.len();
        if n0 + c > cfg.max_seq {
            return Err(Error::Input(format!("{} tokens exceed max_seq {}", n0 + c, cfg.max_seq)));
        }
        self.model.check_tokens(tokens)?;
        self.cache.reset_stats();
        let q_pos: Vec<usize> = (n0..n0 + c).collect();
        let mut h = self.model.embed_tokens(tokens)?;
        let mut selected_total = 0;
        self.last_selection = None;
        let groups = self.groups.clone();
        for (filter, sparse) in &groups {
            let layer = &self.model.layers[*filter];
            let proj = project(layer, &h);
            for i in 0..c {
                self.cache.push_token(self.req, *filter, proj.kv.row(i))?;
            }
            let (k_pos, kv) = self.cache.resident_kv(self.req, *filter)?;
            let att = attention(&cfg, &proj.q, &q_pos, &kv, &k_pos)?;
            h = finish_layer(layer, &h, &att.context);
            if sparse.is_empty() {
                continue;
            }
            let scores = crate::controller::omnikv_score(&att.probs)?;
            let compressed: BTreeSet<usize> = self.cache.compressed_positions(self.req, sparse[0])?.iter().copied().collect();
            let protected: BTreeSet<usize> = (0..n0 + c).filter(|p| !compressed.contains(p)).collect();
            let sel = select_topk_tokens(&scores, self.config.budget, &protected)?;
            selected_total += sel.selected.len();
            let cached: Vec<usize> = sel.selected.iter().copied().filter(|&p| p < n0).collect();
            if self.last_selection.is_none() {
                self.last_selection = Some(sel);
            }
            let view = self.cache.build_view(self.req, sparse, &cached)?;
            for &l in sparse {
                let layer = &self.model.layers[l];
                let proj = project(layer, &h);
                self.codec_calls[l] += 1;
                let past = self.cache.materialize(&view, l, &self.codec)?;
                let mut rows = past.into_data();
                rows.extend_from_slice(proj.kv.data());
                let kv = Matrix::from_vec(view.positions.len() + c, cfg.kv_width(), rows)?;
                let k_pos: Vec<usize> = view.positions.iter().copied().chain(n0..n0 + c).collect();
                let att = attention(&cfg, &proj.q, &q_pos, &kv, &k_pos)?;
                for i in 0..c {
                    self.cache.push_token(self.req, l, proj.kv.row(i))?;
                }
                h = finish_layer(layer, &h, &att.context);
            }
            self.cache.post_forward(view)?;
        }
        for l in 0..cfg.n_layers {
            if !self.config.filter_layers.contains(&l) {
                if self.cache.migrate_overflow(self.req, l, &self.codec)? > 0 {
                    self.codec_calls[l] += 1;
                }
            }
        }
        self.len += c;
        self.last_selected = selected_total;
        Ok(lm_logits(&self.model, &h))
    }

    /// Processes `tokens` in chunks of `chunk_len`; returns the logits of the
    /// final position, or `None` for an empty prompt.
    pub fn prefill(&mut self, tokens: &[u32], chunk_len: usize) -> Result<Option<Vec<T>>> {
        if chunk_len == 0 {
            return Err(Error::Input("chunk length must be at least 1".into()));
        }
        if self.len + tokens.len() > self.model.config.max_seq {
            return Err(Error::Input(format!("{} tokens exceed max_seq {}", self.len + tokens.len(), self.model.config.max_seq)));
        }
        let mut last = None;
        for chunk in tokens.chunks(chunk_len) {
            let logits = self.forward_chunk(chunk)?;
            last = Some(logits.row(logits.rows() - 1).to_vec());
        }
        Ok(last)
    }

    /// Feeds one token and returns the next-token logits.
    pub fn decode_step(&mut self, token: u32) -> Result<Vec<T>> {
        if self.len == 0 {
            return Err(Error::Lifecycle("decode before prefill".into()));
        }
        let logits = self.forward_chunk(&[token])?;
        Ok(logits.row(0).to_vec())
    }

    pub fn live_bytes(&self) -> Result<usize> {
        let a = self.cache.memory_audit(self.req)?;
        Ok(a.full_bytes + a.latent_bytes)
    }

    /// Greedy generation of `n_new` tokens after a chunked prefill.
    pub fn generate(&mut self, prompt: &[u32], n_new: usize, chunk_len: usize) -> Result<Generation<T>> {
        if prompt.is_empty() {
            return Err(Error::Input("empty prompt".into()));
        }
        let mut logits = self.prefill(prompt, chunk_len)?.expect("non-empty prompt");
        let mut out = Generation { prompt: prompt.to_vec(), tokens: Vec::new(), logits: Vec::new(), records: Vec::new() };
        for step in 0..n_new {
            let token = argmax(&logits) as u32;
            out.tokens.push(token);
            out.logits.push(logits);
            out.records.push(StepRecord {
                step,
                token,
                selected: self.last_selected,
                reconstructions: self.cache.stats().reconstructions,
                live_bytes: self.live_bytes()?,
            });
            if step + 1 == n_new {
                break;
            }
            logits = self.decode_step(token)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratios_from_tables() {
        let kr = |l_full, q| keep_ratio(l_full, 32, 10, 0.25, q);
        assert!((kr(5, 1.0) - 0.4515625).abs() < 1e-12);
        assert!((kr(4, 1.0) - 0.43125).abs() < 1e-12);
        assert!((kr(5, 4.0) - 0.29336).abs() < 1e-5);
        assert!((compute_ratio(4, 32, 0.2) - 0.3).abs() < 1e-12);
        assert_eq!(keep_ratio(32, 32, 10, 0.25, 1.0), 1.0);
        assert_eq!(compute_ratio(32, 32, 0.1), 1.0);
    }

    #[test]
    fn score_examples() {
        let a = vec![Matrix::from_fn(3, 4, |_, _| 0.25f64); 2];
        assert_eq!(omnikv_score(&a).unwrap(), vec![0.25; 4]);
        let one = vec![Matrix::from_vec(1, 3, vec![0.2f64, 0.5, 0.3]).unwrap()];
        assert_eq!(omnikv_score(&one).unwrap(), vec![0.2, 0.5, 0.3]);
        assert!(matches!(omnikv_score::<f64>(&[]), Err(Error::Shape(_))));
    }

    #[test]
    fn selection_examples() {
        let s = vec![0.0f64; 10];
        assert_eq!(select_topk_tokens(&s, 0.25, &BTreeSet::new()).unwrap().selected, vec![0, 1, 2]);
        assert_eq!(select_topk_tokens(&s, 1.0, &BTreeSet::new()).unwrap().selected.len(), 10);
        assert_eq!(budget_count(0.3, 10), 3);
        let scores = vec![0.1, 0.9, 0.2, 0.8];
        let prot: BTreeSet<usize> = [0].into();
        assert_eq!(select_topk_tokens(&scores, 0.5, &prot).unwrap().selected, vec![0, 1]);
    }
}
