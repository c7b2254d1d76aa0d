//! Residual compressor / decompressor.
//!
//! A latent code is the difference of two encoder passes,
//! `z = f_c(kv) − f_c(kv̄)`, and a token is rebuilt as `f_d(z) + kv̄`.
//! Three variants share that contract:
//!
//! * `Heavy`: GeLU MLP encoder and GeLU MLP decoder, both with biases.
//! * `Light`: SwiGLU encoder `(swish(x·W1) ⊙ x·W2)·W3` and a bias-free linear
//!   decoder `z·Wd`.
//! * `IdentityLinear`: linear encoder and decoder of full width, initialised to
//!   the identity, so a round trip is lossless up to rounding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::uniform_init;
use crate::tensor::{gelu, gelu_grad, swish, swish_grad, vecmat, Matrix, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodecVariant {
    Heavy,
    Light,
    IdentityLinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    /// `2·d_k`.
    pub input_dim: usize,
    /// `d_c`.
    pub latent_dim: usize,
    /// Encoder hidden width `d_h`.
    pub hidden: usize,
    /// Heavy decoder hidden width `d_h′`.
    pub decoder_hidden: usize,
    pub variant: CodecVariant,
}

impl CodecConfig {
    /// Default proportions for a KV width: `d_c = ¼·2d_k`, heavy `d_h = 4·2d_k`,
    /// light `d_h = 3·2d_k`, `d_h′ = d_h`.
    pub fn for_kv_width(variant: CodecVariant, kv_width: usize) -> Self {
        let (latent_dim, hidden) = match variant {
            CodecVariant::Heavy => ((kv_width / 4).max(1), 4 * kv_width),
            CodecVariant::Light => ((kv_width / 4).max(1), 3 * kv_width),
            CodecVariant::IdentityLinear => (kv_width, kv_width),
        };
        Self { input_dim: kv_width, latent_dim, hidden, decoder_hidden: hidden, variant }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.latent_dim == 0 {
            return Err(Error::Config("codec dimensions must be at least 1".into()));
        }
        match self.variant {
            CodecVariant::IdentityLinear if self.latent_dim != self.input_dim => Err(Error::Config(
                "identity-linear codec needs latent_dim == input_dim".into(),
            )),
            CodecVariant::Heavy if self.hidden == 0 || self.decoder_hidden == 0 => {
                Err(Error::Config("heavy codec hidden widths must be at least 1".into()))
            }
            CodecVariant::Light if self.hidden == 0 => Err(Error::Config("light codec hidden width must be at least 1".into())),
            _ => Ok(()),
        }
    }

    /// Exact number of learnable scalars.
    pub fn param_count(&self) -> usize {
        let (i, c, h, h2) = (self.input_dim, self.latent_dim, self.hidden, self.decoder_hidden);
        match self.variant {
            CodecVariant::Heavy => i * h + h + h * c + c + c * h2 + h2 + h2 * i + i,
            CodecVariant::Light => 2 * i * h + h * c + c * i,
            CodecVariant::IdentityLinear => 2 * i * i,
        }
    }
}

/// Codec weights. Biases are stored as `1 × n` matrices so every parameter is
/// a [`Matrix`]; the same type carries gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecParams<T> {
    pub config: CodecConfig,
    tensors: Vec<Matrix<T>>,
}

// Tensor slots per variant.
const WC1: usize = 0;
const BC1: usize = 1;
const WC2: usize = 2;
const BC2: usize = 3;
const WD1: usize = 4;
const BD1: usize = 5;
const WD2: usize = 6;
const BD2: usize = 7;
const W1: usize = 0;
const W2: usize = 1;
const W3: usize = 2;
const WD: usize = 3;
const LIN_C: usize = 0;
const LIN_D: usize = 1;

impl<T: Real> CodecParams<T> {
    pub fn tensor_names(variant: CodecVariant) -> &'static [&'static str] {
        match variant {
            CodecVariant::Heavy => &["w_c1", "b_c1", "w_c2", "b_c2", "w_d1", "b_d1", "w_d2", "b_d2"],
            CodecVariant::Light => &["w_1", "w_2", "w_3", "w_d"],
            CodecVariant::IdentityLinear => &["w_c", "w_d"],
        }
    }

    pub fn tensor_shapes(config: &CodecConfig) -> Vec<(usize, usize)> {
        let (i, c, h, h2) = (config.input_dim, config.latent_dim, config.hidden, config.decoder_hidden);
        match config.variant {
            CodecVariant::Heavy => vec![(i, h), (1, h), (h, c), (1, c), (c, h2), (1, h2), (h2, i), (1, i)],
            CodecVariant::Light => vec![(i, h), (i, h), (h, c), (c, i)],
            CodecVariant::IdentityLinear => vec![(i, i), (i, i)],
        }
    }

    /// Seeded uniform ±sqrt(6/fan_in) weights, zero biases, final decoder
    /// layer scaled by 0.1; the identity-linear variant starts at identity.
    pub fn init(config: &CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = match config.variant {
            CodecVariant::IdentityLinear => {
                vec![Matrix::identity(config.input_dim), Matrix::identity(config.input_dim)]
            }
            variant => {
                let final_slot = if variant == CodecVariant::Heavy { WD2 } else { WD };
                Self::tensor_shapes(config)
                    .into_iter()
                    .enumerate()
                    .map(|(slot, (r, c))| {
                        if r == 1 {
                            Matrix::zeros(r, c)
                        } else {
                            let m = uniform_init(r, c, &mut rng);
                            if slot == final_slot {
                                m.scale(T::c(0.1))
                            } else {
                                m
                            }
                        }
                    })
                    .collect()
            }
        };
        Ok(Self { config: config.clone(), tensors })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect(),
        }
    }

    pub fn from_tensors(config: CodecConfig, tensors: Vec<Matrix<T>>) -> Result<Self> {
        config.validate()?;
        let shapes = Self::tensor_shapes(&config);
        if shapes.len() != tensors.len() || shapes.iter().zip(&tensors).any(|(s, m)| *s != m.shape()) {
            return Err(Error::Shape("codec tensors do not match the codec config".into()));
        }
        Ok(Self { config, tensors })
    }

    pub fn tensors(&self) -> &[Matrix<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.tensors
    }

    pub fn named_tensors(&self) -> Vec<(String, Matrix<T>)> {
        Self::tensor_names(self.config.variant)
            .iter()
            .zip(&self.tensors)
            .map(|(n, m)| (n.to_string(), m.clone()))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|m| m.data().len()).sum()
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> CodecParams<U> {
        CodecParams { config: self.config.clone(), tensors: self.tensors.iter().map(Matrix::cast).collect() }
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn check_input(&self, v: &[T], what: &str) -> Result<()> {
        if v.len() != self.config.input_dim {
            return Err(Error::Shape(format!("{what} of length {} for codec width {}", v.len(), self.config.input_dim)));
        }
        Ok(())
    }

    /// Encoder `f_c`.
    pub fn encode(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_input(x, "encoder input")?;
        Ok(self.encode_traced(x).out)
    }

    /// Decoder `f_d`.
    pub fn decode(&self, z: &[T]) -> Result<Vec<T>> {
        if z.len() != self.config.latent_dim {
            return Err(Error::Shape(format!("latent of length {} for d_c {}", z.len(), self.config.latent_dim)));
        }
        Ok(self.decode_traced(z).out)
    }

    fn encode_traced(&self, x: &[T]) -> EncoderTrace<T> {
        let t = &self.tensors;
        match self.config.variant {
            CodecVariant::Heavy => {
                let pre = add_bias(vecmat(x, &t[WC1]).expect("shape"), &t[BC1]);
                let act: Vec<T> = pre.iter().map(|&a| gelu(a)).collect();
                let out = add_bias(vecmat(&act, &t[WC2]).expect("shape"), &t[BC2]);
                EncoderTrace { x: x.to_vec(), pre, aux: Vec::new(), act, out }
            }
            CodecVariant::Light => {
                let gate = vecmat(x, &t[W1]).expect("shape");
                let up = vecmat(x, &t[W2]).expect("shape");
                let act: Vec<T> = gate.iter().zip(&up).map(|(&g, &u)| swish(g) * u).collect();
                let out = vecmat(&act, &t[W3]).expect("shape");
                EncoderTrace { x: x.to_vec(), pre: gate, aux: up, act, out }
            }
            CodecVariant::IdentityLinear => {
                let out = vecmat(x, &t[LIN_C]).expect("shape");
                EncoderTrace { x: x.to_vec(), pre: Vec::new(), aux: Vec::new(), act: Vec::new(), out }
            }
        }
    }

    fn decode_traced(&self, z: &[T]) -> DecoderTrace<T> {
        let t = &self.tensors;
        match self.config.variant {
            CodecVariant::Heavy => {
                let pre = add_bias(vecmat(z, &t[WD1]).expect("shape"), &t[BD1]);
                let act: Vec<T> = pre.iter().map(|&a| gelu(a)).collect();
                let out = add_bias(vecmat(&act, &t[WD2]).expect("shape"), &t[BD2]);
                DecoderTrace { z: z.to_vec(), pre, act, out }
            }
            CodecVariant::Light => {
                DecoderTrace { z: z.to_vec(), pre: Vec::new(), act: Vec::new(), out: vecmat(z, &t[WD]).expect("shape") }
            }
            CodecVariant::IdentityLinear => DecoderTrace {
                z: z.to_vec(),
                pre: Vec::new(),
                act: Vec::new(),
                out: vecmat(z, &t[LIN_D]).expect("shape"),
            },
        }
    }

    /// `z = f_c(kv) − f_c(kv̄)`.
    pub fn compress(&self, kv: &[T], kv_bar: &[T]) -> Result<Vec<T>> {
        self.check_input(kv, "kv")?;
        self.check_input(kv_bar, "reference mean")?;
        let a = self.encode_traced(kv).out;
        let b = self.encode_traced(kv_bar).out;
        Ok(a.iter().zip(&b).map(|(&x, &y)| x - y).collect())
    }

    /// `f_d(z) + kv̄`.
    pub fn reconstruct(&self, z: &[T], kv_bar: &[T]) -> Result<Vec<T>> {
        self.check_input(kv_bar, "reference mean")?;
        let d = self.decode(z)?;
        Ok(d.iter().zip(kv_bar).map(|(&x, &y)| x + y).collect())
    }

    /// Compress-then-reconstruct with every intermediate kept for
    /// [`Self::backward`].
    pub fn forward_traced(&self, kv: &[T], kv_bar: &[T]) -> Result<CodecTrace<T>> {
        self.check_input(kv, "kv")?;
        self.check_input(kv_bar, "reference mean")?;
        let enc_kv = self.encode_traced(kv);
        let enc_bar = self.encode_traced(kv_bar);
        let z: Vec<T> = enc_kv.out.iter().zip(&enc_bar.out).map(|(&a, &b)| a - b).collect();
        let dec = self.decode_traced(&z);
        let out = dec.out.iter().zip(kv_bar).map(|(&a, &b)| a + b).collect();
        Ok(CodecTrace { enc_kv, enc_bar, dec, out })
    }

    /// Reverse pass through a traced reconstruction. Parameter gradients are
    /// accumulated into `grads`; returns the gradients of `kv` and `kv̄`.
    pub fn backward(&self, trace: &CodecTrace<T>, upstream: &[T], grads: &mut Self) -> Result<(Vec<T>, Vec<T>)> {
        self.check_input(upstream, "upstream gradient")?;
        let d_z = self.decoder_backward(&trace.dec, upstream, grads);
        let d_kv = self.encoder_backward(&trace.enc_kv, &d_z, grads);
        let neg: Vec<T> = d_z.iter().map(|&g| -g).collect();
        let mut d_bar = self.encoder_backward(&trace.enc_bar, &neg, grads);
        for (d, &u) in d_bar.iter_mut().zip(upstream) {
            *d = *d + u;
        }
        Ok((d_kv, d_bar))
    }

    fn decoder_backward(&self, tr: &DecoderTrace<T>, dy: &[T], g: &mut Self) -> Vec<T> {
        let t = &self.tensors;
        match self.config.variant {
            CodecVariant::Heavy => {
                accumulate_bias(&mut g.tensors[BD2], dy);
                accumulate_outer(&mut g.tensors[WD2], &tr.act, dy);
                let d_act = matvec_t(&t[WD2], dy);
                let d_pre: Vec<T> = d_act.iter().zip(&tr.pre).map(|(&d, &a)| d * gelu_grad(a)).collect();
                accumulate_bias(&mut g.tensors[BD1], &d_pre);
                accumulate_outer(&mut g.tensors[WD1], &tr.z, &d_pre);
                matvec_t(&t[WD1], &d_pre)
            }
            CodecVariant::Light => {
                accumulate_outer(&mut g.tensors[WD], &tr.z, dy);
                matvec_t(&t[WD], dy)
            }
            CodecVariant::IdentityLinear => {
                accumulate_outer(&mut g.tensors[LIN_D], &tr.z, dy);
                matvec_t(&t[LIN_D], dy)
            }
        }
    }

    fn encoder_backward(&self, tr: &EncoderTrace<T>, dy: &[T], g: &mut Self) -> Vec<T> {
        let t = &self.tensors;
        match self.config.variant {
            CodecVariant::Heavy => {
                accumulate_bias(&mut g.tensors[BC2], dy);
                accumulate_outer(&mut g.tensors[WC2], &tr.act, dy);
                let d_act = matvec_t(&t[WC2], dy);
                let d_pre: Vec<T> = d_act.iter().zip(&tr.pre).map(|(&d, &a)| d * gelu_grad(a)).collect();
                accumulate_bias(&mut g.tensors[BC1], &d_pre);
                accumulate_outer(&mut g.tensors[WC1], &tr.x, &d_pre);
                matvec_t(&t[WC1], &d_pre)
            }
            CodecVariant::Light => {
                accumulate_outer(&mut g.tensors[W3], &tr.act, dy);
                let d_act = matvec_t(&t[W3], dy);
                let (gate, up) = (&tr.pre, &tr.aux);
                let d_gate: Vec<T> = (0..gate.len()).map(|k| d_act[k] * up[k] * swish_grad(gate[k])).collect();
                let d_up: Vec<T> = (0..gate.len()).map(|k| d_act[k] * swish(gate[k])).collect();
                accumulate_outer(&mut g.tensors[W1], &tr.x, &d_gate);
                accumulate_outer(&mut g.tensors[W2], &tr.x, &d_up);
                let a = matvec_t(&t[W1], &d_gate);
                let b = matvec_t(&t[W2], &d_up);
                a.iter().zip(&b).map(|(&x, &y)| x + y).collect()
            }
            CodecVariant::IdentityLinear => {
                accumulate_outer(&mut g.tensors[LIN_C], &tr.x, dy);
                matvec_t(&t[LIN_C], dy)
            }
        }
    }
}

/// Gradients of `⟨upstream, reconstruct(compress(kv, kv̄), kv̄)⟩` with
/// respect to every codec parameter.
pub fn codec_grads<T: Real>(params: &CodecParams<T>, kv: &[T], kv_bar: &[T], upstream: &[T]) -> Result<CodecParams<T>> {
    let trace = params.forward_traced(kv, kv_bar)?;
    let mut grads = params.zeros_like();
    params.backward(&trace, upstream, &mut grads)?;
    Ok(grads)
}

#[derive(Debug, Clone)]
struct EncoderTrace<T> {
    x: Vec<T>,
    pre: Vec<T>,
    aux: Vec<T>,
    act: Vec<T>,
    out: Vec<T>,
}

#[derive(Debug, Clone)]
struct DecoderTrace<T> {
    z: Vec<T>,
    pre: Vec<T>,
    act: Vec<T>,
    out: Vec<T>,
}

/// Intermediates of one compress/reconstruct round trip.
#[derive(Debug, Clone)]
pub struct CodecTrace<T> {
    enc_kv: EncoderTrace<T>,
    enc_bar: EncoderTrace<T>,
    dec: DecoderTrace<T>,
    pub out: Vec<T>,
}

impl<T: Real> CodecTrace<T> {
    pub fn latent(&self) -> &[T] {
        &self.dec.z
    }
}

fn add_bias<T: Real>(mut v: Vec<T>, b: &Matrix<T>) -> Vec<T> {
    for (x, &y) in v.iter_mut().zip(b.data()) {
        *x = *x + y;
    }
    v
}

fn accumulate_bias<T: Real>(g: &mut Matrix<T>, d: &[T]) {
    for (x, &y) in g.data_mut().iter_mut().zip(d) {
        *x = *x + y;
    }
}

// g += aᵀ·b for row vectors a, b.
fn accumulate_outer<T: Real>(g: &mut Matrix<T>, a: &[T], b: &[T]) {
    for (i, &ai) in a.iter().enumerate() {
        if ai == T::zero() {
            continue;
        }
        for (x, &bj) in g.row_mut(i).iter_mut().zip(b) {
            *x = *x + ai * bj;
        }
    }
}

// W · d (i.e. d · Wᵀ for a row vector d).
fn matvec_t<T: Real>(w: &Matrix<T>, d: &[T]) -> Vec<T> {
    (0..w.rows()).map(|i| crate::tensor::dot(w.row(i), d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_counts() {
        let id = CodecConfig::for_kv_width(CodecVariant::IdentityLinear, 4);
        assert_eq!(id.param_count(), 32);
        let heavy = CodecConfig { input_dim: 8, latent_dim: 2, hidden: 16, decoder_hidden: 16, variant: CodecVariant::Heavy };
        assert_eq!(heavy.param_count(), 362);
        let light = CodecConfig { input_dim: 8, latent_dim: 2, hidden: 16, decoder_hidden: 16, variant: CodecVariant::Light };
        assert_eq!(light.param_count(), 304);
        for cfg in [id, heavy, light] {
            let p = CodecParams::<f32>::init(&cfg, 3).unwrap();
            assert_eq!(p.param_count(), cfg.param_count());
        }
    }

    #[test]
    fn default_proportions() {
        let h = CodecConfig::for_kv_width(CodecVariant::Heavy, 32);
        assert_eq!((h.latent_dim, h.hidden, h.decoder_hidden), (8, 128, 128));
        let l = CodecConfig::for_kv_width(CodecVariant::Light, 32);
        assert_eq!((l.latent_dim, l.hidden), (8, 96));
    }

    #[test]
    fn identity_linear_requires_full_width() {
        let bad = CodecConfig { latent_dim: 3, ..CodecConfig::for_kv_width(CodecVariant::IdentityLinear, 4) };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let cfg = CodecConfig::for_kv_width(CodecVariant::Heavy, 8);
        let p = CodecParams::<f64>::init(&cfg, 1).unwrap();
        let kv: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        let bar = vec![0.2; 8];
        let g = codec_grads(&p, &kv, &bar, &[0.0; 8]).unwrap();
        assert!(g.tensors().iter().all(|m| m.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn shape_errors() {
        let cfg = CodecConfig::for_kv_width(CodecVariant::Light, 8);
        let p = CodecParams::<f32>::init(&cfg, 1).unwrap();
        assert!(matches!(p.compress(&[0.0; 7], &[0.0; 8]), Err(Error::Shape(_))));
        assert!(matches!(p.reconstruct(&[0.0; 3], &[0.0; 8]), Err(Error::Shape(_))));
    }
}
