//! The encoder models: token- or feature-embedded input plus sinusoidal
//! positions, a stack of post-norm self-attention blocks, and one of two
//! heads: a per-command classifier (scalar projection, width-2 stride-2
//! convolution, two-way softmax) or a per-patch fractional regressor
//! (two-logit projection and sigmoids).
//!
//! Forward and backward passes are written out by hand; the finite
//! difference checks in `gradcheck` pin them down. Parameter tensors
//! enumerate in a fixed canonical order shared by the optimizer, the
//! checkpoint format, and the cost accounting.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::tensor::{
    matmul, matmul_a_bt, matmul_acc, matmul_at_b_acc, sigmoid, softmax_rows, transpose, Tensor,
};

pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    CltHead,
    PltHead,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Maximum input length in tokens.
    pub context_tokens: usize,
    pub dropout: f64,
    /// Feature width of dense inputs (patch-head models).
    pub input_dim: usize,
    pub head: HeadKind,
    /// Two tokens per command (convolution head halves the sequence); the
    /// single-token ablation sets this false and skips the convolution.
    pub pair_tokens: bool,
}

impl TransformerConfig {
    /// Full-size command-level configuration.
    pub fn clt_full() -> TransformerConfig {
        TransformerConfig {
            vocab_size: 1024,
            embed_dim: 128,
            ff_dim: 128,
            heads: 4,
            layers: 3,
            context_tokens: 500,
            dropout: 0.1,
            input_dim: 0,
            head: HeadKind::CltHead,
            pair_tokens: true,
        }
    }

    /// Full-size patch-level configuration.
    pub fn plt_full() -> TransformerConfig {
        TransformerConfig {
            vocab_size: 0,
            embed_dim: 512,
            ff_dim: 2048,
            heads: 4,
            layers: 6,
            context_tokens: 100,
            dropout: 0.1,
            input_dim: crate::plt::EMBED_DIM,
            head: HeadKind::PltHead,
            pair_tokens: false,
        }
    }

    /// Reduced command-level configuration for bench-scale training.
    pub fn clt_desk(frame_commands: usize) -> TransformerConfig {
        TransformerConfig {
            vocab_size: 1024,
            embed_dim: 32,
            ff_dim: 64,
            heads: 2,
            layers: 2,
            context_tokens: 2 * frame_commands,
            dropout: 0.1,
            input_dim: 0,
            head: HeadKind::CltHead,
            pair_tokens: true,
        }
    }

    /// Reduced patch-level configuration for bench-scale training.
    pub fn plt_desk() -> TransformerConfig {
        TransformerConfig {
            vocab_size: 0,
            embed_dim: 64,
            ff_dim: 128,
            heads: 4,
            layers: 2,
            context_tokens: 100,
            dropout: 0.1,
            input_dim: crate::plt::EMBED_DIM,
            head: HeadKind::PltHead,
            pair_tokens: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.embed_dim % self.heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.context_tokens == 0 {
            return Err(ModelError::BadConfig("context_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("input length {got} exceeds context {max}")]
    LengthOverflow { got: usize, max: usize },
    #[error("token id {0} outside vocabulary {1}")]
    TokenOutOfRange(u32, usize),
    #[error("paired-token classifier needs an even token count, got {0}")]
    OddTokenCount(usize),
    #[error("feature rows of width {got} where the model expects {want}")]
    WrongFeatureLength { got: usize, want: usize },
    #[error("empty input")]
    EmptyInput,
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub ff_w1: Tensor,
    pub ff_w2: Tensor,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

#[derive(Debug, Clone)]
pub enum Head {
    Clt {
        proj_w: Tensor,
        proj_b: Tensor,
        conv_w: Tensor,
    },
    Plt {
        w: Tensor,
        b: Tensor,
    },
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: TransformerConfig,
    pub embedding: Tensor,
    pub positional: Tensor,
    pub layers: Vec<EncoderLayer>,
    pub head: Head,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(data, &[rows, cols])
}

fn sinusoidal_positional(context: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(&[context, dim]);
    for pos in 0..context {
        for i in 0..dim {
            let exponent = (2 * (i / 2)) as f64 / dim as f64;
            let angle = pos as f64 / 10_000f64.powf(exponent);
            t.data[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}

impl Model {
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Model, ModelError> {
        config.validate()?;
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;

        let embedding = match config.head {
            HeadKind::CltHead => {
                let bound = (1.0 / d as f64).sqrt();
                let data = (0..config.vocab_size * d)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                Tensor::from_vec(data, &[config.vocab_size, d])
            }
            HeadKind::PltHead => xavier(&mut rng, config.input_dim, d),
        };
        let positional = sinusoidal_positional(config.context_tokens, d);

        let layers = (0..config.layers)
            .map(|_| EncoderLayer {
                wq: xavier(&mut rng, d, d),
                wk: xavier(&mut rng, d, d),
                wv: xavier(&mut rng, d, d),
                ff_w1: xavier(&mut rng, d, config.ff_dim),
                ff_w2: xavier(&mut rng, config.ff_dim, d),
                ln1_gamma: Tensor::from_vec(vec![1.0; d], &[d]),
                ln1_beta: Tensor::zeros(&[d]),
                ln2_gamma: Tensor::from_vec(vec![1.0; d], &[d]),
                ln2_beta: Tensor::zeros(&[d]),
            })
            .collect();

        let head = match config.head {
            HeadKind::CltHead => Head::Clt {
                proj_w: {
                    let bound = (6.0 / (d + 1) as f64).sqrt();
                    let data = (0..d).map(|_| rng.gen_range(-bound..bound)).collect();
                    Tensor::from_vec(data, &[d])
                },
                proj_b: Tensor::zeros(&[1]),
                conv_w: Tensor::from_vec(vec![0.5, 0.5], &[2]),
            },
            HeadKind::PltHead => Head::Plt {
                w: xavier(&mut rng, d, 2),
                b: Tensor::zeros(&[2]),
            },
        };

        Ok(Model {
            config,
            embedding,
            positional,
            layers,
            head,
        })
    }

    /// Visit every stored tensor in canonical order. The flag marks
    /// trainable tensors (the positional table is fixed).
    pub fn visit_params(&self, mut f: impl FnMut(&str, &Tensor, bool)) {
        f("embedding", &self.embedding, true);
        f("positional", &self.positional, false);
        for (i, l) in self.layers.iter().enumerate() {
            f(&format!("layers.{i}.wq"), &l.wq, true);
            f(&format!("layers.{i}.wk"), &l.wk, true);
            f(&format!("layers.{i}.wv"), &l.wv, true);
            f(&format!("layers.{i}.ff_w1"), &l.ff_w1, true);
            f(&format!("layers.{i}.ff_w2"), &l.ff_w2, true);
            f(&format!("layers.{i}.ln1_gamma"), &l.ln1_gamma, true);
            f(&format!("layers.{i}.ln1_beta"), &l.ln1_beta, true);
            f(&format!("layers.{i}.ln2_gamma"), &l.ln2_gamma, true);
            f(&format!("layers.{i}.ln2_beta"), &l.ln2_beta, true);
        }
        match &self.head {
            Head::Clt {
                proj_w,
                proj_b,
                conv_w,
            } => {
                f("head.proj_w", proj_w, true);
                f("head.proj_b", proj_b, true);
                f("head.conv_w", conv_w, true);
            }
            Head::Plt { w, b } => {
                f("head.w", w, true);
                f("head.b", b, true);
            }
        }
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor, bool)) {
        f("embedding", &mut self.embedding, true);
        f("positional", &mut self.positional, false);
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(&format!("layers.{i}.wq"), &mut l.wq, true);
            f(&format!("layers.{i}.wk"), &mut l.wk, true);
            f(&format!("layers.{i}.wv"), &mut l.wv, true);
            f(&format!("layers.{i}.ff_w1"), &mut l.ff_w1, true);
            f(&format!("layers.{i}.ff_w2"), &mut l.ff_w2, true);
            f(&format!("layers.{i}.ln1_gamma"), &mut l.ln1_gamma, true);
            f(&format!("layers.{i}.ln1_beta"), &mut l.ln1_beta, true);
            f(&format!("layers.{i}.ln2_gamma"), &mut l.ln2_gamma, true);
            f(&format!("layers.{i}.ln2_beta"), &mut l.ln2_beta, true);
        }
        match &mut self.head {
            Head::Clt {
                proj_w,
                proj_b,
                conv_w,
            } => {
                f("head.proj_w", proj_w, true);
                f("head.proj_b", proj_b, true);
                f("head.conv_w", conv_w, true);
            }
            Head::Plt { w, b } => {
                f("head.w", w, true);
                f("head.b", b, true);
            }
        }
    }

    /// Total stored parameters, positional table included. Matches the
    /// analytic accounting of the cost module exactly.
    pub fn parameter_count(&self) -> u64 {
        let mut n = 0u64;
        self.visit_params(|_, t, _| n += t.len() as u64);
        n
    }

    pub fn trainable_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        self.visit_params(|_, t, trainable| {
            if trainable {
                shapes.push(t.shape.clone());
            }
        });
        shapes
    }
}

/// Gradients for the trainable tensors, in canonical order.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Gradients {
        Gradients {
            tensors: model
                .trainable_shapes()
                .iter()
                .map(|s| Tensor::zeros(s))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.scale(s);
        }
    }
}

/// One training sample: a token frame with per-command binary labels, or a
/// slice of patch features with per-patch fractional targets.
#[derive(Debug, Clone)]
pub enum TrainSample {
    Clt {
        tokens: Vec<u32>,
        /// One label in {0,1} per command.
        labels: Vec<f64>,
    },
    Plt {
        /// Flattened rows of `input_dim` features.
        features: Vec<f64>,
        /// (read, write) fractional targets per row.
        targets: Vec<[f64; 2]>,
    },
}

pub enum SampleInput<'a> {
    Tokens(&'a [u32]),
    /// Flattened rows of `input_dim` features.
    Features(&'a [f64]),
}

struct LnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

struct LayerCache {
    x: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Softmax attention probabilities, one [n, n] block per head.
    attn: Vec<f64>,
    drop1: Option<Vec<f64>>,
    ln1: LnCache,
    y1: Vec<f64>,
    ff_h: Vec<f64>,
    drop2: Option<Vec<f64>>,
    ln2: LnCache,
    y2: Vec<f64>,
}

pub struct ForwardCache {
    n: usize,
    tokens: Option<Vec<u32>>,
    features: Option<Vec<f64>>,
    drop0: Option<Vec<f64>>,
    x0: Vec<f64>,
    layers: Vec<LayerCache>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.layers
            .last()
            .map(|l| l.y2.as_slice())
            .unwrap_or(&self.x0)
    }

    pub fn seq_len(&self) -> usize {
        self.n
    }

    /// Attention probability blocks, `layers x [heads * n * n]`.
    pub fn attention(&self) -> Vec<&[f64]> {
        self.layers.iter().map(|l| l.attn.as_slice()).collect()
    }
}

fn dropout_mask(rng: &mut ChaCha8Rng, len: usize, p: f64) -> Vec<f64> {
    let keep = 1.0 - p;
    (0..len)
        .map(|_| {
            if rng.gen_range(0.0..1.0) < p {
                0.0
            } else {
                1.0 / keep
            }
        })
        .collect()
}

fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], n: usize, d: usize) -> (Vec<f64>, LnCache) {
    let mut out = vec![0.0; n * d];
    let mut xhat = vec![0.0; n * d];
    let mut inv_std = vec![0.0; n];
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + LAYERNORM_EPS).sqrt();
        inv_std[r] = istd;
        for c in 0..d {
            let h = (row[c] - mean) * istd;
            xhat[r * d + c] = h;
            out[r * d + c] = gamma[c] * h + beta[c];
        }
    }
    (out, LnCache { xhat, inv_std })
}

fn layer_norm_backward(
    d_out: &[f64],
    cache: &LnCache,
    gamma: &[f64],
    n: usize,
    d: usize,
    d_gamma: &mut [f64],
    d_beta: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; n * d];
    for r in 0..n {
        let dy = &d_out[r * d..(r + 1) * d];
        let xhat = &cache.xhat[r * d..(r + 1) * d];
        let istd = cache.inv_std[r];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for c in 0..d {
            d_gamma[c] += dy[c] * xhat[c];
            d_beta[c] += dy[c];
            let dxh = dy[c] * gamma[c];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat[c];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for c in 0..d {
            let dxh = dy[c] * gamma[c];
            dx[r * d + c] = istd * (dxh - mean_dxhat - xhat[c] * mean_dxhat_xhat);
        }
    }
    dx
}

/// Copy head `h` columns of a [n, d] matrix into a dense [n, dh] block.
fn head_slice(x: &[f64], n: usize, d: usize, h: usize, dh: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * dh];
    for r in 0..n {
        out[r * dh..(r + 1) * dh].copy_from_slice(&x[r * d + h * dh..r * d + (h + 1) * dh]);
    }
    out
}

fn head_unslice_acc(block: &[f64], x: &mut [f64], n: usize, d: usize, h: usize, dh: usize) {
    for r in 0..n {
        for c in 0..dh {
            x[r * d + h * dh + c] += block[r * dh + c];
        }
    }
}

impl Model {
    fn embed_input(&self, input: &SampleInput<'_>) -> Result<(usize, Vec<f64>), ModelError> {
        let d = self.config.embed_dim;
        match input {
            SampleInput::Tokens(tokens) => {
                if tokens.is_empty() {
                    return Err(ModelError::EmptyInput);
                }
                if tokens.len() > self.config.context_tokens {
                    return Err(ModelError::LengthOverflow {
                        got: tokens.len(),
                        max: self.config.context_tokens,
                    });
                }
                let mut x = vec![0.0; tokens.len() * d];
                for (r, &t) in tokens.iter().enumerate() {
                    if t as usize >= self.config.vocab_size {
                        return Err(ModelError::TokenOutOfRange(t, self.config.vocab_size));
                    }
                    let row = &self.embedding.data[t as usize * d..(t as usize + 1) * d];
                    x[r * d..(r + 1) * d].copy_from_slice(row);
                }
                Ok((tokens.len(), x))
            }
            SampleInput::Features(features) => {
                let width = self.config.input_dim;
                if features.is_empty() {
                    return Err(ModelError::EmptyInput);
                }
                if features.len() % width != 0 {
                    return Err(ModelError::WrongFeatureLength {
                        got: features.len(),
                        want: width,
                    });
                }
                let n = features.len() / width;
                if n > self.config.context_tokens {
                    return Err(ModelError::LengthOverflow {
                        got: n,
                        max: self.config.context_tokens,
                    });
                }
                Ok((n, matmul(features, &self.embedding.data, n, width, d)))
            }
        }
    }

    /// Full encoder forward pass, caching every intermediate the backward
    /// pass needs. Dropout draws from `rng` when given.
    pub fn forward(
        &self,
        input: SampleInput<'_>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardCache, ModelError> {
        let d = self.config.embed_dim;
        let heads = self.config.heads;
        let dh = self.config.head_dim();
        let p = self.config.dropout;
        let dropout_on = rng.is_some() && p > 0.0;

        let (n, mut x0) = self.embed_input(&input)?;
        for r in 0..n {
            for c in 0..d {
                x0[r * d + c] += self.positional.data[r * d + c];
            }
        }
        let drop0 = if dropout_on {
            let mask = dropout_mask(rng.as_deref_mut().unwrap(), n * d, p);
            for (v, m) in x0.iter_mut().zip(&mask) {
                *v *= m;
            }
            Some(mask)
        } else {
            None
        };

        let mut layers = Vec::with_capacity(self.config.layers);
        let mut x = x0.clone();
        for layer in &self.layers {
            let q = matmul(&x, &layer.wq.data, n, d, d);
            let k = matmul(&x, &layer.wk.data, n, d, d);
            let v = matmul(&x, &layer.wv.data, n, d, d);

            let mut attn = vec![0.0; heads * n * n];
            let mut ctx = vec![0.0; n * d];
            let scale = 1.0 / (dh as f64).sqrt();
            for h in 0..heads {
                let qh = head_slice(&q, n, d, h, dh);
                let kh_t = transpose(&head_slice(&k, n, d, h, dh), n, dh);
                let vh = head_slice(&v, n, d, h, dh);
                let mut scores = matmul(&qh, &kh_t, n, dh, n);
                for s in &mut scores {
                    *s *= scale;
                }
                softmax_rows(&mut scores, n, n);
                let ch = matmul(&scores, &vh, n, n, dh);
                attn[h * n * n..(h + 1) * n * n].copy_from_slice(&scores);
                head_unslice_acc(&ch, &mut ctx, n, d, h, dh);
            }

            let (res1_input, drop1) = if dropout_on {
                let mask = dropout_mask(rng.as_deref_mut().unwrap(), n * d, p);
                let dropped: Vec<f64> = ctx.iter().zip(&mask).map(|(c, m)| c * m).collect();
                (dropped, Some(mask))
            } else {
                (ctx, None)
            };
            let res1: Vec<f64> = x.iter().zip(&res1_input).map(|(a, b)| a + b).collect();
            let (y1, ln1) = layer_norm(&res1, &layer.ln1_gamma.data, &layer.ln1_beta.data, n, d);

            let mut ff_h = matmul(&y1, &layer.ff_w1.data, n, d, self.config.ff_dim);
            for v in &mut ff_h {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            let ff_out = matmul(&ff_h, &layer.ff_w2.data, n, self.config.ff_dim, d);
            let (res2_input, drop2) = if dropout_on {
                let mask = dropout_mask(rng.as_deref_mut().unwrap(), n * d, p);
                let dropped: Vec<f64> = ff_out.iter().zip(&mask).map(|(f, m)| f * m).collect();
                (dropped, Some(mask))
            } else {
                (ff_out, None)
            };
            let res2: Vec<f64> = y1.iter().zip(&res2_input).map(|(a, b)| a + b).collect();
            let (y2, ln2) = layer_norm(&res2, &layer.ln2_gamma.data, &layer.ln2_beta.data, n, d);

            layers.push(LayerCache {
                x: x.clone(),
                q,
                k,
                v,
                attn,
                drop1,
                ln1,
                y1,
                ff_h,
                drop2,
                ln2,
                y2: y2.clone(),
            });
            x = y2;
        }

        Ok(ForwardCache {
            n,
            tokens: match input {
                SampleInput::Tokens(t) => Some(t.to_vec()),
                SampleInput::Features(_) => None,
            },
            features: match input {
                SampleInput::Features(f) => Some(f.to_vec()),
                SampleInput::Tokens(_) => None,
            },
            drop0,
            x0,
            layers,
        })
    }

    /// Backpropagate `d_out` (gradient at the encoder output) through the
    /// stack, accumulating into `grads` (canonical trainable order).
    pub fn backward(&self, cache: &ForwardCache, d_out: Vec<f64>, grads: &mut Gradients) {
        let d = self.config.embed_dim;
        let n = cache.n;
        let heads = self.config.heads;
        let dh = self.config.head_dim();
        let ff = self.config.ff_dim;

        // Trainable-tensor indices: embedding 0, then 9 per layer, then head.
        let layer_base = |i: usize| 1 + i * 9;

        let mut dx = d_out;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let lc = &cache.layers[i];
            let base = layer_base(i);

            // ln2
            let (dg2, db2) = (base + 7, base + 8);
            let mut d_gamma2 = std::mem::take(&mut grads.tensors[dg2].data);
            let mut d_beta2 = std::mem::take(&mut grads.tensors[db2].data);
            let d_res2 = layer_norm_backward(
                &dx,
                &lc.ln2,
                &layer.ln2_gamma.data,
                n,
                d,
                &mut d_gamma2,
                &mut d_beta2,
            );
            grads.tensors[dg2].data = d_gamma2;
            grads.tensors[db2].data = d_beta2;

            // res2 = y1 + drop(ff_out)
            let mut d_y1 = d_res2.clone();
            let mut d_ff_out = d_res2;
            if let Some(mask) = &lc.drop2 {
                for (v, m) in d_ff_out.iter_mut().zip(mask) {
                    *v *= m;
                }
            }

            // ff_out = relu(y1 w1) w2
            matmul_at_b_acc(&lc.ff_h, &d_ff_out, &mut grads.tensors[base + 4].data, n, ff, d);
            let mut d_h = matmul_a_bt(&d_ff_out, &layer.ff_w2.data, n, d, ff);
            for (dv, &h) in d_h.iter_mut().zip(&lc.ff_h) {
                if h <= 0.0 {
                    *dv = 0.0;
                }
            }
            matmul_at_b_acc(&lc.y1, &d_h, &mut grads.tensors[base + 3].data, n, d, ff);
            let d_y1_ff = matmul_a_bt(&d_h, &layer.ff_w1.data, n, ff, d);
            for (a, b) in d_y1.iter_mut().zip(&d_y1_ff) {
                *a += b;
            }

            // ln1
            let (dg1, db1) = (base + 5, base + 6);
            let mut d_gamma1 = std::mem::take(&mut grads.tensors[dg1].data);
            let mut d_beta1 = std::mem::take(&mut grads.tensors[db1].data);
            let d_res1 = layer_norm_backward(
                &d_y1,
                &lc.ln1,
                &layer.ln1_gamma.data,
                n,
                d,
                &mut d_gamma1,
                &mut d_beta1,
            );
            grads.tensors[dg1].data = d_gamma1;
            grads.tensors[db1].data = d_beta1;

            // res1 = x + drop(ctx)
            let mut d_x_local = d_res1.clone();
            let mut d_ctx = d_res1;
            if let Some(mask) = &lc.drop1 {
                for (v, m) in d_ctx.iter_mut().zip(mask) {
                    *v *= m;
                }
            }

            // attention
            let scale = 1.0 / (dh as f64).sqrt();
            let mut d_q = vec![0.0; n * d];
            let mut d_k = vec![0.0; n * d];
            let mut d_v = vec![0.0; n * d];
            for h in 0..heads {
                let a = &lc.attn[h * n * n..(h + 1) * n * n];
                let d_ch = head_slice(&d_ctx, n, d, h, dh);
                let vh = head_slice(&lc.v, n, d, h, dh);
                let qh = head_slice(&lc.q, n, d, h, dh);
                let kh = head_slice(&lc.k, n, d, h, dh);

                let d_a = matmul(&d_ch, &transpose(&vh, n, dh), n, dh, n);
                let mut d_vh = vec![0.0; n * dh];
                matmul_at_b_acc(a, &d_ch, &mut d_vh, n, n, dh);

                // softmax backward per row
                let mut d_s = vec![0.0; n * n];
                for r in 0..n {
                    let ar = &a[r * n..(r + 1) * n];
                    let dar = &d_a[r * n..(r + 1) * n];
                    let dot: f64 = ar.iter().zip(dar).map(|(x, y)| x * y).sum();
                    for c in 0..n {
                        d_s[r * n + c] = ar[c] * (dar[c] - dot) * scale;
                    }
                }

                let mut d_qh = vec![0.0; n * dh];
                matmul_acc(&d_s, &kh, &mut d_qh, n, n, dh);
                let mut d_kh = vec![0.0; n * dh];
                matmul_at_b_acc(&d_s, &qh, &mut d_kh, n, n, dh);

                head_unslice_acc(&d_qh, &mut d_q, n, d, h, dh);
                head_unslice_acc(&d_kh, &mut d_k, n, d, h, dh);
                head_unslice_acc(&d_vh, &mut d_v, n, d, h, dh);
            }

            matmul_at_b_acc(&lc.x, &d_q, &mut grads.tensors[base].data, n, d, d);
            matmul_at_b_acc(&lc.x, &d_k, &mut grads.tensors[base + 1].data, n, d, d);
            matmul_at_b_acc(&lc.x, &d_v, &mut grads.tensors[base + 2].data, n, d, d);
            let dq_x = matmul_a_bt(&d_q, &layer.wq.data, n, d, d);
            let dk_x = matmul_a_bt(&d_k, &layer.wk.data, n, d, d);
            let dv_x = matmul_a_bt(&d_v, &layer.wv.data, n, d, d);
            for idx in 0..n * d {
                d_x_local[idx] += dq_x[idx] + dk_x[idx] + dv_x[idx];
            }
            dx = d_x_local;
        }

        // Input dropout, then embedding.
        if let Some(mask) = &cache.drop0 {
            for (v, m) in dx.iter_mut().zip(mask) {
                *v *= m;
            }
        }
        if let Some(tokens) = &cache.tokens {
            let emb = &mut grads.tensors[0].data;
            for (r, &t) in tokens.iter().enumerate() {
                let row = &dx[r * d..(r + 1) * d];
                let dst = &mut emb[t as usize * d..(t as usize + 1) * d];
                for (a, b) in dst.iter_mut().zip(row) {
                    *a += b;
                }
            }
        } else if let Some(features) = &cache.features {
            let width = self.config.input_dim;
            matmul_at_b_acc(features, &dx, &mut grads.tensors[0].data, n, width, d);
        }
    }
}

/// Encoder output for an input sequence: one `embed_dim` vector per token.
pub fn encoder_forward(model: &Model, input: SampleInput<'_>) -> Result<Tensor, ModelError> {
    let cache = model.forward(input, None)?;
    Ok(Tensor::from_vec(
        cache.output().to_vec(),
        &[cache.n, model.config.embed_dim],
    ))
}

/// Encoder output plus per-layer attention probabilities
/// (`heads * n * n` per layer).
pub fn encoder_forward_with_attention(
    model: &Model,
    input: SampleInput<'_>,
) -> Result<(Tensor, Vec<Vec<f64>>), ModelError> {
    let cache = model.forward(input, None)?;
    let attn = cache.attention().iter().map(|a| a.to_vec()).collect();
    Ok((
        Tensor::from_vec(cache.output().to_vec(), &[cache.n, model.config.embed_dim]),
        attn,
    ))
}

/// Head forward for the command classifier: scalar projection per token,
/// paired width-2 stride-2 convolution, sigmoid (the two-way softmax over
/// logits (0, z)). Returns one probability per command.
fn clt_head_forward(model: &Model, y: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    let d = model.config.embed_dim;
    let Head::Clt {
        proj_w,
        proj_b,
        conv_w,
    } = &model.head
    else {
        unreachable!("clt head expected");
    };
    let mut s = vec![0.0; n];
    for r in 0..n {
        let row = &y[r * d..(r + 1) * d];
        s[r] = row.iter().zip(&proj_w.data).map(|(a, b)| a * b).sum::<f64>() + proj_b.data[0];
    }
    let z = if model.config.pair_tokens {
        if n % 2 != 0 {
            return Err(ModelError::OddTokenCount(n));
        }
        (0..n / 2)
            .map(|t| conv_w.data[0] * s[2 * t] + conv_w.data[1] * s[2 * t + 1])
            .collect()
    } else {
        s.clone()
    };
    Ok((s, z))
}

/// Per-command ransomware probabilities for one token frame.
pub fn clt_predict_frame(model: &Model, tokens: &[u32]) -> Result<Vec<f64>, ModelError> {
    let cache = model.forward(SampleInput::Tokens(tokens), None)?;
    let (_, z) = clt_head_forward(model, cache.output(), cache.n)?;
    Ok(z.into_iter().map(sigmoid).collect())
}

/// Per-patch (read, write) ransomware volume fractions for one slice of
/// patch features (flattened rows of `input_dim`).
pub fn plt_predict_patches(model: &Model, features: &[f64]) -> Result<Vec<[f64; 2]>, ModelError> {
    let cache = model.forward(SampleInput::Features(features), None)?;
    let y = cache.output();
    let d = model.config.embed_dim;
    let Head::Plt { w, b } = &model.head else {
        unreachable!("plt head expected");
    };
    let mut out = Vec::with_capacity(cache.n);
    for r in 0..cache.n {
        let row = &y[r * d..(r + 1) * d];
        let mut logits = [b.data[0], b.data[1]];
        for (c, &x) in row.iter().enumerate() {
            logits[0] += x * w.data[c * 2];
            logits[1] += x * w.data[c * 2 + 1];
        }
        out.push([sigmoid(logits[0]), sigmoid(logits[1])]);
    }
    Ok(out)
}

const PROB_CLAMP: f64 = 1e-7;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn bce_term(p: f64, y: f64) -> f64 {
    let p = clamp_prob(p);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Mean binary cross-entropy over per-command predictions.
pub fn clt_loss(predictions: &[f64], labels: &[f64]) -> f64 {
    assert_eq!(predictions.len(), labels.len());
    predictions
        .iter()
        .zip(labels)
        .map(|(&p, &y)| bce_term(p, y))
        .sum::<f64>()
        / predictions.len() as f64
}

/// Summed cross-entropy over all fractional (read, write) targets.
pub fn plt_loss(predictions: &[[f64; 2]], targets: &[[f64; 2]]) -> f64 {
    assert_eq!(predictions.len(), targets.len());
    predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| bce_term(p[0], t[0]) + bce_term(p[1], t[1]))
        .sum()
}

/// Loss and gradients for one sample; dropout draws from `rng` when given.
pub fn train_step_sample(
    model: &Model,
    sample: &TrainSample,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Gradients), ModelError> {
    let mut grads = Gradients::zeros_like(model);
    let d = model.config.embed_dim;
    // Trainable order: embedding, 9 tensors per layer, then the head.
    let head_base = 1 + model.config.layers * 9;

    match sample {
        TrainSample::Clt { tokens, labels } => {
            let cache = model.forward(SampleInput::Tokens(tokens), rng.as_deref_mut())?;
            let n = cache.n;
            let (s, z) = clt_head_forward(model, cache.output(), n)?;
            let probs: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
            assert_eq!(labels.len(), probs.len(), "one label per command");
            let loss = clt_loss(&probs, labels);

            // d(mean BCE)/dz = (p - y)/count
            let count = probs.len() as f64;
            let dz: Vec<f64> = probs
                .iter()
                .zip(labels)
                .map(|(&p, &y)| (clamp_prob(p) - y) / count)
                .collect();

            let Head::Clt { proj_w, conv_w, .. } = &model.head else {
                unreachable!();
            };
            let (gw, gb, gc) = (head_base, head_base + 1, head_base + 2);
            let mut ds = vec![0.0; n];
            if model.config.pair_tokens {
                for (t, &dzt) in dz.iter().enumerate() {
                    ds[2 * t] = conv_w.data[0] * dzt;
                    ds[2 * t + 1] = conv_w.data[1] * dzt;
                    grads.tensors[gc].data[0] += dzt * s[2 * t];
                    grads.tensors[gc].data[1] += dzt * s[2 * t + 1];
                }
            } else {
                ds.copy_from_slice(&dz);
            }
            let y = cache.output();
            let mut d_y = vec![0.0; n * d];
            for r in 0..n {
                let row = &y[r * d..(r + 1) * d];
                for c in 0..d {
                    grads.tensors[gw].data[c] += ds[r] * row[c];
                    d_y[r * d + c] = ds[r] * proj_w.data[c];
                }
                grads.tensors[gb].data[0] += ds[r];
            }
            model.backward(&cache, d_y, &mut grads);
            Ok((loss, grads))
        }
        TrainSample::Plt { features, targets } => {
            let cache = model.forward(SampleInput::Features(features), rng.as_deref_mut())?;
            let n = cache.n;
            assert_eq!(targets.len(), n, "one target pair per patch");
            let y = cache.output();
            let Head::Plt { w, b } = &model.head else {
                unreachable!();
            };
            let mut probs = Vec::with_capacity(n);
            for r in 0..n {
                let row = &y[r * d..(r + 1) * d];
                let mut logits = [b.data[0], b.data[1]];
                for (c, &x) in row.iter().enumerate() {
                    logits[0] += x * w.data[c * 2];
                    logits[1] += x * w.data[c * 2 + 1];
                }
                probs.push([sigmoid(logits[0]), sigmoid(logits[1])]);
            }
            let loss = plt_loss(&probs, targets);

            let (gw, gb) = (head_base, head_base + 1);
            let mut d_y = vec![0.0; n * d];
            for r in 0..n {
                let row = &y[r * d..(r + 1) * d];
                for j in 0..2 {
                    let dlogit = clamp_prob(probs[r][j]) - targets[r][j];
                    grads.tensors[gb].data[j] += dlogit;
                    for c in 0..d {
                        grads.tensors[gw].data[c * 2 + j] += dlogit * row[c];
                        d_y[r * d + c] += dlogit * w.data[c * 2 + j];
                    }
                }
            }
            model.backward(&cache, d_y, &mut grads);
            Ok((loss, grads))
        }
    }
}

/// Slice-level pooling for the command classifier: the mean of all
/// per-command probabilities across the slice's frames.
pub fn pool_clt(per_command: &[f64]) -> f64 {
    assert!(!per_command.is_empty(), "pooling needs at least one output");
    per_command.iter().sum::<f64>() / per_command.len() as f64
}

/// Slice-level pooling for the patch regressor: per patch the fraction sum
/// clamped at 1, averaged across patches.
pub fn pool_plt(fractions: &[[f64; 2]]) -> f64 {
    assert!(!fractions.is_empty(), "pooling needs at least one output");
    fractions
        .iter()
        .map(|f| (f[0] + f[1]).min(1.0))
        .sum::<f64>()
        / fractions.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_clt() -> Model {
        Model::new(
            TransformerConfig {
                vocab_size: 64,
                embed_dim: 16,
                ff_dim: 24,
                heads: 4,
                layers: 2,
                context_tokens: 20,
                dropout: 0.1,
                input_dim: 0,
                head: HeadKind::CltHead,
                pair_tokens: true,
            },
            11,
        )
        .unwrap()
    }

    fn tiny_plt() -> Model {
        Model::new(
            TransformerConfig {
                vocab_size: 0,
                embed_dim: 16,
                ff_dim: 24,
                heads: 2,
                layers: 2,
                context_tokens: 10,
                dropout: 0.1,
                input_dim: 7,
                head: HeadKind::PltHead,
                pair_tokens: false,
            },
            13,
        )
        .unwrap()
    }

    #[test]
    fn encoder_output_shape() {
        let model = tiny_clt();
        let tokens: Vec<u32> = (0..12).collect();
        let out = encoder_forward(&model, SampleInput::Tokens(&tokens)).unwrap();
        assert_eq!(out.shape, vec![12, 16]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let model = tiny_clt();
        let too_long: Vec<u32> = (0..21).collect();
        assert!(matches!(
            encoder_forward(&model, SampleInput::Tokens(&too_long)),
            Err(ModelError::LengthOverflow { got: 21, max: 20 })
        ));
        assert!(matches!(
            encoder_forward(&model, SampleInput::Tokens(&[99])),
            Err(ModelError::TokenOutOfRange(99, 64))
        ));
        assert!(matches!(
            clt_predict_frame(&model, &[1, 2, 3]),
            Err(ModelError::OddTokenCount(3))
        ));
    }

    #[test]
    fn permutation_equivariance_without_positions() {
        let mut model = tiny_clt();
        model.positional.fill(0.0);
        let tokens = vec![3u32, 9, 1, 5, 7, 2];
        let out = encoder_forward(&model, SampleInput::Tokens(&tokens)).unwrap();
        let perm = [4usize, 0, 5, 2, 1, 3];
        let permuted: Vec<u32> = perm.iter().map(|&i| tokens[i]).collect();
        let out_p = encoder_forward(&model, SampleInput::Tokens(&permuted)).unwrap();
        let d = 16;
        for (r, &src) in perm.iter().enumerate() {
            for c in 0..d {
                let a = out.data[src * d + c];
                let b = out_p.data[r * d + c];
                assert!((a - b).abs() < 1e-9, "row {r} col {c}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let model = tiny_clt();
        let tokens: Vec<u32> = (0..10).map(|i| (i * 5) % 64).collect();
        let (_, attn) = encoder_forward_with_attention(&model, SampleInput::Tokens(&tokens)).unwrap();
        let n = 10;
        for layer in &attn {
            assert_eq!(layer.len(), model.config.heads * n * n);
            for h in 0..model.config.heads {
                for r in 0..n {
                    let row = &layer[h * n * n + r * n..h * n * n + (r + 1) * n];
                    let sum: f64 = row.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn clt_frame_prediction_shape_and_determinism() {
        let model = tiny_clt();
        let tokens: Vec<u32> = (0..20).map(|i| i % 64).collect();
        let p1 = clt_predict_frame(&model, &tokens).unwrap();
        let p2 = clt_predict_frame(&model, &tokens).unwrap();
        assert_eq!(p1.len(), 10);
        assert_eq!(p1, p2);
        assert!(p1.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn plt_prediction_shape_and_zero_weights() {
        let mut model = tiny_plt();
        let features = vec![0.3; 10 * 7];
        let out = plt_predict_patches(&model, &features).unwrap();
        assert_eq!(out.len(), 10);
        assert!(out.iter().all(|p| p[0] > 0.0 && p[0] < 1.0 && p[1] > 0.0 && p[1] < 1.0));

        // Zeroed network: sigmoid(0) everywhere.
        model.visit_params_mut(|_, t, _| t.fill(0.0));
        let out = plt_predict_patches(&model, &features).unwrap();
        assert!(out.iter().all(|p| p[0] == 0.5 && p[1] == 0.5));
    }

    #[test]
    fn loss_values() {
        // Perfect prediction: clamped log term only.
        assert!(clt_loss(&[1.0, 0.0], &[1.0, 0.0]) < 1e-6);
        // p = 0.5 everywhere: mean BCE is ln 2.
        let l = clt_loss(&[0.5; 8], &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        // Fractional target: p = y is the CE minimum over a grid.
        let at_y = plt_loss(&[[0.3, 0.3]], &[[0.3, 0.3]]);
        for k in 1..100 {
            let p = k as f64 / 100.0;
            let trial = plt_loss(&[[p, p]], &[[0.3, 0.3]]);
            assert!(trial + 1e-12 >= at_y, "p={p}");
        }
        // And the value is twice the entropy of 0.3.
        let entropy = -(0.3f64.ln() * 0.3 + 0.7f64.ln() * 0.7);
        assert!((at_y - 2.0 * entropy).abs() < 1e-9);
    }

    #[test]
    fn pooling_rules() {
        assert_eq!(pool_clt(&[0.0, 0.0]), 0.0);
        let half: Vec<f64> = (0..10).map(|i| if i < 5 { 1.0 } else { 0.0 }).collect();
        assert_eq!(pool_clt(&half), 0.5);
        // 0.7 + 0.6 clamps to 1.0.
        assert_eq!(pool_plt(&[[0.7, 0.6]]), 1.0);
        assert_eq!(pool_plt(&[[0.2, 0.3], [0.7, 0.6]]), (0.5 + 1.0) / 2.0);
    }

    #[test]
    fn dropout_is_deterministic_given_seed() {
        let model = tiny_clt();
        let sample = TrainSample::Clt {
            tokens: (0..20).map(|i| i % 64).collect(),
            labels: vec![1.0; 10],
        };
        let mut rng1 = ChaCha8Rng::seed_from_u64(42);
        let mut rng2 = ChaCha8Rng::seed_from_u64(42);
        let (l1, g1) = train_step_sample(&model, &sample, Some(&mut rng1)).unwrap();
        let (l2, g2) = train_step_sample(&model, &sample, Some(&mut rng2)).unwrap();
        assert_eq!(l1, l2);
        for (a, b) in g1.tensors.iter().zip(&g2.tensors) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn parameter_count_matches_analytic() {
        for config in [
            TransformerConfig::clt_full(),
            TransformerConfig::plt_full(),
            tiny_clt().config,
            tiny_plt().config,
        ] {
            let model = Model::new(config, 5).unwrap();
            assert_eq!(
                model.parameter_count(),
                crate::hwcost::count_parameters(&config),
                "{:?}",
                config.head
            );
        }
    }
}
