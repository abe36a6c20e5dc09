//! Seeded toy diffusion transformer.
//!
//! Each block is pre-norm attention followed by a pre-norm GELU MLP, both on
//! the residual stream, so `y = x + attn + mlp`. A sinusoidal timestep
//! embedding is projected per block and added to both normalized inputs.
//! All six projections go through a caller-supplied executor, which is how
//! the pipeline swaps in quantized arithmetic per layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::layer::LayerId;
use crate::tensor::{Element, Tensor};

pub const LN_EPS: f64 = 1e-5;
/// Scale on the output projections `o` and `fc2` relative to `1/sqrt(fan_in)`.
pub const RESIDUAL_GAIN: f64 = 0.03;
/// Scale on the timestep projection.
pub const TIME_GAIN: f64 = 0.2;
/// Spread of the per-channel norm gains around 1.
pub const LN_GAIN_STD: f64 = 0.1;
/// Gain on one dedicated channel of the attention norm, per block. These
/// produce layer inputs whose max/mean ratio lands on both sides of 25.
pub const OUTLIER_GAINS: [f64; 4] = [6.0, 9.0, 18.0, 30.0];
pub const MLP_RATIO: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModelSpec {
    pub n_blocks: usize,
    pub hidden_dim: usize,
    pub seq_len: usize,
    pub text_len: usize,
    pub n_heads: usize,
    pub seed: u64,
}

impl Default for ToyModelSpec {
    fn default() -> Self {
        Self {
            n_blocks: 4,
            hidden_dim: 64,
            seq_len: 128,
            text_len: 16,
            n_heads: 4,
            seed: 0,
        }
    }
}

impl ToyModelSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_blocks == 0 || self.hidden_dim == 0 || self.seq_len == 0 || self.n_heads == 0 {
            return bad("n_blocks, hidden_dim, seq_len and n_heads must be positive".into());
        }
        if self.hidden_dim % self.n_heads != 0 {
            return bad(format!(
                "hidden_dim {} is not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            ));
        }
        if self.hidden_dim % 2 != 0 {
            return bad("hidden_dim must be even for the timestep embedding".into());
        }
        if self.text_len >= self.seq_len {
            return bad(format!(
                "text_len {} must be below seq_len {}",
                self.text_len, self.seq_len
            ));
        }
        Ok(())
    }

    pub fn ffn_dim(&self) -> usize {
        self.hidden_dim * MLP_RATIO
    }

    /// `(in, out)` features of a layer.
    pub fn layer_shape(&self, layer: LayerId) -> (usize, usize) {
        let d = self.hidden_dim;
        match layer {
            LayerId::Q | LayerId::K | LayerId::V | LayerId::O => (d, d),
            LayerId::Fc1 => (d, self.ffn_dim()),
            LayerId::Fc2 => (self.ffn_dim(), d),
        }
    }

    /// Activation elements entering `layer` for one sample.
    pub fn layer_elems(&self, layer: LayerId) -> u64 {
        (self.seq_len * self.layer_shape(layer).0) as u64
    }

    pub fn layer_macs(&self, layer: LayerId) -> u64 {
        let (i, o) = self.layer_shape(layer);
        (self.seq_len * i * o) as u64
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams<E: Element> {
    pub ln1: Vec<E>,
    pub ln2: Vec<E>,
    /// `[hidden, hidden]` projection of the timestep embedding.
    pub t_proj: Tensor<E>,
    /// `[out, in]` weights indexed by [`LayerId::index`].
    pub weights: [Tensor<E>; 6],
}

impl<E: Element> BlockParams<E> {
    pub fn weight(&self, layer: LayerId) -> &Tensor<E> {
        &self.weights[layer.index()]
    }
}

#[derive(Clone, Debug)]
pub struct ToyModel<E: Element = f32> {
    spec: ToyModelSpec,
    blocks: Vec<BlockParams<E>>,
}

fn gaussian(rng: &mut ChaCha8Rng, dims: &[usize], std: f64) -> Vec<f64> {
    let n: usize = dims.iter().product();
    (0..n)
        .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

fn to_tensor<E: Element>(dims: &[usize], v: Vec<f64>) -> Tensor<E> {
    Tensor::from_parts_unchecked(dims.to_vec(), v.into_iter().map(E::from_f64_lossy).collect())
}

impl<E: Element> ToyModel<E> {
    /// Draws all parameters from `spec.seed`. Weights are sampled in f64 and
    /// rounded once, so an f32 and an f64 model share the same draw.
    pub fn new(spec: ToyModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let d = spec.hidden_dim;
        let blocks = (0..spec.n_blocks)
            .map(|b| {
                let mut ln = |outlier: f64| {
                    let mut g: Vec<f64> =
                        gaussian(&mut rng, &[d], LN_GAIN_STD).into_iter().map(|v| 1.0 + v).collect();
                    g[b % d] *= outlier;
                    g.into_iter().map(E::from_f64_lossy).collect::<Vec<E>>()
                };
                let outlier = OUTLIER_GAINS[b % OUTLIER_GAINS.len()];
                let ln1 = ln(outlier);
                let ln2 = ln(1.0);
                let t_proj = to_tensor(&[d, d], gaussian(&mut rng, &[d, d], TIME_GAIN / (d as f64).sqrt()));
                let weights = LayerId::ALL.map(|layer| {
                    let (i, o) = spec.layer_shape(layer);
                    let gain = match layer {
                        LayerId::O | LayerId::Fc2 => RESIDUAL_GAIN,
                        _ => 1.0,
                    };
                    let mut w = gaussian(&mut rng, &[o, i], gain / (i as f64).sqrt());
                    // The consumers of the outlier channel carry the inverse
                    // gain, so the channel is loud in activations only.
                    if matches!(layer, LayerId::Q | LayerId::K | LayerId::V) {
                        w.iter_mut().skip(b % d).step_by(i).for_each(|v| *v /= outlier);
                    }
                    to_tensor(&[o, i], w)
                });
                BlockParams {
                    ln1,
                    ln2,
                    t_proj,
                    weights,
                }
            })
            .collect();
        Ok(Self { spec, blocks })
    }

    /// Builds a model from explicit parameters.
    pub fn from_params(spec: ToyModelSpec, blocks: Vec<BlockParams<E>>) -> Result<Self> {
        spec.validate()?;
        if blocks.len() != spec.n_blocks {
            return Err(Error::Config(format!(
                "{} blocks supplied for n_blocks = {}",
                blocks.len(),
                spec.n_blocks
            )));
        }
        for p in &blocks {
            for layer in LayerId::ALL {
                let (i, o) = spec.layer_shape(layer);
                if p.weight(layer).dims() != [o, i] {
                    return Err(Error::DimMismatch {
                        left: p.weight(layer).dims().to_vec(),
                        right: vec![o, i],
                    });
                }
            }
        }
        Ok(Self { spec, blocks })
    }

    pub fn spec(&self) -> &ToyModelSpec {
        &self.spec
    }

    pub fn blocks(&self) -> &[BlockParams<E>] {
        &self.blocks
    }

    pub fn block(&self, b: usize) -> &BlockParams<E> {
        &self.blocks[b]
    }

    /// Sinusoidal embedding of continuous time `s`: pairs `(sin, cos)` of
    /// `s * 10000^(-2i/D)`.
    pub fn time_embedding(&self, s: f64) -> Vec<E> {
        let d = self.spec.hidden_dim;
        (0..d)
            .map(|j| {
                let freq = 10000f64.powf(-((j / 2 * 2) as f64) / d as f64);
                let a = s * freq;
                E::from_f64_lossy(if j % 2 == 0 { a.sin() } else { a.cos() })
            })
            .collect()
    }

    /// Forward pass of block `b` on `x` of dims `[..., seq, hidden]`.
    pub fn block_forward(
        &self,
        b: usize,
        x: &Tensor<E>,
        t_embed: &[E],
        exec: &mut dyn FnMut(LayerId, &Tensor<E>) -> Result<Tensor<E>>,
    ) -> Result<Tensor<E>> {
        let spec = &self.spec;
        let d = spec.hidden_dim;
        if x.rank() < 2 || x.last_dim() != d || x.dims()[x.rank() - 2] != spec.seq_len {
            return Err(Error::DimMismatch {
                left: x.dims().to_vec(),
                right: vec![spec.seq_len, d],
            });
        }
        if t_embed.len() != d {
            return Err(Error::DimMismatch {
                left: vec![t_embed.len()],
                right: vec![d],
            });
        }
        let p = &self.blocks[b];
        let shift: Vec<E> = (0..d)
            .map(|o| dot(p.t_proj.row(o), t_embed))
            .collect();

        let h1 = layer_norm(x, &p.ln1, &shift);
        let q = exec(LayerId::Q, &h1)?;
        let k = exec(LayerId::K, &h1)?;
        let v = exec(LayerId::V, &h1)?;
        let a = attention(&q, &k, &v, spec.seq_len, spec.n_heads);
        let attn = exec(LayerId::O, &a)?;
        let x2 = x.add(&attn)?;

        let h2 = layer_norm(&x2, &p.ln2, &shift);
        let f = exec(LayerId::Fc1, &h2)?.map(gelu)?;
        let mlp = exec(LayerId::Fc2, &f)?;
        x2.add(&mlp)
    }

    /// Block forward with every projection in unquantized arithmetic.
    pub fn block_forward_full(&self, b: usize, x: &Tensor<E>, t_embed: &[E]) -> Result<Tensor<E>> {
        let p = &self.blocks[b];
        self.block_forward(b, x, t_embed, &mut |layer, h| linear(h, p.weight(layer)))
    }
}

/// Dot product with eight independent partial sums, combined pairwise.
#[inline]
pub fn dot<E: Element>(a: &[E], b: &[E]) -> E {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [E::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (xa, xb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for i in 0..8 {
            acc[i] = acc[i] + xa[i] * xb[i];
        }
    }
    let mut tail = E::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `x · wᵀ` for `x: [..., in]`, `w: [out, in]`.
pub fn linear<E: Element>(x: &Tensor<E>, w: &Tensor<E>) -> Result<Tensor<E>> {
    let (out_f, in_f) = (w.dims()[0], w.last_dim());
    if x.last_dim() != in_f {
        return Err(Error::DimMismatch {
            left: x.dims().to_vec(),
            right: w.dims().to_vec(),
        });
    }
    let mut data = Vec::with_capacity(x.rows() * out_f);
    for r in 0..x.rows() {
        let xr = x.row(r);
        data.extend((0..out_f).map(|o| dot(xr, w.row(o))));
    }
    let mut dims = x.dims().to_vec();
    *dims.last_mut().expect("rank >= 1") = out_f;
    Tensor::from_parts_unchecked(dims, data).validated()
}

fn layer_norm<E: Element>(x: &Tensor<E>, gain: &[E], shift: &[E]) -> Tensor<E> {
    let d = x.last_dim();
    let n = E::from_f64_lossy(d as f64);
    let eps = E::from_f64_lossy(LN_EPS);
    let mut data = Vec::with_capacity(x.numel());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<E>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / n;
        let inv = (var + eps).sqrt().recip();
        data.extend((0..d).map(|j| (row[j] - mean) * inv * gain[j] + shift[j]));
    }
    Tensor::from_parts_unchecked(x.dims().to_vec(), data)
}

/// Multi-head softmax attention within each sample of `[..., seq, hidden]`.
fn attention<E: Element>(q: &Tensor<E>, k: &Tensor<E>, v: &Tensor<E>, seq: usize, heads: usize) -> Tensor<E> {
    let d = q.last_dim();
    let dh = d / heads;
    let samples = q.rows() / seq;
    let scale = E::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let mut out = vec![E::zero(); q.numel()];
    let mut scores = vec![E::zero(); seq];
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    for s in 0..samples {
        let base = s * seq * d;
        for h in 0..heads {
            let off = h * dh;
            for i in 0..seq {
                let qi = &qd[base + i * d + off..base + i * d + off + dh];
                let mut max = E::neg_infinity();
                for j in 0..seq {
                    let kj = &kd[base + j * d + off..base + j * d + off + dh];
                    scores[j] = dot(qi, kj) * scale;
                    max = max.max(scores[j]);
                }
                let mut denom = E::zero();
                for sc in scores.iter_mut() {
                    *sc = (*sc - max).exp();
                    denom = denom + *sc;
                }
                let o = &mut out[base + i * d + off..base + i * d + off + dh];
                for j in 0..seq {
                    let w = scores[j] / denom;
                    let vj = &vd[base + j * d + off..base + j * d + off + dh];
                    for c in 0..dh {
                        o[c] = o[c] + w * vj[c];
                    }
                }
            }
        }
    }
    Tensor::from_parts_unchecked(q.dims().to_vec(), out)
}

/// Tanh approximation of GELU.
pub fn gelu<E: Element>(x: E) -> E {
    let c = E::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let half = E::from_f64_lossy(0.5);
    let k = E::from_f64_lossy(0.044715);
    half * x * (E::one() + (c * (x + k * x * x * x)).tanh())
}
