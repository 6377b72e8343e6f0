//! A small post-norm Vision Transformer that exposes its patch tokens and every
//! layer's attention weights.
//!
//! Weights come from a seeded generator rather than a pretrained checkpoint.
//! They can be persisted with [`BackboneWeights::write_to`], whose layout is:
//!
//! * header: seven little-endian `u64`s `image_size, patch_size, dim, layers,
//!   heads, mlp_dim, num_classes`
//! * body: little-endian `f64`s, row-major, in the order `patch_projection`,
//!   `class_token`, `position_embedding`, then for each layer `wq, bq, wk, bk,
//!   wv, bv, wo, bo, ln1_gamma, ln1_beta, w1, b1, w2, b2, ln2_gamma, ln2_beta`.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DidError, Result};
use crate::image::Image;
use crate::tensor::{self, affine, gelu, layer_norm, Tensor};

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub num_classes: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ViTConfig {
    /// 64px images, 8px patches, 32 channels, 2 layers of 4 heads, 4 classes.
    pub fn toy() -> Self {
        ViTConfig {
            image_size: 64,
            patch_size: 8,
            dim: 32,
            layers: 2,
            heads: 4,
            mlp_dim: 64,
            num_classes: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("dim", self.dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("mlp_dim", self.mlp_dim),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(DidError::Config(format!("{name} must be positive")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(DidError::PatchSize {
                height: self.image_size,
                width: self.image_size,
                patch: self.patch_size,
            });
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(DidError::Config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_len(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub wq: Tensor,
    pub bq: Vec<f64>,
    pub wk: Tensor,
    pub bk: Vec<f64>,
    pub wv: Tensor,
    pub bv: Vec<f64>,
    pub wo: Tensor,
    pub bo: Vec<f64>,
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    pub w1: Tensor,
    pub b1: Vec<f64>,
    pub w2: Tensor,
    pub b2: Vec<f64>,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneWeights {
    pub config: ViTConfig,
    /// `3P^2 x D`; rows follow the channel-last patch flattening of [`tokenize`].
    pub patch_projection: Tensor,
    pub class_token: Vec<f64>,
    /// `(N+1) x D`, row 0 belongs to the class token.
    pub position_embedding: Tensor,
    pub layers: Vec<LayerWeights>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneOutput {
    /// `N x D` final-layer patch tokens in raster order.
    pub patch_tokens: Tensor,
    pub class_token: Vec<f64>,
    /// One `heads x (N+1) x (N+1)` post-softmax tensor per layer.
    pub attention: Vec<Tensor>,
}

/// Cuts the image into `patch x patch` tiles in raster order and flattens each
/// tile channel-last, giving an `N x 3P^2` matrix.
pub fn tokenize(image: &Image, patch: usize) -> Result<Tensor> {
    let (h, w) = (image.height(), image.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(DidError::PatchSize {
            height: h,
            width: w,
            patch,
        });
    }
    let (gh, gw) = (h / patch, w / patch);
    let len = 3 * patch * patch;
    let src = image.data();
    let mut data = Vec::with_capacity(gh * gw * len);
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..patch {
                let start = ((py * patch + dy) * w + px * patch) * 3;
                data.extend_from_slice(&src[start..start + patch * 3]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![gh * gw, len], data))
}

/// Projects patches to tokens, prepends the class token and adds position
/// embeddings to every row.
pub fn embed(patches: &Tensor, weights: &BackboneWeights) -> Result<Tensor> {
    let projected = tensor::matmul(patches, &weights.patch_projection)?;
    let (n, d) = projected.dims2()?;
    let (pn, pd) = weights.position_embedding.dims2()?;
    if pn != n + 1 || pd != d || weights.class_token.len() != d {
        return Err(DidError::shape(
            "embed",
            projected.shape(),
            weights.position_embedding.shape(),
        ));
    }
    let mut data = Vec::with_capacity((n + 1) * d);
    data.extend_from_slice(&weights.class_token);
    data.extend_from_slice(projected.data());
    for (v, p) in data.iter_mut().zip(weights.position_embedding.data()) {
        *v += p;
    }
    Ok(Tensor::from_parts(vec![n + 1, d], data))
}

/// One post-norm encoder block:
/// `y = LN(x + MSA(x))`, `out = LN(y + FFN(y))`.
///
/// Returns the block output and the `heads x T x T` attention weights.
pub fn encoder_layer(tokens: &Tensor, layer: &LayerWeights, heads: usize) -> Result<(Tensor, Tensor)> {
    let (t, d) = tokens.dims2()?;
    if heads == 0 || d % heads != 0 {
        return Err(DidError::Config(format!(
            "dim {d} is not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let scale = (dh as f64).sqrt();
    let q = affine(tokens, &layer.wq, &layer.bq)?;
    let k = affine(tokens, &layer.wk, &layer.bk)?;
    let v = affine(tokens, &layer.wv, &layer.bv)?;
    let (q, k, v) = (q.data(), k.data(), v.data());

    let mut attention = vec![0.0; heads * t * t];
    let mut mixed = vec![0.0; t * d];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let weights = &mut attention[h * t * t..(h + 1) * t * t];
        for i in 0..t {
            let qi = &q[i * d + cols.start..i * d + cols.end];
            let row = &mut weights[i * t..(i + 1) * t];
            for (j, r) in row.iter_mut().enumerate() {
                let kj = &k[j * d + cols.start..j * d + cols.end];
                *r = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / scale;
            }
            tensor::softmax_in_place(row);
            let out = &mut mixed[i * d + cols.start..i * d + cols.end];
            for (j, &a) in row.iter().enumerate() {
                let vj = &v[j * d + cols.start..j * d + cols.end];
                for (o, &vv) in out.iter_mut().zip(vj) {
                    *o += a * vv;
                }
            }
        }
    }
    let mixed = Tensor::from_parts(vec![t, d], mixed);
    let msa = affine(&mixed, &layer.wo, &layer.bo)?;
    let y = residual_norm(tokens, &msa, &layer.ln1_gamma, &layer.ln1_beta);

    let hidden = affine(&y, &layer.w1, &layer.b1)?.map(gelu);
    let ffn = affine(&hidden, &layer.w2, &layer.b2)?;
    let out = residual_norm(&y, &ffn, &layer.ln2_gamma, &layer.ln2_beta);

    Ok((out, Tensor::from_parts(vec![heads, t, t], attention)))
}

fn residual_norm(x: &Tensor, update: &Tensor, gamma: &[f64], beta: &[f64]) -> Tensor {
    let d = x.shape()[1];
    let mut out = Vec::with_capacity(x.len());
    let mut row = vec![0.0; d];
    for (xr, ur) in x.data().chunks(d).zip(update.data().chunks(d)) {
        for ((r, a), b) in row.iter_mut().zip(xr).zip(ur) {
            *r = a + b;
        }
        out.extend(layer_norm(&row, gamma, beta, LN_EPS));
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub fn forward(image: &Image, weights: &BackboneWeights) -> Result<BackboneOutput> {
    let cfg = &weights.config;
    if image.height() != cfg.image_size || image.width() != cfg.image_size {
        return Err(DidError::Config(format!(
            "image is {}x{} but the backbone expects {}x{}",
            image.height(),
            image.width(),
            cfg.image_size,
            cfg.image_size
        )));
    }
    let patches = tokenize(image, cfg.patch_size)?;
    let mut tokens = embed(&patches, weights)?;
    let mut attention = Vec::with_capacity(weights.layers.len());
    for layer in &weights.layers {
        let (next, attn) = encoder_layer(&tokens, layer, cfg.heads)?;
        tokens = next;
        attention.push(attn);
    }
    let (t, d) = tokens.dims2()?;
    let class_token = tokens.row(0).to_vec();
    let patch_tokens = Tensor::from_parts(vec![t - 1, d], tokens.data()[d..].to_vec());
    Ok(BackboneOutput {
        patch_tokens,
        class_token,
        attention,
    })
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, &[fan_in, fan_out], bound)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Seeded initialisation: Glorot-uniform affine weights, zero biases and
/// class token, position embeddings in `[-0.02, 0.02]`, unit layer-norm gains.
pub fn init_weights(config: &ViTConfig, seed: u64) -> Result<BackboneWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.dim;
    let patch_projection = glorot(&mut rng, config.patch_len(), d);
    let position_embedding = uniform(&mut rng, &[config.num_patches() + 1, d], 0.02);
    let layers = (0..config.layers)
        .map(|_| LayerWeights {
            wq: glorot(&mut rng, d, d),
            bq: vec![0.0; d],
            wk: glorot(&mut rng, d, d),
            bk: vec![0.0; d],
            wv: glorot(&mut rng, d, d),
            bv: vec![0.0; d],
            wo: glorot(&mut rng, d, d),
            bo: vec![0.0; d],
            ln1_gamma: vec![1.0; d],
            ln1_beta: vec![0.0; d],
            w1: glorot(&mut rng, d, config.mlp_dim),
            b1: vec![0.0; config.mlp_dim],
            w2: glorot(&mut rng, config.mlp_dim, d),
            b2: vec![0.0; d],
            ln2_gamma: vec![1.0; d],
            ln2_beta: vec![0.0; d],
        })
        .collect();
    Ok(BackboneWeights {
        config: *config,
        patch_projection,
        class_token: vec![0.0; d],
        position_embedding,
        layers,
    })
}

impl LayerWeights {
    fn parts(&self) -> [&[f64]; 16] {
        [
            self.wq.data(),
            &self.bq,
            self.wk.data(),
            &self.bk,
            self.wv.data(),
            &self.bv,
            self.wo.data(),
            &self.bo,
            &self.ln1_gamma,
            &self.ln1_beta,
            self.w1.data(),
            &self.b1,
            self.w2.data(),
            &self.b2,
            &self.ln2_gamma,
            &self.ln2_beta,
        ]
    }
}

impl BackboneWeights {
    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        let c = &self.config;
        for v in [
            c.image_size,
            c.patch_size,
            c.dim,
            c.layers,
            c.heads,
            c.mlp_dim,
            c.num_classes,
        ] {
            out.write_all(&(v as u64).to_le_bytes())?;
        }
        let mut body: Vec<&[f64]> = vec![
            self.patch_projection.data(),
            &self.class_token,
            self.position_embedding.data(),
        ];
        for layer in &self.layers {
            body.extend(layer.parts());
        }
        for part in body {
            write_f64s(&mut out, part)?;
        }
        Ok(())
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let mut header = [0usize; 7];
        for h in header.iter_mut() {
            let mut buf = [0u8; 8];
            input.read_exact(&mut buf)?;
            *h = usize::try_from(u64::from_le_bytes(buf))
                .map_err(|_| DidError::Config("header value out of range".into()))?;
        }
        let [image_size, patch_size, dim, layers, heads, mlp_dim, num_classes] = header;
        let config = ViTConfig {
            image_size,
            patch_size,
            dim,
            layers,
            heads,
            mlp_dim,
            num_classes,
        };
        config.validate()?;
        let d = dim;
        let mut take = |shape: &[usize]| -> Result<Tensor> {
            let data = read_f64s(&mut input, shape.iter().product())?;
            Tensor::new(shape.to_vec(), data)
        };
        let patch_projection = take(&[config.patch_len(), d])?;
        let class_token = take(&[d])?.into_data();
        let position_embedding = take(&[config.num_patches() + 1, d])?;
        let mut layer_weights = Vec::with_capacity(layers);
        for _ in 0..layers {
            layer_weights.push(LayerWeights {
                wq: take(&[d, d])?,
                bq: take(&[d])?.into_data(),
                wk: take(&[d, d])?,
                bk: take(&[d])?.into_data(),
                wv: take(&[d, d])?,
                bv: take(&[d])?.into_data(),
                wo: take(&[d, d])?,
                bo: take(&[d])?.into_data(),
                ln1_gamma: take(&[d])?.into_data(),
                ln1_beta: take(&[d])?.into_data(),
                w1: take(&[d, mlp_dim])?,
                b1: take(&[mlp_dim])?.into_data(),
                w2: take(&[mlp_dim, d])?,
                b2: take(&[d])?.into_data(),
                ln2_gamma: take(&[d])?.into_data(),
                ln2_beta: take(&[d])?.into_data(),
            });
        }
        Ok(BackboneWeights {
            config,
            patch_projection,
            class_token,
            position_embedding,
            layers: layer_weights,
        })
    }
}

pub(crate) fn write_f64s(out: &mut impl Write, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Reads `n` values, growing the buffer only as bytes arrive so a corrupt
/// header cannot trigger a huge allocation.
pub(crate) fn read_f64s(input: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let bytes = n
        .checked_mul(8)
        .ok_or_else(|| DidError::Config(format!("{n} values do not fit in memory")))?;
    let mut buf = Vec::new();
    input.take(bytes as u64).read_to_end(&mut buf)?;
    if buf.len() != bytes {
        return Err(DidError::Io(std::io::ErrorKind::UnexpectedEof.into()));
    }
    Ok(buf
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect())
}
