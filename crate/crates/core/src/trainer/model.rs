//! Dense feed-forward embedding network with hand-written backprop.
//!
//! Hidden layers use ReLU (subgradient 0 at 0); the output layer is affine,
//! optionally followed by L2 normalization. Weights live in `f64` and are
//! stored row-major as `fan_out × fan_in`.

use std::fs;
use std::path::Path;

use crate::data::Sample;
use crate::embedding::Embedder;
use crate::error::{Error, Result};
use crate::numerics::{norm, Rng, Vector};

const CHECKPOINT_MAGIC: &[u8; 6] = b"TFMLP1";

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            fan_in,
            fan_out,
            weights: vec![0.0; fan_in * fan_out],
            bias: vec![0.0; fan_out],
        }
    }

    fn apply(&self, x: &[f64]) -> Vector {
        self.weights
            .chunks_exact(self.fan_in)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b)
            .collect()
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Per-layer gradients (or momentum buffers) shaped like a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Self {
            layers: model.layers.iter().map(|l| Dense::zeros(l.fan_in, l.fan_out)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        self.check_shape(other)?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    pub fn check_shape(&self, other: &Gradients) -> Result<()> {
        let same = self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.fan_in == b.fan_in && a.fan_out == b.fan_out);
        if same {
            Ok(())
        } else {
            Err(Error::contract("gradient shapes do not match"))
        }
    }

    /// Same ordering as [`MlpModel::param`].
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|&g| g == 0.0))
    }
}

#[derive(Debug, Clone)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    layers: Vec<Dense>,
    normalize_output: bool,
    /// Bumped on every mutation so stale forward caches can be rejected.
    generation: u64,
}

/// Equal shapes and parameters; the cache generation is ignored.
impl PartialEq for MlpModel {
    fn eq(&self, other: &Self) -> bool {
        self.layer_dims == other.layer_dims && self.normalize_output == other.normalize_output && self.layers == other.layers
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input of each layer.
    inputs: Vec<Vector>,
    /// Pre-activation of each layer; the last one is the raw output.
    pre: Vec<Vector>,
    output_norm: Option<f64>,
    embedding: Vector,
    layer_dims: Vec<usize>,
    generation: u64,
}

impl ForwardCache {
    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }

    /// Sign pattern of every hidden pre-activation, used to detect when a
    /// finite-difference probe crosses a ReLU kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let hidden = self.pre.len().saturating_sub(1);
        self.pre[..hidden].iter().flatten().map(|&z| z > 0.0).collect()
    }
}

impl MlpModel {
    /// Glorot-uniform weights in `±sqrt(6/(fan_in+fan_out))`, zero biases.
    pub fn init(layer_dims: &[usize], normalize_output: bool, rng: &mut Rng) -> Result<Self> {
        validate_dims(layer_dims)?;
        let layers = layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut l = Dense::zeros(fan_in, fan_out);
                l.weights.iter_mut().for_each(|v| *v = rng.uniform(-s, s));
                l
            })
            .collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            layers,
            normalize_output,
            generation: 0,
        })
    }

    pub fn from_layers(layers: Vec<Dense>, normalize_output: bool) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::contract("model needs at least one layer"));
        }
        let mut layer_dims = vec![layers[0].fan_in];
        for l in &layers {
            if l.fan_in != *layer_dims.last().unwrap_or(&0)
                || l.weights.len() != l.fan_in * l.fan_out
                || l.bias.len() != l.fan_out
            {
                return Err(Error::contract("inconsistent layer shapes"));
            }
            layer_dims.push(l.fan_out);
        }
        validate_dims(&layer_dims)?;
        Ok(Self {
            layer_dims,
            layers,
            normalize_output,
            generation: 0,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn normalize_output(&self) -> bool {
        self.normalize_output
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated non-empty")
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    fn locate(&self, mut i: usize) -> (usize, bool, usize) {
        for (l, layer) in self.layers.iter().enumerate() {
            if i < layer.weights.len() {
                return (l, true, i);
            }
            i -= layer.weights.len();
            if i < layer.bias.len() {
                return (l, false, i);
            }
            i -= layer.bias.len();
        }
        panic!("parameter index out of range");
    }

    /// Parameter `i` in flat order: each layer's weights, then its bias.
    pub fn param(&self, i: usize) -> f64 {
        let (l, w, j) = self.locate(i);
        if w {
            self.layers[l].weights[j]
        } else {
            self.layers[l].bias[j]
        }
    }

    pub fn set_param(&mut self, i: usize, v: f64) {
        let (l, w, j) = self.locate(i);
        if w {
            self.layers[l].weights[j] = v;
        } else {
            self.layers[l].bias[j] = v;
        }
        self.generation += 1;
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vector, ForwardCache)> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&h);
            inputs.push(h);
            h = if l < last { z.iter().map(|&v| v.max(0.0)).collect() } else { z.clone() };
            pre.push(z);
        }
        let (embedding, output_norm) = if self.normalize_output {
            let n = norm(&h);
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Degenerate("model output has zero or non-finite norm".into()));
            }
            (h.iter().map(|v| v / n).collect(), Some(n))
        } else {
            (h, None)
        };
        if embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("non-finite model output".into()));
        }
        let cache = ForwardCache {
            inputs,
            pre,
            output_norm,
            embedding: embedding.clone(),
            layer_dims: self.layer_dims.clone(),
            generation: self.generation,
        };
        Ok((embedding, cache))
    }

    /// Gradients of a scalar loss with respect to every weight and bias,
    /// given `∂loss/∂embedding`.
    pub fn backward(&self, cache: &ForwardCache, grad_embedding: &[f64]) -> Result<Gradients> {
        if cache.layer_dims != self.layer_dims || cache.generation != self.generation {
            return Err(Error::contract("forward cache does not belong to this model state"));
        }
        if grad_embedding.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                found: grad_embedding.len(),
            });
        }
        // Through the normalization: (I − e eᵀ) g / ‖z‖.
        let mut g: Vector = match cache.output_norm {
            Some(n) => {
                let e = &cache.embedding;
                let eg: f64 = e.iter().zip(grad_embedding).map(|(a, b)| a * b).sum();
                grad_embedding.iter().zip(e).map(|(gi, ei)| (gi - ei * eg) / n).collect()
            }
            None => grad_embedding.to_vec(),
        };
        let mut grads = Gradients::zeros_like(self);
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &cache.inputs[l];
            let out = &mut grads.layers[l];
            for (o, &go) in g.iter().enumerate() {
                out.bias[o] = go;
                if go != 0.0 {
                    let row = &mut out.weights[o * layer.fan_in..(o + 1) * layer.fan_in];
                    row.iter_mut().zip(input).for_each(|(w, x)| *w = go * x);
                }
            }
            if l > 0 {
                let mut gh = vec![0.0; layer.fan_in];
                for (row, &go) in layer.weights.chunks_exact(layer.fan_in).zip(&g) {
                    if go != 0.0 {
                        gh.iter_mut().zip(row).for_each(|(acc, w)| *acc += w * go);
                    }
                }
                for (gi, &z) in gh.iter_mut().zip(&cache.pre[l - 1]) {
                    if z <= 0.0 {
                        *gi = 0.0;
                    }
                }
                g = gh;
            }
        }
        Ok(grads)
    }

    pub(crate) fn apply_update(&mut self, delta: &Gradients) -> Result<()> {
        Gradients::zeros_like(self).check_shape(delta)?;
        for (l, d) in self.layers.iter_mut().zip(&delta.layers) {
            l.weights.iter_mut().zip(&d.weights).for_each(|(w, v)| *w += v);
            l.bias.iter_mut().zip(&d.bias).for_each(|(b, v)| *b += v);
        }
        self.generation += 1;
        Ok(())
    }

    /// Serializes as `TFMLP1`: magic, u32 layer count, u32 layer dims,
    /// normalize flag byte, then per layer row-major f32 weights and f32
    /// biases, all little-endian. Values are rounded to f32.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.param_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for &d in &self.layer_dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(u8::from(self.normalize_output));
        for l in &self.layers {
            for &v in l.weights.iter().chain(&l.bias) {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0, origin };
        if r.take(6)? != CHECKPOINT_MAGIC {
            return Err(Error::format(origin, "not a TFMLP1 checkpoint (bad magic)"));
        }
        let n_layers = r.u32()? as usize;
        if n_layers == 0 || n_layers > 1024 {
            return Err(Error::format(origin, format!("implausible layer count {n_layers}")));
        }
        let dims = (0..=n_layers).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let normalize_output = match r.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::format(origin, format!("bad normalize flag {b}"))),
        };
        let mut layers = Vec::with_capacity(n_layers);
        for w in dims.windows(2) {
            let mut l = Dense::zeros(w[0], w[1]);
            for v in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *v = f64::from(r.f32()?);
            }
            layers.push(l);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(origin, "trailing bytes after checkpoint"));
        }
        Self::from_layers(layers, normalize_output).map_err(|e| Error::format(origin, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_bytes(&fs::read(path)?, path)
    }

    /// The model as it would be after a save/load round trip.
    pub fn rounded_to_f32(&self) -> Self {
        let mut m = self.clone();
        for l in &mut m.layers {
            for v in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *v = f64::from(*v as f32);
            }
        }
        m.generation += 1;
        m
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::contract(format!("layer dims must have >= 2 positive entries, got {dims:?}")));
    }
    Ok(())
}

impl Embedder for MlpModel {
    fn embed(&self, sample: &Sample) -> Result<Vector> {
        Ok(self.forward(&sample.x)?.0)
    }

    fn embed_dim(&self) -> usize {
        self.output_dim()
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::format(self.origin, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub(crate) fn read_u32_le(bytes: &[u8], pos: &mut usize, origin: &Path) -> Result<u32> {
    let mut r = ByteReader { bytes, pos: *pos, origin };
    let v = r.u32()?;
    *pos = r.pos;
    Ok(v)
}

pub(crate) fn read_f32_le(bytes: &[u8], pos: &mut usize, origin: &Path) -> Result<f32> {
    let mut r = ByteReader { bytes, pos: *pos, origin };
    let v = r.f32()?;
    *pos = r.pos;
    Ok(v)
}
