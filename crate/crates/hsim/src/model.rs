//! Feed-forward embedding model with explicit forward/backward passes and a
//! binary checkpoint format.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream, tag};

const CHECKPOINT_MAGIC: &[u8; 5] = b"HSIM1";
/// Upper bound on any single layer dimension in a checkpoint, guarding
/// against absurd allocations from corrupt headers.
const MAX_DIM: u32 = 1 << 20;

/// One affine layer; weights are row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            in_dim,
            out_dim,
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.out_dim {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.bias[o];
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            out.push(acc);
        }
    }
}

/// Multi-layer perceptron with a rectifier between layers (linear output).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<DenseLayer>,
}

/// Activations saved by [`MlpModel::forward`] for the backward pass.
pub struct ForwardCache {
    /// Per layer, per sample: the input activation the layer consumed.
    inputs: Vec<Vec<Vec<f64>>>,
}

/// Parameter gradients, same shapes as the model layers.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl MlpModel {
    /// Model with the given layer dimensions (`dims[0]` is the input dim),
    /// uniform Xavier initialization from the seed's init stream.
    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig(format!(
                "layer dims must be at least [in, out] and positive, got {dims:?}"
            )));
        }
        let mut rng = stream([seed, 0, 0, tag::MODEL_INIT]);
        let mut layers = Vec::new();
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            layers.push(DenseLayer {
                weights: (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-a..a))
                    .collect(),
                bias: vec![0.0; fan_out],
                in_dim: fan_in,
                out_dim: fan_out,
            });
        }
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("model needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::DimensionMismatch {
                    left: pair[0].out_dim,
                    right: pair[1].in_dim,
                });
            }
        }
        for l in &layers {
            if l.weights.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(Error::ShapeMismatch("layer parameter shapes".into()));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Forward pass caching the activations needed by [`Self::backward`].
    pub fn forward(&self, features: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, ForwardCache)> {
        let mut inputs: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(features.len()); self.layers.len()];
        let mut out = Vec::with_capacity(features.len());
        let last = self.layers.len() - 1;
        for x in features {
            if x.len() != self.input_dim() {
                return Err(Error::DimensionMismatch {
                    left: self.input_dim(),
                    right: x.len(),
                });
            }
            let mut a = x.clone();
            let mut z = Vec::new();
            for (l, layer) in self.layers.iter().enumerate() {
                inputs[l].push(a.clone());
                layer.apply(&a, &mut z);
                if l < last {
                    for v in z.iter_mut() {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                }
                std::mem::swap(&mut a, &mut z);
            }
            out.push(a);
        }
        Ok((out, ForwardCache { inputs }))
    }

    /// Forward pass without caching (statistics / evaluation mode).
    pub fn forward_eval(&self, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.forward(features).map(|(out, _)| out)
    }

    /// Exact reverse-mode differentiation of [`Self::forward`]; the rectifier
    /// uses subgradient zero at zero. `upstream` is `dL/d(embedding)` per
    /// sample.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[Vec<f64>]) -> Result<ParamGrads> {
        let n = upstream.len();
        if cache.inputs[0].len() != n {
            return Err(Error::ShapeMismatch(format!(
                "cache holds {} samples, upstream {}",
                cache.inputs[0].len(),
                n
            )));
        }
        let mut grads: Vec<(Vec<f64>, Vec<f64>)> = self
            .layers
            .iter()
            .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.out_dim]))
            .collect();

        for s in 0..n {
            let mut g = upstream[s].clone();
            if g.len() != self.output_dim() {
                return Err(Error::DimensionMismatch {
                    left: self.output_dim(),
                    right: g.len(),
                });
            }
            for l in (0..self.layers.len()).rev() {
                let layer = &self.layers[l];
                let input = &cache.inputs[l][s];
                // Hidden layers see post-rectifier gradients: the layer's
                // output activation equals the *next* layer's cached input,
                // which is zero exactly where the rectifier clipped.
                if l < self.layers.len() - 1 {
                    let post = &cache.inputs[l + 1][s];
                    for (gi, &p) in g.iter_mut().zip(post) {
                        if p <= 0.0 {
                            *gi = 0.0;
                        }
                    }
                }
                let (dw, db) = &mut grads[l];
                for o in 0..layer.out_dim {
                    db[o] += g[o];
                    let row = &mut dw[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (d, &xi) in row.iter_mut().zip(input) {
                        *d += g[o] * xi;
                    }
                }
                if l > 0 {
                    let mut prev = vec![0.0; layer.in_dim];
                    for o in 0..layer.out_dim {
                        let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                        for (p, &w) in prev.iter_mut().zip(row) {
                            *p += g[o] * w;
                        }
                    }
                    g = prev;
                }
            }
        }
        Ok(ParamGrads { layers: grads })
    }

    /// Serializes to the `HSIM1` checkpoint layout: magic, `u32` layer count,
    /// per-layer `u32` in/out dims, then per layer the row-major weight matrix
    /// followed by the bias vector, all little-endian `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.in_dim as u32).to_le_bytes());
            out.extend_from_slice(&(l.out_dim as u32).to_le_bytes());
        }
        for l in &self.layers {
            for w in l.weights.iter().chain(&l.bias) {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let malformed = |msg: String| Error::MalformedFile {
            path: "<checkpoint>".into(),
            line: 0,
            message: msg,
        };
        if data.len() < CHECKPOINT_MAGIC.len() + 4 {
            return Err(malformed("truncated header".into()));
        }
        if &data[..5] != CHECKPOINT_MAGIC {
            return Err(Error::UnknownMagic {
                found: String::from_utf8_lossy(&data[..5]).into_owned(),
                expected: "HSIM1",
            });
        }
        let layer_count = u32::from_le_bytes(data[5..9].try_into().unwrap());
        if layer_count == 0 || layer_count > 64 {
            return Err(malformed(format!("implausible layer count {layer_count}")));
        }
        let header_end = 9 + layer_count as usize * 8;
        if data.len() < header_end {
            return Err(malformed("truncated layer dims".into()));
        }
        let mut dims = Vec::new();
        let mut total_params: u64 = 0;
        for i in 0..layer_count as usize {
            let off = 9 + i * 8;
            let in_dim = u32::from_le_bytes(data[off..off + 4].try_into().unwrap());
            let out_dim = u32::from_le_bytes(data[off + 4..off + 8].try_into().unwrap());
            if in_dim == 0 || out_dim == 0 || in_dim > MAX_DIM || out_dim > MAX_DIM {
                return Err(malformed(format!(
                    "implausible layer dims {in_dim}x{out_dim}"
                )));
            }
            total_params += in_dim as u64 * out_dim as u64 + out_dim as u64;
            dims.push((in_dim as usize, out_dim as usize));
        }
        let expected = header_end as u64 + total_params * 8;
        if data.len() as u64 != expected {
            return Err(malformed(format!(
                "expected {expected} bytes, found {}",
                data.len()
            )));
        }
        let mut off = header_end;
        let read_f64 = |off: &mut usize| {
            let v = f64::from_le_bytes(data[*off..*off + 8].try_into().unwrap());
            *off += 8;
            v
        };
        let mut layers = Vec::new();
        for (in_dim, out_dim) in dims {
            let mut weights = Vec::with_capacity(in_dim * out_dim);
            for _ in 0..in_dim * out_dim {
                weights.push(read_f64(&mut off));
            }
            let mut bias = Vec::with_capacity(out_dim);
            for _ in 0..out_dim {
                bias.push(read_f64(&mut off));
            }
            if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
                return Err(malformed("non-finite parameter".into()));
            }
            layers.push(DenseLayer {
                weights,
                bias,
                in_dim,
                out_dim,
            });
        }
        Self::from_layers(layers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = std::fs::read(path)?;
        Self::from_bytes(&data).map_err(|e| match e {
            Error::MalformedFile { line, message, .. } => Error::MalformedFile {
                path: path.display().to_string(),
                line,
                message,
            },
            other => other,
        })
    }
}
