//! Small tanh MLP with hand-written forward and backward passes.
//!
//! Parameters are also exposed as one flat vector (each layer's weights in
//! row-major order followed by its bias) which is what the optimiser, the
//! EMA teacher and the gradient checker operate on.

use crate::numerics::Matrix;
use crate::rng::{derive_rng, stream};
use rand::Rng;
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("input has dimension {got}, encoder expects {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("cache was produced by different parameters")]
    StaleCache,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    fn num_params(&self) -> usize {
        self.weights.rows() * self.weights.cols() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<Layer>,
    pub seed: u64,
}

/// Activations recorded by [`forward`]; consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    fingerprint: u64,
    /// Input of every layer; entry `l > 0` is a tanh output.
    inputs: Vec<Vec<f64>>,
}

impl EncoderParams {
    /// Uniform `±1/√fan_in` weights and zero biases, drawn from `seed`.
    pub fn init(dims: &[usize], seed: u64) -> Self {
        Self::init_scaled(dims, seed, 1.0)
    }

    /// Uniform `±scale/√fan_in` weights and zero biases.
    pub fn init_scaled(dims: &[usize], seed: u64, scale: f64) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let mut rng = derive_rng(seed, stream::INIT, 0, 0);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = scale / (fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
                Layer {
                    weights: Matrix::from_vec(fan_out, fan_in, data).expect("sized"),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Self { layers, seed }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| Layer { weights: Matrix::zeros(w[1], w[0]), bias: vec![0.0; w[1]] })
            .collect();
        Self { layers, seed: 0 }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(Layer::output_dim));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weights.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.data().len();
            l.weights.data_mut().copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
    }

    pub fn with_flat(&self, flat: &[f64]) -> Self {
        let mut p = self.clone();
        p.assign_flat(flat);
        p
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    /// FNV-1a over the parameter bit patterns.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for l in &self.layers {
            for v in l.weights.data().iter().chain(&l.bias) {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
        }
        h
    }
}

pub fn forward(p: &EncoderParams, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
    if x.len() != p.input_dim() {
        return Err(EncoderError::ShapeMismatch { expected: p.input_dim(), got: x.len() });
    }
    let last = p.layers.len() - 1;
    let mut inputs = Vec::with_capacity(p.layers.len());
    let mut a = x.to_vec();
    for (li, l) in p.layers.iter().enumerate() {
        let mut z = l.weights.matvec(&a).expect("layer dims chain");
        for (zi, b) in z.iter_mut().zip(&l.bias) {
            *zi += b;
        }
        if li < last {
            z.iter_mut().for_each(|v| *v = v.tanh());
        }
        inputs.push(std::mem::replace(&mut a, z));
    }
    Ok((a, ForwardCache { fingerprint: p.fingerprint(), inputs }))
}

/// Accumulates `∂loss/∂params` into `grad` (flat layout), given `∂loss/∂output`.
pub fn backward_into(
    p: &EncoderParams,
    cache: &ForwardCache,
    upstream: &[f64],
    grad: &mut [f64],
) -> Result<()> {
    if cache.fingerprint != p.fingerprint() || cache.inputs.len() != p.layers.len() {
        return Err(EncoderError::StaleCache);
    }
    if upstream.len() != p.output_dim() {
        return Err(EncoderError::ShapeMismatch { expected: p.output_dim(), got: upstream.len() });
    }
    assert_eq!(grad.len(), p.num_params(), "gradient buffer length");

    let mut offsets = Vec::with_capacity(p.layers.len());
    let mut at = 0;
    for l in &p.layers {
        offsets.push(at);
        at += l.num_params();
    }

    let mut delta = upstream.to_vec();
    for li in (0..p.layers.len()).rev() {
        let l = &p.layers[li];
        let input = &cache.inputs[li];
        let (rows, cols) = (l.output_dim(), l.input_dim());
        let base = offsets[li];
        for r in 0..rows {
            let dr = delta[r];
            if dr != 0.0 {
                let row = &mut grad[base + r * cols..base + (r + 1) * cols];
                for (g, x) in row.iter_mut().zip(input) {
                    *g += dr * x;
                }
            }
            grad[base + rows * cols + r] += dr;
        }
        if li > 0 {
            let mut back = l.weights.tmatvec(&delta).expect("dims");
            // input of this layer is tanh output of the previous one
            for (b, a) in back.iter_mut().zip(input) {
                *b *= 1.0 - a * a;
            }
            delta = back;
        }
    }
    Ok(())
}

pub fn backward(p: &EncoderParams, cache: &ForwardCache, upstream: &[f64]) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; p.num_params()];
    backward_into(p, cache, upstream, &mut grad)?;
    Ok(grad)
}

/// `p ← p − lr·(grad + weight_decay·p)`
pub fn sgd_step(p: &EncoderParams, grad: &[f64], lr: f64, weight_decay: f64) -> EncoderParams {
    assert!(lr > 0.0 && weight_decay >= 0.0, "lr must be positive, weight decay non-negative");
    let flat: Vec<f64> = p
        .flatten()
        .iter()
        .zip(grad)
        .map(|(w, g)| w - lr * (g + weight_decay * w))
        .collect();
    p.with_flat(&flat)
}

const MAGIC: &[u8; 8] = b"HOIENC\x00\x01";

/// Writes the binary checkpoint block: magic, layer dims, seed, parameters (all little endian).
pub fn write_params<W: Write>(p: &EncoderParams, w: &mut W) -> Result<()> {
    w.write_all(MAGIC)?;
    let dims = p.dims();
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for d in dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&p.seed.to_le_bytes())?;
    let flat = p.flatten();
    w.write_all(&(flat.len() as u64).to_le_bytes())?;
    for v in flat {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn read_params<R: Read>(r: &mut R) -> Result<EncoderParams> {
    let magic: [u8; 8] = read_array(r)?;
    if &magic != MAGIC {
        return Err(EncoderError::Checkpoint("bad magic or unsupported version".into()));
    }
    let n_dims = u32::from_le_bytes(read_array(r)?) as usize;
    if !(2..=64).contains(&n_dims) {
        return Err(EncoderError::Checkpoint(format!("implausible layer count {n_dims}")));
    }
    let dims: Vec<usize> = (0..n_dims)
        .map(|_| read_array(r).map(|b| u32::from_le_bytes(b) as usize))
        .collect::<Result<_>>()?;
    let seed = u64::from_le_bytes(read_array(r)?);
    let n = u64::from_le_bytes(read_array(r)?) as usize;
    let mut p = EncoderParams::zeros(&dims);
    p.seed = seed;
    if n != p.num_params() {
        return Err(EncoderError::Checkpoint(format!(
            "parameter count {n} does not match dims {dims:?}"
        )));
    }
    let flat: Vec<f64> =
        (0..n).map(|_| read_array(r).map(f64::from_le_bytes)).collect::<Result<_>>()?;
    p.assign_flat(&flat);
    Ok(p)
}
