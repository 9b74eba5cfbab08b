//! Minimal dense/convolutional network kernels with reverse-mode gradients
//! and Adam. No external ML dependencies: the layers below are exactly what
//! the Q-network needs and nothing else.
//!
//! Runtime arithmetic is f32; every kernel is also instantiated at f64 for
//! the gradient-verification harness ([`grad_check`]).

mod adam;
mod gradcheck;
mod ops;

pub use adam::{adam_step, AdamState};
pub use gradcheck::grad_check;
pub use ops::{
    concat, concat_backward, conv2d_forward, conv2d_backward, conv_output_size, flatten_batch,
    linear_forward, linear_backward, relu_backward, relu_forward,
};
pub(crate) use ops::{conv2d_backward_with, conv2d_forward_with};

use std::fmt::Debug;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite gradient; update rejected")]
    NonFiniteGradient,
    #[error("bad parameter blob: {0}")]
    BadBlob(String),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> NnError {
    NnError::ShapeMismatch { op, detail: detail.into() }
}

/// Arithmetic scalar for the kernels: f32 at runtime, f64 in verification.
pub trait Scalar:
    Copy
    + PartialOrd
    + Debug
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn finite(self) -> bool;
}

impl Scalar for f32 {
    const ZERO: f32 = 0.0;
    const ONE: f32 = 1.0;
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn finite(self) -> bool {
        self.is_finite()
    }
}

impl Scalar for f64 {
    const ZERO: f64 = 0.0;
    const ONE: f64 = 1.0;
    fn from_f64(v: f64) -> f64 {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn finite(self) -> bool {
        self.is_finite()
    }
}

/// Dense n-dimensional array: a shape plus a flat row-major value buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![S::ZERO; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self, NnError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "from_vec",
                format!("shape {:?} wants {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self, NnError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err(
                "reshape",
                format!("cannot view {} values as {:?}", self.data.len(), shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.finite())
    }
}

/// Kind tag for a parameterized layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d { stride: (usize, usize) },
    Linear,
}

/// One parameterized layer: its kind plus weight and bias tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<S = f32> {
    pub kind: LayerKind,
    pub weights: Tensor<S>,
    pub bias: Tensor<S>,
}

/// Versioned ordered parameter table for a network.
///
/// The version is a monotone counter bumped by every applied trainer update
/// (see [`adam_step`]); snapshots taken by actors carry it along.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParamsT<S = f32> {
    pub version: u64,
    pub layers: Vec<Layer<S>>,
}

pub type NetParams = NetParamsT<f32>;

impl<S: Scalar> NetParamsT<S> {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.numel() + l.bias.numel()).sum()
    }

    /// Flattened view of every parameter, layer order, weights before bias.
    pub fn flat_values(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weights.data());
            out.extend_from_slice(l.bias.data());
        }
        out
    }

    /// Overwrite every parameter from a flat buffer laid out as
    /// [`flat_values`] produces.
    pub fn set_flat_values(&mut self, flat: &[S]) -> Result<(), NnError> {
        if flat.len() != self.param_count() {
            return Err(shape_err(
                "set_flat_values",
                format!("expected {} values, got {}", self.param_count(), flat.len()),
            ));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let w = l.weights.numel();
            l.weights.data_mut().copy_from_slice(&flat[off..off + w]);
            off += w;
            let b = l.bias.numel();
            l.bias.data_mut().copy_from_slice(&flat[off..off + b]);
            off += b;
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> NetParamsT<T> {
        NetParamsT {
            version: self.version,
            layers: self
                .layers
                .iter()
                .map(|l| Layer { kind: l.kind, weights: l.weights.cast(), bias: l.bias.cast() })
                .collect(),
        }
    }
}

/// Per-layer gradients aligned with a [`NetParamsT`].
#[derive(Debug, Clone)]
pub struct ParamGrads<S = f32> {
    pub layers: Vec<(Tensor<S>, Tensor<S>)>,
}

impl<S: Scalar> ParamGrads<S> {
    pub fn zeros_like(params: &NetParamsT<S>) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| (Tensor::zeros(l.weights.shape()), Tensor::zeros(l.bias.shape())))
                .collect(),
        }
    }

    pub fn aligned_with(&self, params: &NetParamsT<S>) -> bool {
        self.layers.len() == params.layers.len()
            && self.layers.iter().zip(&params.layers).all(|((gw, gb), l)| {
                gw.shape() == l.weights.shape() && gb.shape() == l.bias.shape()
            })
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|(gw, gb)| gw.all_finite() && gb.all_finite())
    }

    pub fn flat_values(&self) -> Vec<S> {
        let mut out = Vec::new();
        for (gw, gb) in &self.layers {
            out.extend_from_slice(gw.data());
            out.extend_from_slice(gb.data());
        }
        out
    }

    /// Global L2 norm over every gradient value.
    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for (gw, gb) in &self.layers {
            for v in gw.data() {
                let f = v.to_f64();
                acc += f * f;
            }
            for v in gb.data() {
                let f = v.to_f64();
                acc += f * f;
            }
        }
        acc.sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        let f = S::from_f64(factor);
        for (gw, gb) in &mut self.layers {
            for v in gw.data_mut() {
                *v = *v * f;
            }
            for v in gb.data_mut() {
                *v = *v * f;
            }
        }
    }
}

const BLOB_KIND_CONV: u8 = 1;
const BLOB_KIND_LINEAR: u8 = 2;

impl NetParams {
    /// Serialize to the parameter blob format: version (8-byte LE), layer
    /// count (4-byte LE), then per layer a kind tag, shape dims and the raw
    /// 32-bit little-endian float payloads for weights and bias. Float bit
    /// patterns are preserved exactly.
    pub fn encode_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.param_count() * 4);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            match l.kind {
                LayerKind::Conv2d { stride } => {
                    out.push(BLOB_KIND_CONV);
                    out.push(stride.0 as u8);
                    out.push(stride.1 as u8);
                }
                LayerKind::Linear => out.push(BLOB_KIND_LINEAR),
            }
            for t in [&l.weights, &l.bias] {
                out.push(t.shape().len() as u8);
                for d in t.shape() {
                    out.extend_from_slice(&(*d as u32).to_le_bytes());
                }
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn decode_blob(bytes: &[u8]) -> Result<NetParams, NnError> {
        let mut r = BlobReader { bytes, pos: 0 };
        let version = r.u64()?;
        let n_layers = r.u32()? as usize;
        if n_layers > 1024 {
            return Err(NnError::BadBlob(format!("unreasonable layer count {n_layers}")));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let kind = match r.u8()? {
                BLOB_KIND_CONV => {
                    let sh = r.u8()? as usize;
                    let sw = r.u8()? as usize;
                    if sh == 0 || sw == 0 {
                        return Err(NnError::BadBlob("zero stride".into()));
                    }
                    LayerKind::Conv2d { stride: (sh, sw) }
                }
                BLOB_KIND_LINEAR => LayerKind::Linear,
                k => return Err(NnError::BadBlob(format!("unknown layer kind {k}"))),
            };
            let weights = r.tensor()?;
            let bias = r.tensor()?;
            layers.push(Layer { kind, weights, bias });
        }
        if r.pos != bytes.len() {
            return Err(NnError::BadBlob(format!(
                "{} trailing bytes after last layer",
                bytes.len() - r.pos
            )));
        }
        Ok(NetParams { version, layers })
    }
}

struct BlobReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BlobReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.pos + n > self.bytes.len() {
            return Err(NnError::BadBlob("blob truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, NnError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Tensor<f32>, NnError> {
        let ndim = self.u8()? as usize;
        if ndim > 8 {
            return Err(NnError::BadBlob(format!("unreasonable rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        if n > 64 * 1024 * 1024 {
            return Err(NnError::BadBlob(format!("unreasonable tensor size {n}")));
        }
        let raw = self.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::from_vec(&shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn sample_params(seed: u64) -> NetParams {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut t = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Tensor::from_vec(shape, data).unwrap()
        };
        NetParams {
            version: 7,
            layers: vec![
                Layer {
                    kind: LayerKind::Conv2d { stride: (2, 2) },
                    weights: t(&[4, 2, 3, 3]),
                    bias: t(&[4]),
                },
                Layer { kind: LayerKind::Linear, weights: t(&[5, 16]), bias: t(&[5]) },
            ],
        }
    }

    #[test]
    fn blob_round_trips_bit_exact() {
        let p = sample_params(3);
        let blob = p.encode_blob();
        let q = NetParams::decode_blob(&blob).unwrap();
        assert_eq!(p.version, q.version);
        assert_eq!(p.layers.len(), q.layers.len());
        for (a, b) in p.layers.iter().zip(&q.layers) {
            assert_eq!(a.kind, b.kind);
            assert_eq!(a.weights.shape(), b.weights.shape());
            for (x, y) in a.weights.data().iter().zip(b.weights.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            for (x, y) in a.bias.data().iter().zip(b.bias.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn blob_preserves_unusual_bit_patterns() {
        let mut p = sample_params(4);
        let d = p.layers[1].weights.data_mut();
        d[0] = f32::from_bits(0x7fc0_0001); // quiet NaN payload
        d[1] = f32::from_bits(0x0000_0001); // denormal
        d[2] = -0.0;
        let q = NetParams::decode_blob(&p.encode_blob()).unwrap();
        for (x, y) in p.layers[1].weights.data().iter().zip(q.layers[1].weights.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn blob_rejects_truncation_and_trailing_bytes() {
        let p = sample_params(5);
        let blob = p.encode_blob();
        assert!(NetParams::decode_blob(&blob[..blob.len() - 1]).is_err());
        let mut extended = blob.clone();
        extended.push(0);
        assert!(NetParams::decode_blob(&extended).is_err());
    }

    #[test]
    fn flat_values_round_trip() {
        let mut p = sample_params(6);
        let flat = p.flat_values();
        assert_eq!(flat.len(), p.param_count());
        let mut doubled: Vec<f32> = flat.iter().map(|v| v * 2.0).collect();
        p.set_flat_values(&doubled).unwrap();
        doubled.truncate(3);
        assert!(p.set_flat_values(&doubled).is_err());
        assert_eq!(p.flat_values()[0], flat[0] * 2.0);
    }

    #[test]
    fn tensor_shape_validation() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::from_vec(&[2, 3], vec![1.0; 6]).unwrap();
        assert!(t.clone().reshaped(&[3, 2]).is_ok());
        assert!(t.reshaped(&[4, 2]).is_err());
    }
}
