//! Pixel normalization `b = a / β` with `β = sqrt(mean_j a_j² + ε)`, plus replay
//! of externally supplied coefficients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fixed ε of the normalization.
pub const EPS: f64 = 1e-8;

/// Per-pixel coefficients of one normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaRecord {
    pub layer_index: usize,
    h: usize,
    w: usize,
    beta: Vec<f32>,
}

impl BetaRecord {
    pub fn new(layer_index: usize, h: usize, w: usize, beta: Vec<f32>) -> Result<Self> {
        if beta.len() != h * w {
            return Err(Error::Shape(format!("beta length {} != {h}x{w}", beta.len())));
        }
        if beta.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return Err(Error::Argument("beta must be finite and positive".into()));
        }
        Ok(BetaRecord { layer_index, h, w, beta })
    }

    pub fn ones(layer_index: usize, h: usize, w: usize) -> Self {
        BetaRecord { layer_index, h, w, beta: vec![1.0; h * w] }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }
    pub fn values(&self) -> &[f32] {
        &self.beta
    }
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.beta[y * self.w + x]
    }

    /// Stored as a `1×H×W` tensor dump.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(1, self.h, self.w, self.beta.clone()).expect("beta is finite")
    }

    pub fn from_tensor(layer_index: usize, t: &Tensor) -> Result<Self> {
        if t.channels() != 1 {
            return Err(Error::Shape("beta dump must have C=1".into()));
        }
        BetaRecord::new(layer_index, t.height(), t.width(), t.data().to_vec())
    }
}

pub fn pixel_normalize(a: &Tensor, layer_index: usize) -> Result<(Tensor, BetaRecord)> {
    pixel_normalize_eps(a, EPS, layer_index)
}

pub(crate) fn pixel_normalize_eps(a: &Tensor, eps: f64, layer_index: usize) -> Result<(Tensor, BetaRecord)> {
    if a.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("normalization input"));
    }
    let (c, h, w) = a.shape();
    let n = h * w;
    let mut sq = vec![0.0f64; n];
    for ch in 0..c {
        for (s, &v) in sq.iter_mut().zip(a.channel(ch)) {
            *s += v as f64 * v as f64;
        }
    }
    let m = c.max(1) as f64;
    let beta: Vec<f32> = sq.iter().map(|s| (s / m + eps).sqrt() as f32).collect();
    let rec = BetaRecord { layer_index, h, w, beta };
    Ok((divide(a, &rec), rec))
}

/// Divides by the supplied β, ignoring `a`'s own statistics.
pub fn replay_normalize(a: &Tensor, beta: &BetaRecord) -> Result<Tensor> {
    if (a.height(), a.width()) != beta.dims() {
        return Err(Error::Shape(format!(
            "beta {:?} does not match activation {}x{}",
            beta.dims(),
            a.height(),
            a.width()
        )));
    }
    if beta.beta.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
        return Err(Error::Argument("beta contains non-positive values".into()));
    }
    Ok(divide(a, beta))
}

fn divide(a: &Tensor, beta: &BetaRecord) -> Tensor {
    let mut out = a.clone();
    for ch in 0..a.channels() {
        for (v, b) in out.channel_mut(ch).iter_mut().zip(&beta.beta) {
            *v /= *b;
        }
    }
    out
}
