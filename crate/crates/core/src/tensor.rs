//! Dense rank-3 tensors and the per-layer building blocks: same-size 3×3
//! convolution, nearest upsampling, leaky rectifier and weighted residual.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Dense `(C, H, W)` array in row-major `(c, h, w)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self::full(c, h, w, 0.0)
    }

    pub fn full(c: usize, h: usize, w: usize, v: f32) -> Self {
        Tensor { c, h, w, data: vec![v; c * h * w] }
    }

    /// Rejects a length mismatch and any non-finite value.
    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::Shape(format!(
                "data length {} does not match {c}x{h}x{w}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor data"));
        }
        Ok(Tensor { c, h, w, data })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }
    pub fn channels(&self) -> usize {
        self.c
    }
    pub fn height(&self) -> usize {
        self.h
    }
    pub fn width(&self) -> usize {
        self.w
    }
    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x]
    }
    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }
    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Channel vector at one pixel.
    pub fn pixel(&self, y: usize, x: usize) -> Vec<f32> {
        (0..self.c).map(|c| self.get(c, y, x)).collect()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
    }

    /// Writes the `TNSR` dump: magic, u32 C/H/W, then f32 values, all little-endian.
    pub fn write_dump<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(b"TNSR")?;
        for d in [self.c, self.h, self.w] {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)
    }

    pub fn read_dump<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != b"TNSR" {
            return Err(Error::Argument("bad tensor dump magic".into()));
        }
        let mut dims = [0usize; 3];
        for d in dims.iter_mut() {
            let mut b = [0u8; 4];
            input.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let n = dims[0] * dims[1] * dims[2];
        let mut raw = vec![0u8; n * 4];
        input.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Tensor::from_vec(dims[0], dims[1], dims[2], data)
    }
}

/// 3×3 kernel with weights laid out `(C_out, C_in, ky, kx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    c_out: usize,
    c_in: usize,
    weights: Vec<f32>,
    bias: Vec<f32>,
}

impl ConvKernel {
    pub fn zeros(c_out: usize, c_in: usize) -> Self {
        ConvKernel { c_out, c_in, weights: vec![0.0; c_out * c_in * 9], bias: vec![0.0; c_out] }
    }

    pub fn new(c_out: usize, c_in: usize, weights: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if weights.len() != c_out * c_in * 9 || bias.len() != c_out {
            return Err(Error::Shape(format!(
                "kernel {c_out}x{c_in}x3x3 needs {} weights and {c_out} biases, got {} and {}",
                c_out * c_in * 9,
                weights.len(),
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("kernel"));
        }
        Ok(ConvKernel { c_out, c_in, weights, bias })
    }

    /// Center tap 1 from channel i to channel i.
    pub fn identity(c: usize) -> Self {
        let mut k = Self::zeros(c, c);
        for i in 0..c {
            k.set_tap(i, i, 1, 1, 1.0);
        }
        k
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }
    pub fn c_in(&self) -> usize {
        self.c_in
    }
    pub fn weights(&self) -> &[f32] {
        &self.weights
    }
    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    #[inline]
    fn index(&self, co: usize, ci: usize, ky: usize, kx: usize) -> usize {
        ((co * self.c_in + ci) * 3 + ky) * 3 + kx
    }
    pub fn tap(&self, co: usize, ci: usize, ky: usize, kx: usize) -> f32 {
        self.weights[self.index(co, ci, ky, kx)]
    }
    pub fn set_tap(&mut self, co: usize, ci: usize, ky: usize, kx: usize, v: f32) {
        let i = self.index(co, ci, ky, kx);
        self.weights[i] = v;
    }
    /// Adds to the center tap; the forge builds kernels this way.
    pub fn add_center(&mut self, co: usize, ci: usize, v: f32) {
        let i = self.index(co, ci, 1, 1);
        self.weights[i] += v;
    }
    pub fn set_bias(&mut self, co: usize, v: f32) {
        self.bias[co] = v;
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|&v| v == 0.0)
    }
}

/// Same-size convolution, zero padding 1, stride 1. Zero taps are skipped.
pub fn conv2d(input: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    if input.c != kernel.c_in {
        return Err(Error::Shape(format!(
            "conv input has {} channels, kernel expects {}",
            input.c, kernel.c_in
        )));
    }
    let (h, w) = (input.h, input.w);
    let mut out = Tensor::zeros(kernel.c_out, h, w);
    for co in 0..kernel.c_out {
        let plane = out.channel_mut(co);
        plane.fill(kernel.bias[co]);
        for ci in 0..kernel.c_in {
            let src = input.channel(ci);
            for ky in 0..3 {
                for kx in 0..3 {
                    let wt = kernel.weights[((co * kernel.c_in + ci) * 3 + ky) * 3 + kx];
                    if wt == 0.0 {
                        continue;
                    }
                    accumulate_tap(plane, src, h, w, ky as isize - 1, kx as isize - 1, wt);
                }
            }
        }
    }
    Ok(out)
}

fn accumulate_tap(dst: &mut [f32], src: &[f32], h: usize, w: usize, dy: isize, dx: isize, wt: f32) {
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
    if x0 >= x1 {
        return;
    }
    for y in 0..h {
        let sy = y as isize + dy;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        let drow = &mut dst[y * w + x0..y * w + x1];
        let soff = sy as usize * w;
        let srow = &src[(soff as isize + x0 as isize + dx) as usize..(soff as isize + x1 as isize + dx) as usize];
        for (d, s) in drow.iter_mut().zip(srow) {
            *d += wt * s;
        }
    }
}

/// Replicates each pixel into a `factor × factor` block.
pub fn upsample_nearest(input: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::Argument("upsample factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(input.clone());
    }
    let (c, h, w) = input.shape();
    let (oh, ow) = (h * factor, w * factor);
    let mut data = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let src = input.channel(ch);
        for y in 0..oh {
            let row = &src[(y / factor) * w..(y / factor + 1) * w];
            for &v in row {
                for _ in 0..factor {
                    data.push(v);
                }
            }
        }
    }
    Ok(Tensor { c, h: oh, w: ow, data })
}

pub fn leaky_relu(input: &Tensor, slope: f32) -> Result<Tensor> {
    let mut out = input.clone();
    leaky_relu_in_place(&mut out, slope)?;
    Ok(out)
}

pub fn leaky_relu_in_place(t: &mut Tensor, slope: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&slope) {
        return Err(Error::Argument(format!("leaky slope {slope} outside [0, 1]")));
    }
    for v in t.data.iter_mut() {
        *v = leaky(*v, slope);
    }
    Ok(())
}

#[inline]
pub fn leaky(x: f32, slope: f32) -> f32 {
    x.max(slope * x)
}

/// `main + w·skip`.
pub fn weighted_residual(main: &Tensor, skip: &Tensor, w: f32) -> Result<Tensor> {
    if !main.same_shape(skip) {
        return Err(Error::Shape(format!(
            "residual shapes differ: {:?} vs {:?}",
            main.shape(),
            skip.shape()
        )));
    }
    let data = main.data.iter().zip(&skip.data).map(|(m, s)| m + w * s).collect();
    let out = Tensor { c: main.c, h: main.h, w: main.w, data };
    if out.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("residual output"));
    }
    Ok(out)
}
