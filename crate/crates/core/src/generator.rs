//! Fixed-depth layered generator with activation taps and β control.
//!
//! Each layer runs upsample → 3×3 conv → leaky relu → `main + w·skip` →
//! optional normalization. Interventions are applied to the pre-norm
//! activations of their layer, before that layer's normalization. A dense
//! input projection feeds layer 0 and a 1×1 head maps the last layer to RGB
//! through `0.5·(tanh + 1)`.

use std::cell::Cell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interventions::{apply_in_place, InterventionSpec};
use crate::pixnorm::{pixel_normalize, replay_normalize, BetaRecord};
use crate::tensor::{conv2d, leaky, leaky_relu_in_place, upsample_nearest, weighted_residual, ConvKernel, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// Pixel normalization.
    Pixel,
    /// A normalization slot whose β is fixed at 1.
    Identity,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub channels: usize,
    pub upsample: usize,
    pub norm: NormKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    pub base_channels: usize,
    pub base_resolution: [usize; 2],
    pub layers: Vec<LayerSpec>,
    pub residual_weight: f32,
    pub leaky_slope: f32,
    pub analysis_layer: usize,
    pub output_channels: usize,
}

impl Default for GeneratorConfig {
    /// 4×4 base, channels [64, 64, 64, 32, 16], normalization on layers 0–3,
    /// analysis layer 1 at 16×16, 64×64 output.
    fn default() -> Self {
        let chans = [64, 64, 64, 32, 16];
        let ups = [2, 2, 2, 2, 1];
        GeneratorConfig {
            latent_dim: 32,
            base_channels: 64,
            base_resolution: [4, 4],
            layers: chans
                .iter()
                .zip(ups)
                .enumerate()
                .map(|(i, (&channels, upsample))| LayerSpec {
                    channels,
                    upsample,
                    norm: if i < 4 { NormKind::Pixel } else { NormKind::Off },
                })
                .collect(),
            residual_weight: 0.3,
            leaky_slope: 0.2,
            analysis_layer: 1,
            output_channels: 3,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.latent_dim == 0 || self.base_channels == 0 {
            return bad("latent_dim and base_channels must be positive".into());
        }
        if self.base_resolution.contains(&0) {
            return bad("base resolution must be positive".into());
        }
        if self.layers.is_empty() {
            return bad("generator needs at least one layer".into());
        }
        if self.output_channels != 3 {
            return bad(format!("output_channels must be 3, got {}", self.output_channels));
        }
        if !(0.0..=1.0).contains(&self.leaky_slope) || !self.residual_weight.is_finite() {
            return bad("leaky slope must lie in [0, 1] and residual weight be finite".into());
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.channels == 0 || l.upsample == 0 {
                return bad(format!("layer {i}: channels and upsample must be positive"));
            }
        }
        let Some(a) = self.layers.get(self.analysis_layer) else {
            return Err(Error::InvalidLayer { index: self.analysis_layer, count: self.layers.len() });
        };
        if a.norm == NormKind::Off {
            return bad(format!("analysis layer {} has no normalization", self.analysis_layer));
        }
        if self.layers.last().unwrap().norm != NormKind::Off {
            return bad("final layer must not be normalized".into());
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_channel_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.channels).collect()
    }

    /// Spatial size of layer `i`'s activations.
    pub fn layer_resolution(&self, i: usize) -> (usize, usize) {
        let f: usize = self.layers[..=i].iter().map(|l| l.upsample).product();
        (self.base_resolution[0] * f, self.base_resolution[1] * f)
    }

    pub fn output_resolution(&self) -> (usize, usize) {
        self.layer_resolution(self.layers.len() - 1)
    }

    pub fn analysis_channels(&self) -> usize {
        self.layers[self.analysis_layer].channels
    }

    /// Same architecture with every pixel normalization replaced by identity.
    pub fn with_identity_norm(&self) -> Self {
        let mut c = self.clone();
        for l in &mut c.layers {
            if l.norm == NormKind::Pixel {
                l.norm = NormKind::Identity;
            }
        }
        c
    }
}

/// Row-major `out × in` affine map.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub out_dim: usize,
    pub in_dim: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Dense {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Dense { out_dim, in_dim, weight: vec![0.0; out_dim * in_dim], bias: vec![0.0; out_dim] }
    }

    pub fn apply(&self, x: &[f32]) -> Vec<f32> {
        let mut y = self.bias.clone();
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for (w, v) in row.iter().zip(x) {
                if *w != 0.0 {
                    *yo += w * v;
                }
            }
        }
        y
    }

    fn check(&self, out_dim: usize, in_dim: usize, what: &str) -> Result<()> {
        if self.out_dim != out_dim
            || self.in_dim != in_dim
            || self.weight.len() != out_dim * in_dim
            || self.bias.len() != out_dim
        {
            return Err(Error::Shape(format!("{what}: expected {out_dim}x{in_dim} dense map")));
        }
        if self.weight.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dense weights"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub conv: ConvKernel,
    pub skip: ConvKernel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorWeights {
    /// Latent → `base_channels × H₀ × W₀`, followed by leaky relu.
    pub input: Dense,
    pub layers: Vec<LayerWeights>,
    /// 1×1 projection from the last layer to RGB.
    pub head: Dense,
}

impl GeneratorWeights {
    /// Gaussian initialization; skips are identity where channel counts match.
    pub fn random(config: &GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = |std: f32, n: usize| -> Vec<f32> {
            let d = Normal::new(0.0f32, std).expect("positive std");
            (0..n).map(|_| d.sample(&mut rng)).collect()
        };
        let [h0, w0] = config.base_resolution;
        let base_len = config.base_channels * h0 * w0;
        let input = Dense {
            out_dim: base_len,
            in_dim: config.latent_dim,
            weight: gauss(1.0 / (config.latent_dim as f32).sqrt(), base_len * config.latent_dim),
            bias: gauss(0.1, base_len),
        };
        let mut layers = Vec::new();
        let mut c_in = config.base_channels;
        for l in &config.layers {
            let conv = ConvKernel::new(
                l.channels,
                c_in,
                gauss((2.0 / (9 * c_in) as f32).sqrt(), l.channels * c_in * 9),
                gauss(0.1, l.channels),
            )?;
            let skip = if c_in == l.channels {
                ConvKernel::identity(c_in)
            } else {
                let mut k = ConvKernel::zeros(l.channels, c_in);
                let w = gauss((1.0 / c_in as f32).sqrt(), l.channels * c_in);
                for co in 0..l.channels {
                    for ci in 0..c_in {
                        k.set_tap(co, ci, 1, 1, w[co * c_in + ci]);
                    }
                }
                k
            };
            layers.push(LayerWeights { conv, skip });
            c_in = l.channels;
        }
        let head = Dense { out_dim: 3, in_dim: c_in, weight: gauss(2.0 / (c_in as f32).sqrt(), 3 * c_in), bias: gauss(0.1, 3) };
        Ok(GeneratorWeights { input, layers, head })
    }

    /// Copy with every bias set to zero.
    pub fn without_biases(&self) -> Self {
        let mut w = self.clone();
        w.input.bias.iter_mut().for_each(|b| *b = 0.0);
        w.head.bias.iter_mut().for_each(|b| *b = 0.0);
        for l in &mut w.layers {
            for k in [&mut l.conv, &mut l.skip] {
                for co in 0..k.c_out() {
                    k.set_bias(co, 0.0);
                }
            }
        }
        w
    }

    pub fn check(&self, config: &GeneratorConfig) -> Result<()> {
        let [h0, w0] = config.base_resolution;
        self.input.check(config.base_channels * h0 * w0, config.latent_dim, "input projection")?;
        if self.layers.len() != config.layers.len() {
            return Err(Error::Shape(format!(
                "{} layer weights for {} layers",
                self.layers.len(),
                config.layers.len()
            )));
        }
        let mut c_in = config.base_channels;
        for (i, (lw, l)) in self.layers.iter().zip(&config.layers).enumerate() {
            for (k, what) in [(&lw.conv, "conv"), (&lw.skip, "skip")] {
                if k.c_out() != l.channels || k.c_in() != c_in {
                    return Err(Error::Shape(format!(
                        "layer {i} {what}: kernel {}x{} expected {}x{c_in}",
                        k.c_out(),
                        k.c_in(),
                        l.channels
                    )));
                }
            }
            c_in = l.channels;
        }
        self.head.check(config.output_channels, c_in, "head")
    }
}

/// β per layer; `None` where the layer is not normalized.
pub type BetaSet = Vec<Option<BetaRecord>>;

/// Governs β at the analysis layer and every normalized layer after it.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum NormMode {
    #[default]
    Live,
    Replay(BetaSet),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Post-intervention, pre-normalization activations per layer.
    pub pre_norm: Vec<Tensor>,
    /// Layer outputs after normalization.
    pub outputs: Vec<Tensor>,
    pub betas: BetaSet,
    /// `(3, H, W)` in `[0, 1]`.
    pub image: Tensor,
}

impl ForwardTrace {
    pub fn beta_set(&self) -> BetaSet {
        self.betas.clone()
    }

    pub fn n_layers(&self) -> usize {
        self.pre_norm.len()
    }
}

/// Pre-norm activations at `layer`.
pub fn units_at(trace: &ForwardTrace, layer: usize) -> Result<&Tensor> {
    trace.pre_norm.get(layer).ok_or(Error::InvalidLayer { index: layer, count: trace.n_layers() })
}

thread_local! {
    static FORWARDS: Cell<u64> = const { Cell::new(0) };
}

/// Number of full forward passes issued on the calling thread.
pub fn forward_count() -> u64 {
    FORWARDS.with(|c| c.get())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub weights: GeneratorWeights,
}

struct LayerOut {
    pre: Tensor,
    beta: Option<BetaRecord>,
    out: Tensor,
}

impl Generator {
    pub fn new(config: GeneratorConfig, weights: GeneratorWeights) -> Result<Self> {
        config.validate()?;
        weights.check(&config)?;
        Ok(Generator { config, weights })
    }

    pub fn random(config: GeneratorConfig, seed: u64) -> Result<Self> {
        let weights = GeneratorWeights::random(&config, seed)?;
        Generator::new(config, weights)
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn forward(&self, z: &[f32], interventions: &[InterventionSpec], mode: &NormMode) -> Result<ForwardTrace> {
        FORWARDS.with(|c| c.set(c.get() + 1));
        self.check_call(interventions, mode)?;
        let n = self.config.n_layers();
        let mut trace = ForwardTrace {
            pre_norm: Vec::with_capacity(n),
            outputs: Vec::with_capacity(n),
            betas: Vec::with_capacity(n),
            image: Tensor::zeros(0, 0, 0),
        };
        let mut x = self.base(z)?;
        for i in 0..n {
            let pre = self.layer_pre(i, &x)?;
            let lo = self.finish_layer(i, pre, interventions, mode)?;
            x = lo.out.clone();
            trace.pre_norm.push(lo.pre);
            trace.betas.push(lo.beta);
            trace.outputs.push(lo.out);
        }
        trace.image = self.head(&x);
        Ok(trace)
    }

    /// Pre-norm activations of `layer` with no interventions anywhere.
    pub fn clean_pre_norm(&self, z: &[f32], layer: usize) -> Result<Tensor> {
        self.check_layer(layer)?;
        let mut x = self.base(z)?;
        for i in 0..layer {
            let pre = self.layer_pre(i, &x)?;
            x = self.finish_layer(i, pre, &[], &NormMode::Live)?.out;
        }
        self.layer_pre(layer, &x)
    }

    /// Image from `layer`'s pre-norm activations onward; `interventions`
    /// must target `layer` or later.
    pub fn render_from(
        &self,
        layer: usize,
        pre: Tensor,
        interventions: &[InterventionSpec],
        mode: &NormMode,
    ) -> Result<Tensor> {
        Ok(self.tail_from(layer, pre, interventions, mode)?.1)
    }

    /// Like [`render_from`](Self::render_from) but also returns the
    /// normalized output of `layer`.
    pub fn tail_from(
        &self,
        layer: usize,
        pre: Tensor,
        interventions: &[InterventionSpec],
        mode: &NormMode,
    ) -> Result<(Tensor, Tensor)> {
        self.check_layer(layer)?;
        self.check_call(interventions, mode)?;
        if let Some(s) = interventions.iter().find(|s| s.layer < layer) {
            return Err(Error::Argument(format!("intervention at layer {} precedes layer {layer}", s.layer)));
        }
        let first = self.finish_layer(layer, pre, interventions, mode)?.out;
        let mut x = first.clone();
        for i in layer + 1..self.config.n_layers() {
            let pre = self.layer_pre(i, &x)?;
            x = self.finish_layer(i, pre, interventions, mode)?.out;
        }
        Ok((first, self.head(&x)))
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.config.n_layers() {
            return Err(Error::InvalidLayer { index: layer, count: self.config.n_layers() });
        }
        Ok(())
    }

    fn check_call(&self, interventions: &[InterventionSpec], mode: &NormMode) -> Result<()> {
        for s in interventions {
            self.check_layer(s.layer)?;
        }
        if let NormMode::Replay(set) = mode {
            for i in self.config.analysis_layer..self.config.n_layers() {
                if self.config.layers[i].norm != NormKind::Pixel {
                    continue;
                }
                let (h, w) = self.config.layer_resolution(i);
                match set.get(i) {
                    Some(Some(r)) if r.dims() == (h, w) => {}
                    Some(Some(r)) => {
                        return Err(Error::Replay(format!("layer {i}: record {:?} vs layer {h}x{w}", r.dims())))
                    }
                    _ => return Err(Error::Replay(format!("no β record for controlled layer {i}"))),
                }
            }
        }
        Ok(())
    }

    fn base(&self, z: &[f32]) -> Result<Tensor> {
        if z.len() != self.config.latent_dim {
            return Err(Error::Argument(format!(
                "latent has length {}, expected {}",
                z.len(),
                self.config.latent_dim
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent"));
        }
        let slope = self.config.leaky_slope;
        let v = self.weights.input.apply(z).into_iter().map(|x| leaky(x, slope)).collect();
        let [h0, w0] = self.config.base_resolution;
        Tensor::from_vec(self.config.base_channels, h0, w0, v)
    }

    fn layer_pre(&self, i: usize, x: &Tensor) -> Result<Tensor> {
        let spec = &self.config.layers[i];
        let lw = &self.weights.layers[i];
        let up = upsample_nearest(x, spec.upsample)?;
        let mut main = conv2d(&up, &lw.conv)?;
        leaky_relu_in_place(&mut main, self.config.leaky_slope)?;
        if lw.skip.is_zero() || self.config.residual_weight == 0.0 {
            return Ok(main);
        }
        let skip = conv2d(&up, &lw.skip)?;
        weighted_residual(&main, &skip, self.config.residual_weight)
    }

    fn finish_layer(&self, i: usize, mut pre: Tensor, interventions: &[InterventionSpec], mode: &NormMode) -> Result<LayerOut> {
        for s in interventions.iter().filter(|s| s.layer == i) {
            apply_in_place(s, &mut pre)?;
        }
        let (out, beta) = match self.config.layers[i].norm {
            NormKind::Off => (pre.clone(), None),
            NormKind::Identity => (pre.clone(), Some(BetaRecord::ones(i, pre.height(), pre.width()))),
            NormKind::Pixel => match mode {
                NormMode::Replay(set) if i >= self.config.analysis_layer => {
                    let rec = set[i].clone().expect("checked in check_call");
                    (replay_normalize(&pre, &rec)?, Some(rec))
                }
                _ => {
                    let (b, rec) = pixel_normalize(&pre, i)?;
                    (b, Some(rec))
                }
            },
        };
        Ok(LayerOut { pre, beta, out })
    }

    fn head(&self, x: &Tensor) -> Tensor {
        let (c, h, w) = x.shape();
        let n = h * w;
        let head = &self.weights.head;
        let mut img = Tensor::zeros(3, h, w);
        for o in 0..3 {
            let mut acc = vec![head.bias[o]; n];
            for ci in 0..c {
                let wt = head.weight[o * head.in_dim + ci];
                if wt == 0.0 {
                    continue;
                }
                for (a, v) in acc.iter_mut().zip(x.channel(ci)) {
                    *a += wt * v;
                }
            }
            for (dst, a) in img.channel_mut(o).iter_mut().zip(acc) {
                *dst = (0.5 * (a.tanh() + 1.0)).clamp(0.0, 1.0);
            }
        }
        img
    }
}

/// Free-function form of [`Generator::forward`].
pub fn forward(
    config: &GeneratorConfig,
    weights: &GeneratorWeights,
    z: &[f32],
    interventions: &[InterventionSpec],
    mode: &NormMode,
) -> Result<ForwardTrace> {
    Generator::new(config.clone(), weights.clone())?.forward(z, interventions, mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry() {
        let c = GeneratorConfig::default();
        c.validate().unwrap();
        assert_eq!(c.layer_resolution(1), (16, 16));
        assert_eq!(c.output_resolution(), (64, 64));
        assert_eq!(c.layer_channel_counts(), vec![64, 64, 64, 32, 16]);
    }

    #[test]
    fn config_rejects_unnormalized_analysis_layer() {
        let mut c = GeneratorConfig::default();
        c.analysis_layer = 4;
        assert!(c.validate().is_err());
        c.analysis_layer = 9;
        assert!(matches!(c.validate(), Err(Error::InvalidLayer { .. })));
    }

    #[test]
    fn replay_requires_every_controlled_layer() {
        let g = Generator::random(GeneratorConfig::default(), 1).unwrap();
        let z = vec![0.1; 32];
        let t = g.forward(&z, &[], &NormMode::Live).unwrap();
        let mut set = t.beta_set();
        set[3] = None;
        assert!(matches!(g.forward(&z, &[], &NormMode::Replay(set)), Err(Error::Replay(_))));
        // Layer 0 sits before the analysis layer and is always live.
        let mut set = t.beta_set();
        set[0] = None;
        assert!(g.forward(&z, &[], &NormMode::Replay(set)).is_ok());
    }

    #[test]
    fn tail_matches_full_forward() {
        let g = Generator::random(GeneratorConfig::default(), 4).unwrap();
        let z: Vec<f32> = (0..32).map(|i| (i as f32 * 0.37).sin()).collect();
        let spec = InterventionSpec::ablate(1, vec![0, 5, 9]);
        let full = g.forward(&z, std::slice::from_ref(&spec), &NormMode::Live).unwrap();
        let pre = g.clean_pre_norm(&z, 1).unwrap();
        let img = g.render_from(1, pre, &[spec], &NormMode::Live).unwrap();
        assert_eq!(img, full.image);
    }
}
