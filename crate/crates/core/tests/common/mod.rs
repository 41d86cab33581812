#![allow(dead_code)]

use normdid::generator::{Generator, GeneratorConfig, GeneratorWeights, LayerSpec, NormKind};
use normdid::model::Model;
use normdid::segment::{ClassColor, Palette};
use normdid::tensor::Tensor;

pub fn toy_config(latent_dim: usize, layers: &[(usize, usize, NormKind)], slope: f32) -> GeneratorConfig {
    GeneratorConfig {
        latent_dim,
        base_channels: 4,
        base_resolution: [4, 4],
        layers: layers.iter().map(|&(channels, upsample, norm)| LayerSpec { channels, upsample, norm }).collect(),
        residual_weight: 0.3,
        leaky_slope: slope,
        analysis_layer: 0,
        output_channels: 3,
    }
}

/// Two layers, analysis layer 0 normalized, 8×8 output.
pub fn toy2(norm: NormKind, slope: f32) -> GeneratorConfig {
    toy_config(2, &[(8, 2, norm), (4, 1, NormKind::Off)], slope)
}

pub fn corner_palette() -> Palette {
    let c = |name: &str, color: [f32; 3]| ClassColor { name: name.into(), color };
    Palette::new(vec![
        c("red", [1.0, 0.0, 0.0]),
        c("green", [0.0, 1.0, 0.0]),
        c("blue", [0.0, 0.0, 1.0]),
        c("yellow", [1.0, 1.0, 0.0]),
    ])
}

/// Random weights with a head scaled so outputs saturate towards palette corners.
pub fn toy_model(config: GeneratorConfig, seed: u64, head_scale: f32) -> Model {
    let mut w = GeneratorWeights::random(&config, seed).unwrap();
    w.head.weight.iter_mut().for_each(|v| *v *= head_scale);
    Model::new(Generator::new(config, w).unwrap(), corner_palette(), seed).unwrap()
}

/// 4×4 latent grid in `[-1.5, 1.5]²`.
pub fn grid16() -> Vec<Vec<f32>> {
    let pts = [-1.5f32, -0.5, 0.5, 1.5];
    pts.iter().flat_map(|&a| pts.iter().map(move |&b| vec![a, b])).collect()
}

/// Plain f64 forward written without the library's building blocks.
/// `edit` replaces analysis-layer channels before normalization:
/// `Some(v)` writes constant `v`.
pub fn reference_forward(g: &Generator, z: &[f32], edit: &[(usize, f64)]) -> Vec<[f64; 3]> {
    let cfg = &g.config;
    let w = &g.weights;
    let lk = |x: f64| if x >= 0.0 { x } else { cfg.leaky_slope as f64 * x };
    let [mut h, mut wd] = cfg.base_resolution;
    let mut c = cfg.base_channels;
    let mut x: Vec<f64> = (0..w.input.out_dim)
        .map(|o| {
            let mut s = w.input.bias[o] as f64;
            for (i, &zi) in z.iter().enumerate().take(w.input.in_dim) {
                s += w.input.weight[o * w.input.in_dim + i] as f64 * zi as f64;
            }
            lk(s)
        })
        .collect();
    for (li, spec) in cfg.layers.iter().enumerate() {
        let f = spec.upsample;
        let (nh, nw) = (h * f, wd * f);
        let mut up = vec![0.0; c * nh * nw];
        for ch in 0..c {
            for y in 0..nh {
                for xx in 0..nw {
                    up[(ch * nh + y) * nw + xx] = x[(ch * h + y / f) * wd + xx / f];
                }
            }
        }
        let lw = &w.layers[li];
        let conv = |k: &normdid::tensor::ConvKernel| -> Vec<f64> {
            let mut out = vec![0.0; k.c_out() * nh * nw];
            for co in 0..k.c_out() {
                for y in 0..nh {
                    for xx in 0..nw {
                        let mut s = k.bias()[co] as f64;
                        for ci in 0..c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (yy, xs) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                    if yy < 0 || xs < 0 || yy >= nh as isize || xs >= nw as isize {
                                        continue;
                                    }
                                    s += k.tap(co, ci, ky, kx) as f64 * up[(ci * nh + yy as usize) * nw + xs as usize];
                                }
                            }
                        }
                        out[(co * nh + y) * nw + xx] = s;
                    }
                }
            }
            out
        };
        let main: Vec<f64> = conv(&lw.conv).into_iter().map(lk).collect();
        let skip = conv(&lw.skip);
        let rw = cfg.residual_weight as f64;
        let nc = spec.channels;
        let mut a: Vec<f64> = main.iter().zip(&skip).map(|(m, s)| m + rw * s).collect();
        if li == cfg.analysis_layer {
            for &(u, v) in edit {
                a[u * nh * nw..(u + 1) * nh * nw].iter_mut().for_each(|e| *e = v);
            }
        }
        if spec.norm == NormKind::Pixel {
            for p in 0..nh * nw {
                let ms = (0..nc).map(|ch| a[ch * nh * nw + p].powi(2)).sum::<f64>() / nc as f64;
                let beta = (ms + 1e-8).sqrt();
                for ch in 0..nc {
                    a[ch * nh * nw + p] /= beta;
                }
            }
        }
        x = a;
        c = nc;
        h = nh;
        wd = nw;
    }
    (0..h * wd)
        .map(|p| {
            let mut px = [0.0; 3];
            for (o, v) in px.iter_mut().enumerate() {
                let mut s = w.head.bias[o] as f64;
                for ch in 0..c {
                    s += w.head.weight[o * c + ch] as f64 * x[ch * h * wd + p];
                }
                *v = 0.5 * (s.tanh() + 1.0);
            }
            px
        })
        .collect()
}

/// Fraction of pixels whose nearest palette color lies within 0.12 (L∞).
pub fn reference_area(pixels: &[[f64; 3]], palette: &Palette, class: usize) -> f64 {
    let hits = pixels
        .iter()
        .filter(|px| {
            let d: Vec<f64> = palette
                .classes
                .iter()
                .map(|c| (0..3).map(|j| (px[j] - c.color[j] as f64).abs()).fold(0.0, f64::max))
                .collect();
            let best = (0..d.len()).min_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap();
            best == class && d[best] <= 0.12
        })
        .count();
    hits as f64 / pixels.len() as f64
}

/// Brute-force δ over the given latents.
pub fn reference_ace(model: &Model, units: &[usize], class: usize, zs: &[Vec<f32>]) -> f64 {
    let ins: Vec<(usize, f64)> = units.iter().map(|&u| (u, model.insertion[u] as f64)).collect();
    let abl: Vec<(usize, f64)> = units.iter().map(|&u| (u, 0.0)).collect();
    let mut total = 0.0;
    for z in zs {
        let xi = reference_forward(&model.generator, z, &ins);
        let xa = reference_forward(&model.generator, z, &abl);
        total += reference_area(&xi, &model.palette, class) - reference_area(&xa, &model.palette, class);
    }
    total / zs.len() as f64
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// Distance in units in the last place between two f32 values.
pub fn ulps(a: f32, b: f32) -> u32 {
    if a == b {
        return 0;
    }
    let key = |v: f32| {
        let i = v.to_bits() as i32;
        if i < 0 {
            i32::MIN - i
        } else {
            i
        }
    };
    (key(a) as i64 - key(b) as i64).unsigned_abs() as u32
}

pub fn max_ulps(a: &Tensor, b: &Tensor) -> u32 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(&x, &y)| ulps(x, y)).max().unwrap_or(0)
}
