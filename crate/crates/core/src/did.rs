//! Difference-in-differences over the four counterfactual scenarios:
//! `ΔY = [Y(β′,u′) − Y(β′,u)] − [Y(β,u′) − Y(β,u)]`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{Generator, NormMode};
use crate::interventions::{make_scenarios, InterventionSpec, RegionMask};
use crate::model::Model;
use crate::segment::segment;
use crate::tensor::Tensor;

pub const DEFAULT_TAU: f32 = 0.05;
pub const DEFAULT_TAU_OFF: f64 = 0.03;
/// Linear display range of exported heatmaps.
pub const HEATMAP_SCALE: [f32; 2] = [0.0, 0.5];

/// Nonnegative per-pixel map.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f32>,
}

impl Heatmap {
    pub fn max(&self) -> f32 {
        self.values.iter().fold(0.0, |m, &v| m.max(v))
    }

    pub fn l2(&self) -> f64 {
        self.values.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt()
    }

    pub fn threshold(&self, tau: f32) -> RegionMask {
        RegionMask::new(self.h, self.w, self.values.iter().map(|&v| v > tau).collect()).expect("same size")
    }
}

/// Per-pixel Euclidean length of the RGB vector.
pub fn heatmap(t: &Tensor) -> Heatmap {
    let (h, w) = (t.height(), t.width());
    let values = (0..h * w)
        .map(|i| (0..t.channels()).map(|c| t.channel(c)[i].powi(2)).sum::<f32>().sqrt())
        .collect();
    Heatmap { h, w, values }
}

fn diff(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = a.clone();
    for (o, v) in out.data_mut().iter_mut().zip(b.data()) {
        *o -= v;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DidResult {
    pub y_beta_u: Tensor,
    pub y_beta_u1: Tensor,
    pub y_beta1_u1: Tensor,
    pub y_beta1_u: Tensor,
    pub delta_y: Tensor,
    pub heatmap: Heatmap,
    /// Heatmap of `Y(β′,u′) − Y(β′,u)`.
    pub inpaint_effect: Heatmap,
    /// Heatmap of `Y(β,u) − Y(β,u′)`.
    pub ablation_effect: Heatmap,
    /// Background figure at [`DEFAULT_TAU`].
    pub background: RegionMask,
}

/// The DID combination of four images, evaluated in a fixed order.
pub fn did_combine(y_beta_u: &Tensor, y_beta_u1: &Tensor, y_beta1_u1: &Tensor, y_beta1_u: &Tensor) -> Tensor {
    let mut out = y_beta1_u1.clone();
    let parts = (y_beta1_u.data(), y_beta_u1.data(), y_beta_u.data());
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        *o = (*o - parts.0[i]) - (parts.1[i] - parts.2[i]);
    }
    out
}

pub fn run_did(generator: &Generator, z: &[f32], spec: &InterventionSpec) -> Result<DidResult> {
    let s = make_scenarios(generator, z, spec)?;
    let (y_beta_u, y_beta_u1) = (s.base.image, s.coefficient_fixed.image);
    let (y_beta1_u1, y_beta1_u) = (s.ablated.image, s.units_fixed.image);
    let delta_y = did_combine(&y_beta_u, &y_beta_u1, &y_beta1_u1, &y_beta1_u);
    let inpaint_effect = heatmap(&diff(&y_beta1_u1, &y_beta1_u));
    let ablation_effect = heatmap(&diff(&y_beta_u, &y_beta_u1));
    let mut r = DidResult {
        heatmap: heatmap(&delta_y),
        delta_y,
        y_beta_u,
        y_beta_u1,
        y_beta1_u1,
        y_beta1_u,
        inpaint_effect,
        ablation_effect,
        background: RegionMask::new(0, 0, vec![]).expect("empty"),
    };
    r.background = background_figure(&r, DEFAULT_TAU)?;
    Ok(r)
}

/// Pixels where both effects stay below `tau`.
pub fn background_figure(result: &DidResult, tau: f32) -> Result<RegionMask> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Argument("tau must be positive".into()));
    }
    let (a, b) = (&result.inpaint_effect, &result.ablation_effect);
    let bits = a.values.iter().zip(&b.values).map(|(&x, &y)| x < tau && y < tau).collect();
    RegionMask::new(a.h, a.w, bits)
}

pub fn iou(a: &RegionMask, b: &RegionMask) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisentanglementReport {
    pub class: String,
    /// Per latent: Σ over other classes of |area change|.
    pub off_class_change: Vec<f64>,
    /// Per latent: drop of the target class area.
    pub on_class_drop: Vec<f64>,
    pub mean_off_class_change: f64,
    /// Total drop over total original area of the target.
    pub on_class_drop_fraction: f64,
    pub disentangled: bool,
}

pub fn disentanglement_check(
    model: &Model,
    z_batch: &[Vec<f32>],
    spec: &InterventionSpec,
    class: &str,
    tau_off: f64,
) -> Result<DisentanglementReport> {
    let c = model.class_index(class)?;
    if z_batch.is_empty() {
        return Err(Error::Argument("empty latent batch".into()));
    }
    let g = &model.generator;
    let rows: Vec<(f64, f64, f64)> = z_batch
        .par_iter()
        .map(|z| {
            let before = segment(&g.forward(z, &[], &NormMode::Live)?.image, &model.palette).areas();
            let after = segment(&g.forward(z, std::slice::from_ref(spec), &NormMode::Live)?.image, &model.palette).areas();
            let off = (0..before.len()).filter(|&k| k != c).map(|k| (after[k] - before[k]).abs()).sum();
            Ok((off, before[c] - after[c], before[c]))
        })
        .collect::<Result<_>>()?;
    let off_class_change: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let on_class_drop: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let original: f64 = rows.iter().map(|r| r.2).sum();
    let mean_off_class_change = off_class_change.iter().sum::<f64>() / rows.len() as f64;
    let on_class_drop_fraction = if original > 0.0 { on_class_drop.iter().sum::<f64>() / original } else { 0.0 };
    Ok(DisentanglementReport {
        class: class.into(),
        disentangled: mean_off_class_change < tau_off && original > 0.0 && on_class_drop_fraction >= 0.9,
        off_class_change,
        on_class_drop,
        mean_off_class_change,
        on_class_drop_fraction,
    })
}
