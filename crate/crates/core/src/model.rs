//! A generator together with its palette, insertion constants and, for
//! forged generators, the ground-truth coupling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::interventions::RegionMask;
use crate::latent::sample_latents;
use crate::segment::Palette;

/// Batch size used for the insertion quantile.
pub const INSERTION_BATCH: usize = 64;
pub const INSERTION_QUANTILE: f64 = 0.99;

/// How a class's presence depends on its latent coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gate {
    Always,
    Never,
    /// Present when the coordinate exceeds the threshold.
    Threshold(f32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTruth {
    pub name: String,
    /// Latent coordinate gating presence.
    pub latent: usize,
    pub gate: Gate,
    pub gate_gain: f32,
    pub surface: String,
    /// Dedicated analysis units.
    pub units: Vec<usize>,
    #[serde(with = "mask_rows")]
    pub slot: RegionMask,
}

impl ClassTruth {
    /// Mask strength in `[0, 1]` for latent `z`.
    pub fn presence(&self, z: &[f32]) -> f32 {
        match self.gate {
            Gate::Always => 1.0,
            Gate::Never => 0.0,
            Gate::Threshold(t) => (self.gate_gain * (z[self.latent] - t)).clamp(0.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// `coupling[u][c]`: intended weight of analysis unit `u` on class `c`.
    pub coupling: Vec<Vec<f32>>,
    pub classes: Vec<ClassTruth>,
    /// Analysis unit carrying each surface's context, by surface name.
    pub surface_units: Vec<(String, usize)>,
}

impl GroundTruth {
    /// Class that owns `unit`, if it is a dedicated unit.
    pub fn dedicated_class(&self, unit: usize) -> Option<usize> {
        self.classes.iter().position(|c| c.units.contains(&unit))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub generator: Generator,
    pub palette: Palette,
    /// Per-unit insertion constant `k` at the analysis layer.
    pub insertion: Vec<f32>,
    pub insertion_seed: u64,
    pub ground_truth: Option<GroundTruth>,
}

impl Model {
    /// Computes insertion constants from a seeded batch.
    pub fn new(generator: Generator, palette: Palette, seed: u64) -> Result<Self> {
        let insertion = insertion_constants(&generator, seed)?;
        Ok(Model { generator, palette, insertion, insertion_seed: seed, ground_truth: None })
    }

    pub fn analysis_layer(&self) -> usize {
        self.generator.config.analysis_layer
    }

    pub fn n_units(&self) -> usize {
        self.generator.config.analysis_channels()
    }

    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.palette.index_of(name)
    }

    pub fn check_units(&self, units: &[usize]) -> Result<()> {
        let n = self.n_units();
        match units.iter().find(|&&u| u >= n) {
            Some(u) => Err(Error::Argument(format!("unit {u} out of range for {n} analysis units"))),
            None => Ok(()),
        }
    }
}

/// 99th percentile of each analysis unit's pre-norm activation over all
/// pixels of a seeded 64-sample batch.
pub fn insertion_constants(generator: &Generator, seed: u64) -> Result<Vec<f32>> {
    let cfg = &generator.config;
    let zs = sample_latents(seed, INSERTION_BATCH, cfg.latent_dim);
    let pres = zs
        .par_iter()
        .map(|z| generator.clean_pre_norm(z, cfg.analysis_layer))
        .collect::<Result<Vec<_>>>()?;
    let c = cfg.analysis_channels();
    Ok((0..c)
        .map(|u| {
            let mut vals: Vec<f32> = pres.iter().flat_map(|t| t.channel(u).iter().copied()).collect();
            quantile(&mut vals, INSERTION_QUANTILE)
        })
        .collect())
}

/// Linearly interpolated quantile (the usual `(n−1)·q` rule).
pub fn quantile(vals: &mut [f32], q: f64) -> f32 {
    if vals.is_empty() {
        return 0.0;
    }
    vals.sort_by(f32::total_cmp);
    let pos = (vals.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    (vals[lo] as f64 + (vals[hi] as f64 - vals[lo] as f64) * frac) as f32
}

mod mask_rows {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::interventions::RegionMask;

    pub fn serialize<S: Serializer>(m: &RegionMask, s: S) -> Result<S::Ok, S::Error> {
        let (h, w) = m.dims();
        let rows: Vec<String> = (0..h)
            .map(|y| (0..w).map(|x| if m.get(y, x) { '#' } else { '.' }).collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<RegionMask, D::Error> {
        use serde::de::Error;
        let rows = Vec::<String>::deserialize(d)?;
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.len());
        let bits: Vec<bool> = rows.iter().flat_map(|r| r.chars().map(|c| c == '#')).collect();
        RegionMask::new(h, w, bits).map_err(D::Error::custom)
    }
}
