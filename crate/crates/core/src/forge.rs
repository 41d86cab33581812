//! Analytic generator construction from a scene blueprint.
//!
//! The forged network works on a 16×16 analysis grid. Surfaces are row bands
//! carrying a context ramp along the columns; each object class owns one
//! rectangular slot whose presence is gated by a latent coordinate. Layer 0
//! forms presence masks with the identity
//! `leaky(y) − leaky(y − 1) = α + (1 − α)·clamp(y, 0, 1)`. The analysis layer
//! holds the class units and one context unit per surface. Layer 2 stacks
//! per-class evidence next to a constant reference channel, layer 3 turns each
//! evidence map into a signed margin against a threshold, layer 4 keeps only
//! the winner per pixel and the head paints the winner's palette color.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::generator::{
    Dense, ForwardTrace, Generator, GeneratorConfig, GeneratorWeights, LayerSpec, LayerWeights, NormKind, NormMode,
};
use crate::interventions::RegionMask;
use crate::latent::sample_latents;
use crate::model::{ClassTruth, Gate, GroundTruth, Model};
use crate::segment::{segment, ClassColor, Palette};
use crate::tensor::ConvKernel;

/// Side of the analysis grid.
pub const GRID: usize = 16;
pub const MAX_CLASSES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    pub name: String,
    /// Half-open row band `[start, end)`.
    pub rows: [usize; 2],
    /// Context level at the first and last column.
    pub context: [f32; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub surface: String,
    /// `[row_start, row_end, col_start, col_end]`, half-open.
    pub slot: [usize; 4],
    /// Probability that the object is present in a sample.
    pub spawn: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingProfile {
    Flat { n_units: usize, weight: f32 },
    Concentrated { n_strong: usize, strong_weight: f32, n_weak: usize, weak_weight: f32 },
}

impl CouplingProfile {
    pub fn weights(&self) -> Vec<f32> {
        match *self {
            CouplingProfile::Flat { n_units, weight } => vec![weight; n_units],
            CouplingProfile::Concentrated { n_strong, strong_weight, n_weak, weak_weight } => {
                let mut w = vec![strong_weight; n_strong];
                w.extend(std::iter::repeat_n(weak_weight, n_weak));
                w
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectClass {
    pub name: String,
    pub color: [f32; 3],
    pub region: RegionSpec,
    pub coupling_profile: CouplingProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoLocation {
    pub classes: [String; 2],
    /// Share of each class's units read as evidence for the other.
    pub strength: f32,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneBlueprint {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub surfaces: Vec<Surface>,
    #[serde(default)]
    pub object_classes: Vec<ObjectClass>,
    /// Class → ordered `(alternate, relative strength)`; the alternate's
    /// units also respond, scaled, wherever the class is present.
    #[serde(default)]
    pub runner_up_map: BTreeMap<String, Vec<(String, f32)>>,
    #[serde(default)]
    pub co_location: Vec<CoLocation>,
}

impl SceneBlueprint {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    fn class_idx(&self, name: &str) -> Result<usize> {
        self.object_classes
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::Blueprint(format!("unknown class `{name}`")))
    }

    fn surface_idx(&self, name: &str) -> Result<usize> {
        self.surfaces
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::Blueprint(format!("unknown surface `{name}`")))
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Blueprint(m));
        for (i, s) in self.surfaces.iter().enumerate() {
            if s.rows[0] >= s.rows[1] || s.rows[1] > GRID {
                return err(format!("surface `{}` has invalid rows {:?}", s.name, s.rows));
            }
            if s.context.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
                return err(format!("surface `{}` context must be finite and nonnegative", s.name));
            }
            for t in &self.surfaces[..i] {
                if t.name == s.name {
                    return err(format!("duplicate surface `{}`", s.name));
                }
                if s.rows[0] < t.rows[1] && t.rows[0] < s.rows[1] {
                    return err(format!("surfaces `{}` and `{}` overlap", t.name, s.name));
                }
            }
        }
        if self.object_classes.len() > MAX_CLASSES {
            return Err(Error::Infeasible(format!("at most {MAX_CLASSES} classes")));
        }
        for (i, c) in self.object_classes.iter().enumerate() {
            if c.color.iter().any(|v| ![0.0, 0.5, 1.0].contains(v)) || c.color == [0.5; 3] {
                return err(format!(
                    "class `{}` color must use components in {{0, 0.5, 1}} and differ from the gray background",
                    c.name
                ));
            }
            let [r0, r1, c0, c1] = c.region.slot;
            if r0 >= r1 || c0 >= c1 || r1 > GRID || c1 > GRID {
                return err(format!("class `{}` has invalid slot {:?}", c.name, c.region.slot));
            }
            let s = &self.surfaces[self.surface_idx(&c.region.surface)?];
            if r0 < s.rows[0] || r1 > s.rows[1] {
                return err(format!("class `{}` slot leaves surface `{}`", c.name, s.name));
            }
            if !(0.0..=1.0).contains(&c.region.spawn) {
                return err(format!("class `{}` spawn must lie in [0, 1]", c.name));
            }
            let w = c.coupling_profile.weights();
            if w.is_empty() {
                return err(format!("class `{}` needs at least one dedicated unit", c.name));
            }
            if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return err(format!("class `{}` unit weights must be positive", c.name));
            }
            for d in &self.object_classes[..i] {
                if d.name == c.name {
                    return err(format!("duplicate class `{}`", c.name));
                }
                let sep = (0..3).map(|j| (d.color[j] - c.color[j]).abs()).fold(0.0, f32::max);
                if sep < 0.25 {
                    return err(format!("classes `{}` and `{}` have colors closer than 0.25", d.name, c.name));
                }
                let [q0, q1, p0, p1] = d.region.slot;
                if r0 < q1 && q0 < r1 && c0 < p1 && p0 < c1 {
                    return err(format!("slots of `{}` and `{}` overlap", d.name, c.name));
                }
            }
        }
        for (k, alts) in &self.runner_up_map {
            self.class_idx(k)?;
            for (a, rho) in alts {
                self.class_idx(a)?;
                if a == k || !(rho.is_finite() && *rho >= 0.0) {
                    return err(format!("runner-up `{a}` of `{k}` is invalid"));
                }
            }
        }
        for p in &self.co_location {
            let (a, b) = (self.class_idx(&p.classes[0])?, self.class_idx(&p.classes[1])?);
            if a == b || !(p.strength.is_finite() && p.strength >= 0.0) {
                return err(format!("invalid co-location {:?}", p.classes));
            }
        }
        Ok(())
    }

    pub fn palette(&self) -> Palette {
        Palette::new(
            self.object_classes
                .iter()
                .map(|c| ClassColor { name: c.name.clone(), color: c.color })
                .collect(),
        )
    }
}

/// Recipe constants of the forged network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForgeParams {
    /// Flat units' activation over the whole slot, relative to their weight.
    pub spread: f32,
    /// Flat units' extra activation on the cells they own.
    pub own: f32,
    /// Surface context level left on cells covered by an object.
    pub occluded: f32,
    /// Evidence per normalized unit activation.
    pub gain: f32,
    /// Surface context evidence for classes on / off that surface.
    pub h_on: f32,
    pub h_off: f32,
    /// Evidence threshold relative to the reference channel.
    pub tau: f32,
    pub reference: f32,
    pub gate_gain: f32,
    pub head_gain: f32,
}

impl Default for ForgeParams {
    fn default() -> Self {
        ForgeParams {
            spread: 0.01,
            own: 1.0,
            occluded: 0.05,
            gain: 2.0,
            h_on: 0.5,
            h_off: -4.0,
            tau: 1.2,
            reference: 8.0,
            gate_gain: 50.0,
            head_gain: 10.0,
        }
    }
}

/// Generator geometry used by the forge: 16×16 base, two layers at 16×16,
/// then 32×32 and two at 64×64. Only the analysis layer and the two after
/// it are normalized.
pub fn forge_config(base_channels: usize) -> GeneratorConfig {
    let spec = |channels, upsample, norm| LayerSpec { channels, upsample, norm };
    GeneratorConfig {
        latent_dim: 32,
        base_channels,
        base_resolution: [GRID, GRID],
        layers: vec![
            spec(64, 1, NormKind::Off),
            spec(64, 1, NormKind::Pixel),
            spec(64, 2, NormKind::Pixel),
            spec(32, 2, NormKind::Pixel),
            spec(16, 1, NormKind::Off),
        ],
        residual_weight: 0.3,
        leaky_slope: 0.2,
        analysis_layer: 1,
        output_channels: 3,
    }
}

pub fn build_generator(blueprint: &SceneBlueprint, seed: u64) -> Result<Model> {
    build_with(blueprint, seed, &ForgeParams::default())
}

struct Gated {
    latent: usize,
    gate: Gate,
    gain: f32,
    /// Per-cell scale, zero outside the support.
    scale: Vec<f32>,
}

/// Base channels: `(latent, per-cell weight, per-cell bias)`.
#[derive(Default)]
struct Base {
    channels: Vec<(Option<usize>, Vec<f32>, Vec<f32>)>,
}

impl Base {
    fn constant(&mut self, bias: Vec<f32>) -> usize {
        self.channels.push((None, vec![0.0; GRID * GRID], bias));
        self.channels.len() - 1
    }

    /// Pushes the `(P, Q, I)` triple realizing `scale · clamp(G(z − t), 0, 1)`.
    fn gated(&mut self, g: &Gated) -> [usize; 3] {
        let s = &g.scale;
        let (p, q) = match g.gate {
            Gate::Always => (self.push(None, vec![0.0; s.len()], s.clone()), self.constant(vec![0.0; s.len()])),
            Gate::Never => (self.constant(vec![0.0; s.len()]), self.constant(s.iter().map(|v| -v).collect())),
            Gate::Threshold(t) => {
                let w: Vec<f32> = s.iter().map(|v| v * g.gain).collect();
                let bp = s.iter().map(|v| -v * g.gain * t).collect();
                let bq = s.iter().map(|v| -v * (g.gain * t + 1.0)).collect();
                (self.push(Some(g.latent), w.clone(), bp), self.push(Some(g.latent), w, bq))
            }
        };
        let i = self.constant(s.clone());
        [p, q, i]
    }

    fn push(&mut self, latent: Option<usize>, w: Vec<f32>, b: Vec<f32>) -> usize {
        self.channels.push((latent, w, b));
        self.channels.len() - 1
    }
}

fn rect_cells(slot: [usize; 4]) -> Vec<bool> {
    let [r0, r1, c0, c1] = slot;
    (0..GRID * GRID)
        .map(|i| {
            let (y, x) = (i / GRID, i % GRID);
            (r0..r1).contains(&y) && (c0..c1).contains(&x)
        })
        .collect()
}

fn context_ramp(s: &Surface) -> Vec<f32> {
    (0..GRID * GRID)
        .map(|i| {
            let (y, x) = (i / GRID, i % GRID);
            if (s.rows[0]..s.rows[1]).contains(&y) {
                s.context[0] + (s.context[1] - s.context[0]) * x as f32 / (GRID - 1) as f32
            } else {
                0.0
            }
        })
        .collect()
}

pub fn build_with(bp: &SceneBlueprint, seed: u64, p: &ForgeParams) -> Result<Model> {
    bp.validate()?;
    let n_cls = bp.object_classes.len();
    let n_surf = bp.surfaces.len();
    let weights: Vec<Vec<f32>> = bp.object_classes.iter().map(|c| c.coupling_profile.weights()).collect();
    let n_units: usize = weights.iter().map(Vec::len).sum::<usize>() + n_surf;
    let probe = forge_config(1);
    if n_units > probe.layers[1].channels {
        return Err(Error::Infeasible(format!(
            "{n_units} analysis units needed, layer has {}",
            probe.layers[1].channels
        )));
    }
    let n_flat: usize = bp
        .object_classes
        .iter()
        .map(|c| match c.coupling_profile {
            CouplingProfile::Flat { n_units, .. } => n_units,
            _ => 0,
        })
        .sum();
    let l0_needed = n_surf + 2 * n_cls + n_flat;
    if l0_needed > probe.layers[0].channels {
        return Err(Error::Infeasible(format!(
            "{l0_needed} mask channels needed, layer 0 has {}",
            probe.layers[0].channels
        )));
    }
    if n_cls > probe.latent_dim {
        return Err(Error::Infeasible("more classes than latent coordinates".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords: Vec<usize> = (0..probe.latent_dim).collect();
    coords.shuffle(&mut rng);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let gates: Vec<Gate> = bp
        .object_classes
        .iter()
        .map(|c| match c.region.spawn {
            s if s >= 1.0 => Gate::Always,
            s if s <= 0.0 => Gate::Never,
            s => Gate::Threshold(std_normal.inverse_cdf(1.0 - s) as f32),
        })
        .collect();

    // Analysis units: classes in order, then one per surface.
    let mut unit_of: Vec<Vec<usize>> = Vec::new();
    let mut next = 0;
    for w in &weights {
        unit_of.push((next..next + w.len()).collect());
        next += w.len();
    }
    let surf_unit: Vec<usize> = (next..next + n_surf).collect();

    let ramps: Vec<Vec<f32>> = bp.surfaces.iter().map(context_ramp).collect();
    let slots: Vec<Vec<bool>> = bp.object_classes.iter().map(|c| rect_cells(c.region.slot)).collect();
    let class_surf: Vec<usize> = bp
        .object_classes
        .iter()
        .map(|c| bp.surface_idx(&c.region.surface))
        .collect::<Result<_>>()?;

    // Base and layer-0 channels.
    let mut base = Base::default();
    let mut l0: Vec<Vec<(usize, f32)>> = Vec::new();
    let alpha = probe.leaky_slope;
    let mask_taps = |t: [usize; 3]| vec![(t[0], 1.0 / (1.0 - alpha)), (t[1], -1.0 / (1.0 - alpha)), (t[2], -alpha / (1.0 - alpha))];
    let mut surf_ch = Vec::new();
    for r in &ramps {
        let b = base.constant(r.clone());
        l0.push(vec![(b, 1.0)]);
        surf_ch.push(l0.len() - 1);
    }
    let mut mask_ch = Vec::new();
    let mut occ_ch = Vec::new();
    let mut own_ch: Vec<Vec<usize>> = Vec::new();
    for (ci, c) in bp.object_classes.iter().enumerate() {
        let latent = coords[ci];
        let gated = |scale: Vec<f32>| Gated { latent, gate: gates[ci], gain: p.gate_gain, scale };
        let ones: Vec<f32> = slots[ci].iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        l0.push(mask_taps(base.gated(&gated(ones))));
        mask_ch.push(l0.len() - 1);
        let occ: Vec<f32> = slots[ci]
            .iter()
            .zip(&ramps[class_surf[ci]])
            .map(|(&b, &r)| if b { r } else { 0.0 })
            .collect();
        l0.push(mask_taps(base.gated(&gated(occ))));
        occ_ch.push(l0.len() - 1);
        let mut owns = Vec::new();
        if let CouplingProfile::Flat { n_units, .. } = c.coupling_profile {
            let cells: Vec<usize> = (0..GRID * GRID).filter(|&i| slots[ci][i]).collect();
            for k in 0..n_units {
                let mut s = vec![0.0; GRID * GRID];
                for (idx, &cell) in cells.iter().enumerate() {
                    if idx * n_units / cells.len() == k {
                        s[cell] = 1.0;
                    }
                }
                l0.push(mask_taps(base.gated(&gated(s))));
                owns.push(l0.len() - 1);
            }
        }
        own_ch.push(owns);
    }

    let config = forge_config(base.channels.len());
    let nl = config.layers.iter().map(|l| l.channels).collect::<Vec<_>>();
    let cells = GRID * GRID;
    let mut input = Dense::zeros(base.channels.len() * cells, config.latent_dim);
    for (b, (latent, w, bias)) in base.channels.iter().enumerate() {
        for q in 0..cells {
            let row = b * cells + q;
            input.bias[row] = bias[q];
            if let Some(l) = latent {
                input.weight[row * config.latent_dim + l] = w[q];
            }
        }
    }

    let mut k0 = ConvKernel::zeros(nl[0], base.channels.len());
    for (co, taps) in l0.iter().enumerate() {
        for &(ci, v) in taps {
            k0.add_center(co, ci, v);
        }
    }

    // Analysis layer.
    let mut k1 = ConvKernel::zeros(nl[1], nl[0]);
    for (ci, c) in bp.object_classes.iter().enumerate() {
        for (j, (&u, &w)) in unit_of[ci].iter().zip(&weights[ci]).enumerate() {
            match c.coupling_profile {
                CouplingProfile::Flat { .. } => {
                    k1.add_center(u, mask_ch[ci], w * p.spread);
                    k1.add_center(u, own_ch[ci][j], w * p.own);
                }
                CouplingProfile::Concentrated { .. } => k1.add_center(u, mask_ch[ci], w),
            }
        }
    }
    for (host, alts) in &bp.runner_up_map {
        let h = bp.class_idx(host)?;
        for (alt, rho) in alts {
            let a = bp.class_idx(alt)?;
            for (&u, &w) in unit_of[a].iter().zip(&weights[a]) {
                k1.add_center(u, mask_ch[h], rho * w);
            }
        }
    }
    for (s, &u) in surf_unit.iter().enumerate() {
        k1.add_center(u, surf_ch[s], 1.0);
        for ci in (0..n_cls).filter(|&ci| class_surf[ci] == s) {
            k1.add_center(u, occ_ch[ci], -1.0);
            k1.add_center(u, mask_ch[ci], p.occluded);
        }
    }

    // Evidence stacking plus reference.
    let reference = n_cls;
    let mut k2 = ConvKernel::zeros(nl[2], nl[1]);
    for ci in 0..n_cls {
        for &u in &unit_of[ci] {
            k2.add_center(ci, u, p.gain);
        }
        for (s, &u) in surf_unit.iter().enumerate() {
            k2.add_center(ci, u, if class_surf[ci] == s { p.h_on } else { p.h_off });
        }
    }
    for pair in &bp.co_location {
        let (a, b) = (bp.class_idx(&pair.classes[0])?, bp.class_idx(&pair.classes[1])?);
        for (x, y) in [(a, b), (b, a)] {
            for &u in &unit_of[y] {
                k2.add_center(x, u, p.gain * pair.strength);
            }
        }
    }
    k2.set_bias(reference, p.reference);

    // Signed margins as leaky pairs; the reference passes through.
    let mut k3 = ConvKernel::zeros(nl[3], nl[2]);
    for ci in 0..n_cls {
        k3.add_center(2 * ci, ci, 1.0);
        k3.add_center(2 * ci, reference, -p.tau);
        k3.add_center(2 * ci + 1, ci, -1.0);
        k3.add_center(2 * ci + 1, reference, p.tau);
    }
    k3.add_center(2 * n_cls, reference, 1.0);

    // Winner: x_c = m_c − Σ_{c′≠c} relu(m_c′), again as a leaky pair.
    let relu = [1.0 / (1.0 - alpha * alpha), alpha / (1.0 - alpha * alpha)];
    let lin = [1.0 / (1.0 + alpha), -1.0 / (1.0 + alpha)];
    let mut k4 = ConvKernel::zeros(nl[4], nl[3]);
    for c in 0..n_cls {
        for d in 0..n_cls {
            let coef = if c == d { lin } else { [-relu[0], -relu[1]] };
            for (half, sign) in [(0, 1.0), (1, -1.0)] {
                k4.add_center(2 * c + half, 2 * d, sign * coef[0]);
                k4.add_center(2 * c + half, 2 * d + 1, sign * coef[1]);
            }
        }
    }

    let mut head = Dense::zeros(3, nl[4]);
    for (ci, c) in bp.object_classes.iter().enumerate() {
        for ch in 0..3 {
            let s = p.head_gain * (2.0 * c.color[ch] - 1.0);
            head.weight[ch * nl[4] + 2 * ci] = s * relu[0];
            head.weight[ch * nl[4] + 2 * ci + 1] = s * relu[1];
        }
    }

    let mut layers = Vec::new();
    let mut c_in = config.base_channels;
    for (l, k) in config.layers.iter().zip([k0, k1, k2, k3, k4]) {
        layers.push(LayerWeights { conv: k, skip: ConvKernel::zeros(l.channels, c_in) });
        c_in = l.channels;
    }
    let generator = Generator::new(config, GeneratorWeights { input, layers, head })?;

    let n_an = generator.config.analysis_channels();
    let mut coupling = vec![vec![0.0; n_cls]; n_an];
    for ci in 0..n_cls {
        for (&u, &w) in unit_of[ci].iter().zip(&weights[ci]) {
            coupling[u][ci] = w;
        }
    }
    let classes = bp
        .object_classes
        .iter()
        .enumerate()
        .map(|(ci, c)| ClassTruth {
            name: c.name.clone(),
            latent: coords[ci],
            gate: gates[ci],
            gate_gain: p.gate_gain,
            surface: c.region.surface.clone(),
            units: unit_of[ci].clone(),
            slot: RegionMask::new(GRID, GRID, slots[ci].clone()).expect("grid-sized"),
        })
        .collect();
    let surface_units = bp.surfaces.iter().zip(&surf_unit).map(|(s, &u)| (s.name.clone(), u)).collect();

    let mut model = Model::new(generator, bp.palette(), seed)?;
    model.ground_truth = Some(GroundTruth { coupling, classes, surface_units });
    Ok(model)
}

/// `n` seeded latent draws rendered live, without interventions.
pub fn sample_corpus(model: &Model, n: usize, seed: u64) -> Result<Vec<ForwardTrace>> {
    use rayon::prelude::*;
    if n == 0 {
        return Err(Error::Argument("corpus size must be >= 1".into()));
    }
    sample_latents(seed, n, model.generator.latent_dim())
        .par_iter()
        .map(|z| model.generator.forward(z, &[], &NormMode::Live))
        .collect()
}

/// Segmentations of a corpus.
pub fn corpus_masks(model: &Model, traces: &[ForwardTrace]) -> Vec<crate::segment::SegMask> {
    traces.iter().map(|t| segment(&t.image, &model.palette)).collect()
}

/// Shipped blueprint presets by file stem.
pub mod presets {
    use super::SceneBlueprint;
    use crate::error::{Error, Result};

    pub const NAMES: [&str; 3] = ["conference_flat_chair", "concentrated_painting", "emergence_painting_door"];

    pub fn source(name: &str) -> Option<&'static str> {
        let stem = name.strip_suffix(".json").unwrap_or(name);
        Some(match stem {
            "conference_flat_chair" => include_str!("../presets/conference_flat_chair.json"),
            "concentrated_painting" => include_str!("../presets/concentrated_painting.json"),
            "emergence_painting_door" => include_str!("../presets/emergence_painting_door.json"),
            _ => return None,
        })
    }

    pub fn load(name: &str) -> Result<SceneBlueprint> {
        let src = source(name).ok_or_else(|| Error::Blueprint(format!("no preset named `{name}`")))?;
        SceneBlueprint::from_json(src)
    }
}
