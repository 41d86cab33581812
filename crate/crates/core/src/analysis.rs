//! Area-drop curves, corpus statistics and the iterative clean-up loop.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ace::{top_k_units, AceTable};
use crate::error::{Error, Result};
use crate::generator::NormMode;
use crate::interventions::{InterventionSpec, Region, RegionMask};
use crate::latent::sample_latents;
use crate::model::Model;
use crate::segment::{segment, SegMask};

/// Area fraction above which a class counts as occurring in an image.
pub const OCCURRENCE_AREA: f64 = 0.005;
/// Area increase that marks a class as emergent.
pub const EMERGENCE_AREA: f64 = 0.01;
pub const CLEAN_TOP_K: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BetaMode {
    Live,
    /// β replayed from the unablated run.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: usize,
    pub area: f64,
    /// `area` over the k = 0 baseline (1 when the baseline is empty).
    pub fraction: f64,
}

pub fn area_drop_curve(
    model: &Model,
    table: &AceTable,
    class: &str,
    ks: &[usize],
    mode: BetaMode,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    if ks.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Argument("ks must be ascending".into()));
    }
    let c = model.class_index(class)?;
    let order = top_k_units(table, class, ks.last().copied().unwrap_or(0))?;
    let zs = sample_latents(seed, n_samples.max(1), model.generator.latent_dim());
    let g = &model.generator;
    let layer = model.analysis_layer();
    let per_z: Vec<(f64, Vec<f64>)> = zs
        .par_iter()
        .map(|z| {
            let base = g.forward(z, &[], &NormMode::Live)?;
            let pre = base.pre_norm[layer].clone();
            let m = match mode {
                BetaMode::Live => NormMode::Live,
                BetaMode::Fixed => NormMode::Replay(base.beta_set()),
            };
            let base_area = segment(&base.image, &model.palette).areas()[c];
            let areas = ks
                .iter()
                .map(|&k| {
                    if k == 0 {
                        return Ok(base_area);
                    }
                    let spec = InterventionSpec::ablate(layer, order[..k].to_vec());
                    let img = g.render_from(layer, pre.clone(), &[spec], &m)?;
                    Ok(segment(&img, &model.palette).areas()[c])
                })
                .collect::<Result<_>>()?;
            Ok((base_area, areas))
        })
        .collect::<Result<_>>()?;
    let n = zs.len() as f64;
    let base_area = per_z.iter().map(|r| r.0).sum::<f64>() / n;
    Ok((0..ks.len())
        .map(|i| {
            let area = per_z.iter().map(|r| r.1[i]).sum::<f64>() / n;
            CurvePoint { k: ks[i], area, fraction: if base_area > 0.0 { area / base_area } else { 1.0 } }
        })
        .collect())
}

/// Largest gap between curve fractions and a reference line.
pub fn max_deviation(curve: &[CurvePoint], line: &[f64]) -> f64 {
    curve.iter().zip(line).map(|(p, l)| (p.fraction - l).abs()).fold(0.0, f64::max)
}

/// `1 − (ground-truth weight of the first k units) / (total weight)` per k.
pub fn proportional_line(order: &[usize], weights: &[f32], ks: &[usize]) -> Vec<f64> {
    let total: f64 = weights.iter().map(|&w| w as f64).sum();
    ks.iter()
        .map(|&k| {
            let taken: f64 = order[..k.min(order.len())].iter().map(|&u| weights[u] as f64).sum();
            if total > 0.0 {
                1.0 - taken / total
            } else {
                1.0
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStat {
    pub class: String,
    pub frequency: f64,
    /// Mean area over images where the class occurs; 0 when it never does.
    pub mean_area: f64,
}

pub fn dataset_stats(corpus: &[SegMask]) -> Result<Vec<ClassStat>> {
    let first = corpus.first().ok_or_else(|| Error::Argument("empty corpus".into()))?;
    let names = &first.class_table()[1..];
    Ok(names
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let areas: Vec<f64> = corpus.iter().map(|m| m.areas()[c]).filter(|&a| a > OCCURRENCE_AREA).collect();
            ClassStat {
                class: name.clone(),
                frequency: areas.len() as f64 / corpus.len() as f64,
                mean_area: if areas.is_empty() { 0.0 } else { areas.iter().sum::<f64>() / areas.len() as f64 },
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanRound {
    pub round: usize,
    pub added: Vec<InterventionSpec>,
    pub areas: Vec<f64>,
    pub emergent: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanTranscript {
    pub class: String,
    pub classes: Vec<String>,
    pub baseline: Vec<f64>,
    pub rounds: Vec<CleanRound>,
    /// Emergent classes left when the loop stopped.
    pub unresolved: Vec<String>,
}

impl CleanTranscript {
    pub fn resolved(&self) -> bool {
        self.unresolved.is_empty()
    }

    pub fn final_areas(&self) -> &[f64] {
        self.rounds.last().map_or(&self.baseline, |r| &r.areas)
    }

    pub fn stack(&self) -> Vec<InterventionSpec> {
        self.rounds.iter().flat_map(|r| r.added.iter().cloned()).collect()
    }
}

/// Round 1 ablates the class's top-20 units. Each later round finds the
/// classes that newly appeared, and at the centroid of each emergent region
/// ablates (over that region) the surviving units active there.
pub fn iterative_clean(
    model: &Model,
    table: &AceTable,
    z: &[f32],
    class: &str,
    max_rounds: usize,
) -> Result<CleanTranscript> {
    if max_rounds == 0 {
        return Err(Error::Argument("max_rounds must be >= 1".into()));
    }
    let c = model.class_index(class)?;
    let g = &model.generator;
    let layer = model.analysis_layer();
    let (gh, gw) = g.config.layer_resolution(layer);
    let base_mask = segment(&g.forward(z, &[], &NormMode::Live)?.image, &model.palette);
    let baseline = base_mask.areas();
    let mut stack = Vec::new();
    let mut rounds = Vec::new();
    let mut pending = vec![InterventionSpec::ablate(layer, top_k_units(table, class, CLEAN_TOP_K.min(table.n_units()))?)];
    let mut unresolved = Vec::new();
    for round in 1..=max_rounds {
        stack.extend(pending.iter().cloned());
        let trace = g.forward(z, &stack, &NormMode::Live)?;
        let mask = segment(&trace.image, &model.palette);
        let areas = mask.areas();
        let emergent: Vec<usize> = (0..areas.len())
            .filter(|&k| k != c && areas[k] - baseline[k] > EMERGENCE_AREA)
            .collect();
        rounds.push(CleanRound {
            round,
            added: std::mem::take(&mut pending),
            areas,
            emergent: emergent.iter().map(|&k| model.palette.classes[k].name.clone()).collect(),
        });
        if emergent.is_empty() {
            break;
        }
        if round == max_rounds {
            unresolved = rounds.last().unwrap().emergent.clone();
            break;
        }
        let act = &trace.pre_norm[layer];
        for &e in &emergent {
            let region = emergent_cells(&mask, &base_mask, e as u8 + 1, gh, gw);
            let Some((cy, cx)) = centroid_cell(&region) else { continue };
            let px = act.pixel(cy, cx);
            let peak = px.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            if peak <= 0.0 {
                continue;
            }
            let mut units: Vec<usize> = (0..px.len()).filter(|&u| px[u].abs() >= 0.1 * peak).collect();
            units.sort_by(|&a, &b| px[b].abs().total_cmp(&px[a].abs()).then(a.cmp(&b)));
            units.truncate(CLEAN_TOP_K);
            units.sort_unstable();
            pending.push(InterventionSpec::ablate(layer, units).with_region(Region::Mask(region)));
        }
        if pending.is_empty() {
            unresolved = rounds.last().unwrap().emergent.clone();
            break;
        }
    }
    Ok(CleanTranscript { class: class.into(), classes: model.palette.names(), baseline, rounds, unresolved })
}

/// Analysis-grid cells where label `label` covers most of the block now
/// but did not in the baseline.
fn emergent_cells(now: &SegMask, before: &SegMask, label: u8, gh: usize, gw: usize) -> RegionMask {
    let (h, w) = now.dims();
    let (sy, sx) = (h / gh, w / gw);
    RegionMask::from_fn(gh, gw, |cy, cx| {
        let mut n = 0;
        for y in cy * sy..(cy + 1) * sy {
            for x in cx * sx..(cx + 1) * sx {
                n += (now.label(y, x) == label && before.label(y, x) != label) as usize;
            }
        }
        2 * n > sy * sx
    })
}

/// Region cell nearest the region's mean position.
fn centroid_cell(m: &RegionMask) -> Option<(usize, usize)> {
    let (h, w) = m.dims();
    let cells: Vec<(usize, usize)> = (0..h * w).filter(|&i| m.bits()[i]).map(|i| (i / w, i % w)).collect();
    if cells.is_empty() {
        return None;
    }
    let n = cells.len() as f64;
    let my = cells.iter().map(|c| c.0 as f64).sum::<f64>() / n;
    let mx = cells.iter().map(|c| c.1 as f64).sum::<f64>() / n;
    cells
        .into_iter()
        .min_by(|a, b| {
            let da = (a.0 as f64 - my).powi(2) + (a.1 as f64 - mx).powi(2);
            let db = (b.0 as f64 - my).powi(2) + (b.1 as f64 - mx).powi(2);
            da.total_cmp(&db)
        })
}
