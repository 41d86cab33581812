//! Average causal effect of units on class area, and the unit-level
//! analyses built from an ACE table.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{ForwardTrace, NormMode};
use crate::interventions::InterventionSpec;
use crate::latent::sample_latents;
use crate::model::Model;
use crate::segment::segment;
use crate::stats::pearson;
use crate::tensor::Tensor;

pub const DEFAULT_SAMPLES: usize = 64;
pub const DEFAULT_TOP_N: usize = 50;

/// `delta[u][c]` = δ of singleton unit `u` on class `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AceTable {
    pub layer: usize,
    pub classes: Vec<String>,
    pub delta: Vec<Vec<f64>>,
    pub z_seed: u64,
    pub n_samples: usize,
    pub insertion: Vec<f32>,
}

impl AceTable {
    pub fn n_units(&self) -> usize {
        self.delta.len()
    }

    pub fn class_index(&self, class: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == class)
            .ok_or_else(|| Error::UnknownClass(class.to_string()))
    }

    pub fn column(&self, class: &str) -> Result<Vec<f64>> {
        let c = self.class_index(class)?;
        Ok(self.delta.iter().map(|r| r[c]).collect())
    }
}

fn insert_spec(model: &Model, units: &[usize]) -> InterventionSpec {
    let k = units.iter().map(|&u| model.insertion[u]).collect();
    InterventionSpec::insert(model.analysis_layer(), units.to_vec(), k)
}

fn ablate_spec(model: &Model, units: &[usize]) -> InterventionSpec {
    InterventionSpec::ablate(model.analysis_layer(), units.to_vec())
}

fn check_set(model: &Model, units: &[usize]) -> Result<()> {
    if units.is_empty() {
        return Err(Error::Argument("unit set must be nonempty".into()));
    }
    model.check_units(units)
}

/// Clean analysis-layer activations per latent, reused by both arms.
fn prefixes(model: &Model, latents: &[Vec<f32>]) -> Result<Vec<Tensor>> {
    latents
        .par_iter()
        .map(|z| model.generator.clean_pre_norm(z, model.analysis_layer()))
        .collect()
}

fn arm_areas(model: &Model, pre: &Tensor, spec: &InterventionSpec) -> Result<Vec<f64>> {
    let img = model
        .generator
        .render_from(model.analysis_layer(), pre.clone(), std::slice::from_ref(spec), &NormMode::Live)?;
    Ok(segment(&img, &model.palette).areas())
}

/// Per-class δ of unit set `units` over explicit latents.
pub fn ace_classes_on(model: &Model, units: &[usize], latents: &[Vec<f32>]) -> Result<Vec<f64>> {
    check_set(model, units)?;
    if latents.is_empty() {
        return Err(Error::Argument("need at least one latent sample".into()));
    }
    let pre = prefixes(model, latents)?;
    delta_from_prefixes(model, units, &pre)
}

fn delta_from_prefixes(model: &Model, units: &[usize], pre: &[Tensor]) -> Result<Vec<f64>> {
    let (ins, abl) = (insert_spec(model, units), ablate_spec(model, units));
    let per_z: Vec<(Vec<f64>, Vec<f64>)> = pre
        .par_iter()
        .map(|p| Ok((arm_areas(model, p, &ins)?, arm_areas(model, p, &abl)?)))
        .collect::<Result<_>>()?;
    let n_cls = model.palette.len();
    let mut delta = vec![0.0; n_cls];
    for (i, a) in per_z {
        for c in 0..n_cls {
            delta[c] += i[c] - a[c];
        }
    }
    let n = pre.len() as f64;
    Ok(delta.into_iter().map(|d| d / n).collect())
}

pub fn ace_on(model: &Model, units: &[usize], class: &str, latents: &[Vec<f32>]) -> Result<f64> {
    let c = model.class_index(class)?;
    Ok(ace_classes_on(model, units, latents)?[c])
}

/// `E[S_c(x_i)] − E[S_c(x_a)]` over `n_samples` seeded latents, insertion at
/// the unit constants and ablation both over the full map, live β.
pub fn ace(model: &Model, units: &[usize], class: &str, n_samples: usize, seed: u64) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::Argument("n_samples must be >= 1".into()));
    }
    let zs = sample_latents(seed, n_samples, model.generator.latent_dim());
    ace_on(model, units, class, &zs)
}

/// Same contrast with an arbitrary measurement of the full forward trace.
pub fn ace_with<F>(model: &Model, units: &[usize], latents: &[Vec<f32>], measure: F) -> Result<f64>
where
    F: Fn(&ForwardTrace) -> f64 + Sync,
{
    check_set(model, units)?;
    let (ins, abl) = (insert_spec(model, units), ablate_spec(model, units));
    let g = &model.generator;
    let vals: Vec<f64> = latents
        .par_iter()
        .map(|z| {
            let i = g.forward(z, std::slice::from_ref(&ins), &NormMode::Live)?;
            let a = g.forward(z, std::slice::from_ref(&abl), &NormMode::Live)?;
            Ok(measure(&i) - measure(&a))
        })
        .collect::<Result<_>>()?;
    Ok(vals.iter().sum::<f64>() / latents.len() as f64)
}

/// Singleton ACE of every analysis unit on every palette class.
pub fn ace_table(model: &Model, n_samples: usize, seed: u64) -> Result<AceTable> {
    if n_samples == 0 {
        return Err(Error::Argument("n_samples must be >= 1".into()));
    }
    let zs = sample_latents(seed, n_samples, model.generator.latent_dim());
    ace_table_on(model, &zs, seed)
}

pub fn ace_table_on(model: &Model, latents: &[Vec<f32>], seed: u64) -> Result<AceTable> {
    let pre = prefixes(model, latents)?;
    let delta = (0..model.n_units())
        .into_par_iter()
        .map(|u| delta_from_prefixes(model, &[u], &pre))
        .collect::<Result<_>>()?;
    Ok(AceTable {
        layer: model.analysis_layer(),
        classes: model.palette.names(),
        delta,
        z_seed: seed,
        n_samples: latents.len(),
        insertion: model.insertion.clone(),
    })
}

/// Units by descending δ on `class`, ties by ascending index.
pub fn top_k_units(table: &AceTable, class: &str, k: usize) -> Result<Vec<usize>> {
    if k > table.n_units() {
        return Err(Error::Argument(format!("k = {k} exceeds {} units", table.n_units())));
    }
    let col = table.column(class)?;
    let mut order: Vec<usize> = (0..col.len()).collect();
    order.sort_by(|&a, &b| col[b].total_cmp(&col[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// Share of the positive δ mass on `class` held by the top `k` units.
pub fn top_k_share(table: &AceTable, class: &str, k: usize) -> Result<f64> {
    let col = table.column(class)?;
    let total: f64 = col.iter().filter(|&&d| d > 0.0).sum();
    if total <= 0.0 {
        return Ok(0.0);
    }
    let top: f64 = top_k_units(table, class, k.min(col.len()))?.iter().map(|&u| col[u].max(0.0)).sum();
    Ok(top / total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// Lower edge of each bin; the last bin also takes values at or above the clamp.
    pub lower: Vec<f64>,
    pub width: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Count in the bin containing `v`, `None` if `v` is below the threshold.
    pub fn count_at(&self, v: f64) -> Option<usize> {
        let first = *self.lower.first()?;
        if v < first {
            return None;
        }
        let i = (((v - first) / self.width).floor() as usize).min(self.counts.len() - 1);
        Some(self.counts[i])
    }
}

pub fn ace_distribution(table: &AceTable, class: &str, threshold: f64, clamp: f64, bin_width: f64) -> Result<Histogram> {
    if !(0.0 < threshold && threshold < clamp && bin_width > 0.0) {
        return Err(Error::Argument("need 0 < threshold < clamp and bin_width > 0".into()));
    }
    let n_bins = ((clamp - threshold) / bin_width - 1e-9).ceil().max(1.0) as usize;
    let lower = (0..n_bins).map(|i| threshold + i as f64 * bin_width).collect();
    let mut counts = vec![0; n_bins];
    for d in table.column(class)? {
        if d < threshold {
            continue;
        }
        let i = if d >= clamp { n_bins - 1 } else { (((d - threshold) / bin_width) as usize).min(n_bins - 1) };
        counts[i] += 1;
    }
    Ok(Histogram { lower, width: bin_width, counts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRanking {
    /// `(y, x)` on the analysis grid.
    pub point: (usize, usize),
    pub units: Vec<usize>,
    /// Normalized positive-δ mass per class, in table order.
    pub shares: Vec<(String, f64)>,
    /// Relative change of mean |normalized activation| of the selected
    /// surviving units at the point, live β versus replayed original β.
    pub activation_boost: f64,
}

impl PointRanking {
    pub fn share(&self, class: &str) -> Option<f64> {
        self.shares.iter().find(|(c, _)| c == class).map(|(_, s)| *s)
    }

    pub fn leader(&self) -> Option<&str> {
        self.shares
            .iter()
            .filter(|(_, s)| *s > 0.0)
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(c, _)| c.as_str())
    }
}

/// Ranks the units most active at `point` after `interventions` and sums
/// their δ per class. Units with no activation at the point are skipped.
pub fn point_ranking(
    model: &Model,
    table: &AceTable,
    z: &[f32],
    interventions: &[InterventionSpec],
    point: (usize, usize),
    top_n: usize,
) -> Result<PointRanking> {
    let layer = model.analysis_layer();
    let (h, w) = model.generator.config.layer_resolution(layer);
    let (py, px) = point;
    if py >= h || px >= w {
        return Err(Error::Argument(format!("point {point:?} outside {h}x{w} analysis grid")));
    }
    if top_n > model.n_units() {
        return Err(Error::Argument(format!("top_n {top_n} exceeds {} units", model.n_units())));
    }
    let g = &model.generator;
    let base = g.forward(z, &[], &NormMode::Live)?;
    let live = g.forward(z, interventions, &NormMode::Live)?;
    let fixed = g.forward(z, interventions, &NormMode::Replay(base.beta_set()))?;
    let act = live.pre_norm[layer].pixel(py, px);
    let peak = act.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let mut units: Vec<usize> = (0..act.len()).filter(|&u| act[u].abs() > 1e-6 * peak && act[u] != 0.0).collect();
    units.sort_by(|&a, &b| act[b].abs().total_cmp(&act[a].abs()).then(a.cmp(&b)));
    units.truncate(top_n);

    let mut mass = vec![0.0; table.classes.len()];
    for &u in &units {
        for (m, d) in mass.iter_mut().zip(&table.delta[u]) {
            *m += d.max(0.0);
        }
    }
    let total: f64 = mass.iter().sum();
    let shares = table
        .classes
        .iter()
        .zip(&mass)
        .map(|(c, m)| (c.clone(), if total > 0.0 { m / total } else { 0.0 }))
        .collect();

    let mean_abs = |t: &ForwardTrace| -> f64 {
        if units.is_empty() {
            return 0.0;
        }
        let px = t.outputs[layer].pixel(py, px);
        units.iter().map(|&u| px[u].abs() as f64).sum::<f64>() / units.len() as f64
    };
    let (l, f) = (mean_abs(&live), mean_abs(&fixed));
    let activation_boost = if f > 0.0 { l / f - 1.0 } else { 0.0 };
    Ok(PointRanking { point, units, shares, activation_boost })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPairs {
    pub class_a: String,
    pub class_b: String,
    /// `(δ_A, δ_B)` per unit.
    pub points: Vec<(f64, f64)>,
    /// Mean δ_B over the top-`top_k` units for class A.
    pub top_k: usize,
    pub mean_b_over_top_a: f64,
    pub correlation: f64,
}

pub fn scatter_pairs(table: &AceTable, class_a: &str, class_b: &str, top_k: usize) -> Result<ScatterPairs> {
    let a = table.column(class_a)?;
    let b = table.column(class_b)?;
    let top = top_k_units(table, class_a, top_k.min(table.n_units()))?;
    let mean_b_over_top_a = if top.is_empty() { 0.0 } else { top.iter().map(|&u| b[u]).sum::<f64>() / top.len() as f64 };
    Ok(ScatterPairs {
        class_a: class_a.into(),
        class_b: class_b.into(),
        correlation: pearson(&a, &b),
        points: a.into_iter().zip(b).collect(),
        top_k: top.len(),
        mean_b_over_top_a,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(col: Vec<f64>) -> AceTable {
        AceTable {
            layer: 1,
            classes: vec!["a".into()],
            insertion: vec![1.0; col.len()],
            delta: col.into_iter().map(|d| vec![d]).collect(),
            z_seed: 0,
            n_samples: 1,
        }
    }

    #[test]
    fn top_k_ties_by_index() {
        let t = table(vec![0.1, 0.5, 0.1, 0.5, -0.2]);
        assert_eq!(top_k_units(&t, "a", 5).unwrap(), vec![1, 3, 0, 2, 4]);
        assert!(top_k_units(&t, "a", 0).unwrap().is_empty());
        assert!(top_k_units(&t, "a", 6).is_err());
        assert!(matches!(top_k_units(&t, "b", 1), Err(Error::UnknownClass(_))));
    }

    #[test]
    fn histogram_rules() {
        let t = table(vec![0.9, 0.1, 0.16, 0.27, 0.6]);
        let h = ace_distribution(&t, "a", 0.15, 0.6, 0.05).unwrap();
        assert_eq!(h.counts.len(), 9);
        assert_eq!(h.counts, vec![1, 0, 1, 0, 0, 0, 0, 0, 2]);
        assert_eq!(h.count_at(0.27), Some(1));
        assert_eq!(h.count_at(0.1), None);
        assert!(ace_distribution(&t, "a", 0.6, 0.15, 0.05).is_err());
        let empty = ace_distribution(&table(vec![0.0, 0.1]), "a", 0.15, 0.6, 0.05).unwrap();
        assert_eq!(empty.total(), 0);
    }

    #[test]
    fn share_of_top_units() {
        let t = table(vec![0.4, 0.1, -0.3, 0.5]);
        assert!((top_k_share(&t, "a", 2).unwrap() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn scatter_diagonal_for_same_class() {
        let t = table(vec![0.3, 0.1, 0.2]);
        let s = scatter_pairs(&t, "a", "a", 2).unwrap();
        assert!(s.points.iter().all(|(x, y)| x == y));
        assert!((s.correlation - 1.0).abs() < 1e-12);
        assert!((s.mean_b_over_top_a - 0.25).abs() < 1e-12);
    }
}
