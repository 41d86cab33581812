//! Unit ablation and insertion on layer activations, and the four
//! counterfactual scenarios built around one intervention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{ForwardTrace, Generator, NormMode};
use crate::tensor::Tensor;

/// Binary spatial mask at one layer's resolution, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl RegionMask {
    pub fn new(h: usize, w: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != h * w {
            return Err(Error::Shape(format!("mask length {} != {h}x{w}", bits.len())));
        }
        Ok(RegionMask { h, w, bits })
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..h * w).map(|i| f(i / w, i % w)).collect();
        RegionMask { h, w, bits }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.w + x]
    }
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Alternating run lengths, starting with a (possibly empty) run of zeros.
    pub fn to_runs(&self) -> Vec<usize> {
        let mut runs = Vec::new();
        let mut cur = false;
        let mut len = 0;
        for &b in &self.bits {
            if b == cur {
                len += 1;
            } else {
                runs.push(len);
                cur = b;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn from_runs(h: usize, w: usize, runs: &[usize]) -> Result<Self> {
        let mut bits = Vec::with_capacity(h * w);
        for (i, &r) in runs.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, r));
        }
        if bits.len() != h * w {
            return Err(Error::Shape(format!("rle covers {} cells, mask has {}", bits.len(), h * w)));
        }
        Ok(RegionMask { h, w, bits })
    }
}

/// Spatial region `P` of an intervention.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Region {
    #[default]
    Full,
    Mask(RegionMask),
}

impl Region {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        match self {
            Region::Full => true,
            Region::Mask(m) => m.get(y, x),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Rle {
    height: usize,
    width: usize,
    runs: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RegionRepr {
    Keyword(String),
    Rle { rle: Rle },
}

impl Serialize for Region {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Region::Full => RegionRepr::Keyword("full".into()),
            Region::Mask(m) => RegionRepr::Rle { rle: Rle { height: m.h, width: m.w, runs: m.to_runs() } },
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Region {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        match RegionRepr::deserialize(d)? {
            RegionRepr::Keyword(k) if k == "full" => Ok(Region::Full),
            RegionRepr::Keyword(k) => Err(D::Error::custom(format!("unknown region `{k}`"))),
            RegionRepr::Rle { rle } => RegionMask::from_runs(rle.height, rle.width, &rle.runs)
                .map(Region::Mask)
                .map_err(D::Error::custom),
        }
    }
}

/// Ablate sets units to 0; Insert sets them to a constant, either one value
/// for all units or one value per unit in `units` order.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Ablate,
    Insert(Vec<f32>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum InsertRepr {
    One(f32),
    Many(Vec<f32>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ActionRepr {
    Keyword(String),
    Insert { insert: InsertRepr },
}

impl Serialize for Action {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Action::Ablate => ActionRepr::Keyword("ablate".into()),
            Action::Insert(v) if v.len() == 1 => ActionRepr::Insert { insert: InsertRepr::One(v[0]) },
            Action::Insert(v) => ActionRepr::Insert { insert: InsertRepr::Many(v.clone()) },
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Action {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        match ActionRepr::deserialize(d)? {
            ActionRepr::Keyword(k) if k == "ablate" => Ok(Action::Ablate),
            ActionRepr::Keyword(k) => Err(D::Error::custom(format!("unknown action `{k}`"))),
            ActionRepr::Insert { insert: InsertRepr::One(k) } => Ok(Action::Insert(vec![k])),
            ActionRepr::Insert { insert: InsertRepr::Many(v) } => Ok(Action::Insert(v)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub layer: usize,
    pub units: Vec<usize>,
    #[serde(default)]
    pub region: Region,
    pub action: Action,
}

impl InterventionSpec {
    pub fn ablate(layer: usize, units: Vec<usize>) -> Self {
        InterventionSpec { layer, units, region: Region::Full, action: Action::Ablate }
    }

    pub fn insert(layer: usize, units: Vec<usize>, values: Vec<f32>) -> Self {
        InterventionSpec { layer, units, region: Region::Full, action: Action::Insert(values) }
    }

    pub fn with_region(mut self, region: Region) -> Self {
        self.region = region;
        self
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Checks indices, mask shape and insert arity against an activation shape.
    pub fn validate(&self, shape: (usize, usize, usize)) -> Result<()> {
        let (c, h, w) = shape;
        let mut seen = vec![false; c];
        for &u in &self.units {
            if u >= c {
                return Err(Error::Argument(format!("unit {u} out of range for {c} channels")));
            }
            if std::mem::replace(&mut seen[u], true) {
                return Err(Error::Argument(format!("unit {u} listed twice")));
            }
        }
        if let Region::Mask(m) = &self.region {
            if m.dims() != (h, w) {
                return Err(Error::Shape(format!("region {:?} does not match layer {h}x{w}", m.dims())));
            }
        }
        if let Action::Insert(v) = &self.action {
            if v.len() != 1 && v.len() != self.units.len() {
                return Err(Error::Argument(format!(
                    "insert has {} values for {} units",
                    v.len(),
                    self.units.len()
                )));
            }
            if v.iter().any(|k| !k.is_finite()) {
                return Err(Error::NonFinite("insert constant"));
            }
        }
        Ok(())
    }
}

/// Overwrites the `U × P` entries; everything else is left bit-identical.
pub fn apply(spec: &InterventionSpec, activations: &Tensor) -> Result<Tensor> {
    let mut out = activations.clone();
    apply_in_place(spec, &mut out)?;
    Ok(out)
}

pub fn apply_in_place(spec: &InterventionSpec, t: &mut Tensor) -> Result<()> {
    spec.validate(t.shape())?;
    let w = t.width();
    for (i, &u) in spec.units.iter().enumerate() {
        let value = match &spec.action {
            Action::Ablate => 0.0,
            Action::Insert(v) if v.len() == 1 => v[0],
            Action::Insert(v) => v[i],
        };
        let plane = t.channel_mut(u);
        match &spec.region {
            Region::Full => plane.fill(value),
            Region::Mask(m) => {
                for (j, v) in plane.iter_mut().enumerate() {
                    if m.get(j / w, j % w) {
                        *v = value;
                    }
                }
            }
        }
    }
    Ok(())
}

/// The four forward passes `(β,u)`, `(β,u′)`, `(β′,u′)`, `(β′,u)`.
#[derive(Debug, Clone)]
pub struct ScenarioSet {
    /// Live, no intervention.
    pub base: ForwardTrace,
    /// Intervention with the original coefficients replayed.
    pub coefficient_fixed: ForwardTrace,
    /// Live with the intervention.
    pub ablated: ForwardTrace,
    /// Original units with the post-intervention coefficients replayed.
    pub units_fixed: ForwardTrace,
}

impl ScenarioSet {
    pub fn y_beta_u(&self) -> &Tensor {
        &self.base.image
    }
    pub fn y_beta_u1(&self) -> &Tensor {
        &self.coefficient_fixed.image
    }
    pub fn y_beta1_u1(&self) -> &Tensor {
        &self.ablated.image
    }
    pub fn y_beta1_u(&self) -> &Tensor {
        &self.units_fixed.image
    }
}

pub fn make_scenarios(generator: &Generator, z: &[f32], spec: &InterventionSpec) -> Result<ScenarioSet> {
    let analysis = generator.config.analysis_layer;
    if spec.layer != analysis {
        return Err(Error::Argument(format!(
            "scenario intervention must target the analysis layer {analysis}, got {}",
            spec.layer
        )));
    }
    let specs = std::slice::from_ref(spec);
    let base = generator.forward(z, &[], &NormMode::Live)?;
    let ablated = generator.forward(z, specs, &NormMode::Live)?;
    let beta = NormMode::Replay(base.beta_set());
    let beta1 = NormMode::Replay(ablated.beta_set());
    let coefficient_fixed = generator.forward(z, specs, &beta)?;
    let units_fixed = generator.forward(z, &[], &beta1)?;
    Ok(ScenarioSet { base, coefficient_fixed, ablated, units_fixed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rle_roundtrip_and_json() {
        let m = RegionMask::from_fn(3, 4, |y, x| y == 1 && x > 0);
        assert_eq!(m.to_runs(), vec![5, 3, 4]);
        let spec = InterventionSpec::ablate(1, vec![2, 0]).with_region(Region::Mask(m.clone()));
        let js = serde_json::to_string(&spec).unwrap();
        assert!(js.contains("\"rle\""));
        let back: InterventionSpec = serde_json::from_str(&js).unwrap();
        assert_eq!(back, spec);

        let y = InterventionSpec::insert(1, vec![3], vec![0.75]);
        let js = serde_json::to_string(&y).unwrap();
        assert_eq!(js, r#"{"layer":1,"units":[3],"region":"full","action":{"insert":0.75}}"#);
        assert_eq!(serde_json::from_str::<InterventionSpec>(&js).unwrap(), y);
    }

    #[test]
    fn mask_starting_with_one() {
        let m = RegionMask::from_fn(1, 3, |_, x| x == 0);
        assert_eq!(m.to_runs(), vec![0, 1, 2]);
        assert_eq!(RegionMask::from_runs(1, 3, &[0, 1, 2]).unwrap(), m);
        assert!(RegionMask::from_runs(1, 3, &[1, 1]).is_err());
    }

    #[test]
    fn validation_errors() {
        let t = Tensor::zeros(4, 2, 2);
        assert!(apply(&InterventionSpec::ablate(0, vec![4]), &t).is_err());
        assert!(apply(&InterventionSpec::ablate(0, vec![1, 1]), &t).is_err());
        let bad = InterventionSpec::ablate(0, vec![1]).with_region(Region::Mask(RegionMask::from_fn(3, 2, |_, _| true)));
        assert!(apply(&bad, &t).is_err());
        assert!(apply(&InterventionSpec::insert(0, vec![0, 1], vec![1.0, 2.0, 3.0]), &t).is_err());
    }

    #[test]
    fn per_unit_insert_values() {
        let t = Tensor::zeros(3, 1, 2);
        let out = apply(&InterventionSpec::insert(0, vec![2, 0], vec![5.0, 7.0]), &t).unwrap();
        assert_eq!(out.channel(2), &[5.0, 5.0]);
        assert_eq!(out.channel(0), &[7.0, 7.0]);
        assert_eq!(out.channel(1), &[0.0, 0.0]);
    }

    #[test]
    fn unknown_keywords_rejected() {
        assert!(serde_json::from_str::<Region>("\"half\"").is_err());
        assert!(serde_json::from_str::<Action>("\"scale\"").is_err());
    }
}
