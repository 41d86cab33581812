use normdid::ace::{ace_table, top_k_units};
use normdid::forge::{build_generator, corpus_masks, presets, sample_corpus, SceneBlueprint, GRID};
use normdid::generator::NormMode;
use normdid::interventions::InterventionSpec;
use normdid::latent::sample_latents;
use normdid::segment::segment;
use normdid::Error;

fn single_unit_blueprint() -> SceneBlueprint {
    SceneBlueprint::from_json(
        r#"{"name":"one","surfaces":[{"name":"wall","rows":[0,16],"context":[0.1,0.8]}],
        "object_classes":[{"name":"painting","color":[1,0,0],
          "region":{"surface":"wall","slot":[4,8,4,8],"spawn":0.5},
          "coupling_profile":{"concentrated":{"n_strong":1,"strong_weight":1.0,"n_weak":0,"weak_weight":0.0}}}]}"#,
    )
    .unwrap()
}

fn flat40() -> SceneBlueprint {
    let mut bp = presets::load("conference_flat_chair").unwrap();
    bp.object_classes.retain(|c| c.name == "chair");
    bp.object_classes[0].coupling_profile = normdid::forge::CouplingProfile::Flat { n_units: 40, weight: 1.0 };
    bp
}

fn mean_areas(m: &normdid::model::Model, spec: &[InterventionSpec], n: usize) -> Vec<f64> {
    let zs = sample_latents(21, n, m.generator.latent_dim());
    let mut acc = vec![0.0; m.palette.len()];
    for z in &zs {
        let img = m.generator.forward(z, spec, &NormMode::Live).unwrap().image;
        for (a, v) in acc.iter_mut().zip(segment(&img, &m.palette).areas()) {
            *a += v / n as f64;
        }
    }
    acc
}

#[test]
fn presets_build() {
    for name in presets::NAMES {
        let m = build_generator(&presets::load(name).unwrap(), 0).unwrap();
        let gt = m.ground_truth.as_ref().unwrap();
        assert_eq!(gt.coupling.len(), m.n_units());
        assert!(gt.classes.iter().all(|c| !c.units.is_empty()));
    }
    assert!(presets::load("nope").is_err());
}

#[test]
fn single_dedicated_unit_removes_object() {
    let m = build_generator(&single_unit_blueprint(), 0).unwrap();
    let u = m.ground_truth.as_ref().unwrap().classes[0].units.clone();
    assert_eq!(u.len(), 1);
    let before = mean_areas(&m, &[], 32);
    assert!(before[0] > 0.01);
    let after = mean_areas(&m, &[InterventionSpec::ablate(1, u)], 32);
    assert_eq!(after[0], 0.0);
}

#[test]
fn flat_class_survives_half_ablation() {
    let m = build_generator(&flat40(), 0).unwrap();
    let t = ace_table(&m, 32, 1).unwrap();
    let top = top_k_units(&t, "chair", 20).unwrap();
    let before = mean_areas(&m, &[], 32)[0];
    let after = mean_areas(&m, &[InterventionSpec::ablate(1, top)], 32)[0];
    assert!(before > 0.05);
    assert!(after > 0.5 * before, "{after} vs {before}");
}

#[test]
fn runner_up_emerges_under_live_beta() {
    let m = build_generator(&presets::load("emergence_painting_door").unwrap(), 0).unwrap();
    let units = m.ground_truth.as_ref().unwrap().classes[0].units.clone();
    let door = m.class_index("door").unwrap();
    let before = mean_areas(&m, &[], 32)[door];
    let after = mean_areas(&m, &[InterventionSpec::ablate(1, units)], 32)[door];
    assert!(after > before, "{after} vs {before}");
}

#[test]
fn corpus_is_reproducible() {
    let m = build_generator(&presets::load("concentrated_painting").unwrap(), 0).unwrap();
    assert_eq!(sample_corpus(&m, 1, 5).unwrap(), sample_corpus(&m, 1, 5).unwrap());
    assert_ne!(sample_corpus(&m, 3, 5).unwrap(), sample_corpus(&m, 3, 6).unwrap());
    assert!(sample_corpus(&m, 0, 5).is_err());
}

#[test]
fn frequency_consistent_across_seeds() {
    let m = build_generator(&presets::load("conference_flat_chair").unwrap(), 0).unwrap();
    let freq = |seed| {
        let masks = corpus_masks(&m, &sample_corpus(&m, 256, seed).unwrap());
        masks.iter().filter(|k| k.areas()[0] > 0.005).count() as f64 / 256.0
    };
    assert!((freq(1) - freq(2)).abs() <= 0.05);
}

#[test]
fn no_classes_renders_gray() {
    let bp = SceneBlueprint::from_json(r#"{"surfaces":[{"name":"wall","rows":[0,16],"context":[0.2,0.4]}]}"#).unwrap();
    let m = build_generator(&bp, 0).unwrap();
    for t in sample_corpus(&m, 4, 0).unwrap() {
        assert!(t.image.data().iter().all(|&v| (v - 0.5).abs() < 1e-3));
    }
}

#[test]
fn build_is_seed_deterministic() {
    let bp = presets::load("emergence_painting_door").unwrap();
    assert_eq!(build_generator(&bp, 3).unwrap(), build_generator(&bp, 3).unwrap());
}

#[test]
fn invalid_blueprints_rejected() {
    let base = presets::load("concentrated_painting").unwrap();
    let mut bp = base.clone();
    bp.object_classes[1].region.slot = bp.object_classes[0].region.slot;
    assert!(matches!(build_generator(&bp, 0), Err(Error::Blueprint(_))));
    let mut bp = base.clone();
    bp.object_classes[1].color = bp.object_classes[0].color;
    assert!(build_generator(&bp, 0).is_err());
    let mut bp = base.clone();
    bp.object_classes[0].color = [0.3, 0.0, 0.0];
    assert!(build_generator(&bp, 0).is_err());
    let mut bp = base.clone();
    bp.object_classes[0].region.surface = "ceiling".into();
    assert!(build_generator(&bp, 0).is_err());
    let mut bp = base.clone();
    bp.surfaces[1].rows = [5, GRID];
    assert!(build_generator(&bp, 0).is_err());
    let mut bp = base.clone();
    bp.runner_up_map.insert("painting".into(), vec![("ghost".into(), 0.1)]);
    assert!(build_generator(&bp, 0).is_err());
    let mut bp = base;
    bp.object_classes[0].coupling_profile = normdid::forge::CouplingProfile::Flat { n_units: 70, weight: 1.0 };
    assert!(matches!(build_generator(&bp, 0), Err(Error::Infeasible(_))));
}

#[test]
fn blueprint_json_roundtrip() {
    for name in presets::NAMES {
        let bp = presets::load(name).unwrap();
        let s = serde_json::to_string(&bp).unwrap();
        assert_eq!(SceneBlueprint::from_json(&s).unwrap(), bp);
    }
}
