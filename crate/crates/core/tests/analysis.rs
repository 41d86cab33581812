use normdid::ace::{ace_table, top_k_units, AceTable};
use normdid::analysis::{
    area_drop_curve, dataset_stats, iterative_clean, max_deviation, proportional_line, BetaMode,
};
use normdid::forge::{build_generator, corpus_masks, presets, sample_corpus};
use normdid::latent::sample_latents;
use normdid::model::Model;
use normdid::segment::SegMask;

fn setup(name: &str) -> (Model, AceTable) {
    let m = build_generator(&presets::load(name).unwrap(), 0).unwrap();
    let t = ace_table(&m, 64, 1).unwrap();
    (m, t)
}

#[test]
fn curves_on_flat_preset() {
    let (m, t) = setup("conference_flat_chair");
    let ks: Vec<usize> = (0..=48).step_by(4).collect();
    let live = area_drop_curve(&m, &t, "chair", &ks, BetaMode::Live, 32, 2).unwrap();
    let fixed = area_drop_curve(&m, &t, "chair", &ks, BetaMode::Fixed, 32, 2).unwrap();
    assert_eq!(live[0].fraction, 1.0);
    assert_eq!(live[0].area, fixed[0].area);
    let c = m.class_index("chair").unwrap();
    let weights: Vec<f32> = m.ground_truth.as_ref().unwrap().coupling.iter().map(|r| r[c]).collect();
    let order = top_k_units(&t, "chair", 48).unwrap();
    let line = proportional_line(&order, &weights, &ks);
    let (dl, df) = (max_deviation(&live, &line), max_deviation(&fixed, &line));
    assert!(df * 2.0 <= dl, "fixed {df} live {dl}");
    let k20 = live.iter().find(|p| p.k == 20).unwrap();
    assert!(k20.fraction >= 0.5);
    for w in fixed.windows(2) {
        assert!(w[1].area <= w[0].area, "k={} {} > {}", w[1].k, w[1].area, w[0].area);
    }
}

#[test]
fn fixed_curves_monotone_on_all_presets() {
    for name in presets::NAMES {
        let (m, t) = setup(name);
        for class in m.palette.names() {
            let ks: Vec<usize> = (0..=24).step_by(3).collect();
            let curve = area_drop_curve(&m, &t, &class, &ks, BetaMode::Fixed, 16, 3).unwrap();
            for w in curve.windows(2) {
                assert!(w[1].area <= w[0].area, "{name}/{class} k={}", w[1].k);
            }
        }
    }
}

#[test]
fn concentrated_class_disappears() {
    let (m, t) = setup("concentrated_painting");
    let live = area_drop_curve(&m, &t, "painting", &[0, 20], BetaMode::Live, 32, 2).unwrap();
    assert!(live[1].fraction <= 0.1);
    assert!(area_drop_curve(&m, &t, "painting", &[4, 2], BetaMode::Live, 4, 2).is_err());
}

#[test]
fn stats_match_spawn_probability() {
    let m = build_generator(&presets::load("conference_flat_chair").unwrap(), 0).unwrap();
    let masks = corpus_masks(&m, &sample_corpus(&m, 512, 3).unwrap());
    let s = dataset_stats(&masks).unwrap();
    assert_eq!(s[0].class, "chair");
    assert!((s[0].frequency - 0.75).abs() <= 0.05, "{}", s[0].frequency);
    assert!(s[0].mean_area > 0.0);
}

#[test]
fn stats_edge_cases() {
    let table = vec!["background".to_string(), "wall".into(), "ghost".into()];
    let full = SegMask::new(4, 4, vec![1; 16], table).unwrap();
    let s = dataset_stats(&[full.clone(), full]).unwrap();
    assert_eq!((s[0].frequency, s[0].mean_area), (1.0, 1.0));
    assert_eq!((s[1].frequency, s[1].mean_area), (0.0, 0.0));
    assert!(dataset_stats(&[]).is_err());
}

fn present_latent(m: &Model) -> Vec<f32> {
    let painting = &m.ground_truth.as_ref().unwrap().classes[0];
    sample_latents(5, 64, 32).into_iter().find(|z| painting.presence(z) >= 1.0).unwrap()
}

#[test]
fn clean_on_disentangled_preset_stops_early() {
    let (m, t) = setup("concentrated_painting");
    let tr = iterative_clean(&m, &t, &present_latent(&m), "painting", 4).unwrap();
    assert_eq!(tr.rounds.len(), 1);
    assert!(tr.rounds[0].emergent.is_empty());
    assert!(tr.resolved());
    assert_eq!(tr.final_areas()[0], 0.0);
}

#[test]
fn clean_resolves_emergence() {
    let (m, t) = setup("emergence_painting_door");
    let z = present_latent(&m);
    let tr = iterative_clean(&m, &t, &z, "painting", 4).unwrap();
    assert_eq!(tr.rounds[0].emergent, vec!["door".to_string()]);
    assert!(tr.rounds.len() >= 2);
    assert!(tr.resolved());
    let c = m.class_index("painting").unwrap();
    for (k, (&a, &b)) in tr.final_areas().iter().zip(&tr.baseline).enumerate() {
        if k != c {
            assert!((a - b).abs() <= 0.02, "class {k}: {a} vs {b}");
        }
    }
    assert_eq!(tr.stack().len(), tr.rounds.iter().map(|r| r.added.len()).sum::<usize>());

    let short = iterative_clean(&m, &t, &z, "painting", 1).unwrap();
    assert!(!short.resolved());
    assert_eq!(short.unresolved, vec!["door".to_string()]);
    assert!(iterative_clean(&m, &t, &z, "painting", 0).is_err());
}
