use normdid::ace::{ace_distribution, ace_table};
use normdid::analysis::{area_drop_curve, dataset_stats, iterative_clean, BetaMode, CleanTranscript};
use normdid::did::{run_did, Heatmap};
use normdid::forge::{build_generator, corpus_masks, presets, sample_corpus};
use normdid::generator::{Generator, GeneratorConfig, NormMode};
use normdid::interventions::{InterventionSpec, Region, RegionMask};
use normdid::io::*;
use normdid::latent::sample_latents;
use normdid::model::Model;
use normdid::pixnorm::pixel_normalize;
use normdid::tensor::Tensor;
use tempfile::tempdir;

fn model() -> Model {
    build_generator(&presets::load("emergence_painting_door").unwrap(), 0).unwrap()
}

#[test]
fn bundle_roundtrip() {
    let dir = tempdir().unwrap();
    let m = model();
    save_model(dir.path(), &m).unwrap();
    let back = load_model(dir.path()).unwrap();
    assert_eq!(back, m);
    let z = sample_latents(1, 1, 32).remove(0);
    let a = m.generator.forward(&z, &[], &NormMode::Live).unwrap();
    assert_eq!(back.generator.forward(&z, &[], &NormMode::Live).unwrap(), a);
}

#[test]
fn random_bundle_roundtrip_without_truth() {
    let dir = tempdir().unwrap();
    let g = Generator::random(GeneratorConfig::default(), 3).unwrap();
    let m = Model::new(g, model().palette, 4).unwrap();
    save_model(dir.path(), &m).unwrap();
    assert_eq!(load_model(dir.path()).unwrap(), m);
}

#[test]
fn corrupt_bundle_is_reported() {
    let dir = tempdir().unwrap();
    save_model(dir.path(), &model()).unwrap();
    std::fs::write(dir.path().join("head_bias.tnsr"), b"TNSRxx").unwrap();
    assert!(load_model(dir.path()).is_err());
    std::fs::write(dir.path().join(MANIFEST), "{}").unwrap();
    assert!(matches!(load_model(dir.path()), Err(normdid::Error::Format { .. })));
}

#[test]
fn tensor_and_beta_dumps() {
    let dir = tempdir().unwrap();
    let t = Tensor::from_vec(2, 3, 1, vec![1.0, -2.5, 3.25, 1e-7, 0.0, -0.0]).unwrap();
    let p = dir.path().join("t.tnsr");
    write_tensor(&p, &t).unwrap();
    assert_eq!(read_tensor(&p).unwrap(), t);
    let bytes = std::fs::read(&p).unwrap();
    assert_eq!(&bytes[..4], b"TNSR");
    assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
    assert_eq!(bytes.len(), 16 + 6 * 4);

    let (_, rec) = pixel_normalize(&t, 3).unwrap();
    let bp = dir.path().join("b.tnsr");
    write_beta(&bp, &rec).unwrap();
    assert_eq!(read_beta(&bp, 3).unwrap(), rec);
}

#[test]
fn ace_table_roundtrip() {
    let dir = tempdir().unwrap();
    let m = model();
    let t = ace_table(&m, 8, 2).unwrap();
    let (c, j) = (dir.path().join("ace.csv"), dir.path().join("ace.json"));
    write_ace_table(&c, &j, &t).unwrap();
    assert_eq!(read_ace_table(&c, &j).unwrap(), t);
    let head = std::fs::read_to_string(&c).unwrap();
    assert!(head.starts_with("unit,class,delta\n"));
}

#[test]
fn table_roundtrips() {
    let dir = tempdir().unwrap();
    let m = model();
    let t = ace_table(&m, 8, 2).unwrap();
    let curve = area_drop_curve(&m, &t, "painting", &[0, 5, 10], BetaMode::Fixed, 4, 1).unwrap();
    let p = dir.path().join("curve.csv");
    write_curve(&p, &curve).unwrap();
    assert_eq!(read_curve(&p).unwrap(), curve);

    let stats = dataset_stats(&corpus_masks(&m, &sample_corpus(&m, 16, 1).unwrap())).unwrap();
    let p = dir.path().join("stats.csv");
    write_stats(&p, &stats).unwrap();
    assert_eq!(read_stats(&p).unwrap(), stats);

    let h = ace_distribution(&t, "painting", 0.15, 0.6, 0.05).unwrap();
    let p = dir.path().join("hist.csv");
    write_histogram(&p, &h).unwrap();
    assert_eq!(read_histogram(&p).unwrap(), h);

    let z = sample_latents(5, 1, 32).remove(0);
    let tr = iterative_clean(&m, &t, &z, "painting", 3).unwrap();
    let p = dir.path().join("clean.json");
    write_json(&p, &tr).unwrap();
    assert_eq!(read_json::<CleanTranscript>(&p).unwrap(), tr);
}

#[test]
fn png_roundtrip_is_exact_on_8bit_values() {
    let dir = tempdir().unwrap();
    let img = Tensor::from_vec(3, 2, 3, (0..18).map(|i| (i * 14) as f32 / 255.0).collect()).unwrap();
    let p = dir.path().join("x.png");
    write_png(&p, &img).unwrap();
    let back = read_png(&p).unwrap();
    assert_eq!(back, img);
    assert_eq!(to_rgb8(&back).unwrap(), to_rgb8(&img).unwrap());
}

#[test]
fn png_of_render_matches_quantized_bytes() {
    let dir = tempdir().unwrap();
    let m = model();
    let img = m.generator.forward(&[0.3; 32], &[], &NormMode::Live).unwrap().image;
    let p = dir.path().join("r.png");
    write_png(&p, &img).unwrap();
    assert_eq!(to_rgb8(&read_png(&p).unwrap()).unwrap(), to_rgb8(&img).unwrap());
}

#[test]
fn heatmap_png_roundtrip() {
    let dir = tempdir().unwrap();
    let hm = Heatmap { h: 1, w: 3, values: vec![0.0, 0.5 * 100.0 / 255.0, 0.5] };
    let p = dir.path().join("h.png");
    write_heatmap_png(&p, &hm).unwrap();
    let back = read_heatmap_png(&p).unwrap();
    assert_eq!(heatmap_to_gray(&back), heatmap_to_gray(&hm));
    assert_eq!(heatmap_to_gray(&hm), vec![0, 100, 255]);
    let r = run_did(&model().generator, &[0.3; 32], &InterventionSpec::ablate(1, vec![0, 1])).unwrap();
    write_heatmap_png(&p, &r.heatmap).unwrap();
    assert_eq!(heatmap_to_gray(&read_heatmap_png(&p).unwrap()), heatmap_to_gray(&r.heatmap));
}

#[test]
fn segmask_roundtrip() {
    let dir = tempdir().unwrap();
    let m = model();
    let mask = corpus_masks(&m, &sample_corpus(&m, 1, 8).unwrap()).remove(0);
    let (png, json) = (dir.path().join("seg.png"), dir.path().join("seg.json"));
    write_segmask(&png, &json, &mask).unwrap();
    assert_eq!(read_segmask(&png, &json).unwrap(), mask);
    let rgb = dir.path().join("rgb.png");
    write_png(&rgb, &Tensor::zeros(3, 2, 2)).unwrap();
    assert!(read_segmask(&rgb, &json).is_err());
}

#[test]
fn intervention_json_roundtrip() {
    let spec = InterventionSpec::insert(1, vec![3, 7], vec![0.5, 2.0])
        .with_region(Region::Mask(RegionMask::from_fn(16, 16, |y, x| (y + x) % 3 == 0)));
    let s = serde_json::to_string(&spec).unwrap();
    assert_eq!(serde_json::from_str::<InterventionSpec>(&s).unwrap(), spec);
}

#[test]
fn tiling_and_colorize() {
    let a = Tensor::full(3, 2, 2, 0.0);
    let b = Tensor::full(3, 2, 2, 1.0);
    let t = tile_horizontal(&[&a, &b]).unwrap();
    assert_eq!(t.shape(), (3, 2, 4));
    assert_eq!(t.get(0, 1, 3), 1.0);
    assert_eq!(t.get(0, 1, 1), 0.0);
    assert!(tile_horizontal(&[]).is_err());
    let m = model();
    let mask = normdid::segment::SegMask::new(1, 2, vec![0, 1], m.palette.class_table()).unwrap();
    let c = colorize(&mask, &m.palette);
    assert_eq!(c.pixel(0, 0), vec![0.0; 3]);
    assert_eq!(c.pixel(0, 1), m.palette.classes[0].color.to_vec());
}

#[test]
fn curve_image_draws_series() {
    use normdid::analysis::CurvePoint;
    use normdid::io::curve_image;
    let pts = |fs: &[f64]| -> Vec<CurvePoint> {
        fs.iter().enumerate().map(|(i, &f)| CurvePoint { k: 4 * i, area: f, fraction: f }).collect()
    };
    let (a, b) = (pts(&[1.0, 0.5, 0.0]), pts(&[1.0, 1.0, 1.0]));
    let img = curve_image(&[(&a, [1.0, 0.0, 0.0]), (&b, [0.0, 0.0, 1.0])], 64, 32).unwrap();
    assert_eq!(img.shape(), (3, 32, 64));
    let red = (0..32 * 64).filter(|&i| img.channel(0)[i] == 1.0 && img.channel(1)[i] == 0.0).count();
    assert!(red > 40);
    // flat series sits on the top row of the plot area
    assert_eq!((img.get(2, 2, 30), img.get(0, 2, 30)), (1.0, 0.0));
    assert!(curve_image(&[], 4, 4).is_err());
}
