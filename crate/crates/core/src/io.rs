//! Persistence: weight bundles, tensor dumps, PNG images, CSV tables with
//! JSON sidecars.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, Luma, RgbImage};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::ace::{AceTable, Histogram};
use crate::analysis::{ClassStat, CurvePoint};
use crate::did::{Heatmap, HEATMAP_SCALE};
use crate::error::{Error, Result};
use crate::generator::{Dense, Generator, GeneratorConfig, GeneratorWeights, LayerWeights};
use crate::model::{GroundTruth, Model};
use crate::pixnorm::BetaRecord;
use crate::segment::{Palette, SegMask};
use crate::tensor::{ConvKernel, Tensor};

pub const BUNDLE_FORMAT: &str = "normdid-bundle";
pub const BUNDLE_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), msg: msg.into() }
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    t.write_dump(&mut f)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    Tensor::read_dump(BufReader::new(File::open(path)?)).map_err(|e| match e {
        Error::Io(_) | Error::Format { .. } => e,
        other => format_err(path, other.to_string()),
    })
}

pub fn write_beta(path: &Path, b: &BetaRecord) -> Result<()> {
    write_tensor(path, &b.to_tensor())
}

pub fn read_beta(path: &Path, layer_index: usize) -> Result<BetaRecord> {
    BetaRecord::from_tensor(layer_index, &read_tensor(path)?)
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path)?;
    serde_json::from_str(&s).map_err(|e| format_err(path, e.to_string()))
}

/// Tensor files of one layer in a bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFiles {
    pub conv_weight: String,
    pub conv_bias: String,
    pub skip_weight: String,
    pub skip_bias: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: GeneratorConfig,
    pub palette: Palette,
    pub insertion: Vec<f32>,
    pub insertion_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruth>,
    pub input_weight: String,
    pub input_bias: String,
    pub layers: Vec<LayerFiles>,
    pub head_weight: String,
    pub head_bias: String,
}

// Dense weights as (1, out, in), biases as (out, 1, 1).
fn dense_tensors(d: &Dense) -> (Tensor, Tensor) {
    (
        Tensor::from_vec(1, d.out_dim, d.in_dim, d.weight.clone()).expect("checked weights"),
        Tensor::from_vec(d.out_dim, 1, 1, d.bias.clone()).expect("checked bias"),
    )
}

fn dense_from(w: Tensor, b: Tensor, path: &Path) -> Result<Dense> {
    let (c, out_dim, in_dim) = w.shape();
    if c != 1 || b.shape() != (out_dim, 1, 1) {
        return Err(format_err(path, "dense tensor shapes disagree"));
    }
    Ok(Dense { out_dim, in_dim, weight: w.into_vec(), bias: b.into_vec() })
}

// Conv weights as (C_out·C_in, 3, 3).
fn kernel_tensors(k: &ConvKernel) -> (Tensor, Tensor) {
    (
        Tensor::from_vec(k.c_out() * k.c_in(), 3, 3, k.weights().to_vec()).expect("checked kernel"),
        Tensor::from_vec(k.c_out(), 1, 1, k.bias().to_vec()).expect("checked kernel"),
    )
}

fn kernel_from(w: Tensor, b: Tensor, c_in: usize, path: &Path) -> Result<ConvKernel> {
    let c_out = b.channels();
    if w.shape() != (c_out * c_in, 3, 3) || b.shape() != (c_out, 1, 1) {
        return Err(format_err(path, format!("kernel tensors do not form a {c_out}x{c_in} kernel")));
    }
    ConvKernel::new(c_out, c_in, w.into_vec(), b.into_vec())
}

/// Writes a bundle directory: `manifest.json` plus one `.tnsr` per array.
pub fn save_model(dir: &Path, model: &Model) -> Result<()> {
    fs::create_dir_all(dir)?;
    let w = &model.generator.weights;
    let put = |name: String, t: &Tensor| -> Result<String> {
        write_tensor(&dir.join(&name), t)?;
        Ok(name)
    };
    let (iw, ib) = dense_tensors(&w.input);
    let (hw, hb) = dense_tensors(&w.head);
    let mut layers = Vec::new();
    for (i, l) in w.layers.iter().enumerate() {
        let (cw, cb) = kernel_tensors(&l.conv);
        let (sw, sb) = kernel_tensors(&l.skip);
        layers.push(LayerFiles {
            conv_weight: put(format!("layer{i}_conv_weight.tnsr"), &cw)?,
            conv_bias: put(format!("layer{i}_conv_bias.tnsr"), &cb)?,
            skip_weight: put(format!("layer{i}_skip_weight.tnsr"), &sw)?,
            skip_bias: put(format!("layer{i}_skip_bias.tnsr"), &sb)?,
        });
    }
    let manifest = Manifest {
        format: BUNDLE_FORMAT.into(),
        version: BUNDLE_VERSION,
        config: model.generator.config.clone(),
        palette: model.palette.clone(),
        insertion: model.insertion.clone(),
        insertion_seed: model.insertion_seed,
        ground_truth: model.ground_truth.clone(),
        input_weight: put("input_weight.tnsr".into(), &iw)?,
        input_bias: put("input_bias.tnsr".into(), &ib)?,
        layers,
        head_weight: put("head_weight.tnsr".into(), &hw)?,
        head_bias: put("head_bias.tnsr".into(), &hb)?,
    };
    write_json(&dir.join(MANIFEST), &manifest)
}

pub fn load_model(dir: &Path) -> Result<Model> {
    let mpath = dir.join(MANIFEST);
    let m: Manifest = read_json(&mpath)?;
    if m.format != BUNDLE_FORMAT || m.version != BUNDLE_VERSION {
        return Err(format_err(&mpath, format!("unsupported bundle {} v{}", m.format, m.version)));
    }
    let get = |name: &str| -> Result<(Tensor, PathBuf)> {
        let p = dir.join(name);
        Ok((read_tensor(&p)?, p))
    };
    let (iw, p) = get(&m.input_weight)?;
    let input = dense_from(iw, get(&m.input_bias)?.0, &p)?;
    let (hw, p) = get(&m.head_weight)?;
    let head = dense_from(hw, get(&m.head_bias)?.0, &p)?;
    let mut layers = Vec::new();
    let mut c_in = m.config.base_channels;
    for lf in &m.layers {
        let (cw, p) = get(&lf.conv_weight)?;
        let conv = kernel_from(cw, get(&lf.conv_bias)?.0, c_in, &p)?;
        let (sw, p) = get(&lf.skip_weight)?;
        let skip = kernel_from(sw, get(&lf.skip_bias)?.0, c_in, &p)?;
        c_in = conv.c_out();
        layers.push(LayerWeights { conv, skip });
    }
    let generator = Generator::new(m.config, GeneratorWeights { input, layers, head })?;
    if m.insertion.len() != generator.config.analysis_channels() {
        return Err(format_err(&mpath, "insertion constants do not match the analysis layer"));
    }
    Ok(Model {
        generator,
        palette: m.palette,
        insertion: m.insertion,
        insertion_seed: m.insertion_seed,
        ground_truth: m.ground_truth,
    })
}

/// `round(255·v)` after clamping to `[0, 1]`.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Interleaved 8-bit RGB of a `(3, H, W)` tensor.
pub fn to_rgb8(image: &Tensor) -> Result<Vec<u8>> {
    if image.channels() != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {}", image.channels())));
    }
    let n = image.plane_len();
    let mut out = Vec::with_capacity(3 * n);
    for i in 0..n {
        for c in 0..3 {
            out.push(quantize(image.channel(c)[i]));
        }
    }
    Ok(out)
}

pub fn from_rgb8(h: usize, w: usize, bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() != 3 * h * w {
        return Err(Error::Shape(format!("{} bytes for a {h}x{w} RGB image", bytes.len())));
    }
    let mut t = Tensor::zeros(3, h, w);
    for (i, px) in bytes.chunks_exact(3).enumerate() {
        for (c, &b) in px.iter().enumerate() {
            t.channel_mut(c)[i] = b as f32 / 255.0;
        }
    }
    Ok(t)
}

pub fn write_png(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    let img = RgbImage::from_raw(w as u32, h as u32, to_rgb8(image)?).expect("buffer sized");
    img.save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

/// Reads an 8-bit RGB PNG back to `[0, 1]` values `byte / 255`.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    from_rgb8(img.height() as usize, img.width() as usize, img.as_raw())
}

/// Heatmap to gray levels over the fixed display range.
pub fn heatmap_to_gray(hm: &Heatmap) -> Vec<u8> {
    let [lo, hi] = HEATMAP_SCALE;
    hm.values.iter().map(|&v| quantize((v - lo) / (hi - lo))).collect()
}

pub fn write_heatmap_png(path: &Path, hm: &Heatmap) -> Result<()> {
    let img = GrayImage::from_raw(hm.w as u32, hm.h as u32, heatmap_to_gray(hm)).expect("buffer sized");
    img.save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

/// Gray levels mapped back to heatmap values (quantized).
pub fn read_heatmap_png(path: &Path) -> Result<Heatmap> {
    let img = image::open(path)?.to_luma8();
    let [lo, hi] = HEATMAP_SCALE;
    Ok(Heatmap {
        h: img.height() as usize,
        w: img.width() as usize,
        values: img.pixels().map(|Luma([g])| lo + (hi - lo) * *g as f32 / 255.0).collect(),
    })
}

/// Label image (pixel value = label) and its class table as JSON.
pub fn write_segmask(png: &Path, table: &Path, mask: &SegMask) -> Result<()> {
    let (h, w) = mask.dims();
    let img = GrayImage::from_raw(w as u32, h as u32, mask.labels().to_vec()).expect("buffer sized");
    img.save_with_format(png, ImageFormat::Png)?;
    write_json(table, &mask.class_table())
}

pub fn read_segmask(png: &Path, table: &Path) -> Result<SegMask> {
    let img = image::open(png)?;
    if img.color() != image::ColorType::L8 {
        return Err(format_err(png, "label image must be 8-bit single channel"));
    }
    let img = img.to_luma8();
    let classes: Vec<String> = read_json(table)?;
    SegMask::new(img.height() as usize, img.width() as usize, img.into_raw(), classes)
        .map_err(|e| format_err(png, e.to_string()))
}

/// Renders a list of images with the same size side by side.
pub fn tile_horizontal(images: &[&Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Argument("no images to tile".into()))?;
    let (c, h, w) = first.shape();
    if images.iter().any(|t| t.shape() != (c, h, w)) {
        return Err(Error::Shape("tiled images differ in shape".into()));
    }
    let mut out = Tensor::zeros(c, h, w * images.len());
    for (i, t) in images.iter().enumerate() {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.set(ch, y, i * w + x, t.get(ch, y, x));
                }
            }
        }
    }
    Ok(out)
}

/// Colors a label mask with the palette; background is black.
pub fn colorize(mask: &SegMask, palette: &Palette) -> Tensor {
    let (h, w) = mask.dims();
    let mut t = Tensor::zeros(3, h, w);
    for (i, &l) in mask.labels().iter().enumerate() {
        if l > 0 {
            let col = palette.classes[l as usize - 1].color;
            for (c, &v) in col.iter().enumerate() {
                t.channel_mut(c)[i] = v;
            }
        }
    }
    t
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(|e| format_err(path, e.to_string()))).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct AceRow {
    unit: usize,
    class: String,
    delta: f64,
}

/// Sidecar of an ACE table CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AceMeta {
    pub layer: usize,
    pub classes: Vec<String>,
    pub z_seed: u64,
    pub n_samples: usize,
    pub insertion: Vec<f32>,
    pub version: String,
}

/// Long-format CSV `(unit, class, delta)` plus a JSON sidecar.
pub fn write_ace_table(csv_path: &Path, meta_path: &Path, t: &AceTable) -> Result<()> {
    write_rows(
        csv_path,
        t.delta.iter().enumerate().flat_map(|(u, row)| {
            row.iter().zip(&t.classes).map(move |(&delta, c)| AceRow { unit: u, class: c.clone(), delta })
        }),
    )?;
    write_json(
        meta_path,
        &AceMeta {
            layer: t.layer,
            classes: t.classes.clone(),
            z_seed: t.z_seed,
            n_samples: t.n_samples,
            insertion: t.insertion.clone(),
            version: env!("CARGO_PKG_VERSION").into(),
        },
    )
}

pub fn read_ace_table(csv_path: &Path, meta_path: &Path) -> Result<AceTable> {
    let meta: AceMeta = read_json(meta_path)?;
    let rows: Vec<AceRow> = read_rows(csv_path)?;
    let n_units = meta.insertion.len();
    let mut delta = vec![vec![f64::NAN; meta.classes.len()]; n_units];
    for r in rows {
        let c = meta
            .classes
            .iter()
            .position(|c| *c == r.class)
            .ok_or_else(|| format_err(csv_path, format!("unknown class `{}`", r.class)))?;
        let cell = delta
            .get_mut(r.unit)
            .ok_or_else(|| format_err(csv_path, format!("unit {} out of range", r.unit)))?;
        cell[c] = r.delta;
    }
    if delta.iter().flatten().any(|v| !v.is_finite()) {
        return Err(format_err(csv_path, "missing or non-finite entries"));
    }
    Ok(AceTable {
        layer: meta.layer,
        classes: meta.classes,
        delta,
        z_seed: meta.z_seed,
        n_samples: meta.n_samples,
        insertion: meta.insertion,
    })
}

pub fn write_curve(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    write_rows(path, curve)
}

pub fn read_curve(path: &Path) -> Result<Vec<CurvePoint>> {
    read_rows(path)
}

/// Line plot of curve fractions over k, one RGB series per curve, on a
/// white canvas with the fraction axis fixed to `[0, 1]`.
pub fn curve_image(curves: &[(&[CurvePoint], [f32; 3])], width: usize, height: usize) -> Result<Tensor> {
    if width < 8 || height < 8 {
        return Err(Error::Argument("curve image must be at least 8x8".into()));
    }
    let k_max = curves.iter().flat_map(|(c, _)| c.iter().map(|p| p.k)).max().unwrap_or(0).max(1) as f64;
    let mut t = Tensor::zeros(3, height, width);
    t.data_mut().iter_mut().for_each(|v| *v = 1.0);
    let (x0, y0, x1, y1) = (2.0, 2.0, (width - 3) as f64, (height - 3) as f64);
    let to_px = |p: &CurvePoint| {
        (x0 + (x1 - x0) * p.k as f64 / k_max, y1 - (y1 - y0) * p.fraction.clamp(0.0, 1.0))
    };
    let mut plot = |x: f64, y: f64, col: [f32; 3]| {
        let (xi, yi) = (x.round() as usize, y.round() as usize);
        for (c, v) in col.iter().enumerate() {
            t.set(c, yi, xi, *v);
        }
    };
    for x in 0..width {
        plot(x as f64, y1 + 1.0, [0.0; 3]);
    }
    for y in 0..height {
        plot(x0 - 1.0, y as f64, [0.0; 3]);
    }
    for (curve, col) in curves {
        for w in curve.windows(2) {
            let (a, b) = (to_px(&w[0]), to_px(&w[1]));
            let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
            for i in 0..=steps {
                let f = i as f64 / steps as f64;
                plot(a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1), *col);
            }
        }
    }
    Ok(t)
}

pub fn write_stats(path: &Path, stats: &[ClassStat]) -> Result<()> {
    write_rows(path, stats)
}

pub fn read_stats(path: &Path) -> Result<Vec<ClassStat>> {
    read_rows(path)
}

#[derive(Debug, Serialize, Deserialize)]
struct BinRow {
    lower: f64,
    width: f64,
    count: usize,
}

pub fn write_histogram(path: &Path, h: &Histogram) -> Result<()> {
    write_rows(
        path,
        h.lower.iter().zip(&h.counts).map(|(&lower, &count)| BinRow { lower, width: h.width, count }),
    )
}

pub fn read_histogram(path: &Path) -> Result<Histogram> {
    let rows: Vec<BinRow> = read_rows(path)?;
    let first = rows.first().ok_or_else(|| format_err(path, "empty histogram"))?;
    Ok(Histogram {
        width: first.width,
        lower: rows.iter().map(|r| r.lower).collect(),
        counts: rows.iter().map(|r| r.count).collect(),
    })
}
