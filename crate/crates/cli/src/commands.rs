use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use normdid::ace::{ace_distribution, ace_table, top_k_share, top_k_units, AceTable};
use normdid::analysis::{
    area_drop_curve, dataset_stats, iterative_clean, max_deviation, proportional_line, BetaMode, OCCURRENCE_AREA,
};
use normdid::config::{BlueprintRef, ExperimentConfig};
use normdid::did::{disentanglement_check, run_did, DEFAULT_TAU_OFF};
use normdid::forge::{build_generator, corpus_masks, sample_corpus};
use normdid::generator::NormMode;
use normdid::interventions::InterventionSpec;
use normdid::io;
use normdid::latent::sample_latents;
use normdid::model::Model;
use normdid::segment::segment;
use normdid::tensor::Tensor;
use serde_json::{json, Value};

use crate::{Cli, Command, Common};

/// Latents scanned when a run needs one that shows the target class.
const LATENT_SEARCH: usize = 256;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<normdid::Error> for Failure {
    fn from(e: normdid::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn settings(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| usage(format!("config: {e}")))?,
        None => ExperimentConfig::default(),
    };
    if let Some(b) = &c.blueprint {
        cfg.blueprint = Some(BlueprintRef::Named(b.clone()));
        cfg.bundle = None;
    }
    if let Some(b) = &c.bundle {
        cfg.bundle = Some(b.clone());
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(n) = c.n_samples {
        cfg.n_samples = n;
    }
    if c.layer.is_some() {
        cfg.layer = c.layer;
    }
    if let Some(ks) = &c.ks {
        cfg.ks = ks.clone();
    }
    if !c.classes.is_empty() {
        cfg.classes = c.classes.clone();
    }
    if let Some(o) = &c.out {
        cfg.out = Some(o.clone());
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

struct Run {
    cfg: ExperimentConfig,
    model: Model,
    source: String,
    out: Outputs,
}

impl Run {
    fn new(cfg: ExperimentConfig) -> Result<Self> {
        let out = Outputs::new(cfg.out.clone().ok_or_else(|| usage("--out is required"))?);
        let (model, source) = match (&cfg.bundle, &cfg.blueprint) {
            (Some(dir), _) => {
                let m = io::load_model(dir).map_err(|e| Failure::Runtime(format!("bundle {}: {e}", dir.display())))?;
                (m, format!("bundle:{}", dir.display()))
            }
            (None, Some(bp)) => (build_generator(&bp.resolve(None)?, cfg.seed)?, bp.label()),
            (None, None) => return Err(usage("no model source: give --blueprint, --bundle or a config")),
        };
        if let Some(l) = cfg.layer {
            if l != model.analysis_layer() {
                return Err(usage(format!("layer {l} is not the model's analysis layer {}", model.analysis_layer())));
            }
        }
        for c in &cfg.classes {
            model.class_index(c).map_err(|e| usage(e.to_string()))?;
        }
        Ok(Run { cfg, model, source, out })
    }

    fn classes(&self) -> Vec<String> {
        if self.cfg.classes.is_empty() {
            self.model.palette.names()
        } else {
            self.cfg.classes.clone()
        }
    }

    fn target(&self) -> Result<String> {
        self.classes().into_iter().next().ok_or_else(|| usage("model has no classes"))
    }

    fn table(&self) -> Result<AceTable> {
        Ok(ace_table(&self.model, self.cfg.n_samples, self.cfg.seed)?)
    }

    /// First seeded latent whose live render shows `class`.
    fn latent_with(&self, class: &str) -> Result<(usize, Vec<f32>)> {
        let c = self.model.class_index(class)?;
        let g = &self.model.generator;
        for (i, z) in sample_latents(self.cfg.seed, LATENT_SEARCH, g.latent_dim()).into_iter().enumerate() {
            let mask = segment(&g.forward(&z, &[], &NormMode::Live)?.image, &self.model.palette);
            if mask.areas()[c] > OCCURRENCE_AREA {
                return Ok((i, z));
            }
        }
        Err(Failure::Runtime(format!("no latent among the first {LATENT_SEARCH} shows `{class}`")))
    }

    fn areas(&self, image: &Tensor) -> BTreeMap<String, f64> {
        self.model.palette.names().into_iter().zip(segment(image, &self.model.palette).areas()).collect()
    }

    fn finish(mut self, command: &str, summary: Value) -> Result<String> {
        self.out.files.sort();
        let meta = json!({
            "command": command,
            "source": self.source,
            "seed": self.cfg.seed,
            "n_samples": self.cfg.n_samples,
            "layer": self.model.analysis_layer(),
            "insertion_seed": self.model.insertion_seed,
            "version": env!("CARGO_PKG_VERSION"),
            "files": self.out.files,
            "summary": summary,
        });
        io::write_json(&self.out.root.join("meta.json"), &meta)?;
        Ok(json!({
            "command": command,
            "out": self.out.root.display().to_string(),
            "files": self.out.files.len(),
            "summary": summary,
        })
        .to_string())
    }
}

struct Outputs {
    root: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(root: PathBuf) -> Self {
        Outputs { root, files: Vec::new() }
    }

    /// Path for `sub/name` under the output root, recorded in meta.json.
    fn file(&mut self, sub: &str, name: &str) -> Result<PathBuf> {
        let dir = self.root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
        self.files.push(format!("{sub}/{name}"));
        Ok(dir.join(name))
    }

    fn png(&mut self, name: &str, t: &Tensor) -> Result<()> {
        Ok(io::write_png(&self.file("images", &format!("{name}.png"))?, t)?)
    }

    fn json(&mut self, name: &str, v: &impl serde::Serialize) -> Result<()> {
        Ok(io::write_json(&self.file("tables", &format!("{name}.json"))?, v)?)
    }
}

fn slug(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

pub fn run(cli: Cli) -> Result<String> {
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(usage("--threads must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    let cfg = settings(&cli.common)?;
    if let Command::Serve { addr } = &cli.command {
        return serve(addr);
    }
    let run = Run::new(cfg)?;
    match cli.command {
        Command::Forge => forge(run),
        Command::Render { index, ablate } => render(run, index, ablate),
        Command::Ace { hist_threshold, hist_clamp, hist_bin } => ace(run, hist_threshold, hist_clamp, hist_bin),
        Command::Did { units, top } => did(run, units, top),
        Command::Curve { fixed_beta } => curve(run, fixed_beta),
        Command::Stats => stats(run),
        Command::Clean { max_rounds } => clean(run, max_rounds),
        Command::Serve { .. } => unreachable!(),
    }
}

fn serve(addr: &str) -> Result<String> {
    let addr = addr.parse().map_err(|e| usage(format!("--addr: {e}")))?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    eprintln!("listening on {addr}");
    rt.block_on(normdid_server::serve(addr)).map_err(|e| Failure::Runtime(e.to_string()))?;
    Ok(json!({ "command": "serve", "addr": addr.to_string() }).to_string())
}

fn forge(mut run: Run) -> Result<String> {
    let dir = run.out.root.join("bundle");
    fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(e.to_string()))?;
    io::save_model(&dir, &run.model)?;
    let mut names: Vec<String> = fs::read_dir(&dir)
        .map_err(|e| Failure::Runtime(e.to_string()))?
        .filter_map(|e| e.ok().map(|e| format!("bundle/{}", e.file_name().to_string_lossy())))
        .collect();
    names.sort();
    run.out.files.extend(names);
    let z = sample_latents(run.cfg.seed, 1, run.model.generator.latent_dim()).remove(0);
    let img = run.model.generator.forward(&z, &[], &NormMode::Live)?.image;
    run.out.png("preview", &img)?;
    let summary = json!({
        "n_units": run.model.n_units(),
        "classes": run.model.palette.names(),
        "output": run.model.generator.config.output_resolution(),
    });
    run.finish("forge", summary)
}

fn render(mut run: Run, index: usize, ablate: Vec<usize>) -> Result<String> {
    let g = &run.model.generator;
    let z = sample_latents(run.cfg.seed, index + 1, g.latent_dim()).remove(index);
    let stack: Vec<InterventionSpec> = if ablate.is_empty() {
        Vec::new()
    } else {
        run.model.check_units(&ablate)?;
        vec![InterventionSpec::ablate(run.model.analysis_layer(), ablate.clone())]
    };
    let trace = g.forward(&z, &stack, &NormMode::Live)?;
    let mask = segment(&trace.image, &run.model.palette);
    run.out.png("render", &trace.image)?;
    run.out.png("render_seg", &io::colorize(&mask, &run.model.palette))?;
    let png = run.out.file("images", "render_labels.png")?;
    let table = run.out.file("tables", "render_labels.json")?;
    io::write_segmask(&png, &table, &mask)?;
    let areas = run.areas(&trace.image);
    run.finish("render", json!({ "index": index, "ablated": ablate, "areas": areas }))
}

fn ace(mut run: Run, threshold: f64, clamp: f64, bin: f64) -> Result<String> {
    let table = run.table()?;
    let csv = run.out.file("tables", "ace.csv")?;
    let meta = run.out.file("tables", "ace.json")?;
    io::write_ace_table(&csv, &meta, &table)?;
    let mut per_class = BTreeMap::new();
    for class in run.classes() {
        let hist = ace_distribution(&table, &class, threshold, clamp, bin).map_err(|e| usage(e.to_string()))?;
        io::write_histogram(&run.out.file("tables", &format!("ace_hist_{}.csv", slug(&class)))?, &hist)?;
        let col = table.column(&class)?;
        let max = col.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let k = 20.min(table.n_units());
        per_class.insert(
            class.clone(),
            json!({
                "max_delta": max,
                "top20_share": top_k_share(&table, &class, k)?,
                "above_threshold": hist.total(),
                "top5": top_k_units(&table, &class, 5.min(table.n_units()))?,
            }),
        );
    }
    run.finish("ace", json!({ "units": table.n_units(), "classes": per_class }))
}

fn did(mut run: Run, units: Vec<usize>, top: usize) -> Result<String> {
    let class = run.target()?;
    let units = if units.is_empty() {
        top_k_units(&run.table()?, &class, top.min(run.model.n_units()))?
    } else {
        run.model.check_units(&units)?;
        units
    };
    let (index, z) = run.latent_with(&class)?;
    let spec = InterventionSpec::ablate(run.model.analysis_layer(), units.clone());
    let r = run_did(&run.model.generator, &z, &spec)?;
    let scenes = [
        ("y_beta_u", &r.y_beta_u),
        ("y_beta_u1", &r.y_beta_u1),
        ("y_beta1_u1", &r.y_beta1_u1),
        ("y_beta1_u", &r.y_beta1_u),
    ];
    let mut areas = BTreeMap::new();
    for (name, img) in scenes {
        run.out.png(&format!("did_{name}"), img)?;
        areas.insert(name, run.areas(img));
    }
    run.out.png("did_quad", &io::tile_horizontal(&scenes.map(|s| s.1))?)?;
    for (name, hm) in [("delta", &r.heatmap), ("inpaint", &r.inpaint_effect), ("ablation", &r.ablation_effect)] {
        io::write_heatmap_png(&run.out.file("images", &format!("did_{name}.png"))?, hm)?;
    }
    let zs = sample_latents(run.cfg.seed, run.cfg.n_samples, run.model.generator.latent_dim());
    let report = disentanglement_check(&run.model, &zs, &spec, &class, DEFAULT_TAU_OFF)?;
    let bg = r.background.count() as f64 / r.background.bits().len().max(1) as f64;
    let details = json!({
        "class": class,
        "units": units,
        "latent_index": index,
        "areas": areas,
        "delta_l2": r.heatmap.l2(),
        "delta_max": r.heatmap.max(),
        "inpaint_l2": r.inpaint_effect.l2(),
        "ablation_l2": r.ablation_effect.l2(),
        "background_fraction": bg,
        "disentanglement": report,
    });
    run.out.json("did", &details)?;
    let summary = json!({
        "class": class,
        "latent_index": index,
        "delta_l2": r.heatmap.l2(),
        "inpaint_l2": r.inpaint_effect.l2(),
        "disentangled": report.disentangled,
    });
    run.finish("did", summary)
}

fn curve(mut run: Run, fixed: bool) -> Result<String> {
    let mode = if fixed { BetaMode::Fixed } else { BetaMode::Live };
    let tag = if fixed { "fixed" } else { "live" };
    let table = run.table()?;
    let ks: Vec<usize> = run.cfg.ks.iter().map(|&k| k.min(run.model.n_units())).collect();
    let mut per_class = BTreeMap::new();
    for class in run.classes() {
        let curve = area_drop_curve(&run.model, &table, &class, &ks, mode, run.cfg.n_samples, run.cfg.seed)?;
        let stem = format!("curve_{}_{tag}", slug(&class));
        io::write_curve(&run.out.file("tables", &format!("{stem}.csv"))?, &curve)?;
        let mut entry = json!({
            "final_fraction": curve.last().map(|p| p.fraction),
            "k20_fraction": curve.iter().find(|p| p.k == 20).map(|p| p.fraction),
        });
        let line = run.model.ground_truth.as_ref().map(|gt| {
            let c = run.model.class_index(&class).expect("checked");
            let weights: Vec<f32> = gt.coupling.iter().map(|r| r[c]).collect();
            let order = top_k_units(&table, &class, ks.last().copied().unwrap_or(0)).expect("checked");
            proportional_line(&order, &weights, &ks)
        });
        let line_pts: Option<Vec<_>> = line.as_ref().map(|l| {
            curve
                .iter()
                .zip(l)
                .map(|(p, &f)| normdid::analysis::CurvePoint { k: p.k, area: f, fraction: f })
                .collect()
        });
        let mut series = vec![(curve.as_slice(), [0.0, 0.2, 0.8])];
        if let (Some(l), Some(pts)) = (&line, &line_pts) {
            entry["max_deviation"] = json!(max_deviation(&curve, l));
            series.insert(0, (pts.as_slice(), [0.6, 0.6, 0.6]));
        }
        run.out.png(&stem, &io::curve_image(&series, 160, 100)?)?;
        per_class.insert(class, entry);
    }
    run.finish("curve", json!({ "mode": tag, "ks": ks, "classes": per_class }))
}

fn stats(mut run: Run) -> Result<String> {
    let traces = sample_corpus(&run.model, run.cfg.n_samples, run.cfg.seed)?;
    let stats = dataset_stats(&corpus_masks(&run.model, &traces))?;
    io::write_stats(&run.out.file("tables", "stats.csv")?, &stats)?;
    let summary: BTreeMap<_, _> =
        stats.iter().map(|s| (s.class.clone(), json!({ "frequency": s.frequency, "mean_area": s.mean_area }))).collect();
    run.finish("stats", json!({ "corpus": traces.len(), "classes": summary }))
}

fn clean(mut run: Run, max_rounds: usize) -> Result<String> {
    if max_rounds == 0 {
        return Err(usage("--max-rounds must be >= 1"));
    }
    let class = run.target()?;
    let table = run.table()?;
    let (index, z) = run.latent_with(&class)?;
    let t = iterative_clean(&run.model, &table, &z, &class, max_rounds)?;
    run.out.json("clean", &t)?;
    let g = &run.model.generator;
    run.out.png("clean_round0", &g.forward(&z, &[], &NormMode::Live)?.image)?;
    let mut stack = Vec::new();
    for r in &t.rounds {
        stack.extend(r.added.iter().cloned());
        let img = g.forward(&z, &stack, &NormMode::Live)?.image;
        run.out.png(&format!("clean_round{}", r.round), &img)?;
    }
    let summary = json!({
        "class": class,
        "latent_index": index,
        "rounds": t.rounds.len(),
        "resolved": t.resolved(),
        "unresolved": t.unresolved,
    });
    run.finish("clean", summary)
}
