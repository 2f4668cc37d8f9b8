use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use arreid_core::io::{
    load_manifest, read_feature_store, write_feature_store, write_manifest, DatasetManifest, FeatureRecord,
    FeatureStore, ManifestEntry, RunConfig,
};
use arreid_core::losses::{finite_difference_check, FdReport, IdLossObjective, TripletObjective};
use arreid_core::patch_geometry::ResizeTarget;
use arreid_core::reid_eval::evaluate_resampled;
use arreid_core::rng::{derive_seed, stream};
use arreid_core::toy_vit::{forward, render_instance, train, LabeledImage, ModelParams, StepLoss};
use arreid_core::{
    aspect_ratio_stats, augment_batch, evaluate, fusion, id_loss, overall_loss, plan_input_sizes, triplet_loss,
    AspectRatioStats, EmbeddingBatch, Error as CoreError, EvalProtocol, ImageShape, LogitBatch,
    TaggedFeature,
};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::images;
use crate::plot;
use crate::provenance::{read_json, sidecar_path, write_csv, write_json, Provenance};

/// Effective run config: file (or defaults) with flag overrides applied.
pub fn load_config(
    path: Option<&Path>,
    seed: Option<u64>,
    policy: Option<&Path>,
    protocol: Option<&Path>,
) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_json(
            &fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
        )?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(p) = policy {
        cfg.policy = read_json(p)?;
    }
    if let Some(p) = protocol {
        cfg.protocol = read_json(p)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_png_plot(path: &Path, canvas: &plot::Canvas, prov: &Provenance) -> Result<()> {
    images::write_rgb(path, canvas.width, canvas.height, &canvas.rgb, &prov.png_text())
}

#[derive(Debug, Serialize)]
struct StoreMeta<'a> {
    count: usize,
    dim: u32,
    model_ar: f32,
    source: &'a str,
}

fn write_store(path: &Path, store: &FeatureStore, prov: &Provenance, source: &str) -> Result<()> {
    write_feature_store(path, store).with_context(|| format!("writing {}", path.display()))?;
    let meta = StoreMeta {
        count: store.len(),
        dim: store.dim,
        model_ar: store.model_ar,
        source,
    };
    write_json(&sidecar_path(path), prov, &meta)
}

fn read_store(path: &Path) -> Result<FeatureStore> {
    read_feature_store(path).with_context(|| format!("reading feature store {}", path.display()))
}

pub struct SynthArgs {
    pub ids: usize,
    pub test_ids: usize,
    pub instances: usize,
    pub queries_per_id: usize,
}

/// Aspect-ratio modes of the synthetic corpus (width / height).
const SYNTH_AR_MODES: [f64; 3] = [0.8, 1.0, 1.33];

/// Renders a labeled corpus with clustered aspect ratios and writes
/// `train.jsonl`, `query.jsonl` and `gallery.jsonl`. Test identities are
/// disjoint from training ones.
pub fn synth(cfg: &RunConfig, args: &SynthArgs, out_dir: &Path) -> Result<Vec<PathBuf>> {
    use rand::Rng;
    if args.instances <= args.queries_per_id || args.queries_per_id == 0 {
        bail!(CoreError::InvalidConfig(format!(
            "need 0 < queries_per_id ({}) < instances ({})",
            args.queries_per_id, args.instances
        )));
    }
    let prov = Provenance::of(cfg);
    ensure_dir(&out_dir.join("images"))?;
    let mut train = Vec::new();
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    for id in 0..(args.ids + args.test_ids) as u64 {
        for inst in 0..args.instances as u64 {
            let mut r = stream(derive_seed(cfg.seed, "synth-geometry"), id << 20 | inst);
            let mode = SYNTH_AR_MODES[r.random_range(0..SYNTH_AR_MODES.len())];
            let ar = mode * (1.0 + r.random_range(-0.04..0.04));
            let height = r.random_range(56..=96usize);
            let width = ((height as f64 * ar).round() as usize).max(1);
            let shape = ImageShape::new(height, width)?;
            let img = render_instance(id, inst, shape, cfg.seed);
            let rel = format!("images/{id:03}_{inst:02}.png");
            images::write(&out_dir.join(&rel), &img, &prov.png_text())?;
            let entry = ManifestEntry {
                path: rel,
                vehicle_id: id,
                camera_id: (inst % 4) as u32,
                width,
                height,
            };
            if (id as usize) < args.ids {
                train.push(entry);
            } else if (inst as usize) < args.queries_per_id {
                query.push(entry);
            } else {
                gallery.push(entry);
            }
        }
    }
    let mut written = Vec::new();
    for (name, entries) in [("train", train), ("query", query), ("gallery", gallery)] {
        let path = out_dir.join(format!("{name}.jsonl"));
        write_manifest(
            &path,
            &DatasetManifest {
                entries,
                base_dir: out_dir.to_path_buf(),
            },
        )?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Serialize)]
struct StatsFile<'a> {
    manifest: String,
    k: usize,
    #[serde(flatten)]
    stats: &'a AspectRatioStats,
}

pub fn stats(cfg: &RunConfig, manifest: &Path, k: usize, bins: usize, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let m = load_manifest(manifest).with_context(|| format!("loading manifest {}", manifest.display()))?;
    let stats = aspect_ratio_stats(&m.shapes(), k, bins, cfg.seed)?;
    let prov = Provenance::of(cfg);
    ensure_dir(out_dir)?;
    let json_path = out_dir.join("stats.json");
    write_json(
        &json_path,
        &prov,
        &StatsFile {
            manifest: manifest.display().to_string(),
            k,
            stats: &stats,
        },
    )?;
    let csv_path = out_dir.join("histogram.csv");
    let rows: Vec<String> = stats
        .histogram
        .iter()
        .map(|b| format!("{},{},{}", b.lower, b.upper, b.count))
        .collect();
    write_csv(&csv_path, &prov, "lower,upper,count", &rows)?;
    let png_path = out_dir.join("histogram.png");
    let counts: Vec<f64> = stats.histogram.iter().map(|b| b.count as f64).collect();
    write_png_plot(&png_path, &plot::bar_chart(&counts), &prov)?;
    Ok(vec![json_path, csv_path, png_path])
}

/// Writes `plan.json` and `config.json`, the input config with the new
/// resize plan, ready for `train-toy`.
pub fn plan(cfg: &RunConfig, stats_path: &Path, base_height: usize, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let stats: AspectRatioStats = read_json(stats_path)?;
    let resize = plan_input_sizes(&stats, base_height)?;
    let planned = RunConfig {
        resize: resize.clone(),
        ..cfg.clone()
    };
    let prov = Provenance::of(&planned);
    ensure_dir(out_dir)?;
    let plan_path = out_dir.join("plan.json");
    write_json(&plan_path, &prov, &resize)?;
    let cfg_path = out_dir.join("config.json");
    fs::write(&cfg_path, planned.to_json() + "\n")?;
    Ok(vec![plan_path, cfg_path])
}

#[derive(Serialize)]
struct AugmentSidecar<'a> {
    source: &'a str,
    vehicle_id: u64,
    camera_id: u32,
    plan: Option<&'a arreid_core::MixupPlan>,
}

pub fn augment(cfg: &RunConfig, manifest: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let m = load_manifest(manifest).with_context(|| format!("loading manifest {}", manifest.display()))?;
    let imgs = m
        .entries
        .iter()
        .map(|e| images::load(&m.resolve(e)))
        .collect::<Result<Vec<_>>>()?;
    let batch = augment_batch(&imgs, &cfg.mixup, cfg.seed)?;
    let prov = Provenance::of(cfg);
    ensure_dir(out_dir)?;
    let mut entries = Vec::with_capacity(m.entries.len());
    for (i, (e, (img, plan))) in m.entries.iter().zip(batch.images.iter().zip(&batch.plans)).enumerate() {
        let name = format!("aug_{i:05}.png");
        images::write(&out_dir.join(&name), img, &prov.png_text())?;
        write_json(
            &out_dir.join(format!("aug_{i:05}.json")),
            &prov,
            &AugmentSidecar {
                source: &e.path,
                vehicle_id: e.vehicle_id,
                camera_id: e.camera_id,
                plan: plan.as_ref(),
            },
        )?;
        entries.push(ManifestEntry { path: name, ..e.clone() });
    }
    let out_manifest = out_dir.join("augmented.jsonl");
    write_manifest(
        &out_manifest,
        &DatasetManifest {
            entries,
            base_dir: out_dir.to_path_buf(),
        },
    )?;
    let mixed = batch.plans.iter().filter(|p| p.is_some()).count();
    eprintln!("augmented {mixed} of {} images", imgs.len());
    Ok(vec![out_manifest])
}

/// A trained encoder on disk.
#[derive(Serialize, Deserialize)]
pub struct ModelFile {
    pub model_ar: f64,
    pub params: ModelParams,
}

fn load_labeled(m: &DatasetManifest, shape: ImageShape) -> Result<Vec<LabeledImage>> {
    m.entries
        .iter()
        .map(|e| {
            Ok(LabeledImage {
                image: images::load_resized(&m.resolve(e), shape)?,
                vehicle_id: e.vehicle_id,
                camera_id: e.camera_id,
            })
        })
        .collect()
}

fn extract_store(params: &ModelParams, model_ar: f64, m: &DatasetManifest) -> Result<FeatureStore> {
    let records = m
        .entries
        .iter()
        .map(|e| {
            let img = images::load_resized(&m.resolve(e), params.input)?;
            Ok(FeatureRecord {
                vehicle_id: e.vehicle_id,
                camera_id: e.camera_id,
                vector: forward(params, &img)?.into_iter().map(|v| v as f32).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureStore::new(params.config.embed_dim as u32, model_ar as f32, records)?)
}

#[derive(Serialize)]
struct TrainSummary {
    model: usize,
    target: ResizeTarget,
    first20_mean: f64,
    last20_mean: f64,
}

/// Trains one encoder per resize target on `manifest`.
pub fn train_toy(cfg: &RunConfig, manifest: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if cfg.resize.targets.is_empty() {
        bail!(CoreError::InvalidConfig(
            "config has no resize targets; run `plan` first".into()
        ));
    }
    let m = load_manifest(manifest).with_context(|| format!("loading manifest {}", manifest.display()))?;
    let prov = Provenance::of(cfg);
    ensure_dir(out_dir)?;
    let mut written = Vec::new();
    let mut summary = Vec::new();
    for (i, target) in cfg.resize.targets.iter().enumerate() {
        let data = load_labeled(&m, target.shape())?;
        let toy = arreid_core::toy_vit::ToyViTConfig {
            seed: derive_seed(cfg.toy_vit.seed ^ cfg.seed, &format!("init-{i}")),
            ..cfg.toy_vit
        };
        let outcome = train(
            &toy,
            &cfg.train,
            &data,
            Some(&cfg.mixup),
            derive_seed(cfg.seed, &format!("train-{i}")),
        )?;

        let (head, tail) = outcome.head_tail_means(20);
        let model_path = out_dir.join(format!("model_{i}.json"));
        let model = ModelFile {
            model_ar: target.model_ar,
            params: outcome.params,
        };
        write_json(&model_path, &prov, &model)?;

        let loss_csv = out_dir.join(format!("loss_{i}.csv"));
        let rows: Vec<String> = outcome
            .trace
            .iter()
            .map(|s: &StepLoss| format!("{},{},{},{}", s.step, s.id_loss, s.triplet_loss, s.total))
            .collect();
        write_csv(&loss_csv, &prov, "step,id_loss,triplet_loss,total", &rows)?;
        let series = |f: fn(&StepLoss) -> f64| outcome.trace.iter().map(|s| (s.step as f64, f(s))).collect();
        let loss_png = out_dir.join(format!("loss_{i}.png"));
        let chart = plot::line_chart(&[series(|s| s.total), series(|s| s.id_loss), series(|s| s.triplet_loss)], None);
        write_png_plot(&loss_png, &chart, &prov)?;

        let store_path = out_dir.join(format!("features_{i}.rfv"));
        let store = extract_store(&model.params, model.model_ar, &m)?;
        write_store(&store_path, &store, &prov, &manifest.display().to_string())?;

        eprintln!(
            "model {i}: {}x{} (ar {:.3}) loss {head:.4} -> {tail:.4}",
            target.height, target.width, target.model_ar
        );
        summary.push(TrainSummary {
            model: i,
            target: *target,
            first20_mean: head,
            last20_mean: tail,
        });
        written.extend([model_path, loss_csv, loss_png, store_path]);
    }
    let summary_path = out_dir.join("train_summary.json");
    write_json(&summary_path, &prov, &json!({ "models": summary }))?;
    written.push(summary_path);
    Ok(written)
}

#[derive(Deserialize)]
struct ModelFileWithProvenance {
    provenance: Provenance,
    #[serde(flatten)]
    model: ModelFile,
}

pub fn extract(params_path: &Path, manifest: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let file: ModelFileWithProvenance = read_json(params_path)?;
    let m = load_manifest(manifest).with_context(|| format!("loading manifest {}", manifest.display()))?;
    let store = extract_store(&file.model.params, file.model.model_ar, &m)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_store(out, &store, &file.provenance, &manifest.display().to_string())?;
    Ok(vec![out.to_path_buf()])
}

/// Fuses one store per model record by record; `manifest` supplies each
/// record's original aspect ratio.
pub fn fuse(cfg: &RunConfig, stores: &[PathBuf], manifest: &Path, out: &Path, normalize: bool) -> Result<Vec<PathBuf>> {
    let loaded = stores.iter().map(|p| read_store(p)).collect::<Result<Vec<_>>>()?;
    let Some(first) = loaded.first() else {
        bail!(CoreError::EmptyInput("no feature stores to fuse".into()));
    };
    let m = load_manifest(manifest).with_context(|| format!("loading manifest {}", manifest.display()))?;
    for (s, path) in loaded.iter().zip(stores) {
        if s.dim != first.dim {
            bail!(CoreError::Shape(format!(
                "{} has dimension {}, expected {}",
                path.display(),
                s.dim,
                first.dim
            )));
        }
        if s.len() != m.entries.len() {
            bail!(CoreError::Shape(format!(
                "{} has {} records but the manifest has {} entries",
                path.display(),
                s.len(),
                m.entries.len()
            )));
        }
        for (r, e) in s.records.iter().zip(&m.entries) {
            if r.vehicle_id != e.vehicle_id || r.camera_id != e.camera_id {
                bail!(CoreError::Shape(format!(
                    "{} record labels disagree with manifest entry {}",
                    path.display(),
                    e.path
                )));
            }
        }
    }
    let records = m
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let tagged: Vec<TaggedFeature> = loaded
                .iter()
                .map(|s| TaggedFeature {
                    vector: s.records[i].vector.iter().map(|&v| v as f64).collect(),
                    model_ar: s.model_ar as f64,
                })
                .collect();
            let mut fused = fusion::fuse_features(&tagged, e.aspect_ratio(), &cfg.policy)?;
            if normalize {
                fusion::l2_normalize(&mut fused);
            }
            Ok(FeatureRecord {
                vehicle_id: e.vehicle_id,
                camera_id: e.camera_id,
                vector: fused.into_iter().map(|v| v as f32).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let store = FeatureStore::new(first.dim, 0.0, records)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    let sources: Vec<String> = stores.iter().map(|p| p.display().to_string()).collect();
    write_store(out, &store, &Provenance::of(cfg), &sources.join(","))?;
    Ok(vec![out.to_path_buf()])
}

pub fn eval(cfg: &RunConfig, query: &Path, gallery: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let q = read_store(query)?;
    let g = read_store(gallery)?;
    if q.dim != g.dim {
        bail!(CoreError::Shape(format!(
            "query dimension {} does not match gallery dimension {}",
            q.dim, g.dim
        )));
    }
    let (qs, gs) = (q.to_feature_set(), g.to_feature_set());
    let protocol: &EvalProtocol = &cfg.protocol;
    let report = evaluate(&qs, &gs, protocol)?;
    let resampled = protocol
        .gallery_resampling
        .map(|r| evaluate_resampled(&qs, &gs, protocol, r))
        .transpose()?;
    let prov = Provenance::of(cfg);
    ensure_dir(out_dir)?;
    let report_path = out_dir.join("report.json");
    write_json(
        &report_path,
        &prov,
        &json!({ "report": report, "resampled": resampled }),
    )?;
    let csv_path = out_dir.join("cmc.csv");
    let rows: Vec<String> = report
        .cmc_curve
        .iter()
        .enumerate()
        .map(|(i, a)| format!("{},{}", i + 1, a))
        .collect();
    write_csv(&csv_path, &prov, "rank,accuracy", &rows)?;
    let png_path = out_dir.join("cmc.png");
    let pts: Vec<(f64, f64)> = report.cmc_curve.iter().enumerate().map(|(i, &a)| ((i + 1) as f64, a)).collect();
    write_png_plot(&png_path, &plot::line_chart(&[pts], Some((0.0, 1.0))), &prov)?;
    eprintln!(
        "mAP {:.4} R1 {:.4} over {} queries",
        report.map,
        report.rank(1).unwrap_or(f64::NAN),
        qs.len() - report.skipped_queries
    );
    Ok(vec![report_path, csv_path, png_path])
}

fn fd_json(r: &FdReport) -> serde_json::Value {
    json!({
        "max_rel_error": r.max_rel_error,
        "passed": r.passed,
        "checked": r.checked,
        "skipped": r.skipped,
    })
}

/// Losses and gradient checks on a seeded random 3 x 3 batch.
pub fn losses_demo(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let (p, k, d) = (3usize, 3usize, 8usize);
    let n = p * k;
    let labels: Vec<usize> = (0..n).map(|i| i / k).collect();
    let mut r = stream(derive_seed(cfg.seed, "losses-demo"), 0);
    let logits = Array2::from_shape_simple_fn((n, p), || r.sample::<f64, _>(StandardNormal));
    let feats = Array2::from_shape_simple_fn((n, d), || r.sample::<f64, _>(StandardNormal));

    let id = id_loss(&LogitBatch::new(logits.clone(), labels.clone())?);
    let tri = triplet_loss(&EmbeddingBatch::new(feats.clone(), labels.clone())?)?;
    let id_obj = IdLossObjective {
        rows: n,
        classes: p,
        labels: labels.clone(),
    };
    let tri_obj = TripletObjective { dim: d, labels };
    let (eps, tol) = (1e-4, 1e-4);
    let id_fd = finite_difference_check(&id_obj, logits.as_slice().unwrap(), eps, tol);
    let tri_fd = finite_difference_check(&tri_obj, feats.as_slice().unwrap(), eps, tol);

    let prov = Provenance::of(cfg);
    ensure_dir(out_dir)?;
    let path = out_dir.join("losses.json");
    write_json(
        &path,
        &prov,
        &json!({
            "batch": { "p": p, "k": k, "dim": d },
            "id_loss": id,
            "triplet_loss": tri,
            "overall_loss": overall_loss(id, tri),
            "finite_difference": { "epsilon": eps, "tolerance": tol, "id": fd_json(&id_fd), "triplet": fd_json(&tri_fd) },
        }),
    )?;
    eprintln!(
        "id {id:.6} triplet {tri:.6} fd max rel error {:.2e} / {:.2e}",
        id_fd.max_rel_error, tri_fd.max_rel_error
    );
    Ok(vec![path])
}
