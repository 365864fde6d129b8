//! `gen`, `train`, `eval` and `analyze`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use tdeed::checkpoint::{load_model, save_model};
use tdeed::data::{generate_dataset, load_annotations, load_frames, save_annotations, save_frames, SyntheticVideo};
use tdeed::eval::{
    all_events, discriminability_profile, evaluate, map_at, probe_clips, pyramid_layer_map, MapRow,
};
use tdeed::infer::{load_predictions, save_predictions, InferCfg, PostProc};
use tdeed::model::{Model, TemporalModule};
use tdeed::params::ParamStore;
use tdeed::train::{load_train_state, metrics_csv, save_train_state, train, TrainState, Validation};

use crate::config::{bad, AnalysisKind, RunConfig};
use crate::manifest::{read_manifest, sha256_hex, write_manifest};
use crate::plot::{chart_from_csv, ChartKind};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

pub struct Splits {
    pub train: Vec<SyntheticVideo>,
    pub val: Vec<SyntheticVideo>,
    pub test: Vec<SyntheticVideo>,
}

fn split_spec(cfg: &RunConfig, idx: usize) -> tdeed::data::GeneratorSpec {
    let g = &cfg.data.generator;
    let num_videos = [cfg.data.train_videos, cfg.data.val_videos, cfg.data.test_videos][idx];
    tdeed::data::GeneratorSpec {
        num_videos,
        seed: g.seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(idx as u64)),
        id_prefix: format!("{}_{}", g.id_prefix, SPLITS[idx]),
        ..g.clone()
    }
}

fn frames_file(split: &str) -> String {
    format!("{split}.frames.bin")
}

fn ann_file(split: &str) -> String {
    format!("{split}.annotations.json")
}

pub fn hash_str(s: &str) -> String {
    sha256_hex(s.as_bytes())
}

/// Hash of the dataset-defining part of the config.
pub fn data_hash(cfg: &RunConfig) -> String {
    let key = serde_json::json!({
        "generator": cfg.data.generator,
        "train": cfg.data.train_videos,
        "val": cfg.data.val_videos,
        "test": cfg.data.test_videos,
        "preset": cfg.data.preset,
        "encoding": cfg.data.encoding,
    });
    hash_str(&key.to_string())
}

/// Writes the train/val/test splits under the data directory.
pub fn cmd_gen(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.data_dir();
    std::fs::create_dir_all(&dir)?;
    let mut artifacts = Vec::new();
    for (i, split) in SPLITS.iter().enumerate() {
        let spec = split_spec(cfg, i);
        if spec.num_videos == 0 {
            continue;
        }
        let videos = generate_dataset(&spec)?;
        save_frames(&dir.join(frames_file(split)), &videos, cfg.data.encoding)?;
        save_annotations(&dir.join(ann_file(split)), &videos)?;
        artifacts.push(frames_file(split));
        artifacts.push(ann_file(split));
    }
    let names: Vec<&str> = artifacts.iter().map(String::as_str).collect();
    write_manifest(&dir, "gen", &data_hash(cfg), cfg.data.generator.seed, &names)?;
    Ok(dir)
}

fn load_split(dir: &Path, split: &str) -> Result<Vec<SyntheticVideo>> {
    let ann = dir.join(ann_file(split));
    if !ann.exists() {
        return Ok(Vec::new());
    }
    let anns = load_annotations(&ann)?;
    Ok(load_frames(&dir.join(frames_file(split)), Some(&anns))?)
}

/// Loads the dataset, generating it first when absent. An existing
/// dataset produced from a different data config is an error.
pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let dir = cfg.data_dir();
    if !dir.join(crate::manifest::MANIFEST).exists() {
        cmd_gen(cfg)?;
    }
    let m = read_manifest(&dir)?;
    if m.config_hash != data_hash(cfg) {
        return bad(format!(
            "dataset in {} was generated from a different data config; remove it or point data.dir elsewhere",
            dir.display()
        ));
    }
    Ok(Splits {
        train: load_split(&dir, "train")?,
        val: load_split(&dir, "val")?,
        test: load_split(&dir, "test")?,
    })
}

/// Hash of everything that determines a trained model.
pub fn training_hash(cfg: &RunConfig) -> String {
    let key = serde_json::json!({
        "data": data_hash(cfg),
        "early_stopping": cfg.data.early_stopping,
        "model": cfg.model,
        "train": cfg.train,
        "seed": cfg.seed,
        "val_infer": if cfg.data.early_stopping { Some(&cfg.infer) } else { None },
    });
    hash_str(&key.to_string())
}

pub struct Trained {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub dir: PathBuf,
}

/// Trains into `dir` (model.ckpt, state.ckpt, metrics.csv, manifest.json).
/// With `resume`, continues from `dir/state.ckpt`. With `reuse`, a finished
/// run whose manifest matches the config is loaded instead of retrained.
pub fn train_into(cfg: &RunConfig, splits: &Splits, dir: &Path, resume: bool, reuse: bool) -> Result<Trained> {
    let hash = training_hash(cfg);
    if reuse && crate::manifest::manifest_matches(dir, &hash) {
        let (model, store) = load_model(&dir.join("model.ckpt"))?;
        return Ok(Trained {
            model,
            store,
            dir: dir.to_path_buf(),
        });
    }
    std::fs::create_dir_all(dir)?;
    let mut store = ParamStore::new();
    let model = Model::new(&cfg.model, &mut store)?;
    let state_path = dir.join("state.ckpt");
    let state: Option<TrainState> = if resume && state_path.exists() {
        let (mcfg, st) = load_train_state(&state_path, &mut store, &cfg.train)?;
        if mcfg != cfg.model {
            bail!("{} was written for a different model config", state_path.display());
        }
        Some(st)
    } else {
        None
    };
    let infer = cfg.infer.clone();
    let val = Validation {
        videos: &splits.val,
        infer: &infer,
    };
    let val_ref = cfg.data.early_stopping.then_some(&val);
    let metrics_path = dir.join("metrics.csv");
    let state = train(
        &model,
        &mut store,
        &splits.train,
        val_ref,
        &cfg.train,
        state,
        &mut |st, store| {
            save_train_state(&state_path, &model, store, &cfg.train, st)?;
            std::fs::write(&metrics_path, metrics_csv(&st.metrics))?;
            Ok(())
        },
    )
    .context("training failed")?;
    std::fs::write(&metrics_path, metrics_csv(&state.metrics))?;
    save_model(&dir.join("model.ckpt"), &model, &store)?;
    write_manifest(dir, "train", &hash, cfg.seed, &["model.ckpt", "metrics.csv"])?;
    Ok(Trained {
        model,
        store,
        dir: dir.to_path_buf(),
    })
}

pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<PathBuf> {
    let splits = load_splits(cfg)?;
    let dir = cfg.output_dir.join("train");
    train_into(cfg, &splits, &dir, resume, false)?;
    Ok(dir)
}

/// Inference settings for a given post-processing mode.
pub fn with_postproc(infer: &InferCfg, p: PostProc) -> InferCfg {
    InferCfg {
        postproc: p,
        ..infer.clone()
    }
}

pub fn eval_rows(model: &Model, store: &ParamStore<f32>, videos: &[SyntheticVideo], infer: &InferCfg) -> Result<Vec<(String, MapRow)>> {
    let mut rows = Vec::new();
    for (name, p) in [("nms", PostProc::Nms), ("snms", PostProc::Snms)] {
        rows.push((name.to_string(), evaluate(model, store, videos, &with_postproc(infer, p))?));
    }
    Ok(rows)
}

pub fn results_csv(rows: &[(String, MapRow)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["postproc", "map_d1", "map_d2"])?;
    for (name, r) in rows {
        w.write_record([name.clone(), format!("{:.6}", r.map_d1), format!("{:.6}", r.map_d2)])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// Evaluates a checkpoint (default `<output_dir>/train/model.ckpt`) on the
/// test split, or scores an existing predictions file.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, predictions: Option<&Path>) -> Result<PathBuf> {
    let splits = load_splits(cfg)?;
    let dir = cfg.output_dir.join("eval");
    std::fs::create_dir_all(&dir)?;
    let mut artifacts = vec!["results.csv"];
    let csv_text = if let Some(p) = predictions {
        let preds = load_predictions(p)?;
        let gts = all_events(&splits.test);
        let c = cfg.model.num_classes;
        let row = MapRow {
            map_d1: map_at(&preds, &gts, c, 1),
            map_d2: map_at(&preds, &gts, c, 2),
        };
        results_csv(&[("file".to_string(), row)])?
    } else {
        let ck = checkpoint
            .map(Path::to_path_buf)
            .unwrap_or_else(|| cfg.output_dir.join("train/model.ckpt"));
        let (model, store) = load_model(&ck).with_context(|| format!("loading {}", ck.display()))?;
        let rows = eval_rows(&model, &store, &splits.test, &cfg.infer)?;
        if model.cfg.temporal_module != TemporalModule::SgpPyramid {
            let events = tdeed::eval::spot_all(&model, &store, &splits.test, &cfg.infer)?;
            save_predictions(&dir.join("predictions.json"), &events)?;
            artifacts.push("predictions.json");
        }
        results_csv(&rows)?
    };
    std::fs::write(dir.join("results.csv"), &csv_text)?;
    write_manifest(&dir, "eval", &hash_str(&cfg.canonical_json()), cfg.seed, &artifacts)?;
    Ok(dir)
}

pub fn discriminability_csv(rows: &[tdeed::eval::StageSimilarity]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["stage", "similarity"])?;
    for r in rows {
        w.write_record([r.stage.clone(), format!("{:.6}", r.similarity)])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn pyramid_csv(rows: &[tdeed::eval::PyramidLayerRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layer", "standalone_map", "cumulative_map"])?;
    for r in rows {
        w.write_record([
            r.layer.to_string(),
            format!("{:.6}", r.standalone_map),
            format!("{:.6}", r.cumulative_map),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn plot_analysis(kind: AnalysisKind, csv_text: &str) -> Result<String> {
    match kind {
        AnalysisKind::Discriminability => chart_from_csv(
            "Token similarity to the sequence mean",
            csv_text,
            &["similarity"],
            ChartKind::Line,
        ),
        AnalysisKind::PyramidLayers => chart_from_csv(
            "Pyramid mAP per layer",
            csv_text,
            &["standalone_map", "cumulative_map"],
            ChartKind::Line,
        ),
    }
}

/// Analysis CSV text for a trained model on the test split.
pub fn analysis_csv(cfg: &RunConfig, kind: AnalysisKind, model: &Model, store: &ParamStore<f32>, test: &[SyntheticVideo]) -> Result<String> {
    match kind {
        AnalysisKind::Discriminability => {
            let probes = probe_clips(test, model.cfg.clip_len, cfg.analyze.probe_clips_per_video);
            discriminability_csv(&discriminability_profile(model, store, &probes)?)
        }
        AnalysisKind::PyramidLayers => {
            if model.cfg.temporal_module != TemporalModule::SgpPyramid {
                return bad("analyze kind pyramid_layers needs a model with temporal_module = \"sgp_pyramid\"");
            }
            pyramid_csv(&pyramid_layer_map(model, store, test, cfg.analyze.delta, &cfg.infer)?)
        }
    }
}

pub fn cmd_analyze(cfg: &RunConfig, kind: AnalysisKind, checkpoint: Option<&Path>) -> Result<PathBuf> {
    let splits = load_splits(cfg)?;
    let ck = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_dir.join("train/model.ckpt"));
    let (model, store) = load_model(&ck).with_context(|| format!("loading {}", ck.display()))?;
    let dir = cfg.output_dir.join("analyze");
    std::fs::create_dir_all(&dir)?;
    let name = match kind {
        AnalysisKind::Discriminability => "discriminability",
        AnalysisKind::PyramidLayers => "pyramid_layers",
    };
    let csv_text = analysis_csv(cfg, kind, &model, &store, &splits.test)?;
    let csv_name = format!("{name}.csv");
    let svg_name = format!("{name}.svg");
    std::fs::write(dir.join(&csv_name), &csv_text)?;
    std::fs::write(dir.join(&svg_name), plot_analysis(kind, &csv_text)?)?;
    write_manifest(&dir, &format!("analyze {name}"), &hash_str(&cfg.canonical_json()), cfg.seed, &[&csv_name, &svg_name])?;
    Ok(dir)
}
