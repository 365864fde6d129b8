//! Ablation studies: one config per cell, trained over several seeds.

use std::path::PathBuf;

use anyhow::Result;
use tdeed::backbone::{ShiftModule, ShiftPlacement};
use tdeed::infer::PostProc;
use tdeed::model::TemporalModule;
use tdeed::sgp::SkipVariant;
use tdeed::train::{apply_head_preset, HeadMode, HEAD_PRESETS};

use crate::commands::{load_splits, train_into, training_hash, with_postproc, Splits};
use crate::config::{RunConfig, Study};
use crate::manifest::write_manifest;
use crate::plot::{chart_from_csv, ChartKind};

/// A named variant of the base config.
pub struct Cell {
    pub name: String,
    pub cfg: RunConfig,
    /// Post-processing override applied at evaluation time only.
    pub postproc: Option<PostProc>,
}

fn cell(name: impl Into<String>, cfg: RunConfig) -> Cell {
    Cell {
        name: name.into(),
        cfg,
        postproc: None,
    }
}

/// Expands a study into its cells.
pub fn cells(base: &RunConfig, study: Study) -> Result<Vec<Cell>> {
    let mut out = Vec::new();
    match study {
        Study::TemporalModule => {
            for m in [TemporalModule::SgpEd, TemporalModule::Transformer, TemporalModule::Gru] {
                let mut c = base.clone();
                c.model.temporal_module = m;
                out.push(cell(m.name(), c));
            }
        }
        Study::SkipVariant => {
            for s in SkipVariant::ALL {
                let mut c = base.clone();
                c.model.skip = s;
                out.push(cell(s.name(), c));
            }
        }
        Study::HeadMode => {
            for p in HEAD_PRESETS {
                let mut c = base.clone();
                apply_head_preset(p, &mut c.model, &mut c.train)?;
                c.infer.use_displacement = c.train.head_mode == HeadMode::Displacement;
                out.push(cell(p, c));
            }
        }
        Study::Pyramid => {
            for m in [TemporalModule::SgpEd, TemporalModule::SgpPyramid] {
                let mut c = base.clone();
                c.model.temporal_module = m;
                out.push(cell(m.name(), c));
            }
        }
        Study::ShiftModule => {
            let variants = [
                ("none", ShiftModule::None, ShiftPlacement::All),
                ("gsm_all", ShiftModule::Gsm, ShiftPlacement::All),
                ("gsm_latter_half", ShiftModule::Gsm, ShiftPlacement::LatterHalf),
                ("gsf_all", ShiftModule::Gsf, ShiftPlacement::All),
                ("gsf_latter_half", ShiftModule::Gsf, ShiftPlacement::LatterHalf),
            ];
            for (name, m, p) in variants {
                let mut c = base.clone();
                c.model.backbone.shift_module = m;
                c.model.backbone.shift_placement = p;
                out.push(cell(name, c));
            }
        }
        Study::ClipLength => {
            for l in [25, 50, 100, 200] {
                let mut c = base.clone();
                c.model.clip_len = l;
                out.push(cell(format!("l{l}"), c));
            }
        }
        Study::Postproc => {
            for (name, p) in [("nms", PostProc::Nms), ("snms", PostProc::Snms)] {
                out.push(Cell {
                    name: name.into(),
                    cfg: base.clone(),
                    postproc: Some(p),
                });
            }
        }
    }
    for c in &out {
        c.cfg.validate()?;
    }
    Ok(out)
}

/// `cfg` with the `i`-th study seed applied.
pub fn seeded(base: &RunConfig, cfg: &RunConfig, i: usize) -> RunConfig {
    let mut cfg = cfg.clone();
    cfg.set_seed(base.seed + i as u64);
    cfg
}

/// Cache directory of the model trained from `cfg`.
pub fn model_dir(base: &RunConfig, cfg: &RunConfig) -> PathBuf {
    base.output_dir.join("models").join(&training_hash(cfg)[..16])
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub name: String,
    /// `(map_d1, map_d2)` per seed.
    pub per_seed: Vec<(f64, f64)>,
}

impl CellResult {
    pub fn mean(&self) -> (f64, f64) {
        let n = self.per_seed.len().max(1) as f64;
        let (a, b) = self.per_seed.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
        (a / n, b / n)
    }
}

/// Trains (or reuses) one model per cell and seed, evaluating on the test split.
pub fn run_cells(base: &RunConfig, cells: &[Cell], splits: &Splits, log: &mut dyn FnMut(&str)) -> Result<Vec<CellResult>> {
    let mut results = Vec::new();
    for c in cells {
        let mut per_seed = Vec::new();
        for i in 0..base.ablate.seeds {
            let cfg = seeded(base, &c.cfg, i);
            let t = train_into(&cfg, splits, &model_dir(base, &cfg), false, base.ablate.reuse)?;
            let infer = match c.postproc {
                Some(p) => with_postproc(&cfg.infer, p),
                None => cfg.infer.clone(),
            };
            let r = tdeed::eval::evaluate(&t.model, &t.store, &splits.test, &infer)?;
            log(&format!("{} seed {}: mAP@1 {:.4} mAP@2 {:.4}", c.name, cfg.seed, r.map_d1, r.map_d2));
            per_seed.push((r.map_d1, r.map_d2));
        }
        results.push(CellResult {
            name: c.name.clone(),
            per_seed,
        });
    }
    Ok(results)
}

pub fn study_csv(results: &[CellResult]) -> Result<String> {
    let seeds = results.iter().map(|r| r.per_seed.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["cell".to_string(), "seeds".into(), "map_d1_mean".into(), "map_d2_mean".into()];
    for i in 0..seeds {
        header.push(format!("map_d1_seed{i}"));
        header.push(format!("map_d2_seed{i}"));
    }
    w.write_record(&header)?;
    for r in results {
        let (m1, m2) = r.mean();
        let mut row = vec![r.name.clone(), r.per_seed.len().to_string(), format!("{m1:.6}"), format!("{m2:.6}")];
        for (a, b) in &r.per_seed {
            row.push(format!("{a:.6}"));
            row.push(format!("{b:.6}"));
        }
        w.write_record(&row)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// Runs a study end to end, writing `<output_dir>/ablate/<study>/<study>.{csv,svg}`.
pub fn cmd_ablate(base: &RunConfig, study: Study, log: &mut dyn FnMut(&str)) -> Result<(PathBuf, Vec<CellResult>)> {
    let splits = load_splits(base)?;
    let cells = cells(base, study)?;
    let results = run_cells(base, &cells, &splits, log)?;
    let dir = base.output_dir.join("ablate").join(study.name());
    std::fs::create_dir_all(&dir)?;
    let csv_text = study_csv(&results)?;
    let csv_name = format!("{}.csv", study.name());
    let svg_name = format!("{}.svg", study.name());
    std::fs::write(dir.join(&csv_name), &csv_text)?;
    let svg = chart_from_csv(
        &format!("Ablation: {}", study.name()),
        &csv_text,
        &["map_d1_mean", "map_d2_mean"],
        ChartKind::Bar,
    )?;
    std::fs::write(dir.join(&svg_name), svg)?;
    write_manifest(
        &dir,
        &format!("ablate {}", study.name()),
        &crate::commands::hash_str(&base.canonical_json()),
        base.seed,
        &[&csv_name, &svg_name],
    )?;
    Ok((dir, results))
}
