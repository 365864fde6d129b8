//! Loss, learning-rate schedule, AdamW and the epoch loop.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::{param_tensors, read_tensors, restore_params, write_tensors};
use crate::data::{
    assign_targets, augment, dilate_labels, mixup, sample_clip, AugmentCfg, Clip, SyntheticVideo, Targets,
};
use crate::error::{config_err, Error, Result};
use crate::eval::evaluate;
use crate::infer::InferCfg;
use crate::model::{Model, ModelCfg, TemporalModule};
use crate::params::ParamStore;
use crate::tensor::{lit, Float, Tensor};

pub const CE_EPS: f64 = 1e-12;

/// How frames near an event are supervised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Radius-`r_E` labels with displacement regression.
    Displacement,
    /// Exact-frame labels dilated by `dilation`, no displacement loss.
    Dilation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainCfg {
    pub epochs: usize,
    pub clips_per_epoch: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    /// Weight of every event class in the cross-entropy (background is 1).
    pub w: f64,
    pub seed: u64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub head_mode: HeadMode,
    pub dilation: usize,
    pub augment: AugmentCfg,
}

impl Default for TrainCfg {
    fn default() -> Self {
        Self {
            epochs: 50,
            clips_per_epoch: 5000,
            batch_size: 8,
            base_lr: 8e-4,
            warmup_epochs: 3,
            w: 5.0,
            seed: 0,
            weight_decay: 1e-2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            patience: 10,
            head_mode: HeadMode::Displacement,
            dilation: 0,
            augment: AugmentCfg::default(),
        }
    }
}

impl TrainCfg {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return config_err("train.epochs must be >= 1");
        }
        if self.warmup_epochs >= self.epochs {
            return config_err(format!(
                "train.warmup_epochs ({}) must be < train.epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.w < 1.0 {
            return config_err(format!("train.w must be >= 1, got {}", self.w));
        }
        if self.batch_size == 0 || self.clips_per_epoch == 0 {
            return config_err("train.batch_size and train.clips_per_epoch must be >= 1");
        }
        if self.base_lr <= 0.0 || !self.base_lr.is_finite() {
            return config_err("train.base_lr must be positive");
        }
        self.augment.validate()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.clips_per_epoch.div_ceil(self.batch_size)
    }
}

/// Label-mode presets: `wo_dil0`, `wo_dil1` (classification only, with
/// label dilation 0 or 1) and `re1`, `re2` (displacement with radius 1 or 2).
pub fn apply_head_preset(name: &str, model: &mut ModelCfg, train: &mut TrainCfg) -> Result<()> {
    let (mode, dilation, radius) = match name {
        "wo_dil0" => (HeadMode::Dilation, 0, 0),
        "wo_dil1" => (HeadMode::Dilation, 1, 0),
        "re1" => (HeadMode::Displacement, 0, 1),
        "re2" => (HeadMode::Displacement, 0, 2),
        other => return config_err(format!("unknown head preset `{other}` (wo_dil0 | wo_dil1 | re1 | re2)")),
    };
    train.head_mode = mode;
    train.dilation = dilation;
    model.radius = radius;
    Ok(())
}

pub const HEAD_PRESETS: [&str; 4] = ["wo_dil0", "wo_dil1", "re1", "re2"];

/// Warmup then cosine decay, evaluated per epoch.
pub fn lr_at(epoch: usize, cfg: &TrainCfg) -> f64 {
    if epoch < cfg.warmup_epochs {
        cfg.base_lr * (epoch + 1) as f64 / cfg.warmup_epochs as f64
    } else {
        let t = (epoch - cfg.warmup_epochs) as f64 / (cfg.epochs - cfg.warmup_epochs) as f64;
        cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Loss nodes: `(total, L_c, L_d)` with `total = L_c + L_d`.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub class: Var,
    pub disp: Var,
}

/// `(1/L) sum_l [CE_w + MSE]`: background weight 1, event classes `w`,
/// probabilities clamped at 1e-12, squared displacement error at every frame.
pub fn combined_loss<T: Float>(
    g: &mut Graph<'_, T>,
    probs: Var,
    disp: Var,
    targets: &Targets,
    w: f64,
    with_disp: bool,
) -> Result<LossVars> {
    let (l, cols) = (g.shape(probs)[0], g.shape(probs)[1]);
    if targets.class_targets.shape() != [l, cols] || targets.len() != l || g.shape(disp) != [l, 1] {
        return Err(Error::Contract(format!(
            "loss shapes disagree: probs {:?}, disp {:?}, targets {:?}",
            g.shape(probs),
            g.shape(disp),
            targets.class_targets.shape()
        )));
    }
    if !g.value(probs).all_finite()
        || !g.value(disp).all_finite()
        || !targets.class_targets.all_finite()
        || targets.disp_targets.iter().any(|v| !v.is_finite())
    {
        return Err(Error::Contract("NaN or infinite value in loss inputs".into()));
    }
    let mut weights = vec![lit::<T>(w); cols];
    weights[0] = T::one();
    let inv = lit::<T>(1.0 / l as f64);
    let ce = g.weighted_ce(probs, targets.class_targets.cast(), weights, lit(CE_EPS));
    let class = g.scale(ce, inv);
    let disp = if with_disp {
        let y = Tensor::from_vec(&[l, 1], targets.disp_targets.iter().map(|&v| lit(v as f64)).collect())?;
        let se = g.sq_err(disp, y);
        g.scale(se, inv)
    } else {
        g.constant(Tensor::scalar(T::zero()))
    };
    let total = g.add(class, disp);
    Ok(LossVars { total, class, disp })
}

/// Supervision for `clip` at a temporal stride under the head mode.
pub fn training_targets(clip: &Clip, stride: usize, model: &ModelCfg, cfg: &TrainCfg) -> Targets {
    let c = model.num_classes;
    let build = |events: &[crate::data::ClipEvent]| match cfg.head_mode {
        HeadMode::Displacement => assign_targets(events, clip.len, stride, model.radius, c),
        HeadMode::Dilation => {
            let exact = assign_targets(events, clip.len, stride, 0, c);
            dilate_labels(&exact, cfg.dilation)
        }
    };
    let own = build(&clip.events);
    match &clip.mixup {
        None => own,
        Some(m) => {
            let other = build(&m.partner_events);
            crate::data::blend(&own, &other, m.lambda)
        }
    }
}

/// Loss of one clip (summed over scales for a pyramid, averaged).
pub fn clip_loss<T: Float>(
    g: &mut Graph<'_, T>,
    model: &Model,
    clip: &Clip,
    cfg: &TrainCfg,
) -> Result<LossVars> {
    let out = model.forward(g, &clip.frames, clip.height, clip.width)?;
    let with_disp = cfg.head_mode == HeadMode::Displacement;
    let strides = model.scale_strides();
    let mut parts = Vec::with_capacity(out.scales.len());
    for (&(p, d), &s) in out.scales.iter().zip(&strides) {
        let t = training_targets(clip, s, &model.cfg, cfg);
        parts.push(combined_loss(g, p, d, &t, cfg.w, with_disp)?);
    }
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    let inv = lit::<T>(1.0 / parts.len() as f64);
    let mut class = parts[0].class;
    let mut disp = parts[0].disp;
    for p in &parts[1..] {
        class = g.add(class, p.class);
        disp = g.add(disp, p.disp);
    }
    let class = g.scale(class, inv);
    let disp = g.scale(disp, inv);
    let total = g.add(class, disp);
    Ok(LossVars { total, class, disp })
}

/// Decoupled weight decay Adam. Decay applies to weight matrices and
/// kernels (rank >= 2) only.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(store: &ParamStore<f32>, cfg: &TrainCfg) -> Self {
        let zeros = || store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Option<Tensor<f32>>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let p = store.get_mut(id);
            let decay = if p.shape().len() >= 2 { self.weight_decay } else { 0.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gv = gv as f64;
                let mn = self.beta1 * *mv as f64 + (1.0 - self.beta1) * gv;
                let vn = self.beta2 * *vv as f64 + (1.0 - self.beta2) * gv * gv;
                *mv = mn as f32;
                *vv = vn as f32;
                let upd = (mn / bc1) / ((vn / bc2).sqrt() + self.eps);
                let x = *pv as f64;
                *pv = (x - lr * (upd + decay * x)) as f32;
            }
        }
    }
}

/// One batch: per-clip gradients in parallel, summed in clip order and
/// averaged. Returns `(L_c, L_d)` batch means.
pub fn batch_gradients(
    model: &Model,
    store: &ParamStore<f32>,
    batch: &[Clip],
    cfg: &TrainCfg,
) -> Result<(Vec<Option<Tensor<f32>>>, f64, f64)> {
    let per: Vec<(Vec<Option<Tensor<f32>>>, f64, f64)> = batch
        .par_iter()
        .map(|clip| {
            let mut g = Graph::new(store);
            let loss = clip_loss(&mut g, model, clip, cfg)?;
            let lc = g.value(loss.class).data()[0] as f64;
            let ld = g.value(loss.disp).data()[0] as f64;
            let grads = g.backward(loss.total).into_param_grads(store.len());
            Ok((grads, lc, ld))
        })
        .collect::<Result<_>>()?;
    let n = batch.len() as f32;
    let mut sum: Vec<Option<Tensor<f32>>> = vec![None; store.len()];
    let (mut lc, mut ld) = (0.0, 0.0);
    for (grads, c, d) in per {
        lc += c;
        ld += d;
        for (acc, g) in sum.iter_mut().zip(grads) {
            match (acc.as_mut(), g) {
                (Some(a), Some(g)) => a.add_assign(&g),
                (None, Some(g)) => *acc = Some(g),
                _ => {}
            }
        }
    }
    for g in sum.iter_mut().flatten() {
        g.scale_assign(1.0 / n);
    }
    Ok((sum, lc / batch.len() as f64, ld / batch.len() as f64))
}

/// Clips of one epoch, a pure function of `(seed, epoch)`.
pub fn epoch_clips(
    videos: &[SyntheticVideo],
    model: &ModelCfg,
    cfg: &TrainCfg,
    epoch: usize,
) -> Result<Vec<Vec<Clip>>> {
    let l = model.clip_len;
    if videos.is_empty() {
        return Err(Error::Contract("training needs at least one video".into()));
    }
    if let Some(v) = videos.iter().find(|v| v.len() < l) {
        return Err(Error::Contract(format!(
            "video {} has {} frames, shorter than clip length {l}",
            v.video_id,
            v.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(epoch as u64 + 1);
    let mut batches = Vec::with_capacity(cfg.steps_per_epoch());
    let mut left = cfg.clips_per_epoch;
    while left > 0 {
        let n = left.min(cfg.batch_size);
        left -= n;
        let raw: Vec<Clip> = (0..n)
            .map(|_| {
                let v = &videos[rng.random_range(0..videos.len())];
                let start = rng.random_range(0..=v.len() - l);
                let clip = sample_clip(v, start, l, model.radius, model.num_classes)?;
                Ok(augment(&clip, &cfg.augment, &mut rng))
            })
            .collect::<Result<_>>()?;
        let mut batch = Vec::with_capacity(n);
        for i in 0..n {
            let a = &raw[i];
            let use_mix = cfg.augment.enabled && n > 1 && rng.random_bool(cfg.augment.mixup_prob);
            if use_mix {
                let b = &raw[(i + 1) % n];
                batch.push(mixup(a, b, cfg.augment.mixup_alpha, cfg.augment.mixup_beta, &mut rng)?);
            } else {
                batch.push(a.clone());
            }
        }
        batches.push(batch);
    }
    Ok(batches)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss_c: f64,
    pub loss_d: f64,
    pub val_map_d1: Option<f64>,
}

/// Everything needed to continue training bitwise-identically.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub next_epoch: usize,
    pub opt: AdamW,
    pub metrics: Vec<EpochMetrics>,
    pub best_val: Option<f64>,
    pub best_epoch: usize,
    pub best_params: Option<Vec<Tensor<f32>>>,
    pub stopped_early: bool,
}

impl TrainState {
    pub fn new(store: &ParamStore<f32>, cfg: &TrainCfg) -> Self {
        Self {
            next_epoch: 0,
            opt: AdamW::new(store, cfg),
            metrics: Vec::new(),
            best_val: None,
            best_epoch: 0,
            best_params: None,
            stopped_early: false,
        }
    }

    pub fn finished(&self, cfg: &TrainCfg) -> bool {
        self.stopped_early || self.next_epoch >= cfg.epochs
    }
}

/// Validation data plus the inference settings used to score it.
pub struct Validation<'a> {
    pub videos: &'a [SyntheticVideo],
    pub infer: &'a InferCfg,
}

/// Runs one epoch and updates `state`.
pub fn train_epoch(
    model: &Model,
    store: &mut ParamStore<f32>,
    videos: &[SyntheticVideo],
    val: Option<&Validation<'_>>,
    cfg: &TrainCfg,
    state: &mut TrainState,
) -> Result<EpochMetrics> {
    let epoch = state.next_epoch;
    let lr = lr_at(epoch, cfg);
    let batches = epoch_clips(videos, &model.cfg, cfg, epoch)?;
    let (mut lc, mut ld) = (0.0, 0.0);
    for (step, batch) in batches.iter().enumerate() {
        let (grads, c, d) = batch_gradients(model, store, batch, cfg)?;
        if !(c.is_finite() && d.is_finite()) || grads.iter().flatten().any(|g| !g.all_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite loss or gradient at epoch {epoch}, step {step} (L_c={c}, L_d={d}, lr={lr:.3e})"
            )));
        }
        state.opt.step(store, &grads, lr);
        lc += c;
        ld += d;
    }
    let n = batches.len() as f64;
    let val_map_d1 = match val {
        Some(v) => Some(evaluate(model, store, v.videos, v.infer)?.map_d1),
        None => None,
    };
    let m = EpochMetrics {
        epoch,
        lr,
        loss_c: lc / n,
        loss_d: ld / n,
        val_map_d1,
    };
    if let Some(score) = val_map_d1 {
        if state.best_val.is_none_or(|b| score > b) {
            state.best_val = Some(score);
            state.best_epoch = epoch;
            state.best_params = Some(store.iter().map(|(_, t)| t.clone()).collect());
        } else if epoch - state.best_epoch >= cfg.patience {
            state.stopped_early = true;
        }
    }
    state.metrics.push(m.clone());
    state.next_epoch += 1;
    Ok(m)
}

/// Trains to completion (or early stop). With validation, the best
/// parameters are restored at the end. `on_epoch` runs after every epoch
/// (for checkpointing, logging).
pub fn train(
    model: &Model,
    store: &mut ParamStore<f32>,
    videos: &[SyntheticVideo],
    val: Option<&Validation<'_>>,
    cfg: &TrainCfg,
    state: Option<TrainState>,
    on_epoch: &mut dyn FnMut(&TrainState, &ParamStore<f32>) -> Result<()>,
) -> Result<TrainState> {
    cfg.validate()?;
    if cfg.head_mode == HeadMode::Dilation && model.cfg.temporal_module == TemporalModule::SgpPyramid {
        return config_err("dilation head mode is not supported with the pyramid model");
    }
    let mut state = state.unwrap_or_else(|| TrainState::new(store, cfg));
    while !state.finished(cfg) {
        train_epoch(model, store, videos, val, cfg, &mut state)?;
        on_epoch(&state, store)?;
    }
    if let Some(best) = &state.best_params {
        let ids: Vec<_> = store.ids().collect();
        for (id, t) in ids.into_iter().zip(best) {
            *store.get_mut(id) = t.clone();
        }
    }
    Ok(state)
}

/// Metrics log CSV text (`epoch,lr,loss_c,loss_d,val_map_d1`).
pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,lr,loss_c,loss_d,val_map_d1\n");
    for m in metrics {
        let val = m.val_map_d1.map(|v| format!("{v:.6}")).unwrap_or_default();
        s.push_str(&format!("{},{:.6e},{:.6},{:.6},{}\n", m.epoch, m.lr, m.loss_c, m.loss_d, val));
    }
    s
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    model: ModelCfg,
    train: TrainCfg,
    next_epoch: usize,
    adam_t: u64,
    metrics: Vec<EpochMetrics>,
    best_val: Option<f64>,
    best_epoch: usize,
    has_best: bool,
    stopped_early: bool,
}

/// Saves weights, optimizer moments and loop state.
pub fn save_train_state(
    path: &Path,
    model: &Model,
    store: &ParamStore<f32>,
    cfg: &TrainCfg,
    state: &TrainState,
) -> Result<()> {
    let header = StateHeader {
        model: model.cfg.clone(),
        train: cfg.clone(),
        next_epoch: state.next_epoch,
        adam_t: state.opt.t,
        metrics: state.metrics.clone(),
        best_val: state.best_val,
        best_epoch: state.best_epoch,
        has_best: state.best_params.is_some(),
        stopped_early: state.stopped_early,
    };
    let names: Vec<&str> = store.iter().map(|(n, _)| n).collect();
    let mut tensors = param_tensors(store, "");
    for (n, t) in names.iter().zip(&state.opt.m) {
        tensors.push((format!("adam_m:{n}"), t));
    }
    for (n, t) in names.iter().zip(&state.opt.v) {
        tensors.push((format!("adam_v:{n}"), t));
    }
    if let Some(best) = &state.best_params {
        for (n, t) in names.iter().zip(best) {
            tensors.push((format!("best:{n}"), t));
        }
    }
    write_tensors(path, &serde_json::to_value(header)?, &tensors)
}

/// Loads a training state written by [`save_train_state`] into `store`.
pub fn load_train_state(path: &Path, store: &mut ParamStore<f32>, cfg: &TrainCfg) -> Result<(ModelCfg, TrainState)> {
    let (header, tensors) = read_tensors(path)?;
    let h: StateHeader = serde_json::from_value(header)?;
    restore_params(store, &tensors, "")?;
    let section = |prefix: &str, store: &ParamStore<f32>| -> Result<Vec<Tensor<f32>>> {
        let mut tmp = store.clone();
        restore_params(&mut tmp, &tensors, prefix)?;
        Ok(tmp.iter().map(|(_, t)| t.clone()).collect())
    };
    let mut opt = AdamW::new(store, cfg);
    opt.m = section("adam_m:", store)?;
    opt.v = section("adam_v:", store)?;
    opt.t = h.adam_t;
    let best_params = if h.has_best { Some(section("best:", store)?) } else { None };
    Ok((
        h.model,
        TrainState {
            next_epoch: h.next_epoch,
            opt,
            metrics: h.metrics,
            best_val: h.best_val,
            best_epoch: h.best_epoch,
            best_params,
            stopped_early: h.stopped_early,
        },
    ))
}
