use tdeed::backbone::BackboneCfg;
use tdeed::checkpoint::{load_model, save_model};
use tdeed::data::{generate_dataset, load_annotations, load_frames, save_annotations, save_frames, AugmentCfg, FrameEncoding, GeneratorSpec};
use tdeed::eval::{evaluate, map_at, spot_all};
use tdeed::infer::{clip_frames, predict_clip, stitch, InferCfg};
use tdeed::model::{Model, ModelCfg, TemporalModule};
use tdeed::params::ParamStore;
use tdeed::sgp::SgpCfg;
use tdeed::train::{train, TrainCfg};

fn spec() -> GeneratorSpec {
    GeneratorSpec {
        num_videos: 3,
        video_length: 160,
        height: 16,
        width: 16,
        clip_length: 40,
        seed: 4,
        ..GeneratorSpec::default()
    }
}

fn model_cfg(module: TemporalModule) -> ModelCfg {
    ModelCfg {
        clip_len: 40,
        temporal_module: module,
        sgp: SgpCfg { d: 16, ks: 3, r: 2, ..SgpCfg::default() },
        backbone: BackboneCfg { d: 16, ..BackboneCfg::default() },
        ..ModelCfg::default()
    }
}

fn train_cfg() -> TrainCfg {
    TrainCfg {
        epochs: 2,
        warmup_epochs: 1,
        clips_per_epoch: 8,
        batch_size: 4,
        augment: AugmentCfg::all_off(),
        ..TrainCfg::default()
    }
}

#[test]
fn dataset_files_round_trip() {
    let videos = generate_dataset(&spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (f, a) = (dir.path().join("v.bin"), dir.path().join("v.json"));
    save_frames(&f, &videos, FrameEncoding::F32).unwrap();
    save_annotations(&a, &videos).unwrap();
    let back = load_frames(&f, Some(&load_annotations(&a).unwrap())).unwrap();
    assert_eq!(back, videos);

    save_frames(&f, &videos, FrameEncoding::U8).unwrap();
    let q = load_frames(&f, Some(&load_annotations(&a).unwrap())).unwrap();
    for (x, y) in q.iter().zip(&videos) {
        assert_eq!(x.events, y.events);
        assert!(x.frames.iter().zip(&y.frames).all(|(p, r)| (p - r).abs() <= 0.5 / 255.0 + 1e-6));
    }
}

#[test]
fn train_checkpoint_evaluate() {
    let videos = generate_dataset(&spec()).unwrap();
    for module in [TemporalModule::SgpEd, TemporalModule::SgpPyramid] {
        let mut store = ParamStore::new();
        let model = Model::new(&model_cfg(module), &mut store).unwrap();
        let mut epochs = 0;
        let state = train(&model, &mut store, &videos, None, &train_cfg(), None, &mut |_, _| {
            epochs += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!((epochs, state.metrics.len()), (2, 2));
        assert!(state.metrics.iter().all(|m| m.loss_c.is_finite() && m.loss_d.is_finite()));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_model(&path, &model, &store).unwrap();
        let (model2, store2) = load_model(&path).unwrap();
        assert_eq!(model2.cfg, model.cfg);
        let infer = InferCfg::default();
        let a = evaluate(&model, &store, &videos, &infer).unwrap();
        let b = evaluate(&model2, &store2, &videos, &infer).unwrap();
        assert_eq!(a, b);
        assert!(a.map_d2 >= a.map_d1);
    }
}

#[test]
fn stitching_a_single_clip_is_one_forward_pass() {
    let mut s = spec();
    s.video_length = 40;
    s.clip_length = 10;
    let videos = generate_dataset(&s).unwrap();
    let mut store = ParamStore::new();
    let model = Model::new(&model_cfg(TemporalModule::SgpEd), &mut store).unwrap();
    let v = &videos[0];
    let (stitched, warn) = stitch(&model, &store, v, 0.5).unwrap();
    assert!(warn.is_none());
    let single = predict_clip(&model, &store, &clip_frames(v, 0, 40), v.height, v.width).unwrap();
    assert_eq!(stitched.class_probs, single[0].class_probs);
    assert_eq!(stitched.displacements, single[0].displacements);
}

#[test]
fn spotted_events_respect_the_video() {
    let videos = generate_dataset(&spec()).unwrap();
    let mut store = ParamStore::new();
    let model = Model::new(&model_cfg(TemporalModule::SgpEd), &mut store).unwrap();
    let events = spot_all(&model, &store, &videos, &InferCfg::default()).unwrap();
    for e in &events {
        let v = videos.iter().find(|v| v.video_id == e.video_id).unwrap();
        assert!(e.frame < v.len());
        assert!((1..=4).contains(&e.class_id));
        assert!(e.score >= InferCfg::default().final_threshold);
    }
    let gts: Vec<_> = videos.iter().flat_map(|v| v.events.clone()).collect();
    let m = map_at(&events, &gts, 4, 1);
    assert!((0.0..=1.0).contains(&m));
}
