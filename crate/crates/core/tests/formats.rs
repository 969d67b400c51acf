use crossfuse::checkpoint::{load_checkpoint, save_checkpoint};
use crossfuse::mmtf::{decode, encode, read_tensor, write_tensor, write_tensor_as, Dtype};
use crossfuse::scene::{gen_dataset, gen_scene, load_dataset, save_dataset, SceneSpec};
use crossfuse::train::evaluate;
use crossfuse::{Error, Model, ModelConfig, ModelParams, Rng, Tensor};
use proptest::prelude::*;
use std::path::Path;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn mmtf_round_trips_every_rank(shape in prop::collection::vec(1usize..4, 0..=6), seed in 0u64..1000, f32_dtype: bool) {
        let t = Rng::new(seed).uniform("t", &shape, 100.0);
        let (t, dtype) = if f32_dtype { (t.map(|v| v as f32 as f64), Dtype::F32) } else { (t, Dtype::F64) };
        let back = decode(&encode(&t, dtype), Path::new("mem")).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert_eq!(back.data(), t.data());
    }

    #[test]
    fn truncation_is_always_reported(shape in prop::collection::vec(1usize..4, 1..=4), cut in 1usize..8) {
        let t = Tensor::ones(shape);
        let bytes = encode(&t, Dtype::F64);
        let short = &bytes[..bytes.len() - cut.min(bytes.len())];
        let truncated = matches!(decode(short, Path::new("mem")), Err(Error::Format { .. }));
        prop_assert!(truncated);
    }
}

#[test]
fn files_round_trip_in_both_dtypes() {
    let dir = tempfile::tempdir().unwrap();
    let t = Tensor::new([2, 3], vec![0.5, -1.25, 3.0, 1e-3, 7.0, -0.0]).unwrap();
    write_tensor(dir.path().join("a.mmtf"), &t).unwrap();
    assert_eq!(read_tensor(dir.path().join("a.mmtf")).unwrap().data(), t.data());
    write_tensor_as(dir.path().join("b.mmtf"), &t, Dtype::F32).unwrap();
    let b = read_tensor(dir.path().join("b.mmtf")).unwrap();
    assert!(b.max_abs_diff(&t) <= 1e-7);
}

#[test]
fn every_class_appears_on_noise_free_scenes() {
    for m in [2usize, 3, 4, 5] {
        let side = (16.0 * m as f64).sqrt().ceil() as usize;
        let spec = SceneSpec { h: side, w: side, classes: m, c1: 2, c2: 2, noise: 0.0 };
        for seed in 0..20u64 {
            let s = gen_scene(seed, &spec).unwrap();
            for c in 0..m {
                assert!(s.labels.contains(&c), "class {c} missing, m={m} seed={seed}");
            }
        }
    }
}

#[test]
fn datasets_round_trip_and_regenerate_identically() {
    let spec = SceneSpec { h: 4, w: 5, classes: 3, c1: 2, c2: 1, noise: 0.1 };
    let ds = gen_dataset(9, &spec, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &ds).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.index, ds.index);
    assert_eq!(back.scenes, ds.scenes);
    assert_eq!(gen_dataset(9, &spec, 3).unwrap().scenes, ds.scenes);
}

#[test]
fn checkpoint_reproduces_an_evaluation_exactly() {
    let cfg = ModelConfig { h: 4, w: 4, d_model: 6, d_state: 2, depth: 1, num_classes: 3, ..ModelConfig::toy() };
    let spec = SceneSpec { h: 4, w: 4, classes: 3, c1: cfg.c1, c2: cfg.c2, noise: 0.1 };
    let scenes = gen_dataset(2, &spec, 4).unwrap().scenes;
    let model = Model::new(cfg.clone()).unwrap();
    let params = ModelParams::init(&cfg).unwrap();
    let before = evaluate(&model, &params, &scenes, None, Some(0.5)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &params, &cfg, None).unwrap();
    let ck = load_checkpoint(dir.path()).unwrap();
    let after = evaluate(&Model::new(ck.config).unwrap(), &ck.params, &scenes, None, Some(0.5)).unwrap();
    assert_eq!(after.confusion, before.confusion);
    assert_eq!(after.metrics.oa.to_bits(), before.metrics.oa.to_bits());
    assert_eq!(after.metrics.aa.to_bits(), before.metrics.aa.to_bits());
    assert_eq!(after.metrics.kappa.to_bits(), before.metrics.kappa.to_bits());
    assert_eq!(after.predictions, before.predictions);
    assert_eq!(after.maps, before.maps);
}
