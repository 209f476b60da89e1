//! End-to-end flows across modules: scoring clips with a slot model, fusing
//! several models, optimizing fusion weights against validation labels, and
//! carrying everything through the on-disk formats.

use atomfuse_core::dataset::{
    align, load_labels, load_scores, read_report, write_labels, write_report, write_scores,
    LabelMatrix,
};
use atomfuse_core::fusion::{
    fuse, normalize_scores, optimize_weights, read_weights, write_weights, NormalizationMode,
};
use atomfuse_core::metrics::evaluate;
use atomfuse_core::sampling::{plan_fixed, plan_jitter};
use atomfuse_core::slotattn::{
    load_features, load_model, save_features, save_model, score_clips, FeatureTensor,
    SlotModelParams, SlotModelParts,
};
use atomfuse_core::taxonomy::{AgentGroup, ClassDef, Taxonomy};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vec1(rng: &mut ChaCha8Rng, len: usize) -> Array1<f64> {
    Array1::from_shape_fn(len, |_| rng.random_range(-1.0f32..1.0) as f64)
}

fn vec2(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0f32..1.0) as f64)
}

fn random_model(rng: &mut ChaCha8Rng, num_classes: usize) -> SlotModelParams {
    let (num_slots, slot_dim, input_dim) = (num_classes + 1, 6, 8);
    let mut gamma = vec1(rng, slot_dim);
    gamma.mapv_inplace(|g| g + 1.5);
    SlotModelParams::from_parts(SlotModelParts {
        iterations: 3,
        num_classes,
        input_w: vec2(rng, slot_dim, input_dim),
        input_b: vec1(rng, slot_dim),
        key_w: vec2(rng, slot_dim, slot_dim),
        query_w: vec2(rng, slot_dim, slot_dim),
        value_w: vec2(rng, slot_dim, slot_dim),
        slots_init: vec2(rng, num_slots, slot_dim),
        norm_gamma: gamma,
        norm_beta: vec1(rng, slot_dim),
        gru_w_ih: vec2(rng, 3 * slot_dim, slot_dim),
        gru_w_hh: vec2(rng, 3 * slot_dim, slot_dim),
        gru_b_ih: vec1(rng, 3 * slot_dim),
        gru_b_hh: vec1(rng, 3 * slot_dim),
        readout_w: vec2(rng, num_slots, slot_dim),
        readout_b: vec1(rng, num_slots),
    })
    .unwrap()
}

fn taxonomy() -> Taxonomy {
    Taxonomy::new(
        vec![AgentGroup::new("C", "cars"), AgentGroup::new("P", "people")],
        vec![
            ClassDef::new(0, "c_left", "C"),
            ClassDef::new(1, "c_right", "C"),
            ClassDef::new(2, "p_cross", "P"),
        ],
    )
    .unwrap()
}

#[test]
fn slot_models_to_weighted_ensemble_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let taxonomy = taxonomy();
    let class_names: Vec<&str> = taxonomy.class_names().collect();

    // Two slot models score the same eight clips, saved and reloaded
    // through their archives on the way.
    let clips: Vec<(String, FeatureTensor)> = (0..8)
        .map(|i| {
            let features = FeatureTensor::new(vec2(&mut rng, 10, 8)).unwrap();
            (format!("clip{i:02}"), features)
        })
        .collect();
    let feature_path = dir.path().join("clip00.atsl");
    save_features(&clips[0].1, &feature_path).unwrap();
    assert_eq!(load_features(&feature_path).unwrap(), clips[0].1);

    let mut matrices = Vec::new();
    for name in ["alpha", "beta"] {
        let model = random_model(&mut rng, 3);
        let model_path = dir.path().join(format!("{name}.atsl"));
        save_model(&model, &model_path).unwrap();
        let model = load_model(&model_path).unwrap();
        matrices.push(score_clips(name, &clips, &model, &taxonomy).unwrap());
    }

    // Ground-truth labels, round-tripped through CSV like a real run.
    let mut label_values = Array2::from_shape_fn((8, 3), |_| u8::from(rng.random_bool(0.4)));
    label_values[(0, 0)] = 1;
    label_values[(1, 2)] = 1;
    let labels = LabelMatrix::new(
        clips.iter().map(|(id, _)| id.clone()).collect(),
        label_values,
    )
    .unwrap();
    let labels_path = dir.path().join("labels.csv");
    write_labels(&labels, &class_names, &labels_path).unwrap();
    let labels = load_labels(&labels_path, &taxonomy).unwrap();

    // Scores round-trip through CSV as well, then align to label order.
    let mut loaded = Vec::new();
    for scores in &matrices {
        let path = dir.path().join(format!("{}.csv", scores.model_id()));
        write_scores(scores, &class_names, &path).unwrap();
        loaded.push(load_scores(&path, &taxonomy, scores.model_id()).unwrap());
    }
    let (scores, labels) = align(loaded, labels).unwrap();
    for (original, reloaded) in matrices.iter().zip(&scores) {
        assert_eq!(original, reloaded);
    }

    // Optimize ensemble weights, persist them, fuse with the reloaded copy.
    let (weights, val_map) = optimize_weights(&scores, &labels, &taxonomy, 0.1, 3).unwrap();
    let weights_path = dir.path().join("weights.json");
    write_weights(&weights, val_map, &weights_path).unwrap();
    let (weights, stored_map) = read_weights(&weights_path).unwrap();
    assert_eq!(stored_map.to_bits(), val_map.to_bits());

    let fused = fuse(&scores, &weights).unwrap();
    let fused_map = evaluate(&fused, &labels, &taxonomy).unwrap().map;
    assert_eq!(fused_map.to_bits(), val_map.to_bits());
    for single in &scores {
        assert!(fused_map >= evaluate(single, &labels, &taxonomy).unwrap().map);
    }

    // Ship the final report with the sampling plans that produced the clips.
    let mut report = evaluate(&fused, &labels, &taxonomy).unwrap();
    report.sampling = Some(vec![
        plan_fixed(300, 16).unwrap(),
        plan_jitter(300, 16, 1234).unwrap(),
    ]);
    let report_path = dir.path().join("report.json");
    write_report(&report, &report_path).unwrap();
    let reloaded = read_report(&report_path).unwrap();
    assert_eq!(reloaded.map.to_bits(), report.map.to_bits());
    assert_eq!(reloaded.map_per_group, report.map_per_group);
    assert_eq!(reloaded.sampling, report.sampling);
}

#[test]
fn normalization_modes_compose_with_fusion_and_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let taxonomy = taxonomy();
    let clip_ids: Vec<String> = (0..6).map(|i| format!("clip{i}")).collect();

    // One model on a wildly different score scale.
    let hot = atomfuse_core::dataset::ScoreMatrix::new(
        "hot",
        clip_ids.clone(),
        Array2::from_shape_fn((6, 3), |_| rng.random_range(0.0..1e6)),
    )
    .unwrap();
    let cold = atomfuse_core::dataset::ScoreMatrix::new(
        "cold",
        clip_ids.clone(),
        Array2::from_shape_fn((6, 3), |_| rng.random_range(0.0..1.0)),
    )
    .unwrap();
    let mut label_values = Array2::from_shape_fn((6, 3), |_| u8::from(rng.random_bool(0.5)));
    label_values[(0, 0)] = 1;
    let labels = LabelMatrix::new(clip_ids, label_values).unwrap();

    for mode in [
        NormalizationMode::None,
        NormalizationMode::MinMaxPerClass,
        NormalizationMode::ZScorePerClass,
    ] {
        let normalized = [normalize_scores(&hot, mode), normalize_scores(&cold, mode)];
        let (weights, best) =
            optimize_weights(&normalized, &labels, &taxonomy, 0.25, 2).unwrap();
        let fused = fuse(&normalized, &weights).unwrap();
        let report = evaluate(&fused, &labels, &taxonomy).unwrap();
        assert_eq!(report.map.to_bits(), best.to_bits());
        assert!(report.map >= 0.0 && report.map <= 1.0);
    }
}
