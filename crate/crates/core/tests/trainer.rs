use candle_core::DType;
use edge_depth::backbone::EncoderConfig;
use edge_depth::data::{generate_synthetic_sequence, SampleTriplet, SceneSpec};
use edge_depth::trainer::{
    split_indices, stage1_trainer, stage2_trainer, train_single_stage_with_teacher, train_stage1, AblationFlags,
    Checkpoint, CheckpointKind, DepthModel, ExperimentConfig, Teacher, Trainer,
};

fn data(frames: usize) -> Vec<SampleTriplet> {
    generate_synthetic_sequence(&SceneSpec::corner_with_box(32, 32, frames, 5)).unwrap().triplets()
}

fn cfg(steps: usize) -> ExperimentConfig {
    ExperimentConfig {
        learning_rate: 1e-3,
        batch_size: 2,
        max_steps: Some(steps),
        validation_fraction: 0.2,
        eval_every: 2,
        ..Default::default()
    }
}

fn stage1_checkpoint(d: &[SampleTriplet], steps: usize) -> Checkpoint {
    train_stage1(&cfg(steps), d).unwrap().last
}

fn stage2_cfg(steps: usize) -> ExperimentConfig {
    ExperimentConfig { stage: 2, ..cfg(steps) }
}

#[test]
fn identical_runs_are_bit_identical() {
    let d = data(6);
    let a = train_stage1(&cfg(4), &d).unwrap();
    let b = train_stage1(&cfg(4), &d).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.last.to_bytes().unwrap(), b.last.to_bytes().unwrap());
    assert_eq!(a.best.to_bytes().unwrap(), b.best.to_bytes().unwrap());
}

#[test]
fn checkpoint_round_trip_resumes_bit_identically() {
    let d = data(6);
    let mut t = stage1_trainer(&cfg(10), &d, None).unwrap();
    for _ in 0..3 {
        t.train_step().unwrap();
    }
    let ck = t.checkpoint().unwrap();
    let bytes = ck.to_bytes().unwrap();
    let loaded = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(loaded.to_bytes().unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.safetensors");
    ck.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);

    let mut resumed = Trainer::resume(&Checkpoint::load(&path).unwrap(), &d, None).unwrap();
    assert_eq!(resumed.step(), 3);
    assert_eq!(resumed.current_batch(), t.current_batch());
    for _ in 0..2 {
        let a = t.train_step().unwrap();
        let b = resumed.train_step().unwrap();
        assert_eq!(a, b);
    }
    assert_eq!(t.checkpoint().unwrap().to_bytes().unwrap(), resumed.checkpoint().unwrap().to_bytes().unwrap());
}

#[test]
fn one_tiny_step_does_not_increase_the_batch_loss() {
    let d = data(6);
    let c = ExperimentConfig { learning_rate: 1e-6, ..cfg(1) };
    let mut t = stage1_trainer(&c, &d, None).unwrap();
    let idx = t.current_batch();
    let before = t.batch_loss(&idx).unwrap().total;
    t.train_step().unwrap();
    let after = t.batch_loss(&idx).unwrap().total;
    assert!(after <= before + 1e-6, "{before} -> {after}");
}

#[test]
fn logged_totals_recombine_and_stay_finite() {
    let d = data(6);
    let c = cfg(4);
    let out = train_stage1(&c, &d).unwrap();
    for r in &out.log {
        assert!((r.total - r.bundle().recombine(&c.loss)).abs() < 1e-7);
        assert!((r.total - r.total_graph).abs() < 1e-5 * r.total.max(1.0));
        assert!(r.bnd.is_some() && r.sem.is_none());
        assert_eq!(r.lr, c.learning_rate);
    }
}

#[test]
fn split_is_seeded_and_keeps_a_training_frame() {
    let (tr, va) = split_indices(20, 0.1, 3);
    assert_eq!((tr.len(), va.len()), (18, 2));
    assert_eq!(split_indices(20, 0.1, 3), (tr.clone(), va));
    let (tr1, va1) = split_indices(1, 0.5, 0);
    assert_eq!((tr1.len(), va1.len()), (1, 0));
    let mut all: Vec<usize> = tr.into_iter().chain(split_indices(20, 0.1, 3).1).collect();
    all.sort();
    assert_eq!(all, (0..20).collect::<Vec<_>>());
}

#[test]
fn boundary_term_is_skipped_without_weight_or_pseudo_depth() {
    let d = data(4);
    let c = ExperimentConfig {
        loss: edge_depth::losses::LossWeights { gamma: 0.0, ..Default::default() },
        ..cfg(1)
    };
    let r = &train_stage1(&c, &d).unwrap().log[0];
    assert!(r.bnd.is_none() && r.bnd_skipped.is_some());

    let no_pd: Vec<SampleTriplet> = d.iter().cloned().map(|t| SampleTriplet { pseudo_depth: None, ..t }).collect();
    let r = &train_stage1(&cfg(1), &no_pd).unwrap().log[0];
    assert!(r.bnd.is_none());
    assert!(r.bnd_skipped.as_deref().unwrap().contains("pseudo"));
}

#[test]
fn stage2_with_the_student_as_teacher_starts_at_zero_semantic_loss() {
    let d = data(6);
    let ck = stage1_checkpoint(&d, 2);
    let c2 = stage2_cfg(3);
    let student = DepthModel::with_weights(&c2, &ck.weights, DType::F32).unwrap();
    let teacher = Teacher::from_student(&student).unwrap();
    assert!(teacher.is_frozen());
    let digest = teacher.digest().unwrap();
    let mut t = stage2_trainer(&c2, &ck, teacher, &d).unwrap();
    let first = t.batch_loss(&t.current_batch()).unwrap();
    assert!(first.sem.unwrap().abs() < 1e-6, "initial L_sem {:?}", first.sem);
    let out = t.run().unwrap();
    for r in &out.log {
        let s = r.sem.expect("semantic term in stage 2");
        assert!((0.0..=2.0).contains(&s));
        assert!((r.total - r.bundle().recombine(&c2.loss)).abs() < 1e-7);
    }
    assert_eq!(t.teacher().unwrap().digest().unwrap(), digest);
    assert_eq!(out.last.meta.stage, 2);
    assert_eq!(out.last.meta.kind, CheckpointKind::Depth);
}

#[test]
fn teacher_output_is_constant_across_training() {
    let d = data(6);
    let ck = stage1_checkpoint(&d, 1);
    let c2 = stage2_cfg(2);
    let teacher = Teacher::from_student(&DepthModel::with_weights(&c2, &ck.weights, DType::F32).unwrap()).unwrap();
    let x = d[0].target.to_tensor(DType::F32).unwrap();
    let before: Vec<Vec<f32>> =
        teacher.encode(&x).unwrap().levels.iter().map(|l| l.flatten_all().unwrap().to_vec1().unwrap()).collect();
    let mut t = stage2_trainer(&c2, &ck, teacher, &d).unwrap();
    t.run().unwrap();
    let after: Vec<Vec<f32>> = t
        .teacher()
        .unwrap()
        .encode(&x)
        .unwrap()
        .levels
        .iter()
        .map(|l| l.flatten_all().unwrap().to_vec1().unwrap())
        .collect();
    assert_eq!(before, after);
}

#[test]
fn incompatible_teacher_is_rejected_before_training() {
    let d = data(4);
    let ck = stage1_checkpoint(&d, 1);
    let mut enc = EncoderConfig::toy();
    enc.stage_channels[4] += 8;
    let other = DepthModel::new(&ExperimentConfig { encoder: enc, ..cfg(1) }, DType::F32).unwrap();
    let teacher = Teacher::from_student(&other).unwrap();
    assert!(stage2_trainer(&stage2_cfg(1), &ck, teacher, &d).is_err());
}

#[test]
fn stage_preconditions_are_enforced() {
    let d = data(4);
    assert!(stage1_trainer(&stage2_cfg(1), &d, None).is_err());
    assert!(Trainer::new(&stage2_cfg(1), &d, None).is_err(), "stage 2 without a teacher");
    let ck = stage1_checkpoint(&d, 1);
    let teacher = || Teacher::from_student(&DepthModel::new(&cfg(1), DType::F32).unwrap()).unwrap();
    assert!(stage2_trainer(&cfg(1), &ck, teacher(), &d).is_err());
    let s2 = edge_depth::trainer::train_stage2(&stage2_cfg(1), &ck, teacher(), &d).unwrap();
    assert!(stage2_trainer(&stage2_cfg(1), &s2.last, teacher(), &d).is_err(), "stage 2 from a stage-2 checkpoint");
    assert!(train_stage1(&cfg(1), &[]).is_err());
}

#[test]
fn semantic_loss_in_stage1_ablation_trains_one_stage() {
    let d = data(4);
    let c = ExperimentConfig {
        ablation: AblationFlags { semantic_loss_in_stage1: true, ..Default::default() },
        ..cfg(2)
    };
    let teacher = Teacher::from_student(&DepthModel::new(&c, DType::F32).unwrap()).unwrap();
    let out = train_single_stage_with_teacher(&c, &d, teacher).unwrap();
    assert!(out.log.iter().all(|r| r.stage == 1 && r.sem.is_some()));
}

#[test]
fn joint_semantic_decoder_ablation_logs_cross_entropy() {
    let d = data(4);
    let c = ExperimentConfig {
        ablation: AblationFlags { joint_semantic_decoder: true, ..Default::default() },
        ..cfg(2)
    };
    let out = train_stage1(&c, &d).unwrap();
    assert!(out.log.iter().all(|r| r.sem.is_some_and(|s| s > 0.0)));
    let m = DepthModel::with_weights(&c, &out.last.weights, DType::F32).unwrap();
    assert!(m.param_table().seg_head > 0);
}

#[test]
fn best_checkpoint_tracks_the_lowest_validation_error() {
    let d = data(6);
    let out = train_stage1(&cfg(4), &d).unwrap();
    let best = out.best_val_abs_rel.expect("validation ran");
    assert_eq!(out.best.meta.best_val_abs_rel, Some(best));
    assert!(out.best.meta.step <= out.last.meta.step);
}
