//! End-to-end runs of the strategies and stream loaders.

use std::path::Path;

use patchcore_cl::feature::{FeatureFile, FeatureGrid, ImageGeometry, Label, StreamManifest, TaskFiles, VectorSet};
use patchcore_cl::harness::{
    generate_synthetic_stream, ingest_bmad_layout, run_stream, write_stream, Strategy, StrategyConfig, SynthConfig,
    TaskStream, BMAD_CATEGORIES, METRICS, METRIC_IMAGE_AUROC, METRIC_PIXEL_F1, METRIC_ROUTING,
};
use patchcore_cl::memory::{build_single_bank, task_seed, MemoryBankSet};
use patchcore_cl::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(n_tasks: usize) -> SynthConfig {
    SynthConfig { n_tasks, train_per_task: 4, test_normal: 4, test_anomalous: 4, ..SynthConfig::default() }
}

#[test]
fn single_task_stream_is_the_same_for_every_strategy() {
    let stream = generate_synthetic_stream(&small(1)).unwrap();
    let outcomes: Vec<_> =
        Strategy::ALL.iter().map(|&s| run_stream(&stream, &StrategyConfig::new(s, 50, 3)).unwrap()).collect();
    for metric in METRICS.iter().filter(|&&m| m != METRIC_ROUTING) {
        let first = outcomes[0].matrix(metric).get(0, 0);
        assert!(first.is_some(), "{metric} missing");
        for o in &outcomes[1..] {
            assert_eq!(o.matrix(metric).get(0, 0), first, "{metric} differs for {}", o.config.strategy);
        }
    }
    let bank = &outcomes[0].banks.banks()[0].vectors;
    assert!(outcomes.iter().all(|o| &o.banks.banks()[0].vectors == bank));
}

#[test]
fn multi_model_and_joint_columns_never_change() {
    let stream = generate_synthetic_stream(&small(4)).unwrap();
    for strategy in [Strategy::MultiModel, Strategy::JointTrain] {
        let outcome = run_stream(&stream, &StrategyConfig::new(strategy, 40, 9)).unwrap();
        for metric in METRICS.iter().filter(|&&m| m != METRIC_ROUTING) {
            let r = outcome.matrix(metric);
            for t in 0..r.tasks() {
                let column: Vec<_> = (t..r.tasks()).map(|k| r.get(k, t)).collect();
                assert!(column.windows(2).all(|w| w[0] == w[1]), "{strategy} {metric} column {t}: {column:?}");
            }
        }
    }
}

#[test]
fn runs_are_deterministic() {
    let stream = generate_synthetic_stream(&small(3)).unwrap();
    for strategy in Strategy::ALL {
        let config = StrategyConfig::new(strategy, 30, 5);
        let a = run_stream(&stream, &config).unwrap();
        let b = run_stream(&stream, &config).unwrap();
        assert_eq!(a.r, b.r, "{strategy}");
        assert_eq!(a.banks, b.banks, "{strategy}");
    }
}

#[test]
fn fine_tuning_keeps_only_the_last_task_bank() {
    let stream = generate_synthetic_stream(&small(3)).unwrap();
    let outcome = run_stream(&stream, &StrategyConfig::new(Strategy::FineTuning, 60, 8)).unwrap();
    let last = &stream.tasks[2];
    let mut pool = VectorSet::empty(stream.dim).unwrap();
    for g in &last.train {
        pool.extend(&g.patches).unwrap();
    }
    let expected = build_single_bank(2, &last.name, &pool, 60, task_seed(8, 2)).unwrap();
    assert_eq!(outcome.banks.banks(), std::slice::from_ref(&expected));
}

#[test]
fn pixel_metrics_cover_only_masked_tasks() {
    let synth = SynthConfig { masked_tasks: 3, ..small(5) };
    let stream = generate_synthetic_stream(&synth).unwrap();
    assert_eq!(stream.pixel_tasks(), vec![0, 1, 2]);
    let outcome = run_stream(&stream, &StrategyConfig::new(Strategy::PatchCoreCl, 50, 1)).unwrap();
    let r = outcome.matrix(METRIC_PIXEL_F1);
    for k in 0..5 {
        for t in 0..=k {
            assert_eq!(r.get(k, t).is_some(), t < 3, "R[{k}][{t}]");
        }
    }
}

#[test]
fn six_tasks_at_thirty_thousand_end_with_six_banks_of_five_thousand() {
    // 470 grids of 64 patches: every task can fill the first quota
    let synth = SynthConfig { n_tasks: 6, dim: 7, train_per_task: 470, test_normal: 1, test_anomalous: 1, ..SynthConfig::default() };
    let stream = generate_synthetic_stream(&synth).unwrap();
    let outcome = run_stream(&stream, &StrategyConfig::new(Strategy::PatchCoreCl, 30_000, 42)).unwrap();
    let sizes: Vec<usize> = outcome.banks.banks().iter().map(|b| b.len()).collect();
    assert_eq!(sizes, vec![5000; 6]);
    assert_eq!(outcome.banks.total_vectors(), 30_000);
    let routing = outcome.matrix(METRIC_ROUTING);
    assert!((0..6).all(|t| routing.get(5, t) == Some(1.0)));
}

#[test]
fn memory_examples_at_thirty_thousand() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut patches = |n: usize| {
        VectorSet::new(2, (0..2 * n).map(|_| rng.random_range(-1000.0f32..1000.0)).collect()).unwrap()
    };
    let pooled = patches(100_000);
    let joint = build_single_bank(0, "joint", &pooled, 30_000, task_seed(42, 0)).unwrap();
    assert_eq!(joint.len(), 30_000);

    let mut set = MemoryBankSet::new(30_000, 2).unwrap();
    set.continual_update("a", &pooled, 0, 42).unwrap();
    assert_eq!(set.banks()[0].vectors, joint.vectors);
    set.continual_update("b", &patches(16_000), 1, 42).unwrap();
    set.continual_update("c", &patches(11_000), 2, 42).unwrap();
    let sizes: Vec<usize> = set.banks().iter().map(|b| b.len()).collect();
    assert_eq!(sizes, vec![10_000; 3]);
    assert_eq!(set.total_vectors(), 30_000);

    let few = patches(500);
    assert_eq!(build_single_bank(0, "few", &few, 30_000, 1).unwrap().vectors, few);
}

#[test]
fn zero_shift_gives_chance_auroc() {
    let synth = SynthConfig {
        n_tasks: 1,
        train_per_task: 10,
        test_normal: 100,
        test_anomalous: 100,
        anomaly_shift: 0.0,
        ..SynthConfig::default()
    };
    let stream = generate_synthetic_stream(&synth).unwrap();
    let outcome = run_stream(&stream, &StrategyConfig::new(Strategy::MultiModel, 200, 42)).unwrap();
    let auroc = outcome.matrix(METRIC_IMAGE_AUROC).get(0, 0).unwrap();
    assert!((auroc - 0.5).abs() <= 0.1, "AUROC {auroc}");
}

#[test]
fn strong_signal_gives_perfect_detection_and_routing() {
    let synth = SynthConfig { anomaly_shift: 50.0, ..small(3) };
    let stream = generate_synthetic_stream(&synth).unwrap();
    let outcome = run_stream(&stream, &StrategyConfig::new(Strategy::PatchCoreCl, 90, 42)).unwrap();
    for t in 0..3 {
        assert_eq!(outcome.matrix(METRIC_IMAGE_AUROC).get(2, t), Some(1.0));
        assert_eq!(outcome.matrix(METRIC_ROUTING).get(2, t), Some(1.0));
    }
}

#[test]
fn synthetic_mask_is_the_shifted_patch_footprint() {
    let synth = SynthConfig { anomaly_shift: 60.0, ..small(2) };
    let stream = generate_synthetic_stream(&synth).unwrap();
    let g = stream.geometry;
    let (ph, pw) = (g.img_h / synth.grid_h, g.img_w / synth.grid_w);
    for (t, task) in stream.tasks.iter().enumerate() {
        let mut center = vec![0f32; synth.dim];
        center[t] = (synth.separation / std::f64::consts::SQRT_2) as f32;
        for grid in task.test.iter().filter(|g| g.label == Label::Anomalous) {
            let mask = grid.mask.as_ref().unwrap();
            let mut expected = vec![0u8; g.pixels()];
            for r in 0..synth.grid_h {
                for c in 0..synth.grid_w {
                    let d: f32 = grid.patch(r, c).iter().zip(&center).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d.sqrt() > 30.0 {
                        for y in r * ph..(r + 1) * ph {
                            expected[y * g.img_w + c * pw..y * g.img_w + (c + 1) * pw].fill(1);
                        }
                    }
                }
            }
            assert!(expected.contains(&1));
            assert_eq!(mask, &expected, "image {}", grid.image_id);
        }
        for grid in task.test.iter().filter(|g| g.label == Label::Normal) {
            assert!(grid.mask.as_ref().unwrap().iter().all(|&m| m == 0));
        }
    }
}

#[test]
fn synthetic_stream_rejects_bad_parameters() {
    for bad in [
        SynthConfig { separation: 0.0, ..SynthConfig::default() },
        SynthConfig { separation: -1.0, ..SynthConfig::default() },
        SynthConfig { dim: 3, n_tasks: 3, ..SynthConfig::default() },
    ] {
        assert!(matches!(generate_synthetic_stream(&bad), Err(Error::InvalidParameter(_))));
    }
}

#[test]
fn streams_survive_a_write_and_load() {
    let stream = generate_synthetic_stream(&small(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_stream(&stream, dir.path()).unwrap();
    assert_eq!(TaskStream::load(&manifest).unwrap(), stream);
}

#[test]
fn budget_smaller_than_task_count_is_rejected() {
    let stream = generate_synthetic_stream(&small(6)).unwrap();
    for strategy in Strategy::ALL {
        let err = run_stream(&stream, &StrategyConfig::new(strategy, 5, 1)).unwrap_err();
        assert!(matches!(err, Error::InvalidParameter(_)), "{strategy}: {err}");
    }
}

fn grid(id: u64, label: Label) -> FeatureGrid {
    FeatureGrid::new(id, 1, 1, label, VectorSet::new(2, vec![id as f32, 1.0]).unwrap()).unwrap()
}

/// Writes one train and one test file per category and returns the manifest.
fn write_layout(dir: &Path, names: &[&str], train_len: usize, leak_into: Option<&str>) -> StreamManifest {
    let geometry = ImageGeometry::new(4, 4).unwrap();
    let mut tasks = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let base = (i as u64) << 20;
        let mut train: Vec<FeatureGrid> = (0..train_len as u64).map(|j| grid(base + j, Label::Normal)).collect();
        if leak_into == Some(*name) {
            train.push(grid(base + 999_999, Label::Anomalous));
        }
        let test = vec![grid(base + 500_000, Label::Normal), grid(base + 500_001, Label::Anomalous)];
        for (suffix, grids) in [("train", train), ("test", test)] {
            let file = FeatureFile::new(geometry, 1, 1, 2, grids).unwrap();
            patchcore_cl::feature::write_feature_file(dir.join(format!("{name}_{suffix}.clvf")), &file).unwrap();
        }
        tasks.push(TaskFiles {
            name: name.to_string(),
            train: vec![format!("{name}_train.clvf").into()],
            test: vec![format!("{name}_test.clvf").into()],
        });
    }
    StreamManifest { tasks }
}

#[test]
fn bmad_layout_is_read_in_category_order() {
    let dir = tempfile::tempdir().unwrap();
    let mut shuffled = BMAD_CATEGORIES.to_vec();
    shuffled.reverse();
    shuffled.swap(0, 2);
    let manifest = write_layout(dir.path(), &shuffled, 3, None);
    let stream = ingest_bmad_layout(dir.path(), &manifest, 2000).unwrap();
    assert_eq!(stream.task_names(), BMAD_CATEGORIES.to_vec());
    assert!(stream.tasks.iter().all(|t| t.train.len() == 3 && t.test.len() == 2));
}

#[test]
fn bmad_training_sets_are_truncated_to_the_cap() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_layout(dir.path(), &BMAD_CATEGORIES, 5000, None);
    let stream = ingest_bmad_layout(dir.path(), &manifest, 2000).unwrap();
    assert!(stream.tasks.iter().all(|t| t.train.len() == 2000));
    // the first 2000 in file order are kept
    assert_eq!(stream.tasks[1].train[1999].image_id, (1 << 20) + 1999);
}

#[test]
fn bmad_rejects_leakage_and_missing_categories() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_layout(dir.path(), &BMAD_CATEGORIES, 3, Some("Chest_AD"));
    assert!(matches!(
        ingest_bmad_layout(dir.path(), &manifest, 2000),
        Err(Error::LabelLeakage { task, .. }) if task == "Chest_AD"
    ));

    let dir = tempfile::tempdir().unwrap();
    let manifest = write_layout(dir.path(), &BMAD_CATEGORIES[..5], 3, None);
    assert!(matches!(
        ingest_bmad_layout(dir.path(), &manifest, 2000),
        Err(Error::MissingCategory(name)) if name == "Retina_OCT2017_AD"
    ));

    let dir = tempfile::tempdir().unwrap();
    let manifest = write_layout(dir.path(), &BMAD_CATEGORIES, 3, None);
    std::fs::remove_file(dir.path().join("Liver_AD_test.clvf")).unwrap();
    assert!(matches!(ingest_bmad_layout(dir.path(), &manifest, 2000), Err(Error::MissingCategory(_))));
}
