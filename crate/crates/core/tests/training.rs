mod common;

use cmml_core::backbone::{Availability, Backbone};
use cmml_core::bench::{generate_benchmark, BenchmarkSpec};
use cmml_core::checkpoint::{load_checkpoint, save_checkpoint};
use cmml_core::config::{ExperimentConfig, Variant};
use cmml_core::experiment::{run_on_benchmark, write_outputs, MATRIX_FILE, RESULT_FILE};
use cmml_core::memory::TaskBundle;
use cmml_core::model::{evaluate_all, frozen_logits, train_task, CmmlModel, RoutingLog, TrainOptions};
use cmml_core::tensor::Tensor;
use cmml_core::Error;
use common::*;

fn frozen_backbone_values(b: &Backbone) -> Vec<Tensor> {
    b.frozen_params().into_iter().map(|p| p.value().clone()).collect()
}

#[test]
fn fresh_bundles_leave_logits_unchanged() {
    let cfg = ExperimentConfig::default();
    let bench = generate_benchmark(&cfg.benchmark, &cfg.backbone).unwrap();
    for variant in Variant::ALL {
        let mut c = cfg.clone();
        c.adapters.variant = variant;
        let mut model = CmmlModel::new(&c).unwrap();
        let mut r = rng(1);
        let bundle = TaskBundle::init(1, 4, variant.adapter_kind(), &c.backbone, 16, 4, &mut r).unwrap();
        model.registry.register_task(bundle).unwrap();
        let mut seen = [false; 3];
        for s in bench.tasks[0].test.iter().chain(&bench.tasks[1].test) {
            let (adapted, _) = model.logits_for(s, 1).unwrap();
            let frozen = frozen_logits(&model, s, 1).unwrap();
            assert_eq!(adapted, frozen.data(), "{variant:?}");
            let idx = match s.availability().unwrap() {
                Availability::Complete => 0,
                Availability::ImageOnly => 1,
                Availability::TextOnly => 2,
            };
            seen[idx] = true;
        }
        assert!(seen.iter().all(|&x| x));
    }
}

#[test]
fn earlier_bundles_and_backbone_stay_bit_identical() {
    let cfg = small_config(3);
    let bench = generate_benchmark(&cfg.benchmark, &cfg.backbone).unwrap();
    let mut model = CmmlModel::new(&cfg).unwrap();
    let backbone_before = frozen_backbone_values(&model.backbone);
    let mut r = rng(2);
    let mut log = RoutingLog::default();
    let mut snapshots = Vec::new();
    let mut logits = Vec::new();
    for task in &bench.tasks {
        let train_log = train_task(&mut model, task, &cfg, &mut r, &mut log, TrainOptions::default()).unwrap();
        assert!(train_log.steps > 0);
        let bundle = model.registry.bundle(task.task_id).unwrap();
        assert!(bundle.is_frozen());
        snapshots.push(bundle.snapshot());
        logits.push(task.test.iter().map(|s| model.logits_for(s, task.task_id).unwrap().0).collect::<Vec<_>>());
        for (i, snap) in snapshots.iter().enumerate() {
            assert_eq!(&model.registry.bundles()[i].snapshot(), snap, "bundle {} moved", i + 1);
        }
    }
    assert_eq!(frozen_backbone_values(&model.backbone), backbone_before);
    for (task, before) in bench.tasks.iter().zip(&logits) {
        let after: Vec<Vec<f64>> = task.test.iter().map(|s| model.logits_for(s, task.task_id).unwrap().0).collect();
        assert_eq!(&after, before);
    }
}

#[test]
fn training_an_active_bundle_changes_it() {
    let cfg = small_config(1);
    let bench = generate_benchmark(&cfg.benchmark, &cfg.backbone).unwrap();
    let mut model = CmmlModel::new(&cfg).unwrap();
    let mut r = rng(3);
    let mut log = RoutingLog::default();
    let log1 = train_task(&mut model, &bench.tasks[0], &cfg, &mut r, &mut log, TrainOptions::default()).unwrap();
    let first = log1.epoch_mean_loss[0];
    let last = *log1.epoch_mean_loss.last().unwrap();
    assert!(last < first, "loss did not decrease: {:?}", log1.epoch_mean_loss);
    let mut fresh = rng(3);
    let init = TaskBundle::init(1, 4, Variant::Full.adapter_kind(), &cfg.backbone, 16, 4, &mut fresh).unwrap();
    assert_ne!(init.snapshot(), model.registry.bundles()[0].snapshot());
}

#[test]
fn checkpoint_reload_reproduces_logits() {
    let cfg = small_config(2);
    let bench = generate_benchmark(&cfg.benchmark, &cfg.backbone).unwrap();
    let run = run_on_benchmark(&cfg, bench.clone(), TrainOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&run.model, &cfg, dir.path()).unwrap();
    let (loaded, loaded_cfg) = load_checkpoint(dir.path(), Some(&cfg)).unwrap();
    assert_eq!(loaded_cfg, cfg);
    assert_eq!(loaded.keys, run.model.keys);
    for task in &bench.tasks {
        for s in &task.test {
            assert_eq!(loaded.logits_for(s, task.task_id).unwrap(), run.model.logits_for(s, task.task_id).unwrap());
            assert_eq!(loaded.predict_task(s).unwrap(), run.model.predict_task(s).unwrap());
        }
    }
    let other = cfg.clone().with_seed(9);
    assert!(matches!(load_checkpoint(dir.path(), Some(&other)), Err(Error::CheckpointMismatch(_))));
}

fn without_clock(json: &str) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(json).unwrap();
    v.as_object_mut().unwrap().remove("wall_clock_seconds");
    v
}

#[test]
fn identical_runs_write_identical_artifacts() {
    let cfg = small_config(2);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let bench = generate_benchmark(&cfg.benchmark, &cfg.backbone).unwrap();
        let run = run_on_benchmark(&cfg, bench, TrainOptions::default()).unwrap();
        write_outputs(&run, d.path()).unwrap();
    }
    let read = |d: &tempfile::TempDir, f: &str| std::fs::read(d.path().join(f)).unwrap();
    for f in [MATRIX_FILE, "oracle_matrix.csv", "routing_log.json", "keys.json", "checkpoint/manifest.json", "checkpoint/task_1.json", "checkpoint/task_2.json"] {
        assert_eq!(read(&dirs[0], f), read(&dirs[1], f), "{f} differs");
    }
    let r0 = String::from_utf8(read(&dirs[0], RESULT_FILE)).unwrap();
    let r1 = String::from_utf8(read(&dirs[1], RESULT_FILE)).unwrap();
    assert_eq!(without_clock(&r0), without_clock(&r1));
}

/// Evaluating zero-weight auxiliary terms must not perturb training.
#[test]
fn zero_weight_terms_do_not_change_trajectory() {
    let mut cfg = small_config(2);
    cfg.loss.lambda1 = 0.0;
    cfg.loss.lambda2 = 0.0;
    let bench = generate_benchmark(&cfg.benchmark, &cfg.backbone).unwrap();
    let plain = run_on_benchmark(&cfg, bench.clone(), TrainOptions::default()).unwrap();
    let eager = run_on_benchmark(
        &cfg,
        bench,
        TrainOptions {
            compute_unweighted_aux: true,
        },
    )
    .unwrap();
    assert_eq!(plain.result.matrix, eager.result.matrix);
    assert_eq!(plain.result.training, eager.result.training);
    for (a, b) in plain.model.registry.bundles().iter().zip(eager.model.registry.bundles()) {
        assert_eq!(a.snapshot(), b.snapshot());
    }
    assert_eq!(plain.model.keys, eager.model.keys);
}

#[test]
fn five_task_run_properties() {
    let cfg = small_config(5);
    let bench = generate_benchmark(&cfg.benchmark, &cfg.backbone).unwrap();
    let run = run_on_benchmark(&cfg, bench, TrainOptions::default()).unwrap();
    let t = 5;
    let (m, o) = (&run.result.matrix, &run.result.oracle_matrix);
    for i in 0..t {
        for j in i..t {
            // Frozen bundles: oracle scores never move after their own task.
            assert_eq!(o.get(i, j), o.get(i, i), "oracle a[{i}][{j}]");
            assert!(o.get(i, j).unwrap() >= m.get(i, j).unwrap() - 1e-12);
        }
    }
    for p in &run.routing_log.pools {
        let per = p.selected_per_forward as u64;
        assert_eq!(per, cfg.adapters.rank as u64);
        assert_eq!(p.a_counts.iter().sum::<u64>(), per * p.forward_count);
        assert_eq!(p.b_counts.iter().sum::<u64>(), per * p.forward_count);
        assert!(p.forward_count > 0);
    }
    let again = evaluate_all(
        &run.model,
        &run.benchmark.tasks,
        cfg.metric(),
        cfg.evaluation.empty_class_f1,
        &mut RoutingLog::default(),
    )
    .unwrap();
    assert_eq!(&again, run.columns.last().unwrap());
}

#[test]
fn partitions_are_exact() {
    let backbone = cmml_core::backbone::BackboneConfig::default();
    for eta in [0.1, 0.3, 0.5, 0.7, 0.9] {
        for (image_avail, text_avail) in BenchmarkSpec::patterns(eta) {
            let spec = BenchmarkSpec {
                eta,
                image_avail,
                text_avail,
                tasks: 2,
                n_train: 37,
                n_test: 23,
                ..BenchmarkSpec::default()
            };
            let bench = generate_benchmark(&spec, &backbone).unwrap();
            for task in &bench.tasks {
                for split in [&task.train, &task.test] {
                    let n = split.len();
                    let incomplete = split.iter().filter(|s| !s.is_complete()).count();
                    let img = split.iter().filter(|s| s.availability() == Some(Availability::ImageOnly)).count();
                    let txt = split.iter().filter(|s| s.availability() == Some(Availability::TextOnly)).count();
                    assert_eq!(split.iter().filter(|s| s.is_complete()).count() + img + txt, n);
                    assert!((incomplete as f64 - eta * n as f64).abs() <= 1.0, "eta {eta}: {incomplete}/{n}");
                    assert_eq!(spec.partition(n).unwrap().incomplete(), incomplete);
                }
            }
        }
    }
}
