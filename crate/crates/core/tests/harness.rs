use std::collections::BTreeMap;

use mkd_core::augment::augment;
use mkd_core::boundary;
use mkd_core::dataset::Dataset;
use mkd_core::datastream;
use mkd_core::harness::{self, run, Phase, RunConfig, SweepSpec, TrainLoop};
use mkd_core::losses;
use mkd_core::model::Architecture;
use mkd_core::seed::{self, Stream};

/// A run small enough for a unit-test budget.
fn tiny(extra: &[&str]) -> RunConfig {
    let mut o: Vec<String> = ["train_per_class=30", "test_per_class=10", "n_tasks=2", "memory_size=100", "drift_every=5"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    o.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::from_toml_str("", &o).unwrap()
}

fn first_batches(cfg: &RunConfig, data: &Dataset, n: usize) -> Vec<datastream::StreamBatch> {
    let schedule = run::schedule_of(cfg).unwrap();
    let plan = datastream::plan(&schedule, data, cfg.stream_batch, cfg.seed).unwrap();
    plan.iter(data).take(n).collect()
}

fn train_loop(cfg: &RunConfig, data: &Dataset) -> TrainLoop {
    let arch = Architecture::new(cfg.arch_spec(data.shape(), data.info.n_classes)).unwrap();
    TrainLoop::new(cfg, arch).unwrap()
}

#[test]
fn step_phases_run_in_order() {
    use Phase::*;
    for (mkd, expected) in [
        ("on", vec![Retrieve, BaselineLoss, MkdLoss, Backward, OptimStep, EmaUpdate, BufferWrite]),
        ("off", vec![Retrieve, BaselineLoss, Backward, OptimStep, BufferWrite]),
    ] {
        let cfg = tiny(&[format!("mkd=\"{mkd}\"").as_str()]);
        let data = run::load_data(&cfg).unwrap();
        let mut lp = train_loop(&cfg, &data);
        lp.enable_trace();
        for b in first_batches(&cfg, &data, 3) {
            lp.step(&b.images, &b.labels).unwrap();
        }
        assert_eq!(lp.trace(), [expected.clone(), expected.clone(), expected].concat());
    }
}

#[test]
fn first_step_works_on_an_empty_buffer_and_writes_after() {
    let cfg = tiny(&["mkd=\"on\""]);
    let data = run::load_data(&cfg).unwrap();
    let mut lp = train_loop(&cfg, &data);
    assert!(lp.buffer.is_empty());
    let b = &first_batches(&cfg, &data, 1)[0];
    let loss = lp.step(&b.images, &b.labels).unwrap();
    assert!(loss.total.is_finite());
    assert_eq!(lp.buffer.len(), b.len());
    assert_eq!(lp.teacher.as_ref().unwrap().n_updates(), 1);
}

#[test]
fn mkd_adds_its_own_terms_to_the_baseline() {
    let er = tiny(&[]);
    let mkd = tiny(&["mkd=\"on\"", "lambda_override=0.0"]);
    let data = run::load_data(&er).unwrap();
    let batch = &first_batches(&er, &data, 1)[0];
    let (mut a, mut b) = (train_loop(&er, &data), train_loop(&mkd, &data));
    let initial = b.student.clone();
    let la = a.step(&batch.images, &batch.labels).unwrap();
    let lb = b.step(&batch.images, &batch.labels).unwrap();
    // Memory is empty at step 0, so the MKD view is an augmentation of the
    // stream batch drawn from its own stream.
    let x_aug = augment(&batch.images, &mkd.aug_policy(), &mut seed::rng(mkd.seed, Stream::MkdAug));
    let mkd_ce = losses::er_objective(&initial, &x_aug, &batch.labels).unwrap().breakdown.ce;
    assert_eq!(lb.distill, 0.0);
    assert!((lb.total - (la.total + mkd_ce)).abs() < 1e-9);
}

#[test]
fn derpp_stores_logits_and_erace_runs() {
    for method in ["derpp", "erace"] {
        let cfg = tiny(&[format!("method=\"{method}\"").as_str(), "mkd=\"on\""]);
        let data = run::load_data(&cfg).unwrap();
        let mut lp = train_loop(&cfg, &data);
        for b in first_batches(&cfg, &data, 5) {
            assert!(lp.step(&b.images, &b.labels).unwrap().total.is_finite());
        }
        let has_logits = lp.buffer.items().iter().all(|it| it.logits.is_some());
        assert_eq!(has_logits, method == "derpp");
    }
}

#[test]
fn single_task_run_has_no_backward_transfer() {
    let r = run::run_experiment(&tiny(&["n_tasks=1"])).unwrap();
    assert_eq!(r.accuracy.n_tasks(), 1);
    assert!(r.bt.is_none());
    assert!(r.drift.is_empty());
    assert!((0.0..=1.0).contains(&r.faa));
}

#[test]
fn two_task_run_reports_every_metric() {
    let r = run::run_experiment(&tiny(&["mkd=\"on\""])).unwrap();
    assert_eq!(r.n_steps, 2 * 5 * 30 / 10);
    assert_eq!(r.boundary_events, vec![0, 15]);
    assert_eq!(r.faa_by_mode.len(), 3);
    assert!(r.bt.is_some());
    assert!(r.ncm_accuracy.is_some());
    assert!(!r.drift.is_empty());
    let confusion = r.confusion.as_ref().unwrap();
    let total: u64 = confusion.iter().flatten().sum();
    assert_eq!(total, 10 * 10);
}

#[test]
fn eval_every_logs_on_multiples() {
    let r = run::run_experiment(&tiny(&["eval_every=4"])).unwrap();
    let steps: Vec<u64> = r.log.series("eval.avg_seen").iter().map(|(s, _)| *s).collect();
    assert_eq!(steps, vec![3, 7, 11, 15, 19, 23, 27]);
    let none = run::run_experiment(&tiny(&[])).unwrap();
    assert!(none.log.series("eval.avg_seen").is_empty());
}

#[test]
fn blurry_run_uses_detected_boundaries() {
    let cfg = tiny(&[
        "boundary_mode=\"blurry\"",
        "blur_scale=20",
        "min_gap=10",
        "train_per_class=100",
    ]);
    let data = run::load_data(&cfg).unwrap();
    let r = run::run_with_data(&cfg, &data).unwrap();
    let schedule = run::schedule_of(&cfg).unwrap();
    let plan = datastream::plan(&schedule, &data, cfg.stream_batch, cfg.seed).unwrap();
    let labels: Vec<Vec<usize>> = plan
        .batches
        .iter()
        .map(|b| b.rows.iter().map(|&i| data.train.labels[i]).collect())
        .collect();
    assert_eq!(r.boundary_events, boundary::detect(labels.iter().map(Vec::as_slice), 10));
    assert_eq!(r.boundary_events.len(), 2);
}

#[test]
fn record_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap().replace('\\', "/");
    let cfg = tiny(&["mkd=\"on\"", format!("out_dir=\"{out}\"").as_str()]);
    let r = run::run_experiment(&cfg).unwrap();
    let loaded = run::load_records(dir.path()).unwrap();
    assert_eq!(loaded.len(), 1);
    assert_eq!(loaded[0].run_id, r.run_id);
    assert_eq!(loaded[0].faa, r.faa);
    assert_eq!(loaded[0].accuracy, r.accuracy);
    assert_eq!(loaded[0].log.max_rel_diff(&r.log), Some(0.0));
}

#[test]
fn one_cell_sweep_matches_a_direct_run() {
    let cfg = tiny(&["seed=3"]);
    let spec = SweepSpec::from_toml_str("n_seeds = 1\n[grid]\n").unwrap();
    let (table, records) = harness::sweep(&cfg, &spec).unwrap();
    let direct = run::run_experiment(&cfg).unwrap();
    assert_eq!(table.cells.len(), 1);
    assert_eq!(table.cells[0].faa, vec![direct.faa]);
    assert_eq!(records[0].log.max_rel_diff(&direct.log), Some(0.0));
}

#[test]
fn sweep_records_failing_cells_and_continues() {
    let cfg = tiny(&[]);
    let spec = SweepSpec::from_toml_str("n_seeds = 1\n[grid]\nn_tasks = [2, 3]\n").unwrap();
    let (table, _) = harness::sweep(&cfg, &spec).unwrap();
    assert_eq!(table.cells[0].faa.len(), 1);
    // 10 classes do not split into 3 tasks
    assert_eq!(table.cells[1].failures.len(), 1);
    assert!(table.to_tsv().lines().count() == 3);
}

#[test]
fn plots_are_written_and_stable() {
    let cfg = tiny(&["mkd=\"on\""]);
    let with_drift = run::run_experiment(&cfg).unwrap();
    let single = run::run_experiment(&tiny(&["n_tasks=1"])).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let files = harness::emit_plots(&[with_drift.clone(), single.clone()], dir.path()).unwrap();
    // two confusion plots (tsv + svg each) and one drift plot
    assert_eq!(files.len(), 6);
    let tsv = std::fs::read_to_string(dir.path().join(format!("confusion-{}.tsv", with_drift.run_id))).unwrap();
    for line in tsv.lines() {
        let row_sum: u64 = line.split('\t').map(|c| c.parse::<u64>().unwrap()).sum();
        assert_eq!(row_sum, 10);
    }

    let snapshot: BTreeMap<_, _> = files.iter().map(|p| (p.clone(), std::fs::read(p).unwrap())).collect();
    harness::emit_plots(&[with_drift, single.clone()], dir.path()).unwrap();
    for (p, bytes) in &snapshot {
        assert_eq!(&std::fs::read(p).unwrap(), bytes, "{} changed", p.display());
    }

    // without any drift series the drift figure is skipped
    let other = tempfile::tempdir().unwrap();
    let files = harness::emit_plots(&[single], other.path()).unwrap();
    assert_eq!(files.len(), 2);
    assert!(!other.path().join("drift.svg").exists());
}
