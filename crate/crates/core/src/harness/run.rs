//! Full single-pass runs and their persisted records.

use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, SnapshotMode};
use super::log::MetricLog;
use super::train::TrainLoop;
use crate::augment::augment;
use crate::boundary::BoundaryState;
use crate::dataset::{self, Dataset};
use crate::datastream::{self, TaskSchedule};
use crate::error::{Error, Result};
use crate::losses;
use crate::metrics::{self, AccuracyMatrix, DriftSeries};
use crate::model::{Architecture, Classifier};
use crate::optim::Optimizer;
use crate::seed::{self, Stream};
use crate::teacher::InferenceMode;

/// Everything a finished run reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub label: String,
    pub config: RunConfig,
    pub inference_mode: InferenceMode,
    /// Accuracy matrix of the configured inference mode.
    pub accuracy: AccuracyMatrix,
    pub accuracy_by_mode: BTreeMap<InferenceMode, AccuracyMatrix>,
    pub faa: f64,
    pub bt: Option<f64>,
    pub faa_by_mode: BTreeMap<InferenceMode, f64>,
    /// Final accuracy on the whole test set using the classifier head.
    pub logit_accuracy: f64,
    /// Same weights, nearest-class-mean on memory features instead of the head.
    pub ncm_accuracy: Option<f64>,
    pub drift: DriftSeries,
    pub boundary_events: Vec<usize>,
    pub confusion: Option<Vec<Vec<u64>>>,
    pub n_steps: usize,
    pub wall_clock_secs: f64,
    pub revision: Option<String>,
    #[serde(skip)]
    pub log: MetricLog,
}

impl RunRecord {
    pub fn bt_by_mode(&self) -> BTreeMap<InferenceMode, f64> {
        self.accuracy_by_mode
            .iter()
            .filter_map(|(&m, a)| metrics::backward_transfer(a).ok().map(|bt| (m, bt)))
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(p, e))
        };
        write(
            "record.json",
            serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?,
        )?;
        write("accuracy.txt", self.accuracy.to_table())?;
        write("config.toml", self.config.to_toml_string()?)?;
        self.log.save(&dir.join("metrics.tsv"))
    }

    /// Reads `record.json` and, when present, `metrics.tsv` from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("record.json");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let mut rec: RunRecord = serde_json::from_str(&text).map_err(|e| Error::Serde(e.to_string()))?;
        let log = dir.join("metrics.tsv");
        if log.exists() {
            rec.log = MetricLog::load(&log)?;
        }
        Ok(rec)
    }
}

/// Stable identifier of a config: label, seed and a digest of the settings.
pub fn run_id(cfg: &RunConfig) -> String {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    cfg.to_toml_string().unwrap_or_default().hash(&mut h);
    let label: String = cfg
        .label()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    format!("{label}-s{}-{:08x}", cfg.seed, h.finish() as u32)
}

/// Short revision of the working tree, when run inside a git checkout.
pub fn git_revision() -> Option<String> {
    let out = std::process::Command::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .output()
        .ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
}

/// Loads the dataset named by the config.
pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    dataset::load(&cfg.dataset_id()?, cfg.synth_sizes())
}

/// Validates `cfg`, loads its dataset and runs it.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    run_with_data(cfg, &data)
}

struct TestSets {
    x: Vec<Array4<f32>>,
    y: Vec<Vec<usize>>,
}

fn accuracy_on(model: &Classifier<f32>, x: &Array4<f32>, y: &[usize]) -> Result<f64> {
    metrics::accuracy(&model.predict(x)?, y)
}

/// Trains a fresh copy of the initial weights for several epochs on `rows`.
fn offline_teacher(cfg: &RunConfig, lp: &TrainLoop, data: &Dataset, rows: &[usize]) -> Result<Classifier<f32>> {
    let mut model = Classifier::from_params(lp.student.arch.clone(), lp.initial_params().to_vec())?;
    let mut opt = Optimizer::new(cfg.optimizer_config(), model.params.len());
    let mut rng = seed::rng(cfg.seed, Stream::Offline);
    let policy = cfg.aug_policy();
    let mut order = rows.to_vec();
    for _ in 0..cfg.snapshot_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.stream_batch) {
            let x = augment(&data.gather(&data.train, chunk), &policy, &mut rng);
            let y: Vec<usize> = chunk.iter().map(|&r| data.train.labels[r]).collect();
            let obj = losses::er_objective(&model, &x, &y)?;
            let grad = obj.backward(&model)?;
            opt.step(&mut model.params, &grad)?;
        }
    }
    Ok(model)
}

/// Drift probe: fixed old-class memory images and the features at the last
/// sample point.
struct Probe {
    x: Array4<f32>,
    last: Array2<f32>,
}

fn make_probe(cfg: &RunConfig, lp: &TrainLoop, current: &[usize], rng: &mut seed::Rng) -> Result<Option<Probe>> {
    let mem = lp.buffer.all();
    let old: Vec<usize> = (0..mem.len()).filter(|&i| !current.contains(&mem.labels[i])).collect();
    if old.is_empty() || cfg.drift_probe == 0 {
        return Ok(None);
    }
    let n = cfg.drift_probe.min(old.len());
    let picks: Vec<usize> = rand::seq::index::sample(rng, old.len(), n)
        .into_iter()
        .map(|i| old[i])
        .collect();
    let x = mem.images.select(ndarray::Axis(0), &picks);
    let last = lp.student.features(&x)?;
    Ok(Some(Probe { x, last }))
}

fn modes_for(lp: &TrainLoop) -> Vec<InferenceMode> {
    if lp.teacher.is_some() {
        InferenceMode::ALL.to_vec()
    } else {
        vec![InferenceMode::Student]
    }
}

/// Runs `cfg` on already loaded data. Persists the record when `out_dir` is set.
pub fn run_with_data(cfg: &RunConfig, data: &Dataset) -> Result<RunRecord> {
    cfg.validate()?;
    let started = Instant::now();
    let id = cfg.dataset_id()?;
    let schedule = datastream::build_schedule(&id, cfg.n_tasks, cfg.boundary_mode, cfg.blur_scale, cfg.seed)?;
    if schedule.n_classes != data.info.n_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, schedule expects {}",
            data.info.n_classes, schedule.n_classes
        )));
    }
    let plan = datastream::plan(&schedule, data, cfg.stream_batch, cfg.seed)?;
    let arch = Architecture::new(cfg.arch_spec(data.shape(), schedule.n_classes))?;
    let mut lp = TrainLoop::new(cfg, arch)?;
    let run_id = run_id(cfg);
    log::info!("run {run_id}: {} steps, {} params", plan.len(), lp.student.params.len());

    let tests = {
        let idx = schedule.test_indices(data);
        TestSets {
            x: idx.iter().map(|r| data.gather(&data.test, r)).collect(),
            y: idx.iter().map(|r| r.iter().map(|&i| data.test.labels[i]).collect()).collect(),
        }
    };
    let k = schedule.n_tasks();
    let modes = modes_for(&lp);
    let mut matrices: BTreeMap<InferenceMode, AccuracyMatrix> =
        modes.iter().map(|&m| (m, AccuracyMatrix::new(k))).collect();
    let ends = plan.segment_ends();

    let mut log = MetricLog::default();
    let mut detector = BoundaryState::new(cfg.min_gap);
    let mut boundary_events = Vec::new();
    let mut last_hint = None;
    let mut seen_rows: Vec<usize> = Vec::new();
    let mut drift = DriftSeries::default();
    let mut probe: Option<Probe> = None;
    let mut segment = usize::MAX;
    let mut since_probe = 0usize;
    let mut probe_rng = seed::rng(cfg.seed, Stream::DriftSubset);

    for batch in plan.iter(data) {
        let step = batch.step;
        let planned = &plan.batches[step];

        let detected = detector.observe(&batch.labels);
        let boundary = match batch.task_hint {
            Some(h) => last_hint.replace(h) != Some(h),
            None => detected,
        };
        if boundary {
            boundary_events.push(step);
            log.push(step as u64, "boundary", 1.0);
            if step > 0 {
                lp.snapshot = match cfg.snapshot_kd {
                    SnapshotMode::Off => None,
                    SnapshotMode::LowQuality => Some(lp.student.clone()),
                    SnapshotMode::HighQuality => Some(offline_teacher(cfg, &lp, data, &seen_rows)?),
                };
            }
        }

        if planned.segment != segment {
            segment = planned.segment;
            if segment > 0 {
                probe = make_probe(cfg, &lp, &schedule.tasks[segment], &mut probe_rng)?;
                since_probe = 0;
            }
        }

        let b = lp.step(&batch.images, &batch.labels)?;
        let s = step as u64;
        log.push(s, "loss.total", b.total);
        log.push(s, "loss.ce", b.ce);
        if cfg.mkd != super::config::MkdMode::Off || cfg.snapshot_kd != SnapshotMode::Off {
            log.push(s, "loss.distill", b.distill);
        }
        if b.baseline_extra != 0.0 {
            log.push(s, "loss.extra", b.baseline_extra);
        }
        seen_rows.extend_from_slice(&batch.sample_ids);

        since_probe += 1;
        if let Some(p) = &mut probe {
            if cfg.drift_every > 0 && since_probe % cfg.drift_every == 0 {
                let now = lp.student.features(&p.x)?;
                let d = metrics::frobenius_distance(p.last.view(), now.view())?;
                drift.push(s, d)?;
                log.push(s, "drift", d);
                p.last = now;
            }
        }

        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            let model = lp.model_for(cfg.inference())?;
            let mut acc = 0.0;
            for t in 0..=segment {
                acc += accuracy_on(&model, &tests.x[t], &tests.y[t])?;
            }
            log.push(s, "eval.avg_seen", acc / (segment + 1) as f64);
        }

        if ends.get(segment) == Some(&step) {
            for (&mode, m) in matrices.iter_mut() {
                let model = lp.model_for(mode)?;
                for t in 0..k {
                    let acc = accuracy_on(&model, &tests.x[t], &tests.y[t])?;
                    m.set(segment, t, acc)?;
                    log.push(s, format!("acc.{}.t{t}", mode.name()), acc);
                }
            }
        }
    }

    let n_steps = plan.len();
    let end = n_steps as u64;
    let main = cfg.inference();
    let accuracy = matrices
        .get(&main)
        .or_else(|| matrices.get(&InferenceMode::Student))
        .cloned()
        .expect("student matrix always exists");
    let mut faa_by_mode = BTreeMap::new();
    for (&mode, m) in &matrices {
        let faa = metrics::final_avg_accuracy(m)?;
        log.push(end, format!("faa.{}", mode.name()), faa);
        if let Ok(bt) = metrics::backward_transfer(m) {
            log.push(end, format!("bt.{}", mode.name()), bt);
        }
        faa_by_mode.insert(mode, faa);
    }
    let faa = metrics::final_avg_accuracy(&accuracy)?;
    let bt = metrics::backward_transfer(&accuracy).ok();

    let model = lp.model_for(main)?;
    let all_test: Vec<usize> = (0..data.test.len()).collect();
    let x_test = data.gather(&data.test, &all_test);
    let y_test = &data.test.labels;
    let preds = model.predict(&x_test)?;
    let logit_accuracy = metrics::accuracy(&preds, y_test)?;
    let confusion = metrics::confusion_matrix(&preds, y_test, schedule.n_classes)?;
    let ncm_accuracy = match metrics::ncm_eval(&model, &lp.buffer, &x_test, y_test) {
        Ok(a) => Some(a),
        Err(e) => {
            log::warn!("run {run_id}: NCM probe skipped: {e}");
            None
        }
    };
    log.push(end, "final.logit_accuracy", logit_accuracy);
    if let Some(a) = ncm_accuracy {
        log.push(end, "final.ncm_accuracy", a);
    }

    let record = RunRecord {
        run_id,
        label: cfg.label(),
        config: cfg.clone(),
        inference_mode: main,
        accuracy,
        accuracy_by_mode: matrices,
        faa,
        bt,
        faa_by_mode,
        logit_accuracy,
        ncm_accuracy,
        drift,
        boundary_events,
        confusion: Some(confusion.rows().into_iter().map(|r| r.to_vec()).collect()),
        n_steps,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        revision: git_revision(),
        log,
    };
    if let Some(dir) = &cfg.out_dir {
        let run_dir = dir.join(&record.run_id);
        record.save(&run_dir)?;
        std::fs::write(run_dir.join("schedule.json"), schedule.to_manifest()).map_err(|e| Error::io(&run_dir, e))?;
        log::info!("run {}: saved to {}", record.run_id, run_dir.display());
    }
    Ok(record)
}

/// Records found in the immediate subdirectories of `dir`.
pub fn load_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("record.json").is_file())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| RunRecord::load(d)).collect()
}

/// Schedule used by a config, for callers that need task membership.
pub fn schedule_of(cfg: &RunConfig) -> Result<TaskSchedule> {
    datastream::build_schedule(&cfg.dataset_id()?, cfg.n_tasks, cfg.boundary_mode, cfg.blur_scale, cfg.seed)
}
