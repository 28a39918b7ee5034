//! Class-incremental task schedules and one-pass training streams.
//!
//! A [`TaskSchedule`] partitions the class universe into disjoint tasks. A
//! [`StreamPlan`] fixes the order in which every training sample is visited
//! exactly once, grouped into batches:
//!
//! - clear mode visits tasks one after another, each task shuffled
//!   internally, and never mixes two tasks in a batch;
//! - blurry mode additionally replaces a window of `blur_scale` positions
//!   centred on each task boundary by an interleaving of the two adjacent
//!   tasks. At offset `j` of a window the probability that the sample comes
//!   from the next task rises linearly, `(j + 0.5) / blur_scale`.
//!
//! Batches never straddle a nominal task boundary, so a blurry plan with
//! `blur_scale = 0` is the clear plan sample for sample.

use std::ops::Range;

use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetId};
use crate::error::{Error, Result};
use crate::seed::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryMode {
    #[default]
    Clear,
    Blurry,
}

impl std::str::FromStr for BoundaryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clear" => Ok(BoundaryMode::Clear),
            "blurry" => Ok(BoundaryMode::Blurry),
            _ => Err(Error::InvalidValue(format!("boundary mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchedule {
    pub dataset: String,
    pub n_classes: usize,
    /// Class ids of each task, sorted within a task.
    pub tasks: Vec<Vec<usize>>,
    pub boundary_mode: BoundaryMode,
    pub blur_scale: usize,
    pub seed: u64,
}

impl TaskSchedule {
    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Task index owning each class id.
    pub fn task_of_class(&self) -> Vec<usize> {
        let mut owner = vec![usize::MAX; self.n_classes];
        for (t, classes) in self.tasks.iter().enumerate() {
            for &c in classes {
                owner[c] = t;
            }
        }
        owner
    }

    /// Per-task training sample indices in dataset order.
    pub fn train_indices(&self, data: &Dataset) -> Vec<Vec<usize>> {
        let owner = self.task_of_class();
        let mut out = vec![Vec::new(); self.n_tasks()];
        for (i, &l) in data.train.labels.iter().enumerate() {
            out[owner[l]].push(i);
        }
        out
    }

    /// Per-task held-out test indices.
    pub fn test_indices(&self, data: &Dataset) -> Vec<Vec<usize>> {
        let owner = self.task_of_class();
        let mut out = vec![Vec::new(); self.n_tasks()];
        for (i, &l) in data.test.labels.iter().enumerate() {
            out[owner[l]].push(i);
        }
        out
    }

    /// Structured text manifest (JSON) for audit.
    pub fn to_manifest(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule serializes")
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let s: TaskSchedule = serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    /// Checks disjointness and coverage of the class universe.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.n_classes];
        for classes in &self.tasks {
            for &c in classes {
                if c >= self.n_classes || seen[c] {
                    return Err(Error::InvalidValue(format!("class {c} repeated or out of range")));
                }
                seen[c] = true;
            }
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidValue(format!("class {c} belongs to no task")));
        }
        Ok(())
    }
}

/// Splits the dataset's classes into `n_tasks` equal, disjoint tasks.
///
/// Sorted class ids are permuted with `seed`, then cut into consecutive
/// chunks.
pub fn build_schedule(
    dataset: &DatasetId,
    n_tasks: usize,
    boundary_mode: BoundaryMode,
    blur_scale: usize,
    seed: u64,
) -> Result<TaskSchedule> {
    let n_classes = dataset.n_classes()?;
    if n_tasks == 0 || n_classes % n_tasks != 0 {
        return Err(Error::UnevenSplit { n_classes, n_tasks });
    }
    let mut classes: Vec<usize> = (0..n_classes).collect();
    classes.shuffle(&mut seed::rng(seed, Stream::Schedule));
    let per_task = n_classes / n_tasks;
    let tasks = classes
        .chunks(per_task)
        .map(|c| {
            let mut c = c.to_vec();
            c.sort_unstable();
            c
        })
        .collect();
    Ok(TaskSchedule {
        dataset: dataset.to_string(),
        n_classes,
        tasks,
        boundary_mode,
        blur_scale,
        seed,
    })
}

/// One step of the training stream.
#[derive(Debug, Clone)]
pub struct StreamBatch {
    pub images: Array4<f32>,
    pub labels: Vec<usize>,
    /// Training-split indices of the rows, for single-pass accounting.
    pub sample_ids: Vec<usize>,
    pub step: usize,
    /// Task index, only in clear mode.
    pub task_hint: Option<usize>,
}

impl StreamBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedBatch {
    pub rows: Vec<usize>,
    /// Nominal task the batch belongs to (the segment between boundaries).
    pub segment: usize,
}

/// The full visiting order of a stream, fixed before training starts.
#[derive(Debug, Clone)]
pub struct StreamPlan {
    pub batches: Vec<PlannedBatch>,
    pub task_hints: bool,
    /// Window of mixed positions around each boundary (global sample offsets).
    pub windows: Vec<Range<usize>>,
}

impl StreamPlan {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    /// Flattened sample order.
    pub fn order(&self) -> Vec<usize> {
        self.batches.iter().flat_map(|b| b.rows.iter().copied()).collect()
    }

    /// Index of the last batch of each segment.
    pub fn segment_ends(&self) -> Vec<usize> {
        let mut ends: Vec<usize> = Vec::new();
        for (i, b) in self.batches.iter().enumerate() {
            if b.segment >= ends.len() {
                ends.resize(b.segment + 1, i);
            }
            ends[b.segment] = i;
        }
        ends
    }

    /// Materializes the batches against `data`.
    pub fn iter<'a>(&'a self, data: &'a Dataset) -> impl Iterator<Item = StreamBatch> + 'a {
        self.batches.iter().enumerate().map(move |(step, b)| StreamBatch {
            images: data.gather(&data.train, &b.rows),
            labels: b.rows.iter().map(|&r| data.train.labels[r]).collect(),
            sample_ids: b.rows.clone(),
            step,
            task_hint: self.task_hints.then_some(b.segment),
        })
    }
}

fn shuffled_tasks(schedule: &TaskSchedule, data: &Dataset, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = seed::rng(seed, Stream::Shuffle);
    let mut per_task = schedule.train_indices(data);
    for rows in &mut per_task {
        rows.shuffle(&mut rng);
    }
    per_task
}

fn chunk_segments(segments: Vec<Vec<usize>>, batch_size: usize) -> Vec<PlannedBatch> {
    segments
        .into_iter()
        .enumerate()
        .flat_map(|(segment, rows)| {
            rows.chunks(batch_size)
                .map(|c| PlannedBatch {
                    rows: c.to_vec(),
                    segment,
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Clear-boundary stream: tasks in schedule order, each shuffled with `seed`.
pub fn iter_clear(schedule: &TaskSchedule, data: &Dataset, batch_size: usize, seed: u64) -> Result<StreamPlan> {
    if batch_size == 0 {
        return Err(Error::InvalidValue("batch size must be positive".into()));
    }
    let segments = shuffled_tasks(schedule, data, seed);
    Ok(StreamPlan {
        batches: chunk_segments(segments, batch_size),
        task_hints: true,
        windows: Vec::new(),
    })
}

/// Blurry-boundary stream. See the module docs for the window construction.
pub fn iter_blurry(
    schedule: &TaskSchedule,
    data: &Dataset,
    batch_size: usize,
    blur_scale: usize,
    seed: u64,
) -> Result<StreamPlan> {
    if batch_size == 0 {
        return Err(Error::InvalidValue("batch size must be positive".into()));
    }
    let mut tasks = shuffled_tasks(schedule, data, seed);
    let lens: Vec<usize> = tasks.iter().map(Vec::len).collect();
    let windows = blur_windows(&lens, blur_scale)?;
    let (left, right) = (blur_scale / 2, blur_scale - blur_scale / 2);

    let mut rng = seed::rng(seed, Stream::Blur);
    for k in 0..tasks.len().saturating_sub(1) {
        if blur_scale == 0 {
            break;
        }
        // Sort keys: the outgoing task gets density 2(1 - x), the incoming
        // task density 2x, so the incoming share at relative offset x is x.
        let n_prev = tasks[k].len();
        let tail: Vec<usize> = tasks[k].drain(n_prev - left..).collect();
        let head: Vec<usize> = tasks[k + 1].drain(..right).collect();
        let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(blur_scale);
        keyed.extend(tail.into_iter().map(|r| (1.0 - rng.random::<f64>().sqrt(), r)));
        keyed.extend(head.into_iter().map(|r| (rng.random::<f64>().sqrt(), r)));
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (before, after) = keyed.split_at(left);
        tasks[k].extend(before.iter().map(|e| e.1));
        let incoming: Vec<usize> = after.iter().map(|e| e.1).collect();
        tasks[k + 1].splice(0..0, incoming);
    }
    Ok(StreamPlan {
        batches: chunk_segments(tasks, batch_size),
        task_hints: false,
        windows,
    })
}

/// Builds the plan matching the schedule's boundary mode.
pub fn plan(schedule: &TaskSchedule, data: &Dataset, batch_size: usize, seed: u64) -> Result<StreamPlan> {
    match schedule.boundary_mode {
        BoundaryMode::Clear => iter_clear(schedule, data, batch_size, seed),
        BoundaryMode::Blurry => iter_blurry(schedule, data, batch_size, schedule.blur_scale, seed),
    }
}

/// Mixed-position windows for tasks of the given lengths.
pub fn blur_windows(task_lens: &[usize], blur_scale: usize) -> Result<Vec<Range<usize>>> {
    let mut windows = Vec::new();
    if blur_scale == 0 {
        return Ok(windows);
    }
    let left = blur_scale / 2;
    let mut boundary = 0;
    for k in 0..task_lens.len().saturating_sub(1) {
        for t in [k, k + 1] {
            if blur_scale > task_lens[t] {
                return Err(Error::BlurTooWide {
                    blur_scale,
                    task: t,
                    task_len: task_lens[t],
                });
            }
        }
        boundary += task_lens[k];
        windows.push(boundary - left..boundary - left + blur_scale);
    }
    Ok(windows)
}

/// Probability that stream position `pos` draws from each task.
///
/// Returns `(task, probability)` pairs with nonzero probability.
pub fn mixing_profile(task_lens: &[usize], blur_scale: usize, pos: usize) -> Result<Vec<(usize, f64)>> {
    let windows = blur_windows(task_lens, blur_scale)?;
    for (k, w) in windows.iter().enumerate() {
        if w.contains(&pos) {
            let p_next = ((pos - w.start) as f64 + 0.5) / blur_scale as f64;
            return Ok(vec![(k, 1.0 - p_next), (k + 1, p_next)]);
        }
    }
    let mut start = 0;
    for (k, &len) in task_lens.iter().enumerate() {
        if pos < start + len {
            return Ok(vec![(k, 1.0)]);
        }
        start += len;
    }
    Err(Error::InvalidValue(format!("position {pos} is past the end of the stream")))
}
