//! One training step: retrieve, baseline loss, distillation loss, backward,
//! optimizer step, EMA update, buffer write. Always in that order.

use std::collections::BTreeSet;

use ndarray::{concatenate, Array2, Array4, Axis};

use super::config::{Method, MkdMode, RunConfig, SnapshotMode};
use crate::augment::{augment, AugPolicy};
use crate::error::Result;
use crate::losses::{self, LabelReplay, LogitReplay, LossBreakdown, Objective};
use crate::model::{Architecture, Classifier};
use crate::optim::Optimizer;
use crate::replay::{MemoryBatch, ReplayBuffer};
use crate::seed::{self, Rng, Stream};
use crate::teacher::{inference_model, DistillConfig, InferenceMode, TeacherState};

/// Phases of a step, recorded when tracing is enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Retrieve,
    BaselineLoss,
    MkdLoss,
    Backward,
    OptimStep,
    EmaUpdate,
    BufferWrite,
}

struct Rngs {
    retrieve: Rng,
    baseline_aug: Rng,
    mkd_aug: Rng,
    reservoir: Rng,
}

/// Mutable state of a run between steps.
pub struct TrainLoop {
    pub student: Classifier<f32>,
    pub teacher: Option<TeacherState<f32>>,
    pub buffer: ReplayBuffer,
    /// Frozen model distilled from in snapshot mode.
    pub snapshot: Option<Classifier<f32>>,
    initial_params: Vec<f32>,
    optimizer: Optimizer,
    distill: DistillConfig,
    policy: AugPolicy,
    cfg: RunConfig,
    rngs: Rngs,
    trace: Option<Vec<Phase>>,
    steps: usize,
}

fn to_rows(logits: &Array2<f32>) -> Vec<Vec<f32>> {
    logits.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn logits_array(rows: &[Vec<f32>]) -> Array2<f32> {
    let k = rows.first().map_or(0, Vec::len);
    Array2::from_shape_fn((rows.len(), k), |(i, j)| rows[i][j])
}

impl TrainLoop {
    pub fn new(cfg: &RunConfig, arch: Architecture) -> Result<Self> {
        let seed = cfg.seed;
        let arch = std::sync::Arc::new(arch);
        let student = Classifier::new(arch.clone(), &mut seed::rng(seed, Stream::Init));
        let teacher = if cfg.needs_teacher() {
            Some(TeacherState::new(&student, cfg.alpha)?)
        } else {
            None
        };
        let spec = arch.spec();
        Ok(TrainLoop {
            initial_params: student.params.clone(),
            optimizer: Optimizer::new(cfg.optimizer_config(), student.params.len()),
            buffer: ReplayBuffer::new(cfg.memory_size, spec.input, spec.n_classes),
            distill: cfg.distill()?,
            policy: cfg.aug_policy(),
            cfg: cfg.clone(),
            rngs: Rngs {
                retrieve: seed::rng(seed, Stream::Retrieve),
                baseline_aug: seed::rng(seed, Stream::BaselineAug),
                mkd_aug: seed::rng(seed, Stream::MkdAug),
                reservoir: seed::rng(seed, Stream::Reservoir),
            },
            student,
            teacher,
            snapshot: None,
            trace: None,
            steps: 0,
        })
    }

    /// Starts recording the phase sequence of subsequent steps.
    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn trace(&self) -> &[Phase] {
        self.trace.as_deref().unwrap_or(&[])
    }

    fn mark(&mut self, p: Phase) {
        if let Some(t) = &mut self.trace {
            t.push(p);
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn initial_params(&self) -> &[f32] {
        &self.initial_params
    }

    /// Model used for evaluation in `mode`.
    pub fn model_for(&self, mode: InferenceMode) -> Result<Classifier<f32>> {
        inference_model(&self.student, self.teacher.as_ref(), mode)
    }

    fn aug(&mut self, x: &Array4<f32>) -> Array4<f32> {
        augment(x, &self.policy, &mut self.rngs.baseline_aug)
    }

    /// Runs one step on a stream batch and returns the loss breakdown.
    pub fn step(&mut self, images: &Array4<f32>, labels: &[usize]) -> Result<LossBreakdown> {
        let cap = self.cfg.mem_retrieval_cap;
        let mem = self.buffer.random_retrieve(cap, &mut self.rngs.retrieve);
        let mem_b = match self.cfg.method {
            Method::Derpp => Some(self.buffer.random_retrieve(cap, &mut self.rngs.retrieve)),
            _ => None,
        };
        self.mark(Phase::Retrieve);

        let (x_comb, y_comb) = combine(images, labels, &mem);

        let base = self.baseline(images, labels, &x_comb, &y_comb, &mem, mem_b.as_ref())?;
        self.mark(Phase::BaselineLoss);

        let objective = match (self.cfg.mkd, &self.teacher) {
            (MkdMode::Off, _) | (_, None) => base,
            (mode, Some(teacher)) => {
                let x_aug = augment(&x_comb, &self.policy, &mut self.rngs.mkd_aug);
                let t = teacher.model();
                let mkd = if mode == MkdMode::SingleView {
                    losses::mkd_loss_single_view(&x_aug, &y_comb, &self.student, t, &self.distill)?
                } else {
                    losses::mkd_loss(&x_comb, &x_aug, &y_comb, &self.student, t, &self.distill)?
                };
                self.mark(Phase::MkdLoss);
                losses::compose(base, mkd)
            }
        };

        let grad = objective.backward(&self.student)?;
        self.mark(Phase::Backward);

        self.optimizer.step(&mut self.student.params, &grad)?;
        self.mark(Phase::OptimStep);

        if let Some(t) = &mut self.teacher {
            t.ema_update(&self.student.params)?;
            self.mark(Phase::EmaUpdate);
        }

        let stored = match self.cfg.method {
            Method::Derpp => objective.logits.as_ref().map(|l| to_rows(&l.slice(ndarray::s![..labels.len(), ..]).to_owned())),
            _ => None,
        };
        self.buffer
            .reservoir_update(images, labels, stored.as_deref(), &mut self.rngs.reservoir)?;
        self.mark(Phase::BufferWrite);

        self.steps += 1;
        Ok(objective.breakdown)
    }

    fn baseline(
        &mut self,
        images: &Array4<f32>,
        labels: &[usize],
        x_comb: &Array4<f32>,
        y_comb: &[usize],
        mem: &MemoryBatch,
        mem_b: Option<&MemoryBatch>,
    ) -> Result<Objective<f32>> {
        match self.cfg.method {
            Method::Er => {
                let x = self.aug(x_comb);
                match self.cfg.snapshot_kd {
                    SnapshotMode::Off => losses::er_objective(&self.student, &x, y_comb),
                    _ => losses::snapshot_kd_loss(
                        &x,
                        y_comb,
                        &self.student,
                        self.snapshot.as_ref(),
                        self.cfg.snapshot_lambda,
                        self.cfg.tau,
                    ),
                }
            }
            Method::Derpp => {
                let xs = self.aug(images);
                let xa = self.aug(&mem.images);
                let stored = mem.logits.as_deref().map(logits_array);
                let mem_b = mem_b.expect("second draw is taken for derpp");
                let xb = self.aug(&mem_b.images);
                let a = stored.as_ref().filter(|_| !mem.is_empty()).map(|s| LogitReplay {
                    images: &xa,
                    stored_logits: s,
                });
                let b = (!mem_b.is_empty()).then_some(LabelReplay {
                    images: &xb,
                    labels: &mem_b.labels,
                });
                losses::derpp_loss(&xs, labels, a, b, self.cfg.derpp_alpha, self.cfg.derpp_beta, &self.student)
            }
            Method::Erace => {
                let xs = self.aug(images);
                let xm = self.aug(&mem.images);
                let current: Vec<usize> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
                let m = (!mem.is_empty()).then_some(LabelReplay {
                    images: &xm,
                    labels: &mem.labels,
                });
                losses::erace_loss(&xs, labels, m, &current, &self.student)
            }
        }
    }
}

fn combine(images: &Array4<f32>, labels: &[usize], mem: &MemoryBatch) -> (Array4<f32>, Vec<usize>) {
    if mem.is_empty() {
        return (images.clone(), labels.to_vec());
    }
    (
        concatenate![Axis(0), images.view(), mem.images.view()],
        [labels, mem.labels.as_slice()].concat(),
    )
}
