//! Training objectives.
//!
//! Logit-level functions return the loss value together with its gradient
//! with respect to the student logits. Model-level functions run the student
//! (recording a tape) and any frozen networks, and return an [`Objective`]:
//! the loss breakdown plus pending gradient terms. Nothing is backpropagated
//! until [`Objective::backward`] is called, and only the student is ever
//! differentiated; teacher outputs and stored logits enter as constants.
//!
//! Distillation uses `KL(softmax(teacher / tau) || softmax(student / tau))`,
//! averaged over the batch, without the `tau^2` rescaling.

use ndarray::{concatenate, Array2, Array4, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::model::{Classifier, Tape};
use crate::scalar::Scalar;
use crate::teacher::DistillConfig;

/// Scalar components of an objective; `total = ce + distill + baseline_extra`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub distill: f64,
    /// Method-specific terms such as the DER++ replay penalties.
    pub baseline_extra: f64,
}

impl LossBreakdown {
    pub fn new(ce: f64, distill: f64, baseline_extra: f64) -> Self {
        LossBreakdown {
            total: ce + distill + baseline_extra,
            ce,
            distill,
            baseline_extra,
        }
    }
}

impl std::ops::Add for LossBreakdown {
    type Output = LossBreakdown;

    fn add(self, o: LossBreakdown) -> LossBreakdown {
        LossBreakdown {
            total: self.total + o.total,
            ce: self.ce + o.ce,
            distill: self.distill + o.distill,
            baseline_extra: self.baseline_extra + o.baseline_extra,
        }
    }
}

struct GradTerm<F> {
    tape: Tape<F>,
    dlogits: Array2<F>,
}

/// A loss value with its not-yet-propagated student gradient.
pub struct Objective<F> {
    pub breakdown: LossBreakdown,
    terms: Vec<GradTerm<F>>,
    /// Student logits of the first pass, for callers that store them.
    pub logits: Option<Array2<F>>,
}

impl<F: Scalar> Objective<F> {
    fn new(breakdown: LossBreakdown) -> Self {
        Objective {
            breakdown,
            terms: Vec::new(),
            logits: None,
        }
    }

    fn push(&mut self, tape: Tape<F>, dlogits: Array2<F>) {
        self.terms.push(GradTerm { tape, dlogits });
    }

    /// Backpropagates every term through `student` into a fresh gradient.
    pub fn backward(&self, student: &Classifier<F>) -> Result<Vec<F>> {
        let mut grad = vec![F::zero(); student.params.len()];
        for term in &self.terms {
            student.backward(&term.tape, &term.dlogits, &mut grad)?;
        }
        Ok(grad)
    }

    /// Number of student passes feeding the gradient.
    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }
}

/// Sum of two objectives computed on the same batch.
pub fn compose<F: Scalar>(mut base: Objective<F>, mkd: Objective<F>) -> Objective<F> {
    base.breakdown = base.breakdown + mkd.breakdown;
    base.terms.extend(mkd.terms);
    if base.logits.is_none() {
        base.logits = mkd.logits;
    }
    base
}

// ---------------------------------------------------------------------------
// logit-level functions

fn log_softmax<F: Scalar>(z: ArrayView2<F>, tau: F) -> Array2<F> {
    let mut out = z.to_owned();
    for mut row in out.rows_mut() {
        row.mapv_inplace(|v| v / tau);
        let max = row.fold(F::neg_infinity(), |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn check_labels(n_rows: usize, n_classes: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != n_rows {
        return Err(Error::shape(format!("{n_rows} labels"), labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::InvalidValue(format!("label {bad} outside {n_classes} classes")));
    }
    Ok(())
}

/// Summed cross-entropy of the rows and its gradient, optionally restricting
/// the softmax of the first `masked_rows` rows to `allowed` classes.
fn ce_sum<F: Scalar>(
    logits: ArrayView2<F>,
    labels: &[usize],
    allowed: Option<(&[bool], usize)>,
) -> Result<(f64, Array2<F>)> {
    let (n, k) = logits.dim();
    check_labels(n, k, labels)?;
    let mut grad = Array2::zeros((n, k));
    let mut total = 0.0;
    for (i, (row, mut g)) in logits.rows().into_iter().zip(grad.rows_mut()).enumerate() {
        let mask = allowed.filter(|&(_, rows)| i < rows).map(|(m, _)| m);
        if let Some(m) = mask {
            if !m[labels[i]] {
                return Err(Error::InvalidValue(format!("label {} is masked out", labels[i])));
            }
        }
        let on = |j: usize| mask.is_none_or(|m| m[j]);
        let max = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| on(j))
            .fold(F::neg_infinity(), |m, (_, &v)| m.max(v));
        let denom: F = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| on(j))
            .map(|(_, &v)| (v - max).exp())
            .sum();
        let lse = max + denom.ln();
        total += (lse - row[labels[i]]).f64();
        for (j, gj) in g.iter_mut().enumerate() {
            if on(j) {
                *gj = (row[j] - lse).exp();
            }
        }
        g[labels[i]] -= F::one();
    }
    Ok((total, grad))
}

/// Mean cross-entropy and its gradient.
pub fn cross_entropy<F: Scalar>(logits: ArrayView2<F>, labels: &[usize]) -> Result<(f64, Array2<F>)> {
    let n = logits.nrows();
    if n == 0 {
        return Err(Error::Empty("cross-entropy batch"));
    }
    let (sum, grad) = ce_sum(logits, labels, None)?;
    let inv = F::one() / F::of(n as f64);
    Ok((sum / n as f64, grad * inv))
}

/// Experience replay objective on logits of the combined stream and memory
/// batch: plain mean cross-entropy.
pub fn er_loss<F: Scalar>(batch_logits: ArrayView2<F>, labels: &[usize]) -> Result<(f64, Array2<F>)> {
    cross_entropy(batch_logits, labels)
}

/// Batch-mean `KL(softmax(teacher / tau) || softmax(student / tau))` and its
/// gradient with respect to the student logits.
pub fn kl_distill<F: Scalar>(teacher: ArrayView2<F>, student: ArrayView2<F>, tau: f64) -> Result<(f64, Array2<F>)> {
    if teacher.dim() != student.dim() {
        return Err(Error::shape(format!("{:?}", teacher.dim()), format!("{:?}", student.dim())));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidValue(format!("temperature must be positive, got {tau}")));
    }
    let n = student.nrows();
    if n == 0 {
        return Ok((0.0, Array2::zeros(student.dim())));
    }
    let t = F::of(tau);
    let log_pt = log_softmax(teacher, t);
    let log_ps = log_softmax(student, t);
    let mut kl = 0.0;
    for (lt, ls) in log_pt.iter().zip(&log_ps) {
        kl += (lt.exp() * (*lt - *ls)).f64();
    }
    // tiny negative values are rounding noise
    let kl = (kl / n as f64).max(0.0);
    let scale = F::one() / (t * F::of(n as f64));
    let grad = (log_ps.mapv(F::exp) - log_pt.mapv(F::exp)) * scale;
    Ok((kl, grad))
}

/// Mean squared error over all entries and its gradient w.r.t. `pred`.
pub fn mse<F: Scalar>(pred: ArrayView2<F>, target: ArrayView2<F>) -> Result<(f64, Array2<F>)> {
    if pred.dim() != target.dim() {
        return Err(Error::shape(format!("{:?}", pred.dim()), format!("{:?}", target.dim())));
    }
    let count = pred.len();
    if count == 0 {
        return Ok((0.0, Array2::zeros(pred.dim())));
    }
    let diff = &pred - &target;
    let value = diff.iter().map(|d| d.f64().powi(2)).sum::<f64>() / count as f64;
    Ok((value, diff * F::of(2.0 / count as f64)))
}

// ---------------------------------------------------------------------------
// model-level objectives

/// Cross-entropy of the student on `(x, y)`.
pub fn er_objective<F: Scalar>(student: &Classifier<F>, x: &Array4<F>, y: &[usize]) -> Result<Objective<F>> {
    let (logits, tape) = student.forward_train(x)?;
    let (ce, d) = er_loss(logits.view(), y)?;
    let mut obj = Objective::new(LossBreakdown::new(ce, 0.0, 0.0));
    obj.push(tape, d);
    obj.logits = Some(logits);
    Ok(obj)
}

/// Multiview momentum distillation:
/// `CE(S(x_aug), y) + lambda/2 * KL(T(x_raw) || S(x_aug)) + lambda/2 * KL(T(x_aug) || S(x_aug))`.
pub fn mkd_loss<F: Scalar>(
    x_raw: &Array4<F>,
    x_aug: &Array4<F>,
    y: &[usize],
    student: &Classifier<F>,
    teacher: &Classifier<F>,
    cfg: &DistillConfig,
) -> Result<Objective<F>> {
    if x_raw.dim() != x_aug.dim() {
        return Err(Error::shape(format!("{:?}", x_raw.dim()), format!("{:?}", x_aug.dim())));
    }
    let (s_aug, tape) = student.forward_train(x_aug)?;
    let t_raw = teacher.forward(x_raw)?;
    let t_aug = teacher.forward(x_aug)?;
    let (ce, d_ce) = cross_entropy(s_aug.view(), y)?;
    let (kl_raw, d_raw) = kl_distill(t_raw.view(), s_aug.view(), cfg.tau)?;
    let (kl_aug, d_aug) = kl_distill(t_aug.view(), s_aug.view(), cfg.tau)?;
    let half = cfg.lambda_alpha / 2.0;
    let distill = half * (kl_raw + kl_aug);
    let d = d_ce + (d_raw + d_aug) * F::of(half);
    let mut obj = Objective::new(LossBreakdown::new(ce, distill, 0.0));
    obj.push(tape, d);
    obj.logits = Some(s_aug);
    Ok(obj)
}

/// Single-view variant: `CE(S(x_aug), y) + lambda * KL(T(x_aug) || S(x_aug))`.
pub fn mkd_loss_single_view<F: Scalar>(
    x_aug: &Array4<F>,
    y: &[usize],
    student: &Classifier<F>,
    teacher: &Classifier<F>,
    cfg: &DistillConfig,
) -> Result<Objective<F>> {
    let (s_aug, tape) = student.forward_train(x_aug)?;
    let t_aug = teacher.forward(x_aug)?;
    let (ce, d_ce) = cross_entropy(s_aug.view(), y)?;
    let (kl, d_kl) = kl_distill(t_aug.view(), s_aug.view(), cfg.tau)?;
    let distill = cfg.lambda_alpha * kl;
    let d = d_ce + d_kl * F::of(cfg.lambda_alpha);
    let mut obj = Objective::new(LossBreakdown::new(ce, distill, 0.0));
    obj.push(tape, d);
    obj.logits = Some(s_aug);
    Ok(obj)
}

/// Memory rows with the logits stored when they were written.
pub struct LogitReplay<'a, F> {
    pub images: &'a Array4<F>,
    pub stored_logits: &'a Array2<F>,
}

/// Memory rows replayed with their labels.
pub struct LabelReplay<'a, F> {
    pub images: &'a Array4<F>,
    pub labels: &'a [usize],
}

/// DER++: `CE(stream) + alpha_d * MSE(S(mem_a), stored) + beta_d * CE(S(mem_b), y_b)`.
///
/// Empty or missing memory draws contribute nothing.
pub fn derpp_loss<F: Scalar>(
    stream_x: &Array4<F>,
    stream_y: &[usize],
    mem_a: Option<LogitReplay<'_, F>>,
    mem_b: Option<LabelReplay<'_, F>>,
    alpha_d: f64,
    beta_d: f64,
    student: &Classifier<F>,
) -> Result<Objective<F>> {
    let mut obj = er_objective(student, stream_x, stream_y)?;
    let mut extra = 0.0;
    if let Some(a) = mem_a.filter(|a| a.images.dim().0 > 0) {
        let (logits, tape) = student.forward_train(a.images)?;
        let (value, d) = mse(logits.view(), a.stored_logits.view())?;
        extra += alpha_d * value;
        obj.push(tape, d * F::of(alpha_d));
    }
    if let Some(b) = mem_b.filter(|b| b.images.dim().0 > 0) {
        let (logits, tape) = student.forward_train(b.images)?;
        let (value, d) = cross_entropy(logits.view(), b.labels)?;
        extra += beta_d * value;
        obj.push(tape, d * F::of(beta_d));
    }
    obj.breakdown = LossBreakdown::new(obj.breakdown.ce, 0.0, extra);
    Ok(obj)
}

/// ER-ACE: stream rows see a softmax restricted to `current_classes`, memory
/// rows the full softmax; the loss is the mean over all rows.
pub fn erace_loss<F: Scalar>(
    stream_x: &Array4<F>,
    stream_y: &[usize],
    mem: Option<LabelReplay<'_, F>>,
    current_classes: &[usize],
    student: &Classifier<F>,
) -> Result<Objective<F>> {
    let n_classes = student.arch.n_classes();
    let mut allowed = vec![false; n_classes];
    for &c in current_classes {
        if c >= n_classes {
            return Err(Error::InvalidValue(format!("class {c} outside {n_classes} classes")));
        }
        allowed[c] = true;
    }
    let n_stream = stream_y.len();
    let mem = mem.filter(|m| m.images.dim().0 > 0);
    let (x, y) = match &mem {
        Some(m) => (
            concatenate![Axis(0), stream_x.view(), m.images.view()],
            [stream_y, m.labels].concat(),
        ),
        None => (stream_x.to_owned(), stream_y.to_vec()),
    };
    if y.is_empty() {
        return Err(Error::Empty("ER-ACE batch"));
    }
    let (logits, tape) = student.forward_train(&x)?;
    let (sum, grad) = ce_sum(logits.view(), &y, Some((&allowed, n_stream)))?;
    let n = y.len() as f64;
    let mut obj = Objective::new(LossBreakdown::new(sum / n, 0.0, 0.0));
    obj.push(tape, grad * F::of(1.0 / n));
    obj.logits = Some(logits);
    Ok(obj)
}

/// Fixed-snapshot distillation: `CE + lambda * KL(frozen || student)`, or
/// plain CE before any snapshot exists.
pub fn snapshot_kd_loss<F: Scalar>(
    x: &Array4<F>,
    y: &[usize],
    student: &Classifier<F>,
    frozen: Option<&Classifier<F>>,
    lambda: f64,
    tau: f64,
) -> Result<Objective<F>> {
    let (logits, tape) = student.forward_train(x)?;
    let (ce, mut d) = cross_entropy(logits.view(), y)?;
    let mut distill = 0.0;
    if let Some(frozen) = frozen {
        let t = frozen.forward(x)?;
        let (kl, dkl) = kl_distill(t.view(), logits.view(), tau)?;
        distill = lambda * kl;
        d = d + dkl * F::of(lambda);
    }
    let mut obj = Objective::new(LossBreakdown::new(ce, distill, 0.0));
    obj.push(tape, d);
    obj.logits = Some(logits);
    Ok(obj)
}
