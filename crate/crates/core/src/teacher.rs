//! Momentum (EMA) teacher.
//!
//! After every optimizer step the teacher moves towards the student:
//! `teacher <- alpha * student + (1 - alpha) * teacher`. Small `alpha` gives a
//! slow, stable teacher that remembers older tasks; large `alpha` tracks the
//! student closely. The distillation weight is tied to `alpha` through
//! [`lambda_of_alpha`].

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Architecture, Classifier};
use crate::scalar::Scalar;

/// Slope of the distillation weight in `log10(alpha)`.
pub const LAMBDA_SLOPE: f64 = 9.0 / 2.0;
/// Distillation weight at `alpha = 1`.
pub const LAMBDA_INTERCEPT: f64 = 29.0 / 2.0;

/// `lambda = 4.5 * log10(alpha) + 14.5`, clamped below at zero.
pub fn lambda_of_alpha(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidValue(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    Ok((LAMBDA_SLOPE * alpha.log10() + LAMBDA_INTERCEPT).max(0.0))
}

/// Loss settings of momentum distillation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub alpha: f64,
    pub lambda_alpha: f64,
    pub tau: f64,
    pub multiview: bool,
}

impl DistillConfig {
    /// Config with `lambda_alpha` derived from `alpha`.
    pub fn from_alpha(alpha: f64) -> Result<Self> {
        Ok(DistillConfig {
            alpha,
            lambda_alpha: lambda_of_alpha(alpha)?,
            tau: 4.0,
            multiview: true,
        })
    }

    pub fn with_lambda(mut self, lambda_alpha: f64) -> Result<Self> {
        if !(lambda_alpha >= 0.0) {
            return Err(Error::InvalidValue(format!("lambda must be non-negative, got {lambda_alpha}")));
        }
        self.lambda_alpha = lambda_alpha;
        Ok(self)
    }
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig::from_alpha(0.01).expect("0.01 is a valid alpha")
    }
}

/// EMA copy of the student.
#[derive(Debug, Clone)]
pub struct TeacherState<F> {
    model: Classifier<F>,
    alpha: f64,
    n_updates: u64,
}

impl<F: Scalar> TeacherState<F> {
    /// Starts as an exact copy of `student`.
    pub fn new(student: &Classifier<F>, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidValue(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        Ok(TeacherState {
            model: student.clone(),
            alpha,
            n_updates: 0,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn n_updates(&self) -> u64 {
        self.n_updates
    }

    pub fn params(&self) -> &[F] {
        &self.model.params
    }

    /// The teacher as an inference model.
    pub fn model(&self) -> &Classifier<F> {
        &self.model
    }

    pub fn arch(&self) -> &Arc<Architecture> {
        &self.model.arch
    }

    /// One EMA step towards `student_params`.
    pub fn ema_update(&mut self, student_params: &[F]) -> Result<()> {
        let teacher = &mut self.model.params;
        if teacher.len() != student_params.len() {
            return Err(Error::Layout {
                left: teacher.len(),
                right: student_params.len(),
            });
        }
        let a = F::of(self.alpha);
        let keep = F::one() - a;
        for (t, &s) in teacher.iter_mut().zip(student_params) {
            *t = a * s + keep * *t;
        }
        self.n_updates += 1;
        Ok(())
    }
}

/// Elementwise mean of two parameter vectors.
pub fn average_weights<F: Scalar>(student: &[F], teacher: &[F]) -> Result<Vec<F>> {
    if student.len() != teacher.len() {
        return Err(Error::Layout {
            left: student.len(),
            right: teacher.len(),
        });
    }
    let half = F::of(0.5);
    Ok(student.iter().zip(teacher).map(|(&s, &t)| half * (s + t)).collect())
}

/// Which weights answer at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceMode {
    Student,
    Teacher,
    Averaged,
}

impl InferenceMode {
    pub const ALL: [InferenceMode; 3] = [InferenceMode::Student, InferenceMode::Teacher, InferenceMode::Averaged];

    pub fn name(self) -> &'static str {
        match self {
            InferenceMode::Student => "student",
            InferenceMode::Teacher => "teacher",
            InferenceMode::Averaged => "averaged",
        }
    }
}

impl std::str::FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "student" => Ok(InferenceMode::Student),
            "teacher" => Ok(InferenceMode::Teacher),
            "averaged" => Ok(InferenceMode::Averaged),
            _ => Err(Error::InvalidValue(format!("inference mode `{s}`"))),
        }
    }
}

/// Builds the evaluation model for `mode`. Without a teacher every mode
/// falls back to the student.
pub fn inference_model<F: Scalar>(
    student: &Classifier<F>,
    teacher: Option<&TeacherState<F>>,
    mode: InferenceMode,
) -> Result<Classifier<F>> {
    match (mode, teacher) {
        (InferenceMode::Student, _) | (_, None) => Ok(student.clone()),
        (InferenceMode::Teacher, Some(t)) => Ok(t.model().clone()),
        (InferenceMode::Averaged, Some(t)) => {
            Classifier::from_params(student.arch.clone(), average_weights(&student.params, t.params())?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchSpec;
    use crate::seed::{self, Stream};
    use proptest::prelude::*;

    fn student(seed: u64) -> Classifier<f64> {
        let arch = Arc::new(Architecture::new(ArchSpec::mlp((1, 2, 2), vec![3], 3, 2)).unwrap());
        Classifier::new(arch, &mut seed::rng(seed, Stream::Init))
    }

    #[test]
    fn lambda_reference_points() {
        assert_eq!(lambda_of_alpha(0.01).unwrap(), 5.5);
        assert!((lambda_of_alpha(1.0).unwrap() - 14.5).abs() < 1e-12);
        assert!((lambda_of_alpha(0.1).unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn lambda_clamps_and_rejects() {
        assert_eq!(lambda_of_alpha(1e-4).unwrap(), 0.0);
        assert!(lambda_of_alpha(0.0).is_err());
        assert!(lambda_of_alpha(-0.5).is_err());
        assert!(lambda_of_alpha(1.5).is_err());
    }

    #[test]
    fn distill_defaults() {
        let cfg = DistillConfig::default();
        assert_eq!((cfg.alpha, cfg.lambda_alpha, cfg.tau, cfg.multiview), (0.01, 5.5, 4.0, true));
        assert!(cfg.with_lambda(-1.0).is_err());
    }

    #[test]
    fn alpha_one_copies_student() {
        let s = student(0);
        let mut t = TeacherState::new(&student(1), 1.0).unwrap();
        t.ema_update(&s.params).unwrap();
        assert_eq!(t.params(), &s.params[..]);
        assert_eq!(t.n_updates(), 1);
    }

    #[test]
    fn alpha_zero_freezes_teacher() {
        let start = student(1);
        let mut t = TeacherState::new(&start, 0.0).unwrap();
        t.ema_update(&student(0).params).unwrap();
        assert_eq!(t.params(), &start.params[..]);
    }

    #[test]
    fn scalar_ema_arithmetic() {
        let arch = Arc::new(Architecture::new(ArchSpec::mlp((1, 1, 1), vec![], 1, 1)).unwrap());
        let zeros = Classifier::from_params(arch.clone(), vec![0.0; arch.n_params()]).unwrap();
        let mut t = TeacherState::new(&zeros, 0.01).unwrap();
        t.ema_update(&vec![1.0; arch.n_params()]).unwrap();
        assert!(t.params().iter().all(|&v| (v - 0.01f64).abs() < 1e-15));
    }

    #[test]
    fn layout_mismatch() {
        let mut t = TeacherState::new(&student(0), 0.5).unwrap();
        assert!(matches!(t.ema_update(&[1.0]), Err(Error::Layout { .. })));
        assert!(average_weights(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn averaging_cases() {
        assert_eq!(average_weights(&[0.0], &[2.0]).unwrap(), vec![1.0]);
        let a = [0.3, -1.0, 2.5];
        assert_eq!(average_weights(&a, &a).unwrap(), a.to_vec());
    }

    #[test]
    fn inference_modes() {
        let s = student(0);
        let mut t = TeacherState::new(&s, 1.0).unwrap();
        t.ema_update(&student(1).params).unwrap();
        let avg = inference_model(&s, Some(&t), InferenceMode::Averaged).unwrap();
        assert_eq!(avg.params, average_weights(&s.params, t.params()).unwrap());
        assert_eq!(inference_model(&s, Some(&t), InferenceMode::Teacher).unwrap().params, t.params());
        assert_eq!(inference_model(&s, None, InferenceMode::Teacher).unwrap().params, s.params);
    }

    proptest! {
        #[test]
        fn averaging_is_symmetric(a in proptest::collection::vec(-10.0f64..10.0, 1..20), shift in -3.0f64..3.0) {
            let b: Vec<f64> = a.iter().map(|v| v * 0.7 + shift).collect();
            prop_assert_eq!(average_weights(&a, &b).unwrap(), average_weights(&b, &a).unwrap());
        }

        #[test]
        fn frozen_student_contracts_geometrically(alpha in 0.001f64..0.5, steps in 1u32..200) {
            let s = student(3);
            let mut t = TeacherState::new(&student(4), alpha).unwrap();
            let gap0: f64 = t.params().iter().zip(&s.params).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            for _ in 0..steps {
                t.ema_update(&s.params).unwrap();
            }
            let gap: f64 = t.params().iter().zip(&s.params).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let expected = (1.0 - alpha).powi(steps as i32) * gap0;
            prop_assert!((gap - expected).abs() <= 1e-9 * gap0);
        }
    }
}
