//! Continual-learning metrics.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::replay::ReplayBuffer;
use crate::scalar::Scalar;

/// `a[k][i]`: accuracy on task `i` after finishing task `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    a: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(n_tasks: usize) -> Self {
        AccuracyMatrix {
            a: vec![vec![None; n_tasks]; n_tasks],
        }
    }

    /// Builds a fully populated matrix from rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let mut m = AccuracyMatrix::new(rows.len());
        for (k, row) in rows.iter().enumerate() {
            if row.len() != rows.len() {
                return Err(Error::shape(rows.len(), row.len()));
            }
            for (i, &v) in row.iter().enumerate() {
                m.set(k, i, v)?;
            }
        }
        Ok(m)
    }

    pub fn n_tasks(&self) -> usize {
        self.a.len()
    }

    pub fn set(&mut self, after_task: usize, task: usize, acc: f64) -> Result<()> {
        let k = self.n_tasks();
        if after_task >= k || task >= k {
            return Err(Error::InvalidValue(format!("entry ({after_task}, {task}) outside {k}x{k}")));
        }
        if !(0.0..=1.0).contains(&acc) {
            return Err(Error::InvalidValue(format!("accuracy {acc} outside [0, 1]")));
        }
        self.a[after_task][task] = Some(acc);
        Ok(())
    }

    pub fn get(&self, after_task: usize, task: usize) -> Option<f64> {
        self.a.get(after_task)?.get(task).copied().flatten()
    }

    fn require(&self, after_task: usize, task: usize) -> Result<f64> {
        self.get(after_task, task)
            .ok_or_else(|| Error::MissingMetric(format!("accuracy[{after_task}][{task}]")))
    }

    /// Rectangular text table; unrecorded entries print as `-`.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for row in &self.a {
            let cells: Vec<String> = row
                .iter()
                .map(|v| v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}")))
                .collect();
            let _ = writeln!(out, "{}", cells.join("\t"));
        }
        out
    }

    pub fn from_table(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let mut m = AccuracyMatrix::new(rows.len());
        for (k, line) in rows.iter().enumerate() {
            let cells: Vec<&str> = line.split('\t').collect();
            if cells.len() != rows.len() {
                return Err(Error::shape(rows.len(), cells.len()));
            }
            for (i, cell) in cells.iter().enumerate() {
                if *cell != "-" {
                    let v = cell
                        .trim()
                        .parse::<f64>()
                        .map_err(|e| Error::InvalidValue(format!("table cell `{cell}`: {e}")))?;
                    m.set(k, i, v)?;
                }
            }
        }
        Ok(m)
    }
}

/// Mean accuracy over all tasks after training on the last one.
pub fn final_avg_accuracy(m: &AccuracyMatrix) -> Result<f64> {
    let k = m.n_tasks();
    if k == 0 {
        return Err(Error::Empty("accuracy matrix"));
    }
    let mut sum = 0.0;
    for i in 0..k {
        sum += m.require(k - 1, i)?;
    }
    Ok(sum / k as f64)
}

/// Mean over earlier tasks of final accuracy minus accuracy right after
/// learning that task.
pub fn backward_transfer(m: &AccuracyMatrix) -> Result<f64> {
    let k = m.n_tasks();
    if k < 2 {
        return Err(Error::InvalidValue(format!(
            "backward transfer needs at least two tasks, got {k}"
        )));
    }
    let mut sum = 0.0;
    for i in 0..k - 1 {
        sum += m.require(k - 1, i)? - m.require(i, i)?;
    }
    Ok(sum / (k - 1) as f64)
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(labels.len(), predictions.len()));
    }
    if labels.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// `counts[i][j]` = number of samples with label `i` predicted as `j`.
pub fn confusion_matrix(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<Array2<u64>> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(labels.len(), predictions.len()));
    }
    let mut counts = Array2::zeros((n_classes, n_classes));
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= n_classes || l >= n_classes {
            return Err(Error::InvalidValue(format!(
                "class pair ({l}, {p}) outside {n_classes} classes"
            )));
        }
        counts[[l, p]] += 1;
    }
    Ok(counts)
}

/// Class means of `features` rows grouped by `labels`, for the classes present.
pub fn class_means(features: ArrayView2<f64>, labels: &[usize]) -> Result<Vec<(usize, Vec<f64>)>> {
    if features.nrows() != labels.len() {
        return Err(Error::shape(features.nrows(), labels.len()));
    }
    let mut acc: std::collections::BTreeMap<usize, (Vec<f64>, usize)> = Default::default();
    for (row, &l) in features.rows().into_iter().zip(labels) {
        let entry = acc.entry(l).or_insert_with(|| (vec![0.0; row.len()], 0));
        for (s, v) in entry.0.iter_mut().zip(row) {
            *s += v;
        }
        entry.1 += 1;
    }
    Ok(acc
        .into_iter()
        .map(|(c, (sum, n))| (c, sum.into_iter().map(|s| s / n as f64).collect()))
        .collect())
}

/// Nearest-class-mean predictions of `queries` given labelled `support`
/// features. Ties go to the smaller class id.
pub fn ncm_predict(support: ArrayView2<f64>, support_labels: &[usize], queries: ArrayView2<f64>) -> Result<Vec<usize>> {
    if support_labels.is_empty() {
        return Err(Error::Empty("NCM support set"));
    }
    if support.ncols() != queries.ncols() {
        return Err(Error::shape(support.ncols(), queries.ncols()));
    }
    let means = class_means(support, support_labels)?;
    Ok(queries
        .rows()
        .into_iter()
        .map(|q| {
            let mut best = (f64::INFINITY, means[0].0);
            for (c, mu) in &means {
                let d: f64 = q.iter().zip(mu).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best.0 {
                    best = (d, *c);
                }
            }
            best.1
        })
        .collect())
}

fn features_f64(model: &Classifier<f32>, x: &ndarray::Array4<f32>) -> Result<Array2<f64>> {
    Ok(model.features(x)?.mapv(f64::from))
}

/// Test accuracy of a nearest-class-mean classifier on the model's features,
/// with class means taken over the memory.
pub fn ncm_eval(
    model: &Classifier<f32>,
    memory: &ReplayBuffer,
    x_test: &ndarray::Array4<f32>,
    y_test: &[usize],
) -> Result<f64> {
    if memory.is_empty() {
        return Err(Error::Empty("memory"));
    }
    let mem = memory.all();
    let mut missing: Vec<usize> = y_test.iter().copied().filter(|c| !mem.labels.contains(c)).collect();
    missing.sort_unstable();
    missing.dedup();
    if !missing.is_empty() {
        return Err(Error::MissingClasses(missing));
    }
    let support = features_f64(model, &mem.images)?;
    let queries = features_f64(model, x_test)?;
    let pred = ncm_predict(support.view(), &mem.labels, queries.view())?;
    accuracy(&pred, y_test)
}

/// Frobenius norm of the difference of two feature matrices.
pub fn frobenius_distance<F: Scalar>(a: ArrayView2<F>, b: ArrayView2<F>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("{:?}", a.dim()), format!("{:?}", b.dim())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x.f64() - y.f64()).powi(2)).sum::<f64>().sqrt())
}

/// Change of the stacked old-class features between two models.
pub fn feature_drift<F: Scalar>(before: &Classifier<F>, after: &Classifier<F>, x_old: &ndarray::Array4<F>) -> Result<f64> {
    if x_old.dim().0 == 0 {
        return Err(Error::Empty("old-class probe set"));
    }
    let fa = before.features(x_old)?;
    let fb = after.features(x_old)?;
    frobenius_distance(fa.view(), fb.view())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DriftSeries {
    pub steps: Vec<u64>,
    pub d: Vec<f64>,
}

impl DriftSeries {
    pub fn push(&mut self, step: u64, d: f64) -> Result<()> {
        if self.steps.last().is_some_and(|&last| step <= last) {
            return Err(Error::InvalidValue(format!("drift step {step} not increasing")));
        }
        if !(d >= 0.0) {
            return Err(Error::InvalidValue(format!("drift value {d}")));
        }
        self.steps.push(step);
        self.d.push(d);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use ndarray::{array, Array4};
    use proptest::prelude::*;
    use rand::Rng as _;

    use super::*;
    use crate::model::{ArchSpec, Architecture};
    use crate::seed::{self, Stream};

    #[test]
    fn faa_cases() {
        let ones = AccuracyMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(final_avg_accuracy(&ones).unwrap(), 1.0);
        let m = AccuracyMatrix::from_rows(&[vec![0.9, 0.0], vec![0.8, 0.6]]).unwrap();
        assert!((final_avg_accuracy(&m).unwrap() - 0.7).abs() < 1e-12);
        let mut partial = AccuracyMatrix::new(2);
        partial.set(1, 0, 0.5).unwrap();
        assert!(matches!(final_avg_accuracy(&partial), Err(Error::MissingMetric(_))));
    }

    #[test]
    fn bt_cases() {
        let m = AccuracyMatrix::from_rows(&[vec![0.9, 0.0], vec![0.8, 0.6]]).unwrap();
        assert!((backward_transfer(&m).unwrap() + 0.1).abs() < 1e-12);
        let flat = AccuracyMatrix::from_rows(&[vec![0.7, 0.1, 0.0], vec![0.7, 0.5, 0.0], vec![0.7, 0.5, 0.3]]).unwrap();
        assert_eq!(backward_transfer(&flat).unwrap(), 0.0);
        let single = AccuracyMatrix::from_rows(&[vec![0.4]]).unwrap();
        assert!(backward_transfer(&single).is_err());
        assert_eq!(final_avg_accuracy(&single).unwrap(), 0.4);
    }

    #[test]
    fn matrix_rejects_bad_entries() {
        let mut m = AccuracyMatrix::new(2);
        assert!(m.set(0, 0, 1.5).is_err());
        assert!(m.set(2, 0, 0.5).is_err());
        assert!(m.set(0, 0, f64::NAN).is_err());
    }

    #[test]
    fn table_round_trip() {
        let mut m = AccuracyMatrix::new(3);
        m.set(0, 0, 0.25).unwrap();
        m.set(2, 1, 0.5).unwrap();
        let text = m.to_table();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(AccuracyMatrix::from_table(&text).unwrap(), m);
    }

    #[test]
    fn confusion_cases() {
        let labels = [0, 1, 2, 2, 1];
        let perfect = confusion_matrix(&labels, &labels, 3).unwrap();
        assert_eq!(perfect, Array2::from_diag(&array![1u64, 2, 2]));
        let constant = confusion_matrix(&[1; 5], &labels, 3).unwrap();
        assert_eq!(constant.column(1).sum(), 5);
        assert_eq!(constant.sum(), 5);
        assert!(confusion_matrix(&[3], &[0], 3).is_err());
        assert!(confusion_matrix(&[0, 1], &[0], 3).is_err());
    }

    #[test]
    fn confusion_matches_tally() {
        let mut rng = seed::rng(3, Stream::Dataset);
        let labels: Vec<usize> = (0..200).map(|_| rng.random_range(0..6)).collect();
        let preds: Vec<usize> = (0..200).map(|_| rng.random_range(0..6)).collect();
        let m = confusion_matrix(&preds, &labels, 6).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let n = labels.iter().zip(&preds).filter(|&(&l, &p)| l == i && p == j).count();
                assert_eq!(m[[i, j]], n as u64);
            }
            assert_eq!(m.row(i).sum(), labels.iter().filter(|&&l| l == i).count() as u64);
        }
    }

    // Brute-force nearest mean: compare every query with every mean.
    fn ncm_oracle(support: &[Vec<f64>], labels: &[usize], queries: &[Vec<f64>]) -> Vec<usize> {
        let mut classes: Vec<usize> = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        let means: Vec<Vec<f64>> = classes
            .iter()
            .map(|&c| {
                let rows: Vec<&Vec<f64>> = support.iter().zip(labels).filter(|(_, &l)| l == c).map(|(r, _)| r).collect();
                (0..support[0].len()).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64).collect()
            })
            .collect();
        queries
            .iter()
            .map(|q| {
                let d: Vec<f64> = means.iter().map(|m| m.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum()).collect();
                let best = (0..d.len()).fold(0, |b, i| if d[i] < d[b] { i } else { b });
                classes[best]
            })
            .collect()
    }

    fn to_array(rows: &[Vec<f64>]) -> Array2<f64> {
        Array2::from_shape_fn((rows.len(), rows[0].len()), |(i, j)| rows[i][j])
    }

    #[test]
    fn ncm_single_class_predicts_it() {
        let support = array![[1.0, 2.0], [3.0, 4.0]];
        let queries = array![[9.0, 9.0], [-5.0, 0.0], [0.0, 0.0]];
        let pred = ncm_predict(support.view(), &[4, 4], queries.view()).unwrap();
        assert_eq!(pred, vec![4, 4, 4]);
        // accuracy equals the share of that class among the queries
        assert!((accuracy(&pred, &[4, 1, 4]).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn ncm_separated_clusters() {
        let mut rng = seed::rng(4, Stream::Dataset);
        let mut pts = |cx: f64, n: usize| -> Vec<Vec<f64>> {
            (0..n).map(|_| vec![cx + rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)]).collect()
        };
        let support = [pts(0.0, 5), pts(10.0, 5)].concat();
        let queries = [pts(0.0, 20), pts(10.0, 20)].concat();
        let ys: Vec<usize> = [vec![0; 5], vec![1; 5]].concat();
        let yq: Vec<usize> = [vec![0; 20], vec![1; 20]].concat();
        let pred = ncm_predict(to_array(&support).view(), &ys, to_array(&queries).view()).unwrap();
        assert_eq!(accuracy(&pred, &yq).unwrap(), 1.0);
    }

    #[test]
    fn ncm_matches_brute_force() {
        let mut rng = seed::rng(5, Stream::Dataset);
        for _ in 0..50 {
            let support: Vec<Vec<f64>> = (0..12).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let labels: Vec<usize> = (0..12).map(|i| i % 4).collect();
            let queries: Vec<Vec<f64>> = (0..20).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let pred = ncm_predict(to_array(&support).view(), &labels, to_array(&queries).view()).unwrap();
            assert_eq!(pred, ncm_oracle(&support, &labels, &queries));
        }
    }

    #[test]
    fn ncm_invariant_to_rotation() {
        let mut rng = seed::rng(6, Stream::Dataset);
        let support = Array2::from_shape_fn((10, 2), |_| rng.random_range(-1.0..1.0));
        let queries = Array2::from_shape_fn((30, 2), |_| rng.random_range(-1.0..1.0));
        let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
        let t: f64 = 0.7;
        let rot = array![[t.cos(), -t.sin()], [t.sin(), t.cos()]];
        let a = ncm_predict(support.view(), &labels, queries.view()).unwrap();
        let b = ncm_predict(support.dot(&rot).view(), &labels, queries.dot(&rot).view()).unwrap();
        assert_eq!(a, b);
    }

    fn net(seed: u64) -> Classifier<f32> {
        let arch = Arc::new(Architecture::new(ArchSpec::mlp((1, 2, 2), vec![6], 3, 2)).unwrap());
        Classifier::new(arch, &mut seed::rng(seed, Stream::Init))
    }

    #[test]
    fn ncm_eval_reports_missing_classes() {
        let model = net(0);
        let mut mem = ReplayBuffer::new(4, (1, 2, 2), 2);
        let mut rng = seed::rng(0, Stream::Reservoir);
        mem.offer(&[0.1, 0.2, 0.3, 0.4], 0, None, &mut rng).unwrap();
        let x = Array4::<f32>::zeros((3, 1, 2, 2));
        assert!(matches!(ncm_eval(&model, &mem, &x, &[0, 1, 1]), Err(Error::MissingClasses(c)) if c == vec![1]));
        assert_eq!(ncm_eval(&model, &mem, &x, &[0, 0, 0]).unwrap(), 1.0);
        let empty = ReplayBuffer::new(4, (1, 2, 2), 2);
        assert!(ncm_eval(&model, &empty, &x, &[0, 0, 0]).is_err());
    }

    #[test]
    fn drift_cases() {
        let m = net(1);
        let x = Array4::from_shape_fn((5, 1, 2, 2), |(b, _, i, j)| (b + i + 2 * j) as f32 * 0.1);
        assert_eq!(feature_drift(&m, &m.clone(), &x).unwrap(), 0.0);
        assert!(feature_drift(&m, &m, &Array4::zeros((0, 1, 2, 2))).is_err());

        let a = array![[1.0f64, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let b = &a + &array![[0.3, -0.4]];
        let d = frobenius_distance(a.view(), b.view()).unwrap();
        assert!((d - 3f64.sqrt() * 0.5).abs() < 1e-12);
    }

    #[test]
    fn drift_matches_elementwise_oracle() {
        let mut rng = seed::rng(7, Stream::Dataset);
        let a = Array2::from_shape_fn((3, 4), |_| rng.random_range(-2.0..2.0));
        let b = Array2::from_shape_fn((3, 4), |_| rng.random_range(-2.0..2.0));
        let mut sum = 0.0f64;
        for i in 0..3 {
            for j in 0..4 {
                sum += (a[[i, j]] - b[[i, j]]) * (a[[i, j]] - b[[i, j]]);
            }
        }
        assert!((frobenius_distance(a.view(), b.view()).unwrap() - sum.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn drift_series_validation() {
        let mut s = DriftSeries::default();
        s.push(0, 0.5).unwrap();
        s.push(50, 0.0).unwrap();
        assert!(s.push(50, 1.0).is_err());
        assert!(s.push(60, -1.0).is_err());
        assert_eq!(s.len(), 2);
    }

    proptest! {
        #[test]
        fn summaries_invariant_to_task_relabeling(vals in proptest::collection::vec(0.0f64..=1.0, 25), perm_seed in 0u64..1000) {
            let rows: Vec<Vec<f64>> = vals.chunks(5).map(|c| c.to_vec()).collect();
            // permute the earlier tasks on both axes; the last task stays last
            let mut perm: Vec<usize> = (0..4).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut seed::rng(perm_seed, Stream::Shuffle));
            perm.push(4);
            let relabeled: Vec<Vec<f64>> = (0..5).map(|k| (0..5).map(|i| rows[perm[k]][perm[i]]).collect()).collect();
            let a = AccuracyMatrix::from_rows(&rows).unwrap();
            let b = AccuracyMatrix::from_rows(&relabeled).unwrap();
            prop_assert!((final_avg_accuracy(&a).unwrap() - final_avg_accuracy(&b).unwrap()).abs() < 1e-12);
            prop_assert!((backward_transfer(&a).unwrap() - backward_transfer(&b).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn drift_symmetric_and_triangle(vals in proptest::collection::vec(-3.0f64..3.0, 36)) {
            let a = Array2::from_shape_vec((3, 4), vals[..12].to_vec()).unwrap();
            let b = Array2::from_shape_vec((3, 4), vals[12..24].to_vec()).unwrap();
            let c = Array2::from_shape_vec((3, 4), vals[24..].to_vec()).unwrap();
            let ab = frobenius_distance(a.view(), b.view()).unwrap();
            let ba = frobenius_distance(b.view(), a.view()).unwrap();
            let bc = frobenius_distance(b.view(), c.view()).unwrap();
            let ac = frobenius_distance(a.view(), c.view()).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ac <= ab + bc + 1e-12);
        }
    }
}
