//! Open-world inference against category embeddings and the base/novel
//! segmentation metric suite.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::IGNORE;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub categories: Vec<String>,
    pub base: Vec<usize>,
    pub novel: Vec<usize>,
    /// Background classes left out of the foreground metrics.
    #[serde(default)]
    pub foreground_excluded: Vec<usize>,
}

impl PartitionSpec {
    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.len();
        let base: BTreeSet<usize> = self.base.iter().copied().collect();
        let novel: BTreeSet<usize> = self.novel.iter().copied().collect();
        if base.len() != self.base.len() || novel.len() != self.novel.len() {
            return Err(Error::config("partition lists contain duplicates"));
        }
        if base.intersection(&novel).next().is_some() {
            return Err(Error::config("partition base and novel sets overlap"));
        }
        if base.len() + novel.len() != k || base.iter().chain(&novel).any(|&c| c >= k) {
            return Err(Error::config("partition base and novel sets must cover every category exactly"));
        }
        if self.foreground_excluded.iter().any(|&c| c >= k) {
            return Err(Error::config("partition foreground_excluded index out of range"));
        }
        Ok(())
    }

    /// Same partition with class `i` renamed to `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut categories = self.categories.clone();
        for (i, c) in self.categories.iter().enumerate() {
            categories[perm[i]] = c.clone();
        }
        let map = |v: &[usize]| v.iter().map(|&c| perm[c]).collect();
        Self {
            categories,
            base: map(&self.base),
            novel: map(&self.novel),
            foreground_excluded: map(&self.foreground_excluded),
        }
    }
}

/// Row-softmax of `scale * features * class_embeddings^T`.
pub fn infer_scores(features: &Array2<f64>, class_embeddings: &Array2<f64>, scale: f64) -> Result<Array2<f64>> {
    if features.ncols() != class_embeddings.ncols() {
        return Err(Error::invalid("feature and class embedding dimensions differ"));
    }
    if class_embeddings.nrows() == 0 {
        return Err(Error::invalid("no class embeddings"));
    }
    if !(scale > 0.0) {
        return Err(Error::invalid("logit scale must be positive"));
    }
    let mut s = features.dot(&class_embeddings.t()) * scale;
    for mut row in s.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    Ok(s)
}

/// Per-row argmax; the first maximal column wins ties.
pub fn predict_labels(scores: &Array2<f64>) -> Vec<u16> {
    scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best as u16
        })
        .collect()
}

/// `counts[gt][pred]` over points whose ground truth is not `ignore`.
pub fn confusion_matrix(pred: &[u16], gt: &[u16], k: usize, ignore: u16) -> Result<Array2<u64>> {
    if pred.len() != gt.len() {
        return Err(Error::invalid("prediction and ground-truth lengths differ"));
    }
    let mut conf = Array2::zeros((k, k));
    for (&p, &g) in pred.iter().zip(gt) {
        if g == ignore {
            continue;
        }
        if g as usize >= k || p as usize >= k {
            return Err(Error::invalid(format!("label {} out of range for {k} classes", g.max(p))));
        }
        conf[(g as usize, p as usize)] += 1;
    }
    Ok(conf)
}

pub fn confusion_matrix_default(pred: &[u16], gt: &[u16], k: usize) -> Result<Array2<u64>> {
    confusion_matrix(pred, gt, k, IGNORE)
}

/// All values are percentages. `None` marks a class with no ground truth and
/// no predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou_base: f64,
    pub miou_novel: f64,
    pub hiou: f64,
    pub miou_fg: f64,
    pub macc_fg: f64,
}

pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

fn mean_defined<'a>(vals: impl Iterator<Item = &'a Option<f64>>) -> f64 {
    let (sum, n) = vals.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn compute_metrics(conf: &Array2<u64>, partition: &PartitionSpec) -> Result<MetricReport> {
    let k = partition.len();
    if conf.dim() != (k, k) {
        return Err(Error::invalid(format!("confusion matrix is {:?}, partition has {k} classes", conf.dim())));
    }
    let mut iou = Vec::with_capacity(k);
    let mut recall = Vec::with_capacity(k);
    for c in 0..k {
        let tp = conf[(c, c)];
        let gt: u64 = conf.row(c).sum();
        let pred: u64 = conf.column(c).sum();
        let denom = gt + pred - tp;
        iou.push((denom > 0).then(|| 100.0 * tp as f64 / denom as f64));
        recall.push((gt > 0).then(|| 100.0 * tp as f64 / gt as f64));
    }
    let miou_base = mean_defined(partition.base.iter().map(|&c| &iou[c]));
    let miou_novel = mean_defined(partition.novel.iter().map(|&c| &iou[c]));
    let fg: Vec<usize> = (0..k).filter(|c| !partition.foreground_excluded.contains(c)).collect();
    Ok(MetricReport {
        hiou: harmonic_mean(miou_base, miou_novel),
        miou_fg: mean_defined(fg.iter().map(|&c| &iou[c])),
        macc_fg: mean_defined(fg.iter().map(|&c| &recall[c])),
        per_class_iou: iou,
        miou_base,
        miou_novel,
    })
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metric report serializes")
    }

    /// Aligned table: headline row `hIoU / mIoU^B / mIoU^N`, foreground
    /// metrics, then per-class IoU.
    pub fn to_table(&self, categories: &[String]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>8} {:>8} {:>8} {:>8} {:>8}", "hIoU", "mIoU^B", "mIoU^N", "mIoU_fg", "mAcc_fg");
        let _ = writeln!(
            s,
            "{:>8.1} {:>8.1} {:>8.1} {:>8.1} {:>8.1}",
            self.hiou, self.miou_base, self.miou_novel, self.miou_fg, self.macc_fg
        );
        let width = categories.iter().map(|c| c.len()).max().unwrap_or(5).max(5);
        for (i, v) in self.per_class_iou.iter().enumerate() {
            let name = categories.get(i).map(String::as_str).unwrap_or("?");
            match v {
                Some(v) => {
                    let _ = writeln!(s, "{name:<width$} {v:>8.1}");
                }
                None => {
                    let _ = writeln!(s, "{name:<width$} {:>8}", "-");
                }
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn part4() -> PartitionSpec {
        PartitionSpec {
            categories: ["wall", "chair", "table", "lamp"].map(String::from).to_vec(),
            base: vec![0, 2],
            novel: vec![1, 3],
            foreground_excluded: vec![0],
        }
    }

    #[test]
    fn orthogonal_feature_gives_uniform_row() {
        let s = infer_scores(&array![[0.0, 0.0, 1.0]], &array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], 100.0).unwrap();
        assert_eq!(s, array![[0.5, 0.5]]);
        assert_eq!(predict_labels(&s), vec![0]);
    }

    #[test]
    fn saturated_scores() {
        let s = infer_scores(&array![[1.0, 0.0]], &array![[1.0, 0.0], [0.0, 1.0]], 1000.0).unwrap();
        assert!((s[(0, 0)] - 1.0).abs() < 1e-12 && s[(0, 1)] < 1e-12);
        assert!(infer_scores(&array![[1.0, 0.0]], &array![[1.0, 0.0, 0.0]], 1.0).is_err());
    }

    #[test]
    fn random_scores_rows_and_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = crate::learn::gradcheck::random_unit_rows(&mut rng, 200, 8);
        let e = crate::learn::gradcheck::random_unit_rows(&mut rng, 6, 8);
        let a = infer_scores(&f, &e, 50.0).unwrap();
        let b = infer_scores(&f, &e, 100.0).unwrap();
        for r in a.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-6);
        }
        assert_eq!(predict_labels(&a), predict_labels(&b));
    }

    #[test]
    fn predict_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Array2::from_shape_fn((1000, 7), |_| (rng.random_range(0..5) as f64) / 4.0);
        let pred = predict_labels(&s);
        for (i, row) in s.rows().into_iter().enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let first = row.iter().position(|&v| v == max).unwrap();
            assert_eq!(pred[i] as usize, first);
        }
    }

    #[test]
    fn confusion_cases() {
        let gt = vec![0u16, 1, 1, 2];
        let c = confusion_matrix(&gt, &gt, 3, IGNORE).unwrap();
        assert_eq!(c, Array2::from_diag(&array![1u64, 2, 1]));
        assert_eq!(confusion_matrix(&gt, &[IGNORE; 4], 3, IGNORE).unwrap(), Array2::<u64>::zeros((3, 3)));
        assert!(confusion_matrix(&[5], &[0], 3, IGNORE).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p: Vec<u16> = (0..500).map(|_| rng.random_range(0..10)).collect();
        let g: Vec<u16> = (0..500).map(|_| rng.random_range(0..10)).collect();
        let c = confusion_matrix(&p, &g, 10, IGNORE).unwrap();
        for a in 0..10 {
            for b in 0..10 {
                let naive = (0..500).filter(|&i| g[i] == a && p[i] == b).count() as u64;
                assert_eq!(c[(a as usize, b as usize)], naive);
            }
        }
    }

    #[test]
    fn perfect_predictions() {
        let m = compute_metrics(&Array2::from_diag(&array![5u64, 3, 0, 9]), &part4()).unwrap();
        assert_eq!(m.per_class_iou, vec![Some(100.0), Some(100.0), None, Some(100.0)]);
        assert_eq!((m.miou_base, m.miou_novel, m.hiou), (100.0, 100.0, 100.0));
        assert_eq!((m.miou_fg, m.macc_fg), (100.0, 100.0));
    }

    #[test]
    fn hand_computed_metrics() {
        // class 0: tp 2, fn 1 (to 1); class 1: tp 1, fp 1.
        let conf = array![[2u64, 1, 0, 0], [0, 1, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0]];
        let m = compute_metrics(&conf, &part4()).unwrap();
        assert_eq!(m.per_class_iou, vec![Some(200.0 / 3.0), Some(50.0), None, None]);
        assert!((m.miou_base - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.miou_novel, 50.0);
        assert_eq!(m.miou_fg, 50.0);
        assert_eq!(m.macc_fg, 100.0);
    }

    #[test]
    fn zero_hiou_convention() {
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
        let conf = array![[0u64, 4], [3, 0]];
        let p = PartitionSpec {
            categories: vec!["a".into(), "b".into()],
            base: vec![0],
            novel: vec![1],
            foreground_excluded: vec![],
        };
        assert_eq!(compute_metrics(&conf, &p).unwrap().hiou, 0.0);
        assert!(compute_metrics(&Array2::zeros((3, 3)), &p).is_err());
    }

    #[test]
    fn partition_validation() {
        assert!(part4().validate().is_ok());
        let mut p = part4();
        p.novel.push(0);
        assert!(p.validate().is_err());
        let mut p = part4();
        p.novel.pop();
        assert!(p.validate().is_err());
    }

    #[test]
    fn table_ordering() {
        let m = compute_metrics(&Array2::from_diag(&array![1u64, 1, 1, 1]), &part4()).unwrap();
        let t = m.to_table(&part4().categories);
        let head = t.lines().next().unwrap();
        let h = head.find("hIoU").unwrap();
        let b = head.find("mIoU^B").unwrap();
        let n = head.find("mIoU^N").unwrap();
        assert!(h < b && b < n);
        let json: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(json["hiou"], 100.0);
    }

    proptest! {
        #[test]
        fn hiou_bounds(a in 0.0..100.0f64, b in 0.0..100.0f64) {
            let h = harmonic_mean(a, b);
            prop_assert!(h <= 2.0 * a.min(b) + 1e-9);
            prop_assert!(h <= a.max(b) + 1e-9);
            prop_assert!((harmonic_mean(a, a) - a).abs() < 1e-9);
        }

        #[test]
        fn metrics_invariant_to_class_permutation(
            counts in proptest::collection::vec(0u64..20, 16),
            perm in Just((0..4).collect::<Vec<usize>>()).prop_shuffle(),
        ) {
            let conf = Array2::from_shape_vec((4, 4), counts).unwrap();
            let mut pc = Array2::zeros((4, 4));
            for g in 0..4 {
                for p in 0..4 {
                    pc[(perm[g], perm[p])] = conf[(g, p)];
                }
            }
            let a = compute_metrics(&conf, &part4()).unwrap();
            let b = compute_metrics(&pc, &part4().permuted(&perm)).unwrap();
            for (x, y) in [(a.miou_base, b.miou_base), (a.miou_novel, b.miou_novel), (a.hiou, b.hiou),
                           (a.miou_fg, b.miou_fg), (a.macc_fg, b.macc_fg)] {
                prop_assert!((x - y).abs() < 1e-9);
            }
            for c in 0..4 {
                prop_assert_eq!(a.per_class_iou[c], b.per_class_iou[perm[c]]);
            }
        }
    }
}
