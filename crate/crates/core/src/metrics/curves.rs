//! ROC and precision-recall curves with "fake" as the positive class.

use serde::{Deserialize, Serialize};

use crate::error::bail_arg;
use crate::{Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Truth {
    Real,
    Fake,
}

impl Truth {
    pub fn flipped(self) -> Self {
        match self {
            Truth::Real => Truth::Fake,
            Truth::Fake => Truth::Real,
        }
    }

    pub fn is_fake(self) -> bool {
        self == Truth::Fake
    }
}

impl std::fmt::Display for Truth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Truth::Real => "real",
            Truth::Fake => "fake",
        })
    }
}

impl std::str::FromStr for Truth {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "real" => Ok(Truth::Real),
            "fake" => Ok(Truth::Fake),
            other => Err(crate::Error::Format(format!("unknown label {other:?}"))),
        }
    }
}

/// Predicted probability of "fake" with its true label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredLabel<T> {
    pub score: T,
    pub label: Truth,
}

impl<T: Scalar> ScoredLabel<T> {
    pub fn new(score: T, label: Truth) -> Result<Self> {
        if !(score >= T::zero() && score <= T::one()) {
            bail_arg!("score {score} outside [0, 1]");
        }
        Ok(Self { score, label })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint<T> {
    /// Items scoring at or above this are called fake; `+inf` for the origin.
    pub threshold: T,
    pub fpr: T,
    pub tpr: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve<T> {
    pub points: Vec<RocPoint<T>>,
    pub auc: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint<T> {
    pub threshold: T,
    pub recall: T,
    pub precision: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve<T> {
    pub points: Vec<PrPoint<T>>,
    pub average_precision: T,
}

/// Cumulative (threshold, tp, fp) after each group of tied scores, in
/// decreasing score order.
fn threshold_counts<T: Scalar>(items: &[ScoredLabel<T>]) -> Result<Vec<(T, u64, u64)>> {
    if let Some(bad) = items.iter().find(|s| !(s.score >= T::zero() && s.score <= T::one())) {
        bail_arg!("score {} outside [0, 1]", bad.score);
    }
    let mut sorted: Vec<&ScoredLabel<T>> = items.iter().collect();
    sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("scores are finite"));
    let mut out: Vec<(T, u64, u64)> = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    for (i, s) in sorted.iter().enumerate() {
        if s.label.is_fake() {
            tp += 1;
        } else {
            fp += 1;
        }
        if i + 1 == sorted.len() || sorted[i + 1].score != s.score {
            out.push((s.score, tp, fp));
        }
    }
    Ok(out)
}

/// ROC points at every distinct threshold and the trapezoid AUC. The area is
/// accumulated in integers, so it equals the Mann-Whitney statistic
/// `(#{s_fake > s_real} + ½·#{ties}) / (P·N)` to the last bit.
pub fn roc_curve<T: Scalar>(items: &[ScoredLabel<T>]) -> Result<RocCurve<T>> {
    let pos = items.iter().filter(|s| s.label.is_fake()).count() as u64;
    let neg = items.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        bail_arg!("ROC needs both real and fake items ({pos} fake, {neg} real)");
    }
    let counts = threshold_counts(items)?;
    let mut points = vec![RocPoint { threshold: T::infinity(), fpr: T::zero(), tpr: T::zero() }];
    let (mut prev_tp, mut prev_fp) = (0u64, 0u64);
    let mut twice_area: u128 = 0;
    for (thr, tp, fp) in counts {
        twice_area += ((fp - prev_fp) as u128) * ((tp + prev_tp) as u128);
        points.push(RocPoint {
            threshold: thr,
            fpr: T::lit(fp as f64 / neg as f64),
            tpr: T::lit(tp as f64 / pos as f64),
        });
        (prev_tp, prev_fp) = (tp, fp);
    }
    let auc = T::lit(twice_area as f64 / (2 * pos as u128 * neg as u128) as f64);
    Ok(RocCurve { points, auc })
}

/// Precision and recall at every distinct threshold; average precision is
/// the step sum `Σ (R_k − R_{k−1}) P_k`.
pub fn pr_curve<T: Scalar>(items: &[ScoredLabel<T>]) -> Result<PrCurve<T>> {
    let pos = items.iter().filter(|s| s.label.is_fake()).count() as u64;
    if pos == 0 {
        bail_arg!("precision-recall needs at least one fake item");
    }
    let mut points = Vec::new();
    let mut ap = 0.0f64;
    let mut prev_recall = 0.0f64;
    for (thr, tp, fp) in threshold_counts(items)? {
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        points.push(PrPoint { threshold: thr, recall: T::lit(recall), precision: T::lit(precision) });
    }
    Ok(PrCurve { points, average_precision: T::lit(ap) })
}

impl<T: Scalar> RocCurve<T> {
    /// TPR at `fpr`. On a vertical segment the highest TPR is taken; between
    /// points the curve is linear.
    pub fn tpr_at(&self, fpr: T) -> T {
        let pts = &self.points;
        let last = pts.iter().rposition(|p| p.fpr <= fpr).unwrap_or(0);
        let p = pts[last];
        if p.fpr == fpr || last + 1 == pts.len() {
            return p.tpr;
        }
        let q = pts[last + 1];
        p.tpr + (q.tpr - p.tpr) * (fpr - p.fpr) / (q.fpr - p.fpr)
    }
}

/// Vertical averaging: mean TPR of every curve at each grid FPR.
pub fn vertical_average<T: Scalar>(curves: &[RocCurve<T>], grid: &[T]) -> Result<Vec<T>> {
    if curves.is_empty() {
        bail_arg!("no curves to average");
    }
    if grid.iter().any(|&f| !(f >= T::zero() && f <= T::one())) {
        bail_arg!("FPR grid values must lie in [0, 1]");
    }
    let n = T::count(curves.len());
    Ok(grid.iter().map(|&f| curves.iter().map(|c| c.tpr_at(f)).sum::<T>() / n).collect())
}

pub fn roc_csv<T: Scalar>(curve: &RocCurve<T>) -> String {
    let mut s = String::from("threshold,fpr,tpr\n");
    for p in &curve.points {
        s.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
    }
    s
}

pub fn pr_csv<T: Scalar>(curve: &PrCurve<T>) -> String {
    let mut s = String::from("threshold,recall,precision\n");
    for p in &curve.points {
        s.push_str(&format!("{},{},{}\n", p.threshold, p.recall, p.precision));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn items(v: &[(f64, Truth)]) -> Vec<ScoredLabel<f64>> {
        v.iter().map(|&(s, l)| ScoredLabel::new(s, l).unwrap()).collect()
    }

    fn hand_case() -> Vec<ScoredLabel<f64>> {
        use Truth::*;
        items(&[(0.9, Fake), (0.8, Real), (0.7, Fake), (0.1, Real)])
    }

    fn mann_whitney(items: &[ScoredLabel<f64>]) -> f64 {
        let fakes: Vec<f64> = items.iter().filter(|s| s.label.is_fake()).map(|s| s.score).collect();
        let reals: Vec<f64> = items.iter().filter(|s| !s.label.is_fake()).map(|s| s.score).collect();
        let (mut gt, mut eq) = (0u128, 0u128);
        for f in &fakes {
            for r in &reals {
                if f > r {
                    gt += 1;
                } else if f == r {
                    eq += 1;
                }
            }
        }
        (2 * gt + eq) as f64 / (2 * fakes.len() as u128 * reals.len() as u128) as f64
    }

    #[test]
    fn hand_case_auc_and_ap() {
        let roc = roc_curve(&hand_case()).unwrap();
        assert_eq!(roc.auc, 0.75);
        let fpr: Vec<f64> = roc.points.iter().map(|p| p.fpr).collect();
        let tpr: Vec<f64> = roc.points.iter().map(|p| p.tpr).collect();
        assert_eq!(fpr, vec![0.0, 0.0, 0.5, 0.5, 1.0]);
        assert_eq!(tpr, vec![0.0, 0.5, 0.5, 1.0, 1.0]);
        let pr = pr_curve(&hand_case()).unwrap();
        assert_eq!(pr.average_precision, 0.5 * 1.0 + 0.0 * 0.5 + 0.5 * (2.0 / 3.0) + 0.0 * 0.5);
        assert!((pr.average_precision - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn trivial_curves() {
        use Truth::*;
        let perfect = items(&[(0.9, Fake), (0.8, Fake), (0.2, Real), (0.1, Real)]);
        assert_eq!(roc_curve(&perfect).unwrap().auc, 1.0);
        assert_eq!(pr_curve(&perfect).unwrap().average_precision, 1.0);
        let flat = items(&[(0.5, Fake), (0.5, Real), (0.5, Real), (0.5, Fake)]);
        let roc = roc_curve(&flat).unwrap();
        assert_eq!(roc.auc, 0.5);
        assert_eq!(roc.points.len(), 2);
        let all_pos = items(&[(0.3, Fake), (0.6, Fake), (0.9, Fake)]);
        assert!(pr_curve(&all_pos).unwrap().points.iter().all(|p| p.precision == 1.0));
    }

    #[test]
    fn errors() {
        use Truth::*;
        assert!(roc_curve(&items(&[(0.3, Fake), (0.4, Fake)])).is_err());
        assert!(pr_curve(&items(&[(0.3, Real)])).is_err());
        assert!(ScoredLabel::new(1.2f64, Fake).is_err());
        assert!(vertical_average::<f64>(&[], &[0.0]).is_err());
    }

    #[test]
    fn random_instances_match_pair_counting() {
        let mut rng = rng_from_seed(77);
        for _ in 0..200 {
            let n = rng.random_range(2..=200);
            let levels = rng.random_range(2..=20);
            let mut v: Vec<ScoredLabel<f64>> = (0..n)
                .map(|_| ScoredLabel {
                    score: rng.random_range(0..=levels) as f64 / levels as f64,
                    label: if rng.random_bool(0.5) { Truth::Fake } else { Truth::Real },
                })
                .collect();
            v[0].label = Truth::Fake;
            v[1].label = Truth::Real;
            assert_eq!(roc_curve(&v).unwrap().auc, mann_whitney(&v));
        }
    }

    #[test]
    fn tpr_interpolation() {
        let roc = roc_curve(&hand_case()).unwrap();
        assert_eq!(roc.tpr_at(0.0), 0.5);
        assert_eq!(roc.tpr_at(0.25), 0.5);
        assert_eq!(roc.tpr_at(0.5), 1.0);
        assert_eq!(roc.tpr_at(1.0), 1.0);
    }

    #[test]
    fn truth_parses() {
        assert_eq!("Fake".parse::<Truth>().unwrap(), Truth::Fake);
        assert!("maybe".parse::<Truth>().is_err());
        assert_eq!(Truth::Real.flipped(), Truth::Fake);
    }

    proptest! {
        #[test]
        fn auc_complements_under_relabeling(scores in prop::collection::vec((0u8..=10, any::<bool>()), 2..60)) {
            let v: Vec<ScoredLabel<f64>> = scores.iter().map(|&(s, f)| ScoredLabel { score: s as f64 / 10.0, label: if f { Truth::Fake } else { Truth::Real } }).collect();
            prop_assume!(v.iter().any(|s| s.label.is_fake()) && v.iter().any(|s| !s.label.is_fake()));
            let flipped: Vec<ScoredLabel<f64>> = v.iter().map(|s| ScoredLabel { score: s.score, label: s.label.flipped() }).collect();
            let a = roc_curve(&v).unwrap().auc;
            let b = roc_curve(&flipped).unwrap().auc;
            prop_assert!((a + b - 1.0).abs() < 1e-12);
            let pts = roc_curve(&v).unwrap().points;
            prop_assert!(pts.windows(2).all(|w| w[0].fpr <= w[1].fpr && w[0].tpr <= w[1].tpr));
            prop_assert_eq!(pts.last().map(|p| (p.fpr, p.tpr)), Some((1.0, 1.0)));
        }
    }
}
