use serde::{Deserialize, Serialize};

use super::session::{validate_level, StudySession};
use crate::metrics::{roc_curve, vertical_average, RocCurve, ScoredLabel, Truth};
use crate::{Error, Result};

/// Fractional confusion counts: a response `r` on a fake item adds `r` to TP
/// and `1 − r` to FN; on a real item `r` to FP and `1 − r` to TN.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub tp: f64,
    pub tn: f64,
    pub fp: f64,
    #[serde(rename = "fn")]
    pub fn_: f64,
    /// Responses of exactly 0.5.
    pub u: usize,
    /// 0 when nothing was called fake.
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub n_real: usize,
    pub n_fake: usize,
    pub timed_out: usize,
}

impl SessionReport {
    /// Precision, recall and accuracy from (possibly fractional) counts.
    pub fn from_counts(tp: f64, tn: f64, fp: f64, fn_: f64) -> (f64, f64, f64) {
        let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
        (ratio(tp, tp + fp), ratio(tp, tp + fn_), ratio(tp + tn, tp + tn + fp + fn_))
    }
}

pub fn score_responses(responses: &[(Truth, f64)]) -> Result<SessionReport> {
    let (mut tp, mut tn, mut fp, mut fn_) = (0.0, 0.0, 0.0, 0.0);
    let (mut u, mut n_real, mut n_fake) = (0, 0, 0);
    for &(truth, r) in responses {
        validate_level(r)?;
        if r == 0.5 {
            u += 1;
        }
        match truth {
            Truth::Fake => {
                tp += r;
                fn_ += 1.0 - r;
                n_fake += 1;
            }
            Truth::Real => {
                fp += r;
                tn += 1.0 - r;
                n_real += 1;
            }
        }
    }
    let (precision, recall, accuracy) = SessionReport::from_counts(tp, tn, fp, fn_);
    Ok(SessionReport { tp, tn, fp, fn_, u, precision, recall, accuracy, n_real, n_fake, timed_out: 0 })
}

fn labelled(session: &StudySession) -> Result<Vec<(Truth, f64)>> {
    if !session.is_complete() {
        return Err(Error::State(format!(
            "session {} has {} of {} responses",
            session.id,
            session.responses.len(),
            session.deck.len()
        )));
    }
    session
        .responses
        .iter()
        .map(|r| {
            let item = session.deck.find(&r.image_id).ok_or_else(|| Error::Format(format!("unknown image {}", r.image_id)))?;
            Ok((item.truth, r.value))
        })
        .collect()
}

impl StudySession {
    pub fn score(&self) -> Result<SessionReport> {
        let mut report = score_responses(&labelled(self)?)?;
        report.timed_out = self.responses.iter().filter(|r| r.timed_out).count();
        Ok(report)
    }
}

/// ROC of one observer with the response value as the fake score.
pub fn session_roc(session: &StudySession) -> Result<RocCurve<f64>> {
    let items: Vec<ScoredLabel<f64>> = labelled(session)?
        .into_iter()
        .map(|(label, score)| ScoredLabel { score, label })
        .collect();
    roc_curve(&items)
}

/// Group ROC by vertical averaging of per-session curves on `fpr_grid`.
pub fn vertical_average_roc(sessions: &[StudySession], fpr_grid: &[f64]) -> Result<Vec<f64>> {
    let curves = sessions.iter().map(session_roc).collect::<Result<Vec<_>>>()?;
    vertical_average(&curves, fpr_grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::study::{build_deck, NextItem, StudySession, DEFAULT_DEADLINE_SECS, RESPONSE_LEVELS};
    use proptest::prelude::*;
    use rand::Rng;

    fn run(n_each: usize, seed: u64, answer: impl Fn(Truth, &str) -> f64) -> StudySession {
        let real: Vec<String> = (0..n_each).map(|i| format!("r{i}")).collect();
        let fake: Vec<String> = (0..n_each).map(|i| format!("f{i}")).collect();
        let mut s = StudySession::new("s", "o", build_deck(&real, &fake, n_each, seed).unwrap(), DEFAULT_DEADLINE_SECS).unwrap();
        while let NextItem::Item { item, .. } = s.next_item(0) {
            s.record_response(&item.image_id, answer(item.truth, &item.file_ref), 0, 1).unwrap();
        }
        s
    }

    #[test]
    fn weighted_counts_by_hand() {
        use Truth::*;
        let r = score_responses(&[(Fake, 0.75), (Fake, 0.5), (Real, 0.25), (Real, 1.0), (Fake, 0.0)]).unwrap();
        assert_eq!((r.tp, r.fn_, r.fp, r.tn), (1.25, 1.75, 1.25, 0.75));
        assert_eq!(r.u, 1);
        assert_eq!(r.precision, 0.5);
        assert_eq!(r.recall, 1.25 / 3.0);
        assert_eq!(r.accuracy, 2.0 / 5.0);
        assert!(score_responses(&[(Fake, 0.6)]).is_err());
    }

    #[test]
    fn all_unsure_balanced_deck() {
        let s = run(100, 1, |_, _| 0.5);
        let r = s.score().unwrap();
        assert_eq!((r.tp, r.tn, r.fp, r.fn_), (50.0, 50.0, 50.0, 50.0));
        assert_eq!((r.precision, r.recall, r.accuracy, r.u), (0.5, 0.5, 0.5, 200));
        assert_eq!(session_roc(&s).unwrap().auc, 0.5);
    }

    #[test]
    fn perfect_observer() {
        let s = run(10, 2, |t, _| if t == Truth::Fake { 1.0 } else { 0.0 });
        let r = s.score().unwrap();
        assert_eq!((r.precision, r.recall, r.accuracy), (1.0, 1.0, 1.0));
        assert_eq!(session_roc(&s).unwrap().auc, 1.0);
    }

    #[test]
    fn incomplete_session_is_a_state_error() {
        let real = vec!["a".to_string()];
        let s = StudySession::new("s", "o", build_deck(&real, &real, 1, 0).unwrap(), 12.0).unwrap();
        assert!(matches!(s.score(), Err(Error::State(_))));
        assert!(session_roc(&s).is_err());
    }

    #[test]
    fn three_session_vertical_average() {
        // Observer A ranks perfectly, B is uninformative, C is half-right.
        let a = run(2, 4, |t, _| if t == Truth::Fake { 1.0 } else { 0.0 });
        let b = run(2, 4, |_, _| 0.5);
        let c = run(2, 4, |t, file| match (t, file) {
            (Truth::Fake, _) => 0.75,
            (Truth::Real, "r0") => 0.25,
            (Truth::Real, _) => 1.0,
        });
        let grid = [0.0, 0.5, 1.0];
        let avg = vertical_average_roc(&[a.clone(), b.clone(), c.clone()], &grid).unwrap();
        let per: Vec<Vec<f64>> = [&a, &b, &c].iter().map(|s| grid.iter().map(|&f| session_roc(s).unwrap().tpr_at(f)).collect()).collect();
        // Hand values: A (1, 1, 1); B (0, 0.5, 1); C (0, 1, 1).
        assert_eq!(per[0], vec![1.0, 1.0, 1.0]);
        assert_eq!(per[1], vec![0.0, 0.5, 1.0]);
        assert_eq!(per[2], vec![0.0, 1.0, 1.0]);
        for (k, v) in avg.iter().enumerate() {
            assert!((v - (per[0][k] + per[1][k] + per[2][k]) / 3.0).abs() < 1e-15);
        }
        assert!((avg[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((avg[1] - 2.5 / 3.0).abs() < 1e-15);
        assert_eq!(avg[2], 1.0);
    }

    fn transcript(seed: u64, n: usize) -> Vec<(Truth, f64)> {
        let mut rng = rng_from_seed(seed);
        (0..n)
            .map(|_| {
                let t = if rng.random_bool(0.5) { Truth::Fake } else { Truth::Real };
                (t, RESPONSE_LEVELS[rng.random_range(0..5)])
            })
            .collect()
    }

    proptest! {
        #[test]
        fn conservation_and_relabeling(seed in 0u64..100_000, n in 1usize..300) {
            let t = transcript(seed, n);
            let r = score_responses(&t).unwrap();
            prop_assert_eq!(r.tp + r.fn_, r.n_fake as f64);
            prop_assert_eq!(r.tn + r.fp, r.n_real as f64);
            let flipped: Vec<(Truth, f64)> = t.iter().map(|&(tr, v)| (tr.flipped(), 1.0 - v)).collect();
            let f = score_responses(&flipped).unwrap();
            prop_assert_eq!((f.tp, f.tn, f.fp, f.fn_), (r.tn, r.tp, r.fn_, r.fp));
            prop_assert_eq!(f.u, r.u);
        }
    }
}
