//! JSON metric reports and CSV emitters for embeddings.

use serde::{Deserialize, Serialize};

use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub std: f64,
    pub n: usize,
    #[serde(rename = "embedder-id")]
    pub embedder_id: String,
    pub seed: u64,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// `x,y,label` rows for a 2-D embedding.
pub fn embedding_csv<T: Scalar>(points: &[[T; 2]], labels: &[String]) -> String {
    let mut s = String::from("x,y,label\n");
    for (p, l) in points.iter().zip(labels) {
        s.push_str(&format!("{},{},{}\n", p[0], p[1], l));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_round_trips_with_hyphenated_key() {
        let r = MetricReport { metric: "fid".into(), value: 1.5, std: 0.0, n: 10, embedder_id: "toy".into(), seed: 7 };
        let j = r.to_json();
        assert!(j.contains("\"embedder-id\""));
        assert_eq!(serde_json::from_str::<MetricReport>(&j).unwrap(), r);
    }

    #[test]
    fn csv_rows() {
        let s = embedding_csv(&[[1.0f64, 2.0], [3.0, 4.5]], &["a".into(), "b".into()]);
        assert_eq!(s, "x,y,label\n1,2,a\n3,4.5,b\n");
    }
}
