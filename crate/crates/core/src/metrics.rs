//! Confusion counts and the overlap metrics computed from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `p_ij` = number of elements of true class `i` predicted as class `j`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub p00: u64,
    pub p01: u64,
    pub p10: u64,
    pub p11: u64,
}

impl ConfusionCounts {
    pub fn t0(&self) -> u64 {
        self.p00 + self.p01
    }

    pub fn t1(&self) -> u64 {
        self.p10 + self.p11
    }

    pub fn total(&self) -> u64 {
        self.t0() + self.t1()
    }

    pub fn add(&mut self, o: &ConfusionCounts) {
        self.p00 += o.p00;
        self.p01 += o.p01;
        self.p10 += o.p10;
        self.p11 += o.p11;
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;
    fn add(mut self, o: Self) -> Self {
        ConfusionCounts::add(&mut self, &o);
        self
    }
}

/// Counts for two binary grids (nonzero = foreground).
pub fn accumulate(pred: &[u8], truth: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("prediction has {} elements, truth {}", pred.len(), truth.len())));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (t != 0, p != 0) {
            (false, false) => c.p00 += 1,
            (false, true) => c.p01 += 1,
            (true, false) => c.p10 += 1,
            (true, true) => c.p11 += 1,
        }
    }
    Ok(c)
}

/// A metric value; `degenerate` is set when a denominator was zero and the
/// value was completed by convention.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub value: f64,
    pub degenerate: bool,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Mean of the two per-class recalls. With one class absent, only the
/// defined term is returned.
pub fn mean_accuracy(c: &ConfusionCounts) -> Metric {
    half_mean(ratio(c.p00, c.t0()), ratio(c.p11, c.t1()))
}

/// Mean of the two per-class intersection-over-union values.
pub fn mean_iou(c: &ConfusionCounts) -> Metric {
    half_mean(ratio(c.p00, c.t0() + c.p10), ratio(c.p11, c.t1() + c.p01))
}

fn half_mean(a: Option<f64>, b: Option<f64>) -> Metric {
    match (a, b) {
        (Some(a), Some(b)) => Metric { value: 0.5 * (a + b), degenerate: false },
        (Some(v), None) | (None, Some(v)) => Metric { value: v, degenerate: true },
        (None, None) => Metric { value: 1.0, degenerate: true },
    }
}

/// `2 p11 / (2 p11 + p01 + p10)`; 1 (flagged) when both masks are empty.
pub fn dice_coefficient(c: &ConfusionCounts) -> Metric {
    match ratio(2 * c.p11, 2 * c.p11 + c.p01 + c.p10) {
        Some(value) => Metric { value, degenerate: false },
        None => Metric { value: 1.0, degenerate: true },
    }
}

/// `1` where `prob >= tau`.
pub fn threshold_mask<T: Copy + Into<f64>>(prob: &[T], tau: f64) -> Vec<u8> {
    prob.iter().map(|&p| u8::from(p.into() >= tau)).collect()
}

/// The three metrics for one set of counts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub ma: Metric,
    pub iu: Metric,
    pub dc: Metric,
}

impl MetricSet {
    pub fn of(c: &ConfusionCounts) -> Self {
        Self { ma: mean_accuracy(c), iu: mean_iou(c), dc: dice_coefficient(c) }
    }

    /// Names of the metrics that fell back on a convention, `|`-joined.
    pub fn flags(&self) -> String {
        [("MA", self.ma), ("IU", self.iu), ("DC", self.dc)]
            .iter()
            .filter(|(_, m)| m.degenerate)
            .map(|(n, _)| *n)
            .collect::<Vec<_>>()
            .join("|")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_fixture() {
        let c = accumulate(&[1, 0, 0, 0], &[1, 1, 0, 0]).unwrap();
        assert_eq!(c, ConfusionCounts { p00: 2, p01: 0, p10: 1, p11: 1 });
    }

    #[test]
    fn degenerate_cases_are_flagged() {
        let empty = accumulate(&[0, 0], &[0, 0]).unwrap();
        assert_eq!(dice_coefficient(&empty), Metric { value: 1.0, degenerate: true });
        assert_eq!(mean_iou(&empty), Metric { value: 1.0, degenerate: true });
        assert_eq!(mean_accuracy(&empty), Metric { value: 1.0, degenerate: true });
        assert_eq!(MetricSet::of(&empty).flags(), "MA|IU|DC");
    }

    #[test]
    fn constant_background_on_balanced_truth() {
        let c = accumulate(&[0, 0, 0, 0], &[1, 1, 0, 0]).unwrap();
        assert_eq!(mean_accuracy(&c).value, 0.5);
        assert_eq!(dice_coefficient(&c).value, 0.0);
    }

    #[test]
    fn threshold_boundary() {
        assert_eq!(threshold_mask(&[0.4999f32, 0.5, 0.5001], 0.5), vec![0, 1, 1]);
    }
}
