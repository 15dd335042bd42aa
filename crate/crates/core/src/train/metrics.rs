//! Accuracy over all four classes, precision/recall/F1 for basic, theorem
//! and proof, and their unweighted mean.

use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{Error, Result};

/// Rows are gold labels, columns predictions.
pub type Confusion = [[u64; Label::COUNT]; Label::COUNT];

/// The classes averaged into `mean_f1`.
pub const SCORED: [Label; 3] = [Label::Basic, Label::Theorem, Label::Proof];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when a zero denominator forced a value to 0.
    pub zero_division: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerClass {
    pub basic: ClassMetrics,
    pub theorem: ClassMetrics,
    pub proof: ClassMetrics,
}

impl PerClass {
    pub fn get(&self, label: Label) -> Option<&ClassMetrics> {
        match label {
            Label::Basic => Some(&self.basic),
            Label::Theorem => Some(&self.theorem),
            Label::Proof => Some(&self.proof),
            Label::Overlap => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub mean_f1: f64,
    pub per_class: PerClass,
    pub confusion: Confusion,
}

impl Metrics {
    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn confusion(predictions: &[Label], gold: &[Label]) -> Result<Confusion> {
    if predictions.len() != gold.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            gold.len()
        )));
    }
    let mut c = [[0u64; Label::COUNT]; Label::COUNT];
    for (p, g) in predictions.iter().zip(gold) {
        c[g.index()][p.index()] += 1;
    }
    Ok(c)
}

pub fn evaluate(predictions: &[Label], gold: &[Label]) -> Result<Metrics> {
    metrics_from_confusion(confusion(predictions, gold)?)
}

pub fn metrics_from_confusion(confusion: Confusion) -> Result<Metrics> {
    let total: u64 = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(Error::invalid("cannot evaluate an empty prediction set"));
    }
    let correct: u64 = (0..Label::COUNT).map(|i| confusion[i][i]).sum();
    let class = |l: Label| {
        let i = l.index();
        let tp = confusion[i][i];
        let predicted: u64 = (0..Label::COUNT).map(|g| confusion[g][i]).sum();
        let support: u64 = confusion[i].iter().sum();
        let mut zero_division = false;
        let mut ratio = |num: u64, den: u64| {
            if den == 0 {
                zero_division = true;
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassMetrics {
            precision,
            recall,
            f1,
            support,
            zero_division,
        }
    };
    let per_class = PerClass {
        basic: class(Label::Basic),
        theorem: class(Label::Theorem),
        proof: class(Label::Proof),
    };
    let mean_f1 = (per_class.basic.f1 + per_class.theorem.f1 + per_class.proof.f1) / 3.0;
    Ok(Metrics {
        accuracy: correct as f64 / total as f64,
        mean_f1,
        per_class,
        confusion,
    })
}

/// Confusion of the constant-Basic predictor on the given class counts.
pub fn dummy_confusion(counts: [u64; Label::COUNT]) -> Confusion {
    let mut c = [[0u64; Label::COUNT]; Label::COUNT];
    for (g, &n) in counts.iter().enumerate() {
        c[g][Label::Basic.index()] = n;
    }
    c
}
