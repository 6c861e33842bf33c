//! Span/type/region correctness and micro precision, recall and F1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::heads::DecodedSet;
use crate::types::{CandidateRegion, Quadruple, Region};

/// A region counts as correct when its IoU with some gold box is strictly
/// above this value.
pub const REGION_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    /// Span, type and region.
    #[serde(rename = "GMNER")]
    Gmner,
    /// Span and type.
    #[serde(rename = "MNER")]
    Mner,
    /// Span and region.
    #[serde(rename = "EEG")]
    Eeg,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Gmner, Task::Mner, Task::Eeg];

    pub fn name(self) -> &'static str {
        match self {
            Task::Gmner => "GMNER",
            Task::Mner => "MNER",
            Task::Eeg => "EEG",
        }
    }
}

/// A prediction with its candidate slot resolved to a box.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPrediction {
    pub start: usize,
    pub end: usize,
    pub type_id: usize,
    /// `None` means ungroundable.
    pub region: Option<BoundingBox>,
    pub confidence: f64,
}

/// Resolve the candidate slots of `decoded` against the example's regions.
pub fn resolve(decoded: &DecodedSet, regions: &[CandidateRegion]) -> Result<Vec<ScoredPrediction>> {
    decoded
        .predictions
        .iter()
        .map(|p| {
            let region = match &p.quad.region {
                Region::Ungroundable | Region::Candidate(0) => None,
                Region::Candidate(i) => Some(
                    regions
                        .get(i - 1)
                        .ok_or_else(|| Error::invalid(format!("candidate slot {i} out of range")))?
                        .bbox,
                ),
                Region::GoldBoxes(_) => {
                    return Err(Error::invalid("prediction carries gold boxes"));
                }
            };
            Ok(ScoredPrediction {
                start: p.quad.start,
                end: p.quad.end,
                type_id: p.quad.type_id,
                region,
                confidence: p.confidence,
            })
        })
        .collect()
}

pub fn span_correct(pred: &ScoredPrediction, gold: &Quadruple) -> bool {
    pred.start == gold.start && pred.end == gold.end
}

pub fn type_correct(pred: &ScoredPrediction, gold: &Quadruple) -> bool {
    pred.type_id == gold.type_id
}

pub fn region_correct(pred: &ScoredPrediction, gold: &Quadruple) -> bool {
    match (&pred.region, &gold.region) {
        (None, Region::Ungroundable) => true,
        (Some(b), Region::GoldBoxes(golds)) => golds.iter().any(|g| iou(b, g) > REGION_IOU),
        _ => false,
    }
}

pub fn correctness(pred: &ScoredPrediction, gold: &Quadruple, task: Task) -> bool {
    let span = span_correct(pred, gold);
    match task {
        Task::Gmner => span && type_correct(pred, gold) && region_correct(pred, gold),
        Task::Mner => span && type_correct(pred, gold),
        Task::Eeg => span && region_correct(pred, gold),
    }
}

/// Raw counts for one task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub correct: usize,
    pub predict: usize,
    pub gold: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.correct, self.predict)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.correct, self.gold)
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision(), self.recall())
    }

    fn add(&mut self, other: Counts) {
        self.correct += other.correct;
        self.predict += other.predict;
        self.gold += other.gold;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Greedy one-to-one pairing for one example: predictions in descending
/// confidence (stable on index) each take the first unmatched correct gold.
pub fn count_example(preds: &[ScoredPrediction], golds: &[Quadruple], task: Task) -> Counts {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence));
    let mut used = vec![false; golds.len()];
    let mut correct = 0;
    for i in order {
        if let Some(j) = (0..golds.len()).find(|&j| !used[j] && correctness(&preds[i], &golds[j], task)) {
            used[j] = true;
            correct += 1;
        }
    }
    Counts {
        correct,
        predict: preds.len(),
        gold: golds.len(),
    }
}

/// Corpus-level micro counts.
pub fn score(preds: &[Vec<ScoredPrediction>], golds: &[Vec<Quadruple>], task: Task) -> Result<Counts> {
    if preds.len() != golds.len() {
        return Err(Error::invalid(format!(
            "{} prediction sets for {} examples",
            preds.len(),
            golds.len()
        )));
    }
    let mut total = Counts::default();
    for (p, g) in preds.iter().zip(golds) {
        total.add(count_example(p, g, task));
    }
    Ok(total)
}

/// One row of a report, in the field layout of the JSON output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub task: Task,
    #[serde(rename = "type")]
    pub type_name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub correct: usize,
    pub predict: usize,
    pub gold: usize,
}

impl MetricRow {
    fn new(task: Task, type_name: &str, c: Counts) -> Self {
        Self {
            task,
            type_name: type_name.to_string(),
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
            correct: c.correct,
            predict: c.predict,
            gold: c.gold,
        }
    }
}

pub const ALL_TYPES: &str = "All";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn get(&self, task: Task, type_name: &str) -> Option<&MetricRow> {
        self.rows
            .iter()
            .find(|r| r.task == task && r.type_name == type_name)
    }

    pub fn overall(&self, task: Task) -> &MetricRow {
        self.get(task, ALL_TYPES).expect("report has an overall row per task")
    }

    /// Fixed-width text table.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<6} {:<12} {:>9} {:>9} {:>9} {:>8} {:>8} {:>8}\n",
            "task", "type", "precision", "recall", "f1", "correct", "predict", "gold"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<6} {:<12} {:>9.4} {:>9.4} {:>9.4} {:>8} {:>8} {:>8}\n",
                r.task.name(),
                r.type_name,
                r.precision,
                r.recall,
                r.f1,
                r.correct,
                r.predict,
                r.gold
            ));
        }
        out
    }
}

/// Report with an overall row per task, plus one row per type and task when
/// `per_type` is set. Per-type scoring restricts both predictions and golds
/// to that type.
pub fn per_type_report(
    preds: &[Vec<ScoredPrediction>],
    golds: &[Vec<Quadruple>],
    type_names: &[String],
    per_type: bool,
) -> Result<MetricReport> {
    let mut rows = Vec::new();
    for task in Task::ALL {
        rows.push(MetricRow::new(task, ALL_TYPES, score(preds, golds, task)?));
        if !per_type {
            continue;
        }
        for (t, name) in type_names.iter().enumerate() {
            let p: Vec<Vec<ScoredPrediction>> = preds
                .iter()
                .map(|ps| ps.iter().filter(|x| x.type_id == t).cloned().collect())
                .collect();
            let g: Vec<Vec<Quadruple>> = golds
                .iter()
                .map(|gs| gs.iter().filter(|x| x.type_id == t).cloned().collect())
                .collect();
            rows.push(MetricRow::new(task, name, score(&p, &g, task)?));
        }
    }
    Ok(MetricReport { rows })
}
