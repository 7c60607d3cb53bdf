//! Group fairness metrics over `(true class, predicted class, attribute)`
//! records.
//!
//! Attribute `1` is the transformed ("gray") slice and `0` the untouched
//! ("colour") slice. All rates are fractions in `[0, 1]`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Attribute;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub true_class: usize,
    pub predicted_class: usize,
    pub attribute: Attribute,
    pub subgroup: Option<u32>,
}

impl EvalRecord {
    pub fn new(true_class: usize, predicted_class: usize, attribute: Attribute) -> Self {
        Self {
            true_class,
            predicted_class,
            attribute,
            subgroup: None,
        }
    }

    pub fn with_subgroup(mut self, subgroup: u32) -> Self {
        self.subgroup = Some(subgroup);
        self
    }

    /// Grouping key for the TPR table: the subgroup id, or the attribute when
    /// no subgroup is set.
    pub fn group_key(&self) -> u32 {
        self.subgroup.unwrap_or(self.attribute.as_u8() as u32)
    }

    pub fn is_correct(&self) -> bool {
        self.true_class == self.predicted_class
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct Tally {
    hits: usize,
    total: usize,
}

impl Tally {
    fn add(&mut self, hit: bool) {
        self.total += 1;
        if hit {
            self.hits += 1;
        }
    }

    fn rate(&self) -> Option<f64> {
        (self.total > 0).then(|| self.hits as f64 / self.total as f64)
    }
}

fn n_classes_of(records: &[EvalRecord]) -> usize {
    records
        .iter()
        .map(|r| r.true_class.max(r.predicted_class) + 1)
        .max()
        .unwrap_or(0)
}

/// Fraction of correct predictions; `None` for an empty slice.
pub fn accuracy(records: &[EvalRecord]) -> Option<f64> {
    let mut t = Tally::default();
    for r in records {
        t.add(r.is_correct());
    }
    t.rate()
}

/// Mean of the per-attribute accuracies.
pub fn mean_attribute_accuracy(records: &[EvalRecord]) -> Result<f64> {
    let mut slices = [Tally::default(); 2];
    for r in records {
        slices[r.attribute.index()].add(r.is_correct());
    }
    let untouched = slices[0]
        .rate()
        .ok_or_else(|| Error::Metric("no records with attribute 0 (untouched)".into()))?;
    let transformed = slices[1]
        .rate()
        .ok_or_else(|| Error::Metric("no records with attribute 1 (transformed)".into()))?;
    Ok(0.5 * (untouched + transformed))
}

/// Per-class prediction counts from each slice: `(transformed, untouched)`.
fn prediction_counts(records: &[EvalRecord]) -> Vec<[usize; 2]> {
    let mut counts = vec![[0usize; 2]; n_classes_of(records)];
    for r in records {
        counts[r.predicted_class][r.attribute.index()] += 1;
    }
    counts
}

/// Bias amplification: mean over predicted classes of
/// `max(Gr_c, Col_c) / (Gr_c + Col_c) - 0.5`, where `Gr_c` / `Col_c` count
/// predictions into class `c` from transformed / untouched records. Classes
/// that are never predicted are left out of the mean.
pub fn bias_amplification(records: &[EvalRecord]) -> Result<f64> {
    let counts = prediction_counts(records);
    let mut sum = 0.0;
    let mut used = 0usize;
    for [col, gr] in counts {
        let total = gr + col;
        if total == 0 {
            continue;
        }
        sum += gr.max(col) as f64 / total as f64 - 0.5;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Metric("bias amplification needs at least one prediction".into()));
    }
    Ok(sum / used as f64)
}

/// Classes below `n_classes` that no record was predicted as.
pub fn unpredicted_classes(records: &[EvalRecord], n_classes: usize) -> Vec<usize> {
    let mut seen = vec![false; n_classes.max(n_classes_of(records))];
    for r in records {
        seen[r.predicted_class] = true;
    }
    (0..n_classes).filter(|&c| !seen[c]).collect()
}

fn true_classes(records: &[EvalRecord]) -> Vec<usize> {
    let mut present = vec![false; n_classes_of(records)];
    for r in records {
        present[r.true_class] = true;
    }
    (0..present.len()).filter(|&c| present[c]).collect()
}

/// Mean over true classes `y` of `|TPR_y(a=1) - TPR_y(a=0)|`.
pub fn opportunity_gap(records: &[EvalRecord]) -> Result<f64> {
    let n = n_classes_of(records);
    let mut tpr = vec![[Tally::default(); 2]; n];
    for r in records {
        tpr[r.true_class][r.attribute.index()].add(r.is_correct());
    }
    let classes = true_classes(records);
    if classes.is_empty() {
        return Err(Error::Metric("opportunity gap needs at least one record".into()));
    }
    let mut sum = 0.0;
    for &y in &classes {
        let [t0, t1] = tpr[y];
        let r0 = t0
            .rate()
            .ok_or_else(|| Error::Metric(format!("class {y} has no positives with attribute 0")))?;
        let r1 = t1
            .rate()
            .ok_or_else(|| Error::Metric(format!("class {y} has no positives with attribute 1")))?;
        sum += (r1 - r0).abs();
    }
    Ok(sum / classes.len() as f64)
}

/// `0.5 * (|FPR(a=1) - FPR(a=0)| + |TPR(a=1) - TPR(a=0)|)` for one positive
/// class against the rest.
pub fn average_odds_gap(records: &[EvalRecord], positive_class: usize) -> Result<f64> {
    // [attribute] -> (tpr tally over positives, fpr tally over negatives)
    let mut tpr = [Tally::default(); 2];
    let mut fpr = [Tally::default(); 2];
    for r in records {
        let predicted_positive = r.predicted_class == positive_class;
        if r.true_class == positive_class {
            tpr[r.attribute.index()].add(predicted_positive);
        } else {
            fpr[r.attribute.index()].add(predicted_positive);
        }
    }
    let get = |t: Tally, what: &str, a: usize| {
        t.rate().ok_or_else(|| {
            Error::Metric(format!(
                "{what} undefined for class {positive_class}, attribute {a}: no {}",
                if what == "TPR" { "positives" } else { "negatives" }
            ))
        })
    };
    let d_tpr = (get(tpr[1], "TPR", 1)? - get(tpr[0], "TPR", 0)?).abs();
    let d_fpr = (get(fpr[1], "FPR", 1)? - get(fpr[0], "FPR", 0)?).abs();
    Ok(0.5 * (d_fpr + d_tpr))
}

/// One-vs-rest average of [`average_odds_gap`] over every true class present.
pub fn average_odds_multiclass(records: &[EvalRecord]) -> Result<f64> {
    let classes = true_classes(records);
    if classes.is_empty() {
        return Err(Error::Metric("average odds needs at least one record".into()));
    }
    let mut sum = 0.0;
    for &c in &classes {
        sum += average_odds_gap(records, c)?;
    }
    Ok(sum / classes.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupTpr {
    pub subgroup: u32,
    pub tpr: f64,
    pub positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupTprTable {
    /// Sorted by ascending TPR (ties by subgroup id).
    pub rows: Vec<SubgroupTpr>,
    /// Max minus min TPR.
    pub gap: f64,
    pub warnings: Vec<String>,
}

/// TPR per subgroup ([`EvalRecord::group_key`]).
///
/// With `positive_class = Some(c)` only records of true class `c` are
/// positives; with `None` every record is a positive of its own class, so the
/// TPR is the pooled recall of the subgroup.
pub fn subgroup_tpr_table(records: &[EvalRecord], positive_class: Option<usize>) -> Result<SubgroupTprTable> {
    let mut groups: BTreeMap<u32, Tally> = BTreeMap::new();
    for r in records {
        let t = groups.entry(r.group_key()).or_default();
        match positive_class {
            Some(c) if r.true_class != c => {}
            Some(c) => t.add(r.predicted_class == c),
            None => t.add(r.is_correct()),
        }
    }
    let mut warnings = Vec::new();
    let mut rows = Vec::new();
    for (subgroup, tally) in groups {
        match tally.rate() {
            Some(tpr) => rows.push(SubgroupTpr {
                subgroup,
                tpr,
                positives: tally.total,
            }),
            None => warnings.push(format!("subgroup {subgroup} has no positives; excluded")),
        }
    }
    if rows.is_empty() {
        return Err(Error::Metric("no subgroup has positives".into()));
    }
    rows.sort_by(|a, b| a.tpr.total_cmp(&b.tpr).then(a.subgroup.cmp(&b.subgroup)));
    let gap = rows.last().unwrap().tpr - rows[0].tpr;
    Ok(SubgroupTprTable { rows, gap, warnings })
}

/// All metrics in one place; a metric that is undefined for the records is
/// `null` and explained in `warnings`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub mean_accuracy: Option<f64>,
    pub bias_amplification: Option<f64>,
    pub opportunity_gap: Option<f64>,
    pub average_odds: Option<f64>,
    pub subgroup_tpr: Vec<SubgroupTpr>,
    pub tpr_gap: Option<f64>,
    pub warnings: Vec<String>,
}

impl FairnessReport {
    pub fn from_records(records: &[EvalRecord], n_classes: usize) -> Self {
        let mut warnings = Vec::new();
        let mut keep = |r: Result<f64>, name: &str| match r {
            Ok(v) => Some(v),
            Err(e) => {
                warnings.push(format!("{name}: {e}"));
                None
            }
        };
        let mean_accuracy = keep(mean_attribute_accuracy(records), "mean_accuracy");
        let bias_amplification = keep(bias_amplification(records), "bias_amplification");
        let opportunity_gap = keep(opportunity_gap(records), "opportunity_gap");
        let average_odds = keep(average_odds_multiclass(records), "average_odds");
        let unpredicted = unpredicted_classes(records, n_classes);
        if !unpredicted.is_empty() {
            warnings.push(format!(
                "bias_amplification: classes {unpredicted:?} were never predicted and are excluded"
            ));
        }
        let (subgroup_tpr, tpr_gap) = match subgroup_tpr_table(records, None) {
            Ok(t) => {
                warnings.extend(t.warnings);
                (t.rows, Some(t.gap))
            }
            Err(e) => {
                warnings.push(format!("subgroup_tpr: {e}"));
                (Vec::new(), None)
            }
        };
        Self {
            mean_accuracy,
            bias_amplification,
            opportunity_gap,
            average_odds,
            subgroup_tpr,
            tpr_gap,
            warnings,
        }
    }
}
