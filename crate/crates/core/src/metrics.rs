//! Instance-level layout compliance: greedy per-category matching, then
//! success rate (SR), instance success rate (I-SR) and mean IoU.
//!
//! Success is geometric only: a reference instance succeeds when its matched
//! prediction reaches the IoU threshold. Attribute correctness is not checked.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::GroundedRecord;
use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("nothing to evaluate: no samples or no reference instances")]
    EmptyCorpus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub category: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

impl Instance {
    pub fn new(category: &str, bbox: BBox) -> Self {
        Self {
            category: category.to_string(),
            bbox,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvalSample {
    pub id: String,
    pub references: Vec<Instance>,
    pub predictions: Vec<Instance>,
}

/// One reference instance and its matched prediction (if any).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Match {
    pub reference: usize,
    pub prediction: Option<usize>,
    pub iou: f64,
}

/// Greedy one-to-one assignment on a score matrix `scores[r][p]`: repeatedly
/// take the highest remaining positive score whose row and column are both
/// free. Ties go to the lower row, then the lower column.
pub fn greedy_assignment(scores: &[Vec<f64>]) -> Vec<Option<usize>> {
    let mut cells: Vec<(f64, usize, usize)> = scores
        .iter()
        .enumerate()
        .flat_map(|(r, row)| row.iter().enumerate().map(move |(p, &s)| (s, r, p)))
        .filter(|(s, _, _)| *s > 0.0)
        .collect();
    cells.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let cols = scores.iter().map(Vec::len).max().unwrap_or(0);
    let mut col_used = vec![false; cols];
    let mut out = vec![None; scores.len()];
    for (_, r, p) in cells {
        if out[r].is_none() && !col_used[p] {
            out[r] = Some(p);
            col_used[p] = true;
        }
    }
    out
}

/// Greedy one-to-one matching in descending IoU order, where only same-category
/// pairs score. Returns one entry per reference, in reference order;
/// unmatched references get IoU 0.
pub fn match_instances(sample: &EvalSample) -> Vec<Match> {
    let ious: Vec<Vec<f64>> = sample
        .references
        .iter()
        .map(|r| {
            sample
                .predictions
                .iter()
                .map(|p| if p.category == r.category { r.bbox.iou(&p.bbox) } else { 0.0 })
                .collect()
        })
        .collect();
    greedy_assignment(&ious)
        .into_iter()
        .enumerate()
        .map(|(r, p)| Match {
            reference: r,
            prediction: p,
            iou: p.map_or(0.0, |p| ious[r][p]),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleReport {
    pub id: String,
    pub instances: usize,
    pub successes: usize,
    pub all_successful: bool,
    pub mean_iou: f64,
    pub matches: Vec<Match>,
}

/// Corpus metrics as percentages rounded to two decimals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub sr: f64,
    pub isr: f64,
    pub miou: f64,
    pub samples: Vec<SampleReport>,
}

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

fn percent(num: f64, den: f64) -> f64 {
    (100.0 * num / den * 100.0).round() / 100.0
}

/// A sample with no reference instances counts as fully successful.
pub fn evaluate(samples: &[EvalSample], iou_threshold: f64) -> Result<EvalReport, MetricsError> {
    let mut reports = Vec::with_capacity(samples.len());
    let (mut total, mut successes, mut good_samples, mut iou_sum) = (0usize, 0usize, 0usize, 0.0f64);
    for s in samples {
        let matches = match_instances(s);
        let ok = matches.iter().filter(|m| m.iou >= iou_threshold).count();
        let sum: f64 = matches.iter().map(|m| m.iou).sum();
        let all = ok == matches.len();
        total += matches.len();
        successes += ok;
        iou_sum += sum;
        good_samples += usize::from(all);
        reports.push(SampleReport {
            id: s.id.clone(),
            instances: matches.len(),
            successes: ok,
            all_successful: all,
            mean_iou: if matches.is_empty() { 0.0 } else { sum / matches.len() as f64 },
            matches,
        });
    }
    if samples.is_empty() || total == 0 {
        return Err(MetricsError::EmptyCorpus);
    }
    Ok(EvalReport {
        iou_threshold,
        sr: percent(good_samples as f64, samples.len() as f64),
        isr: percent(successes as f64, total as f64),
        miou: percent(iou_sum, total as f64),
        samples: reports,
    })
}

/// Attribute key that overrides an entity's phrase as its category.
pub const CATEGORY_ATTR: &str = "category";

/// Instances of a record; the category is the `category` attribute when
/// present, otherwise the phrase.
pub fn record_instances(r: &GroundedRecord) -> Vec<Instance> {
    r.entities
        .iter()
        .map(|e| Instance::new(e.attrs.get(CATEGORY_ATTR).unwrap_or(&e.phrase), e.bbox))
        .collect()
}

/// [`join_by_id`] over two record files' contents. A repeated id keeps the
/// union of its instances.
pub fn samples_from_records(references: &[GroundedRecord], predictions: &[GroundedRecord]) -> Vec<EvalSample> {
    let index = |rs: &[GroundedRecord]| {
        let mut m: BTreeMap<String, Vec<Instance>> = BTreeMap::new();
        for r in rs {
            m.entry(r.id.clone()).or_default().extend(record_instances(r));
        }
        m
    };
    join_by_id(index(references), index(predictions))
}

/// Join reference and prediction instance lists by id. Ids missing from the
/// predictions get no predictions; ids only in the predictions are ignored.
pub fn join_by_id(
    references: BTreeMap<String, Vec<Instance>>,
    mut predictions: BTreeMap<String, Vec<Instance>>,
) -> Vec<EvalSample> {
    references
        .into_iter()
        .map(|(id, refs)| EvalSample {
            predictions: predictions.remove(&id).unwrap_or_default(),
            id,
            references: refs,
        })
        .collect()
}
