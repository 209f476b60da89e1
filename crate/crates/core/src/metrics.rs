//! Per-class average precision, overall mAP and agent-grouped mAP.
//!
//! The AP variant is the non-interpolated finite sum: items are ranked by
//! descending score and AP is the mean of the precision values at the ranks
//! of the positive items. This equals the area under the precision-recall
//! staircase and is the dominant convention in multi-label video recognition;
//! 11-point interpolation would give different numbers.
//!
//! Two conventions are fixed here so results are reproducible across runs and
//! implementations:
//!
//! * Score ties are broken by ascending position in the clip order (stable
//!   sort), never optimistically or pessimistically.
//! * A class with zero positive labels has undefined AP. It is excluded from
//!   every mean and reported in [`EvalReport::excluded_classes`] instead of
//!   silently scoring 0.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{LabelMatrix, ScoreMatrix};
use crate::sampling::SamplingPlan;
use crate::taxonomy::Taxonomy;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("scores and labels have different lengths ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("non-finite score at position {0}")]
    NonFiniteScore(usize),
    #[error("label at position {0} is not 0 or 1")]
    NonBinaryLabel(usize),
    #[error("score matrix has {scores} clips but the labels have {labels}")]
    ClipCountMismatch { scores: usize, labels: usize },
    #[error(
        "clip order mismatch at row {row}: scores have `{score_clip}`, labels have \
         `{label_clip}`; align the matrices first"
    )]
    Misaligned {
        row: usize,
        score_clip: String,
        label_clip: String,
    },
    #[error("matrix has {found} classes but the taxonomy declares {expected}")]
    ClassCountMismatch { expected: usize, found: usize },
    #[error("every class has zero positive labels; mAP is undefined")]
    NoDefinedClasses,
}

/// Evaluation result for one score matrix against one label matrix.
///
/// `map` is the arithmetic mean of the defined per-class APs; each group mean
/// is restricted to the defined classes of that group (`None` when the group
/// has none). `sampling` optionally embeds the frame-sampling plans the
/// predictions were produced with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub map_per_group: IndexMap<String, Option<f64>>,
    pub ap_per_class: IndexMap<String, Option<f64>>,
    pub excluded_classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling: Option<Vec<SamplingPlan>>,
}

/// Average precision of one class.
///
/// Items are sorted by descending score, ties broken by ascending position;
/// with `P` positives, `AP = (1/P) * Σ precision@k` over the ranks `k` that
/// hold a positive. Returns `Ok(None)` when `P = 0` (AP undefined).
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<Option<f64>, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    for (i, &s) in scores.iter().enumerate() {
        if !s.is_finite() {
            return Err(MetricsError::NonFiniteScore(i));
        }
    }
    for (i, &y) in labels.iter().enumerate() {
        if y > 1 {
            return Err(MetricsError::NonBinaryLabel(i));
        }
    }
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 {
        return Ok(None);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable sort: equal scores keep ascending original position
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    for (rank0, &item) in order.iter().enumerate() {
        if labels[item] == 1 {
            hits += 1;
            precision_sum += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(Some(precision_sum / positives as f64))
}

/// Evaluates one aligned score matrix against ground truth: per-class AP,
/// overall mAP and the per-group mAPs for every group in the taxonomy.
///
/// Inputs must already share the clip order (see [`crate::dataset::align`]).
/// Errors if no class has a positive label, since mAP is undefined then.
pub fn evaluate(
    scores: &ScoreMatrix,
    labels: &LabelMatrix,
    taxonomy: &Taxonomy,
) -> Result<EvalReport, MetricsError> {
    if scores.num_clips() != labels.num_clips() {
        return Err(MetricsError::ClipCountMismatch {
            scores: scores.num_clips(),
            labels: labels.num_clips(),
        });
    }
    for (row, (s, l)) in scores.clip_ids().iter().zip(labels.clip_ids()).enumerate() {
        if s != l {
            return Err(MetricsError::Misaligned {
                row,
                score_clip: s.clone(),
                label_clip: l.clone(),
            });
        }
    }
    let num_classes = taxonomy.num_classes();
    if scores.num_classes() != num_classes {
        return Err(MetricsError::ClassCountMismatch {
            expected: num_classes,
            found: scores.num_classes(),
        });
    }
    if labels.num_classes() != num_classes {
        return Err(MetricsError::ClassCountMismatch {
            expected: num_classes,
            found: labels.num_classes(),
        });
    }

    let aps: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            average_precision(
                &scores.values().column(c).to_vec(),
                &labels.values().column(c).to_vec(),
            )
        })
        .collect::<Result<_, _>>()?;

    let mut defined_sum = 0.0;
    let mut defined_count = 0usize;
    for ap in aps.iter().flatten() {
        defined_sum += ap;
        defined_count += 1;
    }
    if defined_count == 0 {
        return Err(MetricsError::NoDefinedClasses);
    }
    let map = defined_sum / defined_count as f64;

    let mut map_per_group = IndexMap::new();
    for group in taxonomy.groups() {
        // group ids come from the taxonomy itself, so the lookup cannot fail
        let indices = taxonomy.group_indices(&group.id).unwrap();
        let mut sum = 0.0;
        let mut count = 0usize;
        for &c in &indices {
            if let Some(ap) = aps[c] {
                sum += ap;
                count += 1;
            }
        }
        let mean = (count > 0).then(|| sum / count as f64);
        map_per_group.insert(group.id.clone(), mean);
    }

    let mut ap_per_class = IndexMap::new();
    let mut excluded_classes = Vec::new();
    for (class, ap) in taxonomy.classes().iter().zip(&aps) {
        ap_per_class.insert(class.name.clone(), *ap);
        if ap.is_none() {
            excluded_classes.push(class.name.clone());
        }
    }

    Ok(EvalReport {
        map,
        map_per_group,
        ap_per_class,
        excluded_classes,
        sampling: None,
    })
}
