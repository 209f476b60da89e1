//! Weighted score fusion across models and a derivative-free search for the
//! fusion weights that maximize validation mAP.
//!
//! Weights live on the probability simplex: the ranking metrics are invariant
//! to positive rescaling of the fused matrix, so unnormalized weights would
//! only add a redundant degree of freedom. The optimizer runs an exhaustive
//! simplex-lattice search (the lattice contains every vertex, so the result
//! can never fall below the best single model) followed by rounds of
//! halving-step coordinate ascent. mAP is piecewise constant in the weights,
//! hence the gradient-free design.

use std::io;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DataError, LabelMatrix, ScoreMatrix};
use crate::metrics::{average_precision, MetricsError};
use crate::taxonomy::Taxonomy;
use crate::util::atomic_write;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("no models given")]
    EmptyModelList,
    #[error("{ids} model ids but {weights} weights")]
    WeightCount { ids: usize, weights: usize },
    #[error("weight {index} is not finite")]
    NonFiniteWeight { index: usize },
    #[error("weight {index} is negative ({value})")]
    NegativeWeight { index: usize, value: f64 },
    #[error("weights sum to {sum}, expected 1 within 1e-9")]
    WeightSum { sum: f64 },
    #[error("{weights} weights given for {scores} score matrices")]
    ModelCountMismatch { weights: usize, scores: usize },
    #[error("weight {position} belongs to model `{weight_id}` but score matrix {position} is `{score_id}`")]
    ModelIdMismatch {
        position: usize,
        weight_id: String,
        score_id: String,
    },
    #[error("model `{model}`: clip ids or order differ from `{reference}`; align inputs first")]
    ClipMismatch { model: String, reference: String },
    #[error("model `{model}` has {found} classes, expected {expected}")]
    ClassCountMismatch {
        model: String,
        expected: usize,
        found: usize,
    },
    #[error("grid step {0} does not divide 1 into a whole number of steps")]
    BadGridStep(f64),
    #[error("labels have no positive entry in any class; the mAP objective is undefined")]
    DegenerateLabels,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("failed to read {path}: {source}")]
    ReadWeights { path: PathBuf, source: io::Error },
    #[error("failed to write {path}: {source}")]
    WriteWeights { path: PathBuf, source: io::Error },
    #[error("bad weights JSON for {path}: {source}")]
    WeightsJson {
        path: PathBuf,
        source: serde_json::Error,
    },
}

/// A point on the probability simplex assigning one scalar weight per model.
/// Validated on construction: non-negative, finite, summing to 1 within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    model_ids: Vec<String>,
    w: Vec<f64>,
}

impl FusionWeights {
    pub fn new(model_ids: Vec<String>, w: Vec<f64>) -> Result<Self, FusionError> {
        if model_ids.is_empty() {
            return Err(FusionError::EmptyModelList);
        }
        if model_ids.len() != w.len() {
            return Err(FusionError::WeightCount {
                ids: model_ids.len(),
                weights: w.len(),
            });
        }
        for (index, &value) in w.iter().enumerate() {
            if !value.is_finite() {
                return Err(FusionError::NonFiniteWeight { index });
            }
            if value < 0.0 {
                return Err(FusionError::NegativeWeight { index, value });
            }
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(FusionError::WeightSum { sum });
        }
        Ok(Self { model_ids, w })
    }

    pub fn model_ids(&self) -> &[String] {
        &self.model_ids
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }
}

/// Optional per-class calibration applied before fusing scores from
/// heterogeneous backbones. Off (`None`) by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalizationMode {
    None,
    /// Rescale each column to [0,1]; constant columns map to all-0.5.
    MinMaxPerClass,
    /// Center/scale each column by its mean and population stddev;
    /// zero-stddev columns map to all-zero.
    ZScorePerClass,
}

/// Applies the chosen per-class calibration, returning a new matrix with the
/// same model id and clip order.
pub fn normalize_scores(scores: &ScoreMatrix, mode: NormalizationMode) -> ScoreMatrix {
    if mode == NormalizationMode::None {
        return scores.clone();
    }
    let mut values = scores.values().clone();
    for mut column in values.columns_mut() {
        match mode {
            NormalizationMode::None => unreachable!(),
            NormalizationMode::MinMaxPerClass => {
                let min = column.iter().copied().fold(f64::INFINITY, f64::min);
                let max = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if min == max {
                    column.fill(0.5);
                } else if (max - min).is_finite() {
                    column.mapv_inplace(|v| (v - min) / (max - min));
                } else {
                    // range overflows f64; halve first to keep arithmetic finite
                    let (min2, max2) = (min / 2.0, max / 2.0);
                    column.mapv_inplace(|v| (v / 2.0 - min2) / (max2 - min2));
                }
            }
            NormalizationMode::ZScorePerClass => {
                let mut mean = 0.0;
                let mut m2 = 0.0;
                for (k, &v) in column.iter().enumerate() {
                    let d = v - mean;
                    mean += d / (k + 1) as f64;
                    m2 += d * (v - mean);
                }
                let sigma = (m2 / column.len() as f64).sqrt();
                if sigma == 0.0 || !sigma.is_finite() {
                    column.fill(0.0);
                } else {
                    column.mapv_inplace(|v| (v - mean) / sigma);
                }
            }
        }
    }
    ScoreMatrix::new(scores.model_id(), scores.clip_ids().to_vec(), values)
        .expect("normalized columns stay finite")
}

fn check_fusable(scores: &[ScoreMatrix]) -> Result<(), FusionError> {
    let first = match scores.first() {
        Some(first) => first,
        None => return Err(FusionError::EmptyModelList),
    };
    for m in &scores[1..] {
        if m.clip_ids() != first.clip_ids() {
            return Err(FusionError::ClipMismatch {
                model: m.model_id().to_string(),
                reference: first.model_id().to_string(),
            });
        }
        if m.num_classes() != first.num_classes() {
            return Err(FusionError::ClassCountMismatch {
                model: m.model_id().to_string(),
                expected: first.num_classes(),
                found: m.num_classes(),
            });
        }
    }
    Ok(())
}

fn fuse_values(scores: &[ScoreMatrix], w: &[f64]) -> Array2<f64> {
    let mut acc = Array2::zeros(scores[0].values().dim());
    // fixed accumulation order keeps the result bit-reproducible
    for (weight, matrix) in w.iter().zip(scores) {
        acc.scaled_add(*weight, matrix.values());
    }
    acc
}

/// Weighted sum of aligned score matrices: output cell = Σ_m w_m · s_m.
/// The result carries model id `"fusion"`.
pub fn fuse(scores: &[ScoreMatrix], weights: &FusionWeights) -> Result<ScoreMatrix, FusionError> {
    check_fusable(scores)?;
    if weights.w.len() != scores.len() {
        return Err(FusionError::ModelCountMismatch {
            weights: weights.w.len(),
            scores: scores.len(),
        });
    }
    for (position, (id, m)) in weights.model_ids.iter().zip(scores).enumerate() {
        if id != m.model_id() {
            return Err(FusionError::ModelIdMismatch {
                position,
                weight_id: id.clone(),
                score_id: m.model_id().to_string(),
            });
        }
    }
    let values = fuse_values(scores, &weights.w);
    Ok(ScoreMatrix::new(
        "fusion",
        scores[0].clip_ids().to_vec(),
        values,
    )?)
}

/// All non-negative integer vectors of the given length summing to `steps`,
/// in ascending lexicographic order.
fn simplex_lattice(models: usize, steps: u32) -> Vec<Vec<u32>> {
    fn rec(pos: usize, remaining: u32, current: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if pos + 1 == current.len() {
            current[pos] = remaining;
            out.push(current.clone());
            return;
        }
        for k in 0..=remaining {
            current[pos] = k;
            rec(pos + 1, remaining - k, current, out);
        }
    }
    let mut out = Vec::new();
    rec(0, steps, &mut vec![0; models], &mut out);
    out
}

/// `a` strictly precedes `b` in the optimizer's total order:
/// higher mAP first, then lexicographically smaller weight vector.
fn better(a_map: f64, a_w: &[f64], b_map: f64, b_w: &[f64]) -> bool {
    if a_map != b_map {
        return a_map > b_map;
    }
    for (x, y) in a_w.iter().zip(b_w) {
        if x != y {
            return x < y;
        }
    }
    false
}

/// mAP of the fused matrix; exactly the arithmetic `evaluate` would perform.
fn fused_map(
    scores: &[ScoreMatrix],
    w: &[f64],
    label_columns: &[Vec<u8>],
) -> Result<f64, MetricsError> {
    let fused = fuse_values(scores, w);
    let mut sum = 0.0;
    let mut count = 0usize;
    for (c, labels) in label_columns.iter().enumerate() {
        if let Some(ap) = average_precision(&fused.column(c).to_vec(), labels)? {
            sum += ap;
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// Exhaustive simplex-lattice search followed by coordinate-ascent
/// refinement, maximizing validation mAP.
///
/// Phase 1 evaluates every lattice point `w_m = k_m · grid_step` with
/// `Σ k_m = 1/grid_step` (vertex weights snap to exactly 1, making the
/// single-model dominance guarantee exact for any step). Phase 2 runs
/// `refine_rounds` passes where each coordinate tries `± grid_step / 2^r`,
/// clamped to the simplex. Ties always resolve to the lexicographically
/// smallest weight vector, so the search is deterministic even though
/// lattice points are evaluated in parallel.
pub fn optimize_weights(
    scores: &[ScoreMatrix],
    labels: &LabelMatrix,
    taxonomy: &Taxonomy,
    grid_step: f64,
    refine_rounds: u32,
) -> Result<(FusionWeights, f64), FusionError> {
    check_fusable(scores)?;
    for m in scores {
        if m.clip_ids() != labels.clip_ids() {
            return Err(FusionError::ClipMismatch {
                model: m.model_id().to_string(),
                reference: "labels".to_string(),
            });
        }
        if m.num_classes() != taxonomy.num_classes() {
            return Err(FusionError::ClassCountMismatch {
                model: m.model_id().to_string(),
                expected: taxonomy.num_classes(),
                found: m.num_classes(),
            });
        }
    }
    if !(grid_step > 0.0 && grid_step <= 1.0) {
        return Err(FusionError::BadGridStep(grid_step));
    }
    let steps_exact = 1.0 / grid_step;
    let steps = steps_exact.round();
    if (steps_exact - steps).abs() > 1e-9 || steps < 1.0 {
        return Err(FusionError::BadGridStep(grid_step));
    }
    let steps = steps as u32;
    if labels.values().iter().all(|&y| y == 0) {
        return Err(FusionError::DegenerateLabels);
    }

    let label_columns: Vec<Vec<u8>> = (0..labels.num_classes())
        .map(|c| labels.values().column(c).to_vec())
        .collect();
    let to_weights = |k: &[u32]| -> Vec<f64> {
        k.iter()
            .map(|&k_m| {
                if k_m == steps {
                    1.0
                } else {
                    k_m as f64 * grid_step
                }
            })
            .collect()
    };

    let lattice = simplex_lattice(scores.len(), steps);
    let evaluated: Vec<(f64, Vec<f64>)> = lattice
        .par_iter()
        .map(|k| {
            let w = to_weights(k);
            fused_map(scores, &w, &label_columns).map(|map| (map, w))
        })
        .collect::<Result<_, _>>()?;
    // sequential fold in lattice order: deterministic regardless of scheduling
    let (mut best_map, mut best_w) = evaluated
        .into_iter()
        .reduce(|best, cand| {
            if better(cand.0, &cand.1, best.0, &best.1) {
                cand
            } else {
                best
            }
        })
        .expect("lattice is never empty");

    for round in 1..=refine_rounds {
        let delta = grid_step / f64::powi(2.0, round as i32);
        for m in 0..scores.len() {
            for sign in [1.0, -1.0] {
                let mut cand = best_w.clone();
                cand[m] = (cand[m] + sign * delta).max(0.0);
                let sum: f64 = cand.iter().sum();
                if sum <= 0.0 {
                    continue;
                }
                for w in &mut cand {
                    *w /= sum;
                }
                let map = fused_map(scores, &cand, &label_columns)?;
                if better(map, &cand, best_map, &best_w) {
                    best_map = map;
                    best_w = cand;
                }
            }
        }
    }

    let model_ids = scores.iter().map(|m| m.model_id().to_string()).collect();
    Ok((FusionWeights::new(model_ids, best_w)?, best_map))
}

#[derive(Serialize, Deserialize)]
struct WeightsFile {
    model_ids: Vec<String>,
    w: Vec<f64>,
    val_map: f64,
}

/// Writes fusion weights plus the mAP they achieved on the optimization data
/// as JSON (atomically).
pub fn write_weights(
    weights: &FusionWeights,
    val_map: f64,
    path: impl AsRef<Path>,
) -> Result<(), FusionError> {
    let path = path.as_ref();
    let file = WeightsFile {
        model_ids: weights.model_ids.clone(),
        w: weights.w.clone(),
        val_map,
    };
    let mut bytes = serde_json::to_vec_pretty(&file).map_err(|source| FusionError::WeightsJson {
        path: path.to_path_buf(),
        source,
    })?;
    bytes.push(b'\n');
    atomic_write(path, &bytes).map_err(|source| FusionError::WriteWeights {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads back a weights file, re-validating the simplex invariants.
pub fn read_weights(path: impl AsRef<Path>) -> Result<(FusionWeights, f64), FusionError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| FusionError::ReadWeights {
        path: path.to_path_buf(),
        source,
    })?;
    let file: WeightsFile =
        serde_json::from_slice(&bytes).map_err(|source| FusionError::WeightsJson {
            path: path.to_path_buf(),
            source,
        })?;
    Ok((FusionWeights::new(file.model_ids, file.w)?, file.val_map))
}
