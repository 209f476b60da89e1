//! Forward-only slot-attention scorer: iterative attention over a clip's
//! flattened feature grid, one dedicated slot per class (plus optional
//! background slots), with a per-slot logistic readout.
//!
//! The defining trait of the mechanism is that the attention softmax is
//! normalized across *slots*, not across input locations, so slots compete
//! for locations. Per iteration: queries come from layer-normalized slots;
//! logits are scaled dot products against keys computed once from the
//! projected inputs; each slot's update vector is the attention-weighted
//! mean of the value vectors (weights renormalized per slot across
//! locations, denominator floored at 1e-8); slots then pass through a gated
//! recurrent update. There is no randomness anywhere: training happens
//! elsewhere and weights arrive via a tensor archive.
//!
//! Archives store f32 (see [`crate::archive`]); all arithmetic here runs in
//! f64, which keeps the mechanism's symmetries sharp — permuting slot
//! initializations together with readout rows permutes the class
//! probabilities to within 1e-12.
//!
//! A model archive holds exactly these tensors:
//!
//! | name                 | shape        |
//! |----------------------|--------------|
//! | `input_proj.weight`  | `[D, D_in]`  |
//! | `input_proj.bias`    | `[D]`        |
//! | `key_proj.weight`    | `[D, D]`     |
//! | `query_proj.weight`  | `[D, D]`     |
//! | `value_proj.weight`  | `[D, D]`     |
//! | `slots_init`         | `[S, D]`     |
//! | `slot_norm.gamma`    | `[D]`        |
//! | `slot_norm.beta`     | `[D]`        |
//! | `gru.weight_ih`      | `[3D, D]`    |
//! | `gru.weight_hh`      | `[3D, D]`    |
//! | `gru.bias_ih`        | `[3D]`       |
//! | `gru.bias_hh`        | `[3D]`       |
//! | `readout.weight`     | `[S, D]`     |
//! | `readout.bias`       | `[S]`        |
//! | `iterations`         | `[1]` scalar |
//! | `num_classes`        | `[1]` scalar |
//!
//! Key/query/value projections are weight-only; the gated update follows the
//! widespread GRU-cell convention with gates stacked in (reset, update,
//! candidate) order. Feature files are the same archive format with a single
//! 2-D tensor named `features`.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{s, Array1, Array2};
use rayon::prelude::*;
use thiserror::Error;

use crate::archive::{read_archive, write_archive, ArchiveError, TensorEntry};
use crate::dataset::{DataError, ScoreMatrix};
use crate::taxonomy::Taxonomy;

const INPUT_W: &str = "input_proj.weight";
const INPUT_B: &str = "input_proj.bias";
const KEY_W: &str = "key_proj.weight";
const QUERY_W: &str = "query_proj.weight";
const VALUE_W: &str = "value_proj.weight";
const SLOTS_INIT: &str = "slots_init";
const NORM_GAMMA: &str = "slot_norm.gamma";
const NORM_BETA: &str = "slot_norm.beta";
const GRU_W_IH: &str = "gru.weight_ih";
const GRU_W_HH: &str = "gru.weight_hh";
const GRU_B_IH: &str = "gru.bias_ih";
const GRU_B_HH: &str = "gru.bias_hh";
const READOUT_W: &str = "readout.weight";
const READOUT_B: &str = "readout.bias";
const ITERATIONS: &str = "iterations";
const NUM_CLASSES: &str = "num_classes";
const FEATURES: &str = "features";

const LAYER_NORM_EPS: f64 = 1e-5;
const MEAN_DENOM_FLOOR: f64 = 1e-8;
const PROB_MARGIN: f64 = 1e-12;
/// Largest integer a scalar tensor can carry without f32 rounding (2^24).
const MAX_SCALAR: f64 = 16_777_216.0;

#[derive(Debug, Error)]
pub enum SlotError {
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("model archive is missing tensor `{name}`")]
    MissingTensor { name: String },
    #[error("archive contains unexpected tensor `{name}`")]
    UnexpectedTensor { name: String },
    #[error("tensor `{name}` has shape {found:?}, expected {expected}")]
    BadShape {
        name: String,
        expected: String,
        found: Vec<usize>,
    },
    #[error("tensor `{name}` contains a non-finite value")]
    NonFiniteTensor { name: String },
    #[error("scalar tensor `{name}` holds {value}, expected a whole number in [1, 2^24]")]
    BadScalar { name: String, value: f64 },
    #[error("num_classes is {num_classes} but the model has only {num_slots} slots")]
    ClassCount { num_classes: usize, num_slots: usize },
    #[error("feature tensor must have at least one {axis}")]
    EmptyFeatures { axis: &'static str },
    #[error("feature value at location {row}, dim {col} is not finite")]
    FeatureNotFinite { row: usize, col: usize },
    #[error("features have dim {feature_dim} but the model expects {expected}")]
    DimMismatch { feature_dim: usize, expected: usize },
    #[error("model scores {params} classes but the taxonomy declares {taxonomy}")]
    TaxonomyMismatch { params: usize, taxonomy: usize },
}

/// A clip's backbone output, flattened to `L` spatio-temporal locations of
/// dimension `D_in`. Validated finite and non-empty.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    values: Array2<f64>,
}

impl FeatureTensor {
    pub fn new(values: Array2<f64>) -> Result<Self, SlotError> {
        if values.nrows() == 0 {
            return Err(SlotError::EmptyFeatures { axis: "location" });
        }
        if values.ncols() == 0 {
            return Err(SlotError::EmptyFeatures { axis: "feature dimension" });
        }
        for ((row, col), &v) in values.indexed_iter() {
            if !v.is_finite() {
                return Err(SlotError::FeatureNotFinite { row, col });
            }
        }
        Ok(Self { values })
    }

    pub fn num_locations(&self) -> usize {
        self.values.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }
}

/// Unvalidated parameter bag; see the module table for expected shapes.
/// [`SlotModelParams::from_parts`] turns it into a checked model.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotModelParts {
    pub iterations: usize,
    pub num_classes: usize,
    pub input_w: Array2<f64>,
    pub input_b: Array1<f64>,
    pub key_w: Array2<f64>,
    pub query_w: Array2<f64>,
    pub value_w: Array2<f64>,
    pub slots_init: Array2<f64>,
    pub norm_gamma: Array1<f64>,
    pub norm_beta: Array1<f64>,
    pub gru_w_ih: Array2<f64>,
    pub gru_w_hh: Array2<f64>,
    pub gru_b_ih: Array1<f64>,
    pub gru_b_hh: Array1<f64>,
    pub readout_w: Array2<f64>,
    pub readout_b: Array1<f64>,
}

/// Validated, immutable slot-attention parameters. `S`/`D`/`D_in` come from
/// the tensor shapes; every tensor is finite and mutually consistent.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotModelParams {
    num_slots: usize,
    slot_dim: usize,
    input_dim: usize,
    iterations: usize,
    num_classes: usize,
    parts: SlotModelParts,
}

impl SlotModelParams {
    pub fn from_parts(parts: SlotModelParts) -> Result<Self, SlotError> {
        let slot_dim = parts.input_w.nrows();
        let input_dim = parts.input_w.ncols();
        if slot_dim == 0 || input_dim == 0 {
            return Err(SlotError::BadShape {
                name: INPUT_W.to_string(),
                expected: "a non-empty [slot_dim, input_dim] matrix".to_string(),
                found: vec![slot_dim, input_dim],
            });
        }
        let num_slots = parts.slots_init.nrows();
        if num_slots == 0 {
            return Err(SlotError::BadShape {
                name: SLOTS_INIT.to_string(),
                expected: "at least one slot row".to_string(),
                found: vec![0, parts.slots_init.ncols()],
            });
        }

        let expect2 = |name: &str, a: &Array2<f64>, rows: usize, cols: usize| {
            if a.nrows() == rows && a.ncols() == cols {
                Ok(())
            } else {
                Err(SlotError::BadShape {
                    name: name.to_string(),
                    expected: format!("[{rows}, {cols}]"),
                    found: vec![a.nrows(), a.ncols()],
                })
            }
        };
        let expect1 = |name: &str, a: &Array1<f64>, len: usize| {
            if a.len() == len {
                Ok(())
            } else {
                Err(SlotError::BadShape {
                    name: name.to_string(),
                    expected: format!("[{len}]"),
                    found: vec![a.len()],
                })
            }
        };
        expect1(INPUT_B, &parts.input_b, slot_dim)?;
        expect2(KEY_W, &parts.key_w, slot_dim, slot_dim)?;
        expect2(QUERY_W, &parts.query_w, slot_dim, slot_dim)?;
        expect2(VALUE_W, &parts.value_w, slot_dim, slot_dim)?;
        expect2(SLOTS_INIT, &parts.slots_init, num_slots, slot_dim)?;
        expect1(NORM_GAMMA, &parts.norm_gamma, slot_dim)?;
        expect1(NORM_BETA, &parts.norm_beta, slot_dim)?;
        expect2(GRU_W_IH, &parts.gru_w_ih, 3 * slot_dim, slot_dim)?;
        expect2(GRU_W_HH, &parts.gru_w_hh, 3 * slot_dim, slot_dim)?;
        expect1(GRU_B_IH, &parts.gru_b_ih, 3 * slot_dim)?;
        expect1(GRU_B_HH, &parts.gru_b_hh, 3 * slot_dim)?;
        expect2(READOUT_W, &parts.readout_w, num_slots, slot_dim)?;
        expect1(READOUT_B, &parts.readout_b, num_slots)?;

        if parts.iterations == 0 {
            return Err(SlotError::BadScalar {
                name: ITERATIONS.to_string(),
                value: 0.0,
            });
        }
        if parts.num_classes == 0 || parts.num_classes > num_slots {
            return Err(SlotError::ClassCount {
                num_classes: parts.num_classes,
                num_slots,
            });
        }

        check_finite(INPUT_W, &parts.input_w)?;
        check_finite(INPUT_B, &parts.input_b)?;
        check_finite(KEY_W, &parts.key_w)?;
        check_finite(QUERY_W, &parts.query_w)?;
        check_finite(VALUE_W, &parts.value_w)?;
        check_finite(SLOTS_INIT, &parts.slots_init)?;
        check_finite(NORM_GAMMA, &parts.norm_gamma)?;
        check_finite(NORM_BETA, &parts.norm_beta)?;
        check_finite(GRU_W_IH, &parts.gru_w_ih)?;
        check_finite(GRU_W_HH, &parts.gru_w_hh)?;
        check_finite(GRU_B_IH, &parts.gru_b_ih)?;
        check_finite(GRU_B_HH, &parts.gru_b_hh)?;
        check_finite(READOUT_W, &parts.readout_w)?;
        check_finite(READOUT_B, &parts.readout_b)?;

        Ok(Self {
            num_slots,
            slot_dim,
            input_dim,
            iterations: parts.iterations,
            num_classes: parts.num_classes,
            parts,
        })
    }

    pub fn num_slots(&self) -> usize {
        self.num_slots
    }

    pub fn slot_dim(&self) -> usize {
        self.slot_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
}

/// Result of one forward pass: final slot states, the `S×L` attention map of
/// every iteration, and the per-class probabilities (strictly inside (0,1)).
#[derive(Debug, Clone, PartialEq)]
pub struct SlotOutput {
    pub slot_states: Array2<f64>,
    pub attention: Vec<Array2<f64>>,
    pub class_probs: Vec<f64>,
}

fn check_finite<'a, I>(name: &str, values: I) -> Result<(), SlotError>
where
    I: IntoIterator<Item = &'a f64>,
{
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(SlotError::NonFiniteTensor {
            name: name.to_string(),
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn layer_norm(rows: &Array2<f64>, gamma: &Array1<f64>, beta: &Array1<f64>) -> Array2<f64> {
    let mut normed = rows.clone();
    for mut row in normed.rows_mut() {
        let mean = row.mean().expect("slot_dim >= 1");
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    normed * gamma + beta
}

/// Softmax across the slot axis (rows), independently per location (column),
/// guarded by max-subtraction. Every column then sums to 1.
fn softmax_over_slots(logits: &mut Array2<f64>) {
    for mut col in logits.columns_mut() {
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        col.mapv_inplace(|v| (v - max).exp());
        let sum = col.sum();
        col.mapv_inplace(|v| v / sum);
    }
}

/// Gated recurrent update applied to every slot row independently; gates are
/// stacked (reset, update, candidate) in the weight matrices.
fn gru_cell(input: &Array2<f64>, hidden: &Array2<f64>, p: &SlotModelParts) -> Array2<f64> {
    let d = hidden.ncols();
    let gi = input.dot(&p.gru_w_ih.t()) + &p.gru_b_ih;
    let gh = hidden.dot(&p.gru_w_hh.t()) + &p.gru_b_hh;
    let r = (&gi.slice(s![.., 0..d]) + &gh.slice(s![.., 0..d])).mapv(sigmoid);
    let z = (&gi.slice(s![.., d..2 * d]) + &gh.slice(s![.., d..2 * d])).mapv(sigmoid);
    let n = (&gi.slice(s![.., 2 * d..3 * d]) + &(&r * &gh.slice(s![.., 2 * d..3 * d])))
        .mapv(f64::tanh);
    (1.0 - &z) * &n + &z * hidden
}

/// Runs the iterative attention recipe described in the module docs.
/// Deterministic; errors only on a feature/model dimension mismatch.
pub fn slot_attention_forward(
    features: &FeatureTensor,
    params: &SlotModelParams,
) -> Result<SlotOutput, SlotError> {
    if features.feature_dim() != params.input_dim {
        return Err(SlotError::DimMismatch {
            feature_dim: features.feature_dim(),
            expected: params.input_dim,
        });
    }
    let p = &params.parts;
    let x = features.values().dot(&p.input_w.t()) + &p.input_b; // [L, D]
    let keys = x.dot(&p.key_w.t());
    let values = x.dot(&p.value_w.t());
    let scale = 1.0 / (params.slot_dim as f64).sqrt();

    let mut slots = p.slots_init.clone();
    let mut attention_maps = Vec::with_capacity(params.iterations);
    for _ in 0..params.iterations {
        let queries = layer_norm(&slots, &p.norm_gamma, &p.norm_beta).dot(&p.query_w.t());
        let mut attention = queries.dot(&keys.t()); // [S, L]
        attention.mapv_inplace(|v| v * scale);
        softmax_over_slots(&mut attention);

        let mut updates = attention.dot(&values); // [S, D]
        for (mut row, att) in updates.rows_mut().into_iter().zip(attention.rows()) {
            let denom = att.sum().max(MEAN_DENOM_FLOOR);
            row.mapv_inplace(|v| v / denom);
        }
        attention_maps.push(attention);
        slots = gru_cell(&updates, &slots, p);
    }

    let class_probs = (0..params.num_classes)
        .map(|c| {
            let logit = p.readout_w.row(c).dot(&slots.row(c)) + p.readout_b[c];
            sigmoid(logit).clamp(PROB_MARGIN, 1.0 - PROB_MARGIN)
        })
        .collect();
    Ok(SlotOutput {
        slot_states: slots,
        attention: attention_maps,
        class_probs,
    })
}

/// One clip's class-probability row, checked against the taxonomy width.
/// Composable with the metrics and fusion modules via [`score_clips`].
pub fn predict_multilabel(
    features: &FeatureTensor,
    params: &SlotModelParams,
    taxonomy: &Taxonomy,
) -> Result<Vec<f64>, SlotError> {
    if params.num_classes != taxonomy.num_classes() {
        return Err(SlotError::TaxonomyMismatch {
            params: params.num_classes,
            taxonomy: taxonomy.num_classes(),
        });
    }
    Ok(slot_attention_forward(features, params)?.class_probs)
}

/// Scores a batch of clips into a [`ScoreMatrix`] (clips in the given order).
/// Forward passes are pure, so clips are scored in parallel.
pub fn score_clips(
    model_id: &str,
    clips: &[(String, FeatureTensor)],
    params: &SlotModelParams,
    taxonomy: &Taxonomy,
) -> Result<ScoreMatrix, SlotError> {
    let rows: Vec<Vec<f64>> = clips
        .par_iter()
        .map(|(_, features)| predict_multilabel(features, params, taxonomy))
        .collect::<Result<_, _>>()?;
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let values = Array2::from_shape_vec((clips.len(), taxonomy.num_classes()), flat)
        .expect("each row has taxonomy width");
    let clip_ids = clips.iter().map(|(id, _)| id.clone()).collect();
    Ok(ScoreMatrix::new(model_id, clip_ids, values)?)
}

fn entry_1d(name: &str, a: &Array1<f64>) -> TensorEntry {
    TensorEntry::new(
        name,
        vec![a.len()],
        a.iter().map(|&v| v as f32).collect(),
    )
    .expect("shape matches data by construction")
}

fn entry_2d(name: &str, a: &Array2<f64>) -> TensorEntry {
    TensorEntry::new(
        name,
        vec![a.nrows(), a.ncols()],
        a.iter().map(|&v| v as f32).collect(),
    )
    .expect("shape matches data by construction")
}

fn entry_scalar(name: &str, value: usize) -> TensorEntry {
    TensorEntry::new(name, vec![1], vec![value as f32])
        .expect("shape matches data by construction")
}

/// Saves model parameters as a tensor archive. Storage is f32: parameters
/// that came from an archive round-trip bit-exactly.
pub fn save_model(params: &SlotModelParams, path: impl AsRef<Path>) -> Result<(), SlotError> {
    let p = &params.parts;
    let tensors = vec![
        entry_2d(INPUT_W, &p.input_w),
        entry_1d(INPUT_B, &p.input_b),
        entry_2d(KEY_W, &p.key_w),
        entry_2d(QUERY_W, &p.query_w),
        entry_2d(VALUE_W, &p.value_w),
        entry_2d(SLOTS_INIT, &p.slots_init),
        entry_1d(NORM_GAMMA, &p.norm_gamma),
        entry_1d(NORM_BETA, &p.norm_beta),
        entry_2d(GRU_W_IH, &p.gru_w_ih),
        entry_2d(GRU_W_HH, &p.gru_w_hh),
        entry_1d(GRU_B_IH, &p.gru_b_ih),
        entry_1d(GRU_B_HH, &p.gru_b_hh),
        entry_2d(READOUT_W, &p.readout_w),
        entry_1d(READOUT_B, &p.readout_b),
        entry_scalar(ITERATIONS, params.iterations),
        entry_scalar(NUM_CLASSES, params.num_classes),
    ];
    write_archive(&tensors, path)?;
    Ok(())
}

fn to_2d(entry: TensorEntry) -> Result<Array2<f64>, SlotError> {
    if entry.shape.len() != 2 {
        return Err(SlotError::BadShape {
            name: entry.name,
            expected: "2 dimensions".to_string(),
            found: entry.shape,
        });
    }
    let shape = (entry.shape[0], entry.shape[1]);
    let data: Vec<f64> = entry.data.iter().map(|&v| v as f64).collect();
    Ok(Array2::from_shape_vec(shape, data).expect("archive validated element count"))
}

fn to_1d(entry: TensorEntry) -> Result<Array1<f64>, SlotError> {
    if entry.shape.len() != 1 {
        return Err(SlotError::BadShape {
            name: entry.name,
            expected: "1 dimension".to_string(),
            found: entry.shape,
        });
    }
    Ok(Array1::from_vec(entry.data.iter().map(|&v| v as f64).collect()))
}

fn to_scalar(entry: TensorEntry) -> Result<usize, SlotError> {
    if entry.shape != [1] {
        return Err(SlotError::BadShape {
            name: entry.name,
            expected: "[1]".to_string(),
            found: entry.shape,
        });
    }
    let value = entry.data[0] as f64;
    if !value.is_finite() || value < 1.0 || value.fract() != 0.0 || value > MAX_SCALAR {
        return Err(SlotError::BadScalar {
            name: entry.name,
            value,
        });
    }
    Ok(value as usize)
}

/// Loads and validates model parameters from a tensor archive. Shape
/// problems are reported with the offending tensor's name.
pub fn load_model(path: impl AsRef<Path>) -> Result<SlotModelParams, SlotError> {
    let mut by_name: HashMap<String, TensorEntry> = read_archive(path)?
        .into_iter()
        .map(|t| (t.name.clone(), t))
        .collect();
    let mut take = |name: &str| {
        by_name.remove(name).ok_or_else(|| SlotError::MissingTensor {
            name: name.to_string(),
        })
    };
    let parts = SlotModelParts {
        input_w: to_2d(take(INPUT_W)?)?,
        input_b: to_1d(take(INPUT_B)?)?,
        key_w: to_2d(take(KEY_W)?)?,
        query_w: to_2d(take(QUERY_W)?)?,
        value_w: to_2d(take(VALUE_W)?)?,
        slots_init: to_2d(take(SLOTS_INIT)?)?,
        norm_gamma: to_1d(take(NORM_GAMMA)?)?,
        norm_beta: to_1d(take(NORM_BETA)?)?,
        gru_w_ih: to_2d(take(GRU_W_IH)?)?,
        gru_w_hh: to_2d(take(GRU_W_HH)?)?,
        gru_b_ih: to_1d(take(GRU_B_IH)?)?,
        gru_b_hh: to_1d(take(GRU_B_HH)?)?,
        readout_w: to_2d(take(READOUT_W)?)?,
        readout_b: to_1d(take(READOUT_B)?)?,
        iterations: to_scalar(take(ITERATIONS)?)?,
        num_classes: to_scalar(take(NUM_CLASSES)?)?,
    };
    if let Some(extra) = by_name.into_keys().min() {
        return Err(SlotError::UnexpectedTensor { name: extra });
    }
    SlotModelParams::from_parts(parts)
}

/// Saves a feature tensor as an archive holding one `features` tensor (f32).
pub fn save_features(features: &FeatureTensor, path: impl AsRef<Path>) -> Result<(), SlotError> {
    write_archive(&[entry_2d(FEATURES, &features.values)], path)?;
    Ok(())
}

/// Loads a feature file: exactly one 2-D tensor named `features`.
pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureTensor, SlotError> {
    let tensors = read_archive(path)?;
    let mut features = None;
    for entry in tensors {
        if entry.name == FEATURES {
            features = Some(entry);
        } else {
            return Err(SlotError::UnexpectedTensor { name: entry.name });
        }
    }
    let entry = features.ok_or_else(|| SlotError::MissingTensor {
        name: FEATURES.to_string(),
    })?;
    FeatureTensor::new(to_2d(entry)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::evaluate;
    use crate::dataset::LabelMatrix;
    use crate::taxonomy::{AgentGroup, ClassDef};
    use approx::assert_abs_diff_eq;
    use ndarray::Axis;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn vec1(rng: &mut ChaCha8Rng, len: usize) -> Array1<f64> {
        Array1::from_shape_fn(len, |_| rng.random_range(-1.0f32..1.0) as f64)
    }

    fn vec2(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0f32..1.0) as f64)
    }

    /// Random parameters with f32-representable values, so archive round
    /// trips are bit-exact.
    fn random_parts(
        rng: &mut ChaCha8Rng,
        num_slots: usize,
        slot_dim: usize,
        input_dim: usize,
        iterations: usize,
        num_classes: usize,
    ) -> SlotModelParts {
        let mut gamma = vec1(rng, slot_dim);
        gamma.mapv_inplace(|g| g + 1.5); // keep the norm gain away from zero
        SlotModelParts {
            iterations,
            num_classes,
            input_w: vec2(rng, slot_dim, input_dim),
            input_b: vec1(rng, slot_dim),
            key_w: vec2(rng, slot_dim, slot_dim),
            query_w: vec2(rng, slot_dim, slot_dim),
            value_w: vec2(rng, slot_dim, slot_dim),
            slots_init: vec2(rng, num_slots, slot_dim),
            norm_gamma: gamma,
            norm_beta: vec1(rng, slot_dim),
            gru_w_ih: vec2(rng, 3 * slot_dim, slot_dim),
            gru_w_hh: vec2(rng, 3 * slot_dim, slot_dim),
            gru_b_ih: vec1(rng, 3 * slot_dim),
            gru_b_hh: vec1(rng, 3 * slot_dim),
            readout_w: vec2(rng, num_slots, slot_dim),
            readout_b: vec1(rng, num_slots),
        }
    }

    fn random_features(rng: &mut ChaCha8Rng, locations: usize, dim: usize) -> FeatureTensor {
        FeatureTensor::new(Array2::from_shape_fn((locations, dim), |_| {
            rng.random_range(-1.0f32..1.0) as f64
        }))
        .unwrap()
    }

    #[test]
    fn single_slot_attention_is_all_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params =
            SlotModelParams::from_parts(random_parts(&mut rng, 1, 4, 6, 3, 1)).unwrap();
        let features = random_features(&mut rng, 10, 6);
        let out = slot_attention_forward(&features, &params).unwrap();
        assert_eq!(out.attention.len(), 3);
        for att in &out.attention {
            assert_eq!(att.dim(), (1, 10));
            assert!(att.iter().all(|&a| a == 1.0));
        }
    }

    #[test]
    fn zero_readout_scores_half_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut parts = random_parts(&mut rng, 3, 4, 5, 2, 2);
        parts.readout_w.fill(0.0);
        parts.readout_b.fill(0.0);
        let params = SlotModelParams::from_parts(parts).unwrap();
        let features = random_features(&mut rng, 7, 5);
        let probs = slot_attention_forward(&features, &params).unwrap().class_probs;
        assert_eq!(probs, vec![0.5, 0.5]);
    }

    #[test]
    fn shape_error_names_the_readout() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut parts = random_parts(&mut rng, 3, 4, 5, 2, 2);
        parts.readout_w = Array2::zeros((4, 4)); // S+1 rows
        let err = SlotModelParams::from_parts(parts).unwrap_err();
        match err {
            SlotError::BadShape { name, found, .. } => {
                assert_eq!(name, "readout.weight");
                assert_eq!(found, vec![4, 4]);
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn non_finite_weight_is_rejected_by_name() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut parts = random_parts(&mut rng, 2, 3, 4, 1, 2);
        parts.gru_w_hh[(1, 2)] = f64::INFINITY;
        let err = SlotModelParams::from_parts(parts).unwrap_err();
        assert!(
            matches!(err, SlotError::NonFiniteTensor { ref name } if name == "gru.weight_hh"),
            "{err}"
        );
    }

    #[test]
    fn zero_iterations_and_bad_class_counts_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut parts = random_parts(&mut rng, 2, 3, 4, 1, 2);
        parts.iterations = 0;
        assert!(matches!(
            SlotModelParams::from_parts(parts.clone()),
            Err(SlotError::BadScalar { .. })
        ));
        parts.iterations = 1;
        parts.num_classes = 3;
        assert!(matches!(
            SlotModelParams::from_parts(parts.clone()),
            Err(SlotError::ClassCount { num_classes: 3, num_slots: 2 })
        ));
        parts.num_classes = 0;
        assert!(matches!(
            SlotModelParams::from_parts(parts),
            Err(SlotError::ClassCount { .. })
        ));
    }

    #[test]
    fn attention_columns_sum_to_one_each_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params =
            SlotModelParams::from_parts(random_parts(&mut rng, 4, 8, 16, 3, 4)).unwrap();
        let features = random_features(&mut rng, 20, 16);
        let out = slot_attention_forward(&features, &params).unwrap();
        assert_eq!(out.attention.len(), 3);
        for att in &out.attention {
            for col in att.columns() {
                assert_abs_diff_eq!(col.sum(), 1.0, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn permuting_locations_leaves_outputs_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params =
            SlotModelParams::from_parts(random_parts(&mut rng, 4, 8, 12, 3, 4)).unwrap();
        let features = random_features(&mut rng, 15, 12);
        let perm: Vec<usize> = (0..15).rev().collect();
        let permuted =
            FeatureTensor::new(features.values().select(Axis(0), &perm)).unwrap();

        let base = slot_attention_forward(&features, &params).unwrap();
        let moved = slot_attention_forward(&permuted, &params).unwrap();
        for (a, b) in base.slot_states.iter().zip(&moved.slot_states) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
        for (a, b) in base.class_probs.iter().zip(&moved.class_probs) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
        // attention columns travel with their locations
        for (att_base, att_moved) in base.attention.iter().zip(&moved.attention) {
            for (new_loc, &old_loc) in perm.iter().enumerate() {
                for s in 0..4 {
                    assert_abs_diff_eq!(
                        att_moved[(s, new_loc)],
                        att_base[(s, old_loc)],
                        epsilon = 1e-6
                    );
                }
            }
        }
    }

    #[test]
    fn permuting_slots_and_readout_permutes_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let parts = random_parts(&mut rng, 3, 6, 9, 3, 3);
        let features = random_features(&mut rng, 11, 9);
        let perm = [2usize, 0, 1];

        let mut permuted = parts.clone();
        permuted.slots_init = parts.slots_init.select(Axis(0), &perm);
        permuted.readout_w = parts.readout_w.select(Axis(0), &perm);
        permuted.readout_b = parts.readout_b.select(Axis(0), &perm);

        let base = slot_attention_forward(
            &features,
            &SlotModelParams::from_parts(parts).unwrap(),
        )
        .unwrap();
        let moved = slot_attention_forward(
            &features,
            &SlotModelParams::from_parts(permuted).unwrap(),
        )
        .unwrap();
        for (i, &j) in perm.iter().enumerate() {
            assert_abs_diff_eq!(moved.class_probs[i], base.class_probs[j], epsilon = 1e-12);
            for d in 0..6 {
                assert_abs_diff_eq!(
                    moved.slot_states[(i, d)],
                    base.slot_states[(j, d)],
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params =
            SlotModelParams::from_parts(random_parts(&mut rng, 5, 4, 7, 4, 3)).unwrap();
        let features = random_features(&mut rng, 9, 7);
        let a = slot_attention_forward(&features, &params).unwrap();
        let b = slot_attention_forward(&features, &params).unwrap();
        let bits = |v: &[f64]| -> Vec<u64> { v.iter().map(|x| x.to_bits()).collect() };
        assert_eq!(bits(&a.class_probs), bits(&b.class_probs));
        assert_eq!(a.slot_states, b.slot_states);
        assert_eq!(a.attention, b.attention);
    }

    #[test]
    fn feature_dim_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let params =
            SlotModelParams::from_parts(random_parts(&mut rng, 2, 3, 4, 1, 1)).unwrap();
        let features = random_features(&mut rng, 5, 6);
        assert!(matches!(
            slot_attention_forward(&features, &params),
            Err(SlotError::DimMismatch { feature_dim: 6, expected: 4 })
        ));
    }

    #[test]
    fn model_archive_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params =
            SlotModelParams::from_parts(random_parts(&mut rng, 4, 8, 16, 3, 3)).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.atsl");
        save_model(&params, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded, params);

        let features = random_features(&mut rng, 12, 16);
        let a = slot_attention_forward(&features, &params).unwrap();
        let b = slot_attention_forward(&features, &loaded).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn loading_rejects_missing_and_extra_tensors() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let params =
            SlotModelParams::from_parts(random_parts(&mut rng, 2, 3, 4, 2, 1)).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.atsl");
        save_model(&params, &path).unwrap();
        let mut tensors = read_archive(&path).unwrap();

        let dropped = dir.path().join("missing.atsl");
        let removed: Vec<_> = tensors
            .iter()
            .filter(|t| t.name != "gru.bias_ih")
            .cloned()
            .collect();
        write_archive(&removed, &dropped).unwrap();
        assert!(matches!(
            load_model(&dropped),
            Err(SlotError::MissingTensor { ref name }) if name == "gru.bias_ih"
        ));

        let extended = dir.path().join("extra.atsl");
        tensors.push(TensorEntry::new("stowaway", vec![1], vec![0.0]).unwrap());
        write_archive(&tensors, &extended).unwrap();
        assert!(matches!(
            load_model(&extended),
            Err(SlotError::UnexpectedTensor { ref name }) if name == "stowaway"
        ));
    }

    #[test]
    fn feature_archive_round_trip_and_strictness() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let features = random_features(&mut rng, 6, 5);
        let dir = tempdir().unwrap();
        let path = dir.path().join("clip.atsl");
        save_features(&features, &path).unwrap();
        let loaded = load_features(&path).unwrap();
        assert_eq!(loaded, features);

        let renamed = dir.path().join("renamed.atsl");
        let mut tensors = read_archive(&path).unwrap();
        tensors[0].name = "activations".to_string();
        write_archive(&tensors, &renamed).unwrap();
        assert!(matches!(
            load_features(&renamed),
            Err(SlotError::UnexpectedTensor { .. })
        ));

        let flat = dir.path().join("flat.atsl");
        write_archive(
            &[TensorEntry::new("features", vec![30], vec![0.0; 30]).unwrap()],
            &flat,
        )
        .unwrap();
        assert!(matches!(load_features(&flat), Err(SlotError::BadShape { .. })));
    }

    #[test]
    fn scored_batch_feeds_the_evaluator() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let params =
            SlotModelParams::from_parts(random_parts(&mut rng, 3, 4, 6, 2, 2)).unwrap();
        let taxonomy = Taxonomy::new(
            vec![AgentGroup::new("G", "g")],
            vec![ClassDef::new(0, "x", "G"), ClassDef::new(1, "y", "G")],
        )
        .unwrap();
        let clips: Vec<(String, FeatureTensor)> = (0..4)
            .map(|i| (format!("clip{i}"), random_features(&mut rng, 8, 6)))
            .collect();
        let scores = score_clips("slot", &clips, &params, &taxonomy).unwrap();
        assert_eq!(scores.num_clips(), 4);
        assert!(scores.values().iter().all(|&v| 0.0 < v && v < 1.0));

        // determinism across calls, including the parallel path
        let again = score_clips("slot", &clips, &params, &taxonomy).unwrap();
        assert_eq!(scores, again);

        let labels = LabelMatrix::new(
            scores.clip_ids().to_vec(),
            Array2::from_shape_fn((4, 2), |_| rng.random_range(0..=1)),
        )
        .unwrap();
        if labels.values().iter().any(|&y| y == 1) {
            let report = evaluate(&scores, &labels, &taxonomy).unwrap();
            assert!(report.map >= 0.0 && report.map <= 1.0);
        }
    }

    #[test]
    fn predictions_match_taxonomy_width_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let params =
            SlotModelParams::from_parts(random_parts(&mut rng, 3, 4, 6, 2, 2)).unwrap();
        let taxonomy = Taxonomy::new(
            vec![AgentGroup::new("G", "g")],
            vec![ClassDef::new(0, "only", "G")],
        )
        .unwrap();
        let features = random_features(&mut rng, 5, 6);
        assert!(matches!(
            predict_multilabel(&features, &params, &taxonomy),
            Err(SlotError::TaxonomyMismatch { params: 2, taxonomy: 1 })
        ));
    }
}
