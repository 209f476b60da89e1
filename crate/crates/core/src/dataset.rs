//! CSV-backed matrix I/O: ground-truth label matrices, per-model score
//! matrices, clip alignment, and JSON evaluation reports.
//!
//! Matrices travel as plain CSV so predictions can be exchanged with any
//! training toolchain: header `clip_id,<class names in taxonomy order>`, one
//! row per clip, UTF-8, `\n` line endings. Scores are written with shortest
//! round-trip float formatting, so a written matrix re-loads bit-exactly.
//! The label file is the authority for clip order; score files may arrive in
//! any order and are reordered by [`align`].

use std::collections::{HashMap, HashSet};
use std::io;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use thiserror::Error;

use crate::metrics::EvalReport;
use crate::util::atomic_write;
use crate::taxonomy::Taxonomy;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Read { path: PathBuf, source: io::Error },
    #[error("failed to write {path}: {source}")]
    Write { path: PathBuf, source: io::Error },
    #[error("malformed CSV in {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path} has no header row")]
    MissingHeader { path: PathBuf },
    #[error("{path}: first header column must be `clip_id`, found `{found}`")]
    LeadingHeader { path: PathBuf, found: String },
    #[error("{path} declares no class columns")]
    NoClassColumns { path: PathBuf },
    #[error("{path} has {found} class columns but the taxonomy declares {expected}")]
    ClassColumnCount {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error(
        "{path}: class column {column} is `{found}` but the taxonomy declares \
         `{expected}` at that position"
    )]
    ClassColumnName {
        path: PathBuf,
        column: usize,
        expected: String,
        found: String,
    },
    #[error("{path} line {line}: expected {expected} cells, found {found}")]
    RaggedRow {
        path: PathBuf,
        line: u64,
        expected: usize,
        found: usize,
    },
    #[error("{path} line {line}: label for class `{class}` is `{value}`, expected 0 or 1")]
    NonBinaryCell {
        path: PathBuf,
        line: u64,
        class: String,
        value: String,
    },
    #[error("{path} line {line}: score for class `{class}` is `{value}`, not a finite number")]
    NonFiniteCell {
        path: PathBuf,
        line: u64,
        class: String,
        value: String,
    },
    #[error("matrix has {rows} rows but {clips} clip ids")]
    RowCount { rows: usize, clips: usize },
    #[error("matrix must have at least one class column")]
    NoClasses,
    #[error("empty clip_id at row {row}")]
    EmptyClipId { row: usize },
    #[error("duplicate clip_id `{clip}`")]
    DuplicateClipId { clip: String },
    #[error("label value at row {row}, column {col} is not 0 or 1")]
    NonBinaryValue { row: usize, col: usize },
    #[error("score value at row {row}, column {col} is not finite")]
    NonFiniteValue { row: usize, col: usize },
    #[error("model `{model}` is missing clip `{clip}`")]
    MissingClip { model: String, clip: String },
    #[error("model `{model}` has clip `{clip}` that is absent from the labels")]
    ExtraClip { model: String, clip: String },
    #[error("matrix has {expected} class columns but {found} class names were supplied")]
    NameCount { expected: usize, found: usize },
    #[error("bad report JSON for {path}: {source}")]
    ReportJson {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("clip `{clip}`: {field} must be at least 1")]
    InvalidClipMeta { clip: String, field: &'static str },
}

/// Identity and geometry of one source clip, as consumed by the sampling
/// planners. Kept separate from the matrices, which only know clip ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipMeta {
    pub clip_id: String,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
}

impl ClipMeta {
    pub fn new(
        clip_id: impl Into<String>,
        num_frames: usize,
        height: usize,
        width: usize,
    ) -> Result<Self, DataError> {
        let clip_id = clip_id.into();
        let field = if clip_id.is_empty() {
            Some("clip_id")
        } else if num_frames == 0 {
            Some("num_frames")
        } else if height == 0 {
            Some("height")
        } else if width == 0 {
            Some("width")
        } else {
            None
        };
        match field {
            Some(field) => Err(DataError::InvalidClipMeta { clip: clip_id, field }),
            None => Ok(Self {
                clip_id,
                num_frames,
                height,
                width,
            }),
        }
    }
}

/// Ground-truth multi-label matrix: one row per clip, one {0,1} column per
/// class. Validated on construction and immutable afterwards.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    clip_ids: Vec<String>,
    values: Array2<u8>,
}

impl LabelMatrix {
    pub fn new(clip_ids: Vec<String>, values: Array2<u8>) -> Result<Self, DataError> {
        check_clip_ids(&clip_ids, values.nrows())?;
        if values.ncols() == 0 {
            return Err(DataError::NoClasses);
        }
        for ((row, col), &v) in values.indexed_iter() {
            if v > 1 {
                return Err(DataError::NonBinaryValue { row, col });
            }
        }
        Ok(Self { clip_ids, values })
    }

    pub fn num_clips(&self) -> usize {
        self.clip_ids.len()
    }

    pub fn num_classes(&self) -> usize {
        self.values.ncols()
    }

    pub fn clip_ids(&self) -> &[String] {
        &self.clip_ids
    }

    pub fn values(&self) -> &Array2<u8> {
        &self.values
    }
}

/// One model's clip × class prediction scores. Entries are any finite reals;
/// the metrics are rank-based, so probabilities and raw logits both work.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    model_id: String,
    clip_ids: Vec<String>,
    values: Array2<f64>,
}

impl ScoreMatrix {
    pub fn new(
        model_id: impl Into<String>,
        clip_ids: Vec<String>,
        values: Array2<f64>,
    ) -> Result<Self, DataError> {
        check_clip_ids(&clip_ids, values.nrows())?;
        if values.ncols() == 0 {
            return Err(DataError::NoClasses);
        }
        for ((row, col), &v) in values.indexed_iter() {
            if !v.is_finite() {
                return Err(DataError::NonFiniteValue { row, col });
            }
        }
        Ok(Self {
            model_id: model_id.into(),
            clip_ids,
            values,
        })
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn num_clips(&self) -> usize {
        self.clip_ids.len()
    }

    pub fn num_classes(&self) -> usize {
        self.values.ncols()
    }

    pub fn clip_ids(&self) -> &[String] {
        &self.clip_ids
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }
}

fn check_clip_ids(clip_ids: &[String], rows: usize) -> Result<(), DataError> {
    if rows != clip_ids.len() {
        return Err(DataError::RowCount {
            rows,
            clips: clip_ids.len(),
        });
    }
    for (row, clip) in clip_ids.iter().enumerate() {
        if clip.is_empty() {
            return Err(DataError::EmptyClipId { row });
        }
    }
    let mut seen = HashSet::new();
    for clip in clip_ids {
        if !seen.insert(clip.as_str()) {
            return Err(DataError::DuplicateClipId { clip: clip.clone() });
        }
    }
    Ok(())
}

enum CellKind {
    Binary,
    Finite,
}

struct ParsedCsv {
    class_names: Vec<String>,
    clip_ids: Vec<String>,
    flat: Vec<f64>,
}

fn parse_matrix_csv(
    path: &Path,
    kind: CellKind,
    taxonomy: Option<&Taxonomy>,
) -> Result<ParsedCsv, DataError> {
    let bytes = std::fs::read(path).map_err(|source| DataError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_reader(bytes.as_slice());
    let headers = reader
        .headers()
        .map_err(|source| DataError::Csv {
            path: path.to_path_buf(),
            source,
        })?
        .clone();
    if headers.is_empty() {
        return Err(DataError::MissingHeader {
            path: path.to_path_buf(),
        });
    }
    if &headers[0] != "clip_id" {
        return Err(DataError::LeadingHeader {
            path: path.to_path_buf(),
            found: headers[0].to_string(),
        });
    }
    let class_names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    if class_names.is_empty() {
        return Err(DataError::NoClassColumns {
            path: path.to_path_buf(),
        });
    }
    if let Some(taxonomy) = taxonomy {
        if class_names.len() != taxonomy.num_classes() {
            return Err(DataError::ClassColumnCount {
                path: path.to_path_buf(),
                expected: taxonomy.num_classes(),
                found: class_names.len(),
            });
        }
        for (column, (found, expected)) in
            class_names.iter().zip(taxonomy.class_names()).enumerate()
        {
            if found != expected {
                return Err(DataError::ClassColumnName {
                    path: path.to_path_buf(),
                    column: column + 1,
                    expected: expected.to_string(),
                    found: found.clone(),
                });
            }
        }
    }

    let mut clip_ids = Vec::new();
    let mut flat = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|source| DataError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != class_names.len() + 1 {
            return Err(DataError::RaggedRow {
                path: path.to_path_buf(),
                line,
                expected: class_names.len() + 1,
                found: record.len(),
            });
        }
        clip_ids.push(record[0].to_string());
        for (i, cell) in record.iter().skip(1).enumerate() {
            let parsed = cell.parse::<f64>().ok();
            let value = match kind {
                CellKind::Binary => match parsed {
                    Some(v) if v == 0.0 || v == 1.0 => v,
                    _ => {
                        return Err(DataError::NonBinaryCell {
                            path: path.to_path_buf(),
                            line,
                            class: class_names[i].clone(),
                            value: cell.to_string(),
                        })
                    }
                },
                CellKind::Finite => match parsed {
                    Some(v) if v.is_finite() => v,
                    _ => {
                        return Err(DataError::NonFiniteCell {
                            path: path.to_path_buf(),
                            line,
                            class: class_names[i].clone(),
                            value: cell.to_string(),
                        })
                    }
                },
            };
            flat.push(value);
        }
    }
    Ok(ParsedCsv {
        class_names,
        clip_ids,
        flat,
    })
}

/// Loads a ground-truth label matrix, checking the header against the
/// taxonomy (names and order) and every cell for binary-ness. Clip order is
/// the file order.
pub fn load_labels(path: impl AsRef<Path>, taxonomy: &Taxonomy) -> Result<LabelMatrix, DataError> {
    let path = path.as_ref();
    let parsed = parse_matrix_csv(path, CellKind::Binary, Some(taxonomy))?;
    let shape = (parsed.clip_ids.len(), parsed.class_names.len());
    let flat: Vec<u8> = parsed.flat.iter().map(|&v| v as u8).collect();
    let values = Array2::from_shape_vec(shape, flat).expect("parser yields rectangular data");
    LabelMatrix::new(parsed.clip_ids, values)
}

/// Loads one model's score matrix, checking the header against the taxonomy
/// and every cell for finiteness.
pub fn load_scores(
    path: impl AsRef<Path>,
    taxonomy: &Taxonomy,
    model_id: &str,
) -> Result<ScoreMatrix, DataError> {
    let path = path.as_ref();
    let parsed = parse_matrix_csv(path, CellKind::Finite, Some(taxonomy))?;
    let shape = (parsed.clip_ids.len(), parsed.class_names.len());
    let values = Array2::from_shape_vec(shape, parsed.flat).expect("parser yields rectangular data");
    ScoreMatrix::new(model_id, parsed.clip_ids, values)
}

/// Taxonomy-free variant of [`load_scores`] that also returns the header's
/// class names, for callers that must only check consistency *between* files
/// (e.g. fusing score files without a taxonomy at hand).
pub fn load_scores_with_names(
    path: impl AsRef<Path>,
    model_id: &str,
) -> Result<(ScoreMatrix, Vec<String>), DataError> {
    let path = path.as_ref();
    let parsed = parse_matrix_csv(path, CellKind::Finite, None)?;
    let shape = (parsed.clip_ids.len(), parsed.class_names.len());
    let values = Array2::from_shape_vec(shape, parsed.flat).expect("parser yields rectangular data");
    let matrix = ScoreMatrix::new(model_id, parsed.clip_ids, values)?;
    Ok((matrix, parsed.class_names))
}

/// Reorders every score matrix to the labels' clip order.
///
/// The label matrix is the single authority for evaluation order, so it
/// passes through unchanged. Errors name the model and the first offending
/// clip. Idempotent: aligning aligned inputs is the identity.
pub fn align(
    scores: Vec<ScoreMatrix>,
    labels: LabelMatrix,
) -> Result<(Vec<ScoreMatrix>, LabelMatrix), DataError> {
    let label_rows: HashMap<&str, usize> = labels
        .clip_ids
        .iter()
        .enumerate()
        .map(|(row, clip)| (clip.as_str(), row))
        .collect();
    let mut aligned = Vec::with_capacity(scores.len());
    for matrix in scores {
        for clip in &matrix.clip_ids {
            if !label_rows.contains_key(clip.as_str()) {
                return Err(DataError::ExtraClip {
                    model: matrix.model_id.clone(),
                    clip: clip.clone(),
                });
            }
        }
        let score_rows: HashMap<&str, usize> = matrix
            .clip_ids
            .iter()
            .enumerate()
            .map(|(row, clip)| (clip.as_str(), row))
            .collect();
        let mut perm = Vec::with_capacity(labels.clip_ids.len());
        for clip in &labels.clip_ids {
            match score_rows.get(clip.as_str()) {
                Some(&row) => perm.push(row),
                None => {
                    return Err(DataError::MissingClip {
                        model: matrix.model_id.clone(),
                        clip: clip.clone(),
                    })
                }
            }
        }
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            aligned.push(matrix);
        } else {
            aligned.push(ScoreMatrix {
                model_id: matrix.model_id,
                clip_ids: labels.clip_ids.clone(),
                values: matrix.values.select(Axis(0), &perm),
            });
        }
    }
    Ok((aligned, labels))
}

fn write_matrix_csv(
    path: &Path,
    class_names: &[impl AsRef<str>],
    clip_ids: &[String],
    num_classes: usize,
    mut cell: impl FnMut(usize, usize) -> String,
) -> Result<(), DataError> {
    if class_names.len() != num_classes {
        return Err(DataError::NameCount {
            expected: num_classes,
            found: class_names.len(),
        });
    }
    let mut writer = csv::Writer::from_writer(Vec::new());
    let csv_err = |source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let header = std::iter::once("clip_id").chain(class_names.iter().map(AsRef::as_ref));
    writer.write_record(header).map_err(csv_err)?;
    for (row, clip) in clip_ids.iter().enumerate() {
        let record = std::iter::once(clip.clone()).chain((0..num_classes).map(|col| cell(row, col)));
        writer.write_record(record).map_err(csv_err)?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| csv_err(e.into_error().into()))?;
    atomic_write(path, &bytes).map_err(|source| DataError::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a label matrix as CSV (atomically: temp file + rename). Class names
/// supply the header and must match the matrix width.
pub fn write_labels(
    labels: &LabelMatrix,
    class_names: &[impl AsRef<str>],
    path: impl AsRef<Path>,
) -> Result<(), DataError> {
    write_matrix_csv(
        path.as_ref(),
        class_names,
        &labels.clip_ids,
        labels.num_classes(),
        |row, col| labels.values[(row, col)].to_string(),
    )
}

/// Writes a score matrix as CSV (atomically). Values use shortest round-trip
/// formatting, so re-loading reproduces them bit-exactly.
pub fn write_scores(
    scores: &ScoreMatrix,
    class_names: &[impl AsRef<str>],
    path: impl AsRef<Path>,
) -> Result<(), DataError> {
    write_matrix_csv(
        path.as_ref(),
        class_names,
        &scores.clip_ids,
        scores.num_classes(),
        |row, col| scores.values[(row, col)].to_string(),
    )
}

/// Writes an evaluation report as pretty-printed JSON (atomically).
/// Re-loading yields identical numbers: serialization is shortest
/// round-trip decimal.
pub fn write_report(report: &EvalReport, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut bytes = serde_json::to_vec_pretty(report).map_err(|source| DataError::ReportJson {
        path: path.to_path_buf(),
        source,
    })?;
    bytes.push(b'\n');
    atomic_write(path, &bytes).map_err(|source| DataError::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads back a report written by [`write_report`].
pub fn read_report(path: impl AsRef<Path>) -> Result<EvalReport, DataError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| DataError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_slice(&bytes).map_err(|source| DataError::ReportJson {
        path: path.to_path_buf(),
        source,
    })
}
