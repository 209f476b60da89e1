//! Class space definition: an ordered list of activity classes, each assigned
//! to exactly one agent group (e.g. `C`, `K`, `P`, `C+`, `K+`, `P+`).
//!
//! The groups form a strict partition of the class indices; grouped mAP in
//! [`crate::metrics`] averages per-class scores within each group. Nothing
//! about the class names is hard-coded: the whole space comes from a JSON
//! config file (see [`load_taxonomy`]).

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("failed to read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid taxonomy JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("taxonomy declares no classes")]
    EmptyClasses,
    #[error("invalid group id `{0}`: must be non-empty and contain no commas or whitespace")]
    InvalidGroupId(String),
    #[error("duplicate group id `{0}`")]
    DuplicateGroup(String),
    #[error("invalid class name `{0}`: must be non-empty and contain no commas or whitespace")]
    InvalidClassName(String),
    #[error("duplicate class name `{0}`")]
    DuplicateClass(String),
    #[error("class `{class}` references undeclared group `{group}`")]
    UndeclaredGroup { class: String, group: String },
    #[error("class indices are not contiguous from 0: index {found} at position {position}")]
    NonContiguousIndex { position: usize, found: usize },
    #[error("unknown group id `{0}`")]
    UnknownGroup(String),
}

/// One agent group, identified by a short token such as `"C+"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentGroup {
    pub id: String,
    pub display_name: String,
}

impl AgentGroup {
    pub fn new(id: impl Into<String>, display_name: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            display_name: display_name.into(),
        }
    }
}

/// One activity class: a 0-based index, a unique name and its agent group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassDef {
    pub index: usize,
    pub name: String,
    pub group: String,
}

impl ClassDef {
    pub fn new(index: usize, name: impl Into<String>, group: impl Into<String>) -> Self {
        Self {
            index,
            name: name.into(),
            group: group.into(),
        }
    }
}

/// The validated class space. Immutable after construction; safe to share
/// across threads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    classes: Vec<ClassDef>,
    groups: Vec<AgentGroup>,
}

/// On-disk shape of a taxonomy file. The class index is implicit: it is the
/// position of the entry in the `classes` array.
#[derive(Deserialize)]
struct TaxonomyFile {
    groups: Vec<AgentGroup>,
    classes: Vec<ClassEntry>,
}

#[derive(Deserialize)]
struct ClassEntry {
    name: String,
    group: String,
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && !s.contains(',') && !s.chars().any(char::is_whitespace)
}

impl Taxonomy {
    /// Validates and builds a taxonomy from explicit parts. Class indices must
    /// be contiguous from 0 in list order, names and group ids unique, and
    /// every class must reference a declared group.
    pub fn new(groups: Vec<AgentGroup>, classes: Vec<ClassDef>) -> Result<Self, TaxonomyError> {
        let mut group_ids = HashSet::new();
        for g in &groups {
            if !valid_token(&g.id) {
                return Err(TaxonomyError::InvalidGroupId(g.id.clone()));
            }
            if !group_ids.insert(g.id.as_str()) {
                return Err(TaxonomyError::DuplicateGroup(g.id.clone()));
            }
        }
        if classes.is_empty() {
            return Err(TaxonomyError::EmptyClasses);
        }
        let mut names = HashSet::new();
        for (position, c) in classes.iter().enumerate() {
            if c.index != position {
                return Err(TaxonomyError::NonContiguousIndex {
                    position,
                    found: c.index,
                });
            }
            if !valid_token(&c.name) {
                return Err(TaxonomyError::InvalidClassName(c.name.clone()));
            }
            if !names.insert(c.name.as_str()) {
                return Err(TaxonomyError::DuplicateClass(c.name.clone()));
            }
            if !group_ids.contains(c.group.as_str()) {
                return Err(TaxonomyError::UndeclaredGroup {
                    class: c.name.clone(),
                    group: c.group.clone(),
                });
            }
        }
        Ok(Self { classes, groups })
    }

    /// Parses a taxonomy from JSON text. Class index = position in the
    /// `classes` array.
    pub fn from_json_str(text: &str) -> Result<Self, TaxonomyError> {
        let file: TaxonomyFile = serde_json::from_str(text)?;
        let classes = file
            .classes
            .into_iter()
            .enumerate()
            .map(|(index, e)| ClassDef::new(index, e.name, e.group))
            .collect();
        Self::new(file.groups, classes)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[ClassDef] {
        &self.classes
    }

    pub fn groups(&self) -> &[AgentGroup] {
        &self.groups
    }

    pub fn class_names(&self) -> impl Iterator<Item = &str> {
        self.classes.iter().map(|c| c.name.as_str())
    }

    /// Ascending indices of the classes assigned to `group_id`.
    ///
    /// The concatenation over all declared groups is a permutation of
    /// `0..num_classes()`: each class belongs to exactly one group.
    pub fn group_indices(&self, group_id: &str) -> Result<Vec<usize>, TaxonomyError> {
        if !self.groups.iter().any(|g| g.id == group_id) {
            return Err(TaxonomyError::UnknownGroup(group_id.to_string()));
        }
        Ok(self
            .classes
            .iter()
            .filter(|c| c.group == group_id)
            .map(|c| c.index)
            .collect())
    }
}

/// Loads and validates a taxonomy file. Deterministic: identical bytes yield
/// an identical `Taxonomy`.
pub fn load_taxonomy(path: impl AsRef<Path>) -> Result<Taxonomy, TaxonomyError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| TaxonomyError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    Taxonomy::from_json_str(&text)
}
