//! Long-tail dataset manifests, split statistics and per-class generation quotas.
//!
//! The manifest is a line-delimited text file, one class per line:
//!
//! ```text
//! class_id<TAB>label<TAB>image_ref_1,image_ref_2,...
//! ```
//!
//! A class with no images must state its count explicitly in a fourth
//! column (`3<TAB>okapi<TAB><TAB>0`). Blank lines and lines starting with
//! `#` are ignored. Image references are opaque; they are never opened here.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Classes with more training images than this are many-shot.
pub const MANY_SHOT_ABOVE: usize = 100;
/// Classes with fewer training images than this are few-shot.
pub const FEW_SHOT_BELOW: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRecord {
    pub class_id: usize,
    pub label: String,
    pub image_refs: Vec<String>,
}

impl ClassRecord {
    /// Number of original training images (M_y).
    pub fn original_count(&self) -> usize {
        self.image_refs.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub classes: Vec<ClassRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Many,
    Medium,
    Few,
}

impl Split {
    pub fn of_count(count: usize) -> Split {
        if count > MANY_SHOT_ABOVE {
            Split::Many
        } else if count >= FEW_SHOT_BELOW {
            Split::Medium
        } else {
            Split::Few
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub many_count: usize,
    pub medium_count: usize,
    pub few_count: usize,
    /// max(M_y) / min(M_y); infinite when some class has no images.
    pub imbalance_factor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationQuota {
    pub class_id: usize,
    /// N_y, the number of new descriptions to generate.
    pub target_new: usize,
}

impl DatasetManifest {
    /// Builds a manifest, sorting classes by id and checking invariants.
    pub fn new(name: impl Into<String>, mut classes: Vec<ClassRecord>) -> Result<Self> {
        classes.sort_by_key(|c| c.class_id);
        let manifest = DatasetManifest {
            name: name.into(),
            classes,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class(&self, class_id: usize) -> Option<&ClassRecord> {
        self.classes
            .get(class_id)
            .filter(|c| c.class_id == class_id)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::validation("manifest has no classes"));
        }
        let mut seen = HashSet::new();
        for class in &self.classes {
            if class.label.trim().is_empty() {
                return Err(Error::validation(format!(
                    "class {} has an empty label",
                    class.class_id
                )));
            }
            if !seen.insert(class.class_id) {
                return Err(Error::validation(format!(
                    "duplicate class_id {}",
                    class.class_id
                )));
            }
        }
        for (expected, class) in self.classes.iter().enumerate() {
            if class.class_id != expected {
                return Err(Error::validation(format!(
                    "class ids must be exactly 0..{}; missing {}",
                    self.classes.len(),
                    expected
                )));
            }
        }
        Ok(())
    }

    /// Reads a manifest from the line-delimited text format.
    pub fn ingest<R: BufRead>(name: impl Into<String>, source: R) -> Result<Self> {
        let mut classes = Vec::new();
        let mut seen = HashSet::new();
        for (idx, line) in source.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            let line = line.strip_suffix('\r').unwrap_or(&line);
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let record = parse_manifest_line(line).map_err(|message| Error::Parse {
                line: line_no,
                message,
            })?;
            if !seen.insert(record.class_id) {
                return Err(Error::validation(format!(
                    "duplicate class_id {} at line {}",
                    record.class_id, line_no
                )));
            }
            classes.push(record);
        }
        Self::new(name, classes)
    }

    pub fn ingest_str(name: impl Into<String>, text: &str) -> Result<Self> {
        Self::ingest(name, text.as_bytes())
    }

    /// Serializes to the same format [`DatasetManifest::ingest`] reads.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for class in &self.classes {
            if class.image_refs.is_empty() {
                let _ = writeln!(out, "{}\t{}\t\t0", class.class_id, class.label);
            } else {
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}",
                    class.class_id,
                    class.label,
                    class.image_refs.join(",")
                );
            }
        }
        out
    }

    pub fn split_stats(&self) -> SplitStats {
        let mut stats = SplitStats {
            many_count: 0,
            medium_count: 0,
            few_count: 0,
            imbalance_factor: 1.0,
        };
        for class in &self.classes {
            match Split::of_count(class.original_count()) {
                Split::Many => stats.many_count += 1,
                Split::Medium => stats.medium_count += 1,
                Split::Few => stats.few_count += 1,
            }
        }
        let max = self.classes.iter().map(ClassRecord::original_count).max();
        let min = self.classes.iter().map(ClassRecord::original_count).min();
        if let (Some(max), Some(min)) = (max, min) {
            stats.imbalance_factor = if min == 0 {
                if max == 0 {
                    1.0
                } else {
                    f64::INFINITY
                }
            } else {
                max as f64 / min as f64
            };
        }
        stats
    }

    /// N_y = max(0, cap - M_y) for every class; head classes get zero.
    pub fn generation_quota(&self, cap: usize) -> Result<Vec<GenerationQuota>> {
        if cap == 0 {
            return Err(Error::validation("per-class cap must be at least 1"));
        }
        Ok(self
            .classes
            .iter()
            .map(|c| GenerationQuota {
                class_id: c.class_id,
                target_new: cap.saturating_sub(c.original_count()),
            })
            .collect())
    }
}

fn parse_manifest_line(line: &str) -> std::result::Result<ClassRecord, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if !(3..=4).contains(&fields.len()) {
        return Err(format!(
            "expected 3 or 4 tab-separated fields, found {}",
            fields.len()
        ));
    }
    let class_id: usize = fields[0]
        .trim()
        .parse()
        .map_err(|_| format!("invalid class_id {:?}", fields[0]))?;
    let label = fields[1].trim().to_string();
    if label.is_empty() {
        return Err(format!("class {class_id} has an empty label"));
    }
    let image_refs: Vec<String> = if fields[2].trim().is_empty() {
        Vec::new()
    } else {
        fields[2].split(',').map(|s| s.trim().to_string()).collect()
    };
    if image_refs.iter().any(String::is_empty) {
        return Err(format!("class {class_id} has an empty image reference"));
    }
    match fields.get(3) {
        Some(count) => {
            let count: usize = count
                .trim()
                .parse()
                .map_err(|_| format!("invalid image count {count:?}"))?;
            if count != image_refs.len() {
                return Err(format!(
                    "class {class_id} declares {count} images but lists {}",
                    image_refs.len()
                ));
            }
        }
        None if image_refs.is_empty() => {
            return Err(format!(
                "class {class_id} has no images; an empty list needs an explicit count of 0"
            ));
        }
        None => {}
    }
    Ok(ClassRecord {
        class_id,
        label,
        image_refs,
    })
}

/// Builds a manifest with synthetic image references from per-class counts.
pub fn synthetic_manifest(name: &str, counts: &[usize]) -> DatasetManifest {
    let classes = counts
        .iter()
        .enumerate()
        .map(|(class_id, &count)| ClassRecord {
            class_id,
            label: format!("class {class_id:04}"),
            image_refs: (0..count)
                .map(|i| format!("orig/{class_id:04}/{i:05}.png"))
                .collect(),
        })
        .collect();
    DatasetManifest::new(name, classes).expect("synthetic manifest is valid")
}
