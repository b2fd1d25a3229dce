//! Dataset manifests, union vocabularies, assembly of partially labeled
//! sources, splits and the diversity / amount training arms.
//!
//! Manifest files are JSON lines. The first line is a header
//! `{"name": .., "class_names": [..]}`; every following line is a record
//! `{"id": .., "image": .., "labels": {class: 0 | 1}, "split": ..}` where
//! `split` is optional. An absent label key means unobserved. Exported
//! manifests spell unobserved entries as `-1`, which readers treat exactly
//! like an absent key.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ImageSample, LabelRecord, LabeledDataset, LabeledSample, MISSING};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestHeader {
    name: String,
    class_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    /// File path, or any string the image loader understands.
    pub image: String,
    pub labels: BTreeMap<String, i8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub name: String,
    pub class_names: Vec<String>,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    /// Checks unique class names and ids, and that every label key is a
    /// declared class with value 0, 1 or -1.
    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for c in &self.class_names {
            if c.trim().is_empty() {
                return Err(Error::Input(format!("manifest `{}` has an empty class name", self.name)));
            }
            if !names.insert(c.as_str()) {
                return Err(Error::Input(format!("manifest `{}` repeats class `{c}`", self.name)));
            }
        }
        let mut ids = HashSet::new();
        for r in &self.records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Input(format!("manifest `{}` repeats id `{}`", self.name, r.id)));
            }
            for (k, &v) in &r.labels {
                if !names.contains(k.as_str()) {
                    return Err(Error::Vocabulary(format!("`{k}` in record `{}` of `{}`", r.id, self.name)));
                }
                if !matches!(v, 0 | 1 | MISSING) {
                    return Err(Error::Input(format!("label {v} for `{k}` in record `{}`", r.id)));
                }
            }
        }
        Ok(())
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self> {
        let mut lines = input.lines().enumerate().filter_map(|(i, l)| match l {
            Ok(l) if l.trim().is_empty() => None,
            other => Some((i + 1, other)),
        });
        let parse_err = |line: usize, e: serde_json::Error| Error::Parse(format!("manifest line {line}: {e}"));
        let (n, header) = lines.next().ok_or_else(|| Error::Parse("empty manifest".into()))?;
        let header = header.map_err(|e| Error::io("manifest", e))?;
        let header: ManifestHeader = serde_json::from_str(&header).map_err(|e| parse_err(n, e))?;
        let mut records = Vec::new();
        for (n, line) in lines {
            let line = line.map_err(|e| Error::io("manifest", e))?;
            records.push(serde_json::from_str(&line).map_err(|e| parse_err(n, e))?);
        }
        let manifest = Self {
            name: header.name,
            class_names: header.class_names,
            records,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        let err = |e: std::io::Error| Error::io("manifest", e);
        let header = ManifestHeader {
            name: self.name.clone(),
            class_names: self.class_names.clone(),
        };
        writeln!(out, "{}", to_line(&header)?).map_err(err)?;
        for r in &self.records {
            writeln!(out, "{}", to_line(r)?).map_err(err)?;
        }
        Ok(())
    }
}

fn to_line<S: Serialize>(value: &S) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::Parse(e.to_string()))
}

/// Lowercases and collapses runs of whitespace to one space.
pub fn normalize_name(name: &str) -> String {
    name.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Sorted union of normalized class names.
pub fn build_union_vocabulary(manifests: &[DatasetManifest]) -> Result<Vec<String>> {
    if manifests.is_empty() {
        return Err(Error::Input("no manifests to build a vocabulary from".into()));
    }
    let names: BTreeSet<String> = manifests
        .iter()
        .flat_map(|m| m.class_names.iter().map(|c| normalize_name(c)))
        .collect();
    Ok(names.into_iter().collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AssembledRecord {
    /// Name of the manifest the record came from.
    pub source: String,
    pub id: String,
    pub image: String,
    pub labels: LabelRecord,
}

/// Records of several manifests over one vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AssembledDataset {
    pub vocabulary: Vec<String>,
    pub records: Vec<AssembledRecord>,
}

/// Maps every record onto `vocabulary`, filling classes its manifest does
/// not annotate with `-1`. Records keep manifest order, manifests keep
/// input order.
pub fn assemble(manifests: &[DatasetManifest], vocabulary: &[String]) -> Result<AssembledDataset> {
    let index: HashMap<&str, usize> = vocabulary.iter().enumerate().map(|(i, v)| (v.as_str(), i)).collect();
    let mut records = Vec::new();
    for m in manifests {
        m.validate()?;
        let mut position = HashMap::new();
        for c in &m.class_names {
            let norm = normalize_name(c);
            let i = *index
                .get(norm.as_str())
                .ok_or_else(|| Error::Vocabulary(format!("`{c}` of `{}`", m.name)))?;
            position.insert(c.as_str(), i);
        }
        for r in &m.records {
            let mut labels = LabelRecord::missing(vocabulary.len());
            for (k, &v) in &r.labels {
                if v != MISSING {
                    labels.set(position[k.as_str()], v)?;
                }
            }
            records.push(AssembledRecord {
                source: m.name.clone(),
                id: r.id.clone(),
                image: r.image.clone(),
                labels,
            });
        }
    }
    Ok(AssembledDataset {
        vocabulary: vocabulary.to_vec(),
        records,
    })
}

/// Index partition `(train, val, test)`. Validation and test sizes are
/// `floor(n * ratio)`, train takes the remainder.
pub fn split_indices(n: usize, ratios: (f64, f64, f64), seed: u64) -> Result<[Vec<usize>; 3]> {
    let (a, b, c) = ratios;
    let ok = [a, b, c].iter().all(|r| r.is_finite() && *r >= 0.0) && ((a + b + c) - 1.0).abs() <= 1e-9;
    if !ok {
        return Err(Error::Input(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    // the epsilon keeps 10 * 0.7-style products from flooring one short
    let size = |r: f64| ((n as f64 * r + 1e-9).floor() as usize).min(n);
    let val = size(b);
    let test = size(c).min(n - val);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train_len = n - val - test;
    let test_part = idx.split_off(train_len + val);
    let val_part = idx.split_off(train_len);
    Ok([idx, val_part, test_part])
}

impl AssembledDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            vocabulary: self.vocabulary.clone(),
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    pub fn split(&self, ratios: (f64, f64, f64), seed: u64) -> Result<[Self; 3]> {
        let [a, b, c] = split_indices(self.len(), ratios, seed)?;
        Ok([self.subset(&a), self.subset(&b), self.subset(&c)])
    }

    /// Manifest over the full vocabulary with explicit `-1` entries.
    pub fn to_manifest(&self, name: &str) -> DatasetManifest {
        DatasetManifest {
            name: name.to_string(),
            class_names: self.vocabulary.clone(),
            records: self
                .records
                .iter()
                .map(|r| ManifestRecord {
                    // ids stay unique across sources
                    id: format!("{}/{}", r.source, r.id),
                    image: r.image.clone(),
                    labels: self.vocabulary.iter().cloned().zip(r.labels.values().iter().copied()).collect(),
                    split: None,
                })
                .collect(),
        }
    }

    /// Resolves image references with `load`.
    pub fn load_images(&self, mut load: impl FnMut(&AssembledRecord) -> Result<ImageSample>) -> Result<LabeledDataset> {
        let samples = self
            .records
            .iter()
            .map(|r| {
                Ok(LabeledSample {
                    image: load(r)?,
                    labels: r.labels.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LabeledDataset {
            class_names: self.vocabulary.clone(),
            samples,
        })
    }
}

/// Training sets isolating the effect of extra label diversity from that
/// of extra data for the target classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiversityArms {
    pub separation: AssembledDataset,
    pub plus_diversity: AssembledDataset,
    pub plus_diversity_amount: AssembledDataset,
}

/// All three arms share the union vocabulary of target and pool.
/// `plus_diversity` adds only pool records without an observed label for
/// any target class, so the amount of target-class supervision is the
/// same as in `separation`.
pub fn diversity_amount_arms(target: &DatasetManifest, pool: &[DatasetManifest]) -> Result<DiversityArms> {
    if pool.iter().any(|m| m.name == target.name) {
        return Err(Error::Input(format!("target `{}` is also in the pool", target.name)));
    }
    let all: Vec<DatasetManifest> = std::iter::once(target.clone()).chain(pool.iter().cloned()).collect();
    let vocabulary = build_union_vocabulary(&all)?;
    let separation = assemble(std::slice::from_ref(target), &vocabulary)?;
    let pooled = assemble(pool, &vocabulary)?;
    let target_idx: Vec<usize> = target
        .class_names
        .iter()
        .map(|c| vocabulary.binary_search(&normalize_name(c)).expect("target class in union"))
        .collect();
    let mut plus_diversity = separation.clone();
    plus_diversity.records.extend(
        pooled
            .records
            .iter()
            .filter(|r| target_idx.iter().all(|&i| !r.labels.is_observed(i)))
            .cloned(),
    );
    let mut plus_diversity_amount = separation.clone();
    plus_diversity_amount.records.extend(pooled.records);
    Ok(DiversityArms {
        separation,
        plus_diversity,
        plus_diversity_amount,
    })
}
