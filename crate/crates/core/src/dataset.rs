//! Dataset plumbing: species taxonomy, per-clip label sets, and the CSV
//! manifest formats shared by the training and evaluation tools.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioBuffer;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("species {code} not in taxonomy")]
    UnknownSpecies { code: String },
    #[error("species {code} listed twice with different lineages")]
    InconsistentLineage { code: String },
    #[error("empty taxonomy")]
    EmptyTaxonomy,
    #[error("label {code} appears in both foreground and background")]
    OverlappingLabels { code: String },
    #[error("manifest row {row}: {detail}")]
    BadManifestRow { row: usize, detail: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Audio(#[from] crate::audio::AudioError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Species to (genus, family, order) mapping with dense index tables for
/// every level. Species ids are assigned in sorted code order, so a taxonomy
/// built from the same rows is always identical.
#[derive(Clone, Debug, PartialEq)]
pub struct Taxonomy {
    species: Vec<String>,
    genera: Vec<String>,
    families: Vec<String>,
    orders: Vec<String>,
    genus_of: Vec<usize>,
    family_of: Vec<usize>,
    order_of: Vec<usize>,
    by_code: BTreeMap<String, usize>,
}

impl Taxonomy {
    /// Rows of (species_code, genus, family, order).
    pub fn from_rows(rows: &[(String, String, String, String)]) -> Result<Self, DataError> {
        if rows.is_empty() {
            return Err(DataError::EmptyTaxonomy);
        }
        let mut lineage: BTreeMap<String, (String, String, String)> = BTreeMap::new();
        for (code, genus, family, order) in rows {
            let entry = (genus.clone(), family.clone(), order.clone());
            match lineage.get(code) {
                Some(prev) if *prev != entry => {
                    return Err(DataError::InconsistentLineage { code: code.clone() })
                }
                _ => {
                    lineage.insert(code.clone(), entry);
                }
            }
        }
        let mut genera: Vec<String> = lineage.values().map(|l| l.0.clone()).collect();
        let mut families: Vec<String> = lineage.values().map(|l| l.1.clone()).collect();
        let mut orders: Vec<String> = lineage.values().map(|l| l.2.clone()).collect();
        for list in [&mut genera, &mut families, &mut orders] {
            list.sort();
            list.dedup();
        }
        let index_of = |list: &[String], name: &str| list.iter().position(|x| x == name).unwrap();
        let species: Vec<String> = lineage.keys().cloned().collect();
        let mut genus_of = Vec::with_capacity(species.len());
        let mut family_of = Vec::with_capacity(species.len());
        let mut order_of = Vec::with_capacity(species.len());
        for code in &species {
            let (g, f, o) = &lineage[code];
            genus_of.push(index_of(&genera, g));
            family_of.push(index_of(&families, f));
            order_of.push(index_of(&orders, o));
        }
        let by_code = species
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i))
            .collect();
        Ok(Self {
            species,
            genera,
            families,
            orders,
            genus_of,
            family_of,
            order_of,
            by_code,
        })
    }

    pub fn load_csv(path: &Path) -> Result<Self, DataError> {
        let mut reader = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record?;
            if record.len() != 4 {
                return Err(DataError::BadManifestRow {
                    row: rows.len() + 1,
                    detail: format!("expected 4 columns, got {}", record.len()),
                });
            }
            rows.push((
                record[0].to_string(),
                record[1].to_string(),
                record[2].to_string(),
                record[3].to_string(),
            ));
        }
        Self::from_rows(&rows)
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), DataError> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(["species_code", "genus", "family", "order"])?;
        for (i, code) in self.species.iter().enumerate() {
            writer.write_record([
                code.as_str(),
                &self.genera[self.genus_of[i]],
                &self.families[self.family_of[i]],
                &self.orders[self.order_of[i]],
            ])?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn n_species(&self) -> usize {
        self.species.len()
    }

    pub fn n_genera(&self) -> usize {
        self.genera.len()
    }

    pub fn n_families(&self) -> usize {
        self.families.len()
    }

    pub fn n_orders(&self) -> usize {
        self.orders.len()
    }

    pub fn species_codes(&self) -> &[String] {
        &self.species
    }

    pub fn species_index(&self, code: &str) -> Option<usize> {
        self.by_code.get(code).copied()
    }

    pub fn species_code(&self, idx: usize) -> &str {
        &self.species[idx]
    }

    /// (genus, family, order) indices of a species.
    pub fn rollup(&self, species: usize) -> (usize, usize, usize) {
        (
            self.genus_of[species],
            self.family_of[species],
            self.order_of[species],
        )
    }
}

/// Foreground (labeled) and background (present but unlabeled) species of a
/// clip. The two sets never overlap.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelSet {
    foreground: BTreeSet<usize>,
    background: BTreeSet<usize>,
}

impl LabelSet {
    pub fn new(
        foreground: BTreeSet<usize>,
        background: BTreeSet<usize>,
        taxonomy: &Taxonomy,
    ) -> Result<Self, DataError> {
        if let Some(&idx) = foreground.intersection(&background).next() {
            return Err(DataError::OverlappingLabels {
                code: taxonomy.species_code(idx).to_string(),
            });
        }
        Ok(Self {
            foreground,
            background,
        })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_foreground(species: &[usize]) -> Self {
        Self {
            foreground: species.iter().copied().collect(),
            background: BTreeSet::new(),
        }
    }

    pub fn foreground(&self) -> &BTreeSet<usize> {
        &self.foreground
    }

    pub fn background(&self) -> &BTreeSet<usize> {
        &self.background
    }

    pub fn is_empty(&self) -> bool {
        self.foreground.is_empty() && self.background.is_empty()
    }

    pub fn clear(&mut self) {
        self.foreground.clear();
        self.background.clear();
    }

    /// Union of two label sets; a species foreground in either input stays
    /// foreground (and is dropped from background).
    pub fn union(&self, other: &LabelSet) -> LabelSet {
        let foreground: BTreeSet<usize> =
            self.foreground.union(&other.foreground).copied().collect();
        let background: BTreeSet<usize> = self
            .background
            .union(&other.background)
            .copied()
            .filter(|s| !foreground.contains(s))
            .collect();
        LabelSet {
            foreground,
            background,
        }
    }

    /// Taxonomic rollup of the foreground set: positive (genus, family,
    /// order) index sets.
    pub fn rollup(&self, taxonomy: &Taxonomy) -> (BTreeSet<usize>, BTreeSet<usize>, BTreeSet<usize>) {
        Self::rollup_of(&self.foreground, taxonomy)
    }

    /// Rollup of foreground and background together; used for taxonomic-head
    /// supervision, where unlabeled background species still contribute
    /// their lineage.
    pub fn rollup_with_background(
        &self,
        taxonomy: &Taxonomy,
    ) -> (BTreeSet<usize>, BTreeSet<usize>, BTreeSet<usize>) {
        let all: BTreeSet<usize> = self
            .foreground
            .union(&self.background)
            .copied()
            .collect();
        Self::rollup_of(&all, taxonomy)
    }

    fn rollup_of(
        species: &BTreeSet<usize>,
        taxonomy: &Taxonomy,
    ) -> (BTreeSet<usize>, BTreeSet<usize>, BTreeSet<usize>) {
        let mut genera = BTreeSet::new();
        let mut families = BTreeSet::new();
        let mut orders = BTreeSet::new();
        for &s in species {
            let (g, f, o) = taxonomy.rollup(s);
            genera.insert(g);
            families.insert(f);
            orders.insert(o);
        }
        (genera, families, orders)
    }
}

/// One row of a clip manifest: an audio file plus its labels, stored as
/// species codes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub path: PathBuf,
    pub foreground: Vec<String>,
    pub background: Vec<String>,
}

impl ClipRecord {
    pub fn label_set(&self, taxonomy: &Taxonomy) -> Result<LabelSet, DataError> {
        let resolve = |codes: &[String]| -> Result<BTreeSet<usize>, DataError> {
            codes
                .iter()
                .map(|code| {
                    taxonomy
                        .species_index(code)
                        .ok_or_else(|| DataError::UnknownSpecies { code: code.clone() })
                })
                .collect()
        };
        LabelSet::new(
            resolve(&self.foreground)?,
            resolve(&self.background)?,
            taxonomy,
        )
    }
}

fn join_codes(codes: &[String]) -> String {
    codes.join(" ")
}

fn split_codes(field: &str) -> Vec<String> {
    field
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Manifest columns: path, foreground, background; label lists are
/// space-separated species codes.
pub fn save_manifest(path: &Path, records: &[ClipRecord]) -> Result<(), DataError> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["path", "foreground", "background"])?;
    for r in records {
        writer.write_record([
            r.path.to_string_lossy().as_ref(),
            &join_codes(&r.foreground),
            &join_codes(&r.background),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Vec<ClipRecord>, DataError> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut records = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != 3 {
            return Err(DataError::BadManifestRow {
                row: row + 1,
                detail: format!("expected 3 columns, got {}", record.len()),
            });
        }
        records.push(ClipRecord {
            path: PathBuf::from(&record[0]),
            foreground: split_codes(&record[1]),
            background: split_codes(&record[2]),
        });
    }
    Ok(records)
}

/// Single-column manifest of audio paths (the noise pool).
pub fn save_path_manifest(path: &Path, paths: &[PathBuf]) -> Result<(), DataError> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["path"])?;
    for p in paths {
        writer.write_record([p.to_string_lossy().as_ref()])?;
    }
    writer.flush()?;
    Ok(())
}

pub fn load_path_manifest(path: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut paths = Vec::new();
    for record in reader.records() {
        let record = record?;
        if record.is_empty() {
            continue;
        }
        paths.push(PathBuf::from(&record[0]));
    }
    Ok(paths)
}

/// An audio clip paired with its labels, the unit all training paths
/// consume.
#[derive(Clone, Debug)]
pub struct LabeledClip {
    pub audio: AudioBuffer,
    pub labels: LabelSet,
}

/// Read every manifest clip into memory; record paths resolve against
/// `root`.
pub fn load_labeled_clips(
    root: &Path,
    records: &[ClipRecord],
    taxonomy: &Taxonomy,
) -> Result<Vec<LabeledClip>, DataError> {
    records
        .iter()
        .map(|record| {
            Ok(LabeledClip {
                audio: crate::audio::read_wav(&root.join(&record.path))?,
                labels: record.label_set(taxonomy)?,
            })
        })
        .collect()
}
