//! Pair manifests: CSV files with one `(query, reference, claimed location, label,
//! split)` record per line. Paths are relative to the manifest's directory.

use std::io::{Read, Write};
use std::path::{Component, Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gps::{gps_distance, GeoPoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub query_path: String,
    pub ref_path: String,
    pub lat: f64,
    pub lon: f64,
    pub label: u8,
    pub split: Split,
}

impl ManifestRecord {
    pub fn location(&self) -> GeoPoint {
        GeoPoint {
            lat: self.lat,
            lon: self.lon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.location().validate()?;
        if self.label > 1 {
            return Err(Error::invalid(format!(
                "label must be 0 or 1, got {}",
                self.label
            )));
        }
        check_relative(&self.query_path)?;
        check_relative(&self.ref_path)
    }
}

fn check_relative(path: &str) -> Result<()> {
    let p = Path::new(path);
    let escapes = p
        .components()
        .any(|c| !matches!(c, Component::Normal(_) | Component::CurDir));
    if path.is_empty() || escapes {
        return Err(Error::invalid(format!(
            "manifest path {path:?} must be relative to the manifest directory"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn new(base_dir: impl Into<PathBuf>, records: Vec<ManifestRecord>) -> Self {
        Manifest {
            base_dir: base_dir.into(),
            records,
        }
    }

    pub fn parse(reader: impl Read, base_dir: impl Into<PathBuf>) -> Result<Manifest> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut records = Vec::new();
        for (i, row) in rdr.deserialize::<ManifestRecord>().enumerate() {
            let rec = row.map_err(|e| Error::Format {
                what: "manifest",
                message: format!("record {}: {e}", i + 1),
            })?;
            rec.validate().map_err(|e| Error::Format {
                what: "manifest",
                message: format!("record {}: {e}", i + 1),
            })?;
            records.push(rec);
        }
        Ok(Manifest::new(base_dir, records))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        Manifest::parse(file, base)
    }

    /// Writes the header even when there are no records.
    pub fn write_to(&self, writer: impl Write) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(writer);
        let fmt = |e: csv::Error| Error::Format {
            what: "manifest",
            message: e.to_string(),
        };
        wtr.write_record(["query_path", "ref_path", "lat", "lon", "label", "split"])
            .map_err(fmt)?;
        for rec in &self.records {
            wtr.serialize(rec).map_err(fmt)?;
        }
        wtr.flush().map_err(|e| Error::Format {
            what: "manifest",
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.base_dir.join(relative)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

/// Pairs every positive's query with the reference of another positive at least
/// `min_km` away. A distance-respecting permutation of references is preferred;
/// when none exists, references may repeat.
pub fn build_negative_manifest(
    positives: &[ManifestRecord],
    min_km: f64,
    rng: &mut impl Rng,
) -> Result<Vec<ManifestRecord>> {
    if positives.len() < 2 {
        return Err(Error::invalid(
            "negative pairing needs at least two positives",
        ));
    }
    if !(min_km >= 0.0) {
        return Err(Error::invalid(format!(
            "min_km must be non-negative, got {min_km}"
        )));
    }
    let n = positives.len();
    let mut allowed = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            allowed[i][j] =
                i != j && gps_distance(positives[i].location(), positives[j].location())? >= min_km;
        }
        if !allowed[i].contains(&true) {
            return Err(Error::invalid(format!(
                "no reference lies {min_km} km or more from query {}",
                positives[i].query_path
            )));
        }
    }
    let assignment = random_matching(&allowed, rng).unwrap_or_else(|| {
        (0..n)
            .map(|i| {
                let choices: Vec<usize> = (0..n).filter(|&j| allowed[i][j]).collect();
                *choices.choose(rng).expect("checked non-empty")
            })
            .collect()
    });
    Ok(positives
        .iter()
        .zip(assignment)
        .map(|(q, j)| {
            let r = &positives[j];
            ManifestRecord {
                query_path: q.query_path.clone(),
                ref_path: r.ref_path.clone(),
                lat: r.lat,
                lon: r.lon,
                label: 0,
                split: q.split,
            }
        })
        .collect())
}

/// A random perfect matching in the bipartite graph `allowed`, if one exists.
pub(crate) fn random_matching(allowed: &[Vec<bool>], rng: &mut impl Rng) -> Option<Vec<usize>> {
    let n = allowed.len();
    let mut perm: Vec<usize> = (0..n).collect();
    for _ in 0..16 {
        perm.shuffle(rng);
        if (0..n).all(|i| allowed[i][perm[i]]) {
            return Some(perm);
        }
    }
    // Augmenting paths over shuffled candidate lists.
    let mut order: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| allowed[i][j]).collect())
        .collect();
    for row in &mut order {
        row.shuffle(rng);
    }
    let mut owner: Vec<Option<usize>> = vec![None; n];
    fn augment(
        i: usize,
        order: &[Vec<usize>],
        owner: &mut [Option<usize>],
        seen: &mut [bool],
    ) -> bool {
        for &j in &order[i] {
            if seen[j] {
                continue;
            }
            seen[j] = true;
            if owner[j].is_none_or(|k| augment(k, order, owner, seen)) {
                owner[j] = Some(i);
                return true;
            }
        }
        false
    }
    for i in 0..n {
        let mut seen = vec![false; n];
        if !augment(i, &order, &mut owner, &mut seen) {
            return None;
        }
    }
    let mut out = vec![0; n];
    for (j, i) in owner.into_iter().enumerate() {
        out[i.expect("perfect matching")] = j;
    }
    Some(out)
}
