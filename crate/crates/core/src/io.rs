//! On-disk formats.
//!
//! A dataset is a directory holding `manifest.json` plus one CSV file per
//! class. Each CSV has a header row of variable names followed by one row per
//! observation, values written with 17 significant digits so that a
//! write/read round trip is bit-exact. An optional `ground_truth.json`
//! carries the generating parameters of simulated data.
//!
//! Matrices inside JSON documents are stored row-major as arrays of rows.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetMeta, MultiClassDataset};
use crate::simulation::GroundTruth;
use crate::{Error, Mat, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

/// Serde adapter storing a matrix as a list of rows.
pub mod rows {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &Mat, ser: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Mat, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(de)?;
        from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Serde adapter for a list of matrices, each stored as a list of rows.
pub mod rows_list {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ms: &[Mat], ser: S) -> Result<S::Ok, S::Error> {
        ms.iter().map(to_rows).collect::<Vec<_>>().serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Vec<Mat>, D::Error> {
        let all = Vec::<Vec<Vec<f64>>>::deserialize(de)?;
        all.iter()
            .map(|r| from_rows(r).map_err(serde::de::Error::custom))
            .collect()
    }
}

pub fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> std::result::Result<Mat, String> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err("ragged matrix rows".into());
    }
    Ok(Mat::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// Writes `bytes` to a temporary file next to `path` and renames it into
/// place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub p: usize,
    #[serde(rename = "N")]
    pub n_classes: usize,
    pub class_files: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
    #[serde(flatten)]
    pub meta: DatasetMeta,
}

fn class_file_name(i: usize) -> String {
    format!("class_{i:03}.csv")
}

/// Writes `ds` (and optionally its ground truth) into directory `dir`.
pub fn write_dataset(
    ds: &MultiClassDataset,
    dir: &Path,
    truth: Option<&GroundTruth>,
) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(ds.n_classes());
    for (i, x) in ds.classes.iter().enumerate() {
        let name = class_file_name(i);
        let path = dir.join(&name);
        let mut wtr = csv::Writer::from_writer(Vec::new());
        wtr.write_record(&ds.variable_names)
            .map_err(|e| Error::format(&path, e.to_string()))?;
        let mut record = Vec::with_capacity(x.ncols());
        for r in 0..x.nrows() {
            record.clear();
            record.extend(x.row(r).iter().map(|v| format!("{v:.16e}")));
            wtr.write_record(&record)
                .map_err(|e| Error::format(&path, e.to_string()))?;
        }
        let bytes = wtr
            .into_inner()
            .map_err(|e| Error::format(&path, e.to_string()))?;
        atomic_write(&path, &bytes)?;
        files.push(name);
    }
    let ground_truth = match truth {
        Some(t) => {
            write_json(&dir.join(GROUND_TRUTH_FILE), t)?;
            Some(GROUND_TRUTH_FILE.to_string())
        }
        None => None,
    };
    let manifest = DatasetManifest {
        version: DATASET_FORMAT_VERSION,
        p: ds.p(),
        n_classes: ds.n_classes(),
        class_files: files,
        ground_truth,
        meta: ds.meta.clone(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(Error::io(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset manifest not found"),
        ));
    }
    let manifest: DatasetManifest = read_json(&path)?;
    if manifest.version != DATASET_FORMAT_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported dataset version {}", manifest.version),
        ));
    }
    if manifest.class_files.len() != manifest.n_classes {
        return Err(Error::format(
            &path,
            format!(
                "manifest lists {} class files but N = {}",
                manifest.class_files.len(),
                manifest.n_classes
            ),
        ));
    }
    Ok(manifest)
}

/// Reads a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<MultiClassDataset> {
    let manifest = read_manifest(dir)?;
    let mut names: Option<Vec<String>> = None;
    let mut classes = Vec::with_capacity(manifest.n_classes);
    for (i, file) in manifest.class_files.iter().enumerate() {
        let path = dir.join(file);
        if !path.is_file() {
            return Err(Error::io(
                &path,
                std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("data file for class {i} not found"),
                ),
            ));
        }
        let mut rdr =
            csv::Reader::from_path(&path).map_err(|e| Error::format(&path, e.to_string()))?;
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::format(&path, e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        if header.len() != manifest.p {
            return Err(Error::format(
                &path,
                format!(
                    "class {i} has {} variables, manifest declares p = {}",
                    header.len(),
                    manifest.p
                ),
            ));
        }
        match &names {
            Some(n) if *n != header => {
                return Err(Error::format(
                    &path,
                    format!("class {i} variable names differ from class 0"),
                ))
            }
            Some(_) => {}
            None => names = Some(header),
        }
        let mut values = Vec::new();
        let mut nrows = 0usize;
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::format(&path, e.to_string()))?;
            if rec.len() != manifest.p {
                return Err(Error::format(
                    &path,
                    format!(
                        "class {i}, row {r}: {} fields, expected {}",
                        rec.len(),
                        manifest.p
                    ),
                ));
            }
            for (c, field) in rec.iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::format(
                        &path,
                        format!("class {i}, row {r}, column {c}: bad number {field:?}"),
                    )
                })?;
                if !v.is_finite() {
                    return Err(Error::format(
                        &path,
                        format!("class {i}, row {r}, column {c}: non-finite value"),
                    ));
                }
                values.push(v);
            }
            nrows += 1;
        }
        classes.push(Mat::from_row_slice(nrows, manifest.p, &values));
    }
    Ok(MultiClassDataset {
        classes,
        variable_names: names.unwrap_or_default(),
        meta: manifest.meta,
    })
}

/// Ground truth referenced by the manifest, if any.
pub fn read_ground_truth(dir: &Path) -> Result<Option<GroundTruth>> {
    let manifest = read_manifest(dir)?;
    match manifest.ground_truth {
        Some(file) => Ok(Some(read_json(&dir.join(file))?)),
        None => Ok(None),
    }
}
