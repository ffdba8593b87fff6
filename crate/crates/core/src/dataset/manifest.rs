use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::BBox;
use crate::rng::{tag, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    /// Relative to the manifest's root directory.
    pub path: String,
    pub label: usize,
    pub split: Split,
    pub bbox: Option<BBox>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    path: String,
    label: usize,
    split: Split,
    #[serde(default)]
    x0: Option<u32>,
    #[serde(default)]
    y0: Option<u32>,
    #[serde(default)]
    x1: Option<u32>,
    #[serde(default)]
    y1: Option<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<Record>,
    pub classes: usize,
}

fn manifest_err(msg: impl Into<String>) -> Error {
    Error::Manifest(msg.into())
}

impl Manifest {
    /// Validate records and derive the class count. Does not touch the filesystem.
    pub fn from_records(root: impl Into<PathBuf>, records: Vec<Record>) -> Result<Self> {
        if records.is_empty() {
            return Err(manifest_err("manifest has no records"));
        }
        let labels: BTreeSet<usize> = records.iter().map(|r| r.label).collect();
        let classes = labels.len();
        if labels.iter().next_back() != Some(&(classes - 1)) {
            let missing: Vec<usize> = (0..classes).filter(|l| !labels.contains(l)).collect();
            return Err(manifest_err(format!(
                "labels not dense: missing {missing:?} below the maximum label"
            )));
        }
        let mut train = HashSet::new();
        let mut test = HashSet::new();
        for r in &records {
            let set = match r.split {
                Split::Train => &mut train,
                Split::Test => &mut test,
            };
            if !set.insert(r.path.as_str()) {
                return Err(manifest_err(format!("duplicate record `{}`", r.path)));
            }
        }
        if let Some(p) = train.intersection(&test).next() {
            return Err(manifest_err(format!("`{p}` appears in both train and test splits")));
        }
        Ok(Manifest {
            root: root.into(),
            records,
            classes,
        })
    }

    /// Error on the first record whose file does not exist.
    pub fn check_files(&self) -> Result<()> {
        for r in &self.records {
            if !self.root.join(&r.path).is_file() {
                return Err(manifest_err(format!("dangling path `{}`", r.path)));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn len(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn class_counts(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for r in self.split(split) {
            counts[r.label] += 1;
        }
        counts
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let with_boxes = self.records.iter().any(|r| r.bbox.is_some());
        let mut w = csv::Writer::from_path(path)?;
        if with_boxes {
            w.write_record(["path", "label", "split", "x0", "y0", "x1", "y1"])?;
        } else {
            w.write_record(["path", "label", "split"])?;
        }
        for r in &self.records {
            let split = match r.split {
                Split::Train => "train",
                Split::Test => "test",
            };
            let mut row = vec![r.path.clone(), r.label.to_string(), split.to_string()];
            if with_boxes {
                match r.bbox {
                    Some(b) => row.extend([b.x0, b.y0, b.x1, b.y1].map(|v| v.to_string())),
                    None => row.extend(std::iter::repeat_n(String::new(), 4)),
                }
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Read and fully validate `manifest.csv`; paths resolve against its directory.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    if !path.is_file() {
        return Err(manifest_err(format!("manifest `{}` not found", path.display())));
    }
    let mut rd = csv::Reader::from_path(path)?;
    let headers = rd.headers()?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    let ok = cols == ["path", "label", "split"] || cols == ["path", "label", "split", "x0", "y0", "x1", "y1"];
    if !ok {
        return Err(manifest_err(format!(
            "header must be path,label,split[,x0,y0,x1,y1], found {}",
            cols.join(",")
        )));
    }
    let mut records = Vec::new();
    for (i, row) in rd.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| manifest_err(format!("row {}: {e}", i + 2)))?;
        let bbox = match (row.x0, row.y0, row.x1, row.y1) {
            (Some(x0), Some(y0), Some(x1), Some(y1)) => Some(BBox::new(x0, y0, x1, y1)?),
            (None, None, None, None) => None,
            _ => return Err(manifest_err(format!("row {}: partial bounding box", i + 2))),
        };
        records.push(Record {
            path: row.path,
            label: row.label,
            split: row.split,
            bbox,
        });
    }
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let m = Manifest::from_records(root, records)?;
    m.check_files()?;
    Ok(m)
}

/// Keep `n` uniformly chosen training records (original order); test records stay.
pub fn subsample(m: &Manifest, n: usize, seed: u64) -> Result<Manifest> {
    let train: Vec<usize> = (0..m.records.len())
        .filter(|&i| m.records[i].split == Split::Train)
        .collect();
    if n > train.len() {
        return Err(Error::invalid(format!(
            "cannot sample {n} of {} training images",
            train.len()
        )));
    }
    let mut rng = SeededRng::new(seed, &[tag::SUBSAMPLE]);
    let perm = rng.permutation(train.len());
    let keep: HashSet<usize> = perm[..n].iter().map(|&j| train[j]).collect();
    let records = m
        .records
        .iter()
        .enumerate()
        .filter(|(i, r)| r.split == Split::Test || keep.contains(i))
        .map(|(_, r)| r.clone())
        .collect();
    Ok(Manifest {
        root: m.root.clone(),
        records,
        classes: m.classes,
    })
}
