//! Reproducible synthetic dataset construction and the split manifest.

use crate::caseio::{read_case, write_case};
use crate::error::{Error, Result};
use crate::synth::{generate_case, SyntheticSpec};
use crate::volume::{LabelVolume, Volume};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!(
                "unknown split {other:?} (expected train|val|test)"
            ))),
        }
    }
}

/// Lists case directories per split, as paths relative to the manifest's
/// own directory.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    #[serde(skip)]
    root: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path)?;
        let mut m: Manifest =
            serde_json::from_str(&raw).map_err(|e| Error::MalformedHeader(e.to_string()))?;
        m.root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(m)
    }

    pub fn entries(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn case_dirs(&self, split: Split) -> Vec<PathBuf> {
        self.entries(split).iter().map(|e| self.root.join(e)).collect()
    }

    /// Loads every case of a split in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<(Volume, LabelVolume)>> {
        let dirs = self.case_dirs(split);
        let loaded: Vec<Result<(Volume, LabelVolume)>> =
            dirs.par_iter().map(|d| read_case(d)).collect();
        loaded.into_iter().collect()
    }
}

/// Generates `n_train + n_val + n_test` cases with seeds `spec.seed + index`
/// (index global over train, then val, then test), writes them under
/// `root/<split>/<case_id>/`, and writes `root/manifest.json`. Rerunning with
/// the same arguments reproduces identical bytes.
pub fn make_dataset(
    spec_base: &SyntheticSpec,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    root: &Path,
) -> Result<PathBuf> {
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::InvalidArgument(
            "split sizes must all be >= 1".into(),
        ));
    }
    spec_base.validate()?;
    fs::create_dir_all(root)?;

    let mut jobs: Vec<(Split, u64)> = Vec::new();
    let mut offset = 0u64;
    for (split, n) in [
        (Split::Train, n_train),
        (Split::Val, n_val),
        (Split::Test, n_test),
    ] {
        for i in 0..n as u64 {
            jobs.push((split, spec_base.seed + offset + i));
        }
        offset += n as u64;
    }

    let written: Vec<Result<(Split, String)>> = jobs
        .par_iter()
        .map(|&(split, seed)| {
            let spec = SyntheticSpec { seed, ..spec_base.clone() };
            let (volume, label) = generate_case(&spec)?;
            let rel = format!("{}/{}", split.dir_name(), volume.id);
            write_case(&root.join(&rel), &volume, &label)?;
            Ok((split, rel))
        })
        .collect();

    let mut manifest = Manifest::default();
    for item in written {
        let (split, rel) = item?;
        match split {
            Split::Train => manifest.train.push(rel),
            Split::Val => manifest.val.push(rel),
            Split::Test => manifest.test.push(rel),
        }
    }
    manifest.train.sort();
    manifest.val.sort();
    manifest.test.sort();

    let path = root.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}
