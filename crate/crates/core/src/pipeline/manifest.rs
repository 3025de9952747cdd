//! Dataset manifest: images grouped by identity, identity-disjoint splits
//! and a content hash over the files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::SplitRatios;
use crate::error::{Error, Result};
use crate::image_io;
use crate::scalar::Scalar;
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest root.
    pub path: PathBuf,
    pub identity: String,
    pub split: Split,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub seed: u64,
    pub ratios: SplitRatios,
    pub entries: Vec<ManifestEntry>,
    /// Files that failed to decode at ingest time.
    pub skipped: Vec<PathBuf>,
    pub content_hash: String,
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn sorted_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

/// Split sizes by largest remainder, keeping at least one train and one
/// test identity.
fn split_counts(n: usize, r: SplitRatios) -> [usize; 3] {
    let w = [r.train, r.val, r.test];
    let sum: f64 = w.iter().sum();
    let ideal: Vec<f64> = w.iter().map(|v| v / sum * n as f64).collect();
    let mut counts: Vec<usize> = ideal.iter().map(|v| v.floor() as usize).collect();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (ideal[b] - ideal[b].floor()).total_cmp(&(ideal[a] - ideal[a].floor())).then(a.cmp(&b)));
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    for need in [0, 2] {
        if counts[need] == 0 {
            let donor = (0..3).filter(|&i| i != need).max_by_key(|&i| (counts[i], i)).expect("three splits");
            counts[donor] -= 1;
            counts[need] += 1;
        }
    }
    [counts[0], counts[1], counts[2]]
}

/// Scans `root/<identity>/<image>` and assigns whole identities to splits.
/// Unreadable images are skipped with a warning; identities left without
/// images are dropped.
pub fn ingest(root: &Path, ratios: SplitRatios, seed: u64) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", root.display())));
    }
    let mut by_identity: BTreeMap<String, Vec<(PathBuf, String)>> = BTreeMap::new();
    let mut skipped = Vec::new();
    for dir in sorted_dir(root)?.into_iter().filter(|p| p.is_dir()) {
        let identity = dir.file_name().expect("directory entry").to_string_lossy().into_owned();
        for file in sorted_dir(&dir)?.into_iter().filter(|p| p.is_file()) {
            match image_io::load_rgb::<f32>(&file) {
                Ok(img) if img.height() > 0 && img.width() > 0 => {
                    let rel = file.strip_prefix(root).expect("under root").to_path_buf();
                    by_identity.entry(identity.clone()).or_default().push((rel, file_sha256(&file)?));
                }
                Ok(_) | Err(_) => {
                    log::warn!("skipping unreadable image {}", file.display());
                    skipped.push(file.strip_prefix(root).expect("under root").to_path_buf());
                }
            }
        }
    }
    if by_identity.len() < 2 {
        return Err(Error::Data(format!(
            "{} has {} identities with readable images; need at least 2",
            root.display(),
            by_identity.len()
        )));
    }
    let mut ids: Vec<String> = by_identity.keys().cloned().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let [n_train, n_val, _] = split_counts(ids.len(), ratios);
    let split_of: BTreeMap<String, Split> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let s = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (id.clone(), s)
        })
        .collect();
    let entries = by_identity
        .into_iter()
        .flat_map(|(identity, files)| {
            let split = split_of[&identity];
            files.into_iter().map(move |(path, sha256)| ManifestEntry {
                path,
                identity: identity.clone(),
                split,
                sha256,
            })
        })
        .collect();
    let mut m = DatasetManifest {
        root: root.to_path_buf(),
        seed,
        ratios,
        entries,
        skipped,
        content_hash: String::new(),
    };
    m.content_hash = m.compute_hash();
    Ok(m)
}

impl DatasetManifest {
    fn compute_hash(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.path.to_string_lossy().as_bytes());
            h.update([0]);
            h.update(e.identity.as_bytes());
            h.update([0]);
            h.update(e.split.as_str());
            h.update([0]);
            h.update(e.sha256.as_bytes());
            h.update([b'\n']);
        }
        hex::encode(h.finalize())
    }

    /// Rehashes every file and checks the manifest hash.
    pub fn verify(&self) -> Result<()> {
        if self.compute_hash() != self.content_hash {
            return Err(Error::Data("manifest content hash does not match its entries".into()));
        }
        for e in &self.entries {
            let p = self.root.join(&e.path);
            if file_sha256(&p)? != e.sha256 {
                return Err(Error::Data(format!("{} changed since ingest", p.display())));
            }
        }
        Ok(())
    }

    pub fn identities(&self, split: Split) -> Vec<&str> {
        let mut ids: Vec<&str> = self.entries.iter().filter(|e| e.split == split).map(|e| e.identity.as_str()).collect();
        ids.dedup();
        ids
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Images of `split` at `size x size` with labels `0..identities`.
    pub fn load<T: Scalar>(&self, split: Split, size: usize) -> Result<(Vec<ImageTensor<T>>, Vec<usize>)> {
        let ids = self.identities(split);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for e in self.entries(split) {
            images.push(image_io::load_square(&self.root.join(&e.path), size)?);
            labels.push(ids.iter().position(|i| *i == e.identity).expect("identity of its own split"));
        }
        Ok((images, labels))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load_from(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        if m.compute_hash() != m.content_hash {
            return Err(Error::Data(format!("{}: content hash mismatch", path.display())));
        }
        Ok(m)
    }
}
