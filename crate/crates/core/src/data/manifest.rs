//! Dataset directory scanning.
//!
//! ```text
//! root/{train,val,test,difficult}/<id>/rgb.png
//!                                     /depth.png
//!                                     /mask.png
//! root/tags.json             optional, id -> [tag, ...]
//! root/splits/<name>.txt     optional, one id per line
//! ```
//!
//! A split named by a file under `splits/` lists ids from any split
//! directory. It takes precedence over a directory with the same name.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

/// Split directories recognised under a dataset root.
pub const SPLITS: [&str; 4] = ["train", "val", "test", "difficult"];
const FILES: [&str; 3] = ["rgb.png", "depth.png", "mask.png"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Directory the sample lives in.
    pub split: String,
    #[serde(skip)]
    pub rgb: PathBuf,
    #[serde(skip)]
    pub depth: PathBuf,
    #[serde(skip)]
    pub mask: PathBuf,
    pub tags: BTreeSet<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    /// Sorted by split directory, then id.
    pub entries: Vec<ManifestEntry>,
    /// Splits defined by list files, in file order.
    pub split_files: BTreeMap<String, Vec<String>>,
}

#[derive(Serialize)]
struct ManifestJson<'a> {
    samples: &'a [ManifestEntry],
    split_files: &'a BTreeMap<String, Vec<String>>,
}

impl DatasetManifest {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn has_split(&self, name: &str) -> bool {
        self.split_files.contains_key(name) || self.entries.iter().any(|e| e.split == name)
    }

    /// Entries of a split: the ids of its list file, or else its directory.
    pub fn split<'a>(&'a self, name: &str) -> Box<dyn Iterator<Item = &'a ManifestEntry> + 'a> {
        match self.split_files.get(name) {
            Some(ids) => Box::new(
                ids.iter()
                    .filter_map(move |id| self.entries.iter().find(|e| &e.id == id)),
            ),
            None => {
                let name = name.to_string();
                Box::new(self.entries.iter().filter(move |e| e.split == name))
            }
        }
    }

    /// Lists samples with their split and tags. File paths are implied by
    /// the layout and omitted.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(&ManifestJson {
            samples: &self.entries,
            split_files: &self.split_files,
        })?;
        s.push('\n');
        Ok(s)
    }
}

fn sorted_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(path).map_err(|e| Error::io(path, e))? {
        out.push(entry.map_err(|e| Error::io(path, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Reads a split list file: one id per line, blank lines and `#` comments
/// ignored.
pub fn load_split(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

/// Scans a dataset root.
///
/// Every sample directory must contain all three images; otherwise the
/// error lists each incomplete sample and what it lacks. Ids must be unique
/// across splits, and split files may only name known ids.
pub fn build_manifest(root: &Path) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::data(root, "dataset root is not a directory"));
    }
    let tags: BTreeMap<String, BTreeSet<String>> = match std::fs::read(root.join("tags.json")) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map_err(|e| Error::data(root.join("tags.json"), e.to_string()))?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
        Err(e) => return Err(Error::io(root.join("tags.json"), e)),
    };

    let mut entries = Vec::new();
    let mut orphans = Vec::new();
    for split in SPLITS {
        let dir = root.join(split);
        if !dir.is_dir() {
            continue;
        }
        for sample_dir in sorted_dir(&dir)? {
            if !sample_dir.is_dir() {
                continue;
            }
            let id = file_name(&sample_dir);
            let missing: Vec<&str> = FILES
                .iter()
                .copied()
                .filter(|f| !sample_dir.join(f).is_file())
                .collect();
            if !missing.is_empty() {
                orphans.push(format!("{split}/{id} (missing {})", missing.join(", ")));
                continue;
            }
            entries.push(ManifestEntry {
                tags: tags.get(&id).cloned().unwrap_or_default(),
                rgb: sample_dir.join(FILES[0]),
                depth: sample_dir.join(FILES[1]),
                mask: sample_dir.join(FILES[2]),
                split: split.to_string(),
                id,
            });
        }
    }
    if !orphans.is_empty() {
        return Err(Error::Orphans(orphans));
    }
    let mut seen = BTreeSet::new();
    for e in &entries {
        if !seen.insert(e.id.as_str()) {
            return Err(Error::data(root, format!("sample id {:?} appears in more than one split", e.id)));
        }
    }

    let mut split_files = BTreeMap::new();
    let splits_dir = root.join("splits");
    if splits_dir.is_dir() {
        for path in sorted_dir(&splits_dir)? {
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let ids = load_split(&path)?;
            if let Some(unknown) = ids.iter().find(|id| !seen.contains(id.as_str())) {
                return Err(Error::data(&path, format!("unknown sample id {unknown:?}")));
            }
            let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            split_files.insert(name, ids);
        }
    }

    Ok(DatasetManifest {
        root: root.to_path_buf(),
        entries,
        split_files,
    })
}
