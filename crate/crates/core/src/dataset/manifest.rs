use std::collections::BTreeSet;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use super::label::RecordLabel;
use super::socofing::{has_image_extension, parse_socofing_name};
use super::DatasetError;

/// File name looked up by the Explicit scheme inside a dataset root.
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Socofing,
    Explicit,
}

/// One image and its ground truth. `path` and `mask` are `/`-separated and
/// relative to the manifest root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    #[serde(flatten)]
    pub label: RecordLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub scheme: Scheme,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Skipped {
    pub path: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct ManifestBuild {
    pub manifest: Manifest,
    pub skipped: Vec<Skipped>,
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io { path: path.display().to_string(), source }
}

fn to_slash(path: &Path) -> String {
    path.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Scans `root` and builds a manifest sorted by path. Files that fail to
/// parse are collected in `skipped` instead of aborting the scan.
pub fn build_manifest(root: &Path, scheme: Scheme) -> Result<ManifestBuild, DatasetError> {
    if !root.is_dir() {
        return Err(io_err(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root is not a directory"),
        ));
    }
    let (entries, skipped) = match scheme {
        Scheme::Socofing => scan_socofing(root)?,
        Scheme::Explicit => read_explicit(root)?,
    };
    if entries.is_empty() {
        return Err(DatasetError::EmptyDataset(root.display().to_string()));
    }
    let manifest = Manifest { root: root.to_path_buf(), scheme, entries };
    manifest.check_unique()?;
    Ok(ManifestBuild { manifest, skipped })
}

fn scan_socofing(root: &Path) -> Result<(Vec<ManifestEntry>, Vec<Skipped>), DatasetError> {
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for item in WalkDir::new(root).sort_by_file_name() {
        let item = item.map_err(|e| {
            let path = e.path().unwrap_or(root).to_path_buf();
            io_err(&path, e.into_io_error().unwrap_or_else(|| std::io::Error::other("walk loop")))
        })?;
        if !item.file_type().is_file() || !has_image_extension(item.path()) {
            continue;
        }
        let rel = item.path().strip_prefix(root).unwrap_or(item.path());
        let rel_str = to_slash(rel);
        match parse_socofing_name(rel) {
            Ok(label) => entries.push(ManifestEntry { path: rel_str, label, mask: None }),
            Err(e) => skipped.push(Skipped { path: rel_str, reason: e.to_string() }),
        }
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    Ok((entries, skipped))
}

fn read_explicit(root: &Path) -> Result<(Vec<ManifestEntry>, Vec<Skipped>), DatasetError> {
    let file = root.join(MANIFEST_FILE);
    let raw = std::fs::read(&file).map_err(|e| io_err(&file, e))?;
    let listed: Vec<ManifestEntry> = serde_json::from_slice(&raw)
        .map_err(|source| DatasetError::Json { path: file.display().to_string(), source })?;
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for e in listed {
        if let Err(reason) = e.label.validate() {
            skipped.push(Skipped { path: e.path, reason });
        } else if !root.join(&e.path).is_file() {
            skipped.push(Skipped { path: e.path, reason: "file not found".into() });
        } else {
            entries.push(e);
        }
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    Ok((entries, skipped))
}

/// `target` expressed relative to directory `base`. Both must exist.
fn relative_to(target: &Path, base: &Path) -> Option<PathBuf> {
    let target = target.canonicalize().ok()?;
    let base = base.canonicalize().ok()?;
    let t: Vec<Component> = target.components().collect();
    let b: Vec<Component> = base.components().collect();
    let common = t.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let mut out = PathBuf::new();
    for _ in common..b.len() {
        out.push("..");
    }
    for c in &t[common..] {
        out.push(c.as_os_str());
    }
    Some(out)
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<RecordLabel> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn image_path(&self, index: usize) -> PathBuf {
        self.root.join(&self.entries[index].path)
    }

    pub fn mask_path(&self, index: usize) -> Option<PathBuf> {
        self.entries[index].mask.as_ref().map(|m| self.root.join(m))
    }

    fn check_unique(&self) -> Result<(), DatasetError> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.path.as_str()) {
                return Err(DatasetError::DuplicatePath(e.path.clone()));
            }
        }
        Ok(())
    }

    /// JSON array of entries, paths relative to `base_dir`.
    pub fn to_json(&self, base_dir: &Path) -> Result<String, DatasetError> {
        let prefix = if self.root.canonicalize().ok() == base_dir.canonicalize().ok() {
            None
        } else {
            Some(relative_to(&self.root, base_dir).unwrap_or_else(|| self.root.clone()))
        };
        let rebase = |p: &str| match &prefix {
            None => p.to_string(),
            Some(pre) => to_slash(&pre.join(p)),
        };
        let entries: Vec<ManifestEntry> = self
            .entries
            .iter()
            .map(|e| ManifestEntry {
                path: rebase(&e.path),
                label: e.label,
                mask: e.mask.as_deref().map(rebase),
            })
            .collect();
        let mut s = serde_json::to_string_pretty(&entries)
            .map_err(|source| DatasetError::Json { path: "<manifest>".into(), source })?;
        s.push('\n');
        Ok(s)
    }

    /// Writes the manifest as an Explicit-scheme JSON file.
    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let json = self.to_json(&dir)?;
        std::fs::write(path, json).map_err(|e| io_err(path, e))
    }

    /// Loads a manifest file; paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Manifest, DatasetError> {
        let raw = std::fs::read(path).map_err(|e| io_err(path, e))?;
        let entries: Vec<ManifestEntry> = serde_json::from_slice(&raw)
            .map_err(|source| DatasetError::Json { path: path.display().to_string(), source })?;
        let root = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        for e in &entries {
            e.label.validate().map_err(|r| DatasetError::InvalidLabel(format!("{}: {r}", e.path)))?;
            if !root.join(&e.path).is_file() {
                return Err(io_err(
                    &root.join(&e.path),
                    std::io::Error::new(std::io::ErrorKind::NotFound, "manifest entry not found"),
                ));
            }
        }
        if entries.is_empty() {
            return Err(DatasetError::EmptyDataset(path.display().to_string()));
        }
        let m = Manifest { root, scheme: Scheme::Explicit, entries };
        m.check_unique()?;
        Ok(m)
    }
}
