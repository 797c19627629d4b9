//! Case discovery: `<id>_image.<ext>` and `<id>_label.<ext>` pairs in one
//! directory, `.nii` or raw `.json` sidecars.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

pub const IMAGE_SUFFIX: &str = "_image";
pub const LABEL_SUFFIX: &str = "_label";
pub const PRED_SUFFIX: &str = "_pred";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaseFiles {
    pub id: String,
    pub image: Option<PathBuf>,
    pub label: Option<PathBuf>,
}

/// Case id and role suffix of a volume file, if it is one.
fn split_name(path: &Path) -> Option<(String, String)> {
    let ext = path.extension()?.to_str()?;
    if !matches!(ext, "nii" | "json") {
        return None;
    }
    let stem = path.file_stem()?.to_str()?;
    let cut = stem.rfind('_')?;
    Some((stem[..cut].to_string(), stem[cut..].to_string()))
}

/// Files in `dir` carrying `suffix`, keyed by case id.
pub fn files_with_suffix(dir: &Path, suffix: &str) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).with_context(|| format!("reading directory {}", dir.display()))?;
    for entry in entries {
        let path = entry?.path();
        if let Some((id, role)) = split_name(&path) {
            if role == suffix {
                if let Some(prev) = out.insert(id.clone(), path.clone()) {
                    bail!("case {id} has two {suffix} files: {} and {}", prev.display(), path.display());
                }
            }
        }
    }
    Ok(out)
}

pub fn discover(dir: &Path) -> Result<Vec<CaseFiles>> {
    let mut images = files_with_suffix(dir, IMAGE_SUFFIX)?;
    let mut labels = files_with_suffix(dir, LABEL_SUFFIX)?;
    let mut ids: Vec<String> = images.keys().chain(labels.keys()).cloned().collect();
    ids.sort();
    ids.dedup();
    Ok(ids
        .into_iter()
        .map(|id| CaseFiles {
            image: images.remove(&id),
            label: labels.remove(&id),
            id,
        })
        .collect())
}

/// Cases that have both an image and a label.
pub fn labelled(dir: &Path) -> Result<Vec<CaseFiles>> {
    let cases: Vec<CaseFiles> = discover(dir)?
        .into_iter()
        .filter(|c| c.image.is_some() && c.label.is_some())
        .collect();
    if cases.is_empty() {
        bail!("no <id>_image / <id>_label pairs found in {}", dir.display());
    }
    Ok(cases)
}

/// Case id for an arbitrary input file: the stem without a role suffix.
pub fn case_id_of(path: &Path) -> String {
    match split_name(path) {
        Some((id, role)) if role == IMAGE_SUFFIX => id,
        _ => path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "case".into()),
    }
}
