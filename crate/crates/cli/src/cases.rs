//! Case discovery by file name: `<id>_image.mhd` and `<id>_label.mhd`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cardioprior::{Error, Result};

pub const IMAGE_SUFFIX: &str = "_image.mhd";
pub const LABEL_SUFFIX: &str = "_label.mhd";

#[derive(Debug, Clone, Default)]
pub struct CaseFiles {
    pub id: String,
    pub image: Option<PathBuf>,
    pub label: Option<PathBuf>,
}

/// All cases in `dir`, sorted by id.
pub fn discover(dir: &Path) -> Result<Vec<CaseFiles>> {
    let entries = std::fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    let mut cases: BTreeMap<String, CaseFiles> = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some(id) = name.strip_suffix(IMAGE_SUFFIX) {
            let c = cases.entry(id.to_string()).or_default();
            c.id = id.to_string();
            c.image = Some(path);
        } else if let Some(id) = name.strip_suffix(LABEL_SUFFIX) {
            let c = cases.entry(id.to_string()).or_default();
            c.id = id.to_string();
            c.label = Some(path);
        }
    }
    Ok(cases.into_values().collect())
}

/// Cases that have a label volume; fails when there are none.
pub fn labeled(dir: &Path) -> Result<Vec<CaseFiles>> {
    let cases: Vec<_> = discover(dir)?.into_iter().filter(|c| c.label.is_some()).collect();
    if cases.is_empty() {
        return Err(Error::InvalidDocument(format!(
            "no *{LABEL_SUFFIX} volumes in {}",
            dir.display()
        )));
    }
    Ok(cases)
}

/// Cases with both an image and a label.
pub fn paired(dir: &Path) -> Result<Vec<CaseFiles>> {
    let cases = labeled(dir)?;
    if let Some(c) = cases.iter().find(|c| c.image.is_none()) {
        return Err(Error::InvalidDocument(format!(
            "case `{}` in {} has no image",
            c.id,
            dir.display()
        )));
    }
    Ok(cases)
}

/// Case id of a single volume path: the file stem without a kind suffix.
pub fn id_of(path: &Path) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    for suffix in [IMAGE_SUFFIX, LABEL_SUFFIX, ".mhd"] {
        if let Some(id) = name.strip_suffix(suffix) {
            return id.to_string();
        }
    }
    name.to_string()
}

pub fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::IoFailure {
        path: path.to_path_buf(),
        source,
    }
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}
