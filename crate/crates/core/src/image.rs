//! Content-addressed image references and the on-disk image workspace.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("unresolvable image {locator}: {reason}")]
    Unresolvable { locator: String, reason: String },
    #[error("image io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageKind {
    /// Raster bytes stored in the workspace as `<hash>.<ext>`.
    File,
    /// Simulated image; the locator holds the payload inline.
    Sim,
}

/// Reference to an image by content hash.
///
/// Two refs with the same `id` denote the same bytes; equality and hashing
/// only look at the id.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: String,
    pub kind: ImageKind,
    pub locator: String,
}

impl PartialEq for ImageRef {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
    }
}

impl Eq for ImageRef {}

impl std::hash::Hash for ImageRef {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.id.hash(state);
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", &self.id[..self.id.len().min(12)])
    }
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl ImageRef {
    /// Builds a sim ref whose locator is the inline payload itself.
    pub fn sim(payload: String) -> Self {
        ImageRef {
            id: content_hash(payload.as_bytes()),
            kind: ImageKind::Sim,
            locator: payload,
        }
    }

    /// The bytes the id was computed over: the inline payload for sim refs,
    /// the stored file for file refs.
    pub fn bytes(&self, store: Option<&ImageStore>) -> Result<Vec<u8>, ImageError> {
        match self.kind {
            ImageKind::Sim => Ok(self.locator.clone().into_bytes()),
            ImageKind::File => {
                let store = store.ok_or_else(|| ImageError::Unresolvable {
                    locator: self.locator.clone(),
                    reason: "no image workspace configured".into(),
                })?;
                store.read(self)
            }
        }
    }
}

/// Directory of content-addressed image files.
#[derive(Debug, Clone)]
pub struct ImageStore {
    root: PathBuf,
}

impl ImageStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ImageError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(ImageStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Stores `bytes` under `<hash>.<ext>`; idempotent for identical bytes.
    pub fn put(&self, bytes: &[u8], ext: &str) -> Result<ImageRef, ImageError> {
        let id = content_hash(bytes);
        let name = format!("{id}.{ext}");
        let path = self.root.join(&name);
        if !path.exists() {
            fs::write(&path, bytes)?;
        }
        Ok(ImageRef {
            id,
            kind: ImageKind::File,
            locator: name,
        })
    }

    /// Copies an external file into the workspace.
    pub fn import(&self, path: &Path) -> Result<ImageRef, ImageError> {
        let bytes = fs::read(path).map_err(|e| ImageError::Unresolvable {
            locator: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("png")
            .to_ascii_lowercase();
        self.put(&bytes, &ext)
    }

    pub fn read(&self, image: &ImageRef) -> Result<Vec<u8>, ImageError> {
        let path = self.root.join(&image.locator);
        fs::read(&path).map_err(|e| ImageError::Unresolvable {
            locator: image.locator.clone(),
            reason: e.to_string(),
        })
    }

    /// Finds a stored file by hash regardless of extension.
    pub fn find(&self, hash: &str) -> Option<PathBuf> {
        if hash.is_empty() || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
            return None;
        }
        let entries = fs::read_dir(&self.root).ok()?;
        entries
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .find(|p| p.file_stem().and_then(|s| s.to_str()) == Some(hash))
    }

    pub fn resolvable(&self, image: &ImageRef) -> bool {
        match image.kind {
            ImageKind::Sim => true,
            ImageKind::File => self.root.join(&image.locator).is_file(),
        }
    }
}
