//! Album manifests: one JSON object per line.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{KagsError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageLine {
    pub image_id: String,
    pub conv: String,
    pub regions: String,
    pub labels: Vec<String>,
}

/// A manifest line as stored on disk (paths relative to the manifest).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestLine {
    pub album_id: String,
    pub images: Vec<ImageLine>,
    pub references: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEntry {
    pub image_id: String,
    pub conv: PathBuf,
    pub regions: PathBuf,
    pub labels: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlbumRecord {
    pub album_id: String,
    pub images: Vec<ImageEntry>,
    /// Each reference story holds one sentence per image.
    pub references: Vec<Vec<String>>,
}

fn invalid(path: &Path, line: usize, msg: String) -> KagsError {
    KagsError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    }
}

/// Reads and validates every album; any invalid album fails the whole load.
pub fn parse_manifest(path: &Path, n_images: usize) -> Result<Vec<AlbumRecord>> {
    let text = fs::read_to_string(path).map_err(|e| KagsError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut albums = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: ManifestLine = serde_json::from_str(line)
            .map_err(|e| invalid(path, lineno, format!("malformed JSON: {e}")))?;
        let id = raw.album_id.clone();
        if raw.images.len() != n_images {
            return Err(invalid(
                path,
                lineno,
                format!(
                    "album `{id}` field `images`: expected {n_images} images, found {}",
                    raw.images.len()
                ),
            ));
        }
        if raw.references.is_empty() {
            return Err(invalid(
                path,
                lineno,
                format!("album `{id}` field `references`: at least one story required"),
            ));
        }
        for (r, story) in raw.references.iter().enumerate() {
            if story.len() != n_images {
                return Err(invalid(
                    path,
                    lineno,
                    format!(
                        "album `{id}` field `references[{r}]`: expected {n_images} sentences, found {}",
                        story.len()
                    ),
                ));
            }
        }
        let mut images = Vec::with_capacity(n_images);
        for (k, img) in raw.images.into_iter().enumerate() {
            let conv = base.join(&img.conv);
            let regions = base.join(&img.regions);
            for (field, p) in [("conv", &conv), ("regions", &regions)] {
                if !p.is_file() {
                    return Err(invalid(
                        path,
                        lineno,
                        format!(
                            "album `{id}` field `images[{k}].{field}`: missing file {}",
                            p.display()
                        ),
                    ));
                }
            }
            images.push(ImageEntry {
                image_id: img.image_id,
                conv,
                regions,
                labels: img.labels,
            });
        }
        albums.push(AlbumRecord {
            album_id: raw.album_id,
            images,
            references: raw.references,
        });
    }
    Ok(albums)
}

pub fn write_manifest(path: &Path, lines: &[ManifestLine]) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        out.push_str(&serde_json::to_string(l)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| KagsError::io(path, e))
}
