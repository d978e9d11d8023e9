//! Dataset manifests shared by the shape generator and the sprite ingester.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint;
use crate::properties::{PropertySchema, PropertyVector};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "aspectfsl-manifest-v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub sample_id: String,
    /// Path relative to the directory holding the manifest.
    pub image_path: String,
    pub properties: PropertyVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub schema: PropertySchema,
    pub image_size: u32,
    pub records: Vec<ManifestRecord>,
    /// Full parameter record of the producing stage, including its seed.
    pub generator_config: serde_json::Value,
    /// Hash of `generator_config`.
    pub config_hash: String,
}

impl DatasetManifest {
    pub fn new(
        schema: PropertySchema,
        image_size: u32,
        records: Vec<ManifestRecord>,
        generator_config: serde_json::Value,
    ) -> Result<Self> {
        let config_hash = fingerprint::config_hash(&generator_config)?;
        let manifest = Self {
            format: MANIFEST_FORMAT.to_string(),
            schema,
            image_size,
            records,
            generator_config,
            config_hash,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    /// Checks id uniqueness, vector completeness and vector uniqueness.
    pub fn validate(&self) -> Result<()> {
        if self.format != MANIFEST_FORMAT {
            return Err(Error::InvalidManifest(format!("unknown format `{}`", self.format)));
        }
        self.schema.validate()?;
        let mut ids = BTreeSet::new();
        let mut vectors = BTreeSet::new();
        for r in &self.records {
            if !ids.insert(r.sample_id.as_str()) {
                return Err(Error::InvalidManifest(format!("duplicate sample id `{}`", r.sample_id)));
            }
            r.properties.validate(&self.schema)?;
            if !vectors.insert(&r.properties) {
                return Err(Error::DuplicateVector(r.properties.key()));
            }
        }
        Ok(())
    }

    /// Checks that every image exists and decodes to the declared size.
    pub fn verify_images(&self, base: &Path) -> Result<()> {
        for r in &self.records {
            let img = load_rgb(&base.join(&r.image_path))?;
            if img.dimensions() != (self.image_size, self.image_size) {
                return Err(Error::InvalidManifest(format!(
                    "{} is {:?}, expected {}x{}",
                    r.image_path,
                    img.dimensions(),
                    self.image_size,
                    self.image_size
                )));
            }
        }
        Ok(())
    }

    pub fn record(&self, sample_id: &str) -> Option<&ManifestRecord> {
        self.records.iter().find(|r| r.sample_id == sample_id)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Hash of the serialized manifest; episode files and checkpoints carry it.
    pub fn content_hash(&self) -> Result<String> {
        Ok(fingerprint::bytes_hash(self.to_json()?.as_bytes()))
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, self.to_json()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Loads from a manifest file or a directory containing `manifest.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let file = manifest_path(path);
        let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let manifest: Self = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Directory that manifest-relative image paths resolve against.
pub fn manifest_base(path: &Path) -> PathBuf {
    let file = manifest_path(path);
    file.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Converts an 8-bit RGB image to planar CHW floats in `[0, 1]`.
pub fn to_chw_unit(img: &RgbImage) -> Vec<f32> {
    let (w, h) = img.dimensions();
    let plane = (w * h) as usize;
    let mut out = vec![0.0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = f32::from(px[c]) / 255.0;
        }
    }
    out
}
