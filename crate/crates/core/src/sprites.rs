//! Ingestion of pre-rendered sprite frames into a dataset manifest.
//!
//! The metadata file is a JSON list of `{file, properties, crop?}` entries.
//! `crop` (`[x, y, width, height]`) slices a single frame out of a sprite
//! sheet, so sheet layout never has to be known by this code.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use image::{imageops, Rgb, RgbImage, RgbaImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{save_png, DatasetManifest, ManifestRecord};
use crate::properties::{PropertySchema, PropertyVector};
use crate::shapegen::{BACKGROUND, IMAGE_SIZE};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpriteEntry {
    pub file: String,
    pub properties: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<[u32; 4]>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestOptions {
    pub image_size: u32,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self { image_size: IMAGE_SIZE }
    }
}

pub fn read_metadata(path: &Path) -> Result<Vec<SpriteEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Composites onto the background, pads to a centered square and scales
/// (nearest neighbour, pixel art) to `size`.
pub fn normalize_frame(frame: &RgbaImage, size: u32) -> RgbImage {
    let (w, h) = frame.dimensions();
    let side = w.max(h).max(1);
    let mut square = RgbImage::from_pixel(side, side, Rgb(BACKGROUND));
    let (ox, oy) = ((side - w) / 2, (side - h) / 2);
    for (x, y, px) in frame.enumerate_pixels() {
        let a = px[3] as u32;
        let blend = |c: u8, bg: u8| ((c as u32 * a + bg as u32 * (255 - a) + 127) / 255) as u8;
        square.put_pixel(
            x + ox,
            y + oy,
            Rgb([
                blend(px[0], BACKGROUND[0]),
                blend(px[1], BACKGROUND[1]),
                blend(px[2], BACKGROUND[2]),
            ]),
        );
    }
    if side == size {
        square
    } else {
        imageops::resize(&square, size, size, imageops::FilterType::Nearest)
    }
}

fn load_frame(path: &Path, crop: Option<[u32; 4]>) -> std::result::Result<RgbaImage, String> {
    let img = image::open(path)
        .map_err(|e| format!("{}: {e}", path.display()))?
        .to_rgba8();
    match crop {
        None => Ok(img),
        Some([x, y, w, h]) => {
            let (iw, ih) = img.dimensions();
            if w == 0 || h == 0 || x + w > iw || y + h > ih {
                return Err(format!(
                    "{}: crop {x},{y},{w},{h} outside {iw}x{ih}",
                    path.display()
                ));
            }
            Ok(imageops::crop_imm(&img, x, y, w, h).to_image())
        }
    }
}

/// Validates every metadata entry, then writes normalized frames and the
/// manifest into `out_dir`. All offending records are reported together.
pub fn ingest_sprites(
    frames_dir: &Path,
    metadata: &Path,
    schema: &PropertySchema,
    out_dir: &Path,
    options: &IngestOptions,
) -> Result<DatasetManifest> {
    schema.validate()?;
    let entries = read_metadata(metadata)?;
    if entries.is_empty() {
        log::warn!("no sprite frames listed in {}", metadata.display());
    }

    let mut problems = Vec::new();
    let mut vectors = Vec::with_capacity(entries.len());
    let mut first_seen: BTreeMap<PropertyVector, &str> = BTreeMap::new();
    for entry in &entries {
        if !frames_dir.join(&entry.file).is_file() {
            problems.push(format!("{}: frame file not found", entry.file));
        }
        match PropertyVector::new(schema, entry.properties.clone()) {
            Ok(v) => {
                if let Some(other) = first_seen.get(&v) {
                    problems.push(format!(
                        "{}: duplicate property vector ({}) already used by {other}",
                        entry.file,
                        v.key()
                    ));
                } else {
                    first_seen.insert(v.clone(), &entry.file);
                }
                vectors.push(Some(v));
            }
            Err(e) => {
                problems.push(format!("{}: {e}", entry.file));
                vectors.push(None);
            }
        }
    }
    if !problems.is_empty() {
        return Err(Error::SpriteRecords(problems));
    }

    let mut records = Vec::with_capacity(entries.len());
    let mut files = BTreeSet::new();
    for (i, (entry, vector)) in entries.iter().zip(vectors).enumerate() {
        let frame = load_frame(&frames_dir.join(&entry.file), entry.crop)
            .map_err(|e| Error::SpriteRecords(vec![e]))?;
        let sample_id = format!("{}-{i:05}", schema.name);
        let image_path = format!("images/{sample_id}.png");
        save_png(&normalize_frame(&frame, options.image_size), &out_dir.join(&image_path))?;
        files.insert(entry.file.as_str());
        records.push(ManifestRecord {
            sample_id,
            image_path,
            properties: vector.expect("validated above"),
        });
    }

    let config = serde_json::json!({
        "generator": "sprites",
        "image_size": options.image_size,
        "frames_dir": frames_dir.display().to_string(),
        "entries": entries,
    });
    let manifest = DatasetManifest::new(schema.clone(), options.image_size, records, config)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    manifest.save(out_dir)?;
    log::info!("ingested {} sprite frames from {} files", manifest.records.len(), files.len());
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgba;

    #[test]
    fn normalize_pads_and_scales() {
        let mut frame = RgbaImage::from_pixel(4, 2, Rgba([0, 0, 0, 0]));
        frame.put_pixel(0, 0, Rgba([255, 0, 0, 255]));
        let out = normalize_frame(&frame, 8);
        assert_eq!(out.dimensions(), (8, 8));
        // 4x2 is padded to 4x4 with one blank row on top, then doubled.
        assert_eq!(out.get_pixel(0, 2).0, [255, 0, 0]);
        assert_eq!(out.get_pixel(0, 0).0, BACKGROUND);
        assert_eq!(out.get_pixel(7, 7).0, BACKGROUND);
    }

    #[test]
    fn half_transparent_pixels_blend_with_background() {
        let frame = RgbaImage::from_pixel(2, 2, Rgba([200, 100, 0, 128]));
        let out = normalize_frame(&frame, 2);
        assert_eq!(out.get_pixel(0, 0).0, [100, 50, 0]);
    }
}
