//! Procedural renderer for the geometric shapes dataset.
//!
//! Each image is a centered regular polygon with a concentric polygonal hole.
//! The ring between hole and outer edge is filled with the pattern, and a
//! solid outline of the configured thickness is drawn outward from the outer
//! edge. Nothing is jittered: every pixel is a function of the property vector.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{save_png, DatasetManifest, ManifestRecord};
use crate::properties::{PropertySchema, PropertyVector};

pub const IMAGE_SIZE: u32 = 112;
pub const BACKGROUND: [u8; 3] = [0, 0, 0];

const SHAPE: &str = "shape";
const COLOR: &str = "color";
const THICKNESS: &str = "thickness";
const PATTERN: &str = "pattern";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Solid,
    Stripes,
    Dots,
    Checker,
    Grid,
}

impl Pattern {
    /// Whether pixel `(x, y)` is drawn at full intensity.
    fn lit(self, x: u32, y: u32) -> bool {
        match self {
            Pattern::Solid => true,
            Pattern::Stripes => ((x + y) / 6) % 2 == 0,
            Pattern::Dots => {
                let dx = (x % 8) as f64 - 3.5;
                let dy = (y % 8) as f64 - 3.5;
                dx * dx + dy * dy <= 6.25
            }
            Pattern::Checker => ((x / 6) + (y / 6)) % 2 == 0,
            Pattern::Grid => x % 6 < 2 || y % 6 < 2,
        }
    }
}

/// Maps categorical values onto drawing parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub sides: BTreeMap<String, u32>,
    pub colors: BTreeMap<String, [u8; 3]>,
    pub thickness_px: BTreeMap<String, f64>,
    pub patterns: BTreeMap<String, Pattern>,
    /// Circumradius of the outer polygon edge, in pixels at 112 px.
    pub outer_radius: f64,
    /// Circumradius of the hole.
    pub hole_radius: f64,
    /// Intensity of the unlit part of a pattern relative to the full color.
    pub shade: f64,
}

impl Default for Palette {
    fn default() -> Self {
        let map = |items: &[(&str, u32)]| items.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        Self {
            sides: map(&[
                ("triangle", 3),
                ("square", 4),
                ("pentagon", 5),
                ("hexagon", 6),
                ("heptagon", 7),
                ("octagon", 8),
            ]),
            colors: [
                ("red", [220, 40, 40]),
                ("green", [40, 180, 60]),
                ("blue", [50, 80, 230]),
                ("yellow", [230, 210, 40]),
                ("purple", [150, 60, 190]),
                ("orange", [240, 140, 30]),
                ("cyan", [40, 200, 210]),
                ("white", [235, 235, 235]),
            ]
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect(),
            thickness_px: [("thin", 3.0), ("medium", 7.0), ("thick", 12.0)]
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect(),
            patterns: [
                ("solid", Pattern::Solid),
                ("stripes", Pattern::Stripes),
                ("dots", Pattern::Dots),
                ("checker", Pattern::Checker),
                ("grid", Pattern::Grid),
            ]
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect(),
            outer_radius: 33.0,
            hole_radius: 15.0,
            shade: 0.3,
        }
    }
}

impl Palette {
    /// Checks that every value of the four drawing properties has a mapping.
    pub fn check_schema(&self, schema: &PropertySchema) -> Result<()> {
        for (prop, known) in [
            (SHAPE, self.sides.keys().collect::<BTreeSet<_>>()),
            (COLOR, self.colors.keys().collect()),
            (THICKNESS, self.thickness_px.keys().collect()),
            (PATTERN, self.patterns.keys().collect()),
        ] {
            let domain = schema.domain(prop).ok_or_else(|| {
                Error::InvalidSchema(format!("shape schemas need a `{prop}` property"))
            })?;
            if let Some(v) = domain.iter().find(|v| !known.contains(v)) {
                return Err(Error::UnknownValue {
                    property: prop.to_string(),
                    value: v.clone(),
                });
            }
        }
        if schema.properties.len() != 4 {
            return Err(Error::InvalidSchema(
                "shape schemas have exactly shape, color, thickness and pattern".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeRenderSpec {
    pub shape: String,
    pub color: String,
    pub thickness: String,
    pub pattern: String,
    pub image_size: u32,
    /// Recorded for provenance; the drawing itself has no random elements.
    pub seed: u64,
}

impl ShapeRenderSpec {
    pub fn from_vector(v: &PropertyVector, seed: u64) -> Result<Self> {
        let get = |p: &str| {
            v.get(p)
                .map(str::to_string)
                .ok_or_else(|| Error::InvalidVector(format!("missing property `{p}`")))
        };
        Ok(Self {
            shape: get(SHAPE)?,
            color: get(COLOR)?,
            thickness: get(THICKNESS)?,
            pattern: get(PATTERN)?,
            image_size: IMAGE_SIZE,
            seed,
        })
    }
}

/// Signed distance from `(x, y)` to a regular polygon centered at the origin
/// with one vertex pointing up. Negative inside.
fn polygon_sdf(x: f64, y: f64, sides: u32, circumradius: f64) -> f64 {
    let n = sides as f64;
    let half = PI / n;
    let apothem = circumradius * half.cos();
    let half_edge = circumradius * half.sin();
    // Edge normals sit between vertices; the first vertex is at -90 degrees.
    let theta = y.atan2(x) + PI / 2.0 - half;
    let sector = 2.0 * half;
    let local = theta - sector * (theta / sector).round();
    let r = x.hypot(y);
    let qx = r * local.cos();
    let qy = (r * local.sin()).abs();
    if qy <= half_edge {
        qx - apothem
    } else {
        (qx - apothem).hypot(qy - half_edge)
    }
}

fn lookup<'a, V>(map: &'a BTreeMap<String, V>, property: &str, value: &str) -> Result<&'a V> {
    map.get(value).ok_or_else(|| Error::UnknownValue {
        property: property.to_string(),
        value: value.to_string(),
    })
}

pub fn render_shape(spec: &ShapeRenderSpec) -> Result<RgbImage> {
    render_shape_with(spec, &Palette::default())
}

pub fn render_shape_with(spec: &ShapeRenderSpec, palette: &Palette) -> Result<RgbImage> {
    if spec.image_size == 0 {
        return Err(Error::InvalidArgument("image size must be positive".into()));
    }
    let sides = *lookup(&palette.sides, SHAPE, &spec.shape)?;
    let color = *lookup(&palette.colors, COLOR, &spec.color)?;
    let thickness = *lookup(&palette.thickness_px, THICKNESS, &spec.thickness)?;
    let pattern = *lookup(&palette.patterns, PATTERN, &spec.pattern)?;

    let size = spec.image_size;
    let scale = size as f64 / IMAGE_SIZE as f64;
    let center = size as f64 / 2.0;
    let outer = palette.outer_radius * scale;
    let hole = palette.hole_radius * scale;
    let outline = thickness * scale;
    let shade = color.map(|c| (c as f64 * palette.shade).round() as u8);

    let mut img = RgbImage::from_pixel(size, size, Rgb(BACKGROUND));
    for (x, y, px) in img.enumerate_pixels_mut() {
        let dx = x as f64 + 0.5 - center;
        let dy = y as f64 + 0.5 - center;
        if polygon_sdf(dx, dy, sides, hole) < 0.0 {
            continue;
        }
        let d = polygon_sdf(dx, dy, sides, outer);
        if d <= 0.0 {
            *px = Rgb(if pattern.lit(x, y) { color } else { shade });
        } else if d <= outline {
            *px = Rgb(color);
        }
    }
    Ok(img)
}

/// Which property combinations to render.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combos {
    All,
    Sampled { k: usize, seed: u64 },
    Explicit(Vec<PropertyVector>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct GeneratorConfig<'a> {
    generator: &'static str,
    image_size: u32,
    combos: &'a Combos,
    palette: &'a Palette,
}

fn select_vectors(schema: &PropertySchema, combos: &Combos) -> Result<Vec<(usize, PropertyVector)>> {
    let all = schema.all_vectors();
    match combos {
        Combos::All => Ok(all.into_iter().enumerate().collect()),
        Combos::Sampled { k, seed } => {
            if *k > all.len() {
                return Err(Error::DuplicateVector(format!(
                    "requested {k} distinct combinations but the schema has {}",
                    all.len()
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut idx = rand::seq::index::sample(&mut rng, all.len(), *k).into_vec();
            idx.sort_unstable();
            Ok(idx.into_iter().map(|i| (i, all[i].clone())).collect())
        }
        Combos::Explicit(list) => {
            let mut seen = BTreeSet::new();
            let mut out = Vec::with_capacity(list.len());
            for v in list {
                v.validate(schema)?;
                if !seen.insert(v) {
                    return Err(Error::DuplicateVector(v.key()));
                }
                let index = all.iter().position(|a| a == v).expect("validated vector");
                out.push((index, v.clone()));
            }
            Ok(out)
        }
    }
}

/// Renders one image per selected combination into `out_dir/images/` and
/// writes `out_dir/manifest.json`.
pub fn build_dataset(
    schema: &PropertySchema,
    out_dir: &Path,
    combos: &Combos,
    palette: &Palette,
) -> Result<DatasetManifest> {
    schema.validate()?;
    palette.check_schema(schema)?;
    let selected = select_vectors(schema, combos)?;

    let mut records = Vec::with_capacity(selected.len());
    for (index, vector) in selected {
        let sample_id = format!("{}-{index:05}", schema.name);
        let spec = ShapeRenderSpec::from_vector(&vector, index as u64)?;
        let img = render_shape_with(&spec, palette)?;
        let image_path = format!("images/{sample_id}.png");
        save_png(&img, &out_dir.join(&image_path))?;
        records.push(ManifestRecord {
            sample_id,
            image_path,
            properties: vector,
        });
    }

    let config = serde_json::to_value(GeneratorConfig {
        generator: "geometric_shapes",
        image_size: IMAGE_SIZE,
        combos,
        palette,
    })?;
    let manifest = DatasetManifest::new(schema.clone(), IMAGE_SIZE, records, config)?;
    manifest.save(out_dir)?;
    log::info!("rendered {} shape images into {}", manifest.records.len(), out_dir.display());
    Ok(manifest)
}
