use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grammar::{compose_expression, Descriptor, Expression};
use super::scene::{generate_scene_with, render_scene, Color, Scene, SceneConfig, ShapeKind};
use super::ShapeworldError;
use crate::grounding::PixelBox;
use crate::raster::{Mask, RgbImage};

/// Resampling budget per sample before generation gives up.
const MAX_SAMPLE_ATTEMPTS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFiles {
    pub manifest: String,
    pub images_dir: String,
    pub masks_dir: String,
    pub index: String,
}

impl Default for DatasetFiles {
    fn default() -> Self {
        Self {
            manifest: "manifest.json".into(),
            images_dir: "images".into(),
            masks_dir: "masks".into(),
            index: "index.jsonl".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    pub sample_count: usize,
    pub canvas_w: usize,
    pub canvas_h: usize,
    pub seed: u64,
    pub relational_fraction: f64,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Relational samples place a second shape with the target's color and
    /// kind, so only the relation tells them apart.
    pub relational_twin: bool,
    pub scene: SceneConfig,
    pub files: DatasetFiles,
}

impl DatasetManifest {
    pub fn new(split: impl Into<String>, sample_count: usize, seed: u64) -> Self {
        Self {
            split: split.into(),
            sample_count,
            canvas_w: 64,
            canvas_h: 64,
            seed,
            relational_fraction: 0.7,
            min_shapes: 3,
            max_shapes: 6,
            relational_twin: true,
            scene: SceneConfig::default(),
            files: DatasetFiles::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ShapeworldError> {
        if self.sample_count == 0 {
            return Err(ShapeworldError::Config("sample_count must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.relational_fraction) {
            return Err(ShapeworldError::Config(format!(
                "relational_fraction {} outside [0, 1]",
                self.relational_fraction
            )));
        }
        if self.min_shapes < 2 || self.min_shapes > self.max_shapes || self.max_shapes > 6 {
            return Err(ShapeworldError::Config(format!(
                "shape count range {}..={} invalid",
                self.min_shapes, self.max_shapes
            )));
        }
        Ok(())
    }

    /// Sample `i` is relational iff `floor((i+1)·f) > floor(i·f)`, which spreads
    /// exactly `floor(n·f)` relational samples evenly over the split.
    pub fn is_relational(&self, index: usize) -> bool {
        let f = self.relational_fraction;
        ((index + 1) as f64 * f).floor() > (index as f64 * f).floor()
    }

    pub fn sample_seed(&self, index: usize) -> u64 {
        self.seed ^ index as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferringSample {
    pub id: usize,
    pub image: RgbImage,
    pub expression: Vec<String>,
    pub gt_mask: Mask,
    pub gt_box: PixelBox,
    pub target_id: usize,
    pub relational: bool,
    pub scene: Scene,
}

impl ReferringSample {
    pub fn expression_text(&self) -> String {
        self.expression.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexRecord {
    id: usize,
    image: String,
    mask: String,
    expression: String,
    #[serde(rename = "box")]
    bbox: [f32; 4],
    target_id: usize,
    relational: bool,
    scene: Scene,
}

/// Deterministically derives sample `index` of the split.
pub fn generate_sample(m: &DatasetManifest, index: usize) -> Result<ReferringSample, ShapeworldError> {
    let relational = m.is_relational(index);
    let mut rng = ChaCha8Rng::seed_from_u64(m.sample_seed(index));
    for _ in 0..MAX_SAMPLE_ATTEMPTS {
        let n = rng.random_range(m.min_shapes..=m.max_shapes);
        let scene_seed: u64 = rng.random();
        let expr_seed: u64 = rng.random();
        let twin = relational && m.relational_twin;
        let forced: Vec<Option<(Color, ShapeKind)>> = if twin {
            let d = (
                Color::ALL[rng.random_range(0..Color::ALL.len())],
                ShapeKind::ALL[rng.random_range(0..ShapeKind::ALL.len())],
            );
            vec![Some(d), Some(d)]
        } else {
            Vec::new()
        };
        let Ok(scene) = generate_scene_with(&m.scene, scene_seed, n, (m.canvas_w, m.canvas_h), &forced) else {
            continue;
        };
        let target_id = if twin {
            rng.random_range(0..2)
        } else {
            let unique: Vec<usize> = (0..scene.shapes.len())
                .filter(|&i| {
                    let d = Descriptor::of(&scene.shapes[i]);
                    scene.shapes.iter().filter(|s| d.matches(s)).count() == 1
                })
                .collect();
            if unique.is_empty() {
                continue;
            }
            unique[rng.random_range(0..unique.len())]
        };
        let Ok(expr) = compose_expression(&scene, target_id, relational, expr_seed) else {
            continue;
        };
        let (image, masks) = render_scene(&scene);
        let gt_mask = masks[target_id].clone();
        let Some(gt_box) = PixelBox::from_mask(&gt_mask) else {
            continue;
        };
        return Ok(ReferringSample {
            id: index,
            image,
            expression: expr.tokens(),
            gt_mask,
            gt_box,
            target_id,
            relational: expr.is_relational(),
            scene,
        });
    }
    Err(ShapeworldError::Exhausted { index })
}

pub fn generate_samples(m: &DatasetManifest) -> Result<Vec<ReferringSample>, ShapeworldError> {
    m.validate()?;
    (0..m.sample_count).map(|i| generate_sample(m, i)).collect()
}

/// Generates the split and writes it under `dir`.
pub fn export_dataset(dir: &Path, m: &DatasetManifest) -> Result<Vec<ReferringSample>, ShapeworldError> {
    let samples = generate_samples(m)?;
    write_dataset(dir, m, &samples)?;
    Ok(samples)
}

pub fn write_dataset(dir: &Path, m: &DatasetManifest, samples: &[ReferringSample]) -> Result<(), ShapeworldError> {
    if samples.len() != m.sample_count {
        return Err(ShapeworldError::Integrity(format!(
            "manifest declares {} samples, got {}",
            m.sample_count,
            samples.len()
        )));
    }
    fs::create_dir_all(dir.join(&m.files.images_dir))?;
    fs::create_dir_all(dir.join(&m.files.masks_dir))?;
    let mut index = fs::File::create(dir.join(&m.files.index))?;
    for s in samples {
        let image = format!("{}/{:05}.png", m.files.images_dir, s.id);
        let mask = format!("{}/{:05}.png", m.files.masks_dir, s.id);
        s.image.save_png(&dir.join(&image))?;
        s.gt_mask.save_png(&dir.join(&mask))?;
        let rec = IndexRecord {
            id: s.id,
            image,
            mask,
            expression: s.expression_text(),
            bbox: s.gt_box.to_array(),
            target_id: s.target_id,
            relational: s.relational,
            scene: s.scene.clone(),
        };
        serde_json::to_writer(&mut index, &rec)?;
        index.write_all(b"\n")?;
    }
    fs::write(dir.join(&m.files.manifest), serde_json::to_vec_pretty(m)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<ReferringSample>), ShapeworldError> {
    let integrity = |what: String| ShapeworldError::Integrity(what);
    let m: DatasetManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)
        .map_err(|e| integrity(format!("manifest.json: {e}")))?;
    m.validate()?;
    let index = fs::read_to_string(dir.join(&m.files.index))?;
    let mut samples = Vec::with_capacity(m.sample_count);
    for (line_no, line) in index.lines().enumerate() {
        let rec: IndexRecord = serde_json::from_str(line)
            .map_err(|e| integrity(format!("{} line {}: {e}", m.files.index, line_no + 1)))?;
        let image = RgbImage::load_png(&dir.join(&rec.image)).map_err(|e| integrity(format!("{}: {e}", rec.image)))?;
        let gt_mask = Mask::load_png(&dir.join(&rec.mask)).map_err(|e| integrity(format!("{}: {e}", rec.mask)))?;
        if image.width() != m.canvas_w
            || image.height() != m.canvas_h
            || gt_mask.width() != m.canvas_w
            || gt_mask.height() != m.canvas_h
        {
            return Err(integrity(format!("sample {} has wrong raster size", rec.id)));
        }
        let gt_box = PixelBox::from_array(rec.bbox);
        if PixelBox::from_mask(&gt_mask) != Some(gt_box) {
            return Err(integrity(format!("sample {} box does not match its mask", rec.id)));
        }
        let expression: Vec<String> = rec.expression.split_whitespace().map(str::to_owned).collect();
        Expression::parse(&expression)?;
        samples.push(ReferringSample {
            id: rec.id,
            image,
            expression,
            gt_mask,
            gt_box,
            target_id: rec.target_id,
            relational: rec.relational,
            scene: rec.scene,
        });
    }
    if samples.len() != m.sample_count {
        return Err(integrity(format!(
            "manifest declares {} samples, index has {}",
            m.sample_count,
            samples.len()
        )));
    }
    Ok((m, samples))
}
