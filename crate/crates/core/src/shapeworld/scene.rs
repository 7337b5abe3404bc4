use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ShapeworldError;
use crate::raster::{Mask, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.word() == w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.word() == w)
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 180, 60],
            Color::Blue => [50, 90, 230],
            Color::Yellow => [230, 210, 40],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Small,
    Large,
}

pub const BACKGROUND_RGB: [u8; 3] = [24, 24, 28];

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShapeInstance {
    pub kind: ShapeKind,
    pub color: Color,
    pub size_class: SizeClass,
    pub cx: i32,
    pub cy: i32,
    /// Radius for circles, half side for squares, half height for triangles.
    pub extent: i32,
    pub z_order: u32,
}

impl ShapeInstance {
    /// Pixel `(x, y)` is sampled at its integer coordinate.
    pub fn contains(&self, x: i32, y: i32) -> bool {
        let (dx, dy, r) = (x - self.cx, y - self.cy, self.extent);
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            // Apex at (cx, cy - r), base row cy + r spanning cx ± r.
            ShapeKind::Triangle => dy.abs() <= r && 2 * dx.abs() <= dy + r,
        }
    }

    /// Inclusive pixel bounds.
    pub fn bounds(&self) -> (i32, i32, i32, i32) {
        let r = self.extent;
        (self.cx - r, self.cy - r, self.cx + r, self.cy + r)
    }

    pub fn inside_canvas(&self, w: usize, h: usize) -> bool {
        let (x0, y0, x1, y1) = self.bounds();
        x0 >= 0 && y0 >= 0 && x1 < w as i32 && y1 < h as i32
    }

    /// Unoccluded footprint.
    pub fn mask(&self, w: usize, h: usize) -> Mask {
        Mask::from_fn(w, h, |x, y| self.contains(x as i32, y as i32))
    }

    pub fn descriptor(&self) -> (Color, ShapeKind) {
        (self.color, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scene {
    pub canvas_w: usize,
    pub canvas_h: usize,
    pub shapes: Vec<ShapeInstance>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub small_extent: (i32, i32),
    pub large_extent: (i32, i32),
    /// Cap on pairwise footprint overlap, as a fraction of the smaller shape.
    pub max_overlap: f64,
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            small_extent: (4, 6),
            large_extent: (8, 10),
            max_overlap: 0.2,
            max_attempts: 1000,
        }
    }
}

pub const MIN_SHAPES: usize = 2;
pub const MAX_SHAPES: usize = 6;
pub const MIN_CANVAS: usize = 32;

/// Random scene with `n_shapes` shapes; a pure function of its arguments.
pub fn generate_scene(seed: u64, n_shapes: usize, canvas: (usize, usize)) -> Result<Scene, ShapeworldError> {
    generate_scene_with(&SceneConfig::default(), seed, n_shapes, canvas, &[])
}

/// Like [`generate_scene`]; `forced[i]`, when present, fixes the color and kind of shape `i`.
pub fn generate_scene_with(
    cfg: &SceneConfig,
    seed: u64,
    n_shapes: usize,
    canvas: (usize, usize),
    forced: &[Option<(Color, ShapeKind)>],
) -> Result<Scene, ShapeworldError> {
    let (w, h) = canvas;
    if !(MIN_SHAPES..=MAX_SHAPES).contains(&n_shapes) {
        return Err(ShapeworldError::Config(format!(
            "n_shapes {n_shapes} outside {MIN_SHAPES}..={MAX_SHAPES}"
        )));
    }
    if w < MIN_CANVAS || h < MIN_CANVAS {
        return Err(ShapeworldError::Config(format!(
            "canvas {w}x{h} smaller than {MIN_CANVAS}x{MIN_CANVAS}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shapes: Vec<ShapeInstance> = Vec::with_capacity(n_shapes);
    let mut footprints: Vec<Mask> = Vec::with_capacity(n_shapes);
    for i in 0..n_shapes {
        let (color, kind) = match forced.get(i).copied().flatten() {
            Some(ck) => ck,
            None => (
                Color::ALL[rng.random_range(0..Color::ALL.len())],
                ShapeKind::ALL[rng.random_range(0..ShapeKind::ALL.len())],
            ),
        };
        let size_class = if rng.random_bool(0.5) {
            SizeClass::Small
        } else {
            SizeClass::Large
        };
        let (lo, hi) = match size_class {
            SizeClass::Small => cfg.small_extent,
            SizeClass::Large => cfg.large_extent,
        };
        let extent = rng.random_range(lo..=hi).max(3);
        if 2 * extent + 1 > w.min(h) as i32 {
            return Err(ShapeworldError::Placement { attempts: 0 });
        }
        let mut placed = None;
        for _ in 0..cfg.max_attempts {
            let cand = ShapeInstance {
                kind,
                color,
                size_class,
                cx: rng.random_range(extent..w as i32 - extent),
                cy: rng.random_range(extent..h as i32 - extent),
                extent,
                z_order: i as u32,
            };
            let fp = cand.mask(w, h);
            let ok = footprints.iter().all(|other| {
                let (inter, _) = fp.overlap_counts(other);
                let smaller = fp.count().min(other.count()) as f64;
                inter as f64 <= cfg.max_overlap * smaller
            });
            if ok {
                placed = Some((cand, fp));
                break;
            }
        }
        let (shape, fp) = placed.ok_or(ShapeworldError::Placement {
            attempts: cfg.max_attempts,
        })?;
        shapes.push(shape);
        footprints.push(fp);
    }
    Ok(Scene {
        canvas_w: w,
        canvas_h: h,
        shapes,
        seed,
    })
}

/// Draws shapes in ascending `z_order` over the background. Returns the
/// image and one visible (occlusion-resolved) mask per shape, in scene order.
pub fn render_scene(scene: &Scene) -> (RgbImage, Vec<Mask>) {
    let (w, h) = (scene.canvas_w, scene.canvas_h);
    let mut owner: Vec<Option<usize>> = vec![None; w * h];
    let mut order: Vec<usize> = (0..scene.shapes.len()).collect();
    order.sort_by_key(|&i| (scene.shapes[i].z_order, i));
    for &i in &order {
        let s = &scene.shapes[i];
        let (x0, y0, x1, y1) = s.bounds();
        for y in y0.max(0)..=y1.min(h as i32 - 1) {
            for x in x0.max(0)..=x1.min(w as i32 - 1) {
                if s.contains(x, y) {
                    owner[y as usize * w + x as usize] = Some(i);
                }
            }
        }
    }
    let mut img = RgbImage::filled(w, h, BACKGROUND_RGB);
    let mut masks = vec![Mask::empty(w, h); scene.shapes.len()];
    for y in 0..h {
        for x in 0..w {
            if let Some(i) = owner[y * w + x] {
                img.put(x, y, scene.shapes[i].color.rgb());
                masks[i].set(x, y, true);
            }
        }
    }
    (img, masks)
}
