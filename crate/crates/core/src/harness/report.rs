use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::Variant;
use super::eval::EvalReport;
use super::HarnessError;
use crate::grounding::PixelBox;
use crate::raster::{Mask, RgbImage};
use crate::shapeworld::ReferringSample;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const REPORT_FILE: &str = "report.json";

/// One evaluated `(variant, seed)` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: Variant,
    pub seed: u64,
    pub oiou: f64,
    pub miou: f64,
    pub relational_miou: Option<f64>,
    pub attribute_miou: Option<f64>,
    pub mean_box_iou: Option<f64>,
    pub samples: usize,
    pub config_hash: String,
    pub dataset_hash: String,
    pub wall_clock_secs: f64,
}

impl ReportRow {
    pub fn from_eval(r: &EvalReport) -> Self {
        let boxes: Vec<f64> = r.records.iter().filter_map(|x| x.box_iou).collect();
        Self {
            variant: r.variant,
            seed: r.seed,
            oiou: r.oiou,
            miou: r.miou,
            relational_miou: r.subset_miou(true),
            attribute_miou: r.subset_miou(false),
            mean_box_iou: (!boxes.is_empty()).then(|| boxes.iter().sum::<f64>() / boxes.len() as f64),
            samples: r.records.len(),
            config_hash: r.config_hash.clone(),
            dataset_hash: r.dataset_hash.clone(),
            wall_clock_secs: r.wall_clock_secs,
        }
    }
}

/// Mean and sample standard deviation over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub runs: usize,
    pub miou_mean: f64,
    pub miou_std: f64,
    pub oiou_mean: f64,
    pub oiou_std: f64,
}

/// Signed difference of seed means, `target − baseline`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendStatistic {
    pub baseline: Variant,
    pub target: Variant,
    pub delta_miou: f64,
    pub delta_oiou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    /// Sorted by variant name, then seed.
    pub rows: Vec<ReportRow>,
    /// Sorted by variant name.
    pub summaries: Vec<VariantSummary>,
    pub trends: Vec<TrendStatistic>,
    /// Shared evaluation split, when every row used the same one.
    pub dataset_hash: Option<String>,
}

impl Report {
    pub fn summary(&self, v: Variant) -> Option<&VariantSummary> {
        self.summaries.iter().find(|s| s.variant == v)
    }

    pub fn trend(&self, baseline: Variant, target: Variant) -> Option<&TrendStatistic> {
        self.trends
            .iter()
            .find(|t| t.baseline == baseline && t.target == target)
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Pairs reported as trends: every variant against `no_spatial`, and the
/// oracle against `ppcr`.
fn trend_pairs(present: &[Variant]) -> Vec<(Variant, Variant)> {
    let mut out = Vec::new();
    if present.contains(&Variant::NoSpatial) {
        for &v in present {
            if v != Variant::NoSpatial {
                out.push((Variant::NoSpatial, v));
            }
        }
    }
    if present.contains(&Variant::Ppcr) && present.contains(&Variant::GtBoxOracle) {
        out.push((Variant::Ppcr, Variant::GtBoxOracle));
    }
    out
}

pub fn build_report(reports: Vec<EvalReport>) -> Result<Report, HarnessError> {
    if reports.is_empty() {
        return Err(HarnessError::Config("a report needs at least one evaluation".into()));
    }
    let mut rows: Vec<ReportRow> = reports.iter().map(ReportRow::from_eval).collect();
    rows.sort_by(|a, b| a.variant.name().cmp(b.variant.name()).then(a.seed.cmp(&b.seed)));
    for w in rows.windows(2) {
        if w[0].variant == w[1].variant && w[0].seed == w[1].seed {
            return Err(HarnessError::Config(format!(
                "duplicate run {} seed {}",
                w[0].variant, w[0].seed
            )));
        }
    }
    let mut by_variant: BTreeMap<&str, (Variant, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in &rows {
        let e = by_variant
            .entry(r.variant.name())
            .or_insert_with(|| (r.variant, Vec::new(), Vec::new()));
        e.1.push(r.miou);
        e.2.push(r.oiou);
    }
    let summaries: Vec<VariantSummary> = by_variant
        .values()
        .map(|(v, m, o)| {
            let (miou_mean, miou_std) = mean_std(m);
            let (oiou_mean, oiou_std) = mean_std(o);
            VariantSummary {
                variant: *v,
                runs: m.len(),
                miou_mean,
                miou_std,
                oiou_mean,
                oiou_std,
            }
        })
        .collect();
    let present: Vec<Variant> = summaries.iter().map(|s| s.variant).collect();
    let find = |v: Variant| summaries.iter().find(|s| s.variant == v).expect("present");
    let trends = trend_pairs(&present)
        .into_iter()
        .map(|(b, t)| TrendStatistic {
            baseline: b,
            target: t,
            delta_miou: find(t).miou_mean - find(b).miou_mean,
            delta_oiou: find(t).oiou_mean - find(b).oiou_mean,
        })
        .collect();
    let first = &rows[0].dataset_hash;
    let dataset_hash = rows.iter().all(|r| &r.dataset_hash == first).then(|| first.clone());
    Ok(Report {
        schema_version: REPORT_SCHEMA_VERSION,
        rows,
        summaries,
        trends,
        dataset_hash,
    })
}

/// Checks a parsed report against the schema and its own invariants.
pub fn validate_report(value: &serde_json::Value) -> Result<Report, HarnessError> {
    let bad = |m: String| Err(HarnessError::Config(format!("report: {m}")));
    let report: Report = serde_json::from_value(value.clone())?;
    if report.schema_version != REPORT_SCHEMA_VERSION {
        return bad(format!("schema version {}", report.schema_version));
    }
    if report.rows.is_empty() {
        return bad("no rows".into());
    }
    let unit = |x: f64| (0.0..=1.0).contains(&x);
    for r in &report.rows {
        let opt = [r.relational_miou, r.attribute_miou, r.mean_box_iou];
        if !unit(r.oiou) || !unit(r.miou) || opt.iter().flatten().any(|x| !unit(*x)) {
            return bad(format!("{} seed {}: metric outside [0, 1]", r.variant, r.seed));
        }
    }
    let keys: Vec<(&str, u64)> = report.rows.iter().map(|r| (r.variant.name(), r.seed)).collect();
    if keys.windows(2).any(|w| w[0] >= w[1]) {
        return bad("rows not strictly sorted by (variant, seed)".into());
    }
    let names: Vec<&str> = report.summaries.iter().map(|s| s.variant.name()).collect();
    if names.windows(2).any(|w| w[0] >= w[1]) {
        return bad("summaries not sorted by variant name".into());
    }
    for s in &report.summaries {
        let n = report.rows.iter().filter(|r| r.variant == s.variant).count();
        if n != s.runs {
            return bad(format!("{}: summary counts {} runs, rows have {n}", s.variant, s.runs));
        }
    }
    Ok(report)
}

/// Writes `report.json` under `dir` and returns the report.
pub fn emit_report(reports: Vec<EvalReport>, dir: &Path) -> Result<Report, HarnessError> {
    let report = build_report(reports)?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(REPORT_FILE), serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}

const PANEL_GAP: usize = 2;
const GAP_RGB: [u8; 3] = [255, 255, 255];
const MASK_ON: [u8; 3] = [255, 255, 255];
const MASK_OFF: [u8; 3] = [0, 0, 0];
const GT_BOX_RGB: [u8; 3] = [0, 220, 0];
const PRED_BOX_RGB: [u8; 3] = [230, 0, 230];

fn blit_mask(canvas: &mut RgbImage, mask: &Mask, x0: usize) {
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            canvas.put(x0 + x, y, if mask.get(x, y) { MASK_ON } else { MASK_OFF });
        }
    }
}

fn blit_image_with_box(canvas: &mut RgbImage, img: &RgbImage, b: Option<PixelBox>, rgb: [u8; 3], x0: usize) {
    let (w, h) = (img.width(), img.height());
    for y in 0..h {
        for x in 0..w {
            canvas.put(x0 + x, y, img.pixel(x, y));
        }
    }
    let Some(b) = b else { return };
    // Outline the pixels on the box edges; x2/y2 are exclusive edges.
    let x1 = (b.x1.floor().max(0.0) as usize).min(w - 1);
    let y1 = (b.y1.floor().max(0.0) as usize).min(h - 1);
    let x2 = ((b.x2.ceil() as usize).saturating_sub(1)).clamp(x1, w - 1);
    let y2 = ((b.y2.ceil() as usize).saturating_sub(1)).clamp(y1, h - 1);
    for x in x1..=x2 {
        canvas.put(x0 + x, y1, rgb);
        canvas.put(x0 + x, y2, rgb);
    }
    for y in y1..=y2 {
        canvas.put(x0 + x1, y, rgb);
        canvas.put(x0 + x2, y, rgb);
    }
}

/// Five panels side by side: gt mask, baseline mask, ppcr mask, image with
/// the gt box, image with the predicted box.
pub fn comparison_grid(
    sample: &ReferringSample,
    baseline: &Mask,
    ours: &Mask,
    pred_box: Option<PixelBox>,
) -> Result<RgbImage, HarnessError> {
    let (w, h) = (sample.image.width(), sample.image.height());
    for m in [baseline, ours] {
        if !m.same_size(&sample.gt_mask) {
            return Err(HarnessError::Config(format!(
                "grid mask for sample {} has the wrong size",
                sample.id
            )));
        }
    }
    let mut canvas = RgbImage::filled(5 * w + 4 * PANEL_GAP, h, GAP_RGB);
    let x = |i: usize| i * (w + PANEL_GAP);
    blit_mask(&mut canvas, &sample.gt_mask, x(0));
    blit_mask(&mut canvas, baseline, x(1));
    blit_mask(&mut canvas, ours, x(2));
    blit_image_with_box(&mut canvas, &sample.image, Some(sample.gt_box), GT_BOX_RGB, x(3));
    blit_image_with_box(&mut canvas, &sample.image, pred_box, PRED_BOX_RGB, x(4));
    Ok(canvas)
}

/// Number of panels in a comparison grid of the given width.
pub fn grid_panels(grid_width: usize, panel_width: usize) -> usize {
    (grid_width + PANEL_GAP) / (panel_width + PANEL_GAP)
}
