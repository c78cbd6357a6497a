//! Saliency maps and the metric stack: pixel-ranking AP, IoU at a threshold,
//! interactive IIoU, Start/Middle/End robustness, fixed-shape baselines, and
//! heatmap export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::alignment::{similarity_map, LossConfig, TactileDescriptor};
use crate::corpus::MaskImage;
use crate::encoders::FeatureMap;
use crate::error::{Error, Result};
use crate::numeric::Scalar;
use crate::pairing::FramePosition;
use crate::raster::{write_pgm, write_ppm, Raster};

pub const UPSAMPLING_MODE: &str = "bilinear-align-corners";
pub const AP_FLAVOR: &str = "pixel-rank";

/// Per-pixel relevance scores in [0, 1] at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    width: usize,
    height: usize,
    scores: Vec<f64>,
    pub sample_id: Option<String>,
    pub descriptor_provenance: Option<String>,
}

impl SaliencyMap {
    pub fn new(width: usize, height: usize, scores: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!("saliency dimensions {width}x{height}")));
        }
        if scores.len() != width * height {
            return Err(Error::shape(format!(
                "saliency payload has {} scores for {width}x{height}",
                scores.len()
            )));
        }
        for (i, s) in scores.iter().enumerate() {
            if !s.is_finite() || !(0.0..=1.0).contains(s) {
                return Err(Error::invalid(format!("saliency score {s} at pixel {i}")));
            }
        }
        Ok(SaliencyMap { width, height, scores, sample_id: None, descriptor_provenance: None })
    }

    pub fn from_mask(mask: &MaskImage) -> Self {
        let scores = mask.pixels().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        SaliencyMap {
            width: mask.width(),
            height: mask.height(),
            scores,
            sample_id: None,
            descriptor_provenance: None,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.scores[y * self.width + x]
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Mask of pixels scoring at least `theta`.
    pub fn binarize(&self, theta: f64) -> MaskImage {
        let inside = self.scores.iter().map(|&s| s >= theta).collect();
        MaskImage::new(self.width, self.height, inside).expect("same payload size")
    }
}

/// How predictions are produced and scored; echoed verbatim in reports.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Binarization threshold on the normalized saliency map.
    pub threshold: f64,
    /// Cosine-normalize descriptor and location vectors for similarity.
    pub cosine: bool,
    /// Replace the model's prediction with a fixed shape when set.
    pub baseline: Option<BaselineKind>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { threshold: 0.5, cosine: true, baseline: None }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.threshold.is_finite() || !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::invalid(format!(
                "threshold must lie in [0, 1], got {}",
                self.threshold
            )));
        }
        Ok(())
    }

    fn predictor(&self) -> &'static str {
        match self.baseline {
            None => "saliency",
            Some(BaselineKind::FullSquare) => "full-square",
            Some(BaselineKind::FullCircle) => "full-circle",
        }
    }

    fn loss_config(&self) -> LossConfig {
        LossConfig { cosine: self.cosine, ..LossConfig::default() }
    }
}

fn bilinear_upsample(grid: &[f64], gh: usize, gw: usize, oh: usize, ow: usize) -> Vec<f64> {
    let src = |o: usize, olen: usize, glen: usize| -> f64 {
        if olen == 1 || glen == 1 {
            0.0
        } else {
            o as f64 * (glen - 1) as f64 / (olen - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = src(y, oh, gh);
        let (y0, fy) = (sy.floor() as usize, sy.fract());
        let y1 = (y0 + 1).min(gh - 1);
        for x in 0..ow {
            let sx = src(x, ow, gw);
            let (x0, fx) = (sx.floor() as usize, sx.fract());
            let x1 = (x0 + 1).min(gw - 1);
            let top = grid[y0 * gw + x0] * (1.0 - fx) + grid[y0 * gw + x1] * fx;
            let bottom = grid[y1 * gw + x0] * (1.0 - fx) + grid[y1 * gw + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Builds the grid similarity map for the descriptor, bilinearly upsamples it
/// (align-corners) to `out_width` x `out_height`, and min-max normalizes the
/// result to [0, 1]. A constant map normalizes to all zeros.
pub fn compute_saliency<T: Scalar>(
    features: &FeatureMap<T>,
    descriptor: &TactileDescriptor<T>,
    out_width: usize,
    out_height: usize,
    cfg: &EvalConfig,
) -> Result<SaliencyMap> {
    cfg.validate()?;
    if out_width == 0 || out_height == 0 {
        return Err(Error::invalid(format!("saliency target {out_width}x{out_height}")));
    }
    let grid = similarity_map(descriptor, features, &cfg.loss_config())?;
    let raw: Vec<f64> = grid
        .scores
        .data()
        .iter()
        .map(|v| v.to_f64().expect("similarity scores are finite"))
        .collect();
    let up = bilinear_upsample(&raw, grid.height, grid.width, out_height, out_width);
    let min = up.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = up.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scores = if max > min {
        up.iter().map(|v| (v - min) / (max - min)).collect()
    } else {
        vec![0.0; up.len()]
    };
    let mut map = SaliencyMap::new(out_width, out_height, scores)?;
    map.descriptor_provenance = descriptor.provenance.clone();
    Ok(map)
}

/// Intersection over union of two masks; both empty counts as full agreement.
pub fn region_iou(pred: &MaskImage, gt: &MaskImage) -> Result<f64> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(Error::shape(format!(
            "mask dimensions {}x{} vs {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    let mut intersection = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.pixels().iter().zip(gt.pixels()) {
        intersection += (p && g) as usize;
        union += (p || g) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(intersection as f64 / union as f64)
}

/// Ranks every pixel by score (ties broken by row-major index) and averages
/// precision at each positive pixel's rank.
pub fn pixel_average_precision(saliency: &SaliencyMap, gt: &MaskImage) -> Result<f64> {
    if saliency.width != gt.width() || saliency.height != gt.height() {
        return Err(Error::shape(format!(
            "saliency {}x{} vs ground truth {}x{}",
            saliency.width,
            saliency.height,
            gt.width(),
            gt.height()
        )));
    }
    let positives = gt.count_inside();
    if positives == 0 {
        return Err(Error::invalid("ground truth has no positive pixels"));
    }
    let mut order: Vec<usize> = (0..saliency.scores.len()).collect();
    order.sort_by(|&a, &b| {
        saliency.scores[b]
            .partial_cmp(&saliency.scores[a])
            .expect("saliency scores are finite")
            .then(a.cmp(&b))
    });
    let mut true_positives = 0usize;
    let mut sum = 0.0;
    for (rank0, &pixel) in order.iter().enumerate() {
        if gt.pixels()[pixel] {
            true_positives += 1;
            sum += true_positives as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// Fixed-shape prediction baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    FullSquare,
    FullCircle,
}

impl BaselineKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::FullSquare => "full-square",
            BaselineKind::FullCircle => "full-circle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full-square" => Ok(BaselineKind::FullSquare),
            "full-circle" => Ok(BaselineKind::FullCircle),
            other => Err(Error::invalid(format!("unknown baseline `{other}`"))),
        }
    }
}

/// Square covers everything; the circle covers pixels whose center lies
/// within min(w, h)/2 of the image center ((w-1)/2, (h-1)/2).
pub fn baseline_mask(kind: BaselineKind, width: usize, height: usize) -> Result<MaskImage> {
    if width == 0 || height == 0 {
        return Err(Error::invalid(format!("baseline dimensions {width}x{height}")));
    }
    match kind {
        BaselineKind::FullSquare => Ok(MaskImage::filled(width, height, true)),
        BaselineKind::FullCircle => {
            let cx = (width as f64 - 1.0) / 2.0;
            let cy = (height as f64 - 1.0) / 2.0;
            let radius = width.min(height) as f64 / 2.0;
            let r2 = radius * radius;
            let mut mask = MaskImage::filled(width, height, false);
            for y in 0..height {
                for x in 0..width {
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    if dx * dx + dy * dy <= r2 {
                        mask.set(x, y, true);
                    }
                }
            }
            Ok(mask)
        }
    }
}

/// One localization case: the image's feature map, the tactile descriptor to
/// ground, and the annotated region.
#[derive(Debug, Clone)]
pub struct LocalizationSample<T: Scalar> {
    pub sample_id: String,
    pub category: String,
    pub features: FeatureMap<T>,
    pub descriptor: TactileDescriptor<T>,
    pub gt: MaskImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryMetrics {
    pub map_percent: f64,
    pub miou_percent: f64,
    pub sample_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub map_percent: f64,
    pub miou_percent: f64,
    pub iiou_percent: Option<f64>,
    pub per_category: BTreeMap<String, CategoryMetrics>,
    pub sample_count: usize,
    pub threshold: f64,
    pub predictor: String,
    pub upsampling: String,
    pub ap_flavor: String,
    pub frame_position: Option<String>,
}

impl EvalReport {
    /// Line-delimited `key=value` records.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        write!(
            out,
            "kind=config\tthreshold={}\tpredictor={}\tupsampling={}\tap={}",
            fmt_metric(self.threshold),
            self.predictor,
            self.upsampling,
            self.ap_flavor
        )
        .expect("string write");
        if let Some(pos) = &self.frame_position {
            write!(out, "\tframe_position={pos}").expect("string write");
        }
        out.push('\n');
        write!(
            out,
            "kind=overall\tsamples={}\tmap={}\tmiou={}",
            self.sample_count,
            fmt_metric(self.map_percent),
            fmt_metric(self.miou_percent)
        )
        .expect("string write");
        if let Some(iiou) = self.iiou_percent {
            write!(out, "\tiiou={}", fmt_metric(iiou)).expect("string write");
        }
        out.push('\n');
        for (category, m) in &self.per_category {
            writeln!(
                out,
                "kind=category\tcategory={category}\tsamples={}\tmap={}\tmiou={}",
                m.sample_count,
                fmt_metric(m.map_percent),
                fmt_metric(m.miou_percent)
            )
            .expect("string write");
        }
        out
    }

    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let pos = self.frame_position.as_deref().unwrap_or("-");
        writeln!(
            out,
            "predictor={} threshold={} frames={pos} samples={}",
            self.predictor, self.threshold, self.sample_count
        )
        .expect("string write");
        writeln!(out, "{:<16} {:>8} {:>8} {:>8}", "category", "n", "mAP", "mIoU").expect("fmt");
        for (category, m) in &self.per_category {
            writeln!(
                out,
                "{category:<16} {:>8} {:>8.2} {:>8.2}",
                m.sample_count, m.map_percent, m.miou_percent
            )
            .expect("fmt");
        }
        write!(
            out,
            "{:<16} {:>8} {:>8.2} {:>8.2}",
            "overall", self.sample_count, self.map_percent, self.miou_percent
        )
        .expect("fmt");
        if let Some(iiou) = self.iiou_percent {
            write!(out, "  IIoU {iiou:.2}").expect("fmt");
        }
        out.push('\n');
        out
    }
}

fn fmt_metric(v: f64) -> String {
    format!("{v:.6}")
}

fn sample_saliency<T: Scalar>(
    sample: &LocalizationSample<T>,
    cfg: &EvalConfig,
) -> Result<SaliencyMap> {
    match cfg.baseline {
        None => {
            let mut map = compute_saliency(
                &sample.features,
                &sample.descriptor,
                sample.gt.width(),
                sample.gt.height(),
                cfg,
            )?;
            map.sample_id = Some(sample.sample_id.clone());
            Ok(map)
        }
        Some(kind) => {
            let mask = baseline_mask(kind, sample.gt.width(), sample.gt.height())?;
            Ok(SaliencyMap::from_mask(&mask))
        }
    }
}

/// Scores every sample (AP of the saliency ranking, IoU of the thresholded
/// mask) and aggregates per category and overall as percentages.
pub fn evaluate_localization<T: Scalar>(
    samples: &[LocalizationSample<T>],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("localization dataset is empty"));
    }
    let mut per_category: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    let mut ap_sum = 0.0;
    let mut iou_sum = 0.0;
    for sample in samples {
        let saliency = sample_saliency(sample, cfg)?;
        let ap = pixel_average_precision(&saliency, &sample.gt).map_err(|e| {
            Error::invalid(format!("sample `{}`: {e}", sample.sample_id))
        })?;
        let iou = region_iou(&saliency.binarize(cfg.threshold), &sample.gt)?;
        ap_sum += ap;
        iou_sum += iou;
        let entry = per_category.entry(sample.category.clone()).or_insert((0.0, 0.0, 0));
        entry.0 += ap;
        entry.1 += iou;
        entry.2 += 1;
    }
    let n = samples.len() as f64;
    let per_category = per_category
        .into_iter()
        .map(|(category, (ap, iou, count))| {
            let metrics = CategoryMetrics {
                map_percent: 100.0 * ap / count as f64,
                miou_percent: 100.0 * iou / count as f64,
                sample_count: count,
            };
            (category, metrics)
        })
        .collect();
    Ok(EvalReport {
        map_percent: 100.0 * ap_sum / n,
        miou_percent: 100.0 * iou_sum / n,
        iiou_percent: None,
        per_category,
        sample_count: samples.len(),
        threshold: cfg.threshold,
        predictor: cfg.predictor().to_string(),
        upsampling: UPSAMPLING_MODE.to_string(),
        ap_flavor: AP_FLAVOR.to_string(),
        frame_position: None,
    })
}

/// One interactive case: an image touched twice, with a descriptor and an
/// annotated region per touch.
#[derive(Debug, Clone)]
pub struct InteractiveSample<T: Scalar> {
    pub sample_id: String,
    pub features: FeatureMap<T>,
    pub categories: [String; 2],
    pub descriptors: [TactileDescriptor<T>; 2],
    pub masks: [MaskImage; 2],
}

impl<T: Scalar> InteractiveSample<T> {
    pub fn validate(&self) -> Result<()> {
        if self.masks[0].width() != self.masks[1].width()
            || self.masks[0].height() != self.masks[1].height()
        {
            return Err(Error::shape(format!(
                "sample `{}`: mask dimensions differ",
                self.sample_id
            )));
        }
        if self.categories[0] == self.categories[1] {
            return Err(Error::invalid(format!(
                "sample `{}`: both touches are category `{}`",
                self.sample_id, self.categories[0]
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractiveReport {
    pub iiou_percent: f64,
    pub successes: usize,
    pub sample_count: usize,
    pub threshold: f64,
}

impl InteractiveReport {
    /// Line-delimited `key=value` records.
    pub fn to_records(&self) -> String {
        format!(
            "kind=config\tthreshold={}\nkind=overall\tsamples={}\tsuccesses={}\tiiou={}\n",
            fmt_metric(self.threshold),
            self.sample_count,
            self.successes,
            fmt_metric(self.iiou_percent)
        )
    }
}

/// A sample succeeds when both touch regions are recovered with IoU > 0.5;
/// IIoU is the success percentage.
pub fn evaluate_interactive<T: Scalar>(
    samples: &[InteractiveSample<T>],
    cfg: &EvalConfig,
) -> Result<InteractiveReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("interactive dataset is empty"));
    }
    let mut successes = 0usize;
    for sample in samples {
        sample.validate()?;
        let mut both = true;
        for (descriptor, gt) in sample.descriptors.iter().zip(&sample.masks) {
            let saliency = match cfg.baseline {
                None => compute_saliency(
                    &sample.features,
                    descriptor,
                    gt.width(),
                    gt.height(),
                    cfg,
                )?,
                Some(kind) => {
                    SaliencyMap::from_mask(&baseline_mask(kind, gt.width(), gt.height())?)
                }
            };
            let iou = region_iou(&saliency.binarize(cfg.threshold), gt)?;
            both &= iou > 0.5;
        }
        successes += both as usize;
    }
    Ok(InteractiveReport {
        iiou_percent: 100.0 * successes as f64 / samples.len() as f64,
        successes,
        sample_count: samples.len(),
        threshold: cfg.threshold,
    })
}

/// One localization case carrying the descriptor of every frame in its touch
/// instance, in frame order.
#[derive(Debug, Clone)]
pub struct RobustnessSample<T: Scalar> {
    pub sample_id: String,
    pub category: String,
    pub features: FeatureMap<T>,
    pub gt: MaskImage,
    pub frame_descriptors: Vec<TactileDescriptor<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessReport {
    pub start: EvalReport,
    pub middle: EvalReport,
    pub end: EvalReport,
}

impl RobustnessReport {
    pub fn at(&self, pos: FramePosition) -> &EvalReport {
        match pos {
            FramePosition::Start => &self.start,
            FramePosition::Middle => &self.middle,
            FramePosition::End => &self.end,
        }
    }
}

fn position_descriptor<T: Scalar>(
    descs: &[TactileDescriptor<T>],
    pos: FramePosition,
) -> Result<TactileDescriptor<T>> {
    match pos {
        FramePosition::Start => Ok(descs[0].clone()),
        FramePosition::End => Ok(descs[descs.len() - 1].clone()),
        FramePosition::Middle if descs.len() > 2 => {
            TactileDescriptor::mean_of(&descs[1..descs.len() - 1])
        }
        FramePosition::Middle => Ok(descs[descs.len() / 2].clone()),
    }
}

/// Runs localization three times, once per frame position. Start/End use the
/// endpoint frames; Middle averages all interior frames (T > 2) or falls back
/// to the floor(T/2) frame.
pub fn robustness_report<T: Scalar>(
    samples: &[RobustnessSample<T>],
    cfg: &EvalConfig,
) -> Result<RobustnessReport> {
    if samples.is_empty() {
        return Err(Error::invalid("robustness dataset is empty"));
    }
    if let Some(bad) = samples.iter().find(|s| s.frame_descriptors.is_empty()) {
        return Err(Error::invalid(format!(
            "sample `{}` has no frame descriptors",
            bad.sample_id
        )));
    }
    let mut reports = Vec::with_capacity(3);
    for pos in FramePosition::ALL {
        let localized: Vec<LocalizationSample<T>> = samples
            .iter()
            .map(|s| {
                Ok(LocalizationSample {
                    sample_id: s.sample_id.clone(),
                    category: s.category.clone(),
                    features: s.features.clone(),
                    descriptor: position_descriptor(&s.frame_descriptors, pos)?,
                    gt: s.gt.clone(),
                })
            })
            .collect::<Result<_>>()?;
        let mut report = evaluate_localization(&localized, cfg)?;
        report.frame_position = Some(pos.as_str().to_string());
        reports.push(report);
    }
    let end = reports.pop().expect("three reports");
    let middle = reports.pop().expect("three reports");
    let start = reports.pop().expect("three reports");
    Ok(RobustnessReport { start, middle, end })
}

/// Writes the saliency map as a grayscale PGM (`round(255 * score)`) and as a
/// red overlay PPM (`round(0.5 * pixel + 0.5 * score * [255, 0, 0])`).
pub fn export_heatmap(
    saliency: &SaliencyMap,
    image: &Raster,
    pgm_path: &Path,
    ppm_path: &Path,
) -> Result<()> {
    if image.width != saliency.width || image.height != saliency.height {
        return Err(Error::shape(format!(
            "image {}x{} vs saliency {}x{}",
            image.width, image.height, saliency.width, saliency.height
        )));
    }
    let gray: Vec<u8> = saliency.scores.iter().map(|s| (255.0 * s).round() as u8).collect();
    write_pgm(pgm_path, &Raster::new(saliency.width, saliency.height, 1, gray)?)?;

    let mut rgb = Vec::with_capacity(saliency.scores.len() * 3);
    for (i, s) in saliency.scores.iter().enumerate() {
        let (x, y) = (i % saliency.width, i / saliency.width);
        let pixel = |c: usize| -> f64 {
            if image.channels == 3 {
                image.get(x, y, c) as f64
            } else {
                image.get(x, y, 0) as f64
            }
        };
        rgb.push((0.5 * pixel(0) + 0.5 * s * 255.0).round().min(255.0) as u8);
        rgb.push((0.5 * pixel(1)).round() as u8);
        rgb.push((0.5 * pixel(2)).round() as u8);
    }
    write_ppm(ppm_path, &Raster::new(saliency.width, saliency.height, 3, rgb)?)
}

#[cfg(test)]
mod tests;
