//! Corpus data model: sample manifests, touch instances, video-disjoint
//! splits, binary masks, duplicate removal, and prompt-based filtering.

mod dedup;
mod instances;
mod prompts;

pub use dedup::{dedup_by_content_hash, DedupOutcome, DroppedDuplicate};
pub use instances::{extract_touch_instances, split_by_video, TouchInstance};
pub use prompts::{
    emit_concept_query_templates, filter_by_prompt_argmax, FilterOutcome, Prompt, PromptSet,
    RejectedImage,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{read_pgm, write_pgm, Raster};

/// One captured frame: a video/frame coordinate with its image and, for
/// in-domain data, the tactile signal recorded at the same moment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub sample_id: String,
    pub video_id: String,
    pub frame_index: u64,
    pub category: String,
    pub image_path: String,
    /// Absent for out-domain images, which have no tactile counterpart.
    pub tactile_path: Option<String>,
    pub split: Option<String>,
}

const REQUIRED_KEYS: [&str; 5] = ["sample_id", "video_id", "frame_index", "category", "image_path"];
const OPTIONAL_KEYS: [&str; 2] = ["tactile_path", "split"];

fn field_value(value: &str, key: &str, origin: &Path, line: usize) -> Result<String> {
    if value.is_empty() {
        return Err(Error::parse(origin, line, format!("empty value for `{key}`")));
    }
    Ok(value.to_string())
}

/// Parses manifest text: one record per line, tab-separated `key=value`
/// fields. Blank lines and `#` comments are skipped. `origin` labels errors.
pub fn manifest_from_str(text: &str, origin: &Path) -> Result<Vec<SampleRecord>> {
    let mut records = Vec::new();
    let mut seen: BTreeMap<(String, u64), usize> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
        for part in line.split('\t') {
            let (key, value) = part.split_once('=').ok_or_else(|| {
                Error::parse(origin, line_no, format!("field `{part}` is not key=value"))
            })?;
            if !REQUIRED_KEYS.contains(&key) && !OPTIONAL_KEYS.contains(&key) {
                return Err(Error::parse(origin, line_no, format!("unknown field `{key}`")));
            }
            if fields.insert(key, value).is_some() {
                return Err(Error::parse(origin, line_no, format!("duplicate field `{key}`")));
            }
        }
        for key in REQUIRED_KEYS {
            if !fields.contains_key(key) {
                return Err(Error::parse(origin, line_no, format!("missing field `{key}`")));
            }
        }
        let frame_index: u64 = fields["frame_index"].parse().map_err(|_| {
            Error::parse(
                origin,
                line_no,
                format!("frame_index `{}` is not a non-negative integer", fields["frame_index"]),
            )
        })?;
        let record = SampleRecord {
            sample_id: field_value(fields["sample_id"], "sample_id", origin, line_no)?,
            video_id: field_value(fields["video_id"], "video_id", origin, line_no)?,
            frame_index,
            category: field_value(fields["category"], "category", origin, line_no)?,
            image_path: field_value(fields["image_path"], "image_path", origin, line_no)?,
            tactile_path: fields
                .get("tactile_path")
                .map(|v| field_value(v, "tactile_path", origin, line_no))
                .transpose()?,
            split: fields
                .get("split")
                .map(|v| field_value(v, "split", origin, line_no))
                .transpose()?,
        };
        let coord = (record.video_id.clone(), record.frame_index);
        if let Some(first) = seen.insert(coord, line_no) {
            return Err(Error::parse(
                origin,
                line_no,
                format!(
                    "duplicate (video_id, frame_index) = ({}, {}); first seen on line {first}",
                    record.video_id, record.frame_index
                ),
            ));
        }
        records.push(record);
    }
    Ok(records)
}

pub fn read_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    manifest_from_str(&text, path)
}

fn check_field(value: &str, key: &str, id: &str) -> Result<()> {
    if value.is_empty() {
        return Err(Error::invalid(format!("record `{id}`: empty `{key}`")));
    }
    if value.contains('\t') || value.contains('\n') || value.contains('\r') {
        return Err(Error::invalid(format!(
            "record `{id}`: `{key}` contains a tab or newline"
        )));
    }
    Ok(())
}

pub fn manifest_to_string(records: &[SampleRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        check_field(&r.sample_id, "sample_id", &r.sample_id)?;
        check_field(&r.video_id, "video_id", &r.sample_id)?;
        check_field(&r.category, "category", &r.sample_id)?;
        check_field(&r.image_path, "image_path", &r.sample_id)?;
        write!(
            out,
            "sample_id={}\tvideo_id={}\tframe_index={}\tcategory={}\timage_path={}",
            r.sample_id, r.video_id, r.frame_index, r.category, r.image_path
        )
        .expect("string write");
        if let Some(t) = &r.tactile_path {
            check_field(t, "tactile_path", &r.sample_id)?;
            write!(out, "\ttactile_path={t}").expect("string write");
        }
        if let Some(s) = &r.split {
            check_field(s, "split", &r.sample_id)?;
            write!(out, "\tsplit={s}").expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let text = manifest_to_string(records)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Rejects any record whose category is not in the declared list.
pub fn check_categories(records: &[SampleRecord], declared: &BTreeSet<String>) -> Result<()> {
    for r in records {
        if !declared.contains(&r.category) {
            return Err(Error::invalid(format!(
                "record `{}`: category `{}` is not declared (declared: {})",
                r.sample_id,
                r.category,
                declared.iter().cloned().collect::<Vec<_>>().join(", ")
            )));
        }
    }
    Ok(())
}

/// Binary membership mask over an image; stored on disk as PGM where any
/// nonzero pixel is inside the region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskImage {
    width: usize,
    height: usize,
    inside: Vec<bool>,
}

impl MaskImage {
    pub fn new(width: usize, height: usize, inside: Vec<bool>) -> Result<Self> {
        if inside.len() != width * height {
            return Err(Error::shape(format!(
                "mask payload has {} entries for {width}x{height}",
                inside.len()
            )));
        }
        Ok(MaskImage { width, height, inside })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        MaskImage { width, height, inside: vec![value; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn at(&self, x: usize, y: usize) -> bool {
        self.inside[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.inside[y * self.width + x] = value;
    }

    pub fn count_inside(&self) -> usize {
        self.inside.iter().filter(|&&b| b).count()
    }

    pub fn pixels(&self) -> &[bool] {
        &self.inside
    }
}

pub fn load_mask(path: &Path) -> Result<MaskImage> {
    let raster = read_pgm(path)?;
    let inside = raster.pixels.iter().map(|&p| p != 0).collect();
    MaskImage::new(raster.width, raster.height, inside)
}

pub fn save_mask(path: &Path, mask: &MaskImage) -> Result<()> {
    let pixels = mask.inside.iter().map(|&b| if b { 255 } else { 0 }).collect();
    let raster = Raster::new(mask.width, mask.height, 1, pixels)?;
    write_pgm(path, &raster)
}
