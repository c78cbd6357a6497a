//! Evaluation-side manifests.
//!
//! Scene manifests use the same line grammar as sample manifests:
//! tab-separated `key=value` fields, one record per line, `#` comments and
//! blank lines skipped. Paths are stored relative to the manifest's
//! directory so a corpus can be moved wholesale.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// One localization scene: a scene image scored against the ground-truth
/// mask of one material region. `instance_id` names the touch instance
/// whose frames provide tactile queries for this region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalRecord {
    pub sample_id: String,
    pub category: String,
    pub image_path: String,
    pub mask_path: String,
    pub instance_id: String,
}

const EVAL_KEYS: [&str; 5] = ["sample_id", "category", "image_path", "mask_path", "instance_id"];

/// One interactive scene: two touch queries against one image, each with
/// its own ground-truth mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractiveRecord {
    pub sample_id: String,
    pub image_path: String,
    pub category_a: String,
    pub tactile_a_path: String,
    pub mask_a_path: String,
    pub category_b: String,
    pub tactile_b_path: String,
    pub mask_b_path: String,
}

const INTERACTIVE_KEYS: [&str; 8] = [
    "sample_id",
    "image_path",
    "category_a",
    "tactile_a_path",
    "mask_a_path",
    "category_b",
    "tactile_b_path",
    "mask_b_path",
];

fn parse_fields(
    line: &str,
    keys: &[&str],
    origin: &Path,
    line_no: usize,
) -> Result<Vec<String>> {
    let mut seen: BTreeMap<&str, String> = BTreeMap::new();
    for field in line.split('\t') {
        let (key, value) = field.split_once('=').ok_or_else(|| {
            Error::parse(origin, line_no, format!("field `{field}` is not key=value"))
        })?;
        if !keys.contains(&key) {
            return Err(Error::parse(origin, line_no, format!("unknown field `{key}`")));
        }
        if value.is_empty() {
            return Err(Error::parse(origin, line_no, format!("empty value for `{key}`")));
        }
        if seen.insert(key, value.to_string()).is_some() {
            return Err(Error::parse(origin, line_no, format!("duplicate field `{key}`")));
        }
    }
    keys.iter()
        .map(|k| {
            seen.remove(k)
                .ok_or_else(|| Error::parse(origin, line_no, format!("missing field `{k}`")))
        })
        .collect()
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
}

fn check_value(key: &str, value: &str) -> Result<()> {
    if value.is_empty() || value.contains('\t') || value.contains('\n') {
        return Err(Error::invalid(format!(
            "field `{key}`: value `{value}` is empty or contains separators"
        )));
    }
    Ok(())
}

pub fn eval_manifest_from_str(text: &str, origin: &Path) -> Result<Vec<EvalRecord>> {
    let mut records = Vec::new();
    let mut ids: BTreeMap<String, usize> = BTreeMap::new();
    for (line_no, line) in data_lines(text) {
        let mut v = parse_fields(line, &EVAL_KEYS, origin, line_no)?;
        let record = EvalRecord {
            instance_id: v.pop().unwrap(),
            mask_path: v.pop().unwrap(),
            image_path: v.pop().unwrap(),
            category: v.pop().unwrap(),
            sample_id: v.pop().unwrap(),
        };
        if let Some(prev) = ids.insert(record.sample_id.clone(), line_no) {
            return Err(Error::parse(
                origin,
                line_no,
                format!("duplicate sample_id `{}` (first on line {prev})", record.sample_id),
            ));
        }
        records.push(record);
    }
    Ok(records)
}

pub fn eval_manifest_to_string(records: &[EvalRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        let fields = [
            ("sample_id", &r.sample_id),
            ("category", &r.category),
            ("image_path", &r.image_path),
            ("mask_path", &r.mask_path),
            ("instance_id", &r.instance_id),
        ];
        let mut parts = Vec::with_capacity(fields.len());
        for (k, v) in fields {
            check_value(k, v)?;
            parts.push(format!("{k}={v}"));
        }
        let _ = writeln!(s, "{}", parts.join("\t"));
    }
    Ok(s)
}

pub fn read_eval_manifest(path: &Path) -> Result<Vec<EvalRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    eval_manifest_from_str(&text, path)
}

pub fn interactive_manifest_from_str(text: &str, origin: &Path) -> Result<Vec<InteractiveRecord>> {
    let mut records = Vec::new();
    for (line_no, line) in data_lines(text) {
        let mut v = parse_fields(line, &INTERACTIVE_KEYS, origin, line_no)?;
        let record = InteractiveRecord {
            mask_b_path: v.pop().unwrap(),
            tactile_b_path: v.pop().unwrap(),
            category_b: v.pop().unwrap(),
            mask_a_path: v.pop().unwrap(),
            tactile_a_path: v.pop().unwrap(),
            category_a: v.pop().unwrap(),
            image_path: v.pop().unwrap(),
            sample_id: v.pop().unwrap(),
        };
        if record.category_a == record.category_b {
            return Err(Error::parse(
                origin,
                line_no,
                format!("both touches are `{}`; categories must differ", record.category_a),
            ));
        }
        records.push(record);
    }
    Ok(records)
}

pub fn interactive_manifest_to_string(records: &[InteractiveRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        let fields = [
            ("sample_id", &r.sample_id),
            ("image_path", &r.image_path),
            ("category_a", &r.category_a),
            ("tactile_a_path", &r.tactile_a_path),
            ("mask_a_path", &r.mask_a_path),
            ("category_b", &r.category_b),
            ("tactile_b_path", &r.tactile_b_path),
            ("mask_b_path", &r.mask_b_path),
        ];
        let mut parts = Vec::with_capacity(fields.len());
        for (k, v) in fields {
            check_value(k, v)?;
            parts.push(format!("{k}={v}"));
        }
        let _ = writeln!(s, "{}", parts.join("\t"));
    }
    Ok(s)
}

pub fn read_interactive_manifest(path: &Path) -> Result<Vec<InteractiveRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    interactive_manifest_from_str(&text, path)
}
