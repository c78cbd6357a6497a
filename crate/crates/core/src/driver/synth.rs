//! Deterministic synthetic corpus generator.
//!
//! Each material category gets a signature direction in feature space.
//! Touch instances emit tactile frames carrying their category signature —
//! blended toward random noise at the first and last frame, modeling a
//! sensor being pressed on and lifted off — alongside clean visual
//! close-ups. Scenes tile 2–3 signatures in rectangular regions with
//! matching ground-truth masks, so localization quality is measurable
//! exactly. Every draw is keyed by (seed, purpose, counters): regenerating
//! with the same seed reproduces every byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{manifest_to_string, MaskImage, SampleRecord};
use crate::driver::data::{
    eval_manifest_to_string, interactive_manifest_to_string, EvalRecord, InteractiveRecord,
};
use crate::encoders::{save_feature_map, FeatureMap};
use crate::error::{Error, Result};
use crate::rng::{derive_rng, tag};

/// Geometry and noise knobs of a generated corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpusSpec {
    /// Number of material categories K.
    pub categories: usize,
    pub instances_per_category: usize,
    /// Frames per touch instance T.
    pub frames_per_instance: usize,
    /// Scene feature-grid side.
    pub grid: usize,
    /// Tactile feature-grid side.
    pub tactile_grid: usize,
    /// Close-up (in-domain visual and web image) feature-grid side.
    pub visual_grid: usize,
    /// Feature channels D.
    pub channels: usize,
    /// Endpoint blend toward noise, 0 (clean) ..= 1 (pure noise).
    pub noise_level: f64,
    /// Per-instance deviation from the category signature.
    pub instance_jitter: f64,
    /// Per-location texture noise.
    pub patch_jitter: f64,
    pub scenes: usize,
    pub interactive_scenes: usize,
    pub out_domain_per_category: usize,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        SyntheticCorpusSpec {
            categories: 4,
            instances_per_category: 3,
            frames_per_instance: 5,
            grid: 14,
            tactile_grid: 4,
            visual_grid: 8,
            channels: 8,
            noise_level: 0.6,
            instance_jitter: 0.3,
            patch_jitter: 0.05,
            scenes: 6,
            interactive_scenes: 5,
            out_domain_per_category: 2,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.categories < 2 {
            return Err(Error::invalid(format!(
                "synthetic corpus needs at least 2 categories, got {}",
                self.categories
            )));
        }
        if self.instances_per_category == 0 || self.frames_per_instance == 0 {
            return Err(Error::invalid("instances and frames per instance must be at least 1"));
        }
        if self.grid < 2 || self.tactile_grid == 0 || self.visual_grid == 0 {
            return Err(Error::invalid("scene grid must be >= 2 and close-up grids >= 1"));
        }
        if self.channels == 0 {
            return Err(Error::invalid("feature channels must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::invalid(format!(
                "noise level must lie in [0, 1], got {}",
                self.noise_level
            )));
        }
        if self.instance_jitter < 0.0 || self.patch_jitter < 0.0 {
            return Err(Error::invalid("jitter levels must be non-negative"));
        }
        if self.scenes < 2 {
            return Err(Error::invalid(format!("need at least 2 scenes, got {}", self.scenes)));
        }
        if self.interactive_scenes == 0 || self.out_domain_per_category == 0 {
            return Err(Error::invalid(
                "interactive scenes and out-domain images per category must be at least 1",
            ));
        }
        Ok(())
    }

    /// Human-readable category names, stable across runs.
    pub fn category_names(&self) -> Vec<String> {
        const BASE: [&str; 8] =
            ["brick", "grass", "wood", "metal", "fabric", "glass", "soil", "plastic"];
        (0..self.categories)
            .map(|c| {
                if c < BASE.len() {
                    BASE[c].to_string()
                } else {
                    format!("material{c}")
                }
            })
            .collect()
    }
}

/// Paths and counts of everything a generation run wrote.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutputs {
    pub out_dir: PathBuf,
    pub train_manifest: PathBuf,
    pub out_domain_manifest: PathBuf,
    pub eval_manifest: PathBuf,
    pub interactive_manifest: PathBuf,
    pub categories: Vec<String>,
    pub tactile_frames: usize,
    pub scene_count: usize,
    pub mask_count: usize,
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| gauss(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// K pairwise non-collinear unit signatures in R^D. When K ≤ D the draws
/// are orthonormalized for maximal separation; otherwise raw unit draws are
/// kept and near-collinear pairs are rejected as a signature collision.
pub fn category_signatures(spec: &SyntheticCorpusSpec, seed: u64) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let k = spec.categories;
    let d = spec.channels;
    let mut rng = derive_rng(seed, &[tag("synth"), tag("signatures")]);
    let mut sigs: Vec<Vec<f64>> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut v = unit_vector(d, &mut rng);
        if k <= d {
            for prev in &sigs {
                let coef = dot(&v, prev);
                for (x, p) in v.iter_mut().zip(prev) {
                    *x -= coef * p;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-6 {
                return Err(Error::invalid("signature collision: draws are linearly dependent"));
            }
            for x in &mut v {
                *x /= norm;
            }
        }
        sigs.push(v);
    }
    for a in 0..k {
        for b in a + 1..k {
            if dot(&sigs[a], &sigs[b]).abs() > 0.999 {
                return Err(Error::invalid(format!(
                    "signature collision: categories {a} and {b} are nearly collinear"
                )));
            }
        }
    }
    Ok(sigs)
}

fn blend(a: &[f64], b: &[f64], alpha: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (1.0 - alpha) * x + alpha * y).collect()
}

/// Feature map whose every location carries `base` plus per-location noise
/// from `noise_rng`, laid out channel-major.
fn textured_map(
    base_of: impl Fn(usize) -> Vec<f64>,
    side: usize,
    channels: usize,
    patch_jitter: f64,
    rng: &mut ChaCha8Rng,
) -> Result<FeatureMap<f64>> {
    let locations = side * side;
    let mut data = vec![0.0; channels * locations];
    for loc in 0..locations {
        let base = base_of(loc);
        for ch in 0..channels {
            data[ch * locations + loc] = base[ch] + patch_jitter * gauss(rng);
        }
    }
    FeatureMap::new(channels, side, side, data)
}

fn write_features(path: &Path, map: &FeatureMap<f64>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    save_feature_map(path, map)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A horizontal or vertical slicing of the grid into rectangular regions.
struct Layout {
    /// Per-region (x0, y0, x1, y1), exclusive upper bounds, covering the grid.
    regions: Vec<(usize, usize, usize, usize)>,
}

fn slice_layout(grid: usize, cuts: &[usize], vertical: bool) -> Layout {
    let mut bounds = Vec::with_capacity(cuts.len() + 2);
    bounds.push(0);
    bounds.extend_from_slice(cuts);
    bounds.push(grid);
    let regions = bounds
        .windows(2)
        .map(|w| {
            if vertical {
                (w[0], 0, w[1], grid)
            } else {
                (0, w[0], grid, w[1])
            }
        })
        .collect();
    Layout { regions }
}

/// Random 2- or 3-region slicing with every region at least `min_span` wide.
fn draw_layout(grid: usize, max_regions: usize, rng: &mut ChaCha8Rng) -> Layout {
    let min_span = (grid / 4).max(1);
    let three_ok = max_regions >= 3 && grid >= 3 * min_span + 1;
    let n = if three_ok && rng.gen_range(0..2) == 1 { 3 } else { 2 };
    let vertical = rng.gen_range(0..2) == 0;
    let cuts = if n == 2 {
        vec![rng.gen_range(min_span..=grid - min_span)]
    } else {
        let c1 = rng.gen_range(min_span..=grid - 2 * min_span);
        let c2 = rng.gen_range(c1 + min_span..=grid - min_span);
        vec![c1, c2]
    };
    slice_layout(grid, &cuts, vertical)
}

fn region_mask(grid: usize, region: (usize, usize, usize, usize)) -> MaskImage {
    let mut mask = MaskImage::filled(grid, grid, false);
    for y in region.1..region.3 {
        for x in region.0..region.2 {
            mask.set(x, y, true);
        }
    }
    mask
}

/// Generates the full corpus under `out_dir`. See the module docs for the
/// layout; all manifests reference files relative to `out_dir`.
pub fn generate_synthetic_corpus(
    spec: &SyntheticCorpusSpec,
    seed: u64,
    out_dir: &Path,
) -> Result<SynthOutputs> {
    spec.validate()?;
    let signatures = category_signatures(spec, seed)?;
    let names = spec.category_names();
    let d = spec.channels;
    let t_len = spec.frames_per_instance;
    let alpha = spec.noise_level;

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut tactile_frames = 0usize;
    let mut mask_count = 0usize;

    // Touch instances: tactile frames plus per-frame visual close-ups.
    let mut train_records = Vec::new();
    // Middle-frame tactile file per (category, instance), for interactive sets.
    let mut middle_frame: BTreeMap<(usize, usize), String> = BTreeMap::new();
    for c in 0..spec.categories {
        for i in 0..spec.instances_per_category {
            let ci = (c as u64, i as u64);
            let mut dir_rng = derive_rng(seed, &[tag("synth"), tag("instance-dir"), ci.0, ci.1]);
            let jitter_dir = unit_vector(d, &mut dir_rng);
            let mut u: Vec<f64> = signatures[c]
                .iter()
                .zip(&jitter_dir)
                .map(|(s, g)| s + spec.instance_jitter * g)
                .collect();
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in &mut u {
                *x /= norm;
            }
            // One texture pattern per instance: with zero endpoint noise all
            // frames of an instance are bit-identical.
            let mut pattern_rng =
                derive_rng(seed, &[tag("synth"), tag("tactile-pattern"), ci.0, ci.1]);
            let pattern: Vec<Vec<f64>> = (0..spec.tactile_grid * spec.tactile_grid)
                .map(|_| (0..d).map(|_| gauss(&mut pattern_rng)).collect())
                .collect();

            for t in 0..t_len {
                let endpoint = t_len > 1 && (t == 0 || t == t_len - 1);
                let base = if endpoint && alpha > 0.0 {
                    // Partial contact reads the piece's surface geometry more
                    // than the material's bulk texture: endpoints drift along
                    // the instance's own appearance direction, plus a dash of
                    // fresh per-endpoint noise so press and release differ.
                    let mut noise_rng = derive_rng(
                        seed,
                        &[tag("synth"), tag("endpoint-noise"), ci.0, ci.1, t as u64],
                    );
                    let fresh = unit_vector(d, &mut noise_rng);
                    let mut drift: Vec<f64> = jitter_dir
                        .iter()
                        .zip(&fresh)
                        .map(|(g, f)| g + 0.5 * f)
                        .collect();
                    let norm = drift.iter().map(|x| x * x).sum::<f64>().sqrt();
                    for x in &mut drift {
                        *x /= norm;
                    }
                    blend(&u, &drift, alpha)
                } else {
                    u.clone()
                };
                let side = spec.tactile_grid;
                let locations = side * side;
                let mut data = vec![0.0; d * locations];
                for loc in 0..locations {
                    for ch in 0..d {
                        data[ch * locations + loc] =
                            base[ch] + spec.patch_jitter * pattern[loc][ch];
                    }
                }
                let tactile = FeatureMap::new(d, side, side, data)?;
                let tactile_rel = format!("features/t-{c}-{i}-{t}.vtft");
                write_features(&out_dir.join(&tactile_rel), &tactile)?;
                tactile_frames += 1;
                if t == t_len / 2 {
                    middle_frame.insert((c, i), tactile_rel.clone());
                }

                let mut visual_rng = derive_rng(
                    seed,
                    &[tag("synth"), tag("visual-frame"), ci.0, ci.1, t as u64],
                );
                let visual = textured_map(
                    |_| u.clone(),
                    spec.visual_grid,
                    d,
                    spec.patch_jitter,
                    &mut visual_rng,
                )?;
                let visual_rel = format!("features/v-{c}-{i}-{t}.vtft");
                write_features(&out_dir.join(&visual_rel), &visual)?;

                train_records.push(SampleRecord {
                    sample_id: format!("s{c}-{i}-{t}"),
                    video_id: format!("vid{c}-{i}"),
                    frame_index: t as u64,
                    category: names[c].clone(),
                    image_path: visual_rel,
                    tactile_path: Some(tactile_rel),
                    split: Some("train".to_string()),
                });
            }
        }
    }

    // Out-domain web images: same materials, fresh appearance jitter, no
    // tactile counterpart.
    let mut out_records = Vec::new();
    for c in 0..spec.categories {
        for j in 0..spec.out_domain_per_category {
            let cj = (c as u64, j as u64);
            let mut dir_rng = derive_rng(seed, &[tag("synth"), tag("web-dir"), cj.0, cj.1]);
            let jitter_dir = unit_vector(d, &mut dir_rng);
            let mut w: Vec<f64> = signatures[c]
                .iter()
                .zip(&jitter_dir)
                .map(|(s, g)| s + spec.instance_jitter * g)
                .collect();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in &mut w {
                *x /= norm;
            }
            let mut pattern_rng = derive_rng(seed, &[tag("synth"), tag("web-pattern"), cj.0, cj.1]);
            let map = textured_map(
                |_| w.clone(),
                spec.visual_grid,
                d,
                spec.patch_jitter,
                &mut pattern_rng,
            )?;
            let rel = format!("features/w-{c}-{j}.vtft");
            write_features(&out_dir.join(&rel), &map)?;
            out_records.push(SampleRecord {
                sample_id: format!("web{c}-{j}"),
                video_id: format!("web{c}-{j}"),
                frame_index: 0,
                category: names[c].clone(),
                image_path: rel,
                tactile_path: None,
                split: None,
            });
        }
    }

    // Held-out scenes: rectangular material regions with ground-truth masks.
    // Region categories rotate with the scene index so every category is
    // evaluated; the traced instance rotates likewise.
    let mut eval_records = Vec::new();
    for s in 0..spec.scenes {
        let mut layout_rng = derive_rng(seed, &[tag("synth"), tag("scene-layout"), s as u64]);
        let layout = draw_layout(spec.grid, spec.categories.min(3), &mut layout_rng);
        let cats: Vec<usize> =
            (0..layout.regions.len()).map(|r| (s + r) % spec.categories).collect();
        let locations = spec.grid * spec.grid;
        let mut owner = vec![0usize; locations];
        for (r, region) in layout.regions.iter().enumerate() {
            for y in region.1..region.3 {
                for x in region.0..region.2 {
                    owner[y * spec.grid + x] = r;
                }
            }
        }
        let mut pattern_rng = derive_rng(seed, &[tag("synth"), tag("scene-pattern"), s as u64]);
        let map = textured_map(
            |loc| signatures[cats[owner[loc]]].clone(),
            spec.grid,
            d,
            spec.patch_jitter,
            &mut pattern_rng,
        )?;
        let scene_rel = format!("features/scene-{s}.vtft");
        write_features(&out_dir.join(&scene_rel), &map)?;

        for (r, region) in layout.regions.iter().enumerate() {
            let c = cats[r];
            let mask = region_mask(spec.grid, *region);
            let mask_rel = format!("masks/scene-{s}-{}.pgm", names[c]);
            let mask_path = out_dir.join(&mask_rel);
            if let Some(parent) = mask_path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            crate::corpus::save_mask(&mask_path, &mask)?;
            mask_count += 1;
            let i = (s + r) % spec.instances_per_category;
            eval_records.push(EvalRecord {
                sample_id: format!("eval{s}-{}", names[c]),
                category: names[c].clone(),
                image_path: scene_rel.clone(),
                mask_path: mask_rel,
                instance_id: format!("vid{c}-{i}:0-{}", t_len - 1),
            });
        }
    }

    // Interactive scenes: always two regions, two touch queries.
    let mut interactive_records = Vec::new();
    for s in 0..spec.interactive_scenes {
        let mut layout_rng =
            derive_rng(seed, &[tag("synth"), tag("interactive-layout"), s as u64]);
        let layout = draw_layout(spec.grid, 2, &mut layout_rng);
        let a = s % spec.categories;
        let b = (a + 1 + s % (spec.categories - 1)) % spec.categories;
        let cats = [a, b];
        let locations = spec.grid * spec.grid;
        let mut owner = vec![0usize; locations];
        for (r, region) in layout.regions.iter().enumerate() {
            for y in region.1..region.3 {
                for x in region.0..region.2 {
                    owner[y * spec.grid + x] = r;
                }
            }
        }
        let mut pattern_rng =
            derive_rng(seed, &[tag("synth"), tag("interactive-pattern"), s as u64]);
        let map = textured_map(
            |loc| signatures[cats[owner[loc]]].clone(),
            spec.grid,
            d,
            spec.patch_jitter,
            &mut pattern_rng,
        )?;
        let scene_rel = format!("features/iscene-{s}.vtft");
        write_features(&out_dir.join(&scene_rel), &map)?;

        let mut mask_rels = Vec::with_capacity(2);
        for (r, region) in layout.regions.iter().enumerate() {
            let mask = region_mask(spec.grid, *region);
            let label = ["a", "b"][r];
            let mask_rel = format!("masks/iscene-{s}-{label}.pgm");
            crate::corpus::save_mask(&out_dir.join(&mask_rel), &mask)?;
            mask_count += 1;
            mask_rels.push(mask_rel);
        }
        let pick = |c: usize, s: usize| -> String {
            let i = s % spec.instances_per_category;
            middle_frame[&(c, i)].clone()
        };
        interactive_records.push(InteractiveRecord {
            sample_id: format!("iscene{s}"),
            image_path: scene_rel,
            category_a: names[a].clone(),
            tactile_a_path: pick(a, s),
            mask_a_path: mask_rels[0].clone(),
            category_b: names[b].clone(),
            tactile_b_path: pick(b, s + 1),
            mask_b_path: mask_rels[1].clone(),
        });
    }

    let header = |what: &str| format!("# {what}\n# seed={seed}\n");
    let train_manifest = out_dir.join("train.manifest");
    write_text(
        &train_manifest,
        &format!("{}{}", header("touch-instance samples"), manifest_to_string(&train_records)?),
    )?;
    let out_domain_manifest = out_dir.join("out-domain.manifest");
    write_text(
        &out_domain_manifest,
        &format!("{}{}", header("web material images"), manifest_to_string(&out_records)?),
    )?;
    let eval_manifest = out_dir.join("eval.manifest");
    write_text(
        &eval_manifest,
        &format!("{}{}", header("held-out scenes"), eval_manifest_to_string(&eval_records)?),
    )?;
    let interactive_manifest = out_dir.join("interactive.manifest");
    write_text(
        &interactive_manifest,
        &format!(
            "{}{}",
            header("interactive scenes"),
            interactive_manifest_to_string(&interactive_records)?
        ),
    )?;

    let mut meta = String::new();
    let _ = writeln!(meta, "seed={seed}");
    let _ = writeln!(meta, "categories={}", names.join(","));
    let _ = writeln!(meta, "tactile_frames={tactile_frames}");
    let _ = writeln!(meta, "scenes={}", spec.scenes);
    let _ = writeln!(meta, "interactive_scenes={}", spec.interactive_scenes);
    write_text(&out_dir.join("corpus.meta"), &meta)?;

    Ok(SynthOutputs {
        out_dir: out_dir.to_path_buf(),
        train_manifest,
        out_domain_manifest,
        eval_manifest,
        interactive_manifest,
        categories: names,
        tactile_frames,
        scene_count: spec.scenes,
        mask_count,
    })
}
