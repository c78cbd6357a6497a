//! Orchestration: wiring a trained model to corpora and evaluators.
//!
//! These functions back the CLI subcommands — loading checkpoints,
//! preparing localization/interactive/robustness samples from manifests,
//! computing prototype tables, exporting heatmaps, and running the
//! end-to-end finite-difference check.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::alignment::{graph_batch_loss, TactileDescriptor};
use crate::corpus::load_mask;
use crate::driver::config::{DescriptorSource, RunConfig};
use crate::driver::data::{read_eval_manifest, read_interactive_manifest, EvalRecord};
use crate::driver::model::{Checkpoint, Model, IMAGE_PREFIX, TACTILE_PREFIX};
use crate::driver::synth::write_text;
use crate::driver::train::{load_side_input, LoadedCorpus, SideInput};
use crate::encoders::{encoder_vars, graph_encode, BackboneKind, FeatureMap};
use crate::error::{Error, Result};
use crate::evaluation::{
    compute_saliency, evaluate_interactive, evaluate_localization, export_heatmap,
    robustness_report, EvalReport, InteractiveReport, InteractiveSample, LocalizationSample,
    RobustnessReport, RobustnessSample, SaliencyMap,
};
use crate::numeric::fd::{finite_difference_check, FdReport};
use crate::numeric::graph::Graph;
use crate::numeric::scalar::{c as sc, Scalar};
use crate::pairing::{compute_prototypes, select_frame, FramePosition, PrototypeTable};
use crate::raster::Raster;
use crate::rng::{derive_rng, tag};

/// Loads a checkpoint and validates its parameters against the config.
pub fn model_from_checkpoint<T: Scalar>(config: &RunConfig, path: &Path) -> Result<Model<T>> {
    let ckpt: Checkpoint<T> = Checkpoint::load(path)?;
    Model::from_params(&config.encoder, &config.loss, ckpt.params)
}

fn tactile_descriptor_of<T: Scalar>(
    model: &Model<T>,
    corpus: &LoadedCorpus<T>,
    sample_id: &str,
) -> Result<TactileDescriptor<T>> {
    let input = corpus
        .tactile
        .get(sample_id)
        .ok_or_else(|| Error::invalid(format!("no tactile data loaded for sample `{sample_id}`")))?;
    model.descriptor(input.as_encoder_input())
}

/// Per-category tactile prototypes over the training instances.
pub fn prototype_table<T: Scalar>(
    model: &Model<T>,
    corpus: &LoadedCorpus<T>,
) -> Result<PrototypeTable<T>> {
    compute_prototypes(corpus.pool.instances_by_category(), |sample_id| {
        tactile_descriptor_of(model, corpus, sample_id)
    })
}

/// Serializes a prototype table as one line per (category, position).
pub fn prototype_table_to_string<T: Scalar>(table: &PrototypeTable<T>) -> String {
    let mut s = String::new();
    for (category, protos) in &table.per_category {
        let rows: [(&str, &TactileDescriptor<T>); 4] = [
            ("start", &protos.start),
            ("middle", &protos.middle),
            ("end", &protos.end),
            ("combined", &protos.combined),
        ];
        for (position, desc) in rows {
            let values: Vec<String> = desc
                .values
                .data()
                .iter()
                .map(|v| format!("{:?}", v.to_f64().unwrap()))
                .collect();
            let _ = writeln!(
                s,
                "category={category}\tposition={position}\tinstances={}\tvalues={}",
                protos.instance_count,
                values.join(",")
            );
        }
    }
    s
}

fn encode_scene<T: Scalar>(
    model: &Model<T>,
    config: &RunConfig,
    image_path: &str,
) -> Result<FeatureMap<T>> {
    let input: SideInput<T> =
        load_side_input(&config.data_dir.join(image_path), config.encoder.backbone)?;
    model.encode_visual(input.as_encoder_input())
}

fn eval_records(config: &RunConfig) -> Result<Vec<EvalRecord>> {
    read_eval_manifest(&config.data_dir.join("eval.manifest"))
}

fn record_descriptor<T: Scalar>(
    model: &Model<T>,
    corpus: &LoadedCorpus<T>,
    prototypes: Option<&PrototypeTable<T>>,
    record: &EvalRecord,
    source: DescriptorSource,
) -> Result<TactileDescriptor<T>> {
    match source {
        DescriptorSource::Prototype => {
            let table = prototypes.expect("prototype table prepared for prototype evaluation");
            let protos = table.per_category.get(&record.category).ok_or_else(|| {
                Error::invalid(format!(
                    "no prototype for category `{}` (sample `{}`)",
                    record.category, record.sample_id
                ))
            })?;
            Ok(protos.combined.clone())
        }
        DescriptorSource::Frame(pos) => {
            let instance = corpus.pool.instance(&record.instance_id)?;
            let frame = select_frame(instance, pos)?;
            tactile_descriptor_of(model, corpus, frame)
        }
    }
}

/// Localization samples per the configured descriptor source: scene
/// features through the image encoder, tactile queries through the tactile
/// encoder (or the category prototype), masks from disk.
pub fn prepare_localization_samples<T: Scalar>(
    config: &RunConfig,
    model: &Model<T>,
    corpus: &LoadedCorpus<T>,
) -> Result<Vec<LocalizationSample<T>>> {
    let records = eval_records(config)?;
    let prototypes = match config.eval_descriptor {
        DescriptorSource::Prototype => Some(prototype_table(model, corpus)?),
        DescriptorSource::Frame(_) => None,
    };
    let mut scene_cache: BTreeMap<String, FeatureMap<T>> = BTreeMap::new();
    let mut samples = Vec::with_capacity(records.len());
    for record in &records {
        if !scene_cache.contains_key(&record.image_path) {
            scene_cache.insert(record.image_path.clone(), encode_scene(model, config, &record.image_path)?);
        }
        let descriptor = record_descriptor(
            model,
            corpus,
            prototypes.as_ref(),
            record,
            config.eval_descriptor,
        )?;
        samples.push(LocalizationSample {
            sample_id: record.sample_id.clone(),
            category: record.category.clone(),
            features: scene_cache[&record.image_path].clone(),
            descriptor,
            gt: load_mask(&config.data_dir.join(&record.mask_path))?,
        });
    }
    Ok(samples)
}

pub fn run_eval<T: Scalar>(
    config: &RunConfig,
    model: &Model<T>,
    corpus: &LoadedCorpus<T>,
) -> Result<EvalReport> {
    let samples = prepare_localization_samples(config, model, corpus)?;
    evaluate_localization(&samples, &config.eval)
}

pub fn run_interactive<T: Scalar>(config: &RunConfig, model: &Model<T>) -> Result<InteractiveReport> {
    let records = read_interactive_manifest(&config.data_dir.join("interactive.manifest"))?;
    let mut samples = Vec::with_capacity(records.len());
    for r in &records {
        let features = encode_scene(model, config, &r.image_path)?;
        let descriptor_of = |path: &str| -> Result<TactileDescriptor<T>> {
            let input: SideInput<T> =
                load_side_input(&config.data_dir.join(path), config.encoder.backbone)?;
            Ok(model
                .descriptor(input.as_encoder_input())?
                .with_provenance(format!("tactile:{path}")))
        };
        samples.push(InteractiveSample {
            sample_id: r.sample_id.clone(),
            features,
            categories: [r.category_a.clone(), r.category_b.clone()],
            descriptors: [descriptor_of(&r.tactile_a_path)?, descriptor_of(&r.tactile_b_path)?],
            masks: [
                load_mask(&config.data_dir.join(&r.mask_a_path))?,
                load_mask(&config.data_dir.join(&r.mask_b_path))?,
            ],
        });
    }
    evaluate_interactive(&samples, &config.eval)
}

/// Start/Middle/End localization quality: every eval scene is queried with
/// the per-position descriptors of its traced touch instance.
pub fn run_robustness<T: Scalar>(
    config: &RunConfig,
    model: &Model<T>,
    corpus: &LoadedCorpus<T>,
) -> Result<RobustnessReport> {
    let records = eval_records(config)?;
    let mut scene_cache: BTreeMap<String, FeatureMap<T>> = BTreeMap::new();
    let mut samples = Vec::with_capacity(records.len());
    for record in &records {
        if !scene_cache.contains_key(&record.image_path) {
            scene_cache.insert(record.image_path.clone(), encode_scene(model, config, &record.image_path)?);
        }
        let instance = corpus.pool.instance(&record.instance_id)?;
        let frame_descriptors = instance
            .sample_ids
            .iter()
            .map(|sid| tactile_descriptor_of(model, corpus, sid))
            .collect::<Result<Vec<_>>>()?;
        samples.push(RobustnessSample {
            sample_id: record.sample_id.clone(),
            category: record.category.clone(),
            features: scene_cache[&record.image_path].clone(),
            gt: load_mask(&config.data_dir.join(&record.mask_path))?,
            frame_descriptors,
        });
    }
    robustness_report(&samples, &config.eval)
}

/// Writes a report file: a `kind=run` provenance line, then the records.
pub fn write_report(path: &Path, seed: u64, records: &str) -> Result<()> {
    write_text(path, &format!("kind=run\tseed={seed}\n{records}"))
}

/// The heatmap files one localize call produces.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizeOutcome {
    pub pgm: PathBuf,
    pub ppm: PathBuf,
    pub meta: PathBuf,
    pub peak: (usize, usize),
}

/// Tactile query for [`run_localize`]: a tactile input file or a category
/// whose prototype (over the training corpus) is used.
pub enum LocalizeQuery<'a> {
    TactileFile(&'a Path),
    Category(&'a str),
}

/// Computes the saliency map of one image under one tactile query and
/// writes `<prefix>.pgm` (grayscale), `<prefix>.ppm` (overlay), and
/// `<prefix>.meta` (provenance).
pub fn run_localize<T: Scalar>(
    config: &RunConfig,
    model: &Model<T>,
    corpus: Option<&LoadedCorpus<T>>,
    image_path: &Path,
    query: LocalizeQuery<'_>,
    out_prefix: &Path,
) -> Result<LocalizeOutcome> {
    let image_input: SideInput<T> = load_side_input(image_path, config.encoder.backbone)?;
    let features = model.encode_visual(image_input.as_encoder_input())?;
    let descriptor = match query {
        LocalizeQuery::TactileFile(path) => {
            let input: SideInput<T> = load_side_input(path, config.encoder.backbone)?;
            model
                .descriptor(input.as_encoder_input())?
                .with_provenance(format!("tactile:{}", path.display()))
        }
        LocalizeQuery::Category(name) => {
            let corpus = corpus.ok_or_else(|| {
                Error::invalid("a category-prototype query needs the training corpus")
            })?;
            let table = prototype_table(model, corpus)?;
            table
                .per_category
                .get(name)
                .ok_or_else(|| Error::invalid(format!("no prototype for category `{name}`")))?
                .combined
                .clone()
        }
    };

    // Render at input resolution: the source image in random-projection
    // mode, patch-upsampled grid size otherwise (over a neutral base).
    let (out_w, out_h, base) = match &image_input {
        SideInput::Image(r) => (r.width, r.height, r.clone()),
        SideInput::Features(f) => {
            let w = f.width() * config.encoder.patch;
            let h = f.height() * config.encoder.patch;
            (w, h, Raster::filled(w, h, 1, 128)?)
        }
    };
    let mut saliency = compute_saliency(&features, &descriptor, out_w, out_h, &config.eval)?;
    saliency.sample_id = Some(image_path.display().to_string());
    let peak = saliency_peak(&saliency);

    let pgm = out_prefix.with_extension("pgm");
    let ppm = out_prefix.with_extension("ppm");
    let meta = out_prefix.with_extension("meta");
    if let Some(parent) = pgm.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    export_heatmap(&saliency, &base, &pgm, &ppm)?;
    let mut meta_text = String::new();
    let _ = writeln!(meta_text, "seed={}", config.seed);
    let _ = writeln!(meta_text, "image={}", image_path.display());
    let _ = writeln!(
        meta_text,
        "descriptor={}",
        saliency.descriptor_provenance.as_deref().unwrap_or("tactile")
    );
    let _ = writeln!(meta_text, "peak_x={}\tpeak_y={}", peak.0, peak.1);
    write_text(&meta, &meta_text)?;
    Ok(LocalizeOutcome {
        pgm,
        ppm,
        meta,
        peak,
    })
}

fn saliency_peak(map: &SaliencyMap) -> (usize, usize) {
    let mut best = (0usize, 0usize);
    let mut best_score = f64::NEG_INFINITY;
    for y in 0..map.height() {
        for x in 0..map.width() {
            let s = map.at(x, y);
            if s > best_score {
                best_score = s;
                best = (x, y);
            }
        }
    }
    best
}

/// End-to-end finite-difference check: a random batch through both
/// encoders, the similarity matrix, and the contrastive loss; analytic
/// gradients of every trainable tensor are compared against central
/// differences.
pub fn run_gradcheck<T: Scalar>(
    config: &RunConfig,
    seed: u64,
    pairs: usize,
    h: f64,
    tol: f64,
) -> Result<FdReport> {
    if pairs == 0 {
        return Err(Error::invalid("gradcheck needs at least one pair"));
    }
    let mut model: Model<T> = Model::init(&config.encoder, &config.loss, seed)?;
    if config.encoder.backbone == BackboneKind::RandomProjection {
        // Exercise the unfrozen-tactile configuration; the image backbone
        // stays frozen as in training.
        for suffix in ["backbone.weight", "backbone.bias"] {
            model
                .params
                .set_trainable(&format!("{TACTILE_PREFIX}.{suffix}"), true)?;
        }
    }

    let grid = 3usize;
    let d = config.encoder.backbone_dim;
    let side = config.encoder.image_side;
    let make_input = |slot: u64, side_tag: u64| -> Result<SideInput<T>> {
        let mut rng = derive_rng(seed, &[tag("gradcheck-input"), slot, side_tag]);
        match config.encoder.backbone {
            BackboneKind::FeatureFile => {
                let data: Vec<T> = (0..d * grid * grid)
                    .map(|_| sc::<T>(rng.gen_range(-1.0..1.0)))
                    .collect();
                Ok(SideInput::Features(FeatureMap::new(d, grid, grid, data)?))
            }
            BackboneKind::RandomProjection => {
                let ch = config.encoder.input_channels;
                let pixels: Vec<u8> = (0..side * side * ch).map(|_| rng.gen_range(0..=255)).collect();
                Ok(SideInput::Image(Raster::new(side, side, ch, pixels)?))
            }
        }
    };
    let mut tactile_inputs = Vec::with_capacity(pairs);
    let mut visual_inputs = Vec::with_capacity(pairs);
    for slot in 0..pairs {
        tactile_inputs.push(make_input(slot as u64, 0)?);
        visual_inputs.push(make_input(slot as u64, 1)?);
    }

    let encoder = model.encoder.clone();
    let loss_cfg = model.loss.clone();
    let build = move |params: &crate::numeric::optim::ParamSet<T>| {
        let mut graph: Graph<T> = Graph::new();
        let t_vars = encoder_vars(&mut graph, params, TACTILE_PREFIX)?;
        let v_vars = encoder_vars(&mut graph, params, IMAGE_PREFIX)?;
        let mut t_nodes = Vec::with_capacity(pairs);
        let mut v_nodes = Vec::with_capacity(pairs);
        for (t_in, v_in) in tactile_inputs.iter().zip(&visual_inputs) {
            let (t, _, _) = graph_encode(&mut graph, t_in.as_encoder_input(), &t_vars, &encoder)?;
            let (v, _, _) = graph_encode(&mut graph, v_in.as_encoder_input(), &v_vars, &encoder)?;
            t_nodes.push(t);
            v_nodes.push(v);
        }
        let (loss, _) = graph_batch_loss(&mut graph, &t_nodes, &v_nodes, &loss_cfg)?;
        Ok((graph, loss))
    };
    finite_difference_check(build, &model.params, h, tol)
}

/// Robustness line for reports: `position → mIoU/mAP`.
pub fn robustness_summary(report: &RobustnessReport) -> String {
    let mut s = String::new();
    for pos in FramePosition::ALL {
        let r = report.at(pos);
        let _ = writeln!(
            s,
            "position={}\tmiou={:.6}\tmap={:.6}",
            pos.as_str(),
            r.miou_percent,
            r.map_percent
        );
    }
    s
}
