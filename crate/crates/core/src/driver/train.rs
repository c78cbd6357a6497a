//! The training loop: curriculum batches, contrastive loss, AdamW.
//!
//! One epoch is a fixed number of optimizer steps; every batch is assembled
//! from (seed, epoch, batch, slot) streams, so a run is a pure function of
//! its configuration and any epoch can be recomputed independently — which
//! is also what makes checkpoint resume exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::alignment::graph_batch_loss;
use crate::corpus::{extract_touch_instances, read_manifest, SampleRecord};
use crate::driver::config::RunConfig;
use crate::driver::model::{Checkpoint, Model, IMAGE_PREFIX, TACTILE_PREFIX};
use crate::encoders::{
    encoder_vars, graph_encode, load_feature_map, BackboneKind, EncoderInput, FeatureMap,
};
use crate::error::{Error, Result};
use crate::numeric::graph::{reverse_mode_gradients, Graph};
use crate::numeric::optim::adamw_step;
use crate::numeric::scalar::Scalar;
use crate::pairing::{sample_training_batch, PairSpec, PairingPool};
use crate::raster::{read_auto, Raster};
use crate::rng::{derive_rng, tag};

/// One side of a pair as loaded from disk: backbone features in
/// feature-file mode, a raster in random-projection mode.
#[derive(Debug, Clone)]
pub enum SideInput<T: Scalar> {
    Features(FeatureMap<T>),
    Image(Raster),
}

impl<T: Scalar> SideInput<T> {
    pub fn as_encoder_input(&self) -> EncoderInput<'_, T> {
        match self {
            SideInput::Features(f) => EncoderInput::Features(f),
            SideInput::Image(r) => EncoderInput::Image(r),
        }
    }

    pub fn hflipped(&self) -> Self {
        match self {
            SideInput::Features(f) => SideInput::Features(f.hflipped()),
            SideInput::Image(r) => SideInput::Image(r.hflipped()),
        }
    }
}

pub fn load_side_input<T: Scalar>(path: &Path, mode: BackboneKind) -> Result<SideInput<T>> {
    match mode {
        BackboneKind::FeatureFile => Ok(SideInput::Features(load_feature_map(path)?)),
        BackboneKind::RandomProjection => Ok(SideInput::Image(read_auto(path)?)),
    }
}

/// Everything the trainer and evaluators need from a data directory,
/// loaded once: records, the pairing pool, and both modalities' inputs.
pub struct LoadedCorpus<T: Scalar> {
    pub train_records: Vec<SampleRecord>,
    pub records_by_id: BTreeMap<String, SampleRecord>,
    pub pool: PairingPool,
    /// Tactile input per tactile-bearing sample id.
    pub tactile: BTreeMap<String, SideInput<T>>,
    /// Visual input per sample id (touch-instance frames and web images).
    pub visual: BTreeMap<String, SideInput<T>>,
}

pub fn load_training_corpus<T: Scalar>(config: &RunConfig) -> Result<LoadedCorpus<T>> {
    let dir = &config.data_dir;
    let train_manifest = dir.join("train.manifest");
    let train_records = read_manifest(&train_manifest)?;
    if train_records.is_empty() {
        return Err(Error::invalid(format!(
            "no training records in {}",
            train_manifest.display()
        )));
    }
    let out_manifest = dir.join("out-domain.manifest");
    let out_records = if out_manifest.exists() {
        read_manifest(&out_manifest)?
    } else {
        Vec::new()
    };

    let mode = config.encoder.backbone;
    let mut tactile = BTreeMap::new();
    let mut visual = BTreeMap::new();
    let mut records_by_id = BTreeMap::new();
    for r in &train_records {
        let t_path = r.tactile_path.as_deref().ok_or_else(|| {
            Error::invalid(format!("training sample `{}` has no tactile data", r.sample_id))
        })?;
        tactile.insert(r.sample_id.clone(), load_side_input(&dir.join(t_path), mode)?);
        visual.insert(r.sample_id.clone(), load_side_input(&dir.join(&r.image_path), mode)?);
        records_by_id.insert(r.sample_id.clone(), r.clone());
    }
    for r in &out_records {
        visual.insert(r.sample_id.clone(), load_side_input(&dir.join(&r.image_path), mode)?);
        records_by_id.insert(r.sample_id.clone(), r.clone());
    }

    let instances = extract_touch_instances(&train_records)?;
    let pool = PairingPool::new(instances, out_records)?;
    Ok(LoadedCorpus {
        train_records,
        records_by_id,
        pool,
        tactile,
        visual,
    })
}

/// Artifact paths and the per-epoch loss means of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub loss_log: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    /// (epoch, mean loss) in epoch order for the epochs this run executed.
    pub epoch_means: Vec<(usize, f64)>,
    pub final_epoch: usize,
}

fn steps_per_epoch(config: &RunConfig, corpus_len: usize) -> usize {
    if config.steps_per_epoch > 0 {
        config.steps_per_epoch
    } else {
        (corpus_len / config.batch_size).max(1)
    }
}

/// Runs one optimizer step over `pairs` and returns the batch loss.
fn training_step<T: Scalar>(
    model: &mut Model<T>,
    corpus: &LoadedCorpus<T>,
    pairs: &[PairSpec],
    config: &RunConfig,
    epoch: usize,
    batch_index: usize,
) -> Result<f64> {
    let mut graph: Graph<T> = Graph::new();
    let t_vars = encoder_vars(&mut graph, &model.params, TACTILE_PREFIX)?;
    let v_vars = encoder_vars(&mut graph, &model.params, IMAGE_PREFIX)?;

    let mut tactile_nodes = Vec::with_capacity(pairs.len());
    let mut visual_nodes = Vec::with_capacity(pairs.len());
    for (slot, pair) in pairs.iter().enumerate() {
        let tactile_id = corpus.pool.resolve_tactile(&pair.tactile)?;
        let t_in = corpus.tactile.get(tactile_id).ok_or_else(|| {
            Error::invalid(format!("no tactile data loaded for sample `{tactile_id}`"))
        })?;
        let v_in = corpus.visual.get(&pair.visual_sample_id).ok_or_else(|| {
            Error::invalid(format!(
                "no visual data loaded for sample `{}`",
                pair.visual_sample_id
            ))
        })?;

        let (t_in, v_in) = if config.hflip {
            let mut coin = derive_rng(
                config.seed,
                &[tag("augment-hflip"), epoch as u64, batch_index as u64, slot as u64],
            );
            let flip_t: bool = coin.gen();
            let flip_v: bool = coin.gen();
            (
                if flip_t { t_in.hflipped() } else { t_in.clone() },
                if flip_v { v_in.hflipped() } else { v_in.clone() },
            )
        } else {
            (t_in.clone(), v_in.clone())
        };

        let (t_node, _, _) = graph_encode(&mut graph, t_in.as_encoder_input(), &t_vars, &model.encoder)?;
        let (v_node, _, _) = graph_encode(&mut graph, v_in.as_encoder_input(), &v_vars, &model.encoder)?;
        tactile_nodes.push(t_node);
        visual_nodes.push(v_node);
    }

    let (loss, _scores) = graph_batch_loss(&mut graph, &tactile_nodes, &visual_nodes, &model.loss)?;
    let loss_value = graph.scalar_value(loss)?.to_f64().unwrap();
    let grads = reverse_mode_gradients(&graph, loss, &model.params)?;
    adamw_step(&mut model.params, &grads, &config.optim)?;
    Ok(loss_value)
}

/// Trains per the configured schedule, writing `loss.log` and
/// `ckpt-<epoch>.bin` under the output directory. `resume` continues from a
/// checkpoint's next epoch; with an unchanged configuration the continued
/// log lines match an uninterrupted run's exactly.
pub fn train<T: Scalar>(config: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let corpus: LoadedCorpus<T> = load_training_corpus(config)?;
    let schedule = &config.schedule;
    let total = schedule.total_epochs();
    let end_epoch = if config.train_epochs > 0 {
        config.train_epochs.min(total)
    } else {
        total
    };

    let (mut model, start_epoch) = match resume {
        Some(path) => {
            let ckpt: Checkpoint<T> = Checkpoint::load(path)?;
            let model = Model::from_params(&config.encoder, &config.loss, ckpt.params)?;
            (model, ckpt.epoch + 1)
        }
        None => (Model::init(&config.encoder, &config.loss, config.seed)?, 0),
    };
    if start_epoch > end_epoch {
        return Err(Error::invalid(format!(
            "checkpoint already covers epoch {}; nothing left before epoch {end_epoch}",
            start_epoch.saturating_sub(1)
        )));
    }

    // Stage 2 draws out-domain pairs; insist the corpus can serve them
    // before spending any training time.
    let reaches_stage2 = end_epoch > schedule.stage1_epochs;
    if reaches_stage2 && schedule.rho > 0.0 && corpus.pool.out_domain_categories().is_empty() {
        return Err(Error::invalid(
            "stage 2 requires an out-domain corpus covering the training categories",
        ));
    }

    std::fs::create_dir_all(&config.out).map_err(|e| Error::io(&config.out, e))?;
    let log_path = config.out.join("loss.log");
    let mut log = std::io::BufWriter::new(
        std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?,
    );
    let mut log_line = |line: &str| -> Result<()> {
        log.write_all(line.as_bytes()).map_err(|e| Error::io(&log_path, e))
    };
    log_line(&format!("# seed={}\n", config.seed))?;

    let steps = steps_per_epoch(config, corpus.train_records.len());
    let config_text = config.portable_text();
    let mut checkpoints = Vec::new();
    let mut epoch_means = Vec::new();

    for epoch in start_epoch..end_epoch {
        model.apply_freeze(epoch, schedule)?;
        let stage = if schedule.is_stage2(epoch) { 2 } else { 1 };
        let mut epoch_sum = 0.0;
        for batch_index in 0..steps {
            let step_index = epoch * steps + batch_index;
            let pairs = sample_training_batch(
                &corpus.pool,
                schedule,
                &config.sampler,
                epoch,
                batch_index,
                config.batch_size,
                config.seed,
            )?;
            let loss = training_step(&mut model, &corpus, &pairs, config, epoch, batch_index)
                .map_err(|e| match e {
                    Error::NonFinite(msg) => {
                        Error::non_finite(format!("training aborted at step {step_index}: {msg}"))
                    }
                    other => other,
                })?;
            epoch_sum += loss;
            let mut line = String::new();
            let _ = writeln!(line, "step={step_index}\tstage={stage}\tepoch={epoch}\tloss={loss:.12e}");
            log_line(&line)?;
        }
        epoch_means.push((epoch, epoch_sum / steps as f64));

        let ckpt = Checkpoint {
            seed: config.seed,
            epoch,
            config_text: config_text.clone(),
            params: model.params.clone(),
        };
        let ckpt_path = config.out.join(format!("ckpt-{epoch}.bin"));
        ckpt.save(&ckpt_path)?;
        checkpoints.push(ckpt_path);
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    Ok(TrainOutcome {
        loss_log: log_path,
        checkpoints,
        epoch_means,
        final_epoch: end_epoch.saturating_sub(1),
    })
}
