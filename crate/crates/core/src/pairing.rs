//! Positive-pair construction: touch-instance, in-domain, and out-domain
//! strategies, curriculum-aware batch sampling, frame selection, and
//! per-category tactile prototypes.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;

use crate::alignment::TactileDescriptor;
use crate::corpus::{SampleRecord, TouchInstance};
use crate::error::{Error, Result};
use crate::numeric::Scalar;
use crate::rng::{derive_rng, tag};

/// Canonical frame choices within an instance of length T: offsets 0,
/// floor(T/2), and T-1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FramePosition {
    Start,
    Middle,
    End,
}

impl FramePosition {
    pub const ALL: [FramePosition; 3] = [FramePosition::Start, FramePosition::Middle, FramePosition::End];

    pub fn offset(self, len: usize) -> usize {
        match self {
            FramePosition::Start => 0,
            FramePosition::Middle => len / 2,
            FramePosition::End => len - 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FramePosition::Start => "start",
            FramePosition::Middle => "middle",
            FramePosition::End => "end",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "start" => Ok(FramePosition::Start),
            "middle" => Ok(FramePosition::Middle),
            "end" => Ok(FramePosition::End),
            other => Err(Error::invalid(format!(
                "unknown frame position `{other}` (expected start, middle, or end)"
            ))),
        }
    }
}

impl fmt::Display for FramePosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Returns the sample at the canonical offset for `pos`.
pub fn select_frame(instance: &TouchInstance, pos: FramePosition) -> Result<&str> {
    if instance.is_empty() {
        return Err(Error::invalid(format!("instance `{}` has no members", instance.instance_id)));
    }
    Ok(&instance.sample_ids[pos.offset(instance.len())])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairKind {
    Instance,
    InDomain,
    OutDomain,
}

impl PairKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PairKind::Instance => "instance",
            PairKind::InDomain => "in-domain",
            PairKind::OutDomain => "out-domain",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "instance" => Ok(PairKind::Instance),
            "in-domain" => Ok(PairKind::InDomain),
            "out-domain" => Ok(PairKind::OutDomain),
            other => Err(Error::invalid(format!("unknown pair kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TactileRef {
    pub instance_id: String,
    pub frame_offset: usize,
}

/// One training positive: a tactile frame and the visual sample it is pulled
/// toward.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSpec {
    pub kind: PairKind,
    pub tactile: TactileRef,
    pub visual_sample_id: String,
    pub category: String,
}

/// Which tactile offsets a sampler may draw. `Interior` drops both endpoint
/// frames whenever the instance is long enough to have interior frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TactileFrames {
    #[default]
    All,
    Interior,
}

impl TactileFrames {
    pub fn as_str(self) -> &'static str {
        match self {
            TactileFrames::All => "all",
            TactileFrames::Interior => "interior",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(TactileFrames::All),
            "interior" => Ok(TactileFrames::Interior),
            other => Err(Error::invalid(format!(
                "unknown tactile frame choice `{other}` (expected all or interior)"
            ))),
        }
    }
}

fn draw_tactile_offset<R: Rng>(rng: &mut R, len: usize, frames: TactileFrames) -> usize {
    match frames {
        TactileFrames::Interior if len > 2 => 1 + rng.gen_range(0..len - 2),
        _ => rng.gen_range(0..len),
    }
}

fn nonempty(instance: &TouchInstance) -> Result<()> {
    if instance.is_empty() {
        return Err(Error::invalid(format!("instance `{}` has no members", instance.instance_id)));
    }
    Ok(())
}

fn instance_pair<R: Rng>(
    instance: &TouchInstance,
    rng: &mut R,
    frames: TactileFrames,
) -> Result<PairSpec> {
    nonempty(instance)?;
    let tactile_offset = draw_tactile_offset(rng, instance.len(), frames);
    let visual_offset = rng.gen_range(0..instance.len());
    Ok(PairSpec {
        kind: PairKind::Instance,
        tactile: TactileRef {
            instance_id: instance.instance_id.clone(),
            frame_offset: tactile_offset,
        },
        visual_sample_id: instance.sample_ids[visual_offset].clone(),
        category: instance.category.clone(),
    })
}

fn in_domain_pair<R: Rng>(
    instances: &[TouchInstance],
    rng: &mut R,
    frames: TactileFrames,
) -> Result<PairSpec> {
    if instances.is_empty() {
        return Err(Error::invalid("in-domain pairing over an empty category"));
    }
    let category = &instances[0].category;
    if let Some(stray) = instances.iter().find(|i| &i.category != category) {
        return Err(Error::invalid(format!(
            "in-domain pairing mixes categories `{category}` and `{}`",
            stray.category
        )));
    }
    let n = &instances[rng.gen_range(0..instances.len())];
    let m = &instances[rng.gen_range(0..instances.len())];
    nonempty(n)?;
    nonempty(m)?;
    let tactile_offset = draw_tactile_offset(rng, n.len(), frames);
    let visual_offset = rng.gen_range(0..m.len());
    Ok(PairSpec {
        kind: PairKind::InDomain,
        tactile: TactileRef { instance_id: n.instance_id.clone(), frame_offset: tactile_offset },
        visual_sample_id: m.sample_ids[visual_offset].clone(),
        category: category.clone(),
    })
}

fn out_domain_pair<R: Rng>(
    image: &SampleRecord,
    instances: &[TouchInstance],
    rng: &mut R,
    frames: TactileFrames,
) -> Result<PairSpec> {
    if image.tactile_path.is_some() {
        return Err(Error::invalid(format!(
            "sample `{}` has a tactile signal; out-domain pairing expects images without one",
            image.sample_id
        )));
    }
    let matching: Vec<&TouchInstance> =
        instances.iter().filter(|i| i.category == image.category).collect();
    if matching.is_empty() {
        return Err(Error::invalid(format!(
            "no tactile instance of category `{}` for out-domain image `{}`",
            image.category, image.sample_id
        )));
    }
    let chosen = matching[rng.gen_range(0..matching.len())];
    nonempty(chosen)?;
    let tactile_offset = draw_tactile_offset(rng, chosen.len(), frames);
    Ok(PairSpec {
        kind: PairKind::OutDomain,
        tactile: TactileRef { instance_id: chosen.instance_id.clone(), frame_offset: tactile_offset },
        visual_sample_id: image.sample_id.clone(),
        category: image.category.clone(),
    })
}

/// Pairs a uniformly drawn tactile frame with an independently drawn visual
/// frame from the same instance (the two may coincide).
pub fn pair_touch_instance<R: Rng>(instance: &TouchInstance, rng: &mut R) -> Result<PairSpec> {
    instance_pair(instance, rng, TactileFrames::All)
}

/// Pairs a tactile frame from one instance with a visual frame from another
/// (possibly the same) instance of the same category.
pub fn pair_in_domain<R: Rng>(instances: &[TouchInstance], rng: &mut R) -> Result<PairSpec> {
    in_domain_pair(instances, rng, TactileFrames::All)
}

/// Pairs an image that has no tactile counterpart with a tactile frame drawn
/// from the instances of its category.
pub fn pair_out_domain<R: Rng>(
    image: &SampleRecord,
    instances: &[TouchInstance],
    rng: &mut R,
) -> Result<PairSpec> {
    out_domain_pair(image, instances, rng, TactileFrames::All)
}

/// Two-stage curriculum: stage 1 trains on tactile-bearing data only, stage 2
/// mixes in out-domain images at ratio `rho`; the first `frozen_epochs`
/// epochs keep the backbones fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumSchedule {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub rho: f64,
    pub frozen_epochs: usize,
}

impl CurriculumSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::invalid(format!(
                "out-domain ratio must lie in [0, 1], got {}",
                self.rho
            )));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.stage1_epochs + self.stage2_epochs
    }

    pub fn is_stage2(&self, epoch: usize) -> bool {
        epoch >= self.stage1_epochs
    }

    pub fn backbones_frozen(&self, epoch: usize) -> bool {
        epoch < self.frozen_epochs
    }
}

/// Sampler behavior not fixed by the schedule itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplerOptions {
    /// Mix in-domain pairs with instance pairs (fair coin per slot) from the
    /// start; otherwise stage 1 uses instance pairs only.
    pub in_domain_stage1: bool,
    pub tactile_frames: TactileFrames,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        SamplerOptions { in_domain_stage1: true, tactile_frames: TactileFrames::All }
    }
}

/// Tactile-bearing instances grouped by category plus the out-domain image
/// records available for stage 2.
#[derive(Debug, Clone)]
pub struct PairingPool {
    by_category: BTreeMap<String, Vec<TouchInstance>>,
    by_instance_id: BTreeMap<String, TouchInstance>,
    out_by_category: BTreeMap<String, Vec<SampleRecord>>,
}

impl PairingPool {
    pub fn new(instances: Vec<TouchInstance>, out_records: Vec<SampleRecord>) -> Result<Self> {
        let mut by_category: BTreeMap<String, Vec<TouchInstance>> = BTreeMap::new();
        let mut by_instance_id = BTreeMap::new();
        for inst in instances {
            nonempty(&inst)?;
            if by_instance_id.insert(inst.instance_id.clone(), inst.clone()).is_some() {
                return Err(Error::invalid(format!(
                    "duplicate instance id `{}`",
                    inst.instance_id
                )));
            }
            by_category.entry(inst.category.clone()).or_default().push(inst);
        }
        let mut out_by_category: BTreeMap<String, Vec<SampleRecord>> = BTreeMap::new();
        for rec in out_records {
            if rec.tactile_path.is_some() {
                return Err(Error::invalid(format!(
                    "out-domain record `{}` carries a tactile path",
                    rec.sample_id
                )));
            }
            out_by_category.entry(rec.category.clone()).or_default().push(rec);
        }
        Ok(PairingPool { by_category, by_instance_id, out_by_category })
    }

    pub fn categories(&self) -> Vec<&str> {
        self.by_category.keys().map(String::as_str).collect()
    }

    pub fn instances_of(&self, category: &str) -> &[TouchInstance] {
        self.by_category.get(category).map_or(&[], Vec::as_slice)
    }

    pub fn instances_by_category(&self) -> &BTreeMap<String, Vec<TouchInstance>> {
        &self.by_category
    }

    pub fn instance(&self, instance_id: &str) -> Result<&TouchInstance> {
        self.by_instance_id
            .get(instance_id)
            .ok_or_else(|| Error::invalid(format!("unknown instance `{instance_id}`")))
    }

    pub fn out_records_of(&self, category: &str) -> &[SampleRecord] {
        self.out_by_category.get(category).map_or(&[], Vec::as_slice)
    }

    /// Categories usable for out-domain slots: an out-domain image exists and
    /// a tactile instance of the same category can be paired with it.
    pub fn out_domain_categories(&self) -> Vec<&str> {
        self.out_by_category
            .keys()
            .filter(|c| self.by_category.contains_key(*c))
            .map(String::as_str)
            .collect()
    }

    /// Sample id of the tactile frame a pair refers to.
    pub fn resolve_tactile(&self, tactile: &TactileRef) -> Result<&str> {
        let inst = self.instance(&tactile.instance_id)?;
        inst.sample_ids.get(tactile.frame_offset).map(String::as_str).ok_or_else(|| {
            Error::invalid(format!(
                "offset {} out of range for instance `{}` of length {}",
                tactile.frame_offset,
                tactile.instance_id,
                inst.len()
            ))
        })
    }
}

fn stage1_slot<R: Rng>(
    pool: &PairingPool,
    options: &SamplerOptions,
    categories: &[&str],
    rng: &mut R,
) -> Result<PairSpec> {
    let category = categories[rng.gen_range(0..categories.len())];
    let instances = pool.instances_of(category);
    if options.in_domain_stage1 && rng.gen::<f64>() < 0.5 {
        in_domain_pair(instances, rng, options.tactile_frames)
    } else {
        let inst = &instances[rng.gen_range(0..instances.len())];
        instance_pair(inst, rng, options.tactile_frames)
    }
}

/// Draws one batch for `(epoch, batch_index)`. Stage 1 uses tactile-bearing
/// pairs only; in stage 2 each slot switches to an out-domain pair with
/// probability `rho`. Identical arguments give identical batches, and each
/// slot has its own stream keyed by (seed, epoch, batch index, slot).
pub fn sample_training_batch(
    pool: &PairingPool,
    schedule: &CurriculumSchedule,
    options: &SamplerOptions,
    epoch: usize,
    batch_index: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<PairSpec>> {
    schedule.validate()?;
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    if epoch >= schedule.total_epochs() {
        return Err(Error::invalid(format!(
            "epoch {epoch} outside the schedule's {} epochs",
            schedule.total_epochs()
        )));
    }
    let categories = pool.categories();
    if categories.is_empty() {
        return Err(Error::invalid("no tactile instances to sample from"));
    }
    let stage2 = schedule.is_stage2(epoch);
    let out_categories = pool.out_domain_categories();
    if stage2 && schedule.rho > 0.0 && out_categories.is_empty() {
        return Err(Error::invalid(
            "stage 2 needs out-domain images with tactile instances of matching category",
        ));
    }
    (0..batch_size)
        .map(|slot| {
            let mut rng = derive_rng(
                seed,
                &[tag("training-batch"), epoch as u64, batch_index as u64, slot as u64],
            );
            if stage2 && rng.gen::<f64>() < schedule.rho {
                let category = out_categories[rng.gen_range(0..out_categories.len())];
                let records = pool.out_records_of(category);
                let record = &records[rng.gen_range(0..records.len())];
                out_domain_pair(record, pool.instances_of(category), &mut rng, options.tactile_frames)
            } else {
                stage1_slot(pool, options, &categories, &mut rng)
            }
        })
        .collect()
}

/// Serializes pairs as manifest-style lines for audit.
pub fn pair_list_to_string(pairs: &[PairSpec]) -> String {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&format!(
            "kind={}\ttactile_instance={}\ttactile_offset={}\tvisual={}\tcategory={}\n",
            p.kind.as_str(),
            p.tactile.instance_id,
            p.tactile.frame_offset,
            p.visual_sample_id,
            p.category
        ));
    }
    out
}

/// Mean tactile descriptors of one category at the three canonical frame
/// positions, plus their combination.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryPrototypes<T: Scalar> {
    pub start: TactileDescriptor<T>,
    pub middle: TactileDescriptor<T>,
    pub end: TactileDescriptor<T>,
    pub combined: TactileDescriptor<T>,
    pub instance_count: usize,
}

impl<T: Scalar> CategoryPrototypes<T> {
    pub fn at(&self, pos: FramePosition) -> &TactileDescriptor<T> {
        match pos {
            FramePosition::Start => &self.start,
            FramePosition::Middle => &self.middle,
            FramePosition::End => &self.end,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeTable<T: Scalar> {
    pub per_category: BTreeMap<String, CategoryPrototypes<T>>,
}

impl<T: Scalar> PrototypeTable<T> {
    pub fn category_count(&self) -> usize {
        self.per_category.len()
    }
}

/// Averages, per category, the descriptors of every instance's start, middle,
/// and end frame; the combined prototype is the mean of those three averages.
/// `descriptor_of` maps a sample id to its tactile descriptor.
pub fn compute_prototypes<T: Scalar, F>(
    by_category: &BTreeMap<String, Vec<TouchInstance>>,
    mut descriptor_of: F,
) -> Result<PrototypeTable<T>>
where
    F: FnMut(&str) -> Result<TactileDescriptor<T>>,
{
    let mut per_category = BTreeMap::new();
    for (category, instances) in by_category {
        if instances.is_empty() {
            return Err(Error::invalid(format!("category `{category}` has no instances")));
        }
        let mut positional = Vec::with_capacity(3);
        for pos in FramePosition::ALL {
            let descs: Vec<TactileDescriptor<T>> = instances
                .iter()
                .map(|inst| descriptor_of(select_frame(inst, pos)?))
                .collect::<Result<_>>()?;
            positional.push(
                TactileDescriptor::mean_of(&descs)?
                    .with_provenance(format!("prototype:{category}:{pos}")),
            );
        }
        let combined = TactileDescriptor::mean_of(&positional)?
            .with_provenance(format!("prototype:{category}"));
        let [start, middle, end]: [TactileDescriptor<T>; 3] =
            positional.try_into().expect("three positions");
        per_category.insert(
            category.clone(),
            CategoryPrototypes { start, middle, end, combined, instance_count: instances.len() },
        );
    }
    Ok(PrototypeTable { per_category })
}
