//! Touch-instance extraction and video-disjoint train/test splitting.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::SampleRecord;
use crate::error::{Error, Result};
use crate::rng::{derive_rng, tag};

/// A maximal run of consecutive frames from one video sharing one category:
/// the unit a single physical touch contributes to training and evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TouchInstance {
    pub instance_id: String,
    pub video_id: String,
    pub category: String,
    /// Inclusive frame range; `sample_ids` covers exactly start..=end.
    pub start: u64,
    pub end: u64,
    pub sample_ids: Vec<String>,
}

impl TouchInstance {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }
}

/// Groups records by video, orders them by frame index, and merges maximal
/// runs of consecutive indices with identical category. Accepts any input
/// order; the result is a partition of the input ordered by (video, start).
pub fn extract_touch_instances(records: &[SampleRecord]) -> Result<Vec<TouchInstance>> {
    let mut by_video: BTreeMap<&str, Vec<&SampleRecord>> = BTreeMap::new();
    for r in records {
        by_video.entry(&r.video_id).or_default().push(r);
    }
    let mut instances = Vec::new();
    for (video, mut group) in by_video {
        group.sort_by_key(|r| r.frame_index);
        for pair in group.windows(2) {
            if pair[0].frame_index == pair[1].frame_index {
                return Err(Error::invalid(format!(
                    "video `{video}` repeats frame {} (samples `{}`, `{}`)",
                    pair[0].frame_index, pair[0].sample_id, pair[1].sample_id
                )));
            }
        }
        let mut run: Vec<&SampleRecord> = Vec::new();
        for r in group {
            let continues = run.last().is_some_and(|prev| {
                r.frame_index == prev.frame_index + 1 && r.category == prev.category
            });
            if !continues && !run.is_empty() {
                instances.push(seal_run(&run));
                run.clear();
            }
            run.push(r);
        }
        if !run.is_empty() {
            instances.push(seal_run(&run));
        }
    }
    Ok(instances)
}

fn seal_run(run: &[&SampleRecord]) -> TouchInstance {
    let start = run[0].frame_index;
    let end = run[run.len() - 1].frame_index;
    TouchInstance {
        instance_id: format!("{}:{start}-{end}", run[0].video_id),
        video_id: run[0].video_id.clone(),
        category: run[0].category.clone(),
        start,
        end,
        sample_ids: run.iter().map(|r| r.sample_id.clone()).collect(),
    }
}

/// Assigns whole videos to train/test so the test side's instance share lands
/// as close to `test_fraction` as a video boundary allows. Videos are walked
/// in a seeded shuffle order; both sides always get at least one video.
pub fn split_by_video(
    instances: &[TouchInstance],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<TouchInstance>, Vec<TouchInstance>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "test fraction must lie strictly between 0 and 1, got {test_fraction}"
        )));
    }
    let mut per_video: BTreeMap<&str, usize> = BTreeMap::new();
    for inst in instances {
        *per_video.entry(&inst.video_id).or_default() += 1;
    }
    if per_video.len() < 2 {
        return Err(Error::invalid(format!(
            "video-disjoint split needs at least 2 videos, got {}",
            per_video.len()
        )));
    }
    let mut order: Vec<&str> = per_video.keys().copied().collect();
    let mut rng = derive_rng(seed, &[tag("split-by-video")]);
    order.shuffle(&mut rng);

    let total = instances.len() as f64;
    let mut cumulative = 0usize;
    let mut best: (usize, f64) = (1, f64::INFINITY);
    for (k, video) in order.iter().enumerate().take(order.len() - 1) {
        cumulative += per_video[video];
        let share = cumulative as f64 / total;
        let dist = (share - test_fraction).abs();
        if dist < best.1 {
            best = (k + 1, dist);
        }
    }
    let test_videos: std::collections::BTreeSet<&str> =
        order[..best.0].iter().copied().collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for inst in instances {
        if test_videos.contains(inst.video_id.as_str()) {
            test.push(inst.clone());
        } else {
            train.push(inst.clone());
        }
    }
    Ok((train, test))
}
