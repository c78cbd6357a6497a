use std::collections::BTreeMap;

use super::*;
use crate::rng::{derive_rng, tag};
use rand::Rng as _;

/// Single-channel feature map whose raw similarity map (descriptor [1],
/// dot-product similarity) reproduces `values` exactly.
fn grid_features(values: &[f64], height: usize, width: usize) -> FeatureMap<f64> {
    FeatureMap::new(1, height, width, values.to_vec()).unwrap()
}

fn unit_descriptor() -> TactileDescriptor<f64> {
    TactileDescriptor::new(crate::numeric::Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap()
}

fn dot_config() -> EvalConfig {
    EvalConfig { cosine: false, ..EvalConfig::default() }
}

fn mask_from(bits: &[u8], width: usize, height: usize) -> MaskImage {
    MaskImage::new(width, height, bits.iter().map(|&b| b != 0).collect()).unwrap()
}

fn saliency_from(scores: &[f64], width: usize, height: usize) -> SaliencyMap {
    SaliencyMap::new(width, height, scores.to_vec()).unwrap()
}

#[test]
fn constant_similarity_yields_all_zero_saliency() {
    let features = grid_features(&[0.7; 9], 3, 3);
    let map = compute_saliency(&features, &unit_descriptor(), 6, 6, &dot_config()).unwrap();
    assert_eq!((map.width(), map.height()), (6, 6));
    assert!(map.scores().iter().all(|&s| s == 0.0));
}

#[test]
fn two_by_two_column_ramp_upsamples_to_thirds() {
    let features = grid_features(&[0.0, 1.0, 0.0, 1.0], 2, 2);
    let map = compute_saliency(&features, &unit_descriptor(), 4, 4, &dot_config()).unwrap();
    for y in 0..4 {
        for (x, want) in [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0].into_iter().enumerate() {
            assert!((map.at(x, y) - want).abs() < 1e-12, "({x},{y})");
        }
    }
}

#[test]
fn random_grid_matches_bilinear_formula_oracle() {
    let mut rng = derive_rng(3, &[tag("saliency-oracle")]);
    let raw: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let features = grid_features(&raw, 3, 3);
    let map = compute_saliency(&features, &unit_descriptor(), 9, 9, &dot_config()).unwrap();

    let mut oracle = vec![0.0f64; 81];
    for y in 0..9 {
        for x in 0..9 {
            let sy = y as f64 * 2.0 / 8.0;
            let sx = x as f64 * 2.0 / 8.0;
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(2), (x0 + 1).min(2));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            let top = raw[y0 * 3 + x0] * (1.0 - fx) + raw[y0 * 3 + x1] * fx;
            let bottom = raw[y1 * 3 + x0] * (1.0 - fx) + raw[y1 * 3 + x1] * fx;
            oracle[y * 9 + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    let min = oracle.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = oracle.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for (i, o) in oracle.iter().enumerate() {
        let want = (o - min) / (max - min);
        assert!((map.scores()[i] - want).abs() < 1e-12, "pixel {i}");
    }
}

#[test]
fn saliency_is_invariant_under_positive_affine_transforms() {
    let mut rng = derive_rng(4, &[tag("saliency-affine")]);
    let raw: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    // channel 0 carries the map, channel 1 a constant; descriptor [a, b]
    // evaluates a*v + b per location
    let mut data = raw.clone();
    data.extend(std::iter::repeat(1.0).take(16));
    let features = FeatureMap::new(2, 4, 4, data).unwrap();
    let base = TactileDescriptor::new(
        crate::numeric::Tensor::new(vec![2], vec![1.0, 0.0]).unwrap(),
    )
    .unwrap();
    let scaled = TactileDescriptor::new(
        crate::numeric::Tensor::new(vec![2], vec![2.5, -0.7]).unwrap(),
    )
    .unwrap();
    let a = compute_saliency(&features, &base, 8, 8, &dot_config()).unwrap();
    let b = compute_saliency(&features, &scaled, 8, 8, &dot_config()).unwrap();
    for (x, y) in a.scores().iter().zip(b.scores()) {
        assert!((x - y).abs() < 1e-12);
    }
    assert_eq!(
        a.binarize(0.5).pixels(),
        b.binarize(0.5).pixels(),
        "thresholding agrees across affine transforms"
    );
}

#[test]
fn saliency_rejects_mismatched_dims() {
    let features = grid_features(&[0.0; 4], 2, 2);
    let wide = TactileDescriptor::new(
        crate::numeric::Tensor::new(vec![3], vec![1.0, 0.0, 0.0]).unwrap(),
    )
    .unwrap();
    assert!(compute_saliency(&features, &wide, 4, 4, &dot_config()).is_err());
    assert!(compute_saliency(&features, &unit_descriptor(), 0, 4, &dot_config()).is_err());
}

#[test]
fn iou_identity_disjoint_and_counts() {
    let a = mask_from(&[1, 1, 0, 0], 2, 2);
    let b = mask_from(&[0, 0, 1, 1], 2, 2);
    assert_eq!(region_iou(&a, &a).unwrap(), 1.0);
    assert_eq!(region_iou(&a, &b).unwrap(), 0.0);
    assert_eq!(region_iou(&b, &a).unwrap(), 0.0);
    let empty = mask_from(&[0, 0, 0, 0], 2, 2);
    assert_eq!(region_iou(&empty, &empty).unwrap(), 1.0);
    let other = mask_from(&[1, 0, 0], 3, 1);
    assert!(region_iou(&a, &other).is_err());
}

#[test]
fn iou_pixel_count_oracle_case() {
    // 4x4: pred 8 pixels, gt 4 pixels, overlap 2 -> 2 / 10
    let pred = mask_from(&[1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0], 4, 4);
    let gt = mask_from(&[1, 1, 0, 0, 0, 0, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0], 4, 4);
    assert!((region_iou(&pred, &gt).unwrap() - 0.2).abs() < 1e-15);
    assert_eq!(region_iou(&pred, &gt).unwrap(), region_iou(&gt, &pred).unwrap());
}

#[test]
fn ap_hand_enumerated_ranking() {
    let saliency = saliency_from(&[0.9, 0.8, 0.7, 0.6], 4, 1);
    let gt = mask_from(&[1, 0, 1, 0], 4, 1);
    let want = (1.0 + 2.0 / 3.0) / 2.0;
    assert!((pixel_average_precision(&saliency, &gt).unwrap() - want).abs() < 1e-12);
}

#[test]
fn ap_is_one_for_perfect_ranking_and_full_gt() {
    let saliency = saliency_from(&[0.9, 0.8, 0.2, 0.1], 4, 1);
    let gt = mask_from(&[1, 1, 0, 0], 4, 1);
    assert_eq!(pixel_average_precision(&saliency, &gt).unwrap(), 1.0);
    let all = mask_from(&[1, 1, 1, 1], 4, 1);
    assert_eq!(pixel_average_precision(&saliency, &all).unwrap(), 1.0);
    let none = mask_from(&[0, 0, 0, 0], 4, 1);
    assert!(pixel_average_precision(&saliency, &none).is_err());
}

#[test]
fn ap_breaks_ties_by_row_major_index() {
    // three tied leaders; positives at indices 0 and 2 get ranks 1 and 3
    let saliency = saliency_from(&[0.9, 0.9, 0.9, 0.1], 4, 1);
    let gt = mask_from(&[1, 0, 1, 0], 4, 1);
    let want = (1.0 + 2.0 / 3.0) / 2.0;
    assert!((pixel_average_precision(&saliency, &gt).unwrap() - want).abs() < 1e-12);
}

#[test]
fn ap_is_invariant_under_strictly_monotone_score_transforms() {
    let mut rng = derive_rng(7, &[tag("ap-monotone")]);
    let scores: Vec<f64> = (0..25).map(|_| rng.gen_range(0.0..1.0)).collect();
    let bits: Vec<u8> = (0..25).map(|i| (i % 3 == 0) as u8).collect();
    let gt = mask_from(&bits, 5, 5);
    let base = pixel_average_precision(&saliency_from(&scores, 5, 5), &gt).unwrap();
    let cubed: Vec<f64> = scores.iter().map(|s| s.powi(3)).collect();
    let transformed = pixel_average_precision(&saliency_from(&cubed, 5, 5), &gt).unwrap();
    assert!((base - transformed).abs() < 1e-15);
}

fn oracle_sample(
    id: &str,
    category: &str,
    raw: &[f64],
    side: usize,
    gt_bits: &[u8],
) -> LocalizationSample<f64> {
    LocalizationSample {
        sample_id: id.to_string(),
        category: category.to_string(),
        features: grid_features(raw, side, side),
        descriptor: unit_descriptor(),
        gt: mask_from(gt_bits, side, side),
    }
}

#[test]
fn exact_model_scores_perfectly() {
    // saliency == gt: features carry the mask itself
    let gt_bits = [1u8, 0, 0, 1, 1, 0, 0, 0, 1];
    let raw: Vec<f64> = gt_bits.iter().map(|&b| b as f64).collect();
    let sample = oracle_sample("s0", "brick", &raw, 3, &gt_bits);
    let report = evaluate_localization(&[sample], &dot_config()).unwrap();
    assert_eq!(report.map_percent, 100.0);
    assert_eq!(report.miou_percent, 100.0);
    assert_eq!(report.sample_count, 1);
    assert_eq!(report.per_category["brick"].sample_count, 1);
}

#[test]
fn constant_zero_model_gets_zero_iou() {
    let gt_bits = [1u8, 1, 0, 0];
    let sample = oracle_sample("s0", "brick", &[0.4; 4], 2, &gt_bits);
    let report = evaluate_localization(&[sample], &dot_config()).unwrap();
    // constant map -> all-zero saliency -> empty prediction at theta 0.5
    assert_eq!(report.miou_percent, 0.0);
}

#[test]
fn report_composes_per_sample_metrics() {
    let mut rng = derive_rng(9, &[tag("report-oracle")]);
    let side = 4;
    let mut samples = Vec::new();
    for i in 0..5 {
        let raw: Vec<f64> = (0..side * side).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut bits = vec![0u8; side * side];
        let planted = rng.gen_range(1..side * side);
        for b in bits.iter_mut().take(planted) {
            *b = 1;
        }
        let category = if i % 2 == 0 { "brick" } else { "grass" };
        samples.push(oracle_sample(&format!("s{i}"), category, &raw, side, &bits));
    }
    let cfg = dot_config();
    let report = evaluate_localization(&samples, &cfg).unwrap();

    let mut ap_sum = 0.0;
    let mut iou_sum = 0.0;
    let mut per_cat: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
    for s in &samples {
        let saliency =
            compute_saliency(&s.features, &s.descriptor, side, side, &cfg).unwrap();
        let ap = pixel_average_precision(&saliency, &s.gt).unwrap();
        let iou = region_iou(&saliency.binarize(cfg.threshold), &s.gt).unwrap();
        ap_sum += ap;
        iou_sum += iou;
        let e = per_cat.entry(s.category.as_str()).or_insert((0.0, 0.0, 0));
        e.0 += ap;
        e.1 += iou;
        e.2 += 1;
    }
    assert!((report.map_percent - 100.0 * ap_sum / 5.0).abs() < 1e-12);
    assert!((report.miou_percent - 100.0 * iou_sum / 5.0).abs() < 1e-12);
    for (cat, (ap, iou, n)) in per_cat {
        let m = &report.per_category[cat];
        assert_eq!(m.sample_count, n);
        assert!((m.map_percent - 100.0 * ap / n as f64).abs() < 1e-12);
        assert!((m.miou_percent - 100.0 * iou / n as f64).abs() < 1e-12);
    }
}

#[test]
fn report_records_echo_config() {
    let gt_bits = [1u8, 0, 0, 1];
    let sample = oracle_sample("s0", "brick", &[1.0, 0.0, 0.0, 1.0], 2, &gt_bits);
    let cfg = EvalConfig { threshold: 0.25, cosine: false, baseline: None };
    let report = evaluate_localization(&[sample], &cfg).unwrap();
    let records = report.to_records();
    assert!(records.contains("kind=config\tthreshold=0.250000\tpredictor=saliency"));
    assert!(records.contains("upsampling=bilinear-align-corners"));
    assert!(records.contains("ap=pixel-rank"));
    assert!(records.contains("kind=overall\tsamples=1"));
    assert!(records.contains("kind=category\tcategory=brick"));
    assert!(!report.table().is_empty());
}

#[test]
fn full_square_baseline_covers_everything() {
    let mask = baseline_mask(BaselineKind::FullSquare, 224, 224).unwrap();
    assert_eq!(mask.count_inside(), 50176);
}

#[test]
fn full_circle_pixel_count_tracks_analytic_area() {
    let mask = baseline_mask(BaselineKind::FullCircle, 224, 224).unwrap();
    let analytic = std::f64::consts::PI * 112.0 * 112.0;
    let count = mask.count_inside() as f64;
    assert!(
        (count - analytic).abs() / analytic <= 0.005,
        "count {count} vs analytic {analytic}"
    );
}

#[test]
fn square_baseline_miou_equals_gt_coverage() {
    let mut rng = derive_rng(10, &[tag("baseline-miou")]);
    let side = 6;
    let mut samples = Vec::new();
    for i in 0..8 {
        let bits: Vec<u8> = (0..side * side)
            .map(|_| (rng.gen_range(0.0..1.0) < 0.4) as u8)
            .collect();
        let bits = if bits.iter().all(|&b| b == 0) { vec![1; side * side] } else { bits };
        let raw: Vec<f64> = (0..side * side).map(|_| rng.gen_range(-1.0..1.0)).collect();
        samples.push(oracle_sample(&format!("s{i}"), "brick", &raw, side, &bits));
    }
    let cfg = EvalConfig { baseline: Some(BaselineKind::FullSquare), ..dot_config() };
    let report = evaluate_localization(&samples, &cfg).unwrap();
    let want = 100.0
        * samples
            .iter()
            .map(|s| s.gt.count_inside() as f64 / (side * side) as f64)
            .sum::<f64>()
        / samples.len() as f64;
    assert!((report.miou_percent - want).abs() < 1e-9);
    assert_eq!(report.predictor, "full-square");
}

fn interactive_sample(
    id: &str,
    raw: &[f64; 2],
    masks: [&[u8]; 2],
    side: usize,
) -> InteractiveSample<f64> {
    // two channels: descriptor k selects channel k's map
    let mut data = Vec::new();
    for (c, bits) in masks.iter().enumerate() {
        data.extend(bits.iter().map(|&b| raw[c] * b as f64));
    }
    let features = FeatureMap::new(2, side, side, data).unwrap();
    let descriptor = |c: usize| {
        let mut v = vec![0.0; 2];
        v[c] = 1.0;
        TactileDescriptor::new(crate::numeric::Tensor::new(vec![2], v).unwrap()).unwrap()
    };
    InteractiveSample {
        sample_id: id.to_string(),
        features,
        categories: ["brick".into(), "grass".into()],
        descriptors: [descriptor(0), descriptor(1)],
        masks: [mask_from(masks[0], side, side), mask_from(masks[1], side, side)],
    }
}

#[test]
fn perfect_interactive_sample_scores_hundred() {
    let sample = interactive_sample(
        "s0",
        &[1.0, 1.0],
        [&[1, 1, 0, 0, 0, 0, 0, 0, 0], &[0, 0, 0, 0, 0, 0, 1, 1, 0]],
        3,
    );
    let report = evaluate_interactive(&[sample], &dot_config()).unwrap();
    assert_eq!(report.iiou_percent, 100.0);
    assert_eq!(report.successes, 1);
}

#[test]
fn one_weak_region_fails_the_sample() {
    // second descriptor's prediction covers 5 pixels, gt 2, overlap 2 -> 0.4
    let mut sample = interactive_sample(
        "s0",
        &[1.0, 1.0],
        [&[1, 1, 0, 0, 0, 0, 0, 0, 0], &[0, 0, 0, 0, 1, 1, 1, 1, 1]],
        3,
    );
    sample.masks[1] = mask_from(&[0, 0, 0, 0, 1, 1, 0, 0, 0], 3, 3);
    let report = evaluate_interactive(&[sample], &dot_config()).unwrap();
    assert_eq!(report.iiou_percent, 0.0);
}

#[test]
fn interactive_counting_oracle_and_granularity() {
    let good = [&[1u8, 1, 0, 0, 0, 0, 0, 0, 0][..], &[0u8, 0, 0, 0, 0, 0, 1, 1, 0][..]];
    let mut samples = Vec::new();
    for i in 0..10 {
        let mut s = interactive_sample(&format!("s{i}"), &[1.0, 1.0], [good[0], good[1]], 3);
        if i >= 7 {
            // sabotage: gt for the second region moves away entirely
            s.masks[1] = mask_from(&[0, 1, 1, 0, 0, 0, 0, 0, 0], 3, 3);
        }
        samples.push(s);
    }
    let report = evaluate_interactive(&samples, &dot_config()).unwrap();
    assert_eq!(report.successes, 7);
    assert_eq!(report.iiou_percent, 70.0);
    // IIoU is always a multiple of 100 / n
    let granule = 100.0 / report.sample_count as f64;
    assert!((report.iiou_percent / granule).fract().abs() < 1e-12);
}

#[test]
fn interactive_rejects_same_category_touches() {
    let mut sample = interactive_sample(
        "s0",
        &[1.0, 1.0],
        [&[1, 1, 0, 0, 0, 0, 0, 0, 0], &[0, 0, 0, 0, 0, 0, 1, 1, 0]],
        3,
    );
    sample.categories = ["brick".into(), "brick".into()];
    assert!(evaluate_interactive(&[sample], &dot_config()).is_err());
}

fn descriptor_of(values: &[f64]) -> TactileDescriptor<f64> {
    TactileDescriptor::new(
        crate::numeric::Tensor::new(vec![values.len()], values.to_vec()).unwrap(),
    )
    .unwrap()
}

#[test]
fn single_frame_instances_make_identical_robustness_reports() {
    let gt_bits = [1u8, 0, 0, 1];
    let sample = RobustnessSample {
        sample_id: "s0".to_string(),
        category: "brick".to_string(),
        features: grid_features(&[1.0, 0.0, 0.0, 1.0], 2, 2),
        gt: mask_from(&gt_bits, 2, 2),
        frame_descriptors: vec![unit_descriptor()],
    };
    let report = robustness_report(&[sample], &dot_config()).unwrap();
    assert_eq!(report.start.map_percent, report.middle.map_percent);
    assert_eq!(report.middle.map_percent, report.end.map_percent);
    assert_eq!(report.start.frame_position.as_deref(), Some("start"));
    assert_eq!(report.middle.frame_position.as_deref(), Some("middle"));
    assert_eq!(report.end.frame_position.as_deref(), Some("end"));
}

#[test]
fn robustness_positions_pick_the_documented_descriptors() {
    // 2 channels; descriptors select channel mixes, gt matches channel 0
    let side = 2;
    let mut data = vec![1.0, 0.0, 0.0, 1.0]; // channel 0
    data.extend([0.0, 1.0, 1.0, 0.0]); // channel 1
    let features = FeatureMap::new(2, side, side, data).unwrap();
    let gt = mask_from(&[1, 0, 0, 1], side, side);
    // T = 4: endpoints point at channel 1 (wrong), interior at channel 0
    let frames = vec![
        descriptor_of(&[0.0, 1.0]),
        descriptor_of(&[1.0, 0.0]),
        descriptor_of(&[1.0, 0.0]),
        descriptor_of(&[0.0, 1.0]),
    ];
    let sample = RobustnessSample {
        sample_id: "s0".to_string(),
        category: "brick".to_string(),
        features: features.clone(),
        gt: gt.clone(),
        frame_descriptors: frames.clone(),
    };
    let report = robustness_report(&[sample], &dot_config()).unwrap();
    assert_eq!(report.middle.miou_percent, 100.0);
    assert_eq!(report.start.miou_percent, 0.0);
    assert_eq!(report.end.miou_percent, 0.0);

    // oracle: Middle equals evaluate_localization on the interior mean
    let mean = TactileDescriptor::mean_of(&frames[1..3]).unwrap();
    let oracle = evaluate_localization(
        &[LocalizationSample {
            sample_id: "s0".to_string(),
            category: "brick".to_string(),
            features,
            descriptor: mean,
            gt,
        }],
        &dot_config(),
    )
    .unwrap();
    assert_eq!(report.middle.map_percent, oracle.map_percent);
    assert_eq!(report.middle.miou_percent, oracle.miou_percent);
}

#[test]
fn heatmap_export_is_deterministic_and_formula_exact() {
    let dir = tempfile::tempdir().unwrap();
    let side = 2;
    let mut image = Raster::filled(side, side, 3, 0).unwrap();
    for y in 0..side {
        for x in 0..side {
            image.set(x, y, 0, 40);
            image.set(x, y, 1, 80);
            image.set(x, y, 2, 120);
        }
    }
    let zero = saliency_from(&[0.0; 4], side, side);
    let pgm = dir.path().join("h.pgm");
    let ppm = dir.path().join("h.ppm");
    export_heatmap(&zero, &image, &pgm, &ppm).unwrap();
    let gray = crate::raster::read_pgm(&pgm).unwrap();
    assert!(gray.pixels.iter().all(|&p| p == 0));
    let overlay = crate::raster::read_ppm(&ppm).unwrap();
    for i in 0..4 {
        assert_eq!(overlay.pixels[i * 3], 20);
        assert_eq!(overlay.pixels[i * 3 + 1], 40);
        assert_eq!(overlay.pixels[i * 3 + 2], 60);
    }

    let spot = saliency_from(&[1.0, 0.0, 0.0, 0.0], side, side);
    export_heatmap(&spot, &image, &pgm, &ppm).unwrap();
    let overlay = crate::raster::read_ppm(&ppm).unwrap();
    assert_eq!(overlay.pixels[0], (0.5 * 40.0 + 127.5f64).round() as u8);
    assert_eq!(overlay.pixels[1], 40);
    assert_eq!(overlay.pixels[2], 60);
    let first_pgm = std::fs::read(&pgm).unwrap();
    let first_ppm = std::fs::read(&ppm).unwrap();
    export_heatmap(&spot, &image, &pgm, &ppm).unwrap();
    assert_eq!(std::fs::read(&pgm).unwrap(), first_pgm);
    assert_eq!(std::fs::read(&ppm).unwrap(), first_ppm);
}

#[test]
fn heatmap_rejects_mismatched_image() {
    let dir = tempfile::tempdir().unwrap();
    let image = Raster::filled(3, 3, 3, 10).unwrap();
    let map = saliency_from(&[0.0; 4], 2, 2);
    assert!(export_heatmap(
        &map,
        &image,
        &dir.path().join("a.pgm"),
        &dir.path().join("a.ppm")
    )
    .is_err());
}

#[test]
fn saliency_constructor_validates_scores() {
    assert!(SaliencyMap::new(2, 2, vec![0.0, 0.5, 1.0, 1.5]).is_err());
    assert!(SaliencyMap::new(2, 2, vec![0.0, 0.5, 1.0, f64::NAN]).is_err());
    assert!(SaliencyMap::new(2, 2, vec![0.0]).is_err());
    assert!(SaliencyMap::new(0, 2, vec![]).is_err());
}
