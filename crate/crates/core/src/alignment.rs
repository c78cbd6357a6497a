//! Dense visuo-tactile alignment.
//!
//! A tactile feature map is pooled into one descriptor by averaging over
//! locations. Scoring a descriptor against a visual feature map yields a
//! per-location similarity map; the pair score is that map's maximum. A
//! batch of N pairs yields an N×N score matrix whose diagonal holds the
//! positives; the symmetric InfoNCE loss trains both encoders on it.

use crate::encoders::FeatureMap;
use crate::error::{Error, Result};
use crate::numeric::graph::{Graph, Var};
use crate::numeric::kernels as k;
use crate::numeric::scalar::{c as sc, Scalar};
use crate::numeric::tensor::Tensor;

/// Loss/scoring configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// InfoNCE temperature τ.
    pub temperature: f64,
    /// L2-normalize the descriptor and each visual location vector before
    /// the inner product.
    pub cosine: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.07,
            cosine: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::invalid(format!(
                "loss: temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Pooled tactile descriptor: one channel vector plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct TactileDescriptor<T: Scalar> {
    pub values: Tensor<T>,
    /// Sample or instance the descriptor came from, when known.
    pub provenance: Option<String>,
}

impl<T: Scalar> TactileDescriptor<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.rank() != 1 {
            return Err(Error::shape(format!(
                "descriptor must be rank 1, got {:?}",
                values.shape()
            )));
        }
        Ok(TactileDescriptor {
            values,
            provenance: None,
        })
    }

    pub fn with_provenance(mut self, p: impl Into<String>) -> Self {
        self.provenance = Some(p.into());
        self
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[0]
    }

    /// Elementwise mean of several same-dimension descriptors.
    pub fn mean_of(descs: &[TactileDescriptor<T>]) -> Result<TactileDescriptor<T>> {
        if descs.is_empty() {
            return Err(Error::invalid("mean of zero descriptors".to_string()));
        }
        let dim = descs[0].dim();
        let inv = T::one() / sc::<T>(descs.len() as f64);
        let mut acc = vec![T::zero(); dim];
        for d in descs {
            if d.dim() != dim {
                return Err(Error::shape(format!("descriptor dims {} vs {dim}", d.dim())));
            }
            for (a, v) in acc.iter_mut().zip(d.values.data()) {
                *a = *a + *v;
            }
        }
        for a in acc.iter_mut() {
            *a = *a * inv;
        }
        TactileDescriptor::new(Tensor::new(vec![dim], acc)?)
    }
}

/// Per-location similarity scores on the feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMapGrid<T: Scalar> {
    pub height: usize,
    pub width: usize,
    /// Row-major `[H, W]` scores.
    pub scores: Tensor<T>,
    pub source_descriptor: Option<String>,
    pub source_features: Option<String>,
}

impl<T: Scalar> SimilarityMapGrid<T> {
    pub fn at(&self, h: usize, w: usize) -> T {
        self.scores.data()[h * self.width + w]
    }
}

/// Average-pools a tactile feature map over its spatial extent into a single
/// descriptor.
pub fn aggregate_tactile<T: Scalar>(f_t: &FeatureMap<T>) -> Result<TactileDescriptor<T>> {
    if f_t.locations() == 0 {
        return Err(Error::invalid("aggregate: empty spatial extent".to_string()));
    }
    TactileDescriptor::new(k::mean_axis1(&f_t.as_matrix())?)
}

/// Scores the descriptor against every location of the visual feature map.
/// In cosine mode both sides are L2-normalized first (zero vectors stay
/// zero).
pub fn similarity_map<T: Scalar>(
    desc: &TactileDescriptor<T>,
    f_v: &FeatureMap<T>,
    cfg: &LossConfig,
) -> Result<SimilarityMapGrid<T>> {
    cfg.validate()?;
    if desc.dim() != f_v.channels() {
        return Err(Error::shape(format!(
            "similarity: descriptor dim {} vs feature channels {}",
            desc.dim(),
            f_v.channels()
        )));
    }
    if f_v.locations() == 0 {
        return Err(Error::invalid("similarity: empty spatial extent".to_string()));
    }
    let matrix = f_v.as_matrix();
    let scores = if cfg.cosine {
        let d = k::l2_normalize_vec(&desc.values)?;
        let m = k::l2_normalize_cols(&matrix)?;
        k::vecmat(&d, &m)?
    } else {
        k::vecmat(&desc.values, &matrix)?
    };
    Ok(SimilarityMapGrid {
        height: f_v.height(),
        width: f_v.width(),
        scores: scores.reshaped(vec![f_v.height(), f_v.width()])?,
        source_descriptor: desc.provenance.clone(),
        source_features: None,
    })
}

/// Pair score: the grid maximum and its location, ties resolving to the
/// smallest row-major `(h, w)`.
pub fn similarity_score<T: Scalar>(map: &SimilarityMapGrid<T>) -> Result<(T, (usize, usize))> {
    let (v, flat) = k::max_all(&map.scores)?;
    Ok((v, (flat / map.width, flat % map.width)))
}

/// N×N pair-score matrix: entry `(i, j)` scores tactile `i` against visual
/// `j`, so the diagonal holds the true pairs.
pub fn batch_similarity_matrix<T: Scalar>(
    tactile: &[FeatureMap<T>],
    visual: &[FeatureMap<T>],
    cfg: &LossConfig,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    if tactile.len() != visual.len() {
        return Err(Error::shape(format!(
            "batch: {} tactile vs {} visual",
            tactile.len(),
            visual.len()
        )));
    }
    if tactile.is_empty() {
        return Err(Error::invalid("batch: empty".to_string()));
    }
    let n = tactile.len();
    let descs = tactile
        .iter()
        .map(aggregate_tactile)
        .collect::<Result<Vec<_>>>()?;
    let mut data = Vec::with_capacity(n * n);
    for d in &descs {
        for v in visual {
            let map = similarity_map(d, v, cfg)?;
            data.push(similarity_score(&map)?.0);
        }
    }
    Tensor::new(vec![n, n], data)
}

/// Symmetric InfoNCE over a square score matrix (see
/// [`crate::numeric::kernels::infonce`] for the exact form).
pub fn symmetric_infonce<T: Scalar>(scores: &Tensor<T>, cfg: &LossConfig) -> Result<T> {
    cfg.validate()?;
    k::infonce(scores, sc::<T>(cfg.temperature))
}

/// Differentiable descriptor: spatial mean of a `[C, M]` feature-matrix node.
pub fn graph_descriptor<T: Scalar>(graph: &mut Graph<T>, features: Var) -> Result<Var> {
    graph.mean_axis1(features)
}

/// Differentiable batch loss over `[C, M]` feature-matrix nodes; returns the
/// scalar loss node and the N×N score-matrix node.
pub fn graph_batch_loss<T: Scalar>(
    graph: &mut Graph<T>,
    tactile: &[Var],
    visual: &[Var],
    cfg: &LossConfig,
) -> Result<(Var, Var)> {
    cfg.validate()?;
    if tactile.len() != visual.len() || tactile.is_empty() {
        return Err(Error::shape(format!(
            "batch: {} tactile vs {} visual",
            tactile.len(),
            visual.len()
        )));
    }
    let n = tactile.len();
    let mut descs = Vec::with_capacity(n);
    for &t in tactile {
        let d = graph_descriptor(graph, t)?;
        descs.push(if cfg.cosine { graph.l2_normalize_vec(d)? } else { d });
    }
    let mut views = Vec::with_capacity(n);
    for &v in visual {
        views.push(if cfg.cosine { graph.l2_normalize_cols(v)? } else { v });
    }
    let mut scores = Vec::with_capacity(n * n);
    for &d in &descs {
        for &v in &views {
            let map = graph.vecmat(d, v)?;
            scores.push(graph.max_all(map)?);
        }
    }
    let s = graph.stack_matrix(&scores, n, n)?;
    let loss = graph.infonce(s, sc::<T>(cfg.temperature))?;
    Ok((loss, s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw() -> LossConfig {
        LossConfig {
            temperature: 0.07,
            cosine: false,
        }
    }

    fn fm(c: usize, h: usize, w: usize, data: Vec<f64>) -> FeatureMap<f64> {
        FeatureMap::new(c, h, w, data).unwrap()
    }

    fn seeded_values(seed: u64, n: usize) -> Vec<f64> {
        use rand::Rng;
        let mut r = crate::rng::derive_rng(seed, &[crate::rng::tag("align-test")]);
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn aggregate_constant_map() {
        let m = fm(3, 2, 2, vec![7.0; 12]);
        let d = aggregate_tactile(&m).unwrap();
        assert_eq!(d.values.data(), &[7.0, 7.0, 7.0]);
    }

    #[test]
    fn aggregate_singleton_is_the_vector() {
        let m = fm(4, 1, 1, vec![1.0, -2.0, 0.5, 3.0]);
        let d = aggregate_tactile(&m).unwrap();
        assert_eq!(d.values.data(), &[1.0, -2.0, 0.5, 3.0]);
    }

    #[test]
    fn aggregate_matches_double_loop_oracle() {
        let m = fm(4, 3, 3, seeded_values(1, 36));
        let d = aggregate_tactile(&m).unwrap();
        for c in 0..4 {
            let mut s = 0.0;
            for h in 0..3 {
                for w in 0..3 {
                    s += m.at(c, h, w);
                }
            }
            assert!((d.values.data()[c] - s / 9.0).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_rejects_empty_extent() {
        let m = fm(4, 0, 3, vec![]);
        assert!(aggregate_tactile(&m).is_err());
    }

    #[test]
    fn aggregate_is_linear() {
        let a = fm(3, 2, 2, seeded_values(2, 12));
        let b = fm(3, 2, 2, seeded_values(3, 12));
        let sum = fm(
            3,
            2,
            2,
            a.tensor()
                .data()
                .iter()
                .zip(b.tensor().data())
                .map(|(x, y)| x + y)
                .collect(),
        );
        let da = aggregate_tactile(&a).unwrap();
        let db = aggregate_tactile(&b).unwrap();
        let ds = aggregate_tactile(&sum).unwrap();
        for i in 0..3 {
            assert!((ds.values.data()[i] - da.values.data()[i] - db.values.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn similarity_map_zero_descriptor_raw() {
        let d = TactileDescriptor::new(Tensor::zeros(vec![3])).unwrap();
        let v = fm(3, 2, 2, seeded_values(4, 12));
        let map = similarity_map(&d, &v, &raw()).unwrap();
        assert!(map.scores.data().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn similarity_map_one_hot_channels() {
        // v has channel c equal to one-hot at location c (C = M = 4)
        let mut data = vec![0.0; 16];
        for c in 0..4 {
            data[c * 4 + c] = 1.0;
        }
        let v = fm(4, 2, 2, data);
        let d = TactileDescriptor::new(Tensor::new(vec![4], vec![0.0, 1.0, 0.0, 0.0]).unwrap()).unwrap();
        let map = similarity_map(&d, &v, &raw()).unwrap();
        assert_eq!(map.scores.data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn similarity_map_matches_loop_oracle() {
        let d = TactileDescriptor::new(Tensor::new(vec![3], seeded_values(5, 3)).unwrap()).unwrap();
        let v = fm(3, 2, 2, seeded_values(6, 12));
        let map = similarity_map(&d, &v, &raw()).unwrap();
        for h in 0..2 {
            for w in 0..2 {
                let mut s = 0.0;
                for c in 0..3 {
                    s += d.values.data()[c] * v.at(c, h, w);
                }
                assert!((map.at(h, w) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn similarity_map_rejects_channel_mismatch() {
        let d = TactileDescriptor::new(Tensor::zeros(vec![4])).unwrap();
        let v = fm(3, 2, 2, vec![0.0; 12]);
        assert!(similarity_map(&d, &v, &raw()).is_err());
    }

    #[test]
    fn cosine_zero_vectors_score_zero() {
        let cfg = LossConfig::default();
        let d = TactileDescriptor::new(Tensor::zeros(vec![3])).unwrap();
        let v = fm(3, 1, 2, vec![1.0, 0.0, 2.0, 0.0, 3.0, 0.0]);
        let map = similarity_map(&d, &v, &cfg).unwrap();
        assert!(map.scores.data().iter().all(|&s| s == 0.0));
        // zero visual column also stays zero
        let d2 = TactileDescriptor::new(Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap()).unwrap();
        let map2 = similarity_map(&d2, &v, &cfg).unwrap();
        assert_eq!(map2.at(0, 1), 0.0);
    }

    #[test]
    fn scaling_behavior_raw_vs_cosine() {
        let d = TactileDescriptor::new(Tensor::new(vec![3], seeded_values(7, 3)).unwrap()).unwrap();
        let v = fm(3, 2, 2, seeded_values(8, 12));
        let v2 = fm(3, 2, 2, v.tensor().data().iter().map(|x| 3.0 * x).collect());
        let raw_map = similarity_map(&d, &v, &raw()).unwrap();
        let raw_map2 = similarity_map(&d, &v2, &raw()).unwrap();
        let cos_map = similarity_map(&d, &v, &LossConfig::default()).unwrap();
        let cos_map2 = similarity_map(&d, &v2, &LossConfig::default()).unwrap();
        for i in 0..4 {
            assert!((raw_map2.scores.data()[i] - 3.0 * raw_map.scores.data()[i]).abs() < 1e-12);
            assert!((cos_map2.scores.data()[i] - cos_map.scores.data()[i]).abs() < 1e-12);
        }
        // argmax is unchanged by positive scaling in both modes
        assert_eq!(
            similarity_score(&raw_map).unwrap().1,
            similarity_score(&raw_map2).unwrap().1
        );
    }

    #[test]
    fn score_constant_map_picks_origin() {
        let map = SimilarityMapGrid {
            height: 3,
            width: 3,
            scores: Tensor::full(vec![3, 3], 0.5).unwrap(),
            source_descriptor: None,
            source_features: None,
        };
        assert_eq!(similarity_score(&map).unwrap(), (0.5, (0, 0)));
    }

    #[test]
    fn score_hand_example() {
        let map = SimilarityMapGrid {
            height: 2,
            width: 2,
            scores: Tensor::new(vec![2, 2], vec![0.1, 0.9, 0.3, 0.2]).unwrap(),
            source_descriptor: None,
            source_features: None,
        };
        assert_eq!(similarity_score(&map).unwrap(), (0.9, (0, 1)));
    }

    #[test]
    fn score_matches_loop_oracle_and_dominates() {
        let scores = Tensor::new(vec![7, 7], seeded_values(9, 49)).unwrap();
        let map = SimilarityMapGrid {
            height: 7,
            width: 7,
            scores: scores.clone(),
            source_descriptor: None,
            source_features: None,
        };
        let (v, (h, w)) = similarity_score(&map).unwrap();
        let mut best = f64::NEG_INFINITY;
        let mut at = (0, 0);
        for hh in 0..7 {
            for ww in 0..7 {
                if map.at(hh, ww) > best {
                    best = map.at(hh, ww);
                    at = (hh, ww);
                }
            }
        }
        assert_eq!((v, (h, w)), (best, at));
        assert!(scores.data().iter().all(|&s| v >= s));
    }

    #[test]
    fn batch_matrix_singleton() {
        let t = fm(2, 1, 1, vec![1.0, 2.0]);
        let v = fm(2, 1, 1, vec![0.5, -1.0]);
        let s = batch_similarity_matrix(&[t], &[v], &raw()).unwrap();
        assert_eq!(s.shape(), &[1, 1]);
        assert!((s.data()[0] - (1.0 * 0.5 + 2.0 * -1.0)).abs() < 1e-12);
    }

    #[test]
    fn batch_matrix_identical_lists_cosine_diagonal_one() {
        // all patches of each map equal the same unit-direction vector
        let maps: Vec<FeatureMap<f64>> = (0..3)
            .map(|i| {
                let mut vals = vec![0.0; 2 * 4];
                for m in 0..4 {
                    vals[m] = if i == 0 { 1.0 } else { 0.6 * (i as f64) };
                    vals[4 + m] = if i == 0 { 0.0 } else { 0.8 * (i as f64) };
                }
                fm(2, 2, 2, vals)
            })
            .collect();
        let s = batch_similarity_matrix(&maps, &maps, &LossConfig::default()).unwrap();
        for i in 0..3 {
            assert!((s.at2(i, i) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_matrix_matches_compositional_oracle() {
        let cfg = LossConfig::default();
        let tact: Vec<FeatureMap<f64>> =
            (0..3).map(|i| fm(3, 2, 2, seeded_values(10 + i, 12))).collect();
        let vis: Vec<FeatureMap<f64>> =
            (0..3).map(|i| fm(3, 2, 2, seeded_values(20 + i, 12))).collect();
        let s = batch_similarity_matrix(&tact, &vis, &cfg).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let d = aggregate_tactile(&tact[i]).unwrap();
                let map = similarity_map(&d, &vis[j], &cfg).unwrap();
                let (v, _) = similarity_score(&map).unwrap();
                assert_eq!(s.at2(i, j), v);
            }
        }
    }

    #[test]
    fn infonce_single_pair_is_zero() {
        let s = Tensor::new(vec![1, 1], vec![3.7]).unwrap();
        assert_eq!(symmetric_infonce(&s, &raw()).unwrap(), 0.0);
    }

    #[test]
    fn infonce_uniform_two_is_ln2() {
        let s = Tensor::full(vec![2, 2], 0.3).unwrap();
        let l = symmetric_infonce(&s, &raw()).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12, "{l}");
    }

    /// Independently scripted direction-by-direction reference.
    fn infonce_reference(s: &Tensor<f64>, tau: f64) -> f64 {
        let n = s.shape()[0];
        let mut dir1 = 0.0;
        let mut dir2 = 0.0;
        for i in 0..n {
            let num = (s.at2(i, i) / tau).exp();
            let den1: f64 = (0..n).map(|j| (s.at2(i, j) / tau).exp()).sum();
            let den2: f64 = (0..n).map(|j| (s.at2(j, i) / tau).exp()).sum();
            dir1 += -(num / den1).ln();
            dir2 += -(num / den2).ln();
        }
        (dir1 / n as f64 + dir2 / n as f64) / 2.0
    }

    #[test]
    fn infonce_matches_scripted_reference() {
        let s = Tensor::new(vec![3, 3], seeded_values(30, 9)).unwrap();
        let mine = symmetric_infonce(&s, &raw()).unwrap();
        let reference = infonce_reference(&s, 0.07);
        assert!((mine - reference).abs() < 1e-10, "{mine} vs {reference}");
    }

    #[test]
    fn infonce_permutation_invariant() {
        let s = Tensor::new(vec![4, 4], seeded_values(31, 16)).unwrap();
        let perm = [2usize, 0, 3, 1];
        let p = Tensor::from_fn(vec![4, 4], |flat| s.at2(perm[flat / 4], perm[flat % 4])).unwrap();
        let a = symmetric_infonce(&s, &raw()).unwrap();
        let b = symmetric_infonce(&p, &raw()).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn infonce_shift_invariant() {
        let s = Tensor::new(vec![4, 4], seeded_values(32, 16)).unwrap();
        let shifted = s.map(|v| v + 0.37).unwrap();
        let a = symmetric_infonce(&s, &raw()).unwrap();
        let b = symmetric_infonce(&shifted, &raw()).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn infonce_nonnegative_and_margin_monotone() {
        for seed in 0..20 {
            let s = Tensor::new(vec![3, 3], seeded_values(40 + seed, 9)).unwrap();
            let loss = symmetric_infonce(&s, &raw()).unwrap();
            assert!(loss >= 0.0);
            let boosted = Tensor::from_fn(vec![3, 3], |flat| {
                let (i, j) = (flat / 3, flat % 3);
                s.at2(i, j) + if i == j { 0.05 } else { 0.0 }
            })
            .unwrap();
            assert!(symmetric_infonce(&boosted, &raw()).unwrap() < loss);
        }
    }

    #[test]
    fn infonce_rejects_bad_inputs() {
        let s = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert!(symmetric_infonce(&s, &raw()).is_err());
        let sq = Tensor::<f64>::zeros(vec![2, 2]);
        let bad_tau = LossConfig {
            temperature: 0.0,
            cosine: false,
        };
        assert!(symmetric_infonce(&sq, &bad_tau).is_err());
    }

    #[test]
    fn graph_batch_loss_matches_pure_path() {
        let cfg = LossConfig::default();
        let tact: Vec<FeatureMap<f64>> =
            (0..3).map(|i| fm(3, 2, 2, seeded_values(50 + i, 12))).collect();
        let vis: Vec<FeatureMap<f64>> =
            (0..3).map(|i| fm(3, 2, 2, seeded_values(60 + i, 12))).collect();
        let pure_s = batch_similarity_matrix(&tact, &vis, &cfg).unwrap();
        let pure_loss = symmetric_infonce(&pure_s, &cfg).unwrap();

        let mut g = Graph::new();
        let tv: Vec<Var> = tact.iter().map(|m| g.constant(m.as_matrix())).collect();
        let vv: Vec<Var> = vis.iter().map(|m| g.constant(m.as_matrix())).collect();
        let (loss, s) = graph_batch_loss(&mut g, &tv, &vv, &cfg).unwrap();
        assert!(g.value(s).bit_eq(&pure_s));
        assert_eq!(g.scalar_value(loss).unwrap(), pure_loss);
    }
}
