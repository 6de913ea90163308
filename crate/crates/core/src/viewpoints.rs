//! Maximization step: nearest-neighbour weighted anchors and top-K outlier
//! viewpoints per object, plus the random-sampling baselines.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{OvtError, Result};
use crate::linalg::{cosine_distance, Matrix};
use crate::seeding::Rng;

/// Neighbours used for each view's anchor weight.
pub const ANCHOR_NEIGHBORS: usize = 5;
/// Floor on the summed neighbour distance.
pub const ANCHOR_EPS: f64 = 1e-8;

/// One object's view embeddings, one row per view.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectEmbeddings {
    pub object_id: usize,
    pub embeddings: Matrix,
    pub view_ids: Vec<usize>,
}

impl ObjectEmbeddings {
    pub fn new(object_id: usize, embeddings: Matrix, view_ids: Vec<usize>) -> Result<Self> {
        if embeddings.rows() == 0 {
            return Err(OvtError::Empty("object views"));
        }
        if view_ids.len() != embeddings.rows() {
            return Err(OvtError::dims("ObjectEmbeddings", embeddings.rows(), view_ids.len()));
        }
        Ok(Self {
            object_id,
            embeddings,
            view_ids,
        })
    }

    pub fn num_views(&self) -> usize {
        self.embeddings.rows()
    }

    fn distance(&self, i: usize, j: usize) -> Result<f64> {
        cosine_distance(self.embeddings.row(i), self.embeddings.row(j))
    }
}

fn by_distance_then_index(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    a.1.total_cmp(&b.1).then(a.0.cmp(&b.0))
}

/// The `min(k, M−1)` closest other views of view `j`, nearest first.
pub fn nearest_neighbors(obj: &ObjectEmbeddings, j: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(OvtError::Config("neighbour count must be >= 1".into()));
    }
    if j >= obj.num_views() {
        return Err(OvtError::dims("nearest_neighbors", j, obj.num_views()));
    }
    let mut cand = Vec::with_capacity(obj.num_views() - 1);
    for h in (0..obj.num_views()).filter(|&h| h != j) {
        cand.push((h, obj.distance(j, h)?));
    }
    cand.sort_by(by_distance_then_index);
    cand.truncate(k);
    Ok(cand.into_iter().map(|(h, _)| h).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorResult {
    pub anchor: Vec<f64>,
    /// Normalized weights, summing to one.
    pub weights: Vec<f64>,
    pub raw_weights: Vec<f64>,
}

/// Weighted centroid where each view's weight is the inverse of its summed
/// distance to its nearest neighbours.
pub fn anchor_embedding(obj: &ObjectEmbeddings) -> Result<AnchorResult> {
    let m = obj.num_views();
    let k = ANCHOR_NEIGHBORS.min(m.saturating_sub(1));
    let mut raw_weights = Vec::with_capacity(m);
    for j in 0..m {
        let mut sum = 0.0;
        if k > 0 {
            for h in nearest_neighbors(obj, j, k)? {
                sum += obj.distance(j, h)?;
            }
        } else {
            // Still reject a zero row in the singleton case.
            obj.distance(j, j)?;
        }
        raw_weights.push(1.0 / sum.max(ANCHOR_EPS));
    }
    let total: f64 = raw_weights.iter().sum();
    let weights: Vec<f64> = raw_weights.iter().map(|w| w / total).collect();
    let mut anchor = vec![0.0; obj.embeddings.cols()];
    for (j, w) in weights.iter().enumerate() {
        for (a, z) in anchor.iter_mut().zip(obj.embeddings.row(j)) {
            *a += w * z;
        }
    }
    Ok(AnchorResult {
        anchor,
        weights,
        raw_weights,
    })
}

/// The `min(k, M)` views farthest from `anchor`, farthest first, as `(index, distance)`.
pub fn select_outliers(obj: &ObjectEmbeddings, anchor: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
    if k == 0 {
        return Err(OvtError::Config("outlier count K must be >= 1".into()));
    }
    let mut cand = Vec::with_capacity(obj.num_views());
    for j in 0..obj.num_views() {
        cand.push((j, cosine_distance(obj.embeddings.row(j), anchor)?));
    }
    cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    cand.truncate(k);
    Ok(cand)
}

/// `min(k, M)` distinct view indices drawn uniformly, ascending.
pub fn random_outliers(obj: &ObjectEmbeddings, k: usize, rng: &mut Rng) -> Vec<usize> {
    let m = obj.num_views();
    let mut idx = sample(rng, m, k.min(m)).into_vec();
    idx.sort_unstable();
    idx
}

/// A uniformly chosen view as the anchor (one-hot weights).
pub fn random_anchor(obj: &ObjectEmbeddings, rng: &mut Rng) -> AnchorResult {
    let m = obj.num_views();
    let pick = rng.random_range(0..m);
    let weights: Vec<f64> = (0..m).map(|j| if j == pick { 1.0 } else { 0.0 }).collect();
    AnchorResult {
        anchor: obj.embeddings.row(pick).to_vec(),
        raw_weights: weights.clone(),
        weights,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    /// Weighted anchors, farthest outliers.
    #[default]
    Ovt,
    /// Weighted anchors, random outliers.
    Ros,
    /// Random anchor view, random outliers.
    Raos,
}

impl SamplingMode {
    pub const ALL: [SamplingMode; 3] = [SamplingMode::Ovt, SamplingMode::Ros, SamplingMode::Raos];

    pub fn name(self) -> &'static str {
        match self {
            SamplingMode::Ovt => "ovt",
            SamplingMode::Ros => "ros",
            SamplingMode::Raos => "raos",
        }
    }
}

impl std::str::FromStr for SamplingMode {
    type Err = OvtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ovt" => Ok(SamplingMode::Ovt),
            "ros" => Ok(SamplingMode::Ros),
            "raos" => Ok(SamplingMode::Raos),
            other => Err(OvtError::Config(format!(
                "unknown sampling mode {other:?} (expected ovt, ros or raos)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectPlan {
    pub anchor: Vec<f64>,
    pub weights: Vec<f64>,
    /// Row indices within the object, in selection order.
    pub outliers: Vec<usize>,
    pub view_ids: Vec<usize>,
    pub distances: Vec<f64>,
}

/// Anchors and outlier sets for every object, keyed by object id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochPlan {
    pub objects: BTreeMap<usize, ObjectPlan>,
}

impl EpochPlan {
    /// SHA-256 of the JSON encoding.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("plan serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn num_outliers(&self) -> usize {
        self.objects.values().map(|p| p.outliers.len()).sum()
    }

    /// Mean anchor distance over all selected outliers.
    pub fn mean_outlier_distance(&self) -> f64 {
        let n = self.num_outliers();
        if n == 0 {
            return 0.0;
        }
        self.objects.values().flat_map(|p| &p.distances).sum::<f64>() / n as f64
    }
}

fn plan_object(obj: &ObjectEmbeddings, anchor: AnchorResult, outliers: Vec<usize>) -> Result<ObjectPlan> {
    let distances = outliers
        .iter()
        .map(|&j| cosine_distance(obj.embeddings.row(j), &anchor.anchor))
        .collect::<Result<Vec<_>>>()?;
    Ok(ObjectPlan {
        view_ids: outliers.iter().map(|&j| obj.view_ids[j]).collect(),
        anchor: anchor.anchor,
        weights: anchor.weights,
        outliers,
        distances,
    })
}

fn assemble(objects: &[ObjectEmbeddings], plans: Vec<ObjectPlan>) -> Result<EpochPlan> {
    let mut out = BTreeMap::new();
    for (obj, plan) in objects.iter().zip(plans) {
        if out.insert(obj.object_id, plan).is_some() {
            return Err(OvtError::Config(format!("duplicate object id {}", obj.object_id)));
        }
    }
    Ok(EpochPlan { objects: out })
}

fn ovt_object(obj: &ObjectEmbeddings, k: usize) -> Result<ObjectPlan> {
    let anchor = anchor_embedding(obj)?;
    let outliers = select_outliers(obj, &anchor.anchor, k)?;
    plan_object(obj, anchor, outliers.into_iter().map(|(j, _)| j).collect())
}

/// Weighted anchors and top-K outliers for every object.
///
/// `threads > 1` runs objects on a scoped pool; the result is identical to the
/// sequential build.
pub fn build_epoch_plan(objects: &[ObjectEmbeddings], k: usize, threads: usize) -> Result<EpochPlan> {
    if k == 0 {
        return Err(OvtError::Config("outlier count K must be >= 1".into()));
    }
    let plans = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| OvtError::Config(format!("thread pool: {e}")))?;
        pool.install(|| objects.par_iter().map(|o| ovt_object(o, k)).collect::<Result<Vec<_>>>())?
    } else {
        objects.iter().map(|o| ovt_object(o, k)).collect::<Result<Vec<_>>>()?
    };
    assemble(objects, plans)
}

/// Plan for any sampling mode. Random modes consume `rng` object by object in
/// slice order.
pub fn build_plan(
    objects: &[ObjectEmbeddings],
    k: usize,
    mode: SamplingMode,
    rng: &mut Rng,
    threads: usize,
) -> Result<EpochPlan> {
    match mode {
        SamplingMode::Ovt => build_epoch_plan(objects, k, threads),
        SamplingMode::Ros | SamplingMode::Raos => {
            if k == 0 {
                return Err(OvtError::Config("outlier count K must be >= 1".into()));
            }
            let mut plans = Vec::with_capacity(objects.len());
            for obj in objects {
                let anchor = if mode == SamplingMode::Ros {
                    anchor_embedding(obj)?
                } else {
                    random_anchor(obj, rng)
                };
                let outliers = random_outliers(obj, k, rng);
                plans.push(plan_object(obj, anchor, outliers)?);
            }
            assemble(objects, plans)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;
    use proptest::prelude::*;

    fn obj(rows: &[Vec<f64>]) -> ObjectEmbeddings {
        ObjectEmbeddings::new(0, Matrix::from_rows(rows).unwrap(), (0..rows.len()).collect()).unwrap()
    }

    fn random_obj(id: usize, m: usize, d: usize, rng: &mut seeding::Rng) -> ObjectEmbeddings {
        let e = Matrix::from_fn(m, d, |_, _| rng.random_range(-1.0..1.0));
        ObjectEmbeddings::new(id, e, (0..m).map(|j| 100 + j).collect()).unwrap()
    }

    /// Full distance matrix, then sort every row.
    fn oracle_neighbors(o: &ObjectEmbeddings, j: usize, k: usize) -> Vec<usize> {
        let m = o.num_views();
        let mut all: Vec<(f64, usize)> = (0..m)
            .filter(|&h| h != j)
            .map(|h| (cosine_distance(o.embeddings.row(j), o.embeddings.row(h)).unwrap(), h))
            .collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        all.into_iter().take(k).map(|(_, h)| h).collect()
    }

    #[test]
    fn neighbours_small_cases() {
        let o = obj(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let mut n = nearest_neighbors(&o, 0, 5).unwrap();
        n.sort();
        assert_eq!(n, vec![1, 2]);
        let dup = obj(&vec![vec![1.0, 2.0]; 6]);
        assert_eq!(nearest_neighbors(&dup, 3, 3).unwrap(), vec![0, 1, 2]);
        assert!(nearest_neighbors(&obj(&[vec![1.0, 0.0]]), 0, 5).unwrap().is_empty());
    }

    #[test]
    fn neighbours_match_sort_oracle() {
        let mut rng = seeding::stream(1, "vp");
        let o = random_obj(0, 10, 8, &mut rng);
        for j in 0..10 {
            assert_eq!(nearest_neighbors(&o, j, 5).unwrap(), oracle_neighbors(&o, j, 5));
        }
    }

    #[test]
    fn anchor_small_cases() {
        let same = obj(&vec![vec![0.3, -0.4]; 4]);
        let a = anchor_embedding(&same).unwrap();
        for w in &a.weights {
            assert!((w - 0.25).abs() < 1e-15);
        }
        for (x, y) in a.anchor.iter().zip([0.3, -0.4]) {
            assert!((x - y).abs() < 1e-15);
        }

        let pair = obj(&[vec![1.0, 0.0], vec![0.0, 3.0]]);
        let a = anchor_embedding(&pair).unwrap();
        assert_eq!(a.weights, vec![0.5, 0.5]);
        assert_eq!(a.anchor, vec![0.5, 1.5]);

        let single = obj(&[vec![2.0, -1.0]]);
        let a = anchor_embedding(&single).unwrap();
        assert_eq!(a.anchor, vec![2.0, -1.0]);
        assert_eq!(a.weights, vec![1.0]);

        assert!(anchor_embedding(&obj(&[vec![0.0, 0.0]])).is_err());
        assert!(anchor_embedding(&obj(&[vec![1.0, 0.0], vec![0.0, 0.0]])).is_err());
    }

    #[test]
    fn three_point_anchor_and_outlier() {
        let h = 0.5f64.sqrt();
        let o = obj(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![h, h]]);
        let a = anchor_embedding(&o).unwrap();
        // Hand evaluation: Σd = 1 + (1 − h) for the axis views, 2(1 − h) for the diagonal.
        let w_axis = 1.0 / (2.0 - h);
        let w_diag = 1.0 / (2.0 * (1.0 - h));
        let total = 2.0 * w_axis + w_diag;
        let expected = [w_axis / total, w_axis / total, w_diag / total];
        for (got, want) in a.weights.iter().zip(expected) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((a.weights[0] - 0.2377).abs() < 1e-4);
        assert!((a.weights[2] - 0.5246).abs() < 1e-4);
        assert!((a.anchor[0] - 0.6086).abs() < 1e-4);
        assert!((a.anchor[1] - 0.6086).abs() < 1e-4);
        let out = select_outliers(&o, &a.anchor, 1).unwrap();
        assert_eq!(out[0].0, 0);
        assert!((out[0].1 - (1.0 - h)).abs() < 1e-12);
    }

    #[test]
    fn outlier_saturation_and_ties() {
        let mut rng = seeding::stream(2, "vp");
        let o = random_obj(0, 4, 3, &mut rng);
        let a = anchor_embedding(&o).unwrap();
        let mut all: Vec<usize> = select_outliers(&o, &a.anchor, 9).unwrap().iter().map(|p| p.0).collect();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        let same = obj(&vec![vec![1.0, 1.0]; 5]);
        let out = select_outliers(&same, &[1.0, 1.0], 3).unwrap();
        assert_eq!(out, vec![(0, 0.0), (1, 0.0), (2, 0.0)]);
    }

    #[test]
    fn singleton_plan() {
        let o = obj(&[vec![1.0, 2.0]]);
        let plan = build_epoch_plan(&[o], 5, 1).unwrap();
        let p = &plan.objects[&0];
        assert_eq!(p.anchor, vec![1.0, 2.0]);
        assert_eq!(p.outliers, vec![0]);
        assert_eq!(p.distances, vec![0.0]);
    }

    #[test]
    fn plan_is_order_independent_and_thread_independent() {
        let mut rng = seeding::stream(3, "vp");
        let objects: Vec<ObjectEmbeddings> = (0..30).map(|i| random_obj(i, 2 + i % 9, 5, &mut rng)).collect();
        let plan = build_epoch_plan(&objects, 5, 1).unwrap();
        let mut rev = objects.clone();
        rev.reverse();
        assert_eq!(build_epoch_plan(&rev, 5, 1).unwrap(), plan);
        assert_eq!(build_epoch_plan(&objects, 5, 4).unwrap(), plan);
        let json = serde_json::to_string(&plan).unwrap();
        assert_eq!(serde_json::from_str::<EpochPlan>(&json).unwrap(), plan);
    }

    #[test]
    fn random_modes_cover_all_views_when_k_saturates() {
        let mut rng = seeding::stream(4, "vp");
        let o = random_obj(7, 6, 4, &mut rng);
        for mode in [SamplingMode::Ros, SamplingMode::Raos] {
            let plan = build_plan(std::slice::from_ref(&o), 6, mode, &mut rng, 1).unwrap();
            assert_eq!(plan.objects[&7].outliers, (0..6).collect::<Vec<_>>());
        }
    }

    #[test]
    fn random_modes_are_seed_deterministic() {
        let mut rng = seeding::stream(5, "vp");
        let objects: Vec<ObjectEmbeddings> = (0..10).map(|i| random_obj(i, 12, 4, &mut rng)).collect();
        for mode in SamplingMode::ALL {
            let a = build_plan(&objects, 5, mode, &mut seeding::stream(9, "s"), 1).unwrap();
            let b = build_plan(&objects, 5, mode, &mut seeding::stream(9, "s"), 1).unwrap();
            assert_eq!(a.digest(), b.digest());
        }
        let ros = build_plan(&objects, 5, SamplingMode::Ros, &mut seeding::stream(9, "s"), 1).unwrap();
        let ovt = build_epoch_plan(&objects, 5, 1).unwrap();
        for (id, p) in &ros.objects {
            assert_eq!(p.anchor, ovt.objects[id].anchor);
        }
    }

    #[test]
    fn random_outliers_are_uniform() {
        let mut rng = seeding::stream(6, "vp");
        let o = random_obj(0, 10, 3, &mut rng);
        let (draws, k) = (100_000usize, 3usize);
        let mut counts = [0usize; 10];
        for _ in 0..draws {
            let picks = random_outliers(&o, k, &mut rng);
            assert_eq!(picks.len(), k);
            assert!(picks.windows(2).all(|w| w[0] < w[1]));
            for j in picks {
                counts[j] += 1;
            }
        }
        let p = k as f64 / 10.0;
        let expected = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99.9th percentile of chi-square with 9 degrees of freedom.
        assert!(chi2 < 27.88, "chi2 {chi2}");
        for c in counts {
            assert!((c as f64 - expected).abs() < 3.0 * sigma, "{counts:?}");
        }

        let mut anchors = [0usize; 10];
        for _ in 0..draws {
            let a = random_anchor(&o, &mut rng);
            anchors[a.weights.iter().position(|&w| w == 1.0).unwrap()] += 1;
        }
        let e = draws as f64 / 10.0;
        let chi2: f64 = anchors.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        assert!(chi2 < 27.88, "chi2 {chi2}");
    }

    fn object_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
        (1usize..10, 2usize..6).prop_flat_map(|(m, d)| (Just(m), Just(d), prop::collection::vec(-1.0f64..1.0, m * d)))
    }

    proptest! {
        #[test]
        fn anchor_weights_form_convex_combination((m, d, v) in object_strategy()) {
            let o = ObjectEmbeddings::new(0, Matrix::from_vec(m, d, v).unwrap(), (0..m).collect()).unwrap();
            prop_assume!(o.embeddings.iter_rows().all(|r| crate::linalg::norm(r) > 1e-3));
            let a = anchor_embedding(&o).unwrap();
            prop_assert!((a.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(a.weights.iter().all(|&w| w >= 0.0));
        }

        #[test]
        fn anchor_permutation_equivariant((m, d, v) in object_strategy(), shift in 0usize..10) {
            let e = Matrix::from_vec(m, d, v).unwrap();
            prop_assume!(e.iter_rows().all(|r| crate::linalg::norm(r) > 1e-3));
            let o = ObjectEmbeddings::new(0, e.clone(), (0..m).collect()).unwrap();
            let perm = |j: usize| (j + shift) % m;
            let p = ObjectEmbeddings::new(0, Matrix::from_fn(m, d, |i, c| e.get(perm(i), c)), (0..m).collect()).unwrap();
            let a = anchor_embedding(&o).unwrap();
            let b = anchor_embedding(&p).unwrap();
            // Distance ties can reorder neighbour sets only among equal
            // distances, which leaves the sums unchanged.
            for i in 0..m {
                prop_assert!((b.weights[i] - a.weights[perm(i)]).abs() < 1e-12);
            }
            for (x, y) in a.anchor.iter().zip(&b.anchor) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn outliers_dominate_unselected((m, d, v) in object_strategy(), k in 1usize..12) {
            let o = ObjectEmbeddings::new(0, Matrix::from_vec(m, d, v).unwrap(), (0..m).collect()).unwrap();
            prop_assume!(o.embeddings.iter_rows().all(|r| crate::linalg::norm(r) > 1e-3));
            let a = anchor_embedding(&o).unwrap();
            prop_assume!(crate::linalg::norm(&a.anchor) > 1e-6);
            let sel = select_outliers(&o, &a.anchor, k).unwrap();
            prop_assert_eq!(sel.len(), k.min(m));
            let chosen: Vec<usize> = sel.iter().map(|p| p.0).collect();
            let min_sel = sel.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
            for j in (0..m).filter(|j| !chosen.contains(j)) {
                prop_assert!(cosine_distance(o.embeddings.row(j), &a.anchor).unwrap() <= min_sel);
            }
        }

        #[test]
        fn scale_leaves_selection_unchanged((m, d, v) in object_strategy(), scale in 0.01f64..100.0) {
            let e = Matrix::from_vec(m, d, v).unwrap();
            prop_assume!(e.iter_rows().all(|r| crate::linalg::norm(r) > 1e-3));
            let mut s = e.clone();
            s.scale(scale);
            let o = ObjectEmbeddings::new(0, e, (0..m).collect()).unwrap();
            let so = ObjectEmbeddings::new(0, s, (0..m).collect()).unwrap();
            let a = anchor_embedding(&o).unwrap();
            let b = anchor_embedding(&so).unwrap();
            for (x, y) in a.weights.iter().zip(&b.weights) {
                prop_assert!((x - y).abs() < 1e-10);
            }
            for (x, y) in a.anchor.iter().zip(&b.anchor) {
                prop_assert!((x * scale - y).abs() < 1e-10 * scale.max(1.0));
            }
            prop_assume!(crate::linalg::norm(&a.anchor) > 1e-6);
            let sa: Vec<usize> = select_outliers(&o, &a.anchor, 3).unwrap().iter().map(|p| p.0).collect();
            let sb: Vec<usize> = select_outliers(&so, &b.anchor, 3).unwrap().iter().map(|p| p.0).collect();
            prop_assert_eq!(sa, sb);
        }
    }
}
