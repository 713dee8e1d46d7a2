//! Sequence-level routing distributions, cross-lingual divergence profiles,
//! middle-layer detection and task-expert identification.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::median;
use crate::model::{forward, Parameters, RoutingTrace};
use crate::scalar::Scalar;

/// Tolerance used when validating probability vectors.
pub const DIST_TOL: f64 = 1e-9;

/// Per-layer mean routing distribution over the generated positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqRoutingDist<T> {
    pub layers: Vec<Vec<T>>,
}

impl<T: Scalar> SeqRoutingDist<T> {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> &[T] {
        &self.layers[l]
    }

    pub fn to_f64(&self) -> SeqRoutingDist<f64> {
        SeqRoutingDist {
            layers: self
                .layers
                .iter()
                .map(|q| q.iter().map(|v| v.to_f64_lossless()).collect())
                .collect(),
        }
    }
}

/// One forward pass over `prompt ⊕ response`; the response span is marked as
/// generated.
pub fn teacher_force_trace<T: Scalar>(
    params: &Parameters<T>,
    prompt: &[u32],
    response: &[u32],
) -> Result<RoutingTrace<T>> {
    if response.is_empty() {
        return Err(Error::EmptyMask);
    }
    let seq: Vec<u32> = prompt.iter().chain(response).copied().collect();
    let (_, trace) = forward(params, &seq, true)?;
    let mut trace = trace.expect("capture requested");
    trace.generated_positions = (prompt.len()..seq.len()).collect();
    Ok(trace)
}

pub fn seq_routing_dist<T: Scalar>(trace: &RoutingTrace<T>) -> Result<SeqRoutingDist<T>> {
    let g = &trace.generated_positions;
    if g.is_empty() {
        return Err(Error::EmptyMask);
    }
    let inv = T::one() / T::from_usize(g.len()).unwrap();
    let layers = trace
        .layers
        .iter()
        .map(|m| {
            let mut q = vec![T::zero(); m.cols()];
            for &t in g {
                for (acc, &p) in q.iter_mut().zip(m.row(t)) {
                    *acc += p;
                }
            }
            q.iter_mut().for_each(|v| *v *= inv);
            q
        })
        .collect();
    Ok(SeqRoutingDist { layers })
}

pub fn validate_distribution<T: Scalar>(p: &[T]) -> Result<()> {
    let mut sum = 0.0;
    for &v in p {
        let v = v.to_f64_lossless();
        if !v.is_finite() || !(-DIST_TOL..=1.0 + DIST_TOL).contains(&v) {
            return Err(Error::InvalidDistribution(format!(
                "entry {v} outside [0, 1]"
            )));
        }
        sum += v;
    }
    if p.is_empty() || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidDistribution(format!("sums to {sum}")));
    }
    Ok(())
}

fn kl2<T: Scalar>(p: &[T], m: &[T]) -> T {
    let mut acc = T::zero();
    for (&pi, &mi) in p.iter().zip(m) {
        if pi > T::zero() {
            acc += pi * (pi / mi).log2();
        }
    }
    acc
}

/// Jensen–Shannon divergence with base-2 logarithms, so it lies in `[0, 1]`.
pub fn js_divergence<T: Scalar>(p: &[T], q: &[T]) -> Result<T> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch(p.len(), q.len()));
    }
    validate_distribution(p)?;
    validate_distribution(q)?;
    let half = T::lit(0.5);
    let m: Vec<T> = p.iter().zip(q).map(|(&a, &b)| (a + b) * half).collect();
    let js = half * kl2(p, &m) + half * kl2(q, &m);
    Ok(js.max(T::zero()).min(T::one()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceProfile {
    pub mean_div: Vec<f64>,
    pub n: usize,
}

impl DivergenceProfile {
    pub fn n_layers(&self) -> usize {
        self.mean_div.len()
    }

    /// Mean divergence over an inclusive layer range.
    pub fn range_mean(&self, range: LayerRange) -> f64 {
        let vals = &self.mean_div[range.start()..=range.end()];
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Per-layer mean JS divergence over pairs matched by id.
pub fn divergence_profile<T: Scalar>(
    src: &BTreeMap<String, SeqRoutingDist<T>>,
    tgt: &BTreeMap<String, SeqRoutingDist<T>>,
) -> Result<DivergenceProfile> {
    if src.is_empty() {
        return Err(Error::Analysis("no pairs to profile".into()));
    }
    if let Some(id) = src
        .keys()
        .find(|k| !tgt.contains_key(*k))
        .or_else(|| tgt.keys().find(|k| !src.contains_key(*k)))
    {
        return Err(Error::IdMismatch(id.clone()));
    }
    let n_layers = src.values().next().unwrap().n_layers();
    let mut sums = vec![0.0; n_layers];
    for (id, qs) in src {
        let qt = &tgt[id];
        if qs.n_layers() != n_layers || qt.n_layers() != n_layers {
            return Err(Error::Analysis(format!("{id}: layer count differs")));
        }
        for (l, s) in sums.iter_mut().enumerate() {
            *s += js_divergence(qs.layer(l), qt.layer(l))?.to_f64_lossless();
        }
    }
    let n = src.len();
    Ok(DivergenceProfile {
        mean_div: sums.into_iter().map(|s| s / n as f64).collect(),
        n,
    })
}

/// Inclusive layer range `[start, end]`, serialized as a two-element array.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRange(pub usize, pub usize);

impl LayerRange {
    pub fn start(&self) -> usize {
        self.0
    }

    pub fn end(&self) -> usize {
        self.1
    }

    pub fn len(&self) -> usize {
        self.1 + 1 - self.0
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, l: usize) -> bool {
        (self.0..=self.1).contains(&l)
    }

    pub fn layers(&self) -> Vec<usize> {
        (self.0..=self.1).collect()
    }
}

/// Longest contiguous run of layers strictly below the median divergence,
/// earliest run on ties.
pub fn middle_layers(profile: &[f64]) -> Result<LayerRange> {
    if profile.len() < 2 {
        return Err(Error::Analysis("need at least two layers".into()));
    }
    let med = median(profile);
    let mut best: Option<LayerRange> = None;
    let mut run_start = None;
    for l in 0..=profile.len() {
        let below = l < profile.len() && profile[l] < med;
        match (below, run_start) {
            (true, None) => run_start = Some(l),
            (false, Some(s)) => {
                let cand = LayerRange(s, l - 1);
                if best.is_none_or(|b| cand.len() > b.len()) {
                    best = Some(cand);
                }
                run_start = None;
            }
            _ => {}
        }
    }
    best.ok_or(Error::DegenerateProfile)
}

/// Per-expert mean routing weight on task data minus that on general data.
pub fn task_specificity<T: Scalar>(
    dists_task: &[&SeqRoutingDist<T>],
    dists_gen: &[&SeqRoutingDist<T>],
    layer: usize,
) -> Result<Vec<f64>> {
    if dists_task.is_empty() || dists_gen.is_empty() {
        return Err(Error::Analysis(
            "task-specificity needs non-empty task and general sets".into(),
        ));
    }
    let mean = |ds: &[&SeqRoutingDist<T>]| -> Result<Vec<f64>> {
        let e = ds[0].layer(layer).len();
        let mut acc = vec![0.0; e];
        for d in ds {
            let q = d.layer(layer);
            if q.len() != e {
                return Err(Error::LengthMismatch(q.len(), e));
            }
            for (a, &v) in acc.iter_mut().zip(q) {
                *a += v.to_f64_lossless();
            }
        }
        Ok(acc.into_iter().map(|a| a / ds.len() as f64).collect())
    };
    let (t, g) = (mean(dists_task)?, mean(dists_gen)?);
    if t.len() != g.len() {
        return Err(Error::LengthMismatch(t.len(), g.len()));
    }
    Ok(t.iter().zip(&g).map(|(a, b)| a - b).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredExpert {
    pub id: usize,
    pub delta: f64,
}

/// Up to `k` experts with positive score, highest first, lower id on ties.
pub fn select_task_experts(delta: &[f64], k: usize) -> Vec<ScoredExpert> {
    let mut order: Vec<usize> = (0..delta.len()).filter(|&e| delta[e] > 0.0).collect();
    order.sort_by(|&a, &b| delta[b].total_cmp(&delta[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
        .into_iter()
        .map(|id| ScoredExpert {
            id,
            delta: delta[id],
        })
        .collect()
}

/// Frozen reference distributions keyed by example id, then layer.
pub type ReferenceStore = BTreeMap<String, BTreeMap<usize, Vec<f64>>>;

pub fn build_reference_store<T: Scalar>(
    ci_ids: &[String],
    src_dists: &BTreeMap<String, SeqRoutingDist<T>>,
    layers: &[usize],
) -> Result<ReferenceStore> {
    let mut store = ReferenceStore::new();
    for id in ci_ids {
        let d = src_dists
            .get(id)
            .ok_or_else(|| Error::IdMismatch(id.clone()))?;
        let per_layer = layers
            .iter()
            .map(|&l| (l, d.layer(l).iter().map(|v| v.to_f64_lossless()).collect()))
            .collect();
        store.insert(id.clone(), per_layer);
    }
    Ok(store)
}

/// Middle layers, per-layer task experts and frozen references. Experts and
/// references are kept for every layer so that alignment can be widened to all
/// layers without re-profiling; `mid_layers` marks the default scope.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskExpertMap {
    pub mid_layers: LayerRange,
    pub experts: BTreeMap<usize, Vec<ScoredExpert>>,
    pub references: ReferenceStore,
}

impl TaskExpertMap {
    pub fn layers(&self, all_layers: bool) -> Vec<usize> {
        if all_layers {
            self.experts.keys().copied().collect()
        } else {
            self.mid_layers.layers()
        }
    }

    pub fn expert_ids(&self, layer: usize) -> Vec<usize> {
        self.experts
            .get(&layer)
            .map(|v| v.iter().map(|s| s.id).collect())
            .unwrap_or_default()
    }

    pub fn reference(&self, id: &str, layer: usize) -> Option<&[f64]> {
        self.references.get(id)?.get(&layer).map(Vec::as_slice)
    }

    pub fn is_empty(&self) -> bool {
        self.mid_layers
            .layers()
            .iter()
            .all(|&l| self.expert_ids(l).is_empty())
    }

    pub fn validate(&self) -> Result<()> {
        for (l, set) in &self.experts {
            let ids: BTreeSet<usize> = set.iter().map(|s| s.id).collect();
            if ids.len() != set.len() || set.iter().any(|s| s.delta <= 0.0) {
                return Err(Error::Analysis(format!(
                    "layer {l}: invalid task-expert set"
                )));
            }
        }
        for per_layer in self.references.values() {
            for q in per_layer.values() {
                validate_distribution(q)?;
            }
        }
        Ok(())
    }
}

/// Assembles a [`TaskExpertMap`]: middle layers from the profile, task experts
/// per layer from source-correct task distributions against general text, and
/// references for `ci_ids`.
pub fn identify_task_experts<T: Scalar>(
    profile: &DivergenceProfile,
    task_src: &[&SeqRoutingDist<T>],
    general: &[&SeqRoutingDist<T>],
    ci_ids: &[String],
    src_dists: &BTreeMap<String, SeqRoutingDist<T>>,
    k: usize,
) -> Result<TaskExpertMap> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let mid_layers = middle_layers(&profile.mean_div)?;
    let all: Vec<usize> = (0..profile.n_layers()).collect();
    let mut experts = BTreeMap::new();
    for &l in &all {
        let set = select_task_experts(&task_specificity(task_src, general, l)?, k);
        if set.is_empty() && mid_layers.contains(l) {
            log::warn!(
                "middle layer {l} has no expert with positive task specificity; it is skipped"
            );
        }
        experts.insert(l, set);
    }
    let references = build_reference_store(ci_ids, src_dists, &all)?;
    Ok(TaskExpertMap {
        mid_layers,
        experts,
        references,
    })
}

/// Flat profile record: one sequence distribution at one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub id: String,
    pub lang: String,
    pub layer: usize,
    pub q: Vec<f64>,
}

pub fn to_profile_records<T: Scalar>(
    lang: &str,
    dists: &BTreeMap<String, SeqRoutingDist<T>>,
) -> Vec<ProfileRecord> {
    dists
        .iter()
        .flat_map(|(id, d)| {
            d.layers
                .iter()
                .enumerate()
                .map(move |(layer, q)| ProfileRecord {
                    id: id.clone(),
                    lang: lang.to_string(),
                    layer,
                    q: q.iter().map(|v| v.to_f64_lossless()).collect(),
                })
        })
        .collect()
}

/// Regroups records for one language into per-id distributions.
pub fn from_profile_records(
    records: &[ProfileRecord],
    lang: &str,
) -> Result<BTreeMap<String, SeqRoutingDist<f64>>> {
    let mut grouped: BTreeMap<String, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.lang == lang) {
        grouped
            .entry(r.id.clone())
            .or_default()
            .insert(r.layer, r.q.clone());
    }
    grouped
        .into_iter()
        .map(|(id, layers)| {
            if layers.keys().copied().ne(0..layers.len()) {
                return Err(Error::Analysis(format!(
                    "{id}: layers are not contiguous from 0"
                )));
            }
            Ok((
                id,
                SeqRoutingDist {
                    layers: layers.into_values().collect(),
                },
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn dist(layers: Vec<Vec<f64>>) -> SeqRoutingDist<f64> {
        SeqRoutingDist { layers }
    }

    #[test]
    fn js_cases() {
        assert_eq!(js_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((js_divergence(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        // 1/2 * log2(4/3) + 1/4 * log2(2/3) + 1/4 * log2(2)
        let oracle = 0.5 * (4.0f64 / 3.0).log2() + 0.25 * (2.0f64 / 3.0).log2() + 0.25;
        let js = js_divergence(&[1.0f64, 0.0], &[0.5, 0.5]).unwrap();
        assert!((js - 0.311278).abs() < 1e-6);
        assert!((js - oracle).abs() < 1e-15);
    }

    #[test]
    fn js_rejects_bad_input() {
        assert!(matches!(
            js_divergence(&[1.0], &[0.5, 0.5]),
            Err(Error::LengthMismatch(1, 2))
        ));
        assert!(js_divergence(&[0.6, 0.6], &[0.5, 0.5]).is_err());
        assert!(js_divergence(&[1.5, -0.5], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn seq_dist_means() {
        let m = crate::tensor::Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.2, 0.8]]);
        let mut trace = RoutingTrace {
            layers: vec![m],
            generated_positions: vec![0, 1],
        };
        assert_eq!(seq_routing_dist(&trace).unwrap().layers[0], vec![0.5, 0.5]);
        trace.generated_positions = vec![2];
        assert_eq!(seq_routing_dist(&trace).unwrap().layers[0], vec![0.2, 0.8]);
        trace.generated_positions.clear();
        assert!(seq_routing_dist(&trace).is_err());
    }

    #[test]
    fn teacher_forcing_matches_forward() {
        let cfg = ModelConfig {
            vocab_size: 12,
            d_model: 8,
            d_expert: 8,
            n_layers: 3,
            n_experts: 4,
            top_k: 2,
            max_seq_len: 16,
            adapter_rank: 0,
        };
        let params = Parameters::<f64>::init(&cfg, 1).unwrap();
        let trace = teacher_force_trace(&params, &[1, 2, 3], &[4, 5]).unwrap();
        assert_eq!(trace.n_layers(), 3);
        assert_eq!(trace.generated_positions, vec![3, 4]);
        let (_, full) = forward(&params, &[1, 2, 3, 4, 5], true).unwrap();
        assert_eq!(full.unwrap().layers, trace.layers);
        assert!(teacher_force_trace(&params, &[1], &[]).is_err());
    }

    #[test]
    fn profile_identity_and_mismatch() {
        let mut src = BTreeMap::new();
        src.insert("a".to_string(), dist(vec![vec![0.5, 0.5], vec![0.9, 0.1]]));
        let p = divergence_profile(&src, &src.clone()).unwrap();
        assert_eq!(p.mean_div, vec![0.0, 0.0]);
        let mut tgt = BTreeMap::new();
        tgt.insert("b".to_string(), dist(vec![vec![0.5, 0.5], vec![0.9, 0.1]]));
        assert!(matches!(
            divergence_profile(&src, &tgt),
            Err(Error::IdMismatch(_))
        ));
    }

    #[test]
    fn middle_layer_examples() {
        let r = middle_layers(&[0.8, 0.7, 0.3, 0.2, 0.25, 0.6, 0.9]).unwrap();
        assert_eq!(r, LayerRange(2, 4));
        // runs of length 2 and 3
        let r = middle_layers(&[0.1, 0.1, 0.9, 0.9, 0.1, 0.1, 0.1, 0.9, 0.9, 0.9]).unwrap();
        assert_eq!(r, LayerRange(4, 6));
        // equal-length runs keep the earliest
        assert_eq!(
            middle_layers(&[0.1, 0.9, 0.9, 0.1]).unwrap(),
            LayerRange(0, 0)
        );
        assert!(matches!(
            middle_layers(&[0.5; 4]),
            Err(Error::DegenerateProfile)
        ));
    }

    #[test]
    fn specificity_hand_case() {
        let t = dist(vec![vec![0.4, 0.3, 0.2, 0.1]]);
        let g = dist(vec![vec![0.25; 4]]);
        let d = task_specificity(&[&t], &[&g], 0).unwrap();
        let want = [0.15, 0.05, -0.05, -0.15];
        for (a, b) in d.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(d.iter().sum::<f64>().abs() < 1e-9);
        let sel: Vec<usize> = select_task_experts(&d, 8).iter().map(|s| s.id).collect();
        assert_eq!(sel, vec![0, 1]);
        assert!(task_specificity::<f64>(&[], &[&g], 0).is_err());
    }

    #[test]
    fn selection_rules() {
        assert!(select_task_experts(&[-0.1, 0.0, -0.2], 3).is_empty());
        let ids: Vec<usize> = select_task_experts(&[0.2, 0.2, 0.1], 2)
            .iter()
            .map(|s| s.id)
            .collect();
        assert_eq!(ids, vec![0, 1]);
    }

    #[test]
    fn reference_store_is_ci_only_and_round_trips() {
        let mut src = BTreeMap::new();
        src.insert(
            "ci1".to_string(),
            dist(vec![vec![0.1, 0.9], vec![1.0 / 3.0, 2.0 / 3.0]]),
        );
        src.insert(
            "cc1".to_string(),
            dist(vec![vec![0.5, 0.5], vec![0.5, 0.5]]),
        );
        let store = build_reference_store(&["ci1".to_string()], &src, &[1]).unwrap();
        assert!(!store.contains_key("cc1"));
        assert_eq!(store["ci1"][&1], src["ci1"].layers[1]);
        let json = serde_json::to_string(&store).unwrap();
        let back: ReferenceStore = serde_json::from_str(&json).unwrap();
        assert_eq!(back, store);
        assert!(build_reference_store(&["zz".to_string()], &src, &[1]).is_err());
    }

    #[test]
    fn profile_records_round_trip() {
        let mut src = BTreeMap::new();
        src.insert("x".to_string(), dist(vec![vec![0.1, 0.9], vec![0.7, 0.3]]));
        let recs = to_profile_records("lang0", &src);
        assert_eq!(recs.len(), 2);
        assert_eq!(from_profile_records(&recs, "lang0").unwrap(), src);
        assert!(from_profile_records(&recs, "lang1").unwrap().is_empty());
    }
}
