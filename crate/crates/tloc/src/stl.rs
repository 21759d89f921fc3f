//! Structure transfer: adapting a source-trained forest to a data-poor
//! target domain.
//!
//! The source forest's topology and split features are treated as learned
//! structure worth keeping; only the numeric split thresholds and leaf
//! values are re-estimated from the handful of labeled target samples.
//! Working top-down through each tree, the target samples reaching a node
//! propose candidate thresholds (midpoints of their distinct values of the
//! node's feature). Candidates must be local maxima of the target-side
//! variance reduction among their neighbors; among those, the one whose
//! induced child label distributions diverge least (Jensen-Shannon) from
//! the cached source child distributions wins. Leaves reached by target
//! samples re-estimate their prediction as the target mean.
//!
//! The module also houses target-domain identification, source pooling,
//! the plain instance-transfer baseline, and the end-to-end localization
//! entry point with its negative-transfer fallback.

use std::collections::BTreeMap;

use crate::distance::{select_sources, DistanceParams, DomainSignature};
use crate::domain::{extract_features, Domain, FeatureVector};
use crate::error::TlocError;
use crate::forest::{
    split_candidates, train, variance_reduction, CellCounts, ForestParams, LabelFrame, Node,
    RandomForest,
};
use crate::geo::{local_to_geo, GeoPoint, RelativePos};
use crate::mr::BaseStationId;
use crate::Result;

/// Transfer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransferConfig {
    /// Source domains to pool.
    pub k: usize,
    /// Minimum target samples at a node before its threshold moves.
    pub min_node_targets: usize,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig { k: 3, min_node_targets: 1 }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(TlocError::InvalidConfig("k must be at least 1".into()));
        }
        if self.min_node_targets == 0 {
            return Err(TlocError::InvalidConfig("min_node_targets must be at least 1".into()));
        }
        Ok(())
    }
}

/// When a domain counts as a transfer target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetCriteria {
    /// A domain qualifies only above this cross-validated median error.
    pub median_error_threshold_m: f64,
    /// And only with at most this many labeled samples.
    pub max_labeled: usize,
}

impl TargetCriteria {
    pub fn for_2g() -> Self {
        TargetCriteria { median_error_threshold_m: 40.0, max_labeled: 50 }
    }

    pub fn for_4g() -> Self {
        TargetCriteria { median_error_threshold_m: 30.0, max_labeled: 50 }
    }

    /// Both conditions must hold: poorly localized and label-starved.
    pub fn is_target(&self, median_error_m: f64, labeled: usize) -> bool {
        median_error_m > self.median_error_threshold_m && labeled <= self.max_labeled
    }
}

/// Filters per-domain (id, median error, labeled count) stats down to the
/// domains needing transfer.
pub fn identify_targets(
    stats: &[(BaseStationId, f64, usize)],
    criteria: &TargetCriteria,
) -> Vec<BaseStationId> {
    stats
        .iter()
        .filter(|(_, err, n)| criteria.is_target(*err, *n))
        .map(|(id, _, _)| *id)
        .collect()
}

/// Union of the labeled samples across source domains, each sample in its
/// own domain's relative frame. A domain listed twice contributes once.
pub fn pool_sources(sources: &[&Domain]) -> Vec<(FeatureVector, RelativePos)> {
    let mut seen = std::collections::BTreeSet::new();
    let mut pool = Vec::new();
    for d in sources {
        if seen.insert(d.serving) {
            pool.extend(d.labeled_features());
        }
    }
    pool
}

/// The instance-transfer baseline: one forest over the concatenation,
/// target samples first so an empty pool degenerates to plain training
/// bit for bit.
pub fn instance_transfer(
    target: &[(FeatureVector, RelativePos)],
    source_pool: &[(FeatureVector, RelativePos)],
    params: &ForestParams,
    seed: u64,
) -> Result<RandomForest> {
    let mut xs: Vec<FeatureVector> = target.iter().map(|(f, _)| f.clone()).collect();
    let mut ys: Vec<RelativePos> = target.iter().map(|(_, l)| *l).collect();
    xs.extend(source_pool.iter().map(|(f, _)| f.clone()));
    ys.extend(source_pool.iter().map(|(_, l)| *l));
    train(&xs, &ys, params, seed)
}

/// Jensen-Shannon divergence (natural log) between two sparse cell-count
/// histograms; 0 for identical shapes, at most ln 2.
pub(crate) fn js_divergence(p_counts: &CellCounts, q_counts: &CellCounts) -> f64 {
    let total = |c: &CellCounts| c.iter().map(|&(_, k)| k as f64).sum::<f64>();
    let (pn, qn) = (total(p_counts), total(q_counts));
    debug_assert!(pn > 0.0 && qn > 0.0);
    let mut cells: BTreeMap<u32, (f64, f64)> = BTreeMap::new();
    for &(c, k) in p_counts {
        cells.entry(c).or_insert((0.0, 0.0)).0 = k as f64 / pn;
    }
    for &(c, k) in q_counts {
        cells.entry(c).or_insert((0.0, 0.0)).1 = k as f64 / qn;
    }
    let mut js = 0.0;
    for &(p, q) in cells.values() {
        let m = 0.5 * (p + q);
        if p > 0.0 {
            js += 0.5 * p * (p / m).ln();
        }
        if q > 0.0 {
            js += 0.5 * q * (q / m).ln();
        }
    }
    js
}

/// Divergence gain of a candidate split: how close the target child
/// distributions stay to the source children, summed over both sides.
/// Ranges over [0, 2 ln 2]; higher is better.
pub(crate) fn dg_gain(
    p_left: &CellCounts,
    p_right: &CellCounts,
    q_left: &CellCounts,
    q_right: &CellCounts,
) -> f64 {
    use std::f64::consts::LN_2;
    (LN_2 - js_divergence(p_left, q_left)) + (LN_2 - js_divergence(p_right, q_right))
}

/// Re-estimates split thresholds and leaf values of `source` from labeled
/// target samples. Topology and split features are preserved exactly; an
/// empty target set returns the source forest unchanged.
pub fn stl_adapt(
    source: &RandomForest,
    target: &[(FeatureVector, RelativePos)],
    config: &TransferConfig,
) -> Result<RandomForest> {
    config.validate()?;
    let mut adapted = source.clone();
    if target.is_empty() {
        return Ok(adapted);
    }
    for tree in &mut adapted.trees {
        let all: Vec<usize> = (0..target.len()).collect();
        adapt_node(&mut tree.nodes, 0, all, target, &adapted.frame, config);
    }
    Ok(adapted)
}

/// Top-down re-thresholding of the subtree at `i`. Routing below a node
/// uses its adapted threshold, so parents settle before children see data.
fn adapt_node(
    nodes: &mut [Node],
    i: usize,
    targets: Vec<usize>,
    data: &[(FeatureVector, RelativePos)],
    frame: &LabelFrame,
    config: &TransferConfig,
) {
    let (feature, threshold, left, right) = match &mut nodes[i] {
        Node::Leaf { pred, n, .. } => {
            if !targets.is_empty() {
                let (mut sx, mut sy) = (0.0, 0.0);
                for &t in &targets {
                    sx += data[t].1.x;
                    sy += data[t].1.y;
                }
                *pred = RelativePos::new(sx / targets.len() as f64, sy / targets.len() as f64);
                *n = targets.len();
            }
            return;
        }
        Node::Split { feature, threshold, left, right, .. } => {
            (*feature, *threshold, *left, *right)
        }
    };

    let mut thr = threshold;
    if targets.len() >= config.min_node_targets {
        let values: Vec<f64> = targets.iter().map(|&t| data[t].0 .0[feature]).collect();
        let candidates = split_candidates(&values);
        if !candidates.is_empty() {
            let labels: Vec<RelativePos> = targets.iter().map(|&t| data[t].1).collect();
            let vr: Vec<f64> = candidates
                .iter()
                .map(|&c| variance_reduction(&values, &labels, c))
                .collect();
            let p_left = nodes[left].dist();
            let p_right = nodes[right].dist();
            let mut best: Option<(f64, f64)> = None; // (gain, threshold)
            for (ci, &cand) in candidates.iter().enumerate() {
                // The neighborhood constraint: only thresholds that beat
                // both adjacent candidates on target variance reduction
                // may be chosen.
                let left_ok = ci == 0 || vr[ci] >= vr[ci - 1];
                let right_ok = ci + 1 == candidates.len() || vr[ci] >= vr[ci + 1];
                if !(left_ok && right_ok) {
                    continue;
                }
                let q_left = cell_counts_of(
                    frame,
                    targets.iter().filter(|&&t| data[t].0 .0[feature] <= cand),
                    data,
                );
                let q_right = cell_counts_of(
                    frame,
                    targets.iter().filter(|&&t| data[t].0 .0[feature] > cand),
                    data,
                );
                let gain = dg_gain(p_left, p_right, &q_left, &q_right);
                // Strict improvement keeps the smallest threshold among
                // ties (candidates ascend).
                if best.map_or(true, |(g, _)| gain > g) {
                    best = Some((gain, cand));
                }
            }
            if let Some((_, chosen)) = best {
                thr = chosen;
            }
        }
    }
    if let Node::Split { threshold, .. } = &mut nodes[i] {
        *threshold = thr;
    }
    let (mut tl, mut tr) = (Vec::new(), Vec::new());
    for t in targets {
        if data[t].0 .0[feature] <= thr {
            tl.push(t);
        } else {
            tr.push(t);
        }
    }
    adapt_node(nodes, left, tl, data, frame, config);
    adapt_node(nodes, right, tr, data, frame, config);
}

fn cell_counts_of<'a>(
    frame: &LabelFrame,
    targets: impl Iterator<Item = &'a usize>,
    data: &[(FeatureVector, RelativePos)],
) -> CellCounts {
    let mut map = BTreeMap::new();
    for &t in targets {
        *map.entry(frame.cell(data[t].1)).or_insert(0u32) += 1;
    }
    map.into_iter().collect()
}

/// Trains the transfer model for one target: a forest over the pooled
/// sources, structure-adapted with the target's labeled samples. With no
/// sources this is exactly plain training on the target (same seed, same
/// RNG stream), which is the negative-transfer fallback.
pub fn tloc_model(
    target_train: &[(FeatureVector, RelativePos)],
    sources: &[&Domain],
    forest_params: &ForestParams,
    config: &TransferConfig,
    seed: u64,
) -> Result<RandomForest> {
    config.validate()?;
    let pool = pool_sources(sources);
    let (txs, tys): (Vec<FeatureVector>, Vec<RelativePos>) =
        target_train.iter().map(|(f, l)| (f.clone(), *l)).unzip();
    if pool.is_empty() {
        return train(&txs, &tys, forest_params, seed);
    }
    let (sxs, sys): (Vec<FeatureVector>, Vec<RelativePos>) = pool.into_iter().unzip();
    let source_forest = train(&sxs, &sys, forest_params, seed)?;
    stl_adapt(&source_forest, target_train, config)
}

/// End-to-end localization of every sample in `target`: source selection
/// under the dissimilarity cutoff, pooled training, structure adaptation,
/// prediction, and conversion back to absolute coordinates.
#[allow(clippy::too_many_arguments)]
pub fn tloc_localize(
    target: &Domain,
    corpus: &[Domain],
    dist_params: &DistanceParams,
    forest_params: &ForestParams,
    config: &TransferConfig,
    cutoff: f64,
    seed: u64,
) -> Result<Vec<GeoPoint>> {
    config.validate()?;
    let c = crate::distance::pearson_c(corpus)?;
    let target_sig = DomainSignature::of(target);
    let others: Vec<DomainSignature> = corpus
        .iter()
        .filter(|d| d.serving != target.serving)
        .map(DomainSignature::of)
        .collect();
    let picks = select_sources(&target_sig, &others, c, dist_params, config.k, cutoff)?;
    let by_id: BTreeMap<BaseStationId, &Domain> =
        corpus.iter().map(|d| (d.serving, d)).collect();
    let sources: Vec<&Domain> = picks.iter().map(|(id, _)| by_id[id]).collect();

    let model = tloc_model(&target.labeled_features(), &sources, forest_params, config, seed)?;
    Ok(target
        .samples
        .iter()
        .map(|s| {
            let rel = model.predict(&extract_features(target, &s.mr));
            local_to_geo(target.center, rel)
        })
        .collect())
}
