//! Composite distance between domains.
//!
//! Two domains are compared on two complementary views:
//!
//! * **Signal view** (`dis_mr`): per slot-group histograms of RSSI and of
//!   signal level, compared with a p-norm distance and combined with
//!   per-group weights (softmax over station-constellation distances, or a
//!   harmonic fallback when constellations are unknown). The RSSI and
//!   signal-level components are fused with the corpus-wide Pearson
//!   correlation `c` between the two readings.
//! * **Trajectory view** (`dis_pos`): mean discrete Fréchet distance over
//!   all trajectory pairs, normalized so the largest pair in scope is 1.
//!
//! The composite is `dist = w_mr * dis_mr + w_pos * dis_pos`; when either
//! domain has no trajectories the signal view stands alone (w_mr = 1).
//! Distances are symmetric bit for bit (pairs are canonicalized by station
//! id) and a domain is at distance zero from itself by definition.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use crate::domain::{Domain, GRID_SENTINEL};
use crate::error::TlocError;
use crate::geo::RelativePos;
use crate::mr::{BaseStationId, MAX_NEIGHBORS};
use crate::Result;

/// Which signal reading a histogram summarizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalKind {
    Rssi,
    SignalLevel,
}

/// Normalized histogram of one signal kind at one slot group.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalHistogram {
    pub kind: SignalKind,
    /// Slot group, 1-based.
    pub group: usize,
    /// r+1 ascending bin edges; the outer bins absorb out-of-range values.
    pub edges: Vec<f64>,
    /// r masses; sums to 1 given any observation, all zero otherwise.
    pub mass: Vec<f64>,
    pub n_obs: usize,
}

impl SignalHistogram {
    pub fn is_empty(&self) -> bool {
        self.n_obs == 0
    }
}

/// Default RSSI binning: [-113, -43] dBm in 5 dBm steps (14 bins).
pub fn rssi_edges() -> Vec<f64> {
    (0..=14).map(|i| -113.0 + 5.0 * i as f64).collect()
}

/// Default signal-level binning: one bin per integer level 0..=4.
pub fn signal_level_edges() -> Vec<f64> {
    (0..=5).map(|i| i as f64 - 0.5).collect()
}

/// Histograms the given reading of slot `group` (1-based) across all of a
/// domain's samples. Values outside the edges land in the outer bins.
pub fn build_histogram(
    domain: &Domain,
    group: usize,
    kind: SignalKind,
    edges: &[f64],
) -> Result<SignalHistogram> {
    if !(1..=MAX_NEIGHBORS).contains(&group) {
        return Err(TlocError::InvalidConfig(format!("slot group {group} out of 1..=7")));
    }
    if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(TlocError::InvalidConfig("histogram edges must be ascending".into()));
    }
    let r = edges.len() - 1;
    let mut mass = vec![0.0; r];
    let mut n_obs = 0usize;
    for s in &domain.samples {
        if let Some(e) = s.mr.entries.get(group - 1) {
            let v = match kind {
                SignalKind::Rssi => e.rssi,
                SignalKind::SignalLevel => e.signal_level as f64,
            };
            let bin = edges.partition_point(|edge| *edge <= v);
            let bin = bin.saturating_sub(1).min(r - 1);
            mass[bin] += 1.0;
            n_obs += 1;
        }
    }
    if n_obs > 0 {
        for m in &mut mass {
            *m /= n_obs as f64;
        }
    }
    Ok(SignalHistogram { kind, group, edges: edges.to_vec(), mass, n_obs })
}

/// p-norm distance between two like-binned histograms. Either side empty
/// yields the maximum attainable value 2^(1/p).
pub fn hist_distance(a: &SignalHistogram, b: &SignalHistogram, p: f64) -> Result<f64> {
    if p < 1.0 {
        return Err(TlocError::InvalidConfig(format!("p must be >= 1, got {p}")));
    }
    if a.kind != b.kind || a.edges != b.edges {
        return Err(TlocError::BinningMismatch(format!(
            "group {} vs group {}: kinds or edges differ",
            a.group, b.group
        )));
    }
    if a.is_empty() || b.is_empty() {
        return Ok(2f64.powf(1.0 / p));
    }
    let sum: f64 = a
        .mass
        .iter()
        .zip(&b.mass)
        .map(|(x, y)| (x - y).abs().powf(p))
        .sum();
    Ok(sum.powf(1.0 / p))
}

/// How per-group weights are derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMethod {
    /// Softmax over station-constellation distances (groups that differ in
    /// geometry count more).
    Softmax,
    /// Fixed 1/i weights, for data without neighbor identities.
    Harmonic,
}

impl std::fmt::Display for WeightMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            WeightMethod::Softmax => "softmax",
            WeightMethod::Harmonic => "harmonic",
        })
    }
}

impl std::str::FromStr for WeightMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "softmax" => Ok(WeightMethod::Softmax),
            "harmonic" => Ok(WeightMethod::Harmonic),
            other => Err(format!("unknown weight method {other:?}")),
        }
    }
}

/// How the constellation distance of one group is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BsDistanceMethod {
    /// Distance between the two groups' centroids.
    Centroid,
    /// Mean distance over all cross pairs.
    Pairwise,
}

/// Per-group weights, normalized to sum 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupWeights {
    pub w: [f64; MAX_NEIGHBORS],
}

/// Softmax of the per-group constellation distances; unknown groups enter
/// as a neutral 0.
pub fn softmax_weights(dis_bs: &[Option<f64>; MAX_NEIGHBORS]) -> GroupWeights {
    let mut e = [0.0; MAX_NEIGHBORS];
    for (i, d) in dis_bs.iter().enumerate() {
        e[i] = d.unwrap_or(0.0).exp();
    }
    let sum: f64 = e.iter().sum();
    GroupWeights { w: e.map(|x| x / sum) }
}

/// Fixed weights w_i = (1/i) / H_7: strongest slots dominate.
pub fn harmonic_weights() -> GroupWeights {
    let h: f64 = (1..=MAX_NEIGHBORS).map(|i| 1.0 / i as f64).sum();
    GroupWeights { w: std::array::from_fn(|i| 1.0 / (i + 1) as f64 / h) }
}

/// Euclidean distance between the centroids of two position sets; `None`
/// when either set is empty.
pub fn centroid_distance(a: &[(f64, f64)], b: &[(f64, f64)]) -> Option<f64> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let mean = |pts: &[(f64, f64)]| {
        let n = pts.len() as f64;
        let (sx, sy) = pts.iter().fold((0.0, 0.0), |(sx, sy), p| (sx + p.0, sy + p.1));
        (sx / n, sy / n)
    };
    let (ax, ay) = mean(a);
    let (bx, by) = mean(b);
    Some(((ax - bx).powi(2) + (ay - by).powi(2)).sqrt())
}

/// Mean Euclidean distance over all cross pairs; `None` when either set is
/// empty.
pub fn pairwise_mean_distance(a: &[(f64, f64)], b: &[(f64, f64)]) -> Option<f64> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    for pa in a {
        for pb in b {
            sum += ((pa.0 - pb.0).powi(2) + (pa.1 - pb.1).powi(2)).sqrt();
        }
    }
    Some(sum / (a.len() * b.len()) as f64)
}

/// Constellation distance of slot group `group` (1-based) between two
/// domains, in the shared unit-square frame. `None` when either side has no
/// positioned station in that group.
pub fn group_bs_distance(
    a: &Domain,
    b: &Domain,
    group: usize,
    method: BsDistanceMethod,
) -> Option<f64> {
    let pa = group_unit_positions(a, group);
    let pb = group_unit_positions(b, group);
    match method {
        BsDistanceMethod::Centroid => centroid_distance(&pa, &pb),
        BsDistanceMethod::Pairwise => pairwise_mean_distance(&pa, &pb),
    }
}

/// Grid-cell centers (unit square) of the positioned stations in one slot
/// group.
pub fn group_unit_positions(domain: &Domain, group: usize) -> Vec<(f64, f64)> {
    let Some(spec) = domain.grid else { return Vec::new() };
    domain.groups[group - 1]
        .iter()
        .filter_map(|id| {
            let ns = domain.stations.get(id)?;
            if ns.grid == GRID_SENTINEL {
                return None;
            }
            Some(spec.cell_center_unit(ns.grid))
        })
        .collect()
}

/// Pearson correlation of two equal-length series; `None` for fewer than
/// two points or zero variance on either side.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 || n != ys.len() {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let dx = xs[i] - mx;
        let dy = ys[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Corpus-wide RSSI/signal-level correlation: the mean of per-domain
/// Pearson coefficients over all entries, clamped to [0, 1] for use as a
/// fusion weight. Domains without usable variance are skipped; if none
/// remain this is an error.
pub fn pearson_c(domains: &[Domain]) -> Result<f64> {
    let mut rs = Vec::new();
    for d in domains {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for s in &d.samples {
            for e in &s.mr.entries {
                xs.push(e.rssi);
                ys.push(e.signal_level as f64);
            }
        }
        if let Some(r) = pearson(&xs, &ys) {
            rs.push(r);
        }
    }
    if rs.is_empty() {
        return Err(TlocError::Degenerate(
            "no domain has usable rssi/signal-level variance for the fusion weight".into(),
        ));
    }
    Ok((rs.iter().sum::<f64>() / rs.len() as f64).clamp(0.0, 1.0))
}

/// Everything the distance needs to know about a domain, precomputed once.
#[derive(Debug, Clone)]
pub struct DomainSignature {
    pub serving: BaseStationId,
    pub rssi_hists: Vec<SignalHistogram>,
    pub sig_hists: Vec<SignalHistogram>,
    pub group_pos: [Vec<(f64, f64)>; MAX_NEIGHBORS],
    pub trajectories: Vec<Vec<RelativePos>>,
}

impl DomainSignature {
    pub fn of(domain: &Domain) -> Self {
        let re = rssi_edges();
        let se = signal_level_edges();
        let rssi_hists = (1..=MAX_NEIGHBORS)
            .map(|g| build_histogram(domain, g, SignalKind::Rssi, &re).expect("static edges"))
            .collect();
        let sig_hists = (1..=MAX_NEIGHBORS)
            .map(|g| build_histogram(domain, g, SignalKind::SignalLevel, &se).expect("static edges"))
            .collect();
        let group_pos = std::array::from_fn(|i| group_unit_positions(domain, i + 1));
        let trajectories = domain
            .trajectories
            .iter()
            .map(|t| t.points.iter().map(|&(_, p)| p).collect())
            .collect();
        DomainSignature {
            serving: domain.serving,
            rssi_hists,
            sig_hists,
            group_pos,
            trajectories,
        }
    }
}

/// Parameters of the composite distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceParams {
    pub p: f64,
    pub w_mr: f64,
    pub w_pos: f64,
    pub weight_method: WeightMethod,
    pub bs_method: BsDistanceMethod,
}

impl Default for DistanceParams {
    fn default() -> Self {
        DistanceParams {
            p: 3.0,
            w_mr: 0.5,
            w_pos: 0.5,
            weight_method: WeightMethod::Softmax,
            bs_method: BsDistanceMethod::Centroid,
        }
    }
}

impl DistanceParams {
    pub fn validate(&self) -> Result<()> {
        if self.p < 1.0 {
            return Err(TlocError::InvalidConfig(format!("p must be >= 1, got {}", self.p)));
        }
        if self.w_mr < 0.0 || self.w_pos < 0.0 || self.w_mr + self.w_pos <= 0.0 {
            return Err(TlocError::InvalidConfig(
                "composite weights must be non-negative and not both zero".into(),
            ));
        }
        Ok(())
    }
}

/// The signal-view components of one pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MrDistParts {
    pub dis_rssi: f64,
    pub dis_sig: f64,
    pub dis_mr: f64,
    pub weights: GroupWeights,
}

/// Signal-view distance between two domains: weighted per-group histogram
/// distances, fused across the two readings with the correlation `c`.
/// Groups observed on only one side are skipped and the remaining weights
/// renormalized.
pub fn mr_feature_distance(
    a: &DomainSignature,
    b: &DomainSignature,
    c: f64,
    params: &DistanceParams,
) -> Result<MrDistParts> {
    let c = c.clamp(0.0, 1.0);
    let weights = match params.weight_method {
        WeightMethod::Harmonic => harmonic_weights(),
        WeightMethod::Softmax => {
            let mut dis = [None; MAX_NEIGHBORS];
            for (i, d) in dis.iter_mut().enumerate() {
                *d = match params.bs_method {
                    BsDistanceMethod::Centroid => {
                        centroid_distance(&a.group_pos[i], &b.group_pos[i])
                    }
                    BsDistanceMethod::Pairwise => {
                        pairwise_mean_distance(&a.group_pos[i], &b.group_pos[i])
                    }
                };
            }
            softmax_weights(&dis)
        }
    };

    let (mut wsum, mut drssi, mut dsig) = (0.0, 0.0, 0.0);
    for i in 0..MAX_NEIGHBORS {
        if a.rssi_hists[i].is_empty() || b.rssi_hists[i].is_empty() {
            continue;
        }
        let w = weights.w[i];
        drssi += w * hist_distance(&a.rssi_hists[i], &b.rssi_hists[i], params.p)?;
        dsig += w * hist_distance(&a.sig_hists[i], &b.sig_hists[i], params.p)?;
        wsum += w;
    }
    if wsum == 0.0 {
        return Err(TlocError::Degenerate(
            "no slot group is observed in both domains".into(),
        ));
    }
    let dis_rssi = drssi / wsum;
    let dis_sig = dsig / wsum;
    let dis_mr = (dis_rssi + c * dis_sig) / (1.0 + c);
    Ok(MrDistParts { dis_rssi, dis_sig, dis_mr, weights })
}

/// Discrete Fréchet distance between two point sequences (the classic
/// coupling DP, O(|a|*|b|) time, O(|b|) memory).
pub fn discrete_frechet(a: &[RelativePos], b: &[RelativePos]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(TlocError::Degenerate("Fréchet distance needs non-empty trajectories".into()));
    }
    let m = b.len();
    let mut prev = vec![0.0f64; m];
    let mut cur = vec![0.0f64; m];
    for i in 0..a.len() {
        for j in 0..m {
            let d = a[i].dist(b[j]);
            cur[j] = if i == 0 && j == 0 {
                d
            } else if i == 0 {
                d.max(cur[j - 1])
            } else if j == 0 {
                d.max(prev[0])
            } else {
                d.max(prev[j].min(prev[j - 1]).min(cur[j - 1]))
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m - 1])
}

/// Unnormalized trajectory-view distance: mean discrete Fréchet distance
/// over all cross pairs. `None` when either domain has no trajectories.
pub fn position_distance_raw(
    a: &[Vec<RelativePos>],
    b: &[Vec<RelativePos>],
) -> Result<Option<f64>> {
    if a.is_empty() || b.is_empty() {
        return Ok(None);
    }
    let mut sum = 0.0;
    for ta in a {
        for tb in b {
            sum += discrete_frechet(ta, tb)?;
        }
    }
    Ok(Some(sum / (a.len() * b.len()) as f64))
}

/// The composite record for one unordered pair.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDistance {
    pub a: BaseStationId,
    pub b: BaseStationId,
    pub dis_mr_rssi: f64,
    pub dis_mr_sig: f64,
    pub dis_mr: f64,
    /// Normalized trajectory distance; `None` when either side has none.
    pub dis_pos: Option<f64>,
    pub dist: f64,
    /// Fusion correlation actually used (clamped).
    pub c: f64,
    /// Effective composite weights (w_mr becomes 1 when dis_pos is absent).
    pub w_mr: f64,
    pub w_pos: f64,
    pub weights: GroupWeights,
}

fn domain_distance_with_raw(
    a: &DomainSignature,
    b: &DomainSignature,
    c: f64,
    raw_pos: Option<f64>,
    pos_norm: f64,
    params: &DistanceParams,
) -> Result<DomainDistance> {
    let parts = mr_feature_distance(a, b, c, params)?;
    let c = c.clamp(0.0, 1.0);
    match raw_pos {
        Some(raw) => {
            let dis_pos = if pos_norm > 0.0 { raw / pos_norm } else { raw };
            Ok(DomainDistance {
                a: a.serving,
                b: b.serving,
                dis_mr_rssi: parts.dis_rssi,
                dis_mr_sig: parts.dis_sig,
                dis_mr: parts.dis_mr,
                dis_pos: Some(dis_pos),
                dist: params.w_mr * parts.dis_mr + params.w_pos * dis_pos,
                c,
                w_mr: params.w_mr,
                w_pos: params.w_pos,
                weights: parts.weights,
            })
        }
        None => Ok(DomainDistance {
            a: a.serving,
            b: b.serving,
            dis_mr_rssi: parts.dis_rssi,
            dis_mr_sig: parts.dis_sig,
            dis_mr: parts.dis_mr,
            dis_pos: None,
            dist: parts.dis_mr,
            c,
            w_mr: 1.0,
            w_pos: 0.0,
            weights: parts.weights,
        }),
    }
}

/// Composite distance between two domains. `pos_norm` is the normalization
/// constant for the trajectory view (pass the corpus or query max; 0 keeps
/// the raw value). Symmetric bit for bit; zero when `a` and `b` are the
/// same domain.
pub fn domain_distance(
    a: &DomainSignature,
    b: &DomainSignature,
    c: f64,
    pos_norm: f64,
    params: &DistanceParams,
) -> Result<DomainDistance> {
    // Canonical order makes accumulation order, and so the result, an
    // invariant of the argument order.
    let (x, y) = if a.serving <= b.serving { (a, b) } else { (b, a) };
    if x.serving == y.serving {
        let parts = mr_feature_distance(x, y, c, params)?;
        let has_traj = !x.trajectories.is_empty();
        return Ok(DomainDistance {
            a: x.serving,
            b: y.serving,
            dis_mr_rssi: parts.dis_rssi,
            dis_mr_sig: parts.dis_sig,
            dis_mr: parts.dis_mr,
            dis_pos: has_traj.then_some(0.0),
            dist: 0.0,
            c: c.clamp(0.0, 1.0),
            w_mr: params.w_mr,
            w_pos: if has_traj { params.w_pos } else { 0.0 },
            weights: parts.weights,
        });
    }
    let raw = position_distance_raw(&x.trajectories, &y.trajectories)?;
    domain_distance_with_raw(x, y, c, raw, pos_norm, params)
}

/// All pairwise distances of a corpus, with the trajectory view normalized
/// by the corpus-wide maximum.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    pub ids: Vec<BaseStationId>,
    pub entries: BTreeMap<(BaseStationId, BaseStationId), DomainDistance>,
    pub c: f64,
    pub pos_norm: f64,
    pub params: DistanceParams,
}

impl DistanceMatrix {
    pub fn compute(domains: &[Domain], params: &DistanceParams) -> Result<Self> {
        params.validate()?;
        let c = pearson_c(domains)?;
        let sigs: Vec<DomainSignature> = domains.iter().map(DomainSignature::of).collect();
        Self::from_signatures(&sigs, c, params)
    }

    pub fn from_signatures(
        sigs: &[DomainSignature],
        c: f64,
        params: &DistanceParams,
    ) -> Result<Self> {
        let mut order: Vec<usize> = (0..sigs.len()).collect();
        order.sort_by_key(|&i| sigs[i].serving);
        for w in order.windows(2) {
            if sigs[w[0]].serving == sigs[w[1]].serving {
                return Err(TlocError::InvalidConfig(format!(
                    "duplicate domain {}",
                    sigs[w[0]].serving
                )));
            }
        }

        // Pass 1: raw trajectory distances, corpus max.
        let mut raws: BTreeMap<(usize, usize), Option<f64>> = BTreeMap::new();
        let mut max_raw = 0.0f64;
        for ai in 0..order.len() {
            for bi in ai + 1..order.len() {
                let (i, j) = (order[ai], order[bi]);
                let raw = position_distance_raw(&sigs[i].trajectories, &sigs[j].trajectories)?;
                if let Some(r) = raw {
                    max_raw = max_raw.max(r);
                }
                raws.insert((ai, bi), raw);
            }
        }
        let pos_norm = if max_raw > 0.0 { max_raw } else { 1.0 };

        // Pass 2: composite records.
        let mut entries = BTreeMap::new();
        for ai in 0..order.len() {
            for bi in ai + 1..order.len() {
                let (i, j) = (order[ai], order[bi]);
                let rec = domain_distance_with_raw(
                    &sigs[i],
                    &sigs[j],
                    c,
                    raws[&(ai, bi)],
                    pos_norm,
                    params,
                )?;
                entries.insert((rec.a, rec.b), rec);
            }
        }
        Ok(DistanceMatrix {
            ids: order.iter().map(|&i| sigs[i].serving).collect(),
            entries,
            c,
            pos_norm,
            params: *params,
        })
    }

    /// The record of an unordered pair; `None` for a == b or unknown ids.
    pub fn get(&self, a: BaseStationId, b: BaseStationId) -> Option<&DomainDistance> {
        let key = if a <= b { (a, b) } else { (b, a) };
        self.entries.get(&key)
    }

    /// The composite distance; self distances are 0.
    pub fn dist(&self, a: BaseStationId, b: BaseStationId) -> Option<f64> {
        if a == b {
            return self.ids.contains(&a).then_some(0.0);
        }
        self.get(a, b).map(|r| r.dist)
    }

    /// `k` nearest eligible sources for `target`, closer than `cutoff`,
    /// ties broken by station id.
    pub fn nearest_sources(
        &self,
        target: BaseStationId,
        eligible: &[BaseStationId],
        k: usize,
        cutoff: f64,
    ) -> Vec<(BaseStationId, f64)> {
        let mut picks: Vec<(BaseStationId, f64)> = eligible
            .iter()
            .filter(|&&id| id != target)
            .filter_map(|&id| self.dist(target, id).map(|d| (id, d)))
            .filter(|&(_, d)| d < cutoff)
            .collect();
        picks.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
        picks.truncate(k);
        picks
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| TlocError::io(path, e))?,
        );
        (|| -> std::io::Result<()> {
            writeln!(f, "domain_a,domain_b,dis_mr_rssi,dis_mr_sig,dis_mr,dis_pos,dist")?;
            for rec in self.entries.values() {
                let pos = rec.dis_pos.map(|v| format!("{v}")).unwrap_or_default();
                writeln!(
                    f,
                    "{},{},{},{},{},{},{}",
                    rec.a, rec.b, rec.dis_mr_rssi, rec.dis_mr_sig, rec.dis_mr, pos, rec.dist
                )?;
            }
            f.flush()
        })()
        .map_err(|e| TlocError::io(path, e))
    }
}

/// One row of a serialized distance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixRow {
    pub a: BaseStationId,
    pub b: BaseStationId,
    pub dis_mr_rssi: f64,
    pub dis_mr_sig: f64,
    pub dis_mr: f64,
    pub dis_pos: Option<f64>,
    pub dist: f64,
}

/// Reads a matrix CSV written by [`DistanceMatrix::write_csv`].
pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<Vec<MatrixRow>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| TlocError::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = (i + 1) as u64;
        if i == 0 {
            if line != "domain_a,domain_b,dis_mr_rssi,dis_mr_sig,dis_mr,dis_pos,dist" {
                return Err(TlocError::parse(path, 1, "unexpected matrix header"));
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(TlocError::parse(path, lineno, "expected 7 fields"));
        }
        let id = |s: &str| -> Result<BaseStationId> {
            s.parse().map_err(|e: String| TlocError::parse(path, lineno, e))
        };
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| TlocError::parse(path, lineno, format!("bad number {s:?}")))
        };
        rows.push(MatrixRow {
            a: id(fields[0])?,
            b: id(fields[1])?,
            dis_mr_rssi: num(fields[2])?,
            dis_mr_sig: num(fields[3])?,
            dis_mr: num(fields[4])?,
            dis_pos: if fields[5].is_empty() { None } else { Some(num(fields[5])?) },
            dist: num(fields[6])?,
        });
    }
    Ok(rows)
}

/// Scans `candidates` and returns the `k` nearest to `target` under the
/// composite distance, restricted to `dist < cutoff`, ties broken by id.
/// The trajectory view is normalized by the largest raw value seen in this
/// query's scope.
pub fn select_sources(
    target: &DomainSignature,
    candidates: &[DomainSignature],
    c: f64,
    params: &DistanceParams,
    k: usize,
    cutoff: f64,
) -> Result<Vec<(BaseStationId, f64)>> {
    let refs: Vec<&DomainSignature> = candidates.iter().collect();
    select_sources_ref(target, &refs, c, params, k, cutoff)
}

/// [`select_sources`] over borrowed candidates, for callers that rank a
/// subset of a larger corpus.
pub fn select_sources_ref(
    target: &DomainSignature,
    candidates: &[&DomainSignature],
    c: f64,
    params: &DistanceParams,
    k: usize,
    cutoff: f64,
) -> Result<Vec<(BaseStationId, f64)>> {
    let mut raws = Vec::with_capacity(candidates.len());
    let mut max_raw = 0.0f64;
    for cand in candidates {
        let raw = if cand.serving == target.serving {
            None
        } else {
            position_distance_raw(&target.trajectories, &cand.trajectories)?
        };
        if let Some(r) = raw {
            max_raw = max_raw.max(r);
        }
        raws.push(raw);
    }
    let pos_norm = if max_raw > 0.0 { max_raw } else { 1.0 };

    let mut picks = Vec::new();
    for (&cand, raw) in candidates.iter().zip(raws) {
        if cand.serving == target.serving {
            continue;
        }
        // Canonicalize like domain_distance so results match the matrix path.
        let (x, y, r) = if target.serving <= cand.serving {
            (target, cand, raw)
        } else {
            (cand, target, raw)
        };
        let rec = domain_distance_with_raw(x, y, c, r, pos_norm, params)?;
        if rec.dist < cutoff {
            picks.push((cand.serving, rec.dist));
        }
    }
    picks.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
    picks.truncate(k);
    Ok(picks)
}
