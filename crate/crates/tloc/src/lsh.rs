//! Locality-sensitive pre-selection of source domains.
//!
//! An exact source scan compares the target against every candidate, which
//! is quadratic across a corpus. The index here hashes each domain's signal
//! signature with random hyperplanes (sign bits, grouped into bands) so
//! that similar domains tend to share a bucket in at least one band. A
//! query unions its bucket mates and re-ranks only those exactly, falling
//! back to a seeded subsample when every band comes up empty.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::distance::{
    harmonic_weights, select_sources_ref, DistanceParams, DomainSignature,
};
use crate::error::TlocError;
use crate::mr::{BaseStationId, MAX_NEIGHBORS};
use crate::Result;

/// Banding shape of the index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LshParams {
    /// Number of bands; a candidate matches if it agrees on all rows of
    /// any one band.
    pub bands: usize,
    /// Hyperplanes per band.
    pub rows: usize,
}

impl Default for LshParams {
    fn default() -> Self {
        LshParams { bands: 16, rows: 6 }
    }
}

impl LshParams {
    pub fn validate(&self) -> Result<()> {
        if self.bands == 0 || self.rows == 0 {
            return Err(TlocError::InvalidConfig("bands and rows must be positive".into()));
        }
        if self.rows > 64 {
            return Err(TlocError::InvalidConfig("at most 64 rows per band".into()));
        }
        Ok(())
    }
}

/// Numeric profile a domain is hashed on: the per-group RSSI histogram
/// masses, scaled by the fixed harmonic slot weights so that strong slots
/// dominate bucketing the same way they dominate the exact distance.
pub fn lsh_signature(sig: &DomainSignature) -> Vec<f64> {
    let w = harmonic_weights();
    let mut v = Vec::with_capacity(MAX_NEIGHBORS * sig.rssi_hists[0].mass.len());
    for (g, h) in sig.rssi_hists.iter().enumerate() {
        v.extend(h.mass.iter().map(|m| m * w.w[g]));
    }
    v
}

/// Hyperplane index over a fixed corpus of domain signatures.
#[derive(Debug)]
pub struct LshIndex {
    params: LshParams,
    seed: u64,
    dims: usize,
    /// bands * rows hyperplanes, row-major by band.
    planes: Vec<Vec<f64>>,
    ids: Vec<BaseStationId>,
    buckets: BTreeMap<(usize, u64), Vec<usize>>,
}

impl LshIndex {
    /// Builds the index. Hyperplane directions and bucketing are fully
    /// determined by `seed`.
    pub fn build(sigs: &[DomainSignature], params: LshParams, seed: u64) -> Result<Self> {
        params.validate()?;
        let dims = sigs
            .first()
            .map(|s| lsh_signature(s).len())
            .unwrap_or(MAX_NEIGHBORS * 14);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let planes: Vec<Vec<f64>> = (0..params.bands * params.rows)
            .map(|_| (0..dims).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let mut index = LshIndex {
            params,
            seed,
            dims,
            planes,
            ids: Vec::with_capacity(sigs.len()),
            buckets: BTreeMap::new(),
        };
        for (i, sig) in sigs.iter().enumerate() {
            let keys = index.band_keys(sig);
            for (band, key) in keys.into_iter().enumerate() {
                index.buckets.entry((band, key)).or_default().push(i);
            }
            index.ids.push(sig.serving);
        }
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// One bucket key per band: the sign bits of the band's hyperplanes.
    fn band_keys(&self, sig: &DomainSignature) -> Vec<u64> {
        let v = lsh_signature(sig);
        debug_assert_eq!(v.len(), self.dims);
        (0..self.params.bands)
            .map(|band| {
                let mut key = 0u64;
                for row in 0..self.params.rows {
                    let plane = &self.planes[band * self.params.rows + row];
                    let dot: f64 = plane.iter().zip(&v).map(|(p, x)| p * x).sum();
                    if dot >= 0.0 {
                        key |= 1 << row;
                    }
                }
                key
            })
            .collect()
    }

    /// Indices of every domain sharing at least one band bucket with the
    /// query, the query's own id excluded, ascending.
    pub fn candidates(&self, query: &DomainSignature) -> Vec<usize> {
        let mut out = BTreeSet::new();
        for (band, key) in self.band_keys(query).into_iter().enumerate() {
            if let Some(members) = self.buckets.get(&(band, key)) {
                out.extend(members.iter().copied());
            }
        }
        out.into_iter().filter(|&i| self.ids[i] != query.serving).collect()
    }

    /// Deterministic subsample used when no band matches: up to
    /// max(4k, ceil(sqrt(n))) corpus members other than the query.
    pub(crate) fn fallback_sample(&self, exclude: BaseStationId, k: usize) -> Vec<usize> {
        let eligible: Vec<usize> =
            (0..self.ids.len()).filter(|&i| self.ids[i] != exclude).collect();
        let want = (4 * k).max((self.ids.len() as f64).sqrt().ceil() as usize);
        if eligible.len() <= want {
            return eligible;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_fa11);
        let mut picks: Vec<usize> = rand::seq::index::sample(&mut rng, eligible.len(), want)
            .into_iter()
            .map(|i| eligible[i])
            .collect();
        picks.sort_unstable();
        picks
    }

    /// Approximate source selection: bucket candidates (or the fallback
    /// subsample) re-ranked exactly with the composite distance.
    pub fn topk(
        &self,
        query: &DomainSignature,
        corpus: &[DomainSignature],
        c: f64,
        dist_params: &DistanceParams,
        k: usize,
        cutoff: f64,
    ) -> Result<Vec<(BaseStationId, f64)>> {
        if corpus.len() != self.ids.len() {
            return Err(TlocError::InvalidConfig(
                "corpus does not match the indexed signatures".into(),
            ));
        }
        let mut cand = self.candidates(query);
        if cand.is_empty() {
            cand = self.fallback_sample(query.serving, k);
        }
        let refs: Vec<&DomainSignature> = cand.into_iter().map(|i| &corpus[i]).collect();
        select_sources_ref(query, &refs, c, dist_params, k, cutoff)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distance::{pearson_c, select_sources};
    use crate::domain::{partition_by_serving, Domain, DomainParams};
    use crate::geo::GeoPoint;
    use crate::mr::{MrSample, NeighborEntry, StationRecord, StationRegistry};

    /// A line of stations; domain i walks near station i with station i+1
    /// as its neighbor, with an RSSI profile that drifts along the line.
    fn line_corpus(n: usize) -> Vec<Domain> {
        let mut reg = StationRegistry::new();
        for cell in 1..=(n as u32 + 1) {
            let id = BaseStationId::new(700, cell);
            let lon = 10.0 + cell as f64 * 0.005;
            reg.insert(id, StationRecord { id, pos: GeoPoint::new(lon, 48.0) });
        }
        let mut samples = Vec::new();
        for d in 0..n {
            let serving = BaseStationId::new(700, d as u32 + 1);
            let neighbor = BaseStationId::new(700, d as u32 + 2);
            let base = -60.0 - (d as f64 * 1.7) % 45.0;
            for i in 0..12usize {
                let jitter = ((i * 29 + d * 13) % 9) as f64 - 4.0;
                let srssi = (base + jitter).clamp(-112.0, -44.0);
                let nrssi = (base - 10.0 - jitter).clamp(-112.0, -44.0);
                let mk = |id: BaseStationId, rssi: f64| NeighborEntry {
                    station: Some(id),
                    rssi,
                    asu: ((rssi + 113.0) / 2.0).round() as i32,
                    signal_level: (((rssi + 113.0) / 2.0).round() as i32 / 7).min(4) as u8,
                };
                let mut entries = vec![mk(serving, srssi), mk(neighbor, nrssi)];
                entries.sort_by(|a, b| b.rssi.total_cmp(&a.rssi));
                samples.push(MrSample {
                    timestamp: i as f64 * 5.0,
                    device_id: format!("dev{d}"),
                    entries,
                    label: Some(GeoPoint::new(
                        10.0 + (d as f64 + 1.0) * 0.005 + i as f64 * 1e-5,
                        48.0 + i as f64 * 5e-6,
                    )),
                });
            }
        }
        partition_by_serving(&samples, &reg, &DomainParams::default()).unwrap()
    }

    #[test]
    fn identical_signal_profiles_always_collide() {
        let domains = line_corpus(8);
        let mut sigs: Vec<DomainSignature> =
            domains.iter().map(DomainSignature::of).collect();
        // Clone domain 0's signal profile under a fresh id: every band key
        // is a function of the signature alone, so all 16 must match.
        let mut twin = sigs[0].clone();
        twin.serving = BaseStationId::new(700, 99);
        sigs.push(twin.clone());
        let index = LshIndex::build(&sigs, LshParams::default(), 42).unwrap();
        let cand = index.candidates(&sigs[0]);
        assert!(cand.contains(&(sigs.len() - 1)), "twin must be a candidate");
        assert!(!cand.contains(&0), "a query never returns itself");
    }

    #[test]
    fn index_is_deterministic_in_the_seed() {
        let domains = line_corpus(10);
        let sigs: Vec<DomainSignature> = domains.iter().map(DomainSignature::of).collect();
        let a = LshIndex::build(&sigs, LshParams::default(), 7).unwrap();
        let b = LshIndex::build(&sigs, LshParams::default(), 7).unwrap();
        for s in &sigs {
            assert_eq!(a.candidates(s), b.candidates(s));
        }
        assert_eq!(a.buckets, b.buckets);
    }

    #[test]
    fn fallback_sample_is_seeded_sized_and_excludes_the_query() {
        let domains = line_corpus(20);
        let sigs: Vec<DomainSignature> = domains.iter().map(DomainSignature::of).collect();
        let index = LshIndex::build(&sigs, LshParams::default(), 3).unwrap();
        let me = sigs[4].serving;
        let s1 = index.fallback_sample(me, 3);
        let s2 = index.fallback_sample(me, 3);
        assert_eq!(s1, s2, "fallback must be reproducible");
        // 20 domains, k = 3: max(12, ceil(sqrt(20))) = 12 picks.
        assert_eq!(s1.len(), 12);
        assert!(s1.iter().all(|&i| index.ids[i] != me));
        assert!(s1.windows(2).all(|w| w[0] < w[1]));

        // Small corpus: everything eligible is returned.
        let small = LshIndex::build(&sigs[..5], LshParams::default(), 3).unwrap();
        assert_eq!(small.fallback_sample(sigs[0].serving, 3).len(), 4);
    }

    #[test]
    fn topk_results_come_from_the_exact_ranking() {
        let domains = line_corpus(14);
        let c = pearson_c(&domains).unwrap();
        let sigs: Vec<DomainSignature> = domains.iter().map(DomainSignature::of).collect();
        let params = DistanceParams::default();
        let index = LshIndex::build(&sigs, LshParams::default(), 11).unwrap();

        let approx = index.topk(&sigs[0], &sigs, c, &params, 3, 0.95).unwrap();
        assert!(approx.len() <= 3);
        assert!(approx.windows(2).all(|w| w[0].1 <= w[1].1));
        for (id, d) in &approx {
            assert_ne!(*id, sigs[0].serving);
            assert!(*d < 0.95);
            // Each reported distance agrees with a direct scan containing
            // that candidate (select_sources normalizes per query scope, so
            // compare under the full-corpus scan which shares the scope
            // only when the candidate sets coincide; here we check the pair
            // is at least present in the exact top ranking of its bucket).
            let exact = select_sources(&sigs[0], &sigs[1..], c, &params, sigs.len(), 2.0)
                .unwrap();
            assert!(exact.iter().any(|(eid, _)| eid == id));
        }
    }

    #[test]
    fn invalid_shapes_are_rejected() {
        assert!(LshParams { bands: 0, rows: 6 }.validate().is_err());
        assert!(LshParams { bands: 16, rows: 0 }.validate().is_err());
        assert!(LshParams { bands: 1, rows: 65 }.validate().is_err());
    }
}
