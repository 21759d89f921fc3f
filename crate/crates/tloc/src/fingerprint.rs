//! Gaussian grid fingerprint baselines.
//!
//! Labeled samples are bucketed into square cells; each (cell, station)
//! pair keeps the mean and standard deviation of the station's RSSI there.
//! A query is scored per cell by the sum of Gaussian log-densities of its
//! observed stations (stations the cell never saw are skipped), then
//! answered by the best cell (MLE) or a likelihood-weighted average of the
//! best few (WA). Positions are planar, so the same machinery serves the
//! per-domain relative-coordinate variant and, with a shared absolute
//! frame, the area-wide one.

use std::collections::BTreeMap;

use crate::error::TlocError;
use crate::geo::RelativePos;
use crate::mr::{BaseStationId, MrSample};
use crate::Result;

/// Grid and likelihood parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FingerprintParams {
    pub cell_size_m: f64,
    /// Lower bound on per-station std so zero-variance cells keep finite
    /// likelihoods.
    pub std_floor: f64,
    /// Cells seen by fewer samples than this are dropped.
    pub min_cell_samples: usize,
    /// Cells averaged by predict_wa.
    pub top_m: usize,
}

impl Default for FingerprintParams {
    fn default() -> Self {
        FingerprintParams { cell_size_m: 50.0, std_floor: 1.0, min_cell_samples: 3, top_m: 5 }
    }
}

impl FingerprintParams {
    pub fn validate(&self) -> Result<()> {
        if self.cell_size_m <= 0.0 || self.std_floor <= 0.0 {
            return Err(TlocError::InvalidConfig(
                "cell size and std floor must be positive".into(),
            ));
        }
        if self.top_m == 0 {
            return Err(TlocError::InvalidConfig("top_m must be at least 1".into()));
        }
        Ok(())
    }
}

/// One labeled observation set: a position plus the station RSSIs heard
/// there.
#[derive(Debug, Clone, PartialEq)]
pub struct FpSample {
    pub pos: RelativePos,
    pub obs: Vec<(BaseStationId, f64)>,
}

/// Extracts the identifiable station observations of an MR sample
/// (anonymous neighbors cannot be matched and are dropped).
pub fn observations(mr: &MrSample) -> Vec<(BaseStationId, f64)> {
    mr.entries.iter().filter_map(|e| e.station.map(|s| (s, e.rssi))).collect()
}

/// Gaussian statistics of one station in one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellStats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// One surviving grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub center: RelativePos,
    pub n_samples: usize,
    pub stations: BTreeMap<BaseStationId, CellStats>,
}

/// The trained fingerprint: cells keyed by (ix, iy) = floor(pos / cell).
#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintGrid {
    pub params: FingerprintParams,
    pub cells: BTreeMap<(i64, i64), Cell>,
}

fn cell_key(pos: RelativePos, cell: f64) -> (i64, i64) {
    ((pos.x / cell).floor() as i64, (pos.y / cell).floor() as i64)
}

/// Builds the grid. Per-station values are sorted before the two-pass
/// mean/std so the result is invariant to sample order; the std is the
/// population form, floored. Cells with fewer than `min_cell_samples`
/// samples are dropped; an empty survivor set is an error.
pub fn build_fingerprint(
    samples: &[FpSample],
    params: &FingerprintParams,
) -> Result<FingerprintGrid> {
    params.validate()?;
    if samples.is_empty() {
        return Err(TlocError::Degenerate("cannot fingerprint zero labeled samples".into()));
    }
    let mut raw: BTreeMap<(i64, i64), (usize, BTreeMap<BaseStationId, Vec<f64>>)> =
        BTreeMap::new();
    for s in samples {
        let key = cell_key(s.pos, params.cell_size_m);
        let slot = raw.entry(key).or_default();
        slot.0 += 1;
        for &(id, rssi) in &s.obs {
            slot.1.entry(id).or_default().push(rssi);
        }
    }
    let mut cells = BTreeMap::new();
    for ((ix, iy), (n_samples, stations)) in raw {
        if n_samples < params.min_cell_samples {
            continue;
        }
        let mut stats = BTreeMap::new();
        for (id, mut values) in stations {
            values.sort_by(f64::total_cmp);
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let std = var.sqrt().max(params.std_floor);
            stats.insert(id, CellStats { mean, std, count: values.len() });
        }
        let center = RelativePos::new(
            (ix as f64 + 0.5) * params.cell_size_m,
            (iy as f64 + 0.5) * params.cell_size_m,
        );
        cells.insert((ix, iy), Cell { center, n_samples, stations: stats });
    }
    if cells.is_empty() {
        return Err(TlocError::Degenerate(format!(
            "no cell reaches {} samples",
            params.min_cell_samples
        )));
    }
    Ok(FingerprintGrid { params: *params, cells })
}

/// Log-likelihood of the observations under one cell: the sum of Gaussian
/// log-densities over stations the cell knows. `None` when the cell shares
/// no station with the query.
pub fn cell_log_likelihood(cell: &Cell, obs: &[(BaseStationId, f64)]) -> Option<f64> {
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let mut ll = 0.0;
    let mut matched = false;
    for &(id, rssi) in obs {
        if let Some(st) = cell.stations.get(&id) {
            let z = (rssi - st.mean) / st.std;
            ll += -st.std.ln() - 0.5 * ln_2pi - 0.5 * z * z;
            matched = true;
        }
    }
    matched.then_some(ll)
}

impl FingerprintGrid {
    /// Scored cells for a query, cell-key ascending.
    fn scored(&self, obs: &[(BaseStationId, f64)]) -> Vec<((i64, i64), RelativePos, f64)> {
        self.cells
            .iter()
            .filter_map(|(&k, c)| cell_log_likelihood(c, obs).map(|ll| (k, c.center, ll)))
            .collect()
    }

    /// Maximum-likelihood cell center; ties break to the smallest cell key.
    pub fn predict_mle(&self, obs: &[(BaseStationId, f64)]) -> Result<RelativePos> {
        let scored = self.scored(obs);
        // Ascending key iteration plus strict comparison keeps the
        // smallest key among equal likelihoods.
        let mut best: Option<(RelativePos, f64)> = None;
        for (_, center, ll) in scored {
            if best.map_or(true, |(_, b)| ll > b) {
                best = Some((center, ll));
            }
        }
        best.map(|(c, _)| c).ok_or(TlocError::Unlocatable)
    }

    /// Likelihood-weighted mean of the `top_m` best cells. With top_m = 1
    /// this is exactly predict_mle.
    pub fn predict_wa(&self, obs: &[(BaseStationId, f64)]) -> Result<RelativePos> {
        let mut scored = self.scored(obs);
        if scored.is_empty() {
            return Err(TlocError::Unlocatable);
        }
        scored.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
        scored.truncate(self.params.top_m);
        // Shift by the max before exponentiating; with one cell the weight
        // is exactly 1 and the center passes through untouched.
        let max_ll = scored[0].2;
        let mut wsum = 0.0;
        let (mut sx, mut sy) = (0.0, 0.0);
        for &(_, center, ll) in &scored {
            let w = (ll - max_ll).exp();
            wsum += w;
            sx += w * center.x;
            sy += w * center.y;
        }
        Ok(RelativePos::new(sx / wsum, sy / wsum))
    }

    pub fn predict(&self, obs: &[(BaseStationId, f64)], mode: FpMode) -> Result<RelativePos> {
        match mode {
            FpMode::Mle => self.predict_mle(obs),
            FpMode::Wa => self.predict_wa(obs),
        }
    }
}

/// Which estimator answers queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FpMode {
    Mle,
    Wa,
}

impl std::fmt::Display for FpMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FpMode::Mle => "mle",
            FpMode::Wa => "wa",
        })
    }
}

impl std::str::FromStr for FpMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mle" => Ok(FpMode::Mle),
            "wa" => Ok(FpMode::Wa),
            other => Err(format!("unknown fingerprint mode {other:?}")),
        }
    }
}

/// The per-domain relative-coordinate baseline: fingerprint the training
/// samples, answer every query.
pub fn renbl(
    train: &[FpSample],
    queries: &[Vec<(BaseStationId, f64)>],
    params: &FingerprintParams,
    mode: FpMode,
) -> Result<Vec<RelativePos>> {
    let grid = build_fingerprint(train, params)?;
    queries.iter().map(|q| grid.predict(q, mode)).collect()
}

/// The transfer variant: source-domain samples (already mapped into the
/// target's relative frame semantics by construction) join the target's
/// training set, target first. An empty pool degenerates to plain renbl,
/// bit for bit.
pub fn tran_renbl(
    target_train: &[FpSample],
    source_pool: &[FpSample],
    queries: &[Vec<(BaseStationId, f64)>],
    params: &FingerprintParams,
    mode: FpMode,
) -> Result<Vec<RelativePos>> {
    let mut all = target_train.to_vec();
    all.extend_from_slice(source_pool);
    renbl(&all, queries, params, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn id(n: u32) -> BaseStationId {
        BaseStationId::new(3, n)
    }

    fn sample(x: f64, y: f64, obs: &[(u32, f64)]) -> FpSample {
        FpSample {
            pos: RelativePos::new(x, y),
            obs: obs.iter().map(|&(s, r)| (id(s), r)).collect(),
        }
    }

    /// Random training set spanning a few cells with 3 stations.
    fn random_set(n: usize, seed: u64) -> Vec<FpSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let x = rng.gen::<f64>() * 200.0 - 100.0;
                let y = rng.gen::<f64>() * 200.0 - 100.0;
                let obs: Vec<(BaseStationId, f64)> = (1..=3)
                    .map(|s| {
                        (id(s), -60.0 - (x.abs() + y.abs()) / 10.0 - s as f64 * 3.0
                            + rng.gen::<f64>() * 4.0)
                    })
                    .collect();
                FpSample { pos: RelativePos::new(x, y), obs }
            })
            .collect()
    }

    #[test]
    fn constant_rssi_gets_the_floor_std() {
        let train: Vec<FpSample> =
            (0..4).map(|i| sample(10.0 + i as f64, 10.0, &[(1, -80.0)])).collect();
        let grid = build_fingerprint(&train, &FingerprintParams::default()).unwrap();
        assert_eq!(grid.cells.len(), 1);
        let cell = grid.cells.get(&(0, 0)).unwrap();
        assert_eq!(cell.n_samples, 4);
        let st = cell.stations.get(&id(1)).unwrap();
        assert_eq!(st.mean, -80.0);
        assert_eq!(st.std, 1.0, "zero variance hits the floor");
        assert_eq!(st.count, 4);
        assert_eq!(cell.center, RelativePos::new(25.0, 25.0));
    }

    #[test]
    fn stats_match_a_welford_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        // One cell, many observations of one station.
        let values: Vec<f64> = (0..40).map(|_| -90.0 + rng.gen::<f64>() * 30.0).collect();
        let train: Vec<FpSample> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| sample(5.0 + (i as f64) * 0.1, 5.0, &[(1, v)]))
            .collect();
        let grid = build_fingerprint(&train, &FingerprintParams::default()).unwrap();
        let st = grid.cells[&(0, 0)].stations[&id(1)];

        // Independent oracle: Welford's streaming mean and M2.
        let (mut mean, mut m2, mut n) = (0.0, 0.0, 0.0);
        for &v in &values {
            n += 1.0;
            let d = v - mean;
            mean += d / n;
            m2 += d * (v - mean);
        }
        let std = (m2 / n).sqrt();
        assert!((st.mean - mean).abs() < 1e-9);
        assert!((st.std - std.max(1.0)).abs() < 1e-9);
    }

    #[test]
    fn build_is_permutation_invariant() {
        let mut train = random_set(60, 7);
        let grid_a = build_fingerprint(&train, &FingerprintParams::default()).unwrap();
        // A deterministic scramble.
        train.reverse();
        train.swap(3, 41);
        train.swap(10, 55);
        let grid_b = build_fingerprint(&train, &FingerprintParams::default()).unwrap();
        assert_eq!(grid_a, grid_b, "sample order must not leak into the grid");
    }

    #[test]
    fn sparse_cells_are_dropped_and_empty_grids_error() {
        let mut train: Vec<FpSample> =
            (0..3).map(|i| sample(10.0 + i as f64, 10.0, &[(1, -70.0)])).collect();
        // Two strays in another cell: below min_cell_samples.
        train.push(sample(510.0, 10.0, &[(1, -90.0)]));
        train.push(sample(511.0, 10.0, &[(1, -90.0)]));
        let grid = build_fingerprint(&train, &FingerprintParams::default()).unwrap();
        assert_eq!(grid.cells.len(), 1);
        assert!(grid.cells.contains_key(&(0, 0)));

        let sparse: Vec<FpSample> =
            (0..2).map(|i| sample(10.0 + i as f64, 10.0, &[(1, -70.0)])).collect();
        assert!(matches!(
            build_fingerprint(&sparse, &FingerprintParams::default()),
            Err(TlocError::Degenerate(_))
        ));
    }

    #[test]
    fn mle_matches_the_exhaustive_oracle() {
        let train = random_set(120, 11);
        let grid = build_fingerprint(&train, &FingerprintParams::default()).unwrap();
        assert!(grid.cells.len() >= 2, "need several cells for a meaningful argmax");
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        for _ in 0..100 {
            let obs: Vec<(BaseStationId, f64)> =
                (1..=3).map(|s| (id(s), -100.0 + rng.gen::<f64>() * 40.0)).collect();
            let got = grid.predict_mle(&obs).unwrap();

            // Literal exhaustive scan with its own density arithmetic and
            // explicit lexicographic tie-break.
            let mut best: Option<((i64, i64), RelativePos, f64)> = None;
            for (&key, cell) in &grid.cells {
                let mut ll = 0.0;
                let mut any = false;
                for &(sid, rssi) in &obs {
                    if let Some(st) = cell.stations.get(&sid) {
                        ll += -(st.std.ln()) - 0.5 * ln_2pi
                            - (rssi - st.mean) * (rssi - st.mean) / (2.0 * st.std * st.std);
                        any = true;
                    }
                }
                if !any {
                    continue;
                }
                let better = match &best {
                    None => true,
                    Some((bk, _, bll)) => ll > *bll || (ll == *bll && key < *bk),
                };
                if better {
                    best = Some((key, cell.center, ll));
                }
            }
            let want = best.unwrap().1;
            assert_eq!(got.x.to_bits(), want.x.to_bits());
            assert_eq!(got.y.to_bits(), want.y.to_bits());
        }
    }

    #[test]
    fn observation_at_a_cells_mean_wins() {
        let mut train: Vec<FpSample> =
            (0..5).map(|i| sample(10.0 + i as f64, 10.0, &[(1, -60.0)])).collect();
        train.extend((0..5).map(|i| sample(110.0 + i as f64, 10.0, &[(1, -90.0)])));
        let grid = build_fingerprint(&train, &FingerprintParams::default()).unwrap();
        let at_first = grid.predict_mle(&[(id(1), -60.0)]).unwrap();
        assert_eq!(at_first, RelativePos::new(25.0, 25.0));
        let at_second = grid.predict_mle(&[(id(1), -90.0)]).unwrap();
        assert_eq!(at_second, RelativePos::new(125.0, 25.0));
    }

    #[test]
    fn wa_with_one_cell_is_mle_and_wa_stays_in_the_hull() {
        let train = random_set(120, 17);
        let mut p1 = FingerprintParams::default();
        p1.top_m = 1;
        let grid1 = build_fingerprint(&train, &p1).unwrap();
        let grid5 = build_fingerprint(&train, &FingerprintParams::default()).unwrap();
        let (min_x, max_x) = grid5
            .cells
            .values()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
                (lo.min(c.center.x), hi.max(c.center.x))
            });
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..50 {
            let obs: Vec<(BaseStationId, f64)> =
                (1..=3).map(|s| (id(s), -100.0 + rng.gen::<f64>() * 40.0)).collect();
            let wa1 = grid1.predict_wa(&obs).unwrap();
            let mle = grid1.predict_mle(&obs).unwrap();
            assert_eq!(wa1.x.to_bits(), mle.x.to_bits());
            assert_eq!(wa1.y.to_bits(), mle.y.to_bits());
            let wa5 = grid5.predict_wa(&obs).unwrap();
            assert!(wa5.x >= min_x - 1e-9 && wa5.x <= max_x + 1e-9);
        }
    }

    #[test]
    fn unseen_stations_are_unlocatable() {
        let train = random_set(30, 23);
        let grid = build_fingerprint(&train, &FingerprintParams::default()).unwrap();
        assert!(matches!(
            grid.predict_mle(&[(id(99), -70.0)]),
            Err(TlocError::Unlocatable)
        ));
        assert!(matches!(grid.predict_wa(&[]), Err(TlocError::Unlocatable)));
    }

    #[test]
    fn likelihood_rises_as_rssi_approaches_the_mean() {
        let train = random_set(80, 29);
        let grid = build_fingerprint(&train, &FingerprintParams::default()).unwrap();
        let (_, cell) = grid.cells.iter().next().unwrap();
        let (sid, st) = cell.stations.iter().next().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let a = st.mean + rng.gen::<f64>() * 30.0;
            let b = st.mean + (a - st.mean) * rng.gen::<f64>(); // strictly closer
            let ll_a = cell_log_likelihood(cell, &[(*sid, a)]).unwrap();
            let ll_b = cell_log_likelihood(cell, &[(*sid, b)]).unwrap();
            assert!(ll_b >= ll_a, "closer to the mean must not score lower");
        }
    }

    #[test]
    fn tran_renbl_with_empty_pool_is_renbl() {
        let train = random_set(50, 37);
        let queries: Vec<Vec<(BaseStationId, f64)>> = (0..10)
            .map(|i| vec![(id(1), -70.0 - i as f64), (id(2), -80.0)])
            .collect();
        let p = FingerprintParams::default();
        for mode in [FpMode::Mle, FpMode::Wa] {
            let a = renbl(&train, &queries, &p, mode).unwrap();
            let b = tran_renbl(&train, &[], &queries, &p, mode).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x.x.to_bits(), y.x.to_bits());
                assert_eq!(x.y.to_bits(), y.y.to_bits());
            }
        }
    }
}
