//! Per-serving-station domains in relative coordinates.
//!
//! Every MR sample belongs to the domain of its serving station. Inside a
//! domain all geometry is expressed relative to the serving station's
//! position, which makes domains with congruent station layouts directly
//! comparable no matter where on the map they sit: labels become
//! [`RelativePos`] offsets, neighbor stations land on a g x g grid over the
//! rectangle spanned by the domain's station constellation, and feature
//! vectors carry grid cells plus raw signal readings per slot.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::TlocError;
use crate::geo::{geo_to_local, GeoPoint, RelativePos};
use crate::mr::{
    segment_points, write_mr_csv, BaseStationId, MrSample, StationRegistry, Trajectory,
    MAX_NEIGHBORS,
};
use crate::Result;

/// Feature vector width: 7 station slots x (gx, gy, rssi, asu, signal level).
pub const FEATURE_COUNT: usize = MAX_NEIGHBORS * 5;

/// Sentinel written for the grid coordinates of an unknown station.
pub const MISSING_GRID: f64 = -1.0;
/// Sentinel RSSI for an absent slot, below the physical range.
pub const MISSING_RSSI: f64 = -150.0;
/// Sentinel ASU for an absent slot.
pub const MISSING_ASU: f64 = -1.0;
/// Sentinel signal level for an absent slot.
pub const MISSING_SIG: f64 = -1.0;

/// Grid cell of a station inside its domain; (-1, -1) when unknown.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridId {
    pub gx: i32,
    pub gy: i32,
}

/// The unknown-cell sentinel.
pub const GRID_SENTINEL: GridId = GridId { gx: -1, gy: -1 };

/// A g x g grid over the rectangle with half-extents (half_w, half_h)
/// centered on the serving station.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub g: usize,
    pub half_w: f64,
    pub half_h: f64,
}

impl GridSpec {
    /// Maps a relative position to its cell: floor((v + half) / (2*half/g)),
    /// clamped to [0, g-1]. A collapsed axis (half extent 0) maps everything
    /// to the central column g/2.
    pub fn cell_of(&self, p: RelativePos) -> GridId {
        let g = self.g as f64;
        let axis = |v: f64, half: f64| -> i32 {
            if half > 0.0 {
                let cell = ((v + half) / (2.0 * half / g)).floor();
                cell.clamp(0.0, g - 1.0) as i32
            } else {
                (self.g / 2) as i32
            }
        };
        GridId { gx: axis(p.x, self.half_w), gy: axis(p.y, self.half_h) }
    }

    /// Cell center in the unit square, the shared frame used when comparing
    /// station constellations across domains.
    pub fn cell_center_unit(&self, id: GridId) -> (f64, f64) {
        let g = self.g as f64;
        ((id.gx as f64 + 0.5) / g, (id.gy as f64 + 0.5) / g)
    }
}

/// Builds the grid over a station constellation. Returns `None` when no
/// station strays from the center (nothing to span, as with 4G records
/// whose neighbors are anonymous).
pub fn grid_from_positions(positions: &[RelativePos], g: usize) -> Option<GridSpec> {
    let half_w = positions.iter().map(|p| p.x.abs()).fold(0.0, f64::max);
    let half_h = positions.iter().map(|p| p.y.abs()).fold(0.0, f64::max);
    if half_w == 0.0 && half_h == 0.0 {
        return None;
    }
    Some(GridSpec { g, half_w, half_h })
}

/// A station seen inside a domain, with its relative position and grid cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborStation {
    pub id: BaseStationId,
    pub pos: RelativePos,
    pub grid: GridId,
}

/// A sample plus its label mapped into the domain frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSample {
    pub mr: MrSample,
    pub rel_label: Option<RelativePos>,
}

/// Partitioning parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainParams {
    /// Grid resolution per axis.
    pub g: usize,
    /// Trajectory gap threshold in seconds.
    pub gap_s: f64,
}

impl Default for DomainParams {
    fn default() -> Self {
        DomainParams { g: 20, gap_s: 3600.0 }
    }
}

/// All samples served by one station, in that station's relative frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    pub serving: BaseStationId,
    pub center: GeoPoint,
    /// Max distance of a labeled position from the center; 0 without labels.
    pub radius_m: f64,
    pub grid: Option<GridSpec>,
    pub samples: Vec<DomainSample>,
    /// Every station observed in this domain with a known survey position.
    pub stations: BTreeMap<BaseStationId, NeighborStation>,
    /// groups[i]: distinct stations observed at slot i, ordered by id.
    pub groups: [Vec<BaseStationId>; MAX_NEIGHBORS],
    /// Labeled runs in relative coordinates.
    pub trajectories: Vec<Trajectory<RelativePos>>,
}

impl Domain {
    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn labeled_count(&self) -> usize {
        self.samples.iter().filter(|s| s.rel_label.is_some()).count()
    }

    /// Feature/label pairs for every labeled sample, in sample order.
    pub fn labeled_features(&self) -> Vec<(FeatureVector, RelativePos)> {
        self.samples
            .iter()
            .filter_map(|s| s.rel_label.map(|l| (extract_features(self, &s.mr), l)))
            .collect()
    }
}

/// Fixed-width numeric features for one sample in one domain's frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub [f64; FEATURE_COUNT]);

impl FeatureVector {
    pub fn values(&self) -> &[f64; FEATURE_COUNT] {
        &self.0
    }
}

/// Encodes a sample against a domain: per slot the station grid cell (or
/// sentinels) and the raw signal readings; absent slots get sentinel blocks.
/// Only grid cells depend on the domain, so congruent domains encode
/// congruent samples identically.
pub fn extract_features(domain: &Domain, sample: &MrSample) -> FeatureVector {
    let mut v = [0.0; FEATURE_COUNT];
    for slot in 0..MAX_NEIGHBORS {
        let base = slot * 5;
        match sample.entries.get(slot) {
            Some(e) => {
                let grid = e
                    .station
                    .and_then(|id| domain.stations.get(&id))
                    .map(|ns| ns.grid)
                    .unwrap_or(GRID_SENTINEL);
                v[base] = grid.gx as f64;
                v[base + 1] = grid.gy as f64;
                v[base + 2] = e.rssi;
                v[base + 3] = e.asu as f64;
                v[base + 4] = e.signal_level as f64;
            }
            None => {
                v[base] = MISSING_GRID;
                v[base + 1] = MISSING_GRID;
                v[base + 2] = MISSING_RSSI;
                v[base + 3] = MISSING_ASU;
                v[base + 4] = MISSING_SIG;
            }
        }
    }
    FeatureVector(v)
}

/// Splits samples into per-serving-station domains, ordered by station id.
///
/// Labels and station positions are projected into each domain's relative
/// frame; labeled runs are re-segmented per device inside the domain.
pub fn partition_by_serving(
    samples: &[MrSample],
    registry: &StationRegistry,
    params: &DomainParams,
) -> Result<Vec<Domain>> {
    if params.g == 0 {
        return Err(TlocError::InvalidConfig("grid resolution g must be >= 1".into()));
    }
    let mut groups: BTreeMap<BaseStationId, Vec<&MrSample>> = BTreeMap::new();
    for s in samples {
        let serving = s
            .serving()
            .ok_or_else(|| TlocError::Degenerate("sample without serving station id".into()))?;
        groups.entry(serving).or_default().push(s);
    }

    let mut out = Vec::with_capacity(groups.len());
    for (serving, members) in groups {
        let center = registry
            .get(&serving)
            .ok_or(TlocError::UnknownServingStation { id: serving })?
            .pos;

        let mut stations: BTreeMap<BaseStationId, NeighborStation> = BTreeMap::new();
        let mut slot_ids: [BTreeSet<BaseStationId>; MAX_NEIGHBORS] = Default::default();
        for s in &members {
            for (slot, e) in s.entries.iter().enumerate() {
                if let Some(id) = e.station {
                    if let Some(rec) = registry.get(&id) {
                        stations.entry(id).or_insert_with(|| NeighborStation {
                            id,
                            pos: geo_to_local(center, rec.pos),
                            grid: GRID_SENTINEL,
                        });
                        slot_ids[slot].insert(id);
                    }
                }
            }
        }

        let positions: Vec<RelativePos> = stations.values().map(|ns| ns.pos).collect();
        let grid = grid_from_positions(&positions, params.g);
        if let Some(spec) = grid {
            for ns in stations.values_mut() {
                ns.grid = spec.cell_of(ns.pos);
            }
        }

        let domain_samples: Vec<DomainSample> = members
            .iter()
            .map(|s| DomainSample {
                mr: (*s).clone(),
                rel_label: s.label.map(|l| geo_to_local(center, l)),
            })
            .collect();

        let radius_m = domain_samples
            .iter()
            .filter_map(|s| s.rel_label.map(|l| l.norm()))
            .fold(0.0, f64::max);

        let mut per_device: BTreeMap<String, Vec<(f64, RelativePos)>> = BTreeMap::new();
        for s in &domain_samples {
            if let Some(l) = s.rel_label {
                per_device.entry(s.mr.device_id.clone()).or_default().push((s.mr.timestamp, l));
            }
        }
        let trajectories = segment_points(per_device, params.gap_s);

        let groups_arr: [Vec<BaseStationId>; MAX_NEIGHBORS] =
            slot_ids.map(|set| set.into_iter().collect());

        out.push(Domain {
            serving,
            center,
            radius_m,
            grid,
            samples: domain_samples,
            stations,
            groups: groups_arr,
            trajectories,
        });
    }
    Ok(out)
}

fn json_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        "null".to_string()
    }
}

/// Writes one MR CSV per domain plus a `manifest.json` describing each
/// domain's frame (center, radius, grid geometry, sample counts).
pub fn write_domains(dir: impl AsRef<Path>, domains: &[Domain]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| TlocError::io(dir, e))?;
    let mut manifest = String::from("[\n");
    for (i, d) in domains.iter().enumerate() {
        let file = format!("d_{}_{}.csv", d.serving.rnc, d.serving.cell);
        let samples: Vec<MrSample> = d.samples.iter().map(|s| s.mr.clone()).collect();
        write_mr_csv(dir.join(&file), &samples)?;
        let (g, half_w, half_h) = match d.grid {
            Some(spec) => (spec.g.to_string(), json_f64(spec.half_w), json_f64(spec.half_h)),
            None => ("null".into(), "null".into(), "null".into()),
        };
        let _ = write!(
            manifest,
            "  {{\"domain\": \"{}\", \"file\": \"{}\", \"center_lon\": {}, \"center_lat\": {}, \
             \"radius_m\": {}, \"g\": {}, \"half_w\": {}, \"half_h\": {}, \"samples\": {}, \
             \"labeled\": {}, \"trajectories\": {}}}{}\n",
            d.serving,
            file,
            json_f64(d.center.lon),
            json_f64(d.center.lat),
            json_f64(d.radius_m),
            g,
            half_w,
            half_h,
            d.n_samples(),
            d.labeled_count(),
            d.trajectories.len(),
            if i + 1 == domains.len() { "" } else { "," },
        );
    }
    manifest.push_str("]\n");
    std::fs::write(dir.join("manifest.json"), manifest)
        .map_err(|e| TlocError::io(dir.join("manifest.json"), e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mr::NeighborEntry;

    fn entry(id: Option<(u32, u32)>, rssi: f64) -> NeighborEntry {
        NeighborEntry {
            station: id.map(|(r, c)| BaseStationId::new(r, c)),
            rssi,
            asu: ((rssi + 113.0) / 2.0).round() as i32,
            signal_level: 2,
        }
    }

    fn sample(dev: &str, t: f64, entries: Vec<NeighborEntry>, label: Option<GeoPoint>) -> MrSample {
        let mut entries = entries;
        entries.sort_by(|a, b| b.rssi.total_cmp(&a.rssi));
        MrSample { timestamp: t, device_id: dev.into(), entries, label }
    }

    /// Independent restatement of the cell rule, kept deliberately literal.
    fn cell_oracle(v: f64, half: f64, g: usize) -> i32 {
        if half == 0.0 {
            return (g / 2) as i32;
        }
        let width = 2.0 * half;
        let idx = ((v + half) / (width / g as f64)).floor() as i64;
        idx.max(0).min(g as i64 - 1) as i32
    }

    #[test]
    fn grid_corners_center_and_clamping() {
        let spec = GridSpec { g: 10, half_w: 40.0, half_h: 25.0 };
        // Station at (+max |x|, -max |y|): east edge, south edge.
        assert_eq!(spec.cell_of(RelativePos::new(40.0, -25.0)), GridId { gx: 9, gy: 0 });
        assert_eq!(spec.cell_of(RelativePos::new(-40.0, 25.0)), GridId { gx: 0, gy: 9 });
        // Far outside the rectangle: clamped to the border cells.
        assert_eq!(spec.cell_of(RelativePos::new(1e6, -1e6)), GridId { gx: 9, gy: 0 });

        for g in [2usize, 7, 10, 20, 21] {
            let spec = GridSpec { g, half_w: 33.0, half_h: 12.5 };
            let center = spec.cell_of(RelativePos::new(0.0, 0.0));
            assert_eq!(center.gx, cell_oracle(0.0, 33.0, g));
            assert_eq!(center.gy, cell_oracle(0.0, 12.5, g));
            // The serving station sits in the central cell under the floor rule.
            let want = [(g as i32) / 2, (g as i32 - 1) / 2];
            assert!(want.contains(&center.gx), "g={g} gx={}", center.gx);
        }

        // Collapsed axis: everything maps to the central column.
        let flat = GridSpec { g: 20, half_w: 50.0, half_h: 0.0 };
        assert_eq!(flat.cell_of(RelativePos::new(10.0, 123.0)).gy, 10);

        // Random probes against the literal oracle.
        for i in 0..200 {
            let v = (i as f64) * 1.7 - 170.0;
            let got = GridSpec { g: 13, half_w: 100.0, half_h: 100.0 }
                .cell_of(RelativePos::new(v, -v));
            assert_eq!(got.gx, cell_oracle(v, 100.0, 13));
            assert_eq!(got.gy, cell_oracle(-v, 100.0, 13));
        }
    }

    fn tiny_registry() -> StationRegistry {
        let mut reg = StationRegistry::new();
        for (rnc, cell, lon, lat) in [
            (600u32, 1u32, 10.0, 50.0),
            (600, 2, 10.004, 50.0),
            (600, 3, 10.0, 50.003),
        ] {
            let id = BaseStationId::new(rnc, cell);
            reg.insert(id, crate::mr::StationRecord { id, pos: GeoPoint::new(lon, lat) });
        }
        reg
    }

    #[test]
    fn partition_groups_by_serving_and_builds_relative_frames() {
        let reg = tiny_registry();
        let samples = vec![
            sample(
                "a",
                0.0,
                vec![entry(Some((600, 1)), -70.0), entry(Some((600, 2)), -80.0)],
                Some(GeoPoint::new(10.001, 50.0)),
            ),
            sample(
                "a",
                10.0,
                vec![entry(Some((600, 1)), -72.0), entry(Some((600, 3)), -81.0)],
                Some(GeoPoint::new(10.0, 50.0005)),
            ),
            sample("b", 5.0, vec![entry(Some((600, 2)), -75.0)], None),
        ];
        let domains = partition_by_serving(&samples, &reg, &DomainParams::default()).unwrap();
        assert_eq!(domains.len(), 2);
        assert_eq!(domains[0].serving, BaseStationId::new(600, 1));
        assert_eq!(domains[1].serving, BaseStationId::new(600, 2));

        let d = &domains[0];
        assert_eq!(d.n_samples(), 2);
        assert_eq!(d.labeled_count(), 2);
        // Radius oracle: max over labeled relative norms, computed by hand here.
        let r1 = geo_to_local(d.center, GeoPoint::new(10.001, 50.0)).norm();
        let r2 = geo_to_local(d.center, GeoPoint::new(10.0, 50.0005)).norm();
        assert_eq!(d.radius_m, r1.max(r2));
        // Serving station sits at the origin of its own frame.
        assert_eq!(d.stations[&d.serving].pos, RelativePos::new(0.0, 0.0));
        // Slot groups: serving always alone in group 1.
        assert_eq!(d.groups[0], vec![BaseStationId::new(600, 1)]);
        assert_eq!(
            d.groups[1],
            vec![BaseStationId::new(600, 2), BaseStationId::new(600, 3)]
        );
        // One device, no big gaps: a single trajectory with both points.
        assert_eq!(d.trajectories.len(), 1);
        assert_eq!(d.trajectories[0].points.len(), 2);

        // The zero-label domain is retained.
        assert_eq!(domains[1].labeled_count(), 0);
        assert_eq!(domains[1].radius_m, 0.0);
        assert!(domains[1].trajectories.is_empty());
    }

    #[test]
    fn unknown_serving_station_is_an_error() {
        let reg = tiny_registry();
        let samples = vec![sample("a", 0.0, vec![entry(Some((999, 9)), -70.0)], None)];
        assert!(matches!(
            partition_by_serving(&samples, &reg, &DomainParams::default()),
            Err(TlocError::UnknownServingStation { .. })
        ));
    }

    #[test]
    fn feature_layout_and_sentinels() {
        let reg = tiny_registry();
        let samples = vec![
            sample(
                "a",
                0.0,
                vec![entry(Some((600, 1)), -70.0), entry(Some((600, 2)), -80.0)],
                Some(GeoPoint::new(10.001, 50.0)),
            ),
            // 4G-style: neighbor reading without identity.
            sample("a", 1.0, vec![entry(Some((600, 1)), -71.0), entry(None, -85.0)], None),
        ];
        let domains = partition_by_serving(&samples, &reg, &DomainParams::default()).unwrap();
        let d = &domains[0];
        let spec = d.grid.expect("two separated stations span a grid");

        let v = extract_features(d, &d.samples[0].mr);
        assert_eq!(v.0.len(), FEATURE_COUNT);
        // Slot 1: serving cell, then rssi/asu/sig.
        let serving_cell = spec.cell_of(RelativePos::new(0.0, 0.0));
        assert_eq!(v.0[0], serving_cell.gx as f64);
        assert_eq!(v.0[1], serving_cell.gy as f64);
        assert_eq!(v.0[2], -70.0);
        assert_eq!(v.0[3], 22.0);
        assert_eq!(v.0[4], 2.0);
        // Slot 3 onward absent: sentinel blocks.
        assert_eq!(&v.0[10..15], &[MISSING_GRID, MISSING_GRID, MISSING_RSSI, MISSING_ASU, MISSING_SIG]);

        // Anonymous neighbor: grid sentinels, signal fields populated.
        let v4g = extract_features(d, &d.samples[1].mr);
        assert_eq!(v4g.0[5], MISSING_GRID);
        assert_eq!(v4g.0[6], MISSING_GRID);
        assert_eq!(v4g.0[7], -85.0);
    }

    #[test]
    fn domains_serialize_with_manifest() {
        let reg = tiny_registry();
        let samples = vec![
            sample("a", 0.0, vec![entry(Some((600, 1)), -70.0)], Some(GeoPoint::new(10.001, 50.0))),
            sample("b", 5.0, vec![entry(Some((600, 2)), -75.0)], None),
        ];
        let domains = partition_by_serving(&samples, &reg, &DomainParams::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_domains(dir.path(), &domains).unwrap();

        let manifest = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        assert!(manifest.contains("\"domain\": \"600:1\""));
        assert!(manifest.contains("\"domain\": \"600:2\""));
        for d in &domains {
            let f = dir.path().join(format!("d_{}_{}.csv", d.serving.rnc, d.serving.cell));
            let back = crate::mr::parse_mr_csv(&f).unwrap();
            assert_eq!(back.len(), d.n_samples());
        }
    }
}
