//! Deterministic synthetic worlds: seeded station layouts, road-bound
//! device walks and the MR datasets they emit.
//!
//! The propagation model is log-distance path loss with log-normal
//! shadowing, the simplest model with a similarity knob (the shadowing
//! sigma). Every random draw comes from a stream seeded by mixing the
//! world seed with a fixed stream tag, so regenerating with the same
//! config reproduces the dataset bit for bit and per-device streams do
//! not interact.
//!
//! All emitted geographic coordinates are quantized to multiples of
//! 2^-32 degree. At city magnitudes such values add and subtract exactly
//! in f64, which is what lets a translated copy of a domain reproduce the
//! original's relative-space encoding without rounding noise.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::TlocError;
use crate::geo::{local_to_geo, GeoPoint, RelativePos, M_PER_DEG_LON};
use crate::mr::{
    BaseStationId, MrSample, NeighborEntry, StationRecord, StationRegistry, Trajectory,
    MAX_NEIGHBORS,
};
use crate::Result;

const RSSI_FLOOR: f64 = -113.0;
const RSSI_CEIL: f64 = -43.0;
const TWO_POW_32: f64 = 4_294_967_296.0;

const STREAM_STATIONS: u64 = 0x0100;
const STREAM_TRACE: u64 = 0x0200_0000;
const STREAM_NOISE: u64 = 0x0300_0000;
const STREAM_SCARCITY: u64 = 0x0400_0000;
const STREAM_TWIN: u64 = 0x0500_0000;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One independent seed per (base seed, stream tag) pair.
pub(crate) fn derive_seed(base: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(base) ^ stream)
}

fn station_stream(id: BaseStationId) -> u64 {
    ((id.rnc as u64) << 32) | id.cell as u64
}

/// Snaps a degree value to the nearest multiple of 2^-32.
pub fn quantize_deg(v: f64) -> f64 {
    (v * TWO_POW_32).round() / TWO_POW_32
}

pub fn quantize_geo(p: GeoPoint) -> GeoPoint {
    GeoPoint::new(quantize_deg(p.lon), quantize_deg(p.lat))
}

/// The longitude offset closest to `east_m` meters at the given latitude
/// that is still an exact multiple of 2^-32 degree.
pub fn exact_lon_offset(lat_deg: f64, east_m: f64) -> f64 {
    quantize_deg(east_m / (lat_deg.to_radians().cos() * M_PER_DEG_LON))
}

/// 2G keeps neighbor station ids; 4G reports anonymous neighbor signals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetworkKind {
    TwoG,
    FourG,
}

impl std::fmt::Display for NetworkKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NetworkKind::TwoG => "2g",
            NetworkKind::FourG => "4g",
        })
    }
}

impl std::str::FromStr for NetworkKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "2g" => Ok(NetworkKind::TwoG),
            "4g" => Ok(NetworkKind::FourG),
            other => Err(format!("unknown network kind {other:?}, want 2g or 4g")),
        }
    }
}

/// Per-domain label-keep fractions; domains not listed use the default.
#[derive(Debug, Clone, PartialEq)]
pub struct ScarcityPlan {
    pub default_keep: f64,
    pub overrides: BTreeMap<BaseStationId, f64>,
}

impl Default for ScarcityPlan {
    fn default() -> Self {
        ScarcityPlan { default_keep: 1.0, overrides: BTreeMap::new() }
    }
}

impl ScarcityPlan {
    fn fraction_for(&self, id: BaseStationId) -> f64 {
        *self.overrides.get(&id).unwrap_or(&self.default_keep)
    }

    fn validate(&self) -> Result<()> {
        let ok = |f: f64| (0.0..=1.0).contains(&f);
        if !ok(self.default_keep) || !self.overrides.values().all(|&f| ok(f)) {
            return Err(TlocError::InvalidConfig(
                "label-keep fractions must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Everything that defines a synthetic world.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub seed: u64,
    pub extent_x_m: f64,
    pub extent_y_m: f64,
    pub n_stations: usize,
    /// Streets run at every multiple of this spacing, both axes.
    pub road_spacing_m: f64,
    /// Received power at 1 m.
    pub p0_dbm: f64,
    /// Path-loss exponent.
    pub eta: f64,
    /// Shadowing standard deviation in dB.
    pub sigma_db: f64,
    pub n_devices: usize,
    pub sample_rate_hz: f64,
    pub duration_s: f64,
    pub network: NetworkKind,
    /// Geographic anchor of the local planar frame.
    pub origin: GeoPoint,
    pub scarcity: ScarcityPlan,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 1,
            extent_x_m: 2000.0,
            extent_y_m: 2000.0,
            n_stations: 25,
            road_spacing_m: 200.0,
            p0_dbm: -25.0,
            eta: 2.8,
            sigma_db: 4.0,
            n_devices: 5,
            sample_rate_hz: 1.0,
            duration_s: 600.0,
            network: NetworkKind::TwoG,
            origin: GeoPoint::new(121.5, 31.25),
            scarcity: ScarcityPlan::default(),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(TlocError::InvalidConfig(msg.into()));
        if !(2.0..=5.0).contains(&self.eta) {
            return bad("path-loss exponent must lie in [2, 5]");
        }
        if !(self.sigma_db >= 0.0) {
            return bad("shadowing sigma must be >= 0");
        }
        if !(self.extent_x_m > 0.0) || !(self.extent_y_m > 0.0) {
            return bad("extents must be positive");
        }
        if self.n_stations == 0 {
            return bad("need at least one station");
        }
        if !(self.road_spacing_m > 0.0)
            || self.road_spacing_m > self.extent_x_m.min(self.extent_y_m)
        {
            return bad("road spacing must be positive and fit inside the extent");
        }
        if self.n_devices == 0 || !(self.sample_rate_hz > 0.0) || !(self.duration_s > 0.0) {
            return bad("need devices, a positive sample rate and a positive duration");
        }
        self.scarcity.validate()
    }
}

/// Streets at every multiple of `spacing_m`; nodes are the intersections.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoadGrid {
    pub spacing_m: f64,
    pub nx: usize,
    pub ny: usize,
}

impl RoadGrid {
    fn of(config: &WorldConfig) -> RoadGrid {
        RoadGrid {
            spacing_m: config.road_spacing_m,
            nx: (config.extent_x_m / config.road_spacing_m).floor() as usize + 1,
            ny: (config.extent_y_m / config.road_spacing_m).floor() as usize + 1,
        }
    }

    fn node(&self, ix: usize, iy: usize) -> RelativePos {
        RelativePos::new(ix as f64 * self.spacing_m, iy as f64 * self.spacing_m)
    }
}

/// A generated world: the config it came from, the surveyed stations and
/// the street grid devices walk on.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub registry: StationRegistry,
    pub roads: RoadGrid,
}

impl World {
    /// Station positions in the origin's planar frame, id ascending.
    fn stations_local(&self) -> Vec<(BaseStationId, RelativePos)> {
        self.registry
            .values()
            .map(|st| (st.id, crate::geo::geo_to_local(self.config.origin, st.pos)))
            .collect()
    }
}

/// Places stations by seeded stratified sampling: one station per cell of
/// a ceil(sqrt(n)) grid, drawn uniformly from a window two cells wide
/// around its cell center (clamped to the extent). The strata suppress
/// large-scale clumping while the overlapping windows keep short-range
/// pair statistics close to a uniform process of the same density.
pub fn generate_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    if config.extent_x_m * config.extent_y_m / (config.n_stations as f64) < 1.0 {
        return Err(TlocError::InvalidConfig(format!(
            "{} stations cannot keep meter-scale separation inside {} x {} m",
            config.n_stations, config.extent_x_m, config.extent_y_m
        )));
    }
    let m = (config.n_stations as f64).sqrt().ceil() as usize;
    let cell_x = config.extent_x_m / m as f64;
    let cell_y = config.extent_y_m / m as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_STATIONS));
    let mut draw = |center: f64, cell: f64, extent: f64| {
        let lo = (center - cell).max(0.0);
        let hi = (center + cell).min(extent);
        lo + rng.gen::<f64>() * (hi - lo)
    };
    let mut registry = StationRegistry::new();
    for idx in 0..config.n_stations {
        let (ix, iy) = (idx % m, idx / m);
        let x = draw((ix as f64 + 0.5) * cell_x, cell_x, config.extent_x_m);
        let y = draw((iy as f64 + 0.5) * cell_y, cell_y, config.extent_y_m);
        let id = BaseStationId::new(100, idx as u32 + 1);
        let pos = quantize_geo(local_to_geo(config.origin, RelativePos::new(x, y)));
        registry.insert(id, StationRecord { id, pos });
    }
    Ok(World { config: config.clone(), registry, roads: RoadGrid::of(config) })
}

/// Walks every device over the street grid by random waypoints: pick an
/// intersection, walk there as an axis-aligned L, repeat. The speed is
/// redrawn from [1, 2] m/s at every sampling step, which keeps each
/// realized trace length concentrated at the band mean instead of at the
/// mercy of a handful of slow routes. Ground truth stays planar here.
pub fn simulate_traces(world: &World) -> Vec<Trajectory<RelativePos>> {
    let cfg = &world.config;
    let roads = world.roads;
    let dt = 1.0 / cfg.sample_rate_hz;
    let n_steps = (cfg.duration_s * cfg.sample_rate_hz).round() as usize;
    let mut traces = Vec::with_capacity(cfg.n_devices);
    for d in 0..cfg.n_devices {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_TRACE ^ d as u64));
        let mut target = (rng.gen_range(0..roads.nx), rng.gen_range(0..roads.ny));
        let mut pos = roads.node(target.0, target.1);
        let mut legs: Vec<RelativePos> = Vec::new();
        let new_route = |rng: &mut ChaCha8Rng, from: (usize, usize)| {
            let to = loop {
                let cand = (rng.gen_range(0..roads.nx), rng.gen_range(0..roads.ny));
                if cand != from {
                    break cand;
                }
            };
            let corner = RelativePos::new(to.0 as f64 * roads.spacing_m, from.1 as f64 * roads.spacing_m);
            let end = roads.node(to.0, to.1);
            (to, vec![corner, end])
        };
        let mut points = Vec::with_capacity(n_steps + 1);
        points.push((0.0, pos));
        for k in 1..=n_steps {
            // Each step covers exactly speed x dt meters of path; route
            // changes mid-step keep consuming the same distance budget.
            let speed = 1.0 + rng.gen::<f64>();
            let mut remaining = speed * dt;
            while remaining > 0.0 {
                if legs.is_empty() {
                    let (to, route) = new_route(&mut rng, target);
                    target = to;
                    legs = route;
                }
                let next = legs[0];
                let d = (next.x - pos.x).abs() + (next.y - pos.y).abs();
                if d <= remaining {
                    pos = next;
                    legs.remove(0);
                    remaining -= d;
                } else {
                    let f = remaining / d;
                    pos = RelativePos::new(pos.x + (next.x - pos.x) * f, pos.y + (next.y - pos.y) * f);
                    remaining = 0.0;
                }
            }
            points.push((k as f64 * dt, pos));
        }
        traces.push(Trajectory { device_id: format!("dev-{d:03}"), points });
    }
    traces
}

fn entry_for(id: Option<BaseStationId>, rssi: f64) -> NeighborEntry {
    let asu = ((rssi + 113.0) / 2.0).round() as i32;
    NeighborEntry { station: id, rssi, asu, signal_level: (asu / 7).min(4) as u8 }
}

/// Turns traces into labeled MR samples under the path-loss model, then
/// applies the label-scarcity plan per serving domain.
pub fn emit_mr(world: &World, traces: &[Trajectory<RelativePos>]) -> Result<Vec<MrSample>> {
    let cfg = &world.config;
    let stations = world.stations_local();
    let mut samples = Vec::new();
    for (d, trace) in traces.iter().enumerate() {
        let mut noise =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_NOISE ^ d as u64));
        for &(t, pos) in &trace.points {
            let mut heard: Vec<(BaseStationId, f64)> = Vec::new();
            for &(id, st_pos) in &stations {
                // Every station draws shadowing noise so the stream does not
                // shift when coverage changes.
                let z: f64 = StandardNormal.sample(&mut noise);
                let dist = pos.dist(st_pos).max(1.0);
                let raw = cfg.p0_dbm - 10.0 * cfg.eta * dist.log10() + cfg.sigma_db * z;
                if raw >= RSSI_FLOOR {
                    heard.push((id, raw.min(RSSI_CEIL)));
                }
            }
            if heard.is_empty() {
                return Err(TlocError::Degenerate(format!(
                    "no station in range of device {} at t={t}",
                    trace.device_id
                )));
            }
            heard.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            heard.truncate(MAX_NEIGHBORS);
            let entries: Vec<NeighborEntry> = heard
                .iter()
                .enumerate()
                .map(|(slot, &(id, rssi))| {
                    let keep_id = cfg.network == NetworkKind::TwoG || slot == 0;
                    entry_for(keep_id.then_some(id), rssi)
                })
                .collect();
            samples.push(MrSample {
                timestamp: t,
                device_id: trace.device_id.clone(),
                entries,
                label: Some(quantize_geo(local_to_geo(cfg.origin, pos))),
            });
        }
    }
    apply_scarcity(&mut samples, &cfg.scarcity, cfg.seed);
    Ok(samples)
}

/// Keeps exactly round(fraction x labeled) labels per serving domain,
/// chosen by a seeded draw; the rest become unlabeled.
fn apply_scarcity(samples: &mut [MrSample], plan: &ScarcityPlan, seed: u64) {
    let mut by_domain: BTreeMap<BaseStationId, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        if let Some(serving) = s.serving() {
            if s.is_labeled() {
                by_domain.entry(serving).or_default().push(i);
            }
        }
    }
    for (serving, idxs) in by_domain {
        let f = plan.fraction_for(serving);
        let keep = (f * idxs.len() as f64).round() as usize;
        if keep >= idxs.len() {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            seed,
            STREAM_SCARCITY ^ station_stream(serving),
        ));
        let mut kept = rand::seq::index::sample(&mut rng, idxs.len(), keep).into_vec();
        kept.sort_unstable();
        let kept: std::collections::BTreeSet<usize> = kept.into_iter().collect();
        for (j, &i) in idxs.iter().enumerate() {
            if !kept.contains(&j) {
                samples[i].label = None;
            }
        }
    }
}

/// Generates, walks and emits in one call.
pub fn synthesize(config: &WorldConfig) -> Result<(Vec<MrSample>, StationRegistry)> {
    let world = generate_world(config)?;
    let traces = simulate_traces(&world);
    let samples = emit_mr(&world, &traces)?;
    Ok((samples, world.registry))
}

/// How twin domains are planted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwinSpec {
    /// How many of the most-labeled domains to copy.
    pub n_twins: usize,
    /// Eastward displacement of each copy, in meters.
    pub offset_east_m: f64,
    /// Labels kept per twin (the copies play the label-scarce side).
    pub max_labels: usize,
    /// Added to the rnc of every station id inside a copy.
    pub rnc_shift: u32,
}

impl Default for TwinSpec {
    fn default() -> Self {
        TwinSpec { n_twins: 3, offset_east_m: 5000.0, max_labels: 50, rnc_shift: 900 }
    }
}

/// Clones the most-labeled domains to a translated position under fresh
/// station ids. The copy keeps every sample and every neighbor relation,
/// so its relative-space encoding reproduces the original's exactly; only
/// its label count is cut down. Returns the combined dataset and the
/// registry extended with the translated station copies.
pub fn plant_twin_domains(
    samples: &[MrSample],
    registry: &StationRegistry,
    spec: &TwinSpec,
    seed: u64,
) -> Result<(Vec<MrSample>, StationRegistry)> {
    let dlon = exact_lon_offset(
        registry.values().next().map(|s| s.pos.lat).unwrap_or(0.0),
        spec.offset_east_m,
    );
    let mut labeled: BTreeMap<BaseStationId, usize> = BTreeMap::new();
    for s in samples {
        if let (Some(id), true) = (s.serving(), s.is_labeled()) {
            *labeled.entry(id).or_default() += 1;
        }
    }
    let mut ranked: Vec<(BaseStationId, usize)> = labeled.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    if ranked.len() < spec.n_twins {
        return Err(TlocError::Degenerate(format!(
            "asked for {} twins but only {} domains carry labels",
            spec.n_twins,
            ranked.len()
        )));
    }

    let remap = |id: BaseStationId| BaseStationId::new(id.rnc + spec.rnc_shift, id.cell);
    let translate = |p: GeoPoint| GeoPoint::new(p.lon + dlon, p.lat);
    let mut out = samples.to_vec();
    let mut reg = registry.clone();
    for (t, &(source, _)) in ranked.iter().take(spec.n_twins).enumerate() {
        let mut clones: Vec<MrSample> = Vec::new();
        for s in samples.iter().filter(|s| s.serving() == Some(source)) {
            let mut c = s.clone();
            c.device_id = format!("tw{t}-{}", s.device_id);
            c.label = s.label.map(translate);
            for e in &mut c.entries {
                e.station = e.station.map(remap);
            }
            clones.push(c);
        }
        for s in &clones {
            for e in &s.entries {
                let Some(new_id) = e.station else { continue };
                let old = BaseStationId::new(new_id.rnc - spec.rnc_shift, new_id.cell);
                let Some(rec) = registry.get(&old) else { continue };
                if registry.contains_key(&new_id) {
                    return Err(TlocError::DuplicateStation { id: new_id });
                }
                let moved = StationRecord { id: new_id, pos: translate(rec.pos) };
                if let Some(prev) = reg.insert(new_id, moved) {
                    if prev != moved {
                        return Err(TlocError::DuplicateStation { id: new_id });
                    }
                }
            }
        }
        // Scarcify the copy: it plays a freshly-deployed domain.
        let labeled_idx: Vec<usize> =
            (0..clones.len()).filter(|&i| clones[i].is_labeled()).collect();
        if labeled_idx.len() > spec.max_labels {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                seed,
                STREAM_TWIN ^ station_stream(source),
            ));
            let kept: std::collections::BTreeSet<usize> =
                rand::seq::index::sample(&mut rng, labeled_idx.len(), spec.max_labels)
                    .into_iter()
                    .collect();
            for (j, &i) in labeled_idx.iter().enumerate() {
                if !kept.contains(&j) {
                    clones[i].label = None;
                }
            }
        }
        out.extend(clones);
    }
    Ok((out, reg))
}

/// Shifts every label and station position by a constant geographic
/// offset. With offsets that are exact multiples of 2^-32 degree the lon
/// shift is exact; a lat shift additionally rescales the planar x axis
/// (its cosine factor), so exact-equality checks use lon-only offsets.
pub fn translate_dataset(
    samples: &[MrSample],
    registry: &StationRegistry,
    dlon_deg: f64,
    dlat_deg: f64,
) -> (Vec<MrSample>, StationRegistry) {
    let shift = |p: GeoPoint| GeoPoint::new(p.lon + dlon_deg, p.lat + dlat_deg);
    let samples = samples
        .iter()
        .map(|s| {
            let mut c = s.clone();
            c.label = s.label.map(shift);
            c
        })
        .collect();
    let registry = registry
        .values()
        .map(|st| (st.id, StationRecord { id: st.id, pos: shift(st.pos) }))
        .collect();
    (samples, registry)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::geo_to_local;
    use crate::mr::asu_check;

    fn small_config() -> WorldConfig {
        WorldConfig {
            seed: 42,
            extent_x_m: 1200.0,
            extent_y_m: 1200.0,
            n_stations: 9,
            road_spacing_m: 300.0,
            // Generous link budget: every street corner hears a station.
            p0_dbm: -25.0,
            eta: 2.5,
            sigma_db: 2.0,
            n_devices: 3,
            sample_rate_hz: 0.5,
            duration_s: 400.0,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let cases: Vec<Box<dyn Fn(&mut WorldConfig)>> = vec![
            Box::new(|c| c.eta = 1.9),
            Box::new(|c| c.eta = 5.1),
            Box::new(|c| c.sigma_db = -0.1),
            Box::new(|c| c.extent_x_m = 0.0),
            Box::new(|c| c.n_stations = 0),
            Box::new(|c| c.road_spacing_m = 3000.0),
            Box::new(|c| c.sample_rate_hz = 0.0),
            Box::new(|c| c.scarcity.default_keep = 1.5),
            Box::new(|c| {
                // Density guard: nine stations in four square meters.
                c.extent_x_m = 2.0;
                c.extent_y_m = 2.0;
                c.road_spacing_m = 1.0;
            }),
        ];
        for mutate in cases {
            let mut cfg = small_config();
            mutate(&mut cfg);
            assert!(matches!(generate_world(&cfg), Err(TlocError::InvalidConfig(_))));
        }
    }

    #[test]
    fn worlds_and_datasets_are_deterministic_per_seed() {
        let cfg = small_config();
        let (a_samples, a_reg) = synthesize(&cfg).unwrap();
        let (b_samples, b_reg) = synthesize(&cfg).unwrap();
        assert_eq!(a_samples, b_samples);
        assert_eq!(a_reg, b_reg);
        let other = WorldConfig { seed: 43, ..cfg };
        let (c_samples, _) = synthesize(&other).unwrap();
        assert_ne!(a_samples, c_samples, "different seeds must differ");
    }

    #[test]
    fn single_station_world_is_placed_inside_the_extent() {
        let cfg = WorldConfig { n_stations: 1, ..small_config() };
        let world = generate_world(&cfg).unwrap();
        assert_eq!(world.registry.len(), 1);
        let st = world.registry.values().next().unwrap();
        let local = geo_to_local(cfg.origin, st.pos);
        assert!(local.x >= 0.0 && local.x <= cfg.extent_x_m + 1e-6);
        assert!(local.y >= 0.0 && local.y <= cfg.extent_y_m + 1e-6);
    }

    #[test]
    fn mean_nearest_spacing_tracks_the_density_estimate() {
        // Monte-Carlo over seeds against the uniform-density expectation
        // 0.5 / sqrt(lambda).
        let mut mean_nn = 0.0;
        let runs = 30;
        for seed in 0..runs {
            let cfg = WorldConfig {
                seed,
                n_stations: 64,
                extent_x_m: 1600.0,
                extent_y_m: 1600.0,
                ..small_config()
            };
            let world = generate_world(&cfg).unwrap();
            let pts: Vec<RelativePos> = world
                .registry
                .values()
                .map(|s| geo_to_local(cfg.origin, s.pos))
                .collect();
            let mut sum = 0.0;
            for (i, a) in pts.iter().enumerate() {
                let nn = pts
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, b)| a.dist(*b))
                    .fold(f64::INFINITY, f64::min);
                sum += nn;
            }
            mean_nn += sum / pts.len() as f64;
        }
        mean_nn /= runs as f64;
        let lambda = 64.0 / (1600.0_f64 * 1600.0);
        let expect = 0.5 / lambda.sqrt();
        assert!(
            (mean_nn - expect).abs() <= 0.2 * expect,
            "mean nearest spacing {mean_nn:.1} vs expectation {expect:.1}"
        );
    }

    #[test]
    fn traces_stay_on_streets_at_configured_speeds() {
        let cfg = small_config();
        let world = generate_world(&cfg).unwrap();
        let traces = simulate_traces(&world);
        assert_eq!(traces.len(), cfg.n_devices);
        let dt = 1.0 / cfg.sample_rate_hz;
        let s = cfg.road_spacing_m;
        let on_street = |v: f64| (v / s - (v / s).round()).abs() * s < 1e-6;
        let mut slow_steps = 0;
        let mut steps = 0;
        for trace in &traces {
            assert_eq!(trace.points.len(), (cfg.duration_s * cfg.sample_rate_hz) as usize + 1);
            for w in trace.points.windows(2) {
                let (t0, p0) = w[0];
                let (t1, p1) = w[1];
                assert!((t1 - t0 - dt).abs() < 1e-9);
                assert!(on_street(p0.x) || on_street(p0.y), "{p0:?} is off-street");
                let l1 = (p1.x - p0.x).abs() + (p1.y - p0.y).abs();
                assert!(l1 <= 2.0 * dt * (1.0 + 1e-9), "step too fast: {l1}");
                // Path length per step is speed x dt exactly; the L1 proxy
                // only under-reads when a step spans two turns.
                if l1 < 1.0 * dt * (1.0 - 1e-9) {
                    slow_steps += 1;
                }
                steps += 1;
            }
        }
        assert!(
            (slow_steps as f64) < 0.02 * steps as f64,
            "{slow_steps}/{steps} steps under the speed floor"
        );
    }

    #[test]
    fn trace_length_matches_time_at_mean_speed() {
        let cfg = WorldConfig {
            duration_s: 6000.0,
            sample_rate_hz: 1.0,
            n_devices: 4,
            ..small_config()
        };
        let world = generate_world(&cfg).unwrap();
        for trace in simulate_traces(&world) {
            let length: f64 = trace
                .points
                .windows(2)
                .map(|w| (w[1].1.x - w[0].1.x).abs() + (w[1].1.y - w[0].1.y).abs())
                .sum();
            let expect = cfg.duration_s * 1.5;
            assert!(
                (length - expect).abs() <= 0.05 * expect,
                "trace length {length:.0} m vs {expect:.0} m"
            );
        }
    }

    #[test]
    fn noiseless_rssi_follows_distance_and_passes_asu_check() {
        let cfg = WorldConfig { sigma_db: 0.0, ..small_config() };
        let world = generate_world(&cfg).unwrap();
        let stations = world.stations_local();
        let traces = simulate_traces(&world);
        let samples = emit_mr(&world, &traces).unwrap();
        assert!(!samples.is_empty());
        let mut point_iter = traces.iter().flat_map(|t| t.points.iter());
        for s in &samples {
            let (_, pos) = point_iter.next().unwrap();
            // Strongest entry is the nearest station under pure path loss.
            let nearest = stations
                .iter()
                .min_by(|a, b| pos.dist(a.1).total_cmp(&pos.dist(b.1)))
                .unwrap()
                .0;
            assert_eq!(s.serving(), Some(nearest));
            for w in s.entries.windows(2) {
                assert!(w[0].rssi >= w[1].rssi, "entries must be sorted by rssi");
            }
            // Distance order equals rssi order for in-range stations.
            let dists: Vec<f64> = s
                .entries
                .iter()
                .map(|e| {
                    let st = e.station.unwrap();
                    pos.dist(stations.iter().find(|(id, _)| *id == st).unwrap().1)
                })
                .collect();
            for w in dists.windows(2) {
                assert!(w[0] <= w[1] + 1e-9, "closer stations must rank higher");
            }
            assert!(asu_check(s).is_empty());
            for e in &s.entries {
                assert!((-113.0..=-43.0).contains(&e.rssi));
                assert_eq!(e.asu, ((e.rssi + 113.0) / 2.0).round() as i32);
                assert_eq!(e.signal_level, ((e.asu / 7).min(4)) as u8);
            }
            let label = s.label.unwrap();
            assert_eq!((label.lon * TWO_POW_32).fract(), 0.0, "labels are quantized");
            assert_eq!((label.lat * TWO_POW_32).fract(), 0.0);
        }
    }

    #[test]
    fn four_g_mode_blanks_neighbor_ids() {
        let cfg = WorldConfig { network: NetworkKind::FourG, ..small_config() };
        let world = generate_world(&cfg).unwrap();
        let samples = emit_mr(&world, &simulate_traces(&world)).unwrap();
        let mut saw_neighbor = false;
        for s in &samples {
            assert!(s.entries[0].station.is_some(), "serving id must survive");
            for e in &s.entries[1..] {
                assert!(e.station.is_none());
                saw_neighbor = true;
            }
        }
        assert!(saw_neighbor, "scenario must exercise neighbor slots");
    }

    #[test]
    fn out_of_range_world_is_an_error() {
        let cfg = WorldConfig { p0_dbm: -200.0, sigma_db: 0.0, ..small_config() };
        let world = generate_world(&cfg).unwrap();
        let err = emit_mr(&world, &simulate_traces(&world));
        assert!(matches!(err, Err(TlocError::Degenerate(_))));
    }

    #[test]
    fn scarcity_keeps_exactly_the_rounded_count() {
        let mut cfg = small_config();
        cfg.scarcity.default_keep = 0.4;
        let (samples, _) = synthesize(&cfg).unwrap();
        let full = synthesize(&small_config()).unwrap().0;
        let mut by_domain: BTreeMap<BaseStationId, (usize, usize)> = BTreeMap::new();
        for (s, f) in samples.iter().zip(&full) {
            let slot = by_domain.entry(s.serving().unwrap()).or_default();
            slot.1 += usize::from(f.is_labeled());
            slot.0 += usize::from(s.is_labeled());
        }
        for (id, (kept, total)) in by_domain {
            assert!(total > 0);
            assert_eq!(kept, (0.4 * total as f64).round() as usize, "domain {id}");
        }
    }

    #[test]
    fn twins_are_congruent_translated_copies() {
        let cfg = small_config();
        let (samples, registry) = synthesize(&cfg).unwrap();
        let spec = TwinSpec { n_twins: 2, max_labels: 10, ..TwinSpec::default() };
        let (with_twins, reg2) = plant_twin_domains(&samples, &registry, &spec, 7).unwrap();
        assert!(with_twins.len() > samples.len());
        assert!(reg2.len() > registry.len());

        let dlon = exact_lon_offset(registry.values().next().unwrap().pos.lat, 5000.0);
        let twins: Vec<&MrSample> =
            with_twins.iter().filter(|s| s.device_id.starts_with("tw0-")).collect();
        assert!(!twins.is_empty());
        let source_id = BaseStationId::new(
            twins[0].serving().unwrap().rnc - spec.rnc_shift,
            twins[0].serving().unwrap().cell,
        );
        let originals: Vec<&MrSample> =
            samples.iter().filter(|s| s.serving() == Some(source_id)).collect();
        assert_eq!(twins.len(), originals.len());
        let labeled = twins.iter().filter(|s| s.is_labeled()).count();
        assert!(labeled <= spec.max_labels);
        for (tw, orig) in twins.iter().zip(&originals) {
            assert_eq!(tw.timestamp, orig.timestamp);
            if let (Some(a), Some(b)) = (tw.label, orig.label) {
                assert_eq!(a.lon, b.lon + dlon, "lon shift must be exact");
                assert_eq!(a.lat, b.lat);
            }
            for (ea, eb) in tw.entries.iter().zip(&orig.entries) {
                assert_eq!(ea.rssi, eb.rssi);
                assert_eq!(
                    ea.station,
                    eb.station.map(|i| BaseStationId::new(i.rnc + spec.rnc_shift, i.cell))
                );
            }
        }
        // Station copies moved by the same exact offset.
        for st in reg2.values().filter(|s| s.id.rnc >= 1000) {
            let old = BaseStationId::new(st.id.rnc - spec.rnc_shift, st.id.cell);
            let orig = registry[&old];
            assert_eq!(st.pos.lon, orig.pos.lon + dlon);
            assert_eq!(st.pos.lat, orig.pos.lat);
        }

        // Planting onto the combined set reuses the same top domains and
        // collides with the existing copies.
        let again = plant_twin_domains(&with_twins, &reg2, &spec, 7);
        assert!(matches!(again, Err(TlocError::DuplicateStation { .. })));
    }

    #[test]
    fn translate_dataset_shifts_labels_and_stations_exactly() {
        let cfg = small_config();
        let (samples, registry) = synthesize(&cfg).unwrap();
        let dlon = exact_lon_offset(cfg.origin.lat, 3000.0);
        let (moved, reg2) = translate_dataset(&samples, &registry, dlon, 0.0);
        for (a, b) in samples.iter().zip(&moved) {
            assert_eq!(a.entries, b.entries);
            match (a.label, b.label) {
                (Some(x), Some(y)) => {
                    assert_eq!(y.lon, x.lon + dlon);
                    assert_eq!(y.lat, x.lat);
                }
                (None, None) => {}
                _ => panic!("label presence must be preserved"),
            }
        }
        for (a, b) in registry.values().zip(reg2.values()) {
            assert_eq!(b.pos.lon, a.pos.lon + dlon);
        }
    }
}
