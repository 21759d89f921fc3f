//! Measurement-report (MR) records: parsing, validation, serialization and
//! trajectory segmentation.
//!
//! An MR row carries up to [`MAX_NEIGHBORS`] station slots. On parse the
//! slots are re-sorted by descending RSSI (stable, so equal readings keep
//! file order); slot 1 of the sorted record is the serving station and must
//! carry a station id. Files are strict CSV with the fixed header in
//! [`MR_HEADER`]; the first malformed row aborts the parse with its 1-based
//! line number.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::TlocError;
use crate::geo::GeoPoint;
use crate::Result;

/// Maximum station slots per MR record.
pub const MAX_NEIGHBORS: usize = 7;

/// Fixed MR CSV header: two id columns, five fields per slot, label columns.
pub const MR_HEADER: [&str; 39] = [
    "timestamp", "device_id", "rnc1", "cell1", "rssi1", "asu1", "sig1", "rnc2", "cell2", "rssi2",
    "asu2", "sig2", "rnc3", "cell3", "rssi3", "asu3", "sig3", "rnc4", "cell4", "rssi4", "asu4",
    "sig4", "rnc5", "cell5", "rssi5", "asu5", "sig5", "rnc6", "cell6", "rssi6", "asu6", "sig6",
    "rnc7", "cell7", "rssi7", "asu7", "sig7", "lon", "lat",
];

/// Station CSV header.
pub const STATION_HEADER: [&str; 4] = ["rnc", "cell", "lon", "lat"];

/// A base station, identified by controller and cell ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BaseStationId {
    pub rnc: u32,
    pub cell: u32,
}

impl BaseStationId {
    pub fn new(rnc: u32, cell: u32) -> Self {
        BaseStationId { rnc, cell }
    }
}

impl fmt::Display for BaseStationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.rnc, self.cell)
    }
}

impl FromStr for BaseStationId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (rnc, cell) = s
            .split_once(':')
            .ok_or_else(|| format!("expected rnc:cell, got {s:?}"))?;
        let rnc = rnc.parse().map_err(|_| format!("bad rnc in {s:?}"))?;
        let cell = cell.parse().map_err(|_| format!("bad cell in {s:?}"))?;
        Ok(BaseStationId { rnc, cell })
    }
}

/// A surveyed station with its geographic position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationRecord {
    pub id: BaseStationId,
    pub pos: GeoPoint,
}

/// All known stations, keyed (and iterated) by id.
pub type StationRegistry = BTreeMap<BaseStationId, StationRecord>;

/// One station slot of an MR record.
///
/// `station` is `None` when the frontend reports signal readings without the
/// station identity (the 4G neighbor case).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborEntry {
    pub station: Option<BaseStationId>,
    pub rssi: f64,
    pub asu: i32,
    pub signal_level: u8,
}

/// A measurement report; `label` is the surveyed position when known.
#[derive(Debug, Clone, PartialEq)]
pub struct MrSample {
    pub timestamp: f64,
    pub device_id: String,
    /// 1..=7 entries, sorted by descending RSSI; entry 0 is the serving station.
    pub entries: Vec<NeighborEntry>,
    pub label: Option<GeoPoint>,
}

impl MrSample {
    /// The serving station id, when the strongest entry carries one.
    pub fn serving(&self) -> Option<BaseStationId> {
        self.entries.first().and_then(|e| e.station)
    }

    pub fn is_labeled(&self) -> bool {
        self.label.is_some()
    }
}

/// A time-ordered run of labeled positions from a single device.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<P> {
    pub device_id: String,
    pub points: Vec<(f64, P)>,
}

fn parse_field<T: FromStr>(path: &Path, line: u64, name: &str, raw: &str) -> Result<T> {
    raw.parse::<T>()
        .map_err(|_| TlocError::parse(path, line, format!("field {name}: cannot parse {raw:?}")))
}

fn record_line(rec: &csv::StringRecord) -> u64 {
    rec.position().map(|p| p.line()).unwrap_or(0)
}

fn check_header(path: &Path, got: &csv::StringRecord, want: &[&str]) -> Result<()> {
    let got_fields: Vec<&str> = got.iter().collect();
    if got_fields != want {
        return Err(TlocError::parse(
            path,
            1,
            format!("unexpected header {:?}, want {:?}", got_fields.join(","), want.join(",")),
        ));
    }
    Ok(())
}

/// Reads an MR CSV file. Strict: the header must match [`MR_HEADER`] and the
/// first malformed row fails the whole parse with its line number.
pub fn parse_mr_csv(path: impl AsRef<Path>) -> Result<Vec<MrSample>> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    check_header(path, rdr.headers().map_err(|e| csv_error(path, e))?, &MR_HEADER)?;

    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = record_line(&rec);
        if rec.len() != MR_HEADER.len() {
            return Err(TlocError::parse(
                path,
                line,
                format!("expected {} fields, got {}", MR_HEADER.len(), rec.len()),
            ));
        }
        out.push(parse_mr_record(path, line, &rec)?);
    }
    Ok(out)
}

fn csv_error(path: &Path, e: csv::Error) -> TlocError {
    match e.kind() {
        csv::ErrorKind::Io(_) => {
            if let csv::ErrorKind::Io(io) = e.into_kind() {
                TlocError::io(path, io)
            } else {
                unreachable!()
            }
        }
        _ => {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            TlocError::parse(path, line, format!("{e}"))
        }
    }
}

fn parse_mr_record(path: &Path, line: u64, rec: &csv::StringRecord) -> Result<MrSample> {
    let timestamp: f64 = parse_field(path, line, "timestamp", &rec[0])?;
    let device_id = rec[1].to_string();

    let mut entries = Vec::new();
    for slot in 0..MAX_NEIGHBORS {
        let base = 2 + slot * 5;
        let (rnc, cell, rssi, asu, sig) =
            (&rec[base], &rec[base + 1], &rec[base + 2], &rec[base + 3], &rec[base + 4]);
        if rssi.is_empty() {
            if !rnc.is_empty() || !cell.is_empty() || !asu.is_empty() || !sig.is_empty() {
                return Err(TlocError::parse(
                    path,
                    line,
                    format!("slot {} has fields but no rssi", slot + 1),
                ));
            }
            continue;
        }
        let station = match (rnc.is_empty(), cell.is_empty()) {
            (true, true) => None,
            (false, false) => Some(BaseStationId::new(
                parse_field(path, line, "rnc", rnc)?,
                parse_field(path, line, "cell", cell)?,
            )),
            _ => {
                return Err(TlocError::parse(
                    path,
                    line,
                    format!("slot {} has half a station id", slot + 1),
                ))
            }
        };
        let rssi: f64 = parse_field(path, line, "rssi", rssi)?;
        let asu: i32 = parse_field(path, line, "asu", asu)?;
        if asu < 0 {
            return Err(TlocError::parse(path, line, format!("negative asu {asu}")));
        }
        let sig: u8 = parse_field(path, line, "sig", sig)?;
        if sig > 4 {
            return Err(TlocError::parse(path, line, format!("signal level {sig} out of [0,4]")));
        }
        entries.push(NeighborEntry { station, rssi, asu, signal_level: sig });
    }
    if entries.is_empty() {
        return Err(TlocError::parse(path, line, "no signal entries"));
    }
    // Stable: equal RSSI keeps file order.
    entries.sort_by(|a, b| b.rssi.total_cmp(&a.rssi));
    if entries[0].station.is_none() {
        return Err(TlocError::parse(path, line, "serving station id missing"));
    }

    let label = match (rec[37].is_empty(), rec[38].is_empty()) {
        (true, true) => None,
        (false, false) => Some(GeoPoint::new(
            parse_field(path, line, "lon", &rec[37])?,
            parse_field(path, line, "lat", &rec[38])?,
        )),
        _ => return Err(TlocError::parse(path, line, "label has lon or lat but not both")),
    };

    Ok(MrSample { timestamp, device_id, entries, label })
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Writes samples back to the canonical MR CSV layout. Parsing the result
/// reproduces the samples field for field.
pub fn write_mr_csv(path: impl AsRef<Path>, samples: &[MrSample]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(MR_HEADER).map_err(|e| csv_error(path, e))?;
    let mut fields: Vec<String> = Vec::with_capacity(MR_HEADER.len());
    for s in samples {
        fields.clear();
        fields.push(fmt_f64(s.timestamp));
        fields.push(s.device_id.clone());
        for slot in 0..MAX_NEIGHBORS {
            match s.entries.get(slot) {
                Some(e) => {
                    match e.station {
                        Some(id) => {
                            fields.push(id.rnc.to_string());
                            fields.push(id.cell.to_string());
                        }
                        None => {
                            fields.push(String::new());
                            fields.push(String::new());
                        }
                    }
                    fields.push(fmt_f64(e.rssi));
                    fields.push(e.asu.to_string());
                    fields.push(e.signal_level.to_string());
                }
                None => fields.extend(std::iter::repeat_with(String::new).take(5)),
            }
        }
        match s.label {
            Some(p) => {
                fields.push(fmt_f64(p.lon));
                fields.push(fmt_f64(p.lat));
            }
            None => {
                fields.push(String::new());
                fields.push(String::new());
            }
        }
        w.write_record(&fields).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| TlocError::io(path, e))?;
    Ok(())
}

/// Reads a station survey file (`rnc,cell,lon,lat`), validating uniqueness
/// and coordinate ranges.
pub fn parse_station_csv(path: impl AsRef<Path>) -> Result<StationRegistry> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    check_header(path, rdr.headers().map_err(|e| csv_error(path, e))?, &STATION_HEADER)?;

    let mut reg = StationRegistry::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = record_line(&rec);
        if rec.len() != STATION_HEADER.len() {
            return Err(TlocError::parse(
                path,
                line,
                format!("expected {} fields, got {}", STATION_HEADER.len(), rec.len()),
            ));
        }
        let id = BaseStationId::new(
            parse_field(path, line, "rnc", &rec[0])?,
            parse_field(path, line, "cell", &rec[1])?,
        );
        let lon: f64 = parse_field(path, line, "lon", &rec[2])?;
        let lat: f64 = parse_field(path, line, "lat", &rec[3])?;
        if !(-180.0..=180.0).contains(&lon) || !(-90.0..=90.0).contains(&lat) {
            return Err(TlocError::parse(path, line, format!("coordinate out of range ({lon}, {lat})")));
        }
        if reg.insert(id, StationRecord { id, pos: GeoPoint::new(lon, lat) }).is_some() {
            return Err(TlocError::DuplicateStation { id });
        }
    }
    Ok(reg)
}

/// Writes a station registry in the canonical survey layout.
pub fn write_station_csv(path: impl AsRef<Path>, reg: &StationRegistry) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(STATION_HEADER).map_err(|e| csv_error(path, e))?;
    for rec in reg.values() {
        w.write_record([
            rec.id.rnc.to_string(),
            rec.id.cell.to_string(),
            fmt_f64(rec.pos.lon),
            fmt_f64(rec.pos.lat),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| TlocError::io(path, e))?;
    Ok(())
}

/// Returns the indices of entries whose ASU disagrees with the 2G identity
/// asu = (rssi + 113) / 2 by more than rounding allows (0.5).
pub fn asu_check(sample: &MrSample) -> Vec<usize> {
    sample
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| (e.asu as f64 - (e.rssi + 113.0) / 2.0).abs() > 0.5)
        .map(|(i, _)| i)
        .collect()
}

/// Groups labeled points by device, orders them by time and splits runs at
/// gaps exceeding `gap_s`. Shared by the geographic and the relative-space
/// segmentations.
pub(crate) fn segment_points<P: Copy>(
    mut per_device: BTreeMap<String, Vec<(f64, P)>>,
    gap_s: f64,
) -> Vec<Trajectory<P>> {
    let mut out = Vec::new();
    for (device_id, pts) in per_device.iter_mut() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut cur: Vec<(f64, P)> = Vec::new();
        for &pt in pts.iter() {
            if let Some(&(prev_t, _)) = cur.last() {
                if pt.0 - prev_t > gap_s {
                    out.push(Trajectory { device_id: device_id.clone(), points: std::mem::take(&mut cur) });
                }
            }
            cur.push(pt);
        }
        if !cur.is_empty() {
            out.push(Trajectory { device_id: device_id.clone(), points: cur });
        }
    }
    out
}

/// Splits each device's labeled samples into trajectories wherever
/// consecutive timestamps are more than `gap_s` apart. Singleton
/// trajectories are kept.
pub fn segment_trajectories(samples: &[MrSample], gap_s: f64) -> Vec<Trajectory<GeoPoint>> {
    let mut per: BTreeMap<String, Vec<(f64, GeoPoint)>> = BTreeMap::new();
    for s in samples {
        if let Some(label) = s.label {
            per.entry(s.device_id.clone()).or_default().push((s.timestamp, label));
        }
    }
    segment_points(per, gap_s)
}
