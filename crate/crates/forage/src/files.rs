//! Flat-file output (and re-input) for every pipeline stage, plus the
//! per-stage run manifest.
//!
//! Floats are written in shortest round-trip form (ryu, the same formatter
//! serde_json uses), so reading a value back yields the identical f64 bits
//! and re-running a stage from files equals running it in memory. Optional
//! numeric fields serialize as the empty string.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::geo::{LatLon, LocalFrame};
use crate::home::{HomeLocation, HomeMethod};
use crate::ingest::{DeviceTrack, RawEdge, TrackPing, Tract};
use crate::metrics::{slot_label, slot_of_label, MetricsRecord};
use crate::outlets::{Category, FoodOutlet, FoodVisit, HomeBased, ALL_CATEGORIES};
use crate::stays::StayPoint;
use crate::synth::{DeviceTruth, SynthPing, SynthWorld};
use crate::{config::StudyConfig, Error, Result};

pub fn fmt_f64(v: f64) -> String {
    let mut buf = ryu::Buffer::new();
    buf.format(v).to_string()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn parse_opt(path: &Path, row: usize, field: &str, raw: &str) -> Result<Option<f64>> {
    if raw.is_empty() {
        return Ok(None);
    }
    raw.parse()
        .map(Some)
        .map_err(|_| Error::input(path, format!("row {row}: bad {field} `{raw}`")))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<BufReader<File>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Reader::from_reader(BufReader::with_capacity(1 << 20, file)))
}

fn flush(mut w: csv::Writer<BufWriter<File>>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// Serialize any report as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|e| Error::Json { path: path.into(), source: e })?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::Json { path: path.into(), source: e })
}

// ---------------------------------------------------------------------------
// Synthetic world → the exact formats ingest reads.

/// Raw ping stream: the vendor-feed format (accuracy column included).
pub fn write_pings_csv(path: &Path, world: &SynthWorld) -> Result<u64> {
    let mut w = csv_writer(path)?;
    w.write_record(["device_id", "lat", "lon", "ts", "accuracy"])
        .map_err(|e| Error::Csv { path: path.into(), source: e })?;
    let mut n = 0u64;
    let mut ts_buf = itoa::Buffer::new();
    for (truth, pings) in world.truth.iter().zip(&world.pings) {
        for p in pings {
            write_ping_row(&mut w, path, &truth.device_id, p, &mut ts_buf)?;
            n += 1;
        }
    }
    flush(w, path)?;
    Ok(n)
}

fn write_ping_row(
    w: &mut csv::Writer<BufWriter<File>>,
    path: &Path,
    device_id: &str,
    p: &SynthPing,
    ts_buf: &mut itoa::Buffer,
) -> Result<()> {
    w.write_record([
        device_id,
        &fmt_f64(p.pos.lat),
        &fmt_f64(p.pos.lon),
        ts_buf.format(p.ts),
        if p.high_accuracy { "High" } else { "Other" },
    ])
    .map_err(|e| Error::Csv { path: path.into(), source: e })
}

pub fn write_outlets_csv(path: &Path, outlets: &[FoodOutlet]) -> Result<u64> {
    let mut w = csv_writer(path)?;
    w.write_record(["outlet_id", "name", "lat", "lon", "category_code", "primary_food"])
        .map_err(|e| Error::Csv { path: path.into(), source: e })?;
    let mut id_buf = itoa::Buffer::new();
    for o in outlets {
        w.write_record([
            id_buf.format(o.outlet_id),
            &o.name,
            &fmt_f64(o.pos.lat),
            &fmt_f64(o.pos.lon),
            o.category.code(),
            if o.primary_food { "1" } else { "0" },
        ])
        .map_err(|e| Error::Csv { path: path.into(), source: e })?;
    }
    flush(w, path)?;
    Ok(outlets.len() as u64)
}

pub fn write_nodes_csv(path: &Path, nodes: &[(u64, LatLon)]) -> Result<u64> {
    let mut w = csv_writer(path)?;
    w.write_record(["node_id", "lat", "lon"])
        .map_err(|e| Error::Csv { path: path.into(), source: e })?;
    let mut id_buf = itoa::Buffer::new();
    for (id, pos) in nodes {
        w.write_record([id_buf.format(*id), &fmt_f64(pos.lat), &fmt_f64(pos.lon)])
            .map_err(|e| Error::Csv { path: path.into(), source: e })?;
    }
    flush(w, path)?;
    Ok(nodes.len() as u64)
}

pub fn write_edges_csv(path: &Path, edges: &[RawEdge]) -> Result<u64> {
    let mut w = csv_writer(path)?;
    w.write_record(["from", "to", "length_m", "oneway"])
        .map_err(|e| Error::Csv { path: path.into(), source: e })?;
    let mut buf = itoa::Buffer::new();
    for e in edges {
        let from = buf.format(e.from).to_string();
        w.write_record([
            from.as_str(),
            buf.format(e.to),
            &fmt_f64(e.length_m),
            if e.oneway { "1" } else { "0" },
        ])
        .map_err(|err| Error::Csv { path: path.into(), source: err })?;
    }
    flush(w, path)?;
    Ok(edges.len() as u64)
}

/// GeoJSON FeatureCollection with closed Polygon rings.
pub fn write_tracts_geojson(path: &Path, tracts: &[Tract]) -> Result<u64> {
    let features: Vec<serde_json::Value> = tracts
        .iter()
        .map(|t| {
            let mut ring: Vec<[f64; 2]> = t.ring.iter().map(|p| [p.lon, p.lat]).collect();
            if ring.first() != ring.last() {
                if let Some(first) = ring.first().copied() {
                    ring.push(first);
                }
            }
            serde_json::json!({
                "type": "Feature",
                "properties": { "tract_id": t.tract_id, "population": t.population },
                "geometry": { "type": "Polygon", "coordinates": [ring] },
            })
        })
        .collect();
    let fc = serde_json::json!({ "type": "FeatureCollection", "features": features });
    write_json(path, &fc)?;
    Ok(tracts.len() as u64)
}

pub fn write_truth_json(path: &Path, truth: &[DeviceTruth]) -> Result<u64> {
    write_json(path, &truth)?;
    Ok(truth.len() as u64)
}

pub fn read_truth_json(path: &Path) -> Result<Vec<DeviceTruth>> {
    read_json(path)
}

// ---------------------------------------------------------------------------
// Stage intermediates.

/// Filtered per-device tracks: already sorted, deduplicated, High-only.
pub fn write_clean_pings_csv(path: &Path, tracks: &[DeviceTrack]) -> Result<u64> {
    let mut w = csv_writer(path)?;
    w.write_record(["device_id", "lat", "lon", "ts"])
        .map_err(|e| Error::Csv { path: path.into(), source: e })?;
    let mut n = 0u64;
    let mut ts_buf = itoa::Buffer::new();
    for t in tracks {
        for p in &t.pings {
            w.write_record([
                t.device_id.as_str(),
                &fmt_f64(p.pos.lat),
                &fmt_f64(p.pos.lon),
                ts_buf.format(p.ts),
            ])
            .map_err(|e| Error::Csv { path: path.into(), source: e })?;
            n += 1;
        }
    }
    flush(w, path)?;
    Ok(n)
}

/// Read back tracks written by [`write_clean_pings_csv`]. Rows must arrive
/// grouped by device and strictly increasing in ts — anything else means the
/// file is not a clean-pings intermediate.
pub fn read_clean_pings_csv(path: &Path) -> Result<Vec<DeviceTrack>> {
    let mut reader = csv_reader(path)?;
    expect_headers(&mut reader, path, &["device_id", "lat", "lon", "ts"])?;
    let mut tracks: Vec<DeviceTrack> = Vec::new();
    let mut record = csv::StringRecord::new();
    let mut rownum = 1usize;
    loop {
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => return Err(Error::Csv { path: path.into(), source: e }),
        }
        rownum += 1;
        let bad = |what: String| Error::input(path, format!("row {rownum}: {what}"));
        let device = record.get(0).ok_or_else(|| bad("missing device_id".into()))?;
        let lat: f64 = parse_field(path, rownum, &record, 1, "lat")?;
        let lon: f64 = parse_field(path, rownum, &record, 2, "lon")?;
        let ts: i64 = parse_field(path, rownum, &record, 3, "ts")?;
        let ping = TrackPing { ts, pos: LatLon::new(lat, lon) };
        match tracks.last_mut() {
            Some(t) if t.device_id == device => {
                if t.pings.last().is_some_and(|prev| prev.ts >= ts) {
                    return Err(bad(format!("ts {ts} not strictly increasing")));
                }
                t.pings.push(ping);
            }
            _ => {
                if tracks.iter().any(|t| t.device_id == device) {
                    return Err(bad(format!("device {device} appears in two blocks")));
                }
                tracks.push(DeviceTrack { device_id: device.to_string(), pings: vec![ping] });
            }
        }
    }
    Ok(tracks)
}

pub fn write_homes_csv(path: &Path, homes: &[HomeLocation]) -> Result<u64> {
    let mut w = csv_writer(path)?;
    w.write_record(["device_id", "lat", "lon", "method", "support"])
        .map_err(|e| Error::Csv { path: path.into(), source: e })?;
    let mut buf = itoa::Buffer::new();
    for h in homes {
        w.write_record([
            h.device_id.as_str(),
            &fmt_f64(h.pos.lat),
            &fmt_f64(h.pos.lon),
            h.method.as_str(),
            buf.format(h.support),
        ])
        .map_err(|e| Error::Csv { path: path.into(), source: e })?;
    }
    flush(w, path)?;
    Ok(homes.len() as u64)
}

/// Read homes back; the grid cell is recomputed from the stored position
/// (a cell centroid always falls inside its own cell).
pub fn read_homes_csv(path: &Path, study: &StudyConfig) -> Result<Vec<HomeLocation>> {
    let frame = LocalFrame::new(study.bbox.southwest());
    let mut reader = csv_reader(path)?;
    expect_headers(&mut reader, path, &["device_id", "lat", "lon", "method", "support"])?;
    let mut homes = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let rownum = i + 2;
        let bad = |what: String| Error::input(path, format!("row {rownum}: {what}"));
        let row = row.map_err(|e| Error::Csv { path: path.into(), source: e })?;
        let device_id = row.get(0).ok_or_else(|| bad("missing device_id".into()))?.to_string();
        let lat: f64 = parse_field(path, rownum, &row, 1, "lat")?;
        let lon: f64 = parse_field(path, rownum, &row, 2, "lon")?;
        let method = row
            .get(3)
            .and_then(HomeMethod::parse)
            .ok_or_else(|| bad("bad method".into()))?;
        let support: u32 = parse_field(path, rownum, &row, 4, "support")?;
        let pos = LatLon::new(lat, lon);
        homes.push(HomeLocation {
            device_id,
            cell: frame.to_cell(pos, study.grid_cell_m),
            pos,
            method,
            support,
        });
    }
    Ok(homes)
}

pub fn write_stays_csv(path: &Path, stays: &[StayPoint]) -> Result<u64> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "stay_id",
        "device_id",
        "lat",
        "lon",
        "start_ts",
        "end_ts",
        "n_pings",
        "origin_stay_id",
    ])
    .map_err(|e| Error::Csv { path: path.into(), source: e })?;
    let mut buf = itoa::Buffer::new();
    for s in stays {
        let start = buf.format(s.start_ts).to_string();
        let end = buf.format(s.end_ts).to_string();
        w.write_record([
            s.stay_id.as_str(),
            s.device_id.as_str(),
            &fmt_f64(s.centroid.lat),
            &fmt_f64(s.centroid.lon),
            &start,
            &end,
            buf.format(s.n_pings),
            s.origin_stay_id.as_deref().unwrap_or(""),
        ])
        .map_err(|e| Error::Csv { path: path.into(), source: e })?;
    }
    flush(w, path)?;
    Ok(stays.len() as u64)
}

pub fn read_stays_csv(path: &Path) -> Result<Vec<StayPoint>> {
    let mut reader = csv_reader(path)?;
    expect_headers(
        &mut reader,
        path,
        &["stay_id", "device_id", "lat", "lon", "start_ts", "end_ts", "n_pings", "origin_stay_id"],
    )?;
    let mut stays = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let rownum = i + 2;
        let bad = |what: String| Error::input(path, format!("row {rownum}: {what}"));
        let row = row.map_err(|e| Error::Csv { path: path.into(), source: e })?;
        let get = |c: usize, what: &str| {
            row.get(c).ok_or_else(|| bad(format!("missing {what}"))).map(str::to_string)
        };
        let lat: f64 = parse_field(path, rownum, &row, 2, "lat")?;
        let lon: f64 = parse_field(path, rownum, &row, 3, "lon")?;
        let origin = get(7, "origin_stay_id")?;
        stays.push(StayPoint {
            stay_id: get(0, "stay_id")?,
            device_id: get(1, "device_id")?,
            centroid: LatLon::new(lat, lon),
            start_ts: parse_field(path, rownum, &row, 4, "start_ts")?,
            end_ts: parse_field(path, rownum, &row, 5, "end_ts")?,
            n_pings: parse_field(path, rownum, &row, 6, "n_pings")?,
            origin_stay_id: (!origin.is_empty()).then_some(origin),
        });
    }
    Ok(stays)
}

pub fn write_visits_csv(path: &Path, visits: &[FoodVisit]) -> Result<u64> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "visit_id",
        "device_id",
        "outlet_id",
        "stay_id",
        "start_ts",
        "end_ts",
        "distance_m",
        "home_based",
        "category",
        "primary_food",
    ])
    .map_err(|e| Error::Csv { path: path.into(), source: e })?;
    let mut buf = itoa::Buffer::new();
    for v in visits {
        let outlet = buf.format(v.outlet_id).to_string();
        let start = buf.format(v.start_ts).to_string();
        w.write_record([
            v.visit_id.as_str(),
            v.device_id.as_str(),
            &outlet,
            v.stay_id.as_str(),
            &start,
            buf.format(v.end_ts),
            &fmt_f64(v.distance_m),
            v.home_based.as_str(),
            v.category.code(),
            if v.primary_food { "1" } else { "0" },
        ])
        .map_err(|e| Error::Csv { path: path.into(), source: e })?;
    }
    flush(w, path)?;
    Ok(visits.len() as u64)
}

pub fn read_visits_csv(path: &Path) -> Result<Vec<FoodVisit>> {
    let mut reader = csv_reader(path)?;
    expect_headers(
        &mut reader,
        path,
        &[
            "visit_id",
            "device_id",
            "outlet_id",
            "stay_id",
            "start_ts",
            "end_ts",
            "distance_m",
            "home_based",
            "category",
            "primary_food",
        ],
    )?;
    let mut visits = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let rownum = i + 2;
        let bad = |what: String| Error::input(path, format!("row {rownum}: {what}"));
        let row = row.map_err(|e| Error::Csv { path: path.into(), source: e })?;
        let get = |c: usize, what: &str| {
            row.get(c).ok_or_else(|| bad(format!("missing {what}"))).map(str::to_string)
        };
        let home_based = row
            .get(7)
            .and_then(HomeBased::parse)
            .ok_or_else(|| bad("bad home_based".into()))?;
        let category = row
            .get(8)
            .and_then(Category::from_code)
            .ok_or_else(|| bad("bad category".into()))?;
        let primary_food = match row.get(9) {
            Some("1") => true,
            Some("0") => false,
            _ => return Err(bad("primary_food must be 0 or 1".into())),
        };
        visits.push(FoodVisit {
            visit_id: get(0, "visit_id")?,
            device_id: get(1, "device_id")?,
            outlet_id: parse_field(path, rownum, &row, 2, "outlet_id")?,
            stay_id: get(3, "stay_id")?,
            start_ts: parse_field(path, rownum, &row, 4, "start_ts")?,
            end_ts: parse_field(path, rownum, &row, 5, "end_ts")?,
            distance_m: parse_field(path, rownum, &row, 6, "distance_m")?,
            home_based,
            category,
            primary_food,
        });
    }
    Ok(visits)
}

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<u64> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "device_id",
        "category",
        "n_visits",
        "n_unique_stores",
        "mean_visited_euclid_m",
        "mean_visited_network_m",
        "nearest_store_euclid_m",
        "nearest_store_network_m",
        "home_based_share",
    ])
    .map_err(|e| Error::Csv { path: path.into(), source: e })?;
    let mut buf = itoa::Buffer::new();
    for r in records {
        let n_visits = buf.format(r.n_visits).to_string();
        w.write_record([
            r.device_id.as_str(),
            slot_label(r.slot()),
            &n_visits,
            buf.format(r.n_unique_stores),
            &fmt_opt(r.mean_visited_euclid_m),
            &fmt_opt(r.mean_visited_network_m),
            &fmt_opt(r.nearest_store_euclid_m),
            &fmt_opt(r.nearest_store_network_m),
            &fmt_opt(r.home_based_share),
        ])
        .map_err(|e| Error::Csv { path: path.into(), source: e })?;
    }
    flush(w, path)?;
    Ok(records.len() as u64)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut reader = csv_reader(path)?;
    expect_headers(
        &mut reader,
        path,
        &[
            "device_id",
            "category",
            "n_visits",
            "n_unique_stores",
            "mean_visited_euclid_m",
            "mean_visited_network_m",
            "nearest_store_euclid_m",
            "nearest_store_network_m",
            "home_based_share",
        ],
    )?;
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let rownum = i + 2;
        let bad = |what: String| Error::input(path, format!("row {rownum}: {what}"));
        let row = row.map_err(|e| Error::Csv { path: path.into(), source: e })?;
        let slot = row
            .get(1)
            .and_then(slot_of_label)
            .ok_or_else(|| bad("unknown category label".into()))?;
        let opt = |c: usize, what: &str| {
            parse_opt(path, rownum, what, row.get(c).unwrap_or_default())
        };
        records.push(MetricsRecord {
            device_id: row.get(0).ok_or_else(|| bad("missing device_id".into()))?.to_string(),
            category: ALL_CATEGORIES.get(slot).copied(),
            n_visits: parse_field(path, rownum, &row, 2, "n_visits")?,
            n_unique_stores: parse_field(path, rownum, &row, 3, "n_unique_stores")?,
            mean_visited_euclid_m: opt(4, "mean_visited_euclid_m")?,
            mean_visited_network_m: opt(5, "mean_visited_network_m")?,
            nearest_store_euclid_m: opt(6, "nearest_store_euclid_m")?,
            nearest_store_network_m: opt(7, "nearest_store_network_m")?,
            home_based_share: opt(8, "home_based_share")?,
        });
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Plot-ready aggregate tables.

pub fn write_profile_csv(path: &Path, rows: &[crate::aggregate::ProfileRow]) -> Result<u64> {
    let mut w = csv_writer(path)?;
    w.write_record(["category", "kind", "key", "count", "share"])
        .map_err(|e| Error::Csv { path: path.into(), source: e })?;
    let mut buf = itoa::Buffer::new();
    for r in rows {
        w.write_record([
            slot_label(r.slot),
            r.kind,
            r.key.as_str(),
            buf.format(r.count),
            &fmt_opt(r.share),
        ])
        .map_err(|e| Error::Csv { path: path.into(), source: e })?;
    }
    flush(w, path)?;
    Ok(rows.len() as u64)
}

pub fn write_tract_aggregates_csv(
    path: &Path,
    rows: &[crate::aggregate::TractAggregate],
) -> Result<u64> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "tract_id",
        "category",
        "population",
        "n_sampled_homes",
        "sampling_rate",
        "mean_nearest_euclid_m",
        "mean_visited_euclid_m",
        "diff_m",
    ])
    .map_err(|e| Error::Csv { path: path.into(), source: e })?;
    let mut buf = itoa::Buffer::new();
    for r in rows {
        w.write_record([
            r.tract_id.as_str(),
            slot_label(r.slot),
            &fmt_opt(r.population),
            buf.format(r.n_sampled_homes),
            &fmt_opt(r.sampling_rate),
            &fmt_opt(r.mean_nearest_euclid_m),
            &fmt_opt(r.mean_visited_euclid_m),
            &fmt_opt(r.diff_m),
        ])
        .map_err(|e| Error::Csv { path: path.into(), source: e })?;
    }
    flush(w, path)?;
    Ok(rows.len() as u64)
}

pub fn write_hist_csv(path: &Path, bins: &[crate::aggregate::HistBin]) -> Result<u64> {
    let mut w = csv_writer(path)?;
    w.write_record(["lo_m", "hi_m", "count", "density"])
        .map_err(|e| Error::Csv { path: path.into(), source: e })?;
    let mut buf = itoa::Buffer::new();
    for b in bins {
        w.write_record([
            &fmt_f64(b.lo_m),
            &fmt_opt(b.hi_m),
            buf.format(b.count),
            &fmt_opt(b.density),
        ])
        .map_err(|e| Error::Csv { path: path.into(), source: e })?;
    }
    flush(w, path)?;
    Ok(bins.len() as u64)
}

pub fn write_density_grid_csv(
    path: &Path,
    cells: &[crate::aggregate::GridCellCount],
    cell_m: f64,
) -> Result<u64> {
    let mut w = csv_writer(path)?;
    w.write_record(["ix", "iy", "nearest_lo_m", "visited_lo_m", "count"])
        .map_err(|e| Error::Csv { path: path.into(), source: e })?;
    let mut buf = itoa::Buffer::new();
    for c in cells {
        let ix = buf.format(c.ix).to_string();
        let iy = buf.format(c.iy).to_string();
        w.write_record([
            ix.as_str(),
            &iy,
            &fmt_f64(c.ix as f64 * cell_m),
            &fmt_f64(c.iy as f64 * cell_m),
            buf.format(c.count),
        ])
        .map_err(|e| Error::Csv { path: path.into(), source: e })?;
    }
    flush(w, path)?;
    Ok(cells.len() as u64)
}

pub fn write_sweep_csv(path: &Path, rows: &[crate::sweep::SweepRow]) -> Result<u64> {
    let mut w = csv_writer(path)?;
    w.write_record(["setting", "category", "metric", "mean", "n"])
        .map_err(|e| Error::Csv { path: path.into(), source: e })?;
    let mut buf = itoa::Buffer::new();
    for r in rows {
        w.write_record([
            r.setting.as_str(),
            r.category.as_str(),
            r.metric,
            &fmt_opt(r.mean),
            buf.format(r.n),
        ])
        .map_err(|e| Error::Csv { path: path.into(), source: e })?;
    }
    flush(w, path)?;
    Ok(rows.len() as u64)
}

// ---------------------------------------------------------------------------
// Run manifests.

/// Provenance record written next to every stage's outputs. Wall time and
/// memory vary run to run by nature; everything else is deterministic.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub stage: String,
    pub inputs: Vec<String>,
    pub config_hash: String,
    /// Output file → row count.
    pub rows: BTreeMap<String, u64>,
    pub wall_time_s: f64,
    pub peak_rss_bytes: Option<u64>,
}

/// Peak resident set size of this process, read from /proc (Linux only).
pub fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Collects row counts during a stage and writes `<stage>.manifest.json`.
pub struct StageRun {
    stage: String,
    out_dir: PathBuf,
    inputs: Vec<String>,
    config_hash: String,
    rows: BTreeMap<String, u64>,
    started: Instant,
}

impl StageRun {
    pub fn new(stage: &str, out_dir: &Path, config_hash: String) -> StageRun {
        StageRun {
            stage: stage.to_string(),
            out_dir: out_dir.to_path_buf(),
            inputs: Vec::new(),
            config_hash,
            rows: BTreeMap::new(),
            started: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    pub fn rows(&mut self, output: &Path, n: u64) {
        let name = output
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| output.display().to_string());
        self.rows.insert(name, n);
    }

    pub fn finish(self) -> Result<()> {
        let manifest = Manifest {
            stage: self.stage.clone(),
            inputs: self.inputs,
            config_hash: self.config_hash,
            rows: self.rows,
            wall_time_s: self.started.elapsed().as_secs_f64(),
            peak_rss_bytes: peak_rss_bytes(),
        };
        let path = self.out_dir.join(format!("{}.manifest.json", self.stage));
        write_json(&path, &manifest)
    }
}

// ---------------------------------------------------------------------------
// Shared parsing helpers.

fn expect_headers(
    reader: &mut csv::Reader<BufReader<File>>,
    path: &Path,
    expected: &[&str],
) -> Result<()> {
    let headers = reader
        .headers()
        .map_err(|e| Error::Csv { path: path.into(), source: e })?;
    for want in expected {
        if !headers.iter().any(|h| h == *want) {
            return Err(Error::MissingColumn { path: path.into(), column: (*want).into() });
        }
    }
    // Positional access below relies on the canonical order our writers use.
    let actual: Vec<&str> = headers.iter().collect();
    if actual != expected {
        return Err(Error::input(
            path,
            format!("unexpected column order {actual:?}; expected {expected:?}"),
        ));
    }
    Ok(())
}

fn parse_field<T: std::str::FromStr>(
    path: &Path,
    rownum: usize,
    row: &csv::StringRecord,
    col: usize,
    what: &str,
) -> Result<T> {
    let raw = row
        .get(col)
        .ok_or_else(|| Error::input(path, format!("row {rownum}: missing {what}")))?;
    raw.parse()
        .map_err(|_| Error::input(path, format!("row {rownum}: bad {what} `{raw}`")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::GridCell;

    fn dir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn floats_round_trip_exactly() {
        // Shortest-representation printing must reparse to identical bits.
        for v in [
            std::f64::consts::PI,
            30.123456789012345,
            -81.0000000001,
            1.0 / 3.0,
            f64::MIN_POSITIVE,
            1e300,
        ] {
            let s = fmt_f64(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), v.to_bits(), "{v} printed as {s}");
        }
    }

    #[test]
    fn stays_round_trip() {
        let d = dir();
        let path = d.path().join("stays.csv");
        let stays = vec![
            StayPoint {
                stay_id: "d1-000".into(),
                device_id: "d1".into(),
                centroid: LatLon::new(30.333333333333336, -81.65999999999998),
                start_ts: 1_662_000_000,
                end_ts: 1_662_001_800,
                n_pings: 31,
                origin_stay_id: None,
            },
            StayPoint {
                stay_id: "d1-001".into(),
                device_id: "d1".into(),
                centroid: LatLon::new(30.34, -81.64),
                start_ts: 1_662_005_000,
                end_ts: 1_662_006_000,
                n_pings: 17,
                origin_stay_id: Some("d1-000".into()),
            },
        ];
        assert_eq!(write_stays_csv(&path, &stays).unwrap(), 2);
        let back = read_stays_csv(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in stays.iter().zip(&back) {
            assert_eq!(a.stay_id, b.stay_id);
            assert_eq!(a.centroid.lat.to_bits(), b.centroid.lat.to_bits());
            assert_eq!(a.centroid.lon.to_bits(), b.centroid.lon.to_bits());
            assert_eq!(a.start_ts, b.start_ts);
            assert_eq!(a.end_ts, b.end_ts);
            assert_eq!(a.n_pings, b.n_pings);
            assert_eq!(a.origin_stay_id, b.origin_stay_id);
        }
    }

    #[test]
    fn visits_round_trip() {
        let d = dir();
        let path = d.path().join("visits.csv");
        let visits = vec![FoodVisit {
            visit_id: "d1-000:42".into(),
            device_id: "d1".into(),
            outlet_id: 42,
            stay_id: "d1-000".into(),
            start_ts: 1_662_000_000,
            end_ts: 1_662_001_800,
            distance_m: 37.5000001,
            home_based: HomeBased::UnknownOrigin,
            category: Category::SmallHealthy,
            primary_food: true,
        }];
        assert_eq!(write_visits_csv(&path, &visits).unwrap(), 1);
        let back = read_visits_csv(&path).unwrap();
        assert_eq!(back[0].visit_id, visits[0].visit_id);
        assert_eq!(back[0].outlet_id, 42);
        assert_eq!(back[0].distance_m.to_bits(), visits[0].distance_m.to_bits());
        assert_eq!(back[0].home_based, HomeBased::UnknownOrigin);
        assert_eq!(back[0].category, Category::SmallHealthy);
        assert!(back[0].primary_food);
    }

    #[test]
    fn homes_round_trip_recomputes_cell() {
        let d = dir();
        let path = d.path().join("homes.csv");
        let study = StudyConfig::default();
        let frame = LocalFrame::new(study.bbox.southwest());
        let pos = LatLon::new(30.3312345, -81.6598765);
        let homes = vec![HomeLocation {
            device_id: "d1".into(),
            cell: frame.to_cell(pos, study.grid_cell_m),
            pos,
            method: HomeMethod::WeekendFallback,
            support: 12,
        }];
        write_homes_csv(&path, &homes).unwrap();
        let back = read_homes_csv(&path, &study).unwrap();
        assert_eq!(back[0].device_id, "d1");
        assert_eq!(back[0].pos.lat.to_bits(), pos.lat.to_bits());
        assert_eq!(back[0].cell, homes[0].cell);
        assert_eq!(back[0].method, HomeMethod::WeekendFallback);
        assert_eq!(back[0].support, 12);
        let _ = GridCell { ix: 0, iy: 0 };
    }

    #[test]
    fn metrics_round_trip_with_missing_values() {
        let d = dir();
        let path = d.path().join("metrics.csv");
        let records = vec![
            MetricsRecord {
                device_id: "d1".into(),
                category: Some(Category::LargeGrocery),
                n_visits: 3,
                n_unique_stores: 2,
                mean_visited_euclid_m: Some(1234.5678),
                mean_visited_network_m: None,
                nearest_store_euclid_m: Some(200.0),
                nearest_store_network_m: Some(260.25),
                home_based_share: Some(2.0 / 3.0),
            },
            MetricsRecord {
                device_id: "d1".into(),
                category: None,
                n_visits: 0,
                n_unique_stores: 0,
                mean_visited_euclid_m: None,
                mean_visited_network_m: None,
                nearest_store_euclid_m: Some(200.0),
                nearest_store_network_m: None,
                home_based_share: None,
            },
        ];
        write_metrics_csv(&path, &records).unwrap();
        let back = read_metrics_csv(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].category, Some(Category::LargeGrocery));
        assert_eq!(back[1].category, None);
        assert_eq!(back[0].home_based_share, Some(2.0 / 3.0));
        assert_eq!(back[1].mean_visited_euclid_m, None);
        assert_eq!(back[0].n_visits, 3);
    }

    #[test]
    fn clean_pings_round_trip_and_block_check() {
        let d = dir();
        let path = d.path().join("pings_clean.csv");
        let tracks = vec![
            DeviceTrack {
                device_id: "a".into(),
                pings: vec![
                    TrackPing { ts: 10, pos: LatLon::new(30.3, -81.6) },
                    TrackPing { ts: 70, pos: LatLon::new(30.300001, -81.600001) },
                ],
            },
            DeviceTrack {
                device_id: "b".into(),
                pings: vec![TrackPing { ts: 5, pos: LatLon::new(30.4, -81.5) }],
            },
        ];
        assert_eq!(write_clean_pings_csv(&path, &tracks).unwrap(), 3);
        let back = read_clean_pings_csv(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].device_id, "a");
        assert_eq!(back[0].pings.len(), 2);
        assert_eq!(back[0].pings[1].pos.lat.to_bits(), tracks[0].pings[1].pos.lat.to_bits());

        // An interleaved device is rejected.
        std::fs::write(
            &path,
            "device_id,lat,lon,ts\na,30.3,-81.6,10\nb,30.4,-81.5,5\na,30.3,-81.6,70\n",
        )
        .unwrap();
        let err = read_clean_pings_csv(&path).unwrap_err();
        assert!(err.to_string().contains("two blocks"), "{err}");
    }

    #[test]
    fn world_files_load_back_through_ingest() {
        use crate::config::PipelineConfig;
        let mut cfg = PipelineConfig::default();
        cfg.study.window_end = cfg.study.window_start + 2 * 86_400;
        cfg.synth.n_devices = 3;
        cfg.synth.n_outlets_per_category = 4;
        cfg.synth.grid_extent_m = 5_000.0;
        cfg.synth.road_grid_k = 3;
        cfg.synth.tract_grid_k = 2;
        cfg.synth.frac_other_accuracy = 0.2;
        let world = crate::synth::generate_world(&cfg.synth, &cfg.study).unwrap();

        let d = dir();
        let pings = d.path().join("pings.csv");
        let outlets = d.path().join("outlets.csv");
        let nodes = d.path().join("nodes.csv");
        let edges = d.path().join("edges.csv");
        let tracts = d.path().join("tracts.geojson");
        let truth = d.path().join("truth.json");
        write_pings_csv(&pings, &world).unwrap();
        write_outlets_csv(&outlets, &world.outlets).unwrap();
        write_nodes_csv(&nodes, &world.nodes).unwrap();
        write_edges_csv(&edges, &world.edges).unwrap();
        write_tracts_geojson(&tracts, &world.tracts).unwrap();
        write_truth_json(&truth, &world.truth).unwrap();

        let (tracks, stats) = crate::ingest::parse_pings(&pings, &cfg.study).unwrap();
        assert_eq!(stats.total as usize, world.n_pings());
        // Other-accuracy rows are planted and must be filtered out here.
        assert!(stats.low_accuracy > 0);
        assert_eq!(stats.retained + stats.low_accuracy, stats.total);
        let n_high: usize = world
            .pings
            .iter()
            .flatten()
            .filter(|p| p.high_accuracy)
            .count();
        assert_eq!(stats.retained as usize, n_high);
        assert!(!tracks.is_empty());

        let cat = crate::ingest::load_outlets(&outlets).unwrap();
        assert_eq!(cat.len(), world.outlets.len());
        assert_eq!(cat[0].pos.lat.to_bits(), world.outlets[0].pos.lat.to_bits());
        assert_eq!(cat[0].category, world.outlets[0].category);

        let (n, e) = crate::ingest::load_road_files(&nodes, &edges).unwrap();
        assert_eq!(n.len(), world.nodes.len());
        assert_eq!(e.len(), world.edges.len());
        assert_eq!(e[0].length_m.to_bits(), world.edges[0].length_m.to_bits());

        let t = crate::ingest::load_tracts(&tracts).unwrap();
        assert_eq!(t.len(), world.tracts.len());
        assert_eq!(t[0].tract_id, world.tracts[0].tract_id);
        assert_eq!(t[0].population, world.tracts[0].population);

        let tr = read_truth_json(&truth).unwrap();
        assert_eq!(tr.len(), world.truth.len());
        assert_eq!(tr[0].device_id, world.truth[0].device_id);
        assert_eq!(tr[0].home_lat.to_bits(), world.truth[0].home_lat.to_bits());
        assert_eq!(tr[0].dwells.len(), world.truth[0].dwells.len());
    }

    #[test]
    fn manifest_written_with_rss() {
        let d = dir();
        let mut run = StageRun::new("stays", d.path(), "abc123".into());
        run.input(Path::new("/tmp/pings_clean.csv"));
        run.rows(Path::new("/tmp/stays.csv"), 17);
        run.finish().unwrap();
        let text = std::fs::read_to_string(d.path().join("stays.manifest.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["stage"], "stays");
        assert_eq!(v["rows"]["stays.csv"], 17);
        assert_eq!(v["config_hash"], "abc123");
        // Linux: VmHWM must be readable.
        assert!(v["peak_rss_bytes"].as_u64().unwrap() > 0);
        assert!(v["wall_time_s"].as_f64().unwrap() >= 0.0);
    }

    #[test]
    fn wrong_column_order_rejected() {
        let d = dir();
        let path = d.path().join("stays.csv");
        std::fs::write(
            &path,
            "device_id,stay_id,lat,lon,start_ts,end_ts,n_pings,origin_stay_id\n",
        )
        .unwrap();
        let err = read_stays_csv(&path).unwrap_err();
        assert!(err.to_string().contains("column order"), "{err}");
    }

    #[test]
    fn missing_column_named() {
        let d = dir();
        let path = d.path().join("visits.csv");
        std::fs::write(&path, "visit_id,device_id\n").unwrap();
        match read_visits_csv(&path) {
            Err(Error::MissingColumn { column, .. }) => assert_eq!(column, "outlet_id"),
            other => panic!("expected MissingColumn, got {other:?}"),
        }
    }
}
