//! Input parsing: ping streams, the outlet catalog, the road graph, and
//! tract polygons.
//!
//! Pings are filtered best-effort (bad rows are counted, never fatal) since
//! vendor feeds are noisy at the row level; the three reference datasets are
//! parsed strictly — a broken catalog or graph invalidates every downstream
//! number, so those fail fast with the offending row.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::StudyConfig;
use crate::geo::LatLon;
use crate::outlets::{category_default_radius_m, Category, FoodOutlet};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct TrackPing {
    pub ts: i64,
    pub pos: LatLon,
}

/// One device's retained pings, sorted by ts, strictly increasing.
#[derive(Debug, Clone)]
pub struct DeviceTrack {
    pub device_id: String,
    pub pings: Vec<TrackPing>,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct DropStats {
    pub total: u64,
    pub retained: u64,
    pub malformed: u64,
    pub low_accuracy: u64,
    pub out_of_window: u64,
    pub out_of_bbox: u64,
    pub duplicate: u64,
}

impl DropStats {
    /// Conservation of rows: retained + every drop reason = total.
    pub fn balanced(&self) -> bool {
        self.retained
            + self.malformed
            + self.low_accuracy
            + self.out_of_window
            + self.out_of_bbox
            + self.duplicate
            == self.total
    }
}

fn header_index(headers: &csv::ByteRecord, name: &str, path: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name.as_bytes())
        .ok_or_else(|| Error::MissingColumn { path: path.into(), column: name.into() })
}

/// Parse and filter a ping CSV into per-device sorted tracks.
///
/// Retention requires: parseable row, accuracy class "high"
/// (case-insensitive), ts in [window_start, window_end), and position inside
/// the bbox (closed bounds). Duplicate (device_id, ts) rows collapse to the
/// first occurrence in stream order. A row failing several checks is counted
/// under the first failing one, in the order malformed, low_accuracy,
/// out_of_window, out_of_bbox.
pub fn parse_pings(path: &Path, cfg: &StudyConfig) -> Result<(Vec<DeviceTrack>, DropStats)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(BufReader::with_capacity(1 << 20, file));

    let headers = reader
        .byte_headers()
        .map_err(|e| Error::Csv { path: path.into(), source: e })?
        .clone();
    let col_device = header_index(&headers, "device_id", path)?;
    let col_lat = header_index(&headers, "lat", path)?;
    let col_lon = header_index(&headers, "lon", path)?;
    let col_ts = header_index(&headers, "ts", path)?;
    let col_acc = header_index(&headers, "accuracy", path)?;

    let mut stats = DropStats::default();
    // seq keeps dedup stable in stream order after the per-device sort.
    let mut groups: HashMap<String, Vec<(i64, u32, LatLon)>> = HashMap::new();
    let mut record = csv::ByteRecord::new();
    let mut seq: u32 = 0;
    loop {
        match reader.read_byte_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                // A structurally broken line (e.g. bad quoting) is a counted
                // drop unless the reader cannot continue at all.
                if e.is_io_error() {
                    return Err(Error::Csv { path: path.into(), source: e });
                }
                stats.total += 1;
                stats.malformed += 1;
                continue;
            }
        }
        stats.total += 1;
        seq = seq.wrapping_add(1);

        let parsed = (|| -> Option<(String, f64, f64, i64, bool)> {
            let device = std::str::from_utf8(record.get(col_device)?).ok()?;
            if device.is_empty() {
                return None;
            }
            let lat: f64 = std::str::from_utf8(record.get(col_lat)?).ok()?.parse().ok()?;
            let lon: f64 = std::str::from_utf8(record.get(col_lon)?).ok()?.parse().ok()?;
            if !lat.is_finite() || !lon.is_finite() || lat.abs() > 90.0 || lon.abs() > 180.0 {
                return None;
            }
            let ts: i64 = std::str::from_utf8(record.get(col_ts)?).ok()?.parse().ok()?;
            let high = record.get(col_acc)?.eq_ignore_ascii_case(b"high");
            Some((device.to_string(), lat, lon, ts, high))
        })();

        let Some((device, lat, lon, ts, high)) = parsed else {
            stats.malformed += 1;
            continue;
        };
        if !high {
            stats.low_accuracy += 1;
            continue;
        }
        if ts < cfg.window_start || ts >= cfg.window_end {
            stats.out_of_window += 1;
            continue;
        }
        let pos = LatLon::new(lat, lon);
        if !cfg.bbox.contains(pos) {
            stats.out_of_bbox += 1;
            continue;
        }
        stats.retained += 1;
        groups.entry(device).or_default().push((ts, seq, pos));
    }

    type DeviceRows = Vec<(i64, u32, LatLon)>;
    let mut entries: Vec<(String, DeviceRows)> = groups.into_iter().collect();
    entries.sort_unstable_by(|a, b| a.0.cmp(&b.0));
    let results: Vec<(DeviceTrack, u64)> = entries
        .into_par_iter()
        .map(|(id, mut rows)| {
            rows.sort_unstable_by_key(|r| (r.0, r.1));
            let before = rows.len();
            rows.dedup_by_key(|r| r.0);
            let dups = (before - rows.len()) as u64;
            let pings = rows.into_iter().map(|(ts, _, pos)| TrackPing { ts, pos }).collect();
            (DeviceTrack { device_id: id, pings }, dups)
        })
        .collect();

    let mut tracks = Vec::with_capacity(results.len());
    for (track, dups) in results {
        stats.duplicate += dups;
        stats.retained -= dups;
        tracks.push(track);
    }
    debug_assert!(stats.balanced());
    Ok((tracks, stats))
}

/// Load the outlet catalog. Strict: any malformed row is fatal.
///
/// Columns: outlet_id,name,lat,lon,category_code,primary_food with an
/// optional radius_m override column.
// `!(r > 0.0)` rather than `r <= 0.0` so a NaN radius is rejected too.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn load_outlets(path: &Path) -> Result<Vec<FoodOutlet>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let headers = reader
        .headers()
        .map_err(|e| Error::Csv { path: path.into(), source: e })?
        .clone();
    let headers_bytes: csv::ByteRecord = headers.clone().into_byte_record();
    let col_id = header_index(&headers_bytes, "outlet_id", path)?;
    let col_name = header_index(&headers_bytes, "name", path)?;
    let col_lat = header_index(&headers_bytes, "lat", path)?;
    let col_lon = header_index(&headers_bytes, "lon", path)?;
    let col_cat = header_index(&headers_bytes, "category_code", path)?;
    let col_primary = header_index(&headers_bytes, "primary_food", path)?;
    let col_radius = headers.iter().position(|h| h == "radius_m");

    let mut outlets = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in reader.records().enumerate() {
        let rownum = i + 2; // 1-based, after the header line
        let bad = |what: &str| Error::input(path, format!("row {rownum}: {what}"));
        let row = row.map_err(|e| Error::Csv { path: path.into(), source: e })?;
        let field = |c: usize, what: &str| row.get(c).ok_or_else(|| bad(&format!("missing {what}")));

        let outlet_id: u64 = field(col_id, "outlet_id")?
            .parse()
            .map_err(|_| bad("outlet_id is not an unsigned integer"))?;
        if !seen.insert(outlet_id) {
            return Err(bad(&format!("duplicate outlet_id {outlet_id}")));
        }
        let lat: f64 = field(col_lat, "lat")?.parse().map_err(|_| bad("bad lat"))?;
        let lon: f64 = field(col_lon, "lon")?.parse().map_err(|_| bad("bad lon"))?;
        if !lat.is_finite() || !lon.is_finite() {
            return Err(bad("non-finite coordinate"));
        }
        let code = field(col_cat, "category_code")?;
        let category = Category::from_code(code)
            .ok_or_else(|| bad(&format!("unknown category_code `{code}`")))?;
        let primary_food = match field(col_primary, "primary_food")? {
            "0" => false,
            "1" => true,
            other => return Err(bad(&format!("primary_food must be 0 or 1, got `{other}`"))),
        };
        let radius_m = match col_radius {
            Some(c) => {
                let raw = field(c, "radius_m")?;
                if raw.is_empty() {
                    category_default_radius_m(category)
                } else {
                    let r: f64 = raw.parse().map_err(|_| bad("bad radius_m"))?;
                    if !(r > 0.0) {
                        return Err(bad("radius_m must be positive"));
                    }
                    r
                }
            }
            None => category_default_radius_m(category),
        };
        outlets.push(FoodOutlet {
            outlet_id,
            name: field(col_name, "name")?.to_string(),
            pos: LatLon::new(lat, lon),
            category,
            primary_food,
            radius_m,
        });
    }
    Ok(outlets)
}

#[derive(Debug, Clone, Copy)]
pub struct RawEdge {
    pub from: u64,
    pub to: u64,
    pub length_m: f64,
    pub oneway: bool,
}

/// Load road nodes and edges (validation of referential integrity happens
/// when the graph is built).
#[allow(clippy::type_complexity)]
pub fn load_road_files(
    nodes_path: &Path,
    edges_path: &Path,
) -> Result<(Vec<(u64, LatLon)>, Vec<RawEdge>)> {
    let file = File::open(nodes_path).map_err(|e| Error::io(nodes_path, e))?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let headers = reader
        .byte_headers()
        .map_err(|e| Error::Csv { path: nodes_path.into(), source: e })?
        .clone();
    let col_id = header_index(&headers, "node_id", nodes_path)?;
    let col_lat = header_index(&headers, "lat", nodes_path)?;
    let col_lon = header_index(&headers, "lon", nodes_path)?;
    let mut nodes = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let bad = |what: &str| Error::input(nodes_path, format!("row {}: {what}", i + 2));
        let row = row.map_err(|e| Error::Csv { path: nodes_path.into(), source: e })?;
        let id: u64 = row
            .get(col_id)
            .ok_or_else(|| bad("missing node_id"))?
            .parse()
            .map_err(|_| bad("bad node_id"))?;
        let lat: f64 = row.get(col_lat).ok_or_else(|| bad("missing lat"))?.parse().map_err(|_| bad("bad lat"))?;
        let lon: f64 = row.get(col_lon).ok_or_else(|| bad("missing lon"))?.parse().map_err(|_| bad("bad lon"))?;
        nodes.push((id, LatLon::new(lat, lon)));
    }

    let file = File::open(edges_path).map_err(|e| Error::io(edges_path, e))?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let headers = reader
        .byte_headers()
        .map_err(|e| Error::Csv { path: edges_path.into(), source: e })?
        .clone();
    let col_from = header_index(&headers, "from", edges_path)?;
    let col_to = header_index(&headers, "to", edges_path)?;
    let col_len = header_index(&headers, "length_m", edges_path)?;
    let col_oneway = header_index(&headers, "oneway", edges_path)?;
    let mut edges = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let bad = |what: &str| Error::input(edges_path, format!("row {}: {what}", i + 2));
        let row = row.map_err(|e| Error::Csv { path: edges_path.into(), source: e })?;
        let get = |c: usize, what: &str| row.get(c).ok_or_else(|| bad(&format!("missing {what}")));
        let from: u64 = get(col_from, "from")?.parse().map_err(|_| bad("bad from"))?;
        let to: u64 = get(col_to, "to")?.parse().map_err(|_| bad("bad to"))?;
        let length_m: f64 = get(col_len, "length_m")?.parse().map_err(|_| bad("bad length_m"))?;
        let oneway = match get(col_oneway, "oneway")? {
            "0" => false,
            "1" => true,
            other => return Err(bad(&format!("oneway must be 0 or 1, got `{other}`"))),
        };
        edges.push(RawEdge { from, to, length_m, oneway });
    }
    Ok((nodes, edges))
}

#[derive(Debug, Clone)]
pub struct Tract {
    pub tract_id: String,
    pub population: Option<f64>,
    /// Exterior ring, lat/lon order, closing edge implied.
    pub ring: Vec<LatLon>,
}

#[derive(Deserialize)]
struct GeoFeatureCollection {
    #[serde(rename = "type")]
    kind: String,
    features: Vec<GeoFeature>,
}

#[derive(Deserialize)]
struct GeoFeature {
    properties: serde_json::Map<String, serde_json::Value>,
    geometry: GeoGeometry,
}

#[derive(Deserialize)]
struct GeoGeometry {
    #[serde(rename = "type")]
    kind: String,
    coordinates: Vec<Vec<[f64; 2]>>,
}

/// Load tract polygons from a GeoJSON-style FeatureCollection of simple
/// (hole-free) Polygons with `tract_id` and optional `population`
/// properties.
pub fn load_tracts(path: &Path) -> Result<Vec<Tract>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let fc: GeoFeatureCollection = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::Json { path: path.into(), source: e })?;
    if fc.kind != "FeatureCollection" {
        return Err(Error::input(path, format!("expected FeatureCollection, got {}", fc.kind)));
    }
    let mut tracts = Vec::new();
    let mut seen = HashSet::new();
    for (i, f) in fc.features.into_iter().enumerate() {
        let bad = |what: String| Error::input(path, format!("feature {i}: {what}"));
        if f.geometry.kind != "Polygon" {
            return Err(bad(format!("unsupported geometry {}", f.geometry.kind)));
        }
        if f.geometry.coordinates.len() != 1 {
            return Err(bad("polygons with holes are not supported".into()));
        }
        let tract_id = match f.properties.get("tract_id") {
            Some(serde_json::Value::String(s)) => s.clone(),
            Some(serde_json::Value::Number(n)) => n.to_string(),
            _ => return Err(bad("missing tract_id property".into())),
        };
        if !seen.insert(tract_id.clone()) {
            return Err(bad(format!("duplicate tract_id {tract_id}")));
        }
        let population = match f.properties.get("population") {
            None | Some(serde_json::Value::Null) => None,
            Some(v) => Some(
                v.as_f64()
                    .ok_or_else(|| bad("population is not a number".into()))?,
            ),
        };
        // GeoJSON stores [lon, lat].
        let ring: Vec<LatLon> = f.geometry.coordinates[0]
            .iter()
            .map(|c| LatLon::new(c[1], c[0]))
            .collect();
        if ring.len() < 3 {
            return Err(bad("ring has fewer than 3 vertices".into()));
        }
        tracts.push(Tract { tract_id, population, ring });
    }
    Ok(tracts)
}
