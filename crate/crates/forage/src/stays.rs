//! Staypoint detection (time-space sliding window) and trip-origin linking.
//!
//! The detector walks each device's sorted pings with a greedy window: the
//! first unconsumed ping anchors the window, which extends while the next
//! ping stays within `dist_threshold_m` of that anchor. Windows spanning
//! [min, max] minutes become stays; over-long windows are discarded whole —
//! multi-hour dwells are homes or workplaces, not food stops.
//!
//! Origin linking is a backward search: a stay inherits the immediately
//! preceding stay as its trip origin only when the track between them is
//! continuous (no inter-ping gap above `max_track_gap_s`).

use rayon::prelude::*;

use crate::config::StayParams;
use crate::geo::{haversine, LatLon};
use crate::ingest::{DeviceTrack, TrackPing};

#[derive(Debug, Clone)]
pub struct StayPoint {
    /// "{device_id}:{start_ts}" — reproducible from content, never from
    /// execution order.
    pub stay_id: String,
    pub device_id: String,
    pub centroid: LatLon,
    pub start_ts: i64,
    pub end_ts: i64,
    pub n_pings: u32,
    pub origin_stay_id: Option<String>,
}

impl StayPoint {
    pub fn duration_min(&self) -> f64 {
        (self.end_ts - self.start_ts) as f64 / 60.0
    }
}

/// Detect stays for one device. Pings must be sorted by ts and deduped.
pub fn detect_stays(device_id: &str, pings: &[TrackPing], p: &StayParams) -> Vec<StayPoint> {
    let min_span_s = p.min_dur_min * 60.0;
    let max_span_s = p.max_dur_min * 60.0;
    let mut stays = Vec::new();
    let n = pings.len();
    let mut i = 0;
    while i < n {
        let anchor = pings[i];
        let mut j = i + 1;
        while j < n && haversine(anchor.pos, pings[j].pos) <= p.dist_threshold_m {
            j += 1;
        }
        let span_s = (pings[j - 1].ts - anchor.ts) as f64;
        if span_s >= min_span_s {
            if span_s <= max_span_s {
                let k = (j - i) as f64;
                let (mut lat, mut lon) = (0.0, 0.0);
                for q in &pings[i..j] {
                    lat += q.pos.lat;
                    lon += q.pos.lon;
                }
                stays.push(StayPoint {
                    stay_id: format!("{device_id}:{}", anchor.ts),
                    device_id: device_id.to_string(),
                    centroid: LatLon::new(lat / k, lon / k),
                    start_ts: anchor.ts,
                    end_ts: pings[j - 1].ts,
                    n_pings: (j - i) as u32,
                    origin_stay_id: None,
                });
            }
            // Emitted or over-long: either way the window is consumed.
            i = j;
        } else {
            i += 1;
        }
    }
    stays
}

/// Set each stay's origin to its predecessor when the track between the
/// predecessor's last ping and the stay's first ping is continuous.
pub fn link_origins(stays: &mut [StayPoint], pings: &[TrackPing], p: &StayParams) {
    for s in 1..stays.len() {
        let prev_end = stays[s - 1].end_ts;
        let cur_start = stays[s].start_ts;
        // Ping indices spanning [prev_end, cur_start] — both are real ping
        // timestamps, so the range is never empty.
        let a = pings.partition_point(|q| q.ts < prev_end);
        let b = pings.partition_point(|q| q.ts <= cur_start);
        let continuous = pings[a..b].windows(2).all(|w| w[1].ts - w[0].ts <= p.max_track_gap_s);
        if continuous {
            stays[s].origin_stay_id = Some(stays[s - 1].stay_id.clone());
        }
    }
}

/// Stays short enough to be food-acquisition candidates (closed bound).
pub fn filter_food_candidates(stays: &[StayPoint], max_food_dur_min: f64) -> Vec<StayPoint> {
    stays
        .iter()
        .filter(|s| s.duration_min() <= max_food_dur_min)
        .cloned()
        .collect()
}

/// Detect and link across a device fleet; output order is the input device
/// order regardless of worker count.
pub fn detect_all(tracks: &[DeviceTrack], p: &StayParams) -> Vec<StayPoint> {
    tracks
        .par_iter()
        .map(|t| {
            let mut stays = detect_stays(&t.device_id, &t.pings, p);
            link_origins(&mut stays, &t.pings, p);
            stays
        })
        .flatten_iter()
        .collect()
}
