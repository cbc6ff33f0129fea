//! Seeded synthetic world: outlets on a jittered grid, a rectangular road
//! network, grid tracts, and per-device movement schedules with ground
//! truth — plus controlled degradation and the pipeline evaluator.
//!
//! Determinism contract: every random stream derives from the config seed
//! (world structure from fixed sub-streams, each device from its own), so
//! parallel generation equals sequential generation and the same seed
//! regenerates byte-identical inputs.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clock::{parse_date_days, weekday_of_day, LocalClock};
use crate::config::{StudyConfig, SynthParams};
use crate::geo::{haversine, CellIndex, LatLon, LocalFrame};
use crate::home::HomeLocation;
use crate::ingest::{RawEdge, Tract};
use crate::outlets::{category_default_radius_m, FoodOutlet, FoodVisit, ALL_CATEGORIES};
use crate::stays::StayPoint;
use crate::{Error, Result};

/// Noise vectors are clipped to this norm so every synthetic ping passes a
/// 100 m stay threshold test against its true position (2·35 < 100) and the
/// accuracy filter story stays coherent.
pub const NOISE_CAP_M: f64 = 35.0;

/// Evaluation thresholds: home hit distance, stay-match interval IoU, and
/// stay-match centroid distance.
pub const HOME_HIT_M: f64 = 40.0;
pub const MATCH_IOU: f64 = 0.5;
pub const MATCH_CENTROID_M: f64 = 100.0;

/// Stream ids for world-level sub-seeds (devices use 100 + index).
const STREAM_OUTLETS: u64 = 1;
const STREAM_ROADS: u64 = 2;
const STREAM_TRACTS: u64 = 3;
const STREAM_DEGRADE: u64 = 7;
const STREAM_DEVICE_BASE: u64 = 100;

fn sub_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (stream.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    /// Pings around the clock.
    Normal,
    /// No pings during the night window; home only via weekend fallback.
    NightSilent,
    /// Pings only while away from home; home uninferable.
    TripOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DwellKind {
    Home,
    Errand,
    Food,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthDwell {
    pub kind: DwellKind,
    pub lat: f64,
    pub lon: f64,
    pub start_ts: i64,
    pub end_ts: i64,
    /// Intended outlet for Food dwells.
    pub outlet_id: Option<u64>,
    /// Where the leg to a Food dwell departed from.
    pub origin: Option<DwellKind>,
}

impl TruthDwell {
    pub fn pos(&self) -> LatLon {
        LatLon::new(self.lat, self.lon)
    }

    pub fn duration_min(&self) -> f64 {
        (self.end_ts - self.start_ts) as f64 / 60.0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeviceTruth {
    pub device_id: String,
    pub archetype: Archetype,
    pub home_lat: f64,
    pub home_lon: f64,
    pub dwells: Vec<TruthDwell>,
}

impl DeviceTruth {
    pub fn home(&self) -> LatLon {
        LatLon::new(self.home_lat, self.home_lon)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SynthPing {
    pub ts: i64,
    pub pos: LatLon,
    pub high_accuracy: bool,
}

pub struct SynthWorld {
    pub outlets: Vec<FoodOutlet>,
    pub nodes: Vec<(u64, LatLon)>,
    pub edges: Vec<RawEdge>,
    pub tracts: Vec<Tract>,
    pub truth: Vec<DeviceTruth>,
    /// Per-device ping streams, index-aligned with `truth`, time-ordered.
    pub pings: Vec<Vec<SynthPing>>,
}

impl SynthWorld {
    pub fn n_pings(&self) -> usize {
        self.pings.iter().map(Vec::len).sum()
    }
}

pub fn generate_world(params: &SynthParams, study: &StudyConfig) -> Result<SynthWorld> {
    let frame = LocalFrame::new(study.bbox.southwest());
    let clock = LocalClock::new(&study.timezone, study.window_start, study.window_end)?;
    let holidays: Vec<i64> =
        params.holiday_dates.iter().map(|d| parse_date_days(d)).collect::<Result<_>>()?;

    let outlets = gen_outlets(params, &frame);
    let (nodes, edges) = gen_roads(params, &frame);
    let tracts = gen_tracts(params, &frame);

    // Spatial index over outlets for clearance checks; radius 0 disables.
    let outlet_positions: Vec<LatLon> = outlets.iter().map(|o| o.pos).collect();
    let clearance_index = (params.clearance_m > 0.0 && !outlet_positions.is_empty())
        .then(|| CellIndex::build(&outlet_positions, params.clearance_m));

    let device_results: Vec<Result<(DeviceTruth, Vec<SynthPing>)>> = (0..params.n_devices)
        .into_par_iter()
        .map(|d| {
            gen_device(
                d,
                params,
                study,
                &frame,
                &clock,
                &holidays,
                &outlets,
                clearance_index.as_ref(),
            )
        })
        .collect();
    let mut truth = Vec::with_capacity(device_results.len());
    let mut pings = Vec::with_capacity(device_results.len());
    for r in device_results {
        let (t, p) = r?;
        truth.push(t);
        pings.push(p);
    }
    Ok(SynthWorld { outlets, nodes, edges, tracts, truth, pings })
}

/// One outlet per cell of a jittered grid: n cells ≥ 4·per-category, jitter
/// confined to the central half of each cell so any two outlets stay at
/// least half a cell apart. Categories cycle so they interleave spatially.
fn gen_outlets(params: &SynthParams, frame: &LocalFrame) -> Vec<FoodOutlet> {
    let mut rng = sub_rng(params.seed, STREAM_OUTLETS);
    let n_total = params.n_outlets_per_category as usize * ALL_CATEGORIES.len();
    let grid_n = (n_total as f64).sqrt().ceil().max(1.0) as usize;
    let s = params.grid_extent_m / grid_n as f64;
    let mut outlets = Vec::with_capacity(n_total);
    for k in 0..n_total {
        let (row, col) = (k / grid_n, k % grid_n);
        let x = col as f64 * s + s * rng.gen_range(0.25..0.75);
        let y = row as f64 * s + s * rng.gen_range(0.25..0.75);
        let category = ALL_CATEGORIES[k % ALL_CATEGORIES.len()];
        let primary_food = match category {
            crate::outlets::Category::LargeGrocery => true,
            crate::outlets::Category::BigBox => false,
            crate::outlets::Category::SmallHealthy => rng.gen_bool(0.7),
            crate::outlets::Category::ProcessedFood => rng.gen_bool(0.6),
        };
        outlets.push(FoodOutlet {
            outlet_id: (k + 1) as u64,
            name: format!("{} #{}", category.name(), k + 1),
            pos: frame.unproject(x, y),
            category,
            primary_food,
            radius_m: category_default_radius_m(category),
        });
    }
    outlets
}

/// k×k grid of nodes over the extent, 4-neighbor bidirectional edges with a
/// random detour factor on top of the straight-line length.
fn gen_roads(params: &SynthParams, frame: &LocalFrame) -> (Vec<(u64, LatLon)>, Vec<RawEdge>) {
    let mut rng = sub_rng(params.seed, STREAM_ROADS);
    let k = params.road_grid_k.max(2) as usize;
    let step = params.grid_extent_m / (k - 1) as f64;
    let at = |r: usize, c: usize| frame.unproject(c as f64 * step, r as f64 * step);
    let id = |r: usize, c: usize| (1 + r * k + c) as u64;
    let mut nodes = Vec::with_capacity(k * k);
    let mut edges = Vec::new();
    for r in 0..k {
        for c in 0..k {
            nodes.push((id(r, c), at(r, c)));
            if c + 1 < k {
                edges.push(RawEdge {
                    from: id(r, c),
                    to: id(r, c + 1),
                    length_m: haversine(at(r, c), at(r, c + 1)) * rng.gen_range(1.0..1.3),
                    oneway: false,
                });
            }
            if r + 1 < k {
                edges.push(RawEdge {
                    from: id(r, c),
                    to: id(r + 1, c),
                    length_m: haversine(at(r, c), at(r + 1, c)) * rng.gen_range(1.0..1.3),
                    oneway: false,
                });
            }
        }
    }
    (nodes, edges)
}

/// k×k rectangular partition of the extent with random census populations.
fn gen_tracts(params: &SynthParams, frame: &LocalFrame) -> Vec<Tract> {
    let mut rng = sub_rng(params.seed, STREAM_TRACTS);
    let k = params.tract_grid_k.max(1) as usize;
    let s = params.grid_extent_m / k as f64;
    let mut tracts = Vec::with_capacity(k * k);
    for r in 0..k {
        for c in 0..k {
            let (x0, y0) = (c as f64 * s, r as f64 * s);
            tracts.push(Tract {
                tract_id: format!("T{:03}", r * k + c),
                population: Some(rng.gen_range(500..5_000) as f64),
                ring: vec![
                    frame.unproject(x0, y0),
                    frame.unproject(x0 + s, y0),
                    frame.unproject(x0 + s, y0 + s),
                    frame.unproject(x0, y0 + s),
                ],
            });
        }
    }
    tracts
}

/// Movement timeline segment in projected meters.
enum Seg {
    Still { from: i64, to: i64, x: f64, y: f64, at_home: bool },
    Move { from: i64, to: i64, x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Seg {
    fn start_ts(&self) -> i64 {
        match self {
            Seg::Still { from, .. } | Seg::Move { from, .. } => *from,
        }
    }

    fn end_ts(&self) -> i64 {
        match self {
            Seg::Still { to, .. } | Seg::Move { to, .. } => *to,
        }
    }

    fn pos_at(&self, t: i64) -> (f64, f64) {
        match self {
            Seg::Still { x, y, .. } => (*x, *y),
            Seg::Move { from, to, x0, y0, x1, y1 } => {
                let f = (t - from) as f64 / (to - from).max(1) as f64;
                (x0 + f * (x1 - x0), y0 + f * (y1 - y0))
            }
        }
    }

    fn at_home(&self) -> bool {
        matches!(self, Seg::Still { at_home: true, .. })
    }
}

/// Rejection-sample a point of the extent at least `clearance_m` from every
/// outlet and from each anchor in `avoid`.
fn sample_clear_point(
    rng: &mut ChaCha8Rng,
    params: &SynthParams,
    frame: &LocalFrame,
    index: Option<&CellIndex>,
    avoid: &[(f64, f64)],
) -> Result<(f64, f64)> {
    for _ in 0..10_000 {
        let x = rng.gen::<f64>() * params.grid_extent_m;
        let y = rng.gen::<f64>() * params.grid_extent_m;
        let p = frame.unproject(x, y);
        let near_outlet = match index {
            Some(ix) => !ix
                .query_within(p, params.clearance_m)
                .expect("index built at clearance radius")
                .is_empty(),
            None => false,
        };
        let near_avoid = avoid
            .iter()
            .any(|&(ax, ay)| ((x - ax).powi(2) + (y - ay).powi(2)).sqrt() < params.clearance_m);
        if !near_outlet && !near_avoid {
            return Ok((x, y));
        }
    }
    Err(Error::Config(format!(
        "synth.clearance_m = {} leaves no room between outlets; lower it or enlarge the extent",
        params.clearance_m
    )))
}

#[allow(clippy::too_many_arguments)]
fn gen_device(
    d: u32,
    params: &SynthParams,
    study: &StudyConfig,
    frame: &LocalFrame,
    clock: &LocalClock,
    holidays: &[i64],
    outlets: &[FoodOutlet],
    clearance_index: Option<&CellIndex>,
) -> Result<(DeviceTruth, Vec<SynthPing>)> {
    let mut rng = sub_rng(params.seed, STREAM_DEVICE_BASE + u64::from(d));
    let device_id = format!("synth-{d:05}");

    let archetype = {
        let u: f64 = rng.gen();
        if u < params.frac_night_silent {
            Archetype::NightSilent
        } else if u < params.frac_night_silent + params.frac_trip_only {
            Archetype::TripOnly
        } else {
            Archetype::Normal
        }
    };

    let home = sample_clear_point(&mut rng, params, frame, clearance_index, &[])?;
    let n_errands = rng.gen_range(1..=3);
    let mut errands: Vec<(f64, f64)> = Vec::with_capacity(n_errands);
    for _ in 0..n_errands {
        let mut avoid = vec![home];
        avoid.extend_from_slice(&errands);
        errands.push(sample_clear_point(&mut rng, params, frame, clearance_index, &avoid)?);
    }

    // Build the movement timeline: home by default, at most one excursion
    // per local day (food stops, then an errand), straight-line travel.
    let (window_start, window_end) = (study.window_start, study.window_end);
    let first_day = clock.local_day(window_start);
    let last_day = clock.local_day(window_end - 1);
    let dwell_range_s = (params.dwell_min_min * 60.0) as i64..=(params.dwell_max_min * 60.0) as i64;

    let mut segs: Vec<Seg> = Vec::new();
    let mut dwells: Vec<TruthDwell> = Vec::new();
    let mut cursor = window_start;
    let push_dwell = |dwells: &mut Vec<TruthDwell>,
                      kind: DwellKind,
                      pos: LatLon,
                      start: i64,
                      end: i64,
                      outlet_id: Option<u64>,
                      origin: Option<DwellKind>| {
        let (start, end) = (start.max(window_start), end.min(window_end));
        if end > start {
            dwells.push(TruthDwell {
                kind,
                lat: pos.lat,
                lon: pos.lon,
                start_ts: start,
                end_ts: end,
                outlet_id,
                origin,
            });
        }
    };

    for day in first_day..=last_day {
        let weekend = weekday_of_day(day) >= 5;
        let mut p_trip = if weekend { params.p_trip_weekend } else { params.p_trip_weekday };
        if holidays.contains(&day) {
            p_trip *= params.holiday_trip_factor;
        }
        let take_trip = rng.gen_bool(p_trip.clamp(0.0, 1.0));
        let take_second = take_trip && rng.gen_bool(params.p_second_stop.clamp(0.0, 1.0));
        let take_errand = rng.gen_bool(params.p_errand.clamp(0.0, 1.0));
        if !take_trip && !take_errand {
            continue;
        }

        // Departure between 09:00 and 19:00 local.
        let depart = clock.day_start_utc(day) + rng.gen_range(9 * 3_600..19 * 3_600);
        if depart <= cursor || depart >= window_end {
            continue;
        }

        // Stops for today: outlet(s) first, then the errand.
        let mut stops: Vec<(f64, f64, Option<u64>)> = Vec::new();
        if take_trip && !outlets.is_empty() {
            let first = rng.gen_range(0..outlets.len());
            let (fx, fy) = frame.project(outlets[first].pos);
            stops.push((fx, fy, Some(outlets[first].outlet_id)));
            if take_second && outlets.len() > 1 {
                let mut second = rng.gen_range(0..outlets.len() - 1);
                if second >= first {
                    second += 1;
                }
                let (sx, sy) = frame.project(outlets[second].pos);
                stops.push((sx, sy, Some(outlets[second].outlet_id)));
            }
        }
        if take_errand {
            let (ex, ey) = errands[rng.gen_range(0..errands.len())];
            stops.push((ex, ey, None));
        }
        if stops.is_empty() {
            continue;
        }

        // Home dwell that ends at departure.
        push_dwell(
            &mut dwells,
            DwellKind::Home,
            frame.unproject(home.0, home.1),
            cursor,
            depart,
            None,
            None,
        );
        segs.push(Seg::Still { from: cursor, to: depart, x: home.0, y: home.1, at_home: true });

        let mut t = depart;
        let mut here = home;
        let mut origin = DwellKind::Home;
        for &(sx, sy, outlet_id) in &stops {
            let dist = ((sx - here.0).powi(2) + (sy - here.1).powi(2)).sqrt();
            let travel = (dist / params.speed_mps).ceil() as i64;
            if travel > 0 {
                segs.push(Seg::Move {
                    from: t,
                    to: t + travel,
                    x0: here.0,
                    y0: here.1,
                    x1: sx,
                    y1: sy,
                });
            }
            let arrive = t + travel;
            let dwell_s = rng.gen_range(dwell_range_s.clone());
            segs.push(Seg::Still { from: arrive, to: arrive + dwell_s, x: sx, y: sy, at_home: false });
            let kind = if outlet_id.is_some() { DwellKind::Food } else { DwellKind::Errand };
            push_dwell(
                &mut dwells,
                kind,
                frame.unproject(sx, sy),
                arrive,
                arrive + dwell_s,
                outlet_id,
                outlet_id.is_some().then_some(origin),
            );
            t = arrive + dwell_s;
            here = (sx, sy);
            origin = kind;
        }
        // Return home.
        let dist = ((home.0 - here.0).powi(2) + (home.1 - here.1).powi(2)).sqrt();
        let travel = (dist / params.speed_mps).ceil() as i64;
        if travel > 0 {
            segs.push(Seg::Move {
                from: t,
                to: t + travel,
                x0: here.0,
                y0: here.1,
                x1: home.0,
                y1: home.1,
            });
        }
        cursor = t + travel;
    }
    if cursor < window_end {
        push_dwell(
            &mut dwells,
            DwellKind::Home,
            frame.unproject(home.0, home.1),
            cursor,
            window_end,
            None,
            None,
        );
        segs.push(Seg::Still {
            from: cursor,
            to: window_end,
            x: home.0,
            y: home.1,
            at_home: true,
        });
    }

    // Sample the timeline on a fixed clock: window_start + phase + k·cadence.
    let noise = (params.noise_sigma_m > 0.0)
        .then(|| Normal::new(0.0, params.noise_sigma_m).expect("finite positive sigma"));
    let phase = rng.gen_range(0..params.cadence_s.max(1));
    let mut pings = Vec::new();
    let mut seg_i = 0usize;
    let mut t = window_start + phase;
    while t < window_end {
        while seg_i + 1 < segs.len() && segs[seg_i].end_ts() <= t {
            seg_i += 1;
        }
        let seg = &segs[seg_i];
        debug_assert!(seg.start_ts() <= t || seg_i == 0, "timeline has no gaps");
        let emit = match archetype {
            Archetype::Normal => true,
            Archetype::NightSilent => (6..22).contains(&clock.local_hour(t)),
            Archetype::TripOnly => !seg.at_home(),
        };
        // Noise draws advance the stream only for emitted pings; gating by
        // archetype must not reshuffle other devices (each has its own rng).
        if emit {
            let (mut x, mut y) = seg.pos_at(t.min(seg.end_ts()));
            if let Some(n) = noise {
                let (dx, dy) = (n.sample(&mut rng), n.sample(&mut rng));
                let norm = (dx * dx + dy * dy).sqrt();
                let scale = if norm > NOISE_CAP_M { NOISE_CAP_M / norm } else { 1.0 };
                x += dx * scale;
                y += dy * scale;
            }
            let high_accuracy = params.frac_other_accuracy <= 0.0
                || !rng.gen_bool(params.frac_other_accuracy.clamp(0.0, 1.0));
            pings.push(SynthPing { ts: t, pos: frame.unproject(x, y), high_accuracy });
        }
        t += params.cadence_s.max(1);
    }

    Ok((
        DeviceTruth {
            device_id,
            archetype,
            home_lat: frame.unproject(home.0, home.1).lat,
            home_lon: frame.unproject(home.0, home.1).lon,
            dwells,
        },
        pings,
    ))
}

/// Deterministic thinning: one keep-draw per ping from the degrade stream,
/// then blackout windows delete everything inside [start, end).
pub fn degrade(
    pings: &[Vec<SynthPing>],
    dropout_p: f64,
    blackouts: &[(i64, i64)],
    seed: u64,
) -> Vec<Vec<SynthPing>> {
    let mut rng = sub_rng(seed, STREAM_DEGRADE);
    pings
        .iter()
        .map(|device| {
            device
                .iter()
                .filter(|p| {
                    let keep = dropout_p <= 0.0 || !rng.gen_bool(dropout_p.clamp(0.0, 1.0));
                    keep && !blackouts.iter().any(|&(s, e)| p.ts >= s && p.ts < e)
                })
                .copied()
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct RateBlock {
    pub n_truth: u32,
    pub n_detected: u32,
    pub n_matched: u32,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

impl RateBlock {
    fn finish(mut self) -> Self {
        self.precision =
            (self.n_detected > 0).then(|| f64::from(self.n_matched) / f64::from(self.n_detected));
        self.recall =
            (self.n_truth > 0).then(|| f64::from(self.n_matched) / f64::from(self.n_truth));
        self
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub n_devices: u32,
    /// Homes: truth always has one per device; hits are within 40 m.
    pub home_n_inferred: u32,
    pub home_n_hits: u32,
    pub home_hit_rate: Option<f64>,
    /// Stays vs planted dwells of 5–720 min (IoU ≥ 0.5, centroid ≤ 100 m).
    pub stays: RateBlock,
    /// Visits vs planted food dwells; matching additionally requires the
    /// attributed outlet to be the intended one.
    pub visits: RateBlock,
    /// All in-window planted food dwells, regardless of duration.
    pub n_planted_food_dwells: u32,
    pub n_detected_visits: u32,
    /// detected / planted — below 1 quantifies undercounting.
    pub visit_frequency_ratio: Option<f64>,
}

/// Interval IoU in seconds.
fn interval_iou(a: (i64, i64), b: (i64, i64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0) as f64;
    let union = (a.1.max(b.1) - a.0.min(b.0)) as f64;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy one-to-one matching by descending IoU among candidate pairs that
/// clear the IoU and centroid gates (plus any extra gate the caller baked
/// into `eligible`).
fn match_pairs(
    truth: &[((i64, i64), LatLon)],
    detected: &[((i64, i64), LatLon)],
    eligible: impl Fn(usize, usize) -> bool,
) -> Vec<(usize, usize)> {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (ti, (t_iv, t_pos)) in truth.iter().enumerate() {
        for (di, (d_iv, d_pos)) in detected.iter().enumerate() {
            let iou = interval_iou(*t_iv, *d_iv);
            if iou >= MATCH_IOU
                && haversine(*t_pos, *d_pos) <= MATCH_CENTROID_M
                && eligible(ti, di)
            {
                candidates.push((iou, ti, di));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut t_used = vec![false; truth.len()];
    let mut d_used = vec![false; detected.len()];
    let mut pairs = Vec::new();
    for (_, ti, di) in candidates {
        if !t_used[ti] && !d_used[di] {
            t_used[ti] = true;
            d_used[di] = true;
            pairs.push((ti, di));
        }
    }
    pairs
}

/// Score detected homes, stays, and visits against the planted world.
pub fn evaluate(
    truth: &[DeviceTruth],
    homes: &[HomeLocation],
    stays: &[StayPoint],
    visits: &[FoodVisit],
) -> EvalReport {
    let home_by_device: HashMap<&str, &HomeLocation> =
        homes.iter().map(|h| (h.device_id.as_str(), h)).collect();
    let mut stays_by_device: HashMap<&str, Vec<&StayPoint>> = HashMap::new();
    for s in stays {
        stays_by_device.entry(s.device_id.as_str()).or_default().push(s);
    }
    let mut visits_by_device: HashMap<&str, Vec<&FoodVisit>> = HashMap::new();
    for v in visits {
        visits_by_device.entry(v.device_id.as_str()).or_default().push(v);
    }
    let stay_by_id: HashMap<&str, &StayPoint> =
        stays.iter().map(|s| (s.stay_id.as_str(), s)).collect();

    let mut home_n_inferred = 0u32;
    let mut home_n_hits = 0u32;
    let mut stay_block = RateBlock::default();
    let mut visit_block = RateBlock::default();
    let mut n_planted_food = 0u32;
    let mut n_detected_visits = 0u32;

    for t in truth {
        if let Some(h) = home_by_device.get(t.device_id.as_str()) {
            home_n_inferred += 1;
            if haversine(h.pos, t.home()) <= HOME_HIT_M {
                home_n_hits += 1;
            }
        }

        // Stay matching over dwells a perfect detector could emit.
        let eligible: Vec<&TruthDwell> = t
            .dwells
            .iter()
            .filter(|d| d.duration_min() >= 5.0 && d.duration_min() <= 720.0)
            .collect();
        let truth_iv: Vec<((i64, i64), LatLon)> =
            eligible.iter().map(|d| ((d.start_ts, d.end_ts), d.pos())).collect();
        let device_stays =
            stays_by_device.get(t.device_id.as_str()).map_or(&[][..], |v| v.as_slice());
        let det_iv: Vec<((i64, i64), LatLon)> =
            device_stays.iter().map(|s| ((s.start_ts, s.end_ts), s.centroid)).collect();
        let pairs = match_pairs(&truth_iv, &det_iv, |_, _| true);
        stay_block.n_truth += truth_iv.len() as u32;
        stay_block.n_detected += det_iv.len() as u32;
        stay_block.n_matched += pairs.len() as u32;

        // Visit matching: planted food dwells vs attributed visits, with
        // outlet identity required on top of the interval/centroid gates.
        let food: Vec<&TruthDwell> = eligible
            .iter()
            .copied()
            .filter(|d| d.kind == DwellKind::Food)
            .collect();
        let food_iv: Vec<((i64, i64), LatLon)> =
            food.iter().map(|d| ((d.start_ts, d.end_ts), d.pos())).collect();
        let device_visits =
            visits_by_device.get(t.device_id.as_str()).map_or(&[][..], |v| v.as_slice());
        let visit_iv: Vec<((i64, i64), LatLon)> = device_visits
            .iter()
            .map(|v| {
                let centroid = stay_by_id
                    .get(v.stay_id.as_str())
                    .map(|s| s.centroid)
                    .unwrap_or_else(|| LatLon::new(0.0, 0.0));
                ((v.start_ts, v.end_ts), centroid)
            })
            .collect();
        let pairs = match_pairs(&food_iv, &visit_iv, |ti, di| {
            food[ti].outlet_id == Some(device_visits[di].outlet_id)
        });
        visit_block.n_truth += food_iv.len() as u32;
        visit_block.n_detected += visit_iv.len() as u32;
        visit_block.n_matched += pairs.len() as u32;

        n_planted_food +=
            t.dwells.iter().filter(|d| d.kind == DwellKind::Food).count() as u32;
        n_detected_visits += device_visits.len() as u32;
    }

    EvalReport {
        n_devices: truth.len() as u32,
        home_n_inferred,
        home_n_hits,
        home_hit_rate: (home_n_inferred > 0)
            .then(|| f64::from(home_n_hits) / f64::from(home_n_inferred)),
        stays: stay_block.finish(),
        visits: visit_block.finish(),
        n_planted_food_dwells: n_planted_food,
        n_detected_visits,
        visit_frequency_ratio: (n_planted_food > 0)
            .then(|| f64::from(n_detected_visits) / f64::from(n_planted_food)),
    }
}
