//! Proxy-home inference from nighttime ping concentration.
//!
//! Each device's pings with local hour in [22:00, 06:00) are counted per
//! 20 m grid cell; the densest cell (meeting a support floor) is the home.
//! Devices silent at night fall back to weekend daytime pings — phones set
//! to power-save overnight still show up at home on Saturday afternoons.
//! The home coordinate is the centroid of the qualifying pings in the
//! winning cell, giving sub-cell precision.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clock::LocalClock;
use crate::config::{HomeParams, StudyConfig};
use crate::geo::{GridCell, LatLon, LocalFrame};
use crate::ingest::DeviceTrack;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HomeMethod {
    Nighttime,
    WeekendFallback,
}

impl HomeMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            HomeMethod::Nighttime => "Nighttime",
            HomeMethod::WeekendFallback => "WeekendFallback",
        }
    }

    pub fn parse(s: &str) -> Option<HomeMethod> {
        match s {
            "Nighttime" => Some(HomeMethod::Nighttime),
            "WeekendFallback" => Some(HomeMethod::WeekendFallback),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HomeLocation {
    pub device_id: String,
    pub cell: GridCell,
    pub pos: LatLon,
    pub method: HomeMethod,
    /// Qualifying-ping count in the winning cell.
    pub support: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HomeCoverage {
    pub n_devices: u64,
    pub n_nighttime: u64,
    pub n_fallback: u64,
    pub n_none: u64,
}

pub fn night_hour(hour: u32) -> bool {
    !(6..22).contains(&hour)
}

fn weekend_day_hour(hour: u32) -> bool {
    (6..22).contains(&hour)
}

#[derive(Default, Clone, Copy)]
struct CellAcc {
    night: u32,
    weekend: u32,
    all: u32,
    night_sum: (f64, f64),
    weekend_sum: (f64, f64),
}

/// Infer one device's home. Pings must be sorted by ts (any permutation
/// yields the same result; sorting only fixes the accumulation order).
pub fn infer_home(
    track: &DeviceTrack,
    frame: &LocalFrame,
    clock: &LocalClock,
    cell_m: f64,
    params: &HomeParams,
) -> Option<HomeLocation> {
    let mut cells: HashMap<GridCell, CellAcc> = HashMap::new();
    for p in &track.pings {
        let cell = frame.to_cell(p.pos, cell_m);
        let acc = cells.entry(cell).or_default();
        acc.all += 1;
        let hour = clock.local_hour(p.ts);
        if night_hour(hour) {
            acc.night += 1;
            acc.night_sum.0 += p.pos.lat;
            acc.night_sum.1 += p.pos.lon;
        } else if clock.is_weekend(p.ts) && weekend_day_hour(hour) {
            acc.weekend += 1;
            acc.weekend_sum.0 += p.pos.lat;
            acc.weekend_sum.1 += p.pos.lon;
        }
    }

    let pick = |count: fn(&CellAcc) -> u32, min: u32| -> Option<(GridCell, CellAcc)> {
        // Winner: highest qualifying count, then highest all-hours count,
        // then lexicographically smallest (ix, iy). The comparator is a
        // total order, so the fold is iteration-order independent.
        let best = cells.iter().fold(None::<(GridCell, CellAcc)>, |best, (c, a)| {
            if count(a) == 0 {
                return best;
            }
            match best {
                None => Some((*c, *a)),
                Some((bc, ba)) => {
                    let cand = (count(a), a.all, std::cmp::Reverse((c.ix, c.iy)));
                    let incumbent = (count(&ba), ba.all, std::cmp::Reverse((bc.ix, bc.iy)));
                    if cand > incumbent {
                        Some((*c, *a))
                    } else {
                        Some((bc, ba))
                    }
                }
            }
        });
        best.filter(|(_, a)| count(a) >= min)
    };

    if let Some((cell, acc)) = pick(|a| a.night, params.min_night_pings) {
        let k = acc.night as f64;
        return Some(HomeLocation {
            device_id: track.device_id.clone(),
            cell,
            pos: LatLon::new(acc.night_sum.0 / k, acc.night_sum.1 / k),
            method: HomeMethod::Nighttime,
            support: acc.night,
        });
    }
    if let Some((cell, acc)) = pick(|a| a.weekend, params.min_weekend_pings) {
        let k = acc.weekend as f64;
        return Some(HomeLocation {
            device_id: track.device_id.clone(),
            cell,
            pos: LatLon::new(acc.weekend_sum.0 / k, acc.weekend_sum.1 / k),
            method: HomeMethod::WeekendFallback,
            support: acc.weekend,
        });
    }
    None
}

/// Infer homes for the fleet; map order follows input order, independent of
/// worker count.
pub fn infer_all_homes(
    tracks: &[DeviceTrack],
    study: &StudyConfig,
    clock: &LocalClock,
    params: &HomeParams,
) -> (Vec<HomeLocation>, HomeCoverage) {
    let frame = LocalFrame::new(study.bbox.southwest());
    let results: Vec<Option<HomeLocation>> = tracks
        .par_iter()
        .map(|t| infer_home(t, &frame, clock, study.grid_cell_m, params))
        .collect();
    let mut report = HomeCoverage { n_devices: tracks.len() as u64, ..Default::default() };
    let mut homes = Vec::new();
    for h in results.into_iter() {
        match h {
            Some(h) => {
                match h.method {
                    HomeMethod::Nighttime => report.n_nighttime += 1,
                    HomeMethod::WeekendFallback => report.n_fallback += 1,
                }
                homes.push(h);
            }
            None => report.n_none += 1,
        }
    }
    (homes, report)
}
