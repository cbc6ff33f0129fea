//! Per-device food-acquisition metrics and the population summary.
//!
//! Every metric is home-referenced, so devices without an inferred home are
//! excluded entirely. Each remaining device gets five records: one per
//! outlet category plus an "All" union row. Distances come in Euclidean and
//! road-network flavors; network legs that fail to snap or route are
//! excluded from means and tallied in a diagnostics report rather than
//! contributing silent zeros.

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::Serialize;

use crate::config::MetricsParams;
use crate::geo::{haversine, LatLon};
use crate::home::HomeLocation;
use crate::outlets::{Category, FoodVisit, HomeBased, OutletCatalog, ALL_CATEGORIES};
use crate::routing::{compose_network_distance, RoadGraph, Snap};
use crate::stays::StayPoint;

/// Category slot order in outputs: the four categories, then the union row.
pub const N_SLOTS: usize = 5;

pub fn slot_label(slot: usize) -> &'static str {
    match slot {
        0..=3 => ALL_CATEGORIES[slot].name(),
        4 => "All",
        _ => unreachable!("slot out of range"),
    }
}

pub fn slot_of_label(label: &str) -> Option<usize> {
    if label == "All" {
        return Some(4);
    }
    ALL_CATEGORIES.iter().position(|c| c.name() == label)
}

#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub device_id: String,
    /// None = the "All" union row.
    pub category: Option<Category>,
    pub n_visits: u32,
    pub n_unique_stores: u32,
    pub mean_visited_euclid_m: Option<f64>,
    pub mean_visited_network_m: Option<f64>,
    pub nearest_store_euclid_m: Option<f64>,
    pub nearest_store_network_m: Option<f64>,
    pub home_based_share: Option<f64>,
}

impl MetricsRecord {
    pub fn slot(&self) -> usize {
        self.category.map(|c| c.index()).unwrap_or(4)
    }
}

/// Tally of home→visited-store network-distance requests. Pairs are counted
/// once per (device, distinct visited store); the nearest-store scan over
/// the whole catalog is not counted (skips there are structural, not data
/// exclusions from a mean).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RoutingDiag {
    pub n_pairs: u64,
    pub n_unsnappable: u64,
    pub n_unreachable: u64,
}

impl RoutingDiag {
    fn absorb(&mut self, other: RoutingDiag) {
        self.n_pairs += other.n_pairs;
        self.n_unsnappable += other.n_unsnappable;
        self.n_unreachable += other.n_unreachable;
    }
}

/// Fill each visit's home_based flag from its stay's origin link: Yes iff
/// the origin stay's centroid lies within `home_radius_m` of the device's
/// inferred home; missing origin or missing home → UnknownOrigin.
pub fn assign_home_based(
    visits: &mut [FoodVisit],
    stays: &[StayPoint],
    homes: &[HomeLocation],
    home_radius_m: f64,
) {
    let stay_by_id: HashMap<&str, &StayPoint> =
        stays.iter().map(|s| (s.stay_id.as_str(), s)).collect();
    let home_by_device: HashMap<&str, LatLon> =
        homes.iter().map(|h| (h.device_id.as_str(), h.pos)).collect();
    for v in visits.iter_mut() {
        let origin = stay_by_id
            .get(v.stay_id.as_str())
            .and_then(|s| s.origin_stay_id.as_deref())
            .and_then(|oid| stay_by_id.get(oid));
        let home = home_by_device.get(v.device_id.as_str());
        v.home_based = match (origin, home) {
            (Some(o), Some(h)) => {
                if haversine(o.centroid, *h) <= home_radius_m {
                    HomeBased::Yes
                } else {
                    HomeBased::No
                }
            }
            _ => HomeBased::UnknownOrigin,
        };
    }
}

/// Compute one record per (device with home) × (category + All).
///
/// `visits` must already match `params.primary_only` (callers filter with
/// `filter_primary_visits` first); the flag here additionally restricts the
/// nearest-store scan to primary outlets. Records come out sorted by the
/// order of `homes` (device order), category slots in declaration order.
pub fn compute_metrics(
    visits: &[FoodVisit],
    homes: &[HomeLocation],
    catalog: &OutletCatalog,
    graph: &RoadGraph,
    params: &MetricsParams,
) -> (Vec<MetricsRecord>, RoutingDiag) {
    let outlet_idx_by_id: HashMap<u64, usize> = catalog
        .outlets
        .iter()
        .enumerate()
        .map(|(i, o)| (o.outlet_id, i))
        .collect();
    let outlet_snaps: Vec<Option<Snap>> = catalog
        .outlets
        .par_iter()
        .map(|o| graph.snap(o.pos))
        .collect();

    let mut visits_by_device: HashMap<&str, Vec<&FoodVisit>> = HashMap::new();
    for v in visits {
        visits_by_device.entry(v.device_id.as_str()).or_default().push(v);
    }

    let per_device: Vec<(Vec<MetricsRecord>, RoutingDiag)> = homes
        .par_iter()
        .map(|home| {
            device_metrics(
                home,
                visits_by_device.get(home.device_id.as_str()).map_or(&[][..], |v| v),
                catalog,
                graph,
                &outlet_idx_by_id,
                &outlet_snaps,
                params,
            )
        })
        .collect();

    let mut records = Vec::with_capacity(per_device.len() * N_SLOTS);
    let mut diag = RoutingDiag::default();
    for (recs, d) in per_device {
        records.extend(recs);
        diag.absorb(d);
    }
    (records, diag)
}

fn device_metrics(
    home: &HomeLocation,
    visits: &[&FoodVisit],
    catalog: &OutletCatalog,
    graph: &RoadGraph,
    outlet_idx_by_id: &HashMap<u64, usize>,
    outlet_snaps: &[Option<Snap>],
    params: &MetricsParams,
) -> (Vec<MetricsRecord>, RoutingDiag) {
    let home_snap = graph.snap(home.pos);
    let dist_table: Option<Vec<f64>> = home_snap.map(|s| graph.one_to_many(s.node));

    // Network distance to an outlet, or None if either endpoint is
    // unsnappable or the path is unreachable.
    let network_to = |idx: usize| -> Option<f64> {
        let hs = home_snap?;
        let os = outlet_snaps[idx]?;
        let path = dist_table.as_ref().expect("table exists when home snaps")[os.node as usize];
        compose_network_distance(path, hs.dist_m, os.dist_m)
    };

    // Nearest-store scan over the whole in-scope catalog.
    let mut nearest_e = [f64::INFINITY; N_SLOTS];
    let mut nearest_n = [f64::INFINITY; N_SLOTS];
    for (idx, o) in catalog.outlets.iter().enumerate() {
        if params.primary_only && !o.primary_food {
            continue;
        }
        let slot = o.category.index();
        let d_e = haversine(home.pos, o.pos);
        for s in [slot, 4] {
            if d_e < nearest_e[s] {
                nearest_e[s] = d_e;
            }
        }
        if let Some(d_n) = network_to(idx) {
            for s in [slot, 4] {
                if d_n < nearest_n[s] {
                    nearest_n[s] = d_n;
                }
            }
        }
    }

    // Diagnostics over the device's distinct visited stores (the pairs whose
    // exclusion could bias visited means).
    let all_stores: BTreeSet<u64> = visits.iter().map(|v| v.outlet_id).collect();
    let mut diag = RoutingDiag::default();
    for id in &all_stores {
        diag.n_pairs += 1;
        let idx = outlet_idx_by_id[id];
        if home_snap.is_none() || outlet_snaps[idx].is_none() {
            diag.n_unsnappable += 1;
        } else if network_to(idx).is_none() {
            diag.n_unreachable += 1;
        }
    }

    let mut records = Vec::with_capacity(N_SLOTS);
    for slot in 0..N_SLOTS {
        let in_slot = |v: &&&FoodVisit| slot == 4 || v.category.index() == slot;
        let slot_visits: Vec<&&FoodVisit> = visits.iter().filter(in_slot).collect();
        let stores: BTreeSet<u64> = slot_visits.iter().map(|v| v.outlet_id).collect();

        let (mut sum_e, mut n_e) = (0.0f64, 0u32);
        let (mut sum_n, mut n_n) = (0.0f64, 0u32);
        if params.visit_weighted {
            // Each visit contributes its store's home→outlet distance.
            for v in &slot_visits {
                let idx = outlet_idx_by_id[&v.outlet_id];
                sum_e += haversine(home.pos, catalog.outlet(idx).pos);
                n_e += 1;
                if let Some(d) = network_to(idx) {
                    sum_n += d;
                    n_n += 1;
                }
            }
        } else {
            // Distinct stores in ascending outlet_id order: the documented
            // summation order the flat-file oracle reproduces.
            for id in &stores {
                let idx = outlet_idx_by_id[id];
                sum_e += haversine(home.pos, catalog.outlet(idx).pos);
                n_e += 1;
                if let Some(d) = network_to(idx) {
                    sum_n += d;
                    n_n += 1;
                }
            }
        }

        let yes = slot_visits.iter().filter(|v| v.home_based == HomeBased::Yes).count() as u32;
        let no = slot_visits.iter().filter(|v| v.home_based == HomeBased::No).count() as u32;

        records.push(MetricsRecord {
            device_id: home.device_id.clone(),
            category: if slot == 4 { None } else { Some(ALL_CATEGORIES[slot]) },
            n_visits: slot_visits.len() as u32,
            n_unique_stores: stores.len() as u32,
            mean_visited_euclid_m: (n_e > 0).then(|| sum_e / n_e as f64),
            mean_visited_network_m: (n_n > 0).then(|| sum_n / n_n as f64),
            nearest_store_euclid_m: nearest_e[slot].is_finite().then(|| nearest_e[slot]),
            nearest_store_network_m: nearest_n[slot].is_finite().then(|| nearest_n[slot]),
            home_based_share: (yes + no > 0).then(|| f64::from(yes) / f64::from(yes + no)),
        });
    }
    (records, diag)
}

/// One summary cell: mean over the devices where the field was defined,
/// with that count alongside.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SummaryField {
    pub mean: Option<f64>,
    pub n: u32,
}

fn summarize<I: Iterator<Item = Option<f64>>>(values: I) -> SummaryField {
    let (mut sum, mut n) = (0.0f64, 0u32);
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    SummaryField { mean: (n > 0).then(|| sum / f64::from(n)), n }
}

#[derive(Debug, Clone, Serialize)]
pub struct CategorySummary {
    pub category: String,
    pub n_devices: u32,
    pub n_visits: SummaryField,
    pub n_unique_stores: SummaryField,
    pub mean_visited_euclid_m: SummaryField,
    pub mean_visited_network_m: SummaryField,
    pub nearest_store_euclid_m: SummaryField,
    pub nearest_store_network_m: SummaryField,
    pub home_based_share: SummaryField,
}

#[derive(Debug, Clone, Serialize)]
pub struct PopulationSummary {
    /// Which visited-distance statistic the records carry.
    pub visited_stat: String,
    /// "all" or "primary_only" outlet scope.
    pub scope: String,
    pub categories: Vec<CategorySummary>,
}

/// Drop category columns with no primary outlet in the catalog (the union
/// column always stays). Applied to primary-only summaries so out-of-scope
/// categories don't linger as all-empty columns.
pub fn retain_primary_categories(summary: &mut PopulationSummary, catalog: &OutletCatalog) {
    summary.categories.retain(|c| {
        c.category == "All"
            || catalog.outlets.iter().any(|o| o.primary_food && o.category.name() == c.category)
    });
}

/// Unweighted means over devices, per category slot. Undefined fields are
/// excluded from their mean; the per-field `n` reports how many devices
/// contributed.
pub fn summarize_population(records: &[MetricsRecord], params: &MetricsParams) -> PopulationSummary {
    let categories = (0..N_SLOTS)
        .map(|slot| {
            let rs: Vec<&MetricsRecord> = records.iter().filter(|r| r.slot() == slot).collect();
            CategorySummary {
                category: slot_label(slot).to_string(),
                n_devices: rs.len() as u32,
                n_visits: summarize(rs.iter().map(|r| Some(f64::from(r.n_visits)))),
                n_unique_stores: summarize(rs.iter().map(|r| Some(f64::from(r.n_unique_stores)))),
                mean_visited_euclid_m: summarize(rs.iter().map(|r| r.mean_visited_euclid_m)),
                mean_visited_network_m: summarize(rs.iter().map(|r| r.mean_visited_network_m)),
                nearest_store_euclid_m: summarize(rs.iter().map(|r| r.nearest_store_euclid_m)),
                nearest_store_network_m: summarize(rs.iter().map(|r| r.nearest_store_network_m)),
                home_based_share: summarize(rs.iter().map(|r| r.home_based_share)),
            }
        })
        .collect();
    PopulationSummary {
        visited_stat: if params.visit_weighted { "visit_weighted" } else { "store_weighted" }.into(),
        scope: if params.primary_only { "primary_only" } else { "all" }.into(),
        categories,
    }
}
