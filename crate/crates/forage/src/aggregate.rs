//! Plot-ready aggregate tables: temporal visit profiles, tract-level means,
//! distance histograms, and the nearest-vs-visited density grid.
//!
//! Everything here is a pure fold over visit or metric streams; counts are
//! integers and conservation (bin sums equal totals) is exact.

use std::collections::{BTreeMap, HashMap};

use crate::clock::LocalClock;
use crate::geo::{haversine, point_in_tract};
use crate::home::HomeLocation;
use crate::ingest::Tract;
use crate::metrics::{MetricsRecord, N_SLOTS};
use crate::outlets::{FoodVisit, OutletCatalog};

/// Visit counts binned by local time, per category slot (4 categories + All).
pub struct TemporalProfile {
    /// [slot][0 = weekday, 1 = weekend][hour 0..24]
    pub hourly: Vec<[[u64; 24]; 2]>,
    /// [slot][Mon=0 .. Sun=6]
    pub day_of_week: Vec<[u64; 7]>,
    /// Daily series over the study window, indexed by local day − first_day.
    pub daily: Vec<[u64; N_SLOTS]>,
    /// Local day number of the window's first day.
    pub first_day: i64,
    pub totals: [u64; N_SLOTS],
}

pub fn temporal_profile(
    visits: &[FoodVisit],
    clock: &LocalClock,
    window: (i64, i64),
) -> TemporalProfile {
    let first_day = clock.local_day(window.0);
    let last_day = clock.local_day(window.1 - 1);
    let n_days = (last_day - first_day + 1).max(0) as usize;
    let mut p = TemporalProfile {
        hourly: vec![[[0; 24]; 2]; N_SLOTS],
        day_of_week: vec![[0; 7]; N_SLOTS],
        daily: vec![[0; N_SLOTS]; n_days],
        first_day,
        totals: [0; N_SLOTS],
    };
    for v in visits {
        let hour = clock.local_hour(v.start_ts) as usize;
        let weekend = usize::from(clock.is_weekend(v.start_ts));
        let dow = clock.weekday_index(v.start_ts) as usize;
        let day = clock.local_day(v.start_ts) - first_day;
        for slot in [v.category.index(), 4] {
            p.hourly[slot][weekend][hour] += 1;
            p.day_of_week[slot][dow] += 1;
            if (0..n_days as i64).contains(&day) {
                p.daily[day as usize][slot] += 1;
            }
            p.totals[slot] += 1;
        }
    }
    p
}

/// One flattened profile row for CSV output.
pub struct ProfileRow {
    pub slot: usize,
    /// hour_weekday | hour_weekend | day_of_week | daily
    pub kind: &'static str,
    /// Hour number, weekday number (Mon=0), or local date.
    pub key: String,
    pub count: u64,
    /// Share of the slot's total; None when the slot has no visits.
    pub share: Option<f64>,
}

impl TemporalProfile {
    pub fn rows(&self) -> Vec<ProfileRow> {
        let mut rows = Vec::new();
        for slot in 0..N_SLOTS {
            let share = |count: u64| {
                (self.totals[slot] > 0).then(|| count as f64 / self.totals[slot] as f64)
            };
            for (weekend, kind) in [(0, "hour_weekday"), (1, "hour_weekend")] {
                for hour in 0..24 {
                    let c = self.hourly[slot][weekend][hour];
                    rows.push(ProfileRow { slot, kind, key: hour.to_string(), count: c, share: share(c) });
                }
            }
            for dow in 0..7 {
                let c = self.day_of_week[slot][dow];
                rows.push(ProfileRow {
                    slot,
                    kind: "day_of_week",
                    key: dow.to_string(),
                    count: c,
                    share: share(c),
                });
            }
            for (i, day) in self.daily.iter().enumerate() {
                let c = day[slot];
                rows.push(ProfileRow {
                    slot,
                    kind: "daily",
                    key: crate::clock::date_string(self.first_day + i as i64),
                    count: c,
                    share: share(c),
                });
            }
        }
        rows
    }
}

/// Per-tract unweighted means of the home-referenced metrics.
pub struct TractAggregate {
    pub tract_id: String,
    pub slot: usize,
    pub population: Option<f64>,
    pub n_sampled_homes: u32,
    /// n_sampled_homes / population; None when population is unknown or 0.
    pub sampling_rate: Option<f64>,
    pub mean_nearest_euclid_m: Option<f64>,
    pub mean_visited_euclid_m: Option<f64>,
    /// Exactly mean_visited − mean_nearest (of the emitted means).
    pub diff_m: Option<f64>,
}

/// Aggregate device metrics to tracts. Every tract in `tracts` produces
/// N_SLOTS records (zero-home tracts included, their means undefined).
/// Returns the records sorted by (tract_id, slot) plus the count of homes
/// falling outside every tract (so callers can assert the partition).
pub fn tract_aggregates(
    records: &[MetricsRecord],
    homes: &[HomeLocation],
    tracts: &[Tract],
) -> (Vec<TractAggregate>, u32) {
    let mut tract_of: HashMap<&str, &str> = HashMap::new();
    let mut outside = 0u32;
    for h in homes {
        let hit = point_in_tract(h.pos, tracts.iter().map(|t| (t.tract_id.as_str(), t.ring.as_slice())));
        match hit {
            Some(tid) => {
                tract_of.insert(h.device_id.as_str(), tid);
            }
            None => outside += 1,
        }
    }

    struct Acc {
        n_homes: u32,
        nearest_sum: [f64; N_SLOTS],
        nearest_n: [u32; N_SLOTS],
        visited_sum: [f64; N_SLOTS],
        visited_n: [u32; N_SLOTS],
    }
    let mut acc: BTreeMap<&str, Acc> = tracts
        .iter()
        .map(|t| {
            (
                t.tract_id.as_str(),
                Acc {
                    n_homes: 0,
                    nearest_sum: [0.0; N_SLOTS],
                    nearest_n: [0; N_SLOTS],
                    visited_sum: [0.0; N_SLOTS],
                    visited_n: [0; N_SLOTS],
                },
            )
        })
        .collect();
    for h in homes {
        if let Some(tid) = tract_of.get(h.device_id.as_str()) {
            acc.get_mut(tid).expect("tract ids closed").n_homes += 1;
        }
    }
    for r in records {
        let Some(tid) = tract_of.get(r.device_id.as_str()) else { continue };
        let a = acc.get_mut(tid).expect("tract ids closed");
        let slot = r.slot();
        if let Some(d) = r.nearest_store_euclid_m {
            a.nearest_sum[slot] += d;
            a.nearest_n[slot] += 1;
        }
        if let Some(d) = r.mean_visited_euclid_m {
            a.visited_sum[slot] += d;
            a.visited_n[slot] += 1;
        }
    }

    let pop_of: HashMap<&str, Option<f64>> =
        tracts.iter().map(|t| (t.tract_id.as_str(), t.population)).collect();
    let mut out = Vec::with_capacity(acc.len() * N_SLOTS);
    for (tid, a) in &acc {
        let population = pop_of[tid];
        for slot in 0..N_SLOTS {
            let nearest =
                (a.nearest_n[slot] > 0).then(|| a.nearest_sum[slot] / f64::from(a.nearest_n[slot]));
            let visited =
                (a.visited_n[slot] > 0).then(|| a.visited_sum[slot] / f64::from(a.visited_n[slot]));
            out.push(TractAggregate {
                tract_id: tid.to_string(),
                slot,
                population,
                n_sampled_homes: a.n_homes,
                sampling_rate: population
                    .filter(|&p| p > 0.0)
                    .map(|p| f64::from(a.n_homes) / p),
                mean_nearest_euclid_m: nearest,
                mean_visited_euclid_m: visited,
                diff_m: match (visited, nearest) {
                    (Some(v), Some(n)) => Some(v - n),
                    _ => None,
                },
            });
        }
    }
    (out, outside)
}

/// One histogram bin: [lo, hi) in meters; the overflow bin has hi = None.
pub struct HistBin {
    pub lo_m: f64,
    pub hi_m: Option<f64>,
    pub count: u64,
    /// count / (total · width); None for the overflow bin or an empty input.
    pub density: Option<f64>,
}

/// Left-closed right-open bins [k·w, (k+1)·w) covering [0, max_m), plus one
/// overflow bin for values ≥ max_m. Densities integrate to 1 over the
/// finite bins when nothing overflows.
pub fn distance_histogram(values: &[f64], bin_width_m: f64, max_m: f64) -> Vec<HistBin> {
    assert!(bin_width_m > 0.0, "bin width must be positive");
    let n_bins = (max_m / bin_width_m).ceil() as usize;
    let mut counts = vec![0u64; n_bins + 1];
    for &v in values {
        debug_assert!(v >= 0.0, "distances are non-negative");
        let k = (v / bin_width_m).floor() as usize;
        counts[k.min(n_bins)] += 1;
    }
    let total: u64 = counts.iter().sum();
    counts
        .iter()
        .enumerate()
        .map(|(k, &c)| HistBin {
            lo_m: k as f64 * bin_width_m,
            hi_m: (k < n_bins).then(|| (k + 1) as f64 * bin_width_m),
            count: c,
            density: (k < n_bins && total > 0)
                .then(|| c as f64 / (total as f64 * bin_width_m)),
        })
        .collect()
}

/// 2D histogram over (x = nearest-store distance, y = visited-store
/// distance) pairs. Only non-empty cells are returned, sorted by (ix, iy).
pub struct GridCellCount {
    pub ix: i64,
    pub iy: i64,
    pub count: u64,
}

pub fn density_grid(pairs: &[(f64, f64)], cell_m: f64) -> Vec<GridCellCount> {
    assert!(cell_m > 0.0, "cell size must be positive");
    let mut cells: BTreeMap<(i64, i64), u64> = BTreeMap::new();
    for &(x, y) in pairs {
        let ix = (x / cell_m).floor() as i64;
        let iy = (y / cell_m).floor() as i64;
        *cells.entry((ix, iy)).or_insert(0) += 1;
    }
    cells
        .into_iter()
        .map(|((ix, iy), count)| GridCellCount { ix, iy, count })
        .collect()
}

/// Per (device, slot) minimum Euclidean home→store distance over the
/// device's distinct visited stores — the alternate y-axis statistic for
/// the density grid.
pub fn min_visited_euclid(
    visits: &[FoodVisit],
    homes: &[HomeLocation],
    catalog: &OutletCatalog,
) -> HashMap<(String, usize), f64> {
    let home_by_device: HashMap<&str, &HomeLocation> =
        homes.iter().map(|h| (h.device_id.as_str(), h)).collect();
    let pos_by_id: HashMap<u64, crate::geo::LatLon> =
        catalog.outlets.iter().map(|o| (o.outlet_id, o.pos)).collect();
    let mut out: HashMap<(String, usize), f64> = HashMap::new();
    for v in visits {
        let Some(home) = home_by_device.get(v.device_id.as_str()) else { continue };
        let d = haversine(home.pos, pos_by_id[&v.outlet_id]);
        for slot in [v.category.index(), 4] {
            let e = out.entry((v.device_id.clone(), slot)).or_insert(f64::INFINITY);
            if d < *e {
                *e = d;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{LatLon, LocalFrame};
    use crate::home::HomeMethod;
    use crate::outlets::{Category, HomeBased};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // 2022-09-01 00:00:00 UTC; the study defaults run 45 days from here.
    const WINDOW: (i64, i64) = (1_661_990_400, 1_665_878_400);

    fn clock() -> LocalClock {
        LocalClock::new("America/New_York", WINDOW.0, WINDOW.1).unwrap()
    }

    fn visit(device: &str, start_ts: i64, outlet_id: u64, category: Category) -> FoodVisit {
        FoodVisit {
            visit_id: format!("{device}:{start_ts}:{outlet_id}"),
            device_id: device.to_string(),
            outlet_id,
            stay_id: format!("{device}:{start_ts}"),
            start_ts,
            end_ts: start_ts + 1_200,
            distance_m: 25.0,
            home_based: HomeBased::UnknownOrigin,
            category,
            primary_food: true,
        }
    }

    #[test]
    fn saturday_visit_bins() {
        let clock = clock();
        // 2022-09-03 10:05 local (EDT = UTC-4) → 14:05 UTC.
        let ts = 1_662_213_900;
        assert_eq!(clock.local_hour(ts), 10);
        assert!(clock.is_weekend(ts));
        let p = temporal_profile(&[visit("d1", ts, 1, Category::SmallHealthy)], &clock, WINDOW);
        let slot = Category::SmallHealthy.index();
        assert_eq!(p.hourly[slot][1][10], 1);
        assert_eq!(p.hourly[slot][0][10], 0);
        assert_eq!(p.day_of_week[slot][5], 1); // Saturday
        let day = (clock.local_day(ts) - p.first_day) as usize;
        assert_eq!(p.daily[day][slot], 1);
        assert_eq!(p.totals[slot], 1);
        // The All slot mirrors it.
        assert_eq!(p.hourly[4][1][10], 1);
        assert_eq!(p.totals[4], 1);
    }

    #[test]
    fn empty_profile_is_all_zero() {
        let p = temporal_profile(&[], &clock(), WINDOW);
        assert_eq!(p.totals, [0; N_SLOTS]);
        assert!(p.daily.iter().all(|d| d.iter().all(|&c| c == 0)));
        // 45 UTC days, but the UTC window opens at 20:00 local on Aug 31,
        // so the local-day series spans 46 dates.
        assert_eq!(p.daily.len(), 46);
        // Rows exist but shares are undefined.
        assert!(p.rows().iter().all(|r| r.count == 0 && r.share.is_none()));
    }

    #[test]
    fn profile_conserves_totals() {
        let clock = clock();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cats = [
            Category::LargeGrocery,
            Category::BigBox,
            Category::SmallHealthy,
            Category::ProcessedFood,
        ];
        let visits: Vec<FoodVisit> = (0..500)
            .map(|k| {
                let ts = rng.gen_range(WINDOW.0..WINDOW.1 - 3_600);
                visit("d1", ts + k, k as u64 % 7, cats[rng.gen_range(0..4)])
            })
            .collect();
        let p = temporal_profile(&visits, &clock, WINDOW);
        for slot in 0..N_SLOTS {
            let hourly: u64 = p.hourly[slot].iter().flatten().sum();
            let dow: u64 = p.day_of_week[slot].iter().sum();
            let daily: u64 = p.daily.iter().map(|d| d[slot]).sum();
            assert_eq!(hourly, p.totals[slot]);
            assert_eq!(dow, p.totals[slot]);
            assert_eq!(daily, p.totals[slot]);
        }
        assert_eq!(p.totals[4], 500);
        // Shares per (slot, kind) sum to 1 for non-empty slots.
        for slot in 0..N_SLOTS {
            if p.totals[slot] == 0 {
                continue;
            }
            let daily_share: f64 = p
                .rows()
                .iter()
                .filter(|r| r.slot == slot && r.kind == "daily")
                .filter_map(|r| r.share)
                .sum();
            assert!((daily_share - 1.0).abs() < 1e-9);
        }
    }

    fn square_tract(id: &str, f: &LocalFrame, x0: f64, y0: f64, side: f64) -> Tract {
        Tract {
            tract_id: id.to_string(),
            population: Some(1_000.0),
            ring: vec![
                f.unproject(x0, y0),
                f.unproject(x0 + side, y0),
                f.unproject(x0 + side, y0 + side),
                f.unproject(x0, y0 + side),
            ],
        }
    }

    fn home_at(f: &LocalFrame, device: &str, x: f64, y: f64) -> HomeLocation {
        HomeLocation {
            device_id: device.to_string(),
            cell: crate::geo::GridCell { ix: 0, iy: 0 },
            pos: f.unproject(x, y),
            method: HomeMethod::Nighttime,
            support: 30,
        }
    }

    fn record(device: &str, slot: usize, nearest: Option<f64>, visited: Option<f64>) -> MetricsRecord {
        MetricsRecord {
            device_id: device.to_string(),
            category: (slot < 4).then(|| crate::outlets::ALL_CATEGORIES[slot]),
            n_visits: u32::from(visited.is_some()),
            n_unique_stores: u32::from(visited.is_some()),
            mean_visited_euclid_m: visited,
            mean_visited_network_m: None,
            nearest_store_euclid_m: nearest,
            nearest_store_network_m: None,
            home_based_share: None,
        }
    }

    #[test]
    fn two_tract_fixture_hand_means() {
        let f = LocalFrame::new(LatLon::new(30.2, -81.8));
        let mut tract_b = square_tract("B", &f, 2_000.0, 0.0, 2_000.0);
        tract_b.population = None;
        let tracts = vec![square_tract("A", &f, 0.0, 0.0, 2_000.0), tract_b];
        // Devices a,b in tract A; c in B; d outside both.
        let homes = vec![
            home_at(&f, "a", 500.0, 500.0),
            home_at(&f, "b", 1_500.0, 500.0),
            home_at(&f, "c", 3_000.0, 500.0),
            home_at(&f, "d", 9_000.0, 500.0),
        ];
        let records = vec![
            record("a", 0, Some(100.0), Some(400.0)),
            record("b", 0, Some(300.0), None),
            record("c", 0, Some(700.0), Some(900.0)),
            record("d", 0, Some(50.0), Some(60.0)),
        ];
        let (aggs, outside) = tract_aggregates(&records, &homes, &tracts);
        assert_eq!(outside, 1);
        assert_eq!(aggs.len(), 2 * N_SLOTS);
        let a0 = aggs.iter().find(|t| t.tract_id == "A" && t.slot == 0).unwrap();
        assert_eq!(a0.n_sampled_homes, 2);
        assert_eq!(a0.sampling_rate.unwrap(), 2.0 / 1_000.0);
        assert_eq!(a0.mean_nearest_euclid_m.unwrap(), 200.0);
        // Only device a has a visited mean in tract A.
        assert_eq!(a0.mean_visited_euclid_m.unwrap(), 400.0);
        assert_eq!(a0.diff_m.unwrap(), 200.0);
        let b0 = aggs.iter().find(|t| t.tract_id == "B" && t.slot == 0).unwrap();
        assert_eq!(b0.n_sampled_homes, 1);
        assert!(b0.sampling_rate.is_none(), "unknown population");
        assert_eq!(b0.mean_nearest_euclid_m.unwrap(), 700.0);
        // Partition invariant.
        let per_tract: u32 = aggs
            .iter()
            .filter(|t| t.slot == 0)
            .map(|t| t.n_sampled_homes)
            .sum();
        assert_eq!(per_tract + outside, homes.len() as u32);
    }

    #[test]
    fn empty_tract_has_undefined_means() {
        let f = LocalFrame::new(LatLon::new(30.2, -81.8));
        let tracts = vec![square_tract("Z", &f, 0.0, 0.0, 1_000.0)];
        let (aggs, outside) = tract_aggregates(&[], &[], &tracts);
        assert_eq!(outside, 0);
        assert_eq!(aggs.len(), N_SLOTS);
        assert_eq!(aggs[0].n_sampled_homes, 0);
        assert!(aggs[0].mean_nearest_euclid_m.is_none());
        assert_eq!(aggs[0].sampling_rate.unwrap(), 0.0);
    }

    #[test]
    fn sampling_rate_matches_hand_value() {
        let f = LocalFrame::new(LatLon::new(30.2, -81.8));
        let tracts = vec![square_tract("A", &f, 0.0, 0.0, 5_000.0)];
        let homes: Vec<HomeLocation> = (0..104)
            .map(|k| home_at(&f, &format!("d{k:03}"), 100.0 + k as f64 * 10.0, 500.0))
            .collect();
        let (aggs, _) = tract_aggregates(&[], &homes, &tracts);
        assert_eq!(aggs[0].sampling_rate.unwrap(), 0.104);
    }

    #[test]
    fn histogram_spec_example() {
        let bins = distance_histogram(&[100.0, 150.0], 100.0, 2_000.0);
        assert_eq!(bins.len(), 21);
        assert_eq!(bins[1].count, 2);
        assert_eq!(bins[1].lo_m, 100.0);
        assert_eq!(bins[1].hi_m, Some(200.0));
        assert_eq!(bins[0].count, 0);
        // Density integral over finite bins = 1 (no overflow).
        let integral: f64 = bins
            .iter()
            .filter_map(|b| b.density.map(|d| d * 100.0))
            .sum();
        assert!((integral - 1.0).abs() < 1e-12);
    }

    #[test]
    fn histogram_empty_and_overflow() {
        let bins = distance_histogram(&[], 500.0, 20_000.0);
        assert_eq!(bins.len(), 41);
        assert!(bins.iter().all(|b| b.count == 0 && b.density.is_none()));

        let bins = distance_histogram(&[25_000.0, 19_999.999, 20_000.0], 500.0, 20_000.0);
        let overflow = bins.last().unwrap();
        assert!(overflow.hi_m.is_none());
        assert_eq!(overflow.count, 2, "values ≥ max overflow");
        assert_eq!(bins[39].count, 1);
        // Counts conserve exactly.
        let total: u64 = bins.iter().map(|b| b.count).sum();
        assert_eq!(total, 3);
    }

    #[test]
    fn histogram_uniform_sanity() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 10_000usize;
        let values: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 20_000.0).collect();
        let bins = distance_histogram(&values, 1_000.0, 20_000.0);
        assert_eq!(bins.last().unwrap().count, 0);
        let expected = n as f64 / 20.0;
        let chi2: f64 = bins
            .iter()
            .take(20)
            .map(|b| {
                let d = b.count as f64 - expected;
                d * d / expected
            })
            .sum();
        // df = 19; this is a deterministic draw, the bound is generous.
        assert!(chi2 < 45.0, "chi2 {chi2}");
        let total: u64 = bins.iter().map(|b| b.count).sum();
        assert_eq!(total as usize, n);
    }

    #[test]
    fn density_grid_diagonal_and_conservation() {
        let cells = density_grid(&[(1_000.0, 1_000.0)], 500.0);
        assert_eq!(cells.len(), 1);
        assert_eq!((cells[0].ix, cells[0].iy, cells[0].count), (2, 2, 1));

        assert!(density_grid(&[], 500.0).is_empty());

        // Everyone visits exactly the nearest store: all mass on ix == iy.
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let pairs: Vec<(f64, f64)> = (0..300)
            .map(|_| {
                let d = rng.gen::<f64>() * 8_000.0;
                (d, d)
            })
            .collect();
        let cells = density_grid(&pairs, 400.0);
        assert!(cells.iter().all(|c| c.ix == c.iy));
        let total: u64 = cells.iter().map(|c| c.count).sum();
        assert_eq!(total, 300);
        // Sorted by (ix, iy).
        assert!(cells.windows(2).all(|w| (w[0].ix, w[0].iy) < (w[1].ix, w[1].iy)));
    }

    #[test]
    fn min_visited_tracks_smallest_store_distance() {
        let f = LocalFrame::new(LatLon::new(30.2, -81.8));
        let outlets = vec![
            crate::outlets::FoodOutlet {
                outlet_id: 1,
                name: "near".into(),
                pos: f.unproject(1_000.0, 0.0),
                category: Category::LargeGrocery,
                primary_food: true,
                radius_m: 150.0,
            },
            crate::outlets::FoodOutlet {
                outlet_id: 2,
                name: "far".into(),
                pos: f.unproject(4_000.0, 0.0),
                category: Category::LargeGrocery,
                primary_food: true,
                radius_m: 150.0,
            },
        ];
        let catalog = OutletCatalog::new(outlets, 1_000.0);
        let homes = vec![home_at(&f, "d1", 0.0, 0.0)];
        let visits = vec![
            visit("d1", WINDOW.0 + 1_000, 2, Category::LargeGrocery),
            visit("d1", WINDOW.0 + 9_000, 1, Category::LargeGrocery),
        ];
        let mins = min_visited_euclid(&visits, &homes, &catalog);
        let d_near = haversine(homes[0].pos, catalog.outlet(0).pos);
        assert_eq!(mins[&("d1".to_string(), 0)], d_near);
        assert_eq!(mins[&("d1".to_string(), 4)], d_near);
        assert!(!mins.contains_key(&("d1".to_string(), 1)));
    }
}
