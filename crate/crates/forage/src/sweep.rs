//! Robustness checks: re-run visit attribution under several uniform radii,
//! and compare the full catalog against primary-food-only inclusion.
//!
//! Both sweeps reuse the already-detected stays — the axes vary attribution
//! and scope only — and re-derive the complete metric set per setting.

use rayon::prelude::*;
use serde::Serialize;

use crate::config::MetricsParams;
use crate::home::HomeLocation;
use crate::metrics::{assign_home_based, compute_metrics, summarize_population, PopulationSummary};
use crate::outlets::{attribute_visits, filter_primary_visits, FoodVisit, OutletCatalog};
use crate::routing::RoadGraph;
use crate::stays::StayPoint;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SweepAxis {
    Radius,
    Inclusion,
}

#[derive(Serialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    /// e.g. "r=100m", "all", "primary_only".
    pub setting: String,
    pub summary: PopulationSummary,
}

/// One flattened row for sweep CSVs: (setting, category, metric, mean, n).
pub struct SweepRow {
    pub setting: String,
    pub category: String,
    pub metric: &'static str,
    pub mean: Option<f64>,
    pub n: u32,
}

pub fn summary_rows(result: &SweepResult) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for cat in &result.summary.categories {
        let mut push = |metric: &'static str, mean: Option<f64>, n: u32| {
            rows.push(SweepRow {
                setting: result.setting.clone(),
                category: cat.category.clone(),
                metric,
                mean,
                n,
            });
        };
        push("n_devices", Some(f64::from(cat.n_devices)), cat.n_devices);
        push("n_visits", cat.n_visits.mean, cat.n_visits.n);
        push("n_unique_stores", cat.n_unique_stores.mean, cat.n_unique_stores.n);
        push("mean_visited_euclid_m", cat.mean_visited_euclid_m.mean, cat.mean_visited_euclid_m.n);
        push(
            "mean_visited_network_m",
            cat.mean_visited_network_m.mean,
            cat.mean_visited_network_m.n,
        );
        push(
            "nearest_store_euclid_m",
            cat.nearest_store_euclid_m.mean,
            cat.nearest_store_euclid_m.n,
        );
        push(
            "nearest_store_network_m",
            cat.nearest_store_network_m.mean,
            cat.nearest_store_network_m.n,
        );
        push("home_based_share", cat.home_based_share.mean, cat.home_based_share.n);
    }
    rows
}

/// Run the full metric computation for one attributed visit set.
#[allow(clippy::too_many_arguments)]
fn setting_result(
    axis: SweepAxis,
    setting: String,
    mut visits: Vec<FoodVisit>,
    stays: &[StayPoint],
    homes: &[HomeLocation],
    catalog: &OutletCatalog,
    graph: &RoadGraph,
    params: &MetricsParams,
) -> (SweepResult, Vec<FoodVisit>) {
    assign_home_based(&mut visits, stays, homes, params.home_radius_m);
    let (records, _) = compute_metrics(&visits, homes, catalog, graph, params);
    let summary = summarize_population(&records, params);
    (SweepResult { axis, setting, summary }, visits)
}

pub struct RadiusSweepOutcome {
    pub results: Vec<SweepResult>,
    /// The attributed visits per radius, index-aligned with `results`.
    pub visit_sets: Vec<Vec<FoodVisit>>,
}

/// Attribute the same food-candidate stays under each uniform radius and
/// recompute the population summary. `stays` is the full stay set (origin
/// lookups); `food_stays` the attribution candidates.
pub fn radius_sweep(
    food_stays: &[StayPoint],
    stays: &[StayPoint],
    homes: &[HomeLocation],
    catalog: &OutletCatalog,
    graph: &RoadGraph,
    radii_m: &[f64],
    params: &MetricsParams,
) -> Result<RadiusSweepOutcome> {
    let params = MetricsParams { primary_only: false, ..params.clone() };
    let settings: Vec<(SweepResult, Vec<FoodVisit>)> = radii_m
        .par_iter()
        .map(|&r| {
            let visits = attribute_visits(food_stays, catalog, Some(r))?;
            Ok(setting_result(
                SweepAxis::Radius,
                format!("r={}m", r),
                visits,
                stays,
                homes,
                catalog,
                graph,
                &params,
            ))
        })
        .collect::<Result<_>>()?;
    let (results, visit_sets) = settings.into_iter().unzip();
    Ok(RadiusSweepOutcome { results, visit_sets })
}

pub struct InclusionOutcome {
    pub all: SweepResult,
    pub primary: SweepResult,
    pub visits_all: Vec<FoodVisit>,
    pub visits_primary: Vec<FoodVisit>,
}

/// Compare default-radius attribution over the full catalog against the
/// primary-food-only scope. The primary summary drops category columns with
/// no primary outlet (the union column always stays).
pub fn inclusion_comparison(
    food_stays: &[StayPoint],
    stays: &[StayPoint],
    homes: &[HomeLocation],
    catalog: &OutletCatalog,
    graph: &RoadGraph,
    params: &MetricsParams,
) -> Result<InclusionOutcome> {
    let visits = attribute_visits(food_stays, catalog, None)?;
    let visits_primary = filter_primary_visits(&visits, true);

    let all_params = MetricsParams { primary_only: false, ..params.clone() };
    let (all, visits_all) = setting_result(
        SweepAxis::Inclusion,
        "all".to_string(),
        visits,
        stays,
        homes,
        catalog,
        graph,
        &all_params,
    );

    let primary_params = MetricsParams { primary_only: true, ..params.clone() };
    let (mut primary, visits_primary) = setting_result(
        SweepAxis::Inclusion,
        "primary_only".to_string(),
        visits_primary,
        stays,
        homes,
        catalog,
        graph,
        &primary_params,
    );
    crate::metrics::retain_primary_categories(&mut primary.summary, catalog);

    Ok(InclusionOutcome { all, primary, visits_all, visits_primary })
}
