//! Food-outlet taxonomy and buffer-based visit attribution.
//!
//! Outlets carry a two-dimensional classification: a four-way category and
//! a primary-food flag (a supercenter sells food but is visited for many
//! other reasons; a dollar store is small but not primarily a food seller).
//! A stay becomes a visit when its centroid falls within an outlet's
//! attribution radius; among eligible outlets the nearest wins.

use serde::{Deserialize, Serialize};

use crate::geo::{haversine, CellIndex, LatLon};
use crate::stays::StayPoint;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    LargeGrocery,
    BigBox,
    SmallHealthy,
    ProcessedFood,
}

pub const ALL_CATEGORIES: [Category; 4] = [
    Category::LargeGrocery,
    Category::BigBox,
    Category::SmallHealthy,
    Category::ProcessedFood,
];

impl Category {
    pub fn from_code(code: &str) -> Option<Category> {
        match code {
            "LG" => Some(Category::LargeGrocery),
            "BB" => Some(Category::BigBox),
            "SH" => Some(Category::SmallHealthy),
            "PF" => Some(Category::ProcessedFood),
            _ => None,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            Category::LargeGrocery => "LG",
            Category::BigBox => "BB",
            Category::SmallHealthy => "SH",
            Category::ProcessedFood => "PF",
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Category::LargeGrocery => "LargeGrocery",
            Category::BigBox => "BigBox",
            Category::SmallHealthy => "SmallHealthy",
            Category::ProcessedFood => "ProcessedFood",
        }
    }

    pub fn index(&self) -> usize {
        match self {
            Category::LargeGrocery => 0,
            Category::BigBox => 1,
            Category::SmallHealthy => 2,
            Category::ProcessedFood => 3,
        }
    }
}

/// Default attribution radius per category: buffer sizes scale with the
/// physical footprint of the outlet type.
pub fn category_default_radius_m(category: Category) -> f64 {
    match category {
        Category::LargeGrocery => 150.0,
        Category::BigBox => 200.0,
        Category::SmallHealthy => 50.0,
        Category::ProcessedFood => 50.0,
    }
}

#[derive(Debug, Clone)]
pub struct FoodOutlet {
    pub outlet_id: u64,
    pub name: String,
    pub pos: LatLon,
    pub category: Category,
    pub primary_food: bool,
    /// Attribution radius (category default unless the catalog overrides it).
    pub radius_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HomeBased {
    Yes,
    No,
    UnknownOrigin,
}

impl HomeBased {
    pub fn as_str(&self) -> &'static str {
        match self {
            HomeBased::Yes => "Yes",
            HomeBased::No => "No",
            HomeBased::UnknownOrigin => "UnknownOrigin",
        }
    }

    pub fn parse(s: &str) -> Option<HomeBased> {
        match s {
            "Yes" => Some(HomeBased::Yes),
            "No" => Some(HomeBased::No),
            "UnknownOrigin" => Some(HomeBased::UnknownOrigin),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FoodVisit {
    pub visit_id: String,
    pub device_id: String,
    pub outlet_id: u64,
    pub stay_id: String,
    pub start_ts: i64,
    pub end_ts: i64,
    /// Stay centroid to outlet, meters.
    pub distance_m: f64,
    pub home_based: HomeBased,
    pub category: Category,
    pub primary_food: bool,
}

/// Immutable catalog plus its spatial index.
pub struct OutletCatalog {
    pub outlets: Vec<FoodOutlet>,
    index: CellIndex,
    max_radius_m: f64,
}

impl OutletCatalog {
    pub fn new(outlets: Vec<FoodOutlet>, max_query_radius_m: f64) -> Self {
        let positions: Vec<LatLon> = outlets.iter().map(|o| o.pos).collect();
        OutletCatalog {
            outlets,
            index: CellIndex::build(&positions, max_query_radius_m),
            max_radius_m: max_query_radius_m,
        }
    }

    pub fn outlet(&self, idx: usize) -> &FoodOutlet {
        &self.outlets[idx]
    }

    /// Outlets within `r` meters of `p` (indices into `outlets`).
    pub fn within(&self, p: LatLon, r: f64) -> Result<Vec<usize>> {
        self.index.query_within(p, r)
    }

    pub fn max_query_radius_m(&self) -> f64 {
        self.max_radius_m
    }
}

/// Attribute each stay to at most one outlet: the nearest among those whose
/// effective radius covers the stay centroid; exact distance ties resolve
/// to the smallest outlet id. `radius_override` replaces every per-outlet
/// radius with one uniform value (the robustness-sweep mode).
pub fn attribute_visits(
    stays: &[StayPoint],
    catalog: &OutletCatalog,
    radius_override: Option<f64>,
) -> Result<Vec<FoodVisit>> {
    use rayon::prelude::*;
    let query_r = match radius_override {
        Some(r) => r,
        None => catalog
            .outlets
            .iter()
            .map(|o| o.radius_m)
            .fold(0.0_f64, f64::max),
    };
    // Parallel match, order preserved; visit rows materialize sequentially.
    let matches: Vec<Option<(usize, f64)>> = stays
        .par_iter()
        .map(|s| best_match(s.centroid, catalog, radius_override, query_r))
        .collect::<Result<_>>()?;
    let mut visits = Vec::new();
    for (stay, m) in stays.iter().zip(matches) {
        if let Some((idx, d)) = m {
            let outlet = catalog.outlet(idx);
            visits.push(FoodVisit {
                visit_id: format!("{}:{}", stay.stay_id, outlet.outlet_id),
                device_id: stay.device_id.clone(),
                outlet_id: outlet.outlet_id,
                stay_id: stay.stay_id.clone(),
                start_ts: stay.start_ts,
                end_ts: stay.end_ts,
                distance_m: d,
                home_based: HomeBased::UnknownOrigin,
                category: outlet.category,
                primary_food: outlet.primary_food,
            });
        }
    }
    Ok(visits)
}

fn best_match(
    p: LatLon,
    catalog: &OutletCatalog,
    radius_override: Option<f64>,
    query_r: f64,
) -> Result<Option<(usize, f64)>> {
    let mut best: Option<(usize, f64)> = None;
    for idx in catalog.within(p, query_r)? {
        let outlet = catalog.outlet(idx);
        let eff_r = radius_override.unwrap_or(outlet.radius_m);
        let d = haversine(p, outlet.pos);
        if d > eff_r {
            continue;
        }
        let better = match best {
            None => true,
            Some((bi, bd)) => {
                d < bd || (d == bd && outlet.outlet_id < catalog.outlet(bi).outlet_id)
            }
        };
        if better {
            best = Some((idx, d));
        }
    }
    Ok(best)
}

/// Keep only visits at primary food-selling outlets (identity when the
/// flag is off). Never re-attributes: the primary view is a strict subset.
pub fn filter_primary_visits(visits: &[FoodVisit], primary_only: bool) -> Vec<FoodVisit> {
    if !primary_only {
        return visits.to_vec();
    }
    visits.iter().filter(|v| v.primary_food).cloned().collect()
}
