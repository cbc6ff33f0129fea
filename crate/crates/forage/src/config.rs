//! Run configuration: a single JSON file covering every stage. Unknown keys
//! are rejected, omitted keys take the documented defaults, and the resolved
//! config is echoed into the output directory for provenance.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{clock, Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub study: StudyConfig,
    pub home: HomeParams,
    pub stays: StayParams,
    pub attribution: AttributionParams,
    pub routing: RoutingParams,
    pub metrics: MetricsParams,
    pub aggregate: AggregateParams,
    pub sweep: SweepParams,
    pub synth: SynthParams,
    pub inputs: InputPaths,
    /// Worker threads. Excluded from the echoed config and the config hash:
    /// outputs must be identical for every worker count.
    #[serde(skip_serializing)]
    pub workers: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    /// Study window [window_start, window_end) in UTC epoch seconds.
    pub window_start: i64,
    pub window_end: i64,
    pub bbox: Bbox,
    /// IANA timezone for all local-time logic (night windows, weekends,
    /// temporal profiles).
    pub timezone: String,
    /// Cell size of the home-inference grid.
    pub grid_cell_m: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            // 2022-09-01 .. 2022-10-16 UTC: a 45-day window.
            window_start: 1_661_990_400,
            window_end: 1_665_878_400,
            bbox: Bbox { lat_min: 30.1, lon_min: -81.9, lat_max: 30.5, lon_max: -81.3 },
            timezone: "America/New_York".to_string(),
            grid_cell_m: 20.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bbox {
    pub lat_min: f64,
    pub lon_min: f64,
    pub lat_max: f64,
    pub lon_max: f64,
}

impl Bbox {
    pub fn contains(&self, p: crate::geo::LatLon) -> bool {
        p.lat >= self.lat_min && p.lat <= self.lat_max && p.lon >= self.lon_min && p.lon <= self.lon_max
    }

    pub fn southwest(&self) -> crate::geo::LatLon {
        crate::geo::LatLon::new(self.lat_min, self.lon_min)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HomeParams {
    pub min_night_pings: u32,
    pub min_weekend_pings: u32,
}

impl Default for HomeParams {
    fn default() -> Self {
        HomeParams { min_night_pings: 10, min_weekend_pings: 10 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StayParams {
    pub dist_threshold_m: f64,
    pub min_dur_min: f64,
    pub max_dur_min: f64,
    /// Stays longer than this are excluded from food-visit attribution.
    pub max_food_dur_min: f64,
    /// Largest inter-ping gap still counting as continuous tracking for
    /// origin linking.
    pub max_track_gap_s: i64,
}

impl Default for StayParams {
    fn default() -> Self {
        StayParams {
            dist_threshold_m: 100.0,
            min_dur_min: 5.0,
            max_dur_min: 720.0,
            max_food_dur_min: 120.0,
            max_track_gap_s: 300,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributionParams {
    /// Bucket sizing bound for the outlet index; queries beyond it fail.
    pub max_query_radius_m: f64,
}

impl Default for AttributionParams {
    fn default() -> Self {
        AttributionParams { max_query_radius_m: 1_000.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoutingParams {
    pub max_snap_m: f64,
}

impl Default for RoutingParams {
    fn default() -> Self {
        RoutingParams { max_snap_m: 500.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsParams {
    /// Restrict analysis to primary food-selling outlets.
    pub primary_only: bool,
    /// Weight visited-distance means by visit rather than by distinct store.
    pub visit_weighted: bool,
    /// A visit is home-based when its origin stay lies within this distance
    /// of the inferred home.
    pub home_radius_m: f64,
}

impl Default for MetricsParams {
    fn default() -> Self {
        MetricsParams { primary_only: false, visit_weighted: false, home_radius_m: 200.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisitedStat {
    Mean,
    Min,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregateParams {
    pub hist_bin_m: f64,
    pub hist_max_m: f64,
    pub density_cell_m: f64,
    /// Which visited-distance statistic feeds the density grid's y-axis.
    pub visited_stat: VisitedStat,
}

impl Default for AggregateParams {
    fn default() -> Self {
        AggregateParams {
            hist_bin_m: 500.0,
            hist_max_m: 20_000.0,
            density_cell_m: 500.0,
            visited_stat: VisitedStat::Mean,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepParams {
    pub radii_m: Vec<f64>,
}

impl Default for SweepParams {
    fn default() -> Self {
        SweepParams { radii_m: vec![50.0, 100.0, 150.0, 200.0] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub seed: u64,
    pub n_devices: u32,
    pub n_outlets_per_category: u32,
    /// Side length of the square synthetic town, anchored inside the bbox.
    pub grid_extent_m: f64,
    pub cadence_s: i64,
    pub noise_sigma_m: f64,
    /// Daily probability of a food trip.
    pub p_trip_weekday: f64,
    pub p_trip_weekend: f64,
    /// Probability a food trip chains a second outlet before returning home.
    pub p_second_stop: f64,
    /// Daily probability of a non-food errand stop.
    pub p_errand: f64,
    /// Trip-probability multiplier on holiday dates.
    pub holiday_trip_factor: f64,
    /// Local dates (YYYY-MM-DD) with suppressed trip rates.
    pub holiday_dates: Vec<String>,
    /// Device share with no pings during the night window (homes only
    /// inferable via the weekend fallback).
    pub frac_night_silent: f64,
    /// Device share emitting pings only while on trips (homes uninferable).
    pub frac_trip_only: f64,
    pub dwell_min_min: f64,
    pub dwell_max_min: f64,
    pub speed_mps: f64,
    /// Road network is a k x k grid of nodes spanning the extent.
    pub road_grid_k: u32,
    /// Tract partition is k x k rectangles over the extent.
    pub tract_grid_k: u32,
    /// Minimum distance of homes and errand spots from every outlet.
    pub clearance_m: f64,
    /// Fraction of pings emitted with accuracy=Other (exercises ingest).
    pub frac_other_accuracy: f64,
    /// Degradation: per-ping keep probability is 1 - dropout_p.
    pub dropout_p: f64,
    /// Degradation: [start, end) UTC windows where all pings vanish.
    pub blackout_windows: Vec<(i64, i64)>,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            seed: 42,
            n_devices: 100,
            n_outlets_per_category: 25,
            grid_extent_m: 20_000.0,
            cadence_s: 60,
            noise_sigma_m: 15.0,
            p_trip_weekday: 0.5,
            p_trip_weekend: 0.75,
            p_second_stop: 0.35,
            p_errand: 0.3,
            holiday_trip_factor: 0.25,
            holiday_dates: vec!["2022-09-05".to_string()],
            frac_night_silent: 0.10,
            frac_trip_only: 0.05,
            dwell_min_min: 15.0,
            dwell_max_min: 60.0,
            speed_mps: 12.0,
            road_grid_k: 30,
            tract_grid_k: 4,
            clearance_m: 250.0,
            frac_other_accuracy: 0.0,
            dropout_p: 0.0,
            blackout_windows: Vec::new(),
        }
    }
}

/// Input file locations; anything unset resolves to the standard name
/// inside the output directory (where `synth` writes them).
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct InputPaths {
    pub pings: Option<PathBuf>,
    pub outlets: Option<PathBuf>,
    pub nodes: Option<PathBuf>,
    pub edges: Option<PathBuf>,
    pub tracts: Option<PathBuf>,
    pub truth: Option<PathBuf>,
}

impl InputPaths {
    pub fn resolve(path: &Option<PathBuf>, out_dir: &Path, default_name: &str) -> PathBuf {
        match path {
            Some(p) => p.clone(),
            None => out_dir.join(default_name),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| Error::Json { path: path.into(), source: e })?;
        cfg.validate()?;
        Ok(cfg)
    }

    // `!(x > 0.0)` rather than `x <= 0.0`: the negated form also rejects NaN,
    // which is exactly what validation wants.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let s = &self.study;
        if s.window_start >= s.window_end {
            return Err(Error::Config("study.window_start must precede window_end".into()));
        }
        if s.bbox.lat_min >= s.bbox.lat_max || s.bbox.lon_min >= s.bbox.lon_max {
            return Err(Error::Config("study.bbox is not well-formed".into()));
        }
        if !(s.grid_cell_m > 0.0) {
            return Err(Error::Config("study.grid_cell_m must be positive".into()));
        }
        s.timezone
            .parse::<chrono_tz::Tz>()
            .map_err(|_| Error::Timezone(s.timezone.clone()))?;
        let st = &self.stays;
        if !(st.dist_threshold_m > 0.0) || !(st.min_dur_min > 0.0) || st.min_dur_min > st.max_dur_min {
            return Err(Error::Config("stays thresholds are inconsistent".into()));
        }
        if st.max_track_gap_s <= 0 {
            return Err(Error::Config("stays.max_track_gap_s must be positive".into()));
        }
        if !(self.attribution.max_query_radius_m > 0.0) {
            return Err(Error::Config("attribution.max_query_radius_m must be positive".into()));
        }
        if !(self.routing.max_snap_m > 0.0) {
            return Err(Error::Config("routing.max_snap_m must be positive".into()));
        }
        if !(self.metrics.home_radius_m > 0.0) {
            return Err(Error::Config("metrics.home_radius_m must be positive".into()));
        }
        if !(self.aggregate.hist_bin_m > 0.0)
            || !(self.aggregate.hist_max_m > 0.0)
            || !(self.aggregate.density_cell_m > 0.0)
        {
            return Err(Error::Config("aggregate bin sizes must be positive".into()));
        }
        if self.sweep.radii_m.is_empty() || self.sweep.radii_m.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::Config("sweep.radii_m must be non-empty and positive".into()));
        }
        if self.sweep.radii_m.iter().any(|r| *r > self.attribution.max_query_radius_m) {
            return Err(Error::Config("sweep radius exceeds attribution.max_query_radius_m".into()));
        }
        let sy = &self.synth;
        for (name, v) in [
            ("p_trip_weekday", sy.p_trip_weekday),
            ("p_trip_weekend", sy.p_trip_weekend),
            ("p_second_stop", sy.p_second_stop),
            ("p_errand", sy.p_errand),
            ("holiday_trip_factor", sy.holiday_trip_factor),
            ("frac_night_silent", sy.frac_night_silent),
            ("frac_trip_only", sy.frac_trip_only),
            ("frac_other_accuracy", sy.frac_other_accuracy),
            ("dropout_p", sy.dropout_p),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("synth.{name} must lie in [0, 1]")));
            }
        }
        if sy.dropout_p >= 1.0 {
            return Err(Error::Config("synth.dropout_p must be < 1".into()));
        }
        if sy.frac_night_silent + sy.frac_trip_only > 1.0 {
            return Err(Error::Config("synth device archetype fractions exceed 1".into()));
        }
        if !(sy.grid_extent_m > 0.0) || !(sy.speed_mps > 0.0) || sy.cadence_s <= 0 {
            return Err(Error::Config("synth extent/speed/cadence must be positive".into()));
        }
        if !(sy.dwell_min_min > 0.0) || sy.dwell_min_min > sy.dwell_max_min {
            return Err(Error::Config("synth dwell range is inconsistent".into()));
        }
        if sy.road_grid_k < 2 || sy.tract_grid_k < 1 {
            return Err(Error::Config("synth grid sizes too small".into()));
        }
        for d in &sy.holiday_dates {
            clock::parse_date_days(d)?;
        }
        // The synthetic town must fit the bbox (with the anchor inset).
        let dlat = sy.grid_extent_m / crate::geo::METERS_PER_DEG_LAT;
        if s.bbox.lat_min + dlat + 0.02 > s.bbox.lat_max {
            return Err(Error::Config("synth.grid_extent_m does not fit study.bbox".into()));
        }
        Ok(())
    }

    /// Pretty JSON echo of the resolved config (workers excluded).
    pub fn resolved_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Hex SHA-256 over the compact resolved config; stamped into manifests.
    pub fn hash(&self) -> String {
        let compact = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(compact.as_bytes());
        let digest = h.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }
}
