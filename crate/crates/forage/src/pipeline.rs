//! Stage functions behind the CLI subcommands. Every stage reads its
//! predecessors' files, writes its own outputs plus a run manifest, and
//! echoes the resolved config — so any stage can be re-run, audited, or
//! diffed in isolation, and a sweep can reuse stay files without repeating
//! detection.

use std::path::{Path, PathBuf};

use crate::clock::LocalClock;
use crate::config::{InputPaths, PipelineConfig, VisitedStat};
use crate::files;
use crate::home::infer_all_homes;
use crate::ingest;
use crate::metrics::{assign_home_based, compute_metrics, summarize_population};
use crate::outlets::{attribute_visits, filter_primary_visits, OutletCatalog};
use crate::routing::RoadGraph;
use crate::stays::{detect_all, filter_food_candidates};
use crate::sweep::{inclusion_comparison, radius_sweep, summary_rows};
use crate::synth::{degrade, evaluate, generate_world};
use crate::{aggregate, Error, Result};

/// Every file a stage may read or write, resolved against the output
/// directory (input overrides honored).
pub struct Layout {
    pub pings: PathBuf,
    pub outlets: PathBuf,
    pub nodes: PathBuf,
    pub edges: PathBuf,
    pub tracts: PathBuf,
    pub truth: PathBuf,
    pub pings_clean: PathBuf,
    pub drop_stats: PathBuf,
    pub homes: PathBuf,
    pub home_coverage: PathBuf,
    pub stays: PathBuf,
    pub visits: PathBuf,
    pub metrics: PathBuf,
    pub summary: PathBuf,
    pub routing_diag: PathBuf,
    pub temporal_profile: PathBuf,
    pub tract_aggregates: PathBuf,
    pub hist_nearest: PathBuf,
    pub hist_visited: PathBuf,
    pub density_grid: PathBuf,
    pub sweep_radius: PathBuf,
    pub sweep_inclusion: PathBuf,
    pub eval_report: PathBuf,
}

impl Layout {
    pub fn new(cfg: &PipelineConfig, out: &Path) -> Layout {
        let r = |p: &Option<PathBuf>, name: &str| InputPaths::resolve(p, out, name);
        Layout {
            pings: r(&cfg.inputs.pings, "pings.csv"),
            outlets: r(&cfg.inputs.outlets, "outlets.csv"),
            nodes: r(&cfg.inputs.nodes, "nodes.csv"),
            edges: r(&cfg.inputs.edges, "edges.csv"),
            tracts: r(&cfg.inputs.tracts, "tracts.geojson"),
            truth: r(&cfg.inputs.truth, "truth.json"),
            pings_clean: out.join("pings_clean.csv"),
            drop_stats: out.join("drop_stats.json"),
            homes: out.join("homes.csv"),
            home_coverage: out.join("home_coverage.json"),
            stays: out.join("stays.csv"),
            visits: out.join("visits.csv"),
            metrics: out.join("metrics.csv"),
            summary: out.join("summary.json"),
            routing_diag: out.join("routing_diag.json"),
            temporal_profile: out.join("temporal_profile.csv"),
            tract_aggregates: out.join("tract_aggregates.csv"),
            hist_nearest: out.join("hist_nearest.csv"),
            hist_visited: out.join("hist_visited.csv"),
            density_grid: out.join("density_grid.csv"),
            sweep_radius: out.join("sweep_radius.csv"),
            sweep_inclusion: out.join("sweep_inclusion.csv"),
            eval_report: out.join("eval_report.json"),
        }
    }
}

/// Fail early with the missing file's name and the stage that produces it.
fn require(path: &Path, produced_by: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::input(path, format!("not found — run the `{produced_by}` stage first")))
    }
}

/// Create the output directory and echo the resolved config into it.
fn prepare(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let echo = out.join("resolved_config.json");
    std::fs::write(&echo, cfg.resolved_json()).map_err(|e| Error::io(&echo, e))
}

fn clock(cfg: &PipelineConfig) -> Result<LocalClock> {
    LocalClock::new(&cfg.study.timezone, cfg.study.window_start, cfg.study.window_end)
}

fn load_catalog(cfg: &PipelineConfig, l: &Layout) -> Result<OutletCatalog> {
    require(&l.outlets, "synth")?;
    let outlets = ingest::load_outlets(&l.outlets)?;
    Ok(OutletCatalog::new(outlets, cfg.attribution.max_query_radius_m))
}

fn load_graph(cfg: &PipelineConfig, l: &Layout) -> Result<RoadGraph> {
    require(&l.nodes, "synth")?;
    require(&l.edges, "synth")?;
    let (nodes, edges) = ingest::load_road_files(&l.nodes, &l.edges)?;
    RoadGraph::build(nodes, edges, cfg.routing.max_snap_m)
}

/// Generate the synthetic world (with any configured degradation applied to
/// the ping stream) and write the exact file set the pipeline ingests.
pub fn run_synth(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    prepare(cfg, out)?;
    let l = Layout::new(cfg, out);
    let mut run = files::StageRun::new("synth", out, cfg.hash());

    let mut world = generate_world(&cfg.synth, &cfg.study)?;
    if cfg.synth.dropout_p > 0.0 || !cfg.synth.blackout_windows.is_empty() {
        world.pings =
            degrade(&world.pings, cfg.synth.dropout_p, &cfg.synth.blackout_windows, cfg.synth.seed);
    }

    run.rows(&l.pings, files::write_pings_csv(&l.pings, &world)?);
    run.rows(&l.outlets, files::write_outlets_csv(&l.outlets, &world.outlets)?);
    run.rows(&l.nodes, files::write_nodes_csv(&l.nodes, &world.nodes)?);
    run.rows(&l.edges, files::write_edges_csv(&l.edges, &world.edges)?);
    run.rows(&l.tracts, files::write_tracts_geojson(&l.tracts, &world.tracts)?);
    run.rows(&l.truth, files::write_truth_json(&l.truth, &world.truth)?);
    run.finish()
}

/// Parse and filter the raw ping stream into clean per-device tracks.
pub fn run_ingest(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    prepare(cfg, out)?;
    let l = Layout::new(cfg, out);
    let mut run = files::StageRun::new("ingest", out, cfg.hash());
    require(&l.pings, "synth")?;
    run.input(&l.pings);

    let (tracks, stats) = ingest::parse_pings(&l.pings, &cfg.study)?;
    log::info!(
        "ingest: {} rows, {} retained across {} devices",
        stats.total,
        stats.retained,
        tracks.len()
    );
    run.rows(&l.pings_clean, files::write_clean_pings_csv(&l.pings_clean, &tracks)?);
    files::write_json(&l.drop_stats, &stats)?;
    run.rows(&l.drop_stats, 1);
    run.finish()
}

/// Infer proxy home locations from the clean tracks.
pub fn run_homes(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    prepare(cfg, out)?;
    let l = Layout::new(cfg, out);
    let mut run = files::StageRun::new("homes", out, cfg.hash());
    require(&l.pings_clean, "ingest")?;
    run.input(&l.pings_clean);

    let tracks = files::read_clean_pings_csv(&l.pings_clean)?;
    let clock = clock(cfg)?;
    let (homes, coverage) = infer_all_homes(&tracks, &cfg.study, &clock, &cfg.home);
    log::info!(
        "homes: {} of {} devices ({} nighttime, {} fallback)",
        homes.len(),
        coverage.n_devices,
        coverage.n_nighttime,
        coverage.n_fallback
    );
    run.rows(&l.homes, files::write_homes_csv(&l.homes, &homes)?);
    files::write_json(&l.home_coverage, &coverage)?;
    run.rows(&l.home_coverage, 1);
    run.finish()
}

/// Detect staypoints and link trip origins.
pub fn run_stays(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    prepare(cfg, out)?;
    let l = Layout::new(cfg, out);
    let mut run = files::StageRun::new("stays", out, cfg.hash());
    require(&l.pings_clean, "ingest")?;
    run.input(&l.pings_clean);

    let tracks = files::read_clean_pings_csv(&l.pings_clean)?;
    let stays = detect_all(&tracks, &cfg.stays);
    log::info!("stays: {} staypoints from {} devices", stays.len(), tracks.len());
    run.rows(&l.stays, files::write_stays_csv(&l.stays, &stays)?);
    run.finish()
}

/// Attribute food-candidate stays to outlets and flag home-based visits.
pub fn run_visits(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    prepare(cfg, out)?;
    let l = Layout::new(cfg, out);
    let mut run = files::StageRun::new("visits", out, cfg.hash());
    require(&l.stays, "stays")?;
    require(&l.homes, "homes")?;
    run.input(&l.stays);
    run.input(&l.homes);
    run.input(&l.outlets);

    let stays = files::read_stays_csv(&l.stays)?;
    let homes = files::read_homes_csv(&l.homes, &cfg.study)?;
    let catalog = load_catalog(cfg, &l)?;
    let food = filter_food_candidates(&stays, cfg.stays.max_food_dur_min);
    let mut visits = attribute_visits(&food, &catalog, None)?;
    assign_home_based(&mut visits, &stays, &homes, cfg.metrics.home_radius_m);
    let visits = filter_primary_visits(&visits, cfg.metrics.primary_only);
    log::info!("visits: {} attributed from {} food-candidate stays", visits.len(), food.len());
    run.rows(&l.visits, files::write_visits_csv(&l.visits, &visits)?);
    run.finish()
}

/// Compute per-device metrics and the population summary.
pub fn run_metrics(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    prepare(cfg, out)?;
    let l = Layout::new(cfg, out);
    let mut run = files::StageRun::new("metrics", out, cfg.hash());
    require(&l.visits, "visits")?;
    require(&l.homes, "homes")?;
    run.input(&l.visits);
    run.input(&l.homes);
    run.input(&l.outlets);
    run.input(&l.nodes);
    run.input(&l.edges);

    let visits = files::read_visits_csv(&l.visits)?;
    // The visit file may come from a run without --primary-only; the metric
    // scope must hold regardless of how the file was produced.
    let visits = filter_primary_visits(&visits, cfg.metrics.primary_only);
    let homes = files::read_homes_csv(&l.homes, &cfg.study)?;
    let catalog = load_catalog(cfg, &l)?;
    let graph = load_graph(cfg, &l)?;
    let (records, diag) = compute_metrics(&visits, &homes, &catalog, &graph, &cfg.metrics);
    let mut summary = summarize_population(&records, &cfg.metrics);
    if cfg.metrics.primary_only {
        crate::metrics::retain_primary_categories(&mut summary, &catalog);
    }
    log::info!(
        "metrics: {} records; routing pairs {} ({} unsnappable, {} unreachable)",
        records.len(),
        diag.n_pairs,
        diag.n_unsnappable,
        diag.n_unreachable
    );
    run.rows(&l.metrics, files::write_metrics_csv(&l.metrics, &records)?);
    files::write_json(&l.summary, &summary)?;
    run.rows(&l.summary, 1);
    files::write_json(&l.routing_diag, &diag)?;
    run.rows(&l.routing_diag, 1);
    run.finish()
}

/// Emit the plot-ready aggregate tables.
pub fn run_aggregate(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    prepare(cfg, out)?;
    let l = Layout::new(cfg, out);
    let mut run = files::StageRun::new("aggregate", out, cfg.hash());
    require(&l.visits, "visits")?;
    require(&l.metrics, "metrics")?;
    require(&l.homes, "homes")?;
    require(&l.tracts, "synth")?;
    run.input(&l.visits);
    run.input(&l.metrics);
    run.input(&l.homes);
    run.input(&l.tracts);

    let visits = files::read_visits_csv(&l.visits)?;
    let records = files::read_metrics_csv(&l.metrics)?;
    let homes = files::read_homes_csv(&l.homes, &cfg.study)?;
    let tracts = ingest::load_tracts(&l.tracts)?;
    let clock = clock(cfg)?;

    let profile =
        aggregate::temporal_profile(&visits, &clock, (cfg.study.window_start, cfg.study.window_end));
    run.rows(&l.temporal_profile, files::write_profile_csv(&l.temporal_profile, &profile.rows())?);

    let (tract_rows, outside) = aggregate::tract_aggregates(&records, &homes, &tracts);
    if outside > 0 {
        log::warn!("aggregate: {outside} homes fall outside every tract");
    }
    run.rows(
        &l.tract_aggregates,
        files::write_tract_aggregates_csv(&l.tract_aggregates, &tract_rows)?,
    );

    // Histograms and the density grid describe the union ("All") records.
    let all_records: Vec<&crate::metrics::MetricsRecord> =
        records.iter().filter(|r| r.category.is_none()).collect();
    let nearest: Vec<f64> = all_records.iter().filter_map(|r| r.nearest_store_euclid_m).collect();
    let a = &cfg.aggregate;
    run.rows(
        &l.hist_nearest,
        files::write_hist_csv(
            &l.hist_nearest,
            &aggregate::distance_histogram(&nearest, a.hist_bin_m, a.hist_max_m),
        )?,
    );

    // The visited statistic is configurable: per-device mean (headline) or
    // minimum (recomputed from the visit file).
    type VisitedOf = Box<dyn Fn(&crate::metrics::MetricsRecord) -> Option<f64>>;
    let visited_of: VisitedOf =
        match a.visited_stat {
            VisitedStat::Mean => Box::new(|r: &crate::metrics::MetricsRecord| r.mean_visited_euclid_m),
            VisitedStat::Min => {
                let catalog = load_catalog(cfg, &l)?;
                run.input(&l.outlets);
                let min_map = aggregate::min_visited_euclid(&visits, &homes, &catalog);
                Box::new(move |r: &crate::metrics::MetricsRecord| {
                    min_map.get(&(r.device_id.clone(), r.slot())).copied()
                })
            }
        };
    let visited: Vec<f64> = all_records.iter().filter_map(|r| visited_of(r)).collect();
    run.rows(
        &l.hist_visited,
        files::write_hist_csv(
            &l.hist_visited,
            &aggregate::distance_histogram(&visited, a.hist_bin_m, a.hist_max_m),
        )?,
    );

    let pairs: Vec<(f64, f64)> = all_records
        .iter()
        .filter(|r| r.n_visits > 0)
        .filter_map(|r| Some((r.nearest_store_euclid_m?, visited_of(r)?)))
        .collect();
    run.rows(
        &l.density_grid,
        files::write_density_grid_csv(
            &l.density_grid,
            &aggregate::density_grid(&pairs, a.density_cell_m),
            a.density_cell_m,
        )?,
    );
    run.finish()
}

/// Run both robustness axes off the shared stay file.
pub fn run_sweep(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    prepare(cfg, out)?;
    let l = Layout::new(cfg, out);
    let mut run = files::StageRun::new("sweep", out, cfg.hash());
    require(&l.stays, "stays")?;
    require(&l.homes, "homes")?;
    run.input(&l.stays);
    run.input(&l.homes);
    run.input(&l.outlets);
    run.input(&l.nodes);
    run.input(&l.edges);

    let stays = files::read_stays_csv(&l.stays)?;
    let homes = files::read_homes_csv(&l.homes, &cfg.study)?;
    let catalog = load_catalog(cfg, &l)?;
    let graph = load_graph(cfg, &l)?;
    let food = filter_food_candidates(&stays, cfg.stays.max_food_dur_min);

    let radius = radius_sweep(
        &food,
        &stays,
        &homes,
        &catalog,
        &graph,
        &cfg.sweep.radii_m,
        &cfg.metrics,
    )?;
    let rows: Vec<_> = radius.results.iter().flat_map(summary_rows).collect();
    run.rows(&l.sweep_radius, files::write_sweep_csv(&l.sweep_radius, &rows)?);

    let inclusion = inclusion_comparison(&food, &stays, &homes, &catalog, &graph, &cfg.metrics)?;
    let mut rows = summary_rows(&inclusion.all);
    rows.extend(summary_rows(&inclusion.primary));
    run.rows(&l.sweep_inclusion, files::write_sweep_csv(&l.sweep_inclusion, &rows)?);
    run.finish()
}

/// Score the pipeline's outputs against the planted ground truth.
pub fn run_evaluate(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    prepare(cfg, out)?;
    let l = Layout::new(cfg, out);
    let mut run = files::StageRun::new("evaluate", out, cfg.hash());
    require(&l.truth, "synth")?;
    require(&l.homes, "homes")?;
    require(&l.stays, "stays")?;
    require(&l.visits, "visits")?;
    run.input(&l.truth);
    run.input(&l.homes);
    run.input(&l.stays);
    run.input(&l.visits);

    let truth = files::read_truth_json(&l.truth)?;
    let homes = files::read_homes_csv(&l.homes, &cfg.study)?;
    let stays = files::read_stays_csv(&l.stays)?;
    let visits = files::read_visits_csv(&l.visits)?;
    let report = evaluate(&truth, &homes, &stays, &visits);
    log::info!(
        "evaluate: home hit rate {:?}, visit recall {:?}, frequency ratio {:?}",
        report.home_hit_rate,
        report.visits.recall,
        report.visit_frequency_ratio
    );
    files::write_json(&l.eval_report, &report)?;
    run.rows(&l.eval_report, 1);
    run.finish()
}

/// The Fig.-1 pipeline: ingest → homes → stays → visits → metrics →
/// aggregate. Synthesis, sweeps, and evaluation stay explicit invocations.
pub fn run_all(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    run_ingest(cfg, out)?;
    run_homes(cfg, out)?;
    run_stays(cfg, out)?;
    run_visits(cfg, out)?;
    run_metrics(cfg, out)?;
    run_aggregate(cfg, out)
}
