//! Geometry substrate: great-circle distance, a local equirectangular frame
//! for fixed-size grid cells, a cell-hash spatial index, and point-in-polygon
//! tests with a deterministic boundary tie rule.

use std::collections::HashMap;

use crate::{Error, Result};

/// Shared earth radius for every distance computation and oracle.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Meridian degree approximation used by the local frame.
pub const METERS_PER_DEG_LAT: f64 = 111_320.0;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub fn new(lat: f64, lon: f64) -> Self {
        LatLon { lat, lon }
    }
}

/// Great-circle distance in meters. Symmetric, non-negative, zero for
/// identical inputs.
pub fn haversine(p: LatLon, q: LatLon) -> f64 {
    let dlat = (q.lat - p.lat).to_radians();
    let dlon = (q.lon - p.lon).to_radians();
    let a = (dlat / 2.0).sin().powi(2)
        + p.lat.to_radians().cos() * q.lat.to_radians().cos() * (dlon / 2.0).sin().powi(2);
    let c = 2.0 * a.sqrt().atan2((1.0 - a).sqrt());
    EARTH_RADIUS_M * c
}

/// Grid cell index in a [`LocalFrame`]. Cells are `cell_m`-sized squares,
/// cell (0, 0) has its southwest corner at the frame anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GridCell {
    pub ix: i32,
    pub iy: i32,
}

/// Equirectangular projection anchored at a fixed point. City-scale extents
/// keep distortion far below one grid cell, and the frame is exactly
/// reproducible from (anchor, constants) alone.
#[derive(Debug, Clone, Copy)]
pub struct LocalFrame {
    pub anchor: LatLon,
    m_per_deg_lat: f64,
    m_per_deg_lon: f64,
}

impl LocalFrame {
    pub fn new(anchor: LatLon) -> Self {
        LocalFrame {
            anchor,
            m_per_deg_lat: METERS_PER_DEG_LAT,
            m_per_deg_lon: METERS_PER_DEG_LAT * anchor.lat.to_radians().cos(),
        }
    }

    /// Meters east/north of the anchor.
    pub fn project(&self, p: LatLon) -> (f64, f64) {
        (
            (p.lon - self.anchor.lon) * self.m_per_deg_lon,
            (p.lat - self.anchor.lat) * self.m_per_deg_lat,
        )
    }

    pub fn unproject(&self, x: f64, y: f64) -> LatLon {
        LatLon {
            lat: self.anchor.lat + y / self.m_per_deg_lat,
            lon: self.anchor.lon + x / self.m_per_deg_lon,
        }
    }

    /// Cell containing `p`: floor division of the projected coordinates.
    pub fn to_cell(&self, p: LatLon, cell_m: f64) -> GridCell {
        let (x, y) = self.project(p);
        GridCell {
            ix: (x / cell_m).floor() as i32,
            iy: (y / cell_m).floor() as i32,
        }
    }
}

/// Cell-hash index over a fixed point set. Buckets span slightly more than
/// the configured maximum query radius, so a radius query only has to visit
/// the 3x3 bucket neighborhood.
///
/// `query_within` uses the closed-ball convention (`<= r`), matching every
/// other distance comparison in this crate.
pub struct CellIndex {
    frame: LocalFrame,
    bucket_m: f64,
    max_radius_m: f64,
    cells: HashMap<GridCell, Vec<u32>>,
    positions: Vec<LatLon>,
}

// Margin absorbing the mismatch between frame meters and haversine meters
// at city scale (< 0.5%); oversizing buckets keeps 3x3 coverage sound.
const FRAME_SLACK: f64 = 1.02;

impl CellIndex {
    pub fn build(positions: &[LatLon], max_radius_m: f64) -> Self {
        let anchor = positions
            .iter()
            .fold(None::<LatLon>, |acc, p| match acc {
                None => Some(*p),
                Some(a) => Some(LatLon::new(a.lat.min(p.lat), a.lon.min(p.lon))),
            })
            .unwrap_or(LatLon::new(0.0, 0.0));
        let frame = LocalFrame::new(anchor);
        let bucket_m = max_radius_m * FRAME_SLACK;
        let mut cells: HashMap<GridCell, Vec<u32>> = HashMap::new();
        for (i, p) in positions.iter().enumerate() {
            cells.entry(frame.to_cell(*p, bucket_m)).or_default().push(i as u32);
        }
        CellIndex { frame, bucket_m, max_radius_m, cells, positions: positions.to_vec() }
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn position(&self, idx: usize) -> LatLon {
        self.positions[idx]
    }

    /// Indices of all points with haversine distance `<= r` of `p`,
    /// ascending. Errors when `r` exceeds the radius the buckets were
    /// sized for.
    pub fn query_within(&self, p: LatLon, r: f64) -> Result<Vec<usize>> {
        if r > self.max_radius_m {
            return Err(Error::RadiusExceedsIndex {
                radius_m: r,
                max_radius_m: self.max_radius_m,
            });
        }
        let mut out = Vec::new();
        if self.positions.is_empty() {
            return Ok(out);
        }
        let c = self.frame.to_cell(p, self.bucket_m);
        for ix in (c.ix - 1)..=(c.ix + 1) {
            for iy in (c.iy - 1)..=(c.iy + 1) {
                if let Some(bucket) = self.cells.get(&GridCell { ix, iy }) {
                    for &i in bucket {
                        if haversine(p, self.positions[i as usize]) <= r {
                            out.push(i as usize);
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        Ok(out)
    }

}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Containment {
    Outside,
    Boundary,
    Inside,
}

const BOUNDARY_EPS: f64 = 1e-12;

/// Even-odd containment for a simple ring in lat/lon order. The first and
/// last vertex may or may not coincide; the closing edge is implied.
pub fn ring_contains(p: LatLon, ring: &[LatLon]) -> Containment {
    let n = ring.len();
    if n < 3 {
        return Containment::Outside;
    }
    for i in 0..n {
        let a = ring[i];
        let b = ring[(i + 1) % n];
        if on_segment(p, a, b) {
            return Containment::Boundary;
        }
    }
    let mut inside = false;
    for i in 0..n {
        let a = ring[i];
        let b = ring[(i + 1) % n];
        if (a.lat > p.lat) != (b.lat > p.lat) {
            let t = (p.lat - a.lat) / (b.lat - a.lat);
            let x = a.lon + t * (b.lon - a.lon);
            if p.lon < x {
                inside = !inside;
            }
        }
    }
    if inside {
        Containment::Inside
    } else {
        Containment::Outside
    }
}

fn on_segment(p: LatLon, a: LatLon, b: LatLon) -> bool {
    let cross = (b.lon - a.lon) * (p.lat - a.lat) - (b.lat - a.lat) * (p.lon - a.lon);
    if cross.abs() > BOUNDARY_EPS {
        return false;
    }
    p.lon >= a.lon.min(b.lon) - BOUNDARY_EPS
        && p.lon <= a.lon.max(b.lon) + BOUNDARY_EPS
        && p.lat >= a.lat.min(b.lat) - BOUNDARY_EPS
        && p.lat <= a.lat.max(b.lat) + BOUNDARY_EPS
}

/// Tract containing `p`, treating polygons as closed sets. A point touching
/// several tract boundaries resolves to the lexicographically smallest
/// tract id.
pub fn point_in_tract<'a, I>(p: LatLon, tracts: I) -> Option<&'a str>
where
    I: IntoIterator<Item = (&'a str, &'a [LatLon])>,
{
    let mut hit: Option<&'a str> = None;
    for (id, ring) in tracts {
        if ring_contains(p, ring) != Containment::Outside {
            hit = match hit {
                None => Some(id),
                Some(h) if id < h => Some(id),
                keep => keep,
            };
        }
    }
    hit
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn haversine_identity_is_zero() {
        let p = LatLon::new(30.33, -81.66);
        assert_eq!(haversine(p, p), 0.0);
    }

    #[test]
    fn haversine_one_degree_meridian() {
        // Closed form: pi * R / 180.
        let d = haversine(LatLon::new(0.0, 0.0), LatLon::new(0.0, 1.0));
        assert!((d - 111_194.9).abs() < 0.1, "got {d}");
    }

    #[test]
    fn haversine_antipodal() {
        let d = haversine(LatLon::new(0.0, 0.0), LatLon::new(0.0, 180.0));
        let expected = std::f64::consts::PI * EARTH_RADIUS_M;
        assert!((d - expected).abs() < 1.0, "got {d}, want {expected}");
    }

    #[test]
    fn frame_round_trip_under_one_mm() {
        let frame = LocalFrame::new(LatLon::new(30.2, -81.8));
        let p = LatLon::new(30.31, -81.55);
        let (x, y) = frame.project(p);
        let q = frame.unproject(x, y);
        assert!(haversine(p, q) < 0.001);
    }

    #[test]
    fn to_cell_basics() {
        let frame = LocalFrame::new(LatLon::new(30.2, -81.8));
        assert_eq!(frame.to_cell(frame.anchor, 20.0), GridCell { ix: 0, iy: 0 });

        let east30 = frame.unproject(30.0, 0.0);
        assert_eq!(frame.to_cell(east30, 20.0), GridCell { ix: 1, iy: 0 });

        let north19_99 = frame.unproject(0.0, 19.99);
        assert_eq!(frame.to_cell(north19_99, 20.0), GridCell { ix: 0, iy: 0 });
    }

    #[test]
    fn to_cell_neighboring_cells_differ_by_one() {
        let frame = LocalFrame::new(LatLon::new(30.2, -81.8));
        let p = frame.unproject(105.0, 42.0);
        let east = frame.unproject(105.0 + 20.0, 42.0);
        let c = frame.to_cell(p, 20.0);
        let ce = frame.to_cell(east, 20.0);
        assert_eq!((ce.ix - c.ix, ce.iy - c.iy), (1, 0));
    }

    #[test]
    fn empty_index_queries_empty() {
        let idx = CellIndex::build(&[], 1000.0);
        assert!(idx.query_within(LatLon::new(30.0, -81.0), 500.0).unwrap().is_empty());
    }

    #[test]
    fn query_radius_over_max_errors() {
        let idx = CellIndex::build(&[LatLon::new(30.0, -81.0)], 1000.0);
        assert!(idx.query_within(LatLon::new(30.0, -81.0), 1000.1).is_err());
    }

    #[test]
    fn boundary_point_is_included() {
        let center = LatLon::new(30.3, -81.6);
        let frame = LocalFrame::new(center);
        let target = frame.unproject(173.0, 88.0);
        let idx = CellIndex::build(&[target], 1000.0);
        // Query with the exact haversine distance: closed ball keeps it.
        let r = haversine(center, target);
        assert_eq!(idx.query_within(center, r).unwrap(), vec![0]);
    }

    // Oracle: O(n) haversine scan. query_within must agree on 1,000 random
    // configurations.
    #[test]
    fn query_within_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for round in 0..1000 {
            let n = rng.gen_range(0..100);
            let pts: Vec<LatLon> = (0..n)
                .map(|_| {
                    LatLon::new(
                        30.2 + rng.gen::<f64>() * 0.3,
                        -81.8 + rng.gen::<f64>() * 0.3,
                    )
                })
                .collect();
            let idx = CellIndex::build(&pts, 1000.0);
            let q = LatLon::new(
                30.2 + rng.gen::<f64>() * 0.3,
                -81.8 + rng.gen::<f64>() * 0.3,
            );
            let r = rng.gen::<f64>() * 1000.0;
            let got = idx.query_within(q, r).unwrap();
            let want: Vec<usize> = pts
                .iter()
                .enumerate()
                .filter(|(_, p)| haversine(q, **p) <= r)
                .map(|(i, _)| i)
                .collect();
            assert_eq!(got, want, "round {round}, n {n}, r {r}");
        }
    }

    fn square(lo_lat: f64, lo_lon: f64, size: f64) -> Vec<LatLon> {
        vec![
            LatLon::new(lo_lat, lo_lon),
            LatLon::new(lo_lat, lo_lon + size),
            LatLon::new(lo_lat + size, lo_lon + size),
            LatLon::new(lo_lat + size, lo_lon),
            LatLon::new(lo_lat, lo_lon),
        ]
    }

    #[test]
    fn tract_centroid_and_outside() {
        let ring_a = square(30.0, -82.0, 0.1);
        let tracts = [("A".to_string(), ring_a)];
        let iter = tracts.iter().map(|(id, r)| (id.as_str(), r.as_slice()));
        assert_eq!(point_in_tract(LatLon::new(30.05, -81.95), iter), Some("A"));
        let iter = tracts.iter().map(|(id, r)| (id.as_str(), r.as_slice()));
        assert_eq!(point_in_tract(LatLon::new(31.0, -81.95), iter), None);
    }

    #[test]
    fn shared_edge_resolves_to_smallest_id() {
        // B sits east of A; the shared edge is lon = -81.9.
        let tracts = [
            ("B".to_string(), square(30.0, -81.9, 0.1)),
            ("A".to_string(), square(30.0, -82.0, 0.1)),
        ];
        let on_edge = LatLon::new(30.05, -81.9);
        let iter = tracts.iter().map(|(id, r)| (id.as_str(), r.as_slice()));
        assert_eq!(point_in_tract(on_edge, iter), Some("A"));
    }

    proptest::proptest! {
        #[test]
        fn haversine_symmetric_and_triangle(
            lat_a in -60.0..60.0f64, lon_a in -170.0..170.0f64,
            lat_b in -60.0..60.0f64, lon_b in -170.0..170.0f64,
            lat_c in -60.0..60.0f64, lon_c in -170.0..170.0f64,
        ) {
            let a = LatLon::new(lat_a, lon_a);
            let b = LatLon::new(lat_b, lon_b);
            let c = LatLon::new(lat_c, lon_c);
            let ab = haversine(a, b);
            let ba = haversine(b, a);
            proptest::prop_assert!((ab - ba).abs() <= 1e-6 * ab.max(1.0));
            let ac = haversine(a, c);
            let bc = haversine(b, c);
            proptest::prop_assert!(ac <= ab + bc + 1e-6 * (ab + bc).max(1.0));
        }

        #[test]
        fn cell_translation_consistency(x in -5_000.0..5_000.0f64, y in -5_000.0..5_000.0f64) {
            let frame = LocalFrame::new(LatLon::new(30.2, -81.8));
            let p = frame.unproject(x, y);
            let east = frame.unproject(x + 20.0, y);
            let c = frame.to_cell(p, 20.0);
            let ce = frame.to_cell(east, 20.0);
            proptest::prop_assert!((ce.ix - c.ix).abs() <= 1 && ce.ix >= c.ix);
            proptest::prop_assert_eq!(ce.iy, c.iy);
        }
    }
}
