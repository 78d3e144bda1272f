//! Hexagonal tessellation of a local study region and its 6-neighbour graph.
//!
//! Cells live on an axial `(q, r)` lattice laid out pointy-top on a local
//! equirectangular projection around an anchor point. Unit `+q` is the
//! pure `+x` (east) step.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};

const EARTH_RADIUS_M: f64 = 6_371_008.8;
const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Maximum distance (degrees) from the projection anchor.
pub const PROJECTION_WINDOW_DEG: f64 = 0.5;

/// Axial offsets in the fixed neighbour order `+q, +q−r, −r, −q, −q+r, +r`.
pub const NEIGHBOR_STENCIL: [(i32, i32); 6] = [(1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1)];

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellIndex {
    pub region_id: String,
    pub q: i32,
    pub r: i32,
}

impl CellIndex {
    pub fn new(region_id: impl Into<String>, q: i32, r: i32) -> Self {
        Self { region_id: region_id.into(), q, r }
    }

    fn offset(&self, dq: i32, dr: i32) -> Self {
        Self { region_id: self.region_id.clone(), q: self.q + dq, r: self.r + dr }
    }
}

/// `region_id:q:r`
impl fmt::Display for CellIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.region_id, self.q, self.r)
    }
}

impl FromStr for CellIndex {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut it = s.rsplitn(3, ':');
        let (Some(r), Some(q), Some(region)) = (it.next(), it.next(), it.next()) else {
            return Err(Error::Parse(format!("cell `{s}` is not region:q:r")));
        };
        let q = q.parse().map_err(|_| Error::Parse(format!("bad q in `{s}`")))?;
        let r = r.parse().map_err(|_| Error::Parse(format!("bad r in `{s}`")))?;
        Ok(Self::new(region, q, r))
    }
}

impl serde::Serialize for CellIndex {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for CellIndex {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Cell size and projection anchor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HexGeometry {
    pub edge_m: f64,
    pub origin_lat: f64,
    pub origin_lon: f64,
}

impl Default for HexGeometry {
    fn default() -> Self {
        Self { edge_m: 2604.0, origin_lat: 0.0, origin_lon: 0.0 }
    }
}

impl HexGeometry {
    pub fn new(edge_m: f64, origin_lat: f64, origin_lon: f64) -> Result<Self> {
        if !(edge_m > 0.0) || !edge_m.is_finite() {
            return Err(invalid!("edge length must be positive, got {edge_m}"));
        }
        Ok(Self { edge_m, origin_lat, origin_lon })
    }

    /// Regular hexagon whose area matches the nominal H3 resolution-7 cell (5.16 km²).
    pub fn equal_area_r7(origin_lat: f64, origin_lon: f64) -> Self {
        let edge = (2.0 * 5.16e6 / (3.0 * SQRT3)).sqrt();
        Self { edge_m: edge, origin_lat, origin_lon }
    }

    pub fn area_m2(&self) -> f64 {
        1.5 * SQRT3 * self.edge_m * self.edge_m
    }

    /// Distance between adjacent centroids.
    pub fn center_spacing_m(&self) -> f64 {
        SQRT3 * self.edge_m
    }

    fn meters_per_deg_lat() -> f64 {
        EARTH_RADIUS_M * std::f64::consts::PI / 180.0
    }

    fn meters_per_deg_lon(&self) -> f64 {
        Self::meters_per_deg_lat() * self.origin_lat.to_radians().cos()
    }

    pub fn project(&self, lat: f64, lon: f64) -> Result<(f64, f64)> {
        let (dlat, dlon) = (lat - self.origin_lat, lon - self.origin_lon);
        if !(dlat.abs() <= PROJECTION_WINDOW_DEG && dlon.abs() <= PROJECTION_WINDOW_DEG) {
            return Err(Error::Range(format!(
                "({lat}, {lon}) is more than {PROJECTION_WINDOW_DEG}° from the anchor ({}, {})",
                self.origin_lat, self.origin_lon
            )));
        }
        Ok((dlon * self.meters_per_deg_lon(), dlat * Self::meters_per_deg_lat()))
    }

    pub fn unproject(&self, x: f64, y: f64) -> (f64, f64) {
        (self.origin_lat + y / Self::meters_per_deg_lat(), self.origin_lon + x / self.meters_per_deg_lon())
    }

    pub fn centroid_xy(&self, q: i32, r: i32) -> (f64, f64) {
        let s = self.edge_m;
        (s * SQRT3 * (q as f64 + r as f64 / 2.0), s * 1.5 * r as f64)
    }

    pub fn centroid_latlon(&self, c: &CellIndex) -> (f64, f64) {
        let (x, y) = self.centroid_xy(c.q, c.r);
        self.unproject(x, y)
    }

    fn dist2(&self, x: f64, y: f64, q: i32, r: i32) -> f64 {
        let (cx, cy) = self.centroid_xy(q, r);
        (x - cx).powi(2) + (y - cy).powi(2)
    }

    /// Nearest cell to a projected point; ties go to the smallest `(q, r)`.
    pub fn cell_at_xy(&self, x: f64, y: f64) -> (i32, i32) {
        let s = self.edge_m;
        let qf = (SQRT3 / 3.0 * x - y / 3.0) / s;
        let rf = (2.0 / 3.0 * y) / s;
        let (q0, r0) = cube_round(qf, rf);
        let mut best = (q0, r0);
        let mut best_d = self.dist2(x, y, q0, r0);
        for (dq, dr) in NEIGHBOR_STENCIL {
            let cand = (q0 + dq, r0 + dr);
            let d = self.dist2(x, y, cand.0, cand.1);
            if d < best_d || (d == best_d && cand < best) {
                best = cand;
                best_d = d;
            }
        }
        best
    }
}

fn cube_round(qf: f64, rf: f64) -> (i32, i32) {
    let sf = -qf - rf;
    let (mut q, mut r, s) = (qf.round(), rf.round(), sf.round());
    let (dq, dr, ds) = ((q - qf).abs(), (r - rf).abs(), (s - sf).abs());
    if dq > dr && dq > ds {
        q = -r - s;
    } else if dr > ds {
        r = -q - s;
    }
    (q as i32, r as i32)
}

/// Cell containing `(lat, lon)`.
pub fn cell_of(lat: f64, lon: f64, geom: &HexGeometry, region_id: &str) -> Result<CellIndex> {
    let (x, y) = geom.project(lat, lon)?;
    let (q, r) = geom.cell_at_xy(x, y);
    Ok(CellIndex::new(region_id, q, r))
}

pub fn neighbors(c: &CellIndex) -> Vec<CellIndex> {
    NEIGHBOR_STENCIL.iter().map(|&(dq, dr)| c.offset(dq, dr)).collect()
}

/// Lattice distance `max(|dq|, |dr|, |dq + dr|)`; `None` across regions.
pub fn hex_distance(a: &CellIndex, b: &CellIndex) -> Option<i32> {
    if a.region_id != b.region_id {
        return None;
    }
    let (dq, dr) = (a.q - b.q, a.r - b.r);
    Some(dq.abs().max(dr.abs()).max((dq + dr).abs()))
}

/// Roughly rectangular `cols × rows` patch of cells anchored at `(0, 0)`.
pub fn rect_patch(region_id: &str, cols: usize, rows: usize) -> Vec<CellIndex> {
    let mut out = Vec::with_capacity(cols * rows);
    for r in 0..rows as i32 {
        let q0 = -(r / 2);
        for q in q0..q0 + cols as i32 {
            out.push(CellIndex::new(region_id, q, r));
        }
    }
    out
}

/// Immutable node set with symmetric ≤6-neighbour adjacency.
///
/// Cells are ordered by `(region_id, q, r)`, so each region occupies a
/// contiguous index range. Regions are never connected to each other.
#[derive(Clone, Debug, PartialEq)]
pub struct GridTopology {
    cells: Vec<CellIndex>,
    adjacency: BTreeMap<CellIndex, Vec<CellIndex>>,
    node_index: BTreeMap<CellIndex, usize>,
    neighbor_idx: Vec<Vec<usize>>,
}

pub fn build_topology<I: IntoIterator<Item = CellIndex>>(cells: I) -> Result<GridTopology> {
    let mut set = BTreeSet::new();
    for c in cells {
        if !set.insert(c.clone()) {
            return Err(invalid!("duplicate cell {c}"));
        }
    }
    if set.is_empty() {
        return Err(invalid!("topology needs at least one cell"));
    }
    let cells: Vec<CellIndex> = set.iter().cloned().collect();
    let node_index: BTreeMap<CellIndex, usize> = cells.iter().cloned().enumerate().map(|(i, c)| (c, i)).collect();
    let mut adjacency = BTreeMap::new();
    let mut neighbor_idx = Vec::with_capacity(cells.len());
    for c in &cells {
        let nb: Vec<CellIndex> = neighbors(c).into_iter().filter(|n| set.contains(n)).collect();
        neighbor_idx.push(nb.iter().map(|n| node_index[n]).collect());
        adjacency.insert(c.clone(), nb);
    }
    Ok(GridTopology { cells, adjacency, node_index, neighbor_idx })
}

impl GridTopology {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> &[CellIndex] {
        &self.cells
    }

    pub fn cell(&self, i: usize) -> &CellIndex {
        &self.cells[i]
    }

    pub fn index_of(&self, c: &CellIndex) -> Option<usize> {
        self.node_index.get(c).copied()
    }

    pub fn contains(&self, c: &CellIndex) -> bool {
        self.node_index.contains_key(c)
    }

    pub fn adjacency(&self, c: &CellIndex) -> Option<&[CellIndex]> {
        self.adjacency.get(c).map(Vec::as_slice)
    }

    pub fn neighbor_indices(&self, i: usize) -> &[usize] {
        &self.neighbor_idx[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbor_idx[i].len()
    }

    /// Contiguous node ranges per region, in region order.
    pub fn region_ranges(&self) -> Vec<(String, Range<usize>)> {
        let mut out: Vec<(String, Range<usize>)> = Vec::new();
        for (i, c) in self.cells.iter().enumerate() {
            match out.last_mut() {
                Some((reg, range)) if *reg == c.region_id => range.end = i + 1,
                _ => out.push((c.region_id.clone(), i..i + 1)),
            }
        }
        out
    }

    pub fn regions(&self) -> Vec<String> {
        self.region_ranges().into_iter().map(|(r, _)| r).collect()
    }

    /// Sub-topology of one region.
    pub fn restrict_to_region(&self, region: &str) -> Result<GridTopology> {
        build_topology(self.cells.iter().filter(|c| c.region_id == region).cloned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(q: i32, r: i32) -> CellIndex {
        CellIndex::new("x", q, r)
    }

    fn geom() -> HexGeometry {
        HexGeometry::new(2604.0, 39.96, -83.0).unwrap()
    }

    #[test]
    fn anchor_maps_to_origin_cell() {
        let g = geom();
        assert_eq!(cell_of(g.origin_lat, g.origin_lon, &g, "x").unwrap(), c(0, 0));
    }

    #[test]
    fn one_spacing_east_is_plus_q() {
        let g = geom();
        let (lat, lon) = g.unproject(g.center_spacing_m(), 0.0);
        assert_eq!(cell_of(lat, lon, &g, "x").unwrap(), c(1, 0));
    }

    #[test]
    fn outside_projection_window_is_range_error() {
        let g = geom();
        assert!(matches!(cell_of(g.origin_lat + 0.6, g.origin_lon, &g, "x"), Err(Error::Range(_))));
    }

    #[test]
    fn nearest_centroid_matches_exhaustive_scan() {
        let g = geom();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let candidates: Vec<(i32, i32)> = (-12..13).flat_map(|q| (-12..13).map(move |r| (q, r))).collect();
        // 10x10-cell patch centred on the anchor
        let half_x = 5.0 * g.center_spacing_m();
        let half_y = 5.0 * 1.5 * g.edge_m;
        for _ in 0..50 {
            let x = rng.random_range(-half_x..half_x);
            let y = rng.random_range(-half_y..half_y);
            let (lat, lon) = g.unproject(x, y);
            let got = cell_of(lat, lon, &g, "x").unwrap();
            let (px, py) = g.project(lat, lon).unwrap();
            let best = candidates
                .iter()
                .min_by(|a, b| {
                    let da = (px - g.centroid_xy(a.0, a.1).0).powi(2) + (py - g.centroid_xy(a.0, a.1).1).powi(2);
                    let db = (px - g.centroid_xy(b.0, b.1).0).powi(2) + (py - g.centroid_xy(b.0, b.1).1).powi(2);
                    da.partial_cmp(&db).unwrap().then(a.cmp(b))
                })
                .unwrap();
            assert_eq!((got.q, got.r), *best);
        }
    }

    #[test]
    fn centroid_roundtrip() {
        let g = geom();
        for q in -4..5 {
            for r in -4..5 {
                let (lat, lon) = g.centroid_latlon(&c(q, r));
                assert_eq!(cell_of(lat, lon, &g, "x").unwrap(), c(q, r));
            }
        }
    }

    #[test]
    fn border_tie_goes_to_smallest() {
        let g = geom();
        // midpoint of (0,0) and (1,0) is equidistant from both
        let (x, _) = g.centroid_xy(1, 0);
        assert_eq!(g.cell_at_xy(x / 2.0, 0.0), (0, 0));
    }

    #[test]
    fn neighbor_order() {
        assert_eq!(neighbors(&c(0, 0)), vec![c(1, 0), c(1, -1), c(0, -1), c(-1, 0), c(-1, 1), c(0, 1)]);
        assert_eq!(neighbors(&c(2, -1)), vec![c(3, -1), c(3, -2), c(2, -2), c(1, -1), c(1, 0), c(2, 0)]);
    }

    #[test]
    fn two_hop_matches_ring_two() {
        for q in -2..=2 {
            for r in -2..=2 {
                let center = c(q, r);
                let mut reach: BTreeSet<CellIndex> = BTreeSet::new();
                for n in neighbors(&center) {
                    reach.extend(neighbors(&n));
                }
                let one: BTreeSet<CellIndex> = neighbors(&center).into_iter().collect();
                let ring2: BTreeSet<CellIndex> =
                    reach.into_iter().filter(|x| *x != center && !one.contains(x)).collect();
                let oracle: BTreeSet<CellIndex> = (-4..=4)
                    .flat_map(|dq| (-4..=4).map(move |dr| (dq, dr)))
                    .map(|(dq, dr)| c(q + dq, r + dr))
                    .filter(|x| hex_distance(&center, x) == Some(2))
                    .collect();
                assert_eq!(ring2, oracle);
                assert_eq!(ring2.len(), 12);
            }
        }
    }

    #[test]
    fn topology_small_cases() {
        let t = build_topology([c(0, 0)]).unwrap();
        assert_eq!(t.len(), 1);
        assert!(t.adjacency(&c(0, 0)).unwrap().is_empty());

        let t = build_topology([c(1, 0), c(0, 0)]).unwrap();
        assert_eq!(t.adjacency(&c(0, 0)).unwrap(), &[c(1, 0)]);
        assert_eq!(t.adjacency(&c(1, 0)).unwrap(), &[c(0, 0)]);

        let mut flower = vec![c(0, 0)];
        flower.extend(neighbors(&c(0, 0)));
        let t = build_topology(flower.clone()).unwrap();
        assert_eq!(t.degree(t.index_of(&c(0, 0)).unwrap()), 6);
        for n in &flower[1..] {
            assert_eq!(t.degree(t.index_of(n).unwrap()), 3);
        }

        assert!(build_topology([c(0, 0), c(0, 0)]).is_err());
        assert!(build_topology(Vec::<CellIndex>::new()).is_err());
    }

    #[test]
    fn regions_stay_disconnected() {
        let mut cells = rect_patch("a", 3, 3);
        cells.extend(rect_patch("b", 3, 3));
        let t = build_topology(cells).unwrap();
        let ranges = t.region_ranges();
        assert_eq!(ranges.len(), 2);
        for (region, range) in ranges {
            for i in range {
                assert!(t.neighbor_indices(i).iter().all(|&j| t.cell(j).region_id == region));
            }
        }
    }

    #[test]
    fn cell_string_roundtrip() {
        let x = CellIndex::new("columbus", -3, 7);
        assert_eq!(x.to_string(), "columbus:-3:7");
        assert_eq!("columbus:-3:7".parse::<CellIndex>().unwrap(), x);
        assert!("nope".parse::<CellIndex>().is_err());
    }

    #[test]
    fn geometry_areas() {
        let g = HexGeometry::default();
        assert!((g.area_m2() / 1e6 - 17.62).abs() < 0.01);
        let r7 = HexGeometry::equal_area_r7(0.0, 0.0);
        assert!((r7.area_m2() / 1e6 - 5.16).abs() / 5.16 < 0.02);
        assert!(HexGeometry::new(0.0, 0.0, 0.0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn topology_symmetric_and_bounded(pts in proptest::collection::btree_set((-4i32..4, -4i32..4), 1..40)) {
            let t = build_topology(pts.iter().map(|&(q, r)| c(q, r))).unwrap();
            for i in 0..t.len() {
                proptest::prop_assert!(t.degree(i) <= 6);
                for &j in t.neighbor_indices(i) {
                    proptest::prop_assert!(t.neighbor_indices(j).contains(&i));
                }
            }
            let again = build_topology(pts.iter().rev().map(|&(q, r)| c(q, r))).unwrap();
            proptest::prop_assert_eq!(t, again);
        }
    }
}
