//! FK cluster decomposition of a bond configuration.
//!
//! [`label`] is the cheap path: cluster ids, sizes and ghost flags. It is what
//! the hot loops use. [`decompose`] additionally records member lists,
//! unwrapped coordinates, bounding boxes, Euclidean diameters and torus
//! winding, and keeps the bonds so outer loops can be traced afterwards.

use crate::bits::BitVec;
use crate::error::{invalid, Error, Result};
use crate::lattice::{Boundary, Direction, LatticeGeometry};
use crate::sampler::BondConfiguration;

/// Disjoint-set forest with path halving and union by size.
#[derive(Clone, Debug, Default)]
pub struct UnionFind {
    parent: Vec<u32>,
    size: Vec<u32>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        let mut uf = Self::default();
        uf.reset(n);
        uf
    }

    pub fn reset(&mut self, n: usize) {
        self.parent.clear();
        self.parent.extend(0..n as u32);
        self.size.clear();
        self.size.resize(n, 1);
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    #[inline]
    pub fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let grand = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = grand;
            x = grand;
        }
        x
    }

    /// Returns true when two distinct sets were merged.
    #[inline]
    pub fn union(&mut self, a: u32, b: u32) -> bool {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra == rb {
            return false;
        }
        let (big, small) = if self.size[ra as usize] >= self.size[rb as usize] {
            (ra, rb)
        } else {
            (rb, ra)
        };
        self.parent[small as usize] = big;
        self.size[big as usize] += self.size[small as usize];
        true
    }

    pub fn set_size(&mut self, x: u32) -> u32 {
        let r = self.find(x);
        self.size[r as usize]
    }
}

/// Union-find that also tracks the lattice displacement of each node from its
/// parent, so clusters can be unwrapped on a torus and winding detected.
#[derive(Clone, Debug)]
struct OffsetUnionFind {
    parent: Vec<u32>,
    size: Vec<u32>,
    // u(node) - u(parent) in lattice units.
    offset: Vec<(i32, i32)>,
    wraps: Vec<bool>,
}

impl OffsetUnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n as u32).collect(),
            size: vec![1; n],
            offset: vec![(0, 0); n],
            wraps: vec![false; n],
        }
    }

    /// Root of `x` and the displacement u(x) - u(root), with full path
    /// compression.
    fn find(&mut self, x: u32) -> (u32, (i32, i32)) {
        let mut root = x;
        let mut acc = (0, 0);
        while self.parent[root as usize] != root {
            let o = self.offset[root as usize];
            acc = (acc.0 + o.0, acc.1 + o.1);
            root = self.parent[root as usize];
        }
        // Second pass: point every node on the path at the root.
        let mut node = x;
        let mut rem = acc;
        while self.parent[node as usize] != root && node != root {
            let next = self.parent[node as usize];
            let o = self.offset[node as usize];
            self.parent[node as usize] = root;
            self.offset[node as usize] = rem;
            rem = (rem.0 - o.0, rem.1 - o.1);
            node = next;
        }
        (root, acc)
    }

    /// Join `a` and `b` where u(b) - u(a) = `step`.
    fn union(&mut self, a: u32, b: u32, step: (i32, i32)) {
        let (ra, da) = self.find(a);
        let (rb, db) = self.find(b);
        if ra == rb {
            if (db.0 - da.0, db.1 - da.1) != step {
                self.wraps[ra as usize] = true;
            }
            return;
        }
        // u(rb) - u(ra) = da + step - db
        let d = (da.0 + step.0 - db.0, da.1 + step.1 - db.1);
        let (big, small, off) = if self.size[ra as usize] >= self.size[rb as usize] {
            (ra, rb, d)
        } else {
            (rb, ra, (-d.0, -d.1))
        };
        self.parent[small as usize] = big;
        self.offset[small as usize] = off;
        self.size[big as usize] += self.size[small as usize];
        self.wraps[big as usize] |= self.wraps[small as usize];
    }
}

/// Cluster ids per site plus sizes and ghost flags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Labels {
    /// Cluster index per site; clusters are numbered in order of their
    /// smallest site index.
    pub id: Vec<u32>,
    pub sizes: Vec<u32>,
    /// Whether each cluster is joined to the ghost site.
    pub ghost: Vec<bool>,
}

impl Labels {
    pub fn n_clusters(&self) -> usize {
        self.sizes.len()
    }

    pub fn n_ghost_free_clusters(&self) -> usize {
        self.ghost.iter().filter(|&&g| !g).count()
    }

    #[inline]
    pub fn connected(&self, x: u32, y: u32) -> bool {
        self.id[x as usize] == self.id[y as usize]
    }

    /// Number of sites of each cluster among `sites`, as (cluster, count)
    /// pairs in cluster order. Clusters with no site in the list are omitted.
    pub fn restricted_sizes_in(&self, sites: &[u32]) -> Vec<(u32, u32)> {
        let mut counts: Vec<u32> = vec![0; self.n_clusters()];
        let mut touched = Vec::new();
        for &s in sites {
            let c = self.id[s as usize];
            if counts[c as usize] == 0 {
                touched.push(c);
            }
            counts[c as usize] += 1;
        }
        touched.sort_unstable();
        touched.into_iter().map(|c| (c, counts[c as usize])).collect()
    }

    /// `sum_i |C_i ∩ sites|^2`.
    pub fn sum_squared_restricted(&self, sites: &[u32], scratch: &mut Vec<u32>) -> u64 {
        scratch.clear();
        scratch.resize(self.n_clusters(), 0);
        let mut total = 0u64;
        for &s in sites {
            let c = &mut scratch[self.id[s as usize] as usize];
            // (n+1)^2 - n^2 = 2n + 1
            total += 2 * *c as u64 + 1;
            *c += 1;
        }
        total
    }
}

impl AsRef<Labels> for Labels {
    fn as_ref(&self) -> &Labels {
        self
    }
}

pub fn label(geom: &LatticeGeometry, bonds: &BondConfiguration) -> Labels {
    let mut uf = UnionFind::new(geom.n_sites());
    label_with(geom, bonds, &mut uf)
}

/// [`label`] reusing a caller-owned union-find.
pub fn label_with(geom: &LatticeGeometry, bonds: &BondConfiguration, uf: &mut UnionFind) -> Labels {
    let n = geom.n_sites();
    uf.reset(n);
    for b in bonds.open.iter_ones() {
        let bond = geom.bond(b);
        uf.union(bond.a, bond.b);
    }
    let mut id = vec![u32::MAX; n];
    let mut root_id = vec![u32::MAX; n];
    let mut sizes = Vec::new();
    let mut ghost = Vec::new();
    for s in 0..n as u32 {
        let r = uf.find(s) as usize;
        if root_id[r] == u32::MAX {
            root_id[r] = sizes.len() as u32;
            sizes.push(0);
            ghost.push(false);
        }
        let c = root_id[r];
        id[s as usize] = c;
        sizes[c as usize] += 1;
    }
    if !bonds.ghost_open.is_empty() {
        for s in bonds.ghost_open.iter_ones() {
            ghost[id[s] as usize] = true;
        }
    }
    Labels { id, sizes, ghost }
}

/// Axis-aligned bounding box in unwrapped lattice coordinates (inclusive).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundingBox {
    pub min_x: i32,
    pub min_y: i32,
    pub max_x: i32,
    pub max_y: i32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cluster {
    start: usize,
    pub size: usize,
    pub bbox: BoundingBox,
    /// Largest Euclidean distance between two member sites, in continuum
    /// units. Clusters winding around the torus report the torus extent.
    pub diameter: f64,
    pub ghost_connected: bool,
    pub wraps: bool,
}

#[derive(Clone, Debug)]
pub struct ClusterDecomposition {
    labels: Labels,
    clusters: Vec<Cluster>,
    members: Vec<u32>,
    unwrapped: Vec<(i32, i32)>,
    open: BitVec,
    spacing: f64,
    extent: f64,
}

impl AsRef<Labels> for ClusterDecomposition {
    fn as_ref(&self) -> &Labels {
        &self.labels
    }
}

impl ClusterDecomposition {
    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn cluster(&self, i: usize) -> &Cluster {
        &self.clusters[i]
    }

    pub fn cluster_id(&self, site: u32) -> usize {
        self.labels.id[site as usize] as usize
    }

    /// Member sites of cluster `i` in increasing index order.
    pub fn sites(&self, i: usize) -> &[u32] {
        let c = &self.clusters[i];
        &self.members[c.start..c.start + c.size]
    }

    /// Site coordinates in the unwrapped frame of its cluster.
    pub fn unwrapped(&self, site: u32) -> (i32, i32) {
        self.unwrapped[site as usize]
    }

    /// Diameter of the cluster's outer loop as used by the cutoff field:
    /// cluster diameter plus one lattice spacing. Lies between the cluster
    /// diameter and the exact loop diameter bound.
    pub fn loop_diameter_proxy(&self, i: usize) -> f64 {
        let c = &self.clusters[i];
        if c.wraps {
            self.extent
        } else {
            c.diameter + self.spacing
        }
    }

    pub fn bond_open(&self, bond: usize) -> bool {
        self.open.get(bond)
    }
}

pub fn decompose(geom: &LatticeGeometry, bonds: &BondConfiguration) -> ClusterDecomposition {
    let n = geom.n_sites();
    let mut uf = OffsetUnionFind::new(n);
    for b in bonds.open.iter_ones() {
        let bond = geom.bond(b);
        uf.union(bond.a, bond.b, bond.step());
    }

    let mut id = vec![u32::MAX; n];
    let mut root_id = vec![u32::MAX; n];
    let mut sizes: Vec<u32> = Vec::new();
    let mut wraps = Vec::new();
    let mut unwrapped = vec![(0i32, 0i32); n];
    for s in 0..n as u32 {
        let (r, off) = uf.find(s);
        if root_id[r as usize] == u32::MAX {
            root_id[r as usize] = sizes.len() as u32;
            sizes.push(0);
            wraps.push(uf.wraps[r as usize]);
        }
        let c = root_id[r as usize];
        id[s as usize] = c;
        sizes[c as usize] += 1;
        let (rx, ry) = geom.coords(r);
        unwrapped[s as usize] = (rx as i32 + off.0, ry as i32 + off.1);
    }
    let mut ghost = vec![false; sizes.len()];
    for s in bonds.ghost_open.iter_ones() {
        ghost[id[s] as usize] = true;
    }

    // Counting sort of sites by cluster.
    let mut starts = Vec::with_capacity(sizes.len());
    let mut acc = 0usize;
    for &sz in &sizes {
        starts.push(acc);
        acc += sz as usize;
    }
    let mut cursor = starts.clone();
    let mut members = vec![0u32; n];
    for s in 0..n as u32 {
        let c = id[s as usize] as usize;
        members[cursor[c]] = s;
        cursor[c] += 1;
    }

    let spacing = geom.spacing();
    let extent = match geom.boundary() {
        Boundary::Torus => geom.extent(),
        Boundary::Free => f64::INFINITY,
    };
    let mut scratch = DiameterScratch::default();
    let clusters = sizes
        .iter()
        .enumerate()
        .map(|(c, &sz)| {
            let sites = &members[starts[c]..starts[c] + sz as usize];
            let pts = sites.iter().map(|&s| unwrapped[s as usize]);
            let bbox = bounding_box(pts.clone());
            let diameter = if wraps[c] {
                extent
            } else {
                (scratch.diameter_sq(pts, bbox) as f64).sqrt() * spacing
            };
            Cluster {
                start: starts[c],
                size: sz as usize,
                bbox,
                diameter,
                ghost_connected: ghost[c],
                wraps: wraps[c],
            }
        })
        .collect();

    ClusterDecomposition {
        labels: Labels { id, sizes, ghost },
        clusters,
        members,
        unwrapped,
        open: bonds.open.clone(),
        spacing,
        extent,
    }
}

fn bounding_box(pts: impl Iterator<Item = (i32, i32)>) -> BoundingBox {
    let mut b = BoundingBox { min_x: i32::MAX, min_y: i32::MAX, max_x: i32::MIN, max_y: i32::MIN };
    for (x, y) in pts {
        b.min_x = b.min_x.min(x);
        b.min_y = b.min_y.min(y);
        b.max_x = b.max_x.max(x);
        b.max_y = b.max_y.max(y);
    }
    b
}

#[derive(Default)]
struct DiameterScratch {
    row_min: Vec<i32>,
    row_max: Vec<i32>,
    candidates: Vec<(i64, i64)>,
    hull: Vec<(i64, i64)>,
}

impl DiameterScratch {
    /// Squared diameter of a point set: extreme points of each row, their
    /// convex hull, then all hull pairs.
    fn diameter_sq(&mut self, pts: impl Iterator<Item = (i32, i32)>, bbox: BoundingBox) -> i64 {
        let h = (bbox.max_y - bbox.min_y + 1) as usize;
        self.row_min.clear();
        self.row_min.resize(h, i32::MAX);
        self.row_max.clear();
        self.row_max.resize(h, i32::MIN);
        for (x, y) in pts {
            let r = (y - bbox.min_y) as usize;
            self.row_min[r] = self.row_min[r].min(x);
            self.row_max[r] = self.row_max[r].max(x);
        }
        self.candidates.clear();
        for r in 0..h {
            if self.row_min[r] == i32::MAX {
                continue;
            }
            let y = (r as i32 + bbox.min_y) as i64;
            self.candidates.push((self.row_min[r] as i64, y));
            if self.row_max[r] != self.row_min[r] {
                self.candidates.push((self.row_max[r] as i64, y));
            }
        }
        convex_hull(&mut self.candidates, &mut self.hull);
        max_pair_distance_sq(&self.hull)
    }
}

/// Andrew's monotone chain; collinear points dropped.
fn convex_hull(points: &mut [(i64, i64)], hull: &mut Vec<(i64, i64)>) {
    hull.clear();
    points.sort_unstable();
    if points.len() <= 2 {
        hull.extend_from_slice(points);
        return;
    }
    let cross = |o: (i64, i64), a: (i64, i64), b: (i64, i64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    for &p in points.iter() {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in points.iter().rev().skip(1) {
        while hull.len() >= lower && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
}

fn max_pair_distance_sq(points: &[(i64, i64)]) -> i64 {
    let mut best = 0;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            let d = (a.0 - b.0).pow(2) + (a.1 - b.1).pow(2);
            best = best.max(d);
        }
    }
    best
}

/// Per-cluster count of sites inside `region`, omitting clusters with none.
/// The restriction need not be connected.
pub fn restricted_size(
    labels: &impl AsRef<Labels>,
    geom: &LatticeGeometry,
    region: &crate::lattice::Region,
) -> Vec<(u32, u32)> {
    labels.as_ref().restricted_sizes_in(&geom.sites_in_region(region))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoopKind {
    /// Lattice sites immediately inside (outer boundary of a cluster).
    Type1SitesInside,
    /// Lattice sites immediately outside (boundary of a hole).
    Type2SitesOutside,
}

/// Closed interface on the medial lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct Loop {
    /// Medial vertices (bond midpoints) in half-spacing units, in the
    /// cluster's unwrapped frame. Cyclic: the last vertex connects back to
    /// the first.
    pub medial: Vec<(i32, i32)>,
    pub spacing: f64,
    pub diameter: f64,
    pub kind: LoopKind,
}

impl Loop {
    /// Number of medial edges.
    pub fn length(&self) -> usize {
        self.medial.len()
    }

    /// Continuum polyline with the first point repeated at the end.
    pub fn polyline(&self) -> Vec<(f64, f64)> {
        let half = 0.5 * self.spacing;
        let mut pts: Vec<(f64, f64)> =
            self.medial.iter().map(|&(x, y)| (x as f64 * half, y as f64 * half)).collect();
        if let Some(&first) = pts.first() {
            pts.push(first);
        }
        pts
    }

    /// Twice the signed area, in half-spacing units squared.
    pub fn signed_area2(&self) -> i64 {
        let n = self.medial.len();
        (0..n)
            .map(|i| {
                let (x0, y0) = self.medial[i];
                let (x1, y1) = self.medial[(i + 1) % n];
                x0 as i64 * y1 as i64 - x1 as i64 * y0 as i64
            })
            .sum()
    }

    /// Winding number of the loop around a point given in unwrapped lattice
    /// coordinates.
    pub fn winding_number(&self, point: (i32, i32)) -> i32 {
        let p = (2 * point.0 as i64, 2 * point.1 as i64);
        let n = self.medial.len();
        let mut w = 0;
        for i in 0..n {
            let a = (self.medial[i].0 as i64, self.medial[i].1 as i64);
            let b = (self.medial[(i + 1) % n].0 as i64, self.medial[(i + 1) % n].1 as i64);
            let cross = (b.0 - a.0) * (p.1 - a.1) - (p.0 - a.0) * (b.1 - a.1);
            if a.1 <= p.1 {
                if b.1 > p.1 && cross > 0 {
                    w += 1;
                }
            } else if b.1 <= p.1 && cross < 0 {
                w -= 1;
            }
        }
        w
    }
}

/// Trace the type-1 loop around cluster `index`: the medial-lattice interface
/// with the cluster's sites immediately inside, oriented counterclockwise.
///
/// The walk state is a site and a direction, meaning the current medial
/// vertex is the midpoint of that site's bond in that direction with the site
/// on the left. Through an open bond the walk crosses to the neighbour and
/// continues around it; at a closed (or missing) bond it turns around the
/// current site.
pub fn trace_outer_loop(
    dec: &ClusterDecomposition,
    geom: &LatticeGeometry,
    index: usize,
) -> Result<Loop> {
    if index >= dec.n_clusters() {
        return Err(invalid(format!("cluster index {index} out of range")));
    }
    let cluster = dec.cluster(index);
    if cluster.wraps {
        return Err(Error::WrappingCluster { extent: dec.extent });
    }
    // Lowest row, leftmost site: its south side faces the exterior.
    let start_site = *dec
        .sites(index)
        .iter()
        .min_by_key(|&&s| {
            let (x, y) = dec.unwrapped(s);
            (y, x)
        })
        .expect("clusters are nonempty");
    let start = (start_site, Direction::South);
    let mut site = start_site;
    let mut pos = dec.unwrapped(start_site);
    let mut dir = Direction::South;
    let mut medial = Vec::new();
    let limit = 4 * cluster.size + 4;
    loop {
        let (dx, dy) = dir.offset();
        medial.push((2 * pos.0 + dx, 2 * pos.1 + dy));
        let open = geom.bond_toward(site, dir).is_some_and(|b| dec.bond_open(b));
        if open {
            site = geom.neighbor(site, dir).expect("open bond has a neighbour");
            pos = (pos.0 + dx, pos.1 + dy);
            dir = dir.turn(3);
        } else {
            dir = dir.turn(1);
        }
        if (site, dir) == start {
            break;
        }
        if medial.len() > limit {
            return Err(invalid("loop trace did not close"));
        }
    }
    let mut hull = Vec::new();
    let mut pts: Vec<(i64, i64)> = medial.iter().map(|&(x, y)| (x as i64, y as i64)).collect();
    convex_hull(&mut pts, &mut hull);
    let diameter = (max_pair_distance_sq(&hull) as f64).sqrt() * 0.5 * dec.spacing;
    let mut lp = Loop { medial, spacing: dec.spacing, diameter, kind: LoopKind::Type1SitesInside };
    if lp.signed_area2() < 0 {
        lp.kind = LoopKind::Type2SitesOutside;
    }
    Ok(lp)
}

/// Number of distinct clusters with a site at distance `< r1` from `z` and a
/// site at distance `> r2` (minimal-image distance on a torus).
pub fn count_crossing_clusters(
    labels: &impl AsRef<Labels>,
    geom: &LatticeGeometry,
    z: (f64, f64),
    r1: f64,
    r2: f64,
) -> Result<usize> {
    if !(0.0 < r1 && r1 < r2) {
        return Err(invalid(format!("need 0 < r1 < r2, got r1 = {r1}, r2 = {r2}")));
    }
    let labels = labels.as_ref();
    // bit 0: touches the inner disc, bit 1: reaches beyond r2.
    let mut mark = vec![0u8; labels.n_clusters()];
    for s in 0..geom.n_sites() as u32 {
        let d = geom.distance_to_point(s, z);
        let c = labels.id[s as usize] as usize;
        if d < r1 {
            mark[c] |= 1;
        } else if d > r2 {
            mark[c] |= 2;
        }
    }
    Ok(mark.iter().filter(|&&m| m == 3).count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Region;
    use proptest::prelude::*;

    fn bonds_from(geom: &LatticeGeometry, open: &[usize]) -> BondConfiguration {
        let mut b = BondConfiguration::closed(geom, false);
        for &i in open {
            b.open.set(i, true);
        }
        b
    }

    fn bond_between(geom: &LatticeGeometry, s: u32, t: u32) -> usize {
        geom.bonds()
            .iter()
            .position(|b| (b.a == s && b.b == t) || (b.a == t && b.b == s))
            .unwrap()
    }

    #[test]
    fn empty_and_full_configurations() {
        let g = LatticeGeometry::new(5, Boundary::Torus, 1.0).unwrap();
        let none = BondConfiguration::closed(&g, false);
        let d = decompose(&g, &none);
        assert_eq!(d.n_clusters(), 25);
        assert!(d.clusters().iter().all(|c| c.size == 1 && c.diameter == 0.0));

        let all = BondConfiguration { open: BitVec::ones(g.n_bonds()), ghost_open: BitVec::zeros(0) };
        let d = decompose(&g, &all);
        assert_eq!(d.n_clusters(), 1);
        assert_eq!(d.cluster(0).size, 25);
        assert!(d.cluster(0).wraps);
    }

    #[test]
    fn hand_traced_three_site_cluster() {
        let g = LatticeGeometry::new(3, Boundary::Free, 1.0).unwrap();
        let b = bonds_from(
            &g,
            &[bond_between(&g, g.site(0, 0), g.site(1, 0)), bond_between(&g, g.site(1, 0), g.site(1, 1))],
        );
        let d = decompose(&g, &b);
        assert_eq!(d.n_clusters(), 7);
        assert_eq!(d.sites(0), &[0, 1, 4]);
        assert!(d.clusters()[1..].iter().all(|c| c.size == 1));
        assert!((d.cluster(0).diameter - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(d.labels().id, label(&g, &b).id);
    }

    #[test]
    fn unwrapping_across_the_seam() {
        let g = LatticeGeometry::new(6, Boundary::Torus, 1.0).unwrap();
        // Horizontal path x = 4, 5, 0, 1 on row 2.
        let row = 2;
        let open: Vec<usize> = [(4, 5), (5, 0), (0, 1)]
            .iter()
            .map(|&(a, b)| bond_between(&g, g.site(a, row), g.site(b, row)))
            .collect();
        let d = decompose(&g, &bonds_from(&g, &open));
        let c = d.cluster_id(g.site(0, row));
        assert_eq!(d.cluster(c).size, 4);
        assert!(!d.cluster(c).wraps);
        assert!((d.cluster(c).diameter - 3.0).abs() < 1e-12);
        let bb = d.cluster(c).bbox;
        assert_eq!(bb.max_x - bb.min_x, 3);
    }

    #[test]
    fn restricted_sizes() {
        let g = LatticeGeometry::new(4, Boundary::Free, 1.0).unwrap();
        let b = bonds_from(&g, &[bond_between(&g, g.site(1, 0), g.site(2, 0))]);
        let d = decompose(&g, &b);
        let whole = Region::Rect { x0: 0.0, y0: 0.0, x1: 4.0, y1: 4.0 };
        let full = restricted_size(&d, &g, &whole);
        assert_eq!(full.len(), d.n_clusters());
        for (c, n) in &full {
            assert_eq!(*n as usize, d.cluster(*c as usize).size);
        }
        let empty = Region::Rect { x0: 10.0, y0: 10.0, x1: 11.0, y1: 11.0 };
        assert!(restricted_size(&d, &g, &empty).is_empty());
        // Straddling cluster {(1,0),(2,0)} with region x < 2.
        let left = Region::Rect { x0: 0.0, y0: 0.0, x1: 2.0, y1: 1.0 };
        let r = restricted_size(&d, &g, &left);
        assert_eq!(r, vec![(0, 1), (1, 1)]);
    }

    #[test]
    fn singleton_loop_is_a_diamond() {
        let g = LatticeGeometry::new(3, Boundary::Free, 0.5).unwrap();
        let d = decompose(&g, &BondConfiguration::closed(&g, false));
        let lp = trace_outer_loop(&d, &g, 4).unwrap();
        assert_eq!(lp.length(), 4);
        assert_eq!(lp.kind, LoopKind::Type1SitesInside);
        assert!((lp.diameter - 0.5).abs() < 1e-12);
        assert_eq!(lp.medial, vec![(2, 1), (3, 2), (2, 3), (1, 2)]);
    }

    #[test]
    fn domino_loop_visits_the_shared_midpoint_twice() {
        let g = LatticeGeometry::new(3, Boundary::Free, 1.0).unwrap();
        let b = bonds_from(&g, &[bond_between(&g, 0, 1)]);
        let d = decompose(&g, &b);
        let lp = trace_outer_loop(&d, &g, 0).unwrap();
        assert_eq!(lp.length(), 8);
        assert_eq!(lp.medial.iter().filter(|&&m| m == (1, 0)).count(), 2);
        assert!((lp.diameter - 2.0).abs() < 1e-12);
    }

    #[test]
    fn full_three_by_three_loop_matches_hand_trace() {
        let g = LatticeGeometry::new(3, Boundary::Free, 1.0).unwrap();
        let b = BondConfiguration { open: BitVec::ones(g.n_bonds()), ghost_open: BitVec::zeros(0) };
        let d = decompose(&g, &b);
        let lp = trace_outer_loop(&d, &g, 0).unwrap();
        let expected = vec![
            (0, -1), (1, 0), (2, -1), (3, 0), (4, -1), (5, 0),
            (4, 1), (5, 2), (4, 3), (5, 4), (4, 5), (3, 4),
            (2, 5), (1, 4), (0, 5), (-1, 4), (0, 3), (-1, 2), (0, 1), (-1, 0),
        ];
        assert_eq!(lp.medial, expected);
        assert_eq!(lp.kind, LoopKind::Type1SitesInside);
        for s in 0..9 {
            let (x, y) = g.coords(s);
            assert_eq!(lp.winding_number((x as i32, y as i32)), 1);
        }
        assert_eq!(lp.winding_number((3, 1)), 0);
    }

    #[test]
    fn wrapping_cluster_has_no_loop() {
        let g = LatticeGeometry::new(4, Boundary::Torus, 1.0).unwrap();
        let open: Vec<usize> = (0..4).map(|x| bond_between(&g, g.site(x, 0), g.site((x + 1) % 4, 0))).collect();
        let d = decompose(&g, &bonds_from(&g, &open));
        assert!(d.cluster(0).wraps);
        assert!(matches!(trace_outer_loop(&d, &g, 0), Err(Error::WrappingCluster { .. })));
        assert_eq!(d.cluster(0).diameter, 4.0);
    }

    #[test]
    fn crossing_counts() {
        let g = LatticeGeometry::new(16, Boundary::Free, 1.0).unwrap();
        let z = (7.0, 7.0);
        let none = BondConfiguration::closed(&g, false);
        assert_eq!(count_crossing_clusters(&label(&g, &none), &g, z, 2.0, 5.0).unwrap(), 0);
        let all = BondConfiguration { open: BitVec::ones(g.n_bonds()), ghost_open: BitVec::zeros(0) };
        assert_eq!(count_crossing_clusters(&label(&g, &all), &g, z, 2.0, 5.0).unwrap(), 1);
        // Two disjoint radial paths: east along row 7 and west along row 8.
        let mut open = Vec::new();
        for x in 7..15 {
            open.push(bond_between(&g, g.site(x, 7), g.site(x + 1, 7)));
        }
        for x in 0..7 {
            open.push(bond_between(&g, g.site(x, 8), g.site(x + 1, 8)));
        }
        let lab = label(&g, &bonds_from(&g, &open));
        assert_eq!(count_crossing_clusters(&lab, &g, z, 2.0, 5.0).unwrap(), 2);
        assert!(count_crossing_clusters(&lab, &g, z, 5.0, 5.0).is_err());
    }

    fn random_bonds(geom: &LatticeGeometry, bits: &[bool]) -> BondConfiguration {
        let mut b = BondConfiguration::closed(geom, false);
        for (i, &on) in bits.iter().enumerate().take(geom.n_bonds()) {
            b.open.set(i, on);
        }
        b
    }

    proptest! {
        #[test]
        fn partition_invariants(bits in proptest::collection::vec(any::<bool>(), 72), torus in any::<bool>()) {
            let boundary = if torus { Boundary::Torus } else { Boundary::Free };
            let g = LatticeGeometry::new(6, boundary, 1.0 / 6.0).unwrap();
            let b = random_bonds(&g, &bits);
            let d = decompose(&g, &b);
            let total: usize = d.clusters().iter().map(|c| c.size).sum();
            prop_assert_eq!(total, g.n_sites());
            for bi in b.open.iter_ones() {
                let bond = g.bond(bi);
                prop_assert_eq!(d.cluster_id(bond.a), d.cluster_id(bond.b));
            }
            // Enumeration order: smallest site first.
            let firsts: Vec<u32> = (0..d.n_clusters()).map(|c| d.sites(c)[0]).collect();
            prop_assert!(firsts.windows(2).all(|w| w[0] < w[1]));
            // Restricted sizes partition any region.
            let r = Region::Rect { x0: 0.1, y0: 0.2, x1: 0.7, y1: 0.9 };
            let inside = g.sites_in_region(&r).len() as u32;
            let sum: u32 = restricted_size(&d, &g, &r).iter().map(|x| x.1).sum();
            prop_assert_eq!(sum, inside);
            // Loop coherence for every non-wrapping cluster.
            for c in 0..d.n_clusters() {
                if d.cluster(c).wraps { continue; }
                let lp = trace_outer_loop(&d, &g, c).unwrap();
                prop_assert_eq!(lp.kind, LoopKind::Type1SitesInside);
                let cd = d.cluster(c).diameter;
                prop_assert!(cd <= lp.diameter + 1e-12);
                prop_assert!(lp.diameter <= cd + 2.0 * g.spacing() + 1e-12);
                for &s in d.sites(c) {
                    prop_assert_eq!(lp.winding_number(d.unwrapped(s)), 1);
                }
            }
        }

        #[test]
        fn opening_a_bond_merges_at_most_two(bits in proptest::collection::vec(any::<bool>(), 50), extra in 0usize..50) {
            let g = LatticeGeometry::new(5, Boundary::Torus, 1.0).unwrap();
            let mut b = random_bonds(&g, &bits);
            let before = label(&g, &b).n_clusters();
            b.open.set(extra, true);
            let after = label(&g, &b).n_clusters();
            prop_assert!(after <= before && before - after <= 1);
        }
    }
}
