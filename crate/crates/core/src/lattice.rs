//! Square-lattice geometry and its embedding into the continuum.
//!
//! Sites are indexed row-major, `site = y * L + x`. Bonds are enumerated in
//! site order; for each site the east bond comes before the north bond. On a
//! torus every site owns exactly one east and one north bond, so bond `2k` is
//! the east bond of site `k` and bond `2k + 1` its north bond. On a free
//! lattice bonds that would leave the lattice are skipped.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Torus,
    Free,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    Horizontal,
    Vertical,
}

/// Lattice directions in counterclockwise order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    East = 0,
    North = 1,
    West = 2,
    South = 3,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::East,
        Direction::North,
        Direction::West,
        Direction::South,
    ];

    pub fn from_index(i: usize) -> Direction {
        Self::ALL[i % 4]
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Rotate counterclockwise by `quarter_turns` quarter turns.
    pub fn turn(self, quarter_turns: usize) -> Direction {
        Self::from_index(self.index() + quarter_turns)
    }

    pub fn offset(self) -> (i32, i32) {
        match self {
            Direction::East => (1, 0),
            Direction::North => (0, 1),
            Direction::West => (-1, 0),
            Direction::South => (0, -1),
        }
    }
}

/// A nearest-neighbour bond. `b` is one unit step from `a` along `axis`
/// (east or north, possibly across the torus seam).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bond {
    pub a: u32,
    pub b: u32,
    pub axis: Axis,
}

impl Bond {
    pub fn step(&self) -> (i32, i32) {
        match self.axis {
            Axis::Horizontal => (1, 0),
            Axis::Vertical => (0, 1),
        }
    }
}

const NO_BOND: u32 = u32::MAX;

#[derive(Clone, Debug)]
pub struct LatticeGeometry {
    width: usize,
    height: usize,
    boundary: Boundary,
    spacing: f64,
    bonds: Vec<Bond>,
    // Index of the east and north bond owned by each site.
    owned: Vec<[u32; 2]>,
}

impl LatticeGeometry {
    /// Square `L x L` lattice.
    pub fn new(side_sites: usize, boundary: Boundary, spacing: f64) -> Result<Self> {
        Self::rectangle(side_sites, side_sites, boundary, spacing)
    }

    /// `width x height` lattice. Only the exact-enumeration oracles use
    /// non-square shapes (a 2 x 1 strip is the two-site, one-bond graph).
    pub fn rectangle(width: usize, height: usize, boundary: Boundary, spacing: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid("side_sites must be at least 1"));
        }
        if !(spacing > 0.0) || !spacing.is_finite() {
            return Err(invalid(format!("spacing must be positive, got {spacing}")));
        }
        if width > (1 << 15) || height > (1 << 15) {
            return Err(invalid("lattice too large for 32-bit site indices"));
        }
        let (w, h) = (width, height);
        let mut bonds = Vec::with_capacity(2 * w * h);
        let mut owned = vec![[NO_BOND; 2]; w * h];
        for y in 0..h {
            for x in 0..w {
                let s = (y * w + x) as u32;
                let east = match boundary {
                    Boundary::Torus => Some((y * w + (x + 1) % w) as u32),
                    Boundary::Free if x + 1 < w => Some(s + 1),
                    Boundary::Free => None,
                };
                if let Some(b) = east {
                    owned[s as usize][0] = bonds.len() as u32;
                    bonds.push(Bond { a: s, b, axis: Axis::Horizontal });
                }
                let north = match boundary {
                    Boundary::Torus => Some((((y + 1) % h) * w + x) as u32),
                    Boundary::Free if y + 1 < h => Some(s + w as u32),
                    Boundary::Free => None,
                };
                if let Some(b) = north {
                    owned[s as usize][1] = bonds.len() as u32;
                    bonds.push(Bond { a: s, b, axis: Axis::Vertical });
                }
            }
        }
        Ok(Self { width: w, height: h, boundary, spacing, bonds, owned })
    }

    /// Sites per side. For rectangles, the width.
    pub fn side(&self) -> usize {
        self.width
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn n_sites(&self) -> usize {
        self.width * self.height
    }

    pub fn n_bonds(&self) -> usize {
        self.bonds.len()
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn bond(&self, index: usize) -> Bond {
        self.bonds[index]
    }

    pub fn coords(&self, site: u32) -> (usize, usize) {
        let s = site as usize;
        (s % self.width, s / self.width)
    }

    pub fn site(&self, x: usize, y: usize) -> u32 {
        debug_assert!(x < self.width && y < self.height);
        (y * self.width + x) as u32
    }

    /// Embedded continuum position `a * (x, y)`.
    pub fn position(&self, site: u32) -> (f64, f64) {
        let (x, y) = self.coords(site);
        (x as f64 * self.spacing, y as f64 * self.spacing)
    }

    /// Continuum period of the torus along each axis (`L a`); for a free
    /// lattice, the span of its sites (`(L - 1) a`).
    pub fn extents(&self) -> (f64, f64) {
        let span = |n: usize| match self.boundary {
            Boundary::Torus => n as f64 * self.spacing,
            Boundary::Free => (n - 1) as f64 * self.spacing,
        };
        (span(self.width), span(self.height))
    }

    /// Larger of the two [`extents`](Self::extents).
    pub fn extent(&self) -> f64 {
        let (ex, ey) = self.extents();
        ex.max(ey)
    }

    pub fn neighbor(&self, site: u32, dir: Direction) -> Option<u32> {
        let (x, y) = self.coords(site);
        let (w, h) = (self.width as i64, self.height as i64);
        let (dx, dy) = dir.offset();
        let nx = x as i64 + dx as i64;
        let ny = y as i64 + dy as i64;
        match self.boundary {
            Boundary::Torus => {
                Some(self.site(nx.rem_euclid(w) as usize, ny.rem_euclid(h) as usize))
            }
            Boundary::Free => {
                if nx < 0 || ny < 0 || nx >= w || ny >= h {
                    None
                } else {
                    Some(self.site(nx as usize, ny as usize))
                }
            }
        }
    }

    /// Index of the bond leaving `site` in direction `dir`, if it exists.
    pub fn bond_toward(&self, site: u32, dir: Direction) -> Option<usize> {
        let idx = match dir {
            Direction::East => self.owned[site as usize][0],
            Direction::North => self.owned[site as usize][1],
            Direction::West => self.owned[self.neighbor(site, Direction::West)? as usize][0],
            Direction::South => self.owned[self.neighbor(site, Direction::South)? as usize][1],
        };
        (idx != NO_BOND).then_some(idx as usize)
    }

    /// Minimal-image lattice displacement from `from` to `to`.
    pub fn displacement(&self, from: u32, to: u32) -> (i64, i64) {
        let (x0, y0) = self.coords(from);
        let (x1, y1) = self.coords(to);
        let mut dx = x1 as i64 - x0 as i64;
        let mut dy = y1 as i64 - y0 as i64;
        if self.boundary == Boundary::Torus {
            dx = wrap_half(dx, self.width as i64);
            dy = wrap_half(dy, self.height as i64);
        }
        (dx, dy)
    }

    /// Continuum distance from a site to a point, using the minimal image on
    /// a torus.
    pub fn distance_to_point(&self, site: u32, point: (f64, f64)) -> f64 {
        let (px, py) = self.position(site);
        let mut dx = px - point.0;
        let mut dy = py - point.1;
        if self.boundary == Boundary::Torus {
            let (ex, ey) = self.extents();
            dx -= ex * (dx / ex).round();
            dy -= ey * (dy / ey).round();
        }
        dx.hypot(dy)
    }

    pub fn sites_in_region(&self, region: &Region) -> Vec<u32> {
        (0..self.n_sites() as u32)
            .filter(|&s| {
                let (x, y) = self.position(s);
                region.contains(x, y)
            })
            .collect()
    }

    /// Half-open rectangle covering the `w x h` block of sites whose lower-left
    /// corner is site `(x0, y0)`. Corners use the same arithmetic as
    /// [`position`](Self::position), so membership is exact.
    pub fn block_region(&self, x0: usize, y0: usize, w: usize, h: usize) -> Region {
        let a = self.spacing;
        Region::Rect {
            x0: x0 as f64 * a,
            y0: y0 as f64 * a,
            x1: (x0 + w) as f64 * a,
            y1: (y0 + h) as f64 * a,
        }
    }
}

fn wrap_half(d: i64, l: i64) -> i64 {
    let mut d = d.rem_euclid(l);
    if 2 * d > l {
        d -= l;
    }
    d
}

/// Continuum region used as the support of indicator test functions and as
/// an observation window. Membership is evaluated on embedded site
/// positions without periodic wrapping.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Region {
    /// `[x0, x1) x [y0, y1)`.
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    /// Open disc `|p - c| < radius`.
    Disc { cx: f64, cy: f64, radius: f64 },
    /// `|p - c| > radius`.
    DiscComplement { cx: f64, cy: f64, radius: f64 },
}

impl Region {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Region::Rect { x0, y0, x1, y1 } => x0 <= x && x < x1 && y0 <= y && y < y1,
            Region::Disc { cx, cy, radius } => (x - cx).hypot(y - cy) < radius,
            Region::DiscComplement { cx, cy, radius } => (x - cx).hypot(y - cy) > radius,
        }
    }

    pub fn area(&self) -> f64 {
        match *self {
            Region::Rect { x0, y0, x1, y1 } => (x1 - x0).max(0.0) * (y1 - y0).max(0.0),
            Region::Disc { radius, .. } => std::f64::consts::PI * radius * radius,
            Region::DiscComplement { .. } => f64::INFINITY,
        }
    }
}

/// A torus standing in for the infinite plane, with a unit-square
/// observation box of `box_side` sites embedded in its middle.
#[derive(Clone, Debug)]
pub struct BulkBox {
    pub geometry: LatticeGeometry,
    pub observation: Region,
    pub box_side: usize,
}

impl BulkBox {
    /// The torus has side `round(margin * box_side)` sites and spacing
    /// `1 / box_side`, so the box is exactly `[c, c + 1)^2`.
    pub fn new(box_side: usize, margin: f64) -> Result<Self> {
        if box_side == 0 {
            return Err(invalid("box_side must be at least 1"));
        }
        if !(margin >= 1.0) {
            return Err(invalid(format!("torus margin must be >= 1, got {margin}")));
        }
        let torus = (margin * box_side as f64).round() as usize;
        let geometry = LatticeGeometry::new(torus, Boundary::Torus, 1.0 / box_side as f64)?;
        let offset = (torus - box_side) / 2;
        let observation = geometry.block_region(offset, offset, box_side, box_side);
        Ok(Self { geometry, observation, box_side })
    }
}
