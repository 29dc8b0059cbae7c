//! The level-N discretization `G_N = (V_N, E_N)` of the Sierpinski gasket.
//!
//! Sites carry exact coordinates in the triangular-lattice basis
//! `u = (1, 0)`, `v = (1/2, sqrt(3)/2)` with a shared power-of-two
//! denominator, so shared cell corners deduplicate exactly. The three
//! outer corners are `a_0 = v`, `a_1 = (0,0)`, `a_2 = u`.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;

use crate::{Error, Result};

/// Hard cap on the construction level (memory guard).
pub const MAX_LEVEL: u32 = 12;

/// Integer site coordinates in the triangular basis, at denominator `2^N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Point {
    pub p: i64,
    pub q: i64,
}

impl Point {
    /// Rotation by 120 degrees about the origin (`u -> v - u`, `v -> -u`).
    pub fn rot120(self) -> Point {
        Point { p: -self.p - self.q, q: self.p }
    }

    /// Cartesian coordinates given the denominator `2^level`.
    pub fn to_xy(self, level: u32) -> (f64, f64) {
        let d = (1u64 << level) as f64;
        let h = 0.75f64.sqrt();
        ((self.p as f64 + 0.5 * self.q as f64) / d, self.q as f64 * h / d)
    }
}

// Base corners at denominator 1: a_0 = v, a_1 = 0, a_2 = u.
const CORNERS: [Point; 3] = [
    Point { p: 0, q: 1 },
    Point { p: 0, q: 0 },
    Point { p: 1, q: 0 },
];

/// A word over `{0,1,2}`, most significant letter first, addressing the
/// cell `K_w = phi_w(K)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellAddress(Vec<u8>);

impl CellAddress {
    pub fn new(letters: Vec<u8>) -> Result<Self> {
        if letters.iter().any(|&l| l > 2) {
            return Err(Error::Parameter("cell address letters must be in {0,1,2}".into()));
        }
        Ok(CellAddress(letters))
    }

    pub fn root() -> Self {
        CellAddress(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn letters(&self) -> &[u8] {
        &self.0
    }

    pub fn child(&self, letter: u8) -> Result<Self> {
        let mut l = self.0.clone();
        l.push(letter);
        CellAddress::new(l)
    }

    /// All `3^k` addresses of a given length, in lexicographic order.
    pub fn all_of_length(k: usize) -> Vec<CellAddress> {
        let n = 3usize.pow(k as u32);
        (0..n)
            .map(|mut idx| {
                let mut letters = vec![0u8; k];
                for j in (0..k).rev() {
                    letters[j] = (idx % 3) as u8;
                    idx /= 3;
                }
                CellAddress(letters)
            })
            .collect()
    }
}

impl std::str::FromStr for CellAddress {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let letters = s
            .chars()
            .map(|c| {
                c.to_digit(3)
                    .map(|d| d as u8)
                    .ok_or_else(|| Error::Parameter(format!("bad cell address `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        CellAddress::new(letters)
    }
}

impl fmt::Display for CellAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.0 {
            write!(f, "{l}")?;
        }
        Ok(())
    }
}

/// Immutable level-N gasket graph.
#[derive(Debug, Clone)]
pub struct GasketGraph {
    level: u32,
    points: Vec<Point>,
    neighbors: Vec<Vec<usize>>,
    edges: Vec<(usize, usize)>,
    boundary: [usize; 3],
    interior: Vec<usize>,
    index: HashMap<Point, usize>,
}

impl GasketGraph {
    /// Builds `G_N`. Errors for `N > 12`.
    pub fn build(level: u32) -> Result<GasketGraph> {
        if level > MAX_LEVEL {
            return Err(Error::LevelOutOfRange(level, MAX_LEVEL));
        }
        let ncells = 3usize.pow(level);
        let mut index: HashMap<Point, usize> = HashMap::new();
        let mut points: Vec<Point> = Vec::new();
        let mut edges: Vec<(usize, usize)> = Vec::with_capacity(3 * ncells);
        let mut word = vec![0u8; level as usize];
        for mut idx in 0..ncells {
            for j in (0..level as usize).rev() {
                word[j] = (idx % 3) as u8;
                idx /= 3;
            }
            let mut ids = [0usize; 3];
            for i in 0..3 {
                let pt = word_corner(&word, level, i);
                let id = *index.entry(pt).or_insert_with(|| {
                    points.push(pt);
                    points.len() - 1
                });
                ids[i] = id;
            }
            edges.push(ord(ids[0], ids[1]));
            edges.push(ord(ids[0], ids[2]));
            edges.push(ord(ids[1], ids[2]));
        }
        debug_assert_eq!(points.len(), 3 * (3usize.pow(level) + 1) / 2);
        debug_assert_eq!(edges.len(), 3usize.pow(level + 1));

        let mut neighbors = vec![Vec::new(); points.len()];
        for &(u, v) in &edges {
            neighbors[u].push(v);
            neighbors[v].push(u);
        }
        for n in &mut neighbors {
            n.sort_unstable();
        }
        let d = 1i64 << level;
        let boundary = [
            index[&Point { p: 0, q: d }],
            index[&Point { p: 0, q: 0 }],
            index[&Point { p: d, q: 0 }],
        ];
        let bset: HashSet<usize> = boundary.iter().copied().collect();
        let interior = (0..points.len()).filter(|i| !bset.contains(i)).collect();
        Ok(GasketGraph { level, points, neighbors, edges, boundary, interior, index })
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn num_sites(&self) -> usize {
        self.points.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, site: usize) -> &[usize] {
        &self.neighbors[site]
    }

    /// The three outer corners `a_0, a_1, a_2`.
    pub fn boundary(&self) -> [usize; 3] {
        self.boundary
    }

    pub fn is_boundary(&self, site: usize) -> bool {
        self.boundary.contains(&site)
    }

    /// Interior sites `V_N^0`, in ascending id order.
    pub fn interior(&self) -> &[usize] {
        &self.interior
    }

    pub fn point(&self, site: usize) -> Point {
        self.points[site]
    }

    /// Looks a site up by its exact coordinates at this graph's denominator.
    pub fn site_at(&self, pt: Point) -> Option<usize> {
        self.index.get(&pt).copied()
    }

    /// Exact coordinates `(x_num, y_num, denom)` with `x = x_num/denom`,
    /// `y = y_num * sin(pi/3) / denom` and `denom = 2^(N+1)`.
    pub fn coordinates(&self, site: usize) -> (i64, i64, i64) {
        let pt = self.points[site];
        (2 * pt.p + pt.q, 2 * pt.q, 1i64 << (self.level + 1))
    }

    /// Sites of `V_N^w`: the cell's sites excluding its three corners.
    pub fn cell_sites(&self, w: &CellAddress) -> Result<Vec<usize>> {
        let j = w.len();
        if j > self.level as usize {
            return Err(Error::WordTooLong(j, self.level));
        }
        let rem = self.level as usize - j;
        let mut set: HashSet<usize> = HashSet::new();
        let mut full = w.letters().to_vec();
        full.extend(std::iter::repeat(0).take(rem));
        for suffix in 0..3usize.pow(rem as u32) {
            let mut s = suffix;
            for k in (0..rem).rev() {
                full[j + k] = (s % 3) as u8;
                s /= 3;
            }
            for i in 0..3 {
                let pt = word_corner(&full, self.level, i);
                set.insert(self.index[&pt]);
            }
        }
        for i in 0..3 {
            let corner = cell_corner(w.letters(), self.level, i);
            set.remove(&self.index[&corner]);
        }
        let mut out: Vec<usize> = set.into_iter().collect();
        out.sort_unstable();
        Ok(out)
    }

    /// The three corner sites `phi_w(a_i)` of cell `K_w`.
    pub fn cell_corners(&self, w: &CellAddress) -> Result<[usize; 3]> {
        if w.len() > self.level as usize {
            return Err(Error::WordTooLong(w.len(), self.level));
        }
        let mut out = [0usize; 3];
        for i in 0..3 {
            out[i] = self.index[&cell_corner(w.letters(), self.level, i)];
        }
        Ok(out)
    }

    /// BFS shortest-path length `L(x, y)`.
    pub fn graph_distance(&self, x: usize, y: usize) -> usize {
        if x == y {
            return 0;
        }
        let mut dist = vec![usize::MAX; self.points.len()];
        dist[x] = 0;
        let mut queue = VecDeque::from([x]);
        while let Some(s) = queue.pop_front() {
            for &t in &self.neighbors[s] {
                if dist[t] == usize::MAX {
                    dist[t] = dist[s] + 1;
                    if t == y {
                        return dist[t];
                    }
                    queue.push_back(t);
                }
            }
        }
        usize::MAX
    }

    /// The discrete neighborhood `Lambda_x = { y : L(x,y) <= l0 }` of an
    /// interior site, in ascending id order.
    pub fn neighborhood(&self, x: usize, l0: u32) -> Result<Vec<usize>> {
        if self.is_boundary(x) {
            return Err(Error::NotInterior(x));
        }
        let mut dist: HashMap<usize, u32> = HashMap::from([(x, 0)]);
        let mut queue = VecDeque::from([x]);
        while let Some(s) = queue.pop_front() {
            let d = dist[&s];
            if d == l0 {
                continue;
            }
            for &t in &self.neighbors[s] {
                dist.entry(t).or_insert_with(|| {
                    queue.push_back(t);
                    d + 1
                });
            }
        }
        let mut out: Vec<usize> = dist.into_keys().collect();
        out.sort_unstable();
        Ok(out)
    }

    /// Canonical rescaled neighborhood `2^N (Lambda_x - x)` of an interior site.
    pub fn site_shape(&self, x: usize, l0: u32) -> Result<Shape> {
        let sites = self.neighborhood(x, l0)?;
        Ok(Shape::from_sites(self, x, &sites))
    }

    /// Classifies every interior site's rescaled neighborhood.
    pub fn shape_catalog(&self, l0: u32) -> Result<ShapeCatalog> {
        if self.level < l0 + 2 {
            return Err(Error::CatalogLevelTooSmall { level: self.level, l0 });
        }
        let mut by_shape: HashMap<Shape, (u64, Vec<usize>)> = HashMap::new();
        for &x in &self.interior {
            let shape = self.site_shape(x, l0)?;
            let entry = by_shape.entry(shape).or_insert((0, Vec::new()));
            entry.0 += 1;
            if entry.1.len() < 4 {
                entry.1.push(x);
            }
        }
        let mut items: Vec<(Shape, u64)> =
            by_shape.into_iter().map(|(s, (c, _))| (s, c)).collect();
        items.sort_by(|a, b| a.0.offsets.cmp(&b.0.offsets));
        let (shapes, counts): (Vec<_>, Vec<_>) = items.into_iter().unzip();
        Ok(ShapeCatalog { range: l0, level: self.level, shapes, counts, interior_count: self.interior.len() as u64 })
    }

    /// Writes the site table (`id x_num y_num denom`) and edge list (`u v`).
    pub fn dump<W: std::io::Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "# sites: id x_num y_num denom")?;
        for id in 0..self.num_sites() {
            let (xn, yn, d) = self.coordinates(id);
            writeln!(out, "{id} {xn} {yn} {d}")?;
        }
        writeln!(out, "# edges: u v")?;
        for &(u, v) in &self.edges {
            writeln!(out, "{u} {v}")?;
        }
        Ok(())
    }
}

fn ord(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// `phi_w(a_i)` numerators at denominator `2^level` for `|w| = level`.
fn word_corner(word: &[u8], level: u32, i: usize) -> Point {
    cell_corner(word, level, i)
}

/// `phi_w(a_i)` numerators at denominator `2^level` for any `|w| <= level`.
fn cell_corner(word: &[u8], level: u32, i: usize) -> Point {
    let mut p = 0i64;
    let mut q = 0i64;
    for (j, &l) in word.iter().enumerate() {
        let a = CORNERS[l as usize];
        let scale = 1i64 << (level as usize - j - 1);
        p += a.p * scale;
        q += a.q * scale;
    }
    let a = CORNERS[i];
    let scale = 1i64 << (level as usize - word.len());
    Point { p: p + a.p * scale, q: q + a.q * scale }
}

/// A canonical rescaled neighborhood: offsets from the anchor site, with the
/// origin first and the remaining sites in lexicographic `(dp, dq)` order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape {
    offsets: Vec<Point>,
}

impl Shape {
    fn from_sites(g: &GasketGraph, anchor: usize, sites: &[usize]) -> Shape {
        let a = g.point(anchor);
        let offsets = sites
            .iter()
            .map(|&s| {
                let pt = g.point(s);
                Point { p: pt.p - a.p, q: pt.q - a.q }
            })
            .collect();
        Shape::from_offsets(offsets)
    }

    pub fn from_offsets(mut offsets: Vec<Point>) -> Shape {
        assert!(offsets.contains(&Point { p: 0, q: 0 }), "shape must contain the origin");
        offsets.sort_unstable_by_key(|o| (o != &Point { p: 0, q: 0 }, o.p, o.q));
        Shape { offsets }
    }

    /// Sites in canonical order; index 0 is the origin.
    pub fn sites(&self) -> &[Point] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Indices of sites at unit lattice distance from the origin.
    pub fn origin_neighbors(&self) -> Vec<usize> {
        self.offsets
            .iter()
            .enumerate()
            .filter(|(_, o)| {
                matches!((o.p, o.q), (1, 0) | (-1, 0) | (0, 1) | (0, -1) | (1, -1) | (-1, 1))
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// First canonical-order pair of sites collinear with and on opposite
    /// sides of the origin, if any.
    pub fn collinear_pair(&self) -> Option<(usize, usize)> {
        for (i, o) in self.offsets.iter().enumerate().skip(1) {
            let neg = Point { p: -o.p, q: -o.q };
            if let Some(j) = self.offsets.iter().position(|&x| x == neg) {
                return Some((i, j));
            }
        }
        None
    }

    /// The shape rotated by 120 degrees about its origin, plus the index map
    /// from this shape's canonical order into the rotated one's.
    pub fn rotated(&self) -> (Shape, Vec<usize>) {
        let rotated: Vec<Point> = self.offsets.iter().map(|o| o.rot120()).collect();
        let shape = Shape::from_offsets(rotated.clone());
        let perm = rotated
            .iter()
            .map(|r| shape.offsets.iter().position(|x| x == r).unwrap())
            .collect();
        (shape, perm)
    }

    /// Lexicographically minimal offset list over the three rotations;
    /// equal keys mean equal rotation classes.
    pub fn rotation_class_key(&self) -> Vec<Point> {
        let r1 = self.rotated().0;
        let r2 = r1.rotated().0;
        let mut best = self.offsets.clone();
        for cand in [r1.offsets, r2.offsets] {
            if cand < best {
                best = cand;
            }
        }
        best
    }

    /// Stable text key, e.g. `"0,0;1,0;-1,0"`.
    pub fn key(&self) -> String {
        self.offsets
            .iter()
            .map(|o| format!("{},{}", o.p, o.q))
            .collect::<Vec<_>>()
            .join(";")
    }
}

/// All distinct shapes of a level-N interior together with exact occurrence
/// counts (the ratios `r_Lambda^N` are `count / interior_count`).
#[derive(Debug, Clone)]
pub struct ShapeCatalog {
    pub range: u32,
    pub level: u32,
    shapes: Vec<Shape>,
    counts: Vec<u64>,
    interior_count: u64,
}

impl ShapeCatalog {
    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn interior_count(&self) -> u64 {
        self.interior_count
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    pub fn ratio(&self, i: usize) -> f64 {
        self.counts[i] as f64 / self.interior_count as f64
    }

    /// Exact reduced ratio `r_Lambda^N` as `(numerator, denominator)`.
    pub fn ratio_rational(&self, i: usize) -> (u64, u64) {
        let g = gcd(self.counts[i], self.interior_count);
        (self.counts[i] / g, self.interior_count / g)
    }

    /// Groups shape indices by rotation class.
    pub fn rotation_classes(&self) -> Vec<Vec<usize>> {
        let mut by_key: HashMap<Vec<Point>, Vec<usize>> = HashMap::new();
        for (i, s) in self.shapes.iter().enumerate() {
            by_key.entry(s.rotation_class_key()).or_default().push(i);
        }
        let mut out: Vec<Vec<usize>> = by_key.into_values().collect();
        out.sort();
        out
    }

    /// Builds a catalog holding the same shapes rotated by 120 degrees.
    /// Returns the rotated catalog and, per original shape, the target index
    /// plus the site permutation (used to remap table-based rate families).
    pub fn rotated(&self) -> (ShapeCatalog, Vec<(usize, Vec<usize>)>) {
        let rotated: Vec<(Shape, Vec<usize>)> = self.shapes.iter().map(|s| s.rotated()).collect();
        let mut items: Vec<(Shape, u64)> =
            rotated.iter().zip(&self.counts).map(|((s, _), &c)| (s.clone(), c)).collect();
        items.sort_by(|a, b| a.0.offsets.cmp(&b.0.offsets));
        let (shapes, counts): (Vec<_>, Vec<_>) = items.into_iter().unzip();
        let cat = ShapeCatalog {
            range: self.range,
            level: self.level,
            shapes,
            counts,
            interior_count: self.interior_count,
        };
        let mapping = rotated
            .into_iter()
            .map(|(s, perm)| {
                let idx = cat.shapes.iter().position(|x| *x == s).unwrap();
                (idx, perm)
            })
            .collect();
        (cat, mapping)
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}
