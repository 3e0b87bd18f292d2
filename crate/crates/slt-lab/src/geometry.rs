//! Lattice points, finite sets and the nested sets A1 ⊂ V ⊂ A2^C used by the
//! excursion machinery.
//!
//! Sets are stored as sorted point lists with a hash index, so that linear
//! solvers get a stable contiguous numbering. A dense label grid over the
//! bounding box of a [`GeometryTriple`] backs the membership tests that sit in
//! the inner loop of walk simulation.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;

use serde::Serialize;

use crate::error::{LabError, Result};

/// Largest supported lattice dimension.
pub const MAX_DIM: usize = 6;

/// A point of Z^d, 3 ≤ d ≤ [`MAX_DIM`], stored inline.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LatticePoint {
    dim: u8,
    c: [i32; MAX_DIM],
}

impl LatticePoint {
    pub fn new(coords: &[i32]) -> Self {
        assert!(
            !coords.is_empty() && coords.len() <= MAX_DIM,
            "unsupported dimension {}",
            coords.len()
        );
        let mut c = [0; MAX_DIM];
        c[..coords.len()].copy_from_slice(coords);
        Self {
            dim: coords.len() as u8,
            c,
        }
    }

    pub fn origin(d: usize) -> Self {
        Self::new(&vec![0; d])
    }

    /// The unit vector `e_{axis+1}` scaled by `k`.
    pub fn axis(d: usize, axis: usize, k: i32) -> Self {
        let mut p = Self::origin(d);
        p.c[axis] = k;
        p
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    #[inline]
    pub fn coords(&self) -> &[i32] {
        &self.c[..self.dim as usize]
    }

    #[inline]
    pub fn coord(&self, i: usize) -> i32 {
        self.c[i]
    }

    #[inline]
    pub fn norm2(&self) -> i64 {
        self.coords().iter().map(|&x| (x as i64) * (x as i64)).sum()
    }

    #[inline]
    pub fn norm(&self) -> f64 {
        (self.norm2() as f64).sqrt()
    }

    #[inline]
    pub fn linf(&self) -> i32 {
        self.coords().iter().map(|x| x.abs()).max().unwrap_or(0)
    }

    #[inline]
    pub fn add(&self, o: &LatticePoint) -> LatticePoint {
        let mut p = *self;
        for i in 0..self.dim() {
            p.c[i] += o.c[i];
        }
        p
    }

    #[inline]
    pub fn sub(&self, o: &LatticePoint) -> LatticePoint {
        let mut p = *self;
        for i in 0..self.dim() {
            p.c[i] -= o.c[i];
        }
        p
    }

    /// Neighbor number `k` in `0..2d`: `+e_{k/2}` for even k, `-e_{k/2}` for odd k.
    #[inline]
    pub fn neighbor(&self, k: usize) -> LatticePoint {
        let mut p = *self;
        p.c[k >> 1] += if k & 1 == 0 { 1 } else { -1 };
        p
    }

    pub fn neighbors(&self) -> impl Iterator<Item = LatticePoint> + '_ {
        (0..2 * self.dim()).map(move |k| self.neighbor(k))
    }

    pub fn is_neighbor(&self, o: &LatticePoint) -> bool {
        self.dim == o.dim && self.sub(o).coords().iter().map(|x| x.abs()).sum::<i32>() == 1
    }
}

impl fmt::Debug for LatticePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.coords())
    }
}

impl fmt::Display for LatticePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.coords().iter().map(|x| x.to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}

impl Serialize for LatticePoint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.coords().serialize(s)
    }
}

/// Euclidean and sup-norm distance between two points.
pub fn distances(x: &LatticePoint, y: &LatticePoint) -> Result<(f64, i32)> {
    if x.dim() != y.dim() {
        return Err(LabError::Dimension(x.dim(), y.dim()));
    }
    let z = x.sub(y);
    Ok((z.norm(), z.linf()))
}

/// A finite subset of Z^d with contiguous indexing.
#[derive(Clone, Debug)]
pub struct FiniteSet {
    dim: usize,
    points: Vec<LatticePoint>,
    index: HashMap<LatticePoint, u32>,
}

impl FiniteSet {
    /// Builds a set from arbitrary points; duplicates are merged and points sorted.
    pub fn from_points(dim: usize, pts: impl IntoIterator<Item = LatticePoint>) -> Self {
        let mut points: Vec<LatticePoint> = pts.into_iter().collect();
        for p in &points {
            assert_eq!(p.dim(), dim, "point {p:?} has wrong dimension");
        }
        points.sort_unstable();
        points.dedup();
        let index = points
            .iter()
            .enumerate()
            .map(|(i, p)| (*p, i as u32))
            .collect();
        Self { dim, points, index }
    }

    pub fn empty(dim: usize) -> Self {
        Self::from_points(dim, std::iter::empty())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn len(&self) -> usize {
        self.points.len()
    }
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
    pub fn points(&self) -> &[LatticePoint] {
        &self.points
    }
    pub fn iter(&self) -> impl Iterator<Item = &LatticePoint> {
        self.points.iter()
    }
    #[inline]
    pub fn contains(&self, p: &LatticePoint) -> bool {
        self.index.contains_key(p)
    }
    #[inline]
    pub fn index_of(&self, p: &LatticePoint) -> Option<usize> {
        self.index.get(p).map(|&i| i as usize)
    }
    pub fn point(&self, i: usize) -> LatticePoint {
        self.points[i]
    }

    pub fn is_subset(&self, other: &FiniteSet) -> bool {
        self.points.iter().all(|p| other.contains(p))
    }

    pub fn union(&self, other: &FiniteSet) -> FiniteSet {
        FiniteSet::from_points(self.dim, self.points.iter().chain(other.points.iter()).copied())
    }

    /// Largest Euclidean norm of a member (0 for the empty set).
    pub fn radius(&self) -> f64 {
        self.points.iter().map(|p| p.norm()).fold(0.0, f64::max)
    }

    /// Largest sup-norm of a member.
    pub fn linf_radius(&self) -> i32 {
        self.points.iter().map(|p| p.linf()).max().unwrap_or(0)
    }
}

/// Internal boundary: members with at least one neighbor outside the set.
pub fn boundary(a: &FiniteSet) -> FiniteSet {
    FiniteSet::from_points(
        a.dim(),
        a.iter()
            .filter(|p| p.neighbors().any(|q| !a.contains(&q)))
            .copied(),
    )
}

/// Outer vertex boundary: non-members adjacent to a member.
pub fn outer_boundary(a: &FiniteSet) -> FiniteSet {
    let mut out = HashSet::new();
    for p in a.iter() {
        for q in p.neighbors() {
            if !a.contains(&q) {
                out.insert(q);
            }
        }
    }
    FiniteSet::from_points(a.dim(), out)
}

/// Integer vectors of Euclidean norm at most `t`.
pub fn ball_offsets(d: usize, t: i32) -> Vec<LatticePoint> {
    let t2 = (t as i64) * (t as i64);
    let mut out = Vec::new();
    let side = (2 * t + 1) as i64;
    let total = side.pow(d as u32);
    let mut c = vec![0i32; d];
    for mut k in 0..total {
        for ci in c.iter_mut() {
            *ci = (k % side) as i32 - t;
            k /= side;
        }
        let p = LatticePoint::new(&c);
        if p.norm2() <= t2 {
            out.push(p);
        }
    }
    out
}

/// Euclidean t-dilation {x : dist(x, A) ≤ t}.
pub fn dilate(a: &FiniteSet, t: i32) -> FiniteSet {
    let offs = ball_offsets(a.dim(), t);
    let mut out: HashSet<LatticePoint> = a.iter().copied().collect();
    // The nearest member to an outside point is always a boundary point.
    for b in boundary(a).iter() {
        for o in &offs {
            out.insert(b.add(o));
        }
    }
    FiniteSet::from_points(a.dim(), out)
}

/// Discrete Euclidean ball {x : ‖x‖ < r} (strict) around the origin.
pub fn open_ball(d: usize, r: f64) -> FiniteSet {
    let t = r.ceil() as i32;
    let r2 = r * r;
    FiniteSet::from_points(
        d,
        ball_offsets(d, t).into_iter().filter(|p| (p.norm2() as f64) < r2),
    )
}

/// Discrete Euclidean ball {x : ‖x‖ ≤ r} around the origin.
pub fn closed_ball(d: usize, r: f64) -> FiniteSet {
    let t = r.floor() as i32;
    FiniteSet::from_points(d, ball_offsets(d, t))
}

/// Centered discrete hypercube of edge `edge`: coordinates in
/// `lo..=lo+edge` with `lo = -floor(edge/2)`.
pub fn centered_cube(d: usize, edge: i32) -> FiniteSet {
    let lo = -(edge / 2);
    let side = (edge + 1) as i64;
    let total = side.pow(d as u32);
    let mut c = vec![0i32; d];
    let mut pts = Vec::with_capacity(total as usize);
    for mut k in 0..total {
        for ci in c.iter_mut() {
            *ci = lo + (k % side) as i32;
            k /= side;
        }
        pts.push(LatticePoint::new(&c));
    }
    FiniteSet::from_points(d, pts)
}

/// Box `[lo, hi]^d` given explicitly (used for small test sets).
pub fn box_set(d: usize, lo: i32, hi: i32) -> FiniteSet {
    let side = (hi - lo + 1) as i64;
    let mut c = vec![0i32; d];
    let mut pts = Vec::new();
    for mut k in 0..side.pow(d as u32) {
        for ci in c.iter_mut() {
            *ci = lo + (k % side) as i32;
            k /= side;
        }
        pts.push(LatticePoint::new(&c));
    }
    FiniteSet::from_points(d, pts)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Ball,
    SmoothedCube,
}

impl std::str::FromStr for Shape {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ball" => Ok(Shape::Ball),
            "smoothed_cube" | "cube" => Ok(Shape::SmoothedCube),
            other => Err(LabError::Parameter(format!("unknown shape {other:?}"))),
        }
    }
}

/// Label bits stored in the membership grid.
pub mod label {
    pub const A1: u8 = 1;
    pub const BOUNDARY_A1: u8 = 2;
    pub const DILATION_S: u8 = 4;
    pub const V: u8 = 8;
    pub const A2_COMPLEMENT: u8 = 16;
    pub const BOUNDARY_A2: u8 = 32;
}

/// Dense per-cell labels over the box `[-m, m]^d`.
#[derive(Clone, Debug)]
pub struct LabelGrid {
    dim: usize,
    m: i32,
    side: i64,
    cells: Vec<u8>,
}

impl LabelGrid {
    fn new(dim: usize, m: i32) -> Self {
        let side = (2 * m + 1) as i64;
        Self {
            dim,
            m,
            side,
            cells: vec![0; side.pow(dim as u32) as usize],
        }
    }

    #[inline]
    fn cell(&self, p: &LatticePoint) -> Option<usize> {
        let mut k: i64 = 0;
        for i in (0..self.dim).rev() {
            let x = p.coord(i);
            if x < -self.m || x > self.m {
                return None;
            }
            k = k * self.side + (x + self.m) as i64;
        }
        Some(k as usize)
    }

    fn mark(&mut self, p: &LatticePoint, bit: u8) {
        let k = self.cell(p).expect("label grid too small");
        self.cells[k] |= bit;
    }

    /// Label bits of a point; points outside the box carry no label.
    #[inline]
    pub fn get(&self, p: &LatticePoint) -> u8 {
        match self.cell(p) {
            Some(k) => self.cells[k],
            None => 0,
        }
    }

    /// Half-width of the labelled box.
    pub fn half_width(&self) -> i32 {
        self.m
    }
}

/// Default bound on |A2^C| accepted by [`build_geometry`].
pub const DEFAULT_POINT_BUDGET: usize = 2_000_000;

/// The sets A1, V, A2^C and their boundaries for one (shape, r, s, d).
#[derive(Clone, Debug)]
pub struct GeometryTriple {
    pub shape: Shape,
    pub r: i32,
    pub s: i32,
    pub dim: usize,
    pub a1: FiniteSet,
    pub boundary_a1: FiniteSet,
    /// {x : dist(x, A1) ≤ s}; V is its internal boundary.
    pub dilation_s: FiniteSet,
    pub v: FiniteSet,
    pub a2_complement: FiniteSet,
    /// First points outside A2^C, i.e. the internal boundary of A2.
    pub boundary_a2: FiniteSet,
    /// The unsmoothed hypercube H_{r+2s} (cube shape only).
    pub unsmoothed_cube: Option<FiniteSet>,
    pub labels: LabelGrid,
}

impl GeometryTriple {
    #[inline]
    pub fn label(&self, p: &LatticePoint) -> u8 {
        self.labels.get(p)
    }

    /// Radius of the smallest origin-centered Euclidean ball containing A2^C ∪ ∂A2.
    pub fn outer_radius(&self) -> f64 {
        self.boundary_a2.radius()
    }

    /// Truncation radius used for escape decisions.
    pub fn r_big(&self, factor: f64) -> f64 {
        (factor * (self.r + 2 * self.s) as f64).max(self.outer_radius() + 2.0)
    }

    /// Nearest-neighbor BFS from A1 through A2^C avoiding V; true when ∂A2 is unreachable.
    pub fn separation_holds(&self) -> bool {
        let mut seen: HashSet<LatticePoint> = self.a1.iter().copied().collect();
        let mut queue: VecDeque<LatticePoint> = self.a1.iter().copied().collect();
        while let Some(p) = queue.pop_front() {
            for q in p.neighbors() {
                let l = self.label(&q);
                if l & label::V != 0 || seen.contains(&q) {
                    continue;
                }
                if l & label::BOUNDARY_A2 != 0 || l & label::A2_COMPLEMENT == 0 {
                    return false;
                }
                seen.insert(q);
                queue.push_back(q);
            }
        }
        true
    }
}

/// Builds the geometry with the default point budget.
pub fn build_geometry(shape: Shape, r: i32, s: i32, d: usize) -> Result<GeometryTriple> {
    build_geometry_with_budget(shape, r, s, d, DEFAULT_POINT_BUDGET)
}

pub fn build_geometry_with_budget(
    shape: Shape,
    r: i32,
    s: i32,
    d: usize,
    budget: usize,
) -> Result<GeometryTriple> {
    if !(3..=MAX_DIM).contains(&d) {
        return Err(LabError::Parameter(format!(
            "dimension must be in 3..={MAX_DIM}, got {d}"
        )));
    }
    if s < 1 || s >= r {
        return Err(LabError::Parameter(format!("need 1 ≤ s < r, got r={r}, s={s}")));
    }
    // Cheap volume bound before allocating anything.
    let side = (2 * (r + 2 * s) + 3) as f64;
    let box_volume = side.powi(d as i32);
    let ball_fraction = match d {
        3 => std::f64::consts::FRAC_PI_6,
        4 => 0.3084,
        5 => 0.1645,
        _ => 0.0807,
    };
    let estimate = (box_volume * ball_fraction) as usize;
    if estimate > budget {
        return Err(LabError::Size {
            what: "a2_complement".into(),
            size: estimate,
            budget,
        });
    }

    let (a1, unsmoothed_cube) = match shape {
        Shape::Ball => (open_ball(d, r as f64), None),
        Shape::SmoothedCube => {
            let h = centered_cube(d, r - s);
            (dilate(&h, s), Some(centered_cube(d, r + 2 * s)))
        }
    };
    let boundary_a1 = boundary(&a1);
    let dilation_s = dilate(&a1, s);
    let v = boundary(&dilation_s);
    let a2_complement = dilate(&a1, 2 * s);
    if a2_complement.len() > budget {
        return Err(LabError::Size {
            what: "a2_complement".into(),
            size: a2_complement.len(),
            budget,
        });
    }
    let boundary_a2 = outer_boundary(&a2_complement);

    let m = boundary_a2.linf_radius() + 1;
    let mut labels = LabelGrid::new(d, m);
    for p in a1.iter() {
        labels.mark(p, label::A1);
    }
    for p in boundary_a1.iter() {
        labels.mark(p, label::BOUNDARY_A1);
    }
    for p in dilation_s.iter() {
        labels.mark(p, label::DILATION_S);
    }
    for p in v.iter() {
        labels.mark(p, label::V);
    }
    for p in a2_complement.iter() {
        labels.mark(p, label::A2_COMPLEMENT);
    }
    for p in boundary_a2.iter() {
        labels.mark(p, label::BOUNDARY_A2);
    }

    Ok(GeometryTriple {
        shape,
        r,
        s,
        dim: d,
        a1,
        boundary_a1,
        dilation_s,
        v,
        a2_complement,
        boundary_a2,
        unsmoothed_cube,
        labels,
    })
}

/// JSON description emitted by the `geometry` subcommand.
#[derive(Serialize)]
pub struct GeometrySummary {
    pub shape: Shape,
    pub r: i32,
    pub s: i32,
    pub d: usize,
    pub a1: usize,
    pub boundary_a1: usize,
    pub v: usize,
    pub a2_complement: usize,
    pub boundary_a2: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub points: Option<GeometryPoints>,
}

#[derive(Serialize)]
pub struct GeometryPoints {
    pub a1: Vec<LatticePoint>,
    pub v: Vec<LatticePoint>,
    pub boundary_a2: Vec<LatticePoint>,
}

impl GeometryTriple {
    pub fn summary(&self, with_points: bool) -> GeometrySummary {
        GeometrySummary {
            shape: self.shape,
            r: self.r,
            s: self.s,
            d: self.dim,
            a1: self.a1.len(),
            boundary_a1: self.boundary_a1.len(),
            v: self.v.len(),
            a2_complement: self.a2_complement.len(),
            boundary_a2: self.boundary_a2.len(),
            points: with_points.then(|| GeometryPoints {
                a1: self.a1.points().to_vec(),
                v: self.v.points().to_vec(),
                boundary_a2: self.boundary_a2.points().to_vec(),
            }),
        }
    }
}
