//! Discrete potential theory: the free Green function, Dirichlet problems on
//! finite lattice domains, killed Green functions, capacities and equilibrium
//! measures.
//!
//! Linear systems `(I − P_D) u = b` are solved by conjugate gradients on the
//! nearest-neighbor stencil (the Jacobi preconditioner is the identity because
//! the diagonal of `I − P_D` is 1), or by a dense Cholesky factorization when
//! the domain has fewer than [`DENSE_LIMIT`] points. Several right-hand sides
//! can be solved together; they are stored interleaved so that the stencil
//! sweep vectorizes across them.

use std::collections::HashMap;
use std::sync::{OnceLock, RwLock};

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{LabError, Result};
use crate::geometry::{outer_boundary, FiniteSet, LatticePoint};
use crate::quadrature;

/// Squared distance beyond which the 3-d Green function uses its expansion.
const FAR_FIELD_R2: i64 = 80 * 80;

/// Memoized free Green function G(0, x) for one dimension.
pub struct GreenTable {
    dim: usize,
    tolerance: f64,
    cache: RwLock<HashMap<[i32; 6], f64>>,
}

impl GreenTable {
    pub fn new(dim: usize) -> Result<Self> {
        if !(3..=crate::geometry::MAX_DIM).contains(&dim) {
            return Err(LabError::Parameter(format!(
                "the free Green function needs 3 ≤ d ≤ 6, got {dim}"
            )));
        }
        Ok(Self {
            dim,
            tolerance: 1e-8,
            cache: RwLock::new(HashMap::new()),
        })
    }

    /// Process-wide table for dimension `dim`, shared so the cache is reused.
    pub fn shared(dim: usize) -> Result<&'static GreenTable> {
        static TABLES: [OnceLock<GreenTable>; 7] = [const { OnceLock::new() }; 7];
        if !(3..=crate::geometry::MAX_DIM).contains(&dim) {
            return Err(LabError::Parameter(format!(
                "the free Green function needs 3 ≤ d ≤ 6, got {dim}"
            )));
        }
        Ok(TABLES[dim].get_or_init(|| GreenTable::new(dim).expect("valid dimension")))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Absolute accuracy bound of returned values.
    pub fn accuracy(&self) -> f64 {
        self.tolerance
    }

    fn key(&self, x: &LatticePoint) -> [i32; 6] {
        let mut k = [0i32; 6];
        for (i, c) in x.coords().iter().enumerate() {
            k[i] = c.abs();
        }
        k[..self.dim].sort_unstable();
        k
    }

    /// G(0, x), computed on first use and cached up to lattice symmetry.
    pub fn free_green(&self, x: &LatticePoint) -> f64 {
        debug_assert_eq!(x.dim(), self.dim);
        let k = self.key(x);
        if self.dim == 3 && x.norm2() > FAR_FIELD_R2 {
            return quadrature::green3_asymptotic([k[0], k[1], k[2]]);
        }
        if let Some(v) = self.cache.read().expect("poisoned").get(&k) {
            return *v;
        }
        let v = if self.dim == 3 {
            quadrature::green3([k[0], k[1], k[2]])
        } else {
            quadrature::green_time_integral(&k[..self.dim])
        };
        self.cache.write().expect("poisoned").insert(k, v);
        v
    }

    /// G(x, y) = G(0, y − x).
    pub fn green(&self, x: &LatticePoint, y: &LatticePoint) -> f64 {
        self.free_green(&y.sub(x))
    }

    /// Number of distinct offsets evaluated so far.
    pub fn cached(&self) -> usize {
        self.cache.read().expect("poisoned").len()
    }
}

/// Relative residual tolerance for iterative solves.
pub const SOLVER_TOL: f64 = 1e-12;
/// Domains smaller than this are solved densely.
pub const DENSE_LIMIT: usize = 3000;

const NONE: u32 = u32::MAX;

/// A finite lattice domain with its nearest-neighbor table; the walk is killed
/// on leaving the domain.
pub struct Domain {
    set: FiniteSet,
    nbr: Vec<u32>,
    deg: usize,
    dense: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    tol: f64,
}

impl Domain {
    pub fn new(set: FiniteSet) -> Self {
        Self::with_tolerance(set, SOLVER_TOL)
    }

    pub fn with_tolerance(set: FiniteSet, tol: f64) -> Self {
        let deg = 2 * set.dim();
        let mut nbr = vec![NONE; set.len() * deg];
        for (i, p) in set.iter().enumerate() {
            for k in 0..deg {
                if let Some(j) = set.index_of(&p.neighbor(k)) {
                    nbr[i * deg + k] = j as u32;
                }
            }
        }
        let mut d = Self {
            set,
            nbr,
            deg,
            dense: None,
            tol,
        };
        if !d.is_empty() && d.len() < DENSE_LIMIT {
            let n = d.len();
            let mut m = DMatrix::<f64>::identity(n, n);
            let w = 1.0 / deg as f64;
            for i in 0..n {
                for k in 0..deg {
                    let j = d.nbr[i * deg + k];
                    if j != NONE {
                        m[(i, j as usize)] -= w;
                    }
                }
            }
            d.dense = Some(m.cholesky().expect("I - P_D is positive definite"));
        }
        d
    }

    pub fn set(&self) -> &FiniteSet {
        &self.set
    }
    pub fn len(&self) -> usize {
        self.set.len()
    }
    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }
    pub fn degree(&self) -> usize {
        self.deg
    }

    /// In-domain neighbor indices of point `i` (`None` where the neighbor is outside).
    #[inline]
    pub fn neighbor_index(&self, i: usize, k: usize) -> Option<usize> {
        let j = self.nbr[i * self.deg + k];
        (j != NONE).then_some(j as usize)
    }

    /// y = (I − P_D) x for `k` interleaved vectors.
    fn apply(&self, x: &[f64], y: &mut [f64], k: usize) {
        let w = 1.0 / self.deg as f64;
        for i in 0..self.len() {
            let yi = &mut y[i * k..(i + 1) * k];
            yi.copy_from_slice(&x[i * k..(i + 1) * k]);
            for e in 0..self.deg {
                let j = self.nbr[i * self.deg + e];
                if j != NONE {
                    let xj = &x[j as usize * k..(j as usize + 1) * k];
                    for c in 0..k {
                        yi[c] -= w * xj[c];
                    }
                }
            }
        }
    }

    /// Solves (I − P_D) u = b for `k` interleaved right-hand sides
    /// (`b[i*k + c]` is entry i of system c).
    pub fn solve_block(&self, b: &[f64], k: usize) -> Result<Vec<f64>> {
        let n = self.len();
        assert_eq!(b.len(), n * k);
        if n == 0 {
            return Ok(Vec::new());
        }
        if let Some(ch) = &self.dense {
            let mut out = vec![0.0; n * k];
            for c in 0..k {
                let rhs = DVector::from_iterator(n, (0..n).map(|i| b[i * k + c]));
                let u = ch.solve(&rhs);
                for i in 0..n {
                    out[i * k + c] = u[i];
                }
            }
            return Ok(out);
        }
        self.cg_block(b, k)
    }

    fn cg_block(&self, b: &[f64], k: usize) -> Result<Vec<f64>> {
        let n = self.len();
        let mut x = vec![0.0; n * k];
        let mut r = b.to_vec();
        let mut p = r.clone();
        let mut ap = vec![0.0; n * k];
        let dot = |a: &[f64], b: &[f64], c: usize| -> f64 {
            let mut s = 0.0;
            for i in 0..n {
                s += a[i * k + c] * b[i * k + c];
            }
            s
        };
        let bnorm: Vec<f64> = (0..k).map(|c| dot(b, b, c).sqrt()).collect();
        let mut rr: Vec<f64> = (0..k).map(|c| dot(&r, &r, c)).collect();
        let mut active: Vec<bool> = (0..k).map(|c| bnorm[c] > 0.0).collect();
        let max_iter = 20 * n + 1000;
        let mut it = 0;
        while active.iter().any(|&a| a) {
            if it >= max_iter {
                let worst = (0..k)
                    .filter(|&c| active[c])
                    .map(|c| rr[c].sqrt() / bnorm[c])
                    .fold(0.0, f64::max);
                return Err(LabError::Solver {
                    residual: worst,
                    iterations: it,
                });
            }
            it += 1;
            self.apply(&p, &mut ap, k);
            let mut alpha = vec![0.0; k];
            for c in 0..k {
                if active[c] {
                    alpha[c] = rr[c] / dot(&p, &ap, c);
                }
            }
            for i in 0..n {
                for c in 0..k {
                    let a = alpha[c];
                    x[i * k + c] += a * p[i * k + c];
                    r[i * k + c] -= a * ap[i * k + c];
                }
            }
            let mut beta = vec![0.0; k];
            for c in 0..k {
                if !active[c] {
                    continue;
                }
                let new = dot(&r, &r, c);
                beta[c] = new / rr[c];
                rr[c] = new;
                if new.sqrt() <= self.tol * bnorm[c] {
                    active[c] = false;
                }
            }
            for i in 0..n {
                for c in 0..k {
                    if active[c] {
                        p[i * k + c] = r[i * k + c] + beta[c] * p[i * k + c];
                    }
                }
            }
        }
        Ok(x)
    }

    /// Solves for one right-hand side.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.solve_block(b, 1)
    }

    /// Killed Green rows G_D(x, ·) for each source x (sources must lie in the domain).
    pub fn green_rows(&self, sources: &[LatticePoint]) -> Result<Vec<Vec<f64>>> {
        const BLOCK: usize = 8;
        let n = self.len();
        let mut out = Vec::with_capacity(sources.len());
        for chunk in sources.chunks(BLOCK) {
            let k = chunk.len();
            let mut b = vec![0.0; n * k];
            for (c, s) in chunk.iter().enumerate() {
                let i = self
                    .set
                    .index_of(s)
                    .ok_or_else(|| LabError::Domain(format!("source {s:?} outside domain")))?;
                b[i * k + c] = 1.0;
            }
            let u = self.solve_block(&b, k)?;
            for c in 0..k {
                out.push((0..n).map(|i| u[i * k + c]).collect());
            }
        }
        Ok(out)
    }

    /// Exit distribution from `start`: probability of leaving the domain
    /// through each outside point, from one Green-row solve:
    /// P[X_exit = z] = (1/2d) Σ_{x∼z, x∈D} G_D(start, x).
    pub fn exit_distribution(&self, start: &LatticePoint) -> Result<HashMap<LatticePoint, f64>> {
        let row = self.green_rows(std::slice::from_ref(start))?.remove(0);
        Ok(self.exit_from_row(&row))
    }

    /// Converts a Green row into the exit distribution on the outer boundary.
    pub fn exit_from_row(&self, row: &[f64]) -> HashMap<LatticePoint, f64> {
        let w = 1.0 / self.deg as f64;
        let mut out: HashMap<LatticePoint, f64> = HashMap::new();
        for (i, p) in self.set.iter().enumerate() {
            if row[i] == 0.0 {
                continue;
            }
            for k in 0..self.deg {
                if self.nbr[i * self.deg + k] == NONE {
                    *out.entry(p.neighbor(k)).or_insert(0.0) += w * row[i];
                }
            }
        }
        out
    }

    /// Solves the Dirichlet problem u = P u in D with u = f outside D; returns u on D.
    pub fn harmonic_extension(&self, f: impl Fn(&LatticePoint) -> f64) -> Result<Vec<f64>> {
        let w = 1.0 / self.deg as f64;
        let mut b = vec![0.0; self.len()];
        for (i, p) in self.set.iter().enumerate() {
            for k in 0..self.deg {
                if self.nbr[i * self.deg + k] == NONE {
                    b[i] += w * f(&p.neighbor(k));
                }
            }
        }
        self.solve(&b)
    }

    /// Several harmonic extensions at once, one boundary function per column.
    pub fn harmonic_extensions(
        &self,
        fs: &[&dyn Fn(&LatticePoint) -> f64],
    ) -> Result<Vec<Vec<f64>>> {
        let k = fs.len();
        let n = self.len();
        let w = 1.0 / self.deg as f64;
        let mut b = vec![0.0; n * k];
        for (i, p) in self.set.iter().enumerate() {
            for e in 0..self.deg {
                if self.nbr[i * self.deg + e] == NONE {
                    let q = p.neighbor(e);
                    for (c, f) in fs.iter().enumerate() {
                        b[i * k + c] += w * f(&q);
                    }
                }
            }
        }
        let u = self.solve_block(&b, k)?;
        Ok((0..k).map(|c| (0..n).map(|i| u[i * k + c]).collect()).collect())
    }
}

/// Absorption probabilities of the walk started at `start` into each class of
/// a partition of the outer vertex boundary of `domain`.
pub fn dirichlet_hitting(
    domain: &Domain,
    classes: &[FiniteSet],
    start: &LatticePoint,
) -> Result<Vec<f64>> {
    if !domain.set().contains(start) {
        if let Some(c) = classes.iter().position(|c| c.contains(start)) {
            let mut out = vec![0.0; classes.len()];
            out[c] = 1.0;
            return Ok(out);
        }
        return Err(LabError::Domain(format!(
            "start {start:?} is neither in the domain nor on its boundary"
        )));
    }
    let exit = domain.exit_distribution(start)?;
    let mut out = vec![0.0; classes.len()];
    for (z, p) in &exit {
        let c = classes.iter().position(|c| c.contains(z)).ok_or_else(|| {
            LabError::Input(format!("boundary point {z:?} belongs to no class"))
        })?;
        out[c] += p;
    }
    let total: f64 = out.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(LabError::Solver {
            residual: (total - 1.0).abs(),
            iterations: 0,
        });
    }
    Ok(out)
}

/// Full killed Green matrix of a (small) domain.
pub struct KilledGreenMatrix {
    pub domain: FiniteSet,
    pub matrix: DMatrix<f64>,
}

impl KilledGreenMatrix {
    pub fn entry(&self, x: &LatticePoint, y: &LatticePoint) -> Option<f64> {
        Some(self.matrix[(self.domain.index_of(x)?, self.domain.index_of(y)?)])
    }

    /// Largest violation of entry(x,y) = δ_xy + (1/2d) Σ_{x'∼x, x'∈D} entry(x',y).
    pub fn row_identity_residual(&self) -> f64 {
        let n = self.domain.len();
        let deg = 2 * self.domain.dim();
        let mut worst: f64 = 0.0;
        for (i, p) in self.domain.iter().enumerate() {
            let nbs: Vec<usize> = p.neighbors().filter_map(|q| self.domain.index_of(&q)).collect();
            for j in 0..n {
                let s: f64 = nbs.iter().map(|&a| self.matrix[(a, j)]).sum();
                let rhs = if i == j { 1.0 } else { 0.0 } + s / deg as f64;
                worst = worst.max((self.matrix[(i, j)] - rhs).abs());
            }
        }
        worst
    }
}

/// Killed Green matrix of a domain of at most `budget` points.
pub fn killed_green(domain: &FiniteSet, budget: usize) -> Result<KilledGreenMatrix> {
    if domain.len() > budget {
        return Err(LabError::Size {
            what: "killed Green domain".into(),
            size: domain.len(),
            budget,
        });
    }
    let d = Domain::new(domain.clone());
    let rows = d.green_rows(domain.points())?;
    let n = domain.len();
    let matrix = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
    Ok(KilledGreenMatrix {
        domain: domain.clone(),
        matrix,
    })
}

/// Equilibrium measure of a finite set.
#[derive(Clone, Debug)]
pub struct EquilibriumMeasure {
    pub support: FiniteSet,
    /// Weight e_A(x) for each point of `support`, in index order.
    pub weights: Vec<f64>,
    pub total: f64,
    cumulative: Vec<f64>,
}

impl EquilibriumMeasure {
    fn new(support: FiniteSet, weights: Vec<f64>) -> Self {
        let mut acc = 0.0;
        let mut cumulative = Vec::with_capacity(weights.len());
        for w in &weights {
            acc += w.max(0.0);
            cumulative.push(acc);
        }
        Self {
            support,
            total: weights.iter().sum(),
            weights,
            cumulative,
        }
    }

    pub fn weight(&self, x: &LatticePoint) -> f64 {
        self.support.index_of(x).map_or(0.0, |i| self.weights[i])
    }

    /// Normalized weight ē_A(x).
    pub fn normalized(&self, x: &LatticePoint) -> f64 {
        self.weight(x) / self.total
    }

    /// Draws a point with probability proportional to its weight.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> LatticePoint {
        let total = *self.cumulative.last().expect("empty equilibrium measure");
        let u = rng.random::<f64>() * total;
        let i = self.cumulative.partition_point(|&c| c <= u);
        self.support.point(i.min(self.support.len() - 1))
    }
}

/// Solves Σ_y G(x,y) e(y) = 1 (x ∈ A) for the equilibrium measure.
pub fn equilibrium_measure(green: &GreenTable, a: &FiniteSet) -> Result<EquilibriumMeasure> {
    if a.is_empty() {
        return Err(LabError::Input("equilibrium measure of the empty set".into()));
    }
    let n = a.len();
    if n > 5000 {
        return Err(LabError::Size {
            what: "last-exit system".into(),
            size: n,
            budget: 5000,
        });
    }
    let pts = a.points();
    let mut m = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let g = green.green(&pts[i], &pts[j]);
            m[(i, j)] = g;
            m[(j, i)] = g;
        }
    }
    let ch = m
        .cholesky()
        .ok_or_else(|| LabError::Input("singular last-exit system".into()))?;
    let e = ch.solve(&DVector::from_element(n, 1.0));
    Ok(EquilibriumMeasure::new(a.clone(), e.iter().copied().collect()))
}

/// Estimation method for [`capacity`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CapacityMethod {
    LastExitSolve,
    /// Monte Carlo escape estimate with this many walks per boundary point.
    McEscape { walks_per_point: usize },
}

/// Capacity with an error bound: the solver accuracy for the last-exit
/// system, one standard error for the Monte Carlo method.
pub fn capacity(
    green: &GreenTable,
    a: &FiniteSet,
    method: CapacityMethod,
    r_big_factor: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    match method {
        CapacityMethod::LastExitSolve => {
            if a.is_empty() {
                return Ok((0.0, 0.0));
            }
            let e = equilibrium_measure(green, a)?;
            Ok((e.total, green.accuracy() * a.len() as f64))
        }
        CapacityMethod::McEscape { walks_per_point } => {
            if a.is_empty() {
                return Err(LabError::Input("mc_escape needs a nonempty set".into()));
            }
            crate::walk::mc_escape_capacity(green, a, walks_per_point, r_big_factor, seed)
        }
    }
}

/// Capacity of an explicit point list; duplicate points make the last-exit
/// system singular and are rejected.
pub fn capacity_of_points(green: &GreenTable, pts: &[LatticePoint]) -> Result<f64> {
    let d = pts.first().map_or(green.dim(), |p| p.dim());
    let set = FiniteSet::from_points(d, pts.iter().copied());
    if set.len() != pts.len() {
        return Err(LabError::Input("duplicate points make the last-exit system singular".into()));
    }
    Ok(capacity(green, &set, CapacityMethod::LastExitSolve, 10.0, 0)?.0)
}

/// The set of outer-boundary points of a domain (convenience re-export for classes).
pub fn domain_outer_boundary(domain: &FiniteSet) -> FiniteSet {
    outer_boundary(domain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{box_set, closed_ball, open_ball};
    use proptest::prelude::*;

    fn p(c: &[i32]) -> LatticePoint {
        LatticePoint::new(c)
    }

    #[test]
    fn green_symmetries() {
        let g = GreenTable::new(3).unwrap();
        let x = p(&[3, -1, 2]);
        let mx = p(&[-3, 1, -2]);
        let perm = p(&[2, 3, -1]);
        assert_eq!(g.free_green(&x), g.free_green(&mx));
        assert_eq!(g.free_green(&x), g.free_green(&perm));
        assert!((g.free_green(&p(&[0, 0, 0])) - 1.5164).abs() < 1e-4);
    }

    #[test]
    fn green_harmonicity_residual() {
        let g = GreenTable::new(3).unwrap();
        let x = p(&[3, 1, 0]);
        let nb: f64 = x.neighbors().map(|q| g.free_green(&q)).sum::<f64>() / 6.0;
        assert!((g.free_green(&x) - nb).abs() < 1e-6);
    }

    #[test]
    fn green_four_dimensions() {
        // Return probability of the 4-d walk is 0.193206...; G(0) = 1/(1 − p).
        let g = GreenTable::new(4).unwrap();
        let g0 = g.free_green(&p(&[0, 0, 0, 0]));
        assert!((g0 - 1.0 / (1.0 - 0.193_206_8)).abs() < 1e-5, "{g0}");
        let e1 = g.free_green(&p(&[1, 0, 0, 0]));
        assert!((g0 - 1.0 - e1).abs() < 1e-6);
    }

    #[test]
    fn dirichlet_single_point() {
        let d = Domain::new(FiniteSet::from_points(3, [p(&[0, 0, 0])]));
        let o = p(&[0, 0, 0]);
        let singles: Vec<FiniteSet> = o.neighbors().map(|q| FiniteSet::from_points(3, [q])).collect();
        let h = dirichlet_hitting(&d, &singles, &o).unwrap();
        for v in h {
            assert!((v - 1.0 / 6.0).abs() < 1e-14);
        }
        let nb: Vec<_> = o.neighbors().collect();
        let two = FiniteSet::from_points(3, nb[..2].iter().copied());
        let four = FiniteSet::from_points(3, nb[2..].iter().copied());
        let h = dirichlet_hitting(&d, &[two, four], &o).unwrap();
        assert!((h[0] - 1.0 / 3.0).abs() < 1e-14 && (h[1] - 2.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn cg_and_dense_agree() {
        let set = open_ball(3, 6.0);
        let dense = Domain::new(set.clone());
        assert!(dense.dense.is_some());
        let mut it = Domain::new(set.clone());
        it.dense = None;
        let b: Vec<f64> = (0..set.len()).map(|i| ((i * 7) % 5) as f64).collect();
        let u1 = dense.solve(&b).unwrap();
        let u2 = it.solve(&b).unwrap();
        for (a, c) in u1.iter().zip(&u2) {
            assert!((a - c).abs() < 1e-9);
        }
    }

    #[test]
    fn killed_green_examples() {
        let single = killed_green(&FiniteSet::from_points(3, [p(&[0, 0, 0])]), 100).unwrap();
        assert_eq!(single.matrix[(0, 0)], 1.0);
        let ball = killed_green(&closed_ball(3, 3.0), 1000).unwrap();
        let o = p(&[0, 0, 0]);
        assert!(ball.entry(&o, &o).unwrap() < GreenTable::new(3).unwrap().free_green(&o));
        assert!(ball.row_identity_residual() < 1e-9);
        let m = &ball.matrix;
        assert!((m - m.transpose()).abs().max() < 1e-12);
        assert!(killed_green(&closed_ball(3, 3.0), 10).is_err());
    }

    #[test]
    fn capacity_small_sets() {
        let g = GreenTable::new(3).unwrap();
        let o = p(&[0, 0, 0]);
        let e1 = p(&[1, 0, 0]);
        let g0 = g.free_green(&o);
        let c0 = capacity_of_points(&g, &[o]).unwrap();
        assert!((c0 - 1.0 / g0).abs() < 1e-12);
        assert!((c0 - 0.6595).abs() < 1e-4);
        let c2 = capacity_of_points(&g, &[o, e1]).unwrap();
        assert!((c2 - 2.0 / (g0 + g.free_green(&e1))).abs() < 1e-12);
        assert_eq!(
            capacity(&g, &FiniteSet::empty(3), CapacityMethod::LastExitSolve, 10.0, 0).unwrap().0,
            0.0
        );
        assert!(capacity_of_points(&g, &[o, o]).is_err());
    }

    #[test]
    fn equilibrium_examples() {
        let g = GreenTable::new(3).unwrap();
        let cube = box_set(3, -1, 1);
        let e = equilibrium_measure(&g, &cube).unwrap();
        assert!(e.weight(&p(&[0, 0, 0])).abs() < 1e-9);
        assert!((e.weights.iter().sum::<f64>() - e.total).abs() < 1e-9);
        let single = equilibrium_measure(&g, &FiniteSet::from_points(3, [p(&[0, 0, 0])])).unwrap();
        assert!((single.weights[0] - 1.0 / g.free_green(&p(&[0, 0, 0]))).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn capacity_monotone_subadditive(
            a in prop::collection::vec((-2i32..3, -2i32..3, -2i32..3), 1..6),
            b in prop::collection::vec((-2i32..3, -2i32..3, -2i32..3), 1..6),
        ) {
            let g = GreenTable::new(3).unwrap();
            let sa = FiniteSet::from_points(3, a.iter().map(|&(x, y, z)| p(&[x, y, z])));
            let sb = FiniteSet::from_points(3, b.iter().map(|&(x, y, z)| p(&[x, y, z])));
            let u = sa.union(&sb);
            let cap = |s: &FiniteSet| capacity(&g, s, CapacityMethod::LastExitSolve, 10.0, 0).unwrap().0;
            let (ca, cb, cu) = (cap(&sa), cap(&sb), cap(&u));
            prop_assert!(ca <= cu + 1e-9);
            prop_assert!(cu <= ca + cb + 1e-9);
        }
    }
}
