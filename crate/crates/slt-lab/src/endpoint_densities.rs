//! Exact excursion-endpoint densities g_{(w,y)} on the collapsed atom space
//! (∂A1 × V) ∪ {Θ}, and the quantities derived from them.
//!
//! An excursion from w ∈ V that leaves A2^C at y and whose first A1 vertex is
//! w0 and last V vertex is y0 splits at those two times into three pieces, so
//!
//!   P_w[Ξ = (w0, y0), exit at y] = H1(w, w0) · KG(w0, y0) · E3(y0, y)
//!
//! where H1(w, ·) is the first-hit law of ∂A1 ∪ ∂A2 from w, KG is the Green
//! function of the walk killed on leaving A2^C, and E3(y0, y) is the
//! probability of leaving A2^C at y without returning to V. Dividing by
//! P4(w, y) = P_w[exit at y] gives the density. The Θ atom carries
//! H2(w, y)/P4(w, y), where H2 is the part of the first-hit law on ∂A2.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use ndarray::{s, Array2};
use rand::Rng;

use crate::error::{LabError, Result};
use crate::geometry::{label, FiniteSet, GeometryTriple, LatticePoint};
use crate::potential::{Domain, SOLVER_TOL};
use crate::slt_engine::DensityFamily;
use crate::symmetry::SymmetryGroup;
use crate::walk::{run_until, step, LabRng, Path, DEFAULT_STEP_CAP};

/// Enumeration of ∂A1 × V plus Θ (the last index).
#[derive(Clone, Debug)]
pub struct EndpointSpace {
    pub w0s: FiniteSet,
    pub y0s: FiniteSet,
}

/// A decoded atom.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Atom {
    Pair { w0: usize, y0: usize },
    Theta,
}

impl EndpointSpace {
    pub fn pair_count(&self) -> usize {
        self.w0s.len() * self.y0s.len()
    }
    pub fn len(&self) -> usize {
        self.pair_count() + 1
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    pub fn theta(&self) -> usize {
        self.pair_count()
    }
    pub fn atom(&self, w0: usize, y0: usize) -> usize {
        w0 * self.y0s.len() + y0
    }
    pub fn atom_of(&self, w0: &LatticePoint, y0: &LatticePoint) -> Option<usize> {
        Some(self.atom(self.w0s.index_of(w0)?, self.y0s.index_of(y0)?))
    }
    pub fn decode(&self, atom: usize) -> Atom {
        if atom == self.theta() {
            Atom::Theta
        } else {
            Atom::Pair {
                w0: atom / self.y0s.len(),
                y0: atom % self.y0s.len(),
            }
        }
    }
    pub fn points(&self, atom: usize) -> Option<(LatticePoint, LatticePoint)> {
        match self.decode(atom) {
            Atom::Pair { w0, y0 } => Some((self.w0s.point(w0), self.y0s.point(y0))),
            Atom::Theta => None,
        }
    }
}

/// First-hit law from one w ∈ V: on ∂A1 (`h1`) and on ∂A2 (`h2`).
#[derive(Debug)]
pub struct HRow {
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
}

/// Exit factor towards one y ∈ ∂A2: E3(·, y) on V and Kb_y = KG · E3(·, y) on ∂A1.
#[derive(Debug)]
pub struct ECol {
    pub e3: Vec<f64>,
    pub kb: Vec<f64>,
}

/// A resolved density g_{(w,y)}.
#[derive(Clone, Debug)]
pub struct Source {
    /// Index of w in V.
    pub w: usize,
    /// Index of y in ∂A2.
    pub y: usize,
    pub h: Arc<HRow>,
    pub e: Arc<ECol>,
    /// P_w[exit at y].
    pub p4: f64,
    /// g(Θ).
    pub theta: f64,
    cum_w0: Arc<Vec<f64>>,
}

/// Exact density table of one source.
#[derive(Clone, Debug)]
pub struct DensityTable {
    pub w: LatticePoint,
    pub y: LatticePoint,
    /// Masses indexed like [`EndpointSpace`], Θ last.
    pub masses: Vec<f64>,
}

impl DensityTable {
    pub fn theta(&self) -> f64 {
        *self.masses.last().unwrap()
    }
    pub fn total(&self) -> f64 {
        self.masses.iter().sum()
    }
}

/// Exact potential-theoretic data of one geometry.
pub struct DensityOracle {
    pub geometry: Arc<GeometryTriple>,
    pub space: EndpointSpace,
    sym: SymmetryGroup,
    map_a1: Vec<Vec<u32>>,
    map_v: Vec<Vec<u32>>,
    map_a2: Vec<Vec<u32>>,
    outer: Domain,
    inner: Domain,
    shell: Domain,
    /// KG(w0, y0), row-major over ∂A1 × V.
    kg: Vec<f64>,
    /// P_{y0}[H_{∂A2} < H̃_V] for y0 ∈ V.
    e_rel: Vec<f64>,
    h_rep: Mutex<HashMap<LatticePoint, Arc<HRow>>>,
    e_rep: Mutex<HashMap<LatticePoint, Arc<Vec<f64>>>>,
    h_rows: Mutex<HashMap<usize, Arc<HRow>>>,
    e_cols: Mutex<HashMap<usize, Arc<ECol>>>,
    kg_self: Mutex<HashMap<LatticePoint, f64>>,
    entrance_weight: OnceLock<Vec<f64>>,
}

/// Block size for multi-right-hand-side solves.
const BLOCK: usize = 8;

fn minus(a: &FiniteSet, b: &FiniteSet) -> FiniteSet {
    FiniteSet::from_points(a.dim(), a.iter().filter(|p| !b.contains(p)).copied())
}

impl DensityOracle {
    /// Precomputes KG on ∂A1 × V and the V-avoiding escape probabilities.
    pub fn new(geometry: Arc<GeometryTriple>) -> Result<Self> {
        Self::with_tolerance(geometry, SOLVER_TOL)
    }

    /// Like [`DensityOracle::new`] with a given relative residual for the solves.
    pub fn with_tolerance(geometry: Arc<GeometryTriple>, tol: f64) -> Result<Self> {
        let g = &*geometry;
        let sym = SymmetryGroup::preserving(&[&g.a1, &g.dilation_s, &g.a2_complement]);
        let space = EndpointSpace {
            w0s: g.boundary_a1.clone(),
            y0s: g.v.clone(),
        };
        let map_a1 = sym.index_maps(&g.boundary_a1);
        let map_v = sym.index_maps(&g.v);
        let map_a2 = sym.index_maps(&g.boundary_a2);
        let outer = Domain::with_tolerance(g.a2_complement.clone(), tol);
        let inner = Domain::with_tolerance(minus(&g.a2_complement, &g.a1), tol);
        let shell = Domain::with_tolerance(minus(&g.a2_complement, &g.dilation_s), tol);
        let nv = g.v.len();
        let nw = g.boundary_a1.len();

        // KG rows for orbit representatives of ∂A1, restricted to V.
        let reps = sym.representatives(&g.boundary_a1);
        let mut rep_rows: HashMap<LatticePoint, Vec<f64>> = HashMap::new();
        for chunk in reps.chunks(BLOCK) {
            let rows = outer.green_rows(chunk)?;
            for (p, row) in chunk.iter().zip(rows) {
                let v_row: Vec<f64> = g
                    .v
                    .iter()
                    .map(|y| row[outer.set().index_of(y).unwrap()])
                    .collect();
                rep_rows.insert(*p, v_row);
            }
        }
        let mut kg = vec![0.0; nw * nv];
        for (i, w0) in g.boundary_a1.iter().enumerate() {
            let (rep, e) = sym.canonical(w0);
            let inv = sym.position(&e.inverse());
            let row = &rep_rows[&rep];
            // KG(e(rep), y0) = KG(rep, e⁻¹ y0).
            for j in 0..nv {
                kg[i * nv + j] = row[map_v[inv][j] as usize];
            }
        }

        // e_rel from one shell solve with boundary value 1 on ∂A2, 0 on V.
        let psi = shell.harmonic_extension(|z| {
            if g.label(z) & label::BOUNDARY_A2 != 0 {
                1.0
            } else {
                0.0
            }
        })?;
        let e_rel = Self::v_average(g, &shell, &psi);

        Ok(Self {
            geometry: geometry.clone(),
            space,
            sym,
            map_a1,
            map_v,
            map_a2,
            outer,
            inner,
            shell,
            kg,
            e_rel,
            h_rep: Mutex::new(HashMap::new()),
            e_rep: Mutex::new(HashMap::new()),
            h_rows: Mutex::new(HashMap::new()),
            e_cols: Mutex::new(HashMap::new()),
            kg_self: Mutex::new(HashMap::new()),
            entrance_weight: OnceLock::new(),
        })
    }

    /// (1/2d) Σ_{x∼y0, x∈shell} φ(x) for each y0 ∈ V.
    fn v_average(g: &GeometryTriple, shell: &Domain, phi: &[f64]) -> Vec<f64> {
        let deg = 2 * g.dim;
        g.v.iter()
            .map(|y0| {
                y0.neighbors()
                    .filter_map(|x| shell.set().index_of(&x))
                    .map(|i| phi[i])
                    .sum::<f64>()
                    / deg as f64
            })
            .collect()
    }

    pub fn symmetry_order(&self) -> usize {
        self.sym.order()
    }

    pub fn kg(&self, w0: usize, y0: usize) -> f64 {
        self.kg[w0 * self.space.y0s.len() + y0]
    }

    pub fn kg_matrix(&self) -> &[f64] {
        &self.kg
    }

    /// P_{y0}[H_{∂A2} < H̃_V].
    pub fn e_rel(&self) -> &[f64] {
        &self.e_rel
    }

    fn rep_h(&self, reps: &[LatticePoint]) -> Result<()> {
        let missing: Vec<LatticePoint> = {
            let cache = self.h_rep.lock().unwrap();
            reps.iter().filter(|r| !cache.contains_key(r)).copied().collect()
        };
        let g = &*self.geometry;
        for chunk in missing.chunks(BLOCK) {
            let rows = self.inner.green_rows(chunk)?;
            for (p, row) in chunk.iter().zip(rows) {
                let exit = self.inner.exit_from_row(&row);
                let mut h1 = vec![0.0; g.boundary_a1.len()];
                let mut h2 = vec![0.0; g.boundary_a2.len()];
                for (z, m) in exit {
                    if let Some(i) = g.boundary_a1.index_of(&z) {
                        h1[i] += m;
                    } else if let Some(i) = g.boundary_a2.index_of(&z) {
                        h2[i] += m;
                    } else {
                        return Err(LabError::Oracle(format!("unexpected exit vertex {z:?}")));
                    }
                }
                self.h_rep.lock().unwrap().insert(*p, Arc::new(HRow { h1, h2 }));
            }
        }
        Ok(())
    }

    /// First-hit law of ∂A1 ∪ ∂A2 from V point `w` (index in V).
    pub fn h_row(&self, w: usize) -> Result<Arc<HRow>> {
        if let Some(r) = self.h_rows.lock().unwrap().get(&w) {
            return Ok(r.clone());
        }
        let wp = self.space.y0s.point(w);
        let (rep, e) = self.sym.canonical(&wp);
        self.rep_h(&[rep])?;
        let base = self.h_rep.lock().unwrap()[&rep].clone();
        let inv = self.sym.position(&e.inverse());
        let h1 = self.map_a1[inv].iter().map(|&k| base.h1[k as usize]).collect();
        let h2 = self.map_a2[inv].iter().map(|&k| base.h2[k as usize]).collect();
        let row = Arc::new(HRow { h1, h2 });
        self.h_rows.lock().unwrap().insert(w, row.clone());
        Ok(row)
    }

    fn rep_e(&self, reps: &[LatticePoint]) -> Result<()> {
        let missing: Vec<LatticePoint> = {
            let cache = self.e_rep.lock().unwrap();
            reps.iter().filter(|r| !cache.contains_key(r)).copied().collect()
        };
        let g = &*self.geometry;
        for chunk in missing.chunks(BLOCK) {
            let fs: Vec<Box<dyn Fn(&LatticePoint) -> f64>> = chunk
                .iter()
                .map(|y| {
                    let y = *y;
                    Box::new(move |z: &LatticePoint| (*z == y) as u8 as f64) as Box<dyn Fn(&LatticePoint) -> f64>
                })
                .collect();
            let refs: Vec<&dyn Fn(&LatticePoint) -> f64> = fs.iter().map(|f| f.as_ref()).collect();
            let phis = self.shell.harmonic_extensions(&refs)?;
            for (y, phi) in chunk.iter().zip(phis) {
                let e3 = Self::v_average(g, &self.shell, &phi);
                self.e_rep.lock().unwrap().insert(*y, Arc::new(e3));
            }
        }
        Ok(())
    }

    /// E3(·, y) on V and Kb_y on ∂A1 for ∂A2 point `y` (index in ∂A2).
    pub fn e_col(&self, y: usize) -> Result<Arc<ECol>> {
        if let Some(c) = self.e_cols.lock().unwrap().get(&y) {
            return Ok(c.clone());
        }
        let yp = self.geometry.boundary_a2.point(y);
        let (rep, e) = self.sym.canonical(&yp);
        self.rep_e(&[rep])?;
        let base = self.e_rep.lock().unwrap()[&rep].clone();
        let inv = self.sym.position(&e.inverse());
        let e3: Vec<f64> = self.map_v[inv].iter().map(|&k| base[k as usize]).collect();
        let nv = e3.len();
        let kb: Vec<f64> = (0..self.space.w0s.len())
            .map(|i| {
                let row = &self.kg[i * nv..(i + 1) * nv];
                row.iter().zip(&e3).map(|(a, b)| a * b).sum()
            })
            .collect();
        let col = Arc::new(ECol { e3, kb });
        self.e_cols.lock().unwrap().insert(y, col.clone());
        Ok(col)
    }

    /// Solves, in blocks, the representatives needed for the given sources.
    pub fn prefetch_sources(&self, ws: &[usize], ys: &[usize]) -> Result<()> {
        let g = &*self.geometry;
        let mut rw: Vec<LatticePoint> = ws.iter().map(|&w| self.sym.canonical(&g.v.point(w)).0).collect();
        rw.sort();
        rw.dedup();
        let mut ry: Vec<LatticePoint> = ys
            .iter()
            .map(|&y| self.sym.canonical(&g.boundary_a2.point(y)).0)
            .collect();
        ry.sort();
        ry.dedup();
        self.rep_h(&rw)?;
        self.rep_e(&ry)
    }

    /// Solves every orbit representative of V and ∂A2 in blocks.
    pub fn prefetch_all(&self) -> Result<()> {
        let g = &*self.geometry;
        self.rep_h(&self.sym.representatives(&g.v))?;
        self.rep_e(&self.sym.representatives(&g.boundary_a2))?;
        Ok(())
    }

    /// The density g_{(w,y)} for V index `w` and ∂A2 index `y`.
    pub fn source(&self, w: usize, y: usize) -> Result<Source> {
        let h = self.h_row(w)?;
        let e = self.e_col(y)?;
        let mut cum = Vec::with_capacity(h.h1.len());
        let mut acc = 0.0;
        for (a, b) in h.h1.iter().zip(&e.kb) {
            acc += a * b;
            cum.push(acc);
        }
        let p4 = h.h2[y] + acc;
        if p4 <= 0.0 {
            return Err(LabError::Support(format!(
                "exit at {:?} has probability zero from {:?}",
                self.geometry.boundary_a2.point(y),
                self.space.y0s.point(w)
            )));
        }
        Ok(Source {
            w,
            y,
            theta: h.h2[y] / p4,
            h,
            e,
            p4,
            cum_w0: Arc::new(cum),
        })
    }

    /// Source from lattice points.
    pub fn source_at(&self, w: &LatticePoint, y: &LatticePoint) -> Result<Source> {
        let wi = self
            .space
            .y0s
            .index_of(w)
            .ok_or_else(|| LabError::Domain(format!("{w:?} is not in V")))?;
        let yi = self
            .geometry
            .boundary_a2
            .index_of(y)
            .ok_or_else(|| LabError::Domain(format!("{y:?} is not in ∂A2")))?;
        self.source(wi, yi)
    }

    /// P_w[exit at y] from a direct solve on A2^C (independent of the factorization).
    pub fn exit_probability_direct(&self, w: &LatticePoint, y: &LatticePoint) -> Result<f64> {
        Ok(self.outer.exit_distribution(w)?.get(y).copied().unwrap_or(0.0))
    }

    /// The full table of g_{(w,y)}.
    pub fn exact_density_table(&self, w: &LatticePoint, y: &LatticePoint) -> Result<DensityTable> {
        let src = self.source_at(w, y)?;
        let n = self.space.len();
        let masses = (0..n).map(|a| self.density(&src, a)).collect();
        Ok(DensityTable {
            w: *w,
            y: *y,
            masses,
        })
    }

    /// P_{y0}[y0 →3 y] through the reversed walk: (1/2d) Σ_{x∼y, x∈shell} ψ(x),
    /// where ψ(x) is the probability of leaving the shell at y0.
    pub fn reversed_exit_factor(&self, y0: &LatticePoint, y: &LatticePoint) -> Result<f64> {
        let y0 = *y0;
        let psi = self.shell.harmonic_extension(|z| (*z == y0) as u8 as f64)?;
        let deg = 2 * self.geometry.dim;
        Ok(y.neighbors()
            .filter_map(|x| self.shell.set().index_of(&x))
            .map(|i| psi[i])
            .sum::<f64>()
            / deg as f64)
    }

    /// KG(y0, y0) for the given V indices.
    pub fn kg_diagonal_at(&self, js: &[usize]) -> Result<Vec<f64>> {
        let g = &*self.geometry;
        let reps: Vec<LatticePoint> = js.iter().map(|&j| self.sym.canonical(&g.v.point(j)).0).collect();
        let mut missing: Vec<LatticePoint> = {
            let cache = self.kg_self.lock().unwrap();
            reps.iter().filter(|r| !cache.contains_key(r)).copied().collect()
        };
        missing.sort();
        missing.dedup();
        for chunk in missing.chunks(BLOCK) {
            let rows = self.outer.green_rows(chunk)?;
            let mut cache = self.kg_self.lock().unwrap();
            for (p, row) in chunk.iter().zip(rows) {
                cache.insert(*p, row[self.outer.set().index_of(p).unwrap()]);
            }
        }
        let cache = self.kg_self.lock().unwrap();
        Ok(reps.iter().map(|r| cache[r]).collect())
    }

    /// KG(y0, y0) for every y0 ∈ V.
    pub fn kg_diagonal(&self) -> Result<Vec<f64>> {
        let all: Vec<usize> = (0..self.space.y0s.len()).collect();
        self.kg_diagonal_at(&all)
    }

    /// Probability that the walk from w0 visits y0 before leaving A2^C.
    pub fn f_a1(&self, w0: &LatticePoint, y0: &LatticePoint) -> Result<f64> {
        let i = self
            .space
            .w0s
            .index_of(w0)
            .ok_or_else(|| LabError::Domain(format!("{w0:?} is not in ∂A1")))?;
        let j = self
            .space
            .y0s
            .index_of(y0)
            .ok_or_else(|| LabError::Domain(format!("{y0:?} is not in V")))?;
        Ok(self.kg(i, j) / self.kg_diagonal_at(&[j])?[0])
    }

    /// m(w0) = Σ_w e_rel(w) H1(w, w0), from one solve on A2^C \ A1.
    pub fn entrance_weight(&self) -> Result<&[f64]> {
        if let Some(m) = self.entrance_weight.get() {
            return Ok(m);
        }
        let g = &*self.geometry;
        let mut b = vec![0.0; self.inner.len()];
        for (j, w) in g.v.iter().enumerate() {
            b[self.inner.set().index_of(w).unwrap()] = self.e_rel[j];
        }
        let u = self.inner.solve(&b)?;
        let deg = 2 * g.dim;
        let m: Vec<f64> = g
            .boundary_a1
            .iter()
            .map(|w0| {
                w0.neighbors()
                    .filter_map(|x| self.inner.set().index_of(&x))
                    .map(|i| u[i])
                    .sum::<f64>()
                    / deg as f64
            })
            .collect();
        let _ = self.entrance_weight.set(m);
        Ok(self.entrance_weight.get().unwrap())
    }

    /// cap(V)·π at every atom: the expected soft local time of one
    /// clothesline started from the normalized equilibrium measure, times
    /// cap(V). Uses that the expected number of excursions of I^u entering V
    /// at w equals u·e_rel(w).
    pub fn cap_pi(&self) -> Result<Vec<f64>> {
        let m = self.entrance_weight()?.to_vec();
        let nv = self.space.y0s.len();
        let mut out = vec![0.0; self.space.len()];
        for i in 0..self.space.w0s.len() {
            for j in 0..nv {
                out[i * nv + j] = self.kg[i * nv + j] * self.e_rel[j] * m[i];
            }
        }
        // Θ: Σ_w e_rel(w) (1 − Σ_{w0} H1(w, w0)) = Σ e_rel − Σ m.
        out[self.space.theta()] = self.e_rel.iter().sum::<f64>() - m.iter().sum::<f64>();
        Ok(out)
    }

    /// cap(V)·π at one atom.
    pub fn cap_pi_at(&self, atom: usize) -> Result<f64> {
        let m = self.entrance_weight()?;
        Ok(match self.space.decode(atom) {
            Atom::Pair { w0, y0 } => self.kg(w0, y0) * self.e_rel[y0] * m[w0],
            Atom::Theta => self.e_rel.iter().sum::<f64>() - m.iter().sum::<f64>(),
        })
    }

    /// Probability that the walk from w0 run until it leaves A2^C has its
    /// last V visit at y0.
    pub fn last_visit_probability(&self, w0: usize, y0: usize) -> f64 {
        self.kg(w0, y0) * self.e_rel[y0]
    }

    /// Largest density value over all atoms of one source (Θ excluded).
    pub fn max_pair_density(&self, src: &Source) -> (f64, usize) {
        let nv = self.space.y0s.len();
        let mut best = (0.0, 0);
        for i in 0..self.space.w0s.len() {
            let a = src.h.h1[i] / src.p4;
            if a == 0.0 {
                continue;
            }
            let row = &self.kg[i * nv..(i + 1) * nv];
            for j in 0..nv {
                let v = a * row[j] * src.e.e3[j];
                if v > best.0 {
                    best = (v, i * nv + j);
                }
            }
        }
        best
    }
}

impl DensityFamily for DensityOracle {
    type Source = Source;

    fn atom_count(&self) -> usize {
        self.space.len()
    }

    fn density(&self, src: &Source, atom: usize) -> f64 {
        let nv = self.space.y0s.len();
        if atom == self.space.theta() {
            return src.theta;
        }
        let (i, j) = (atom / nv, atom % nv);
        src.h.h1[i] * self.kg[atom] * src.e.e3[j] / src.p4
    }

    fn sample_atom(&self, src: &Source, rng: &mut LabRng) -> Result<usize> {
        if rng.random::<f64>() < src.theta {
            return Ok(self.space.theta());
        }
        let total = *src.cum_w0.last().unwrap();
        if total <= 0.0 {
            return Ok(self.space.theta());
        }
        let u = rng.random::<f64>() * total;
        let i = src.cum_w0.partition_point(|&c| c <= u).min(src.cum_w0.len() - 1);
        let nv = self.space.y0s.len();
        let row = &self.kg[i * nv..(i + 1) * nv];
        let target = rng.random::<f64>() * src.e.kb[i];
        let mut acc = 0.0;
        let mut last = 0;
        for j in 0..nv {
            let w = row[j] * src.e.e3[j];
            if w > 0.0 {
                last = j;
            }
            acc += w;
            if acc > target {
                return Ok(i * nv + j);
            }
        }
        Ok(i * nv + last)
    }

    fn accumulate(&self, steps: &[(f64, &Source)]) -> Vec<f64> {
        let nw = self.space.w0s.len();
        let nv = self.space.y0s.len();
        let (a, b) = factor_matrices(steps, nw, nv);
        let m = a.t().dot(&b);
        let mut out = Vec::with_capacity(self.space.len());
        for i in 0..nw {
            for j in 0..nv {
                out.push(self.kg[i * nv + j] * m[(i, j)]);
            }
        }
        out.push(steps.iter().map(|(x, s)| x * s.theta).sum());
        out
    }

    fn first_violation(&self, low: &[(f64, &Source)], high: &[(f64, &Source)], tol: f64) -> Option<usize> {
        let nw = self.space.w0s.len();
        let nv = self.space.y0s.len();
        let th_l: f64 = low.iter().map(|(x, s)| x * s.theta).sum();
        let th_h: f64 = high.iter().map(|(x, s)| x * s.theta).sum();
        if th_l > th_h * (1.0 + tol) + f64::MIN_POSITIVE {
            return Some(self.space.theta());
        }
        let (al, bl) = factor_matrices(low, nw, nv);
        let (ah, bh) = factor_matrices(high, nw, nv);
        const ROWS: usize = 64;
        let mut i0 = 0;
        while i0 < nw {
            let i1 = (i0 + ROWS).min(nw);
            let ml = al.slice(s![.., i0..i1]).t().dot(&bl);
            let mh = ah.slice(s![.., i0..i1]).t().dot(&bh);
            for r in 0..i1 - i0 {
                for j in 0..nv {
                    let atom = (i0 + r) * nv + j;
                    if self.kg[atom] > 0.0 && ml[(r, j)] > mh[(r, j)] * (1.0 + tol) + f64::MIN_POSITIVE {
                        return Some(atom);
                    }
                }
            }
            i0 = i1;
        }
        None
    }
}

/// A[k, i] = ξ_k H1_k(i)/P4_k and B[k, j] = E3_k(j), so that
/// G(i, j) = KG(i, j) (AᵀB)(i, j).
fn factor_matrices(steps: &[(f64, &Source)], nw: usize, nv: usize) -> (Array2<f64>, Array2<f64>) {
    let k = steps.len();
    let mut a = Array2::<f64>::zeros((k, nw));
    let mut b = Array2::<f64>::zeros((k, nv));
    for (r, (xi, s)) in steps.iter().enumerate() {
        let c = xi / s.p4;
        for i in 0..nw {
            a[(r, i)] = c * s.h.h1[i];
        }
        for j in 0..nv {
            b[(r, j)] = s.e.e3[j];
        }
    }
    (a, b)
}

/// Neighborhood statistics around a center pair.
#[derive(Clone, Debug)]
pub struct DensityNeighborhood {
    pub center: (LatticePoint, LatticePoint),
    pub radius: f64,
    pub members: usize,
    pub alpha: f64,
    pub ell: f64,
    pub sources: usize,
    /// Largest sampled g(center).
    pub max_center: f64,
}

/// α = inf over sampled sources and pairs of Γ of g(pair)/g(center), and
/// ℓ = sup over sampled sources of g(center).
pub fn alpha_ell(
    oracle: &DensityOracle,
    center: (LatticePoint, LatticePoint),
    c4: f64,
    n_sources: usize,
    rng: &mut LabRng,
) -> Result<DensityNeighborhood> {
    let sp = &oracle.space;
    let ca = sp
        .atom_of(&center.0, &center.1)
        .ok_or_else(|| LabError::Domain("center is not in ∂A1 × V".into()))?;
    let radius = c4 * oracle.geometry.s as f64;
    let w0s: Vec<usize> = sp
        .w0s
        .iter()
        .enumerate()
        .filter(|(_, p)| p.sub(&center.0).norm() <= radius)
        .map(|(i, _)| i)
        .collect();
    let y0s: Vec<usize> = sp
        .y0s
        .iter()
        .enumerate()
        .filter(|(_, p)| p.sub(&center.1).norm() <= radius)
        .map(|(i, _)| i)
        .collect();
    if w0s.is_empty() || y0s.is_empty() {
        return Err(LabError::Parameter("empty neighborhood".into()));
    }
    let nv = sp.y0s.len();
    let n_a2 = oracle.geometry.boundary_a2.len();
    let mut alpha = f64::INFINITY;
    let mut ell: f64 = 0.0;
    let mut used = 0;
    while used < n_sources {
        let w = rng.random_range(0..nv);
        let y = rng.random_range(0..n_a2);
        let src = match oracle.source(w, y) {
            Ok(s) => s,
            Err(LabError::Support(_)) => continue,
            Err(e) => return Err(e),
        };
        used += 1;
        let gc = oracle.density(&src, ca);
        ell = ell.max(gc);
        if gc <= 0.0 {
            continue;
        }
        for &i in &w0s {
            for &j in &y0s {
                alpha = alpha.min(oracle.density(&src, i * nv + j) / gc);
            }
        }
    }
    Ok(DensityNeighborhood {
        center,
        radius,
        members: w0s.len() * y0s.len(),
        alpha,
        ell,
        sources: used,
        max_center: ell,
    })
}

/// How conditional excursions are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExcursionMode {
    /// Unconditioned walks from w0 are kept when their last V visit is y0.
    Rejection { max_attempts: u64 },
    /// Rejection, falling back to the exact transform when the cap is hit.
    RejectionThenExact { max_attempts: u64 },
}

/// Walks from w0 until A2^C is left; returns the path and its last V vertex.
fn excursion_from<R: Rng + ?Sized>(
    g: &GeometryTriple,
    w0: LatticePoint,
    rng: &mut R,
) -> Result<(Path, Option<LatticePoint>)> {
    let path = run_until(w0, |x| g.label(x) & label::BOUNDARY_A2 != 0, DEFAULT_STEP_CAP, rng)?;
    let last_v = path.vertices.iter().rev().find(|x| g.label(x) & label::V != 0).copied();
    Ok((path, last_v))
}

/// A path from w0 whose last visit to V before leaving A2^C is y0. Only the
/// part up to the last visit is conditioned; the remainder is a walk from y0
/// leaving A2^C before returning to V.
pub fn sample_excursion_given_endpoints<R: Rng + ?Sized>(
    oracle: &DensityOracle,
    w0: &LatticePoint,
    y0: &LatticePoint,
    mode: ExcursionMode,
    rng: &mut R,
) -> Result<Path> {
    let g = &*oracle.geometry;
    let (i, j) = match (oracle.space.w0s.index_of(w0), oracle.space.y0s.index_of(y0)) {
        (Some(i), Some(j)) => (i, j),
        _ => return Err(LabError::Domain(format!("({w0:?}, {y0:?}) is not in ∂A1 × V"))),
    };
    if oracle.kg(i, j) <= 0.0 || oracle.e_rel()[j] <= 0.0 {
        return Err(LabError::Support(format!("({w0:?}, {y0:?}) has probability zero")));
    }
    let cap = match mode {
        ExcursionMode::Rejection { max_attempts } | ExcursionMode::RejectionThenExact { max_attempts } => {
            max_attempts
        }
    };
    for _ in 0..cap {
        let (path, last) = excursion_from(g, *w0, rng)?;
        if last == Some(*y0) {
            return Ok(path);
        }
    }
    match mode {
        ExcursionMode::Rejection { .. } => Err(LabError::RareEvent(format!(
            "no excursion from {w0:?} ended its V visits at {y0:?} in {cap} attempts; use the exact mode"
        ))),
        ExcursionMode::RejectionThenExact { .. } => exact_excursion(oracle, w0, y0, rng),
    }
}

/// Exact conditional excursion: the walk from w0 transformed by
/// h(x) = KG(x, y0), stopped at y0 with probability 1/KG(y0, y0) per visit,
/// followed by a walk from y0 conditioned to leave A2^C before returning to V.
pub fn exact_excursion<R: Rng + ?Sized>(
    oracle: &DensityOracle,
    w0: &LatticePoint,
    y0: &LatticePoint,
    rng: &mut R,
) -> Result<Path> {
    let g = &*oracle.geometry;
    let dom = &oracle.outer;
    let h = dom.green_rows(std::slice::from_ref(y0))?.remove(0);
    let hy = h[dom.set().index_of(y0).unwrap()];
    let mut x = *w0;
    let mut i = dom.set().index_of(w0).unwrap();
    let mut v = vec![x];
    let deg = dom.degree();
    loop {
        if x == *y0 && rng.random::<f64>() < 1.0 / hy {
            break;
        }
        let weights: Vec<f64> = (0..deg)
            .map(|k| dom.neighbor_index(i, k).map_or(0.0, |j| h[j].max(0.0)))
            .collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut k = 0;
        while k + 1 < deg && (u >= weights[k] || weights[k] == 0.0) {
            u -= weights[k];
            k += 1;
        }
        i = dom.neighbor_index(i, k).expect("positive weight inside the domain");
        x = x.neighbor(k);
        v.push(x);
        if v.len() as u64 > DEFAULT_STEP_CAP {
            return Err(LabError::Timeout { cap: DEFAULT_STEP_CAP, partial: v });
        }
    }
    // Tail: leave A2^C before returning to V.
    loop {
        let mut tail = vec![];
        let mut z = step(y0, rng);
        loop {
            tail.push(z);
            let l = g.label(&z);
            if l & label::BOUNDARY_A2 != 0 {
                v.extend(tail);
                return Ok(Path { vertices: v });
            }
            if l & label::DILATION_S != 0 {
                break;
            }
            z = step(&z, rng);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_geometry, Shape};
    use crate::walk::{excursion_decompose, stream_rng, EndpointPair, ExitBridge};

    fn oracle(r: i32, s: i32) -> DensityOracle {
        DensityOracle::new(Arc::new(build_geometry(Shape::Ball, r, s, 3).unwrap())).unwrap()
    }

    #[test]
    fn space_enumeration() {
        let o = oracle(4, 1);
        let sp = &o.space;
        assert_eq!(sp.len(), sp.w0s.len() * sp.y0s.len() + 1);
        assert_eq!(sp.decode(sp.theta()), Atom::Theta);
        let a = sp.atom(3, 5);
        assert_eq!(sp.decode(a), Atom::Pair { w0: 3, y0: 5 });
        assert_eq!(o.symmetry_order(), 48);
    }

    #[test]
    fn rows_sum_to_one_and_match_direct_exit() {
        let o = oracle(6, 2);
        let mut rng = stream_rng(1, 0);
        let g = o.geometry.clone();
        for _ in 0..20 {
            let w = rng.random_range(0..g.v.len());
            let y = rng.random_range(0..g.boundary_a2.len());
            let src = o.source(w, y).unwrap();
            let total: f64 = (0..o.space.len()).map(|a| o.density(&src, a)).sum();
            assert!((total - 1.0).abs() < 1e-9, "row sum {total}");
            let direct = o
                .exit_probability_direct(&g.v.point(w), &g.boundary_a2.point(y))
                .unwrap();
            assert!((direct - src.p4).abs() < 1e-9 * direct.max(1e-300) + 1e-13, "{direct} vs {}", src.p4);
        }
    }

    #[test]
    fn symmetric_rows_match_direct_solves() {
        // A non-representative w: its mapped row must equal a direct solve.
        let o = oracle(5, 2);
        let g = o.geometry.clone();
        let w = g.v.len() - 1;
        let row = o.h_row(w).unwrap();
        let direct = o.inner.exit_distribution(&g.v.point(w)).unwrap();
        for (i, p) in g.boundary_a1.iter().enumerate() {
            let d = direct.get(p).copied().unwrap_or(0.0);
            assert!((row.h1[i] - d).abs() < 1e-12);
        }
        let y = 7;
        let col = o.e_col(y).unwrap();
        for j in [0usize, 3, g.v.len() - 1] {
            let rev = o.reversed_exit_factor(&g.v.point(j), &g.boundary_a2.point(y)).unwrap();
            assert!((col.e3[j] - rev).abs() < 1e-8, "{} vs {rev}", col.e3[j]);
        }
    }

    #[test]
    fn e_rel_is_total_exit_factor() {
        let o = oracle(5, 2);
        let g = o.geometry.clone();
        let mut tot = vec![0.0; g.v.len()];
        for y in 0..g.boundary_a2.len() {
            let c = o.e_col(y).unwrap();
            for j in 0..tot.len() {
                tot[j] += c.e3[j];
            }
        }
        for j in 0..tot.len() {
            assert!((tot[j] - o.e_rel()[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn sampling_matches_table() {
        let o = oracle(4, 2);
        let g = o.geometry.clone();
        let src = o.source(0, 0).unwrap();
        let mut rng = stream_rng(2, 0);
        let n = 200_000;
        // Coarsen by w0.
        let nv = o.space.y0s.len();
        let mut counts = vec![0.0; o.space.w0s.len() + 1];
        for _ in 0..n {
            let a = o.sample_atom(&src, &mut rng).unwrap();
            let c = if a == o.space.theta() { counts.len() - 1 } else { a / nv };
            counts[c] += 1.0;
        }
        let mut exp = vec![0.0; counts.len()];
        for a in 0..o.space.len() {
            let c = if a == o.space.theta() { exp.len() - 1 } else { a / nv };
            exp[c] += o.density(&src, a) * n as f64;
        }
        let (stat, df) = exp.iter().zip(&counts).filter(|(e, _)| **e >= 5.0).fold((0.0, -1.0), |(s, d), (e, o)| {
            (s + (o - e).powi(2) / e, d + 1.0)
        });
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let p = 1.0 - ChiSquared::new(df).unwrap().cdf(stat);
        assert!(p > 0.01, "chi2 {stat} df {df}");
        let _ = g;
    }

    #[test]
    fn bridge_excursions_match_table() {
        // Endpoint frequencies of exit-conditioned excursions versus the table,
        // coarsened to the first-entry point w0 plus Θ.
        let o = oracle(4, 1);
        let g = o.geometry.clone();
        let w = g.v.point(0);
        let y = g.boundary_a2.point(0);
        let table = o.exact_density_table(&w, &y).unwrap();
        let bridge = ExitBridge::new(&g, y).unwrap();
        let mut rng = stream_rng(3, 0);
        let n = 20_000;
        let nv = o.space.y0s.len();
        let ncell = o.space.w0s.len() + 1;
        let mut counts = vec![0.0; ncell];
        for _ in 0..n {
            let path = bridge.sample(w, &mut rng).unwrap();
            let rec = excursion_decompose(path, &g).unwrap();
            let c = match rec.endpoint_pairs[0] {
                EndpointPair::Theta => ncell - 1,
                EndpointPair::Pair(a, _) => o.space.w0s.index_of(&a).unwrap(),
            };
            counts[c] += 1.0;
        }
        let mut exp = vec![0.0; ncell];
        for (a, m) in table.masses.iter().enumerate() {
            let c = if a == o.space.theta() { ncell - 1 } else { a / nv };
            exp[c] += m * n as f64;
        }
        let mut stat = 0.0;
        let mut df = -1.0;
        let (mut po, mut pe) = (0.0, 0.0);
        for (e, c) in exp.iter().zip(&counts) {
            if *e >= 10.0 {
                stat += (c - e).powi(2) / e;
                df += 1.0;
            } else {
                po += c;
                pe += e;
            }
        }
        if pe > 0.0 {
            stat += (po - pe).powi(2) / pe;
            df += 1.0;
        }
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let p = 1.0 - ChiSquared::new(df).unwrap().cdf(stat);
        assert!(p > 0.01, "chi2 {stat} df {df}");
    }

    #[test]
    fn f_a1_is_a_probability() {
        let o = oracle(3, 1);
        let g = o.geometry.clone();
        let w0 = g.boundary_a1.point(0);
        let y0 = *g.v.iter().min_by_key(|y| y.sub(&w0).norm2()).unwrap();
        let f = o.f_a1(&w0, &y0).unwrap();
        assert!(f > 0.0 && f < 1.0);
    }

    #[test]
    fn alpha_and_ell() {
        let o = oracle(6, 2);
        let g = o.geometry.clone();
        let w0 = g.boundary_a1.point(0);
        let y0 = *g.v.iter().min_by_key(|y| y.sub(&w0).norm2()).unwrap();
        let mut rng = stream_rng(4, 0);
        let solo = alpha_ell(&o, (w0, y0), 0.0, 5, &mut rng).unwrap();
        assert_eq!(solo.members, 1);
        assert_eq!(solo.alpha, 1.0);
        let nb = alpha_ell(&o, (w0, y0), 0.75, 10, &mut rng).unwrap();
        assert!(nb.members > 1);
        assert!(nb.alpha > 0.0 && nb.alpha <= 1.0);
        assert!(nb.ell > 0.0);
    }

    #[test]
    fn conditional_excursions() {
        let o = oracle(4, 1);
        let g = o.geometry.clone();
        let w0 = g.boundary_a1.point(0);
        let j = (0..g.v.len())
            .max_by(|a, b| {
                o.last_visit_probability(0, *a)
                    .partial_cmp(&o.last_visit_probability(0, *b))
                    .unwrap()
            })
            .unwrap();
        let y0 = g.v.point(j);
        let mut rng = stream_rng(5, 0);
        let audit = |path: &Path| {
            assert_eq!(path.vertices[0], w0);
            let last_v = path.vertices.iter().rev().find(|x| g.label(x) & label::V != 0);
            assert_eq!(last_v, Some(&y0));
            assert!(g.boundary_a2.contains(path.last()));
        };
        for _ in 0..50 {
            audit(&sample_excursion_given_endpoints(&o, &w0, &y0, ExcursionMode::Rejection { max_attempts: 1_000_000 }, &mut rng).unwrap());
            audit(&exact_excursion(&o, &w0, &y0, &mut rng).unwrap());
        }
        // Acceptance rate of rejection equals the exact last-visit probability.
        let p = o.last_visit_probability(0, j);
        let n = 20_000;
        let acc = (0..n)
            .filter(|_| excursion_from(&g, w0, &mut rng).unwrap().1 == Some(y0))
            .count() as f64;
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        assert!((acc / n as f64 - p).abs() < 3.0 * sd, "{} vs {p}", acc / n as f64);
        // A cap of zero attempts forces the rare-event error.
        assert!(matches!(
            sample_excursion_given_endpoints(&o, &w0, &y0, ExcursionMode::Rejection { max_attempts: 0 }, &mut rng),
            Err(LabError::RareEvent(_))
        ));
    }

    #[test]
    fn dense_accumulation_matches_pointwise() {
        let o = oracle(4, 1);
        let a = o.source(0, 0).unwrap();
        let b = o.source(3, 5).unwrap();
        let steps = vec![(0.7, &a), (1.9, &b)];
        let dense = o.accumulate(&steps);
        for atom in (0..o.space.len()).step_by(37).chain([o.space.theta()]) {
            let direct = 0.7 * o.density(&a, atom) + 1.9 * o.density(&b, atom);
            assert!((dense[atom] - direct).abs() < 1e-14 + 1e-12 * direct);
        }
        assert_eq!(o.first_violation(&steps[..1], &steps, 1e-12), None);
        assert!(o.first_violation(&steps, &steps[..1], 1e-12).is_some());
    }

    #[test]
    fn cap_pi_matches_clothesline_mean() {
        // Σ over atoms of cap(V)·π = cap(V)·E[T_Δ − 1] per walk; spot-check the
        // Θ-plus-pairs total against Σ_w e_rel(w), the expected number of
        // excursions per unit of u.
        let o = oracle(4, 1);
        let cp = o.cap_pi().unwrap();
        let total: f64 = cp.iter().sum();
        let expected: f64 = o.e_rel().iter().sum();
        assert!((total - expected).abs() < 1e-9 * expected);
    }
}
