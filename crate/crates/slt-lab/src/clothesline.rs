//! Clothesline processes: the sequence of (V-entrance, ∂A2-exit) pairs of a
//! walk's excursions, and the generalized version Cloth_u(K1, K2) built from
//! the interlacement trajectories hitting K1.

use std::sync::OnceLock;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::Serialize;

use crate::error::{LabError, Result};
use crate::geometry::{label, FiniteSet, GeometryTriple, LatticePoint};
use crate::potential::{equilibrium_measure, EquilibriumMeasure, GreenTable};
use crate::walk::{decide_return_to, run_until, step, Path, ReturnDecision, DEFAULT_STEP_CAP};

/// Law of the first entrance point W_1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClotheslineStart {
    /// Normalized equilibrium measure of V.
    Equilibrium,
    /// A fixed point of V.
    Fixed(LatticePoint),
    /// The hitting law β_y of V from y ∈ ∂A2; the realization is empty if
    /// the walk never reaches V.
    Hitting(LatticePoint),
}

/// ((W_k, Y_k))_{k < T_Δ}.
#[derive(Clone, Debug, Serialize, PartialEq, Eq)]
pub struct ClotheslineRealization {
    pub pairs: Vec<(LatticePoint, LatticePoint)>,
    /// The walk was declared to escape after the last pair.
    pub killed: bool,
    /// Index of the first cemetery slot: pairs.len() + 1.
    pub t_delta: usize,
}

/// Draws a Poisson count, treating a zero mean as the point mass at zero.
pub fn poisson_count<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> Result<u64> {
    if mean == 0.0 {
        return Ok(0);
    }
    let p = Poisson::new(mean).map_err(|e| LabError::Parameter(format!("Poisson mean {mean}: {e}")))?;
    Ok(p.sample(rng) as u64)
}

/// Walks from `start` until `target` is hit or the truncation sphere of
/// radius `r_big` is reached, where the escape decision is made with the
/// target's equilibrium measure, requested only at that point.
#[allow(clippy::too_many_arguments)]
pub(crate) fn hit_or_escape<'e, R: Rng + ?Sized>(
    start: LatticePoint,
    in_target: impl Fn(&LatticePoint) -> bool,
    target: &FiniteSet,
    eq: impl FnOnce() -> Result<&'e EquilibriumMeasure>,
    green: &GreenTable,
    r_big: f64,
    rng: &mut R,
    mut visit: impl FnMut(&LatticePoint),
) -> Result<Option<LatticePoint>> {
    let r2 = r_big * r_big;
    let mut x = start;
    let mut n = 0u64;
    loop {
        visit(&x);
        if in_target(&x) {
            return Ok(Some(x));
        }
        if x.norm2() as f64 >= r2 {
            return match decide_return_to(&x, target, green, Some(eq()?), rng)? {
                ReturnDecision::ReturnsAt(p) => {
                    visit(&p);
                    Ok(Some(p))
                }
                ReturnDecision::Escapes => Ok(None),
            };
        }
        if n == DEFAULT_STEP_CAP {
            return Err(LabError::Timeout {
                cap: DEFAULT_STEP_CAP,
                partial: vec![start, x],
            });
        }
        x = step(&x, rng);
        n += 1;
    }
}

/// Samples clotheslines of one geometry.
pub struct ClotheslineSampler {
    pub geometry: Arc<GeometryTriple>,
    pub green: &'static GreenTable,
    pub eq_v: EquilibriumMeasure,
    pub r_big: f64,
}

impl ClotheslineSampler {
    pub fn new(geometry: Arc<GeometryTriple>, r_big_factor: f64) -> Result<Self> {
        if !(r_big_factor > 1.0) {
            return Err(LabError::Parameter(format!("r_big_factor must exceed 1, got {r_big_factor}")));
        }
        let green = GreenTable::shared(geometry.dim)?;
        let eq_v = equilibrium_measure(green, &geometry.v)?;
        let r_big = geometry.r_big(r_big_factor);
        Ok(Self {
            geometry,
            green,
            eq_v,
            r_big,
        })
    }

    /// cap(V).
    pub fn cap_v(&self) -> f64 {
        self.eq_v.total
    }

    fn first_entrance<R: Rng + ?Sized>(&self, start: ClotheslineStart, rng: &mut R) -> Result<Option<LatticePoint>> {
        let g = &*self.geometry;
        match start {
            ClotheslineStart::Equilibrium => Ok(Some(self.eq_v.sample(rng))),
            ClotheslineStart::Fixed(w) => {
                if !g.v.contains(&w) {
                    return Err(LabError::Domain(format!("{w:?} is not in V")));
                }
                Ok(Some(w))
            }
            ClotheslineStart::Hitting(y) => {
                if !g.boundary_a2.contains(&y) {
                    return Err(LabError::Domain(format!("{y:?} is not in ∂A2")));
                }
                self.return_to_v(y, rng)
            }
        }
    }

    fn return_to_v<R: Rng + ?Sized>(&self, y: LatticePoint, rng: &mut R) -> Result<Option<LatticePoint>> {
        let g = &*self.geometry;
        hit_or_escape(
            y,
            |x| g.label(x) & label::V != 0,
            &g.v,
            || Ok(&self.eq_v),
            self.green,
            self.r_big,
            rng,
            |_| {},
        )
    }

    /// One clothesline.
    pub fn sample<R: Rng + ?Sized>(&self, start: ClotheslineStart, rng: &mut R) -> Result<ClotheslineRealization> {
        Ok(self.run(start, false, rng)?.0)
    }

    /// One clothesline together with the excursion paths W_k → Y_k.
    pub fn sample_with_paths<R: Rng + ?Sized>(
        &self,
        start: ClotheslineStart,
        rng: &mut R,
    ) -> Result<(ClotheslineRealization, Vec<Path>)> {
        self.run(start, true, rng)
    }

    fn run<R: Rng + ?Sized>(
        &self,
        start: ClotheslineStart,
        keep: bool,
        rng: &mut R,
    ) -> Result<(ClotheslineRealization, Vec<Path>)> {
        let g = &*self.geometry;
        let mut pairs = Vec::new();
        let mut paths = Vec::new();
        let mut w = self.first_entrance(start, rng)?;
        while let Some(wk) = w {
            let path = run_until(wk, |x| g.label(x) & label::BOUNDARY_A2 != 0, DEFAULT_STEP_CAP, rng)?;
            let yk = *path.last();
            pairs.push((wk, yk));
            if keep {
                paths.push(path);
            }
            w = self.return_to_v(yk, rng)?;
        }
        let t_delta = pairs.len() + 1;
        Ok((
            ClotheslineRealization {
                pairs,
                killed: true,
                t_delta,
            },
            paths,
        ))
    }
}

/// Cloth_u(K1, K2): one alternating K1/K2 skeleton per trajectory.
#[derive(Clone, Debug, Serialize)]
pub struct GeneralizedClothesline {
    #[serde(serialize_with = "set_points")]
    pub k1: FiniteSet,
    #[serde(serialize_with = "set_points")]
    pub k2: FiniteSet,
    pub u: f64,
    pub traces: Vec<Vec<LatticePoint>>,
}

impl GeneralizedClothesline {
    /// Consecutive (K1 point, K2 point) pairs of all traces, in order.
    pub fn pairs(&self) -> Vec<(LatticePoint, LatticePoint)> {
        let mut out = Vec::new();
        for t in &self.traces {
            for c in t.chunks(2) {
                if c.len() == 2 {
                    out.push((c[0], c[1]));
                }
            }
        }
        out
    }
}

fn set_points<S: serde::Serializer>(set: &FiniteSet, ser: S) -> std::result::Result<S::Ok, S::Error> {
    ser.collect_seq(set.points())
}

/// Reusable sampler of Cloth_u(K1, K2).
pub struct ClothSampler {
    pub k1: FiniteSet,
    pub k2: FiniteSet,
    green: &'static GreenTable,
    eq1: OnceLock<EquilibriumMeasure>,
    eq2: OnceLock<EquilibriumMeasure>,
    r_big: f64,
}

impl ClothSampler {
    pub fn new(k1: FiniteSet, k2: FiniteSet, r_big_factor: f64) -> Result<Self> {
        if k1.is_empty() {
            return Err(LabError::Input("K1 must be nonempty".into()));
        }
        if k1.dim() != k2.dim() {
            return Err(LabError::Dimension(k1.dim(), k2.dim()));
        }
        let green = GreenTable::shared(k1.dim())?;
        let eq1 = OnceLock::new();
        let _ = eq1.set(equilibrium_measure(green, &k1)?);
        let r_big = (r_big_factor * (k1.union(&k2).radius() + 1.0)).max(k1.union(&k2).radius() + 2.0);
        Ok(Self {
            k1,
            k2,
            green,
            eq1,
            eq2: OnceLock::new(),
            r_big,
        })
    }

    /// Reuses an already computed equilibrium measure of K1.
    pub fn with_equilibrium(k2: FiniteSet, eq1: EquilibriumMeasure, r_big: f64) -> Result<Self> {
        let green = GreenTable::shared(eq1.support.dim())?;
        let cell = OnceLock::new();
        let k1 = eq1.support.clone();
        let _ = cell.set(eq1);
        Ok(Self {
            k1,
            k2,
            green,
            eq1: cell,
            eq2: OnceLock::new(),
            r_big,
        })
    }

    pub fn cap_k1(&self) -> f64 {
        self.eq1.get().unwrap().total
    }

    /// The skeleton of one trajectory started at `x0` ∈ K1.
    pub fn trace<R: Rng + ?Sized>(&self, x0: LatticePoint, rng: &mut R) -> Result<Vec<LatticePoint>> {
        let mut trace = vec![x0];
        let mut x = x0;
        loop {
            let (target, eq) = if self.k1.contains(&x) {
                (&self.k2, &self.eq2)
            } else {
                (&self.k1, &self.eq1)
            };
            if target.is_empty() {
                return Ok(trace);
            }
            // Strictly after the current time.
            let next = step(&x, rng);
            let lazy_eq = || -> Result<&EquilibriumMeasure> {
                if eq.get().is_none() {
                    let _ = eq.set(equilibrium_measure(self.green, target)?);
                }
                Ok(eq.get().unwrap())
            };
            match hit_or_escape(next, |p| target.contains(p), target, lazy_eq, self.green, self.r_big, rng, |_| {})? {
                Some(p) => {
                    trace.push(p);
                    x = p;
                }
                None => return Ok(trace),
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, u: f64, rng: &mut R) -> Result<GeneralizedClothesline> {
        if !(u >= 0.0) {
            return Err(LabError::Parameter(format!("level u must be nonnegative, got {u}")));
        }
        let n = poisson_count(u * self.cap_k1(), rng)?;
        let eq1 = self.eq1.get().unwrap();
        let mut traces = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let x0 = eq1.sample(rng);
            traces.push(self.trace(x0, rng)?);
        }
        Ok(GeneralizedClothesline {
            k1: self.k1.clone(),
            k2: self.k2.clone(),
            u,
            traces,
        })
    }
}

/// One-off Cloth_u(K1, K2).
pub fn sample_cloth_u<R: Rng + ?Sized>(
    k1: &FiniteSet,
    k2: &FiniteSet,
    u: f64,
    r_big_factor: f64,
    rng: &mut R,
) -> Result<GeneralizedClothesline> {
    ClothSampler::new(k1.clone(), k2.clone(), r_big_factor)?.sample(u, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_geometry, Shape};
    use crate::walk::stream_rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    use std::collections::HashMap;

    fn sampler() -> ClotheslineSampler {
        ClotheslineSampler::new(Arc::new(build_geometry(Shape::Ball, 4, 1, 3).unwrap()), 4.0).unwrap()
    }

    fn chi2_two_sample(a: &HashMap<i64, f64>, b: &HashMap<i64, f64>) -> f64 {
        let na: f64 = a.values().sum();
        let nb: f64 = b.values().sum();
        let mut keys: Vec<i64> = a.keys().chain(b.keys()).copied().collect();
        keys.sort();
        keys.dedup();
        let (mut stat, mut df) = (0.0, -1.0);
        let (mut ra, mut rb) = (0.0, 0.0);
        let mut cells = vec![];
        for k in keys {
            let (x, y) = (a.get(&k).copied().unwrap_or(0.0), b.get(&k).copied().unwrap_or(0.0));
            if x + y < 20.0 {
                ra += x;
                rb += y;
            } else {
                cells.push((x, y));
            }
        }
        if ra + rb > 0.0 {
            cells.push((ra, rb));
        }
        for (x, y) in cells {
            let t = x + y;
            let ea = t * na / (na + nb);
            let eb = t * nb / (na + nb);
            stat += (x - ea).powi(2) / ea + (y - eb).powi(2) / eb;
            df += 1.0;
        }
        1.0 - ChiSquared::new(df).unwrap().cdf(stat)
    }

    // Octant-and-axis cell of a point.
    fn cell(p: &LatticePoint) -> i64 {
        let c = p.coords();
        let mut k = 0i64;
        for (i, x) in c.iter().enumerate() {
            k += 3i64.pow(i as u32) * (x.signum() as i64 + 1);
        }
        k
    }

    #[test]
    fn membership_and_fixed_start() {
        let s = sampler();
        let g = s.geometry.clone();
        let mut rng = stream_rng(1, 0);
        let w0 = g.v.point(3);
        for _ in 0..200 {
            let c = s.sample(ClotheslineStart::Fixed(w0), &mut rng).unwrap();
            assert_eq!(c.pairs[0].0, w0);
            assert_eq!(c.t_delta, c.pairs.len() + 1);
            for (w, y) in &c.pairs {
                assert!(g.v.contains(w) && g.boundary_a2.contains(y));
            }
        }
        let y = g.boundary_a2.point(0);
        let mut empty = 0;
        for _ in 0..300 {
            let c = s.sample(ClotheslineStart::Hitting(y), &mut rng).unwrap();
            empty += c.pairs.is_empty() as usize;
        }
        assert!(empty > 0 && empty < 300);
        assert!(s.sample(ClotheslineStart::Fixed(g.boundary_a2.point(0)), &mut rng).is_err());
    }

    #[test]
    fn geometric_tail_of_t_delta() {
        let s = sampler();
        let mut rng = stream_rng(2, 0);
        let n = 10_000;
        let mut counts = vec![0usize; 64];
        for _ in 0..n {
            let c = s.sample(ClotheslineStart::Equilibrium, &mut rng).unwrap();
            counts[c.t_delta.min(63)] += 1;
        }
        // P[T_Δ > k] for k ≥ 1.
        let surv = |k: usize| counts[k + 1..].iter().sum::<usize>() as f64;
        for k in 1..=10 {
            if surv(k) < 30.0 {
                break;
            }
            let ratio = surv(k + 1) / surv(k);
            assert!(ratio < 0.95, "k={k} ratio {ratio}");
        }
    }

    #[test]
    fn markov_property_across_k() {
        // Law of W_{k+1} given that Y_k lies in a fixed octant cell, k = 1 vs 2.
        let s = sampler();
        let mut rng = stream_rng(3, 0);
        let mut by_k = [HashMap::new(), HashMap::new()];
        let target_cell = cell(&LatticePoint::new(&[1, 1, 1]));
        let mut n = 0;
        while n < 10_000 {
            let c = s.sample(ClotheslineStart::Equilibrium, &mut rng).unwrap();
            n += 1;
            for k in 0..2 {
                if c.pairs.len() > k + 1 && cell(&c.pairs[k].1) == target_cell {
                    *by_k[k].entry(cell(&c.pairs[k + 1].0)).or_insert(0.0) += 1.0;
                }
            }
        }
        let p = chi2_two_sample(&by_k[0], &by_k[1]);
        assert!(p > 0.01, "p = {p}");
    }

    #[test]
    fn cloth_of_a_point_is_geometric() {
        let o = FiniteSet::from_points(3, [LatticePoint::origin(3)]);
        let cs = ClothSampler::new(o.clone(), o.clone(), 8.0).unwrap();
        let cap = cs.cap_k1();
        let mut rng = stream_rng(4, 0);
        let (mut visits, mut traces) = (0.0, 0.0);
        for _ in 0..3000 {
            let c = cs.sample(2.0, &mut rng).unwrap();
            for t in &c.traces {
                assert!(t.iter().all(|p| *p == LatticePoint::origin(3)));
                visits += t.len() as f64;
                traces += 1.0;
            }
        }
        // Mean run length 1/cap({0}) = G(0).
        let mean = visits / traces;
        let sd = ((1.0 - cap) / (cap * cap) / traces).sqrt();
        assert!((mean - 1.0 / cap).abs() < 4.0 * sd, "{mean} vs {}", 1.0 / cap);
        assert!(cs.sample(0.0, &mut rng).unwrap().traces.is_empty());
    }

    #[test]
    fn cloth_skeleton_matches_clothesline() {
        let s = sampler();
        let g = s.geometry.clone();
        let cs = ClothSampler::with_equilibrium(g.boundary_a2.clone(), s.eq_v.clone(), s.r_big).unwrap();
        let mut rng = stream_rng(5, 0);
        let (mut a, mut b) = (HashMap::new(), HashMap::new());
        let key = |w: &LatticePoint, y: &LatticePoint| cell(w) * 100 + cell(y);
        let mut n = 0;
        while n < 10_000 {
            for t in cs.sample(1.0, &mut rng).unwrap().traces {
                if n < 10_000 && t.len() >= 2 {
                    *a.entry(key(&t[0], &t[1])).or_insert(0.0) += 1.0;
                    n += 1;
                }
            }
        }
        for _ in 0..10_000 {
            let c = s.sample(ClotheslineStart::Equilibrium, &mut rng).unwrap();
            let (w, y) = c.pairs[0];
            *b.entry(key(&w, &y)).or_insert(0.0) += 1.0;
        }
        let p = chi2_two_sample(&a, &b);
        assert!(p > 0.01, "p = {p}");
    }

    #[test]
    fn json_round_trip_shape() {
        let s = sampler();
        let mut rng = stream_rng(6, 0);
        let c = s.sample(ClotheslineStart::Equilibrium, &mut rng).unwrap();
        let j = serde_json::to_value(&c).unwrap();
        assert_eq!(j["pairs"].as_array().unwrap().len(), c.pairs.len());
        assert_eq!(j["t_delta"], c.t_delta);
    }

    #[test]
    fn entrance_counts_match_escape_weights() {
        // cap(V)·E[#{k : W_k ∈ C}] = Σ_{w∈C} P_w[H_{∂A2} < H̃_V] for coarse cells C.
        use crate::endpoint_densities::DensityOracle;
        let s = sampler();
        let o = DensityOracle::new(s.geometry.clone()).unwrap();
        let g = s.geometry.clone();
        let mut rng = stream_rng(7, 0);
        let n = 20_000;
        let mut counts: HashMap<i64, (f64, f64)> = HashMap::new();
        let mut per_clothesline: Vec<HashMap<i64, f64>> = Vec::with_capacity(n);
        for _ in 0..n {
            let c = s.sample(ClotheslineStart::Equilibrium, &mut rng).unwrap();
            let mut m = HashMap::new();
            for (w, _) in &c.pairs {
                *m.entry(cell(w)).or_insert(0.0) += 1.0;
            }
            per_clothesline.push(m);
        }
        for m in &per_clothesline {
            for (k, v) in m {
                let e = counts.entry(*k).or_insert((0.0, 0.0));
                e.0 += v;
                e.1 += v * v;
            }
        }
        let mut expected: HashMap<i64, f64> = HashMap::new();
        for (j, w) in g.v.iter().enumerate() {
            *expected.entry(cell(w)).or_insert(0.0) += o.e_rel()[j];
        }
        let cap = s.cap_v();
        for (k, exp) in expected {
            let (s1, s2) = counts.get(&k).copied().unwrap_or((0.0, 0.0));
            let mean = s1 / n as f64;
            let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
            assert!((cap * mean - exp).abs() < 4.0 * cap * se + 1e-12, "cell {k}: {} vs {exp}", cap * mean);
        }
    }

    #[test]
    fn first_excursions_agree_with_soup() {
        use crate::interlacements::SoupSampler;
        use crate::walk::{excursion_decompose, EndpointPair};
        let s = sampler();
        let g = s.geometry.clone();
        let mut soup = SoupSampler::new(g.v.clone(), 4.0).unwrap();
        soup.keep_paths = true;
        let mut rng = stream_rng(8, 0);
        let key = |e: &EndpointPair| match e {
            EndpointPair::Theta => -1,
            EndpointPair::Pair(w0, y0) => cell(w0) * 100 + cell(y0),
        };
        let (mut a, mut b) = (HashMap::new(), HashMap::new());
        let mut n = 0;
        while n < 10_000 {
            for arr in soup.sample(1.0, &mut rng).unwrap().arrivals {
                let rec = excursion_decompose(arr.path.unwrap(), &g).unwrap();
                *a.entry(key(&rec.endpoint_pairs[0])).or_insert(0.0) += 1.0;
                n += 1;
            }
        }
        for _ in 0..10_000 {
            let (_, paths) = s.sample_with_paths(ClotheslineStart::Equilibrium, &mut rng).unwrap();
            let rec = excursion_decompose(paths[0].clone(), &g).unwrap();
            *b.entry(key(&rec.endpoint_pairs[0])).or_insert(0.0) += 1.0;
        }
        let p = chi2_two_sample(&a, &b);
        assert!(p > 0.01, "p = {p}");
    }
}
