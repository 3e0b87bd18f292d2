//! Simple random walk primitives: stopped runs, excursion decomposition,
//! exit-conditioned bridges and far-field return decisions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{LabError, Result};
use crate::geometry::{label, FiniteSet, GeometryTriple, LatticePoint};
use crate::potential::{Domain, EquilibriumMeasure, GreenTable};

/// Default guard on the number of steps of a single run.
pub const DEFAULT_STEP_CAP: u64 = 100_000_000;

/// Generator used throughout the crate.
pub type LabRng = ChaCha8Rng;

/// A reproducible random stream identified by (seed, stream id).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// A fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> LabRng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(self.stream);
        r
    }
}

/// Shorthand for `RngStream::new(seed, stream).rng()`.
pub fn stream_rng(seed: u64, stream: u64) -> LabRng {
    RngStream::new(seed, stream).rng()
}

/// A nearest-neighbor path.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct Path {
    pub vertices: Vec<LatticePoint>,
}

impl Path {
    pub fn new(vertices: Vec<LatticePoint>) -> Result<Self> {
        if vertices.is_empty() {
            return Err(LabError::Input("a path needs at least one vertex".into()));
        }
        if let Some(w) = vertices.windows(2).find(|w| !w[0].is_neighbor(&w[1])) {
            return Err(LabError::Input(format!(
                "{:?} and {:?} are not nearest neighbors",
                w[0], w[1]
            )));
        }
        Ok(Self { vertices })
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }
    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }
    pub fn first(&self) -> &LatticePoint {
        &self.vertices[0]
    }
    pub fn last(&self) -> &LatticePoint {
        self.vertices.last().expect("paths are nonempty")
    }
}

/// One uniformly chosen neighbor of `x`.
#[inline]
pub fn step<R: Rng + ?Sized>(x: &LatticePoint, rng: &mut R) -> LatticePoint {
    x.neighbor(rng.random_range(0..2 * x.dim()))
}

/// Runs the walk from `start` until the first vertex satisfying `stop`.
pub fn run_until<R: Rng + ?Sized>(
    start: LatticePoint,
    stop: impl Fn(&LatticePoint) -> bool,
    step_cap: u64,
    rng: &mut R,
) -> Result<Path> {
    if step_cap == 0 {
        return Err(LabError::Parameter("step_cap must be positive".into()));
    }
    let mut v = vec![start];
    let mut x = start;
    let mut n = 0u64;
    while !stop(&x) {
        if n == step_cap {
            return Err(LabError::Timeout { cap: step_cap, partial: v });
        }
        x = step(&x, rng);
        v.push(x);
        n += 1;
    }
    Ok(Path { vertices: v })
}

/// Like [`run_until`] but only returns the stopping vertex and the number of steps.
pub fn run_until_endpoint<R: Rng + ?Sized>(
    start: LatticePoint,
    stop: impl Fn(&LatticePoint) -> bool,
    step_cap: u64,
    rng: &mut R,
) -> Result<(LatticePoint, u64)> {
    let mut x = start;
    let mut n = 0u64;
    while !stop(&x) {
        if n == step_cap {
            return Err(LabError::Timeout { cap: step_cap, partial: vec![start, x] });
        }
        x = step(&x, rng);
        n += 1;
    }
    Ok((x, n))
}

/// The endpoint pair of an excursion: (first A1 vertex, last V vertex), or Θ.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum EndpointPair {
    Theta,
    Pair(LatticePoint, LatticePoint),
}

/// Excursion times of a path started in V: D_0 = 0, R_k the first ∂A2 hit after
/// D_{k−1}, D_k the first V hit after R_k.
#[derive(Clone, Debug, Serialize)]
pub struct ExcursionRecord {
    pub path: Path,
    pub d_times: Vec<usize>,
    pub r_times: Vec<usize>,
    /// One pair for each completed excursion [D_{k−1}, R_k].
    pub endpoint_pairs: Vec<EndpointPair>,
}

impl ExcursionRecord {
    /// Consecutive segments [D_0, R_1], [R_1, D_1], [D_1, R_2], … (shared
    /// endpoints) plus the unfinished tail.
    pub fn segments(&self) -> Vec<&[LatticePoint]> {
        let mut cuts = Vec::new();
        for (k, &r) in self.r_times.iter().enumerate() {
            cuts.push(self.d_times[k]);
            cuts.push(r);
        }
        if self.d_times.len() > self.r_times.len() {
            cuts.push(*self.d_times.last().unwrap());
        }
        cuts.push(self.path.len() - 1);
        cuts.dedup();
        cuts.windows(2).map(|w| &self.path.vertices[w[0]..=w[1]]).collect()
    }

    /// Concatenates the segments back into the original vertex sequence.
    pub fn reassemble(&self) -> Vec<LatticePoint> {
        let mut out: Vec<LatticePoint> = Vec::new();
        for seg in self.segments() {
            if out.is_empty() {
                out.extend_from_slice(seg);
            } else {
                out.extend_from_slice(&seg[1..]);
            }
        }
        if out.is_empty() {
            out.push(*self.path.first());
        }
        out
    }
}

/// Splits a path started in V into excursions between V and ∂A2.
pub fn excursion_decompose(path: Path, g: &GeometryTriple) -> Result<ExcursionRecord> {
    if g.label(path.first()) & label::V == 0 {
        return Err(LabError::Domain(format!(
            "path starts at {:?}, which is not in V",
            path.first()
        )));
    }
    let mut d_times = vec![0usize];
    let mut r_times = Vec::new();
    let mut pairs = Vec::new();
    // Inside an excursion: the first A1 vertex and the latest V vertex seen after it.
    let mut first_a1: Option<LatticePoint> = None;
    let mut last_v: Option<LatticePoint> = None;
    let mut in_excursion = true;
    for (t, x) in path.vertices.iter().enumerate() {
        let l = g.label(x);
        if in_excursion {
            if l & label::BOUNDARY_A2 != 0 {
                r_times.push(t);
                pairs.push(match (first_a1, last_v) {
                    (Some(w0), Some(y0)) => EndpointPair::Pair(w0, y0),
                    (None, _) => EndpointPair::Theta,
                    (Some(_), None) => {
                        return Err(LabError::Domain(
                            "excursion left A1 without crossing V".into(),
                        ))
                    }
                });
                first_a1 = None;
                last_v = None;
                in_excursion = false;
                continue;
            }
            if l & label::A1 != 0 && first_a1.is_none() {
                first_a1 = Some(*x);
            }
            if l & label::V != 0 && first_a1.is_some() {
                last_v = Some(*x);
            }
        } else if l & label::V != 0 {
            d_times.push(t);
            in_excursion = true;
        }
    }
    Ok(ExcursionRecord {
        path,
        d_times,
        r_times,
        endpoint_pairs: pairs,
    })
}

/// Exit-conditioned walk in A2^C towards a fixed exit vertex, realized by the
/// Doob transform with h(x) = P_x[X_{H_{∂A2}} = y].
pub struct ExitBridge<'g> {
    geometry: &'g GeometryTriple,
    domain: Domain,
    target: LatticePoint,
    h: Vec<f64>,
}

impl<'g> ExitBridge<'g> {
    /// Solves for h once; the bridge can then be sampled from any start.
    pub fn new(g: &'g GeometryTriple, y: LatticePoint) -> Result<Self> {
        if !g.boundary_a2.contains(&y) {
            return Err(LabError::Domain(format!("{y:?} is not in ∂A2")));
        }
        let domain = Domain::new(g.a2_complement.clone());
        let h = domain.harmonic_extension(|z| if *z == y { 1.0 } else { 0.0 })?;
        Ok(Self {
            geometry: g,
            domain,
            target: y,
            h,
        })
    }

    /// h at a point of A2^C ∪ ∂A2.
    pub fn h(&self, x: &LatticePoint) -> f64 {
        match self.domain.set().index_of(x) {
            Some(i) => self.h[i].max(0.0),
            None => (*x == self.target) as u8 as f64,
        }
    }

    pub fn target(&self) -> LatticePoint {
        self.target
    }

    /// Samples the conditioned path from `w` (any point of A2^C) to the target.
    pub fn sample<R: Rng + ?Sized>(&self, w: LatticePoint, rng: &mut R) -> Result<Path> {
        let hw = self.h(&w);
        if self.domain.set().index_of(&w).is_none() {
            return Err(LabError::Domain(format!("{w:?} is not in A2^C")));
        }
        if hw <= 0.0 {
            return Err(LabError::Support(format!(
                "exit at {:?} has probability zero from {w:?}",
                self.target
            )));
        }
        let deg = self.domain.degree();
        let mut v = vec![w];
        let mut i = self.domain.set().index_of(&w).unwrap();
        let mut x = w;
        let mut weights = vec![0.0; deg];
        loop {
            let mut total = 0.0;
            for (k, wk) in weights.iter_mut().enumerate() {
                *wk = match self.domain.neighbor_index(i, k) {
                    Some(j) => self.h[j].max(0.0),
                    None => (x.neighbor(k) == self.target) as u8 as f64,
                };
                total += *wk;
            }
            let mut u = rng.random::<f64>() * total;
            let mut k = 0;
            while k + 1 < deg && u >= weights[k] {
                u -= weights[k];
                k += 1;
            }
            while weights[k] == 0.0 {
                k -= 1;
            }
            x = x.neighbor(k);
            v.push(x);
            match self.domain.neighbor_index(i, k) {
                Some(j) => i = j,
                None => break,
            }
            if v.len() as u64 > DEFAULT_STEP_CAP {
                return Err(LabError::Timeout { cap: DEFAULT_STEP_CAP, partial: v });
            }
        }
        debug_assert_eq!(self.geometry.label(&x) & label::BOUNDARY_A2, label::BOUNDARY_A2);
        Ok(Path { vertices: v })
    }
}

/// One bridge from `w ∈ V` conditioned to leave A2^C at `y`.
pub fn sample_exit_bridge<R: Rng + ?Sized>(
    w: LatticePoint,
    y: LatticePoint,
    g: &GeometryTriple,
    rng: &mut R,
) -> Result<Path> {
    if g.label(&w) & label::V == 0 {
        return Err(LabError::Domain(format!("{w:?} is not in V")));
    }
    ExitBridge::new(g, y)?.sample(w, rng)
}

/// Outcome of a far-field return decision.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReturnDecision {
    ReturnsAt(LatticePoint),
    Escapes,
}

/// Return probability Σ_y G(x, y) e_target(y) from the last-exit identity.
pub fn return_probability(green: &GreenTable, eq: &EquilibriumMeasure, x: &LatticePoint) -> f64 {
    eq.support
        .iter()
        .zip(&eq.weights)
        .map(|(y, e)| green.green(x, y) * e)
        .sum()
}

/// Decides whether the walk at `x` (outside the truncation sphere) ever comes
/// back to the target; a return point is drawn from the normalized
/// equilibrium measure, which is the limit of the hitting law as |x| → ∞.
pub fn decide_return_to<R: Rng + ?Sized>(
    x: &LatticePoint,
    target: &FiniteSet,
    green: &GreenTable,
    eq: Option<&EquilibriumMeasure>,
    rng: &mut R,
) -> Result<ReturnDecision> {
    if target.is_empty() {
        return Ok(ReturnDecision::Escapes);
    }
    let eq = eq.ok_or_else(|| LabError::Input("nonempty target needs its equilibrium measure".into()))?;
    let p = return_probability(green, eq, x);
    if !(p <= 1.0) {
        return Err(LabError::Oracle(format!("return probability {p} exceeds 1 at {x:?}")));
    }
    if rng.random::<f64>() < p {
        Ok(ReturnDecision::ReturnsAt(eq.sample(rng)))
    } else {
        Ok(ReturnDecision::Escapes)
    }
}

/// Walks from `start` until the target is hit, returning the hit point, or
/// `None` if the walk escapes. The walk is simulated until it hits the target
/// or leaves the ball of radius `r_big`; a return decision is then made and,
/// on return, the walk restarts at the sampled return point (which is in the
/// target). `visit` sees every simulated vertex.
#[allow(clippy::too_many_arguments)]
pub fn walk_to_target_or_escape<R: Rng + ?Sized>(
    start: LatticePoint,
    in_target: impl Fn(&LatticePoint) -> bool,
    target: &FiniteSet,
    green: &GreenTable,
    eq: &EquilibriumMeasure,
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
            return match decide_return_to(&x, target, green, Some(eq), rng)? {
                ReturnDecision::ReturnsAt(p) => {
                    visit(&p);
                    Ok(Some(p))
                }
                ReturnDecision::Escapes => Ok(None),
            };
        }
        if n == DEFAULT_STEP_CAP {
            return Err(LabError::Timeout { cap: DEFAULT_STEP_CAP, partial: vec![start, x] });
        }
        x = step(&x, rng);
        n += 1;
    }
}

/// Monte Carlo capacity: for each boundary point x of A, estimates
/// P_x[H̃_A = ∞] from walks run until they return to A or reach radius
/// R_big, where the exact remaining escape probability 1 − p_ret is credited.
pub fn mc_escape_capacity(
    green: &GreenTable,
    a: &FiniteSet,
    walks_per_point: usize,
    r_big_factor: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    if walks_per_point < 2 {
        return Err(LabError::Parameter("mc_escape needs at least 2 walks per point".into()));
    }
    let eq = crate::potential::equilibrium_measure(green, a)?;
    let r_big = (r_big_factor * (a.radius() + 1.0)).max(a.radius() + 2.0);
    let r2 = r_big * r_big;
    let boundary = crate::geometry::boundary(a);
    let mut total = 0.0;
    let mut var = 0.0;
    for (idx, x) in boundary.iter().enumerate() {
        let mut rng = stream_rng(seed, idx as u64);
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..walks_per_point {
            let mut y = step(x, &mut rng);
            let v = loop {
                if a.contains(&y) {
                    break 0.0;
                }
                if y.norm2() as f64 >= r2 {
                    break 1.0 - return_probability(green, &eq, &y);
                }
                y = step(&y, &mut rng);
            };
            s1 += v;
            s2 += v * v;
        }
        let n = walks_per_point as f64;
        let mean = s1 / n;
        total += mean;
        var += (s2 / n - mean * mean).max(0.0) / (n - 1.0);
    }
    Ok((total, var.sqrt()))
}

/// Visit-count estimate of the 3-d Green function G(0, x) for several
/// offsets at once: walks from 0 count visits to each x until they first
/// reach |y| ≥ radius, and the expected visits after that are credited with
/// the two-term far-field expansion G(y − x). Returns (mean, standard error)
/// per offset.
pub fn green_visit_oracle(offsets: &[[i32; 3]], walks: usize, radius: f64, seed: u64) -> Result<Vec<(f64, f64)>> {
    if walks < 2 {
        return Err(LabError::Parameter("the visit oracle needs at least 2 walks".into()));
    }
    let far = offsets.iter().map(|x| x.iter().map(|&c| (c as f64).powi(2)).sum::<f64>().sqrt()).fold(0.0, f64::max);
    if radius < far + 10.0 {
        return Err(LabError::Parameter(format!("radius {radius} is too close to the offsets")));
    }
    let r2 = (radius * radius).ceil() as i64;
    let k = offsets.len();
    let mut s1 = vec![0.0; k];
    let mut s2 = vec![0.0; k];
    let mut rng = stream_rng(seed, 0);
    let mut visits = vec![0u32; k];
    for _ in 0..walks {
        visits.iter_mut().for_each(|v| *v = 0);
        let mut y = [0i32; 3];
        loop {
            for (j, x) in offsets.iter().enumerate() {
                if *x == y {
                    visits[j] += 1;
                }
            }
            let n2 = y.iter().map(|&c| c as i64 * c as i64).sum::<i64>();
            if n2 >= r2 {
                break;
            }
            let m = rng.random_range(0..6u32);
            y[(m >> 1) as usize] += if m & 1 == 0 { 1 } else { -1 };
        }
        for (j, x) in offsets.iter().enumerate() {
            let tail = crate::quadrature::green3_asymptotic([y[0] - x[0], y[1] - x[1], y[2] - x[2]]);
            let v = visits[j] as f64 + tail;
            s1[j] += v;
            s2[j] += v * v;
        }
    }
    let n = walks as f64;
    Ok((0..k)
        .map(|j| {
            let m = s1[j] / n;
            (m, ((s2[j] / n - m * m).max(0.0) / (n - 1.0)).sqrt())
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_geometry, Shape};
    use std::collections::HashMap;

    fn p(c: &[i32]) -> LatticePoint {
        LatticePoint::new(c)
    }

    #[test]
    fn visit_oracle_brackets_green() {
        let g = GreenTable::new(3).unwrap();
        let offs = [[0, 0, 0], [1, 0, 0]];
        let est = green_visit_oracle(&offs, 100_000, 12.0, 3).unwrap();
        for (x, (m, se)) in offs.iter().zip(&est) {
            let exact = g.free_green(&p(x));
            assert!((m - exact).abs() < 4.0 * se, "{x:?}: {m} ± {se} vs {exact}");
        }
        assert!(green_visit_oracle(&offs, 10, 5.0, 0).is_err());
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map(|_| stream_rng(7, 1).random()).collect();
        let mut r1 = stream_rng(7, 1);
        let b: Vec<u64> = (0..4).map(|_| r1.random()).collect();
        let mut r2 = stream_rng(7, 2);
        let c: Vec<u64> = (0..4).map(|_| r2.random()).collect();
        assert_eq!(a[0], b[0]);
        assert_ne!(b, c);
    }

    #[test]
    fn run_until_examples() {
        let mut rng = stream_rng(1, 0);
        let o = p(&[0, 0, 0]);
        let path = run_until(o, |_| true, 10, &mut rng).unwrap();
        assert_eq!(path.vertices, vec![o]);
        let path = run_until(o, |x| x.linf() >= 1, 10, &mut rng).unwrap();
        assert_eq!(path.len(), 2);
        match run_until(o, |x| x.norm() >= 50.0, 10, &mut rng) {
            Err(LabError::Timeout { cap, partial }) => {
                assert_eq!(cap, 10);
                assert_eq!(partial.len(), 11);
                assert!(Path::new(partial).is_ok());
            }
            other => panic!("expected timeout, got {other:?}"),
        }
    }

    fn straight(from: LatticePoint, axis: usize, steps: i32, sign: i32) -> Vec<LatticePoint> {
        (0..=steps)
            .map(|k| from.add(&LatticePoint::axis(3, axis, sign * k)))
            .collect()
    }

    #[test]
    fn decompose_hand_built_paths() {
        let g = build_geometry(Shape::Ball, 6, 2, 3).unwrap();
        // The +x axis: A1 up to 5, V at 7, A2^C up to 9, ∂A2 at 10.
        assert!(g.v.contains(&p(&[7, 0, 0])));
        assert!(g.boundary_a2.contains(&p(&[10, 0, 0])));
        let out = straight(p(&[7, 0, 0]), 0, 3, 1);
        let rec = excursion_decompose(Path::new(out.clone()).unwrap(), &g).unwrap();
        assert_eq!(rec.endpoint_pairs, vec![EndpointPair::Theta]);
        assert_eq!(rec.r_times, vec![3]);

        let mut inward = straight(p(&[7, 0, 0]), 0, 2, -1);
        inward.extend(straight(p(&[5, 0, 0]), 0, 5, 1).into_iter().skip(1));
        let rec = excursion_decompose(Path::new(inward.clone()).unwrap(), &g).unwrap();
        assert_eq!(
            rec.endpoint_pairs,
            vec![EndpointPair::Pair(p(&[5, 0, 0]), p(&[7, 0, 0]))]
        );

        // Second excursion: come back along +x from ∂A2 to V, then do the Θ excursion.
        let mut both = inward.clone();
        both.extend(straight(p(&[10, 0, 0]), 0, 3, -1).into_iter().skip(1));
        both.extend(out.iter().skip(1));
        let rec = excursion_decompose(Path::new(both.clone()).unwrap(), &g).unwrap();
        assert_eq!(rec.endpoint_pairs.len(), 2);
        assert_eq!(rec.endpoint_pairs[1], EndpointPair::Theta);
        assert_eq!(rec.d_times, vec![0, 10]);
        assert_eq!(rec.reassemble(), both);

        let bad = Path::new(vec![p(&[0, 0, 0])]).unwrap();
        assert!(matches!(excursion_decompose(bad, &g), Err(LabError::Domain(_))));
    }

    #[test]
    fn decomposition_round_trip_on_random_paths() {
        let g = build_geometry(Shape::Ball, 5, 2, 3).unwrap();
        let mut rng = stream_rng(3, 0);
        for _ in 0..20 {
            let start = g.v.point(rng.random_range(0..g.v.len()));
            let path = run_until(start, |x| x.norm() > 30.0, 1_000_000, &mut rng).unwrap();
            let original = path.vertices.clone();
            let rec = excursion_decompose(path, &g).unwrap();
            assert_eq!(rec.reassemble(), original);
            assert!(rec.r_times.len() >= 1);
            for (k, &r) in rec.r_times.iter().enumerate() {
                assert!(rec.d_times[k] < r);
                assert!(g.boundary_a2.contains(&original[r]));
            }
        }
    }

    #[test]
    fn bridge_ends_at_target_without_earlier_exit() {
        let g = build_geometry(Shape::Ball, 4, 2, 3).unwrap();
        let y = p(&[8, 0, 0]);
        assert!(g.boundary_a2.contains(&y));
        let bridge = ExitBridge::new(&g, y).unwrap();
        let mut rng = stream_rng(5, 0);
        let w = p(&[5, 0, 0]);
        assert!(g.v.contains(&w));
        for _ in 0..200 {
            let path = bridge.sample(w, &mut rng).unwrap();
            assert_eq!(*path.last(), y);
            for x in &path.vertices[..path.len() - 1] {
                assert!(g.a2_complement.contains(x));
            }
        }
    }

    #[test]
    fn bridge_forced_two_vertex_path() {
        // From a point of A2^C whose only exit route with positive h is the
        // adjacent target, the only two-vertex path is x → y; the first step
        // probability equals h(y)/(6 h(x)) = 1/(6 h(x)).
        let g = build_geometry(Shape::Ball, 4, 2, 3).unwrap();
        let y = p(&[8, 0, 0]);
        let x = p(&[7, 0, 0]);
        let bridge = ExitBridge::new(&g, y).unwrap();
        let first = 1.0 / (6.0 * bridge.h(&x));
        let mut rng = stream_rng(6, 0);
        let n = 20_000;
        let hits = (0..n)
            .filter(|_| bridge.sample(x, &mut rng).unwrap().len() == 2)
            .count() as f64;
        let sd = (first * (1.0 - first) / n as f64).sqrt();
        assert!((hits / n as f64 - first).abs() < 4.0 * sd);
    }

    #[test]
    fn bridge_marginals_match_rejection() {
        // The law of the first step under the bridge equals the law of the
        // first step of unconditioned walks that happen to exit at y.
        let g = build_geometry(Shape::Ball, 3, 1, 3).unwrap();
        let w = g.v.point(0);
        let bridge_exits: Vec<LatticePoint> = g.boundary_a2.iter().copied().collect();
        let mut rng = stream_rng(8, 0);
        // Pick the most likely exit so rejection is efficient.
        let dom = Domain::new(g.a2_complement.clone());
        let exits = dom.exit_distribution(&w).unwrap();
        let y = *bridge_exits
            .iter()
            .max_by(|a, b| exits[*a].partial_cmp(&exits[*b]).unwrap())
            .unwrap();
        let bridge = ExitBridge::new(&g, y).unwrap();
        let mut rej: HashMap<LatticePoint, f64> = HashMap::new();
        let mut acc = 0usize;
        while acc < 10_000 {
            let path = run_until(w, |x| g.boundary_a2.contains(x), 1_000_000, &mut rng).unwrap();
            if *path.last() == y {
                *rej.entry(path.vertices[1]).or_default() += 1.0;
                acc += 1;
            }
        }
        let mut br: HashMap<LatticePoint, f64> = HashMap::new();
        for _ in 0..10_000 {
            let path = bridge.sample(w, &mut rng).unwrap();
            *br.entry(path.vertices[1]).or_default() += 1.0;
        }
        // Two-sample chi-square on the first step.
        let keys: std::collections::BTreeSet<_> = rej.keys().chain(br.keys()).copied().collect();
        let mut stat = 0.0;
        for k in &keys {
            let a = rej.get(k).copied().unwrap_or(0.0);
            let b = br.get(k).copied().unwrap_or(0.0);
            if a + b > 0.0 {
                stat += (a - b).powi(2) / (a + b);
            }
        }
        let df = (keys.len() - 1) as f64;
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let pval = 1.0 - ChiSquared::new(df).unwrap().cdf(stat);
        assert!(pval > 0.01, "chi-square {stat} df {df} p {pval}");
    }

    #[test]
    fn bridge_zero_probability_is_support_error() {
        let g = build_geometry(Shape::Ball, 4, 2, 3).unwrap();
        let bridge = ExitBridge::new(&g, p(&[8, 0, 0])).unwrap();
        // Far point outside the domain.
        assert!(bridge.sample(p(&[30, 0, 0]), &mut stream_rng(0, 0)).is_err());
        assert!(ExitBridge::new(&g, p(&[0, 0, 0])).is_err());
    }

    #[test]
    fn return_decision_point_target() {
        let green = GreenTable::shared(3).unwrap();
        let t = FiniteSet::from_points(3, [p(&[0, 0, 0])]);
        let eq = crate::potential::equilibrium_measure(green, &t).unwrap();
        let x = p(&[20, 0, 0]);
        let pr = return_probability(green, &eq, &x);
        let expected = green.free_green(&x) / green.free_green(&p(&[0, 0, 0]));
        assert!((pr - expected).abs() < 1e-12);
        let mut last = 1.0;
        for k in [2, 4, 8, 16, 32, 64, 128] {
            let v = return_probability(green, &eq, &p(&[k, 0, 0]));
            assert!(v < last);
            last = v;
        }
        let mut rng = stream_rng(2, 0);
        let n = 100_000;
        let mut ret = 0;
        for _ in 0..n {
            if let ReturnDecision::ReturnsAt(q) = decide_return_to(&x, &t, green, Some(&eq), &mut rng).unwrap() {
                assert_eq!(q, p(&[0, 0, 0]));
                ret += 1;
            }
        }
        let sd = (pr * (1.0 - pr) / n as f64).sqrt();
        assert!((ret as f64 / n as f64 - pr).abs() < 3.0 * sd);
        assert_eq!(
            decide_return_to(&x, &FiniteSet::empty(3), green, None, &mut rng).unwrap(),
            ReturnDecision::Escapes
        );
    }

    #[test]
    fn return_probability_matches_hitting_simulation() {
        // Walks from (6,0,0) absorbed at a far sphere of radius 60 with the
        // exact correction G-based credit at the sphere: the direct hitting
        // frequency of 0 before the sphere plus the credited tail equals p_ret.
        let green = GreenTable::shared(3).unwrap();
        let t = FiniteSet::from_points(3, [p(&[0, 0, 0])]);
        let eq = crate::potential::equilibrium_measure(green, &t).unwrap();
        let x = p(&[6, 0, 0]);
        let exact = return_probability(green, &eq, &x);
        let mut rng = stream_rng(4, 0);
        let n = 20_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let mut y = x;
            let v = loop {
                if y == p(&[0, 0, 0]) {
                    break 1.0;
                }
                if y.norm2() >= 60 * 60 {
                    break return_probability(green, &eq, &y);
                }
                y = step(&y, &mut rng);
            };
            s1 += v;
            s2 += v * v;
        }
        let mean = s1 / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - exact).abs() < 3.0 * se + 1e-4, "{mean} vs {exact} (se {se})");
    }

    #[test]
    fn mc_escape_single_point() {
        let green = GreenTable::shared(3).unwrap();
        let t = FiniteSet::from_points(3, [p(&[0, 0, 0])]);
        let (v, se) = mc_escape_capacity(green, &t, 20_000, 10.0, 11).unwrap();
        let exact = 1.0 / green.free_green(&p(&[0, 0, 0]));
        assert!((v - exact).abs() < 3.0 * se + 1e-3, "{v} ± {se} vs {exact}");
        assert!((v - exact).abs() / exact < 0.01);
    }
}
