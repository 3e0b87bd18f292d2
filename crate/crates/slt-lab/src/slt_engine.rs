//! The soft-local-times machine on a finite atom space.
//!
//! A [`PoissonSheet`] is a Poisson point process on atoms × [0, ∞) with
//! intensity mass(a) dv, realized lazily and shared by several soft-local-time
//! processes. Process p keeps its history (ξ_k, g_k) and hence its function
//! G^p = Σ_k ξ_k g_k.
//!
//! The sheet is known exactly below the envelope
//! E(a) = max(ℓ_a, max_p G^p(a)), where ℓ_a records explicit extensions made by
//! [`PoissonSheet::next_height_above`]; every realized point lies either below
//! the envelope or was placed there by a step. Above E the sheet is still an
//! untouched Poisson process. A step of process p with density g needs
//!
//!   ξ = min over points (a, v) with v > G^p(a) of (v − G^p(a)) / g(a).
//!
//! Known candidates are scanned directly. Unknown ones are found by thinning:
//! in the coordinate t = (v − G^p(a))/g(a) the unknown points of atom a form a
//! Poisson process of rate mass(a)·g(a) on t > (E(a) − G^p(a))/g(a), so we run
//! a rate-one process in t, mark each arrival with an atom drawn with
//! probability g(a)·mass(a), and keep the first arrival that lands above the
//! envelope. The search stops as soon as t exceeds the best known candidate.
//! The expected number of proposals per step is at most E[ξ] = 1, and no work
//! is done per atom, so steps cost O(#realized points) however large the
//! atom space is.

use std::cell::OnceCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{LabError, Result};
use crate::walk::{stream_rng, LabRng, Path};

/// A family of probability densities on a finite atom space.
pub trait DensityFamily {
    /// Identifies one density of the family.
    type Source: Clone;

    fn atom_count(&self) -> usize;

    /// Reference measure of an atom.
    fn mass(&self, _atom: usize) -> f64 {
        1.0
    }

    /// g(atom) for the density indexed by `src`.
    fn density(&self, src: &Self::Source, atom: usize) -> f64;

    /// Draws an atom with probability g(a)·mass(a).
    fn sample_atom(&self, src: &Self::Source, rng: &mut LabRng) -> Result<usize>;

    /// Σ_k ξ_k g_k at every atom.
    fn accumulate(&self, steps: &[(f64, &Self::Source)]) -> Vec<f64> {
        (0..self.atom_count())
            .map(|a| steps.iter().map(|(x, s)| x * self.density(s, a)).sum())
            .collect()
    }

    /// An atom where Σ_low ξ g exceeds Σ_high ξ g by more than a relative
    /// `tol`, if any.
    fn first_violation(
        &self,
        low: &[(f64, &Self::Source)],
        high: &[(f64, &Self::Source)],
        tol: f64,
    ) -> Option<usize> {
        let l = self.accumulate(low);
        let h = self.accumulate(high);
        (0..l.len()).find(|&a| l[a] > h[a] * (1.0 + tol) + f64::MIN_POSITIVE)
    }
}

/// Explicit densities over a handful of atoms; the source is the vector g itself.
#[derive(Clone, Debug)]
pub struct TableFamily {
    pub masses: Vec<f64>,
}

impl TableFamily {
    pub fn unit(n: usize) -> Self {
        Self { masses: vec![1.0; n] }
    }
}

impl DensityFamily for TableFamily {
    type Source = Vec<f64>;

    fn atom_count(&self) -> usize {
        self.masses.len()
    }
    fn mass(&self, atom: usize) -> f64 {
        self.masses[atom]
    }
    fn density(&self, src: &Vec<f64>, atom: usize) -> f64 {
        src[atom]
    }
    fn sample_atom(&self, src: &Vec<f64>, rng: &mut LabRng) -> Result<usize> {
        let total: f64 = src.iter().zip(&self.masses).map(|(g, m)| g * m).sum();
        if total <= 0.0 {
            return Err(LabError::Degenerate("density vanishes identically".into()));
        }
        let mut u = rng.random::<f64>() * total;
        for (a, (g, m)) in src.iter().zip(&self.masses).enumerate() {
            let w = g * m;
            if u < w {
                return Ok(a);
            }
            u -= w;
        }
        Ok(src.iter().rposition(|&g| g > 0.0).unwrap())
    }
}

/// A realized point of the sheet.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SheetPoint {
    pub atom: usize,
    pub height: f64,
}

/// One step of a soft-local-time process.
#[derive(Clone, Debug)]
pub struct StepRecord<S> {
    pub xi: f64,
    pub atom: usize,
    pub point: usize,
    /// Whether the chosen point was realized by this step.
    pub fresh: bool,
    pub source: S,
}

struct Process<S> {
    history: Vec<StepRecord<S>>,
    /// G of this process at the atom of each realized point.
    g_at_point: Vec<f64>,
}

/// A snapshot of one process: its first `steps` steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SltHandle {
    pub sheet: u64,
    pub process: usize,
    pub steps: usize,
}

/// Result of comparing two soft local times on a shared sheet.
#[derive(Clone, Debug, PartialEq)]
pub enum Dominance {
    Dominated,
    Violated { atom: usize, low: f64, high: f64 },
}

static SHEET_IDS: AtomicU64 = AtomicU64::new(1);

/// Relative slack used when comparing soft local times.
pub const COMPARE_TOL: f64 = 1e-12;

/// A lazily realized Poisson sheet together with the processes that read it.
pub struct PoissonSheet<'f, F: DensityFamily> {
    id: u64,
    family: &'f F,
    rng: LabRng,
    path_seed: u64,
    points: Vec<SheetPoint>,
    by_atom: HashMap<usize, Vec<usize>>,
    ell: HashMap<usize, f64>,
    procs: Vec<Process<F::Source>>,
    paths: Vec<OnceCell<Option<Path>>>,
    ties: usize,
}

impl<'f, F: DensityFamily> PoissonSheet<'f, F> {
    /// A fresh sheet drawing heights from `rng`; paths attached to points use
    /// generators derived from (`path_seed`, point id).
    pub fn new(family: &'f F, rng: LabRng, path_seed: u64) -> Self {
        Self {
            id: SHEET_IDS.fetch_add(1, Ordering::Relaxed),
            family,
            rng,
            path_seed,
            points: Vec::new(),
            by_atom: HashMap::new(),
            ell: HashMap::new(),
            procs: Vec::new(),
            paths: Vec::new(),
            ties: 0,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }
    pub fn family(&self) -> &'f F {
        self.family
    }
    pub fn points(&self) -> &[SheetPoint] {
        &self.points
    }
    /// Number of exact ties resolved by atom index so far.
    pub fn ties(&self) -> usize {
        self.ties
    }

    /// Starts a new process with G ≡ 0.
    pub fn new_process(&mut self) -> usize {
        self.procs.push(Process {
            history: Vec::new(),
            g_at_point: vec![0.0; self.points.len()],
        });
        self.procs.len() - 1
    }

    pub fn history(&self, p: usize) -> &[StepRecord<F::Source>] {
        &self.procs[p].history
    }

    pub fn handle(&self, p: usize) -> SltHandle {
        SltHandle {
            sheet: self.id,
            process: p,
            steps: self.procs[p].history.len(),
        }
    }

    fn check(&self, h: &SltHandle) -> Result<()> {
        if h.sheet != self.id {
            return Err(LabError::Usage("soft local times live on different sheets".into()));
        }
        if h.process >= self.procs.len() || h.steps > self.procs[h.process].history.len() {
            return Err(LabError::Usage("stale or unknown process handle".into()));
        }
        Ok(())
    }

    fn g_prefix(&self, p: usize, steps: usize, atom: usize) -> f64 {
        self.procs[p].history[..steps]
            .iter()
            .map(|s| s.xi * self.family.density(&s.source, atom))
            .sum()
    }

    /// Current G^p at an atom, recomputed from the history.
    pub fn g_at(&self, p: usize, atom: usize) -> f64 {
        self.g_prefix(p, self.procs[p].history.len(), atom)
    }

    /// G of a snapshot at an atom.
    pub fn g_of(&self, h: &SltHandle, atom: usize) -> Result<f64> {
        self.check(h)?;
        Ok(self.g_prefix(h.process, h.steps, atom))
    }

    /// G of a snapshot at every atom.
    pub fn dense_g(&self, h: &SltHandle) -> Result<Vec<f64>> {
        self.check(h)?;
        Ok(self.family.accumulate(&self.steps_of(h)))
    }

    fn steps_of(&self, h: &SltHandle) -> Vec<(f64, &F::Source)> {
        self.procs[h.process].history[..h.steps]
            .iter()
            .map(|s| (s.xi, &s.source))
            .collect()
    }

    /// Upper end of the region where the sheet is fully known at `atom`.
    pub fn explored_to(&self, atom: usize) -> f64 {
        let mut e = self.ell.get(&atom).copied().unwrap_or(0.0);
        for p in 0..self.procs.len() {
            e = e.max(self.g_at(p, atom));
        }
        e
    }

    fn realize(&mut self, atom: usize, height: f64) -> usize {
        let id = self.points.len();
        self.points.push(SheetPoint { atom, height });
        self.by_atom.entry(atom).or_default().push(id);
        self.paths.push(OnceCell::new());
        for p in 0..self.procs.len() {
            let g = self.g_at(p, atom);
            self.procs[p].g_at_point.push(g);
        }
        id
    }

    /// Height of the lowest point strictly above `level` at `atom`, realizing
    /// the sheet further if needed.
    pub fn next_height_above(&mut self, atom: usize, level: f64) -> f64 {
        let known = self
            .by_atom
            .get(&atom)
            .into_iter()
            .flatten()
            .map(|&i| self.points[i].height)
            .filter(|&v| v > level)
            .fold(f64::INFINITY, f64::min);
        let e = self.explored_to(atom).max(level);
        if known <= e {
            return known;
        }
        let gap: f64 = Exp1.sample(&mut self.rng);
        let v = e + gap / self.family.mass(atom);
        self.realize(atom, v);
        self.ell.insert(atom, v);
        v
    }

    /// Realizes every point at `atom` up to height `level`.
    pub fn realize_up_to(&mut self, atom: usize, level: f64) {
        let mut e = self.explored_to(atom);
        loop {
            let gap: f64 = Exp1.sample(&mut self.rng);
            let v = e + gap / self.family.mass(atom);
            if v > level {
                break;
            }
            self.realize(atom, v);
            e = v;
        }
        let cur = self.ell.get(&atom).copied().unwrap_or(0.0);
        self.ell.insert(atom, cur.max(level));
    }

    /// One soft-local-time step of process `p` with density `src`; returns
    /// (ξ, chosen atom).
    pub fn step(&mut self, p: usize, src: F::Source) -> Result<(f64, usize)> {
        // Lowest known candidate.
        let mut best: Option<(f64, usize, usize)> = None; // (t, atom, point)
        for (i, pt) in self.points.iter().enumerate() {
            let cur = self.procs[p].g_at_point[i];
            if pt.height <= cur {
                continue;
            }
            let g = self.family.density(&src, pt.atom);
            if g <= 0.0 {
                continue;
            }
            let t = (pt.height - cur) / g;
            best = match best {
                None => Some((t, pt.atom, i)),
                Some(b) if t < b.0 || (t == b.0 && pt.atom < b.1) => {
                    if t == b.0 {
                        self.ties += 1;
                        log::debug!("tie at ξ = {t} between atoms {} and {}", pt.atom, b.1);
                    }
                    Some((t, pt.atom, i))
                }
                Some(b) => {
                    if t == b.0 {
                        self.ties += 1;
                        log::debug!("tie at ξ = {t} between atoms {} and {}", pt.atom, b.1);
                    }
                    Some(b)
                }
            };
        }
        // Thinning search for an unknown point below the best known one.
        let t_stop = best.map_or(f64::INFINITY, |b| b.0);
        let mut t = 0.0;
        let mut fresh: Option<(f64, usize, f64)> = None; // (t, atom, height)
        loop {
            let e: f64 = Exp1.sample(&mut self.rng);
            t += e;
            if t >= t_stop {
                break;
            }
            let a = self.family.sample_atom(&src, &mut self.rng)?;
            let g = self.family.density(&src, a);
            let cur = self.g_at(p, a);
            let v = cur + t * g;
            if v > self.explored_to(a) {
                fresh = Some((t, a, v));
                break;
            }
        }
        let (xi, atom, point, is_fresh) = match (fresh, best) {
            (Some((t, a, v)), _) => {
                let id = self.realize(a, v);
                (t, a, id, true)
            }
            (None, Some((t, a, i))) => (t, a, i, false),
            (None, None) => unreachable!("the thinning search only stops on a candidate"),
        };
        // Advance G^p at every realized point, then pin the chosen one.
        let proc_g = &mut self.procs[p].g_at_point;
        for (i, pt) in self.points.iter().enumerate() {
            proc_g[i] += xi * self.family.density(&src, pt.atom);
        }
        proc_g[point] = self.points[point].height;
        self.procs[p].history.push(StepRecord {
            xi,
            atom,
            point,
            fresh: is_fresh,
            source: src,
        });
        Ok((xi, atom))
    }

    /// Runs process `p`, asking `provider` for the next density until it returns `None`.
    pub fn run_slt(
        &mut self,
        p: usize,
        mut provider: impl FnMut(&[StepRecord<F::Source>]) -> Option<F::Source>,
    ) -> Result<()> {
        while let Some(src) = provider(&self.procs[p].history) {
            self.step(p, src)?;
        }
        Ok(())
    }

    /// Points chosen by a snapshot, in order.
    pub fn used_points(&self, h: &SltHandle) -> Result<Vec<usize>> {
        self.check(h)?;
        Ok(self.procs[h.process].history[..h.steps].iter().map(|s| s.point).collect())
    }

    /// Compares G_low ≤ G_high on every atom; when dominated, also checks on
    /// the sheet that every point used by `low` lies under G_high and was used
    /// by `high`.
    pub fn dominance_certificate(&self, low: &SltHandle, high: &SltHandle) -> Result<Dominance> {
        self.check(low)?;
        self.check(high)?;
        // A point used below but not above sits at a height in (G_high, G_low].
        let high_used: std::collections::HashSet<usize> =
            self.used_points(high)?.into_iter().collect();
        for i in self.used_points(low)? {
            if !high_used.contains(&i) {
                let a = self.points[i].atom;
                return Ok(Dominance::Violated {
                    atom: a,
                    low: self.g_prefix(low.process, low.steps, a),
                    high: self.g_prefix(high.process, high.steps, a),
                });
            }
        }
        let ls = self.steps_of(low);
        let hs = self.steps_of(high);
        if let Some(a) = self.family.first_violation(&ls, &hs, COMPARE_TOL) {
            return Ok(Dominance::Violated {
                atom: a,
                low: self.g_prefix(low.process, low.steps, a),
                high: self.g_prefix(high.process, high.steps, a),
            });
        }
        for i in self.used_points(low)? {
            let pt = self.points[i];
            let gh = self.g_prefix(high.process, high.steps, pt.atom);
            if pt.height > gh * (1.0 + 1e-9) {
                return Err(LabError::Oracle(format!(
                    "point {i} at height {} is used below but lies above G_high = {gh}",
                    pt.height
                )));
            }
        }
        Ok(Dominance::Dominated)
    }

    /// The path memoized on a point; sampled on first request from a
    /// generator seeded by (path seed, point id). `None` marks a point whose
    /// atom carries no path.
    pub fn attach_path(
        &self,
        point: usize,
        sampler: impl FnOnce(usize, &mut LabRng) -> Result<Option<Path>>,
    ) -> Result<Option<&Path>> {
        let cell = self
            .paths
            .get(point)
            .ok_or_else(|| LabError::Usage(format!("no point {point} on this sheet")))?;
        if cell.get().is_none() {
            let mut rng = stream_rng(self.path_seed, point as u64);
            let path = sampler(self.points[point].atom, &mut rng)?;
            let _ = cell.set(path);
        }
        Ok(cell.get().unwrap().as_ref())
    }
}

/// Single-step helper matching the textbook description: fresh sheet, one step.
pub fn slt_step<F: DensityFamily>(
    sheet: &mut PoissonSheet<'_, F>,
    process: usize,
    g: F::Source,
) -> Result<(f64, usize)> {
    sheet.step(process, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF, Exp};

    fn ks_exp1(xs: &mut [f64]) -> f64 {
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len() as f64;
        let d = Exp::new(1.0).unwrap();
        let mut dmax: f64 = 0.0;
        for (i, &x) in xs.iter().enumerate() {
            let f = d.cdf(x);
            dmax = dmax.max((f - i as f64 / n).abs()).max(((i + 1) as f64 / n - f).abs());
        }
        // Asymptotic Kolmogorov p-value.
        let lam = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * dmax;
        let mut p = 0.0;
        for j in 1..100 {
            let j = j as f64;
            p += 2.0 * (-1f64).powf(j - 1.0) * (-2.0 * j * j * lam * lam).exp();
        }
        p.clamp(0.0, 1.0)
    }

    fn chi2_p(obs: &[f64], exp: &[f64]) -> f64 {
        let stat: f64 = obs.iter().zip(exp).filter(|(_, e)| **e > 0.0).map(|(o, e)| (o - e).powi(2) / e).sum();
        let df = exp.iter().filter(|e| **e > 0.0).count() as f64 - 1.0;
        1.0 - ChiSquared::new(df).unwrap().cdf(stat)
    }

    #[test]
    fn forced_minimum_example() {
        // Sheet with a point at height 0.3 on atom 0 and 0.8 on atom 1, and the
        // rest of the sheet realized above 2 so that no unknown point interferes.
        let fam = TableFamily::unit(3);
        let mut sheet = PoissonSheet::new(&fam, stream_rng(1, 0), 0);
        sheet.realize(0, 0.3);
        sheet.realize(1, 0.8);
        for a in 0..3 {
            sheet.ell.insert(a, 10.0);
        }
        let p = sheet.new_process();
        let (xi, a) = sheet.step(p, vec![0.5, 0.4, 0.1]).unwrap();
        assert!((xi - 0.6).abs() < 1e-15);
        assert_eq!(a, 0);
        assert_eq!(sheet.g_at(p, 0), 0.3);
        assert!((sheet.g_at(p, 1) - 0.24).abs() < 1e-15);
    }

    #[test]
    fn point_mass_density() {
        let fam = TableFamily::unit(4);
        let mut sheet = PoissonSheet::new(&fam, stream_rng(2, 0), 0);
        let p = sheet.new_process();
        let (xi, a) = sheet.step(p, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(a, 2);
        assert!(xi > 0.0);
        assert_eq!(sheet.points()[0].height, xi);
        assert!(sheet.step(p, vec![0.0; 4]).is_err());
    }

    #[test]
    fn single_step_marginals() {
        let fam = TableFamily::unit(3);
        let g = vec![0.5, 0.3, 0.2];
        let n = 100_000;
        let mut counts = [0.0; 3];
        let mut xis = Vec::with_capacity(n);
        for i in 0..n {
            let mut sheet = PoissonSheet::new(&fam, stream_rng(3, i as u64), 0);
            let p = sheet.new_process();
            let (xi, a) = sheet.step(p, g.clone()).unwrap();
            counts[a] += 1.0;
            xis.push(xi);
        }
        let exp: Vec<f64> = g.iter().map(|x| x * n as f64).collect();
        assert!(chi2_p(&counts, &exp) > 0.01);
        assert!(ks_exp1(&mut xis) > 0.01);
    }

    #[test]
    fn two_step_chain_matches_direct_sampling() {
        let fam = TableFamily::unit(3);
        let g1 = vec![0.2, 0.5, 0.3];
        let cond = [vec![0.6, 0.2, 0.2], vec![0.1, 0.1, 0.8], vec![0.3, 0.4, 0.3]];
        let n = 100_000;
        let mut counts = vec![0.0; 9];
        for i in 0..n {
            let mut sheet = PoissonSheet::new(&fam, stream_rng(4, i as u64), 0);
            let p = sheet.new_process();
            let (_, a) = sheet.step(p, g1.clone()).unwrap();
            let (_, b) = sheet.step(p, cond[a].clone()).unwrap();
            counts[3 * a + b] += 1.0;
        }
        let exp: Vec<f64> = (0..9).map(|c| g1[c / 3] * cond[c / 3][c % 3] * n as f64).collect();
        assert!(chi2_p(&counts, &exp) > 0.01);
    }

    #[test]
    fn shared_sheet_preserves_each_law() {
        // A second process explores the sheet first; the law of the first
        // process's chain must be unaffected.
        let fam = TableFamily::unit(3);
        let g1 = vec![0.2, 0.5, 0.3];
        let cond = [vec![0.6, 0.2, 0.2], vec![0.1, 0.1, 0.8], vec![0.3, 0.4, 0.3]];
        let decoy = vec![0.7, 0.1, 0.2];
        let n = 50_000;
        let mut counts = vec![0.0; 9];
        for i in 0..n {
            let mut sheet = PoissonSheet::new(&fam, stream_rng(11, i as u64), 0);
            let d = sheet.new_process();
            let p = sheet.new_process();
            sheet.step(d, decoy.clone()).unwrap();
            sheet.step(d, decoy.clone()).unwrap();
            let (_, a) = sheet.step(p, g1.clone()).unwrap();
            sheet.step(d, decoy.clone()).unwrap();
            let (_, b) = sheet.step(p, cond[a].clone()).unwrap();
            counts[3 * a + b] += 1.0;
        }
        let exp: Vec<f64> = (0..9).map(|c| g1[c / 3] * cond[c / 3][c % 3] * n as f64).collect();
        assert!(chi2_p(&counts, &exp) > 0.01);
    }

    #[test]
    fn deterministic_chain_and_zero_steps() {
        let fam = TableFamily::unit(3);
        let mut sheet = PoissonSheet::new(&fam, stream_rng(5, 0), 0);
        let p = sheet.new_process();
        let seq = [2usize, 0, 1, 1];
        let mut k = 0;
        sheet
            .run_slt(p, |_| {
                if k == seq.len() {
                    return None;
                }
                let mut g = vec![0.0; 3];
                g[seq[k]] = 1.0;
                k += 1;
                Some(g)
            })
            .unwrap();
        let chosen: Vec<usize> = sheet.history(p).iter().map(|s| s.atom).collect();
        assert_eq!(chosen, seq);
        let q = sheet.new_process();
        assert_eq!(sheet.dense_g(&sheet.handle(q)).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn accumulation_identity_and_invariants() {
        let fam = TableFamily::unit(5);
        let mut sheet = PoissonSheet::new(&fam, stream_rng(6, 0), 0);
        let p = sheet.new_process();
        let q = sheet.new_process();
        let mut rng = stream_rng(6, 1);
        for k in 0..300 {
            let raw: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            let g: Vec<f64> = raw.iter().map(|x| x / s).collect();
            sheet.step(if k % 3 == 0 { q } else { p }, g).unwrap();
        }
        for proc in [p, q] {
            let dense = sheet.dense_g(&sheet.handle(proc)).unwrap();
            for a in 0..5 {
                let direct: f64 = sheet
                    .history(proc)
                    .iter()
                    .map(|s| s.xi * s.source[a])
                    .sum();
                assert!((dense[a] - direct).abs() < 1e-10 * direct.max(1.0));
            }
            // Chosen points sit exactly on G after their step; unused points lie above G.
            let used: std::collections::HashSet<usize> =
                sheet.history(proc).iter().map(|s| s.point).collect();
            for (i, pt) in sheet.points().iter().enumerate() {
                let g = dense[pt.atom];
                if used.contains(&i) {
                    assert!(pt.height <= g * (1.0 + 1e-9));
                } else {
                    assert!(pt.height > g * (1.0 - 1e-9), "unused point {i} below G");
                }
            }
        }
        assert_eq!(sheet.ties(), 0);
    }

    #[test]
    fn residual_freshness() {
        // After one step, the first height above G at each atom, minus G, is Exp(mass).
        let fam = TableFamily { masses: vec![1.0, 2.0, 0.5] };
        let g = vec![0.4, 0.15, 0.8]; // Σ g·mass = 1
        let n = 20_000;
        let mut gaps: Vec<Vec<f64>> = vec![Vec::new(); 3];
        for i in 0..n {
            let mut sheet = PoissonSheet::new(&fam, stream_rng(7, i as u64), 0);
            let p = sheet.new_process();
            sheet.step(p, g.clone()).unwrap();
            for a in 0..3 {
                let level = sheet.g_at(p, a);
                let v = sheet.next_height_above(a, level);
                gaps[a].push((v - level) * fam.masses[a]);
            }
        }
        for a in 0..3 {
            assert!(ks_exp1(&mut gaps[a]) > 0.01, "atom {a}");
        }
    }

    #[test]
    fn dominance_examples() {
        let fam = TableFamily::unit(3);
        let mut sheet = PoissonSheet::new(&fam, stream_rng(8, 0), 0);
        let lo = sheet.new_process();
        let hi = sheet.new_process();
        let g = vec![1.0 / 3.0; 3];
        for _ in 0..5 {
            sheet.step(lo, g.clone()).unwrap();
        }
        for _ in 0..12 {
            sheet.step(hi, g.clone()).unwrap();
        }
        let hl = sheet.handle(lo);
        let hh = sheet.handle(hi);
        let dom = sheet.dominance_certificate(&hl, &hh).unwrap();
        // Same density each step, so G_lo = c·g with c = Σξ; dominance iff Σξ_lo ≤ Σξ_hi.
        let s_lo: f64 = sheet.history(lo).iter().map(|s| s.xi).sum();
        let s_hi: f64 = sheet.history(hi).iter().map(|s| s.xi).sum();
        assert_eq!(dom == Dominance::Dominated, s_lo <= s_hi);
        assert_eq!(sheet.dominance_certificate(&hl, &hl).unwrap(), Dominance::Dominated);

        // Crossing G's.
        let mut sheet2 = PoissonSheet::new(&fam, stream_rng(8, 1), 0);
        let a = sheet2.new_process();
        let b = sheet2.new_process();
        sheet2.step(a, vec![1.0, 0.0, 0.0]).unwrap();
        sheet2.step(b, vec![0.0, 1.0, 0.0]).unwrap();
        match sheet2.dominance_certificate(&sheet2.handle(a), &sheet2.handle(b)).unwrap() {
            Dominance::Violated { atom, .. } => assert_eq!(atom, 0),
            d => panic!("expected violation, got {d:?}"),
        }
        assert!(sheet.dominance_certificate(&hl, &sheet2.handle(a)).is_err());
    }

    #[test]
    fn larger_xi_sum_dominates_with_point_inclusion() {
        let fam = TableFamily::unit(4);
        let g = vec![0.25; 4];
        for seed in 0..50 {
            let mut sheet = PoissonSheet::new(&fam, stream_rng(9, seed), 0);
            let lo = sheet.new_process();
            let hi = sheet.new_process();
            for _ in 0..3 {
                sheet.step(lo, g.clone()).unwrap();
            }
            // Step the high process until its ξ-sum exceeds the low one.
            let s_lo: f64 = sheet.history(lo).iter().map(|s| s.xi).sum();
            while sheet.history(hi).iter().map(|s| s.xi).sum::<f64>() <= s_lo {
                sheet.step(hi, g.clone()).unwrap();
            }
            let d = sheet.dominance_certificate(&sheet.handle(lo), &sheet.handle(hi)).unwrap();
            assert_eq!(d, Dominance::Dominated);
        }
    }

    #[test]
    fn attach_path_memoizes() {
        use crate::geometry::LatticePoint;
        let fam = TableFamily::unit(2);
        let mut sheet = PoissonSheet::new(&fam, stream_rng(10, 0), 99);
        let p = sheet.new_process();
        sheet.step(p, vec![0.5, 0.5]).unwrap();
        let pt = sheet.history(p)[0].point;
        let sampler = |_a: usize, rng: &mut LabRng| {
            let o = LatticePoint::origin(3);
            Ok(Some(crate::walk::run_until(o, |x| x.norm() >= 3.0, 10_000, rng)?))
        };
        let first = sheet.attach_path(pt, sampler).unwrap().cloned();
        let second = sheet.attach_path(pt, |_, _| panic!("must not resample")).unwrap().cloned();
        assert_eq!(first, second);
        let none = sheet.attach_path(pt, |_, _| Ok(None));
        assert!(none.unwrap().is_some());
        assert!(sheet.attach_path(1000, |_, _| Ok(None)).is_err());
    }
}
