//! The interlacement soup seen from a finite window, for all levels up to
//! u_max at once: Poisson(u_max·cap) forward walks started from the
//! normalized equilibrium measure, each tagged with a uniform level.

use rand::Rng;

use crate::clothesline::poisson_count;
use crate::error::{LabError, Result};
use crate::geometry::{FiniteSet, LatticePoint};
use crate::potential::{equilibrium_measure, EquilibriumMeasure, GreenTable};
use crate::walk::{decide_return_to, step, LabRng, Path, ReturnDecision, DEFAULT_STEP_CAP};

/// One trajectory of the soup.
#[derive(Clone, Debug)]
pub struct Arrival {
    pub level: f64,
    /// Indices of the window points the trajectory visits, sorted.
    pub visits: Vec<u32>,
    /// Simulated vertices (with a jump at each far-field return), if kept.
    pub path: Option<Path>,
}

#[derive(Clone, Debug)]
pub struct TrajectorySoup {
    pub window: FiniteSet,
    pub u_max: f64,
    /// Sorted by level.
    pub arrivals: Vec<Arrival>,
}

/// Window points covered by the trajectories of level ≤ u.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OccupancyField {
    pub u_bits: u64,
    occupied: Vec<bool>,
    count: usize,
}

impl OccupancyField {
    pub fn level(&self) -> f64 {
        f64::from_bits(self.u_bits)
    }
    pub fn contains_index(&self, i: usize) -> bool {
        self.occupied[i]
    }
    pub fn len(&self) -> usize {
        self.count
    }
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
    pub fn is_subset(&self, other: &OccupancyField) -> bool {
        self.occupied.iter().zip(&other.occupied).all(|(a, b)| !a || *b)
    }
}

/// Soup sampler for a fixed window.
pub struct SoupSampler {
    pub window: FiniteSet,
    pub green: &'static GreenTable,
    eq: EquilibriumMeasure,
    pub r_big: f64,
    pub keep_paths: bool,
}

impl SoupSampler {
    pub fn new(window: FiniteSet, r_big_factor: f64) -> Result<Self> {
        if window.is_empty() {
            return Err(LabError::Input("empty window".into()));
        }
        if !(r_big_factor > 1.0) {
            return Err(LabError::Parameter(format!("r_big_factor must exceed 1, got {r_big_factor}")));
        }
        let green = GreenTable::shared(window.dim())?;
        let eq = equilibrium_measure(green, &window)?;
        let r_big = (r_big_factor * (window.radius() + 1.0)).max(window.radius() + 2.0);
        Ok(Self {
            window,
            green,
            eq,
            r_big,
            keep_paths: false,
        })
    }

    pub fn capacity(&self) -> f64 {
        self.eq.total
    }

    pub fn equilibrium(&self) -> &EquilibriumMeasure {
        &self.eq
    }

    fn trajectory<R: Rng + ?Sized>(&self, level: f64, rng: &mut R) -> Result<Arrival> {
        let w = &self.window;
        let r2 = self.r_big * self.r_big;
        let mut visits = Vec::new();
        let mut verts = Vec::new();
        let mut x = self.equilibrium().sample(rng);
        let mut n = 0u64;
        loop {
            loop {
                if let Some(i) = w.index_of(&x) {
                    visits.push(i as u32);
                }
                if self.keep_paths {
                    verts.push(x);
                }
                if x.norm2() as f64 >= r2 {
                    break;
                }
                if n == DEFAULT_STEP_CAP {
                    return Err(LabError::Timeout {
                        cap: DEFAULT_STEP_CAP,
                        partial: verts,
                    });
                }
                x = step(&x, rng);
                n += 1;
            }
            match decide_return_to(&x, w, self.green, Some(self.equilibrium()), rng)? {
                ReturnDecision::ReturnsAt(p) => x = p,
                ReturnDecision::Escapes => break,
            }
        }
        visits.sort_unstable();
        visits.dedup();
        Ok(Arrival {
            level,
            visits,
            path: self.keep_paths.then_some(Path { vertices: verts }),
        })
    }

    /// The soup of all levels up to `u_max`.
    pub fn sample<R: Rng + ?Sized>(&self, u_max: f64, rng: &mut R) -> Result<TrajectorySoup> {
        if !(u_max >= 0.0) {
            return Err(LabError::Parameter(format!("u_max must be nonnegative, got {u_max}")));
        }
        let n = poisson_count(u_max * self.capacity(), rng)?;
        let mut levels: Vec<f64> = (0..n).map(|_| u_max * (1.0 - rng.random::<f64>())).collect();
        levels.sort_by(f64::total_cmp);
        let arrivals = levels
            .into_iter()
            .map(|l| self.trajectory(l, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrajectorySoup {
            window: self.window.clone(),
            u_max,
            arrivals,
        })
    }
}

/// One-off soup.
pub fn sample_soup<R: Rng + ?Sized>(window: &FiniteSet, u_max: f64, r_big_factor: f64, rng: &mut R) -> Result<TrajectorySoup> {
    SoupSampler::new(window.clone(), r_big_factor)?.sample(u_max, rng)
}

/// Occupied window points at level u.
pub fn restrict(soup: &TrajectorySoup, u: f64) -> Result<OccupancyField> {
    if !(0.0..=soup.u_max).contains(&u) {
        return Err(LabError::Range(format!("level {u} outside [0, {}]", soup.u_max)));
    }
    let mut occupied = vec![false; soup.window.len()];
    let mut count = 0;
    for a in soup.arrivals.iter().take_while(|a| a.level <= u) {
        for &i in &a.visits {
            if !occupied[i as usize] {
                occupied[i as usize] = true;
                count += 1;
            }
        }
    }
    Ok(OccupancyField {
        u_bits: u.to_bits(),
        occupied,
        count,
    })
}

/// Whether no point of `a` (indices into the window) is occupied.
pub fn is_vacant(field: &OccupancyField, a: &[usize]) -> bool {
    a.iter().all(|&i| !field.contains_index(i))
}

/// Monte Carlo estimate of P[A ⊂ V^u] with its binomial standard error.
pub fn vacant_probability(
    sampler: &SoupSampler,
    a: &[LatticePoint],
    u: f64,
    reps: usize,
    rng: &mut LabRng,
) -> Result<(f64, f64)> {
    if reps < 100 {
        return Err(LabError::Parameter(format!("at least 100 reps are needed, got {reps}")));
    }
    let idx = a
        .iter()
        .map(|p| {
            sampler
                .window
                .index_of(p)
                .ok_or_else(|| LabError::Domain(format!("{p:?} is outside the window")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut hits = 0usize;
    for _ in 0..reps {
        let soup = sampler.sample(u, rng)?;
        hits += is_vacant(&restrict(&soup, u)?, &idx) as usize;
    }
    let p = hits as f64 / reps as f64;
    Ok((p, (p * (1.0 - p) / reps as f64).sqrt()))
}
