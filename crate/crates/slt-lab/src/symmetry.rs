//! Signed coordinate permutations preserving a finite set. Harmonic quantities
//! of an invariant domain are equivariant, so solves are only needed for one
//! representative per orbit.

use crate::geometry::{FiniteSet, LatticePoint, MAX_DIM};

/// x ↦ (sign_i · x_{perm_i})_i.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SignedPerm {
    dim: usize,
    perm: [u8; MAX_DIM],
    sign: [i8; MAX_DIM],
}

impl SignedPerm {
    pub fn apply(&self, p: &LatticePoint) -> LatticePoint {
        let mut c = [0i32; MAX_DIM];
        for i in 0..self.dim {
            c[i] = self.sign[i] as i32 * p.coord(self.perm[i] as usize);
        }
        LatticePoint::new(&c[..self.dim])
    }

    pub fn inverse(&self) -> SignedPerm {
        let mut inv = *self;
        for i in 0..self.dim {
            let j = self.perm[i] as usize;
            inv.perm[j] = i as u8;
            inv.sign[j] = self.sign[i];
        }
        inv
    }
}

fn permutations(n: usize) -> Vec<Vec<u8>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, (n - 1) as u8);
            out.push(q);
        }
    }
    out
}

/// The subgroup of the hyperoctahedral group leaving a set invariant.
#[derive(Clone, Debug)]
pub struct SymmetryGroup {
    pub dim: usize,
    pub elements: Vec<SignedPerm>,
}

impl SymmetryGroup {
    /// Elements mapping every set in `sets` onto itself.
    pub fn preserving(sets: &[&FiniteSet]) -> Self {
        let dim = sets[0].dim();
        let mut elements = Vec::new();
        for perm in permutations(dim) {
            for mask in 0..(1u32 << dim) {
                let mut e = SignedPerm {
                    dim,
                    perm: [0; MAX_DIM],
                    sign: [1; MAX_DIM],
                };
                for i in 0..dim {
                    e.perm[i] = perm[i];
                    e.sign[i] = if mask >> i & 1 == 1 { -1 } else { 1 };
                }
                if sets.iter().all(|s| s.iter().all(|p| s.contains(&e.apply(p)))) {
                    elements.push(e);
                }
            }
        }
        Self { dim, elements }
    }

    /// The trivial group.
    pub fn trivial(dim: usize) -> Self {
        let mut e = SignedPerm {
            dim,
            perm: [0; MAX_DIM],
            sign: [1; MAX_DIM],
        };
        for i in 0..dim {
            e.perm[i] = i as u8;
        }
        Self {
            dim,
            elements: vec![e],
        }
    }

    pub fn order(&self) -> usize {
        self.elements.len()
    }

    /// Orbit representative of `p` (the smallest image) and an element `g`
    /// with g(rep) = p.
    pub fn canonical(&self, p: &LatticePoint) -> (LatticePoint, SignedPerm) {
        let mut best_e = self.elements[0];
        let mut best = best_e.apply(p);
        for e in &self.elements[1..] {
            let q = e.apply(p);
            if q < best {
                best = q;
                best_e = *e;
            }
        }
        // best = best_e(p), so p = best_e⁻¹(best).
        (best, best_e.inverse())
    }

    /// For each group element g, the index permutation i ↦ index_of(g(set_i)).
    pub fn index_maps(&self, set: &FiniteSet) -> Vec<Vec<u32>> {
        self.elements
            .iter()
            .map(|e| {
                set.iter()
                    .map(|p| set.index_of(&e.apply(p)).expect("set is invariant") as u32)
                    .collect()
            })
            .collect()
    }

    pub fn position(&self, e: &SignedPerm) -> usize {
        self.elements.iter().position(|x| x == e).expect("element of the group")
    }

    /// Orbit representatives of a set, in index order.
    pub fn representatives(&self, set: &FiniteSet) -> Vec<LatticePoint> {
        let mut reps: Vec<LatticePoint> = set.iter().map(|p| self.canonical(p).0).collect();
        reps.sort();
        reps.dedup();
        reps
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{box_set, closed_ball};

    #[test]
    fn ball_has_full_octahedral_group() {
        let b = closed_ball(3, 4.0);
        let g = SymmetryGroup::preserving(&[&b]);
        assert_eq!(g.order(), 48);
        for e in &g.elements {
            let p = LatticePoint::new(&[1, -2, 3]);
            assert_eq!(e.inverse().apply(&e.apply(&p)), p);
        }
        let reps = g.representatives(&b);
        assert!(reps.len() * 48 >= b.len());
        for p in b.iter() {
            let (rep, e) = g.canonical(p);
            assert_eq!(e.apply(&rep), *p);
            assert!(reps.contains(&rep));
        }
    }

    #[test]
    fn off_center_box_has_smaller_group() {
        let b = box_set(3, -2, 1);
        let g = SymmetryGroup::preserving(&[&b]);
        // Permutations only, no sign flips.
        assert_eq!(g.order(), 6);
        let maps = g.index_maps(&b);
        for m in maps {
            let mut s = m.clone();
            s.sort();
            assert_eq!(s, (0..b.len() as u32).collect::<Vec<_>>());
        }
    }
}
