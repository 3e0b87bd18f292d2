//! Gauss–Legendre rules and the lattice Green integral.
//!
//! In d = 3 the last Fourier variable is integrated in closed form,
//!
//!   ∫_{-π}^{π} cos(n k) / (b − cos k) dk = 2π z^n / √(b² − 1),   z = b − √(b² − 1),
//!
//! leaving a 2-d integral over [0, π]² whose 1/|k| singularity at the origin is
//! removed by the Duffy substitution k₂ = t·k₁ on each of the two triangles.
//! The resulting integrand is analytic, so panel Gauss–Legendre converges
//! geometrically. For d ≥ 4 the continuous-time representation
//! G(x) = ∫₀^∞ Π_i e^{−t/d} I_{x_i}(t/d) dt is used instead.

use std::f64::consts::PI;
use std::sync::OnceLock;

/// Nodes and weights of the n-point Gauss–Legendre rule on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { z } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * pn - pm) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

const ORDER: usize = 20;

fn rule() -> &'static (Vec<f64>, Vec<f64>) {
    static R: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    R.get_or_init(|| gauss_legendre(ORDER))
}

/// Integrates `f` over `[a, b]` split at `breaks` (sorted, inside the interval)
/// with one Gauss–Legendre panel per sub-interval.
fn panels(breaks: &[f64], mut f: impl FnMut(f64) -> f64) -> f64 {
    let (x, w) = rule();
    let mut total = 0.0;
    for seg in breaks.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let h = 0.5 * (b - a);
        let c = 0.5 * (a + b);
        let mut s = 0.0;
        for (xi, wi) in x.iter().zip(w) {
            s += wi * f(c + h * xi);
        }
        total += h * s;
    }
    total
}

/// Break points on [0, len]: geometric refinement towards 0 (down to `fine`)
/// and uniform panels no longer than `max_width`.
fn graded_breaks(len: f64, fine: f64, max_width: f64) -> Vec<f64> {
    let mut b = vec![0.0];
    let mut t = fine.min(len);
    while t < len {
        b.push(t);
        let next = (2.0 * t).min(t + max_width);
        t = next;
    }
    b.push(len);
    b
}

/// 1/(b + √(b²−1)) and √(b²−1) from bm1 = b − 1 without cancellation.
#[inline]
fn z_and_root(bm1: f64) -> (f64, f64) {
    let root = (bm1 * (bm1 + 2.0)).sqrt();
    (1.0 / (1.0 + bm1 + root), root)
}

/// ∫₀^π dk ∫₀^1 dt k cos(k a) cos(k t b) z(k, kt)^n / √(b(k,kt)² − 1).
fn duffy_triangle(a: i32, b: i32, n: i32) -> f64 {
    let freq = (a.abs() + b.abs()) as f64;
    let fine = (0.25 / (n.max(1) as f64)).min(0.25);
    let width_k = (1.5 / (freq + 1.0)).min(0.5);
    let kb = graded_breaks(PI, fine, width_k);
    panels(&kb, |k| {
        let sk = (0.5 * k).sin();
        let ak = 2.0 * sk * sk;
        let ca = (k * a as f64).cos();
        let tw = (1.5 / (k * b.abs() as f64 + 1.0)).min(0.5);
        let tb = graded_breaks(1.0, 1.0, tw);
        let inner = panels(&tb, |t| {
            let st = (0.5 * k * t).sin();
            let bm1 = ak + 2.0 * st * st;
            let (z, root) = z_and_root(bm1);
            // k / root stays bounded as k → 0 since root ≈ k √(1+t²).
            (k * t * b as f64).cos() * z.powi(n) * (k / root)
        });
        ca * inner
    })
}

/// Lattice Green function of the 3-d simple random walk at `x`.
pub fn green3(x: [i32; 3]) -> f64 {
    let mut c = [x[0].abs(), x[1].abs(), x[2].abs()];
    c.sort_unstable();
    let (a, b, n) = (c[0], c[1], c[2]);
    let s = duffy_triangle(a, b, n) + duffy_triangle(b, a, n);
    3.0 / (PI * PI) * s
}

/// Two-term large-distance expansion of the 3-d Green function.
pub fn green3_asymptotic(x: [i32; 3]) -> f64 {
    let r2 = x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
    let r = r2.sqrt();
    let q = x.iter().map(|&v| (v as f64).powi(4)).sum::<f64>() / (r2 * r2);
    3.0 / (2.0 * PI * r) + 3.0 / (16.0 * PI * r * r2) * (5.0 * q - 3.0)
}

/// e^{−τ} I_n(τ) via the periodic trapezoid rule for
/// (1/π) ∫₀^π e^{−τ(1−cos θ)} cos(nθ) dθ.
fn scaled_bessel_i(n: i32, tau: f64) -> f64 {
    let m = (40.0 + 8.0 * tau.sqrt() + 2.0 * n.abs() as f64).ceil() as usize;
    let h = PI / m as f64;
    let mut s = 0.5 * (1.0 + (-2.0 * tau).exp() * if n % 2 == 0 { 1.0 } else { -1.0 });
    for j in 1..m {
        let th = j as f64 * h;
        s += (-tau * (1.0 - th.cos())).exp() * (n as f64 * th).cos();
    }
    s / m as f64
}

/// Green function in dimension d ≥ 4 by the continuous-time integral, with the
/// large-time tail integrated from the leading Gaussian asymptotics.
pub fn green_time_integral(x: &[i32]) -> f64 {
    let d = x.len() as f64;
    // Substitute t = e^y; integrate y over [ln t_min, ln t_max].
    let t_max = 2.0e4_f64;
    let y0 = (1e-8f64).ln();
    let y1 = t_max.ln();
    let mut breaks = Vec::new();
    let n_pan = 60;
    for i in 0..=n_pan {
        breaks.push(y0 + (y1 - y0) * i as f64 / n_pan as f64);
    }
    let body = panels(&breaks, |y| {
        let t = y.exp();
        let tau = t / d;
        let mut prod = 1.0;
        for &xi in x {
            prod *= scaled_bessel_i(xi, tau);
        }
        prod * t
    });
    // Tail: Π e^{−τ}I_{n_i}(τ) ≈ (2πτ)^{−d/2} (1 − Σ(4n_i²−1)/(8τ)).
    let c = (d / (2.0 * PI)).powf(d / 2.0);
    let k = d / 2.0 - 1.0;
    let corr: f64 = x.iter().map(|&n| (4.0 * (n as f64).powi(2) - 1.0) / 8.0).sum::<f64>() * d;
    let tail = c * (t_max.powf(-k) / k - corr * t_max.powf(-k - 1.0) / (k + 1.0));
    body + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(7);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(12)).sum();
        assert!((s - 2.0 / 13.0).abs() < 1e-14);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn watson_value_at_origin() {
        // G(0) = 1.516386059151978... for the cubic lattice.
        assert!((green3([0, 0, 0]) - 1.516_386_059_151_978).abs() < 1e-10);
    }

    #[test]
    fn harmonicity_at_origin_and_off() {
        let g = |a, b, c| green3([a, b, c]);
        assert!((g(0, 0, 0) - 1.0 - g(1, 0, 0)).abs() < 1e-10);
        let x = [3, 1, 0];
        let mut nb = 0.0;
        for k in 0..6 {
            let mut y = x;
            y[k / 2] += if k % 2 == 0 { 1 } else { -1 };
            nb += green3(y);
        }
        assert!((green3(x) - nb / 6.0).abs() < 1e-10);
        for x in [[40, 3, 1], [70, 20, 5]] {
            let mut nb = 0.0;
            for k in 0..6 {
                let mut y = x;
                y[k / 2] += if k % 2 == 0 { 1 } else { -1 };
                nb += green3(y);
            }
            assert!((green3(x) - nb / 6.0).abs() < 1e-11, "{x:?}");
        }
    }

    #[test]
    fn asymptotic_matches_far_field() {
        // The neglected term is O(|x|^-5).
        for (x, tol) in [([20, 0, 0], 2e-7), ([17, 9, 4], 2e-7), ([40, 0, 0], 5e-9), ([30, 30, 1], 5e-9)] {
            let q = green3(x);
            let a = green3_asymptotic(x);
            assert!((q - a).abs() < tol, "{x:?}: {q} vs {a}");
        }
    }

    #[test]
    fn bessel_scaled_small_values() {
        // e^{-1} I_0(1) = 0.46575960759364043
        assert!((scaled_bessel_i(0, 1.0) - 0.465_759_607_593_640_4).abs() < 1e-13);
        // e^{-2} I_3(2) = 0.2127399592398527 * e^{-2}
        assert!((scaled_bessel_i(3, 2.0) - 0.212_739_959_239_852_7 * (-2f64).exp()).abs() < 1e-13);
    }
}
