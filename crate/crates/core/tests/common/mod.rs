//! Shared test oracles, independent of the library's closed-form paths.
//!
//! The quadrature oracle evaluates the latent-scale mixing integrals
//! `I_k = integral r^{n/2 + k} exp(-r d / 2) dH(r; nu)` for k in {-1, 0, 1}
//! directly, giving reference values for the E-step weight (`I_1 / I_0`),
//! the predictive variance multiplier (`I_{-1} / I_0`) and the marginal
//! log-density (`-n/2 log 2 pi - log|Sigma|/2 + log I_0`).

#![allow(dead_code)]

use hpfr_core::MixingFamily;
use statrs::function::gamma::ln_gamma;

const LN_2PI: f64 = 1.837877066409345483560659472811;

/// Adaptive Simpson on [a, b] with absolute tolerance.
fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: usize,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
                + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
        }
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    recurse(f, a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), tol, 48)
}

/// ln of `integral_0^1 exp(g(q)) dq` with max-shift stabilization.
fn ln_integral_unit(g: &dyn Fn(f64) -> f64) -> f64 {
    let scan = 4000;
    let mut gmax = f64::NEG_INFINITY;
    for i in 1..scan {
        let q = i as f64 / scan as f64;
        let v = g(q);
        if v > gmax {
            gmax = v;
        }
    }
    let shifted = move |q: f64| -> f64 {
        if q <= 0.0 || q >= 1.0 {
            return 0.0;
        }
        let v = g(q) - gmax;
        if v < -745.0 {
            0.0
        } else {
            v.exp()
        }
    };
    gmax + adaptive_simpson(&shifted, 0.0, 1.0, 1e-12).ln()
}

/// `ln I_k` for the mixing integral of the family at `(n, d)`.
pub fn ln_mixing_integral(fam: &MixingFamily, n: usize, d: f64, k: i32) -> f64 {
    let power = 0.5 * n as f64 + k as f64;
    match fam {
        MixingFamily::Gaussian => -0.5 * d,
        MixingFamily::StudentT { nu, .. } => {
            // r in (0, inf) through r = (q / (1 - q))^2; the squared map
            // smooths the power singularity at the origin.
            let ln_h_const = 0.5 * nu * (0.5 * nu).ln() - ln_gamma(0.5 * nu);
            let g = move |q: f64| -> f64 {
                let ratio = q / (1.0 - q);
                let r = ratio * ratio;
                if r == 0.0 || !r.is_finite() {
                    return f64::NEG_INFINITY;
                }
                let jacobian = (2.0 * ratio).ln() - 2.0 * (1.0 - q).ln();
                ln_h_const + (0.5 * nu - 1.0 + power) * r.ln() - 0.5 * (nu + d) * r + jacobian
            };
            ln_integral_unit(&g)
        }
        MixingFamily::Slash { nu, .. } => {
            // r in (0, 1) through r = q^2.
            let g = move |q: f64| -> f64 {
                let r = q * q;
                if r == 0.0 {
                    return f64::NEG_INFINITY;
                }
                nu.ln() + (nu - 1.0 + power) * r.ln() - 0.5 * d * r + (2.0 * q).ln()
            };
            ln_integral_unit(&g)
        }
        MixingFamily::ContaminatedNormal { nu, gamma, .. } => {
            let lw_g = nu.ln() + power * gamma.ln() - 0.5 * gamma * d;
            if *nu >= 1.0 {
                lw_g
            } else {
                let lw_1 = (1.0 - nu).ln() - 0.5 * d;
                let m = lw_g.max(lw_1);
                m + ((lw_g - m).exp() + (lw_1 - m).exp()).ln()
            }
        }
    }
}

/// Oracle E-step weight `E[r | y] = I_1 / I_0`.
pub fn oracle_weight(fam: &MixingFamily, n: usize, d: f64) -> f64 {
    (ln_mixing_integral(fam, n, d, 1) - ln_mixing_integral(fam, n, d, 0)).exp()
}

/// Oracle variance multiplier `E[1/r | y] = I_{-1} / I_0`.
pub fn oracle_kappa_mean(fam: &MixingFamily, n: usize, d: f64) -> f64 {
    (ln_mixing_integral(fam, n, d, -1) - ln_mixing_integral(fam, n, d, 0)).exp()
}

/// Oracle marginal log-density from sufficient statistics.
pub fn oracle_log_marginal(fam: &MixingFamily, n: usize, d: f64, ln_det: f64) -> f64 {
    -0.5 * n as f64 * LN_2PI - 0.5 * ln_det + ln_mixing_integral(fam, n, d, 0)
}

/// Two-sample Kolmogorov-Smirnov distance.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(|p, q| p.partial_cmp(q).unwrap());
    xb.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < xa.len() && j < xb.len() {
        if xa[i] <= xb[j] {
            i += 1;
        } else {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}
