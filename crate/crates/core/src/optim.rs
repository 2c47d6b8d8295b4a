//! Small deterministic maximizers used by the CM steps: BFGS with
//! finite-difference gradients for the covariance parameters, golden-section
//! search for one degree parameter, and a box-clipped Nelder-Mead for two.
//!
//! All routines never return a point worse than the starting point, which is
//! what preserves the monotone-ascent property of the outer ECME loop.

/// Result of a maximization: best point and best value seen.
pub struct MaxResult {
    pub x: Vec<f64>,
    pub value: f64,
}

fn fd_gradient(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    evals: &mut usize,
) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let h = 1e-6 * x[i].abs().max(1.0);
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        *evals += 2;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Maximize `f` from `x0` by BFGS with central-difference gradients and a
/// backtracking (Armijo) line search, spending at most `max_evals` function
/// evaluations. Returns the best point seen.
pub fn maximize_bfgs(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    max_evals: usize,
    grad_tol: f64,
) -> MaxResult {
    let k = x0.len();
    let mut evals = 0usize;
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    evals += 1;
    let mut best_x = x.clone();
    let mut best_f = fx;
    if k == 0 {
        return MaxResult { x, value: fx };
    }

    // Inverse Hessian approximation (of -f), kept as a dense row-major k*k buffer.
    let mut h_inv = vec![0.0; k * k];
    let reset_h = |h: &mut Vec<f64>| {
        for v in h.iter_mut() {
            *v = 0.0;
        }
        for i in 0..k {
            h[i * k + i] = 1.0;
        }
    };
    reset_h(&mut h_inv);

    let mut g = fd_gradient(f, &x, &mut evals);
    let mut just_reset = true;

    while evals < max_evals {
        let gnorm = g.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        if gnorm < grad_tol {
            break;
        }
        // Ascent direction d = H * g.
        let mut d = vec![0.0; k];
        for i in 0..k {
            let mut s = 0.0;
            for j in 0..k {
                s += h_inv[i * k + j] * g[j];
            }
            d[i] = s;
        }
        let mut slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        if slope <= 0.0 {
            // Not an ascent direction; fall back to steepest ascent.
            reset_h(&mut h_inv);
            d.copy_from_slice(&g);
            slope = g.iter().map(|v| v * v).sum();
            just_reset = true;
            if slope <= 0.0 {
                break;
            }
        }

        let mut alpha = 1.0;
        let mut accepted = false;
        let mut x_new = x.clone();
        let mut f_new = fx;
        for _ in 0..30 {
            if evals >= max_evals {
                break;
            }
            for i in 0..k {
                x_new[i] = x[i] + alpha * d[i];
            }
            f_new = f(&x_new);
            evals += 1;
            if f_new >= fx + 1e-4 * alpha * slope {
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            if just_reset {
                break;
            }
            reset_h(&mut h_inv);
            just_reset = true;
            continue;
        }

        let g_new = fd_gradient(f, &x_new, &mut evals);
        // BFGS update on the minimization of -f: y = -(g_new - g), s = x_new - x.
        let s: Vec<f64> = (0..k).map(|i| x_new[i] - x[i]).collect();
        let y: Vec<f64> = (0..k).map(|i| g[i] - g_new[i]).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let s_norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        let y_norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if sy > 1e-12 * s_norm * y_norm && sy > 0.0 {
            // H <- (I - s y'/sy) H (I - y s'/sy) + s s'/sy
            let mut hy = vec![0.0; k];
            for i in 0..k {
                let mut acc = 0.0;
                for j in 0..k {
                    acc += h_inv[i * k + j] * y[j];
                }
                hy[i] = acc;
            }
            let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
            for i in 0..k {
                for j in 0..k {
                    h_inv[i * k + j] += ((sy + yhy) * s[i] * s[j]) / (sy * sy)
                        - (hy[i] * s[j] + s[i] * hy[j]) / sy;
                }
            }
            just_reset = false;
        }

        x = x_new;
        fx = f_new;
        g = g_new;
        if fx > best_f {
            best_f = fx;
            best_x = x.clone();
        }
        let step = s.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        if step < 1e-12 {
            break;
        }
    }

    if fx > best_f {
        best_f = fx;
        best_x = x;
    }
    MaxResult { x: best_x, value: best_f }
}

/// Golden-section maximization of a unimodal function on `[lo, hi]`.
pub fn golden_section_max(
    f: &mut dyn FnMut(f64) -> f64,
    lo: f64,
    hi: f64,
    iters: usize,
) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let (mut a, mut b) = (lo.min(hi), lo.max(hi));
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..iters {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    let xm = 0.5 * (a + b);
    let fm = f(xm);
    if fm >= fc && fm >= fd {
        (xm, fm)
    } else if fc >= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Nelder-Mead maximization restricted to a box, for low-dimensional degree
/// parameters. Proposed vertices are clipped into `[lo, hi]` componentwise.
pub fn nelder_mead_max_box(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    lo: &[f64],
    hi: &[f64],
    max_evals: usize,
) -> MaxResult {
    let k = x0.len();
    let clip = |x: &mut [f64]| {
        for i in 0..k {
            x[i] = x[i].clamp(lo[i], hi[i]);
        }
    };
    let mut evals = 0usize;
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(k + 1);
    let mut x0c = x0.to_vec();
    clip(&mut x0c);
    let f0 = f(&x0c);
    evals += 1;
    simplex.push((x0c.clone(), f0));
    for i in 0..k {
        let mut xi = x0c.clone();
        let span = 0.25 * (hi[i] - lo[i]).max(1e-3);
        xi[i] = if xi[i] + span <= hi[i] { xi[i] + span } else { xi[i] - span };
        clip(&mut xi);
        let fi = f(&xi);
        evals += 1;
        simplex.push((xi, fi));
    }

    while evals + 4 < max_evals {
        // Sort descending by value (maximization).
        simplex.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("NaN objective"));
        let spread = (0..k).fold(0.0f64, |acc, i| {
            acc.max((simplex[0].0[i] - simplex[k].0[i]).abs())
        });
        if spread < 1e-10 {
            break;
        }
        let centroid: Vec<f64> = (0..k)
            .map(|i| simplex[..k].iter().map(|(x, _)| x[i]).sum::<f64>() / k as f64)
            .collect();
        let worst = simplex[k].clone();

        let mut propose = |coef: f64, evals: &mut usize| -> (Vec<f64>, f64) {
            let mut x: Vec<f64> = (0..k)
                .map(|i| centroid[i] + coef * (centroid[i] - worst.0[i]))
                .collect();
            clip(&mut x);
            let v = f(&x);
            *evals += 1;
            (x, v)
        };

        let refl = propose(1.0, &mut evals);
        if refl.1 > simplex[0].1 {
            let exp = propose(2.0, &mut evals);
            simplex[k] = if exp.1 > refl.1 { exp } else { refl };
        } else if refl.1 > simplex[k - 1].1 {
            simplex[k] = refl;
        } else {
            let contr = propose(-0.5, &mut evals);
            if contr.1 > worst.1 {
                simplex[k] = contr;
            } else {
                // Shrink toward the best vertex.
                let best = simplex[0].0.clone();
                for v in simplex.iter_mut().skip(1) {
                    for i in 0..k {
                        v.0[i] = best[i] + 0.5 * (v.0[i] - best[i]);
                    }
                    clip(&mut v.0);
                    v.1 = f(&v.0);
                    evals += 1;
                }
            }
        }
    }
    simplex.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("NaN objective"));
    let (x, value) = simplex.remove(0);
    MaxResult { x, value }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn bfgs_finds_quadratic_maximum() {
        let mut f = |x: &[f64]| -((x[0] - 1.5).powi(2) + 3.0 * (x[1] + 0.5).powi(2));
        let r = maximize_bfgs(&mut f, &[0.0, 0.0], 200, 1e-9);
        assert_relative_eq!(r.x[0], 1.5, epsilon = 1e-5);
        assert_relative_eq!(r.x[1], -0.5, epsilon = 1e-5);
    }

    #[test]
    fn bfgs_never_returns_worse_point() {
        // Awkward curved objective; the guarantee is value >= value at start.
        let mut f = |x: &[f64]| -(x[0].powi(4) + (x[0] - x[1]).powi(2)) + (x[1] * 0.3).sin();
        let start = [2.0, -3.0];
        let f0 = f(&start);
        let r = maximize_bfgs(&mut f, &start, 60, 1e-9);
        assert!(r.value >= f0);
    }

    #[test]
    fn golden_section_peak() {
        let mut f = |x: f64| -(x - 0.7).powi(2);
        let (x, _) = golden_section_max(&mut f, -3.0, 5.0, 80);
        assert_relative_eq!(x, 0.7, epsilon = 1e-6);
    }

    #[test]
    fn nelder_mead_respects_box() {
        // Unconstrained max at (2, 2); box caps it at (1, 1).
        let mut f = |x: &[f64]| -((x[0] - 2.0).powi(2) + (x[1] - 2.0).powi(2));
        let r = nelder_mead_max_box(&mut f, &[0.2, 0.2], &[0.0, 0.0], &[1.0, 1.0], 300);
        assert!(r.x[0] <= 1.0 && r.x[1] <= 1.0);
        assert_relative_eq!(r.x[0], 1.0, epsilon = 1e-4);
        assert_relative_eq!(r.x[1], 1.0, epsilon = 1e-4);
    }
}
