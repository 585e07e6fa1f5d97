//! Small dense first-order solvers shared by the superhedging and utility code.

/// Result of an unconstrained minimization or constrained maximization.
#[derive(Debug, Clone)]
pub(crate) struct Solution {
    pub x: Vec<f64>,
    pub f: f64,
    /// Infinity norm of the (projected) gradient at `x`.
    pub stationarity: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LbfgsConfig {
    pub memory: usize,
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            memory: 12,
            max_iter: 2000,
            grad_tol: 1e-10,
        }
    }
}

/// Weak Wolfe line search by bracketing and bisection. Non-finite trial values
/// count as a failed sufficient-decrease test.
#[allow(clippy::too_many_arguments)]
fn wolfe_search(
    f: &mut dyn FnMut(&[f64], &mut [f64]) -> f64,
    x: &[f64],
    fx: f64,
    slope: f64,
    dir: &[f64],
    t0: f64,
    x_new: &mut [f64],
    g_new: &mut [f64],
) -> Option<(f64, f64)> {
    const C1: f64 = 1e-4;
    const C2: f64 = 0.9;
    let (mut lo, mut hi) = (0.0, f64::INFINITY);
    let mut t = t0;
    let mut best: Option<(f64, f64)> = None;
    for _ in 0..80 {
        for i in 0..x.len() {
            x_new[i] = x[i] + t * dir[i];
        }
        let ft = f(x_new, g_new);
        if !ft.is_finite() || ft > fx + C1 * t * slope {
            hi = t;
        } else {
            best = Some((t, ft));
            if dot(g_new, dir) < C2 * slope {
                lo = t;
            } else {
                return Some((t, ft));
            }
        }
        t = if hi.is_finite() {
            0.5 * (lo + hi)
        } else {
            2.0 * lo
        };
        if hi.is_finite() && hi - lo < 1e-20 * (1.0 + hi) {
            break;
        }
    }
    // Accept the last point that decreased enough even if curvature failed.
    let (t, _) = best?;
    for i in 0..x.len() {
        x_new[i] = x[i] + t * dir[i];
    }
    let ft = f(x_new, g_new);
    Some((t, ft))
}

/// Limited-memory BFGS for a smooth (or mildly nonsmooth) objective.
pub(crate) fn lbfgs_minimize(
    f: &mut dyn FnMut(&[f64], &mut [f64]) -> f64,
    x0: Vec<f64>,
    cfg: LbfgsConfig,
) -> Solution {
    let n = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    if n == 0 {
        return Solution {
            x,
            f: fx,
            stationarity: 0.0,
            iterations: 0,
            converged: true,
        };
    }
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut dir = vec![0.0; n];
    let mut stalls = 0;
    for it in 0..cfg.max_iter {
        let gn = inf_norm(&g);
        if gn <= cfg.grad_tol {
            return Solution {
                x,
                f: fx,
                stationarity: gn,
                iterations: it,
                converged: true,
            };
        }
        // Two-loop recursion.
        dir.copy_from_slice(&g);
        let k = s_hist.len();
        let mut alpha = vec![0.0; k];
        for j in (0..k).rev() {
            let rho = 1.0 / dot(&y_hist[j], &s_hist[j]);
            alpha[j] = rho * dot(&s_hist[j], &dir);
            for i in 0..n {
                dir[i] -= alpha[j] * y_hist[j][i];
            }
        }
        if k > 0 {
            let gamma = dot(&s_hist[k - 1], &y_hist[k - 1]) / dot(&y_hist[k - 1], &y_hist[k - 1]);
            dir.iter_mut().for_each(|d| *d *= gamma);
        }
        for j in 0..k {
            let rho = 1.0 / dot(&y_hist[j], &s_hist[j]);
            let beta = rho * dot(&y_hist[j], &dir);
            for i in 0..n {
                dir[i] += s_hist[j][i] * (alpha[j] - beta);
            }
        }
        dir.iter_mut().for_each(|d| *d = -*d);
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            s_hist.clear();
            y_hist.clear();
            dir.iter_mut().zip(&g).for_each(|(d, gi)| *d = -gi);
            slope = -dot(&g, &g);
        }
        let t0 = if k == 0 {
            (1.0 / inf_norm(&g)).min(1.0)
        } else {
            1.0
        };
        let Some((_, f_new)) = wolfe_search(f, &x, fx, slope, &dir, t0, &mut x_new, &mut g_new)
        else {
            if s_hist.is_empty() {
                return Solution {
                    x,
                    f: fx,
                    stationarity: gn,
                    iterations: it,
                    converged: false,
                };
            }
            s_hist.clear();
            y_hist.clear();
            continue;
        };
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-16 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if s_hist.len() == cfg.memory {
                s_hist.remove(0);
                y_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
        }
        if fx - f_new <= 1e-16 * (1.0 + fx.abs()) {
            stalls += 1;
        } else {
            stalls = 0;
        }
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        fx = f_new;
        if stalls >= 5 {
            let gn = inf_norm(&g);
            return Solution {
                x,
                f: fx,
                stationarity: gn,
                iterations: it + 1,
                converged: gn <= cfg.grad_tol,
            };
        }
    }
    let gn = inf_norm(&g);
    Solution {
        x,
        f: fx,
        stationarity: gn,
        iterations: cfg.max_iter,
        converged: gn <= cfg.grad_tol,
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct SpgConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub memory: usize,
}

impl Default for SpgConfig {
    fn default() -> Self {
        SpgConfig {
            max_iter: 20000,
            tol: 1e-10,
            memory: 10,
        }
    }
}

/// Spectral projected gradient ascent (Barzilai-Borwein steps with a
/// nonmonotone Armijo search, parameter 1e-4) for a concave objective over a
/// convex set given by its Euclidean projection. Non-finite values are
/// rejected by the line search. Returns the best iterate seen.
pub(crate) fn spg_maximize(
    f: &mut dyn FnMut(&[f64], &mut [f64]) -> f64,
    project: &dyn Fn(&mut [f64]),
    x0: Vec<f64>,
    cfg: SpgConfig,
) -> Solution {
    const GAMMA: f64 = 1e-4;
    let n = x0.len();
    let mut x = x0;
    project(&mut x);
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut history = vec![fx];
    let pg_norm = |x: &[f64], g: &[f64]| {
        let mut p: Vec<f64> = x.iter().zip(g).map(|(a, b)| a + b).collect();
        project(&mut p);
        p.iter()
            .zip(x)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    };
    let mut best = (x.clone(), fx);
    let mut lambda = {
        let p = pg_norm(&x, &g);
        if p > 0.0 {
            (1.0 / p).clamp(1e-10, 1e10)
        } else {
            1.0
        }
    };
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    for it in 0..cfg.max_iter {
        let pg = pg_norm(&x, &g);
        if pg <= cfg.tol {
            return Solution {
                x,
                f: fx,
                stationarity: pg,
                iterations: it,
                converged: true,
            };
        }
        let mut d: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a + lambda * b).collect();
        project(&mut d);
        d.iter_mut().zip(&x).for_each(|(di, xi)| *di -= xi);
        let gd = dot(&g, &d);
        let f_ref = history.iter().copied().fold(f64::INFINITY, f64::min);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            for i in 0..n {
                x_new[i] = x[i] + t * d[i];
            }
            let ft = f(&x_new, &mut g_new);
            if ft.is_finite() && ft >= f_ref + GAMMA * t * gd {
                let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
                let sy = -dot(&s, &y);
                lambda = if sy > 0.0 {
                    (dot(&s, &s) / sy).clamp(1e-10, 1e10)
                } else {
                    1e10
                };
                std::mem::swap(&mut x, &mut x_new);
                std::mem::swap(&mut g, &mut g_new);
                fx = ft;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            let pg = pg_norm(&best.0, &g);
            let (bx, bf) = best;
            return Solution {
                x: bx,
                f: bf,
                stationarity: pg,
                iterations: it,
                converged: false,
            };
        }
        if fx > best.1 {
            best = (x.clone(), fx);
        }
        history.push(fx);
        if history.len() > cfg.memory {
            history.remove(0);
        }
    }
    let pg = pg_norm(&x, &g);
    if fx >= best.1 {
        return Solution {
            x,
            f: fx,
            stationarity: pg,
            iterations: cfg.max_iter,
            converged: false,
        };
    }
    let (bx, bf) = best;
    Solution {
        x: bx,
        f: bf,
        stationarity: pg,
        iterations: cfg.max_iter,
        converged: false,
    }
}

/// Euclidean projection onto `{x >= 0, sum x = total}`.
pub(crate) fn project_simplex(v: &mut [f64], total: f64) {
    if v.is_empty() {
        return;
    }
    let mut u: Vec<f64> = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut css = 0.0;
    let mut theta = 0.0;
    for (j, uj) in u.iter().enumerate() {
        css += uj;
        let t = (css - total) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    v.iter_mut().for_each(|x| *x = (*x - theta).max(0.0));
}

/// Golden-section minimization of a unimodal function on `[a, b]`.
pub(crate) fn golden_section_min(
    f: &mut dyn FnMut(f64) -> f64,
    mut a: f64,
    mut b: f64,
    tol: f64,
) -> (f64, f64) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    (x, f(x))
}
