//! Box-constrained quasi-Newton minimizer (projected L-BFGS with Armijo
//! backtracking). Used for GP hyperparameter fitting.

#[derive(Debug, Clone, Copy)]
pub struct MinimizeOptions {
    pub max_iter: usize,
    /// Stop when the objective changes by less than `f_tol * max(1, |f|)`.
    pub f_tol: f64,
    /// Stop when the projected gradient's max-norm drops below this.
    pub g_tol: f64,
    pub memory: usize,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self { max_iter: 200, f_tol: 1e-8, g_tol: 1e-6, memory: 8 }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, &l), &h) in x.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(l, h);
    }
}

fn projected_gradient(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(g)
        .zip(lo.iter().zip(hi))
        .map(|((&xi, &gi), (&l, &h))| {
            if (xi <= l && gi > 0.0) || (xi >= h && gi < 0.0) {
                0.0
            } else {
                gi
            }
        })
        .collect()
}

fn dotf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `f` over the box `[lo, hi]`. `f` returns the value and the
/// gradient; a non-finite value is treated as "outside the domain".
pub fn minimize_box<F>(mut f: F, x0: &[f64], lo: &[f64], hi: &[f64], opts: MinimizeOptions) -> Minimum
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = x0.to_vec();
    project(&mut x, lo, hi);
    let (mut fx, mut gx) = f(&x);
    if !fx.is_finite() {
        return Minimum { x, f: fx, iterations: 0, converged: false };
    }
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for it in 0..opts.max_iter {
        iterations = it + 1;
        let pg = projected_gradient(&x, &gx, lo, hi);
        if pg.iter().fold(0.0f64, |m, v| m.max(v.abs())) < opts.g_tol {
            converged = true;
            break;
        }

        // two-loop recursion on the free variables
        let mut q = pg.clone();
        let k = s_hist.len();
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            let rho = 1.0 / dotf(&y_hist[i], &s_hist[i]);
            alpha[i] = rho * dotf(&s_hist[i], &q);
            for (qj, yj) in q.iter_mut().zip(&y_hist[i]) {
                *qj -= alpha[i] * yj;
            }
        }
        let gamma = if k > 0 { dotf(&s_hist[k - 1], &y_hist[k - 1]) / dotf(&y_hist[k - 1], &y_hist[k - 1]) } else { 1.0 };
        for qj in q.iter_mut() {
            *qj *= gamma;
        }
        for i in 0..k {
            let rho = 1.0 / dotf(&y_hist[i], &s_hist[i]);
            let beta = rho * dotf(&y_hist[i], &q);
            for (qj, sj) in q.iter_mut().zip(&s_hist[i]) {
                *qj += (alpha[i] - beta) * sj;
            }
        }
        let mut dir: Vec<f64> = q.iter().zip(&pg).map(|(&qi, &p)| if p == 0.0 { 0.0 } else { -qi }).collect();
        if dotf(&dir, &pg) >= 0.0 {
            dir = pg.iter().map(|v| -v).collect();
            s_hist.clear();
            y_hist.clear();
        }
        let mut step = if k == 0 {
            let norm = dotf(&dir, &dir).sqrt();
            (1.0 / norm.max(1e-12)).min(1.0)
        } else {
            1.0
        };

        let mut accepted = None;
        for _ in 0..40 {
            let mut xn: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            project(&mut xn, lo, hi);
            let dx: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
            let decrease = dotf(&gx, &dx);
            if dx.iter().all(|v| *v == 0.0) {
                break;
            }
            let (fn_, gn) = f(&xn);
            if fn_.is_finite() && fn_ <= fx + 1e-4 * decrease {
                accepted = Some((xn, fn_, gn));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            converged = true;
            break;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&gx).map(|(a, b)| a - b).collect();
        let change = (fx - fn_).abs();
        let scale = fx.abs().max(1.0);
        x = xn;
        fx = fn_;
        gx = gn;
        if dotf(&s, &y) > 1e-12 * dotf(&y, &y).max(1e-300) {
            s_hist.push(s);
            y_hist.push(y);
            if s_hist.len() > opts.memory {
                s_hist.remove(0);
                y_hist.remove(0);
            }
        }
        if change <= opts.f_tol * scale {
            converged = true;
            break;
        }
    }
    debug_assert_eq!(x.len(), n);
    Minimum { x, f: fx, iterations, converged }
}
