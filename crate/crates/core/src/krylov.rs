//! Restarted GMRES for the linear fixed-point systems `(I - A) x = b` that
//! appear when scattering or cross-coupling terms are lagged.

/// Outcome of a Krylov solve.
#[derive(Debug, Clone, Copy)]
pub struct GmresReport {
    pub iterations: usize,
    /// Final residual norm relative to `‖b‖`.
    pub relative_residual: f64,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Solves `op(x) = b` by GMRES(`restart`) with modified Gram-Schmidt.
///
/// `x` holds the initial guess on entry and the solution on exit.
pub fn gmres<F>(
    mut op: F,
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    restart: usize,
    max_iters: usize,
) -> GmresReport
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let b_norm = norm(b);
    if b_norm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return GmresReport {
            iterations: 0,
            relative_residual: 0.0,
            converged: true,
        };
    }
    let restart = restart.max(1);
    let mut total = 0;

    loop {
        let ax = op(x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let beta = norm(&r);
        let rel = beta / b_norm;
        if rel <= tol || total >= max_iters {
            return GmresReport {
                iterations: total,
                relative_residual: rel,
                converged: rel <= tol,
            };
        }

        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(restart + 1);
        basis.push(r.iter().map(|v| v / beta).collect());
        // Hessenberg columns, rotated in place.
        let mut h: Vec<Vec<f64>> = Vec::with_capacity(restart);
        let mut cs: Vec<f64> = Vec::with_capacity(restart);
        let mut sn: Vec<f64> = Vec::with_capacity(restart);
        let mut g = vec![0.0; restart + 1];
        g[0] = beta;
        let mut steps = 0;

        for j in 0..restart {
            let mut w = op(&basis[j]);
            let mut col = vec![0.0; j + 2];
            for (i, v) in basis.iter().enumerate() {
                let hij = dot(&w, v);
                col[i] = hij;
                w.iter_mut().zip(v).for_each(|(wk, vk)| *wk -= hij * vk);
            }
            let wn = norm(&w);
            col[j + 1] = wn;

            for i in 0..j {
                let t = cs[i] * col[i] + sn[i] * col[i + 1];
                col[i + 1] = -sn[i] * col[i] + cs[i] * col[i + 1];
                col[i] = t;
            }
            let denom = col[j].hypot(col[j + 1]);
            let (c, s) = if denom == 0.0 { (1.0, 0.0) } else { (col[j] / denom, col[j + 1] / denom) };
            col[j] = denom;
            col[j + 1] = 0.0;
            cs.push(c);
            sn.push(s);
            g[j + 1] = -s * g[j];
            g[j] *= c;
            h.push(col);
            steps = j + 1;
            total += 1;

            let rel = g[j + 1].abs() / b_norm;
            if rel <= tol || total >= max_iters || wn == 0.0 {
                break;
            }
            basis.push(w.iter().map(|v| v / wn).collect());
        }

        // Back substitution on the triangular system.
        let mut y = vec![0.0; steps];
        for i in (0..steps).rev() {
            let mut s = g[i];
            for (k, yk) in y.iter().enumerate().take(steps).skip(i + 1) {
                s -= h[k][i] * yk;
            }
            y[i] = s / h[i][i];
        }
        for (yi, v) in y.iter().zip(&basis) {
            x.iter_mut().zip(v).for_each(|(xk, vk)| *xk += yi * vk);
        }
    }
}
