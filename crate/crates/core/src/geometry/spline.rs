//! Scalar cubic splines over a strictly increasing knot sequence.

/// Piecewise cubic `s_i(t) = a + b dt + c dt^2 + d dt^3` on `[t_i, t_{i+1}]`.
#[derive(Debug, Clone)]
pub(crate) struct CubicSpline {
    t: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
}

impl CubicSpline {
    /// Natural end conditions (zero second derivative at both ends).
    pub fn natural(t: &[f64], y: &[f64]) -> Self {
        let n = t.len();
        assert!(n >= 2 && y.len() == n);
        let h: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
        // second derivatives m_i, m_0 = m_{n-1} = 0, tridiagonal interior system
        let mut m = vec![0.0; n];
        if n > 2 {
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut upper = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for i in 0..k {
                let j = i + 1;
                diag[i] = 2.0 * (h[j - 1] + h[j]);
                upper[i] = h[j];
                rhs[i] = 6.0 * ((y[j + 1] - y[j]) / h[j] - (y[j] - y[j - 1]) / h[j - 1]);
            }
            // Thomas algorithm; lower diagonal equals h[j-1] = upper[i-1]
            for i in 1..k {
                let w = upper[i - 1] / diag[i - 1];
                diag[i] -= w * upper[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            let mut sol = vec![0.0; k];
            sol[k - 1] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                sol[i] = (rhs[i] - upper[i] * sol[i + 1]) / diag[i];
            }
            m[1..=k].copy_from_slice(&sol);
        }
        Self::from_second_derivatives(t, y, &h, &m)
    }

    /// Periodic spline; `y[0]` must equal `y[n-1]` (the closing knot).
    pub fn periodic(t: &[f64], y: &[f64]) -> Self {
        let n = t.len();
        assert!(n >= 3 && y.len() == n);
        let h: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
        let k = n - 1; // unknowns m_0..m_{k-1}, m_k = m_0
        let mut mat = vec![vec![0.0; k]; k];
        let mut rhs = vec![0.0; k];
        for i in 0..k {
            let prev = (i + k - 1) % k;
            let hp = h[prev];
            let hi = h[i];
            mat[i][prev] += hp;
            mat[i][i] += 2.0 * (hp + hi);
            mat[i][(i + 1) % k] += hi;
            let yp = if i == 0 { y[k - 1] } else { y[i - 1] };
            rhs[i] = 6.0 * ((y[i + 1] - y[i]) / hi - (y[i] - yp) / hp);
        }
        let sol = solve_dense(mat, rhs);
        let mut m = sol.clone();
        m.push(sol[0]);
        Self::from_second_derivatives(t, y, &h, &m)
    }

    fn from_second_derivatives(t: &[f64], y: &[f64], h: &[f64], m: &[f64]) -> Self {
        let segs = h.len();
        let mut a = Vec::with_capacity(segs);
        let mut b = Vec::with_capacity(segs);
        let mut c = Vec::with_capacity(segs);
        let mut d = Vec::with_capacity(segs);
        for i in 0..segs {
            a.push(y[i]);
            b.push((y[i + 1] - y[i]) / h[i] - h[i] * (2.0 * m[i] + m[i + 1]) / 6.0);
            c.push(m[i] / 2.0);
            d.push((m[i + 1] - m[i]) / (6.0 * h[i]));
        }
        Self { t: t.to_vec(), a, b, c, d }
    }

    pub fn eval_in(&self, seg: usize, t: f64) -> f64 {
        let dt = t - self.t[seg];
        self.a[seg] + dt * (self.b[seg] + dt * (self.c[seg] + dt * self.d[seg]))
    }

    pub fn knots(&self) -> &[f64] {
        &self.t
    }
}

/// Gaussian elimination with partial pivoting; the periodic system is small.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn natural_spline_reproduces_lines() {
        let t = [0.0, 1.0, 2.5, 4.0];
        let y = [1.0, 3.0, 6.0, 9.0];
        let s = CubicSpline::natural(&t, &y);
        assert!((s.eval_in(1, 2.0) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn interpolates_knots() {
        let t = [0.0, 1.0, 2.0, 3.0, 4.0];
        let y = [0.0, 1.0, 0.0, -1.0, 0.0];
        for s in [CubicSpline::natural(&t, &y), CubicSpline::periodic(&t, &y)] {
            for i in 0..4 {
                assert!((s.eval_in(i, t[i]) - y[i]).abs() < 1e-12);
                assert!((s.eval_in(i, t[i + 1]) - y[i + 1]).abs() < 1e-12);
            }
        }
    }
}
