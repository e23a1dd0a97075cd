//! Sums over time precomputed once, so likelihood terms for any (W, A) cost
//! O((K + P)²) per voxel.
//!
//! With usable rows t = P..T, lag ℓ = p + 1, d_p[t] = y[t − ℓ] and
//! X̃_p[t, :] = X[t − ℓ, :]:
//!
//!   l_n(w, a) = c(a) − 2 q̃(a)ᵀw + wᵀQ̃(a)w
//!   Q̃(a) = XᵀX − Σ_p a_p (R_p + R_pᵀ) + Σ_pq a_p a_q S_pq
//!   q̃(a) = Xᵀy − Σ_p a_p B_p + Σ_pq a_p a_q D_p·q
//!   c(a) = yᵀy − 2 aᵀ(dy) + aᵀ(ddᵀ)a
//!
//! R_p = XᵀX̃_p, S_pq = X̃_pᵀX̃_q, B_p = X̃_pᵀy + Xᵀd_p, D_p·q = X̃_qᵀd_p.

use nalgebra::{DMatrix, DVector};

use super::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LaggedStats {
    pub p: usize,
    pub k: usize,
    pub n: usize,
    /// Number of usable rows, T − P.
    pub t_eff: usize,
    pub xtx: DMatrix<f64>,
    /// R_p, length P.
    pub r: Vec<DMatrix<f64>>,
    /// S_pq at index p·P + q.
    pub s: Vec<DMatrix<f64>>,
    /// Per voxel yᵀy.
    pub yty: Vec<f64>,
    /// K×N, column n is Xᵀy_n.
    pub xty: DMatrix<f64>,
    /// P×N, dy[p, n] = d_pᵀy.
    pub dy: DMatrix<f64>,
    /// N blocks of P×P (row-major), d_pᵀd_q.
    pub dd: Vec<f64>,
    /// N blocks of P×K (row-major), B_p.
    pub bmat: Vec<f64>,
    /// N blocks of P×K×P, index (p, k, q) → (p·K + k)·P + q.
    pub dten: Vec<f64>,
}

pub fn precompute_lagged(data: &Dataset, p: usize) -> Result<LaggedStats> {
    let t = data.t();
    if p >= t {
        return Err(Error::Domain(format!("AR order {p} needs more than {t} time points")));
    }
    let (k, n) = (data.k(), data.n());
    let rows = t - p;
    let xu = data.x.rows(p, rows).into_owned();
    let xl: Vec<DMatrix<f64>> = (0..p).map(|j| data.x.rows(p - j - 1, rows).into_owned()).collect();
    let xtx = xu.transpose() * &xu;
    let r = xl.iter().map(|xp| xu.transpose() * xp).collect();
    let mut s = Vec::with_capacity(p * p);
    for a in 0..p {
        for b in 0..p {
            s.push(xl[a].transpose() * &xl[b]);
        }
    }
    let mut yty = vec![0.0; n];
    let mut xty = DMatrix::zeros(k, n);
    let mut dy = DMatrix::zeros(p, n);
    let mut dd = vec![0.0; n * p * p];
    let mut bmat = vec![0.0; n * p * k];
    let mut dten = vec![0.0; n * p * k * p];
    for v in 0..n {
        let col = data.y.column(v);
        let yu = DVector::from_iterator(rows, col.rows(p, rows).iter().copied());
        let d: Vec<DVector<f64>> = (0..p)
            .map(|j| DVector::from_iterator(rows, col.rows(p - j - 1, rows).iter().copied()))
            .collect();
        yty[v] = yu.dot(&yu);
        xty.column_mut(v).copy_from(&(xu.transpose() * &yu));
        for a in 0..p {
            dy[(a, v)] = d[a].dot(&yu);
            for b in 0..p {
                dd[v * p * p + a * p + b] = d[a].dot(&d[b]);
            }
            let ba = xl[a].transpose() * &yu + xu.transpose() * &d[a];
            for c in 0..k {
                bmat[v * p * k + a * k + c] = ba[c];
            }
            for b in 0..p {
                let dab = xl[b].transpose() * &d[a];
                for c in 0..k {
                    dten[v * p * k * p + (a * k + c) * p + b] = dab[c];
                }
            }
        }
    }
    Ok(LaggedStats {
        p,
        k,
        n,
        t_eff: rows,
        xtx,
        r,
        s,
        yty,
        xty,
        dy,
        dd,
        bmat,
        dten,
    })
}

impl LaggedStats {
    fn b_at(&self, v: usize, p: usize, c: usize) -> f64 {
        self.bmat[v * self.p * self.k + p * self.k + c]
    }

    fn d_at(&self, v: usize, p: usize, c: usize, q: usize) -> f64 {
        self.dten[v * self.p * self.k * self.p + (p * self.k + c) * self.p + q]
    }

    /// Q̃(a), shared by all voxels with AR coefficients `a`.
    pub fn qt(&self, a: &[f64]) -> DMatrix<f64> {
        let mut m = self.xtx.clone();
        for p in 0..self.p {
            let rr = &self.r[p] + self.r[p].transpose();
            m -= rr * a[p];
            for q in 0..self.p {
                m += &self.s[p * self.p + q] * (a[p] * a[q]);
            }
        }
        m
    }

    /// q̃_n(a).
    pub fn qv(&self, v: usize, a: &[f64]) -> DVector<f64> {
        let mut out = DVector::from_iterator(self.k, self.xty.column(v).iter().copied());
        for c in 0..self.k {
            let mut acc = 0.0;
            for p in 0..self.p {
                acc -= a[p] * self.b_at(v, p, c);
                for q in 0..self.p {
                    acc += a[p] * a[q] * self.d_at(v, p, c, q);
                }
            }
            out[c] += acc;
        }
        out
    }

    /// c_n(a) = l_n(0, a).
    pub fn c0(&self, v: usize, a: &[f64]) -> f64 {
        let mut acc = self.yty[v];
        for p in 0..self.p {
            acc -= 2.0 * a[p] * self.dy[(p, v)];
            for q in 0..self.p {
                acc += a[p] * a[q] * self.dd[v * self.p * self.p + p * self.p + q];
            }
        }
        acc
    }

    /// ∂Q̃/∂a_p.
    pub fn dqt(&self, a: &[f64], p: usize) -> DMatrix<f64> {
        let mut m = -(&self.r[p] + self.r[p].transpose());
        for q in 0..self.p {
            m += (&self.s[p * self.p + q] + &self.s[q * self.p + p]) * a[q];
        }
        m
    }

    /// ∂q̃_n/∂a_p.
    pub fn dqv(&self, v: usize, a: &[f64], p: usize) -> DVector<f64> {
        DVector::from_fn(self.k, |c, _| {
            let mut acc = -self.b_at(v, p, c);
            for q in 0..self.p {
                acc += a[q] * (self.d_at(v, p, c, q) + self.d_at(v, q, c, p));
            }
            acc
        })
    }

    /// ∂c_n/∂a_p.
    pub fn dc0(&self, v: usize, a: &[f64], p: usize) -> f64 {
        let mut acc = -2.0 * self.dy[(p, v)];
        for q in 0..self.p {
            acc += 2.0 * a[q] * self.dd[v * self.p * self.p + p * self.p + q];
        }
        acc
    }

    /// l_n(w, a) = ‖prewhitened residual‖².
    pub fn loglik_term(&self, v: usize, w: &[f64], a: &[f64]) -> f64 {
        let w = DVector::from_column_slice(w);
        let qt = self.qt(a);
        self.c0(v, a) - 2.0 * self.qv(v, a).dot(&w) + (qt * &w).dot(&w)
    }

    /// ∂l_n/∂a_p at (w, a).
    pub fn dloglik_da(&self, v: usize, w: &[f64], a: &[f64], p: usize) -> f64 {
        let w = DVector::from_column_slice(w);
        self.dc0(v, a, p) - 2.0 * self.dqv(v, a, p).dot(&w) + (self.dqt(a, p) * &w).dot(&w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_data(t: usize, n: usize, k: usize, seed: u64) -> Dataset {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let y = DMatrix::from_fn(t, n, |_, _| r.random::<f64>() * 2.0 - 1.0);
        let x = DMatrix::from_fn(t, k, |_, _| r.random::<f64>() * 2.0 - 1.0);
        Dataset::new(y, x, vec![0]).unwrap()
    }

    // direct prewhitening over the usable rows
    fn naive(data: &Dataset, v: usize, w: &[f64], a: &[f64]) -> f64 {
        let p = a.len();
        let e: Vec<f64> = (0..data.t())
            .map(|t| data.y[(t, v)] - (0..data.k()).map(|c| data.x[(t, c)] * w[c]).sum::<f64>())
            .collect();
        (p..data.t())
            .map(|t| {
                let u = e[t] - (0..p).map(|j| a[j] * e[t - j - 1]).sum::<f64>();
                u * u
            })
            .sum()
    }

    #[test]
    fn hand_lag() {
        let y = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let x = DMatrix::from_element(3, 1, 1.0);
        let d = Dataset::new(y, x, vec![0]).unwrap();
        let s = precompute_lagged(&d, 1).unwrap();
        assert_eq!(s.t_eff, 2);
        // d = (1, 2), y usable = (2, 3)
        assert_eq!(s.dy[(0, 0)], 8.0);
        assert_eq!(s.dd[0], 5.0);
        assert_eq!(s.r.len(), 1);
        assert_eq!(s.s.len(), 1);
        assert!(precompute_lagged(&d, 3).is_err());
    }

    #[test]
    fn zero_order_is_plain_least_squares() {
        let d = random_data(12, 3, 2, 1);
        let s = precompute_lagged(&d, 0).unwrap();
        assert!(s.r.is_empty() && s.s.is_empty());
        assert!((s.loglik_term(1, &[0.0, 0.0], &[]) - s.yty[1]).abs() < 1e-14);
    }

    #[test]
    fn matches_prewhitening() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        for inst in 0..20 {
            let p = inst % 3;
            let d = random_data(25, 4, 3, 100 + inst as u64);
            let s = precompute_lagged(&d, p).unwrap();
            for v in 0..4 {
                let w: Vec<f64> = (0..3).map(|_| r.random::<f64>() - 0.5).collect();
                let a: Vec<f64> = (0..p).map(|_| r.random::<f64>() * 1.4 - 0.7).collect();
                let fast = s.loglik_term(v, &w, &a);
                let slow = naive(&d, v, &w, &a);
                assert!((fast - slow).abs() <= 1e-10 * slow, "P={p}: {fast} vs {slow}");
            }
        }
    }

    #[test]
    fn zero_ar_equals_lagged_rows() {
        let d = random_data(20, 2, 2, 9);
        let s1 = precompute_lagged(&d, 1).unwrap();
        let w = [0.3, -0.2];
        let direct: f64 = (1..20)
            .map(|t| {
                let e = d.y[(t, 0)] - d.x[(t, 0)] * w[0] - d.x[(t, 1)] * w[1];
                e * e
            })
            .sum();
        assert!((s1.loglik_term(0, &w, &[0.0]) - direct).abs() < 1e-12);
    }

    #[test]
    fn ar_derivative_matches_fd() {
        let d = random_data(30, 2, 2, 4);
        let s = precompute_lagged(&d, 2).unwrap();
        let w = [0.4, -0.1];
        let a = [0.3, -0.2];
        for p in 0..2 {
            let h = 1e-6;
            let mut ap = a;
            ap[p] += h;
            let mut am = a;
            am[p] -= h;
            let fd = (s.loglik_term(1, &w, &ap) - s.loglik_term(1, &w, &am)) / (2.0 * h);
            let an = s.dloglik_da(1, &w, &a, p);
            assert!((fd - an).abs() < 1e-7 * an.abs().max(1.0));
        }
    }
}
