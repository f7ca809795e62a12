//! Primal–dual interior-point method for
//!
//!   minimise s  subject to  F₀ + Σ_i z_i F_i + s·𝟙 ⪰ 0
//!
//! over block-diagonal Hermitian matrices. The paired problem is
//!
//!   minimise ⟨F₀, X⟩  subject to  ⟨F_i, X⟩ = 0, Tr X = 1, X ⪰ 0,
//!
//! whose optimal value is −s*. Search directions are HKM with a Mehrotra
//! predictor–corrector; the dual slack Z is recomputed from (z, s) at every
//! iterate, so (z, s) stays exactly feasible.

use faer::linalg::solvers::{DenseSolveCore, Solve};
use faer::{c64, Mat, Par, Scale, Side};

/// Search direction (dy, dX, dZ).
type Direction = (Vec<f64>, Vec<Mat<c64>>, Vec<Mat<c64>>);

/// Block-diagonal linear matrix inequality.
#[derive(Clone, Debug)]
pub struct Lmi {
    pub sizes: Vec<usize>,
    pub f0: Vec<Mat<c64>>,
    /// F_i as sparse lists of (block, matrix).
    pub f: Vec<Vec<(usize, Mat<c64>)>>,
}

#[derive(Clone, Copy, Debug)]
pub struct IpmOptions {
    pub max_iter: usize,
    /// Stop as soon as s ≤ −feasible_exit.
    pub feasible_exit: f64,
    pub gap_tol: f64,
    pub infeas_tol: f64,
}

impl Default for IpmOptions {
    fn default() -> Self {
        Self { max_iter: 120, feasible_exit: 1e-6, gap_tol: 1e-10, infeas_tol: 1e-10 }
    }
}

#[derive(Clone, Debug)]
pub struct IpmResult {
    pub z: Vec<f64>,
    pub s: f64,
    pub x: Vec<Mat<c64>>,
    pub iterations: usize,
    pub converged: bool,
}

fn inner(a: &Mat<c64>, b: &Mat<c64>) -> f64 {
    let mut acc = 0.0;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            let (x, y) = (a[(i, j)], b[(i, j)]);
            acc += x.re * y.re + x.im * y.im;
        }
    }
    acc
}

fn hermitian_part(m: &Mat<c64>) -> Mat<c64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| (m[(i, j)] + m[(j, i)].conj()) * 0.5)
}

fn identity(n: usize) -> Mat<c64> {
    Mat::from_fn(n, n, |i, j| if i == j { c64::new(1.0, 0.0) } else { c64::new(0.0, 0.0) })
}

fn min_eig(m: &Mat<c64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    m.self_adjoint_eigenvalues(Side::Lower).map(|v| v[0]).unwrap_or(f64::NEG_INFINITY)
}

/// Largest α with X + αD ⪰ 0 (∞ if D ⪰ 0); 0 if X is not positive definite.
fn max_step(x: &Mat<c64>, d: &Mat<c64>) -> f64 {
    let Ok(llt) = x.llt(Side::Lower) else { return 0.0 };
    let l = llt.L();
    let mut t = d.clone();
    faer::linalg::triangular_solve::solve_lower_triangular_in_place(l, t.as_mut(), Par::Seq);
    let mut w = t.adjoint().to_owned();
    faer::linalg::triangular_solve::solve_lower_triangular_in_place(l, w.as_mut(), Par::Seq);
    let lam = min_eig(&hermitian_part(&w));
    if lam >= 0.0 {
        f64::INFINITY
    } else {
        -1.0 / lam
    }
}

fn vec_of(m: &Mat<c64>) -> impl Iterator<Item = c64> + '_ {
    (0..m.ncols()).flat_map(move |j| (0..m.nrows()).map(move |i| m[(i, j)]))
}

struct Prepared {
    /// Per block: constraint indices touching it and their restrictions.
    idx: Vec<Vec<usize>>,
    mats: Vec<Vec<Mat<c64>>>,
}

impl Lmi {
    fn m(&self) -> usize {
        self.f.len() + 1
    }

    fn prepare(&self) -> Prepared {
        let nb = self.sizes.len();
        let mut idx: Vec<Vec<usize>> = vec![Vec::new(); nb];
        let mut mats: Vec<Vec<Mat<c64>>> = vec![Vec::new(); nb];
        for (i, fi) in self.f.iter().enumerate() {
            for (b, m) in fi {
                idx[*b].push(i);
                mats[*b].push(m.clone());
            }
        }
        let s_index = self.f.len();
        for b in 0..nb {
            idx[b].push(s_index);
            mats[b].push(identity(self.sizes[b]));
        }
        Prepared { idx, mats }
    }

    /// Z = F₀ + Σ y_i F_i with y = (z, s).
    fn slack(&self, prep: &Prepared, y: &[f64]) -> Vec<Mat<c64>> {
        (0..self.sizes.len())
            .map(|b| {
                let mut z = self.f0[b].clone();
                for (k, &i) in prep.idx[b].iter().enumerate() {
                    z += &prep.mats[b][k] * Scale(c64::new(y[i], 0.0));
                }
                hermitian_part(&z)
            })
            .collect()
    }

    fn direction(&self, prep: &Prepared, dy: &[f64]) -> Vec<Mat<c64>> {
        (0..self.sizes.len())
            .map(|b| {
                let mut z = Mat::<c64>::zeros(self.sizes[b], self.sizes[b]);
                for (k, &i) in prep.idx[b].iter().enumerate() {
                    z += &prep.mats[b][k] * Scale(c64::new(dy[i], 0.0));
                }
                z
            })
            .collect()
    }

    /// (⟨F_i, Y⟩)_i summed over blocks.
    fn pair(&self, prep: &Prepared, y: &[Mat<c64>]) -> Vec<f64> {
        let mut out = vec![0.0; self.m()];
        for ((idx, mats), yb) in prep.idx.iter().zip(&prep.mats).zip(y) {
            for (k, &i) in idx.iter().enumerate() {
                out[i] += inner(&mats[k], yb);
            }
        }
        out
    }
}

/// Rows of the stacked real G matrix assembled per dense product.
const SCHUR_CHUNK_ROWS: usize = 4096;

fn schur_complement(lmi: &Lmi, prep: &Prepared, x: &[Mat<c64>], zinv: &[Mat<c64>]) -> Option<Mat<f64>> {
    let m = lmi.m();
    let mut schur = Mat::<f64>::zeros(m, m);
    let mut flush = |blocks: &[(usize, Mat<c64>, Mat<c64>)]| {
        let mut cols: Vec<usize> = blocks.iter().flat_map(|(b, _, _)| prep.idx[*b].iter().copied()).collect();
        cols.sort_unstable();
        cols.dedup();
        let rows: usize = blocks.iter().map(|(b, _, _)| 2 * lmi.sizes[*b] * lmi.sizes[*b]).sum();
        let mut g = Mat::<f64>::zeros(rows, cols.len());
        let mut offset = 0;
        for (b, lx, lz) in blocks {
            let r = lmi.sizes[*b];
            for (k, &i) in prep.idx[*b].iter().enumerate() {
                let c = cols.binary_search(&i).expect("column of a chunk block");
                let gi = lx.adjoint() * &prep.mats[*b][k] * lz;
                for (row, v) in vec_of(&gi).enumerate() {
                    g[(offset + 2 * row, c)] = v.re;
                    g[(offset + 2 * row + 1, c)] = v.im;
                }
            }
            offset += 2 * r * r;
        }
        let local = g.transpose() * &g;
        for (a, &i) in cols.iter().enumerate() {
            for (c, &j) in cols.iter().enumerate() {
                schur[(i, j)] += local[(a, c)];
            }
        }
    };
    let mut chunk = Vec::new();
    let mut rows = 0;
    for b in 0..lmi.sizes.len() {
        let lx = x[b].llt(Side::Lower).ok()?.L().to_owned();
        let lz = zinv[b].llt(Side::Lower).ok()?.L().to_owned();
        rows += 2 * lmi.sizes[b] * lmi.sizes[b];
        chunk.push((b, lx, lz));
        if rows >= SCHUR_CHUNK_ROWS {
            flush(&chunk);
            chunk.clear();
            rows = 0;
        }
    }
    if !chunk.is_empty() {
        flush(&chunk);
    }
    Some(schur)
}

/// Cholesky factor of M, with a growing diagonal shift if M is numerically
/// singular.
fn factor_spd(m: &Mat<f64>) -> Option<faer::linalg::solvers::Llt<f64>> {
    let n = m.nrows();
    let scale = (0..n).map(|i| m[(i, i)].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut reg = 0.0;
    for _ in 0..6 {
        let mut a = m.clone();
        for i in 0..n {
            a[(i, i)] += reg;
        }
        if let Ok(llt) = a.llt(Side::Lower) {
            return Some(llt);
        }
        reg = if reg == 0.0 { 1e-14 * scale } else { reg * 100.0 };
    }
    None
}

fn solve_factored(llt: &faer::linalg::solvers::Llt<f64>, rhs: &[f64]) -> Option<Vec<f64>> {
    let mut col = Mat::<f64>::from_fn(rhs.len(), 1, |i, _| rhs[i]);
    llt.solve_in_place(col.as_mut());
    let out: Vec<f64> = (0..rhs.len()).map(|i| col[(i, 0)]).collect();
    out.iter().all(|v| v.is_finite()).then_some(out)
}

pub fn solve(lmi: &Lmi, opts: &IpmOptions) -> IpmResult {
    let nb = lmi.sizes.len();
    let m = lmi.m();
    let n_total: usize = lmi.sizes.iter().sum();
    let prep = lmi.prepare();

    // Start: z = 0, s large enough that Z ⪰ 𝟙; X = 𝟙/n.
    let lam0 = lmi.f0.iter().map(min_eig).fold(f64::INFINITY, f64::min);
    let scale = lmi.f0.iter().map(|f| (0..f.nrows()).map(|i| f[(i, i)].re.abs()).fold(0.0, f64::max)).fold(1.0, f64::max);
    let mut y = vec![0.0; m];
    y[m - 1] = (-lam0).max(0.0) + scale;
    let mut x: Vec<Mat<c64>> = lmi.sizes.iter().map(|&r| identity(r) * Scale(c64::new(1.0 / n_total as f64, 0.0))).collect();
    let mut b = vec![0.0; m];
    b[m - 1] = 1.0;

    let mut iterations = 0;
    let mut converged = false;
    let mut stalls = 0;
    while iterations < opts.max_iter {
        let z = lmi.slack(&prep, &y);
        let s = y[m - 1];
        if s <= -opts.feasible_exit {
            break;
        }
        let zinv: Vec<Mat<c64>> = match z.iter().map(|zb| zb.llt(Side::Lower).map(|l| hermitian_part(&l.inverse()))).collect() {
            Ok(v) => v,
            Err(_) => break,
        };
        let gap: f64 = (0..nb).map(|k| inner(&x[k], &z[k])).sum();
        let mu = gap / n_total as f64;
        let ax = lmi.pair(&prep, &x);
        let rp: Vec<f64> = (0..m).map(|i| b[i] - ax[i]).collect();
        let pinf = rp.iter().map(|v| v * v).sum::<f64>().sqrt();
        let pobj: f64 = (0..nb).map(|k| inner(&lmi.f0[k], &x[k])).sum();
        let rel_gap = gap / (1.0 + pobj.abs() + s.abs());
        if rel_gap < opts.gap_tol && pinf < opts.infeas_tol {
            converged = true;
            break;
        }
        iterations += 1;

        // Schur complement M_ij = ⟨F_i, X F_j Z⁻¹⟩ = Re⟨G_i, G_j⟩ with
        // G_i = L_Xᴴ F_i L_Z, X = L_X L_Xᴴ and Z⁻¹ = L_Z L_Zᴴ.
        let Some(schur) = schur_complement(lmi, &prep, &x, &zinv) else { break };
        let Some(factor) = factor_spd(&schur) else { break };

        // Newton system M Δy = −b + σμ⟨F, Z⁻¹⟩ − ⟨F, C Z⁻¹⟩ with C the
        // second-order correction (zero in the predictor).
        let a_zinv = lmi.pair(&prep, &zinv);
        let step = |sigma: f64, corr: Option<&Vec<Mat<c64>>>| -> Option<Direction> {
            let mut h: Vec<f64> = (0..m).map(|i| -b[i] + sigma * mu * a_zinv[i]).collect();
            if let Some(cm) = corr {
                let prod: Vec<Mat<c64>> = (0..nb).map(|k| &cm[k] * &zinv[k]).collect();
                let a_corr = lmi.pair(&prep, &prod);
                for i in 0..m {
                    h[i] -= a_corr[i];
                }
            }
            let dy = solve_factored(&factor, &h)?;
            let dz = lmi.direction(&prep, &dy);
            let dx: Vec<Mat<c64>> = (0..nb)
                .map(|k| {
                    let mut t = &zinv[k] * Scale(c64::new(sigma * mu, 0.0)) - &x[k] - &x[k] * &dz[k] * &zinv[k];
                    if let Some(cm) = corr {
                        t -= &cm[k] * &zinv[k];
                    }
                    hermitian_part(&t)
                })
                .collect();
            Some((dy, dx, dz))
        };
        let step_lengths = |dx: &[Mat<c64>], dz: &[Mat<c64>]| -> (f64, f64) {
            let ap = (0..nb).map(|k| max_step(&x[k], &dx[k])).fold(f64::INFINITY, f64::min);
            let ad = (0..nb).map(|k| max_step(&z[k], &dz[k])).fold(f64::INFINITY, f64::min);
            (ap, ad)
        };

        let Some((_, dx_p, dz_p)) = step(0.0, None) else { break };
        let (ap, ad) = step_lengths(&dx_p, &dz_p);
        let (ap1, ad1) = (ap.min(1.0), ad.min(1.0));
        let gap_pred: f64 = (0..nb)
            .map(|k| {
                let xk = &x[k] + &dx_p[k] * Scale(c64::new(ap1, 0.0));
                let zk = &z[k] + &dz_p[k] * Scale(c64::new(ad1, 0.0));
                inner(&xk, &zk)
            })
            .sum();
        let expon = (3.0 * ap1.min(ad1).powi(2)).max(1.0);
        let sigma = (gap_pred / gap).max(0.0).powf(expon).min(1.0);
        let corr: Vec<Mat<c64>> = (0..nb).map(|k| &dx_p[k] * &dz_p[k]).collect();
        let Some((dy, dx, dz)) = step(sigma, Some(&corr)) else { break };
        let (ap, ad) = step_lengths(&dx, &dz);
        let gamma = 0.9 + 0.09 * ap1.min(ad1);
        let alpha_p = (gamma * ap).min(1.0);
        let alpha_d = (gamma * ad).min(1.0);
        if alpha_p < 1e-10 && alpha_d < 1e-10 {
            stalls += 1;
            if stalls >= 3 {
                break;
            }
        } else {
            stalls = 0;
        }
        for k in 0..nb {
            x[k] = hermitian_part(&(&x[k] + &dx[k] * Scale(c64::new(alpha_p, 0.0))));
        }
        for i in 0..m {
            y[i] += alpha_d * dy[i];
        }
    }
    let s = y[m - 1];
    y.truncate(m - 1);
    IpmResult { z: y, s, x, iterations, converged }
}
