//! Ground-truth machinery: a finite-difference Darcy solver with
//! conjugate-gradient linear algebra, grid downsampling, and the two
//! closed-form Green's functions used as analytic oracles.

use crate::error::{Error, Result};
use crate::random_fields::GridField;

/// Symmetric positive definite system in compressed sparse row form.
#[derive(Debug, Clone)]
pub struct SparseSystem {
    dimension: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
    rhs: Vec<f64>,
}

impl SparseSystem {
    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    /// Matrix entry (i, j); zero when outside the sparsity pattern.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        for k in lo..hi {
            if self.col_idx[k] == j {
                return self.values[k];
            }
        }
        0.0
    }

    /// y = A x.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dimension);
        debug_assert_eq!(y.len(), self.dimension);
        for i in 0..self.dimension {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            y[i] = acc;
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        (0..self.dimension).map(|i| self.entry(i, i)).collect()
    }
}

/// Index of the interior unknown at grid position (i, j) on an s-grid.
fn interior_index(i: usize, j: usize, s: usize) -> usize {
    (i - 1) * (s - 2) + (j - 1)
}

/// Discretize -div(a grad u) = f with homogeneous Dirichlet boundary on
/// the unit square: 5-point stencil, arithmetic-mean interface
/// coefficients, one unknown per interior grid node.
pub fn assemble_darcy(a: &GridField, f: &GridField) -> Result<SparseSystem> {
    if a.dim() != 2 || f.dim() != 2 {
        return Err(Error::Domain("Darcy assembly is 2D".into()));
    }
    if a.resolution() != f.resolution() {
        return Err(Error::ShapeMismatch {
            op: "assemble_darcy",
            detail: format!("a at s={}, f at s={}", a.resolution(), f.resolution()),
        });
    }
    let s = a.resolution();
    if s < 3 {
        return Err(Error::Resolution(format!("Darcy assembly needs s >= 3, got {s}")));
    }
    if a.values().iter().any(|&v| v <= 0.0) {
        return Err(Error::Domain("coefficient must be strictly positive".into()));
    }

    let av = a.values();
    let h = a.h();
    let inv_h2 = 1.0 / (h * h);
    let n = s - 2;
    let dim = n * n;
    let mean = |p: usize, q: usize| 0.5 * (av[p] + av[q]);

    let mut row_ptr = Vec::with_capacity(dim + 1);
    let mut col_idx = Vec::with_capacity(5 * dim);
    let mut values = Vec::with_capacity(5 * dim);
    let mut rhs = Vec::with_capacity(dim);
    row_ptr.push(0);

    for i in 1..s - 1 {
        for j in 1..s - 1 {
            let c = i * s + j;
            let a_up = mean(c, c - s);
            let a_down = mean(c, c + s);
            let a_left = mean(c, c - 1);
            let a_right = mean(c, c + 1);
            // Columns in ascending unknown order: (i-1,j), (i,j-1),
            // (i,j), (i,j+1), (i+1,j); boundary neighbors are eliminated.
            if i > 1 {
                col_idx.push(interior_index(i - 1, j, s));
                values.push(-a_up * inv_h2);
            }
            if j > 1 {
                col_idx.push(interior_index(i, j - 1, s));
                values.push(-a_left * inv_h2);
            }
            col_idx.push(interior_index(i, j, s));
            values.push((a_up + a_down + a_left + a_right) * inv_h2);
            if j < s - 2 {
                col_idx.push(interior_index(i, j + 1, s));
                values.push(-a_right * inv_h2);
            }
            if i < s - 2 {
                col_idx.push(interior_index(i + 1, j, s));
                values.push(-a_down * inv_h2);
            }
            row_ptr.push(col_idx.len());
            rhs.push(f.values()[c]);
        }
    }

    Ok(SparseSystem { dimension: dim, row_ptr, col_idx, values, rhs })
}

/// Jacobi-preconditioned conjugate gradient to relative residual `tol`.
pub fn solve_cg(system: &SparseSystem, tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let n = system.dimension;
    let b = &system.rhs;
    let b_norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if b_norm == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let inv_diag: Vec<f64> = system.diagonal().iter().map(|&d| 1.0 / d).collect();

    let mut x = vec![0.0; n];
    let mut r = b.clone();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut ap = vec![0.0; n];

    for iter in 0..max_iter {
        system.matvec(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        let alpha = rz / pap;
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        let r_norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if r_norm / b_norm <= tol {
            return Ok(x);
        }
        for k in 0..n {
            z[k] = r[k] * inv_diag[k];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        for k in 0..n {
            p[k] = z[k] + beta * p[k];
        }
        rz = rz_new;
        let _ = iter;
    }

    let r_norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    Err(Error::Convergence { iterations: max_iter, residual: r_norm / b_norm })
}

/// Default CG tolerance for ground-truth solves.
pub const CG_TOL: f64 = 1e-10;

/// Embed interior unknowns into a full grid with zero boundary.
pub fn interior_to_grid(s: usize, interior: &[f64]) -> Result<GridField> {
    let n = s - 2;
    if interior.len() != n * n {
        return Err(Error::ShapeMismatch {
            op: "interior_to_grid",
            detail: format!("{} values for s={s}", interior.len()),
        });
    }
    let mut values = vec![0.0; s * s];
    for i in 1..s - 1 {
        for j in 1..s - 1 {
            values[i * s + j] = interior[interior_index(i, j, s)];
        }
    }
    GridField::new(s, 2, values)
}

/// Extract the interior unknowns of a full-grid field.
pub fn grid_to_interior(field: &GridField) -> Vec<f64> {
    let s = field.resolution();
    let v = field.values();
    let mut out = Vec::with_capacity((s - 2) * (s - 2));
    for i in 1..s - 1 {
        for j in 1..s - 1 {
            out.push(v[i * s + j]);
        }
    }
    out
}

/// Solve the Darcy problem on the full grid; boundary values are exactly 0.
pub fn solve_darcy(a: &GridField, f: &GridField) -> Result<GridField> {
    let system = assemble_darcy(a, f)?;
    let max_iter = 100 * system.dimension().max(100);
    let interior = solve_cg(&system, CG_TOL, max_iter)?;
    interior_to_grid(a.resolution(), &interior)
}

/// Strided subsampling onto a coarser grid whose nodes coincide exactly
/// with a subset of the fine nodes.
pub fn downsample(field: &GridField, s_target: usize) -> Result<GridField> {
    let s = field.resolution();
    if s_target < 2 {
        return Err(Error::Resolution(format!("target resolution {s_target} < 2")));
    }
    if (s - 1) % (s_target - 1) != 0 {
        return Err(Error::Resolution(format!(
            "cannot downsample s={s} to s={s_target}: stride {}/{} is not integral",
            s - 1,
            s_target - 1
        )));
    }
    let stride = (s - 1) / (s_target - 1);
    let v = field.values();
    let values = match field.dim() {
        1 => (0..s_target).map(|j| v[j * stride]).collect(),
        _ => {
            let mut out = Vec::with_capacity(s_target * s_target);
            for i in 0..s_target {
                for j in 0..s_target {
                    out.push(v[(i * stride) * s + j * stride]);
                }
            }
            out
        }
    };
    GridField::new(s_target, field.dim(), values)
}

/// Green's function of -u'' on [0,1] with zero boundary:
/// G(x,y) = (x + y - |y - x|)/2 - x y.
pub fn green_1d(x: f64, y: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
        return Err(Error::Domain(format!("green_1d arguments ({x}, {y}) outside [0,1]")));
    }
    Ok(0.5 * (x + y - (y - x).abs()) - x * y)
}

/// u(x_i) = integral of G(x_i, y) f(y) dy by the trapezoidal rule.
pub fn solve_poisson_1d_green(f: &GridField) -> Result<GridField> {
    if f.dim() != 1 {
        return Err(Error::Domain("1D Green's solve wants a 1D forcing".into()));
    }
    let s = f.resolution();
    let h = f.h();
    let fv = f.values();
    let mut u = vec![0.0; s];
    for i in 0..s {
        let x = i as f64 * h;
        let mut acc = 0.0;
        for j in 0..s {
            let w = if j == 0 || j == s - 1 { 0.5 * h } else { h };
            acc += w * green_1d(x, j as f64 * h)? * fv[j];
        }
        u[i] = acc;
    }
    GridField::new(s, 1, u)
}

/// Green's function of the Laplacian on the unit disk in polar
/// coordinates; zero on the boundary, symmetric in its two points.
pub fn green_disk(rho: f64, theta: f64, rho_t: f64, theta_t: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&rho) || !(0.0..=1.0).contains(&rho_t) {
        return Err(Error::Domain(format!("green_disk radii ({rho}, {rho_t}) outside [0,1]")));
    }
    let cos_d = (theta_t - theta).cos();
    let num = rho_t * rho_t + rho * rho - 2.0 * rho * rho_t * cos_d;
    let den = rho_t * rho_t * rho * rho + 1.0 - 2.0 * rho * rho_t * cos_d;
    if num <= 0.0 {
        return Err(Error::Singularity(format!(
            "green_disk at coincident points (rho={rho}, theta={theta})"
        )));
    }
    Ok((num / den).ln() / (4.0 * std::f64::consts::PI))
}
