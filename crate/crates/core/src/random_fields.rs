//! Gaussian random fields on [0,1]^d via truncated Karhunen-Loeve
//! expansions, plus the derived coefficient transforms: thresholding to a
//! two-phase medium, Gaussian smoothing, and finite-difference gradients.
//!
//! Reproducibility rule: a dataset seed selects the generator, and each
//! sample index selects an independent child stream of that generator, so
//! sample `i` is the same bytes no matter how many samples precede it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::kernels;
use crate::error::{Error, Result};

/// Scalar field sampled on a uniform grid over [0,1]^d.
///
/// Values are row-major; in 2D, flat index `i*s + j` is the point
/// `(i*h, j*h)` with spacing `h = 1/(s-1)`, first coordinate along rows.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    resolution: usize,
    dim: usize,
    values: Vec<f64>,
}

impl GridField {
    pub fn new(resolution: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::Resolution(format!("resolution {resolution} < 2")));
        }
        if !(dim == 1 || dim == 2) {
            return Err(Error::Domain(format!("dimension {dim} not supported")));
        }
        let expect = resolution.pow(dim as u32);
        if values.len() != expect {
            return Err(Error::ShapeMismatch {
                op: "grid_field",
                detail: format!("{} values for s={resolution}, d={dim} (want {expect})", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite field value".into()));
        }
        Ok(GridField { resolution, dim, values })
    }

    pub fn constant(resolution: usize, dim: usize, v: f64) -> Self {
        let n = resolution.pow(dim as u32);
        GridField { resolution, dim, values: vec![v; n] }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Grid spacing 1/(s-1).
    pub fn h(&self) -> f64 {
        1.0 / (self.resolution - 1) as f64
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Coordinates of a flat node index (second coordinate 0 in 1D).
    pub fn point(&self, flat: usize) -> (f64, f64) {
        let h = self.h();
        match self.dim {
            1 => (flat as f64 * h, 0.0),
            _ => {
                let i = flat / self.resolution;
                let j = flat % self.resolution;
                (i as f64 * h, j as f64 * h)
            }
        }
    }
}

/// Boundary condition of the covariance operator, which selects the KL
/// eigenbasis: cosines for Neumann, cosine/sine pairs for periodic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    Neumann,
    Periodic,
}

/// Spectrum of a Gaussian measure N(0, (-Delta + shift*I)^(-exponent)).
#[derive(Debug, Clone)]
pub struct GrfSpec {
    pub shift: f64,
    pub exponent: f64,
    pub boundary: Boundary,
    /// KL truncation per dimension.
    pub kmax: usize,
    pub seed: u64,
}

impl GrfSpec {
    /// The Darcy coefficient measure: N(0, (-Delta + 9I)^(-2)), Neumann.
    pub fn darcy_coefficient(kmax: usize, seed: u64) -> Self {
        GrfSpec { shift: 9.0, exponent: 2.0, boundary: Boundary::Neumann, kmax, seed }
    }

    /// The 1D forcing measure: N(0, (-Delta + I)^(-1)), periodic.
    pub fn periodic_forcing(kmax: usize, seed: u64) -> Self {
        GrfSpec { shift: 1.0, exponent: 1.0, boundary: Boundary::Periodic, kmax, seed }
    }

    fn validate(&self, s: usize) -> Result<()> {
        if !(self.shift > 0.0) || !(self.exponent > 0.0) {
            return Err(Error::Contract(format!(
                "GRF spectrum needs shift > 0 and exponent > 0, got {} and {}",
                self.shift, self.exponent
            )));
        }
        if self.kmax == 0 {
            return Err(Error::Contract("GRF truncation kmax must be >= 1".into()));
        }
        if self.kmax > s {
            return Err(Error::Aliasing { kmax: self.kmax, resolution: s });
        }
        Ok(())
    }

    /// Child generator for one sample: seed picks the key, index the stream.
    fn rng(&self, sample_index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(sample_index);
        rng
    }
}

/// One-dimensional eigenbasis evaluated on the grid: `matrix` is
/// [n_modes, s] row-major, `freq_sq` the squared integer frequency of
/// each mode.
struct ModeBasis {
    matrix: Vec<f64>,
    freq_sq: Vec<f64>,
    n_modes: usize,
}

fn mode_basis(boundary: Boundary, kmax: usize, s: usize) -> ModeBasis {
    let h = 1.0 / (s - 1) as f64;
    match boundary {
        Boundary::Neumann => {
            let n_modes = kmax + 1;
            let mut matrix = vec![0.0; n_modes * s];
            let mut freq_sq = vec![0.0; n_modes];
            for k in 0..=kmax {
                let c = if k == 0 { 1.0 } else { std::f64::consts::SQRT_2 };
                for j in 0..s {
                    matrix[k * s + j] = c * (std::f64::consts::PI * k as f64 * j as f64 * h).cos();
                }
                freq_sq[k] = (k * k) as f64;
            }
            ModeBasis { matrix, freq_sq, n_modes }
        }
        Boundary::Periodic => {
            let n_modes = 2 * kmax + 1;
            let mut matrix = vec![0.0; n_modes * s];
            let mut freq_sq = vec![0.0; n_modes];
            for j in 0..s {
                matrix[j] = 1.0;
            }
            for k in 1..=kmax {
                let (cos_row, sin_row) = (2 * k - 1, 2 * k);
                for j in 0..s {
                    let arg = 2.0 * std::f64::consts::PI * k as f64 * j as f64 * h;
                    matrix[cos_row * s + j] = std::f64::consts::SQRT_2 * arg.cos();
                    matrix[sin_row * s + j] = std::f64::consts::SQRT_2 * arg.sin();
                }
                freq_sq[cos_row] = (k * k) as f64;
                freq_sq[sin_row] = (k * k) as f64;
            }
            ModeBasis { matrix, freq_sq, n_modes }
        }
    }
}

/// Laplacian symbol scale: pi^2 per squared frequency for Neumann modes,
/// (2 pi)^2 for periodic ones.
fn frequency_scale(boundary: Boundary) -> f64 {
    match boundary {
        Boundary::Neumann => std::f64::consts::PI * std::f64::consts::PI,
        Boundary::Periodic => 4.0 * std::f64::consts::PI * std::f64::consts::PI,
    }
}

fn eigenvalue(spec: &GrfSpec, freq_sq_total: f64) -> f64 {
    (frequency_scale(spec.boundary) * freq_sq_total + spec.shift).powf(-spec.exponent)
}

/// Evaluate a 1D KL sum given per-mode coefficients.
fn kl_eval_1d(basis: &ModeBasis, coefs: &[f64], s: usize) -> Vec<f64> {
    let mut out = vec![0.0; s];
    kernels::gemm(1, basis.n_modes, s, coefs, false, &basis.matrix, false, 0.0, &mut out);
    out
}

/// Evaluate a 2D KL sum: out = M^T . coefs . M with `coefs` [n, n].
fn kl_eval_2d(basis: &ModeBasis, coefs: &[f64], s: usize) -> Vec<f64> {
    let n = basis.n_modes;
    let mut tmp = vec![0.0; n * s];
    kernels::gemm(n, n, s, coefs, false, &basis.matrix, false, 0.0, &mut tmp);
    let mut out = vec![0.0; s * s];
    kernels::gemm(s, n, s, &basis.matrix, true, &tmp, false, 0.0, &mut out);
    out
}

/// Draw one Gaussian field a0 = sum_k xi_k sqrt(lambda_k) phi_k on an
/// s^d grid. `sample_index` selects the child RNG stream.
pub fn sample_grf(spec: &GrfSpec, s: usize, d: usize, sample_index: u64) -> Result<GridField> {
    spec.validate(s)?;
    if !(d == 1 || d == 2) {
        return Err(Error::Domain(format!("dimension {d} not supported")));
    }
    if s < 2 {
        return Err(Error::Resolution(format!("resolution {s} < 2")));
    }
    let basis = mode_basis(spec.boundary, spec.kmax, s);
    let mut rng = spec.rng(sample_index);
    let normal = StandardNormal;
    let values = match d {
        1 => {
            let coefs: Vec<f64> = basis
                .freq_sq
                .iter()
                .map(|&f| {
                    let xi: f64 = normal.sample(&mut rng);
                    xi * eigenvalue(spec, f).sqrt()
                })
                .collect();
            kl_eval_1d(&basis, &coefs, s)
        }
        _ => {
            let n = basis.n_modes;
            let mut coefs = vec![0.0; n * n];
            for m1 in 0..n {
                for m2 in 0..n {
                    let xi: f64 = normal.sample(&mut rng);
                    let lam = eigenvalue(spec, basis.freq_sq[m1] + basis.freq_sq[m2]);
                    coefs[m1 * n + m2] = xi * lam.sqrt();
                }
            }
            kl_eval_2d(&basis, &coefs, s)
        }
    };
    GridField::new(s, d, values)
}

/// Two-phase thresholding: nonnegative values map to 12, negative to 3.
pub fn threshold_psi(field: &GridField) -> GridField {
    let values = field.values.iter().map(|&v| if v >= 0.0 { 12.0 } else { 3.0 }).collect();
    GridField { resolution: field.resolution, dim: field.dim, values }
}

/// Draw one periodic 1D forcing sample from N(0, (-Delta + I)^(-1)).
pub fn sample_forcing_1d(spec: &GrfSpec, s: usize, sample_index: u64) -> Result<GridField> {
    if spec.boundary != Boundary::Periodic {
        return Err(Error::Contract("1D forcing wants a periodic GRF spec".into()));
    }
    sample_grf(spec, s, 1, sample_index)
}

/// Gaussian smoothing kernel: variance in squared grid-index units.
const SMOOTH_VARIANCE: f64 = 5.0;

fn smooth_kernel() -> Vec<f64> {
    let sigma = SMOOTH_VARIANCE.sqrt();
    let radius = (3.0 * sigma).ceil() as i64;
    let mut w: Vec<f64> = (-radius..=radius)
        .map(|t| (-((t * t) as f64) / (2.0 * SMOOTH_VARIANCE)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Mirror an out-of-range index back into [0, s), reflecting about the
/// boundary samples (the even extension a[-i] = a[i]).
fn mirror(mut p: i64, s: i64) -> usize {
    loop {
        if p < 0 {
            p = -p;
        } else if p >= s {
            p = 2 * (s - 1) - p;
        } else {
            return p as usize;
        }
    }
}

/// Convolve with a normalized isotropic Gaussian of variance 5 pixels^2,
/// truncated at three standard deviations, reflecting at the boundary.
pub fn gaussian_smooth(field: &GridField) -> Result<GridField> {
    if field.dim != 2 {
        return Err(Error::Domain("smoothing is defined for 2D fields".into()));
    }
    let s = field.resolution;
    let w = smooth_kernel();
    let radius = (w.len() / 2) as i64;
    let si = s as i64;

    // Pass 1: along rows (second coordinate), pass 2: along columns.
    let mut pass1 = vec![0.0; s * s];
    for i in 0..s {
        let row = &field.values[i * s..(i + 1) * s];
        for j in 0..s {
            let mut acc = 0.0;
            for (t, &wt) in w.iter().enumerate() {
                let p = mirror(j as i64 + t as i64 - radius, si);
                acc += wt * row[p];
            }
            pass1[i * s + j] = acc;
        }
    }
    let mut out = vec![0.0; s * s];
    for j in 0..s {
        for i in 0..s {
            let mut acc = 0.0;
            for (t, &wt) in w.iter().enumerate() {
                let p = mirror(i as i64 + t as i64 - radius, si);
                acc += wt * pass1[p * s + j];
            }
            out[i * s + j] = acc;
        }
    }
    GridField::new(s, 2, out)
}

/// Finite-difference gradient: central in the interior, one-sided at the
/// boundary. Returns the derivative along each coordinate.
pub fn gradient_field(field: &GridField) -> Result<(GridField, GridField)> {
    if field.dim != 2 {
        return Err(Error::Domain("gradient is defined for 2D fields".into()));
    }
    let s = field.resolution;
    if s < 3 {
        return Err(Error::Resolution(format!("gradient needs s >= 3, got {s}")));
    }
    let h = field.h();
    let v = &field.values;
    let mut d1 = vec![0.0; s * s];
    let mut d2 = vec![0.0; s * s];
    for i in 0..s {
        for j in 0..s {
            d1[i * s + j] = if i == 0 {
                (v[s + j] - v[j]) / h
            } else if i == s - 1 {
                (v[i * s + j] - v[(i - 1) * s + j]) / h
            } else {
                (v[(i + 1) * s + j] - v[(i - 1) * s + j]) / (2.0 * h)
            };
            d2[i * s + j] = if j == 0 {
                (v[i * s + 1] - v[i * s]) / h
            } else if j == s - 1 {
                (v[i * s + j] - v[i * s + j - 1]) / h
            } else {
                (v[i * s + j + 1] - v[i * s + j - 1]) / (2.0 * h)
            };
        }
    }
    Ok((GridField::new(s, 2, d1)?, GridField::new(s, 2, d2)?))
}
