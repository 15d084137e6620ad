//! Comparison methods for the Darcy benchmark: a pointwise feedforward
//! network, PCA encode/decode with a latent-space network, and the
//! classical reduced basis method with a Galerkin solve.

use nalgebra::{DMatrix, DVector};
use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{backward, kernels, Tape, Tensor};
use crate::error::{Error, Result};
use crate::random_fields::GridField;
use crate::solvers::{assemble_darcy, grid_to_interior, interior_to_grid};
use crate::training::{Adam, DarcyPair, NORM_STD_FLOOR};

/// A plain fully connected network: ReLU between layers, linear last.
#[derive(Debug, Clone)]
pub struct Mlp {
    widths: Vec<usize>,
    /// Per layer: weight [out, in] row-major and bias [out].
    layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Mlp {
    /// Uniform [-1/sqrt(fan_in), +1/sqrt(fan_in)] weights, zero biases,
    /// deterministic in the seed.
    pub fn init(widths: &[usize], seed: u64) -> Result<Mlp> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Contract(format!("bad MLP widths {widths:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for pair in widths.windows(2) {
            let (w_in, w_out) = (pair[0], pair[1]);
            let bound = 1.0 / (w_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            let w: Vec<f64> = (0..w_out * w_in).map(|_| dist.sample(&mut rng)).collect();
            layers.push((w, vec![0.0; w_out]));
        }
        Ok(Mlp { widths: widths.to_vec(), layers })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Forward pass on `n_rows` stacked feature rows, without a tape.
    pub fn forward(&self, features: &[f64], n_rows: usize) -> Result<Vec<f64>> {
        if features.len() != n_rows * self.widths[0] {
            return Err(Error::ShapeMismatch {
                op: "Mlp::forward",
                detail: format!("{} values for {n_rows} rows of width {}", features.len(), self.widths[0]),
            });
        }
        let mut h = features.to_vec();
        let last = self.layers.len() - 1;
        let mut width = self.widths[0];
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let out_w = self.widths[i + 1];
            let mut next = vec![0.0; n_rows * out_w];
            kernels::linear_forward(&h, w, b, n_rows, width, out_w, &mut next);
            if i != last {
                kernels::relu_inplace(&mut next);
            }
            h = next;
            width = out_w;
        }
        Ok(h)
    }

    fn group_sizes(&self) -> Vec<usize> {
        self.layers.iter().flat_map(|(w, b)| [w.len(), b.len()]).collect()
    }

    /// Optimizer matching this network's parameter groups.
    pub fn optimizer(&self, lr: f64) -> Adam {
        Adam::for_sizes(&self.group_sizes(), lr, 0.9, 0.999, 1e-8, 0)
    }

    /// One Adam step on a batch; returns the MSE, without stepping when
    /// it is non-finite so the caller can report the divergence.
    pub fn train_step(
        &mut self,
        optimizer: &mut Adam,
        features: &[f64],
        n_rows: usize,
        targets: &[f64],
    ) -> Result<f64> {
        let out_w = *self.widths.last().unwrap();
        if targets.len() != n_rows * out_w {
            return Err(Error::ShapeMismatch {
                op: "Mlp::train_step",
                detail: format!("{} targets for {n_rows} rows of width {out_w}", targets.len()),
            });
        }
        let mut tape = Tape::new();
        let staged: Vec<(Tensor, Tensor)> = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, (w, b))| {
                let w = tape.leaf(vec![self.widths[i + 1], self.widths[i]], w.clone(), true)?;
                let b = tape.leaf(vec![self.widths[i + 1]], b.clone(), true)?;
                Ok((w, b))
            })
            .collect::<Result<_>>()?;
        let mut h = tape.constant(vec![n_rows, self.widths[0]], features.to_vec())?;
        let last = staged.len() - 1;
        for (i, (w, b)) in staged.iter().enumerate() {
            h = tape.linear(&h, w, Some(b))?;
            if i != last {
                h = tape.relu(&h)?;
            }
        }
        let t = tape.constant(vec![n_rows, out_w], targets.to_vec())?;
        let loss = tape.mse_loss(&h, &t)?;
        let value = loss.values()[0];
        if !value.is_finite() {
            return Ok(value);
        }
        let grads = backward(&loss, &tape)?;
        let by_group: Vec<Vec<f64>> = staged
            .iter()
            .flat_map(|(w, b)| [w, b])
            .map(|t| grads.wrt(t).expect("leaves carry gradients").to_vec())
            .collect();
        let mut groups: Vec<&mut Vec<f64>> =
            self.layers.iter_mut().flat_map(|(w, b)| [w, b]).collect();
        optimizer.step_groups(&mut groups, &by_group)?;
        Ok(value)
    }
}

fn scalar_stats<'a>(values: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    let mut count = 0.0;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for v in values {
        count += 1.0;
        sum += v;
        sum_sq += v * v;
    }
    let mean = sum / count;
    let var = (sum_sq / count - mean * mean).max(0.0);
    (mean, var.sqrt().max(NORM_STD_FLOOR))
}

/// Relative L2 distance, or None for a zero-norm truth.
fn relative_l2(pred: &[f64], truth: &[f64]) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        let d = p - t;
        num += d * d;
        den += t * t;
    }
    if den == 0.0 {
        None
    } else {
        Some((num / den).sqrt())
    }
}

/// Mean relative L2 over pairs with the zero-norm exclusion convention.
fn mean_relative_l2(scores: impl Iterator<Item = Option<f64>>) -> Result<f64> {
    let mut total = 0.0;
    let mut counted = 0usize;
    for (i, s) in scores.enumerate() {
        match s {
            Some(v) => {
                total += v;
                counted += 1;
            }
            None => eprintln!("warning: test pair {i} has a zero-norm target; excluded from the mean"),
        }
    }
    if counted == 0 {
        return Err(Error::Contract("every test pair had a zero-norm target".into()));
    }
    Ok(total / counted as f64)
}

fn check_same_grid(pairs: &[DarcyPair], op: &'static str) -> Result<usize> {
    let first = pairs.first().ok_or_else(|| Error::Contract(format!("{op} needs at least one pair")))?;
    let s = first.a.resolution();
    for p in pairs {
        if p.a.resolution() != s || p.u.resolution() != s || p.a.dim() != 2 {
            return Err(Error::ShapeMismatch { op, detail: "pairs must share one 2D grid".into() });
        }
    }
    Ok(s)
}

/// The pointwise baseline: one network mapping (x, a(x)) to u(x),
/// applied independently at every node. The map never sees the mesh, so
/// its predictions at coinciding points agree across resolutions.
#[derive(Debug, Clone)]
pub struct PointwiseNn {
    pub mlp: Mlp,
    a_mean: f64,
    a_std: f64,
    u_mean: f64,
    u_std: f64,
}

impl PointwiseNn {
    /// Predictions for raw (x1, x2, a) feature rows, denormalized.
    pub fn predict_rows(&self, rows: &[f64]) -> Result<Vec<f64>> {
        if rows.len() % 3 != 0 {
            return Err(Error::ShapeMismatch {
                op: "PointwiseNn::predict_rows",
                detail: format!("{} values are not (x1, x2, a) rows", rows.len()),
            });
        }
        let n = rows.len() / 3;
        let mut feats = rows.to_vec();
        for row in feats.chunks_exact_mut(3) {
            row[2] = (row[2] - self.a_mean) / self.a_std;
        }
        let mut out = self.mlp.forward(&feats, n)?;
        for o in &mut out {
            *o = *o * self.u_std + self.u_mean;
        }
        Ok(out)
    }

    /// Predictions at every node of a coefficient grid.
    pub fn predict_field(&self, a: &GridField) -> Result<Vec<f64>> {
        if a.dim() != 2 {
            return Err(Error::Contract("pointwise baseline is built for 2D grids".into()));
        }
        let mut rows = Vec::with_capacity(a.len() * 3);
        for (flat, v) in a.values().iter().enumerate() {
            let (x1, x2) = a.point(flat);
            rows.extend_from_slice(&[x1, x2, *v]);
        }
        self.predict_rows(&rows)
    }
}

/// Fit the pointwise network with Adam/MSE on normalized data, one
/// training pair per step in a seeded shuffled order.
pub fn train_pointwise_nn(
    train: &[DarcyPair],
    hidden: &[usize],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<PointwiseNn> {
    check_same_grid(train, "train_pointwise_nn")?;
    let (a_mean, a_std) = scalar_stats(train.iter().flat_map(|p| p.a.values().iter()));
    let (u_mean, u_std) = scalar_stats(train.iter().flat_map(|p| p.u.values().iter()));

    let mut batches = Vec::with_capacity(train.len());
    for p in train {
        let k = p.a.len();
        let mut feats = Vec::with_capacity(k * 3);
        for (flat, v) in p.a.values().iter().enumerate() {
            let (x1, x2) = p.a.point(flat);
            feats.extend_from_slice(&[x1, x2, (v - a_mean) / a_std]);
        }
        let targets: Vec<f64> = p.u.values().iter().map(|u| (u - u_mean) / u_std).collect();
        batches.push((feats, targets, k));
    }

    let mut widths = vec![3];
    widths.extend_from_slice(hidden);
    widths.push(1);
    let mut mlp = Mlp::init(&widths, seed)?;
    let mut optimizer = mlp.optimizer(lr);
    let mut order: Vec<usize> = (0..batches.len()).collect();
    for epoch in 0..epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        for &bi in &order {
            let (feats, targets, k) = &batches[bi];
            let value = mlp.train_step(&mut optimizer, feats, *k, targets)?;
            if !value.is_finite() {
                return Err(Error::Divergence { epoch });
            }
        }
    }
    Ok(PointwiseNn { mlp, a_mean, a_std, u_mean, u_std })
}

/// Mean relative L2 of the pointwise model over test pairs.
pub fn evaluate_pointwise_nn(model: &PointwiseNn, test: &[DarcyPair]) -> Result<f64> {
    check_same_grid(test, "evaluate_pointwise_nn")?;
    let scores = test
        .iter()
        .map(|p| Ok(relative_l2(&model.predict_field(&p.a)?, p.u.values())))
        .collect::<Result<Vec<_>>>()?;
    mean_relative_l2(scores.into_iter())
}

/// Train and evaluate the pointwise baseline.
pub fn run_pointwise_nn(
    train: &[DarcyPair],
    test: &[DarcyPair],
    hidden: &[usize],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<f64> {
    let model = train_pointwise_nn(train, hidden, epochs, lr, seed)?;
    evaluate_pointwise_nn(&model, test)
}

/// Principal components of a training set of fields, mesh-bound to the
/// grid they were computed on.
#[derive(Debug, Clone)]
pub struct PcaBasis {
    resolution: usize,
    dim: usize,
    mean: Vec<f64>,
    /// rank x K row-major orthonormal rows.
    components: Vec<f64>,
    singular: Vec<f64>,
}

impl PcaBasis {
    /// Retained directions; at most the requested rank, fewer when the
    /// data spectrum is numerically null beyond them.
    pub fn rank(&self) -> usize {
        self.singular.len()
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &[f64] {
        &self.components
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular
    }

    /// Coefficients of a field in the basis.
    pub fn encode(&self, field: &GridField) -> Result<Vec<f64>> {
        if field.resolution() != self.resolution || field.dim() != self.dim {
            return Err(Error::Resolution(format!(
                "basis is bound to its {}-point training mesh",
                self.mean.len()
            )));
        }
        let k = self.mean.len();
        let mut coeffs = Vec::with_capacity(self.rank());
        for comp in self.components.chunks_exact(k) {
            let c: f64 = field
                .values()
                .iter()
                .zip(&self.mean)
                .zip(comp)
                .map(|((v, m), w)| (v - m) * w)
                .sum();
            coeffs.push(c);
        }
        Ok(coeffs)
    }

    /// Field reconstructed from coefficients.
    pub fn decode(&self, coeffs: &[f64]) -> Result<GridField> {
        if coeffs.len() != self.rank() {
            return Err(Error::ShapeMismatch {
                op: "PcaBasis::decode",
                detail: format!("{} coefficients for rank {}", coeffs.len(), self.rank()),
            });
        }
        let k = self.mean.len();
        let mut out = self.mean.clone();
        for (c, comp) in coeffs.iter().zip(self.components.chunks_exact(k)) {
            for (o, w) in out.iter_mut().zip(comp) {
                *o += c * w;
            }
        }
        GridField::new(self.resolution, self.dim, out)
    }
}

/// Orthonormal row basis for the span of `rows` from the N x N Gram
/// matrix (N samples, K unknowns, N << K); keeps at most `rank`
/// directions, dropping the numerically null tail of the spectrum.
fn gram_span(rows: &[Vec<f64>], rank: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len();
    let k = rows[0].len();
    let mut gram = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            gram[(i, j)] = dot;
            gram[(j, i)] = dot;
        }
    }
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let floor = eig.eigenvalues[order[0]].max(0.0) * 1e-12;
    let mut components = Vec::new();
    let mut singular = Vec::new();
    for &idx in order.iter().take(rank) {
        let lambda = eig.eigenvalues[idx];
        if !(lambda > floor) {
            break;
        }
        let sigma = lambda.sqrt();
        let mut comp = vec![0.0; k];
        for (j, row) in rows.iter().enumerate() {
            let w = eig.eigenvectors[(j, idx)];
            for (c, v) in comp.iter_mut().zip(row) {
                *c += w * v;
            }
        }
        for c in &mut comp {
            *c /= sigma;
        }
        components.extend_from_slice(&comp);
        singular.push(sigma);
    }
    (components, singular)
}

/// Top-`rank` principal components of mean-centered fields.
pub fn compute_pca(fields: &[GridField], rank: usize) -> Result<PcaBasis> {
    let n = fields.len();
    if n == 0 {
        return Err(Error::Contract("PCA needs at least one field".into()));
    }
    if rank > n {
        return Err(Error::Contract(format!("rank {rank} exceeds the {n} training samples")));
    }
    let s = fields[0].resolution();
    let dim = fields[0].dim();
    let k = fields[0].len();
    if fields.iter().any(|f| f.resolution() != s || f.dim() != dim) {
        return Err(Error::ShapeMismatch { op: "compute_pca", detail: "fields on different grids".into() });
    }
    let mut mean = vec![0.0; k];
    for f in fields {
        for (m, v) in mean.iter_mut().zip(f.values()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = fields
        .iter()
        .map(|f| f.values().iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let (components, singular) = gram_span(&centered, rank);
    Ok(PcaBasis { resolution: s, dim, mean, components, singular })
}

/// Mean relative L2 distance between fields and their projections.
pub fn reconstruction_error(basis: &PcaBasis, fields: &[GridField]) -> Result<f64> {
    let scores = fields
        .iter()
        .map(|f| {
            let rec = basis.decode(&basis.encode(f)?)?;
            Ok(relative_l2(rec.values(), f.values()))
        })
        .collect::<Result<Vec<_>>>()?;
    mean_relative_l2(scores.into_iter())
}

/// PCA autoencoders on both ends with a latent network between the
/// coefficient spaces. Mesh-bound by design: encode and decode only work
/// on the training grid.
#[derive(Debug, Clone)]
pub struct PcaNn {
    pub basis_in: PcaBasis,
    pub basis_out: PcaBasis,
    pub mlp: Mlp,
    /// Standardization of the input coefficients (training moments).
    /// Output coefficients stay raw: their MSE is the squared field
    /// distance, which is the loss being minimized.
    input_mean: Vec<f64>,
    input_std: Vec<f64>,
}

impl PcaNn {
    fn standardize(&self, coeffs: &[f64]) -> Vec<f64> {
        coeffs
            .iter()
            .zip(&self.input_mean)
            .zip(&self.input_std)
            .map(|((c, m), s)| (c - m) / s)
            .collect()
    }

    pub fn predict(&self, a: &GridField) -> Result<GridField> {
        let x = self.standardize(&self.basis_in.encode(a)?);
        let y = self.mlp.forward(&x, 1)?;
        self.basis_out.decode(&y)
    }
}

/// Fit the latent network with Adam/MSE on coefficient pairs. Raw
/// coefficients are the natural units here: by orthonormality of the
/// basis, coefficient MSE equals the squared field-space distance.
pub fn train_pca_nn(
    train: &[DarcyPair],
    r_in: usize,
    r_out: usize,
    hidden: &[usize],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<PcaNn> {
    check_same_grid(train, "train_pca_nn")?;
    let a_fields: Vec<GridField> = train.iter().map(|p| p.a.clone()).collect();
    let u_fields: Vec<GridField> = train.iter().map(|p| p.u.clone()).collect();
    let basis_in = compute_pca(&a_fields, r_in)?;
    let basis_out = compute_pca(&u_fields, r_out)?;
    let raw_xs: Vec<Vec<f64>> = a_fields.iter().map(|f| basis_in.encode(f)).collect::<Result<_>>()?;
    let ys: Vec<Vec<f64>> = u_fields.iter().map(|f| basis_out.encode(f)).collect::<Result<_>>()?;
    let mut input_mean = vec![0.0; basis_in.rank()];
    let mut input_std = vec![0.0; basis_in.rank()];
    for i in 0..basis_in.rank() {
        let (m, s) = scalar_stats(raw_xs.iter().map(|x| &x[i]));
        input_mean[i] = m;
        input_std[i] = s;
    }
    let xs: Vec<Vec<f64>> = raw_xs
        .iter()
        .map(|x| {
            x.iter()
                .zip(&input_mean)
                .zip(&input_std)
                .map(|((c, m), s)| (c - m) / s)
                .collect()
        })
        .collect();

    let mut widths = vec![basis_in.rank()];
    widths.extend_from_slice(hidden);
    widths.push(basis_out.rank());
    let mut mlp = Mlp::init(&widths, seed)?;
    let mut optimizer = mlp.optimizer(lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        for &i in &order {
            let value = mlp.train_step(&mut optimizer, &xs[i], 1, &ys[i])?;
            if !value.is_finite() {
                return Err(Error::Divergence { epoch });
            }
        }
    }
    Ok(PcaNn { basis_in, basis_out, mlp, input_mean, input_std })
}

/// Train and evaluate the PCA+NN baseline; test pairs must live on the
/// training mesh.
#[allow(clippy::too_many_arguments)]
pub fn run_pca_nn(
    train: &[DarcyPair],
    test: &[DarcyPair],
    r_in: usize,
    r_out: usize,
    hidden: &[usize],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<f64> {
    let model = train_pca_nn(train, r_in, r_out, hidden, epochs, lr, seed)?;
    let scores = test
        .iter()
        .map(|p| Ok(relative_l2(model.predict(&p.a)?.values(), p.u.values())))
        .collect::<Result<Vec<_>>>()?;
    mean_relative_l2(scores.into_iter())
}

/// Galerkin surrogate on a reduced solution basis. Unlike the learned
/// baselines this is intrusive: solving needs the assembled operator.
#[derive(Debug, Clone)]
pub struct RbmModel {
    resolution: usize,
    /// rank x n_interior orthonormal rows.
    components: Vec<f64>,
}

impl RbmModel {
    pub fn rank(&self) -> usize {
        let n_int = (self.resolution - 2) * (self.resolution - 2);
        self.components.len() / n_int
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Solve the reduced Galerkin system (U A U^T) c = U f for one
    /// coefficient field and return the reconstruction U^T c on the full
    /// grid. A singular reduced system gets one diagonal regularization
    /// retry with a warning.
    pub fn solve(&self, a: &GridField, f: &GridField) -> Result<GridField> {
        if a.resolution() != self.resolution {
            return Err(Error::Resolution(format!(
                "basis is bound to resolution {}, got {}",
                self.resolution,
                a.resolution()
            )));
        }
        let system = assemble_darcy(a, f)?;
        let n_int = system.dimension();
        let r = self.rank();
        if r == 0 {
            return Err(Error::Contract("reduced basis is empty".into()));
        }
        // A U^T, one matvec per basis row.
        let mut au = vec![0.0; r * n_int];
        for (row, out) in self.components.chunks_exact(n_int).zip(au.chunks_exact_mut(n_int)) {
            system.matvec(row, out);
        }
        let mut reduced = DMatrix::zeros(r, r);
        for i in 0..r {
            let ui = &self.components[i * n_int..(i + 1) * n_int];
            for j in 0..r {
                let aj = &au[j * n_int..(j + 1) * n_int];
                reduced[(i, j)] = ui.iter().zip(aj).map(|(x, y)| x * y).sum::<f64>();
            }
        }
        let rhs = DVector::from_iterator(
            r,
            self.components
                .chunks_exact(n_int)
                .map(|ui| ui.iter().zip(system.rhs()).map(|(x, y)| x * y).sum()),
        );
        let c = match reduced.clone().lu().solve(&rhs) {
            Some(c) => c,
            None => {
                eprintln!("warning: singular reduced system; retrying with 1e-12 regularization");
                let mut reg = reduced;
                for i in 0..r {
                    reg[(i, i)] += 1e-12;
                }
                reg.lu()
                    .solve(&rhs)
                    .ok_or_else(|| Error::Singularity("reduced Galerkin system".into()))?
            }
        };
        let mut interior = vec![0.0; n_int];
        for (ci, row) in c.iter().zip(self.components.chunks_exact(n_int)) {
            for (o, v) in interior.iter_mut().zip(row) {
                *o += *ci * *v;
            }
        }
        interior_to_grid(self.resolution, &interior)
    }
}

/// Reduced basis from training solutions: the top-`rank` orthonormal
/// span of their interior restrictions. The span is taken uncentered —
/// the Galerkin reconstruction U^T c has no affine offset, so the basis
/// itself must cover the dominant common component of the solutions.
pub fn rbm_from_solutions(solutions: &[GridField], rank: usize) -> Result<RbmModel> {
    let n = solutions.len();
    if n == 0 {
        return Err(Error::Contract("reduced basis needs at least one solution".into()));
    }
    if rank > n {
        return Err(Error::Contract(format!("rank {rank} exceeds the {n} training solutions")));
    }
    let s = solutions[0].resolution();
    if s < 3 || solutions.iter().any(|f| f.resolution() != s || f.dim() != 2) {
        return Err(Error::ShapeMismatch {
            op: "rbm_from_solutions",
            detail: "solutions must share one 2D grid with interior nodes".into(),
        });
    }
    let rows: Vec<Vec<f64>> = solutions.iter().map(grid_to_interior).collect();
    let (components, _) = gram_span(&rows, rank);
    Ok(RbmModel { resolution: s, components })
}

/// The complete nodal basis: Galerkin on it reproduces the finite
/// difference solve exactly.
pub fn rbm_identity(s: usize) -> Result<RbmModel> {
    if s < 3 {
        return Err(Error::Contract("identity basis needs interior nodes".into()));
    }
    let n_int = (s - 2) * (s - 2);
    let mut components = vec![0.0; n_int * n_int];
    for i in 0..n_int {
        components[i * n_int + i] = 1.0;
    }
    Ok(RbmModel { resolution: s, components })
}

/// Train the reduced basis on the training solutions and report the
/// mean relative L2 error over test pairs, with unit forcing as in the
/// dataset.
pub fn run_rbm(train: &[DarcyPair], test: &[DarcyPair], rank: usize) -> Result<f64> {
    let s = check_same_grid(train, "run_rbm")?;
    check_same_grid(test, "run_rbm")?;
    let solutions: Vec<GridField> = train.iter().map(|p| p.u.clone()).collect();
    let model = rbm_from_solutions(&solutions, rank)?;
    let f = GridField::constant(s, 2, 1.0);
    let scores = test
        .iter()
        .map(|p| Ok(relative_l2(model.solve(&p.a, &f)?.values(), p.u.values())))
        .collect::<Result<Vec<_>>>()?;
    mean_relative_l2(scores.into_iter())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::solve_darcy;
    use crate::training::generate_darcy_dataset;

    fn toy_fields(n: usize, s: usize, seed: u64) -> Vec<GridField> {
        generate_darcy_dataset(n, s, seed).unwrap().into_iter().map(|p| p.a).collect()
    }

    /// Cyclic Jacobi eigensolver for small symmetric matrices — the
    /// independent oracle for the production Gram route.
    fn jacobi_eigen(mut m: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = m.len();
        let mut v = vec![vec![0.0; n]; n];
        for (i, row) in v.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        for _ in 0..100 {
            for p in 0..n {
                for q in (p + 1)..n {
                    if m[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = 0.5 * (m[q][q] - m[p][p]) / m[p][q];
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for i in 0..n {
                        let (mip, miq) = (m[i][p], m[i][q]);
                        m[i][p] = c * mip - s * miq;
                        m[i][q] = s * mip + c * miq;
                    }
                    for j in 0..n {
                        let (mpj, mqj) = (m[p][j], m[q][j]);
                        m[p][j] = c * mpj - s * mqj;
                        m[q][j] = s * mpj + c * mqj;
                    }
                    for i in 0..n {
                        let (vip, viq) = (v[i][p], v[i][q]);
                        v[i][p] = c * vip - s * viq;
                        v[i][q] = s * vip + c * viq;
                    }
                }
            }
        }
        let eigenvalues: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
        // Columns of v are the eigenvectors.
        (eigenvalues, v)
    }

    #[test]
    fn components_orthonormal_and_singulars_ordered() {
        let fields = toy_fields(6, 9, 3);
        let basis = compute_pca(&fields, 4).unwrap();
        assert_eq!(basis.rank(), 4);
        let k = fields[0].len();
        for i in 0..basis.rank() {
            for j in 0..basis.rank() {
                let dot: f64 = basis.components()[i * k..(i + 1) * k]
                    .iter()
                    .zip(&basis.components()[j * k..(j + 1) * k])
                    .map(|(a, b)| a * b)
                    .sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expected).abs() <= 1e-10, "component {i}.{j}: {dot}");
            }
        }
        for w in basis.singular_values().windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn two_orthogonal_fields_reconstruct_exactly() {
        let mut v1 = vec![0.0; 9];
        let mut v2 = vec![0.0; 9];
        v1[0] = 2.0;
        v2[4] = -3.0;
        let f1 = GridField::new(3, 2, v1).unwrap();
        let f2 = GridField::new(3, 2, v2).unwrap();
        let basis = compute_pca(&[f1.clone(), f2.clone()], 2).unwrap();
        // Centering makes the two-sample span one-dimensional; the mean
        // plus that direction still reconstructs both fields exactly.
        for f in [&f1, &f2] {
            let rec = basis.decode(&basis.encode(f).unwrap()).unwrap();
            for (r, v) in rec.values().iter().zip(f.values()) {
                assert!((r - v).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn reconstruction_error_nonincreasing_in_rank() {
        let fields = toy_fields(6, 9, 5);
        let mut last = f64::INFINITY;
        for rank in 0..=5 {
            let basis = compute_pca(&fields, rank).unwrap();
            let err = reconstruction_error(&basis, &fields).unwrap();
            assert!(err <= last + 1e-12, "rank {rank}: {err} > {last}");
            last = err;
        }
    }

    #[test]
    fn gram_route_matches_covariance_oracle() {
        let fields = toy_fields(5, 3, 7);
        let basis = compute_pca(&fields, 3).unwrap();
        let k = 9;
        // Oracle: eigenvectors of the K x K scatter matrix X^T X of the
        // centered data, computed by cyclic Jacobi.
        let mut mean = vec![0.0; k];
        for f in &fields {
            for (m, v) in mean.iter_mut().zip(f.values()) {
                *m += v / fields.len() as f64;
            }
        }
        let centered: Vec<Vec<f64>> = fields
            .iter()
            .map(|f| f.values().iter().zip(&mean).map(|(v, m)| v - m).collect())
            .collect();
        let mut scatter = vec![vec![0.0; k]; k];
        for row in &centered {
            for i in 0..k {
                for j in 0..k {
                    scatter[i][j] += row[i] * row[j];
                }
            }
        }
        let (eigenvalues, eigenvectors) = jacobi_eigen(scatter);
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| eigenvalues[b].partial_cmp(&eigenvalues[a]).unwrap());
        for (r, &idx) in order.iter().take(basis.rank()).enumerate() {
            let comp = &basis.components()[r * k..(r + 1) * k];
            let oracle: Vec<f64> = (0..k).map(|i| eigenvectors[i][idx]).collect();
            // Eigenvector signs are arbitrary; align before comparing.
            let align: f64 = comp.iter().zip(&oracle).map(|(a, b)| a * b).sum();
            let sign = align.signum();
            for (c, o) in comp.iter().zip(&oracle) {
                assert!((c - sign * o).abs() <= 1e-8, "component {r}");
            }
            // Singular value consistency with the oracle spectrum.
            assert!((basis.singular_values()[r].powi(2) - eigenvalues[idx]).abs() <= 1e-8);
        }
    }

    #[test]
    fn projection_is_idempotent() {
        let fields = toy_fields(6, 9, 9);
        let basis = compute_pca(&fields, 3).unwrap();
        let probe = &toy_fields(1, 9, 99)[0];
        let once = basis.encode(probe).unwrap();
        let again = basis.encode(&basis.decode(&once).unwrap()).unwrap();
        for (a, b) in once.iter().zip(&again) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn basis_is_mesh_bound() {
        let fields = toy_fields(3, 9, 11);
        let basis = compute_pca(&fields, 2).unwrap();
        let other = GridField::constant(5, 2, 1.0);
        assert!(matches!(basis.encode(&other), Err(Error::Resolution(_))));
    }

    #[test]
    fn pointwise_nn_fits_constant_target() {
        let mut pairs = generate_darcy_dataset(3, 9, 13).unwrap();
        for p in &mut pairs {
            p.u = GridField::constant(9, 2, 2.5);
        }
        let err = run_pointwise_nn(&pairs, &pairs, &[8], 40, 1e-2, 1).unwrap();
        assert!(err < 1e-4, "constant target not learned: {err}");
    }

    #[test]
    fn pointwise_nn_zero_epochs_is_finite() {
        let pairs = generate_darcy_dataset(2, 9, 15).unwrap();
        let err = run_pointwise_nn(&pairs, &pairs, &[8], 0, 1e-3, 2).unwrap();
        assert!(err.is_finite());
    }

    #[test]
    fn pointwise_predictions_match_at_coinciding_nodes() {
        let pairs = generate_darcy_dataset(2, 9, 17).unwrap();
        let model = train_pointwise_nn(&pairs, &[8, 8], 3, 1e-3, 3).unwrap();
        // Grid points of s=5 coincide with every other point of s=9,
        // and both grids have exactly representable coordinates.
        let coarse = crate::solvers::downsample(&pairs[0].a, 5).unwrap();
        let fine_pred = model.predict_field(&pairs[0].a).unwrap();
        let coarse_pred = model.predict_field(&coarse).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(coarse_pred[i * 5 + j], fine_pred[(2 * i) * 9 + 2 * j]);
            }
        }
    }

    #[test]
    fn pca_nn_learns_identity_task() {
        // u = a: with shared bases the latent map is the identity, so
        // the test error can only exceed the truncation floor by the
        // optimization gap.
        let fields = toy_fields(8, 9, 19);
        let pairs: Vec<DarcyPair> =
            fields.iter().map(|a| DarcyPair { a: a.clone(), u: a.clone() }).collect();
        let basis = compute_pca(&fields, 4).unwrap();
        let floor = reconstruction_error(&basis, &fields).unwrap();
        let err = run_pca_nn(&pairs, &pairs, 4, 4, &[16], 400, 1e-2, 4).unwrap();
        assert!(err <= floor + 0.01, "err {err} vs truncation floor {floor}");
    }

    #[test]
    fn pca_nn_is_mesh_bound() {
        let train = generate_darcy_dataset(3, 9, 21).unwrap();
        let test = generate_darcy_dataset(1, 5, 21).unwrap();
        let result = run_pca_nn(&train, &test, 2, 2, &[8], 1, 1e-3, 5);
        assert!(matches!(result, Err(Error::Resolution(_))));
    }

    #[test]
    fn pca_nn_memorizes_with_full_basis() {
        let train = generate_darcy_dataset(4, 9, 23).unwrap();
        let err = run_pca_nn(&train, &train, 4, 4, &[16], 300, 1e-2, 6).unwrap();
        assert!(err < 0.5, "memorization run should beat the zero map: {err}");
    }

    #[test]
    fn rbm_complete_basis_matches_fd_solve() {
        let pairs = generate_darcy_dataset(1, 9, 25).unwrap();
        let f = GridField::constant(9, 2, 1.0);
        let model = rbm_identity(9).unwrap();
        let reduced = model.solve(&pairs[0].a, &f).unwrap();
        let direct = solve_darcy(&pairs[0].a, &f).unwrap();
        let rel = relative_l2(reduced.values(), direct.values()).unwrap();
        assert!(rel <= 1e-6, "complete-basis Galerkin differs from FD: {rel}");
    }

    #[test]
    fn rbm_zero_forcing_zero_prediction() {
        let pairs = generate_darcy_dataset(3, 9, 27).unwrap();
        let solutions: Vec<GridField> = pairs.iter().map(|p| p.u.clone()).collect();
        let model = rbm_from_solutions(&solutions, 2).unwrap();
        let f0 = GridField::constant(9, 2, 0.0);
        let pred = model.solve(&pairs[0].a, &f0).unwrap();
        assert!(pred.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rbm_residual_is_orthogonal_to_basis() {
        let train = generate_darcy_dataset(4, 9, 29).unwrap();
        let test = generate_darcy_dataset(1, 9, 31).unwrap();
        let solutions: Vec<GridField> = train.iter().map(|p| p.u.clone()).collect();
        let model = rbm_from_solutions(&solutions, 3).unwrap();
        let f = GridField::constant(9, 2, 1.0);
        let pred = model.solve(&test[0].a, &f).unwrap();
        let system = assemble_darcy(&test[0].a, &f).unwrap();
        let interior = grid_to_interior(&pred);
        let mut residual = vec![0.0; system.dimension()];
        system.matvec(&interior, &mut residual);
        for (r, f) in residual.iter_mut().zip(system.rhs()) {
            *r -= f;
        }
        for row in model.components.chunks_exact(system.dimension()) {
            let proj: f64 = row.iter().zip(&residual).map(|(a, b)| a * b).sum();
            assert!(proj.abs() <= 1e-8, "residual leaks into the basis: {proj}");
        }
    }

    #[test]
    fn rbm_error_improves_with_rank() {
        let train = generate_darcy_dataset(8, 9, 33).unwrap();
        let test = generate_darcy_dataset(3, 9, 35).unwrap();
        let coarse = run_rbm(&train, &test, 1).unwrap();
        let fine = run_rbm(&train, &test, 6).unwrap();
        assert!(fine <= coarse + 1e-12, "rank 6 error {fine} vs rank 1 {coarse}");
    }

    #[test]
    fn rbm_rank_cannot_exceed_samples() {
        let train = generate_darcy_dataset(2, 9, 37).unwrap();
        let solutions: Vec<GridField> = train.iter().map(|p| p.u.clone()).collect();
        assert!(rbm_from_solutions(&solutions, 3).is_err());
    }

    #[test]
    fn mlp_forward_matches_taped_path() {
        let mut mlp = Mlp::init(&[3, 8, 2], 41).unwrap();
        let feats = vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6];
        let plain = mlp.forward(&feats, 2).unwrap();
        // A zero-learning-rate training step evaluates the same forward
        // pass on the tape; the loss it reports must match exactly.
        let mut optimizer = mlp.optimizer(0.0);
        let targets = vec![0.0; 4];
        let loss = mlp.train_step(&mut optimizer, &feats, 2, &targets).unwrap();
        let expected: f64 = plain.iter().map(|p| p * p).sum::<f64>() / 4.0;
        assert!((loss - expected).abs() <= 1e-15);
    }
}
