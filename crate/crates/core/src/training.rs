//! Normalization, Adam optimization, and the training/evaluation loops,
//! plus the experiment harnesses built from them: dataset generation,
//! the resolution-transfer table, configuration sweeps, and the 1D
//! Green's-function recovery run.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{backward, Tape};
use crate::error::{Error, Result};
use crate::graph::{
    build_radius_graph, full_grid_graph, nystrom_subsample, partition_for_evaluation,
    SampleFields, SamplingPlan, SpatialGraph,
};
use crate::model::{
    gkn_forward, init_params, kappa_matrices, predict, stage_params, Activation, GknParams,
    ModelConfig, KAPPA_GROUP_START,
};
use crate::random_fields::{
    gaussian_smooth, gradient_field, sample_forcing_1d, sample_grf, threshold_psi, GridField,
    GrfSpec,
};
use crate::solvers::{downsample, green_1d, solve_darcy, solve_poisson_1d_green};

/// Floor applied to channel standard deviations.
pub const NORM_STD_FLOOR: f64 = 1e-8;

/// One sample's Darcy fields at a single resolution: the raw
/// coefficient, its Gaussian-smoothed version, the smoothed gradient
/// components, and (when supervised) the solution.
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    pub a: GridField,
    pub a_smooth: GridField,
    pub grad1: GridField,
    pub grad2: GridField,
    pub u: Option<GridField>,
}

impl FeatureBundle {
    /// Smooth and differentiate the coefficient on the pair's own grid.
    pub fn from_pair(a: &GridField, u: Option<&GridField>) -> Result<FeatureBundle> {
        let a_smooth = gaussian_smooth(a)?;
        let (grad1, grad2) = gradient_field(&a_smooth)?;
        Ok(FeatureBundle { a: a.clone(), a_smooth, grad1, grad2, u: u.cloned() })
    }

    /// Restrict every field to a coarser compatible grid. Smoothing and
    /// differentiation stay on the grid the bundle was built on, so all
    /// restrictions sample the same underlying functions.
    pub fn restrict(&self, s: usize) -> Result<FeatureBundle> {
        Ok(FeatureBundle {
            a: downsample(&self.a, s)?,
            a_smooth: downsample(&self.a_smooth, s)?,
            grad1: downsample(&self.grad1, s)?,
            grad2: downsample(&self.grad2, s)?,
            u: self.u.as_ref().map(|u| downsample(u, s)).transpose()?,
        })
    }

    pub fn resolution(&self) -> usize {
        self.a.resolution()
    }

    /// Borrow as the graph module's field view.
    pub fn fields(&self) -> SampleFields<'_> {
        SampleFields {
            a: &self.a,
            a_smooth: &self.a_smooth,
            grad1: &self.grad1,
            grad2: &self.grad2,
            u: self.u.as_ref(),
        }
    }
}

/// Per-channel affine normalization with global scalar statistics.
///
/// Statistics are pooled over every node of every training pair, never
/// per grid location, so the same map applies at any resolution. The
/// coordinate channels keep the identity map. Graphs built from a
/// normalized bundle also carry the coefficient statistics into the
/// a-entries of their edge features.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    input_mean: Vec<f64>,
    input_std: Vec<f64>,
    target_mean: f64,
    target_std: f64,
}

impl NormStats {
    /// The identity map for `width` input channels.
    pub fn identity(width: usize) -> NormStats {
        NormStats {
            input_mean: vec![0.0; width],
            input_std: vec![1.0; width],
            target_mean: 0.0,
            target_std: 1.0,
        }
    }

    /// Assemble from explicit per-channel statistics; deviations are
    /// clamped to the floor.
    pub fn from_parts(
        input_mean: Vec<f64>,
        input_std: Vec<f64>,
        target_mean: f64,
        target_std: f64,
    ) -> Result<NormStats> {
        if input_mean.len() != input_std.len() {
            return Err(Error::ShapeMismatch {
                op: "NormStats::from_parts",
                detail: format!("{} means vs {} deviations", input_mean.len(), input_std.len()),
            });
        }
        Ok(NormStats {
            input_mean,
            input_std: input_std.into_iter().map(|s| s.max(NORM_STD_FLOOR)).collect(),
            target_mean,
            target_std: target_std.max(NORM_STD_FLOOR),
        })
    }

    pub fn input_mean(&self) -> &[f64] {
        &self.input_mean
    }

    pub fn input_std(&self) -> &[f64] {
        &self.input_std
    }

    pub fn target_mean(&self) -> f64 {
        self.target_mean
    }

    pub fn target_std(&self) -> f64 {
        self.target_std
    }

    pub fn normalize_target(&self, u: f64) -> f64 {
        (u - self.target_mean) / self.target_std
    }

    pub fn denormalize_target(&self, z: f64) -> f64 {
        z * self.target_std + self.target_mean
    }

    /// Normalized copy of a bundle. Input fields are always mapped; the
    /// solution only when `include_target` — training graphs fit the
    /// normalized solution, evaluation graphs keep the original data.
    pub fn normalize_bundle(&self, bundle: &FeatureBundle, include_target: bool) -> Result<FeatureBundle> {
        if self.input_mean.len() != 6 {
            return Err(Error::Contract(format!(
                "bundle normalization needs the 6-channel node layout, stats have {}",
                self.input_mean.len()
            )));
        }
        let u = match (&bundle.u, include_target) {
            (Some(u), true) => Some(affine_field(u, self.target_mean, self.target_std)?),
            (u, _) => u.clone(),
        };
        Ok(FeatureBundle {
            a: affine_field(&bundle.a, self.input_mean[2], self.input_std[2])?,
            a_smooth: affine_field(&bundle.a_smooth, self.input_mean[3], self.input_std[3])?,
            grad1: affine_field(&bundle.grad1, self.input_mean[4], self.input_std[4])?,
            grad2: affine_field(&bundle.grad2, self.input_mean[5], self.input_std[5])?,
            u,
        })
    }
}

fn affine_field(field: &GridField, mean: f64, std: f64) -> Result<GridField> {
    GridField::new(
        field.resolution(),
        field.dim(),
        field.values().iter().map(|v| (v - mean) / std).collect(),
    )
}

/// Streaming scalar moments over many slices.
#[derive(Debug, Default, Clone, Copy)]
struct Moments {
    count: f64,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push_all(&mut self, values: &[f64]) {
        self.count += values.len() as f64;
        for v in values {
            self.sum += v;
            self.sum_sq += v * v;
        }
    }

    fn mean(&self) -> f64 {
        self.sum / self.count
    }

    /// Population deviation, clamped to the floor.
    fn std(&self) -> f64 {
        let var = (self.sum_sq / self.count - self.mean() * self.mean()).max(0.0);
        var.sqrt().max(NORM_STD_FLOOR)
    }
}

/// Pool every node of every training bundle into one scalar mean and
/// deviation per channel. Bundles must be supervised.
pub fn compute_normalization(bundles: &[FeatureBundle]) -> Result<NormStats> {
    if bundles.is_empty() {
        return Err(Error::Contract("normalization needs at least one training pair".into()));
    }
    let mut channels = [Moments::default(); 5];
    for b in bundles {
        let u = b
            .u
            .as_ref()
            .ok_or_else(|| Error::Contract("normalization needs supervised bundles".into()))?;
        channels[0].push_all(b.a.values());
        channels[1].push_all(b.a_smooth.values());
        channels[2].push_all(b.grad1.values());
        channels[3].push_all(b.grad2.values());
        channels[4].push_all(u.values());
    }
    let mut input_mean = vec![0.0, 0.0];
    let mut input_std = vec![1.0, 1.0];
    for c in &channels[..4] {
        input_mean.push(c.mean());
        input_std.push(c.std());
    }
    Ok(NormStats {
        input_mean,
        input_std,
        target_mean: channels[4].mean(),
        target_std: channels[4].std(),
    })
}

/// Adam with bias correction. Parameter groups before `start_group` are
/// left frozen; passing [`KAPPA_GROUP_START`] trains the kernel MLP
/// alone, as the Green's-function recovery run requires.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    start_group: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// The standard settings: beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn new(params: &GknParams, lr: f64) -> Adam {
        Adam::with_options(params, lr, 0.9, 0.999, 1e-8, 0)
    }

    pub fn with_options(
        params: &GknParams,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        start_group: usize,
    ) -> Adam {
        let sizes: Vec<usize> = params.groups().iter().map(|g| g.len()).collect();
        Adam::for_sizes(&sizes, lr, beta1, beta2, eps, start_group)
    }

    /// State for an arbitrary list of parameter groups, for optimizing
    /// models other than the graph network.
    pub fn for_sizes(
        sizes: &[usize],
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        start_group: usize,
    ) -> Adam {
        let m: Vec<Vec<f64>> = sizes.iter().map(|&len| vec![0.0; len]).collect();
        let v = m.clone();
        Adam { lr, beta1, beta2, eps, step: 0, start_group, m, v }
    }

    /// One update from per-group gradients in [`GknParams::groups`] order.
    pub fn step(&mut self, params: &mut GknParams, grads: &[Vec<f64>]) -> Result<()> {
        self.step_groups(&mut params.groups_mut(), grads)
    }

    /// One update on explicit parameter groups.
    pub fn step_groups(&mut self, groups: &mut [&mut Vec<f64>], grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != groups.len() || groups.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                op: "Adam::step",
                detail: format!(
                    "{} gradient groups vs {} parameter groups vs {} state groups",
                    grads.len(),
                    groups.len(),
                    self.m.len()
                ),
            });
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for gi in self.start_group..groups.len() {
            let g = &grads[gi];
            let theta = &mut *groups[gi];
            if g.len() != theta.len() {
                return Err(Error::ShapeMismatch {
                    op: "Adam::step",
                    detail: format!("group {gi}: {} gradients vs {} parameters", g.len(), theta.len()),
                });
            }
            let (m, v) = (&mut self.m[gi], &mut self.v[gi]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                theta[i] -= self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// One optimizer step on one subgraph; returns the subgraph MSE. A
/// non-finite loss is returned without stepping so the caller can
/// report the divergence with its epoch.
fn train_step(params: &mut GknParams, graph: &SpatialGraph, optimizer: &mut Adam) -> Result<f64> {
    let targets = graph
        .node_targets()
        .ok_or_else(|| Error::Contract("training graph lacks targets".into()))?;
    let mut tape = Tape::new();
    let taped = stage_params(&mut tape, params)?;
    let pred = gkn_forward(&mut tape, &taped, &params.config, graph)?;
    let target = tape.constant(vec![graph.num_nodes(), 1], targets.to_vec())?;
    let loss = tape.mse_loss(&pred, &target)?;
    let value = loss.values()[0];
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = backward(&loss, &tape)?;
    let by_group: Vec<Vec<f64>> = taped
        .group_tensors()
        .iter()
        .map(|t| grads.wrt(t).expect("parameter leaves carry gradients").to_vec())
        .collect();
    optimizer.step(params, &by_group)?;
    Ok(value)
}

/// Batch-size-1 training: one Adam step per subgraph, visiting the
/// subgraphs in a freshly seeded shuffled order each epoch. Returns the
/// per-epoch mean loss.
pub fn run_epochs(
    params: &mut GknParams,
    optimizer: &mut Adam,
    graphs: &[SpatialGraph],
    epochs: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if graphs.is_empty() {
        return Err(Error::Contract("training needs at least one subgraph".into()));
    }
    let mut order: Vec<usize> = (0..graphs.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &gi in &order {
            let value = train_step(params, &graphs[gi], optimizer)?;
            if !value.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            total += value;
        }
        history.push(total / graphs.len() as f64);
    }
    Ok(history)
}

/// Mean relative L2 error over test pairs. Each pair is a group of
/// graphs jointly covering its evaluation nodes; targets must hold the
/// original (unnormalized) solution, and predictions are denormalized
/// before comparison. Pairs with a zero-norm target are excluded with a
/// warning on standard error.
pub fn evaluate_relative_l2(
    params: &GknParams,
    pair_graphs: &[Vec<SpatialGraph>],
    stats: &NormStats,
) -> Result<f64> {
    let mut total = 0.0;
    let mut counted = 0usize;
    for (pair, graphs) in pair_graphs.iter().enumerate() {
        let (num, den) = pair_error_terms(params, graphs, stats)?;
        if den == 0.0 {
            eprintln!("warning: test pair {pair} has a zero-norm target; excluded from the mean");
            continue;
        }
        total += (num / den).sqrt();
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::Contract("every test pair had a zero-norm target".into()));
    }
    Ok(total / counted as f64)
}

/// Squared error and squared target norm for one pair, summed over the
/// graphs that jointly cover its evaluation nodes.
fn pair_error_terms(
    params: &GknParams,
    graphs: &[SpatialGraph],
    stats: &NormStats,
) -> Result<(f64, f64)> {
    let mut num = 0.0;
    let mut den = 0.0;
    for graph in graphs {
        let targets = graph
            .node_targets()
            .ok_or_else(|| Error::Contract("evaluation graph lacks targets".into()))?;
        let pred = predict(params, graph)?;
        for (p, t) in pred.iter().zip(targets) {
            let diff = stats.denormalize_target(*p) - t;
            num += diff * diff;
            den += t * t;
        }
    }
    Ok((num, den))
}

/// One coefficient/solution pair on the generation grid.
#[derive(Debug, Clone)]
pub struct DarcyPair {
    pub a: GridField,
    pub u: GridField,
}

/// Spectral modes per axis used for dataset coefficients; the eigenvalue
/// decay (pi^2 |k|^2 + 9)^{-2} leaves the truncated tail below 0.5% of
/// the field variance.
pub const DARCY_KMAX: usize = 24;

/// Sample one two-phase coefficient and solve the Darcy problem with
/// unit forcing.
pub fn generate_darcy_pair(spec: &GrfSpec, s: usize, sample_index: u64) -> Result<DarcyPair> {
    let a = threshold_psi(&sample_grf(spec, s, 2, sample_index)?);
    let f = GridField::constant(s, 2, 1.0);
    let u = solve_darcy(&a, &f)?;
    Ok(DarcyPair { a, u })
}

/// The standard dataset: `count` independent pairs at resolution `s`.
pub fn generate_darcy_dataset(count: usize, s: usize, seed: u64) -> Result<Vec<DarcyPair>> {
    let spec = GrfSpec::darcy_coefficient(DARCY_KMAX.min(s - 1), seed);
    (0..count).map(|j| generate_darcy_pair(&spec, s, j as u64)).collect()
}

/// Experiment-level configuration: dataset split, resolutions, sampling
/// plan, and optimizer settings.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub s_train: usize,
    pub s_test: usize,
    pub plan: SamplingPlan,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Training at s = 16 with the standard optimizer settings.
    pub fn desk_default(seed: u64) -> TrainConfig {
        TrainConfig {
            n_train: 100,
            n_test: 40,
            s_train: 16,
            s_test: 16,
            plan: SamplingPlan {
                m: 200,
                l: 1,
                m_eval: 256,
                l_eval: 1,
                r: 0.10,
                r_eval: 0.10,
                seed,
            },
            epochs: 200,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Contract("training needs at least one epoch".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Contract(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.n_train == 0 {
            return Err(Error::Contract("training needs at least one pair".into()));
        }
        Ok(())
    }
}

/// A trained model with its normalization map and training record.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: GknParams,
    pub stats: NormStats,
    pub loss_history: Vec<f64>,
    /// Mean directed edge count over the training subgraphs.
    pub mean_train_edges: f64,
}

/// Restrict the training pairs to `config.s_train`, fit normalization,
/// draw the sampled subgraphs, and run the optimizer.
pub fn train(model_config: &ModelConfig, config: &TrainConfig, pairs: &[DarcyPair]) -> Result<TrainedModel> {
    config.validate()?;
    if pairs.len() < config.n_train {
        return Err(Error::Contract(format!(
            "dataset has {} pairs, config trains on {}",
            pairs.len(),
            config.n_train
        )));
    }
    let mut bundles = Vec::with_capacity(config.n_train);
    for p in &pairs[..config.n_train] {
        bundles.push(FeatureBundle::from_pair(&p.a, Some(&p.u))?.restrict(config.s_train)?);
    }
    let stats = compute_normalization(&bundles)?;
    let mut graphs = Vec::with_capacity(config.n_train * config.plan.l);
    for (j, b) in bundles.iter().enumerate() {
        let normalized = stats.normalize_bundle(b, true)?;
        graphs.extend(nystrom_subsample(&normalized.fields(), &config.plan, j as u64)?);
    }
    let mean_train_edges =
        graphs.iter().map(|g| g.num_edges() as f64).sum::<f64>() / graphs.len() as f64;
    let mut params = init_params(model_config)?;
    let mut optimizer =
        Adam::with_options(&params, config.lr, config.beta1, config.beta2, config.eps, 0);
    let loss_history = run_epochs(&mut params, &mut optimizer, &graphs, config.epochs, config.seed)?;
    Ok(TrainedModel { params, stats, loss_history, mean_train_edges })
}

/// Graphs covering one test pair's evaluation nodes at resolution `s`,
/// with normalized inputs and original targets. A grid that fits in one
/// evaluation block becomes a single full-grid graph; a larger grid is
/// split into disjoint blocks of `m_eval` nodes, each predicted
/// separately, so evaluation memory stays bounded in `s`.
pub fn evaluation_graphs(
    pair: &DarcyPair,
    s: usize,
    stats: &NormStats,
    plan: &SamplingPlan,
) -> Result<Vec<SpatialGraph>> {
    let bundle = FeatureBundle::from_pair(&pair.a, Some(&pair.u))?.restrict(s)?;
    let normalized = stats.normalize_bundle(&bundle, false)?;
    if s * s <= plan.m_eval {
        Ok(vec![full_grid_graph(&normalized.fields(), plan.r_eval)?])
    } else {
        partition_for_evaluation(&normalized.fields(), plan.m_eval, plan.r_eval, plan.seed)
    }
}

/// Evaluate a trained model on the test pairs at each listed resolution.
/// Graphs are built and dropped one test pair at a time.
pub fn evaluate_at_resolutions(
    trained: &TrainedModel,
    plan: &SamplingPlan,
    test: &[DarcyPair],
    s_eval: &[usize],
) -> Result<Vec<f64>> {
    let mut errors = Vec::with_capacity(s_eval.len());
    for &s in s_eval {
        let mut total = 0.0;
        let mut counted = 0usize;
        for (pair, p) in test.iter().enumerate() {
            let graphs = evaluation_graphs(p, s, &trained.stats, plan)?;
            let (num, den) = pair_error_terms(&trained.params, &graphs, &trained.stats)?;
            if den == 0.0 {
                eprintln!("warning: test pair {pair} has a zero-norm target; excluded from the mean");
                continue;
            }
            total += (num / den).sqrt();
            counted += 1;
        }
        if counted == 0 {
            return Err(Error::Contract("every test pair had a zero-norm target".into()));
        }
        errors.push(total / counted as f64);
    }
    Ok(errors)
}

/// One row of the resolution table.
#[derive(Debug, Clone)]
pub struct TransferReport {
    pub s_train: usize,
    pub s_eval: Vec<usize>,
    pub errors: Vec<f64>,
}

/// Train once at `config.s_train` and evaluate the same parameters on
/// rebuilt graphs at each resolution in `s_eval`, with the same radius.
pub fn resolution_transfer_experiment(
    model_config: &ModelConfig,
    config: &TrainConfig,
    s_eval: &[usize],
    pairs: &[DarcyPair],
) -> Result<(TrainedModel, TransferReport)> {
    if pairs.len() < config.n_train + config.n_test {
        return Err(Error::Contract(format!(
            "dataset has {} pairs, config needs {} + {}",
            pairs.len(),
            config.n_train,
            config.n_test
        )));
    }
    let trained = train(model_config, config, pairs)?;
    let test = &pairs[config.n_train..config.n_train + config.n_test];
    let errors = evaluate_at_resolutions(&trained, &config.plan, test, s_eval)?;
    let report = TransferReport { s_train: config.s_train, s_eval: s_eval.to_vec(), errors };
    Ok((trained, report))
}

/// One labelled train-and-evaluate run inside a sweep.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub label: String,
    pub model_config: ModelConfig,
    pub config: TrainConfig,
}

/// A sweep cell's outcome; failures are recorded, not propagated.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub label: String,
    pub error: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub mean_train_edges: Option<f64>,
    pub failure: Option<String>,
}

/// Train and evaluate every cell at its own test resolution; a failing
/// cell records its message and the sweep continues.
pub fn sweep_experiment(cells: &[SweepCell], pairs: &[DarcyPair]) -> Vec<SweepOutcome> {
    cells
        .iter()
        .map(|cell| {
            match resolution_transfer_experiment(
                &cell.model_config,
                &cell.config,
                &[cell.config.s_test],
                pairs,
            ) {
                Ok((trained, report)) => SweepOutcome {
                    label: cell.label.clone(),
                    error: Some(report.errors[0]),
                    final_train_loss: trained.loss_history.last().copied(),
                    mean_train_edges: Some(trained.mean_train_edges),
                    failure: None,
                },
                Err(e) => SweepOutcome {
                    label: cell.label.clone(),
                    error: None,
                    final_train_loss: None,
                    mean_train_edges: None,
                    failure: Some(e.to_string()),
                },
            }
        })
        .collect()
}

/// Configuration of the 1D Green's-function recovery run.
#[derive(Debug, Clone)]
pub struct Green1dConfig {
    /// Grid resolution for forcings and solutions.
    pub s: usize,
    /// Training forcings drawn from the periodic field.
    pub n_forcings: usize,
    /// Spectral modes per axis in the forcing field.
    pub kmax: usize,
    /// Hidden widths of the kernel MLP.
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Side of the square (x, y) grid on which the learned kernel is
    /// compared against the analytic Green's function.
    pub eval_side: usize,
}

impl Green1dConfig {
    pub fn default_run(seed: u64) -> Green1dConfig {
        Green1dConfig {
            s: 41,
            n_forcings: 2048,
            kmax: 20,
            hidden: vec![64, 64],
            epochs: 24,
            lr: 5e-4,
            seed,
            eval_side: 64,
        }
    }
}

/// Outcome of the recovery run: the trained model, the learned kernel
/// and analytic Green's function sampled on the evaluation grid, and
/// their relative L2 distance.
#[derive(Debug, Clone)]
pub struct Green1dReport {
    pub params: GknParams,
    pub loss_history: Vec<f64>,
    pub eval_side: usize,
    /// Row-major kappa(x_i, y_j) over the evaluation grid.
    pub kernel_values: Vec<f64>,
    /// Row-major G(x_i, y_j) over the evaluation grid.
    pub green_values: Vec<f64>,
    pub rel_l2: f64,
}

/// The interpretable special case: one linear message-passing step with
/// W = 0 and identity lift/projection, so the prediction is exactly the
/// neighborhood mean of kappa(x, y) f(y) and the kernel MLP alone is
/// trained. Forcings follow the periodic field N(0, (-Lap + I)^{-1})
/// on a complete graph over the interval; solutions come from the exact
/// Green's quadrature.
pub fn green1d_experiment(cfg: &Green1dConfig) -> Result<Green1dReport> {
    if cfg.s < 3 || cfg.eval_side < 2 {
        return Err(Error::Contract("Green recovery needs s >= 3 and eval_side >= 2".into()));
    }
    if cfg.n_forcings == 0 || cfg.epochs == 0 {
        return Err(Error::Contract("Green recovery needs forcings and epochs".into()));
    }
    let mut widths = vec![4];
    widths.extend_from_slice(&cfg.hidden);
    widths.push(1);
    let model_config = ModelConfig {
        n: 1,
        t_steps: 1,
        d: 1,
        input_width: 1,
        kappa_widths: widths,
        activation: Activation::Linear,
        seed: cfg.seed,
    };
    let mut params = init_params(&model_config)?;
    params.p_w = vec![1.0];
    params.p_b = vec![0.0];
    params.w = vec![0.0];
    params.q_w = vec![1.0];
    params.q_b = vec![0.0];

    let spec = GrfSpec::periodic_forcing(cfg.kmax, cfg.seed);
    let s = cfg.s;
    let h = 1.0 / (s - 1) as f64;
    let coords: Vec<f64> = (0..s).map(|i| i as f64 * h).collect();
    let ones = vec![1.0; s];
    let mut graphs = Vec::with_capacity(cfg.n_forcings);
    for j in 0..cfg.n_forcings {
        let f = sample_forcing_1d(&spec, s, j as u64)?;
        let u = solve_poisson_1d_green(&f)?;
        graphs.push(build_radius_graph(
            coords.clone(),
            1,
            &ones,
            f.values().to_vec(),
            Some(u.values().to_vec()),
            (0..s).collect(),
            // any radius beyond the interval diameter gives the complete
            // graph, the counting measure stand-in for Lebesgue measure
            2.0,
        )?);
    }

    let mut optimizer =
        Adam::with_options(&params, cfg.lr, 0.9, 0.999, 1e-8, KAPPA_GROUP_START);
    let loss_history = run_epochs(&mut params, &mut optimizer, &graphs, cfg.epochs, cfg.seed)?;

    let side = cfg.eval_side;
    let step = 1.0 / (side - 1) as f64;
    let mut feats = Vec::with_capacity(side * side * 4);
    let mut green_values = Vec::with_capacity(side * side);
    for i in 0..side {
        let x = i as f64 * step;
        for j in 0..side {
            let y = j as f64 * step;
            feats.extend_from_slice(&[x, y, 1.0, 1.0]);
            green_values.push(green_1d(x, y)?);
        }
    }
    let kernel_values = kappa_matrices(&params, &feats)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (k, g) in kernel_values.iter().zip(&green_values) {
        let d = k - g;
        num += d * d;
        den += g * g;
    }
    let rel_l2 = (num / den).sqrt();
    Ok(Green1dReport {
        params,
        loss_history,
        eval_side: side,
        kernel_values,
        green_values,
        rel_l2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::graph_from_grid_nodes;

    fn constant_bundle(s: usize, a: f64, u: f64) -> FeatureBundle {
        FeatureBundle {
            a: GridField::constant(s, 2, a),
            a_smooth: GridField::constant(s, 2, a),
            grad1: GridField::constant(s, 2, 0.0),
            grad2: GridField::constant(s, 2, 0.0),
            u: Some(GridField::constant(s, 2, u)),
        }
    }

    fn tiny_model(seed: u64) -> ModelConfig {
        ModelConfig {
            n: 4,
            t_steps: 2,
            d: 2,
            input_width: 6,
            kappa_widths: vec![6, 8, 16],
            activation: Activation::Relu,
            seed,
        }
    }

    /// Full-grid graph over a constant-field pair, with raw targets.
    fn constant_graph(s: usize, a: f64, u: f64, r: f64) -> SpatialGraph {
        let bundle = constant_bundle(s, a, u);
        full_grid_graph(&bundle.fields(), r).unwrap()
    }

    #[test]
    fn constant_channel_mean_and_clamped_std() {
        let stats = compute_normalization(&[constant_bundle(4, 7.0, 2.0)]).unwrap();
        assert_eq!(stats.input_mean()[2], 7.0);
        assert_eq!(stats.input_std()[2], NORM_STD_FLOOR);
        assert_eq!(stats.target_mean(), 2.0);
        assert_eq!(stats.target_std(), NORM_STD_FLOOR);
        // Coordinate channels keep the identity map.
        assert_eq!(stats.input_mean()[0], 0.0);
        assert_eq!(stats.input_std()[1], 1.0);
    }

    #[test]
    fn two_point_channel_moments() {
        // Channel values {3, 12} with equal mass: mean 7.5, std 4.5.
        let stats = compute_normalization(&[constant_bundle(4, 3.0, 3.0), constant_bundle(4, 12.0, 12.0)])
            .unwrap();
        assert!((stats.input_mean()[2] - 7.5).abs() < 1e-12);
        assert!((stats.input_std()[2] - 4.5).abs() < 1e-12);
        assert!((stats.target_mean() - 7.5).abs() < 1e-12);
        assert!((stats.target_std() - 4.5).abs() < 1e-12);
    }

    #[test]
    fn normalize_denormalize_round_trip() {
        let stats = NormStats::from_parts(
            vec![0.0, 0.0, 1.0, 2.0, -0.5, 0.25],
            vec![1.0, 1.0, 3.0, 0.5, 2.0, 4.0],
            0.7,
            1.9,
        )
        .unwrap();
        for u in [-3.0, 0.0, 0.7, 42.0] {
            let z = stats.normalize_target(u);
            assert!((stats.denormalize_target(z) - u).abs() <= 1e-12);
        }
    }

    #[test]
    fn same_affine_map_across_resolutions() {
        // The statistics are global scalars, so the same physical field
        // restricted to two grids is normalized by the same map.
        let pairs = generate_darcy_dataset(1, 13, 41).unwrap();
        let base = FeatureBundle::from_pair(&pairs[0].a, Some(&pairs[0].u)).unwrap();
        let fine = base.restrict(13).unwrap();
        let coarse = base.restrict(7).unwrap();
        let stats = compute_normalization(std::slice::from_ref(&fine)).unwrap();
        let nf = stats.normalize_bundle(&fine, true).unwrap();
        let nc = stats.normalize_bundle(&coarse, true).unwrap();
        // Node (i, j) of the coarse grid coincides with (2i, 2j).
        for i in 0..7 {
            for j in 0..7 {
                let cf = nc.a.values()[i * 7 + j];
                let ff = nf.a.values()[(2 * i) * 13 + 2 * j];
                assert_eq!(cf, ff);
                let cu = nc.u.as_ref().unwrap().values()[i * 7 + j];
                let fu = nf.u.as_ref().unwrap().values()[(2 * i) * 13 + 2 * j];
                assert_eq!(cu, fu);
            }
        }
    }

    #[test]
    fn adam_first_step_closed_form() {
        let config = tiny_model(3);
        let mut params = init_params(&config).unwrap();
        let before = params.to_flat();
        let grads: Vec<Vec<f64>> = params.groups().iter().map(|g| vec![1.0; g.len()]).collect();
        let mut adam = Adam::new(&params, 1e-4);
        adam.step(&mut params, &grads).unwrap();
        let expected = 1e-4 / (1.0 + 1e-8);
        for (b, a) in before.iter().zip(params.to_flat()) {
            assert!((b - a - expected).abs() < 1e-16);
        }
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let config = tiny_model(4);
        let mut params = init_params(&config).unwrap();
        let before = params.to_flat();
        let grads: Vec<Vec<f64>> = params.groups().iter().map(|g| vec![0.0; g.len()]).collect();
        let mut adam = Adam::new(&params, 1e-2);
        for _ in 0..3 {
            adam.step(&mut params, &grads).unwrap();
        }
        assert_eq!(before, params.to_flat());
    }

    #[test]
    fn adam_groups_update_independently() {
        let config = tiny_model(5);
        let mut params = init_params(&config).unwrap();
        let before = params.to_flat();
        // Gradient only in the first kappa layer weight.
        let mut grads: Vec<Vec<f64>> = params.groups().iter().map(|g| vec![0.0; g.len()]).collect();
        grads[KAPPA_GROUP_START].iter_mut().for_each(|g| *g = 1.0);
        let mut adam = Adam::new(&params, 1e-3);
        adam.step(&mut params, &grads).unwrap();
        let after = params.to_flat();
        let groups = params.groups();
        let kappa_offset: usize = groups[..KAPPA_GROUP_START].iter().map(|g| g.len()).sum();
        let kappa_len = groups[KAPPA_GROUP_START].len();
        for (i, (b, a)) in before.iter().zip(&after).enumerate() {
            if i >= kappa_offset && i < kappa_offset + kappa_len {
                assert!(b != a);
            } else {
                assert_eq!(b, a);
            }
        }
    }

    #[test]
    fn frozen_groups_stay_put() {
        let config = tiny_model(6);
        let mut params = init_params(&config).unwrap();
        let before = params.to_flat();
        let grads: Vec<Vec<f64>> = params.groups().iter().map(|g| vec![1.0; g.len()]).collect();
        let mut adam = Adam::with_options(&params, 1e-3, 0.9, 0.999, 1e-8, KAPPA_GROUP_START);
        adam.step(&mut params, &grads).unwrap();
        let after = params.to_flat();
        let frozen: usize = params.groups()[..KAPPA_GROUP_START].iter().map(|g| g.len()).sum();
        assert_eq!(before[..frozen], after[..frozen]);
        assert!(before[frozen..] != after[frozen..]);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let config = tiny_model(7);
        let mut params = init_params(&config).unwrap();
        let before = params.to_flat();
        let graph = constant_graph(4, 2.0, 1.0, 0.5);
        let mut adam = Adam::new(&params, 0.0);
        run_epochs(&mut params, &mut adam, std::slice::from_ref(&graph), 3, 0).unwrap();
        assert_eq!(before, params.to_flat());
    }

    #[test]
    fn loss_history_length_equals_epochs() {
        let config = tiny_model(8);
        let mut params = init_params(&config).unwrap();
        let graph = constant_graph(4, 2.0, 1.0, 0.5);
        let mut adam = Adam::new(&params, 1e-4);
        let history = run_epochs(&mut params, &mut adam, std::slice::from_ref(&graph), 5, 0).unwrap();
        assert_eq!(history.len(), 5);
        assert!(history.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn divergent_run_reports_epoch() {
        let config = tiny_model(9);
        let mut params = init_params(&config).unwrap();
        // A projection bias this large overflows the squared error, so
        // the first step sees an infinite loss; the loop must stop with
        // the failing epoch instead of optimizing on.
        params.q_b[0] = 1e200;
        let graph = constant_graph(4, 2.0, 1.0, 0.5);
        let mut adam = Adam::new(&params, 1e-4);
        let result = run_epochs(&mut params, &mut adam, std::slice::from_ref(&graph), 5, 0);
        match result {
            Err(Error::Divergence { epoch }) => assert_eq!(epoch, 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn training_is_bit_reproducible() {
        let pairs = generate_darcy_dataset(3, 9, 11).unwrap();
        let model_config = tiny_model(10);
        let config = TrainConfig {
            n_train: 2,
            n_test: 1,
            s_train: 9,
            s_test: 9,
            plan: SamplingPlan { m: 30, l: 2, m_eval: 81, l_eval: 1, r: 0.3, r_eval: 0.3, seed: 1 },
            epochs: 2,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 21,
        };
        let a = train(&model_config, &config, &pairs).unwrap();
        let b = train(&model_config, &config, &pairs).unwrap();
        assert_eq!(a.params.to_flat(), b.params.to_flat());
        assert_eq!(a.loss_history, b.loss_history);
    }

    #[test]
    fn representable_target_is_learned() {
        // u = 2a pointwise is expressible through the lift alone, so the
        // training loss must collapse.
        let s = 5;
        let mut graphs = Vec::new();
        for (a, u) in [(3.0, 6.0), (12.0, 24.0)] {
            let bundle = constant_bundle(s, a, u);
            let stats = NormStats::from_parts(
                vec![0.0, 0.0, 7.5, 7.5, 0.0, 0.0],
                vec![1.0, 1.0, 4.5, 4.5, 1.0, 1.0],
                15.0,
                9.0,
            )
            .unwrap();
            let normalized = stats.normalize_bundle(&bundle, true).unwrap();
            graphs.push(full_grid_graph(&normalized.fields(), 0.4).unwrap());
        }
        let config = ModelConfig {
            n: 8,
            t_steps: 2,
            d: 2,
            input_width: 6,
            kappa_widths: vec![6, 8, 64],
            activation: Activation::Relu,
            seed: 12,
        };
        let mut params = init_params(&config).unwrap();
        let mut adam = Adam::new(&params, 1e-2);
        let history = run_epochs(&mut params, &mut adam, &graphs, 500, 3).unwrap();
        assert!(
            history.last().unwrap() < &1e-3,
            "final loss {} did not reach 1e-3",
            history.last().unwrap()
        );
    }

    /// A model whose every prediction is the constant `c`: all weights
    /// zero, projection bias c.
    fn constant_predictor(c: f64, seed: u64) -> GknParams {
        let config = tiny_model(seed);
        let mut params = init_params(&config).unwrap();
        for g in params.groups_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
        params.q_b[0] = c;
        params
    }

    #[test]
    fn perfect_prediction_scores_zero() {
        let graph = constant_graph(4, 2.0, 3.0, 0.5);
        let params = constant_predictor(3.0, 31);
        let err = evaluate_relative_l2(&params, &[vec![graph]], &NormStats::identity(6)).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn zero_prediction_scores_one() {
        let graph = constant_graph(4, 2.0, 3.0, 0.5);
        let params = constant_predictor(0.0, 32);
        let err = evaluate_relative_l2(&params, &[vec![graph]], &NormStats::identity(6)).unwrap();
        assert!((err - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn ten_percent_overshoot_scores_point_one() {
        let graph = constant_graph(4, 2.0, 3.0, 0.5);
        let params = constant_predictor(1.1 * 3.0, 33);
        let err = evaluate_relative_l2(&params, &[vec![graph]], &NormStats::identity(6)).unwrap();
        assert!((err - 0.1).abs() <= 1e-12);
    }

    #[test]
    fn denormalization_is_applied_to_predictions() {
        let graph = constant_graph(4, 2.0, 3.0, 0.5);
        // Raw prediction 0.5 maps to 0.5 * 4 + 1 = 3 = the target.
        let params = constant_predictor(0.5, 34);
        let stats = NormStats::from_parts(vec![0.0; 6], vec![1.0; 6], 1.0, 4.0).unwrap();
        let err = evaluate_relative_l2(&params, &[vec![graph]], &stats).unwrap();
        assert!(err <= 1e-15);
    }

    #[test]
    fn zero_norm_pair_is_excluded() {
        let good = constant_graph(4, 2.0, 3.0, 0.5);
        let degenerate = constant_graph(4, 2.0, 0.0, 0.5);
        let params = constant_predictor(3.0, 35);
        let err = evaluate_relative_l2(
            &params,
            &[vec![good], vec![degenerate]],
            &NormStats::identity(6),
        )
        .unwrap();
        // Only the good pair contributes, and it is perfect.
        assert_eq!(err, 0.0);
        let only_degenerate = constant_graph(4, 2.0, 0.0, 0.5);
        let all_bad = evaluate_relative_l2(&params, &[vec![only_degenerate]], &NormStats::identity(6));
        assert!(all_bad.is_err());
    }

    #[test]
    fn evaluation_ignores_node_ordering() {
        let pairs = generate_darcy_dataset(1, 9, 17).unwrap();
        let bundle = FeatureBundle::from_pair(&pairs[0].a, Some(&pairs[0].u)).unwrap();
        let stats = compute_normalization(std::slice::from_ref(&bundle)).unwrap();
        let normalized = stats.normalize_bundle(&bundle, false).unwrap();
        let forward = full_grid_graph(&normalized.fields(), 0.3).unwrap();
        let reversed =
            graph_from_grid_nodes(&normalized.fields(), (0..81).rev().collect(), 0.3).unwrap();
        let config = tiny_model(36);
        let params = init_params(&config).unwrap();
        let e1 = evaluate_relative_l2(&params, &[vec![forward]], &stats).unwrap();
        let e2 = evaluate_relative_l2(&params, &[vec![reversed]], &stats).unwrap();
        assert!((e1 - e2).abs() <= 1e-12, "{e1} vs {e2}");
    }

    #[test]
    fn generated_pairs_are_two_phase_with_zero_boundary() {
        let pairs = generate_darcy_dataset(2, 9, 5).unwrap();
        assert_eq!(pairs.len(), 2);
        for p in &pairs {
            assert_eq!(p.a.resolution(), 9);
            assert!(p.a.values().iter().all(|&v| v == 3.0 || v == 12.0));
            for i in 0..9 {
                assert_eq!(p.u.values()[i], 0.0);
                assert_eq!(p.u.values()[8 * 9 + i], 0.0);
                assert_eq!(p.u.values()[i * 9], 0.0);
                assert_eq!(p.u.values()[i * 9 + 8], 0.0);
            }
        }
        // Independent samples differ.
        assert!(pairs[0].a.values() != pairs[1].a.values());
    }

    #[test]
    fn transfer_smoke_run() {
        let pairs = generate_darcy_dataset(3, 9, 23).unwrap();
        let model_config = tiny_model(37);
        let config = TrainConfig {
            n_train: 2,
            n_test: 1,
            s_train: 5,
            s_test: 5,
            plan: SamplingPlan { m: 25, l: 1, m_eval: 25, l_eval: 1, r: 0.3, r_eval: 0.3, seed: 2 },
            epochs: 2,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 40,
        };
        let (_trained, report) =
            resolution_transfer_experiment(&model_config, &config, &[5, 9], &pairs).unwrap();
        assert_eq!(report.errors.len(), 2);
        assert!(report.errors.iter().all(|e| e.is_finite() && *e >= 0.0));
    }

    #[test]
    fn degenerate_sweep_matches_single_run() {
        let pairs = generate_darcy_dataset(3, 9, 29).unwrap();
        let model_config = tiny_model(38);
        let config = TrainConfig {
            n_train: 2,
            n_test: 1,
            s_train: 9,
            s_test: 9,
            plan: SamplingPlan { m: 40, l: 1, m_eval: 81, l_eval: 1, r: 0.3, r_eval: 0.3, seed: 3 },
            epochs: 2,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 41,
        };
        let cell = SweepCell {
            label: "single".into(),
            model_config: model_config.clone(),
            config: config.clone(),
        };
        let outcomes = sweep_experiment(std::slice::from_ref(&cell), &pairs);
        assert_eq!(outcomes.len(), 1);
        assert!(outcomes[0].failure.is_none());
        let (_trained, report) =
            resolution_transfer_experiment(&model_config, &config, &[9], &pairs).unwrap();
        assert_eq!(outcomes[0].error.unwrap(), report.errors[0]);
    }

    #[test]
    fn sweep_records_failures_and_continues() {
        let pairs = generate_darcy_dataset(3, 9, 29).unwrap();
        let model_config = tiny_model(39);
        let good = TrainConfig {
            n_train: 2,
            n_test: 1,
            s_train: 9,
            s_test: 9,
            plan: SamplingPlan { m: 40, l: 1, m_eval: 81, l_eval: 1, r: 0.3, r_eval: 0.3, seed: 4 },
            epochs: 1,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 42,
        };
        let cells = vec![
            SweepCell {
                label: "bad".into(),
                model_config: model_config.clone(),
                config: {
                    let mut c = good.clone();
                    // More training pairs than the dataset holds.
                    c.n_train = 10;
                    c
                },
            },
            SweepCell { label: "good".into(), model_config: model_config.clone(), config: good.clone() },
        ];
        let outcomes = sweep_experiment(&cells, &pairs);
        assert!(outcomes[0].failure.is_some());
        assert!(outcomes[0].error.is_none());
        assert!(outcomes[1].failure.is_none());
        assert!(outcomes[1].error.is_some());
    }

    #[test]
    fn green_recovery_smoke_run() {
        let cfg = Green1dConfig {
            s: 9,
            n_forcings: 8,
            kmax: 3,
            hidden: vec![8],
            epochs: 2,
            lr: 1e-3,
            seed: 7,
            eval_side: 5,
        };
        let report = green1d_experiment(&cfg).unwrap();
        assert_eq!(report.loss_history.len(), 2);
        assert_eq!(report.kernel_values.len(), 25);
        assert_eq!(report.green_values.len(), 25);
        assert!(report.rel_l2.is_finite());
        // The frozen groups must still be the Example-1 values.
        assert_eq!(report.params.p_w, vec![1.0]);
        assert_eq!(report.params.w, vec![0.0]);
        assert_eq!(report.params.q_w, vec![1.0]);
        assert_eq!(report.params.q_b, vec![0.0]);
        // Analytic kernel at the grid corners vanishes.
        assert_eq!(report.green_values[0], 0.0);
        assert_eq!(report.green_values[24], 0.0);
    }
}
