//! The graph kernel network: lift node inputs to width n, run T
//! message-passing steps that share one state matrix W and one kernel
//! MLP kappa, then project to a scalar per node.
//!
//! Per step, each edge (y -> x) carries the message kappa(e(x,y)) v(y),
//! where kappa maps the edge features to an n x n matrix (row-major
//! reshape of the MLP output). A node averages its incoming messages —
//! the Monte Carlo estimate of the kernel integral — adds W v(x), and
//! applies the activation. The kernel matrices depend only on edge
//! features, so they are computed once and reused across all T steps.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{kernels, Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::SpatialGraph;

/// Nonlinearity applied after each message-passing step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Identity; used by the Green's-function recovery configuration.
    Linear,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Node state width n.
    pub n: usize,
    /// Message-passing iterations T.
    pub t_steps: usize,
    /// Spatial dimension of the graphs.
    pub d: usize,
    /// Width of the node input rows (2(d+1) for the Darcy pipeline).
    pub input_width: usize,
    /// Kernel MLP widths from edge features to n^2, inclusive.
    pub kappa_widths: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl ModelConfig {
    /// Full-scale defaults for the 2D Darcy problem.
    pub fn darcy_default(seed: u64) -> Self {
        ModelConfig {
            n: 64,
            t_steps: 6,
            d: 2,
            input_width: 6,
            kappa_widths: vec![6, 512, 1024, 64 * 64],
            activation: Activation::Relu,
            seed,
        }
    }

    /// Desk-scale defaults: the same architecture at reduced width, fast
    /// enough to train in minutes on one core.
    pub fn darcy_desk(seed: u64) -> Self {
        ModelConfig {
            n: 32,
            t_steps: 6,
            d: 2,
            input_width: 6,
            kappa_widths: vec![6, 128, 256, 32 * 32],
            activation: Activation::Relu,
            seed,
        }
    }

    pub fn edge_feature_width(&self) -> usize {
        2 * (self.d + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.t_steps == 0 {
            return Err(Error::Contract("model needs n >= 1 and T >= 1".into()));
        }
        if self.kappa_widths.len() < 2 {
            return Err(Error::Contract("kernel MLP needs at least one layer".into()));
        }
        if self.kappa_widths[0] != self.edge_feature_width() {
            return Err(Error::Contract(format!(
                "kernel input width {} does not match edge features {}",
                self.kappa_widths[0],
                self.edge_feature_width()
            )));
        }
        if *self.kappa_widths.last().unwrap() != self.n * self.n {
            return Err(Error::Contract(format!(
                "kernel output width {} must be n^2 = {}",
                self.kappa_widths.last().unwrap(),
                self.n * self.n
            )));
        }
        Ok(())
    }
}

/// All trainable arrays. Weight matrices are [out, in] row-major.
#[derive(Debug, Clone)]
pub struct GknParams {
    pub config: ModelConfig,
    /// Lift: n x input_width and n.
    pub p_w: Vec<f64>,
    pub p_b: Vec<f64>,
    /// State matrix: n x n.
    pub w: Vec<f64>,
    /// Projection: 1 x n and 1.
    pub q_w: Vec<f64>,
    pub q_b: Vec<f64>,
    /// Kernel MLP layers, each (weight [out, in], bias [out]).
    pub kappa: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Index of the first kappa group in the flat group order
/// (P, p, W, Q, q, then kappa layer weights and biases).
pub const KAPPA_GROUP_START: usize = 5;

impl GknParams {
    /// Parameter groups in a fixed documented order.
    pub fn groups(&self) -> Vec<&[f64]> {
        let mut g: Vec<&[f64]> = vec![&self.p_w, &self.p_b, &self.w, &self.q_w, &self.q_b];
        for (w, b) in &self.kappa {
            g.push(w);
            g.push(b);
        }
        g
    }

    pub fn groups_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut g: Vec<&mut Vec<f64>> = vec![
            &mut self.p_w,
            &mut self.p_b,
            &mut self.w,
            &mut self.q_w,
            &mut self.q_b,
        ];
        for (w, b) in &mut self.kappa {
            g.push(w);
            g.push(b);
        }
        g
    }

    pub fn num_parameters(&self) -> usize {
        self.groups().iter().map(|g| g.len()).sum()
    }

    /// Concatenate all groups (for gradient checking).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for g in self.groups() {
            out.extend_from_slice(g);
        }
        out
    }

    /// Rebuild parameters from a flat vector in group order.
    pub fn from_flat(config: &ModelConfig, flat: &[f64]) -> Result<GknParams> {
        let mut params = init_params(config)?;
        let mut offset = 0;
        for g in params.groups_mut() {
            let next = offset + g.len();
            if next > flat.len() {
                return Err(Error::ShapeMismatch {
                    op: "from_flat",
                    detail: format!("flat vector too short: {} < {next}", flat.len()),
                });
            }
            g.copy_from_slice(&flat[offset..next]);
            offset = next;
        }
        if offset != flat.len() {
            return Err(Error::ShapeMismatch {
                op: "from_flat",
                detail: format!("flat vector too long: {} > {offset}", flat.len()),
            });
        }
        Ok(params)
    }

    fn check_finite(&self) -> Result<()> {
        for g in self.groups() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Contract("non-finite model parameter".into()));
            }
        }
        Ok(())
    }
}

fn uniform_fill(rng: &mut ChaCha8Rng, fan_in: usize, len: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    (0..len).map(|_| dist.sample(rng)).collect()
}

/// Uniform [-1/sqrt(fan_in), +1/sqrt(fan_in)] weights, zero biases,
/// deterministic in the config seed.
pub fn init_params(config: &ModelConfig) -> Result<GknParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.n;
    let p_w = uniform_fill(&mut rng, config.input_width, n * config.input_width);
    let w = uniform_fill(&mut rng, n, n * n);
    let q_w = uniform_fill(&mut rng, n, n);
    let mut kappa = Vec::with_capacity(config.kappa_widths.len() - 1);
    for pair in config.kappa_widths.windows(2) {
        let (w_in, w_out) = (pair[0], pair[1]);
        let layer_w = uniform_fill(&mut rng, w_in, w_out * w_in);
        kappa.push((layer_w, vec![0.0; w_out]));
    }
    Ok(GknParams {
        config: config.clone(),
        p_w,
        p_b: vec![0.0; n],
        w,
        q_w,
        q_b: vec![0.0; 1],
        kappa,
    })
}

/// Shapes of the parameter groups in their fixed order.
fn group_shapes(config: &ModelConfig) -> Vec<Vec<usize>> {
    let n = config.n;
    let mut shapes = vec![
        vec![n, config.input_width],
        vec![n],
        vec![n, n],
        vec![1, n],
        vec![1],
    ];
    for pair in config.kappa_widths.windows(2) {
        shapes.push(vec![pair[1], pair[0]]);
        shapes.push(vec![pair[1]]);
    }
    shapes
}

/// The parameter set registered as leaves on a tape.
pub struct TapedParams {
    pub p_w: Tensor,
    pub p_b: Tensor,
    pub w: Tensor,
    pub q_w: Tensor,
    pub q_b: Tensor,
    pub kappa: Vec<(Tensor, Tensor)>,
}

impl TapedParams {
    /// Tape leaves in the same order as [`GknParams::groups`].
    pub fn group_tensors(&self) -> Vec<&Tensor> {
        let mut g: Vec<&Tensor> = vec![&self.p_w, &self.p_b, &self.w, &self.q_w, &self.q_b];
        for (w, b) in &self.kappa {
            g.push(w);
            g.push(b);
        }
        g
    }
}

fn assemble_taped(mut tensors: Vec<Tensor>) -> TapedParams {
    let mut kappa = Vec::new();
    while tensors.len() > 5 {
        let b = tensors.pop().unwrap();
        let w = tensors.pop().unwrap();
        kappa.push((w, b));
    }
    kappa.reverse();
    let q_b = tensors.pop().unwrap();
    let q_w = tensors.pop().unwrap();
    let w = tensors.pop().unwrap();
    let p_b = tensors.pop().unwrap();
    let p_w = tensors.pop().unwrap();
    TapedParams { p_w, p_b, w, q_w, q_b, kappa }
}

/// Register every parameter group on the tape as a gradient-carrying leaf.
pub fn stage_params(tape: &mut Tape, params: &GknParams) -> Result<TapedParams> {
    params.check_finite()?;
    let shapes = group_shapes(&params.config);
    let mut tensors = Vec::with_capacity(shapes.len());
    for (shape, group) in shapes.into_iter().zip(params.groups()) {
        tensors.push(tape.leaf(shape, group.to_vec(), true)?);
    }
    Ok(assemble_taped(tensors))
}

/// Carve the parameter groups out of one flat tape tensor, so gradients
/// with respect to the whole parameter vector flow into a single leaf.
pub fn stage_params_flat(tape: &mut Tape, config: &ModelConfig, flat: &Tensor) -> Result<TapedParams> {
    config.validate()?;
    let shapes = group_shapes(config);
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if flat.len() != total {
        return Err(Error::ShapeMismatch {
            op: "stage_params_flat",
            detail: format!("flat vector has {} entries, model wants {total}", flat.len()),
        });
    }
    let mut tensors = Vec::with_capacity(shapes.len());
    let mut offset = 0;
    for shape in shapes {
        let len: usize = shape.iter().product();
        tensors.push(tape.slice(flat, offset, shape)?);
        offset += len;
    }
    Ok(assemble_taped(tensors))
}

/// Kernel MLP on the tape: ReLU between layers, linear last layer,
/// output [E, n, n] with row-major per-edge reshape.
pub fn kappa_forward(tape: &mut Tape, params: &TapedParams, edge_features: &Tensor, n: usize) -> Result<Tensor> {
    let mut h = edge_features.clone();
    let last = params.kappa.len() - 1;
    for (i, (w, b)) in params.kappa.iter().enumerate() {
        h = tape.linear(&h, w, Some(b))?;
        if i != last {
            h = tape.relu(&h)?;
        }
    }
    let e = h.shape()[0];
    h.reshape(vec![e, n, n])
}

/// Full taped forward pass: predictions [K, 1] for one graph.
pub fn gkn_forward(tape: &mut Tape, params: &TapedParams, config: &ModelConfig, graph: &SpatialGraph) -> Result<Tensor> {
    if graph.input_width() != config.input_width {
        return Err(Error::ShapeMismatch {
            op: "gkn_forward",
            detail: format!(
                "graph input width {} vs model {}",
                graph.input_width(),
                config.input_width
            ),
        });
    }
    if graph.edge_feature_width() != config.edge_feature_width() {
        return Err(Error::ShapeMismatch {
            op: "gkn_forward",
            detail: "edge feature width differs from model dimension".into(),
        });
    }
    let k = graph.num_nodes();
    let e = graph.num_edges();
    let inputs = tape.constant(vec![k, config.input_width], graph.node_inputs().to_vec())?;
    let mut v = tape.linear(&inputs, &params.p_w, Some(&params.p_b))?;

    let kappa_mats = if e > 0 {
        let feats = tape.constant(vec![e, graph.edge_feature_width()], graph.edge_features().to_vec())?;
        Some(kappa_forward(tape, params, &feats, config.n)?)
    } else {
        None
    };

    for _ in 0..config.t_steps {
        let wv = tape.linear(&v, &params.w, None)?;
        let pre = if let Some(mats) = &kappa_mats {
            let gathered = tape.gather_rows(&v, graph.edge_sources())?;
            let messages = tape.bmv(mats, &gathered)?;
            let agg = tape.scatter_mean(&messages, graph.edge_targets(), k)?;
            tape.add(&wv, &agg)?
        } else {
            wv
        };
        v = match config.activation {
            Activation::Relu => tape.relu(&pre)?,
            Activation::Linear => pre,
        };
    }
    tape.linear(&v, &params.q_w, Some(&params.q_b))
}

/// Memory ceiling for caching kernel matrices during inference.
pub const KAPPA_CACHE_CAP_BYTES: usize = 3_200_000_000;

/// No-tape forward pass for evaluation.
///
/// Kernel matrices are cached across the T steps when they fit under
/// `KAPPA_CACHE_CAP_BYTES`; otherwise they are recomputed per step in
/// fixed-size edge chunks, which is slower but bounded in memory. Both
/// paths visit edges in the same order and produce identical results.
pub fn predict(params: &GknParams, graph: &SpatialGraph) -> Result<Vec<f64>> {
    params.check_finite()?;
    let c = &params.config;
    c.validate()?;
    if graph.input_width() != c.input_width {
        return Err(Error::ShapeMismatch {
            op: "predict",
            detail: format!("graph input width {} vs model {}", graph.input_width(), c.input_width),
        });
    }
    let k = graph.num_nodes();
    let e = graph.num_edges();
    let n = c.n;

    let mut v = vec![0.0; k * n];
    kernels::linear_forward(graph.node_inputs(), &params.p_w, &params.p_b, k, c.input_width, n, &mut v);

    let mut counts = vec![0u32; k];
    for &t in graph.edge_targets() {
        counts[t] += 1;
    }

    let cache_bytes = e.saturating_mul(n * n).saturating_mul(8);
    let cached = if e > 0 && cache_bytes <= KAPPA_CACHE_CAP_BYTES {
        let mut buf = Vec::new();
        if buf.try_reserve_exact(e * n * n).is_ok() {
            buf.resize(e * n * n, 0.0);
            kappa_eval_chunk(params, graph.edge_features(), 0, e, &mut buf);
            Some(buf)
        } else {
            None
        }
    } else {
        None
    };

    let mut wv = vec![0.0; k * n];
    let mut agg = vec![0.0; k * n];
    for _ in 0..c.t_steps {
        kernels::gemm(k, n, n, &v, false, &params.w, true, 0.0, &mut wv);
        agg.iter_mut().for_each(|x| *x = 0.0);
        if e > 0 {
            match &cached {
                Some(mats) => accumulate_messages(graph, mats, &v, n, 0, e, &mut agg),
                None => {
                    // 64 MB of kernel matrices per chunk.
                    let chunk = (8_388_608 / (n * n)).max(1);
                    let mut mats = vec![0.0; chunk * n * n];
                    let mut start = 0;
                    while start < e {
                        let stop = (start + chunk).min(e);
                        kappa_eval_chunk(params, graph.edge_features(), start, stop, &mut mats);
                        accumulate_messages(graph, &mats, &v, n, start, stop, &mut agg);
                        start = stop;
                    }
                }
            }
            for (node, row) in agg.chunks_exact_mut(n).enumerate() {
                if counts[node] > 1 {
                    let inv = 1.0 / counts[node] as f64;
                    for x in row {
                        *x *= inv;
                    }
                }
            }
        }
        for (vi, (wi, ai)) in v.iter_mut().zip(wv.iter().zip(&agg)) {
            *vi = wi + ai;
        }
        if c.activation == Activation::Relu {
            kernels::relu_inplace(&mut v);
        }
    }

    let mut out = vec![0.0; k];
    kernels::linear_forward(&v, &params.q_w, &params.q_b, k, n, 1, &mut out);
    Ok(out)
}

/// Kernel MLP values for explicit edge features, without a tape: one
/// row-major n x n matrix per feature row. Lets callers probe the
/// learned kernel as a standalone function of (x, y, a(x), a(y)).
pub fn kappa_matrices(params: &GknParams, edge_features: &[f64]) -> Result<Vec<f64>> {
    let c = &params.config;
    c.validate()?;
    params.check_finite()?;
    let in_w = c.kappa_widths[0];
    if edge_features.len() % in_w != 0 {
        return Err(Error::ShapeMismatch {
            op: "kappa_matrices",
            detail: format!("{} feature values, width {in_w}", edge_features.len()),
        });
    }
    let rows = edge_features.len() / in_w;
    let mut out = vec![0.0; rows * c.n * c.n];
    if rows > 0 {
        kappa_eval_chunk(params, edge_features, 0, rows, &mut out);
    }
    Ok(out)
}

/// Kernel matrices for edges [start, stop) into the head of `out`.
fn kappa_eval_chunk(params: &GknParams, edge_features: &[f64], start: usize, stop: usize, out: &mut [f64]) {
    let c = &params.config;
    let rows = stop - start;
    let in_w = c.kappa_widths[0];
    let mut h = edge_features[start * in_w..stop * in_w].to_vec();
    let last = params.kappa.len() - 1;
    let mut width = in_w;
    for (i, ((w, b), pair)) in params.kappa.iter().zip(c.kappa_widths.windows(2)).enumerate() {
        let out_w = pair[1];
        if i == last {
            kernels::linear_forward(&h, w, b, rows, width, out_w, &mut out[..rows * out_w]);
        } else {
            let mut next = vec![0.0; rows * out_w];
            kernels::linear_forward(&h, w, b, rows, width, out_w, &mut next);
            kernels::relu_inplace(&mut next);
            h = next;
        }
        width = out_w;
    }
}

/// agg[target] += kappa_e . v[source] for edges [start, stop); `mats`
/// holds those edges' kernel matrices starting at its origin.
fn accumulate_messages(
    graph: &SpatialGraph,
    mats: &[f64],
    v: &[f64],
    n: usize,
    start: usize,
    stop: usize,
    agg: &mut [f64],
) {
    let sources = graph.edge_sources();
    let targets = graph.edge_targets();
    let mut msg = vec![0.0; n];
    for e in start..stop {
        let me = &mats[(e - start) * n * n..(e - start + 1) * n * n];
        let vs = &v[sources[e] * n..(sources[e] + 1) * n];
        for (mi, mrow) in msg.iter_mut().zip(me.chunks_exact(n)) {
            let mut acc = 0.0;
            for (&m, &x) in mrow.iter().zip(vs) {
                acc += m * x;
            }
            *mi = acc;
        }
        let trow = &mut agg[targets[e] * n..(targets[e] + 1) * n];
        for (t, &m) in trow.iter_mut().zip(&msg) {
            *t += m;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{backward, grad_check};
    use crate::graph::build_radius_graph;

    fn toy_config(n: usize, t_steps: usize, widths: Vec<usize>) -> ModelConfig {
        ModelConfig {
            n,
            t_steps,
            d: 2,
            input_width: 6,
            kappa_widths: widths,
            activation: Activation::Relu,
            seed: 0,
        }
    }

    /// A 2D graph on `k` nodes placed on a small circle, dense enough to
    /// be connected, with pseudorandom inputs and targets.
    fn toy_graph(k: usize, seed: u64) -> (SpatialGraph, Vec<f64>) {
        let mut coords = Vec::with_capacity(k * 2);
        let mut a = Vec::with_capacity(k);
        let mut inputs = Vec::with_capacity(k * 6);
        let mut targets = Vec::with_capacity(k);
        for i in 0..k {
            let ang = (i as f64 + seed as f64 * 0.37) * 0.61;
            let (x1, x2) = (0.5 + 0.2 * ang.cos(), 0.5 + 0.2 * ang.sin());
            coords.push(x1);
            coords.push(x2);
            let av = 1.0 + 0.5 * (ang * 1.7).sin().abs();
            a.push(av);
            inputs.extend_from_slice(&[
                x1,
                x2,
                av,
                av * 0.9,
                (ang * 0.53).sin() * 0.2,
                (ang * 0.71).cos() * 0.2,
            ]);
            targets.push((ang * 0.9).sin() * 0.3);
        }
        let g = build_radius_graph(coords, 2, &a, inputs, Some(targets.clone()), (0..k).collect(), 0.3)
            .unwrap();
        (g, targets)
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let config = toy_config(4, 2, vec![6, 8, 16]);
        let a = init_params(&config).unwrap();
        let b = init_params(&config).unwrap();
        assert_eq!(a.to_flat(), b.to_flat());
        // Weight groups respect their fan-in bound; biases are zero.
        assert!(a.p_w.iter().all(|v| v.abs() <= 1.0 / 6.0f64.sqrt()));
        assert!(a.p_b.iter().all(|&v| v == 0.0));
        let bound_n = 1.0 / (4.0f64).sqrt();
        assert!(a.w.iter().all(|v| v.abs() <= bound_n));
        assert!(a.q_w.iter().all(|v| v.abs() <= bound_n));
        assert!(a.kappa[0].0.iter().all(|v| v.abs() <= 1.0 / 6.0f64.sqrt()));
        assert!(a.kappa[1].0.iter().all(|v| v.abs() <= 1.0 / 8.0f64.sqrt()));
        assert!(a.kappa.iter().all(|(_, b)| b.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn default_kernel_parameter_count_matches_widths() {
        let config = ModelConfig::darcy_default(0);
        let params = init_params(&config).unwrap();
        let kappa_count: usize = params.kappa.iter().map(|(w, b)| w.len() + b.len()).sum();
        let n2 = 64 * 64;
        assert_eq!(kappa_count, 6 * 512 + 512 + 512 * 1024 + 1024 + 1024 * n2 + n2);
    }

    #[test]
    fn zero_kernel_weights_give_zero_matrices() {
        let config = toy_config(2, 1, vec![6, 5, 4]);
        let mut params = init_params(&config).unwrap();
        for (w, b) in &mut params.kappa {
            w.iter_mut().for_each(|v| *v = 0.0);
            b.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let taped = stage_params(&mut tape, &params).unwrap();
        let feats = tape.constant(vec![3, 6], vec![0.3; 18]).unwrap();
        let mats = kappa_forward(&mut tape, &taped, &feats, 2).unwrap();
        assert_eq!(mats.shape(), &[3, 2, 2]);
        assert!(mats.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kappa_matches_manual_two_layer_evaluation() {
        let mut config = toy_config(1, 1, vec![6, 2, 1]);
        config.seed = 3;
        let mut params = init_params(&config).unwrap();
        params.kappa[0].0 = vec![0.1, 0.2, -0.3, 0.0, 0.5, -0.1, 0.4, -0.2, 0.3, 0.1, 0.0, 0.2];
        params.kappa[0].1 = vec![0.05, -0.15];
        params.kappa[1].0 = vec![0.7, -0.6];
        params.kappa[1].1 = vec![0.2];
        let feat = [0.1, 0.9, 0.4, 0.2, 1.5, 0.8];

        // Hand evaluation: h = relu(W1 f + b1); out = W2 h + b2.
        let h0: f64 = (0.1f64 * 0.1 + 0.2 * 0.9 + -0.3 * 0.4 + 0.0 * 0.2 + 0.5 * 1.5 + -0.1 * 0.8 + 0.05).max(0.0);
        let h1: f64 = (0.4f64 * 0.1 + -0.2 * 0.9 + 0.3 * 0.4 + 0.1 * 0.2 + 0.0 * 1.5 + 0.2 * 0.8 + -0.15).max(0.0);
        let expect = 0.7 * h0 - 0.6 * h1 + 0.2;

        let mut tape = Tape::new();
        let taped = stage_params(&mut tape, &params).unwrap();
        let feats = tape.constant(vec![1, 6], feat.to_vec()).unwrap();
        let mats = kappa_forward(&mut tape, &taped, &feats, 1).unwrap();
        assert!((mats.values()[0] - expect).abs() <= 1e-14);
    }

    #[test]
    fn identical_edge_features_give_identical_matrices() {
        let config = toy_config(3, 1, vec![6, 7, 9]);
        let params = init_params(&config).unwrap();
        let mut tape = Tape::new();
        let taped = stage_params(&mut tape, &params).unwrap();
        let row = [0.2, 0.4, 0.6, 0.8, 1.0, 1.2];
        let feats = tape.constant(vec![4, 6], row.repeat(4)).unwrap();
        let mats = kappa_forward(&mut tape, &taped, &feats, 3).unwrap();
        let first = &mats.values()[0..9];
        for e in 1..4 {
            assert_eq!(&mats.values()[e * 9..(e + 1) * 9], first);
        }
    }

    #[test]
    fn zeroed_model_outputs_the_projection_bias() {
        let config = toy_config(3, 6, vec![6, 4, 9]);
        let mut params = init_params(&config).unwrap();
        params.w.iter_mut().for_each(|v| *v = 0.0);
        for (w, b) in &mut params.kappa {
            w.iter_mut().for_each(|v| *v = 0.0);
            b.iter_mut().for_each(|v| *v = 0.0);
        }
        params.q_b[0] = 0.75;
        let (graph, _) = toy_graph(8, 1);
        let out = predict(&params, &graph).unwrap();
        assert!(out.iter().all(|&v| (v - 0.75).abs() <= 1e-12));
        let mut tape = Tape::new();
        let taped = stage_params(&mut tape, &params).unwrap();
        let taped_out = gkn_forward(&mut tape, &taped, &config, &graph).unwrap();
        assert!(taped_out.values().iter().all(|&v| (v - 0.75).abs() <= 1e-12));
    }

    #[test]
    fn isolated_nodes_follow_the_scalar_recursion() {
        // Two far-apart nodes, n = 1, linear activation: the aggregation is
        // empty, so v_T = w^T v_0 and u = q_w w^T (p_w . inputs + p_b) + q_b.
        let config = ModelConfig {
            n: 1,
            t_steps: 3,
            d: 2,
            input_width: 6,
            kappa_widths: vec![6, 2, 1],
            activation: Activation::Linear,
            seed: 9,
        };
        let mut params = init_params(&config).unwrap();
        params.p_w = vec![0.3, -0.2, 0.15, 0.4, 0.1, -0.25];
        params.p_b = vec![0.07];
        params.w = vec![0.8];
        params.q_w = vec![1.3];
        params.q_b = vec![-0.11];

        let coords = vec![0.0, 0.0, 1.0, 1.0];
        let inputs = vec![0.5, -1.0, 2.0, 1.8, 0.3, -0.6, 1.0, 0.4, 1.5, 1.4, -0.2, 0.9];
        let graph = build_radius_graph(coords, 2, &[2.0, 1.5], inputs.clone(), None, vec![0, 1], 0.1).unwrap();
        assert_eq!(graph.num_edges(), 0);

        let out = predict(&params, &graph).unwrap();
        for node in 0..2 {
            let v0: f64 = params
                .p_w
                .iter()
                .zip(&inputs[node * 6..(node + 1) * 6])
                .map(|(w, x)| w * x)
                .sum::<f64>()
                + params.p_b[0];
            let expect = 1.3 * 0.8f64.powi(3) * v0 - 0.11;
            assert!((out[node] - expect).abs() <= 1e-12, "{} vs {expect}", out[node]);
        }
    }

    #[test]
    fn predictions_are_equivariant_under_node_permutation() {
        let config = toy_config(4, 3, vec![6, 8, 16]);
        let params = init_params(&config).unwrap();
        let (graph, _) = toy_graph(10, 4);
        let base = predict(&params, &graph).unwrap();

        // Rebuild the same graph with nodes listed in reverse order.
        let k = graph.num_nodes();
        let perm: Vec<usize> = (0..k).rev().collect();
        let mut coords = Vec::with_capacity(k * 2);
        let mut inputs = Vec::with_capacity(k * 6);
        let mut a = Vec::with_capacity(k);
        for &old in &perm {
            coords.extend_from_slice(&graph.node_coords()[old * 2..old * 2 + 2]);
            inputs.extend_from_slice(&graph.node_inputs()[old * 6..old * 6 + 6]);
            a.push(graph.node_inputs()[old * 6 + 2]);
        }
        let permuted = build_radius_graph(coords, 2, &a, inputs, None, perm.clone(), 0.3).unwrap();
        let out = predict(&params, &permuted).unwrap();
        for (new_idx, &old_idx) in perm.iter().enumerate() {
            assert!((out[new_idx] - base[old_idx]).abs() <= 1e-12);
        }
    }

    #[test]
    fn one_parameter_set_runs_at_multiple_resolutions() {
        use crate::graph::{full_grid_graph, SampleFields};
        use crate::random_fields::{gaussian_smooth, gradient_field, sample_grf, threshold_psi, GrfSpec};
        let config = toy_config(2, 2, vec![6, 4, 4]);
        let params = init_params(&config).unwrap();
        for s in [16usize, 31, 61] {
            let spec = GrfSpec::darcy_coefficient(15, 3);
            let a = threshold_psi(&sample_grf(&spec, s, 2, 0).unwrap());
            let a_smooth = gaussian_smooth(&a).unwrap();
            let (g1, g2) = gradient_field(&a_smooth).unwrap();
            let fields = SampleFields { a: &a, a_smooth: &a_smooth, grad1: &g1, grad2: &g2, u: None };
            let graph = full_grid_graph(&fields, 0.10).unwrap();
            let out = predict(&params, &graph).unwrap();
            assert_eq!(out.len(), s * s);
            assert!(out.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn taped_forward_matches_inference_path() {
        let config = toy_config(4, 3, vec![6, 8, 16]);
        let params = init_params(&config).unwrap();
        let (graph, _) = toy_graph(12, 2);
        let fast = predict(&params, &graph).unwrap();
        let mut tape = Tape::new();
        let taped = stage_params(&mut tape, &params).unwrap();
        let out = gkn_forward(&mut tape, &taped, &config, &graph).unwrap();
        for (a, b) in fast.iter().zip(out.values()) {
            assert!((a - b).abs() <= 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn full_model_gradient_passes_finite_difference_check() {
        for seed in [0u64, 1, 2] {
            let mut config = toy_config(4, 2, vec![6, 8, 16]);
            config.seed = seed;
            let params = init_params(&config).unwrap();
            let (graph, targets) = toy_graph(12, seed);
            let flat = Tensor::new(vec![params.num_parameters()], params.to_flat()).unwrap();
            let config_ref = &config;
            let graph_ref = &graph;
            let targets_ref = &targets;
            let err = grad_check(
                move |tape, point| {
                    let taped = stage_params_flat(tape, config_ref, point)?;
                    let pred = gkn_forward(tape, &taped, config_ref, graph_ref)?;
                    let t = tape.constant(vec![graph_ref.num_nodes(), 1], targets_ref.clone())?;
                    tape.mse_loss(&pred, &t)
                },
                &flat,
                1e-6,
            )
            .unwrap();
            assert!(err <= 1e-5, "seed {seed}: grad_check {err}");
        }
    }

    #[test]
    fn gradients_flow_into_every_group() {
        let config = toy_config(3, 2, vec![6, 5, 9]);
        let params = init_params(&config).unwrap();
        let (graph, targets) = toy_graph(9, 7);
        let mut tape = Tape::new();
        let taped = stage_params(&mut tape, &params).unwrap();
        let pred = gkn_forward(&mut tape, &taped, &config, &graph).unwrap();
        let t = tape.constant(vec![graph.num_nodes(), 1], targets).unwrap();
        let loss = tape.mse_loss(&pred, &t).unwrap();
        let grads = backward(&loss, &tape).unwrap();
        for (i, tensor) in taped.group_tensors().iter().enumerate() {
            let g = grads.wrt(tensor).expect("gradient present");
            assert!(g.iter().any(|&v| v != 0.0), "group {i} has all-zero gradient");
        }
    }
}
