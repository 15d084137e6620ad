//! Spatial graphs over grid nodes: radius-ball connectivity, edge
//! features, Nystrom node subsampling for training, and disjoint
//! partitioning for full-grid evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::random_fields::GridField;

/// Immutable message-passing graph. Messages flow along directed edges
/// from `source` to `target`, matching the integrand kappa(x,y) v(y)
/// accumulated at x.
#[derive(Debug, Clone)]
pub struct SpatialGraph {
    dim: usize,
    input_width: usize,
    /// K x dim row-major node positions.
    node_coords: Vec<f64>,
    /// Flat indices of these nodes in the parent grid.
    node_index_map: Vec<usize>,
    edge_sources: Vec<usize>,
    edge_targets: Vec<usize>,
    /// E x 2(dim+1) row-major: (x, y, a(x), a(y)) with x the target.
    edge_features: Vec<f64>,
    /// K x input_width row-major model inputs.
    node_inputs: Vec<f64>,
    node_targets: Option<Vec<f64>>,
}

impl SpatialGraph {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_nodes(&self) -> usize {
        self.node_index_map.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edge_sources.len()
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn edge_feature_width(&self) -> usize {
        2 * (self.dim + 1)
    }

    pub fn node_coords(&self) -> &[f64] {
        &self.node_coords
    }

    pub fn node_index_map(&self) -> &[usize] {
        &self.node_index_map
    }

    pub fn edge_sources(&self) -> &[usize] {
        &self.edge_sources
    }

    pub fn edge_targets(&self) -> &[usize] {
        &self.edge_targets
    }

    pub fn edge_features(&self) -> &[f64] {
        &self.edge_features
    }

    pub fn node_inputs(&self) -> &[f64] {
        &self.node_inputs
    }

    pub fn node_targets(&self) -> Option<&[f64]> {
        self.node_targets.as_deref()
    }

    /// Directed in-degree averaged over all nodes.
    pub fn mean_neighborhood_size(&self) -> f64 {
        self.num_edges() as f64 / self.num_nodes() as f64
    }
}

/// How to carve training/evaluation subgraphs out of a grid.
#[derive(Debug, Clone)]
pub struct SamplingPlan {
    /// Nodes per training subgraph.
    pub m: usize,
    /// Subgraphs per training pair.
    pub l: usize,
    /// Nodes per evaluation subgraph.
    pub m_eval: usize,
    /// Subgraphs per evaluation pair.
    pub l_eval: usize,
    /// Training and evaluation radii.
    pub r: f64,
    pub r_eval: f64,
    pub seed: u64,
}

impl SamplingPlan {
    fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::Contract(format!("plan needs m >= 2, got {}", self.m)));
        }
        if self.l < 1 {
            return Err(Error::Contract("plan needs l >= 1".into()));
        }
        if !(self.r > 0.0) {
            return Err(Error::Contract(format!("plan needs r > 0, got {}", self.r)));
        }
        Ok(())
    }
}

/// One sample's field bundle: the raw coefficient, its smoothed version
/// and gradient components, and (when supervised) the solution.
#[derive(Debug, Clone, Copy)]
pub struct SampleFields<'a> {
    pub a: &'a GridField,
    pub a_smooth: &'a GridField,
    pub grad1: &'a GridField,
    pub grad2: &'a GridField,
    pub u: Option<&'a GridField>,
}

impl<'a> SampleFields<'a> {
    fn resolution(&self) -> usize {
        self.a.resolution()
    }
}

/// Build the directed radius graph on an explicit node set.
///
/// `coords` is K x dim, `a_values` the raw coefficient at each node (used
/// in edge features), `node_inputs` the K x input_width model inputs.
/// An edge (y -> x) exists for every ordered pair with 0 < |x-y| <= r;
/// isolated nodes are allowed.
#[allow(clippy::too_many_arguments)]
pub fn build_radius_graph(
    coords: Vec<f64>,
    dim: usize,
    a_values: &[f64],
    node_inputs: Vec<f64>,
    node_targets: Option<Vec<f64>>,
    node_index_map: Vec<usize>,
    r: f64,
) -> Result<SpatialGraph> {
    if !(r > 0.0) {
        return Err(Error::Contract(format!("radius must be positive, got {r}")));
    }
    let k = node_index_map.len();
    if k < 2 {
        return Err(Error::Contract(format!("radius graph needs at least 2 nodes, got {k}")));
    }
    if coords.len() != k * dim || a_values.len() != k {
        return Err(Error::ShapeMismatch {
            op: "build_radius_graph",
            detail: format!("{k} nodes, {} coords, {} a-values", coords.len(), a_values.len()),
        });
    }
    if node_inputs.len() % k != 0 {
        return Err(Error::ShapeMismatch {
            op: "build_radius_graph",
            detail: format!("{} inputs not divisible by {k} nodes", node_inputs.len()),
        });
    }
    let input_width = node_inputs.len() / k;
    let r2 = r * r;
    let mut edge_sources = Vec::new();
    let mut edge_targets = Vec::new();
    let mut edge_features = Vec::new();
    // Edges in (target, source) order so aggregation order is canonical.
    for t in 0..k {
        let xt = &coords[t * dim..(t + 1) * dim];
        for s in 0..k {
            if s == t {
                continue;
            }
            let ys = &coords[s * dim..(s + 1) * dim];
            let d2: f64 = xt.iter().zip(ys).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 <= r2 {
                edge_sources.push(s);
                edge_targets.push(t);
                edge_features.extend_from_slice(xt);
                edge_features.extend_from_slice(ys);
                edge_features.push(a_values[t]);
                edge_features.push(a_values[s]);
            }
        }
    }
    Ok(SpatialGraph {
        dim,
        input_width,
        node_coords: coords,
        node_index_map,
        edge_sources,
        edge_targets,
        edge_features,
        node_inputs,
        node_targets,
    })
}

/// Assemble the standard Darcy graph over the given grid nodes: inputs
/// (x, a, a_smooth, grad a_smooth), targets u when present.
pub fn graph_from_grid_nodes(
    fields: &SampleFields,
    node_flat: Vec<usize>,
    r: f64,
) -> Result<SpatialGraph> {
    let s = fields.resolution();
    for f in [fields.a_smooth, fields.grad1, fields.grad2] {
        if f.resolution() != s {
            return Err(Error::ShapeMismatch {
                op: "graph_from_grid_nodes",
                detail: "field bundle resolutions differ".into(),
            });
        }
    }
    if let Some(u) = fields.u {
        if u.resolution() != s {
            return Err(Error::ShapeMismatch {
                op: "graph_from_grid_nodes",
                detail: "solution resolution differs from coefficient".into(),
            });
        }
    }
    let k = node_flat.len();
    let mut coords = Vec::with_capacity(k * 2);
    let mut a_values = Vec::with_capacity(k);
    let mut node_inputs = Vec::with_capacity(k * 6);
    let mut node_targets = fields.u.map(|_| Vec::with_capacity(k));
    for &flat in &node_flat {
        if flat >= s * s {
            return Err(Error::IndexOutOfRange { op: "graph_from_grid_nodes", index: flat, bound: s * s });
        }
        let (x1, x2) = fields.a.point(flat);
        coords.push(x1);
        coords.push(x2);
        let a = fields.a.values()[flat];
        a_values.push(a);
        node_inputs.extend_from_slice(&[
            x1,
            x2,
            a,
            fields.a_smooth.values()[flat],
            fields.grad1.values()[flat],
            fields.grad2.values()[flat],
        ]);
        if let (Some(t), Some(u)) = (node_targets.as_mut(), fields.u) {
            t.push(u.values()[flat]);
        }
    }
    build_radius_graph(coords, 2, &a_values, node_inputs, node_targets, node_flat, r)
}

/// The radius graph over every node of the grid.
pub fn full_grid_graph(fields: &SampleFields, r: f64) -> Result<SpatialGraph> {
    let s = fields.resolution();
    graph_from_grid_nodes(fields, (0..s * s).collect(), r)
}

/// Draw `plan.l` training subgraphs of `plan.m` nodes each, uniformly
/// without replacement, independently across repetitions. `pair_index`
/// selects the RNG stream so every (sample, repetition) pair is
/// reproducible in isolation.
pub fn nystrom_subsample(
    fields: &SampleFields,
    plan: &SamplingPlan,
    pair_index: u64,
) -> Result<Vec<SpatialGraph>> {
    plan.validate()?;
    let s = fields.resolution();
    let k = s * s;
    if plan.m > k {
        return Err(Error::Sampling(format!("cannot draw m={} nodes from a grid of {k}", plan.m)));
    }
    let mut graphs = Vec::with_capacity(plan.l);
    for rep in 0..plan.l {
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
        rng.set_stream(pair_index * plan.l as u64 + rep as u64);
        let mut chosen = draw_without_replacement(&mut rng, k, plan.m);
        chosen.sort_unstable();
        graphs.push(graph_from_grid_nodes(fields, chosen, plan.r)?);
    }
    Ok(graphs)
}

/// Partial Fisher-Yates: the first `m` entries of a seeded shuffle.
fn draw_without_replacement(rng: &mut ChaCha8Rng, k: usize, m: usize) -> Vec<usize> {
    use rand::Rng;
    let mut pool: Vec<usize> = (0..k).collect();
    for i in 0..m {
        let j = rng.gen_range(i..k);
        pool.swap(i, j);
    }
    pool.truncate(m);
    pool
}

/// Split a seeded random permutation of the grid nodes into blocks of at
/// most `m`, covering every node exactly once, and build a radius graph
/// on each block.
pub fn partition_for_evaluation(
    fields: &SampleFields,
    m: usize,
    r: f64,
    seed: u64,
) -> Result<Vec<SpatialGraph>> {
    let s = fields.resolution();
    let k = s * s;
    if m < 2 {
        return Err(Error::Contract(format!("partition needs m >= 2, got {m}")));
    }
    let mut perm: Vec<usize> = (0..k).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perm.shuffle(&mut rng);
    split_into_blocks(perm, m)
        .into_iter()
        .map(|mut block| {
            block.sort_unstable();
            graph_from_grid_nodes(fields, block, r)
        })
        .collect()
}

/// Consecutive chunks of at most `m` items; the tail block keeps the
/// remainder.
fn split_into_blocks(perm: Vec<usize>, m: usize) -> Vec<Vec<usize>> {
    perm.chunks(m).map(|c| c.to_vec()).collect()
}
