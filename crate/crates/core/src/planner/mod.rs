//! Graph subgoal planner: encoder, message-passing layers and decoder.
//!
//! Three variants share the encoder and decoder:
//! - `gatp_f1`: multi-head attention, update from the initial embedding and the aggregate;
//! - `gcn_f1`: mean convolution over the closed neighborhood, same update;
//! - `gatp_f2`: multi-head attention, residual update from the previous embedding.
//!
//! Parameters live in one flat list of tensors (see [`ParamLayout`]) so that the optimizer,
//! checkpoints and the autodiff tape all see the same ordering.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointMeta};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::world::{self, AdjacencyGraph, Point, Scenario};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    GatpF1,
    GcnF1,
    GatpF2,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::GatpF1, Variant::GcnF1, Variant::GatpF2];

    pub fn name(self) -> &'static str {
        match self {
            Variant::GatpF1 => "gatp_f1",
            Variant::GcnF1 => "gcn_f1",
            Variant::GatpF2 => "gatp_f2",
        }
    }

    pub fn uses_attention(self) -> bool {
        !matches!(self, Variant::GcnF1)
    }

    pub fn residual_update(self) -> bool {
        matches!(self, Variant::GatpF2)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?} (expected gatp_f1, gcn_f1 or gatp_f2)")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How the decoder output in `(-1, 1)^n` becomes a displacement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClampMode {
    /// `S_p · min(1, 1/‖s‖) · s`: `S_p` scales the output and caps its norm.
    ScaleAndCap,
    /// `min(1, S_p/‖s‖) · s`: caps only, no scaling.
    CapOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub layers: usize,
    pub max_neighbors: usize,
    pub heads: usize,
    pub features: usize,
    pub goals_sensed: usize,
    pub robots_sensed: usize,
    pub dim: usize,
    pub variant: Variant,
    /// Maximum subgoal distance, meters.
    pub spatial_horizon: f64,
    pub attention_slope: f64,
    pub mlp_slope: f64,
    pub clamp_mode: ClampMode,
    /// One update MLP for all layers instead of one per layer.
    pub share_update: bool,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            max_neighbors: 2,
            heads: 3,
            features: 64,
            goals_sensed: 5,
            robots_sensed: 3,
            dim: 2,
            variant: Variant::GatpF1,
            spatial_horizon: 4.0,
            attention_slope: 0.2,
            mlp_slope: 0.01,
            clamp_mode: ClampMode::ScaleAndCap,
            share_update: false,
        }
    }
}

impl PlannerConfig {
    pub fn input_width(&self) -> usize {
        self.dim * (1 + self.goals_sensed + self.robots_sensed)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.layers == 0 {
            return bad("layers must be at least 1");
        }
        if self.heads == 0 {
            return bad("heads must be at least 1");
        }
        if self.features == 0 {
            return bad("features must be at least 1");
        }
        if self.dim != 2 && self.dim != 3 {
            return bad("dim must be 2 or 3");
        }
        if !(self.spatial_horizon > 0.0) {
            return bad("spatial_horizon must be positive");
        }
        Ok(())
    }

    /// Neighbors per robot in a graph of `n` robots.
    pub fn degree(&self, n: usize) -> usize {
        self.max_neighbors.min(n.saturating_sub(1))
    }
}

/// Where each block of the flat parameter list lives.
#[derive(Debug, Clone, Copy)]
struct MlpSlots {
    first: usize,
}

impl MlpSlots {
    fn w1(self) -> usize {
        self.first
    }
    fn b1(self) -> usize {
        self.first + 1
    }
    fn w2(self) -> usize {
        self.first + 2
    }
    fn b2(self) -> usize {
        self.first + 3
    }
}

#[derive(Debug, Clone)]
pub struct ParamLayout {
    encoder: MlpSlots,
    /// Per layer: attention `(W, a)` index pairs per head, or a single `W` index for convolution.
    aggregators: Vec<Vec<(usize, Option<usize>)>>,
    updates: Vec<MlpSlots>,
    decoder: MlpSlots,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
}

impl ParamLayout {
    pub fn new(cfg: &PlannerConfig) -> Self {
        let f = cfg.features;
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        let mut push = |name: String, shape: Vec<usize>| {
            names.push(name);
            shapes.push(shape);
            names.len() - 1
        };
        let mlp = |prefix: &str, input: usize, hidden: usize, output: usize, push: &mut dyn FnMut(String, Vec<usize>) -> usize| {
            let first = push(format!("{prefix}.w1"), vec![input, hidden]);
            push(format!("{prefix}.b1"), vec![hidden]);
            push(format!("{prefix}.w2"), vec![hidden, output]);
            push(format!("{prefix}.b2"), vec![output]);
            MlpSlots { first }
        };
        let encoder = mlp("encoder", cfg.input_width(), f, f, &mut push);
        let mut aggregators = Vec::new();
        for l in 0..cfg.layers {
            if cfg.variant.uses_attention() {
                let heads = (0..cfg.heads)
                    .map(|k| {
                        let w = push(format!("layer{l}.head{k}.w"), vec![f, f]);
                        let a = push(format!("layer{l}.head{k}.a"), vec![2 * f]);
                        (w, Some(a))
                    })
                    .collect();
                aggregators.push(heads);
            } else {
                let w = push(format!("layer{l}.conv.w"), vec![f, f]);
                aggregators.push(vec![(w, None)]);
            }
        }
        let update_in = if cfg.variant.residual_update() { f } else { 2 * f };
        let update_count = if cfg.share_update { 1 } else { cfg.layers };
        let updates = (0..update_count)
            .map(|l| {
                let prefix = if cfg.share_update { "update".to_string() } else { format!("layer{l}.update") };
                mlp(&prefix, update_in, f, f, &mut push)
            })
            .collect();
        let decoder = mlp("decoder", f, f, cfg.dim, &mut push);
        Self {
            encoder,
            aggregators,
            updates,
            decoder,
            names,
            shapes,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    fn update(&self, layer: usize) -> MlpSlots {
        self.updates[layer.min(self.updates.len() - 1)]
    }
}

/// All learnable parameters of one planner.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannerWeights {
    pub config: PlannerConfig,
    pub tensors: Vec<Tensor>,
}

impl PlannerWeights {
    /// Glorot-uniform matrices and attention vectors, zero biases.
    pub fn init(config: &PlannerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout
            .shapes()
            .iter()
            .zip(layout.names())
            .map(|(shape, name)| {
                if name.ends_with(".b1") || name.ends_with(".b2") {
                    return Tensor::zeros(shape);
                }
                let (fan_in, fan_out) = if shape.len() == 2 { (shape[0], shape[1]) } else { (shape[0], 1) };
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(-limit..limit)).collect();
                Tensor::new(shape.clone(), data).expect("finite by construction")
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn zeros(config: &PlannerConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(config);
        Ok(Self {
            config: config.clone(),
            tensors: layout.shapes().iter().map(|s| Tensor::zeros(s)).collect(),
        })
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(&self.config)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Checks the tensor list against the layout implied by the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let layout = self.layout();
        if layout.len() != self.tensors.len() {
            return Err(Error::Config(format!(
                "weights hold {} tensors, config implies {}",
                self.tensors.len(),
                layout.len()
            )));
        }
        for ((t, shape), name) in self.tensors.iter().zip(layout.shapes()).zip(layout.names()) {
            if t.shape() != &shape[..] {
                return Err(Error::Config(format!(
                    "{name} has shape {:?}, config implies {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Relative displacement command for one robot, meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subgoal {
    pub displacement: Vec<f64>,
}

impl Subgoal {
    pub fn zero(dim: usize) -> Self {
        Self {
            displacement: vec![0.0; dim],
        }
    }

    pub fn norm(&self) -> f64 {
        world::norm(&self.displacement)
    }

    /// Absolute target reached from `from`.
    pub fn target_from(&self, from: &[f64]) -> Point {
        from.iter().zip(&self.displacement).map(|(p, d)| p + d).collect()
    }
}

/// Converts a decoder output to a displacement.
pub fn scale_output(normalized: &[f64], spatial_horizon: f64, mode: ClampMode) -> Subgoal {
    let n = world::norm(normalized);
    let factor = match mode {
        ClampMode::ScaleAndCap => spatial_horizon * if n > 1.0 { 1.0 / n } else { 1.0 },
        ClampMode::CapOnly => {
            if n > spatial_horizon {
                spatial_horizon / n
            } else {
                1.0
            }
        }
    };
    Subgoal {
        displacement: normalized.iter().map(|v| v * factor).collect(),
    }
}

/// Handles to the registered parameters of one tape.
pub struct TapeParams {
    vars: Vec<Var>,
    layout: ParamLayout,
    config: PlannerConfig,
}

impl TapeParams {
    /// Registers every weight tensor as a trainable parameter.
    pub fn register(tape: &mut Tape, weights: &PlannerWeights) -> Self {
        let vars = weights.tensors.iter().map(|t| tape.param(t.clone())).collect();
        Self {
            vars,
            layout: weights.layout(),
            config: weights.config.clone(),
        }
    }

    fn mlp(&self, tape: &mut Tape, slots: MlpSlots, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.vars[slots.w1()])?;
        let h = tape.add(h, self.vars[slots.b1()])?;
        let h = tape.leaky_relu(h, self.config.mlp_slope);
        let y = tape.matmul(h, self.vars[slots.w2()])?;
        tape.add(y, self.vars[slots.b2()])
    }

    /// `h⁰ = φ_enc(x)` for a `[R, input_width]` feature matrix.
    pub fn encode(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let width = tape.value(features).cols();
        if width != self.config.input_width() {
            return Err(Error::ShapeMismatch {
                op: "encode",
                left: vec![width],
                right: vec![self.config.input_width()],
            });
        }
        self.mlp(tape, self.layout.encoder, features)
    }

    /// One message-passing layer for `Q = self_rows.len()` query nodes.
    ///
    /// `h_all` holds every embedding the queries may read; `neighbors` lists, for each query in
    /// order, its `degree` neighbor rows of `h_all`. `h_prev` and `h_initial` are the queries' own
    /// current and initial embeddings (`[Q, F]`).
    #[allow(clippy::too_many_arguments)]
    pub fn layer(
        &self,
        tape: &mut Tape,
        layer: usize,
        h_all: Var,
        self_rows: &[usize],
        neighbors: &[usize],
        degree: usize,
        h_prev: Var,
        h_initial: Var,
    ) -> Result<Var> {
        let q = self_rows.len();
        let f = self.config.features;
        if neighbors.len() != q * degree {
            return Err(Error::InvalidArgument(format!(
                "{} neighbor indices for {q} queries of degree {degree}",
                neighbors.len()
            )));
        }
        let aggregate = if degree == 0 {
            tape.constant(Tensor::zeros(&[q, f]))
        } else if self.config.variant.uses_attention() {
            let mut heads = Vec::with_capacity(self.config.heads);
            for &(w, a) in &self.layout.aggregators[layer] {
                let a = a.expect("attention layout has attention vectors");
                let z = tape.matmul(h_all, self.vars[w])?;
                let coeffs = attention_coefficients(tape, z, self.vars[a], self_rows, neighbors, degree, self.config.attention_slope)?;
                heads.push(aggregate_head(tape, coeffs, z, neighbors)?);
            }
            combine_heads(tape, &heads)?
        } else {
            let (w, _) = self.layout.aggregators[layer][0];
            convolve(tape, h_all, self.vars[w], self_rows, neighbors, degree)?
        };
        let update = self.layout.update(layer);
        if self.config.variant.residual_update() {
            let delta = self.mlp(tape, update, aggregate)?;
            tape.add(h_prev, delta)
        } else {
            let joined = tape.concat(&[h_initial, aggregate])?;
            self.mlp(tape, update, joined)
        }
    }

    /// `tanh(φ_dec(h))`, the normalized subgoal in `(-1, 1)^n`.
    pub fn decode(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let y = self.mlp(tape, self.layout.decoder, h)?;
        Ok(tape.tanh(y))
    }

    /// Full forward over a batch of robots whose neighbor lists index into the same batch.
    /// Returns every layer's embeddings (`L + 1` handles) and the decoder output.
    pub fn forward(&self, tape: &mut Tape, features: Var, neighbors: &[usize], degree: usize) -> Result<(Vec<Var>, Var)> {
        let rows = tape.value(features).rows();
        let self_rows: Vec<usize> = (0..rows).collect();
        let h0 = self.encode(tape, features)?;
        let mut embeddings = vec![h0];
        let mut h = h0;
        for l in 0..self.config.layers {
            h = self.layer(tape, l, h, &self_rows, neighbors, degree, h, h0)?;
            embeddings.push(h);
        }
        let out = self.decode(tape, h)?;
        Ok((embeddings, out))
    }
}

/// Normalized attention coefficients `softmax_j(leaky_relu(a · [z_i ‖ z_j]))` over each query's
/// neighbors, `[Q, degree]`. `z` holds the transformed embeddings `W h` of all rows.
pub fn attention_coefficients(
    tape: &mut Tape,
    z: Var,
    attention: Var,
    self_rows: &[usize],
    neighbors: &[usize],
    degree: usize,
    slope: f64,
) -> Result<Var> {
    let f = tape.value(z).cols();
    let q = self_rows.len();
    let a = tape.reshape(attention, &[2 * f, 1])?;
    let a_self = tape.slice_rows(a, 0, f)?;
    let a_nbr = tape.slice_rows(a, f, 2 * f)?;
    let score_self = tape.matmul(z, a_self)?;
    let score_nbr = tape.matmul(z, a_nbr)?;
    let repeated: Vec<usize> = self_rows.iter().flat_map(|&s| std::iter::repeat_n(s, degree)).collect();
    let left = tape.gather_rows(score_self, &repeated)?;
    let right = tape.gather_rows(score_nbr, neighbors)?;
    let logits = tape.add(left, right)?;
    let logits = tape.leaky_relu(logits, slope);
    let logits = tape.reshape(logits, &[q, degree])?;
    tape.softmax(logits, 1)
}

/// `tanh(Σ_j c_ij z_j)` for coefficients `[Q, degree]`.
pub fn aggregate_head(tape: &mut Tape, coeffs: Var, z: Var, neighbors: &[usize]) -> Result<Var> {
    let values = tape.gather_rows(z, neighbors)?;
    let mixed = tape.weighted_rows(coeffs, values)?;
    Ok(tape.tanh(mixed))
}

/// Componentwise maximum over heads.
pub fn combine_heads(tape: &mut Tape, heads: &[Var]) -> Result<Var> {
    let first = heads
        .first()
        .ok_or_else(|| Error::InvalidArgument("no attention heads".into()))?;
    let (q, f) = (tape.value(*first).rows(), tape.value(*first).cols());
    let stacked = tape.concat(heads)?;
    let stacked = tape.reshape(stacked, &[q, heads.len(), f])?;
    tape.reduce_max(stacked, 1)
}

/// `tanh(W · mean(h_i, h_j…))` over each query's closed neighborhood, self first.
pub fn convolve(tape: &mut Tape, h_all: Var, w: Var, self_rows: &[usize], neighbors: &[usize], degree: usize) -> Result<Var> {
    let q = self_rows.len();
    let mut closed = Vec::with_capacity(q * (degree + 1));
    for (qi, &s) in self_rows.iter().enumerate() {
        closed.push(s);
        closed.extend_from_slice(&neighbors[qi * degree..(qi + 1) * degree]);
    }
    let rows = tape.gather_rows(h_all, &closed)?;
    let weights = tape.constant(Tensor::filled(&[q, degree + 1], 1.0 / (degree + 1) as f64));
    let mean = tape.weighted_rows(weights, rows)?;
    let z = tape.matmul(mean, w)?;
    Ok(tape.tanh(z))
}

/// Normalized feature rows for every robot, in robot order.
pub fn observation_features(robots: &[Point], goals: &[Point], env_size: f64, cfg: &PlannerConfig) -> Result<Tensor> {
    let rows = (0..robots.len())
        .map(|i| {
            let obs = world::sense_positions(robots, goals, i, cfg.goals_sensed, cfg.robots_sensed);
            world::normalize(&obs, env_size).map(|n| n.features)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

/// Flattened neighbor table with a uniform degree.
pub fn neighbor_table(adjacency: &AdjacencyGraph) -> Result<(Vec<usize>, usize)> {
    let degree = adjacency.degree();
    if adjacency.neighbors.iter().any(|n| n.len() != degree) {
        return Err(Error::InvalidArgument("neighbor lists must all have the same length".into()));
    }
    Ok((adjacency.neighbors.concat(), degree))
}

/// Several same-size scenes stacked into one disconnected graph.
#[derive(Debug, Clone)]
pub struct StackedGraphs {
    pub features: Tensor,
    pub neighbors: Vec<usize>,
    pub degree: usize,
    pub robots_per_graph: usize,
}

/// Stacks scenes whose robot counts agree; each scene's neighbor rows are offset into the stack.
pub fn stack_graphs(scenes: &[(&[Point], &[Point])], env_size: f64, cfg: &PlannerConfig) -> Result<StackedGraphs> {
    let n = scenes.first().map_or(0, |s| s.0.len());
    if scenes.iter().any(|s| s.0.len() != n) {
        return Err(Error::InvalidArgument("stacked scenes must have equal robot counts".into()));
    }
    let degree = cfg.degree(n);
    let width = cfg.input_width();
    let mut data = Vec::with_capacity(scenes.len() * n * width);
    let mut neighbors = Vec::with_capacity(scenes.len() * n * degree);
    for (g, (robots, goals)) in scenes.iter().enumerate() {
        data.extend_from_slice(observation_features(robots, goals, env_size, cfg)?.data());
        let adjacency = world::build_adjacency(robots, cfg.max_neighbors);
        for list in &adjacency.neighbors {
            neighbors.extend(list.iter().map(|j| g * n + j));
        }
    }
    Ok(StackedGraphs {
        features: Tensor::new(vec![scenes.len() * n, width], data)?,
        neighbors,
        degree,
        robots_per_graph: n,
    })
}

/// Decoder outputs for a stack, one row per robot in stacking order.
pub fn forward_stacked(stack: &StackedGraphs, weights: &PlannerWeights) -> Result<Tensor> {
    let mut tape = Tape::new();
    let params = TapeParams::register(&mut tape, weights);
    let x = tape.constant(stack.features.clone());
    let (_, out) = params.forward(&mut tape, x, &stack.neighbors, stack.degree)?;
    Ok(tape.value(out).clone())
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Decoder outputs in `(-1, 1)^n`, one per robot.
    pub normalized: Vec<Vec<f64>>,
    pub subgoals: Vec<Subgoal>,
    /// Embeddings `h⁰ … h^L`, each `[N, F]`.
    pub embeddings: Vec<Tensor>,
}

/// Centralized inference for every robot of a scene.
pub fn forward_positions(
    robots: &[Point],
    goals: &[Point],
    env_size: f64,
    adjacency: &AdjacencyGraph,
    weights: &PlannerWeights,
) -> Result<ForwardOutput> {
    weights.validate()?;
    if adjacency.len() != robots.len() {
        return Err(Error::InvalidArgument(format!(
            "adjacency has {} nodes for {} robots",
            adjacency.len(),
            robots.len()
        )));
    }
    let cfg = &weights.config;
    let features = observation_features(robots, goals, env_size, cfg)?;
    let (neighbors, degree) = neighbor_table(adjacency)?;
    let mut tape = Tape::new();
    let params = TapeParams::register(&mut tape, weights);
    let x = tape.constant(features);
    let (embeddings, out) = params.forward(&mut tape, x, &neighbors, degree)?;
    let out_t = tape.value(out);
    let normalized: Vec<Vec<f64>> = (0..robots.len()).map(|i| out_t.row(i).to_vec()).collect();
    let subgoals = normalized
        .iter()
        .map(|s| scale_output(s, cfg.spatial_horizon, cfg.clamp_mode))
        .collect();
    Ok(ForwardOutput {
        normalized,
        subgoals,
        embeddings: embeddings.into_iter().map(|v| tape.value(v).clone()).collect(),
    })
}

pub fn forward(scenario: &Scenario, adjacency: &AdjacencyGraph, weights: &PlannerWeights) -> Result<ForwardOutput> {
    forward_positions(&scenario.robots, &scenario.goals, scenario.env_size, adjacency, weights)
}

/// Builds the communication graph from the config and runs [`forward`].
pub fn plan(robots: &[Point], goals: &[Point], env_size: f64, weights: &PlannerWeights) -> Result<ForwardOutput> {
    let adjacency = world::build_adjacency(robots, weights.config.max_neighbors);
    forward_positions(robots, goals, env_size, &adjacency, weights)
}
