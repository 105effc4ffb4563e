//! Decentralized execution: per-robot message passing over a simulated network, and the closed
//! loop that couples it with the controllers.

pub mod des;
pub mod network;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::controller::{integrate, Controller, ControllerConfig, RobotState, StepOutcome, TrajectoryLog, Tracker};
use crate::error::{Error, Result};
use crate::planner::{self, PlannerWeights, Subgoal, TapeParams};
use crate::tensor::{Tape, Tensor};
use crate::world::{self, CoverageReport, Point, Scenario};

pub use des::EventQueue;
pub use network::{DelayRule, LinkDelay, MessageKey, NetworkModel, MIN_TIMEOUT};

/// Embedding `h^layer` broadcast by `sender` during `round`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMessage {
    pub sender: usize,
    pub round: u64,
    pub layer: usize,
    pub payload: Vec<f64>,
    pub send_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Encoding,
    Waiting(usize),
    Updating(usize),
    Decoding,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub t: f64,
    #[serde(rename = "type")]
    pub kind: String,
    pub sender: Option<usize>,
    pub receiver: Option<usize>,
    pub round: u64,
    pub layer: Option<usize>,
}

impl TraceEvent {
    fn new(t: f64, kind: &str, sender: Option<usize>, receiver: Option<usize>, round: u64, layer: Option<usize>) -> Self {
        Self {
            t,
            kind: kind.to_string(),
            sender,
            receiver,
            round,
            layer,
        }
    }
}

/// One JSON object per line.
pub fn trace_jsonl(events: &[TraceEvent]) -> Result<String> {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
struct CacheEntry {
    round: u64,
    arrival: f64,
    payload: Vec<f64>,
}

const CACHE_DEPTH: usize = 8;

/// Embeddings received in earlier rounds, kept per receiver for stale substitution.
#[derive(Debug, Clone, Default)]
pub struct RuntimeState {
    caches: Vec<BTreeMap<(usize, usize), Vec<CacheEntry>>>,
}

impl RuntimeState {
    pub fn new(robots: usize) -> Self {
        Self {
            caches: vec![BTreeMap::new(); robots],
        }
    }

    fn insert(&mut self, receiver: usize, sender: usize, layer: usize, entry: CacheEntry) {
        let list = self.caches[receiver].entry((sender, layer)).or_default();
        list.push(entry);
        if list.len() > CACHE_DEPTH {
            list.remove(0);
        }
    }

    /// Latest embedding from a round before `round` that had arrived by `now`.
    pub fn stale(&self, receiver: usize, sender: usize, layer: usize, round: u64, now: f64) -> Option<&[f64]> {
        self.caches
            .get(receiver)?
            .get(&(sender, layer))?
            .iter()
            .filter(|e| e.round < round && e.arrival <= now)
            .max_by(|a, b| a.round.cmp(&b.round).then(a.arrival.total_cmp(&b.arrival)))
            .map(|e| e.payload.as_slice())
    }
}

/// Per-robot evaluation of the planner, one stage at a time.
struct NodeModel<'a> {
    weights: &'a PlannerWeights,
}

impl NodeModel<'_> {
    fn row(tape: &mut Tape, data: &[f64]) -> Result<crate::tensor::Var> {
        Ok(tape.constant(Tensor::new(vec![1, data.len()], data.to_vec())?))
    }

    fn encode(&self, features: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let params = TapeParams::register(&mut tape, self.weights);
        let x = Self::row(&mut tape, features)?;
        let h = params.encode(&mut tape, x)?;
        Ok(tape.value(h).data().to_vec())
    }

    fn layer(&self, layer: usize, own: &[f64], received: &[Vec<f64>], initial: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let params = TapeParams::register(&mut tape, self.weights);
        let mut rows = Vec::with_capacity(received.len() + 1);
        rows.push(own.to_vec());
        rows.extend(received.iter().cloned());
        let h_all = tape.constant(Tensor::from_rows(&rows)?);
        let h_prev = Self::row(&mut tape, own)?;
        let h_initial = Self::row(&mut tape, initial)?;
        let neighbors: Vec<usize> = (1..=received.len()).collect();
        let h = params.layer(&mut tape, layer, h_all, &[0], &neighbors, received.len(), h_prev, h_initial)?;
        Ok(tape.value(h).data().to_vec())
    }

    fn decode(&self, h: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let params = TapeParams::register(&mut tape, self.weights);
        let x = Self::row(&mut tape, h)?;
        let y = params.decode(&mut tape, x)?;
        Ok(tape.value(y).data().to_vec())
    }
}

#[derive(Debug, Clone)]
pub struct RobotNode {
    pub id: usize,
    pub neighbors: Vec<usize>,
    pub audience: Vec<usize>,
    pub phase: Phase,
    /// `h⁰ … h^l` computed so far.
    pub embeddings: Vec<Vec<f64>>,
    inbox: BTreeMap<(usize, usize), Vec<f64>>,
    pending: Vec<f64>,
    wait_started: f64,
    wait_token: u64,
    pub waits: Vec<f64>,
    pub substitutions: usize,
    pub output: Option<Vec<f64>>,
    pub completion: Option<f64>,
}

impl RobotNode {
    fn new(id: usize, neighbors: Vec<usize>, audience: Vec<usize>) -> Self {
        Self {
            id,
            neighbors,
            audience,
            phase: Phase::Encoding,
            embeddings: Vec::new(),
            inbox: BTreeMap::new(),
            pending: Vec::new(),
            wait_started: 0.0,
            wait_token: 0,
            waits: Vec::new(),
            substitutions: 0,
            output: None,
            completion: None,
        }
    }

    fn has_all(&self, layer: usize) -> bool {
        self.neighbors.iter().all(|j| self.inbox.contains_key(&(layer, *j)))
    }
}

#[derive(Debug)]
enum Event {
    Encoded(usize),
    Deliver { receiver: usize, message: LayerMessage },
    Timeout { node: usize, layer: usize, token: u64 },
    Updated { node: usize, layer: usize },
    Decoded(usize),
}

#[derive(Debug, Clone)]
pub struct CycleResult {
    pub round: u64,
    pub start: f64,
    pub normalized: Vec<Vec<f64>>,
    pub subgoals: Vec<Subgoal>,
    /// Virtual time each robot finished decoding.
    pub completion: Vec<f64>,
    /// `[robot][layer]` time spent waiting for neighbor embeddings.
    pub waits: Vec<Vec<f64>>,
    /// Virtual compute time per robot.
    pub compute: Vec<f64>,
    pub embeddings: Vec<Vec<Vec<f64>>>,
    pub timeouts: usize,
    pub substitutions: usize,
    pub sent: usize,
    pub dropped: usize,
    pub trace: Vec<TraceEvent>,
}

struct Cycle<'a> {
    model: NodeModel<'a>,
    network: &'a NetworkModel,
    layers: usize,
    round: u64,
    timeout: f64,
    nodes: Vec<RobotNode>,
    queue: EventQueue<Event>,
    rng: rand_chacha::ChaCha8Rng,
    trace: Vec<TraceEvent>,
    sent: usize,
    dropped: usize,
    timeouts: usize,
}

impl Cycle<'_> {
    fn broadcast(&mut self, i: usize, layer: usize, t: f64) {
        let payload = self.nodes[i].embeddings[layer].clone();
        for r in self.nodes[i].audience.clone() {
            let key = MessageKey {
                sender: i,
                receiver: r,
                round: self.round,
                layer,
            };
            self.sent += 1;
            self.trace.push(TraceEvent::new(t, "send", Some(i), Some(r), self.round, Some(layer)));
            if self.network.dropped(&key, &mut self.rng) {
                self.dropped += 1;
                self.trace.push(TraceEvent::new(t, "drop", Some(i), Some(r), self.round, Some(layer)));
                continue;
            }
            let message = LayerMessage {
                sender: i,
                round: self.round,
                layer,
                payload: payload.clone(),
                send_time: t,
            };
            self.queue.schedule(t + self.network.link_delay(i, r), Event::Deliver { receiver: r, message });
        }
    }

    fn enter_wait(&mut self, i: usize, layer: usize, t: f64) -> Result<()> {
        let node = &mut self.nodes[i];
        node.phase = Phase::Waiting(layer);
        node.wait_started = t;
        node.wait_token += 1;
        let token = node.wait_token;
        if node.has_all(layer) {
            return self.complete_layer(i, layer, t);
        }
        self.queue.schedule(t + self.timeout, Event::Timeout { node: i, layer, token });
        Ok(())
    }

    fn complete_layer(&mut self, i: usize, layer: usize, t: f64) -> Result<()> {
        let node = &mut self.nodes[i];
        node.waits.push(t - node.wait_started);
        let received: Vec<Vec<f64>> = node
            .neighbors
            .iter()
            .map(|j| node.inbox[&(layer, *j)].clone())
            .collect();
        node.pending = self.model.layer(layer, &node.embeddings[layer], &received, &node.embeddings[0])?;
        node.phase = Phase::Updating(layer);
        self.queue.schedule(t + self.network.compute_time, Event::Updated { node: i, layer });
        Ok(())
    }

    fn handle(&mut self, t: f64, event: Event, state: &mut RuntimeState) -> Result<()> {
        match event {
            Event::Encoded(i) => {
                let h0 = std::mem::take(&mut self.nodes[i].pending);
                self.nodes[i].embeddings.push(h0);
                self.trace.push(TraceEvent::new(t, "layer", Some(i), None, self.round, Some(0)));
                if self.layers == 0 {
                    return self.start_decode(i, t);
                }
                self.broadcast(i, 0, t);
                self.enter_wait(i, 0, t)?;
            }
            Event::Deliver { receiver, message } => {
                let (sender, layer) = (message.sender, message.layer);
                self.trace.push(TraceEvent::new(t, "deliver", Some(sender), Some(receiver), message.round, Some(layer)));
                state.insert(
                    receiver,
                    sender,
                    layer,
                    CacheEntry {
                        round: message.round,
                        arrival: t,
                        payload: message.payload.clone(),
                    },
                );
                let node = &mut self.nodes[receiver];
                let open = !matches!(node.phase, Phase::Decoding | Phase::Done) && layer >= node.waits.len();
                if open && node.neighbors.contains(&sender) {
                    node.inbox.insert((layer, sender), message.payload);
                    if node.phase == Phase::Waiting(layer) && node.has_all(layer) {
                        self.complete_layer(receiver, layer, t)?;
                    }
                }
            }
            Event::Timeout { node: i, layer, token } => {
                let node = &self.nodes[i];
                if node.phase != Phase::Waiting(layer) || node.wait_token != token {
                    return Ok(());
                }
                self.timeouts += 1;
                let width = node.embeddings[0].len();
                let missing: Vec<usize> = node
                    .neighbors
                    .iter()
                    .copied()
                    .filter(|j| !node.inbox.contains_key(&(layer, *j)))
                    .collect();
                for j in missing {
                    let stale = state
                        .stale(i, j, layer, self.round, t)
                        .map_or_else(|| vec![0.0; width], <[f64]>::to_vec);
                    self.trace.push(TraceEvent::new(t, "timeout", Some(j), Some(i), self.round, Some(layer)));
                    let node = &mut self.nodes[i];
                    node.substitutions += 1;
                    node.inbox.insert((layer, j), stale);
                }
                self.complete_layer(i, layer, t)?;
            }
            Event::Updated { node: i, layer } => {
                let h = std::mem::take(&mut self.nodes[i].pending);
                self.nodes[i].embeddings.push(h);
                self.trace.push(TraceEvent::new(t, "layer", Some(i), None, self.round, Some(layer + 1)));
                if layer + 1 < self.layers {
                    self.broadcast(i, layer + 1, t);
                    self.enter_wait(i, layer + 1, t)?;
                } else {
                    self.start_decode(i, t)?;
                }
            }
            Event::Decoded(i) => {
                let node = &mut self.nodes[i];
                node.output = Some(std::mem::take(&mut node.pending));
                node.completion = Some(t);
                node.phase = Phase::Done;
                self.trace.push(TraceEvent::new(t, "decoded", Some(i), None, self.round, None));
            }
        }
        Ok(())
    }

    fn start_decode(&mut self, i: usize, t: f64) -> Result<()> {
        let node = &mut self.nodes[i];
        node.pending = self.model.decode(node.embeddings.last().expect("encoded"))?;
        node.phase = Phase::Decoding;
        self.queue.schedule(t + self.network.compute_time, Event::Decoded(i));
        Ok(())
    }
}

/// One decentralized replan over a snapshot of robot positions, starting at `start`.
#[allow(clippy::too_many_arguments)]
pub fn run_replan_cycle(
    robots: &[Point],
    goals: &[Point],
    env_size: f64,
    weights: &PlannerWeights,
    network: &NetworkModel,
    round: u64,
    start: f64,
    state: &mut RuntimeState,
) -> Result<CycleResult> {
    weights.validate()?;
    network.validate()?;
    let n = robots.len();
    if state.caches.len() != n {
        return Err(Error::InvalidArgument(format!("runtime state sized for {} robots, got {n}", state.caches.len())));
    }
    let cfg = &weights.config;
    let adjacency = world::build_adjacency(robots, cfg.max_neighbors);
    let features = planner::observation_features(robots, goals, env_size, cfg)?;
    let nodes: Vec<RobotNode> = (0..n)
        .map(|i| RobotNode::new(i, adjacency.neighbors[i].clone(), adjacency.audience(i)))
        .collect();
    let mut cycle = Cycle {
        model: NodeModel { weights },
        network,
        layers: cfg.layers,
        round,
        timeout: network.effective_timeout(),
        nodes,
        queue: EventQueue::new(),
        rng: network.round_rng(round),
        trace: Vec::new(),
        sent: 0,
        dropped: 0,
        timeouts: 0,
    };
    for i in 0..n {
        cycle.trace.push(TraceEvent::new(start, "snapshot", Some(i), None, round, None));
        cycle.nodes[i].pending = cycle.model.encode(features.row(i))?;
        cycle.queue.schedule(start + network.compute_time, Event::Encoded(i));
    }
    while let Some((t, event)) = cycle.queue.advance() {
        cycle.handle(t, event, state)?;
    }
    let mut normalized = Vec::with_capacity(n);
    let mut completion = Vec::with_capacity(n);
    let mut waits = Vec::with_capacity(n);
    let mut embeddings = Vec::with_capacity(n);
    let mut substitutions = 0;
    for node in cycle.nodes {
        let (out, done) = node
            .output
            .zip(node.completion)
            .ok_or_else(|| Error::Solver(format!("robot {} never finished round {round}", node.id)))?;
        normalized.push(out);
        completion.push(done);
        waits.push(node.waits);
        embeddings.push(node.embeddings);
        substitutions += node.substitutions;
    }
    let subgoals = normalized
        .iter()
        .map(|s| planner::scale_output(s, cfg.spatial_horizon, cfg.clamp_mode))
        .collect();
    let compute = vec![network.compute_time * (cfg.layers + 2) as f64; n];
    Ok(CycleResult {
        round,
        start,
        normalized,
        subgoals,
        completion,
        waits,
        compute,
        embeddings,
        timeouts: cycle.timeouts,
        substitutions,
        sent: cycle.sent,
        dropped: cycle.dropped,
        trace: cycle.trace,
    })
}

/// Where an activated subgoal is measured from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    /// The robot's position when the subgoal arrives.
    #[default]
    Activation,
    /// The position in the snapshot the planner saw.
    Snapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClosedLoopConfig {
    pub plan_period: f64,
    pub duration: f64,
    pub controller: ControllerConfig,
    pub network: NetworkModel,
    pub anchor: Anchor,
    pub coverage_threshold: f64,
    pub stop_on_coverage: bool,
    pub record_trace: bool,
}

impl Default for ClosedLoopConfig {
    fn default() -> Self {
        Self {
            plan_period: 0.5,
            duration: 60.0,
            controller: ControllerConfig::default(),
            network: NetworkModel::default(),
            anchor: Anchor::Activation,
            coverage_threshold: world::DEFAULT_COVERAGE_THRESHOLD,
            stop_on_coverage: false,
            record_trace: false,
        }
    }
}

impl ClosedLoopConfig {
    pub fn validate(&self) -> Result<()> {
        self.controller.validate()?;
        self.network.validate()?;
        if !(self.duration > 0.0) || !(self.coverage_threshold > 0.0) {
            return Err(Error::Config("duration and coverage_threshold must be positive".into()));
        }
        let ratio = self.plan_period / self.controller.dt;
        if !(ratio >= 1.0) || (ratio - ratio.round()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "plan_period {} must be a positive multiple of the control period {}",
                self.plan_period, self.controller.dt
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct PendingSubgoal {
    round: u64,
    robot: usize,
    ready: f64,
    displacement: Vec<f64>,
    snapshot: Point,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Activation {
    pub round: u64,
    pub robot: usize,
    pub snapshot_time: f64,
    pub ready: f64,
    pub activated: f64,
}

#[derive(Debug, Clone)]
pub struct ClosedLoopResult {
    pub log: TrajectoryLog,
    pub coverage: CoverageReport,
    pub final_states: Vec<RobotState>,
    pub activations: Vec<Activation>,
    pub cycles: Vec<CycleSummary>,
    pub trace: Vec<TraceEvent>,
}

/// Timing of one replan without the per-event trace.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleSummary {
    pub round: u64,
    pub start: f64,
    pub completion: Vec<f64>,
    pub waits: Vec<Vec<f64>>,
    pub compute: Vec<f64>,
    pub timeouts: usize,
    pub substitutions: usize,
}

impl From<&CycleResult> for CycleSummary {
    fn from(c: &CycleResult) -> Self {
        Self {
            round: c.round,
            start: c.start,
            completion: c.completion.clone(),
            waits: c.waits.clone(),
            compute: c.compute.clone(),
            timeouts: c.timeouts,
            substitutions: c.substitutions,
        }
    }
}

const ACTIVATION_EPS: f64 = 1e-9;

/// Planner, network and controllers in lockstep at the control rate. A replan starts every
/// `plan_period`; each robot switches to its new subgoal once its own inference completes.
pub fn closed_loop(scenario: &Scenario, weights: &PlannerWeights, cfg: &ClosedLoopConfig) -> Result<ClosedLoopResult> {
    scenario.validate()?;
    cfg.validate()?;
    let n = scenario.num_robots();
    let dt = cfg.controller.dt;
    let controller = Controller::new(cfg.controller.clone(), scenario.dim)?;
    let plan_every = (cfg.plan_period / dt).round() as usize;
    let ticks = (cfg.duration / dt).round() as usize;
    let mut states: Vec<RobotState> = scenario.robots.iter().map(|p| RobotState::at_rest(p.clone())).collect();
    let mut trackers: Vec<Tracker> = scenario.robots.iter().map(|p| Tracker::idle(p)).collect();
    let mut runtime = RuntimeState::new(n);
    let mut pending: Vec<PendingSubgoal> = Vec::new();
    let mut log = TrajectoryLog::new();
    let mut activations = Vec::new();
    let mut cycles = Vec::new();
    let mut trace = Vec::new();
    let mut coverage_time = None;
    let mut others: Vec<RobotState> = Vec::with_capacity(n);
    for tick in 0..=ticks {
        let now = tick as f64 * dt;
        let positions: Vec<Point> = states.iter().map(|s| s.position.clone()).collect();
        if coverage_time.is_none() && world::covered_goals(&positions, &scenario.goals, cfg.coverage_threshold).iter().all(|&c| c) {
            coverage_time = Some(now);
        }
        if tick == ticks || (cfg.stop_on_coverage && coverage_time.is_some()) {
            break;
        }
        if tick % plan_every == 0 {
            let round = (tick / plan_every) as u64;
            let cycle = run_replan_cycle(&positions, &scenario.goals, scenario.env_size, weights, &cfg.network, round, now, &mut runtime)?;
            for i in 0..n {
                pending.push(PendingSubgoal {
                    round,
                    robot: i,
                    ready: cycle.completion[i],
                    displacement: cycle.subgoals[i].displacement.clone(),
                    snapshot: positions[i].clone(),
                });
            }
            cycles.push(CycleSummary::from(&cycle));
            if cfg.record_trace {
                trace.extend(cycle.trace);
            }
        }
        let (due, later): (Vec<_>, Vec<_>) = pending.drain(..).partition(|p| p.ready <= now + ACTIVATION_EPS);
        pending = later;
        for p in due {
            let anchor = match cfg.anchor {
                Anchor::Activation => &states[p.robot].position,
                Anchor::Snapshot => &p.snapshot,
            };
            let target: Point = anchor.iter().zip(&p.displacement).map(|(a, d)| a + d).collect();
            trackers[p.robot] = Tracker::toward(&cfg.controller, &states[p.robot], &target, now);
            if cfg.record_trace {
                trace.push(TraceEvent::new(now, "activate", Some(p.robot), None, p.round, None));
            }
            activations.push(Activation {
                round: p.round,
                robot: p.robot,
                snapshot_time: p.round as f64 * cfg.plan_period,
                ready: p.ready,
                activated: now,
            });
        }
        let mut outcomes: Vec<StepOutcome> = Vec::with_capacity(n);
        for i in 0..n {
            others.clear();
            others.extend(states.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, s)| s.clone()));
            outcomes.push(controller.track(&states[i], &trackers[i], now, &others)?);
        }
        log.record(now, &states, &outcomes);
        states = states.iter().zip(&outcomes).map(|(s, o)| integrate(s, &o.acceleration, dt)).collect();
    }
    log.record_final(&states);
    let positions: Vec<Point> = states.iter().map(|s| s.position.clone()).collect();
    let mut coverage = world::coverage(&positions, &scenario.goals, cfg.coverage_threshold)?;
    coverage.coverage_time = coverage_time;
    Ok(ClosedLoopResult {
        log,
        coverage,
        final_states: states,
        activations,
        cycles,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub robot: usize,
    pub inference: f64,
    pub layer_delays: Vec<f64>,
    pub total: f64,
}

/// Per-robot virtual times averaged over cycles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub rows: Vec<TimingRow>,
}

pub fn timing_report(cycles: &[CycleSummary]) -> Result<TimingReport> {
    let first = cycles.first().ok_or_else(|| Error::InvalidArgument("no cycles to report".into()))?;
    let n = first.completion.len();
    let layers = first.waits.first().map_or(0, Vec::len);
    let count = cycles.len() as f64;
    let mut rows: Vec<TimingRow> = (0..n)
        .map(|robot| TimingRow {
            robot,
            inference: 0.0,
            layer_delays: vec![0.0; layers],
            total: 0.0,
        })
        .collect();
    for c in cycles {
        if c.completion.len() != n {
            return Err(Error::InvalidArgument("cycles disagree on robot count".into()));
        }
        for (i, row) in rows.iter_mut().enumerate() {
            row.inference += c.compute[i] / count;
            row.total += (c.completion[i] - c.start) / count;
            for (acc, w) in row.layer_delays.iter_mut().zip(&c.waits[i]) {
                *acc += w / count;
            }
        }
    }
    Ok(TimingReport { rows })
}

impl TimingReport {
    pub fn to_csv(&self) -> String {
        let layers = self.rows.first().map_or(0, |r| r.layer_delays.len());
        let mut out = String::from("robot,inference_s");
        for l in 0..layers {
            let _ = write!(out, ",layer{}_delay_s", l + 1);
        }
        out.push_str(",total_s\n");
        for r in &self.rows {
            let _ = write!(out, "{},{}", r.robot, r.inference);
            for d in &r.layer_delays {
                let _ = write!(out, ",{d}");
            }
            let _ = writeln!(out, ",{}", r.total);
        }
        out
    }
}
