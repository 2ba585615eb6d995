//! Dual functionals and the equilibrium-price solver.
//!
//! The dual objective is `Xi(p) + p.M` with `Xi` either the free max
//! functional or its nonnegative clipping. The solver dispatches on the
//! saturation regime: saturated instances are minimized over the sum-zero
//! hyperplane, under-saturated ones gain a zero-wisdom null agent with the
//! slack capacity and a pinned price, over-saturated ones minimize the
//! clipped functional over nonnegative prices.
//!
//! The objective is convex piecewise linear with exact, cheap subgradients,
//! so the solver alternates exact coordinate line searches (each coordinate
//! restriction is a weighted-quantile problem) with projected subgradient
//! escape steps, and certifies optimality by checking that the tie mass at
//! the candidate prices can be routed to close every capacity exactly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measure::{CapacityVector, ProblemInstance, RegimeTag, WisdomMatrix};
use crate::values::{point_options, Partition};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum XiVariant {
    /// `max_i [psi_i - p_i]_+` — opting out is allowed.
    Clipped,
    /// `max_i [psi_i - p_i]` — every point is served.
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TieRule {
    /// Deterministic: the tied agent with the lowest index takes the mass.
    LowestIndex,
    /// Equal split across tied options.
    ProportionalSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Normalization {
    /// Prices sum to zero (saturated-regime convention).
    SumZero,
    /// Shifted so the least-served consumer is exactly indifferent.
    MaxShift,
    /// All prices nonnegative (over-saturated regime).
    NonNegative,
    Raw,
}

/// One price per agent plus the convention it is reported under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceVector<T> {
    pub prices: Vec<T>,
    pub normalization: Normalization,
}

impl<T: Scalar> PriceVector<T> {
    pub fn raw(prices: Vec<T>) -> Self {
        Self {
            prices,
            normalization: Normalization::Raw,
        }
    }
}

/// Solver outcome: prices, dual value, capacity residuals and diagnostics.
///
/// In the over-saturated regime `residuals` carries the effective capacities
/// `m_hat_i = min(mass(A_i), M_i)` instead of capacity deficits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualReport<T> {
    #[serde(flatten)]
    pub price: PriceVector<T>,
    pub dual_value: T,
    #[serde(rename = "residuals")]
    pub subgradient_residual: Vec<T>,
    pub iterations: usize,
    pub tie_mass: T,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions<T> {
    /// Capacity residual target, relative to total mass.
    pub tolerance: T,
    pub max_iterations: usize,
    pub tie_rule: TieRule,
}

impl<T: Scalar> Default for SolveOptions<T> {
    fn default() -> Self {
        Self {
            tolerance: T::c(1e-8),
            max_iterations: 100_000,
            tie_rule: TieRule::LowestIndex,
        }
    }
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("price vector has {got} entries, instance has {want} agents")]
    DimensionMismatch { got: usize, want: usize },
}

/// Evaluates the chosen Xi functional at prices `p`.
pub fn eval_xi<T: Scalar>(instance: &ProblemInstance<T>, p: &[T], variant: XiVariant) -> T {
    assert_eq!(p.len(), instance.agents());
    let mut acc = T::zero();
    for x in 0..instance.points() {
        let mut best = T::neg_infinity();
        for i in 0..instance.agents() {
            let u = instance.wisdoms.at(i, x) - p[i];
            if u > best {
                best = u;
            }
        }
        if variant == XiVariant::Clipped && best < T::zero() {
            best = T::zero();
        }
        acc = acc + instance.weight(x) * best;
    }
    acc
}

/// A subgradient of the chosen Xi variant: `g_i = -mass assigned to agent i`
/// under the argmax rule, ties resolved per `tie_rule`. With the clipped
/// variant, mass whose clipped max is zero is assigned to no agent.
pub fn subgradient_xi<T: Scalar>(
    instance: &ProblemInstance<T>,
    p: &[T],
    variant: XiVariant,
    tie_rule: TieRule,
) -> Vec<T> {
    let part = crate::values::extract_partition_banded(instance, p, variant, tie_rule, T::c(1e-12));
    (0..instance.agents()).map(|i| -part.cell_masses[i]).collect()
}

/// Largest uniform price shift keeping everyone served: gamma_bar =
/// min over points of max_i (psi_i - p_i). After the shift the opt-out set
/// touches the boundary: min_x max_i (psi_i - p_i - gamma_bar) = 0.
pub fn normalize_price<T: Scalar>(instance: &ProblemInstance<T>, p: &PriceVector<T>) -> PriceVector<T> {
    let gamma = (0..instance.points())
        .map(|x| {
            (0..instance.agents())
                .map(|i| instance.wisdoms.at(i, x) - p.prices[i])
                .fold(T::neg_infinity(), T::max)
        })
        .fold(T::infinity(), T::min);
    PriceVector {
        prices: p.prices.iter().map(|&pi| pi + gamma).collect(),
        normalization: Normalization::MaxShift,
    }
}

// ---------------------------------------------------------------------------
// Max-flow on small real-capacity networks (tie-mass routing)
// ---------------------------------------------------------------------------

struct FlowNet<T> {
    adj: Vec<Vec<usize>>,
    to: Vec<usize>,
    cap: Vec<T>,
}

impl<T: Scalar> FlowNet<T> {
    fn new(nodes: usize) -> Self {
        Self {
            adj: vec![Vec::new(); nodes],
            to: Vec::new(),
            cap: Vec::new(),
        }
    }

    fn add_edge(&mut self, u: usize, v: usize, c: T) -> usize {
        let id = self.to.len();
        self.adj[u].push(id);
        self.to.push(v);
        self.cap.push(c);
        self.adj[v].push(id + 1);
        self.to.push(u);
        self.cap.push(T::zero());
        id
    }

    /// Flow pushed through forward edge `id` (capacity accumulated on the
    /// reverse edge).
    fn flow(&self, id: usize) -> T {
        self.cap[id ^ 1]
    }

    fn max_flow(&mut self, s: usize, t: usize, eps: T) -> T {
        let mut total = T::zero();
        loop {
            // BFS for an augmenting path with residual capacity above eps.
            let mut prev_edge = vec![usize::MAX; self.adj.len()];
            let mut visited = vec![false; self.adj.len()];
            visited[s] = true;
            let mut queue = std::collections::VecDeque::from([s]);
            while let Some(u) = queue.pop_front() {
                if u == t {
                    break;
                }
                for &e in &self.adj[u] {
                    let v = self.to[e];
                    if !visited[v] && self.cap[e] > eps {
                        visited[v] = true;
                        prev_edge[v] = e;
                        queue.push_back(v);
                    }
                }
            }
            if !visited[t] {
                return total;
            }
            let mut bottleneck = T::infinity();
            let mut v = t;
            while v != s {
                let e = prev_edge[v];
                bottleneck = bottleneck.min(self.cap[e]);
                v = self.to[e ^ 1];
            }
            let mut v = t;
            while v != s {
                let e = prev_edge[v];
                self.cap[e] = self.cap[e] - bottleneck;
                self.cap[e ^ 1] = self.cap[e ^ 1] + bottleneck;
                v = self.to[e ^ 1];
            }
            total = total + bottleneck;
        }
    }
}

// ---------------------------------------------------------------------------
// Capacity closure: optimality certificate + partition repair
// ---------------------------------------------------------------------------

struct Closure<T> {
    /// n x (A+1) working assignment; last column is opt-out.
    assignment: Vec<Vec<T>>,
    masses: Vec<T>,
    tie_mass: T,
    tie_points: Vec<usize>,
    /// Signed capacity deficit `M_i - mass_i` per working agent.
    residuals: Vec<T>,
    converged: bool,
}

/// Routes tie-point mass so every capacity closes exactly, if possible.
///
/// Strict-argmax points are assigned outright. Tie points feed a bipartite
/// flow network whose sinks are the remaining capacity targets; equality
/// targets (all agents in S/US, positively priced agents in OS) must be
/// saturated for the certificate to hold. Leftover tie mass is dumped on the
/// lowest-index option and shows up as a residual.
fn close_capacities<T: Scalar>(
    instance: &ProblemInstance<T>,
    p: &[T],
    variant: XiVariant,
    capacities: &[T],
    band: T,
    mass_tol: T,
    nonneg_prices: bool,
) -> Closure<T> {
    let n = instance.points();
    let agents = instance.agents();
    let p_tol = band;

    let mut assignment = vec![vec![T::zero(); agents + 1]; n];
    let mut strict = vec![T::zero(); agents + 1];
    let mut ties: Vec<(usize, Vec<usize>, bool)> = Vec::new();
    let mut tie_mass = T::zero();

    for x in 0..n {
        let utilities: Vec<T> = (0..agents)
            .map(|i| instance.wisdoms.at(i, x) - p[i])
            .collect();
        let (tied, opt_out) = point_options(&utilities, variant, band);
        let options = tied.len() + usize::from(opt_out);
        let w = instance.weight(x);
        if options <= 1 {
            if let Some(&i) = tied.first() {
                assignment[x][i] = w;
                strict[i] = strict[i] + w;
            } else {
                assignment[x][agents] = w;
                strict[agents] = strict[agents] + w;
            }
        } else {
            tie_mass = tie_mass + w;
            ties.push((x, tied, opt_out));
        }
    }

    // Per-agent sink targets. `equality[i]` marks capacities that must bind.
    let mut target = vec![T::zero(); agents];
    let mut equality = vec![true; agents];
    for i in 0..agents {
        target[i] = (capacities[i] - strict[i]).max(T::zero());
        if nonneg_prices && p[i] <= p_tol {
            equality[i] = false;
        }
    }

    if !ties.is_empty() {
        // Nodes: source, one per tie point, one per agent, opt-out, sink.
        let source = 0;
        let point_base = 1;
        let agent_base = point_base + ties.len();
        let optout_node = agent_base + agents;
        let sink = optout_node + 1;
        let mut net = FlowNet::new(sink + 1);
        let eps = T::c(1e-15) * (T::one() + instance.total_mass());

        let mut point_edges: Vec<Vec<(usize, usize)>> = Vec::with_capacity(ties.len());
        for (k, (x, tied, opt_out)) in ties.iter().enumerate() {
            net.add_edge(source, point_base + k, instance.weight(*x));
            let mut edges = Vec::new();
            for &i in tied {
                let id = net.add_edge(point_base + k, agent_base + i, T::infinity());
                edges.push((i, id));
            }
            if *opt_out {
                let id = net.add_edge(point_base + k, optout_node, T::infinity());
                edges.push((agents, id));
            }
            point_edges.push(edges);
        }
        // Two-phase routing: saturate the binding capacities first, so slack
        // agents and the opt-out cell cannot absorb tie mass an equality
        // target needs. Later augmentations never reduce a sink edge's
        // inflow, so phase-one allocations survive.
        let mut sink_edges = vec![usize::MAX; agents];
        for i in 0..agents {
            if equality[i] && target[i] > T::zero() {
                sink_edges[i] = net.add_edge(agent_base + i, sink, target[i]);
            }
        }
        net.max_flow(source, sink, eps);
        for i in 0..agents {
            if !equality[i] && target[i] > T::zero() {
                sink_edges[i] = net.add_edge(agent_base + i, sink, target[i]);
            }
        }
        net.add_edge(optout_node, sink, T::infinity());
        net.max_flow(source, sink, eps);

        for (k, (x, _, _)) in ties.iter().enumerate() {
            let mut shipped = T::zero();
            for &(col, id) in &point_edges[k] {
                let f = net.flow(id);
                if f > T::zero() {
                    assignment[*x][col] = assignment[*x][col] + f;
                    shipped = shipped + f;
                }
            }
            let leftover = instance.weight(*x) - shipped;
            if leftover > eps {
                // No room anywhere: dump on the first option, surfaces as a
                // residual below.
                let col = point_edges[k][0].0;
                assignment[*x][col] = assignment[*x][col] + leftover;
            }
        }
    }

    let mut masses = vec![T::zero(); agents + 1];
    for row in &assignment {
        for (c, &v) in row.iter().enumerate() {
            masses[c] = masses[c] + v;
        }
    }

    let mut residuals = vec![T::zero(); agents];
    let mut converged = true;
    for i in 0..agents {
        let deficit = capacities[i] - masses[i];
        residuals[i] = deficit;
        let violation = if equality[i] {
            deficit.abs()
        } else {
            (-deficit).max(T::zero()) // overfilling a slack capacity
        };
        if violation > mass_tol {
            converged = false;
        }
    }

    Closure {
        assignment,
        masses,
        tie_mass,
        tie_points: ties.iter().map(|(x, _, _)| *x).collect(),
        residuals,
        converged,
    }
}

// ---------------------------------------------------------------------------
// Solver
// ---------------------------------------------------------------------------

struct SolverCtx<T> {
    inst: ProblemInstance<T>,
    variant: XiVariant,
    /// Coordinate whose price stays fixed at zero (US null agent).
    pinned: Option<usize>,
    sum_zero: bool,
    nonneg: bool,
}

impl<T: Scalar> SolverCtx<T> {
    fn agents(&self) -> usize {
        self.inst.agents()
    }

    fn capacity(&self, i: usize) -> T {
        self.inst.capacities.capacities[i]
    }

    fn objective(&self, p: &[T]) -> T {
        let dot: T = p
            .iter()
            .zip(&self.inst.capacities.capacities)
            .map(|(&a, &b)| a * b)
            .sum();
        eval_xi(&self.inst, p, self.variant) + dot
    }

    fn project(&self, p: &mut [T]) {
        if self.sum_zero {
            let mean = p.iter().copied().sum::<T>() / T::from_usize(p.len()).unwrap();
            for v in p.iter_mut() {
                *v = *v - mean;
            }
        }
        if let Some(k) = self.pinned {
            p[k] = T::zero();
        }
        if self.nonneg {
            for v in p.iter_mut() {
                *v = v.max(T::zero());
            }
        }
    }

    /// Exact minimizer of the objective along coordinate `i`.
    ///
    /// The restriction is convex piecewise linear with breakpoints at
    /// `t_x = psi_i(x) - best_other(x)`; its slope at price q is
    /// `M_i - mass{x : t_x > q}`, so the minimizer is the M_i-weighted
    /// quantile of the thresholds.
    fn coordinate_min(&self, p: &[T], i: usize) -> T {
        let n = self.inst.points();
        let mut thresholds: Vec<(T, T)> = Vec::with_capacity(n);
        let mut locked_mass = T::zero(); // points agent i holds at any price
        for x in 0..n {
            let mut other = if self.variant == XiVariant::Clipped {
                T::zero()
            } else {
                T::neg_infinity()
            };
            for j in 0..self.agents() {
                if j != i {
                    let u = self.inst.wisdoms.at(j, x) - p[j];
                    if u > other {
                        other = u;
                    }
                }
            }
            if other.is_infinite() && other < T::zero() {
                locked_mass = locked_mass + self.inst.weight(x);
            } else {
                thresholds.push((self.inst.wisdoms.at(i, x) - other, self.inst.weight(x)));
            }
        }
        let m_i = self.capacity(i);
        if locked_mass >= m_i {
            return p[i]; // flat or unbounded direction; leave unchanged
        }
        thresholds.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let mut cum = locked_mass;
        let mut q = p[i];
        let mut found = false;
        for &(t, w) in &thresholds {
            cum = cum + w;
            if cum >= m_i {
                q = t;
                found = true;
                break;
            }
        }
        if !found {
            // Capacity exceeds reachable mass: push to the lowest breakpoint.
            if let Some(&(t, _)) = thresholds.last() {
                q = t;
            }
        }
        if self.nonneg {
            q = q.max(T::zero());
        }
        q
    }

    /// Exact minimizer of the objective along an arbitrary direction `d`.
    /// The restriction stays convex piecewise linear; its derivative is a
    /// nondecreasing step function whose sign change is located by binary
    /// search over the breakpoints (pairwise crossings of the moving net
    /// utilities). Used to break the corner stalls single-coordinate descent
    /// cannot escape.
    fn line_min(&self, p: &[T], d: &[T]) -> T {
        let n = self.inst.points();
        let agents = self.agents();
        let clipped = self.variant == XiVariant::Clipped;
        let mut bps: Vec<T> = Vec::new();
        for x in 0..n {
            // Net utility of option k at offset t: (psi_k - p_k) - d_k t;
            // the clipped variant adds a fixed zero option.
            for k in 0..agents {
                let uk = self.inst.wisdoms.at(k, x) - p[k];
                for l in (k + 1)..agents {
                    if d[k] != d[l] {
                        let ul = self.inst.wisdoms.at(l, x) - p[l];
                        bps.push((uk - ul) / (d[k] - d[l]));
                    }
                }
                if clipped && d[k] != T::zero() {
                    bps.push(uk / d[k]);
                }
            }
        }
        bps.retain(|t| t.is_finite());
        bps.sort_by(|a, b| a.partial_cmp(b).unwrap());
        bps.dedup();
        if bps.is_empty() {
            return T::zero();
        }

        // Directional derivative strictly inside a segment. Options sharing
        // the maximum on an open segment necessarily share a slope, so the
        // argmax choice among ties is immaterial.
        let deriv = |t: T| {
            let mut slope: T = (0..agents).map(|i| self.capacity(i) * d[i]).sum();
            for x in 0..n {
                let mut best = if clipped { T::zero() } else { T::neg_infinity() };
                let mut best_d = T::zero();
                for k in 0..agents {
                    let u = self.inst.wisdoms.at(k, x) - p[k] - d[k] * t;
                    if u > best {
                        best = u;
                        best_d = d[k];
                    }
                }
                slope = slope - self.inst.weight(x) * best_d;
            }
            slope
        };

        // Leftmost and rightmost segments: a nonnegative (resp. negative)
        // derivative there means no bounded interior minimizer; stay put.
        if deriv(bps[0] - T::one()) >= T::zero() {
            return T::zero();
        }
        let last = bps.len() - 1;
        if deriv(bps[last] + T::one()) < T::zero() {
            return T::zero();
        }
        // Smallest k whose following segment has nonnegative derivative.
        let mut lo = 0usize;
        let mut hi = last;
        while lo < hi {
            let mid = (lo + hi) / 2;
            let probe = if mid == last {
                bps[mid] + T::one()
            } else {
                (bps[mid] + bps[mid + 1]) / T::c(2.0)
            };
            if deriv(probe) >= T::zero() {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        let mut t = bps[lo];
        if self.nonneg {
            // Clamp the step so every moved price stays nonnegative;
            // convexity keeps the clamped step optimal on the interval.
            for i in 0..agents {
                if d[i] > T::zero() {
                    t = t.max(-p[i] / d[i]);
                } else if d[i] < T::zero() {
                    t = t.min(-p[i] / d[i]);
                }
            }
        }
        t
    }

    /// Steepest-descent direction at a nonsmooth corner: approximately the
    /// negated minimum-norm subgradient over the tie subdifferential.
    ///
    /// Tied consumer mass may be split arbitrarily among its argmax options;
    /// the split minimizing the Euclidean norm of g = M - mass is found by
    /// block-coordinate descent (per-point simplex projection, i.e.
    /// water-filling). Any feasible split yields a valid subgradient, so a
    /// partially converged answer is still safe to line search along.
    /// Returns `None` when the residual norm certifies near-optimality.
    fn min_norm_direction(&self, p: &[T], mass_tol: T) -> Option<Vec<T>> {
        let n = self.inst.points();
        let agents = self.agents();
        let band = T::c(1e-12);
        let boundary_tol = T::c(1e-12);

        // Per point: weight, real-agent options, whether a slack option
        // (opt-out, or the pinned null coordinate) absorbs leftover weight.
        let mut blocks: Vec<(usize, T, Vec<usize>, bool)> = Vec::new();
        let mut acc = vec![T::zero(); agents];
        for x in 0..n {
            let utilities: Vec<T> = (0..agents)
                .map(|i| self.inst.wisdoms.at(i, x) - p[i])
                .collect();
            let (tied, opt_out) = crate::values::point_options(&utilities, self.variant, band);
            let w = self.inst.weight(x);
            let mut real: Vec<usize> = Vec::new();
            let mut slack = opt_out;
            for &i in &tied {
                if self.pinned == Some(i) {
                    slack = true;
                } else {
                    real.push(i);
                }
            }
            let opts = real.len() + usize::from(slack);
            if opts == 0 {
                continue;
            }
            let share = w / T::from_usize(opts).unwrap();
            for &i in &real {
                acc[i] = acc[i] + share;
            }
            if opts > 1 && !real.is_empty() {
                blocks.push((x, w, real, slack));
            }
        }

        let mut lambdas: Vec<Vec<T>> = blocks
            .iter()
            .map(|(_, _, real, slack)| {
                let opts = real.len() + usize::from(*slack);
                vec![T::one() / T::from_usize(opts).unwrap(); real.len()]
            })
            .collect();

        for _sweep in 0..60 {
            let mut change = T::zero();
            for (b, (_, w, real, slack)) in blocks.iter().enumerate() {
                let w = *w;
                // Targets: residual each option's agent could absorb, in
                // units of this point's weight.
                let v: Vec<T> = real
                    .iter()
                    .zip(&lambdas[b])
                    .map(|(&i, &l)| (self.capacity(i) - acc[i]) / w + l)
                    .collect();
                // Project v onto {l >= 0, sum l = 1} (or <= 1 with slack).
                let mut sorted = v.clone();
                sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
                let mut tau = T::zero();
                let mut cum = T::zero();
                let mut found_full = false;
                for (k, &vk) in sorted.iter().enumerate() {
                    cum = cum + vk;
                    let kk = T::from_usize(k + 1).unwrap();
                    let cand = (cum - T::one()) / kk;
                    let next = sorted.get(k + 1).copied().unwrap_or(T::neg_infinity());
                    if cand >= next {
                        tau = cand;
                        found_full = true;
                        break;
                    }
                }
                if !found_full {
                    tau = (sorted.iter().copied().sum::<T>() - T::one())
                        / T::from_usize(sorted.len()).unwrap();
                }
                if *slack {
                    // Leftover may flow to the slack option instead.
                    tau = tau.max(T::zero());
                }
                for (k, &i) in real.iter().enumerate() {
                    let new_l = (v[k] - tau).max(T::zero());
                    let delta = new_l - lambdas[b][k];
                    if delta != T::zero() {
                        acc[i] = acc[i] + w * delta;
                        change = change + delta.abs() * w;
                        lambdas[b][k] = new_l;
                    }
                }
            }
            if change <= T::c(1e-15) * self.inst.total_mass() {
                break;
            }
        }

        let mut dir = vec![T::zero(); agents];
        let mut worst = T::zero();
        for i in 0..agents {
            if self.pinned == Some(i) {
                continue;
            }
            let g = self.capacity(i) - acc[i];
            let mut di = -g;
            if self.nonneg && p[i] <= boundary_tol && di < T::zero() {
                di = T::zero(); // feasible-direction projection at the bound
            }
            dir[i] = di;
            worst = worst.max(di.abs());
        }
        if worst <= mass_tol * T::c(0.5) {
            None
        } else {
            Some(dir)
        }
    }

    /// g_i = M_i - mass(A_i(p)): subgradient of the full dual objective.
    fn objective_subgradient(&self, p: &[T]) -> Vec<T> {
        let xi_grad = subgradient_xi(&self.inst, p, self.variant, TieRule::LowestIndex);
        (0..self.agents())
            .map(|i| self.capacity(i) + xi_grad[i])
            .collect()
    }
}

/// Report plus the capacity-closed partition at the solution prices.
#[derive(Debug, Clone)]
pub struct DualSolution<T> {
    pub report: DualReport<T>,
    pub partition: Partition<T>,
}

/// Minimizes the dual objective for the instance's regime and returns the
/// equilibrium prices with the capacity-closed partition.
pub fn solve_dual_with_partition<T: Scalar>(
    instance: &ProblemInstance<T>,
    options: &SolveOptions<T>,
) -> DualSolution<T> {
    let ctx = match instance.regime.tag {
        RegimeTag::Saturated => SolverCtx {
            inst: instance.clone(),
            variant: XiVariant::Free,
            pinned: None,
            sum_zero: true,
            nonneg: false,
        },
        RegimeTag::UnderSaturated => SolverCtx {
            inst: with_null_agent(instance),
            variant: XiVariant::Free,
            pinned: Some(instance.agents()),
            sum_zero: false,
            nonneg: false,
        },
        RegimeTag::OverSaturated => SolverCtx {
            inst: instance.clone(),
            variant: XiVariant::Clipped,
            pinned: None,
            sum_zero: false,
            nonneg: true,
        },
    };

    let work_agents = ctx.agents();
    let mass_tol = options.tolerance * instance.total_mass();
    let band = options.tolerance.max(T::c(1e-9));

    let mut p = vec![T::zero(); work_agents];
    ctx.project(&mut p);
    let mut iterations = 0usize;
    let mut best_obj = ctx.objective(&p);
    let mut best_p = p.clone();

    let capacities = ctx.inst.capacities.capacities.clone();
    let closure_of = |p: &[T]| {
        close_capacities(
            &ctx.inst,
            p,
            ctx.variant,
            &capacities,
            band,
            mass_tol,
            ctx.nonneg,
        )
    };

    let mut closure = loop {
        // Phase 1: cyclic exact coordinate descent until it stalls.
        loop {
            let before = ctx.objective(&p);
            for i in 0..work_agents {
                if ctx.pinned == Some(i) {
                    continue;
                }
                p[i] = ctx.coordinate_min(&p, i);
            }
            ctx.project(&mut p);
            iterations += 1;
            let after = ctx.objective(&p);
            if after < best_obj {
                best_obj = after;
                best_p = p.clone();
            }
            if before - after <= T::c(1e-14) * (T::one() + after.abs())
                || iterations >= options.max_iterations
            {
                break;
            }
        }

        // Phase 1b: pairwise exact line searches along e_i +- e_j break the
        // nonsmooth corners where no single coordinate can descend.
        let stall_obj = ctx.objective(&p);
        for i in 0..work_agents {
            if ctx.pinned == Some(i) {
                continue;
            }
            for j in (i + 1)..work_agents {
                if ctx.pinned == Some(j) {
                    continue;
                }
                for s in [T::one(), -T::one()] {
                    let mut d = vec![T::zero(); work_agents];
                    d[i] = T::one();
                    d[j] = s;
                    let t = ctx.line_min(&p, &d);
                    if t != T::zero() {
                        p[i] = p[i] + t;
                        p[j] = p[j] + s * t;
                    }
                }
            }
        }
        ctx.project(&mut p);
        iterations += 1;
        let after_pairs = ctx.objective(&p);
        if after_pairs < best_obj {
            best_obj = after_pairs;
            best_p = p.clone();
        }
        if stall_obj - after_pairs > T::c(1e-14) * (T::one() + after_pairs.abs())
            && iterations < options.max_iterations
        {
            continue; // meaningful progress: resume coordinate descent
        }

        let c = closure_of(&p);
        if c.converged || iterations >= options.max_iterations {
            break c;
        }

        // Phase 2a: exact steepest descent along the (approximate)
        // minimum-norm subgradient; each accepted step strictly decreases
        // the objective across the corner that stalled phase 1.
        let mut steep_progress = false;
        for _ in 0..50 {
            if iterations >= options.max_iterations {
                break;
            }
            let Some(mut d) = ctx.min_norm_direction(&p, mass_tol) else {
                break; // residual certifies near-optimality; re-run closure
            };
            if ctx.sum_zero {
                let mean = d.iter().copied().sum::<T>() / T::from_usize(work_agents).unwrap();
                for v in d.iter_mut() {
                    *v = *v - mean;
                }
            }
            let t = ctx.line_min(&p, &d);
            iterations += 1;
            if t == T::zero() {
                break;
            }
            for (v, &di) in p.iter_mut().zip(&d) {
                *v = *v + t * di;
            }
            ctx.project(&mut p);
            let f_new = ctx.objective(&p);
            if f_new < best_obj - T::c(1e-15) * (T::one() + best_obj.abs()) {
                best_obj = f_new;
                best_p = p.clone();
                steep_progress = true;
            } else {
                break;
            }
        }
        if steep_progress && iterations < options.max_iterations {
            continue; // resume coordinate descent from the improved point
        }
        let c = closure_of(&p);
        if c.converged || iterations >= options.max_iterations {
            break c;
        }

        // Phase 2b: projected subgradient escape with adaptive Polyak steps.
        let mut delta = T::c(0.1) * (T::one() + best_obj.abs()) * T::c(1e-2);
        let delta_floor = options.tolerance * (T::one() + best_obj.abs()) * T::c(1e-3);
        let escape_budget = 200.min(options.max_iterations - iterations);
        for _ in 0..escape_budget {
            let mut g = ctx.objective_subgradient(&p);
            if ctx.sum_zero {
                let mean = g.iter().copied().sum::<T>() / T::from_usize(work_agents).unwrap();
                for v in g.iter_mut() {
                    *v = *v - mean;
                }
            }
            if let Some(k) = ctx.pinned {
                g[k] = T::zero();
            }
            let gnorm2: T = g.iter().map(|&v| v * v).sum();
            if gnorm2 <= T::c(1e-30) {
                break;
            }
            let f = ctx.objective(&p);
            let target = best_obj - delta;
            let step = (f - target).max(delta * T::c(0.1)) / gnorm2;
            for (v, &gi) in p.iter_mut().zip(&g) {
                *v = *v - step * gi;
            }
            ctx.project(&mut p);
            iterations += 1;
            let f_new = ctx.objective(&p);
            if f_new < best_obj - delta * T::c(0.5) {
                best_obj = f_new;
                best_p = p.clone();
                delta = delta * T::c(1.5);
            } else {
                if f_new < best_obj {
                    best_obj = f_new;
                    best_p = p.clone();
                }
                delta = (delta * T::c(0.5)).max(delta_floor);
            }
        }
        p = best_p.clone();
    };

    if !closure.converged {
        p = best_p.clone();
        closure = closure_of(&p);
    }

    build_solution(instance, &ctx, p, closure, iterations, options)
}

/// As `solve_dual_with_partition`, returning only the report.
pub fn solve_dual<T: Scalar>(instance: &ProblemInstance<T>, options: &SolveOptions<T>) -> DualReport<T> {
    solve_dual_with_partition(instance, options).report
}

/// Appends a zero-wisdom agent carrying the under-saturation slack.
fn with_null_agent<T: Scalar>(instance: &ProblemInstance<T>) -> ProblemInstance<T> {
    let mut wisdoms = instance.wisdoms.values.clone();
    wisdoms.push(vec![T::zero(); instance.points()]);
    let mut capacities = instance.capacities.capacities.clone();
    capacities.push(-instance.regime.slack);
    ProblemInstance {
        measure: instance.measure.clone(),
        wisdoms: WisdomMatrix::new(wisdoms),
        capacities: CapacityVector::new(capacities),
        regime: crate::measure::classify_regime(
            &CapacityVector::new(vec![instance.total_mass()]),
            instance.total_mass(),
        ),
    }
}

fn build_solution<T: Scalar>(
    instance: &ProblemInstance<T>,
    ctx: &SolverCtx<T>,
    mut p: Vec<T>,
    closure: Closure<T>,
    iterations: usize,
    _options: &SolveOptions<T>,
) -> DualSolution<T> {
    let agents = instance.agents();
    let dual_value = ctx.objective(&p);

    // Working assignment -> partition over the original agents + opt-out.
    let n = instance.points();
    let mut assignment = vec![vec![T::zero(); agents + 1]; n];
    for x in 0..n {
        for i in 0..agents {
            assignment[x][i] = closure.assignment[x][i];
        }
        // Null-agent column (US) and the opt-out column both map to opt-out.
        let extra: T = closure.assignment[x][agents..].iter().copied().sum();
        assignment[x][agents] = extra;
    }
    let partition = Partition::from_assignment(assignment, closure.tie_points.clone());

    let normalization = match instance.regime.tag {
        RegimeTag::Saturated => {
            let mean = p.iter().copied().sum::<T>() / T::from_usize(p.len()).unwrap();
            for v in p.iter_mut() {
                *v = *v - mean;
            }
            Normalization::SumZero
        }
        RegimeTag::UnderSaturated => {
            p.truncate(agents);
            Normalization::Raw
        }
        RegimeTag::OverSaturated => {
            for v in p.iter_mut() {
                *v = v.max(T::zero());
            }
            Normalization::NonNegative
        }
    };

    let subgradient_residual: Vec<T> = match instance.regime.tag {
        RegimeTag::OverSaturated => (0..agents)
            .map(|i| closure.masses[i].min(instance.capacities.capacities[i]))
            .collect(),
        _ => closure.residuals[..agents].to_vec(),
    };

    DualSolution {
        report: DualReport {
            price: PriceVector {
                prices: p,
                normalization,
            },
            dual_value,
            subgradient_residual,
            iterations,
            tie_mass: closure.tie_mass,
            converged: closure.converged,
        },
        partition,
    }
}

/// Checks that a measure/wisdom/capacity triple agrees dimensionally with a
/// price vector; used by callers feeding external prices.
pub fn check_dimensions<T: Scalar>(
    instance: &ProblemInstance<T>,
    p: &PriceVector<T>,
) -> Result<(), SolveError> {
    if p.prices.len() != instance.agents() {
        return Err(SolveError::DimensionMismatch {
            got: p.prices.len(),
            want: instance.agents(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::instance_from_parts;
    use crate::Instance;

    fn two_point() -> Instance {
        instance_from_parts(
            &[0.5, 0.5],
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &[0.5, 0.5],
        )
    }

    #[test]
    fn eval_xi_examples() {
        let inst = two_point();
        assert!((eval_xi(&inst, &[0.0, 0.0], XiVariant::Free) - 1.0).abs() < 1e-15);
        assert_eq!(eval_xi(&inst, &[2.0, 2.0], XiVariant::Clipped), 0.0);
        // Shift identity: Xi(p + g*1) = Xi(p) - g*mu(X).
        let gamma = 0.3;
        let a = eval_xi(&inst, &[0.0, 0.0], XiVariant::Free);
        let b = eval_xi(&inst, &[gamma, gamma], XiVariant::Free);
        assert!((a - b - gamma).abs() < 1e-15);
    }

    #[test]
    fn subgradient_examples() {
        let inst = two_point();
        assert_eq!(
            subgradient_xi(&inst, &[0.0, 0.0], XiVariant::Free, TieRule::LowestIndex),
            vec![-0.5, -0.5]
        );
        // Tie at point b (1 vs 1): lowest index takes it.
        assert_eq!(
            subgradient_xi(&inst, &[-1.0, 0.0], XiVariant::Free, TieRule::LowestIndex),
            vec![-1.0, 0.0]
        );
        assert_eq!(
            subgradient_xi(&inst, &[10.0, 10.0], XiVariant::Clipped, TieRule::LowestIndex),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn subgradient_matches_finite_differences() {
        let inst = crate::measure::random_instance(40, 3, RegimeTag::Saturated, 5);
        let p = [0.3, -0.2, 0.7];
        let g = subgradient_xi(&inst, &p, XiVariant::Free, TieRule::LowestIndex);
        let h = 1e-6;
        for i in 0..3 {
            let mut up = p;
            up[i] += h;
            let mut dn = p;
            dn[i] -= h;
            let fd = (eval_xi(&inst, &up, XiVariant::Free) - eval_xi(&inst, &dn, XiVariant::Free))
                / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6, "coord {i}: fd {fd} vs g {}", g[i]);
        }
    }

    #[test]
    fn normalize_price_examples() {
        let inst = two_point();
        let p = normalize_price(&inst, &PriceVector::raw(vec![0.0, 0.0]));
        assert_eq!(p.prices, vec![1.0, 1.0]);
        // Idempotent once normalized.
        let again = normalize_price(&inst, &p);
        assert_eq!(again.prices, p.prices);

        let single: crate::Instance = instance_from_parts(&[0.5, 0.5], &[vec![2.0, 4.0]], &[1.0]);
        let p = normalize_price(&single, &PriceVector::raw(vec![0.0]));
        assert_eq!(p.prices, vec![2.0]);
    }

    #[test]
    fn solve_saturated_two_point() {
        let inst = two_point();
        let sol = solve_dual_with_partition(&inst, &SolveOptions::default());
        assert!(sol.report.converged);
        assert!((sol.report.dual_value - 1.0).abs() < 1e-9);
        assert_eq!(sol.report.price.normalization, Normalization::SumZero);
        assert!(sol.report.price.prices.iter().sum::<f64>().abs() < 1e-9);
        assert!((sol.partition.cell_masses[0] - 0.5).abs() < 1e-9);
        assert!((sol.partition.cell_masses[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn solve_under_saturated_two_point() {
        let inst: crate::Instance = instance_from_parts(
            &[0.5, 0.5],
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &[0.5, 0.25],
        );
        let sol = solve_dual_with_partition(&inst, &SolveOptions::default());
        assert!(sol.report.converged);
        assert!((sol.report.dual_value - 0.75).abs() < 1e-9);
        // Opt-out column absorbs the 0.25 slack.
        assert!((sol.partition.cell_masses[2] - 0.25).abs() < 1e-9);
    }

    #[test]
    fn solve_over_saturated_example() {
        let inst: crate::Instance = instance_from_parts(
            &[0.5, 0.5],
            &[vec![3.0, 1.0], vec![1.0, 2.0]],
            &[1.0, 1.0],
        );
        let sol = solve_dual_with_partition(&inst, &SolveOptions::default());
        assert!(sol.report.converged);
        assert!((sol.report.dual_value - 2.5).abs() < 1e-9);
        assert!(sol.report.price.prices.iter().all(|&p| p.abs() < 1e-9));
        // Effective capacities m_hat in the residual slot.
        assert!((sol.report.subgradient_residual[0] - 0.5).abs() < 1e-9);
        assert!((sol.report.subgradient_residual[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn single_agent_saturated() {
        let inst: crate::Instance = instance_from_parts(&[0.5, 0.5], &[vec![2.0, 4.0]], &[1.0]);
        let sol = solve_dual_with_partition(&inst, &SolveOptions::default());
        assert!(sol.report.converged);
        assert!((sol.report.dual_value - 3.0).abs() < 1e-9);
    }

    #[test]
    fn dual_report_serialization_keys() {
        let inst = two_point();
        let report = solve_dual(&inst, &SolveOptions::default());
        let json = serde_json::to_value(&report).unwrap();
        for key in ["prices", "normalization", "dual_value", "residuals", "iterations", "tie_mass"] {
            assert!(json.get(key).is_some(), "missing key {key}");
        }
    }
}
