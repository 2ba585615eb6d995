//! Exact primal solver: the fractional partition problem as a transportation
//! LP, solved with the transportation simplex (MODI) and Bland's
//! anti-cycling rule. Serves as ground truth for duality-gap tests, plus a
//! brute-force enumerator that is ground truth for the LP itself on tiny
//! instances.

use serde::ser::SerializeStruct;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::measure::{ProblemInstance, RegimeTag};
use crate::Scalar;

/// Optimal fractional assignment. `flows` is dense n x (N+1); the last
/// column is the null option (unserved mass). Serializes sparsely as
/// `[[x, i, mass], ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan<T> {
    pub flows: Vec<Vec<T>>,
    pub objective: T,
}

impl<T: Scalar> TransportPlan<T> {
    pub fn column_sums(&self) -> Vec<T> {
        let cols = self.flows.first().map_or(0, Vec::len);
        let mut sums = vec![T::zero(); cols];
        for row in &self.flows {
            for (c, &v) in row.iter().enumerate() {
                sums[c] = sums[c] + v;
            }
        }
        sums
    }

    /// Mass actually served per real agent: min is not taken here — the LP
    /// never overfills, so this is `m_hat` directly in the over-saturated
    /// regime.
    pub fn served_per_agent(&self) -> Vec<T> {
        let mut sums = self.column_sums();
        sums.pop();
        sums
    }
}

impl<T: Scalar> Serialize for TransportPlan<T> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut triplets: Vec<(usize, usize, T)> = Vec::new();
        for (x, row) in self.flows.iter().enumerate() {
            for (i, &v) in row.iter().enumerate() {
                if v != T::zero() {
                    triplets.push((x, i, v));
                }
            }
        }
        let mut st = serializer.serialize_struct("TransportPlan", 4)?;
        st.serialize_field("points", &self.flows.len())?;
        st.serialize_field("columns", &self.flows.first().map_or(0, Vec::len))?;
        st.serialize_field("flows", &triplets)?;
        st.serialize_field("objective", &self.objective)?;
        st.end()
    }
}

impl<'de, T: Scalar> Deserialize<'de> for TransportPlan<T> {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw<T> {
            points: usize,
            columns: usize,
            flows: Vec<(usize, usize, T)>,
            objective: T,
        }
        let raw = Raw::<T>::deserialize(deserializer)?;
        let mut flows = vec![vec![T::zero(); raw.columns]; raw.points];
        for (x, i, v) in raw.flows {
            if x >= raw.points || i >= raw.columns {
                return Err(serde::de::Error::custom("flow triplet out of bounds"));
            }
            flows[x][i] = v;
        }
        Ok(Self {
            flows,
            objective: raw.objective,
        })
    }
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("brute force limited to 8 points and 3 agents, got {points} x {agents}")]
    TooLarge { points: usize, agents: usize },
}

/// Solves max sum f_{x,i} psi_i(x) over row-stochastic flows with column
/// caps M_i. Balancing: in the under-saturated regime a null column absorbs
/// the consumer surplus; in the over-saturated regime a dummy consumer row
/// absorbs the capacity surplus. Exact basic optimal solution.
pub fn transportation_lp<T: Scalar>(instance: &ProblemInstance<T>) -> TransportPlan<T> {
    let n = instance.points();
    let agents = instance.agents();
    let slack = instance.regime.slack; // sum(M) - mu(X)

    let null_cap = (-slack).max(T::zero());
    let dummy_supply = slack.max(T::zero());
    let has_null = instance.regime.tag == RegimeTag::UnderSaturated;
    let has_dummy = instance.regime.tag == RegimeTag::OverSaturated;

    let rows = n + usize::from(has_dummy);
    let cols = agents + usize::from(has_null);

    let mut supply: Vec<T> = (0..n).map(|x| instance.weight(x)).collect();
    if has_dummy {
        supply.push(dummy_supply);
    }
    let mut demand: Vec<T> = instance.capacities.capacities.clone();
    if has_null {
        demand.push(null_cap);
    }

    // Minimize negated profit; dummy row and null column carry zero profit.
    let mut cost = vec![vec![T::zero(); cols]; rows];
    for x in 0..n {
        for i in 0..agents {
            cost[x][i] = -instance.wisdoms.at(i, x);
        }
    }

    // The regime band tolerates a tiny supply/demand imbalance; absorb it in
    // the largest demand so the simplex sees an exactly balanced problem.
    let imbalance = supply.iter().copied().sum::<T>() - demand.iter().copied().sum::<T>();
    if imbalance != T::zero() {
        let k = (0..demand.len())
            .max_by(|&a, &b| demand[a].partial_cmp(&demand[b]).unwrap())
            .unwrap();
        demand[k] = demand[k] + imbalance;
    }

    let flows_full = transportation_simplex(&cost, &supply, &demand);

    // Report as n x (agents + 1), dropping the dummy row and mapping the
    // null column (or its absence) to the trailing opt-out column.
    let mut flows = vec![vec![T::zero(); agents + 1]; n];
    let mut objective = T::zero();
    for x in 0..n {
        for i in 0..agents {
            let f = flows_full[x][i];
            flows[x][i] = f;
            objective = objective + f * instance.wisdoms.at(i, x);
        }
        if has_null {
            flows[x][agents] = flows_full[x][agents];
        }
    }
    TransportPlan { flows, objective }
}

/// Transportation simplex on a balanced problem. Northwest-corner start,
/// MODI pricing, Bland's rule for the entering cell and the leaving basic
/// cell, so degenerate pivots cannot cycle.
fn transportation_simplex<T: Scalar>(cost: &[Vec<T>], supply: &[T], demand: &[T]) -> Vec<Vec<T>> {
    let r = supply.len();
    let c = demand.len();
    let mut flow = vec![vec![T::zero(); c]; r];
    let scale = cost
        .iter()
        .flatten()
        .fold(T::zero(), |m, &v| m.max(v.abs()));
    let eps = T::c(1e-12) * (T::one() + scale);

    // Northwest-corner initial basis: exactly r + c - 1 cells, possibly with
    // zero flow (degenerate), forming a spanning tree.
    let mut basis: Vec<(usize, usize)> = Vec::with_capacity(r + c - 1);
    {
        let mut s = supply.to_vec();
        let mut d = demand.to_vec();
        let (mut i, mut j) = (0, 0);
        while i < r && j < c {
            let q = s[i].min(d[j]).max(T::zero());
            flow[i][j] = q;
            basis.push((i, j));
            s[i] = s[i] - q;
            d[j] = d[j] - q;
            if i == r - 1 && j == c - 1 {
                break;
            }
            // Advance along the dimension that got exhausted; the boundary
            // guards keep the walk inside the grid under float ties.
            if (s[i] <= d[j] || j == c - 1) && i < r - 1 {
                i += 1;
            } else {
                j += 1;
            }
        }
    }

    let max_pivots = 8 * (r + c) * (r + c).max(64);
    for _ in 0..max_pivots {
        // MODI potentials from the basis tree: u_i + v_j = cost[i][j],
        // anchored at u_0 = 0, filled by BFS over the tree.
        let mut u = vec![T::zero(); r];
        let mut v = vec![T::zero(); c];
        {
            let mut adj = vec![Vec::new(); r + c];
            for &(i, j) in &basis {
                adj[i].push(r + j);
                adj[r + j].push(i);
            }
            let mut seen = vec![false; r + c];
            seen[0] = true;
            let mut queue = std::collections::VecDeque::from([0usize]);
            while let Some(node) = queue.pop_front() {
                for &next in &adj[node] {
                    if !seen[next] {
                        seen[next] = true;
                        if node < r {
                            v[next - r] = cost[node][next - r] - u[node];
                        } else {
                            u[next] = cost[next][node - r] - v[node - r];
                        }
                        queue.push_back(next);
                    }
                }
            }
            debug_assert!(seen.iter().all(|&s| s), "basis must span all nodes");
        }

        // Bland: first cell in row-major order with negative reduced cost.
        let mut entering = None;
        'scan: for i in 0..r {
            for j in 0..c {
                let red = cost[i][j] - u[i] - v[j];
                if red < -eps {
                    entering = Some((i, j));
                    break 'scan;
                }
            }
        }
        let Some((ei, ej)) = entering else {
            break; // optimal
        };

        // Unique cycle: tree path from column node ej back to row node ei,
        // found by DFS over basic cells.
        let cycle = basis_cycle(&basis, r, c, ei, ej);
        // Positions alternate +,-,+,-,... starting at the entering cell.
        let mut theta = T::infinity();
        let mut leave_idx = usize::MAX;
        for (k, &(i, j)) in cycle.iter().enumerate().skip(1).step_by(2) {
            if flow[i][j] < theta {
                theta = flow[i][j];
                leave_idx = k;
            }
        }
        let (li, lj) = cycle[leave_idx];
        for (k, &(i, j)) in cycle.iter().enumerate() {
            if k == 0 {
                flow[i][j] = flow[i][j] + theta;
            } else if k % 2 == 1 {
                flow[i][j] = (flow[i][j] - theta).max(T::zero());
            } else {
                flow[i][j] = flow[i][j] + theta;
            }
        }
        let pos = basis.iter().position(|&b| b == (li, lj)).unwrap();
        basis.remove(pos);
        basis.push((ei, ej));
    }

    flow
}

/// Cycle created by adding cell (ei, ej) to the basis tree, as an ordered
/// list of cells starting with the entering cell and alternating row/column
/// moves.
fn basis_cycle(basis: &[(usize, usize)], r: usize, c: usize, ei: usize, ej: usize) -> Vec<(usize, usize)> {
    // Bipartite adjacency: row node i <-> col node r + j for each basic cell.
    let mut adj = vec![Vec::new(); r + c];
    for (idx, &(i, j)) in basis.iter().enumerate() {
        adj[i].push((r + j, idx));
        adj[r + j].push((i, idx));
    }
    // Path in the tree from the column node to the row node of the entering
    // cell; prepending the entering cell closes the cycle.
    let mut prev: Vec<Option<(usize, usize)>> = vec![None; r + c];
    let mut stack = vec![r + ej];
    let mut seen = vec![false; r + c];
    seen[r + ej] = true;
    while let Some(node) = stack.pop() {
        if node == ei {
            break;
        }
        for &(next, idx) in &adj[node] {
            if !seen[next] {
                seen[next] = true;
                prev[next] = Some((node, idx));
                stack.push(next);
            }
        }
    }
    debug_assert!(seen[ei], "basis must be a spanning tree");

    let mut cells = vec![(ei, ej)];
    let mut node = ei;
    while let Some((parent, idx)) = prev[node] {
        cells.push(basis[idx]);
        node = parent;
    }
    cells
}

/// Exhaustive integral optimum over point -> agent/null assignments with
/// capacity checks. Only valid when an integral optimum exists, i.e. when
/// capacities are sums of point weights.
pub fn brute_force_tiny<T: Scalar>(instance: &ProblemInstance<T>) -> Result<T, OracleError> {
    let n = instance.points();
    let agents = instance.agents();
    if n > 8 || agents > 3 {
        return Err(OracleError::TooLarge { points: n, agents });
    }
    let options = agents + 1; // trailing option is the null assignment
    let tol = T::c(1e-9) * (T::one() + instance.total_mass());
    let mut best = T::neg_infinity();
    let mut assignment = vec![0usize; n];
    loop {
        let mut masses = vec![T::zero(); agents];
        let mut value = T::zero();
        let mut feasible = true;
        for (x, &a) in assignment.iter().enumerate() {
            if a < agents {
                masses[a] = masses[a] + instance.weight(x);
                if masses[a] > instance.capacities.capacities[a] + tol {
                    feasible = false;
                    break;
                }
                value = value + instance.weight(x) * instance.wisdoms.at(a, x);
            }
        }
        if feasible && value > best {
            best = value;
        }
        // Odometer increment over the assignment vector.
        let mut k = 0;
        loop {
            if k == n {
                return Ok(best);
            }
            assignment[k] += 1;
            if assignment[k] < options {
                break;
            }
            assignment[k] = 0;
            k += 1;
        }
    }
}

/// A feasible (generally suboptimal) plan: greedy fill in a seeded random
/// point order, used by weak-duality property tests.
pub fn sample_feasible_plan<T: Scalar>(instance: &ProblemInstance<T>, seed: u64) -> TransportPlan<T> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let n = instance.points();
    let agents = instance.agents();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut remaining = instance.capacities.capacities.clone();
    let mut flows = vec![vec![T::zero(); agents + 1]; n];
    let mut objective = T::zero();
    for &x in &order {
        let mut w = instance.weight(x);
        // Best-wisdom-first among agents with remaining capacity.
        let mut by_pref: Vec<usize> = (0..agents).collect();
        by_pref.sort_by(|&a, &b| {
            instance
                .wisdoms
                .at(b, x)
                .partial_cmp(&instance.wisdoms.at(a, x))
                .unwrap()
        });
        for i in by_pref {
            if w <= T::zero() {
                break;
            }
            let q = w.min(remaining[i]);
            if q > T::zero() {
                flows[x][i] = flows[x][i] + q;
                remaining[i] = remaining[i] - q;
                objective = objective + q * instance.wisdoms.at(i, x);
                w = w - q;
            }
        }
        flows[x][agents] = w.max(T::zero());
    }
    TransportPlan { flows, objective }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::{instance_from_parts, random_instance};

    #[test]
    fn lp_two_point_saturated() {
        let inst: crate::Instance = instance_from_parts(
            &[0.5, 0.5],
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &[0.5, 0.5],
        );
        let plan = transportation_lp(&inst);
        assert!((plan.objective - 1.0).abs() < 1e-12);
        assert!((plan.flows[0][0] - 0.5).abs() < 1e-12);
        assert!((plan.flows[1][1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn lp_two_point_under_saturated() {
        let inst: crate::Instance = instance_from_parts(
            &[0.5, 0.5],
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &[0.5, 0.25],
        );
        let plan = transportation_lp(&inst);
        assert!((plan.objective - 0.75).abs() < 1e-12);
        assert!((plan.flows[1][1] - 0.25).abs() < 1e-12);
        assert!((plan.flows[1][2] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn lp_over_saturated_effective_capacities() {
        let inst: crate::Instance = instance_from_parts(
            &[0.5, 0.5],
            &[vec![3.0, 1.0], vec![1.0, 2.0]],
            &[1.0, 1.0],
        );
        let plan = transportation_lp(&inst);
        assert!((plan.objective - 2.5).abs() < 1e-12);
        let served = plan.served_per_agent();
        assert!((served[0] - 0.5).abs() < 1e-12);
        assert!((served[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn brute_force_examples() {
        let s: crate::Instance = instance_from_parts(
            &[0.5, 0.5],
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &[0.5, 0.5],
        );
        assert!((brute_force_tiny(&s).unwrap() - 1.0).abs() < 1e-15);

        let single: crate::Instance = instance_from_parts(&[0.5, 0.5], &[vec![2.0, 4.0]], &[0.5]);
        assert!((brute_force_tiny(&single).unwrap() - 2.0).abs() < 1e-15);

        let os: crate::Instance = instance_from_parts(
            &[0.5, 0.5],
            &[vec![3.0, 1.0], vec![1.0, 2.0]],
            &[1.0, 1.0],
        );
        assert!((brute_force_tiny(&os).unwrap() - 2.5).abs() < 1e-15);
    }

    #[test]
    fn brute_force_rejects_large() {
        let inst = random_instance(20, 3, crate::measure::RegimeTag::Saturated, 1);
        assert!(brute_force_tiny(&inst).is_err());
    }

    #[test]
    fn lp_matches_brute_force_on_weight_aligned_instances() {
        // Capacities are multiples of the uniform weight so an integral
        // optimum exists and both solvers must agree exactly.
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for trial in 0..30 {
            let n = rng.gen_range(2..=6);
            let agents = rng.gen_range(1..=3);
            let w = 1.0 / n as f64;
            let weights = vec![w; n];
            let wisdoms: Vec<Vec<f64>> = (0..agents)
                .map(|_| (0..n).map(|_| rng.gen_range(0.0..5.0)).collect())
                .collect();
            let caps: Vec<f64> = (0..agents)
                .map(|_| w * rng.gen_range(0..=n) as f64)
                .collect();
            if caps.iter().sum::<f64>() == 0.0 {
                continue;
            }
            let inst: crate::Instance = instance_from_parts(&weights, &wisdoms, &caps);
            let lp = transportation_lp(&inst);
            let bf = brute_force_tiny(&inst).unwrap();
            assert!(
                (lp.objective - bf).abs() < 1e-12,
                "trial {trial}: lp {} vs brute force {}",
                lp.objective,
                bf
            );
        }
    }

    #[test]
    fn plan_row_sums_and_caps() {
        for seed in 0..5 {
            for tag in [
                crate::measure::RegimeTag::UnderSaturated,
                crate::measure::RegimeTag::Saturated,
                crate::measure::RegimeTag::OverSaturated,
            ] {
                let inst = random_instance(50, 4, tag, seed);
                let plan = transportation_lp(&inst);
                for (x, row) in plan.flows.iter().enumerate() {
                    let s: f64 = row.iter().sum();
                    assert!((s - inst.weight(x)).abs() < 1e-12);
                    assert!(row.iter().all(|&v| v >= 0.0));
                }
                for (i, &m) in plan.served_per_agent().iter().enumerate() {
                    assert!(m <= inst.capacities.capacities[i] + 1e-12);
                }
            }
        }
    }

    #[test]
    fn sampled_plans_are_feasible_and_dominated() {
        let inst = random_instance(60, 3, crate::measure::RegimeTag::Saturated, 7);
        let opt = transportation_lp(&inst);
        for seed in 0..10 {
            let plan = sample_feasible_plan(&inst, seed);
            for (x, row) in plan.flows.iter().enumerate() {
                let s: f64 = row.iter().sum();
                assert!((s - inst.weight(x)).abs() < 1e-12);
            }
            assert!(plan.objective <= opt.objective + 1e-9);
        }
    }

    #[test]
    fn plan_serialization_round_trip() {
        let inst: crate::Instance = instance_from_parts(
            &[0.5, 0.5],
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &[0.5, 0.25],
        );
        let plan = transportation_lp(&inst);
        let json = serde_json::to_string(&plan).unwrap();
        assert!(json.contains("\"flows\""));
        assert!(json.contains("\"objective\""));
        let back: TransportPlan<f64> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, plan);
    }
}
