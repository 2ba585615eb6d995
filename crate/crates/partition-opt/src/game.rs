//! Coalition/partition cooperative game over agent subsets.
//!
//! A coalition J acts as one super-agent with wisdom max_{i in J} psi_i and
//! capacity sum_{i in J} M_i; its value nu(J) is its individual value in the
//! optimal two-agent split against the complement coalition. Core stability
//! is decided by the balanced-collection linear program: the core is
//! nonempty iff no balanced family of proper coalitions is worth more than
//! the grand coalition.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dual::{solve_dual_with_partition, SolveOptions};
use crate::measure::{CapacityVector, ProblemInstance, RegimeTag, WisdomMatrix};
use crate::values::individual_values;
use crate::Scalar;

const CORE_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GameError {
    #[error("coalition games support at most 16 agents, got {0}")]
    TooManyAgents(usize),
    #[error("coalition games are defined for saturated instances only")]
    NotSaturated,
    #[error("coalition must be a nonempty subset of agents")]
    EmptyCoalition,
    #[error("value table length {0} is not a power of two")]
    BadValueCount(usize),
    #[error("operation requires exactly {want} agents, game has {got}")]
    WrongPlayerCount { want: usize, got: usize },
    #[error("operation requires a super-additive game")]
    NotSuperadditive,
}

/// Subset-indexed value table: `values[mask]` with bit i set iff agent i is
/// in the coalition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoalitionGame<T> {
    #[serde(rename = "n")]
    pub n_agents: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> CoalitionGame<T> {
    pub fn new(values: Vec<T>) -> Result<Self, GameError> {
        let len = values.len();
        if !len.is_power_of_two() || len < 2 {
            return Err(GameError::BadValueCount(len));
        }
        let n_agents = len.trailing_zeros() as usize;
        if n_agents > 16 {
            return Err(GameError::TooManyAgents(n_agents));
        }
        Ok(Self { n_agents, values })
    }

    pub fn full_mask(&self) -> usize {
        (1 << self.n_agents) - 1
    }

    pub fn grand_value(&self) -> T {
        self.values[self.full_mask()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoreStatus {
    NonEmpty,
    Empty,
}

/// Core decision with its witness: an allocation when nonempty, a balanced
/// collection worth more than the grand coalition when empty. `boundary`
/// flags games where some proper balanced collection attains the grand value
/// exactly, so the strict-inequality stability criterion fails even though a
/// (weak) core allocation exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreCertificate<T> {
    pub status: CoreStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub allocation: Option<Vec<T>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub violating_collection: Option<Vec<(usize, T)>>,
    pub optimum: T,
    pub boundary: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperadditivityViolation<T> {
    pub j1: usize,
    pub j2: usize,
    pub pair_sum: T,
    pub union_value: T,
}

/// Coalition J as a single agent: pointwise max wisdom, summed capacity.
pub fn super_agent<T: Scalar>(
    instance: &ProblemInstance<T>,
    mask: usize,
) -> Result<(Vec<T>, T), GameError> {
    if mask == 0 || mask >= (1 << instance.agents()) {
        return Err(GameError::EmptyCoalition);
    }
    let n = instance.points();
    let mut row = vec![T::neg_infinity(); n];
    let mut capacity = T::zero();
    for i in 0..instance.agents() {
        if mask & (1 << i) != 0 {
            capacity = capacity + instance.capacities.capacities[i];
            for x in 0..n {
                row[x] = row[x].max(instance.wisdoms.at(i, x));
            }
        }
    }
    Ok((row, capacity))
}

/// nu(J): individual value of the super-agent J against its complement in
/// the two-agent equilibrium; nu(I) is the unconstrained integral of the
/// pointwise-max wisdom.
pub fn coalition_value<T: Scalar>(
    instance: &ProblemInstance<T>,
    mask: usize,
) -> Result<T, GameError> {
    if instance.regime.tag != RegimeTag::Saturated {
        return Err(GameError::NotSaturated);
    }
    let full = (1usize << instance.agents()) - 1;
    if mask == 0 || mask > full {
        return Err(GameError::EmptyCoalition);
    }
    if mask == full {
        let (row, _) = super_agent(instance, full)?;
        return Ok((0..instance.points())
            .map(|x| instance.weight(x) * row[x])
            .sum());
    }
    let (row_j, cap_j) = super_agent(instance, mask)?;
    let (row_c, cap_c) = super_agent(instance, full & !mask)?;
    let two_agent = ProblemInstance::new(
        instance.measure.clone(),
        WisdomMatrix::new(vec![row_j, row_c]),
        CapacityVector::new(vec![cap_j, cap_c]),
    )
    .map_err(|_| GameError::NotSaturated)?;
    let sol = solve_dual_with_partition(&two_agent, &SolveOptions::default());
    Ok(individual_values(&two_agent, &sol.partition)[0])
}

/// All 2^N coalition values. Subsets are solved independently (in parallel)
/// and collected in mask order, so the result is deterministic.
pub fn build_game<T: Scalar>(instance: &ProblemInstance<T>) -> Result<CoalitionGame<T>, GameError> {
    let n = instance.agents();
    if n > 16 {
        return Err(GameError::TooManyAgents(n));
    }
    if instance.regime.tag != RegimeTag::Saturated {
        return Err(GameError::NotSaturated);
    }
    let full = (1usize << n) - 1;
    let mut values = vec![T::zero(); full + 1];
    let computed: Result<Vec<(usize, T)>, GameError> = (1..=full)
        .into_par_iter()
        .map(|mask| coalition_value(instance, mask).map(|v| (mask, v)))
        .collect();
    for (mask, v) in computed? {
        values[mask] = v;
    }
    CoalitionGame::new(values)
}

/// All unordered disjoint pairs violating nu(J1) + nu(J2) <= nu(J1 u J2).
pub fn check_superadditive<T: Scalar>(game: &CoalitionGame<T>) -> Vec<SuperadditivityViolation<T>> {
    let full = game.full_mask();
    let tol = T::c(CORE_TOL);
    let mut violations = Vec::new();
    for m1 in 1..=full {
        let comp = full & !m1;
        let mut m2 = comp;
        while m2 > 0 {
            if m2 > m1 {
                let pair_sum = game.values[m1] + game.values[m2];
                let union_value = game.values[m1 | m2];
                if pair_sum > union_value + tol {
                    violations.push(SuperadditivityViolation {
                        j1: m1,
                        j2: m2,
                        pair_sum,
                        union_value,
                    });
                }
            }
            m2 = (m2 - 1) & comp;
        }
    }
    violations
}

/// Bondareva-Shapley core check.
///
/// Solves max sum lambda_J nu(J) over balanced collections of proper
/// coalitions (sum_{J ni i} lambda_J = 1, lambda >= 0). The core is
/// nonempty iff that optimum is at most nu(I); the LP's constraint
/// multipliers then yield an allocation, and otherwise the optimal lambda is
/// the violating collection.
pub fn core_check<T: Scalar>(game: &CoalitionGame<T>) -> CoreCertificate<T> {
    let n = game.n_agents;
    let full = game.full_mask();
    let grand = game.grand_value();
    let tol = T::c(CORE_TOL);

    if n == 1 {
        return CoreCertificate {
            status: CoreStatus::NonEmpty,
            allocation: Some(vec![grand]),
            violating_collection: None,
            optimum: grand,
            boundary: false,
        };
    }

    let masks: Vec<usize> = (1..full).collect(); // proper nonempty subsets
    let nu: Vec<T> = masks.iter().map(|&m| game.values[m]).collect();
    let lp = balanced_collection_lp(n, &masks, &nu);

    let optimum = lp.optimum.max(grand);
    if lp.optimum <= grand + tol {
        // Feasible: surplus over the proper-collection optimum is spread
        // evenly so the allocation exhausts the grand value.
        let surplus = (grand - lp.optimum) / T::from_usize(n).unwrap();
        let allocation = lp.multipliers.iter().map(|&x| x + surplus).collect();
        CoreCertificate {
            status: CoreStatus::NonEmpty,
            allocation: Some(allocation),
            violating_collection: None,
            optimum,
            boundary: lp.optimum >= grand - tol,
        }
    } else {
        let collection = masks
            .iter()
            .zip(&lp.solution)
            .filter(|&(_, &l)| l > tol)
            .map(|(&m, &l)| (m, l))
            .collect();
        CoreCertificate {
            status: CoreStatus::Empty,
            allocation: None,
            violating_collection: Some(collection),
            optimum,
            boundary: false,
        }
    }
}

/// Strict three-player criterion: nonempty core iff
/// nu(12) + nu(13) + nu(23) < 2 nu(123).
pub fn core_check_n3<T: Scalar>(game: &CoalitionGame<T>) -> Result<CoreStatus, GameError> {
    if game.n_agents != 3 {
        return Err(GameError::WrongPlayerCount {
            want: 3,
            got: game.n_agents,
        });
    }
    if !check_superadditive(game).is_empty() {
        return Err(GameError::NotSuperadditive);
    }
    let pairs = game.values[0b011] + game.values[0b101] + game.values[0b110];
    Ok(if pairs < T::c(2.0) * game.grand_value() {
        CoreStatus::NonEmpty
    } else {
        CoreStatus::Empty
    })
}

struct LpResult<T> {
    optimum: T,
    /// Optimal lambda per input mask.
    solution: Vec<T>,
    /// Equality-constraint multipliers: the candidate core allocation.
    multipliers: Vec<T>,
}

/// Dense two-phase simplex for max nu.lambda subject to the balance
/// constraints sum_{J ni i} lambda_J = 1, lambda >= 0. Bland's rule for both
/// pivots, so degenerate bases cannot cycle.
fn balanced_collection_lp<T: Scalar>(n: usize, masks: &[usize], nu: &[T]) -> LpResult<T> {
    let m = masks.len();
    let cols = m + n; // variables then artificials
    let scale = nu.iter().fold(T::one(), |a, &v| a.max(v.abs()));
    let eps = T::c(1e-11) * scale;

    // Constraint rows [A | I | b] with b = 1.
    let mut a = vec![vec![T::zero(); cols + 1]; n];
    for (j, &mask) in masks.iter().enumerate() {
        for (i, row) in a.iter_mut().enumerate() {
            if mask & (1 << i) != 0 {
                row[j] = T::one();
            }
        }
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[m + i] = T::one();
        row[cols] = T::one();
    }
    let mut basis: Vec<usize> = (m..cols).collect();

    let pivot = |a: &mut Vec<Vec<T>>, costrow: &mut Vec<T>, basis: &mut Vec<usize>, r: usize, c: usize| {
        let factor = a[r][c];
        for v in a[r].iter_mut() {
            *v = *v / factor;
        }
        for i in 0..a.len() {
            if i != r && a[i][c].abs() > T::zero() {
                let f = a[i][c];
                for k in 0..=cols {
                    a[i][k] = a[i][k] - f * a[r][k];
                }
            }
        }
        if costrow[c].abs() > T::zero() {
            let f = costrow[c];
            for k in 0..=cols {
                costrow[k] = costrow[k] - f * a[r][k];
            }
        }
        basis[r] = c;
    };

    let run = |a: &mut Vec<Vec<T>>,
               costrow: &mut Vec<T>,
               basis: &mut Vec<usize>,
               allow_artificial: bool| {
        let limit = 50 * (cols + n).max(64);
        for _ in 0..limit {
            let col_limit = if allow_artificial { cols } else { m };
            let entering = (0..col_limit).find(|&j| costrow[j] < -eps);
            let Some(c) = entering else { break };
            let mut best: Option<(T, usize)> = None;
            for r in 0..n {
                if a[r][c] > eps {
                    let ratio = a[r][cols] / a[r][c];
                    let better = match best {
                        None => true,
                        // Bland: ties broken by the smaller basic variable.
                        Some((b, br)) => {
                            ratio < b - eps || (ratio <= b + eps && basis[r] < basis[br])
                        }
                    };
                    if better {
                        best = Some((ratio, r));
                    }
                }
            }
            let Some((_, r)) = best else { break }; // unbounded cannot occur here
            pivot(a, costrow, basis, r, c);
        }
    };

    // Phase 1: drive the artificials out (cost 1 each).
    let mut costrow = vec![T::zero(); cols + 1];
    for j in 0..=cols {
        let mut s = T::zero();
        for row in &a {
            s = s + row[j];
        }
        let c_j = if (m..cols).contains(&j) { T::one() } else { T::zero() };
        costrow[j] = c_j - s;
    }
    // Artificial columns start basic with zero reduced cost.
    for j in m..cols {
        costrow[j] = T::zero();
    }
    run(&mut a, &mut costrow, &mut basis, true);

    // Phase 2: minimize -nu.lambda; artificial columns stay but never enter.
    let mut costrow = vec![T::zero(); cols + 1];
    for j in 0..m {
        costrow[j] = -nu[j];
    }
    for r in 0..n {
        let b = basis[r];
        let cb = if b < m { -nu[b] } else { T::zero() };
        if cb.abs() > T::zero() {
            for k in 0..=cols {
                costrow[k] = costrow[k] - cb * a[r][k];
            }
        }
    }
    run(&mut a, &mut costrow, &mut basis, false);

    let mut solution = vec![T::zero(); m];
    let mut optimum = T::zero();
    for r in 0..n {
        if basis[r] < m {
            solution[basis[r]] = a[r][cols];
            optimum = optimum + nu[basis[r]] * a[r][cols];
        }
    }
    // Reduced cost of artificial i equals the allocation component x_i.
    let multipliers = (0..n).map(|i| costrow[m + i]).collect();
    LpResult {
        optimum,
        solution,
        multipliers,
    }
}
