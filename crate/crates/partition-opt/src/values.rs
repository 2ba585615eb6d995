//! Partitions induced by price vectors, total profit, individual values and
//! the agent/consumer value decomposition.

use serde::{Deserialize, Serialize};

use crate::dual::{PriceVector, TieRule, XiVariant};
use crate::measure::ProblemInstance;
use crate::Scalar;

/// Per-consumer mass split over agents plus the opt-out column (index N).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Partition<T> {
    /// n rows, N+1 columns; column N is the null/opt-out cell.
    pub assignment: Vec<Vec<T>>,
    /// Column sums, length N+1.
    pub cell_masses: Vec<T>,
    /// Ids of points whose argmax was non-unique.
    pub tie_points: Vec<usize>,
}

impl<T: Scalar> Partition<T> {
    pub fn from_assignment(assignment: Vec<Vec<T>>, tie_points: Vec<usize>) -> Self {
        let cols = assignment.first().map_or(0, |r| r.len());
        let mut cell_masses = vec![T::zero(); cols];
        for row in &assignment {
            for (c, &v) in row.iter().enumerate() {
                cell_masses[c] = cell_masses[c] + v;
            }
        }
        Self {
            assignment,
            cell_masses,
            tie_points,
        }
    }

    /// Mass served by real agents (everything but the opt-out column).
    pub fn served_mass(&self) -> T {
        let n_agents = self.cell_masses.len().saturating_sub(1);
        self.cell_masses[..n_agents].iter().copied().sum()
    }
}

/// Net utilities of one point at prices `p`: psi_i(x) - p_i per agent.
fn net_utilities<T: Scalar>(instance: &ProblemInstance<T>, p: &[T], x: usize) -> Vec<T> {
    (0..instance.agents())
        .map(|i| instance.wisdoms.at(i, x) - p[i])
        .collect()
}

/// Argmax options of a point under the given variant.
///
/// Returns (tied agent indices, opt-out participates). Values within
/// `band * (1 + |max|)` of the maximum count as tied.
pub(crate) fn point_options<T: Scalar>(
    utilities: &[T],
    variant: XiVariant,
    band: T,
) -> (Vec<usize>, bool) {
    let best = utilities
        .iter()
        .copied()
        .fold(T::neg_infinity(), T::max);
    let eps = band * (T::one() + best.abs());
    match variant {
        XiVariant::Free => {
            let tied = utilities
                .iter()
                .enumerate()
                .filter(|&(_, &u)| u >= best - eps)
                .map(|(i, _)| i)
                .collect();
            (tied, false)
        }
        XiVariant::Clipped => {
            if best < -eps {
                (Vec::new(), true)
            } else {
                let tied = utilities
                    .iter()
                    .enumerate()
                    .filter(|&(_, &u)| u >= best - eps)
                    .map(|(i, _)| i)
                    .collect();
                (tied, best <= eps)
            }
        }
    }
}

/// Sends each point's mass to its argmax cell; Clipped opts out when the best
/// net utility is nonpositive. The band for tie detection is 1e-12 relative.
pub fn extract_partition<T: Scalar>(
    instance: &ProblemInstance<T>,
    p: &PriceVector<T>,
    variant: XiVariant,
    tie_rule: TieRule,
) -> Partition<T> {
    extract_partition_banded(instance, &p.prices, variant, tie_rule, T::c(1e-12))
}

/// As `extract_partition` with an explicit tie band (relative to value scale).
pub fn extract_partition_banded<T: Scalar>(
    instance: &ProblemInstance<T>,
    prices: &[T],
    variant: XiVariant,
    tie_rule: TieRule,
    band: T,
) -> Partition<T> {
    let n = instance.points();
    let agents = instance.agents();
    assert_eq!(prices.len(), agents, "price vector length must match agent count");
    let mut assignment = vec![vec![T::zero(); agents + 1]; n];
    let mut tie_points = Vec::new();

    for x in 0..n {
        let utilities = net_utilities(instance, prices, x);
        let (tied, opt_out) = point_options(&utilities, variant, band);
        let w = instance.weight(x);
        let n_options = tied.len() + usize::from(opt_out);
        if n_options > 1 {
            tie_points.push(x);
        }
        match tie_rule {
            TieRule::LowestIndex => {
                // Agents take precedence over opting out at an exact zero tie.
                if let Some(&i) = tied.first() {
                    assignment[x][i] = w;
                } else {
                    assignment[x][agents] = w;
                }
            }
            TieRule::ProportionalSplit => {
                if n_options == 0 {
                    assignment[x][agents] = w;
                } else {
                    let share = w / T::from_usize(n_options).unwrap();
                    for &i in &tied {
                        assignment[x][i] = share;
                    }
                    if opt_out {
                        assignment[x][agents] = share;
                    }
                }
            }
        }
    }

    Partition::from_assignment(assignment, tie_points)
}

/// Sum over points and real agents of assigned mass times wisdom.
pub fn total_profit<T: Scalar>(instance: &ProblemInstance<T>, partition: &Partition<T>) -> T {
    individual_values(instance, partition).into_iter().sum()
}

/// P_i = sum_x assignment[x][i] * psi_i(x).
pub fn individual_values<T: Scalar>(
    instance: &ProblemInstance<T>,
    partition: &Partition<T>,
) -> Vec<T> {
    let agents = instance.agents();
    let mut values = vec![T::zero(); agents];
    for (x, row) in partition.assignment.iter().enumerate() {
        for i in 0..agents {
            if row[i] != T::zero() {
                values[i] = values[i] + row[i] * instance.wisdoms.at(i, x);
            }
        }
    }
    values
}

/// Splits each individual value into the agent profit V^a_i = p_i * served
/// mass and the consumer surplus V^c_i = integral of (psi_i - p_i) over the
/// cell. The served mass (not the nominal capacity) keeps the identity
/// P_i = V^a_i + V^c_i valid in all regimes and at non-optimal prices.
pub fn value_decomposition<T: Scalar>(
    instance: &ProblemInstance<T>,
    partition: &Partition<T>,
    p: &PriceVector<T>,
) -> (Vec<T>, Vec<T>) {
    let agents = instance.agents();
    let values = individual_values(instance, partition);
    let agent_profits: Vec<T> = (0..agents)
        .map(|i| p.prices[i] * partition.cell_masses[i])
        .collect();
    let consumer_surpluses: Vec<T> = (0..agents)
        .map(|i| values[i] - agent_profits[i])
        .collect();
    (agent_profits, consumer_surpluses)
}

/// Individual values with their decomposition, ready for serialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValueReport<T> {
    pub individual_values: Vec<T>,
    pub total: T,
    pub agent_profits: Vec<T>,
    pub consumer_surpluses: Vec<T>,
    pub cell_masses: Vec<T>,
}

pub fn value_report<T: Scalar>(
    instance: &ProblemInstance<T>,
    partition: &Partition<T>,
    p: &PriceVector<T>,
) -> ValueReport<T> {
    let individual_values = individual_values(instance, partition);
    let total = individual_values.iter().copied().sum();
    let (agent_profits, consumer_surpluses) = value_decomposition(instance, partition, p);
    ValueReport {
        individual_values,
        total,
        agent_profits,
        consumer_surpluses,
        cell_masses: partition.cell_masses.clone(),
    }
}

/// One CSV row per agent: agent, individual value, V^a, V^c, served mass.
pub fn values_csv<T: Scalar>(report: &ValueReport<T>) -> String {
    let mut out = String::from("agent,individual_value,agent_profit,consumer_surplus,mass\n");
    for i in 0..report.individual_values.len() {
        out.push_str(&format!(
            "{},{:.15e},{:.15e},{:.15e},{:.15e}\n",
            i,
            report.individual_values[i].to_f64().unwrap(),
            report.agent_profits[i].to_f64().unwrap(),
            report.consumer_surpluses[i].to_f64().unwrap(),
            report.cell_masses[i].to_f64().unwrap(),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dual::Normalization;
    use crate::measure::instance_from_parts;
    use crate::Instance;

    fn two_point() -> Instance {
        instance_from_parts(
            &[0.5, 0.5],
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &[0.5, 0.5],
        )
    }

    fn prices(p: &[f64]) -> PriceVector<f64> {
        PriceVector {
            prices: p.to_vec(),
            normalization: Normalization::Raw,
        }
    }

    #[test]
    fn strict_argmax_extraction() {
        let inst = two_point();
        let part = extract_partition(&inst, &prices(&[0.0, 0.0]), XiVariant::Free, TieRule::LowestIndex);
        assert_eq!(part.cell_masses, vec![0.5, 0.5, 0.0]);
        assert!(part.tie_points.is_empty());
        assert_eq!(part.assignment[0][0], 0.5);
        assert_eq!(part.assignment[1][1], 0.5);
    }

    #[test]
    fn tie_resolved_lowest_index() {
        // p = (-1, 0): point b has net (1, 1) -- a tie; lowest index wins.
        let inst = two_point();
        let part = extract_partition(&inst, &prices(&[-1.0, 0.0]), XiVariant::Free, TieRule::LowestIndex);
        assert_eq!(part.tie_points, vec![1]);
        assert_eq!(part.assignment[1][0], 0.5);
        assert_eq!(part.assignment[1][1], 0.0);
    }

    #[test]
    fn clipped_zero_tie_records_opt_out() {
        // US instance, p = (0, 1): point b nets (-... , 0) -- indifferent
        // between agent 2 and opting out.
        let inst = instance_from_parts(
            &[0.5, 0.5],
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &[0.5, 0.25],
        );
        let part = extract_partition(&inst, &prices(&[0.0, 1.0]), XiVariant::Clipped, TieRule::LowestIndex);
        assert!(part.tie_points.contains(&1));
    }

    #[test]
    fn total_profit_examples() {
        let inst = two_point();
        let part = extract_partition(&inst, &prices(&[0.0, 0.0]), XiVariant::Free, TieRule::LowestIndex);
        assert!((total_profit(&inst, &part) - 1.0).abs() < 1e-15);

        let all_null = extract_partition(&inst, &prices(&[10.0, 10.0]), XiVariant::Clipped, TieRule::LowestIndex);
        assert_eq!(total_profit(&inst, &all_null), 0.0);
        assert_eq!(all_null.cell_masses, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn individual_values_single_agent_full_integral() {
        let inst = instance_from_parts(&[0.5, 0.5], &[vec![2.0, 4.0]], &[1.0]);
        let part = extract_partition(&inst, &prices(&[0.0]), XiVariant::Free, TieRule::LowestIndex);
        assert_eq!(individual_values(&inst, &part), vec![3.0]);
    }

    #[test]
    fn decomposition_identity_at_zero_and_shifted_prices() {
        let inst = two_point();
        let part = extract_partition(&inst, &prices(&[0.0, 0.0]), XiVariant::Free, TieRule::LowestIndex);
        let (va, vc) = value_decomposition(&inst, &part, &prices(&[0.0, 0.0]));
        assert_eq!(va, vec![0.0, 0.0]);
        assert_eq!(vc, vec![0.5, 0.5]);

        let (va, vc) = value_decomposition(&inst, &part, &prices(&[1.0, 1.0]));
        assert_eq!(va, vec![0.5, 0.5]);
        assert_eq!(vc, vec![0.0, 0.0]);
        let vals = individual_values(&inst, &part);
        for i in 0..2 {
            assert!((vals[i] - va[i] - vc[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn us_decomposition_hand_example() {
        // M = (0.5, 0.25), p = (0, 1): agent 1 serves a, agent 2 serves
        // 0.25 mass of b at price 1.
        let inst = instance_from_parts(
            &[0.5, 0.5],
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &[0.5, 0.25],
        );
        let assignment = vec![vec![0.5, 0.0, 0.0], vec![0.0, 0.25, 0.25]];
        let part = Partition::from_assignment(assignment, vec![]);
        let (va, vc) = value_decomposition(&inst, &part, &prices(&[0.0, 1.0]));
        assert_eq!(va, vec![0.0, 0.25]);
        assert_eq!(vc, vec![0.5, 0.0]);
    }
}
