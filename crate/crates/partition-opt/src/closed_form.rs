//! Fast path for multiplicative wisdom families psi_i = lambda_i * psi.
//!
//! For a scalar profile psi, `F*(m)` is the cumulative psi-value of the
//! lowest-m sublevel mass — the discrete Legendre transform of the sublevel
//! mass integral. With strictly increasing multipliers the optimal partition
//! is a stack of consecutive psi-level bands whose mass breakpoints depend
//! only on the capacities, giving closed-form individual and coalition
//! values.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{CoalitionGame, CoreStatus, GameError};
use crate::measure::CapacityVector;
use crate::Scalar;

#[derive(Debug, Error)]
pub enum ClosedFormError {
    #[error("mass {0} outside [0, total mass {1}]")]
    MassOutOfRange(f64, f64),
    #[error("multipliers must be strictly increasing and positive")]
    LambdaNotIncreasing,
    #[error("capacities must saturate the total mass for the closed form")]
    NotSaturated,
    #[error("expected {want} multipliers/capacities, got {got}")]
    ArityMismatch { want: usize, got: usize },
    #[error(transparent)]
    Game(#[from] GameError),
}

/// Scalar profile sorted ascending with cumulative mass and value tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormModel<T> {
    pub sorted_psi: Vec<T>,
    pub sorted_weights: Vec<T>,
    /// cum_mass[k] = mass of the k smallest-psi points (length n+1).
    pub cum_mass: Vec<T>,
    /// cum_value[k] = psi-weighted value of those points (length n+1).
    pub cum_value: Vec<T>,
    pub total_mass: T,
}

/// Band mass breakpoints cal_M_1 <= ... <= cal_M_{N+1} = mu(X), obtained by
/// peeling capacities off the top: cal_M_j = [cal_M_{j+1} - M_j]_+.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakpointVector<T> {
    pub cal_m: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormSolution<T> {
    pub breakpoints: BreakpointVector<T>,
    /// Psi-level thresholds at each mass breakpoint (band boundaries).
    pub level_thresholds: Vec<T>,
    pub individual_values: Vec<T>,
}

/// Sorts by psi ascending (stable in point order) and builds the prefix
/// tables backing F*.
pub fn build_model<T: Scalar>(psi: &[T], weights: &[T]) -> ClosedFormModel<T> {
    assert_eq!(psi.len(), weights.len());
    let mut order: Vec<usize> = (0..psi.len()).collect();
    order.sort_by(|&a, &b| psi[a].partial_cmp(&psi[b]).unwrap());
    let sorted_psi: Vec<T> = order.iter().map(|&k| psi[k]).collect();
    let sorted_weights: Vec<T> = order.iter().map(|&k| weights[k]).collect();
    let mut cum_mass = Vec::with_capacity(psi.len() + 1);
    let mut cum_value = Vec::with_capacity(psi.len() + 1);
    cum_mass.push(T::zero());
    cum_value.push(T::zero());
    let (mut m, mut v) = (T::zero(), T::zero());
    for k in 0..sorted_psi.len() {
        m = m + sorted_weights[k];
        v = v + sorted_weights[k] * sorted_psi[k];
        cum_mass.push(m);
        cum_value.push(v);
    }
    ClosedFormModel {
        sorted_psi,
        sorted_weights,
        cum_mass,
        cum_value,
        total_mass: m,
    }
}

/// F*(m): value of the lowest-m sublevel mass, linearly interpolated inside
/// the boundary point. Piecewise linear and convex (slopes are the sorted
/// psi values).
pub fn eval_f_star<T: Scalar>(model: &ClosedFormModel<T>, m: T) -> Result<T, ClosedFormError> {
    let tol = T::c(1e-9) * (T::one() + model.total_mass);
    if m < -tol || m > model.total_mass + tol {
        return Err(ClosedFormError::MassOutOfRange(
            m.to_f64().unwrap_or(f64::NAN),
            model.total_mass.to_f64().unwrap_or(f64::NAN),
        ));
    }
    let m = m.max(T::zero()).min(model.total_mass);
    // Largest k with cum_mass[k] <= m, by binary search.
    let mut lo = 0usize;
    let mut hi = model.cum_mass.len() - 1;
    while lo < hi {
        let mid = (lo + hi + 1) / 2;
        if model.cum_mass[mid] <= m {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    if lo == model.cum_mass.len() - 1 {
        return Ok(*model.cum_value.last().unwrap());
    }
    Ok(model.cum_value[lo] + (m - model.cum_mass[lo]) * model.sorted_psi[lo])
}

/// Psi level reached after consuming mass m from the bottom (band boundary
/// threshold; the right slope of F* at m).
pub fn level_at_mass<T: Scalar>(model: &ClosedFormModel<T>, m: T) -> T {
    let mut lo = 0usize;
    let mut hi = model.cum_mass.len() - 1;
    while lo < hi {
        let mid = (lo + hi + 1) / 2;
        if model.cum_mass[mid] <= m {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    let k = lo.min(model.sorted_psi.len() - 1);
    model.sorted_psi[k]
}

fn check_multiplicative_inputs<T: Scalar>(
    model: &ClosedFormModel<T>,
    lambdas: &[T],
    capacities: &[T],
) -> Result<(), ClosedFormError> {
    if lambdas.len() != capacities.len() {
        return Err(ClosedFormError::ArityMismatch {
            want: lambdas.len(),
            got: capacities.len(),
        });
    }
    if lambdas.is_empty()
        || lambdas[0] <= T::zero()
        || lambdas.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(ClosedFormError::LambdaNotIncreasing);
    }
    let total: T = capacities.iter().copied().sum();
    if (total - model.total_mass).abs() > T::c(1e-9) * (T::one() + model.total_mass) {
        return Err(ClosedFormError::NotSaturated);
    }
    Ok(())
}

/// Breakpoints cal_M and individual values P_i = lambda_i * (F*(cal_M_{i+1})
/// - F*(cal_M_i)); the top band goes to the largest multiplier.
pub fn closed_form_solution<T: Scalar>(
    model: &ClosedFormModel<T>,
    lambdas: &[T],
    capacities: &CapacityVector<T>,
) -> Result<ClosedFormSolution<T>, ClosedFormError> {
    let caps = &capacities.capacities;
    check_multiplicative_inputs(model, lambdas, caps)?;
    let n_agents = lambdas.len();

    let mut cal_m = vec![T::zero(); n_agents + 1];
    cal_m[n_agents] = model.total_mass;
    for j in (0..n_agents).rev() {
        cal_m[j] = (cal_m[j + 1] - caps[j]).max(T::zero());
    }

    let mut individual_values = Vec::with_capacity(n_agents);
    for i in 0..n_agents {
        let hi = eval_f_star(model, cal_m[i + 1])?;
        let lo = eval_f_star(model, cal_m[i])?;
        individual_values.push(lambdas[i] * (hi - lo));
    }
    let level_thresholds = cal_m.iter().map(|&m| level_at_mass(model, m)).collect();

    Ok(ClosedFormSolution {
        breakpoints: BreakpointVector { cal_m },
        level_thresholds,
        individual_values,
    })
}

/// Coalition values in closed form: with the top multiplier inside J the
/// coalition takes the top M_J mass, otherwise the bottom M_J mass at its own
/// best multiplier.
pub fn closed_form_game<T: Scalar>(
    model: &ClosedFormModel<T>,
    lambdas: &[T],
    capacities: &CapacityVector<T>,
) -> Result<CoalitionGame<T>, ClosedFormError> {
    let caps = &capacities.capacities;
    check_multiplicative_inputs(model, lambdas, caps)?;
    let n = lambdas.len();
    let full = (1usize << n) - 1;
    let top = n - 1; // lambdas strictly increasing: the last agent is maximal
    let f_total = eval_f_star(model, model.total_mass)?;

    let mut values = Vec::with_capacity(full + 1);
    values.push(T::zero());
    for mask in 1..=full {
        let mut m_j = T::zero();
        let mut lambda_j = T::zero();
        for i in 0..n {
            if mask & (1 << i) != 0 {
                m_j = m_j + caps[i];
                lambda_j = lambda_j.max(lambdas[i]);
            }
        }
        let value = if mask & (1 << top) != 0 {
            let rest = (model.total_mass - m_j).max(T::zero());
            lambdas[top] * (f_total - eval_f_star(model, rest)?)
        } else {
            lambda_j * eval_f_star(model, m_j)?
        };
        values.push(value);
    }
    Ok(CoalitionGame::new(values)?)
}

/// N=3 stability criterion: the core is nonempty iff
/// lambda_3 / lambda_2 > F*(M_1 + M_2) / (F*(M_1) + F*(M_2)), strictly.
pub fn stability_criterion_n3<T: Scalar>(
    model: &ClosedFormModel<T>,
    lambdas: &[T],
    capacities: &[T],
) -> Result<CoreStatus, ClosedFormError> {
    if lambdas.len() != 3 || capacities.len() != 3 {
        return Err(ClosedFormError::ArityMismatch {
            want: 3,
            got: lambdas.len().max(capacities.len()),
        });
    }
    check_multiplicative_inputs(model, lambdas, capacities)?;
    let lhs = lambdas[2] / lambdas[1];
    let rhs = eval_f_star(model, capacities[0] + capacities[1])?
        / (eval_f_star(model, capacities[0])? + eval_f_star(model, capacities[1])?);
    Ok(if lhs > rhs {
        CoreStatus::NonEmpty
    } else {
        CoreStatus::Empty
    })
}

/// CSV of (m, F*(m)) samples for plotting.
pub fn f_star_csv<T: Scalar>(model: &ClosedFormModel<T>, samples: usize) -> String {
    let mut out = String::from("m,f_star\n");
    let steps = samples.max(2) - 1;
    for k in 0..=steps {
        let m = model.total_mass * T::from_usize(k).unwrap() / T::from_usize(steps).unwrap();
        let v = eval_f_star(model, m).expect("sample inside range");
        out.push_str(&format!("{m},{v}\n"));
    }
    out
}
