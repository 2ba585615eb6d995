//! Discrete problem instances: consumer measure, wisdom matrix, capacities,
//! saturation regime, standing-assumption diagnostics, file I/O and generators.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{Instance, Real, Scalar};

/// Relative tolerance of the saturation zero-band: |slack| <= band * mu(X) => Saturated.
pub const REGIME_BAND: f64 = 1e-9;

/// Absolute tolerance for value comparisons in assumption diagnostics.
pub const TIE_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("failed to read instance file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed instance file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("validation failed for field `{field}`: {message}")]
    Validation { field: String, message: String },
}

impl MeasureError {
    pub fn validation(field: &str, message: impl Into<String>) -> Self {
        MeasureError::Validation {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

/// One consumer point: id, optional coordinate (generators only), positive mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointRecord<T> {
    pub id: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x: Option<T>,
    pub weight: T,
}

/// The distribution of consumers: weighted points with dense ids 0..n-1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMeasure<T> {
    pub points: Vec<PointRecord<T>>,
    pub total_mass: T,
}

impl<T: Scalar> DiscreteMeasure<T> {
    pub fn new(points: Vec<PointRecord<T>>) -> Result<Self, MeasureError> {
        let total_mass = points.iter().map(|p| p.weight).sum();
        let m = Self { points, total_mass };
        m.validate()?;
        Ok(m)
    }

    pub fn from_weights(weights: &[T]) -> Result<Self, MeasureError> {
        Self::new(
            weights
                .iter()
                .enumerate()
                .map(|(id, &weight)| PointRecord { id, x: None, weight })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn weights(&self) -> impl Iterator<Item = T> + '_ {
        self.points.iter().map(|p| p.weight)
    }

    pub fn validate(&self) -> Result<(), MeasureError> {
        if self.points.is_empty() {
            return Err(MeasureError::validation("points", "instance has no points"));
        }
        for (k, p) in self.points.iter().enumerate() {
            if p.id != k {
                return Err(MeasureError::validation(
                    "points.id",
                    format!("ids must be dense 0..n-1, found {} at position {k}", p.id),
                ));
            }
            if !(p.weight > T::zero()) || !p.weight.is_finite() {
                return Err(MeasureError::validation(
                    "points.weight",
                    format!("weight of point {} must be a positive finite real, got {}", p.id, p.weight),
                ));
            }
        }
        let sum: T = self.points.iter().map(|p| p.weight).sum();
        let rel = (sum - self.total_mass).abs() / sum.max(T::one());
        if rel > T::c(TIE_EPS) {
            return Err(MeasureError::validation(
                "total_mass",
                format!("total_mass {} disagrees with weight sum {}", self.total_mass, sum),
            ));
        }
        Ok(())
    }
}

/// N x n matrix; entry (i, x) is agent i's profit from serving point x.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WisdomMatrix<T> {
    pub values: Vec<Vec<T>>,
}

impl<T: Scalar> WisdomMatrix<T> {
    pub fn new(values: Vec<Vec<T>>) -> Self {
        Self { values }
    }

    pub fn agents(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, agent: usize) -> &[T] {
        &self.values[agent]
    }

    pub fn at(&self, agent: usize, point: usize) -> T {
        self.values[agent][point]
    }
}

/// Nonnegative capacity per agent, in mass units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityVector<T> {
    pub capacities: Vec<T>,
}

impl<T: Scalar> CapacityVector<T> {
    pub fn new(capacities: Vec<T>) -> Self {
        Self { capacities }
    }

    pub fn len(&self) -> usize {
        self.capacities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.capacities.is_empty()
    }

    pub fn total(&self) -> T {
        self.capacities.iter().copied().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegimeTag {
    UnderSaturated,
    Saturated,
    OverSaturated,
}

/// Saturation classification with the signed capacity slack sum(M) - mu(X).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regime<T> {
    pub tag: RegimeTag,
    pub slack: T,
}

/// Sign of sum(M) - mu(X) with a zero band of `REGIME_BAND * mu(X)`.
pub fn classify_regime<T: Scalar>(capacities: &CapacityVector<T>, total_mass: T) -> Regime<T> {
    let slack = capacities.total() - total_mass;
    let band = T::c(REGIME_BAND) * total_mass.abs();
    let tag = if slack.abs() <= band {
        RegimeTag::Saturated
    } else if slack > T::zero() {
        RegimeTag::OverSaturated
    } else {
        RegimeTag::UnderSaturated
    };
    Regime { tag, slack }
}

/// The full problem: (X, mu, psi, M) plus the derived regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemInstance<T> {
    pub measure: DiscreteMeasure<T>,
    pub wisdoms: WisdomMatrix<T>,
    pub capacities: CapacityVector<T>,
    pub regime: Regime<T>,
}

impl<T: Scalar> ProblemInstance<T> {
    pub fn new(
        measure: DiscreteMeasure<T>,
        wisdoms: WisdomMatrix<T>,
        capacities: CapacityVector<T>,
    ) -> Result<Self, MeasureError> {
        let regime = classify_regime(&capacities, measure.total_mass);
        let inst = Self {
            measure,
            wisdoms,
            capacities,
            regime,
        };
        inst.validate()?;
        Ok(inst)
    }

    /// Number of consumer points.
    pub fn points(&self) -> usize {
        self.measure.len()
    }

    /// Number of agents.
    pub fn agents(&self) -> usize {
        self.capacities.len()
    }

    pub fn total_mass(&self) -> T {
        self.measure.total_mass
    }

    pub fn weight(&self, point: usize) -> T {
        self.measure.points[point].weight
    }

    pub fn validate(&self) -> Result<(), MeasureError> {
        self.measure.validate()?;
        let n = self.points();
        let agents = self.agents();
        if agents == 0 {
            return Err(MeasureError::validation("capacities", "at least one agent required"));
        }
        if self.wisdoms.agents() != agents {
            return Err(MeasureError::validation(
                "wisdoms",
                format!(
                    "wisdom row count {} does not match capacity count {}",
                    self.wisdoms.agents(),
                    agents
                ),
            ));
        }
        for (i, row) in self.wisdoms.values.iter().enumerate() {
            if row.len() != n {
                return Err(MeasureError::validation(
                    "wisdoms",
                    format!("row {i} has {} entries, expected {n}", row.len()),
                ));
            }
            for (x, &v) in row.iter().enumerate() {
                if !(v >= T::zero()) || !v.is_finite() {
                    return Err(MeasureError::validation(
                        "wisdoms",
                        format!("entry ({i},{x}) must be a nonnegative finite real, got {v}"),
                    ));
                }
            }
        }
        for (i, &m) in self.capacities.capacities.iter().enumerate() {
            if !(m >= T::zero()) || !m.is_finite() {
                return Err(MeasureError::validation(
                    "capacities",
                    format!("capacity {i} must be a nonnegative finite real, got {m}"),
                ));
            }
        }
        let recomputed = classify_regime(&self.capacities, self.measure.total_mass);
        if recomputed.tag != self.regime.tag {
            return Err(MeasureError::validation(
                "regime",
                "regime tag inconsistent with capacities and total mass",
            ));
        }
        Ok(())
    }

    /// Recompute the regime in place (after editing capacities or weights).
    pub fn reclassify(&mut self) {
        self.regime = classify_regime(&self.capacities, self.measure.total_mass);
    }
}

/// Diagnostics for the discrete analogue of the paper's standing assumptions.
///
/// Never a rejection: discrete instances generically violate the atomless
/// tie-freeness conditions, so violations are reported with their masses.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AssumptionReport<T> {
    /// (agent pair (i, j), repeated difference value r, mass carrying it).
    pub tie_violations: Vec<((usize, usize), T, T)>,
    /// Per-agent mass on points where psi_i <= 0.
    pub zero_wisdom_mass: Vec<T>,
    /// US regime only: per-agent (repeated value r, mass) entries.
    pub level_set_violations: Vec<Vec<(T, T)>>,
}

impl<T: Scalar> AssumptionReport<T> {
    /// True when no tie or level-set violation was found. Zero-wisdom mass is
    /// a warning, not a violation: exact zeros on isolated points are harmless
    /// under tie reporting and the sharpness constructions rely on them.
    pub fn is_empty(&self) -> bool {
        self.tie_violations.is_empty() && self.level_set_violations.iter().all(|v| v.is_empty())
    }
}

/// Groups `values` (paired with weights) into clusters equal within `TIE_EPS`
/// and returns (value, total mass) for clusters spanning at least two points.
fn repeated_values<T: Scalar>(pairs: &mut Vec<(T, T)>) -> Vec<(T, T)> {
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let eps = T::c(TIE_EPS);
    let mut out = Vec::new();
    let mut k = 0;
    while k < pairs.len() {
        let mut j = k + 1;
        let mut mass = pairs[k].1;
        while j < pairs.len() && (pairs[j].0 - pairs[j - 1].0).abs() <= eps {
            mass = mass + pairs[j].1;
            j += 1;
        }
        if j - k >= 2 {
            out.push((pairs[k].0, mass));
        }
        k = j;
    }
    out
}

/// Enumerates ties of pairwise wisdom differences, nonpositive-wisdom mass and,
/// in the under-saturated regime, repeated per-agent wisdom values.
pub fn check_assumptions<T: Scalar>(instance: &ProblemInstance<T>) -> AssumptionReport<T> {
    let n = instance.points();
    let agents = instance.agents();
    let mut report = AssumptionReport {
        tie_violations: Vec::new(),
        zero_wisdom_mass: vec![T::zero(); agents],
        level_set_violations: vec![Vec::new(); agents],
    };

    for i in 0..agents {
        for j in (i + 1)..agents {
            let mut diffs: Vec<(T, T)> = (0..n)
                .map(|x| (instance.wisdoms.at(i, x) - instance.wisdoms.at(j, x), instance.weight(x)))
                .collect();
            for (r, mass) in repeated_values(&mut diffs) {
                report.tie_violations.push(((i, j), r, mass));
            }
        }
    }

    for i in 0..agents {
        let mut mass = T::zero();
        for x in 0..n {
            if instance.wisdoms.at(i, x) <= T::zero() {
                mass = mass + instance.weight(x);
            }
        }
        report.zero_wisdom_mass[i] = mass;
    }

    if instance.regime.tag == RegimeTag::UnderSaturated {
        for i in 0..agents {
            let mut vals: Vec<(T, T)> = (0..n)
                .map(|x| (instance.wisdoms.at(i, x), instance.weight(x)))
                .collect();
            report.level_set_violations[i] = repeated_values(&mut vals);
        }
    }

    report
}

// ---------------------------------------------------------------------------
// File I/O (f64 schema)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct InstanceFile {
    points: Vec<PointRecord<Real>>,
    wisdoms: Vec<Vec<Real>>,
    capacities: Vec<Real>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<serde_json::Value>,
}

/// Loads and validates an instance from the documented JSON schema.
pub fn load_instance(path: impl AsRef<Path>) -> Result<Instance, MeasureError> {
    let text = std::fs::read_to_string(path)?;
    parse_instance(&text)
}

pub fn parse_instance(text: &str) -> Result<Instance, MeasureError> {
    let file: InstanceFile = serde_json::from_str(text)?;
    ProblemInstance::new(
        DiscreteMeasure::new(file.points)?,
        WisdomMatrix::new(file.wisdoms),
        CapacityVector::new(file.capacities),
    )
}

pub fn instance_to_json(instance: &Instance) -> String {
    let file = InstanceFile {
        points: instance.measure.points.clone(),
        wisdoms: instance.wisdoms.values.clone(),
        capacities: instance.capacities.capacities.clone(),
        meta: None,
    };
    serde_json::to_string_pretty(&file).expect("instance serialization cannot fail")
}

pub fn save_instance(instance: &Instance, path: impl AsRef<Path>) -> Result<(), MeasureError> {
    std::fs::write(path, instance_to_json(instance))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

/// Instance families for tests, demos and the sharpness builders.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum GeneratorFamily {
    /// psi(x) = x on a uniform midpoint grid over [0,1], rows lambda_i * psi.
    UniformGridMultiplicative {
        n: usize,
        lambdas: Vec<Real>,
        capacities: Vec<Real>,
    },
    /// Wisdoms drawn uniformly from a positive range; differences distinct a.s.
    RandomPositive {
        n: usize,
        agents: usize,
        capacities: Vec<Real>,
    },
    /// Piecewise-linear profiles on [0,1] through prescribed control points,
    /// sampled at midpoints of n uniform cells. Used by the sharpness builders.
    BumpProfile {
        n: usize,
        /// Per-agent control polyline; x strictly increasing, values >= 0.
        profiles: Vec<Vec<(Real, Real)>>,
        capacities: Vec<Real>,
    },
}

/// Uniform midpoint grid over [0,1]: x_k = (k + 1/2)/n, weight 1/n each.
pub fn unit_grid(n: usize) -> (Vec<Real>, Vec<Real>) {
    let xs: Vec<Real> = (0..n).map(|k| (k as Real + 0.5) / n as Real).collect();
    let ws = vec![1.0 / n as Real; n];
    (xs, ws)
}

fn grid_measure(xs: &[Real], ws: &[Real]) -> Result<Measure, MeasureError> {
    DiscreteMeasure::new(
        xs.iter()
            .zip(ws)
            .enumerate()
            .map(|(id, (&x, &weight))| PointRecord { id, x: Some(x), weight })
            .collect(),
    )
}

use crate::Measure;

/// Evaluates a control polyline at `x` by linear interpolation, clamped to the
/// end values outside the control range.
pub fn interpolate_polyline(polyline: &[(Real, Real)], x: Real) -> Real {
    match polyline.iter().position(|&(cx, _)| cx >= x) {
        None => polyline.last().map(|&(_, v)| v).unwrap_or(0.0),
        Some(0) => polyline[0].1,
        Some(k) => {
            let (x0, v0) = polyline[k - 1];
            let (x1, v1) = polyline[k];
            v0 + (v1 - v0) * (x - x0) / (x1 - x0)
        }
    }
}

/// Deterministic instance generation; identical (family, seed) pairs produce
/// identical instances.
pub fn generate_instance(family: &GeneratorFamily, seed: u64) -> Result<Instance, MeasureError> {
    match family {
        GeneratorFamily::UniformGridMultiplicative { n, lambdas, capacities } => {
            if *n == 0 {
                return Err(MeasureError::validation("n", "grid must have at least one cell"));
            }
            if lambdas.len() != capacities.len() {
                return Err(MeasureError::validation(
                    "lambdas",
                    "multiplier count must match capacity count",
                ));
            }
            if lambdas.windows(2).any(|w| w[0] >= w[1]) || lambdas.first().map_or(true, |&l| l <= 0.0) {
                return Err(MeasureError::validation(
                    "lambdas",
                    "multipliers must be strictly increasing and positive",
                ));
            }
            let (xs, ws) = unit_grid(*n);
            let wisdoms = lambdas
                .iter()
                .map(|&l| xs.iter().map(|&x| l * x).collect())
                .collect();
            ProblemInstance::new(
                grid_measure(&xs, &ws)?,
                WisdomMatrix::new(wisdoms),
                CapacityVector::new(capacities.clone()),
            )
        }
        GeneratorFamily::RandomPositive { n, agents, capacities } => {
            if capacities.len() != *agents {
                return Err(MeasureError::validation(
                    "capacities",
                    "capacity count must match agent count",
                ));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (xs, ws) = unit_grid(*n);
            let wisdoms = (0..*agents)
                .map(|_| (0..*n).map(|_| rng.gen_range(0.05..10.0)).collect())
                .collect();
            ProblemInstance::new(
                grid_measure(&xs, &ws)?,
                WisdomMatrix::new(wisdoms),
                CapacityVector::new(capacities.clone()),
            )
        }
        GeneratorFamily::BumpProfile { n, profiles, capacities } => {
            if profiles.len() != capacities.len() {
                return Err(MeasureError::validation(
                    "profiles",
                    "profile count must match capacity count",
                ));
            }
            for (i, poly) in profiles.iter().enumerate() {
                if poly.is_empty() {
                    return Err(MeasureError::validation(
                        "profiles",
                        format!("profile {i} has no control points"),
                    ));
                }
                if poly.windows(2).any(|w| w[0].0 >= w[1].0) {
                    return Err(MeasureError::validation(
                        "profiles",
                        format!("profile {i} control x values must be strictly increasing"),
                    ));
                }
                if poly.iter().any(|&(_, v)| v < 0.0) {
                    return Err(MeasureError::validation(
                        "profiles",
                        format!("profile {i} has a negative control value"),
                    ));
                }
            }
            let (xs, ws) = unit_grid(*n);
            let wisdoms = profiles
                .iter()
                .map(|poly| xs.iter().map(|&x| interpolate_polyline(poly, x)).collect())
                .collect();
            ProblemInstance::new(
                grid_measure(&xs, &ws)?,
                WisdomMatrix::new(wisdoms),
                CapacityVector::new(capacities.clone()),
            )
        }
    }
}

/// Convenience constructor used throughout the test suites.
pub fn instance_from_parts<T: Scalar>(
    weights: &[T],
    wisdom_rows: &[Vec<T>],
    capacities: &[T],
) -> ProblemInstance<T> {
    ProblemInstance::new(
        DiscreteMeasure::from_weights(weights).unwrap(),
        WisdomMatrix::new(wisdom_rows.to_vec()),
        CapacityVector::new(capacities.to_vec()),
    )
    .unwrap()
}

/// Draws a random saturated/US/OS instance; used by sweeps and acceptance.
pub fn random_instance(
    n: usize,
    agents: usize,
    regime: RegimeTag,
    seed: u64,
) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    // Random positive capacity shares, rescaled to hit the requested regime.
    let shares: Vec<Real> = (0..agents).map(|_| rng.gen_range(0.2..1.0)).collect();
    let total: Real = shares.iter().sum();
    let target = match regime {
        RegimeTag::Saturated => 1.0,
        RegimeTag::UnderSaturated => rng.gen_range(0.3..0.9),
        RegimeTag::OverSaturated => rng.gen_range(1.1..2.0),
    };
    let capacities: Vec<Real> = shares.iter().map(|s| s / total * target).collect();
    generate_instance(
        &GeneratorFamily::RandomPositive { n, agents, capacities },
        seed,
    )
    .expect("random family parameters are valid")
}

/// Groups report entries by agent pair for human-readable output.
pub fn tie_summary<T: Scalar>(report: &AssumptionReport<T>) -> BTreeMap<(usize, usize), usize> {
    let mut map = BTreeMap::new();
    for &(pair, _, _) in &report.tie_violations {
        *map.entry(pair).or_insert(0) += 1;
    }
    map
}
