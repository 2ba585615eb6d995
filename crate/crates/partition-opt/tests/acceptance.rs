//! Acceptance gate: twelve end-to-end criteria covering duality, gradients,
//! closed forms, coalition games, core certificates, and the monotonicity
//! bounds with their sharpness demonstrations. Each test prints a single
//! pass/fail line (visible with `--nocapture`).

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use partition_opt::closed_form::{
    build_model, closed_form_game, closed_form_solution, stability_criterion_n3,
};
use partition_opt::dual::{
    eval_xi, solve_dual_with_partition, subgradient_xi, SolveOptions, TieRule, XiVariant,
};
use partition_opt::game::{build_game, check_superadditive, core_check, CoalitionGame, CoreStatus};
use partition_opt::measure::{
    generate_instance, instance_from_parts, random_instance, CapacityVector, GeneratorFamily,
    RegimeTag,
};
use partition_opt::oracle::transportation_lp;
use partition_opt::values::individual_values;
use partition_opt::{Instance, Real};

fn criterion(id: usize, name: &str, body: impl FnOnce() -> Result<(), String>) {
    match body() {
        Ok(()) => println!("criterion {id:2} ({name}): PASS"),
        Err(msg) => {
            println!("criterion {id:2} ({name}): FAIL — {msg}");
            panic!("acceptance criterion {id} failed: {msg}");
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

fn regime_from_index(k: usize) -> RegimeTag {
    match k % 3 {
        0 => RegimeTag::Saturated,
        1 => RegimeTag::UnderSaturated,
        _ => RegimeTag::OverSaturated,
    }
}

fn variant_for(instance: &Instance) -> XiVariant {
    if instance.regime.tag == RegimeTag::OverSaturated {
        XiVariant::Clipped
    } else {
        XiVariant::Free
    }
}

/// Random capacity shares on the simplex, scaled to `target` total.
fn random_simplex(rng: &mut ChaCha8Rng, agents: usize, target: Real) -> Vec<Real> {
    let shares: Vec<Real> = (0..agents).map(|_| rng.gen_range(0.2..1.0)).collect();
    let total: Real = shares.iter().sum();
    shares.iter().map(|s| s / total * target).collect()
}

#[test]
fn criterion_01_strong_duality() {
    criterion(1, "strong duality dual vs transportation LP", || {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        for k in 0..100 {
            let n = rng.gen_range(10..=200);
            let agents = rng.gen_range(2..=5);
            let inst = random_instance(n, agents, regime_from_index(k), rng.gen());
            let report = solve_dual_with_partition(&inst, &SolveOptions::default()).report;
            ensure!(report.converged, "instance {k} did not converge");
            let lp = transportation_lp(&inst);
            let gap = (report.dual_value - lp.objective).abs();
            ensure!(
                gap <= 1e-6 * (1.0 + lp.objective.abs()),
                "instance {k} (n={n}, N={agents}): gap {gap} between dual {} and primal {}",
                report.dual_value,
                lp.objective
            );
        }
        let elapsed = start.elapsed();
        ensure!(
            elapsed.as_secs_f64() <= 30.0,
            "runtime {:.1}s exceeds the 30s budget",
            elapsed.as_secs_f64()
        );
        Ok(())
    });
}

#[test]
fn criterion_02_subgradient_finite_differences() {
    criterion(2, "subgradient matches central differences", || {
        let mut rng = ChaCha8Rng::seed_from_u64(202);
        let mut accepted = 0;
        let mut draws = 0;
        while accepted < 100 {
            draws += 1;
            ensure!(draws < 10_000, "could not find 100 tie-free price points");
            let inst = random_instance(20, 3, regime_from_index(draws), rng.gen());
            let variant = variant_for(&inst);
            let p: Vec<Real> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
            // Only tie-free points: every consumer's best option must win by a
            // margin well above the differencing step.
            let tie_free = (0..inst.points()).all(|x| {
                let mut us: Vec<Real> = (0..3).map(|i| inst.wisdoms.at(i, x) - p[i]).collect();
                if variant == XiVariant::Clipped {
                    us.push(0.0);
                }
                us.sort_by(|a, b| b.partial_cmp(a).unwrap());
                us[0] - us[1] > 1e-4
            });
            if !tie_free {
                continue;
            }
            accepted += 1;
            let g = subgradient_xi(&inst, &p, variant, TieRule::LowestIndex);
            let h = 1e-6;
            for i in 0..3 {
                let mut hi = p.clone();
                let mut lo = p.clone();
                hi[i] += h;
                lo[i] -= h;
                let fd =
                    (eval_xi(&inst, &hi, variant) - eval_xi(&inst, &lo, variant)) / (2.0 * h);
                ensure!(
                    (fd - g[i]).abs() <= 1e-6,
                    "draw {draws} agent {i}: finite difference {fd} vs subgradient {}",
                    g[i]
                );
            }
        }
        Ok(())
    });
}

#[test]
fn criterion_03_shift_identity() {
    criterion(3, "uniform price shift identity", || {
        let mut rng = ChaCha8Rng::seed_from_u64(303);
        for k in 0..100 {
            let inst = random_instance(24, 3, regime_from_index(k), rng.gen());
            let p: Vec<Real> = (0..3).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let gamma: Real = rng.gen_range(-5.0..5.0);
            let base = eval_xi(&inst, &p, XiVariant::Free);
            let shifted_p: Vec<Real> = p.iter().map(|&v| v + gamma).collect();
            let shifted = eval_xi(&inst, &shifted_p, XiVariant::Free);
            let expected = base - gamma * inst.total_mass();
            ensure!(
                (shifted - expected).abs() <= 1e-12 * (1.0 + expected.abs()),
                "draw {k}: {shifted} vs {expected}"
            );
        }
        Ok(())
    });
}

#[test]
fn criterion_04_closed_form_reproduction() {
    criterion(4, "multiplicative closed-form values", || {
        let n = 10_000;
        let lambdas = [1.0, 2.0];
        let caps = [0.5, 0.5];
        let inst = generate_instance(
            &GeneratorFamily::UniformGridMultiplicative {
                n,
                lambdas: lambdas.to_vec(),
                capacities: caps.to_vec(),
            },
            0,
        )
        .map_err(|e| e.to_string())?;
        let psi: Vec<Real> = (0..n).map(|x| inst.wisdoms.at(0, x)).collect();
        let weights: Vec<Real> = inst.measure.weights().collect();
        let model = build_model(&psi, &weights);
        let closed =
            closed_form_solution(&model, &lambdas, &inst.capacities).map_err(|e| e.to_string())?;
        let expected = [0.125, 0.75];
        for i in 0..2 {
            ensure!(
                (closed.individual_values[i] - expected[i]).abs() <= 1e-3,
                "agent {i}: closed form {} vs analytic {}",
                closed.individual_values[i],
                expected[i]
            );
        }
        let sol = solve_dual_with_partition(&inst, &SolveOptions::default());
        ensure!(sol.report.converged, "generic solver did not converge");
        let generic = individual_values(&inst, &sol.partition);
        for i in 0..2 {
            ensure!(
                (generic[i] - closed.individual_values[i]).abs() <= 1e-6,
                "agent {i}: generic {} vs closed form {}",
                generic[i],
                closed.individual_values[i]
            );
        }
        Ok(())
    });
}

#[test]
fn criterion_05_game_closed_forms() {
    criterion(5, "coalition game closed forms", || {
        let n = 10_000;
        let lambdas = [1.0, 2.0, 4.0];
        let third = 1.0 / 3.0;
        let caps = CapacityVector::new(vec![third, third, third]);
        let inst = generate_instance(
            &GeneratorFamily::UniformGridMultiplicative {
                n,
                lambdas: lambdas.to_vec(),
                capacities: caps.capacities.clone(),
            },
            0,
        )
        .map_err(|e| e.to_string())?;
        let psi: Vec<Real> = (0..n).map(|x| inst.wisdoms.at(0, x)).collect();
        let weights: Vec<Real> = inst.measure.weights().collect();
        let model = build_model(&psi, &weights);
        let closed = closed_form_game(&model, &lambdas, &caps).map_err(|e| e.to_string())?;
        // Bitmask order: {}, {1}, {2}, {1,2}, {3}, {1,3}, {2,3}, {1,2,3}.
        let expected = [
            0.0,
            1.0 / 18.0,
            1.0 / 9.0,
            4.0 / 9.0,
            10.0 / 9.0,
            16.0 / 9.0,
            16.0 / 9.0,
            2.0,
        ];
        for (mask, &want) in expected.iter().enumerate() {
            ensure!(
                (closed.values[mask] - want).abs() <= 1e-6,
                "closed-form mask {mask}: {} vs {want}",
                closed.values[mask]
            );
        }
        let generic = build_game(&inst).map_err(|e| e.to_string())?;
        for (mask, &want) in expected.iter().enumerate() {
            ensure!(
                (generic.values[mask] - want).abs() <= 1e-6,
                "generic mask {mask}: {} vs {want}",
                generic.values[mask]
            );
        }
        Ok(())
    });
}

#[test]
fn criterion_06_core_checks() {
    criterion(6, "core certificates and stability criterion", || {
        // Three-player game with zero singletons, 3/4 pairs, grand value 1:
        // the pair collection with weights 1/2 is over-demanding.
        let game: CoalitionGame<Real> =
            CoalitionGame::new(vec![0.0, 0.0, 0.0, 0.75, 0.0, 0.75, 0.75, 1.0])
                .map_err(|e| e.to_string())?;
        let cert = core_check(&game);
        ensure!(cert.status == CoreStatus::Empty, "expected empty core, got {:?}", cert.status);
        let collection = cert
            .violating_collection
            .ok_or("missing violating collection")?;
        let pairs = [0b011usize, 0b101, 0b110];
        for &pair in &pairs {
            let weight = collection
                .iter()
                .find(|&&(mask, _)| mask == pair)
                .map(|&(_, w)| w)
                .ok_or_else(|| format!("pair {pair:#05b} missing from the certificate"))?;
            ensure!(
                (weight - 0.5).abs() <= 1e-9,
                "pair {pair:#05b} weight {weight} != 1/2"
            );
        }

        // Multiplicative game with multipliers (1, 2, 5) is stable.
        let n = 2_000;
        let (psi, weights): (Vec<Real>, Vec<Real>) = {
            let inst = generate_instance(
                &GeneratorFamily::UniformGridMultiplicative {
                    n,
                    lambdas: vec![1.0, 2.0, 5.0],
                    capacities: vec![1.0 / 3.0; 3],
                },
                0,
            )
            .map_err(|e| e.to_string())?;
            (
                (0..n).map(|x| inst.wisdoms.at(0, x)).collect(),
                inst.measure.weights().collect(),
            )
        };
        let model = build_model(&psi, &weights);
        let caps = CapacityVector::new(vec![1.0 / 3.0; 3]);
        let stable =
            closed_form_game(&model, &[1.0, 2.0, 5.0], &caps).map_err(|e| e.to_string())?;
        ensure!(
            core_check(&stable).status == CoreStatus::NonEmpty,
            "(1,2,5) game should have a nonempty core"
        );

        // The explicit three-player criterion agrees with the LP check.
        let mut rng = ChaCha8Rng::seed_from_u64(606);
        for k in 0..50 {
            let mut lambdas: Vec<Real> = (0..3).map(|_| rng.gen_range(0.2..6.0)).collect();
            lambdas.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if lambdas.windows(2).any(|w| w[1] - w[0] < 1e-3) {
                continue;
            }
            let caps = CapacityVector::new(random_simplex(&mut rng, 3, 1.0));
            let game = closed_form_game(&model, &lambdas, &caps).map_err(|e| e.to_string())?;
            let lp_status = core_check(&game).status;
            let criterion_status = stability_criterion_n3(&model, &lambdas, &caps.capacities)
                .map_err(|e| e.to_string())?;
            ensure!(
                lp_status == criterion_status,
                "draw {k}: LP {lp_status:?} vs criterion {criterion_status:?} \
                 (lambdas {lambdas:?}, caps {:?})",
                caps.capacities
            );
        }
        Ok(())
    });
}

#[test]
fn criterion_07_superadditivity() {
    criterion(7, "superadditivity of multiplicative games", || {
        let mut rng = ChaCha8Rng::seed_from_u64(707);
        for k in 0..50 {
            let agents = rng.gen_range(2..=6);
            let mut lambdas: Vec<Real> = (0..agents).map(|_| rng.gen_range(0.2..6.0)).collect();
            lambdas.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if lambdas.windows(2).any(|w| w[1] - w[0] < 1e-3) {
                continue;
            }
            let capacities = random_simplex(&mut rng, agents, 1.0);
            let inst = generate_instance(
                &GeneratorFamily::UniformGridMultiplicative {
                    n: 40,
                    lambdas,
                    capacities,
                },
                rng.gen(),
            )
            .map_err(|e| e.to_string())?;
            let game = build_game(&inst).map_err(|e| e.to_string())?;
            let violations = check_superadditive(&game);
            ensure!(
                violations.is_empty(),
                "instance {k} (N={agents}): {} superadditivity violations, first {:?}",
                violations.len(),
                violations.first()
            );
        }
        Ok(())
    });
}

#[test]
fn criterion_08_scale_and_shift_bounds() {
    criterion(8, "scale lower bound and shift equality", || {
        let mut rng = ChaCha8Rng::seed_from_u64(808);
        for k in 0..50 {
            let inst = random_instance(24, 3, regime_from_index(k), rng.gen());
            for beta in [1.1, 1.5, 2.0, 4.0] {
                let r = partition_opt::monotonicity::verify_scale_bound(&inst, beta)
                    .map_err(|e| e.to_string())?;
                ensure!(
                    r.perturbed_value >= beta * r.baseline_value - 1e-9,
                    "instance {k} beta {beta}: {} < {}",
                    r.perturbed_value,
                    beta * r.baseline_value
                );
            }
        }
        for k in 0..50 {
            let regime = if k % 2 == 0 {
                RegimeTag::Saturated
            } else {
                RegimeTag::UnderSaturated
            };
            let inst = random_instance(24, 3, regime, rng.gen());
            for lambda in [0.1, 1.0] {
                let r = partition_opt::monotonicity::verify_shift_equality(&inst, lambda)
                    .map_err(|e| e.to_string())?;
                let gap = (r.perturbed_value - r.baseline_value
                    - lambda * inst.capacities.capacities[0])
                    .abs();
                ensure!(
                    gap <= 1e-9,
                    "instance {k} lambda {lambda}: shift identity off by {gap}"
                );
            }
        }
        Ok(())
    });
}

#[test]
fn criterion_09_general_lower_bound_and_sharpness() {
    criterion(9, "general lower bound with sharpness", || {
        let mut rng = ChaCha8Rng::seed_from_u64(909);
        for k in 0..500 {
            let inst = random_instance(16, 3, regime_from_index(k), rng.gen());
            let beta: Real = rng.gen_range(1.05..5.0);
            let row: Vec<Real> = inst
                .wisdoms
                .row(0)
                .iter()
                .map(|&v| beta * v + rng.gen_range(0.0..2.0))
                .collect();
            let r = partition_opt::monotonicity::verify_general_lower_bound(&inst, &row, beta)
                .map_err(|e| e.to_string())?;
            ensure!(
                r.satisfied,
                "perturbation {k} (beta {beta}): {} < {}",
                r.perturbed_value,
                r.bound_value
            );
        }
        let (inst, row) =
            partition_opt::monotonicity::build_sharpness_new(3.0, 2.5).map_err(|e| e.to_string())?;
        let r = partition_opt::monotonicity::verify_general_lower_bound(&inst, &row, 3.0)
            .map_err(|e| e.to_string())?;
        ensure!(r.satisfied, "sharpness instance violates the bound: {r:?}");
        let ratio = r.perturbed_value / r.baseline_value;
        ensure!(
            (2.0..=2.45).contains(&ratio),
            "sharpness ratio {ratio} outside [2.0, 2.45]"
        );
        ensure!(
            r.perturbed_value < 2.5 * r.baseline_value,
            "sharpness instance fails to undercut the naive 2.5x scaling"
        );
        Ok(())
    });
}

#[test]
fn criterion_10_decrease_bound_and_sharpness() {
    criterion(10, "decrease bound with sharpness", || {
        let mut rng = ChaCha8Rng::seed_from_u64(1010);
        for k in 0..500 {
            let regime = if k % 2 == 0 {
                RegimeTag::Saturated
            } else {
                RegimeTag::UnderSaturated
            };
            let inst = random_instance(16, 3, regime, rng.gen());
            let beta: Real = rng.gen_range(1.05..1.95);
            let lambda: Real = rng.gen_range(0.1..2.0);
            let row: Vec<Real> = inst
                .wisdoms
                .row(0)
                .iter()
                .map(|&v| beta * v + lambda * rng.gen_range(0.0..1.0))
                .collect();
            let r =
                partition_opt::monotonicity::verify_decrease_bound(&inst, &row, beta, lambda)
                    .map_err(|e| e.to_string())?;
            ensure!(
                r.satisfied,
                "perturbation {k} (beta {beta}, lambda {lambda}): {} < {}",
                r.perturbed_value,
                r.bound_value
            );
        }
        let m1 = 0.01;
        let (beta, lambda) = (1.5, 1.0);
        let (inst, row) = partition_opt::monotonicity::build_sharpness_new1(beta, lambda, 0.9)
            .map_err(|e| e.to_string())?;
        let r = partition_opt::monotonicity::verify_decrease_bound(&inst, &row, beta, lambda)
            .map_err(|e| e.to_string())?;
        ensure!(r.satisfied, "sharpness instance violates the bound: {r:?}");
        let drop = r.baseline_value - r.perturbed_value;
        let cap = m1 * lambda * (2.0 - beta) / (beta - 1.0);
        ensure!(drop >= 0.9 * m1, "drop {drop} below 0.9 M1");
        ensure!(drop <= cap + 0.02 * m1, "drop {drop} above the cap window {cap}");
        Ok(())
    });
}

#[test]
fn criterion_11_total_value_concavity() {
    criterion(11, "midpoint concavity in capacities", || {
        let mut rng = ChaCha8Rng::seed_from_u64(1111);
        for k in 0..50 {
            let inst = random_instance(16, 3, RegimeTag::Saturated, rng.gen());
            let weights: Vec<Real> = inst.measure.weights().collect();
            let total = inst.total_mass();
            let caps_a = random_simplex(&mut rng, 3, total);
            let caps_b = random_simplex(&mut rng, 3, total);
            let value_at = |caps: &[Real]| {
                let sub = instance_from_parts(&weights, &inst.wisdoms.values, caps);
                transportation_lp(&sub).objective
            };
            let va = value_at(&caps_a);
            let vb = value_at(&caps_b);
            let mid: Vec<Real> = caps_a
                .iter()
                .zip(&caps_b)
                .map(|(&a, &b)| 0.5 * (a + b))
                .collect();
            let vm = value_at(&mid);
            ensure!(
                vm >= 0.5 * (va + vb) - 1e-9,
                "instance {k}: midpoint {vm} below average {}",
                0.5 * (va + vb)
            );
        }
        Ok(())
    });
}

#[test]
fn criterion_12_effective_capacities() {
    criterion(12, "over-saturated effective capacities", || {
        let mut rng = ChaCha8Rng::seed_from_u64(1212);
        for k in 0..50 {
            let inst = random_instance(24, 3, RegimeTag::OverSaturated, rng.gen());
            let sol = solve_dual_with_partition(&inst, &SolveOptions::default());
            ensure!(sol.report.converged, "instance {k} did not converge");
            let lp = transportation_lp(&inst);
            let served = lp.served_per_agent();
            for i in 0..3 {
                ensure!(
                    (sol.report.subgradient_residual[i] - served[i]).abs() <= 1e-6,
                    "instance {k} agent {i}: solver m-hat {} vs oracle {}",
                    sol.report.subgradient_residual[i],
                    served[i]
                );
            }
        }
        Ok(())
    });
}
