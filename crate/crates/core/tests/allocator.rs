use mcsh::allocator::{
    allocate_layers, allocation_record, allocation_sweep, baseline_cost, hessian_sensitivity,
    solve_bruteforce, solve_dp, AllocationProblem, BitAllocation, CostInputs, CostKind,
};
use mcsh::importance::{
    importance_cost, Calibration, CalibrationSet, CostTable, ExpertStat, ExpertStats,
    QuantErrorTable,
};
use mcsh::moe::{MoEConfig, MoEModel};
use mcsh::quant::{binarize, rtn_quantize};
use mcsh::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_costs(n: usize, rng: &mut ChaCha8Rng, monotone: bool) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| {
            let mut c = [
                rng.random::<f64>(),
                rng.random::<f64>(),
                rng.random::<f64>(),
            ];
            if rng.random_bool(0.2) {
                // exact ties between experts
                c = [0.5, 0.25, 0.125];
            }
            if monotone {
                c.sort_by(|a, b| b.partial_cmp(a).unwrap());
            }
            c
        })
        .collect()
}

fn check_constraints(p: &AllocationProblem, a: &BitAllocation) {
    assert_eq!(a.bits.len(), p.costs.len());
    assert!(a.bits.iter().all(|b| (1..=3).contains(b)));
    assert_eq!(a.bits.iter().map(|&b| b as usize).sum::<usize>(), p.budget);
    if p.coverage && p.costs.len() >= 2 {
        assert!(a.bits.contains(&3) && a.bits.contains(&2));
    }
    assert_eq!(a.objective, p.objective(&a.bits));
}

#[test]
fn dp_equals_bruteforce_on_500_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut feasible = 0;
    for _ in 0..500 {
        let n = rng.random_range(1..=10);
        let p = AllocationProblem {
            costs: random_costs(n, &mut rng, false),
            budget: rng.random_range(n.saturating_sub(1)..=3 * n + 1),
            coverage: rng.random_bool(0.8),
        };
        match (solve_dp(&p), solve_bruteforce(&p)) {
            (Ok(d), Ok(b)) => {
                feasible += 1;
                assert_eq!(d.objective, b.objective);
                assert_eq!(d.bits, b.bits);
                check_constraints(&p, &d);
            }
            (Err(Error::Infeasible(_)), Err(Error::Infeasible(_))) => {}
            other => panic!("solvers disagree: {other:?}"),
        }
    }
    assert!(feasible > 250, "{feasible}");
}

#[test]
fn objective_is_monotone_in_budget() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let n = rng.random_range(2..=10);
        let costs = random_costs(n, &mut rng, true);
        let mut prev = f64::INFINITY;
        for budget in n + 3..=3 * n - 1 {
            let a = solve_dp(&AllocationProblem {
                costs: costs.clone(),
                budget,
                coverage: true,
            })
            .unwrap();
            assert!(a.objective <= prev);
            prev = a.objective;
        }
    }
}

#[test]
fn saturated_budget_is_all_three_bit() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let costs = random_costs(6, &mut rng, false);
    let a = solve_dp(&AllocationProblem {
        costs: costs.clone(),
        budget: 18,
        coverage: false,
    })
    .unwrap();
    assert_eq!(a.bits, vec![3; 6]);
    assert_eq!(
        a.objective,
        costs.iter().rev().fold(0.0, |acc, c| c[2] + acc)
    );
}

#[test]
fn symmetric_costs_pick_lexicographically_smallest() {
    let p = AllocationProblem {
        costs: vec![[3.0, 2.0, 1.0]; 4],
        budget: 8,
        coverage: true,
    };
    let a = solve_bruteforce(&p).unwrap();
    // every assignment costs 4n − budget; [1,1,3,3] lacks a 2-bit expert
    assert_eq!(a.bits, vec![1, 2, 2, 3]);
    assert_eq!(solve_dp(&p).unwrap(), a);
}

#[test]
fn bruteforce_size_limit() {
    let p = AllocationProblem {
        costs: vec![[1.0; 3]; 13],
        budget: 26,
        coverage: true,
    };
    assert!(matches!(
        solve_bruteforce(&p),
        Err(Error::InvalidArgument(_))
    ));
    assert!(solve_dp(&p).is_ok());
}

#[test]
fn imbalanced_costs_mix_widths() {
    let costs: Vec<[f64; 3]> = (0..8)
        .map(|i| {
            let imp = [8.0, 4.0, 2.0, 1.0, 0.5, 0.1, 0.05, 0.01][i];
            [imp * 4.0, imp * 1.5, imp]
        })
        .collect();
    let a = solve_dp(&AllocationProblem::new(costs, 2.0, true)).unwrap();
    assert_eq!(a.total, 16);
    for w in 1..=3 {
        assert!(a.bits.contains(&w), "{:?}", a.bits);
    }
}

fn toy_inputs() -> (ExpertStats, QuantErrorTable) {
    let stats = ExpertStats {
        total_tokens: 10,
        top_k: 1,
        layers: vec![vec![
            ExpertStat {
                n: 6,
                phi: 0.6,
                w: 0.55,
            },
            ExpertStat {
                n: 4,
                phi: 0.4,
                w: 0.45,
            },
        ]],
    };
    let errors = QuantErrorTable {
        layers: vec![vec![[4.0, 2.0, 1.0], [6.0, 1.0, 0.5]]],
    };
    (stats, errors)
}

#[test]
fn baseline_definitions() {
    let (stats, errors) = toy_inputs();
    let inputs = |seed| CostInputs {
        stats: &stats,
        errors: &errors,
        hessian: None,
        alpha: 1.0,
        beta: 1.0,
        gamma: 1.0,
        seed,
    };
    let fnorm = baseline_cost(CostKind::Fnorm, &inputs(0)).unwrap();
    assert_eq!(
        fnorm,
        importance_cost(&stats, &errors, 0.0, 0.0, 1.0).unwrap()
    );
    let freq = baseline_cost(CostKind::Frequency, &inputs(0)).unwrap();
    assert_eq!(freq.layers[0][1], [0.4 * 5.0, 0.4 * 1.5, 0.4 * 0.75]);
    let weight = baseline_cost(CostKind::Weight, &inputs(0)).unwrap();
    assert_eq!(weight.layers[0][0], [0.55 * 5.0, 0.55 * 1.5, 0.55 * 0.75]);
    let pmq = baseline_cost(CostKind::Pmq, &inputs(0)).unwrap();
    assert_eq!(
        pmq,
        importance_cost(&stats, &errors, 1.0, 1.0, 1.0).unwrap()
    );
    let r1 = baseline_cost(CostKind::Random, &inputs(7)).unwrap();
    assert_eq!(r1, baseline_cost(CostKind::Random, &inputs(7)).unwrap());
    assert_ne!(r1, baseline_cost(CostKind::Random, &inputs(8)).unwrap());
    assert!(matches!(
        baseline_cost(CostKind::Hessian, &inputs(0)),
        Err(Error::MissingInput(_))
    ));
    assert!("bogus".parse::<CostKind>().is_err());
    assert_eq!("hessian".parse::<CostKind>().unwrap(), CostKind::Hessian);
}

#[test]
fn hessian_cost_matches_hand_computation() {
    let cfg = MoEConfig {
        num_layers: 1,
        hidden: 8,
        ffn_inner: 8,
        num_experts: 3,
        top_k: 1,
        vocab: 16,
        num_shared_experts: 0,
        seed: 4,
    };
    let model = MoEModel::random(&cfg).unwrap();
    let calib = CalibrationSet::from_sequences(vec![(0..16).collect()], 0);
    let cal = Calibration::collect(&model, &calib).unwrap();
    let table = hessian_sensitivity(&model, &cal, 4).unwrap();
    for e in 0..3 {
        let ex = &model.blocks[0].moe.experts[e];
        for j in 0..3 {
            let mut want = 0.0;
            for (s, w) in ex.matrices().iter().enumerate() {
                let h = cal.hessians[0][e][s].matrix();
                let tr: f64 = (0..h.rows()).map(|i| h.at(i, i)).sum();
                let q = if j == 0 {
                    binarize(w).unwrap()
                } else {
                    rtn_quantize(w, j as u8 + 1, 4).unwrap()
                };
                let d = w.sub(&q.dequantize().unwrap()).unwrap();
                let sq: f64 = d.data().iter().map(|v| v * v).sum();
                want += tr * sq;
            }
            let got = table.layers[0][e][j];
            assert!((got - want).abs() <= 1e-12 * want.max(1.0));
        }
        let n = cal.stats.layers[0][e].n;
        assert_eq!(table.layers[0][e][0] == 0.0, n == 0);
    }
}

#[test]
fn sweep_and_global_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let costs = CostTable {
        layers: (0..3).map(|_| random_costs(8, &mut rng, true)).collect(),
    };
    let grid = [1.5, 1.75, 2.0, 2.25, 2.5];
    let sweep = allocation_sweep(&costs, &grid, true).unwrap();
    assert_eq!(sweep.len(), 5);
    for w in sweep.windows(2) {
        assert!(w[1].objective <= w[0].objective);
    }
    for pt in &sweep {
        for a in &pt.allocations {
            assert_eq!(a.total, (8.0 * pt.b_avg).round() as usize);
        }
    }
    let local = allocate_layers(&costs, 2.0, true, false).unwrap();
    let global = allocate_layers(&costs, 2.0, true, true).unwrap();
    let total: usize = global.iter().map(|a| a.total).sum();
    assert_eq!(total, 48);
    for a in &global {
        assert!(a.bits.contains(&3) && a.bits.contains(&2));
    }
    let obj = |v: &[BitAllocation]| v.iter().map(|a| a.objective).sum::<f64>();
    assert!(obj(&global) <= obj(&local) + 1e-12);

    let rec = allocation_record(&local, CostKind::Pmq, (1.0, 1.0, 1.0));
    let json = serde_json::to_value(&rec).unwrap();
    assert_eq!(json["0"]["budget"], 16);
    assert_eq!(json["2"]["cost_kind"], "pmq");
}

proptest! {
    #[test]
    fn positive_scaling_keeps_argmin(seed in 0u64..100_000, n in 2usize..=9, exp in -8i32..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let costs = random_costs(n, &mut rng, false);
        let budget = rng.random_range(n + 3..=3 * n - 1);
        let scale = 2f64.powi(exp);
        let a = solve_dp(&AllocationProblem { costs: costs.clone(), budget, coverage: true }).unwrap();
        let scaled: Vec<[f64; 3]> = costs.iter().map(|c| c.map(|v| v * scale)).collect();
        let b = solve_dp(&AllocationProblem { costs: scaled, budget, coverage: true }).unwrap();
        prop_assert_eq!(a.bits, b.bits);
    }

    #[test]
    fn dp_matches_bruteforce(seed in 0u64..1_000_000, n in 1usize..=8, cov in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lo = if cov && n >= 2 { n + 3 } else { n };
        let hi = if cov && n >= 2 { 3 * n - 1 } else { 3 * n };
        let p = AllocationProblem { costs: random_costs(n, &mut rng, false), budget: rng.random_range(lo..=hi), coverage: cov };
        let d = solve_dp(&p).unwrap();
        prop_assert_eq!(&d, &solve_bruteforce(&p).unwrap());
    }
}
