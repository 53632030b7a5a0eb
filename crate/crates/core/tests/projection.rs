mod common;

use common::*;
use fairgrad::autodiff::{Tape, Tensor};
use fairgrad::fairret::{
    projection_fairret_on, solve_projection, solve_projection_system, DivergenceKind,
    ProjectionSolverConfig,
};
use fairgrad::statistics::{fixed_constraints, group_statistics, Statistic, StatisticKind};
use fairgrad::Error;
use proptest::prelude::*;
use rand::Rng;

const KINDS: [DivergenceKind; 3] = [DivergenceKind::Kl, DivergenceKind::Js, DivergenceKind::Sed];
const STATS: [StatisticKind; 4] = [
    StatisticKind::DemographicParity,
    StatisticKind::EqualOpportunity,
    StatisticKind::PredictiveParity,
    StatisticKind::TreatmentEquality,
];

fn stat(kind: StatisticKind) -> Statistic {
    Statistic::new(kind).unwrap()
}

#[test]
fn sed_example_matches_oracle() {
    let batch = partition_batch(&[0, 0], &[0.0, 1.0], 1);
    let sys = fixed_constraints(&stat(StatisticKind::DemographicParity), &batch, 0.5).unwrap();
    let h = [0.8, 0.6];
    let oracle = brute_force_projection(DivergenceKind::Sed, &sys, &h, 1e-3).unwrap();
    assert!((oracle[0] - 0.6).abs() < 1e-9 && (oracle[1] - 0.4).abs() < 1e-9);
    let res = solve_projection_system(
        DivergenceKind::Sed,
        &sys,
        &h,
        &ProjectionSolverConfig::full_convergence(),
        None,
    )
    .unwrap();
    assert!((res.f_star[0] - 0.6).abs() < 1e-9);
    assert!((res.f_star[1] - 0.4).abs() < 1e-9);
    assert!((res.objective - 0.08).abs() < 1e-9);
}

#[test]
fn kl_and_sed_match_brute_force_oracle() {
    let mut r = rng(17);
    for trial in 0..12 {
        let kind = [DivergenceKind::Kl, DivergenceKind::Sed][trial % 2];
        let stat_kind = [
            StatisticKind::DemographicParity,
            StatisticKind::PredictiveParity,
        ][(trial / 2) % 2];
        // Groups of two or three, both labels present in each.
        let sizes: Vec<usize> = (0..3).map(|_| r.random_range(2..=3)).collect();
        let mut groups = Vec::new();
        let mut labels = Vec::new();
        for (k, &m) in sizes.iter().enumerate() {
            for j in 0..m {
                groups.push(k);
                labels.push(if j == 0 {
                    1.0
                } else if j == 1 {
                    0.0
                } else {
                    f64::from(r.random_bool(0.5))
                });
            }
        }
        let n = groups.len();
        let batch = partition_batch(&groups, &labels, 3);
        let h = random_scores(&mut r, n, 0.05, 0.95);
        let st = stat(stat_kind);
        let c = group_statistics(&st, &batch, &h).unwrap().overall;
        let sys = fixed_constraints(&st, &batch, c).unwrap();
        let Some(oracle) = brute_force_projection(kind, &sys, &h, 1e-3) else {
            continue;
        };
        let res = solve_projection(
            kind,
            &st,
            &batch,
            &h,
            &ProjectionSolverConfig::full_convergence(),
            None,
        )
        .unwrap();
        for (a, b) in res.f_star.iter().zip(&oracle) {
            assert!(
                (a - b).abs() <= 2e-3,
                "trial {trial}: solver {:?} oracle {oracle:?}",
                res.f_star
            );
        }
    }
}

#[test]
fn converged_projections_are_feasible_and_locally_optimal() {
    let mut r = rng(3);
    for trial in 0..24 {
        let kind = KINDS[trial % 3];
        let st = stat(STATS[trial % 4]);
        let n = [16, 128, 1024][trial % 3];
        let d_s = 2 + trial % 3;
        let batch = random_partition_batch(&mut r, n, d_s);
        let h = random_scores(&mut r, n, 0.02, 0.98);
        let res = solve_projection(
            kind,
            &st,
            &batch,
            &h,
            &ProjectionSolverConfig::full_convergence(),
            None,
        )
        .unwrap();
        assert!(res.converged, "trial {trial}");
        assert!(
            res.max_residual() <= 1e-6,
            "trial {trial}: {:?}",
            res.residuals
        );
        assert!(res.f_star.iter().all(|f| (0.0..=1.0).contains(f)));
        if kind != DivergenceKind::Sed {
            assert!(res.f_star.iter().all(|&f| f > 0.0 && f < 1.0));
        }

        // Random feasible perturbations: move two members of one group so
        // that its constraint is unchanged.
        if n > 128 {
            continue;
        }
        let c = group_statistics(&st, &batch, &h).unwrap().overall;
        let sys = fixed_constraints(&st, &batch, c).unwrap();
        let best = mean_divergence(kind, &res.f_star, &h);
        for _ in 0..1000 {
            let k = r.random_range(0..d_s);
            let members = &sys.members[k];
            let i = members[r.random_range(0..members.len())].0;
            let j = members[r.random_range(0..members.len())].0;
            if i == j || sys.beta[j] == 0.0 {
                continue;
            }
            let mut f = res.f_star.clone();
            let step = r.random_range(-0.05..0.05);
            f[i] += step;
            f[j] -= step * sys.beta[i] / sys.beta[j];
            if f.iter().any(|v| !(0.0..=1.0).contains(v)) {
                continue;
            }
            assert!(
                mean_divergence(kind, &f, &h) >= best - 1e-9,
                "trial {trial}"
            );
        }
    }
}

#[test]
fn fair_scores_project_onto_themselves() {
    // Every group has half positives, so constant scores are fair for all four notions.
    let groups: Vec<usize> = (0..60).map(|i| i % 3).collect();
    let labels: Vec<f64> = (0..60).map(|i| ((i / 3) % 2) as f64).collect();
    let batch = partition_batch(&groups, &labels, 3);
    let h = vec![0.37; 60];
    for kind in KINDS {
        for s in STATS {
            let res = solve_projection(
                kind,
                &stat(s),
                &batch,
                &h,
                &ProjectionSolverConfig::default(),
                None,
            )
            .unwrap();
            assert!(res
                .f_star
                .iter()
                .zip(&h)
                .all(|(a, b)| (a - b).abs() <= 1e-6));
            let mut tape = Tape::new();
            let hv = tape.leaf(Tensor::vector(h.clone()));
            let loss = projection_fairret_on(&mut tape, kind, &res.f_star, hv).unwrap();
            assert!(tape.value(loss).data()[0] <= 1e-12);
        }
    }
}

#[test]
fn capped_solves_do_not_underestimate() {
    let mut r = rng(11);
    let mut capped = 0;
    for trial in 0..60 {
        let kind = KINDS[trial % 3];
        let st = stat(STATS[(trial / 3) % 4]);
        let n = 256;
        let d_s = 6;
        let batch = random_partition_batch(&mut r, n, d_s);
        // Extreme scores make the dual harder.
        let h: Vec<f64> = (0..n)
            .map(|_| {
                if r.random_bool(0.5) {
                    r.random_range(1e-4..0.05)
                } else {
                    r.random_range(0.95..1.0 - 1e-4)
                }
            })
            .collect();
        let cap = ProjectionSolverConfig {
            warm_start: false,
            ..ProjectionSolverConfig::default()
        }
        .with_max_iterations(2);
        let a = solve_projection(kind, &st, &batch, &h, &cap, None).unwrap();
        // A loose reference overestimates the optimum by up to dual times residual.
        let tight = ProjectionSolverConfig {
            residual_tolerance: 1e-12,
            ..ProjectionSolverConfig::full_convergence()
        };
        let b = solve_projection(kind, &st, &batch, &h, &tight, None).unwrap();
        assert!(
            b.converged,
            "trial {trial}: {:?} after {}",
            b.residuals, b.iterations
        );
        capped += usize::from(!a.converged);
        assert!(
            a.max_residual() <= 1e-6,
            "trial {trial}: restoration left {:?}",
            a.residuals
        );
        assert!(
            a.objective >= b.objective - 1e-10,
            "trial {trial}: {} < {}",
            a.objective,
            b.objective
        );
    }
    assert!(capped > 0, "no instance hit the cap");
}

#[test]
fn all_zero_beta_group_is_infeasible() {
    // Equal opportunity with a group of only negatives: beta is zero there
    // but so is the group denominator, which is reported first.
    let batch = partition_batch(&[0, 0, 1, 1], &[1.0, 0.0, 0.0, 0.0], 2);
    let err = solve_projection(
        DivergenceKind::Kl,
        &stat(StatisticKind::EqualOpportunity),
        &batch,
        &[0.4, 0.5, 0.6, 0.7],
        &ProjectionSolverConfig::default(),
        None,
    )
    .unwrap_err();
    assert!(matches!(err, Error::DegenerateGroup { group: 1, .. }));

    let sys = {
        let mut s = fixed_constraints(&stat(StatisticKind::EqualOpportunity), &batch, 0.5).unwrap();
        s.beta = vec![1.0, 1.0, 0.0, 0.0];
        s
    };
    let err = solve_projection_system(
        DivergenceKind::Sed,
        &sys,
        &[0.4, 0.5, 0.6, 0.7],
        &ProjectionSolverConfig::default(),
        None,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Infeasible { group: 1 }));
}

#[test]
fn kl_gradient_grows_with_score_in_the_overrepresented_group() {
    let mut r = rng(23);
    let n = 200;
    let groups: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let labels: Vec<f64> = (0..n).map(|i| ((i / 2) % 2) as f64).collect();
    let batch = partition_batch(&groups, &labels, 2);
    let h: Vec<f64> = groups
        .iter()
        .map(|&g| {
            if g == 0 {
                r.random_range(0.4..0.95)
            } else {
                r.random_range(0.05..0.6)
            }
        })
        .collect();
    let st = stat(StatisticKind::DemographicParity);
    let res = solve_projection(
        DivergenceKind::Kl,
        &st,
        &batch,
        &h,
        &ProjectionSolverConfig::full_convergence(),
        None,
    )
    .unwrap();
    let mut tape = Tape::new();
    let hv = tape.leaf(Tensor::vector(h.clone()));
    let loss = projection_fairret_on(&mut tape, DivergenceKind::Kl, &res.f_star, hv).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = grads.wrt(hv);
    let mut over: Vec<(f64, f64)> = (0..n)
        .filter(|&i| groups[i] == 0)
        .map(|i| (h[i], g[i]))
        .collect();
    over.sort_by(|a, b| a.0.total_cmp(&b.0));
    assert!(over.iter().all(|&(_, d)| d > 0.0));
    for w in over.windows(2) {
        assert!(w[1].1 >= w[0].1 - 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn strictness(seed in 0u64..1000, kind_idx in 0usize..3, stat_idx in 0usize..4, unfair in any::<bool>()) {
        let mut r = rng(seed);
        let batch = random_partition_batch(&mut r, 40, 2);
        let st = stat(STATS[stat_idx]);
        let h: Vec<f64> = if unfair {
            let g: Vec<f64> = (0..40).map(|i| batch.sensitive().row(i)[0]).collect();
            (0..40).map(|i| 0.2 + 0.5 * g[i] + 0.2 * batch.labels()[i]).collect()
        } else {
            vec![0.45; 40]
        };
        let gap = fairgrad::statistics::violation(&st, &batch, &h).unwrap().max();
        let res = solve_projection(KINDS[kind_idx], &st, &batch, &h, &ProjectionSolverConfig::full_convergence(), None).unwrap();
        if gap == 0.0 {
            prop_assert!(res.objective <= 1e-12);
        } else if gap > 1e-3 {
            prop_assert!(res.objective > 0.0);
        }
    }
}
