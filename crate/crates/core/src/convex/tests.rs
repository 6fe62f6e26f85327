use super::*;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn lp_single_bound_row() {
    let mut lp = LinearProgram::new(1, Sense::Max);
    lp.set_free(0);
    lp.objective[0] = 1.0;
    lp.add_row(vec![(0, 1.0)], Relation::Le, 3.0);
    let rep = solve_lp(&lp).unwrap();
    assert_eq!(rep.status, Status::Optimal);
    assert!(close(rep.x[0], 3.0, 1e-8), "{:?}", rep.x);
    assert!(close(rep.row_dual(0), 1.0, 1e-8));
    assert!(rep.kkt.within(1e-8));
    assert_eq!(rep.weak_duality_violations, 0);
}

#[test]
fn lp_min_sense_and_ge_rows() {
    // min x + 2y s.t. x + y ≥ 1, x − y ≤ 0.5, x,y ≥ 0  →  x = 0.75, y = 0.25
    let mut lp = LinearProgram::new(2, Sense::Min);
    lp.objective = vec![1.0, 2.0];
    lp.add_row(vec![(0, 1.0), (1, 1.0)], Relation::Ge, 1.0);
    lp.add_row(vec![(0, 1.0), (1, -1.0)], Relation::Le, 0.5);
    let rep = solve_lp(&lp).unwrap();
    assert_eq!(rep.status, Status::Optimal);
    assert!(close(rep.x[0], 0.75, 1e-8) && close(rep.x[1], 0.25, 1e-8));
    assert!(close(rep.objective, 1.25, 1e-8));
    assert!(close(rep.dual_objective, 1.25, 1e-8));
    // raising the ≥ rhs costs 1.5 per unit; the ≤ row is worth −0.5 per unit
    assert!(close(rep.row_dual(0), 1.5, 1e-7), "{:?}", rep.multipliers);
    assert!(close(rep.row_dual(1), -0.5, 1e-7));
    assert!(rep.kkt.within(1e-7), "{:?}", rep.kkt);
}

#[test]
fn lp_equality_and_fixed_bounds() {
    let mut lp = LinearProgram::new(3, Sense::Max);
    lp.objective = vec![1.0, 1.0, 1.0];
    lp.add_row(vec![(0, 1.0), (1, 2.0)], Relation::Eq, 4.0);
    lp.set_bounds(2, 1.5, 1.5);
    lp.set_bounds(1, 0.0, 1.0);
    let rep = solve_lp(&lp).unwrap();
    assert_eq!(rep.status, Status::Optimal);
    assert!(close(rep.objective, 5.5, 1e-8), "{}", rep.objective);
    assert!(close(rep.multipliers.bounds[2], 1.0, 1e-7));
}

#[test]
fn lp_infeasible_certificate() {
    let mut lp = LinearProgram::new(1, Sense::Max);
    lp.add_row(vec![(0, 1.0)], Relation::Le, -1.0);
    let rep = solve_lp(&lp).unwrap();
    assert_eq!(rep.status, Status::Infeasible);
    match rep.certificate {
        Some(Certificate::Infeasible { multipliers, dual_value }) => {
            assert!(dual_value < 0.0);
            assert!(multipliers.rows[0] > 0.0);
            let comb = multipliers.rows[0] + multipliers.bounds[0];
            assert!(comb.abs() < 1e-8);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn lp_unbounded_ray() {
    let mut lp = LinearProgram::new(2, Sense::Max);
    lp.objective = vec![1.0, 0.0];
    lp.add_row(vec![(0, 1.0), (1, -1.0)], Relation::Le, 1.0);
    let rep = solve_lp(&lp).unwrap();
    assert_eq!(rep.status, Status::Unbounded);
    match rep.certificate {
        Some(Certificate::Unbounded { ray, gain }) => {
            assert!(gain > 0.0);
            assert!(ray[0] > 0.0 && ray[0] - ray[1] <= 1e-8 && ray[1] >= -1e-8);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn concave_two_point_log() {
    // ½ log(1 + 4d) + ½ log(1 − 2d)
    let mut p = SeparableConcaveProgram::new(1);
    p.add_term(ConcaveTerm::new(0.5, TermKind::Log, vec![(0, 4.0)], 1.0));
    p.add_term(ConcaveTerm::new(0.5, TermKind::Log, vec![(0, -2.0)], 1.0));
    let rep = solve_concave(&p).unwrap();
    assert_eq!(rep.status, Status::Optimal);
    assert!(close(rep.x[0], 0.125, 1e-9), "{}", rep.x[0]);
    assert!(close(rep.objective, 0.5 * (9.0f64 / 8.0).ln(), 1e-12));
    assert!(rep.kkt.within(1e-9));
}

#[test]
fn concave_log_with_binding_row() {
    let mut p = SeparableConcaveProgram::new(1);
    p.add_term(ConcaveTerm::new(1.0, TermKind::Log, vec![(0, 1.0)], 0.0));
    p.add_row(vec![(0, 1.0)], Relation::Le, 1.0);
    let rep = solve_concave(&p).unwrap();
    assert_eq!(rep.status, Status::Optimal);
    assert!(close(rep.x[0], 1.0, 1e-9));
    assert!(close(rep.row_dual(0), 1.0, 1e-8), "{}", rep.row_dual(0));
    assert!(rep.final_mu <= 1e-9);
    let kkt = check_kkt(&p, &rep.x, &rep.multipliers);
    assert!(kkt.within(1e-8), "{kkt:?}");
}

#[test]
fn concave_power_with_equality() {
    // max 2√x + 2√y s.t. x + 3y = 4  →  x = 3, y = 1/3
    let mut p = SeparableConcaveProgram::new(2);
    p.add_term(ConcaveTerm::new(1.0, TermKind::Power(0.5), vec![(0, 1.0)], 0.0));
    p.add_term(ConcaveTerm::new(1.0, TermKind::Power(0.5), vec![(1, 1.0)], 0.0));
    p.add_row(vec![(0, 1.0), (1, 3.0)], Relation::Eq, 4.0);
    let rep = solve_concave(&p).unwrap();
    assert_eq!(rep.status, Status::Optimal);
    assert!(close(rep.x[0], 3.0, 1e-8) && close(rep.x[1], 1.0 / 3.0, 1e-8), "{:?}", rep.x);
    // λ = U′(x) = 1/√3
    assert!(close(rep.row_dual(0), 1.0 / 3f64.sqrt(), 1e-8));
}

#[test]
fn concave_perturbed_start_same_optimum() {
    let mut p = SeparableConcaveProgram::new(3);
    p.add_term(ConcaveTerm::new(0.3, TermKind::Log, vec![(0, 1.0), (2, 1.0)], 0.0));
    p.add_term(ConcaveTerm::new(0.7, TermKind::Log, vec![(1, 1.0), (2, -2.0)], 0.0));
    p.add_row(vec![(0, 1.0), (1, 2.0)], Relation::Eq, 3.0);
    p.add_row(vec![(2, 1.0)], Relation::Le, 0.4);
    p.set_bounds(0, 0.0, f64::INFINITY);
    p.set_bounds(2, -1.0, f64::INFINITY);
    let base = solve_concave(&p).unwrap();
    for seed in 0..4 {
        let opts = ConcaveOptions {
            start: InitialPoint::Perturbed { seed },
            ..Default::default()
        };
        let rep = solve_concave_with(&p, &opts).unwrap();
        assert_eq!(rep.status, Status::Optimal);
        for (a, b) in rep.x.iter().zip(&base.x) {
            assert!(close(*a, *b, 1e-7), "{:?} vs {:?} {:?}", rep.x, base.x, base.status);
        }
    }
}

#[test]
fn concave_infeasible_and_empty_interior() {
    let mut p = SeparableConcaveProgram::new(1);
    p.add_term(ConcaveTerm::new(1.0, TermKind::Log, vec![(0, 1.0)], 0.0));
    p.add_row(vec![(0, 1.0)], Relation::Le, -1.0);
    assert!(matches!(solve_concave(&p), Err(ConvexError::Infeasible { .. })));

    let mut q = SeparableConcaveProgram::new(1);
    q.add_term(ConcaveTerm::new(1.0, TermKind::Log, vec![(0, 1.0)], 0.0));
    q.add_row(vec![(0, 1.0)], Relation::Le, 0.0);
    assert!(matches!(solve_concave(&q), Err(ConvexError::EmptyInterior { .. })));
}

#[test]
fn concave_unbounded_is_flagged() {
    let mut p = SeparableConcaveProgram::new(1);
    p.add_term(ConcaveTerm::new(1.0, TermKind::Log, vec![(0, 1.0)], 0.0));
    let rep = solve_concave(&p).unwrap();
    assert_eq!(rep.status, Status::Unbounded, "{:?}", rep.x);
}

#[test]
fn kkt_flags_wrong_sign_multiplier() {
    let mut p = SeparableConcaveProgram::new(1);
    p.add_term(ConcaveTerm::new(1.0, TermKind::Log, vec![(0, 1.0)], 0.0));
    p.add_row(vec![(0, 1.0)], Relation::Le, 1.0);
    let good = Multipliers { rows: vec![1.0], bounds: vec![0.0] };
    assert!(check_kkt(&p, &[1.0], &good).within(1e-14));
    let bad = Multipliers { rows: vec![-1.0], bounds: vec![0.0] };
    let r = check_kkt(&p, &[1.0], &bad);
    assert!(r.dual_feas >= 1.0 && r.stationarity > 0.5);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        // Random bounded LPs: strong duality, sign rules and weak-duality bookkeeping.
        #[test]
        fn lp_primal_dual_agree(
            c in proptest::collection::vec(-2.0..2.0f64, 4),
            rows in proptest::collection::vec((proptest::collection::vec(-1.0..1.0f64, 4), 0.1..3.0f64), 1..5),
        ) {
            let mut lp = LinearProgram::new(4, Sense::Max);
            lp.objective = c;
            for j in 0..4 { lp.set_bounds(j, -2.0, 2.0); }
            for (a, b) in rows {
                lp.add_row(a.into_iter().enumerate().collect(), Relation::Le, b);
            }
            let rep = solve_lp(&lp).unwrap();
            prop_assert_eq!(rep.status, Status::Optimal);
            prop_assert!((rep.objective - rep.dual_objective).abs() <= 1e-7 * (1.0 + rep.objective.abs()));
            prop_assert!(rep.kkt.within(1e-7), "{:?}", rep.kkt);
            prop_assert_eq!(rep.weak_duality_violations, 0);
        }
    }
}

