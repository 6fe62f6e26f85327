use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fdual_core::cps::{extreme_point_superset, find_cps, ConsistentPriceSystem, CpsPoint};
use fdual_core::portfolio::{dominance, make_portfolio, Trade};
use fdual_core::suite::random_model;
use fdual_core::{MarketModel, ScenarioTree};

// Root 4 → ν at 4 → {8, 2}, λ = 0.25. Buying one share at the root from
// x = −1 leaves V(ν) = −2 and V_T = (1, −3.5).
fn counterexample() -> (MarketModel, ConsistentPriceSystem) {
    let tree = ScenarioTree::new(&[(None, 1.0), (Some(0), 1.0), (Some(1), 0.5), (Some(1), 0.5)]).unwrap();
    let model = MarketModel::new(tree, vec![4.0, 4.0, 8.0, 2.0], 0.25).unwrap();
    let cps = ConsistentPriceSystem {
        q_cond: vec![1.0, 1.0, 5.0 / 9.0, 4.0 / 9.0],
        s_tilde: vec![4.0, 4.0, 6.0, 1.5],
    };
    (model, cps)
}

#[test]
fn terminal_dominance_does_not_carry_to_liquidation_values() {
    let (m, cps) = counterexample();
    assert!(cps.is_valid(&m));
    let mut trades = vec![Trade::default(); 4];
    trades[0] = Trade::from_net(1.0);
    let port = make_portfolio(&m, -1.0, &trades, true);
    assert_eq!(port.terminal_values(&m), vec![1.0, -3.5]);
    let d = dominance(&m, &port, &cps, &[0.0, 3.5]);
    assert!(d.terminal_margin.abs() < 1e-12);
    // X(ν) = 4/9 · 3.5 while V(ν) = −2
    assert!((d.node_margin - (-2.0 + 14.0 / 9.0)).abs() < 1e-12, "{d:?}");
    // valued at S̃ the position is still dominated
    assert!(d.cps_margin >= -1e-12);
}

fn as_point(tree: &ScenarioTree, cps: &ConsistentPriceSystem) -> CpsPoint {
    let mass = cps.measure(tree);
    let value = mass.iter().zip(&cps.s_tilde).map(|(m, s)| m * s).collect();
    CpsPoint { mass, value }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    // φ⁰ + φ¹S̃ is a Q-supermartingale, so terminal dominance by a
    // Q-martingale holds at every node when positions are valued at S̃.
    #[test]
    fn terminal_dominance_holds_at_cps_values(seed in any::<u64>(), lambda in 0.01..0.4f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_model(&mut rng, 3, 2, lambda);
        let tree = &m.tree;
        let vertices = extreme_point_superset(&m, 5_000);
        prop_assume!(vertices.is_some());
        let vertices = vertices.unwrap();
        let inner = as_point(tree, &find_cps(&m, lambda).unwrap());
        let cps = vertices[rng.gen_range(0..vertices.len())].mix(&inner, 1e-6).to_cps(tree);
        let trades: Vec<Trade> = (0..tree.len())
            .map(|v| if tree.is_terminal(v) { Trade::default() } else { Trade::from_net(rng.gen_range(-1.5..1.5)) })
            .collect();
        let port = make_portfolio(&m, rng.gen_range(0.0..3.0), &trades, true);
        let x_t: Vec<f64> = port.terminal_values(&m).iter().map(|v| (-v).max(0.0)).collect();
        let d = dominance(&m, &port, &cps, &x_t);
        prop_assert!(d.terminal_margin >= -1e-9);
        prop_assert!(d.cps_margin >= -1e-9, "{:?}", d);
    }
}
