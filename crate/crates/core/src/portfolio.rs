//! Self-financing portfolios under proportional costs, acceptability and
//! superhedging.

use serde::Serialize;

use crate::convex::{solve_lp, LinearProgram, Relation, Sense, SolveReport, Status};
use crate::cps::{extremal_expectation, ConsistentPriceSystem, CpsError, Extremal};
use crate::market::{EndowmentSet, MarketModel};

/// Net trades below this size are dropped from reported hedges.
pub const TRADE_NOISE: f64 = 1e-9;
/// Band around the boundary of `K`.
pub const K_BAND: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Trade {
    pub buy: f64,
    pub sell: f64,
}

impl Trade {
    pub fn net(&self) -> f64 {
        self.buy - self.sell
    }

    /// Jordan decomposition of a net share trade.
    pub fn from_net(net: f64) -> Self {
        Trade {
            buy: net.max(0.0),
            sell: (-net).max(0.0),
        }
    }
}

/// Holdings after trading at each node, starting from `(x, 0)` before the
/// root trade.
#[derive(Debug, Clone, PartialEq)]
pub struct Portfolio {
    pub x: f64,
    pub trades: Vec<Trade>,
    /// `(φ⁰, φ¹)` after the trade at each node.
    pub holdings: Vec<(f64, f64)>,
    /// Money discarded at each node (zero for portfolios built here).
    pub slack: Vec<f64>,
    pub liquidated: bool,
}

/// Builds the self-financing portfolio generated by `trades`. With
/// `liquidate` the stock position is closed at every terminal node by an
/// extra trade folded into that node's record.
pub fn make_portfolio(model: &MarketModel, x: f64, trades: &[Trade], liquidate: bool) -> Portfolio {
    let tree = &model.tree;
    let n = tree.len();
    assert_eq!(trades.len(), n, "one trade record per node");
    let mut trades = trades.to_vec();
    let mut holdings = vec![(0.0, 0.0); n];
    for v in 0..n {
        let (c0, c1) = match tree.parent(v) {
            Some(p) => holdings[p],
            None => (x, 0.0),
        };
        if liquidate && tree.is_terminal(v) {
            let pos = c1 + trades[v].net();
            if pos > 0.0 {
                trades[v].sell += pos;
            } else {
                trades[v].buy -= pos;
            }
        }
        let t = trades[v];
        let s = model.ask(v);
        holdings[v] = (c0 - s * t.buy + model.bid(v) * t.sell, c1 + t.buy - t.sell);
    }
    Portfolio {
        x,
        trades,
        holdings,
        slack: vec![0.0; n],
        liquidated: liquidate,
    }
}

impl Portfolio {
    /// Liquidation value of the post-trade holdings at every node.
    pub fn liquidation_values(&self, model: &MarketModel) -> Vec<f64> {
        self.holdings
            .iter()
            .enumerate()
            .map(|(v, &(h0, h1))| model.liquidation_value(h0, h1, v))
            .collect()
    }

    /// `V_T` in terminal order.
    pub fn terminal_values(&self, model: &MarketModel) -> Vec<f64> {
        model
            .tree
            .terminals()
            .iter()
            .map(|&t| model.liquidation_value(self.holdings[t].0, self.holdings[t].1, t))
            .collect()
    }

    /// Largest deviation from `Δφ⁰ = −S·buy + (1−λ)S·sell − slack`.
    pub fn self_financing_residual(&self, model: &MarketModel) -> f64 {
        let tree = &model.tree;
        (0..tree.len())
            .map(|v| {
                let (p0, p1) = match tree.parent(v) {
                    Some(p) => self.holdings[p],
                    None => (self.x, 0.0),
                };
                let t = self.trades[v];
                let d0 = self.holdings[v].0 - p0 - (-model.ask(v) * t.buy + model.bid(v) * t.sell - self.slack[v]);
                let d1 = self.holdings[v].1 - p1 - t.net();
                d0.abs().max(d1.abs())
            })
            .fold(0.0, f64::max)
    }

    /// `φ⁰ + φ¹·S̃` after trading at each node.
    pub fn cps_values(&self, cps: &ConsistentPriceSystem) -> Vec<f64> {
        self.holdings
            .iter()
            .zip(&cps.s_tilde)
            .map(|(&(h0, h1), s)| h0 + h1 * s)
            .collect()
    }
}

/// Affine maps from trade variables `[b; s]` (buy then sell, per node) to
/// terminal liquidation wealth, shared by the hedging LP and the primal
/// utility problem.
#[derive(Debug, Clone)]
pub(crate) struct TradeLayout {
    pub n_nodes: usize,
}

impl TradeLayout {
    pub fn new(model: &MarketModel) -> Self {
        TradeLayout { n_nodes: model.tree.len() }
    }

    pub fn buy(&self, v: usize) -> usize {
        v
    }

    pub fn sell(&self, v: usize) -> usize {
        self.n_nodes + v
    }

    pub fn n_vars(&self) -> usize {
        2 * self.n_nodes
    }

    /// Coefficients of `Σ_{a ≤ ω} (−S_a b_a + (1−λ)S_a s_a)`.
    pub fn wealth_coeffs(&self, model: &MarketModel, terminal: usize) -> Vec<(usize, f64)> {
        model
            .tree
            .path(terminal)
            .into_iter()
            .flat_map(|a| [(self.buy(a), -model.ask(a)), (self.sell(a), model.bid(a))])
            .collect()
    }

    /// Coefficients of the terminal stock position `Σ_{a ≤ ω} (b_a − s_a)`.
    pub fn position_coeffs(&self, model: &MarketModel, terminal: usize) -> Vec<(usize, f64)> {
        model
            .tree
            .path(terminal)
            .into_iter()
            .flat_map(|a| [(self.buy(a), 1.0), (self.sell(a), -1.0)])
            .collect()
    }

    /// Net trades with round trips removed; the liquidation rows only see
    /// net trades, so this keeps them satisfied and never lowers wealth.
    pub fn netted(&self, x: &[f64]) -> Vec<Trade> {
        (0..self.n_nodes)
            .map(|v| {
                let net = x[self.buy(v)] - x[self.sell(v)];
                Trade::from_net(if net.abs() <= TRADE_NOISE { 0.0 } else { net })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Acceptability {
    pub acceptable: bool,
    /// Smallest `a` that works: `max_Q E^Q[(−V_T)⁺]`.
    pub required: f64,
    /// The maximizing system and `X(ν) = E^Q[(−V_T)⁺ | ν] + (a − required)`.
    pub witness: Option<(ConsistentPriceSystem, Vec<f64>)>,
}

/// Checks whether `V(φ) ≥ −X` for a nonnegative `Q`-martingale `X` with
/// `X₀ = a`, in every CPS market. On a tree this reduces to the terminal
/// family `E^Q[(−V_T)⁺] ≤ a`.
pub fn check_acceptable(model: &MarketModel, portfolio: &Portfolio, a: f64) -> Result<Acceptability, CpsError> {
    let shortfall: Vec<f64> = portfolio.terminal_values(model).iter().map(|v| (-v).max(0.0)).collect();
    let ext = extremal_expectation(model, &shortfall, Sense::Max)?;
    let required = ext.value.max(0.0);
    let acceptable = required <= a + 1e-9;
    let witness = acceptable.then(|| {
        let x: Vec<f64> = ext
            .witness
            .conditional(&model.tree, &shortfall)
            .into_iter()
            .map(|v| v + (a - required).max(0.0))
            .collect();
        (ext.witness.clone(), x)
    });
    Ok(Acceptability {
        acceptable,
        required,
        witness,
    })
}

#[derive(Debug, Clone)]
pub struct Superhedge {
    /// `max_Q E^Q[g]` over the CPS polytope.
    pub price: f64,
    pub extremal: Extremal,
    /// Minimal capital of the hedging LP.
    pub hedge_lp_capital: f64,
    /// Netted hedge whose starting capital covers any rounding shortfall.
    pub hedge: Portfolio,
    pub hedge_report: SolveReport,
}

impl Superhedge {
    pub fn duality_gap(&self) -> f64 {
        (self.price - self.hedge_lp_capital).abs()
    }

    pub fn capital(&self) -> f64 {
        self.hedge.x
    }
}

/// `min x` such that some self-financing, liquidated strategy from `(x, 0)`
/// ends with `V_T ≥ g`.
pub fn hedge_lp(model: &MarketModel, claim: &[f64]) -> LinearProgram {
    let layout = TradeLayout::new(model);
    let xv = layout.n_vars();
    let mut lp = LinearProgram::new(xv + 1, Sense::Min);
    lp.set_free(xv);
    lp.objective[xv] = 1.0;
    for (k, &t) in model.tree.terminals().iter().enumerate() {
        let mut w = layout.wealth_coeffs(model, t);
        w.push((xv, 1.0));
        lp.add_row(w, Relation::Ge, claim[k]);
        lp.add_row(layout.position_coeffs(model, t), Relation::Eq, 0.0);
    }
    lp
}

pub fn superhedge_price(model: &MarketModel, claim: &[f64]) -> Result<Superhedge, CpsError> {
    assert_eq!(claim.len(), model.n_terminals(), "claim must cover every terminal node");
    let extremal = extremal_expectation(model, claim, Sense::Max)?;
    let lp = hedge_lp(model, claim);
    let rep = solve_lp(&lp)?;
    if rep.status != Status::Optimal {
        return Err(CpsError::Solver(rep.status));
    }
    let layout = TradeLayout::new(model);
    let capital = rep.x[layout.n_vars()];
    let trades = layout.netted(&rep.x);
    let trial = make_portfolio(model, capital, &trades, true);
    let shortfall = trial
        .terminal_values(model)
        .iter()
        .zip(claim)
        .map(|(v, g)| g - v)
        .fold(0.0f64, f64::max);
    let hedge = make_portfolio(model, capital + shortfall, &trades, true);
    Ok(Superhedge {
        price: extremal.value,
        extremal,
        hedge_lp_capital: capital,
        hedge,
        hedge_report: rep,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum KMembership {
    Interior,
    Boundary,
    Outside,
}

/// Classifies `(x, q)` against `x ≥ s = max_Q E^Q[−q·E_T]`.
pub fn feasible_k(model: &MarketModel, endowments: &EndowmentSet, x: f64, q: &[f64]) -> Result<(KMembership, f64), CpsError> {
    let claim: Vec<f64> = endowments.combination(q, model.n_terminals()).iter().map(|v| -v).collect();
    let s = extremal_expectation(model, &claim, Sense::Max)?.value;
    let m = if x > s + K_BAND {
        KMembership::Interior
    } else if (x - s).abs() <= K_BAND {
        KMembership::Boundary
    } else {
        KMembership::Outside
    };
    Ok((m, s))
}

/// Result of comparing `V(φ)` with `−X` for a `Q`-martingale `X`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dominance {
    /// `min_ω (V_T + X_T)`.
    pub terminal_margin: f64,
    /// `min_ν (V(ν) + X(ν))` with liquidation values.
    pub node_margin: f64,
    pub worst_node: usize,
    /// `min_ν (φ⁰ + φ¹S̃ + X)(ν)`.
    pub cps_margin: f64,
}

pub fn dominance(model: &MarketModel, portfolio: &Portfolio, cps: &ConsistentPriceSystem, x_terminal: &[f64]) -> Dominance {
    let tree = &model.tree;
    let x = cps.conditional(tree, x_terminal);
    let v = portfolio.liquidation_values(model);
    let terminal_margin = tree
        .terminals()
        .iter()
        .map(|&t| v[t] + x[t])
        .fold(f64::INFINITY, f64::min);
    let (worst_node, node_margin) = (0..tree.len())
        .map(|n| (n, v[n] + x[n]))
        .fold((0, f64::INFINITY), |acc, (n, m)| if m < acc.1 { (n, m) } else { acc });
    let cps_margin = portfolio
        .cps_values(cps)
        .iter()
        .zip(&x)
        .map(|(a, b)| a + b)
        .fold(f64::INFINITY, f64::min);
    Dominance {
        terminal_margin,
        node_margin,
        worst_node,
        cps_margin,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::ScenarioTree;

    fn instance_a(lambda: f64) -> (MarketModel, EndowmentSet) {
        let tree = ScenarioTree::new(&[(None, 1.0), (Some(0), 0.5), (Some(0), 0.5)]).unwrap();
        let model = MarketModel::new(tree, vec![4.0, 8.0, 2.0], lambda).unwrap();
        let e = EndowmentSet::new(vec![vec![3.0, 0.0]], 2).unwrap();
        (model, e)
    }

    fn at_root(n: usize, t: Trade) -> Vec<Trade> {
        let mut v = vec![Trade::default(); n];
        v[0] = t;
        v
    }

    #[test]
    fn make_portfolio_examples() {
        let (m, _) = instance_a(0.25);
        let idle = make_portfolio(&m, 1.0, &[Trade::default(); 3], true);
        assert_eq!(idle.terminal_values(&m), vec![1.0, 1.0]);
        assert!(idle.holdings.iter().all(|&h| h == (1.0, 0.0)));

        let buy = make_portfolio(&m, 1.0, &at_root(3, Trade { buy: 1.0, sell: 0.0 }), true);
        assert_eq!(buy.holdings[0], (-3.0, 1.0));
        assert_eq!(buy.terminal_values(&m), vec![3.0, -1.5]);
        assert_eq!(buy.holdings[1].1, 0.0);
        assert!(buy.self_financing_residual(&m) < 1e-15);

        let sell = make_portfolio(&m, 1.0, &at_root(3, Trade { buy: 0.0, sell: 1.0 }), true);
        assert_eq!(sell.holdings[0].0, 4.0);
        assert_eq!(sell.terminal_values(&m), vec![-4.0, 2.0]);

        // without forced liquidation the terminal pair keeps the share
        let open = make_portfolio(&m, 1.0, &at_root(3, Trade { buy: 1.0, sell: 0.0 }), false);
        assert_eq!(open.holdings[1], (-3.0, 1.0));
        assert_eq!(open.terminal_values(&m), vec![3.0, -1.5]);
    }

    #[test]
    fn acceptability_examples() {
        let (m, _) = instance_a(0.25);
        let idle = make_portfolio(&m, 1.0, &[Trade::default(); 3], true);
        assert!(check_acceptable(&m, &idle, 0.0).unwrap().acceptable);

        let buy = make_portfolio(&m, 1.0, &at_root(3, Trade { buy: 1.0, sell: 0.0 }), true);
        // (−V_T)⁺ = (0, 1.5); Q(down) is largest at Q(up) = 1/6
        let oracle = 1.5 * (1.0 - 1.0 / 6.0);
        let acc = check_acceptable(&m, &buy, oracle).unwrap();
        assert!((acc.required - oracle).abs() < 1e-8, "{}", acc.required);
        assert!(acc.acceptable);
        let (cps, x) = acc.witness.unwrap();
        assert!((x[0] - oracle).abs() < 1e-6);
        assert!(m.tree.martingale_residual_with(&x, |c| cps.q_cond[c]) < 1e-9);
        assert!(!check_acceptable(&m, &buy, oracle - 1e-3).unwrap().acceptable);
    }

    #[test]
    fn superhedge_examples() {
        let (m, _) = instance_a(0.25);
        let sh = superhedge_price(&m, &[3.0, 0.0]).unwrap();
        assert!((sh.price - 5.0 / 3.0).abs() < 1e-9);
        assert!(sh.duality_gap() <= 1e-7, "{}", sh.duality_gap());
        for (v, g) in sh.hedge.terminal_values(&m).iter().zip([3.0, 0.0]) {
            assert!(*v >= g - 1e-12);
        }
        let zero = superhedge_price(&m, &[0.0, 0.0]).unwrap();
        assert!(zero.price.abs() < 1e-9 && zero.capital().abs() < 1e-8);
        assert!(zero.hedge.trades.iter().all(|t| t.buy == 0.0 && t.sell == 0.0));

        let (f, _) = instance_a(1e-12);
        let rep = superhedge_price(&f, &[3.0, 0.0]).unwrap();
        assert!((rep.price - 1.0).abs() < 1e-8);
        assert!((rep.hedge.trades[0].net() - 0.5).abs() < 1e-7);
        assert!((rep.hedge.holdings[0].0 + 1.0).abs() < 1e-7);
    }

    #[test]
    fn k_membership_examples() {
        let (m, e) = instance_a(0.25);
        let (k, s) = feasible_k(&m, &e, 1.0, &[1.0]).unwrap();
        assert_eq!(k, KMembership::Interior);
        assert!((s + 0.5).abs() < 1e-9);
        assert_eq!(feasible_k(&m, &e, -0.5, &[1.0]).unwrap().0, KMembership::Boundary);
        assert_eq!(feasible_k(&m, &e, -1.0, &[1.0]).unwrap().0, KMembership::Outside);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn model(s: [f64; 7], lambda: f64) -> MarketModel {
            let tree = ScenarioTree::new(&[
                (None, 1.0),
                (Some(0), 0.5),
                (Some(0), 0.5),
                (Some(1), 0.4),
                (Some(1), 0.6),
                (Some(2), 0.7),
                (Some(2), 0.3),
            ])
            .unwrap();
            MarketModel::new(tree, s.to_vec(), lambda).unwrap()
        }

        fn prices() -> impl Strategy<Value = [f64; 7]> {
            (2.0..6.0f64, 1.05..2.0f64, 1.05..2.0f64, 1.05..2.0f64, 1.05..2.0f64)
                .prop_map(|(s0, u, d, u2, d2)| {
                    let (su, sd) = (s0 * u, s0 / d);
                    [s0, su, sd, su * u2, su / d2, sd * u2, sd / d2]
                })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn superhedge_is_monotone_subadditive_and_cash_additive(
                s in prices(),
                g in proptest::collection::vec(0.0..4.0f64, 4),
                h in proptest::collection::vec(0.0..4.0f64, 4),
                c in -2.0..2.0f64,
            ) {
                let m = model(s, 0.1);
                let pg = superhedge_price(&m, &g).unwrap();
                prop_assert!(pg.duality_gap() <= 1e-7);
                let gh: Vec<f64> = g.iter().zip(&h).map(|(a, b)| a + b).collect();
                let ph = superhedge_price(&m, &h).unwrap().price;
                let pgh = superhedge_price(&m, &gh).unwrap().price;
                prop_assert!(pgh <= pg.price + ph + 1e-8);
                prop_assert!(pgh >= pg.price - 1e-8);
                let gc: Vec<f64> = g.iter().map(|a| a + c).collect();
                prop_assert!((superhedge_price(&m, &gc).unwrap().price - pg.price - c).abs() <= 1e-8);
            }

            #[test]
            fn hedges_dominate_and_respect_the_upper_bound(
                s in prices(),
                g in proptest::collection::vec(-2.0..4.0f64, 4),
                seed_claim in proptest::collection::vec(-1.0..1.0f64, 4),
            ) {
                let m = model(s, 0.2);
                let sh = superhedge_price(&m, &g).unwrap();
                let v = sh.hedge.terminal_values(&m);
                for (a, b) in v.iter().zip(&g) {
                    prop_assert!(*a >= *b - 1e-10);
                }
                // E^Q[V_T] ≤ x for every CPS vertex reached by an extremal LP
                let ext = extremal_expectation(&m, &seed_claim, Sense::Max).unwrap();
                prop_assert!(ext.point.expectation(&m.tree, &v) <= sh.capital() + 1e-8);
            }
        }
    }
}
