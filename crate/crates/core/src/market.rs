//! Finite event-tree market: tree topology, ask prices, proportional
//! transaction costs, terminal endowments and the instance document format.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::utility::Utility;

/// Tolerance for sibling probabilities summing to one.
pub const PROB_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("malformed instance document: {0}")]
    Parse(String),
    #[error("schema violation in `{field}`: {message}")]
    Schema { field: String, message: String },
    #[error("{message}")]
    Invariant {
        node: Option<usize>,
        message: String,
    },
}

impl ModelError {
    fn schema(field: impl Into<String>, message: impl Into<String>) -> Self {
        ModelError::Schema {
            field: field.into(),
            message: message.into(),
        }
    }

    fn at_node(node: usize, message: impl Into<String>) -> Self {
        ModelError::Invariant {
            node: Some(node),
            message: message.into(),
        }
    }

    fn global(message: impl Into<String>) -> Self {
        ModelError::Invariant {
            node: None,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub parent: Option<usize>,
    pub time: usize,
    /// Probability of reaching this node from its parent (1 at the root).
    pub cond_prob: f64,
}

/// A finite filtered probability space given as a rooted tree. Node ids are
/// topologically ordered: every parent precedes its children.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioTree {
    nodes: Vec<Node>,
    children: Vec<Vec<usize>>,
    prob: Vec<f64>,
    terminals: Vec<usize>,
    terminal_index: Vec<Option<usize>>,
    horizon: usize,
}

impl ScenarioTree {
    /// Builds a tree from `(parent, cond_prob)` pairs in topological order.
    pub fn new(spec: &[(Option<usize>, f64)]) -> Result<Self, ModelError> {
        if spec.is_empty() {
            return Err(ModelError::schema("tree", "tree has no nodes"));
        }
        let n = spec.len();
        let mut nodes: Vec<Node> = Vec::with_capacity(n);
        let mut children = vec![Vec::new(); n];
        for (id, &(parent, p)) in spec.iter().enumerate() {
            if !p.is_finite() {
                return Err(ModelError::at_node(id, format!("cond_prob is not finite at node {id}")));
            }
            let time = match parent {
                None => {
                    if id != 0 {
                        return Err(ModelError::at_node(
                            id,
                            format!("node {id} has no parent but only node 0 may be the root"),
                        ));
                    }
                    if (p - 1.0).abs() > PROB_SUM_TOL {
                        return Err(ModelError::at_node(id, "root cond_prob must be 1"));
                    }
                    0
                }
                Some(par) => {
                    if par >= id {
                        return Err(ModelError::at_node(
                            id,
                            format!("parent {par} of node {id} does not precede it"),
                        ));
                    }
                    if p <= 0.0 {
                        return Err(ModelError::at_node(
                            id,
                            format!("cond_prob must be > 0 at node {id}"),
                        ));
                    }
                    children[par].push(id);
                    nodes[par].time + 1
                }
            };
            if id == 0 && parent.is_some() {
                return Err(ModelError::at_node(0, "node 0 must be the root"));
            }
            nodes.push(Node {
                parent,
                time,
                cond_prob: if parent.is_none() { 1.0 } else { p },
            });
        }

        for (id, kids) in children.iter().enumerate() {
            if kids.is_empty() {
                continue;
            }
            let sum: f64 = kids.iter().map(|&c| nodes[c].cond_prob).sum();
            if (sum - 1.0).abs() > PROB_SUM_TOL {
                return Err(ModelError::at_node(
                    id,
                    format!("cond_prob sum ≠ 1 at node {id}"),
                ));
            }
        }

        let terminals: Vec<usize> = (0..n).filter(|&i| children[i].is_empty()).collect();
        let horizon = terminals.iter().map(|&t| nodes[t].time).max().unwrap_or(0);
        if horizon == 0 {
            return Err(ModelError::global("horizon must be at least 1"));
        }
        for &t in &terminals {
            if nodes[t].time != horizon {
                return Err(ModelError::at_node(
                    t,
                    format!(
                        "terminal node {t} sits at time {} but the horizon is {horizon}",
                        nodes[t].time
                    ),
                ));
            }
        }
        let mut terminal_index = vec![None; n];
        for (k, &t) in terminals.iter().enumerate() {
            terminal_index[t] = Some(k);
        }

        let mut prob = vec![1.0; n];
        for id in 1..n {
            let par = nodes[id].parent.expect("non-root");
            prob[id] = prob[par] * nodes[id].cond_prob;
        }

        Ok(ScenarioTree {
            nodes,
            children,
            prob,
            terminals,
            terminal_index,
            horizon,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn node(&self, id: usize) -> &Node {
        &self.nodes[id]
    }

    pub fn parent(&self, id: usize) -> Option<usize> {
        self.nodes[id].parent
    }

    pub fn children(&self, id: usize) -> &[usize] {
        &self.children[id]
    }

    pub fn cond_prob(&self, id: usize) -> f64 {
        self.nodes[id].cond_prob
    }

    /// Unconditional probability of the node under the physical measure.
    pub fn prob(&self, id: usize) -> f64 {
        self.prob[id]
    }

    pub fn is_terminal(&self, id: usize) -> bool {
        self.children[id].is_empty()
    }

    /// Terminal node ids in ascending id order; endowments and claims are
    /// indexed in this order.
    pub fn terminals(&self) -> &[usize] {
        &self.terminals
    }

    pub fn terminal_index(&self, id: usize) -> Option<usize> {
        self.terminal_index[id]
    }

    pub fn non_terminals(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&i| !self.is_terminal(i))
    }

    /// Node ids from the root down to `id`, inclusive.
    pub fn path(&self, id: usize) -> Vec<usize> {
        let mut path = vec![id];
        let mut cur = id;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Terminal ids (in terminal order) below `id`, inclusive of `id` itself
    /// when it is terminal.
    pub fn terminal_descendants(&self, id: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(v) = stack.pop() {
            if self.is_terminal(v) {
                out.push(v);
            } else {
                stack.extend(self.children[v].iter().rev());
            }
        }
        out.sort_unstable();
        out
    }

    /// Backward induction of P-conditional expectations of a terminal payoff.
    /// `terminal` is indexed in terminal order; the result is per node.
    pub fn conditional_expectation(&self, terminal: &[f64]) -> Vec<f64> {
        self.conditional_expectation_with(terminal, |c| self.cond_prob(c))
    }

    /// Backward induction under arbitrary per-edge conditional weights.
    pub fn conditional_expectation_with(
        &self,
        terminal: &[f64],
        weight: impl Fn(usize) -> f64,
    ) -> Vec<f64> {
        assert_eq!(terminal.len(), self.terminals.len());
        let mut values = vec![0.0; self.len()];
        for id in (0..self.len()).rev() {
            values[id] = match self.terminal_index[id] {
                Some(k) => terminal[k],
                None => self.children[id].iter().map(|&c| weight(c) * values[c]).sum(),
            };
        }
        values
    }

    /// Largest |X(ν) − Σ_c w(c) X(c)| over non-terminal nodes.
    pub fn martingale_residual_with(&self, values: &[f64], weight: impl Fn(usize) -> f64) -> f64 {
        self.non_terminals()
            .map(|v| {
                let m: f64 = self.children[v].iter().map(|&c| weight(c) * values[c]).sum();
                (values[v] - m).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Expectation of a terminal payoff under the physical measure.
    pub fn expectation(&self, terminal: &[f64]) -> f64 {
        self.terminals
            .iter()
            .zip(terminal)
            .map(|(&t, g)| self.prob[t] * g)
            .sum()
    }
}

/// Ask prices `S` on a tree with proportional transaction cost `lambda`;
/// the bid is `(1 − λ)S`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketModel {
    pub tree: ScenarioTree,
    ask: Vec<f64>,
    lambda: f64,
}

impl MarketModel {
    pub fn new(tree: ScenarioTree, ask: Vec<f64>, lambda: f64) -> Result<Self, ModelError> {
        if ask.len() != tree.len() {
            return Err(ModelError::schema(
                "tree",
                format!("expected {} prices, found {}", tree.len(), ask.len()),
            ));
        }
        if !(lambda > 0.0 && lambda < 1.0) {
            return Err(ModelError::global("lambda out of (0,1)"));
        }
        for (id, &s) in ask.iter().enumerate() {
            if !(s.is_finite() && s > 0.0) {
                return Err(ModelError::at_node(id, format!("ask price must be > 0 at node {id}")));
            }
            if (1.0 - lambda) * s >= s {
                return Err(ModelError::at_node(id, format!("empty bid-ask spread at node {id}")));
            }
        }
        Ok(MarketModel { tree, ask, lambda })
    }

    /// Same tree and prices with a different transaction cost.
    pub fn with_lambda(&self, lambda: f64) -> Result<Self, ModelError> {
        MarketModel::new(self.tree.clone(), self.ask.clone(), lambda)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn ask(&self, id: usize) -> f64 {
        self.ask[id]
    }

    pub fn asks(&self) -> &[f64] {
        &self.ask
    }

    pub fn bid(&self, id: usize) -> f64 {
        (1.0 - self.lambda) * self.ask[id]
    }

    pub fn n_terminals(&self) -> usize {
        self.tree.terminals().len()
    }

    /// Liquidation value `φ⁰ + (φ¹)⁺(1−λ)S − (φ¹)⁻S` at a node.
    pub fn liquidation_value(&self, cash: f64, shares: f64, node: usize) -> f64 {
        liquidation_value(self, cash, shares, node)
    }
}

pub fn liquidation_value(model: &MarketModel, cash: f64, shares: f64, node: usize) -> f64 {
    let s = model.ask(node);
    cash + shares.max(0.0) * (1.0 - model.lambda()) * s - (-shares).max(0.0) * s
}

/// Terminal payoffs `E_T^i ≥ 0` of the non-traded claims, one row per claim
/// in terminal order.
#[derive(Debug, Clone, PartialEq)]
pub struct EndowmentSet {
    payoff: Vec<Vec<f64>>,
}

impl EndowmentSet {
    pub fn new(payoff: Vec<Vec<f64>>, n_terminals: usize) -> Result<Self, ModelError> {
        for (i, claim) in payoff.iter().enumerate() {
            if claim.len() != n_terminals {
                return Err(ModelError::schema(
                    "endowments",
                    format!(
                        "claim {i} has {} payoffs but the tree has {n_terminals} terminal nodes",
                        claim.len()
                    ),
                ));
            }
            for (k, &e) in claim.iter().enumerate() {
                if !e.is_finite() || e < 0.0 {
                    return Err(ModelError::schema(
                        "endowments",
                        format!("claim {i} has a negative or non-finite payoff at terminal {k}"),
                    ));
                }
            }
        }
        Ok(EndowmentSet { payoff })
    }

    pub fn empty() -> Self {
        EndowmentSet { payoff: Vec::new() }
    }

    pub fn n_claims(&self) -> usize {
        self.payoff.len()
    }

    pub fn claim(&self, i: usize) -> &[f64] {
        &self.payoff[i]
    }

    /// Terminal payoff of the static position `q · E_T`.
    pub fn combination(&self, q: &[f64], n_terminals: usize) -> Vec<f64> {
        assert_eq!(q.len(), self.n_claims(), "q has the wrong dimension");
        let mut out = vec![0.0; n_terminals];
        for (qi, claim) in q.iter().zip(&self.payoff) {
            for (o, e) in out.iter_mut().zip(claim) {
                *o += qi * e;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: usize,
    pub parent: Option<usize>,
    pub p: f64,
    #[serde(rename = "S")]
    pub s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum UtilitySpec {
    Log,
    Power { p: f64 },
}

/// The JSON instance document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceDoc {
    pub tree: Vec<NodeRecord>,
    pub lambda: f64,
    #[serde(default)]
    pub endowments: Vec<Vec<f64>>,
    pub utility: UtilitySpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub model: MarketModel,
    pub endowments: EndowmentSet,
    pub utility: Utility,
}

impl Instance {
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        build_model(text)
    }

    pub fn from_doc(doc: &InstanceDoc) -> Result<Self, ModelError> {
        for (k, rec) in doc.tree.iter().enumerate() {
            if rec.id != k {
                return Err(ModelError::schema(
                    "tree",
                    format!("node ids must be 0..n-1 in order; found id {} at position {k}", rec.id),
                ));
            }
            if let Some(par) = rec.parent {
                if par >= doc.tree.len() {
                    return Err(ModelError::schema(
                        "tree",
                        format!("node {k} references missing parent {par}"),
                    ));
                }
            }
        }
        let spec: Vec<(Option<usize>, f64)> = doc.tree.iter().map(|r| (r.parent, r.p)).collect();
        let tree = ScenarioTree::new(&spec)?;
        let ask = doc.tree.iter().map(|r| r.s).collect();
        let model = MarketModel::new(tree, ask, doc.lambda)?;
        let endowments = EndowmentSet::new(doc.endowments.clone(), model.n_terminals())?;
        let utility = match doc.utility {
            UtilitySpec::Log => Utility::Log,
            UtilitySpec::Power { p } => Utility::power(p).map_err(|e| ModelError::schema("utility", e.to_string()))?,
        };
        Ok(Instance {
            model,
            endowments,
            utility,
        })
    }

    pub fn to_doc(&self) -> InstanceDoc {
        let tree = &self.model.tree;
        InstanceDoc {
            tree: (0..tree.len())
                .map(|id| NodeRecord {
                    id,
                    parent: tree.parent(id),
                    p: tree.cond_prob(id),
                    s: self.model.ask(id),
                })
                .collect(),
            lambda: self.model.lambda(),
            endowments: (0..self.endowments.n_claims())
                .map(|i| self.endowments.claim(i).to_vec())
                .collect(),
            utility: match self.utility {
                Utility::Log => UtilitySpec::Log,
                Utility::Power { p } => UtilitySpec::Power { p },
            },
        }
    }
}

/// Parses and validates an instance document.
pub fn build_model(text: &str) -> Result<Instance, ModelError> {
    let doc: InstanceDoc = serde_json::from_str(text).map_err(|e| {
        let msg = e.to_string();
        match msg.split('`').nth(1) {
            Some(field) if msg.contains("field") => ModelError::schema(field, msg.clone()),
            _ => ModelError::Parse(msg),
        }
    })?;
    Instance::from_doc(&doc)
}

#[cfg(test)]
mod tests {
    use super::*;

    const INSTANCE_A: &str = r#"{
        "tree": [
            {"id": 0, "parent": null, "p": 1.0, "S": 4.0},
            {"id": 1, "parent": 0, "p": 0.5, "S": 8.0},
            {"id": 2, "parent": 0, "p": 0.5, "S": 2.0}
        ],
        "lambda": 0.25,
        "endowments": [[3.0, 0.0]],
        "utility": {"kind": "log"}
    }"#;

    #[test]
    fn builds_instance_a() {
        let inst = build_model(INSTANCE_A).unwrap();
        assert_eq!(inst.model.tree.len(), 3);
        assert_eq!(inst.model.tree.terminals(), &[1, 2]);
        assert_eq!(inst.model.tree.horizon(), 1);
        assert_eq!(inst.endowments.claim(0), &[3.0, 0.0]);
        assert_eq!(inst.utility, Utility::Log);
        assert_eq!(inst.model.bid(1), 6.0);
    }

    #[test]
    fn rejects_lambda_out_of_range() {
        let text = INSTANCE_A.replace("0.25", "1.2");
        let err = build_model(&text).unwrap_err();
        assert_eq!(err.to_string(), "lambda out of (0,1)");
    }

    #[test]
    fn rejects_bad_probability_sum() {
        let text = INSTANCE_A
            .replace(r#""parent": 0, "p": 0.5, "S": 8.0"#, r#""parent": 0, "p": 0.6, "S": 8.0"#);
        let err = build_model(&text).unwrap_err();
        assert_eq!(err.to_string(), "cond_prob sum ≠ 1 at node 0");
        assert!(matches!(err, ModelError::Invariant { node: Some(0), .. }));
    }

    #[test]
    fn rejects_dangling_parent() {
        let text = INSTANCE_A.replace(r#""id": 2, "parent": 0"#, r#""id": 2, "parent": 7"#);
        let err = build_model(&text).unwrap_err();
        assert!(matches!(err, ModelError::Schema { ref field, .. } if field == "tree"), "{err}");
    }

    #[test]
    fn rejects_missing_field_by_name() {
        let text = INSTANCE_A.replace(r#""lambda": 0.25,"#, "");
        let err = build_model(&text).unwrap_err();
        assert!(matches!(err, ModelError::Schema { ref field, .. } if field == "lambda"), "{err}");
    }

    #[test]
    fn rejects_uneven_horizon() {
        // node 1 terminal at t=1, node 3 terminal at t=2
        let spec = [(None, 1.0), (Some(0), 0.5), (Some(0), 0.5), (Some(2), 1.0)];
        let err = ScenarioTree::new(&spec).unwrap_err();
        assert!(matches!(err, ModelError::Invariant { node: Some(1), .. }), "{err}");
    }

    #[test]
    fn liquidation_value_examples() {
        let tree = ScenarioTree::new(&[(None, 1.0), (Some(0), 1.0)]).unwrap();
        let m = MarketModel::new(tree.clone(), vec![5.0, 5.0], 0.1).unwrap();
        assert!((m.liquidation_value(10.0, 2.0, 0) - 19.0).abs() < 1e-12);
        let m = MarketModel::new(tree, vec![4.0, 4.0], 0.25).unwrap();
        assert_eq!(m.liquidation_value(10.0, -2.0, 1), 2.0);
        assert_eq!(m.liquidation_value(7.5, 0.0, 1), 7.5);
    }

    #[test]
    fn unconditional_probabilities_are_path_products() {
        let spec = [
            (None, 1.0),
            (Some(0), 0.3),
            (Some(0), 0.7),
            (Some(1), 0.5),
            (Some(1), 0.5),
            (Some(2), 0.25),
            (Some(2), 0.75),
        ];
        let tree = ScenarioTree::new(&spec).unwrap();
        assert!((tree.prob(6) - 0.525).abs() < 1e-15);
        let total: f64 = tree.terminals().iter().map(|&t| tree.prob(t)).sum();
        assert!((total - 1.0).abs() < 1e-15);
        assert_eq!(tree.path(6), vec![0, 2, 6]);
        assert_eq!(tree.terminal_descendants(1), vec![3, 4]);
    }

    #[test]
    fn doc_round_trip() {
        let inst = build_model(INSTANCE_A).unwrap();
        let back = Instance::from_doc(&inst.to_doc()).unwrap();
        assert_eq!(inst, back);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn liquidation_value_is_concave_homogeneous_and_cash_additive(
                a in -50.0..50.0f64, b in -10.0..10.0f64,
                a2 in -50.0..50.0f64, b2 in -10.0..10.0f64,
                c in -20.0..20.0f64, k in 0.0..5.0f64, t in 0.0..1.0f64,
            ) {
                let tree = ScenarioTree::new(&[(None, 1.0), (Some(0), 1.0)]).unwrap();
                let m = MarketModel::new(tree, vec![4.0, 3.0], 0.2).unwrap();
                let v = |x: f64, y: f64| m.liquidation_value(x, y, 1);
                prop_assert!((v(a + c, b) - (v(a, b) + c)).abs() < 1e-9);
                prop_assert!((v(k * a, k * b) - k * v(a, b)).abs() < 1e-9);
                let mix = v(t * a + (1.0 - t) * a2, t * b + (1.0 - t) * b2);
                prop_assert!(mix >= t * v(a, b) + (1.0 - t) * v(a2, b2) - 1e-9);
            }
        }
    }
}
