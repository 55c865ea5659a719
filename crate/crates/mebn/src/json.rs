//! JSON shapes printed by the CLI and stored as golden files.

use mebn_core::ground::Ssbn;
use mebn_core::validate::ValidationReport;
use mebn_core::Posterior;
use serde::{Deserialize, Serialize};

/// Posterior of one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetPosterior {
    pub target: String,
    pub states: Vec<String>,
    pub probs: Vec<f64>,
}

/// One line of `query` output.
#[derive(Debug, Clone, Serialize)]
pub struct QueryOutput {
    pub target: String,
    pub states: Vec<String>,
    pub probs: Vec<f64>,
    pub evidence_probability: f64,
    pub ssbn_nodes: usize,
    pub elapsed_ms: f64,
}

pub fn target_posteriors(p: &Posterior) -> Vec<TargetPosterior> {
    p.marginals
        .iter()
        .map(|(k, v)| TargetPosterior { target: k.to_string(), states: v.states.clone(), probs: v.probs.clone() })
        .collect()
}

pub fn query_output(p: &Posterior, ssbn_nodes: usize, elapsed_ms: f64) -> serde_json::Value {
    let mut rows: Vec<QueryOutput> = target_posteriors(p)
        .into_iter()
        .map(|t| QueryOutput {
            target: t.target,
            states: t.states,
            probs: t.probs,
            evidence_probability: p.evidence_probability,
            ssbn_nodes,
            elapsed_ms,
        })
        .collect();
    if rows.len() == 1 {
        serde_json::to_value(rows.remove(0)).expect("serializable")
    } else {
        serde_json::to_value(rows).expect("serializable")
    }
}

/// Golden file contents for one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Golden {
    pub scenario: String,
    pub evidence_probability: f64,
    pub posteriors: Vec<TargetPosterior>,
}

#[derive(Serialize)]
struct ViolationJson<'a> {
    condition: String,
    witnesses: &'a [String],
    message: &'a str,
}

pub fn validation_report(r: &ValidationReport) -> serde_json::Value {
    let v: Vec<ViolationJson> = r
        .violations
        .iter()
        .map(|v| ViolationJson { condition: v.condition.to_string(), witnesses: &v.witnesses, message: &v.message })
        .collect();
    serde_json::json!({ "ok": r.is_clean(), "violations": v })
}

#[derive(Serialize)]
struct NodeJson {
    id: usize,
    key: String,
    states: Vec<String>,
    parents: Vec<usize>,
    cpt: Vec<Vec<f64>>,
    observed: Option<String>,
    target: bool,
    clamped: bool,
    mfrag: Option<String>,
    bindings: usize,
}

/// Nodes, arcs and CPT rows of an SSBN.
pub fn ssbn(s: &Ssbn) -> serde_json::Value {
    let nodes: Vec<NodeJson> = s
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| NodeJson {
            id: i,
            key: n.key.to_string(),
            states: n.states.clone(),
            parents: n.parents.clone(),
            cpt: (0..n.cpt.rows()).map(|r| n.cpt.row(r).to_vec()).collect(),
            observed: s.observed_state(i).map(|k| n.states[k].clone()),
            target: s.targets.contains(&i),
            clamped: n.clamped,
            mfrag: n.provenance.as_ref().map(|p| p.mfrag.clone()),
            bindings: n.provenance.as_ref().map_or(0, |p| p.bindings.len()),
        })
        .collect();
    serde_json::json!({ "nodes": nodes, "arcs": s.arcs() })
}
