//! Exact inference over a grounded network.
//!
//! [`eliminate`] runs variable elimination once per target with a
//! min-degree ordering. [`brute_force_posterior`] enumerates the joint
//! directly and shares no code with the eliminator beyond CPT lookup.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ground::{build_ssbn, prune_ssbn, GroundingLimits, NodeKey, Ssbn};
use crate::ldl::ProbabilityVector;
use crate::model::{Evidence, Formula};
use crate::validate::ValidatedMTheory;

/// A query: target formulas plus the evidence they are conditioned on.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub targets: Vec<Formula>,
    pub evidence: Evidence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub marginals: Vec<(NodeKey, ProbabilityVector)>,
    /// Probability of all findings under the network.
    pub evidence_probability: f64,
}

impl Posterior {
    pub fn marginal(&self, key: &NodeKey) -> Option<&ProbabilityVector> {
        self.marginals.iter().find(|(k, _)| k == key).map(|(_, p)| p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub posterior: Posterior,
    /// The pruned network the posterior was computed on.
    pub ssbn: Ssbn,
    /// Node count before pruning.
    pub grounded_nodes: usize,
}

#[derive(Debug, Clone)]
struct Factor {
    /// Node indices, strictly increasing.
    vars: Vec<usize>,
    cards: Vec<usize>,
    /// Row-major, last variable fastest.
    values: Vec<f64>,
}

impl Factor {
    fn scalar(v: f64) -> Self {
        Factor { vars: Vec::new(), cards: Vec::new(), values: alloc::vec![v] }
    }

    fn strides(&self) -> Vec<usize> {
        let mut s = alloc::vec![1; self.vars.len()];
        for i in (0..self.vars.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.cards[i + 1];
        }
        s
    }

    fn product(&self, other: &Factor) -> Factor {
        let mut vars: Vec<usize> = self.vars.iter().chain(&other.vars).copied().collect();
        vars.sort_unstable();
        vars.dedup();
        let card_of = |v: usize| {
            self.vars
                .iter()
                .position(|&x| x == v)
                .map(|i| self.cards[i])
                .or_else(|| other.vars.iter().position(|&x| x == v).map(|i| other.cards[i]))
                .expect("variable in one operand")
        };
        let cards: Vec<usize> = vars.iter().map(|&v| card_of(v)).collect();
        let size: usize = cards.iter().product();
        let (sa, sb) = (self.strides(), other.strides());
        let map = |f: &Factor, s: &[usize]| -> Vec<usize> {
            vars.iter().map(|v| f.vars.iter().position(|x| x == v).map_or(0, |i| s[i])).collect()
        };
        let (ma, mb) = (map(self, &sa), map(other, &sb));
        let mut values = alloc::vec![0.0; size];
        let mut idx = alloc::vec![0usize; vars.len()];
        let (mut ia, mut ib) = (0usize, 0usize);
        for slot in values.iter_mut() {
            *slot = self.values[ia] * other.values[ib];
            for d in (0..vars.len()).rev() {
                idx[d] += 1;
                ia += ma[d];
                ib += mb[d];
                if idx[d] < cards[d] {
                    break;
                }
                ia -= ma[d] * cards[d];
                ib -= mb[d] * cards[d];
                idx[d] = 0;
            }
        }
        Factor { vars, cards, values }
    }

    fn sum_out(&self, var: usize) -> Factor {
        let Some(pos) = self.vars.iter().position(|&v| v == var) else { return self.clone() };
        let outer: usize = self.cards[..pos].iter().product();
        let k = self.cards[pos];
        let inner: usize = self.cards[pos + 1..].iter().product();
        let mut values = alloc::vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..k {
                for i in 0..inner {
                    values[o * inner + i] += self.values[(o * k + j) * inner + i];
                }
            }
        }
        let mut vars = self.vars.clone();
        let mut cards = self.cards.clone();
        vars.remove(pos);
        cards.remove(pos);
        Factor { vars, cards, values }
    }
}

/// CPT of `node` as a factor, with observed variables zeroed outside their
/// observed state.
fn node_factor(ssbn: &Ssbn, node: usize) -> Factor {
    let n = &ssbn.nodes[node];
    let mut scope: Vec<usize> = n.parents.clone();
    scope.push(node);
    let cards_in: Vec<usize> = scope.iter().map(|&v| ssbn.nodes[v].states.len()).collect();
    let raw = Factor { vars: scope.clone(), cards: cards_in, values: n.cpt.probs.clone() };
    // Reorder to increasing variable index.
    let mut sorted = scope.clone();
    sorted.sort_unstable();
    let cards: Vec<usize> = sorted.iter().map(|&v| ssbn.nodes[v].states.len()).collect();
    let raw_strides = raw.strides();
    let map: Vec<usize> =
        sorted.iter().map(|v| raw_strides[scope.iter().position(|x| x == v).expect("in scope")]).collect();
    let size: usize = cards.iter().product();
    let mut values = alloc::vec![0.0; size];
    let mut idx = alloc::vec![0usize; sorted.len()];
    for slot in values.iter_mut() {
        let mut src = 0;
        let mut keep = true;
        for d in 0..sorted.len() {
            src += idx[d] * map[d];
            if let Some(s) = ssbn.observed_state(sorted[d]) {
                keep &= idx[d] == s;
            }
        }
        *slot = if keep { raw.values[src] } else { 0.0 };
        for d in (0..sorted.len()).rev() {
            idx[d] += 1;
            if idx[d] < cards[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Factor { vars: sorted, cards, values }
}

fn inconsistent(ssbn: &Ssbn) -> Error {
    Error::InconsistentEvidence(ssbn.findings.iter().map(ToString::to_string).collect())
}

fn normalised(ssbn: &Ssbn, target: usize, weights: Vec<f64>) -> Result<(ProbabilityVector, f64)> {
    let total: f64 = weights.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return Err(inconsistent(ssbn));
    }
    let probs = weights.into_iter().map(|w| w / total).collect();
    Ok((ProbabilityVector { states: ssbn.nodes[target].states.clone(), probs }, total))
}

/// Elimination order for all variables except `keep`: repeatedly pick the
/// variable with the fewest neighbours, ties broken by canonical node text.
pub fn min_degree_order(ssbn: &Ssbn, keep: usize) -> Vec<usize> {
    let n = ssbn.nodes.len();
    let mut adj: Vec<BTreeSet<usize>> = alloc::vec![BTreeSet::new(); n];
    for (c, node) in ssbn.nodes.iter().enumerate() {
        let mut fam = node.parents.clone();
        fam.push(c);
        for &a in &fam {
            for &b in &fam {
                if a != b {
                    adj[a].insert(b);
                }
            }
        }
    }
    let names: Vec<String> = ssbn.nodes.iter().map(|x| x.key.to_string()).collect();
    let mut remaining: BTreeSet<usize> = (0..n).filter(|&i| i != keep).collect();
    let mut order = Vec::with_capacity(remaining.len());
    while !remaining.is_empty() {
        let &best = remaining
            .iter()
            .min_by(|&&a, &&b| adj[a].len().cmp(&adj[b].len()).then_with(|| names[a].cmp(&names[b])))
            .expect("non-empty");
        let nb: Vec<usize> = adj[best].iter().copied().collect();
        for &a in &nb {
            adj[a].remove(&best);
            for &b in &nb {
                if a != b {
                    adj[a].insert(b);
                }
            }
        }
        adj[best].clear();
        remaining.remove(&best);
        order.push(best);
    }
    order
}

/// Marginal of `target` by eliminating variables in `order` (which must
/// cover every node except the target).
pub fn eliminate_with_order(ssbn: &Ssbn, target: usize, order: &[usize]) -> Result<(ProbabilityVector, f64)> {
    let mut factors: Vec<Factor> = (0..ssbn.nodes.len()).map(|i| node_factor(ssbn, i)).collect();
    for &v in order {
        let (with, without): (Vec<Factor>, Vec<Factor>) = factors.into_iter().partition(|f| f.vars.contains(&v));
        factors = without;
        if with.is_empty() {
            continue;
        }
        let prod = with.iter().skip(1).fold(with[0].clone(), |acc, f| acc.product(f));
        factors.push(prod.sum_out(v));
    }
    let joint = factors.iter().fold(Factor::scalar(1.0), |acc, f| acc.product(f));
    let joint = match joint.vars.as_slice() {
        [v] if *v == target => joint,
        [] => {
            // Target absent from every factor cannot happen; it owns its CPT.
            return Err(Error::UnknownTarget(ssbn.nodes[target].key.to_string()));
        }
        _ => {
            let mut j = joint.clone();
            for v in joint.vars.iter().filter(|&&v| v != target) {
                j = j.sum_out(*v);
            }
            j
        }
    };
    normalised(ssbn, target, joint.values)
}

/// Exact posterior of every target by variable elimination.
pub fn eliminate(ssbn: &Ssbn) -> Result<Posterior> {
    let mut marginals = Vec::new();
    let mut evidence_probability = 1.0;
    if ssbn.targets.is_empty() {
        return Err(Error::UnknownTarget(String::from("<none>")));
    }
    for &t in &ssbn.targets {
        let order = min_degree_order(ssbn, t);
        let (pv, z) = eliminate_with_order(ssbn, t, &order)?;
        evidence_probability = z;
        marginals.push((ssbn.nodes[t].key.clone(), pv));
    }
    Ok(Posterior { marginals, evidence_probability })
}

/// Largest joint support [`brute_force_posterior`] will enumerate.
pub const BRUTE_FORCE_LIMIT: u64 = 1 << 24;

/// Posterior by enumerating every joint assignment with nonzero weight.
pub fn brute_force_posterior(ssbn: &Ssbn) -> Result<Posterior> {
    let n = ssbn.nodes.len();
    // States reachable with positive probability given the parents' supports
    // (nodes are in topological order).
    let mut support: Vec<Vec<usize>> = Vec::with_capacity(n);
    for i in 0..n {
        let node = &ssbn.nodes[i];
        if let Some(s) = ssbn.observed_state(i) {
            support.push(alloc::vec![s]);
            continue;
        }
        let cards: Vec<usize> = node.parents.iter().map(|&p| ssbn.nodes[p].states.len()).collect();
        let mut reachable = alloc::vec![false; node.states.len()];
        let mut digits = alloc::vec![0usize; cards.len()];
        'rows: for r in 0..node.cpt.rows() {
            let mut rest = r;
            for d in (0..cards.len()).rev() {
                digits[d] = rest % cards[d];
                rest /= cards[d];
            }
            for (d, &p) in node.parents.iter().enumerate() {
                if !support[p].contains(&digits[d]) {
                    continue 'rows;
                }
            }
            for (s, &x) in node.cpt.row(r).iter().enumerate() {
                reachable[s] |= x > 0.0;
            }
        }
        support.push((0..node.states.len()).filter(|&s| reachable[s]).collect());
    }
    let size = support.iter().try_fold(1u64, |acc, s| acc.checked_mul(s.len().max(1) as u64));
    match size {
        Some(s) if s <= BRUTE_FORCE_LIMIT => {}
        other => return Err(Error::StateSpaceTooLarge(other.unwrap_or(u64::MAX))),
    }
    if ssbn.targets.is_empty() {
        return Err(Error::UnknownTarget(String::from("<none>")));
    }
    let mut acc: Vec<Vec<f64>> = ssbn.targets.iter().map(|&t| alloc::vec![0.0; ssbn.nodes[t].states.len()]).collect();
    let mut assignment = alloc::vec![0usize; n];
    let mut total = 0.0;
    enumerate(ssbn, &support, 0, 1.0, &mut assignment, &mut acc, &mut total);
    if total.is_nan() || total <= 0.0 {
        return Err(inconsistent(ssbn));
    }
    let marginals = ssbn
        .targets
        .iter()
        .zip(acc)
        .map(|(&t, w)| {
            let probs = w.into_iter().map(|x| x / total).collect();
            (ssbn.nodes[t].key.clone(), ProbabilityVector { states: ssbn.nodes[t].states.clone(), probs })
        })
        .collect();
    Ok(Posterior { marginals, evidence_probability: total })
}

fn enumerate(
    ssbn: &Ssbn,
    support: &[Vec<usize>],
    i: usize,
    weight: f64,
    assignment: &mut [usize],
    acc: &mut [Vec<f64>],
    total: &mut f64,
) {
    if i == ssbn.nodes.len() {
        *total += weight;
        for (k, &t) in ssbn.targets.iter().enumerate() {
            acc[k][assignment[t]] += weight;
        }
        return;
    }
    let node = &ssbn.nodes[i];
    let mut row = 0;
    for &p in &node.parents {
        row = row * ssbn.nodes[p].states.len() + assignment[p];
    }
    let probs = node.cpt.row(row);
    for &s in &support[i] {
        let p = probs[s];
        if p == 0.0 {
            continue;
        }
        assignment[i] = s;
        enumerate(ssbn, support, i + 1, weight * p, assignment, acc, total);
    }
}

/// Ground, prune and eliminate.
pub fn answer_query(
    v: &ValidatedMTheory,
    evidence: &Evidence,
    targets: &[Formula],
    limits: GroundingLimits,
) -> Result<QueryResult> {
    let full = build_ssbn(v, evidence, targets, limits)?;
    let grounded_nodes = full.len();
    let ssbn = prune_ssbn(&full);
    let posterior = eliminate(&ssbn)?;
    Ok(QueryResult { posterior, ssbn, grounded_nodes })
}
