//! Situation-specific Bayesian network (SSBN) construction.
//!
//! Starting from the query targets and the finding subjects, every RV
//! instance is expanded through its home MFrag: context terms are resolved
//! per binding of the fragment's free variables, satisfied bindings
//! contribute parent instances, and the resulting ground network is compiled
//! into conditional probability tables and pruned to the part that matters
//! for the targets.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::fmt::Write as _;

use crate::error::{Error, Limit, Result};
use crate::ldl::InfluenceCounts;
use crate::logic::{
    eval_equality, eval_formula, expand_quantifier, ground_typed, Connective, ContextValue, Quantifier, QuantifierSpec,
    ThreeValued,
};
use crate::model::{
    check_instance, instantiate_mfrag, Arg, Binding, Evidence, Finding, Formula, Ident, MTheory, Operand, RvInstance,
    RvTerm, StateSpace, TypeName, ABSURD,
};
use crate::validate::ValidatedMTheory;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroundingLimits {
    pub max_depth: usize,
    pub max_nodes: usize,
    pub max_parent_product: u64,
}

impl Default for GroundingLimits {
    fn default() -> Self {
        GroundingLimits { max_depth: 64, max_nodes: 20_000, max_parent_product: 1_000_000 }
    }
}

/// One side of a ground equality node.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GroundOperand {
    Node(Box<NodeKey>),
    /// A registered identifier, a state name, or `Absurd`.
    Value(String),
}

/// Argument of a composed term such as `OpSpec(Subject(!SR4))`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ComposeArg {
    Ident(Ident),
    Node(Box<NodeKey>),
}

/// Identity of a ground node.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeKey {
    Rv(RvInstance),
    Isa(TypeName, Ident),
    Eq(GroundOperand, GroundOperand),
    Not(Box<NodeKey>),
    Binary(Connective, Box<NodeKey>, Box<NodeKey>),
    /// An RV template whose one non-identifier argument is the value of another node.
    Compose {
        name: String,
        args: Vec<ComposeArg>,
    },
}

impl fmt::Display for GroundOperand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroundOperand::Node(n) => write!(f, "{n}"),
            GroundOperand::Value(v) => f.write_str(v),
        }
    }
}

impl fmt::Display for NodeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeKey::Rv(i) => write!(f, "{i}"),
            NodeKey::Isa(t, i) => write!(f, "Isa({t},{i})"),
            NodeKey::Eq(a, b) => write!(f, "eq({a},{b})"),
            NodeKey::Not(x) => write!(f, "not({x})"),
            NodeKey::Binary(c, a, b) => write!(f, "{}({a},{b})", c.name()),
            NodeKey::Compose { name, args } => {
                write!(f, "{name}(")?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    match a {
                        ComposeArg::Ident(id) => write!(f, "{id}")?,
                        ComposeArg::Node(n) => write!(f, "{n}")?,
                    }
                }
                f.write_str(")")
            }
        }
    }
}

impl NodeKey {
    pub fn as_rv(&self) -> Option<&RvInstance> {
        match self {
            NodeKey::Rv(i) => Some(i),
            _ => None,
        }
    }
}

/// Outcome of resolving one context term under one binding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ContextResolution {
    Resolved(ContextValue),
    /// `selector = required` where the selector's value is uncertain; the
    /// selector becomes a parent and the binding applies only in rows where
    /// it takes `required`.
    UncertainReference {
        selector: RvInstance,
        candidates: Vec<String>,
        required: String,
    },
}

/// Values an RV instance may take in the SSBN: the gating candidates when
/// given, otherwise the declared states.
fn candidate_values(
    theory: &MTheory,
    v: &ValidatedMTheory,
    evidence: &Evidence,
    inst: &RvInstance,
) -> Result<Vec<String>> {
    if let Some(c) = evidence.candidates.get(inst) {
        return Ok(c.clone());
    }
    let tpl = theory.template(&inst.name).ok_or_else(|| Error::UnknownRv(inst.name.clone()))?;
    Ok(tpl.states(v.registry()).declared().to_vec())
}

fn finding_lookup<'e>(evidence: &'e Evidence, ctx: &'e Formula) -> impl FnMut(&RvInstance) -> Result<String> + 'e {
    move |i: &RvInstance| {
        evidence
            .finding_for(i)
            .map(ToString::to_string)
            .ok_or_else(|| Error::UnresolvableContext(alloc::format!("{ctx} (no finding for {i})")))
    }
}

/// Resolves a context term under `binding`. Built-ins evaluate directly,
/// finding-fixed RVs read their finding, and an equality between an
/// uncertain RV and a known value becomes an enumerated reference.
pub fn resolve_context(
    ctx: &Formula,
    binding: &Binding,
    v: &ValidatedMTheory,
    evidence: &Evidence,
) -> Result<ContextResolution> {
    let theory = v.theory();
    let registry = v.registry();
    if let Formula::Eq(a, b) = ctx {
        for (sel, other) in [(a, b), (b, a)] {
            let Operand::Term(t) = sel else { continue };
            let Some(inst) = ground_typed(t, binding, theory, registry)? else { continue };
            if evidence.finding_for(&inst).is_some() {
                continue;
            }
            let other_val = match other {
                Operand::Term(_) => return Err(Error::UnresolvableContext(ctx.to_string())),
                Operand::Const(c) => Some(c.clone()),
                Operand::Ident(i) => registry.eval_identity(i).map(|i| i.as_str().to_string()),
                Operand::Var(x) => {
                    let id = binding
                        .get(x)
                        .ok_or_else(|| Error::UnboundParameter { rv: ctx.to_string(), param: x.clone() })?;
                    registry.eval_identity(id).map(|i| i.as_str().to_string())
                }
            };
            let Some(required) = other_val else {
                return Ok(ContextResolution::Resolved(ThreeValued::Absurd));
            };
            let candidates = candidate_values(theory, v, evidence, &inst)?;
            if !candidates.contains(&required) {
                return Ok(ContextResolution::Resolved(ThreeValued::False));
            }
            return Ok(ContextResolution::UncertainReference { selector: inst, candidates, required });
        }
    }
    let mut lookup = finding_lookup(evidence, ctx);
    Ok(ContextResolution::Resolved(eval_formula(ctx, binding, theory, registry, &mut lookup)?))
}

/// Where a binding's parent value comes from.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum ParentRef {
    Node(NodeKey),
    /// The parent instance does not exist (e.g. `Prev` of the first element).
    Absurd,
}

#[derive(Debug, Clone)]
struct PlannedBinding {
    binding: Binding,
    parents: Vec<ParentRef>,
    conditions: Vec<(NodeKey, String)>,
}

#[derive(Debug, Clone)]
enum Plan {
    Rv { mfrag: usize, resident: RvTerm, bindings: Vec<PlannedBinding> },
    Logic,
}

/// Conditional probability table; rows enumerate parent states in
/// mixed radix with the last parent varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Cpt {
    pub n_states: usize,
    pub probs: Vec<f64>,
}

impl Cpt {
    pub fn rows(&self) -> usize {
        self.probs.len() / self.n_states.max(1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.probs[r * self.n_states..(r + 1) * self.n_states]
    }
}

/// Home MFrag and context-satisfying bindings a node was compiled from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub mfrag: String,
    pub bindings: Vec<Binding>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundNode {
    pub key: NodeKey,
    /// State names; the last is always `Absurd`.
    pub states: Vec<String>,
    pub parents: Vec<usize>,
    pub cpt: Cpt,
    pub provenance: Option<Provenance>,
    /// Set by pruning when an observed node's own distribution is irrelevant
    /// to the targets; its CPT is then a point mass on the observed value.
    pub clamped: bool,
}

impl GroundNode {
    pub fn state_index(&self, s: &str) -> Option<usize> {
        self.states.iter().position(|x| x == s)
    }
}

/// A ground Bayesian network for one query. Nodes are stored in topological
/// order (parents before children).
#[derive(Debug, Clone, PartialEq)]
pub struct Ssbn {
    pub nodes: Vec<GroundNode>,
    pub targets: Vec<usize>,
    /// Observed node index and observed state index.
    pub evidence: Vec<(usize, usize)>,
    pub findings: Vec<Finding>,
    pub limits: GroundingLimits,
}

impl Ssbn {
    pub fn index_of(&self, key: &NodeKey) -> Option<usize> {
        self.nodes.iter().position(|n| &n.key == key)
    }

    pub fn node(&self, key: &NodeKey) -> Option<&GroundNode> {
        self.index_of(key).map(|i| &self.nodes[i])
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn arcs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (c, n) in self.nodes.iter().enumerate() {
            for &p in &n.parents {
                out.push((p, c));
            }
        }
        out
    }

    pub fn observed_state(&self, node: usize) -> Option<usize> {
        self.evidence.iter().find(|(n, _)| *n == node).map(|(_, s)| *s)
    }

    pub fn children(&self) -> Vec<Vec<usize>> {
        let mut ch = alloc::vec![Vec::new(); self.nodes.len()];
        for (c, n) in self.nodes.iter().enumerate() {
            for &p in &n.parents {
                ch[p].push(c);
            }
        }
        ch
    }
}

/// Converts a closed query formula into a node key, expanding quantifiers
/// over the registered domain and nested terms into composition nodes.
pub fn ground_formula(f: &Formula, v: &ValidatedMTheory) -> Result<NodeKey> {
    let theory = v.theory();
    let registry = v.registry();
    let boolean = |k: NodeKey| -> Result<NodeKey> {
        if node_is_boolean(&k, theory) {
            Ok(k)
        } else {
            Err(Error::NotBoolean(k.to_string()))
        }
    };
    Ok(match f {
        Formula::Rv(t) => term_key(t, v)?,
        Formula::Isa(ty, a) => match a {
            Arg::Ident(i) => {
                if !registry.has_type(ty) {
                    return Err(Error::UnknownType(ty.0.clone()));
                }
                NodeKey::Isa(ty.clone(), i.clone())
            }
            other => return Err(Error::UnboundParameter { rv: String::from("Isa"), param: other.to_string() }),
        },
        Formula::Eq(a, b) => NodeKey::Eq(ground_operand(a, v)?, ground_operand(b, v)?),
        Formula::Not(x) => NodeKey::Not(Box::new(boolean(ground_formula(x, v)?)?)),
        Formula::And(a, b) | Formula::Or(a, b) | Formula::Implies(a, b) | Formula::Iff(a, b) => {
            let c = match f {
                Formula::And(..) => Connective::And,
                Formula::Or(..) => Connective::Or,
                Formula::Implies(..) => Connective::Implies,
                _ => Connective::Iff,
            };
            NodeKey::Binary(c, Box::new(boolean(ground_formula(a, v)?)?), Box::new(boolean(ground_formula(b, v)?)?))
        }
        Formula::ForAll(x, ty, body) | Formula::Exists(x, ty, body) => {
            let quantifier = if matches!(f, Formula::ForAll(..)) { Quantifier::ForAll } else { Quantifier::Exists };
            let spec = QuantifierSpec { quantifier, var: x.clone(), ty: ty.clone(), body: (**body).clone() };
            let expanded = expand_quantifier(&spec, registry)?;
            boolean(ground_formula(&expanded, v)?)?
        }
    })
}

fn term_key(t: &RvTerm, v: &ValidatedMTheory) -> Result<NodeKey> {
    let theory = v.theory();
    let tpl = theory.template(&t.name).ok_or_else(|| Error::UnknownRv(t.name.clone()))?;
    if tpl.params.len() != t.args.len() {
        return Err(Error::ArityMismatch { rv: t.name.clone(), expected: tpl.params.len(), found: t.args.len() });
    }
    if t.args.iter().any(|a| matches!(a, Arg::Term(_))) {
        let mut args = Vec::new();
        for a in &t.args {
            args.push(match a {
                Arg::Ident(i) => {
                    if v.registry().lookup(i).is_none() {
                        return Err(Error::UnknownIdentifier(i.as_str().to_string()));
                    }
                    ComposeArg::Ident(i.clone())
                }
                Arg::Term(inner) => {
                    let k = term_key(inner, v)?;
                    if node_entity_type(&k, theory).is_none() {
                        return Err(Error::UnresolvableContext(alloc::format!("{inner} is not identifier-valued")));
                    }
                    ComposeArg::Node(Box::new(k))
                }
                other => return Err(Error::UnboundParameter { rv: t.name.clone(), param: other.to_string() }),
            });
        }
        return Ok(NodeKey::Compose { name: t.name.clone(), args });
    }
    let mut args = Vec::new();
    for a in &t.args {
        match a {
            Arg::Ident(i) => args.push(i.clone()),
            other => return Err(Error::UnboundParameter { rv: t.name.clone(), param: other.to_string() }),
        }
    }
    let inst = RvInstance { name: t.name.clone(), args };
    check_instance(theory, v.registry(), &inst)?;
    Ok(NodeKey::Rv(inst))
}

fn ground_operand(o: &Operand, v: &ValidatedMTheory) -> Result<GroundOperand> {
    Ok(match o {
        Operand::Term(t) => GroundOperand::Node(Box::new(term_key(t, v)?)),
        Operand::Ident(i) => GroundOperand::Value(
            v.registry().eval_identity(i).map_or_else(|| ABSURD.to_string(), |i| i.as_str().to_string()),
        ),
        Operand::Const(c) => GroundOperand::Value(c.clone()),
        Operand::Var(x) => return Err(Error::UnboundParameter { rv: String::from("eq"), param: x.clone() }),
    })
}

fn node_template<'t>(k: &NodeKey, theory: &'t MTheory) -> Option<&'t crate::model::RvTemplate> {
    match k {
        NodeKey::Rv(i) => theory.template(&i.name),
        NodeKey::Compose { name, .. } => theory.template(name),
        _ => None,
    }
}

fn node_is_boolean(k: &NodeKey, theory: &MTheory) -> bool {
    node_template(k, theory).is_none_or(|t| t.is_boolean())
}

fn node_entity_type<'t>(k: &NodeKey, theory: &'t MTheory) -> Option<&'t TypeName> {
    match &node_template(k, theory)?.range {
        crate::model::ValueRange::Entities(ty) => Some(ty),
        _ => None,
    }
}

struct Builder<'a> {
    v: &'a ValidatedMTheory,
    evidence: &'a Evidence,
    limits: GroundingLimits,
    plans: BTreeMap<NodeKey, (Plan, Vec<NodeKey>, Vec<String>)>,
}

impl<'a> Builder<'a> {
    fn states_for(&self, k: &NodeKey) -> Result<Vec<String>> {
        let theory = self.v.theory();
        let mut states = match k {
            NodeKey::Rv(inst) => {
                let tpl = theory.template(&inst.name).ok_or_else(|| Error::UnknownRv(inst.name.clone()))?;
                match self.evidence.candidates.get(inst) {
                    Some(c) => c.clone(),
                    None => tpl.states(self.v.registry()).declared().to_vec(),
                }
            }
            NodeKey::Compose { name, .. } => {
                let tpl = theory.template(name).ok_or_else(|| Error::UnknownRv(name.clone()))?;
                tpl.states(self.v.registry()).declared().to_vec()
            }
            _ => StateSpace::boolean().declared().to_vec(),
        };
        states.push(ABSURD.to_string());
        Ok(states)
    }

    /// Parents and compilation plan for one node.
    fn plan(&self, k: &NodeKey) -> Result<(Plan, Vec<NodeKey>)> {
        match k {
            NodeKey::Rv(inst) => self.plan_rv(inst),
            NodeKey::Isa(..) => Ok((Plan::Logic, Vec::new())),
            NodeKey::Eq(a, b) => {
                let mut ps: Vec<NodeKey> = Vec::new();
                for o in [a, b] {
                    if let GroundOperand::Node(n) = o {
                        if !ps.contains(n) {
                            ps.push((**n).clone());
                        }
                    }
                }
                Ok((Plan::Logic, ps))
            }
            NodeKey::Not(x) => Ok((Plan::Logic, alloc::vec![(**x).clone()])),
            NodeKey::Binary(_, a, b) if a == b => Ok((Plan::Logic, alloc::vec![(**a).clone()])),
            NodeKey::Binary(_, a, b) => Ok((Plan::Logic, alloc::vec![(**a).clone(), (**b).clone()])),
            NodeKey::Compose { name, args } => {
                // Parents: the selector node, then one plain instance per candidate value.
                let Some(pos) = args.iter().position(|a| matches!(a, ComposeArg::Node(_))) else {
                    return Err(Error::UnresolvableContext(k.to_string()));
                };
                let ComposeArg::Node(sel) = &args[pos] else { unreachable!() };
                let mut ps = alloc::vec![(**sel).clone()];
                let sel_states = self.states_for(sel)?;
                for c in &sel_states[..sel_states.len() - 1] {
                    let mut inst_args = Vec::new();
                    for (i, a) in args.iter().enumerate() {
                        match a {
                            ComposeArg::Ident(id) => inst_args.push(id.clone()),
                            ComposeArg::Node(_) if i == pos => inst_args.push(Ident::new(c)?),
                            ComposeArg::Node(_) => return Err(Error::UnresolvableContext(k.to_string())),
                        }
                    }
                    let inst = RvInstance { name: name.clone(), args: inst_args };
                    check_instance(self.v.theory(), self.v.registry(), &inst)?;
                    ps.push(NodeKey::Rv(inst));
                }
                Ok((Plan::Logic, ps))
            }
        }
    }

    fn plan_rv(&self, inst: &RvInstance) -> Result<(Plan, Vec<NodeKey>)> {
        let theory = self.v.theory();
        let registry = self.v.registry();
        check_instance(theory, registry, inst)?;
        let homes = theory.homes_of(&inst.name);
        let &[home] = homes.as_slice() else {
            return Err(Error::UnknownRv(inst.name.clone()));
        };
        let mfrag = &theory.mfrags[home];
        let resident = mfrag.resident_named(&inst.name).expect("home MFrag has the resident").clone();
        let mut binding = Binding::new();
        for (a, id) in resident.args.iter().zip(&inst.args) {
            if let Arg::Var(x) = a {
                binding.insert(x.clone(), id.clone());
            }
        }
        let mi = instantiate_mfrag(theory, registry, mfrag, &binding)?;
        let parent_terms: Vec<RvTerm> = mfrag.parents_of(&resident).into_iter().cloned().collect();

        let mut bindings = Vec::new();
        let mut parents: BTreeSet<NodeKey> = BTreeSet::new();
        'bindings: for b in mi.completions(registry) {
            let mut conditions = Vec::new();
            for ctx in &mfrag.context {
                match resolve_context(ctx, &b, self.v, self.evidence)? {
                    ContextResolution::Resolved(ThreeValued::True) => {}
                    ContextResolution::Resolved(_) => continue 'bindings,
                    ContextResolution::UncertainReference { selector, required, .. } => {
                        conditions.push((NodeKey::Rv(selector), required));
                    }
                }
            }
            let mut prefs = Vec::with_capacity(parent_terms.len());
            for p in &parent_terms {
                prefs.push(match ground_typed(p, &b, theory, registry)? {
                    Some(pi) => ParentRef::Node(NodeKey::Rv(pi)),
                    None => ParentRef::Absurd,
                });
            }
            for p in &prefs {
                if let ParentRef::Node(k) = p {
                    parents.insert(k.clone());
                }
            }
            for (s, _) in &conditions {
                parents.insert(s.clone());
            }
            bindings.push(PlannedBinding { binding: b, parents: prefs, conditions });
        }
        Ok((Plan::Rv { mfrag: home, resident, bindings }, parents.into_iter().collect()))
    }

    fn expand(&mut self, starts: Vec<NodeKey>) -> Result<()> {
        let mut queue: VecDeque<(NodeKey, usize)> = starts.into_iter().map(|k| (k, 0)).collect();
        while let Some((k, depth)) = queue.pop_front() {
            if self.plans.contains_key(&k) {
                continue;
            }
            if depth > self.limits.max_depth {
                return Err(Error::LimitExceeded { limit: Limit::MaxDepth, value: depth as u64 });
            }
            if self.plans.len() >= self.limits.max_nodes {
                return Err(Error::LimitExceeded { limit: Limit::MaxNodes, value: self.plans.len() as u64 + 1 });
            }
            let (plan, parents) = self.plan(&k)?;
            let states = self.states_for(&k)?;
            for p in &parents {
                if !self.plans.contains_key(p) {
                    queue.push_back((p.clone(), depth + 1));
                }
            }
            self.plans.insert(k, (plan, parents, states));
        }
        Ok(())
    }
}

/// Parent-before-child order with ties broken by canonical node text.
fn topological(plans: &BTreeMap<NodeKey, (Plan, Vec<NodeKey>, Vec<String>)>) -> Result<Vec<NodeKey>> {
    let mut indeg: BTreeMap<&NodeKey, usize> = BTreeMap::new();
    let mut children: BTreeMap<&NodeKey, Vec<&NodeKey>> = BTreeMap::new();
    for (k, (_, ps, _)) in plans {
        indeg.insert(k, ps.len());
        for p in ps {
            children.entry(p).or_default().push(k);
        }
    }
    let mut ready: BTreeMap<String, &NodeKey> =
        indeg.iter().filter(|(_, d)| **d == 0).map(|(k, _)| (k.to_string(), *k)).collect();
    let mut order = Vec::with_capacity(plans.len());
    while let Some((_, k)) = ready.pop_first() {
        order.push(k.clone());
        for c in children.get(k).map(Vec::as_slice).unwrap_or(&[]) {
            let d = indeg.get_mut(c).expect("node");
            *d -= 1;
            if *d == 0 {
                ready.insert(c.to_string(), *c);
            }
        }
    }
    if order.len() != plans.len() {
        let stuck = indeg.iter().find(|(_, d)| **d > 0).map(|(k, _)| k.to_string()).unwrap_or_default();
        return Err(Error::UnresolvableContext(alloc::format!("cyclic dependency at {stuck}")));
    }
    Ok(order)
}

/// Decodes a mixed-radix row index (last parent fastest).
fn decode_row(mut row: usize, cards: &[usize], out: &mut [usize]) {
    for i in (0..cards.len()).rev() {
        out[i] = row % cards[i];
        row /= cards[i];
    }
}

/// Compiles the CPT of a domain RV node from its context-satisfying bindings.
fn compile_rv_cpt(
    theory: &MTheory,
    registry: &crate::model::EntityRegistry,
    mfrag_idx: usize,
    resident: &RvTerm,
    bindings: &[PlannedBinding],
    parent_keys: &[NodeKey],
    parent_states: &[&[String]],
    states: &[String],
) -> Result<Cpt> {
    let mfrag = &theory.mfrags[mfrag_idx];
    let expr = mfrag.local_for(resident).ok_or_else(|| Error::UnknownRv(resident.name.clone()))?;
    let tpl = theory.template(&resident.name).ok_or_else(|| Error::UnknownRv(resident.name.clone()))?;
    let tpl_states = tpl.states(registry);
    let parent_terms: Vec<RvTerm> = mfrag.parents_of(resident).into_iter().cloned().collect();
    let pos = |k: &NodeKey| parent_keys.iter().position(|p| p == k).expect("planned parent");

    // Per binding: parent positions (None = constant Absurd) and conditions.
    struct Compiled {
        parents: Vec<Option<usize>>,
        conditions: Vec<(usize, Option<usize>)>,
    }
    let compiled: Vec<Compiled> = bindings
        .iter()
        .map(|b| Compiled {
            parents: b
                .parents
                .iter()
                .map(|p| match p {
                    ParentRef::Node(k) => Some(pos(k)),
                    ParentRef::Absurd => None,
                })
                .collect(),
            conditions: b
                .conditions
                .iter()
                .map(|(k, req)| {
                    let i = pos(k);
                    (i, parent_states[i].iter().position(|s| s == req))
                })
                .collect(),
        })
        .collect();
    let mut regular = alloc::vec![false; parent_keys.len()];
    for c in &compiled {
        for p in c.parents.iter().flatten() {
            regular[*p] = true;
        }
    }
    let absurd_aware = expr.mentions_absurd();
    let cards: Vec<usize> = parent_states.iter().map(|s| s.len()).collect();
    let rows: usize = cards.iter().product();
    let n = states.len();
    let mut probs = alloc::vec![0.0; rows * n];
    let mut assignment = alloc::vec![0usize; cards.len()];
    for row in 0..rows {
        decode_row(row, &cards, &mut assignment);
        let out = &mut probs[row * n..(row + 1) * n];
        let absurd_parent = (0..cards.len()).any(|i| regular[i] && assignment[i] == cards[i] - 1);
        if absurd_parent && !absurd_aware {
            out[n - 1] = 1.0;
            continue;
        }
        let mut counts = InfluenceCounts::new(parent_terms.clone());
        for c in &compiled {
            let active = c.conditions.iter().all(|(i, req)| *req == Some(assignment[*i]));
            if !active {
                continue;
            }
            let config = c
                .parents
                .iter()
                .map(|p| match p {
                    Some(i) => parent_states[*i][assignment[*i]].clone(),
                    None => ABSURD.to_string(),
                })
                .collect();
            counts.add(config);
        }
        let pv = crate::ldl::eval_local_distribution(expr, &counts, &tpl_states)?;
        let mut total = 0.0;
        for (j, s) in states.iter().enumerate() {
            out[j] = pv.get(s);
            total += out[j];
        }
        if total <= 0.0 {
            return Err(Error::MassError(total));
        }
        if states.len() != pv.states.len() {
            // Gated state space: condition on the candidate values.
            for p in out.iter_mut() {
                *p /= total;
            }
        }
    }
    Ok(Cpt { n_states: n, probs })
}

/// Deterministic CPT for logical, equality, type and composition nodes.
fn compile_logic_cpt(
    key: &NodeKey,
    registry: &crate::model::EntityRegistry,
    parent_keys: &[NodeKey],
    parent_states: &[&[String]],
    states: &[String],
) -> Result<Cpt> {
    let cards: Vec<usize> = parent_states.iter().map(|s| s.len()).collect();
    let rows: usize = cards.iter().product();
    let n = states.len();
    let mut probs = alloc::vec![0.0; rows * n];
    let mut a = alloc::vec![0usize; cards.len()];
    let tv = |s: &str| ThreeValued::from_state(s).unwrap_or(ThreeValued::Absurd);
    for row in 0..rows {
        decode_row(row, &cards, &mut a);
        let value = |i: usize| parent_states[i][a[i]].as_str();
        // Operands may repeat (`and(X, X)`), so look them up by key.
        let value_of = |k: &NodeKey| value(parent_keys.iter().position(|p| p == k).expect("operand is a parent"));
        let out: String = match key {
            NodeKey::Isa(ty, id) => registry.eval_isa(ty, id)?.as_state().to_string(),
            NodeKey::Not(x) => Connective::Not.eval(&[tv(value_of(x))]).as_state().to_string(),
            NodeKey::Binary(c, x, y) => c.eval(&[tv(value_of(x)), tv(value_of(y))]).as_state().to_string(),
            NodeKey::Eq(x, y) => {
                let side = |o: &GroundOperand| match o {
                    GroundOperand::Value(s) => s.clone(),
                    GroundOperand::Node(n) => value_of(n).to_string(),
                };
                let (l, r) = (side(x), side(y));
                eval_equality(Some(&l), Some(&r)).as_state().to_string()
            }
            NodeKey::Compose { .. } => {
                // Parent 0 selects which candidate instance's value is copied.
                let sel = a[0];
                if sel == cards[0] - 1 {
                    ABSURD.to_string()
                } else {
                    value(1 + sel).to_string()
                }
            }
            NodeKey::Rv(_) => unreachable!("domain RVs compile from local distributions"),
        };
        let j = states.iter().position(|s| *s == out).unwrap_or(n - 1);
        probs[row * n + j] = 1.0;
    }
    Ok(Cpt { n_states: n, probs })
}

/// Grounds the SSBN for `targets` given `evidence`. The result is complete
/// (closed under parents) but not yet pruned.
pub fn build_ssbn(
    v: &ValidatedMTheory,
    evidence: &Evidence,
    targets: &[Formula],
    limits: GroundingLimits,
) -> Result<Ssbn> {
    let theory = v.theory();
    let registry = v.registry();

    // Findings: well-typed, in range, mutually consistent.
    let mut seen: BTreeMap<&RvInstance, &str> = BTreeMap::new();
    for f in &evidence.findings {
        check_instance(theory, registry, &f.subject)?;
        if let Some(prev) = seen.insert(&f.subject, &f.value) {
            if prev != f.value {
                return Err(Error::InconsistentEvidence(alloc::vec![
                    alloc::format!("{} = {prev}", f.subject),
                    f.to_string(),
                ]));
            }
        }
    }

    let target_keys: Vec<NodeKey> = targets.iter().map(|t| ground_formula(t, v)).collect::<Result<_>>()?;
    let mut starts = target_keys.clone();
    starts.extend(evidence.findings.iter().map(|f| NodeKey::Rv(f.subject.clone())));

    let mut builder = Builder { v, evidence, limits, plans: BTreeMap::new() };
    builder.expand(starts)?;
    let order = topological(&builder.plans)?;
    let index: BTreeMap<&NodeKey, usize> = order.iter().enumerate().map(|(i, k)| (k, i)).collect();

    let mut nodes: Vec<GroundNode> = Vec::with_capacity(order.len());
    for k in &order {
        let (plan, parent_keys, states) = &builder.plans[k];
        let parents: Vec<usize> = parent_keys.iter().map(|p| index[p]).collect();
        let parent_states: Vec<&[String]> = parents.iter().map(|&p| nodes[p].states.as_slice()).collect();
        let product = parent_states
            .iter()
            .try_fold(states.len() as u64, |acc, s| acc.checked_mul(s.len() as u64))
            .unwrap_or(u64::MAX);
        if product > limits.max_parent_product {
            return Err(Error::LimitExceeded { limit: Limit::MaxParentProduct, value: product });
        }
        let (cpt, provenance) = match plan {
            Plan::Rv { mfrag, resident, bindings } => (
                compile_rv_cpt(theory, registry, *mfrag, resident, bindings, parent_keys, &parent_states, states)?,
                Some(Provenance {
                    mfrag: theory.mfrags[*mfrag].name.clone(),
                    bindings: bindings.iter().map(|b| b.binding.clone()).collect(),
                }),
            ),
            Plan::Logic => (compile_logic_cpt(k, registry, parent_keys, &parent_states, states)?, None),
        };
        nodes.push(GroundNode { key: k.clone(), states: states.clone(), parents, cpt, provenance, clamped: false });
    }

    let mut ev = Vec::new();
    for f in &evidence.findings {
        let key = NodeKey::Rv(f.subject.clone());
        let i = index[&key];
        let s = nodes[i]
            .state_index(&f.value)
            .ok_or_else(|| Error::UnknownState { rv: f.subject.to_string(), state: f.value.clone() })?;
        if !ev.contains(&(i, s)) {
            ev.push((i, s));
        }
    }
    ev.sort_unstable();
    let mut tgt: Vec<usize> = target_keys.iter().map(|k| index[k]).collect();
    tgt.dedup();

    Ok(Ssbn { nodes, targets: tgt, evidence: ev, findings: evidence.findings.clone(), limits })
}

/// Recompiles one domain-RV node's CPT from an explicit (possibly
/// reordered) list of its planned bindings. Exposed for binding-order
/// invariance checks.
pub fn compile_cpt(
    v: &ValidatedMTheory,
    evidence: &Evidence,
    ssbn: &Ssbn,
    node: usize,
    binding_order: &[usize],
) -> Result<Cpt> {
    let n = &ssbn.nodes[node];
    let NodeKey::Rv(inst) = &n.key else {
        return Ok(n.cpt.clone());
    };
    let b = Builder { v, evidence, limits: ssbn.limits, plans: BTreeMap::new() };
    let (plan, parent_keys) = b.plan_rv(inst)?;
    let Plan::Rv { mfrag, resident, bindings } = plan else { unreachable!() };
    let reordered: Vec<PlannedBinding> = binding_order.iter().map(|&i| bindings[i].clone()).collect();
    let parent_states: Vec<&[String]> = parent_keys
        .iter()
        .map(|k| ssbn.node(k).map(|p| p.states.as_slice()).ok_or_else(|| Error::UnknownTarget(k.to_string())))
        .collect::<Result<_>>()?;
    compile_rv_cpt(v.theory(), v.registry(), mfrag, &resident, &reordered, &parent_keys, &parent_states, &n.states)
}

/// Removes every node that cannot affect the targets' posterior given the
/// evidence (Bayes-ball requisite sets). Observed nodes whose own
/// distribution is not needed become clamped roots.
pub fn prune_ssbn(ssbn: &Ssbn) -> Ssbn {
    let n = ssbn.nodes.len();
    let children = ssbn.children();
    let observed: Vec<bool> = (0..n).map(|i| ssbn.observed_state(i).is_some()).collect();
    let mut top = alloc::vec![false; n];
    let mut bottom = alloc::vec![false; n];
    let mut visited = alloc::vec![false; n];
    // (node, arrived from child)
    let mut schedule: Vec<(usize, bool)> = ssbn.targets.iter().map(|&t| (t, true)).collect();
    while let Some((j, from_child)) = schedule.pop() {
        visited[j] = true;
        if from_child && !observed[j] {
            if !top[j] {
                top[j] = true;
                schedule.extend(ssbn.nodes[j].parents.iter().map(|&p| (p, true)));
            }
            if !bottom[j] {
                bottom[j] = true;
                schedule.extend(children[j].iter().map(|&c| (c, false)));
            }
        } else if !from_child {
            if observed[j] && !top[j] {
                top[j] = true;
                schedule.extend(ssbn.nodes[j].parents.iter().map(|&p| (p, true)));
            }
            if !observed[j] && !bottom[j] {
                bottom[j] = true;
                schedule.extend(children[j].iter().map(|&c| (c, false)));
            }
        }
    }
    let keep: Vec<bool> = (0..n).map(|i| top[i] || (observed[i] && visited[i]) || ssbn.targets.contains(&i)).collect();
    let mut remap = alloc::vec![usize::MAX; n];
    let mut nodes = Vec::new();
    for i in 0..n {
        if !keep[i] {
            continue;
        }
        remap[i] = nodes.len();
        let mut node = ssbn.nodes[i].clone();
        if observed[i] && !top[i] {
            let s = ssbn.observed_state(i).expect("observed");
            let mut probs = alloc::vec![0.0; node.states.len()];
            probs[s] = 1.0;
            node.cpt = Cpt { n_states: node.states.len(), probs };
            node.parents.clear();
            node.clamped = true;
        } else {
            node.parents = node.parents.iter().map(|&p| remap[p]).collect();
        }
        nodes.push(node);
    }
    let evidence = ssbn.evidence.iter().filter(|(i, _)| keep[*i]).map(|&(i, s)| (remap[i], s)).collect();
    let targets = ssbn.targets.iter().map(|&t| remap[t]).collect();
    Ssbn { nodes, targets, evidence, findings: ssbn.findings.clone(), limits: ssbn.limits }
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Graphviz description; byte-identical for identical networks.
pub fn export_dot(ssbn: &Ssbn) -> String {
    let mut out = String::from("digraph ssbn {\n  rankdir=TB;\n");
    for (i, n) in ssbn.nodes.iter().enumerate() {
        let label = dot_escape(&n.key.to_string());
        let style = if ssbn.targets.contains(&i) {
            ", shape=doubleoctagon, style=filled, fillcolor=\"#ffe08a\""
        } else if let Some(s) = ssbn.observed_state(i) {
            let _ = s;
            ", shape=box, style=filled, fillcolor=\"#c7e3ff\""
        } else {
            ""
        };
        let obs = ssbn.observed_state(i).map(|s| alloc::format!(" = {}", n.states[s])).unwrap_or_default();
        let _ = writeln!(out, "  n{i} [label=\"{label}{}\"{style}];", dot_escape(&obs));
    }
    for (p, c) in ssbn.arcs() {
        let _ = writeln!(out, "  n{p} -> n{c};");
    }
    out.push_str("}\n");
    out
}
