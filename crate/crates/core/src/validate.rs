//! Simple-MTheory checks: unique home MFrags, no instance-level cycles,
//! bounded ancestor-chain depth, and structural/type/local-distribution checks.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::ldl::check_ldl_wellformed;
use crate::logic::ground_typed;
use crate::model::{Arg, Binding, EntityRegistry, MFrag, MTheory, RvInstance, RvTerm, TypeName};

pub const DEFAULT_DEPTH_BOUND: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Condition {
    NoCycles,
    BoundedDepth,
    UniqueHome,
    TypeCheck,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::NoCycles => "NoCycles",
            Condition::BoundedDepth => "BoundedDepth",
            Condition::UniqueHome => "UniqueHome",
            Condition::TypeCheck => "TypeCheck",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub condition: Condition,
    /// Concrete offending instances, templates or MFrags. For `NoCycles`
    /// this is a closed path: each entry is a parent of the next, and the
    /// last is a parent of the first.
    pub witnesses: Vec<String>,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn merge(mut self, other: ValidationReport) -> Self {
        self.violations.extend(other.violations);
        self
    }

    pub fn count(&self, c: Condition) -> usize {
        self.violations.iter().filter(|v| v.condition == c).count()
    }

    fn push(&mut self, condition: Condition, witnesses: Vec<String>, message: String) {
        self.violations.push(Violation { condition, witnesses, message });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return writeln!(f, "ok");
        }
        for v in &self.violations {
            writeln!(f, "{}: {} [{}]", v.condition, v.message, v.witnesses.join(" -> "))?;
        }
        Ok(())
    }
}

/// A theory that passed every check, together with its registry and the
/// depth certificate computed along the way.
#[derive(Debug, Clone)]
pub struct ValidatedMTheory {
    theory: MTheory,
    registry: EntityRegistry,
    depth: BTreeMap<String, usize>,
    order: Vec<RvInstance>,
}

impl ValidatedMTheory {
    pub fn theory(&self) -> &MTheory {
        &self.theory
    }

    pub fn registry(&self) -> &EntityRegistry {
        &self.registry
    }

    /// Longest ancestor chain (counted in instances) ending at any instance
    /// of each template.
    pub fn depth_certificate(&self) -> &BTreeMap<String, usize> {
        &self.depth
    }

    pub fn max_depth(&self) -> usize {
        self.depth.values().copied().max().unwrap_or(0)
    }

    /// Topological order of every formable RV instance.
    pub fn topological_order(&self) -> &[RvInstance] {
        &self.order
    }
}

/// Every RV template must be resident in exactly one MFrag.
pub fn check_unique_home(t: &MTheory) -> ValidationReport {
    let mut report = ValidationReport::default();
    for tpl in &t.templates {
        let homes = t.homes_of(&tpl.name);
        if homes.len() != 1 {
            let names: Vec<String> = homes.iter().map(|&i| t.mfrags[i].name.clone()).collect();
            let message = if homes.is_empty() {
                alloc::format!("{} has no home MFrag", tpl.name)
            } else {
                alloc::format!("{} is resident in {} MFrags: {}", tpl.name, homes.len(), names.join(", "))
            };
            let mut witnesses = alloc::vec![tpl.name.clone()];
            witnesses.extend(names);
            report.push(Condition::UniqueHome, witnesses, message);
        }
    }
    report
}

fn all_bindings(types: &BTreeMap<String, TypeName>, registry: &EntityRegistry) -> Vec<Binding> {
    let mut out = alloc::vec![Binding::new()];
    for (v, ty) in types {
        let ids = registry.ids_of(ty);
        let mut next = Vec::with_capacity(out.len() * ids.len());
        for b in &out {
            for id in ids {
                let mut nb = b.clone();
                nb.insert(v.clone(), id.clone());
                next.push(nb);
            }
        }
        out = next;
    }
    out
}

/// Instance-level influence graph over every RV instance formable from the
/// registry: parent (or non-built-in context) instance → resident instance.
/// Returned as child → set of parents.
pub fn instance_graph(t: &MTheory, r: &EntityRegistry) -> BTreeMap<RvInstance, BTreeSet<RvInstance>> {
    let mut graph: BTreeMap<RvInstance, BTreeSet<RvInstance>> = BTreeMap::new();
    for m in &t.mfrags {
        let Ok(types) = m.variable_types(t) else { continue };
        let mut context_terms = Vec::new();
        for c in &m.context {
            c.rv_terms(&mut context_terms);
        }
        for b in all_bindings(&types, r) {
            for res in &m.resident {
                let Ok(Some(ri)) = ground_typed(res, &b, t, r) else { continue };
                let parents = graph.entry(ri).or_default();
                for p in m.parents_of(res).into_iter().chain(context_terms.iter().copied()) {
                    if let Ok(Some(pi)) = ground_typed(p, &b, t, r) {
                        parents.insert(pi);
                    }
                }
            }
        }
    }
    // Make sure every mentioned parent is a vertex.
    let mentioned: Vec<RvInstance> = graph.values().flatten().cloned().collect();
    for p in mentioned {
        graph.entry(p).or_default();
    }
    graph
}

/// Tarjan's strongly connected components over child → parents adjacency.
fn cyclic_components(graph: &BTreeMap<RvInstance, BTreeSet<RvInstance>>) -> Vec<Vec<RvInstance>> {
    let keys: Vec<&RvInstance> = graph.keys().collect();
    let index_of: BTreeMap<&RvInstance, usize> = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let adj: Vec<Vec<usize>> = keys.iter().map(|k| graph[*k].iter().map(|p| index_of[p]).collect()).collect();
    let n = keys.len();
    let mut index = alloc::vec![usize::MAX; n];
    let mut low = alloc::vec![0usize; n];
    let mut on_stack = alloc::vec![false; n];
    let mut stack = Vec::new();
    let mut counter = 0;
    let mut out = Vec::new();
    for root in 0..n {
        if index[root] != usize::MAX {
            continue;
        }
        // Iterative DFS: (vertex, next neighbour position).
        let mut call: Vec<(usize, usize)> = alloc::vec![(root, 0)];
        index[root] = counter;
        low[root] = counter;
        counter += 1;
        stack.push(root);
        on_stack[root] = true;
        while let Some(&mut (v, ref mut pos)) = call.last_mut() {
            if *pos < adj[v].len() {
                let w = adj[v][*pos];
                *pos += 1;
                if index[w] == usize::MAX {
                    index[w] = counter;
                    low[w] = counter;
                    counter += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    call.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
            } else {
                call.pop();
                if let Some(&(parent, _)) = call.last() {
                    low[parent] = low[parent].min(low[v]);
                }
                if low[v] == index[v] {
                    let mut comp = Vec::new();
                    loop {
                        let w = stack.pop().expect("tarjan stack");
                        on_stack[w] = false;
                        comp.push(w);
                        if w == v {
                            break;
                        }
                    }
                    let cyclic = comp.len() > 1 || adj[v].contains(&v);
                    if cyclic {
                        comp.sort_unstable();
                        out.push(comp.into_iter().map(|i| keys[i].clone()).collect());
                    }
                }
            }
        }
    }
    out
}

/// A closed path inside one strongly connected component, listed so that
/// each instance is a parent of the next (and the last of the first).
fn cycle_witness(graph: &BTreeMap<RvInstance, BTreeSet<RvInstance>>, comp: &[RvInstance]) -> Vec<RvInstance> {
    let start = &comp[0];
    let members: BTreeSet<&RvInstance> = comp.iter().collect();
    // BFS along parent edges from start back to start.
    let mut prev: BTreeMap<&RvInstance, &RvInstance> = BTreeMap::new();
    let mut queue = VecDeque::new();
    queue.push_back(start);
    let mut closing = None;
    'search: while let Some(v) = queue.pop_front() {
        for p in &graph[v] {
            if !members.contains(p) {
                continue;
            }
            if p == start {
                closing = Some(v);
                break 'search;
            }
            if !prev.contains_key(p) {
                prev.insert(p, v);
                queue.push_back(p);
            }
        }
    }
    // `prev` maps a parent back to the child it was reached from, so walking
    // it from `closing` lists each instance before the child it influences.
    let mut path = Vec::new();
    let mut cur = closing.expect("component is cyclic");
    path.push(cur.clone());
    while cur != start {
        cur = prev[cur];
        path.push(cur.clone());
    }
    path
}

#[derive(Debug, Clone, Default)]
pub struct DepthCertificate {
    pub per_template: BTreeMap<String, usize>,
    pub max: usize,
    pub order: Vec<RvInstance>,
}

/// Checks that no formable instance is its own ancestor and that every
/// ancestor chain has at most `depth_bound` instances.
pub fn check_instance_acyclicity(
    t: &MTheory,
    r: &EntityRegistry,
    depth_bound: usize,
) -> (ValidationReport, DepthCertificate) {
    let mut report = ValidationReport::default();
    let graph = instance_graph(t, r);

    let mut seen_template_sets = BTreeSet::new();
    let mut cyclic_templates = BTreeSet::new();
    for comp in cyclic_components(&graph) {
        let names: BTreeSet<String> = comp.iter().map(|i| i.name.clone()).collect();
        cyclic_templates.extend(names.iter().cloned());
        if !seen_template_sets.insert(names.clone()) {
            continue;
        }
        let witness: Vec<String> = cycle_witness(&graph, &comp).iter().map(ToString::to_string).collect();
        let message = alloc::format!(
            "instance {} is an ancestor of itself (templates: {})",
            witness[0],
            names.into_iter().collect::<Vec<_>>().join(", ")
        );
        report.push(Condition::NoCycles, witness, message);
    }

    // Recursion must be declared with a strictly decreasing variable.
    for m in &t.mfrags {
        for inp in &m.input {
            if m.resident_named(&inp.name).is_none() || cyclic_templates.contains(&inp.name) {
                continue;
            }
            let ok = m.recursion.as_ref().is_some_and(|v| inp.args.iter().any(|a| matches!(a, Arg::Prev(p) if p == v)));
            if !ok {
                report.push(
                    Condition::NoCycles,
                    alloc::vec![m.name.clone(), inp.to_string()],
                    alloc::format!(
                        "MFrag {} uses {} recursively without a `recursion:` variable decreasing through Prev",
                        m.name,
                        inp
                    ),
                );
            }
        }
    }

    let mut cert = DepthCertificate::default();
    if !report.is_clean() {
        return (report, cert);
    }

    // Kahn order (parents first), ties broken by canonical instance order.
    let mut children: BTreeMap<&RvInstance, Vec<&RvInstance>> = BTreeMap::new();
    let mut indeg: BTreeMap<&RvInstance, usize> = BTreeMap::new();
    for (c, ps) in &graph {
        indeg.insert(c, ps.len());
        for p in ps {
            children.entry(p).or_default().push(c);
        }
    }
    let mut ready: BTreeSet<&RvInstance> = indeg.iter().filter(|(_, d)| **d == 0).map(|(k, _)| *k).collect();
    let mut depth: BTreeMap<&RvInstance, usize> = BTreeMap::new();
    while let Some(v) = ready.pop_first() {
        let d = graph[v].iter().map(|p| depth[p]).max().unwrap_or(0) + 1;
        depth.insert(v, d);
        cert.order.push(v.clone());
        for c in children.get(v).map(Vec::as_slice).unwrap_or(&[]) {
            let e = indeg.get_mut(c).expect("vertex");
            *e -= 1;
            if *e == 0 {
                ready.insert(c);
            }
        }
    }
    for (inst, d) in &depth {
        let e = cert.per_template.entry(inst.name.clone()).or_insert(0);
        *e = (*e).max(*d);
        cert.max = cert.max.max(*d);
        if *d > depth_bound {
            report.push(
                Condition::BoundedDepth,
                alloc::vec![inst.to_string()],
                alloc::format!("ancestor chain of {inst} has {d} instances, above the bound {depth_bound}"),
            );
        }
    }
    (report, cert)
}

fn term_issue(m: &MFrag, t: &RvTerm, report: &mut ValidationReport, theory: &MTheory) {
    if theory.template(&t.name).is_none() {
        report.push(
            Condition::TypeCheck,
            alloc::vec![m.name.clone(), t.to_string()],
            alloc::format!("unknown random variable {} in MFrag {}", t.name, m.name),
        );
    }
    if t.args.iter().any(|a| matches!(a, Arg::Term(_))) {
        report.push(
            Condition::TypeCheck,
            alloc::vec![m.name.clone(), t.to_string()],
            alloc::format!("nested term {t} is only allowed in queries"),
        );
    }
}

/// Fragment-level structure, variable typing and local distributions.
pub fn check_structure(t: &MTheory, r: &EntityRegistry) -> ValidationReport {
    let mut report = ValidationReport::default();
    let tc = |report: &mut ValidationReport, w: Vec<String>, msg: String| report.push(Condition::TypeCheck, w, msg);

    let mut names = BTreeSet::new();
    for m in &t.mfrags {
        if !names.insert(m.name.as_str()) {
            tc(&mut report, alloc::vec![m.name.clone()], alloc::format!("duplicate MFrag name {}", m.name));
        }
    }
    let mut tnames = BTreeSet::new();
    for tpl in &t.templates {
        if !tnames.insert(tpl.name.as_str()) {
            tc(&mut report, alloc::vec![tpl.name.clone()], alloc::format!("duplicate RV declaration {}", tpl.name));
        }
        for (_, ty) in &tpl.params {
            if !r.has_type(ty) {
                tc(
                    &mut report,
                    alloc::vec![tpl.name.clone()],
                    alloc::format!("{} uses undeclared type {ty}", tpl.name),
                );
            }
        }
        if let crate::model::ValueRange::Entities(ty) = &tpl.range {
            if !r.has_type(ty) {
                tc(
                    &mut report,
                    alloc::vec![tpl.name.clone()],
                    alloc::format!("{} ranges over undeclared type {ty}", tpl.name),
                );
            }
        }
    }

    for m in &t.mfrags {
        for term in m.input.iter().chain(&m.resident) {
            term_issue(m, term, &mut report, t);
        }
        let mut ctx_terms = Vec::new();
        for c in &m.context {
            c.rv_terms(&mut ctx_terms);
        }
        for term in &ctx_terms {
            term_issue(m, term, &mut report, t);
        }
        // Pairwise disjoint node sets.
        for term in &m.input {
            if m.resident.contains(term) {
                tc(
                    &mut report,
                    alloc::vec![m.name.clone(), term.to_string()],
                    alloc::format!("{term} is both input and resident"),
                );
            }
        }
        for term in &ctx_terms {
            if m.input.contains(term) || m.resident.contains(term) {
                tc(
                    &mut report,
                    alloc::vec![m.name.clone(), term.to_string()],
                    alloc::format!("{term} is both context and input/resident"),
                );
            }
        }
        // Arcs connect input/resident parents to residents; inputs are roots.
        for (p, c) in &m.arcs {
            if !m.input.contains(p) && !m.resident.contains(p) {
                tc(
                    &mut report,
                    alloc::vec![m.name.clone(), p.to_string()],
                    alloc::format!("arc source {p} is not an input or resident node"),
                );
            }
            if !m.resident.contains(c) {
                tc(
                    &mut report,
                    alloc::vec![m.name.clone(), c.to_string()],
                    alloc::format!("arc target {c} is not a resident node"),
                );
            }
        }
        if let Some(cycle) = fragment_cycle(m) {
            tc(&mut report, cycle, alloc::format!("fragment graph of {} is cyclic", m.name));
        }
        // Residents: distinct variable arguments, exactly one local each.
        for res in &m.resident {
            let mut vars = BTreeSet::new();
            let ok = res.args.iter().all(|a| matches!(a, Arg::Var(v) if vars.insert(v.clone())));
            if !ok {
                tc(
                    &mut report,
                    alloc::vec![m.name.clone(), res.to_string()],
                    alloc::format!("resident {res} must take distinct variables"),
                );
            }
            let n = m.locals.iter().filter(|l| &l.resident == res).count();
            if n != 1 {
                tc(
                    &mut report,
                    alloc::vec![m.name.clone(), res.to_string()],
                    alloc::format!("resident {res} has {n} local distributions"),
                );
            }
        }
        for l in &m.locals {
            if !m.resident.contains(&l.resident) {
                tc(
                    &mut report,
                    alloc::vec![m.name.clone(), l.resident.to_string()],
                    alloc::format!("local distribution for non-resident {}", l.resident),
                );
            }
        }
        if let Some(v) = &m.recursion {
            if !m.vars().contains(v) {
                tc(
                    &mut report,
                    alloc::vec![m.name.clone()],
                    alloc::format!("recursion variable `{v}` does not occur in {}", m.name),
                );
            }
        }
        let types = match m.variable_types(t) {
            Ok(ty) => ty,
            Err(msg) => {
                tc(&mut report, alloc::vec![m.name.clone()], msg);
                continue;
            }
        };
        // Prev only over ordered types.
        let mut prev_vars = BTreeSet::new();
        for term in m.input.iter().chain(&m.resident).chain(ctx_terms.iter().copied()) {
            for a in &term.args {
                if let Arg::Prev(v) = a {
                    prev_vars.insert(v.clone());
                }
            }
        }
        for v in prev_vars {
            if let Some(ty) = types.get(&v) {
                if !r.is_ordered(ty) {
                    tc(
                        &mut report,
                        alloc::vec![m.name.clone(), v.clone()],
                        alloc::format!("Prev({v}) needs an ordered type, {ty} is not"),
                    );
                }
            }
        }
        // Local distributions.
        for l in &m.locals {
            let Some(tpl) = t.template(&l.resident.name) else { continue };
            let parents: Vec<(RvTerm, crate::model::StateSpace)> = m
                .parents_of(&l.resident)
                .into_iter()
                .filter_map(|p| t.template(&p.name).map(|pt| (p.clone(), pt.states(r))))
                .collect();
            for d in check_ldl_wellformed(&l.expr, &tpl.states(r), &parents) {
                tc(
                    &mut report,
                    alloc::vec![m.name.clone(), l.resident.to_string()],
                    alloc::format!("{}: {}", d.issue, d.message),
                );
            }
        }
    }
    report
}

fn fragment_cycle(m: &MFrag) -> Option<Vec<String>> {
    let nodes: Vec<&RvTerm> = m.input.iter().chain(&m.resident).collect();
    let idx = |t: &RvTerm| nodes.iter().position(|n| *n == t);
    let mut adj = alloc::vec![Vec::new(); nodes.len()];
    for (p, c) in &m.arcs {
        if let (Some(a), Some(b)) = (idx(p), idx(c)) {
            adj[a].push(b);
        }
    }
    // 0 = unvisited, 1 = on path, 2 = done
    let mut state = alloc::vec![0u8; nodes.len()];
    fn dfs(v: usize, adj: &[Vec<usize>], state: &mut [u8], path: &mut Vec<usize>) -> bool {
        state[v] = 1;
        path.push(v);
        for &w in &adj[v] {
            if state[w] == 1 {
                path.push(w);
                return true;
            }
            if state[w] == 0 && dfs(w, adj, state, path) {
                return true;
            }
        }
        path.pop();
        state[v] = 2;
        false
    }
    for v in 0..nodes.len() {
        let mut path = Vec::new();
        if state[v] == 0 && dfs(v, &adj, &mut state, &mut path) {
            // Keep only the cycle itself, without the closing repeat.
            let last = path.pop().expect("non-empty");
            let start = path.iter().position(|&i| i == last).unwrap_or(0);
            return Some(path[start..].iter().map(|&i| nodes[i].to_string()).collect());
        }
    }
    None
}

/// Runs every check; returns the certified theory or the full report.
pub fn validate(t: &MTheory, r: &EntityRegistry) -> Result<ValidatedMTheory, ValidationReport> {
    validate_with_bound(t, r, DEFAULT_DEPTH_BOUND)
}

pub fn validate_with_bound(
    t: &MTheory,
    r: &EntityRegistry,
    depth_bound: usize,
) -> Result<ValidatedMTheory, ValidationReport> {
    let structure = check_structure(t, r);
    let homes = check_unique_home(t);
    let (acyclic, cert) = check_instance_acyclicity(t, r, depth_bound);
    let report = structure.merge(homes).merge(acyclic);
    if !report.is_clean() {
        return Err(report);
    }
    Ok(ValidatedMTheory { theory: t.clone(), registry: r.clone(), depth: cert.per_template, order: cert.order })
}

/// Builds the registry from the theory's `entities` block, then validates.
pub fn validate_theory(t: &MTheory) -> Result<ValidatedMTheory, ValidationReport> {
    match t.registry() {
        Ok(r) => validate(t, &r),
        Err(e) => {
            let mut report = ValidationReport::default();
            report.push(Condition::TypeCheck, alloc::vec![], e.to_string());
            Err(report)
        }
    }
}

impl core::error::Error for ValidationReport {}
