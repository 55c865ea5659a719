//! Local distribution language.
//!
//! A local expression is an ordered list of guarded clauses plus a mandatory
//! `else` distribution. Guards are Boolean combinations of threshold tests on
//! influence counts; probability terms are rational constants or saturated
//! linear functions of one count, so every expression is constant once all
//! counts exceed its [saturation bound](LocalExpr::saturation_bound).

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::logic::{eval_formula, ThreeValued};
use crate::model::{
    instantiate_mfrag, Binding, EntityRegistry, MFrag, MTheory, RvInstance, RvTerm, StateSpace, ABSURD,
};

/// Tolerance on the total mass of an evaluated distribution.
pub const MASS_TOLERANCE: f64 = 1e-9;

/// Exact rational constant as written in a theory file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Rational {
    num: i64,
    den: i64,
}

fn gcd(mut a: i64, mut b: i64) -> i64 {
    a = a.abs();
    b = b.abs();
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

impl Rational {
    pub fn new(num: i64, den: i64) -> Option<Self> {
        if den == 0 {
            return None;
        }
        let sign = if den < 0 { -1 } else { 1 };
        let g = gcd(num, den);
        Some(Rational { num: sign * num / g, den: sign * den / g })
    }

    pub fn integer(n: i64) -> Self {
        Rational { num: n, den: 1 }
    }

    /// Parses `3`, `0.25`, `-1.5` or `1/3`.
    pub fn parse(text: &str) -> Option<Self> {
        if let Some((n, d)) = text.split_once('/') {
            return Rational::new(n.trim().parse().ok()?, d.trim().parse().ok()?);
        }
        let (neg, body) = match text.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, text),
        };
        let (int, frac) = body.split_once('.').unwrap_or((body, ""));
        if int.is_empty() && frac.is_empty() {
            return None;
        }
        if !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) || frac.len() > 15 {
            return None;
        }
        let den = 10i64.checked_pow(frac.len() as u32)?;
        let int_v: i64 = if int.is_empty() { 0 } else { int.parse().ok()? };
        let frac_v: i64 = if frac.is_empty() { 0 } else { frac.parse().ok()? };
        let num = int_v.checked_mul(den)?.checked_add(frac_v)?;
        Rational::new(if neg { -num } else { num }, den)
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn is_negative(self) -> bool {
        self.num < 0
    }
}

impl fmt::Display for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            return write!(f, "{}", self.num);
        }
        // Exact decimal when the denominator divides a power of ten.
        let mut d = self.den;
        let (mut twos, mut fives) = (0u32, 0u32);
        while d % 2 == 0 {
            d /= 2;
            twos += 1;
        }
        while d % 5 == 0 {
            d /= 5;
            fives += 1;
        }
        if d != 1 {
            return write!(f, "{}/{}", self.num, self.den);
        }
        let digits = twos.max(fives);
        let scale = 10i64.pow(digits);
        let scaled = self.num * (scale / self.den);
        let sign = if scaled < 0 { "-" } else { "" };
        let abs = scaled.abs();
        write!(f, "{sign}{}.{:0width$}", abs / scale, abs % scale, width = digits as usize)
    }
}

/// `parent = value`; a pattern is the conjunction of its atoms.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Atom {
    pub term: RvTerm,
    pub value: String,
}

/// Conjunction of parent-value constraints. The empty pattern (`*`) matches
/// every context-satisfying binding.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Pattern {
    pub atoms: Vec<Atom>,
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.atoms.is_empty() {
            return f.write_str("*");
        }
        for (i, a) in self.atoms.iter().enumerate() {
            if i > 0 {
                f.write_str(" & ")?;
            }
            write!(f, "{} = {}", a.term, a.value)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cmp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl Cmp {
    pub fn holds(self, a: u64, b: u64) -> bool {
        match self {
            Cmp::Eq => a == b,
            Cmp::Ne => a != b,
            Cmp::Lt => a < b,
            Cmp::Le => a <= b,
            Cmp::Gt => a > b,
            Cmp::Ge => a >= b,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Cmp::Eq => "=",
            Cmp::Ne => "!=",
            Cmp::Lt => "<",
            Cmp::Le => "<=",
            Cmp::Gt => ">",
            Cmp::Ge => ">=",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Guard {
    Count { pattern: Pattern, cmp: Cmp, k: u64 },
    Not(alloc::boxed::Box<Guard>),
    And(alloc::boxed::Box<Guard>, alloc::boxed::Box<Guard>),
    Or(alloc::boxed::Box<Guard>, alloc::boxed::Box<Guard>),
}

impl Guard {
    fn eval(&self, count: &mut dyn FnMut(&Pattern) -> u64) -> bool {
        match self {
            Guard::Count { pattern, cmp, k } => cmp.holds(count(pattern), *k),
            Guard::Not(g) => !g.eval(count),
            Guard::And(a, b) => a.eval(count) && b.eval(count),
            Guard::Or(a, b) => a.eval(count) || b.eval(count),
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Pattern, u64)) {
        match self {
            // A threshold test is constant once the count reaches k + 1.
            Guard::Count { pattern, k, .. } => f(pattern, k.saturating_add(1)),
            Guard::Not(g) => g.visit(f),
            Guard::And(a, b) | Guard::Or(a, b) => {
                a.visit(f);
                b.visit(f);
            }
        }
    }
}

impl fmt::Display for Guard {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Guard::Count { pattern, cmp, k } => write!(f, "count({pattern}) {} {k}", cmp.symbol()),
            Guard::Not(g) => write!(f, "not ({g})"),
            Guard::And(a, b) => write!(f, "({a}) and ({b})"),
            Guard::Or(a, b) => write!(f, "({a}) or ({b})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProbTerm {
    Const(Rational),
    /// `min(cap, base + slope * sat(pattern, bound))`
    Saturating {
        cap: Rational,
        base: Rational,
        slope: Rational,
        pattern: Pattern,
        bound: u64,
    },
    /// `*`: receives whatever mass the other states leave.
    Rest,
}

impl ProbTerm {
    fn eval(&self, count: &mut dyn FnMut(&Pattern) -> u64) -> f64 {
        match self {
            ProbTerm::Const(c) => c.to_f64(),
            ProbTerm::Saturating { cap, base, slope, pattern, bound } => {
                let n = count(pattern).min(*bound) as f64;
                cap.to_f64().min(base.to_f64() + slope.to_f64() * n)
            }
            ProbTerm::Rest => 0.0,
        }
    }
}

impl fmt::Display for ProbTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProbTerm::Const(c) => write!(f, "{c}"),
            ProbTerm::Saturating { cap, base, slope, pattern, bound } => {
                write!(f, "min({cap}, {base} + {slope} * sat({pattern}, {bound}))")
            }
            ProbTerm::Rest => f.write_str("*"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dist {
    Table(Vec<(String, ProbTerm)>),
    /// Equal mass on every declared (non-Absurd) state.
    Uniform,
}

impl fmt::Display for Dist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dist::Uniform => f.write_str("uniform"),
            Dist::Table(entries) => {
                for (i, (s, t)) in entries.iter().enumerate() {
                    if i > 0 {
                        f.write_str("; ")?;
                    }
                    write!(f, "{s} = {t}")?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clause {
    pub guard: Guard,
    pub dist: Dist,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalExpr {
    pub clauses: Vec<Clause>,
    pub default: Dist,
}

/// A distribution over a state space including the trailing `Absurd`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector {
    pub states: Vec<String>,
    pub probs: Vec<f64>,
}

impl ProbabilityVector {
    pub fn get(&self, state: &str) -> f64 {
        self.states.iter().position(|s| s == state).map_or(0.0, |i| self.probs[i])
    }
}

/// Tallies of parent-value configurations over context-satisfying bindings.
/// Configuration tuples follow the order of `parents`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct InfluenceCounts {
    pub parents: Vec<RvTerm>,
    pub tallies: BTreeMap<Vec<String>, u64>,
}

impl InfluenceCounts {
    pub fn new(parents: Vec<RvTerm>) -> Self {
        InfluenceCounts { parents, tallies: BTreeMap::new() }
    }

    pub fn add(&mut self, config: Vec<String>) {
        *self.tallies.entry(config).or_insert(0) += 1;
    }

    pub fn total(&self) -> u64 {
        self.tallies.values().sum()
    }

    /// Number of tallied configurations matching `pattern`. Atoms naming a
    /// term that is not a parent never match.
    pub fn count(&self, pattern: &Pattern) -> u64 {
        let mut idx = Vec::with_capacity(pattern.atoms.len());
        for a in &pattern.atoms {
            match self.parents.iter().position(|p| p == &a.term) {
                Some(i) => idx.push((i, a.value.as_str())),
                None => return 0,
            }
        }
        self.tallies.iter().filter(|(cfg, _)| idx.iter().all(|(i, v)| cfg[*i] == *v)).map(|(_, n)| n).sum()
    }
}

impl LocalExpr {
    pub fn constant(dist: Dist) -> Self {
        LocalExpr { clauses: Vec::new(), default: dist }
    }

    /// Distinct patterns referenced anywhere in the expression.
    pub fn patterns(&self) -> Vec<&Pattern> {
        let mut set: BTreeSet<&Pattern> = BTreeSet::new();
        for c in &self.clauses {
            c.guard.visit(&mut |p, _| {
                set.insert(p);
            });
            if let Dist::Table(t) = &c.dist {
                for (_, term) in t {
                    if let ProbTerm::Saturating { pattern, .. } = term {
                        set.insert(pattern);
                    }
                }
            }
        }
        if let Dist::Table(t) = &self.default {
            for (_, term) in t {
                if let ProbTerm::Saturating { pattern, .. } = term {
                    set.insert(pattern);
                }
            }
        }
        set.into_iter().collect()
    }

    /// Smallest `B` such that the evaluated distribution is the same for
    /// every count vector whose entries are all at least `B`.
    pub fn saturation_bound(&self) -> u64 {
        let mut b = 0u64;
        let mut bump = |t: &ProbTerm| {
            if let ProbTerm::Saturating { bound, .. } = t {
                b = b.max(*bound);
            }
        };
        for c in &self.clauses {
            if let Dist::Table(t) = &c.dist {
                t.iter().for_each(|(_, x)| bump(x));
            }
        }
        if let Dist::Table(t) = &self.default {
            t.iter().for_each(|(_, x)| bump(x));
        }
        for c in &self.clauses {
            c.guard.visit(&mut |_, k| b = b.max(k));
        }
        b
    }

    /// True when some pattern explicitly constrains a parent to `Absurd`.
    pub fn mentions_absurd(&self) -> bool {
        self.patterns().iter().any(|p| p.atoms.iter().any(|a| a.value == ABSURD))
    }

    /// Evaluates with an arbitrary pattern-count oracle.
    pub fn eval_with(&self, states: &StateSpace, count: &mut dyn FnMut(&Pattern) -> u64) -> Result<ProbabilityVector> {
        let dist = self.clauses.iter().find(|c| c.guard.eval(count)).map(|c| &c.dist).unwrap_or(&self.default);
        let all = states.all();
        let mut probs = alloc::vec![0.0; all.len()];
        match dist {
            Dist::Uniform => {
                let n = states.declared().len() as f64;
                for p in probs.iter_mut().take(states.declared().len()) {
                    *p = 1.0 / n;
                }
            }
            Dist::Table(entries) => {
                let mut rest = None;
                let mut sum = 0.0;
                for (state, term) in entries {
                    let i = states
                        .index_of(state)
                        .ok_or_else(|| Error::UnknownState { rv: String::from("<local>"), state: state.clone() })?;
                    if matches!(term, ProbTerm::Rest) {
                        rest = Some(i);
                        continue;
                    }
                    let p = term.eval(count);
                    if p < -MASS_TOLERANCE {
                        return Err(Error::NegativeResidual(p));
                    }
                    let p = p.max(0.0);
                    probs[i] += p;
                    sum += p;
                }
                match rest {
                    Some(i) => {
                        let r = 1.0 - sum;
                        if r < -MASS_TOLERANCE {
                            return Err(Error::NegativeResidual(r));
                        }
                        probs[i] += r.max(0.0);
                    }
                    None => {
                        if (sum - 1.0).abs() > MASS_TOLERANCE {
                            return Err(Error::MassError(sum));
                        }
                    }
                }
            }
        }
        let total: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= total;
        }
        Ok(ProbabilityVector { states: all, probs })
    }
}

pub fn eval_local_distribution(
    expr: &LocalExpr,
    counts: &InfluenceCounts,
    states: &StateSpace,
) -> Result<ProbabilityVector> {
    expr.eval_with(states, &mut |p| counts.count(p))
}

/// The distribution used when no binding satisfies the context.
pub fn default_distribution(expr: &LocalExpr, states: &StateSpace) -> Result<ProbabilityVector> {
    expr.eval_with(states, &mut |_| 0)
}

/// Values of the RV instances in one resident's partial world.
pub type PartialWorldState = BTreeMap<RvInstance, String>;

/// Tallies parent configurations over every binding of the home MFrag's free
/// variables whose context terms all evaluate `True` in `world`.
pub fn compute_influence_counts(
    resident: &RvInstance,
    world: &PartialWorldState,
    mfrag: &MFrag,
    theory: &MTheory,
    registry: &EntityRegistry,
) -> Result<InfluenceCounts> {
    let term = mfrag.resident_named(&resident.name).ok_or_else(|| Error::UnknownRv(resident.name.clone()))?;
    let mut binding = Binding::new();
    for (a, id) in term.args.iter().zip(&resident.args) {
        if let crate::model::Arg::Var(v) = a {
            binding.insert(v.clone(), id.clone());
        }
    }
    let inst = instantiate_mfrag(theory, registry, mfrag, &binding)?;
    let parents: Vec<RvTerm> = mfrag.parents_of(term).into_iter().cloned().collect();
    let mut counts = InfluenceCounts::new(parents.clone());
    let mut lookup = |i: &RvInstance| world.get(i).cloned().ok_or_else(|| Error::IncompleteWorld(i.to_string()));
    'bindings: for b in inst.completions(registry) {
        for ctx in &mfrag.context {
            if eval_formula(ctx, &b, theory, registry, &mut lookup)? != ThreeValued::True {
                continue 'bindings;
            }
        }
        let mut config = Vec::with_capacity(parents.len());
        for p in &parents {
            // A parent instance that does not exist (e.g. `Prev` of the first
            // time step) contributes the constant value Absurd.
            match crate::logic::ground_typed(p, &b, theory, registry)? {
                Some(pi) => config.push(lookup(&pi)?),
                None => config.push(ABSURD.to_string()),
            }
        }
        counts.add(config);
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LdlIssue {
    UnknownState,
    UnknownParent,
    DuplicateState,
    MultipleRemainders,
    NegativeProbability,
    NegativeResidual,
    MassError,
    ZeroBound,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LdlDiagnostic {
    pub issue: LdlIssue,
    pub message: String,
}

/// Largest count lattice enumerated exhaustively by the checker.
const LATTICE_LIMIT: u64 = 200_000;

/// Static checks: state membership, parent references, non-negativity and
/// unit mass over the lattice of pattern counts up to the saturation bound.
pub fn check_ldl_wellformed(
    expr: &LocalExpr,
    states: &StateSpace,
    parents: &[(RvTerm, StateSpace)],
) -> Vec<LdlDiagnostic> {
    let mut out = Vec::new();
    let mut diag = |issue, message: String| out.push(LdlDiagnostic { issue, message });

    for p in expr.patterns() {
        for a in &p.atoms {
            match parents.iter().find(|(t, _)| t == &a.term) {
                None => diag(LdlIssue::UnknownParent, alloc::format!("{} is not a parent", a.term)),
                Some((_, s)) if !s.contains(&a.value) => {
                    diag(LdlIssue::UnknownState, alloc::format!("`{}` is not a value of {}", a.value, a.term))
                }
                _ => {}
            }
        }
    }
    let dists = expr.clauses.iter().map(|c| &c.dist).chain(core::iter::once(&expr.default));
    for d in dists {
        let Dist::Table(entries) = d else { continue };
        let mut seen = BTreeSet::new();
        let mut rests = 0;
        for (s, t) in entries {
            if !states.contains(s) {
                diag(LdlIssue::UnknownState, alloc::format!("`{s}` is not a possible value"));
            }
            if !seen.insert(s.as_str()) {
                diag(LdlIssue::DuplicateState, alloc::format!("`{s}` is assigned twice"));
            }
            match t {
                ProbTerm::Rest => rests += 1,
                ProbTerm::Const(c) if c.is_negative() => {
                    diag(LdlIssue::NegativeProbability, alloc::format!("{s} = {c} is negative"))
                }
                ProbTerm::Saturating { bound: 0, .. } => {
                    diag(LdlIssue::ZeroBound, alloc::format!("saturation bound for {s} must be positive"))
                }
                _ => {}
            }
        }
        if rests > 1 {
            diag(LdlIssue::MultipleRemainders, String::from("more than one `*` state"));
        }
    }
    if !out.is_empty() {
        return out;
    }

    // Mass conditions over count vectors in {0..=B}^patterns.
    let patterns = expr.patterns();
    let b = expr.saturation_bound();
    let per_axis: Vec<u64> = if (b + 1).checked_pow(patterns.len() as u32).is_some_and(|n| n <= LATTICE_LIMIT) {
        (0..=b).collect()
    } else {
        let mut crit: BTreeSet<u64> = [0, b].into_iter().collect();
        for c in &expr.clauses {
            c.guard.visit(&mut |_, k| {
                crit.insert(k.saturating_sub(2));
                crit.insert(k - 1);
                crit.insert(k);
            });
        }
        crit.into_iter().collect()
    };
    let mut idx = alloc::vec![0usize; patterns.len()];
    let mut reported = BTreeSet::new();
    loop {
        let point: Vec<u64> = idx.iter().map(|&i| per_axis[i]).collect();
        let mut lookup = |p: &Pattern| patterns.iter().position(|q| *q == p).map_or(0, |i| point[i]);
        match expr.eval_with(states, &mut lookup) {
            Err(Error::MassError(m)) if reported.insert(0u8) => out.push(LdlDiagnostic {
                issue: LdlIssue::MassError,
                message: alloc::format!("distribution sums to {m} at counts {point:?}"),
            }),
            Err(Error::NegativeResidual(m)) if reported.insert(1u8) => out.push(LdlDiagnostic {
                issue: LdlIssue::NegativeResidual,
                message: alloc::format!("remainder mass {m} at counts {point:?}"),
            }),
            _ => {}
        }
        let mut k = 0;
        loop {
            if k == idx.len() {
                return out;
            }
            idx[k] += 1;
            if idx[k] < per_axis.len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

impl fmt::Display for LocalExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.clauses.iter().enumerate() {
            let kw = if i == 0 { "if" } else { "elif" };
            writeln!(f, "{kw} {}:", c.guard)?;
            writeln!(f, "  {}", c.dist)?;
        }
        writeln!(f, "else:")?;
        write!(f, "  {}", self.default)
    }
}

impl fmt::Display for LdlIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LdlIssue::UnknownState => "UnknownState",
            LdlIssue::UnknownParent => "UnknownParent",
            LdlIssue::DuplicateState => "DuplicateState",
            LdlIssue::MultipleRemainders => "MultipleRemainders",
            LdlIssue::NegativeProbability => "NegativeProbability",
            LdlIssue::NegativeResidual => "NegativeResidual",
            LdlIssue::MassError => "MassError",
            LdlIssue::ZeroBound => "ZeroBound",
        })
    }
}
