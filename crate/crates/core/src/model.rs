//! Entities, types, random-variable templates and instances, MFrags and MTheories.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::ldl::LocalExpr;
use crate::logic::ThreeValued;

/// The distinguished value present in every state space.
pub const ABSURD: &str = "Absurd";
pub const TRUE: &str = "True";
pub const FALSE: &str = "False";

/// A unique identifier: `!` followed by one or more of `A-Z0-9`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Ident(String);

impl Ident {
    pub fn new(text: &str) -> Result<Self> {
        if Self::is_valid(text) {
            Ok(Ident(text.to_string()))
        } else {
            Err(Error::InvalidIdentifier(text.to_string()))
        }
    }

    pub fn is_valid(text: &str) -> bool {
        let mut chars = text.chars();
        chars.next() == Some('!') && text.len() > 1 && chars.all(|c| c.is_ascii_uppercase() || c.is_ascii_digit())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Ident {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TypeName(pub String);

impl TypeName {
    pub fn new(name: &str) -> Self {
        TypeName(name.to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TypeName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A declared entity type. Ordered types support `Prev(v)` in MFrag terms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypeDecl {
    pub name: TypeName,
    pub ordered: bool,
}

/// Reserved identifiers for one type, as written in a theory's `entities` block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityDecl {
    pub ty: TypeName,
    pub ids: Vec<Ident>,
}

/// Maps every registered identifier to its (single) type.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EntityRegistry {
    types: BTreeMap<TypeName, bool>,
    entries: BTreeMap<Ident, TypeName>,
    by_type: BTreeMap<TypeName, Vec<Ident>>,
}

impl EntityRegistry {
    pub fn new<'a>(types: impl IntoIterator<Item = &'a TypeDecl>) -> Self {
        let mut reg = EntityRegistry::default();
        for t in types {
            reg.types.insert(t.name.clone(), t.ordered);
            reg.by_type.entry(t.name.clone()).or_default();
        }
        reg
    }

    pub fn register(&mut self, id: Ident, ty: &TypeName) -> Result<()> {
        if !self.types.contains_key(ty) {
            return Err(Error::UnknownType(ty.0.clone()));
        }
        if self.entries.contains_key(&id) {
            return Err(Error::DuplicateIdentifier(id.0));
        }
        let list = self.by_type.entry(ty.clone()).or_default();
        let pos = list.binary_search(&id).unwrap_or_else(|p| p);
        list.insert(pos, id.clone());
        self.entries.insert(id, ty.clone());
        Ok(())
    }

    pub fn lookup(&self, id: &Ident) -> Option<&TypeName> {
        self.entries.get(id)
    }

    pub fn has_type(&self, ty: &TypeName) -> bool {
        self.types.contains_key(ty)
    }

    pub fn is_ordered(&self, ty: &TypeName) -> bool {
        self.types.get(ty).copied().unwrap_or(false)
    }

    /// Registered identifiers of `ty` in lexicographic order.
    pub fn ids_of(&self, ty: &TypeName) -> &[Ident] {
        self.by_type.get(ty).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The identity random variable: `id` itself if registered, `None` (Absurd) otherwise.
    pub fn eval_identity(&self, id: &Ident) -> Option<Ident> {
        self.entries.contains_key(id).then(|| id.clone())
    }

    pub fn eval_isa(&self, ty: &TypeName, id: &Ident) -> Result<ThreeValued> {
        if !self.types.contains_key(ty) {
            return Err(Error::UnknownType(ty.0.clone()));
        }
        Ok(match self.entries.get(id) {
            None => ThreeValued::Absurd,
            Some(t) if t == ty => ThreeValued::True,
            Some(_) => ThreeValued::False,
        })
    }

    /// Predecessor of `id` within its ordered type; `None` at the first element.
    pub fn prev(&self, id: &Ident) -> Option<Ident> {
        let ty = self.entries.get(id)?;
        if !self.is_ordered(ty) {
            return None;
        }
        let list = self.ids_of(ty);
        let pos = list.iter().position(|x| x == id)?;
        pos.checked_sub(1).map(|p| list[p].clone())
    }
}

/// The possible values of a random variable, as declared.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValueRange {
    Boolean,
    Enumerated(Vec<String>),
    /// Identifier-valued: the registered identifiers of a type.
    Entities(TypeName),
}

/// Finite ordered state list. `Absurd` is implicit and always last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateSpace {
    values: Vec<String>,
}

impl StateSpace {
    pub fn new(values: Vec<String>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for v in &values {
            if v == ABSURD || !seen.insert(v.as_str()) {
                return Err(Error::UnknownState { rv: String::from("<state space>"), state: v.clone() });
            }
        }
        if values.is_empty() {
            return Err(Error::UnknownState { rv: String::from("<state space>"), state: String::new() });
        }
        Ok(StateSpace { values })
    }

    pub fn boolean() -> Self {
        StateSpace { values: alloc::vec![TRUE.to_string(), FALSE.to_string()] }
    }

    /// Declared values, without `Absurd`.
    pub fn declared(&self) -> &[String] {
        &self.values
    }

    /// All values including the trailing `Absurd`.
    pub fn all(&self) -> Vec<String> {
        let mut v = self.values.clone();
        v.push(ABSURD.to_string());
        v
    }

    pub fn len_with_absurd(&self) -> usize {
        self.values.len() + 1
    }

    /// Index into [`all`](Self::all).
    pub fn index_of(&self, value: &str) -> Option<usize> {
        if value == ABSURD {
            Some(self.values.len())
        } else {
            self.values.iter().position(|v| v == value)
        }
    }

    pub fn contains(&self, value: &str) -> bool {
        self.index_of(value).is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RvTemplate {
    pub name: String,
    pub params: Vec<(String, TypeName)>,
    pub range: ValueRange,
}

impl RvTemplate {
    pub fn states(&self, registry: &EntityRegistry) -> StateSpace {
        match &self.range {
            ValueRange::Boolean => StateSpace::boolean(),
            ValueRange::Enumerated(v) => StateSpace { values: v.clone() },
            ValueRange::Entities(ty) => {
                StateSpace { values: registry.ids_of(ty).iter().map(|i| i.0.clone()).collect() }
            }
        }
    }

    pub fn is_boolean(&self) -> bool {
        self.range == ValueRange::Boolean
    }
}

/// An argument position in an RV term.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Arg {
    Var(String),
    Ident(Ident),
    /// Predecessor of a variable over an ordered type.
    Prev(String),
    /// A nested RV term whose value is an identifier (function composition).
    Term(alloc::boxed::Box<RvTerm>),
}

impl fmt::Display for Arg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arg::Var(v) => f.write_str(v),
            Arg::Ident(i) => write!(f, "{i}"),
            Arg::Prev(v) => write!(f, "Prev({v})"),
            Arg::Term(t) => write!(f, "{t}"),
        }
    }
}

/// An RV template applied to arguments, e.g. `HarmPotential(st, t)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RvTerm {
    pub name: String,
    pub args: Vec<Arg>,
}

impl RvTerm {
    pub fn new(name: &str, args: Vec<Arg>) -> Self {
        RvTerm { name: name.to_string(), args }
    }

    pub fn vars(&self, out: &mut BTreeSet<String>) {
        for a in &self.args {
            match a {
                Arg::Var(v) | Arg::Prev(v) => {
                    out.insert(v.clone());
                }
                Arg::Term(t) => t.vars(out),
                Arg::Ident(_) => {}
            }
        }
    }

    /// Substitutes `binding`; `Ok(None)` when a `Prev` falls off the start of its chain.
    pub fn ground(&self, binding: &Binding, registry: &EntityRegistry) -> Result<Option<RvInstance>> {
        let mut args = Vec::with_capacity(self.args.len());
        for a in &self.args {
            match a {
                Arg::Ident(i) => args.push(i.clone()),
                Arg::Var(v) => args.push(
                    binding
                        .get(v)
                        .cloned()
                        .ok_or_else(|| Error::UnboundParameter { rv: self.name.clone(), param: v.clone() })?,
                ),
                Arg::Prev(v) => {
                    let id = binding
                        .get(v)
                        .ok_or_else(|| Error::UnboundParameter { rv: self.name.clone(), param: v.clone() })?;
                    match registry.prev(id) {
                        Some(p) => args.push(p),
                        None => return Ok(None),
                    }
                }
                Arg::Term(_) => return Err(Error::UnresolvableContext(self.to_string())),
            }
        }
        Ok(Some(RvInstance { name: self.name.clone(), args }))
    }
}

impl fmt::Display for RvTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.name)?;
        for (i, a) in self.args.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{a}")?;
        }
        f.write_str(")")
    }
}

/// One side of an equality.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Operand {
    Term(RvTerm),
    Var(String),
    Ident(Ident),
    /// A state name such as `Klingon` or `True`.
    Const(String),
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Term(t) => write!(f, "{t}"),
            Operand::Var(v) | Operand::Const(v) => f.write_str(v),
            Operand::Ident(i) => write!(f, "{i}"),
        }
    }
}

/// First-order formulas usable as context terms and as query targets.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Formula {
    /// A Boolean RV; as a context it requires the value `True`.
    Rv(RvTerm),
    Isa(TypeName, Arg),
    Eq(Operand, Operand),
    Not(alloc::boxed::Box<Formula>),
    And(alloc::boxed::Box<Formula>, alloc::boxed::Box<Formula>),
    Or(alloc::boxed::Box<Formula>, alloc::boxed::Box<Formula>),
    Implies(alloc::boxed::Box<Formula>, alloc::boxed::Box<Formula>),
    Iff(alloc::boxed::Box<Formula>, alloc::boxed::Box<Formula>),
    ForAll(String, TypeName, alloc::boxed::Box<Formula>),
    Exists(String, TypeName, alloc::boxed::Box<Formula>),
}

impl Formula {
    /// Free variables.
    pub fn vars(&self, out: &mut BTreeSet<String>) {
        match self {
            Formula::Rv(t) => t.vars(out),
            Formula::Isa(_, a) => {
                let mut s = BTreeSet::new();
                RvTerm { name: String::new(), args: alloc::vec![a.clone()] }.vars(&mut s);
                out.extend(s);
            }
            Formula::Eq(a, b) => {
                for o in [a, b] {
                    match o {
                        Operand::Term(t) => t.vars(out),
                        Operand::Var(v) => {
                            out.insert(v.clone());
                        }
                        _ => {}
                    }
                }
            }
            Formula::Not(x) => x.vars(out),
            Formula::And(a, b) | Formula::Or(a, b) | Formula::Implies(a, b) | Formula::Iff(a, b) => {
                a.vars(out);
                b.vars(out);
            }
            Formula::ForAll(v, _, body) | Formula::Exists(v, _, body) => {
                let mut inner = BTreeSet::new();
                body.vars(&mut inner);
                inner.remove(v);
                out.extend(inner);
            }
        }
    }

    /// All RV terms mentioned (including those inside equalities).
    pub fn rv_terms<'a>(&'a self, out: &mut Vec<&'a RvTerm>) {
        match self {
            Formula::Rv(t) => out.push(t),
            Formula::Isa(..) => {}
            Formula::Eq(a, b) => {
                for o in [a, b] {
                    if let Operand::Term(t) = o {
                        out.push(t);
                    }
                }
            }
            Formula::Not(x) | Formula::ForAll(_, _, x) | Formula::Exists(_, _, x) => x.rv_terms(out),
            Formula::And(a, b) | Formula::Or(a, b) | Formula::Implies(a, b) | Formula::Iff(a, b) => {
                a.rv_terms(out);
                b.rv_terms(out);
            }
        }
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Formula::Rv(t) => write!(f, "{t}"),
            Formula::Isa(t, a) => write!(f, "Isa({t}, {a})"),
            Formula::Eq(a, b) => write!(f, "eq({a}, {b})"),
            Formula::Not(x) => write!(f, "not({x})"),
            Formula::And(a, b) => write!(f, "and({a}, {b})"),
            Formula::Or(a, b) => write!(f, "or({a}, {b})"),
            Formula::Implies(a, b) => write!(f, "implies({a}, {b})"),
            Formula::Iff(a, b) => write!(f, "iff({a}, {b})"),
            Formula::ForAll(v, t, b) => write!(f, "forall({v}: {t}, {b})"),
            Formula::Exists(v, t, b) => write!(f, "exists({v}: {t}, {b})"),
        }
    }
}

/// Local distribution attached to one resident term.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalDef {
    pub resident: RvTerm,
    pub expr: LocalExpr,
}

/// A network fragment: context conditions, input and resident RV terms,
/// the fragment graph, and one local distribution per resident.
#[derive(Debug, Clone, PartialEq)]
pub struct MFrag {
    pub name: String,
    pub context: Vec<Formula>,
    pub input: Vec<RvTerm>,
    pub resident: Vec<RvTerm>,
    /// Arcs `parent -> child`, in declaration order.
    pub arcs: Vec<(RvTerm, RvTerm)>,
    /// Variable that strictly decreases (via `Prev`) along recursive inputs.
    pub recursion: Option<String>,
    pub locals: Vec<LocalDef>,
}

impl MFrag {
    /// Graph parents of `resident`, in arc declaration order.
    pub fn parents_of(&self, resident: &RvTerm) -> Vec<&RvTerm> {
        let mut out: Vec<&RvTerm> = Vec::new();
        for (p, c) in &self.arcs {
            if c == resident && !out.contains(&p) {
                out.push(p);
            }
        }
        out
    }

    pub fn local_for(&self, resident: &RvTerm) -> Option<&LocalExpr> {
        self.locals.iter().find(|l| &l.resident == resident).map(|l| &l.expr)
    }

    pub fn resident_named(&self, name: &str) -> Option<&RvTerm> {
        self.resident.iter().find(|r| r.name == name)
    }

    /// All variables occurring anywhere in the fragment.
    pub fn vars(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for c in &self.context {
            c.vars(&mut out);
        }
        for t in self.input.iter().chain(&self.resident) {
            t.vars(&mut out);
        }
        out
    }

    /// Infers the type of every variable from the parameter positions it
    /// occupies and from `Isa` contexts.
    pub fn variable_types(&self, theory: &MTheory) -> core::result::Result<BTreeMap<String, TypeName>, String> {
        let mut types: BTreeMap<String, TypeName> = BTreeMap::new();
        let mut assign = |v: &str, ty: &TypeName, types: &mut BTreeMap<String, TypeName>| match types.get(v) {
            Some(t) if t != ty => {
                Err(alloc::format!("variable `{v}` used as both {t} and {ty} in MFrag {}", self.name))
            }
            Some(_) => Ok(()),
            None => {
                types.insert(v.to_string(), ty.clone());
                Ok(())
            }
        };
        fn visit_term(
            term: &RvTerm,
            theory: &MTheory,
            types: &mut BTreeMap<String, TypeName>,
            assign: &mut dyn FnMut(
                &str,
                &TypeName,
                &mut BTreeMap<String, TypeName>,
            ) -> core::result::Result<(), String>,
        ) -> core::result::Result<(), String> {
            let tpl =
                theory.template(&term.name).ok_or_else(|| alloc::format!("unknown random variable `{}`", term.name))?;
            if tpl.params.len() != term.args.len() {
                return Err(alloc::format!(
                    "{} takes {} arguments, {} given",
                    term.name,
                    tpl.params.len(),
                    term.args.len()
                ));
            }
            for (a, (_, ty)) in term.args.iter().zip(&tpl.params) {
                match a {
                    Arg::Var(v) | Arg::Prev(v) => assign(v, ty, types)?,
                    Arg::Term(t) => visit_term(t, theory, types, assign)?,
                    Arg::Ident(_) => {}
                }
            }
            Ok(())
        }
        for t in self.input.iter().chain(&self.resident) {
            visit_term(t, theory, &mut types, &mut assign)?;
        }
        for c in &self.context {
            let mut terms = Vec::new();
            c.rv_terms(&mut terms);
            for t in terms {
                visit_term(t, theory, &mut types, &mut assign)?;
            }
            collect_isa(c, &mut |v, ty| assign(v, ty, &mut types))?;
        }
        for v in self.vars() {
            if !types.contains_key(&v) {
                return Err(alloc::format!("variable `{v}` in MFrag {} has no type", self.name));
            }
        }
        Ok(types)
    }
}

fn collect_isa(
    f: &Formula,
    cb: &mut dyn FnMut(&str, &TypeName) -> core::result::Result<(), String>,
) -> core::result::Result<(), String> {
    match f {
        Formula::Isa(ty, Arg::Var(v)) => cb(v, ty),
        Formula::Not(x) => collect_isa(x, cb),
        Formula::And(a, b) => {
            collect_isa(a, cb)?;
            collect_isa(b, cb)
        }
        _ => Ok(()),
    }
}

/// A named collection of types, entities, RV templates and MFrags.
#[derive(Debug, Clone, PartialEq)]
pub struct MTheory {
    pub name: String,
    pub types: Vec<TypeDecl>,
    pub entities: Vec<EntityDecl>,
    pub templates: Vec<RvTemplate>,
    pub mfrags: Vec<MFrag>,
}

impl MTheory {
    pub fn template(&self, name: &str) -> Option<&RvTemplate> {
        self.templates.iter().find(|t| t.name == name)
    }

    pub fn mfrag(&self, name: &str) -> Option<&MFrag> {
        self.mfrags.iter().find(|m| m.name == name)
    }

    pub fn registry(&self) -> Result<EntityRegistry> {
        let mut reg = EntityRegistry::new(&self.types);
        for decl in &self.entities {
            for id in &decl.ids {
                reg.register(id.clone(), &decl.ty)?;
            }
        }
        Ok(reg)
    }

    /// MFrags in which `name` is resident.
    pub fn homes_of(&self, name: &str) -> Vec<usize> {
        self.mfrags
            .iter()
            .enumerate()
            .filter(|(_, m)| m.resident.iter().any(|r| r.name == name))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Variable assignment used to instantiate MFrags.
pub type Binding = BTreeMap<String, Ident>;

/// An RV template with an identifier bound to every argument.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RvInstance {
    pub name: String,
    pub args: Vec<Ident>,
}

impl RvInstance {
    pub fn new(name: &str, args: &[&str]) -> Result<Self> {
        let args = args.iter().map(|a| Ident::new(a)).collect::<Result<Vec<_>>>()?;
        Ok(RvInstance { name: name.to_string(), args })
    }
}

impl fmt::Display for RvInstance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.name)?;
        for (i, a) in self.args.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{a}")?;
        }
        f.write_str(")")
    }
}

/// Binds every parameter of `template`; fails on missing bindings or arity.
pub fn instantiate_rv(template: &RvTemplate, bindings: &Binding) -> Result<RvInstance> {
    if bindings.keys().any(|k| !template.params.iter().any(|(p, _)| p == k)) {
        return Err(Error::ArityMismatch {
            rv: template.name.clone(),
            expected: template.params.len(),
            found: bindings.len(),
        });
    }
    let mut args = Vec::with_capacity(template.params.len());
    for (p, _) in &template.params {
        let id =
            bindings.get(p).ok_or_else(|| Error::UnboundParameter { rv: template.name.clone(), param: p.clone() })?;
        args.push(id.clone());
    }
    Ok(RvInstance { name: template.name.clone(), args })
}

/// Checks that `inst` names a declared template with the right arity and that
/// every argument is registered with the declared parameter type.
pub fn check_instance(theory: &MTheory, registry: &EntityRegistry, inst: &RvInstance) -> Result<()> {
    let tpl = theory.template(&inst.name).ok_or_else(|| Error::UnknownRv(inst.name.clone()))?;
    if tpl.params.len() != inst.args.len() {
        return Err(Error::ArityMismatch { rv: inst.name.clone(), expected: tpl.params.len(), found: inst.args.len() });
    }
    for (id, (p, ty)) in inst.args.iter().zip(&tpl.params) {
        match registry.lookup(id) {
            None => return Err(Error::UnknownIdentifier(id.0.clone())),
            Some(t) if t != ty => {
                return Err(Error::TypeViolation {
                    param: p.clone(),
                    expected: ty.0.clone(),
                    found: t.0.clone(),
                    id: id.0.clone(),
                })
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// An MFrag with some variables bound; the rest stay free for enumeration.
#[derive(Debug, Clone, PartialEq)]
pub struct MFragInstance<'a> {
    pub mfrag: &'a MFrag,
    pub binding: Binding,
    pub free: Vec<(String, TypeName)>,
}

impl MFragInstance<'_> {
    /// Instantiates a resident term under this instance's binding.
    pub fn resident_instance(&self, term: &RvTerm, registry: &EntityRegistry) -> Result<Option<RvInstance>> {
        term.ground(&self.binding, registry)
    }

    /// Every completion of the binding over the registered domains of the free variables.
    pub fn completions(&self, registry: &EntityRegistry) -> Vec<Binding> {
        let mut out = alloc::vec![self.binding.clone()];
        for (v, ty) in &self.free {
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
}

pub fn instantiate_mfrag<'a>(
    theory: &MTheory,
    registry: &EntityRegistry,
    mfrag: &'a MFrag,
    binding: &Binding,
) -> Result<MFragInstance<'a>> {
    let types = mfrag.variable_types(theory).map_err(Error::UnresolvableContext)?;
    for (v, id) in binding {
        let expected = types.get(v).ok_or_else(|| Error::ArityMismatch {
            rv: mfrag.name.clone(),
            expected: types.len(),
            found: binding.len(),
        })?;
        match registry.lookup(id) {
            None => return Err(Error::UnknownIdentifier(id.0.clone())),
            Some(t) if t != expected => {
                return Err(Error::TypeViolation {
                    param: v.clone(),
                    expected: expected.0.clone(),
                    found: t.0.clone(),
                    id: id.0.clone(),
                })
            }
            Some(_) => {}
        }
    }
    let free = types.into_iter().filter(|(v, _)| !binding.contains_key(v)).collect();
    Ok(MFragInstance { mfrag, binding: binding.clone(), free })
}

/// An asserted value for one RV instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Finding {
    pub subject: RvInstance,
    pub value: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} = {}", self.subject, self.value)
    }
}

/// Findings plus gating: explicit candidate lists for identifier-valued RVs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Evidence {
    pub findings: Vec<Finding>,
    pub candidates: BTreeMap<RvInstance, Vec<String>>,
}

impl Evidence {
    pub fn finding_for(&self, inst: &RvInstance) -> Option<&str> {
        self.findings.iter().find(|f| &f.subject == inst).map(|f| f.value.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn registry() -> EntityRegistry {
        EntityRegistry::new(&[
            TypeDecl { name: TypeName::new("Starship"), ordered: false },
            TypeDecl { name: TypeName::new("Zone"), ordered: false },
            TypeDecl { name: TypeName::new("TimeStep"), ordered: true },
        ])
    }

    fn id(s: &str) -> Ident {
        Ident::new(s).unwrap()
    }

    #[test]
    fn identifiers_must_start_with_bang() {
        assert!(Ident::new("!ST0").is_ok());
        assert!(Ident::new("ST0").is_err());
        assert!(Ident::new("!").is_err());
        assert!(Ident::new("!st0").is_err());
    }

    #[test]
    fn register_and_lookup() {
        let mut r = registry();
        r.register(id("!ST0"), &TypeName::new("Starship")).unwrap();
        assert_eq!(r.register(id("!ST0"), &TypeName::new("Zone")), Err(Error::DuplicateIdentifier("!ST0".into())));
        r.register(id("!Z1"), &TypeName::new("Zone")).unwrap();
        assert_eq!(r.lookup(&id("!Z1")), Some(&TypeName::new("Zone")));
        assert_eq!(r.register(id("!Q1"), &TypeName::new("Planet")), Err(Error::UnknownType("Planet".into())));
    }

    #[test]
    fn per_type_lists_stay_sorted() {
        let mut r = registry();
        for s in ["!ST3", "!ST1", "!ST2"] {
            r.register(id(s), &TypeName::new("Starship")).unwrap();
        }
        let got: Vec<_> = r.ids_of(&TypeName::new("Starship")).iter().map(Ident::as_str).collect();
        assert_eq!(got, ["!ST1", "!ST2", "!ST3"]);
    }

    #[test]
    fn identity_and_isa() {
        let mut r = registry();
        r.register(id("!ST0"), &TypeName::new("Starship")).unwrap();
        r.register(id("!ST4"), &TypeName::new("Starship")).unwrap();
        r.register(id("!Z0"), &TypeName::new("Zone")).unwrap();
        assert_eq!(r.eval_identity(&id("!ST0")), Some(id("!ST0")));
        assert_eq!(r.eval_identity(&id("!Z0")), Some(id("!Z0")));
        assert_eq!(r.eval_identity(&id("!XX9")), None);
        let ship = TypeName::new("Starship");
        assert_eq!(r.eval_isa(&ship, &id("!ST4")), Ok(ThreeValued::True));
        assert_eq!(r.eval_isa(&TypeName::new("Zone"), &id("!ST0")), Ok(ThreeValued::False));
        assert_eq!(r.eval_isa(&ship, &id("!QQ1")), Ok(ThreeValued::Absurd));
        assert!(r.eval_isa(&TypeName::new("Planet"), &id("!ST0")).is_err());
    }

    #[test]
    fn prev_follows_ordered_types_only() {
        let mut r = registry();
        for s in ["!T0", "!T1", "!T2"] {
            r.register(id(s), &TypeName::new("TimeStep")).unwrap();
        }
        r.register(id("!ST0"), &TypeName::new("Starship")).unwrap();
        assert_eq!(r.prev(&id("!T2")), Some(id("!T1")));
        assert_eq!(r.prev(&id("!T0")), None);
        assert_eq!(r.prev(&id("!ST0")), None);
    }

    #[test]
    fn instantiate_rv_binds_in_param_order() {
        let tpl = RvTemplate {
            name: "HarmPotential".into(),
            params: vec![("st".into(), TypeName::new("Starship")), ("t".into(), TypeName::new("TimeStep"))],
            range: ValueRange::Boolean,
        };
        let mut b = Binding::new();
        b.insert("t".into(), id("!T1"));
        b.insert("st".into(), id("!ST1"));
        let inst = instantiate_rv(&tpl, &b).unwrap();
        assert_eq!(inst.to_string(), "HarmPotential(!ST1,!T1)");
        b.remove("t");
        assert!(matches!(instantiate_rv(&tpl, &b), Err(Error::UnboundParameter { .. })));
    }

    #[test]
    fn state_space_appends_absurd() {
        let s = StateSpace::new(vec!["Low".into(), "High".into()]).unwrap();
        assert_eq!(s.all(), ["Low", "High", "Absurd"]);
        assert_eq!(s.index_of("Absurd"), Some(2));
        assert!(StateSpace::new(vec!["Absurd".into()]).is_err());
        assert!(StateSpace::new(vec!["A".into(), "A".into()]).is_err());
        assert!(StateSpace::new(vec![]).is_err());
    }
}
