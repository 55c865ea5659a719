//! Built-in logical MFrags: three-valued connectives, equality and
//! finite-domain quantifiers.
//!
//! Every table is Absurd-strict: an `Absurd` input yields `Absurd`, otherwise
//! the classical truth table applies.

use alloc::boxed::Box;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::model::{EntityRegistry, Formula, TypeName, ABSURD, FALSE, TRUE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ThreeValued {
    True,
    False,
    Absurd,
}

/// Truth value of a context term.
pub type ContextValue = ThreeValued;

impl ThreeValued {
    pub const ALL: [ThreeValued; 3] = [ThreeValued::True, ThreeValued::False, ThreeValued::Absurd];

    pub fn from_bool(b: bool) -> Self {
        if b {
            ThreeValued::True
        } else {
            ThreeValued::False
        }
    }

    pub fn from_state(s: &str) -> Option<Self> {
        match s {
            TRUE => Some(ThreeValued::True),
            FALSE => Some(ThreeValued::False),
            ABSURD => Some(ThreeValued::Absurd),
            _ => None,
        }
    }

    pub fn as_state(self) -> &'static str {
        match self {
            ThreeValued::True => TRUE,
            ThreeValued::False => FALSE,
            ThreeValued::Absurd => ABSURD,
        }
    }

    /// Index in the Boolean state space `[True, False, Absurd]`.
    pub fn index(self) -> usize {
        self as usize
    }

    fn classical(self) -> Option<bool> {
        match self {
            ThreeValued::True => Some(true),
            ThreeValued::False => Some(false),
            ThreeValued::Absurd => None,
        }
    }
}

impl fmt::Display for ThreeValued {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_state())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Connective {
    Not,
    And,
    Or,
    Implies,
    Iff,
}

impl Connective {
    pub fn arity(self) -> usize {
        match self {
            Connective::Not => 1,
            _ => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Connective::Not => "not",
            Connective::And => "and",
            Connective::Or => "or",
            Connective::Implies => "implies",
            Connective::Iff => "iff",
        }
    }

    /// Strict three-valued evaluation. `args.len()` must equal the arity.
    pub fn eval(self, args: &[ThreeValued]) -> ThreeValued {
        debug_assert_eq!(args.len(), self.arity());
        let mut vals = [false; 2];
        for (slot, a) in vals.iter_mut().zip(args) {
            match a.classical() {
                Some(b) => *slot = b,
                None => return ThreeValued::Absurd,
            }
        }
        let [a, b] = vals;
        ThreeValued::from_bool(match self {
            Connective::Not => !a,
            Connective::And => a && b,
            Connective::Or => a || b,
            Connective::Implies => !a || b,
            Connective::Iff => a == b,
        })
    }
}

/// Identifier/state equality: true iff both sides are the same non-Absurd value.
pub fn eval_equality(a: Option<&str>, b: Option<&str>) -> ThreeValued {
    match (a, b) {
        (Some(x), Some(y)) if x != ABSURD && y != ABSURD => ThreeValued::from_bool(x == y),
        _ => ThreeValued::Absurd,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BuiltinKind {
    Connective(Connective),
    Equality,
    Quantifier(QuantifierSpec),
}

/// A built-in MFrag: deterministic resident over its inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuiltinMFrag {
    pub name: String,
    pub inputs: Vec<String>,
    pub kind: BuiltinKind,
    /// Compiled connective tree for quantifiers.
    pub expansion: Option<Formula>,
}

impl BuiltinMFrag {
    /// Full truth table for connectives: every input row with its output.
    pub fn truth_table(&self) -> Vec<(Vec<ThreeValued>, ThreeValued)> {
        let BuiltinKind::Connective(c) = self.kind else {
            return Vec::new();
        };
        let mut rows = Vec::new();
        if c.arity() == 1 {
            for a in ThreeValued::ALL {
                rows.push((alloc::vec![a], c.eval(&[a])));
            }
        } else {
            for a in ThreeValued::ALL {
                for b in ThreeValued::ALL {
                    rows.push((alloc::vec![a, b], c.eval(&[a, b])));
                }
            }
        }
        rows
    }
}

pub fn connective_mfrag(kind: Connective) -> BuiltinMFrag {
    let inputs = (0..kind.arity()).map(|i| alloc::format!("a{i}")).collect();
    BuiltinMFrag { name: String::from(kind.name()), inputs, kind: BuiltinKind::Connective(kind), expansion: None }
}

pub fn equality_mfrag() -> BuiltinMFrag {
    BuiltinMFrag {
        name: String::from("eq"),
        inputs: alloc::vec![String::from("a"), String::from("b")],
        kind: BuiltinKind::Equality,
        expansion: None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantifier {
    ForAll,
    Exists,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantifierSpec {
    pub quantifier: Quantifier,
    pub var: String,
    pub ty: TypeName,
    pub body: Formula,
}

/// Compiles a quantifier over the registered domain of its type into a
/// left-folded `and`/`or` chain of body instances.
pub fn quantifier_mfrag(spec: &QuantifierSpec, registry: &EntityRegistry) -> Result<BuiltinMFrag> {
    let expansion = expand_quantifier(spec, registry)?;
    Ok(BuiltinMFrag {
        name: String::from(match spec.quantifier {
            Quantifier::ForAll => "forall",
            Quantifier::Exists => "exists",
        }),
        inputs: registry.ids_of(&spec.ty).iter().map(|i| String::from(i.as_str())).collect(),
        kind: BuiltinKind::Quantifier(spec.clone()),
        expansion: Some(expansion),
    })
}

pub fn expand_quantifier(spec: &QuantifierSpec, registry: &EntityRegistry) -> Result<Formula> {
    if !registry.has_type(&spec.ty) {
        return Err(Error::UnknownType(spec.ty.0.clone()));
    }
    let ids = registry.ids_of(&spec.ty);
    let mut parts = ids.iter().map(|id| substitute(&spec.body, &spec.var, id.as_str()));
    let first = parts.next().ok_or_else(|| Error::EmptyDomain(spec.ty.0.clone()))?;
    Ok(parts.fold(first, |acc, next| match spec.quantifier {
        Quantifier::ForAll => Formula::And(Box::new(acc), Box::new(next)),
        Quantifier::Exists => Formula::Or(Box::new(acc), Box::new(next)),
    }))
}

/// Replaces free occurrences of `var` with the identifier `id`.
pub fn substitute(f: &Formula, var: &str, id: &str) -> Formula {
    use crate::model::{Arg, Ident, Operand, RvTerm};
    fn arg(a: &Arg, var: &str, id: &str) -> Arg {
        match a {
            Arg::Var(v) if v == var => Arg::Ident(Ident::new(id).expect("registered identifier")),
            Arg::Term(t) => Arg::Term(Box::new(term(t, var, id))),
            other => other.clone(),
        }
    }
    fn term(t: &RvTerm, var: &str, id: &str) -> RvTerm {
        RvTerm { name: t.name.clone(), args: t.args.iter().map(|a| arg(a, var, id)).collect() }
    }
    fn operand(o: &Operand, var: &str, id: &str) -> Operand {
        match o {
            Operand::Var(v) if v == var => Operand::Ident(Ident::new(id).expect("registered identifier")),
            Operand::Term(t) => Operand::Term(term(t, var, id)),
            other => other.clone(),
        }
    }
    let b = |x: &Formula| Box::new(substitute(x, var, id));
    match f {
        Formula::Rv(t) => Formula::Rv(term(t, var, id)),
        Formula::Isa(ty, a) => Formula::Isa(ty.clone(), arg(a, var, id)),
        Formula::Eq(x, y) => Formula::Eq(operand(x, var, id), operand(y, var, id)),
        Formula::Not(x) => Formula::Not(b(x)),
        Formula::And(x, y) => Formula::And(b(x), b(y)),
        Formula::Or(x, y) => Formula::Or(b(x), b(y)),
        Formula::Implies(x, y) => Formula::Implies(b(x), b(y)),
        Formula::Iff(x, y) => Formula::Iff(b(x), b(y)),
        Formula::ForAll(v, t, body) if v != var => Formula::ForAll(v.clone(), t.clone(), b(body)),
        Formula::Exists(v, t, body) if v != var => Formula::Exists(v.clone(), t.clone(), b(body)),
        shadowed => shadowed.clone(),
    }
}

/// Value of an operand under a binding: an identifier (after the identity
/// RV), a state name, or `None` for Absurd.
fn operand_value(
    o: &crate::model::Operand,
    binding: &crate::model::Binding,
    theory: &crate::model::MTheory,
    registry: &EntityRegistry,
    lookup: &mut dyn FnMut(&crate::model::RvInstance) -> Result<String>,
) -> Result<Option<String>> {
    use crate::model::Operand;
    Ok(match o {
        Operand::Const(c) => Some(c.clone()),
        Operand::Ident(i) => registry.eval_identity(i).map(|i| String::from(i.as_str())),
        Operand::Var(v) => {
            let id =
                binding.get(v).ok_or_else(|| Error::UnboundParameter { rv: String::from("eq"), param: v.clone() })?;
            registry.eval_identity(id).map(|i| String::from(i.as_str()))
        }
        Operand::Term(t) => match ground_typed(t, binding, theory, registry)? {
            Some(inst) => {
                let v = lookup(&inst)?;
                (v != ABSURD).then_some(v)
            }
            None => None,
        },
    })
}

/// Grounds `term` and checks argument types; `None` when the instance is
/// Absurd (unregistered or mistyped identifier, or `Prev` before the first element).
pub fn ground_typed(
    term: &crate::model::RvTerm,
    binding: &crate::model::Binding,
    theory: &crate::model::MTheory,
    registry: &EntityRegistry,
) -> Result<Option<crate::model::RvInstance>> {
    let tpl = theory.template(&term.name).ok_or_else(|| Error::UnknownRv(term.name.clone()))?;
    if tpl.params.len() != term.args.len() {
        return Err(Error::ArityMismatch { rv: term.name.clone(), expected: tpl.params.len(), found: term.args.len() });
    }
    let Some(inst) = term.ground(binding, registry)? else {
        return Ok(None);
    };
    let well_typed = inst.args.iter().zip(&tpl.params).all(|(id, (_, ty))| registry.lookup(id) == Some(ty));
    Ok(well_typed.then_some(inst))
}

/// Evaluates a formula under `binding`. RV instances are read through
/// `lookup`; built-ins (`Isa`, equality, identity) come from the registry.
pub fn eval_formula(
    f: &Formula,
    binding: &crate::model::Binding,
    theory: &crate::model::MTheory,
    registry: &EntityRegistry,
    lookup: &mut dyn FnMut(&crate::model::RvInstance) -> Result<String>,
) -> Result<ThreeValued> {
    use crate::model::Arg;
    Ok(match f {
        Formula::Rv(t) => match ground_typed(t, binding, theory, registry)? {
            None => ThreeValued::Absurd,
            Some(inst) => {
                let v = lookup(&inst)?;
                ThreeValued::from_state(&v).ok_or_else(|| Error::NotBoolean(inst.to_string()))?
            }
        },
        Formula::Isa(ty, a) => {
            let id = match a {
                Arg::Ident(i) => Some(i.clone()),
                Arg::Var(v) => binding.get(v).cloned(),
                Arg::Prev(v) => binding.get(v).and_then(|i| registry.prev(i)),
                Arg::Term(_) => return Err(Error::UnresolvableContext(f.to_string())),
            };
            match id {
                Some(id) => registry.eval_isa(ty, &id)?,
                None => ThreeValued::Absurd,
            }
        }
        Formula::Eq(a, b) => {
            let x = operand_value(a, binding, theory, registry, lookup)?;
            let y = operand_value(b, binding, theory, registry, lookup)?;
            eval_equality(x.as_deref(), y.as_deref())
        }
        Formula::Not(x) => Connective::Not.eval(&[eval_formula(x, binding, theory, registry, lookup)?]),
        Formula::And(a, b) | Formula::Or(a, b) | Formula::Implies(a, b) | Formula::Iff(a, b) => {
            let c = match f {
                Formula::And(..) => Connective::And,
                Formula::Or(..) => Connective::Or,
                Formula::Implies(..) => Connective::Implies,
                _ => Connective::Iff,
            };
            let x = eval_formula(a, binding, theory, registry, lookup)?;
            let y = eval_formula(b, binding, theory, registry, lookup)?;
            c.eval(&[x, y])
        }
        Formula::ForAll(v, ty, body) | Formula::Exists(v, ty, body) => {
            let quantifier = if matches!(f, Formula::ForAll(..)) { Quantifier::ForAll } else { Quantifier::Exists };
            let spec = QuantifierSpec { quantifier, var: v.clone(), ty: ty.clone(), body: (**body).clone() };
            let expanded = expand_quantifier(&spec, registry)?;
            eval_formula(&expanded, binding, theory, registry, lookup)?
        }
    })
}

/// The built-in MFrags available to every theory.
pub fn builtin_mfrags() -> Vec<BuiltinMFrag> {
    let mut v: Vec<BuiltinMFrag> =
        [Connective::Not, Connective::And, Connective::Or, Connective::Implies, Connective::Iff]
            .into_iter()
            .map(connective_mfrag)
            .collect();
    v.push(equality_mfrag());
    v
}
