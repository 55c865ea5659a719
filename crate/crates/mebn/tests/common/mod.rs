//! Shared helpers for the integration tests: corpus access and random
//! theory generators.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use mebn::format::{parse_evidence, parse_formula, parse_mtheory, SourceText};
use mebn::scenario::{discover, Scenario};
use mebn_core::ldl::{Atom, Clause, Cmp, Dist, Guard, LocalExpr, Pattern, ProbTerm, Rational};
use mebn_core::model::{
    Arg, EntityDecl, Evidence, Formula, Ident, LocalDef, MFrag, MTheory, Operand, RvTemplate, RvTerm, TypeDecl,
    TypeName, ValueRange,
};
use mebn_core::validate::validate_theory;
use mebn_core::ValidatedMTheory;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn corpus_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("corpus")
}

pub fn theory_text() -> String {
    std::fs::read_to_string(corpus_dir().join("startrek.mtheory")).unwrap()
}

pub fn theory() -> MTheory {
    parse_mtheory(&SourceText::new("startrek.mtheory", theory_text())).unwrap()
}

pub fn validated() -> ValidatedMTheory {
    validate_theory(&theory()).unwrap()
}

pub fn evidence(name: &str, t: &MTheory) -> Evidence {
    let path = corpus_dir().join("evidence").join(name);
    let text = std::fs::read_to_string(&path).unwrap();
    parse_evidence(&SourceText::new(name, text), t).unwrap()
}

pub fn evidence_text(text: &str, t: &MTheory) -> Evidence {
    parse_evidence(&SourceText::new("<test>", text), t).unwrap()
}

pub fn formula(text: &str) -> Formula {
    parse_formula(text).unwrap()
}

pub fn scenarios() -> Vec<Scenario> {
    discover(&corpus_dir().join("scenarios")).unwrap()
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, xs: &'a [T]) -> &'a T {
    xs.choose(rng).expect("non-empty")
}

const VARS: [&str; 5] = ["x", "y", "z", "t", "st"];

fn rational(rng: &mut ChaCha8Rng) -> Rational {
    match rng.gen_range(0..3) {
        0 => Rational::new(rng.gen_range(-20..=100), 100).unwrap(),
        1 => Rational::new(rng.gen_range(0..=5), rng.gen_range(1..=7)).unwrap(),
        _ => Rational::integer(rng.gen_range(0..=2)),
    }
}

struct Shape {
    types: Vec<TypeName>,
    ids: Vec<Ident>,
    templates: Vec<RvTemplate>,
}

fn arg(rng: &mut ChaCha8Rng, s: &Shape, depth: u32) -> Arg {
    match rng.gen_range(0..if depth > 0 { 4 } else { 3 }) {
        0 => Arg::Var(pick(rng, &VARS).to_string()),
        1 => Arg::Ident(pick(rng, &s.ids).clone()),
        2 => Arg::Prev(pick(rng, &VARS).to_string()),
        _ => Arg::Term(Box::new(term(rng, s, depth - 1))),
    }
}

fn term(rng: &mut ChaCha8Rng, s: &Shape, depth: u32) -> RvTerm {
    let tpl = pick(rng, &s.templates);
    RvTerm { name: tpl.name.clone(), args: (0..tpl.params.len()).map(|_| arg(rng, s, depth)).collect() }
}

fn operand(rng: &mut ChaCha8Rng, s: &Shape) -> Operand {
    match rng.gen_range(0..4) {
        0 => Operand::Term(term(rng, s, 1)),
        1 => Operand::Var(pick(rng, &VARS).to_string()),
        2 => Operand::Ident(pick(rng, &s.ids).clone()),
        _ => Operand::Const(format!("S{}", rng.gen_range(0..3))),
    }
}

fn formula_gen(rng: &mut ChaCha8Rng, s: &Shape, depth: u32) -> Formula {
    let leaf = depth == 0 || rng.gen_bool(0.4);
    if leaf {
        return match rng.gen_range(0..3) {
            0 => Formula::Rv(term(rng, s, 1)),
            1 => Formula::Isa(pick(rng, &s.types).clone(), arg(rng, s, 0)),
            _ => Formula::Eq(operand(rng, s), operand(rng, s)),
        };
    }
    let sub = |rng: &mut ChaCha8Rng| Box::new(formula_gen(rng, s, depth - 1));
    match rng.gen_range(0..7) {
        0 => Formula::Not(sub(rng)),
        1 => Formula::And(sub(rng), sub(rng)),
        2 => Formula::Or(sub(rng), sub(rng)),
        3 => Formula::Implies(sub(rng), sub(rng)),
        4 => Formula::Iff(sub(rng), sub(rng)),
        5 => {
            let v = pick(rng, &VARS).to_string();
            Formula::ForAll(v, pick(rng, &s.types).clone(), sub(rng))
        }
        _ => {
            let v = pick(rng, &VARS).to_string();
            Formula::Exists(v, pick(rng, &s.types).clone(), sub(rng))
        }
    }
}

fn pattern(rng: &mut ChaCha8Rng, s: &Shape) -> Pattern {
    let n = rng.gen_range(0..3);
    Pattern {
        atoms: (0..n)
            .map(|_| Atom { term: term(rng, s, 0), value: pick(rng, &["True", "S1", "Absurd", "!E00"]).to_string() })
            .collect(),
    }
}

fn guard(rng: &mut ChaCha8Rng, s: &Shape, depth: u32) -> Guard {
    if depth == 0 || rng.gen_bool(0.5) {
        let cmp = *pick(rng, &[Cmp::Eq, Cmp::Ne, Cmp::Lt, Cmp::Le, Cmp::Gt, Cmp::Ge]);
        return Guard::Count { pattern: pattern(rng, s), cmp, k: rng.gen_range(0..5) };
    }
    match rng.gen_range(0..3) {
        0 => Guard::Not(Box::new(guard(rng, s, depth - 1))),
        1 => Guard::And(Box::new(guard(rng, s, depth - 1)), Box::new(guard(rng, s, depth - 1))),
        _ => Guard::Or(Box::new(guard(rng, s, depth - 1)), Box::new(guard(rng, s, depth - 1))),
    }
}

fn dist(rng: &mut ChaCha8Rng, s: &Shape) -> Dist {
    if rng.gen_bool(0.2) {
        return Dist::Uniform;
    }
    let n = rng.gen_range(1..4);
    Dist::Table(
        (0..n)
            .map(|i| {
                let t = match rng.gen_range(0..3) {
                    0 => ProbTerm::Const(rational(rng)),
                    1 => ProbTerm::Saturating {
                        cap: rational(rng),
                        base: rational(rng),
                        slope: rational(rng),
                        pattern: pattern(rng, s),
                        bound: rng.gen_range(0..6),
                    },
                    _ => ProbTerm::Rest,
                };
                (format!("S{i}"), t)
            })
            .collect(),
    )
}

/// Structurally random theory: every syntactic construct can appear, but
/// the result need not validate. Used for parse/serialize round trips.
pub fn random_theory(seed: u64) -> MTheory {
    let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed);
    let rng = &mut rng;
    let n_types = rng.gen_range(1..4);
    let types: Vec<TypeDecl> =
        (0..n_types).map(|i| TypeDecl { name: TypeName::new(&format!("Ty{i}")), ordered: rng.gen_bool(0.3) }).collect();
    let mut entities = Vec::new();
    let mut ids = Vec::new();
    for (ti, t) in types.iter().enumerate() {
        let n = rng.gen_range(0..4);
        let decl: Vec<Ident> = (0..n).map(|i| Ident::new(&format!("!E{ti}{i}")).unwrap()).collect();
        ids.extend(decl.clone());
        if n > 0 || rng.gen_bool(0.5) {
            entities.push(EntityDecl { ty: t.name.clone(), ids: decl });
        }
    }
    if ids.is_empty() {
        ids.push(Ident::new("!E00").unwrap());
    }
    let type_names: Vec<TypeName> = types.iter().map(|t| t.name.clone()).collect();
    let n_rv = rng.gen_range(1..5);
    let templates: Vec<RvTemplate> = (0..n_rv)
        .map(|i| {
            let np = rng.gen_range(0..3);
            let params = (0..np).map(|j| (VARS[j].to_string(), pick(rng, &type_names).clone())).collect();
            let range = match rng.gen_range(0..3) {
                0 => ValueRange::Boolean,
                1 => ValueRange::Enumerated((0..rng.gen_range(1..4)).map(|k| format!("S{k}")).collect()),
                _ => ValueRange::Entities(pick(rng, &type_names).clone()),
            };
            RvTemplate { name: format!("Rv{i}"), params, range }
        })
        .collect();
    let shape = Shape { types: type_names, ids, templates: templates.clone() };
    let n_frag = rng.gen_range(0..4);
    let mfrags = (0..n_frag)
        .map(|i| {
            let context = (0..rng.gen_range(0..3)).map(|_| formula_gen(rng, &shape, 2)).collect();
            let input: Vec<RvTerm> = (0..rng.gen_range(0..3)).map(|_| term(rng, &shape, 1)).collect();
            let resident: Vec<RvTerm> = (0..rng.gen_range(0..3)).map(|_| term(rng, &shape, 0)).collect();
            let nodes: Vec<RvTerm> = input.iter().chain(&resident).cloned().collect();
            let arcs = if nodes.is_empty() {
                Vec::new()
            } else {
                (0..rng.gen_range(0..3)).map(|_| (pick(rng, &nodes).clone(), pick(rng, &nodes).clone())).collect()
            };
            let mut locals = Vec::new();
            for r in &resident {
                if !rng.gen_bool(0.7) {
                    continue;
                }
                let clauses = (0..rng.gen_range(0..3))
                    .map(|_| Clause { guard: guard(rng, &shape, 2), dist: dist(rng, &shape) })
                    .collect();
                let expr = LocalExpr { clauses, default: dist(rng, &shape) };
                locals.push(LocalDef { resident: r.clone(), expr });
            }
            MFrag {
                name: format!("Frag{i}"),
                context,
                input,
                resident,
                arcs,
                recursion: rng.gen_bool(0.2).then(|| pick(rng, &VARS).to_string()),
                locals,
            }
        })
        .collect();
    MTheory { name: format!("Gen{seed}"), types, entities, templates, mfrags }
}

/// A small valid theory over one type with Boolean RVs P, Q (child of P)
/// and W (child of P on *other* entities; Absurd when there are none),
/// plus a random evidence file over Q. Returns (theory text, evidence text,
/// entity ids).
pub fn random_logic_theory(seed: u64) -> (String, String, Vec<String>) {
    let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed);
    let n = rng.gen_range(1..4);
    let ids: Vec<String> = (0..n).map(|i| format!("!A{i}")).collect();
    let p = |rng: &mut ChaCha8Rng| format!("{:.2}", rng.gen_range(0.05..0.95));
    let (p0, q1, q0, w1, w0) = (p(&mut rng), p(&mut rng), p(&mut rng), p(&mut rng), p(&mut rng));
    let text = format!(
        "theory Logic{seed}
types
  T
end
entities
  T: {}
end
rv P(x: T): Bool
rv Q(x: T): Bool
rv W(x: T): Bool
mfrag Base
  context:
    Isa(T, x)
  resident:
    P(x)
  local P(x):
    else:
      True = {p0}; False = *
end
mfrag Child
  context:
    Isa(T, x)
  input:
    P(x)
  resident:
    Q(x)
  graph:
    P(x) -> Q(x)
  local Q(x):
    if count(P(x) = True) >= 1:
      True = {q1}; False = *
    else:
      True = {q0}; False = *
end
mfrag Others
  context:
    Isa(T, x)
    Isa(T, y)
    y != x
  input:
    P(y)
  resident:
    W(x)
  graph:
    P(y) -> W(x)
  local W(x):
    if count(P(y) = True) >= 1:
      True = {w1}; False = *
    elif count(*) >= 1:
      True = {w0}; False = *
    else:
      Absurd = 1
end
",
        ids.join(" ")
    );
    let mut ev = String::new();
    for id in &ids {
        if rng.gen_bool(0.3) {
            let _ = std::fmt::Write::write_fmt(
                &mut ev,
                format_args!("Q({id}) = {}\n", if rng.gen_bool(0.5) { "True" } else { "False" }),
            );
        }
    }
    (text, ev, ids)
}
