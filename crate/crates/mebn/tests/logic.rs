mod common;

use mebn::format::{parse_evidence, parse_mtheory, SourceText};
use mebn_core::ground::{build_ssbn, prune_ssbn, GroundingLimits};
use mebn_core::infer::{brute_force_posterior, eliminate};
use mebn_core::model::Evidence;
use mebn_core::validate::validate_theory;
use mebn_core::{Error, ValidatedMTheory};

fn load(seed: u64) -> (ValidatedMTheory, Evidence, Vec<String>) {
    let (text, ev, ids) = common::random_logic_theory(seed);
    let t = parse_mtheory(&SourceText::new("logic", text)).unwrap();
    let ev = parse_evidence(&SourceText::new("ev", ev), &t).unwrap();
    (validate_theory(&t).unwrap(), ev, ids)
}

/// Posterior of a formula target as (True, False, Absurd), cross-checked
/// against enumeration.
fn posterior(v: &ValidatedMTheory, ev: &Evidence, target: &str) -> [f64; 3] {
    let ssbn = prune_ssbn(&build_ssbn(v, ev, &[common::formula(target)], GroundingLimits::default()).unwrap());
    let ve = eliminate(&ssbn).unwrap();
    let bf = brute_force_posterior(&ssbn).unwrap();
    let p = &ve.marginals[0].1;
    assert_eq!(p.states, ["True", "False", "Absurd"]);
    for (a, b) in p.probs.iter().zip(&bf.marginals[0].1.probs) {
        assert!((a - b).abs() < 1e-9, "{target}: {a} vs {b}");
    }
    [p.probs[0], p.probs[1], p.probs[2]]
}

fn close(a: [f64; 3], b: [f64; 3]) -> bool {
    a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-9)
}

fn chain(op: &str, parts: &[String]) -> String {
    parts.iter().skip(1).fold(parts[0].clone(), |acc, p| format!("{op}({acc}, {p})"))
}

#[test]
fn de_morgan_and_quantifier_duals_hold() {
    for seed in 0..50 {
        let (v, ev, ids) = load(seed);
        let atoms: Vec<String> =
            ids.iter().flat_map(|i| [format!("P({i})"), format!("Q({i})"), format!("W({i})")]).collect();
        let a = &atoms[(seed as usize) % atoms.len()];
        let b = &atoms[(seed as usize * 7 + 1) % atoms.len()];
        let pairs = [
            (format!("not(and({a}, {b}))"), format!("or(not({a}), not({b}))")),
            (format!("not(or({a}, {b}))"), format!("and(not({a}), not({b}))")),
            (format!("implies({a}, {b})"), format!("or(not({a}), {b})")),
            ("not(forall(x: T, P(x)))".to_string(), "exists(x: T, not(P(x)))".to_string()),
            ("not(exists(x: T, Q(x)))".to_string(), "forall(x: T, not(Q(x)))".to_string()),
            (
                "forall(x: T, W(x))".to_string(),
                chain("and", &ids.iter().map(|i| format!("W({i})")).collect::<Vec<_>>()),
            ),
            ("exists(x: T, P(x))".to_string(), chain("or", &ids.iter().map(|i| format!("P({i})")).collect::<Vec<_>>())),
        ];
        for (lhs, rhs) in pairs {
            let (l, r) = (posterior(&v, &ev, &lhs), posterior(&v, &ev, &rhs));
            assert!(close(l, r), "seed {seed}: {lhs} = {l:?} but {rhs} = {r:?}");
        }
    }
}

#[test]
fn absurd_operands_make_connectives_absurd() {
    // With a single entity, W has no other entity to depend on and is Absurd.
    let seed = (0..).find(|s| common::random_logic_theory(*s).2.len() == 1).unwrap();
    let (v, ev, _) = load(seed);
    assert_eq!(posterior(&v, &ev, "W(!A0)"), [0.0, 0.0, 1.0]);
    for f in ["not(W(!A0))", "and(P(!A0), W(!A0))", "or(P(!A0), W(!A0))", "iff(W(!A0), P(!A0))"] {
        assert_eq!(posterior(&v, &ev, f), [0.0, 0.0, 1.0], "{f}");
    }
    assert!((posterior(&v, &ev, "or(P(!A0), not(P(!A0)))")[0] - 1.0).abs() < 1e-12);
}

#[test]
fn non_boolean_operands_are_rejected() {
    let v = common::validated();
    let f = common::formula("and(OpSpec(!ST1), Exists(!ST1))");
    let r = build_ssbn(&v, &Evidence::default(), &[f], GroundingLimits::default());
    assert!(matches!(r, Err(Error::NotBoolean(_))), "{r:?}");
}

#[test]
fn quantifiers_over_the_corpus() {
    let v = common::validated();
    let ev = common::evidence("klingon.mev", v.theory());
    let p = posterior(&v, &ev, "exists(s: Starship, OpSpec(s) = Klingon)");
    assert!((p[0] - 1.0).abs() < 1e-12);
    let q = posterior(&v, &ev, "forall(s: Starship, not(OpSpec(s) = Klingon))");
    assert!(q[1] > 1.0 - 1e-12);
}

#[test]
fn repeated_operands_share_one_parent() {
    let (v, ev, _) = load(3);
    let p = posterior(&v, &ev, "P(!A0)");
    assert!(close(posterior(&v, &ev, "and(P(!A0), P(!A0))"), p));
    assert!(close(posterior(&v, &ev, "or(P(!A0), P(!A0))"), p));
    assert_eq!(posterior(&v, &ev, "iff(P(!A0), P(!A0))"), [1.0, 0.0, 0.0]);
    assert_eq!(posterior(&v, &ev, "P(!A0) = P(!A0)"), [1.0, 0.0, 0.0]);
}
