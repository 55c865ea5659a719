use mebn_core::ldl::{
    check_ldl_wellformed, default_distribution, eval_local_distribution, Atom, Clause, Cmp, Dist, Guard,
    InfluenceCounts, LdlIssue, LocalExpr, Pattern, ProbTerm, Rational,
};
use mebn_core::model::{Arg, RvTerm, StateSpace};
use mebn_core::Error;
use proptest::prelude::*;

fn term(name: &str) -> RvTerm {
    RvTerm::new(name, vec![Arg::Var("x".into())])
}

fn pat(name: &str, v: &str) -> Pattern {
    Pattern { atoms: vec![Atom { term: term(name), value: v.into() }] }
}

fn r(s: &str) -> Rational {
    Rational::parse(s).unwrap()
}

fn states(v: &[&str]) -> StateSpace {
    StateSpace::new(v.iter().map(|s| s.to_string()).collect()).unwrap()
}

#[test]
fn rational_parse_and_display() {
    assert_eq!(r("0.25"), Rational::new(1, 4).unwrap());
    assert_eq!(r("-1.5").to_string(), "-1.5");
    assert_eq!(r("1/3").to_string(), "1/3");
    assert_eq!(r("2/4").to_string(), "0.5");
    assert_eq!(r("7").to_string(), "7");
    assert!(Rational::parse("1/0").is_none());
    assert!(Rational::parse("abc").is_none());
    assert!(Rational::parse(".").is_none());
}

#[test]
fn saturating_term_caps() {
    // min(0.98, 0.2 + 0.2 * sat(P, 4)) at count 3 is 0.8; at 4 and beyond it is 0.98.
    let p = pat("A", "True");
    let t = ProbTerm::Saturating { cap: r("0.98"), base: r("0.2"), slope: r("0.2"), pattern: p.clone(), bound: 4 };
    let expr = LocalExpr::constant(Dist::Table(vec![("High".into(), t), ("Low".into(), ProbTerm::Rest)]));
    let s = states(&["High", "Low"]);
    for (n, want) in [(0u64, 0.2), (3, 0.8), (4, 0.98), (50, 0.98)] {
        let pv = expr.eval_with(&s, &mut |_| n).unwrap();
        assert!((pv.get("High") - want).abs() < 1e-12, "count {n}");
        assert!((pv.get("Low") - (1.0 - want)).abs() < 1e-12);
    }
}

#[test]
fn default_distribution_is_zero_count_result() {
    let expr = LocalExpr {
        clauses: vec![Clause {
            guard: Guard::Count { pattern: Pattern::default(), cmp: Cmp::Ge, k: 1 },
            dist: Dist::Table(vec![("Low".into(), r("1").into_term())]),
        }],
        default: Dist::Table(vec![("Absurd".into(), r("1").into_term())]),
    };
    let s = states(&["Low", "High"]);
    let d = default_distribution(&expr, &s).unwrap();
    assert_eq!(d.states, ["Low", "High", "Absurd"]);
    assert_eq!(d.probs, [0.0, 0.0, 1.0]);
}

trait IntoTerm {
    fn into_term(self) -> ProbTerm;
}

impl IntoTerm for Rational {
    fn into_term(self) -> ProbTerm {
        ProbTerm::Const(self)
    }
}

#[test]
fn first_matching_clause_wins() {
    let expr = LocalExpr {
        clauses: vec![
            Clause {
                guard: Guard::Count { pattern: pat("A", "True"), cmp: Cmp::Ge, k: 2 },
                dist: Dist::Table(vec![("Y".into(), r("1").into_term())]),
            },
            Clause {
                guard: Guard::Count { pattern: pat("A", "True"), cmp: Cmp::Ge, k: 1 },
                dist: Dist::Table(vec![("Y".into(), r("0.5").into_term()), ("N".into(), ProbTerm::Rest)]),
            },
        ],
        default: Dist::Table(vec![("N".into(), r("1").into_term())]),
    };
    let s = states(&["Y", "N"]);
    let mut counts = InfluenceCounts::new(vec![term("A")]);
    assert_eq!(eval_local_distribution(&expr, &counts, &s).unwrap().get("N"), 1.0);
    counts.add(vec!["True".into()]);
    assert_eq!(eval_local_distribution(&expr, &counts, &s).unwrap().get("Y"), 0.5);
    counts.add(vec!["True".into()]);
    counts.add(vec!["False".into()]);
    assert_eq!(eval_local_distribution(&expr, &counts, &s).unwrap().get("Y"), 1.0);
}

#[test]
fn mass_errors() {
    let s = states(&["Y", "N"]);
    let over =
        LocalExpr::constant(Dist::Table(vec![("Y".into(), r("0.7").into_term()), ("N".into(), r("0.7").into_term())]));
    assert!(matches!(over.eval_with(&s, &mut |_| 0), Err(Error::MassError(_))));
    let neg = LocalExpr::constant(Dist::Table(vec![("Y".into(), r("1.2").into_term()), ("N".into(), ProbTerm::Rest)]));
    assert!(matches!(neg.eval_with(&s, &mut |_| 0), Err(Error::NegativeResidual(_))));
}

#[test]
fn checker_flags_problems() {
    let s = states(&["Y", "N"]);
    let parents = [(term("A"), StateSpace::boolean())];
    let bad_state = LocalExpr::constant(Dist::Table(vec![("Maybe".into(), r("1").into_term())]));
    assert!(check_ldl_wellformed(&bad_state, &s, &parents).iter().any(|d| d.issue == LdlIssue::UnknownState));
    let two_rest = LocalExpr::constant(Dist::Table(vec![("Y".into(), ProbTerm::Rest), ("N".into(), ProbTerm::Rest)]));
    assert!(check_ldl_wellformed(&two_rest, &s, &parents).iter().any(|d| d.issue == LdlIssue::MultipleRemainders));
    let unknown_parent = LocalExpr {
        clauses: vec![Clause {
            guard: Guard::Count { pattern: pat("B", "True"), cmp: Cmp::Ge, k: 1 },
            dist: Dist::Uniform,
        }],
        default: Dist::Uniform,
    };
    assert!(check_ldl_wellformed(&unknown_parent, &s, &parents).iter().any(|d| d.issue == LdlIssue::UnknownParent));
    // Grows past 1 once the count reaches 3.
    let grows = LocalExpr::constant(Dist::Table(vec![
        (
            "Y".into(),
            ProbTerm::Saturating { cap: r("2"), base: r("0.5"), slope: r("0.25"), pattern: pat("A", "True"), bound: 5 },
        ),
        ("N".into(), ProbTerm::Rest),
    ]));
    assert!(check_ldl_wellformed(&grows, &s, &parents).iter().any(|d| d.issue == LdlIssue::NegativeResidual));
    let fine = LocalExpr::constant(Dist::Table(vec![("Y".into(), r("0.3").into_term()), ("N".into(), ProbTerm::Rest)]));
    assert!(check_ldl_wellformed(&fine, &s, &parents).is_empty());
}

fn arb_pattern() -> impl Strategy<Value = Pattern> {
    prop_oneof![
        Just(Pattern::default()),
        (0..2usize, any::<bool>()).prop_map(|(p, v)| pat(["A", "B"][p], if v { "True" } else { "False" })),
    ]
}

fn arb_guard() -> impl Strategy<Value = Guard> {
    let leaf = (arb_pattern(), 0..6usize, 0..5u64).prop_map(|(pattern, c, k)| Guard::Count {
        pattern,
        cmp: [Cmp::Eq, Cmp::Ne, Cmp::Lt, Cmp::Le, Cmp::Gt, Cmp::Ge][c],
        k,
    });
    leaf.prop_recursive(3, 8, 2, |inner| {
        prop_oneof![
            inner.clone().prop_map(|g| Guard::Not(Box::new(g))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Guard::And(Box::new(a), Box::new(b))),
            (inner.clone(), inner).prop_map(|(a, b)| Guard::Or(Box::new(a), Box::new(b))),
        ]
    })
}

/// Distributions over {Y, N, M} whose constants never exceed total mass 1.
fn arb_dist() -> impl Strategy<Value = Dist> {
    prop_oneof![
        Just(Dist::Uniform),
        (0..=40i64, 0..=40i64, arb_pattern(), 0..6u64, 0..=10i64).prop_map(|(a, b, p, bound, slope)| {
            let y = Rational::new(a, 100).unwrap();
            let base = Rational::new(b, 100).unwrap();
            Dist::Table(vec![
                ("Y".into(), ProbTerm::Const(y)),
                (
                    "M".into(),
                    ProbTerm::Saturating {
                        cap: Rational::new(50, 100).unwrap(),
                        base,
                        slope: Rational::new(slope, 100).unwrap(),
                        pattern: p,
                        bound,
                    },
                ),
                ("N".into(), ProbTerm::Rest),
            ])
        }),
    ]
}

fn arb_expr() -> impl Strategy<Value = LocalExpr> {
    (prop::collection::vec((arb_guard(), arb_dist()), 0..4), arb_dist()).prop_map(|(cs, default)| LocalExpr {
        clauses: cs.into_iter().map(|(guard, dist)| Clause { guard, dist }).collect(),
        default,
    })
}

proptest! {
    #[test]
    fn rational_display_round_trips(n in -100_000i64..100_000, d in 1i64..2000) {
        let q = Rational::new(n, d).unwrap();
        prop_assert_eq!(Rational::parse(&q.to_string()), Some(q));
    }

    #[test]
    fn evaluated_distributions_are_normalised(expr in arb_expr(), counts in prop::collection::vec(0u64..20, 3)) {
        let s = states(&["Y", "N", "M"]);
        let pv = expr.eval_with(&s, &mut |p: &Pattern| counts[expr.patterns().iter().position(|q| *q == p).unwrap_or(0) % 3]).unwrap();
        let total: f64 = pv.probs.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(pv.probs.iter().all(|p| *p >= 0.0));
    }

    /// Counts at or beyond the saturation bound give the same distribution.
    #[test]
    fn local_finality(expr in arb_expr(), extra in prop::collection::vec(prop::sample::select(vec![0u64, 1, 10, 1000]), 8)) {
        let s = states(&["Y", "N", "M"]);
        let b = expr.saturation_bound();
        let pats = expr.patterns();
        let at_bound = expr.eval_with(&s, &mut |_| b).unwrap();
        let beyond = expr
            .eval_with(&s, &mut |p: &Pattern| b + extra[pats.iter().position(|q| *q == p).unwrap_or(0) % extra.len()])
            .unwrap();
        prop_assert_eq!(at_bound, beyond);
    }

    /// The distribution depends on the bindings only through their tallies.
    #[test]
    fn counts_ignore_binding_order(expr in arb_expr(), mut rows in prop::collection::vec((any::<bool>(), any::<bool>()), 0..8), seed in any::<u64>()) {
        let s = states(&["Y", "N", "M"]);
        let tally = |rows: &[(bool, bool)]| {
            let mut c = InfluenceCounts::new(vec![term("A"), term("B")]);
            for (a, b) in rows {
                c.add(vec![if *a { "True" } else { "False" }.into(), if *b { "True" } else { "False" }.into()]);
            }
            c
        };
        let first = eval_local_distribution(&expr, &tally(&rows), &s).unwrap();
        let n = rows.len().max(1);
        rows.rotate_left((seed as usize) % n);
        rows.reverse();
        let second = eval_local_distribution(&expr, &tally(&rows), &s).unwrap();
        prop_assert_eq!(first, second);
    }
}
