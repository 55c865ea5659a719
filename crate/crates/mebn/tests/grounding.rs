mod common;

use std::collections::BTreeSet;

use mebn_core::ground::{
    build_ssbn, compile_cpt, export_dot, prune_ssbn, resolve_context, ContextResolution, GroundingLimits, NodeKey,
};
use mebn_core::logic::ThreeValued;
use mebn_core::model::{Binding, Evidence, Ident, RvInstance};
use mebn_core::{Error, Ssbn};

fn rv(name: &str, args: &[&str]) -> NodeKey {
    NodeKey::Rv(RvInstance::new(name, args).unwrap())
}

fn encounter() -> Ssbn {
    let v = common::validated();
    let ev = common::evidence("encounter.mev", v.theory());
    build_ssbn(&v, &ev, &[common::formula("DangerToSelf(!ST0, !T0)")], GroundingLimits::default()).unwrap()
}

fn parent_keys(s: &Ssbn, key: &NodeKey) -> BTreeSet<String> {
    let n = s.node(key).unwrap();
    n.parents.iter().map(|&p| s.nodes[p].key.to_string()).collect()
}

#[test]
fn danger_node_has_every_other_ship_as_parent() {
    let s = encounter();
    let got = parent_keys(&s, &rv("DangerToSelf", &["!ST0", "!T0"]));
    let mut want = BTreeSet::new();
    for i in 1..=4 {
        want.insert(format!("HarmPotential(!ST{i},!T0)"));
        want.insert(format!("OpSpec(!ST{i})"));
    }
    assert_eq!(got, want);
}

#[test]
fn uncertain_subject_becomes_a_parent_of_existence() {
    let s = encounter();
    let got = parent_keys(&s, &rv("Exists", &["!ST4"]));
    // Only !SR4 can refer to !ST4; the others are fixed elsewhere.
    assert_eq!(got, BTreeSet::from(["Subject(!SR4)".to_string()]));
    let pruned = prune_ssbn(&s);
    assert!(pruned.node(&rv("Subject", &["!SR4"])).is_some());
}

#[test]
fn no_bindings_gives_the_default_distribution() {
    let sc = common::scenarios().into_iter().find(|s| s.name == "no_other_ships").unwrap();
    let ssbn = sc.prepare().unwrap().ground().unwrap();
    let n = ssbn.node(&rv("DangerToSelf", &["!ST0", "!T0"])).unwrap();
    assert!(n.parents.is_empty());
    assert_eq!(n.cpt.probs, [0.0, 0.0, 0.0, 1.0]);
    assert!(n.provenance.as_ref().unwrap().bindings.is_empty());
}

#[test]
fn zone_recursion_is_a_chain() {
    let v = common::validated();
    let ev = common::evidence("zone.mev", v.theory());
    let s =
        prune_ssbn(&build_ssbn(&v, &ev, &[common::formula("ZoneMD(!Z0, !T3)")], GroundingLimits::default()).unwrap());
    let zones: Vec<&NodeKey> =
        s.nodes.iter().map(|n| &n.key).filter(|k| k.as_rv().is_some_and(|r| r.name == "ZoneMD")).collect();
    assert_eq!(zones.len(), 4);
    for t in 1..4 {
        let parents = parent_keys(&s, &rv("ZoneMD", &["!Z0", &format!("!T{t}")]));
        assert!(parents.contains(&format!("ZoneMD(!Z0,!T{})", t - 1)), "{parents:?}");
    }
    // The floor of the recursion has no ZoneMD parent.
    let first = [common::formula("ZoneMD(!Z0, !T0)")];
    let s0 = build_ssbn(&v, &Evidence::default(), &first, GroundingLimits::default()).unwrap();
    let floor = parent_keys(&s0, &rv("ZoneMD", &["!Z0", "!T0"]));
    assert!(floor.iter().all(|p| !p.starts_with("ZoneMD")), "{floor:?}");
}

#[test]
fn existence_rows_follow_the_references() {
    let v = common::validated();
    let s =
        build_ssbn(&v, &Evidence::default(), &[common::formula("Exists(!ST4)")], GroundingLimits::default()).unwrap();
    let n = s.node(&rv("Exists", &["!ST4"])).unwrap();
    let parents: Vec<String> = n.parents.iter().map(|&p| s.nodes[p].key.to_string()).collect();
    assert_eq!(parents, ["Subject(!SR1)", "Subject(!SR2)", "Subject(!SR3)", "Subject(!SR4)"]);
    let card = s.nodes[n.parents[0]].states.len();
    let st4 = s.nodes[n.parents[0]].state_index("!ST4").unwrap();
    let st0 = s.nodes[n.parents[0]].state_index("!ST0").unwrap();
    let row = |vals: [usize; 4]| vals.iter().fold(0, |acc, v| acc * card + v);
    assert_eq!(n.cpt.row(row([st0; 4])), [0.0, 1.0, 0.0]);
    for i in 0..4 {
        let mut vals = [st0; 4];
        vals[i] = st4;
        assert!((n.cpt.row(row(vals))[0] - 0.95).abs() < 1e-15);
    }
    assert!((n.cpt.row(row([st4; 4]))[0] - 0.95).abs() < 1e-15);
}

#[test]
fn binding_order_does_not_change_cpts() {
    let v = common::validated();
    let ev = common::evidence("encounter.mev", v.theory());
    let s = encounter();
    for (i, n) in s.nodes.iter().enumerate() {
        let Some(p) = &n.provenance else { continue };
        let k = p.bindings.len();
        let reversed: Vec<usize> = (0..k).rev().collect();
        assert_eq!(compile_cpt(&v, &ev, &s, i, &reversed).unwrap(), n.cpt, "{}", n.key);
    }
}

#[test]
fn provenance_is_sound() {
    let v = common::validated();
    let s = encounter();
    for n in &s.nodes {
        let Some(p) = &n.provenance else {
            assert!(n.key.as_rv().is_none(), "{} lacks provenance", n.key);
            continue;
        };
        let inst = n.key.as_rv().unwrap();
        let frag = v.theory().mfrags.iter().find(|m| m.name == p.mfrag).unwrap();
        let res = frag.resident.iter().find(|r| r.name == inst.name).unwrap();
        for b in &p.bindings {
            // Resident arguments agree with the node's own arguments.
            for (arg, id) in res.args.iter().zip(&inst.args) {
                if let mebn_core::model::Arg::Var(x) = arg {
                    assert_eq!(&b[x], id);
                }
            }
            for id in b.values() {
                assert!(v.registry().lookup(id).is_some(), "unregistered {id}");
            }
        }
    }
}

#[test]
fn dot_output_is_stable() {
    let a = export_dot(&prune_ssbn(&encounter()));
    let b = export_dot(&prune_ssbn(&encounter()));
    assert_eq!(a, b);
    assert!(a.starts_with("digraph"));
    assert!(a.contains("doubleoctagon"));
}

#[test]
fn context_terms_are_three_valued() {
    let v = common::validated();
    let ev = common::evidence("encounter.mev", v.theory());
    let ctx = common::formula("IsOwnStarship(s)");
    let at = |id: &str| {
        let mut b = Binding::new();
        b.insert("s".into(), Ident::new(id).unwrap());
        resolve_context(&ctx, &b, &v, &ev).unwrap()
    };
    assert_eq!(at("!ST0"), ContextResolution::Resolved(ThreeValued::True));
    assert_eq!(at("!ST1"), ContextResolution::Resolved(ThreeValued::False));
    assert_eq!(at("!Z0"), ContextResolution::Resolved(ThreeValued::Absurd));
    assert_eq!(at("!Z1"), ContextResolution::Resolved(ThreeValued::Absurd));
}

#[test]
fn unfixed_context_is_an_error() {
    let v = common::validated();
    let ev = Evidence::default();
    let mut b = Binding::new();
    b.insert("s".into(), Ident::new("!ST0").unwrap());
    assert!(resolve_context(&common::formula("IsOwnStarship(s)"), &b, &v, &ev).is_err());
}

#[test]
fn limits_are_enforced() {
    let v = common::validated();
    let ev = common::evidence("encounter.mev", v.theory());
    let target = [common::formula("DangerToSelf(!ST0, !T0)")];
    let small = GroundingLimits { max_nodes: 5, ..GroundingLimits::default() };
    assert!(matches!(build_ssbn(&v, &ev, &target, small), Err(Error::LimitExceeded { .. })));
    let shallow = GroundingLimits { max_depth: 1, ..GroundingLimits::default() };
    let zone = [common::formula("ZoneMD(!Z0, !T3)")];
    assert!(matches!(build_ssbn(&v, &Evidence::default(), &zone, shallow), Err(Error::LimitExceeded { .. })));
}

#[test]
fn unknown_identifiers_are_rejected() {
    let v = common::validated();
    let r = build_ssbn(&v, &Evidence::default(), &[common::formula("Exists(!ST9)")], GroundingLimits::default());
    let e = r.unwrap_err();
    assert!(e.to_string().contains("!ST9"), "{e}");
}
