//! Corpus scenarios: a theory, optional entity override, evidence, targets
//! and a golden posterior file, described by one TOML file each.

use std::path::{Path, PathBuf};

use mebn_core::ground::{build_ssbn, prune_ssbn, GroundingLimits, Ssbn};
use mebn_core::infer::{brute_force_posterior, eliminate};
use mebn_core::model::{Evidence, Formula, MTheory};
use mebn_core::{Posterior, ValidatedMTheory};
use serde::Deserialize;

use crate::app::{load_evidence, load_theory, read_text, validated, AppError};
use crate::format::{parse_entities, parse_formula, SourceText};
use crate::json::{target_posteriors, Golden};

/// Agreement required between a run and its golden file.
pub const GOLDEN_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: String,
    theory: String,
    evidence: Option<String>,
    targets: Vec<String>,
    golden: Option<String>,
    /// Replacement `entities ... end` block.
    entities: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub path: PathBuf,
    pub theory_path: PathBuf,
    pub evidence_path: Option<PathBuf>,
    pub golden_path: Option<PathBuf>,
    pub target_text: Vec<String>,
    pub entities: Option<String>,
}

/// A scenario with its files parsed and its theory validated.
pub struct Loaded {
    pub theory: MTheory,
    pub validated: ValidatedMTheory,
    pub evidence: Evidence,
    pub targets: Vec<Formula>,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Scenario, AppError> {
        let text = read_text(path)?;
        let f: ScenarioFile = toml::from_str(&text.content)
            .map_err(|e| AppError::Scenario { path: path.display().to_string(), message: e.to_string() })?;
        if f.targets.is_empty() {
            return Err(AppError::Scenario { path: path.display().to_string(), message: String::from("no targets") });
        }
        let dir = path.parent().unwrap_or(Path::new("."));
        Ok(Scenario {
            name: f.name,
            path: path.to_path_buf(),
            theory_path: dir.join(f.theory),
            evidence_path: f.evidence.map(|e| dir.join(e)),
            golden_path: f.golden.map(|g| dir.join(g)),
            target_text: f.targets,
            entities: f.entities,
        })
    }

    pub fn prepare(&self) -> Result<Loaded, AppError> {
        let mut theory = load_theory(&self.theory_path)?;
        if let Some(block) = &self.entities {
            theory.entities = parse_entities(&SourceText::new(self.path.display().to_string(), block.clone()))?;
        }
        let v = validated(&theory)?;
        let evidence = load_evidence(self.evidence_path.as_deref(), &theory)?;
        let targets =
            self.target_text.iter().map(|t| parse_formula(t).map_err(AppError::from)).collect::<Result<_, _>>()?;
        Ok(Loaded { theory, validated: v, evidence, targets })
    }
}

impl Loaded {
    /// Unpruned SSBN with default limits.
    pub fn ground(&self) -> Result<Ssbn, AppError> {
        Ok(build_ssbn(&self.validated, &self.evidence, &self.targets, GroundingLimits::default())?)
    }
}

/// All `*.toml` scenarios in `dir`, sorted by file name.
pub fn discover(dir: &Path) -> Result<Vec<Scenario>, AppError> {
    let rd = std::fs::read_dir(dir).map_err(|source| AppError::Io { path: dir.to_path_buf(), source })?;
    let mut paths: Vec<PathBuf> =
        rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == "toml")).collect();
    paths.sort();
    paths.iter().map(|p| Scenario::load(p)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Status {
    Pass,
    Regenerated,
    Fail(String),
}

#[derive(Debug, Clone)]
pub struct Report {
    pub name: String,
    pub status: Status,
    /// Largest |elimination - enumeration| over all target states.
    pub oracle_gap: Option<f64>,
    pub golden_gap: Option<f64>,
    pub ssbn_nodes: usize,
}

fn max_gap(a: &Posterior, b: &Posterior) -> f64 {
    let mut gap: f64 = 0.0;
    for ((ka, va), (kb, vb)) in a.marginals.iter().zip(&b.marginals) {
        if ka != kb || va.states != vb.states {
            return f64::INFINITY;
        }
        for (x, y) in va.probs.iter().zip(&vb.probs) {
            gap = gap.max((x - y).abs());
        }
    }
    gap
}

fn golden_gap(g: &Golden, p: &Posterior) -> f64 {
    let got = target_posteriors(p);
    if got.len() != g.posteriors.len() {
        return f64::INFINITY;
    }
    let mut gap = (g.evidence_probability - p.evidence_probability).abs();
    for (a, b) in got.iter().zip(&g.posteriors) {
        if a.target != b.target || a.states != b.states || a.probs.len() != b.probs.len() {
            return f64::INFINITY;
        }
        for (x, y) in a.probs.iter().zip(&b.probs) {
            gap = gap.max((x - y).abs());
        }
    }
    gap
}

pub fn golden_for(name: &str, p: &Posterior) -> Golden {
    Golden {
        scenario: name.to_string(),
        evidence_probability: p.evidence_probability,
        posteriors: target_posteriors(p),
    }
}

/// Runs one scenario: elimination on the pruned network, enumeration as a
/// cross-check, and comparison with (or regeneration of) the golden file.
pub fn run(s: &Scenario, regen: bool) -> Report {
    let mut report =
        Report { name: s.name.clone(), status: Status::Pass, oracle_gap: None, golden_gap: None, ssbn_nodes: 0 };
    let fail = |mut r: Report, m: String| {
        r.status = Status::Fail(m);
        r
    };
    let loaded = match s.prepare() {
        Ok(l) => l,
        Err(e) => return fail(report, e.to_string()),
    };
    let ssbn = match loaded.ground() {
        Ok(x) => prune_ssbn(&x),
        Err(e) => return fail(report, e.to_string()),
    };
    report.ssbn_nodes = ssbn.len();
    let ve = match eliminate(&ssbn) {
        Ok(p) => p,
        Err(e) => return fail(report, e.to_string()),
    };
    let oracle = match brute_force_posterior(&ssbn) {
        Ok(p) => p,
        Err(e) => return fail(report, format!("oracle: {e}")),
    };
    let gap = max_gap(&ve, &oracle);
    report.oracle_gap = Some(gap);
    if gap.is_nan() || gap > GOLDEN_TOLERANCE {
        return fail(report, format!("elimination and enumeration differ by {gap:e}"));
    }
    let Some(gpath) = &s.golden_path else { return report };
    if regen {
        let text = serde_json::to_string_pretty(&golden_for(&s.name, &oracle)).expect("serializable") + "\n";
        if let Err(e) = std::fs::write(gpath, text) {
            return fail(report, format!("{}: {e}", gpath.display()));
        }
        report.status = Status::Regenerated;
        return report;
    }
    let golden: Golden = match std::fs::read_to_string(gpath)
        .map_err(|e| e.to_string())
        .and_then(|t| serde_json::from_str(&t).map_err(|e| e.to_string()))
    {
        Ok(g) => g,
        Err(e) => return fail(report, format!("{}: {e}", gpath.display())),
    };
    let g = golden_gap(&golden, &ve);
    report.golden_gap = Some(g);
    if g.is_nan() || g > GOLDEN_TOLERANCE {
        return fail(report, format!("posterior differs from golden by {g:e}"));
    }
    report
}

/// Runs scenarios concurrently; reports come back in input order.
pub fn run_all(scenarios: &[Scenario], regen: bool) -> Vec<Report> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = scenarios.iter().map(|s| scope.spawn(move || run(s, regen))).collect();
        handles.into_iter().map(|h| h.join().expect("scenario thread panicked")).collect()
    })
}
