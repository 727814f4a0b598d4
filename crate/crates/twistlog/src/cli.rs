//! Command-line front end.  Sessions are described in JSON, every number
//! crosses that boundary as an exact rational string "p/q", and verification
//! results come back as JSON reports with per-case outcomes.
//!
//! Exit codes: 0 all checks passed, 1 at least one verified failure,
//! 2 usage or spec error, 3 nothing could be decided at this truncation.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::fields::{
    check_locality, compare_fields, compare_ops, lattice_points, nth_product,
    phi_equivariance_check, translation_check, BorcherdsEngine, BorcherdsOutcome, CheckReport,
    LogField,
};
use crate::fock::{
    mode_action, mode_of_vector, BlockConfig, Column, FockBasis, ModuleSpec, Monomial,
    SparseOperator, StateVec,
};
use crate::loop_algebra::{bracket, LieStructure, LoopElement};
use crate::scalar::{parse_rat, rat, rat_string, Rat, Scalar};
use crate::twist::TwistPair;
use crate::virasoro::{jordan_structure, vacuum_weight, virasoro_relation_check, VirasoroFamily};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INCONCLUSIVE: i32 = 3;

// ---------------------------------------------------------------------------
// argument surface

#[derive(Parser)]
#[command(
    name = "twistlog",
    version,
    about = "Exact construction and verification of twisted logarithmic Fock modules"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Enumerate the truncated module and write basis + operator manifests.
    Build(BuildArgs),
    /// Run one verification suite and emit a report.
    Verify(VerifyArgs),
    /// Emit generalized eigenvalues and Jordan partitions per energy level.
    Spectrum(SpectrumArgs),
    /// Run every verification suite and emit an aggregate report.
    Report(ReportArgs),
}

#[derive(Args)]
struct SessionArgs {
    /// Session description, a JSON file.
    #[arg(long, value_name = "PATH")]
    spec: PathBuf,
    /// Energy cutoff override, a rational "p/q".
    #[arg(long, value_name = "Q")]
    cutoff: Option<String>,
    /// Zero-energy degree cap override.
    #[arg(long, value_name = "N")]
    zero_cap: Option<u32>,
}

#[derive(Args)]
struct SweepArgs {
    /// Mode exponent bound, a rational "p/q"; sweeps cover |m| <= bound.
    /// Integer sweeps (virasoro) use the floor.
    #[arg(long, value_name = "Q", default_value = "2")]
    m_range: String,
    /// Product index bound for the quadruple-sum suite: n in [-N, N].
    #[arg(long, value_name = "N", default_value_t = 2)]
    n_range: i64,
    /// Worker threads; TWISTLOG_JOBS is the fallback, then the rayon default.
    #[arg(long, value_name = "N")]
    jobs: Option<usize>,
}

#[derive(Args)]
struct BuildArgs {
    #[command(flatten)]
    session: SessionArgs,
    /// Output directory for basis.json and operators.json.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    session: SessionArgs,
    /// Which suite to run.
    #[arg(long, value_enum)]
    suite: SuiteName,
    #[command(flatten)]
    sweep: SweepArgs,
    /// Report destination; stdout when absent.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Manifest directory written by `build`; its operator tables are
    /// cross-validated against fresh recomputation before the suite runs.
    #[arg(long, value_name = "PATH")]
    cache: Option<PathBuf>,
}

#[derive(Args)]
struct SpectrumArgs {
    #[command(flatten)]
    session: SessionArgs,
    /// Highest energy level to report, a rational "p/q"; must not exceed
    /// the cutoff.  Defaults to the cutoff.
    #[arg(long, value_name = "Q")]
    levels: Option<String>,
    /// Output destination; stdout when absent.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    session: SessionArgs,
    #[command(flatten)]
    sweep: SweepArgs,
    /// Output destination; stdout when absent.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, ValueEnum)]
enum SuiteName {
    Heisenberg,
    Virasoro,
    Borcherds,
    Equivariance,
    Locality,
    Nproduct,
    Translation,
}

impl SuiteName {
    const ALL: [SuiteName; 7] = [
        SuiteName::Heisenberg,
        SuiteName::Virasoro,
        SuiteName::Borcherds,
        SuiteName::Equivariance,
        SuiteName::Locality,
        SuiteName::Nproduct,
        SuiteName::Translation,
    ];

    fn name(self) -> &'static str {
        match self {
            SuiteName::Heisenberg => "heisenberg",
            SuiteName::Virasoro => "virasoro",
            SuiteName::Borcherds => "borcherds",
            SuiteName::Equivariance => "equivariance",
            SuiteName::Locality => "locality",
            SuiteName::Nproduct => "nproduct",
            SuiteName::Translation => "translation",
        }
    }
}

pub fn run() -> i32 {
    run_from(std::env::args_os())
}

fn run_from<I>(args: I) -> i32
where
    I: IntoIterator<Item = OsString>,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let used_stderr = e.use_stderr();
            let _ = e.print();
            return if used_stderr { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let r = match cli.cmd {
        Cmd::Build(a) => cmd_build(a),
        Cmd::Verify(a) => cmd_verify(a),
        Cmd::Spectrum(a) => cmd_spectrum(a),
        Cmd::Report(a) => cmd_report(a),
    };
    match r {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    }
}

// ---------------------------------------------------------------------------
// session JSON

/// On-disk session description.  Rationals are strings so that nothing in the
/// pipeline ever becomes a float.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub blocks: Vec<BlockJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<ParamsJson>,
    pub cutoff: String,
    pub zero_cap: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conductor: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockJson {
    pub kind: String,
    pub ell: u32,
    pub alpha0: String,
}

/// Zero-mode action parameters for the degenerate blocks; absent values
/// default to zero.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamsJson {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a1: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a2: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<String>,
}

impl SessionSpec {
    /// Canonicalizes every rational string and applies command-line
    /// overrides, so equal sessions serialize to equal bytes.
    fn with_overrides(&self, cutoff: Option<Rat>, zero_cap: Option<u32>) -> Result<SessionSpec> {
        let mut out = self.clone();
        for b in &mut out.blocks {
            b.alpha0 = rat_string(parse_rat(&b.alpha0)?);
        }
        if let Some(p) = &mut out.params {
            for slot in [&mut p.a1, &mut p.a2, &mut p.a] {
                if let Some(s) = slot {
                    *slot = Some(rat_string(parse_rat(s)?));
                }
            }
        }
        out.cutoff = rat_string(match cutoff {
            Some(c) => c,
            None => parse_rat(&self.cutoff)?,
        });
        if let Some(z) = zero_cap {
            out.zero_cap = z;
        }
        Ok(out)
    }

    fn param(&self, name: &str) -> Result<Rat> {
        let slot = self.params.as_ref().and_then(|p| match name {
            "a1" => p.a1.as_ref(),
            "a2" => p.a2.as_ref(),
            _ => p.a.as_ref(),
        });
        match slot {
            Some(s) => parse_rat(s),
            None => Ok(rat(0, 1)),
        }
    }

    pub fn to_module_spec(&self) -> Result<ModuleSpec> {
        let mut blocks = Vec::new();
        for b in &self.blocks {
            let alpha0 = parse_rat(&b.alpha0)?;
            let cfg = match b.kind.as_str() {
                "even" => {
                    if alpha0 == rat(0, 1) {
                        BlockConfig::EvenZero {
                            ell: b.ell,
                            a1: self.param("a1")?,
                            a2: self.param("a2")?,
                        }
                    } else {
                        BlockConfig::Even { ell: b.ell, alpha0 }
                    }
                }
                "odd" => {
                    if alpha0 == rat(0, 1) {
                        BlockConfig::OddZero {
                            ell: b.ell,
                            a: self.param("a")?,
                        }
                    } else if alpha0 == rat(-1, 2) {
                        BlockConfig::Odd { ell: b.ell }
                    } else {
                        return Err(Error::InvalidSpec(format!(
                            "odd block exponent must be -1/2 or 0, got {}",
                            b.alpha0
                        )));
                    }
                }
                other => {
                    return Err(Error::Parse(format!(
                        "unknown block kind {other:?}; expected \"even\" or \"odd\""
                    )))
                }
            };
            blocks.push(cfg);
        }
        let cutoff = parse_rat(&self.cutoff)?;
        match self.conductor {
            Some(m) => ModuleSpec::with_conductor(blocks, cutoff, self.zero_cap, m),
            None => ModuleSpec::new(blocks, cutoff, self.zero_cap),
        }
    }
}

fn load_session(args: &SessionArgs) -> Result<(SessionSpec, ModuleSpec)> {
    let text = fs::read_to_string(&args.spec)?;
    let raw: SessionSpec = serde_json::from_str(&text)?;
    let cutoff = match &args.cutoff {
        Some(s) => Some(parse_rat(s)?),
        None => None,
    };
    let sess = raw.with_overrides(cutoff, args.zero_cap)?;
    let mspec = sess.to_module_spec()?;
    Ok((sess, mspec))
}

// ---------------------------------------------------------------------------
// reports

#[derive(Clone, Debug)]
enum Outcome {
    Pass,
    Fail(String),
    Inconclusive(String),
}

#[derive(Clone, Debug)]
struct Case {
    label: String,
    outcome: Outcome,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Counts {
    pub checked: usize,
    pub passed: usize,
    pub failed: usize,
    pub inconclusive: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case: String,
    pub witness: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Report {
    pub suite: String,
    pub params: BTreeMap<String, Value>,
    pub counts: Counts,
    pub failures: Vec<CaseRecord>,
    pub inconclusive: Vec<CaseRecord>,
    pub wall_ms: u128,
}

struct SuiteRun {
    cases: Vec<Case>,
    extra: BTreeMap<String, Value>,
}

fn aggregate(
    suite: &str,
    params: BTreeMap<String, Value>,
    mut cases: Vec<Case>,
    started: Instant,
) -> Report {
    cases.sort_by(|a, b| a.label.cmp(&b.label));
    let mut counts = Counts::default();
    let mut failures = Vec::new();
    let mut inconclusive = Vec::new();
    for c in cases {
        counts.checked += 1;
        match c.outcome {
            Outcome::Pass => counts.passed += 1,
            Outcome::Fail(w) => {
                counts.failed += 1;
                failures.push(CaseRecord {
                    case: c.label,
                    witness: w,
                });
            }
            Outcome::Inconclusive(w) => {
                counts.inconclusive += 1;
                inconclusive.push(CaseRecord {
                    case: c.label,
                    witness: w,
                });
            }
        }
    }
    Report {
        suite: suite.to_string(),
        params,
        counts,
        failures,
        inconclusive,
        wall_ms: started.elapsed().as_millis(),
    }
}

/// A report earns exit 0 only if it verified something and nothing failed.
fn exit_of(counts: &Counts) -> i32 {
    if counts.failed > 0 {
        EXIT_FAILURE
    } else if counts.passed > 0 {
        EXIT_OK
    } else {
        EXIT_INCONCLUSIVE
    }
}

fn witness_of(entries: &[String]) -> String {
    let mut parts: Vec<String> = entries.iter().take(6).cloned().collect();
    if entries.len() > 6 {
        parts.push(format!("plus {} more", entries.len() - 6));
    }
    parts.join("; ")
}

fn report_outcome(rep: &CheckReport) -> Outcome {
    if !rep.failures.is_empty() {
        Outcome::Fail(witness_of(&rep.failures))
    } else if rep.compared == 0 {
        Outcome::Inconclusive(format!(
            "no comparable columns at this truncation ({} skipped)",
            rep.skipped
        ))
    } else {
        Outcome::Pass
    }
}

/// Window violations are inconclusive, not failures; other errors abort.
fn outcome_of(res: Result<CheckReport>) -> Result<Outcome> {
    match res {
        Ok(rep) => Ok(report_outcome(&rep)),
        Err(Error::WindowExceeded(msg)) => Ok(Outcome::Inconclusive(msg)),
        Err(e) => Err(e),
    }
}

fn emit_json<T: Serialize>(val: &T, out: Option<&Path>) -> Result<()> {
    let mut s = serde_json::to_string_pretty(val)?;
    s.push('\n');
    match out {
        Some(p) => fs::write(p, s)?,
        None => print!("{s}"),
    }
    Ok(())
}

fn worker_pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    let n = match jobs {
        Some(n) => n,
        None => match std::env::var("TWISTLOG_JOBS") {
            Ok(s) => s.trim().parse().map_err(|_| {
                Error::Parse(format!("TWISTLOG_JOBS value {s:?} is not a thread count"))
            })?,
            Err(_) => 0,
        },
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::InvalidSpec(format!("thread pool: {e}")))
}

struct Sweep {
    m_range: Rat,
    n_range: i64,
    jobs: Option<usize>,
}

impl SweepArgs {
    fn resolve(&self) -> Result<Sweep> {
        Ok(Sweep {
            m_range: parse_rat(&self.m_range)?,
            n_range: self.n_range.max(0),
            jobs: self.jobs,
        })
    }
}

// ---------------------------------------------------------------------------
// shared helpers

fn unit_coords(dim: usize, r: usize) -> Vec<Scalar> {
    (0..dim)
        .map(|i| if i == r { Scalar::one() } else { Scalar::zero() })
        .collect()
}

pub(crate) fn monomial_string(m: &Monomial) -> String {
    if m.factors().is_empty() {
        return "1".to_string();
    }
    m.factors()
        .iter()
        .map(|(v, e)| {
            let base = format!("x[{}.{}.{}]", v.block + 1, v.index, v.level);
            if *e == 1 {
                base
            } else {
                format!("{base}^{e}")
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn state_string(basis: &FockBasis, v: &StateVec) -> String {
    if v.is_empty() {
        return "0".to_string();
    }
    let mut parts: Vec<String> = v
        .iter()
        .take(4)
        .map(|(i, c)| format!("({c})*{}", monomial_string(basis.monomial(*i))))
        .collect();
    if v.len() > 4 {
        parts.push(format!("plus {} more terms", v.len() - 4));
    }
    parts.join(" + ")
}

fn session_params(sess: &SessionSpec, mspec: &ModuleSpec) -> BTreeMap<String, Value> {
    let mut out = BTreeMap::new();
    out.insert(
        "blocks".to_string(),
        serde_json::to_value(&sess.blocks).expect("plain strings"),
    );
    out.insert("cutoff".to_string(), Value::String(rat_string(mspec.cutoff())));
    out.insert("zero_cap".to_string(), Value::from(mspec.zero_cap()));
    out.insert("conductor".to_string(), Value::from(mspec.conductor()));
    out
}

// ---------------------------------------------------------------------------
// build manifests

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisManifest {
    pub session: SessionSpec,
    pub conductor: u32,
    pub dim: usize,
    pub basis: Vec<BasisEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisEntry {
    pub index: usize,
    pub energy: String,
    pub monomial: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorManifest {
    pub session: SessionSpec,
    pub window_lo: String,
    pub window_hi: String,
    pub generators: Vec<GeneratorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorEntry {
    pub index: usize,
    pub coset: String,
    pub modes: Vec<ModeEntry>,
}

/// One mode operator as column-major triplets; a null column is one the
/// truncation cannot represent exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeEntry {
    pub exponent: String,
    pub delta_e: String,
    pub columns: Vec<Option<Vec<(usize, String)>>>,
}

fn basis_manifest(sess: &SessionSpec, basis: &FockBasis) -> BasisManifest {
    BasisManifest {
        session: sess.clone(),
        conductor: basis.spec().conductor(),
        dim: basis.len(),
        basis: (0..basis.len())
            .map(|i| BasisEntry {
                index: i,
                energy: rat_string(basis.energy(i)),
                monomial: monomial_string(basis.monomial(i)),
            })
            .collect(),
    }
}

fn columns_json(op: &SparseOperator) -> Vec<Option<Vec<(usize, String)>>> {
    op.columns()
        .map(|col| match col {
            Column::Truncated => None,
            Column::Exact(es) => {
                let sorted: BTreeMap<usize, String> =
                    es.iter().map(|(r, v)| (*r, v.to_string())).collect();
                Some(sorted.into_iter().collect())
            }
        })
        .collect()
}

fn operator_manifest(sess: &SessionSpec, basis: &FockBasis) -> Result<OperatorManifest> {
    let spec = basis.spec();
    let tp = spec.twist_pair();
    let hi = spec.cutoff() + rat(1, 1);
    let lo = -hi;
    let mut generators = Vec::new();
    for r in 0..tp.dim() {
        let coords = unit_coords(tp.dim(), r);
        let mut modes = Vec::new();
        for m in lattice_points(tp.coset(r), lo, hi) {
            let op = mode_of_vector(basis, &coords, m)?;
            modes.push(ModeEntry {
                exponent: rat_string(m),
                delta_e: rat_string(op.delta_e()),
                columns: columns_json(&op),
            });
        }
        generators.push(GeneratorEntry {
            index: r,
            coset: rat_string(tp.coset(r)),
            modes,
        });
    }
    Ok(OperatorManifest {
        session: sess.clone(),
        window_lo: rat_string(lo),
        window_hi: rat_string(hi),
        generators,
    })
}

fn write_json<T: Serialize>(path: &Path, val: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(val)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn cmd_build(a: BuildArgs) -> Result<i32> {
    let (sess, mspec) = load_session(&a.session)?;
    let basis = FockBasis::new(mspec);
    fs::create_dir_all(&a.out)?;
    let bman = basis_manifest(&sess, &basis);
    let oman = operator_manifest(&sess, &basis)?;
    write_json(&a.out.join("basis.json"), &bman)?;
    write_json(&a.out.join("operators.json"), &oman)?;
    println!(
        "wrote {} basis elements and {} generator mode tables to {}",
        bman.dim,
        oman.generators.len(),
        a.out.display()
    );
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// cache cross-validation

fn cache_cases(sess: &SessionSpec, basis: &FockBasis, dir: &Path) -> Result<Vec<Case>> {
    let mut out = Vec::new();
    let fresh_basis = basis_manifest(sess, basis);
    let btext = fs::read_to_string(dir.join("basis.json"))?;
    let bcase = match serde_json::from_str::<BasisManifest>(&btext) {
        Err(e) => Outcome::Fail(format!("unreadable manifest: {e}")),
        Ok(cached) if cached == fresh_basis => Outcome::Pass,
        Ok(_) => Outcome::Fail("cached basis manifest disagrees with recomputation".to_string()),
    };
    out.push(Case {
        label: "cache basis.json".to_string(),
        outcome: bcase,
    });
    let fresh_ops = operator_manifest(sess, basis)?;
    let otext = fs::read_to_string(dir.join("operators.json"))?;
    match serde_json::from_str::<OperatorManifest>(&otext) {
        Err(e) => out.push(Case {
            label: "cache operators.json".to_string(),
            outcome: Outcome::Fail(format!("unreadable manifest: {e}")),
        }),
        Ok(cached) => {
            let shape_ok = cached.session == fresh_ops.session
                && cached.window_lo == fresh_ops.window_lo
                && cached.window_hi == fresh_ops.window_hi
                && cached.generators.len() == fresh_ops.generators.len();
            if !shape_ok {
                out.push(Case {
                    label: "cache operators.json".to_string(),
                    outcome: Outcome::Fail(
                        "cached manifest header disagrees with the session".to_string(),
                    ),
                });
            } else {
                for (g, (c, f)) in cached
                    .generators
                    .iter()
                    .zip(&fresh_ops.generators)
                    .enumerate()
                {
                    let outcome = if c == f {
                        Outcome::Pass
                    } else {
                        let at = c
                            .modes
                            .iter()
                            .zip(&f.modes)
                            .find(|(x, y)| x != y)
                            .map(|(x, _)| x.exponent.clone());
                        Outcome::Fail(match at {
                            Some(e) => {
                                format!("mode table at exponent {e} disagrees with recomputation")
                            }
                            None => "mode table shape disagrees with recomputation".to_string(),
                        })
                    };
                    out.push(Case {
                        label: format!("cache operators.json generator {g}"),
                        outcome,
                    });
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// suites

fn suite_run(s: SuiteName, basis: &FockBasis, tp: &TwistPair, sw: &Sweep) -> Result<SuiteRun> {
    match s {
        SuiteName::Heisenberg => heisenberg_suite(basis, tp, sw.m_range),
        SuiteName::Virasoro => virasoro_suite(basis, floor_int(sw.m_range)),
        SuiteName::Borcherds => borcherds_suite(basis, tp, sw.n_range),
        SuiteName::Equivariance => per_generator(basis, tp, phi_equivariance_check),
        SuiteName::Translation => per_generator(basis, tp, translation_check),
        SuiteName::Locality => locality_suite(basis, tp),
        SuiteName::Nproduct => nproduct_suite(basis, tp),
    }
}

fn floor_int(q: Rat) -> i64 {
    q.floor().to_integer()
}

/// Three integer translates of the coset representative, centered on it.
fn coset_reps3(c: Rat) -> [Rat; 3] {
    [c - rat(1, 1), c, c + rat(1, 1)]
}

/// Module realization of a bracket value: the central part as a constant
/// operator, loop terms through their mode operators.
fn loop_to_operator(basis: &FockBasis, el: &LoopElement, delta_e: Rat) -> Result<SparseOperator> {
    let mut out = SparseOperator::zero(basis.len(), delta_e);
    out = out.add(&SparseOperator::constant(basis.len(), el.central_coeff()))?;
    for (g, expo, c) in el.terms() {
        let (block, j) = basis.spec().global_to_local(g);
        out = out.add(&mode_action(basis, block, j, expo)?.scale(c))?;
    }
    Ok(out)
}

fn heisenberg_suite(basis: &FockBasis, tp: &TwistPair, mr: Rat) -> Result<SuiteRun> {
    let ls = LieStructure::heisenberg(tp.clone());
    let dim = tp.dim();
    let pairs: Vec<(usize, usize)> = (0..dim)
        .flat_map(|r| (0..dim).map(move |s| (r, s)))
        .collect();
    let groups = pairs
        .par_iter()
        .map(|&(r, s)| -> Result<Vec<Case>> {
            let er = unit_coords(dim, r);
            let es = unit_coords(dim, s);
            let mut out = Vec::new();
            for m in lattice_points(tp.coset(r), -mr, mr) {
                let am = mode_of_vector(basis, &er, m)?;
                for k in lattice_points(tp.coset(s), -mr, mr) {
                    let bk = mode_of_vector(basis, &es, k)?;
                    let label = format!(
                        "a={r} m={} b={s} k={}",
                        rat_string(m),
                        rat_string(k)
                    );
                    let comm = am.commutator(&bk);
                    let x = LoopElement::generator(tp, r, m)?;
                    let y = LoopElement::generator(tp, s, k)?;
                    let expected = loop_to_operator(basis, &bracket(&ls, &x, &y), -(m + k))?;
                    let outcome = report_outcome(&compare_ops(&label, &comm, &expected));
                    out.push(Case { label, outcome });
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<Vec<Case>>>>()?;
    Ok(SuiteRun {
        cases: groups.into_iter().flatten().collect(),
        extra: BTreeMap::new(),
    })
}

fn virasoro_suite(basis: &FockBasis, mr: i64) -> Result<SuiteRun> {
    let mr = mr.max(0);
    // the bracket of distinct modes within |m| <= mr reaches index 2mr - 1
    let range = (2 * mr - 1).max(2);
    let fam = match VirasoroFamily::build(basis, range) {
        Ok(f) => f,
        Err(Error::WindowExceeded(msg)) => {
            return Ok(SuiteRun {
                cases: vec![Case {
                    label: "mode family".to_string(),
                    outcome: Outcome::Inconclusive(msg),
                }],
                extra: BTreeMap::new(),
            })
        }
        Err(e) => return Err(e),
    };
    let pairs: Vec<(i64, i64)> = (-mr..=mr)
        .flat_map(|m| (-mr..=mr).map(move |n| (m, n)))
        .collect();
    let cases = pairs
        .par_iter()
        .map(|&(m, n)| -> Result<Case> {
            let label = format!("m={m} n={n}");
            let outcome = outcome_of(virasoro_relation_check(basis, &fam, m, n))?;
            Ok(Case { label, outcome })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut extra = BTreeMap::new();
    extra.insert(
        "central_charge".to_string(),
        Value::String(rat_string(fam.central())),
    );
    Ok(SuiteRun { cases, extra })
}

fn borcherds_suite(basis: &FockBasis, tp: &TwistPair, nr: i64) -> Result<SuiteRun> {
    let dim = tp.dim();
    let groups = (0..dim)
        .into_par_iter()
        .map(|a| -> Result<Vec<Case>> {
            let mut eng = BorcherdsEngine::new(basis, tp)?;
            let mut out = Vec::new();
            for b in 0..dim {
                for n in -nr..=nr {
                    for m in coset_reps3(tp.coset(a)) {
                        for k in coset_reps3(tp.coset(b)) {
                            for v in 0..basis.len() {
                                let label = format!(
                                    "a={a} b={b} n={n} m={} k={} v={v:04}",
                                    rat_string(m),
                                    rat_string(k)
                                );
                                let outcome = match eng.check(a, b, m, k, n, v)? {
                                    BorcherdsOutcome::Residual(r) if r.is_empty() => Outcome::Pass,
                                    BorcherdsOutcome::Residual(r) => Outcome::Fail(format!(
                                        "residual {}",
                                        state_string(basis, &r)
                                    )),
                                    BorcherdsOutcome::Inconclusive(w) => Outcome::Inconclusive(w),
                                };
                                out.push(Case { label, outcome });
                            }
                        }
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<Vec<Case>>>>()?;
    Ok(SuiteRun {
        cases: groups.into_iter().flatten().collect(),
        extra: BTreeMap::new(),
    })
}

fn per_generator<F>(basis: &FockBasis, tp: &TwistPair, check: F) -> Result<SuiteRun>
where
    F: Fn(&FockBasis, &TwistPair, &[Scalar]) -> Result<CheckReport> + Sync,
{
    let cases = (0..tp.dim())
        .into_par_iter()
        .map(|r| -> Result<Case> {
            let coords = unit_coords(tp.dim(), r);
            let label = format!("generator {r}");
            let outcome = outcome_of(check(basis, tp, &coords))?;
            Ok(Case { label, outcome })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SuiteRun {
        cases,
        extra: BTreeMap::new(),
    })
}

fn locality_suite(basis: &FockBasis, tp: &TwistPair) -> Result<SuiteRun> {
    let dim = tp.dim();
    let cols: Vec<usize> = (0..basis.len()).collect();
    let pairs: Vec<(usize, usize)> = (0..dim)
        .flat_map(|r| (r..dim).map(move |s| (r, s)))
        .collect();
    let cases = pairs
        .par_iter()
        .map(|&(r, s)| -> Result<Case> {
            let f = LogField::field_of(basis, tp, &unit_coords(dim, r))?;
            let g = LogField::field_of(basis, tp, &unit_coords(dim, s))?;
            let label = format!("a={r} b={s}");
            let outcome = outcome_of(check_locality(basis, tp, &f, &g, 2, &cols))?;
            Ok(Case { label, outcome })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SuiteRun {
        cases,
        extra: BTreeMap::new(),
    })
}

fn expect_zero_field(f: &LogField) -> Outcome {
    let bad: Vec<String> = f
        .components()
        .filter(|(_, op)| !op.is_zero())
        .map(|(key, _)| format!("slot ({},{}) nonzero", rat_string(key.0), key.1))
        .collect();
    if !bad.is_empty() {
        return Outcome::Fail(witness_of(&bad));
    }
    if f.trunc_below().is_some() {
        return Outcome::Inconclusive("window leaves low slots undetermined".to_string());
    }
    Outcome::Pass
}

fn nproduct_suite(basis: &FockBasis, tp: &TwistPair) -> Result<SuiteRun> {
    let dim = tp.dim();
    let idf = LogField::identity(basis.len());
    let half = Scalar::from_rat(rat(1, 2));
    let gen_groups = (0..dim)
        .into_par_iter()
        .map(|r| -> Result<Vec<Case>> {
            let f = LogField::field_of(basis, tp, &unit_coords(dim, r))?;
            let mut out = Vec::new();
            for n in [0i64, 1] {
                let prod = nth_product(basis, tp, &f, &idf, n, 2)?;
                out.push(Case {
                    label: format!("a={r} identity n={n}"),
                    outcome: expect_zero_field(&prod),
                });
            }
            let derivatives: [(i64, LogField); 3] = [
                (-1, f.clone()),
                (-2, f.d_z()),
                (-3, f.d_z().d_z().scale(&half)),
            ];
            for (n, expect) in &derivatives {
                let prod = nth_product(basis, tp, &f, &idf, *n, 2)?;
                let label = format!("a={r} identity n={n}");
                let outcome = report_outcome(&compare_fields(&label, &prod, expect));
                out.push(Case { label, outcome });
            }
            Ok(out)
        })
        .collect::<Result<Vec<Vec<Case>>>>()?;
    let pairs: Vec<(usize, usize)> = (0..dim)
        .flat_map(|r| (0..dim).map(move |s| (r, s)))
        .collect();
    let pair_cases = pairs
        .par_iter()
        .map(|&(r, s)| -> Result<Case> {
            let er = unit_coords(dim, r);
            let es = unit_coords(dim, s);
            let f = LogField::field_of(basis, tp, &er)?;
            let g = LogField::field_of(basis, tp, &es)?;
            let prod = nth_product(basis, tp, &f, &g, 1, 2)?;
            let c = tp.pair(&er, &es);
            let label = format!("first product a={r} b={s}");
            let outcome = if c.is_zero() {
                expect_zero_field(&prod)
            } else {
                report_outcome(&compare_fields(&label, &prod, &idf.scale(&c)))
            };
            Ok(Case { label, outcome })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cases: Vec<Case> = gen_groups.into_iter().flatten().collect();
    cases.extend(pair_cases);
    Ok(SuiteRun {
        cases,
        extra: BTreeMap::new(),
    })
}

// ---------------------------------------------------------------------------
// commands

fn cmd_verify(a: VerifyArgs) -> Result<i32> {
    let started = Instant::now();
    let (sess, mspec) = load_session(&a.session)?;
    let basis = FockBasis::new(mspec.clone());
    let tp = mspec.twist_pair();
    let sweep = a.sweep.resolve()?;
    let pool = worker_pool(sweep.jobs)?;
    let mut run = pool.install(|| suite_run(a.suite, &basis, &tp, &sweep))?;
    if let Some(dir) = &a.cache {
        let mut cases = cache_cases(&sess, &basis, dir)?;
        cases.append(&mut run.cases);
        run.cases = cases;
    }
    let mut params = session_params(&sess, &mspec);
    params.insert(
        "m_range".to_string(),
        Value::String(rat_string(sweep.m_range)),
    );
    params.insert("n_range".to_string(), Value::from(sweep.n_range));
    params.extend(run.extra);
    let report = aggregate(a.suite.name(), params, run.cases, started);
    emit_json(&report, a.out.as_deref())?;
    Ok(exit_of(&report.counts))
}

#[derive(Serialize)]
struct Aggregate {
    reports: Vec<Report>,
    totals: Counts,
    wall_ms: u128,
}

fn cmd_report(a: ReportArgs) -> Result<i32> {
    let started = Instant::now();
    let (sess, mspec) = load_session(&a.session)?;
    let basis = FockBasis::new(mspec.clone());
    let tp = mspec.twist_pair();
    let sweep = a.sweep.resolve()?;
    let pool = worker_pool(sweep.jobs)?;
    let mut reports = Vec::new();
    let mut totals = Counts::default();
    for s in SuiteName::ALL {
        let s_started = Instant::now();
        let run = pool.install(|| suite_run(s, &basis, &tp, &sweep))?;
        let mut params = session_params(&sess, &mspec);
        params.insert(
            "m_range".to_string(),
            Value::String(rat_string(sweep.m_range)),
        );
        params.insert("n_range".to_string(), Value::from(sweep.n_range));
        params.extend(run.extra);
        let rep = aggregate(s.name(), params, run.cases, s_started);
        totals.checked += rep.counts.checked;
        totals.passed += rep.counts.passed;
        totals.failed += rep.counts.failed;
        totals.inconclusive += rep.counts.inconclusive;
        reports.push(rep);
    }
    let agg = Aggregate {
        reports,
        totals,
        wall_ms: started.elapsed().as_millis(),
    };
    emit_json(&agg, a.out.as_deref())?;
    Ok(exit_of(&agg.totals))
}

#[derive(Serialize, Deserialize)]
pub struct SpectrumLevel {
    pub energy: String,
    pub dim: usize,
    pub eigenvalue: String,
    pub jordan: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Serialize, Deserialize)]
pub struct Spectrum {
    pub vacuum_weight: String,
    pub conductor: u32,
    pub dim: usize,
    pub levels: Vec<SpectrumLevel>,
}

fn cmd_spectrum(a: SpectrumArgs) -> Result<i32> {
    let (_sess, mspec) = load_session(&a.session)?;
    let basis = FockBasis::new(mspec.clone());
    let bound = match &a.levels {
        Some(s) => parse_rat(s)?,
        None => mspec.cutoff(),
    };
    if bound > mspec.cutoff() {
        return Err(Error::InvalidSpec(format!(
            "requested level bound {} exceeds the cutoff {}",
            rat_string(bound),
            rat_string(mspec.cutoff())
        )));
    }
    let w0 = vacuum_weight(&basis)?;
    let mut levels = Vec::new();
    for e in basis.levels() {
        if e > bound {
            break;
        }
        let (jordan, note) = match jordan_structure(&basis, e) {
            Ok(p) => (Some(p), None),
            Err(Error::NotNilpotent(msg)) | Err(Error::WindowExceeded(msg)) => (None, Some(msg)),
            Err(err) => return Err(err),
        };
        levels.push(SpectrumLevel {
            energy: rat_string(e),
            dim: basis.indices_at_energy(e).len(),
            eigenvalue: rat_string(w0 + e),
            jordan,
            note,
        });
    }
    let out = Spectrum {
        vacuum_weight: rat_string(w0),
        conductor: mspec.conductor(),
        dim: basis.len(),
        levels,
    };
    emit_json(&out, a.out.as_deref())?;
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn even_session(ell: u32, alpha0: &str, cutoff: &str) -> SessionSpec {
        SessionSpec {
            blocks: vec![BlockJson {
                kind: "even".to_string(),
                ell,
                alpha0: alpha0.to_string(),
            }],
            params: None,
            cutoff: cutoff.to_string(),
            zero_cap: 2,
            conductor: None,
        }
    }

    #[test]
    fn session_maps_to_the_four_block_variants() {
        let s = even_session(2, "-1/3", "2");
        let m = s.to_module_spec().unwrap();
        assert_eq!(
            m.blocks()[0],
            BlockConfig::Even {
                ell: 2,
                alpha0: rat(-1, 3)
            }
        );

        let mut s = even_session(1, "0", "2");
        s.params = Some(ParamsJson {
            a1: Some("1/2".to_string()),
            a2: Some("-3".to_string()),
            a: None,
        });
        let m = s.to_module_spec().unwrap();
        assert_eq!(
            m.blocks()[0],
            BlockConfig::EvenZero {
                ell: 1,
                a1: rat(1, 2),
                a2: rat(-3, 1)
            }
        );

        let s = SessionSpec {
            blocks: vec![BlockJson {
                kind: "odd".to_string(),
                ell: 2,
                alpha0: "-1/2".to_string(),
            }],
            params: None,
            cutoff: "1".to_string(),
            zero_cap: 0,
            conductor: None,
        };
        assert_eq!(
            s.to_module_spec().unwrap().blocks()[0],
            BlockConfig::Odd { ell: 2 }
        );

        let s = SessionSpec {
            blocks: vec![BlockJson {
                kind: "odd".to_string(),
                ell: 1,
                alpha0: "0/5".to_string(),
            }],
            params: Some(ParamsJson {
                a1: None,
                a2: None,
                a: Some("2/3".to_string()),
            }),
            cutoff: "1".to_string(),
            zero_cap: 1,
            conductor: None,
        };
        assert_eq!(
            s.to_module_spec().unwrap().blocks()[0],
            BlockConfig::OddZero {
                ell: 1,
                a: rat(2, 3)
            }
        );
    }

    #[test]
    fn session_rejects_bad_data() {
        let s = even_session(1, "1/0", "2");
        assert!(matches!(s.to_module_spec(), Err(Error::Parse(_))));

        let mut s = even_session(1, "-1/2", "2");
        s.blocks[0].kind = "heisenberg".to_string();
        assert!(matches!(s.to_module_spec(), Err(Error::Parse(_))));

        let s = SessionSpec {
            blocks: vec![BlockJson {
                kind: "odd".to_string(),
                ell: 1,
                alpha0: "-1/3".to_string(),
            }],
            params: None,
            cutoff: "1".to_string(),
            zero_cap: 0,
            conductor: None,
        };
        assert!(matches!(s.to_module_spec(), Err(Error::InvalidSpec(_))));

        // conductor override must be a multiple of the minimal one
        let mut s = even_session(1, "-1/3", "2");
        s.conductor = Some(8);
        assert!(matches!(s.to_module_spec(), Err(Error::InvalidSpec(_))));
        s.conductor = Some(24);
        assert!(s.to_module_spec().is_ok());
    }

    #[test]
    fn overrides_canonicalize_rational_strings() {
        let s = even_session(1, "-2/6", "4/2");
        let c = s.with_overrides(None, None).unwrap();
        assert_eq!(c.blocks[0].alpha0, "-1/3");
        assert_eq!(c.cutoff, "2");
        let c = s.with_overrides(Some(rat(5, 2)), Some(7)).unwrap();
        assert_eq!(c.cutoff, "5/2");
        assert_eq!(c.zero_cap, 7);
    }

    #[test]
    fn exit_codes_follow_the_counts() {
        let mut c = Counts::default();
        assert_eq!(exit_of(&c), EXIT_INCONCLUSIVE);
        c.inconclusive = 3;
        assert_eq!(exit_of(&c), EXIT_INCONCLUSIVE);
        c.passed = 1;
        assert_eq!(exit_of(&c), EXIT_OK);
        c.failed = 1;
        assert_eq!(exit_of(&c), EXIT_FAILURE);
    }

    #[test]
    fn aggregation_sorts_and_counts() {
        let cases = vec![
            Case {
                label: "b".to_string(),
                outcome: Outcome::Fail("w1".to_string()),
            },
            Case {
                label: "a".to_string(),
                outcome: Outcome::Fail("w2".to_string()),
            },
            Case {
                label: "c".to_string(),
                outcome: Outcome::Pass,
            },
            Case {
                label: "d".to_string(),
                outcome: Outcome::Inconclusive("cut".to_string()),
            },
        ];
        let rep = aggregate("demo", BTreeMap::new(), cases, Instant::now());
        assert_eq!(rep.counts.checked, 4);
        assert_eq!(rep.counts.passed, 1);
        assert_eq!(rep.counts.failed, 2);
        assert_eq!(rep.counts.inconclusive, 1);
        assert_eq!(rep.failures[0].case, "a");
        assert_eq!(rep.failures[1].case, "b");
    }

    #[test]
    fn coset_translates_are_centered() {
        let r = coset_reps3(rat(-1, 3));
        assert_eq!(r, [rat(-4, 3), rat(-1, 3), rat(2, 3)]);
    }

    #[test]
    fn zero_field_expectation_flags_content() {
        let idf = LogField::identity(3);
        assert!(matches!(expect_zero_field(&idf), Outcome::Fail(_)));
        let zf = LogField::zero_field(3, rat(1, 1), rat(-1, 2));
        assert!(matches!(expect_zero_field(&zf), Outcome::Pass));
    }

    #[test]
    fn usage_errors_exit_two() {
        let args = ["twistlog", "verify", "--suite", "nonsense"]
            .iter()
            .map(OsString::from);
        assert_eq!(run_from(args), EXIT_USAGE);
        let args = ["twistlog", "--help"].iter().map(OsString::from);
        assert_eq!(run_from(args), EXIT_OK);
    }
}
