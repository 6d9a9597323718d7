//! Command-line entry points: operator verification, iterate-equivalence
//! sweeps, distance/gradient self-tests, and training runs.
//!
//! Exit codes: 0 success, 1 verification or training failure, 2 usage or
//! configuration error. Every command is deterministic under a fixed seed:
//! reports carry no timestamps and floats serialize at full round-trip
//! precision.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mdp::{admissible_r_interval, build_counterexample, random_mdp, FiniteMdp, RandomMdpConfig};
use crate::measures::{cramer_sq, cramer_sq_grad, random_collection, DiscreteMeasure};
use crate::operators::{
    bellman_backup, conjugated_backup, distributional_backup, initial_collection,
    q_from_collection, value_iteration, verify_counterexample, CounterexampleReport, QFunction,
};
use crate::trainer::{stochastic_chain_mdp, train, EpisodeRow, EpisodicEnv, TrainerConfig};
use crate::transforms::Homeomorphism;
use crate::{Error, Result};

/// Deviation ceiling for the `equivalence` command's pass verdict.
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-9;
/// A state-action pair counts as visited once it has this many samples.
pub const VISIT_THRESHOLD: u64 = 50;

#[derive(Parser, Debug)]
#[command(
    name = "condist",
    version,
    about = "Conjugated distributional value iteration and a Cramér-loss distributional learner"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check that the value-space backup with the invertible reward
    /// transform prefers the wrong action on a two-action stochastic MDP
    /// while the conjugated distributional backup does not.
    VerifyCounterexample(VerifyArgs),
    /// Sweep random MDPs checking that distributional backups reproduce
    /// expected-value backups and that conjugated iterates track value
    /// iteration.
    Equivalence(EquivalenceArgs),
    /// Property suite for the squared Cramér distance: metric axioms,
    /// invariances, a grid oracle, and gradient checks.
    CramerSelftest(CramerArgs),
    /// Train the distributional learner over a seed list and compare the
    /// resulting greedy policies against exact value iteration.
    Train(TrainArgs),
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Risky-action outcome magnitude (reward R with probability 1/2).
    #[arg(long = "R", default_value_t = 10.0)]
    big_r: f64,
    /// Safe-action sure reward; defaults to the midpoint of the interval
    /// where the transformed value backup misranks the actions.
    #[arg(long)]
    r: Option<f64>,
    /// Regularizer of the reward transform.
    #[arg(long, default_value_t = 0.001)]
    eps: f64,
    #[arg(long, default_value_t = 0.99)]
    gamma: f64,
    /// Scale of the conjugating transform.
    #[arg(long, default_value_t = 1.99)]
    beta: f64,
    /// Additionally verify this many random scales R, log-uniform in
    /// (0.1, 1e6), each at its midpoint r.
    #[arg(long, default_value_t = 0)]
    sweep: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the JSON report to this path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EquivalenceArgs {
    /// Number of random MDP instances.
    #[arg(long, default_value_t = 100)]
    n_mdps: usize,
    /// Iteration depth for the conjugated-vs-value-iteration check.
    #[arg(long, default_value_t = 30)]
    k_max: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the per-instance deviation CSV to this path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CramerArgs {
    /// Number of random measure pairs per property.
    #[arg(long, default_value_t = 1000)]
    n_cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for per-seed CSVs, the aggregate CSV, and the
    /// summary JSON.
    #[arg(long)]
    out: PathBuf,
    /// Override the number of environment steps for every seed.
    #[arg(long)]
    steps: Option<u64>,
    /// Flat config override, repeatable: --set trainer.learning_rate=5e-4
    /// or --set env.big_r=20. Values parse as JSON, falling back to
    /// strings.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

/// Parses arguments and runs the selected command, returning the process
/// exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::VerifyCounterexample(args) => cmd_verify_counterexample(&args),
        Command::Equivalence(args) => cmd_equivalence(&args),
        Command::CramerSelftest(args) => cmd_cramer_selftest(&args),
        Command::Train(args) => cmd_train(&args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn exit_code_for(e: &Error) -> i32 {
    match e {
        // Numeric failure during an otherwise well-posed run.
        Error::Diverged { .. } | Error::NonFinite { .. } => 1,
        // Everything else is a usage, configuration, or input problem.
        _ => 2,
    }
}

// ---------------------------------------------------------------------------
// verify-counterexample
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
struct SweepSummary {
    cases: usize,
    all_claims_hold: bool,
    /// Scales whose claims failed (empty on success).
    failed_big_r: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct VerifyOutput {
    report: CounterexampleReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    sweep: Option<SweepSummary>,
}

fn cmd_verify_counterexample(args: &VerifyArgs) -> Result<i32> {
    let (lo, hi) = admissible_r_interval(args.big_r, args.eps)?;
    let r = match args.r {
        Some(r) => {
            if !(r > lo && r < hi) {
                return Err(Error::InvalidArgument(format!(
                    "r = {r} lies outside ({lo}, {hi}), the sure rewards for which the \
                     value-space backup misranks the actions"
                )));
            }
            r
        }
        None => (lo + hi) / 2.0,
    };
    let report = verify_counterexample(args.big_r, r, args.gamma, args.eps, args.beta)?;

    let sweep = if args.sweep > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        let mut failed = Vec::new();
        for _ in 0..args.sweep {
            // log-uniform over (0.1, 1e6)
            let big_r = 10f64.powf(rng.gen_range(-1.0..6.0));
            let (lo, hi) = admissible_r_interval(big_r, args.eps)?;
            let case = verify_counterexample(big_r, (lo + hi) / 2.0, args.gamma, args.eps, args.beta)?;
            if !case.all_claims_hold {
                failed.push(big_r);
            }
        }
        Some(SweepSummary {
            cases: args.sweep,
            all_claims_hold: failed.is_empty(),
            failed_big_r: failed,
        })
    } else {
        None
    };

    let ok = report.all_claims_hold && sweep.as_ref().map_or(true, |s| s.all_claims_hold);
    let output = VerifyOutput { report, sweep };
    let text = serde_json::to_string_pretty(&output)?;
    println!("{text}");
    if let Some(path) = &args.out {
        write_text(path, &format!("{text}\n"))?;
    }
    Ok(if ok { 0 } else { 1 })
}

// ---------------------------------------------------------------------------
// equivalence
// ---------------------------------------------------------------------------

fn cmd_equivalence(args: &EquivalenceArgs) -> Result<i32> {
    if args.n_mdps == 0 {
        return Err(Error::InvalidArgument("need at least one MDP instance".into()));
    }
    if args.k_max == 0 {
        return Err(Error::InvalidArgument("iteration depth must be positive".into()));
    }
    let phi = Homeomorphism::scaled_h(1.99, 0.001)?;
    let identity = Homeomorphism::identity();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);

    let mut csv = String::from("idx,states,actions,rewards,expectation_dev,iterate_dev\n");
    let mut max_expectation = 0.0f64;
    let mut max_iterate = 0.0f64;
    for idx in 0..args.n_mdps {
        let n_states = rng.gen_range(2..=5);
        let n_actions = rng.gen_range(1..=3);
        let n_rewards = rng.gen_range(1..=4);

        // One-step check on a densely connected MDP: expectations of the
        // distributional backup equal the plain optimality backup of the
        // expectation table.
        let dense = random_mdp(
            &RandomMdpConfig {
                ensure_terminal: rng.gen_range(0..2) == 0,
                ..RandomMdpConfig::new(n_states, n_actions, n_rewards, 0.9)
            },
            &mut rng,
        );
        let eta = random_collection(n_states, n_actions, 8, -2.0, 2.0, &mut rng);
        let backed = distributional_backup(&dense, &eta)?;
        let expectation_dev = q_from_collection(&backed, &identity)?
            .sup_distance(&bellman_backup(&dense, &q_from_collection(&eta, &identity)?));

        // Deep iteration on a branching-capped MDP (exact supports stay
        // small): conjugated iterates track value iteration step for step.
        let sparse = random_mdp(
            &RandomMdpConfig {
                ensure_terminal: true,
                max_nonterminal_successors: Some(1),
                ..RandomMdpConfig::new(n_states, n_actions, n_rewards, 0.9)
            },
            &mut rng,
        );
        let mut xi = initial_collection(n_states, n_actions, &phi)?;
        let mut q = QFunction::zeros(n_states, n_actions);
        let mut iterate_dev = 0.0f64;
        for _ in 0..args.k_max {
            xi = conjugated_backup(&sparse, &xi, &phi, None)?;
            q = bellman_backup(&sparse, &q);
            iterate_dev = iterate_dev.max(q_from_collection(&xi, &phi)?.sup_distance(&q));
        }

        max_expectation = max_expectation.max(expectation_dev);
        max_iterate = max_iterate.max(iterate_dev);
        csv.push_str(&format!(
            "{idx},{n_states},{n_actions},{n_rewards},{expectation_dev},{iterate_dev}\n"
        ));
    }

    if let Some(path) = &args.out {
        write_text(path, &csv)?;
    }
    let ok = max_expectation <= EQUIVALENCE_TOLERANCE && max_iterate <= EQUIVALENCE_TOLERANCE;
    println!(
        "mdps={} k_max={} max_expectation_dev={:e} max_iterate_dev={:e} within_tolerance={}",
        args.n_mdps, args.k_max, max_expectation, max_iterate, ok
    );
    Ok(if ok { 0 } else { 1 })
}

// ---------------------------------------------------------------------------
// cramer-selftest
// ---------------------------------------------------------------------------

/// One failing property instance, serialized for diagnosis.
#[derive(Debug, Serialize)]
pub(crate) struct SelftestFailure {
    case: usize,
    check: &'static str,
    detail: String,
    mu_atoms: Vec<f64>,
    mu_masses: Vec<f64>,
    nu_atoms: Vec<f64>,
    nu_masses: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub(crate) struct SelftestSummary {
    cases: usize,
    gradient_checks: usize,
    max_symmetry_dev: f64,
    max_triangle_dev: f64,
    max_translation_dev: f64,
    max_scale_dev: f64,
    max_oracle_dev: f64,
    max_gradient_dev: f64,
}

const SELFTEST_GRID_STEP: f64 = 1e-5;

/// Random measure with up to `max_atoms` support points snapped to the
/// oracle grid inside [-100, 100].
fn random_snapped_measure<R: Rng>(rng: &mut R, max_atoms: usize) -> DiscreteMeasure {
    let n = rng.gen_range(1..=max_atoms);
    let slots = 100.0 / SELFTEST_GRID_STEP;
    let atoms: Vec<f64> = (0..n)
        .map(|_| rng.gen_range(-slots..=slots).round() * SELFTEST_GRID_STEP)
        .collect();
    let raw: Vec<f64> = (0..n).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let sum: f64 = raw.iter().sum();
    let masses: Vec<f64> = raw.iter().map(|g| g / sum).collect();
    DiscreteMeasure::new(atoms, masses).expect("random measure construction")
}

/// Riemann sum of the squared CDF difference on the fixed grid, evaluated
/// segment-wise: between consecutive support points the integrand is
/// constant, so the sum over grid points collapses to an exact per-segment
/// count. Coincides with the literal grid loop because every atom sits on
/// the grid.
fn grid_cramer_sq(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> f64 {
    let mut events: Vec<(f64, f64)> = mu
        .atoms()
        .iter()
        .zip(mu.masses())
        .map(|(&x, &p)| (x, p))
        .chain(nu.atoms().iter().zip(nu.masses()).map(|(&y, &q)| (y, -q)))
        .collect();
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut total = 0.0;
    let mut prefix = 0.0;
    let mut prev = f64::NAN;
    for &(w, delta) in &events {
        if prev.is_finite() && w > prev {
            let i0 = (prev / SELFTEST_GRID_STEP).round() as i64;
            let i1 = (w / SELFTEST_GRID_STEP).round() as i64;
            total += prefix * prefix * SELFTEST_GRID_STEP * (i1 - i0) as f64;
        }
        prefix += delta;
        prev = w;
    }
    total
}

fn min_support_gap(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> f64 {
    let mut all: Vec<f64> = mu.atoms().iter().chain(nu.atoms()).copied().collect();
    all.sort_by(f64::total_cmp);
    all.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
}

/// Runs the full property suite with an injectable distance (production
/// passes [`cramer_sq`]; tests inject faults to exercise failure
/// reporting).
pub(crate) fn run_cramer_selftest<D>(
    n_cases: usize,
    seed: u64,
    distance: D,
) -> std::result::Result<SelftestSummary, Box<SelftestFailure>>
where
    D: Fn(&DiscreteMeasure, &DiscreteMeasure) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = SelftestSummary {
        cases: n_cases,
        gradient_checks: 0,
        max_symmetry_dev: 0.0,
        max_triangle_dev: 0.0,
        max_translation_dev: 0.0,
        max_scale_dev: 0.0,
        max_oracle_dev: 0.0,
        max_gradient_dev: 0.0,
    };
    for case in 0..n_cases {
        let mu = random_snapped_measure(&mut rng, 32);
        let nu = random_snapped_measure(&mut rng, 32);
        let rho = random_snapped_measure(&mut rng, 32);
        let fail = |check: &'static str, detail: String| {
            Box::new(SelftestFailure {
                case,
                check,
                detail,
                mu_atoms: mu.atoms().to_vec(),
                mu_masses: mu.masses().to_vec(),
                nu_atoms: nu.atoms().to_vec(),
                nu_masses: nu.masses().to_vec(),
            })
        };

        let d_mu_nu = distance(&mu, &nu);
        // Identity of indiscernibles and nonnegativity.
        let self_d = distance(&mu, &mu);
        if self_d != 0.0 {
            return Err(fail("identity", format!("d(mu, mu) = {self_d}, expected exactly 0")));
        }
        if !(d_mu_nu >= 0.0) {
            return Err(fail("nonnegativity", format!("d(mu, nu) = {d_mu_nu}")));
        }
        if (mu.atoms() != nu.atoms() || mu.masses() != nu.masses()) && d_mu_nu == 0.0 {
            return Err(fail("positivity", "d = 0 for distinct measures".into()));
        }
        // Symmetry.
        let sym = (d_mu_nu - distance(&nu, &mu)).abs();
        summary.max_symmetry_dev = summary.max_symmetry_dev.max(sym);
        if sym > 1e-9 {
            return Err(fail("symmetry", format!("|d(mu,nu) - d(nu,mu)| = {sym:e}")));
        }
        // Triangle inequality for the (unsquared) distance.
        let tri = d_mu_nu.sqrt() - distance(&mu, &rho).sqrt() - distance(&rho, &nu).sqrt();
        summary.max_triangle_dev = summary.max_triangle_dev.max(tri);
        if tri > 1e-9 {
            return Err(fail("triangle", format!("violation by {tri:e}")));
        }
        // Translation invariance.
        let shift = rng.gen_range(-50.0..50.0);
        let d_shifted = distance(
            &mu.pushforward(|x| x + shift).expect("shift"),
            &nu.pushforward(|x| x + shift).expect("shift"),
        );
        let trans = (d_shifted - d_mu_nu).abs();
        summary.max_translation_dev = summary.max_translation_dev.max(trans);
        if trans > 1e-9 {
            return Err(fail("translation", format!("shift {shift}: |Δ| = {trans:e}")));
        }
        // Positive scaling contracts the squared distance linearly.
        let scale = rng.gen_range(0.05..1.0);
        let d_scaled = distance(
            &mu.pushforward(|x| scale * x).expect("scale"),
            &nu.pushforward(|x| scale * x).expect("scale"),
        );
        let sc = (d_scaled - scale * d_mu_nu).abs();
        summary.max_scale_dev = summary.max_scale_dev.max(sc);
        if sc > 1e-9 {
            return Err(fail("scale", format!("factor {scale}: |Δ| = {sc:e}")));
        }
        // Grid oracle.
        let oracle = grid_cramer_sq(&mu, &nu);
        let dev = (d_mu_nu - oracle).abs();
        summary.max_oracle_dev = summary.max_oracle_dev.max(dev);
        if dev > 1e-6 {
            return Err(fail("oracle", format!("exact {d_mu_nu} vs grid {oracle}")));
        }
        // Gradient spot checks on kink-free fixtures: one atom coordinate
        // and one mass-exchange direction (stays on the unit-mass
        // manifold).
        if min_support_gap(&mu, &nu) > 1e-3 && mu.len() >= 2 {
            summary.gradient_checks += 1;
            let (d_atoms, d_masses) = cramer_sq_grad(&mu, &nu);
            let h = 1e-6;
            let i = rng.gen_range(0..mu.len());
            let probe = |delta: f64| {
                let mut atoms = mu.atoms().to_vec();
                atoms[i] += delta;
                distance(&DiscreteMeasure::new(atoms, mu.masses().to_vec()).expect("probe"), &nu)
            };
            let fd = (probe(h) - probe(-h)) / (2.0 * h);
            let dev_a = (fd - d_atoms[i]).abs() / d_atoms[i].abs().max(fd.abs()).max(1e-3);
            summary.max_gradient_dev = summary.max_gradient_dev.max(dev_a);
            if dev_a > 1e-3 {
                return Err(fail(
                    "gradient-atom",
                    format!("index {i}: analytic {} vs fd {fd}", d_atoms[i]),
                ));
            }
            let j = (i + 1) % mu.len();
            let probe_mass = |delta: f64| {
                let mut masses = mu.masses().to_vec();
                masses[i] += delta;
                masses[j] -= delta;
                distance(&DiscreteMeasure::new(mu.atoms().to_vec(), masses).expect("probe"), &nu)
            };
            let fd_m = (probe_mass(h) - probe_mass(-h)) / (2.0 * h);
            let analytic_m = d_masses[i] - d_masses[j];
            let dev_m = (fd_m - analytic_m).abs() / analytic_m.abs().max(fd_m.abs()).max(1e-3);
            summary.max_gradient_dev = summary.max_gradient_dev.max(dev_m);
            if dev_m > 1e-3 {
                return Err(fail(
                    "gradient-mass",
                    format!("exchange {i}->{j}: analytic {analytic_m} vs fd {fd_m}"),
                ));
            }
        }
    }
    Ok(summary)
}

fn cmd_cramer_selftest(args: &CramerArgs) -> Result<i32> {
    if args.n_cases == 0 {
        return Err(Error::InvalidArgument("need at least one case".into()));
    }
    match run_cramer_selftest(args.n_cases, args.seed, cramer_sq) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(0)
        }
        Err(failure) => {
            println!("{}", serde_json::to_string_pretty(&failure)?);
            Ok(1)
        }
    }
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Which episodic environment a training run uses.
///
/// Serialization goes through [`EnvSpecWire`] because on internally tagged
/// enums serde skips unknown-field rejection, and config typos should fail
/// loudly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "EnvSpecWire", into = "EnvSpecWire")]
pub enum EnvSpec {
    /// Built-in 5-state stochastic chain.
    Chain,
    /// Two-action risky/safe MDP with a half-chance reward of `big_r`
    /// against a sure reward of `r`.
    Counterexample { big_r: f64, r: f64 },
    /// Any MDP loaded from a JSON file, starting episodes at `start`.
    MdpFile { path: PathBuf, start: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum EnvKind {
    Chain,
    Counterexample,
    MdpFile,
}

/// Flat wire form of [`EnvSpec`]: a `kind` tag plus every variant field as
/// an option, so strict field checking works.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnvSpecWire {
    kind: EnvKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    big_r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    start: Option<usize>,
}

impl TryFrom<EnvSpecWire> for EnvSpec {
    type Error = String;

    fn try_from(wire: EnvSpecWire) -> std::result::Result<Self, String> {
        fn require<T>(field: Option<T>, name: &str, kind: &str) -> std::result::Result<T, String> {
            field.ok_or_else(|| format!("env kind '{kind}' requires field '{name}'"))
        }
        fn forbid<T>(field: &Option<T>, name: &str, kind: &str) -> std::result::Result<(), String> {
            if field.is_some() {
                Err(format!("env kind '{kind}' does not accept field '{name}'"))
            } else {
                Ok(())
            }
        }
        match wire.kind {
            EnvKind::Chain => {
                forbid(&wire.big_r, "big_r", "chain")?;
                forbid(&wire.r, "r", "chain")?;
                forbid(&wire.path, "path", "chain")?;
                forbid(&wire.start, "start", "chain")?;
                Ok(EnvSpec::Chain)
            }
            EnvKind::Counterexample => {
                forbid(&wire.path, "path", "counterexample")?;
                forbid(&wire.start, "start", "counterexample")?;
                Ok(EnvSpec::Counterexample {
                    big_r: require(wire.big_r, "big_r", "counterexample")?,
                    r: require(wire.r, "r", "counterexample")?,
                })
            }
            EnvKind::MdpFile => {
                forbid(&wire.big_r, "big_r", "mdp_file")?;
                forbid(&wire.r, "r", "mdp_file")?;
                Ok(EnvSpec::MdpFile {
                    path: require(wire.path, "path", "mdp_file")?,
                    start: require(wire.start, "start", "mdp_file")?,
                })
            }
        }
    }
}

impl From<EnvSpec> for EnvSpecWire {
    fn from(spec: EnvSpec) -> Self {
        let empty = EnvSpecWire {
            kind: EnvKind::Chain,
            big_r: None,
            r: None,
            path: None,
            start: None,
        };
        match spec {
            EnvSpec::Chain => empty,
            EnvSpec::Counterexample { big_r, r } => EnvSpecWire {
                kind: EnvKind::Counterexample,
                big_r: Some(big_r),
                r: Some(r),
                ..empty
            },
            EnvSpec::MdpFile { path, start } => EnvSpecWire {
                kind: EnvKind::MdpFile,
                path: Some(path),
                start: Some(start),
                ..empty
            },
        }
    }
}

/// Everything `train` needs: the environment, the seed list, and the
/// learner configuration applied to every seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub trainer: TrainerConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: serde_json::Value = serde_json::from_str(text)?;
        Ok(serde_json::from_value(doc)?)
    }

    /// Builds the MDP this experiment trains on; the start state is 0 for
    /// the built-in environments.
    pub fn build_mdp(&self) -> Result<(FiniteMdp, usize)> {
        match &self.env {
            EnvSpec::Chain => {
                let mdp = stochastic_chain_mdp();
                if self.trainer.gamma != mdp.gamma {
                    return Err(Error::InvalidArgument(format!(
                        "chain environment discount is {}, trainer discount is {}",
                        mdp.gamma, self.trainer.gamma
                    )));
                }
                Ok((mdp, 0))
            }
            EnvSpec::Counterexample { big_r, r } => Ok((
                build_counterexample(*big_r, *r, self.trainer.gamma, self.trainer.eps_h)?,
                0,
            )),
            EnvSpec::MdpFile { path, start } => {
                let mdp = FiniteMdp::load(path)?;
                if self.trainer.gamma != mdp.gamma {
                    return Err(Error::InvalidArgument(format!(
                        "environment discount is {}, trainer discount is {}",
                        mdp.gamma, self.trainer.gamma
                    )));
                }
                Ok((mdp, *start))
            }
        }
    }
}

/// Applies `key=value` with dotted keys onto a JSON document, creating
/// intermediate objects as needed. Values parse as JSON and fall back to
/// plain strings.
pub fn apply_override(doc: &mut serde_json::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| {
        Error::InvalidArgument(format!("override '{assignment}' is not of the form key=value"))
    })?;
    if key.is_empty() {
        return Err(Error::InvalidArgument(format!("override '{assignment}' has an empty key")));
    }
    let value: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = doc;
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "override path '{key}' crosses a non-object value at '{part}'"
            ))
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("override key has at least one part");
}

#[derive(Debug, Serialize)]
struct SeedReport {
    seed: u64,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    episodes: u64,
    steps: u64,
    policy_match: bool,
    /// Greatest |Q̂ − Q*| over state-action pairs with at least
    /// [`VISIT_THRESHOLD`] visits; absent when nothing qualified.
    #[serde(skip_serializing_if = "Option::is_none")]
    max_q_err_visited: Option<f64>,
    greedy: Vec<usize>,
    q_hat: Vec<f64>,
    alpha_final: f64,
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    env: EnvSpec,
    gamma: f64,
    total_steps: u64,
    seeds: Vec<u64>,
    q_star: Vec<f64>,
    oracle_greedy: Vec<usize>,
    per_seed: Vec<SeedReport>,
    /// Fraction of seeds whose final greedy policy matches the oracle on
    /// every non-terminal state.
    policy_agreement: f64,
}

fn cmd_train(args: &TrainArgs) -> Result<i32> {
    let text = std::fs::read_to_string(&args.config)?;
    let mut doc: serde_json::Value = serde_json::from_str(&text)?;
    for assignment in &args.set {
        apply_override(&mut doc, assignment)?;
    }
    if let Some(steps) = args.steps {
        apply_override(&mut doc, &format!("trainer.total_steps={steps}"))?;
    }
    let config: ExperimentConfig = serde_json::from_value(doc)?;
    if config.seeds.is_empty() {
        return Err(Error::InvalidArgument("seed list must not be empty".into()));
    }
    config.trainer.validate()?;
    let (mdp, start) = config.build_mdp()?;
    std::fs::create_dir_all(&args.out)?;

    let (q_star, _) = value_iteration(&mdp, 1e-12, 1_000_000)?;
    let oracle_greedy: Vec<usize> = (0..mdp.n_states).map(|s| q_star.argmax_action(s)).collect();

    // Independent seeds fan out across workers; reports are assembled in
    // seed order so output bytes never depend on scheduling.
    let n_jobs = config.seeds.len();
    let workers = worker_count(n_jobs);
    let results: Mutex<Vec<Option<Result<crate::trainer::TrainOutcome>>>> =
        Mutex::new((0..n_jobs).map(|_| None).collect());
    let next_job = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let job = next_job.fetch_add(1, Ordering::Relaxed);
                if job >= n_jobs {
                    break;
                }
                let cfg = TrainerConfig { seed: config.seeds[job], ..config.trainer.clone() };
                let outcome = EpisodicEnv::new(mdp.clone(), start, cfg.max_episode_steps)
                    .and_then(|mut env| train(&mut env, &cfg));
                results.lock().expect("no worker panicked")[job] = Some(outcome);
            });
        }
    });
    let results = results.into_inner().expect("no worker panicked");

    let mut per_seed = Vec::with_capacity(n_jobs);
    let mut finished_rows: Vec<Vec<EpisodeRow>> = Vec::new();
    let mut matches = 0usize;
    let mut diverged = false;
    for (job, outcome) in results.into_iter().enumerate() {
        let seed = config.seeds[job];
        match outcome.expect("every job ran") {
            Ok(out) => {
                write_text(
                    &args.out.join(format!("seed_{seed}.csv")),
                    &learning_record_csv(&out.rows),
                )?;
                let policy_match = (0..mdp.n_states)
                    .filter(|&s| !mdp.terminal[s])
                    .all(|s| out.greedy.action(s) == oracle_greedy[s]);
                if policy_match {
                    matches += 1;
                }
                let mut max_q_err: Option<f64> = None;
                for s in 0..mdp.n_states {
                    for a in 0..mdp.n_actions {
                        if out.visits[s * mdp.n_actions + a] >= VISIT_THRESHOLD {
                            let err = (out.q_hat.get(s, a) - q_star.get(s, a)).abs();
                            max_q_err = Some(max_q_err.map_or(err, |m: f64| m.max(err)));
                        }
                    }
                }
                println!(
                    "seed {seed}: episodes {} policy_match {policy_match} max_q_err_visited {}",
                    out.episodes,
                    max_q_err.map_or("n/a".to_string(), |e| format!("{e}")),
                );
                per_seed.push(SeedReport {
                    seed,
                    status: "ok",
                    error: None,
                    episodes: out.episodes,
                    steps: out.steps,
                    policy_match,
                    max_q_err_visited: max_q_err,
                    greedy: (0..mdp.n_states).map(|s| out.greedy.action(s)).collect(),
                    q_hat: out.q_hat.values().to_vec(),
                    alpha_final: out.params.alpha(),
                });
                finished_rows.push(out.rows);
            }
            Err(e) => {
                eprintln!("seed {seed}: {e}");
                diverged = true;
                per_seed.push(SeedReport {
                    seed,
                    status: "failed",
                    error: Some(e.to_string()),
                    episodes: 0,
                    steps: 0,
                    policy_match: false,
                    max_q_err_visited: None,
                    greedy: Vec::new(),
                    q_hat: Vec::new(),
                    alpha_final: f64::NAN,
                });
            }
        }
    }
    write_text(&args.out.join("aggregate.csv"), &aggregate_csv(&finished_rows))?;

    let summary = TrainSummary {
        env: config.env.clone(),
        gamma: config.trainer.gamma,
        total_steps: config.trainer.total_steps,
        seeds: config.seeds.clone(),
        q_star: q_star.values().to_vec(),
        oracle_greedy,
        per_seed,
        policy_agreement: matches as f64 / n_jobs as f64,
    };
    write_text(
        &args.out.join("summary.json"),
        &format!("{}\n", serde_json::to_string_pretty(&summary)?),
    )?;
    println!("policy_agreement {}", summary.policy_agreement);
    Ok(if diverged { 1 } else { 0 })
}

/// Serializes a learning record with one row per episode. Episodes without
/// optimizer updates leave the mean-loss field empty.
fn learning_record_csv(rows: &[EpisodeRow]) -> String {
    let mut csv =
        String::from("step,episode,return,mean_loss,epsilon,alpha,support_min,support_max\n");
    for row in rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            row.step,
            row.episode,
            row.ret,
            row.mean_loss.map_or(String::new(), |l| l.to_string()),
            row.epsilon,
            row.alpha,
            row.support_min,
            row.support_max
        ));
    }
    csv
}

/// Episode-indexed mean/min/max of return across seeds, truncated to the
/// shortest seed record.
fn aggregate_csv(per_seed_rows: &[Vec<EpisodeRow>]) -> String {
    let mut csv = String::from("episode,mean_return,min_return,max_return\n");
    let n = per_seed_rows.iter().map(Vec::len).min().unwrap_or(0);
    for i in 0..n {
        let returns: Vec<f64> = per_seed_rows.iter().map(|rows| rows[i].ret).collect();
        let mean = returns.iter().sum::<f64>() / returns.len() as f64;
        let min = returns.iter().fold(f64::INFINITY, |m, &v| m.min(v));
        let max = returns.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        csv.push_str(&format!("{},{mean},{min},{max}\n", i + 1));
    }
    csv
}

fn worker_count(n_jobs: usize) -> usize {
    let hardware = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let cap = std::env::var("CONDIST_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(hardware);
    cap.min(n_jobs.max(1))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}
