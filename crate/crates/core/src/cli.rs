//! Command-line front end: dataset collection, world-model and policy
//! training, synthetic rollouts, evaluation, full ablation pipelines,
//! self-verification, and report generation.
//!
//! Every config key doubles as a long flag (`--policy.alpha 0.5`), applied
//! on top of `--config <file>` and the `LOGO_OUT` environment variable.
//! Runs land in `<out>/<experiment>/<seed>/` with fixed file names.
//!
//! Exit codes: 0 success; 2 bad flags or config (the error line names the
//! offending field); 3 missing prerequisite artifact; 1 anything else.
//! Errors are single `error[kind]: message` lines on stderr.

use std::path::{Path, PathBuf};

use clap::error::{ContextKind, ContextValue, ErrorKind};
use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::config::{self, ConfigError, ExperimentConfig};
use crate::dataset::{self, Dataset, Transition};
use crate::env::EnvSpec;
use crate::oracle::{
    self, successor_reward_mdp, theorem1_check, value_iteration, DirectConfig, ErrorInjection,
    VI_TOL,
};
use crate::policy::{self, bellman_target, PolicyBundle};
use crate::report::{self, MetricRow};
use crate::rng::derive_seed;
use crate::rollout::{self, SyntheticBuffer};
use crate::stats;
use crate::tensor::finite_diff_check;
use crate::world::{self, WorldModelBundle};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERR: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING: i32 = 3;

/// Relative gradient error ceiling and the number of random probe points
/// used by `verify`.
pub const FD_TOLERANCE: f64 = 1e-4;
pub const FD_POINTS: usize = 10;
/// L1 ceiling for the sampling-frequency checks, over this many draws.
pub const SAMPLING_TOLERANCE: f64 = 0.01;
pub const SAMPLING_DRAWS: usize = 1_000_000;

enum CmdError {
    /// Exit 2: the message names the offending key or flag.
    Config(String),
    /// Exit 3: a pipeline stage ran before its input existed.
    Missing { path: PathBuf, hint: &'static str },
    /// Exit 1: everything else.
    Run(String),
}

impl From<ConfigError> for CmdError {
    fn from(e: ConfigError) -> Self {
        CmdError::Config(e.to_string())
    }
}

fn run_err(e: impl std::fmt::Display) -> CmdError {
    CmdError::Run(e.to_string())
}

/// Fixed file layout of one `<out>/<experiment>/<seed>/` directory.
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Self {
        RunPaths {
            dir: Path::new(&cfg.run.out).join(&cfg.run.experiment).join(seed.to_string()),
        }
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join(report::CONFIG_FILE)
    }

    pub fn dataset(&self) -> PathBuf {
        self.dir.join(report::DATASET_FILE)
    }

    pub fn world(&self) -> PathBuf {
        self.dir.join(report::WM_FILE)
    }

    pub fn synthetic(&self) -> PathBuf {
        self.dir.join(report::SYNTHETIC_FILE)
    }

    pub fn policy(&self) -> PathBuf {
        self.dir.join(report::POLICY_FILE)
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join(report::METRICS_FILE)
    }

    pub fn timing(&self) -> PathBuf {
        self.dir.join(report::TIMING_FILE)
    }

    pub fn world_log(&self) -> PathBuf {
        self.dir.join(report::WM_LOG_FILE)
    }

    pub fn policy_log(&self) -> PathBuf {
        self.dir.join(report::POLICY_LOG_FILE)
    }
}

fn with_overrides(cmd: Command) -> Command {
    let mut cmd = cmd
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("config file applied before flag overrides"),
        )
        .arg(Arg::new("tier").long("tier").value_name("TIER").help("alias for data.tier"))
        .arg(
            Arg::new("episodes")
                .long("episodes")
                .value_name("N")
                .help("alias for data.episodes"),
        )
        .arg(Arg::new("seed").long("seed").value_name("SEED").help("run a single seed"))
        .arg(Arg::new("out").long("out").value_name("DIR").help("alias for run.out"))
        .arg(
            Arg::new("experiment")
                .long("experiment")
                .value_name("NAME")
                .help("alias for run.experiment"),
        );
    for key in config::KEYS {
        cmd = cmd.arg(
            Arg::new(*key)
                .long(*key)
                .value_name("VALUE")
                .action(ArgAction::Set)
                .help_heading("Config overrides"),
        );
    }
    cmd
}

fn build_command() -> Command {
    let sub = |name: &'static str, about: &'static str| with_overrides(Command::new(name).about(about));
    Command::new("logo")
        .about("local-to-global world models for offline multi-agent RL")
        .subcommand_required(true)
        .subcommand(sub("collect", "sample an offline dataset per seed"))
        .subcommand(sub("train-wm", "train the world model on a collected dataset"))
        .subcommand(sub("rollout", "generate a synthetic buffer and dump it"))
        .subcommand(sub("train-policy", "train the conservative policy"))
        .subcommand(sub("evaluate", "roll the trained policy in the live environment"))
        .subcommand(sub("ablate", "run the whole pipeline per seed with the configured switches"))
        .subcommand(sub("verify", "run gradient, bound, and sampling self-checks"))
        .subcommand(sub("report", "fold finished runs into summary tables"))
}

/// Defaults → `LOGO_OUT` → `--config` file → `--section.key` flags →
/// alias flags, validated at the end.
fn resolve_config(sub: &ArgMatches, env_out: Option<&str>) -> Result<ExperimentConfig, CmdError> {
    let mut cfg = ExperimentConfig::default();
    if let Some(out) = env_out {
        cfg.run.out = out.to_string();
    }
    if let Some(path) = sub.get_one::<String>("config") {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CmdError::Config(format!("{path}: {e}")))?;
        cfg.apply_text(&text)?;
    }
    for key in config::KEYS {
        if let Some(value) = sub.get_one::<String>(key) {
            cfg.set(key, value)?;
        }
    }
    let aliases =
        [("tier", "data.tier"), ("episodes", "data.episodes"), ("seed", "run.seeds"), ("out", "run.out"), ("experiment", "run.experiment")];
    for (alias, key) in aliases {
        if let Some(value) = sub.get_one::<String>(alias) {
            cfg.set(key, value)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run_command<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let matches = match build_command().try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => return clap_exit(e),
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let env_out = std::env::var("LOGO_OUT").ok();
    let result = resolve_config(sub, env_out.as_deref()).and_then(|cfg| match name {
        "collect" => cmd_collect(&cfg),
        "train-wm" => cmd_train_wm(&cfg),
        "rollout" => cmd_rollout(&cfg),
        "train-policy" => cmd_train_policy(&cfg),
        "evaluate" => cmd_evaluate(&cfg),
        "ablate" => cmd_ablate(&cfg),
        "verify" => cmd_verify(&cfg),
        "report" => cmd_report(&cfg),
        other => unreachable!("unhandled subcommand {other}"),
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(CmdError::Config(m)) => {
            eprintln!("error[config]: {m}");
            EXIT_CONFIG
        }
        Err(CmdError::Missing { path, hint }) => {
            eprintln!("error[missing]: {} ({hint})", path.display());
            EXIT_MISSING
        }
        Err(CmdError::Run(m)) => {
            eprintln!("error[run]: {m}");
            EXIT_ERR
        }
    }
}

fn clap_exit(e: clap::Error) -> i32 {
    if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
        print!("{e}");
        return EXIT_OK;
    }
    let offender = e
        .get(ContextKind::InvalidArg)
        .or_else(|| e.get(ContextKind::InvalidSubcommand))
        .and_then(|v| match v {
            ContextValue::String(s) => Some(s.clone()),
            _ => None,
        });
    match offender {
        Some(s) => eprintln!("error[config]: unrecognized or misused argument `{s}`"),
        None => eprintln!(
            "error[config]: {}",
            e.kind().as_str().unwrap_or("invalid arguments")
        ),
    }
    EXIT_CONFIG
}

fn need(path: PathBuf, hint: &'static str) -> Result<PathBuf, CmdError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CmdError::Missing { path, hint })
    }
}

fn prepare_dir(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<(), CmdError> {
    std::fs::create_dir_all(&paths.dir).map_err(run_err)?;
    cfg.save(&paths.config()).map_err(run_err)
}

fn load_dataset(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<Dataset, CmdError> {
    let path = need(paths.dataset(), "run `logo collect` first")?;
    dataset::load_for(&path, &cfg.spec())
        .map_err(|e| CmdError::Run(format!("{}: {e}", path.display())))
}

fn load_world(paths: &RunPaths) -> Result<WorldModelBundle, CmdError> {
    let path = need(paths.world(), "run `logo train-wm` first")?;
    world::load(&path).map_err(|e| CmdError::Run(format!("{}: {e}", path.display())))
}

fn collect_one(cfg: &ExperimentConfig, seed: u64) -> Result<(), CmdError> {
    let paths = RunPaths::new(cfg, seed);
    prepare_dir(cfg, &paths)?;
    let ds = dataset::collect(&cfg.spec(), cfg.data.tier, cfg.data.episodes, seed);
    dataset::save(&ds, &paths.dataset()).map_err(run_err)?;
    println!(
        "collect experiment={} seed={seed} tier={} episodes={} transitions={} -> {}",
        cfg.run.experiment,
        cfg.data.tier.name(),
        cfg.data.episodes,
        ds.len(),
        paths.dataset().display()
    );
    Ok(())
}

fn train_wm_one(cfg: &ExperimentConfig, seed: u64) -> Result<(), CmdError> {
    let paths = RunPaths::new(cfg, seed);
    prepare_dir(cfg, &paths)?;
    let ds = load_dataset(cfg, &paths)?;
    let (train, val) = dataset::split(&ds, cfg.data.val_fraction, seed);
    let out = world::train_world_model(&train, &val, &cfg.world_cfg(seed)).map_err(run_err)?;
    world::save(&out.bundle, &paths.world()).map_err(run_err)?;
    report::write_world_log(&paths.world_log(), &out.log).map_err(run_err)?;
    let val_mse = out.log.val.last().map(|(_, m)| *m).unwrap_or(f64::NAN);
    report::merge_metrics(
        &paths.metrics(),
        &[MetricRow { metric: "wm_val_mse".into(), index: 0, value: val_mse }],
    )
    .map_err(run_err)?;
    println!(
        "train-wm experiment={} seed={seed} steps={} val_mse={val_mse} c_clip={} -> {}",
        cfg.run.experiment,
        cfg.wm.steps,
        out.bundle.c_clip.unwrap_or(f64::NAN),
        paths.world().display()
    );
    Ok(())
}

/// Resolves the priority clip: an explicit `rollout.clip` wins, otherwise
/// the world model's calibrated constant.
fn resolve_clip(cfg: &ExperimentConfig, wm: &WorldModelBundle) -> Result<f64, CmdError> {
    cfg.rollout.clip.or(wm.c_clip).ok_or_else(|| {
        CmdError::Run("world model has no calibrated clip constant; set rollout.clip".into())
    })
}

fn rollout_one(cfg: &ExperimentConfig, seed: u64) -> Result<(), CmdError> {
    let paths = RunPaths::new(cfg, seed);
    prepare_dir(cfg, &paths)?;
    let ds = load_dataset(cfg, &paths)?;
    let wm = load_world(&paths)?;
    let bundle = if paths.policy().exists() {
        policy::load(&paths.policy()).map_err(run_err)?
    } else {
        PolicyBundle::new(
            cfg.spec(),
            cfg.policy.hidden,
            cfg.policy.alpha,
            cfg.policy.lambda_bc,
            cfg.policy.tau,
            seed,
        )
    };
    let clip = resolve_clip(cfg, &wm)?;
    let buffer = rollout::generate_rollouts(&wm, &bundle, &ds, &cfg.rollout_cfg(clip), seed);
    let synthetic = rollout::buffer_to_dataset(&buffer, &cfg.spec());
    dataset::save(&synthetic, &paths.synthetic()).map_err(run_err)?;
    let mean_u = stats::mean(buffer.uncertainties());
    let mean_p = stats::mean(&buffer.priorities());
    println!(
        "rollout experiment={} seed={seed} transitions={} clip={clip} mean_u={mean_u} mean_priority={mean_p} -> {}",
        cfg.run.experiment,
        buffer.len(),
        paths.synthetic().display()
    );
    Ok(())
}

/// Whether policy training needs the world model under the configured
/// ablation switches.
fn policy_needs_world(cfg: &ExperimentConfig) -> bool {
    !cfg.ablate.disable_buffer || cfg.ablate.mpc
}

fn train_policy_one(cfg: &ExperimentConfig, seed: u64) -> Result<(), CmdError> {
    let paths = RunPaths::new(cfg, seed);
    prepare_dir(cfg, &paths)?;
    let ds = load_dataset(cfg, &paths)?;
    let wm = if policy_needs_world(cfg) { Some(load_world(&paths)?) } else { None };
    let out = policy::train_policy(&ds, wm.as_ref(), &cfg.policy_cfg(seed)).map_err(run_err)?;
    policy::save(&out.bundle, &paths.policy()).map_err(run_err)?;
    report::write_policy_log(&paths.policy_log(), &out.log).map_err(run_err)?;
    let final_eval = out.log.evals.last().map(|(_, m)| *m).unwrap_or(f64::NAN);
    println!(
        "train-policy experiment={} seed={seed} steps={} buffer={} train_eval={final_eval} -> {}",
        cfg.run.experiment,
        cfg.policy.steps,
        out.buffer.len(),
        paths.policy().display()
    );
    Ok(())
}

fn evaluate_one(cfg: &ExperimentConfig, seed: u64) -> Result<(), CmdError> {
    let paths = RunPaths::new(cfg, seed);
    prepare_dir(cfg, &paths)?;
    let path = need(paths.policy(), "run `logo train-policy` first")?;
    let bundle = policy::load(&path).map_err(run_err)?;
    let rep = policy::evaluate(&bundle, &cfg.spec(), cfg.policy.eval_episodes, seed);
    report::merge_metrics(&paths.metrics(), &report::eval_return_rows(&rep.returns))
        .map_err(run_err)?;
    println!(
        "evaluate experiment={} seed={seed} episodes={} mean={} std={} -> {}",
        cfg.run.experiment,
        rep.returns.len(),
        rep.mean,
        rep.std,
        paths.metrics().display()
    );
    Ok(())
}

/// Trains the size-matched single-network baseline on the same split and
/// records its held-out MSE next to the world model's, plus the rank
/// correlation between `u` and the true per-transition state error.
fn direct_one(cfg: &ExperimentConfig, seed: u64) -> Result<(), CmdError> {
    let paths = RunPaths::new(cfg, seed);
    let ds = load_dataset(cfg, &paths)?;
    let wm = load_world(&paths)?;
    let (train, val) = dataset::split(&ds, cfg.data.val_fraction, seed);
    let width = oracle::direct_width_for(&cfg.spec(), wm.param_count());
    let direct_cfg = DirectConfig {
        steps: cfg.wm.steps,
        batch: cfg.wm.batch,
        lr: cfg.wm.lr,
        width,
        seed,
    };
    let direct = oracle::train_direct_model(&train, &val, &direct_cfg).map_err(run_err)?;
    let wm_val = world::validation_state_mse(&wm, &val).map_err(run_err)?;
    let spearman =
        stats::spearman(&world::uncertainties(&wm, &val), &world::state_errors(&wm, &val));
    report::merge_metrics(
        &paths.metrics(),
        &[
            MetricRow { metric: "wm_val_mse".into(), index: 0, value: wm_val },
            MetricRow { metric: "direct_val_mse".into(), index: 0, value: direct.val_mse },
            MetricRow { metric: "spearman_u".into(), index: 0, value: spearman },
        ],
    )
    .map_err(run_err)?;
    println!(
        "direct experiment={} seed={seed} width={width} wm_val_mse={wm_val} direct_val_mse={} spearman_u={spearman}",
        cfg.run.experiment, direct.val_mse
    );
    Ok(())
}

/// Times chained mean-mode inference of the trained bundle against an
/// untrained size-matched ensemble (inference cost does not depend on the
/// weights). Wall-clock seconds land in `timing.csv`, which is excluded
/// from the bitwise-determinism guarantee.
fn timing_one(cfg: &ExperimentConfig, seed: u64) -> Result<(), CmdError> {
    let paths = RunPaths::new(cfg, seed);
    let ds = load_dataset(cfg, &paths)?;
    let wm = load_world(&paths)?;
    let (train, val) = dataset::split(&ds, cfg.data.val_fraction, seed);
    let direct_cfg = DirectConfig {
        steps: 0,
        batch: cfg.wm.batch,
        lr: cfg.wm.lr,
        width: oracle::direct_width_for(&cfg.spec(), wm.param_count()),
        seed,
    };
    let k = cfg.ablate.ensemble_k;
    let ens = oracle::train_ensemble(&train, &val, &direct_cfg, k).map_err(run_err)?;
    let (traj, steps, reps) = (100, 10, 3);
    let t_logo =
        oracle::time_bundle_rollout(&wm, &ds, traj, steps, reps, seed).as_secs_f64();
    let t_ens =
        oracle::time_ensemble_rollout(&ens.ensemble, &ds, traj, steps, reps, seed).as_secs_f64();
    report::write_metrics(
        &paths.timing(),
        &[
            MetricRow { metric: "time_logo".into(), index: 0, value: t_logo },
            MetricRow { metric: "time_ensemble".into(), index: 0, value: t_ens },
        ],
    )
    .map_err(run_err)?;
    println!(
        "timing experiment={} seed={seed} trajectories={traj} steps={steps} logo={t_logo}s ensemble{k}={t_ens}s",
        cfg.run.experiment
    );
    Ok(())
}

fn for_each_seed(
    cfg: &ExperimentConfig,
    f: impl Fn(&ExperimentConfig, u64) -> Result<(), CmdError>,
) -> Result<(), CmdError> {
    for &seed in &cfg.run.seeds {
        f(cfg, seed)?;
    }
    Ok(())
}

fn cmd_collect(cfg: &ExperimentConfig) -> Result<(), CmdError> {
    for_each_seed(cfg, collect_one)
}

fn cmd_train_wm(cfg: &ExperimentConfig) -> Result<(), CmdError> {
    for_each_seed(cfg, train_wm_one)
}

fn cmd_rollout(cfg: &ExperimentConfig) -> Result<(), CmdError> {
    for_each_seed(cfg, rollout_one)
}

fn cmd_train_policy(cfg: &ExperimentConfig) -> Result<(), CmdError> {
    for_each_seed(cfg, train_policy_one)
}

fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<(), CmdError> {
    for_each_seed(cfg, evaluate_one)
}

fn cmd_ablate(cfg: &ExperimentConfig) -> Result<(), CmdError> {
    for_each_seed(cfg, |cfg, seed| {
        collect_one(cfg, seed)?;
        if policy_needs_world(cfg) || cfg.ablate.direct_state || cfg.ablate.timing {
            train_wm_one(cfg, seed)?;
        }
        train_policy_one(cfg, seed)?;
        evaluate_one(cfg, seed)?;
        if cfg.ablate.direct_state {
            direct_one(cfg, seed)?;
        }
        if cfg.ablate.timing {
            timing_one(cfg, seed)?;
        }
        Ok(())
    })
}

fn cmd_report(cfg: &ExperimentConfig) -> Result<(), CmdError> {
    let root = PathBuf::from(&cfg.run.out);
    need(root.clone(), "run `logo ablate` (or the pipeline commands) first")?;
    report::write_report(&root).map_err(run_err)?;
    for name in ["report.csv", "report.txt", "pca.csv"] {
        println!("report -> {}", root.join(name).display());
    }
    Ok(())
}

fn cmd_verify(cfg: &ExperimentConfig) -> Result<(), CmdError> {
    let seed = cfg.run.seeds[0];
    let checks = verify_checks(seed, FD_POINTS);
    let mut failed = 0;
    for c in &checks {
        println!("{} {} ({})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
        if !c.pass {
            failed += 1;
        }
    }
    let root = PathBuf::from(&cfg.run.out);
    std::fs::create_dir_all(&root).map_err(run_err)?;
    let path = root.join("verify.csv");
    let mut w = csv::Writer::from_path(&path).map_err(run_err)?;
    w.write_record(["check", "result", "detail"]).map_err(run_err)?;
    for c in &checks {
        w.write_record([c.name, if c.pass { "pass" } else { "fail" }, &c.detail])
            .map_err(run_err)?;
    }
    w.flush().map_err(run_err)?;
    println!("verify checks={} failed={failed} -> {}", checks.len(), path.display());
    if failed > 0 {
        return Err(CmdError::Run(format!("{failed} verification checks failed")));
    }
    Ok(())
}

pub struct VerifyCheck {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn small_spec() -> EnvSpec {
    EnvSpec::particle(2, 10, 0.99, 1.0)
}

fn probe_batch(spec: &EnvSpec, seed: u64) -> dataset::Batch {
    let ds = dataset::collect(spec, dataset::Tier::Medium, 1, seed);
    let refs: Vec<&Transition> = ds.transitions.iter().take(3).collect();
    dataset::make_batch(spec, &refs)
}

/// Max relative finite-difference error of each world-model loss term over
/// `points` random (weights, batch, noise) draws. Terms are checked in
/// isolation by re-rooting the shared tape.
fn world_gradient_errors(seed: u64, points: usize) -> [f64; 5] {
    let spec = small_spec();
    let mut worst = [0.0f64; 5];
    for p in 0..points {
        let point_seed = derive_seed(seed, &format!("verify/world/{p}"));
        let mut bundle = WorldModelBundle::new(spec.clone(), 6, 4, point_seed);
        let batch = probe_batch(&spec, point_seed);
        let mut inputs = world::batch_bindings(&batch);
        inputs.extend(world::noise_bindings(&spec, batch.rows, point_seed));
        let wg = world::build_world_graph(&spec, 6, 4, batch.rows);
        let mut graph = wg.graph;
        let roots =
            [wg.predictive, wg.deductive, wg.deduce_reg, wg.uncertainty, wg.total];
        for (slot, &root) in roots.iter().enumerate() {
            graph.set_output(root);
            let err = finite_diff_check(&mut graph, bundle.params.bindings_mut(), &inputs, 1e-4)
                .expect("world graph evaluates");
            worst[slot] = worst[slot].max(err);
        }
    }
    worst
}

/// Max relative finite-difference error of the conservative Q loss, the
/// policy loss, and the MPC-augmented policy loss.
fn policy_gradient_errors(seed: u64, points: usize) -> [f64; 3] {
    let spec = small_spec();
    let mut worst = [0.0f64; 3];
    for p in 0..points {
        let point_seed = derive_seed(seed, &format!("verify/policy/{p}"));
        let mut bundle = PolicyBundle::new(spec.clone(), 6, 1.0, 2.5, 0.005, point_seed);
        let batch = probe_batch(&spec, point_seed);

        let act_pi = policy::join_actions(&bundle.pi_batch(&batch.obs));
        let targets = bellman_target(&bundle, &batch);
        let mut qg = policy::build_q_graph(&spec, 6, 1.0);
        let binds = policy::q_bindings(&batch, &act_pi, &targets);
        let err = finite_diff_check(&mut qg.graph, bundle.params.bindings_mut(), &binds, 1e-4)
            .expect("q graph evaluates");
        worst[0] = worst[0].max(err);

        let mut pg = policy::build_pi_graph(&spec, 6, batch.rows, false);
        let binds = policy::pi_bindings(&batch, 0.7);
        let err = finite_diff_check(&mut pg.graph, bundle.params.bindings_mut(), &binds, 1e-4)
            .expect("pi graph evaluates");
        worst[1] = worst[1].max(err);

        let mut mg = policy::build_pi_graph(&spec, 6, batch.rows, true);
        let mut binds = policy::pi_bindings(&batch, 0.7);
        for (i, a) in batch.actions.iter().enumerate() {
            binds.insert(format!("in/amax{i}"), a.clone());
        }
        let err = finite_diff_check(&mut mg.graph, bundle.params.bindings_mut(), &binds, 1e-4)
            .expect("mpc graph evaluates");
        worst[2] = worst[2].max(err);
    }
    worst
}

fn theorem1_verify(seed: u64) -> VerifyCheck {
    let (mdp, rho) = successor_reward_mdp(16, 4, derive_seed(seed, "verify/thm"), 0.9);
    let q = value_iteration(&mdp, VI_TOL);
    let inj = ErrorInjection::compute(&rho, &q, 0.05, 0.02, 0.02);
    let rep = theorem1_check(&mdp, &rho, &inj, 1000, derive_seed(seed, "verify/thm/trials"));
    VerifyCheck {
        name: "theorem1_bound",
        pass: rep.pass,
        detail: format!(
            "max_error={} bound={} violations={}/{}",
            rep.max_error, rep.bound, rep.violations, rep.trials
        ),
    }
}

/// Empirical draw frequencies of both minibatch halves over
/// [`SAMPLING_DRAWS`] samples each: the synthetic half against its softmax
/// weights, the real half against uniform.
fn sampling_verify(seed: u64) -> (VerifyCheck, VerifyCheck) {
    let spec = EnvSpec::particle(2, 8, 0.99, 1.0);
    let d = dataset::collect(&spec, dataset::Tier::Medium, 1, derive_seed(seed, "verify/sampling"));
    let mut buf = SyntheticBuffer::new();
    for (i, t) in d.transitions.iter().enumerate() {
        let mut t = t.clone();
        t.priority = Some(0.1 + 0.1 * i as f32);
        buf.push(t, 0, 0.0);
    }
    let weights = rollout::sample_weights(&buf);
    let batch = 2000;
    let calls = SAMPLING_DRAWS / (batch / 2);
    let mut syn = vec![0usize; buf.len()];
    let mut real = vec![0usize; d.len()];
    for c in 0..calls {
        let mb = rollout::mixed_minibatch(&d, &buf, batch, derive_seed(seed, &format!("verify/draw/{c}")));
        for &i in &mb.synthetic_indices {
            syn[i] += 1;
        }
        for &i in &mb.real_indices {
            real[i] += 1;
        }
    }
    let n = (calls * batch / 2) as f64;
    let syn_freq: Vec<f64> = syn.iter().map(|&c| c as f64 / n).collect();
    let real_freq: Vec<f64> = real.iter().map(|&c| c as f64 / n).collect();
    let uniform = vec![1.0 / d.len() as f64; d.len()];
    let l1_syn = stats::l1_distance(&syn_freq, &weights);
    let l1_real = stats::l1_distance(&real_freq, &uniform);
    (
        VerifyCheck {
            name: "sampling_synthetic_softmax",
            pass: l1_syn < SAMPLING_TOLERANCE,
            detail: format!("l1={l1_syn} over {} draws", n as usize),
        },
        VerifyCheck {
            name: "sampling_real_uniform",
            pass: l1_real < SAMPLING_TOLERANCE,
            detail: format!("l1={l1_real} over {} draws", n as usize),
        },
    )
}

/// The full self-check battery: finite-difference gradients for all eight
/// losses at `fd_points` random points, the tabular error bound, and both
/// minibatch sampling distributions.
pub fn verify_checks(seed: u64, fd_points: usize) -> Vec<VerifyCheck> {
    let mut checks = Vec::new();
    let world_names =
        ["grad_predictive", "grad_deductive", "grad_deduce_reg", "grad_uncertainty", "grad_world_total"];
    for (name, err) in world_names.into_iter().zip(world_gradient_errors(seed, fd_points)) {
        checks.push(VerifyCheck {
            name,
            pass: err <= FD_TOLERANCE,
            detail: format!("max_rel_err={err} over {fd_points} points"),
        });
    }
    let policy_names = ["grad_q_loss", "grad_policy_loss", "grad_mpc_loss"];
    for (name, err) in policy_names.into_iter().zip(policy_gradient_errors(seed, fd_points)) {
        checks.push(VerifyCheck {
            name,
            pass: err <= FD_TOLERANCE,
            detail: format!("max_rel_err={err} over {fd_points} points"),
        });
    }
    checks.push(theorem1_verify(seed));
    let (syn, real) = sampling_verify(seed);
    checks.push(syn);
    checks.push(real);
    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> i32 {
        run_command(args.iter().map(|s| s.to_string()))
    }

    #[test]
    fn unknown_flags_and_subcommands_exit_2() {
        assert_eq!(run(&["logo", "collect", "--polcy.alpha", "1"]), EXIT_CONFIG);
        assert_eq!(run(&["logo", "frobnicate"]), EXIT_CONFIG);
        assert_eq!(run(&["logo"]), EXIT_CONFIG);
    }

    #[test]
    fn bad_config_values_exit_2() {
        assert_eq!(run(&["logo", "collect", "--data.tier", "legendary"]), EXIT_CONFIG);
        assert_eq!(run(&["logo", "collect", "--policy.batch", "7"]), EXIT_CONFIG);
    }

    #[test]
    fn help_exits_0() {
        assert_eq!(run(&["logo", "--help"]), EXIT_OK);
    }

    #[test]
    fn missing_prerequisites_exit_3() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(run(&["logo", "train-wm", "--out", out]), EXIT_MISSING);
        assert_eq!(run(&["logo", "evaluate", "--out", out]), EXIT_MISSING);
        assert_eq!(run(&["logo", "report", "--out", dir.path().join("nope").to_str().unwrap()]), EXIT_MISSING);
    }

    #[test]
    fn collect_twice_writes_identical_files() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let args = ["logo", "collect", "--tier", "expert", "--episodes", "3", "--seed", "7", "--out", out];
        assert_eq!(run(&args), EXIT_OK);
        let path = dir.path().join("default").join("7").join(report::DATASET_FILE);
        let first = std::fs::read(&path).unwrap();
        assert_eq!(run(&args), EXIT_OK);
        assert_eq!(std::fs::read(&path).unwrap(), first);
        let cfg_text =
            std::fs::read_to_string(dir.path().join("default").join("7").join(report::CONFIG_FILE))
                .unwrap();
        assert!(cfg_text.contains("data.tier = expert\n"));
        assert!(cfg_text.contains("run.seeds = 7\n"));
    }

    #[test]
    fn flag_precedence_is_file_then_keys_then_aliases() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("base.cfg");
        std::fs::write(&file, "data.episodes = 50\ndata.tier = random\n").unwrap();
        let cmd = build_command();
        let m = cmd
            .try_get_matches_from([
                "logo",
                "collect",
                "--config",
                file.to_str().unwrap(),
                "--data.episodes",
                "60",
                "--data.tier",
                "expert",
                "--tier",
                "mixed",
            ])
            .unwrap();
        let (_, sub) = m.subcommand().unwrap();
        let cfg = match resolve_config(sub, Some("envout")) {
            Ok(c) => c,
            Err(_) => panic!("resolve failed"),
        };
        assert_eq!(cfg.data.episodes, 60);
        assert_eq!(cfg.data.tier, dataset::Tier::Mixed);
        assert_eq!(cfg.run.out, "envout");
    }

    #[test]
    fn explicit_out_beats_the_environment_default() {
        let cmd = build_command();
        let m = cmd.try_get_matches_from(["logo", "collect", "--out", "explicit"]).unwrap();
        let (_, sub) = m.subcommand().unwrap();
        let cfg = resolve_config(sub, Some("envout")).ok().unwrap();
        assert_eq!(cfg.run.out, "explicit");
    }

    #[test]
    fn single_point_verification_passes() {
        let checks = verify_checks(0, 1);
        assert_eq!(checks.len(), 11);
        for c in &checks {
            assert!(c.pass, "{} failed: {}", c.name, c.detail);
        }
    }
}
