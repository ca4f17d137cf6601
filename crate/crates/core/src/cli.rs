//! Command-line front end of the `trackmdp` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::artifact::{Artifact, Provenance, StoredPolicy};
use crate::config::{Count, ExperimentConfig, SweepConfig};
use crate::error::{Error, Result};
use crate::eval::{compare, write_csv, CompareOptions, ConfigRun, Policy};
use crate::kernel::{make_experiment_kernel, TransitionKernel};
use crate::solvers::actor_critic::actor_critic_factored;
use crate::solvers::exact::exact_value_iteration;
use crate::solvers::qlearning::q_learning;
use crate::sweep::{run_sweep, write_accuracy_csv, LEARNED_ID};
use crate::verify::{self, Level};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_PROPERTY: i32 = 3;

/// Episodes per start used by `reproduce --level fast`.
pub const FAST_EPISODES: usize = 50;

#[derive(Debug, Parser)]
#[command(name = "trackmdp", version, about = "Target tracking with controlled sensing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the seed the command draws from.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; defaults to the config's `output.dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct KernelArg {
    /// Kernel file; generated from the config when absent.
    #[arg(long)]
    pub kernel: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a kernel from the config's generator settings.
    GenKernel {
        #[command(flatten)]
        common: Common,
    },
    /// Solve the Track-MDP exactly and write a value-table artifact.
    SolveExact {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        kernel: KernelArg,
    },
    /// Train tabular Q-learning and write a Q-table artifact.
    TrainQ {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        kernel: KernelArg,
    },
    /// Train the factored actor-critic and write its artifact.
    TrainAc {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        kernel: KernelArg,
    },
    /// Evaluate policy artifacts against Q_MDP and the upper bound.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        kernel: KernelArg,
        /// Policy artifact; repeatable.
        #[arg(long = "policy")]
        policies: Vec<PathBuf>,
        /// Policy id that must be present (exact, q_learning, actor_critic); repeatable.
        #[arg(long = "require")]
        required: Vec<String>,
        /// Overrides `eval.episodes_per_start`.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Run the property suites on the bundled fixtures.
    Verify {
        #[arg(long, value_enum, default_value = "fast")]
        level: Level,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Also validate this kernel file.
        #[arg(long)]
        kernel: Option<PathBuf>,
    },
    /// Run the (z, c) sweep and write comparison and accuracy tables.
    Reproduce {
        /// Sweep config; built-in defaults when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "fast")]
        level: Level,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn out_dir(common: &Common, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    ExperimentConfig::load(&common.config)
}

fn generate(cfg: &ExperimentConfig) -> Result<TransitionKernel> {
    make_experiment_kernel(&cfg.generator(), &mut ChaCha8Rng::seed_from_u64(cfg.kernel_seed))
}

fn load_kernel(arg: &KernelArg, cfg: &ExperimentConfig) -> Result<TransitionKernel> {
    let k = match &arg.kernel {
        Some(path) => TransitionKernel::from_json(&fs::read_to_string(path)?)
            .map_err(|e| Error::InvalidKernel(format!("{}: {e}", path.display())))?,
        None => generate(cfg)?,
    };
    if k.grid() != cfg.grid()? {
        return Err(Error::Config(format!(
            "kernel is {0}x{0} but the config asks for n = {1}",
            k.grid().n,
            cfg.n
        )));
    }
    Ok(k)
}

fn write_artifact(a: &Artifact, dir: &Path, file: &str, out: &mut dyn Write) -> Result<()> {
    let path = dir.join(file);
    a.save(&path)?;
    writeln!(out, "wrote {}", path.display())?;
    Ok(())
}

fn gen_kernel(common: &Common, out: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.kernel_seed = s;
    }
    let k = generate(&cfg)?;
    let dir = out_dir(common, &cfg)?;
    let path = dir.join(&cfg.output.kernel);
    fs::write(&path, k.to_json())?;
    writeln!(out, "wrote {} (fingerprint {})", path.display(), k.fingerprint())?;
    let mut hist = std::collections::BTreeMap::new();
    for s in k.support_sizes() {
        *hist.entry(s).or_insert(0usize) += 1;
    }
    writeln!(out, "support size (terminal included): rows")?;
    for (s, count) in hist {
        writeln!(out, "  {s}: {count}")?;
    }
    Ok(())
}

fn provenance(cfg: &ExperimentConfig, seed: u64, schedule: serde_json::Value) -> Provenance {
    Provenance {
        config_hash: cfg.hash(),
        seed,
        schedule,
    }
}

fn solve_exact(common: &Common, karg: &KernelArg, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(common)?;
    let k = load_kernel(karg, &cfg)?;
    let p = cfg.reward_params()?;
    let table = match exact_value_iteration(&k, &p, &cfg.solver.exact.options()) {
        Err(e @ (Error::BudgetExceeded { .. } | Error::ActionBudgetExceeded { .. })) => {
            return Err(Error::Config(format!(
                "{e}; exact solving does not scale to this instance, \
                 use train-q or train-ac instead (or raise solver.exact.budget / action_budget)"
            )))
        }
        r => r?,
    };
    writeln!(
        out,
        "solved {} states in {} policy iterations, Bellman residual {:.3e}, average root value {:.10}",
        table.len(),
        table.iterations,
        table.residual,
        table.average_root_value()
    )?;
    let schedule = serde_json::to_value(cfg.solver.exact)?;
    let a = Artifact::from_value_table(&table, provenance(&cfg, 0, schedule))?;
    write_artifact(&a, &out_dir(common, &cfg)?, "policy_exact.json", out)
}

fn train_q(common: &Common, karg: &KernelArg, out: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.solver.seed = s;
    }
    let k = load_kernel(karg, &cfg)?;
    let p = cfg.reward_params()?;
    let sched = cfg.solver.schedule;
    let table = q_learning(&k, &p, &sched, cfg.solver.seed)?;
    writeln!(
        out,
        "trained {} episodes, {} steps, {} visited states",
        table.episodes,
        table.steps,
        table.entries.len()
    )?;
    let a = Artifact::from_q_table(
        &table,
        &k,
        provenance(&cfg, cfg.solver.seed, serde_json::to_value(sched)?),
    )?;
    write_artifact(&a, &out_dir(common, &cfg)?, "policy_q.json", out)
}

fn train_ac(common: &Common, karg: &KernelArg, out: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.solver.seed = s;
    }
    let k = load_kernel(karg, &cfg)?;
    let p = cfg.reward_params()?;
    let hyper = cfg.solver.hyper;
    let params = actor_critic_factored(&k, &p, &hyper, cfg.solver.seed)?;
    writeln!(out, "trained {} episodes", hyper.episodes)?;
    let a = Artifact::from_factored(
        &params,
        &k,
        p,
        provenance(&cfg, cfg.solver.seed, serde_json::to_value(hyper)?),
    )?;
    write_artifact(&a, &out_dir(common, &cfg)?, "policy_ac.json", out)
}

fn eval(
    common: &Common,
    karg: &KernelArg,
    policies: &[PathBuf],
    required: &[String],
    episodes: Option<usize>,
    out: &mut dyn Write,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.eval.base_seed = s;
    }
    if let Some(e) = episodes {
        cfg.eval.episodes_per_start =
            Count::try_from(e).map_err(|m| Error::Config(format!("--episodes: {m}")))?;
    }
    let k = load_kernel(karg, &cfg)?;
    let p = cfg.reward_params()?;
    let mut loaded: Vec<(String, StoredPolicy)> = Vec::new();
    for path in policies {
        let a = Artifact::load(path)?;
        a.check_kernel(&k)
            .and_then(|_| a.check_reward(&p))
            .map_err(|e| match e {
                Error::FingerprintMismatch(m) => Error::FingerprintMismatch(format!("{}: {m}", path.display())),
                other => other,
            })?;
        let mut id = a.kind.policy_id().to_string();
        let dup = loaded.iter().filter(|(i, _)| i.starts_with(&id)).count();
        if dup > 0 {
            id = format!("{id}_{}", dup + 1);
        }
        loaded.push((id, a.into_policy(&k)?));
    }
    let run = ConfigRun {
        z: Some(cfg.z.0),
        kernel: &k,
        params: p,
        policies: loaded.iter().map(|(id, p)| (id.clone(), p as &dyn Policy)).collect(),
    };
    let req: Vec<&str> = required.iter().map(String::as_str).collect();
    let rows = compare(
        &[run],
        &req,
        &CompareOptions {
            episodes_per_start: cfg.eval.episodes_per_start.0,
            base_seed: cfg.eval.base_seed,
            step_cap: cfg.eval.step_cap.0,
        },
    )?;
    for r in &rows {
        writeln!(
            out,
            "{:<14} aihtr {:>12.6} ± {:<10.3e} accuracy {}",
            r.policy_id,
            r.aihtr,
            r.aihtr_stderr,
            r.hamming_accuracy.map_or("-".to_string(), |a| format!("{a:.4}"))
        )?;
    }
    let path = out_dir(common, &cfg)?.join(&cfg.output.metrics);
    write_csv(&rows, fs::File::create(&path)?)?;
    writeln!(out, "wrote {}", path.display())?;
    Ok(())
}

fn verify_cmd(level: Level, seed: u64, dir: &Path, kernel: Option<&Path>, out: &mut dyn Write) -> Result<i32> {
    fs::create_dir_all(dir)?;
    let mut report = match kernel {
        // an unusable kernel file ends the run before the suites
        Some(path) => {
            let text = fs::read_to_string(path)?;
            let c = verify::kernel_file_check(&path.display().to_string(), &text);
            if c.passed {
                let mut r = verify::run(level, seed)?;
                r.checks.insert(0, c);
                r
            } else {
                writeln!(out, "FAIL kernel_validation {}: {}", c.instance, c.detail)?;
                let r = verify::Report {
                    level,
                    seed,
                    passed: false,
                    elapsed_s: 0.0,
                    checks: vec![c],
                };
                fs::write(dir.join("verify_report.json"), serde_json::to_string_pretty(&r)?)?;
                return Ok(EXIT_VALIDATION);
            }
        }
        None => verify::run(level, seed)?,
    };
    report.passed = report.checks.iter().all(|c| c.passed);
    for c in &report.checks {
        if !c.passed {
            writeln!(out, "FAIL {} [{}]: {}", c.property, c.instance, c.detail)?;
        }
    }
    let path = dir.join("verify_report.json");
    fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    writeln!(
        out,
        "{} checks, {} failed, {:.1} s; wrote {}",
        report.checks.len(),
        report.failures().count(),
        report.elapsed_s,
        path.display()
    )?;
    Ok(if report.passed { EXIT_OK } else { EXIT_PROPERTY })
}

fn reproduce(config: Option<&Path>, level: Level, seed: Option<u64>, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let mut cfg = match config {
        Some(p) => SweepConfig::load(p)?,
        None => SweepConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let episodes = match level {
        Level::Fast => FAST_EPISODES.min(cfg.eval.episodes_per_start.0),
        Level::Full => cfg.eval.episodes_per_start.0,
    };
    fs::create_dir_all(dir.join("policies"))?;
    writeln!(out, "{:>2} {:>5} {:>12} {:>12} {:>12} {:>8} {:>8}", "z", "c", "track_mdp", "qmdp", "upper", "acc_tm", "acc_q")?;
    let res = run_sweep(&cfg, episodes, |pt| {
        let _ = writeln!(
            out,
            "{:>2} {:>5.2} {:>12.4} {:>12.4} {:>12.4} {:>8.4} {:>8.4}",
            pt.z,
            pt.c,
            pt.learned.aihtr,
            pt.qmdp.aihtr,
            pt.upper_bound.aihtr,
            pt.learned.hamming_accuracy.unwrap_or(f64::NAN),
            pt.qmdp.hamming_accuracy.unwrap_or(f64::NAN),
        );
    })?;
    for pt in &res.points {
        let a = Artifact {
            version: crate::artifact::ARTIFACT_VERSION,
            kind: crate::artifact::ArtifactKind::Factored,
            tool_version: crate::artifact::TOOL_VERSION.to_string(),
            config_hash: cfg.hash(),
            kernel_fingerprint: pt.kernel_fingerprint.clone(),
            reward: pt.reward,
            seed: cfg.seed,
            schedule: serde_json::to_value(cfg.hyper)?,
            payload: serde_json::to_value(&pt.params)?,
        };
        a.save(&dir.join("policies").join(format!("{LEARNED_ID}_z{}_c{:.2}.json", pt.z, pt.c)))?;
    }
    for z in &cfg.z_values {
        let path = dir.join(format!("aihtr_z{}.csv", z.0));
        write_csv(&res.rows_for(z.0), fs::File::create(&path)?)?;
        writeln!(out, "wrote {}", path.display())?;
    }
    let path = dir.join("hamming_accuracy.csv");
    write_accuracy_csv(&res.accuracy_table(), fs::File::create(&path)?)?;
    writeln!(out, "wrote {}", path.display())?;
    writeln!(
        out,
        "track_mdp reward >= qmdp in {}/{} configs, accuracy higher in {}/{}",
        res.reward_wins(),
        res.points.len(),
        res.accuracy_wins(),
        res.points.len()
    )?;
    for pt in res.points.iter().filter(|p| p.census.nonempty == 0) {
        writeln!(
            out,
            "qmdp senses nothing at any of {} reachable states for z={}, c={:.2}",
            pt.census.reachable, pt.z, pt.c
        )?;
    }
    Ok(())
}

/// Runs a parsed command; returns the process exit code.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<i32> {
    match cli.command {
        Command::GenKernel { common } => gen_kernel(&common, out)?,
        Command::SolveExact { common, kernel } => solve_exact(&common, &kernel, out)?,
        Command::TrainQ { common, kernel } => train_q(&common, &kernel, out)?,
        Command::TrainAc { common, kernel } => train_ac(&common, &kernel, out)?,
        Command::Eval {
            common,
            kernel,
            policies,
            required,
            episodes,
        } => eval(&common, &kernel, &policies, &required, episodes, out)?,
        Command::Verify {
            level,
            seed,
            out: dir,
            kernel,
        } => return verify_cmd(level, seed, &dir, kernel.as_deref(), out),
        Command::Reproduce {
            config,
            level,
            seed,
            out: dir,
        } => reproduce(config.as_deref(), level, seed, &dir, out)?,
    }
    Ok(EXIT_OK)
}

/// Parses `args` and runs the command, printing errors to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(cli, &mut lock) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_VALIDATION
        }
    }
}
