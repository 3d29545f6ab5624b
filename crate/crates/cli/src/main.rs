use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use toolrl::demo::{self, DemoSet, EdpConfig};
use toolrl::env::{EnvConfig, EnvState};
use toolrl::experiment::{AblationMode, ExperimentConfig};
use toolrl::mar::RewardMode;
use toolrl::policy::{self, PolicyParams, SftConfig};
use toolrl::pool::{self, InvocationRequest, McPool, PoolConfig, MAX_ATTEMPTS};
use toolrl::rng;
use toolrl::trainer::{self, DiversityReport, EvalReport};

#[derive(Parser)]
#[command(
    name = "toolrl",
    version,
    about = "Train and evaluate a tool-orchestrating restoration agent"
)]
struct Cli {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the built-in environment and experiment configs.
    Config,
    /// Generate oracle demonstrations.
    GenDemos {
        #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
    },
    /// Apply exploration-driven perturbation to a demo file.
    Edp {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        alpha_t: Option<f64>,
        #[arg(long)]
        alpha_m: Option<f64>,
    },
    /// Behaviour cloning on a demo file (or freshly generated demos).
    Sft {
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Group-rollout policy-gradient training.
    Rl {
        /// Starting checkpoint; zero parameters when omitted.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        reward_mode: Option<RewardMode>,
        #[arg(long)]
        group_size: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        pool_size: Option<usize>,
        #[arg(long)]
        failure_rate: Option<f64>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Evaluate a checkpoint on the held-out state set.
    Eval {
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Rollout diversity tables for a checkpoint.
    Stats {
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Stress the shared tool pool and check its protocol invariants.
    PoolBench {
        #[arg(long)]
        pool_size: Option<usize>,
        #[arg(long, default_value_t = 0.1)]
        failure_rate: f64,
        #[arg(long, default_value_t = 512)]
        requests: usize,
        #[arg(long, default_value_t = 64)]
        workers: usize,
        /// Simulated latency as a fraction of each tool's cost in ms.
        #[arg(long, default_value_t = 0.01)]
        time_scale: f64,
        #[arg(long, default_value_t = 200)]
        jitter_us: u64,
    },
    /// Run one ablation variant end to end, or `all`.
    Ablate {
        mode: String,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
}

/// Named invariant checks; the process exits non-zero if any failed.
#[derive(Default)]
struct Checks(Vec<(String, bool)>);

impl Checks {
    fn check(&mut self, name: impl Into<String>, ok: bool) {
        self.0.push((name.into(), ok));
    }

    fn report(&self) -> bool {
        for (name, ok) in &self.0 {
            println!("check {name}: {}", if *ok { "ok" } else { "FAILED" });
        }
        self.0.iter().all(|(_, ok)| *ok)
    }
}

struct Ctx {
    cfg: ExperimentConfig,
    env: EnvConfig,
    out: PathBuf,
}

impl Ctx {
    fn load(cli: &Cli) -> Result<Self> {
        let mut cfg = match &cli.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        let env = cfg.load_env()?;
        Ok(Self {
            cfg,
            env,
            out: cli.out.clone(),
        })
    }

    fn path(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out)
            .with_context(|| format!("creating {}", self.out.display()))?;
        Ok(self.out.join(name))
    }

    fn write(&self, name: &str, body: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.path(name)?;
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    fn read_demos(&self, path: &Path) -> Result<DemoSet> {
        let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        DemoSet::read_jsonl(&self.env, BufReader::new(file))
            .with_context(|| format!("reading {}", path.display()))
    }

    fn write_demos(&self, name: &str, demos: &DemoSet) -> Result<PathBuf> {
        let path = self.path(name)?;
        let file =
            fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        demos.write_jsonl(&self.env, BufWriter::new(file))?;
        Ok(path)
    }

    fn read_params(&self, path: Option<&Path>) -> Result<PolicyParams> {
        match path {
            None => Ok(PolicyParams::zeros(&self.env)),
            Some(p) => {
                let text =
                    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Ok(PolicyParams::from_checkpoint(&self.env, &text)?)
            }
        }
    }
}

fn pretty(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:.4}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn print_entropy(label: &str, env: &EnvConfig, demos: &DemoSet) {
    let counts = demo::tool_counts(env, demos);
    let per_task: Vec<String> = env
        .tasks
        .iter()
        .zip(&counts)
        .map(|(t, row)| {
            format!(
                "{}={:.3}",
                t.name,
                demo::mean_tool_entropy(std::slice::from_ref(row))
            )
        })
        .collect();
    println!("{label} tool entropy: {}", per_task.join(" "));
}

fn print_diversity(d: &DiversityReport, env: &EnvConfig) {
    println!(
        "distinct {:.4}  order {:.4}  tool {:.4}  identical {:.4}  modal {:.4}  tool entropy {:.4}",
        d.distinct_fraction,
        d.order_fraction,
        d.tool_fraction,
        d.identical_fraction,
        d.modal_share,
        d.mean_tool_entropy
    );
    for (task, h) in env.tasks.iter().zip(&d.task_tool_entropy) {
        match h {
            Some(h) => println!("  {:<18} {h:.4}", task.name),
            None => println!("  {:<18} -", task.name),
        }
    }
}

fn print_eval(e: &EvalReport) {
    for (name, v) in e.metric_names.iter().zip(&e.metric_mean) {
        println!("  {name:<14} {v:.4}");
    }
    println!(
        "worst metric {:.4}  mean length {:.3}",
        e.worst_metric, e.mean_length
    );
}

fn diversity_checks(checks: &mut Checks, d: &DiversityReport) {
    checks.check(
        "diversity categories bounded by distinct",
        d.groups
            .iter()
            .all(|g| g.order_diverse + g.tool_diverse <= g.distinct && g.distinct <= g.size),
    );
    checks.check(
        "diversity fractions in [0,1]",
        [
            d.distinct_fraction,
            d.order_fraction,
            d.tool_fraction,
            d.identical_fraction,
            d.modal_share,
        ]
        .iter()
        .all(|f| (0.0..=1.0).contains(f)),
    );
}

fn cmd_config(ctx: &Ctx) -> Result<Checks> {
    let env_path = ctx.write("env.toml", ctx.env.to_toml())?;
    let cfg = ExperimentConfig {
        env: Some(PathBuf::from("env.toml")),
        ..ctx.cfg.clone()
    };
    let cfg_path = ctx.write("default.toml", toml::to_string(&cfg)?)?;
    println!("wrote {} and {}", env_path.display(), cfg_path.display());
    let mut checks = Checks::default();
    checks.check("env config valid", ctx.env.validate().is_ok());
    Ok(checks)
}

fn cmd_gen_demos(ctx: &Ctx, n: usize) -> Result<Checks> {
    let demos = demo::generate_oracle_demos(&ctx.env, n, ctx.cfg.demo_seed())?;
    let path = ctx.write_demos("demos.jsonl", &demos)?;
    let summary = demos.summary(&ctx.env);
    ctx.write("demos_summary.json", pretty(&summary))?;
    println!(
        "wrote {} ({} trajectories, {} steps)",
        path.display(),
        summary.items,
        summary.steps
    );
    println!("length histogram: {:?}", summary.length_histogram);
    for (tool, count) in ctx.env.tools.iter().zip(&summary.tool_frequencies) {
        if *count > 0 {
            println!("  {:<28} {count}", tool.name);
        }
    }
    let mut checks = Checks::default();
    checks.check("record count", demos.len() == n);
    checks.check("replay consistency", demos.all_replay_consistent(&ctx.env));
    Ok(checks)
}

fn cmd_edp(ctx: &Ctx, input: &Path, alpha_t: Option<f64>, alpha_m: Option<f64>) -> Result<Checks> {
    let demos = ctx.read_demos(input)?;
    let seeded = ctx.cfg.seeded();
    let cfg = EdpConfig {
        alpha_t: alpha_t.unwrap_or(seeded.edp.alpha_t),
        alpha_m: alpha_m.unwrap_or(seeded.edp.alpha_m),
        seed: seeded.edp.seed,
    };
    let out = demo::build_sft_set(&ctx.env, &demos, &cfg)?;
    let path = ctx.write_demos("sft_demos.jsonl", &out)?;
    let before = demos.summary(&ctx.env);
    let after = out.summary(&ctx.env);
    ctx.write(
        "edp_summary.json",
        pretty(&json!({ "edp": cfg, "before": before, "after": after })),
    )?;
    println!(
        "wrote {} ({} -> {} trajectories)",
        path.display(),
        before.items,
        after.items
    );
    println!(
        "order-perturbed copies: {}  tool-perturbed: {}",
        after.order_perturbed, after.tool_perturbed
    );
    print_entropy("before", &ctx.env, &demos);
    print_entropy("after ", &ctx.env, &out);
    println!(
        "mean tool entropy {:.4} -> {:.4}",
        before.mean_tool_entropy, after.mean_tool_entropy
    );

    let mut checks = Checks::default();
    checks.check("replay consistency", out.all_replay_consistent(&ctx.env));
    checks.check(
        "union size",
        out.len() == demos.len() + after.order_perturbed - before.order_perturbed,
    );
    checks.check(
        "task sequences kept",
        demos
            .items
            .iter()
            .zip(&out.items)
            .all(|(a, b)| a.trajectory.task_sequence() == b.trajectory.task_sequence()),
    );
    Ok(checks)
}

fn cmd_sft(
    ctx: &Ctx,
    input: Option<&Path>,
    epochs: Option<usize>,
    lr: Option<f64>,
) -> Result<Checks> {
    let seeded = ctx.cfg.seeded();
    let demos = match input {
        Some(p) => ctx.read_demos(p)?,
        None => {
            let oracle =
                demo::generate_oracle_demos(&ctx.env, ctx.cfg.num_demos, seeded.demo_seed())?;
            demo::build_sft_set(&ctx.env, &oracle, &seeded.edp)?
        }
    };
    let cfg = SftConfig {
        epochs: epochs.unwrap_or(seeded.sft.epochs),
        lr: lr.unwrap_or(seeded.sft.lr),
        ..seeded.sft
    };
    let out = policy::sft_update(&PolicyParams::zeros(&ctx.env), &ctx.env, &demos, &cfg)?;
    ctx.write("params.json", out.params.to_checkpoint(&ctx.env))?;
    let mut curve = String::from("epoch,log_likelihood\n");
    for (i, ll) in out.log_likelihood.iter().enumerate() {
        curve.push_str(&format!("{i},{ll:.9}\n"));
    }
    ctx.write("sft_curve.csv", curve)?;
    let initial = out.log_likelihood[0];
    println!(
        "sft on {} trajectories: log-likelihood {initial:.4} -> {:.4}",
        demos.len(),
        out.final_log_likelihood()
    );
    let mut checks = Checks::default();
    checks.check("params finite", out.params.is_finite());
    checks.check("likelihood improved", out.final_log_likelihood() >= initial);
    Ok(checks)
}

#[allow(clippy::too_many_arguments)]
fn cmd_rl(
    ctx: &Ctx,
    params: Option<&Path>,
    reward_mode: Option<RewardMode>,
    group_size: Option<usize>,
    batch: Option<usize>,
    steps: Option<usize>,
    lr: Option<f64>,
    pool_size: Option<usize>,
    failure_rate: Option<f64>,
    workers: usize,
) -> Result<Checks> {
    let seeded = ctx.cfg.seeded();
    let mut train = seeded.train.clone();
    train.reward_mode = reward_mode.unwrap_or(train.reward_mode);
    train.group_size = group_size.unwrap_or(train.group_size);
    train.batch_size = batch.unwrap_or(train.batch_size);
    train.steps = steps.unwrap_or(train.steps);
    train.lr = lr.unwrap_or(train.lr);
    train.workers = workers;
    let mut pool_cfg = seeded.pool.clone();
    pool_cfg.num_resources = pool_size.unwrap_or(pool_cfg.num_resources);
    pool_cfg.failure_rate = failure_rate.unwrap_or(pool_cfg.failure_rate);
    let pool = McPool::new(pool_cfg.clone(), Arc::new(ctx.env.clone()))?;

    let start = ctx.read_params(params)?;
    let out = trainer::train(&start, &train, &ctx.env, Some(&pool))?;
    let mut csv = Vec::new();
    trainer::write_step_csv(&ctx.env, &out.reports, &mut csv)?;
    ctx.write("steps.csv", csv)?;
    ctx.write("params.json", out.params.to_checkpoint(&ctx.env))?;
    ctx.write("mar_state.json", pretty(&out.mar))?;
    let stats = pool.stats();
    ctx.write("pool_stats.json", pretty(&stats))?;
    if let (Some(first), Some(last)) = (out.reports.first(), out.reports.last()) {
        println!(
            "reward mode {}  steps {}",
            train.reward_mode,
            out.reports.len()
        );
        println!("batch reward  first {}", fmt_vec(&first.reward_mean));
        println!("batch reward  last  {}", fmt_vec(&last.reward_mean));
        println!("weights       last  {}", fmt_vec(&last.weights));
        println!(
            "distinct fraction {:.4} -> {:.4}",
            first.distinct_fraction, last.distinct_fraction
        );
    }
    println!(
        "pool: {} calls, {} retried, {} exhausted, peak rollouts in flight {}",
        stats.requests, stats.retried_requests, stats.exhausted_requests, out.max_in_flight
    );
    let mut checks = Checks::default();
    checks.check("params finite", out.params.is_finite());
    checks.check("mutual exclusion", stats.exclusion_violations == 0);
    checks.check(
        "pool drained",
        stats.free_resources == pool_cfg.num_resources,
    );
    checks.check(
        "in-flight cap",
        out.max_in_flight <= train.max_parallel_rollouts,
    );
    Ok(checks)
}

fn cmd_eval(ctx: &Ctx, params: Option<&Path>, workers: usize) -> Result<Checks> {
    let params = ctx.read_params(params)?;
    let eval = trainer::evaluate(&params, &ctx.env, &ctx.cfg.seeded().eval, workers)?;
    ctx.write("eval.json", pretty(&eval))?;
    println!(
        "held-out evaluation: {} states x {} rollouts",
        ctx.cfg.eval.num_states, ctx.cfg.eval.rollouts_per_state
    );
    print_eval(&eval);
    let mut checks = Checks::default();
    checks.check(
        "metrics in [0,1]",
        eval.metric_mean.iter().all(|v| (0.0..=1.0).contains(v)),
    );
    Ok(checks)
}

fn cmd_stats(ctx: &Ctx, params: Option<&Path>, workers: usize) -> Result<Checks> {
    let params = ctx.read_params(params)?;
    let eval = trainer::evaluate(&params, &ctx.env, &ctx.cfg.seeded().eval, workers)?;
    let d = &eval.diversity;
    let mut csv = String::from("group,size,distinct,order_diverse,tool_diverse,identical,modal\n");
    for (i, g) in d.groups.iter().enumerate() {
        csv.push_str(&format!(
            "{i},{},{},{},{},{},{}\n",
            g.size, g.distinct, g.order_diverse, g.tool_diverse, g.identical, g.modal
        ));
    }
    ctx.write("stats.csv", csv)?;
    ctx.write("stats.json", pretty(d))?;
    print_diversity(d, &ctx.env);
    let mut checks = Checks::default();
    diversity_checks(&mut checks, d);
    Ok(checks)
}

fn cmd_pool_bench(
    ctx: &Ctx,
    pool_size: Option<usize>,
    failure_rate: f64,
    requests: usize,
    workers: usize,
    time_scale: f64,
    jitter_us: u64,
) -> Result<Checks> {
    let seeded = ctx.cfg.seeded();
    let cfg = PoolConfig {
        num_resources: pool_size.unwrap_or(seeded.pool.num_resources),
        failure_rate,
        time_scale,
        jitter_us,
        ..seeded.pool.clone()
    };
    let env = Arc::new(ctx.env.clone());
    let pool = McPool::new(cfg.clone(), env.clone())?;
    let reqs: Vec<InvocationRequest> = (0..requests)
        .map(|i| InvocationRequest {
            request_id: i as u64,
            tool: i % env.num_tools(),
            input: env.sample_state(&mut rng::stream(
                seeded.seed,
                &[rng::domain::INIT_STATE, i as u64],
            )),
            timeout: None,
        })
        .collect();
    let start = std::time::Instant::now();
    let results = pool::run_workload(&pool, &reqs, workers);
    let elapsed = start.elapsed();
    let stats = pool.stats();
    let direct: Vec<EnvState> = reqs
        .iter()
        .map(|r| env.apply_tool(&r.input, r.tool))
        .collect::<Result<_, _>>()?;
    let matches = results
        .iter()
        .zip(&direct)
        .all(|(r, d)| r.as_ref().map_or(true, |s| s == d));
    let exhausted = results.iter().filter(|r| r.is_err()).count();
    ctx.write("pool_bench.json", pretty(&stats))?;

    println!(
        "requests {requests}  resources {}  failure rate {failure_rate}",
        cfg.num_resources
    );
    println!(
        "mutual exclusion violations: {}",
        stats.exclusion_violations
    );
    println!("attempts histogram: {:?}", stats.attempts_histogram);
    println!(
        "succeeded {}  retried {}  exhausted {}  peak concurrency {}  max queue {}",
        stats.succeeded,
        stats.retried_requests,
        exhausted,
        stats.max_concurrency,
        stats.max_queue_depth
    );
    log::info!("pool bench finished in {:.3}s", elapsed.as_secs_f64());

    let mut checks = Checks::default();
    checks.check("mutual exclusion", stats.exclusion_violations == 0);
    checks.check("attempt bound", stats.max_attempts_seen <= MAX_ATTEMPTS);
    checks.check(
        "all requests settled",
        stats.attempts_histogram.iter().sum::<u64>() == requests as u64,
    );
    checks.check(
        "pool drained",
        stats.free_resources == cfg.num_resources && stats.in_flight == 0,
    );
    checks.check("capacity bound", stats.max_concurrency <= cfg.num_resources);
    checks.check("pooled results equal direct execution", matches);
    Ok(checks)
}

fn cmd_ablate(ctx: &Ctx, mode: &str, workers: usize) -> Result<Checks> {
    let modes: Vec<AblationMode> = if mode == "all" {
        AblationMode::ALL.to_vec()
    } else {
        vec![mode.parse()?]
    };
    let mut checks = Checks::default();
    println!(
        "{:<12} {:>9} {:>9} {:>9} {:>8}  digest",
        "mode", "distinct", "entropy", "worst", "length"
    );
    for m in modes {
        let out = toolrl::experiment::run_experiment(&ctx.cfg, &ctx.env, m, workers)?;
        let dir = ctx.out.join(m.name());
        out.write(&ctx.env, &dir)?;
        let e = &out.report.eval;
        println!(
            "{:<12} {:>9.4} {:>9.4} {:>9.4} {:>8.3}  {}",
            m.name(),
            e.diversity.distinct_fraction,
            e.diversity.mean_tool_entropy,
            e.worst_metric,
            e.mean_length,
            out.report.digest()
        );
        checks.check(
            format!("{m} metrics in [0,1]"),
            e.metric_mean.iter().all(|v| (0.0..=1.0).contains(v)),
        );
        checks.check(format!("{m} params finite"), out.params.is_finite());
    }
    Ok(checks)
}

fn run(cli: Cli) -> Result<bool> {
    let ctx = Ctx::load(&cli)?;
    log::debug!("env digest {}", ctx.env.digest());
    let checks = match &cli.command {
        Command::Config => cmd_config(&ctx)?,
        Command::GenDemos { n } => cmd_gen_demos(&ctx, *n as usize)?,
        Command::Edp {
            input,
            alpha_t,
            alpha_m,
        } => cmd_edp(&ctx, input, *alpha_t, *alpha_m)?,
        Command::Sft { input, epochs, lr } => cmd_sft(&ctx, input.as_deref(), *epochs, *lr)?,
        Command::Rl {
            params,
            reward_mode,
            group_size,
            batch,
            steps,
            lr,
            pool_size,
            failure_rate,
            workers,
        } => cmd_rl(
            &ctx,
            params.as_deref(),
            *reward_mode,
            *group_size,
            *batch,
            *steps,
            *lr,
            *pool_size,
            *failure_rate,
            *workers,
        )?,
        Command::Eval { params, workers } => cmd_eval(&ctx, params.as_deref(), *workers)?,
        Command::Stats { params, workers } => cmd_stats(&ctx, params.as_deref(), *workers)?,
        Command::PoolBench {
            pool_size,
            failure_rate,
            requests,
            workers,
            time_scale,
            jitter_us,
        } => cmd_pool_bench(
            &ctx,
            *pool_size,
            *failure_rate,
            *requests,
            *workers,
            *time_scale,
            *jitter_us,
        )?,
        Command::Ablate { mode, workers } => cmd_ablate(&ctx, mode, *workers)?,
    };
    Ok(checks.report())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: invariant checks failed");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
