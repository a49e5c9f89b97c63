//! `pmne`: single runs, sweeps, NI evaluation, oracles, Gibbs fixed points,
//! gradient checks and the β calculator.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 numerical abort.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use particle_mne::bench::{run_plan, ExperimentPlan};
use particle_mne::games::gradient_check;
use particle_mne::io::{read_ensemble_csv, read_matrix_csv, write_gibbs_csv, write_json, write_run};
use particle_mne::metrics::gibbs_fixed_point;
use particle_mne::{
    matrix_game_solve, ni_estimate, ni_exact, required_beta, run, Algo, DynamicsConfig, Error, Game,
    GameConfig, GibbsConfig, Manifold, NiEstimatorConfig, NiEvaluator,
};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "pmne", version, about = "Particle solvers for mixed Nash equilibria of zero-sum games")]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one dynamics and record NI at checkpoints.
    #[command(allow_negative_numbers = true)]
    Run(RunArgs),
    /// Execute an experiment plan.
    Sweep(SweepArgs),
    /// Estimate the NI error of two stored ensembles.
    #[command(allow_negative_numbers = true)]
    Ni(NiArgs),
    /// Grid fixed point of the coupled Gibbs equations on the circle.
    #[command(allow_negative_numbers = true)]
    Gibbs(GibbsArgs),
    /// Exact solution of a small matrix game.
    Oracle(OracleArgs),
    /// Compare analytic and finite-difference gradients.
    #[command(allow_negative_numbers = true)]
    Gradcheck(GradcheckArgs),
    /// Inverse temperature sufficient for an ε-equilibrium.
    #[command(allow_negative_numbers = true)]
    Beta(BetaArgs),
}

#[derive(Args, Debug)]
struct GameArgs {
    /// Short name (poly_a, poly_b, bilinear, doublewell, pennies, rps,
    /// torus_trig), a JSON file, a payoff CSV, or inline JSON.
    #[arg(long)]
    game: String,
    /// Dimension for dimensioned games; overrides the game description.
    #[arg(long)]
    dim: Option<usize>,
    /// Seed of random game instances (default: `--seed`).
    #[arg(long)]
    game_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EstimatorArgs {
    /// Random restarts of the best-response search.
    #[arg(long)]
    starts: Option<usize>,
    /// Projected ascent iterations per restart.
    #[arg(long)]
    ascent_iters: Option<usize>,
    /// Initial best-response step.
    #[arg(long)]
    ascent_step: Option<f64>,
}

impl EstimatorArgs {
    fn apply(&self, mut cfg: NiEstimatorConfig) -> NiEstimatorConfig {
        if let Some(v) = self.starts {
            cfg.starts = v;
        }
        if let Some(v) = self.ascent_iters {
            cfg.ascent_iters = v;
        }
        if let Some(v) = self.ascent_step {
            cfg.step = v;
        }
        cfg
    }
}

#[derive(Args, Debug)]
struct RunArgs {
    /// JSON with optional `game`, `dynamics` and `estimator` sections;
    /// flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    algo: Option<Algo>,
    /// Game, as for the other subcommands; required unless the config has one.
    #[arg(long)]
    game: Option<String>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    game_seed: Option<u64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    eta_w: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint period (0: first and last iterate only).
    #[arg(long)]
    ni_eval_every: Option<usize>,
    #[command(flatten)]
    estimator: EstimatorArgs,
    /// Output directory for record.csv, config.json and the ensembles.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    plan: PathBuf,
    /// Output directory; overrides the plan's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct NiArgs {
    #[arg(long)]
    x: PathBuf,
    #[arg(long)]
    y: PathBuf,
    #[command(flatten)]
    game: GameArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    estimator: EstimatorArgs,
}

#[derive(Args, Debug)]
struct GibbsArgs {
    #[command(flatten)]
    game: GameArgs,
    #[arg(long)]
    beta: f64,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    damping: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// CSV destination for the densities.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct OracleArgs {
    /// Payoff of the minimizing row player, one row per line.
    #[arg(long)]
    matrix: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    game: GameArgs,
    #[arg(long, default_value_t = 100)]
    points: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct BetaArgs {
    #[arg(long)]
    epsilon: f64,
    /// Range length `K` of the loss.
    #[arg(long)]
    kl: f64,
    /// Lipschitz constant of the loss.
    #[arg(long)]
    lip: f64,
    /// `torusD`, `sphereD` (ambient dimension), `boxD` (unit box), or JSON.
    #[arg(long)]
    manifold: String,
}

/// Parsed `run` configuration file.
#[derive(serde::Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RunFile {
    game: Option<GameConfig>,
    dynamics: Option<DynamicsConfig>,
    estimator: Option<NiEstimatorConfig>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))
}

fn dim_required(name: &str, dim: Option<usize>) -> anyhow::Result<usize> {
    dim.ok_or_else(|| anyhow!("--dim is required for game `{name}`"))
}

/// Resolves `--game` into a description, applying `--dim` and the seed.
fn resolve_game(arg: &str, dim: Option<usize>, seed: u64) -> anyhow::Result<GameConfig> {
    let path = Path::new(arg);
    let cfg = if arg.trim_start().starts_with('{') {
        serde_json::from_str(arg).context("--game: invalid inline JSON")?
    } else if path.is_file() {
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            let a = read_matrix_csv::<f64>(path).context("--game")?;
            GameConfig::Matrix { payoff: a.to_rows() }
        } else {
            read_json(path).context("--game")?
        }
    } else {
        match arg {
            "poly_a" | "ell_a" => GameConfig::PolyA {
                dim: dim_required(arg, dim)?,
                seed,
            },
            "poly_b" | "ell_b" => GameConfig::PolyB {
                dim: dim_required(arg, dim)?,
                seed,
            },
            "bilinear" => GameConfig::Bilinear {
                dim: dim_required(arg, dim)?,
            },
            "doublewell" => GameConfig::Doublewell { halfwidth: 1.5 },
            "pennies" | "matching_pennies" => GameConfig::matching_pennies(),
            "rps" | "rock_paper_scissors" => GameConfig::rock_paper_scissors(),
            "torus_trig" | "cos" => GameConfig::TorusTrig {
                coupling: 1.0,
                x_amp: 0.0,
                y_amp: 0.0,
            },
            other => bail!("--game: `{other}` is neither a known game, a file, nor JSON"),
        }
    };
    Ok(match (&cfg, dim) {
        (GameConfig::PolyA { seed, .. } | GameConfig::PolyB { seed, .. }, Some(d)) => cfg.instantiate(d, *seed),
        (GameConfig::Bilinear { .. }, Some(d)) => cfg.instantiate(d, 0),
        _ => cfg,
    })
}

fn build_game(cfg: &GameConfig) -> anyhow::Result<Game> {
    cfg.build::<f64>().map_err(|e| flag_error("--game", e))
}

fn parse_manifold(s: &str) -> anyhow::Result<Manifold> {
    let s = s.trim();
    if s.starts_with('{') {
        return serde_json::from_str(s).context("--manifold: invalid JSON");
    }
    let path = Path::new(s);
    if path.is_file() {
        return read_json(path).context("--manifold");
    }
    let split = s.find(|c: char| c.is_ascii_digit()).unwrap_or(s.len());
    let (kind, digits) = s.split_at(split);
    let d: usize = digits
        .parse()
        .map_err(|_| anyhow!("--manifold: expected e.g. torus1, sphere3, box2 or JSON, got `{s}`"))?;
    let m = match kind {
        "torus" => Manifold::torus(d, 1.0),
        "sphere" => Manifold::sphere(d),
        "box" => Manifold::boxed(vec![(0.0, 1.0); d]),
        _ => bail!("--manifold: unknown kind `{kind}`"),
    };
    m.map_err(|e| flag_error("--manifold", e))
}

/// Attaches the flag spelling to parameter errors raised by the library.
fn flag_error(default_flag: &str, e: Error) -> anyhow::Error {
    match &e {
        Error::InvalidParameter { name, .. } => {
            let flag = format!("--{}", name.replace(['_', '.'], "-"));
            anyhow::Error::new(e).context(format!("invalid value for {flag}"))
        }
        _ if e.is_numerical() => anyhow::Error::new(e),
        _ => anyhow::Error::new(e).context(format!("invalid value for {default_flag}")),
    }
}

fn cmd_run(a: RunArgs) -> anyhow::Result<()> {
    let file: RunFile = match &a.config {
        Some(p) => read_json(p).context("--config")?,
        None => RunFile::default(),
    };
    let mut dynamics = match (file.dynamics, a.algo) {
        (Some(d), _) => d,
        (None, Some(algo)) => DynamicsConfig::new(algo),
        (None, None) => bail!("--algo is required when the config has no `dynamics` section"),
    };
    if let Some(v) = a.algo {
        dynamics.algo = v;
    }
    if let Some(v) = a.n {
        dynamics.n = v;
    }
    if let Some(v) = a.iters {
        dynamics.iters = v;
    }
    if let Some(v) = a.eta {
        dynamics.eta = v;
    }
    if let Some(v) = a.eta_w {
        dynamics.eta_w = v;
    }
    if let Some(v) = a.beta {
        dynamics.beta = v;
    }
    if let Some(v) = a.seed {
        dynamics.seed = v;
    }
    if let Some(v) = a.ni_eval_every {
        dynamics.ni_eval_every = v;
    }
    dynamics.validate().map_err(|e| flag_error("--config", e))?;

    let game_seed = a.game_seed.unwrap_or(dynamics.seed);
    let game_cfg = match (&a.game, file.game) {
        (Some(g), _) => resolve_game(g, a.dim, game_seed)?,
        (None, Some(g)) => match a.dim {
            Some(d) => g.instantiate(d, game_seed),
            None => g,
        },
        (None, None) => bail!("--game is required when the config has no `game` section"),
    };
    let game = build_game(&game_cfg)?;
    let estimator = a.estimator.apply(file.estimator.unwrap_or(NiEstimatorConfig {
        seed: dynamics.seed,
        ..NiEstimatorConfig::default()
    }));
    estimator.validate().map_err(|e| flag_error("--starts", e))?;

    let effective = json!({ "game": game_cfg, "dynamics": dynamics, "estimator": estimator });
    let evaluator = NiEvaluator::new(estimator);
    let record = run(&game, &dynamics, |cp| {
        let v = evaluator.evaluate(cp)?;
        match v.exact {
            Some(x) => eprintln!("iter {} ni_estimate {:.6e} ni_exact {:.6e}", cp.iter, v.estimate, x),
            None => eprintln!("iter {} ni_estimate {:.6e}", cp.iter, v.estimate),
        }
        Ok(v)
    })
    .map_err(|e| flag_error("--config", e))?;
    if let Some(dir) = &a.out {
        write_run(dir, &record, &effective).with_context(|| format!("--out {}", dir.display()))?;
    }
    let last = record.last();
    println!(
        "{}",
        json!({
            "iter": last.iter,
            "ni_estimate": last.ni_estimate,
            "ni_exact": last.ni_exact,
            "checkpoints": record.rows.len(),
        })
    );
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> anyhow::Result<()> {
    let plan = ExperimentPlan::from_json_file(&a.plan).map_err(|e| flag_error("--plan", e))?;
    let out = a.out.clone().or_else(|| plan.output_dir.clone());
    if let Some(dir) = &out {
        write_json(&dir.join("config.json"), &plan).with_context(|| format!("--out {}", dir.display()))?;
    }
    let res = run_plan::<f64>(&plan, out.as_deref()).map_err(|e| flag_error("--plan", e))?;
    println!("algo,dim,n,count,mean_ni,std_ni");
    for r in &res.aggregate {
        println!("{},{},{},{},{},{}", r.algo, r.dim, r.n, r.count, r.mean_ni, r.std_ni);
    }
    for f in &res.failures {
        eprintln!("cell {} failed: {}", f.cell, f.error);
    }
    Ok(())
}

fn cmd_ni(a: NiArgs) -> anyhow::Result<()> {
    let seed = a.game.game_seed.unwrap_or(a.seed);
    let game = build_game(&resolve_game(&a.game.game, a.game.dim, seed)?)?;
    let x = read_ensemble_csv(&a.x, &game.space_x).map_err(|e| flag_error("--x", e))?;
    let y = read_ensemble_csv(&a.y, &game.space_y).map_err(|e| flag_error("--y", e))?;
    let cfg = a.estimator.apply(NiEstimatorConfig {
        seed: a.seed,
        ..NiEstimatorConfig::default()
    });
    let rep = ni_estimate(&game, &x, &y, &cfg).map_err(|e| flag_error("--starts", e))?;
    println!(
        "{}",
        json!({
            "estimate": rep.estimate,
            "sup": rep.sup,
            "inf": rep.inf,
            "exact": ni_exact(&game, &x, &y),
            "wall_ms": rep.wall_ms,
        })
    );
    Ok(())
}

fn cmd_gibbs(a: GibbsArgs) -> anyhow::Result<()> {
    let game = build_game(&resolve_game(&a.game.game, a.game.dim, a.game.game_seed.unwrap_or(0))?)?;
    let mut cfg = GibbsConfig::new(a.beta);
    if let Some(v) = a.bins {
        cfg.bins = v;
    }
    if let Some(v) = a.tol {
        cfg.tol = v;
    }
    if let Some(v) = a.damping {
        cfg.damping = v;
    }
    if let Some(v) = a.max_iters {
        cfg.max_iters = v;
    }
    let grid = gibbs_fixed_point(&game, &cfg).map_err(|e| flag_error("--game", e))?;
    if let Some(p) = &a.out {
        write_gibbs_csv(p, &grid).with_context(|| format!("--out {}", p.display()))?;
    }
    println!(
        "{}",
        json!({
            "residual": grid.residual,
            "iterations": grid.iterations,
            "converged": grid.converged,
            "bins": grid.rho_x.len(),
        })
    );
    if !grid.converged {
        eprintln!(
            "not converged after {} iterations (residual {:.3e} > --tol {:.3e})",
            grid.iterations, grid.residual, cfg.tol
        );
    }
    Ok(())
}

fn cmd_oracle(a: OracleArgs) -> anyhow::Result<()> {
    let m = read_matrix_csv::<f64>(&a.matrix).map_err(|e| flag_error("--matrix", e))?;
    let s = matrix_game_solve(&m).map_err(|e| flag_error("--matrix", e))?;
    println!("{}", json!({ "value": s.value, "x": s.x, "y": s.y }));
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    if a.points == 0 {
        bail!("--points must be positive");
    }
    if !(a.h > 0.0) {
        bail!("--h must be positive");
    }
    let game = build_game(&resolve_game(&a.game.game, a.game.dim, a.game.game_seed.unwrap_or(a.seed))?)?;
    let rep = gradient_check(&game, a.points, a.h, a.seed);
    println!("{}", serde_json::to_string(&rep)?);
    Ok(())
}

fn cmd_beta(a: BetaArgs) -> anyhow::Result<()> {
    let m = parse_manifold(&a.manifold)?;
    let b = required_beta(a.epsilon, a.kl, a.lip, &m).map_err(|e| flag_error("--manifold", e))?;
    println!("{b}");
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let numerical = e
        .chain()
        .any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_numerical));
    if numerical {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(j) = cli.jobs {
        if j == 0 {
            eprintln!("error: --jobs must be positive");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j).build_global() {
            eprintln!("error: --jobs: {e}");
            return ExitCode::from(1);
        }
    }
    let res = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Ni(a) => cmd_ni(a),
        Command::Gibbs(a) => cmd_gibbs(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Beta(a) => cmd_beta(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
