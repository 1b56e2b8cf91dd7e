mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use racl::attacks::{robust_accuracy, transfer_eval, AttackConfig, AttackKind, ResultRow};
use racl::dataio::{self, load_dataset, load_toml_config, DatasetSpec};
use racl::search::{retrain, search_loop, RunDir, SavedModel, SearchConfig};
use racl::supernet::Genotype;
use racl::verify::{grad_check_target, run_suite, GradTarget, Suite};

#[derive(Parser)]
#[command(name = "racl", version, about = "Lipschitz-constrained cell search and adversarial evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search an architecture distribution and discretize it.
    Search {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train a genotype from fresh weights.
    Retrain {
        #[arg(long)]
        genotype: PathBuf,
        /// Train on PGD examples built from the configured attack.
        #[arg(long)]
        adv: bool,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate a saved model under attack, white-box or transferred.
    Attack {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "pgd")]
        attack: AttackKind,
        /// One or more budgets, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "0.03137254901960784")]
        eps: Vec<f64>,
        /// One or more iteration counts, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "7")]
        steps: Vec<usize>,
        /// Per-step size; a quarter of the budget when omitted.
        #[arg(long)]
        step_size: Option<f64>,
        /// Craft examples on this model and evaluate them on `--model`.
        #[arg(long)]
        source_model: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run a sampling-oracle suite; exits 1 on any tolerance breach.
    Verify {
        #[arg(long)]
        suite: Suite,
        /// Number of cases; a per-suite default when omitted.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference gradient checks; exits 1 above tolerance.
    Gradcheck {
        #[arg(long, default_value = "all")]
        target: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sweep and ablation tables from run directories and result files.
    Report {
        /// Search run directories (each with config.toml and history.csv).
        #[arg(long, num_args = 1..)]
        history: Vec<PathBuf>,
        /// Attack result CSV files.
        #[arg(long, num_args = 1..)]
        results: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed for both the run and the data.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

impl RunArgs {
    /// Loads the configuration and writes the resolved copy under `--out`.
    fn resolve(&self) -> Result<SearchConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_toml_config::<SearchConfig>(p).with_context(|| format!("reading {}", p.display()))?.0,
            None => SearchConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.data.seed = s;
        }
        cfg.validate()?;
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        dataio::save_toml(self.out.join("config.toml"), &cfg)?;
        Ok(cfg)
    }
}

/// The resolved settings of an attack run.
#[derive(Serialize, Deserialize)]
struct AttackRun {
    model: PathBuf,
    source_model: Option<PathBuf>,
    epsilons: Vec<f64>,
    steps: Vec<usize>,
    attack: AttackConfig,
    data: DatasetSpec,
}

fn search(run: &RunArgs) -> Result<()> {
    let cfg = run.resolve()?;
    let (train, _) = load_dataset(&cfg.data)?;
    let out = search_loop(&cfg, &train, Some(&RunDir(run.out.clone())))?;
    if let Some(last) = out.state.history.last() {
        println!(
            "epoch {}: ce {:.4} c {:.4} theta {:.4} mu {:.4} Pr[bound <= lambda*] {:.4}",
            last.epoch, last.ce, last.c, last.theta, last.mu, last.prob_bound_le_lambda
        );
    }
    println!("wrote {}", run.out.display());
    Ok(())
}

fn retrain_cmd(genotype: &Path, adv: bool, run: &RunArgs) -> Result<()> {
    let g = Genotype::load(genotype).with_context(|| format!("reading {}", genotype.display()))?;
    let cfg = run.resolve()?;
    g.validate(&cfg.supernet)?;
    let (train, test) = load_dataset(&cfg.data)?;
    let out = retrain(&g, &cfg, adv, &train, Some(&test))?;
    let model = SavedModel {
        spec: cfg.supernet.clone(),
        genotype: g,
        weights: out.network.weights.clone(),
    };
    model.save(run.out.join("model.json"))?;
    dataio::write_csv(run.out.join("curve.csv"), &out.curve)?;
    if let Some(last) = out.curve.last() {
        println!("epoch {}: train {:.4} test {:.4}", last.epoch, last.train_acc, last.test_acc);
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<racl::supernet::Network> {
    let m = SavedModel::load(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(m.network()?)
}

#[allow(clippy::too_many_arguments)]
fn attack_cmd(
    model: &Path,
    kind: AttackKind,
    eps: &[f64],
    steps: &[usize],
    step_size: Option<f64>,
    source: Option<&Path>,
    run: &RunArgs,
) -> Result<()> {
    let cfg = run.resolve()?;
    let target = load_model(model)?;
    let source_net = source.map(load_model).transpose()?;
    let (_, test) = load_dataset(&cfg.data)?;
    let base = AttackConfig {
        kind,
        seed: cfg.seed,
        ..cfg.attack
    };
    let mut rows = Vec::new();
    for &e in eps {
        for &s in steps {
            let c = AttackConfig {
                epsilon: e,
                steps: s,
                step_size: step_size.unwrap_or(e / 4.0),
                ..base
            };
            let white = robust_accuracy(&target, &test, &c)?;
            let row = match &source_net {
                Some(src) => ResultRow {
                    adv_acc: transfer_eval(src, &target, &test, &c)?,
                    ..white
                },
                None => white,
            };
            println!("{} eps {:.4} steps {}: clean {:.4} adv {:.4}", row.attack, e, s, row.clean_acc, row.adv_acc);
            rows.push(row);
        }
    }
    let record = AttackRun {
        model: model.to_path_buf(),
        source_model: source.map(Path::to_path_buf),
        epsilons: eps.to_vec(),
        steps: steps.to_vec(),
        attack: base,
        data: cfg.data.clone(),
    };
    dataio::save_toml(run.out.join("attack.toml"), &record)?;
    dataio::write_csv(run.out.join("results.csv"), &rows)?;
    Ok(())
}

fn default_cases(suite: Suite) -> usize {
    match suite {
        Suite::Fw => 100,
        Suite::Product => 20,
        Suite::Bound => 20,
        Suite::Constraint => 3,
    }
}

fn verify(suite: Suite, n: Option<usize>, seed: u64) -> Result<bool> {
    let rep = run_suite(suite, n.unwrap_or_else(|| default_cases(suite)), seed)?;
    let failures = rep.failures();
    let mut metrics: Vec<&str> = rep.cases.iter().map(|c| c.metric.as_str()).collect();
    metrics.sort_unstable();
    metrics.dedup();
    for m in metrics {
        println!("{suite:?} {m}: worst {:.3} of tolerance", rep.worst(m));
    }
    if failures.is_empty() {
        println!("{} checks passed", rep.cases.len());
        return Ok(true);
    }
    println!("{:>6}  {:<12} {:>14} {:>14}", "case", "metric", "value", "tolerance");
    for f in &failures {
        println!("{:>6}  {:<12} {:>14.6e} {:>14.6e}", f.case, f.metric, f.value, f.tolerance);
    }
    println!("{} of {} checks failed", failures.len(), rep.cases.len());
    Ok(false)
}

fn gradcheck(target: &str, seed: u64) -> Result<bool> {
    let targets: Vec<GradTarget> = match target {
        "all" => GradTarget::ALL.to_vec(),
        t => vec![t.parse()?],
    };
    let mut ok = true;
    for t in targets {
        let rep = grad_check_target(t, seed)?;
        let pass = rep.max_rel_err <= t.tolerance();
        ok &= pass;
        println!(
            "{t:?}: max relative error {:.3e} (tolerance {:.0e}, {} coordinates) {}",
            rep.max_rel_err,
            t.tolerance(),
            rep.coords_checked,
            if pass { "ok" } else { "FAILED" }
        );
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Search { run } => search(&run).map(|_| true),
        Command::Retrain { genotype, adv, run } => retrain_cmd(&genotype, adv, &run).map(|_| true),
        Command::Attack {
            model,
            attack,
            eps,
            steps,
            step_size,
            source_model,
            run,
        } => {
            if eps.is_empty() || steps.is_empty() {
                bail!("--eps and --steps need at least one value");
            }
            attack_cmd(&model, attack, &eps, &steps, step_size, source_model.as_deref(), &run).map(|_| true)
        }
        Command::Verify { suite, n, seed } => verify(suite, n, seed),
        Command::Gradcheck { target, seed } => gradcheck(&target, seed),
        Command::Report { history, results, out } => report::write(&history, &results, &out).map(|_| true),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
