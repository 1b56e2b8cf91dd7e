//! Sweep and ablation tables as CSV. Values are printed at fixed precision
//! so reruns on the same inputs are byte-identical.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use racl::attacks::ResultRow;
use racl::dataio::{self, load_toml_config};
use racl::search::{HistoryRow, SearchConfig};

/// Budgets outside this range are left out of the sweep table.
const EPS_RANGE: (f64, f64) = (0.01, 0.07);

struct Labeled {
    run: String,
    row: ResultRow,
}

/// `results.csv` is named after its directory, anything else after its stem.
fn label(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if stem != "results" {
        return stem;
    }
    path.parent()
        .and_then(Path::file_name)
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or(stem)
}

fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    dataio::read_csv(path).with_context(|| format!("reading {}", path.display()))
}

fn distinct<T: PartialEq + Copy>(rows: &[&Labeled], f: impl Fn(&ResultRow) -> T) -> usize {
    let mut seen: Vec<T> = Vec::new();
    for r in rows {
        let v = f(&r.row);
        if !seen.contains(&v) {
            seen.push(v);
        }
    }
    seen.len()
}

fn group_key(r: &Labeled, by_eps: bool) -> (String, String, String) {
    let fixed = if by_eps { r.row.steps.to_string() } else { format!("{:.4}", r.row.epsilon) };
    (r.run.clone(), r.row.attack.clone(), fixed)
}

/// Groups sharing `(run, attack, fixed)` that vary in the other coordinate.
fn sweep(rows: &[Labeled], by_eps: bool) -> String {
    let mut out = String::from(if by_eps {
        "run,attack,steps,epsilon,clean_acc,adv_acc\n"
    } else {
        "run,attack,epsilon,steps,clean_acc,adv_acc\n"
    });
    let keys: BTreeSet<_> = rows.iter().map(|r| group_key(r, by_eps)).collect();
    for key in keys {
        let mut group: Vec<&Labeled> = rows
            .iter()
            .filter(|r| group_key(r, by_eps) == key)
            .filter(|r| !by_eps || (EPS_RANGE.0 - 1e-12..=EPS_RANGE.1 + 1e-12).contains(&r.row.epsilon))
            .collect();
        let varying = if by_eps {
            distinct(&group, |r| r.epsilon.to_bits())
        } else {
            distinct(&group, |r| r.steps)
        };
        if varying < 2 {
            continue;
        }
        group.sort_by(|a, b| a.row.epsilon.total_cmp(&b.row.epsilon).then(a.row.steps.cmp(&b.row.steps)));
        for r in group {
            let (x, y) = if by_eps {
                (r.row.steps.to_string(), format!("{:.4}", r.row.epsilon))
            } else {
                (format!("{:.4}", r.row.epsilon), r.row.steps.to_string())
            };
            let _ = writeln!(out, "{},{},{x},{y},{:.4},{:.4}", r.run, r.row.attack, r.row.clean_acc, r.row.adv_acc);
        }
    }
    out
}

fn ablation(dirs: &[PathBuf]) -> Result<String> {
    let mut out =
        String::from("run,mode,rho,eta,epochs,ce,c,theta,mu,var,prob_bound_le_lambda,clean_acc,worst_adv_acc\n");
    for dir in dirs {
        let cfg_path = dir.join("config.toml");
        let (cfg, _) =
            load_toml_config::<SearchConfig>(&cfg_path).with_context(|| format!("reading {}", cfg_path.display()))?;
        let hist_path = dir.join("history.csv");
        let history: Vec<HistoryRow> =
            dataio::read_csv(&hist_path).with_context(|| format!("reading {}", hist_path.display()))?;
        let last = history
            .last()
            .with_context(|| format!("{} has no rows", hist_path.display()))?;
        let results = dir.join("results.csv");
        let (clean, worst) = if results.exists() {
            let rows = read_results(&results)?;
            let clean = rows.iter().map(|r| r.clean_acc).fold(f64::NAN, f64::max);
            let worst = rows.iter().map(|r| r.adv_acc).fold(f64::NAN, f64::min);
            (format!("{clean:.4}"), format!("{worst:.4}"))
        } else {
            (String::new(), String::new())
        };
        let name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let mode = if cfg.constrained() { "constrained" } else { "unconstrained" };
        let _ = writeln!(
            out,
            "{name},{mode},{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{clean},{worst}",
            cfg.rho, cfg.eta, last.epoch, last.ce, last.c, last.theta, last.mu, last.var, last.prob_bound_le_lambda
        );
    }
    Ok(out)
}

pub fn write(history: &[PathBuf], results: &[PathBuf], out: &Path) -> Result<()> {
    let mut rows = Vec::new();
    for p in results {
        let run = label(p);
        rows.extend(read_results(p)?.into_iter().map(|row| Labeled { run: run.clone(), row }));
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let tables = [
        ("eps_sweep.csv", sweep(&rows, true)),
        ("steps_sweep.csv", sweep(&rows, false)),
        ("ablation.csv", ablation(history)?),
    ];
    for (name, text) in tables {
        let path = out.join(name);
        fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
        println!("{name}: {} rows", text.lines().count() - 1);
    }
    Ok(())
}
