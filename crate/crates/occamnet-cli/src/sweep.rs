//! Grid sweeps over hidden size, penalty ceiling, and regimen. Every cell
//! shares the base seed so rows are comparable; a failed cell reports its
//! error in the table and the rest keep running.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use anyhow::{bail, Context, Result};
use occamnet::objectives::Regimen;

use crate::config::{regimen_name, ModelSpec, ResolvedConfig, TaskArg};
use crate::task::{run_training, RunSummary};

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(
            part.parse::<T>()
                .map_err(|_| anyhow::anyhow!("bad {what} value: {part:?}"))?,
        );
    }
    if out.is_empty() {
        bail!("{what} list is empty");
    }
    Ok(out)
}

fn parse_regimens(s: &str) -> Result<Vec<Regimen>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        match part {
            "" => continue,
            "flat" => out.push(Regimen::Flat),
            "linear" => out.push(Regimen::Linear),
            "quad" => out.push(Regimen::Quadratic),
            other => bail!("bad regimen value: {other:?} (expected flat, linear, or quad)"),
        }
    }
    if out.is_empty() {
        bail!("regimen list is empty");
    }
    Ok(out)
}

fn base_hidden(spec: &ModelSpec) -> usize {
    match *spec {
        ModelSpec::Classifier { hidden, .. }
        | ModelSpec::Scorer { hidden, .. }
        | ModelSpec::Hg { hidden, .. }
        | ModelSpec::Reader { hidden, .. } => hidden,
    }
}

fn with_hidden(spec: &ModelSpec, h: usize) -> ModelSpec {
    let mut s = spec.clone();
    match &mut s {
        ModelSpec::Classifier { hidden, .. }
        | ModelSpec::Scorer { hidden, .. }
        | ModelSpec::Hg { hidden, .. }
        | ModelSpec::Reader { hidden, .. } => *hidden = h,
    }
    s
}

/// One grid cell's resolved config: the base with the cell's axis values.
fn cell_config(base: &ResolvedConfig, hidden: usize, lambda: f64, regimen: Regimen) -> ResolvedConfig {
    let mut cfg = base.clone();
    cfg.model = with_hidden(&base.model, hidden);
    cfg.train.sparsity.lambda_max = lambda;
    cfg.train.sparsity.regimen = regimen;
    if cfg.task == TaskArg::Babi {
        if let Some(ans) = cfg.answer.as_mut() {
            ans.lambda_word = lambda;
        }
    }
    cfg
}

fn row_text(hidden: usize, lambda: f64, regimen: Regimen, result: &Result<RunSummary>) -> String {
    let reg = regimen_name(regimen);
    match result {
        Ok(s) => {
            let test = s
                .test_metric
                .map(|v| v.to_string())
                .unwrap_or_else(|| "NA".to_string());
            format!(
                "{hidden}\t{lambda}\t{reg}\t{}\t{test}\t{}\tok",
                s.best_val_metric, s.mean_gate
            )
        }
        Err(e) => {
            let msg: String = format!("{e:#}")
                .chars()
                .map(|c| if c == '\t' || c == '\n' { ' ' } else { c })
                .collect();
            format!("{hidden}\t{lambda}\t{reg}\tNA\tNA\tNA\t{msg}")
        }
    }
}

pub fn run_sweep(
    base: &ResolvedConfig,
    hidden_grid: Option<&str>,
    lambda_grid: &str,
    regimen_grid: Option<&str>,
    jobs: usize,
    out: &Path,
) -> Result<()> {
    let hiddens: Vec<usize> = match hidden_grid {
        Some(s) => parse_list(s, "hidden")?,
        None => vec![base_hidden(&base.model)],
    };
    let lambdas: Vec<f64> = parse_list(lambda_grid, "lambda")?;
    if lambdas.iter().any(|l| *l < 0.0) {
        bail!("lambda grid values must be nonnegative");
    }
    let regimens: Vec<Regimen> = match regimen_grid {
        Some(s) => parse_regimens(s)?,
        None => vec![base.train.sparsity.regimen],
    };

    let mut cells = Vec::new();
    for &h in &hiddens {
        for &l in &lambdas {
            for &r in &regimens {
                cells.push((h, l, r));
            }
        }
    }

    let workers = if jobs == 0 {
        thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        jobs
    }
    .min(cells.len());

    let next = AtomicUsize::new(0);
    let done: Mutex<Vec<(usize, String)>> = Mutex::new(Vec::with_capacity(cells.len()));
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                let (h, l, r) = cells[i];
                log::info!("sweep cell {}/{}: hidden {h} lambda {l} {}", i + 1, cells.len(), regimen_name(r));
                let cfg = cell_config(base, h, l, r);
                let result = run_training(&cfg, None, None);
                let row = row_text(h, l, r, &result);
                done.lock().expect("sweep worker panicked").push((i, row));
            });
        }
    });

    let mut rows = done.into_inner().expect("sweep worker panicked");
    rows.sort_by_key(|(i, _)| *i);

    let mut table = String::from(
        "hidden\tlambda_max\tregimen\tbest_val_metric\ttest_metric\tmean_gate\tstatus\n",
    );
    for (_, row) in &rows {
        table.push_str(row);
        table.push('\n');
    }
    fs::write(out, table).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}
