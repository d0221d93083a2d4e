//! Subcommand implementations: train, eval, sweep, verify.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use air_core::eval::{gap_decomposition_reps, GapReport};
use air_core::oracle::verify::{run_verification, VerifyConfig};
use air_core::train::{train, TrainHistory};

use crate::config::{config_hash, ExperimentConfig, SweepSpec};
use crate::csvio::TableWriter;
use crate::model_file::{load_model_into, save_model};
use crate::CliError;

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn write_history_csv(
    path: &Path,
    history: &TrainHistory,
    seed: u64,
    hash: &str,
    extras: &str,
) -> Result<(), CliError> {
    let mut w = TableWriter::create_with(path, seed, hash, extras, "iter,train_loss,val_bound")?;
    for r in &history.records {
        w.row(&format!("{},{},{}", r.iter, r.train_loss, r.val_bound))?;
    }
    w.finish()
}

/// Train one experiment into `out`: `history.csv`, `model.airm` (best
/// checkpoint), `resolved-config.json`, and the dataset provenance sidecar.
/// Divergence still writes all artifacts, then surfaces as exit code 3.
pub fn cmd_train(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<PathBuf, CliError> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    ensure_dir(out)?;
    let dataset = cfg.load_dataset()?;
    if dataset.d != cfg.decoder_arch().terminal_width() {
        return Err(CliError::Config(format!(
            "decoder output width {} does not match data dimensionality {}",
            cfg.decoder_arch().terminal_width(),
            dataset.d
        )));
    }
    let mut model = cfg.build_model(dataset.d)?;
    let hash = config_hash(&cfg);

    let resolved = serde_json::to_string_pretty(&cfg).expect("config serializes");
    std::fs::write(out.join("resolved-config.json"), resolved)
        .map_err(|e| CliError::Io(format!("resolved-config.json: {e}")))?;
    dataset
        .write_provenance_sidecar(&out.join("provenance.json"))
        .map_err(|e| CliError::Io(e.to_string()))?;

    let history = train(&mut model, &dataset, &cfg.objective, &cfg.train)
        .map_err(|e| CliError::Config(e.to_string()))?;

    write_history_csv(
        &out.join("history.csv"),
        &history,
        cfg.train.seed,
        &hash,
        &provenance_extras(&dataset),
    )?;
    model.set_params(&history.best_params);
    save_model(&out.join("model.airm"), &model)?;

    if let Some(d) = &history.diverged {
        return Err(CliError::Divergence(format!(
            "training diverged at iteration {}: {}",
            d.iter, d.message
        )));
    }
    log::info!(
        "trained {} iterations, best validation bound {:.4} at iteration {}",
        cfg.train.iters,
        history.best_val_bound,
        history.best_iteration
    );
    Ok(out.to_path_buf())
}

fn provenance_extras(dataset: &air_core::data::Dataset) -> String {
    match dataset.provenance.binarize_seed {
        Some(s) => format!("binarize_seed={s}"),
        None => String::new(),
    }
}

fn write_gap_csv(
    path: &Path,
    report: &GapReport,
    seed: u64,
    hash: &str,
    extras: &str,
) -> Result<(), CliError> {
    let mut w = TableWriter::create_with(
        path,
        seed,
        hash,
        extras,
        "split,neg_log_px,delta_infer,delta_ap,delta_am,neg_bound,k,ell,svi_steps",
    )?;
    w.row(&format!(
        "test,{},{},{},{},{},{},{},{}",
        -report.log_px,
        report.delta_infer,
        report.delta_ap,
        report.delta_am,
        -report.amortized_bound,
        report.k_used,
        report.svi.ell,
        report.svi.steps
    ))?;
    w.finish()
}

/// Evaluate a trained model on the test split and emit `gap_report.csv`.
pub fn cmd_eval(
    model_path: &Path,
    config_path: &Path,
    out: &Path,
    seed: Option<u64>,
    eval_k: Option<usize>,
    svi_steps: Option<usize>,
) -> Result<GapReport, CliError> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(s) = svi_steps {
        cfg.svi.steps = s;
    }
    ensure_dir(out)?;
    let dataset = cfg.load_dataset()?;
    let mut model = cfg.build_model(dataset.d)?;
    load_model_into(model_path, &mut model)?;
    let k = eval_k.unwrap_or(cfg.objective.k);
    let eval_seed = seed.unwrap_or_else(|| cfg.eval_seed());
    let report =
        gap_decomposition_reps(&model, &dataset.test, k, cfg.eval_reps, &cfg.svi, eval_seed)
            .map_err(|e| CliError::Config(e.to_string()))?;
    write_gap_csv(
        &out.join("gap_report.csv"),
        &report,
        eval_seed,
        &config_hash(&cfg),
        &provenance_extras(&dataset),
    )?;
    log::info!(
        "eval: -ln p(x) ≈ {:.4}, Δ_infer ≈ {:.4} ({} diverged examples)",
        -report.log_px,
        report.delta_infer,
        report.diverged_examples
    );
    Ok(report)
}

struct SweepRow {
    value: f64,
    k: usize,
    seed: u64,
    result: Result<GapReport, String>,
}

/// Train and evaluate one model per `(axis value, k)` cell, emit a
/// long-format `sweep.csv` plus per-k baseline-subtracted curve TSVs.
/// Child failures are recorded and the sweep continues.
pub fn cmd_sweep(sweep_path: &Path, out: &Path, jobs: usize, seed: Option<u64>) -> Result<(), CliError> {
    let mut spec = SweepSpec::load(sweep_path)?;
    if let Some(s) = seed {
        spec.base.train.seed = s;
    }
    ensure_dir(out)?;
    let values = spec.values_with_baseline();
    let mut cells = Vec::new();
    for &v in &values {
        for &k in &spec.k {
            cells.push((v, k));
        }
    }

    let next = AtomicUsize::new(0);
    let rows: Mutex<Vec<Option<SweepRow>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    let spec_ref = &spec;
    let cells_ref = &cells;
    let rows_ref = &rows;
    let next_ref = &next;
    let jobs = jobs.max(1);
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(cells.len()) {
            scope.spawn(move || loop {
                let i = next_ref.fetch_add(1, Ordering::SeqCst);
                if i >= cells_ref.len() {
                    break;
                }
                let (value, k) = cells_ref[i];
                let row = run_sweep_cell(spec_ref, out, value, k);
                rows_ref.lock().unwrap()[i] = Some(row);
            });
        }
    });
    let rows: Vec<SweepRow> =
        rows.into_inner().unwrap().into_iter().map(|r| r.expect("all cells ran")).collect();

    let hash = config_hash(&spec);
    let mut w = TableWriter::create(
        &out.join("sweep.csv"),
        spec.base.train.seed,
        &hash,
        "axis,value,k,neg_log_px,neg_bound,delta_infer,seed,status",
    )?;
    // rows are generated in (value, k) order already
    for row in &rows {
        match &row.result {
            Ok(rep) => w.row(&format!(
                "{},{},{},{},{},{},{},ok",
                spec.axis.as_str(),
                row.value,
                row.k,
                -rep.log_px,
                -rep.amortized_bound,
                rep.delta_infer,
                row.seed
            ))?,
            Err(msg) => {
                log::warn!("sweep cell (value={}, k={}) failed: {msg}", row.value, row.k);
                w.row(&format!(
                    "{},{},{},,,,{},failed",
                    spec.axis.as_str(),
                    row.value,
                    row.k,
                    row.seed
                ))?;
            }
        }
    }
    w.finish()?;

    // per-k curves relative to the value = 0 baseline
    for &k in &spec.k {
        let baseline = rows
            .iter()
            .find(|r| r.k == k && r.value == 0.0)
            .and_then(|r| r.result.as_ref().ok())
            .map(|rep| -rep.log_px);
        let Some(base) = baseline else {
            log::warn!("k={k}: baseline run missing or failed; skipping curve");
            continue;
        };
        let mut w = TableWriter::create(
            &out.join(format!("curve_k{k}.tsv")),
            spec.base.train.seed,
            &hash,
            "value\tneg_log_px_minus_baseline",
        )?;
        for row in rows.iter().filter(|r| r.k == k) {
            if let Ok(rep) = &row.result {
                w.row(&format!("{}\t{}", row.value, -rep.log_px - base))?;
            }
        }
        w.finish()?;
    }
    Ok(())
}

fn run_sweep_cell(spec: &SweepSpec, out: &Path, value: f64, k: usize) -> SweepRow {
    let seed = spec.base.train.seed;
    let result = (|| -> Result<GapReport, String> {
        let child = spec.child(value, k).map_err(|e| e.to_string())?;
        let dir = out.join(format!("v{value}_k{k}"));
        std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        let cfg_path = dir.join("config.json");
        std::fs::write(&cfg_path, serde_json::to_string_pretty(&child).unwrap())
            .map_err(|e| e.to_string())?;
        cmd_train(&cfg_path, &dir, None).map_err(|e| e.to_string())?;
        cmd_eval(&dir.join("model.airm"), &cfg_path, &dir, None, None, None)
            .map_err(|e| e.to_string())
    })();
    SweepRow { value, k, seed, result }
}

/// Run the oracle suite; returns true iff every check passed.
pub fn cmd_verify(
    out: &Path,
    seed: Option<u64>,
    mc_draws: Option<usize>,
    bound_samples: Option<usize>,
    tol_overrides: &[String],
) -> Result<bool, CliError> {
    let mut cfg = VerifyConfig::default();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(m) = mc_draws {
        cfg.mc_draws = m;
    }
    if let Some(b) = bound_samples {
        cfg.bound_samples = b;
    }
    for t in tol_overrides {
        let (name, value) = t.split_once('=').ok_or_else(|| {
            CliError::Config(format!("--tol expects name=value, got `{t}`"))
        })?;
        let value: f64 = value
            .parse()
            .map_err(|_| CliError::Config(format!("--tol `{t}`: value is not a number")))?;
        cfg.overrides.insert(name.to_string(), value);
    }
    ensure_dir(out)?;
    let rows = run_verification(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
    let hash = config_hash(&serde_json::json!({
        "seed": cfg.seed, "mc_draws": cfg.mc_draws, "bound_samples": cfg.bound_samples,
    }));
    let mut w = TableWriter::create(
        &out.join("verify.tsv"),
        cfg.seed,
        &hash,
        "check_name\tstatus\tvalue\tthreshold",
    )?;
    let mut all = true;
    for r in &rows {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("{status}\t{}\t{:.6e}\t{:.6e}", r.name, r.value, r.threshold);
        w.row(&format!("{}\t{status}\t{}\t{}", r.name, r.value, r.threshold))?;
        all &= r.passed;
    }
    w.finish()?;
    Ok(all)
}
