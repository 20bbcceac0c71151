//! One function per subcommand. Each returns the text meant for stdout;
//! the checking commands also report whether every check held.

use std::fs;
use std::path::{Path, PathBuf};

use mfedch::dataset::{save_views, write_matrix_csv};
use mfedch::diagnostics::{
    column_sum_residual, cross_view_alignment, laplacian_equivalence_gap, laplacian_gap_bound, normalize_columns,
    scatter_matrix,
};
use mfedch::evaluation::{run_d_sweep, run_raw_baseline, FitOptionsSer};
use mfedch::gradients::GradBlock;
use mfedch::trainer::{FitError, FitOutcome};
use mfedch::{
    fit_with, run_experiment, BlobSpec, Error, ExperimentOptions, FitOptions, Model, MultiViewDataset, Result,
    ResultsTable, TrainState,
};
use serde_json::json;

use crate::config::{DatasetSection, RunConfig};

/// Largest analytic-vs-numeric relative error `gradcheck` accepts.
pub const GRADCHECK_TOL: f64 = 1e-4;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Echo of everything needed to repeat the run.
pub fn write_run_json(dir: &Path, command: &str, cfg: &RunConfig, extra: serde_json::Value) -> Result<()> {
    create_dir(dir)?;
    let doc = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "parallel": mfedch::parallel_enabled(),
        "config": cfg,
        "args": extra,
    });
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Config(e.to_string()))?;
    write_text(&dir.join("run.json"), &(text + "\n"))
}

pub fn synth(spec: &BlobSpec, out: &Path) -> Result<String> {
    let ds = mfedch::synth_blobs(spec)?;
    create_dir(out)?;
    let files = save_views(&ds, out)?;
    let cfg = RunConfig {
        dataset: Some(DatasetSection {
            synth: Some(spec.clone()),
            ..Default::default()
        }),
        ..Default::default()
    };
    write_run_json(out, "synth", &cfg, json!({ "out": out }))?;
    Ok(files.iter().map(|f| format!("{}\n", f.display())).collect())
}

fn fit_options(cfg: &RunConfig) -> FitOptions {
    FitOptions {
        mode: cfg.experiment.sweep_mode,
    }
}

/// Writes the last consistent state of a failed fit next to the outputs.
fn dump_failure(dir: &Path, failure: &FitError) -> Result<PathBuf> {
    let dump = dir.join("failure_state");
    create_dir(&dump)?;
    let state: &TrainState = &failure.state;
    write_matrix_csv(&dump.join("P.csv"), &state.p.stacked().transpose())?;
    for (m, w) in state.w.views().iter().enumerate() {
        write_matrix_csv(&dump.join(format!("W_{}.csv", m + 1)), w)?;
    }
    write_text(&dump.join("loss_history.csv"), &history_csv(&state.loss_history))?;
    let meta = json!({
        "error": failure.error.to_string(),
        "iter": state.iter,
        "adam_p_t": state.adam_p.t,
    });
    write_text(&dump.join("state.json"), &format!("{meta:#}\n"))?;
    Ok(dump)
}

fn history_csv(history: &[f64]) -> String {
    let mut s = String::from("iteration,total_loss\n");
    for (t, l) in history.iter().enumerate() {
        s.push_str(&format!("{t},{l:?}\n"));
    }
    s
}

fn run_fit(cfg: &RunConfig, ds: &MultiViewDataset, out: &Path) -> Result<FitOutcome> {
    fit_with(ds, &cfg.hyper, cfg.experiment.fit_seed, fit_options(cfg)).map_err(|failure| {
        match dump_failure(out, &failure) {
            Ok(dump) => eprintln!("state dumped to {}", dump.display()),
            Err(e) => eprintln!("could not dump state: {e}"),
        }
        Error::from(failure)
    })
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<String> {
    write_run_json(out, "train", cfg, json!({ "out": out }))?;
    let ds = cfg.load_dataset()?;
    let outcome = run_fit(cfg, &ds, out)?;
    outcome.model.save(out)?;
    write_text(&out.join("loss_history.csv"), &history_csv(&outcome.state.loss_history))?;
    let meta = &outcome.model.meta;
    Ok(format!(
        "iterations={} converged={} initial_loss={:?} final_loss={:?}\n",
        meta.iterations, meta.converged, outcome.state.loss_history[0], meta.final_loss
    ))
}

pub fn eval(cfg: &RunConfig, model_dir: &Path, out: &Path) -> Result<String> {
    write_run_json(out, "eval", cfg, json!({ "model": model_dir, "out": out }))?;
    let model = Model::load(model_dir)?;
    let ds = cfg.load_dataset()?;
    model.check_against(&ds)?;
    let e = &cfg.experiment;
    let mut tables = Vec::new();
    let mut baselines = Vec::new();
    for &per_class in &e.per_class {
        let opts = ExperimentOptions {
            per_class,
            repeats: e.repeats,
            base_seed: e.base_seed,
            view_names: cfg.view_names(),
            parallel_repeats: e.parallel_repeats,
            fit: FitOptionsSer { mode: e.sweep_mode },
        };
        tables.push(match &e.d_sweep {
            Some(dims) => run_d_sweep(&ds, &model.hyper, dims, &opts)?,
            None => run_experiment(&ds, &model.hyper, &opts)?,
        });
        baselines.push(run_raw_baseline(&ds, &opts)?);
    }
    let table = ResultsTable::concat(tables).expect("per_class is non-empty");
    let baseline = ResultsTable::concat(baselines).expect("per_class is non-empty");
    table.write(out, "results")?;
    baseline.write(out, "baseline")?;
    Ok(table.to_text())
}

fn block_label(b: GradBlock) -> String {
    match b {
        GradBlock::Column { view, sample } => format!("w:{view}:{sample}"),
        GradBlock::Projection => "P".into(),
    }
}

/// The CSV and whether every instance is within [`GRADCHECK_TOL`].
pub fn gradcheck(cfg: &RunConfig, out: &Path) -> Result<(String, bool)> {
    write_run_json(out, "gradcheck", cfg, json!({ "out": out }))?;
    let plan = &cfg.gradcheck;
    let mut csv = String::from("instance,views,n,dims,d,max_rel_err,worst_block,worst_coordinate,pass\n");
    let mut worst = 0.0f64;
    for k in 0..plan.instances {
        let inst = plan.instance(k)?;
        let r = mfedch::check_gradients(&inst.p, &inst.w, &inst.ds, &inst.h, plan.step)?;
        let dims: Vec<String> = inst.ds.view_dims().iter().map(|x| x.to_string()).collect();
        csv.push_str(&format!(
            "{k},{},{},{},{},{:?},{},{},{}\n",
            inst.ds.n_views(),
            inst.ds.n_samples(),
            dims.join(";"),
            inst.h.d,
            r.max_rel_err,
            block_label(r.worst_coordinate.0),
            r.worst_coordinate.1,
            r.max_rel_err <= GRADCHECK_TOL
        ));
        worst = worst.max(r.max_rel_err);
    }
    write_text(&out.join("gradcheck.csv"), &csv)?;
    Ok((csv, worst <= GRADCHECK_TOL))
}

struct Check {
    name: String,
    value: f64,
    bound: f64,
    pass: bool,
}

/// Fits on the configured data and checks the scatter and Laplacian
/// identities on a column-normalized copy of every `W^m`. Returns the CSV
/// and whether all checks hold.
pub fn diagnose(cfg: &RunConfig, out: &Path) -> Result<(String, bool)> {
    write_run_json(out, "diagnose", cfg, json!({ "out": out }))?;
    let ds = cfg.load_dataset()?;
    let outcome = run_fit(cfg, &ds, out)?;
    let state = &outcome.state;
    let emb = state.p.embed(&ds)?;
    let mut checks = Vec::new();
    let mut push = |name: String, value: f64, bound: f64| {
        checks.push(Check {
            name,
            value,
            bound,
            pass: value <= bound,
        })
    };
    for (m, (w, y)) in state.w.views().iter().zip(&emb).enumerate() {
        let wn = normalize_columns(w)?;
        let s = scatter_matrix(&wn)?.s;
        push(
            format!("scatter_asymmetry_view{}", m + 1),
            (&s - s.transpose()).amax(),
            1e-12,
        );
        push(
            format!("column_sum_residual_view{}", m + 1),
            column_sum_residual(&wn)?,
            1e-10,
        );
        push(
            format!("laplacian_gap_view{}", m + 1),
            laplacian_equivalence_gap(y, &wn)?,
            laplacian_gap_bound(y),
        );
    }
    push(
        "cross_view_alignment_abs".into(),
        cross_view_alignment(&state.w)?.abs(),
        1.0,
    );
    let mut csv = String::from("check,value,bound,pass\n");
    for c in &checks {
        csv.push_str(&format!("{},{:?},{:?},{}\n", c.name, c.value, c.bound, c.pass));
    }
    write_text(&out.join("diagnostics.csv"), &csv)?;
    let pass = checks.iter().all(|c| c.pass);
    Ok((csv, pass))
}
