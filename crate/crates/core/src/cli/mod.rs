//! Command-line front end. Every report is a JSON envelope holding the
//! format version, the resolved configuration and the result.

mod args;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::error::ErrorKind;
use clap::Parser;
use serde::Serialize;
use serde_json::{json, Value};

pub use args::*;

use crate::bundle::{load_bundle, load_feature_table, save_labeled, FeatureTable};
use crate::discover::{discover_report, GroundTruth, Oracle};
use crate::error::{Error, Result};
use crate::explain::{significant_features, synthetic_task, ExplainConfig};
use crate::improve::{
    active_learning, flip_report, selective_prediction, split_seed_set, validate_flip_threshold, ActiveConfig,
    CommandTrainer, Selection, TrainerRequest,
};
use crate::mixture::Mode;
use crate::sdm::{error_prone_from, fit_domino, fit_edisa, infer_slices, FitConfig, SliceModel};
use crate::synth::{
    generate_classifier_scenario, generate_planted, load_scenario, write_scenario, PlantedSpec, ScenarioSpec,
    ScenarioTrainer, TrainerConfig,
};

pub const REPORT_FORMAT_VERSION: u32 = 1;
pub const THREADS_ENV: &str = "SLICEKIT_THREADS";

/// Parses `argv`, runs the command and returns the process exit status.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    if let Err(e) = apply_thread_cap() {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn apply_thread_cap() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    match raw.trim().parse::<usize>() {
        Ok(n) if n >= 1 => {
            if !crate::par::init_threads(n) {
                log::debug!("{THREADS_ENV}={n} not applied: pool already built or built without parallelism");
            }
            Ok(())
        }
        _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {raw:?}"))),
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let seed = cli.seed;
    match &cli.command {
        Command::Fit(c) => fit(c, seed),
        Command::Infer(c) => infer(c, seed),
        Command::Discover(c) => discover(c, seed),
        Command::Explain(ExplainCmd::Significance(c)) => significance(c, seed),
        Command::Explain(ExplainCmd::Synthetic(c)) => synthetic(c, seed),
        Command::Improve(ImproveCmd::Selective(c)) => selective(c, seed),
        Command::Improve(ImproveCmd::Flip(c)) => flip(c, seed),
        Command::Improve(ImproveCmd::Active(c)) => active(c, seed),
        Command::Synth(SynthCmd::Planted(c)) => planted(c, seed),
        Command::Synth(SynthCmd::Scenario(c)) => scenario(c, seed),
        Command::Synth(SynthCmd::Train(c)) => serve_request(c),
    }
}

#[derive(Serialize)]
struct Envelope<'a, R: Serialize> {
    format_version: u32,
    tool: &'static str,
    tool_version: &'static str,
    command: &'a str,
    config: &'a Value,
    result: &'a R,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_report<R: Serialize>(path: &Path, command: &str, config: &Value, result: &R) -> Result<()> {
    let env = Envelope {
        format_version: REPORT_FORMAT_VERSION,
        tool: env!("CARGO_PKG_NAME"),
        tool_version: env!("CARGO_PKG_VERSION"),
        command,
        config,
        result,
    };
    let mut text = serde_json::to_string_pretty(&env)?;
    text.push('\n');
    write_text(path, &text)
}

/// Companion file next to a report, e.g. `r.json` → `r.baseline.csv`.
fn companion(report: &Path, suffix: &str) -> PathBuf {
    let stem = report.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "report".into());
    report.with_file_name(format!("{stem}{suffix}"))
}

fn fit_model(bundle: &crate::bundle::LabeledBundle, cfg: &FitConfig) -> Result<SliceModel> {
    match cfg.weights.mode {
        Mode::Edisa => fit_edisa(bundle, cfg),
        Mode::Domino => fit_domino(bundle, cfg),
    }
}

fn oracle_for(dir: &Path, bundle: &crate::bundle::UnlabeledBundle) -> Result<(GroundTruth, Oracle)> {
    let truth = GroundTruth::load_sidecar(dir)?;
    let oracle = Oracle::new(bundle, &truth)?;
    Ok((truth, oracle))
}

fn pct(x: Option<f64>) -> String {
    x.map_or_else(|| "N/A".into(), |v| format!("{v:.2}"))
}

fn fit(c: &FitCmd, seed: u64) -> Result<()> {
    let cfg = c.fit.resolve(WeightDefaults::Discover, seed)?;
    let bundle = load_bundle(&c.train)?.into_labeled()?;
    let model = fit_model(&bundle, &cfg)?;
    model.save(&c.out)?;
    let r = &model.fit_report;
    if let Some(path) = &c.report {
        let config = json!({ "seed": seed, "train": c.train, "out": c.out, "fit": cfg });
        let result = json!({
            "k": model.k,
            "pca_dim": model.pca.d(),
            "error_slices": model.error_slices,
            "slices": r.slices,
            "iterations": r.iterations,
            "converged": r.converged,
            "objective": r.trajectory.last(),
            "reseeds": r.reseeds,
        });
        write_report(path, "fit", &config, &result)?;
    }
    println!(
        "fit: {} points, k={}, {} error slices, {} EM iterations{} -> {}",
        bundle.len(),
        model.k,
        model.error_slices.len(),
        r.iterations,
        if r.converged { "" } else { " (not converged)" },
        c.out.display()
    );
    Ok(())
}

fn infer(c: &InferCmd, seed: u64) -> Result<()> {
    let model = SliceModel::load(&c.model)?;
    let bundle = load_bundle(&c.bundle)?.into_unlabeled();
    let a = infer_slices(&model, &bundle)?;
    let det = error_prone_from(&model, &a);
    for w in &det.warnings {
        log::warn!("{w}");
    }
    let config = json!({ "seed": seed, "model": c.model, "bundle": c.bundle, "out": c.out });
    let result = json!({
        "num_points": a.len(),
        "error_slices": model.error_slices,
        "error_prone": det.ids,
        "warnings": det.warnings,
    });
    write_report(&c.out, "infer", &config, &result)?;
    write_text(&companion(&c.out, ".csv"), &a.to_csv())?;
    println!("infer: {} of {} points error-prone -> {}", det.ids.len(), a.len(), c.out.display());
    Ok(())
}

fn discover(c: &DiscoverCmd, seed: u64) -> Result<()> {
    let model = SliceModel::load(&c.model)?;
    let bundle = load_bundle(&c.bundle)?.into_unlabeled();
    let (_, oracle) = oracle_for(&c.bundle, &bundle)?;
    let a = infer_slices(&model, &bundle)?;
    let det = error_prone_from(&model, &a);
    let name = model.mode.to_string();
    let report = discover_report(&[(name.as_str(), &det.ids)], &bundle, &oracle, seed)?;
    let config = json!({ "seed": seed, "model": c.model, "bundle": c.bundle, "out": c.out });
    write_report(&c.out, "discover", &config, &report)?;
    write_text(&companion(&c.out, ".csv"), &report.to_csv())?;
    let row = |m: &str| report.row(m).map(|r| (r.num, pct(r.efficacy))).unwrap_or((0, "N/A".into()));
    let (n, eff) = row(&name);
    println!(
        "discover: {name} selected {n}, efficacy {eff} (confidence {}, random {}) -> {}",
        row("confidence").1,
        row("random").1,
        c.out.display()
    );
    Ok(())
}

fn features_path(bundle: &Path, explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| bundle.join("features.jsonl"))
}

fn significance(c: &SignificanceCmd, seed: u64) -> Result<()> {
    let bundle = load_bundle(&c.bundle)?.into_labeled()?;
    let fpath = features_path(&c.bundle, &c.features);
    let features: FeatureTable = load_feature_table(&fpath)?;
    let ecfg = ExplainConfig { alpha: c.alpha, n_perm: c.n_perm, seed, homo_denominator: c.homo_denominator.into() };
    ecfg.validate()?;
    let (model, fit_cfg) = match (&c.model, c.refit) {
        (Some(path), false) => (SliceModel::load(path)?, None),
        _ => {
            let cfg = c.fit.resolve(WeightDefaults::Explain, seed)?;
            (fit_model(&bundle, &cfg)?, Some(cfg))
        }
    };
    let report = significant_features(&model, &bundle, &features, &ecfg)?;
    let config = json!({
        "seed": seed,
        "bundle": c.bundle,
        "features": fpath,
        "model": c.model,
        "refit": fit_cfg,
        "explain": ecfg,
        "out": c.out,
    });
    write_report(&c.out, "explain significance", &config, &report)?;
    write_text(&companion(&c.out, ".csv"), &report.to_csv())?;
    println!(
        "explain significance: feature-prop {:.2}, V {:.2}, Homo {:.2}, Comp {:.2} over {} error slices -> {}",
        report.feature_prop,
        100.0 * report.avg_v,
        100.0 * report.avg_homo,
        100.0 * report.avg_comp,
        model.error_slices.len(),
        c.out.display()
    );
    Ok(())
}

fn synthetic(c: &SyntheticCmd, seed: u64) -> Result<()> {
    let bundle = load_bundle(&c.bundle)?.into_labeled()?;
    let fpath = features_path(&c.bundle, &c.features);
    let features = load_feature_table(&fpath)?;
    let cfg = c.fit.resolve(WeightDefaults::Explain, seed)?;
    let names: Vec<String> = if c.feature_names.is_empty() {
        features.names().map(str::to_string).collect()
    } else {
        c.feature_names.clone()
    };
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for name in &names {
        match synthetic_task(&bundle, name, &features, &cfg, seed) {
            Ok(r) => rows.push(r),
            Err(e @ (Error::Undefined(_) | Error::Range(_))) => {
                log::warn!("feature {name}: {e}");
                skipped.push(json!({ "feature": name, "reason": e.to_string() }));
            }
            Err(e) => return Err(e),
        }
    }
    let mean_f1 = {
        let f1s: Vec<f64> = rows.iter().filter_map(|r| r.f1).collect();
        (!f1s.is_empty()).then(|| f1s.iter().sum::<f64>() / f1s.len() as f64)
    };
    let config = json!({ "seed": seed, "bundle": c.bundle, "features": fpath, "feature_names": names, "fit": cfg, "out": c.out });
    let result = json!({ "tasks": rows, "skipped": skipped, "mean_f1": mean_f1 });
    write_report(&c.out, "explain synthetic", &config, &result)?;
    let mut csv = String::from("feature,precision,recall,f1,targets,size\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{:.2},{},{},{}\n",
            r.feature,
            pct(r.precision),
            r.recall,
            pct(r.f1),
            r.target_count,
            r.dataset_size
        ));
    }
    write_text(&companion(&c.out, ".csv"), &csv)?;
    println!(
        "explain synthetic: {} features scored, {} skipped, mean F1 {} -> {}",
        rows.len(),
        skipped.len(),
        pct(mean_f1),
        c.out.display()
    );
    Ok(())
}

fn write_curve(
    out: &Path,
    command: &str,
    config: &Value,
    result: &Value,
    curve: &crate::improve::CurveReport,
) -> Result<()> {
    write_report(out, command, config, result)?;
    write_text(&companion(out, ".csv"), &curve.to_csv())?;
    write_text(&companion(out, ".baseline.csv"), &curve.baseline_csv())
}

fn selective(c: &SelectiveCmd, seed: u64) -> Result<()> {
    let model = SliceModel::load(&c.model)?;
    let bundle = load_bundle(&c.bundle)?.into_unlabeled();
    let (_, oracle) = oracle_for(&c.bundle, &bundle)?;
    let curve = selective_prediction(&model, &bundle, &oracle)?;
    let config = json!({ "seed": seed, "model": c.model, "bundle": c.bundle, "out": c.out });
    write_curve(&c.out, "improve selective", &config, &json!({ "curve": curve }), &curve)?;
    println!(
        "improve selective: {} steps, improvement {}, c_proportion {} -> {}",
        curve.steps.len(),
        pct(curve.summary.improvement),
        pct(curve.summary.c_proportion),
        c.out.display()
    );
    Ok(())
}

fn flip(c: &FlipCmd, seed: u64) -> Result<()> {
    let model = SliceModel::load(&c.model)?;
    let bundle = load_bundle(&c.bundle)?.into_unlabeled();
    let val = load_bundle(&c.validation)?.into_labeled()?;
    let truth = GroundTruth::load_sidecar(&c.bundle)?;
    let (threshold, choice) = match c.threshold {
        Some(t) => (t, None),
        None if model.num_classes() > 2 => {
            let choice = validate_flip_threshold(&model, &val, &c.grid, seed)?;
            if choice.no_gain {
                log::warn!("no grid threshold improved held-out accuracy; using {}", choice.threshold);
            }
            (choice.threshold, Some(choice))
        }
        // binary flipping inverts every detected prediction and ignores the threshold
        None => (0.5, None),
    };
    let applied = (model.num_classes() > 2).then_some(threshold);
    let (outcome, curve) = flip_report(&model, &bundle, &val, threshold, &truth)?;
    for w in &outcome.warnings {
        log::warn!("{w}");
    }
    let config = json!({
        "seed": seed,
        "model": c.model,
        "bundle": c.bundle,
        "validation": c.validation,
        "threshold": c.threshold,
        "grid": c.grid,
        "out": c.out,
    });
    let result = json!({
        "threshold": applied,
        "threshold_choice": choice,
        "flips": outcome.flips,
        "warnings": outcome.warnings,
        "curve": curve,
    });
    write_curve(&c.out, "improve flip", &config, &result, &curve)?;
    println!(
        "improve flip: {} flips, improvement {}, c_proportion {} -> {}",
        outcome.flips.len(),
        pct(curve.summary.improvement),
        pct(curve.summary.c_proportion),
        c.out.display()
    );
    Ok(())
}

fn active(c: &ActiveCmd, seed: u64) -> Result<()> {
    let fit_cfg = c.fit.resolve(WeightDefaults::Discover, seed)?;
    let (command, timeout_secs) = match &c.trainer_config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let t: TrainerConfig = serde_json::from_str(&text)?;
            (t.command, t.timeout_secs)
        }
        None => (c.trainer_cmd.clone(), c.timeout_secs),
    };
    let mut trainer = CommandTrainer::new(command.clone(), Duration::from_secs(timeout_secs))?;
    let selection = match c.selection {
        SelectionArg::Sdm => Selection::Sdm,
        SelectionArg::Random => Selection::Random { per_step: c.per_step },
        SelectionArg::Confidence => Selection::Confidence { per_step: c.per_step },
    };
    if c.per_step == 0 && selection != Selection::Sdm {
        return Err(Error::Config("--per-step must be at least 1".into()));
    }
    let ids = load_bundle(&c.train)?.as_unlabeled().ids().to_vec();
    let (train, pool) = split_seed_set(&ids, c.seed_frac, seed)?;
    let mut cfg = ActiveConfig::new(fit_cfg, selection, c.budget, c.workdir.clone());
    cfg.max_per_round = c.max_per_round;
    cfg.max_rounds = c.max_rounds;
    cfg.seed = seed;
    let seed_size = train.len();
    let (report, err) = active_learning(&cfg, &mut trainer, train, pool);
    let config = json!({
        "seed": seed,
        "train": c.train,
        "trainer_command": command,
        "timeout_secs": timeout_secs,
        "seed_frac": c.seed_frac,
        "active": cfg,
        "out": c.out,
    });
    let result = json!({ "seed_set_size": seed_size, "report": report });
    write_report(&c.out, "improve active", &config, &result)?;
    let mut csv = String::from("round,labeled,selected,val_accuracy\n");
    for r in &report.rounds {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r.iteration,
            r.labeled,
            r.selected,
            crate::exact::to_string(r.val_accuracy)
        ));
    }
    write_text(&companion(&c.out, ".csv"), &csv)?;
    let last = report.rounds.last();
    println!(
        "improve active: {} rounds, stop {:?}, {} labeled, val accuracy {} -> {}",
        report.rounds.len(),
        report.stop,
        last.map_or(0, |r| r.labeled),
        last.map_or_else(|| "N/A".into(), |r| format!("{:.4}", r.val_accuracy)),
        c.out.display()
    );
    err.map_or(Ok(()), Err)
}

fn planted(c: &PlantedCmd, seed: u64) -> Result<()> {
    let mut spec = PlantedSpec::new(c.k_true, c.dim, c.classes, c.cluster_size);
    spec.error_clusters = c.error_clusters.clone();
    spec.separation = c.separation;
    spec.sigma = c.sigma;
    spec.error_rate = c.error_rate;
    spec.seed = seed;
    spec.feature_plan = (0..c.k_true).map(|k| (k, vec![format!("cluster_{k}")])).collect();
    let p = generate_planted(&spec)?;
    save_labeled(&c.out, &p.bundle, c.format.into())?;
    p.truth.save(c.out.join(crate::discover::TRUTH_FILE))?;
    write_text(&c.out.join("features.jsonl"), &p.features.to_jsonl())?;
    write_text(&c.out.join("planted.json"), &(serde_json::to_string_pretty(&spec)? + "\n"))?;
    println!(
        "synth planted: {} points, {} planted errors -> {}",
        p.bundle.len(),
        p.planted_error_ids().len(),
        c.out.display()
    );
    Ok(())
}

fn scenario(c: &ScenarioCmd, seed: u64) -> Result<()> {
    let mut spec = match c.preset {
        PresetArg::Default => ScenarioSpec::new(seed),
        PresetArg::ActiveLearning => ScenarioSpec::active_learning(seed),
    };
    if let Some(n) = c.classes {
        spec.num_classes = n;
    }
    if let Some(n) = c.train_size {
        spec.train_size = n;
    }
    if let Some(n) = c.test_size {
        spec.test_size = n;
        spec.validation_size = 2 * n;
    }
    if let Some(n) = c.validation_size {
        spec.validation_size = n;
    }
    let sc = generate_classifier_scenario(&spec)?;
    std::fs::create_dir_all(&c.out).map_err(|e| Error::io(&c.out, e))?;
    let dir = std::fs::canonicalize(&c.out).map_err(|e| Error::io(&c.out, e))?;
    let exe = std::env::current_exe().map_err(|e| Error::io("current executable", e))?;
    let trainer = TrainerConfig {
        command: vec![
            exe.to_string_lossy().into_owned(),
            "synth".into(),
            "train".into(),
            "--scenario".into(),
            dir.to_string_lossy().into_owned(),
        ],
        timeout_secs: c.timeout_secs,
    };
    write_scenario(&dir, &sc, &trainer)?;
    println!(
        "synth scenario: train {}, validation {}, test {}, full-data validation accuracy {:.4} -> {}",
        sc.train.len(),
        sc.validation.len(),
        sc.test.len(),
        sc.full_data_accuracy(),
        c.out.display()
    );
    Ok(())
}

fn serve_request(c: &TrainCmd) -> Result<()> {
    let text = std::fs::read_to_string(&c.request).map_err(|e| Error::io(&c.request, e))?;
    let req: TrainerRequest = serde_json::from_str(&text)
        .map_err(|e| Error::Protocol(format!("malformed request {}: {e}", c.request.display())))?;
    let sc = load_scenario(&c.scenario)?;
    let resp = ScenarioTrainer::new(sc).respond(&req)?;
    println!("synth train: round {} val accuracy {:.4}", req.iteration, resp.val_accuracy);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("slicekit").chain(args.iter().copied()))
    }

    #[test]
    fn fit_defaults_follow_discover_setting() {
        let cli = parse(&["fit", "--train", "v", "--out", "m.json"]).unwrap();
        let Command::Fit(c) = cli.command else { panic!() };
        let cfg = c.fit.resolve(WeightDefaults::Discover, cli.seed).unwrap();
        assert_eq!((cfg.weights.gamma, cfg.weights.lambda_e, cfg.weights.lambda_conf), (0.15, 0.1, 1.0));
        assert_eq!((cfg.em.k, cfg.pca_dim, cfg.delta), (128, Some(128), 0.5));
    }

    #[test]
    fn explain_refit_uses_explain_weights() {
        let cli = parse(&["explain", "significance", "--model", "m.json", "--bundle", "v", "--out", "r.json"]).unwrap();
        let Command::Explain(ExplainCmd::Significance(c)) = cli.command else { panic!() };
        let w = c.fit.resolve(WeightDefaults::Explain, 0).unwrap().weights;
        assert_eq!((w.gamma, w.lambda_e, w.lambda_conf), (0.15, 1.0, 0.1));
    }

    #[test]
    fn zero_k_and_unknown_flags_are_usage_errors() {
        assert!(parse(&["fit", "--train", "v", "--out", "m", "--k", "0"]).is_err());
        assert!(parse(&["fit", "--train", "v", "--out", "m", "--bogus"]).is_err());
        assert_eq!(main_with_args(["slicekit", "fit", "--train", "v", "--out", "m", "--k", "0"]), 1);
    }

    #[test]
    fn domino_mode_and_variant_resolution() {
        let cli = parse(&["fit", "--train", "v", "--out", "m", "--mode", "domino"]).unwrap();
        let Command::Fit(c) = cli.command else { panic!() };
        let w = c.fit.resolve(WeightDefaults::Discover, 0).unwrap().weights;
        assert_eq!((w.gamma, w.lambda_e, w.lambda_conf, w.mode), (1.0, 10.0, 40.0, Mode::Domino));

        let cli = parse(&["fit", "--train", "v", "--out", "m", "--variant", "edisa-Z"]).unwrap();
        let Command::Fit(c) = cli.command else { panic!() };
        let w = c.fit.resolve(WeightDefaults::Discover, 0).unwrap().weights;
        assert_eq!((w.gamma, w.lambda_e, w.lambda_conf), (0.15, 0.0, 0.0));

        let cli = parse(&["fit", "--train", "v", "--out", "m", "--gamma", "-1"]).unwrap();
        let Command::Fit(c) = cli.command else { panic!() };
        assert!(matches!(c.fit.resolve(WeightDefaults::Discover, 0), Err(Error::Config(_))));
    }

    #[test]
    fn help_lists_defaults() {
        let err = parse(&["fit", "--help"]).unwrap_err();
        assert_eq!(err.kind(), ErrorKind::DisplayHelp);
        let text = err.to_string();
        for needle in
            ["--gamma", "0.15", "--k", "default: 128", "--delta", "default: 0.5", "--lambda-e", "--lambda-conf"]
        {
            assert!(text.contains(needle), "help lacks {needle}");
        }
    }

    #[test]
    fn companion_paths() {
        assert_eq!(companion(Path::new("out/r.json"), ".csv"), PathBuf::from("out/r.csv"));
        assert_eq!(companion(Path::new("r.json"), ".baseline.csv"), PathBuf::from("r.baseline.csv"));
    }
}
