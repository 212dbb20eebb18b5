use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::json;

use rubric_core::conformal::{
    build_intervals, calibrate_kfold, coverage_analysis, mean_coverage, IntervalRow,
};
use rubric_core::dataio::{
    generate_synthetic, gold_means, load_dataset, write_annotations, write_feature_matrix, Aspect,
    DatasetFormat, SyntheticSpec, UtteranceRecord, SCORE_MAX, SCORE_MIN,
};
use rubric_core::metrics::{full_report, qwk_rater_rater, EvalMode};
use rubric_core::scorer::{forward_batch, PredictionSet, ScorerParams, Strategy};
use rubric_core::trainer::{train as fit, ModelDims, TrainConfig};

use crate::output::OutDir;
use crate::{AgreementArgs, DataArgs, EvaluateArgs, GenerateArgs, TrainArgs, UsageError};

fn usage(message: impl Into<String>) -> anyhow::Error {
    UsageError(message.into()).into()
}

/// `<stem>_features.bin`, then `features.bin`, next to the annotation file.
fn default_sidecar(data: &Path) -> Option<PathBuf> {
    let dir = data.parent().unwrap_or(Path::new("."));
    let stem = data.file_stem()?.to_string_lossy();
    [dir.join(format!("{stem}_features.bin")), dir.join("features.bin")]
        .into_iter()
        .find(|p| p.is_file())
}

fn load(args: &DataArgs) -> Result<Vec<UtteranceRecord>> {
    let format = match args.features.clone().or_else(|| default_sidecar(&args.data)) {
        Some(sidecar) => DatasetFormat::FeaturesBinary { sidecar },
        None => DatasetFormat::AnnotationJsonl,
    };
    let records = load_dataset(&args.data, format)
        .with_context(|| format!("loading {}", args.data.display()))?;
    if records.is_empty() {
        bail!("{}: no records", args.data.display());
    }
    Ok(records)
}

fn write_split(
    out: &mut OutDir,
    name: &str,
    sidecar: &str,
    records: &[UtteranceRecord],
    inline: bool,
) -> Result<()> {
    if !inline {
        let rows: Vec<Vec<f64>> = records.iter().map(|r| r.features.clone()).collect();
        write_feature_matrix(&out.path(sidecar), &rows)?;
    }
    write_annotations(&out.path(name), records, !inline)?;
    Ok(())
}

pub fn generate(args: &GenerateArgs) -> Result<()> {
    if args.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let spec = SyntheticSpec {
        n_utterances: args.n + args.holdout,
        feature_dim: args.dim,
        n_raters: args.raters,
        noise_low: args.noise_low,
        noise_high: args.noise_high,
        seed: args.seed,
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let corpus = generate_synthetic(&spec)?;
    let (train, holdout) = corpus.records.split_at(args.n);
    let (truth_train, truth_holdout) = corpus.truth.split_at(args.n);

    let mut out = OutDir::create(&args.out)?;
    write_split(&mut out, "annotations.jsonl", "features.bin", train, args.inline_features)?;
    if !holdout.is_empty() {
        write_split(&mut out, "holdout.jsonl", "holdout_features.bin", holdout, args.inline_features)?;
    }
    out.write_json(
        "truth.json",
        &json!({ "spec": spec, "train": truth_train, "holdout": truth_holdout }),
    )?;
    out.finish("generate", args)?;
    println!(
        "generated {} + {} utterances, d={}, {} raters -> {}",
        train.len(),
        holdout.len(),
        args.dim,
        args.raters,
        args.out.display()
    );
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let strategy = Strategy::new(args.strategy, args.aspect).map_err(usage)?;
    if args.hidden == 0 {
        return Err(usage("--hidden must be at least 1"));
    }
    let cfg = TrainConfig {
        learning_rate: args.lr,
        weight_decay: args.weight_decay,
        batch_size: args.batch_size,
        epochs: args.epochs,
        seed: args.seed,
        shuffle: !args.no_shuffle,
        ..TrainConfig::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;

    let records = load(&args.data)?;
    let d = records[0].features.len();
    if d == 0 {
        bail!("{}: records carry no features", args.data.data.display());
    }
    let (params, log) = fit(&records, strategy, ModelDims { d, h: args.hidden }, &cfg)?;

    let mut out = OutDir::create(&args.out)?;
    params.write_checkpoint(&out.path("checkpoint.bin"))?;
    log.write_jsonl(&out.path("trainlog.jsonl"), false)?;
    let final_loss = log.epochs.last().map(|e| e.mean_loss);
    out.finish(
        "train",
        &json!({
            "args": args,
            "strategy": strategy,
            "d": d,
            "n_params": params.values.len(),
            "n_utterances": records.len(),
            "final_loss": final_loss,
        }),
    )?;
    match final_loss {
        Some(l) => println!("trained {strategy} for {} epochs, final loss {l:.6}", cfg.epochs),
        None => println!("trained {strategy} for 0 epochs"),
    }
    Ok(())
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    id: &'a str,
    #[serde(flatten)]
    prediction: &'a PredictionSet,
}

fn intervals_csv(rows: &[IntervalRow], records: &[UtteranceRecord]) -> Result<String> {
    let mut out = String::from("id,aspect,center,sigma,q,low,high,gold,covered\n");
    for (row, rec) in rows.iter().zip(records) {
        for (&aspect, iv) in row {
            let gold = gold_means(std::slice::from_ref(rec), aspect)?[0];
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                rec.id,
                aspect,
                iv.center,
                iv.sigma,
                iv.q,
                iv.low,
                iv.high,
                gold,
                iv.contains(gold)
            )?;
        }
    }
    Ok(out)
}

fn resolve_modes(args: &EvaluateArgs, strategy: Strategy) -> Result<Vec<EvalMode>> {
    let modes = match &args.modes {
        Some(m) => m.clone(),
        None if strategy.is_classifier() => vec![EvalMode::Strict],
        None if args.calibrate => EvalMode::ALL.to_vec(),
        None => vec![EvalMode::Strict, EvalMode::Tolerance1],
    };
    if strategy.is_classifier() {
        if let Some(m) = modes.iter().find(|&&m| m != EvalMode::Strict) {
            return Err(usage(format!("mode {m} is not defined for {strategy}; use --modes strict")));
        }
    }
    if modes.contains(&EvalMode::HighLowCal) && !args.calibrate {
        return Err(usage("mode high_low_cal needs --calibrate"));
    }
    Ok(modes)
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let explicit = args.modes.as_deref().unwrap_or_default();
    if explicit.contains(&EvalMode::HighLowCal) && !args.calibrate {
        return Err(usage("mode high_low_cal needs --calibrate"));
    }
    let params = ScorerParams::read_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let strategy = params.strategy;
    if args.calibrate && !strategy.is_gaussian() {
        return Err(usage(format!(
            "--calibrate needs a variance head (mrr_g or mrr_gc), checkpoint is {strategy}"
        )));
    }
    let modes = resolve_modes(args, strategy)?;

    let records = load(&args.data)?;
    let d = records[0].features.len();
    if d != params.d {
        bail!(
            "{} has feature dimension {d} but checkpoint {} expects {}",
            args.data.data.display(),
            args.checkpoint.display(),
            params.d
        );
    }
    let features: Vec<&[f64]> = records.iter().map(|r| r.features.as_slice()).collect();
    let predictions = forward_batch(&params, &features)?;

    let mut out = OutDir::create(&args.out)?;
    out.write_jsonl(
        "predictions.jsonl",
        records.iter().zip(&predictions).map(|(r, p)| PredictionRow {
            id: &r.id,
            prediction: p,
        }),
    )?;

    let mut calibration = None;
    if args.calibrate {
        let gold: BTreeMap<Aspect, Vec<f64>> = strategy
            .aspects()
            .into_iter()
            .map(|a| Ok((a, gold_means(&records, a)?)))
            .collect::<Result<_>>()?;
        let result = calibrate_kfold(&predictions, &gold, args.folds, args.alpha, args.seed)?;
        let mut rows = build_intervals(&predictions, &result)?;
        if args.clip_intervals {
            let (lo, hi) = (f64::from(SCORE_MIN), f64::from(SCORE_MAX));
            for row in &mut rows {
                for iv in row.values_mut() {
                    *iv = iv.clipped(lo, hi);
                }
            }
        }
        let table = coverage_analysis(&rows, &records)?;
        let covered = mean_coverage(&rows, &gold)?;
        out.write_json("calibration.json", &result)?;
        out.write("calibration.csv", result.to_csv())?;
        out.write("intervals.csv", intervals_csv(&rows, &records)?)?;
        out.write_json("coverage.json", &json!({ "interval_coverage": covered, "raters": table }))?;
        out.write("coverage.csv", table.to_csv())?;
        calibration = Some((rows, table, covered));
    }

    let intervals = calibration.as_ref().map(|(rows, _, _)| rows.as_slice());
    let mut report = full_report(&predictions, &records, strategy, &modes, intervals)?;
    if let Some((_, table, covered)) = calibration {
        report = report.with_coverage(table, covered);
    }
    for (aspect, rep) in &report.aspects {
        for (mode, cm) in &rep.confusion {
            out.write(&format!("confusion_{aspect}_{mode}.csv"), cm.to_csv())?;
        }
    }
    out.write_json("report.json", &report)?;
    let text = report.to_text();
    out.write("report.txt", &text)?;
    out.finish(
        "evaluate",
        &json!({ "args": args, "strategy": strategy, "modes": modes, "n_utterances": records.len() }),
    )?;
    print!("{text}");
    Ok(())
}

pub fn agreement(args: &AgreementArgs) -> Result<()> {
    let records = load(&args.data)?;
    let raters = records[0].rater_count();
    if raters < 2 {
        bail!("agreement needs at least 2 raters, dataset has {raters}");
    }
    let mut aspects = BTreeMap::new();
    for &aspect in records[0].scores.keys() {
        aspects.insert(aspect, qwk_rater_rater(&records, aspect)?);
    }
    let mut text = format!("utterances: {}   raters: {raters}\n\n", records.len());
    writeln!(text, "{:<10} {:>8} {:>8} {:>6}", "aspect", "QWK", "SD", "pairs")?;
    for (aspect, a) in &aspects {
        writeln!(text, "{:<10} {:>8.4} {:>8.4} {:>6}", aspect.name(), a.mean, a.sd, a.values.len())?;
    }

    let mut out = OutDir::create(&args.out)?;
    out.write_json(
        "agreement.json",
        &json!({ "n_utterances": records.len(), "n_raters": raters, "aspects": aspects }),
    )?;
    out.write("agreement.txt", &text)?;
    out.finish("agreement", args)?;
    print!("{text}");
    Ok(())
}
