use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use clap::ValueEnum;
use g3dhf_annotate::http::{self, HttpOptions};
use g3dhf_annotate::{Durability, ExportOptions, Service, ServiceConfig};
use g3dhf_core::agreement::{qa_accuracy, AccuracyMode};
use g3dhf_core::bench::{self, EvalConfig, EvalInputs, ReportFormat, SplitSpec, DEFAULT_FOLDS};
use g3dhf_core::loss::{LossComponents, LossWeights, DEFAULT_LOSS_EPSILON};
use g3dhf_core::model::validate_ratings;
use g3dhf_core::prompts::PromptKind;
use g3dhf_core::saliency::{normalize, write_pgm, write_raw, DEFAULT_SIGMA};
use g3dhf_core::saliency_metrics::{evaluate_pair, write_item_csv, KldConfig, KldDirection, SaliencyMetricConfig, StdDevMode, DEFAULT_KLD_EPSILON};
use g3dhf_core::{aggregate_mos, ItemId, Norm, ScreeningPolicy};
use rayon::prelude::*;
use serde_json::json;

use crate::config::FileConfig;
use crate::error::{invalid, Classify, CliResult};
use crate::inputs;
use crate::*;

/// Flag value, else config value (parsed like the flag), else default.
fn pick_enum<T: ValueEnum>(flag: Option<T>, cfg: Option<&str>, key: &str, default: T) -> CliResult<T> {
    if let Some(v) = flag {
        return Ok(v);
    }
    match cfg {
        Some(s) => T::from_str(s, true).or_else(|_| invalid(format!("config: bad value {s:?} for {key}"))),
        None => Ok(default),
    }
}

fn sigma(flag: Option<f64>, cfg: &FileConfig) -> CliResult<f64> {
    let s = flag.or(cfg.sigma).unwrap_or(DEFAULT_SIGMA);
    if !(s > 0.0) || !s.is_finite() {
        return invalid("sigma must be > 0");
    }
    Ok(s)
}

fn metric_config(m: &MetricFlags, cfg: &FileConfig) -> CliResult<SaliencyMetricConfig> {
    let nss = pick_enum(m.nss_std, cfg.metrics.nss_std.as_deref(), "metrics.nss_std", NssStdArg::Population)?;
    let dir = pick_enum(m.kld_direction, cfg.metrics.kld_direction.as_deref(), "metrics.kld_direction", KldDirArg::GtPred)?;
    let epsilon = m.kld_eps.or(cfg.metrics.kld_eps).unwrap_or(DEFAULT_KLD_EPSILON);
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return invalid("kld-eps must be > 0");
    }
    Ok(SaliencyMetricConfig {
        nss_std: match nss {
            NssStdArg::Population => StdDevMode::Population,
            NssStdArg::Sample => StdDevMode::Sample,
        },
        kld: KldConfig {
            direction: match dir {
                KldDirArg::GtPred => KldDirection::GtToPred,
                KldDirArg::PredGt => KldDirection::PredToGt,
            },
            epsilon,
        },
    })
}

fn qa_mode(flag: Option<QaModeArg>, cfg: &FileConfig) -> CliResult<AccuracyMode> {
    Ok(match pick_enum(flag, cfg.metrics.qa_mode.as_deref(), "metrics.qa_mode", QaModeArg::Exact)? {
        QaModeArg::Exact => AccuracyMode::ExactMatch,
        QaModeArg::Jaccard => AccuracyMode::Jaccard,
    })
}

pub fn mos(a: MosArgs, cfg: &FileConfig) -> CliResult {
    let records = inputs::ratings(&a.input)?;
    let manifest = a.manifest.as_deref().map(inputs::manifest).transpose()?;
    let findings = validate_ratings(&records, manifest.as_ref());
    if !findings.is_clean() {
        let detail = serde_json::to_string_pretty(&findings).runtime("encoding findings")?;
        return invalid(format!("{} problem(s) in ratings:\n{detail}", findings.finding_count()));
    }

    let screen = pick_enum(a.screen, cfg.screen.as_deref(), "screen", ScreenArg::Itu)?;
    let policy = match screen {
        ScreenArg::None => ScreeningPolicy::None,
        ScreenArg::Stddev => {
            let ScreeningPolicy::StdDevOutlier { k, max_outlier_fraction } = ScreeningPolicy::std_dev_outlier() else {
                unreachable!()
            };
            ScreeningPolicy::StdDevOutlier {
                k: a.outlier_k.unwrap_or(k),
                max_outlier_fraction: a.max_outlier_fraction.unwrap_or(max_outlier_fraction),
            }
        }
        ScreenArg::Itu => {
            let ScreeningPolicy::ItuAnnex2 { reject_fraction, balance } = ScreeningPolicy::itu_annex2() else {
                unreachable!()
            };
            ScreeningPolicy::ItuAnnex2 {
                reject_fraction: a.reject_fraction.unwrap_or(reject_fraction),
                balance: a.balance.unwrap_or(balance),
            }
        }
    };

    let table = aggregate_mos(&records, &policy).invalid()?;
    let mut csv = Vec::new();
    table.write_csv(&mut csv).runtime("encoding MOS table")?;
    inputs::write_file(&a.out, &csv)?;

    let report_path = a.report.unwrap_or_else(|| a.out.with_extension("rejections.json"));
    let mut report = Vec::new();
    table.write_rejection_report(&mut report).runtime("encoding rejection report")?;
    report.push(b'\n');
    inputs::write_file(&report_path, &report)?;

    eprintln!(
        "{} MOS values; {} subject(s) retained, {} rejected ({}); {} clamped score(s)",
        table.entries.len(),
        table.retained_subjects.len(),
        table.rejection_report.len(),
        policy.name(),
        table.clamped.len()
    );
    Ok(())
}

pub fn saliency(a: SaliencyArgs, cfg: &FileConfig) -> CliResult {
    let sigma = sigma(a.sigma, cfg)?;
    let (Some(fix_path), Some(out_dir)) = (a.fixations, a.out_dir) else {
        return invalid("saliency needs --fixations and --out-dir");
    };
    let groups = inputs::group_by_item(inputs::fixations(&fix_path)?);
    for item in groups.keys() {
        inputs::safe_file_stem(item)?;
    }
    let norm = match a.norm {
        NormArg::Raw => Norm::Raw,
        NormArg::MaxOne => Norm::MaxOne,
        NormArg::SumOne => Norm::SumOne,
        NormArg::Z => Norm::ZStandardized,
    };
    inputs::create_dir(&out_dir)?;
    groups.par_iter().try_for_each(|(item, anns)| -> CliResult {
        let ctx = format!("item {item}");
        let fix = g3dhf_core::saliency::merge_annotations(anns).invalid_ctx(&ctx)?;
        let blurred = g3dhf_core::gaussian_blur(&fix, sigma).invalid_ctx(&ctx)?;
        let (map, _) = normalize(&blurred, norm).invalid_ctx(&ctx)?;
        if matches!(a.format, MapFormat::Pgm | MapFormat::Both) {
            let mut buf = Vec::new();
            write_pgm(&map, &mut buf).runtime(&ctx)?;
            inputs::write_file(&out_dir.join(format!("{item}.pgm")), &buf)?;
        }
        if matches!(a.format, MapFormat::Raw | MapFormat::Both) {
            let mut buf = Vec::new();
            write_raw(&map, &mut buf).runtime(&ctx)?;
            inputs::write_file(&inputs::map_path(&out_dir, item), &buf)?;
        }
        Ok(())
    })?;
    eprintln!("{} map(s) written to {}", groups.len(), out_dir.display());
    Ok(())
}

/// Every MOS item in a single evaluation fold.
fn whole_set(table: &g3dhf_core::MosTable) -> SplitSpec {
    SplitSpec {
        seed: 0,
        k: 1,
        folds: table.entries.keys().map(|(i, _)| (i.clone(), 0)).collect(),
    }
}

pub fn eval_scores(a: EvalScoresArgs) -> CliResult {
    let table = inputs::mos(&a.mos)?;
    let preds = inputs::score_predictions(&a.pred)?;
    let split = match &a.split {
        Some(p) => inputs::split(p)?,
        None => whole_set(&table),
    };
    let cfg = EvalConfig::default();
    let fp = bench::fingerprint(&json!({ "command": "eval-scores", "k": split.k, "seed": split.seed }));
    let report = bench::evaluate_predictor(&a.name, &EvalInputs::scores_only(&table, &preds), &split, &cfg, &fp).invalid()?;

    let mut out = String::from("fold,dimension,srcc,plcc,krcc\n");
    let rows = report
        .folds
        .iter()
        .map(|f| (f.fold.to_string(), &f.metrics))
        .chain(std::iter::once(("mean".to_owned(), &report.mean)));
    for (label, m) in rows {
        for d in g3dhf_core::Dimension::ALL {
            if let Some(c) = m.correlation(d) {
                writeln!(out, "{label},{d},{},{},{}", c.srcc, c.plcc, c.krcc).unwrap();
            }
        }
    }
    inputs::write_output(None, out.as_bytes())?;
    if let Some(path) = &a.out {
        let mut text = serde_json::to_string_pretty(&report).runtime("encoding report")?;
        text.push('\n');
        inputs::write_file(path, text.as_bytes())?;
    }
    Ok(())
}

fn loss_settings(l: &LossFlags, cfg: &FileConfig) -> CliResult<(LossWeights, f64)> {
    let c = &cfg.loss;
    let w = LossWeights::new(
        l.w1.or(c.w1).unwrap_or(1.0),
        l.w2.or(c.w2).unwrap_or(1.0),
        l.w3.or(c.w3).unwrap_or(1.0),
        l.w4.or(c.w4).unwrap_or(1.0),
    )
    .invalid()?;
    let eps = l.loss_eps.or(c.epsilon).unwrap_or(DEFAULT_LOSS_EPSILON);
    if !(eps > 0.0 && eps < 0.5) {
        return invalid("loss-eps must lie in (0, 0.5)");
    }
    Ok((w, eps))
}

pub fn eval_saliency(a: EvalSaliencyArgs, cfg: &FileConfig) -> CliResult {
    let sigma = sigma(a.sigma, cfg)?;
    let metric_cfg = metric_config(&a.metrics, cfg)?;
    let losses = a.loss_out.as_ref().map(|_| loss_settings(&a.loss, cfg)).transpose()?;

    let truth = inputs::saliency_truth(inputs::fixations(&a.fixations)?, sigma)?;
    let scored: Vec<&ItemId> = truth.iter().filter(|(_, t)| t.fixations.count() > 0).map(|(i, _)| i).collect();
    if scored.is_empty() {
        return invalid(format!("{}: no item has a fixation", a.fixations.display()));
    }
    let preds = inputs::predicted_maps(&a.pred_dir, scored.iter().copied())?;

    let rows = scored
        .par_iter()
        .map(|i| {
            let t = &truth[*i];
            let s = evaluate_pair(&preds[*i], &t.map, &t.fixations, &metric_cfg).invalid_ctx(format!("item {i}"))?;
            Ok(((*i).clone(), s))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut csv = Vec::new();
    write_item_csv(&mut csv, &rows, &metric_cfg).runtime("encoding metrics")?;
    inputs::write_output(a.out.as_deref(), &csv)?;

    if let (Some(path), Some((weights, eps))) = (&a.loss_out, losses) {
        let comps = scored
            .par_iter()
            .map(|i| {
                let ctx = format!("item {i}");
                let (p, _) = normalize(&preds[*i], Norm::MaxOne).invalid_ctx(&ctx)?;
                let (g, _) = normalize(&truth[*i].map, Norm::MaxOne).invalid_ctx(&ctx)?;
                if p.dims() != g.dims() {
                    return invalid(format!("{ctx}: predicted map is {:?}, ground truth is {:?}", p.dims(), g.dims()));
                }
                let c = LossComponents::compute(p.data(), g.data(), eps).invalid_ctx(&ctx)?;
                Ok(((*i).clone(), c))
            })
            .collect::<CliResult<Vec<_>>>()?;
        let mut out = format!(
            "# maps=max_one w1={} w2={} w3={} w4={} eps={:e}\nitem_id,l1,cc,kl,bce,total\n",
            weights.l1, weights.cc, weights.kl, weights.bce, eps
        );
        for (i, c) in &comps {
            writeln!(out, "{i},{},{},{},{},{}", c.l1, c.cc, c.kl, c.bce, c.weighted(&weights)).unwrap();
        }
        inputs::write_file(path, out.as_bytes())?;
    }
    Ok(())
}

pub fn eval_qa(a: EvalQaArgs, cfg: &FileConfig) -> CliResult {
    let mode = qa_mode(a.mode, cfg)?;
    let truth = inputs::label_consensus(&inputs::labels(&a.labels)?);
    let preds = inputs::category_predictions(&a.pred)?;
    let missing: Vec<&str> = truth.keys().filter(|i| !preds.contains_key(*i)).map(|i| i.as_str()).collect();
    if !missing.is_empty() {
        return invalid(format!("{}: no prediction for {}", a.pred.display(), missing.join(", ")));
    }
    let t: Vec<_> = truth.values().cloned().collect();
    let p: Vec<_> = truth.keys().map(|i| preds[i].clone()).collect();
    let acc = qa_accuracy(&t, &p, mode).invalid()?;
    let out = format!("mode,n_items,accuracy\n{},{},{}\n", acc.mode, acc.n_items, acc.value);
    inputs::write_output(None, out.as_bytes())
}

pub fn split(a: SplitArgs, cfg: &FileConfig) -> CliResult {
    let manifest = inputs::manifest(&a.manifest)?;
    let k = a.k.or(cfg.k).unwrap_or(DEFAULT_FOLDS);
    let seed = a.seed.or(cfg.seed).unwrap_or(0);
    let folds = bench::make_splits(&manifest, k, seed).invalid()?;
    let mut text = folds.to_json();
    text.push('\n');
    inputs::write_output(a.out.as_deref(), text.as_bytes())
}

fn named(args: &[String], flag: &str) -> CliResult<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for arg in args {
        let (name, path) = inputs::named_path(arg, flag)?;
        if out.insert(name.clone(), path).is_some() {
            return invalid(format!("{flag}: predictor {name:?} given twice"));
        }
    }
    Ok(out)
}

pub fn report(a: ReportArgs, cfg: &FileConfig) -> CliResult {
    let table = inputs::mos(&a.mos)?;
    let split = inputs::split(&a.split)?;
    let preds = named(&a.preds, "--pred")?;
    let pred_maps = named(&a.pred_maps, "--pred-maps")?;
    let pred_labels = named(&a.pred_labels, "--pred-labels")?;
    for name in pred_maps.keys().chain(pred_labels.keys()) {
        if !preds.contains_key(name) {
            return invalid(format!("predictor {name:?} has no --pred scores"));
        }
    }
    if !pred_maps.is_empty() && a.fixations.is_none() {
        return invalid("--pred-maps needs --fixations");
    }
    if !pred_labels.is_empty() && a.labels.is_none() {
        return invalid("--pred-labels needs --labels");
    }

    let sigma = sigma(a.sigma, cfg)?;
    let eval_cfg = EvalConfig {
        accuracy_mode: qa_mode(a.qa_mode, cfg)?,
        saliency: metric_config(&a.metrics, cfg)?,
    };
    let fp = bench::fingerprint(&json!({
        "command": "report",
        "sigma": sigma,
        "eval": eval_cfg,
        "split": { "k": split.k, "seed": split.seed },
        "preds": preds,
        "pred_maps": pred_maps,
        "pred_labels": pred_labels,
        "fixations": a.fixations,
        "labels": a.labels,
        "mos": a.mos,
    }));

    let truth = a
        .fixations
        .as_deref()
        .map(|p| inputs::fixations(p).and_then(|f| inputs::saliency_truth(f, sigma)))
        .transpose()?;
    let label_truth = a.labels.as_deref().map(|p| inputs::labels(p).map(|l| inputs::label_consensus(&l))).transpose()?;

    let mut reports = Vec::new();
    for (name, path) in &preds {
        let scores = inputs::score_predictions(path)?;
        let maps = match (pred_maps.get(name), &truth) {
            (Some(dir), Some(t)) => {
                let items = t.iter().filter(|(i, x)| x.fixations.count() > 0 && split.folds.contains_key(*i)).map(|(i, _)| i);
                Some(inputs::predicted_maps(dir, items)?)
            }
            _ => None,
        };
        let labels = pred_labels.get(name).map(|p| inputs::category_predictions(p)).transpose()?;
        let eval_inputs = EvalInputs {
            mos: &table,
            scores: &scores,
            saliency_truth: maps.as_ref().and(truth.as_ref()),
            saliency_pred: maps.as_ref(),
            label_truth: labels.as_ref().and(label_truth.as_ref()),
            label_pred: labels.as_ref(),
        };
        let r = bench::evaluate_predictor(name, &eval_inputs, &split, &eval_cfg, &fp).invalid_ctx(format!("predictor {name}"))?;
        reports.push(r);
    }
    let format = match a.format {
        ReportFormatArg::Md => ReportFormat::Markdown,
        ReportFormatArg::Csv => ReportFormat::Csv,
    };
    let text = bench::render_report(&reports, format).invalid()?;
    inputs::write_output(a.out.as_deref(), text.as_bytes())
}

pub fn serve(a: ServeArgs, cfg: &FileConfig) -> CliResult {
    let manifest = inputs::manifest(&a.manifest)?;
    let data_dir = a
        .data_dir
        .or_else(|| cfg.serve.data_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("annotations"));
    let mut config = ServiceConfig::new(&data_dir);
    config.durability = match a.durability {
        DurabilityArg::Fsync => Durability::Fsync,
        DurabilityArg::Buffered => Durability::Buffered,
    };
    config.export = ExportOptions {
        complete_only: !a.include_incomplete,
    };
    if a.compact_every == Some(0) {
        return invalid("--compact-every must be at least 1");
    }
    config.compact_every = a.compact_every;
    let service = Service::open(manifest, config).runtime(format!("opening store in {}", data_dir.display()))?;

    if let Some(dir) = a.export_to {
        let export = service.export();
        export.write_to_dir(&dir).runtime("exporting")?;
        eprintln!(
            "exported {} rating(s), {} fixation annotation(s), {} label(s) to {}",
            export.ratings.len(),
            export.fixations.len(),
            export.labels.len(),
            dir.display()
        );
        return Ok(());
    }

    let host = a.host.or_else(|| cfg.serve.host.clone()).unwrap_or_else(|| "127.0.0.1".into());
    let port = a.port.or(cfg.serve.port).unwrap_or(8080);
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .or_else(|_| invalid(format!("bad listen address {host}:{port}")))?;
    let media_root = a
        .media_root
        .or_else(|| a.manifest.parent().map(|p| if p.as_os_str().is_empty() { PathBuf::from(".") } else { p.to_path_buf() }));
    let opts = HttpOptions {
        token: a.token.or_else(|| cfg.serve.token.clone()),
        media_root,
    };
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().runtime("starting runtime")?;
    rt.block_on(http::serve(addr, Arc::new(service), opts)).runtime(format!("serving on {addr}"))
}

pub fn prompts(a: PromptsArgs) -> CliResult {
    let kinds: Vec<PromptKind> = match a.kind {
        Some(PromptKindArg::Quality) => vec![PromptKind::Quality],
        Some(PromptKindArg::Authenticity) => vec![PromptKind::Authenticity],
        Some(PromptKindArg::Distortion) => vec![PromptKind::Distortion],
        None => PromptKind::ALL.to_vec(),
    };
    let out = if a.json {
        let map: BTreeMap<&str, &str> = kinds.iter().map(|k| (k.name(), k.text())).collect();
        serde_json::to_string_pretty(&map).runtime("encoding prompts")? + "\n"
    } else if kinds.len() == 1 {
        format!("{}\n", kinds[0].text())
    } else {
        kinds.iter().map(|k| format!("[{}]\n{}\n", k.name(), k.text())).collect::<Vec<_>>().join("\n")
    };
    inputs::write_output(None, out.as_bytes())
}
