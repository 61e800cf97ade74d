use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use nfs_core::baselines;
use nfs_core::data::{self, QuerySet};
use nfs_core::eval::{self, EvalRecord};
use nfs_core::groupmine;
use nfs_core::metrics;
use nfs_core::saliency;
use nfs_core::select::{self, NfsConfig, SelectionResult};
use nfs_core::trainer::{Checkpoint, Trainer};

use crate::config::{overlay, DataOpts, FileConfig};
use crate::report::Report;
use crate::{
    CliError, EvalCmd, GasCmd, HcasCmd, MineCmd, NfsCmd, SaliencyCmd, SynthCmd, TrainCmd, XgasCmd,
};

const DEFAULT_TOPK: usize = 128;

fn resolve_seed(flag: Option<u64>, file: &FileConfig) -> u64 {
    flag.or(file.seed).unwrap_or(0)
}

fn at(path: &Path, e: impl Into<CliError>) -> CliError {
    let mut e = e.into();
    e.msg = format!("{}: {}", path.display(), e.msg);
    e
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| at(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| at(path, e))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| at(path, e))
}

/// Runs `body` against a buffered file and flushes it.
fn write_file(
    path: &Path,
    body: impl FnOnce(&mut BufWriter<File>) -> nfs_core::Result<()>,
) -> Result<(), CliError> {
    let mut out = create(path)?;
    body(&mut out).map_err(|e| at(path, e))?;
    out.flush().map_err(|e| at(path, e))
}

fn read_letor(path: &Path) -> Result<QuerySet, CliError> {
    data::parse_letor(open(path)?).map_err(|e| at(path, e))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = OsString::from(path.as_os_str());
    s.push(suffix);
    PathBuf::from(s)
}

struct Sets {
    train: QuerySet,
    valid: QuerySet,
    test: Option<QuerySet>,
    d: usize,
}

/// Loads the configured sets, pads them to a common width (at least
/// `min_width`) and applies the candidate restriction.
fn load_sets(opts: &DataOpts, need_test: bool, min_width: usize) -> Result<Sets, CliError> {
    let train_path = opts
        .train
        .as_ref()
        .ok_or_else(|| CliError::usage("--train is required"))?;
    let train = read_letor(train_path)?;
    let valid = opts.valid.as_deref().map(read_letor).transpose()?;
    let test = if need_test {
        let p = opts
            .test
            .as_ref()
            .ok_or_else(|| CliError::usage("--test is required"))?;
        Some(read_letor(p)?)
    } else {
        None
    };
    let d = [Some(&train), valid.as_ref(), test.as_ref()]
        .into_iter()
        .flatten()
        .map(|qs| qs.feature_count)
        .fold(min_width, usize::max);
    let widen = |qs: QuerySet| qs.widen(d).map_err(CliError::from);
    let mut train = widen(train)?;
    let mut valid = match valid {
        Some(v) => widen(v)?,
        None => QuerySet::new(Vec::new(), d)?,
    };
    let mut test = test.map(widen).transpose()?;
    if let Some(path) = &opts.candidates {
        let cands = data::parse_candidates(open(path)?).map_err(|e| at(path, e))?;
        let k = opts.topk.unwrap_or(DEFAULT_TOPK);
        train = data::restrict_topk(&train, &cands, k)?;
        if !valid.is_empty() {
            valid = data::restrict_topk(&valid, &cands, k)?;
        }
        if let Some(t) = &test {
            test = Some(data::restrict_topk(t, &cands, k)?);
        }
    }
    Ok(Sets {
        train,
        valid,
        test,
        d,
    })
}

fn load_model(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| at(path, e))
}

fn check_width(sets: &Sets, model_width: usize) -> Result<(), CliError> {
    if sets.d != model_width {
        return Err(CliError::data(format!(
            "data has {} features, the model expects {model_width}",
            sets.d
        )));
    }
    Ok(())
}

pub fn train(c: TrainCmd, file: &FileConfig, threads: Option<usize>) -> Result<(), CliError> {
    let seed = resolve_seed(c.seed, file);
    let data = overlay(&file.data, &c.data);
    let model_opts = overlay(&file.model, &c.model);
    let train_opts = overlay(&file.train, &c.train);
    let sets = load_sets(&data, false, 0)?;
    let mut trainer = match &c.resume {
        Some(path) => {
            let mut ck = load_model(path)?;
            check_width(&sets, ck.model.params.feature_count)?;
            if let Some(e) = train_opts.epochs {
                ck.train_config.epochs = e;
            }
            Trainer::resume(&sets.train, &sets.valid, ck)?
        }
        None => Trainer::new(
            &sets.train,
            &sets.valid,
            &model_opts.build(),
            &train_opts.build(seed),
        )?,
    };
    let ck = trainer.checkpoint();
    let resolved = json!({
        "seed": ck.train_config.seed,
        "threads": threads,
        "data": data,
        "features": sets.d,
        "model": ck.model.config,
        "train": ck.train_config,
        "resume": c.resume,
        "out": c.out,
    });
    let mut report = Report::new("train", &resolved, &["epoch", "mean_loss", "valid_ndcg3"]);
    let log_path = c
        .log
        .clone()
        .unwrap_or_else(|| with_suffix(&c.out, ".log.jsonl"));
    let mut log = create(&log_path)?;
    writeln!(
        log,
        "{}",
        json!({"kind": "config", "command": "train", "config": resolved})
    )?;
    while !trainer.is_finished() {
        let rec = trainer.run_epoch();
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                log.flush()?;
                return Err(e.into());
            }
        };
        log::info!(
            "epoch {} loss {:.6} valid nDCG@3 {:?}",
            rec.epoch,
            rec.mean_loss,
            rec.valid_ndcg3
        );
        let mut line = serde_json::to_value(&rec).expect("epoch record serializes");
        line["kind"] = json!("epoch");
        writeln!(log, "{line}")?;
        report.push(&rec);
        if let Some(n) = c.checkpoint_every {
            if n > 0 && trainer.epochs_done() % n == 0 {
                trainer
                    .checkpoint()
                    .save(&c.out)
                    .map_err(|e| at(&c.out, e))?;
            }
        }
    }
    log.flush()?;
    trainer
        .checkpoint()
        .save(&c.out)
        .map_err(|e| at(&c.out, e))?;
    report.finish(c.report.as_deref())?;
    Ok(())
}

#[derive(Serialize)]
struct FeatureSaliency {
    feature: usize,
    mean: f64,
    salient_fraction: f64,
}

pub fn saliency(c: SaliencyCmd, file: &FileConfig, threads: Option<usize>) -> Result<(), CliError> {
    let data = overlay(&file.data, &c.data);
    let null_opts = overlay(&file.null, &c.null);
    let t = null_opts.build(0).0.t;
    let ck = load_model(&c.model)?;
    let width = ck.model.params.feature_count;
    let sets = load_sets(&data, false, width)?;
    check_width(&sets, width)?;
    let maps = saliency::dataset_saliency(&ck.model, &sets.train)?;
    write_file(&c.out, |out| {
        saliency::write_saliency_dump(&sets.train, &maps, out)
    })?;

    let resolved = json!({
        "threads": threads,
        "data": data,
        "model": c.model,
        "features": width,
        "threshold": t,
        "out": c.out,
    });
    let mut report = Report::new(
        "saliency",
        &resolved,
        &["feature", "mean", "salient_fraction"],
    );
    let all: Vec<&saliency::SaliencyMap> = maps.iter().flatten().collect();
    let n = all.len().max(1) as f64;
    for j in 0..width {
        let mean = all.iter().map(|m| m.values[j]).sum::<f64>() / n;
        let salient = all.iter().filter(|m| m.values[j] > t).count() as f64 / n;
        report.push(&FeatureSaliency {
            feature: j + 1,
            mean,
            salient_fraction: salient,
        });
    }
    report.finish(c.report.as_deref())?;
    Ok(())
}

#[derive(Serialize)]
struct GroupRow {
    group: String,
    size: usize,
    count: u64,
    exceedances: usize,
    survived: bool,
}

pub fn mine(c: MineCmd, file: &FileConfig, threads: Option<usize>) -> Result<(), CliError> {
    let seed = resolve_seed(c.seed, file);
    let data = overlay(&file.data, &c.data);
    let null_opts = overlay(&file.null, &c.null);
    let (null_cfg, sampling) = null_opts.build(seed);
    null_cfg.validate()?;
    let ck = load_model(&c.model)?;
    let width = ck.model.params.feature_count;
    let sets = load_sets(&data, false, width)?;
    check_width(&sets, width)?;
    let groups = saliency::mine_groups(&ck.model, &sets.train, null_cfg.t)?;
    let pruned = groupmine::prune(&groups, width, &null_cfg, sampling)?;
    write_file(&c.out, |out| pruned.write_survivors(out))?;
    if let Some(path) = &c.all_groups {
        write_file(path, |out| groups.write_report(out))?;
    }

    let resolved = json!({
        "seed": seed,
        "threads": threads,
        "data": data,
        "model": c.model,
        "features": width,
        "null": null_cfg,
        "sampling": sampling,
        "maps": groups.maps_total,
        "out": c.out,
    });
    let mut report = Report::new(
        "mine",
        &resolved,
        &["group", "size", "count", "exceedances", "survived"],
    );
    let mut decisions: Vec<_> = pruned.decisions.iter().collect();
    decisions.sort_by(|a, b| b.count.cmp(&a.count).then(a.group.cmp(&b.group)));
    for d in decisions {
        report.push(&GroupRow {
            group: d.group.to_one_based(),
            size: d.group.len(),
            count: d.count,
            exceedances: d.exceedances,
            survived: d.survived,
        });
    }
    report.finish(c.report.as_deref())?;
    Ok(())
}

#[derive(Serialize)]
struct SelectionRow {
    rank: usize,
    feature: usize,
    cluster: Option<usize>,
    cluster_members: Option<String>,
    score: f64,
    rule: &'static str,
}

fn selection_rows(sel: &SelectionResult) -> Vec<SelectionRow> {
    sel.provenance
        .iter()
        .enumerate()
        .map(|(i, p)| SelectionRow {
            rank: i + 1,
            feature: p.feature + 1,
            cluster: p.cluster.map(|c| c + 1),
            cluster_members: p.cluster.map(|c| {
                sel.clusters[c]
                    .iter()
                    .map(|f| (f + 1).to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            }),
            score: p.score,
            rule: p.rule.name(),
        })
        .collect()
}

const SELECTION_COLUMNS: [&str; 5] = ["rank", "feature", "cluster", "score", "cluster_members"];

fn finish_selection(
    command: &'static str,
    resolved: &serde_json::Value,
    sel: &SelectionResult,
    out: &Path,
    sidecar: Option<&Path>,
    report_path: Option<&Path>,
) -> Result<(), CliError> {
    for w in &sel.warnings {
        eprintln!("warning: {w}");
    }
    write_file(out, |o| sel.write_features(o))?;
    if let Some(path) = sidecar {
        write_file(path, |o| sel.write_sidecar(o))?;
    }
    let mut report = Report::new(command, resolved, &SELECTION_COLUMNS);
    for row in selection_rows(sel) {
        report.push(&row);
    }
    report.finish(report_path)?;
    Ok(())
}

pub fn select_nfs(c: NfsCmd, file: &FileConfig, threads: Option<usize>) -> Result<(), CliError> {
    let seed = resolve_seed(c.seed, file);
    let data = overlay(&file.data, &c.data);
    let model_opts = overlay(&file.model, &c.model);
    let train_opts = overlay(&file.train, &c.train);
    let null_opts = overlay(&file.null, &c.null);
    let select_opts = overlay(&file.select, &c.select);
    let pretrained = c.pretrained.as_deref().map(load_model).transpose()?;
    let min_width = pretrained
        .as_ref()
        .map(|ck| ck.model.params.feature_count)
        .unwrap_or(0);
    let sets = load_sets(&data, false, min_width)?;
    let n_keep = select_opts.n_keep(sets.d)?;
    let (null, sampling) = null_opts.build(seed);
    let mut cfg = NfsConfig {
        reranker: model_opts.build(),
        train: train_opts.build(seed),
        null,
        sampling,
    };
    let outcome = match pretrained {
        Some(ck) => {
            check_width(&sets, ck.model.params.feature_count)?;
            cfg.reranker = ck.model.config.clone();
            cfg.train = ck.train_config.clone();
            cfg.null.validate()?;
            select::nfs_select_with_model(&sets.train, ck.model, ck.history, &cfg, n_keep)?
        }
        None => select::nfs_select(&sets.train, &sets.valid, &cfg, n_keep)?,
    };
    if let Some(path) = &c.groups {
        write_file(path, |o| outcome.prune.write_survivors(o))?;
    }
    let resolved = json!({
        "seed": seed,
        "threads": threads,
        "data": data,
        "features": sets.d,
        "keep": n_keep,
        "keep_percent": select_opts.keep_percent,
        "pretrained": c.pretrained,
        "nfs": cfg,
        "maps": outcome.groups.maps_total,
        "groups_mined": outcome.groups.len(),
        "groups_surviving": outcome.prune.survivors.len(),
        "out": c.out,
    });
    let sidecar = c
        .sidecar
        .clone()
        .unwrap_or_else(|| with_suffix(&c.out, ".clusters.tsv"));
    finish_selection(
        "select-nfs",
        &resolved,
        &outcome.selection,
        &c.out,
        Some(&sidecar),
        c.report.as_deref(),
    )
}

pub fn select_gas(c: GasCmd, file: &FileConfig, threads: Option<usize>) -> Result<(), CliError> {
    let seed = resolve_seed(c.seed, file);
    let data = overlay(&file.data, &c.data);
    let opts = overlay(&file.select, &c.select);
    let sets = load_sets(&data, false, 0)?;
    let n_keep = opts.n_keep(sets.d)?;
    let sample = opts.sample(seed);
    let sel = baselines::gas_select(&sets.train, opts.cutoff(), n_keep, opts.tradeoff(), &sample)?;
    let resolved = json!({
        "seed": seed,
        "threads": threads,
        "data": data,
        "features": sets.d,
        "keep": n_keep,
        "keep_percent": opts.keep_percent,
        "cutoff": opts.cutoff(),
        "tradeoff": opts.tradeoff(),
        "sample": sample,
        "out": c.out,
    });
    finish_selection(
        "select-gas",
        &resolved,
        &sel,
        &c.out,
        None,
        c.report.as_deref(),
    )
}

pub fn select_hcas(c: HcasCmd, file: &FileConfig, threads: Option<usize>) -> Result<(), CliError> {
    let seed = resolve_seed(c.seed, file);
    let data = overlay(&file.data, &c.data);
    let opts = overlay(&file.select, &c.select);
    let sets = load_sets(&data, false, 0)?;
    let n_keep = opts.n_keep(sets.d)?;
    let sample = opts.sample(seed);
    let sel = baselines::hcas_select(&sets.train, opts.cutoff(), n_keep, &sample)?;
    let resolved = json!({
        "seed": seed,
        "threads": threads,
        "data": data,
        "features": sets.d,
        "keep": n_keep,
        "keep_percent": opts.keep_percent,
        "cutoff": opts.cutoff(),
        "sample": sample,
        "out": c.out,
    });
    let sidecar = c
        .sidecar
        .clone()
        .unwrap_or_else(|| with_suffix(&c.out, ".clusters.tsv"));
    finish_selection(
        "select-hcas",
        &resolved,
        &sel,
        &c.out,
        Some(&sidecar),
        c.report.as_deref(),
    )
}

pub fn select_xgas(c: XgasCmd, file: &FileConfig, threads: Option<usize>) -> Result<(), CliError> {
    let seed = resolve_seed(c.seed, file);
    let data = overlay(&file.data, &c.data);
    let opts = overlay(&file.select, &c.select);
    let sets = load_sets(&data, false, 0)?;
    let n_keep = opts.n_keep(sets.d)?;
    let importances = baselines::parse_importances(&read_text(&c.importances)?, sets.d)
        .map_err(|e| at(&c.importances, e))?;
    let sample = opts.sample(seed);
    let sel = baselines::xgas_select(&sets.train, &importances, n_keep, opts.tradeoff(), &sample)?;
    let resolved = json!({
        "seed": seed,
        "threads": threads,
        "data": data,
        "features": sets.d,
        "keep": n_keep,
        "keep_percent": opts.keep_percent,
        "tradeoff": opts.tradeoff(),
        "sample": sample,
        "importances": c.importances,
        "out": c.out,
    });
    finish_selection(
        "select-xgas",
        &resolved,
        &sel,
        &c.out,
        None,
        c.report.as_deref(),
    )
}

/// Splits `[method=]path[@percent]`; the method defaults to the file stem.
fn parse_spec(spec: &str, with_percent: bool) -> Result<(String, PathBuf, Option<f64>), CliError> {
    let (method, rest) = match spec.split_once('=') {
        Some((m, r)) if !m.is_empty() => (Some(m.to_string()), r),
        Some(_) => return Err(CliError::usage(format!("empty method name in {spec:?}"))),
        None => (None, spec),
    };
    let (path, percent) = match rest.rsplit_once('@') {
        Some((p, pct)) if with_percent => {
            let v: f64 = pct
                .parse()
                .map_err(|_| CliError::usage(format!("bad percentage in {spec:?}")))?;
            (p, Some(v))
        }
        _ => (rest, None),
    };
    if path.is_empty() {
        return Err(CliError::usage(format!("missing path in {spec:?}")));
    }
    let path = PathBuf::from(path);
    let method = method.unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string())
    });
    Ok((method, path, percent))
}

pub fn eval(c: EvalCmd, file: &FileConfig, threads: Option<usize>) -> Result<(), CliError> {
    let seed = resolve_seed(c.seed, file);
    let data = overlay(&file.data, &c.data);
    let model_opts = overlay(&file.model, &c.model);
    let train_opts = overlay(&file.train, &c.train);
    let k = c.cutoff.or(file.select.cutoff).unwrap_or(3);
    if k == 0 {
        return Err(CliError::usage("--cutoff must be positive"));
    }
    let feature_specs = c
        .features
        .iter()
        .map(|s| parse_spec(s, true))
        .collect::<Result<Vec<_>, _>>()?;
    let score_specs = c
        .scores
        .iter()
        .map(|s| parse_spec(s, false))
        .collect::<Result<Vec<_>, _>>()?;
    if c.no_full && feature_specs.is_empty() && score_specs.is_empty() {
        return Err(CliError::usage("nothing to evaluate"));
    }
    let sets = load_sets(&data, true, 0)?;
    let test = sets.test.as_ref().expect("test set requested");
    let d = sets.d;
    let rc = model_opts.build();
    let tc = train_opts.build(seed);

    let resolved = json!({
        "seed": seed,
        "threads": threads,
        "data": data,
        "features": d,
        "k": k,
        "model": rc,
        "train": tc,
    });
    let mut report = Report::new(
        "eval",
        &resolved,
        &[
            "method",
            "percent",
            "n_features",
            "n_heads",
            "ndcg",
            "features",
        ],
    );
    let run = |method: &str, features: &[usize], percent: Option<f64>| {
        let ev = eval::evaluate_subset(
            &sets.train,
            &sets.valid,
            test,
            features,
            percent,
            &rc,
            &tc,
            k,
        )?;
        let mut rec = EvalRecord::from_subset(method, d, k, &ev);
        if let Some(p) = percent {
            rec.percent = p;
        }
        log::info!(
            "{method}: {} features, nDCG@{k} {:.4}",
            rec.n_features,
            rec.ndcg
        );
        Ok::<_, CliError>(rec)
    };
    if !c.no_full {
        let all: Vec<usize> = (0..d).collect();
        report.push(&run("full", &all, Some(100.0))?);
    }
    for (method, path, percent) in &feature_specs {
        let features = select::parse_feature_list(&read_text(path)?, d).map_err(|e| at(path, e))?;
        report.push(&run(method, &features, *percent)?);
    }
    for (method, path, _) in &score_specs {
        let scores = eval::parse_scores(&read_text(path)?, test).map_err(|e| at(path, e))?;
        let ndcg = metrics::mean_ndcg_at_k(test, &scores, k)?;
        report.push(&EvalRecord {
            method: method.clone(),
            percent: 100.0,
            n_features: d,
            features: Vec::new(),
            k,
            ndcg,
            n_heads: None,
        });
    }
    report.finish(c.report.as_deref())?;
    Ok(())
}

#[derive(Serialize)]
struct RoleRow {
    feature: usize,
    role: &'static str,
    parent: Option<usize>,
}

pub fn synth(c: SynthCmd, file: &FileConfig) -> Result<(), CliError> {
    let seed = resolve_seed(c.seed, file);
    let opts = overlay(&file.synth, &c.synth);
    let cfg = opts.build(seed);
    let n_train = opts.queries.unwrap_or(50);
    let n_test = opts.test_queries.unwrap_or(0);
    if n_train == 0 {
        return Err(CliError::usage("--queries must be positive"));
    }
    if n_test > 0 && c.test_out.is_none() {
        return Err(CliError::usage("--test-queries needs --test-out"));
    }
    let (qs, roles) = data::generate_synthetic(&cfg)?;
    let d = qs.feature_count;
    let mut queries = qs.queries;
    let rest = queries.split_off(n_train);
    let train = QuerySet::new(queries, d)?;
    write_file(&c.out, |o| data::write_letor(&train, o))?;
    if let Some(path) = &c.test_out {
        if n_test > 0 {
            let test = QuerySet::new(rest, d)?;
            write_file(path, |o| data::write_letor(&test, o))?;
        }
    }
    if let Some(path) = &c.roles {
        write_file(path, |o| data::write_roles(&roles, o))?;
    }
    let resolved = json!({
        "synth": cfg,
        "train_queries": n_train,
        "test_queries": n_test,
        "out": c.out,
        "test_out": c.test_out,
        "roles": c.roles,
    });
    let mut report = Report::new("synth", &resolved, &["feature", "role", "parent"]);
    for (j, r) in roles.iter().enumerate() {
        let (role, parent) = match r {
            data::FeatureRole::Informative => ("informative", None),
            data::FeatureRole::DuplicateOf(p) => ("duplicate", Some(p + 1)),
            data::FeatureRole::Noise => ("noise", None),
        };
        report.push(&RoleRow {
            feature: j + 1,
            role,
            parent,
        });
    }
    report.finish(None)?;
    Ok(())
}
