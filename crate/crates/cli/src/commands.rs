use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;
use star_core::encoder::EncoderBackendKind;
use star_core::evaluation::{Dataset, EvalReport, Harness, MethodVariant, ReportKind};
use star_core::fusion::{RowSelection, LAMBDA_GRID};
use star_core::querygen::GenBackendKind;
use star_core::table::{parse_corpus, parse_queries, write_corpus};
use star_core::{Corpus, FusionStrategy, Index, Pipeline};

use crate::archive;
use crate::config::RunConfig;
use crate::{BackendArg, Command, Common, StrategyArg};

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if !common.corpus.is_empty() {
        cfg.paths.corpus = common.corpus.clone();
    }
    if !common.queries.is_empty() {
        cfg.paths.queries = common.queries.clone();
    }
    if let Some(a) = common.alpha {
        cfg.clustering.alpha = a;
    }
    if let Some(k) = common.k {
        cfg.clustering.k = k;
    }
    if let Some(l) = common.lambda {
        cfg.fusion.lambda = l;
    }
    if let Some(b) = common.beta {
        cfg.fusion.beta = b;
    }
    if let Some(s) = common.strategy {
        cfg.fusion.strategy = match s {
            StrategyArg::Fixed => FusionStrategy::Fixed,
            StrategyArg::Dynamic => FusionStrategy::Dynamic,
            StrategyArg::Concat => FusionStrategy::Concat,
        };
    }
    match common.backend {
        Some(BackendArg::Reference) => {
            cfg.encoder.backend = EncoderBackendKind::Reference;
            cfg.generator.backend = GenBackendKind::Template;
        }
        Some(BackendArg::Remote) => {
            cfg.encoder.backend = EncoderBackendKind::Remote;
            cfg.generator.backend = GenBackendKind::Remote;
        }
        None => {}
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(cache) = &common.cache {
        cfg.paths.cache = Some(cache.clone());
    }
    if common.threads.is_some() {
        cfg.threads = common.threads;
    }
    if let Some(level) = &common.log_level {
        cfg.log_level = level.clone();
    }
    cfg.dry_run |= common.dry_run;
    cfg.validate()?;
    Ok(cfg)
}

fn init(cfg: &RunConfig) -> Result<()> {
    let _ = env_logger::Builder::new()
        .parse_filters(&cfg.log_level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .try_init();
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot configure the worker pool")?;
    }
    Ok(())
}

fn merged_corpus(cfg: &RunConfig) -> Result<Corpus> {
    if cfg.paths.corpus.is_empty() {
        bail!("no corpus given (use --corpus or paths.corpus)");
    }
    let mut corpus = Corpus::new();
    for path in &cfg.paths.corpus {
        for table in parse_corpus(path)?.into_tables() {
            corpus
                .insert(table)
                .with_context(|| format!("merging {}", path.display()))?;
        }
    }
    Ok(corpus)
}

fn dataset_name(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    if stem == "corpus" {
        if let Some(dir) = path.parent().and_then(Path::file_name) {
            return dir.to_string_lossy().into_owned();
        }
    }
    stem
}

fn datasets(cfg: &RunConfig) -> Result<Vec<Dataset>> {
    let (corpora, queries) = (&cfg.paths.corpus, &cfg.paths.queries);
    if corpora.is_empty() {
        bail!("no corpus given (use --corpus or paths.corpus)");
    }
    if queries.len() != corpora.len() {
        bail!(
            "{} corpus files but {} query files; pass one --queries per --corpus",
            corpora.len(),
            queries.len()
        );
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (c, q) in corpora.iter().zip(queries) {
        let mut name = dataset_name(c);
        let mut n = 2;
        while !seen.insert(name.clone()) {
            name = format!("{}-{n}", dataset_name(c));
            n += 1;
        }
        out.push(Dataset {
            name,
            corpus: parse_corpus(c)?,
            queries: parse_queries(q)?,
        });
    }
    Ok(out)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_report(report: &EvalReport, out: &Path) -> Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    fs::write(out, report.to_json()).with_context(|| format!("cannot write {}", out.display()))?;
    let text_path = out.with_extension("txt");
    let text = report.render();
    fs::write(&text_path, &text)
        .with_context(|| format!("cannot write {}", text_path.display()))?;
    print!("{text}");
    Ok(())
}

fn configured_variant(cfg: &RunConfig) -> MethodVariant {
    let f = &cfg.fusion;
    let mut name = match f.strategy {
        FusionStrategy::Dynamic => "STAR w/ DWF".to_string(),
        FusionStrategy::Fixed => format!("STAR w/ FWF (lambda={})", f.lambda),
        FusionStrategy::Concat => "STAR w/ concat".to_string(),
    };
    if cfg.selection == RowSelection::TopRows {
        name.push_str(" [top-k rows]");
    }
    MethodVariant::configured(&name)
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Ingest { common, out } => ingest(&resolve(&common)?, out),
        Command::Represent { common, out } => represent(&resolve(&common)?, out),
        Command::Index { common, out } => index(&resolve(&common)?, out),
        Command::Search {
            common,
            index,
            top_k,
            query,
        } => search(&resolve(&common)?, index, top_k, &query),
        Command::Eval { common, out } => {
            let cfg = resolve(&common)?;
            let variant = configured_variant(&cfg);
            report(&cfg, out, |h| {
                h.run(std::slice::from_ref(&variant), ReportKind::Eval)
            })
        }
        Command::Sweep {
            common,
            out,
            lambdas,
            no_dwf,
        } => {
            let cfg = resolve(&common)?;
            let grid = lambdas.unwrap_or_else(|| LAMBDA_GRID.to_vec());
            report(&cfg, out, |h| h.run_sweep(&grid, !no_dwf))
        }
        Command::Ablate { common, out } => {
            let cfg = resolve(&common)?;
            report(&cfg, out, |h| h.run_ablation())
        }
    }
}

fn ingest(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    init(cfg)?;
    let corpus = merged_corpus(cfg)?;
    let mut queries = 0;
    let mut missing = Vec::new();
    for path in &cfg.paths.queries {
        for q in parse_queries(path)? {
            queries += 1;
            missing.extend(q.gold_ids.into_iter().filter(|id| !corpus.contains(id)));
        }
    }
    if corpus.is_empty() {
        log::warn!("corpus is empty");
    }
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        bail!("gold table ids missing from corpus: {}", missing.join(", "));
    }
    if let Some(out) = out {
        write_corpus(&corpus, &out)?;
    }
    println!(
        "{}",
        json!({ "tables": corpus.len(), "rows": corpus.total_rows(), "queries": queries })
    );
    Ok(())
}

fn build_archive(
    cfg: &RunConfig,
    archive_path: &Path,
) -> Result<(Vec<star_core::TableRepresentation>, usize)> {
    let corpus = merged_corpus(cfg)?;
    if corpus.is_empty() {
        log::warn!("corpus is empty; writing an empty archive");
    }
    let backends = cfg.backends()?;
    let pipeline = Pipeline::new(cfg.pipeline(), &backends.gateway, &backends.generator)?;
    let (reps, summary) = archive::represent(&corpus, &pipeline, archive_path, || {
        backends.gateway.backend_texts()
    })?;
    backends.finish()?;
    println!("{}", serde_json::to_string(&summary)?);
    if !summary.failed.is_empty() {
        bail!(
            "{} of {} tables failed: {}",
            summary.failed.len(),
            summary.tables,
            summary.failed.join(", ")
        );
    }
    Ok((reps, backends.gateway.dim().unwrap_or(0)))
}

fn represent(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    init(cfg)?;
    let path = out.unwrap_or_else(|| PathBuf::from("representations.jsonl"));
    build_archive(cfg, &path).map(|_| ())
}

fn index(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    init(cfg)?;
    let out = out
        .or_else(|| cfg.paths.index.clone())
        .unwrap_or_else(|| PathBuf::from("index.star"));
    let (reps, gateway_dim) = build_archive(cfg, &with_suffix(&out, ".reps.jsonl"))?;
    let dim = reps.first().map_or(gateway_dim, |r| r.embedding.dim());
    let fingerprint = reps
        .first()
        .map(|r| r.fingerprint.clone())
        .unwrap_or_default();
    let mut index = Index::new(dim, fingerprint);
    for rep in &reps {
        index.add(rep)?;
    }
    index.persist(&out)?;
    log::info!("wrote {} entries to {}", index.len(), out.display());
    Ok(())
}

fn search(cfg: &RunConfig, index: Option<PathBuf>, top_k: usize, query: &str) -> Result<()> {
    init(cfg)?;
    let path = index
        .or_else(|| cfg.paths.index.clone())
        .context("no index given (use --index or paths.index)")?;
    let index = Index::load(&path)?;
    let backends = cfg.backends()?;
    let qv = backends.gateway.encode(query)?;
    let result = index.search(&qv, top_k)?;
    backends.finish()?;
    for (rank, hit) in result.hits.iter().enumerate() {
        println!(
            "{}",
            json!({ "query": query, "rank": rank + 1, "table_id": hit.table_id, "score": hit.score })
        );
    }
    Ok(())
}

fn report(
    cfg: &RunConfig,
    out: Option<PathBuf>,
    run: impl FnOnce(&Harness<'_>) -> star_core::Result<EvalReport>,
) -> Result<()> {
    init(cfg)?;
    let data = datasets(cfg)?;
    let backends = cfg.backends()?;
    let base = cfg.pipeline();
    let harness = Harness {
        datasets: &data,
        base: &base,
        gateway: &backends.gateway,
        generator: &backends.generator,
    };
    let report = run(&harness)?;
    backends.finish()?;
    let out = out
        .or_else(|| cfg.paths.report.clone())
        .unwrap_or_else(|| PathBuf::from("report.json"));
    write_report(&report, &out)
}
