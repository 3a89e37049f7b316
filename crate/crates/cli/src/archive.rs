//! Resumable JSONL archive of table representations. Each finished table is
//! appended immediately; once a run completes the file is rewritten in
//! corpus order.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use star_core::{Corpus, Pipeline, TableRepresentation};

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub tables: usize,
    pub reused: usize,
    pub built: usize,
    pub failed: Vec<String>,
    pub encoder_calls: usize,
    pub fingerprint: String,
}

/// Reads an archive, skipping a torn final line left by an interrupted run.
pub fn load(path: &Path) -> Result<Vec<TableRepresentation>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e).with_context(|| format!("cannot open archive {}", path.display())),
    };
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("cannot read archive {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(rep) => out.push(rep),
            Err(e) => log::warn!(
                "{}:{}: skipping unreadable record: {e}",
                path.display(),
                n + 1
            ),
        }
    }
    Ok(out)
}

fn write_all(path: &Path, reps: &[TableRepresentation]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(
            File::create(&tmp).with_context(|| format!("cannot write {}", tmp.display()))?,
        );
        for rep in reps {
            serde_json::to_writer(&mut w, rep)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("cannot replace {}", path.display()))?;
    Ok(())
}

/// Builds a representation for every table whose archived record is missing
/// or carries a different fingerprint.
pub fn represent(
    corpus: &Corpus,
    pipeline: &Pipeline<'_>,
    path: &Path,
    gateway_calls: impl Fn() -> usize,
) -> Result<(Vec<TableRepresentation>, Summary)> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    let fingerprint = pipeline.fingerprint().to_string();
    let mut previous: HashMap<String, TableRepresentation> = load(path)?
        .into_iter()
        .filter(|r| r.fingerprint == fingerprint && corpus.contains(&r.table_id))
        .map(|r| (r.table_id.clone(), r))
        .collect();
    let todo: Vec<_> = corpus
        .tables()
        .filter(|t| !previous.contains_key(t.id()))
        .collect();
    let reused = corpus.len() - todo.len();
    let calls_before = gateway_calls();

    let appender = Mutex::new(BufWriter::new(
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .with_context(|| format!("cannot open archive {}", path.display()))?,
    ));
    let results: Vec<(String, star_core::Result<TableRepresentation>)> = todo
        .par_iter()
        .map(|t| {
            let rep = pipeline.build_representation(t);
            if let Ok(rep) = &rep {
                let mut w = appender.lock().expect("archive writer");
                let line = serde_json::to_string(rep).expect("representation serializes");
                if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
                    log::warn!("cannot append to archive: {e}");
                }
            }
            (t.id().to_string(), rep)
        })
        .collect();
    drop(appender);

    let mut failed = Vec::new();
    let built = results.iter().filter(|(_, r)| r.is_ok()).count();
    for (id, r) in results {
        match r {
            Ok(rep) => {
                previous.insert(id, rep);
            }
            Err(e) => {
                log::error!("{e}");
                failed.push(id);
            }
        }
    }
    let ordered: Vec<TableRepresentation> = corpus
        .tables()
        .filter_map(|t| previous.remove(t.id()))
        .collect();
    write_all(path, &ordered)?;
    let summary = Summary {
        tables: corpus.len(),
        reused,
        built,
        failed,
        encoder_calls: gateway_calls() - calls_before,
        fingerprint,
    };
    Ok((ordered, summary))
}
