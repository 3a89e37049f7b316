//! Recall@K evaluation, method variants (fusion sweep, ablations) and the
//! two report layouts: a datasets × {R@1, R@5, R@10} comparison table and
//! an ablation table with deltas against the full model.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::Gateway;
use crate::error::{Error, Result};
use crate::fusion::{FusionStrategy, Pipeline, PipelineConfig, RowSelection, TableRepresentation};
use crate::index::{Index, SearchResult};
use crate::querygen::{QueryBackend, QueryGenerator};
use crate::table::{Corpus, EvalQuery};

/// Cutoffs reported for every variant.
pub const CUTOFFS: [usize; 3] = [1, 5, 10];

/// 1.0 when any gold id is among the first `k` hits, else 0.0.
pub fn recall_at_k(result: &SearchResult, gold: &BTreeSet<String>, k: usize) -> f64 {
    let hit = result
        .hits
        .iter()
        .take(k)
        .any(|h| gold.contains(&h.table_id));
    if hit {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Recalls {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

impl Recalls {
    pub fn values(&self) -> [f64; 3] {
        [self.r1, self.r5, self.r10]
    }

    fn from_values(v: [f64; 3]) -> Self {
        Self {
            r1: v[0],
            r5: v[1],
            r10: v[2],
        }
    }

    pub fn is_monotone(&self) -> bool {
        self.r1 <= self.r5 && self.r5 <= self.r10
    }

    fn minus(&self, other: &Recalls) -> Recalls {
        Recalls {
            r1: self.r1 - other.r1,
            r5: self.r5 - other.r5,
            r10: self.r10 - other.r10,
        }
    }

    pub fn mean<'a>(items: impl IntoIterator<Item = &'a Recalls>) -> Recalls {
        let mut sum = [0.0; 3];
        let mut n = 0usize;
        for r in items {
            for (s, v) in sum.iter_mut().zip(r.values()) {
                *s += v;
            }
            n += 1;
        }
        if n == 0 {
            return Recalls::default();
        }
        Recalls::from_values(sum.map(|s| s / n as f64))
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub corpus: Corpus,
    pub queries: Vec<EvalQuery>,
}

impl Dataset {
    pub fn check_gold(&self) -> Result<()> {
        let missing: BTreeSet<String> = self
            .queries
            .iter()
            .flat_map(|q| q.gold_ids.iter())
            .filter(|id| !self.corpus.contains(id))
            .cloned()
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingGold(missing.into_iter().collect()))
        }
    }
}

/// A pipeline configuration under evaluation. The three flags select the
/// ablations: `use_scqg = false` swaps clustering for top-k rows with a
/// single generated query, `use_wf = false` swaps weighted fusion for
/// concatenated encoding, `use_header = false` sets α to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodVariant {
    pub name: String,
    pub use_scqg: bool,
    pub use_wf: bool,
    pub use_header: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<FusionStrategy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
}

impl MethodVariant {
    fn flags(name: &str, use_scqg: bool, use_wf: bool, use_header: bool) -> Self {
        Self {
            name: name.to_string(),
            use_scqg,
            use_wf,
            use_header,
            strategy: None,
            lambda: None,
            beta: None,
            alpha: None,
            k: None,
        }
    }

    /// Whatever the base configuration says, unmodified.
    pub fn configured(name: &str) -> Self {
        Self::flags(name, true, true, true)
    }

    pub fn star_full() -> Self {
        Self {
            strategy: Some(FusionStrategy::Dynamic),
            ..Self::flags("STAR (full)", true, true, true)
        }
    }

    pub fn star_dynamic() -> Self {
        Self {
            strategy: Some(FusionStrategy::Dynamic),
            ..Self::flags("STAR w/ DWF", true, true, true)
        }
    }

    pub fn star_fixed(lambda: f64) -> Self {
        Self {
            strategy: Some(FusionStrategy::Fixed),
            lambda: Some(lambda),
            ..Self::flags(&format!("STAR w/ FWF (lambda={lambda})"), true, true, true)
        }
    }

    /// Top-k rows, one direct query, concatenated encoding.
    pub fn topk_baseline() -> Self {
        Self::flags("Top-k baseline", false, false, true)
    }

    pub fn without_scqg() -> Self {
        Self {
            strategy: Some(FusionStrategy::Dynamic),
            ..Self::flags("w/o SCQG", false, true, true)
        }
    }

    pub fn without_wf() -> Self {
        Self::flags("w/o WF", true, false, true)
    }

    pub fn without_header() -> Self {
        Self {
            strategy: Some(FusionStrategy::Dynamic),
            ..Self::flags("w/o Header-aware", true, true, false)
        }
    }

    pub fn pipeline_config(&self, base: &PipelineConfig) -> PipelineConfig {
        let mut cfg = base.clone();
        if let Some(s) = self.strategy {
            cfg.fusion.strategy = s;
        }
        if let Some(l) = self.lambda {
            cfg.fusion.lambda = l;
        }
        if let Some(b) = self.beta {
            cfg.fusion.beta = b;
        }
        if let Some(a) = self.alpha {
            cfg.clustering.alpha = a;
        }
        if let Some(k) = self.k {
            cfg.clustering.k = k;
        }
        if !self.use_scqg {
            cfg.selection = RowSelection::TopRows;
        }
        if !self.use_wf {
            cfg.fusion.strategy = FusionStrategy::Concat;
        }
        if !self.use_header {
            cfg.clustering.alpha = 0.0;
        }
        cfg
    }
}

/// Representations for every table of `corpus`, built in parallel and
/// returned in corpus order.
pub fn build_representations(
    corpus: &Corpus,
    pipeline: &Pipeline<'_>,
) -> Result<Vec<TableRepresentation>> {
    let tables: Vec<_> = corpus.tables().collect();
    tables
        .par_iter()
        .map(|t| pipeline.build_representation(t))
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

/// Mean hit-based recall at each cutoff for a fixed set of representations.
pub fn evaluate_representations(
    reps: &[TableRepresentation],
    queries: &[EvalQuery],
    gateway: &Gateway,
    fingerprint: &str,
) -> Result<Recalls> {
    if queries.is_empty() {
        return Err(Error::Empty("no evaluation queries"));
    }
    let dim = reps
        .first()
        .map(|r| r.embedding.dim())
        .ok_or(Error::EmptyIndex)?;
    let mut index = Index::new(dim, fingerprint);
    for rep in reps {
        index.add(rep)?;
    }
    let texts: Vec<&str> = queries.iter().map(|q| q.text.as_str()).collect();
    let vectors = gateway.encode_batch(&texts)?;
    let max_k = *CUTOFFS.iter().max().expect("cutoffs");
    let mut sums = [0.0; 3];
    for (q, v) in queries.iter().zip(&vectors) {
        let result = index.search(v, max_k)?;
        for (s, k) in sums.iter_mut().zip(CUTOFFS) {
            *s += recall_at_k(&result, &q.gold_ids, k);
        }
    }
    Ok(Recalls::from_values(sums.map(|s| s / queries.len() as f64)))
}

#[derive(Debug, Clone)]
pub struct VariantOutcome {
    pub recalls: Recalls,
    pub fingerprint: String,
    pub representations: Vec<TableRepresentation>,
}

/// Builds representations for `variant`, indexes them, and scores the
/// dataset's queries.
pub fn evaluate(
    dataset: &Dataset,
    variant: &MethodVariant,
    base: &PipelineConfig,
    gateway: &Gateway,
    generator: &QueryGenerator,
) -> Result<VariantOutcome> {
    dataset.check_gold()?;
    let pipeline = Pipeline::new(variant.pipeline_config(base), gateway, generator)?;
    let representations = build_representations(&dataset.corpus, &pipeline)?;
    let recalls = evaluate_representations(
        &representations,
        &dataset.queries,
        gateway,
        pipeline.fingerprint(),
    )?;
    Ok(VariantOutcome {
        recalls,
        fingerprint: pipeline.fingerprint().to_string(),
        representations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportKind {
    Eval,
    Sweep,
    Ablation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub name: String,
    pub metrics: IndexMap<String, Recalls>,
    pub avg: Recalls,
    /// Difference to the full model (ablation reports only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<Recalls>,
    pub fingerprints: IndexMap<String, String>,
    /// Synthetic queries per generator backend, summed over datasets.
    pub generated: IndexMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub kind: ReportKind,
    pub seed: u64,
    pub encoder: String,
    pub generator: String,
    pub base: PipelineConfig,
    pub variants: Vec<MethodVariant>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub datasets: Vec<String>,
    pub variants: Vec<VariantRow>,
    pub meta: ReportMeta,
}

/// Shared inputs of a multi-variant run.
pub struct Harness<'a> {
    pub datasets: &'a [Dataset],
    pub base: &'a PipelineConfig,
    pub gateway: &'a Gateway,
    pub generator: &'a QueryGenerator,
}

impl Harness<'_> {
    /// Evaluates each variant on each dataset, variants in sequence.
    pub fn run(&self, variants: &[MethodVariant], kind: ReportKind) -> Result<EvalReport> {
        let mut names = BTreeSet::new();
        for v in variants {
            if !names.insert(v.name.as_str()) {
                return Err(Error::Config(format!(
                    "duplicate variant name `{}`",
                    v.name
                )));
            }
        }
        for d in self.datasets {
            d.check_gold()?;
        }
        let mut rows = Vec::with_capacity(variants.len());
        for variant in variants {
            let mut metrics = IndexMap::new();
            let mut fingerprints = IndexMap::new();
            let mut generated: IndexMap<String, usize> = IndexMap::new();
            for d in self.datasets {
                log::info!("evaluating `{}` on `{}`", variant.name, d.name);
                let out = evaluate(d, variant, self.base, self.gateway, self.generator)?;
                for q in out.representations.iter().flat_map(|r| &r.queries) {
                    let key = match q.backend {
                        QueryBackend::Remote => "remote",
                        QueryBackend::Template => "template",
                    };
                    *generated.entry(key.to_string()).or_default() += 1;
                }
                generated.sort_keys();
                metrics.insert(d.name.clone(), out.recalls);
                fingerprints.insert(d.name.clone(), out.fingerprint);
            }
            let avg = Recalls::mean(metrics.values());
            rows.push(VariantRow {
                name: variant.name.clone(),
                metrics,
                avg,
                delta: None,
                fingerprints,
                generated,
            });
        }
        if kind == ReportKind::Ablation {
            if let Some(full) = rows.first().map(|r| r.avg) {
                for row in &mut rows {
                    row.delta = Some(row.avg.minus(&full));
                }
            }
        }
        Ok(EvalReport {
            datasets: self.datasets.iter().map(|d| d.name.clone()).collect(),
            variants: rows,
            meta: ReportMeta {
                kind,
                seed: self.base.clustering.seed,
                encoder: self.gateway.backend_id(),
                generator: self.generator.backend_id(),
                base: self.base.clone(),
                variants: variants.to_vec(),
            },
        })
    }

    /// Top-k baseline, one fixed-fusion row per λ, then optionally dynamic fusion.
    pub fn run_sweep(&self, lambdas: &[f64], plus_dwf: bool) -> Result<EvalReport> {
        if let Some(l) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(Error::Config(format!("lambda must be in [0, 1], got {l}")));
        }
        let mut variants = vec![MethodVariant::topk_baseline()];
        variants.extend(lambdas.iter().map(|&l| MethodVariant::star_fixed(l)));
        if plus_dwf {
            variants.push(MethodVariant::star_dynamic());
        }
        self.run(&variants, ReportKind::Sweep)
    }

    /// Full model and its three single-component ablations.
    pub fn run_ablation(&self) -> Result<EvalReport> {
        let variants = [
            MethodVariant::star_full(),
            MethodVariant::without_scqg(),
            MethodVariant::without_wf(),
            MethodVariant::without_header(),
        ];
        self.run(&variants, ReportKind::Ablation)
    }
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn render(&self) -> String {
        match self.meta.kind {
            ReportKind::Ablation => self.render_ablation(),
            _ => self.render_comparison(),
        }
    }

    fn columns(&self) -> Vec<Vec<f64>> {
        // one column per (dataset or avg, cutoff)
        let mut cols = Vec::new();
        for d in &self.datasets {
            for i in 0..3 {
                cols.push(
                    self.variants
                        .iter()
                        .map(|v| v.metrics[d].values()[i])
                        .collect(),
                );
            }
        }
        for i in 0..3 {
            cols.push(self.variants.iter().map(|v| v.avg.values()[i]).collect());
        }
        cols
    }

    /// Comparison table: bold (`**x**`) marks the best value per column,
    /// underscores (`_x_`) the second best.
    pub fn render_comparison(&self) -> String {
        const CELL: usize = 9;
        let name_w = self
            .variants
            .iter()
            .map(|v| v.name.chars().count())
            .max()
            .unwrap_or(0)
            .max("Method".len());
        let groups: Vec<&str> = self
            .datasets
            .iter()
            .map(String::as_str)
            .chain(std::iter::once("Avg."))
            .collect();
        let group_w = CELL * 3 + 2;
        let mut out = String::new();
        let _ = write!(out, "{:<name_w$}", "Method");
        for g in &groups {
            let _ = write!(out, " | {g:^group_w$}");
        }
        out.push('\n');
        let _ = write!(out, "{:<name_w$}", "");
        for _ in &groups {
            let _ = write!(
                out,
                " | {:>CELL$} {:>CELL$} {:>CELL$}",
                "R@1", "R@5", "R@10"
            );
        }
        out.push('\n');
        let rule = name_w + groups.len() * (group_w + 3);
        out.push_str(&"-".repeat(rule));
        out.push('\n');

        let cols = self.columns();
        let marks: Vec<(Option<f64>, Option<f64>)> = cols.iter().map(|c| best_two(c)).collect();
        for (r, v) in self.variants.iter().enumerate() {
            let _ = write!(out, "{:<name_w$}", v.name);
            for (c, col) in cols.iter().enumerate() {
                if c % 3 == 0 {
                    out.push_str(" |");
                }
                let cell = mark(col[r], marks[c]);
                let _ = write!(out, " {cell:>CELL$}");
            }
            out.push('\n');
        }
        out
    }

    /// Ablation table over dataset averages: value and parenthesized delta.
    pub fn render_ablation(&self) -> String {
        const CELL: usize = 16;
        let name_w = self
            .variants
            .iter()
            .map(|v| v.name.chars().count() + 2)
            .max()
            .unwrap_or(0)
            .max("Method".len());
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<name_w$} | {:>CELL$} | {:>CELL$} | {:>CELL$}",
            "Method", "R@1", "R@5", "R@10"
        );
        out.push_str(&"-".repeat(name_w + 3 * (CELL + 3)));
        out.push('\n');
        for (i, v) in self.variants.iter().enumerate() {
            let name = if i == 0 {
                v.name.clone()
            } else {
                format!("  {}", v.name)
            };
            let _ = write!(out, "{name:<name_w$}");
            for (j, value) in v.avg.values().iter().enumerate() {
                let cell = match (i, v.delta) {
                    (0, _) | (_, None) => pct(*value),
                    (_, Some(d)) => format!("{} ({:+.2})", pct(*value), d.values()[j] * 100.0),
                };
                let _ = write!(out, " | {cell:>CELL$}");
            }
            out.push('\n');
        }
        out
    }
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

fn best_two(col: &[f64]) -> (Option<f64>, Option<f64>) {
    let mut distinct: Vec<f64> = col.to_vec();
    distinct.sort_by(|a, b| b.total_cmp(a));
    distinct.dedup();
    (distinct.first().copied(), distinct.get(1).copied())
}

fn mark(v: f64, (best, second): (Option<f64>, Option<f64>)) -> String {
    if Some(v) == best {
        format!("**{}**", pct(v))
    } else if Some(v) == second {
        format!("_{}_", pct(v))
    } else {
        pct(v)
    }
}
