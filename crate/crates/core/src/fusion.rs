//! Table/query embedding fusion and the end-to-end table representation
//! pipeline.
//!
//! The partial table and the joined synthetic queries are encoded
//! separately and combined as `e_T = w_t·e_table + w_q·e_queries` with
//! `w_t + w_q = 1`. Fixed fusion uses `w_q = λ`; dynamic fusion uses
//! `w_q = clamp(β·cos(e_table, e_queries), 0, 1)`. The fused vector is
//! renormalized, which leaves cosine rankings unchanged.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::{
    header_aware_embeddings, kmeans, select_representatives, ClusterAssignment, ClusteringConfig,
    PartialTable,
};
use crate::embedding::{check_dims, l2_norm, Embedding};
use crate::encoder::Gateway;
use crate::error::{Error, Result};
use crate::querygen::{QueryGenerator, SyntheticQuery};
use crate::table::{serialize_header, serialize_row, Table};

/// Below this norm a fused vector is treated as cancelled out.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// λ values swept for fixed-weight fusion.
pub const LAMBDA_GRID: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    Fixed,
    #[default]
    Dynamic,
    /// Single encoding of table text followed by query text.
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub strategy: FusionStrategy,
    pub lambda: f64,
    pub beta: f64,
    pub query_separator: String,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            strategy: FusionStrategy::Dynamic,
            lambda: 0.5,
            beta: 0.5,
            query_separator: "\n".to_string(),
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda must be in [0, 1], got {}",
                self.lambda
            )));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::Config(format!(
                "beta must be >= 0, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub w_t: f64,
    pub w_q: f64,
    /// Table/query cosine, recorded by dynamic fusion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
    /// Whether `β·s` fell outside `[0, 1]` and was clamped.
    #[serde(default)]
    pub clamped: bool,
}

/// `(1 − w_q)·e_table + w_q·e_queries`, before normalization.
pub fn fused_raw(e_table: &Embedding, e_queries: &Embedding, w_q: f64) -> Result<Vec<f64>> {
    check_dims(e_table.dim(), e_queries.dim())?;
    let w_t = 1.0 - w_q;
    Ok(e_table
        .as_slice()
        .iter()
        .zip(e_queries.as_slice())
        .map(|(t, q)| w_t * t + w_q * q)
        .collect())
}

fn fuse_with(e_table: &Embedding, e_queries: &Embedding, w_q: f64) -> Result<Embedding> {
    check_dims(e_table.dim(), e_queries.dim())?;
    // The endpoints return the input unchanged, bit for bit.
    if w_q == 0.0 {
        return Ok(e_table.clone());
    }
    if w_q == 1.0 {
        return Ok(e_queries.clone());
    }
    let raw = fused_raw(e_table, e_queries, w_q)?;
    if l2_norm(&raw) < DEGENERATE_NORM {
        return Err(Error::DegenerateFusion);
    }
    Embedding::normalize(raw)
}

pub fn fuse_fixed(
    e_table: &Embedding,
    e_queries: &Embedding,
    lambda: f64,
) -> Result<(Embedding, FusionWeights)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!(
            "lambda must be in [0, 1], got {lambda}"
        )));
    }
    let fused = fuse_with(e_table, e_queries, lambda)?;
    Ok((
        fused,
        FusionWeights {
            w_t: 1.0 - lambda,
            w_q: lambda,
            similarity: None,
            clamped: false,
        },
    ))
}

pub fn fuse_dynamic(
    e_table: &Embedding,
    e_queries: &Embedding,
    beta: f64,
) -> Result<(Embedding, FusionWeights)> {
    let s = e_table.cosine(e_queries)?;
    let unclamped = beta * s;
    let w_q = unclamped.clamp(0.0, 1.0);
    let clamped = w_q != unclamped;
    if clamped {
        log::debug!("dynamic fusion weight {unclamped} clamped to {w_q}");
    }
    let (fused, weights) = fuse_fixed(e_table, e_queries, w_q)?;
    Ok((
        fused,
        FusionWeights {
            similarity: Some(s),
            clamped,
            ..weights
        },
    ))
}

pub fn join_queries(queries: &[SyntheticQuery], separator: &str) -> String {
    let mut sorted: Vec<&SyntheticQuery> = queries.iter().collect();
    sorted.sort_by_key(|q| q.cluster_index);
    sorted
        .iter()
        .map(|q| q.text.as_str())
        .collect::<Vec<_>>()
        .join(separator)
}

/// `(Encoder(partial table), Encoder(q₁ ⊕ … ⊕ q_k))`.
pub fn encode_components(
    partial: &PartialTable,
    queries: &[SyntheticQuery],
    gateway: &Gateway,
    separator: &str,
) -> Result<(Embedding, Embedding)> {
    if queries.is_empty() {
        return Err(Error::Empty("no synthetic queries to encode"));
    }
    let table_text = partial.text()?;
    let query_text = join_queries(queries, separator);
    let mut out = gateway.encode_batch(&[table_text, query_text])?;
    let e_queries = out.pop().expect("two embeddings");
    let e_table = out.pop().expect("two embeddings");
    Ok((e_table, e_queries))
}

/// Text embedded by the concatenation baseline: table first, then queries.
pub fn concat_text(
    partial: &PartialTable,
    queries: &[SyntheticQuery],
    separator: &str,
) -> Result<String> {
    Ok(format!(
        "{}\n{}",
        partial.text()?,
        join_queries(queries, separator)
    ))
}

pub fn concat_embedding(
    partial: &PartialTable,
    queries: &[SyntheticQuery],
    gateway: &Gateway,
    separator: &str,
) -> Result<(Embedding, FusionWeights)> {
    let e = gateway.encode(&concat_text(partial, queries, separator)?)?;
    Ok((
        e,
        FusionWeights {
            w_t: 1.0,
            w_q: 0.0,
            similarity: None,
            clamped: false,
        },
    ))
}

/// How rows for the partial table (and query generation) are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RowSelection {
    /// Header-aware k-means, centroid-nearest rows, one query per cluster.
    #[default]
    Clustered,
    /// First `k` rows and a single query generated over them.
    TopRows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PipelineConfig {
    pub clustering: ClusteringConfig,
    pub fusion: FusionConfig,
    pub selection: RowSelection,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.clustering.validate()?;
        self.fusion.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRepresentation {
    pub table_id: String,
    pub embedding: Embedding,
    pub strategy: FusionStrategy,
    pub weights: FusionWeights,
    pub selection: RowSelection,
    pub k_effective: usize,
    /// Original indices of the rows in the partial table.
    pub partial_rows: Vec<usize>,
    pub partial_table_text: String,
    pub queries: Vec<SyntheticQuery>,
    pub queries_text: String,
    pub fingerprint: String,
}

/// Row selection output: the partial table, its queries, and the cluster
/// assignment when clustering was used.
#[derive(Debug, Clone)]
pub struct Selection {
    pub partial: PartialTable,
    pub queries: Vec<SyntheticQuery>,
    pub assignment: Option<ClusterAssignment>,
}

/// Per-table representation builder bound to one configuration, encoder and
/// generator.
pub struct Pipeline<'a> {
    config: PipelineConfig,
    gateway: &'a Gateway,
    generator: &'a QueryGenerator,
    fingerprint: String,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        config: PipelineConfig,
        gateway: &'a Gateway,
        generator: &'a QueryGenerator,
    ) -> Result<Self> {
        config.validate()?;
        let fingerprint = fingerprint(&config, gateway, generator);
        Ok(Self {
            config,
            gateway,
            generator,
            fingerprint,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Header-aware clustering inputs for `table`: `α·e_H + (1−α)·e_rᵢ`.
    pub fn header_aware_points(&self, table: &Table, alpha: f64) -> Result<Vec<Vec<f64>>> {
        let mut texts = Vec::with_capacity(table.num_rows() + 1);
        texts.push(serialize_header(table.header()));
        for row in table.rows() {
            texts.push(serialize_row(table.header(), &row.cells)?);
        }
        let embeddings = self.gateway.encode_batch(&texts)?;
        header_aware_embeddings(&embeddings[0], &embeddings[1..], alpha)
    }

    /// Clusters rows and picks representatives, without generating queries.
    pub fn cluster(&self, table: &Table) -> Result<(PartialTable, ClusterAssignment)> {
        if table.num_rows() == 0 {
            return Err(Error::Empty("table has no rows").at_stage(table.id(), "encode"));
        }
        let c = &self.config.clustering;
        let points = self
            .header_aware_points(table, c.alpha)
            .map_err(|e| e.at_stage(table.id(), "encode"))?;
        let assignment = kmeans(&points, c.k, c.seed, c.max_iters, c.tol)
            .map_err(|e| e.at_stage(table.id(), "cluster"))?;
        let partial = select_representatives(
            table.id(),
            table.header(),
            &points,
            table.rows(),
            &assignment,
        )
        .map_err(|e| e.at_stage(table.id(), "select"))?;
        Ok((partial, assignment))
    }

    pub fn select(&self, table: &Table) -> Result<Selection> {
        match self.config.selection {
            RowSelection::Clustered => {
                let (partial, assignment) = self.cluster(table)?;
                let queries = self
                    .generator
                    .generate_all(table, &assignment)
                    .map_err(|e| e.at_stage(table.id(), "generate"))?;
                Ok(Selection {
                    partial,
                    queries,
                    assignment: Some(assignment),
                })
            }
            RowSelection::TopRows => {
                if table.num_rows() == 0 {
                    return Err(Error::Empty("table has no rows").at_stage(table.id(), "select"));
                }
                let partial = PartialTable::top_rows(table, self.config.clustering.k);
                let sub = table.subtable(
                    format!("{}#top", table.id()),
                    partial.rows().into_iter().cloned().collect(),
                );
                let query = self
                    .generator
                    .generate_query(table.id(), 0, &sub)
                    .map_err(|e| e.at_stage(table.id(), "generate"))?;
                Ok(Selection {
                    partial,
                    queries: vec![query],
                    assignment: None,
                })
            }
        }
    }

    /// Fuses an already-selected partial table and its queries.
    pub fn fuse(&self, table_id: &str, selection: &Selection) -> Result<TableRepresentation> {
        let f = &self.config.fusion;
        let (partial, queries) = (&selection.partial, &selection.queries);
        let (embedding, weights) = match f.strategy {
            FusionStrategy::Concat => {
                concat_embedding(partial, queries, self.gateway, &f.query_separator)
            }
            FusionStrategy::Fixed | FusionStrategy::Dynamic => {
                encode_components(partial, queries, self.gateway, &f.query_separator).and_then(
                    |(t, q)| match f.strategy {
                        FusionStrategy::Fixed => fuse_fixed(&t, &q, f.lambda),
                        _ => fuse_dynamic(&t, &q, f.beta),
                    },
                )
            }
        }
        .map_err(|e| e.at_stage(table_id, "fuse"))?;
        Ok(TableRepresentation {
            table_id: table_id.to_string(),
            embedding,
            strategy: f.strategy,
            weights,
            selection: self.config.selection,
            k_effective: partial.len(),
            partial_rows: partial.row_indices(),
            partial_table_text: partial.text().map_err(|e| e.at_stage(table_id, "fuse"))?,
            queries: queries.clone(),
            queries_text: join_queries(queries, &f.query_separator),
            fingerprint: self.fingerprint.clone(),
        })
    }

    /// Encode → header mix → k-means → representatives → per-cluster
    /// queries → fusion.
    pub fn build_representation(&self, table: &Table) -> Result<TableRepresentation> {
        let selection = self.select(table)?;
        self.fuse(table.id(), &selection)
    }
}

/// Short hash of every setting that influences a representation.
pub fn fingerprint(
    config: &PipelineConfig,
    gateway: &Gateway,
    generator: &QueryGenerator,
) -> String {
    let canonical = serde_json::json!({
        "pipeline": config,
        "encoder": gateway.backend_id(),
        "generator": generator.backend_id(),
    });
    let digest = Sha256::digest(canonical.to_string().as_bytes());
    hex::encode(&digest[..8])
}
