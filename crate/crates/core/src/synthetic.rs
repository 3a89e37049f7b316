//! Seeded generator for a semantic-diversity stress corpus: every table
//! holds lexically distinct row groups, the leading rows cover only a few of
//! them, and each evaluation query targets a group that never appears among
//! the leading rows.

use std::collections::{BTreeSet, HashSet};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::evaluation::Dataset;
use crate::table::{Corpus, EvalQuery, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdversarialSpec {
    pub tables: usize,
    pub groups: usize,
    pub rows_per_group: usize,
    /// Size of the leading block.
    pub head_rows: usize,
    /// Groups allowed to appear in the leading block.
    pub head_groups: usize,
}

impl Default for AdversarialSpec {
    fn default() -> Self {
        Self {
            tables: 50,
            groups: 10,
            rows_per_group: 4,
            head_rows: 10,
            head_groups: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdversarialCorpus {
    pub dataset: Dataset,
    /// Group id of every row, per table, in row order.
    pub row_groups: IndexMap<String, Vec<usize>>,
    /// Group each table's query targets.
    pub targets: IndexMap<String, usize>,
}

impl AdversarialCorpus {
    /// Distinct groups among the given rows of `table_id`.
    pub fn groups_covered(&self, table_id: &str, rows: &[usize]) -> usize {
        let groups = &self.row_groups[table_id];
        rows.iter()
            .map(|&r| groups[r])
            .collect::<BTreeSet<_>>()
            .len()
    }
}

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "kr",
];
const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];

fn pseudo_word(rng: &mut ChaCha8Rng, used: &mut HashSet<String>) -> String {
    loop {
        let syllables = rng.random_range(3..=4);
        let w: String = (0..syllables)
            .map(|_| {
                let o = ONSETS[rng.random_range(0..ONSETS.len())];
                let v = VOWELS[rng.random_range(0..VOWELS.len())];
                format!("{o}{v}")
            })
            .collect();
        if used.insert(w.clone()) {
            return w;
        }
    }
}

/// Builds the corpus and one query per table. Fully determined by `seed`.
pub fn adversarial_corpus(params: AdversarialSpec, seed: u64) -> Result<AdversarialCorpus> {
    assert!(
        params.head_groups < params.groups,
        "some groups must lie outside the head"
    );
    assert!(
        params.head_rows <= params.head_groups * params.rows_per_group,
        "head groups must fill the head block"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = HashSet::new();
    let header: Vec<String> = ["Name", "Category", "Region", "Note"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut corpus = Corpus::new();
    let mut queries = Vec::with_capacity(params.tables);
    let mut row_groups = IndexMap::new();
    let mut targets = IndexMap::new();

    for t in 0..params.tables {
        let id = format!("adv-{t:03}");
        let words: Vec<[String; 3]> = (0..params.groups)
            .map(|_| {
                [
                    pseudo_word(&mut rng, &mut used),
                    pseudo_word(&mut rng, &mut used),
                    pseudo_word(&mut rng, &mut used),
                ]
            })
            .collect();
        let mut slots: Vec<usize> = (0..params.groups)
            .flat_map(|g| std::iter::repeat_n(g, params.rows_per_group))
            .collect();
        // slots is sorted by group, so the head holds only the first groups
        slots[params.head_rows..].shuffle(&mut rng);
        let mut serial = vec![0usize; params.groups];
        let rows: Vec<Vec<String>> = slots
            .iter()
            .map(|&g| {
                serial[g] += 1;
                let [a, b, c] = &words[g];
                vec![
                    format!("{a} {}", serial[g]),
                    b.clone(),
                    c.clone(),
                    format!("{a}-{c}"),
                ]
            })
            .collect();
        corpus.insert(
            Table::new(id.clone(), header.clone(), rows)?.with_title(format!("Registry {t}")),
        )?;

        let target = rng.random_range(params.head_groups..params.groups);
        let [_, b, c] = &words[target];
        queries.push(EvalQuery {
            qid: format!("q-{t:03}"),
            text: format!("Which record lists {b} in {c}?"),
            gold_ids: BTreeSet::from([id.clone()]),
        });
        row_groups.insert(id.clone(), slots);
        targets.insert(id, target);
    }

    Ok(AdversarialCorpus {
        dataset: Dataset {
            name: "adversarial".into(),
            corpus,
            queries,
        },
        row_groups,
        targets,
    })
}
