//! Tables, corpora and evaluation queries, plus the JSONL formats they are
//! stored in and the text linearization used before encoding.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LANG: &str = "en";

/// One table instance: its cells plus its zero-based position in the
/// table it was read from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Row {
    pub index: usize,
    pub cells: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    id: String,
    title: Option<String>,
    lang: String,
    header: Vec<String>,
    rows: Vec<Row>,
}

impl Table {
    /// Builds a table, numbering rows by position. Ragged rows are rejected.
    pub fn new(id: impl Into<String>, header: Vec<String>, rows: Vec<Vec<String>>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::Schema {
                table_id: id,
                reason: "empty table id".into(),
            });
        }
        if header.is_empty() {
            return Err(Error::Schema {
                table_id: id,
                reason: "empty header".into(),
            });
        }
        let mut out = Vec::with_capacity(rows.len());
        for (index, cells) in rows.into_iter().enumerate() {
            if cells.len() != header.len() {
                return Err(Error::Schema {
                    table_id: id,
                    reason: format!(
                        "row {index} has {} cells but the header has {} columns",
                        cells.len(),
                        header.len()
                    ),
                });
            }
            out.push(Row { index, cells });
        }
        Ok(Self {
            id,
            title: None,
            lang: DEFAULT_LANG.to_string(),
            header,
            rows: out,
        })
    }

    pub fn with_title(mut self, title: impl Into<String>) -> Self {
        self.title = Some(title.into());
        self
    }

    pub fn with_lang(mut self, lang: impl Into<String>) -> Self {
        self.lang = lang.into();
        self
    }

    /// Sub-table sharing this table's header, keeping the rows' original indices.
    pub(crate) fn subtable(&self, id: String, rows: Vec<Row>) -> Table {
        Table {
            id,
            title: self.title.clone(),
            lang: self.lang.clone(),
            header: self.header.clone(),
            rows,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn title(&self) -> Option<&str> {
        self.title.as_deref()
    }

    pub fn lang(&self) -> &str {
        &self.lang
    }

    pub fn header(&self) -> &[String] {
        &self.header
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    fn to_record(&self) -> TableRecord {
        TableRecord {
            id: self.id.clone(),
            title: self.title.clone(),
            lang: Some(self.lang.clone()),
            header: self.header.clone(),
            rows: self.rows.iter().map(|r| r.cells.clone()).collect(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TableRecord {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    title: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lang: Option<String>,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl TryFrom<TableRecord> for Table {
    type Error = Error;

    fn try_from(rec: TableRecord) -> Result<Table> {
        let mut table = Table::new(rec.id, rec.header, rec.rows)?;
        table.title = rec.title;
        if let Some(lang) = rec.lang {
            table.lang = lang;
        }
        Ok(table)
    }
}

/// Id-keyed collection of tables, iterated in insertion order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    tables: IndexMap<String, Table>,
}

impl Corpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, table: Table) -> Result<()> {
        if self.tables.contains_key(table.id()) {
            return Err(Error::Schema {
                table_id: table.id().to_string(),
                reason: "duplicate table id".into(),
            });
        }
        self.tables.insert(table.id().to_string(), table);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Table> {
        self.tables.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.tables.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.tables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }

    pub fn tables(&self) -> impl ExactSizeIterator<Item = &Table> {
        self.tables.values()
    }

    pub fn into_tables(self) -> impl ExactSizeIterator<Item = Table> {
        self.tables.into_values()
    }

    pub fn total_rows(&self) -> usize {
        self.tables.values().map(Table::num_rows).sum()
    }
}

impl FromIterator<Table> for Result<Corpus> {
    fn from_iter<I: IntoIterator<Item = Table>>(iter: I) -> Self {
        let mut corpus = Corpus::new();
        for t in iter {
            corpus.insert(t)?;
        }
        Ok(corpus)
    }
}

/// Evaluation query with its set of relevant table ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalQuery {
    pub qid: String,
    #[serde(rename = "query")]
    pub text: String,
    #[serde(rename = "gold_table_ids")]
    pub gold_ids: BTreeSet<String>,
}

pub fn read_corpus<R: BufRead>(reader: R) -> Result<Corpus> {
    let mut corpus = Corpus::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TableRecord = serde_json::from_str(&line).map_err(|e| {
            if e.is_data() {
                Error::Schema {
                    table_id: partial_id(&line),
                    reason: format!("line {lineno}: {e}"),
                }
            } else {
                Error::Parse {
                    line: lineno,
                    reason: e.to_string(),
                }
            }
        })?;
        corpus.insert(Table::try_from(rec)?)?;
    }
    Ok(corpus)
}

// Best-effort id for schema errors on records that fail typed decoding.
fn partial_id(line: &str) -> String {
    serde_json::from_str::<serde_json::Value>(line)
        .ok()
        .and_then(|v| v.get("id").and_then(|id| id.as_str()).map(str::to_string))
        .unwrap_or_default()
}

pub fn parse_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_corpus(BufReader::new(file))
}

pub fn write_corpus_to<W: Write>(corpus: &Corpus, mut writer: W) -> Result<()> {
    for table in corpus.tables() {
        let line = serde_json::to_string(&table.to_record()).expect("table record serializes");
        writeln!(writer, "{line}").map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}

pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_corpus_to(corpus, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_queries<R: BufRead>(reader: R) -> Result<Vec<EvalQuery>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let q: EvalQuery = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            reason: e.to_string(),
        })?;
        if q.gold_ids.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                reason: format!("query `{}` has no gold table ids", q.qid),
            });
        }
        if q.text.trim().is_empty() {
            return Err(Error::Parse {
                line: lineno,
                reason: format!("query `{}` has empty text", q.qid),
            });
        }
        out.push(q);
    }
    Ok(out)
}

pub fn parse_queries(path: impl AsRef<Path>) -> Result<Vec<EvalQuery>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_queries(BufReader::new(file))
}

pub fn write_queries(queries: &[EvalQuery], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for q in queries {
        let line = serde_json::to_string(q).expect("query serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '|' => out.push_str("\\|"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some(other) => out.push(other),
            None => out.push('\\'),
        }
    }
    out
}

/// Splits a linearized line on unescaped `" | "` separators, leaving escapes intact.
fn split_fields(line: &str) -> Vec<&str> {
    let bytes = line.as_bytes();
    let mut fields = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'\\' => i += 2,
            b'|' => {
                let end = if i > start && bytes[i - 1] == b' ' {
                    i - 1
                } else {
                    i
                };
                fields.push(&line[start..end]);
                start = if bytes.get(i + 1) == Some(&b' ') {
                    i + 2
                } else {
                    i + 1
                };
                i = start;
            }
            _ => i += 1,
        }
    }
    fields.push(&line[start.min(line.len())..]);
    fields
}

/// `"col1: v1 | col2: v2 | …"`, with `\`, `|` and line breaks escaped.
pub fn serialize_row(header: &[String], cells: &[String]) -> Result<String> {
    if header.len() != cells.len() {
        return Err(Error::Arity {
            expected: header.len(),
            got: cells.len(),
        });
    }
    let parts: Vec<String> = header
        .iter()
        .zip(cells)
        .map(|(h, v)| format!("{}: {}", escape(h), escape(v)))
        .collect();
    Ok(parts.join(" | "))
}

/// Inverse of [`serialize_row`] for a known header.
pub fn parse_row(header: &[String], line: &str) -> Result<Vec<String>> {
    let fields = split_fields(line);
    if fields.len() != header.len() {
        return Err(Error::Arity {
            expected: header.len(),
            got: fields.len(),
        });
    }
    header
        .iter()
        .zip(fields)
        .map(|(h, field)| {
            let prefix = format!("{}: ", escape(h));
            field
                .strip_prefix(prefix.as_str())
                .map(unescape)
                .ok_or_else(|| Error::Parse {
                    line: 0,
                    reason: format!("field `{field}` does not start with column `{h}`"),
                })
        })
        .collect()
}

pub fn serialize_header(header: &[String]) -> String {
    header
        .iter()
        .map(|h| escape(h))
        .collect::<Vec<_>>()
        .join(" | ")
}

/// Header line followed by one row line per row, rows in ascending
/// original index regardless of input order.
pub fn serialize_partial_table(header: &[String], rows: &[&Row]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Empty("partial table has no rows"));
    }
    let mut sorted: Vec<&Row> = rows.to_vec();
    sorted.sort_by_key(|r| r.index);
    let mut lines = Vec::with_capacity(sorted.len() + 1);
    lines.push(serialize_header(header));
    for row in sorted {
        lines.push(serialize_row(header, &row.cells)?);
    }
    Ok(lines.join("\n"))
}

/// Inverse of [`serialize_partial_table`]: header and row cells. Original
/// row indices are not part of the text and are not recovered.
pub fn parse_partial_table(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .map(|l| split_fields(l).into_iter().map(unescape).collect())
        .ok_or(Error::Empty("partial table text is empty"))?;
    let rows = lines
        .enumerate()
        .map(|(i, l)| {
            parse_row(&header, l).map_err(|e| Error::Parse {
                line: i + 2,
                reason: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn row_linearization() {
        assert_eq!(
            serialize_row(&s(&["Name", "Age"]), &s(&["Ann", "3"])).unwrap(),
            "Name: Ann | Age: 3"
        );
        assert_eq!(serialize_row(&s(&["X"]), &s(&["7"])).unwrap(), "X: 7");
        assert!(matches!(
            serialize_row(&s(&["X"]), &s(&["7", "8"])),
            Err(Error::Arity {
                expected: 1,
                got: 2
            })
        ));
    }

    #[test]
    fn pipes_are_escaped_and_round_trip() {
        let header = s(&["a|b", "c"]);
        let cells = s(&["x | y", "back\\slash\nnl"]);
        let line = serialize_row(&header, &cells).unwrap();
        assert_eq!(line, "a\\|b: x \\| y | c: back\\\\slash\\nnl");
        assert_eq!(parse_row(&header, &line).unwrap(), cells);
    }

    #[test]
    fn partial_table_orders_rows_by_index() {
        let header = s(&["K"]);
        let rows = [
            Row {
                index: 7,
                cells: s(&["seven"]),
            },
            Row {
                index: 2,
                cells: s(&["two"]),
            },
            Row {
                index: 5,
                cells: s(&["five"]),
            },
        ];
        let a = serialize_partial_table(&header, &[&rows[0], &rows[1], &rows[2]]).unwrap();
        let b = serialize_partial_table(&header, &[&rows[2], &rows[0], &rows[1]]).unwrap();
        assert_eq!(a, "K\nK: two\nK: five\nK: seven");
        assert_eq!(a, b);

        let one = serialize_partial_table(&header, &[&rows[0]]).unwrap();
        assert_eq!(one.lines().count(), 2);
        assert!(matches!(
            serialize_partial_table(&header, &[]),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn corpus_parsing() {
        let data = r#"{"id":"t1","header":["A","B"],"rows":[["1","2"]]}
{"id":"t2","title":"T","lang":"zh","header":["A"],"rows":[["x"],["y"]]}
"#;
        let c = read_corpus(data.as_bytes()).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.get("t2").unwrap().lang(), "zh");
        assert_eq!(c.get("t1").unwrap().lang(), "en");
        assert_eq!(c.total_rows(), 3);

        assert!(read_corpus("".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn ragged_row_names_table() {
        let data = r#"{"id":"bad","header":["A","B"],"rows":[["1","2","3"]]}"#;
        match read_corpus(data.as_bytes()) {
            Err(Error::Schema { table_id, .. }) => assert_eq!(table_id, "bad"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_and_duplicate_records() {
        let data = "{\"id\":\"a\",\"header\":[\"A\"],\"rows\":[]}\n{not json";
        assert!(matches!(
            read_corpus(data.as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));

        let missing = r#"{"id":"m","rows":[]}"#;
        match read_corpus(missing.as_bytes()) {
            Err(Error::Schema { table_id, .. }) => assert_eq!(table_id, "m"),
            other => panic!("unexpected {other:?}"),
        }

        let dup = "{\"id\":\"a\",\"header\":[\"A\"],\"rows\":[]}\n{\"id\":\"a\",\"header\":[\"A\"],\"rows\":[]}";
        assert!(matches!(
            read_corpus(dup.as_bytes()),
            Err(Error::Schema { .. })
        ));
    }

    #[test]
    fn queries_require_gold() {
        let ok = r#"{"qid":"q1","query":"x","gold_table_ids":["t1"]}"#;
        let qs = read_queries(ok.as_bytes()).unwrap();
        assert_eq!(qs[0].gold_ids.len(), 1);
        let empty = r#"{"qid":"q1","query":"x","gold_table_ids":[]}"#;
        assert!(read_queries(empty.as_bytes()).is_err());
    }
}
