//! Tables, QA instances, and their on-disk forms.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TableError {
    #[error("row {row} has {found} cells, header has {expected}")]
    RaggedInput {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("input has no header row")]
    EmptyInput,
    #[error("input is not valid UTF-8: {0}")]
    Encoding(#[from] std::str::Utf8Error),
    #[error("malformed {format} input: {message}")]
    Malformed { format: &'static str, message: String },
    #[error("duplicate instance id {0:?}")]
    DuplicateId(String),
    #[error("record {index}: {source}")]
    Record {
        index: usize,
        #[source]
        source: Box<TableError>,
    },
    #[error("instance {id:?}: {message}")]
    InvalidInstance { id: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TableError {
    fn at_record(self, index: usize) -> Self {
        TableError::Record {
            index,
            source: Box::new(self),
        }
    }

    pub fn is_io(&self) -> bool {
        match self {
            TableError::Io { .. } => true,
            TableError::Record { source, .. } => source.is_io(),
            _ => false,
        }
    }
}

/// Rectangular grid of text cells with a header row.
///
/// Newlines inside cells are folded to single spaces on construction so one
/// rendered line is always one row.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn fold_newlines(cell: String) -> String {
    if !cell.contains(['\n', '\r']) {
        return cell;
    }
    cell.replace("\r\n", " ").replace(['\n', '\r'], " ")
}

impl Table {
    pub fn new(header: Vec<String>, rows: Vec<Vec<String>>) -> Result<Self, TableError> {
        if header.is_empty() {
            return Err(TableError::EmptyInput);
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != header.len() {
                return Err(TableError::RaggedInput {
                    row: i,
                    expected: header.len(),
                    found: row.len(),
                });
            }
        }
        Ok(Self {
            header: header.into_iter().map(fold_newlines).collect(),
            rows: rows
                .into_iter()
                .map(|r| r.into_iter().map(fold_newlines).collect())
                .collect(),
        })
    }

    /// Builds a table from a full grid whose first row is the header.
    pub fn from_grid(mut grid: Vec<Vec<String>>) -> Result<Self, TableError> {
        if grid.is_empty() {
            return Err(TableError::EmptyInput);
        }
        let header = grid.remove(0);
        Self::new(header, grid)
    }

    pub fn header(&self) -> &[String] {
        &self.header
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    pub fn num_columns(&self) -> usize {
        self.header.len()
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    /// Header followed by the body rows.
    pub fn grid(&self) -> impl Iterator<Item = &[String]> {
        std::iter::once(self.header.as_slice()).chain(self.rows.iter().map(Vec::as_slice))
    }

    pub fn cells(&self) -> impl Iterator<Item = &str> {
        self.grid().flat_map(|r| r.iter().map(String::as_str))
    }

    pub fn into_parts(self) -> (Vec<String>, Vec<Vec<String>>) {
        (self.header, self.rows)
    }

    /// Applies `f` to every cell, header included.
    pub(crate) fn map_cells(&self, mut f: impl FnMut(&str) -> String) -> Table {
        Table {
            header: self.header.iter().map(|c| f(c)).collect(),
            rows: self
                .rows
                .iter()
                .map(|r| r.iter().map(|c| f(c)).collect())
                .collect(),
        }
    }
}

#[derive(Deserialize)]
struct RawTable {
    header: Vec<String>,
    #[serde(default)]
    rows: Vec<Vec<String>>,
}

impl<'de> Deserialize<'de> for Table {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let raw = RawTable::deserialize(de)?;
        Table::new(raw.header, raw.rows).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Json,
}

/// Parses a table from CSV (comma, double-quote quoting) or from a JSON
/// object `{"header": [...], "rows": [[...], ...]}`. All cells stay text.
pub fn parse_table(bytes: &[u8], format: TableFormat) -> Result<Table, TableError> {
    let text = std::str::from_utf8(bytes)?;
    match format {
        TableFormat::Csv => parse_csv_table(text),
        TableFormat::Json => {
            if text.trim().is_empty() {
                return Err(TableError::EmptyInput);
            }
            let raw: RawTable = serde_json::from_str(text).map_err(|e| TableError::Malformed {
                format: "json",
                message: e.to_string(),
            })?;
            Table::new(raw.header, raw.rows)
        }
    }
}

fn parse_csv_table(text: &str) -> Result<Table, TableError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut grid = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| TableError::Malformed {
            format: "csv",
            message: e.to_string(),
        })?;
        grid.push(record.iter().map(str::to_owned).collect::<Vec<_>>());
    }
    let header = match grid.first() {
        Some(h) if !(h.len() == 1 && h[0].is_empty() && grid.len() == 1) => h.len(),
        _ => return Err(TableError::EmptyInput),
    };
    if let Some((i, row)) = grid.iter().enumerate().skip(1).find(|(_, r)| r.len() != header) {
        return Err(TableError::RaggedInput {
            row: i - 1,
            expected: header,
            found: row.len(),
        });
    }
    Table::from_grid(grid)
}

/// Renders the table as RFC-4180 CSV (used for table files and round trips).
pub fn render_csv(table: &Table) -> String {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for row in table.grid() {
        writer.write_record(row).expect("writing to memory");
    }
    String::from_utf8(writer.into_inner().expect("flush to memory")).expect("csv of utf-8 cells")
}

pub const PIPE_SEPARATOR_CELL: &str = "---";

fn write_pipe_row<'a>(out: &mut String, cells: impl Iterator<Item = &'a str>) {
    out.push('|');
    for cell in cells {
        out.push(' ');
        out.push_str(&cell.replace('|', "\\|"));
        out.push_str(" |");
    }
}

/// Pipe-table rendering used in prompts: header line, `| --- |` separator,
/// then one line per body row. No trailing newline.
pub fn render_pipe(table: &Table) -> String {
    let mut out = String::new();
    write_pipe_row(&mut out, table.header.iter().map(String::as_str));
    out.push('\n');
    write_pipe_row(&mut out, table.header.iter().map(|_| PIPE_SEPARATOR_CELL));
    for row in &table.rows {
        out.push('\n');
        write_pipe_row(&mut out, row.iter().map(String::as_str));
    }
    out
}

/// Number of cells in the full grid, header row included.
pub fn cell_count(table: &Table) -> usize {
    (table.rows.len() + 1) * table.header.len()
}

/// One evaluation unit: a table, a question, its gold answers and an
/// optional counterfactual answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "InstanceRecord", into = "InstanceRecord")]
pub struct QaInstance {
    pub id: String,
    pub table: Option<Table>,
    pub question: String,
    pub gold: Vec<String>,
    pub counterfactual: Option<String>,
    pub dataset_tag: String,
}

/// Flat JSON-lines shape of an instance. `header`/`rows` are absent for
/// table-less instances.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct InstanceRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub header: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<Vec<Vec<String>>>,
    pub question: String,
    pub gold: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counterfactual: Option<String>,
    #[serde(default)]
    pub dataset_tag: String,
}

impl TryFrom<InstanceRecord> for QaInstance {
    type Error = TableError;

    fn try_from(r: InstanceRecord) -> Result<Self, TableError> {
        let table = match (r.header, r.rows) {
            (None, None) => None,
            (Some(header), rows) => Some(Table::new(header, rows.unwrap_or_default())?),
            (None, Some(_)) => return Err(TableError::EmptyInput),
        };
        Ok(QaInstance {
            id: r.id,
            table,
            question: r.question,
            gold: r.gold,
            counterfactual: r.counterfactual,
            dataset_tag: r.dataset_tag,
        })
    }
}

impl From<QaInstance> for InstanceRecord {
    fn from(i: QaInstance) -> Self {
        let (header, rows) = match i.table {
            Some(t) => {
                let (h, r) = t.into_parts();
                (Some(h), Some(r))
            }
            None => (None, None),
        };
        InstanceRecord {
            id: i.id,
            header,
            rows,
            question: i.question,
            gold: i.gold,
            counterfactual: i.counterfactual,
            dataset_tag: i.dataset_tag,
        }
    }
}

impl QaInstance {
    pub fn validate(&self) -> Result<(), TableError> {
        let invalid = |message: &str| TableError::InvalidInstance {
            id: self.id.clone(),
            message: message.to_owned(),
        };
        if self.id.is_empty() {
            return Err(invalid("empty id"));
        }
        if self.gold.is_empty() {
            return Err(invalid("gold answer list is empty"));
        }
        if let Some(cf) = &self.counterfactual {
            if self.gold.iter().any(|g| g == cf) {
                return Err(invalid("counterfactual equals a gold answer"));
            }
        }
        Ok(())
    }

    /// True when some table cell is byte-equal to a gold answer.
    pub fn answer_in_table(&self) -> bool {
        self.table
            .as_ref()
            .is_some_and(|t| t.cells().any(|c| self.gold.iter().any(|g| g == c)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstanceFormat {
    /// Columns `id, question, table, gold, counterfactual, dataset_tag`;
    /// `table` is a CSV table path relative to the instance file and `gold`
    /// holds answers separated by `|`.
    Csv,
    JsonLines,
}

impl InstanceFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") | Some("tsv") => InstanceFormat::Csv,
            _ => InstanceFormat::JsonLines,
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, TableError> {
    fs::read(path).map_err(|source| TableError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Loads instances in file order and checks id uniqueness.
pub fn load_instances(path: &Path, format: InstanceFormat) -> Result<Vec<QaInstance>, TableError> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes)?;
    let instances = match format {
        InstanceFormat::JsonLines => parse_instance_lines(text)?,
        InstanceFormat::Csv => parse_instance_csv(text, path.parent().unwrap_or(Path::new(".")))?,
    };
    check_unique_ids(&instances)?;
    Ok(instances)
}

pub fn parse_instance_lines(text: &str) -> Result<Vec<QaInstance>, TableError> {
    let mut out = Vec::new();
    for (index, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let inst: QaInstance = serde_json::from_str(line).map_err(|e| {
            TableError::Malformed {
                format: "json-lines",
                message: e.to_string(),
            }
            .at_record(index)
        })?;
        inst.validate().map_err(|e| e.at_record(index))?;
        out.push(inst);
    }
    Ok(out)
}

fn parse_instance_csv(text: &str, base_dir: &Path) -> Result<Vec<QaInstance>, TableError> {
    #[derive(Deserialize)]
    struct Row {
        id: String,
        question: String,
        table: String,
        gold: String,
        #[serde(default)]
        counterfactual: Option<String>,
        #[serde(default)]
        dataset_tag: String,
    }
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (index, row) in reader.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| {
            TableError::Malformed {
                format: "csv",
                message: e.to_string(),
            }
            .at_record(index)
        })?;
        let table_path = base_dir.join(&row.table);
        let table = read_file(&table_path)
            .and_then(|b| parse_table(&b, TableFormat::Csv))
            .map_err(|e| e.at_record(index))?;
        let inst = QaInstance {
            id: row.id,
            table: Some(table),
            question: row.question,
            gold: row.gold.split('|').map(str::to_owned).collect(),
            counterfactual: row.counterfactual.filter(|c| !c.is_empty()),
            dataset_tag: row.dataset_tag,
        };
        inst.validate().map_err(|e| e.at_record(index))?;
        out.push(inst);
    }
    Ok(out)
}

pub(crate) fn check_unique_ids<'a>(ids: impl IntoIterator<Item = &'a QaInstance>) -> Result<(), TableError> {
    let mut seen = HashSet::new();
    for inst in ids {
        if !seen.insert(inst.id.as_str()) {
            return Err(TableError::DuplicateId(inst.id.clone()));
        }
    }
    Ok(())
}

/// JSON-lines serialization of instances, one object per line.
pub fn instances_to_jsonl(instances: &[QaInstance]) -> String {
    let mut out = String::new();
    for inst in instances {
        let _ = writeln!(
            out,
            "{}",
            serde_json::to_string(inst).expect("instance serializes")
        );
    }
    out
}
