//! Customer-indexed big tables: ingestion, chronological ordering, and
//! data-characteristics statistics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prep::{FeatureKind, FeatureSchema};

#[derive(Debug, Error)]
pub enum TableError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed table file: {0}")]
    Parse(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("table has no date index column")]
    MissingDateIndex,
    #[error("table is empty")]
    EmptyTable,
    #[error("schema does not cover feature {0}")]
    SchemaMismatch(String),
}

impl From<csv::Error> for TableError {
    fn from(e: csv::Error) -> Self {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => TableError::Io(io),
            other => TableError::Parse(format!("{other:?}")),
        }
    }
}

/// One cell of the big table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CellValue {
    Missing,
    Number(f64),
    Token(String),
    /// Seconds since the Unix epoch.
    Date(i64),
}

impl CellValue {
    /// Parses a raw text cell. Never fails: anything unrecognized is a token,
    /// and empty or missing markers become [`CellValue::Missing`].
    pub fn parse(raw: &str) -> Self {
        let s = raw.trim();
        if s.is_empty() || is_missing_marker(s) {
            return CellValue::Missing;
        }
        if let Ok(v) = s.parse::<f64>() {
            if v.is_finite() {
                return CellValue::Number(v);
            }
        }
        if let Some(d) = parse_date(s) {
            return CellValue::Date(d);
        }
        CellValue::Token(s.to_string())
    }

    pub fn is_missing(&self) -> bool {
        matches!(self, CellValue::Missing)
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            CellValue::Number(v) => Some(*v),
            _ => None,
        }
    }

    /// Text form used when writing tables back to disk.
    pub fn render(&self) -> String {
        match self {
            CellValue::Missing => String::new(),
            CellValue::Number(v) => format!("{v}"),
            CellValue::Token(t) => t.clone(),
            CellValue::Date(d) => format_date(*d),
        }
    }
}

fn is_missing_marker(s: &str) -> bool {
    ["na", "nan", "null"].iter().any(|m| s.eq_ignore_ascii_case(m))
}

/// ISO-8601 date or datetime to epoch seconds.
pub fn parse_date(s: &str) -> Option<i64> {
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Some(d.and_hms_opt(0, 0, 0)?.and_utc().timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S%.f"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    DateTime::parse_from_rfc3339(s).ok().map(|dt| dt.timestamp())
}

pub fn format_date(epoch: i64) -> String {
    let dt = DateTime::from_timestamp(epoch, 0).expect("epoch seconds in chrono range");
    if epoch.rem_euclid(86_400) == 0 {
        dt.format("%Y-%m-%d").to_string()
    } else {
        dt.format("%Y-%m-%dT%H:%M:%S").to_string()
    }
}

/// One row of a customer's history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub date: Option<i64>,
    pub cells: Vec<CellValue>,
}

/// Column roles for delimited-text ingestion. A header row is always required.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TableFormat {
    pub delimiter: char,
    pub id_column: String,
    pub date_column: Option<String>,
    pub label_columns: Vec<String>,
}

impl Default for TableFormat {
    fn default() -> Self {
        Self {
            delimiter: ',',
            id_column: "customer_id".into(),
            date_column: Some("date".into()),
            label_columns: Vec::new(),
        }
    }
}

/// Customer-indexed sequences of heterogeneous records.
#[derive(Debug, Clone, PartialEq)]
pub struct BigTable {
    id_column: String,
    date_column: Option<String>,
    customers: Vec<String>,
    index: HashMap<String, usize>,
    features: Vec<String>,
    records: Vec<Vec<Record>>,
    labels: BTreeMap<String, Vec<Option<u32>>>,
}

impl BigTable {
    pub fn new(
        id_column: impl Into<String>,
        date_column: Option<String>,
        features: Vec<String>,
    ) -> Result<Self, TableError> {
        let mut seen = HashSet::new();
        for f in &features {
            if !seen.insert(f.as_str()) {
                return Err(TableError::Schema(format!("duplicate feature {f}")));
            }
        }
        Ok(Self {
            id_column: id_column.into(),
            date_column,
            customers: Vec::new(),
            index: HashMap::new(),
            features,
            records: Vec::new(),
            labels: BTreeMap::new(),
        })
    }

    /// Declares a label task; every customer starts unlabeled.
    pub fn add_task(&mut self, task: impl Into<String>) {
        let n = self.customers.len();
        self.labels.entry(task.into()).or_insert_with(|| vec![None; n]);
    }

    fn customer_slot(&mut self, customer: &str) -> usize {
        if let Some(&i) = self.index.get(customer) {
            return i;
        }
        let i = self.customers.len();
        self.customers.push(customer.to_string());
        self.index.insert(customer.to_string(), i);
        self.records.push(Vec::new());
        for v in self.labels.values_mut() {
            v.push(None);
        }
        i
    }

    /// Appends a record, creating the customer on first sight.
    pub fn push_record(&mut self, customer: &str, record: Record) -> Result<(), TableError> {
        if record.cells.len() != self.features.len() {
            return Err(TableError::Schema(format!(
                "record has {} cells, table has {} features",
                record.cells.len(),
                self.features.len()
            )));
        }
        if record.date.is_some() && self.date_column.is_none() {
            return Err(TableError::MissingDateIndex);
        }
        let i = self.customer_slot(customer);
        self.records[i].push(record);
        Ok(())
    }

    pub fn set_label(&mut self, task: &str, customer: &str, label: Option<u32>) -> Result<(), TableError> {
        let i = *self
            .index
            .get(customer)
            .ok_or_else(|| TableError::Schema(format!("unknown customer {customer}")))?;
        let col = self
            .labels
            .get_mut(task)
            .ok_or_else(|| TableError::Schema(format!("unknown task {task}")))?;
        col[i] = label;
        Ok(())
    }

    pub fn id_column(&self) -> &str {
        &self.id_column
    }

    pub fn date_column(&self) -> Option<&str> {
        self.date_column.as_deref()
    }

    pub fn customers(&self) -> &[String] {
        &self.customers
    }

    pub fn customer_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn features(&self) -> &[String] {
        &self.features
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f == name)
    }

    pub fn num_customers(&self) -> usize {
        self.customers.len()
    }

    pub fn num_features(&self) -> usize {
        self.features.len()
    }

    /// Rows of the `i`-th customer, in current order.
    pub fn records(&self, customer: usize) -> &[Record] {
        &self.records[customer]
    }

    pub fn total_records(&self) -> usize {
        self.records.iter().map(Vec::len).sum()
    }

    pub fn tasks(&self) -> impl Iterator<Item = &str> {
        self.labels.keys().map(String::as_str)
    }

    pub fn labels(&self, task: &str) -> Option<&[Option<u32>]> {
        self.labels.get(task).map(Vec::as_slice)
    }

    /// Cells of one feature for one customer, in record order.
    pub fn column(&self, customer: usize, feature: usize) -> impl Iterator<Item = &CellValue> {
        self.records[customer].iter().map(move |r| &r.cells[feature])
    }

    /// Keeps only the listed customers (by index), preserving their order.
    pub fn subset(&self, customers: &[usize]) -> BigTable {
        let mut out = BigTable {
            id_column: self.id_column.clone(),
            date_column: self.date_column.clone(),
            customers: Vec::with_capacity(customers.len()),
            index: HashMap::new(),
            features: self.features.clone(),
            records: Vec::with_capacity(customers.len()),
            labels: self.labels.keys().map(|k| (k.clone(), Vec::new())).collect(),
        };
        for &c in customers {
            out.index.insert(self.customers[c].clone(), out.customers.len());
            out.customers.push(self.customers[c].clone());
            out.records.push(self.records[c].clone());
            for (task, col) in &self.labels {
                out.labels.get_mut(task).expect("same tasks").push(col[c]);
            }
        }
        out
    }
}

/// Reads a delimited text file into a [`BigTable`].
pub fn load_table(path: impl AsRef<Path>, format: &TableFormat) -> Result<BigTable, TableError> {
    let file = std::fs::File::open(path)?;
    read_table(file, format)
}

pub fn read_table<R: Read>(reader: R, format: &TableFormat) -> Result<BigTable, TableError> {
    let delimiter = u8::try_from(format.delimiter)
        .map_err(|_| TableError::Schema("delimiter must be a single-byte character".into()))?;
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut seen = HashSet::new();
    for h in &headers {
        if !seen.insert(h.as_str()) {
            return Err(TableError::Schema(format!("duplicate header {h}")));
        }
    }
    let find = |name: &str| headers.iter().position(|h| h == name);
    let id_col =
        find(&format.id_column).ok_or_else(|| TableError::Schema(format!("missing id column {}", format.id_column)))?;
    let date_col = match &format.date_column {
        Some(d) => Some(find(d).ok_or_else(|| TableError::Schema(format!("missing date column {d}")))?),
        None => None,
    };
    let mut label_cols = Vec::new();
    for l in &format.label_columns {
        let c = find(l).ok_or_else(|| TableError::Schema(format!("missing label column {l}")))?;
        label_cols.push((l.clone(), c));
    }
    let reserved: HashSet<usize> = std::iter::once(id_col)
        .chain(date_col)
        .chain(label_cols.iter().map(|(_, c)| *c))
        .collect();
    let feature_cols: Vec<usize> = (0..headers.len()).filter(|c| !reserved.contains(c)).collect();
    let mut table = BigTable::new(
        headers[id_col].clone(),
        date_col.map(|c| headers[c].clone()),
        feature_cols.iter().map(|&c| headers[c].clone()).collect(),
    )?;
    for (name, _) in &label_cols {
        table.add_task(name.clone());
    }
    for row in rdr.records() {
        let row = row?;
        let id = row[id_col].trim();
        if id.is_empty() {
            return Err(TableError::Parse(format!(
                "empty customer id at line {}",
                row.position().map(|p| p.line()).unwrap_or(0)
            )));
        }
        let date = date_col.and_then(|c| parse_date(row[c].trim()));
        let cells = feature_cols.iter().map(|&c| CellValue::parse(&row[c])).collect();
        table.push_record(id, Record { date, cells })?;
        let ci = table.customer_index(id).expect("just inserted");
        for (name, c) in &label_cols {
            let slot = &mut table.labels.get_mut(name).expect("declared")[ci];
            if slot.is_none() {
                *slot = row[*c].trim().parse::<u32>().ok();
            }
        }
    }
    Ok(table)
}

/// Writes a table in the format [`load_table`] reads: one row per record,
/// labels repeated on every row of their customer.
pub fn save_table(table: &BigTable, path: impl AsRef<Path>) -> Result<(), TableError> {
    let file = std::fs::File::create(path)?;
    write_table(table, std::io::BufWriter::new(file), ',')
}

pub fn write_table<W: Write>(table: &BigTable, writer: W, delimiter: char) -> Result<(), TableError> {
    let delimiter =
        u8::try_from(delimiter).map_err(|_| TableError::Schema("delimiter must be a single-byte character".into()))?;
    let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(writer);
    let mut header = vec![table.id_column.clone()];
    header.extend(table.date_column.clone());
    header.extend(table.features.iter().cloned());
    header.extend(table.labels.keys().cloned());
    w.write_record(&header)?;
    for (ci, id) in table.customers.iter().enumerate() {
        for rec in &table.records[ci] {
            let mut row = vec![id.clone()];
            if table.date_column.is_some() {
                row.push(rec.date.map(format_date).unwrap_or_default());
            }
            row.extend(rec.cells.iter().map(CellValue::render));
            for col in table.labels.values() {
                row.push(col[ci].map(|l| l.to_string()).unwrap_or_default());
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Sorts each customer's rows by date, stably. Rows without a date sort first.
pub fn order_records(table: &BigTable) -> Result<BigTable, TableError> {
    if table.date_column.is_none() {
        return Err(TableError::MissingDateIndex);
    }
    let mut out = table.clone();
    for recs in &mut out.records {
        recs.sort_by_key(|r| r.date);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KindRatios {
    #[serde(rename = "SN")]
    pub sn: f64,
    #[serde(rename = "DN")]
    pub dn: f64,
    #[serde(rename = "SC")]
    pub sc: f64,
    #[serde(rename = "DC")]
    pub dc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecordCounts {
    pub min: usize,
    pub mean: f64,
    pub max: usize,
}

/// Data-characteristics summary of a table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableStats {
    /// Fraction of labeled customers whose class is non-zero, per task.
    pub label_ratio: BTreeMap<String, f64>,
    pub feature_missing_ratio: f64,
    pub structural_missing_ratio: f64,
    pub kind_ratios: KindRatios,
    pub records_per_customer: RecordCounts,
}

/// Missing ratios are computed per feature as a mean over customers of the
/// customer-level fraction, then averaged uniformly over features.
pub fn compute_stats(table: &BigTable, schema: &FeatureSchema) -> Result<TableStats, TableError> {
    if table.num_customers() == 0 || table.num_features() == 0 {
        return Err(TableError::EmptyTable);
    }
    let kinds = table
        .features()
        .iter()
        .map(|f| {
            schema
                .feature(f)
                .map(|s| s.kind)
                .ok_or_else(|| TableError::SchemaMismatch(f.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let n_cust = table.num_customers() as f64;
    let n_feat = table.num_features() as f64;
    let mut missing_sum = 0.0;
    let mut structural_sum = 0.0;
    for f in 0..table.num_features() {
        let mut feat_missing = 0.0;
        let mut feat_structural = 0.0;
        for c in 0..table.num_customers() {
            let recs = table.records(c);
            if recs.is_empty() {
                continue;
            }
            let missing = table.column(c, f).filter(|v| v.is_missing()).count();
            feat_missing += missing as f64 / recs.len() as f64;
            if missing == recs.len() {
                feat_structural += 1.0;
            }
        }
        missing_sum += feat_missing / n_cust;
        structural_sum += feat_structural / n_cust;
    }

    let mut counts = [0usize; 4];
    for k in &kinds {
        match k {
            FeatureKind::StaticNumerical => counts[0] += 1,
            FeatureKind::DynamicNumerical => counts[1] += 1,
            FeatureKind::StaticCategorical => counts[2] += 1,
            FeatureKind::DynamicCategorical => counts[3] += 1,
            FeatureKind::DateIndex => {}
        }
    }
    let total: usize = counts.iter().sum();
    let frac = |i: usize| {
        if total == 0 {
            0.0
        } else {
            counts[i] as f64 / total as f64
        }
    };
    let kind_ratios = if total == 0 {
        // Only date-valued features: report them as static numerical so ratios still sum to one.
        KindRatios {
            sn: 1.0,
            dn: 0.0,
            sc: 0.0,
            dc: 0.0,
        }
    } else {
        KindRatios {
            sn: frac(0),
            dn: frac(1),
            sc: frac(2),
            dc: frac(3),
        }
    };

    let mut label_ratio = BTreeMap::new();
    for (task, col) in &table.labels {
        let labeled: Vec<u32> = col.iter().flatten().copied().collect();
        let ratio = if labeled.is_empty() {
            0.0
        } else {
            labeled.iter().filter(|&&l| l != 0).count() as f64 / labeled.len() as f64
        };
        label_ratio.insert(task.clone(), ratio);
    }

    let lens: Vec<usize> = table.records.iter().map(Vec::len).collect();
    let records_per_customer = RecordCounts {
        min: *lens.iter().min().expect("non-empty"),
        mean: lens.iter().sum::<usize>() as f64 / n_cust,
        max: *lens.iter().max().expect("non-empty"),
    };

    Ok(TableStats {
        label_ratio,
        feature_missing_ratio: missing_sum / n_feat,
        structural_missing_ratio: structural_sum / n_feat,
        kind_ratios,
        records_per_customer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prep::{FeatureSpec, RecognizerConfig};

    fn fmt() -> TableFormat {
        TableFormat {
            label_columns: vec!["churn".into()],
            ..TableFormat::default()
        }
    }

    const FIXTURE: &str = "\
customer_id,date,balance,segment,churn
c1,2021-03-01,3.5,gold,0
c1,2021-01-01,,silver,0
c2,2021-02-01,NA,gold,1
c3,2021-01-15,7,null,
c3,2021-01-10,1.25,bronze,0
";

    fn fixture() -> BigTable {
        read_table(FIXTURE.as_bytes(), &fmt()).unwrap()
    }

    fn schema_for(table: &BigTable, kinds: &[FeatureKind]) -> FeatureSchema {
        FeatureSchema::from_specs(
            table
                .features()
                .iter()
                .zip(kinds)
                .map(|(f, k)| FeatureSpec::new(f.clone(), *k))
                .collect(),
            table.date_column().map(String::from),
            RecognizerConfig::default(),
        )
    }

    #[test]
    fn parses_cells() {
        assert_eq!(CellValue::parse(""), CellValue::Missing);
        assert_eq!(CellValue::parse(" NaN "), CellValue::Missing);
        assert_eq!(CellValue::parse("Null"), CellValue::Missing);
        assert_eq!(CellValue::parse("3.5"), CellValue::Number(3.5));
        assert_eq!(CellValue::parse("gold"), CellValue::Token("gold".into()));
        assert_eq!(CellValue::parse("1970-01-02"), CellValue::Date(86_400));
        assert_eq!(CellValue::parse("1970-01-01T00:01:00"), CellValue::Date(60));
        assert_eq!(CellValue::parse("inf"), CellValue::Token("inf".into()));
    }

    #[test]
    fn loads_fixture_shape() {
        let t = fixture();
        assert_eq!(t.num_customers(), 3);
        assert_eq!(t.num_features(), 2);
        assert_eq!(t.total_records(), 5);
        assert_eq!(t.records(0)[0].cells[0], CellValue::Number(3.5));
        assert_eq!(t.records(0)[1].cells[0], CellValue::Missing);
        assert_eq!(t.labels("churn").unwrap(), &[Some(0), Some(1), Some(0)]);
    }

    #[test]
    fn rejects_duplicate_header_and_missing_id() {
        let dup = "customer_id,date,a,a\nc1,2020-01-01,1,2\n";
        assert!(matches!(
            read_table(dup.as_bytes(), &TableFormat::default()),
            Err(TableError::Schema(_))
        ));
        let noid = "who,date,a\nc1,2020-01-01,1\n";
        assert!(matches!(
            read_table(noid.as_bytes(), &TableFormat::default()),
            Err(TableError::Schema(_))
        ));
    }

    #[test]
    fn ragged_rows_are_parse_errors() {
        let bad = "customer_id,date,a\nc1,2020-01-01,1,5\n";
        assert!(matches!(
            read_table(bad.as_bytes(), &TableFormat::default()),
            Err(TableError::Parse(_))
        ));
    }

    #[test]
    fn unreadable_file_is_io_error() {
        let err = load_table("/nonexistent/table.csv", &TableFormat::default()).unwrap_err();
        assert!(matches!(err, TableError::Io(_)));
    }

    #[test]
    fn orders_chronologically() {
        let t = order_records(&fixture()).unwrap();
        let dates: Vec<_> = t.records(0).iter().map(|r| r.date.unwrap()).collect();
        assert!(dates.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(t.records(0)[0].cells[1], CellValue::Token("silver".into()));
        assert_eq!(order_records(&t).unwrap(), t);
    }

    #[test]
    fn ordering_is_stable_on_ties() {
        let src = "customer_id,date,x\nc,2020-01-02,z\nc,2020-01-01,a\nc,2020-01-01,b\n";
        let t = order_records(&read_table(src.as_bytes(), &TableFormat::default()).unwrap()).unwrap();
        // Oracle: stable insertion sort over (date, file position).
        let mut expected: Vec<(i64, usize)> = t
            .records(0)
            .iter()
            .enumerate()
            .map(|(i, r)| (r.date.unwrap(), i))
            .collect();
        expected.sort();
        let tokens: Vec<_> = t.records(0).iter().map(|r| r.cells[0].render()).collect();
        assert_eq!(tokens, ["a", "b", "z"]);
        assert!(expected.iter().enumerate().all(|(i, &(_, pos))| pos == i));
    }

    #[test]
    fn ordering_requires_date_index() {
        let fmt = TableFormat {
            date_column: None,
            ..TableFormat::default()
        };
        let t = read_table("customer_id,x\nc,1\n".as_bytes(), &fmt).unwrap();
        assert!(matches!(order_records(&t), Err(TableError::MissingDateIndex)));
    }

    #[test]
    fn round_trip_through_csv() {
        let t = fixture();
        let mut buf = Vec::new();
        write_table(&t, &mut buf, ',').unwrap();
        let back = read_table(buf.as_slice(), &fmt()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn stats_without_missing() {
        let src = "customer_id,date,x\nc1,2020-01-01,1\nc2,2020-01-01,2\n";
        let t = read_table(src.as_bytes(), &TableFormat::default()).unwrap();
        let s = compute_stats(&t, &schema_for(&t, &[FeatureKind::StaticNumerical])).unwrap();
        assert_eq!(s.feature_missing_ratio, 0.0);
        assert_eq!(s.structural_missing_ratio, 0.0);
    }

    #[test]
    fn stats_full_structural_missing() {
        let src = "customer_id,date,x\nc1,2020-01-01,\nc1,2020-01-02,\nc1,2020-01-03,\n";
        let t = read_table(src.as_bytes(), &TableFormat::default()).unwrap();
        let s = compute_stats(&t, &schema_for(&t, &[FeatureKind::StaticNumerical])).unwrap();
        assert_eq!(s.structural_missing_ratio, 1.0);
    }

    #[test]
    fn stats_hand_counted() {
        let src = "customer_id,date,x\nA,2020-01-01,\nA,2020-01-02,\nB,2020-01-01,1\nB,2020-01-02,2\n";
        let t = read_table(src.as_bytes(), &TableFormat::default()).unwrap();
        let s = compute_stats(&t, &schema_for(&t, &[FeatureKind::DynamicNumerical])).unwrap();
        assert_eq!(s.structural_missing_ratio, 0.5);
        assert_eq!(s.feature_missing_ratio, 0.5);
        assert_eq!(s.kind_ratios.dn, 1.0);
    }

    #[test]
    fn stats_reject_empty_and_uncovered() {
        let empty = BigTable::new("id", None, vec!["x".into()]).unwrap();
        let schema = schema_for(&empty, &[FeatureKind::StaticNumerical]);
        assert!(matches!(compute_stats(&empty, &schema), Err(TableError::EmptyTable)));
        let t = fixture();
        let partial = schema_for(&t, &[FeatureKind::StaticNumerical]);
        assert!(matches!(
            compute_stats(&t, &partial),
            Err(TableError::SchemaMismatch(_))
        ));
    }

    #[test]
    fn stats_json_field_names() {
        let t = fixture();
        let schema = schema_for(&t, &[FeatureKind::DynamicNumerical, FeatureKind::StaticCategorical]);
        let s = compute_stats(&t, &schema).unwrap();
        let v = serde_json::to_value(&s).unwrap();
        for key in [
            "label_ratio",
            "feature_missing_ratio",
            "structural_missing_ratio",
            "kind_ratios",
            "records_per_customer",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        let k = &v["kind_ratios"];
        let total: f64 = ["SN", "DN", "SC", "DC"].iter().map(|x| k[x].as_f64().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert_eq!(s.records_per_customer.max, 2);
    }

    #[test]
    fn stats_invariant_to_customer_order() {
        let t = fixture();
        let schema = schema_for(&t, &[FeatureKind::DynamicNumerical, FeatureKind::StaticCategorical]);
        let a = compute_stats(&t, &schema).unwrap();
        let b = compute_stats(&t.subset(&[2, 0, 1]), &schema).unwrap();
        assert!((a.feature_missing_ratio - b.feature_missing_ratio).abs() < 1e-12);
        assert!((a.structural_missing_ratio - b.structural_missing_ratio).abs() < 1e-12);
        assert_eq!(a.label_ratio, b.label_ratio);
    }
}
