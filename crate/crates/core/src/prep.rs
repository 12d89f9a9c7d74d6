//! Feature-kind recognition (numerical/categorical, static/dynamic) and
//! data-quality augmentation: tokenization, min-max normalization, imputation.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::table::{format_date, order_records, BigTable, CellValue, TableError};

/// Reserved vocabulary id for a missing cell.
pub const MISSING_TOKEN: usize = 0;
/// Reserved vocabulary id for a token never seen while fitting.
pub const OOV_TOKEN: usize = 1;

#[derive(Debug, Error)]
pub enum PrepError {
    #[error("feature {0} mixes tokens and numbers; assign its kind explicitly")]
    MixedKindFeature(String),
    #[error("invalid recognizer config: {0}")]
    InvalidConfig(String),
    #[error("table is empty")]
    EmptyTable,
    #[error("unknown feature {0}")]
    UnknownFeature(String),
    #[error(transparent)]
    Table(#[from] TableError),
}

/// Thresholds for the two recognizers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecognizerConfig {
    /// Integer-valued features with more distinct values than this are numerical.
    pub integer_unique_threshold: usize,
    /// Per-customer change threshold for categorical features.
    pub categorical_pair_threshold: f64,
    /// Per-customer change threshold for numerical features (on normalized values).
    pub numerical_pair_threshold: f64,
    /// Customers-with-change count above which a feature is dynamic.
    /// `None` means `ceil(0.05 * customers)`, at least 1.
    pub feature_threshold: Option<usize>,
    /// When false, no date index is needed and every feature is static.
    pub dynamic_analysis: bool,
}

impl Default for RecognizerConfig {
    fn default() -> Self {
        Self {
            integer_unique_threshold: 20,
            categorical_pair_threshold: 0.0,
            numerical_pair_threshold: 0.05,
            feature_threshold: None,
            dynamic_analysis: true,
        }
    }
}

impl RecognizerConfig {
    pub fn validate(&self) -> Result<(), PrepError> {
        if self.integer_unique_threshold < 2 {
            return Err(PrepError::InvalidConfig("integer_unique_threshold must be >= 2".into()));
        }
        if self.feature_threshold == Some(0) {
            return Err(PrepError::InvalidConfig("feature_threshold must be >= 1".into()));
        }
        if !(self.categorical_pair_threshold >= 0.0 && self.numerical_pair_threshold >= 0.0) {
            return Err(PrepError::InvalidConfig("pair thresholds must be non-negative".into()));
        }
        Ok(())
    }

    pub fn feature_threshold_for(&self, customers: usize) -> usize {
        self.feature_threshold
            .unwrap_or_else(|| ((0.05 * customers as f64).ceil() as usize).max(1))
    }

    pub fn pair_threshold(&self, kind: ValueKind) -> f64 {
        match kind {
            ValueKind::Numerical => self.numerical_pair_threshold,
            ValueKind::Categorical => self.categorical_pair_threshold,
        }
    }
}

/// Output of the numerical/categorical recognizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NcKind {
    Numerical,
    Categorical,
    Date,
}

/// How values of a feature are compared and embedded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueKind {
    Numerical,
    Categorical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dynamism {
    Static,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeatureKind {
    StaticNumerical,
    DynamicNumerical,
    StaticCategorical,
    DynamicCategorical,
    DateIndex,
}

impl FeatureKind {
    pub fn from_parts(value: ValueKind, dynamism: Dynamism) -> Self {
        match (value, dynamism) {
            (ValueKind::Numerical, Dynamism::Static) => FeatureKind::StaticNumerical,
            (ValueKind::Numerical, Dynamism::Dynamic) => FeatureKind::DynamicNumerical,
            (ValueKind::Categorical, Dynamism::Static) => FeatureKind::StaticCategorical,
            (ValueKind::Categorical, Dynamism::Dynamic) => FeatureKind::DynamicCategorical,
        }
    }

    pub fn value_kind(self) -> Option<ValueKind> {
        match self {
            FeatureKind::StaticNumerical | FeatureKind::DynamicNumerical => Some(ValueKind::Numerical),
            FeatureKind::StaticCategorical | FeatureKind::DynamicCategorical => Some(ValueKind::Categorical),
            FeatureKind::DateIndex => None,
        }
    }

    pub fn is_dynamic(self) -> bool {
        matches!(self, FeatureKind::DynamicNumerical | FeatureKind::DynamicCategorical)
    }

    /// Two-letter code: SN, DN, SC, DC (or DATE).
    pub fn code(self) -> &'static str {
        match self {
            FeatureKind::StaticNumerical => "SN",
            FeatureKind::DynamicNumerical => "DN",
            FeatureKind::StaticCategorical => "SC",
            FeatureKind::DynamicCategorical => "DC",
            FeatureKind::DateIndex => "DATE",
        }
    }
}

/// Token vocabulary of one categorical feature. Ids 0 and 1 are reserved for
/// the missing and out-of-vocabulary tokens; observed tokens follow in
/// first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    tokens: Vec<String>,
}

impl From<VocabularyRepr> for Vocabulary {
    fn from(r: VocabularyRepr) -> Self {
        let mut v = Vocabulary::default();
        for t in r.tokens {
            v.insert(t);
        }
        v
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr { tokens: v.tokens }
    }
}

impl Vocabulary {
    fn insert(&mut self, token: String) -> usize {
        if let Some(&id) = self.index.get(&token) {
            return id;
        }
        let id = self.tokens.len() + 2;
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    /// Number of ids, reserved ones included.
    pub fn len(&self) -> usize {
        self.tokens.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        id.checked_sub(2).and_then(|i| self.tokens.get(i)).map(String::as_str)
    }

    /// Id of a cell in apply mode.
    pub fn id(&self, cell: &CellValue) -> usize {
        match token_key(cell) {
            None => MISSING_TOKEN,
            Some(k) => self.index.get(&k).copied().unwrap_or(OOV_TOKEN),
        }
    }
}

/// Categorical key of a cell; `None` for missing.
pub fn token_key(cell: &CellValue) -> Option<String> {
    match cell {
        CellValue::Missing => None,
        CellValue::Token(t) => Some(t.clone()),
        CellValue::Number(v) => Some(format!("{v}")),
        CellValue::Date(d) => Some(format_date(*d)),
    }
}

/// Numeric reading of a cell; dates count as epoch seconds.
pub fn numeric_value(cell: &CellValue) -> Option<f64> {
    match cell {
        CellValue::Number(v) => Some(*v),
        CellValue::Date(d) => Some(*d as f64),
        _ => None,
    }
}

/// Builds a vocabulary from a stream of cells and returns their ids.
pub fn tokenize_train<'a>(values: impl IntoIterator<Item = &'a CellValue>) -> (Vocabulary, Vec<usize>) {
    let mut vocab = Vocabulary::default();
    let ids = values
        .into_iter()
        .map(|c| match token_key(c) {
            None => MISSING_TOKEN,
            Some(k) => vocab.insert(k),
        })
        .collect();
    (vocab, ids)
}

pub fn tokenize_apply<'a>(vocab: &Vocabulary, values: impl IntoIterator<Item = &'a CellValue>) -> Vec<usize> {
    values.into_iter().map(|c| vocab.id(c)).collect()
}

/// Training-split range of a numerical feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    pub fn fit(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        values.into_iter().fold(None, |acc, v| match acc {
            None => Some(MinMax { min: v, max: v }),
            Some(m) => Some(MinMax {
                min: m.min.min(v),
                max: m.max.max(v),
            }),
        })
    }
}

/// `(x - min) / (max - min)` clamped into `[0, 1]`; a constant feature maps to 0.5.
pub fn uniform_normalize(x: f64, stats: MinMax) -> f64 {
    let span = stats.max - stats.min;
    if span <= 0.0 {
        return 0.5;
    }
    ((x - stats.min) / span).clamp(0.0, 1.0)
}

/// Missing entries become zero.
pub fn impute(values: &[Option<f64>]) -> Vec<f64> {
    values.iter().map(|v| v.unwrap_or(0.0)).collect()
}

/// Numerical/categorical/date recognition for every feature of `table`.
pub fn nc_recognize(table: &BigTable, config: &RecognizerConfig) -> Result<Vec<NcKind>, PrepError> {
    config.validate()?;
    if table.num_customers() == 0 {
        return Err(PrepError::EmptyTable);
    }
    (0..table.num_features())
        .map(|f| nc_recognize_feature(table, f, config))
        .collect()
}

fn nc_recognize_feature(table: &BigTable, f: usize, config: &RecognizerConfig) -> Result<NcKind, PrepError> {
    let (mut tokens, mut dates, mut numbers) = (0usize, 0usize, 0usize);
    let mut fractional = false;
    let mut distinct: HashSet<u64> = HashSet::new();
    for c in 0..table.num_customers() {
        for cell in table.column(c, f) {
            match cell {
                CellValue::Missing => {}
                CellValue::Token(_) => tokens += 1,
                CellValue::Date(_) => dates += 1,
                CellValue::Number(v) => {
                    numbers += 1;
                    if v.fract() != 0.0 {
                        fractional = true;
                    }
                    distinct.insert(v.to_bits());
                }
            }
        }
    }
    let present_kinds = [tokens, dates, numbers].iter().filter(|&&n| n > 0).count();
    if present_kinds > 1 {
        return Err(PrepError::MixedKindFeature(table.features()[f].clone()));
    }
    Ok(if tokens > 0 {
        NcKind::Categorical
    } else if dates > 0 {
        NcKind::Date
    } else if numbers == 0 {
        // Nothing observed: a vocabulary with only the missing token is the cheapest encoding.
        NcKind::Categorical
    } else if fractional || distinct.len() > config.integer_unique_threshold {
        NcKind::Numerical
    } else {
        NcKind::Categorical
    })
}

/// Per-customer dynamics `D[u, f]` for customers in a `|U| x |F|` layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsMatrix {
    customers: usize,
    features: usize,
    data: Vec<f64>,
}

impl DynamicsMatrix {
    pub fn new(customers: usize, features: usize) -> Self {
        Self {
            customers,
            features,
            data: vec![0.0; customers * features],
        }
    }

    pub fn get(&self, customer: usize, feature: usize) -> f64 {
        self.data[customer * self.features + feature]
    }

    pub fn set_column(&mut self, feature: usize, column: &[f64]) {
        assert_eq!(column.len(), self.customers);
        for (u, v) in column.iter().enumerate() {
            self.data[u * self.features + feature] = *v;
        }
    }

    pub fn column(&self, feature: usize) -> Vec<f64> {
        (0..self.customers).map(|u| self.get(u, feature)).collect()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.customers, self.features)
    }
}

/// Change statistic of successive values of one feature, per customer.
///
/// Categorical: number of successive pairs that differ, with missing treated as
/// its own value. Numerical: sum of absolute successive differences of
/// min-max normalized values, skipping pairs that involve a missing value.
/// Records must already be in chronological order.
pub fn dynamics_statistic(table: &BigTable, feature: usize, kind: ValueKind) -> Vec<f64> {
    let stats = match kind {
        ValueKind::Numerical => {
            MinMax::fit((0..table.num_customers()).flat_map(|c| table.column(c, feature).filter_map(numeric_value)))
        }
        ValueKind::Categorical => None,
    };
    (0..table.num_customers())
        .map(|c| {
            let cells: Vec<&CellValue> = table.column(c, feature).collect();
            cells
                .windows(2)
                .map(|w| match kind {
                    ValueKind::Categorical => {
                        if token_key(w[0]) != token_key(w[1]) {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    ValueKind::Numerical => match (numeric_value(w[0]), numeric_value(w[1]), stats) {
                        (Some(a), Some(b), Some(s)) => (uniform_normalize(b, s) - uniform_normalize(a, s)).abs(),
                        _ => 0.0,
                    },
                })
                .sum()
        })
        .collect()
}

/// Count of customers whose change statistic exceeds `pair_threshold`.
pub fn dynamic_customer_count(column: &[f64], pair_threshold: f64) -> usize {
    column.iter().filter(|&&d| d > pair_threshold).count()
}

/// Static/dynamic decision for one feature column of the dynamics matrix.
/// A count equal to the feature threshold is static.
pub fn sd_recognize(column: &[f64], pair_threshold: f64, feature_threshold: usize) -> Dynamism {
    if dynamic_customer_count(column, pair_threshold) > feature_threshold {
        Dynamism::Dynamic
    } else {
        Dynamism::Static
    }
}

/// Per-feature entry of a [`FeatureSchema`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocabulary: Option<Vocabulary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<MinMax>,
    /// Number of customers whose change statistic exceeded the pair threshold.
    #[serde(default)]
    pub dynamic_customers: usize,
}

impl FeatureSpec {
    pub fn new(name: impl Into<String>, kind: FeatureKind) -> Self {
        Self {
            name: name.into(),
            kind,
            vocabulary: None,
            normalization: None,
            dynamic_customers: 0,
        }
    }

    pub fn vocab_len(&self) -> usize {
        self.vocabulary.as_ref().map(Vocabulary::len).unwrap_or(2)
    }

    /// Normalized-and-imputed value of a cell (0 when missing).
    pub fn normalized(&self, cell: &CellValue) -> Option<f64> {
        let v = numeric_value(cell)?;
        Some(match self.normalization {
            Some(s) => uniform_normalize(v, s),
            None => 0.5,
        })
    }

    pub fn token_id(&self, cell: &CellValue) -> usize {
        match &self.vocabulary {
            Some(v) => v.id(cell),
            None if cell.is_missing() => MISSING_TOKEN,
            None => OOV_TOKEN,
        }
    }
}

/// Recognized kinds plus the fitted vocabularies and normalization ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub features: Vec<FeatureSpec>,
    pub date_index: Option<String>,
    pub config: RecognizerConfig,
    #[serde(default)]
    pub feature_threshold: usize,
}

impl FeatureSchema {
    pub fn from_specs(features: Vec<FeatureSpec>, date_index: Option<String>, config: RecognizerConfig) -> Self {
        Self {
            features,
            date_index,
            config,
            feature_threshold: 0,
        }
    }

    pub fn feature(&self, name: &str) -> Option<&FeatureSpec> {
        self.features.iter().find(|f| f.name == name)
    }

    /// Positions (in schema order) of features of the given kind.
    pub fn indices_of(&self, kind: FeatureKind) -> Vec<usize> {
        self.features
            .iter()
            .enumerate()
            .filter(|(_, f)| f.kind == kind)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn kinds(&self) -> Vec<FeatureKind> {
        self.features.iter().map(|f| f.kind).collect()
    }
}

/// Analyst-assigned kinds that bypass automatic recognition.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SchemaOverrides {
    #[serde(default)]
    pub kinds: BTreeMap<String, FeatureKind>,
}

/// Runs both recognizers and fits vocabularies and normalization ranges.
///
/// Features recognized as all-date values are treated as numerical epoch
/// seconds; the table's own date column is the only date index.
pub fn build_schema(
    table: &BigTable,
    config: &RecognizerConfig,
    overrides: &SchemaOverrides,
) -> Result<FeatureSchema, PrepError> {
    config.validate()?;
    if table.num_customers() == 0 {
        return Err(PrepError::EmptyTable);
    }
    for name in overrides.kinds.keys() {
        if table.feature_index(name).is_none() {
            return Err(PrepError::UnknownFeature(name.clone()));
        }
    }
    if overrides.kinds.values().any(|k| *k == FeatureKind::DateIndex) {
        return Err(PrepError::InvalidConfig(
            "the date index is declared through the table format, not as a feature kind".into(),
        ));
    }
    let ordered;
    let table = if config.dynamic_analysis {
        ordered = order_records(table)?;
        &ordered
    } else {
        table
    };
    let feature_threshold = config.feature_threshold_for(table.num_customers());
    let mut specs = Vec::with_capacity(table.num_features());
    for (f, name) in table.features().iter().enumerate() {
        let value_kind = match overrides.kinds.get(name) {
            Some(k) => k.value_kind().expect("date index rejected above"),
            None => match nc_recognize_feature(table, f, config)? {
                NcKind::Categorical => ValueKind::Categorical,
                NcKind::Numerical | NcKind::Date => ValueKind::Numerical,
            },
        };
        let (dynamism, dynamic_customers) = if config.dynamic_analysis {
            let column = dynamics_statistic(table, f, value_kind);
            let count = dynamic_customer_count(&column, config.pair_threshold(value_kind));
            (
                sd_recognize(&column, config.pair_threshold(value_kind), feature_threshold),
                count,
            )
        } else {
            (Dynamism::Static, 0)
        };
        let kind = overrides
            .kinds
            .get(name)
            .copied()
            .unwrap_or(FeatureKind::from_parts(value_kind, dynamism));
        let mut spec = FeatureSpec::new(name.clone(), kind);
        spec.dynamic_customers = dynamic_customers;
        let cells = (0..table.num_customers()).flat_map(|c| table.column(c, f));
        match value_kind {
            ValueKind::Categorical => spec.vocabulary = Some(tokenize_train(cells).0),
            ValueKind::Numerical => {
                spec.normalization =
                    Some(MinMax::fit(cells.filter_map(numeric_value)).unwrap_or(MinMax { min: 0.0, max: 0.0 }))
            }
        }
        specs.push(spec);
    }
    let mut schema = FeatureSchema::from_specs(specs, table.date_column().map(String::from), config.clone());
    schema.feature_threshold = feature_threshold;
    Ok(schema)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::{read_table, Record, TableFormat};

    fn single_feature(values: &[&[CellValue]]) -> BigTable {
        let mut t = BigTable::new("id", Some("date".into()), vec!["f".into()]).unwrap();
        for (u, cells) in values.iter().enumerate() {
            for (i, c) in cells.iter().enumerate() {
                t.push_record(
                    &format!("u{u}"),
                    Record {
                        date: Some(i as i64),
                        cells: vec![c.clone()],
                    },
                )
                .unwrap();
            }
        }
        t
    }

    fn tok(s: &str) -> CellValue {
        CellValue::Token(s.into())
    }

    fn num(v: f64) -> CellValue {
        CellValue::Number(v)
    }

    fn cfg(threshold: usize) -> RecognizerConfig {
        RecognizerConfig {
            integer_unique_threshold: threshold,
            ..RecognizerConfig::default()
        }
    }

    #[test]
    fn fractional_is_numerical() {
        let t = single_feature(&[&[num(1.5), num(2.0), CellValue::Missing]]);
        assert_eq!(nc_recognize(&t, &cfg(10)).unwrap(), vec![NcKind::Numerical]);
    }

    #[test]
    fn low_cardinality_integers_are_categorical() {
        let t = single_feature(&[&[num(1.0), num(2.0), num(3.0), num(1.0)]]);
        assert_eq!(nc_recognize(&t, &cfg(10)).unwrap(), vec![NcKind::Categorical]);
    }

    #[test]
    fn high_cardinality_integers_are_numerical() {
        let cells: Vec<CellValue> = (0..50).map(|i| num(i as f64)).collect();
        let t = single_feature(&[&cells]);
        // Oracle: 50 distinct values > 10.
        let distinct: HashSet<i64> = (0..50).collect();
        assert!(distinct.len() > 10);
        assert_eq!(nc_recognize(&t, &cfg(10)).unwrap(), vec![NcKind::Numerical]);
    }

    #[test]
    fn tokens_and_dates() {
        let t = single_feature(&[&[tok("a"), CellValue::Missing]]);
        assert_eq!(nc_recognize(&t, &cfg(10)).unwrap(), vec![NcKind::Categorical]);
        let t = single_feature(&[&[CellValue::Date(0), CellValue::Date(86_400)]]);
        assert_eq!(nc_recognize(&t, &cfg(10)).unwrap(), vec![NcKind::Date]);
    }

    #[test]
    fn mixed_kind_reported_with_name() {
        let t = single_feature(&[&[tok("a"), num(1.0)]]);
        match nc_recognize(&t, &cfg(10)) {
            Err(PrepError::MixedKindFeature(f)) => assert_eq!(f, "f"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn categorical_changes_counted() {
        let t = single_feature(&[&[tok("A"), tok("A"), tok("B"), tok("B"), tok("C")]]);
        assert_eq!(dynamics_statistic(&t, 0, ValueKind::Categorical), vec![2.0]);
        let t = single_feature(&[&[tok("X"), tok("X"), tok("X")]]);
        assert_eq!(dynamics_statistic(&t, 0, ValueKind::Categorical), vec![0.0]);
    }

    #[test]
    fn missing_transition_counts_as_change() {
        let t = single_feature(&[&[CellValue::Missing, tok("A"), tok("A")]]);
        assert_eq!(dynamics_statistic(&t, 0, ValueKind::Categorical), vec![1.0]);
    }

    #[test]
    fn numerical_sum_of_abs_differences() {
        // Range [0, 1] keeps normalized values equal to raw ones.
        let t = single_feature(&[&[num(0.1), num(0.4), num(0.2)], &[num(0.0), num(1.0)]]);
        let d = dynamics_statistic(&t, 0, ValueKind::Numerical);
        assert!((d[0] - 0.5).abs() < 1e-12);
        assert_eq!(d[1], 1.0);
    }

    #[test]
    fn numerical_pairs_with_missing_skipped() {
        let t = single_feature(&[&[num(0.0), CellValue::Missing, num(1.0)]]);
        assert_eq!(dynamics_statistic(&t, 0, ValueKind::Numerical), vec![0.0]);
    }

    #[test]
    fn single_record_customers_have_zero_dynamics() {
        let t = single_feature(&[&[tok("A")], &[num(3.0)]]);
        assert_eq!(dynamics_statistic(&t, 0, ValueKind::Categorical), vec![0.0, 0.0]);
    }

    #[test]
    fn sd_threshold_cases() {
        let col: Vec<f64> = (0..10).map(|_| 1.0).collect();
        assert_eq!(sd_recognize(&col, 0.0, 5), Dynamism::Dynamic);
        assert_eq!(sd_recognize(&col[..3], 0.0, 5), Dynamism::Static);
        assert_eq!(sd_recognize(&col[..5], 0.0, 5), Dynamism::Static);
    }

    #[test]
    fn four_customer_fixture_is_dynamic() {
        let t = single_feature(&[
            &[tok("a"), tok("b")],
            &[tok("a"), tok("b")],
            &[tok("c"), tok("d")],
            &[tok("a"), tok("a")],
        ]);
        let col = dynamics_statistic(&t, 0, ValueKind::Categorical);
        assert_eq!(col, vec![1.0, 1.0, 1.0, 0.0]);
        assert_eq!(dynamic_customer_count(&col, 0.0), 3);
        assert_eq!(sd_recognize(&col, 0.0, 2), Dynamism::Dynamic);
    }

    #[test]
    fn tokenization_modes() {
        let stream = [tok("red"), tok("blue"), tok("red")];
        let (vocab, ids) = tokenize_train(&stream);
        assert_eq!(ids, vec![2, 3, 2]);
        assert_eq!(vocab.len(), 4);
        assert_eq!(vocab.token(2), Some("red"));
        assert_eq!(vocab.id(&CellValue::Missing), MISSING_TOKEN);
        assert_eq!(tokenize_apply(&vocab, &[tok("green")]), vec![OOV_TOKEN]);
    }

    #[test]
    fn vocabulary_serializes_as_ordered_tokens() {
        let (vocab, _) = tokenize_train(&[tok("x"), tok("y")]);
        let json = serde_json::to_string(&vocab).unwrap();
        assert_eq!(json, r#"{"tokens":["x","y"]}"#);
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back.id(&tok("y")), 3);
    }

    #[test]
    fn normalization_endpoints() {
        let s = MinMax { min: 0.0, max: 10.0 };
        assert_eq!(uniform_normalize(0.0, s), 0.0);
        assert_eq!(uniform_normalize(10.0, s), 1.0);
        assert_eq!(uniform_normalize(5.0, s), 0.5);
        assert_eq!(uniform_normalize(-3.0, s), 0.0);
        assert_eq!(uniform_normalize(30.0, s), 1.0);
        assert_eq!(uniform_normalize(4.0, MinMax { min: 4.0, max: 4.0 }), 0.5);
    }

    #[test]
    fn imputation() {
        assert_eq!(impute(&[None]), vec![0.0]);
        assert_eq!(impute(&[Some(0.7)]), vec![0.7]);
        assert_eq!(impute(&[None, Some(1.0), None]), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn config_validation() {
        assert!(cfg(1).validate().is_err());
        let c = RecognizerConfig {
            feature_threshold: Some(0),
            ..RecognizerConfig::default()
        };
        assert!(c.validate().is_err());
        assert_eq!(RecognizerConfig::default().feature_threshold_for(101), 6);
        assert_eq!(RecognizerConfig::default().feature_threshold_for(3), 1);
    }

    #[test]
    fn schema_covers_four_kinds_and_overrides() {
        let src = "\
customer_id,date,age,balance,segment,event
a,2020-01-01,30,0.1,gold,x
a,2020-01-02,30,0.9,gold,y
b,2020-01-01,40,0.5,silver,x
b,2020-01-02,40,0.2,silver,z
c,2020-01-01,50,0.3,gold,y
c,2020-01-02,50,0.8,gold,x
";
        let t = read_table(src.as_bytes(), &TableFormat::default()).unwrap();
        let config = RecognizerConfig {
            integer_unique_threshold: 2,
            feature_threshold: Some(1),
            ..RecognizerConfig::default()
        };
        let schema = build_schema(&t, &config, &SchemaOverrides::default()).unwrap();
        assert_eq!(
            schema.kinds(),
            vec![
                FeatureKind::StaticNumerical,
                FeatureKind::DynamicNumerical,
                FeatureKind::StaticCategorical,
                FeatureKind::DynamicCategorical
            ]
        );
        assert_eq!(schema.features[0].normalization, Some(MinMax { min: 30.0, max: 50.0 }));
        assert_eq!(schema.features[2].vocab_len(), 4);

        let mut overrides = SchemaOverrides::default();
        overrides.kinds.insert("age".into(), FeatureKind::StaticCategorical);
        let schema = build_schema(&t, &config, &overrides).unwrap();
        assert_eq!(schema.features[0].kind, FeatureKind::StaticCategorical);
        assert!(schema.features[0].vocabulary.is_some());

        let json = serde_json::to_string(&schema).unwrap();
        let back: FeatureSchema = serde_json::from_str(&json).unwrap();
        assert_eq!(back, schema);
    }

    #[test]
    fn schema_needs_date_for_dynamic_analysis() {
        let fmt = TableFormat {
            date_column: None,
            ..TableFormat::default()
        };
        let t = read_table("customer_id,x\nc,1\n".as_bytes(), &fmt).unwrap();
        let err = build_schema(&t, &RecognizerConfig::default(), &SchemaOverrides::default()).unwrap_err();
        assert!(matches!(err, PrepError::Table(TableError::MissingDateIndex)));
        let static_only = RecognizerConfig {
            dynamic_analysis: false,
            ..RecognizerConfig::default()
        };
        let s = build_schema(&t, &static_only, &SchemaOverrides::default()).unwrap();
        assert_eq!(s.kinds(), vec![FeatureKind::StaticCategorical]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn normalize_monotone_and_bounded(a in -100.0f64..100.0, b in -100.0f64..100.0,
                                              lo in -50.0f64..0.0, span in 0.001f64..50.0) {
                let s = MinMax { min: lo, max: lo + span };
                let (x, y) = if a <= b { (a, b) } else { (b, a) };
                let (nx, ny) = (uniform_normalize(x, s), uniform_normalize(y, s));
                prop_assert!(nx <= ny);
                prop_assert!((0.0..=1.0).contains(&nx) && (0.0..=1.0).contains(&ny));
            }

            #[test]
            fn apply_ids_within_vocab(train in proptest::collection::vec(0u8..6, 1..20),
                                      apply in proptest::collection::vec(0u8..10, 1..20)) {
                let cells = |v: &[u8]| v.iter().map(|&i| if i == 0 { CellValue::Missing } else { tok(&format!("t{i}")) }).collect::<Vec<_>>();
                let (vocab, _) = tokenize_train(&cells(&train));
                for id in tokenize_apply(&vocab, &cells(&apply)) {
                    prop_assert!(id < vocab.len());
                }
            }

            #[test]
            fn duplicate_last_record_adds_no_change(seq in proptest::collection::vec(0u8..4, 1..8)) {
                let mut cells: Vec<CellValue> = seq.iter().map(|&i| if i == 0 { CellValue::Missing } else { tok(&format!("t{i}")) }).collect();
                let before = dynamics_statistic(&single_feature(&[&cells]), 0, ValueKind::Categorical);
                cells.push(cells.last().unwrap().clone());
                let after = dynamics_statistic(&single_feature(&[&cells]), 0, ValueKind::Categorical);
                prop_assert_eq!(before, after);
            }
        }
    }
}
