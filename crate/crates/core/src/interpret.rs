//! Interpretation by masking: pick the customers with the largest target
//! values, blank cells of their records, and aggregate the resulting target
//! changes per feature into a ranked "genome".

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EncodedCustomer, ModelError, Table2VecModel};
use crate::numeric::Graph;
use crate::rng::substream;
use crate::table::{order_records, BigTable, CellValue, Record, TableError};

#[derive(Debug, Error)]
pub enum InterpretError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("position {position} out of range for representation width {width}")]
    PositionOutOfRange { position: usize, width: usize },
    #[error("task {task} has no class {class}")]
    UnknownClass { task: String, class: usize },
    #[error("invalid cell coordinates: {0}")]
    InvalidCell(String),
    #[error("table has no customers")]
    EmptyTable,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Table(#[from] TableError),
}

/// Quantity whose sensitivity to masking is measured.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// Every representation position in turn.
    #[default]
    AllPositions,
    Position(usize),
    /// Predicted probability of `class` under `task`.
    Class {
        task: String,
        class: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterpretConfig {
    /// Sensitive customers per target.
    pub k: usize,
    /// Masking trials per sensitive customer.
    pub mask_samples: usize,
    /// Fixed threshold on mean |delta|; when absent, 0.05 times the standard
    /// deviation of the target over the table.
    pub delta_threshold: Option<f64>,
    pub target: Target,
    /// Features listed per customer in the report.
    pub top_features: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for InterpretConfig {
    fn default() -> Self {
        Self {
            k: 20,
            mask_samples: 64,
            delta_threshold: None,
            target: Target::AllPositions,
            top_features: 5,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl InterpretConfig {
    pub fn validate(&self) -> Result<(), InterpretError> {
        let bad = |m: &str| Err(InterpretError::InvalidConfig(m.into()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.mask_samples == 0 {
            return bad("mask_samples must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.delta_threshold.is_some_and(|t| !(t >= 0.0)) {
            return bad("delta_threshold must be non-negative");
        }
        Ok(())
    }
}

/// A maskable unit. Static features are masked as a whole (`time` is
/// `None`); dynamic features one record at a time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MaskSite {
    /// Schema feature index.
    pub feature: usize,
    pub time: Option<usize>,
}

/// Change of the target when one site of one customer is masked.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiteDelta {
    pub customer: usize,
    pub site: MaskSite,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScore {
    pub feature: String,
    /// Mean |delta| over the feature's masking trials.
    pub score: f64,
    /// Sign of the mean delta.
    pub direction: i8,
    /// Distinct customers with at least one trial on the feature.
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub feature: String,
    /// Mean signed delta.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CustomerGenome {
    pub customer: String,
    pub target_value: f64,
    pub contributions: Vec<Contribution>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetGenome {
    pub target: Target,
    pub threshold: f64,
    pub features: Vec<FeatureScore>,
    pub customers: Vec<CustomerGenome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenomeReport {
    pub targets: Vec<TargetGenome>,
}

impl GenomeReport {
    /// Horizontal bar chart of the feature rankings.
    pub fn render_bars(&self, width: usize) -> String {
        let mut out = String::new();
        for t in &self.targets {
            let label = match &t.target {
                Target::Position(p) => format!("position {p}"),
                Target::Class { task, class } => format!("{task} = {class}"),
                Target::AllPositions => "all positions".into(),
            };
            let _ = writeln!(out, "{label} (threshold {:.4})", t.threshold);
            if t.features.is_empty() {
                let _ = writeln!(out, "  (no feature above threshold)");
            }
            let name_w = t.features.iter().map(|f| f.feature.len()).max().unwrap_or(0);
            let top = t.features.first().map_or(1.0, |f| f.score);
            for f in &t.features {
                let n = if top > 0.0 {
                    (f.score / top * width as f64).round() as usize
                } else {
                    0
                };
                let sign = match f.direction {
                    1 => '+',
                    -1 => '-',
                    _ => ' ',
                };
                let _ = writeln!(
                    out,
                    "  {:<name_w$} {sign} {:<width$} {:.4}",
                    f.feature,
                    "#".repeat(n),
                    f.score
                );
            }
        }
        out
    }
}

/// Indices of the `k` largest values, ties broken by lower index. `k` is
/// capped at the number of values.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// The `k` customers with the largest representation value at `position`.
pub fn sensitive_customers(
    representations: &[Vec<f64>],
    position: usize,
    k: usize,
) -> Result<Vec<usize>, InterpretError> {
    let width = representations.first().map_or(0, Vec::len);
    if representations.iter().any(|r| position >= r.len()) || representations.is_empty() {
        return Err(InterpretError::PositionOutOfRange { position, width });
    }
    let values: Vec<f64> = representations.iter().map(|r| r[position]).collect();
    Ok(top_k(&values, k))
}

/// Copy of `records` with the site's cells set to Missing. `columns` maps
/// schema features to record cells.
pub fn mask_records(
    model: &Table2VecModel,
    records: &[Record],
    columns: &[usize],
    site: MaskSite,
) -> Result<Vec<Record>, InterpretError> {
    let spec = model
        .schema()
        .features
        .get(site.feature)
        .ok_or_else(|| InterpretError::InvalidCell(format!("feature {}", site.feature)))?;
    let col = columns[site.feature];
    let mut out = records.to_vec();
    match (spec.kind.is_dynamic(), site.time) {
        (false, None) => out.iter_mut().for_each(|r| r.cells[col] = CellValue::Missing),
        (true, Some(t)) if t < out.len() => out[t].cells[col] = CellValue::Missing,
        _ => {
            return Err(InterpretError::InvalidCell(format!(
                "feature {} at time {:?} over {} records",
                spec.name,
                site.time,
                records.len()
            )))
        }
    }
    Ok(out)
}

/// Targets resolved against a model.
fn resolve(model: &Table2VecModel, target: &Target) -> Result<Vec<Target>, InterpretError> {
    let width = model.representation_width();
    match target {
        Target::AllPositions => Ok((0..width).map(Target::Position).collect()),
        Target::Position(p) if *p >= width => Err(InterpretError::PositionOutOfRange { position: *p, width }),
        Target::Class { task, class } => {
            let t = model.task_index(task)?;
            if *class >= model.tasks()[t].classes {
                return Err(InterpretError::UnknownClass {
                    task: task.clone(),
                    class: *class,
                });
            }
            Ok(vec![target.clone()])
        }
        t => Ok(vec![t.clone()]),
    }
}

/// Evaluation-mode target values, `[customer][target]`.
fn target_values(
    model: &Table2VecModel,
    customers: &[EncodedCustomer],
    targets: &[Target],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>, InterpretError> {
    let mut out = Vec::with_capacity(customers.len());
    for chunk in customers.chunks(batch_size) {
        let refs: Vec<&EncodedCustomer> = chunk.iter().collect();
        let mut g = Graph::eval();
        let f = model.forward(&mut g, &refs)?;
        let mut probs = BTreeMap::new();
        for t in targets {
            if let Target::Class { task, .. } = t {
                let ti = model.task_index(task)?;
                if let std::collections::btree_map::Entry::Vacant(e) = probs.entry(ti) {
                    let p = g.softmax(f.logits[ti], 1).map_err(ModelError::from)?;
                    e.insert(g.value(p).clone());
                }
            }
        }
        let rep = g.value(f.representation);
        for i in 0..chunk.len() {
            out.push(
                targets
                    .iter()
                    .map(|t| match t {
                        Target::Position(p) => rep.row(i)[*p],
                        Target::Class { task, class } => {
                            probs[&model.task_index(task).expect("resolved")].row(i)[*class]
                        }
                        Target::AllPositions => unreachable!("resolved before evaluation"),
                    })
                    .collect(),
            );
        }
    }
    Ok(out)
}

/// `target(masked) - target(original)` for one customer in evaluation mode.
pub fn mask_and_delta(
    model: &Table2VecModel,
    records: &[Record],
    columns: &[usize],
    site: MaskSite,
    target: &Target,
) -> Result<f64, InterpretError> {
    let targets = resolve(model, target)?;
    if targets.len() != 1 {
        return Err(InterpretError::InvalidConfig(
            "mask_and_delta needs a single target".into(),
        ));
    }
    let masked = mask_records(model, records, columns, site)?;
    let encs = [
        model.encode_records(records, columns),
        model.encode_records(&masked, columns),
    ];
    let v = target_values(model, &encs, &targets, 2)?;
    Ok(v[1][0] - v[0][0])
}

/// Features whose mean |delta| exceeds `threshold`, ranked by that score
/// (ties by name).
pub fn sensitive_features(deltas: &[SiteDelta], names: &[String], threshold: f64) -> Vec<FeatureScore> {
    let mut by_feature: BTreeMap<usize, (f64, f64, usize, BTreeSet<usize>)> = BTreeMap::new();
    for d in deltas {
        let e = by_feature.entry(d.site.feature).or_default();
        e.0 += d.delta.abs();
        e.1 += d.delta;
        e.2 += 1;
        e.3.insert(d.customer);
    }
    let mut out: Vec<FeatureScore> = by_feature
        .into_iter()
        .filter_map(|(f, (abs_sum, sum, n, customers))| {
            let score = abs_sum / n as f64;
            let mean = sum / n as f64;
            (score > threshold).then(|| FeatureScore {
                feature: names[f].clone(),
                score,
                direction: if mean > 0.0 {
                    1
                } else if mean < 0.0 {
                    -1
                } else {
                    0
                },
                support: customers.len(),
            })
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.feature.cmp(&b.feature)));
    out
}

/// Sites that can change the model input: static features with an observed
/// value and observed dynamic cells inside the sequence window.
fn effective_sites(model: &Table2VecModel, records: &[Record], columns: &[usize]) -> Vec<MaskSite> {
    let n_s = model.config().transformer.n_s;
    let start = records.len().saturating_sub(n_s);
    let mut sites = Vec::new();
    for (f, spec) in model.schema().features.iter().enumerate() {
        let observed = |r: &Record| !r.cells[columns[f]].is_missing();
        if spec.kind.is_dynamic() {
            sites.extend(
                (start..records.len())
                    .filter(|&t| observed(&records[t]))
                    .map(|t| MaskSite {
                        feature: f,
                        time: Some(t),
                    }),
            );
        } else if records.iter().any(observed) {
            sites.push(MaskSite { feature: f, time: None });
        }
    }
    sites
}

fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Runs the three masking steps for every resolved target and aggregates the
/// deltas per feature and per sensitive customer. The table is not modified.
pub fn genome_report(
    model: &Table2VecModel,
    table: &BigTable,
    config: &InterpretConfig,
) -> Result<GenomeReport, InterpretError> {
    config.validate()?;
    if table.num_customers() == 0 {
        return Err(InterpretError::EmptyTable);
    }
    let targets = resolve(model, &config.target)?;
    let columns = model.column_map(table)?;
    let ordered;
    let table = if table.date_column().is_some() {
        ordered = order_records(table)?;
        &ordered
    } else {
        table
    };
    let encoded: Vec<EncodedCustomer> = (0..table.num_customers())
        .map(|c| model.encode_records(table.records(c), &columns))
        .collect();
    let base = target_values(model, &encoded, &targets, config.batch_size)?;

    let sensitive: Vec<Vec<usize>> = (0..targets.len())
        .map(|t| top_k(&base.iter().map(|v| v[t]).collect::<Vec<_>>(), config.k))
        .collect();
    let union: BTreeSet<usize> = sensitive.iter().flatten().copied().collect();

    // Per customer: masked sites and the deltas of every target.
    let mut trials: BTreeMap<usize, Vec<(MaskSite, Vec<f64>)>> = BTreeMap::new();
    for &c in &union {
        let records = table.records(c);
        let mut sites = effective_sites(model, records, &columns);
        if sites.len() > config.mask_samples {
            sites.shuffle(&mut substream(config.seed, &format!("mask-{c}")));
            sites.truncate(config.mask_samples);
            sites.sort();
        }
        let mut results = Vec::with_capacity(sites.len());
        for chunk in sites.chunks(config.batch_size.max(2) - 1) {
            // The unmasked customer rides along in every batch so each delta
            // compares outputs of the same pass.
            let mut encs = vec![encoded[c].clone()];
            for &site in chunk {
                let masked = mask_records(model, records, &columns, site)?;
                encs.push(model.encode_records(&masked, &columns));
            }
            let v = target_values(model, &encs, &targets, encs.len())?;
            for (i, &site) in chunk.iter().enumerate() {
                results.push((site, v[i + 1].iter().zip(&v[0]).map(|(m, o)| m - o).collect()));
            }
        }
        trials.insert(c, results);
    }

    let names: Vec<String> = model.schema().features.iter().map(|f| f.name.clone()).collect();
    let mut genomes = Vec::with_capacity(targets.len());
    for (t, target) in targets.iter().enumerate() {
        let values: Vec<f64> = base.iter().map(|v| v[t]).collect();
        let threshold = config.delta_threshold.unwrap_or_else(|| 0.05 * population_std(&values));
        let deltas: Vec<SiteDelta> = sensitive[t]
            .iter()
            .flat_map(|&c| {
                trials[&c].iter().map(move |(site, d)| SiteDelta {
                    customer: c,
                    site: *site,
                    delta: d[t],
                })
            })
            .collect();
        let features = sensitive_features(&deltas, &names, threshold);
        let customers = sensitive[t]
            .iter()
            .map(|&c| {
                let mut per: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
                for (site, d) in &trials[&c] {
                    let e = per.entry(site.feature).or_default();
                    e.0 += d[t];
                    e.1 += 1;
                }
                let mut contributions: Vec<Contribution> = per
                    .into_iter()
                    .map(|(f, (s, n))| Contribution {
                        feature: names[f].clone(),
                        delta: s / n as f64,
                    })
                    .filter(|c| c.delta.abs() > threshold)
                    .collect();
                contributions.sort_by(|a, b| {
                    b.delta
                        .abs()
                        .total_cmp(&a.delta.abs())
                        .then_with(|| a.feature.cmp(&b.feature))
                });
                contributions.truncate(config.top_features);
                CustomerGenome {
                    customer: table.customers()[c].clone(),
                    target_value: values[c],
                    contributions,
                }
            })
            .collect();
        genomes.push(TargetGenome {
            target: target.clone(),
            threshold,
            features,
            customers,
        });
    }
    Ok(GenomeReport { targets: genomes })
}
