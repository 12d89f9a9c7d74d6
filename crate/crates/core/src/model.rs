//! The full encoder: four branch embeddings, two dynamics blocks, a fusion
//! stack producing the customer representation, reconstruction heads trained
//! against frozen random projections, and per-task classification heads.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{act_run, dynamic_embed, DynamicsError, TransformerConfig, TransformerParams};
use crate::embed::EmbeddingBank;
use crate::eval::auc;
use crate::numeric::{Adam, AdamConfig, Graph, Init, NumericError, ParamCheckpoint, ParamId, ParamStore, Tensor, Var};
use crate::prep::{token_key, FeatureKind, FeatureSchema, FeatureSpec, MISSING_TOKEN};
use crate::rng::{derive_seed, substream};
use crate::table::{order_records, BigTable, CellValue, Record, TableError};

pub const MODEL_FORMAT: &str = "table2vec-model";
pub const MODEL_VERSION: u32 = 1;
/// Static categorical features contribute at most this many one-hot slots to
/// the reconstruction summary; larger ids share the last slot.
pub const SUMMARY_ONE_HOT_CAP: usize = 16;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("table does not match the model schema: {0}")]
    SchemaMismatch(String),
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("no labeled customers and reconstruction disabled")]
    NoLabeledCustomers,
    #[error("every loss term is disabled")]
    AllTermsDisabled,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconstructionConfig {
    /// Number of frozen random projections.
    pub count: usize,
    /// Output width of each projection.
    pub width: usize,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self { count: 3, width: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Dynamics blocks; `n_e` is also the embedding width of every branch.
    pub transformer: TransformerConfig,
    pub representation_width: usize,
    pub fusion_hidden: usize,
    pub task_hidden: usize,
    pub reconstruction: ReconstructionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            transformer: TransformerConfig::default(),
            representation_width: 32,
            fusion_hidden: 64,
            task_hidden: 32,
            reconstruction: ReconstructionConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.transformer.validate()?;
        if self.representation_width == 0 || self.fusion_hidden == 0 || self.task_hidden == 0 {
            return Err(ModelError::InvalidConfig("layer widths must be positive".into()));
        }
        if self.reconstruction.count > 0 && self.reconstruction.width == 0 {
            return Err(ModelError::InvalidConfig(
                "reconstruction width must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Training hyperparameters. The ponder weight lives in
/// [`TransformerConfig::ponder_cost`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub reconstruction_weight: f64,
    /// Per-task loss weight; tasks not listed weigh 1.
    pub task_weights: BTreeMap<String, f64>,
    pub validation_fraction: f64,
    /// Inverse-frequency class weights inside cross-entropy.
    pub class_weighting: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
            reconstruction_weight: 0.5,
            task_weights: BTreeMap::new(),
            validation_fraction: 0.2,
            class_weighting: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.reconstruction_weight >= 0.0) || self.task_weights.values().any(|w| !(*w >= 0.0)) {
            return bad("loss weights must be non-negative");
        }
        if !(0.0..=0.5).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 0.5]");
        }
        Ok(())
    }

    pub fn task_weight(&self, task: &str) -> f64 {
        self.task_weights.get(task).copied().unwrap_or(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub classes: usize,
}

/// Schema positions of each branch's features.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    cs: Vec<usize>,
    ns: Vec<usize>,
    cd: Vec<usize>,
    nd: Vec<usize>,
}

impl Layout {
    fn new(schema: &FeatureSchema) -> Self {
        Self {
            cs: schema.indices_of(FeatureKind::StaticCategorical),
            ns: schema.indices_of(FeatureKind::StaticNumerical),
            cd: schema.indices_of(FeatureKind::DynamicCategorical),
            nd: schema.indices_of(FeatureKind::DynamicNumerical),
        }
    }
}

/// Model-ready view of one customer.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedCustomer {
    /// Token id of each static categorical feature's last observed value.
    pub cs_ids: Vec<usize>,
    /// Normalized, imputed last observed value of each static numerical feature.
    pub ns_values: Vec<f64>,
    /// Per kept record, token ids of the dynamic categorical features.
    pub cd_ids: Vec<Vec<usize>>,
    /// Per kept record, normalized imputed dynamic numerical values.
    pub nd_values: Vec<Vec<f64>>,
    /// One bit per branch (CS, NS, CD, ND): any observed value.
    pub presence: [f64; 4],
    /// Fixed summary that the reconstruction heads are trained against.
    pub summary: Vec<f64>,
}

impl EncodedCustomer {
    pub fn steps(&self) -> usize {
        self.cd_ids.len()
    }
}

/// Labels and encoding of a training customer.
#[derive(Debug, Clone)]
pub struct Example {
    pub customer: EncodedCustomer,
    /// One entry per model task.
    pub labels: Vec<Option<usize>>,
}

#[derive(Debug, Clone)]
struct Affine2 {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Affine2 {
    fn new(store: &mut ParamStore, prefix: &str, dims: [usize; 3], rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let [i, h, o] = dims;
        Self {
            w1: store.add(
                format!("{prefix}.w1"),
                &[i, h],
                Init::XavierUniform { fan_in: i, fan_out: h },
                rng,
            ),
            b1: store.add(format!("{prefix}.b1"), &[h], Init::Zeros, rng),
            w2: store.add(
                format!("{prefix}.w2"),
                &[h, o],
                Init::XavierUniform { fan_in: h, fan_out: o },
                rng,
            ),
            b2: store.add(format!("{prefix}.b2"), &[o], Init::Zeros, rng),
        }
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NumericError> {
        let (w1, b1, w2, b2) = (
            g.param(store, self.w1),
            g.param(store, self.b1),
            g.param(store, self.w2),
            g.param(store, self.b2),
        );
        let h = g.matmul(x, w1)?;
        let h = g.add(h, b1)?;
        let h = g.relu(h);
        let o = g.matmul(h, w2)?;
        g.add(o, b2)
    }
}

/// Graph nodes of one batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[B, r]`.
    pub representation: Var,
    /// One `[B, d_rec]` node per reconstruction head.
    pub reconstructions: Vec<Var>,
    /// One `[B, classes]` node per task.
    pub logits: Vec<Var>,
    /// Sum of the dynamics blocks' ponder penalties, when any block ran.
    pub ponder_penalty: Option<Var>,
    pub mean_steps: Option<f64>,
}

/// Scalar components of [`joint_loss`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub reconstruction: f64,
    pub tasks: Vec<f64>,
    pub ponder: f64,
}

/// `lambda_rec * sum_r MSE(recon_r, target_r) + sum_t w_t * CE_t + ponder`.
///
/// `sample_weights[t][b]` weighs example `b` in task `t`'s cross-entropy;
/// unlabeled examples contribute nothing.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss(
    g: &mut Graph,
    reconstructions: &[Var],
    targets: &[Tensor],
    reconstruction_weight: f64,
    logits: &[Var],
    labels: &[Vec<Option<usize>>],
    sample_weights: &[Vec<f64>],
    task_weights: &[f64],
    ponder_penalty: Option<Var>,
) -> Result<(Var, LossBreakdown), ModelError> {
    let recon_on = reconstruction_weight > 0.0 && !reconstructions.is_empty();
    let tasks_on = task_weights.iter().any(|&w| w > 0.0);
    if !recon_on && !tasks_on {
        return Err(ModelError::AllTermsDisabled);
    }
    if reconstructions.len() != targets.len()
        || logits.len() != labels.len()
        || labels.len() != sample_weights.len()
        || labels.len() != task_weights.len()
    {
        return Err(ModelError::InvalidConfig("loss inputs disagree in length".into()));
    }
    let mut breakdown = LossBreakdown::default();
    let mut terms = Vec::new();
    if recon_on {
        let mut parts = Vec::new();
        for (r, t) in reconstructions.iter().zip(targets) {
            parts.push(g.mse(*r, t)?);
        }
        let mut s = parts[0];
        for p in &parts[1..] {
            s = g.add(s, *p)?;
        }
        breakdown.reconstruction = g.value(s).item();
        terms.push(g.scale(s, reconstruction_weight));
    }
    for (t, &w) in task_weights.iter().enumerate() {
        let ce = g.cross_entropy(logits[t], &labels[t], &sample_weights[t])?;
        breakdown.tasks.push(g.value(ce).item());
        if w > 0.0 {
            terms.push(g.scale(ce, w));
        }
    }
    if let Some(p) = ponder_penalty {
        breakdown.ponder = g.value(p).item();
        terms.push(p);
    }
    let mut total = terms[0];
    for t in &terms[1..] {
        total = g.add(total, *t)?;
    }
    breakdown.total = g.value(total).item();
    Ok((total, breakdown))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
    pub reconstruction_loss: f64,
    pub mean_ponder_steps: Option<f64>,
    /// Binary tasks only; `None` when the validation split has one class.
    pub validation_auc: BTreeMap<String, Option<f64>>,
}

/// Writes one JSON object per line.
pub fn write_log<W: Write>(log: &[EpochLog], mut w: W) -> Result<(), ModelError> {
    for entry in log {
        serde_json::to_writer(&mut w, entry)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config: ModelConfig,
    pub schema: FeatureSchema,
    pub tasks: Vec<TaskSpec>,
    pub params: ParamCheckpoint,
}

/// Trained (or freshly initialized) encoder with its heads.
#[derive(Debug, Clone)]
pub struct Table2VecModel {
    schema: FeatureSchema,
    config: ModelConfig,
    tasks: Vec<TaskSpec>,
    seed: u64,
    layout: Layout,
    store: ParamStore,
    bank: EmbeddingBank,
    cd_block: Option<TransformerParams>,
    nd_block: Option<TransformerParams>,
    fusion: Affine2,
    recon_heads: Vec<(ParamId, ParamId)>,
    task_heads: Vec<Affine2>,
    projections: Vec<Tensor>,
}

fn summary_width(schema: &FeatureSchema, layout: &Layout) -> usize {
    let sc: usize = layout
        .cs
        .iter()
        .map(|&i| schema.features[i].vocab_len().min(SUMMARY_ONE_HOT_CAP))
        .sum();
    layout.ns.len() + sc + layout.nd.len() + layout.cd.len()
}

impl Table2VecModel {
    pub fn new(
        schema: FeatureSchema,
        config: ModelConfig,
        tasks: Vec<TaskSpec>,
        seed: u64,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&schema);
        let n_branch_features = layout.cs.len() + layout.ns.len() + layout.cd.len() + layout.nd.len();
        if n_branch_features == 0 {
            return Err(ModelError::InvalidConfig("schema has no features".into()));
        }
        if tasks.iter().any(|t| t.classes < 2) {
            return Err(ModelError::InvalidConfig("tasks need at least two classes".into()));
        }
        let d = config.transformer.n_e;
        let mut rng = substream(seed, "init");
        let mut store = ParamStore::new();
        let vocab: Vec<usize> = layout
            .cs
            .iter()
            .chain(&layout.cd)
            .map(|&i| schema.features[i].vocab_len())
            .collect();
        let bank = EmbeddingBank::new(
            &mut store,
            "bank",
            &vocab,
            layout.ns.len() + layout.nd.len(),
            d,
            &mut rng,
        );
        let cd_block =
            (!layout.cd.is_empty()).then(|| TransformerParams::new(&mut store, "cd", &config.transformer, &mut rng));
        let nd_block =
            (!layout.nd.is_empty()).then(|| TransformerParams::new(&mut store, "nd", &config.transformer, &mut rng));
        let r = config.representation_width;
        let fusion = Affine2::new(&mut store, "fusion", [4 * d + 4, config.fusion_hidden, r], &mut rng);
        let rec = &config.reconstruction;
        let recon_heads = (0..rec.count)
            .map(|i| {
                let w = store.add(
                    format!("recon.{i}.w"),
                    &[r, rec.width],
                    Init::XavierUniform {
                        fan_in: r,
                        fan_out: rec.width,
                    },
                    &mut rng,
                );
                let b = store.add(format!("recon.{i}.b"), &[rec.width], Init::Zeros, &mut rng);
                (w, b)
            })
            .collect();
        let task_heads = tasks
            .iter()
            .map(|t| {
                Affine2::new(
                    &mut store,
                    &format!("task.{}", t.name),
                    [r, config.task_hidden, t.classes],
                    &mut rng,
                )
            })
            .collect();
        let dim = summary_width(&schema, &layout);
        let mut prng = substream(seed, "projections");
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("positive std");
        let projections = (0..rec.count)
            .map(|_| {
                let data = (0..dim * rec.width).map(|_| normal.sample(&mut prng)).collect();
                Tensor::new(vec![dim, rec.width], data).expect("positive dims")
            })
            .collect();
        Ok(Self {
            schema,
            config,
            tasks,
            seed,
            layout,
            store,
            bank,
            cd_block,
            nd_block,
            fusion,
            recon_heads,
            task_heads,
            projections,
        })
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn representation_width(&self) -> usize {
        self.config.representation_width
    }

    pub fn task_index(&self, task: &str) -> Result<usize, ModelError> {
        self.tasks
            .iter()
            .position(|t| t.name == task)
            .ok_or_else(|| ModelError::UnknownTask(task.to_string()))
    }

    /// Length of the leading static part of [`EncodedCustomer::summary`]
    /// (normalized static numericals and static categorical one-hots).
    pub fn static_summary_width(&self) -> usize {
        summary_width(&self.schema, &self.layout) - self.layout.nd.len() - self.layout.cd.len()
    }

    /// Frozen projection matrices, `summary_width x d_rec` each.
    pub fn projections(&self) -> &[Tensor] {
        &self.projections
    }

    /// For each schema feature, its column in `table`.
    pub fn column_map(&self, table: &BigTable) -> Result<Vec<usize>, ModelError> {
        if table.num_features() != self.schema.features.len() {
            return Err(ModelError::SchemaMismatch(format!(
                "table has {} features, model expects {}",
                table.num_features(),
                self.schema.features.len()
            )));
        }
        self.schema
            .features
            .iter()
            .map(|f| {
                table
                    .feature_index(&f.name)
                    .ok_or_else(|| ModelError::SchemaMismatch(format!("missing feature {}", f.name)))
            })
            .collect()
    }

    /// Encodes chronologically ordered records whose cells follow the table
    /// columns in `columns`.
    pub fn encode_records(&self, records: &[Record], columns: &[usize]) -> EncodedCustomer {
        let spec = |i: usize| -> &FeatureSpec { &self.schema.features[i] };
        let cell = |r: &'_ Record, i: usize| -> CellValue { r.cells[columns[i]].clone() };
        let last_observed = |i: usize| -> CellValue {
            records
                .iter()
                .rev()
                .map(|r| cell(r, i))
                .find(|c| !c.is_missing())
                .unwrap_or(CellValue::Missing)
        };
        let l = &self.layout;
        let cs_ids: Vec<usize> = l.cs.iter().map(|&i| spec(i).token_id(&last_observed(i))).collect();
        let ns_values: Vec<f64> =
            l.ns.iter()
                .map(|&i| spec(i).normalized(&last_observed(i)).unwrap_or(0.0))
                .collect();
        let keep = records.len().min(self.config.transformer.n_s);
        let window = &records[records.len() - keep..];
        let cd_ids: Vec<Vec<usize>> = window
            .iter()
            .map(|r| l.cd.iter().map(|&i| spec(i).token_id(&cell(r, i))).collect())
            .collect();
        let nd_values: Vec<Vec<f64>> = window
            .iter()
            .map(|r| {
                l.nd.iter()
                    .map(|&i| spec(i).normalized(&cell(r, i)).unwrap_or(0.0))
                    .collect()
            })
            .collect();
        let any_observed =
            |idx: &[usize], rows: &[Record]| idx.iter().any(|&i| rows.iter().any(|r| !cell(r, i).is_missing()));
        let bit = |b: bool| if b { 1.0 } else { 0.0 };
        let presence = [
            bit(any_observed(&l.cs, records)),
            bit(any_observed(&l.ns, records)),
            bit(any_observed(&l.cd, window)),
            bit(any_observed(&l.nd, window)),
        ];

        let mut summary = ns_values.clone();
        for (k, &i) in l.cs.iter().enumerate() {
            let slots = spec(i).vocab_len().min(SUMMARY_ONE_HOT_CAP);
            let mut one_hot = vec![0.0; slots];
            one_hot[cs_ids[k].min(slots - 1)] = 1.0;
            summary.extend(one_hot);
        }
        for &i in &l.nd {
            let vals: Vec<f64> = records.iter().filter_map(|r| spec(i).normalized(&cell(r, i))).collect();
            summary.push(if vals.is_empty() {
                0.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            });
        }
        for &i in &l.cd {
            let keys: Vec<Option<String>> = records.iter().map(|r| token_key(&cell(r, i))).collect();
            let changes = keys.windows(2).filter(|w| w[0] != w[1]).count();
            summary.push(if keys.len() < 2 {
                0.0
            } else {
                changes as f64 / (keys.len() - 1) as f64
            });
        }
        EncodedCustomer {
            cs_ids,
            ns_values,
            cd_ids,
            nd_values,
            presence,
            summary,
        }
    }

    /// Encodes every customer of `table` after ordering its records.
    pub fn encode_table(&self, table: &BigTable) -> Result<Vec<EncodedCustomer>, ModelError> {
        let columns = self.column_map(table)?;
        let ordered;
        let table = if table.date_column().is_some() {
            ordered = order_records(table)?;
            &ordered
        } else {
            table
        };
        Ok((0..table.num_customers())
            .map(|c| self.encode_records(table.records(c), &columns))
            .collect())
    }

    /// Reconstruction targets `G_r^T summary` for one customer.
    pub fn reconstruction_targets(&self, summary: &[f64]) -> Vec<Vec<f64>> {
        reconstruction_targets(&self.projections, summary)
    }

    fn dynamic_branch(
        &self,
        g: &mut Graph,
        batch: &[&EncodedCustomer],
        block: &TransformerParams,
        seq: Var,
    ) -> Result<(Var, Var, f64), ModelError> {
        let c = &self.config.transformer;
        let lengths: Vec<usize> = batch.iter().map(|e| e.steps().clamp(1, c.n_s)).collect();
        let act = act_run(g, &self.store, block, c, seq, &lengths)?;
        let e = dynamic_embed(g, &self.store, block, c, act.state)?;
        let mut keep = vec![0.0; batch.len() * c.n_e];
        for (b, enc) in batch.iter().enumerate() {
            if enc.steps() > 0 {
                keep[b * c.n_e..(b + 1) * c.n_e].fill(1.0);
            }
        }
        let keep = g.constant(Tensor::new(vec![batch.len(), c.n_e], keep)?);
        Ok((g.mul(e, keep)?, act.penalty, act.mean_steps))
    }

    /// Batched forward pass. Dropout is active when `g` is in training mode.
    pub fn forward(&self, g: &mut Graph, batch: &[&EncodedCustomer]) -> Result<ForwardOutput, ModelError> {
        let b = batch.len();
        if b == 0 {
            return Err(NumericError::EmptyInput("forward").into());
        }
        let c = &self.config.transformer;
        let (d, n_s) = (c.n_e, c.n_s);
        let l = &self.layout;
        let zeros = |g: &mut Graph| g.constant(Tensor::zeros(&[b, d]));

        let v_cs = if l.cs.is_empty() {
            zeros(g)
        } else {
            let ids: Vec<Vec<usize>> = (0..l.cs.len())
                .map(|j| batch.iter().map(|e| e.cs_ids[j]).collect())
                .collect();
            let tables: Vec<usize> = (0..l.cs.len()).collect();
            let e = self.bank.categorical_embed_batch(g, &self.store, &tables, &ids)?;
            g.max_axis(e, 1)?
        };
        let v_ns = if l.ns.is_empty() {
            zeros(g)
        } else {
            let values: Vec<f64> = batch.iter().flat_map(|e| e.ns_values.iter().copied()).collect();
            let rows: Vec<usize> = (0..l.ns.len()).collect();
            let e = self
                .bank
                .positional_numeric_embed_batch(g, &self.store, &rows, &values, b)?;
            g.max_axis(e, 1)?
        };

        let mut ponder: Option<Var> = None;
        let mut steps = Vec::new();
        let e_cd = match &self.cd_block {
            None => zeros(g),
            Some(block) => {
                let n_cs = l.cs.len();
                let ids: Vec<Vec<usize>> = (0..l.cd.len())
                    .map(|j| {
                        batch
                            .iter()
                            .flat_map(|e| (0..n_s).map(move |t| e.cd_ids.get(t).map_or(MISSING_TOKEN, |r| r[j])))
                            .collect()
                    })
                    .collect();
                let tables: Vec<usize> = (n_cs..n_cs + l.cd.len()).collect();
                let e = self.bank.categorical_embed_batch(g, &self.store, &tables, &ids)?;
                let per_record = g.max_axis(e, 1)?;
                let seq = g.reshape(per_record, vec![b, n_s, d])?;
                let (v, pen, ms) = self.dynamic_branch(g, batch, block, seq)?;
                ponder = Some(pen);
                steps.push(ms);
                v
            }
        };
        let e_nd = match &self.nd_block {
            None => zeros(g),
            Some(block) => {
                let n_nd = l.nd.len();
                let values: Vec<f64> = batch
                    .iter()
                    .flat_map(|e| {
                        (0..n_s).flat_map(move |t| (0..n_nd).map(move |j| e.nd_values.get(t).map_or(0.0, |r| r[j])))
                    })
                    .collect();
                let rows: Vec<usize> = (l.ns.len()..l.ns.len() + n_nd).collect();
                let e = self
                    .bank
                    .positional_numeric_embed_batch(g, &self.store, &rows, &values, b * n_s)?;
                let per_record = g.max_axis(e, 1)?;
                let seq = g.reshape(per_record, vec![b, n_s, d])?;
                let (v, pen, ms) = self.dynamic_branch(g, batch, block, seq)?;
                ponder = Some(match ponder {
                    Some(p) => g.add(p, pen)?,
                    None => pen,
                });
                steps.push(ms);
                v
            }
        };
        let presence = g.constant(Tensor::new(
            vec![b, 4],
            batch.iter().flat_map(|e| e.presence).collect(),
        )?);
        let h = g.concat(&[v_cs, v_ns, e_cd, e_nd, presence], 1)?;
        let representation = self.fusion.apply(g, &self.store, h)?;

        let mut reconstructions = Vec::with_capacity(self.recon_heads.len());
        for &(w, bias) in &self.recon_heads {
            let (wv, bv) = (g.param(&self.store, w), g.param(&self.store, bias));
            let o = g.matmul(representation, wv)?;
            reconstructions.push(g.add(o, bv)?);
        }
        let logits = self
            .task_heads
            .iter()
            .map(|head| head.apply(g, &self.store, representation))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ForwardOutput {
            representation,
            reconstructions,
            logits,
            ponder_penalty: ponder,
            mean_steps: (!steps.is_empty()).then(|| steps.iter().sum::<f64>() / steps.len() as f64),
        })
    }

    /// Builds the joint loss of a batch on `g`.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        batch: &[&Example],
        class_weights: &[Vec<f64>],
        config: &TrainConfig,
    ) -> Result<(Var, LossBreakdown, ForwardOutput), ModelError> {
        let encoded: Vec<&EncodedCustomer> = batch.iter().map(|e| &e.customer).collect();
        let out = self.forward(g, &encoded)?;
        let rec = &self.config.reconstruction;
        let targets: Vec<Tensor> = (0..rec.count)
            .map(|r| {
                let data = batch
                    .iter()
                    .flat_map(|e| self.reconstruction_targets(&e.customer.summary).swap_remove(r))
                    .collect();
                Tensor::new(vec![batch.len(), rec.width], data)
            })
            .collect::<Result<_, _>>()?;
        let labels: Vec<Vec<Option<usize>>> = (0..self.tasks.len())
            .map(|t| batch.iter().map(|e| e.labels[t]).collect())
            .collect();
        let weights: Vec<Vec<f64>> = (0..self.tasks.len())
            .map(|t| {
                batch
                    .iter()
                    .map(|e| e.labels[t].map_or(0.0, |y| class_weights[t].get(y).copied().unwrap_or(0.0)))
                    .collect()
            })
            .collect();
        let task_weights: Vec<f64> = self.tasks.iter().map(|t| config.task_weight(&t.name)).collect();
        let (loss, breakdown) = joint_loss(
            g,
            &out.reconstructions,
            &targets,
            config.reconstruction_weight,
            &out.logits,
            &labels,
            &weights,
            &task_weights,
            out.ponder_penalty,
        )?;
        Ok((loss, breakdown, out))
    }

    /// Representations of `customers` in evaluation mode, `batch_size` at a time.
    pub fn represent(&self, customers: &[EncodedCustomer], batch_size: usize) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut out = Vec::with_capacity(customers.len());
        for chunk in customers.chunks(batch_size.max(1)) {
            let refs: Vec<&EncodedCustomer> = chunk.iter().collect();
            let mut g = Graph::eval();
            let f = self.forward(&mut g, &refs)?;
            let v = g.value(f.representation);
            out.extend((0..chunk.len()).map(|i| v.row(i).to_vec()));
        }
        Ok(out)
    }

    /// Class probabilities of `task` in evaluation mode.
    pub fn predict(
        &self,
        customers: &[EncodedCustomer],
        task: &str,
        batch_size: usize,
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        let t = self.task_index(task)?;
        let mut out = Vec::with_capacity(customers.len());
        for chunk in customers.chunks(batch_size.max(1)) {
            let refs: Vec<&EncodedCustomer> = chunk.iter().collect();
            let mut g = Graph::eval();
            let f = self.forward(&mut g, &refs)?;
            let probs = g.softmax(f.logits[t], 1)?;
            let v = g.value(probs);
            out.extend((0..chunk.len()).map(|i| v.row(i).to_vec()));
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            seed: self.seed,
            config: self.config.clone(),
            schema: self.schema.clone(),
            tasks: self.tasks.clone(),
            params: ParamCheckpoint::from_store(&self.store),
        }
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self, ModelError> {
        if ckpt.format != MODEL_FORMAT || ckpt.version != MODEL_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let mut model = Self::new(ckpt.schema.clone(), ckpt.config.clone(), ckpt.tasks.clone(), ckpt.seed)?;
        ckpt.params.load_into(&mut model.store)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        serde_json::to_writer(&mut w, &self.to_checkpoint())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let file = std::fs::File::open(path)?;
        let ckpt: ModelCheckpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        Self::from_checkpoint(&ckpt)
    }
}

/// `G_r^T x` for each projection `G_r` (`dim x width`).
pub fn reconstruction_targets(projections: &[Tensor], summary: &[f64]) -> Vec<Vec<f64>> {
    projections
        .iter()
        .map(|p| {
            let (dim, width) = (p.shape()[0], p.shape()[1]);
            assert_eq!(dim, summary.len(), "summary width");
            (0..width)
                .map(|j| (0..dim).map(|i| p.get2(i, j) * summary[i]).sum())
                .collect()
        })
        .collect()
}

/// Inverse-frequency weights `n / (classes_present * n_c)`; absent classes weigh 0.
pub fn class_weights(labels: &[Option<usize>], classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    for y in labels.iter().flatten() {
        if *y < classes {
            counts[*y] += 1;
        }
    }
    let n: usize = counts.iter().sum();
    let present = counts.iter().filter(|&&c| c > 0).count();
    counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { n as f64 / (present * c) as f64 })
        .collect()
}

/// Labels of `task` as class indices.
fn task_labels(table: &BigTable, task: &str) -> Result<Vec<Option<usize>>, ModelError> {
    Ok(table
        .labels(task)
        .ok_or_else(|| ModelError::UnknownTask(task.to_string()))?
        .iter()
        .map(|l| l.map(|v| v as usize))
        .collect())
}

/// Builds a model for `schema`, then runs mini-batch Adam on the joint loss.
/// The returned model holds the parameters of the epoch with the lowest
/// validation loss (training loss when there is no validation split).
pub fn train(
    table: &BigTable,
    schema: &FeatureSchema,
    tasks: &[String],
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<(Table2VecModel, Vec<EpochLog>), ModelError> {
    config.validate()?;
    let label_columns = tasks
        .iter()
        .map(|t| task_labels(table, t))
        .collect::<Result<Vec<_>, _>>()?;
    let specs: Vec<TaskSpec> = tasks
        .iter()
        .zip(&label_columns)
        .map(|(name, col)| TaskSpec {
            name: name.clone(),
            classes: col.iter().flatten().max().map_or(2, |m| (m + 1).max(2)),
        })
        .collect();
    let mut model = Table2VecModel::new(schema.clone(), model_config.clone(), specs, config.seed)?;
    let encoded = model.encode_table(table)?;
    let examples: Vec<Example> = encoded
        .into_iter()
        .enumerate()
        .map(|(c, customer)| Example {
            customer,
            labels: label_columns.iter().map(|col| col[c]).collect(),
        })
        .collect();

    let n = examples.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(config.seed, "split"));
    let mut n_val = (config.validation_fraction * n as f64).round() as usize;
    if config.validation_fraction > 0.0 && n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    }
    let (val_idx, train_idx) = order.split_at(n_val);
    let (val_idx, train_idx) = (val_idx.to_vec(), train_idx.to_vec());

    let any_label = train_idx
        .iter()
        .any(|&i| examples[i].labels.iter().any(Option::is_some));
    if config.reconstruction_weight == 0.0 || model.config.reconstruction.count == 0 {
        if tasks.is_empty() {
            return Err(ModelError::AllTermsDisabled);
        }
        if !any_label {
            return Err(ModelError::NoLabeledCustomers);
        }
    }
    let weights: Vec<Vec<f64>> = model
        .tasks
        .iter()
        .enumerate()
        .map(|(t, spec)| {
            if config.class_weighting {
                let ys: Vec<Option<usize>> = train_idx.iter().map(|&i| examples[i].labels[t]).collect();
                class_weights(&ys, spec.classes)
            } else {
                vec![1.0; spec.classes]
            }
        })
        .collect();

    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
        &model.store,
    );
    let mut log = Vec::new();
    let mut best: Option<(f64, ParamStore)> = None;
    for epoch in 1..=config.epochs {
        let mut idx = train_idx.clone();
        idx.shuffle(&mut substream(config.seed, &format!("batches-{epoch}")));
        let (mut loss_sum, mut recon_sum, mut steps_sum, mut steps_n) = (0.0, 0.0, 0.0, 0usize);
        for (k, chunk) in idx.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let mut g = Graph::new(true, derive_seed(config.seed, &format!("dropout-{epoch}-{k}")));
            let (loss, parts, out) = model.batch_loss(&mut g, &batch, &weights, config)?;
            g.backward(loss)?.accumulate_into(&mut model.store);
            adam.step(&mut model.store)?;
            loss_sum += parts.total * chunk.len() as f64;
            recon_sum += parts.reconstruction * chunk.len() as f64;
            if let Some(s) = out.mean_steps {
                steps_sum += s;
                steps_n += 1;
            }
        }
        let n_train = train_idx.len().max(1) as f64;
        let train_loss = loss_sum / n_train;
        let (validation_loss, validation_auc) = if val_idx.is_empty() {
            (None, BTreeMap::new())
        } else {
            let (l, a) = evaluate_split(&model, &examples, &val_idx, &weights, config)?;
            (Some(l), a)
        };
        let score = validation_loss.unwrap_or(train_loss);
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, model.store.clone()));
        }
        log.push(EpochLog {
            epoch,
            train_loss,
            validation_loss,
            reconstruction_loss: recon_sum / n_train,
            mean_ponder_steps: (steps_n > 0).then(|| steps_sum / steps_n as f64),
            validation_auc,
        });
    }
    if let Some((_, store)) = best {
        model.store = store;
    }
    Ok((model, log))
}

type SplitScores = (f64, BTreeMap<String, Option<f64>>);

fn evaluate_split(
    model: &Table2VecModel,
    examples: &[Example],
    idx: &[usize],
    weights: &[Vec<f64>],
    config: &TrainConfig,
) -> Result<SplitScores, ModelError> {
    let mut loss_sum = 0.0;
    let mut probs: Vec<Vec<f64>> = vec![Vec::new(); model.tasks.len()];
    for chunk in idx.chunks(config.batch_size) {
        let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
        let mut g = Graph::eval();
        let (_, parts, out) = model.batch_loss(&mut g, &batch, weights, config)?;
        loss_sum += parts.total * chunk.len() as f64;
        for (t, &logits) in out.logits.iter().enumerate() {
            let p = g.softmax(logits, 1)?;
            let v = g.value(p);
            probs[t].extend((0..chunk.len()).map(|i| v.row(i)[1]));
        }
    }
    let mut aucs = BTreeMap::new();
    for (t, spec) in model.tasks.iter().enumerate() {
        let (scores, labels): (Vec<f64>, Vec<bool>) = idx
            .iter()
            .zip(&probs[t])
            .filter_map(|(&i, &p)| examples[i].labels[t].map(|y| (p, y != 0)))
            .unzip();
        let a = if spec.classes == 2 {
            auc(&scores, &labels).ok()
        } else {
            None
        };
        aucs.insert(spec.name.clone(), a);
    }
    Ok((loss_sum / idx.len() as f64, aucs))
}
