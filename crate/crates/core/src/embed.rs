//! Branch embeddings: categorical lookup, position-based numerical embedding
//! and columnwise max aggregation.

use rand::Rng;

use crate::numeric::{Graph, Init, NumericError, ParamId, ParamStore, Tensor, Var};

/// Standard deviation used for every embedding table.
pub const EMBEDDING_INIT_STD: f64 = 0.02;

/// Lookup tables for categorical features and the per-position rows `M_i`
/// for numerical features, all of width `width`.
#[derive(Debug, Clone)]
pub struct EmbeddingBank {
    width: usize,
    categorical: Vec<ParamId>,
    numeric: Option<ParamId>,
    numeric_rows: usize,
}

impl EmbeddingBank {
    /// One lookup table per entry of `vocab_sizes` (in the given order) and a
    /// `numeric_features x width` matrix `M`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        vocab_sizes: &[usize],
        numeric_features: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        let init = Init::Normal {
            std: EMBEDDING_INIT_STD,
        };
        let categorical = vocab_sizes
            .iter()
            .enumerate()
            .map(|(j, &v)| store.add(format!("{prefix}.cat.{j}"), &[v, width], init, rng))
            .collect();
        let numeric =
            (numeric_features > 0).then(|| store.add(format!("{prefix}.num"), &[numeric_features, width], init, rng));
        Self {
            width,
            categorical,
            numeric,
            numeric_rows: numeric_features,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn categorical_tables(&self) -> &[ParamId] {
        &self.categorical
    }

    pub fn numeric_table(&self) -> Option<ParamId> {
        self.numeric
    }

    pub fn numeric_rows(&self) -> usize {
        self.numeric_rows
    }

    fn table(&self, j: usize) -> Result<ParamId, NumericError> {
        self.categorical.get(j).copied().ok_or(NumericError::IndexOutOfRange {
            op: "categorical_embed",
            index: j,
            bound: self.categorical.len(),
        })
    }

    /// Row `j` of the result is table `tables[j]` looked up at `ids[j]`.
    pub fn categorical_embed(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tables: &[usize],
        ids: &[usize],
    ) -> Result<Var, NumericError> {
        if tables.len() != ids.len() {
            return Err(NumericError::ShapeMismatch {
                op: "categorical_embed",
                lhs: vec![tables.len()],
                rhs: vec![ids.len()],
            });
        }
        let rows = tables
            .iter()
            .zip(ids)
            .map(|(&j, &id)| {
                let t = g.param(store, self.table(j)?);
                g.gather(t, &[id])
            })
            .collect::<Result<Vec<_>, _>>()?;
        g.concat(&rows, 0)
    }

    /// `[n, F, width]` lookups: `ids[f][i]` indexes table `tables[f]` for item `i`.
    pub fn categorical_embed_batch(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tables: &[usize],
        ids: &[Vec<usize>],
    ) -> Result<Var, NumericError> {
        if tables.len() != ids.len() || tables.is_empty() {
            return Err(NumericError::ShapeMismatch {
                op: "categorical_embed_batch",
                lhs: vec![tables.len()],
                rhs: vec![ids.len()],
            });
        }
        let per_feature = tables
            .iter()
            .zip(ids)
            .map(|(&j, col)| {
                let t = g.param(store, self.table(j)?);
                g.gather(t, col)
            })
            .collect::<Result<Vec<_>, _>>()?;
        g.stack(&per_feature, 1)
    }

    /// Row `i` is `values[i] * M[rows[i]]`; a zero value gives the zero row.
    pub fn positional_numeric_embed(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        rows: &[usize],
        values: &[f64],
    ) -> Result<Var, NumericError> {
        let e = self.positional_numeric_embed_batch(g, store, rows, values, 1)?;
        g.reshape(e, vec![rows.len(), self.width])
    }

    /// `values` is `[n, rows.len()]` row-major; the result is `[n, rows.len(), width]`.
    pub fn positional_numeric_embed_batch(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        rows: &[usize],
        values: &[f64],
        n: usize,
    ) -> Result<Var, NumericError> {
        let m = self
            .numeric
            .ok_or(NumericError::EmptyInput("positional_numeric_embed"))?;
        if rows.is_empty() || values.len() != n * rows.len() {
            return Err(NumericError::ShapeMismatch {
                op: "positional_numeric_embed",
                lhs: vec![n, rows.len()],
                rhs: vec![values.len()],
            });
        }
        let table = g.param(store, m);
        let selected = g.gather(table, rows)?;
        let v = g.constant(Tensor::new(vec![n, rows.len()], values.to_vec())?);
        g.positional_embed(v, selected)
    }
}

/// Result of [`max_concat`].
#[derive(Debug, Clone, Copy)]
pub struct MaxConcat {
    pub vector: Var,
    /// True when no valid row existed and `vector` is the zero vector.
    pub degenerate: bool,
}

/// Columnwise maximum over the valid rows of `e` (`[rows, d]`). Ties go to the
/// lowest row index. No valid row yields the zero vector flagged degenerate.
pub fn max_concat(g: &mut Graph, e: Var, mask: Option<&[bool]>) -> Result<MaxConcat, NumericError> {
    let shape = g.shape(e).to_vec();
    if shape.len() != 2 {
        return Err(NumericError::InvalidShape(shape));
    }
    let valid: Vec<usize> = match mask {
        Some(m) if m.len() != shape[0] => {
            return Err(NumericError::ShapeMismatch {
                op: "max_concat",
                lhs: shape,
                rhs: vec![m.len()],
            })
        }
        Some(m) => (0..shape[0]).filter(|&i| m[i]).collect(),
        None => (0..shape[0]).collect(),
    };
    if valid.is_empty() {
        return Ok(MaxConcat {
            vector: g.constant(Tensor::zeros(&[shape[1]])),
            degenerate: true,
        });
    }
    let rows = if valid.len() == shape[0] {
        e
    } else {
        g.gather(e, &valid)?
    };
    Ok(MaxConcat {
        vector: g.max_axis(rows, 0)?,
        degenerate: false,
    })
}

/// Batched [`max_concat`] over axis 1 of `[n, rows, d]` with every row valid.
pub fn max_concat_batch(g: &mut Graph, e: Var) -> Result<Var, NumericError> {
    g.max_axis(e, 1)
}
