use serde::{Deserialize, Serialize};

use super::{Init, NumericError, ParamStore, Tensor};

pub const PARAMS_FORMAT: &str = "table2vec-params";
pub const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Versioned name -> (shape, row-major values) map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCheckpoint {
    pub format: String,
    pub version: u32,
    pub params: Vec<ParamRecord>,
}

impl ParamCheckpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        Self {
            format: PARAMS_FORMAT.to_string(),
            version: PARAMS_VERSION,
            params: store
                .iter()
                .map(|(_, p)| ParamRecord {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    values: p.value.data().to_vec(),
                })
                .collect(),
        }
    }

    fn check_header(&self) -> Result<(), NumericError> {
        if self.format != PARAMS_FORMAT || self.version != PARAMS_VERSION {
            return Err(NumericError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        Ok(())
    }

    /// Overwrites the values of an already laid-out store.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<(), NumericError> {
        self.check_header()?;
        if self.params.len() != store.len() {
            return Err(NumericError::Checkpoint(format!(
                "checkpoint holds {} parameters, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for rec in &self.params {
            let target = store.value_mut(&rec.name)?;
            if target.shape() != rec.shape.as_slice() {
                return Err(NumericError::ShapeMismatch {
                    op: "checkpoint",
                    lhs: target.shape().to_vec(),
                    rhs: rec.shape.clone(),
                });
            }
            *target = Tensor::new(rec.shape.clone(), rec.values.clone())?;
        }
        Ok(())
    }

    /// Builds a fresh store in checkpoint order.
    pub fn to_store(&self) -> Result<ParamStore, NumericError> {
        self.check_header()?;
        let mut store = ParamStore::new();
        for rec in &self.params {
            let t = Tensor::new(rec.shape.clone(), rec.values.clone())?;
            store.insert(rec.name.clone(), t, Init::Zeros);
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn json_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        store.add("a", &[3, 2], Init::Normal { std: 0.7 }, &mut rng);
        store.add("b", &[5], Init::XavierUniform { fan_in: 5, fan_out: 1 }, &mut rng);
        let json = serde_json::to_string(&ParamCheckpoint::from_store(&store)).unwrap();
        let back: ParamCheckpoint = serde_json::from_str(&json).unwrap();
        let restored = back.to_store().unwrap();
        for ((_, a), (_, b)) in store.iter().zip(restored.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn rejects_foreign_header() {
        let ck = ParamCheckpoint {
            format: "other".into(),
            version: 1,
            params: vec![],
        };
        assert!(ck.to_store().is_err());
    }
}
