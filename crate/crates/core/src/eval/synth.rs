use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::rng::substream;
use crate::table::{BigTable, CellValue, Record};

const EPOCH_2020: i64 = 1_577_836_800;
const DAY: i64 = 86_400;
const SC_TOKENS: [&str; 4] = ["basic", "bronze", "silver", "gold"];
const DC_TOKENS: [&str; 4] = ["web", "branch", "phone", "app"];
const EVENT_TOKENS: [&str; 4] = ["purchase", "login", "inquiry", "transfer"];

/// The dynamic pattern that decides the latent class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedSignal {
    /// Name of the dynamic categorical feature carrying the signal.
    pub feature: String,
    pub token: String,
    /// Latent positives carry at least this many occurrences; negatives fewer.
    pub min_occurrences: usize,
    /// Probability that the observed label disagrees with the latent class.
    pub noise: f64,
}

impl Default for PlantedSignal {
    fn default() -> Self {
        Self {
            feature: "event".into(),
            token: "cancel".into(),
            min_occurrences: 2,
            noise: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub customers: usize,
    pub static_numerical: usize,
    pub dynamic_numerical: usize,
    pub static_categorical: usize,
    /// Dynamic categorical features, the planted one included.
    pub dynamic_categorical: usize,
    pub records_min: usize,
    pub records_max: usize,
    pub positive_fraction: f64,
    /// Target of the table's feature missing ratio.
    pub missing_fraction: f64,
    /// Target of the table's structural missing ratio.
    pub structural_missing_fraction: f64,
    pub planted: PlantedSignal,
    pub task: String,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            customers: 2000,
            static_numerical: 2,
            dynamic_numerical: 2,
            static_categorical: 2,
            dynamic_categorical: 2,
            records_min: 4,
            records_max: 10,
            positive_fraction: 0.2,
            missing_fraction: 0.5,
            structural_missing_fraction: 0.15,
            planted: PlantedSignal::default(),
            task: "churn".into(),
            seed: 0,
        }
    }
}

/// Rates that realize the configured missing ratios in expectation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MissingRates {
    /// Per-(customer, feature) probability of a structurally missing feature.
    pub structural: f64,
    /// Per-cell probability of a missing value in a present feature.
    pub cell: f64,
    /// Probability of the latent positive class.
    pub latent_positive: f64,
}

/// Distribution of the number of planted tokens for one customer.
fn planted_count_probs(latent: bool, n: usize, m: usize) -> Vec<(usize, f64)> {
    if latent {
        vec![(m.min(n), 0.5), ((m + 1).min(n), 0.5)]
    } else if m >= 2 {
        vec![(0, 0.5), (1, 0.5)]
    } else {
        vec![(0, 1.0)]
    }
}

struct Expectations<'a> {
    c: &'a SynthConfig,
    pi: f64,
}

impl Expectations<'_> {
    fn lengths(&self) -> impl Iterator<Item = usize> {
        self.c.records_min..=self.c.records_max
    }

    fn n_lengths(&self) -> f64 {
        (self.c.records_max - self.c.records_min + 1) as f64
    }

    /// `E[p^n]`: chance that every cell of a present feature is missing.
    fn all_missing(&self, p: f64) -> f64 {
        self.lengths().map(|n| p.powi(n as i32)).sum::<f64>() / self.n_lengths()
    }

    /// `E[(n - c) / n]` and `P(c = 0)` over customers for the planted feature.
    fn planted_terms(&self) -> (f64, Vec<(usize, f64)>) {
        let m = self.c.planted.min_occurrences;
        let mut unprotected = 0.0;
        let mut zero_by_len = Vec::new();
        for n in self.lengths() {
            let mut zero = 0.0;
            for (latent, w) in [(true, self.pi), (false, 1.0 - self.pi)] {
                for (c, q) in planted_count_probs(latent, n, m) {
                    unprotected += w * q * (n - c) as f64 / n as f64;
                    if c == 0 {
                        zero += w * q;
                    }
                }
            }
            zero_by_len.push((n, zero));
        }
        (unprotected / self.n_lengths(), zero_by_len)
    }

    fn ratios(&self, q: f64, p: f64) -> (f64, f64) {
        let c = self.c;
        let a = (c.static_numerical + c.dynamic_numerical + c.dynamic_categorical - 1) as f64;
        let s = c.static_categorical as f64;
        let f = a + s + 1.0;
        let (unprotected, zero_by_len) = self.planted_terms();
        let planted_structural = zero_by_len.iter().map(|&(n, z)| z * p.powi(n as i32)).sum::<f64>() / self.n_lengths();
        let missing = (a * (q + (1.0 - q) * p) + s * q + p * unprotected) / f;
        let structural = (a * (q + (1.0 - q) * self.all_missing(p)) + s * q + planted_structural) / f;
        (missing, structural)
    }
}

fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::InfeasibleConfig(m));
        let fractions = [
            self.positive_fraction,
            self.missing_fraction,
            self.structural_missing_fraction,
            self.planted.noise,
        ];
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad("fractions must lie in [0, 1]".into());
        }
        if self.customers == 0 {
            return bad("need at least one customer".into());
        }
        if self.dynamic_categorical == 0 {
            return bad("the planted signal needs a dynamic categorical feature".into());
        }
        if self.records_min < 2 || self.records_min > self.records_max {
            return bad("records range must satisfy 2 <= min <= max".into());
        }
        if self.planted.min_occurrences == 0 || self.planted.min_occurrences > self.records_min {
            return bad("min_occurrences must lie in 1..=records_min".into());
        }
        if self.planted.noise >= 0.5 {
            return bad("noise must be below 0.5".into());
        }
        Ok(())
    }

    /// Solves for the latent positive rate and the two missingness rates.
    pub fn rates(&self) -> Result<MissingRates, EvalError> {
        self.validate()?;
        let eta = self.planted.noise;
        let pi = (self.positive_fraction - eta) / (1.0 - 2.0 * eta);
        if !(0.0..=1.0).contains(&pi) {
            return Err(EvalError::InfeasibleConfig(format!(
                "positive fraction {} unreachable with label noise {eta}",
                self.positive_fraction
            )));
        }
        let ex = Expectations { c: self, pi };
        let (target_m, target_s) = (self.missing_fraction, self.structural_missing_fraction);
        let tol = 1e-9;
        // Cell rate that hits the missing target for a given structural rate.
        let cell_for = |q: f64| -> Option<f64> {
            let lo = ex.ratios(q, 0.0).0;
            let hi = ex.ratios(q, 1.0).0;
            if target_m < lo - tol || target_m > hi + tol {
                return None;
            }
            Some(bisect(0.0, 1.0, |p| ex.ratios(q, p).0 - target_m).clamp(0.0, 1.0))
        };
        let feasible: Vec<f64> = (0..=1000)
            .map(|i| i as f64 / 1000.0)
            .filter(|&q| cell_for(q).is_some())
            .collect();
        let infeasible = || {
            EvalError::InfeasibleConfig(format!(
                "missing fraction {target_m} with structural fraction {target_s} cannot be realized"
            ))
        };
        let (&q_lo, &q_hi) = feasible.first().zip(feasible.last()).ok_or_else(infeasible)?;
        let gap = |q: f64| cell_for(q).map(|p| ex.ratios(q, p).1 - target_s).unwrap_or(f64::NAN);
        let q = if gap(q_lo) >= 0.0 {
            q_lo
        } else if gap(q_hi) <= 0.0 {
            q_hi
        } else {
            bisect(q_lo, q_hi, |q| {
                let g = gap(q);
                if g.is_nan() {
                    1.0
                } else {
                    g
                }
            })
        };
        let p = cell_for(q).ok_or_else(infeasible)?;
        let (m, s) = ex.ratios(q, p);
        if (m - target_m).abs() > 1e-6 || (s - target_s).abs() > 1e-6 {
            return Err(infeasible());
        }
        Ok(MissingRates {
            structural: q,
            cell: p,
            latent_positive: pi,
        })
    }

    pub fn feature_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        names.extend((0..self.static_numerical).map(|i| format!("sn_{i}")));
        names.extend((0..self.dynamic_numerical).map(|i| format!("dn_{i}")));
        names.extend((0..self.static_categorical).map(|i| format!("sc_{i}")));
        names.push(self.planted.feature.clone());
        names.extend((1..self.dynamic_categorical).map(|i| format!("dc_{i}")));
        names
    }
}

/// `n` flags with exactly `round(rate * n)` set, in random positions.
fn exact_mask<R: Rng + ?Sized>(rng: &mut R, n: usize, rate: f64) -> Vec<bool> {
    let k = ((rate * n as f64).round() as usize).min(n);
    let mut mask = vec![false; n];
    for i in sample(rng, n, k) {
        mask[i] = true;
    }
    mask
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Generates a labeled table whose measured missing and label ratios match
/// the config in expectation.
///
/// Static categorical features only go missing for whole customers, since a
/// missing token between two present ones would register as a change. The
/// planted feature is never structurally missing and its planted tokens are
/// never masked.
pub fn synth_generate(config: &SynthConfig) -> Result<BigTable, EvalError> {
    let rates = config.rates()?;
    let mut rng = substream(config.seed, "synth");
    let names = config.feature_names();
    let mut table = BigTable::new("customer_id", Some("date".into()), names.clone())?;
    table.add_task(config.task.clone());
    let (n_sn, n_dn, n_sc) = (
        config.static_numerical,
        config.dynamic_numerical,
        config.static_categorical,
    );
    let planted_col = n_sn + n_dn + n_sc;
    let value_dist = Normal::new(50.0, 15.0).expect("valid");
    let start_dist = Normal::new(100.0, 20.0).expect("valid");
    let step_dist = Normal::new(0.0, 10.0).expect("valid");
    let width = (config.customers as f64).log10().floor() as usize + 1;

    // Class, flip and structural assignments use exact counts so the measured
    // ratios only carry cell-level sampling noise.
    let n_cust = config.customers;
    let latent = exact_mask(&mut rng, n_cust, rates.latent_positive);
    let mut flipped = vec![false; n_cust];
    for class in [true, false] {
        let members: Vec<usize> = (0..n_cust).filter(|&u| latent[u] == class).collect();
        let flips = exact_mask(&mut rng, members.len(), config.planted.noise);
        for (k, &u) in members.iter().enumerate() {
            flipped[u] = flips[k];
        }
    }
    let structural_masks: Vec<Vec<bool>> = (0..names.len())
        .map(|_| exact_mask(&mut rng, n_cust, rates.structural))
        .collect();

    for u in 0..n_cust {
        let id = format!("c{:0width$}", u + 1);
        let n = rng.random_range(config.records_min..=config.records_max);
        let latent = latent[u];
        let label = latent ^ flipped[u];
        let mut cells = vec![vec![CellValue::Missing; names.len()]; n];

        for f in 0..names.len() {
            if f == planted_col {
                continue;
            }
            let structural = structural_masks[f][u];
            if f >= n_sn + n_dn && f < planted_col {
                let tok = SC_TOKENS[rng.random_range(0..SC_TOKENS.len())];
                if !structural {
                    for row in cells.iter_mut() {
                        row[f] = CellValue::Token(tok.into());
                    }
                }
                continue;
            }
            let mut level = start_dist.sample(&mut rng);
            let fixed = value_dist.sample(&mut rng);
            for row in cells.iter_mut() {
                let value = if f < n_sn {
                    CellValue::Number(round2(fixed))
                } else if f < n_sn + n_dn {
                    level += step_dist.sample(&mut rng);
                    CellValue::Number(round2(level))
                } else {
                    CellValue::Token(DC_TOKENS[rng.random_range(0..DC_TOKENS.len())].into())
                };
                let masked = rng.random_bool(rates.cell);
                if !structural && !masked {
                    row[f] = value;
                }
            }
        }

        let probs = planted_count_probs(latent, n, config.planted.min_occurrences);
        let count = if rng.random_bool(probs[0].1) {
            probs[0].0
        } else {
            probs[probs.len() - 1].0
        };
        let planted_at: Vec<usize> = sample(&mut rng, n, count).into_vec();
        for (t, row) in cells.iter_mut().enumerate() {
            let other = EVENT_TOKENS[rng.random_range(0..EVENT_TOKENS.len())];
            let masked = rng.random_bool(rates.cell);
            row[planted_col] = if planted_at.contains(&t) {
                CellValue::Token(config.planted.token.clone())
            } else if masked {
                CellValue::Missing
            } else {
                CellValue::Token(other.into())
            };
        }

        let mut date = EPOCH_2020 + rng.random_range(0..365) * DAY;
        for row in cells {
            table.push_record(
                &id,
                Record {
                    date: Some(date),
                    cells: row,
                },
            )?;
            date += rng.random_range(1..=30) * DAY;
        }
        table.set_label(&config.task, &id, Some(u32::from(label)))?;
    }
    Ok(table)
}

/// Latent-class oracle: does a customer's planted feature carry the pattern?
pub fn has_planted_pattern(table: &BigTable, customer: usize, signal: &PlantedSignal) -> bool {
    let Some(f) = table.feature_index(&signal.feature) else {
        return false;
    };
    table
        .column(customer, f)
        .filter(|c| matches!(c, CellValue::Token(t) if *t == signal.token))
        .count()
        >= signal.min_occurrences
}
