//! A deterministic, salted simulator of a Diffix-style query-based system.
//!
//! Answers go through syntax and mitigation checks, bucket suppression with
//! a noisy threshold, per-condition static and dynamic Gaussian noise and
//! rounding. All randomness is hash-seeded (see [`noise`]), so an instance
//! answers a repeated query identically even without its cache.

mod mitigation;
pub mod noise;

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TargetRecord};
use crate::query::{self, condition_bytes, Predicate, Query, QuerySyntax};

pub use mitigation::{
    build_shadow_table, is_isolating, MitigationConfig, ShadowTable, ISOLATING_RATIO,
    SHADOW_MAX_VALUES, SHADOW_MIN_USERS,
};
pub use noise::{
    condition_noise, no_condition_noise, noisy_threshold, seeded_gaussian, Salt, UsersetDigest,
};

/// Hard floor of the suppression rule.
pub const MIN_COUNT: f64 = 2.0;

/// Configuration shared by every instance of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QbsConfig {
    pub syntax: QuerySyntax,
    pub mitigations: MitigationConfig,
    /// When set, the limited syntax pins condition values to this record.
    pub target: Option<TargetRecord>,
}

impl Default for QbsConfig {
    fn default() -> Self {
        QbsConfig {
            syntax: QuerySyntax::full(),
            mitigations: MitigationConfig::default(),
            target: None,
        }
    }
}

impl QbsConfig {
    pub fn with_mitigations(mitigations: MitigationConfig) -> Self {
        QbsConfig {
            mitigations,
            ..QbsConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason", content = "attribute")]
pub enum Forbidden {
    Unsupported,
    Isolating(usize),
    ShadowTable(usize),
}

/// Trace of how an answer was produced.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AnswerTrace {
    Rejected(Forbidden),
    Suppressed { true_count: usize, threshold: f64 },
    Released { true_count: usize, noise: f64 },
}

impl AnswerTrace {
    pub fn unrounded(&self) -> f64 {
        match *self {
            AnswerTrace::Rejected(_) | AnswerTrace::Suppressed { .. } => 0.0,
            AnswerTrace::Released { true_count, noise } => true_count as f64 + noise,
        }
    }

    pub fn rounded(&self) -> i64 {
        self.unrounded().round() as i64
    }
}

/// One protected dataset behind a secret salt.
#[derive(Debug)]
pub struct QbsInstance {
    salt: Salt,
    dataset: Arc<Dataset>,
    config: Arc<QbsConfig>,
    shadow_table: Option<ShadowTable>,
    isolating: Vec<bool>,
    cache: RwLock<HashMap<Vec<u8>, i64>>,
    cache_enabled: AtomicBool,
    computations: AtomicU64,
}

impl QbsInstance {
    pub fn new(salt: Salt, dataset: impl Into<Arc<Dataset>>, config: impl Into<Arc<QbsConfig>>) -> Self {
        let dataset = dataset.into();
        let config = config.into();
        let shadow_table = config
            .mitigations
            .shadow_table
            .then(|| build_shadow_table(&dataset));
        let isolating = (0..dataset.schema().len())
            .map(|a| config.mitigations.isolating_attributes && is_isolating(&dataset, a))
            .collect();
        QbsInstance {
            salt,
            dataset,
            config,
            shadow_table,
            isolating,
            cache: RwLock::new(HashMap::new()),
            cache_enabled: AtomicBool::new(true),
            computations: AtomicU64::new(0),
        }
    }

    pub fn salt(&self) -> &Salt {
        &self.salt
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn config(&self) -> &QbsConfig {
        &self.config
    }

    pub fn shadow_table(&self) -> Option<&ShadowTable> {
        self.shadow_table.as_ref()
    }

    pub fn is_isolating(&self, attribute: usize) -> bool {
        self.isolating[attribute]
    }

    /// Number of answers computed from the data (cache misses).
    pub fn computations(&self) -> u64 {
        self.computations.load(Ordering::Relaxed)
    }

    pub fn set_cache_enabled(&self, enabled: bool) {
        self.cache_enabled.store(enabled, Ordering::Relaxed);
    }

    pub fn is_supported(&self, query: &Query) -> bool {
        query::is_supported(
            query,
            &self.config.syntax,
            self.dataset.schema(),
            self.config.target.as_ref(),
        )
    }

    /// Mitigations 1 and 2: `!=` and `IN` conditions on isolating
    /// attributes or with values outside the shadow table are forbidden.
    pub fn check_mitigations(&self, query: &Query) -> Result<(), Forbidden> {
        for c in query.conditions() {
            let values = match c.predicate {
                Predicate::Neq(x) => vec![x],
                Predicate::In(set) => set.to_vec(),
                _ => continue,
            };
            if self.isolating[c.attribute] {
                return Err(Forbidden::Isolating(c.attribute));
            }
            if let Some(table) = &self.shadow_table {
                if !values.iter().all(|&v| table.permits(c.attribute, v)) {
                    return Err(Forbidden::ShadowTable(c.attribute));
                }
            }
        }
        Ok(())
    }

    pub fn noisy_threshold(&self, userset: &[u64]) -> f64 {
        noisy_threshold(&self.salt, userset)
    }

    pub fn digest(&self, userset: &[u64]) -> UsersetDigest {
        if self.config.mitigations.stats_dynamic_seed {
            UsersetDigest::stats(userset)
        } else {
            UsersetDigest::xor(userset)
        }
    }

    /// Static and dynamic noise of one condition for a given userset.
    pub fn condition_noise(&self, condition: &query::Condition, userset: &[u64]) -> (f64, f64) {
        let bytes = condition_bytes(self.dataset.schema(), condition);
        condition_noise(&self.salt, &bytes, &self.digest(userset))
    }

    /// Runs the full pipeline without touching the cache.
    pub fn trace(&self, query: &Query) -> AnswerTrace {
        if !self.is_supported(query) {
            return AnswerTrace::Rejected(Forbidden::Unsupported);
        }
        if let Err(reason) = self.check_mitigations(query) {
            return AnswerTrace::Rejected(reason);
        }
        let userset = query::evaluate_userset(&self.dataset, query);
        let true_count = userset.len();
        let threshold = self.noisy_threshold(&userset);
        if true_count as f64 <= MIN_COUNT.max(threshold) {
            return AnswerTrace::Suppressed {
                true_count,
                threshold,
            };
        }
        let digest = self.digest(&userset);
        let schema = self.dataset.schema();
        let mut noise = 0.0;
        let mut conditions = 0;
        for c in query.conditions() {
            let (s, d) = condition_noise(&self.salt, &condition_bytes(schema, &c), &digest);
            noise += s + d;
            conditions += 1;
        }
        if conditions == 0 && self.config.mitigations.noise_when_no_conditions {
            let (s, d) = no_condition_noise(&self.salt, &digest);
            noise += s + d;
        }
        AnswerTrace::Released { true_count, noise }
    }

    /// Pre-rounding answer, for calibration tests.
    #[doc(hidden)]
    pub fn answer_unrounded(&self, query: &Query) -> f64 {
        self.trace(query).unrounded()
    }

    /// The released integer answer. Unsupported, forbidden and suppressed
    /// queries answer 0.
    pub fn answer(&self, query: &Query) -> i64 {
        if !self.is_supported(query) {
            return 0;
        }
        if !self.cache_enabled.load(Ordering::Relaxed) {
            self.computations.fetch_add(1, Ordering::Relaxed);
            return self.trace(query).rounded();
        }
        let key = query::canonical_form(self.dataset.schema(), query);
        if let Some(&cached) = self.cache.read().expect("cache lock").get(&key) {
            return cached;
        }
        self.computations.fetch_add(1, Ordering::Relaxed);
        let value = self.trace(query).rounded();
        // deterministic answers make racing first writers agree
        *self
            .cache
            .write()
            .expect("cache lock")
            .entry(key)
            .or_insert(value)
    }
}

/// Anything that answers COUNT queries over a dataset.
pub trait CountingSystem: Send + Sync {
    fn answer(&self, query: &Query) -> i64;
    fn dataset(&self) -> &Dataset;
    /// Answers computed from the data rather than served from a cache.
    fn computations(&self) -> u64;
}

impl CountingSystem for QbsInstance {
    fn answer(&self, query: &Query) -> i64 {
        QbsInstance::answer(self, query)
    }

    fn dataset(&self) -> &Dataset {
        QbsInstance::dataset(self)
    }

    fn computations(&self) -> u64 {
        QbsInstance::computations(self)
    }
}

/// Exact counts with no checks, noise or suppression. A reference system
/// for tests and sanity checks.
#[derive(Debug)]
pub struct ExactCount {
    dataset: Arc<Dataset>,
    computations: AtomicU64,
}

impl ExactCount {
    pub fn new(dataset: impl Into<Arc<Dataset>>) -> Self {
        ExactCount {
            dataset: dataset.into(),
            computations: AtomicU64::new(0),
        }
    }
}

impl CountingSystem for ExactCount {
    fn answer(&self, query: &Query) -> i64 {
        self.computations.fetch_add(1, Ordering::Relaxed);
        query::matching_rows(&self.dataset, query).len() as i64
    }

    fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    fn computations(&self) -> u64 {
        self.computations.load(Ordering::Relaxed)
    }
}

/// Which system protects each sampled dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemSpec {
    Diffix(Arc<QbsConfig>),
    Exact,
}

impl Default for SystemSpec {
    fn default() -> Self {
        SystemSpec::Diffix(Arc::new(QbsConfig::default()))
    }
}

impl SystemSpec {
    pub fn diffix(config: QbsConfig) -> Self {
        SystemSpec::Diffix(Arc::new(config))
    }

    pub fn build(&self, salt: Salt, dataset: Dataset) -> Box<dyn CountingSystem> {
        match self {
            SystemSpec::Diffix(config) => Box::new(QbsInstance::new(salt, dataset, config.clone())),
            SystemSpec::Exact => Box::new(ExactCount::new(dataset)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixtures::small;
    use crate::query::Condition;

    fn crowd(n: u64) -> Dataset {
        let rows: Vec<_> = (0..n)
            .map(|i| (i, (i % 3) as f64, (i % 5) as f64, (i % 2) as f64))
            .collect();
        small(&rows)
    }

    fn q(conds: &[(usize, Predicate)]) -> Query {
        let cs: Vec<Condition> = conds.iter().map(|(a, p)| Condition::new(*a, *p)).collect();
        Query::from_conditions(4, &cs).unwrap()
    }

    #[test]
    fn repeated_answers_are_identical() {
        let qbs = QbsInstance::new(Salt::derive("t", 1, 0), crowd(300), QbsConfig::default());
        let query = q(&[(1, Predicate::Eq(1.0)), (3, Predicate::Eq(1.0))]);
        let first = qbs.answer(&query);
        assert_eq!(first, qbs.answer(&query));
        assert_eq!(qbs.computations(), 1);
        qbs.set_cache_enabled(false);
        assert_eq!(first, qbs.answer(&query));
    }

    #[test]
    fn tiny_counts_are_suppressed() {
        let qbs = QbsInstance::new(Salt::derive("t", 1, 0), crowd(300), QbsConfig::default());
        let single = q(&[(0, Predicate::Skip), (2, Predicate::Eq(4.0)), (1, Predicate::Eq(2.0))]);
        // ids ≡ 4 mod 5 and ≡ 2 mod 3: 60 users, not suppressed
        assert_ne!(qbs.answer(&single), 0);
        let one = small(&[(0, 1.0, 1.0, 1.0), (1, 2.0, 2.0, 0.0)]);
        let qbs = QbsInstance::new(Salt::derive("t", 1, 0), one, QbsConfig::default());
        assert_eq!(qbs.answer(&q(&[(1, Predicate::Eq(1.0))])), 0);
    }

    #[test]
    fn unconditioned_count_is_exact_without_mitigation() {
        let qbs = QbsInstance::new(Salt::derive("t", 1, 0), crowd(100), QbsConfig::default());
        assert_eq!(qbs.answer(&Query::unconditioned(4)), 100);
        let noisy = QbsInstance::new(
            Salt::derive("t", 1, 0),
            crowd(100),
            QbsConfig::with_mitigations(MitigationConfig {
                noise_when_no_conditions: true,
                ..MitigationConfig::default()
            }),
        );
        assert_ne!(noisy.answer_unrounded(&Query::unconditioned(4)), 100.0);
    }

    #[test]
    fn unsupported_queries_answer_zero() {
        let config = QbsConfig {
            syntax: QuerySyntax::limited(),
            ..QbsConfig::default()
        };
        let qbs = QbsInstance::new(Salt::derive("t", 1, 0), crowd(300), config);
        let between = q(&[(2, Predicate::Between { low: 0.0, high: 5.0 })]);
        assert_eq!(qbs.answer(&between), 0);
        assert_eq!(qbs.trace(&between), AnswerTrace::Rejected(Forbidden::Unsupported));
    }

    #[test]
    fn static_noise_ignores_the_data() {
        let salt = Salt::derive("t", 9, 9);
        let a = QbsInstance::new(salt.clone(), crowd(50), QbsConfig::default());
        let b = QbsInstance::new(salt, crowd(80), QbsConfig::default());
        let c = Condition::new(1, Predicate::Eq(1.0));
        assert_eq!(a.condition_noise(&c, &[1, 2]).0, b.condition_noise(&c, &[7]).0);
        assert_ne!(a.condition_noise(&c, &[1, 2]).1, b.condition_noise(&c, &[7]).1);
    }
}
