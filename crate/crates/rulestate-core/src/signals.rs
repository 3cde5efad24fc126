//! Signal tables and per-rule sufficient statistics.
//!
//! Raw signals arrive as a delimited table with columns
//! `entity_id,rule_id,slot,value`; an empty value cell marks a missing
//! observation. Missingness is a distinct state, never a sentinel number.
//! Slot 0 is the primary compliance signal consumed by inference;
//! higher slots are supplementary and feed diagnostics only.
//!
//! Entity attributes arrive in a companion table with columns
//! `entity_id,segment,...`; a column named `<attr>_fcfa` is read as a
//! monetary amount in FCFA, `employees` as a count, anything else as a code.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::links::{clamp_ratio, transform, LinkError, LinkKind};
use crate::rules::{applicability, AttrValue, Entity, RuleError, RuleSpec};

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error on {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: missing required column {column}")]
    MissingColumn { path: String, column: String },
    #[error("{path} line {line}: {reason}")]
    Malformed {
        path: String,
        line: u64,
        reason: String,
    },
    #[error("entity {entity}, rule {rule}: {source}")]
    Domain {
        entity: String,
        rule: String,
        #[source]
        source: LinkError,
    },
    #[error("rule {rule}: applicable entity {entity} has no primary signal entry")]
    MissingEntry { rule: String, entity: String },
    #[error(transparent)]
    Rule(#[from] RuleError),
}

/// One raw observation slot for an (entity, rule) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Observation {
    Observed(f64),
    Missing,
}

impl Observation {
    pub fn is_missing(&self) -> bool {
        matches!(self, Observation::Missing)
    }
}

/// Signals of one rule over its applicable entities.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RuleSignals {
    /// Primary (slot 0) observation per applicable entity.
    pub primary: BTreeMap<String, Observation>,
    /// Supplementary slots, keyed by (entity, slot >= 1).
    pub supplementary: BTreeMap<(String, u32), Observation>,
}

impl RuleSignals {
    pub fn applicable_count(&self) -> u64 {
        self.primary.len() as u64
    }
}

/// All signals of one regulatory period, restricted to applicable pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SignalTable {
    pub by_rule: BTreeMap<String, RuleSignals>,
}

impl SignalTable {
    pub fn rule(&self, rule_id: &str) -> Option<&RuleSignals> {
        self.by_rule.get(rule_id)
    }

    /// Total number of primary entries across rules.
    pub fn primary_len(&self) -> usize {
        self.by_rule.values().map(|r| r.primary.len()).sum()
    }
}

/// Raw rows as read from a signal file, before applicability filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSignals {
    pub entries: Vec<RawSignalRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawSignalRow {
    pub entity_id: String,
    pub rule_id: String,
    pub slot: u32,
    pub observation: Observation,
}

/// Per-rule sufficient statistics over transformed observed signals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSummary {
    pub rule_id: String,
    /// Count of observed (non-missing) primary signals.
    pub n: u64,
    /// Mean of transformed observed signals; `None` when `n == 0`.
    pub t_bar: Option<f64>,
    /// Sum of squared transformed observed signals.
    pub sum_sq: f64,
    pub missing_count: u64,
    pub applicable_count: u64,
    /// How many raw values hit the boundary clamp before transformation.
    pub clamped_count: u64,
}

impl ObservationSummary {
    pub fn empty(rule_id: &str) -> Self {
        ObservationSummary {
            rule_id: rule_id.to_string(),
            n: 0,
            t_bar: None,
            sum_sq: 0.0,
            missing_count: 0,
            applicable_count: 0,
            clamped_count: 0,
        }
    }
}

/// Neumaier-compensated accumulator; keeps sums deterministic to roundoff
/// regardless of magnitude ordering.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.compensation += (self.sum - t) + value;
        } else {
            self.compensation += (value - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// Assemble a signal table from raw rows: evaluate applicability for every
/// (entity, rule) pair, keep entries for applicable pairs, and check that
/// every applicable pair carries a primary entry. Rows for non-applicable
/// pairs are dropped.
pub fn assemble(
    entities: &[Entity],
    rules: &[RuleSpec],
    raw: &RawSignals,
) -> Result<SignalTable, SignalError> {
    let mut table = SignalTable::default();
    for rule in rules {
        let mut signals = RuleSignals::default();
        for entity in entities {
            if applicability(entity, rule)? {
                signals.primary.insert(entity.id.clone(), Observation::Missing);
            }
        }
        table.by_rule.insert(rule.id.clone(), signals);
    }
    let mut seen_primary: BTreeMap<(String, String), bool> = BTreeMap::new();
    for row in &raw.entries {
        let Some(signals) = table.by_rule.get_mut(&row.rule_id) else {
            continue;
        };
        if row.slot == 0 {
            if let Some(slot) = signals.primary.get_mut(&row.entity_id) {
                *slot = row.observation;
                seen_primary.insert((row.rule_id.clone(), row.entity_id.clone()), true);
            }
        } else if signals.primary.contains_key(&row.entity_id) {
            signals
                .supplementary
                .insert((row.entity_id.clone(), row.slot), row.observation);
        }
    }
    for (rule_id, signals) in &table.by_rule {
        for entity_id in signals.primary.keys() {
            if !seen_primary.contains_key(&(rule_id.clone(), entity_id.clone())) {
                return Err(SignalError::MissingEntry {
                    rule: rule_id.clone(),
                    entity: entity_id.clone(),
                });
            }
        }
    }
    Ok(table)
}

/// Compute per-rule sufficient statistics from a signal table.
///
/// Ratio signals are clamped onto the open interval before the logit
/// transform; the clamp count is carried in the summary. Rules with no
/// observed signals keep `t_bar = None`.
pub fn summarize(
    table: &SignalTable,
    rules: &[RuleSpec],
) -> Result<Vec<ObservationSummary>, SignalError> {
    let mut out = Vec::with_capacity(rules.len());
    for rule in rules {
        let Some(signals) = table.rule(&rule.id) else {
            out.push(ObservationSummary::empty(&rule.id));
            continue;
        };
        let mut sum = CompensatedSum::default();
        let mut sum_sq = CompensatedSum::default();
        let mut n = 0u64;
        let mut missing = 0u64;
        let mut clamped = 0u64;
        for (entity_id, obs) in &signals.primary {
            match obs {
                Observation::Missing => missing += 1,
                Observation::Observed(raw_value) => {
                    let value = if rule.link == LinkKind::Logit {
                        let (v, was_clamped) = clamp_ratio(*raw_value);
                        if was_clamped {
                            clamped += 1;
                        }
                        v
                    } else {
                        *raw_value
                    };
                    let t = transform(rule.link, value).map_err(|source| SignalError::Domain {
                        entity: entity_id.clone(),
                        rule: rule.id.clone(),
                        source,
                    })?;
                    sum.add(t);
                    sum_sq.add(t * t);
                    n += 1;
                }
            }
        }
        out.push(ObservationSummary {
            rule_id: rule.id.clone(),
            n,
            t_bar: if n > 0 { Some(sum.value() / n as f64) } else { None },
            sum_sq: sum_sq.value(),
            missing_count: missing,
            applicable_count: signals.applicable_count(),
            clamped_count: clamped,
        });
    }
    Ok(out)
}

// --- file ingestion ---------------------------------------------------------

/// Read a raw signal file (`entity_id,rule_id,slot,value`).
pub fn load_signals(path: &Path) -> Result<RawSignals, SignalError> {
    let path_str = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|source| SignalError::Csv {
            path: path_str.clone(),
            source,
        })?;
    let headers = reader
        .headers()
        .map_err(|source| SignalError::Csv {
            path: path_str.clone(),
            source,
        })?
        .clone();
    for required in ["entity_id", "rule_id", "slot", "value"] {
        if !headers.iter().any(|h| h == required) {
            return Err(SignalError::MissingColumn {
                path: path_str.clone(),
                column: required.to_string(),
            });
        }
    }
    let idx = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (ei, ri, si, vi) = (idx("entity_id"), idx("rule_id"), idx("slot"), idx("value"));

    let mut entries = Vec::new();
    for (line_no, record) in reader.records().enumerate() {
        let line = line_no as u64 + 2;
        let record = record.map_err(|source| SignalError::Csv {
            path: path_str.clone(),
            source,
        })?;
        let field = |i: usize| record.get(i).unwrap_or("").trim();
        let slot: u32 = field(si).parse().map_err(|_| SignalError::Malformed {
            path: path_str.clone(),
            line,
            reason: format!("slot {:?} is not an unsigned integer", field(si)),
        })?;
        let value_field = field(vi);
        let observation = if value_field.is_empty() {
            Observation::Missing
        } else {
            let value: f64 = value_field.parse().map_err(|_| SignalError::Malformed {
                path: path_str.clone(),
                line,
                reason: format!("value {value_field:?} is not a number"),
            })?;
            Observation::Observed(value)
        };
        entries.push(RawSignalRow {
            entity_id: field(ei).to_string(),
            rule_id: field(ri).to_string(),
            slot,
            observation,
        });
    }
    Ok(RawSignals { entries })
}

/// Write a raw signal file in the ingestion format.
pub fn write_signals<W: Write>(mut w: W, raw: &RawSignals) -> std::io::Result<()> {
    writeln!(w, "entity_id,rule_id,slot,value")?;
    for row in &raw.entries {
        match row.observation {
            Observation::Observed(v) => writeln!(
                w,
                "{},{},{},{}",
                row.entity_id, row.rule_id, row.slot, format_float(v)
            )?,
            Observation::Missing => {
                writeln!(w, "{},{},{},", row.entity_id, row.rule_id, row.slot)?
            }
        }
    }
    Ok(())
}

/// Shortest round-trip decimal form of a float, for stable file output.
pub fn format_float(v: f64) -> String {
    let mut buffer = ryu_format(v);
    if buffer.ends_with(".0") {
        buffer.truncate(buffer.len() - 2);
    }
    buffer
}

fn ryu_format(v: f64) -> String {
    // `{:?}` on f64 prints the shortest representation that round-trips.
    format!("{v:?}")
}

/// Read an entity attribute table.
pub fn load_entities(path: &Path) -> Result<Vec<Entity>, SignalError> {
    let path_str = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|source| SignalError::Csv {
            path: path_str.clone(),
            source,
        })?;
    let headers = reader
        .headers()
        .map_err(|source| SignalError::Csv {
            path: path_str.clone(),
            source,
        })?
        .clone();
    for required in ["entity_id", "segment"] {
        if !headers.iter().any(|h| h == required) {
            return Err(SignalError::MissingColumn {
                path: path_str.clone(),
                column: required.to_string(),
            });
        }
    }
    let mut entities = Vec::new();
    for (line_no, record) in reader.records().enumerate() {
        let line = line_no as u64 + 2;
        let record = record.map_err(|source| SignalError::Csv {
            path: path_str.clone(),
            source,
        })?;
        let mut id = String::new();
        let mut segment = String::new();
        let mut attributes = BTreeMap::new();
        for (header, field) in headers.iter().zip(record.iter()) {
            let field = field.trim();
            match header {
                "entity_id" => id = field.to_string(),
                "segment" => segment = field.to_string(),
                _ if header.ends_with("_fcfa") => {
                    let value: i64 = field.parse().map_err(|_| SignalError::Malformed {
                        path: path_str.clone(),
                        line,
                        reason: format!("{header} value {field:?} is not an integer amount"),
                    })?;
                    let name = header.trim_end_matches("_fcfa").to_string();
                    attributes.insert(
                        name,
                        AttrValue::Amount {
                            value,
                            unit: "FCFA".to_string(),
                        },
                    );
                }
                "employees" => {
                    let value: u64 = field.parse().map_err(|_| SignalError::Malformed {
                        path: path_str.clone(),
                        line,
                        reason: format!("employees value {field:?} is not a count"),
                    })?;
                    attributes.insert("employees".to_string(), AttrValue::Count { value });
                }
                _ => {
                    attributes.insert(
                        header.to_string(),
                        AttrValue::Code {
                            value: field.to_string(),
                        },
                    );
                }
            }
        }
        if id.is_empty() {
            return Err(SignalError::Malformed {
                path: path_str.clone(),
                line,
                reason: "empty entity_id".into(),
            });
        }
        entities.push(Entity {
            id,
            segment,
            attributes,
        });
    }
    Ok(entities)
}

/// Write an entity attribute table for benchmark-style entities
/// (turnover, employees, sector).
pub fn write_entities<W: Write>(mut w: W, entities: &[Entity]) -> std::io::Result<()> {
    writeln!(w, "entity_id,segment,turnover_fcfa,employees,sector")?;
    for e in entities {
        let turnover = match e.attribute("turnover") {
            Some(AttrValue::Amount { value, .. }) => value.to_string(),
            _ => String::new(),
        };
        let employees = match e.attribute("employees") {
            Some(AttrValue::Count { value }) => value.to_string(),
            _ => String::new(),
        };
        let sector = match e.attribute("sector") {
            Some(AttrValue::Code { value }) => value.clone(),
            _ => String::new(),
        };
        writeln!(w, "{},{},{},{},{}", e.id, e.segment, turnover, employees, sector)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rules::{parse_rules, Threshold};
    use proptest::prelude::*;

    fn test_rule(id: &str) -> RuleSpec {
        RuleSpec {
            id: id.to_string(),
            name: String::new(),
            link: LinkKind::Identity,
            prior_activation: 0.9,
            prior_mean: 0.0,
            prior_var: 1.0,
            drift_var: 0.1,
            obs_noise_var: 1.0,
            background_var: 1.0,
            applicability: crate::rules::Applicability {
                attribute: "sector".to_string(),
                comparator: crate::rules::Comparator::Eq,
                threshold: Threshold::Code {
                    value: "any".to_string(),
                },
            },
        }
    }

    fn test_entity(id: &str) -> Entity {
        let mut attributes = BTreeMap::new();
        attributes.insert(
            "sector".to_string(),
            AttrValue::Code {
                value: "any".to_string(),
            },
        );
        Entity {
            id: id.to_string(),
            segment: "s".to_string(),
            attributes,
        }
    }

    fn table_from(values: &[(&str, Observation)]) -> (Vec<Entity>, Vec<RuleSpec>, SignalTable) {
        let rules = vec![test_rule("R")];
        let entities: Vec<Entity> = values.iter().map(|(id, _)| test_entity(id)).collect();
        let raw = RawSignals {
            entries: values
                .iter()
                .map(|(id, obs)| RawSignalRow {
                    entity_id: id.to_string(),
                    rule_id: "R".to_string(),
                    slot: 0,
                    observation: *obs,
                })
                .collect(),
        };
        let table = assemble(&entities, &rules, &raw).unwrap();
        (entities, rules, table)
    }

    #[test]
    fn mean_of_two_observations() {
        let (_, rules, table) = table_from(&[
            ("a", Observation::Observed(1.0)),
            ("b", Observation::Observed(3.0)),
        ]);
        let summary = &summarize(&table, &rules).unwrap()[0];
        assert_eq!(summary.n, 2);
        assert_eq!(summary.t_bar, Some(2.0));
        assert_eq!(summary.sum_sq, 10.0);
    }

    #[test]
    fn all_missing_marks_t_bar_undefined() {
        let (_, rules, table) =
            table_from(&[("a", Observation::Missing), ("b", Observation::Missing)]);
        let summary = &summarize(&table, &rules).unwrap()[0];
        assert_eq!(summary.n, 0);
        assert_eq!(summary.t_bar, None);
        assert_eq!(summary.missing_count, 2);
    }

    #[test]
    fn applicable_pair_without_entry_is_rejected() {
        let rules = vec![test_rule("R")];
        let entities = vec![test_entity("a")];
        let raw = RawSignals { entries: vec![] };
        assert!(matches!(
            assemble(&entities, &rules, &raw),
            Err(SignalError::MissingEntry { .. })
        ));
    }

    #[test]
    fn logit_rule_clamps_boundary_ratios() {
        let mut rule = test_rule("R");
        rule.link = LinkKind::Logit;
        let rules = vec![rule];
        let entities = vec![test_entity("a")];
        let raw = RawSignals {
            entries: vec![RawSignalRow {
                entity_id: "a".to_string(),
                rule_id: "R".to_string(),
                slot: 0,
                observation: Observation::Observed(0.0),
            }],
        };
        let table = assemble(&entities, &rules, &raw).unwrap();
        let summary = &summarize(&table, &rules).unwrap()[0];
        assert_eq!(summary.clamped_count, 1);
        assert!(summary.t_bar.unwrap() < -10.0);
    }

    #[test]
    fn signal_csv_round_trips() {
        let raw = RawSignals {
            entries: vec![
                RawSignalRow {
                    entity_id: "e1".into(),
                    rule_id: "R1".into(),
                    slot: 0,
                    observation: Observation::Observed(0.25),
                },
                RawSignalRow {
                    entity_id: "e2".into(),
                    rule_id: "R1".into(),
                    slot: 0,
                    observation: Observation::Missing,
                },
            ],
        };
        let mut buf = Vec::new();
        write_signals(&mut buf, &raw).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("signals.csv");
        std::fs::write(&path, &buf).unwrap();
        let loaded = load_signals(&path).unwrap();
        assert_eq!(loaded, raw);
    }

    #[test]
    fn rule_file_and_entity_file_cooperate() {
        let rules = parse_rules(
            r#"
            [[rule]]
            id = "R1"
            link = "logit"
            prior_activation = 0.92
            prior_mean = 1.39
            prior_var = 0.25
            drift_var = 0.04
            obs_noise_var = 0.10
            background_var = 1.0

            [rule.applicability]
            attribute = "turnover"
            comparator = "ge"
            threshold = "100M FCFA"
        "#,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let epath = dir.path().join("entities.csv");
        std::fs::write(
            &epath,
            "entity_id,segment,turnover_fcfa,employees,sector\n\
             e1,formal-large,120000000,25,commerce\n\
             e2,micro,5000000,1,services\n",
        )
        .unwrap();
        let entities = load_entities(&epath).unwrap();
        assert_eq!(entities.len(), 2);
        assert!(applicability(&entities[0], &rules[0]).unwrap());
        assert!(!applicability(&entities[1], &rules[0]).unwrap());
    }

    proptest! {
        /// Summaries do not depend on entity enumeration order.
        #[test]
        fn summaries_are_permutation_invariant(
            values in proptest::collection::vec(-50.0..50.0f64, 1..40),
            seed in 0u64..1000
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let base: Vec<(String, Observation)> = values
                .iter()
                .enumerate()
                .map(|(i, v)| (format!("e{i:03}"), Observation::Observed(*v)))
                .collect();
            let mut shuffled = base.clone();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            shuffled.shuffle(&mut rng);

            let build = |rows: &[(String, Observation)]| {
                let pairs: Vec<(&str, Observation)> =
                    rows.iter().map(|(id, o)| (id.as_str(), *o)).collect();
                let (_, rules, table) = table_from(&pairs);
                summarize(&table, &rules).unwrap()
            };
            prop_assert_eq!(build(&base), build(&shuffled));
        }

        /// Dropping a missing entry leaves (n, t_bar) untouched.
        #[test]
        fn removing_missing_entry_is_inert(
            values in proptest::collection::vec(-50.0..50.0f64, 1..20)
        ) {
            let mut with_missing: Vec<(String, Observation)> = values
                .iter()
                .enumerate()
                .map(|(i, v)| (format!("e{i:03}"), Observation::Observed(*v)))
                .collect();
            with_missing.push(("zz-missing".to_string(), Observation::Missing));
            let without: Vec<(String, Observation)> = with_missing
                [..with_missing.len() - 1]
                .to_vec();

            let build = |rows: &[(String, Observation)]| {
                let pairs: Vec<(&str, Observation)> =
                    rows.iter().map(|(id, o)| (id.as_str(), *o)).collect();
                let (_, rules, table) = table_from(&pairs);
                let s = summarize(&table, &rules).unwrap().remove(0);
                (s.n, s.t_bar, s.sum_sq)
            };
            prop_assert_eq!(build(&with_missing), build(&without));
        }
    }
}
