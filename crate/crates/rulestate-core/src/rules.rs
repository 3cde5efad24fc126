//! Rule specifications, entities, and applicability evaluation.
//!
//! A rule file is a TOML document with one `[[rule]]` block per rule. Each
//! block carries the rule's link kind, the six prior hyperparameters, and an
//! applicability predicate over entity attributes. Thresholds must state
//! their unit (`"100M FCFA"`, `"5 employees"`); bare numbers are rejected.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::links::LinkKind;

#[derive(Debug, Error)]
pub enum RuleError {
    #[error("parse error in rule document: {0}")]
    Parse(String),
    #[error("rule {rule}: {field} {reason}")]
    Validation {
        rule: String,
        field: &'static str,
        reason: String,
    },
    #[error("duplicate rule id {0}")]
    DuplicateRule(String),
    #[error("entity {entity} is missing attribute {attribute} required by rule {rule}")]
    MissingAttribute {
        entity: String,
        rule: String,
        attribute: String,
    },
    #[error("attribute {attribute} of entity {entity} has unit {found}, predicate expects {expected}")]
    UnitMismatch {
        entity: String,
        attribute: String,
        found: String,
        expected: String,
    },
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Comparison operator of an applicability predicate. Threshold comparisons
/// are inclusive at the boundary: the threshold value is the first liable
/// value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparator {
    Ge,
    Gt,
    Le,
    Lt,
    Eq,
    Ne,
}

/// Threshold of an applicability predicate, with explicit unit metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Threshold {
    Amount { value: i64, unit: String },
    Count { value: u64, unit: String },
    Code { value: String },
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Threshold::Amount { value, unit } => write!(f, "{value} {unit}"),
            Threshold::Count { value, unit } => write!(f, "{value} {unit}"),
            Threshold::Code { value } => write!(f, "{value}"),
        }
    }
}

/// Threshold predicate over one entity attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Applicability {
    pub attribute: String,
    pub comparator: Comparator,
    pub threshold: Threshold,
}

/// One rule: identity, link kind, prior hyperparameters, applicability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSpec {
    pub id: String,
    #[serde(default)]
    pub name: String,
    pub link: LinkKind,
    /// Prior probability that the rule is in force; strictly inside (0, 1).
    pub prior_activation: f64,
    /// Prior compliance mean on the link scale.
    pub prior_mean: f64,
    /// Prior compliance variance on the link scale.
    pub prior_var: f64,
    /// Prior variance of the parametric drift term.
    pub drift_var: f64,
    /// Observation noise variance on the link scale.
    pub obs_noise_var: f64,
    /// Variance of the background model for inactive rules.
    pub background_var: f64,
    pub applicability: Applicability,
}

impl RuleSpec {
    fn validate(&self) -> Result<(), RuleError> {
        let check_pos = |field: &'static str, v: f64| -> Result<(), RuleError> {
            if !(v.is_finite() && v > 0.0) {
                return Err(RuleError::Validation {
                    rule: self.id.clone(),
                    field,
                    reason: format!("must be strictly positive, got {v}"),
                });
            }
            Ok(())
        };
        if !(self.prior_activation > 0.0 && self.prior_activation < 1.0) {
            return Err(RuleError::Validation {
                rule: self.id.clone(),
                field: "prior_activation",
                reason: format!(
                    "must lie strictly inside (0, 1), got {}",
                    self.prior_activation
                ),
            });
        }
        if !self.prior_mean.is_finite() {
            return Err(RuleError::Validation {
                rule: self.id.clone(),
                field: "prior_mean",
                reason: "must be finite".into(),
            });
        }
        check_pos("prior_var", self.prior_var)?;
        check_pos("drift_var", self.drift_var)?;
        check_pos("obs_noise_var", self.obs_noise_var)?;
        check_pos("background_var", self.background_var)?;
        Ok(())
    }
}

/// Attribute value attached to an entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttrValue {
    /// Monetary amount in integer minor units of the stated currency.
    Amount { value: i64, unit: String },
    Count { value: u64 },
    Code { value: String },
}

/// One entity of the monitored population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    pub segment: String,
    pub attributes: BTreeMap<String, AttrValue>,
}

impl Entity {
    pub fn attribute(&self, name: &str) -> Option<&AttrValue> {
        self.attributes.get(name)
    }
}

/// Evaluate the rule's applicability predicate against an entity.
///
/// Deterministic and pure; the threshold boundary is inclusive for `Ge`/`Le`.
pub fn applicability(entity: &Entity, rule: &RuleSpec) -> Result<bool, RuleError> {
    let pred = &rule.applicability;
    let attr = entity
        .attribute(&pred.attribute)
        .ok_or_else(|| RuleError::MissingAttribute {
            entity: entity.id.clone(),
            rule: rule.id.clone(),
            attribute: pred.attribute.clone(),
        })?;
    let ordering = match (&pred.threshold, attr) {
        (Threshold::Amount { value, unit }, AttrValue::Amount { value: av, unit: au }) => {
            if unit != au {
                return Err(RuleError::UnitMismatch {
                    entity: entity.id.clone(),
                    attribute: pred.attribute.clone(),
                    found: au.clone(),
                    expected: unit.clone(),
                });
            }
            av.cmp(value)
        }
        (Threshold::Count { value, .. }, AttrValue::Count { value: av }) => av.cmp(value),
        (Threshold::Code { value }, AttrValue::Code { value: av }) => {
            return Ok(match pred.comparator {
                Comparator::Eq => av == value,
                Comparator::Ne => av != value,
                _ => av == value,
            });
        }
        (threshold, _) => {
            return Err(RuleError::UnitMismatch {
                entity: entity.id.clone(),
                attribute: pred.attribute.clone(),
                found: "incompatible attribute kind".into(),
                expected: threshold.to_string(),
            });
        }
    };
    Ok(match pred.comparator {
        Comparator::Ge => ordering.is_ge(),
        Comparator::Gt => ordering.is_gt(),
        Comparator::Le => ordering.is_le(),
        Comparator::Lt => ordering.is_lt(),
        Comparator::Eq => ordering.is_eq(),
        Comparator::Ne => !ordering.is_eq(),
    })
}

// --- rule document parsing -------------------------------------------------

#[derive(Deserialize)]
struct RuleDoc {
    #[serde(default)]
    rule: Vec<RuleBlock>,
}

#[derive(Deserialize)]
struct RuleBlock {
    id: String,
    #[serde(default)]
    name: String,
    link: LinkKind,
    prior_activation: f64,
    prior_mean: f64,
    prior_var: f64,
    drift_var: f64,
    obs_noise_var: f64,
    background_var: f64,
    applicability: ApplicabilityBlock,
}

#[derive(Deserialize)]
struct ApplicabilityBlock {
    attribute: String,
    #[serde(default = "default_comparator")]
    comparator: Comparator,
    threshold: String,
}

fn default_comparator() -> Comparator {
    Comparator::Ge
}

/// Parse a threshold string such as `"100M FCFA"`, `"5 employees"` or a bare
/// code. Numeric thresholds must carry a unit suffix.
pub fn parse_threshold(raw: &str) -> Result<Threshold, String> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Err("threshold is empty".into());
    }
    let mut parts = trimmed.splitn(2, char::is_whitespace);
    let head = parts.next().unwrap();
    let unit = parts.next().map(str::trim).unwrap_or("");

    let (digits, magnitude) = if head.len() > 1 {
        match head.as_bytes()[head.len() - 1] {
            b'K' | b'k' => (&head[..head.len() - 1], 1_000i64),
            b'M' | b'm' => (&head[..head.len() - 1], 1_000_000i64),
            b'B' | b'b' => (&head[..head.len() - 1], 1_000_000_000i64),
            _ => (head, 1i64),
        }
    } else {
        (head, 1i64)
    };
    if let Ok(value) = digits.parse::<f64>() {
        if unit.is_empty() {
            return Err(format!(
                "numeric threshold {trimmed:?} is missing its unit suffix"
            ));
        }
        let scaled = value * magnitude as f64;
        if scaled.fract() != 0.0 {
            return Err(format!("threshold {trimmed:?} is not an integer amount"));
        }
        if unit.eq_ignore_ascii_case("employees") || unit.eq_ignore_ascii_case("persons") {
            if scaled < 0.0 {
                return Err(format!("count threshold {trimmed:?} is negative"));
            }
            return Ok(Threshold::Count {
                value: scaled as u64,
                unit: unit.to_string(),
            });
        }
        return Ok(Threshold::Amount {
            value: scaled as i64,
            unit: unit.to_string(),
        });
    }
    Ok(Threshold::Code {
        value: trimmed.to_string(),
    })
}

/// Parse and validate a rule document.
pub fn parse_rules(text: &str) -> Result<Vec<RuleSpec>, RuleError> {
    let doc: RuleDoc = toml::from_str(text).map_err(|e| RuleError::Parse(e.to_string()))?;
    let mut seen = BTreeSet::new();
    let mut rules = Vec::with_capacity(doc.rule.len());
    for block in doc.rule {
        if !seen.insert(block.id.clone()) {
            return Err(RuleError::DuplicateRule(block.id));
        }
        let threshold =
            parse_threshold(&block.applicability.threshold).map_err(|reason| {
                RuleError::Validation {
                    rule: block.id.clone(),
                    field: "applicability.threshold",
                    reason,
                }
            })?;
        let rule = RuleSpec {
            id: block.id,
            name: block.name,
            link: block.link,
            prior_activation: block.prior_activation,
            prior_mean: block.prior_mean,
            prior_var: block.prior_var,
            drift_var: block.drift_var,
            obs_noise_var: block.obs_noise_var,
            background_var: block.background_var,
            applicability: Applicability {
                attribute: block.applicability.attribute,
                comparator: block.applicability.comparator,
                threshold,
            },
        };
        rule.validate()?;
        rules.push(rule);
    }
    Ok(rules)
}

/// Load rules from a TOML file on disk.
pub fn load_rules(path: &Path) -> Result<Vec<RuleSpec>, RuleError> {
    let text = std::fs::read_to_string(path).map_err(|source| RuleError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_rules(&text)
}

/// Serialize rules back into the document format.
pub fn rules_to_toml(rules: &[RuleSpec]) -> String {
    let mut out = String::new();
    for rule in rules {
        out.push_str("[[rule]]\n");
        out.push_str(&format!("id = {:?}\n", rule.id));
        if !rule.name.is_empty() {
            out.push_str(&format!("name = {:?}\n", rule.name));
        }
        let link = match rule.link {
            LinkKind::Logit => "logit",
            LinkKind::Log => "log",
            LinkKind::Identity => "identity",
            LinkKind::BernoulliBeta => "bernoulli_beta",
        };
        out.push_str(&format!("link = {link:?}\n"));
        out.push_str(&format!("prior_activation = {:?}\n", rule.prior_activation));
        out.push_str(&format!("prior_mean = {:?}\n", rule.prior_mean));
        out.push_str(&format!("prior_var = {:?}\n", rule.prior_var));
        out.push_str(&format!("drift_var = {:?}\n", rule.drift_var));
        out.push_str(&format!("obs_noise_var = {:?}\n", rule.obs_noise_var));
        out.push_str(&format!("background_var = {:?}\n", rule.background_var));
        out.push_str("\n[rule.applicability]\n");
        out.push_str(&format!("attribute = {:?}\n", rule.applicability.attribute));
        let cmp = match rule.applicability.comparator {
            Comparator::Ge => "ge",
            Comparator::Gt => "gt",
            Comparator::Le => "le",
            Comparator::Lt => "lt",
            Comparator::Eq => "eq",
            Comparator::Ne => "ne",
        };
        out.push_str(&format!("comparator = {cmp:?}\n"));
        out.push_str(&format!(
            "threshold = {:?}\n\n",
            rule.applicability.threshold.to_string()
        ));
    }
    out
}
