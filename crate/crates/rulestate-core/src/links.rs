//! Link functions mapping raw compliance signals onto the real line.
//!
//! Each signal type carries a monotone bijection into `R` so that downstream
//! inference can work with Gaussian likelihoods regardless of the native
//! signal space. Binary indicators are the exception: they stay in count
//! space and are summarized by an exact Beta-Bernoulli update instead.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Ratio signals exactly at 0 or 1 are pulled inside the open interval by
/// this margin before the logit transform. Real declarations contain exact
/// zeros, so the boundary policy has to be explicit.
pub const RATIO_CLAMP_EPSILON: f64 = 1e-6;

/// Signal-space transform attached to a rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkKind {
    /// `logit(s) = ln(s / (1 - s))` for ratios in (0, 1).
    Logit,
    /// `ln(s)` for strictly positive quantities.
    Log,
    /// Identity for signals already on the real line.
    Identity,
    /// Binary indicators; handled by `binary_posterior`, never transformed.
    BernoulliBeta,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinkError {
    #[error("value {value} outside the open domain of the {link:?} link")]
    Domain { link: LinkKind, value: f64 },
    #[error("the {0:?} link does not support continuous transformation")]
    UnsupportedLink(LinkKind),
    #[error("non-finite input {0}")]
    NonFinite(f64),
    #[error("invalid counts: successes {successes} exceed trials {trials}")]
    InvalidCounts { successes: u64, trials: u64 },
    #[error("Beta prior parameters must be strictly positive, got ({alpha}, {beta})")]
    InvalidBetaPrior { alpha: f64, beta: f64 },
}

impl LinkKind {
    /// Whether `value` lies in the link's open domain.
    pub fn in_domain(self, value: f64) -> bool {
        if !value.is_finite() {
            return false;
        }
        match self {
            LinkKind::Logit => value > 0.0 && value < 1.0,
            LinkKind::Log => value > 0.0,
            LinkKind::Identity => true,
            LinkKind::BernoulliBeta => value == 0.0 || value == 1.0,
        }
    }
}

/// Map a raw signal value onto the link scale.
pub fn transform(link: LinkKind, value: f64) -> Result<f64, LinkError> {
    if !value.is_finite() {
        return Err(LinkError::NonFinite(value));
    }
    match link {
        LinkKind::Logit => {
            if value <= 0.0 || value >= 1.0 {
                return Err(LinkError::Domain { link, value });
            }
            Ok((value / (1.0 - value)).ln())
        }
        LinkKind::Log => {
            if value <= 0.0 {
                return Err(LinkError::Domain { link, value });
            }
            Ok(value.ln())
        }
        LinkKind::Identity => Ok(value),
        LinkKind::BernoulliBeta => Err(LinkError::UnsupportedLink(link)),
    }
}

/// Inverse of [`transform`]; maps a link-scale value back into signal space.
pub fn inverse(link: LinkKind, t: f64) -> Result<f64, LinkError> {
    if !t.is_finite() {
        return Err(LinkError::NonFinite(t));
    }
    match link {
        LinkKind::Logit => Ok(logistic(t)),
        LinkKind::Log => Ok(t.exp()),
        LinkKind::Identity => Ok(t),
        LinkKind::BernoulliBeta => Err(LinkError::UnsupportedLink(link)),
    }
}

/// Clamp a ratio onto `[eps, 1 - eps]` so boundary declarations survive the
/// logit transform. Returns the clamped value and whether clamping fired.
pub fn clamp_ratio(value: f64) -> (f64, bool) {
    if value < RATIO_CLAMP_EPSILON {
        (RATIO_CLAMP_EPSILON, true)
    } else if value > 1.0 - RATIO_CLAMP_EPSILON {
        (1.0 - RATIO_CLAMP_EPSILON, true)
    } else {
        (value, false)
    }
}

/// Numerically stable logistic function. Output is always strictly inside
/// (0, 1) for finite input.
pub fn logistic(x: f64) -> f64 {
    let out = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    out.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Exact Beta-Bernoulli conjugate update for binary indicator signals.
pub fn binary_posterior(
    successes: u64,
    trials: u64,
    prior_alpha: f64,
    prior_beta: f64,
) -> Result<(f64, f64), LinkError> {
    if successes > trials {
        return Err(LinkError::InvalidCounts { successes, trials });
    }
    if prior_alpha <= 0.0 || prior_beta <= 0.0 {
        return Err(LinkError::InvalidBetaPrior {
            alpha: prior_alpha,
            beta: prior_beta,
        });
    }
    Ok((
        prior_alpha + successes as f64,
        prior_beta + (trials - successes) as f64,
    ))
}
