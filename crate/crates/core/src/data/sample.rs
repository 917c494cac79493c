use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::Error;

/// Where a cart label originated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    /// Recommendation feed.
    #[default]
    Rec,
    /// Global domain (search and other non-feed entry points).
    Search,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Rec => "rec",
            Domain::Search => "search",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rec" => Ok(Domain::Rec),
            "search" => Ok(Domain::Search),
            other => Err(Error::Input(format!("unknown domain `{other}`"))),
        }
    }
}

/// One `(user, item, session)` exposure with its click / cart / purchase labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionSample {
    pub user_id: u32,
    pub item_id: u32,
    pub session_id: u32,
    /// One id per schema field, in schema order.
    pub feature_ids: Vec<u32>,
    pub domain: Domain,
    pub click: bool,
    pub cart: bool,
    pub purchase: bool,
    pub calibrated: bool,
    /// Session the cart label was moved from, when calibration relocated one here.
    pub cart_origin_session: Option<u32>,
}

impl InteractionSample {
    pub fn key(&self) -> (u32, u32, u32) {
        (self.user_id, self.item_id, self.session_id)
    }

    pub fn ctr_label(&self) -> bool {
        self.click
    }

    /// Exposure-space cart label `c · a`.
    pub fn ctcar_label(&self) -> bool {
        self.click && self.cart
    }

    /// Exposure-space conversion label `c · o`.
    pub fn ctcvr_label(&self) -> bool {
        self.click && self.purchase
    }

    /// Conversion whose cart happened in an earlier session.
    pub fn is_bad_case(&self) -> bool {
        self.purchase && self.cart_origin_session.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HierarchyMode {
    /// `a ≤ c` on recommendation-domain samples.
    Raw,
    /// `o ≤ a ≤ c` everywhere.
    Calibrated,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HierarchyViolation {
    pub index: usize,
    pub detail: String,
}

pub fn validate_hierarchy(samples: &[InteractionSample], mode: HierarchyMode) -> Vec<HierarchyViolation> {
    samples
        .iter()
        .enumerate()
        .filter_map(|(index, s)| {
            let detail = match mode {
                HierarchyMode::Raw if s.domain == Domain::Rec && s.cart && !s.click => {
                    Some("cart without click".to_string())
                }
                HierarchyMode::Calibrated if s.cart && !s.click => Some("cart without click".into()),
                HierarchyMode::Calibrated if s.purchase && !s.cart => {
                    Some("purchase without cart".into())
                }
                _ => None,
            }?;
            Some(HierarchyViolation {
                index,
                detail: format!(
                    "user {} item {} session {}: {detail}",
                    s.user_id, s.item_id, s.session_id
                ),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(c: bool, a: bool, o: bool) -> InteractionSample {
        InteractionSample {
            user_id: 1,
            item_id: 2,
            session_id: 3,
            feature_ids: vec![0],
            domain: Domain::Rec,
            click: c,
            cart: a,
            purchase: o,
            calibrated: false,
            cart_origin_session: None,
        }
    }

    #[test]
    fn hierarchy_reports() {
        assert!(validate_hierarchy(&[], HierarchyMode::Calibrated).is_empty());
        let bad = [sample(false, true, false)];
        assert_eq!(validate_hierarchy(&bad, HierarchyMode::Raw).len(), 1);
        assert_eq!(validate_hierarchy(&bad, HierarchyMode::Calibrated).len(), 1);
        let deferred = [sample(false, false, true)];
        assert!(validate_hierarchy(&deferred, HierarchyMode::Raw).is_empty());
        assert_eq!(validate_hierarchy(&deferred, HierarchyMode::Calibrated).len(), 1);
        let mut search = sample(false, true, false);
        search.domain = Domain::Search;
        assert!(validate_hierarchy(&[search], HierarchyMode::Raw).is_empty());
    }

    #[test]
    fn composed_labels() {
        let s = sample(true, true, true);
        assert!(s.ctcar_label() && s.ctcvr_label());
        let d = sample(false, false, true);
        assert!(!d.ctcvr_label());
    }
}
