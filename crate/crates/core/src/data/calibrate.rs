//! Sample calibration.
//!
//! A purchase whose cart happened in an earlier session shows up in the raw
//! data as `(c=0, a=0, o=1)` in the purchase session and `(c=1, a=1, o=0)` in
//! the cart session. Calibration relocates the cart label one-to-one: the
//! purchase-session sample becomes `(c=1, a=1, o=1)` with
//! `cart_origin_session` set, and the origin sample's cart label is cleared.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{Domain, InteractionSample};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct CartEvent {
    session: u32,
    domain: Domain,
}

/// Cart history per `(user, item)` and the resulting purchase-to-cart matching.
///
/// Purchases are matched in session order; each takes the most recent earlier
/// cart not already claimed. A cart whose own session also holds the purchase
/// is claimed by it.
#[derive(Debug, Clone, Default)]
pub struct EventIndex {
    carts: HashMap<(u32, u32), Vec<CartEvent>>,
    matches: HashMap<(u32, u32, u32), CartEvent>,
}

impl EventIndex {
    /// Builds the index from raw samples; every cart and purchase event is
    /// attached to the sample of the session it happened in.
    pub fn from_samples(samples: &[InteractionSample]) -> Self {
        let mut carts: HashMap<(u32, u32), Vec<CartEvent>> = HashMap::new();
        let mut purchases: HashMap<(u32, u32), Vec<(u32, bool)>> = HashMap::new();
        for s in samples {
            let pair = (s.user_id, s.item_id);
            if s.cart {
                carts.entry(pair).or_default().push(CartEvent {
                    session: s.session_id,
                    domain: s.domain,
                });
            }
            if s.purchase {
                purchases.entry(pair).or_default().push((s.session_id, s.cart));
            }
        }
        for list in carts.values_mut() {
            list.sort_by_key(|c| c.session);
        }
        let mut matches = HashMap::new();
        for (pair, mut buys) in purchases {
            buys.sort_unstable();
            let Some(history) = carts.get(&pair) else {
                continue;
            };
            let mut claimed = vec![false; history.len()];
            for (i, c) in history.iter().enumerate() {
                if buys.iter().any(|&(s, with_cart)| with_cart && s == c.session) {
                    claimed[i] = true;
                }
            }
            for &(session, with_cart) in &buys {
                if with_cart {
                    continue;
                }
                let pick = (0..history.len())
                    .rev()
                    .find(|&i| !claimed[i] && history[i].session < session);
                if let Some(i) = pick {
                    claimed[i] = true;
                    matches.insert((pair.0, pair.1, session), history[i]);
                }
            }
        }
        Self { carts, matches }
    }

    pub fn cart_sessions(&self, user: u32, item: u32) -> Vec<u32> {
        self.carts
            .get(&(user, item))
            .map(|v| v.iter().map(|c| c.session).collect())
            .unwrap_or_default()
    }

    /// Session of the cart matched to the purchase in `(user, item, session)`.
    pub fn matched_cart(&self, user: u32, item: u32, session: u32) -> Option<u32> {
        self.matches.get(&(user, item, session)).map(|c| c.session)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationStats {
    /// Cart labels relocated between two samples of the set.
    pub moved: usize,
    /// Cart labels relocated from a session outside the set (e.g. the
    /// training period, when calibrating a test partition).
    pub imported: usize,
    /// Purchases with no cart anywhere, repaired with `a = 1`.
    pub implicit: usize,
}

pub fn check_unique(samples: &[InteractionSample]) -> Result<()> {
    let mut seen = HashSet::with_capacity(samples.len());
    for s in samples {
        if !seen.insert(s.key()) {
            return Err(Error::Input(format!(
                "duplicate sample for user {} item {} session {}",
                s.user_id, s.item_id, s.session_id
            )));
        }
    }
    Ok(())
}

/// Applies the cart relocation to every purchase sample lacking a cart label.
/// All returned samples are marked calibrated.
pub fn calibrate(
    samples: &[InteractionSample],
    index: &EventIndex,
) -> Result<(Vec<InteractionSample>, CalibrationStats)> {
    check_unique(samples)?;
    let position: HashMap<(u32, u32, u32), usize> =
        samples.iter().enumerate().map(|(i, s)| (s.key(), i)).collect();
    let mut out = samples.to_vec();
    let mut stats = CalibrationStats::default();
    for i in 0..out.len() {
        let s = &out[i];
        if !(s.purchase && !s.cart) {
            continue;
        }
        let (user, item, session) = s.key();
        match index.matches.get(&(user, item, session)) {
            Some(origin) => {
                let target = &mut out[i];
                target.click = true;
                target.cart = true;
                target.cart_origin_session = Some(origin.session);
                target.domain = origin.domain;
                match position.get(&(user, item, origin.session)) {
                    Some(&j) => {
                        let src = &mut out[j];
                        src.cart = false;
                        src.domain = Domain::Rec;
                        stats.moved += 1;
                    }
                    None => stats.imported += 1,
                }
            }
            None => {
                let target = &mut out[i];
                target.click = true;
                target.cart = true;
                stats.implicit += 1;
            }
        }
    }
    for s in &mut out {
        s.calibrated = true;
    }
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{validate_hierarchy, HierarchyMode};

    fn s(session: u32, c: bool, a: bool, o: bool) -> InteractionSample {
        InteractionSample {
            user_id: 1,
            item_id: 9,
            session_id: session,
            feature_ids: vec![1, 9],
            domain: Domain::Rec,
            click: c,
            cart: a,
            purchase: o,
            calibrated: false,
            cart_origin_session: None,
        }
    }

    fn run(samples: &[InteractionSample]) -> (Vec<InteractionSample>, CalibrationStats) {
        calibrate(samples, &EventIndex::from_samples(samples)).unwrap()
    }

    #[test]
    fn cross_session_cart_moves_to_purchase() {
        let raw = vec![s(3, true, true, false), s(7, false, false, true)];
        let (cal, stats) = run(&raw);
        assert_eq!(stats, CalibrationStats { moved: 1, imported: 0, implicit: 0 });
        assert_eq!((cal[1].click, cal[1].cart, cal[1].purchase), (true, true, true));
        assert_eq!(cal[1].cart_origin_session, Some(3));
        assert_eq!((cal[0].click, cal[0].cart, cal[0].purchase), (true, false, false));
        assert!(validate_hierarchy(&cal, HierarchyMode::Calibrated).is_empty());
    }

    #[test]
    fn consistent_sample_is_untouched() {
        let raw = vec![s(2, true, true, true)];
        let (cal, stats) = run(&raw);
        assert_eq!(stats, CalibrationStats::default());
        let mut expected = raw[0].clone();
        expected.calibrated = true;
        assert_eq!(cal[0], expected);
    }

    #[test]
    fn purchase_without_any_cart_is_repaired() {
        let raw = vec![s(5, false, false, true)];
        let (cal, stats) = run(&raw);
        assert_eq!(stats.implicit, 1);
        assert!(cal[0].click && cal[0].cart && cal[0].cart_origin_session.is_none());
    }

    #[test]
    fn claimed_carts_are_not_reused() {
        // session 1 cart bought in session 1; session 2 cart deferred to session 4
        let raw = vec![
            s(1, true, true, true),
            s(2, true, true, false),
            s(4, false, false, true),
        ];
        let (cal, _) = run(&raw);
        assert_eq!(cal[2].cart_origin_session, Some(2));
        assert!(cal[0].cart, "same-session cart keeps its label");
        assert!(!cal[1].cart);
    }

    #[test]
    fn origin_outside_set_is_imported() {
        let history = vec![s(3, true, true, false), s(7, false, false, true)];
        let index = EventIndex::from_samples(&history);
        let (cal, stats) = calibrate(&history[1..], &index).unwrap();
        assert_eq!(stats.imported, 1);
        assert_eq!(cal[0].cart_origin_session, Some(3));
    }

    #[test]
    fn duplicates_are_rejected() {
        let raw = vec![s(3, true, false, false), s(3, false, false, false)];
        assert!(matches!(
            calibrate(&raw, &EventIndex::default()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn idempotent() {
        let raw = vec![
            s(1, true, true, false),
            s(2, false, false, true),
            s(3, true, false, false),
            s(5, false, false, true),
        ];
        let (once, _) = run(&raw);
        let (twice, stats) = run(&once);
        assert_eq!(once, twice);
        assert_eq!(stats, CalibrationStats::default());
    }
}
