use serde::{Deserialize, Serialize};

use super::{calibrate, CalibrationStats, EventIndex, InteractionSample};
use crate::{Error, Result};

/// Time-based partition: sessions `< boundary` train, the rest test.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<InteractionSample>,
    pub test: Vec<InteractionSample>,
    pub boundary: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub train: CalibrationStats,
    pub test: CalibrationStats,
}

pub fn split_by_session(samples: &[InteractionSample], boundary: u32) -> Result<DatasetSplit> {
    let (train, test): (Vec<_>, Vec<_>) = samples
        .iter()
        .cloned()
        .partition(|s| s.session_id < boundary);
    if train.is_empty() || test.is_empty() {
        return Err(Error::Input(format!(
            "session boundary {boundary} leaves an empty partition ({} train / {} test)",
            train.len(),
            test.len()
        )));
    }
    Ok(DatasetSplit {
        train,
        test,
        boundary,
    })
}

/// Splits raw samples and calibrates each side against its own events only.
/// A test purchase whose cart lies in the training period gets an implicit cart
/// in its own session.
pub fn split_and_calibrate(raw: &[InteractionSample], boundary: u32) -> Result<(DatasetSplit, SplitStats)> {
    let split = split_by_session(raw, boundary)?;
    let (train, train_stats) = calibrate(&split.train, &EventIndex::from_samples(&split.train))?;
    let (test, test_stats) = calibrate(&split.test, &EventIndex::from_samples(&split.test))?;
    Ok((
        DatasetSplit {
            train,
            test,
            boundary,
        },
        SplitStats {
            train: train_stats,
            test: test_stats,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Domain;
    use std::collections::HashSet;

    fn s(session: u32, item: u32) -> InteractionSample {
        InteractionSample {
            user_id: 0,
            item_id: item,
            session_id: session,
            feature_ids: vec![],
            domain: Domain::Rec,
            click: false,
            cart: false,
            purchase: false,
            calibrated: false,
            cart_origin_session: None,
        }
    }

    #[test]
    fn partitions_are_disjoint_and_complete() {
        let all: Vec<_> = (0..6).flat_map(|sess| (0..3).map(move |i| s(sess, i))).collect();
        let split = split_by_session(&all, 4).unwrap();
        assert_eq!(split.train.len() + split.test.len(), all.len());
        let a: HashSet<u32> = split.train.iter().map(|s| s.session_id).collect();
        let b: HashSet<u32> = split.test.iter().map(|s| s.session_id).collect();
        assert!(a.is_disjoint(&b));
        assert!(split_by_session(&all, 6).is_err());
        assert!(split_by_session(&all, 0).is_err());
    }

    #[test]
    fn calibration_does_not_cross_the_boundary() {
        let mut cart = s(1, 5);
        cart.click = true;
        cart.cart = true;
        let mut buy = s(3, 5);
        buy.purchase = true;
        let raw = vec![cart.clone(), buy];
        let (split, stats) = split_and_calibrate(&raw, 2).unwrap();
        assert!(split.train[0].cart, "training cart keeps its label");
        // the training cart is invisible to the test side: implicit repair
        assert_eq!(stats.test, CalibrationStats { moved: 0, imported: 0, implicit: 1 });
        assert_eq!(split.test[0].cart_origin_session, None);
        assert!(split.test[0].cart);
    }
}
