//! AUC, per-task metric reports and the good/bad case split.

mod auc;
mod sweep;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::data::InteractionSample;
use crate::model::Model;
use crate::simulator::Simulator;
use crate::{Error, Result};

pub use auc::{auc, auc_with, TieMode};
pub use sweep::{sweep, SweepGrid, SweepParameter, SweepRow};

/// Per-sample scores for the three evaluated tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskScores {
    pub ctr: f64,
    pub ctcvr: f64,
    /// Post-click conversion probability `P(purchase | click)`.
    pub cvr: f64,
}

pub trait Scorer {
    fn score(&self, feature_ids: &[u32], sample: &InteractionSample) -> Result<TaskScores>;

    fn score_all(&self, samples: &[InteractionSample]) -> Result<Vec<TaskScores>> {
        samples.iter().map(|s| self.score(&s.feature_ids, s)).collect()
    }
}

impl Scorer for Model {
    fn score(&self, feature_ids: &[u32], _: &InteractionSample) -> Result<TaskScores> {
        let b = self.predict_one(feature_ids)?;
        Ok(TaskScores {
            ctr: b.p_ctr,
            ctcvr: b.ctcvr_score(),
            cvr: b.post_click_cvr(),
        })
    }
}

/// Scores with the simulator's generative conditionals.
pub struct OracleScorer<'a>(pub &'a Simulator);

impl Scorer for OracleScorer<'_> {
    fn score(&self, _: &[u32], s: &InteractionSample) -> Result<TaskScores> {
        let p = self.0.ground_truth_probabilities(s.user_id, s.item_id);
        let cvr = p.cart_given_click * p.buy_given_cart;
        Ok(TaskScores {
            ctr: p.click,
            ctcvr: p.click * cvr,
            cvr,
        })
    }
}

/// CVR-AUC of one conversion group against its negative pool.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CaseGroup {
    pub positives: usize,
    pub negatives: usize,
    /// `None` when the group or its negative pool is empty.
    pub cvr_auc: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CaseSplit {
    /// Conversions whose cart happened in the purchase session.
    pub good_case: CaseGroup,
    /// Conversions whose cart was relocated from an earlier session.
    pub bad_case: CaseGroup,
}

/// AUCs are `None` when their subset holds a single class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_samples: usize,
    pub n_clicked: usize,
    pub n_conversions: usize,
    pub ctr_auc: Option<f64>,
    pub ctcvr_auc: Option<f64>,
    pub cvr_auc: Option<f64>,
    #[serde(flatten)]
    pub cases: CaseSplit,
}

fn optional_auc(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == labels.len() {
        return Ok(None);
    }
    auc(scores, labels).map(Some)
}

/// CTR-AUC over all samples, CTCVR-AUC on `c·o` over all samples, CVR-AUC on
/// `o` over clicked samples, plus the case split.
pub fn evaluate<M: Scorer + ?Sized>(model: &M, samples: &[InteractionSample]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let scores = model.score_all(samples)?;
    let ctr: Vec<f64> = scores.iter().map(|s| s.ctr).collect();
    let ctcvr: Vec<f64> = scores.iter().map(|s| s.ctcvr).collect();
    let clicked: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].click).collect();
    let cvr: Vec<f64> = clicked.iter().map(|&i| scores[i].cvr).collect();
    let cvr_labels: Vec<bool> = clicked.iter().map(|&i| samples[i].purchase).collect();
    Ok(MetricsReport {
        n_samples: samples.len(),
        n_clicked: clicked.len(),
        n_conversions: samples.iter().filter(|s| s.purchase).count(),
        ctr_auc: optional_auc(&ctr, &samples.iter().map(|s| s.ctr_label()).collect::<Vec<_>>())?,
        ctcvr_auc: optional_auc(&ctcvr, &samples.iter().map(|s| s.ctcvr_label()).collect::<Vec<_>>())?,
        cvr_auc: optional_auc(&cvr, &cvr_labels)?,
        cases: split_cases(samples, &scores)?,
    })
}

/// CVR-AUC of the good and bad conversion groups. Each group's negatives are
/// the clicked, non-converting samples from the `(user, session)` pairs that
/// hold one of its conversions.
pub fn case_split_eval<M: Scorer + ?Sized>(model: &M, samples: &[InteractionSample]) -> Result<CaseSplit> {
    split_cases(samples, &model.score_all(samples)?)
}

/// Indices of each group's positives (`o = 1`) and negatives.
pub fn case_groups(samples: &[InteractionSample]) -> [(Vec<usize>, Vec<usize>); 2] {
    let mut out: [(Vec<usize>, Vec<usize>); 2] = Default::default();
    for (g, bad) in [false, true].into_iter().enumerate() {
        let positives: Vec<usize> = (0..samples.len())
            .filter(|&i| samples[i].purchase && samples[i].is_bad_case() == bad)
            .collect();
        let sessions: HashSet<(u32, u32)> = positives
            .iter()
            .map(|&i| (samples[i].user_id, samples[i].session_id))
            .collect();
        let negatives = (0..samples.len())
            .filter(|&i| {
                let s = &samples[i];
                s.click && !s.purchase && sessions.contains(&(s.user_id, s.session_id))
            })
            .collect();
        out[g] = (positives, negatives);
    }
    out
}

fn split_cases(samples: &[InteractionSample], scores: &[TaskScores]) -> Result<CaseSplit> {
    let [good, bad] = case_groups(samples).map(|(pos, neg)| {
        let idx: Vec<usize> = pos.iter().chain(&neg).copied().collect();
        let s: Vec<f64> = idx.iter().map(|&i| scores[i].cvr).collect();
        let l: Vec<bool> = (0..idx.len()).map(|k| k < pos.len()).collect();
        optional_auc(&s, &l).map(|cvr_auc| CaseGroup {
            positives: pos.len(),
            negatives: neg.len(),
            cvr_auc,
        })
    });
    Ok(CaseSplit {
        good_case: good?,
        bad_case: bad?,
    })
}
