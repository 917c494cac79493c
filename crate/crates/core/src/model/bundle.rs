use serde::{Deserialize, Serialize};

/// How a variant composes its conditionals into exposure-space probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    /// `pCTCVR = pCTR · pCVR` only (no cart task).
    TwoFactor,
    /// `pCTCAR = pCTR · pCAR`, `pCTCVR = pCTR · pCVR`.
    Parallel,
    /// `pCTCAR = pCTR · pCAR`, `pCTCVR = pCTR · pCAR · pCVR` with `pCVR`
    /// conditioned on the cart.
    Chain,
    /// Independent task heads, no composition.
    Independent,
}

/// Per-sample predictions: raw conditionals and their compositions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionBundle {
    pub p_ctr: f64,
    pub p_car: Option<f64>,
    pub p_cvr: f64,
    pub p_ctcar: Option<f64>,
    pub p_ctcvr: Option<f64>,
    pub composition: Composition,
}

impl PredictionBundle {
    pub fn two_factor(p_ctr: f64, p_cvr: f64) -> Self {
        Self {
            p_ctr,
            p_car: None,
            p_cvr,
            p_ctcar: None,
            p_ctcvr: Some(p_ctr * p_cvr),
            composition: Composition::TwoFactor,
        }
    }

    pub fn parallel(p_ctr: f64, p_car: f64, p_cvr: f64) -> Self {
        Self {
            p_ctr,
            p_car: Some(p_car),
            p_cvr,
            p_ctcar: Some(p_ctr * p_car),
            p_ctcvr: Some(p_ctr * p_cvr),
            composition: Composition::Parallel,
        }
    }

    pub fn chain(p_ctr: f64, p_car: f64, p_cvr: f64) -> Self {
        Self {
            p_ctr,
            p_car: Some(p_car),
            p_cvr,
            p_ctcar: Some(p_ctr * p_car),
            p_ctcvr: Some(p_ctr * p_car * p_cvr),
            composition: Composition::Chain,
        }
    }

    pub fn independent(p_ctr: f64, p_cvr: f64) -> Self {
        Self {
            p_ctr,
            p_car: None,
            p_cvr,
            p_ctcar: None,
            p_ctcvr: None,
            composition: Composition::Independent,
        }
    }

    /// Score for the exposure-space conversion task. Models without a
    /// composition layer fall back to `pCTR · pCVR`.
    pub fn ctcvr_score(&self) -> f64 {
        self.p_ctcvr.unwrap_or(self.p_ctr * self.p_cvr)
    }

    /// `P(purchase | click)`. Under the chain composition `pCVR` is
    /// conditioned on the cart, so the click-conditional is `pCAR · pCVR`.
    pub fn post_click_cvr(&self) -> f64 {
        match (self.composition, self.p_car) {
            (Composition::Chain, Some(car)) => car * self.p_cvr,
            _ => self.p_cvr,
        }
    }

    /// Checks that the composed fields equal the literal products.
    pub fn composition_holds(&self) -> bool {
        let ctcar_ok = match (self.p_car, self.p_ctcar) {
            (Some(a), Some(ca)) => ca == self.p_ctr * a,
            (None, None) => true,
            _ => false,
        };
        let ctcvr_ok = match self.composition {
            Composition::Chain => {
                self.p_ctcvr == self.p_car.map(|a| self.p_ctr * a * self.p_cvr)
            }
            Composition::Independent => self.p_ctcvr.is_none(),
            _ => self.p_ctcvr == Some(self.p_ctr * self.p_cvr),
        };
        ctcar_ok && ctcvr_ok
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn products() {
        assert_eq!(PredictionBundle::parallel(0.5, 0.3, 0.4).p_ctcvr, Some(0.2));
        let z = PredictionBundle::parallel(0.0, 0.3, 0.4);
        assert_eq!((z.p_ctcar, z.p_ctcvr), (Some(0.0), Some(0.0)));
        assert_eq!(PredictionBundle::chain(0.5, 0.5, 0.8).p_ctcvr, Some(0.2));
        let degenerate = PredictionBundle::chain(0.3, 1.0, 0.7);
        assert_eq!(degenerate.p_ctcvr, PredictionBundle::two_factor(0.3, 0.7).p_ctcvr);
        assert_eq!(PredictionBundle::two_factor(1.0, 0.35).p_ctcvr, Some(0.35));
        assert_eq!(PredictionBundle::two_factor(0.6, 0.0).p_ctcvr, Some(0.0));
        let s = PredictionBundle::parallel(0.6, 0.9, 0.9);
        assert_eq!(s.p_ctcar, s.p_ctcvr);
        assert!((s.p_ctcvr.unwrap() - 0.54).abs() < 1e-15);
    }

    #[test]
    fn post_click_cvr_respects_chain() {
        assert_eq!(PredictionBundle::chain(0.1, 0.5, 0.8).post_click_cvr(), 0.4);
        assert_eq!(PredictionBundle::parallel(0.1, 0.5, 0.8).post_click_cvr(), 0.8);
        assert_eq!(PredictionBundle::independent(0.5, 0.2).ctcvr_score(), 0.1);
    }
}
