//! Cross-entropy task losses over the exposure space, the parameter KL between
//! the twin towers, and the weighted per-variant training objectives.

use std::borrow::Borrow;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{Domain, InteractionSample};
use crate::model::{Gradients, HeadGrads, Model, PredictionBundle, Variant};
use crate::{Error, Result};

/// Probabilities are clipped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

pub fn clip_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

pub fn cross_entropy(label: bool, p: f64) -> f64 {
    let p = clip_prob(p);
    if label {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Derivative of [`cross_entropy`] w.r.t. `p`; zero where the clip is active.
pub fn ce_grad(label: bool, p: f64) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        return 0.0;
    }
    if label {
        -1.0 / p
    } else {
        1.0 / (1.0 - p)
    }
}

pub fn mean_cross_entropy(pairs: &[(bool, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(pairs.iter().map(|&(y, p)| cross_entropy(y, p)).sum::<f64>() / pairs.len() as f64)
}

/// The three exposure-space losses `(L_CTR, L_CTCAR, L_CTCVR)` for bundles
/// that carry a cart composition. Labels must respect the calibrated
/// hierarchy when flagged calibrated.
pub fn task_losses<S: Borrow<InteractionSample>>(
    bundles: &[PredictionBundle],
    labels: &[S],
) -> Result<(f64, f64, f64)> {
    if bundles.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if bundles.len() != labels.len() {
        return Err(Error::Shape("one label row per prediction required".into()));
    }
    check_hierarchy(labels)?;
    let n = bundles.len() as f64;
    let (mut ctr, mut ctcar, mut ctcvr) = (0.0, 0.0, 0.0);
    for (b, s) in bundles.iter().zip(labels) {
        let s = s.borrow();
        ctr += cross_entropy(s.ctr_label(), b.p_ctr);
        let pa = b
            .p_ctcar
            .ok_or_else(|| Error::Usage("bundle has no cart composition".into()))?;
        ctcar += cross_entropy(s.ctcar_label(), pa);
        ctcvr += cross_entropy(s.ctcvr_label(), b.ctcvr_score());
    }
    Ok((ctr / n, ctcar / n, ctcvr / n))
}

fn check_hierarchy<S: Borrow<InteractionSample>>(batch: &[S]) -> Result<()> {
    for (i, s) in batch.iter().enumerate() {
        let s = s.borrow();
        if s.calibrated && !(s.purchase <= s.cart && s.cart <= s.click) {
            return Err(Error::Hierarchy {
                index: i,
                detail: format!(
                    "user {} item {} session {} has c={} a={} o={}",
                    s.user_id, s.item_id, s.session_id, s.click as u8, s.cart as u8, s.purchase as u8
                ),
            });
        }
    }
    Ok(())
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// `KL(softmax(a) || softmax(b))` over flattened parameter vectors.
pub fn parameter_kl(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(parameter_kl_with_grads(a, b)?.kl)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KlGrads {
    pub kl: f64,
    /// Gradient w.r.t. `a` (the teacher).
    pub grad_a: Vec<f64>,
    /// Gradient w.r.t. `b` (the student): `softmax(b) - softmax(a)`.
    pub grad_b: Vec<f64>,
}

pub fn parameter_kl_with_grads(a: &[f64], b: &[f64]) -> Result<KlGrads> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Config(format!(
            "parameter KL needs congruent non-empty towers, got {} and {} values",
            a.len(),
            b.len()
        )));
    }
    let (la, lb) = (log_softmax(a), log_softmax(b));
    let (pa, pb) = (softmax(a), softmax(b));
    let kl = pa
        .iter()
        .zip(la.iter().zip(&lb))
        .map(|(p, (x, y))| p * (x - y))
        .sum::<f64>()
        .max(0.0);
    let grad_b = pb.iter().zip(&pa).map(|(q, p)| q - p).collect();
    let grad_a = pa
        .iter()
        .zip(la.iter().zip(&lb))
        .map(|(p, (x, y))| p * (x - y - kl))
        .collect();
    Ok(KlGrads { kl, grad_a, grad_b })
}

/// Which towers the KL term trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlMode {
    /// The cart tower is a fixed target; only the conversion tower moves.
    #[default]
    TeacherStudent,
    /// Both towers receive the KL gradient.
    Symmetric,
    /// No KL term at all (unconstrained twin towers).
    Off,
}

impl fmt::Display for KlMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KlMode::TeacherStudent => "teacher-student",
            KlMode::Symmetric => "symmetric",
            KlMode::Off => "off",
        })
    }
}

/// Loss weights. `kl` multiplies the twin-tower KL and `ctcar_global` the
/// cart loss on global-domain samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub ctr: f64,
    /// Conversion task: `L_CTCVR`, or the clicked-space CVR loss of the
    /// Shared Bottom / MMoE baselines.
    pub ctcvr: f64,
    /// Cart task on the recommendation domain.
    pub ctcar: f64,
    pub ctcar_global: f64,
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ctr: 1.0,
            ctcvr: 1.0,
            ctcar: 1.0,
            ctcar_global: 0.5,
            kl: 0.1,
        }
    }
}

impl LossWeights {
    /// Defaults with the KL weight zeroed for variants where it must be zero.
    pub fn for_variant(variant: Variant) -> Self {
        let mut w = Self::default();
        if variant == Variant::Esms2 {
            w.kl = 0.0;
        }
        w
    }

    pub fn validate(&self, variant: Variant) -> Result<()> {
        let named = [
            ("ctr", self.ctr),
            ("ctcvr", self.ctcvr),
            ("ctcar", self.ctcar),
            ("ctcar_global", self.ctcar_global),
            ("kl", self.kl),
        ];
        for (name, w) in named {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("loss weight `{name}` must be finite and >= 0, got {w}")));
            }
        }
        if variant == Variant::Esms2 && self.kl != 0.0 {
            return Err(Error::Config(
                "esms2 has a single conditional tower; the kl weight must be 0".into(),
            ));
        }
        Ok(())
    }
}

/// Per-term batch losses and their weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ctr: f64,
    pub l_ctcar: f64,
    pub l_ctcvr: f64,
    pub l_ctcar_global: f64,
    /// Clicked-space CVR loss (Shared Bottom / MMoE only).
    pub l_cvr: f64,
    pub l_kl: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recomputes the weighted sum from the components.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        w.ctr * self.l_ctr
            + w.ctcvr * (self.l_ctcvr + self.l_cvr)
            + w.ctcar * self.l_ctcar
            + w.ctcar_global * self.l_ctcar_global
            + w.kl * self.l_kl
    }

    pub fn is_finite(&self) -> bool {
        [
            self.l_ctr,
            self.l_ctcar,
            self.l_ctcvr,
            self.l_ctcar_global,
            self.l_cvr,
            self.l_kl,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// A variant's training objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    variant: Variant,
    weights: LossWeights,
    kl_mode: KlMode,
}

impl Objective {
    pub fn new(variant: Variant, weights: LossWeights, kl_mode: KlMode) -> Result<Self> {
        weights.validate(variant)?;
        Ok(Self {
            variant,
            weights,
            kl_mode,
        })
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    pub fn kl_mode(&self) -> KlMode {
        self.kl_mode
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    fn kl_active(&self) -> bool {
        self.variant.has_twin_towers() && self.kl_mode != KlMode::Off && self.weights.kl != 0.0
    }

    pub fn value<S: Borrow<InteractionSample>>(&self, model: &Model, batch: &[S]) -> Result<LossBreakdown> {
        self.run(model, batch, None, None)
    }

    /// Value and gradients; gradients are added into `grads`.
    pub fn value_and_grad<S: Borrow<InteractionSample>>(
        &self,
        model: &Model,
        batch: &[S],
        grads: &mut Gradients,
    ) -> Result<LossBreakdown> {
        self.run(model, batch, None, Some(grads))
    }

    /// Value with the KL teacher pinned to `teacher` (flattened cart tower)
    /// instead of the model's current cart tower. Under the teacher/student
    /// mode this is the function whose derivative the analytic gradient is.
    pub fn value_with_teacher<S: Borrow<InteractionSample>>(
        &self,
        model: &Model,
        batch: &[S],
        teacher: &[f64],
    ) -> Result<LossBreakdown> {
        self.run(model, batch, Some(teacher), None)
    }

    fn run<S: Borrow<InteractionSample>>(
        &self,
        model: &Model,
        batch: &[S],
        teacher: Option<&[f64]>,
        mut grads: Option<&mut Gradients>,
    ) -> Result<LossBreakdown> {
        if model.variant() != self.variant {
            return Err(Error::Config(format!(
                "objective for {} applied to a {} model",
                self.variant,
                model.variant()
            )));
        }
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        check_hierarchy(batch)?;
        let v = self.variant;
        let w = &self.weights;
        let n = batch.len() as f64;
        let n_search = batch
            .iter()
            .filter(|s| (*s).borrow().domain == Domain::Search)
            .count() as f64;
        let n_rec = n - n_search;
        let n_clicked = batch.iter().filter(|s| (*s).borrow().click).count() as f64;
        let global = v.uses_global_cart();
        // Search-domain samples only feed the cart loss through the global term.
        let (rec_scale, global_scale) = (
            if n_rec > 0.0 { 1.0 / n_rec } else { 0.0 },
            if n_search > 0.0 && global { 1.0 / n_search } else { 0.0 },
        );
        let cvr_scale = if n_clicked > 0.0 { 1.0 / n_clicked } else { 0.0 };

        let mut out = LossBreakdown::default();
        for s in batch {
            let s = s.borrow();
            let (b, cache) = model.forward(&s.feature_ids)?;
            let mut hg = HeadGrads::default();
            let ctr = b.p_ctr;
            out.l_ctr += cross_entropy(s.click, ctr) / n;
            hg.ctr += w.ctr * ce_grad(s.click, ctr) / n;

            if v.clicked_space_cvr() {
                if s.click {
                    out.l_cvr += cross_entropy(s.purchase, b.p_cvr) * cvr_scale;
                    hg.cvr += w.ctcvr * ce_grad(s.purchase, b.p_cvr) * cvr_scale;
                }
            } else {
                let y = s.ctcvr_label();
                let p = b.ctcvr_score();
                out.l_ctcvr += cross_entropy(y, p) / n;
                let g = w.ctcvr * ce_grad(y, p) / n;
                match (v, b.p_car) {
                    (Variant::Esmm2, Some(car)) => {
                        hg.ctr += g * car * b.p_cvr;
                        hg.car += g * ctr * b.p_cvr;
                        hg.cvr += g * ctr * car;
                    }
                    _ => {
                        hg.ctr += g * b.p_cvr;
                        hg.cvr += g * ctr;
                    }
                }
            }

            if let (Some(car), Some(p)) = (b.p_car, b.p_ctcar) {
                let y = s.ctcar_label();
                let (scale, weight, slot) = match s.domain {
                    Domain::Rec => (rec_scale, w.ctcar, &mut out.l_ctcar),
                    Domain::Search => (global_scale, w.ctcar_global, &mut out.l_ctcar_global),
                };
                if scale > 0.0 {
                    *slot += cross_entropy(y, p) * scale;
                    let g = weight * ce_grad(y, p) * scale;
                    hg.ctr += g * car;
                    hg.car += g * ctr;
                }
            }

            if let Some(gr) = grads.as_deref_mut() {
                model.backward(&s.feature_ids, &cache, &hg, gr)?;
            }
        }

        if self.kl_active() {
            let (car, cvr) = model.twin_towers().expect("twin-tower variant");
            let (a, b) = (car.flatten(), cvr.flatten());
            let a = teacher.map(<[f64]>::to_vec).unwrap_or(a);
            let kg = parameter_kl_with_grads(&a, &b)?;
            out.l_kl = kg.kl;
            if let Some(gr) = grads {
                let (ga, gb) = gr.twin_towers_mut().expect("twin-tower gradients");
                let scaled: Vec<f64> = kg.grad_b.iter().map(|g| w.kl * g).collect();
                gb.add_flat(&scaled)?;
                if self.kl_mode == KlMode::Symmetric {
                    let scaled: Vec<f64> = kg.grad_a.iter().map(|g| w.kl * g).collect();
                    ga.add_flat(&scaled)?;
                }
            }
        } else if v.has_twin_towers() && self.kl_mode != KlMode::Off {
            // Reported for diagnostics even when its weight is zero.
            let (car, cvr) = model.twin_towers().expect("twin-tower variant");
            out.l_kl = parameter_kl(&car.flatten(), &cvr.flatten())?;
        }
        out.total = out.weighted_sum(w);
        Ok(out)
    }
}

fn require(model: &Model, allowed: &[Variant], name: &str) -> Result<()> {
    if allowed.contains(&model.variant()) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} objective does not apply to {}", model.variant())))
    }
}

/// ESMC: CTR + CTCVR + CTCAR + KL(θ_car ‖ θ_cvr).
pub fn esmc_objective<S: Borrow<InteractionSample>>(
    model: &Model,
    batch: &[S],
    weights: &LossWeights,
    grads: Option<&mut Gradients>,
) -> Result<LossBreakdown> {
    require(model, &[Variant::Esmc], "esmc")?;
    dispatch(model, batch, weights, KlMode::TeacherStudent, grads)
}

/// ESMS: CTR + CTCVR + CTCAR through one shared conditional tower.
pub fn esms_objective<S: Borrow<InteractionSample>>(
    model: &Model,
    batch: &[S],
    weights: &LossWeights,
    grads: Option<&mut Gradients>,
) -> Result<LossBreakdown> {
    require(model, &[Variant::Esms], "esms")?;
    dispatch(model, batch, weights, KlMode::Off, grads)
}

/// ESMG forms: adds the cart loss over global-domain samples.
pub fn esmg_objective<S: Borrow<InteractionSample>>(
    model: &Model,
    batch: &[S],
    weights: &LossWeights,
    grads: Option<&mut Gradients>,
) -> Result<LossBreakdown> {
    require(model, &[Variant::Esmc2, Variant::Esms2], "esmg")?;
    dispatch(model, batch, weights, KlMode::TeacherStudent, grads)
}

fn dispatch<S: Borrow<InteractionSample>>(
    model: &Model,
    batch: &[S],
    weights: &LossWeights,
    kl_mode: KlMode,
    grads: Option<&mut Gradients>,
) -> Result<LossBreakdown> {
    let obj = Objective::new(model.variant(), weights.clone(), kl_mode)?;
    match grads {
        Some(g) => obj.value_and_grad(model, batch, g),
        None => obj.value(model, batch),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_values() {
        assert!(cross_entropy(true, 1.0 - PROB_EPS) < 2e-7);
        assert!((cross_entropy(false, 0.5) - std::f64::consts::LN_2).abs() < 1e-15);
        let m = mean_cross_entropy(&[(true, 0.9), (false, 0.2)]).unwrap();
        assert!((m - 0.164252).abs() < 1e-6);
        assert!(mean_cross_entropy(&[]).is_err());
        assert!(cross_entropy(true, 0.0).is_finite());
    }

    #[test]
    fn kl_known_value() {
        // softmax([0, 0]) = (0.5, 0.5); softmax([0, ln 3]) = (0.25, 0.75)
        let kl = parameter_kl(&[0.0, 0.0], &[0.0, 3f64.ln()]).unwrap();
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl - expected).abs() < 1e-15);
        assert!((kl - 0.143841).abs() < 1e-6);
        assert_eq!(parameter_kl(&[0.3, -1.0, 2.0], &[0.3, -1.0, 2.0]).unwrap(), 0.0);
        assert!(matches!(parameter_kl(&[1.0], &[1.0, 2.0]), Err(Error::Config(_))));
    }

    #[test]
    fn kl_gradients_match_finite_differences() {
        let a = [0.4, -0.3, 1.1, 0.0];
        let b = [-0.2, 0.5, 0.7, 0.3];
        let g = parameter_kl_with_grads(&a, &b).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            let (mut bp, mut bm) = (b, b);
            bp[i] += h;
            bm[i] -= h;
            let num = (parameter_kl(&a, &bp).unwrap() - parameter_kl(&a, &bm).unwrap()) / (2.0 * h);
            assert!((num - g.grad_b[i]).abs() < 1e-8);
            let (mut ap, mut am) = (a, a);
            ap[i] += h;
            am[i] -= h;
            let num = (parameter_kl(&ap, &b).unwrap() - parameter_kl(&am, &b).unwrap()) / (2.0 * h);
            assert!((num - g.grad_a[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate(Variant::Esmc).is_ok());
        assert!(LossWeights::default().validate(Variant::Esms2).is_err());
        assert!(LossWeights::for_variant(Variant::Esms2).validate(Variant::Esms2).is_ok());
        let neg = LossWeights {
            ctr: -1.0,
            ..LossWeights::default()
        };
        assert!(matches!(neg.validate(Variant::Esmm), Err(Error::Config(_))));
    }
}
