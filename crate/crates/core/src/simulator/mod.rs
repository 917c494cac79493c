//! Synthetic multi-session clickstream with known ground-truth conditionals.
//!
//! Every user has `n_sessions_per_user` sessions of `exposures_per_session`
//! exposures. For an exposure of item `v` to user `u`:
//!
//! * click ~ Bernoulli(p_click(u, v)),
//! * cart | click ~ Bernoulli(p_cart(u, v)),
//! * purchase | cart ~ Bernoulli(p_buy(u, v)).
//!
//! With probability `deferred_purchase_rate` a purchase is executed in a
//! uniformly chosen later session of the same user instead. It then takes one
//! exposure slot of that session as a purchase-only re-exposure of the item
//! (no click, no cart in that session). If the chosen session cannot take it,
//! the next later sessions are tried in turn. A deferred purchase that fits in
//! no later session (always the case for carts of the final session) happens
//! after the observation window and is not logged.
//!
//! Personalisation: users and items carry latent vectors `x_u, y_v ~ N(0, I_k)`
//! with `k = affinity_dim`; `z = <x_u, y_v> / sqrt(k)` and each conditional is
//! `sigmoid(offset + affinity_strength * z)`. Offsets are solved by bisection
//! so that the population rates over all (user, item) pairs equal the
//! configured base rates.
//!
//! Exported samples carry the user and item ids, sign-pattern groups of both
//! latent vectors, a bucketed affinity and whether the user carted the item in
//! an earlier session.

mod gap;

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Domain, InteractionSample};
use crate::embedding::{FeatureSchema, FieldSpec, OovPolicy, DEFAULT_EMBED_DIM};
use crate::nn::sigmoid;
use crate::{Error, Result};

pub use gap::{gap_oracle, GapCounts, GapReport, MIN_POSITIVES};

/// Purchase sparsity of the reference dataset; click sparsity is 0.06096.
pub const TABLE1_CLICK_RATE: f64 = 0.06096;
pub const TABLE1_PURCHASE_RATE: f64 = 0.01093;
pub const DEFAULT_PURCHASE_GIVEN_CART: f64 = 0.8;

/// Number of pairs used to solve the offsets when the full user x item grid
/// is larger.
const MAX_CALIBRATION_PAIRS: usize = 2_000_000;

const STREAM_LATENT: u64 = 0;
const STREAM_EVENTS: u64 = 1;
const STREAM_CALIBRATION: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatorConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_sessions_per_user: usize,
    pub exposures_per_session: usize,
    pub base_click_prob: f64,
    pub cart_given_click_prob: f64,
    pub purchase_given_cart_prob: f64,
    pub deferred_purchase_rate: f64,
    pub global_domain_cart_rate: f64,
    pub affinity_dim: usize,
    pub affinity_strength: f64,
    /// Number of buckets of the discretised affinity feature.
    pub affinity_buckets: usize,
    pub seed: u64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self::reference()
    }
}

impl SimulatorConfig {
    /// Rates matching the reference sparsity (click 0.06096, purchase 0.01093)
    /// with purchase-given-cart 0.8, and no deferred purchases.
    pub fn reference() -> Self {
        Self {
            n_users: 2000,
            n_items: 500,
            n_sessions_per_user: 10,
            exposures_per_session: 50,
            base_click_prob: TABLE1_CLICK_RATE,
            cart_given_click_prob: TABLE1_PURCHASE_RATE / (TABLE1_CLICK_RATE * DEFAULT_PURCHASE_GIVEN_CART),
            purchase_given_cart_prob: DEFAULT_PURCHASE_GIVEN_CART,
            deferred_purchase_rate: 0.0,
            global_domain_cart_rate: 0.1,
            affinity_dim: 4,
            affinity_strength: 1.0,
            affinity_buckets: 4,
            seed: 0,
        }
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.deferred_purchase_rate = rho;
        self
    }

    pub fn n_exposures(&self) -> usize {
        self.n_users * self.n_sessions_per_user * self.exposures_per_session
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sessions_per_user == 0 || self.exposures_per_session == 0 {
            return Err(Error::Config("sessions and exposures per session must be positive".into()));
        }
        if self.n_users == 0 || self.n_items == 0 {
            return Err(Error::Config("need at least one user and one item".into()));
        }
        if self.n_items < self.exposures_per_session {
            return Err(Error::Config(format!(
                "{} exposures per session cannot be drawn without replacement from {} items",
                self.exposures_per_session, self.n_items
            )));
        }
        let probs = [
            ("base_click_prob", self.base_click_prob),
            ("cart_given_click_prob", self.cart_given_click_prob),
            ("purchase_given_cart_prob", self.purchase_given_cart_prob),
            ("deferred_purchase_rate", self.deferred_purchase_rate),
            ("global_domain_cart_rate", self.global_domain_cart_rate),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !self.affinity_strength.is_finite() || self.affinity_strength < 0.0 {
            return Err(Error::Config("affinity_strength must be finite and >= 0".into()));
        }
        if self.affinity_buckets == 0 {
            return Err(Error::Config("affinity_buckets must be positive".into()));
        }
        Ok(())
    }

    /// Feature schema of the exported samples:
    /// `user, item, user_group, item_group, affinity, carted_before`
    /// (row 0 of every field reserved).
    pub fn schema(&self) -> FeatureSchema {
        let groups = group_count(self.affinity_dim);
        FeatureSchema::new(
            vec![
                FieldSpec::new("user", self.n_users + 1, DEFAULT_EMBED_DIM),
                FieldSpec::new("item", self.n_items + 1, DEFAULT_EMBED_DIM),
                FieldSpec::new("user_group", groups + 1, DEFAULT_EMBED_DIM),
                FieldSpec::new("item_group", groups + 1, DEFAULT_EMBED_DIM),
                FieldSpec::new("affinity", self.affinity_buckets + 1, DEFAULT_EMBED_DIM),
                FieldSpec::new("carted_before", 3, DEFAULT_EMBED_DIM),
            ],
            OovPolicy::ReservedBucket,
        )
        .expect("simulator schema is valid")
    }
}

/// Groups are the sign patterns of the first (up to) four latent coordinates.
fn group_count(dim: usize) -> usize {
    1 << dim.min(4)
}

fn group_of(latent: &[f64]) -> usize {
    latent
        .iter()
        .take(4)
        .enumerate()
        .fold(0, |g, (i, &x)| if x >= 0.0 { g | (1 << i) } else { g })
}

/// `sigmoid(offset + strength * z)`, or a constant when the target rate is
/// degenerate (0 or 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Constant(f64),
    Logit { offset: f64 },
}

impl Link {
    fn eval(self, strength: f64, z: f64) -> f64 {
        match self {
            Link::Constant(p) => p,
            Link::Logit { offset } => sigmoid(offset + strength * z),
        }
    }
}

/// Generative conditionals for one `(user, item)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairProbabilities {
    pub click: f64,
    pub cart_given_click: f64,
    pub buy_given_cart: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Exposure,
    Click,
    Cart,
    Purchase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub user: u32,
    pub item: u32,
    pub session: u32,
    pub domain: Domain,
    pub kind: EventKind,
    pub timestamp: u64,
}

/// Events in timestamp order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EventLog {
    pub events: Vec<Event>,
}

/// A purchase scheduled into a later session.
#[derive(Debug, Clone, Copy)]
struct Pending {
    item: u32,
    domain: Domain,
}

#[derive(Debug, Clone)]
pub struct Simulator {
    config: SimulatorConfig,
    user_latent: Vec<Vec<f64>>,
    item_latent: Vec<Vec<f64>>,
    links: [Link; 3],
}

impl Simulator {
    /// Draws the latent vectors and solves the link offsets.
    pub fn new(config: SimulatorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(STREAM_LATENT);
        let k = config.affinity_dim;
        let mut draw = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..k).map(|_| rng.sample(StandardNormal)).collect())
                .collect()
        };
        let user_latent = draw(config.n_users);
        let item_latent = draw(config.n_items);
        let mut sim = Self {
            config,
            user_latent,
            item_latent,
            links: [Link::Constant(0.0); 3],
        };
        sim.links = sim.solve_links();
        Ok(sim)
    }

    pub fn config(&self) -> &SimulatorConfig {
        &self.config
    }

    pub fn links(&self) -> [Link; 3] {
        self.links
    }

    pub fn schema(&self) -> FeatureSchema {
        self.config.schema()
    }

    fn affinity(&self, user: usize, item: usize) -> f64 {
        let k = self.config.affinity_dim;
        if k == 0 {
            return 0.0;
        }
        let dot: f64 = self.user_latent[user]
            .iter()
            .zip(&self.item_latent[item])
            .map(|(a, b)| a * b)
            .sum();
        dot / (k as f64).sqrt()
    }

    fn calibration_affinities(&self) -> Vec<f64> {
        let (nu, ni) = (self.config.n_users, self.config.n_items);
        if nu * ni <= MAX_CALIBRATION_PAIRS {
            (0..nu)
                .flat_map(|u| (0..ni).map(move |i| (u, i)))
                .map(|(u, i)| self.affinity(u, i))
                .collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
            rng.set_stream(STREAM_CALIBRATION);
            (0..MAX_CALIBRATION_PAIRS)
                .map(|_| self.affinity(rng.random_range(0..nu), rng.random_range(0..ni)))
                .collect()
        }
    }

    /// Solves, in order, the click, cart and purchase offsets so that
    /// `E[p_c] = click`, `E[p_c p_a] / E[p_c] = cart | click` and
    /// `E[p_c p_a p_b] / E[p_c p_a] = purchase | cart` over the population.
    fn solve_links(&self) -> [Link; 3] {
        let c = &self.config;
        let targets = [c.base_click_prob, c.cart_given_click_prob, c.purchase_given_cart_prob];
        if c.affinity_dim == 0 || c.affinity_strength == 0.0 {
            return targets.map(Link::Constant);
        }
        let s = c.affinity_strength;
        let zs = self.calibration_affinities();
        // weight of each pair in the conditional average of the next stage
        let mut weights = vec![1.0; zs.len()];
        let mut links = [Link::Constant(0.0); 3];
        for (stage, &target) in targets.iter().enumerate() {
            let link = if target <= 0.0 || target >= 1.0 || weights.iter().all(|&w| w == 0.0) {
                Link::Constant(target)
            } else {
                let total: f64 = weights.iter().sum();
                let mean = |offset: f64| -> f64 {
                    zs.iter()
                        .zip(&weights)
                        .map(|(z, w)| w * sigmoid(offset + s * z))
                        .sum::<f64>()
                        / total
                };
                let (mut lo, mut hi) = (-40.0, 40.0);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if mean(mid) < target {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if hi - lo < 1e-14 {
                        break;
                    }
                }
                Link::Logit {
                    offset: 0.5 * (lo + hi),
                }
            };
            links[stage] = link;
            for (w, z) in weights.iter_mut().zip(&zs) {
                *w *= link.eval(s, *z);
            }
        }
        links
    }

    /// Exact generative conditionals for a pair.
    pub fn ground_truth_probabilities(&self, user: u32, item: u32) -> PairProbabilities {
        let z = self.affinity(user as usize, item as usize);
        let s = self.config.affinity_strength;
        PairProbabilities {
            click: self.links[0].eval(s, z),
            cart_given_click: self.links[1].eval(s, z),
            buy_given_cart: self.links[2].eval(s, z),
        }
    }

    /// Feature ids of an exposure in schema order. `carted_before` tells
    /// whether the user carted the item in an earlier session.
    pub fn features(&self, user: u32, item: u32, carted_before: bool) -> Vec<u32> {
        let z = self.affinity(user as usize, item as usize);
        let b = self.config.affinity_buckets;
        let bucket = (((z + 2.0) / 4.0) * b as f64).floor().clamp(0.0, (b - 1) as f64) as u32;
        vec![
            user + 1,
            item + 1,
            group_of(&self.user_latent[user as usize]) as u32 + 1,
            group_of(&self.item_latent[item as usize]) as u32 + 1,
            bucket + 1,
            carted_before as u32 + 1,
        ]
    }

    /// Streams every event, user by user and session by session, in timestamp order.
    pub fn generate<F: FnMut(&Event)>(&self, mut sink: F) {
        let c = &self.config;
        let (n_s, n_e) = (c.n_sessions_per_user, c.exposures_per_session);
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        rng.set_stream(STREAM_EVENTS);
        let mut perm: Vec<u32> = (0..c.n_items as u32).collect();
        let mut pending: Vec<Vec<Pending>> = vec![Vec::new(); n_s];
        for user in 0..c.n_users as u32 {
            for p in pending.iter_mut() {
                p.clear();
            }
            for session in 0..n_s {
                let s = session as u32;
                let stamp = |slot: usize, phase: u64| -> u64 {
                    (((user as u64 * n_s as u64 + session as u64) * n_e as u64 + slot as u64) << 2) | phase
                };
                let mut emit = |item: u32, domain: Domain, kind: EventKind, slot: usize, phase: u64| {
                    sink(&Event {
                        user,
                        item,
                        session: s,
                        domain,
                        kind,
                        timestamp: stamp(slot, phase),
                    })
                };
                let reexposed = std::mem::take(&mut pending[session]);
                let blocked: HashSet<u32> = reexposed.iter().map(|p| p.item).collect();
                for (slot, p) in reexposed.iter().enumerate() {
                    emit(p.item, Domain::Rec, EventKind::Exposure, slot, 0);
                    emit(p.item, p.domain, EventKind::Purchase, slot, 3);
                }
                // organic exposures: partial Fisher-Yates, skipping blocked items
                let mut slot = reexposed.len();
                let mut k = 0;
                while slot < n_e {
                    let j = rng.random_range(k..perm.len());
                    perm.swap(k, j);
                    let item = perm[k];
                    k += 1;
                    if blocked.contains(&item) {
                        continue;
                    }
                    emit(item, Domain::Rec, EventKind::Exposure, slot, 0);
                    let pr = self.ground_truth_probabilities(user, item);
                    if rng.random::<f64>() < pr.click {
                        emit(item, Domain::Rec, EventKind::Click, slot, 1);
                        if rng.random::<f64>() < pr.cart_given_click {
                            let domain = if rng.random::<f64>() < c.global_domain_cart_rate {
                                Domain::Search
                            } else {
                                Domain::Rec
                            };
                            emit(item, domain, EventKind::Cart, slot, 2);
                            if rng.random::<f64>() < pr.buy_given_cart {
                                let deferred = rng.random::<f64>() < c.deferred_purchase_rate;
                                let target = (deferred && session + 1 < n_s)
                                    .then(|| rng.random_range(session + 1..n_s));
                                // the drawn session first, then the following ones, wrapping
                                // around within the later sessions
                                let accepted = target.and_then(|t| {
                                    let later = n_s - session - 1;
                                    (0..later)
                                        .map(|k| session + 1 + (t - session - 1 + k) % later)
                                        .find(|&t| {
                                            pending[t].len() < n_e
                                                && pending[t].iter().all(|p| p.item != item)
                                        })
                                });
                                match accepted {
                                    Some(t) => pending[t].push(Pending { item, domain }),
                                    None if deferred => {}
                                    None => emit(item, domain, EventKind::Purchase, slot, 3),
                                }
                            }
                        }
                    }
                    slot += 1;
                }
            }
        }
    }

    pub fn simulate(&self) -> EventLog {
        let mut events = Vec::with_capacity(self.config.n_exposures() + self.config.n_exposures() / 8);
        self.generate(|e| events.push(*e));
        EventLog { events }
    }

    /// One raw sample per exposure, labels taken from events within its session.
    pub fn samples(&self, log: &EventLog) -> Vec<InteractionSample> {
        let mut out: Vec<InteractionSample> = Vec::with_capacity(self.config.n_exposures());
        // first cart session of each item, for the current user
        let mut first_cart: std::collections::HashMap<u32, u32> = Default::default();
        let mut current_user = None;
        for e in &log.events {
            if current_user != Some(e.user) {
                first_cart.clear();
                current_user = Some(e.user);
            }
            if e.kind == EventKind::Cart {
                first_cart.entry(e.item).or_insert(e.session);
            }
            match e.kind {
                EventKind::Exposure => out.push(InteractionSample {
                    user_id: e.user,
                    item_id: e.item,
                    session_id: e.session,
                    feature_ids: self.features(
                        e.user,
                        e.item,
                        first_cart.get(&e.item).is_some_and(|&s| s < e.session),
                    ),
                    domain: Domain::Rec,
                    click: false,
                    cart: false,
                    purchase: false,
                    calibrated: false,
                    cart_origin_session: None,
                }),
                kind => {
                    let s = out
                        .last_mut()
                        .filter(|s| s.key() == (e.user, e.item, e.session))
                        .expect("events follow their exposure");
                    match kind {
                        EventKind::Click => s.click = true,
                        EventKind::Cart => {
                            s.cart = true;
                            s.domain = e.domain;
                        }
                        EventKind::Purchase => {
                            s.purchase = true;
                            s.domain = e.domain;
                        }
                        EventKind::Exposure => unreachable!(),
                    }
                }
            }
        }
        out
    }

    /// Simulates and returns the raw samples.
    pub fn dataset(&self) -> Vec<InteractionSample> {
        self.samples(&self.simulate())
    }
}

/// Simulates `config` with its seed replaced by `seed`.
pub fn simulate(config: &SimulatorConfig, seed: u64) -> Result<EventLog> {
    let config = SimulatorConfig { seed, ..config.clone() };
    Ok(Simulator::new(config)?.simulate())
}

/// Writes the raw samples of `log` to `path`.
pub fn export_dataset(sim: &Simulator, log: &EventLog, path: &std::path::Path) -> Result<usize> {
    let samples = sim.samples(log);
    crate::data::write_samples(path, &sim.schema().hash(), &samples)?;
    Ok(samples.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogViolation {
    pub index: usize,
    pub detail: String,
}

impl EventLog {
    /// Checks event ordering and the funnel: a rec-domain cart needs a prior
    /// click on the same `(user, item, session)`, every purchase a prior cart
    /// on the same `(user, item)` in an earlier or the same session, and every
    /// event an exposure of its `(user, item, session)`.
    pub fn check_invariants(&self) -> Vec<LogViolation> {
        let mut out = Vec::new();
        let mut exposed = HashSet::new();
        let mut clicked = HashSet::new();
        let mut carts: std::collections::HashMap<(u32, u32), Vec<u32>> = Default::default();
        let mut last = None;
        for (i, e) in self.events.iter().enumerate() {
            if last.is_some_and(|t| e.timestamp <= t) {
                out.push(LogViolation {
                    index: i,
                    detail: "timestamps not strictly increasing".into(),
                });
            }
            last = Some(e.timestamp);
            let key = (e.user, e.item, e.session);
            match e.kind {
                EventKind::Exposure => {
                    if !exposed.insert(key) {
                        out.push(LogViolation {
                            index: i,
                            detail: "item exposed twice in one session".into(),
                        });
                    }
                }
                _ if !exposed.contains(&key) => out.push(LogViolation {
                    index: i,
                    detail: format!("{:?} without exposure", e.kind),
                }),
                EventKind::Click => {
                    clicked.insert(key);
                }
                EventKind::Cart => {
                    if e.domain == Domain::Rec && !clicked.contains(&key) {
                        out.push(LogViolation {
                            index: i,
                            detail: "rec-domain cart without click".into(),
                        });
                    }
                    carts.entry((e.user, e.item)).or_default().push(e.session);
                }
                EventKind::Purchase => {
                    let ok = carts
                        .get(&(e.user, e.item))
                        .is_some_and(|v| v.iter().any(|&s| s <= e.session));
                    if !ok {
                        out.push(LogViolation {
                            index: i,
                            detail: "purchase without an earlier cart".into(),
                        });
                    }
                }
            }
        }
        out
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }
}
