//! Tower layouts for every variant, with per-sample forward and backward.

use serde::{Deserialize, Serialize};

use crate::nn::{DenseLayer, Mlp, MlpCache};
use crate::{Error, Result};

/// Raw head outputs for one sample. `car` is absent for variants without a
/// cart task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Heads {
    pub ctr: f64,
    pub car: Option<f64>,
    pub cvr: f64,
}

/// Loss gradient w.r.t. each head output.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct HeadGrads {
    pub ctr: f64,
    pub car: f64,
    pub cvr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Network {
    SharedBottom {
        bottom: Mlp,
        ctr_head: Mlp,
        cvr_head: Mlp,
    },
    Mmoe {
        experts: Vec<Mlp>,
        ctr_gate: DenseLayer,
        cvr_gate: DenseLayer,
        ctr_tower: Mlp,
        cvr_tower: Mlp,
    },
    Esmm {
        ctr: Mlp,
        cvr: Mlp,
    },
    /// CTR, cart-given-click and purchase-given-cart towers.
    Esmm2 {
        ctr: Mlp,
        car: Mlp,
        cvr: Mlp,
    },
    /// CTR tower plus the twin conditional towers (cart, conversion).
    TwinTower {
        ctr: Mlp,
        car: Mlp,
        cvr: Mlp,
    },
    /// CTR tower plus one conditional tower serving both cart and conversion.
    Siamese {
        ctr: Mlp,
        cond: Mlp,
    },
}

#[derive(Debug, Clone)]
pub enum NetCache {
    Towers(Vec<MlpCache>),
    SharedBottom {
        bottom: MlpCache,
        ctr: MlpCache,
        cvr: MlpCache,
    },
    Mmoe {
        input: Vec<f64>,
        experts: Vec<MlpCache>,
        gate_pre: [Vec<f64>; 2],
        gates: [Vec<f64>; 2],
        towers: [MlpCache; 2],
    },
}

fn scalar(cache: &MlpCache) -> f64 {
    cache.output()[0]
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

impl Network {
    /// Checks the structural invariants: towers read the same input width,
    /// end in a single unit, twin towers are congruent, gates match experts.
    pub fn validate(&self, input_dim: usize) -> Result<()> {
        let tower = |name: &str, t: &Mlp, in_dim: usize| -> Result<()> {
            if t.in_dim() != in_dim || t.out_dim() != 1 {
                return Err(Error::Config(format!(
                    "{name} tower must map {in_dim} inputs to 1 output, has {} -> {}",
                    t.in_dim(),
                    t.out_dim()
                )));
            }
            Ok(())
        };
        match self {
            Network::SharedBottom {
                bottom,
                ctr_head,
                cvr_head,
            } => {
                if bottom.in_dim() != input_dim {
                    return Err(Error::Config("bottom width does not match embedding".into()));
                }
                tower("ctr head", ctr_head, bottom.out_dim())?;
                tower("cvr head", cvr_head, bottom.out_dim())
            }
            Network::Mmoe {
                experts,
                ctr_gate,
                cvr_gate,
                ctr_tower,
                cvr_tower,
            } => {
                let first = experts
                    .first()
                    .ok_or_else(|| Error::Config("MMoE needs at least one expert".into()))?;
                if experts.iter().any(|e| !e.same_shape(first) || e.in_dim() != input_dim) {
                    return Err(Error::Config("experts must share one shape".into()));
                }
                for g in [ctr_gate, cvr_gate] {
                    if g.out_dim() != experts.len() || g.in_dim() != input_dim {
                        return Err(Error::Config(format!(
                            "gate has {} outputs for {} experts",
                            g.out_dim(),
                            experts.len()
                        )));
                    }
                }
                tower("ctr", ctr_tower, first.out_dim())?;
                tower("cvr", cvr_tower, first.out_dim())
            }
            Network::Esmm { ctr, cvr } => {
                tower("ctr", ctr, input_dim)?;
                tower("cvr", cvr, input_dim)
            }
            Network::Esmm2 { ctr, car, cvr } => {
                tower("ctr", ctr, input_dim)?;
                tower("car", car, input_dim)?;
                tower("cvr", cvr, input_dim)
            }
            Network::TwinTower { ctr, car, cvr } => {
                tower("ctr", ctr, input_dim)?;
                tower("car", car, input_dim)?;
                tower("cvr", cvr, input_dim)?;
                if !car.same_shape(cvr) {
                    return Err(Error::Config(
                        "twin towers must have identical layer shapes".into(),
                    ));
                }
                Ok(())
            }
            Network::Siamese { ctr, cond } => {
                tower("ctr", ctr, input_dim)?;
                tower("conditional", cond, input_dim)
            }
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            Network::SharedBottom {
                bottom,
                ctr_head,
                cvr_head,
            } => Network::SharedBottom {
                bottom: bottom.zeros_like(),
                ctr_head: ctr_head.zeros_like(),
                cvr_head: cvr_head.zeros_like(),
            },
            Network::Mmoe {
                experts,
                ctr_gate,
                cvr_gate,
                ctr_tower,
                cvr_tower,
            } => Network::Mmoe {
                experts: experts.iter().map(Mlp::zeros_like).collect(),
                ctr_gate: ctr_gate.zeros_like(),
                cvr_gate: cvr_gate.zeros_like(),
                ctr_tower: ctr_tower.zeros_like(),
                cvr_tower: cvr_tower.zeros_like(),
            },
            Network::Esmm { ctr, cvr } => Network::Esmm {
                ctr: ctr.zeros_like(),
                cvr: cvr.zeros_like(),
            },
            Network::Esmm2 { ctr, car, cvr } => Network::Esmm2 {
                ctr: ctr.zeros_like(),
                car: car.zeros_like(),
                cvr: cvr.zeros_like(),
            },
            Network::TwinTower { ctr, car, cvr } => Network::TwinTower {
                ctr: ctr.zeros_like(),
                car: car.zeros_like(),
                cvr: cvr.zeros_like(),
            },
            Network::Siamese { ctr, cond } => Network::Siamese {
                ctr: ctr.zeros_like(),
                cond: cond.zeros_like(),
            },
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Heads, NetCache)> {
        match self {
            Network::Esmm { ctr, cvr } => {
                let c = ctr.forward_cached(x)?;
                let v = cvr.forward_cached(x)?;
                let heads = Heads {
                    ctr: scalar(&c),
                    car: None,
                    cvr: scalar(&v),
                };
                Ok((heads, NetCache::Towers(vec![c, v])))
            }
            Network::Esmm2 { ctr, car, cvr } | Network::TwinTower { ctr, car, cvr } => {
                let c = ctr.forward_cached(x)?;
                let a = car.forward_cached(x)?;
                let v = cvr.forward_cached(x)?;
                let heads = Heads {
                    ctr: scalar(&c),
                    car: Some(scalar(&a)),
                    cvr: scalar(&v),
                };
                Ok((heads, NetCache::Towers(vec![c, a, v])))
            }
            Network::Siamese { ctr, cond } => {
                let c = ctr.forward_cached(x)?;
                let s = cond.forward_cached(x)?;
                let p = scalar(&s);
                let heads = Heads {
                    ctr: scalar(&c),
                    car: Some(p),
                    cvr: p,
                };
                Ok((heads, NetCache::Towers(vec![c, s])))
            }
            Network::SharedBottom {
                bottom,
                ctr_head,
                cvr_head,
            } => {
                let b = bottom.forward_cached(x)?;
                let c = ctr_head.forward_cached(b.output())?;
                let v = cvr_head.forward_cached(b.output())?;
                let heads = Heads {
                    ctr: scalar(&c),
                    car: None,
                    cvr: scalar(&v),
                };
                Ok((heads, NetCache::SharedBottom { bottom: b, ctr: c, cvr: v }))
            }
            Network::Mmoe {
                experts,
                ctr_gate,
                cvr_gate,
                ctr_tower,
                cvr_tower,
            } => {
                let ex: Vec<MlpCache> = experts
                    .iter()
                    .map(|e| e.forward_cached(x))
                    .collect::<Result<_>>()?;
                let width = experts[0].out_dim();
                let mut gate_pre: [Vec<f64>; 2] = Default::default();
                let mut gates: [Vec<f64>; 2] = Default::default();
                let mut mixes: [Vec<f64>; 2] = [vec![0.0; width], vec![0.0; width]];
                for (t, gate) in [ctr_gate, cvr_gate].into_iter().enumerate() {
                    gate_pre[t] = gate.pre_activation(x)?;
                    gates[t] = softmax(&gate_pre[t]);
                    for (e, cache) in ex.iter().enumerate() {
                        for (m, h) in mixes[t].iter_mut().zip(cache.output()) {
                            *m += gates[t][e] * h;
                        }
                    }
                }
                let c = ctr_tower.forward_cached(&mixes[0])?;
                let v = cvr_tower.forward_cached(&mixes[1])?;
                let heads = Heads {
                    ctr: scalar(&c),
                    car: None,
                    cvr: scalar(&v),
                };
                Ok((
                    heads,
                    NetCache::Mmoe {
                        input: x.to_vec(),
                        experts: ex,
                        gate_pre,
                        gates,
                        towers: [c, v],
                    },
                ))
            }
        }
    }

    /// Accumulates parameter gradients into `grads` (same variant and shape)
    /// and returns the gradient w.r.t. the network input.
    pub fn backward(&self, cache: &NetCache, g: &HeadGrads, grads: &mut Network) -> Result<Vec<f64>> {
        let mismatch = || Error::Usage("forward cache does not belong to this network".into());
        match (self, cache, grads) {
            (Network::Esmm { ctr, cvr }, NetCache::Towers(c), Network::Esmm { ctr: gc, cvr: gv })
                if c.len() == 2 =>
            {
                let mut dx = ctr.backward(&c[0], &[g.ctr], gc)?;
                add_into(&mut dx, &cvr.backward(&c[1], &[g.cvr], gv)?);
                Ok(dx)
            }
            (
                Network::Esmm2 { ctr, car, cvr },
                NetCache::Towers(c),
                Network::Esmm2 {
                    ctr: gc,
                    car: ga,
                    cvr: gv,
                },
            )
            | (
                Network::TwinTower { ctr, car, cvr },
                NetCache::Towers(c),
                Network::TwinTower {
                    ctr: gc,
                    car: ga,
                    cvr: gv,
                },
            ) if c.len() == 3 => {
                let mut dx = ctr.backward(&c[0], &[g.ctr], gc)?;
                add_into(&mut dx, &car.backward(&c[1], &[g.car], ga)?);
                add_into(&mut dx, &cvr.backward(&c[2], &[g.cvr], gv)?);
                Ok(dx)
            }
            (
                Network::Siamese { ctr, cond },
                NetCache::Towers(c),
                Network::Siamese { ctr: gc, cond: gs },
            ) if c.len() == 2 => {
                let mut dx = ctr.backward(&c[0], &[g.ctr], gc)?;
                add_into(&mut dx, &cond.backward(&c[1], &[g.car + g.cvr], gs)?);
                Ok(dx)
            }
            (
                Network::SharedBottom {
                    bottom,
                    ctr_head,
                    cvr_head,
                },
                NetCache::SharedBottom {
                    bottom: cb,
                    ctr: cc,
                    cvr: cv,
                },
                Network::SharedBottom {
                    bottom: gb,
                    ctr_head: gc,
                    cvr_head: gv,
                },
            ) => {
                let mut dh = ctr_head.backward(cc, &[g.ctr], gc)?;
                add_into(&mut dh, &cvr_head.backward(cv, &[g.cvr], gv)?);
                bottom.backward(cb, &dh, gb)
            }
            (
                Network::Mmoe {
                    experts,
                    ctr_gate,
                    cvr_gate,
                    ctr_tower,
                    cvr_tower,
                },
                NetCache::Mmoe {
                    input,
                    experts: ex,
                    gate_pre,
                    gates,
                    towers,
                },
                Network::Mmoe {
                    experts: gex,
                    ctr_gate: gcg,
                    cvr_gate: gvg,
                    ctr_tower: gct,
                    cvr_tower: gvt,
                },
            ) if ex.len() == experts.len() => {
                let dmix = [
                    ctr_tower.backward(&towers[0], &[g.ctr], gct)?,
                    cvr_tower.backward(&towers[1], &[g.cvr], gvt)?,
                ];
                let mut dx = vec![0.0; input.len()];
                let gate_layers = [ctr_gate, cvr_gate];
                let gate_grads = [gcg, gvg];
                for t in 0..2 {
                    // d loss / d gate weight e = <dmix_t, h_e>, then through softmax
                    let dg: Vec<f64> = ex
                        .iter()
                        .map(|c| c.output().iter().zip(&dmix[t]).map(|(h, d)| h * d).sum())
                        .collect();
                    let dot: f64 = gates[t].iter().zip(&dg).map(|(p, d)| p * d).sum();
                    let dz: Vec<f64> = gates[t]
                        .iter()
                        .zip(&dg)
                        .map(|(p, d)| p * (d - dot))
                        .collect();
                    let gin = gate_layers[t].backward(
                        input,
                        &gate_pre[t],
                        &gate_pre[t],
                        &dz,
                        gate_grads[t],
                    )?;
                    add_into(&mut dx, &gin);
                }
                for (e, (expert, (cache, gexp))) in
                    experts.iter().zip(ex.iter().zip(gex.iter_mut())).enumerate()
                {
                    let dh: Vec<f64> = (0..dmix[0].len())
                        .map(|k| gates[0][e] * dmix[0][k] + gates[1][e] * dmix[1][k])
                        .collect();
                    add_into(&mut dx, &expert.backward(cache, &dh, gexp)?);
                }
                Ok(dx)
            }
            _ => Err(mismatch()),
        }
    }

    pub fn groups<'a>(&'a self, out: &mut Vec<(String, &'a [f64])>) {
        match self {
            Network::SharedBottom {
                bottom,
                ctr_head,
                cvr_head,
            } => {
                bottom.groups("bottom", out);
                ctr_head.groups("ctr_head", out);
                cvr_head.groups("cvr_head", out);
            }
            Network::Mmoe {
                experts,
                ctr_gate,
                cvr_gate,
                ctr_tower,
                cvr_tower,
            } => {
                for (i, e) in experts.iter().enumerate() {
                    e.groups(&format!("expert{i}"), out);
                }
                out.push(("gate_ctr.weight".into(), ctr_gate.weight()));
                out.push(("gate_ctr.bias".into(), ctr_gate.bias()));
                out.push(("gate_cvr.weight".into(), cvr_gate.weight()));
                out.push(("gate_cvr.bias".into(), cvr_gate.bias()));
                ctr_tower.groups("ctr_tower", out);
                cvr_tower.groups("cvr_tower", out);
            }
            Network::Esmm { ctr, cvr } => {
                ctr.groups("ctr", out);
                cvr.groups("cvr", out);
            }
            Network::Esmm2 { ctr, car, cvr } | Network::TwinTower { ctr, car, cvr } => {
                ctr.groups("ctr", out);
                car.groups("car", out);
                cvr.groups("cvr", out);
            }
            Network::Siamese { ctr, cond } => {
                ctr.groups("ctr", out);
                cond.groups("cond", out);
            }
        }
    }

    pub fn groups_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut [f64])>) {
        match self {
            Network::SharedBottom {
                bottom,
                ctr_head,
                cvr_head,
            } => {
                bottom.groups_mut("bottom", out);
                ctr_head.groups_mut("ctr_head", out);
                cvr_head.groups_mut("cvr_head", out);
            }
            Network::Mmoe {
                experts,
                ctr_gate,
                cvr_gate,
                ctr_tower,
                cvr_tower,
            } => {
                for (i, e) in experts.iter_mut().enumerate() {
                    e.groups_mut(&format!("expert{i}"), out);
                }
                let (w, b) = ctr_gate.params_mut();
                out.push(("gate_ctr.weight".into(), w));
                out.push(("gate_ctr.bias".into(), b));
                let (w, b) = cvr_gate.params_mut();
                out.push(("gate_cvr.weight".into(), w));
                out.push(("gate_cvr.bias".into(), b));
                ctr_tower.groups_mut("ctr_tower", out);
                cvr_tower.groups_mut("cvr_tower", out);
            }
            Network::Esmm { ctr, cvr } => {
                ctr.groups_mut("ctr", out);
                cvr.groups_mut("cvr", out);
            }
            Network::Esmm2 { ctr, car, cvr } | Network::TwinTower { ctr, car, cvr } => {
                ctr.groups_mut("ctr", out);
                car.groups_mut("car", out);
                cvr.groups_mut("cvr", out);
            }
            Network::Siamese { ctr, cond } => {
                ctr.groups_mut("ctr", out);
                cond.groups_mut("cond", out);
            }
        }
    }
}
