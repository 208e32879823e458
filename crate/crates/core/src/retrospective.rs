//! History integration: how the recursive block sees the initial latent
//! state `z0` together with the previous iteration's state `z_prev`.
//!
//! Five mechanisms merge the two streams once, before the recursive block
//! runs ([`integrate`]). Cross-attention instead leaves the block input at
//! `z0` and adds a causal cross-attention sub-layer to every recursive layer
//! that reads `z_prev` as memory ([`xattn_sublayer`]).
//!
//! Added parameter counts, for model width `d` and `r` recursive layers:
//!
//! | mechanism | parameters          |
//! |-----------|---------------------|
//! | init      | 0                   |
//! | add       | 0                   |
//! | catproj   | `3d^2 + 2d`         |
//! | gate      | `2d^2 + d`          |
//! | modinj    | `2d^2 + 4d`         |
//! | xattn     | `r * (6d^2 + 8d)`   |

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::params::{ParamGroup, ParamStore};
use crate::model::LatentVar;
use crate::numerics::{AttnShape, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MechanismKind {
    Init,
    Add,
    CatProj,
    Gate,
    ModInj,
    XAttn,
}

impl MechanismKind {
    pub const ALL: [MechanismKind; 6] = [
        MechanismKind::Init,
        MechanismKind::Add,
        MechanismKind::CatProj,
        MechanismKind::Gate,
        MechanismKind::ModInj,
        MechanismKind::XAttn,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            MechanismKind::Init => "init",
            MechanismKind::Add => "add",
            MechanismKind::CatProj => "catproj",
            MechanismKind::Gate => "gate",
            MechanismKind::ModInj => "modinj",
            MechanismKind::XAttn => "xattn",
        }
    }

    /// Closed-form count of parameters the mechanism adds to a model.
    pub fn added_param_count(&self, d: usize, recursive_layers: usize) -> usize {
        match self {
            MechanismKind::Init | MechanismKind::Add => 0,
            MechanismKind::CatProj => 3 * d * d + 2 * d,
            MechanismKind::Gate => 2 * d * d + d,
            MechanismKind::ModInj => 2 * d * d + 4 * d,
            MechanismKind::XAttn => recursive_layers * (6 * d * d + 8 * d),
        }
    }
}

impl fmt::Display for MechanismKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MechanismKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MechanismKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown mechanism `{s}` (expected one of init, add, catproj, gate, modinj, xattn)"
                ))
            })
    }
}

/// Parameter indices of one cross-attention sub-layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct XAttnLayer {
    pub ln_g: usize,
    pub ln_b: usize,
    pub mem1_w: usize,
    pub mem1_b: usize,
    pub mem2_w: usize,
    pub mem2_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

/// Indices into the model's [`ParamStore`] for the active mechanism.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IntegrationParams {
    None,
    CatProj { w1: usize, b1: usize, w2: usize, b2: usize },
    Gate { w: usize, b: usize },
    ModInj {
        ln_g: usize,
        ln_b: usize,
        scale_w: usize,
        scale_b: usize,
        shift_w: usize,
        shift_b: usize,
    },
    XAttn(Vec<XAttnLayer>),
}

impl IntegrationParams {
    /// Registers the parameters for `kind` in `store` (group [`ParamGroup::New`]).
    ///
    /// Output-side projections that would perturb the pretrained function
    /// (the cross-attention output and the modulation affines) start at zero.
    pub fn init<S: Scalar>(
        kind: MechanismKind,
        d: usize,
        recursive_layers: usize,
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
    ) -> Self {
        let g = ParamGroup::New;
        let std = 0.02;
        match kind {
            MechanismKind::Init | MechanismKind::Add => IntegrationParams::None,
            MechanismKind::CatProj => IntegrationParams::CatProj {
                w1: store.add_normal("retro.catproj.w1", &[2 * d, d], std, g, rng),
                b1: store.add_full("retro.catproj.b1", &[d], 0.0, g),
                w2: store.add_normal("retro.catproj.w2", &[d, d], std, g, rng),
                b2: store.add_full("retro.catproj.b2", &[d], 0.0, g),
            },
            MechanismKind::Gate => IntegrationParams::Gate {
                w: store.add_normal("retro.gate.w", &[2 * d, d], std, g, rng),
                b: store.add_full("retro.gate.b", &[d], 0.0, g),
            },
            MechanismKind::ModInj => IntegrationParams::ModInj {
                ln_g: store.add_full("retro.modinj.ln.gamma", &[d], 1.0, g),
                ln_b: store.add_full("retro.modinj.ln.beta", &[d], 0.0, g),
                scale_w: store.add_full("retro.modinj.scale.w", &[d, d], 0.0, g),
                scale_b: store.add_full("retro.modinj.scale.b", &[d], 0.0, g),
                shift_w: store.add_full("retro.modinj.shift.w", &[d, d], 0.0, g),
                shift_b: store.add_full("retro.modinj.shift.b", &[d], 0.0, g),
            },
            MechanismKind::XAttn => IntegrationParams::XAttn(
                (0..recursive_layers)
                    .map(|i| {
                        let p = format!("retro.xattn.{i}");
                        XAttnLayer {
                            ln_g: store.add_full(format!("{p}.ln.gamma"), &[d], 1.0, g),
                            ln_b: store.add_full(format!("{p}.ln.beta"), &[d], 0.0, g),
                            mem1_w: store.add_normal(format!("{p}.mem1.w"), &[d, d], std, g, rng),
                            mem1_b: store.add_full(format!("{p}.mem1.b"), &[d], 0.0, g),
                            mem2_w: store.add_normal(format!("{p}.mem2.w"), &[d, d], std, g, rng),
                            mem2_b: store.add_full(format!("{p}.mem2.b"), &[d], 0.0, g),
                            wq: store.add_normal(format!("{p}.wq"), &[d, d], std, g, rng),
                            bq: store.add_full(format!("{p}.bq"), &[d], 0.0, g),
                            wk: store.add_normal(format!("{p}.wk"), &[d, d], std, g, rng),
                            bk: store.add_full(format!("{p}.bk"), &[d], 0.0, g),
                            wv: store.add_normal(format!("{p}.wv"), &[d, d], std, g, rng),
                            bv: store.add_full(format!("{p}.bv"), &[d], 0.0, g),
                            wo: store.add_full(format!("{p}.wo"), &[d, d], 0.0, g),
                            bo: store.add_full(format!("{p}.bo"), &[d], 0.0, g),
                        }
                    })
                    .collect(),
            ),
        }
    }

    /// Rebuilds indices from parameter names, for checkpoint loading.
    pub fn locate<S: Scalar>(kind: MechanismKind, recursive_layers: usize, store: &ParamStore<S>) -> Result<Self> {
        let ix = |name: String| {
            store
                .index_of(&name)
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
        };
        Ok(match kind {
            MechanismKind::Init | MechanismKind::Add => IntegrationParams::None,
            MechanismKind::CatProj => IntegrationParams::CatProj {
                w1: ix("retro.catproj.w1".into())?,
                b1: ix("retro.catproj.b1".into())?,
                w2: ix("retro.catproj.w2".into())?,
                b2: ix("retro.catproj.b2".into())?,
            },
            MechanismKind::Gate => IntegrationParams::Gate {
                w: ix("retro.gate.w".into())?,
                b: ix("retro.gate.b".into())?,
            },
            MechanismKind::ModInj => IntegrationParams::ModInj {
                ln_g: ix("retro.modinj.ln.gamma".into())?,
                ln_b: ix("retro.modinj.ln.beta".into())?,
                scale_w: ix("retro.modinj.scale.w".into())?,
                scale_b: ix("retro.modinj.scale.b".into())?,
                shift_w: ix("retro.modinj.shift.w".into())?,
                shift_b: ix("retro.modinj.shift.b".into())?,
            },
            MechanismKind::XAttn => {
                let mut layers = Vec::with_capacity(recursive_layers);
                for i in 0..recursive_layers {
                    let p = format!("retro.xattn.{i}");
                    layers.push(XAttnLayer {
                        ln_g: ix(format!("{p}.ln.gamma"))?,
                        ln_b: ix(format!("{p}.ln.beta"))?,
                        mem1_w: ix(format!("{p}.mem1.w"))?,
                        mem1_b: ix(format!("{p}.mem1.b"))?,
                        mem2_w: ix(format!("{p}.mem2.w"))?,
                        mem2_b: ix(format!("{p}.mem2.b"))?,
                        wq: ix(format!("{p}.wq"))?,
                        bq: ix(format!("{p}.bq"))?,
                        wk: ix(format!("{p}.wk"))?,
                        bk: ix(format!("{p}.bk"))?,
                        wv: ix(format!("{p}.wv"))?,
                        bv: ix(format!("{p}.bv"))?,
                        wo: ix(format!("{p}.wo"))?,
                        bo: ix(format!("{p}.bo"))?,
                    });
                }
                IntegrationParams::XAttn(layers)
            }
        })
    }
}

/// Merges `z0` and `z_prev` into the recursive block's input for the
/// stream-merging mechanisms. `params` are the bound model parameters.
pub fn integrate<'g, S: Scalar>(
    kind: MechanismKind,
    z0: &LatentVar<'g, S>,
    z_prev: &LatentVar<'g, S>,
    ip: &IntegrationParams,
    params: &[Var<'g, S>],
) -> Result<LatentVar<'g, S>> {
    let (a, b) = (z0.values.shape(), z_prev.values.shape());
    if a != b {
        return Err(Error::LengthMismatch { left: a[0], right: b[0] });
    }
    let (z0v, zpv) = (&z0.values, &z_prev.values);
    let values = match (kind, ip) {
        (MechanismKind::Init, _) => *zpv,
        (MechanismKind::Add, _) => z0v.add(zpv)?,
        (MechanismKind::CatProj, IntegrationParams::CatProj { w1, b1, w2, b2 }) => z0v
            .concat_cols(zpv)?
            .linear(&params[*w1], &params[*b1])?
            .gelu()
            .linear(&params[*w2], &params[*b2])?,
        (MechanismKind::Gate, IntegrationParams::Gate { w, b }) => {
            let gate = z0v.concat_cols(zpv)?.linear(&params[*w], &params[*b])?.sigmoid();
            // g * z_prev + (1 - g) * z0
            z0v.add(&gate.mul(&zpv.sub(z0v)?)?)?
        }
        (
            MechanismKind::ModInj,
            IntegrationParams::ModInj {
                ln_g,
                ln_b,
                scale_w,
                scale_b,
                shift_w,
                shift_b,
            },
        ) => {
            let normed = z0v.layer_norm(&params[*ln_g], &params[*ln_b])?;
            let scale = zpv.linear(&params[*scale_w], &params[*scale_b])?;
            let shift = zpv.linear(&params[*shift_w], &params[*shift_b])?;
            normed.mul(&scale.add_scalar(S::one()))?.add(&shift)?
        }
        (MechanismKind::XAttn, _) => {
            return Err(Error::InvalidInput(
                "cross-attention integrates inside the recursive layers, not before them".into(),
            ))
        }
        (k, _) => {
            return Err(Error::InvalidInput(format!(
                "parameters do not match mechanism {k}"
            )))
        }
    };
    Ok(LatentVar {
        values,
        iteration_index: z_prev.iteration_index,
    })
}

/// Causal cross-attention from the current stream onto `memory`, added
/// residually. Keys and values come from a two-layer projection of the
/// memory; queries from the normalized current stream.
pub fn xattn_sublayer<'g, S: Scalar>(
    current: &Var<'g, S>,
    memory: &Var<'g, S>,
    layer: &XAttnLayer,
    params: &[Var<'g, S>],
    shape: AttnShape,
) -> Result<Var<'g, S>> {
    let (a, b) = (current.shape(), memory.shape());
    if a != b {
        return Err(Error::LengthMismatch { left: a[0], right: b[0] });
    }
    let p = |i: usize| &params[i];
    let q = current
        .layer_norm(p(layer.ln_g), p(layer.ln_b))?
        .linear(p(layer.wq), p(layer.bq))?;
    let mem = memory
        .linear(p(layer.mem1_w), p(layer.mem1_b))?
        .gelu()
        .linear(p(layer.mem2_w), p(layer.mem2_b))?;
    let k = mem.linear(p(layer.wk), p(layer.bk))?;
    let v = mem.linear(p(layer.wv), p(layer.bv))?;
    let attended = q.causal_attention(&k, &v, shape)?;
    current.add(&attended.linear(p(layer.wo), p(layer.bo))?)
}
