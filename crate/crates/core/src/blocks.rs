//! Shared pre-norm transformer sublayers.
//!
//! Every attention stack in this crate (tokenizer encoder/decoder, the
//! latent connector, the denoiser) is built from the same two residual
//! sublayers: `x + Attn(LN(x), ...)` and `x + MLP(LN(x))`. Cross
//! attention optionally divides score columns by a per-key temperature
//! vector before one joint softmax (used by the connector only).

use rand::Rng;

use crate::error::Result;
use crate::tensor::{GradTape, NodeId, ParamId, ParamStore, Scalar, Tensor};

pub(crate) const INIT_STD: f64 = 0.02;
pub(crate) const MLP_WIDEN: usize = 4;

pub(crate) fn register_ln(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
) -> Result<(ParamId, ParamId)> {
    let g = store.add(format!("{prefix}/gamma"), Tensor::full(vec![d], 1.0f32))?;
    let b = store.add(format!("{prefix}/beta"), Tensor::zeros(vec![d]))?;
    Ok((g, b))
}

pub(crate) fn linear<E: Scalar>(
    tape: &mut GradTape<E>,
    store: &ParamStore,
    x: NodeId,
    w: ParamId,
    b: ParamId,
) -> Result<NodeId> {
    let wn = tape.param(store, w)?;
    let bn = tape.param(store, b)?;
    let y = tape.matmul(x, wn)?;
    tape.add(y, bn)
}

/// One attention sublayer's parameters. `ln_kv` exists only for cross
/// attention, where keys/values come from a separate sequence.
#[derive(Debug, Clone)]
pub(crate) struct AttnIds {
    pub ln_q: (ParamId, ParamId),
    pub ln_kv: Option<(ParamId, ParamId)>,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl AttnIds {
    pub(crate) fn register(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        cross: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut w = |store: &mut ParamStore, name: &str| {
            store.add(format!("{prefix}/{name}"), Tensor::randn(vec![d, d], INIT_STD, rng))
        };
        let wq = w(store, "wq")?;
        let wk = w(store, "wk")?;
        let wv = w(store, "wv")?;
        let wo = w(store, "wo")?;
        let b = |store: &mut ParamStore, name: &str| {
            store.add(format!("{prefix}/{name}"), Tensor::zeros(vec![d]))
        };
        let bq = b(store, "bq")?;
        let bk = b(store, "bk")?;
        let bv = b(store, "bv")?;
        let bo = b(store, "bo")?;
        Ok(AttnIds {
            ln_q: register_ln(store, &format!("{prefix}/ln_attn"), d)?,
            ln_kv: if cross {
                Some(register_ln(store, &format!("{prefix}/ln_kv"), d)?)
            } else {
                None
            },
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        })
    }
}

/// One MLP sublayer's parameters (two-layer GELU net, 4x widening).
#[derive(Debug, Clone)]
pub(crate) struct MlpIds {
    pub ln: (ParamId, ParamId),
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl MlpIds {
    pub(crate) fn register(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let h = MLP_WIDEN * d;
        Ok(MlpIds {
            ln: register_ln(store, &format!("{prefix}/ln_mlp"), d)?,
            w1: store.add(format!("{prefix}/w1"), Tensor::randn(vec![d, h], INIT_STD, rng))?,
            b1: store.add(format!("{prefix}/b1"), Tensor::zeros(vec![h]))?,
            w2: store.add(format!("{prefix}/w2"), Tensor::randn(vec![h, d], INIT_STD, rng))?,
            b2: store.add(format!("{prefix}/b2"), Tensor::zeros(vec![d]))?,
        })
    }
}

fn split_heads<E: Scalar>(
    tape: &mut GradTape<E>,
    x: NodeId,
    rows: usize,
    heads: usize,
    hd: usize,
) -> Result<NodeId> {
    let r = tape.reshape(x, vec![rows, heads, hd])?;
    tape.transpose(r, 0, 1)
}

/// Residual attention sublayer: `x + W_o·Attn(LN(x) | kv)`.
///
/// `kv = None` is self-attention over `x` at temperature √head_dim.
/// `kv = Some((seq, deltas))` cross-attends LN'd `seq`; with
/// `deltas = Some(node)` each key column's logits are divided by its
/// entry of the `(n_keys,)` vector and the softmax runs at temperature 1,
/// otherwise the standard √head_dim applies.
pub(crate) fn attn_sublayer<E: Scalar>(
    tape: &mut GradTape<E>,
    store: &ParamStore,
    ids: &AttnIds,
    x: NodeId,
    kv: Option<(NodeId, Option<NodeId>)>,
    heads: usize,
) -> Result<NodeId> {
    let rows = tape.shape(x)[0];
    let d = tape.shape(x)[1];
    let hd = d / heads;
    let (g, b) = ids.ln_q;
    let (gn, bn) = (tape.param(store, g)?, tape.param(store, b)?);
    let xq = tape.layer_norm(x, gn, bn)?;
    let (k_src, deltas) = match kv {
        Some((seq, deltas)) => {
            let (g, b) = ids.ln_kv.expect("cross sublayer registered with ln_kv");
            let (gn, bn) = (tape.param(store, g)?, tape.param(store, b)?);
            (tape.layer_norm(seq, gn, bn)?, deltas)
        }
        None => (xq, None),
    };
    let n_keys = tape.shape(k_src)[0];
    let q = linear(tape, store, xq, ids.wq, ids.bq)?;
    let k = linear(tape, store, k_src, ids.wk, ids.bk)?;
    let v = linear(tape, store, k_src, ids.wv, ids.bv)?;
    let qh = split_heads(tape, q, rows, heads, hd)?;
    let kh = split_heads(tape, k, n_keys, heads, hd)?;
    let vh = split_heads(tape, v, n_keys, heads, hd)?;
    let kt = tape.transpose(kh, 1, 2)?;
    let scores = tape.batch_matmul(qh, kt)?;
    let attn = match deltas {
        Some(dn) => {
            let scaled = tape.div(scores, dn)?;
            tape.softmax(scaled, 2, 1.0)?
        }
        None => tape.softmax(scores, 2, (hd as f64).sqrt())?,
    };
    let o = tape.batch_matmul(attn, vh)?;
    let o = tape.transpose(o, 0, 1)?;
    let o = tape.reshape(o, vec![rows, d])?;
    let o = linear(tape, store, o, ids.wo, ids.bo)?;
    tape.add(x, o)
}

/// Standard block: one attention sublayer followed by one MLP sublayer.
#[derive(Debug, Clone)]
pub(crate) struct Block {
    pub attn: AttnIds,
    pub mlp: MlpIds,
}

impl Block {
    pub(crate) fn register(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        cross: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Block {
            attn: AttnIds::register(store, prefix, d, cross, rng)?,
            mlp: MlpIds::register(store, prefix, d, rng)?,
        })
    }
}

pub(crate) fn block_forward<E: Scalar>(
    tape: &mut GradTape<E>,
    store: &ParamStore,
    blk: &Block,
    x: NodeId,
    kv: Option<(NodeId, Option<NodeId>)>,
    heads: usize,
) -> Result<NodeId> {
    let x = attn_sublayer(tape, store, &blk.attn, x, kv, heads)?;
    mlp_sublayer(tape, store, &blk.mlp, x)
}

/// Residual MLP sublayer: `x + W₂·gelu(W₁·LN(x))`.
pub(crate) fn mlp_sublayer<E: Scalar>(
    tape: &mut GradTape<E>,
    store: &ParamStore,
    ids: &MlpIds,
    x: NodeId,
) -> Result<NodeId> {
    let (g, b) = ids.ln;
    let (gn, bn) = (tape.param(store, g)?, tape.param(store, b)?);
    let h = tape.layer_norm(x, gn, bn)?;
    let h = linear(tape, store, h, ids.w1, ids.b1)?;
    let h = tape.gelu(h)?;
    let h = linear(tape, store, h, ids.w2, ids.b2)?;
    tape.add(x, h)
}
