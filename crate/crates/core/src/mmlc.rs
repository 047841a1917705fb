//! Multimodal latent connector.
//!
//! A short sequence of learnable latent tokens cross-attends over the
//! assembled multimodal token sequence (depth, seg, edge tokens plus the
//! embedded caption), then two self-attention blocks refine the latents.
//! Cost is linear in the sequence length M because only the N latents
//! ever form queries against it.
//!
//! Per-modality temperature: the logits of key columns belonging to
//! modality k are divided by δ_k = s_k·√d_k before one joint softmax
//! over all keys. Lowering s_k sharpens that modality's columns, which
//! raises its total attention mass whenever its logits are nonnegative
//! (a negative logit sharpens *away*; see `tempered_attention_weights`).
//! Training always runs with every s_k = 1; the knobs exist for sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{block_forward, register_ln, Block, INIT_STD};
use crate::data::{CaptionTokens, ModalityMask, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::tensor::{GradTape, NodeId, ParamId, ParamStore, Scalar, Tensor};

/// Roles a key column can play in the assembled sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Segment {
    Depth,
    Seg,
    Edge,
    Text,
}

impl Segment {
    pub const ALL: [Segment; 4] = [Segment::Depth, Segment::Seg, Segment::Edge, Segment::Text];

    pub fn name(self) -> &'static str {
        match self {
            Segment::Depth => "depth",
            Segment::Seg => "seg",
            Segment::Edge => "edge",
            Segment::Text => "text",
        }
    }

    pub fn from_name(s: &str) -> Option<Segment> {
        Segment::ALL.into_iter().find(|k| k.name() == s)
    }

    fn index(self) -> usize {
        match self {
            Segment::Depth => 0,
            Segment::Seg => 1,
            Segment::Edge => 2,
            Segment::Text => 3,
        }
    }
}

/// Per-modality attention temperature scales; effective δ_k = s_k·√d_k.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemperatureConfig {
    pub depth: f32,
    pub seg: f32,
    pub edge: f32,
    pub text: f32,
}

impl Default for TemperatureConfig {
    fn default() -> Self {
        TemperatureConfig { depth: 1.0, seg: 1.0, edge: 1.0, text: 1.0 }
    }
}

pub const TEMP_SCALE_MIN: f32 = 0.4;
pub const TEMP_SCALE_MAX: f32 = 10.0;

impl TemperatureConfig {
    pub fn scale(&self, seg: Segment) -> f32 {
        match seg {
            Segment::Depth => self.depth,
            Segment::Seg => self.seg,
            Segment::Edge => self.edge,
            Segment::Text => self.text,
        }
    }

    pub fn with_scale(mut self, seg: Segment, s: f32) -> Self {
        match seg {
            Segment::Depth => self.depth = s,
            Segment::Seg => self.seg = s,
            Segment::Edge => self.edge = s,
            Segment::Text => self.text = s,
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        for seg in Segment::ALL {
            let s = self.scale(seg);
            if !(TEMP_SCALE_MIN..=TEMP_SCALE_MAX).contains(&s) {
                return Err(Error::domain(format!(
                    "temperature scale {}={s} outside [{TEMP_SCALE_MIN}, {TEMP_SCALE_MAX}]",
                    seg.name()
                )));
            }
        }
        Ok(())
    }
}

/// The assembled multimodal key/value sequence: M tokens of width
/// D_model, tagged per token with the segment it came from. Tags are
/// contiguous runs in the fixed order depth, seg, edge, text.
#[derive(Debug)]
pub struct AssembledSequence {
    tokens: NodeId,
    tags: Vec<Segment>,
}

impl AssembledSequence {
    pub fn tokens(&self) -> NodeId {
        self.tokens
    }

    pub fn tags(&self) -> &[Segment] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }
}


/// Parameter handles for the connector. Checkpoint tensor names all live
/// under the "mmlc/" prefix.
#[derive(Debug, Clone)]
pub struct MmlcParams {
    d_model: usize,
    heads: usize,
    n_latents: usize,
    g: usize,
    l_text: usize,
    m_null: ParamId,
    latents: ParamId,
    pos: ParamId,
    cap_vocab: ParamId,
    cap_pos: ParamId,
    cross: Block,
    selfs: Vec<Block>,
    ln_f: (ParamId, ParamId),
}

impl MmlcParams {
    /// Create and initialize all connector parameters in `store`.
    ///
    /// `g` is the modality token grid side (g² tokens per map modality),
    /// `l_text` the caption length. Weights init N(0, 0.02), biases zero,
    /// latents N(0, 0.02).
    pub fn register(
        store: &mut ParamStore,
        d_model: usize,
        heads: usize,
        n_latents: usize,
        self_blocks: usize,
        g: usize,
        l_text: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::contract(format!(
                "heads {heads} must divide d_model {d_model}"
            )));
        }
        let m = 3 * g * g + l_text;
        if n_latents == 0 || n_latents >= m {
            return Err(Error::contract(format!(
                "n_latents {n_latents} must satisfy 0 < N < M (M = 3g²+L = {m})"
            )));
        }
        let m_null = store.add("mmlc/m_null", Tensor::randn(vec![d_model], INIT_STD, rng))?;
        let latents =
            store.add("mmlc/latents", Tensor::randn(vec![n_latents, d_model], INIT_STD, rng))?;
        let pos = store.add("mmlc/pos", Tensor::randn(vec![m, d_model], INIT_STD, rng))?;
        let cap_vocab =
            store.add("mmlc/cap_vocab", Tensor::randn(vec![VOCAB_SIZE, d_model], INIT_STD, rng))?;
        let cap_pos =
            store.add("mmlc/cap_pos", Tensor::randn(vec![l_text, d_model], INIT_STD, rng))?;
        let cross = Block::register(store, "mmlc/cross", d_model, true, rng)?;
        let selfs = (0..self_blocks)
            .map(|i| Block::register(store, &format!("mmlc/self{i}"), d_model, false, rng))
            .collect::<Result<Vec<_>>>()?;
        let ln_f = register_ln(store, "mmlc/ln_f", d_model)?;
        Ok(MmlcParams {
            d_model,
            heads,
            n_latents,
            g,
            l_text,
            m_null,
            latents,
            pos,
            cap_vocab,
            cap_pos,
            cross,
            selfs,
            ln_f,
        })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn n_latents(&self) -> usize {
        self.n_latents
    }

    pub fn grid_side(&self) -> usize {
        self.g
    }

    pub fn text_len(&self) -> usize {
        self.l_text
    }

    /// Assembled sequence length M = 3g² + L_text.
    pub fn seq_len(&self) -> usize {
        3 * self.g * self.g + self.l_text
    }
}

/// Embed a caption: vocabulary row lookup plus learned positional vectors.
pub fn embed_caption<E: Scalar>(
    tape: &mut GradTape<E>,
    store: &ParamStore,
    params: &MmlcParams,
    caption: &CaptionTokens,
) -> Result<NodeId> {
    if caption.tokens.len() != params.l_text {
        return Err(Error::shape(format!(
            "caption length {} != configured text length {}",
            caption.tokens.len(),
            params.l_text
        )));
    }
    let table = tape.param(store, params.cap_vocab)?;
    let emb = tape.embed(table, &caption.tokens)?;
    let pos = tape.param(store, params.cap_pos)?;
    tape.add(emb, pos)
}

fn present(
    seg: Segment,
    flag: bool,
    tok: Option<NodeId>,
    expect_rows: usize,
) -> Result<Option<NodeId>> {
    match (flag, tok) {
        (true, Some(t)) => Ok(Some(t)),
        (true, None) => Err(Error::contract(format!(
            "mask marks {} present but no tokens were given ({expect_rows} rows expected)",
            seg.name()
        ))),
        (false, _) => Ok(None),
    }
}

/// Concatenate the four segments in fixed order, substituting repeated
/// copies of the learned empty token for absent ones. Inputs must already
/// be `(g², d_model)` (maps) or `(l_text, d_model)` (text); no positional
/// information is added here, so every row of an all-absent assembly
/// equals the empty token exactly.
pub fn assemble<E: Scalar>(
    tape: &mut GradTape<E>,
    store: &ParamStore,
    params: &MmlcParams,
    depth_tok: Option<NodeId>,
    seg_tok: Option<NodeId>,
    edge_tok: Option<NodeId>,
    caption_emb: Option<NodeId>,
    mask: ModalityMask,
) -> Result<AssembledSequence> {
    let g2 = params.g * params.g;
    let picks = [
        (Segment::Depth, present(Segment::Depth, mask.depth, depth_tok, g2)?, g2),
        (Segment::Seg, present(Segment::Seg, mask.seg, seg_tok, g2)?, g2),
        (Segment::Edge, present(Segment::Edge, mask.edge, edge_tok, g2)?, g2),
        (Segment::Text, present(Segment::Text, mask.text, caption_emb, params.l_text)?, params.l_text),
    ];
    let mut parts = Vec::with_capacity(4);
    let mut tags = Vec::with_capacity(params.seq_len());
    for (seg, tok, rows) in picks {
        let part = match tok {
            Some(t) => {
                if tape.shape(t) != [rows, params.d_model] {
                    return Err(Error::shape(format!(
                        "{} tokens must be ({rows}, {}), got {:?}",
                        seg.name(),
                        params.d_model,
                        tape.shape(t)
                    )));
                }
                t
            }
            None => {
                let null = tape.param(store, params.m_null)?;
                tape.repeat_rows(null, rows)?
            }
        };
        parts.push(part);
        tags.extend(std::iter::repeat(seg).take(rows));
    }
    let tokens = tape.concat(&parts, 0)?;
    Ok(AssembledSequence { tokens, tags })
}

/// Single-head scaled dot-product attention `softmax(QKᵀ/δ)V`.
///
/// `q (nq, d)`, `k (nk, d)`, `v (nk, dv)`; `δ > 0` or a domain error.
pub fn attention<E: Scalar>(
    tape: &mut GradTape<E>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    delta: f64,
) -> Result<NodeId> {
    let kt = tape.transpose(k, 0, 1)?;
    let scores = tape.matmul(q, kt)?;
    let w = tape.softmax(scores, 1, delta)?;
    tape.matmul(w, v)
}

fn key_delta_tensor<E: Scalar>(
    tags: &[Segment],
    temps: &TemperatureConfig,
    d_k: usize,
) -> Tensor<E> {
    let root = (d_k as f64).sqrt();
    let data: Vec<E> =
        tags.iter().map(|&t| E::from_f64(temps.scale(t) as f64 * root)).collect();
    Tensor::from_parts(vec![tags.len()], data)
}

/// Attention weights under per-key temperature: scores `QKᵀ` have each
/// key column j divided by δ_{tag(j)} = s_{tag(j)}·√d, then one joint
/// softmax per query row. Returns the `(nq, nk)` weight matrix.
///
/// Monotonicity caveat: lowering s_k strictly increases modality-k mass
/// when the modality-k logits are positive; a negative logit shrinks
/// under sharpening instead.
pub fn tempered_attention_weights<E: Scalar>(
    tape: &mut GradTape<E>,
    q: NodeId,
    k: NodeId,
    tags: &[Segment],
    temps: &TemperatureConfig,
) -> Result<NodeId> {
    temps.validate()?;
    let (sq, sk) = (tape.shape(q).to_vec(), tape.shape(k).to_vec());
    if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] || sk[0] != tags.len() {
        return Err(Error::shape(format!(
            "tempered attention: q {sq:?}, k {sk:?}, {} tags",
            tags.len()
        )));
    }
    let kt = tape.transpose(k, 0, 1)?;
    let scores = tape.matmul(q, kt)?;
    let deltas = tape.constant(key_delta_tensor::<E>(tags, temps, sq[1]))?;
    let scaled = tape.div(scores, deltas)?;
    tape.softmax(scaled, 1, 1.0)
}

/// Summed attention mass per segment for each query row of `weights`.
pub fn segment_mass<E: Scalar>(weights: &Tensor<E>, tags: &[Segment]) -> Result<Vec<[f64; 4]>> {
    let s = weights.shape();
    if s.len() != 2 || s[1] != tags.len() {
        return Err(Error::shape(format!("segment_mass: weights {s:?} vs {} tags", tags.len())));
    }
    let d = weights.data();
    Ok((0..s[0])
        .map(|r| {
            let mut acc = [0.0f64; 4];
            for (j, &t) in tags.iter().enumerate() {
                acc[t.index()] += d[r * s[1] + j].to_f64();
            }
            acc
        })
        .collect())
}

/// One pre-norm attention block (attention sublayer + MLP sublayer) on
/// residual stream `x (rows, d)`.
///
/// `kv = Some((seq, deltas))` makes it a cross-attention block with
/// per-key temperature division; `None` is plain self-attention at the
/// standard √head_dim temperature.
fn attn_block<E: Scalar>(
    tape: &mut GradTape<E>,
    store: &ParamStore,
    blk: &Block,
    x: NodeId,
    kv: Option<(NodeId, NodeId)>,
    heads: usize,
) -> Result<NodeId> {
    block_forward(tape, store, blk, x, kv.map(|(seq, d)| (seq, Some(d))), heads)
}

/// Distill the assembled sequence into `n_latents` output tokens.
///
/// Learned absolute positional vectors are added to the sequence here
/// (one per position, covering all segments), then the latents run one
/// cross-attention block against it and the self-attention blocks over
/// themselves, finishing with a layer norm. Output is `(N, d_model)` for
/// any admissible M.
pub fn connect<E: Scalar>(
    tape: &mut GradTape<E>,
    store: &ParamStore,
    params: &MmlcParams,
    seq: &AssembledSequence,
    temps: &TemperatureConfig,
) -> Result<NodeId> {
    temps.validate()?;
    if seq.len() != params.seq_len() {
        return Err(Error::shape(format!(
            "assembled length {} != configured M {}",
            seq.len(),
            params.seq_len()
        )));
    }
    let pos = tape.param(store, params.pos)?;
    let x = tape.add(seq.tokens, pos)?;
    let deltas =
        tape.constant(key_delta_tensor::<E>(seq.tags(), temps, params.head_dim()))?;
    let mut lat = tape.param(store, params.latents)?;
    lat = attn_block(tape, store, &params.cross, lat, Some((x, deltas)), params.heads)?;
    for blk in &params.selfs {
        lat = attn_block(tape, store, blk, lat, None, params.heads)?;
    }
    let (g, b) = params.ln_f;
    let (gn, bn) = (tape.param(store, g)?, tape.param(store, b)?);
    tape.layer_norm(lat, gn, bn)
}

/// Max relative error of the assemble-to-connect composite gradient against
/// central differences, differentiating through all four segment inputs.
/// `seed` draws a fresh parameter set and inputs per call.
pub fn connector_grad_error(seed: u64) -> Result<f64> {
    use crate::data::mix_seed;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    let mut store = ParamStore::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xC0_4E));
    let (d, g, l) = (8usize, 2usize, 3usize);
    let p = MmlcParams::register(&mut store, d, 2, 3, 2, g, l, &mut rng)?;
    let m = p.seq_len();
    let x0: Tensor<f64> = Tensor::randn(vec![m * d], 0.6, &mut rng);
    grad_check(
        &move |tape: &mut GradTape<f64>, x| {
            let toks = tape.reshape(x, vec![m, d])?;
            let g2 = g * g;
            let dep = tape.slice(toks, 0, 0, g2)?;
            let seg = tape.slice(toks, 0, g2, g2)?;
            let edg = tape.slice(toks, 0, 2 * g2, g2)?;
            let cap = tape.slice(toks, 0, 3 * g2, l)?;
            let seq = assemble(
                tape,
                &store,
                &p,
                Some(dep),
                Some(seg),
                Some(edg),
                Some(cap),
                ModalityMask::ALL,
            )?;
            let out = connect(tape, &store, &p, &seq, &TemperatureConfig::default())?;
            let s = tape.mul(out, out)?;
            tape.sum(s)
        },
        &x0,
        1e-5,
    )
}

/// Exact multiply-accumulate count of one cross-attention block forward
/// (matmul MACs only; norms, softmax, bias adds and GELU are free):
///
/// - K and V projections over the sequence: 2·M·D²
/// - Q and output projections over the latents: 2·N·D²
/// - score formation and value application: 2·M·N·D
/// - two-layer MLP with 4× widening on the latents: 8·N·D²
///
/// Total: 2·M·N·D + 2·M·D² + 10·N·D². Head count cancels
/// (H·(M·N·(D/H)) = M·N·D) and is accepted only for interface symmetry.
pub fn mac_count(m: usize, n: usize, d: usize, heads: usize) -> u64 {
    debug_assert!(m > 0 && n > 0 && d > 0 && heads > 0);
    let (m, n, d) = (m as u64, n as u64, d as u64);
    2 * m * n * d + 2 * m * d * d + 10 * n * d * d
}

/// Companion count for a full self-attention block over M tokens:
/// 2·M²·D (scores + application) + 12·M·D² (Q,K,V,O projections 4·M·D²
/// plus the 4× MLP 8·M·D²).
pub fn baseline_mac_count(m: usize, d: usize, heads: usize) -> u64 {
    debug_assert!(m > 0 && d > 0 && heads > 0);
    let (m, d) = (m as u64, d as u64);
    2 * m * m * d + 12 * m * d * d
}

/// The slice of [`mac_count`] that grows with M through the attention
/// map itself: score formation plus value application, 2·M·N·D. This is
/// the quantity whose log-log slope against M is exactly 1.
pub fn attention_core_macs(m: usize, n: usize, d: usize) -> u64 {
    2 * (m as u64) * (n as u64) * (d as u64)
}

/// Baseline counterpart of [`attention_core_macs`]: 2·M²·D, slope 2.
pub fn baseline_core_macs(m: usize, d: usize) -> u64 {
    2 * (m as u64) * (m as u64) * (d as u64)
}
