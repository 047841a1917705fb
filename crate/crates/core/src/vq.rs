//! Modality tokenizer: a small vector-quantized autoencoder shared by all
//! three map kinds.
//!
//! Each HR map is channel-encoded (value planes plus a constant kind tag),
//! cut into 4x4 patches, and embedded into a g x g grid of D_tok vectors by
//! two position-free self-attention blocks. The continuous grid can be
//! snapped to the nearest codebook rows (straight-through gradient) and
//! decoded back to an HR map. Position information is deliberately absent
//! from the encoder and decoder: a token describes its own patch wherever
//! it sits, and a constant input therefore encodes to identical cells.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{block_forward, register_ln, Block, INIT_STD};
use crate::data::{mix_seed, ModalityKind, ModalityMap};
use crate::error::{Error, Result};
use crate::tensor::{
    adam_step, grad_check, nearest_rows, AdamConfig, GradTape, NodeId, ParamId, ParamStore,
    Scalar, Tensor,
};

/// Side of the square patches the encoder embeds.
pub const PATCH: usize = 4;
/// Segmentation classes: background plus up to four shapes.
pub const SEG_CLASSES: usize = 5;
/// Encoder input planes per pixel: depth value, seg one-hot, edge bit,
/// and a constant one-hot tag naming the map kind.
pub const IN_CHANNELS: usize = 1 + SEG_CLASSES + 1 + 3;
/// Decoder output planes per pixel: depth value, seg class logits, edge logit.
pub const OUT_CHANNELS: usize = 1 + SEG_CLASSES + 1;
/// Commitment term weight in the training loss.
pub const COMMIT_WEIGHT: f64 = 0.25;

const HEADS: usize = 2;
const STACK_BLOCKS: usize = 2;

fn kind_index(kind: ModalityKind) -> usize {
    match kind {
        ModalityKind::Depth => 0,
        ModalityKind::Seg => 1,
        ModalityKind::Edge => 2,
    }
}

// ---- codebook ---------------------------------------------------------------------

/// K x D_tok matrix of code vectors.
#[derive(Debug, Clone)]
pub struct Codebook {
    rows: Tensor<f32>,
}

impl Codebook {
    pub fn new(rows: Tensor<f32>) -> Result<Self> {
        let s = rows.shape();
        if s.len() != 2 {
            return Err(Error::shape(format!("codebook must be 2-D, got {s:?}")));
        }
        if s[0] < 2 {
            return Err(Error::contract(format!("codebook needs at least 2 rows, got {}", s[0])));
        }
        if !rows.all_finite() {
            return Err(Error::numeric("codebook holds non-finite entries"));
        }
        Ok(Codebook { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false // construction enforces K >= 2
    }

    pub fn d_tok(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn rows(&self) -> &Tensor<f32> {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.d_tok();
        &self.rows.data()[i * d..(i + 1) * d]
    }
}

// ---- token sequences --------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenMode {
    Discrete,
    Continuous,
}

/// A g x g grid of patch tokens for one modality map.
///
/// `tag = None` marks a stand-in for an absent modality; such sequences
/// carry vectors but cannot be decoded. Discrete sequences additionally
/// carry the codebook index per cell, and their vectors are bit-exact
/// copies of codebook rows.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    mode: TokenMode,
    tag: Option<ModalityKind>,
    g: usize,
    indices: Option<Vec<usize>>,
    vectors: Tensor<f32>,
}

impl TokenSequence {
    /// Wrap raw encoder vectors `(g², d_tok)` as a continuous sequence.
    pub fn continuous(
        tag: Option<ModalityKind>,
        g: usize,
        vectors: Tensor<f32>,
    ) -> Result<Self> {
        let s = vectors.shape();
        if s.len() != 2 || s[0] != g * g {
            return Err(Error::shape(format!("token grid g={g} expects ({}, d), got {s:?}", g * g)));
        }
        Ok(TokenSequence { mode: TokenMode::Continuous, tag, g, indices: None, vectors })
    }

    pub fn mode(&self) -> TokenMode {
        self.mode
    }

    pub fn tag(&self) -> Option<ModalityKind> {
        self.tag
    }

    pub fn grid_side(&self) -> usize {
        self.g
    }

    pub fn len(&self) -> usize {
        self.g * self.g
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_tok(&self) -> usize {
        self.vectors.shape()[1]
    }

    /// Codebook index per cell; None in continuous mode.
    pub fn indices(&self) -> Option<&[usize]> {
        self.indices.as_deref()
    }

    pub fn vectors(&self) -> &Tensor<f32> {
        &self.vectors
    }
}

// ---- channel coding ---------------------------------------------------------------

fn seg_class(v: f32) -> Result<usize> {
    let id = v.round();
    if (v - id).abs() > 1e-3 || id < 0.0 || id >= SEG_CLASSES as f32 {
        return Err(Error::domain(format!("segmentation id {v} outside 0..{SEG_CLASSES}")));
    }
    Ok(id as usize)
}

fn edge_bit(v: f32) -> Result<f32> {
    let b = v.round();
    if (v - b).abs() > 1e-3 || (b != 0.0 && b != 1.0) {
        return Err(Error::domain(format!("edge value {v} is not binary")));
    }
    Ok(b)
}

/// Channel-encode a map into the tokenizer's input planes `(res, res, 10)`:
/// depth value, seg one-hot, edge bit, and a constant kind tag. Planes for
/// the other kinds stay zero.
pub fn encode_channels(map: &ModalityMap) -> Result<Tensor<f32>> {
    let res = map.res();
    let g = map.grid.data();
    let mut out = vec![0f32; res * res * IN_CHANNELS];
    let tag = 1 + SEG_CLASSES + 1 + kind_index(map.kind);
    for (p, &v) in g.iter().enumerate() {
        let base = p * IN_CHANNELS;
        match map.kind {
            ModalityKind::Depth => out[base] = v,
            ModalityKind::Seg => out[base + 1 + seg_class(v)?] = 1.0,
            ModalityKind::Edge => out[base + 1 + SEG_CLASSES] = edge_bit(v)?,
        }
        out[base + tag] = 1.0;
    }
    Tensor::from_vec(vec![res, res, IN_CHANNELS], out)
}

/// Reconstruction target in the decoder's output planes `(res, res, 7)`:
/// the map's own planes filled in, everything else zero, so the decoder is
/// also trained to silence the channels of the other kinds.
pub fn target_channels(map: &ModalityMap) -> Result<Tensor<f32>> {
    let res = map.res();
    let g = map.grid.data();
    let mut out = vec![0f32; res * res * OUT_CHANNELS];
    for (p, &v) in g.iter().enumerate() {
        let base = p * OUT_CHANNELS;
        match map.kind {
            ModalityKind::Depth => out[base] = v,
            ModalityKind::Seg => out[base + 1 + seg_class(v)?] = 1.0,
            ModalityKind::Edge => out[base + 1 + SEG_CLASSES] = edge_bit(v)?,
        }
    }
    Tensor::from_vec(vec![res, res, OUT_CHANNELS], out)
}

// ---- parameters -------------------------------------------------------------------

/// Parameter handles for the tokenizer. Checkpoint tensor names all live
/// under the "vq/" prefix.
#[derive(Debug, Clone)]
pub struct VqParams {
    k: usize,
    d_tok: usize,
    g: usize,
    embed_w: ParamId,
    embed_b: ParamId,
    enc: Vec<Block>,
    codebook: ParamId,
    dec: Vec<Block>,
    ln_out: (ParamId, ParamId),
    head_w: ParamId,
    head_b: ParamId,
}

impl VqParams {
    pub fn register(
        store: &mut ParamStore,
        k: usize,
        d_tok: usize,
        g: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if k < 2 {
            return Err(Error::contract(format!("codebook needs at least 2 rows, got {k}")));
        }
        if d_tok == 0 || d_tok % HEADS != 0 {
            return Err(Error::contract(format!(
                "token width {d_tok} must be a positive multiple of {HEADS} heads"
            )));
        }
        if g == 0 {
            return Err(Error::contract("token grid side must be positive"));
        }
        let patch_in = PATCH * PATCH * IN_CHANNELS;
        let patch_out = PATCH * PATCH * OUT_CHANNELS;
        let embed_w =
            store.add("vq/embed/w", Tensor::randn(vec![patch_in, d_tok], INIT_STD, rng))?;
        let embed_b = store.add("vq/embed/b", Tensor::zeros(vec![d_tok]))?;
        let enc = (0..STACK_BLOCKS)
            .map(|i| Block::register(store, &format!("vq/enc{i}"), d_tok, false, rng))
            .collect::<Result<Vec<_>>>()?;
        let codebook =
            store.add("vq/codebook", Tensor::randn(vec![k, d_tok], INIT_STD, rng))?;
        let dec = (0..STACK_BLOCKS)
            .map(|i| Block::register(store, &format!("vq/dec{i}"), d_tok, false, rng))
            .collect::<Result<Vec<_>>>()?;
        let ln_out = register_ln(store, "vq/ln_out", d_tok)?;
        let head_w =
            store.add("vq/head/w", Tensor::randn(vec![d_tok, patch_out], INIT_STD, rng))?;
        let head_b = store.add("vq/head/b", Tensor::zeros(vec![patch_out]))?;
        Ok(VqParams { k, d_tok, g, embed_w, embed_b, enc, codebook, dec, ln_out, head_w, head_b })
    }

    pub fn codebook_size(&self) -> usize {
        self.k
    }

    pub fn d_tok(&self) -> usize {
        self.d_tok
    }

    pub fn grid_side(&self) -> usize {
        self.g
    }

    pub fn map_res(&self) -> usize {
        self.g * PATCH
    }

    /// Current codebook snapshot from the store.
    pub fn codebook(&self, store: &ParamStore) -> Result<Codebook> {
        Codebook::new(store.value(self.codebook).clone())
    }
}

// ---- tape-level encoder / decoder -------------------------------------------------

/// Encoder forward on an open tape: channel planes `(res, res, 10)` to
/// the token grid `(g², d_tok)`. Exposed at tape level so training and
/// gradient checks can differentiate through it.
pub fn encode_on_tape<E: Scalar>(
    tape: &mut GradTape<E>,
    store: &ParamStore,
    params: &VqParams,
    x: NodeId,
) -> Result<NodeId> {
    let res = params.map_res();
    if tape.shape(x) != [res, res, IN_CHANNELS] {
        return Err(Error::shape(format!(
            "encoder expects ({res}, {res}, {IN_CHANNELS}), got {:?}",
            tape.shape(x)
        )));
    }
    let patches = tape.patchify(x, PATCH)?;
    let w = tape.param(store, params.embed_w)?;
    let b = tape.param(store, params.embed_b)?;
    let mut z = tape.matmul(patches, w)?;
    z = tape.add(z, b)?;
    for blk in &params.enc {
        z = block_forward(tape, store, blk, z, None, HEADS)?;
    }
    Ok(z)
}

/// Decoder forward on an open tape: token grid `(g², d_tok)` to output
/// planes `(res, res, 7)`.
pub fn decode_on_tape<E: Scalar>(
    tape: &mut GradTape<E>,
    store: &ParamStore,
    params: &VqParams,
    tokens: NodeId,
) -> Result<NodeId> {
    let cells = params.g * params.g;
    if tape.shape(tokens) != [cells, params.d_tok] {
        return Err(Error::shape(format!(
            "decoder expects ({cells}, {}), got {:?}",
            params.d_tok,
            tape.shape(tokens)
        )));
    }
    let mut y = tokens;
    for blk in &params.dec {
        y = block_forward(tape, store, blk, y, None, HEADS)?;
    }
    let (g, b) = params.ln_out;
    let (gn, bn) = (tape.param(store, g)?, tape.param(store, b)?);
    y = tape.layer_norm(y, gn, bn)?;
    let w = tape.param(store, params.head_w)?;
    let hb = tape.param(store, params.head_b)?;
    y = tape.matmul(y, w)?;
    y = tape.add(y, hb)?;
    let res = params.map_res();
    tape.unpatchify(y, PATCH, res, res, OUT_CHANNELS)
}

/// Max relative error of the encoder-to-decoder composite gradient against
/// central differences. `seed` draws a fresh parameter set and input, so
/// repeated calls probe independent random instances.
pub fn autoencoder_grad_error(seed: u64) -> Result<f64> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xAE_61));
    let p = VqParams::register(&mut store, 4, 8, 1, &mut rng)?;
    let res = p.map_res();
    let x0: Tensor<f64> = Tensor::randn(vec![res, res, IN_CHANNELS], 0.5, &mut rng);
    grad_check(
        &move |tape: &mut GradTape<f64>, x| {
            let z = encode_on_tape(tape, &store, &p, x)?;
            let y = decode_on_tape(tape, &store, &p, z)?;
            let s = tape.mul(y, y)?;
            tape.sum(s)
        },
        &x0,
        1e-5,
    )
}

// ---- frozen-parameter operations --------------------------------------------------

/// Encode one map to a continuous token sequence. Deterministic given
/// parameters; rejects maps whose resolution disagrees with the grid.
pub fn encode(store: &ParamStore, params: &VqParams, map: &ModalityMap) -> Result<TokenSequence> {
    if map.res() != params.map_res() {
        return Err(Error::shape(format!(
            "map resolution {} != tokenizer resolution {}",
            map.res(),
            params.map_res()
        )));
    }
    let channels = encode_channels(map)?;
    let mut tape: GradTape<f32> = GradTape::new();
    let x = tape.constant(channels)?;
    let z = encode_on_tape(&mut tape, store, params, x)?;
    TokenSequence::continuous(Some(map.kind), params.g, tape.value(z).clone())
}

/// Snap each cell to its nearest codebook row (L2, ties to the lowest
/// index). The result's vectors are bit-exact codebook rows, which makes
/// the operation idempotent.
pub fn quantize(seq: &TokenSequence, cb: &Codebook) -> Result<TokenSequence> {
    if seq.d_tok() != cb.d_tok() {
        return Err(Error::shape(format!(
            "token width {} != codebook width {}",
            seq.d_tok(),
            cb.d_tok()
        )));
    }
    let indices = nearest_rows(seq.vectors(), cb.rows())?;
    let d = cb.d_tok();
    let mut out = Vec::with_capacity(indices.len() * d);
    for &i in &indices {
        out.extend_from_slice(cb.row(i));
    }
    Ok(TokenSequence {
        mode: TokenMode::Discrete,
        tag: seq.tag,
        g: seq.g,
        indices: Some(indices),
        vectors: Tensor::from_vec(vec![seq.len(), d], out)?,
    })
}

/// Decode a token sequence (either mode) back to an HR map. Segmentation
/// takes the argmax over class logits; edges are thresholded at 0.5 and
/// depth is clamped to [0,1], so the result is well-formed for re-encoding.
pub fn decode(store: &ParamStore, params: &VqParams, seq: &TokenSequence) -> Result<ModalityMap> {
    let Some(kind) = seq.tag else {
        return Err(Error::contract("cannot decode an absent-modality stand-in"));
    };
    let planes = decode_planes(store, params, seq)?;
    let res = params.map_res();
    let d = planes.data();
    let mut grid = vec![0f32; res * res];
    for (p, cell) in grid.iter_mut().enumerate() {
        let base = p * OUT_CHANNELS;
        *cell = match kind {
            ModalityKind::Depth => d[base].clamp(0.0, 1.0),
            ModalityKind::Seg => {
                let mut best = 0usize;
                let mut best_v = f32::NEG_INFINITY;
                for c in 0..SEG_CLASSES {
                    let v = d[base + 1 + c];
                    if v > best_v {
                        best_v = v;
                        best = c;
                    }
                }
                best as f32
            }
            ModalityKind::Edge => {
                if d[base + 1 + SEG_CLASSES] >= 0.5 {
                    1.0
                } else {
                    0.0
                }
            }
        };
    }
    ModalityMap::new(kind, Tensor::from_vec(vec![res, res, 1], grid)?)
}

/// Raw decoder planes `(res, res, 7)` without per-kind postprocessing.
pub fn decode_planes(
    store: &ParamStore,
    params: &VqParams,
    seq: &TokenSequence,
) -> Result<Tensor<f32>> {
    let mut tape: GradTape<f32> = GradTape::new();
    let t = tape.constant(seq.vectors().clone())?;
    let y = decode_on_tape(&mut tape, store, params, t)?;
    Ok(tape.value(y).clone())
}

/// encode -> (quantize) -> decode in one call.
pub fn reconstruct(
    store: &ParamStore,
    params: &VqParams,
    map: &ModalityMap,
    discrete: bool,
) -> Result<ModalityMap> {
    let z = encode(store, params, map)?;
    let seq = if discrete { quantize(&z, &params.codebook(store)?)? } else { z };
    decode(store, params, &seq)
}

// ---- feature-width alignment ------------------------------------------------------

/// Zero-pad the column dimension of a `(rows, d_tok)` node up to `d_model`.
/// Zeros keep attention logits unchanged by the padded dims. Identity when
/// the widths already agree.
pub fn pad_tokens<E: Scalar>(
    tape: &mut GradTape<E>,
    tokens: NodeId,
    d_model: usize,
) -> Result<NodeId> {
    let s = tape.shape(tokens).to_vec();
    if s.len() != 2 {
        return Err(Error::shape(format!("pad_tokens expects a 2-D grid, got {s:?}")));
    }
    if s[1] > d_model {
        return Err(Error::contract(format!(
            "token width {} exceeds model width {d_model}; cannot pad down",
            s[1]
        )));
    }
    if s[1] == d_model {
        return Ok(tokens);
    }
    let zeros = tape.constant(Tensor::zeros(vec![s[0], d_model - s[1]]))?;
    tape.concat(&[tokens, zeros], 1)
}

/// Inverse of `pad_tokens`: drop the padded tail, keeping the first
/// `d_tok` columns.
pub fn unpad_tokens<E: Scalar>(
    tape: &mut GradTape<E>,
    tokens: NodeId,
    d_tok: usize,
) -> Result<NodeId> {
    let s = tape.shape(tokens).to_vec();
    if s.len() != 2 || s[1] < d_tok {
        return Err(Error::shape(format!("unpad_tokens: {s:?} -> width {d_tok}")));
    }
    if s[1] == d_tok {
        return Ok(tokens);
    }
    tape.slice(tokens, 1, 0, d_tok)
}

// ---- training ---------------------------------------------------------------------

/// Per-epoch mean losses from a tokenizer training run.
#[derive(Debug, Clone)]
pub struct VqTrainLog {
    pub epoch_losses: Vec<f64>,
}

/// Train encoder, decoder, and codebook jointly on a pool of channel-tagged
/// maps (all kinds mixed). Loss per map is
/// `mse(decode(quantize(z)), target) + mse(e, sg(z)) + 0.25 mse(z, sg(e))`
/// where `e` are the selected codebook rows; the quantizer passes gradients
/// straight through to `z`, and the codebook learns only from the middle
/// term. One Adam step per map, order reshuffled each epoch.
pub fn train_vq(
    maps: &[ModalityMap],
    k: usize,
    d_tok: usize,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<(ParamStore, VqParams, VqTrainLog)> {
    if maps.is_empty() {
        return Err(Error::domain("tokenizer training needs at least one map"));
    }
    if epochs == 0 {
        return Err(Error::domain("tokenizer training needs at least one epoch"));
    }
    let res = maps[0].res();
    if res % PATCH != 0 {
        return Err(Error::shape(format!("map resolution {res} is not a multiple of {PATCH}")));
    }
    for m in maps {
        if m.res() != res {
            return Err(Error::shape(format!(
                "mixed map resolutions {res} and {} in one training set",
                m.res()
            )));
        }
    }
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x7100));
    let params = VqParams::register(&mut store, k, d_tok, res / PATCH, &mut rng)?;
    let inputs = maps.iter().map(encode_channels).collect::<Result<Vec<_>>>()?;
    let targets = maps.iter().map(target_channels).collect::<Result<Vec<_>>>()?;
    let adam = AdamConfig::with_lr(lr as f32);
    let mut order: Vec<usize> = (0..maps.len()).collect();
    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x7200 + epoch as u64));
        order.shuffle(&mut shuffle_rng);
        let mut sum = 0.0f64;
        for &i in &order {
            let loss = vq_step(&mut store, &params, &inputs[i], &targets[i], &adam)
                .map_err(|e| Error::numeric(format!("epoch {epoch}: {e}")))?;
            sum += loss;
        }
        epoch_losses.push(sum / maps.len() as f64);
    }
    Ok((store, params, VqTrainLog { epoch_losses }))
}

fn vq_step(
    store: &mut ParamStore,
    params: &VqParams,
    input: &Tensor<f32>,
    target: &Tensor<f32>,
    adam: &AdamConfig,
) -> Result<f64> {
    let mut tape: GradTape<f32> = GradTape::new();
    let x = tape.constant(input.clone())?;
    let z = encode_on_tape(&mut tape, store, params, x)?;
    let codebook = store.value(params.codebook).clone();
    let (zq, indices) = tape.quantize_st(z, &codebook)?;
    let cb_node = tape.param(store, params.codebook)?;
    let e = tape.embed(cb_node, &indices)?;
    let sg_z = tape.stop_grad(z)?;
    let loss_cb = tape.mse(e, sg_z)?;
    let sg_e = tape.stop_grad(e)?;
    let commit = tape.mse(z, sg_e)?;
    let loss_commit = tape.scale(commit, COMMIT_WEIGHT)?;
    let y = decode_on_tape(&mut tape, store, params, zq)?;
    let t = tape.constant(target.clone())?;
    let loss_rec = tape.mse(y, t)?;
    let partial = tape.add(loss_rec, loss_cb)?;
    let loss = tape.add(partial, loss_commit)?;
    let loss_v = tape.value(loss).item()?.to_f64();
    store.zero_grads();
    tape.backward_into(loss, store, 1.0)?;
    adam_step(store, adam)?;
    Ok(loss_v)
}

/// Codebook usage histogram over a pool of maps: how many cells select
/// each row. Guards collapse; a healthy run uses at least K/4 rows.
pub fn codebook_usage(
    store: &ParamStore,
    params: &VqParams,
    maps: &[ModalityMap],
) -> Result<Vec<u64>> {
    let cb = params.codebook(store)?;
    let mut hist = vec![0u64; cb.len()];
    for m in maps {
        let z = encode(store, params, m)?;
        let q = quantize(&z, &cb)?;
        for &i in q.indices().expect("discrete sequence carries indices") {
            hist[i] += 1;
        }
    }
    Ok(hist)
}

// ---- reconstruction quality -------------------------------------------------------

/// Fraction of pixels whose decoded class id matches; both maps must be
/// segmentations of equal resolution.
pub fn seg_pixel_accuracy(truth: &ModalityMap, recon: &ModalityMap) -> Result<f64> {
    if truth.kind != ModalityKind::Seg || recon.kind != ModalityKind::Seg {
        return Err(Error::contract("pixel accuracy is defined on segmentation maps"));
    }
    if truth.res() != recon.res() {
        return Err(Error::shape("resolution mismatch"));
    }
    let a = truth.grid.data();
    let b = recon.grid.data();
    let hits = a.iter().zip(b.iter()).filter(|(x, y)| x.round() == y.round()).count();
    Ok(hits as f64 / a.len() as f64)
}

/// F1 agreement between two binary edge maps (threshold 0.5). Both empty
/// counts as perfect agreement; one empty as total disagreement.
pub fn edge_agreement_f1(truth: &ModalityMap, recon: &ModalityMap) -> Result<f64> {
    if truth.kind != ModalityKind::Edge || recon.kind != ModalityKind::Edge {
        return Err(Error::contract("edge F1 is defined on edge maps"));
    }
    if truth.res() != recon.res() {
        return Err(Error::shape("resolution mismatch"));
    }
    let a = truth.grid.data();
    let b = recon.grid.data();
    let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
    for (x, y) in a.iter().zip(b.iter()) {
        match (*x >= 0.5, *y >= 0.5) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fneg += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fneg == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fneg as f64))
}

/// One row of the discrete-vs-continuous reconstruction comparison.
#[derive(Debug, Clone)]
pub struct ReconRow {
    pub kind: ModalityKind,
    pub discrete_err: f64,
    pub continuous_err: f64,
    pub count: usize,
}

/// Mean squared reconstruction error on the raw decoder planes, per map
/// kind, for both token modes. The harness reports the table; which mode
/// wins at this scale is observed, not asserted.
pub fn reconstruction_table(
    store: &ParamStore,
    params: &VqParams,
    maps: &[ModalityMap],
) -> Result<Vec<ReconRow>> {
    let cb = params.codebook(store)?;
    let mut sums = [[0.0f64; 2]; 3];
    let mut counts = [0usize; 3];
    for m in maps {
        let target = target_channels(m)?;
        let z = encode(store, params, m)?;
        let q = quantize(&z, &cb)?;
        let yc = decode_planes(store, params, &z)?;
        let yd = decode_planes(store, params, &q)?;
        let ki = kind_index(m.kind);
        sums[ki][0] += mean_sq_err(&yd, &target);
        sums[ki][1] += mean_sq_err(&yc, &target);
        counts[ki] += 1;
    }
    Ok(ModalityKind::ALL
        .iter()
        .map(|&kind| {
            let ki = kind_index(kind);
            let n = counts[ki].max(1) as f64;
            ReconRow {
                kind,
                discrete_err: sums[ki][0] / n,
                continuous_err: sums[ki][1] / n,
                count: counts[ki],
            }
        })
        .collect())
}

fn mean_sq_err(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let n = a.numel().max(1) as f64;
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| {
            let d = (*x - *y) as f64;
            d * d
        })
        .sum::<f64>()
        / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, render};

    fn small_maps(n: usize, res: usize) -> Vec<ModalityMap> {
        let mut out = Vec::new();
        for i in 0..n {
            let scene = generate_scene(900 + i as u64);
            let r = render(&scene, res).unwrap();
            out.push(r.depth);
            out.push(r.seg);
            out.push(r.edge);
        }
        out
    }

    fn test_params(k: usize, d_tok: usize, g: usize, seed: u64) -> (ParamStore, VqParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = VqParams::register(&mut store, k, d_tok, g, &mut rng).unwrap();
        (store, p)
    }

    fn depth_map(res: usize, f: impl Fn(usize, usize) -> f32) -> ModalityMap {
        let mut grid = vec![0f32; res * res];
        for r in 0..res {
            for c in 0..res {
                grid[r * res + c] = f(r, c);
            }
        }
        ModalityMap::new(ModalityKind::Depth, Tensor::from_vec(vec![res, res, 1], grid).unwrap())
            .unwrap()
    }

    #[test]
    fn nearest_code_examples_from_the_contract() {
        // Two 1-D codes {0, 1}: z = 0.4 sits nearer 0.
        let cb = Codebook::new(Tensor::from_vec(vec![2, 1], vec![0.0, 1.0]).unwrap()).unwrap();
        let z = TokenSequence::continuous(None, 1, Tensor::from_vec(vec![1, 1], vec![0.4]).unwrap())
            .unwrap();
        let q = quantize(&z, &cb).unwrap();
        assert_eq!(q.indices().unwrap(), &[0]);
        assert_eq!(q.vectors().data()[0], 0.0);

        // Rows 2 and 5 equidistant from the query: the tie goes to 2.
        let mut rows = vec![9.0f32; 6 * 2];
        rows[2 * 2] = 1.0;
        rows[2 * 2 + 1] = 0.0;
        rows[5 * 2] = -1.0;
        rows[5 * 2 + 1] = 0.0;
        let cb = Codebook::new(Tensor::from_vec(vec![6, 2], rows).unwrap()).unwrap();
        let z =
            TokenSequence::continuous(None, 1, Tensor::from_vec(vec![1, 2], vec![0.0, 0.0]).unwrap())
                .unwrap();
        assert_eq!(quantize(&z, &cb).unwrap().indices().unwrap(), &[2]);
    }

    #[test]
    fn codebook_rejects_degenerate_shapes() {
        assert!(Codebook::new(Tensor::zeros(vec![1, 4])).is_err());
        assert!(Codebook::new(Tensor::zeros(vec![4])).is_err());
        let inf = Tensor::from_vec(vec![2, 1], vec![f32::INFINITY, 0.0]).unwrap();
        assert!(Codebook::new(inf).is_err());
    }

    #[test]
    fn quantize_is_idempotent_and_vectors_are_codebook_rows() {
        let (store, p) = test_params(8, 16, 2, 11);
        let map = depth_map(8, |r, c| ((r * 8 + c) as f32) / 63.0);
        let z = encode(&store, &p, &map).unwrap();
        let cb = p.codebook(&store).unwrap();
        let q1 = quantize(&z, &cb).unwrap();
        assert_eq!(q1.mode(), TokenMode::Discrete);
        let d = cb.d_tok();
        for (cell, &i) in q1.indices().unwrap().iter().enumerate() {
            assert_eq!(&q1.vectors().data()[cell * d..(cell + 1) * d], cb.row(i));
        }
        let q2 = quantize(&q1, &cb).unwrap();
        assert_eq!(q1.indices().unwrap(), q2.indices().unwrap());
        assert_eq!(q1.vectors().data(), q2.vectors().data());
    }

    #[test]
    fn straight_through_gradient_equals_identity_graph_on_quantized_values() {
        // Path A: leaf -> quantize -> mse. Path B: the quantized values as
        // a leaf -> mse. The straight-through rule makes grad(A) wrt z a
        // bitwise copy of grad(B) wrt the leaf; 64-bit agreement to 1e-6.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let z0: Tensor<f64> = Tensor::randn(vec![6, 3], 1.0, &mut rng);
        let cb: Tensor<f64> = Tensor::randn(vec![5, 3], 1.0, &mut rng);
        let target: Tensor<f64> = Tensor::randn(vec![6, 3], 1.0, &mut rng);

        let mut tape_a: GradTape<f64> = GradTape::new();
        let z = tape_a.leaf(z0.clone(), true).unwrap();
        let (zq, indices) = tape_a.quantize_st(z, &cb).unwrap();
        let t = tape_a.constant(target.clone()).unwrap();
        let loss_a = tape_a.mse(zq, t).unwrap();
        let grad_a = tape_a.grad_of(loss_a, z).unwrap();

        let mut zq_vals = Vec::new();
        for &i in &indices {
            zq_vals.extend_from_slice(&cb.data()[i * 3..(i + 1) * 3]);
        }
        let mut tape_b: GradTape<f64> = GradTape::new();
        let leaf = tape_b.leaf(Tensor::from_vec(vec![6, 3], zq_vals).unwrap(), true).unwrap();
        let t = tape_b.constant(target).unwrap();
        let loss_b = tape_b.mse(leaf, t).unwrap();
        let grad_b = tape_b.grad_of(loss_b, leaf).unwrap();

        for (a, b) in grad_a.data().iter().zip(grad_b.data().iter()) {
            assert!((a - b).abs() <= 1e-6, "straight-through grad {a} vs identity {b}");
        }
    }

    #[test]
    fn constant_map_encodes_every_cell_identically() {
        let (store, p) = test_params(4, 16, 2, 3);
        let map = depth_map(8, |_, _| 0.0);
        let z = encode(&store, &p, &map).unwrap();
        let d = z.vectors().data();
        let first = &d[0..16];
        for cell in 1..z.len() {
            assert_eq!(&d[cell * 16..(cell + 1) * 16], first, "cell {cell} differs");
        }
    }

    #[test]
    fn encode_is_deterministic_and_sensitive_to_one_patch() {
        let (store, p) = test_params(4, 16, 2, 7);
        let map = depth_map(8, |r, c| ((r + c) as f32) / 14.0);
        let a = encode(&store, &p, &map).unwrap();
        let b = encode(&store, &p, &map).unwrap();
        assert_eq!(a.vectors().data(), b.vectors().data());

        // Bump one pixel inside the top-left patch only.
        let mut bumped = map.clone();
        let mut g = bumped.grid.data().to_vec();
        g[0] += 0.25;
        bumped.grid = Tensor::from_vec(vec![8, 8, 1], g).unwrap();
        let c = encode(&store, &p, &bumped).unwrap();
        assert_ne!(a.vectors().data(), c.vectors().data());
    }

    #[test]
    fn encode_rejects_wrong_resolution() {
        let (store, p) = test_params(4, 16, 2, 7);
        let map = depth_map(12, |_, _| 0.5);
        assert!(matches!(encode(&store, &p, &map), Err(Error::Shape(_))));
    }

    #[test]
    fn decode_is_deterministic_and_postprocesses_per_kind() {
        let (store, p) = test_params(4, 16, 2, 19);
        let scene = generate_scene(77);
        let r = render(&scene, 8).unwrap();
        for map in [r.depth, r.seg, r.edge] {
            let z = encode(&store, &p, &map).unwrap();
            let a = decode(&store, &p, &z).unwrap();
            let b = decode(&store, &p, &z).unwrap();
            assert_eq!(a.grid.data(), b.grid.data());
            assert_eq!(a.kind, map.kind);
            assert_eq!(a.res(), 8);
            for &v in a.grid.data() {
                match map.kind {
                    ModalityKind::Depth => assert!((0.0..=1.0).contains(&v)),
                    ModalityKind::Seg => assert!(v == v.round() && v < SEG_CLASSES as f32),
                    ModalityKind::Edge => assert!(v == 0.0 || v == 1.0),
                }
            }
        }
    }

    #[test]
    fn decode_rejects_untagged_sequences() {
        let (store, p) = test_params(4, 16, 2, 23);
        let z = TokenSequence::continuous(None, 2, Tensor::zeros(vec![4, 16])).unwrap();
        assert!(matches!(decode(&store, &p, &z), Err(Error::Contract(_))));
    }

    #[test]
    fn encoder_and_decoder_pass_gradient_checks() {
        use crate::tensor::grad_check;
        let (store, p) = test_params(4, 8, 1, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0: Tensor<f64> = Tensor::randn(vec![4, 4, IN_CHANNELS], 0.5, &mut rng);
        let store_enc = store.clone();
        let p_enc = p.clone();
        let err = grad_check(
            &move |tape: &mut GradTape<f64>, x| {
                let z = encode_on_tape(tape, &store_enc, &p_enc, x)?;
                let s = tape.mul(z, z)?;
                tape.sum(s)
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "encoder grad error {err}");

        let t0: Tensor<f64> = Tensor::randn(vec![1, 8], 0.5, &mut rng);
        let err = grad_check(
            &move |tape: &mut GradTape<f64>, t| {
                let y = decode_on_tape(tape, &store, &p, t)?;
                let s = tape.mul(y, y)?;
                tape.sum(s)
            },
            &t0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "decoder grad error {err}");
    }

    #[test]
    fn autoencoder_composite_passes_gradient_check() {
        for seed in [0u64, 9] {
            let err = autoencoder_grad_error(seed).unwrap();
            assert!(err < 1e-4, "autoencoder grad error {err} at seed {seed}");
        }
    }

    #[test]
    fn pad_tokens_contract() {
        let mut tape: GradTape<f32> = GradTape::new();
        let x = tape
            .leaf(Tensor::from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap(), false)
            .unwrap();
        // Identity at equal widths: same node comes back.
        assert_eq!(pad_tokens(&mut tape, x, 3).unwrap(), x);
        let padded = pad_tokens(&mut tape, x, 5).unwrap();
        assert_eq!(tape.shape(padded), [2, 5]);
        let d = tape.value(padded).data().to_vec();
        assert_eq!(d, vec![1., 2., 3., 0., 0., 4., 5., 6., 0., 0.]);
        let back = unpad_tokens(&mut tape, padded, 3).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(x).data());
        assert!(matches!(pad_tokens(&mut tape, x, 2), Err(Error::Contract(_))));
    }

    #[test]
    fn training_memorizes_a_single_map_and_is_seed_stable() {
        let maps = vec![depth_map(8, |r, c| ((r * 8 + c) as f32) / 63.0)];
        let (store_a, _, log_a) = train_vq(&maps, 4, 8, 150, 1e-3, 99).unwrap();
        assert!(
            log_a.epoch_losses.last().unwrap() < &0.01,
            "memorization stalled: {:?}",
            &log_a.epoch_losses[140..]
        );
        let (store_b, _, log_b) = train_vq(&maps, 4, 8, 150, 1e-3, 99).unwrap();
        assert_eq!(log_a.epoch_losses, log_b.epoch_losses);
        assert_eq!(
            store_a.value(store_a.id("vq/embed/w").unwrap()).data(),
            store_b.value(store_b.id("vq/embed/w").unwrap()).data()
        );
        assert_eq!(
            store_a.value(store_a.id("vq/codebook").unwrap()).data(),
            store_b.value(store_b.id("vq/codebook").unwrap()).data()
        );
    }

    #[test]
    fn training_loss_trends_down_on_a_small_pool() {
        let maps = small_maps(6, 8);
        let (store, p, log) = train_vq(&maps, 16, 8, 8, 1e-3, 7).unwrap();
        let first = log.epoch_losses.first().unwrap();
        let last = log.epoch_losses.last().unwrap();
        assert!(last < first, "no improvement: {log:?}");
        let usage = codebook_usage(&store, &p, &maps).unwrap();
        assert_eq!(usage.iter().sum::<u64>() as usize, maps.len() * p.grid_side().pow(2));
    }

    #[test]
    fn reconstruction_table_covers_all_kinds() {
        let maps = small_maps(2, 8);
        let (store, p, _) = train_vq(&maps, 8, 8, 2, 1e-3, 13).unwrap();
        let table = reconstruction_table(&store, &p, &maps).unwrap();
        assert_eq!(table.len(), 3);
        for row in &table {
            assert_eq!(row.count, 2);
            assert!(row.discrete_err.is_finite() && row.continuous_err.is_finite());
        }
    }

    #[test]
    fn agreement_metrics_agree_with_hand_counts() {
        let seg = |vals: Vec<f32>| {
            ModalityMap::new(ModalityKind::Seg, Tensor::from_vec(vec![2, 2, 1], vals).unwrap())
                .unwrap()
        };
        let a = seg(vec![0., 1., 2., 3.]);
        let b = seg(vec![0., 1., 2., 0.]);
        assert!((seg_pixel_accuracy(&a, &b).unwrap() - 0.75).abs() < 1e-12);

        let edge = |vals: Vec<f32>| {
            ModalityMap::new(ModalityKind::Edge, Tensor::from_vec(vec![2, 2, 1], vals).unwrap())
                .unwrap()
        };
        let t = edge(vec![1., 1., 0., 0.]);
        let r = edge(vec![1., 0., 1., 0.]);
        // tp=1, fp=1, fn=1 -> F1 = 2/4.
        assert!((edge_agreement_f1(&t, &r).unwrap() - 0.5).abs() < 1e-12);
        let empty = edge(vec![0., 0., 0., 0.]);
        assert_eq!(edge_agreement_f1(&empty, &empty).unwrap(), 1.0);
        assert_eq!(edge_agreement_f1(&t, &empty).unwrap(), 0.0);
    }

    #[test]
    fn channel_coding_flags_malformed_values() {
        let bad_seg = ModalityMap {
            kind: ModalityKind::Seg,
            grid: Tensor::from_vec(vec![2, 2, 1], vec![0.0, 1.0, 2.0, 7.0]).unwrap(),
        };
        assert!(matches!(encode_channels(&bad_seg), Err(Error::Domain(_))));
        let bad_edge = ModalityMap {
            kind: ModalityKind::Edge,
            grid: Tensor::from_vec(vec![2, 2, 1], vec![0.0, 0.4, 1.0, 0.0]).unwrap(),
        };
        assert!(matches!(encode_channels(&bad_edge), Err(Error::Domain(_))));
    }
}
