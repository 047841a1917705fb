//! Central-difference gradient checking.
//!
//! The tape's analytic gradients are compared against an oracle that
//! never touches the backward code: f is re-evaluated at x ± h·e_i and
//! differenced. Checks run in f64 so the oracle itself is trustworthy
//! at h = 1e-5.
//!
//! `quantize_st` is deliberately absent from the suite: its forward map
//! is piecewise constant, so the true derivative is zero almost
//! everywhere and the straight-through estimator is checked by its own
//! pass-through tests instead.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{GradTape, NodeId};
use super::Tensor;
use crate::error::{Error, Result};

/// Max over coordinates of |analytic − central| / max(1, |central|).
///
/// `f` must build a scalar from the single leaf it is given.
pub fn grad_check<F>(f: &F, x0: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut GradTape<f64>, NodeId) -> Result<NodeId>,
{
    let mut tape = GradTape::new();
    let x = tape.leaf(x0.clone(), true)?;
    let y = f(&mut tape, x)?;
    if tape.value(y).numel() != 1 {
        return Err(Error::contract(format!(
            "grad_check: f must return a scalar, got shape {:?}",
            tape.shape(y)
        )));
    }
    let analytic = tape.grad_of(y, x)?;
    let base = x0.data().to_vec();
    let mut max_err = 0.0f64;
    for i in 0..base.len() {
        let mut pert = base.clone();
        pert[i] = base[i] + h;
        let fp = eval_scalar(f, x0.shape(), pert.clone())?;
        pert[i] = base[i] - h;
        let fm = eval_scalar(f, x0.shape(), pert)?;
        let central = (fp - fm) / (2.0 * h);
        let err = (analytic.data()[i] - central).abs() / central.abs().max(1.0);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}

fn eval_scalar<F>(f: &F, shape: &[usize], data: Vec<f64>) -> Result<f64>
where
    F: Fn(&mut GradTape<f64>, NodeId) -> Result<NodeId>,
{
    let mut tape = GradTape::new();
    let x = tape.leaf(Tensor::from_vec(shape.to_vec(), data)?, false)?;
    let y = f(&mut tape, x)?;
    tape.value(y).item()
}

fn randn64(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), std, rng)
}

/// Slice a packed 1-D leaf into a shaped sub-tensor node.
fn unpack(
    tape: &mut GradTape<f64>,
    x: NodeId,
    offset: &mut usize,
    shape: &[usize],
) -> Result<NodeId> {
    let n: usize = shape.iter().product();
    let s = tape.slice(x, 0, *offset, n)?;
    *offset += n;
    tape.reshape(s, shape.to_vec())
}

/// Named gradient-check instances covering every differentiable op,
/// including the composite attention and MLP blocks used by the models.
/// Returns (name, max relative error) per instance. `seed` draws a fresh
/// random instance of every check; any seed must pass.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    let h = 1e-5;

    // 1. Elementwise arithmetic: add, sub, mul, div, scale, sum.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 101);
        let x0 = randn64(&mut rng, &[10], 0.5);
        let f = |tape: &mut GradTape<f64>, x: NodeId| -> Result<NodeId> {
            let a = tape.slice(x, 0, 0, 5)?;
            let b = tape.slice(x, 0, 5, 5)?;
            let shift = tape.constant(Tensor::full(vec![5], 2.5))?;
            let t1 = tape.mul(a, b)?;
            let bs = tape.add(b, shift)?;
            let t2 = tape.div(a, bs)?;
            let t3 = tape.scale(a, 0.3)?;
            let t4 = tape.add(t1, t2)?;
            let t5 = tape.sub(t4, t3)?;
            tape.sum(t5)
        };
        out.push(("elementwise-arith".to_string(), grad_check(&f, &x0, h)?));
    }

    // 2. MLP: matmul, bias add (broadcast), gelu, layer_norm, mse.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 202);
        let xin = randn64(&mut rng, &[3, 4], 1.0);
        let target = randn64(&mut rng, &[3, 4], 1.0);
        let x0 = randn64(&mut rng, &[66], 0.4);
        let f = move |tape: &mut GradTape<f64>, x: NodeId| -> Result<NodeId> {
            let mut off = 0;
            let w1 = unpack(tape, x, &mut off, &[4, 6])?;
            let b1 = unpack(tape, x, &mut off, &[6])?;
            let w2 = unpack(tape, x, &mut off, &[6, 4])?;
            let b2 = unpack(tape, x, &mut off, &[4])?;
            let gamma = unpack(tape, x, &mut off, &[4])?;
            let beta = unpack(tape, x, &mut off, &[4])?;
            let xc = tape.constant(xin.clone())?;
            let tc = tape.constant(target.clone())?;
            let h1 = tape.matmul(xc, w1)?;
            let h1 = tape.add(h1, b1)?;
            let h1 = tape.gelu(h1)?;
            let o = tape.matmul(h1, w2)?;
            let o = tape.add(o, b2)?;
            let ln = tape.layer_norm(o, gamma, beta)?;
            tape.mse(ln, tc)
        };
        out.push(("mlp-gelu-layernorm".to_string(), grad_check(&f, &x0, h)?));
    }

    // 3. Single-head attention core: transpose, matmul, scaled softmax.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 303);
        let target = randn64(&mut rng, &[3, 4], 0.5);
        let x0 = randn64(&mut rng, &[52], 0.7);
        let f = move |tape: &mut GradTape<f64>, x: NodeId| -> Result<NodeId> {
            let mut off = 0;
            let q = unpack(tape, x, &mut off, &[3, 4])?;
            let k = unpack(tape, x, &mut off, &[5, 4])?;
            let v = unpack(tape, x, &mut off, &[5, 4])?;
            let kt = tape.transpose(k, 0, 1)?;
            let scores = tape.matmul(q, kt)?;
            let att = tape.softmax(scores, 1, 2.0)?;
            let o = tape.matmul(att, v)?;
            let tc = tape.constant(target.clone())?;
            tape.mse(o, tc)
        };
        out.push(("attention-core".to_string(), grad_check(&f, &x0, h)?));
    }

    // 4. Multi-head block: reshape, transpose, batch_matmul, per-column
    //    temperature division, concat, repeat_rows.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 404);
        let d = 8;
        let heads = 2;
        let dh = d / heads;
        let xtok = randn64(&mut rng, &[4, d], 0.8); // 4 context tokens + 2 broadcast rows
        let lat = randn64(&mut rng, &[3, d], 0.8);
        let temps_v: Vec<f64> = (0..6).map(|i| 0.5 + 0.25 * i as f64).collect();
        let target = randn64(&mut rng, &[3, d], 0.5);
        let x0 = randn64(&mut rng, &[4 * d * d + d], 0.3);
        let f = move |tape: &mut GradTape<f64>, x: NodeId| -> Result<NodeId> {
            let mut off = 0;
            let wq = unpack(tape, x, &mut off, &[d, d])?;
            let wk = unpack(tape, x, &mut off, &[d, d])?;
            let wv = unpack(tape, x, &mut off, &[d, d])?;
            let wo = unpack(tape, x, &mut off, &[d, d])?;
            let mnull = unpack(tape, x, &mut off, &[d])?;
            let xc = tape.constant(xtok.clone())?;
            let filled = tape.repeat_rows(mnull, 2)?;
            let ctx = tape.concat(&[xc, filled], 0)?; // (6, d)
            let lc = tape.constant(lat.clone())?;
            let q = tape.matmul(lc, wq)?;
            let k = tape.matmul(ctx, wk)?;
            let v = tape.matmul(ctx, wv)?;
            let qh = tape.reshape(q, vec![3, heads, dh])?;
            let qh = tape.transpose(qh, 0, 1)?; // (h, 3, dh)
            let kh = tape.reshape(k, vec![6, heads, dh])?;
            let kh = tape.transpose(kh, 0, 1)?;
            let kt = tape.transpose(kh, 1, 2)?; // (h, dh, 6)
            let vh = tape.reshape(v, vec![6, heads, dh])?;
            let vh = tape.transpose(vh, 0, 1)?;
            let scores = tape.batch_matmul(qh, kt)?; // (h, 3, 6)
            let temps = tape.constant(Tensor::from_vec(vec![6], temps_v.clone())?)?;
            let scores = tape.div(scores, temps)?;
            let att = tape.softmax(scores, 2, (dh as f64).sqrt())?;
            let oh = tape.batch_matmul(att, vh)?; // (h, 3, dh)
            let oh = tape.transpose(oh, 0, 1)?;
            let o = tape.reshape(oh, vec![3, d])?;
            let o = tape.matmul(o, wo)?;
            let tc = tape.constant(target.clone())?;
            tape.mse(o, tc)
        };
        out.push(("multihead-block".to_string(), grad_check(&f, &x0, h)?));
    }

    // 5. Embedding with repeated indices + layer_norm affine params.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 505);
        let target = randn64(&mut rng, &[4, 3], 0.5);
        let x0 = randn64(&mut rng, &[27], 0.6);
        let f = move |tape: &mut GradTape<f64>, x: NodeId| -> Result<NodeId> {
            let mut off = 0;
            let table = unpack(tape, x, &mut off, &[7, 3])?;
            let gamma = unpack(tape, x, &mut off, &[3])?;
            let beta = unpack(tape, x, &mut off, &[3])?;
            let emb = tape.embed(table, &[0, 3, 3, 6])?;
            let ln = tape.layer_norm(emb, gamma, beta)?;
            let tc = tape.constant(target.clone())?;
            tape.mse(ln, tc)
        };
        out.push(("embedding-layernorm".to_string(), grad_check(&f, &x0, h)?));
    }

    // 6. Resampling chain: patchify, unpatchify, nearest + bilinear
    //    upsampling, scale, sub.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 606);
        let target = randn64(&mut rng, &[5, 7, 2], 0.5);
        let x0 = randn64(&mut rng, &[32], 0.9);
        let f = move |tape: &mut GradTape<f64>, x: NodeId| -> Result<NodeId> {
            let img = tape.reshape(x, vec![4, 4, 2])?;
            let p = tape.patchify(img, 2)?;
            let back = tape.unpatchify(p, 2, 4, 4, 2)?;
            let up = tape.upsample_nearest(back, 2)?;
            let bi = tape.upsample_bilinear(up, 5, 7)?;
            let sc = tape.scale(bi, 0.7)?;
            let tc = tape.constant(target.clone())?;
            let df = tape.sub(sc, tc)?;
            let zero = tape.constant(Tensor::zeros(vec![5, 7, 2]))?;
            tape.mse(df, zero)
        };
        out.push(("resampling-chain".to_string(), grad_check(&f, &x0, h)?));
    }

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_matches_central_difference() {
        let x0 = Tensor::from_vec(vec![3], vec![0.5f64, -1.2, 2.0]).unwrap();
        let f = |tape: &mut GradTape<f64>, x: NodeId| -> Result<NodeId> {
            let y = tape.mul(x, x)?;
            tape.sum(y)
        };
        let err = grad_check(&f, &x0, 1e-5).unwrap();
        assert!(err < 1e-9, "quadratic should be near-exact, err={err}");
    }

    #[test]
    fn suite_passes_everywhere() {
        for (name, err) in gradcheck_suite(0).unwrap() {
            assert!(err < 1e-4, "{name}: max rel err {err}");
        }
    }
}
