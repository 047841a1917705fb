//! Complexity benchmark: connector cross-attention cost versus a full
//! self-attention baseline as the input sequence grows.
//!
//! Counts come from the instrumented matmul kernels and are checked
//! against the closed-form formulas; the reported slopes are fit on the
//! attention-core terms (the only ones whose dependence on M is under
//! test — projections contribute an M-independent or proportional floor
//! that would blur the exponent at desk widths).

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::blocks::{block_forward, Block};
use crate::error::{Error, Result};
use crate::mmlc::{attention_core_macs, baseline_core_macs, baseline_mac_count, mac_count};
use crate::tensor::{mac_count_reset, mac_count_total, GradTape, ParamStore, Tensor};

#[derive(Debug, Clone, Serialize)]
pub struct BenchPoint {
    #[serde(rename = "M")]
    pub m: usize,
    pub macs: u64,
    pub ns: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitSeries {
    pub points: Vec<BenchPoint>,
    pub slope: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub connector: FitSeries,
    pub baseline: FitSeries,
}

fn heads_for(d: usize) -> usize {
    [4usize, 2, 1].into_iter().find(|h| d % h == 0).unwrap_or(1)
}

/// Least-squares fit of log(y) on log(x); returns (slope, r²).
fn loglog_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = lx.iter().zip(ly.iter()).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = lx
        .iter()
        .zip(ly.iter())
        .map(|(a, b)| {
            let e = b - (slope * a + intercept);
            e * e
        })
        .sum();
    let ss_tot: f64 = ly.iter().map(|v| (v - my) * (v - my)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    (slope, r2)
}

fn median(mut v: Vec<u64>) -> u64 {
    v.sort_unstable();
    v[v.len() / 2]
}

/// Run the connector's cross-attention block (N latents reading an
/// M-token sequence) and the full self-attention baseline over the same
/// sequence, for each M. Instrumented MAC tallies must equal the
/// closed-form counts exactly; wall time is the median of `trials`.
pub fn bench_mmlc(m_list: &[usize], n: usize, d: usize, trials: usize) -> Result<BenchReport> {
    if m_list.len() < 3 {
        return Err(Error::contract(format!(
            "need at least 3 sequence lengths, got {}",
            m_list.len()
        )));
    }
    let (lo, hi) = (
        *m_list.iter().min().expect("nonempty"),
        *m_list.iter().max().expect("nonempty"),
    );
    if lo == 0 || hi < 8 * lo {
        return Err(Error::contract(format!(
            "sequence lengths must span at least 8x, got {lo}..{hi}"
        )));
    }
    if n == 0 || d == 0 || trials == 0 {
        return Err(Error::domain("latent count, width, and trials must be positive"));
    }
    let heads = heads_for(d);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0xBE_EC);
    let cross = Block::register(&mut store, "bench/cross", d, true, &mut rng)?;
    let slf = Block::register(&mut store, "bench/self", d, false, &mut rng)?;
    let latents: Tensor<f32> = Tensor::randn(vec![n, d], 1.0, &mut rng);

    let mut connector_points = Vec::new();
    let mut baseline_points = Vec::new();
    for &m in m_list {
        let seq: Tensor<f32> = {
            let mut r = ChaCha8Rng::seed_from_u64(m as u64);
            Tensor::randn(vec![m, d], 1.0, &mut r)
        };

        let run_cross = |store: &ParamStore| -> Result<()> {
            let mut tape: GradTape<f32> = GradTape::new();
            let x = tape.constant(latents.clone())?;
            let kv = tape.constant(seq.clone())?;
            block_forward(&mut tape, store, &cross, x, Some((kv, None)), heads)?;
            Ok(())
        };
        let run_self = |store: &ParamStore| -> Result<()> {
            let mut tape: GradTape<f32> = GradTape::new();
            let x = tape.constant(seq.clone())?;
            block_forward(&mut tape, store, &slf, x, None, heads)?;
            Ok(())
        };

        mac_count_reset();
        run_cross(&store)?;
        let macs_cross = mac_count_total();
        let want_cross = mac_count(m, n, d, heads);
        if macs_cross != want_cross {
            return Err(Error::numeric(format!(
                "connector MAC tally {macs_cross} != closed form {want_cross} at M={m}"
            )));
        }
        mac_count_reset();
        run_self(&store)?;
        let macs_self = mac_count_total();
        let want_self = baseline_mac_count(m, d, heads);
        if macs_self != want_self {
            return Err(Error::numeric(format!(
                "baseline MAC tally {macs_self} != closed form {want_self} at M={m}"
            )));
        }

        let time = |f: &dyn Fn(&ParamStore) -> Result<()>| -> Result<u64> {
            let mut times = Vec::with_capacity(trials);
            for _ in 0..trials {
                let t0 = Instant::now();
                f(&store)?;
                times.push(t0.elapsed().as_nanos() as u64);
            }
            Ok(median(times))
        };
        connector_points.push(BenchPoint { m, macs: macs_cross, ns: time(&run_cross)? });
        baseline_points.push(BenchPoint { m, macs: macs_self, ns: time(&run_self)? });
    }

    let ms: Vec<f64> = m_list.iter().map(|&m| m as f64).collect();
    let core_cross: Vec<f64> =
        m_list.iter().map(|&m| attention_core_macs(m, n, d) as f64).collect();
    let core_self: Vec<f64> = m_list.iter().map(|&m| baseline_core_macs(m, d) as f64).collect();
    let (slope_c, r2_c) = loglog_fit(&ms, &core_cross);
    let (slope_b, r2_b) = loglog_fit(&ms, &core_self);
    Ok(BenchReport {
        connector: FitSeries { points: connector_points, slope: slope_c, r2: r2_c },
        baseline: FitSeries { points: baseline_points, slope: slope_b, r2: r2_b },
    })
}
