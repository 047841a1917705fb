//! Exact information-theoretic oracle over small finite joint tables.
//!
//! Everything is plain summation in f64, entropies in bits, with the
//! 0·log 0 := 0 convention. Conditional mutual information is computed
//! two independent ways (entropy difference and the KL form) and the two
//! are cross-checked internally.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Largest alphabet per variable; keeps tables enumerable.
pub const MAX_ALPHABET: usize = 16;
const SUM_TOL: f64 = 1e-12;

/// One of the three variables of a joint table p(x, y, m).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    M,
}

/// A finite probability table p(x, y, m), stored row-major as
/// `p[x][y][m]`.
#[derive(Debug, Clone)]
pub struct JointDistribution {
    nx: usize,
    ny: usize,
    nm: usize,
    p: Vec<f64>,
}

impl JointDistribution {
    pub fn new(nx: usize, ny: usize, nm: usize, p: Vec<f64>) -> Result<Self> {
        for (name, n) in [("x", nx), ("y", ny), ("m", nm)] {
            if n == 0 || n > MAX_ALPHABET {
                return Err(Error::contract(format!(
                    "alphabet |{name}| = {n} outside [1, {MAX_ALPHABET}]"
                )));
            }
        }
        if p.len() != nx * ny * nm {
            return Err(Error::contract(format!(
                "table has {} entries, expected {}",
                p.len(),
                nx * ny * nm
            )));
        }
        let mut sum = 0.0;
        for &v in &p {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::contract(format!("probability entry {v} is invalid")));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(Error::contract(format!("table sums to {sum}, not 1")));
        }
        Ok(JointDistribution { nx, ny, nm, p })
    }

    /// Uniformly random positive table, normalized twice so the sum
    /// lands within the admission tolerance.
    pub fn random(nx: usize, ny: usize, nm: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p: Vec<f64> = (0..nx * ny * nm).map(|_| rng.gen::<f64>()).collect();
        for _ in 0..2 {
            let s: f64 = p.iter().sum();
            for v in p.iter_mut() {
                *v /= s;
            }
        }
        JointDistribution::new(nx, ny, nm, p)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.nx, self.ny, self.nm)
    }

    fn dim(&self, a: Axis) -> usize {
        match a {
            Axis::X => self.nx,
            Axis::Y => self.ny,
            Axis::M => self.nm,
        }
    }

    fn coord(a: Axis, x: usize, y: usize, m: usize) -> usize {
        match a {
            Axis::X => x,
            Axis::Y => y,
            Axis::M => m,
        }
    }

    /// Marginal over the given axes, mixed-radix keyed in axis order.
    fn marginal(&self, axes: &[Axis]) -> Vec<f64> {
        let size: usize = axes.iter().map(|&a| self.dim(a)).product();
        let mut out = vec![0.0; size];
        self.for_each(|x, y, m, v| {
            let mut k = 0;
            for &a in axes {
                k = k * self.dim(a) + Self::coord(a, x, y, m);
            }
            out[k] += v;
        });
        out
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize, usize, f64)) {
        let mut i = 0;
        for x in 0..self.nx {
            for y in 0..self.ny {
                for m in 0..self.nm {
                    f(x, y, m, self.p[i]);
                    i += 1;
                }
            }
        }
    }
}

fn plog(p: f64, q: f64) -> f64 {
    if p <= 0.0 {
        0.0 // 0·log 0 := 0
    } else {
        p * (p / q).log2()
    }
}

/// H(target | given) in bits by direct summation.
pub fn cond_entropy(p: &JointDistribution, target: Axis, given: &[Axis]) -> Result<f64> {
    if given.contains(&target) {
        return Err(Error::contract("conditional entropy: target appears in the condition"));
    }
    for (i, a) in given.iter().enumerate() {
        if given[..i].contains(a) {
            return Err(Error::contract("conditional entropy: duplicate condition axis"));
        }
    }
    let mut joint_axes = given.to_vec();
    joint_axes.push(target);
    let joint = p.marginal(&joint_axes);
    let cond = p.marginal(given);
    let nt = p.dim(target);
    let mut h = 0.0;
    for (k, &pj) in joint.iter().enumerate() {
        h -= plog(pj, cond[k / nt]);
    }
    Ok(h)
}

/// I(X; M | Y) in bits, computed from the KL form
/// Σ p(x,y,m)·log₂[ p(x,y,m)·p(y) / (p(x,y)·p(y,m)) ] and cross-checked
/// against H(X|Y) − H(X|Y,M).
pub fn cond_mutual_info(p: &JointDistribution) -> Result<f64> {
    let py = p.marginal(&[Axis::Y]);
    let pxy = p.marginal(&[Axis::X, Axis::Y]);
    let pym = p.marginal(&[Axis::Y, Axis::M]);
    let (_, ny, nm) = p.dims();
    let mut kl = 0.0;
    p.for_each(|x, y, m, v| {
        if v > 0.0 {
            kl += v * ((v * py[y]) / (pxy[x * ny + y] * pym[y * nm + m])).log2();
        }
    });
    let by_entropy =
        cond_entropy(p, Axis::X, &[Axis::Y])? - cond_entropy(p, Axis::X, &[Axis::Y, Axis::M])?;
    if (kl - by_entropy).abs() > 1e-9 {
        return Err(Error::numeric(format!(
            "mutual information formulas disagree: KL {kl} vs entropy difference {by_entropy}"
        )));
    }
    Ok(kl)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table_from(f: impl Fn(usize, usize, usize) -> f64, nx: usize, ny: usize, nm: usize) -> JointDistribution {
        let mut p = Vec::with_capacity(nx * ny * nm);
        for x in 0..nx {
            for y in 0..ny {
                for m in 0..nm {
                    p.push(f(x, y, m));
                }
            }
        }
        let s: f64 = p.iter().sum();
        for v in p.iter_mut() {
            *v /= s;
        }
        JointDistribution::new(nx, ny, nm, p).unwrap()
    }

    #[test]
    fn uniform_independent_x_has_two_bits_given_y() {
        // x uniform over 4, independent of (y, m) with a lumpy q(y, m).
        let q = [[0.1, 0.3], [0.4, 0.2]];
        let p = table_from(|_, y, m| 0.25 * q[y][m], 4, 2, 2);
        let h = cond_entropy(&p, Axis::X, &[Axis::Y]).unwrap();
        assert!((h - 2.0).abs() < 1e-12, "H(x|y) = {h}");
        let hm = cond_entropy(&p, Axis::X, &[Axis::Y, Axis::M]).unwrap();
        assert!((hm - 2.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_channel_has_zero_conditional_entropy() {
        // x = (y + m) mod 4 exactly.
        let p = table_from(|x, y, m| if x == (y + m) % 4 { 0.07 + 0.01 * (y + 2 * m) as f64 } else { 0.0 }, 4, 4, 4);
        let h = cond_entropy(&p, Axis::X, &[Axis::Y, Axis::M]).unwrap();
        assert_eq!(h, 0.0);
        // Knowing only y leaves uncertainty.
        assert!(cond_entropy(&p, Axis::X, &[Axis::Y]).unwrap() > 1.0);
    }

    #[test]
    fn matches_a_naive_triple_loop_reference() {
        let p = JointDistribution::random(4, 4, 4, 99).unwrap();
        // Naive reference with explicitly materialized marginal tables.
        let mut pxy = [[0.0f64; 4]; 4];
        let mut py = [0.0f64; 4];
        let (nx, ny, nm) = p.dims();
        for x in 0..nx {
            for y in 0..ny {
                for m in 0..nm {
                    let v = p.p[(x * ny + y) * nm + m];
                    pxy[x][y] += v;
                    py[y] += v;
                }
            }
        }
        let mut want = 0.0;
        for x in 0..nx {
            for y in 0..ny {
                if pxy[x][y] > 0.0 {
                    want -= pxy[x][y] * (pxy[x][y] / py[y]).log2();
                }
            }
        }
        let got = cond_entropy(&p, Axis::X, &[Axis::Y]).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn independent_m_gives_zero_information() {
        // p(x,y,m) = r(x,y)·s(m): m carries nothing about x beyond y.
        let r = [[0.12, 0.2], [0.28, 0.4]];
        let s = [0.3, 0.7];
        let p = table_from(|x, y, m| r[x][y] * s[m], 2, 2, 2);
        let i = cond_mutual_info(&p).unwrap();
        assert!(i.abs() < 1e-12, "I = {i}");
    }

    #[test]
    fn information_identity_and_nonnegativity_on_random_tables() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed));
            let nx = rng.gen_range(2..=16);
            let ny = rng.gen_range(2..=16);
            let nm = rng.gen_range(2..=16);
            let p = JointDistribution::random(nx, ny, nm, seed).unwrap();
            let i = cond_mutual_info(&p).unwrap();
            assert!(i >= -1e-12, "negative information {i} at seed {seed}");
            let hd = cond_entropy(&p, Axis::X, &[Axis::Y]).unwrap()
                - cond_entropy(&p, Axis::X, &[Axis::Y, Axis::M]).unwrap();
            assert!((i - hd).abs() < 1e-12, "identity broke at seed {seed}: {i} vs {hd}");
        }
    }

    fn mix(seed: u64) -> u64 {
        crate::data::mix_seed(0x1F0, seed)
    }

    #[test]
    fn invalid_tables_are_rejected() {
        assert!(JointDistribution::new(0, 2, 2, vec![]).is_err());
        assert!(JointDistribution::new(17, 2, 2, vec![0.0; 17 * 4]).is_err());
        assert!(JointDistribution::new(2, 2, 2, vec![0.125; 7]).is_err());
        let mut p = vec![0.125; 8];
        p[0] = -0.125;
        p[1] = 0.375;
        assert!(JointDistribution::new(2, 2, 2, p).is_err());
        assert!(JointDistribution::new(2, 2, 2, vec![0.2; 8]).is_err());
        let p = JointDistribution::random(3, 3, 3, 1).unwrap();
        assert!(cond_entropy(&p, Axis::X, &[Axis::X]).is_err());
        assert!(cond_entropy(&p, Axis::X, &[Axis::Y, Axis::Y]).is_err());
    }
}
