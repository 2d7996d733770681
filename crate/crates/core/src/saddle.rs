//! Greatest attainable error over bounded-power increment sequences: the
//! Gram operator built from `b`, its top eigenpair, and the least favorable
//! one-sided moving average it generates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::increments::BlockVector;
use crate::linalg::{pairwise_sum, CMatrix, CVector, HermitianSpectrum, C64, DENSE_EIGEN_LIMIT, ZERO};
use crate::validate::path_rng;

/// Hermitian PSD block matrix `Q(p, q) = sum_s b_{s+p} b_{s+q}^*`, `p, q = 0..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaddleOperator {
    k: usize,
    horizon: usize,
    matrix: CMatrix,
}

impl SaddleOperator {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn block(&self, p: usize, q: usize) -> CMatrix {
        self.matrix.view((p * self.k, q * self.k), (self.k, self.k)).into_owned()
    }
}

/// Lower block-banded factor with `L[(p, k), s] = b_{k, s+p}` for `s + p <= N`.
pub fn gram_factor(b: &BlockVector) -> CMatrix {
    let k = b.k();
    let n1 = b.len();
    let mut l = CMatrix::zeros(n1 * k, n1);
    for p in 0..n1 {
        for s in 0..n1 - p {
            for e in 0..k {
                l[(p * k + e, s)] = b.block(s + p)[e];
            }
        }
    }
    l
}

/// Build `Q_N` from `N + 1` coefficient blocks.
pub fn build_q(b: &BlockVector, horizon: usize) -> Result<SaddleOperator> {
    if b.len() != horizon + 1 {
        return Err(Error::Dimension {
            expected: horizon + 1,
            got: b.len(),
        });
    }
    let l = gram_factor(b);
    let matrix = &l * l.adjoint();
    Ok(SaddleOperator {
        k: b.k(),
        horizon,
        matrix,
    })
}

/// Infinite-horizon operator truncated at the support of `b`.
pub fn build_q_truncated(b: &BlockVector) -> Result<SaddleOperator> {
    if b.is_empty() {
        return Err(Error::EmptyInput("no coefficient blocks"));
    }
    let last = (0..b.len()).rev().find(|&j| b.block_norm(j) > 0.0).unwrap_or(0);
    build_q(&b.resized(last + 1), last)
}

#[derive(Debug, Clone)]
pub struct Eigenpair {
    pub value: f64,
    pub vector: CVector,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

/// Maximum power-iteration steps.
pub const MAX_POWER_ITERATIONS: usize = 10_000;

/// Power iteration on a Hermitian PSD matrix, optionally orthogonal to `deflate`.
pub fn power_iteration(q: &CMatrix, deflate: Option<&CVector>, seed: u64) -> Eigenpair {
    let n = q.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let project = |v: &mut CVector| {
        if let Some(u) = deflate {
            let c = u.dotc(v);
            *v -= u * c;
        }
    };
    let mut v = CVector::from_fn(n, |_, _| C64::new(rng.random::<f64>() + 0.5, rng.random::<f64>() - 0.5));
    project(&mut v);
    let norm = v.norm();
    if norm == 0.0 {
        return Eigenpair {
            value: 0.0,
            vector: v,
            iterations: 0,
            residual: 0.0,
            converged: true,
        };
    }
    v /= C64::new(norm, 0.0);
    let scale = q.norm().max(f64::MIN_POSITIVE);
    let mut prev = f64::NAN;
    for it in 1..=MAX_POWER_ITERATIONS {
        let mut w = q * &v;
        project(&mut w);
        let rq = v.dotc(&w).re;
        let residual = (&w - &v * C64::new(rq, 0.0)).norm();
        let wn = w.norm();
        let settled = (rq - prev).abs() < 1e-12 * rq.abs().max(1e-300);
        if wn <= 1e-300 * scale || (settled && residual <= 1e-8 * rq.abs().max(1e-300)) {
            return Eigenpair {
                value: rq.max(0.0),
                vector: v,
                iterations: it,
                residual,
                converged: true,
            };
        }
        prev = rq;
        v = w / C64::new(wn, 0.0);
    }
    let w = q * &v;
    let rq = v.dotc(&w).re;
    let residual = (&w - &v * C64::new(rq, 0.0)).norm();
    Eigenpair {
        value: rq.max(0.0),
        vector: v,
        iterations: MAX_POWER_ITERATIONS,
        residual,
        converged: false,
    }
}

/// Top eigenvalue, least favorable coefficients and diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct SaddleResult {
    pub nu_squared: f64,
    /// `P * nu^2`.
    pub max_error: f64,
    pub power: f64,
    /// Eigenvector blocks scaled to `|g|^2 = P`.
    pub g_blocks: BlockVector,
    pub innovation_dim: usize,
    pub degeneracy_flag: bool,
    pub second_eigenvalue: f64,
    pub dense_nu_squared: Option<f64>,
    pub iterations: usize,
    pub eigen_residual: f64,
    #[serde(skip)]
    pub ma_coefficients: Vec<CMatrix>,
}

/// Relative gap below which the top eigenvalue is treated as degenerate.
pub const DEGENERACY_TOL: f64 = 1e-8;

/// Top eigenpair of `Q`, cross-checked against a dense eigensolver for
/// small operators, and the moving-average coefficients `g(p)` (K x M, the
/// first innovation column carrying the eigenvector).
pub fn top_eigen(q: &SaddleOperator, power: f64, innovation_dim: Option<usize>) -> Result<SaddleResult> {
    if !(power > 0.0) {
        return Err(invalid("P", "power bound must be positive"));
    }
    let k = q.k;
    let m = innovation_dim.unwrap_or(k);
    if m == 0 || m > k {
        return Err(invalid("M", format!("innovation dimension must be in 1..={k}")));
    }
    let n = q.matrix.nrows();
    let top = power_iteration(&q.matrix, None, 0x5eed);
    let (dense, second) = if n <= DENSE_EIGEN_LIMIT {
        let spec = HermitianSpectrum::of(&q.matrix);
        let mut ev = spec.eigenvalues.clone();
        ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
        (Some(ev[0].max(0.0)), ev.get(1).copied().unwrap_or(0.0).max(0.0))
    } else {
        let mut u = top.vector.clone();
        let un = u.norm();
        u /= C64::new(un, 0.0);
        (None, power_iteration(&q.matrix, Some(&u), 0x5eed + 1).value)
    };
    let nu2 = top.value;
    let degenerate = !top.converged || (nu2 > 0.0 && second >= (1.0 - DEGENERACY_TOL) * nu2);
    // fix the phase so the largest entry is real and positive
    let pivot = top.vector.iter().copied().max_by(|a, b| a.norm().total_cmp(&b.norm())).unwrap_or(ZERO);
    let phase = if pivot.norm() > 0.0 { pivot.conj() / pivot.norm() } else { C64::new(1.0, 0.0) };
    let scale = (power / top.vector.norm_squared()).sqrt();
    let mut v = &top.vector * (phase * scale);
    for z in v.iter_mut() {
        if z.im.abs() <= 1e-14 * z.norm().max(1e-300) + 1e-15 * scale {
            z.im = 0.0;
        }
    }
    let g_blocks = BlockVector::from_flat(k, &v);
    let ma_coefficients = (0..=q.horizon)
        .map(|p| {
            let mut g = CMatrix::zeros(k, m);
            for e in 0..k {
                g[(e, 0)] = g_blocks.block(p)[e].conj();
            }
            g
        })
        .collect();
    Ok(SaddleResult {
        nu_squared: nu2,
        max_error: power * nu2,
        power,
        g_blocks,
        innovation_dim: m,
        degeneracy_flag: degenerate,
        second_eigenvalue: second,
        dense_nu_squared: dense,
        iterations: top.iterations,
        eigen_residual: top.residual,
        ma_coefficients,
    })
}

// ---------------------------------------------------------------------------
// Least favorable moving average

#[derive(Debug, Clone)]
pub struct MovingAverageSequence {
    pub ma_coefficients: Vec<CMatrix>,
    pub innovation_dim: usize,
    /// `innovations[i]` is `epsilon(i - N)`; values start at `j = 0`.
    pub innovations: Vec<CVector>,
    pub values: Vec<CVector>,
}

const CHUNK: usize = 1024;

fn draw_innovations(count: usize, m: usize, real: bool, seed: u64) -> Vec<CVector> {
    let chunks: Vec<Vec<CVector>> = (0..count.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut rng = path_rng(seed, c as u64);
            let len = CHUNK.min(count - c * CHUNK);
            (0..len)
                .map(|_| {
                    CVector::from_fn(m, |_, _| {
                        let re: f64 = StandardNormal.sample(&mut rng);
                        if real {
                            C64::new(re, 0.0)
                        } else {
                            let im: f64 = StandardNormal.sample(&mut rng);
                            C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
                        }
                    })
                })
                .collect()
        })
        .collect();
    chunks.into_iter().flatten().collect()
}

/// `xi_j = sum_{p=0}^{N} g(p) epsilon(j - p)` for `j = 0..n_steps` driven by
/// unit-variance Gaussian innovations (real when every `g(p)` is real).
pub fn synthesize_least_favorable(result: &SaddleResult, n_steps: usize, seed: u64) -> MovingAverageSequence {
    let g = &result.ma_coefficients;
    let order = g.len() - 1;
    let m = result.innovation_dim;
    let real = g.iter().all(|x| x.iter().all(|z| z.im == 0.0));
    let innovations = draw_innovations(n_steps + order, m, real, seed);
    let values = (0..n_steps)
        .into_par_iter()
        .map(|j| {
            let mut x = CVector::zeros(g[0].nrows());
            for (p, gp) in g.iter().enumerate() {
                x += gp * &innovations[j + order - p];
            }
            x
        })
        .collect();
    MovingAverageSequence {
        ma_coefficients: g.clone(),
        innovation_dim: m,
        innovations,
        values,
    }
}

/// Batch-means estimate of `E|xi_j|^2` with its standard error.
pub fn mean_power(seq: &MovingAverageSequence, batches: usize) -> (f64, f64) {
    let powers: Vec<f64> = seq.values.iter().map(|x| x.norm_squared()).collect();
    batch_mean(&powers, batches)
}

fn batch_mean(x: &[f64], batches: usize) -> (f64, f64) {
    let size = x.len() / batches;
    let means: Vec<f64> = (0..batches).map(|b| pairwise_sum(&x[b * size..(b + 1) * size]) / size as f64).collect();
    let mean = pairwise_sum(&means) / batches as f64;
    let var = means.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / (batches - 1) as f64;
    (mean, (var / batches as f64).sqrt())
}

/// Monte Carlo estimate of the unpredictable part of `B = sum_j b_j^T xi_j`
/// under the least favorable sequence: the contribution of innovations from
/// time 0 onward, whose variance equals `P nu^2`. Returns `(mean, se)` over
/// `n_rep` independent replications.
pub fn error_variance_mc(b: &BlockVector, result: &SaddleResult, n_rep: usize, seed: u64) -> Result<(f64, f64)> {
    let g = &result.ma_coefficients;
    let order = g.len() - 1;
    if b.len() != order + 1 {
        return Err(Error::Dimension {
            expected: order + 1,
            got: b.len(),
        });
    }
    if n_rep < 2 {
        return Err(invalid("n_rep", "need at least two replications"));
    }
    let m = result.innovation_dim;
    let real = g.iter().all(|x| x.iter().all(|z| z.im == 0.0));
    let bt: Vec<_> = b.blocks().iter().map(|x| CVector::from_column_slice(x).transpose()).collect();
    let errors: Vec<f64> = (0..n_rep as u64)
        .into_par_iter()
        .map(|r| {
            let eps = draw_innovations(2 * order + 1, m, real, seed ^ (r.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
            // eps[i] = epsilon(i - N); time range -N..=N
            let mut total = ZERO;
            let mut past = ZERO;
            for j in 0..=order {
                for (p, gp) in g.iter().enumerate() {
                    let s = j as i64 - p as i64;
                    let contrib = (&bt[j] * gp * &eps[(s + order as i64) as usize])[(0, 0)];
                    total += contrib;
                    if s < 0 {
                        past += contrib;
                    }
                }
            }
            (total - past).norm_sqr()
        })
        .collect();
    let n = n_rep as f64;
    let mean = pairwise_sum(&errors) / n;
    let var = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assume, proptest};

    fn q_oracle(b: &[f64]) -> Vec<Vec<f64>> {
        let n = b.len() - 1;
        let mut q = vec![vec![0.0; n + 1]; n + 1];
        for p in 0..=n {
            for qq in 0..=n {
                for s in 0..=(n - p).min(n - qq) {
                    q[p][qq] += b[s + p] * b[s + qq];
                }
            }
        }
        q
    }

    #[test]
    fn q_examples() {
        let b = BlockVector::from_blocks(2, vec![vec![C64::new(1.0, 1.0), C64::new(2.0, 0.0)]]).unwrap();
        let q = build_q(&b, 0).unwrap();
        let r = top_eigen(&q, 1.0, None).unwrap();
        assert!((r.nu_squared - 6.0).abs() < 1e-12);

        let q = build_q(&BlockVector::from_real(&[1.0, 1.0]), 1).unwrap();
        let expect = [[2.0, 1.0], [1.0, 1.0]];
        for p in 0..2 {
            for s in 0..2 {
                assert_eq!(q.matrix()[(p, s)], C64::new(expect[p][s], 0.0));
            }
        }
        let r = top_eigen(&q, 1.0, None).unwrap();
        assert!((r.nu_squared - (3.0 + 5f64.sqrt()) / 2.0).abs() < 1e-10);
        assert!(!r.degeneracy_flag);

        let q = build_q(&BlockVector::from_real(&[0.0, 0.0, 3.0, 0.0]), 3).unwrap();
        for p in 0..4 {
            for s in 0..4 {
                let nonzero = q.matrix()[(p, s)] != ZERO;
                // the single block b_2 reaches (p,q) with s+p = s+q = 2
                assert_eq!(nonzero, p == s && p <= 2, "({p},{s})");
            }
        }
        assert!(matches!(build_q(&BlockVector::from_real(&[1.0]), 2), Err(Error::Dimension { .. })));
    }

    #[test]
    fn rank_one_and_identity() {
        let b = BlockVector::from_blocks(3, vec![vec![C64::new(1.0, 0.0), C64::new(0.0, -2.0), C64::new(0.5, 0.5)]]).unwrap();
        let r = top_eigen(&build_q(&b, 0).unwrap(), 2.0, None).unwrap();
        assert!((r.nu_squared - b.norm_sqr()).abs() < 1e-12);
        // g proportional to b with |g|^2 = P
        let ratio = r.g_blocks.block(0)[0] / b.block(0)[0];
        for e in 0..3 {
            assert!((r.g_blocks.block(0)[e] - b.block(0)[e] * ratio).norm() < 1e-9);
        }
        assert!((r.g_blocks.norm_sqr() - 2.0).abs() < 1e-12);

        let ident = SaddleOperator {
            k: 1,
            horizon: 2,
            matrix: CMatrix::identity(3, 3),
        };
        let r = top_eigen(&ident, 1.0, None).unwrap();
        assert!((r.nu_squared - 1.0).abs() < 1e-14);
        assert!(r.degeneracy_flag);
    }

    #[test]
    fn gram_identity_exact_for_scalar_blocks() {
        for n in 0..=8usize {
            let b: Vec<f64> = (0..=n).map(|i| ((i * 7 + 3) % 5) as f64 - 2.0).collect();
            let q = build_q(&BlockVector::from_real(&b), n).unwrap();
            let oracle = q_oracle(&b);
            for p in 0..=n {
                for s in 0..=n {
                    assert_eq!(q.matrix()[(p, s)], C64::new(oracle[p][s], 0.0));
                }
            }
        }
    }

    #[test]
    fn power_iteration_matches_dense_on_random_operators() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let k = rng.random_range(1..=4);
            let n = rng.random_range(0..=12);
            let blocks = (0..=n)
                .map(|_| (0..k).map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)).collect())
                .collect();
            let b = BlockVector::from_blocks(k, blocks).unwrap();
            let r = top_eigen(&build_q(&b, n).unwrap(), 1.0, None).unwrap();
            let dense = r.dense_nu_squared.unwrap();
            assert!((r.nu_squared - dense).abs() <= 1e-10 * dense, "{} vs {dense}", r.nu_squared);
        }
    }

    proptest! {
        #[test]
        fn scaling_law(vals in proptest::collection::vec(-3.0f64..3.0, 1..6), alpha in 0.1f64..4.0) {
            prop_assume!(vals.iter().any(|v| v.abs() > 0.1));
            let n = vals.len() - 1;
            let b = BlockVector::from_real(&vals);
            let r1 = top_eigen(&build_q(&b, n).unwrap(), 1.0, None).unwrap();
            let r2 = top_eigen(&build_q(&b.scaled(C64::new(alpha, 0.0)), n).unwrap(), 1.0, None).unwrap();
            let d1 = r1.dense_nu_squared.unwrap();
            let d2 = r2.dense_nu_squared.unwrap();
            prop_assert!((d2 - alpha * alpha * d1).abs() <= 1e-10 * d2);
        }
    }

    #[test]
    fn synthesis_of_zero_and_iid() {
        let mut r = top_eigen(&build_q(&BlockVector::from_real(&[1.0]), 0).unwrap(), 2.0, None).unwrap();
        let seq = synthesize_least_favorable(&r, 20_000, 4);
        let (mean, se) = mean_power(&seq, 50);
        assert!((mean - 2.0).abs() < 3.0 * se, "{mean} +- {se}");
        assert!(seq.values.iter().all(|x| x[0].im == 0.0));

        r.ma_coefficients = vec![CMatrix::zeros(1, 1)];
        let seq = synthesize_least_favorable(&r, 100, 4);
        assert!(seq.values.iter().all(|x| x[0] == ZERO));
    }

    #[test]
    fn least_favorable_power_and_error() {
        let b = BlockVector::from_blocks(
            2,
            vec![
                vec![C64::new(1.0, 0.0), C64::new(0.5, 0.0)],
                vec![C64::new(0.3, 0.0), C64::new(-0.2, 0.0)],
                vec![C64::new(0.1, 0.0), C64::new(0.4, 0.0)],
            ],
        )
        .unwrap();
        let p = 1.5;
        let r = top_eigen(&build_q(&b, 2).unwrap(), p, None).unwrap();
        let seq = synthesize_least_favorable(&r, 20_000, 8);
        let (mean, se) = mean_power(&seq, 50);
        assert!((mean - p).abs() < 3.0 * se, "{mean} +- {se}");
        let (err, se) = error_variance_mc(&b, &r, 20_000, 3).unwrap();
        assert!((err - r.max_error).abs() < 3.0 * se, "{err} +- {se} vs {}", r.max_error);
    }

    #[test]
    fn synthesis_is_reproducible() {
        let r = top_eigen(&build_q(&BlockVector::from_real(&[1.0, 0.5]), 1).unwrap(), 1.0, None).unwrap();
        let a = synthesize_least_favorable(&r, 3000, 17);
        let b = synthesize_least_favorable(&r, 3000, 17);
        assert_eq!(a.values, b.values);
    }
}
