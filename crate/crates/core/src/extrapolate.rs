//! Mean-square optimal extrapolation: solve `F c = D^tau a`, evaluate the
//! spectral characteristic and the error, for infinite and finite horizons.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::increments::{
    apply_d_tau, apply_d_tau_finite, b_function, check_summability, v_function, BlockVector, CoefficientFunction,
    Horizon, IncrementParams, Summability,
};
use crate::linalg::{pairwise_sum_c, solve_hpd, CMatrix, CVector, C64};
use crate::spectral::{
    check_minimality, toeplitz_from_table, BlockToeplitzOperator, IncrementKernel, Minimality, NodeTable,
    QuadratureGrid, SpectralDensityModel, DIVERGENCE_CEILING,
};

/// Relative eigenvalue floor for the Toeplitz solve.
pub const SOLVE_FLOOR: f64 = 1e-10;

/// The functional's coefficients, as a sampled function or as blocks.
#[derive(Debug, Clone)]
pub enum Coefficients {
    Function(CoefficientFunction),
    /// Paired-order block coefficients `a_j` directly.
    Blocks(BlockVector),
}

#[derive(Debug, Clone)]
pub struct ExtrapolationProblem {
    pub params: IncrementParams,
    pub a: Coefficients,
    pub horizon: Horizon,
    pub density: SpectralDensityModel,
    pub grid: QuadratureGrid,
}

/// `c = F^{-1} b` by Hermitian factorization.
pub fn solve_c(op: &BlockToeplitzOperator, b: &BlockVector) -> Result<BlockVector> {
    let n = op.lags() * op.k();
    if b.k() != op.k() || b.len() != op.lags() {
        return Err(Error::Dimension {
            expected: n,
            got: b.len() * b.k(),
        });
    }
    if b.is_zero() {
        return Ok(BlockVector::zeros(b.k(), b.len()));
    }
    let f = op.assemble();
    let rhs = b.flatten();
    let x = solve_hpd(&f, &rhs, SOLVE_FLOOR)?;
    let resid = (&f * &x - &rhs).norm();
    if resid > 1e-10 * rhs.norm() {
        return Err(Error::IllConditioned {
            condition: f64::NAN,
            reason: format!("solve residual {resid:.3e} exceeds 1e-10 |b|"),
        });
    }
    Ok(BlockVector::from_flat(b.k(), &x))
}

/// `Re sum_j b_j^* c_j`.
pub fn mse(b: &BlockVector, c: &BlockVector) -> Result<f64> {
    let s = b.inner(c);
    let scale = b.norm_sqr().sqrt() * c.norm_sqr().sqrt();
    if s.re < -1e-10 * scale.max(f64::MIN_POSITIVE) || s.im.abs() > 1e-8 * s.norm().max(1e-300) + 1e-14 * scale {
        return Err(Error::Inconsistent { value: s.re });
    }
    Ok(s.re.max(0.0))
}

/// Solution of the truncated system for given `b`.
#[derive(Debug, Clone, Serialize)]
pub struct Solution {
    pub lags: usize,
    pub b: BlockVector,
    pub c: BlockVector,
    pub mse: f64,
}

/// Solve with `J = max(lags, len(b))` blocks, `b` zero-padded.
pub fn solve_for_table(table: &NodeTable, b: &BlockVector, lags: usize) -> Result<Solution> {
    let j = lags.max(b.len());
    let op = toeplitz_from_table(table, j)?;
    solve_with_operator(&op, b)
}

pub fn solve_with_operator(op: &BlockToeplitzOperator, b: &BlockVector) -> Result<Solution> {
    let j = op.lags();
    if b.len() > j {
        return Err(Error::Dimension {
            expected: j,
            got: b.len(),
        });
    }
    let b = b.resized(j);
    let c = solve_c(op, &b)?;
    let mse = mse(&b, &c)?;
    Ok(Solution { lags: j, b, c, mse })
}

// ---------------------------------------------------------------------------
// Spectral characteristic

/// `z(lambda) = sum_j x_j e^{i lambda j}`.
pub fn block_transform(x: &BlockVector, lambda: f64) -> CVector {
    let mut out = CVector::zeros(x.k());
    for (j, blk) in x.blocks().iter().enumerate() {
        let e = C64::from_polar(1.0, lambda * j as f64);
        for (o, v) in out.iter_mut().zip(blk) {
            *o += v * e;
        }
    }
    out
}

/// `h(lambda) = transfer(lambda) (B(lambda) - g^{-1}(lambda)^T C(lambda))`
/// sampled on the quadrature nodes.
#[derive(Debug, Clone)]
pub struct SpectralCharacteristic {
    pub b: BlockVector,
    pub c: BlockVector,
    pub lambdas: Vec<f64>,
    pub h: Vec<CVector>,
}

impl SpectralCharacteristic {
    pub fn from_table(table: &NodeTable, b: &BlockVector, c: &BlockVector) -> Self {
        let h = (0..table.lambdas.len())
            .into_par_iter()
            .map(|i| characteristic_at(table.lambdas[i], table.transfer[i], &table.g_inv[i], b, c))
            .collect();
        Self {
            b: b.clone(),
            c: c.clone(),
            lambdas: table.lambdas.clone(),
            h,
        }
    }

    /// Evaluate at an arbitrary frequency.
    pub fn evaluate(&self, model: &SpectralDensityModel, kernel: &IncrementKernel, lambda: f64) -> Result<CVector> {
        let inv = model.increment_density_inverse(kernel, lambda, usize::MAX)?;
        Ok(characteristic_at(lambda, kernel.transfer(lambda), &inv, &self.b, &self.c))
    }

    /// Copy with `delta(lambda)` added at every node.
    pub fn perturbed(&self, delta: impl Fn(f64) -> CVector) -> Self {
        let mut out = self.clone();
        for (h, &l) in out.h.iter_mut().zip(&self.lambdas) {
            *h += delta(l);
        }
        out
    }
}

fn characteristic_at(lambda: f64, transfer: C64, g_inv: &CMatrix, b: &BlockVector, c: &BlockVector) -> CVector {
    let bl = block_transform(b, lambda);
    let cl = block_transform(c, lambda);
    (bl - g_inv.transpose() * cl) * transfer
}

/// `|(1/2pi) int (B transfer - h)^T f e^{-ij lambda} conj(transfer) d lambda|`
/// for each `j`; the integrand uses `f conj(transfer) = g / transfer`.
pub fn check_orthogonality(h: &SpectralCharacteristic, table: &NodeTable, js: &[i64]) -> Vec<f64> {
    let rows: Vec<CVector> = (0..table.lambdas.len())
        .into_par_iter()
        .map(|i| {
            let l = table.lambdas[i];
            let t = table.transfer[i];
            let diff = block_transform(&h.b, l) * t - &h.h[i];
            (table.g[i].transpose() * diff) / t
        })
        .collect();
    js.par_iter()
        .map(|&j| fourier_coefficient_norm(&rows, &table.lambdas, table.grid.weight(), j))
        .collect()
}

/// Coefficients of `h / transfer` at lags `j >= 0`; these must vanish for
/// the estimate to lie in the span of the past (exactly for `j < J`, up to
/// truncation beyond).
pub fn causality_residuals(h: &SpectralCharacteristic, table: &NodeTable, js: &[i64]) -> Vec<f64> {
    let rows: Vec<CVector> = h.h.iter().zip(&table.transfer).map(|(x, t)| x / *t).collect();
    js.par_iter()
        .map(|&j| fourier_coefficient_norm(&rows, &table.lambdas, table.grid.weight(), j))
        .collect()
}

fn fourier_coefficient_norm(rows: &[CVector], lambdas: &[f64], weight: f64, j: i64) -> f64 {
    let k = rows[0].len();
    let mut acc = 0.0;
    let mut terms = Vec::with_capacity(rows.len());
    for e in 0..k {
        terms.clear();
        terms.extend(rows.iter().zip(lambdas).map(|(r, &l)| r[e] * C64::from_polar(1.0, -(j as f64) * l)));
        acc += (pairwise_sum_c(&terms) * weight).norm_sqr();
    }
    acc.sqrt()
}

// ---------------------------------------------------------------------------
// Full pipeline

#[derive(Debug, Clone, Serialize)]
pub struct HSample {
    pub lambda: f64,
    pub h: Vec<C64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    pub mse: f64,
    /// Error with the operator truncated at `2J`.
    pub mse_refined: f64,
    /// `|mse(2J) - mse(J)| / mse(J)` (zero when both vanish).
    pub mse_refinement_delta: f64,
    pub lags: usize,
    pub horizon: Horizon,
    pub b: BlockVector,
    pub c: BlockVector,
    /// `(t, v(t))` on `[-tau T d, 0)`, when `a` was given as a function.
    pub v: Vec<[f64; 2]>,
    pub orthogonality_residuals: Vec<(i64, f64)>,
    /// Largest coefficient of `h / transfer` at lags `0..J`.
    pub causality_residual: f64,
    pub minimality: Minimality,
    pub summability: Option<Summability>,
    pub h_samples: Vec<HSample>,
    pub notes: Vec<String>,
}

/// Block coefficients `b = D^tau a` (finite or infinite horizon) plus the
/// summability record for infinite horizons.
pub fn increment_coefficients(problem: &ExtrapolationProblem) -> Result<(BlockVector, Option<Summability>)> {
    let p = &problem.params;
    let a = match &problem.a {
        Coefficients::Function(f) => {
            if (f.period() - p.period).abs() > 1e-12 * p.period {
                return Err(invalid("a", "coefficient function period differs from T"));
            }
            f.block_vector(p.components)?
        }
        Coefficients::Blocks(b) => {
            if b.k() != p.components {
                return Err(Error::Dimension {
                    expected: p.components,
                    got: b.k(),
                });
            }
            b.clone()
        }
    };
    match problem.horizon {
        Horizon::Finite(n) => {
            if (n + 1..a.len()).any(|j| a.block_norm(j) != 0.0) {
                return Err(invalid("a", format!("finite horizon requires support in the first {} blocks", n + 1)));
            }
            Ok((apply_d_tau_finite(&a, p, n), None))
        }
        Horizon::Infinite => {
            let s = check_summability(&a, p.period)?;
            Ok((apply_d_tau(&a.resized(s.support_blocks.max(1)), p), Some(s)))
        }
    }
}

fn v_samples(problem: &ExtrapolationProblem) -> Result<Vec<[f64; 2]>> {
    let Coefficients::Function(a) = &problem.a else {
        return Ok(Vec::new());
    };
    let b = b_function(a, &problem.params, problem.horizon)?;
    let v = v_function(&b, &problem.params)?;
    let n = v.samples_per_period();
    let dt = v.delta_t();
    let mut out = Vec::with_capacity(v.n_blocks() * n);
    for blk in v.first_block()..v.first_block() + v.n_blocks() as i64 {
        let s = v.block_samples(blk).expect("in range");
        for (i, x) in s[..n].iter().enumerate() {
            out.push([blk as f64 * v.period() + i as f64 * dt, *x]);
        }
    }
    Ok(out)
}

/// Number of orthogonality lags reported.
pub const ORTHOGONALITY_LAGS: i64 = 10;

pub fn solve_extrapolation(problem: &ExtrapolationProblem) -> Result<EstimateReport> {
    let p = &problem.params;
    p.validate()?;
    if problem.density.dim() != p.components {
        return Err(Error::Dimension {
            expected: p.components,
            got: problem.density.dim(),
        });
    }
    let kernel = IncrementKernel::of(p);
    problem.density.validate_on_grid(&problem.grid)?;
    let minimality = check_minimality(&problem.density, &kernel, &problem.grid, DIVERGENCE_CEILING)?;
    if !minimality.finite {
        return Err(Error::MinimalityNotVerified(format!(
            "integral {:.6e} at M = {} vs {:.6e} at 2M",
            minimality.value, problem.grid.nodes, minimality.refined_value
        )));
    }
    let (b, summability) = increment_coefficients(problem)?;
    let table = NodeTable::build(&problem.density, kernel, problem.grid)?;

    let j = p.lags.max(b.len());
    let op2 = toeplitz_from_table(&table, 2 * j)?;
    let sol = solve_with_operator(&op2.truncated(j), &b)?;
    let refined = solve_with_operator(&op2, &b)?;
    let delta = if sol.mse == 0.0 && refined.mse == 0.0 {
        0.0
    } else {
        (refined.mse - sol.mse).abs() / sol.mse.max(f64::MIN_POSITIVE)
    };

    let h = SpectralCharacteristic::from_table(&table, &sol.b, &sol.c);
    let js: Vec<i64> = (1..=ORTHOGONALITY_LAGS).map(|j| -j).collect();
    let resid = check_orthogonality(&h, &table, &js);
    let causal_js: Vec<i64> = (0..j as i64).collect();
    let causality = causality_residuals(&h, &table, &causal_js)
        .into_iter()
        .fold(0.0, f64::max);

    let h_samples = h
        .lambdas
        .iter()
        .zip(&h.h)
        .map(|(&lambda, v)| HSample {
            lambda,
            h: v.iter().copied().collect(),
        })
        .collect();

    Ok(EstimateReport {
        mse: sol.mse,
        mse_refined: refined.mse,
        mse_refinement_delta: delta,
        lags: j,
        horizon: problem.horizon,
        v: v_samples(problem)?,
        b: sol.b,
        c: sol.c,
        orthogonality_residuals: js.into_iter().zip(resid).collect(),
        causality_residual: causality,
        minimality,
        summability,
        h_samples,
        notes: vec!["transfer factor (1 - e^{i lambda tau})^d / (-i lambda)^d uses the increment order d".into()],
    })
}

/// `sum_j |b_j|^2`, the error when the past carries no information.
pub fn unpredictable_error(b: &BlockVector) -> f64 {
    b.norm_sqr()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{CMatrix, ZERO};
    use crate::spectral::{RationalSpec, Target};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn real_blocks(k: usize, vals: &[&[f64]]) -> BlockVector {
        BlockVector::from_blocks(
            k,
            vals.iter().map(|b| b.iter().map(|&x| C64::new(x, 0.0)).collect()).collect(),
        )
        .unwrap()
    }

    fn problem(density: SpectralDensityModel, a: BlockVector, horizon: Horizon, d: u32, tau: u32, lags: usize) -> ExtrapolationProblem {
        ExtrapolationProblem {
            params: IncrementParams::new(d, 1.0, tau, a.k(), lags).unwrap(),
            a: Coefficients::Blocks(a),
            horizon,
            density,
            grid: QuadratureGrid::default(),
        }
    }

    #[test]
    fn solve_identity_and_two_by_two() {
        let b = real_blocks(1, &[&[1.0], &[0.5]]);
        let c = solve_c(&BlockToeplitzOperator::identity(1, 2), &b).unwrap();
        assert_eq!(c, b);
        let g = vec![CMatrix::from_element(1, 1, C64::new(2.0, 0.0)), CMatrix::from_element(1, 1, C64::new(1.0, 0.0))];
        let op = BlockToeplitzOperator::from_generators(g).unwrap();
        let b = real_blocks(1, &[&[1.0], &[0.0]]);
        let c = solve_c(&op, &b).unwrap();
        assert!((c.block(0)[0].re - 2.0 / 3.0).abs() < 1e-14);
        assert!((c.block(1)[0].re + 1.0 / 3.0).abs() < 1e-14);
        assert!((mse(&b, &c).unwrap() - 2.0 / 3.0).abs() < 1e-14);
        assert_eq!(mse(&BlockVector::zeros(1, 2), &BlockVector::zeros(1, 2)).unwrap(), 0.0);
    }

    #[test]
    fn solve_random_hermitian_pd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let k = 2;
            let j = 5;
            let gens: Vec<CMatrix> = (0..j)
                .map(|m| {
                    let scale = if m == 0 { 0.0 } else { 0.3 / (m * m) as f64 };
                    CMatrix::from_fn(k, k, |_, _| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5) * scale)
                })
                .collect();
            let mut gens = gens;
            gens[0] = CMatrix::identity(k, k) * C64::new(3.0, 0.0);
            let op = BlockToeplitzOperator::from_generators(gens).unwrap();
            let b = BlockVector::from_blocks(
                k,
                (0..j)
                    .map(|_| (0..k).map(|_| C64::new(rng.random(), rng.random())).collect())
                    .collect(),
            )
            .unwrap();
            let c = solve_c(&op, &b).unwrap();
            let r = op.assemble() * c.flatten() - b.flatten();
            assert!(r.norm() <= 1e-10 * b.flatten().norm());
        }
    }

    #[test]
    fn indefinite_operator_is_rejected() {
        let g = vec![CMatrix::from_element(1, 1, C64::new(1.0, 0.0)), CMatrix::from_element(1, 1, C64::new(2.0, 0.0))];
        let op = BlockToeplitzOperator::from_generators(g).unwrap();
        let b = real_blocks(1, &[&[1.0], &[0.0]]);
        assert!(matches!(solve_c(&op, &b), Err(Error::IllConditioned { .. })));
    }

    #[test]
    fn white_matched_closed_form() {
        let white = SpectralDensityModel::white_increment_matched(2).unwrap();
        let a = real_blocks(2, &[&[1.0, -0.5], &[0.25, 2.0], &[0.0, 1.0]]);
        for &(d, tau) in &[(1, 1), (2, 1), (1, 2), (2, 2)] {
            let pr = problem(white.clone(), a.clone(), Horizon::Finite(2), d, tau, 8);
            let r = solve_extrapolation(&pr).unwrap();
            let b = apply_d_tau_finite(&a, &pr.params, 2);
            assert!((r.mse - b.norm_sqr()).abs() < 1e-10 * b.norm_sqr());
            assert!(r.h_samples.iter().all(|s| s.h.iter().all(|z| z.norm() < 1e-10)));
        }
    }

    #[test]
    fn single_block_functional_has_vanishing_characteristic() {
        let white = SpectralDensityModel::white_increment_matched(1).unwrap();
        let pr = problem(white, real_blocks(1, &[&[1.5]]), Horizon::Finite(0), 1, 1, 4);
        let r = solve_extrapolation(&pr).unwrap();
        assert!((r.mse - 2.25).abs() < 1e-12);
        assert!((r.c.block(0)[0] - C64::new(1.5, 0.0)).norm() < 1e-12);
        let zero = problem(
            SpectralDensityModel::white_increment_matched(1).unwrap(),
            BlockVector::zeros(1, 1),
            Horizon::Finite(0),
            1,
            1,
            4,
        );
        let r = solve_extrapolation(&zero).unwrap();
        assert_eq!(r.mse, 0.0);
        assert!(r.h_samples.iter().all(|s| s.h[0] == ZERO));
        assert!(r.orthogonality_residuals.iter().all(|(_, x)| *x == 0.0));
    }

    #[test]
    fn ma1_innovation_variance() {
        let m = SpectralDensityModel::scalar_rational(RationalSpec::ma1(0.5), Target::Increment).unwrap();
        let pr = problem(m, real_blocks(1, &[&[1.0]]), Horizon::Infinite, 1, 1, 64);
        let r = solve_extrapolation(&pr).unwrap();
        assert!((r.mse - 1.0).abs() < 1e-8, "{}", r.mse);
        assert!(r.mse_refinement_delta < 1e-10);
    }

    #[test]
    fn ar_first_step_error_is_innovation() {
        // x_j = 0.5 x_{j-1} + e_j: one-step error 1, two-step error 1.25
        let m = SpectralDensityModel::scalar_rational(RationalSpec::ar1(0.5), Target::Increment).unwrap();
        let pr = problem(m.clone(), real_blocks(1, &[&[1.0]]), Horizon::Finite(0), 1, 1, 32);
        assert!((solve_extrapolation(&pr).unwrap().mse - 1.0).abs() < 1e-8);
        let pr = problem(m, real_blocks(1, &[&[0.0], &[1.0]]), Horizon::Finite(1), 1, 1, 32);
        // b = D a = (1, 1): error of x_0 + x_1 = e_0 + (1.5 e_0 + e_1) -> 1.5^2 + 1 = 3.25
        assert!((solve_extrapolation(&pr).unwrap().mse - 3.25).abs() < 1e-8);
    }

    #[test]
    fn orthogonality_and_sensitivity() {
        let m = SpectralDensityModel::scalar_rational(RationalSpec::ma1(0.5), Target::Increment).unwrap();
        let pr = problem(m.clone(), real_blocks(1, &[&[1.0], &[0.5], &[-0.25]]), Horizon::Infinite, 1, 1, 32);
        let r = solve_extrapolation(&pr).unwrap();
        assert!(r.orthogonality_residuals.iter().all(|(_, x)| *x < 1e-6));
        assert!(r.causality_residual < 1e-10);

        let kernel = IncrementKernel::new(1, 1);
        let table = NodeTable::build(&m, kernel, pr.grid).unwrap();
        let h = SpectralCharacteristic::from_table(&table, &r.b, &r.c);
        let bumped = h.perturbed(|l| CVector::from_element(1, C64::from_polar(1e-2, -l)));
        let res = check_orthogonality(&bumped, &table, &[-1]);
        assert!(res[0] >= 1e-3, "{}", res[0]);
    }

    #[test]
    fn scale_equivariance() {
        let m = SpectralDensityModel::scalar_rational(RationalSpec::ar1(0.5), Target::Increment).unwrap();
        let a = real_blocks(1, &[&[1.0], &[0.3]]);
        let r1 = solve_extrapolation(&problem(m.clone(), a.clone(), Horizon::Infinite, 2, 1, 16)).unwrap();
        let r2 = solve_extrapolation(&problem(m, a.scaled(C64::new(3.0, 0.0)), Horizon::Infinite, 2, 1, 16)).unwrap();
        assert!((r2.mse - 9.0 * r1.mse).abs() < 1e-10 * r2.mse);
        for (x, y) in r1.h_samples.iter().zip(&r2.h_samples) {
            assert!((y.h[0] - x.h[0] * 3.0).norm() < 1e-10 * (1.0 + y.h[0].norm()));
        }
    }

    #[test]
    fn adding_future_mass_increases_error_for_white_matched() {
        let white = SpectralDensityModel::white_increment_matched(1).unwrap();
        let mut prev = 0.0;
        for n in 0..5 {
            let vals: Vec<f64> = (0..=n).map(|j| 1.0 / (j + 1) as f64).collect();
            let r = solve_extrapolation(&problem(white.clone(), BlockVector::from_real(&vals), Horizon::Finite(n), 1, 1, 8))
                .unwrap();
            assert!(r.mse >= prev);
            prev = r.mse;
        }
    }

    #[test]
    fn finite_horizon_rejects_support_beyond_n() {
        let white = SpectralDensityModel::white_increment_matched(1).unwrap();
        let pr = problem(white, BlockVector::from_real(&[1.0, 1.0, 1.0]), Horizon::Finite(1), 1, 1, 8);
        assert!(matches!(solve_extrapolation(&pr), Err(Error::InvalidParameter { field: "a", .. })));
    }

    #[test]
    fn minimality_failure_is_reported() {
        let f = SpectralDensityModel::constant(CMatrix::identity(1, 1), Target::Process).unwrap();
        let pr = problem(f, BlockVector::from_real(&[1.0]), Horizon::Finite(0), 1, 2, 8);
        assert!(matches!(solve_extrapolation(&pr), Err(Error::MinimalityNotVerified(_))));
    }

    #[test]
    fn v_samples_for_function_input() {
        let a = CoefficientFunction::from_fn(1.0, 8, 2, |t| 1.0 + t).unwrap();
        let pr = ExtrapolationProblem {
            params: IncrementParams::new(1, 1.0, 1, 1, 8).unwrap(),
            a: Coefficients::Function(a),
            horizon: Horizon::Finite(1),
            density: SpectralDensityModel::white_increment_matched(1).unwrap(),
            grid: QuadratureGrid::new(256).unwrap(),
        };
        let r = solve_extrapolation(&pr).unwrap();
        assert_eq!(r.v.len(), 8);
        assert!((r.v[0][0] + 1.0).abs() < 1e-15);
        // v(t) = -b(t + 1) = -(a(t+1) + a(t+2))
        let t = r.v[3][0];
        assert!((r.v[3][1] + (2.0 + t) + (3.0 + t)).abs() < 1e-12);
    }
}
