//! Brute-force oracles: spectral synthesis of the generated increment
//! sequence, Gaussian conditioning on a finite past window, and Monte Carlo
//! estimates of the prediction error.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::Serialize;
use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::extrapolate::{increment_coefficients, solve_extrapolation, ExtrapolationProblem};
use crate::increments::BlockVector;
use crate::linalg::{pairwise_sum, psd_factor, solve_hpd, CMatrix, CVector, C64, ZERO};
use crate::spectral::{IncrementKernel, NodeTable, SpectralDensityModel};

/// Draws `N(0, 1/2) + i N(0, 1/2)`.
fn complex_normal(rng: &mut ChaCha8Rng) -> C64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Per-path generator, seeded by `(seed, path index)`.
pub fn path_rng(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}

// ---------------------------------------------------------------------------
// Synthesis

/// Discrete spectral synthesis of `x_j = int e^{i lambda j} transfer dZ`:
/// independent complex Gaussian weights with covariance `g(lambda_m) / M_s`
/// on the midpoint cells, summed by one FFT per coordinate.
pub struct Synthesizer {
    k: usize,
    n_blocks: usize,
    cells: usize,
    factors: Vec<CMatrix>,
    real: bool,
    fft: Arc<dyn rustfft::Fft<f64>>,
}

impl Synthesizer {
    pub fn new(model: &SpectralDensityModel, kernel: IncrementKernel, n_blocks: usize, cells: Option<usize>) -> Result<Self> {
        if n_blocks == 0 {
            return Err(invalid("n_blocks", "must be positive"));
        }
        let min_cells = (8 * n_blocks).max(64);
        let cells = cells.unwrap_or_else(|| min_cells.next_power_of_two());
        if cells < min_cells || cells % 2 != 0 {
            return Err(invalid("spectral_cells", format!("need an even count of at least {min_cells}")));
        }
        let step = 2.0 * PI / cells as f64;
        let factors = (0..cells)
            .into_par_iter()
            .map(|m| {
                let l = -PI + (m as f64 + 0.5) * step;
                psd_factor(&(model.increment_density(&kernel, l) / C64::new(cells as f64, 0.0)))
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_inverse(cells);
        Ok(Self {
            k: model.dim(),
            n_blocks,
            cells,
            factors,
            real: model.is_real(),
            fft,
        })
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    /// One sample path `x_0, ..., x_{n_blocks - 1}`.
    pub fn path(&self, seed: u64, index: u64) -> Vec<CVector> {
        let mut rng = path_rng(seed, index);
        let (k, m_s) = (self.k, self.cells);
        let mut weights = vec![vec![ZERO; m_s]; k];
        let draw = |rng: &mut ChaCha8Rng, m: usize| -> CVector {
            let z = CVector::from_fn(k, |_, _| complex_normal(rng));
            &self.factors[m] * z
        };
        if self.real {
            // mirror cell m' = M - 1 - m carries the conjugate weight
            for m in 0..m_s / 2 {
                let w = draw(&mut rng, m);
                for e in 0..k {
                    weights[e][m] = w[e];
                    weights[e][m_s - 1 - m] = w[e].conj();
                }
            }
        } else {
            for m in 0..m_s {
                let w = draw(&mut rng, m);
                for e in 0..k {
                    weights[e][m] = w[e];
                }
            }
        }
        for col in weights.iter_mut() {
            self.fft.process(col);
        }
        let base = -PI + PI / m_s as f64;
        (0..self.n_blocks)
            .map(|j| {
                let phase = C64::from_polar(1.0, base * j as f64);
                CVector::from_fn(k, |e, _| {
                    let v = weights[e][j] * phase;
                    if self.real {
                        C64::new(v.re, 0.0)
                    } else {
                        v
                    }
                })
            })
            .collect()
    }
}

/// Empirical `E[x_{j+lag} x_j^*]` over all paths and admissible `j`, with
/// the standard error of each entry from per-path means.
pub fn empirical_lag_covariance(paths: &[Vec<CVector>], lag: usize) -> (CMatrix, CMatrix) {
    let k = paths[0][0].len();
    let per_path: Vec<CMatrix> = paths
        .iter()
        .map(|p| {
            let n = p.len() - lag;
            let mut acc = CMatrix::zeros(k, k);
            for j in 0..n {
                acc += &p[j + lag] * p[j].adjoint();
            }
            acc / C64::new(n as f64, 0.0)
        })
        .collect();
    let n = per_path.len() as f64;
    let mean = per_path.iter().fold(CMatrix::zeros(k, k), |a, x| a + x) / C64::new(n, 0.0);
    let se = CMatrix::from_fn(k, k, |r, c| {
        let var_re = per_path.iter().map(|x| (x[(r, c)].re - mean[(r, c)].re).powi(2)).sum::<f64>() / (n - 1.0);
        let var_im = per_path.iter().map(|x| (x[(r, c)].im - mean[(r, c)].im).powi(2)).sum::<f64>() / (n - 1.0);
        C64::new((var_re / n).sqrt(), (var_im / n).sqrt())
    });
    (mean, se)
}

// ---------------------------------------------------------------------------
// Gaussian conditioning

/// Optimal linear predictor of `B = sum_j b_j^T x_j` from `x_{-W}, ..., x_{-1}`.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub window: usize,
    pub mse: f64,
    pub variance: f64,
    /// `w` with `B_hat = w^* x_past`, past ordered `x_{-W}, ..., x_{-1}`.
    pub weights: CVector,
    pub ridge: bool,
}

/// Joint second moments from lag covariances `R(m) = E[x_{j+m} x_j^*]`.
pub fn condition_on_past(b: &BlockVector, lags: &[CMatrix], window: usize) -> Result<Conditioning> {
    let k = b.k();
    let len = b.len();
    if window == 0 {
        return Err(invalid("window", "must be at least 1"));
    }
    if lags.len() < window + len {
        return Err(Error::Dimension {
            expected: window + len,
            got: lags.len(),
        });
    }
    let r = |m: i64| -> CMatrix {
        if m >= 0 {
            lags[m as usize].clone()
        } else {
            lags[(-m) as usize].adjoint()
        }
    };
    // times: past t = -W..-1 at index t + W
    let n = window * k;
    let mut sigma = CMatrix::zeros(n, n);
    for p in 0..window {
        for q in 0..window {
            sigma.view_mut((p * k, q * k), (k, k)).copy_from(&r(p as i64 - q as i64));
        }
    }
    let conj_b: Vec<CVector> = b.blocks().iter().map(|x| CVector::from_iterator(k, x.iter().map(|z| z.conj()))).collect();
    let mut rho = CVector::zeros(n);
    for p in 0..window {
        let t = p as i64 - window as i64;
        let mut acc = CVector::zeros(k);
        for (l, cb) in conj_b.iter().enumerate() {
            acc += r(t - l as i64) * cb;
        }
        rho.rows_mut(p * k, k).copy_from(&acc);
    }
    let mut var = C64::new(0.0, 0.0);
    for (j, bj) in b.blocks().iter().enumerate() {
        let bt = CVector::from_column_slice(bj).transpose();
        for (l, cb) in conj_b.iter().enumerate() {
            var += (&bt * r(j as i64 - l as i64) * cb)[(0, 0)];
        }
    }
    let variance = var.re;
    if b.is_zero() {
        return Ok(Conditioning {
            window,
            mse: 0.0,
            variance: 0.0,
            weights: CVector::zeros(n),
            ridge: false,
        });
    }
    let (weights, ridge) = match solve_hpd(&sigma, &rho, 1e-13) {
        Ok(w) => (w, false),
        Err(Error::IllConditioned { .. }) => {
            let tr: f64 = (0..n).map(|i| sigma[(i, i)].re).sum();
            let mut reg = sigma.clone();
            for i in 0..n {
                reg[(i, i)] += C64::new(1e-10 * tr, 0.0);
            }
            (solve_hpd(&reg, &rho, 0.0)?, true)
        }
        Err(e) => return Err(e),
    };
    let explained = rho.dotc(&weights).re;
    Ok(Conditioning {
        window,
        mse: (variance - explained).max(0.0),
        variance,
        weights,
        ridge,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub analytic_mse: f64,
    pub oracle_mse: f64,
    pub oracle_mse_half_window: f64,
    pub window_length: usize,
    pub window_converged: bool,
    pub ridge_applied: bool,
    pub relative_difference: f64,
    pub empirical_mse: Option<f64>,
    pub standard_error: Option<f64>,
    pub n_paths: usize,
    pub analytic_agrees: bool,
    pub empirical_agrees: Option<bool>,
}

/// Oracle error at `window` and `window / 2` from the increment-density table.
pub fn oracle_mmse(b: &BlockVector, table: &NodeTable, window: usize) -> Result<(Conditioning, Conditioning)> {
    let lags = table.lag_covariances(window + b.len());
    let full = condition_on_past(b, &lags, window)?;
    let half = condition_on_past(b, &lags, (window / 2).max(1))?;
    Ok((full, half))
}

/// Monte Carlo error of the conditioning weights over synthesized paths.
/// Returns `(mean, standard error)`.
pub fn empirical_mse(b: &BlockVector, cond: &Conditioning, synth: &Synthesizer, n_paths: usize, seed: u64) -> Result<(f64, f64)> {
    let w = cond.window;
    let k = b.k();
    if synth.n_blocks() < w + b.len() {
        return Err(Error::Dimension {
            expected: w + b.len(),
            got: synth.n_blocks(),
        });
    }
    if n_paths < 2 {
        return Err(invalid("n_paths", "need at least two paths"));
    }
    if b.is_zero() {
        return Ok((0.0, 0.0));
    }
    let errors: Vec<f64> = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let x = synth.path(seed, i);
            let mut target = C64::new(0.0, 0.0);
            for (j, bj) in b.blocks().iter().enumerate() {
                for (e, be) in bj.iter().enumerate() {
                    target += be * x[w + j][e];
                }
            }
            let mut est = C64::new(0.0, 0.0);
            for p in 0..w {
                for e in 0..k {
                    est += cond.weights[p * k + e].conj() * x[p][e];
                }
            }
            (target - est).norm_sqr()
        })
        .collect();
    let n = n_paths as f64;
    let mean = pairwise_sum(&errors) / n;
    let dev: Vec<f64> = errors.iter().map(|e| (e - mean) * (e - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

/// Analytic error vs. Gaussian conditioning vs. Monte Carlo.
pub fn cross_validate(problem: &ExtrapolationProblem, window: usize, n_paths: usize, seed: u64) -> Result<OracleReport> {
    let analytic = solve_extrapolation(problem)?;
    let (b, _) = increment_coefficients(problem)?;
    let kernel = IncrementKernel::of(&problem.params);
    let table = NodeTable::build(&problem.density, kernel, problem.grid)?;
    let (full, half) = oracle_mmse(&b, &table, window)?;
    let rel = relative(analytic.mse, full.mse);
    let window_converged = relative(half.mse, full.mse) < 1e-4;

    let (empirical, se) = if n_paths > 0 {
        let synth = Synthesizer::new(&problem.density, kernel, window + b.len(), None)?;
        let (m, s) = empirical_mse(&b, &full, &synth, n_paths, seed)?;
        (Some(m), Some(s))
    } else {
        (None, None)
    };
    let empirical_agrees = empirical.zip(se).map(|(m, s)| (m - full.mse).abs() <= 3.0 * s || (s == 0.0 && m == full.mse));
    Ok(OracleReport {
        analytic_mse: analytic.mse,
        oracle_mse: full.mse,
        oracle_mse_half_window: half.mse,
        window_length: window,
        window_converged,
        ridge_applied: full.ridge || half.ridge,
        relative_difference: rel,
        empirical_mse: empirical,
        standard_error: se,
        n_paths,
        analytic_agrees: rel < 1e-3,
        empirical_agrees,
    })
}

fn relative(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}
