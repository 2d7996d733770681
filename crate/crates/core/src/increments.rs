//! Increment operators, the blocking of a continuous-time path into the
//! generated vector sequence, and the coefficient transforms that rewrite a
//! functional of the process as a functional of its increments.
//!
//! Continuous-time objects live on uniform grids with `T / dt` integral.
//! Functions that may jump at multiples of `T` (the coefficient functions
//! `b` and `v`) are stored block by block: block `j` covers `[jT, (j+1)T]`
//! with `T/dt + 1` samples, the last one being the left limit at `(j+1)T`.
//! All integrals are composite trapezoid sums taken block by block, which
//! makes the discrete form of `A = B - V` hold to rounding error.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{invalid, Error, Result};
use crate::linalg::{pairwise_sum_c, C64, CVector, ZERO};

const GRID_TOL: f64 = 1e-9;

/// Increment order, period, step multiplier and truncation orders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IncrementParams {
    /// Increment order `d >= 1`.
    pub d: u32,
    /// Period `T > 0`.
    #[serde(rename = "T")]
    pub period: f64,
    /// Step multiplier; the physical increment step is `tau * T`.
    pub tau: u32,
    /// Number of retained Fourier components per block.
    #[serde(rename = "K")]
    pub components: usize,
    /// Number of retained lags (block rows of the Toeplitz operator).
    #[serde(rename = "J")]
    pub lags: usize,
}

impl IncrementParams {
    pub fn new(d: u32, period: f64, tau: u32, components: usize, lags: usize) -> Result<Self> {
        let p = Self {
            d,
            period,
            tau,
            components,
            lags,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 1 {
            return Err(invalid("d", "increment order must be at least 1"));
        }
        if !(self.period > 0.0) || !self.period.is_finite() {
            return Err(invalid("T", "period must be a positive finite number"));
        }
        if self.tau < 1 {
            return Err(invalid("tau", "step multiplier must be at least 1"));
        }
        if self.components < 1 {
            return Err(invalid("K", "at least one Fourier component is required"));
        }
        if self.lags < 1 {
            return Err(invalid("J", "at least one lag is required"));
        }
        Ok(())
    }

    /// Physical increment step `tau * T`.
    pub fn step(&self) -> f64 {
        self.tau as f64 * self.period
    }
}

/// Prediction horizon of the functional.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Horizon {
    /// `A xi = int_0^inf a(t) xi(t) dt`.
    Infinite,
    /// `A_{NT} xi = int_0^{(N+1)T} a(t) xi(t) dt`.
    Finite(usize),
}

// ---------------------------------------------------------------------------
// Basis ordering

/// Signed frequency `(-1)^k floor(k/2)` of the 1-based basis index `k`.
pub fn basis_frequency(k: usize) -> i64 {
    assert!(k >= 1, "basis indices start at 1");
    let half = (k / 2) as i64;
    if k % 2 == 0 {
        half
    } else {
        -half
    }
}

/// Inverse of [`basis_frequency`].
pub fn basis_index(freq: i64) -> usize {
    match freq {
        0 => 1,
        f if f > 0 => 2 * f as usize,
        f => 2 * (-f) as usize + 1,
    }
}

/// Index `m` whose frequency is the negative of the frequency of `k`:
/// 1 -> 1, 2 <-> 3, 4 <-> 5, ...
pub fn paired_index(k: usize) -> usize {
    basis_index(-basis_frequency(k))
}

// ---------------------------------------------------------------------------
// Binomial-type coefficients

/// Coefficient of `x^k` in `(sum_j x^j)^d`, i.e. `C(k+d-1, d-1)`.
pub fn dcoef(d: u32, k: u64) -> u64 {
    assert!(d >= 1);
    let r = (d - 1) as u64;
    let n = k + r;
    let mut acc: u128 = 1;
    for i in 1..=r.min(n - r) {
        acc = acc * (n - r.min(n - r) + i) as u128 / i as u128;
    }
    acc as u64
}

/// Coefficient of `x^k` in `(sum_j x^(tau j))^d`.
pub fn dtau_coef(d: u32, tau: u32, k: u64) -> u64 {
    let tau = tau as u64;
    if k % tau == 0 {
        dcoef(d, k / tau)
    } else {
        0
    }
}

/// `(-1)^l C(d, l)`.
pub fn difference_weight(d: u32, l: u32) -> f64 {
    let mut c = 1.0_f64;
    for i in 0..l {
        c = c * (d - i) as f64 / (i + 1) as f64;
    }
    if l % 2 == 0 {
        c
    } else {
        -c
    }
}

// ---------------------------------------------------------------------------
// Paths and blocks

fn grid_steps(x: f64, dt: f64) -> Option<usize> {
    let r = x / dt;
    let n = r.round();
    if n >= 0.0 && (r - n).abs() < GRID_TOL * r.abs().max(1.0) {
        Some(n as usize)
    } else {
        None
    }
}

/// Uniformly sampled path on `[t_min, t_max]` (both ends included).
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessPath {
    pub t_min: f64,
    pub delta_t: f64,
    pub values: Vec<C64>,
}

impl ProcessPath {
    pub fn new(t_min: f64, delta_t: f64, values: Vec<C64>) -> Result<Self> {
        if !(delta_t > 0.0) {
            return Err(invalid("delta_t", "grid step must be positive"));
        }
        if values.is_empty() {
            return Err(Error::EmptyInput("path has no samples"));
        }
        Ok(Self {
            t_min,
            delta_t,
            values,
        })
    }

    pub fn from_fn(t_min: f64, t_max: f64, delta_t: f64, f: impl Fn(f64) -> C64) -> Result<Self> {
        let n = grid_steps(t_max - t_min, delta_t)
            .ok_or_else(|| Error::GridMismatch("span is not a multiple of delta_t".into()))?;
        let values = (0..=n).map(|i| f(t_min + i as f64 * delta_t)).collect();
        Self::new(t_min, delta_t, values)
    }

    pub fn from_real_fn(t_min: f64, t_max: f64, delta_t: f64, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::from_fn(t_min, t_max, delta_t, |t| C64::new(f(t), 0.0))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn t_max(&self) -> f64 {
        self.t_min + (self.values.len() - 1) as f64 * self.delta_t
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t_min + i as f64 * self.delta_t
    }

    /// Grid index of `t`, if `t` is a grid point inside the path.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let i = grid_steps(t - self.t_min, self.delta_t)?;
        (i < self.values.len()).then_some(i)
    }
}

/// `(1 - B_step)^d` applied to a sampled path.
pub fn increment_path(path: &ProcessPath, d: u32, step: f64) -> Result<ProcessPath> {
    let s = grid_steps(step, path.delta_t)
        .filter(|&s| s > 0)
        .ok_or_else(|| Error::GridMismatch(format!("step {step} is not a positive multiple of dt {}", path.delta_t)))?;
    let lag = d as usize * s;
    if path.len() <= lag {
        return Err(Error::InsufficientHistory {
            needed: path.t_max() - lag as f64 * path.delta_t,
            available: path.t_min,
        });
    }
    let weights: Vec<f64> = (0..=d).map(|l| difference_weight(d, l)).collect();
    let values = (lag..path.len())
        .map(|i| {
            weights
                .iter()
                .enumerate()
                .map(|(l, &w)| path.values[i - l * s] * w)
                .sum()
        })
        .collect();
    ProcessPath::new(path.t_min + lag as f64 * path.delta_t, path.delta_t, values)
}

/// A path restricted to one period `[jT, (j+1)T)` and re-indexed to `[0, T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockFunction {
    pub index: i64,
    pub period: f64,
    /// Exactly `T / dt` samples on `[0, T)`.
    pub samples: Vec<C64>,
    /// Value (or left limit) at `u = T`; when absent the block is treated
    /// as periodic.
    pub right_limit: Option<C64>,
}

impl BlockFunction {
    pub fn delta_t(&self) -> f64 {
        self.period / self.samples.len() as f64
    }
}

/// Cut a path into period blocks.
pub fn block_decompose(path: &ProcessPath, period: f64) -> Result<Vec<BlockFunction>> {
    let n = grid_steps(period, path.delta_t)
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::GridMismatch("period is not a multiple of dt".into()))?;
    let start = path.t_min / period;
    if (start - start.round()).abs() > GRID_TOL * start.abs().max(1.0) {
        return Err(Error::GridMismatch(format!("path start {} is not aligned to the period", path.t_min)));
    }
    let span = path.len() - 1;
    if span == 0 || span % n != 0 {
        return Err(Error::GridMismatch(format!(
            "path span {} is not a whole number of periods",
            span as f64 * path.delta_t
        )));
    }
    let first = start.round() as i64;
    Ok((0..span / n)
        .map(|b| BlockFunction {
            index: first + b as i64,
            period,
            samples: path.values[b * n..(b + 1) * n].to_vec(),
            right_limit: Some(path.values[(b + 1) * n]),
        })
        .collect())
}

fn trapezoid_weights(n: usize, closed: bool) -> impl Iterator<Item = f64> {
    (0..=n).map(move |i| {
        if !closed {
            if i == n {
                0.0
            } else {
                1.0
            }
        } else if i == 0 || i == n {
            0.5
        } else {
            1.0
        }
    })
}

/// Coefficient `(1/sqrt T) int_0^T block(v) exp(-2 pi i freq v / T) dv`.
fn fourier_coefficient(block: &BlockFunction, freq: i64) -> C64 {
    let n = block.samples.len();
    let h = block.delta_t();
    let closed = block.right_limit.is_some();
    let end = block.right_limit.unwrap_or(ZERO);
    let terms: Vec<C64> = trapezoid_weights(n, closed)
        .enumerate()
        .map(|(i, w)| {
            let x = if i == n { end } else { block.samples[i] };
            let phase = -2.0 * PI * freq as f64 * i as f64 / n as f64;
            x * C64::from_polar(w, phase)
        })
        .collect();
    pairwise_sum_c(&terms) * (h / block.period.sqrt())
}

/// Basis coefficients `<block, e_k>` for `k = 1..=K`, in basis order.
pub fn fourier_block(block: &BlockFunction, k: usize) -> Result<Vec<C64>> {
    if block.samples.is_empty() {
        return Err(Error::EmptyInput("block has no samples"));
    }
    if k == 0 {
        return Err(invalid("K", "at least one component is required"));
    }
    Ok((1..=k).map(|i| fourier_coefficient(block, basis_frequency(i))).collect())
}

/// Coefficients in paired order: position `m` holds `<block, e_{pi(m)}>`
/// where `pi` pairs each frequency with its negative, so that
/// `int_0^T block(u) x(u) du = sum_m paired[m] * coords_m(x)`.
pub fn fourier_block_paired(block: &BlockFunction, k: usize) -> Result<Vec<C64>> {
    if block.samples.is_empty() {
        return Err(Error::EmptyInput("block has no samples"));
    }
    Ok((1..=k)
        .map(|m| fourier_coefficient(block, basis_frequency(paired_index(m))))
        .collect())
}

/// Rebuild a block from its first `K` basis coordinates (basis order).
pub fn reconstruct_block(coords: &[C64], period: f64, samples: usize, index: i64) -> BlockFunction {
    let eval = |u: f64| -> C64 {
        coords
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let f = basis_frequency(i + 1) as f64;
                c * C64::from_polar(1.0 / period.sqrt(), 2.0 * PI * f * u / period)
            })
            .sum()
    };
    let h = period / samples as f64;
    BlockFunction {
        index,
        period,
        samples: (0..samples).map(|i| eval(i as f64 * h)).collect(),
        right_limit: Some(eval(period)),
    }
}

// ---------------------------------------------------------------------------
// Block vectors

/// Finite sequence of `K`-dimensional complex vectors, indexed from 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockVector {
    k: usize,
    blocks: Vec<Vec<C64>>,
}

impl BlockVector {
    pub fn zeros(k: usize, len: usize) -> Self {
        Self {
            k,
            blocks: vec![vec![ZERO; k]; len],
        }
    }

    pub fn from_blocks(k: usize, blocks: Vec<Vec<C64>>) -> Result<Self> {
        if let Some(bad) = blocks.iter().find(|b| b.len() != k) {
            return Err(Error::Dimension {
                expected: k,
                got: bad.len(),
            });
        }
        Ok(Self { k, blocks })
    }

    /// Scalar (`K = 1`) block vector from real values.
    pub fn from_real(values: &[f64]) -> Self {
        Self {
            k: 1,
            blocks: values.iter().map(|&v| vec![C64::new(v, 0.0)]).collect(),
        }
    }

    pub fn from_flat(k: usize, flat: &CVector) -> Self {
        Self {
            k,
            blocks: flat.as_slice().chunks(k).map(|c| c.to_vec()).collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> &[Vec<C64>] {
        &self.blocks
    }

    pub fn block(&self, j: usize) -> &[C64] {
        &self.blocks[j]
    }

    pub fn block_mut(&mut self, j: usize) -> &mut [C64] {
        &mut self.blocks[j]
    }

    pub fn flatten(&self) -> CVector {
        CVector::from_iterator(self.k * self.len(), self.blocks.iter().flatten().copied())
    }

    pub fn block_norm(&self, j: usize) -> f64 {
        self.blocks[j].iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.blocks.iter().flatten().map(|z| z.norm_sqr()).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.blocks.iter().flatten().all(|z| *z == ZERO)
    }

    /// `sum_j x_j^* y_j`.
    pub fn inner(&self, other: &Self) -> C64 {
        self.blocks
            .iter()
            .flatten()
            .zip(other.blocks.iter().flatten())
            .map(|(x, y)| x.conj() * y)
            .sum()
    }

    pub fn scaled(&self, alpha: C64) -> Self {
        Self {
            k: self.k,
            blocks: self
                .blocks
                .iter()
                .map(|b| b.iter().map(|z| z * alpha).collect())
                .collect(),
        }
    }

    /// Resize to `len` blocks, padding with zeros or dropping the tail.
    pub fn resized(&self, len: usize) -> Self {
        let mut blocks = self.blocks.clone();
        blocks.resize(len, vec![ZERO; self.k]);
        Self { k: self.k, blocks }
    }

    /// Index after which the tail `sum_{j >= J0} |x_j|` is below `rel` of
    /// the total, or `None` when the tail never gets that small.
    pub fn tail_cut(&self, rel: f64) -> Option<usize> {
        let norms: Vec<f64> = (0..self.len()).map(|j| self.block_norm(j)).collect();
        let total: f64 = norms.iter().sum();
        if total == 0.0 {
            return Some(0);
        }
        let mut tail = total;
        for (j, n) in norms.iter().enumerate() {
            if tail < rel * total {
                return Some(j);
            }
            tail -= n;
        }
        (tail.max(0.0) < rel * total).then_some(self.len())
    }
}

/// Upper-triangular block transform `b_j = sum_{m >= j} d_tau(m - j) a_m`.
pub fn apply_d_tau(a: &BlockVector, params: &IncrementParams) -> BlockVector {
    let len = a.len();
    let weights: Vec<f64> = (0..len as u64)
        .map(|k| dtau_coef(params.d, params.tau, k) as f64)
        .collect();
    let blocks = (0..len)
        .map(|j| {
            (0..a.k())
                .map(|e| {
                    (j..len)
                        .filter(|m| weights[m - j] != 0.0)
                        .map(|m| a.block(m)[e] * weights[m - j])
                        .sum()
                })
                .collect()
        })
        .collect();
    BlockVector { k: a.k(), blocks }
}

/// Finite-horizon transform: `a` is cut (or zero-padded) to `N + 1` blocks first.
pub fn apply_d_tau_finite(a: &BlockVector, params: &IncrementParams, n: usize) -> BlockVector {
    apply_d_tau(&a.resized(n + 1), params)
}

// ---------------------------------------------------------------------------
// Coefficient functions

/// Real function sampled block by block on `[first_block * T, (first_block + n_blocks) * T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientFunction {
    period: f64,
    samples_per_period: usize,
    first_block: i64,
    /// `samples_per_period + 1` samples per block, last one a left limit.
    blocks: Vec<Vec<f64>>,
}

impl CoefficientFunction {
    /// Sample a function that is continuous across block boundaries.
    pub fn from_fn(period: f64, samples_per_period: usize, n_blocks: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::from_block_fn(period, samples_per_period, 0, n_blocks, |j, u| f(j as f64 * period + u))
    }

    /// Sample a function given per block as `f(j, u)`, `u` in `[0, T]`.
    pub fn from_block_fn(
        period: f64,
        samples_per_period: usize,
        first_block: i64,
        n_blocks: usize,
        f: impl Fn(i64, f64) -> f64,
    ) -> Result<Self> {
        if !(period > 0.0) {
            return Err(invalid("T", "period must be positive"));
        }
        if samples_per_period == 0 {
            return Err(invalid("samples_per_period", "must be positive"));
        }
        let h = period / samples_per_period as f64;
        let blocks = (0..n_blocks as i64)
            .map(|b| {
                let j = first_block + b;
                (0..=samples_per_period).map(|i| f(j, i as f64 * h)).collect()
            })
            .collect();
        Ok(Self {
            period,
            samples_per_period,
            first_block,
            blocks,
        })
    }

    /// Tabulated continuous function on `[0, n_blocks T]`, `n_blocks * T/dt + 1` values.
    pub fn from_samples(period: f64, delta_t: f64, values: &[f64]) -> Result<Self> {
        let n = grid_steps(period, delta_t)
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::GridMismatch("period is not a multiple of dt".into()))?;
        if values.len() < 2 || (values.len() - 1) % n != 0 {
            return Err(Error::GridMismatch(format!(
                "{} samples do not cover a whole number of periods at {} samples per period",
                values.len(),
                n
            )));
        }
        let blocks = values.windows(n + 1).step_by(n).map(|w| w.to_vec()).collect();
        Ok(Self {
            period,
            samples_per_period: n,
            first_block: 0,
            blocks,
        })
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn samples_per_period(&self) -> usize {
        self.samples_per_period
    }

    pub fn delta_t(&self) -> f64 {
        self.period / self.samples_per_period as f64
    }

    pub fn first_block(&self) -> i64 {
        self.first_block
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn t_start(&self) -> f64 {
        self.first_block as f64 * self.period
    }

    pub fn t_end(&self) -> f64 {
        (self.first_block + self.blocks.len() as i64) as f64 * self.period
    }

    /// Samples of block `j` (absolute index); `None` outside the stored range.
    pub fn block_samples(&self, j: i64) -> Option<&[f64]> {
        let b = j - self.first_block;
        (b >= 0 && (b as usize) < self.blocks.len()).then(|| self.blocks[b as usize].as_slice())
    }

    /// Keep only the first `n_blocks` blocks (zero beyond).
    pub fn truncated(&self, n_blocks: usize) -> Self {
        let mut out = self.clone();
        out.blocks.truncate(n_blocks);
        out
    }

    /// Pointwise value, right-continuous at block boundaries; the end of the
    /// stored range takes the last block's left limit. Zero outside.
    pub fn eval(&self, t: f64) -> f64 {
        let x = t / self.period - self.first_block as f64;
        let nb = self.blocks.len() as f64;
        if x < -GRID_TOL || x > nb + GRID_TOL {
            return 0.0;
        }
        let (b, u) = if (x - nb).abs() <= GRID_TOL {
            (self.blocks.len() - 1, 1.0)
        } else {
            let mut b = x.floor();
            let mut u = x - b;
            if 1.0 - u < GRID_TOL {
                b += 1.0;
                u = 0.0;
            }
            if b >= nb {
                return self.blocks.last().map(|blk| blk[self.samples_per_period]).unwrap_or(0.0);
            }
            (b.max(0.0) as usize, u.max(0.0))
        };
        let s = &self.blocks[b];
        let pos = u * self.samples_per_period as f64;
        let i = (pos.floor() as usize).min(self.samples_per_period - 1);
        let frac = pos - i as f64;
        if frac.abs() < GRID_TOL {
            s[i]
        } else if (1.0 - frac).abs() < GRID_TOL {
            s[i + 1]
        } else {
            s[i] * (1.0 - frac) + s[i + 1] * frac
        }
    }

    /// Block `j` as a complex block function with its stored left limit.
    pub fn block(&self, j: i64) -> Option<BlockFunction> {
        let s = self.block_samples(j)?;
        let n = self.samples_per_period;
        Some(BlockFunction {
            index: j,
            period: self.period,
            samples: s[..n].iter().map(|&v| C64::new(v, 0.0)).collect(),
            right_limit: Some(C64::new(s[n], 0.0)),
        })
    }

    /// Paired Fourier coefficients of every block, starting at block 0.
    pub fn block_vector(&self, k: usize) -> Result<BlockVector> {
        if self.first_block != 0 {
            return Err(invalid("first_block", "coefficient blocks must start at t = 0"));
        }
        let blocks = (0..self.n_blocks() as i64)
            .map(|j| fourier_block_paired(&self.block(j).expect("in range"), k))
            .collect::<Result<Vec<_>>>()?;
        BlockVector::from_blocks(k, blocks)
    }
}

/// Summability of the coefficient blocks on their truncated support.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summability {
    pub sum_norms: f64,
    pub weighted_sum_norms: f64,
    /// Number of blocks kept by the tail rule.
    pub support_blocks: usize,
    /// `support_blocks * T`.
    pub support_end: f64,
}

/// Relative tail threshold for truncating infinite coefficient sequences.
pub const TAIL_REL: f64 = 1e-12;

/// Verify `sum |a_j| < inf` and `sum (j+1)|a_j| < inf` numerically and locate
/// the truncation point.
pub fn check_summability(a: &BlockVector, period: f64) -> Result<Summability> {
    if a.blocks().iter().flatten().any(|z| !z.is_finite()) {
        return Err(Error::Summability("non-finite coefficients".into()));
    }
    let cut = a.tail_cut(TAIL_REL).ok_or_else(|| {
        Error::Summability(format!(
            "tail of {} blocks does not fall below {TAIL_REL:e} of the total",
            a.len()
        ))
    })?;
    let norms: Vec<f64> = (0..cut).map(|j| a.block_norm(j)).collect();
    let sum_norms: f64 = norms.iter().sum();
    let weighted: f64 = norms.iter().enumerate().map(|(j, n)| (j + 1) as f64 * n).sum();
    if !sum_norms.is_finite() || !weighted.is_finite() {
        return Err(Error::Summability("non-finite coefficient norms".into()));
    }
    Ok(Summability {
        sum_norms,
        weighted_sum_norms: weighted,
        support_blocks: cut,
        support_end: cut as f64 * period,
    })
}

fn floor_tol(x: f64) -> i64 {
    (x + GRID_TOL).floor() as i64
}

fn ceil_tol(x: f64) -> i64 {
    (x - GRID_TOL).ceil() as i64
}

/// `b^{tau,N}(t) = sum_{k=0}^{[((N+1)T - t)/(tau T)]} a(t + tau T k) d(k)`.
pub fn b_coeff_finite(a: &CoefficientFunction, params: &IncrementParams, n: usize, t: f64) -> Result<f64> {
    let end = (n + 1) as f64 * params.period;
    if t < -GRID_TOL || t > end + GRID_TOL {
        return Err(Error::Domain { t, lo: 0.0, hi: end });
    }
    let step = params.step();
    let top = floor_tol((end - t) / step).max(0) as u64;
    let a_n = a.truncated(n + 1);
    Ok((0..=top)
        .map(|k| a_n.eval(t + step * k as f64) * dcoef(params.d, k) as f64)
        .sum())
}

/// `b^tau(t) = sum_{k >= 0} a(t + tau T k) d(k)` over the stored support of `a`.
pub fn b_coeff(a: &CoefficientFunction, params: &IncrementParams, t: f64) -> Result<f64> {
    if t < -GRID_TOL {
        return Err(Error::Domain {
            t,
            lo: 0.0,
            hi: f64::INFINITY,
        });
    }
    let step = params.step();
    let top = floor_tol((a.t_end() - t) / step).max(0) as u64;
    Ok((0..=top)
        .map(|k| a.eval(t + step * k as f64) * dcoef(params.d, k) as f64)
        .sum())
}

/// `v(t) = sum_{l=[-t/(tau T)]'}^{d or cap} (-1)^l C(d,l) b(t + l tau T)` for `t` in `[-tau T d, 0)`.
pub fn v_coeff(b: &CoefficientFunction, params: &IncrementParams, horizon: Horizon, t: f64) -> Result<f64> {
    let step = params.step();
    let lo_t = -step * params.d as f64;
    if t < lo_t - GRID_TOL || t >= -GRID_TOL {
        return Err(Error::Domain { t, lo: lo_t, hi: 0.0 });
    }
    let lo = ceil_tol(-t / step).max(0);
    let hi = match horizon {
        Horizon::Infinite => params.d as i64,
        Horizon::Finite(n) => floor_tol(((n + 1) as f64 * params.period - t) / step).min(params.d as i64),
    };
    Ok((lo..=hi)
        .map(|l| difference_weight(params.d, l as u32) * b.eval(t + step * l as f64))
        .sum())
}

/// Block-wise `b` with one-sided limits at block ends. For a finite horizon
/// `a` is cut to `N + 1` blocks.
pub fn b_function(a: &CoefficientFunction, params: &IncrementParams, horizon: Horizon) -> Result<CoefficientFunction> {
    if a.first_block() != 0 {
        return Err(invalid("a", "coefficient function must start at t = 0"));
    }
    let a = match horizon {
        Horizon::Infinite => a.clone(),
        Horizon::Finite(n) => {
            let mut t = a.truncated(n + 1);
            while t.blocks.len() < n + 1 {
                t.blocks.push(vec![0.0; t.samples_per_period + 1]);
            }
            t
        }
    };
    let nb = a.n_blocks();
    let tau = params.tau as usize;
    let blocks = (0..nb)
        .map(|j| {
            let mut out = vec![0.0; a.samples_per_period + 1];
            for k in 0.. {
                let m = j + tau * k;
                if m >= nb {
                    break;
                }
                let w = dcoef(params.d, k as u64) as f64;
                for (o, s) in out.iter_mut().zip(&a.blocks[m]) {
                    *o += w * s;
                }
            }
            out
        })
        .collect();
    Ok(CoefficientFunction { blocks, ..a })
}

/// Block-wise `v` on `[-tau T d, 0)`.
pub fn v_function(b: &CoefficientFunction, params: &IncrementParams) -> Result<CoefficientFunction> {
    if b.first_block() != 0 {
        return Err(invalid("b", "coefficient function must start at t = 0"));
    }
    let tau = params.tau as i64;
    let d = params.d as i64;
    let first = -tau * d;
    let blocks = (first..0)
        .map(|j| {
            let lo = (-j - 1) / tau + 1;
            let mut out = vec![0.0; b.samples_per_period + 1];
            for l in lo..=d {
                if let Some(s) = b.block_samples(j + l * tau) {
                    let w = difference_weight(params.d, l as u32);
                    for (o, x) in out.iter_mut().zip(s) {
                        *o += w * x;
                    }
                }
            }
            out
        })
        .collect();
    Ok(CoefficientFunction {
        period: b.period,
        samples_per_period: b.samples_per_period,
        first_block: first,
        blocks,
    })
}

/// `int coef(t) path(t) dt` over the stored blocks of `coef`, by block-wise
/// trapezoid sums. The path must be continuous and cover every block.
pub fn integrate_product(coef: &CoefficientFunction, path: &ProcessPath) -> Result<C64> {
    if (coef.delta_t() - path.delta_t).abs() > GRID_TOL * path.delta_t {
        return Err(Error::GridMismatch("coefficient and path grids differ".into()));
    }
    let n = coef.samples_per_period;
    let h = coef.delta_t();
    let mut partial = Vec::with_capacity(coef.n_blocks());
    for (b, samples) in coef.blocks.iter().enumerate() {
        let t0 = (coef.first_block + b as i64) as f64 * coef.period;
        let i0 = path.index_of(t0).ok_or(Error::InsufficientHistory {
            needed: t0,
            available: path.t_min,
        })?;
        if i0 + n >= path.len() {
            return Err(Error::GridMismatch(format!(
                "path ends at {} before block end {}",
                path.t_max(),
                t0 + coef.period
            )));
        }
        let terms: Vec<C64> = trapezoid_weights(n, true)
            .enumerate()
            .map(|(i, w)| path.values[i0 + i] * (w * samples[i]))
            .collect();
        partial.push(pairwise_sum_c(&terms) * h);
    }
    Ok(pairwise_sum_c(&partial))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn poly_oracle(d: u32, tau: u32, k: u64) -> u64 {
        // truncated product of d copies of sum_j x^{tau j}
        let len = k as usize + 1;
        let mut base = vec![0u64; len];
        for j in (0..len).step_by(tau as usize) {
            base[j] = 1;
        }
        let mut acc = vec![0u64; len];
        acc[0] = 1;
        for _ in 0..d {
            let mut next = vec![0u64; len];
            for (i, &x) in acc.iter().enumerate() {
                if x == 0 {
                    continue;
                }
                for (j, &y) in base.iter().enumerate().take(len - i) {
                    next[i + j] += x * y;
                }
            }
            acc = next;
        }
        acc[k as usize]
    }

    #[test]
    fn basis_ordering() {
        let freqs: Vec<i64> = (1..=7).map(basis_frequency).collect();
        assert_eq!(freqs, vec![0, 1, -1, 2, -2, 3, -3]);
        for k in 1..20 {
            assert_eq!(basis_index(basis_frequency(k)), k);
            assert_eq!(paired_index(paired_index(k)), k);
        }
        assert_eq!(paired_index(1), 1);
        assert_eq!(paired_index(2), 3);
        assert_eq!(paired_index(5), 4);
    }

    #[test]
    fn dcoef_examples() {
        assert!((0..10).all(|k| dcoef(1, k) == 1));
        assert_eq!(dcoef(2, 3), 4);
        assert_eq!(dcoef(3, 2), 6);
        assert_eq!(poly_oracle(2, 1, 3), 4);
        assert_eq!(poly_oracle(3, 1, 2), 6);
    }

    #[test]
    fn dcoef_matches_polynomial_oracle() {
        for d in 1..=6 {
            for k in 0..=64 {
                assert_eq!(dcoef(d, k), poly_oracle(d, 1, k), "d={d} k={k}");
            }
        }
    }

    #[test]
    fn dtau_examples() {
        for d in 1..4 {
            for k in 0..20 {
                assert_eq!(dtau_coef(d, 1, k), dcoef(d, k));
            }
        }
        assert_eq!(dtau_coef(2, 2, 3), 0);
        assert_eq!(dtau_coef(2, 2, 4), 3);
        assert_eq!(poly_oracle(2, 2, 4), 3);
        for k in 0..30 {
            assert_eq!(dtau_coef(3, 3, k), poly_oracle(3, 3, k));
        }
    }

    #[test]
    fn increment_of_constant_linear_quadratic() {
        let dt = 0.125;
        let c = ProcessPath::from_real_fn(0.0, 4.0, dt, |_| 5.0).unwrap();
        let inc = increment_path(&c, 1, 0.5).unwrap();
        assert!(inc.values.iter().all(|z| z.norm() < 1e-14));
        assert!((inc.t_min - 0.5).abs() < 1e-12);

        let lin = ProcessPath::from_real_fn(0.0, 4.0, dt, |t| t).unwrap();
        let inc = increment_path(&lin, 1, 0.75).unwrap();
        assert!(inc.values.iter().all(|z| (z.re - 0.75).abs() < 1e-12));

        let sq = ProcessPath::from_real_fn(0.0, 4.0, dt, |t| t * t).unwrap();
        let inc = increment_path(&sq, 2, 0.5).unwrap();
        assert!(inc.values.iter().all(|z| (z.re - 2.0 * 0.25).abs() < 1e-12));
    }

    #[test]
    fn increment_errors() {
        let p = ProcessPath::from_real_fn(0.0, 1.0, 0.25, |t| t).unwrap();
        assert!(matches!(increment_path(&p, 1, 0.3), Err(Error::GridMismatch(_))));
        assert!(matches!(increment_path(&p, 3, 0.5), Err(Error::InsufficientHistory { .. })));
    }

    #[test]
    fn block_decomposition() {
        let t = 2.0;
        let p = ProcessPath::from_real_fn(0.0, 2.0 * t, 0.25, |x| x).unwrap();
        let blocks = block_decompose(&p, t).unwrap();
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[0].samples.len(), 8);
        assert_eq!(blocks[0].samples, p.values[..8].to_vec());

        let p3 = ProcessPath::from_real_fn(0.0, 3.0 * t, 0.25, |x| x).unwrap();
        let blocks = block_decompose(&p3, t).unwrap();
        for (i, s) in blocks[1].samples.iter().enumerate() {
            assert!((s.re - (t + 0.25 * i as f64)).abs() < 1e-12);
        }

        let bad = ProcessPath::from_real_fn(0.0, 2.5 * t, 0.25, |x| x).unwrap();
        assert!(matches!(block_decompose(&bad, t), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn fourier_of_constant_and_exponential() {
        let t = 2.0;
        let n = 64;
        let block = BlockFunction {
            index: 0,
            period: t,
            samples: vec![C64::new(3.0, 0.0); n],
            right_limit: Some(C64::new(3.0, 0.0)),
        };
        let c = fourier_block(&block, 5).unwrap();
        assert!((c[0] - C64::new(3.0 * t.sqrt(), 0.0)).norm() < 1e-12);
        assert!(c[1..].iter().all(|z| z.norm() < 1e-12));

        let e = |u: f64| C64::from_polar(1.0, 2.0 * PI * u / t);
        let block = BlockFunction {
            index: 0,
            period: t,
            samples: (0..n).map(|i| e(i as f64 * t / n as f64)).collect(),
            right_limit: Some(e(t)),
        };
        let natural = fourier_block(&block, 5).unwrap();
        for (i, z) in natural.iter().enumerate() {
            let expect = if basis_frequency(i + 1) == 1 { t.sqrt() } else { 0.0 };
            assert!((z - C64::new(expect, 0.0)).norm() < 1e-12);
        }
        // paired order: the position whose own frequency is -1 carries it
        let paired = fourier_block_paired(&block, 5).unwrap();
        for (i, z) in paired.iter().enumerate() {
            let expect = if basis_frequency(i + 1) == -1 { t.sqrt() } else { 0.0 };
            assert!((z - C64::new(expect, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn fourier_of_ramp_matches_refined_quadrature() {
        let n = 1024;
        let ramp = |n: usize| BlockFunction {
            index: 0,
            period: 1.0,
            samples: (0..n).map(|i| C64::new(i as f64 / n as f64, 0.0)).collect(),
            right_limit: Some(C64::new(1.0, 0.0)),
        };
        let coarse = fourier_block(&ramp(n), 3).unwrap();
        // independent oracle: Simpson's rule at 10x density
        let m = 10 * n;
        let h = 1.0 / m as f64;
        for (k, z) in coarse.iter().enumerate() {
            let f = basis_frequency(k + 1) as f64;
            let g = |v: f64| v * C64::from_polar(1.0, -2.0 * PI * f * v);
            let mut s = g(0.0) + g(1.0);
            for i in 1..m {
                s += g(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            let oracle = s * (h / 3.0);
            assert!((z - oracle).norm() < 1e-6, "k={} {z} vs {oracle}", k + 1);
        }
    }

    #[test]
    fn basis_functions_map_to_unit_vectors() {
        let n = 1024;
        for m in 1..=5 {
            let coords: Vec<C64> = (1..=5).map(|k| if k == m { C64::new(1.0, 0.0) } else { ZERO }).collect();
            let blk = reconstruct_block(&coords, 1.5, n, 0);
            let c = fourier_block(&blk, 5).unwrap();
            for (k, z) in c.iter().enumerate() {
                let expect = if k + 1 == m { 1.0 } else { 0.0 };
                assert!((z - C64::new(expect, 0.0)).norm() < 1e-8);
            }
        }
    }

    #[test]
    fn fourier_rejects_empty() {
        let block = BlockFunction {
            index: 0,
            period: 1.0,
            samples: vec![],
            right_limit: None,
        };
        assert!(matches!(fourier_block(&block, 3), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn d_tau_examples() {
        let p = IncrementParams::new(1, 1.0, 1, 1, 4).unwrap();
        let a = BlockVector::from_real(&[2.5]);
        assert_eq!(apply_d_tau(&a, &p), a);
        let a = BlockVector::from_real(&[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(apply_d_tau(&a, &p), BlockVector::from_real(&[2.0, 1.0, 0.0, 0.0]));
        let p2 = IncrementParams::new(2, 1.0, 1, 1, 4).unwrap();
        let a = BlockVector::from_real(&[1.0, 1.0, 1.0, 0.0]);
        // direct triangular multiply
        let mut oracle = [0.0; 4];
        for (j, o) in oracle.iter_mut().enumerate() {
            for m in j..4 {
                *o += (m - j + 1) as f64 * [1.0, 1.0, 1.0, 0.0][m];
            }
        }
        assert_eq!(oracle, [6.0, 3.0, 1.0, 0.0]);
        assert_eq!(apply_d_tau(&a, &p2), BlockVector::from_real(&oracle));
    }

    proptest! {
        #[test]
        fn d_tau_is_linear(
            xs in proptest::collection::vec(-20i32..20, 1..12),
            ys in proptest::collection::vec(-20i32..20, 1..12),
            alpha in -5i32..5, beta in -5i32..5,
            d in 1u32..4, tau in 1u32..3,
        ) {
            let len = xs.len().min(ys.len());
            let p = IncrementParams::new(d, 1.0, tau, 1, 4).unwrap();
            let x = BlockVector::from_real(&xs[..len].iter().map(|&v| v as f64).collect::<Vec<_>>());
            let y = BlockVector::from_real(&ys[..len].iter().map(|&v| v as f64).collect::<Vec<_>>());
            let combo = BlockVector::from_real(
                &(0..len).map(|i| (alpha * xs[i] + beta * ys[i]) as f64).collect::<Vec<_>>());
            let lhs = apply_d_tau(&combo, &p);
            let dx = apply_d_tau(&x, &p);
            let dy = apply_d_tau(&y, &p);
            for j in 0..len {
                let rhs = dx.block(j)[0] * alpha as f64 + dy.block(j)[0] * beta as f64;
                prop_assert_eq!(lhs.block(j)[0], rhs);
            }
        }
    }

    #[test]
    fn b_coeff_finite_examples() {
        let p = IncrementParams::new(1, 1.0, 1, 1, 4).unwrap();
        let n = 3;
        let ones = CoefficientFunction::from_fn(1.0, 16, n + 1, |_| 1.0).unwrap();
        assert!((b_coeff_finite(&ones, &p, n, 0.0).unwrap() - (n + 2) as f64).abs() < 1e-12);
        let ramp = CoefficientFunction::from_fn(1.0, 16, n + 1, |t| t * t).unwrap();
        let t = 3.5;
        assert!((b_coeff_finite(&ramp, &p, n, t).unwrap() - t * t).abs() < 1e-12);
        let p2 = IncrementParams::new(2, 1.0, 1, 1, 4).unwrap();
        let ones = CoefficientFunction::from_fn(1.0, 16, 2, |_| 1.0).unwrap();
        assert!((b_coeff_finite(&ones, &p2, 1, 0.0).unwrap() - 6.0).abs() < 1e-12);
        assert!(matches!(b_coeff_finite(&ones, &p2, 1, 2.5), Err(Error::Domain { .. })));
    }

    #[test]
    fn v_coeff_examples() {
        let b = CoefficientFunction::from_fn(1.0, 32, 4, |t| (1.0 + t).ln() + t * t).unwrap();
        let p1 = IncrementParams::new(1, 1.0, 1, 1, 4).unwrap();
        let p2 = IncrementParams::new(2, 1.0, 1, 1, 4).unwrap();
        for &t in &[-0.9, -0.5, -0.03125] {
            let v = v_coeff(&b, &p1, Horizon::Infinite, t).unwrap();
            assert!((v + b.eval(t + 1.0)).abs() < 1e-12);
            let v = v_coeff(&b, &p2, Horizon::Infinite, t).unwrap();
            assert!((v - (-2.0 * b.eval(t + 1.0) + b.eval(t + 2.0))).abs() < 1e-12);
        }
        assert!(matches!(v_coeff(&b, &p1, Horizon::Infinite, 0.0), Err(Error::Domain { .. })));
        assert!(matches!(v_coeff(&b, &p1, Horizon::Infinite, -1.5), Err(Error::Domain { .. })));
    }

    #[test]
    fn block_b_matches_transform_of_block_coefficients() {
        let p = IncrementParams::new(2, 1.0, 2, 3, 8).unwrap();
        let a = CoefficientFunction::from_fn(1.0, 64, 6, |t| (-(t - 1.5) * (t - 1.5)).exp()).unwrap();
        let bf = b_function(&a, &p, Horizon::Finite(5)).unwrap();
        let via_blocks = apply_d_tau(&a.block_vector(3).unwrap(), &p);
        let direct = bf.block_vector(3).unwrap();
        for j in 0..6 {
            for e in 0..3 {
                assert!((via_blocks.block(j)[e] - direct.block(j)[e]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn pointwise_and_blockwise_b_agree_inside_blocks() {
        let p = IncrementParams::new(2, 1.0, 2, 1, 4).unwrap();
        let n = 4;
        let a = CoefficientFunction::from_fn(1.0, 16, n + 1, |t| 1.0 + (t * 0.7).sin()).unwrap();
        let bf = b_function(&a, &p, Horizon::Finite(n)).unwrap();
        for i in 0..(16 * (n + 1)) {
            if i % 16 == 0 {
                continue;
            }
            let t = i as f64 / 16.0;
            assert!((bf.eval(t) - b_coeff_finite(&a, &p, n, t).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn representation_identity_small() {
        let p = IncrementParams::new(2, 1.0, 2, 1, 4).unwrap();
        let n_per = 64;
        let horizon = 3;
        let a = CoefficientFunction::from_fn(1.0, n_per, horizon + 1, |t| (t * 1.3).cos() + 0.2 * t).unwrap();
        let b = b_function(&a, &p, Horizon::Finite(horizon)).unwrap();
        let v = v_function(&b, &p).unwrap();
        let dt = 1.0 / n_per as f64;
        let lo = -p.step() * 2.0 * p.d as f64;
        let path = ProcessPath::from_real_fn(lo, (horizon + 1) as f64, dt, |t| (0.4 * t).sin() + 0.1 * t * t).unwrap();
        let inc = increment_path(&path, p.d, p.step()).unwrap();
        let lhs = integrate_product(&a, &path).unwrap();
        let rhs = integrate_product(&b, &inc).unwrap() - integrate_product(&v, &path).unwrap();
        assert!((lhs - rhs).norm() < 1e-12 * lhs.norm().max(1.0));
    }

    #[test]
    fn tail_rule() {
        let a = BlockVector::from_real(&[1.0, 0.5, 1e-14, 0.0, 0.0]);
        assert_eq!(a.tail_cut(TAIL_REL), Some(2));
        let s = check_summability(&a, 2.0).unwrap();
        assert_eq!(s.support_blocks, 2);
        assert!((s.sum_norms - 1.5).abs() < 1e-15);
        assert!((s.weighted_sum_norms - 2.0).abs() < 1e-15);
        // a function stored up to its support end is zero beyond it
        let flat = BlockVector::from_real(&[1.0; 5]);
        assert_eq!(check_summability(&flat, 1.0).unwrap().support_blocks, 5);
        let bad = BlockVector::from_real(&[1.0, f64::NAN]);
        assert!(check_summability(&bad, 1.0).is_err());
    }
}
