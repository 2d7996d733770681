//! Spectral density models, the increment kernel, quadrature on `[-pi, pi)`
//! and the block-Toeplitz operator built from the inverse increment density.
//!
//! A model either describes the process density `f` or directly the density
//! of the generated increment sequence `g = kernel * f` (the "increment"
//! target). The second form is what simulations and the shipped scenarios
//! use, and it avoids dividing by the kernel at its zeros when `tau >= 2`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::increments::IncrementParams;
use crate::linalg::{hermitian_inverse, pairwise_sum_c, CMatrix, HermitianSpectrum, C64, ONE, ZERO};

/// Relative condition ceiling for pointwise density inversion.
pub const CONDITION_CEILING: f64 = 1e12;
/// Default number of quadrature nodes.
pub const DEFAULT_NODES: usize = 4096;
/// Default divergence ceiling for the minimality integral.
pub const DIVERGENCE_CEILING: f64 = 1e8;

// ---------------------------------------------------------------------------
// Kernel

/// `|1 - e^{i lambda tau}|^{2d} / lambda^{2d}` and its square root factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncrementKernel {
    pub d: u32,
    pub tau: u32,
}

impl IncrementKernel {
    pub fn new(d: u32, tau: u32) -> Self {
        Self { d, tau }
    }

    pub fn of(params: &IncrementParams) -> Self {
        Self::new(params.d, params.tau)
    }

    /// `(1 - e^{-i lambda tau})^d / (i lambda)^d`, equal to `tau^d` at 0.
    pub fn transfer(&self, lambda: f64) -> C64 {
        let tau = self.tau as f64;
        let single = if lambda.abs() < 1e-8 {
            // series of (1 - e^{-ix tau}) / (i x) around 0
            C64::new(tau, 0.0) - C64::new(0.0, tau * tau * lambda / 2.0)
        } else {
            (ONE - C64::from_polar(1.0, -lambda * tau)) / C64::new(0.0, lambda)
        };
        single.powu(self.d)
    }

    /// Kernel value `|transfer|^2`.
    pub fn value(&self, lambda: f64) -> f64 {
        self.transfer(lambda).norm_sqr()
    }

    /// `transfer(tau1) * conj(transfer(tau2))`-type weight relating the
    /// structural function with steps `tau1`, `tau2` to the process density.
    pub fn cross(&self, lambda: f64, tau1: u32, tau2: u32) -> C64 {
        let a = IncrementKernel::new(self.d, tau1).transfer(lambda);
        let b = IncrementKernel::new(self.d, tau2).transfer(lambda);
        a * b.conj()
    }
}

// ---------------------------------------------------------------------------
// Quadrature grid

/// Uniform midpoint nodes `lambda_m = -pi + (m + 1/2) 2 pi / M`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadratureGrid {
    pub nodes: usize,
}

impl Default for QuadratureGrid {
    fn default() -> Self {
        Self { nodes: DEFAULT_NODES }
    }
}

impl QuadratureGrid {
    pub fn new(nodes: usize) -> Result<Self> {
        if nodes < 2 {
            return Err(invalid("M", "at least two quadrature nodes are required"));
        }
        Ok(Self { nodes })
    }

    pub fn node(&self, m: usize) -> f64 {
        -PI + (m as f64 + 0.5) * 2.0 * PI / self.nodes as f64
    }

    pub fn lambdas(&self) -> Vec<f64> {
        (0..self.nodes).map(|m| self.node(m)).collect()
    }

    /// Weight of each node for `(1/2pi) int`.
    pub fn weight(&self) -> f64 {
        1.0 / self.nodes as f64
    }

    pub fn refined(&self, factor: usize) -> Self {
        Self {
            nodes: self.nodes * factor,
        }
    }

    /// Index of the node mirrored through 0 (`lambda -> -lambda`).
    pub fn mirror(&self, m: usize) -> usize {
        self.nodes - 1 - m
    }
}

/// `(1/2pi) int F(lambda) d lambda` on the grid, entrywise pairwise sums.
pub fn integrate_matrix(grid: &QuadratureGrid, rows: usize, cols: usize, f: impl Fn(usize, f64) -> CMatrix + Sync) -> CMatrix {
    let values: Vec<CMatrix> = (0..grid.nodes).into_par_iter().map(|m| f(m, grid.node(m))).collect();
    sum_nodes(&values, rows, cols) * C64::new(grid.weight(), 0.0)
}

/// Entrywise pairwise sum of per-node matrices.
pub(crate) fn sum_nodes(values: &[CMatrix], rows: usize, cols: usize) -> CMatrix {
    let mut out = CMatrix::zeros(rows, cols);
    let mut column = Vec::with_capacity(values.len());
    for r in 0..rows {
        for c in 0..cols {
            column.clear();
            column.extend(values.iter().map(|v| v[(r, c)]));
            out[(r, c)] = pairwise_sum_c(&column);
        }
    }
    out
}

pub fn integrate_scalar(grid: &QuadratureGrid, f: impl Fn(usize, f64) -> C64 + Sync) -> C64 {
    let values: Vec<C64> = (0..grid.nodes).into_par_iter().map(|m| f(m, grid.node(m))).collect();
    pairwise_sum_c(&values) * grid.weight()
}

// ---------------------------------------------------------------------------
// Density specification (serializable)

/// Real or complex number in configuration files: `1.5` or `[re, im]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Real(f64),
    Complex([f64; 2]),
}

impl Scalar {
    pub fn value(&self) -> C64 {
        match *self {
            Scalar::Real(x) => C64::new(x, 0.0),
            Scalar::Complex([re, im]) => C64::new(re, im),
        }
    }
}

impl From<C64> for Scalar {
    fn from(z: C64) -> Self {
        if z.im == 0.0 {
            Scalar::Real(z.re)
        } else {
            Scalar::Complex([z.re, z.im])
        }
    }
}

pub type MatrixSpec = Vec<Vec<Scalar>>;

pub(crate) fn matrix_from_spec(m: &MatrixSpec, field: &'static str) -> Result<CMatrix> {
    let n = m.len();
    if n == 0 || m.iter().any(|row| row.len() != n) {
        return Err(invalid(field, "matrix must be square and non-empty"));
    }
    Ok(CMatrix::from_fn(n, n, |r, c| m[r][c].value()))
}

pub fn matrix_to_spec(m: &CMatrix) -> MatrixSpec {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)].into()).collect())
        .collect()
}

/// Which density a model specifies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// The process density `f`.
    #[default]
    Process,
    /// The increment density `g = kernel * f`.
    Increment,
}

/// `scale * |sum_m num_m e^{-i m lambda}|^2 / |sum_m den_m e^{-i m lambda}|^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationalSpec {
    pub numerator: Vec<f64>,
    #[serde(default = "unit_polynomial")]
    pub denominator: Vec<f64>,
    #[serde(default = "unit_scale")]
    pub scale: f64,
}

fn unit_polynomial() -> Vec<f64> {
    vec![1.0]
}

fn unit_scale() -> f64 {
    1.0
}

impl RationalSpec {
    pub fn ma1(theta: f64) -> Self {
        Self {
            numerator: vec![1.0, theta],
            denominator: vec![1.0],
            scale: 1.0,
        }
    }

    pub fn ar1(phi: f64) -> Self {
        Self {
            numerator: vec![1.0],
            denominator: vec![1.0, -phi],
            scale: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.numerator.is_empty() || self.denominator.is_empty() {
            return Err(invalid("numerator", "polynomials must have at least one coefficient"));
        }
        if !(self.scale > 0.0) {
            return Err(invalid("scale", "must be positive"));
        }
        Ok(())
    }

    fn poly(c: &[f64], lambda: f64) -> C64 {
        c.iter()
            .enumerate()
            .map(|(m, &x)| C64::from_polar(x, -(m as f64) * lambda))
            .sum()
    }

    /// Causal transfer `sqrt(scale) num / den` at `e^{-i lambda}`.
    pub fn factor(&self, lambda: f64) -> C64 {
        Self::poly(&self.numerator, lambda) / Self::poly(&self.denominator, lambda) * self.scale.sqrt()
    }

    pub fn eval(&self, lambda: f64) -> f64 {
        self.factor(lambda).norm_sqr()
    }
}

/// Serializable description of a spectral density model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DensitySpec {
    Constant {
        matrix: MatrixSpec,
        #[serde(default)]
        target: Target,
    },
    ScalarRational {
        #[serde(flatten)]
        rational: RationalSpec,
        #[serde(default)]
        target: Target,
    },
    DiagonalRational {
        entries: Vec<RationalSpec>,
        #[serde(default)]
        target: Target,
    },
    /// `H(lambda) H(lambda)^*` with `H = sum_m Theta_m e^{-i m lambda}`.
    VectorMa {
        coefficients: Vec<MatrixSpec>,
        #[serde(default)]
        target: Target,
    },
    WhiteIncrementMatched {
        dimension: usize,
    },
    /// Piecewise-linear (periodic) interpolation of tabulated matrices.
    Tabulated {
        lambda: Vec<f64>,
        values: Vec<MatrixSpec>,
        #[serde(default)]
        target: Target,
        #[serde(default)]
        real: bool,
    },
}

/// MA(1) parameters of the shipped scenarios.
pub const SCENARIO_MA_THETAS: [f64; 3] = [0.3, 0.5, 0.9];
/// AR(1) parameter of the shipped AR-type scenario.
pub const SCENARIO_AR_PHI: f64 = 0.5;

/// The shipped scenarios for dimension `k`, all given as increment
/// densities: white, MA(1) for each of [`SCENARIO_MA_THETAS`] and the AR-type
/// `1 / |1 - 0.5 e^{i lambda}|^2`. For `k > 1` every diagonal entry repeats
/// the scalar model.
pub fn shipped_scenarios(k: usize) -> Result<Vec<(String, SpectralDensityModel)>> {
    let diag = |r: RationalSpec| SpectralDensityModel::diagonal_rational(vec![r; k], Target::Increment);
    let mut out = vec![("white".to_string(), SpectralDensityModel::white_increment_matched(k)?)];
    for theta in SCENARIO_MA_THETAS {
        out.push((format!("ma1({theta})"), diag(RationalSpec::ma1(theta))?));
    }
    out.push((format!("ar1({SCENARIO_AR_PHI})"), diag(RationalSpec::ar1(SCENARIO_AR_PHI))?));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Model

type DensityFn = Arc<dyn Fn(f64) -> CMatrix + Send + Sync>;

#[derive(Clone)]
enum Kind {
    Constant(CMatrix),
    Rational(Vec<RationalSpec>),
    VectorMa(Vec<CMatrix>),
    Tabulated { lambda: Vec<f64>, values: Vec<CMatrix> },
    Custom(DensityFn),
}

/// Evaluator of a `K x K` Hermitian PSD density on `[-pi, pi)`.
#[derive(Clone)]
pub struct SpectralDensityModel {
    dim: usize,
    kind: Kind,
    target: Target,
    real: bool,
    label: &'static str,
}

impl fmt::Debug for SpectralDensityModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpectralDensityModel")
            .field("dim", &self.dim)
            .field("kind", &self.label)
            .field("target", &self.target)
            .field("real", &self.real)
            .finish()
    }
}

fn is_real_matrix(m: &CMatrix) -> bool {
    m.iter().all(|z| z.im == 0.0)
}

impl SpectralDensityModel {
    pub fn from_spec(spec: &DensitySpec) -> Result<Self> {
        match spec {
            DensitySpec::Constant { matrix, target } => Self::constant(matrix_from_spec(matrix, "matrix")?, *target),
            DensitySpec::ScalarRational { rational, target } => Self::scalar_rational(rational.clone(), *target),
            DensitySpec::DiagonalRational { entries, target } => Self::diagonal_rational(entries.clone(), *target),
            DensitySpec::VectorMa { coefficients, target } => {
                let c = coefficients
                    .iter()
                    .map(|m| matrix_from_spec(m, "coefficients"))
                    .collect::<Result<Vec<_>>>()?;
                Self::vector_ma(c, *target)
            }
            DensitySpec::WhiteIncrementMatched { dimension } => Self::white_increment_matched(*dimension),
            DensitySpec::Tabulated {
                lambda,
                values,
                target,
                real,
            } => {
                let v = values
                    .iter()
                    .map(|m| matrix_from_spec(m, "values"))
                    .collect::<Result<Vec<_>>>()?;
                Self::tabulated(lambda.clone(), v, *target, *real)
            }
        }
    }

    /// `f = I / kernel`, so that the increment density is the identity.
    pub fn white_increment_matched(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("dimension", "must be positive"));
        }
        Ok(Self {
            dim,
            kind: Kind::Constant(CMatrix::identity(dim, dim)),
            target: Target::Increment,
            real: true,
            label: "white-increment-matched",
        })
    }

    pub fn constant(matrix: CMatrix, target: Target) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.nrows() != matrix.ncols() {
            return Err(invalid("matrix", "must be square and non-empty"));
        }
        Ok(Self {
            dim: matrix.nrows(),
            real: is_real_matrix(&matrix),
            kind: Kind::Constant(matrix),
            target,
            label: "constant",
        })
    }

    pub fn scalar_rational(r: RationalSpec, target: Target) -> Result<Self> {
        r.validate()?;
        Ok(Self {
            dim: 1,
            kind: Kind::Rational(vec![r]),
            target,
            real: true,
            label: "scalar-rational",
        })
    }

    pub fn diagonal_rational(entries: Vec<RationalSpec>, target: Target) -> Result<Self> {
        if entries.is_empty() {
            return Err(invalid("entries", "at least one diagonal entry is required"));
        }
        for e in &entries {
            e.validate()?;
        }
        Ok(Self {
            dim: entries.len(),
            kind: Kind::Rational(entries),
            target,
            real: true,
            label: "diagonal-rational",
        })
    }

    pub fn vector_ma(coefficients: Vec<CMatrix>, target: Target) -> Result<Self> {
        let dim = coefficients.first().map(|m| m.nrows()).unwrap_or(0);
        if dim == 0 || coefficients.iter().any(|m| m.nrows() != dim || m.ncols() != dim) {
            return Err(invalid("coefficients", "need square coefficient matrices of equal size"));
        }
        Ok(Self {
            dim,
            real: coefficients.iter().all(is_real_matrix),
            kind: Kind::VectorMa(coefficients),
            target,
            label: "vector-ma",
        })
    }

    pub fn tabulated(lambda: Vec<f64>, values: Vec<CMatrix>, target: Target, real: bool) -> Result<Self> {
        if lambda.len() < 2 || lambda.len() != values.len() {
            return Err(invalid("lambda", "need at least two nodes and one matrix per node"));
        }
        if lambda.windows(2).any(|w| !(w[1] > w[0])) || lambda[0] < -PI || *lambda.last().unwrap() > PI {
            return Err(invalid("lambda", "nodes must be strictly increasing inside [-pi, pi]"));
        }
        let dim = values[0].nrows();
        if dim == 0 || values.iter().any(|m| m.nrows() != dim || m.ncols() != dim) {
            return Err(invalid("values", "matrices must be square and of equal size"));
        }
        Ok(Self {
            dim,
            kind: Kind::Tabulated { lambda, values },
            target,
            real,
            label: "tabulated",
        })
    }

    /// Arbitrary evaluator; must be Hermitian PSD and thread-safe.
    pub fn custom(dim: usize, target: Target, real: bool, f: impl Fn(f64) -> CMatrix + Send + Sync + 'static) -> Self {
        Self {
            dim,
            kind: Kind::Custom(Arc::new(f)),
            target,
            real,
            label: "custom",
        }
    }

    /// Scalar evaluator convenience wrapper around [`Self::custom`].
    pub fn custom_scalar(target: Target, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self::custom(1, target, true, move |l| CMatrix::from_element(1, 1, C64::new(f(l), 0.0)))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn target(&self) -> Target {
        self.target
    }

    pub fn kind_label(&self) -> &'static str {
        self.label
    }

    /// Whether the generated sequence is real-valued, i.e. `f(-l) = conj f(l)`.
    pub fn is_real(&self) -> bool {
        self.real
    }

    /// Whether every evaluated matrix is diagonal.
    pub fn is_diagonal(&self) -> bool {
        match &self.kind {
            Kind::Rational(_) => true,
            Kind::Constant(m) => is_diagonal(m),
            Kind::Tabulated { values, .. } => values.iter().all(is_diagonal),
            _ => self.dim == 1,
        }
    }

    /// The specified matrix function (either `f` or `g`).
    pub fn raw(&self, lambda: f64) -> CMatrix {
        match &self.kind {
            Kind::Constant(m) => m.clone(),
            Kind::Rational(entries) => {
                let mut out = CMatrix::zeros(self.dim, self.dim);
                for (i, r) in entries.iter().enumerate() {
                    out[(i, i)] = C64::new(r.eval(lambda), 0.0);
                }
                out
            }
            Kind::VectorMa(coefs) => {
                let h = self.ma_factor_of(coefs, lambda);
                &h * h.adjoint()
            }
            Kind::Tabulated { lambda: nodes, values } => interpolate_periodic(nodes, values, lambda),
            Kind::Custom(f) => f(lambda),
        }
    }

    fn ma_factor_of(&self, coefs: &[CMatrix], lambda: f64) -> CMatrix {
        let mut h = CMatrix::zeros(self.dim, self.dim);
        for (m, c) in coefs.iter().enumerate() {
            h += c * C64::from_polar(1.0, -(m as f64) * lambda);
        }
        h
    }

    /// Causal factor `H` with `H H^* = raw`, when the kind provides one.
    pub fn causal_factor(&self, lambda: f64) -> Option<CMatrix> {
        match &self.kind {
            Kind::Rational(entries) => {
                let mut out = CMatrix::zeros(self.dim, self.dim);
                for (i, r) in entries.iter().enumerate() {
                    out[(i, i)] = r.factor(lambda);
                }
                Some(out)
            }
            Kind::VectorMa(coefs) => Some(self.ma_factor_of(coefs, lambda)),
            Kind::Constant(m) if self.label == "white-increment-matched" => Some(m.clone()),
            _ => None,
        }
    }

    /// Process density `f(lambda)`. For increment-target models this is
    /// `g / kernel`, infinite where the kernel vanishes.
    pub fn process_density(&self, kernel: &IncrementKernel, lambda: f64) -> CMatrix {
        match self.target {
            Target::Process => self.raw(lambda),
            Target::Increment => self.raw(lambda) / C64::new(kernel.value(lambda), 0.0),
        }
    }

    /// Increment density `g(lambda) = kernel(lambda) f(lambda)`.
    pub fn increment_density(&self, kernel: &IncrementKernel, lambda: f64) -> CMatrix {
        match self.target {
            Target::Process => self.raw(lambda) * C64::new(kernel.value(lambda), 0.0),
            Target::Increment => self.raw(lambda),
        }
    }

    /// `g(lambda)^{-1}`; the specified matrix must pass the condition ceiling.
    pub fn increment_density_inverse(&self, kernel: &IncrementKernel, lambda: f64, node: usize) -> Result<CMatrix> {
        let raw = self.raw(lambda);
        let (inv, _) = hermitian_inverse(&raw, CONDITION_CEILING).ok_or_else(|| Error::NearSingularDensity {
            node,
            lambda,
            condition: HermitianSpectrum::of(&raw).condition(),
        })?;
        Ok(match self.target {
            Target::Increment => inv,
            Target::Process => {
                let k = kernel.value(lambda);
                if k == 0.0 {
                    return Err(Error::NearSingularDensity {
                        node,
                        lambda,
                        condition: f64::INFINITY,
                    });
                }
                inv / C64::new(k, 0.0)
            }
        })
    }

    /// Check Hermitian PSD at every node, and `f(-l) = conj f(l)` for real models.
    pub fn validate_on_grid(&self, grid: &QuadratureGrid) -> Result<()> {
        let lambdas = grid.lambdas();
        let raws: Vec<CMatrix> = lambdas.par_iter().map(|&l| self.raw(l)).collect();
        for (m, f) in raws.iter().enumerate() {
            let scale = f.norm().max(f64::MIN_POSITIVE);
            if f.nrows() != self.dim || !f.iter().all(|z| z.is_finite()) {
                return Err(invalid("density", format!("non-finite or misshaped value at node {m}")));
            }
            if (f - f.adjoint()).norm() > 1e-10 * scale {
                return Err(invalid("density", format!("not Hermitian at lambda = {:.6}", lambdas[m])));
            }
            if self.dim > 1 && HermitianSpectrum::of(f).min() < -1e-10 * scale {
                return Err(invalid("density", format!("not positive semidefinite at lambda = {:.6}", lambdas[m])));
            }
            if self.dim == 1 && f[(0, 0)].re < 0.0 {
                return Err(invalid("density", format!("negative at lambda = {:.6}", lambdas[m])));
            }
            if self.real {
                let mirror = &raws[grid.mirror(m)];
                if (mirror - f.map(|z| z.conj())).norm() > 1e-10 * scale {
                    return Err(invalid(
                        "density",
                        format!("declared real but f(-l) != conj f(l) at lambda = {:.6}", lambdas[m]),
                    ));
                }
            }
        }
        Ok(())
    }
}

fn is_diagonal(m: &CMatrix) -> bool {
    (0..m.nrows()).all(|r| (0..m.ncols()).all(|c| r == c || m[(r, c)] == ZERO))
}

fn interpolate_periodic(nodes: &[f64], values: &[CMatrix], lambda: f64) -> CMatrix {
    let n = nodes.len();
    let pos = nodes.partition_point(|&x| x <= lambda);
    let (i0, i1, x0, x1) = if pos == 0 || pos == n {
        // wrap between the last node and the first node shifted by 2 pi
        let x0 = nodes[n - 1] - if pos == 0 { 2.0 * PI } else { 0.0 };
        let x1 = nodes[0] + if pos == n { 2.0 * PI } else { 0.0 };
        (n - 1, 0, x0, x1)
    } else {
        (pos - 1, pos, nodes[pos - 1], nodes[pos])
    };
    let w = if x1 > x0 { (lambda - x0) / (x1 - x0) } else { 0.0 };
    &values[i0] * C64::new(1.0 - w, 0.0) + &values[i1] * C64::new(w, 0.0)
}

// ---------------------------------------------------------------------------
// Node tables

/// Increment density and its inverse sampled on a quadrature grid.
#[derive(Debug, Clone)]
pub struct NodeTable {
    pub grid: QuadratureGrid,
    pub kernel: IncrementKernel,
    pub lambdas: Vec<f64>,
    pub g: Vec<CMatrix>,
    pub g_inv: Vec<CMatrix>,
    pub transfer: Vec<C64>,
}

impl NodeTable {
    pub fn build(model: &SpectralDensityModel, kernel: IncrementKernel, grid: QuadratureGrid) -> Result<Self> {
        let lambdas = grid.lambdas();
        let rows: Vec<Result<(CMatrix, CMatrix)>> = lambdas
            .par_iter()
            .enumerate()
            .map(|(m, &l)| {
                let g = model.increment_density(&kernel, l);
                let inv = model.increment_density_inverse(&kernel, l, m)?;
                Ok((g, inv))
            })
            .collect();
        let mut g = Vec::with_capacity(grid.nodes);
        let mut g_inv = Vec::with_capacity(grid.nodes);
        for r in rows {
            let (a, b) = r?;
            g.push(a);
            g_inv.push(b);
        }
        let transfer = lambdas.iter().map(|&l| kernel.transfer(l)).collect();
        Ok(Self {
            grid,
            kernel,
            lambdas,
            g,
            g_inv,
            transfer,
        })
    }

    /// Table from explicit increment-density samples (used by the minimax
    /// iteration, whose densities live on the grid only).
    pub fn from_samples(g: Vec<CMatrix>, kernel: IncrementKernel, grid: QuadratureGrid) -> Result<Self> {
        if g.len() != grid.nodes {
            return Err(Error::Dimension {
                expected: grid.nodes,
                got: g.len(),
            });
        }
        let lambdas = grid.lambdas();
        let g_inv = g
            .iter()
            .enumerate()
            .map(|(m, x)| {
                hermitian_inverse(x, CONDITION_CEILING)
                    .map(|(inv, _)| inv)
                    .ok_or_else(|| Error::NearSingularDensity {
                        node: m,
                        lambda: lambdas[m],
                        condition: HermitianSpectrum::of(x).condition(),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let transfer = lambdas.iter().map(|&l| kernel.transfer(l)).collect();
        Ok(Self {
            grid,
            kernel,
            lambdas,
            g,
            g_inv,
            transfer,
        })
    }

    pub fn dim(&self) -> usize {
        self.g[0].nrows()
    }

    /// `(1/2pi) int e^{-i lambda m} g^{-1}(lambda) d lambda`.
    pub fn inverse_coefficient(&self, m: i64) -> CMatrix {
        let k = self.dim();
        let vals: Vec<CMatrix> = (0..self.grid.nodes)
            .map(|i| &self.g_inv[i] * C64::from_polar(1.0, -(m as f64) * self.lambdas[i]))
            .collect();
        sum_nodes(&vals, k, k) * C64::new(self.grid.weight(), 0.0)
    }

    /// `R(j) = (1/2pi) int e^{i lambda j} g(lambda) d lambda` for `j = 0..count`.
    pub fn lag_covariances(&self, count: usize) -> Vec<CMatrix> {
        let k = self.dim();
        (0..count)
            .into_par_iter()
            .map(|j| {
                let vals: Vec<CMatrix> = (0..self.grid.nodes)
                    .map(|i| &self.g[i] * C64::from_polar(1.0, j as f64 * self.lambdas[i]))
                    .collect();
                sum_nodes(&vals, k, k) * C64::new(self.grid.weight(), 0.0)
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Minimality

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Minimality {
    pub finite: bool,
    pub value: f64,
    pub refined_value: f64,
    pub converged: bool,
}

fn minimality_integral(model: &SpectralDensityModel, kernel: &IncrementKernel, grid: &QuadratureGrid) -> Result<f64> {
    let lambdas = grid.lambdas();
    let traces: Vec<Result<f64>> = lambdas
        .par_iter()
        .enumerate()
        .map(|(m, &l)| match model.increment_density_inverse(kernel, l, m) {
            Ok(inv) => Ok(inv.trace().re),
            // a zero of the kernel at a node makes the integrand infinite
            Err(Error::NearSingularDensity { condition, .. }) if condition.is_infinite() && model.target() == Target::Process && kernel.value(l) == 0.0 => {
                Ok(f64::INFINITY)
            }
            Err(e) => Err(e),
        })
        .collect();
    let traces = traces.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(crate::linalg::pairwise_sum(&traces) * grid.weight())
}

/// Approximate `(1/2pi) int Tr[g^{-1}]` at `M` and `2M` nodes.
pub fn check_minimality(
    model: &SpectralDensityModel,
    kernel: &IncrementKernel,
    grid: &QuadratureGrid,
    divergence_ceiling: f64,
) -> Result<Minimality> {
    let value = minimality_integral(model, kernel, grid)?;
    let refined_value = minimality_integral(model, kernel, &grid.refined(2))?;
    let converged = value.is_finite() && refined_value.is_finite() && (refined_value - value).abs() < 1e-4 * value.abs();
    Ok(Minimality {
        finite: converged && refined_value < divergence_ceiling,
        value,
        refined_value,
        converged,
    })
}

// ---------------------------------------------------------------------------
// Block-Toeplitz operator

/// Hermitian block-Toeplitz matrix stored through its generators.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockToeplitzOperator {
    k: usize,
    /// `G_m` for `m = 0..J`; block `(j, l)` is `G_{j-l}` for `j >= l` and
    /// `G_{l-j}^*` otherwise.
    generators: Vec<CMatrix>,
}

impl BlockToeplitzOperator {
    pub fn from_generators(generators: Vec<CMatrix>) -> Result<Self> {
        let k = generators.first().map(|g| g.nrows()).ok_or(Error::EmptyInput("no generators"))?;
        if generators.iter().any(|g| g.nrows() != k || g.ncols() != k) {
            return Err(invalid("generators", "blocks must be square and of equal size"));
        }
        Ok(Self { k, generators })
    }

    pub fn identity(k: usize, j: usize) -> Self {
        let mut generators = vec![CMatrix::zeros(k, k); j];
        generators[0] = CMatrix::identity(k, k);
        Self { k, generators }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn lags(&self) -> usize {
        self.generators.len()
    }

    pub fn generators(&self) -> &[CMatrix] {
        &self.generators
    }

    pub fn block(&self, j: usize, l: usize) -> CMatrix {
        if j >= l {
            self.generators[j - l].clone()
        } else {
            self.generators[l - j].adjoint()
        }
    }

    /// Dense `(J K) x (J K)` matrix.
    pub fn assemble(&self) -> CMatrix {
        let (k, j) = (self.k, self.lags());
        let mut out = CMatrix::zeros(j * k, j * k);
        for r in 0..j {
            for c in 0..j {
                out.view_mut((r * k, c * k), (k, k)).copy_from(&self.block(r, c));
            }
        }
        out
    }

    /// Truncate to the leading `j` block rows.
    pub fn truncated(&self, j: usize) -> Self {
        Self {
            k: self.k,
            generators: self.generators[..j.min(self.lags())].to_vec(),
        }
    }
}

/// Generators of the operator acting on `c` in `F c = D^tau a`:
/// `G_m = [(1/2pi) int e^{-i lambda m} g^{-1}(lambda) d lambda]^T`.
pub fn toeplitz_from_table(table: &NodeTable, lags: usize) -> Result<BlockToeplitzOperator> {
    if lags == 0 {
        return Err(invalid("J", "at least one lag is required"));
    }
    let generators = (0..lags as i64)
        .into_par_iter()
        .map(|m| table.inverse_coefficient(m).transpose())
        .collect();
    BlockToeplitzOperator::from_generators(generators)
}

/// Verify minimality, then assemble the block-Toeplitz operator.
pub fn fourier_block_coeffs(
    model: &SpectralDensityModel,
    kernel: &IncrementKernel,
    lags: usize,
    grid: &QuadratureGrid,
) -> Result<BlockToeplitzOperator> {
    let min = check_minimality(model, kernel, grid, DIVERGENCE_CEILING)?;
    if !min.finite {
        return Err(Error::MinimalityNotVerified(format!(
            "integral {:.6e} at M = {} vs {:.6e} at 2M",
            min.value, grid.nodes, min.refined_value
        )));
    }
    let table = NodeTable::build(model, *kernel, *grid)?;
    toeplitz_from_table(&table, lags)
}

/// `(1/2pi) int e^{ij lambda} w(lambda) f(lambda) d lambda` where `w` is the
/// product of the two step-specific transfer factors.
pub fn structural_function(
    model: &SpectralDensityModel,
    params: &IncrementParams,
    j: i64,
    tau1: u32,
    tau2: u32,
    grid: &QuadratureGrid,
) -> CMatrix {
    let kernel = IncrementKernel::new(params.d, params.tau);
    let k = model.dim();
    let same = tau1 == tau2 && tau1 == params.tau;
    integrate_matrix(grid, k, k, |_, l| {
        let phase = C64::from_polar(1.0, j as f64 * l);
        if same {
            model.increment_density(&kernel, l) * phase
        } else {
            model.process_density(&kernel, l) * (kernel.cross(l, tau1, tau2) * phase)
        }
    })
}
