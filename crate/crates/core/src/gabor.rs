//! Real-valued Gabor kernels, their analytic parameter gradients, and the
//! 5-frequency by 8-orientation initialization bank.
//!
//! A kernel of odd size `k` is sampled on an integer grid centred on the
//! middle pixel, `x` growing rightward and `y` growing downward:
//!
//! ```text
//! x' =  x cos θ + y sin θ
//! y' = -x sin θ + y cos θ
//! g  = exp(-(x'² + y'²) / 2σ²) · cos(ω x' + ψ)
//! ```

use std::f64::consts::PI;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub const SIGMA_MIN: f64 = 1e-3;
pub const OMEGA_MIN: f64 = 1e-3;

pub const BANK_FREQUENCIES: usize = 5;
pub const BANK_ORIENTATIONS: usize = 8;
pub const BANK_SIZE: usize = BANK_FREQUENCIES * BANK_ORIENTATIONS;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaborParams {
    /// Spatial frequency, radians per pixel.
    pub omega: f64,
    /// Orientation of the wave vector.
    pub theta: f64,
    /// Phase offset.
    pub psi: f64,
    /// Envelope width in pixels.
    pub sigma: f64,
}

impl GaborParams {
    pub fn new(omega: f64, theta: f64, psi: f64, sigma: f64) -> Self {
        GaborParams {
            omega,
            theta,
            psi,
            sigma,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.omega >= OMEGA_MIN
            && self.sigma >= SIGMA_MIN
            && self.theta.is_finite()
            && self.psi.is_finite()
            && self.omega.is_finite()
            && self.sigma.is_finite()
    }
}

pub fn eval_gabor(x: f64, y: f64, p: &GaborParams) -> f64 {
    let (sin_t, cos_t) = p.theta.sin_cos();
    let xr = x * cos_t + y * sin_t;
    let yr = -x * sin_t + y * cos_t;
    let envelope = (-(xr * xr + yr * yr) / (2.0 * p.sigma * p.sigma)).exp();
    envelope * (p.omega * xr + p.psi).cos()
}

fn check_kernel_size(k: usize) -> Result<()> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "Gabor kernel size must be odd and positive, got {k}"
        )));
    }
    Ok(())
}

/// Offset of pixel index `i` from the kernel centre.
#[inline]
fn centred(i: usize, k: usize) -> f64 {
    i as f64 - ((k - 1) / 2) as f64
}

/// Row-major `k x k` kernel.
pub fn make_kernel(p: &GaborParams, k: usize) -> Result<Vec<f64>> {
    check_kernel_size(k)?;
    let mut out = Vec::with_capacity(k * k);
    for r in 0..k {
        for c in 0..k {
            out.push(eval_gabor(centred(c, k), centred(r, k), p));
        }
    }
    Ok(out)
}

/// Per-pixel partial derivatives of a kernel, each row-major `k x k`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelGrads {
    pub omega: Vec<f64>,
    pub theta: Vec<f64>,
    pub psi: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Closed-form derivatives of every kernel pixel. With `E` the envelope and
/// `C`, `S` the cosine and sine of `ω x' + ψ`:
///
/// ```text
/// ∂g/∂ω = -E S x'
/// ∂g/∂θ = -E S ω y'          (dx'/dθ = y', dy'/dθ = -x'; x'²+y'² is rotation invariant)
/// ∂g/∂ψ = -E S
/// ∂g/∂σ =  E C (x'² + y'²) / σ³
/// ```
pub fn kernel_param_grads(p: &GaborParams, k: usize) -> Result<KernelGrads> {
    check_kernel_size(k)?;
    let n = k * k;
    let mut grads = KernelGrads {
        omega: Vec::with_capacity(n),
        theta: Vec::with_capacity(n),
        psi: Vec::with_capacity(n),
        sigma: Vec::with_capacity(n),
    };
    let (sin_t, cos_t) = p.theta.sin_cos();
    let sigma2 = p.sigma * p.sigma;
    let sigma3 = sigma2 * p.sigma;
    for r in 0..k {
        let y = centred(r, k);
        for c in 0..k {
            let x = centred(c, k);
            let xr = x * cos_t + y * sin_t;
            let yr = -x * sin_t + y * cos_t;
            let radius2 = xr * xr + yr * yr;
            let envelope = (-radius2 / (2.0 * sigma2)).exp();
            let (s, cc) = (p.omega * xr + p.psi).sin_cos();
            grads.omega.push(-envelope * s * xr);
            grads.theta.push(-envelope * s * p.omega * yr);
            grads.psi.push(-envelope * s);
            grads.sigma.push(envelope * cc * radius2 / sigma3);
        }
    }
    Ok(grads)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BankEntry {
    pub omega: f64,
    pub theta: f64,
}

/// 40 `(ω, θ)` pairs, frequency-major: `ω_n = (π/2)·√2^-(n-1)` for n = 1..5,
/// `θ_m = (π/8)(m-1)` for m = 1..8.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    entries: Vec<BankEntry>,
}

impl FilterBank {
    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry for 1-based frequency index `n` and orientation index `m`.
    pub fn entry(&self, n: usize, m: usize) -> BankEntry {
        self.entries[(n - 1) * BANK_ORIENTATIONS + (m - 1)]
    }
}

pub fn build_filter_bank() -> FilterBank {
    let mut entries = Vec::with_capacity(BANK_SIZE);
    for n in 0..BANK_FREQUENCIES {
        let omega = PI / 2.0 * std::f64::consts::SQRT_2.powi(-(n as i32));
        for m in 0..BANK_ORIENTATIONS {
            entries.push(BankEntry {
                omega,
                theta: PI / 8.0 * m as f64,
            });
        }
    }
    FilterBank { entries }
}

/// One independent parameter quadruple per `(out, in)` kernel slice, stored
/// out-channel major.
#[derive(Clone, Debug, PartialEq)]
pub struct GaborParamSet {
    c_out: usize,
    c_in: usize,
    kernel_size: usize,
    params: Vec<GaborParams>,
}

impl GaborParamSet {
    pub fn new(
        c_out: usize,
        c_in: usize,
        kernel_size: usize,
        params: Vec<GaborParams>,
    ) -> Result<Self> {
        check_kernel_size(kernel_size)?;
        if params.len() != c_out * c_in {
            return Err(Error::Shape(format!(
                "{} Gabor parameter entries for {c_out}x{c_in} slices",
                params.len()
            )));
        }
        if let Some((i, p)) = params.iter().enumerate().find(|(_, p)| !p.is_valid()) {
            return Err(Error::InvalidArgument(format!(
                "Gabor slice {i} has invalid parameters {p:?}"
            )));
        }
        Ok(GaborParamSet {
            c_out,
            c_in,
            kernel_size,
            params,
        })
    }

    /// Checks dimensions only; entries may violate the parameter bounds.
    pub(crate) fn from_parts_unchecked(
        c_out: usize,
        c_in: usize,
        kernel_size: usize,
        params: Vec<GaborParams>,
    ) -> Result<Self> {
        check_kernel_size(kernel_size)?;
        if params.len() != c_out * c_in {
            return Err(Error::Shape(format!(
                "{} Gabor parameter entries for {c_out}x{c_in} slices",
                params.len()
            )));
        }
        Ok(GaborParamSet {
            c_out,
            c_in,
            kernel_size,
            params,
        })
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn params(&self) -> &[GaborParams] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [GaborParams] {
        &mut self.params
    }

    pub fn get(&self, out: usize, input: usize) -> &GaborParams {
        &self.params[out * self.c_in + input]
    }

    /// Synthesizes the full `(c_out, c_in, k, k)` kernel tensor.
    pub fn materialize(&self) -> Tensor4 {
        let k = self.kernel_size;
        let mut data = Vec::with_capacity(self.params.len() * k * k);
        for p in &self.params {
            data.extend(make_kernel(p, k).expect("kernel size validated at construction"));
        }
        Tensor4::from_vec([self.c_out, self.c_in, k, k], data).expect("dense parameter table")
    }
}

/// Slot `s` (out-major, then in) takes bank entry `s mod 40`, `σ = π/ω`, and
/// `ψ ~ U(0, π)` from a generator seeded with `seed`.
pub fn init_param_set(c_out: usize, c_in: usize, k: usize, seed: u64) -> Result<GaborParamSet> {
    if c_out == 0 || c_in == 0 {
        return Err(Error::InvalidArgument(
            "Gabor layer needs at least one input and one output channel".into(),
        ));
    }
    let bank = build_filter_bank();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = (0..c_out * c_in)
        .map(|slot| {
            let entry = bank.entries[slot % BANK_SIZE];
            GaborParams {
                omega: entry.omega,
                theta: entry.theta,
                psi: rng.random_range(0.0..PI),
                sigma: PI / entry.omega,
            }
        })
        .collect();
    GaborParamSet::new(c_out, c_in, k, params)
}
