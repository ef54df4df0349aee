//! Orthonormal 2-D DCT-II / DCT-III and binary frequency-band masks.
//!
//! The transform is applied separably as `C_h · X · C_wᵀ`, where `C_n` is the
//! orthonormal DCT-II basis matrix of size `n`. Basis matrices are built once
//! per size and shared across threads.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, OnceLock, RwLock};

use crate::error::{Error, Result};
use crate::linalg::{gemm, mat, mat_t};
use crate::plane::Plane;

/// Default low-frequency band fraction per axis.
pub const DEFAULT_LOW_FRACTION: f64 = 0.025;

type Basis = Arc<[f64]>;

fn basis_cache() -> &'static RwLock<HashMap<usize, Basis>> {
    static CACHE: OnceLock<RwLock<HashMap<usize, Basis>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

/// Orthonormal DCT-II matrix, row `k` = frequency, column `i` = sample:
/// `C[k][i] = a_k · cos(π (2i + 1) k / 2n)` with `a_0 = √(1/n)`, `a_k = √(2/n)`.
pub fn basis(n: usize) -> Basis {
    assert!(n > 0, "DCT basis of size 0");
    if let Some(b) = basis_cache().read().expect("basis cache poisoned").get(&n) {
        return Arc::clone(b);
    }
    let mut cache = basis_cache().write().expect("basis cache poisoned");
    Arc::clone(cache.entry(n).or_insert_with(|| build_basis(n)))
}

fn build_basis(n: usize) -> Basis {
    let nf = n as f64;
    let mut m = Vec::with_capacity(n * n);
    for k in 0..n {
        let scale = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        for i in 0..n {
            m.push(scale * (PI * (2 * i + 1) as f64 * k as f64 / (2.0 * nf)).cos());
        }
    }
    m.into()
}

/// Forward transform of one row-major `h`x`w` plane into `out`.
pub(crate) fn dct2_raw(x: &[f64], h: usize, w: usize, out: &mut [f64]) {
    let ch = basis(h);
    let cw = basis(w);
    let mut tmp = vec![0.0; h * w];
    // tmp = X · C_wᵀ, out = C_h · tmp
    gemm(h, w, w, mat(x), mat_t(&cw), 0.0, &mut tmp);
    gemm(h, h, w, mat(&ch), mat(&tmp), 0.0, out);
}

/// Inverse transform (DCT-III) of one row-major `h`x`w` plane into `out`.
pub(crate) fn idct2_raw(s: &[f64], h: usize, w: usize, out: &mut [f64]) {
    let ch = basis(h);
    let cw = basis(w);
    let mut tmp = vec![0.0; h * w];
    // tmp = S · C_w, out = C_hᵀ · tmp
    gemm(h, w, w, mat(s), mat(&cw), 0.0, &mut tmp);
    gemm(h, h, w, mat_t(&ch), mat(&tmp), 0.0, out);
}

/// Orthonormal DCT-II coefficients of a plane. Index `(0, 0)` is DC.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    coeffs: Plane,
}

impl Spectrum {
    pub fn from_coeffs(coeffs: Plane) -> Result<Self> {
        if !coeffs.is_finite() {
            return Err(Error::InvalidInput("spectrum has non-finite coefficients".into()));
        }
        Ok(Self { coeffs })
    }

    pub fn coeffs(&self) -> &Plane {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Plane {
        self.coeffs
    }

    pub fn height(&self) -> usize {
        self.coeffs.height()
    }

    pub fn width(&self) -> usize {
        self.coeffs.width()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.coeffs.shape()
    }

    /// Elementwise sum of two spectra of equal shape.
    pub fn add(&self, other: &Spectrum) -> Result<Spectrum> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "cannot add spectra {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self
            .coeffs
            .as_slice()
            .iter()
            .zip(other.coeffs.as_slice())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Spectrum {
            coeffs: Plane::new(self.height(), self.width(), data)?,
        })
    }
}

pub fn dct2(x: &Plane) -> Result<Spectrum> {
    if !x.is_finite() {
        return Err(Error::InvalidInput("dct2 input has non-finite values".into()));
    }
    let (h, w) = x.shape();
    let mut out = vec![0.0; h * w];
    dct2_raw(x.as_slice(), h, w, &mut out);
    Ok(Spectrum {
        coeffs: Plane::new(h, w, out)?,
    })
}

pub fn idct2(s: &Spectrum) -> Result<Plane> {
    if !s.coeffs.is_finite() {
        return Err(Error::InvalidInput("idct2 input has non-finite values".into()));
    }
    let (h, w) = s.shape();
    let mut out = vec![0.0; h * w];
    idct2_raw(s.coeffs.as_slice(), h, w, &mut out);
    Plane::new(h, w, out)
}

/// Complementary binary low/high band filters over a DCT coefficient grid.
///
/// The low band is the corner block `u < rows`, `v < cols` with
/// `rows = ceil(low_fraction · h)` and `cols = ceil(low_fraction · w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandMask {
    low: Plane,
    high: Plane,
    low_fraction: f64,
    rows: usize,
    cols: usize,
}

/// Side of the low-band block along an axis of length `n`.
///
/// The product is nudged down by 1e-9 before the ceiling so that fractions
/// like 0.025 (not exact in binary) give 5 on a 200-long axis, not 6.
pub fn band_extent(n: usize, low_fraction: f64) -> usize {
    ((low_fraction * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

pub fn make_band_mask(h: usize, w: usize, low_fraction: f64) -> Result<BandMask> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!("band mask size {h}x{w}")));
    }
    if !(0.0..=1.0).contains(&low_fraction) {
        return Err(Error::InvalidArgument(format!(
            "low_fraction {low_fraction} outside [0, 1]"
        )));
    }
    let rows = band_extent(h, low_fraction);
    let cols = band_extent(w, low_fraction);
    let low = Plane::from_fn(h, w, |u, v| if u < rows && v < cols { 1.0 } else { 0.0 });
    let high = low.map(|m| 1.0 - m);
    Ok(BandMask {
        low,
        high,
        low_fraction,
        rows,
        cols,
    })
}

impl BandMask {
    pub fn low(&self) -> &Plane {
        &self.low
    }

    pub fn high(&self) -> &Plane {
        &self.high
    }

    pub fn low_fraction(&self) -> f64 {
        self.low_fraction
    }

    /// `(rows, cols)` of the low-frequency corner block.
    pub fn block(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn in_low_band(&self, u: usize, v: usize) -> bool {
        u < self.rows && v < self.cols
    }
}

pub fn apply_mask(s: &Spectrum, m: &Plane) -> Result<Spectrum> {
    if s.shape() != m.shape() {
        return Err(Error::Shape(format!(
            "mask {:?} does not match spectrum {:?}",
            m.shape(),
            s.shape()
        )));
    }
    let data = s
        .coeffs
        .as_slice()
        .iter()
        .zip(m.as_slice())
        .map(|(c, k)| c * k)
        .collect();
    Spectrum::from_coeffs(Plane::new(s.height(), s.width(), data)?)
}
