use crate::error::{HyprError, Result};
use crate::scalar::Scalar;

/// Largest supported per-neuron state dimension.
pub const MAX_K: usize = 4;

/// Dense k×k matrix, k ≤ 4, stored row-major with a fixed stride of 4.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatK<T> {
    k: usize,
    e: [T; 16],
}

/// Row vector of length k ≤ 4.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VecK<T> {
    k: usize,
    e: [T; 4],
}

fn check_k(k: usize) -> Result<()> {
    if (1..=MAX_K).contains(&k) {
        Ok(())
    } else {
        Err(HyprError::dim(format!(
            "state dimension {k} outside 1..={MAX_K}"
        )))
    }
}

impl<T: Scalar> MatK<T> {
    pub fn zeros(k: usize) -> Self {
        assert!(
            (1..=MAX_K).contains(&k),
            "state dimension {k} outside 1..={MAX_K}"
        );
        MatK {
            k,
            e: [T::zero(); 16],
        }
    }

    pub fn identity(k: usize) -> Self {
        let mut m = Self::zeros(k);
        for i in 0..k {
            m.e[i * 4 + i] = T::one();
        }
        m
    }

    pub fn scaled_identity(k: usize, c: T) -> Self {
        let mut m = Self::zeros(k);
        for i in 0..k {
            m.e[i * 4 + i] = c;
        }
        m
    }

    /// Builds from row-major entries; `rows.len()` must be k*k.
    pub fn from_rows(k: usize, rows: &[T]) -> Result<Self> {
        check_k(k)?;
        if rows.len() != k * k {
            return Err(HyprError::dim(format!(
                "expected {} entries for a {k}x{k} matrix, got {}",
                k * k,
                rows.len()
            )));
        }
        let mut m = Self::zeros(k);
        for r in 0..k {
            for c in 0..k {
                m.e[r * 4 + c] = rows[r * k + c];
            }
        }
        Ok(m)
    }

    #[inline(always)]
    pub fn k(&self) -> usize {
        self.k
    }

    #[inline(always)]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.e[r * 4 + c]
    }

    #[inline(always)]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.e[r * 4 + c] = v;
    }

    #[inline(always)]
    pub fn row(&self, r: usize) -> &[T] {
        &self.e[r * 4..r * 4 + self.k]
    }

    #[inline(always)]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let k = self.k;
        &mut self.e[r * 4..r * 4 + k]
    }

    pub fn is_finite(&self) -> bool {
        (0..self.k).all(|r| self.row(r).iter().all(|v| v.is_finite()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        let mut worst = T::zero();
        for r in 0..self.k {
            for c in 0..self.k {
                worst = worst.max((self.get(r, c) - other.get(r, c)).abs());
            }
        }
        worst
    }

    /// `self · rhs`, assuming equal k (checked in debug builds).
    #[inline(always)]
    pub fn mul(&self, rhs: &Self) -> Self {
        debug_assert_eq!(self.k, rhs.k);
        MatK {
            k: self.k,
            e: match self.k {
                1 => mul_fixed::<T, 1>(&self.e, &rhs.e),
                2 => mul_fixed::<T, 2>(&self.e, &rhs.e),
                3 => mul_fixed::<T, 3>(&self.e, &rhs.e),
                _ => mul_fixed::<T, 4>(&self.e, &rhs.e),
            },
        }
    }

    /// Column vector product `self · v`.
    #[inline(always)]
    pub fn mul_col(&self, v: &VecK<T>) -> VecK<T> {
        debug_assert_eq!(self.k, v.k);
        let mut out = VecK::zeros(self.k);
        for r in 0..self.k {
            let mut acc = T::zero();
            for c in 0..self.k {
                acc += self.e[r * 4 + c] * v.e[c];
            }
            out.e[r] = acc;
        }
        out
    }
}

#[inline(always)]
fn mul_fixed<T: Scalar, const K: usize>(a: &[T; 16], b: &[T; 16]) -> [T; 16] {
    let mut out = [T::zero(); 16];
    for r in 0..K {
        for c in 0..K {
            let mut acc = a[r * 4] * b[c];
            for j in 1..K {
                acc += a[r * 4 + j] * b[j * 4 + c];
            }
            out[r * 4 + c] = acc;
        }
    }
    out
}

impl<T: Scalar> VecK<T> {
    pub fn zeros(k: usize) -> Self {
        assert!(
            (1..=MAX_K).contains(&k),
            "state dimension {k} outside 1..={MAX_K}"
        );
        VecK {
            k,
            e: [T::zero(); 4],
        }
    }

    pub fn from_slice(v: &[T]) -> Result<Self> {
        check_k(v.len())?;
        let mut out = Self::zeros(v.len());
        out.e[..v.len()].copy_from_slice(v);
        Ok(out)
    }

    /// Unit vector along coordinate `i`.
    pub fn unit(k: usize, i: usize) -> Self {
        let mut v = Self::zeros(k);
        v.e[i] = T::one();
        v
    }

    #[inline(always)]
    pub fn k(&self) -> usize {
        self.k
    }

    #[inline(always)]
    pub fn as_slice(&self) -> &[T] {
        &self.e[..self.k]
    }

    #[inline(always)]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        let k = self.k;
        &mut self.e[..k]
    }

    #[inline(always)]
    pub fn get(&self, i: usize) -> T {
        self.e[i]
    }

    #[inline(always)]
    pub fn set(&mut self, i: usize, v: T) {
        self.e[i] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.as_slice().iter().all(|v| v.is_finite())
    }

    #[inline(always)]
    pub fn dot(&self, other: &Self) -> T {
        debug_assert_eq!(self.k, other.k);
        let mut acc = T::zero();
        for i in 0..self.k {
            acc += self.e[i] * other.e[i];
        }
        acc
    }

    /// Row vector times matrix: `self · m`.
    #[inline(always)]
    pub fn mul_mat(&self, m: &MatK<T>) -> Self {
        debug_assert_eq!(self.k, m.k);
        let mut out = VecK::zeros(self.k);
        for c in 0..self.k {
            let mut acc = T::zero();
            for r in 0..self.k {
                acc += self.e[r] * m.e[r * 4 + c];
            }
            out.e[c] = acc;
        }
        out
    }

    #[inline(always)]
    pub fn add(&self, other: &Self) -> Self {
        debug_assert_eq!(self.k, other.k);
        let mut out = *self;
        for i in 0..self.k {
            out.e[i] += other.e[i];
        }
        out
    }

    pub fn scale(&self, c: T) -> Self {
        let mut out = *self;
        for i in 0..self.k {
            out.e[i] *= c;
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        let mut worst = T::zero();
        for i in 0..self.k {
            worst = worst.max((self.e[i] - other.e[i]).abs());
        }
        worst
    }
}

/// Element of the reverse scan: a transition factor and an additive row
/// vector. Composition follows row-vector convention,
/// `(a.m, a.v) • (b.m, b.v) = (a.m · b.m, a.v · b.m + b.v)`,
/// so the accumulated `v` after `…• (A, ℓ)` is `v_prev · A + ℓ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanPair<T> {
    pub m: MatK<T>,
    pub v: VecK<T>,
}

impl<T: Scalar> ScanPair<T> {
    pub fn new(m: MatK<T>, v: VecK<T>) -> Result<Self> {
        if m.k != v.k {
            return Err(HyprError::dim(format!(
                "scan pair with {}x{} matrix and length-{} vector",
                m.k, m.k, v.k
            )));
        }
        Ok(ScanPair { m, v })
    }

    pub fn identity(k: usize) -> Self {
        ScanPair {
            m: MatK::identity(k),
            v: VecK::zeros(k),
        }
    }

    #[inline(always)]
    pub fn combine(&self, rhs: &Self) -> Self {
        ScanPair {
            m: self.m.mul(&rhs.m),
            v: self.v.mul_mat(&rhs.m).add(&rhs.v),
        }
    }
}

/// Checked matrix product.
pub fn matk_mul<T: Scalar>(a: &MatK<T>, b: &MatK<T>) -> Result<MatK<T>> {
    if a.k != b.k {
        return Err(HyprError::dim(format!(
            "cannot multiply {}x{} by {}x{}",
            a.k, a.k, b.k, b.k
        )));
    }
    Ok(a.mul(b))
}
