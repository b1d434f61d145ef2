//! Streaming softmax over score blocks, in the base-2 domain.
//!
//! Scores are expected pre-multiplied by `alpha * log2(e)` so every
//! exponential is a `2^x`. Two update rules are provided: the classical one
//! that rescales whenever the running max moves, and the conditional one
//! that keeps the stale max until the new block max exceeds it by more
//! than `tau`.

use std::fmt::Debug;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default rescale threshold, `log2(256)`.
pub const DEFAULT_TAU: f64 = 8.0;

/// Rows per warp for the uniform-branch predicate.
pub const WARP_ROWS: usize = 32;

/// Floating-point element type for softmax state (`f32` kernel-faithful,
/// `f64` oracle).
pub trait Real:
    Copy
    + Debug
    + PartialOrd
    + Default
    + Send
    + Sync
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::AddAssign
    + std::ops::MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    const NEG_INFINITY: Self;
    fn exp2(self) -> Self;
    fn log2(self) -> Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn max(self, other: Self) -> Self;
    fn mul_add(self, a: Self, b: Self) -> Self;
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const NEG_INFINITY: Self = <$t>::NEG_INFINITY;
            #[inline]
            fn exp2(self) -> Self {
                <$t>::exp2(self)
            }
            #[inline]
            fn log2(self) -> Self {
                <$t>::log2(self)
            }
            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            #[inline]
            fn mul_add(self, a: Self, b: Self) -> Self {
                <$t>::mul_add(self, a, b)
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);

/// Source of `2^x` for the probabilities of a block, plus the quantisation
/// applied when a probability is stored for the `P V` product.
pub trait ExpPath<T: Real> {
    /// `col` is the global key index of the entry.
    fn exp2(&self, x: T, col: usize) -> T;

    fn store_p(&self, p: T) -> T {
        p
    }
}

/// Native `exp2` of the element type, no quantisation.
#[derive(Debug, Clone, Copy, Default)]
pub struct NativeExp;

impl<T: Real> ExpPath<T> for NativeExp {
    #[inline]
    fn exp2(&self, x: T, _col: usize) -> T {
        x.exp2()
    }
}

/// Running statistics and output accumulator for one query row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxState<T> {
    /// Last applied max, base-2 score units. `-inf` until the first
    /// non-masked entry.
    pub m: T,
    pub ell: T,
    pub acc: Vec<T>,
    pub tau: T,
    pub n_rescales: usize,
    pub n_blocks: usize,
    /// Largest probability stored into `P` so far.
    pub max_stored_p: T,
    /// Largest exponent argument `s - m` seen so far.
    pub max_exp_arg: T,
}

/// Final per-row statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowStats {
    pub m_final: f64,
    pub ell_final: f64,
    /// `m_final + log2(ell_final)`; `-inf` for a fully masked row.
    pub lse: f64,
}

impl<T: Real> SoftmaxState<T> {
    pub fn new(d: usize, tau: T) -> Self {
        Self {
            m: T::NEG_INFINITY,
            ell: T::ZERO,
            acc: vec![T::ZERO; d],
            tau,
            n_rescales: 0,
            n_blocks: 0,
            max_stored_p: T::ZERO,
            max_exp_arg: T::NEG_INFINITY,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.acc.len()
    }

    fn check(&self, scores: &[T], v_block: &[&[T]]) -> Result<()> {
        if scores.is_empty() {
            return Err(Error::Shape("empty score block".into()));
        }
        if v_block.len() != scores.len() {
            return Err(Error::Shape(format!(
                "{} scores but {} value rows",
                scores.len(),
                v_block.len()
            )));
        }
        if let Some(r) = v_block.iter().find(|r| r.len() != self.acc.len()) {
            return Err(Error::Shape(format!(
                "value row of length {} for head dim {}",
                r.len(),
                self.acc.len()
            )));
        }
        Ok(())
    }

    /// Whether the conditional rule would take the rescale branch for a
    /// block whose max is `block_max`.
    pub fn needs_rescale(&self, block_max: T) -> bool {
        if block_max == T::NEG_INFINITY {
            return false;
        }
        self.m == T::NEG_INFINITY || block_max - self.m > self.tau
    }

    /// Classical update: the running max always tracks the true max.
    pub fn update_always_rescale(&mut self, scores: &[T], v_block: &[&[T]]) -> Result<()> {
        self.update_always_rescale_with(scores, v_block, 0, &NativeExp)
    }

    pub fn update_always_rescale_with<E: ExpPath<T>>(
        &mut self,
        scores: &[T],
        v_block: &[&[T]],
        col0: usize,
        exp: &E,
    ) -> Result<()> {
        self.check(scores, v_block)?;
        let block_max = row_max(scores);
        if block_max == T::NEG_INFINITY {
            return Ok(());
        }
        self.apply(scores, v_block, col0, exp, block_max > self.m, block_max);
        Ok(())
    }

    /// Conditional update: skip the rescale unless the block max exceeds
    /// the applied max by more than `tau`.
    pub fn update_conditional(&mut self, scores: &[T], v_block: &[&[T]]) -> Result<()> {
        self.update_conditional_with(scores, v_block, 0, &NativeExp)
    }

    pub fn update_conditional_with<E: ExpPath<T>>(
        &mut self,
        scores: &[T],
        v_block: &[&[T]],
        col0: usize,
        exp: &E,
    ) -> Result<()> {
        self.check(scores, v_block)?;
        let block_max = row_max(scores);
        if block_max == T::NEG_INFINITY {
            return Ok(());
        }
        let rescale = self.needs_rescale(block_max);
        self.apply(scores, v_block, col0, exp, rescale, block_max);
        Ok(())
    }

    /// Update with an externally decided branch (e.g. a warp-uniform vote).
    /// On the rescale branch the max moves to `max(m, block_max)`.
    pub fn update_with_decision<E: ExpPath<T>>(
        &mut self,
        scores: &[T],
        v_block: &[&[T]],
        col0: usize,
        exp: &E,
        rescale: bool,
    ) -> Result<()> {
        self.check(scores, v_block)?;
        let block_max = row_max(scores);
        if block_max == T::NEG_INFINITY {
            return Ok(());
        }
        // A row must never keep a max it has not reached yet.
        let rescale = rescale || self.m == T::NEG_INFINITY;
        self.apply(scores, v_block, col0, exp, rescale, block_max);
        Ok(())
    }

    fn apply<E: ExpPath<T>>(
        &mut self,
        scores: &[T],
        v_block: &[&[T]],
        col0: usize,
        exp: &E,
        rescale: bool,
        block_max: T,
    ) {
        self.n_blocks += 1;
        if rescale {
            let new_m = self.m.max(block_max);
            if self.m == T::NEG_INFINITY {
                // First data for this row: nothing to rescale.
                self.m = new_m;
            } else if new_m > self.m {
                let factor = (self.m - new_m).exp2();
                self.ell *= factor;
                self.acc.iter_mut().for_each(|a| *a *= factor);
                self.m = new_m;
                self.n_rescales += 1;
            }
        }
        let mut block_sum = T::ZERO;
        for (k, (&s, v)) in scores.iter().zip(v_block).enumerate() {
            if s == T::NEG_INFINITY {
                continue;
            }
            let arg = s - self.m;
            self.max_exp_arg = self.max_exp_arg.max(arg);
            let p = exp.exp2(arg, col0 + k);
            block_sum += p;
            let stored = exp.store_p(p);
            self.max_stored_p = self.max_stored_p.max(stored);
            for (a, &x) in self.acc.iter_mut().zip(v.iter()) {
                *a = stored.mul_add(x, *a);
            }
        }
        self.ell += block_sum;
    }

    /// Normalised output row and statistics. A row that never saw a
    /// non-masked entry yields zeros and `lse = -inf`.
    pub fn finalize(&self) -> (Vec<T>, RowStats) {
        if self.ell == T::ZERO {
            return (
                vec![T::ZERO; self.acc.len()],
                RowStats {
                    m_final: f64::NEG_INFINITY,
                    ell_final: 0.0,
                    lse: f64::NEG_INFINITY,
                },
            );
        }
        let out = self.acc.iter().map(|&a| a / self.ell).collect();
        let m = self.m.to_f64();
        let ell = self.ell.to_f64();
        (
            out,
            RowStats {
                m_final: m,
                ell_final: ell,
                lse: m + ell.log2(),
            },
        )
    }
}

fn row_max<T: Real>(scores: &[T]) -> T {
    scores.iter().fold(T::NEG_INFINITY, |m, &s| m.max(s))
}

/// True iff any row in the warp needs the rescale branch; the whole warp
/// then takes it.
pub fn warp_uniform_predicate(flags: &[bool]) -> bool {
    flags.iter().any(|&f| f)
}
