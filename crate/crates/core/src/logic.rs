//! Mixed three-valued logic and the Boolean/real bridge.
//!
//! Logic values embed into the reals as `TRUE ↦ +1`, `FALSE ↦ −1`, and the
//! neutral `ZERO ↦ 0`. Mixing a logic value with a real through `xnor` keeps
//! the real's magnitude and multiplies its sign, which is what lets Boolean
//! layers reuse ordinary linear algebra.

use crate::{Error, Result};

/// A value of the mixed logic domain `{TRUE, FALSE} ∪ {0}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Trilean {
    True,
    False,
    Zero,
}

impl Trilean {
    pub fn negate(self) -> Self {
        match self {
            Trilean::True => Trilean::False,
            Trilean::False => Trilean::True,
            Trilean::Zero => Trilean::Zero,
        }
    }

    pub fn magnitude(self) -> u8 {
        match self {
            Trilean::Zero => 0,
            _ => 1,
        }
    }

    /// Embedding into `{−1, 0, +1}`.
    pub fn embed(self) -> f64 {
        match self {
            Trilean::True => 1.0,
            Trilean::False => -1.0,
            Trilean::Zero => 0.0,
        }
    }

    /// Three-valued xnor: Boolean xnor on `{TRUE, FALSE}`, `ZERO` otherwise.
    pub fn xnor(self, other: Trilean) -> Trilean {
        match (self, other) {
            (Trilean::Zero, _) | (_, Trilean::Zero) => Trilean::Zero,
            (a, b) if a == b => Trilean::True,
            _ => Trilean::False,
        }
    }
}

impl From<BoolWeight> for Trilean {
    fn from(w: BoolWeight) -> Self {
        if w.0 {
            Trilean::True
        } else {
            Trilean::False
        }
    }
}

/// A Boolean weight. `TRUE` embeds to `+1`, `FALSE` to `−1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BoolWeight(pub bool);

impl BoolWeight {
    pub const TRUE: BoolWeight = BoolWeight(true);
    pub const FALSE: BoolWeight = BoolWeight(false);

    #[inline]
    pub fn embed(self) -> f64 {
        if self.0 {
            1.0
        } else {
            -1.0
        }
    }

    #[inline]
    pub fn negate(self) -> Self {
        BoolWeight(!self.0)
    }
}

impl std::ops::Not for BoolWeight {
    type Output = BoolWeight;
    fn not(self) -> BoolWeight {
        self.negate()
    }
}

/// Logic projector: `TRUE` iff `x > 0`, `FALSE` iff `x < 0`, `ZERO` for ±0.
pub fn project(x: f64) -> Result<Trilean> {
    if !x.is_finite() {
        return Err(Error::NonFinite("project"));
    }
    Ok(if x > 0.0 {
        Trilean::True
    } else if x < 0.0 {
        Trilean::False
    } else {
        Trilean::Zero
    })
}

/// `xnor(w, x) = e(w)·x`.
#[inline]
pub fn xnor_mixed(w: BoolWeight, x: f64) -> f64 {
    if w.0 {
        x
    } else {
        -x
    }
}

/// `xor(w, x) = −xnor(w, x)`.
#[inline]
pub fn xor_mixed(w: BoolWeight, x: f64) -> f64 {
    -xnor_mixed(w, x)
}

/// Sign part of the weight-update rule: true iff the signal projects onto the
/// same logic value as the weight. A zero signal never flips.
#[inline]
pub fn flip_decision(q_signal: f64, w: BoolWeight) -> bool {
    if w.0 {
        q_signal > 0.0
    } else {
        q_signal < 0.0
    }
}
