use std::fmt;

/// Tropical semiring element: `⊕ = min`, `⊗ = +`, `0̄ = +∞`, `1̄ = 0`.
///
/// Values are `−ln` probabilities. Backoff weights of a language model can
/// be slightly negative, so any non-NaN real is accepted.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Weight(f64);

impl Weight {
    pub fn new(value: f64) -> Self {
        assert!(!value.is_nan(), "tropical weight cannot be NaN");
        assert!(value != f64::NEG_INFINITY, "tropical weight cannot be -inf");
        Self(value)
    }

    pub const fn zero() -> Self {
        Self(f64::INFINITY)
    }

    pub const fn one() -> Self {
        Self(0.0)
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == f64::INFINITY
    }

    /// `⊕`: minimum.
    pub fn plus(self, other: Self) -> Self {
        if other.0 < self.0 {
            other
        } else {
            self
        }
    }

    /// `⊗`: addition, with `0̄` absorbing.
    pub fn times(self, other: Self) -> Self {
        if self.is_zero() || other.is_zero() {
            Self::zero()
        } else {
            Self(self.0 + other.0)
        }
    }

    /// Weight of probability `p`.
    pub fn from_prob(p: f64) -> Self {
        if p <= 0.0 {
            Self::zero()
        } else {
            Self(-p.ln())
        }
    }

    pub fn to_prob(self) -> f64 {
        (-self.0).exp()
    }

    pub fn approx_eq(self, other: Self, tol: f64) -> bool {
        (self.is_zero() && other.is_zero()) || (self.0 - other.0).abs() <= tol
    }

    /// Grid key used to compare weights inside determinization subsets and
    /// minimization signatures.
    pub(crate) fn quantize(self) -> i64 {
        if self.is_zero() {
            i64::MAX
        } else {
            (self.0 * 1e9).round() as i64
        }
    }
}

impl fmt::Display for Weight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_zero() {
            write!(f, "Infinity")
        } else {
            write!(f, "{}", self.0)
        }
    }
}
