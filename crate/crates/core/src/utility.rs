//! Built-in utility functions and their convex conjugates.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UtilityError {
    #[error("argument {0} is outside the domain (0, ∞)")]
    Domain(f64),
    #[error("power utility needs p < 1 and p ≠ 0, got {0}")]
    BadExponent(f64),
}

/// `Log` is `ln x`; `Power { p }` is `x^p / p` with `p < 1`, `p ≠ 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Utility {
    Log,
    Power { p: f64 },
}

impl Utility {
    pub fn power(p: f64) -> Result<Self, UtilityError> {
        if !(p.is_finite() && p < 1.0 && p != 0.0) {
            return Err(UtilityError::BadExponent(p));
        }
        Ok(Utility::Power { p })
    }

    fn check(x: f64) -> Result<f64, UtilityError> {
        if x > 0.0 && x.is_finite() {
            Ok(x)
        } else {
            Err(UtilityError::Domain(x))
        }
    }

    pub fn value(&self, x: f64) -> Result<f64, UtilityError> {
        let x = Self::check(x)?;
        Ok(self.value_unchecked(x))
    }

    pub fn deriv(&self, x: f64) -> Result<f64, UtilityError> {
        let x = Self::check(x)?;
        Ok(match *self {
            Utility::Log => 1.0 / x,
            Utility::Power { p } => x.powf(p - 1.0),
        })
    }

    pub fn second_deriv(&self, x: f64) -> Result<f64, UtilityError> {
        let x = Self::check(x)?;
        Ok(match *self {
            Utility::Log => -1.0 / (x * x),
            Utility::Power { p } => (p - 1.0) * x.powf(p - 2.0),
        })
    }

    /// `(U′)⁻¹(y)`.
    pub fn inverse_deriv(&self, y: f64) -> Result<f64, UtilityError> {
        let y = Self::check(y)?;
        Ok(match *self {
            Utility::Log => 1.0 / y,
            Utility::Power { p } => y.powf(1.0 / (p - 1.0)),
        })
    }

    /// `Ũ(y) = sup_{x>0} (U(x) − xy)` in closed form.
    pub fn conjugate(&self, y: f64) -> Result<f64, UtilityError> {
        let y = Self::check(y)?;
        Ok(match *self {
            Utility::Log => -y.ln() - 1.0,
            Utility::Power { p } => (1.0 - p) / p * y.powf(p / (p - 1.0)),
        })
    }

    /// Exponent of the power function equal to `−Ũ`: for `x^p/p` the negated
    /// conjugate is `y^{p'}/p'` with `p' = p/(p−1)`; for `ln` it is `ln y + 1`.
    pub fn conjugate_exponent(&self) -> Option<f64> {
        match *self {
            Utility::Log => None,
            Utility::Power { p } => Some(p / (p - 1.0)),
        }
    }

    /// Limiting asymptotic elasticity `lim sup x U′(x)/U(x)`.
    pub fn asymptotic_elasticity(&self) -> f64 {
        match *self {
            Utility::Log => 0.0,
            Utility::Power { p } => p,
        }
    }

    /// Sup of `x U′(x)/U(x)` over a log grid on `[10², 10⁸]`.
    pub fn elasticity_on_grid(&self) -> f64 {
        (0..=600)
            .map(|k| 10f64.powf(2.0 + 6.0 * k as f64 / 600.0))
            .map(|x| x * self.deriv(x).unwrap() / self.value_unchecked(x))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub(crate) fn value_unchecked(&self, x: f64) -> f64 {
        match *self {
            Utility::Log => x.ln(),
            Utility::Power { p } => x.powf(p) / p,
        }
    }

    pub(crate) fn deriv_unchecked(&self, x: f64) -> f64 {
        match *self {
            Utility::Log => 1.0 / x,
            Utility::Power { p } => x.powf(p - 1.0),
        }
    }

    pub(crate) fn conjugate_unchecked(&self, y: f64) -> f64 {
        match *self {
            Utility::Log => -y.ln() - 1.0,
            Utility::Power { p } => (1.0 - p) / p * y.powf(p / (p - 1.0)),
        }
    }
}
