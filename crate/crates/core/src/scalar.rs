//! Element type abstraction.
//!
//! The whole numeric stack is generic over [`Scalar`] so the same code runs in
//! f64 (the reference/test configuration) and f32 (the fast configuration).
//! A model instance is built for exactly one scalar type; the CLI picks the
//! instantiation at startup.

use crate::error::{Error, Result};
use num_traits::Float;

/// Which floating-point width a computation runs in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    /// IEEE-754 binary32.
    Single,
    /// IEEE-754 binary64.
    Double,
}

impl Precision {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "f32" | "single" => Ok(Precision::Single),
            "f64" | "double" => Ok(Precision::Double),
            _ => Err(Error::config(format!(
                "unknown precision {s:?} (expected \"f32\" or \"f64\")"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::Single => "f32",
            Precision::Double => "f64",
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Floating-point element of the tensor engine.
pub trait Scalar:
    Float + std::fmt::Debug + std::fmt::Display + std::iter::Sum + Default + Send + Sync + 'static
{
    const PRECISION: Precision;
    /// Gradient-audit tolerance appropriate for this width.
    const GRAD_TOL: f64;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::Single;
    const GRAD_TOL: f64 = 1e-3;

    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::Double;
    const GRAD_TOL: f64 = 1e-6;

    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}
