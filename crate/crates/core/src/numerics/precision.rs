use std::fmt;
use std::str::FromStr;

use half::bf16;
use serde::{Deserialize, Serialize};

/// Arithmetic precision used by the solver kernels.
///
/// Values are always stored as `f64`; reduced modes round every primitive
/// result onto the representable set of the emulated format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// 64-bit IEEE arithmetic, no rounding.
    #[default]
    Full,
    /// 32-bit IEEE arithmetic.
    Single,
    /// bfloat16 storage (8-bit exponent, 7-bit mantissa) with 32-bit accumulation.
    Bf16,
}

impl Precision {
    /// Round a scalar onto this mode's representable set (round-to-nearest-even).
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::Full => x,
            Precision::Single => x as f32 as f64,
            Precision::Bf16 => bf16::from_f32(x as f32).to_f64(),
        }
    }

    pub fn round_slice(self, xs: &mut [f64]) {
        if self != Precision::Full {
            for x in xs.iter_mut() {
                *x = self.round(*x);
            }
        }
    }

    pub fn is_full(self) -> bool {
        self == Precision::Full
    }

    /// Inner product with the accumulation contract of the mode: inputs rounded,
    /// products summed in 32-bit for reduced modes, result rounded.
    pub fn dot(self, a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        match self {
            Precision::Full => super::matrix::dot(a, b),
            _ => {
                let mut acc = 0.0f32;
                for (x, y) in a.iter().zip(b) {
                    acc += self.round(*x) as f32 * self.round(*y) as f32;
                }
                self.round(acc as f64)
            }
        }
    }

    /// Machine epsilon of the emulated format.
    pub fn epsilon(self) -> f64 {
        match self {
            Precision::Full => f64::EPSILON,
            Precision::Single => f32::EPSILON as f64,
            Precision::Bf16 => 2f64.powi(-7),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Precision::Full => "full",
            Precision::Single => "single",
            Precision::Bf16 => "bf16",
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" | "f64" => Ok(Precision::Full),
            "single" | "f32" => Ok(Precision::Single),
            "bf16" => Ok(Precision::Bf16),
            other => Err(format!("unknown precision `{other}` (expected full|single|bf16)")),
        }
    }
}
