use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point precision of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn tag(self) -> u8 {
        match self {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            32 => Some(Precision::F32),
            64 => Some(Precision::F64),
            _ => None,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("unknown precision `{other}` (expected f32 or f64)")),
        }
    }
}

/// Real scalar the engine is generic over: f32 for training runs, f64 for
/// everything that is verified against an oracle.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;

    /// Converts an f64 constant. Never fails for the two supported types.
    #[inline(always)]
    fn c(x: f64) -> Self {
        // f32 rounds, f64 is the identity.
        <Self as FromPrimitive>::from_f64(x).unwrap_or_else(Self::nan)
    }

    #[inline(always)]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::F32;
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::F64;
}
