//! Hidden-layer activation functions with first and second derivatives.
//!
//! Conventions at the non-smooth points are fixed so every run is
//! reproducible:
//! - ELU (alpha = 1) is C1; its second derivative jumps at 0 and we take the
//!   left limit, `f''(0) = 1`.
//! - RELU uses subgradient 0 at 0 and `f'' = 0` everywhere.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Elu,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn eval<S: Scalar>(self, u: S) -> S {
        match self {
            Activation::Elu => {
                if u > S::ZERO {
                    u
                } else {
                    u.exp() - S::ONE
                }
            }
            Activation::Relu => {
                if u > S::ZERO {
                    u
                } else {
                    S::ZERO
                }
            }
            Activation::Identity => u,
        }
    }

    #[inline]
    pub fn d1<S: Scalar>(self, u: S) -> S {
        match self {
            Activation::Elu => {
                if u > S::ZERO {
                    S::ONE
                } else {
                    u.exp()
                }
            }
            Activation::Relu => {
                if u > S::ZERO {
                    S::ONE
                } else {
                    S::ZERO
                }
            }
            Activation::Identity => S::ONE,
        }
    }

    #[inline]
    pub fn d2<S: Scalar>(self, u: S) -> S {
        match self {
            Activation::Elu => {
                if u > S::ZERO {
                    S::ZERO
                } else {
                    // left limit at exactly 0: e^0 = 1
                    u.exp()
                }
            }
            Activation::Relu => S::ZERO,
            Activation::Identity => S::ZERO,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Elu => "elu",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "elu" => Some(Activation::Elu),
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Elu => 0,
            Activation::Relu => 1,
            Activation::Identity => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Activation::Elu),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elu_is_continuous_at_zero() {
        assert_eq!(Activation::Elu.eval(0.0f64), 0.0);
        assert_eq!(Activation::Elu.d1(0.0f64), 1.0);
        assert_eq!(Activation::Elu.d2(0.0f64), 1.0);
    }

    #[test]
    fn relu_subgradient_convention() {
        assert_eq!(Activation::Relu.d1(0.0f64), 0.0);
        assert_eq!(Activation::Relu.d2(5.0f64), 0.0);
    }

    #[test]
    fn elu_negative_branch_derivatives_match() {
        let u = -0.7f64;
        let e = u.exp();
        assert!((Activation::Elu.eval(u) - (e - 1.0)).abs() < 1e-15);
        assert!((Activation::Elu.d1(u) - e).abs() < 1e-15);
        assert!((Activation::Elu.d2(u) - e).abs() < 1e-15);
    }
}
