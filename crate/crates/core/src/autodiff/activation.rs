use serde::{Deserialize, Serialize};

use super::Float;

pub const LEAKY_RELU_SLOPE: f64 = 0.01;

/// Scalar activation applied to a gate before it scales the residual stream.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum GateActivation {
    Identity,
    #[serde(rename = "ReLU")]
    Relu,
    #[serde(rename = "LeakyReLU")]
    LeakyRelu,
    Tanh,
    #[default]
    #[serde(rename = "SiLU")]
    Silu,
    /// `a * sigmoid(beta * a)`.
    #[serde(rename = "ScaledSiLU")]
    ScaledSilu { beta: f64 },
}

pub fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl GateActivation {
    pub const ALL_DEFAULT: [GateActivation; 6] = [
        GateActivation::Identity,
        GateActivation::Relu,
        GateActivation::LeakyRelu,
        GateActivation::Tanh,
        GateActivation::Silu,
        GateActivation::ScaledSilu { beta: 8.0 },
    ];

    pub fn apply<T: Float>(self, a: T) -> T {
        match self {
            GateActivation::Identity => a,
            GateActivation::Relu => a.max(T::zero()),
            GateActivation::LeakyRelu => {
                if a > T::zero() {
                    a
                } else {
                    a * T::of(LEAKY_RELU_SLOPE)
                }
            }
            GateActivation::Tanh => a.tanh(),
            GateActivation::Silu => a * sigmoid(a),
            GateActivation::ScaledSilu { beta } => a * sigmoid(T::of(beta) * a),
        }
    }

    pub fn derivative<T: Float>(self, a: T) -> T {
        match self {
            GateActivation::Identity => T::one(),
            GateActivation::Relu => {
                if a > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            GateActivation::LeakyRelu => {
                if a > T::zero() {
                    T::one()
                } else {
                    T::of(LEAKY_RELU_SLOPE)
                }
            }
            GateActivation::Tanh => {
                let t = a.tanh();
                T::one() - t * t
            }
            GateActivation::Silu => {
                let s = sigmoid(a);
                s * (T::one() + a * (T::one() - s))
            }
            GateActivation::ScaledSilu { beta } => {
                let b = T::of(beta);
                let s = sigmoid(b * a);
                s * (T::one() + b * a * (T::one() - s))
            }
        }
    }

    /// Forward scale `1 - Act(alpha)` that the gate applies to activations.
    pub fn scale<T: Float>(self, alpha: T) -> T {
        T::one() - self.apply(alpha)
    }

    pub fn name(self) -> String {
        match self {
            GateActivation::Identity => "Identity".into(),
            GateActivation::Relu => "ReLU".into(),
            GateActivation::LeakyRelu => "LeakyReLU".into(),
            GateActivation::Tanh => "Tanh".into(),
            GateActivation::Silu => "SiLU".into(),
            GateActivation::ScaledSilu { beta } => format!("ScaledSiLU({beta})"),
        }
    }

    pub fn validate(self) -> Result<(), String> {
        match self {
            GateActivation::ScaledSilu { beta } if !(beta > 0.0 && beta.is_finite()) => {
                Err(format!("ScaledSiLU beta must be positive, got {beta}"))
            }
            _ => Ok(()),
        }
    }
}
