use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Silu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn value(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Silu => z * sigmoid(z),
            Activation::Identity => z,
        }
    }

    /// `[φ(z), φ'(z), φ''(z), φ'''(z)]`.
    ///
    /// The third derivative is needed by the reverse pass through the
    /// second-derivative channel, whose forward rule already contains φ''.
    #[inline]
    pub fn derivatives(self, z: f64) -> [f64; 4] {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                let s = 1.0 - t * t;
                [t, s, -2.0 * t * s, -2.0 * s * (1.0 - 3.0 * t * t)]
            }
            Activation::Silu => {
                let sg = sigmoid(z);
                let d1 = sg * (1.0 - sg);
                let d2 = d1 * (1.0 - 2.0 * sg);
                let d3 = d2 * (1.0 - 2.0 * sg) - 2.0 * d1 * d1;
                [z * sg, sg + z * d1, 2.0 * d1 + z * d2, 3.0 * d2 + z * d3]
            }
            Activation::Identity => [z, 1.0, 0.0, 0.0],
        }
    }

    /// Default initialization gain: 5/3 for tanh; 1 for SiLU (near-linear at
    /// the origin) and identity.
    pub fn default_gain(self) -> f64 {
        match self {
            Activation::Tanh => 5.0 / 3.0,
            Activation::Silu | Activation::Identity => 1.0,
        }
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
