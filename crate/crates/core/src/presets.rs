//! Reference architectures with seeded Glorot-uniform initialization.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Conv2dLayer, DenseLayer, LayerSpec, Network, Padding};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 784-512-512-10 relu MLP.
    MnistNet1,
    /// Two conv/conv/pool stages (16 and 32 channels), then dense 128 and 10.
    MnistNet2,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::MnistNet1 => "mnistnet1",
            Preset::MnistNet2 => "mnistnet2",
        }
    }

    pub fn build(self, seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self {
            Preset::MnistNet1 => Network::new(
                vec![1, 28, 28],
                vec![
                    dense(&mut rng, 784, 512),
                    LayerSpec::Relu,
                    dense(&mut rng, 512, 512),
                    LayerSpec::Relu,
                    dense(&mut rng, 512, 10),
                    LayerSpec::Softmax,
                ],
            ),
            Preset::MnistNet2 => Network::new(
                vec![1, 28, 28],
                vec![
                    conv(&mut rng, 1, 16),
                    LayerSpec::Relu,
                    conv(&mut rng, 16, 16),
                    LayerSpec::Relu,
                    LayerSpec::MaxPool { window: 2, stride: 2 },
                    conv(&mut rng, 16, 32),
                    LayerSpec::Relu,
                    conv(&mut rng, 32, 32),
                    LayerSpec::Relu,
                    LayerSpec::MaxPool { window: 2, stride: 2 },
                    dense(&mut rng, 32 * 7 * 7, 128),
                    LayerSpec::Relu,
                    dense(&mut rng, 128, 10),
                    LayerSpec::Softmax,
                ],
            ),
        }
        .expect("preset shapes are consistent")
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnistnet1" => Ok(Preset::MnistNet1),
            "mnistnet2" => Ok(Preset::MnistNet2),
            _ => Err(Error::Config(format!("unknown preset `{s}` (expected mnistnet1 or mnistnet2)"))),
        }
    }
}

fn glorot(rng: &mut ChaCha8Rng, n: usize, fan_in: usize, fan_out: usize) -> Vec<f32> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-limit..limit) as f32).collect()
}

fn dense(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize) -> LayerSpec {
    let w = Tensor::new(vec![outputs, inputs], glorot(rng, inputs * outputs, inputs, outputs)).unwrap();
    LayerSpec::Dense(DenseLayer::new(w, vec![0.0; outputs]).unwrap())
}

fn conv(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize) -> LayerSpec {
    let n = outputs * inputs * 9;
    let k = Tensor::new(vec![outputs, inputs, 3, 3], glorot(rng, n, inputs * 9, outputs * 9)).unwrap();
    LayerSpec::Conv2d(Conv2dLayer::new(k, vec![0.0; outputs], 1, Padding::Same).unwrap())
}
