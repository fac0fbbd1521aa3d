//! Post-training uniform quantization of small feed-forward and convolutional
//! networks, with mixed integer/float inference and an integer-only path
//! (integer MACs, binary shifts and clipping) for relu networks whose step
//! sizes are powers of two.

pub mod calibrate;
pub mod error;
pub mod eval;
pub mod graph;
pub mod modelio;
pub mod presets;
pub mod qengine;
pub mod quantizer;
pub mod report;
pub mod tensor;
pub mod trainer;

pub use calibrate::{calibrate_network, CalibrationReport, PolicyKind, StepGrid, StepPolicy};
pub use error::{Error, ErrorClass, Result};
pub use graph::{Complexity, Conv2dLayer, DenseLayer, LayerCost, LayerSpec, Network, Padding};
pub use modelio::{MnistSet, ModelMeta, QuantMeta};
pub use presets::Preset;
pub use qengine::{Activation, BiasRule, ExecMode, QuantizedLayer, QuantizedLinear, QuantizedNetwork};
pub use quantizer::{QuantParams, QuantTensor, Signedness};
pub use tensor::{RealTensor, Tensor};
pub use trainer::TrainConfig;
