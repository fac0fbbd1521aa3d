//! Accuracy over labeled image sets.

use crate::error::Result;
use crate::graph::Network;
use crate::modelio::MnistSet;
use crate::qengine::{ExecMode, QuantizedNetwork};
use crate::tensor::argmax;
use crate::trainer::Mlp;

/// Predicted class per image of the float network.
pub fn float_predictions(net: &Network, set: &MnistSet) -> Result<Vec<usize>> {
    if let Ok(mlp) = Mlp::<f32>::from_network(net) {
        let n = set.pixels();
        let mut out = Vec::with_capacity(set.len());
        for chunk in set.images.chunks(1000 * n) {
            let x = ndarray::Array2::from_shape_vec((chunk.len() / n, n), chunk.to_vec()).expect("whole images");
            let logits = mlp.logits(x);
            out.extend(logits.outer_iter().map(|row| argmax(row.as_slice().unwrap())));
        }
        return Ok(out);
    }
    (0..set.len()).map(|i| net.predict(&set.image(i).reshape(net.input_shape().to_vec())?)).collect()
}

pub fn quantized_predictions(qnet: &QuantizedNetwork, set: &MnistSet, mode: ExecMode) -> Result<Vec<usize>> {
    (0..set.len())
        .map(|i| qnet.predict(&set.image(i).reshape(qnet.input_shape().to_vec())?, mode))
        .collect()
}

/// Number of predictions equal to the labels.
pub fn count_correct(predictions: &[usize], labels: &[u8]) -> usize {
    predictions.iter().zip(labels).filter(|(p, l)| **p == **l as usize).count()
}
