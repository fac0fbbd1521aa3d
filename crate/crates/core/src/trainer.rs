//! Minibatch training of dense relu networks with a softmax/cross-entropy
//! head, Adam, inverted dropout and an optional `λ Σ|w|^p` weight penalty.

use ndarray::{Array1, Array2, Axis, NdFloat};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DenseLayer, LayerSpec, Network};
use crate::tensor::{argmax, RealTensor, Tensor};

pub const CONV_TRAINING_HINT: &str =
    "only dense networks train here; build convolutional models with the exporter in exporter/ and load its model file";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Probability of dropping a hidden unit.
    pub dropout: f64,
    pub reg_lambda: f64,
    pub reg_p: u32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            dropout: 0.1,
            reg_lambda: 0.0,
            reg_p: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.reg_lambda >= 0.0 && self.reg_lambda.is_finite()) {
            return bad("regularization strength must be non-negative");
        }
        if self.reg_p < 1 {
            return bad("regularization exponent must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout probability must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.epsilon > 0.0) {
            return bad("learning rate and epsilon must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("Adam moment parameters must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Borrowed training or evaluation set, one row of `features` per label.
#[derive(Debug, Clone, Copy)]
pub struct Samples<'a> {
    inputs: &'a [f32],
    labels: &'a [u8],
    features: usize,
}

impl<'a> Samples<'a> {
    pub fn new(inputs: &'a [f32], labels: &'a [u8], features: usize) -> Result<Self> {
        if features == 0 || inputs.len() != labels.len() * features {
            return Err(Error::CountMismatch(format!(
                "{} input values for {} labels of {features} features",
                inputs.len(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels, features })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn labels(&self) -> &'a [u8] {
        self.labels
    }

    pub fn row(&self, i: usize) -> &'a [f32] {
        &self.inputs[i * self.features..][..self.features]
    }

    fn gather<F: NdFloat>(&self, indices: &[usize]) -> Array2<F> {
        let mut x = Array2::zeros((indices.len(), self.features));
        for (r, &i) in indices.iter().enumerate() {
            for (dst, &v) in x.row_mut(r).iter_mut().zip(self.row(i)) {
                *dst = F::from(v).unwrap();
            }
        }
        x
    }
}

/// `(λ Σ|w|^p, λ p |w|^(p-1) sign(w))`, with gradient 0 at `w = 0`.
pub fn lp_penalty_and_grad(w: &RealTensor, lambda: f64, p: u32) -> Result<(f64, RealTensor)> {
    if !(lambda >= 0.0) || p < 1 {
        return Err(Error::Config(format!("penalty needs λ ≥ 0 and p ≥ 1, got λ={lambda}, p={p}")));
    }
    let values: Vec<f64> = w.data().iter().map(|&v| v as f64).collect();
    let (penalty, grad) = lp_terms(&values, lambda, p);
    let grad = Tensor::new(w.shape().to_vec(), grad.into_iter().map(|g| g as f32).collect())?;
    Ok((penalty, grad))
}

fn lp_terms<F: NdFloat>(w: &[F], lambda: F, p: u32) -> (F, Vec<F>) {
    let pf = F::from(p).unwrap();
    let exp = p as i32;
    let mut penalty = F::zero();
    let grad = w
        .iter()
        .map(|&v| {
            penalty += v.abs().powi(exp);
            if v == F::zero() {
                F::zero()
            } else {
                lambda * pf * v.abs().powi(exp - 1) * v.signum()
            }
        })
        .collect();
    (lambda * penalty, grad)
}

/// Dense relu stack with a softmax output, stored as `[out, in]` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<F> {
    pub weights: Vec<Array2<F>>,
    pub biases: Vec<Array1<F>>,
}

/// Loss, parameter gradients and number of correct predictions for a batch.
#[derive(Debug, Clone)]
pub struct BatchGrad<F> {
    pub loss: F,
    pub weights: Vec<Array2<F>>,
    pub biases: Vec<Array1<F>>,
    pub correct: usize,
}

impl<F: NdFloat> Mlp<F> {
    /// Accepts `Dense (Relu Dense)* [Softmax]`.
    pub fn from_network(net: &Network) -> Result<Self> {
        let layers = net.layers();
        let mut dense: Vec<&DenseLayer> = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            match layer {
                LayerSpec::Dense(d) => {
                    if i > 0 && !matches!(layers[i - 1], LayerSpec::Relu) {
                        return Err(Error::structural(i, "dense layers must be separated by relu"));
                    }
                    dense.push(d);
                }
                LayerSpec::Relu => {
                    if !matches!(layers.get(i + 1), Some(LayerSpec::Dense(_))) || i == 0 {
                        return Err(Error::structural(i, "relu must sit between two dense layers"));
                    }
                }
                LayerSpec::Softmax => {
                    if i + 1 != layers.len() || i == 0 {
                        return Err(Error::structural(i, "softmax must follow the last dense layer"));
                    }
                }
                other => {
                    return Err(Error::UnsupportedLayer {
                        layer: i,
                        kind: other.kind_name().to_string(),
                        hint: CONV_TRAINING_HINT.to_string(),
                    })
                }
            }
        }
        if dense.is_empty() {
            return Err(Error::Config("network has no dense layer to train".into()));
        }
        let cast = |v: &f32| F::from(*v).unwrap();
        Ok(Self {
            weights: dense
                .iter()
                .map(|d| {
                    Array2::from_shape_vec((d.out_features(), d.in_features()), d.weights.data().iter().map(cast).collect())
                        .expect("validated dense shape")
                })
                .collect(),
            biases: dense.iter().map(|d| d.bias.iter().map(cast).collect()).collect(),
        })
    }

    /// Writes the parameters back into the dense layers of `net`.
    pub fn store(&self, net: &mut Network) {
        let mut params = self.weights.iter().zip(&self.biases);
        for layer in net.layers_mut() {
            if let LayerSpec::Dense(d) = layer {
                let (w, b) = params.next().expect("same layer count");
                for (dst, &v) in d.weights.data_mut().iter_mut().zip(w.iter()) {
                    *dst = v.to_f32().unwrap();
                }
                for (dst, &v) in d.bias.iter_mut().zip(b.iter()) {
                    *dst = v.to_f32().unwrap();
                }
            }
        }
    }

    /// Activations per layer; hidden outputs are multiplied by `masks` when given.
    fn forward(&self, x: Array2<F>, masks: Option<&[Array2<F>]>) -> Vec<Array2<F>> {
        let last = self.weights.len() - 1;
        let mut acts = vec![x];
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = acts[l].dot(&w.t()) + b;
            if l < last {
                z.mapv_inplace(|v| v.max(F::zero()));
                if let Some(m) = masks {
                    z *= &m[l];
                }
            }
            acts.push(z);
        }
        acts
    }

    pub fn logits(&self, x: Array2<F>) -> Array2<F> {
        self.forward(x, None).pop().unwrap()
    }

    /// Mean cross-entropy plus the weight penalty, with exact gradients.
    pub fn loss_and_grad(
        &self,
        x: Array2<F>,
        labels: &[u8],
        masks: Option<&[Array2<F>]>,
        reg_lambda: F,
        reg_p: u32,
    ) -> BatchGrad<F> {
        let batch = labels.len();
        let n = F::from(batch).unwrap();
        let acts = self.forward(x, masks);
        let logits = acts.last().unwrap();
        let mut delta = Array2::<F>::zeros(logits.raw_dim());
        let mut loss = F::zero();
        let mut correct = 0;
        for (r, row) in logits.outer_iter().enumerate() {
            let y = labels[r] as usize;
            let max = row.fold(F::neg_infinity(), |m, &v| m.max(v));
            let sum = row.fold(F::zero(), |s, &v| s + (v - max).exp());
            loss += sum.ln() + max - row[y];
            let best = argmax(row.as_slice().expect("standard layout"));
            correct += (best == y) as usize;
            for (c, d) in delta.row_mut(r).iter_mut().enumerate() {
                let p = (row[c] - max).exp() / sum;
                *d = (p - if c == y { F::one() } else { F::zero() }) / n;
            }
        }
        loss = loss / n;

        let layers = self.weights.len();
        let mut gw = Vec::with_capacity(layers);
        let mut gb = Vec::with_capacity(layers);
        for l in (0..layers).rev() {
            let mut dw = delta.t().dot(&acts[l]);
            if reg_lambda > F::zero() {
                let (penalty, grad) = lp_terms(self.weights[l].as_slice().expect("standard layout"), reg_lambda, reg_p);
                loss += penalty;
                for (d, g) in dw.iter_mut().zip(grad) {
                    *d += g;
                }
            }
            gw.push(dw);
            gb.push(delta.sum_axis(Axis(0)));
            if l > 0 {
                let mut back = delta.dot(&self.weights[l]);
                let a = &acts[l];
                let scale = masks.map(|m| &m[l - 1]);
                for ((idx, d), &av) in back.indexed_iter_mut().zip(a.iter()) {
                    *d = if av > F::zero() {
                        match scale {
                            Some(m) => *d * m[idx],
                            None => *d,
                        }
                    } else {
                        F::zero()
                    };
                }
                delta = back;
            }
        }
        gw.reverse();
        gb.reverse();
        BatchGrad { loss, weights: gw, biases: gb, correct }
    }
}

struct Adam<F> {
    m_w: Vec<Array2<F>>,
    v_w: Vec<Array2<F>>,
    m_b: Vec<Array1<F>>,
    v_b: Vec<Array1<F>>,
    t: i32,
}

impl<F: NdFloat> Adam<F> {
    fn new(mlp: &Mlp<F>) -> Self {
        Self {
            m_w: mlp.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            v_w: mlp.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            m_b: mlp.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
            v_b: mlp.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
            t: 0,
        }
    }

    fn step(&mut self, mlp: &mut Mlp<F>, grad: &BatchGrad<F>, cfg: &TrainConfig) {
        self.t += 1;
        let c = |v: f64| F::from(v).unwrap();
        let (b1, b2, eps) = (c(cfg.beta1), c(cfg.beta2), c(cfg.epsilon));
        let lr = c(cfg.learning_rate);
        let corr1 = F::one() - b1.powi(self.t);
        let corr2 = F::one() - b2.powi(self.t);
        let update = |p: &mut F, m: &mut F, v: &mut F, g: F| {
            *m = b1 * *m + (F::one() - b1) * g;
            *v = b2 * *v + (F::one() - b2) * g * g;
            *p -= lr * (*m / corr1) / ((*v / corr2).sqrt() + eps);
        };
        for l in 0..mlp.weights.len() {
            ndarray::Zip::from(&mut mlp.weights[l])
                .and(&mut self.m_w[l])
                .and(&mut self.v_w[l])
                .and(&grad.weights[l])
                .for_each(|p, m, v, &g| update(p, m, v, g));
            ndarray::Zip::from(&mut mlp.biases[l])
                .and(&mut self.m_b[l])
                .and(&mut self.v_b[l])
                .and(&grad.biases[l])
                .for_each(|p, m, v, &g| update(p, m, v, g));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean minibatch loss, penalty included.
    pub loss: f64,
    /// Accuracy on the training minibatches as seen during the epoch (with dropout).
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub history: Vec<EpochMetrics>,
}

/// Classification accuracy of a dense network on `data`.
pub fn dense_accuracy(net: &Network, data: Samples<'_>) -> Result<f64> {
    let mlp = Mlp::<f32>::from_network(net)?;
    Ok(mlp_accuracy(&mlp, data))
}

fn mlp_accuracy<F: NdFloat>(mlp: &Mlp<F>, data: Samples<'_>) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in indices.chunks(1000) {
        let logits = mlp.logits(data.gather(chunk));
        for (row, &i) in logits.outer_iter().zip(chunk) {
            correct += (argmax(row.as_slice().unwrap()) == data.labels[i] as usize) as usize;
        }
    }
    correct as f64 / data.len() as f64
}

pub fn train_dense(net: &Network, train: Samples<'_>, test: Option<Samples<'_>>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_dense_with(net, train, test, cfg, |_| {})
}

/// [`train_dense`] with a callback after each epoch.
pub fn train_dense_with(
    net: &Network,
    train: Samples<'_>,
    test: Option<Samples<'_>>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut mlp = Mlp::<f32>::from_network(net)?;
    let features = mlp.weights[0].ncols();
    for data in std::iter::once(&train).chain(test.as_ref()) {
        if data.features != features {
            return Err(Error::CountMismatch(format!(
                "samples have {} features, network expects {features}",
                data.features
            )));
        }
        let classes = mlp.biases.last().unwrap().len();
        if let Some(&y) = data.labels.iter().find(|&&y| y as usize >= classes) {
            return Err(Error::InputDomain(format!("label {y} outside {classes} classes")));
        }
    }
    if cfg.epochs > 0 && train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&mlp);
    let keep = 1.0 - cfg.dropout;
    let scale = (1.0 / keep) as f32;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        let mut correct = 0;
        for batch in order.chunks(cfg.batch_size) {
            let x = train.gather::<f32>(batch);
            let masks: Option<Vec<Array2<f32>>> = (cfg.dropout > 0.0).then(|| {
                mlp.weights[..mlp.weights.len() - 1]
                    .iter()
                    .map(|w| {
                        Array2::from_shape_simple_fn((batch.len(), w.nrows()), || {
                            if rng.random::<f64>() < keep { scale } else { 0.0 }
                        })
                    })
                    .collect()
            });
            let labels: Vec<u8> = batch.iter().map(|&i| train.labels[i]).collect();
            let grad = mlp.loss_and_grad(x, &labels, masks.as_deref(), cfg.reg_lambda as f32, cfg.reg_p);
            adam.step(&mut mlp, &grad, cfg);
            loss_sum += grad.loss as f64;
            batches += 1;
            correct += grad.correct;
        }
        let metrics = EpochMetrics {
            epoch,
            loss: loss_sum / batches.max(1) as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            test_accuracy: test.map(|t| mlp_accuracy(&mlp, t)),
        };
        on_epoch(&metrics);
        history.push(metrics);
    }
    let mut network = net.clone();
    mlp.store(&mut network);
    Ok(TrainOutcome { network, history })
}

/// Summary statistics of a weight tensor, in double precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub max_abs: f64,
    /// `None` when all weights are equal.
    pub excess_kurtosis: Option<f64>,
}

impl WeightStats {
    pub fn of(values: &[f32]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
        let (mut m2, mut m4) = (0.0, 0.0);
        for &v in values {
            let d = v as f64 - mean;
            m2 += d * d;
            m4 += d * d * d * d;
        }
        m2 /= n;
        m4 /= n;
        Self {
            count: values.len(),
            mean,
            std: m2.sqrt(),
            max_abs: values.iter().fold(0f64, |m, &v| m.max((v as f64).abs())),
            excess_kurtosis: (m2 > 0.0).then(|| m4 / (m2 * m2) - 3.0),
        }
    }
}

/// Weight histogram of one dense/conv layer over `[-max|w|, max|w|]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerHistogram {
    pub layer: usize,
    pub centers: Vec<f64>,
    pub counts: Vec<u64>,
    pub stats: WeightStats,
}

impl LayerHistogram {
    /// Two columns: bin center and count.
    pub fn to_text(&self) -> String {
        self.centers
            .iter()
            .zip(&self.counts)
            .map(|(c, n)| format!("{c:.6e}\t{n}\n"))
            .collect()
    }
}

pub fn weight_histogram(net: &Network, bins: usize) -> Result<Vec<LayerHistogram>> {
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let mut out = Vec::new();
    for (layer, spec) in net.layers().iter().enumerate() {
        let w = match spec {
            LayerSpec::Dense(d) => d.weights.data(),
            LayerSpec::Conv2d(c) => c.kernels.data(),
            _ => continue,
        };
        let stats = WeightStats::of(w);
        let (centers, counts) = if stats.max_abs == 0.0 {
            (vec![0.0], vec![w.len() as u64])
        } else {
            let width = 2.0 * stats.max_abs / bins as f64;
            let mut counts = vec![0u64; bins];
            for &v in w {
                let b = ((v as f64 + stats.max_abs) / width).floor() as usize;
                counts[b.min(bins - 1)] += 1;
            }
            let centers = (0..bins).map(|b| -stats.max_abs + (b as f64 + 0.5) * width).collect();
            (centers, counts)
        };
        out.push(LayerHistogram { layer, centers, counts, stats });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_net(seed: u64, sizes: &[usize]) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        for (i, pair) in sizes.windows(2).enumerate() {
            let w: Vec<f32> = (0..pair[0] * pair[1]).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..pair[1]).map(|_| rng.random_range(-0.5..0.5)).collect();
            layers.push(LayerSpec::Dense(DenseLayer::new(Tensor::new(vec![pair[1], pair[0]], w).unwrap(), b).unwrap()));
            layers.push(if i + 2 < sizes.len() { LayerSpec::Relu } else { LayerSpec::Softmax });
        }
        Network::new(vec![sizes[0]], layers).unwrap()
    }

    #[test]
    fn penalty_examples() {
        let (p, g) = lp_penalty_and_grad(&Tensor::from_vec(vec![0.0f32; 3]), 1.0, 2).unwrap();
        assert_eq!(p, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));

        let (p, g) = lp_penalty_and_grad(&Tensor::from_vec(vec![2.0]), 1.0, 1).unwrap();
        assert_eq!((p, g.data()[0]), (2.0, 1.0));

        let (p, g) = lp_penalty_and_grad(&Tensor::from_vec(vec![-0.5]), 1e-4, 8).unwrap();
        assert!((p - 1e-4 / 256.0).abs() < 1e-18);
        assert!((g.data()[0] as f64 + 6.25e-6).abs() < 1e-12);

        assert!(lp_penalty_and_grad(&Tensor::from_vec(vec![1.0]), -1.0, 2).is_err());
        assert!(lp_penalty_and_grad(&Tensor::from_vec(vec![1.0]), 1.0, 0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for cfg in [
            TrainConfig { reg_lambda: -1.0, ..Default::default() },
            TrainConfig { reg_p: 0, ..Default::default() },
            TrainConfig { dropout: 1.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    fn numeric_gradient_check(p: u32) {
        let net = tiny_net(3, &[4, 5, 3]);
        let mut mlp = Mlp::<f64>::from_network(&net).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Array2::from_shape_simple_fn((6, 4), || rng.random_range(-1.0..1.0));
        let labels = [0u8, 1, 2, 2, 1, 0];
        let masks = vec![Array2::from_shape_simple_fn((6, 5), || if rng.random_bool(0.8) { 1.25 } else { 0.0 })];
        let lambda = 0.05;
        let grad = mlp.loss_and_grad(x.clone(), &labels, Some(&masks), lambda, p);
        let h = 1e-6;
        for l in 0..mlp.weights.len() {
            for idx in 0..mlp.weights[l].len() {
                let (r, c) = (idx / mlp.weights[l].ncols(), idx % mlp.weights[l].ncols());
                let w0 = mlp.weights[l][[r, c]];
                if p == 1 && w0.abs() < 1e-6 {
                    continue;
                }
                mlp.weights[l][[r, c]] = w0 + h;
                let up = mlp.loss_and_grad(x.clone(), &labels, Some(&masks), lambda, p).loss;
                mlp.weights[l][[r, c]] = w0 - h;
                let down = mlp.loss_and_grad(x.clone(), &labels, Some(&masks), lambda, p).loss;
                mlp.weights[l][[r, c]] = w0;
                let numeric = (up - down) / (2.0 * h);
                let exact = grad.weights[l][[r, c]];
                let rel = (numeric - exact).abs() / numeric.abs().max(exact.abs()).max(1e-8);
                assert!(rel < 1e-4, "p={p} layer {l} weight {idx}: {numeric} vs {exact}");
            }
            for i in 0..mlp.biases[l].len() {
                let b0 = mlp.biases[l][i];
                mlp.biases[l][i] = b0 + h;
                let up = mlp.loss_and_grad(x.clone(), &labels, Some(&masks), lambda, p).loss;
                mlp.biases[l][i] = b0 - h;
                let down = mlp.loss_and_grad(x.clone(), &labels, Some(&masks), lambda, p).loss;
                mlp.biases[l][i] = b0;
                let numeric = (up - down) / (2.0 * h);
                let exact = grad.biases[l][i];
                let rel = (numeric - exact).abs() / numeric.abs().max(exact.abs()).max(1e-8);
                assert!(rel < 1e-4, "p={p} layer {l} bias {i}: {numeric} vs {exact}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for p in [1, 2, 8] {
            numeric_gradient_check(p);
        }
    }

    #[test]
    fn f32_and_f64_losses_agree() {
        let net = tiny_net(5, &[3, 4, 2]);
        let x64 = Array2::from_shape_fn((4, 3), |(i, j)| (i as f64 - j as f64) * 0.3);
        let x32 = x64.mapv(|v| v as f32);
        let labels = [0u8, 1, 1, 0];
        let a = Mlp::<f64>::from_network(&net).unwrap().loss_and_grad(x64, &labels, None, 0.0, 1);
        let b = Mlp::<f32>::from_network(&net).unwrap().loss_and_grad(x32, &labels, None, 0.0, 1);
        assert!((a.loss - b.loss as f64).abs() < 1e-5);
    }

    #[test]
    fn separable_toy_set_is_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..200 {
            let (a, b): (f32, f32) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if (a + b).abs() < 0.1 {
                continue;
            }
            inputs.extend([a, b]);
            labels.push((a + b > 0.0) as u8);
        }
        let data = Samples::new(&inputs, &labels, 2).unwrap();
        let net = tiny_net(2, &[2, 2]);
        let cfg = TrainConfig { epochs: 50, batch_size: 16, learning_rate: 0.05, dropout: 0.0, ..Default::default() };
        let out = train_dense(&net, data, None, &cfg).unwrap();
        assert_eq!(out.history.len(), 50);
        assert_eq!(dense_accuracy(&out.network, data).unwrap(), 1.0);
    }

    #[test]
    fn training_is_deterministic_and_zero_epochs_is_identity() {
        let inputs: Vec<f32> = (0..40).map(|i| (i % 7) as f32 / 7.0).collect();
        let labels: Vec<u8> = (0..10).map(|i| (i % 3) as u8).collect();
        let data = Samples::new(&inputs, &labels, 4).unwrap();
        let net = tiny_net(9, &[4, 6, 3]);
        let cfg = TrainConfig { epochs: 3, batch_size: 4, reg_lambda: 1e-3, reg_p: 8, ..Default::default() };
        let a = train_dense(&net, data, Some(data), &cfg).unwrap();
        let b = train_dense(&net, data, Some(data), &cfg).unwrap();
        assert_eq!(a.network, b.network);
        assert_eq!(a.history, b.history);
        assert_ne!(a.network, net);
        let zero = train_dense(&net, data, None, &TrainConfig { epochs: 0, ..cfg }).unwrap();
        assert_eq!(zero.network, net);
        assert!(zero.history.is_empty());
    }

    #[test]
    fn conv_networks_are_rejected_with_a_hint() {
        use crate::graph::{Conv2dLayer, Padding};
        let conv = Conv2dLayer::new(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap(), vec![0.0], 1, Padding::Valid).unwrap();
        let net = Network::new(vec![1, 2, 2], vec![LayerSpec::Conv2d(conv)]).unwrap();
        match Mlp::<f32>::from_network(&net) {
            Err(Error::UnsupportedLayer { layer: 0, hint, .. }) => assert!(hint.contains("exporter")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn histogram_examples() {
        let zero = Network::new(
            vec![2],
            vec![LayerSpec::Dense(DenseLayer::new(Tensor::zeros(vec![3, 2]), vec![0.0; 3]).unwrap())],
        )
        .unwrap();
        let h = weight_histogram(&zero, 10).unwrap();
        assert_eq!((h[0].centers.clone(), h[0].counts.clone()), (vec![0.0], vec![6]));
        assert_eq!(h[0].stats.excess_kurtosis, None);

        let w = Tensor::new(vec![2, 2], vec![1.0, -1.0, -1.0, 1.0]).unwrap();
        let sym = Network::new(vec![2], vec![LayerSpec::Dense(DenseLayer::new(w, vec![0.0; 2]).unwrap())]).unwrap();
        let h = &weight_histogram(&sym, 4).unwrap()[0];
        assert_eq!(h.counts, vec![2, 0, 0, 2]);
        assert_eq!(h.counts.iter().sum::<u64>(), 4);
        assert_eq!(h.stats.mean, 0.0);
        assert_eq!(h.stats.excess_kurtosis, Some(-2.0));
        assert_eq!(h.to_text().lines().count(), 4);
    }

    #[test]
    fn kurtosis_of_known_samples() {
        // two-point distribution has kurtosis 1, uniform grid on 5 points has 1.7
        let s = WeightStats::of(&[-2.0, -1.0, 0.0, 1.0, 2.0]);
        assert!((s.excess_kurtosis.unwrap() - (1.7 - 3.0)).abs() < 1e-12);
        assert!((s.std - 2f64.sqrt()).abs() < 1e-12);
    }
}
