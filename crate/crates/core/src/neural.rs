//! Small fully-connected network with hand-written backpropagation.
//!
//! Hidden layers use ReLU, the output layer is affine. Everything is `f64`;
//! single rows go through the same batched code path as minibatches.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out x in`, row-major.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layer_dims: Vec<usize>,
    layers: Vec<Dense>,
}

/// Activations kept from a forward pass: `activations[0]` is the input batch,
/// `activations[L]` the output.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
            .fold(0.0, |m, g| m.max(g.abs()))
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::Shape(format!("invalid layer dims {dims:?}")));
    }
    Ok(())
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng>(layer_dims: &[usize], rng: &mut R) -> Result<Self> {
        check_dims(layer_dims)?;
        let layers = layer_dims
            .windows(2)
            .map(|d| {
                let (fan_in, fan_out) = (d[0], d[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Dense {
                    weights: Array2::from_shape_simple_fn((fan_out, fan_in), || rng.random_range(-limit..limit)),
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Mlp { layer_dims: layer_dims.to_vec(), layers })
    }

    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        check_dims(layer_dims)?;
        let layers = layer_dims
            .windows(2)
            .map(|d| Dense { weights: Array2::zeros((d[1], d[0])), bias: Array1::zeros(d[1]) })
            .collect();
        Ok(Mlp { layer_dims: layer_dims.to_vec(), layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("no layers".into()));
        }
        let mut dims = vec![layers[0].weights.ncols()];
        for (i, l) in layers.iter().enumerate() {
            if l.weights.ncols() != *dims.last().unwrap() || l.bias.len() != l.weights.nrows() {
                return Err(Error::Shape(format!("layer {i} shape inconsistent")));
            }
            dims.push(l.weights.nrows());
        }
        check_dims(&dims)?;
        Ok(Mlp { layer_dims: dims, layers })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let batch = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.forward_batch(batch)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut a = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            a = self.affine(layer, a.view());
            if i + 1 < self.layers.len() {
                a.mapv_inplace(|v| v.max(0.0));
            }
        }
        Ok(a)
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> Result<ForwardCache> {
        self.check_input(&x)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_owned());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = self.affine(layer, activations[i].view());
            if i + 1 < self.layers.len() {
                z.mapv_inplace(|v| v.max(0.0));
            }
            activations.push(z);
        }
        Ok(ForwardCache { activations })
    }

    fn affine(&self, layer: &Dense, a: ArrayView2<f64>) -> Array2<f64> {
        let mut z = a.dot(&layer.weights.t());
        z += &layer.bias;
        z
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!("input has {} columns, network expects {}", x.ncols(), self.input_dim())));
        }
        Ok(())
    }

    /// Gradients of `sum(output * grad_out)` with respect to every parameter.
    pub fn backward(&self, cache: &ForwardCache, grad_out: ArrayView2<f64>) -> Result<Gradients> {
        let out = cache.output();
        if grad_out.dim() != out.dim() || cache.activations.len() != self.layers.len() + 1 {
            return Err(Error::Shape(format!("grad_out {:?} does not match output {:?}", grad_out.dim(), out.dim())));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if i + 1 < self.layers.len() {
                // ReLU: units with non-positive activation pass no gradient
                Zip::from(&mut g).and(&cache.activations[i + 1]).for_each(|g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            let input = &cache.activations[i];
            let dw = g.t().dot(input);
            let db = g.sum_axis(Axis(0));
            if i > 0 {
                g = g.dot(&layer.weights);
            }
            grads.push(Dense { weights: dw, bias: db });
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }

    fn same_shape(&self, other: &Mlp) -> Result<()> {
        if self.layer_dims != other.layer_dims {
            return Err(Error::Shape(format!("layer dims {:?} vs {:?}", self.layer_dims, other.layer_dims)));
        }
        Ok(())
    }
}

/// Overwrites `dst` with a deep copy of `src`'s parameters.
pub fn copy_parameters(src: &Mlp, dst: &mut Mlp) -> Result<()> {
    src.same_shape(dst)?;
    for (d, s) in dst.layers.iter_mut().zip(&src.layers) {
        d.weights.assign(&s.weights);
        d.bias.assign(&s.bias);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Bias-corrected adaptive-moment optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Dense>,
    second: Vec<Dense>,
}

impl Adam {
    pub fn new(net: &Mlp, config: AdamConfig) -> Self {
        let zeros = Mlp::zeros(&net.layer_dims).unwrap().layers;
        Adam { config, step: 0, first: zeros.clone(), second: zeros }
    }

    pub fn update(&mut self, net: &mut Mlp, grads: &Gradients) -> Result<()> {
        if grads.layers.len() != net.layers.len()
            || grads.layers.iter().zip(&net.layers).any(|(g, l)| g.weights.dim() != l.weights.dim() || g.bias.len() != l.bias.len())
            || self.first.len() != net.layers.len()
        {
            return Err(Error::Shape("gradient/optimizer shapes do not match network".into()));
        }
        self.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let apply = |p: &mut f64, g: &f64, m: &mut f64, v: &mut f64| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        };
        for (((layer, g), m), v) in net.layers.iter_mut().zip(&grads.layers).zip(&mut self.first).zip(&mut self.second) {
            Zip::from(&mut layer.weights).and(&g.weights).and(&mut m.weights).and(&mut v.weights).for_each(apply);
            Zip::from(&mut layer.bias).and(&g.bias).and(&mut m.bias).and(&mut v.bias).for_each(apply);
        }
        Ok(())
    }

    pub fn snapshot(&self) -> OptimizerSnapshot {
        OptimizerSnapshot {
            config: self.config.clone(),
            step: self.step,
            first: self.first.iter().map(LayerParams::from).collect(),
            second: self.second.iter().map(LayerParams::from).collect(),
        }
    }

    pub fn restore(net: &Mlp, snap: &OptimizerSnapshot) -> Result<Self> {
        let first = snap.first.iter().map(LayerParams::to_dense).collect::<Result<Vec<_>>>()?;
        let second = snap.second.iter().map(LayerParams::to_dense).collect::<Result<Vec<_>>>()?;
        let adam = Adam { config: snap.config.clone(), step: snap.step, first, second };
        let dims_ok = adam.first.len() == net.layers.len()
            && adam.first.iter().chain(&adam.second).zip(net.layers.iter().chain(&net.layers)).all(|(a, b)| a.weights.dim() == b.weights.dim());
        if !dims_ok {
            return Err(Error::Shape("optimizer snapshot does not match network".into()));
        }
        Ok(adam)
    }
}

// --- checkpoint file -------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// Row-major: `weights[o][i]` connects input `i` to output `o`.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
}

impl From<&Dense> for LayerParams {
    fn from(d: &Dense) -> Self {
        LayerParams { weights: d.weights.rows().into_iter().map(|r| r.to_vec()).collect(), biases: d.bias.to_vec() }
    }
}

impl LayerParams {
    fn to_dense(&self) -> Result<Dense> {
        let rows = self.weights.len();
        let cols = self.weights.first().map_or(0, Vec::len);
        if self.weights.iter().any(|r| r.len() != cols) || self.biases.len() != rows {
            return Err(Error::Shape("ragged layer in checkpoint".into()));
        }
        let flat: Vec<f64> = self.weights.iter().flatten().copied().collect();
        let weights = Array2::from_shape_vec((rows, cols), flat).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(Dense { weights, bias: Array1::from(self.biases.clone()) })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSnapshot {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<LayerParams>,
    pub second: Vec<LayerParams>,
}

/// Fixed affine preprocessing `(x - shift) / scale`, clipped to
/// `[-INPUT_CLIP, INPUT_CLIP]`, applied to inputs before the first layer.
/// Bound on standardized inputs, so a feature far outside the warmup range
/// cannot dominate the first layer.
pub const INPUT_CLIP: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer { shift: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    pub fn apply(&self, x: &mut [f64]) {
        for ((v, s), k) in x.iter_mut().zip(&self.shift).zip(&self.scale) {
            *v = ((*v - s) / k).clamp(-INPUT_CLIP, INPUT_CLIP);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub training_step: u64,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_norm: Option<Standardizer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub layer_dims: Vec<usize>,
    pub layers: Vec<LayerParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerSnapshot>,
    pub metadata: CheckpointMeta,
}

impl Checkpoint {
    pub fn from_net(net: &Mlp, optimizer: Option<&Adam>, metadata: CheckpointMeta) -> Self {
        Checkpoint {
            layer_dims: net.layer_dims.clone(),
            layers: net.layers.iter().map(LayerParams::from).collect(),
            optimizer: optimizer.map(Adam::snapshot),
            metadata,
        }
    }

    pub fn to_net(&self) -> Result<Mlp> {
        let layers = self.layers.iter().map(LayerParams::to_dense).collect::<Result<Vec<_>>>()?;
        let net = Mlp::from_layers(layers)?;
        if net.layer_dims != self.layer_dims {
            return Err(Error::Shape(format!("checkpoint dims {:?} disagree with weights {:?}", self.layer_dims, net.layer_dims)));
        }
        Ok(net)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn standardizer_shifts_scales_and_clips() {
        let st = Standardizer { shift: vec![1.0, 0.0, 0.0], scale: vec![2.0, 0.1, 0.1] };
        let mut x = [3.0, 0.2, -7.0];
        st.apply(&mut x);
        assert_eq!(x, [1.0, 2.0, -INPUT_CLIP]);
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = Mlp::zeros(&[8, 128, 64, 2]).unwrap();
        assert_eq!(net.forward(&[1.0; 8]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer() {
        let net = Mlp::from_layers(vec![Dense { weights: Array2::eye(2), bias: Array1::zeros(2) }]).unwrap();
        assert_eq!(net.forward(&[-3.0, 4.5]).unwrap(), vec![-3.0, 4.5]);
    }

    #[test]
    fn shape_errors() {
        let net = Mlp::zeros(&[3, 4, 2]).unwrap();
        assert!(matches!(net.forward(&[1.0; 4]), Err(Error::Shape(_))));
        let mut other = Mlp::zeros(&[3, 5, 2]).unwrap();
        assert!(copy_parameters(&net, &mut other).is_err());
        let cache = net.forward_cached(array![[1.0, 2.0, 3.0]].view()).unwrap();
        assert!(net.backward(&cache, array![[1.0, 2.0, 3.0]].view()).is_err());
    }

    #[test]
    fn forward_matches_hand_computation() {
        let net = Mlp::from_layers(vec![
            Dense { weights: array![[1.0, -2.0], [0.5, 0.25], [-1.0, 1.0]], bias: array![0.1, -0.2, 0.0] },
            Dense { weights: array![[2.0, -1.0, 3.0]], bias: array![0.5] },
        ])
        .unwrap();
        // x = (1, 2): hidden pre-activations (-2.9, 0.8, 1.0), ReLU -> (0, 0.8, 1.0)
        // output 2*0 - 0.8 + 3*1.0 + 0.5 = 2.7
        let y = net.forward(&[1.0, 2.0]).unwrap();
        assert!((y[0] - 2.7).abs() < 1e-12);
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::new(&[4, 7, 5, 2], &mut rng).unwrap();
        let x = Array2::from_shape_fn((3, 4), |(i, j)| ((i * 4 + j) as f64 * 0.7).sin());
        let go = Array2::from_shape_fn((3, 2), |(i, j)| 0.5 - (i + 2 * j) as f64 * 0.3);
        let loss = |n: &Mlp| (n.forward_batch(x.view()).unwrap() * &go).sum();
        let g = net.backward(&net.forward_cached(x.view()).unwrap(), go.view()).unwrap();
        let h = 1e-6;
        for l in 0..3 {
            for idx in 0..net.layers()[l].weights.len() {
                let (mut plus, mut minus) = (net.clone(), net.clone());
                plus.layers_mut()[l].weights.as_slice_mut().unwrap()[idx] += h;
                minus.layers_mut()[l].weights.as_slice_mut().unwrap()[idx] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let an = g.layers[l].weights.as_slice().unwrap()[idx];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "layer {l} weight {idx}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(&[4, 6, 3], &mut rng).unwrap();
        let x = Array2::from_shape_fn((5, 4), |(i, j)| (i as f64 - j as f64) * 0.3);
        let cache = net.forward_cached(x.view()).unwrap();
        let g = net.backward(&cache, Array2::zeros((5, 3)).view()).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn linear_layer_gradient_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::new(&[3, 2], &mut rng).unwrap();
        let x = array![[0.5, -1.0, 2.0]];
        let go = array![[1.5, -0.25]];
        let cache = net.forward_cached(x.view()).unwrap();
        let g = net.backward(&cache, go.view()).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                assert_eq!(g.layers[0].weights[[o, i]], go[[0, o]] * x[[0, i]]);
            }
            assert_eq!(g.layers[0].bias[o], go[[0, o]]);
        }
    }

    #[test]
    fn dead_relu_blocks_gradient() {
        // hidden unit 0 always negative, unit 1 positive
        let l1 = Dense { weights: array![[0.0, 0.0], [1.0, 1.0]], bias: array![-1.0, 1.0] };
        let l2 = Dense { weights: array![[2.0, 3.0]], bias: array![0.0] };
        let net = Mlp::from_layers(vec![l1, l2]).unwrap();
        let cache = net.forward_cached(array![[0.3, 0.4]].view()).unwrap();
        let g = net.backward(&cache, array![[1.0]].view()).unwrap();
        assert_eq!(g.layers[0].weights.row(0).to_vec(), vec![0.0, 0.0]);
        assert_eq!(g.layers[0].bias[0], 0.0);
        assert!(g.layers[0].bias[1] != 0.0);
    }

    #[test]
    fn adam_zero_grad_leaves_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Mlp::new(&[2, 3, 1], &mut rng).unwrap();
        let before = net.clone();
        let mut opt = Adam::new(&net, AdamConfig::default());
        let zero = Gradients { layers: Mlp::zeros(&[2, 3, 1]).unwrap().layers };
        opt.update(&mut net, &zero).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn adam_first_step_magnitude() {
        // from zero moments: delta = -lr * g / (|g| + eps)
        let mut net = Mlp::zeros(&[1, 1]).unwrap();
        let mut opt = Adam::new(&net, AdamConfig::default());
        let g = 0.37;
        let grads = Gradients { layers: vec![Dense { weights: array![[g]], bias: array![-g] }] };
        opt.update(&mut net, &grads).unwrap();
        let expected = -1e-4 * g / (g.abs() + 1e-8);
        assert!((net.layers()[0].weights[[0, 0]] - expected).abs() < 1e-15);
        assert!((net.layers()[0].bias[0] + expected).abs() < 1e-15);
    }

    #[test]
    fn adam_constant_gradient_step_approaches_lr() {
        let mut net = Mlp::zeros(&[1, 1]).unwrap();
        let mut opt = Adam::new(&net, AdamConfig::default());
        let grads = Gradients { layers: vec![Dense { weights: array![[2.5]], bias: array![0.001] }] };
        let mut prev = 0.0;
        let mut last_step = 0.0;
        for _ in 0..500 {
            opt.update(&mut net, &grads).unwrap();
            let w = net.layers()[0].weights[[0, 0]];
            last_step = prev - w;
            prev = w;
        }
        assert!((last_step - 1e-4).abs() < 1e-10, "{last_step}");
        // bias sees a tiny gradient yet moves at the same normalized rate
        assert!((net.layers()[0].bias[0] + 500.0 * 1e-4).abs() < 1e-6);
    }

    #[test]
    fn copy_is_deep_and_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut src = Mlp::new(&[8, 16, 2], &mut rng).unwrap();
        let mut dst = Mlp::new(&[8, 16, 2], &mut rng).unwrap();
        copy_parameters(&src, &mut dst).unwrap();
        let x = [0.1, -0.2, 0.3, 0.4, 0.5, -0.6, 0.7, 0.8];
        assert_eq!(src.forward(&x).unwrap(), dst.forward(&x).unwrap());
        src.layers_mut()[0].weights[[0, 0]] += 1.0;
        assert_ne!(src.layers()[0].weights, dst.layers()[0].weights);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::new(&[8, 128, 64, 2], &mut rng).unwrap();
        let mut opt = Adam::new(&net, AdamConfig::default());
        let mut trained = net.clone();
        let cache = trained.forward_cached(Array2::ones((2, 8)).view()).unwrap();
        let g = trained.backward(&cache, Array2::ones((2, 2)).view()).unwrap();
        opt.update(&mut trained, &g).unwrap();
        let meta = CheckpointMeta { seed: 5, training_step: 1, config_hash: "abc".into(), input_norm: None };
        let ck = Checkpoint::from_net(&trained, Some(&opt), meta);
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_net().unwrap(), trained);
        assert_eq!(Adam::restore(&trained, back.optimizer.as_ref().unwrap()).unwrap(), opt);
    }
}
