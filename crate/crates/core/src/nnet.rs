//! Minimal dense feed-forward networks with hand-written reverse-mode
//! gradients, SGD/Adam, and a plain-text checkpoint format.
//!
//! Hidden layers use ReLU and the output layer is linear. Weights are stored
//! row-major per layer with shape `(out × in)`. All arithmetic is `f64`.
//!
//! Checkpoint layout (`NNET v1`):
//!
//! ```text
//! NNET v1
//! dims: 2 3 1
//! layer 0 relu
//! w: <row 0>
//! w: <row 1>
//! w: <row 2>
//! b: <bias>
//! layer 1 identity
//! ...
//! end
//! ```
//!
//! Every number is written with 17 significant digits so files round-trip
//! bit-exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, parse_err, Result};
use crate::textio::{fmt_f64, parse_f64s, parse_usizes, LineCursor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn tag(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `(outputs × inputs)`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    dims: Vec<usize>,
    layers: Vec<Layer>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients shaped exactly like the [`MlpParams`] they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBundle {
    pub layers: Vec<LayerGrad>,
}

/// Intermediate activations from a forward pass, reused by the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// `acts[0]` is the input, `acts[k + 1]` the post-activation output of layer `k`.
    acts: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("cache always holds the input")
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(invalid(format!(
            "network needs at least input and output widths, got {dims:?}"
        )));
    }
    if dims.contains(&0) {
        return Err(invalid(format!(
            "layer widths must be positive, got {dims:?}"
        )));
    }
    Ok(())
}

impl MlpParams {
    /// Uniform initialization in `±1/sqrt(fan_in)`, biases zero.
    /// Deterministic for a given `(dims, seed)`.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        check_dims(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::zeros(dims)?;
        for layer in &mut params.layers {
            let bound = 1.0 / (layer.inputs as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(params)
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        check_dims(dims)?;
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| Layer {
                inputs: w[0],
                outputs: w[1],
                weights: vec![0.0; w[0] * w[1]],
                bias: vec![0.0; w[1]],
                activation: if k + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Relu
                },
            })
            .collect();
        Ok(Self {
            dims: dims.to_vec(),
            layers,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Visits every scalar parameter in a fixed order (layer, weights, bias).
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(&mut f);
            l.bias.iter_mut().for_each(&mut f);
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(input)?.acts.pop().unwrap())
    }

    pub fn forward_cached(&self, input: &[f64]) -> Result<ForwardCache> {
        if input.len() != self.input_dim() {
            return Err(invalid(format!(
                "input length {} does not match network input width {}",
                input.len(),
                self.input_dim()
            )));
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.to_vec());
        for layer in &self.layers {
            let x = acts.last().unwrap();
            let mut y = layer.bias.clone();
            for (o, yo) in y.iter_mut().enumerate() {
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                *yo += row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
            }
            if layer.activation == Activation::Relu {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(y);
        }
        Ok(ForwardCache { acts })
    }

    /// Gradient of `upstream · output` with respect to every parameter.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<GradBundle> {
        let cache = self.forward_cached(input)?;
        let mut grads = GradBundle::zeros_like(self);
        self.backward_into(&cache, upstream, &mut grads)?;
        Ok(grads)
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the input.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        grads: &mut GradBundle,
    ) -> Result<Vec<f64>> {
        if upstream.len() != self.output_dim() {
            return Err(invalid(format!(
                "upstream gradient length {} does not match output width {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        grads.check_shape(self)?;
        let mut delta = upstream.to_vec();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Relu {
                for (d, a) in delta.iter_mut().zip(&cache.acts[k + 1]) {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let x = &cache.acts[k];
            let g = &mut grads.layers[k];
            let mut prev = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let row = o * layer.inputs;
                let gw = &mut g.weights[row..row + layer.inputs];
                let w = &layer.weights[row..row + layer.inputs];
                for i in 0..layer.inputs {
                    gw[i] += d * x[i];
                    prev[i] += d * w[i];
                }
            }
            delta = prev;
        }
        Ok(delta)
    }

    pub fn write_checkpoint(&self, out: &mut String) {
        out.push_str("NNET v1\n");
        let dims: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        out.push_str(&format!("dims: {}\n", dims.join(" ")));
        for (k, layer) in self.layers.iter().enumerate() {
            out.push_str(&format!("layer {k} {}\n", layer.activation.tag()));
            for row in layer.weights.chunks(layer.inputs) {
                let vals: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
                out.push_str(&format!("w: {}\n", vals.join(" ")));
            }
            let vals: Vec<String> = layer.bias.iter().map(|v| fmt_f64(*v)).collect();
            out.push_str(&format!("b: {}\n", vals.join(" ")));
        }
        out.push_str("end\n");
    }

    pub fn to_checkpoint(&self) -> String {
        let mut s = String::new();
        self.write_checkpoint(&mut s);
        s
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut cur = LineCursor::new(text);
        let p = Self::read_checkpoint(&mut cur)?;
        if let Some((n, _)) = cur.peek() {
            return Err(parse_err(n, "trailing content after network"));
        }
        Ok(p)
    }

    pub fn read_checkpoint(cur: &mut LineCursor<'_>) -> Result<Self> {
        let (n, header) = cur.next_line()?;
        if header != "NNET v1" {
            return Err(parse_err(
                n,
                format!("expected `NNET v1`, found `{header}`"),
            ));
        }
        let (n, dims) = cur.expect_prefixed("dims")?;
        let dims = parse_usizes(n, dims)?;
        let mut params = Self::zeros(&dims).map_err(|e| parse_err(n, e.to_string()))?;
        for (k, layer) in params.layers.iter_mut().enumerate() {
            let (n, line) = cur.next_line()?;
            let expected = format!("layer {k} {}", layer.activation.tag());
            if line != expected {
                return Err(parse_err(
                    n,
                    format!("expected `{expected}`, found `{line}`"),
                ));
            }
            for row in layer.weights.chunks_mut(layer.inputs) {
                let (n, vals) = cur.expect_prefixed("w")?;
                let vals = parse_f64s(n, vals)?;
                if vals.len() != row.len() {
                    return Err(parse_err(n, "weight row has wrong width"));
                }
                row.copy_from_slice(&vals);
            }
            let (n, vals) = cur.expect_prefixed("b")?;
            let vals = parse_f64s(n, vals)?;
            if vals.len() != layer.bias.len() {
                return Err(parse_err(n, "bias has wrong width"));
            }
            layer.bias.copy_from_slice(&vals);
        }
        let (n, end) = cur.next_line()?;
        if end != "end" {
            return Err(parse_err(n, "expected `end`"));
        }
        Ok(params)
    }
}

impl GradBundle {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    fn check_shape(&self, params: &MlpParams) -> Result<()> {
        let ok =
            self.layers.len() == params.layers.len()
                && self.layers.iter().zip(&params.layers).all(|(g, l)| {
                    g.weights.len() == l.weights.len() && g.bias.len() == l.bias.len()
                });
        if ok {
            Ok(())
        } else {
            Err(invalid("gradient shapes do not match parameters"))
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn scale(&mut self, k: f64) {
        self.iter_mut().for_each(|g| *g *= k);
    }

    pub fn norm_sq(&self) -> f64 {
        self.iter().map(|g| g * g).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.iter().all(|g| *g == 0.0)
    }

    pub fn add_assign(&mut self, other: &GradBundle) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += b;
        }
    }
}

/// Scales a set of bundles so that their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(bundles: &mut [&mut GradBundle], max_norm: f64) -> f64 {
    let norm = bundles.iter().map(|b| b.norm_sq()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for b in bundles.iter_mut() {
            b.scale(k);
        }
    }
    norm
}

/// Mean squared error over components and its gradient with respect to `pred`.
pub fn mse_and_grad(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(invalid(format!(
            "prediction length {} does not match target length {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(invalid("mse of empty vectors"));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self::adam(1e-3)
    }
}

impl OptConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            ..Self::adam(lr)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub config: OptConfig,
    pub step: u64,
    moments: Option<(GradBundle, GradBundle)>,
}

impl OptState {
    pub fn new(config: OptConfig) -> Result<Self> {
        if !(config.lr >= 0.0) || !config.lr.is_finite() {
            return Err(invalid(format!(
                "learning rate must be >= 0, got {}",
                config.lr
            )));
        }
        Ok(Self {
            config,
            step: 0,
            moments: None,
        })
    }
}

/// Applies one optimizer update in place and increments the step counter.
pub fn opt_step(params: &mut MlpParams, grads: &GradBundle, state: &mut OptState) -> Result<()> {
    grads.check_shape(params)?;
    state.step += 1;
    let cfg = state.config;
    match cfg.kind {
        OptimizerKind::Sgd => {
            for (layer, g) in params.layers.iter_mut().zip(&grads.layers) {
                for (w, gw) in layer.weights.iter_mut().zip(&g.weights) {
                    *w -= cfg.lr * gw;
                }
                for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
                    *b -= cfg.lr * gb;
                }
            }
        }
        OptimizerKind::Adam => {
            let (m, v) = state.moments.get_or_insert_with(|| {
                (
                    GradBundle::zeros_like(params),
                    GradBundle::zeros_like(params),
                )
            });
            m.check_shape(params)?;
            let t = state.step as i32;
            let c1 = 1.0 - cfg.beta1.powi(t);
            let c2 = 1.0 - cfg.beta2.powi(t);
            let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            };
            for (k, layer) in params.layers.iter_mut().enumerate() {
                let (g, ml, vl) = (&grads.layers[k], &mut m.layers[k], &mut v.layers[k]);
                for i in 0..layer.weights.len() {
                    update(
                        &mut layer.weights[i],
                        g.weights[i],
                        &mut ml.weights[i],
                        &mut vl.weights[i],
                    );
                }
                for i in 0..layer.bias.len() {
                    update(
                        &mut layer.bias[i],
                        g.bias[i],
                        &mut ml.bias[i],
                        &mut vl.bias[i],
                    );
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    /// Straight triple-loop forward pass, written independently of `forward`.
    fn naive_forward(p: &MlpParams, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for layer in p.layers() {
            let mut next = vec![0.0; layer.outputs];
            for o in 0..layer.outputs {
                let mut acc = layer.bias[o];
                for i in 0..layer.inputs {
                    acc += layer.weights[o * layer.inputs + i] * cur[i];
                }
                next[o] = match layer.activation {
                    Activation::Relu => {
                        if acc > 0.0 {
                            acc
                        } else {
                            0.0
                        }
                    }
                    Activation::Identity => acc,
                };
            }
            cur = next;
        }
        cur
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn randomize_biases(p: &mut MlpParams, rng: &mut ChaCha8Rng) {
        for l in p.layers_mut() {
            for b in &mut l.bias {
                *b = rng.random_range(-0.5..0.5);
            }
        }
    }

    #[test]
    fn init_shapes_follow_dims() {
        let p = MlpParams::init(&[2, 128, 128, 64], 7).unwrap();
        let shapes: Vec<(usize, usize)> =
            p.layers().iter().map(|l| (l.outputs, l.inputs)).collect();
        assert_eq!(shapes, vec![(128, 2), (128, 128), (64, 128)]);
        assert_eq!(p.layers()[0].activation, Activation::Relu);
        assert_eq!(p.layers()[2].activation, Activation::Identity);
        assert!(p.layers().iter().all(|l| l.bias.iter().all(|b| *b == 0.0)));
    }

    #[test]
    fn init_minimal_and_deterministic() {
        let p = MlpParams::init(&[1, 1], 0).unwrap();
        assert_eq!(p.layers()[0].weights.len(), 1);
        assert_eq!(p.layers()[0].bias, vec![0.0]);
        assert!(p.layers()[0].weights[0].abs() <= 1.0);
        let a = MlpParams::init(&[3, 5, 2], 11).unwrap();
        let b = MlpParams::init(&[3, 5, 2], 11).unwrap();
        assert_eq!(a.to_checkpoint(), b.to_checkpoint());
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(matches!(
            MlpParams::init(&[], 0),
            Err(crate::Error::InvalidArgument(_))
        ));
        assert!(MlpParams::init(&[4], 0).is_err());
        assert!(MlpParams::init(&[4, 0, 2], 0).is_err());
    }

    #[test]
    fn forward_zero_and_identity() {
        let p = MlpParams::zeros(&[3, 4, 2]).unwrap();
        assert_eq!(p.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);

        let mut id = MlpParams::zeros(&[3, 3]).unwrap();
        for i in 0..3 {
            id.layers_mut()[0].weights[i * 3 + i] = 1.0;
        }
        assert_eq!(id.forward(&[0.5, -7.0, 2.0]).unwrap(), vec![0.5, -7.0, 2.0]);
        assert!(id.forward(&[1.0]).is_err());
    }

    #[test]
    fn forward_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..20 {
            let mut p = MlpParams::init(&[6, 9, 7, 3], seed).unwrap();
            randomize_biases(&mut p, &mut rng);
            let x = rand_vec(&mut rng, 6);
            let a = p.forward(&x).unwrap();
            let b = naive_forward(&p, &x);
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_zero_upstream_and_linear_case() {
        let p = MlpParams::init(&[4, 5, 3], 1).unwrap();
        let g = p.backward(&[1.0, 2.0, 3.0, 4.0], &[0.0; 3]).unwrap();
        assert!(g.is_zero());

        // loss = w · x for a 1-output linear layer: d/dw = x, d/db = 1
        let lin = MlpParams::init(&[3, 1], 5).unwrap();
        let x = [0.3, -1.2, 2.5];
        let g = lin.backward(&x, &[1.0]).unwrap();
        assert_eq!(g.layers[0].weights, x.to_vec());
        assert_eq!(g.layers[0].bias, vec![1.0]);
        assert!(lin.backward(&x, &[1.0, 2.0]).is_err());
    }

    /// Central finite differences of `upstream · forward(x)` for every parameter.
    fn finite_difference_check(dims: &[usize], seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
        let mut p = MlpParams::init(dims, seed).unwrap();
        randomize_biases(&mut p, &mut rng);
        let x = rand_vec(&mut rng, dims[0]);
        let up = rand_vec(&mut rng, *dims.last().unwrap());
        let analytic: Vec<f64> = p.backward(&x, &up).unwrap().iter().copied().collect();
        let objective = |q: &MlpParams| -> f64 {
            q.forward(&x)
                .unwrap()
                .iter()
                .zip(&up)
                .map(|(a, b)| a * b)
                .sum()
        };
        let h = 1e-5;
        let mut idx = 0;
        let n = p.num_params();
        for k in 0..n {
            let mut plus = p.clone();
            let mut minus = p.clone();
            let mut i = 0;
            plus.for_each_param_mut(|v| {
                if i == k {
                    *v += h;
                }
                i += 1;
            });
            i = 0;
            minus.for_each_param_mut(|v| {
                if i == k {
                    *v -= h;
                }
                i += 1;
            });
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let a = analytic[idx];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (a - numeric).abs() / denom < 1e-4,
                "param {k}: analytic {a} vs numeric {numeric}"
            );
            idx += 1;
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        finite_difference_check(&[3, 4, 5, 2], 1);
        finite_difference_check(&[8, 16, 16, 4], 2);
        finite_difference_check(&[5, 7, 3], 3);
    }

    #[test]
    fn mse_examples() {
        let (l, g) = mse_and_grad(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g, vec![0.0, 0.0]);
        let (l, g) = mse_and_grad(&[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(l, 0.5);
        assert_eq!(g, vec![1.0, 0.0]);
        assert!(mse_and_grad(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mse_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pred = rand_vec(&mut rng, 7);
        let target = rand_vec(&mut rng, 7);
        let (_, g) = mse_and_grad(&pred, &target).unwrap();
        let h = 1e-6;
        for i in 0..pred.len() {
            let mut p = pred.clone();
            p[i] += h;
            let lp = mse_and_grad(&p, &target).unwrap().0;
            p[i] -= 2.0 * h;
            let lm = mse_and_grad(&p, &target).unwrap().0;
            let numeric = (lp - lm) / (2.0 * h);
            assert!((numeric - g[i]).abs() / g[i].abs().max(1e-8) < 1e-6);
        }
    }

    #[test]
    fn sgd_and_zero_grad_steps() {
        let mut p = MlpParams::zeros(&[1, 1]).unwrap();
        p.layers_mut()[0].weights[0] = 1.0;
        let mut g = GradBundle::zeros_like(&p);
        g.layers[0].weights[0] = 1.0;
        let mut st = OptState::new(OptConfig::sgd(0.1)).unwrap();
        opt_step(&mut p, &g, &mut st).unwrap();
        assert!((p.layers()[0].weights[0] - 0.9).abs() < 1e-15);
        assert_eq!(st.step, 1);

        let before = p.clone();
        let mut adam = OptState::new(OptConfig::adam(1e-3)).unwrap();
        opt_step(&mut p, &GradBundle::zeros_like(&before), &mut adam).unwrap();
        assert_eq!(p, before);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn adam_single_scalar_step_by_hand() {
        let mut p = MlpParams::zeros(&[1, 1]).unwrap();
        p.layers_mut()[0].weights[0] = 0.5;
        let mut g = GradBundle::zeros_like(&p);
        g.layers[0].weights[0] = 0.2;
        let mut st = OptState::new(OptConfig::adam(0.01)).unwrap();
        opt_step(&mut p, &g, &mut st).unwrap();
        // m = 0.1*0.2 = 0.02, v = 0.001*0.04 = 4e-5; mhat = 0.2, vhat = 0.04
        let expected = 0.5 - 0.01 * 0.2 / (0.04f64.sqrt() + 1e-8);
        assert!((p.layers()[0].weights[0] - expected).abs() < 1e-12);
        assert_eq!(p.layers()[0].bias[0], 0.0);
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let mut p = MlpParams::init(&[3, 4, 2], 42).unwrap();
        p.layers_mut()[1].bias[0] = 1.0 / 3.0;
        let text = p.to_checkpoint();
        assert!(text.starts_with("NNET v1\ndims: 3 4 2\n"));
        let q = MlpParams::from_checkpoint(&text).unwrap();
        assert_eq!(p, q);
        let bad = text.replace("layer 1 identity", "layer 1 relu");
        match MlpParams::from_checkpoint(&bad) {
            Err(crate::Error::Parse { line, .. }) => assert!(line > 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn mse_is_nonnegative_and_zero_iff_equal(
            a in proptest::collection::vec(-10.0f64..10.0, 1..8),
            shift in -1.0f64..1.0,
        ) {
            let b: Vec<f64> = a.iter().map(|v| v + shift).collect();
            let (l, _) = mse_and_grad(&a, &b).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l == 0.0, a == b);
        }

        #[test]
        fn sgd_zero_grad_is_identity(seed in 0u64..1000, lr in 0.0f64..1.0) {
            let mut p = MlpParams::init(&[3, 4, 2], seed).unwrap();
            let before = p.clone();
            let mut st = OptState::new(OptConfig::sgd(lr)).unwrap();
            st.step = seed;
            opt_step(&mut p, &GradBundle::zeros_like(&before), &mut st).unwrap();
            prop_assert_eq!(p, before);
            prop_assert_eq!(st.step, seed + 1);
        }

        #[test]
        fn checkpoint_round_trip_bit_exact(seed in 0u64..10_000) {
            let p = MlpParams::init(&[2, 3, 3, 1], seed).unwrap();
            let q = MlpParams::from_checkpoint(&p.to_checkpoint()).unwrap();
            prop_assert_eq!(p, q);
        }
    }
}
