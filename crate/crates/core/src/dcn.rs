//! Deep cross network with hand-written forward and backward passes.
//!
//! ```text
//! cross:  x_{l+1} = x_0 ⊙ (W_l x_l + b_l) + x_l      (W_l is p×p)
//! deep:   h_{l+1} = f(W_l h_l + b_l)                  (h_0 = x_L)
//! score:  w · h_last + b
//! ```
//!
//! Cross and hidden layers hold separate parameters. `f` is ReLU, with the
//! subgradient at 0 taken as 0.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Identity => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Layer sizes and activation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input_dim: usize,
    pub cross_layers: usize,
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
}

impl Architecture {
    pub fn new(input_dim: usize, cross_layers: usize, hidden_widths: Vec<usize>) -> Self {
        Self {
            input_dim,
            cross_layers,
            hidden_widths,
            activation: Activation::Relu,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("input dimension must be positive"));
        }
        if let Some(i) = self.hidden_widths.iter().position(|&w| w == 0) {
            return Err(Error::invalid(format!("hidden layer {i} has zero width")));
        }
        Ok(())
    }
}

/// Row-major `outputs × inputs` affine map.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn uniform<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            inputs,
            outputs,
            weight: (0..inputs * outputs).map(|_| rng.gen_range(-bound..=bound)).collect(),
            bias: vec![0.0; outputs],
        }
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    /// Accumulates parameter gradients for upstream `dy` at input `x`; returns `Wᵀ dy`.
    fn backprop(&self, x: &[f64], dy: &[f64], grad: &mut Dense) -> Vec<f64> {
        let mut dx = vec![0.0; self.inputs];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            let grow = &mut grad.weight[o * self.inputs..(o + 1) * self.inputs];
            for i in 0..self.inputs {
                grow[i] += g * x[i];
                dx[i] += g * row[i];
            }
            grad.bias[o] += g;
        }
        dx
    }
}

/// Intermediate values from [`Dcn::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `x_0 ..= x_L`
    pub cross_outputs: Vec<Vec<f64>>,
    /// `W_l x_l + b_l` per cross layer
    pub cross_linear: Vec<Vec<f64>>,
    pub hidden_pre: Vec<Vec<f64>>,
    pub hidden_post: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn input(&self) -> &[f64] {
        &self.cross_outputs[0]
    }

    pub fn cross_stack_output(&self) -> &[f64] {
        self.cross_outputs.last().expect("cache holds x_0")
    }
}

/// Network parameters. The same type doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Dcn {
    arch: Architecture,
    pub cross: Vec<Dense>,
    pub hidden: Vec<Dense>,
    pub head: Dense,
}

impl Dcn {
    /// Weights uniform in `±1/√fan_in` from a seeded generator, biases zero.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = arch.input_dim;
        let cross = (0..arch.cross_layers).map(|_| Dense::uniform(p, p, &mut rng)).collect();
        let mut hidden = Vec::with_capacity(arch.hidden_widths.len());
        let mut fan_in = p;
        for &w in &arch.hidden_widths {
            hidden.push(Dense::uniform(fan_in, w, &mut rng));
            fan_in = w;
        }
        let head = Dense::uniform(fan_in, 1, &mut rng);
        Ok(Self {
            arch,
            cross,
            hidden,
            head,
        })
    }

    /// All-zero parameters with the given architecture.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let p = arch.input_dim;
        let cross = (0..arch.cross_layers).map(|_| Dense::zeros(p, p)).collect();
        let mut hidden = Vec::new();
        let mut fan_in = p;
        for &w in &arch.hidden_widths {
            hidden.push(Dense::zeros(fan_in, w));
            fan_in = w;
        }
        Ok(Self {
            head: Dense::zeros(fan_in, 1),
            arch,
            cross,
            hidden,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.arch.clone()).expect("architecture already validated")
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    /// Parameter tensors in a fixed order: cross (W, b)…, hidden (W, b)…, head (W, b).
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.cross
            .iter_mut()
            .chain(self.hidden.iter_mut())
            .chain(std::iter::once(&mut self.head))
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.cross
            .iter()
            .chain(self.hidden.iter())
            .chain(std::iter::once(&self.head))
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn same_shape(&self, other: &Dcn) -> bool {
        self.arch == other.arch
    }

    /// Output of the cross stack alone.
    pub fn cross_stack(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        for layer in &self.cross {
            let z = layer.affine(&cur);
            cur = x.iter().zip(&z).zip(&cur).map(|((x0, z), xl)| x0 * z + xl).collect();
        }
        Ok(cur)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.arch.input_dim {
            return Err(Error::DimMismatch {
                expected: self.arch.input_dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<(f64, ForwardCache)> {
        self.check_input(x)?;
        let mut cross_outputs = Vec::with_capacity(self.cross.len() + 1);
        let mut cross_linear = Vec::with_capacity(self.cross.len());
        cross_outputs.push(x.to_vec());
        for layer in &self.cross {
            let prev = cross_outputs.last().expect("non-empty");
            let z = layer.affine(prev);
            let next = x.iter().zip(&z).zip(prev).map(|((x0, z), xl)| x0 * z + xl).collect();
            cross_linear.push(z);
            cross_outputs.push(next);
        }

        let mut hidden_pre = Vec::with_capacity(self.hidden.len());
        let mut hidden_post: Vec<Vec<f64>> = Vec::with_capacity(self.hidden.len());
        for layer in &self.hidden {
            let input = hidden_post
                .last()
                .unwrap_or_else(|| cross_outputs.last().expect("non-empty"));
            let pre = layer.affine(input);
            let post = pre.iter().map(|&z| self.arch.activation.apply(z)).collect();
            hidden_pre.push(pre);
            hidden_post.push(post);
        }
        let last = hidden_post
            .last()
            .unwrap_or_else(|| cross_outputs.last().expect("non-empty"));
        let score = self.head.affine(last)[0];
        Ok((
            score,
            ForwardCache {
                cross_outputs,
                cross_linear,
                hidden_pre,
                hidden_post,
            },
        ))
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        self.forward(x).map(|(s, _)| s)
    }

    fn check_cache(&self, cache: &ForwardCache) -> Result<()> {
        let p = self.arch.input_dim;
        let ok = cache.cross_outputs.len() == self.cross.len() + 1
            && cache.cross_linear.len() == self.cross.len()
            && cache.cross_outputs.iter().all(|v| v.len() == p)
            && cache.hidden_pre.len() == self.hidden.len()
            && cache.hidden_post.len() == self.hidden.len()
            && cache
                .hidden_pre
                .iter()
                .zip(&self.hidden)
                .all(|(v, l)| v.len() == l.outputs);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("forward cache does not match network shape"))
        }
    }

    /// Adds `upstream · ∂score/∂θ` into `grads`; returns `upstream · ∂score/∂x`.
    pub fn backward_into(&self, cache: &ForwardCache, upstream: f64, grads: &mut Dcn) -> Result<Vec<f64>> {
        self.check_cache(cache)?;
        if !self.same_shape(grads) {
            return Err(Error::invalid("gradient container does not match network shape"));
        }
        let x0 = cache.input();
        let last = cache
            .hidden_post
            .last()
            .map(Vec::as_slice)
            .unwrap_or_else(|| cache.cross_stack_output());
        let mut d = self.head.backprop(last, &[upstream], &mut grads.head);

        for (i, layer) in self.hidden.iter().enumerate().rev() {
            let dpre: Vec<f64> = d
                .iter()
                .zip(&cache.hidden_pre[i])
                .map(|(g, &z)| g * self.arch.activation.derivative(z))
                .collect();
            let input = if i == 0 {
                cache.cross_stack_output()
            } else {
                &cache.hidden_post[i - 1]
            };
            d = layer.backprop(input, &dpre, &mut grads.hidden[i]);
        }

        // d now holds ∂/∂x_L
        let mut dx0_direct = vec![0.0; x0.len()];
        for (l, layer) in self.cross.iter().enumerate().rev() {
            let z = &cache.cross_linear[l];
            let dz: Vec<f64> = d.iter().zip(x0).map(|(g, x)| g * x).collect();
            for ((acc, g), zv) in dx0_direct.iter_mut().zip(&d).zip(z) {
                *acc += g * zv;
            }
            let through_w = layer.backprop(&cache.cross_outputs[l], &dz, &mut grads.cross[l]);
            for (di, tw) in d.iter_mut().zip(through_w) {
                *di += tw;
            }
        }
        for (di, direct) in d.iter_mut().zip(dx0_direct) {
            *di += direct;
        }
        Ok(d)
    }

    /// Gradients of `upstream · score` with respect to every parameter and the input.
    pub fn backward(&self, cache: &ForwardCache, upstream: f64) -> Result<(Dcn, Vec<f64>)> {
        let mut grads = self.zeros_like();
        let dx = self.backward_into(cache, upstream, &mut grads)?;
        Ok((grads, dx))
    }

    /// Rounds every parameter to `f32` precision, the precision of the model file.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    pub(crate) fn from_parts(arch: Architecture, cross: Vec<Dense>, hidden: Vec<Dense>, head: Dense) -> Result<Self> {
        arch.validate()?;
        let shell = Self::zeros(arch.clone())?;
        let net = Self {
            arch,
            cross,
            hidden,
            head,
        };
        let shapes_match = shell
            .layers()
            .zip(net.layers())
            .all(|(a, b)| a.inputs == b.inputs && a.outputs == b.outputs && a.weight.len() == b.weight.len() && a.bias.len() == b.bias.len())
            && shell.cross.len() == net.cross.len()
            && shell.hidden.len() == net.hidden.len();
        if !shapes_match {
            return Err(Error::invalid("layer shapes do not match the architecture"));
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_input(rng: &mut ChaCha8Rng, p: usize) -> Vec<f64> {
        (0..p).map(|_| rng.gen_range(-1.5..1.5)).collect()
    }

    #[test]
    fn init_shapes_and_determinism() {
        let arch = Architecture::new(12, 2, vec![64, 64]);
        let a = Dcn::init(arch.clone(), 5).unwrap();
        let b = Dcn::init(arch, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.tensors().iter().zip(b.tensors()).all(|(x, y)| {
            x.iter().map(|v| v.to_bits()).eq(y.iter().map(|v| v.to_bits()))
        }));
        assert_eq!(a.cross.len(), 2);
        for c in &a.cross {
            assert_eq!((c.outputs, c.inputs), (12, 12));
        }
        assert_eq!((a.hidden[0].outputs, a.hidden[0].inputs), (64, 12));
        assert_eq!((a.hidden[1].outputs, a.hidden[1].inputs), (64, 64));
        assert_eq!((a.head.outputs, a.head.inputs), (1, 64));
        for l in a.layers() {
            assert!(l.bias.iter().all(|&b| b == 0.0));
            let bound = 1.0 / (l.inputs as f64).sqrt();
            assert!(l.weight.iter().all(|w| w.abs() <= bound));
        }
        assert!(Dcn::init(Architecture::new(0, 1, vec![]), 0).is_err());
        assert!(Dcn::init(Architecture::new(3, 1, vec![4, 0]), 0).is_err());
    }

    #[test]
    fn zero_cross_weights_are_identity() {
        let mut net = Dcn::init(Architecture::new(6, 3, vec![4]), 1).unwrap();
        for c in &mut net.cross {
            c.weight.iter_mut().for_each(|w| *w = 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let x = random_input(&mut rng, 6);
            let (_, cache) = net.forward(&x).unwrap();
            assert_eq!(cache.cross_stack_output(), x.as_slice());
        }
    }

    #[test]
    fn cross_layer_hand_example() {
        let mut net = Dcn::zeros(Architecture::new(2, 1, vec![])).unwrap();
        net.cross[0].weight = vec![1.0, 0.0, 0.0, 1.0];
        assert_eq!(net.cross_stack(&[1.0, 2.0]).unwrap(), vec![2.0, 6.0]);
    }

    #[test]
    fn zero_input_leaves_bias_path() {
        let mut net = Dcn::init(Architecture::new(5, 2, vec![3]), 4).unwrap();
        net.head.bias[0] = 0.75;
        let (s, cache) = net.forward(&[0.0; 5]).unwrap();
        assert!(cache.cross_stack_output().iter().all(|&v| v == 0.0));
        assert_eq!(s, 0.75);
    }

    #[test]
    fn residual_property_per_layer() {
        let net = Dcn::init(Architecture::new(4, 3, vec![3]), 8).unwrap();
        let x = [0.3, -1.0, 2.0, 0.5];
        let (_, c) = net.forward(&x).unwrap();
        for l in 0..3 {
            for (i, xi) in x.iter().enumerate() {
                let diff = c.cross_outputs[l + 1][i] - c.cross_outputs[l][i];
                assert!((diff - xi * c.cross_linear[l][i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_pure_and_checks_dims() {
        let net = Dcn::init(Architecture::new(4, 2, vec![8, 8]), 3).unwrap();
        let x = [0.1, 0.2, -0.3, 0.4];
        assert_eq!(net.score(&x).unwrap().to_bits(), net.score(&x).unwrap().to_bits());
        assert!(net.forward(&[1.0]).is_err());
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let net = Dcn::init(Architecture::new(4, 2, vec![5]), 3).unwrap();
        let (_, cache) = net.forward(&[1.0, -2.0, 0.5, 0.3]).unwrap();
        let (g, dx) = net.backward(&cache, 0.0).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_cache_rejected() {
        let a = Dcn::init(Architecture::new(4, 2, vec![5]), 3).unwrap();
        let b = Dcn::init(Architecture::new(4, 1, vec![5]), 3).unwrap();
        let (_, cache) = b.forward(&[0.0; 4]).unwrap();
        assert!(a.backward(&cache, 1.0).is_err());
    }

    #[test]
    fn linear_special_case_gradient_is_composed_row() {
        let mut arch = Architecture::new(3, 0, vec![2]);
        arch.activation = Activation::Identity;
        let net = Dcn::init(arch, 11).unwrap();
        let (_, cache) = net.forward(&[0.4, -0.2, 1.0]).unwrap();
        let (_, dx) = net.backward(&cache, 1.0).unwrap();
        // head (1×2) · W (2×3)
        for (i, d) in dx.iter().enumerate() {
            let expected: f64 = (0..2)
                .map(|o| net.head.weight[o] * net.hidden[0].weight[o * 3 + i])
                .sum();
            assert!((d - expected).abs() < 1e-15);
        }
    }

    fn central_difference(net: &Dcn, x: &[f64], tensor: usize, idx: usize, h: f64) -> f64 {
        let mut plus = net.clone();
        plus.tensors_mut()[tensor][idx] += h;
        let mut minus = net.clone();
        minus.tensors_mut()[tensor][idx] -= h;
        (plus.score(x).unwrap() - minus.score(x).unwrap()) / (2.0 * h)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        let mut seed = 0u64;
        while checked < 100 {
            seed += 1;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = rng.gen_range(1..=16);
            let n_cross = rng.gen_range(0..=3);
            let widths: Vec<usize> = (0..rng.gen_range(0..=2)).map(|_| rng.gen_range(1..=8)).collect();
            let mut net = Dcn::init(Architecture::new(p, n_cross, widths), seed).unwrap();
            for t in net.tensors_mut() {
                t.iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
            }
            let x = random_input(&mut rng, p);
            let (_, cache) = net.forward(&x).unwrap();
            // skip points within reach of a ReLU kink
            if cache.hidden_pre.iter().flatten().any(|z| z.abs() < 1e-3) {
                continue;
            }
            checked += 1;
            let (g, dx) = net.backward(&cache, 1.0).unwrap();
            let analytic: Vec<Vec<f64>> = g.tensors().iter().map(|t| t.to_vec()).collect();
            for (ti, t) in analytic.iter().enumerate() {
                for (i, &a) in t.iter().enumerate() {
                    worst = worst.max(rel_err(a, central_difference(&net, &x, ti, i, h)));
                }
            }
            for i in 0..p {
                let mut xp = x.clone();
                xp[i] += h;
                let mut xm = x.clone();
                xm[i] -= h;
                let fd = (net.score(&xp).unwrap() - net.score(&xm).unwrap()) / (2.0 * h);
                worst = worst.max(rel_err(dx[i], fd));
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
