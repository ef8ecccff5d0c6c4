//! Dense tanh networks with exact backpropagation and Adam.
//!
//! Parameters live in one flat `Vec<f64>`. Layer `i` maps `dims[i]` inputs
//! to `dims[i + 1]` outputs and occupies `dims[i + 1] * dims[i]` row-major
//! weights followed by `dims[i + 1]` biases. Hidden layers use tanh, the
//! output layer is linear.
//!
//! Checkpoint layout (little endian):
//!
//! ```text
//! u8      version (= 1)
//! u32     number of dims L
//! u32 * L dims
//! f64 * P parameters in the flat order above
//! ```

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    params: Vec<f64>,
}

/// Activations recorded by [`Mlp::forward`]: entry `i` is the input to
/// layer `i`, the last entry is the network output.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("non-empty cache")
    }
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(dims)?;
        let mut offset = 0;
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut net.params[offset..offset + fan_in * fan_out] {
                *p = rng.random_range(-limit..=limit);
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Shape(format!("layer dims must be >= 2 positive sizes, got {dims:?}")));
        }
        Ok(Mlp {
            dims: dims.to_vec(),
            params: vec![0.0; param_count(dims)],
        })
    }

    pub fn from_params(dims: &[usize], params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(dims)?;
        if params.len() != net.params.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {} parameters, got {}",
                net.params.len(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("network parameter".into()));
        }
        net.params = params;
        Ok(net)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("dims checked")
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Offset of layer `i`'s weights, plus its `(inputs, outputs)`.
    fn layer(&self, i: usize) -> (usize, usize, usize) {
        let offset = param_count(&self.dims[..=i]);
        (offset, self.dims[i], self.dims[i + 1])
    }

    /// Mutable views of layer `i`'s weights and biases.
    pub fn layer_mut(&mut self, i: usize) -> (&mut [f64], &mut [f64]) {
        let (off, fan_in, fan_out) = self.layer(i);
        let (w, b) = self.params[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
        (w, b)
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        let mut activations = Vec::with_capacity(self.dims.len());
        activations.push(input.to_vec());
        let last = self.num_layers() - 1;
        for i in 0..self.num_layers() {
            let (off, fan_in, fan_out) = self.layer(i);
            let w = &self.params[off..off + fan_in * fan_out];
            let b = &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            let x = activations.last().expect("input pushed");
            let mut y: Vec<f64> = (0..fan_out)
                .map(|r| b[r] + dot(&w[r * fan_in..(r + 1) * fan_in], x))
                .collect();
            if i != last {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            activations.push(y);
        }
        let out = activations.last().expect("output pushed").clone();
        Ok((out, ForwardCache { activations }))
    }

    /// Output only.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.forward(input).map(|(y, _)| y)
    }

    /// Gradient of a scalar loss with respect to every parameter, given
    /// `dL/d(output)`. Accumulates into `grads` (same layout as the params).
    pub fn backward_into(&self, cache: &ForwardCache, output_grad: &[f64], grads: &mut [f64]) -> Result<()> {
        if cache.activations.len() != self.dims.len()
            || cache.activations.iter().zip(&self.dims).any(|(a, &d)| a.len() != d)
        {
            return Err(Error::Shape("forward cache does not match network".into()));
        }
        if output_grad.len() != self.output_dim() {
            return Err(Error::Shape(format!(
                "output gradient has {} entries, network has {} outputs",
                output_grad.len(),
                self.output_dim()
            )));
        }
        if grads.len() != self.params.len() {
            return Err(Error::Shape("gradient buffer does not match parameters".into()));
        }
        let last = self.num_layers() - 1;
        // delta = dL/d(pre-activation) of the current layer.
        let mut delta = output_grad.to_vec();
        for i in (0..self.num_layers()).rev() {
            let (off, fan_in, fan_out) = self.layer(i);
            if i != last {
                let y = &cache.activations[i + 1];
                delta.iter_mut().zip(y).for_each(|(d, y)| *d *= 1.0 - y * y);
            }
            let x = &cache.activations[i];
            let (gw, gb) = grads[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
            for r in 0..fan_out {
                let d = delta[r];
                gb[r] += d;
                if d != 0.0 {
                    gw[r * fan_in..(r + 1) * fan_in]
                        .iter_mut()
                        .zip(x)
                        .for_each(|(g, xi)| *g += d * xi);
                }
            }
            if i > 0 {
                let w = &self.params[off..off + fan_in * fan_out];
                let mut prev = vec![0.0; fan_in];
                for r in 0..fan_out {
                    let d = delta[r];
                    if d != 0.0 {
                        prev.iter_mut()
                            .zip(&w[r * fan_in..(r + 1) * fan_in])
                            .for_each(|(p, wi)| *p += d * wi);
                    }
                }
                delta = prev;
            }
        }
        Ok(())
    }

    pub fn backward(&self, cache: &ForwardCache, output_grad: &[f64]) -> Result<Vec<f64>> {
        let mut grads = vec![0.0; self.params.len()];
        self.backward_into(cache, output_grad, &mut grads)?;
        Ok(grads)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&[CHECKPOINT_VERSION])?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for &d in &self.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let io = |e: std::io::Error| Error::Checkpoint(e.to_string());
        let mut version = [0u8; 1];
        r.read_exact(&mut version).map_err(io)?;
        if version[0] != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported network version {}", version[0])));
        }
        let n = read_u32(&mut r).map_err(io)? as usize;
        if !(2..=64).contains(&n) {
            return Err(Error::Checkpoint(format!("implausible layer count {n}")));
        }
        let dims = (0..n)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(io)?;
        let count = param_count(&dims);
        let mut params = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut buf).map_err(io)?;
            params.push(f64::from_le_bytes(buf));
        }
        Self::from_params(&dims, params).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(num_params: usize, learning_rate: f64) -> Self {
        AdamState {
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// Applies one update. A non-finite gradient rejects the whole step and
    /// leaves both the parameters and the optimizer state untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::Shape(format!(
                "adam: {} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            let m = self.beta1 * self.first_moment[i] + (1.0 - self.beta1) * g;
            let v = self.beta2 * self.second_moment[i] + (1.0 - self.beta2) * g * g;
            self.first_moment[i] = m;
            self.second_moment[i] = v;
            params[i] -= self.learning_rate * (m / c1) / ((v / c2).sqrt() + self.epsilon);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::SimRng;
    use rand::SeedableRng;

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[3, 4, 2]).unwrap();
        assert_eq!(net.predict(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer() {
        let mut net = Mlp::zeros(&[3, 3]).unwrap();
        let (w, _) = net.layer_mut(0);
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        assert_eq!(net.predict(&[0.5, -1.5, 2.0]).unwrap(), vec![0.5, -1.5, 2.0]);
    }

    #[test]
    fn hand_computed_two_two_one() {
        // hidden: h = tanh(W1 x + b1), out = w2 . h + b2
        let params = vec![
            0.5, -0.3, // W1 row 0
            0.8, 0.2, // W1 row 1
            0.1, -0.1, // b1
            1.5, -2.0, // w2
            0.25, // b2
        ];
        let net = Mlp::from_params(&[2, 2, 1], params).unwrap();
        let x = [0.7, -1.2];
        let h0 = (0.5 * 0.7 + -0.3 * -1.2 + 0.1f64).tanh();
        let h1 = (0.8 * 0.7 + 0.2 * -1.2 - 0.1f64).tanh();
        let expected = 1.5 * h0 - 2.0 * h1 + 0.25;
        let y = net.predict(&x).unwrap();
        assert!((y[0] - expected).abs() < 1e-12);
        // tanh(0.81) and tanh(0.22) evaluated separately
        assert!((y[0] - (1.5 * 0.669_590_259_618_770_7 - 2.0 * 0.216_518_061_493_028_85 + 0.25)).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        let net = Mlp::zeros(&[3, 2]).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::Shape(_))));
        let (_, cache) = net.forward(&[1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(net.backward(&cache, &[1.0]), Err(Error::Shape(_))));
        let other = Mlp::zeros(&[4, 2]).unwrap();
        assert!(matches!(other.backward(&cache, &[1.0, 1.0]), Err(Error::Shape(_))));
        assert!(Mlp::zeros(&[3]).is_err());
        assert!(Mlp::zeros(&[3, 0, 1]).is_err());
    }

    #[test]
    fn zero_output_gradient() {
        let net = Mlp::new(&[3, 5, 2], &mut SimRng::seed_from_u64(1)).unwrap();
        let (_, cache) = net.forward(&[0.1, 0.2, 0.3]).unwrap();
        assert!(net.backward(&cache, &[0.0, 0.0]).unwrap().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn linear_least_squares_gradient() {
        // L = 0.5 * |W x + b - y|^2  =>  dW = r x^T, db = r with r = W x + b - y
        let net = Mlp::from_params(&[2, 2], vec![1.0, 2.0, -1.0, 0.5, 0.3, -0.2]).unwrap();
        let x = [0.4, -0.6];
        let y = [1.0, 0.0];
        let (out, cache) = net.forward(&x).unwrap();
        let r: Vec<f64> = out.iter().zip(&y).map(|(o, t)| o - t).collect();
        let g = net.backward(&cache, &r).unwrap();
        let expected = [r[0] * x[0], r[0] * x[1], r[1] * x[0], r[1] * x[1], r[0], r[1]];
        for (a, e) in g.iter().zip(expected) {
            assert!((a - e).abs() < 1e-14);
        }
    }

    #[test]
    fn glorot_bounds_and_zero_biases() {
        let mut net = Mlp::new(&[8, 64, 4], &mut SimRng::seed_from_u64(2)).unwrap();
        let limit = (6.0f64 / 72.0).sqrt();
        let (w, b) = net.layer_mut(0);
        assert!(w.iter().all(|v| v.abs() <= limit));
        assert!(b.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn saturating_inputs_stay_finite() {
        let net = Mlp::new(&[2, 16, 16, 1], &mut SimRng::seed_from_u64(3)).unwrap();
        let y = net.predict(&[1e300, -1e300]).unwrap();
        assert!(y[0].is_finite());
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = Mlp::new(&[4, 6, 3], &mut SimRng::seed_from_u64(4)).unwrap();
        let mut buf = Vec::new();
        net.write_to(&mut buf).unwrap();
        assert_eq!(buf[0], CHECKPOINT_VERSION);
        assert_eq!(buf.len(), 1 + 4 + 3 * 4 + 8 * net.params().len());
        assert_eq!(Mlp::read_from(buf.as_slice()).unwrap(), net);
        buf[0] = 9;
        assert!(matches!(Mlp::read_from(buf.as_slice()), Err(Error::Checkpoint(_))));
        assert!(Mlp::read_from(&buf[..10]).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut params = vec![1.0, -2.0, 3.0];
        let mut adam = AdamState::new(3, 1e-3);
        adam.step(&mut params, &[0.0; 3]).unwrap();
        assert_eq!(params, vec![1.0, -2.0, 3.0]);
        assert_eq!(adam.step_count, 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let lr = 3e-4;
        let mut params = vec![0.0, 0.0, 0.0];
        let grads = [2.5, -0.7, 1e-3];
        let mut adam = AdamState::new(3, lr);
        adam.step(&mut params, &grads).unwrap();
        for (p, g) in params.iter().zip(grads) {
            let expected = -lr * g / (g.abs() + 1e-8);
            assert!((p - expected).abs() < 1e-15);
            assert!((p.abs() - lr).abs() < lr * 1e-5);
        }
    }

    #[test]
    fn adam_step_direction_is_scale_invariant() {
        let grads = [0.3, -1.2, 0.05, 4.0];
        let update = |scale: f64| {
            let mut p = vec![0.0; 4];
            let g: Vec<f64> = grads.iter().map(|g| g * scale).collect();
            AdamState::new(4, 1e-3).step(&mut p, &g).unwrap();
            let norm = p.iter().map(|x| x * x).sum::<f64>().sqrt();
            p.into_iter().map(|x| x / norm).collect::<Vec<_>>()
        };
        let (a, b) = (update(1.0), update(37.0));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut params = vec![1.0, 1.0];
        let mut adam = AdamState::new(2, 1e-3);
        let before = adam.clone();
        assert!(matches!(adam.step(&mut params, &[f64::NAN, 0.0]), Err(Error::NonFinite(_))));
        assert_eq!(params, vec![1.0, 1.0]);
        assert_eq!(adam, before);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut rng = SimRng::seed_from_u64(5);
            let mut net = Mlp::new(&[3, 4, 1], &mut rng).unwrap();
            let mut adam = AdamState::new(net.params().len(), 1e-2);
            for k in 0..20 {
                let x = [k as f64 * 0.1, 1.0, -0.5];
                let (y, cache) = net.forward(&x).unwrap();
                let g = net.backward(&cache, &[y[0] - 1.0]).unwrap();
                adam.step(net.params_mut(), &g).unwrap();
            }
            net
        };
        assert_eq!(run(), run());
    }
}
