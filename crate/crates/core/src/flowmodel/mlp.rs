//! Dense conditional velocity network.
//!
//! Input layout is `[x (d) | condition embedding (2A) | time features]`,
//! followed by `hidden.len()` smooth hidden layers and a linear output of
//! width `d`. Parameters are stored flat, layer by layer, each layer as a
//! row-major weight matrix followed by its bias.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::condspace::{standard_normal, ConditionEmbedding};
use crate::error::{ensure_finite, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// `x * sigmoid(x)`
    Silu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Silu => 0,
            Activation::Tanh => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Silu),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VelocityFieldConfig {
    pub data_dim: usize,
    pub cond_dim: usize,
    pub hidden: Vec<usize>,
    pub time_features: usize,
    pub activation: Activation,
}

impl Default for VelocityFieldConfig {
    fn default() -> Self {
        Self {
            data_dim: 6,
            cond_dim: 12,
            hidden: vec![64, 64],
            time_features: 8,
            activation: Activation::Silu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
}

impl LayerShape {
    pub fn param_count(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }
}

impl VelocityFieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 {
            return Err(Error::config("model.data_dim", "must be at least 1"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("model.hidden", "widths must be at least 1"));
        }
        if !self.time_features.is_multiple_of(2) {
            return Err(Error::config("model.time_features", "must be even (sin/cos pairs)"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + self.cond_dim + self.time_features
    }

    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        let mut widths = vec![self.input_dim()];
        widths.extend(&self.hidden);
        widths.push(self.data_dim);
        widths
            .windows(2)
            .map(|w| LayerShape {
                inputs: w[0],
                outputs: w[1],
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(LayerShape::param_count).sum()
    }
}

/// Sinusoidal features `sin(w_j t), cos(w_j t)` with `w_j = pi/2 * 2^j`.
pub fn time_features(t: f64, count: usize) -> impl Iterator<Item = f64> {
    (0..count / 2).flat_map(move |j| {
        let w = std::f64::consts::FRAC_PI_2 * f64::from(1u32 << j);
        [(w * t).sin(), (w * t).cos()]
    })
}

/// Flat parameter vector of the velocity field with its architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    config: VelocityFieldConfig,
    values: Vec<f64>,
}

impl PolicyParams {
    pub fn from_values(config: VelocityFieldConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_count();
        if values.len() != expected {
            return Err(Error::invalid(format!(
                "parameter vector has {} entries, architecture needs {expected}",
                values.len()
            )));
        }
        ensure_finite("policy_params", &values)?;
        Ok(Self { config, values })
    }

    pub fn zeros(config: VelocityFieldConfig) -> Result<Self> {
        let n = config.param_count();
        Self::from_values(config, vec![0.0; n])
    }

    /// LeCun-normal weights, zero biases.
    pub fn init<R: Rng + ?Sized>(config: VelocityFieldConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut values = Vec::with_capacity(config.param_count());
        for shape in config.layer_shapes() {
            let scale = (1.0 / shape.inputs as f64).sqrt();
            for _ in 0..shape.inputs * shape.outputs {
                values.push(scale * standard_normal(rng));
            }
            values.extend(std::iter::repeat_n(0.0, shape.outputs));
        }
        Self::from_values(config, values)
    }

    pub fn config(&self) -> &VelocityFieldConfig {
        &self.config
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Replaces the values; the caller guarantees finiteness via the optimizer.
    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::from_values(self.config.clone(), values)
    }
}

/// Gradient with respect to the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer(pub Vec<f64>);

impl GradientBuffer {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn add_assign(&mut self, other: &GradientBuffer) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Vec<f64>>,
}

fn check_inputs(params: &PolicyParams, x: &[f64], t: f64, e: &ConditionEmbedding) -> Result<()> {
    let cfg = &params.config;
    if x.len() != cfg.data_dim || e.0.len() != cfg.cond_dim {
        return Err(Error::invalid(format!(
            "velocity expects x of {} and embedding of {}, got {} and {}",
            cfg.data_dim,
            cfg.cond_dim,
            x.len(),
            e.0.len()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("time {t} outside [0, 1]")));
    }
    if x.iter().chain(&e.0).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite velocity input"));
    }
    Ok(())
}

fn affine(weights: &[f64], bias: &[f64], input: &[f64], out: &mut Vec<f64>) {
    let n_in = input.len();
    out.clear();
    out.extend(bias.iter().enumerate().map(|(o, b)| {
        let row = &weights[o * n_in..(o + 1) * n_in];
        b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>()
    }));
}

fn forward_impl(
    params: &PolicyParams,
    x: &[f64],
    t: f64,
    e: &ConditionEmbedding,
    mut cache: Option<&mut ForwardCache>,
) -> Result<Vec<f64>> {
    check_inputs(params, x, t, e)?;
    let cfg = &params.config;
    let mut h: Vec<f64> = Vec::with_capacity(cfg.input_dim());
    h.extend_from_slice(x);
    h.extend_from_slice(&e.0);
    h.extend(time_features(t, cfg.time_features));

    let shapes = cfg.layer_shapes();
    let last = shapes.len() - 1;
    let mut offset = 0;
    let mut z = Vec::new();
    for (l, shape) in shapes.iter().enumerate() {
        let nw = shape.inputs * shape.outputs;
        let w = &params.values[offset..offset + nw];
        let b = &params.values[offset + nw..offset + nw + shape.outputs];
        offset += shape.param_count();
        affine(w, b, &h, &mut z);
        if let Some(c) = cache.as_deref_mut() {
            c.inputs.push(h.clone());
        }
        if l == last {
            h = std::mem::take(&mut z);
        } else {
            if let Some(c) = cache.as_deref_mut() {
                c.pre.push(z.clone());
            }
            h.clear();
            h.extend(z.iter().map(|&v| cfg.activation.apply(v)));
        }
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("velocity", format!("non-finite output at t={t}")));
    }
    Ok(h)
}

/// `v_theta(x, t, c)`.
pub fn velocity(params: &PolicyParams, x: &[f64], t: f64, e: &ConditionEmbedding) -> Result<Vec<f64>> {
    forward_impl(params, x, t, e, None)
}

pub fn velocity_with_cache(
    params: &PolicyParams,
    x: &[f64],
    t: f64,
    e: &ConditionEmbedding,
) -> Result<(Vec<f64>, ForwardCache)> {
    let mut cache = ForwardCache {
        inputs: Vec::new(),
        pre: Vec::new(),
    };
    let out = forward_impl(params, x, t, e, Some(&mut cache))?;
    Ok((out, cache))
}

/// Vector-Jacobian product: accumulates `dy^T dv/dtheta` into `grad` and
/// returns `dy^T dv/d(input)` for the full network input.
pub fn velocity_vjp(params: &PolicyParams, cache: &ForwardCache, dy: &[f64], grad: &mut [f64]) -> Vec<f64> {
    let cfg = &params.config;
    let shapes = cfg.layer_shapes();
    let mut offsets = Vec::with_capacity(shapes.len());
    let mut offset = 0;
    for s in &shapes {
        offsets.push(offset);
        offset += s.param_count();
    }

    let mut delta = dy.to_vec();
    for l in (0..shapes.len()).rev() {
        let shape = shapes[l];
        let input = &cache.inputs[l];
        let base = offsets[l];
        let nw = shape.inputs * shape.outputs;
        for (o, d) in delta.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            let row = &mut grad[base + o * shape.inputs..base + (o + 1) * shape.inputs];
            for (g, x) in row.iter_mut().zip(input) {
                *g += d * x;
            }
            grad[base + nw + o] += d;
        }
        let weights = &params.values[base..base + nw];
        let mut upstream = vec![0.0; shape.inputs];
        for (o, d) in delta.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            let row = &weights[o * shape.inputs..(o + 1) * shape.inputs];
            for (u, w) in upstream.iter_mut().zip(row) {
                *u += d * w;
            }
        }
        if l > 0 {
            for (u, z) in upstream.iter_mut().zip(&cache.pre[l - 1]) {
                *u *= cfg.activation.derivative(*z);
            }
        }
        delta = upstream;
    }
    delta
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use rand::Rng;

    pub(crate) fn tiny_config() -> VelocityFieldConfig {
        VelocityFieldConfig {
            data_dim: 2,
            cond_dim: 4,
            hidden: vec![6, 6],
            time_features: 4,
            activation: Activation::Silu,
        }
    }

    fn emb(v: &[f64]) -> ConditionEmbedding {
        ConditionEmbedding(v.to_vec())
    }

    #[test]
    fn zero_params_give_zero_velocity() {
        let p = PolicyParams::zeros(VelocityFieldConfig::default()).unwrap();
        let v = velocity(&p, &[0.3; 6], 0.4, &emb(&[1.0; 12])).unwrap();
        assert_eq!(v, vec![0.0; 6]);
    }

    #[test]
    fn velocity_is_deterministic() {
        let p = PolicyParams::init(VelocityFieldConfig::default(), &mut stream(1, Purpose::Init, &[])).unwrap();
        let x = [0.1, -0.2, 0.3, 0.0, 1.0, -1.0];
        let e = emb(&[1.0, 0.5, 1.0, -0.5, 0.0, 0.0, 0.0, 0.0, 1.0, 0.2, 0.0, 0.0]);
        let a = velocity(&p, &x, 0.7, &e).unwrap();
        let b = velocity(&p, &x, 0.7, &e).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = PolicyParams::zeros(tiny_config()).unwrap();
        assert!(velocity(&p, &[f64::NAN, 0.0], 0.5, &emb(&[0.0; 4])).is_err());
        assert!(velocity(&p, &[0.0, 0.0], 1.5, &emb(&[0.0; 4])).is_err());
        assert!(velocity(&p, &[0.0], 0.5, &emb(&[0.0; 4])).is_err());
        assert!(PolicyParams::from_values(tiny_config(), vec![0.0; 3]).is_err());
    }

    #[test]
    fn tiny_model_is_small() {
        assert!(tiny_config().param_count() <= 200);
    }

    #[test]
    fn parameter_perturbation_is_locally_lipschitz() {
        // L is the Frobenius norm of the parameter Jacobian, assembled
        // row by row from the VJP; it bounds the spectral norm.
        let cfg = VelocityFieldConfig::default();
        let mut rng = stream(12, Purpose::Init, &[]);
        let p = PolicyParams::init(cfg.clone(), &mut rng).unwrap();
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let e = emb(&[1.0, 0.5, 1.0, -1.0, 0.0, 0.0, 1.0, 1.2, 0.0, 0.0, 0.0, 0.0]);
        let t = 0.6;
        let (v0, cache) = velocity_with_cache(&p, &x, t, &e).unwrap();
        let mut l2 = 0.0;
        for j in 0..6 {
            let mut dy = vec![0.0; 6];
            dy[j] = 1.0;
            let mut row = vec![0.0; p.len()];
            velocity_vjp(&p, &cache, &dy, &mut row);
            l2 += row.iter().map(|g| g * g).sum::<f64>();
        }
        let lip = l2.sqrt();
        for _ in 0..50 {
            let radius = 10f64.powf(rng.random_range(-6.0..-3.0));
            let mut d: Vec<f64> = (0..p.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            d.iter_mut().for_each(|v| *v *= radius / n);
            let q = p.with_values(p.values().iter().zip(&d).map(|(a, b)| a + b).collect()).unwrap();
            let v1 = velocity(&q, &x, t, &e).unwrap();
            let dv = v0.iter().zip(&v1).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            assert!(dv <= lip * radius * 1.01, "|dv| {dv} > L {lip} * {radius}");
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let cfg = tiny_config();
        let mut rng = stream(9, Purpose::Init, &[]);
        for _ in 0..10 {
            let p = PolicyParams::init(cfg.clone(), &mut rng).unwrap();
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let e = emb(&[1.0, rng.random_range(-2.0..2.0), 0.0, 0.0]);
            let t = rng.random_range(0.0..1.0);
            let dy: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (_, cache) = velocity_with_cache(&p, &x, t, &e).unwrap();
            let mut grad = vec![0.0; p.len()];
            let dinput = velocity_vjp(&p, &cache, &dy, &mut grad);

            let f = |vals: &[f64], x: &[f64]| {
                let q = p.with_values(vals.to_vec()).unwrap();
                let v = velocity(&q, x, t, &e).unwrap();
                v.iter().zip(&dy).map(|(a, b)| a * b).sum::<f64>()
            };
            let h = 1e-5;
            for j in 0..p.len() {
                let mut plus = p.values().to_vec();
                let mut minus = plus.clone();
                plus[j] += h;
                minus[j] -= h;
                let fd = (f(&plus, &x) - f(&minus, &x)) / (2.0 * h);
                let scale = fd.abs().max(grad[j].abs()).max(1e-8);
                assert!((fd - grad[j]).abs() / scale < 1e-5, "param {j}: fd {fd} vs {}", grad[j]);
            }
            for j in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                let fd = (f(p.values(), &xp) - f(p.values(), &xm)) / (2.0 * h);
                assert!((fd - dinput[j]).abs() < 1e-7 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn output_is_finite_over_time_grid() {
        let p = PolicyParams::init(VelocityFieldConfig::default(), &mut stream(2, Purpose::Init, &[])).unwrap();
        let e = emb(&[1.0, 2.0, 1.0, -3.0, 0.0, 0.0, 1.0, 3.0, 0.0, 0.0, 0.0, 0.0]);
        for i in 0..=1000 {
            let t = i as f64 / 1000.0;
            let v = velocity(&p, &[3.0, -3.0, 2.0, 0.0, 1.0, -2.0], t, &e).unwrap();
            assert!(v.iter().all(|x| x.is_finite()));
        }
    }
}
