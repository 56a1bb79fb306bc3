//! Coordinate MLP `f: R^3 -> (-1, 1)` with hand-written reverse-mode gradients.
//!
//! Parameters are stored flat, layer by layer: the row-major weight matrix
//! (`out x in`) followed by the bias vector. `tanh` follows every layer,
//! including the output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Layer widths of the reference architecture.
pub const DEFAULT_LAYERS: [usize; 8] = [3, 6, 12, 24, 12, 6, 3, 1];

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MlpSpec {
    layer_sizes: Vec<usize>,
}

impl Default for MlpSpec {
    fn default() -> Self {
        MlpSpec {
            layer_sizes: DEFAULT_LAYERS.to_vec(),
        }
    }
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Config(
                "an MLP needs at least an input and an output layer".into(),
            ));
        }
        if layer_sizes[0] != 3 || *layer_sizes.last().unwrap() != 1 {
            return Err(Error::Config(format!(
                "layer sizes must start with 3 and end with 1, got {layer_sizes:?}"
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        Ok(MlpSpec { layer_sizes })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.layer_sizes)
    }

    fn neurons(&self) -> usize {
        self.layer_sizes.iter().sum()
    }
}

/// `sum_i (size_i * size_{i+1} + size_{i+1})`.
pub fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    spec: MlpSpec,
    values: Vec<f64>,
}

/// Offsets of one layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct LayerSlot {
    fan_in: usize,
    fan_out: usize,
    weights: usize,
    bias: usize,
    /// Offset of the layer's input activations in the per-point activation buffer.
    act_in: usize,
    act_out: usize,
}

fn slots(sizes: &[usize]) -> Vec<LayerSlot> {
    let mut off = 0;
    let mut act = 0;
    sizes
        .windows(2)
        .map(|p| {
            let slot = LayerSlot {
                fan_in: p[0],
                fan_out: p[1],
                weights: off,
                bias: off + p[0] * p[1],
                act_in: act,
                act_out: act + p[0],
            };
            off += p[0] * p[1] + p[1];
            act += p[0];
            slot
        })
        .collect()
}

impl MlpParams {
    pub fn zeros(spec: &MlpSpec) -> Self {
        MlpParams {
            spec: spec.clone(),
            values: vec![0.0; spec.param_count()],
        }
    }

    /// Weights uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero.
    pub fn init(spec: &MlpSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::zeros(spec);
        for slot in slots(&spec.layer_sizes) {
            let bound = 1.0 / (slot.fan_in as f64).sqrt();
            for w in &mut params.values[slot.weights..slot.bias] {
                *w = rng.gen_range(-bound..bound);
            }
        }
        params
    }

    pub fn from_values(spec: &MlpSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.param_count() {
            return Err(Error::Size(format!(
                "spec needs {} parameters, got {}",
                spec.param_count(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("parameter {i} is not finite")));
        }
        Ok(MlpParams {
            spec: spec.clone(),
            values,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Weight matrix (row-major, `out x in`) and bias of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let s = slots(&self.spec.layer_sizes)[l];
        (
            &self.values[s.weights..s.bias],
            &self.values[s.bias..s.bias + s.fan_out],
        )
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let s = slots(&self.spec.layer_sizes)[l];
        let (w, rest) = self.values[s.weights..s.bias + s.fan_out].split_at_mut(s.bias - s.weights);
        (w, rest)
    }

    /// Index of the layer owning flat parameter `i`.
    pub fn layer_of(&self, i: usize) -> usize {
        slots(&self.spec.layer_sizes)
            .iter()
            .position(|s| i < s.bias + s.fan_out)
            .expect("parameter index in range")
    }

    fn evaluator(&self) -> Evaluator<'_> {
        Evaluator {
            values: &self.values,
            slots: slots(&self.spec.layer_sizes),
            neurons: self.spec.neurons(),
        }
    }

    /// Field values at each point.
    pub fn forward(&self, points: &[[f64; 3]]) -> Result<Vec<f64>> {
        check_points(points)?;
        Ok(self.forward_unchecked(points))
    }

    pub(crate) fn forward_unchecked(&self, points: &[[f64; 3]]) -> Vec<f64> {
        let ev = self.evaluator();
        let mut acts = vec![0.0; ev.neurons];
        points
            .iter()
            .map(|p| {
                ev.forward_point(p, &mut acts);
                acts[ev.neurons - 1]
            })
            .collect()
    }

    /// Forward pass retaining activations for a later [`Tape::backward`].
    pub fn tape(&self, points: &[[f64; 3]]) -> Tape<'_> {
        let ev = self.evaluator();
        let mut acts = vec![0.0; points.len() * ev.neurons];
        for (p, a) in points.iter().zip(acts.chunks_exact_mut(ev.neurons)) {
            ev.forward_point(p, a);
        }
        Tape {
            ev,
            acts,
            len: points.len(),
        }
    }

    /// Gradient of `sum_i upstream[i] * f(points[i])` with respect to every parameter.
    pub fn backward(&self, points: &[[f64; 3]], upstream: &[f64]) -> Result<MlpParams> {
        check_points(points)?;
        if upstream.len() != points.len() {
            return Err(Error::Size(format!(
                "{} upstream values for {} points",
                upstream.len(),
                points.len()
            )));
        }
        let mut grad = MlpParams::zeros(&self.spec);
        self.tape(points).backward(upstream, &mut grad.values);
        Ok(grad)
    }

    /// Same as [`backward`](Self::backward), but over fixed-size chunks
    /// evaluated in parallel and summed in chunk order.
    pub fn backward_chunked(
        &self,
        points: &[[f64; 3]],
        upstream: &[f64],
        chunk: usize,
    ) -> Result<MlpParams> {
        check_points(points)?;
        if upstream.len() != points.len() {
            return Err(Error::Size(format!(
                "{} upstream values for {} points",
                upstream.len(),
                points.len()
            )));
        }
        let chunk = chunk.max(1);
        let partials: Vec<Vec<f64>> = points
            .par_chunks(chunk)
            .zip(upstream.par_chunks(chunk))
            .map(|(p, u)| {
                let mut g = vec![0.0; self.values.len()];
                self.tape(p).backward(u, &mut g);
                g
            })
            .collect();
        let mut grad = MlpParams::zeros(&self.spec);
        for g in partials {
            for (a, b) in grad.values.iter_mut().zip(g) {
                *a += b;
            }
        }
        Ok(grad)
    }

    /// Jacobian `(df/dx, df/dy, df/dz)` at each point, by forward-mode tangents.
    pub fn spatial_gradient(&self, points: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
        check_points(points)?;
        let ev = self.evaluator();
        let mut buf = SecondOrderBuf::new(&ev);
        Ok(points
            .iter()
            .map(|p| {
                ev.forward_tangent(p, &mut buf);
                buf.output_gradient(&ev)
            })
            .collect())
    }

    /// Gradient of `sum_i upstream_f[i] * f(p_i) + upstream_grad[i] . grad_x f(p_i)`
    /// with respect to every parameter, for losses that depend on the spatial gradient.
    pub fn backward_with_spatial(
        &self,
        points: &[[f64; 3]],
        upstream_f: &[f64],
        upstream_grad: &[[f64; 3]],
    ) -> Result<MlpParams> {
        check_points(points)?;
        if upstream_f.len() != points.len() || upstream_grad.len() != points.len() {
            return Err(Error::Size(
                "upstream lengths must match the point count".into(),
            ));
        }
        let ev = self.evaluator();
        let mut buf = SecondOrderBuf::new(&ev);
        let mut grad = MlpParams::zeros(&self.spec);
        for ((p, &uf), ug) in points.iter().zip(upstream_f).zip(upstream_grad) {
            ev.forward_tangent(p, &mut buf);
            ev.backward_second_order(uf, ug, &mut buf, &mut grad.values);
        }
        Ok(grad)
    }

    /// Flips the sign of the output layer, which negates `f` everywhere.
    pub fn negate_output(&mut self) {
        let last = self.spec.layer_sizes.len() - 2;
        let (w, b) = self.layer_mut(last);
        w.iter_mut().chain(b.iter_mut()).for_each(|v| *v = -*v);
    }
}

fn check_points(points: &[[f64; 3]]) -> Result<()> {
    if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::Domain(format!(
            "point {i} has non-finite coordinates"
        )));
    }
    Ok(())
}

struct Evaluator<'a> {
    values: &'a [f64],
    slots: Vec<LayerSlot>,
    neurons: usize,
}

/// Per-point buffers for the tangent (Jacobian) pass; columns are x, y, z.
struct SecondOrderBuf {
    acts: Vec<f64>,
    /// Tangent of each activation, `neurons x 3`.
    tan: Vec<f64>,
    /// Tangent of each pre-activation, `neurons x 3` (input rows unused).
    dz: Vec<f64>,
    adj_a: Vec<f64>,
    adj_t: Vec<f64>,
}

impl SecondOrderBuf {
    fn new(ev: &Evaluator<'_>) -> Self {
        let n = ev.neurons;
        SecondOrderBuf {
            acts: vec![0.0; n],
            tan: vec![0.0; 3 * n],
            dz: vec![0.0; 3 * n],
            adj_a: vec![0.0; n],
            adj_t: vec![0.0; 3 * n],
        }
    }

    fn output_gradient(&self, ev: &Evaluator<'_>) -> [f64; 3] {
        let o = 3 * (ev.neurons - 1);
        [self.tan[o], self.tan[o + 1], self.tan[o + 2]]
    }
}

impl Evaluator<'_> {
    #[inline]
    fn forward_point(&self, p: &[f64; 3], acts: &mut [f64]) {
        acts[..3].copy_from_slice(p);
        for s in &self.slots {
            let (input, output) = acts.split_at_mut(s.act_out);
            let input = &input[s.act_in..];
            let w = &self.values[s.weights..s.bias];
            let b = &self.values[s.bias..s.bias + s.fan_out];
            for (o, out) in output[..s.fan_out].iter_mut().enumerate() {
                let row = &w[o * s.fan_in..(o + 1) * s.fan_in];
                let z = row.iter().zip(input).fold(b[o], |acc, (w, a)| acc + w * a);
                *out = z.tanh();
            }
        }
    }

    fn forward_tangent(&self, p: &[f64; 3], buf: &mut SecondOrderBuf) {
        self.forward_point(p, &mut buf.acts);
        buf.tan[..9].copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        for s in &self.slots {
            let w = &self.values[s.weights..s.bias];
            for o in 0..s.fan_out {
                let row = &w[o * s.fan_in..(o + 1) * s.fan_in];
                let mut dz = [0.0; 3];
                for (i, &wi) in row.iter().enumerate() {
                    let t = &buf.tan[3 * (s.act_in + i)..3 * (s.act_in + i) + 3];
                    dz[0] += wi * t[0];
                    dz[1] += wi * t[1];
                    dz[2] += wi * t[2];
                }
                let a = buf.acts[s.act_out + o];
                let sech2 = 1.0 - a * a;
                let k = 3 * (s.act_out + o);
                buf.dz[k..k + 3].copy_from_slice(&dz);
                buf.tan[k] = sech2 * dz[0];
                buf.tan[k + 1] = sech2 * dz[1];
                buf.tan[k + 2] = sech2 * dz[2];
            }
        }
    }

    fn backward_second_order(
        &self,
        upstream_f: f64,
        upstream_grad: &[f64; 3],
        buf: &mut SecondOrderBuf,
        grad: &mut [f64],
    ) {
        buf.adj_a.fill(0.0);
        buf.adj_t.fill(0.0);
        let out = self.neurons - 1;
        buf.adj_a[out] = upstream_f;
        buf.adj_t[3 * out..3 * out + 3].copy_from_slice(upstream_grad);
        for s in self.slots.iter().rev() {
            let w = &self.values[s.weights..s.bias];
            for o in 0..s.fan_out {
                let n = s.act_out + o;
                let a = buf.acts[n];
                let sech2 = 1.0 - a * a;
                let at = &buf.adj_t[3 * n..3 * n + 3];
                let dz = &buf.dz[3 * n..3 * n + 3];
                // tan = sech2 * dz
                let adj_dz = [sech2 * at[0], sech2 * at[1], sech2 * at[2]];
                let adj_sech2 = at[0] * dz[0] + at[1] * dz[1] + at[2] * dz[2];
                // sech2 = 1 - a^2, a = tanh(z)
                let adj_a = buf.adj_a[n] - 2.0 * a * adj_sech2;
                let adj_z = sech2 * adj_a;
                grad[s.bias + o] += adj_z;
                for i in 0..s.fan_in {
                    let m = s.act_in + i;
                    let t = &buf.tan[3 * m..3 * m + 3];
                    grad[s.weights + o * s.fan_in + i] += adj_z * buf.acts[m]
                        + adj_dz[0] * t[0]
                        + adj_dz[1] * t[1]
                        + adj_dz[2] * t[2];
                    let wi = w[o * s.fan_in + i];
                    buf.adj_a[m] += wi * adj_z;
                    buf.adj_t[3 * m] += wi * adj_dz[0];
                    buf.adj_t[3 * m + 1] += wi * adj_dz[1];
                    buf.adj_t[3 * m + 2] += wi * adj_dz[2];
                }
            }
        }
    }
}

/// Activations recorded by a forward pass over a batch.
pub struct Tape<'a> {
    ev: Evaluator<'a>,
    acts: Vec<f64>,
    len: usize,
}

impl Tape<'_> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn output(&self, i: usize) -> f64 {
        self.acts[(i + 1) * self.ev.neurons - 1]
    }

    pub fn outputs(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.output(i)).collect()
    }

    /// Accumulates `sum_i upstream[i] * df(p_i)/dtheta` into `grad`.
    pub fn backward(&self, upstream: &[f64], grad: &mut [f64]) {
        let n = self.ev.neurons;
        let max_width = self
            .ev
            .slots
            .iter()
            .map(|s| s.fan_in.max(s.fan_out))
            .max()
            .unwrap_or(1);
        let mut delta = vec![0.0; max_width];
        let mut prev = vec![0.0; max_width];
        for (acts, &u) in self.acts.chunks_exact(n).zip(upstream) {
            if u == 0.0 {
                continue;
            }
            let out = acts[n - 1];
            delta[0] = u * (1.0 - out * out);
            for (l, s) in self.ev.slots.iter().enumerate().rev() {
                let w = &self.ev.values[s.weights..s.bias];
                let input = &acts[s.act_in..s.act_in + s.fan_in];
                prev[..s.fan_in].fill(0.0);
                for o in 0..s.fan_out {
                    let d = delta[o];
                    grad[s.bias + o] += d;
                    let row = &w[o * s.fan_in..(o + 1) * s.fan_in];
                    let g = &mut grad[s.weights + o * s.fan_in..s.weights + (o + 1) * s.fan_in];
                    for i in 0..s.fan_in {
                        g[i] += d * input[i];
                        prev[i] += row[i] * d;
                    }
                }
                if l > 0 {
                    for i in 0..s.fan_in {
                        let a = input[i];
                        delta[i] = prev[i] * (1.0 - a * a);
                    }
                }
            }
        }
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Apply decay directly to the parameters instead of adding it to the gradient.
    pub decoupled_decay: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 5e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            decoupled_decay: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        AdamState {
            m: vec![0.0; params.len()],
            v: vec![0.0; params.len()],
            t: 0,
        }
    }
}

/// One Adam update in place.
pub fn adam_step(
    params: &mut MlpParams,
    grads: &MlpParams,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return Err(Error::Size(
            "parameter, gradient and optimizer shapes differ".into(),
        ));
    }
    if let Some(i) = grads.values.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient in layer {} (parameter {i})",
            params.layer_of(i)
        )));
    }
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for (((theta, &g), m), v) in params
        .values
        .iter_mut()
        .zip(&grads.values)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        let g = if cfg.decoupled_decay {
            *theta -= cfg.learning_rate * cfg.weight_decay * *theta;
            g
        } else {
            g + cfg.weight_decay * *theta
        };
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *theta -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

const SNAPSHOT_MAGIC: &[u8; 8] = b"PILMLP01";

/// Serializes parameters as:
///
/// ```text
/// magic      8 bytes  "PILMLP01"
/// n_layers   u32 LE
/// sizes      n_layers x u32 LE
/// values     param_count x f64 LE, layer by layer: weights row-major, then biases
/// ```
pub fn encode_snapshot(params: &MlpParams) -> Vec<u8> {
    let sizes = params.spec.layer_sizes();
    let mut out = Vec::with_capacity(12 + 4 * sizes.len() + 8 * params.len());
    out.extend_from_slice(SNAPSHOT_MAGIC);
    out.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
    for &s in sizes {
        out.extend_from_slice(&(s as u32).to_le_bytes());
    }
    for v in &params.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_snapshot(bytes: &[u8]) -> Result<MlpParams> {
    if bytes.len() < 12 || &bytes[..8] != SNAPSHOT_MAGIC {
        return Err(Error::format(0, "not a parameter snapshot"));
    }
    let u32_at = |off: usize| -> Result<u32> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::format(off, "truncated snapshot header"))
    };
    let n = u32_at(8)? as usize;
    let sizes = (0..n)
        .map(|k| u32_at(12 + 4 * k).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let spec = MlpSpec::new(sizes)?;
    let start = 12 + 4 * n;
    let body = &bytes[start..];
    if body.len() != 8 * spec.param_count() {
        return Err(Error::format(
            start,
            format!(
                "expected {} parameter bytes, found {}",
                8 * spec.param_count(),
                body.len()
            ),
        ));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    MlpParams::from_values(&spec, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> MlpSpec {
        MlpSpec::new(vec![3, 1]).unwrap()
    }

    fn random_points(n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect()
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(MlpSpec::default().param_count(), 823);
        assert_eq!(small().param_count(), 4);
        assert!(MlpSpec::new(vec![2, 1]).is_err());
        assert!(MlpSpec::new(vec![3, 4, 2]).is_err());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let spec = MlpSpec::default();
        let a = MlpParams::init(&spec, 42);
        assert_eq!(a, MlpParams::init(&spec, 42));
        assert_ne!(a, MlpParams::init(&spec, 43));
        for l in 0..7 {
            let (w, b) = a.layer(l);
            let bound = 1.0 / (spec.layer_sizes()[l] as f64).sqrt();
            assert!(w.iter().all(|v| v.abs() < bound));
            assert!(b.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_params_give_zero_field() {
        let p = MlpParams::zeros(&MlpSpec::default());
        let pts = random_points(5, 1);
        assert!(p.forward(&pts).unwrap().iter().all(|&v| v == 0.0));
        assert!(p
            .spatial_gradient(&pts)
            .unwrap()
            .iter()
            .all(|g| *g == [0.0; 3]));
    }

    #[test]
    fn single_layer_closed_form() {
        let p = MlpParams::from_values(&small(), vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let v = p.forward(&[[0.5, 0.0, 0.0]]).unwrap()[0];
        assert!((v - 0.5f64.tanh()).abs() < 1e-15);
        assert!((v - 0.46212).abs() < 1e-5);
        assert_eq!(p.spatial_gradient(&[[0.0; 3]]).unwrap()[0], [1.0, 0.0, 0.0]);
    }

    #[test]
    fn non_finite_input_rejected() {
        let p = MlpParams::init(&MlpSpec::default(), 0);
        assert!(matches!(
            p.forward(&[[f64::NAN, 0.0, 0.0]]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            p.backward(&[[0.0; 3]], &[1.0, 2.0]),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn outputs_strictly_inside_unit_interval() {
        let mut p = MlpParams::init(&MlpSpec::default(), 3);
        p.values_mut().iter_mut().for_each(|v| *v *= 4.0);
        for v in p.forward(&random_points(200, 2)).unwrap() {
            assert!(v.abs() <= 1.0);
        }
    }

    #[test]
    fn negated_output_layer_negates_field() {
        let p = MlpParams::init(&MlpSpec::default(), 9);
        let mut q = p.clone();
        q.negate_output();
        let pts = random_points(50, 4);
        for (a, b) in p
            .forward(&pts)
            .unwrap()
            .iter()
            .zip(q.forward(&pts).unwrap())
        {
            assert_eq!(*a, -b);
        }
    }

    #[test]
    fn zero_upstream_zero_gradient_and_linearity() {
        let p = MlpParams::init(&MlpSpec::default(), 5);
        let pts = random_points(16, 5);
        let g0 = p.backward(&pts, &vec![0.0; 16]).unwrap();
        assert!(g0.values().iter().all(|&v| v == 0.0));
        let u: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let u2: Vec<f64> = u.iter().map(|v| 2.0 * v).collect();
        let g1 = p.backward(&pts, &u).unwrap();
        let g2 = p.backward(&pts, &u2).unwrap();
        for (a, b) in g1.values().iter().zip(g2.values()) {
            assert!((2.0 * a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }

    #[test]
    fn chunked_backward_matches_serial() {
        let p = MlpParams::init(&MlpSpec::default(), 6);
        let pts = random_points(100, 6);
        let u: Vec<f64> = (0..100).map(|i| (i as f64).cos()).collect();
        let a = p.backward(&pts, &u).unwrap();
        let b = p.backward_chunked(&pts, &u, 17).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn second_order_backward_reduces_to_first_order() {
        let p = MlpParams::init(&MlpSpec::default(), 8);
        let pts = random_points(10, 8);
        let u: Vec<f64> = (0..10).map(|i| i as f64 - 4.5).collect();
        let a = p.backward(&pts, &u).unwrap();
        let b = p
            .backward_with_spatial(&pts, &u, &vec![[0.0; 3]; 10])
            .unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        let spec = small();
        let mut p = MlpParams::zeros(&spec);
        let g = MlpParams::from_values(&spec, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        assert!((p.values()[0] + 5e-3).abs() < 1e-10);
        assert_eq!(&p.values()[1..], &[0.0, 0.0, 0.0]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_zero_gradient_only_counts() {
        let spec = MlpSpec::default();
        let mut p = MlpParams::init(&spec, 1);
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        adam_step(&mut p, &MlpParams::zeros(&spec), &mut st, &cfg).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_two_steps_by_hand() {
        let spec = small();
        let mut p = MlpParams::from_values(&spec, vec![0.3, 0.0, 0.0, 0.0]).unwrap();
        let g = MlpParams::from_values(&spec, vec![0.5, 0.0, 0.0, 0.0]).unwrap();
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            learning_rate: 0.1,
            weight_decay: 0.2,
            ..AdamConfig::default()
        };
        // Hand computation, L2-coupled decay.
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let mut theta = 0.3f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=2 {
            let gt = 0.5 + 0.2 * theta;
            m = b1 * m + (1.0 - b1) * gt;
            v = b2 * v + (1.0 - b2) * gt * gt;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            theta -= 0.1 * mh / (vh.sqrt() + eps);
            adam_step(&mut p, &g, &mut st, &cfg).unwrap();
            assert!((st.m[0] - m).abs() < 1e-15);
            assert!((st.v[0] - v).abs() < 1e-15);
            assert!((p.values()[0] - theta).abs() < 1e-15);
        }
        assert_eq!(st.t, 2);
    }

    #[test]
    fn adam_rejects_non_finite_gradient_with_layer() {
        let spec = MlpSpec::default();
        let mut p = MlpParams::init(&spec, 1);
        let mut g = MlpParams::zeros(&spec);
        let idx = spec.param_count() - 1;
        g.values_mut()[idx] = f64::NAN;
        let mut st = AdamState::new(&p);
        let err = adam_step(&mut p, &g, &mut st, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("layer 6"), "{err}");
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let spec = small();
        let mut p = MlpParams::from_values(&spec, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            weight_decay: 0.5,
            learning_rate: 0.1,
            decoupled_decay: true,
            ..AdamConfig::default()
        };
        adam_step(&mut p, &MlpParams::zeros(&spec), &mut st, &cfg).unwrap();
        assert!((p.values()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn snapshot_round_trip_and_layout() {
        let p = MlpParams::init(&MlpSpec::default(), 77);
        let bytes = encode_snapshot(&p);
        assert_eq!(bytes.len(), 8 + 4 + 8 * 4 + 823 * 8);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 8);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(
            f64::from_le_bytes(bytes[44..52].try_into().unwrap()),
            p.values()[0]
        );
        assert_eq!(decode_snapshot(&bytes).unwrap(), p);
        assert!(decode_snapshot(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_snapshot(b"nonsense").is_err());
    }
}
