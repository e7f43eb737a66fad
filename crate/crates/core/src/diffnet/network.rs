//! Dense tanh network `phi_hat(t, x, u)` with hand-written batched
//! forward, forward-mode (time tangent) and reverse-mode passes.
//!
//! Parameter layout: for each layer, the weight matrix (out x in, row-major)
//! followed by the bias vector. Inputs are mapped affinely onto `[-1, 1]`
//! per coordinate before the first layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, ensure_finite, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    widths: Vec<usize>,
}

impl NetworkSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 3 {
            return Err(Error::Config(
                "network needs an input layer, at least one hidden layer and an output layer".into(),
            ));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be >= 1".into()));
        }
        Ok(Self { widths })
    }

    /// Network for `(t, x, u) -> x` with `n` states and `m` inputs.
    pub fn for_plant(n: usize, m: usize, hidden: &[usize]) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(1 + n + m);
        widths.extend_from_slice(hidden);
        widths.push(n);
        Self::new(widths)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Offset of layer `l`'s weights; its bias follows at `offset + out * in`.
    fn layer_offset(&self, l: usize) -> usize {
        self.widths[..=l]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    values: Vec<f64>,
}

impl NetworkParams {
    pub fn new(spec: &NetworkSpec, values: Vec<f64>) -> Result<Self> {
        ensure_dim("parameter vector", spec.param_count(), values.len())?;
        ensure_finite("network parameters", &values)?;
        Ok(Self { values })
    }

    pub fn zeros(spec: &NetworkSpec) -> Self {
        Self { values: vec![0.0; spec.param_count()] }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Self {
        let mut values = Vec::with_capacity(spec.param_count());
        for w in spec.widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                values.push(rng.random_range(-limit..limit));
            }
            values.extend(std::iter::repeat(0.0).take(fan_out));
        }
        Self { values }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Per-input-coordinate box used to map raw `(t, x, u)` onto `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl InputScaling {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        ensure_dim("scaling bounds", lower.len(), upper.len())?;
        ensure_finite("scaling bounds", &lower)?;
        ensure_finite("scaling bounds", &upper)?;
        if lower.iter().zip(&upper).any(|(lo, hi)| lo >= hi) {
            return Err(Error::Config("scaling requires lower < upper componentwise".into()));
        }
        Ok(Self { lower, upper })
    }

    /// Scaling over `[t_lo, t_hi] x X x U`.
    pub fn from_domains(
        time: (f64, f64),
        state_lower: &[f64],
        state_upper: &[f64],
        input_lower: &[f64],
        input_upper: &[f64],
    ) -> Result<Self> {
        let mut lower = vec![time.0];
        lower.extend_from_slice(state_lower);
        lower.extend_from_slice(input_lower);
        let mut upper = vec![time.1];
        upper.extend_from_slice(state_upper);
        upper.extend_from_slice(input_upper);
        Self::new(lower, upper)
    }

    pub fn identity(dim: usize) -> Self {
        Self { lower: vec![-1.0; dim], upper: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    /// d(scaled)/d(raw) for coordinate `i`.
    #[inline]
    pub fn slope(&self, i: usize) -> f64 {
        2.0 / (self.upper[i] - self.lower[i])
    }

    #[inline]
    fn apply(&self, i: usize, raw: f64) -> f64 {
        (raw - self.lower[i]) * self.slope(i) - 1.0
    }
}

/// Borrowed view over a complete network used by the batched passes.
#[derive(Debug, Clone, Copy)]
pub struct Mlp<'a> {
    pub spec: &'a NetworkSpec,
    pub params: &'a [f64],
    pub scaling: &'a InputScaling,
}

/// Activations recorded by a batched forward pass, reused by the reverse pass.
#[derive(Debug, Clone, Default)]
pub struct BatchPass {
    batch: usize,
    /// acts[l] is the (batch x widths[l]) input of layer l; acts[L] is the output.
    acts: Vec<Vec<f64>>,
    /// Pre-activation time tangents per layer (batch x widths[l+1]).
    ztan: Vec<Vec<f64>>,
    /// Post-activation time tangents; atan[l] pairs with acts[l] for l >= 1.
    atan: Vec<Vec<f64>>,
    with_tangent: bool,
}

impl BatchPass {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Network outputs (batch x n), row-major.
    pub fn outputs(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// Time derivatives of the outputs (batch x n); empty without tangent pass.
    pub fn output_rates(&self) -> &[f64] {
        if self.with_tangent {
            self.atan.last().map(Vec::as_slice).unwrap_or(&[])
        } else {
            &[]
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // Bounds are the callers' responsibility; every call site below passes
    // buffers sized exactly for the stated shapes and strides.
    debug_assert!(c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

impl<'a> Mlp<'a> {
    pub fn new(spec: &'a NetworkSpec, params: &'a NetworkParams, scaling: &'a InputScaling) -> Result<Self> {
        ensure_dim("scaling dimension", spec.input_dim(), scaling.dim())?;
        ensure_dim("parameter vector", spec.param_count(), params.len())?;
        Ok(Self { spec, params: params.as_slice(), scaling })
    }

    fn scale_inputs(&self, raw: &[f64], batch: usize) -> Vec<f64> {
        let w0 = self.spec.input_dim();
        let mut scaled = vec![0.0; batch * w0];
        for b in 0..batch {
            for i in 0..w0 {
                scaled[b * w0 + i] = self.scaling.apply(i, raw[b * w0 + i]);
            }
        }
        scaled
    }

    /// Batched forward pass over raw inputs (batch x input_dim, row-major).
    /// With `with_tangent`, also propagates d/dt along input coordinate 0.
    pub fn run(&self, raw_inputs: &[f64], with_tangent: bool) -> BatchPass {
        let widths = &self.spec.widths;
        let w0 = widths[0];
        let batch = raw_inputs.len() / w0;
        let layers = self.spec.num_layers();
        let mut acts = Vec::with_capacity(layers + 1);
        acts.push(self.scale_inputs(raw_inputs, batch));
        let mut ztan = Vec::new();
        let mut atan: Vec<Vec<f64>> = Vec::new();
        if with_tangent {
            atan.push(Vec::new());
        }
        let t_slope = self.scaling.slope(0);
        let mut off = 0;
        for l in 0..layers {
            let (win, wout) = (widths[l], widths[l + 1]);
            let w = &self.params[off..off + win * wout];
            let bias = &self.params[off + win * wout..off + win * wout + wout];
            off += win * wout + wout;
            let last = l + 1 == layers;

            let mut z = vec![0.0; batch * wout];
            for row in z.chunks_exact_mut(wout) {
                row.copy_from_slice(bias);
            }
            gemm(batch, win, wout, &acts[l], win as isize, 1, w, 1, win as isize, 1.0, &mut z, wout as isize, 1);

            let mut zt = Vec::new();
            if with_tangent {
                zt = vec![0.0; batch * wout];
                if l == 0 {
                    // The input tangent is t_slope on coordinate 0 for every row.
                    for row in zt.chunks_exact_mut(wout) {
                        for (o, v) in row.iter_mut().enumerate() {
                            *v = t_slope * w[o * win];
                        }
                    }
                } else {
                    gemm(batch, win, wout, &atan[l], win as isize, 1, w, 1, win as isize, 0.0, &mut zt, wout as isize, 1);
                }
            }

            if last {
                if with_tangent {
                    atan.push(zt.clone());
                    ztan.push(zt);
                }
                acts.push(z);
            } else {
                for v in z.iter_mut() {
                    *v = v.tanh();
                }
                if with_tangent {
                    let at: Vec<f64> = z.iter().zip(&zt).map(|(a, zd)| (1.0 - a * a) * zd).collect();
                    atan.push(at);
                    ztan.push(zt);
                }
                acts.push(z);
            }
        }
        BatchPass { batch, acts, ztan, atan, with_tangent }
    }

    /// Reverse pass. `out_bar` is the cotangent of the outputs, `rate_bar`
    /// the cotangent of the output time derivatives (requires a tangent
    /// pass). Parameter gradients are accumulated into `param_grad`; raw
    /// input cotangents (batch x input_dim) are written into `input_grad`.
    pub fn backward(
        &self,
        pass: &BatchPass,
        out_bar: &[f64],
        rate_bar: Option<&[f64]>,
        mut param_grad: Option<&mut [f64]>,
        input_grad: Option<&mut [f64]>,
    ) {
        let widths = &self.spec.widths;
        let layers = self.spec.num_layers();
        let batch = pass.batch;
        let use_tan = rate_bar.is_some() && pass.with_tangent;
        let t_slope = self.scaling.slope(0);

        let mut abar = out_bar.to_vec();
        let mut atbar: Vec<f64> = if use_tan { rate_bar.unwrap().to_vec() } else { Vec::new() };

        for l in (0..layers).rev() {
            let (win, wout) = (widths[l], widths[l + 1]);
            let off = self.spec.layer_offset(l);
            let w = &self.params[off..off + win * wout];
            let last = l + 1 == layers;

            // zbar, ztbar: adjoints of the pre-activation and its tangent.
            let (zbar, ztbar) = if last {
                (std::mem::take(&mut abar), std::mem::take(&mut atbar))
            } else {
                let a = &pass.acts[l + 1];
                let mut zbar = vec![0.0; batch * wout];
                let mut ztbar = Vec::new();
                if use_tan {
                    ztbar = vec![0.0; batch * wout];
                    let zt = &pass.ztan[l];
                    for k in 0..batch * wout {
                        let s = 1.0 - a[k] * a[k];
                        ztbar[k] = s * atbar[k];
                        zbar[k] = s * abar[k] - 2.0 * a[k] * s * zt[k] * atbar[k];
                    }
                } else {
                    for k in 0..batch * wout {
                        zbar[k] = (1.0 - a[k] * a[k]) * abar[k];
                    }
                }
                (zbar, ztbar)
            };

            if let Some(g) = param_grad.as_deref_mut() {
                let gw = &mut g[off..off + win * wout];
                gemm(wout, batch, win, &zbar, 1, wout as isize, &pass.acts[l], win as isize, 1, 1.0, gw, win as isize, 1);
                if use_tan {
                    if l == 0 {
                        for o in 0..wout {
                            let s: f64 = (0..batch).map(|b| ztbar[b * wout + o]).sum();
                            gw[o * win] += t_slope * s;
                        }
                    } else {
                        gemm(wout, batch, win, &ztbar, 1, wout as isize, &pass.atan[l], win as isize, 1, 1.0, gw, win as isize, 1);
                    }
                }
                let gb = &mut g[off + win * wout..off + win * wout + wout];
                for row in zbar.chunks_exact(wout) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            }

            if l == 0 && input_grad.is_none() {
                break;
            }
            let mut prev = vec![0.0; batch * win];
            gemm(batch, wout, win, &zbar, wout as isize, 1, w, win as isize, 1, 0.0, &mut prev, win as isize, 1);
            abar = prev;
            if use_tan && l > 0 {
                let mut prevt = vec![0.0; batch * win];
                gemm(batch, wout, win, &ztbar, wout as isize, 1, w, win as isize, 1, 0.0, &mut prevt, win as isize, 1);
                atbar = prevt;
            }
        }

        if let Some(ig) = input_grad {
            let w0 = widths[0];
            for b in 0..batch {
                for i in 0..w0 {
                    ig[b * w0 + i] = abar[b * w0 + i] * self.scaling.slope(i);
                }
            }
        }
    }
}

/// Raw network input row `(t, x, u)`.
pub fn input_row(t: f64, x: &[f64], u: &[f64]) -> Vec<f64> {
    let mut row = Vec::with_capacity(1 + x.len() + u.len());
    row.push(t);
    row.extend_from_slice(x);
    row.extend_from_slice(u);
    row
}

fn check_point(spec: &NetworkSpec, t: f64, x: &[f64], u: &[f64]) -> Result<()> {
    let n = spec.output_dim();
    ensure_dim("state", n, x.len())?;
    ensure_dim("input", spec.input_dim() - 1 - n, u.len())?;
    if !t.is_finite() {
        return Err(Error::NonFinite("time".into()));
    }
    ensure_finite("state", x)?;
    ensure_finite("input", u)
}

/// `phi_hat(t, x, u)`.
pub fn forward(
    spec: &NetworkSpec,
    params: &NetworkParams,
    scaling: &InputScaling,
    t: f64,
    x: &[f64],
    u: &[f64],
) -> Result<Vec<f64>> {
    check_point(spec, t, x, u)?;
    let mlp = Mlp::new(spec, params, scaling)?;
    Ok(mlp.run(&input_row(t, x, u), false).outputs().to_vec())
}

/// Exact `d phi_hat / dt` at `(t, x, u)` by forward mode along the time input.
pub fn time_derivative(
    spec: &NetworkSpec,
    params: &NetworkParams,
    scaling: &InputScaling,
    t: f64,
    x: &[f64],
    u: &[f64],
) -> Result<Vec<f64>> {
    check_point(spec, t, x, u)?;
    let mlp = Mlp::new(spec, params, scaling)?;
    Ok(mlp.run(&input_row(t, x, u), true).output_rates().to_vec())
}

/// One `(t, x, u)` evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct InputPoint {
    pub t: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
}

/// `sum_s (d phi_hat(s) / d omega)^T cotangent_s` over a batch.
/// `cotangents` is (batch x output_dim), row-major.
pub fn grad_params(
    spec: &NetworkSpec,
    params: &NetworkParams,
    scaling: &InputScaling,
    batch: &[InputPoint],
    cotangents: &[f64],
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::Dimension("empty batch".into()));
    }
    ensure_dim("cotangents", batch.len() * spec.output_dim(), cotangents.len())?;
    let mut raw = Vec::with_capacity(batch.len() * spec.input_dim());
    for p in batch {
        check_point(spec, p.t, &p.x, &p.u)?;
        raw.extend(input_row(p.t, &p.x, &p.u));
    }
    let mlp = Mlp::new(spec, params, scaling)?;
    let pass = mlp.run(&raw, false);
    let mut grad = vec![0.0; spec.param_count()];
    mlp.backward(&pass, cotangents, None, Some(&mut grad), None);
    Ok(grad)
}

/// Pullbacks of `cotangent` through `phi_hat` to the state and input arguments.
pub fn grad_inputs(
    spec: &NetworkSpec,
    params: &NetworkParams,
    scaling: &InputScaling,
    t: f64,
    x: &[f64],
    u: &[f64],
    cotangent: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_point(spec, t, x, u)?;
    ensure_dim("cotangent", spec.output_dim(), cotangent.len())?;
    let mlp = Mlp::new(spec, params, scaling)?;
    let pass = mlp.run(&input_row(t, x, u), false);
    let mut ig = vec![0.0; spec.input_dim()];
    mlp.backward(&pass, cotangent, None, None, Some(&mut ig));
    let n = x.len();
    Ok((ig[1..1 + n].to_vec(), ig[1 + n..].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(seed: u64, widths: Vec<usize>) -> (NetworkSpec, NetworkParams, InputScaling) {
        let spec = NetworkSpec::new(widths).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = NetworkParams::glorot(&spec, &mut rng);
        for v in params.as_mut_slice() {
            *v += rng.random_range(-0.3..0.3);
        }
        let d = spec.input_dim();
        let scaling = InputScaling::new(vec![-1.5; d], vec![2.0; d]).unwrap();
        (spec, params, scaling)
    }

    #[test]
    fn param_count_matches_layout() {
        let spec = NetworkSpec::for_plant(2, 1, &[32, 32, 32]).unwrap();
        assert_eq!(spec.widths(), &[4, 32, 32, 32, 2]);
        assert_eq!(spec.param_count(), 4 * 32 + 32 + 2 * (32 * 32 + 32) + 32 * 2 + 2);
        let spec = NetworkSpec::for_plant(4, 2, &[64; 4]).unwrap();
        assert_eq!(spec.input_dim(), 7);
        assert_eq!(spec.output_dim(), 4);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(NetworkSpec::new(vec![3, 2]).is_err());
        assert!(NetworkSpec::new(vec![3, 0, 2]).is_err());
        assert!(InputScaling::new(vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let spec = NetworkSpec::new(vec![4, 8, 2]).unwrap();
        let params = NetworkParams::zeros(&spec);
        let scaling = InputScaling::identity(4);
        let y = forward(&spec, &params, &scaling, 0.3, &[0.1, -0.2], &[0.4]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
        let r = time_derivative(&spec, &params, &scaling, 0.3, &[0.1, -0.2], &[0.4]).unwrap();
        assert_eq!(r, vec![0.0, 0.0]);
    }

    #[test]
    fn dimension_and_finiteness_errors() {
        let spec = NetworkSpec::new(vec![4, 8, 2]).unwrap();
        let params = NetworkParams::zeros(&spec);
        let scaling = InputScaling::identity(4);
        assert!(matches!(
            forward(&spec, &params, &scaling, 0.0, &[0.0], &[0.0]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            forward(&spec, &params, &scaling, f64::NAN, &[0.0, 0.0], &[0.0]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn batch_matches_single_evaluations() {
        let (spec, params, scaling) = small(3, vec![4, 6, 5, 2]);
        let pts = [(0.1, [0.3, -0.2], [0.5]), (0.2, [-0.7, 0.1], [-0.4]), (0.05, [1.0, 0.9], [0.0])];
        let mlp = Mlp::new(&spec, &params, &scaling).unwrap();
        let raw: Vec<f64> = pts.iter().flat_map(|(t, x, u)| input_row(*t, x, u)).collect();
        let pass = mlp.run(&raw, true);
        for (k, (t, x, u)) in pts.iter().enumerate() {
            let y = forward(&spec, &params, &scaling, *t, x, u).unwrap();
            let r = time_derivative(&spec, &params, &scaling, *t, x, u).unwrap();
            assert_eq!(&pass.outputs()[k * 2..k * 2 + 2], &y[..]);
            assert_eq!(&pass.output_rates()[k * 2..k * 2 + 2], &r[..]);
        }
    }
}
