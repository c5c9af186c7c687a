//! Dense feed-forward networks with a multi-replica output layer.
//!
//! Every hidden layer is `tanh(W x + b)`; the output layer is affine so that
//! each of the `M` output neurons can represent an unbounded field value.
//! All parameters live in one flat `Vec<f64>` laid out layer by layer
//! (weights row-major with shape `(out_dim, in_dim)`, then biases), which is
//! also the on-disk snapshot order.
//!
//! Two evaluation paths exist:
//!
//! - [`Mlp::forward`] / [`Mlp::backward`]: a single point, used for probing
//!   and for the per-point residual API.
//! - [`Mlp::eval_probes`] / [`Mlp::backprop_probes`]: batched evaluation of
//!   *linear probes*, i.e. fixed linear combinations of network outputs at a
//!   set of points. Because the output layer is affine, a finite-difference
//!   stencil applied to the outputs equals the output weights applied to the
//!   same stencil of the last hidden activations, so a Laplacian costs one
//!   output-layer product instead of one per stencil point.

use std::io::{Read, Write};

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerLayout {
    in_dim: usize,
    out_dim: usize,
    w_offset: usize,
    b_offset: usize,
}

fn layouts(dims: &[usize]) -> Result<Vec<LayerLayout>> {
    if dims.len() < 2 {
        return Err(Error::Config(format!(
            "a network needs at least an input and an output size, got {dims:?}"
        )));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Config(format!("layer sizes must be >= 1, got {dims:?}")));
    }
    let mut out = Vec::with_capacity(dims.len() - 1);
    let mut offset = 0;
    for pair in dims.windows(2) {
        let (in_dim, out_dim) = (pair[0], pair[1]);
        let w_offset = offset;
        let b_offset = w_offset + in_dim * out_dim;
        offset = b_offset + out_dim;
        out.push(LayerLayout {
            in_dim,
            out_dim,
            w_offset,
            b_offset,
        });
    }
    Ok(out)
}

/// Borrowed view of one layer's weights `(out_dim, in_dim)` and biases.
#[derive(Debug, Clone, Copy)]
pub struct LayerParams<'a> {
    pub weights: ArrayView2<'a, f64>,
    pub biases: ArrayView1<'a, f64>,
}

/// Multilayer perceptron, tanh hidden layers and an affine output layer.
///
/// Inputs pass through a fixed affine map `(x - shift) * scale` before the
/// first layer; it is the identity unless set with [`Mlp::normalize_inputs`].
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    layout: Vec<LayerLayout>,
    params: Vec<f64>,
    shift: Vec<f64>,
    scale: Vec<f64>,
}

impl Mlp {
    /// All-zero network with the given layer sizes `[input, hidden.., output]`.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let layout = layouts(dims)?;
        let n = layout.last().map(|l| l.b_offset + l.out_dim).unwrap_or(0);
        Ok(Self {
            dims: dims.to_vec(),
            layout,
            params: vec![0.0; n],
            shift: vec![0.0; dims[0]],
            scale: vec![1.0; dims[0]],
        })
    }

    /// Xavier-normal weights (`std = sqrt(2 / (fan_in + fan_out))`), zero biases.
    pub fn xavier_normal(dims: &[usize], seed: u64) -> Result<Self> {
        let mut net = Self::zeros(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in net.layout.clone() {
            let std = (2.0 / (l.in_dim + l.out_dim) as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("positive std");
            for w in &mut net.params[l.w_offset..l.b_offset] {
                *w = dist.sample(&mut rng);
            }
        }
        Ok(net)
    }

    /// Build from a flat parameter vector in snapshot order.
    pub fn from_params(dims: &[usize], params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(dims)?;
        if params.len() != net.params.len() {
            return Err(Error::dim("parameter vector", net.params.len(), params.len()));
        }
        net.params = params;
        Ok(net)
    }

    /// Map the box `[lo, hi]` affinely onto `[-1, 1]` per input coordinate.
    pub fn normalize_inputs(&mut self, lo: &[f64], hi: &[f64]) -> Result<()> {
        self.map_inputs(lo, hi, 1.0)
    }

    /// Map the box `[lo, hi]` affinely onto `[-half_width, half_width]`.
    pub fn map_inputs(&mut self, lo: &[f64], hi: &[f64], half_width: f64) -> Result<()> {
        let d = self.input_dim();
        if lo.len() != d || hi.len() != d {
            return Err(Error::dim("input box", d, lo.len().min(hi.len())));
        }
        if lo.iter().zip(hi).any(|(a, b)| !(b > a) || !a.is_finite() || !b.is_finite()) {
            return Err(Error::Config(format!("degenerate input box {lo:?}..{hi:?}")));
        }
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(Error::Config(format!("input half width must be positive, got {half_width}")));
        }
        self.shift = lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect();
        self.scale = lo.iter().zip(hi).map(|(a, b)| 2.0 * half_width / (b - a)).collect();
        Ok(())
    }

    /// Input `(shift, scale)`.
    pub fn input_map(&self) -> (&[f64], &[f64]) {
        (&self.shift, &self.scale)
    }

    fn map_input(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(v, (s, c))| (v - s) * c)
            .collect()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    /// Number of replicas `M`.
    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layout.len()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn layer(&self, j: usize) -> LayerParams<'_> {
        let l = self.layout[j];
        LayerParams {
            weights: ArrayView2::from_shape(
                (l.out_dim, l.in_dim),
                &self.params[l.w_offset..l.b_offset],
            )
            .expect("layout"),
            biases: ArrayView1::from(&self.params[l.b_offset..l.b_offset + l.out_dim]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::dim("input point", self.input_dim(), x.len()));
        }
        Ok(())
    }

    /// Per-layer activations for one point; entry 0 is the input itself and
    /// the last entry is the output vector.
    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let last = self.num_layers() - 1;
        let mut acts = Vec::with_capacity(self.num_layers() + 1);
        acts.push(self.map_input(x));
        for (j, l) in self.layout.iter().enumerate() {
            let input = &acts[j];
            let w = &self.params[l.w_offset..l.b_offset];
            let b = &self.params[l.b_offset..l.b_offset + l.out_dim];
            let out: Vec<f64> = (0..l.out_dim)
                .map(|o| {
                    let row = &w[o * l.in_dim..(o + 1) * l.in_dim];
                    let z = row.iter().zip(input).fold(b[o], |s, (wi, xi)| wi.mul_add(*xi, s));
                    if j == last {
                        z
                    } else {
                        z.tanh()
                    }
                })
                .collect();
            acts.push(out);
        }
        acts
    }

    /// All `M` replica outputs at `x`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.activations(x).pop().unwrap())
    }

    /// Gradient of `sum_j cotangent[j] * output_j(x)` with respect to every parameter.
    pub fn backward(&self, x: &[f64], cotangent: &[f64]) -> Result<GradientBuffer> {
        self.check_input(x)?;
        if cotangent.len() != self.output_dim() {
            return Err(Error::dim("output cotangent", self.output_dim(), cotangent.len()));
        }
        let acts = self.activations(x);
        let mut grads = GradientBuffer::zeros_like(self);
        let mut delta = cotangent.to_vec();
        for (j, l) in self.layout.iter().enumerate().rev() {
            let input = &acts[j];
            let g = &mut grads.values;
            for o in 0..l.out_dim {
                g[l.b_offset + o] += delta[o];
                let row = l.w_offset + o * l.in_dim;
                for (i, xi) in input.iter().enumerate() {
                    g[row + i] += delta[o] * xi;
                }
            }
            if j == 0 {
                break;
            }
            let w = &self.params[l.w_offset..l.b_offset];
            delta = (0..l.in_dim)
                .map(|i| {
                    let back: f64 = (0..l.out_dim).map(|o| w[o * l.in_dim + i] * delta[o]).sum();
                    // input to this layer is tanh output of the previous one
                    back * (1.0 - input[i] * input[i])
                })
                .collect();
        }
        Ok(grads)
    }

    /// Batched evaluation of linear probes over the network outputs.
    pub fn eval_probes(&self, probes: &LinearProbes) -> Result<ProbeTape> {
        let mut tape = ProbeTape::default();
        self.eval_probes_into(probes, &mut tape)?;
        Ok(tape)
    }

    /// [`Mlp::eval_probes`] reusing the buffers of an existing tape.
    pub fn eval_probes_into(&self, probes: &LinearProbes, tape: &mut ProbeTape) -> Result<()> {
        if probes.points.ncols() != self.input_dim() {
            return Err(Error::dim("probe points", self.input_dim(), probes.points.ncols()));
        }
        let n = probes.num_points();
        let n_hidden = self.num_layers() - 1;
        tape.acts.resize_with(n_hidden + 1, || Array2::zeros((0, 0)));
        let input = &mut tape.acts[0];
        ensure_shape(input, (n, self.input_dim()));
        input.assign(&probes.points);
        for (mut col, (s, c)) in input.columns_mut().into_iter().zip(self.shift.iter().zip(&self.scale)) {
            col.mapv_inplace(|v| (v - s) * c);
        }
        for j in 0..n_hidden {
            let lp = self.layer(j);
            let (done, rest) = tape.acts.split_at_mut(j + 1);
            let z = &mut rest[0];
            ensure_shape(z, (n, lp.biases.len()));
            z.assign(&lp.biases.broadcast((n, lp.biases.len())).expect("bias broadcast"));
            general_mat_mul(1.0, &done[j], &lp.weights.t(), 1.0, z);
            z.mapv_inplace(f64::tanh);
        }
        probes.combine_into(&tape.acts[n_hidden], &mut tape.features);
        let out = self.layer(n_hidden);
        ensure_shape(&mut tape.outputs, (probes.num_rows(), self.output_dim()));
        general_mat_mul(1.0, &tape.features, &out.weights.t(), 0.0, &mut tape.outputs);
        for (mut row, &beta) in tape.outputs.outer_iter_mut().zip(&probes.bias_coeffs) {
            if beta != 0.0 {
                row.scaled_add(beta, &out.biases);
            }
        }
        Ok(())
    }

    /// Accumulate into `grads` the gradient of `sum(d_outputs .* outputs)` for
    /// the probe outputs recorded in `tape`.
    pub fn backprop_probes(
        &self,
        probes: &LinearProbes,
        tape: &ProbeTape,
        d_outputs: &Array2<f64>,
        grads: &mut GradientBuffer,
    ) -> Result<()> {
        self.backprop_probes_with(probes, tape, d_outputs, grads, &mut ProbeScratch::default())
    }

    /// [`Mlp::backprop_probes`] with caller-owned scratch buffers.
    pub fn backprop_probes_with(
        &self,
        probes: &LinearProbes,
        tape: &ProbeTape,
        d_outputs: &Array2<f64>,
        grads: &mut GradientBuffer,
        scratch: &mut ProbeScratch,
    ) -> Result<()> {
        if d_outputs.dim() != tape.outputs.dim() {
            return Err(Error::dim("probe cotangent rows", tape.outputs.nrows(), d_outputs.nrows()));
        }
        if grads.values.len() != self.param_count() {
            return Err(Error::dim("gradient buffer", self.param_count(), grads.values.len()));
        }
        let n_hidden = self.num_layers() - 1;
        let out_layout = self.layout[n_hidden];
        {
            let (gw, gb) = grads.layer_mut(out_layout);
            general_mat_mul(1.0, &d_outputs.t(), &tape.features, 1.0, &mut gw.as_mut_slice_2d(out_layout));
            for (row, &beta) in d_outputs.outer_iter().zip(&probes.bias_coeffs) {
                if beta != 0.0 {
                    for (g, d) in gb.iter_mut().zip(row) {
                        *g += beta * d;
                    }
                }
            }
        }
        if n_hidden == 0 {
            return Ok(());
        }
        let n = probes.num_points();
        let w_out = self.layer(n_hidden).weights;
        ensure_shape(&mut scratch.d_features, (d_outputs.nrows(), w_out.ncols()));
        general_mat_mul(1.0, d_outputs, &w_out, 0.0, &mut scratch.d_features);
        scratch.d_act.resize_with(n_hidden, || Array2::zeros((0, 0)));
        probes.scatter_into(&scratch.d_features, n, &mut scratch.d_act[n_hidden - 1]);
        for j in (0..n_hidden).rev() {
            let (lower, upper) = scratch.d_act.split_at_mut(j);
            let d_act = &mut upper[0];
            // d tanh = 1 - a^2
            ndarray::Zip::from(&mut *d_act)
                .and(&tape.acts[j + 1])
                .for_each(|d, &a| *d *= 1.0 - a * a);
            let l = self.layout[j];
            let (gw, gb) = grads.layer_mut(l);
            general_mat_mul(1.0, &d_act.t(), &tape.acts[j], 1.0, &mut gw.as_mut_slice_2d(l));
            for row in d_act.outer_iter() {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
            if j > 0 {
                let below = &mut lower[j - 1];
                ensure_shape(below, (n, l.in_dim));
                general_mat_mul(1.0, &*d_act, &self.layer(j).weights, 0.0, below);
            }
        }
        Ok(())
    }

    /// Write the parameter snapshot: `u64` layer count, `u64` dims, the input
    /// shift and scale, then all parameters, every float as little-endian `f64`.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&(self.dims.len() as u64).to_le_bytes())?;
        for &d in &self.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for p in self.shift.iter().chain(&self.scale).chain(&self.params) {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut r: R) -> Result<Self> {
        let n = read_u64(&mut r)? as usize;
        if !(2..=64).contains(&n) {
            return Err(Error::Parse(format!("implausible layer count {n} in snapshot")));
        }
        let dims = (0..n)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut net = Self::zeros(&dims)?;
        for p in net.shift.iter_mut().chain(net.scale.iter_mut()).chain(net.params.iter_mut()) {
            *p = read_f64(&mut r)?;
        }
        Ok(net)
    }
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Parameter gradients in the same flat layout as [`Mlp::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer {
    layout: Vec<LayerLayout>,
    values: Vec<f64>,
}

impl GradientBuffer {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layout: net.layout.clone(),
            values: vec![0.0; net.param_count()],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn zero(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn add_assign(&mut self, other: &GradientBuffer) {
        assert_eq!(self.values.len(), other.values.len(), "gradient layout mismatch");
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn layer(&self, j: usize) -> LayerParams<'_> {
        let l = self.layout[j];
        LayerParams {
            weights: ArrayView2::from_shape((l.out_dim, l.in_dim), &self.values[l.w_offset..l.b_offset])
                .expect("layout"),
            biases: ArrayView1::from(&self.values[l.b_offset..l.b_offset + l.out_dim]),
        }
    }

    fn layer_mut(&mut self, l: LayerLayout) -> (WeightGradMut<'_>, &mut [f64]) {
        let (w, rest) = self.values[l.w_offset..].split_at_mut(l.b_offset - l.w_offset);
        (WeightGradMut(w), &mut rest[..l.out_dim])
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

struct WeightGradMut<'a>(&'a mut [f64]);

impl<'a> WeightGradMut<'a> {
    fn as_mut_slice_2d(self, l: LayerLayout) -> ndarray::ArrayViewMut2<'a, f64> {
        ndarray::ArrayViewMut2::from_shape((l.out_dim, l.in_dim), self.0).expect("layout")
    }
}

/// A batch of evaluation points plus linear functionals over the network
/// outputs at those points.
///
/// Row `r` of the probe output is `sum_k c_rk * net(points[k]) ` where the
/// bias contribution is weighted by `sum_k c_rk` (stored explicitly as the
/// bias coefficient so that exact cancellation in stencils is preserved).
#[derive(Debug, Clone, Default)]
pub struct LinearProbes {
    points: Array2<f64>,
    rows: Vec<Vec<(usize, f64)>>,
    bias_coeffs: Vec<f64>,
}

impl LinearProbes {
    pub fn new(dim: usize) -> Self {
        Self {
            points: Array2::zeros((0, dim)),
            rows: Vec::new(),
            bias_coeffs: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn num_points(&self) -> usize {
        self.points.nrows()
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    /// Register an evaluation point and return its index.
    pub fn add_point(&mut self, p: &[f64]) -> usize {
        assert_eq!(p.len(), self.dim(), "probe point dimension");
        self.points
            .push_row(ArrayView1::from(p))
            .expect("row length checked");
        self.points.nrows() - 1
    }

    /// Add a probe row; returns its index.
    pub fn add_row(&mut self, terms: Vec<(usize, f64)>) -> usize {
        assert!(terms.iter().all(|&(k, _)| k < self.num_points()), "probe term index");
        let beta = terms.iter().map(|&(_, c)| c).sum::<f64>();
        // stencils sum to zero analytically; keep that exact
        let beta = if beta.abs() < 1e-9 * terms.iter().map(|t| t.1.abs()).sum::<f64>() {
            0.0
        } else {
            beta
        };
        self.rows.push(terms);
        self.bias_coeffs.push(beta);
        self.rows.len() - 1
    }

    /// Shortcut: point value row.
    pub fn add_value(&mut self, p: &[f64]) -> usize {
        let k = self.add_point(p);
        self.add_row(vec![(k, 1.0)])
    }

    fn combine_into(&self, hidden: &Array2<f64>, out: &mut Array2<f64>) {
        ensure_shape(out, (self.rows.len(), hidden.ncols()));
        out.fill(0.0);
        for (mut dst, terms) in out.outer_iter_mut().zip(&self.rows) {
            for &(k, c) in terms {
                dst.scaled_add(c, &hidden.row(k));
            }
        }
    }

    fn scatter_into(&self, d_rows: &Array2<f64>, n_points: usize, out: &mut Array2<f64>) {
        ensure_shape(out, (n_points, d_rows.ncols()));
        out.fill(0.0);
        for (src, terms) in d_rows.outer_iter().zip(&self.rows) {
            for &(k, c) in terms {
                out.row_mut(k).scaled_add(c, &src);
            }
        }
    }
}

fn ensure_shape(a: &mut Array2<f64>, shape: (usize, usize)) {
    if a.dim() != shape {
        *a = Array2::zeros(shape);
    }
}

/// Saved intermediates of [`Mlp::eval_probes`].
#[derive(Debug, Clone, Default)]
pub struct ProbeTape {
    /// Mapped probe points, then the output of each hidden layer.
    acts: Vec<Array2<f64>>,
    features: Array2<f64>,
    /// Probe outputs `(rows, M)`.
    pub outputs: Array2<f64>,
}

/// Reusable buffers for [`Mlp::backprop_probes_with`].
#[derive(Debug, Clone, Default)]
pub struct ProbeScratch {
    d_features: Array2<f64>,
    d_act: Vec<Array2<f64>>,
}
