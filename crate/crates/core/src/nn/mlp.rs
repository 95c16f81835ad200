use nalgebra::DMatrix;
use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gains for the orthogonal initializer.
#[derive(Debug, Clone, Copy)]
pub struct Init {
    pub hidden_gain: f64,
    pub output_gain: f64,
}

impl Init {
    pub const POLICY: Init = Init {
        hidden_gain: 1.0,
        output_gain: 0.01,
    };
    pub const VALUE: Init = Init {
        hidden_gain: 1.0,
        output_gain: 1.0,
    };
}

/// Fully connected network, tanh on hidden layers, linear output.
///
/// Parameters live in one flat buffer, layer by layer: the `in x out` weight
/// matrix (row-major) followed by the `out` biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Activations recorded by a forward pass; `acts[0]` is the input, the last
/// entry the output.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    acts: Vec<Array2<f64>>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("tape holds at least the input")
    }

    pub fn input(&self) -> &Array2<f64> {
        &self.acts[0]
    }
}

fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    let big = rows.max(cols);
    let small = rows.min(cols);
    let g = DMatrix::<f64>::from_fn(big, small, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    let mut q = q.columns(0, small).into_owned();
    for j in 0..small {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let m = if rows >= cols { q } else { q.transpose() };
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(gain * m[(i, j)]);
        }
    }
    out
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], init: Init, rng: &mut R) -> Self {
        assert!(
            sizes.len() >= 2 && sizes.iter().all(|&n| n > 0),
            "bad layer sizes {sizes:?}"
        );
        let mut params = Vec::new();
        let last = sizes.len() - 2;
        for (l, w) in sizes.windows(2).enumerate() {
            let gain = if l == last {
                init.output_gain
            } else {
                init.hidden_gain
            };
            params.extend(orthogonal(w[0], w[1], gain, rng));
            params.extend(std::iter::repeat_n(0.0, w[1]));
        }
        Self {
            sizes: sizes.to_vec(),
            params,
        }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        let n = sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum();
        Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; n],
        }
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        let n: usize = sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum();
        if sizes.len() < 2 || params.len() != n {
            return Err(Error::Dimension(format!(
                "{} parameters for layers {sizes:?}",
                params.len()
            )));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least two sizes")
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    fn offsets(&self, l: usize) -> (usize, usize) {
        let start: usize = self
            .sizes
            .windows(2)
            .take(l)
            .map(|w| (w[0] + 1) * w[1])
            .sum();
        (start, start + self.sizes[l] * self.sizes[l + 1])
    }

    fn weight(&self, l: usize) -> ArrayView2<'_, f64> {
        let (w0, b0) = self.offsets(l);
        ArrayView2::from_shape((self.sizes[l], self.sizes[l + 1]), &self.params[w0..b0])
            .expect("layout")
    }

    fn bias(&self, l: usize) -> ArrayView1<'_, f64> {
        let (_, b0) = self.offsets(l);
        ArrayView1::from(&self.params[b0..b0 + self.sizes[l + 1]])
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "input has {} columns, net expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }
        Ok(())
    }

    /// Batched forward pass recording every activation.
    pub fn forward_tape(&self, x: ArrayView2<f64>) -> Result<Tape> {
        self.check_input(&x)?;
        let mut acts = Vec::with_capacity(self.sizes.len());
        acts.push(x.to_owned());
        for l in 0..self.n_layers() {
            let mut z = acts[l].dot(&self.weight(l));
            z += &self.bias(l);
            if l + 1 < self.n_layers() {
                z.mapv_inplace(f64::tanh);
            }
            acts.push(z);
        }
        Ok(Tape { acts })
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_tape(x)?.acts.pop().expect("output"))
    }

    /// Single-sample convenience wrapper.
    pub fn forward_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row");
        Ok(self.forward(view)?.into_raw_vec_and_offset().0)
    }

    fn check_tape(&self, tape: &Tape) -> Result<()> {
        if tape.acts.is_empty() {
            return Err(Error::NoForwardPass);
        }
        if tape.acts.len() != self.sizes.len()
            || tape
                .acts
                .iter()
                .zip(&self.sizes)
                .any(|(a, &n)| a.ncols() != n)
        {
            return Err(Error::Dimension(
                "tape was recorded by a different network".into(),
            ));
        }
        Ok(())
    }

    /// Gradients of `sum_i grad_out[i] . output[i]` with respect to the
    /// parameters and the input.
    pub fn backward_with_input(
        &self,
        tape: &Tape,
        grad_out: ArrayView2<f64>,
    ) -> Result<(Vec<f64>, Array2<f64>)> {
        self.backward_injected(tape, grad_out, &[])
    }

    pub fn backward(&self, tape: &Tape, grad_out: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(self.backward_with_input(tape, grad_out)?.0)
    }

    /// Backward pass with extra gradients injected at the post-tanh hidden
    /// activations (`hidden_grads[l]` for `acts[l + 1]`, possibly empty).
    fn backward_injected(
        &self,
        tape: &Tape,
        grad_out: ArrayView2<f64>,
        hidden_grads: &[Array2<f64>],
    ) -> Result<(Vec<f64>, Array2<f64>)> {
        self.check_tape(tape)?;
        if grad_out.dim() != tape.output().dim() {
            return Err(Error::Dimension("output gradient shape".into()));
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut delta = grad_out.to_owned();
        for l in (0..self.n_layers()).rev() {
            if l + 1 < self.n_layers() {
                // delta currently holds dL/dh for the tanh output h = acts[l+1].
                if let Some(extra) = hidden_grads.get(l) {
                    delta += extra;
                }
                let h = &tape.acts[l + 1];
                delta.zip_mut_with(h, |d, &h| *d *= 1.0 - h * h);
            }
            let (w0, b0) = self.offsets(l);
            let gw = tape.acts[l].t().dot(&delta);
            for (dst, v) in grads[w0..b0].iter_mut().zip(gw.iter()) {
                *dst = *v;
            }
            let gb = delta.sum_axis(Axis(0));
            for (dst, v) in grads[b0..b0 + self.sizes[l + 1]].iter_mut().zip(gb.iter()) {
                *dst = *v;
            }
            delta = delta.dot(&self.weight(l).t());
        }
        Ok((grads, delta))
    }

    /// Mean one-sided gradient penalty on a scalar-output net,
    /// `coef * mean_i max(0, |d f(x_i)/d x_i| - 1)^2`, and its parameter gradient.
    ///
    /// The parameter gradient differentiates through the input gradient
    /// (double backpropagation, written out for the tanh layers).
    pub fn gradient_penalty(&self, x: ArrayView2<f64>, coef: f64) -> Result<(f64, Vec<f64>)> {
        if self.output_dim() != 1 {
            return Err(Error::Dimension(
                "gradient penalty needs a scalar output".into(),
            ));
        }
        let n = x.nrows();
        if n == 0 {
            return Err(Error::Empty("penalty batch".into()));
        }
        let tape = self.forward_tape(x)?;
        let nl = self.n_layers();
        // g[l]: d f / d acts[l]; deltas[l]: d f / d z_l (pre-activation of layer l).
        let mut g: Vec<Array2<f64>> = vec![Array2::zeros((0, 0)); nl + 1];
        let mut deltas: Vec<Array2<f64>> = vec![Array2::zeros((0, 0)); nl];
        g[nl] = Array2::ones((n, 1));
        for l in (0..nl).rev() {
            let mut d = g[l + 1].clone();
            if l + 1 < nl {
                let h = &tape.acts[l + 1];
                d.zip_mut_with(h, |d, &h| *d *= 1.0 - h * h);
            }
            g[l] = d.dot(&self.weight(l).t());
            deltas[l] = d;
        }
        let norms: Vec<f64> = g[0].rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        let value = coef
            * norms
                .iter()
                .map(|&v| (v - 1.0).max(0.0).powi(2))
                .sum::<f64>()
            / n as f64;

        // Adjoint of g[0].
        let mut gbar = g[0].clone();
        for (i, mut row) in gbar.rows_mut().into_iter().enumerate() {
            let excess = (norms[i] - 1.0).max(0.0);
            let f = if excess > 0.0 {
                2.0 * coef * excess / (norms[i] * n as f64)
            } else {
                0.0
            };
            row.mapv_inplace(|v| v * f);
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut hidden_grads: Vec<Array2<f64>> = vec![Array2::zeros((n, 0)); nl.saturating_sub(1)];
        for l in 0..nl {
            // g[l] = deltas[l] W_l^T, so dW_l += gbar^T deltas[l] and dbar = gbar W_l.
            let (w0, b0) = self.offsets(l);
            let gw = gbar.t().dot(&deltas[l]);
            for (dst, v) in grads[w0..b0].iter_mut().zip(gw.iter()) {
                *dst += v;
            }
            let dbar = gbar.dot(&self.weight(l));
            if l + 1 < nl {
                // deltas[l] = g[l+1] * (1 - h^2), h = acts[l+1].
                let h = &tape.acts[l + 1];
                let mut next = dbar.clone();
                next.zip_mut_with(h, |v, &h| *v *= 1.0 - h * h);
                let mut hbar = dbar;
                hbar.zip_mut_with(&g[l + 1], |v, &gv| *v *= gv);
                hbar.zip_mut_with(h, |v, &h| *v *= -2.0 * h);
                hidden_grads[l] = hbar;
                gbar = next;
            }
        }
        let zero_out = Array2::zeros((n, 1));
        let (extra, _) = self.backward_injected(&tape, zero_out.view(), &hidden_grads)?;
        for (dst, v) in grads.iter_mut().zip(extra) {
            *dst += v;
        }
        Ok((value, grads))
    }

    /// `coef * sum of squared weights` (biases excluded) and its gradient.
    pub fn l2_penalty(&self, coef: f64) -> (f64, Vec<f64>) {
        let mut grads = vec![0.0; self.params.len()];
        let mut value = 0.0;
        for l in 0..self.n_layers() {
            let (w0, b0) = self.offsets(l);
            for i in w0..b0 {
                value += coef * self.params[i] * self.params[i];
                grads[i] = 2.0 * coef * self.params[i];
            }
        }
        (value, grads)
    }

    /// Slice of the weight block of layer `l`, used by tests.
    pub fn weight_slice_mut(&mut self, l: usize) -> &mut [f64] {
        let (w0, b0) = self.offsets(l);
        &mut self.params[w0..b0]
    }
}

/// Stacks rows into a matrix.
pub fn rows_to_matrix(rows: &[Vec<f64>], dim: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        m.slice_mut(s![i, ..]).assign(&ArrayView1::from(&r[..dim]));
    }
    m
}
