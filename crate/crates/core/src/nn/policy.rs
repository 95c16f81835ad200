use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::mlp::{Init, Mlp};
use crate::envs::{ActionSpace, ObservationSpace, Policy, SimRng};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Maps raw observations to network inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Encoder {
    /// `(x - shift) / scale` per dimension.
    Affine { shift: Vec<f64>, scale: Vec<f64> },
    /// One integer component in `[0, n)`, one-hot encoded.
    OneHot { n: usize },
    /// Several integer components, one-hot of their row-major joint index.
    JointOneHot { sizes: Vec<usize> },
}

impl Encoder {
    pub fn identity(dim: usize) -> Self {
        Encoder::Affine {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn for_observation(space: &ObservationSpace) -> Self {
        match space {
            ObservationSpace::Discrete(n) => Encoder::OneHot { n: *n },
            ObservationSpace::Box { low, .. } => Encoder::identity(low.len()),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Encoder::Affine { shift, .. } => shift.len(),
            Encoder::OneHot { .. } => 1,
            Encoder::JointOneHot { sizes } => sizes.len(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Encoder::Affine { shift, .. } => shift.len(),
            Encoder::OneHot { n } => *n,
            Encoder::JointOneHot { sizes } => sizes.iter().product(),
        }
    }

    fn index(x: f64, n: usize) -> Result<usize> {
        if x.is_finite() && x >= 0.0 && (x as usize) < n && x.fract() == 0.0 {
            Ok(x as usize)
        } else {
            Err(Error::OutOfBounds(format!("index {x} not in [0, {n})")))
        }
    }

    pub fn encode_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "encoder expects {} inputs, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        match self {
            Encoder::Affine { shift, scale } => {
                for i in 0..x.len() {
                    out[i] = (x[i] - shift[i]) / scale[i];
                }
            }
            Encoder::OneHot { n } => {
                out.iter_mut().for_each(|v| *v = 0.0);
                out[Self::index(x[0], *n)?] = 1.0;
            }
            Encoder::JointOneHot { sizes } => {
                out.iter_mut().for_each(|v| *v = 0.0);
                let mut idx = 0;
                for (v, &n) in x.iter().zip(sizes) {
                    idx = idx * n + Self::index(*v, n)?;
                }
                out[idx] = 1.0;
            }
        }
        Ok(())
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.output_dim()];
        self.encode_into(x, &mut out)?;
        Ok(out)
    }

    pub fn encode_batch(&self, rows: &[Vec<f64>]) -> Result<Array2<f64>> {
        let d = self.output_dim();
        let mut m = Array2::zeros((rows.len(), d));
        for (i, r) in rows.iter().enumerate() {
            let mut row = m.row_mut(i);
            self.encode_into(r, row.as_slice_mut().expect("contiguous row"))?;
        }
        Ok(m)
    }
}

fn layer_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend_from_slice(hidden);
    s.push(output);
    s
}

/// Diagonal Gaussian with a state-independent learned log-std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    pub encoder: Encoder,
    pub net: Mlp,
    pub log_std: Vec<f64>,
}

impl GaussianPolicy {
    pub fn new<R: Rng + ?Sized>(
        encoder: Encoder,
        hidden: &[usize],
        action_dim: usize,
        init_std: f64,
        rng: &mut R,
    ) -> Self {
        let net = Mlp::new(
            &layer_sizes(encoder.output_dim(), hidden, action_dim),
            Init::POLICY,
            rng,
        );
        Self {
            encoder,
            net,
            log_std: vec![init_std.ln(); action_dim],
        }
    }

    pub fn action_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn mean(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.net.forward_one(&self.encoder.encode(obs)?)
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }

    fn log_prob_row(&self, mean: &[f64], action: &[f64]) -> f64 {
        mean.iter()
            .zip(action)
            .zip(&self.log_std)
            .map(|((m, a), ls)| {
                let z = (a - m) / ls.exp();
                -0.5 * z * z - ls - 0.5 * LN_2PI
            })
            .sum()
    }

    pub fn entropy(&self) -> f64 {
        self.log_std
            .iter()
            .map(|ls| ls + 0.5 * (LN_2PI + 1.0))
            .sum()
    }
}

/// Softmax over network logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalPolicy {
    pub encoder: Encoder,
    pub net: Mlp,
}

impl CategoricalPolicy {
    pub fn new<R: Rng + ?Sized>(
        encoder: Encoder,
        hidden: &[usize],
        n_actions: usize,
        rng: &mut R,
    ) -> Self {
        let net = Mlp::new(
            &layer_sizes(encoder.output_dim(), hidden, n_actions),
            Init::POLICY,
            rng,
        );
        Self { encoder, net }
    }

    pub fn n_actions(&self) -> usize {
        self.net.output_dim()
    }

    pub fn probs(&self, obs: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.net.forward_one(&self.encoder.encode(obs)?)?))
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// A stochastic policy with a differentiable log-density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "distribution", rename_all = "snake_case")]
pub enum Actor {
    Gaussian(GaussianPolicy),
    Categorical(CategoricalPolicy),
}

/// Log-probabilities of a batch together with the gradient of
/// `sum_i coef_i * logp_i + entropy_coef * mean entropy`.
pub struct LogProbGrad {
    pub log_probs: Vec<f64>,
    pub grad: Vec<f64>,
    pub mean_entropy: f64,
}

impl Actor {
    /// Gaussian policy for box action spaces, categorical for discrete ones.
    pub fn for_spaces<R: Rng + ?Sized>(
        obs: &ObservationSpace,
        action: &ActionSpace,
        hidden: &[usize],
        init_std: f64,
        rng: &mut R,
    ) -> Self {
        let enc = Encoder::for_observation(obs);
        match action {
            ActionSpace::Discrete(n) => {
                Actor::Categorical(CategoricalPolicy::new(enc, hidden, *n, rng))
            }
            ActionSpace::Box { low, .. } => {
                Actor::Gaussian(GaussianPolicy::new(enc, hidden, low.len(), init_std, rng))
            }
        }
    }

    pub fn encoder(&self) -> &Encoder {
        match self {
            Actor::Gaussian(p) => &p.encoder,
            Actor::Categorical(p) => &p.encoder,
        }
    }

    pub fn net(&self) -> &Mlp {
        match self {
            Actor::Gaussian(p) => &p.net,
            Actor::Categorical(p) => &p.net,
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            Actor::Gaussian(p) => p.net.n_params() + p.log_std.len(),
            Actor::Categorical(p) => p.net.n_params(),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            Actor::Gaussian(p) => p.net.params().iter().chain(&p.log_std).copied().collect(),
            Actor::Categorical(p) => p.net.params().to_vec(),
        }
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params());
        match self {
            Actor::Gaussian(p) => {
                let n = p.net.n_params();
                p.net.params_mut().copy_from_slice(&flat[..n]);
                p.log_std.copy_from_slice(&flat[n..]);
            }
            Actor::Categorical(p) => p.net.params_mut().copy_from_slice(flat),
        }
    }

    /// Draws an action and returns it with its log-probability.
    pub fn sample(&self, obs: &[f64], rng: &mut SimRng) -> Result<(Vec<f64>, f64)> {
        match self {
            Actor::Gaussian(p) => {
                let mean = p.mean(obs)?;
                let a: Vec<f64> = mean
                    .iter()
                    .zip(&p.log_std)
                    .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let lp = p.log_prob_row(&mean, &a);
                Ok((a, lp))
            }
            Actor::Categorical(p) => {
                let probs = p.probs(obs)?;
                let a = crate::mdp::sample_categorical(&probs, rng);
                Ok((vec![a as f64], probs[a].ln()))
            }
        }
    }

    /// Mean action (Gaussian) or most likely action (categorical).
    pub fn mode(&self, obs: &[f64]) -> Result<Vec<f64>> {
        match self {
            Actor::Gaussian(p) => p.mean(obs),
            Actor::Categorical(p) => {
                let probs = p.probs(obs)?;
                let best = probs
                    .iter()
                    .enumerate()
                    .fold(0, |b, (i, &v)| if v > probs[b] { i } else { b });
                Ok(vec![best as f64])
            }
        }
    }

    pub fn log_probs(&self, obs: &[Vec<f64>], actions: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(self.log_prob_grad(obs, actions, None, 0.0)?.log_probs)
    }

    /// Batched log-densities, and when `coef` is given the gradient of
    /// `sum_i coef_i logp_i + entropy_coef * mean_entropy` in [`Actor::params`] order.
    pub fn log_prob_grad(
        &self,
        obs: &[Vec<f64>],
        actions: &[Vec<f64>],
        coef: Option<&[f64]>,
        entropy_coef: f64,
    ) -> Result<LogProbGrad> {
        if obs.len() != actions.len() {
            return Err(Error::Dimension(
                "observations and actions differ in count".into(),
            ));
        }
        let n = obs.len();
        let x = self.encoder().encode_batch(obs)?;
        let tape = self.net().forward_tape(x.view())?;
        let out = tape.output();
        match self {
            Actor::Gaussian(p) => {
                let d = p.action_dim();
                let std: Vec<f64> = p.std();
                let mut logp = Vec::with_capacity(n);
                let mut gout = Array2::zeros((n, d));
                let mut glog = vec![0.0; d];
                for i in 0..n {
                    let mean: Vec<f64> = out.row(i).to_vec();
                    if actions[i].len() != d {
                        return Err(Error::Dimension("action width".into()));
                    }
                    logp.push(p.log_prob_row(&mean, &actions[i]));
                    if let Some(c) = coef {
                        for j in 0..d {
                            let z = (actions[i][j] - mean[j]) / std[j];
                            gout[[i, j]] = c[i] * z / std[j];
                            glog[j] += c[i] * (z * z - 1.0);
                        }
                    }
                }
                let mut grad = Vec::new();
                if coef.is_some() {
                    grad = p.net.backward(&tape, gout.view())?;
                    // d entropy / d log_std = 1 per dimension.
                    grad.extend(glog.iter().map(|g| g + entropy_coef));
                }
                Ok(LogProbGrad {
                    log_probs: logp,
                    grad,
                    mean_entropy: p.entropy(),
                })
            }
            Actor::Categorical(p) => {
                let k = p.n_actions();
                let mut logp = Vec::with_capacity(n);
                let mut gout = Array2::zeros((n, k));
                let mut ent = 0.0;
                for i in 0..n {
                    let probs = softmax(out.row(i).as_slice().expect("row"));
                    let a = Encoder::index(actions[i][0], k)?;
                    logp.push(probs[a].max(f64::MIN_POSITIVE).ln());
                    let h: f64 = -probs
                        .iter()
                        .filter(|&&q| q > 0.0)
                        .map(|q| q * q.ln())
                        .sum::<f64>();
                    ent += h;
                    if let Some(c) = coef {
                        for j in 0..k {
                            let onehot = if j == a { 1.0 } else { 0.0 };
                            let mut g = c[i] * (onehot - probs[j]);
                            if entropy_coef != 0.0 && probs[j] > 0.0 {
                                g += entropy_coef / n as f64 * (-probs[j] * (probs[j].ln() + h));
                            }
                            gout[[i, j]] = g;
                        }
                    }
                }
                let grad = if coef.is_some() {
                    p.net.backward(&tape, gout.view())?
                } else {
                    Vec::new()
                };
                Ok(LogProbGrad {
                    log_probs: logp,
                    grad,
                    mean_entropy: if n > 0 { ent / n as f64 } else { 0.0 },
                })
            }
        }
    }
}

impl Policy for Actor {
    fn act(&self, state: &[f64], rng: &mut SimRng) -> Vec<f64> {
        self.sample(state, rng)
            .expect("observation matches policy encoder")
            .0
    }
}

/// Deterministic deployment of an [`Actor`]: always its mode.
pub struct Greedy<'a>(pub &'a Actor);

impl Policy for Greedy<'_> {
    fn act(&self, state: &[f64], _rng: &mut SimRng) -> Vec<f64> {
        self.0
            .mode(state)
            .expect("observation matches policy encoder")
    }
}

/// State-value estimator. The network predicts a standardized value;
/// `shift` and `scale` map it back to return units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueFunction {
    pub encoder: Encoder,
    pub net: Mlp,
    #[serde(default)]
    pub shift: f64,
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

impl ValueFunction {
    pub fn new<R: Rng + ?Sized>(encoder: Encoder, hidden: &[usize], rng: &mut R) -> Self {
        let net = Mlp::new(
            &layer_sizes(encoder.output_dim(), hidden, 1),
            Init::VALUE,
            rng,
        );
        Self {
            encoder,
            net,
            shift: 0.0,
            scale: 1.0,
        }
    }

    pub fn value(&self, obs: &[f64]) -> Result<f64> {
        Ok(self.net.forward_one(&self.encoder.encode(obs)?)?[0] * self.scale + self.shift)
    }

    pub fn values(&self, obs: &[Vec<f64>]) -> Result<Vec<f64>> {
        let x = self.encoder.encode_batch(obs)?;
        Ok(self
            .net
            .forward(x.view())?
            .column(0)
            .iter()
            .map(|v| v * self.scale + self.shift)
            .collect())
    }

    /// Changes the output normalization while leaving every prediction
    /// unchanged (the output layer absorbs the difference).
    pub fn renormalize(&mut self, shift: f64, scale: f64) {
        assert!(scale > 0.0);
        let ratio = self.scale / scale;
        let offset = (self.shift - shift) / scale;
        let sizes = self.net.sizes().to_vec();
        let fan_in = sizes[sizes.len() - 2];
        let params = self.net.params_mut();
        let n = params.len();
        // Output layer: fan_in weights then one bias, at the end of the buffer.
        for w in &mut params[n - fan_in - 1..n - 1] {
            *w *= ratio;
        }
        params[n - 1] = params[n - 1] * ratio + offset;
        self.shift = shift;
        self.scale = scale;
    }

    /// Mean squared error between the standardized prediction and the
    /// standardized `targets`, with its parameter gradient.
    pub fn mse_grad(&self, obs: &[Vec<f64>], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
        let n = obs.len();
        if n == 0 || targets.len() != n {
            return Err(Error::Empty("value regression batch".into()));
        }
        let x = self.encoder.encode_batch(obs)?;
        let tape = self.net.forward_tape(x.view())?;
        let out = tape.output();
        let mut g = Array2::zeros((n, 1));
        let mut loss = 0.0;
        for i in 0..n {
            let r = out[[i, 0]] - (targets[i] - self.shift) / self.scale;
            loss += r * r / n as f64;
            g[[i, 0]] = 2.0 * r / n as f64;
        }
        Ok((loss, self.net.backward(&tape, g.view())?))
    }
}

/// Row view helper for tests and oracles.
pub fn as_matrix(rows: &[Vec<f64>]) -> Array2<f64> {
    let d = rows.first().map_or(0, Vec::len);
    super::mlp::rows_to_matrix(rows, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::rng_from_seed;

    fn fd_check(actor: &Actor, obs: &[Vec<f64>], acts: &[Vec<f64>], coef: &[f64], ent: f64) {
        let g = actor
            .log_prob_grad(obs, acts, Some(coef), ent)
            .unwrap()
            .grad;
        let base = actor.params();
        let objective = |p: &[f64]| {
            let mut a = actor.clone();
            a.set_params(p);
            let r = a.log_prob_grad(obs, acts, None, 0.0).unwrap();
            r.log_probs
                .iter()
                .zip(coef)
                .map(|(l, c)| l * c)
                .sum::<f64>()
                + ent * r.mean_entropy
        };
        let eps = 1e-5;
        for i in 0..base.len() {
            let mut hi = base.clone();
            hi[i] += eps;
            let mut lo = base.clone();
            lo[i] -= eps;
            let fd = (objective(&hi) - objective(&lo)) / (2.0 * eps);
            let denom = fd.abs().max(g[i].abs()).max(1e-6);
            assert!(
                (fd - g[i]).abs() / denom < 1e-4,
                "param {i}: fd {fd} analytic {}",
                g[i]
            );
        }
    }

    #[test]
    fn gaussian_log_prob_gradient() {
        let mut rng = rng_from_seed(0);
        let mut p = GaussianPolicy::new(Encoder::identity(3), &[5, 4], 2, 0.5, &mut rng);
        p.net.params_mut().iter_mut().for_each(|v| *v *= 3.0);
        let actor = Actor::Gaussian(p);
        let obs = vec![vec![0.1, -0.4, 0.9], vec![1.0, 0.2, -0.3]];
        let acts = vec![vec![0.3, -0.2], vec![-0.7, 0.5]];
        fd_check(&actor, &obs, &acts, &[0.7, -1.3], 0.05);
    }

    #[test]
    fn categorical_log_prob_gradient() {
        let mut rng = rng_from_seed(1);
        let mut p = CategoricalPolicy::new(Encoder::OneHot { n: 3 }, &[6], 4, &mut rng);
        p.net.params_mut().iter_mut().for_each(|v| *v *= 50.0);
        let actor = Actor::Categorical(p);
        let obs = vec![vec![0.0], vec![2.0], vec![1.0]];
        let acts = vec![vec![3.0], vec![0.0], vec![1.0]];
        fd_check(&actor, &obs, &acts, &[1.0, -0.5, 2.0], 0.1);
    }

    #[test]
    fn sampled_log_prob_matches_batch() {
        let mut rng = rng_from_seed(2);
        let actor = Actor::Gaussian(GaussianPolicy::new(
            Encoder::identity(2),
            &[8],
            1,
            0.5,
            &mut rng,
        ));
        let obs = vec![0.2, -0.1];
        let (a, lp) = actor.sample(&obs, &mut rng).unwrap();
        let lp2 = actor.log_probs(&[obs], &[a]).unwrap()[0];
        assert!((lp - lp2).abs() < 1e-12);
    }

    #[test]
    fn renormalize_preserves_values() {
        let mut rng = rng_from_seed(3);
        let mut v = ValueFunction::new(Encoder::identity(2), &[8, 8], &mut rng);
        let obs = vec![vec![0.3, -0.2], vec![1.2, 0.4]];
        let before = v.values(&obs).unwrap();
        v.renormalize(40.0, 12.5);
        let after = v.values(&obs).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn joint_one_hot_index() {
        let e = Encoder::JointOneHot {
            sizes: vec![3, 2, 3],
        };
        let v = e.encode(&[2.0, 1.0, 0.0]).unwrap();
        assert_eq!(v.len(), 18);
        assert_eq!(v.iter().position(|&x| x == 1.0), Some((2 * 2 + 1) * 3));
        assert!(e.encode(&[3.0, 0.0, 0.0]).is_err());
    }
}
