//! Tanh-squashed Gaussian policy.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::mlp::{check_layout, MlpSpec, NormMode};
use super::tape::{Bound, Graph, Mat, Var};
use super::tensor::{Tensor, TensorBundle};
use super::uniform_values;
use crate::error::{FedError, Result};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Stabiliser inside `log(1 - tanh(u)^2 + eps)`.
pub const TANH_EPS: f64 = 1e-6;
const HEAD_INIT: f64 = 3e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub hidden: Vec<usize>,
}

impl PolicySpec {
    fn trunk(&self) -> MlpSpec {
        MlpSpec::new(self.obs_dim, self.hidden.clone(), false)
    }

    fn feature_dim(&self) -> usize {
        *self.hidden.last().expect("policy needs hidden layers")
    }

    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<_> = self
            .trunk()
            .layout()
            .into_iter()
            .map(|(n, s)| (format!("trunk.{n}"), s))
            .collect();
        for head in ["mean", "log_std"] {
            out.push((format!("{head}.weight"), vec![self.feature_dim(), self.act_dim]));
            out.push((format!("{head}.bias"), vec![self.act_dim]));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNet {
    pub spec: PolicySpec,
    pub params: TensorBundle,
}

/// Graph nodes of a reparameterised sample.
pub struct PolicySample {
    pub action: Var,
    /// B×1 log-density of `action`.
    pub log_prob: Var,
    pub mean: Var,
    pub log_std: Var,
}

impl PolicyNet {
    pub fn init<R: Rng + ?Sized>(spec: PolicySpec, rng: &mut R) -> Result<Self> {
        if spec.hidden.is_empty() || spec.obs_dim == 0 || spec.act_dim == 0 {
            return Err(FedError::InvalidArgument("policy dimensions must be positive".into()));
        }
        let mut params = TensorBundle::new();
        params.merge_prefixed("trunk.", &spec.trunk().init(rng, None)?)?;
        let f = spec.feature_dim();
        for head in ["mean", "log_std"] {
            params.insert(
                format!("{head}.weight"),
                Tensor::new(vec![f, spec.act_dim], uniform_values(rng, f * spec.act_dim, HEAD_INIT))?,
            )?;
            params.insert(
                format!("{head}.bias"),
                Tensor::new(vec![spec.act_dim], uniform_values(rng, spec.act_dim, HEAD_INIT))?,
            )?;
        }
        Ok(PolicyNet { spec, params })
    }

    pub fn from_params(spec: PolicySpec, params: TensorBundle) -> Result<Self> {
        check_layout(&spec.layout(), &params)?;
        Ok(PolicyNet { spec, params })
    }

    /// Mean and clamped log-std heads.
    pub fn heads_graph(&self, g: &mut Graph, bound: &Bound, obs: Var) -> (Var, Var) {
        let (h, _) = self.spec.trunk().graph(g, bound, "trunk.", obs, NormMode::Eval);
        let h = g.relu(h);
        let mean = g.matmul(h, bound.get("mean.weight"));
        let mean = g.add_bias(mean, bound.get("mean.bias"));
        let ls = g.matmul(h, bound.get("log_std.weight"));
        let ls = g.add_bias(ls, bound.get("log_std.bias"));
        let log_std = g.clamp(ls, LOG_STD_MIN, LOG_STD_MAX);
        (mean, log_std)
    }

    /// Reparameterised draw `tanh(mean + std · noise)` with its log-density.
    /// `noise` is B×act_dim standard normal.
    pub fn sample_graph(&self, g: &mut Graph, bound: &Bound, obs: Var, noise: &Mat) -> PolicySample {
        let (mean, log_std) = self.heads_graph(g, bound, obs);
        let std = g.exp(log_std);
        let xi = g.constant(noise.clone());
        let spread = g.mul(std, xi);
        let u = g.add(mean, spread);
        let action = g.tanh(u);

        // Gaussian density of u: -0.5 ξ² - log σ - 0.5 log 2π, summed over dims.
        let half_sq = noise.data.iter().map(|x| -0.5 * x * x).collect();
        let half_sq = g.constant(Mat::from_vec(noise.rows, noise.cols, half_sq));
        let gauss = g.sub(half_sq, log_std);
        let gauss = g.add_scalar(gauss, -0.5 * (2.0 * std::f64::consts::PI).ln());
        // Change of variables through tanh.
        let sq = g.mul(action, action);
        let one_minus = g.scale(sq, -1.0);
        let one_minus = g.add_scalar(one_minus, 1.0 + TANH_EPS);
        let log_det = g.log(one_minus);
        let per_dim = g.sub(gauss, log_det);
        let log_prob = g.sum_cols(per_dim);
        PolicySample {
            action,
            log_prob,
            mean,
            log_std,
        }
    }

    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R, rows: usize) -> Mat {
        let n = rows * self.spec.act_dim;
        Mat::from_vec(rows, self.spec.act_dim, (0..n).map(|_| rng.sample(StandardNormal)).collect())
    }

    /// `tanh(mean)` for a batch of observations (rows of `obs`).
    pub fn deterministic_actions(&self, obs: &Mat) -> Mat {
        let mut g = Graph::new();
        let bound = g.bind(&self.params, false);
        let o = g.constant(obs.clone());
        let (mean, _) = self.heads_graph(&mut g, &bound, o);
        let a = g.tanh(mean);
        g.value(a).clone()
    }

    /// Stochastic actions and their log-densities for a batch of observations.
    pub fn sample_actions<R: Rng + ?Sized>(&self, obs: &Mat, rng: &mut R) -> (Mat, Vec<f64>) {
        let noise = self.sample_noise(rng, obs.rows);
        let mut g = Graph::new();
        let bound = g.bind(&self.params, false);
        let o = g.constant(obs.clone());
        let s = self.sample_graph(&mut g, &bound, o, &noise);
        (g.value(s.action).clone(), g.value(s.log_prob).data.clone())
    }
}

/// Draw one action for one observation.
pub fn tanh_gaussian_sample<R: Rng + ?Sized>(
    policy: &PolicyNet,
    obs: &[f64],
    rng: &mut R,
) -> Result<(Vec<f64>, f64)> {
    if obs.len() != policy.spec.obs_dim {
        return Err(FedError::Dimension(format!(
            "policy expects {} observation values, got {}",
            policy.spec.obs_dim,
            obs.len()
        )));
    }
    if obs.iter().any(|v| !v.is_finite()) {
        return Err(FedError::Numeric("non-finite observation".into()));
    }
    let (a, lp) = policy.sample_actions(&Mat::from_vec(1, obs.len(), obs.to_vec()), rng);
    Ok((a.data, lp[0]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn policy(seed: u64) -> PolicyNet {
        let spec = PolicySpec {
            obs_dim: 3,
            act_dim: 2,
            hidden: vec![8, 8],
        };
        PolicyNet::init(spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    /// Zero every weight so the heads output exactly their biases.
    fn with_heads(mut p: PolicyNet, mean: [f32; 2], log_std: [f32; 2]) -> PolicyNet {
        for (name, t) in p.params.entries_mut() {
            if name.ends_with("weight") {
                t.data_mut().fill(0.0);
            }
        }
        p.params.get_mut("mean.bias").unwrap().data_mut().copy_from_slice(&mean);
        p.params.get_mut("log_std.bias").unwrap().data_mut().copy_from_slice(&log_std);
        p
    }

    #[test]
    fn log_prob_at_zero_action_closed_form() {
        let p = with_heads(policy(0), [0.0, 0.0], [0.0, 0.0]);
        let mut g = Graph::new();
        let bound = g.bind(&p.params, false);
        let obs = g.constant(Mat::from_vec(1, 3, vec![0.3, -0.2, 0.9]));
        let s = p.sample_graph(&mut g, &bound, obs, &Mat::zeros(1, 2));
        assert_eq!(g.value(s.action).data, vec![0.0, 0.0]);
        let expected = 2.0 * (-0.5 * (2.0 * std::f64::consts::PI).ln()) - 2.0 * (1.0f64 + TANH_EPS).ln();
        assert!((g.value(s.log_prob).data[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn minimal_std_collapses_to_mean() {
        let p = with_heads(policy(1), [0.0, 0.0], [-25.0, -25.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let (a, _) = tanh_gaussian_sample(&p, &[1.0, 2.0, 3.0], &mut rng).unwrap();
            assert!(a.iter().all(|v| v.abs() < 1e-7));
        }
    }

    #[test]
    fn log_std_is_clamped() {
        let p = with_heads(policy(2), [0.0, 0.0], [50.0, -50.0]);
        let mut g = Graph::new();
        let bound = g.bind(&p.params, false);
        let obs = g.constant(Mat::zeros(1, 3));
        let (_, ls) = p.heads_graph(&mut g, &bound, obs);
        assert_eq!(g.value(ls).data, vec![LOG_STD_MAX, LOG_STD_MIN]);
    }

    #[test]
    fn sampled_actions_stay_inside_open_box() {
        let p = with_heads(policy(3), [0.5, -0.5], [0.5, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let obs = Mat::zeros(1000, 3);
        for _ in 0..100 {
            let (a, lp) = p.sample_actions(&obs, &mut rng);
            assert!(a.data.iter().all(|v| v.abs() < 1.0));
            assert!(lp.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn density_integrates_on_a_slice() {
        // 1-D action: p(a) = N(atanh a; μ, σ) / (1 - a²). Compare log p against
        // the implementation on a grid, and check ∫ p(a) da ≈ 1.
        let spec = PolicySpec {
            obs_dim: 1,
            act_dim: 1,
            hidden: vec![4],
        };
        let mut p = PolicyNet::init(spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        for (name, t) in p.params.entries_mut() {
            if name.ends_with("weight") {
                t.data_mut().fill(0.0);
            }
        }
        let (mu, log_sigma) = (0.3f64, -0.4f64);
        p.params.get_mut("mean.bias").unwrap().data_mut()[0] = mu as f32;
        p.params.get_mut("log_std.bias").unwrap().data_mut()[0] = log_sigma as f32;
        let (mu, log_sigma) = (mu as f32 as f64, log_sigma as f32 as f64);
        let sigma = log_sigma.exp();
        let n = 20000;
        let mut integral = 0.0;
        for i in 0..n {
            let a = -1.0 + (i as f64 + 0.5) * 2.0 / n as f64;
            let u = a.atanh();
            let xi = (u - mu) / sigma;
            let mut g = Graph::new();
            let bound = g.bind(&p.params, false);
            let obs = g.constant(Mat::zeros(1, 1));
            let s = p.sample_graph(&mut g, &bound, obs, &Mat::scalar(xi));
            let lp = g.value(s.log_prob).data[0];
            let exact = -0.5 * xi * xi - log_sigma - 0.5 * (2.0 * std::f64::consts::PI).ln()
                - (1.0 - a * a).ln();
            if a.abs() < 0.99 {
                assert!((lp - exact).abs() < 1e-3, "a={a}: {lp} vs {exact}");
            }
            integral += lp.exp() * 2.0 / n as f64;
        }
        assert!((integral - 1.0).abs() < 1e-3, "integral {integral}");
    }
}
