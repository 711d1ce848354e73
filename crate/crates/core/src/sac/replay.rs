use rand::Rng;

use crate::error::{FedError, Result};
use crate::nets::{Mat, Tensor, TensorBundle};

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    /// True only for genuine terminal states (not horizon truncation).
    pub done: bool,
}

/// Uniformly sampled minibatch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub obs: Mat,
    pub action: Mat,
    pub reward: Vec<f64>,
    pub next_obs: Mat,
    pub done: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.reward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reward.is_empty()
    }

    pub fn from_transitions(ts: &[Transition]) -> Batch {
        let rows = |f: &dyn Fn(&Transition) -> &[f64]| {
            let width = ts.first().map_or(0, |t| f(t).len());
            Mat::from_vec(ts.len(), width, ts.iter().flat_map(|t| f(t).iter().copied()).collect())
        };
        Batch {
            obs: rows(&|t| &t.obs),
            action: rows(&|t| &t.action),
            reward: ts.iter().map(|t| t.reward).collect(),
            next_obs: rows(&|t| &t.next_obs),
            done: ts.iter().map(|t| if t.done { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// Fixed-capacity FIFO ring of transitions, stored as f32.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_dim: usize,
    act_dim: usize,
    obs: Vec<f32>,
    action: Vec<f32>,
    reward: Vec<f32>,
    next_obs: Vec<f32>,
    done: Vec<f32>,
    /// Slot the next insertion overwrites once full.
    head: usize,
    len: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize, act_dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(FedError::InvalidArgument("replay capacity must be positive".into()));
        }
        Ok(ReplayBuffer {
            capacity,
            obs_dim,
            act_dim,
            obs: Vec::new(),
            action: Vec::new(),
            reward: Vec::new(),
            next_obs: Vec::new(),
            done: Vec::new(),
            head: 0,
            len: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: &Transition) -> Result<()> {
        if t.obs.len() != self.obs_dim || t.next_obs.len() != self.obs_dim || t.action.len() != self.act_dim {
            return Err(FedError::Dimension("transition width does not match buffer".into()));
        }
        let finite = t.obs.iter().chain(&t.next_obs).chain(&t.action).all(|v| v.is_finite())
            && t.reward.is_finite();
        if !finite {
            return Err(FedError::Numeric("non-finite transition".into()));
        }
        let f32s = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
        if self.len < self.capacity {
            self.obs.extend(f32s(&t.obs));
            self.action.extend(f32s(&t.action));
            self.reward.push(t.reward as f32);
            self.next_obs.extend(f32s(&t.next_obs));
            self.done.push(if t.done { 1.0 } else { 0.0 });
            self.len += 1;
        } else {
            let i = self.head;
            let (o, a) = (self.obs_dim, self.act_dim);
            self.obs[i * o..(i + 1) * o].copy_from_slice(&f32s(&t.obs));
            self.action[i * a..(i + 1) * a].copy_from_slice(&f32s(&t.action));
            self.reward[i] = t.reward as f32;
            self.next_obs[i * o..(i + 1) * o].copy_from_slice(&f32s(&t.next_obs));
            self.done[i] = if t.done { 1.0 } else { 0.0 };
            self.head = (self.head + 1) % self.capacity;
        }
        Ok(())
    }

    /// The stored transition in slot `i` (insertion order is not preserved after wrap).
    pub fn get(&self, i: usize) -> Transition {
        let (o, a) = (self.obs_dim, self.act_dim);
        let f64s = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        Transition {
            obs: f64s(&self.obs[i * o..(i + 1) * o]),
            action: f64s(&self.action[i * a..(i + 1) * a]),
            reward: self.reward[i] as f64,
            next_obs: f64s(&self.next_obs[i * o..(i + 1) * o]),
            done: self.done[i] != 0.0,
        }
    }

    /// `size` transitions drawn uniformly with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, size: usize) -> Result<Batch> {
        if self.len == 0 {
            return Err(FedError::InvalidArgument("cannot sample an empty buffer".into()));
        }
        let (o, a) = (self.obs_dim, self.act_dim);
        let mut batch = Batch {
            obs: Mat::zeros(size, o),
            action: Mat::zeros(size, a),
            reward: Vec::with_capacity(size),
            next_obs: Mat::zeros(size, o),
            done: Vec::with_capacity(size),
        };
        for r in 0..size {
            let i = rng.random_range(0..self.len);
            for c in 0..o {
                batch.obs.data[r * o + c] = self.obs[i * o + c] as f64;
                batch.next_obs.data[r * o + c] = self.next_obs[i * o + c] as f64;
            }
            for c in 0..a {
                batch.action.data[r * a + c] = self.action[i * a + c] as f64;
            }
            batch.reward.push(self.reward[i] as f64);
            batch.done.push(self.done[i] as f64);
        }
        Ok(batch)
    }

    pub fn to_bundle(&self) -> TensorBundle {
        let n = self.len;
        let mut b = TensorBundle::new();
        let mut put = |name: &str, cols: usize, data: &[f32]| {
            b.insert(name, Tensor::new(vec![n, cols], data.to_vec()).expect("consistent lengths"))
                .expect("unique names");
        };
        put("obs", self.obs_dim, &self.obs);
        put("action", self.act_dim, &self.action);
        put("reward", 1, &self.reward);
        put("next_obs", self.obs_dim, &self.next_obs);
        put("done", 1, &self.done);
        b.insert("head", Tensor::scalar(self.head as f32)).expect("unique names");
        b
    }

    pub fn load_bundle(&mut self, b: &TensorBundle) -> Result<()> {
        let fetch = |name: &str, cols: usize| -> Result<Vec<f32>> {
            let t = b
                .get(name)
                .ok_or_else(|| FedError::Format(format!("replay state lacks `{name}`")))?;
            if t.shape().len() != 2 || t.shape()[1] != cols {
                return Err(FedError::Format(format!("replay tensor `{name}` has shape {:?}", t.shape())));
            }
            Ok(t.data().to_vec())
        };
        let obs = fetch("obs", self.obs_dim)?;
        let n = obs.len() / self.obs_dim.max(1);
        if n > self.capacity {
            return Err(FedError::Format("replay state exceeds capacity".into()));
        }
        let head = b
            .get("head")
            .and_then(|t| t.data().first().copied())
            .ok_or_else(|| FedError::Format("replay state lacks `head`".into()))? as usize;
        self.action = fetch("action", self.act_dim)?;
        self.reward = fetch("reward", 1)?;
        self.next_obs = fetch("next_obs", self.obs_dim)?;
        self.done = fetch("done", 1)?;
        self.obs = obs;
        self.len = n;
        self.head = head;
        if self.reward.len() != n || self.done.len() != n || self.action.len() != n * self.act_dim {
            return Err(FedError::Format("replay tensors disagree on length".into()));
        }
        Ok(())
    }
}
