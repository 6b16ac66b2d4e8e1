//! Double-DQN learner: replay buffer, epsilon-greedy exploration, online and
//! target networks, and the training loop.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envsim::{Environment, Transition, HOLD, RECENTER, STATE_DIM};
use crate::error::{Error, Result};
use crate::neural::{copy_parameters, Adam, AdamConfig, Checkpoint, CheckpointMeta, Mlp, Standardizer};

pub const N_ACTIONS: usize = 2;

/// Fixed-capacity FIFO of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    data: Vec<Transition>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer { capacity, data: Vec::with_capacity(capacity.min(1 << 16)), cursor: 0 }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn get(&self, slot: usize) -> Option<&Transition> {
        self.data.get(slot)
    }

    /// Oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.data[self.cursor.min(self.data.len())..].iter().chain(&self.data[..self.cursor.min(self.data.len())])
    }

    /// Uniform slot indices, drawn with replacement.
    pub fn sample_indices<R: Rng>(&self, batch: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.data.len() < batch {
            return Err(Error::BufferTooSmall { have: self.data.len(), need: batch });
        }
        Ok((0..batch).map(|_| rng.random_range(0..self.data.len())).collect())
    }

    pub fn sample<R: Rng>(&self, batch: usize, rng: &mut R) -> Result<Vec<Transition>> {
        Ok(self.sample_indices(batch, rng)?.into_iter().map(|i| self.data[i]).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayMode {
    PerStep,
    PerEpisode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpsilonConfig {
    pub start: f64,
    pub end: f64,
    pub decay: f64,
    pub mode: DecayMode,
}

impl Default for EpsilonConfig {
    fn default() -> Self {
        EpsilonConfig { start: 1.0, end: 0.05, decay: 0.9998, mode: DecayMode::PerStep }
    }
}

/// Multiplicative decay floored at `end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonSchedule {
    pub config: EpsilonConfig,
    value: f64,
}

impl EpsilonSchedule {
    pub fn new(config: EpsilonConfig) -> Self {
        EpsilonSchedule { config, value: config.start }
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    fn decay(&mut self) {
        self.value = (self.value * self.config.decay).max(self.config.end);
    }

    pub fn on_step(&mut self) {
        if self.config.mode == DecayMode::PerStep {
            self.decay();
        }
    }

    pub fn on_episode_end(&mut self) {
        if self.config.mode == DecayMode::PerEpisode {
            self.decay();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub batch_size: usize,
    pub target_sync: u64,
    pub episodes: usize,
    pub episode_length: usize,
    pub learning_rate: f64,
    pub buffer_capacity: usize,
    pub epsilon: EpsilonConfig,
    pub hidden: Vec<usize>,
    /// Standardize inputs with statistics from a random-policy warmup.
    pub normalize_inputs: bool,
    /// Random starts are drawn at or after this index when the data allows.
    pub start_warmup: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.99,
            batch_size: 128,
            target_sync: 100,
            episodes: 300,
            episode_length: 36_000,
            learning_rate: 1e-4,
            buffer_capacity: 100_000,
            epsilon: EpsilonConfig::default(),
            hidden: vec![128, 64],
            normalize_inputs: true,
            start_warmup: crate::regime::DEFAULT_WINDOW,
        }
    }
}

impl TrainConfig {
    pub fn smoke() -> Self {
        TrainConfig { episodes: 20, episode_length: 3600, ..TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.epsilon;
        let ok = self.gamma > 0.0
            && self.gamma < 1.0
            && self.batch_size > 0
            && self.target_sync > 0
            && self.episodes > 0
            && self.episode_length > 0
            && self.learning_rate > 0.0
            && self.buffer_capacity >= self.batch_size
            && !self.hidden.contains(&0)
            && (0.0..=1.0).contains(&e.end)
            && e.end <= e.start
            && e.start <= 1.0
            && e.decay > 0.0
            && e.decay <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid train config {self:?}")))
        }
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![STATE_DIM];
        dims.extend(&self.hidden);
        dims.push(N_ACTIONS);
        dims
    }
}

/// Index of the larger Q-value; ties go to hold.
pub fn greedy(q: &[f64]) -> usize {
    if q[RECENTER] > q[HOLD] {
        RECENTER
    } else {
        HOLD
    }
}

pub fn select_action<R: Rng>(net: &Mlp, state: &[f64], epsilon: f64, rng: &mut R) -> Result<usize> {
    if rng.random::<f64>() < epsilon {
        return Ok(rng.random_range(0..N_ACTIONS));
    }
    Ok(greedy(&net.forward(state)?))
}

fn stack(rows: impl ExactSizeIterator<Item = [f64; STATE_DIM]>) -> Array2<f64> {
    let n = rows.len();
    let flat: Vec<f64> = rows.flatten().collect();
    Array2::from_shape_vec((n, STATE_DIM), flat).unwrap()
}

/// `y = r` at terminal transitions, else `r + gamma * Q_target(s', argmax_a Q_online(s', a))`.
pub fn ddqn_targets(batch: &[Transition], online: &Mlp, target: &Mlp, gamma: f64) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Ok(Vec::new());
    }
    let next = stack(batch.iter().map(|t| t.next_state));
    let q_online = online.forward_batch(next.view())?;
    let q_target = target.forward_batch(next.view())?;
    Ok(batch
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if t.terminal {
                t.reward
            } else {
                let a = greedy(q_online.row(i).as_slice().unwrap());
                t.reward + gamma * q_target[[i, a]]
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    #[serde(rename = "return")]
    pub episode_return: f64,
    pub epsilon: f64,
    pub mean_loss: f64,
    pub rebalances: u64,
    pub active_frac: f64,
}

pub struct Agent {
    pub online: Mlp,
    pub target: Mlp,
    pub optimizer: Adam,
    pub buffer: ReplayBuffer,
    pub config: TrainConfig,
    pub input_norm: Standardizer,
    pub epsilon: EpsilonSchedule,
    /// Global environment-step counter.
    pub steps: u64,
    rng: ChaCha8Rng,
}

impl Agent {
    pub fn new(config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let online = Mlp::new(&config.layer_dims(), &mut rng)?;
        let mut target = Mlp::zeros(&config.layer_dims())?;
        copy_parameters(&online, &mut target)?;
        let optimizer = Adam::new(&online, AdamConfig { learning_rate: config.learning_rate, ..AdamConfig::default() });
        Ok(Agent {
            online,
            target,
            optimizer,
            buffer: ReplayBuffer::new(config.buffer_capacity),
            input_norm: Standardizer::identity(STATE_DIM),
            epsilon: EpsilonSchedule::new(config.epsilon),
            config,
            steps: 0,
            rng,
        })
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn normalize(&self, raw: &[f64; STATE_DIM]) -> [f64; STATE_DIM] {
        let mut x = *raw;
        self.input_norm.apply(&mut x);
        x
    }

    pub fn act(&mut self, raw: &[f64; STATE_DIM]) -> Result<usize> {
        let x = self.normalize(raw);
        select_action(&self.online, &x, self.epsilon.value(), &mut self.rng)
    }

    /// One gradient step on an already-normalized batch. Returns the mean
    /// squared TD error before the update.
    pub fn train_on_batch(&mut self, batch: &[Transition]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::BufferTooSmall { have: 0, need: 1 });
        }
        let y = ddqn_targets(batch, &self.online, &self.target, self.config.gamma)?;
        let states = stack(batch.iter().map(|t| t.state));
        let cache = self.online.forward_cached(states.view())?;
        let q = cache.output();
        let b = batch.len() as f64;
        let mut grad = Array2::zeros(q.dim());
        let mut loss = 0.0;
        for (i, t) in batch.iter().enumerate() {
            let err = q[[i, t.action]] - y[i];
            loss += err * err;
            grad[[i, t.action]] = 2.0 * err / b;
        }
        let grads = self.online.backward(&cache, grad.view())?;
        self.optimizer.update(&mut self.online, &grads)?;
        Ok(loss / b)
    }

    /// Samples a minibatch from the buffer and trains on it.
    pub fn train_step(&mut self) -> Result<f64> {
        let batch = self.buffer.sample(self.config.batch_size, &mut self.rng)?;
        self.train_on_batch(&batch)
    }

    pub fn sync_target(&mut self) -> Result<()> {
        copy_parameters(&self.online, &mut self.target)
    }

    /// Fits the input standardizer on states visited by a random policy.
    pub fn fit_input_norm(&mut self, env: &mut Environment, steps: usize) -> Result<()> {
        let mut sum = [0.0; STATE_DIM];
        let mut sq = [0.0; STATE_DIM];
        let mut n = 0.0;
        while (n as usize) < steps {
            let start = env.sample_start(&mut self.rng, self.config.start_warmup);
            env.reset(start)?;
            while !env.is_done() && (n as usize) < steps {
                let a = self.rng.random_range(0..N_ACTIONS);
                let (t, _) = env.step(a)?;
                for k in 0..STATE_DIM {
                    sum[k] += t.state[k];
                    sq[k] += t.state[k] * t.state[k];
                }
                n += 1.0;
            }
        }
        let mut shift = vec![0.0; STATE_DIM];
        let mut scale = vec![1.0; STATE_DIM];
        for k in 0..STATE_DIM {
            let mean = sum[k] / n;
            let var = (sq[k] / n - mean * mean).max(0.0);
            shift[k] = mean;
            if var.sqrt() > 1e-12 {
                scale[k] = var.sqrt();
            }
        }
        self.input_norm = Standardizer { shift, scale };
        Ok(())
    }

    pub fn checkpoint(&self, seed: u64, config_hash: &str) -> Checkpoint {
        let meta = CheckpointMeta {
            seed,
            training_step: self.steps,
            config_hash: config_hash.to_string(),
            input_norm: Some(self.input_norm.clone()),
        };
        Checkpoint::from_net(&self.online, Some(&self.optimizer), meta)
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpisodeLog>,
}

/// The full training loop: per-step buffer insertion, one minibatch update
/// per step once the buffer can fill a batch, target sync on the global step
/// counter, and epsilon decay per step or per episode.
pub fn train(env: &mut Environment, config: &TrainConfig, seed: u64, config_hash: &str) -> Result<TrainOutcome> {
    if env.config().episode_length != config.episode_length {
        return Err(Error::Config("environment and train config disagree on episode_length".into()));
    }
    let mut agent = Agent::new(config.clone(), seed)?;
    if config.normalize_inputs {
        agent.fit_input_norm(env, config.episode_length)?;
    }
    let mut log = Vec::with_capacity(config.episodes);
    for episode in 0..config.episodes {
        let start = env.sample_start(agent.rng(), config.start_warmup);
        env.reset(start)?;
        let (mut ret, mut loss_sum, mut updates) = (0.0, 0.0, 0usize);
        while !env.is_done() {
            let raw = env.state().to_array();
            let action = agent.act(&raw)?;
            let (mut t, _) = env.step(action)?;
            ret += t.reward;
            t.state = agent.normalize(&t.state);
            t.next_state = agent.normalize(&t.next_state);
            agent.buffer.push(t);
            agent.steps += 1;
            if agent.buffer.len() >= config.batch_size {
                loss_sum += agent.train_step()?;
                updates += 1;
            }
            if agent.steps % config.target_sync == 0 {
                agent.sync_target()?;
            }
            agent.epsilon.on_step();
        }
        let pos = env.position();
        log.push(EpisodeLog {
            episode,
            episode_return: ret,
            epsilon: agent.epsilon.value(),
            mean_loss: if updates > 0 { loss_sum / updates as f64 } else { 0.0 },
            rebalances: pos.rebalance_count,
            active_frac: pos.active_fraction(),
        });
        agent.epsilon.on_episode_end();
    }
    Ok(TrainOutcome { checkpoint: agent.checkpoint(seed, config_hash), log })
}

pub fn write_training_log<W: std::io::Write>(log: &[EpisodeLog], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for row in log {
        wtr.serialize(row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// A frozen greedy policy: network plus its input standardizer.
#[derive(Debug, Clone)]
pub struct GreedyPolicy {
    pub net: Mlp,
    pub input_norm: Standardizer,
}

impl GreedyPolicy {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let net = ck.to_net()?;
        if net.input_dim() != STATE_DIM || net.output_dim() != N_ACTIONS {
            return Err(Error::Shape(format!("checkpoint dims {:?} do not map 8 features to 2 actions", net.layer_dims())));
        }
        let input_norm = ck.metadata.input_norm.clone().unwrap_or_else(|| Standardizer::identity(STATE_DIM));
        if input_norm.shift.len() != STATE_DIM || input_norm.scale.len() != STATE_DIM {
            return Err(Error::Shape("input normalizer has wrong length".into()));
        }
        Ok(GreedyPolicy { net, input_norm })
    }

    pub fn q_values(&self, raw: &[f64; STATE_DIM]) -> Result<[f64; N_ACTIONS]> {
        let mut x = *raw;
        self.input_norm.apply(&mut x);
        let q = self.net.forward(&x)?;
        Ok([q[0], q[1]])
    }

    pub fn act(&self, raw: &[f64; STATE_DIM]) -> Result<usize> {
        Ok(greedy(&self.q_values(raw)?))
    }
}

/// Summary of greedy evaluation episodes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Evaluation {
    pub returns: Vec<f64>,
    pub rebalances: Vec<u64>,
    pub active_fracs: Vec<f64>,
    /// Signed `S/c - 1` at each agent-initiated recenter, with the prior center `c`.
    pub trigger_deviations: Vec<(f64, f64)>,
}

pub fn evaluate<R: Rng>(env: &mut Environment, policy: &GreedyPolicy, episodes: usize, warmup: usize, rng: &mut R) -> Result<Evaluation> {
    let mut ev = Evaluation::default();
    for _ in 0..episodes {
        let start = env.sample_start(rng, warmup);
        env.reset(start)?;
        let mut ret = 0.0;
        while !env.is_done() {
            let action = policy.act(&env.state().to_array())?;
            let (t, info) = env.step(action)?;
            ret += t.reward;
            if action == RECENTER {
                ev.trigger_deviations.push((info.decision_price / info.prior_center - 1.0, info.prior_center));
            }
        }
        ev.returns.push(ret);
        ev.rebalances.push(env.position().rebalance_count);
        ev.active_fracs.push(env.position().active_fraction());
    }
    Ok(ev)
}
