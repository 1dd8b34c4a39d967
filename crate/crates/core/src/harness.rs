//! Experiment orchestration: run configs, per-seed training, greedy
//! evaluation, metrics CSV, checkpoints and run manifests.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{greedy_action, DqnAgent, OptimizerState, TrainConfig, Transition};
use crate::env::{Controller, Env, Pipeline, Scenario};
use crate::error::{Error, Result};
use crate::kan::{KanConfig, KanNetwork};
use crate::mlp::Mlp;
use crate::parallel::map_each;
use crate::qnet::QFunction;

pub const CHECKPOINT_VERSION: u32 = 1;
/// Mixed into the seed so the agent's random stream differs from the env's.
const AGENT_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Ablation {
    Full,
    NoInspector,
    NoMpc,
    MlpBaseline,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::NoInspector, Ablation::NoMpc, Ablation::MlpBaseline];

    pub fn pipeline(self) -> Pipeline {
        match self {
            Ablation::Full | Ablation::MlpBaseline => Pipeline { inspector: true, controller: Controller::Mpc },
            Ablation::NoInspector => Pipeline { inspector: false, controller: Controller::Mpc },
            Ablation::NoMpc => Pipeline { inspector: true, controller: Controller::Direct },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoInspector => "no_inspector",
            Ablation::NoMpc => "no_mpc",
            Ablation::MlpBaseline => "mlp_baseline",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub train: TrainConfig,
    pub kan: KanConfig,
    pub ablation: Ablation,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Episodes between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Write a JSONL trace of the final episode of each seed.
    pub trace_last_episode: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::default(),
            train: TrainConfig::default(),
            kan: KanConfig::default(),
            ablation: Ablation::Full,
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("runs"),
            checkpoint_every: 0,
            trace_last_episode: false,
        }
    }
}

impl RunConfig {
    /// Runtime-bounded preset for a single core: smaller hidden layers and
    /// one gradient step every second environment step.
    pub fn desk_scale() -> Self {
        let mut cfg = Self::default();
        cfg.kan.hidden = vec![32, 32];
        cfg.train.train_every = 2;
        cfg
    }

    /// Default network with 10 000 training episodes.
    pub fn full_scale() -> Self {
        let mut cfg = Self::default();
        cfg.train.total_episodes = 10_000;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        self.scenario.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.output_dir.join(self.ablation.name()).join(format!("seed_{seed}"))
    }
}

/// Either Q-network, for checkpoints and evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "network", rename_all = "lowercase")]
pub enum QModel {
    Kan(KanNetwork),
    Mlp(Mlp),
}

impl QModel {
    /// Fresh network for `ablation`; the MLP baseline gets two hidden layers
    /// sized to match the spline network's parameter count.
    pub fn build(ablation: Ablation, input: usize, outputs: usize, kan: &KanConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ AGENT_SALT);
        let net = KanNetwork::new(input, outputs, kan, &mut rng)?;
        if ablation != Ablation::MlpBaseline {
            return Ok(QModel::Kan(net));
        }
        let depth = kan.hidden.len().max(1);
        let h = Mlp::matched_width(input, outputs, depth, net.num_params());
        Ok(QModel::Mlp(Mlp::new(input, &vec![h; depth], outputs, &mut rng)?))
    }

    pub fn num_params(&self) -> usize {
        match self {
            QModel::Kan(n) => n.num_params(),
            QModel::Mlp(n) => n.num_params(),
        }
    }

    pub fn input_width(&self) -> usize {
        match self {
            QModel::Kan(n) => n.input_width(),
            QModel::Mlp(n) => n.input_width(),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            QModel::Kan(n) => n.forward(x),
            QModel::Mlp(n) => n.forward(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub ablation: Ablation,
    pub seed: u64,
    pub episode: usize,
    pub scenario: Scenario,
    pub model: QModel,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut c: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", c.version)));
        }
        match &mut c.model {
            QModel::Kan(n) => n.validate()?,
            QModel::Mlp(n) => n.validate()?,
        }
        Ok(c)
    }
}

/// One metrics CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub episode: usize,
    pub steps: usize,
    #[serde(rename = "return")]
    pub ret: f64,
    pub collision: u8,
    pub mean_speed: f64,
    pub epsilon: f64,
    /// Mean training loss over the episode's gradient steps.
    pub loss: Option<f64>,
    pub arrived: u8,
}

pub fn write_metrics(path: &Path, rows: &[EpisodeRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpisodeRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Aggregates over a set of episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub episodes: usize,
    pub collision_rate: f64,
    pub mean_speed: f64,
    pub mean_return: f64,
    pub arrival_rate: f64,
    /// Mean policy steps of the episodes that arrived.
    pub mean_steps_to_arrival: Option<f64>,
}

impl Metrics {
    pub fn from_rows(rows: &[EpisodeRow]) -> Self {
        let n = rows.len().max(1) as f64;
        let arrived: Vec<&EpisodeRow> = rows.iter().filter(|r| r.arrived == 1).collect();
        Metrics {
            episodes: rows.len(),
            collision_rate: rows.iter().map(|r| r.collision as f64).sum::<f64>() / n,
            mean_speed: rows.iter().map(|r| r.mean_speed).sum::<f64>() / n,
            mean_return: rows.iter().map(|r| r.ret).sum::<f64>() / n,
            arrival_rate: arrived.len() as f64 / n,
            mean_steps_to_arrival: (!arrived.is_empty())
                .then(|| arrived.iter().map(|r| r.steps as f64).sum::<f64>() / arrived.len() as f64),
        }
    }

    /// Aggregates over the last `window` rows.
    pub fn final_window(rows: &[EpisodeRow], window: usize) -> Self {
        Self::from_rows(&rows[rows.len().saturating_sub(window)..])
    }
}

/// Result of training one seed.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub rows: Vec<EpisodeRow>,
    pub checkpoint: Checkpoint,
}

fn run_training<Q: QFunction>(cfg: &RunConfig, seed: u64, net: Q, wrap: fn(Q) -> QModel) -> Result<SeedRun> {
    let scenario = Scenario { seed, ..cfg.scenario.clone() };
    let mut env = Env::new(scenario.clone(), cfg.ablation.pipeline())?;
    let mut agent = DqnAgent::new(net, cfg.train.clone(), seed ^ AGENT_SALT)?;
    let total = cfg.train.total_episodes;
    let dir = cfg.seed_dir(seed);
    let mut rows = Vec::with_capacity(total);
    let snapshot = |agent: &DqnAgent<Q>, episode: usize| Checkpoint {
        version: CHECKPOINT_VERSION,
        ablation: cfg.ablation,
        seed,
        episode,
        scenario: scenario.clone(),
        model: wrap(agent.net.clone()),
        optimizer: Some(agent.optimizer.clone()),
    };
    for ep in 0..total {
        let trace = cfg.trace_last_episode && ep + 1 == total;
        if trace {
            env.enable_trace();
        }
        let epsilon = cfg.train.epsilon(ep, total);
        rows.push(train_episode(&mut env, &mut agent, ep, epsilon)?);
        if trace {
            let file = fs::File::create(dir.join("trace.jsonl")).or_else(|_| {
                fs::create_dir_all(&dir)?;
                fs::File::create(dir.join("trace.jsonl"))
            })?;
            Env::write_trace(&env.take_trace(), std::io::BufWriter::new(file))?;
        }
        if cfg.checkpoint_every > 0 && (ep + 1) % cfg.checkpoint_every == 0 && ep + 1 < total {
            snapshot(&agent, ep + 1).save(&dir.join(format!("checkpoint_{:06}.json", ep + 1)))?;
        }
    }
    Ok(SeedRun { seed, rows, checkpoint: snapshot(&agent, total) })
}

fn train_episode<Q: QFunction>(env: &mut Env, agent: &mut DqnAgent<Q>, ep: usize, epsilon: f64) -> Result<EpisodeRow> {
    let mut obs = env.reset_episode(ep as u64)?;
    let (mut ret, mut speed_sum, mut steps) = (0.0, 0.0, 0usize);
    let (mut loss_sum, mut updates) = (0.0, 0usize);
    loop {
        let action = agent.act(&obs, epsilon)?;
        let step = env.step(action)?;
        ret += step.reward;
        speed_sum += step.info.speed;
        steps += 1;
        let t = Transition {
            s: obs,
            a: step.info.executed,
            r: step.reward,
            s_next: step.observation.clone(),
            done: step.info.terminated,
        };
        if let Some(rep) = agent.record(t)? {
            loss_sum += rep.loss;
            updates += 1;
        }
        obs = step.observation;
        if step.done {
            return Ok(EpisodeRow {
                episode: ep,
                steps,
                ret,
                collision: step.info.collision as u8,
                mean_speed: speed_sum / steps as f64,
                epsilon,
                loss: (updates > 0).then(|| loss_sum / updates as f64),
                arrived: step.info.arrived as u8,
            });
        }
    }
}

/// Train one seed without touching the disk.
pub fn train_seed(cfg: &RunConfig, seed: u64) -> Result<SeedRun> {
    let width = cfg.scenario.observation_width();
    match QModel::build(cfg.ablation, width, crate::env::Action::COUNT, &cfg.kan, seed)? {
        QModel::Kan(net) => run_training(cfg, seed, net, QModel::Kan),
        QModel::Mlp(net) => run_training(cfg, seed, net, QModel::Mlp),
    }
}

/// Fully resolved configuration written next to the results.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub parameters: usize,
    pub crate_version: String,
    pub parallel: bool,
}

/// Train every seed (in parallel when enabled), writing metrics, final
/// checkpoints and the manifest under `output_dir/<ablation>/`.
pub fn train(cfg: &RunConfig) -> Result<Vec<SeedRun>> {
    cfg.validate()?;
    let runs: Vec<Result<SeedRun>> = map_each(&cfg.seeds, |&seed| train_seed(cfg, seed));
    let runs: Vec<SeedRun> = runs.into_iter().collect::<Result<_>>()?;
    for run in &runs {
        let dir = cfg.seed_dir(run.seed);
        write_metrics(&dir.join("metrics.csv"), &run.rows)?;
        run.checkpoint.save(&dir.join("checkpoint.json"))?;
    }
    let manifest = Manifest {
        config: cfg.clone(),
        parameters: runs.first().map_or(0, |r| r.checkpoint.model.num_params()),
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        parallel: cfg!(feature = "parallel"),
    };
    let dir = cfg.output_dir.join(cfg.ablation.name());
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(runs)
}

/// Greedy (ε = 0) rollouts of `checkpoint` on `scenario`, one episode per
/// index in `0..episodes`.
pub fn evaluate(checkpoint: &Checkpoint, scenario: &Scenario, episodes: usize) -> Result<(Vec<EpisodeRow>, Metrics)> {
    if checkpoint.model.input_width() != scenario.observation_width() {
        return Err(Error::WidthMismatch { expected: checkpoint.model.input_width(), got: scenario.observation_width() });
    }
    let pipeline = checkpoint.ablation.pipeline();
    let idx: Vec<usize> = (0..episodes).collect();
    let rows: Vec<Result<EpisodeRow>> = map_each(&idx, |&ep| {
        let mut env = Env::new(scenario.clone(), pipeline)?;
        eval_episode(&mut env, &checkpoint.model, ep)
    });
    let rows: Vec<EpisodeRow> = rows.into_iter().collect::<Result<_>>()?;
    let m = Metrics::from_rows(&rows);
    Ok((rows, m))
}

fn eval_episode(env: &mut Env, model: &QModel, ep: usize) -> Result<EpisodeRow> {
    let mut obs = env.reset_episode(ep as u64)?;
    let (mut ret, mut speed_sum, mut steps) = (0.0, 0.0, 0usize);
    loop {
        let action = match model {
            QModel::Kan(n) => greedy_action(n, &obs)?,
            QModel::Mlp(n) => greedy_action(n, &obs)?,
        };
        let step = env.step(action)?;
        ret += step.reward;
        speed_sum += step.info.speed;
        steps += 1;
        obs = step.observation;
        if step.done {
            return Ok(EpisodeRow {
                episode: ep,
                steps,
                ret,
                collision: step.info.collision as u8,
                mean_speed: speed_sum / steps as f64,
                epsilon: 0.0,
                loss: None,
                arrived: step.info.arrived as u8,
            });
        }
    }
}
