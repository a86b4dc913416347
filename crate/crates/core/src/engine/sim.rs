use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{accuracy, aggregate, local_train_probed, sample_clients, BatchEvent, LocalUpdate, RunConfig};
use crate::data::{ClientDataset, DataSource, Dataset, Federation};
use crate::diagnostics::{self, DissimilarityBound, DriftReport};
use crate::error::{Error, Result};
use crate::nn::ModelParams;
use crate::regularizers::{RegularizerSpec, TeacherCache};
use crate::rng::{self, Rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// The broadcast model `w^t`.
    Global,
    /// Element-wise mean of every client's latest local model.
    AllClientAvg,
}

/// Everything the server holds between rounds.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub global: ModelParams,
    /// Latest local model of every client; the initial model until a client
    /// is first sampled.
    pub client_params: Vec<ModelParams>,
    pub round: usize,
    sampling_rng: Rng,
}

impl ServerState {
    pub fn new(initial: ModelParams, num_clients: usize, seed: u64) -> Self {
        ServerState {
            client_params: vec![initial.clone(); num_clients],
            global: initial,
            round: 0,
            sampling_rng: rng::stream(seed, Stream::Sampling, 0, 0),
        }
    }

    pub fn model(&self, mode: EvalMode) -> Result<ModelParams> {
        match mode {
            EvalMode::Global => Ok(self.global.clone()),
            EvalMode::AllClientAvg => aggregate(&self.client_params),
        }
    }

    pub fn evaluate(&self, test: &Dataset, mode: EvalMode) -> Result<f64> {
        match mode {
            EvalMode::Global => accuracy(&self.global, test),
            EvalMode::AllClientAvg => accuracy(&aggregate(&self.client_params)?, test),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    /// 1-based index of the completed round.
    pub round: usize,
    pub test_acc_global: f64,
    pub test_acc_allavg: f64,
    pub ce_loss: f64,
    pub asd_loss: f64,
    pub drift: Option<DriftReport>,
    pub lr: f64,
    pub sampled: Vec<usize>,
    #[serde(skip)]
    pub wall_time: Duration,
}

type BatchProbe = Arc<dyn Fn(&BatchEvent) + Send + Sync>;

/// A federated run over fixed client datasets.
pub struct Simulation {
    cfg: RunConfig,
    clients: Vec<ClientDataset>,
    test: Dataset,
    state: ServerState,
    bound: DissimilarityBound,
    probe: Option<BatchProbe>,
}

impl Simulation {
    /// Initializes the global model from the run seed.
    pub fn new(cfg: RunConfig, clients: Vec<ClientDataset>, test: Dataset) -> Result<Self> {
        cfg.validate()?;
        if clients.len() != cfg.num_clients() {
            return Err(Error::Param(format!(
                "config declares {} clients, {} datasets given",
                cfg.num_clients(),
                clients.len()
            )));
        }
        if test.is_empty() {
            return Err(Error::Param("empty test set".into()));
        }
        let sizes = cfg.layer_sizes(test.dim(), test.num_classes);
        let initial = ModelParams::init(&sizes, &mut rng::stream(cfg.seed, Stream::ModelInit, 0, 0))?;
        Self::with_initial(cfg, clients, test, initial)
    }

    pub fn with_initial(
        cfg: RunConfig,
        clients: Vec<ClientDataset>,
        test: Dataset,
        initial: ModelParams,
    ) -> Result<Self> {
        cfg.validate()?;
        let state = ServerState::new(initial, clients.len(), cfg.seed);
        Ok(Simulation {
            cfg,
            clients,
            test,
            state,
            bound: DissimilarityBound::default(),
            probe: None,
        })
    }

    pub fn from_federation(cfg: RunConfig, fed: Federation) -> Result<Self> {
        Self::new(cfg, fed.clients, fed.test)
    }

    /// Observes every optimizer step of every client.
    pub fn set_batch_probe(&mut self, probe: impl Fn(&BatchEvent) + Send + Sync + 'static) {
        self.probe = Some(Arc::new(probe));
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn state(&self) -> &ServerState {
        &self.state
    }

    pub fn clients(&self) -> &[ClientDataset] {
        &self.clients
    }

    pub fn test(&self) -> &Dataset {
        &self.test
    }

    /// Running supremum of the measured dissimilarity.
    pub fn dissimilarity_bound(&self) -> &DissimilarityBound {
        &self.bound
    }

    fn teacher(
        &self,
        spec: &RegularizerSpec,
        client: &ClientDataset,
        global: &ModelParams,
        round: usize,
    ) -> Result<Option<TeacherCache>> {
        if spec.distills() {
            TeacherCache::build(global, client, spec.tau, round).map(Some)
        } else {
            Ok(None)
        }
    }

    /// Gradient dissimilarity over all clients at `params` under the run's
    /// regularizer, with `teacher` as the distillation target.
    pub fn measure_dissimilarity(
        &self,
        params: &ModelParams,
        teacher: &ModelParams,
        round: usize,
    ) -> Result<DriftReport> {
        self.measure_dissimilarity_with(&self.cfg.regularizer, params, teacher, round)
    }

    /// As [`Simulation::measure_dissimilarity`], for any regularizer.
    pub fn measure_dissimilarity_with(
        &self,
        spec: &RegularizerSpec,
        params: &ModelParams,
        teacher: &ModelParams,
        round: usize,
    ) -> Result<DriftReport> {
        spec.validate()?;
        let grads = self
            .clients
            .par_iter()
            .map(|c| {
                let cache = self.teacher(spec, c, teacher, round)?;
                diagnostics::client_objective_gradient(
                    c,
                    params,
                    teacher,
                    cache.as_ref(),
                    spec,
                    round,
                    self.cfg.batch_size,
                )
                .map(|(_, g)| g)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut report = diagnostics::gradient_dissimilarity(&grads, spec.lambda)?;
        report.round = round;
        Ok(report)
    }

    /// One round: sample → broadcast → local training → aggregate →
    /// evaluate.
    pub fn step(&mut self) -> Result<RoundMetrics> {
        let started = Instant::now();
        let round = self.state.round;
        let lr = self.cfg.lr_at(round);
        let sampled = sample_clients(
            self.cfg.num_clients(),
            self.cfg.participation_rate,
            self.cfg.sampling,
            &mut self.state.sampling_rng,
        )?;

        let global = &self.state.global;
        let noop = |_: &BatchEvent| {};
        let probe: &(dyn Fn(&BatchEvent) + Sync) = match &self.probe {
            Some(p) => p.as_ref(),
            None => &noop,
        };
        let updates: Vec<LocalUpdate> = sampled
            .par_iter()
            .map(|&k| {
                let client = &self.clients[k];
                let cache = self.teacher(&self.cfg.regularizer, client, global, round)?;
                local_train_probed(client, global, cache.as_ref(), &self.cfg, round, lr, probe)
            })
            .collect::<Result<_>>()?;

        let models: Vec<ModelParams> = updates.iter().map(|u| u.params.clone()).collect();
        let next = aggregate(&models)?;
        let count = updates.len() as f64;
        let ce_loss = updates.iter().map(|u| u.ce_loss).sum::<f64>() / count;
        let asd_loss = updates.iter().map(|u| u.asd_loss).sum::<f64>() / count;

        let completed = round + 1;
        let drift = if self.cfg.gd_every > 0 && completed.is_multiple_of(self.cfg.gd_every) {
            let report = self.measure_dissimilarity(&next, global, round)?;
            self.bound.observe(&report);
            Some(report)
        } else {
            None
        };

        for u in updates {
            self.state.client_params[u.client_id] = u.params;
        }
        self.state.global = next;
        self.state.round = completed;

        Ok(RoundMetrics {
            round: completed,
            test_acc_global: self.state.evaluate(&self.test, EvalMode::Global)?,
            test_acc_allavg: self.state.evaluate(&self.test, EvalMode::AllClientAvg)?,
            ce_loss,
            asd_loss,
            drift,
            lr,
            sampled,
            wall_time: started.elapsed(),
        })
    }

    /// Runs the remaining rounds, handing each round's metrics to
    /// `on_round` as soon as it completes.
    pub fn run_with(&mut self, mut on_round: impl FnMut(&RoundMetrics) -> Result<()>) -> Result<Vec<RoundMetrics>> {
        let mut all = Vec::with_capacity(self.cfg.rounds.saturating_sub(self.state.round));
        while self.state.round < self.cfg.rounds {
            let m = self.step()?;
            on_round(&m)?;
            all.push(m);
        }
        Ok(all)
    }

    pub fn run(&mut self) -> Result<Vec<RoundMetrics>> {
        self.run_with(|_| Ok(()))
    }
}

/// Builds the federation described by `source` and runs `cfg` to the end.
pub fn run(cfg: &RunConfig, source: &DataSource) -> Result<(Vec<RoundMetrics>, ServerState)> {
    let fed = Federation::build(source, &cfg.partition, cfg.seed)?;
    let mut sim = Simulation::from_federation(cfg.clone(), fed)?;
    let metrics = sim.run()?;
    Ok((metrics, sim.state))
}
