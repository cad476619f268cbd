//! Round orchestration: client DP-SGD phases, optional gradient correction,
//! aggregation and the server update, plus the baseline strategies.
//!
//! A round broadcasts the global parameters to the participating clients,
//! collects one noisy gradient per client (the mean of its local step
//! gradients), corrects conflicting gradients when the algorithm is GCFL,
//! aggregates in ascending client-id order and applies the server step.
//! Client phases may run on a thread pool; every random draw comes from a
//! stream keyed on `(global_seed, round, client, step)` and every reduction
//! runs in a fixed order, so parallel and sequential runs agree bit for bit.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correction::{correct_round, ClientId, CorrectionConfig, CorrectionReport};
use crate::data::{ClientShard, Dataset};
use crate::dp::{
    self, clip_gradient, noisy_batch_gradient, poisson_sample, DpConfig, PrivacyLedger,
};
use crate::error::{Error, Result};
use crate::linalg::{dot, ParamVector};
use crate::metrics::{ConfusionMatrix, Scores};
use crate::model::{self, init_params, loss_and_gradient, MlpSpec};
use crate::rng::{self, Purpose};

/// Guard in the FedExP step-size denominator.
pub const FEDEXP_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Gcfl,
    DpFedavg,
    DpFedprox,
    DpScaffold,
    DpFedexp,
    Isolated,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::Gcfl,
        Algorithm::DpFedavg,
        Algorithm::DpFedprox,
        Algorithm::DpScaffold,
        Algorithm::DpFedexp,
        Algorithm::Isolated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Gcfl => "gcfl",
            Algorithm::DpFedavg => "dp_fedavg",
            Algorithm::DpFedprox => "dp_fedprox",
            Algorithm::DpScaffold => "dp_scaffold",
            Algorithm::DpFedexp => "dp_fedexp",
            Algorithm::Isolated => "isolated",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s.trim())
            .ok_or_else(|| {
                Error::validation(
                    "algorithm",
                    format!(
                        "one of {} (got `{s}`)",
                        Algorithm::ALL.map(Algorithm::name).join(", ")
                    ),
                )
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Uniform,
    BySamples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub n_clients: usize,
    pub clients_per_round: usize,
    pub local_steps: usize,
    pub rounds: usize,
    pub learning_rate: f64,
    pub algorithm: Algorithm,
    pub weighting: Weighting,
    pub prox_mu: f64,
    pub global_seed: u64,
    /// Stop before a round that would push epsilon past this budget.
    pub target_epsilon: Option<f64>,
    pub eval_batch_size: usize,
    pub parallel: bool,
    /// When false, `wall_millis` is reported as 0 so outputs stay reproducible.
    pub record_wall_time: bool,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            n_clients: 2,
            clients_per_round: 2,
            local_steps: 1,
            rounds: 30,
            learning_rate: 0.002,
            algorithm: Algorithm::Gcfl,
            weighting: Weighting::Uniform,
            prox_mu: 0.01,
            global_seed: 0,
            target_epsilon: None,
            eval_batch_size: 1024,
            parallel: true,
            record_wall_time: false,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::validation("n_clients", "≥ 1"));
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.n_clients {
            return Err(Error::validation("clients_per_round", "in 1..=n_clients"));
        }
        if self.local_steps == 0 {
            return Err(Error::validation("local_steps", "≥ 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning_rate", "> 0"));
        }
        if !(self.prox_mu >= 0.0 && self.prox_mu.is_finite()) {
            return Err(Error::validation("prox_mu", "≥ 0"));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::validation("eval_batch_size", "≥ 1"));
        }
        Ok(())
    }
}

/// How each client's sampling rate is derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ClientSampling {
    /// `s_i = min(1, batch / |D_i|)`, so fixed-size batches have exactly `batch` records.
    BatchSize(usize),
    /// The same rate for every client.
    Rate(f64),
}

impl ClientSampling {
    pub fn rate_for(self, shard_size: usize) -> f64 {
        match self {
            ClientSampling::BatchSize(b) => (b as f64 / shard_size.max(1) as f64).min(1.0),
            ClientSampling::Rate(s) => s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaffoldState {
    pub server_variate: ParamVector,
    pub client_variates: BTreeMap<ClientId, ParamVector>,
}

impl ScaffoldState {
    pub fn new(dim: usize, clients: impl IntoIterator<Item = ClientId>) -> Self {
        ScaffoldState {
            server_variate: ParamVector::zeros(dim),
            client_variates: clients
                .into_iter()
                .map(|c| (c, ParamVector::zeros(dim)))
                .collect(),
        }
    }

    fn refresh_server_variate(&mut self) -> Result<()> {
        let n = self.client_variates.len() as f64;
        let mut mean = ParamVector::zeros(self.server_variate.len());
        for c in self.client_variates.values() {
            mean.add_scaled(1.0, c)?;
        }
        mean.scale(1.0 / n);
        self.server_variate = mean;
        Ok(())
    }
}

/// Everything a client needs for one local phase.
#[derive(Debug, Clone)]
pub struct ClientContext<'a> {
    pub spec: &'a MlpSpec,
    pub dp: DpConfig,
    pub local_steps: usize,
    pub learning_rate: f64,
    pub algorithm: Algorithm,
    pub prox_mu: f64,
    pub global_seed: u64,
    pub round: u64,
    /// `(server_variate, client_variate)` for Scaffold.
    pub scaffold: Option<(&'a ParamVector, &'a ParamVector)>,
    pub parallel: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub client_id: ClientId,
    /// Mean of the noisy step gradients; `None` when every step was skipped.
    pub gradient: Option<ParamVector>,
    pub final_params: ParamVector,
    pub steps_taken: usize,
    pub skipped_steps: usize,
    pub loss_sum: f64,
    pub loss_count: usize,
}

/// Runs `K` DP-SGD steps starting from `start` and returns the mean noisy
/// gradient. `anchor` is the broadcast global model (the FedProx anchor).
pub fn client_local_phase(
    shard: &ClientShard,
    start: &ParamVector,
    anchor: &ParamVector,
    ctx: &ClientContext<'_>,
) -> Result<LocalUpdate> {
    if shard.is_empty() {
        return Err(Error::EmptyBatch("client shard is empty"));
    }
    let client = shard.client_id as u64;
    let mut w_local = start.clone();
    let mut step_grads = Vec::with_capacity(ctx.local_steps);
    let (mut loss_sum, mut loss_count, mut skipped) = (0.0, 0usize, 0usize);

    for k in 0..ctx.local_steps as u64 {
        let mut batch_rng = rng::stream(ctx.global_seed, Purpose::Batch, &[ctx.round, client, k]);
        let batch = poisson_sample(
            shard.len(),
            ctx.dp.sampling_rate,
            ctx.dp.sampling_mode,
            &mut batch_rng,
        );
        if batch.is_empty() {
            skipped += 1;
            continue;
        }

        let per_sample = |&j: &usize| -> Result<(f64, ParamVector)> {
            let (l, mut g) = loss_and_gradient(ctx.spec, &w_local, &shard.examples[j])?;
            if ctx.algorithm == Algorithm::DpFedprox && ctx.prox_mu != 0.0 {
                for ((gv, wl), wg) in g
                    .as_mut_slice()
                    .iter_mut()
                    .zip(w_local.iter())
                    .zip(anchor.iter())
                {
                    *gv += ctx.prox_mu * (wl - wg);
                }
            }
            Ok((l, clip_gradient(&g, ctx.dp.clip_threshold)))
        };
        let results: Vec<(f64, ParamVector)> = if ctx.parallel {
            batch.par_iter().map(per_sample).collect::<Result<_>>()?
        } else {
            batch.iter().map(per_sample).collect::<Result<_>>()?
        };
        let mut clipped = Vec::with_capacity(results.len());
        for (l, g) in results {
            loss_sum += l;
            loss_count += 1;
            clipped.push(g);
        }

        let mut noise_rng = rng::stream(ctx.global_seed, Purpose::Noise, &[ctx.round, client, k]);
        let mut g_hat = noisy_batch_gradient(
            &clipped,
            ctx.dp.clip_threshold,
            ctx.dp.noise_multiplier,
            &mut noise_rng,
        )?;
        if let Some((server_c, client_c)) = ctx.scaffold {
            for ((g, c), ci) in g_hat
                .as_mut_slice()
                .iter_mut()
                .zip(server_c.iter())
                .zip(client_c.iter())
            {
                *g += c - ci;
            }
        }
        w_local.add_scaled(-ctx.learning_rate, &g_hat)?;
        step_grads.push(g_hat);
    }

    let gradient = match step_grads.len() {
        0 => None,
        1 => step_grads.pop(),
        n => {
            let mut mean = ParamVector::zeros(start.len());
            for g in &step_grads {
                mean.add_scaled(1.0, g)?;
            }
            mean.scale(1.0 / n as f64);
            Some(mean)
        }
    };
    if !w_local.is_finite() || gradient.as_ref().is_some_and(|g| !g.is_finite()) {
        return Err(Error::NonFinite("client_local_phase"));
    }
    Ok(LocalUpdate {
        client_id: shard.client_id,
        gradient,
        final_params: w_local,
        steps_taken: ctx.local_steps - skipped,
        skipped_steps: skipped,
        loss_sum,
        loss_count,
    })
}

/// Aggregation weights over the given clients.
pub fn aggregation_weights(
    weighting: Weighting,
    sizes: &BTreeMap<ClientId, usize>,
) -> BTreeMap<ClientId, f64> {
    match weighting {
        Weighting::Uniform => {
            let p = 1.0 / sizes.len() as f64;
            sizes.keys().map(|&c| (c, p)).collect()
        }
        Weighting::BySamples => {
            let total: usize = sizes.values().sum();
            sizes
                .iter()
                .map(|(&c, &n)| (c, n as f64 / total as f64))
                .collect()
        }
    }
}

/// Weighted sum `sum_i p_i g_i` in ascending client-id order.
pub fn aggregate(
    gradients: &BTreeMap<ClientId, ParamVector>,
    weights: &BTreeMap<ClientId, f64>,
) -> Result<ParamVector> {
    let sum: f64 = weights.values().sum();
    if weights.values().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidWeights { sum });
    }
    let dim = gradients
        .values()
        .next()
        .ok_or(Error::EmptyBatch("aggregate needs at least one gradient"))?
        .len();
    let mut out = ParamVector::zeros(dim);
    for (id, g) in gradients {
        let p = *weights
            .get(id)
            .ok_or_else(|| Error::validation("weights", format!("an entry for client {id}")))?;
        out.add_scaled(p, g)?;
    }
    Ok(out)
}

/// FedExP server step size `eta * max(1, sum ||d_i||^2 / (2 N ||mean d||^2 + eps))`.
pub fn fedexp_step_size(eta: f64, pseudo_gradients: &[&ParamVector]) -> Result<f64> {
    let n = pseudo_gradients.len();
    if n == 0 {
        return Ok(eta);
    }
    let mut mean = ParamVector::zeros(pseudo_gradients[0].len());
    let mut sq_sum = 0.0;
    for d in pseudo_gradients {
        mean.add_scaled(1.0, d)?;
        sq_sum += dot(d, d)?;
    }
    mean.scale(1.0 / n as f64);
    let mean_sq = dot(&mean, &mean)?;
    Ok(eta * (sq_sum / (2.0 * n as f64 * mean_sq + FEDEXP_EPSILON)).max(1.0))
}

/// `w - eta_g * agg`, where `eta_g = eta` except for FedExP.
pub fn server_step(
    w: &ParamVector,
    agg: &ParamVector,
    eta: f64,
    algorithm: Algorithm,
    pseudo_gradients: &[&ParamVector],
) -> Result<ParamVector> {
    let step = match algorithm {
        Algorithm::DpFedexp => fedexp_step_size(eta, pseudo_gradients)?,
        _ => eta,
    };
    let mut out = w.clone();
    out.add_scaled(-step, agg)?;
    if !out.is_finite() {
        return Err(Error::NonFinite("server_step"));
    }
    Ok(out)
}

/// Confusion matrix of `w` on `test`, evaluated in chunks of `batch`.
pub fn evaluate(
    spec: &MlpSpec,
    w: &ParamVector,
    test: &Dataset,
    batch: usize,
    parallel: bool,
) -> Result<ConfusionMatrix> {
    let chunk = |examples: &[model::Example]| -> Result<ConfusionMatrix> {
        let mut cm = ConfusionMatrix::new(test.num_classes);
        for ex in examples {
            cm.record(ex.label, model::predict(spec, w, &ex.features)?)?;
        }
        Ok(cm)
    };
    let parts: Vec<ConfusionMatrix> = if parallel {
        test.examples
            .par_chunks(batch)
            .map(chunk)
            .collect::<Result<_>>()?
    } else {
        test.examples
            .chunks(batch)
            .map(chunk)
            .collect::<Result<_>>()?
    };
    let mut cm = ConfusionMatrix::new(test.num_classes);
    for p in &parts {
        cm.merge(p)?;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CosineSummary {
    pub tests: usize,
    pub projections: usize,
    pub min: Option<f64>,
    pub mean: Option<f64>,
}

impl CosineSummary {
    fn from_report(r: &CorrectionReport) -> Self {
        CosineSummary {
            tests: r.dot_products_executed,
            projections: r.projections_applied,
            min: r.min_cosine(),
            mean: r.mean_cosine(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub epsilon_spent: f64,
    pub best_alpha: f64,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub test_macro_recall: f64,
    pub test_macro_f1: f64,
    pub projections_applied: usize,
    pub wall_millis: u64,
    pub participants: Vec<ClientId>,
    pub steps_taken: u64,
    pub skipped_steps: usize,
    pub correction: Option<CosineSummary>,
}

/// Immutable inputs of a simulation.
#[derive(Debug, Clone)]
pub struct Setup {
    pub spec: MlpSpec,
    pub shards: Vec<ClientShard>,
    pub test: Dataset,
    pub sampling: ClientSampling,
}

/// Mutable state carried from round to round.
#[derive(Debug, Clone, PartialEq)]
pub struct FederationState {
    pub round: usize,
    pub global: ParamVector,
    /// Per-client models, only used by the isolated baseline.
    pub client_models: BTreeMap<ClientId, ParamVector>,
    pub scaffold: Option<ScaffoldState>,
    pub ledger: PrivacyLedger,
}

pub struct RoundOutcome {
    pub metrics: RoundMetrics,
    pub report: Option<CorrectionReport>,
}

pub struct Simulation<'a> {
    setup: &'a Setup,
    fed: FederationConfig,
    dp: DpConfig,
    correction: CorrectionConfig,
    state: FederationState,
}

impl<'a> Simulation<'a> {
    pub fn new(
        setup: &'a Setup,
        fed: FederationConfig,
        dp: DpConfig,
        correction: CorrectionConfig,
    ) -> Result<Self> {
        fed.validate()?;
        dp.validate()?;
        if setup.shards.len() != fed.n_clients {
            return Err(Error::validation(
                "n_clients",
                format!("equal to the number of shards ({})", setup.shards.len()),
            ));
        }
        if let Some(s) = setup.shards.iter().find(|s| s.is_empty()) {
            return Err(Error::InvalidPartition(format!(
                "client {} has no data",
                s.client_id
            )));
        }
        if fed.algorithm == Algorithm::Gcfl && fed.clients_per_round >= 2 {
            let m = correction.references_for(fed.clients_per_round);
            if correction.mode == crate::correction::CorrectionMode::Reference
                && (m == 0 || m >= fed.clients_per_round)
            {
                return Err(Error::validation(
                    "num_references",
                    "in 1..clients_per_round",
                ));
            }
        }
        let global = init_params(&setup.spec, fed.global_seed);
        let ids: Vec<ClientId> = setup.shards.iter().map(|s| s.client_id).collect();
        let client_models = if fed.algorithm == Algorithm::Isolated {
            ids.iter().map(|&c| (c, global.clone())).collect()
        } else {
            BTreeMap::new()
        };
        let scaffold = (fed.algorithm == Algorithm::DpScaffold)
            .then(|| ScaffoldState::new(global.len(), ids.iter().copied()));
        let state = FederationState {
            round: 0,
            global,
            client_models,
            scaffold,
            ledger: PrivacyLedger::new(dp),
        };
        Ok(Simulation {
            setup,
            fed,
            dp,
            correction,
            state,
        })
    }

    pub fn state(&self) -> &FederationState {
        &self.state
    }

    pub fn config(&self) -> &FederationConfig {
        &self.fed
    }

    fn participants(&self, round: u64) -> Vec<usize> {
        let n = self.setup.shards.len();
        if self.fed.clients_per_round >= n {
            return (0..n).collect();
        }
        let mut rng = rng::stream(self.fed.global_seed, Purpose::ClientSample, &[round]);
        let mut picked = index::sample(&mut rng, n, self.fed.clients_per_round).into_vec();
        picked.sort_unstable();
        picked
    }

    /// Scores of the current model(s) on the test set. For the isolated
    /// baseline this is the mean over client models.
    pub fn evaluate_current(&self) -> Result<Scores> {
        let eval = |w: &ParamVector| -> Result<Scores> {
            let cm = evaluate(
                &self.setup.spec,
                w,
                &self.setup.test,
                self.fed.eval_batch_size,
                self.fed.parallel,
            )?;
            Scores::from_matrix(&cm)
        };
        if self.fed.algorithm == Algorithm::Isolated {
            let all: Vec<Scores> = self
                .state
                .client_models
                .values()
                .map(eval)
                .collect::<Result<_>>()?;
            Ok(Scores::mean(&all))
        } else {
            eval(&self.state.global)
        }
    }

    pub fn epsilon(&self) -> Result<(f64, f64)> {
        if self.dp.noise_multiplier == 0.0 {
            return Ok((f64::INFINITY, f64::NAN));
        }
        self.state.ledger.epsilon_spent()
    }

    /// Executes the next round.
    pub fn run_round(&mut self) -> Result<RoundOutcome> {
        let started = Instant::now();
        let round = self.state.round as u64 + 1;
        let participants = self.participants(round);
        let setup = self.setup;
        let fed = &self.fed;
        let state = &self.state;

        let run_client = |&i: &usize| -> Result<LocalUpdate> {
            let shard = &setup.shards[i];
            let id = shard.client_id;
            let start = state.client_models.get(&id).unwrap_or(&state.global);
            let dp = DpConfig {
                sampling_rate: setup.sampling.rate_for(shard.len()),
                ..self.dp
            };
            let ctx = ClientContext {
                spec: &setup.spec,
                dp,
                local_steps: fed.local_steps,
                learning_rate: fed.learning_rate,
                algorithm: fed.algorithm,
                prox_mu: fed.prox_mu,
                global_seed: fed.global_seed,
                round,
                scaffold: state
                    .scaffold
                    .as_ref()
                    .map(|s| (&s.server_variate, &s.client_variates[&id])),
                parallel: fed.parallel,
            };
            client_local_phase(shard, start, start, &ctx)
        };
        let updates: Vec<LocalUpdate> = if fed.parallel {
            participants
                .par_iter()
                .map(run_client)
                .collect::<Result<_>>()?
        } else {
            participants.iter().map(run_client).collect::<Result<_>>()?
        };

        let gradients: BTreeMap<ClientId, ParamVector> = updates
            .iter()
            .filter_map(|u| u.gradient.clone().map(|g| (u.client_id, g)))
            .collect();
        let steps_taken = updates
            .iter()
            .map(|u| u.steps_taken as u64)
            .max()
            .unwrap_or(0);
        let skipped_steps = updates.iter().map(|u| u.skipped_steps).sum();
        let (loss_sum, loss_count) = updates.iter().fold((0.0, 0usize), |(s, n), u| {
            (s + u.loss_sum, n + u.loss_count)
        });

        let mut report = None;
        if !gradients.is_empty() {
            match fed.algorithm {
                Algorithm::Isolated => {
                    for (id, g) in &gradients {
                        let w = self.state.client_models.get_mut(id).unwrap();
                        *w = server_step(w, g, fed.learning_rate, Algorithm::Isolated, &[])?;
                    }
                }
                algorithm => {
                    let corrected = if algorithm == Algorithm::Gcfl && gradients.len() >= 2 {
                        let cfg = CorrectionConfig {
                            order_seed: rng::mix(self.correction.order_seed, &[fed.global_seed]),
                            ..self.correction
                        };
                        let (out, r) = correct_round(&gradients, &cfg, round)?;
                        report = Some(r);
                        out
                    } else {
                        gradients.clone()
                    };
                    let sizes: BTreeMap<ClientId, usize> = corrected
                        .keys()
                        .map(|&id| (id, setup.shards[id].len()))
                        .collect();
                    let weights = aggregation_weights(fed.weighting, &sizes);
                    let agg = aggregate(&corrected, &weights)?;
                    let pseudo: Vec<&ParamVector> = corrected.values().collect();
                    let new_global = server_step(
                        &self.state.global,
                        &agg,
                        fed.learning_rate,
                        algorithm,
                        &pseudo,
                    )?;

                    if let Some(sc) = self.state.scaffold.as_mut() {
                        for u in updates.iter().filter(|u| u.steps_taken > 0) {
                            // c_i <- c_i - c + (w_global - w_local) / (K eta)
                            let scale = 1.0 / (u.steps_taken as f64 * fed.learning_rate);
                            let mut next = sc.client_variates[&u.client_id].clone();
                            next.add_scaled(-1.0, &sc.server_variate)?;
                            next.add_scaled(scale, &self.state.global)?;
                            next.add_scaled(-scale, &u.final_params)?;
                            sc.client_variates.insert(u.client_id, next);
                        }
                        sc.refresh_server_variate()?;
                    }
                    self.state.global = new_global;
                }
            }
        }

        self.state.ledger.record_steps(steps_taken);
        self.state.round += 1;
        let (epsilon_spent, best_alpha) = self.epsilon()?;
        let scores = self.evaluate_current()?;
        let wall_millis = if fed.record_wall_time {
            started.elapsed().as_millis() as u64
        } else {
            0
        };
        let metrics = RoundMetrics {
            round: self.state.round,
            epsilon_spent,
            best_alpha,
            train_loss: if loss_count > 0 {
                loss_sum / loss_count as f64
            } else {
                f64::NAN
            },
            test_accuracy: scores.accuracy,
            test_macro_recall: scores.macro_recall,
            test_macro_f1: scores.macro_f1,
            projections_applied: report.as_ref().map_or(0, |r| r.projections_applied),
            wall_millis,
            participants,
            steps_taken,
            skipped_steps,
            correction: report.as_ref().map(CosineSummary::from_report),
        };
        Ok(RoundOutcome { metrics, report })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub initial: Scores,
    pub rounds: Vec<RoundMetrics>,
    pub final_scores: Scores,
    pub final_epsilon: f64,
    pub final_params_sha256: String,
    pub stopped_by_budget: bool,
    pub correction_totals: CosineSummary,
}

/// Runs up to `fed.rounds` rounds, stopping early when a configured privacy
/// budget would be exceeded by the next round.
pub fn run_experiment(
    setup: &Setup,
    fed: &FederationConfig,
    dp: &DpConfig,
    correction: &CorrectionConfig,
) -> Result<ExperimentResult> {
    let mut sim = Simulation::new(setup, fed.clone(), *dp, *correction)?;
    let initial = sim.evaluate_current()?;
    let max_steps = match fed.target_epsilon {
        Some(target) if dp.noise_multiplier > 0.0 => Some(dp::steps_for_budget(dp, target)?),
        _ => None,
    };

    let mut rounds = Vec::with_capacity(fed.rounds);
    let mut stopped_by_budget = false;
    let mut totals = CosineSummary::default();
    let (mut cos_sum, mut cos_n) = (0.0, 0usize);
    for _ in 0..fed.rounds {
        if let Some(max) = max_steps {
            if sim.state().ledger.steps_taken() + fed.local_steps as u64 > max {
                stopped_by_budget = true;
                break;
            }
        }
        let outcome = sim.run_round()?;
        if let Some(r) = &outcome.report {
            totals.tests += r.dot_products_executed;
            totals.projections += r.projections_applied;
            for c in &r.cosines {
                cos_sum += c.cosine;
                cos_n += 1;
                totals.min = Some(totals.min.map_or(c.cosine, |m: f64| m.min(c.cosine)));
            }
        }
        rounds.push(outcome.metrics);
    }
    totals.mean = (cos_n > 0).then(|| cos_sum / cos_n as f64);

    let final_scores = rounds.last().map_or(initial, |m| Scores {
        accuracy: m.test_accuracy,
        macro_recall: m.test_macro_recall,
        macro_f1: m.test_macro_f1,
    });
    let final_epsilon = rounds.last().map_or(0.0, |m| m.epsilon_spent);
    Ok(ExperimentResult {
        algorithm: fed.algorithm,
        seed: fed.global_seed,
        initial,
        rounds,
        final_scores,
        final_epsilon,
        final_params_sha256: params_hash(&sim.state().global),
        stopped_by_budget,
        correction_totals: totals,
    })
}

pub fn params_hash(w: &ParamVector) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for v in w.iter() {
        h.update(v.to_bits().to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correction::CorrectionMode;
    use crate::data::{partition_iid, synthetic_blobs};

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from(v.to_vec())
    }

    #[test]
    fn aggregate_examples() {
        let g: BTreeMap<_, _> = [(0, pv(&[1.0, 0.0])), (1, pv(&[0.0, 1.0]))].into();
        let w: BTreeMap<_, _> = [(0, 0.5), (1, 0.5)].into();
        assert_eq!(aggregate(&g, &w).unwrap(), pv(&[0.5, 0.5]));

        let single: BTreeMap<_, _> = [(3, pv(&[2.0, -1.0]))].into();
        assert_eq!(
            aggregate(&single, &[(3, 1.0)].into()).unwrap(),
            pv(&[2.0, -1.0])
        );

        let bad: BTreeMap<_, _> = [(0, 0.7), (1, 0.5)].into();
        assert!(matches!(
            aggregate(&g, &bad),
            Err(Error::InvalidWeights { .. })
        ));
        let neg: BTreeMap<_, _> = [(0, 1.5), (1, -0.5)].into();
        assert!(aggregate(&g, &neg).is_err());
    }

    #[test]
    fn sample_weighting() {
        let sizes: BTreeMap<_, _> = [(0, 30), (1, 10)].into();
        let w = aggregation_weights(Weighting::BySamples, &sizes);
        assert_eq!((w[&0], w[&1]), (0.75, 0.25));
        let w = aggregation_weights(Weighting::Uniform, &sizes);
        assert_eq!((w[&0], w[&1]), (0.5, 0.5));
    }

    #[test]
    fn server_step_examples() {
        let w = pv(&[1.0, 2.0]);
        assert_eq!(
            server_step(&w, &pv(&[0.0, 0.0]), 0.1, Algorithm::Gcfl, &[]).unwrap(),
            w
        );

        let d = pv(&[0.3, -0.4]);
        assert_eq!(fedexp_step_size(0.1, &[&d, &d]).unwrap(), 0.1);

        let up = pv(&[1.0, 1.0]);
        let down = pv(&[-1.0, -1.0]);
        let eta_g = fedexp_step_size(0.1, &[&up, &down]).unwrap();
        // sum ||d||^2 = 4, mean = 0 -> 0.1 * 4 / 1e-3
        assert!(eta_g.is_finite());
        assert!((eta_g - 0.1 * 4.0 / FEDEXP_EPSILON).abs() < 1e-9);
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
        }
        assert!("fedsgd".parse::<Algorithm>().is_err());
    }

    fn small_setup(n_clients: usize) -> Setup {
        let ds = synthetic_blobs(3, 20, 5, 0.2, 1).unwrap();
        let test = synthetic_blobs(3, 10, 5, 0.2, 1).unwrap();
        Setup {
            spec: MlpSpec::new(vec![5, 4, 3]).unwrap(),
            shards: partition_iid(&ds, n_clients, 2).unwrap(),
            test,
            sampling: ClientSampling::BatchSize(8),
        }
    }

    #[test]
    fn ledger_advances_every_round() {
        let setup = small_setup(2);
        let fed = FederationConfig {
            rounds: 5,
            parallel: false,
            ..Default::default()
        };
        let res = run_experiment(
            &setup,
            &fed,
            &DpConfig::default(),
            &CorrectionConfig::default(),
        )
        .unwrap();
        assert_eq!(res.rounds.len(), 5);
        for w in res.rounds.windows(2) {
            assert!(w[1].epsilon_spent > w[0].epsilon_spent);
        }
    }

    #[test]
    fn zero_rounds_reports_initial_model() {
        let setup = small_setup(2);
        let fed = FederationConfig {
            rounds: 0,
            ..Default::default()
        };
        let res = run_experiment(
            &setup,
            &fed,
            &DpConfig::default(),
            &CorrectionConfig::default(),
        )
        .unwrap();
        assert!(res.rounds.is_empty());
        assert_eq!(res.final_scores, res.initial);
    }

    #[test]
    fn budget_stops_early() {
        let setup = small_setup(2);
        let dp = DpConfig::default();
        let mut probe = PrivacyLedger::new(dp);
        probe.record_steps(4);
        let fed = FederationConfig {
            rounds: 50,
            target_epsilon: Some(probe.epsilon_spent().unwrap().0),
            ..Default::default()
        };
        let res = run_experiment(&setup, &fed, &dp, &CorrectionConfig::default()).unwrap();
        assert_eq!(res.rounds.len(), 4);
        assert!(res.stopped_by_budget);
    }

    #[test]
    fn scaffold_server_variate_is_client_mean() {
        let setup = small_setup(3);
        let fed = FederationConfig {
            n_clients: 3,
            clients_per_round: 2,
            local_steps: 2,
            algorithm: Algorithm::DpScaffold,
            ..Default::default()
        };
        let mut sim = Simulation::new(
            &setup,
            fed,
            DpConfig::default(),
            CorrectionConfig::default(),
        )
        .unwrap();
        for _ in 0..6 {
            sim.run_round().unwrap();
            let sc = sim.state().scaffold.as_ref().unwrap();
            for k in 0..sc.server_variate.len() {
                let mean = sc.client_variates.values().map(|c| c[k]).sum::<f64>() / 3.0;
                assert!((sc.server_variate[k] - mean).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn gcfl_validates_reference_count() {
        let setup = small_setup(2);
        let corr = CorrectionConfig {
            mode: CorrectionMode::Reference,
            num_references: Some(2),
            order_seed: 0,
        };
        assert!(Simulation::new(
            &setup,
            FederationConfig::default(),
            DpConfig::default(),
            corr
        )
        .is_err());
    }
}
