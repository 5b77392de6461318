//! Round-based federated training: broadcast, local training under a
//! per-client epoch budget, loss-weighted aggregation, participation ledger.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::metrics::{batch_mse, participation_and_effort_gini, psnr};
use crate::nn::{clip_gradients, AdamConfig, ModelParams, OptimizerState};
use crate::rng::{derive, Stream};
use crate::selection::{SelectionPlan, Strategy};
use crate::semcom::{reconstruction_loss_grad, ChannelDraw, SemComModel};

/// Stabilizer in the aggregation-weight denominator.
pub const AGGREGATION_EPS: f64 = 1e-8;

/// Local optimizer settings shared by every client.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTraining {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
}

impl LocalTraining {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!("weight decay must be finite and >= 0, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config(format!("clip norm must be > 0, got {}", self.clip_norm)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    /// Corpus indices of this client's data.
    pub indices: Vec<usize>,
    /// Loss reported after the client's last training, or the initial value.
    pub last_loss: f64,
    /// Rounds with a nonzero epoch budget.
    pub participation: u64,
    /// Sum over rounds of `|D_k| * E_k`.
    pub cumulative_steps: u64,
}

impl ClientState {
    pub fn new(id: usize, indices: Vec<usize>, initial_loss: f64) -> Self {
        Self {
            id,
            indices,
            last_loss: initial_loss,
            participation: 0,
            cumulative_steps: 0,
        }
    }

    pub fn dataset_size(&self) -> usize {
        self.indices.len()
    }
}

/// Outcome of one client's local training.
#[derive(Debug, Clone)]
pub struct LocalUpdate {
    pub params: ModelParams,
    /// Mean per-sample loss over the final epoch.
    pub loss: f64,
    pub optimizer_steps: u64,
}

/// `epochs` passes over `indices`, reshuffled each epoch from `rng`, in
/// mini-batches of `batch_size` with the short tail batch kept. Each step
/// averages per-sample gradients, clips them to `clip_norm`, then applies Adam
/// from a fresh optimizer state.
///
/// Channel realizations are drawn from `rng` sample by sample in batch order,
/// so the result does not depend on how the per-sample work is scheduled.
pub fn local_train<R: Rng + ?Sized>(
    model: &SemComModel,
    start: &ModelParams,
    corpus: &Corpus,
    indices: &[usize],
    epochs: usize,
    hyper: &LocalTraining,
    rng: &mut R,
) -> Result<LocalUpdate> {
    if indices.is_empty() {
        return Err(Error::config("local training on an empty dataset"));
    }
    if epochs == 0 {
        return Err(Error::usage("local training needs at least one epoch"));
    }
    hyper.validate()?;
    model.check_params(start)?;
    if let Some(&bad) = indices.iter().find(|&&i| i >= corpus.len()) {
        return Err(Error::usage(format!("sample index {bad} outside corpus of {}", corpus.len())));
    }

    let mut params = start.clone();
    let mut opt = OptimizerState::new(AdamConfig::new(hyper.lr, hyper.weight_decay), params.tensors());
    let mut order = indices.to_vec();
    let mut epoch_loss = 0.0;
    for _ in 0..epochs {
        order.shuffle(rng);
        epoch_loss = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let draws: Vec<ChannelDraw> = batch.iter().map(|_| ChannelDraw::sample(model.config(), rng)).collect();
            let per_sample = batch
                .par_iter()
                .zip(draws)
                .map(|(&i, draw)| {
                    let image = corpus.image(i);
                    let (x_hat, tape) = model.reconstruct_with_draw(&params, image, draw)?;
                    let (loss, g) = reconstruction_loss_grad(image, &x_hat, model.config().alpha_loss)?;
                    Ok((loss, model.backward(&params, &tape, &g)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut grad = params.zeros_like();
            for (loss, g) in &per_sample {
                epoch_loss += loss;
                grad.axpy(scale, g)?;
            }
            clip_gradients(grad.tensors_mut(), hyper.clip_norm)?;
            opt.adam_step(params.tensors_mut(), grad.tensors())?;
        }
        epoch_loss /= order.len() as f64;
    }
    if !epoch_loss.is_finite() || !params.is_finite() {
        return Err(Error::usage("local training diverged to a non-finite value"));
    }
    Ok(LocalUpdate {
        params,
        loss: epoch_loss,
        optimizer_steps: opt.step_count(),
    })
}

/// `w_k = (1 - L_k / L_total) / (|S| - 1)`: lower loss, larger weight.
///
/// A single client gets weight 1. When `L_total < AGGREGATION_EPS` every
/// client is effectively lossless and the weights are uniform. The result is
/// nudged down by a few ulps if needed so its floating-point sum never exceeds 1.
pub fn aggregation_weights(losses: &[f64]) -> Result<Vec<f64>> {
    if losses.is_empty() {
        return Err(Error::Protocol("no client losses to weight".into()));
    }
    if let Some(l) = losses.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
        return Err(Error::usage(format!("client loss must be finite and >= 0, got {l}")));
    }
    let n = losses.len() as f64;
    if losses.len() == 1 {
        return Ok(vec![1.0]);
    }
    let total: f64 = losses.iter().sum();
    let mut w: Vec<f64> = if total < AGGREGATION_EPS {
        vec![1.0 / n; losses.len()]
    } else {
        losses.iter().map(|l| (1.0 - l / total) / (n - 1.0)).collect()
    };
    while w.iter().sum::<f64>() > 1.0 {
        w.iter_mut().for_each(|x| *x *= 1.0 - f64::EPSILON);
    }
    Ok(w)
}

/// `sum_k w_k * theta_k`, tensor by tensor.
pub fn fed_aggregate(models: &[&ModelParams], weights: &[f64]) -> Result<ModelParams> {
    let first = models
        .first()
        .ok_or_else(|| Error::Protocol("no models to aggregate".into()))?;
    if models.len() != weights.len() {
        return Err(Error::usage(format!("{} models but {} weights", models.len(), weights.len())));
    }
    let mut out = first.zeros_like();
    for (m, &w) in models.iter().zip(weights) {
        out.axpy(w, m)?;
    }
    Ok(out)
}

/// Everything a round needs besides the mutable client ledger.
#[derive(Debug, Clone, Copy)]
pub struct Federation<'a> {
    pub model: &'a SemComModel,
    pub corpus: &'a Corpus,
    pub validation: &'a [usize],
    pub local: LocalTraining,
    pub seed: u64,
    /// Train selected clients concurrently; results are identical either way.
    pub parallel: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    /// 1-based.
    pub round: usize,
    pub selected: Vec<usize>,
    pub epochs: Vec<usize>,
    /// Per client; unselected clients keep their previous value.
    pub losses: Vec<f64>,
    /// Per client; zero for unselected clients.
    pub weights: Vec<f64>,
    /// Mean per-sample final-epoch loss over all samples of the selected clients.
    pub avg_client_loss: f64,
    pub val_mse: f64,
    pub val_psnr_db: f64,
    pub g_part: f64,
    pub g_effort: f64,
    pub participation: Vec<u64>,
    pub cumulative_steps: Vec<u64>,
}

impl RoundRecord {
    pub fn total_steps(&self) -> u64 {
        self.cumulative_steps.iter().sum()
    }
}

impl Federation<'_> {
    /// Validation MSE of `params`, with one channel draw per image from the round's stream.
    pub fn validate(&self, params: &ModelParams, round: usize) -> Result<f64> {
        if self.validation.is_empty() {
            return Err(Error::config("validation split is empty"));
        }
        let mut rng = derive(self.seed, Stream::Validation, round as u64, 0);
        let draws: Vec<ChannelDraw> = self
            .validation
            .iter()
            .map(|_| ChannelDraw::sample(self.model.config(), &mut rng))
            .collect();
        let (originals, recons): (Vec<_>, Vec<_>) = self
            .validation
            .par_iter()
            .zip(draws)
            .map(|(&i, draw)| {
                let image = self.corpus.image(i);
                let (x_hat, _) = self.model.reconstruct_with_draw(params, image, draw)?;
                Ok((image.clone(), x_hat))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        batch_mse(&originals, &recons)
    }

    /// Broadcast `global` to the clients selected by `plan`, train them,
    /// update the ledger and aggregate.
    pub fn run_round(
        &self,
        global: &ModelParams,
        clients: &mut [ClientState],
        plan: &SelectionPlan,
        round: usize,
    ) -> Result<(ModelParams, RoundRecord)> {
        if round == 0 {
            return Err(Error::usage("rounds are numbered from 1"));
        }
        if plan.epochs.len() != clients.len() {
            return Err(Error::usage(format!(
                "plan covers {} clients, federation has {}",
                plan.epochs.len(),
                clients.len()
            )));
        }
        let selected: Vec<usize> = (0..clients.len()).filter(|&k| plan.epochs[k] > 0).collect();
        if selected.is_empty() {
            return Err(Error::Protocol(format!("round {round} selected no clients")));
        }

        let train = |&k: &usize| {
            let client = &clients[k];
            let mut rng = derive(self.seed, Stream::Client, client.id as u64, round as u64);
            local_train(
                self.model,
                global,
                self.corpus,
                &client.indices,
                plan.epochs[k],
                &self.local,
                &mut rng,
            )
        };
        let updates: Vec<LocalUpdate> = if self.parallel {
            selected.par_iter().map(train).collect::<Result<_>>()?
        } else {
            selected.iter().map(train).collect::<Result<_>>()?
        };

        let losses: Vec<f64> = updates.iter().map(|u| u.loss).collect();
        let w = aggregation_weights(&losses)?;
        let aggregated = fed_aggregate(&updates.iter().map(|u| &u.params).collect::<Vec<_>>(), &w)?;

        let mut weights = vec![0.0; clients.len()];
        let mut loss_sum = 0.0;
        let mut sample_count = 0usize;
        for ((&k, update), &wk) in selected.iter().zip(&updates).zip(&w) {
            let c = &mut clients[k];
            c.last_loss = update.loss;
            c.participation += 1;
            c.cumulative_steps += (c.dataset_size() * plan.epochs[k]) as u64;
            weights[k] = wk;
            loss_sum += update.loss * c.dataset_size() as f64;
            sample_count += c.dataset_size();
        }

        let participation: Vec<u64> = clients.iter().map(|c| c.participation).collect();
        let cumulative_steps: Vec<u64> = clients.iter().map(|c| c.cumulative_steps).collect();
        let (g_part, g_effort) = participation_and_effort_gini(&participation, &cumulative_steps)?;
        let val_mse = self.validate(&aggregated, round)?;
        let record = RoundRecord {
            round,
            selected,
            epochs: plan.epochs.clone(),
            losses: clients.iter().map(|c| c.last_loss).collect(),
            weights,
            avg_client_loss: loss_sum / sample_count as f64,
            val_mse,
            val_psnr_db: psnr(val_mse)?,
            g_part,
            g_effort,
            participation,
            cumulative_steps,
        };
        Ok((aggregated, record))
    }
}

/// Round schedule and selection settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub rounds: usize,
    pub e_total: usize,
    pub e_max: usize,
    pub eps_u: f64,
    /// Loss assumed for every client before its first report.
    pub initial_loss: f64,
}

/// Select, broadcast, train and aggregate for `schedule.rounds` rounds.
/// Client losses are reset to `schedule.initial_loss` first.
pub fn run_training(
    fed: &Federation<'_>,
    initial: &ModelParams,
    clients: &mut [ClientState],
    strategy: Strategy,
    schedule: &Schedule,
) -> Result<(ModelParams, Vec<RoundRecord>)> {
    if schedule.rounds == 0 {
        return Err(Error::config("need at least one round"));
    }
    if !(schedule.initial_loss >= 0.0 && schedule.initial_loss.is_finite()) {
        return Err(Error::config(format!("initial loss must be finite and >= 0, got {}", schedule.initial_loss)));
    }
    for c in clients.iter_mut() {
        c.last_loss = schedule.initial_loss;
    }
    let sizes: Vec<usize> = clients.iter().map(ClientState::dataset_size).collect();
    let mut global = initial.clone();
    let mut records = Vec::with_capacity(schedule.rounds);
    for round in 1..=schedule.rounds {
        let losses: Vec<f64> = clients.iter().map(|c| c.last_loss).collect();
        let participation: Vec<u64> = clients.iter().map(|c| c.participation).collect();
        let plan = strategy.plan(&sizes, &losses, &participation, schedule.e_total, schedule.e_max, schedule.eps_u)?;
        let (next, record) = fed.run_round(&global, clients, &plan, round)?;
        global = next;
        records.push(record);
    }
    Ok((global, records))
}
