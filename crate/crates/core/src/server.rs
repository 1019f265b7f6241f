//! Server side of a round: KL scoring against the server reference, trust
//! weighting, teacher aggregation, heavy-model distillation, delta-KL
//! detection, and the accuracy-based legacy validator used for comparison.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use rand::Rng;

use crate::client::ClientUpdate;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{DenseModel, DistillLoss};
use crate::numerics::{argmax, kl_rows, softmax_rows, Matrix, ProbBatch, ROW_SUM_TOL};

/// Which references the ΔKL compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum DeltaMode {
    /// Global model before vs after this round's distillation.
    #[default]
    WithinRound,
    /// Previous round's post-update KL vs this round's post-update KL.
    AcrossRounds,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DistillParams {
    /// Student-side temperature `T`.
    pub temperature: f64,
    /// Temperature applied to transmitted logits when forming the teacher.
    pub teacher_temperature: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for DistillParams {
    fn default() -> Self {
        DistillParams {
            temperature: 3.0,
            teacher_temperature: 1.0,
            alpha: 0.7,
            beta: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClientTrust {
    pub kl_old: f64,
    pub kl_new: f64,
    pub delta_kl: f64,
    pub weight: f64,
    pub flagged: bool,
    pub flag_round: Option<usize>,
    /// `(round, delta_kl)` for every round the client was scored.
    pub history: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrustLedger {
    clients: BTreeMap<usize, ClientTrust>,
}

impl TrustLedger {
    pub fn get(&self, id: usize) -> Option<&ClientTrust> {
        self.clients.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&usize, &ClientTrust)> {
        self.clients.iter()
    }

    pub fn flagged(&self) -> BTreeSet<usize> {
        self.clients
            .iter()
            .filter(|(_, t)| t.flagged)
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn record_weights(&mut self, weights: &BTreeMap<usize, f64>) {
        for (&id, &w) in weights {
            self.clients.entry(id).or_default().weight = w;
        }
    }

    fn entry(&mut self, id: usize) -> &mut ClientTrust {
        self.clients.entry(id).or_default()
    }
}

/// Mean KL(P_i ‖ reference) for every update, client distribution first.
pub fn score_clients(updates: &[ClientUpdate], reference: &ProbBatch) -> Result<Vec<(usize, f64)>> {
    updates
        .iter()
        .map(|u| {
            if u.logits.rows() != reference.rows() || u.logits.classes() != reference.classes() {
                return Err(Error::ClientShape {
                    client_id: u.client_id,
                    detail: alloc::format!(
                        "logits {}x{} vs reference {}x{}",
                        u.logits.rows(),
                        u.logits.classes(),
                        reference.rows(),
                        reference.classes()
                    ),
                });
            }
            let (_, mean) = kl_rows(&u.probs()?, reference)?;
            Ok((u.client_id, mean))
        })
        .collect()
}

/// `w_i ∝ 1 / (1 + KL_i)` over unflagged clients; flagged clients get 0.
pub fn trust_weights(
    kls: &[(usize, f64)],
    flagged: &BTreeSet<usize>,
) -> Result<BTreeMap<usize, f64>> {
    let total: f64 = kls
        .iter()
        .filter(|(id, _)| !flagged.contains(id))
        .map(|(_, kl)| 1.0 / (1.0 + kl))
        .sum();
    if kls.iter().all(|(id, _)| flagged.contains(id)) {
        return Err(Error::AllClientsFlagged);
    }
    Ok(kls
        .iter()
        .map(|&(id, kl)| {
            let w = if flagged.contains(&id) {
                0.0
            } else {
                (1.0 / (1.0 + kl)) / total
            };
            (id, w)
        })
        .collect())
}

/// Equal weights over unflagged clients (the undefended baseline passes an
/// empty flag set).
pub fn uniform_weights(ids: &[usize], flagged: &BTreeSet<usize>) -> Result<BTreeMap<usize, f64>> {
    let active = ids.iter().filter(|id| !flagged.contains(id)).count();
    if active == 0 {
        return Err(Error::AllClientsFlagged);
    }
    Ok(ids
        .iter()
        .map(|&id| {
            let w = if flagged.contains(&id) {
                0.0
            } else {
                1.0 / active as f64
            };
            (id, w)
        })
        .collect())
}

/// `P_agg = Σ w_i softmax(Z_i / teacher_temperature)`.
pub fn aggregate_teacher(
    updates: &[ClientUpdate],
    weights: &BTreeMap<usize, f64>,
    teacher_temperature: f64,
) -> Result<ProbBatch> {
    let contributing: Vec<(&ClientUpdate, f64)> = updates
        .iter()
        .filter_map(|u| weights.get(&u.client_id).map(|&w| (u, w)))
        .filter(|&(_, w)| w > 0.0)
        .collect();
    let Some((first, _)) = contributing.first() else {
        return Err(Error::NoContributors);
    };
    let total: f64 = contributing.iter().map(|(_, w)| w).sum();
    if (total - 1.0).abs() > ROW_SUM_TOL {
        return Err(Error::invalid(alloc::format!(
            "aggregation weights sum to {total}"
        )));
    }
    let (rows, classes) = (first.logits.rows(), first.logits.classes());
    let mut acc = Matrix::zeros(rows, classes);
    for (u, w) in contributing {
        if u.logits.rows() != rows || u.logits.classes() != classes {
            return Err(Error::ClientShape {
                client_id: u.client_id,
                detail: "logit shape differs from other clients".into(),
            });
        }
        let p = softmax_rows(&u.logits, teacher_temperature)?;
        for (a, v) in acc.as_mut_slice().iter_mut().zip(p.matrix().as_slice()) {
            *a += w * v;
        }
    }
    ProbBatch::new(acc)
}

/// Clients whose argmax accuracy on the stale validation set falls below
/// `threshold`. Updates without validation logits are not judged.
pub fn legacy_validate(
    updates: &[ClientUpdate],
    old_val: &Dataset,
    threshold: f64,
) -> Result<BTreeSet<usize>> {
    let mut flagged = BTreeSet::new();
    for u in updates {
        let Some(z) = &u.val_logits else { continue };
        if z.rows() != old_val.len() {
            return Err(Error::ClientShape {
                client_id: u.client_id,
                detail: alloc::format!(
                    "{} validation logits for {} samples",
                    z.rows(),
                    old_val.len()
                ),
            });
        }
        let correct = (0..z.rows())
            .filter(|&r| argmax(z.matrix().row(r)) == old_val.labels()[r])
            .count();
        if (correct as f64 / old_val.len() as f64) < threshold {
            flagged.insert(u.client_id);
        }
    }
    Ok(flagged)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GradShareOutcome {
    pub applied: usize,
    /// Shares whose `C × d` shape does not match the lightweight model.
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    /// Lightweight model `M_S`, warmed up on the public set.
    pub light: DenseModel,
    /// Heavy global model `M_G`.
    pub heavy: DenseModel,
    pub public: Dataset,
    /// Whether distillation may use the public labels (supervised term).
    pub public_labels: bool,
    pub params: DistillParams,
    /// Flag when `delta_kl <= epsilon_flag`.
    pub epsilon_flag: f64,
    pub delta_mode: DeltaMode,
    /// When off, deltas are recorded but nobody is flagged.
    pub flagging: bool,
    pub ledger: TrustLedger,
    /// Number of completed distillation rounds.
    pub round: usize,
}

impl ServerState {
    pub fn new(
        light: DenseModel,
        heavy: DenseModel,
        public: Dataset,
        params: DistillParams,
        epsilon_flag: f64,
    ) -> Result<Self> {
        if !(params.temperature > 0.0 && params.teacher_temperature > 0.0) {
            return Err(Error::invalid("temperatures must be positive"));
        }
        if !(params.alpha >= 0.0 && params.beta >= 0.0) {
            return Err(Error::invalid("alpha and beta must be non-negative"));
        }
        for m in [&light, &heavy] {
            if m.input_dim() != public.input_dim() || m.num_classes() != public.num_classes() {
                return Err(Error::invalid("server model does not match public set"));
            }
        }
        Ok(ServerState {
            light,
            heavy,
            public,
            public_labels: true,
            params,
            epsilon_flag,
            delta_mode: DeltaMode::WithinRound,
            flagging: true,
            ledger: TrustLedger::default(),
            round: 0,
        })
    }

    /// Trains `M_S` on the labeled public set.
    pub fn warm_up<R: Rng + ?Sized>(
        &mut self,
        eta: f64,
        epochs: usize,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if epochs == 0 {
            return Ok(Vec::new());
        }
        if !self.public_labels {
            return Err(Error::MissingLabels);
        }
        self.light
            .train_epochs(&self.public, eta, epochs, batch_size, rng)
    }

    /// The model clients are compared against before this round's update:
    /// `M_S` until the heavy model has been distilled once, `M_G` after.
    pub fn reference_model(&self) -> &DenseModel {
        if self.round == 0 {
            &self.light
        } else {
            &self.heavy
        }
    }

    pub fn reference_probs(&self) -> Result<ProbBatch> {
        softmax_rows(&self.reference_model().logits(self.public.features())?, 1.0)
    }

    pub fn heavy_probs(&self) -> Result<ProbBatch> {
        softmax_rows(&self.heavy.logits(self.public.features())?, 1.0)
    }

    /// SGD on the combined distillation loss toward `p_agg`.
    pub fn distill_global<R: Rng + ?Sized>(
        &mut self,
        p_agg: &ProbBatch,
        eta: f64,
        epochs: usize,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let loss = DistillLoss {
            alpha: self.params.alpha,
            beta: self.params.beta,
            temperature: self.params.temperature,
        };
        let labels = self.public_labels.then(|| self.public.labels());
        let trace = self.heavy.distill_epochs(
            self.public.features(),
            p_agg,
            labels,
            loss,
            eta,
            epochs,
            batch_size,
            rng,
        )?;
        self.round += 1;
        Ok(trace)
    }

    /// Computes ΔKL for every update and flags clients with
    /// `delta_kl <= epsilon_flag`. Flags are permanent. Returns the clients
    /// newly flagged this call.
    pub fn detect(
        &mut self,
        updates: &[ClientUpdate],
        p_old: &ProbBatch,
        p_new: &ProbBatch,
        round: usize,
    ) -> Result<BTreeSet<usize>> {
        let old = score_clients(updates, p_old)?;
        let new = score_clients(updates, p_new)?;
        let mut newly = BTreeSet::new();
        for ((id, kl_before), (_, kl_new)) in old.into_iter().zip(new) {
            let (epsilon, flagging, mode) = (self.epsilon_flag, self.flagging, self.delta_mode);
            let entry = self.ledger.entry(id);
            let kl_old = match mode {
                DeltaMode::AcrossRounds if !entry.history.is_empty() => entry.kl_new,
                _ => kl_before,
            };
            let delta = kl_old - kl_new;
            entry.kl_old = kl_old;
            entry.kl_new = kl_new;
            entry.delta_kl = delta;
            entry.history.push((round, delta));
            if flagging && !entry.flagged && delta <= epsilon {
                entry.flagged = true;
                entry.flag_round = Some(round);
                newly.insert(id);
            }
        }
        Ok(newly)
    }

    /// `W_S -= eta_g · Σ w_i ∇W_iᵀ` on the lightweight model's final layer,
    /// over shares whose shape matches and whose client is unflagged.
    pub fn apply_grad_share(
        &mut self,
        updates: &[ClientUpdate],
        weights: &BTreeMap<usize, f64>,
        eta_g: f64,
    ) -> Result<GradShareOutcome> {
        let classes = self.light.num_classes();
        let d = self.light.penultimate_dim();
        let flagged = self.ledger.flagged();
        let mut sum = Matrix::zeros(classes, d);
        let mut outcome = GradShareOutcome::default();
        for u in updates {
            let Some(g) = &u.grad_share else { continue };
            if g.shape() != (classes, d) {
                outcome.skipped += 1;
                continue;
            }
            if flagged.contains(&u.client_id) {
                continue;
            }
            let w = weights.get(&u.client_id).copied().unwrap_or(0.0);
            for (s, v) in sum.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *s += w * v;
            }
            outcome.applied += 1;
        }
        let updated =
            crate::numerics::sgd_step(&self.light.final_layer().weights, &sum.transpose(), eta_g)?;
        self.light.set_final_weights(updated)?;
        Ok(outcome)
    }
}
