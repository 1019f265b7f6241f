//! Client side of a round: local training, the transmitted payload, and
//! adversarial behaviours.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{flip_labels, Dataset};
use crate::error::{Error, Result};
use crate::model::DenseModel;
use crate::numerics::{softmax_rows, LogitBatch, Matrix, ProbBatch};
use crate::rng::{derive_seed, stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum AttackProfile {
    #[default]
    Benign,
    /// `Z' = Z + δ`, `δ ~ N(0, σ²)` per entry.
    GaussianLogit { sigma: f64 },
    /// `Z' = Z + γ e_target`.
    TargetedLogit { gamma: f64, target: usize },
    /// Trains on a freshly flipped copy of the shard every round.
    LabelFlip { fraction: f64 },
}

impl AttackProfile {
    pub fn is_benign(&self) -> bool {
        matches!(self, AttackProfile::Benign)
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        match *self {
            AttackProfile::Benign => Ok(()),
            AttackProfile::GaussianLogit { sigma } if sigma >= 0.0 && sigma.is_finite() => Ok(()),
            AttackProfile::GaussianLogit { .. } => Err(Error::invalid("sigma must be >= 0")),
            AttackProfile::TargetedLogit { gamma, target } => {
                if !gamma.is_finite() {
                    Err(Error::invalid("gamma must be finite"))
                } else if target >= classes {
                    Err(Error::LabelOutOfRange {
                        label: target,
                        classes,
                    })
                } else {
                    Ok(())
                }
            }
            AttackProfile::LabelFlip { fraction } if (0.0..=1.0).contains(&fraction) => Ok(()),
            AttackProfile::LabelFlip { .. } => Err(Error::invalid("flip fraction must be in [0, 1]")),
        }
    }
}

/// Tampers with transmitted logits. Profiles other than the two logit
/// attacks pass `z` through unchanged.
pub fn apply_logit_attack<R: Rng + ?Sized>(
    z: &LogitBatch,
    profile: &AttackProfile,
    rng: &mut R,
) -> Result<LogitBatch> {
    match *profile {
        AttackProfile::GaussianLogit { sigma } => {
            if sigma == 0.0 {
                return Ok(z.clone());
            }
            let noise = Normal::new(0.0, sigma).map_err(|_| Error::invalid("sigma must be >= 0"))?;
            let mut m = z.matrix().clone();
            for v in m.as_mut_slice() {
                *v += noise.sample(rng);
            }
            LogitBatch::new(m)
        }
        AttackProfile::TargetedLogit { gamma, target } => {
            if target >= z.classes() {
                return Err(Error::LabelOutOfRange {
                    label: target,
                    classes: z.classes(),
                });
            }
            let mut m = z.matrix().clone();
            for r in 0..m.rows() {
                m.row_mut(r)[target] += gamma;
            }
            LogitBatch::new(m)
        }
        AttackProfile::Benign | AttackProfile::LabelFlip { .. } => Ok(z.clone()),
    }
}

/// Final-layer gradient share `(1/N)(P_S − P_i)ᵀ H`, shape `C × d`.
pub fn gradient_share(p_server: &ProbBatch, p_client: &ProbBatch, hidden: &Matrix) -> Result<Matrix> {
    let n = p_client.rows();
    p_server
        .matrix()
        .ensure_shape("server probabilities", n, p_client.classes())?;
    hidden.ensure_shape("hidden features", n, hidden.cols())?;
    let mut residual = p_server.matrix().clone();
    for (r, p) in residual.as_mut_slice().iter_mut().zip(p_client.matrix().as_slice()) {
        *r -= p;
    }
    Ok(residual.t_matmul(hidden)?.scale(1.0 / n as f64))
}

/// One client's round payload.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    /// Logits on the public features, after any tampering.
    pub logits: LogitBatch,
    /// `C × d` final-layer gradient, when shared.
    pub grad_share: Option<Matrix>,
    pub n_samples: usize,
    /// Logits on the server's stale validation set (legacy baseline only).
    pub val_logits: Option<LogitBatch>,
}

impl ClientUpdate {
    pub fn probs(&self) -> Result<ProbBatch> {
        softmax_rows(&self.logits, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub model: DenseModel,
    pub shard: Dataset,
    pub profile: AttackProfile,
    pub seed: u64,
}

impl ClientState {
    pub fn new(
        id: usize,
        model: DenseModel,
        shard: Dataset,
        profile: AttackProfile,
        seed: u64,
    ) -> Result<Self> {
        if shard.num_classes() != model.num_classes() {
            return Err(Error::ClientShape {
                client_id: id,
                detail: alloc::format!(
                    "shard has {} classes, model {}",
                    shard.num_classes(),
                    model.num_classes()
                ),
            });
        }
        if shard.input_dim() != model.input_dim() {
            return Err(Error::ClientShape {
                client_id: id,
                detail: alloc::format!(
                    "shard width {} vs model input {}",
                    shard.input_dim(),
                    model.input_dim()
                ),
            });
        }
        profile.validate(model.num_classes())?;
        Ok(ClientState {
            id,
            model,
            shard,
            profile,
            seed,
        })
    }

    /// Local SGD on the shard (or on a round-salted label-flipped copy of it
    /// for a label-flipping client). Returns the per-epoch loss trace.
    pub fn local_round(
        &mut self,
        round: usize,
        eta: f64,
        epochs: usize,
        batch_size: usize,
    ) -> Result<Vec<f64>> {
        let id = self.id as u64;
        let mut rng = stream_rng(self.seed, Stream::LocalTrain, id, round as u64);
        match self.profile {
            AttackProfile::LabelFlip { fraction } => {
                let flip_seed = derive_seed(self.seed, Stream::LabelFlip, id, round as u64);
                let poisoned = flip_labels(&self.shard, fraction, flip_seed)?;
                self.model
                    .train_epochs(&poisoned, eta, epochs, batch_size, &mut rng)
            }
            _ => self
                .model
                .train_epochs(&self.shard, eta, epochs, batch_size, &mut rng),
        }
    }

    /// Builds the transmitted payload. Logit attacks are applied first; the
    /// gradient share is then derived from the tampered probabilities.
    pub fn emit_update(
        &self,
        round: usize,
        x_pub: &Matrix,
        p_server: &ProbBatch,
        send_grad: bool,
        x_val: Option<&Matrix>,
    ) -> Result<ClientUpdate> {
        if p_server.rows() != x_pub.rows() || p_server.classes() != self.model.num_classes() {
            return Err(Error::ClientShape {
                client_id: self.id,
                detail: alloc::format!(
                    "server reference is {}x{}, expected {}x{}",
                    p_server.rows(),
                    p_server.classes(),
                    x_pub.rows(),
                    self.model.num_classes()
                ),
            });
        }
        let (clean, trace) = self.model.forward(x_pub).map_err(|e| match e {
            Error::ShapeMismatch { .. } => Error::ClientShape {
                client_id: self.id,
                detail: alloc::format!("{e}"),
            },
            other => other,
        })?;
        let id = self.id as u64;
        let mut rng = stream_rng(self.seed, Stream::Attack, 2 * id, round as u64);
        let logits = apply_logit_attack(&clean, &self.profile, &mut rng)?;
        let grad_share = if send_grad {
            let p_client = softmax_rows(&logits, 1.0)?;
            Some(gradient_share(p_server, &p_client, trace.penultimate())?)
        } else {
            None
        };
        let val_logits = match x_val {
            Some(x) => {
                let mut rng = stream_rng(self.seed, Stream::Attack, 2 * id + 1, round as u64);
                let z = self.model.logits(x)?;
                Some(apply_logit_attack(&z, &self.profile, &mut rng)?)
            }
            None => None,
        };
        Ok(ClientUpdate {
            client_id: self.id,
            logits,
            grad_share,
            n_samples: self.shard.len(),
            val_logits,
        })
    }
}
