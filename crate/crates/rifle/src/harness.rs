//! Builds a simulated federation from a config and drives it round by round.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rayon::prelude::*;
use rifle_core::data::{dirichlet_partition, drifted_validation_split, synth_blobs};
use rifle_core::metrics::{self, comm_cost};
use rifle_core::rng::{derive_seed, stream_rng, Stream};
use rifle_core::server::{aggregate_teacher, legacy_validate, score_clients, trust_weights, uniform_weights};
use rifle_core::{
    ClientState, ClientUpdate, CostModel, Dataset, DenseModel, DistillParams, ProbBatch, RoundMetrics,
    ServerState, TrustLedger,
};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{encode_model, encode_update, UPDATE_MAGIC};
use crate::config::{DatasetSpec, Defense, ExperimentConfig};
use crate::error::{Error, Result};
use crate::report;

/// One `ledger.csv` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub round: usize,
    pub client_id: usize,
    pub kl_old: f64,
    pub kl_new: f64,
    pub delta_kl: f64,
    pub weight: f64,
    pub flagged: bool,
}

/// Everything a run owns: server, clients, held-out data and the logs.
#[derive(Debug, Clone)]
pub struct World {
    pub config: ExperimentConfig,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub test: Dataset,
    /// Stale validation set for the accuracy-based baseline.
    pub old_val: Option<Dataset>,
    pub honest: BTreeSet<usize>,
    pub legacy_flags: BTreeSet<usize>,
    /// `M_S` test accuracy right after warm-up.
    pub light_warmup_acc: f64,
    pub metrics: Vec<RoundMetrics>,
    pub ledger_rows: Vec<LedgerRow>,
    pub update_log: Option<Vec<u8>>,
    pub heavy_snapshots: Vec<(usize, DenseModel)>,
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.dataset {
        DatasetSpec::Synth {
            classes,
            per_class,
            input_dim,
            spread,
        } => Ok(synth_blobs(
            derive_seed(cfg.master_seed, Stream::Dataset, 0, 0),
            *classes,
            *per_class,
            *input_dim,
            *spread,
        )?),
        DatasetSpec::Idx {
            images,
            labels,
            classes,
            limit,
        } => crate::idx::load_idx(images, labels, *classes, *limit),
    }
}

impl World {
    /// Dataset, public/test split, Dirichlet partition, model init and warm-up.
    pub fn setup(config: &ExperimentConfig) -> Result<World> {
        config.validate()?;
        let cfg = config.clone();
        let seed = cfg.master_seed;
        let all = load_dataset(&cfg)?;
        if cfg.n_public + cfg.n_test >= all.len() {
            return Err(Error::Config(vec![format!(
                "n_public + n_test must leave client data out of {} samples",
                all.len()
            )]));
        }
        let (public, rest) = all.split_holdout(cfg.n_public, derive_seed(seed, Stream::Split, 0, 0))?;
        let (test, pool) = rest.split_holdout(cfg.n_test, derive_seed(seed, Stream::Split, 1, 0))?;
        let plan = dirichlet_partition(
            &pool,
            cfg.clients,
            cfg.dirichlet_alpha,
            derive_seed(seed, Stream::Partition, 0, 0),
            cfg.min_per_client,
            cfg.partition_retries,
        )?;
        let (dim, classes) = (all.input_dim(), all.num_classes());

        let clients = plan
            .shards
            .iter()
            .enumerate()
            .map(|(id, shard)| {
                let model = DenseModel::init(
                    dim,
                    &cfg.client_hidden,
                    classes,
                    &mut stream_rng(seed, Stream::Init, id as u64 + 2, 0),
                );
                Ok(ClientState::new(id, model, pool.subset(shard)?, cfg.profile(id), seed)?)
            })
            .collect::<Result<Vec<_>>>()?;

        let light = DenseModel::init(dim, &cfg.light_hidden, classes, &mut stream_rng(seed, Stream::Init, 0, 0));
        let heavy = DenseModel::init(dim, &cfg.heavy_hidden, classes, &mut stream_rng(seed, Stream::Init, 1, 0));
        let params = DistillParams {
            temperature: cfg.temperature,
            teacher_temperature: cfg.teacher_temperature,
            alpha: cfg.alpha,
            beta: cfg.beta,
        };
        let mut server = ServerState::new(light, heavy, public, params, cfg.epsilon_flag)?;
        server.public_labels = cfg.public_labels;
        server.delta_mode = cfg.delta_mode;
        server.flagging = cfg.defense == Defense::Rifle;
        server.warm_up(
            cfg.server_eta,
            cfg.warmup_epochs,
            cfg.server_batch_size,
            &mut stream_rng(seed, Stream::ServerTrain, 0, 0),
        )?;
        let light_warmup_acc = server.light.accuracy(&test)?;

        let old_val = if cfg.legacy_baseline {
            Some(drifted_validation_split(
                &server.public,
                &cfg.legacy_keep_classes,
                derive_seed(seed, Stream::Drift, 0, 0),
            )?)
        } else {
            None
        };

        Ok(World {
            honest: cfg.honest_clients(),
            update_log: cfg.update_log.then(|| UPDATE_MAGIC.to_vec()),
            config: cfg,
            server,
            clients,
            test,
            old_val,
            legacy_flags: BTreeSet::new(),
            light_warmup_acc,
            metrics: Vec::new(),
            ledger_rows: Vec::new(),
            heavy_snapshots: Vec::new(),
        })
    }

    /// Client ids taking part in `round`, ascending.
    pub fn participants(&self, round: usize) -> BTreeSet<usize> {
        let k = self.config.clients;
        let m = ((self.config.participation_fraction * k as f64).ceil() as usize).clamp(1, k);
        if m == k {
            return (0..k).collect();
        }
        let mut rng = stream_rng(self.config.master_seed, Stream::Participation, 0, round as u64);
        index::sample(&mut rng, k, m).into_iter().collect()
    }

    fn weights(&self, kls: &[(usize, f64)], flagged: &BTreeSet<usize>) -> rifle_core::Result<BTreeMap<usize, f64>> {
        match self.config.defense {
            Defense::Rifle => trust_weights(kls, flagged),
            Defense::None => uniform_weights(&kls.iter().map(|(id, _)| *id).collect::<Vec<_>>(), flagged),
        }
    }

    /// Runs one round (1-based). Errors carry the round index.
    pub fn run_round(&mut self, round: usize) -> Result<RoundMetrics> {
        self.step(round).map_err(|e| match e {
            Error::Core(source) => Error::Halt { round, source },
            other => other,
        })
    }

    fn step(&mut self, round: usize) -> Result<RoundMetrics> {
        let cfg = self.config.clone();
        let who = self.participants(round);
        let p_ref = self.server.reference_probs()?;
        let x_pub = self.server.public.features();
        let x_val = self.old_val.as_ref().map(Dataset::features);

        let mut updates: Vec<ClientUpdate> = self
            .clients
            .par_iter_mut()
            .filter(|c| who.contains(&c.id))
            .map(|c| {
                c.local_round(round, cfg.eta, cfg.local_epochs, cfg.batch_size)?;
                c.emit_update(round, x_pub, &p_ref, cfg.send_grad, x_val)
            })
            .collect::<rifle_core::Result<Vec<_>>>()?;
        updates.sort_by_key(|u| u.client_id);
        if let Some(log) = &mut self.update_log {
            for u in &updates {
                encode_update(log, round, u);
            }
        }

        let kls = score_clients(&updates, &p_ref)?;
        let mut weights = self.weights(&kls, &self.server.ledger.flagged())?;
        let p_agg = aggregate_teacher(&updates, &weights, cfg.teacher_temperature)?;
        let train_seed = (cfg.master_seed, round as u64);
        let server_rng = || stream_rng(train_seed.0, Stream::ServerTrain, 0, train_seed.1);

        if cfg.shadow_detect {
            // detect against a throwaway distillation, then redo it without
            // whoever was just flagged
            let mut shadow = self.server.clone();
            shadow.distill_global(&p_agg, cfg.server_eta, cfg.distill_epochs, cfg.server_batch_size, &mut server_rng())?;
            let p_shadow = shadow.heavy_probs()?;
            shadow.detect(&updates, &p_ref, &p_shadow, round)?;
            self.server.ledger = shadow.ledger;
            weights = self.weights(&kls, &self.server.ledger.flagged())?;
            let p_clean = aggregate_teacher(&updates, &weights, cfg.teacher_temperature)?;
            self.server
                .distill_global(&p_clean, cfg.server_eta, cfg.distill_epochs, cfg.server_batch_size, &mut server_rng())?;
        } else {
            self.server
                .distill_global(&p_agg, cfg.server_eta, cfg.distill_epochs, cfg.server_batch_size, &mut server_rng())?;
            let p_new: ProbBatch = self.server.heavy_probs()?;
            self.server.detect(&updates, &p_ref, &p_new, round)?;
        }
        self.server.ledger.record_weights(&weights);

        if cfg.send_grad {
            self.server.apply_grad_share(&updates, &weights, cfg.eta_g)?;
        }
        if let Some(old_val) = &self.old_val {
            let failed = legacy_validate(&updates, old_val, cfg.legacy_threshold)?;
            self.legacy_flags.extend(failed);
        }

        for u in &updates {
            let t = self.server.ledger.get(u.client_id).cloned().unwrap_or_default();
            self.ledger_rows.push(LedgerRow {
                round,
                client_id: u.client_id,
                kl_old: t.kl_old,
                kl_new: t.kl_new,
                delta_kl: t.delta_kl,
                weight: weights.get(&u.client_id).copied().unwrap_or(0.0),
                flagged: t.flagged,
            });
        }
        if cfg.checkpoints {
            self.heavy_snapshots.push((round, self.server.heavy.clone()));
        }

        let m = self.measure(round)?;
        self.metrics.push(m.clone());
        Ok(m)
    }

    fn measure(&self, round: usize) -> Result<RoundMetrics> {
        let heavy = &self.server.heavy;
        let global_acc = metrics::robust_accuracy(heavy, &self.test)?;
        let flags = self.server.ledger.flagged();
        let legacy_pfpv = match self.old_val {
            Some(_) => Some(metrics::pfpv(&self.honest, &self.legacy_flags)?),
            None => None,
        };
        Ok(RoundMetrics {
            round,
            global_acc,
            server_val_acc: heavy.accuracy(&self.server.public)?,
            asr: metrics::asr(heavy, &self.test, self.config.asr_class())?,
            untargeted_asr: 1.0 - global_acc,
            pfpv: metrics::pfpv(&self.honest, &flags)?,
            legacy_pfpv,
            comm_bytes_per_client: comm_cost(&self.cost_model(), self.config.send_grad),
            flags,
        })
    }

    /// Wire accounting at 4 bytes per transmitted value.
    pub fn cost_model(&self) -> CostModel {
        let client = &self.clients[0].model;
        CostModel {
            bytes_per_value: 4,
            param_count: client.param_count() as u64,
            n_public: self.server.public.len() as u64,
            num_classes: client.num_classes() as u64,
            penultimate_d: client.penultimate_dim() as u64,
            ..CostModel::default()
        }
    }

    pub fn attackers(&self) -> BTreeSet<usize> {
        (0..self.config.clients).filter(|id| !self.honest.contains(id)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputPaths {
    pub dir: PathBuf,
    pub metrics: PathBuf,
    pub ledger: PathBuf,
    pub summary: PathBuf,
    pub checkpoints: Option<PathBuf>,
    pub update_log: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub rounds: Vec<RoundMetrics>,
    pub ledger: TrustLedger,
    pub ledger_rows: Vec<LedgerRow>,
    pub honest: BTreeSet<usize>,
    pub attackers: BTreeSet<usize>,
    pub light_warmup_acc: f64,
    pub light_final_acc: f64,
    pub paths: Option<OutputPaths>,
}

impl ExperimentResult {
    pub fn final_round(&self) -> &RoundMetrics {
        self.rounds.last().expect("at least one round")
    }
}

/// Runs every round in memory without touching the filesystem.
pub fn simulate(config: &ExperimentConfig) -> Result<(World, ExperimentResult)> {
    let mut world = World::setup(config)?;
    for round in 1..=world.config.rounds {
        world.run_round(round)?;
    }
    let result = ExperimentResult {
        rounds: world.metrics.clone(),
        ledger: world.server.ledger.clone(),
        ledger_rows: world.ledger_rows.clone(),
        honest: world.honest.clone(),
        attackers: world.attackers(),
        light_warmup_acc: world.light_warmup_acc,
        light_final_acc: world.server.light.accuracy(&world.test)?,
        paths: None,
    };
    Ok((world, result))
}

/// The output directory: `RIFLE_OUT` if set, else `config.output_dir`.
pub fn output_dir(config: &ExperimentConfig) -> PathBuf {
    std::env::var_os("RIFLE_OUT").map_or_else(|| config.output_dir.clone(), PathBuf::from)
}

/// Simulates and writes `metrics.csv`, `ledger.csv`, `summary.json` and the
/// optional checkpoint / update-log artifacts under `dir`.
pub fn run_experiment_in(config: &ExperimentConfig, dir: &Path) -> Result<ExperimentResult> {
    let (world, mut result) = simulate(config)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, bytes: &[u8]| -> Result<PathBuf> {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    };
    let metrics = write("metrics.csv", report::metrics_csv(&result.rounds).as_bytes())?;
    let ledger = write("ledger.csv", report::ledger_csv(&result.ledger_rows).as_bytes())?;
    let summary = write("summary.json", report::summary_json(&world.config, &result)?.as_bytes())?;
    let checkpoints = if world.config.checkpoints {
        let sub = dir.join("checkpoints");
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for (round, model) in &world.heavy_snapshots {
            let p = sub.join(format!("heavy_round{round:03}.bin"));
            std::fs::write(&p, encode_model(model)).map_err(|e| Error::io(&p, e))?;
        }
        let p = sub.join("light_final.bin");
        std::fs::write(&p, encode_model(&world.server.light)).map_err(|e| Error::io(&p, e))?;
        Some(sub)
    } else {
        None
    };
    let update_log = match &world.update_log {
        Some(bytes) => Some(write("updates.bin", bytes)?),
        None => None,
    };
    result.paths = Some(OutputPaths {
        dir: dir.to_path_buf(),
        metrics,
        ledger,
        summary,
        checkpoints,
        update_log,
    });
    Ok(result)
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    run_experiment_in(config, &output_dir(config))
}
