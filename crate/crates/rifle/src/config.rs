//! Experiment configuration and its flat `key = value` file format.
//!
//! ```text
//! # comments start with '#'
//! clients = 10
//! rounds = 10
//! attack = 0:gaussian:10        # repeatable: id:kind:params
//! attack = 2:targeted:10:0      # gamma, target class
//! attack = 3:labelflip:0.5      # fraction
//! heavy_hidden = 128,128,128
//! ```
//!
//! Every key is typed; unknown keys, duplicate keys, and invalid values are
//! all collected and reported together.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::PathBuf;

use rifle_core::{AttackProfile, DeltaMode};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synth {
        classes: usize,
        per_class: usize,
        input_dim: usize,
        spread: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        classes: usize,
        /// Use only the first `limit` samples when set.
        limit: Option<usize>,
    },
}

impl DatasetSpec {
    pub fn classes(&self) -> usize {
        match self {
            DatasetSpec::Synth { classes, .. } | DatasetSpec::Idx { classes, .. } => *classes,
        }
    }
}

/// Whether trust weighting and flagging are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Defense {
    /// KL trust weights and delta-KL flagging.
    Rifle,
    /// Uniform weights, nobody flagged.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub eta: f64,
    pub eta_g: f64,
    pub batch_size: usize,
    /// Minibatch size for warm-up and distillation on the public set.
    pub server_batch_size: usize,
    pub temperature: f64,
    pub teacher_temperature: f64,
    pub alpha: f64,
    pub beta: f64,
    pub epsilon_flag: f64,
    pub delta_mode: DeltaMode,
    pub shadow_detect: bool,
    pub send_grad: bool,
    pub public_labels: bool,
    pub defense: Defense,
    pub n_public: usize,
    pub n_test: usize,
    pub dirichlet_alpha: f64,
    pub min_per_client: usize,
    pub partition_retries: usize,
    pub participation_fraction: f64,
    pub attacks: BTreeMap<usize, AttackProfile>,
    /// Class whose targeted success rate is reported; defaults to the first
    /// targeted attacker's class, else 0.
    pub asr_target: Option<usize>,
    pub legacy_baseline: bool,
    pub legacy_threshold: f64,
    pub legacy_keep_classes: BTreeSet<usize>,
    pub dataset: DatasetSpec,
    pub client_hidden: Vec<usize>,
    pub light_hidden: Vec<usize>,
    pub heavy_hidden: Vec<usize>,
    pub warmup_epochs: usize,
    pub distill_epochs: usize,
    pub server_eta: f64,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub checkpoints: bool,
    pub update_log: bool,
}

const SYNTH_PER_CLASS: usize = 1000;
const SYNTH_INPUT_DIM: usize = 16;
const SYNTH_SPREAD: f64 = 1.5;

impl Default for ExperimentConfig {
    /// The default adversarial scenario: ten clients, two Gaussian logit
    /// attackers and one targeted logit attacker.
    fn default() -> Self {
        ExperimentConfig {
            clients: 10,
            rounds: 10,
            local_epochs: 2,
            eta: 0.3,
            eta_g: 0.05,
            batch_size: 8,
            server_batch_size: 32,
            temperature: 3.0,
            teacher_temperature: 3.0,
            alpha: 0.7,
            beta: 0.3,
            epsilon_flag: -0.01,
            delta_mode: DeltaMode::WithinRound,
            shadow_detect: false,
            send_grad: true,
            public_labels: true,
            defense: Defense::Rifle,
            n_public: 500,
            n_test: 1000,
            dirichlet_alpha: 0.5,
            min_per_client: 5,
            partition_retries: 100,
            participation_fraction: 1.0,
            attacks: BTreeMap::from([
                (0, AttackProfile::GaussianLogit { sigma: 10.0 }),
                (1, AttackProfile::GaussianLogit { sigma: 10.0 }),
                (
                    2,
                    AttackProfile::TargetedLogit {
                        gamma: 10.0,
                        target: 0,
                    },
                ),
            ]),
            asr_target: None,
            legacy_baseline: false,
            legacy_threshold: 0.5,
            legacy_keep_classes: (0..5).collect(),
            dataset: DatasetSpec::Synth {
                classes: 10,
                per_class: SYNTH_PER_CLASS,
                input_dim: SYNTH_INPUT_DIM,
                spread: SYNTH_SPREAD,
            },
            client_hidden: vec![32],
            light_hidden: vec![32],
            heavy_hidden: vec![128, 128, 128],
            warmup_epochs: 1,
            distill_epochs: 20,
            server_eta: 0.05,
            master_seed: 0,
            output_dir: PathBuf::from("runs"),
            checkpoints: false,
            update_log: false,
        }
    }
}

fn parse_attack(raw: &str) -> std::result::Result<(usize, AttackProfile), String> {
    let parts: Vec<&str> = raw.split(':').map(str::trim).collect();
    let id: usize = parts[0]
        .parse()
        .map_err(|_| format!("attack client id `{}` is not an integer", parts[0]))?;
    let num = |i: usize| -> std::result::Result<f64, String> {
        parts
            .get(i)
            .ok_or_else(|| format!("attack `{raw}` is missing a parameter"))?
            .parse::<f64>()
            .map_err(|_| format!("attack `{raw}`: `{}` is not a number", parts[i]))
    };
    let profile = match parts.get(1).copied() {
        Some("benign") => AttackProfile::Benign,
        Some("gaussian") => AttackProfile::GaussianLogit { sigma: num(2)? },
        Some("targeted") => AttackProfile::TargetedLogit {
            gamma: num(2)?,
            target: parts
                .get(3)
                .ok_or_else(|| format!("attack `{raw}` is missing the target class"))?
                .parse()
                .map_err(|_| format!("attack `{raw}`: target class is not an integer"))?,
        },
        Some("labelflip") => AttackProfile::LabelFlip { fraction: num(2)? },
        other => {
            return Err(format!(
                "attack `{raw}`: unknown kind {other:?} (expected benign|gaussian|targeted|labelflip)"
            ))
        }
    };
    Ok((id, profile))
}

fn format_attack(id: usize, p: &AttackProfile) -> String {
    match *p {
        AttackProfile::Benign => format!("{id}:benign"),
        AttackProfile::GaussianLogit { sigma } => format!("{id}:gaussian:{sigma}"),
        AttackProfile::TargetedLogit { gamma, target } => format!("{id}:targeted:{gamma}:{target}"),
        AttackProfile::LabelFlip { fraction } => format!("{id}:labelflip:{fraction}"),
    }
}

fn parse_list(raw: &str) -> std::result::Result<Vec<usize>, String> {
    if raw.trim().is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| format!("`{}` is not a non-negative integer", s.trim()))
        })
        .collect()
}

fn parse_bool(raw: &str) -> std::result::Result<bool, String> {
    match raw {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(format!("`{raw}` is not a boolean (on/off)")),
    }
}

fn join(v: impl IntoIterator<Item = usize>) -> String {
    v.into_iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl ExperimentConfig {
    /// Parses the text format on top of [`ExperimentConfig::default`].
    /// Attacks given in the file replace the default attack list.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut errors = Vec::new();
        let mut seen = BTreeSet::new();
        let mut attacks: Option<BTreeMap<usize, AttackProfile>> = None;
        // dataset keys are gathered first, then assembled
        let mut ds: BTreeMap<&str, (usize, &str)> = BTreeMap::new();

        for (lineno, line) in text.lines().enumerate() {
            let lineno = lineno + 1;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                errors.push(format!("line {lineno}: expected `key = value`"));
                continue;
            };
            let (key, value) = (key.trim(), value.trim());
            if key == "attack" {
                match parse_attack(value) {
                    Ok((id, p)) => {
                        if attacks.get_or_insert_with(BTreeMap::new).insert(id, p).is_some() {
                            errors.push(format!("line {lineno}: client {id} has two attacks"));
                        }
                    }
                    Err(e) => errors.push(format!("line {lineno}: {e}")),
                }
                continue;
            }
            if !seen.insert(key.to_string()) {
                errors.push(format!("line {lineno}: duplicate key `{key}`"));
                continue;
            }
            macro_rules! set {
                ($field:expr, $parse:expr) => {
                    match $parse {
                        Ok(v) => $field = v,
                        Err(e) => errors.push(format!("line {lineno}: `{key}`: {e}")),
                    }
                };
            }
            let int = || value.parse::<usize>().map_err(|_| format!("`{value}` is not a non-negative integer"));
            let real = || value.parse::<f64>().map_err(|_| format!("`{value}` is not a number"));
            match key {
                "clients" => set!(cfg.clients, int()),
                "rounds" => set!(cfg.rounds, int()),
                "local_epochs" => set!(cfg.local_epochs, int()),
                "eta" => set!(cfg.eta, real()),
                "eta_g" => set!(cfg.eta_g, real()),
                "batch_size" => set!(cfg.batch_size, int()),
                "server_batch_size" => set!(cfg.server_batch_size, int()),
                "temperature" => set!(cfg.temperature, real()),
                "teacher_temperature" => set!(cfg.teacher_temperature, real()),
                "alpha" => set!(cfg.alpha, real()),
                "beta" => set!(cfg.beta, real()),
                "epsilon_flag" => set!(cfg.epsilon_flag, real()),
                "delta_mode" => set!(
                    cfg.delta_mode,
                    match value {
                        "within_round" => Ok(DeltaMode::WithinRound),
                        "across_rounds" => Ok(DeltaMode::AcrossRounds),
                        _ => Err(format!("`{value}` is not within_round|across_rounds")),
                    }
                ),
                "shadow_detect" => set!(cfg.shadow_detect, parse_bool(value)),
                "send_grad" => set!(cfg.send_grad, parse_bool(value)),
                "public_labels" => set!(cfg.public_labels, parse_bool(value)),
                "defense" => set!(
                    cfg.defense,
                    match value {
                        "rifle" => Ok(Defense::Rifle),
                        "none" => Ok(Defense::None),
                        _ => Err(format!("`{value}` is not rifle|none")),
                    }
                ),
                "n_public" => set!(cfg.n_public, int()),
                "n_test" => set!(cfg.n_test, int()),
                "dirichlet_alpha" => set!(cfg.dirichlet_alpha, real()),
                "min_per_client" => set!(cfg.min_per_client, int()),
                "partition_retries" => set!(cfg.partition_retries, int()),
                "participation_fraction" => set!(cfg.participation_fraction, real()),
                "asr_target" => set!(cfg.asr_target, int().map(Some)),
                "legacy_baseline" => set!(cfg.legacy_baseline, parse_bool(value)),
                "legacy_threshold" => set!(cfg.legacy_threshold, real()),
                "legacy_keep_classes" => set!(
                    cfg.legacy_keep_classes,
                    parse_list(value).map(|v| v.into_iter().collect())
                ),
                "client_hidden" => set!(cfg.client_hidden, parse_list(value)),
                "light_hidden" => set!(cfg.light_hidden, parse_list(value)),
                "heavy_hidden" => set!(cfg.heavy_hidden, parse_list(value)),
                "warmup_epochs" => set!(cfg.warmup_epochs, int()),
                "distill_epochs" => set!(cfg.distill_epochs, int()),
                "server_eta" => set!(cfg.server_eta, real()),
                "master_seed" => set!(
                    cfg.master_seed,
                    value.parse::<u64>().map_err(|_| format!("`{value}` is not a u64"))
                ),
                "output_dir" => cfg.output_dir = PathBuf::from(value),
                "checkpoints" => set!(cfg.checkpoints, parse_bool(value)),
                "update_log" => set!(cfg.update_log, parse_bool(value)),
                "dataset" | "classes" | "per_class" | "input_dim" | "spread" | "idx_images"
                | "idx_labels" | "idx_limit" => {
                    ds.insert(
                        match key {
                            "dataset" => "dataset",
                            "classes" => "classes",
                            "per_class" => "per_class",
                            "input_dim" => "input_dim",
                            "spread" => "spread",
                            "idx_images" => "idx_images",
                            "idx_labels" => "idx_labels",
                            _ => "idx_limit",
                        },
                        (lineno, value),
                    );
                }
                _ => errors.push(format!("line {lineno}: unknown key `{key}`")),
            }
        }

        if let Some(a) = attacks {
            cfg.attacks = a;
        }
        cfg.dataset = Self::assemble_dataset(&ds, &mut errors);
        if let Err(Error::Config(mut more)) = cfg.validate() {
            errors.append(&mut more);
        }
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors))
        }
    }

    fn assemble_dataset(ds: &BTreeMap<&str, (usize, &str)>, errors: &mut Vec<String>) -> DatasetSpec {
        let kind = ds.get("dataset").map_or("synth", |(_, v)| *v);
        let mut int = |key: &str, default: usize| -> usize {
            match ds.get(key) {
                None => default,
                Some((line, v)) => v.parse().unwrap_or_else(|_| {
                    errors.push(format!("line {line}: `{key}`: `{v}` is not a non-negative integer"));
                    default
                }),
            }
        };
        let classes = int("classes", 10);
        match kind {
            "synth" => {
                let per_class = int("per_class", SYNTH_PER_CLASS);
                let input_dim = int("input_dim", SYNTH_INPUT_DIM);
                let spread = match ds.get("spread") {
                    None => SYNTH_SPREAD,
                    Some((line, v)) => v.parse().unwrap_or_else(|_| {
                        errors.push(format!("line {line}: `spread`: `{v}` is not a number"));
                        SYNTH_SPREAD
                    }),
                };
                for key in ["idx_images", "idx_labels", "idx_limit"] {
                    if let Some((line, _)) = ds.get(key) {
                        errors.push(format!("line {line}: `{key}` requires dataset = idx"));
                    }
                }
                DatasetSpec::Synth {
                    classes,
                    per_class,
                    input_dim,
                    spread,
                }
            }
            "idx" => {
                let limit = ds.get("idx_limit").map(|_| int("idx_limit", 0));
                let mut path = |key: &str| match ds.get(key) {
                    Some((_, v)) => PathBuf::from(v),
                    None => {
                        errors.push(format!("dataset = idx requires `{key}`"));
                        PathBuf::new()
                    }
                };
                DatasetSpec::Idx {
                    images: path("idx_images"),
                    labels: path("idx_labels"),
                    classes,
                    limit,
                }
            }
            other => {
                errors.push(format!("`dataset`: `{other}` is not synth|idx"));
                ExperimentConfig::default().dataset
            }
        }
    }

    /// Checks every range constraint, reporting all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut e = Vec::new();
        let classes = self.dataset.classes();
        if self.clients == 0 {
            e.push("clients must be at least 1".to_string());
        }
        if self.rounds == 0 {
            e.push("rounds must be at least 1".to_string());
        }
        if self.local_epochs == 0 {
            e.push("local_epochs must be at least 1".to_string());
        }
        if self.batch_size == 0 || self.server_batch_size == 0 {
            e.push("batch_size and server_batch_size must be at least 1".to_string());
        }
        for (name, v) in [("eta", self.eta), ("eta_g", self.eta_g), ("server_eta", self.server_eta)] {
            if !(v >= 0.0 && v.is_finite()) {
                e.push(format!("{name} must be a finite non-negative number"));
            }
        }
        for (name, v) in [
            ("temperature", self.temperature),
            ("teacher_temperature", self.teacher_temperature),
            ("dirichlet_alpha", self.dirichlet_alpha),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                e.push(format!("{name} must be positive"));
            }
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            e.push("alpha and beta must be non-negative".to_string());
        }
        if !self.epsilon_flag.is_finite() {
            e.push("epsilon_flag must be finite".to_string());
        }
        if !(self.participation_fraction > 0.0 && self.participation_fraction <= 1.0) {
            e.push("participation_fraction must be in (0, 1]".to_string());
        }
        if !(0.0..=1.0).contains(&self.legacy_threshold) {
            e.push("legacy_threshold must be in [0, 1]".to_string());
        }
        if self.n_public == 0 {
            e.push("n_public must be at least 1".to_string());
        }
        if self.n_test == 0 {
            e.push("n_test must be at least 1".to_string());
        }
        if classes < 2 {
            e.push("classes must be at least 2".to_string());
        }
        if let DatasetSpec::Synth {
            per_class,
            input_dim,
            spread,
            ..
        } = self.dataset
        {
            if per_class == 0 || input_dim == 0 {
                e.push("per_class and input_dim must be positive".to_string());
            }
            if !(spread > 0.0 && spread.is_finite()) {
                e.push("spread must be positive".to_string());
            }
            let total = classes * per_class;
            if self.n_public + self.n_test + self.clients * self.min_per_client > total {
                e.push(format!(
                    "n_public + n_test + clients * min_per_client exceeds the {total} synthetic samples"
                ));
            }
        }
        for (&id, profile) in &self.attacks {
            if id >= self.clients {
                e.push(format!("attacked client {id} is not below clients = {}", self.clients));
            }
            if let Err(err) = profile.validate(classes) {
                e.push(format!("attack on client {id}: {err}"));
            }
        }
        if self.attacks.values().all(|p| !p.is_benign()) && self.attacks.len() >= self.clients {
            e.push("at least one client must be honest".to_string());
        }
        if let Some(t) = self.asr_target {
            if t >= classes {
                e.push(format!("asr_target {t} is not below classes = {classes}"));
            }
        }
        if self.legacy_baseline {
            if self.legacy_keep_classes.is_empty() {
                e.push("legacy_keep_classes must be nonempty".to_string());
            }
            if let Some(c) = self.legacy_keep_classes.iter().find(|&&c| c >= classes) {
                e.push(format!("legacy_keep_classes entry {c} is not below classes = {classes}"));
            }
        }
        if !self.public_labels && self.warmup_epochs > 0 {
            e.push("public_labels = off requires warmup_epochs = 0 (warm-up trains on labels)".to_string());
        }
        if e.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(e))
        }
    }

    pub fn honest_clients(&self) -> BTreeSet<usize> {
        (0..self.clients)
            .filter(|id| self.attacks.get(id).is_none_or(|p| p.is_benign()))
            .collect()
    }

    pub fn profile(&self, id: usize) -> AttackProfile {
        self.attacks.get(&id).copied().unwrap_or_default()
    }

    pub fn asr_class(&self) -> usize {
        self.asr_target.unwrap_or_else(|| {
            self.attacks
                .values()
                .find_map(|p| match p {
                    AttackProfile::TargetedLogit { target, .. } => Some(*target),
                    _ => None,
                })
                .unwrap_or(0)
        })
    }

    /// Renders the config in the text format; `parse(to_text())` is the identity.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let b = |v: bool| if v { "on" } else { "off" };
        let _ = writeln!(s, "clients = {}", self.clients);
        let _ = writeln!(s, "rounds = {}", self.rounds);
        let _ = writeln!(s, "local_epochs = {}", self.local_epochs);
        let _ = writeln!(s, "eta = {:?}", self.eta);
        let _ = writeln!(s, "eta_g = {:?}", self.eta_g);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "server_batch_size = {}", self.server_batch_size);
        let _ = writeln!(s, "temperature = {:?}", self.temperature);
        let _ = writeln!(s, "teacher_temperature = {:?}", self.teacher_temperature);
        let _ = writeln!(s, "alpha = {:?}", self.alpha);
        let _ = writeln!(s, "beta = {:?}", self.beta);
        let _ = writeln!(s, "epsilon_flag = {:?}", self.epsilon_flag);
        let _ = writeln!(
            s,
            "delta_mode = {}",
            match self.delta_mode {
                DeltaMode::WithinRound => "within_round",
                DeltaMode::AcrossRounds => "across_rounds",
            }
        );
        let _ = writeln!(s, "shadow_detect = {}", b(self.shadow_detect));
        let _ = writeln!(s, "send_grad = {}", b(self.send_grad));
        let _ = writeln!(s, "public_labels = {}", b(self.public_labels));
        let _ = writeln!(
            s,
            "defense = {}",
            match self.defense {
                Defense::Rifle => "rifle",
                Defense::None => "none",
            }
        );
        let _ = writeln!(s, "n_public = {}", self.n_public);
        let _ = writeln!(s, "n_test = {}", self.n_test);
        let _ = writeln!(s, "dirichlet_alpha = {:?}", self.dirichlet_alpha);
        let _ = writeln!(s, "min_per_client = {}", self.min_per_client);
        let _ = writeln!(s, "partition_retries = {}", self.partition_retries);
        let _ = writeln!(s, "participation_fraction = {:?}", self.participation_fraction);
        for (id, p) in &self.attacks {
            let _ = writeln!(s, "attack = {}", format_attack(*id, p));
        }
        if self.attacks.is_empty() {
            // an explicit benign entry keeps the default attack list from returning
            let _ = writeln!(s, "attack = 0:benign");
        }
        if let Some(t) = self.asr_target {
            let _ = writeln!(s, "asr_target = {t}");
        }
        let _ = writeln!(s, "legacy_baseline = {}", b(self.legacy_baseline));
        let _ = writeln!(s, "legacy_threshold = {:?}", self.legacy_threshold);
        let _ = writeln!(s, "legacy_keep_classes = {}", join(self.legacy_keep_classes.iter().copied()));
        match &self.dataset {
            DatasetSpec::Synth {
                classes,
                per_class,
                input_dim,
                spread,
            } => {
                let _ = writeln!(s, "dataset = synth");
                let _ = writeln!(s, "classes = {classes}");
                let _ = writeln!(s, "per_class = {per_class}");
                let _ = writeln!(s, "input_dim = {input_dim}");
                let _ = writeln!(s, "spread = {spread:?}");
            }
            DatasetSpec::Idx {
                images,
                labels,
                classes,
                limit,
            } => {
                let _ = writeln!(s, "dataset = idx");
                let _ = writeln!(s, "classes = {classes}");
                let _ = writeln!(s, "idx_images = {}", images.display());
                let _ = writeln!(s, "idx_labels = {}", labels.display());
                if let Some(l) = limit {
                    let _ = writeln!(s, "idx_limit = {l}");
                }
            }
        }
        let _ = writeln!(s, "client_hidden = {}", join(self.client_hidden.iter().copied()));
        let _ = writeln!(s, "light_hidden = {}", join(self.light_hidden.iter().copied()));
        let _ = writeln!(s, "heavy_hidden = {}", join(self.heavy_hidden.iter().copied()));
        let _ = writeln!(s, "warmup_epochs = {}", self.warmup_epochs);
        let _ = writeln!(s, "distill_epochs = {}", self.distill_epochs);
        let _ = writeln!(s, "server_eta = {:?}", self.server_eta);
        let _ = writeln!(s, "master_seed = {}", self.master_seed);
        let _ = writeln!(s, "output_dir = {}", self.output_dir.display());
        let _ = writeln!(s, "checkpoints = {}", b(self.checkpoints));
        let _ = writeln!(s, "update_log = {}", b(self.update_log));
        s
    }
}
