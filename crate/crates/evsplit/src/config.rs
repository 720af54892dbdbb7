//! Experiment configuration: a flat `key = value` text format with defaults,
//! strict validation, and canonical serialization. Unknown keys are rejected
//! so nothing is ever silently ignored; flag overrides use the same
//! `key=value` grammar and win over the file.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Architecture;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: String,

    // dataset
    pub classes: usize,
    pub input_dim: usize,
    pub samples_per_class: usize,
    pub eval_samples_per_class: usize,
    pub class_separation: f64,
    pub noise_sigma: f64,

    // federation
    pub clients: usize,
    pub clients_per_round: usize,
    pub iid: bool,
    pub dirichlet_kappa: f64,
    pub rounds: u64,

    // record keeping
    pub ema_beta: f64,
    /// 0 disables TTL eviction.
    pub ttl_rounds: u64,
    pub epsilon: f64,

    // distillation
    pub distill_temperature: f64,
    pub lambda_c: f64,
    pub lambda_g: f64,

    // optimization
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Mini-batch passes per client per round; replicas drift apart within a
    /// round when this exceeds one.
    pub local_steps: usize,
    /// 0 means "use `rounds`" for the annealing horizon.
    pub anneal_rounds: u64,

    // module toggles
    pub enable_ea: bool,
    pub enable_bcc: bool,
    pub enable_dtd: bool,
    pub ea_use_evidence: bool,
    pub ea_use_ale: bool,
    pub ea_use_epi: bool,
    pub ea_ratio_participants_only: bool,
    pub shared_replica: bool,
    pub kdg_teacher_reference: bool,
    pub kdc_negate_distances: bool,
    pub dtd_probs_from_logits: bool,

    // architecture
    pub client_layers: usize,
    pub hidden_dim: usize,
    pub processor_layers: usize,
    pub aux_hidden_dim: usize,

    // reporting
    pub rta_targets: Vec<f64>,
    pub critical_classes: Vec<usize>,
    pub bias_gmax: f64,
    /// Real wall-clock measurement is opt-in because measured time is
    /// inherently nondeterministic; with it off every timing field is 0 and
    /// outputs are byte-reproducible.
    pub measure_wall_clock: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: "runs".into(),
            classes: 3,
            input_dim: 8,
            samples_per_class: 200,
            eval_samples_per_class: 100,
            class_separation: 4.0,
            noise_sigma: 1.0,
            clients: 8,
            clients_per_round: 8,
            iid: false,
            dirichlet_kappa: 0.1,
            rounds: 60,
            ema_beta: 0.9,
            ttl_rounds: 10,
            epsilon: 1e-8,
            distill_temperature: 5.0,
            lambda_c: 0.2,
            lambda_g: 0.3,
            learning_rate: 1e-4,
            batch_size: 32,
            local_steps: 1,
            anneal_rounds: 0,
            enable_ea: true,
            enable_bcc: true,
            enable_dtd: true,
            ea_use_evidence: true,
            ea_use_ale: true,
            ea_use_epi: true,
            ea_ratio_participants_only: true,
            shared_replica: false,
            kdg_teacher_reference: true,
            kdc_negate_distances: false,
            dtd_probs_from_logits: false,
            client_layers: 1,
            hidden_dim: 16,
            processor_layers: 0,
            aux_hidden_dim: 8,
            rta_targets: vec![0.5, 0.7, 0.9],
            critical_classes: Vec::new(),
            bias_gmax: 1.0,
            measure_wall_clock: false,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected a boolean, got `{v}`"
        ))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str, kind: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected {kind}, got `{v}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str, kind: &str) -> Result<Vec<T>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|item| parse_num(key, item.trim(), kind))
        .collect()
}

fn fmt_list<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

macro_rules! config_keys {
    ($($key:ident : $kind:tt),+ $(,)?) => {
        /// Every recognized key, in canonical order.
        pub const KEYS: &[&str] = &[$(stringify!($key)),+];

        impl ExperimentConfig {
            /// Applies one `key = value` assignment.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($key) => {
                        self.$key = config_keys!(@parse $kind, key, value)?;
                        Ok(())
                    })+
                    _ => Err(Error::Config(format!("unknown configuration key `{key}`"))),
                }
            }

            fn value_string(&self, key: &str) -> String {
                match key {
                    $(stringify!($key) => config_keys!(@show $kind, &self.$key),)+
                    _ => unreachable!("key list is exhaustive"),
                }
            }
        }
    };
    (@parse bool, $key:ident, $v:ident) => { parse_bool($key, $v) };
    (@parse u64, $key:ident, $v:ident) => { parse_num::<u64>($key, $v, "an integer") };
    (@parse usize, $key:ident, $v:ident) => { parse_num::<usize>($key, $v, "an integer") };
    (@parse f64, $key:ident, $v:ident) => { parse_num::<f64>($key, $v, "a number") };
    (@parse string, $key:ident, $v:ident) => { Ok::<String, Error>($v.to_string()) };
    (@parse list_f64, $key:ident, $v:ident) => { parse_list::<f64>($key, $v, "a number") };
    (@parse list_usize, $key:ident, $v:ident) => { parse_list::<usize>($key, $v, "an integer") };
    (@show bool, $v:expr) => { $v.to_string() };
    (@show u64, $v:expr) => { $v.to_string() };
    (@show usize, $v:expr) => { $v.to_string() };
    (@show f64, $v:expr) => { $v.to_string() };
    (@show string, $v:expr) => { $v.to_string() };
    (@show list_f64, $v:expr) => { fmt_list($v) };
    (@show list_usize, $v:expr) => { fmt_list($v) };
}

config_keys! {
    seed: u64,
    output_dir: string,
    classes: usize,
    input_dim: usize,
    samples_per_class: usize,
    eval_samples_per_class: usize,
    class_separation: f64,
    noise_sigma: f64,
    clients: usize,
    clients_per_round: usize,
    iid: bool,
    dirichlet_kappa: f64,
    rounds: u64,
    ema_beta: f64,
    ttl_rounds: u64,
    epsilon: f64,
    distill_temperature: f64,
    lambda_c: f64,
    lambda_g: f64,
    learning_rate: f64,
    batch_size: usize,
    local_steps: usize,
    anneal_rounds: u64,
    enable_ea: bool,
    enable_bcc: bool,
    enable_dtd: bool,
    ea_use_evidence: bool,
    ea_use_ale: bool,
    ea_use_epi: bool,
    ea_ratio_participants_only: bool,
    shared_replica: bool,
    kdg_teacher_reference: bool,
    kdc_negate_distances: bool,
    dtd_probs_from_logits: bool,
    client_layers: usize,
    hidden_dim: usize,
    processor_layers: usize,
    aux_hidden_dim: usize,
    rta_targets: list_f64,
    critical_classes: list_usize,
    bias_gmax: f64,
    measure_wall_clock: bool,
}

impl ExperimentConfig {
    /// Parses the flat text format, then applies overrides, then validates.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        for (key, value) in overrides {
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, overrides)
    }

    /// Canonical text form; `parse(serialize(c))` reproduces `c` exactly.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.value_string(key));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, bound: &str| -> Result<()> {
            Err(Error::Config(format!("{field}: must be {bound}")))
        };
        if self.classes < 2 {
            return fail("classes", "at least 2");
        }
        if self.input_dim == 0 {
            return fail("input_dim", "at least 1");
        }
        if self.samples_per_class == 0 {
            return fail("samples_per_class", "at least 1");
        }
        if self.eval_samples_per_class == 0 {
            return fail("eval_samples_per_class", "at least 1");
        }
        if !(self.class_separation > 0.0) {
            return fail("class_separation", "positive");
        }
        if !(self.noise_sigma >= 0.0) {
            return fail("noise_sigma", "nonnegative");
        }
        if self.clients == 0 {
            return fail("clients", "at least 1");
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.clients {
            return fail("clients_per_round", "in 1..=clients");
        }
        if !(self.dirichlet_kappa > 0.0) {
            return fail("dirichlet_kappa", "positive");
        }
        if self.rounds == 0 {
            return fail("rounds", "at least 1");
        }
        if !(self.ema_beta > 0.0 && self.ema_beta < 1.0) {
            return fail("ema_beta", "strictly inside (0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return fail("epsilon", "positive");
        }
        if !(self.distill_temperature > 0.0) {
            return fail("distill_temperature", "positive");
        }
        if !(self.lambda_c >= 0.0) {
            return fail("lambda_c", "nonnegative");
        }
        if !(self.lambda_g >= 0.0) {
            return fail("lambda_g", "nonnegative");
        }
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate", "positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size", "at least 1");
        }
        if self.local_steps == 0 {
            return fail("local_steps", "at least 1");
        }
        if self.client_layers == 0 {
            return fail("client_layers", "at least 1");
        }
        if self.hidden_dim == 0 {
            return fail("hidden_dim", "at least 1");
        }
        if self.aux_hidden_dim == 0 {
            return fail("aux_hidden_dim", "at least 1");
        }
        if self.rta_targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return fail("rta_targets", "each within [0, 1]");
        }
        if self.critical_classes.iter().any(|&c| c >= self.classes) {
            return fail("critical_classes", "each below `classes`");
        }
        if !(self.bias_gmax > 0.0) {
            return fail("bias_gmax", "positive");
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.input_dim,
            num_classes: self.classes,
            client_layers: self.client_layers,
            hidden_dim: self.hidden_dim,
            processor_layers: self.processor_layers,
            aux_hidden_dim: self.aux_hidden_dim,
        }
    }

    /// The annealing horizon: `anneal_rounds`, or the round budget when 0.
    pub fn anneal_horizon(&self) -> u64 {
        if self.anneal_rounds == 0 {
            self.rounds
        } else {
            self.anneal_rounds
        }
    }

    pub fn ttl(&self) -> Option<u64> {
        if self.ttl_rounds == 0 {
            None
        } else {
            Some(self.ttl_rounds)
        }
    }
}
