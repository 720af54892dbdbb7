//! Round orchestration: split forward/backward with gradient routing, state
//! record upkeep, evidential weighting, complementary-pair transfers,
//! distillation steps, weighted aggregation, metrics, and the two theory
//! diagnostics (weighted label-skew bound and the convergence bound).
//!
//! Rounds are sequential; within a round every per-client collection is
//! processed in ascending client id so identical configurations replay
//! bit for bit.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::aggregation::{aggregate_params, client_weights, evidence_concentration};
use crate::config::ExperimentConfig;
use crate::csr::{normalize, record_batch, sample_stat, ClientStateRecord, CsrStore, SampleStat};
use crate::data::{dirichlet_partition, iid_partition, synth_dataset, Dataset, Partition};
use crate::distill::{dtd_step, DistillConfig, DtdTeachers, GlobalTeacher};
use crate::edl::{
    aleatoric_uncertainty, alpha_from_evidence, epistemic_uncertainty, evidential_loss_grad,
    AnnealingSchedule,
};
use crate::error::{Error, Result};
use crate::nn::{
    backward, backward_server, forward, forward_client, forward_server, sgd_step,
    softplus_evidence, Batch, LayerStack, SplitModel, StackGrads,
};
use crate::transfer::{
    apply_mass_transfer, apply_transfer, biased_set, build_transfer_plan, edge_weight,
    greedy_match, js_divergence, ComplementarityGraph, LabelDistribution, ReplicaRefs,
    TransferPlan,
};

// sub-stream tags for deriving independent seeds from the base seed
const SEED_TRAIN: u64 = 0x74726169;
const SEED_EVAL: u64 = 0x6576616c;
const SEED_PARTITION: u64 = 0x70617274;
const SEED_MODEL: u64 = 0x6d6f6465;
const SEED_SAMPLING: u64 = 0x73616d70;
const SEED_SHUFFLE: u64 = 0x73687566;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base.wrapping_add(tag)).wrapping_add(index))
}

/// Uniform sample of `per_round` distinct client ids, deterministic per
/// (seed, round), returned in ascending order.
pub fn sample_clients(total: usize, per_round: usize, seed: u64, round: u64) -> Result<Vec<usize>> {
    if per_round == 0 || per_round > total {
        return Err(Error::Config(format!(
            "clients per round must lie in 1..={total}, got {per_round}"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, SEED_SAMPLING, round));
    let mut ids: Vec<usize> = (0..total).collect();
    // partial Fisher-Yates
    for i in 0..per_round {
        let j = rng.random_range(i..total);
        ids.swap(i, j);
    }
    let mut chosen = ids[..per_round].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Accuracy plus the critical-misclassification rate: the fraction of
/// critical-class samples predicted as any non-critical class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub critical_rate: f64,
    /// Set when the critical set is empty (or absent from the eval data), in
    /// which case the rate is reported as 0.
    pub critical_undefined: bool,
}

fn predict(
    client_side: &LayerStack,
    processor: &LayerStack,
    head: &LayerStack,
    inputs: &Array2<f64>,
) -> Result<Vec<usize>> {
    let (smashed, _) = forward(client_side, &inputs.view())?;
    let (logits, _) = forward_server(processor, head, &smashed.view())?;
    Ok(logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = (f64::NEG_INFINITY, 0usize);
            for (c, &v) in row.iter().enumerate() {
                if v > best.0 {
                    best = (v, c);
                }
            }
            best.1
        })
        .collect())
}

/// Evaluates a (client, processor, head) pipeline on a labeled dataset.
pub fn compute_metrics(
    client_side: &LayerStack,
    processor: &LayerStack,
    head: &LayerStack,
    eval: &Dataset,
    critical_classes: &[usize],
) -> Result<Metrics> {
    if eval.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let predictions = predict(client_side, processor, head, &eval.inputs)?;
    let correct = predictions
        .iter()
        .zip(&eval.labels)
        .filter(|(p, l)| p == l)
        .count();
    let accuracy = correct as f64 / eval.len() as f64;
    let is_critical = |c: usize| critical_classes.contains(&c);
    let critical_total = eval.labels.iter().filter(|&&l| is_critical(l)).count();
    if critical_classes.is_empty() || critical_total == 0 {
        return Ok(Metrics {
            accuracy,
            critical_rate: 0.0,
            critical_undefined: true,
        });
    }
    let escaped = predictions
        .iter()
        .zip(&eval.labels)
        .filter(|(p, l)| is_critical(**l) && !is_critical(**p))
        .count();
    Ok(Metrics {
        accuracy,
        critical_rate: escaped as f64 / critical_total as f64,
        critical_undefined: false,
    })
}

/// First 1-indexed round whose accuracy reaches the target.
pub fn rta(accuracy_history: &[f64], target: f64) -> Option<usize> {
    accuracy_history
        .iter()
        .position(|&a| a >= target)
        .map(|i| i + 1)
}

/// Weighted label-skew bound `g_max · Σ_k w_k ‖P_k − P_g‖₁`.
pub fn delta_bcc_estimate(
    weights: &[f64],
    distributions: &[LabelDistribution],
    global: &LabelDistribution,
    g_max: f64,
) -> f64 {
    debug_assert_eq!(weights.len(), distributions.len());
    let mut acc = 0.0;
    for (w, p) in weights.iter().zip(distributions) {
        let l1: f64 = p
            .probs()
            .iter()
            .zip(global.probs().iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        acc += w * l1;
    }
    g_max * acc
}

/// Convergence-bound value after `t` rounds. With the default proof
/// constants: `4(L₀−L*)/(ηT) + 3δ² + 2Lησ²`; the alternative statement
/// constants replace the tail with `4δ² + 4Lησ²`. Requires `η ≤ 1/(4L)`.
#[allow(clippy::too_many_arguments)]
pub fn convergence_bound(
    initial_loss: f64,
    optimal_loss: f64,
    eta: f64,
    rounds: u64,
    delta: f64,
    l_smooth: f64,
    sigma: f64,
    statement_constants: bool,
) -> Result<f64> {
    if !(l_smooth > 0.0) || !(eta > 0.0) {
        return Err(Error::Domain(
            "smoothness and step size must be positive".into(),
        ));
    }
    if eta > 1.0 / (4.0 * l_smooth) {
        return Err(Error::Domain(format!(
            "step size {eta} violates eta <= 1/(4L) = {}",
            1.0 / (4.0 * l_smooth)
        )));
    }
    if rounds == 0 {
        return Err(Error::Domain("need at least one round".into()));
    }
    let head = 4.0 * (initial_loss - optimal_loss) / (eta * rounds as f64);
    let tail = if statement_constants {
        4.0 * delta * delta + 4.0 * l_smooth * eta * sigma * sigma
    } else {
        3.0 * delta * delta + 2.0 * l_smooth * eta * sigma * sigma
    };
    Ok(head + tail)
}

/// One matched pair's summary for the round log.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSummary {
    pub a: usize,
    pub b: usize,
    pub gain: f64,
    pub ratios_ab: Vec<(usize, f64)>,
    pub ratios_ba: Vec<(usize, f64)>,
}

/// Everything the per-round CSV row and the summary need.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: u64,
    /// One weight per registered client; zero for non-participants.
    pub weights: Vec<f64>,
    pub task_loss: f64,
    pub kd_client_loss: f64,
    pub kd_global_loss: f64,
    pub global_accuracy: f64,
    pub aux_accuracy: f64,
    pub critical_rate: f64,
    pub biased_clients: Vec<usize>,
    pub matching: Vec<PairSummary>,
    pub skew_pre: f64,
    pub skew_post: f64,
    pub wall_clock_ms: f64,
}

#[derive(Debug, Clone)]
struct ClientRuntime {
    model: SplitModel,
    /// Local sample indices in draw order; batches cycle through it.
    order: Vec<usize>,
    cursor: usize,
}

impl ClientRuntime {
    fn next_batch(&mut self, data: &Dataset, batch_size: usize) -> Option<Batch> {
        if self.order.is_empty() {
            return None;
        }
        let take = batch_size.min(self.order.len());
        let mut rows = Vec::with_capacity(take);
        for step in 0..take {
            rows.push(self.order[(self.cursor + step) % self.order.len()]);
        }
        self.cursor = (self.cursor + take) % self.order.len();
        let inputs = data.inputs.select(Axis(0), &rows);
        let labels = rows.iter().map(|&r| data.labels[r]).collect();
        Some(Batch::new(inputs, labels, data.num_classes).expect("batch built from valid rows"))
    }
}

/// Full experiment state: datasets, partition, the global model, per-client
/// models, the record store, and the round counter.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub train: Dataset,
    pub eval: Dataset,
    pub partition: Partition,
    pub global: SplitModel,
    clients: Vec<ClientRuntime>,
    pub store: CsrStore,
    pub rounds_done: u64,
    prev_weights: Vec<Option<f64>>,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let train = synth_dataset(
            cfg.classes,
            cfg.input_dim,
            cfg.samples_per_class,
            cfg.class_separation,
            cfg.noise_sigma,
            derive_seed(cfg.seed, SEED_TRAIN, 0),
        )?;
        let eval = synth_dataset(
            cfg.classes,
            cfg.input_dim,
            cfg.eval_samples_per_class,
            cfg.class_separation,
            cfg.noise_sigma,
            derive_seed(cfg.seed, SEED_EVAL, 0),
        )?;
        let partition = if cfg.iid {
            iid_partition(
                &train.labels,
                cfg.clients,
                derive_seed(cfg.seed, SEED_PARTITION, 0),
            )?
        } else {
            dirichlet_partition(
                &train.labels,
                cfg.clients,
                cfg.dirichlet_kappa,
                derive_seed(cfg.seed, SEED_PARTITION, 0),
            )?
        };
        let global = SplitModel::init(&cfg.architecture(), derive_seed(cfg.seed, SEED_MODEL, 0))?;
        let clients = (0..cfg.clients)
            .map(|c| {
                let mut order = partition.assignment[c].clone();
                let mut rng =
                    ChaCha20Rng::seed_from_u64(derive_seed(cfg.seed, SEED_SHUFFLE, c as u64));
                order.shuffle(&mut rng);
                ClientRuntime {
                    model: global.clone(),
                    order,
                    cursor: 0,
                }
            })
            .collect();
        let store = CsrStore::new(cfg.ema_beta, cfg.ttl())?;
        let prev_weights = vec![None; cfg.clients];
        Ok(Self {
            cfg,
            train,
            eval,
            partition,
            global,
            clients,
            store,
            rounds_done: 0,
            prev_weights,
        })
    }

    fn schedule(&self, round: u64) -> AnnealingSchedule {
        AnnealingSchedule::new(round, self.cfg.anneal_horizon()).expect("validated horizon")
    }

    /// Label distribution the pairing logic uses for one client, read from
    /// the record store.
    fn stored_distribution(&self, client: usize) -> Option<LabelDistribution> {
        self.store
            .get(client)
            .and_then(|r| LabelDistribution::from_counts(&r.counts.view()))
    }

    /// Executes one communication round and reports it.
    ///
    /// A round broadcasts the global model to the sampled participants, then
    /// makes `local_steps` mini-batch passes. Each pass records evidence
    /// statistics into the store, runs the pairing logic over the batches
    /// present, routes transferred smashed rows through partner replicas, and
    /// applies SGD; replicas drift apart between passes. Aggregation with the
    /// evidential weights closes the round.
    pub fn run_round(&mut self) -> Result<RoundReport> {
        let started = Instant::now();
        let round = self.rounds_done + 1;
        let cfg_clients = self.cfg.clients;
        let schedule = self.schedule(round);
        let num_classes = self.cfg.classes;

        let sampled = sample_clients(
            cfg_clients,
            self.cfg.clients_per_round,
            self.cfg.seed,
            round,
        )?;
        // clients without any local data sit the round out
        let participants: Vec<usize> = sampled
            .into_iter()
            .filter(|&c| !self.clients[c].order.is_empty())
            .collect();

        // the previous round's aggregate serves as the distillation teacher;
        // in the very first round no aggregate exists yet
        let global_teacher = if self.cfg.enable_dtd && round > 1 {
            Some(self.global.clone())
        } else {
            None
        };

        if participants.is_empty() {
            let metrics = compute_metrics(
                &self.global.client_side,
                &self.global.server_processor,
                &self.global.server_head,
                &self.eval,
                &self.cfg.critical_classes,
            )?;
            self.rounds_done = round;
            self.prev_weights = vec![None; cfg_clients];
            return Ok(RoundReport {
                round,
                weights: vec![0.0; cfg_clients],
                task_loss: 0.0,
                kd_client_loss: 0.0,
                kd_global_loss: 0.0,
                global_accuracy: metrics.accuracy,
                aux_accuracy: 0.0,
                critical_rate: metrics.critical_rate,
                biased_clients: Vec::new(),
                matching: Vec::new(),
                skew_pre: 0.0,
                skew_post: 0.0,
                wall_clock_ms: elapsed_ms(&started, self.cfg.measure_wall_clock),
            });
        }

        // broadcast the current global to this round's participants
        for &c in &participants {
            let client = &mut self.clients[c];
            client.model.client_side = self.global.client_side.clone();
            client.model.server_processor = self.global.server_processor.clone();
            client.model.server_head = self.global.server_head.clone();
        }

        let distill_cfg = if self.cfg.enable_dtd {
            let mut dc = DistillConfig::new(
                self.cfg.distill_temperature,
                self.cfg.lambda_c,
                self.cfg.lambda_g,
            )?;
            dc.teacher_reference = self.cfg.kdg_teacher_reference;
            dc.negate_distances = self.cfg.kdc_negate_distances;
            dc.probs_from_logits = self.cfg.dtd_probs_from_logits;
            Some(dc)
        } else {
            None
        };

        let lr = self.cfg.learning_rate;
        let k = participants.len();
        let mut weights_active = vec![1.0 / k as f64; k];
        let mut total_loss = 0.0;
        let mut total_samples = 0usize;
        let mut kd_client_sum = 0.0;
        let mut kd_global_sum = 0.0;
        let mut kd_passes = 0usize;
        let mut last_biased: Vec<usize> = Vec::new();
        let mut last_matching: Vec<PairSummary> = Vec::new();
        let mut last_skew = (0.0, 0.0);

        struct Pass {
            batch: Batch,
            smashed: Array2<f64>,
            client_cache: crate::nn::ForwardCache,
            logits: Array2<f64>,
            server_cache: crate::nn::ServerCache,
        }

        for _step in 0..self.cfg.local_steps {
            // forward passes, evidence statistics, record merging
            let mut passes: BTreeMap<usize, Pass> = BTreeMap::new();
            for &c in &participants {
                let batch = self.clients[c]
                    .next_batch(&self.train, self.cfg.batch_size)
                    .expect("participants have data");
                let model = &self.clients[c].model;
                let (smashed, client_cache) = forward_client(&model.client_side, &batch)?;
                let (logits, server_cache) =
                    forward_server(&model.server_processor, &model.server_head, &smashed.view())?;
                let evidence = softplus_evidence(&logits.view());
                let mut fresh = ClientStateRecord::empty(num_classes, round);
                let mut stats: Vec<SampleStat> = Vec::with_capacity(batch.len());
                for (row, &label) in batch.labels.iter().enumerate() {
                    let d = alpha_from_evidence(&evidence.row(row))?;
                    let u_ale = aleatoric_uncertainty(&d.alpha.view())?;
                    let u_epi = epistemic_uncertainty(&d.alpha.view())?;
                    stats.push(sample_stat(label, evidence.row(row), u_ale, u_epi));
                }
                record_batch(&mut fresh, &stats)?;
                self.store.merge(c, fresh, round)?;
                passes.insert(
                    c,
                    Pass {
                        batch,
                        smashed,
                        client_cache,
                        logits,
                        server_cache,
                    },
                );
            }
            self.store.evict_stale(round);

            // evidential weighting over the participants (uniform when
            // disabled); negative epistemic sums can flip a score's sign, so
            // scores are floored at zero before normalization
            weights_active = if self.cfg.enable_ea {
                let normalized: Vec<_> = participants
                    .iter()
                    .map(|&c| normalize(self.store.get(c).expect("merged this round")))
                    .collect();
                let eps = self.cfg.epsilon;
                let q: Vec<f64> = normalized
                    .iter()
                    .map(|r| {
                        if self.cfg.ea_use_evidence {
                            evidence_concentration(&r.evidence.view(), eps)
                        } else {
                            1.0
                        }
                    })
                    .collect();
                let scoped_total = |own: &dyn Fn(&crate::csr::NormalizedRecord) -> f64| -> f64 {
                    if self.cfg.ea_ratio_participants_only {
                        normalized.iter().map(|r| own(r)).sum()
                    } else {
                        self.store
                            .client_ids()
                            .collect::<Vec<_>>()
                            .iter()
                            .map(|&c| own(&normalize(self.store.get(c).unwrap())))
                            .sum()
                    }
                };
                let ale_own = |r: &crate::csr::NormalizedRecord| r.aleatoric.sum();
                let epi_own = |r: &crate::csr::NormalizedRecord| r.epistemic.sum();
                let total_ale = scoped_total(&ale_own);
                let total_epi = scoped_total(&epi_own);
                let r_ale: Vec<f64> = normalized
                    .iter()
                    .map(|r| {
                        if self.cfg.ea_use_ale {
                            total_ale / (ale_own(r) + eps)
                        } else {
                            1.0
                        }
                    })
                    .collect();
                let r_epi: Vec<f64> = normalized
                    .iter()
                    .map(|r| {
                        if self.cfg.ea_use_epi {
                            total_epi / (epi_own(r) + eps)
                        } else {
                            1.0
                        }
                    })
                    .collect();
                let q_floored: Vec<f64> = (0..k)
                    .map(|i| (q[i] * r_ale[i] * r_epi[i]).max(0.0))
                    .collect();
                client_weights(&q_floored, &vec![1.0; k], &vec![1.0; k])?
            } else {
                vec![1.0 / k as f64; k]
            };

            // pairing and transfer planning on stored label distributions;
            // ratios use the previous round's weights
            let mut plans: Vec<TransferPlan> = Vec::new();
            let mut pair_summaries: Vec<PairSummary> = Vec::new();
            let mut biased: Vec<usize> = Vec::new();
            let mut skew_pre = 0.0;
            let mut skew_post = 0.0;
            let dists: Vec<(usize, LabelDistribution)> = participants
                .iter()
                .filter_map(|&c| self.stored_distribution(c).map(|d| (c, d)))
                .collect();
            if !dists.is_empty() {
                // the EMA-maintained store is the persistent approximation of
                // the global label distribution, so the mixture runs over
                // every stored record, not only this round's participants
                let mut mixture = Array1::<f64>::zeros(num_classes);
                let stored: Vec<usize> = self.store.client_ids().collect();
                for c in stored {
                    if let Some(r) = self.store.get(c) {
                        mixture += &r.counts;
                    }
                }
                if let Some(p_g) = LabelDistribution::from_counts(&mixture.view()) {
                    let planning_weight =
                        |c: usize| -> f64 { self.prev_weights[c].unwrap_or(1.0 / k as f64) };
                    let skew_weights: Vec<f64> =
                        dists.iter().map(|(c, _)| planning_weight(*c)).collect();
                    let dist_refs: Vec<LabelDistribution> =
                        dists.iter().map(|(_, d)| d.clone()).collect();
                    skew_pre =
                        delta_bcc_estimate(&skew_weights, &dist_refs, &p_g, self.cfg.bias_gmax);
                    skew_post = skew_pre;
                    if self.cfg.enable_bcc && dists.len() >= 2 {
                        let mut divergences = Vec::with_capacity(dists.len());
                        for (c, d) in &dists {
                            divergences.push((*c, js_divergence(&d.view(), &p_g.view())?));
                        }
                        biased = biased_set(&divergences);
                        let by_id: BTreeMap<usize, &LabelDistribution> =
                            dists.iter().map(|(c, d)| (*c, d)).collect();
                        let nodes: Vec<(usize, &LabelDistribution)> =
                            biased.iter().map(|&c| (c, by_id[&c])).collect();
                        let graph = ComplementarityGraph::build(&nodes, &p_g);
                        let matching = greedy_match(&graph);
                        let mut post_dists: BTreeMap<usize, Array1<f64>> = BTreeMap::new();
                        for &(i, j) in &matching {
                            let (p_i, p_j) = (by_id[&i], by_id[&j]);
                            let (w_i, w_j) = (planning_weight(i), planning_weight(j));
                            let plan = build_transfer_plan(
                                (i, j),
                                p_i,
                                p_j,
                                &p_g,
                                w_i,
                                w_j,
                                &passes[&i].batch.labels,
                                &passes[&j].batch.labels,
                            );
                            pair_summaries.push(PairSummary {
                                a: i,
                                b: j,
                                gain: edge_weight(p_i, p_j, &p_g),
                                ratios_ab: plan.ratios_i_to_j.clone(),
                                ratios_ba: plan.ratios_j_to_i.clone(),
                            });
                            let (hat_i, hat_j) = apply_mass_transfer(p_i, p_j, &p_g, w_i, w_j);
                            post_dists.insert(i, hat_i);
                            post_dists.insert(j, hat_j);
                            plans.push(plan);
                        }
                        skew_post = 0.0;
                        for ((c, d), w) in dists.iter().zip(&skew_weights) {
                            let deviation: f64 = match post_dists.get(c) {
                                Some(hat) => hat
                                    .iter()
                                    .zip(p_g.probs().iter())
                                    .map(|(a, b)| (a - b).abs())
                                    .sum(),
                                None => d
                                    .probs()
                                    .iter()
                                    .zip(p_g.probs().iter())
                                    .map(|(a, b)| (a - b).abs())
                                    .sum(),
                            };
                            skew_post += w * deviation;
                        }
                        skew_post *= self.cfg.bias_gmax;
                    }
                }
            }
            last_biased = biased;
            last_matching = pair_summaries;
            last_skew = (skew_pre, skew_post);

            // per-client backward on the own replica, with transferred rows
            // muted; their gradients arrive through the partner pass below
            let mut transferred_rows: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for plan in &plans {
                transferred_rows
                    .entry(plan.pair.0)
                    .or_default()
                    .extend(plan.selected_i_to_j.iter().copied());
                transferred_rows
                    .entry(plan.pair.1)
                    .or_default()
                    .extend(plan.selected_j_to_i.iter().copied());
            }
            struct Backprop {
                server_grads: (StackGrads, StackGrads),
                smashed_grad: Array2<f64>,
                loss_sum: f64,
                batch_len: usize,
            }
            let mut backprops: BTreeMap<usize, Backprop> = BTreeMap::new();
            for &c in &participants {
                let pass = &passes[&c];
                let muted = transferred_rows.get(&c).cloned().unwrap_or_default();
                let b = pass.batch.len();
                let inv_b = 1.0 / b as f64;
                let mut dlogits = Array2::zeros(pass.logits.dim());
                let mut loss_sum = 0.0;
                for (row, &label) in pass.batch.labels.iter().enumerate() {
                    if muted.contains(&row) {
                        continue;
                    }
                    let mut y = Array1::zeros(num_classes);
                    y[label] = 1.0;
                    let (loss, grad) =
                        evidential_loss_grad(&pass.logits.row(row), &y.view(), &schedule)?;
                    loss_sum += loss;
                    dlogits.row_mut(row).assign(&(&grad * inv_b));
                }
                let model = &self.clients[c].model;
                let (proc_grads, head_grads, smashed_grad) = backward_server(
                    &model.server_processor,
                    &model.server_head,
                    &pass.server_cache,
                    &dlogits.view(),
                )?;
                backprops.insert(
                    c,
                    Backprop {
                        server_grads: (proc_grads, head_grads),
                        smashed_grad,
                        loss_sum,
                        batch_len: b,
                    },
                );
            }

            // partner-replica passes for the planned transfers
            for plan in &plans {
                let (i, j) = plan.pair;
                let (model_i, model_j) = (&self.clients[i].model, &self.clients[j].model);
                let (pass_i, pass_j) = (&passes[&i], &passes[&j]);
                let outcome = apply_transfer(
                    plan,
                    ReplicaRefs {
                        processor: &model_i.server_processor,
                        head: &model_i.server_head,
                    },
                    ReplicaRefs {
                        processor: &model_j.server_processor,
                        head: &model_j.server_head,
                    },
                    &pass_i.smashed.view(),
                    &pass_i.batch.labels,
                    &pass_j.smashed.view(),
                    &pass_j.batch.labels,
                    &schedule,
                    num_classes,
                    1.0 / pass_i.batch.len() as f64,
                    1.0 / pass_j.batch.len() as f64,
                )?;
                if let Some((proc, head)) = outcome.grads_replica_i {
                    let bp = backprops.get_mut(&i).expect("participant");
                    bp.server_grads.0.add_assign(&proc);
                    bp.server_grads.1.add_assign(&head);
                }
                if let Some((proc, head)) = outcome.grads_replica_j {
                    let bp = backprops.get_mut(&j).expect("participant");
                    bp.server_grads.0.add_assign(&proc);
                    bp.server_grads.1.add_assign(&head);
                }
                {
                    let bp = backprops.get_mut(&i).expect("participant");
                    for (row, grad) in &outcome.smashed_grads_i {
                        bp.smashed_grad.row_mut(*row).assign(grad);
                    }
                    bp.loss_sum += outcome.loss_i;
                }
                {
                    let bp = backprops.get_mut(&j).expect("participant");
                    for (row, grad) in &outcome.smashed_grads_j {
                        bp.smashed_grad.row_mut(*row).assign(grad);
                    }
                    bp.loss_sum += outcome.loss_j;
                }
            }

            // apply the SGD updates in ascending client order
            if self.cfg.shared_replica {
                // single server copy: fold every client's server gradient
                // into the weighted sum and update the global server parts
                // once per pass
                let mut proc_total = StackGrads::zeros_like(&self.global.server_processor);
                let mut head_total = StackGrads::zeros_like(&self.global.server_head);
                for (slot, &c) in participants.iter().enumerate() {
                    let bp = backprops.get_mut(&c).expect("participant");
                    let w = weights_active[slot];
                    bp.server_grads.0.scale(w);
                    bp.server_grads.1.scale(w);
                    proc_total.add_assign(&bp.server_grads.0);
                    head_total.add_assign(&bp.server_grads.1);
                }
                sgd_step(&mut self.global.server_processor, &proc_total, lr);
                sgd_step(&mut self.global.server_head, &head_total, lr);
                for &c in &participants {
                    let client = &mut self.clients[c];
                    client.model.server_processor = self.global.server_processor.clone();
                    client.model.server_head = self.global.server_head.clone();
                }
            }
            for &c in &participants {
                let bp = &backprops[&c];
                let (client_grads, _) = backward(
                    &self.clients[c].model.client_side,
                    &passes[&c].client_cache,
                    &bp.smashed_grad.view(),
                )?;
                let model = &mut self.clients[c].model;
                sgd_step(&mut model.client_side, &client_grads, lr);
                if !self.cfg.shared_replica {
                    sgd_step(&mut model.server_processor, &bp.server_grads.0, lr);
                    sgd_step(&mut model.server_head, &bp.server_grads.1, lr);
                }
                total_loss += bp.loss_sum;
                total_samples += bp.batch_len;
            }

            // distillation steps against frozen teachers (the round-start
            // client side equals the broadcast global client side)
            if let Some(dc) = &distill_cfg {
                for &c in &participants {
                    let teachers = DtdTeachers {
                        client_extractor: &self.global.client_side,
                        global: global_teacher.as_ref().map(|g| GlobalTeacher {
                            client_side: &g.client_side,
                            processor: &g.server_processor,
                            head: &g.server_head,
                        }),
                    };
                    let model = &mut self.clients[c].model;
                    let losses = dtd_step(
                        &mut model.auxiliary_extractor,
                        &mut model.auxiliary_head,
                        &teachers,
                        &passes[&c].batch,
                        dc,
                        &schedule,
                        lr,
                    )?;
                    kd_client_sum += losses.kd_client;
                    kd_global_sum += losses.kd_global;
                    kd_passes += 1;
                }
            }
        }

        // weighted aggregation of both model halves
        let client_stacks: Vec<&LayerStack> = participants
            .iter()
            .map(|&c| &self.clients[c].model.client_side)
            .collect();
        self.global.client_side = aggregate_params(&client_stacks, &weights_active)?;
        if !self.cfg.shared_replica {
            let procs: Vec<&LayerStack> = participants
                .iter()
                .map(|&c| &self.clients[c].model.server_processor)
                .collect();
            self.global.server_processor = aggregate_params(&procs, &weights_active)?;
            let heads: Vec<&LayerStack> = participants
                .iter()
                .map(|&c| &self.clients[c].model.server_head)
                .collect();
            self.global.server_head = aggregate_params(&heads, &weights_active)?;
        }

        let metrics = compute_metrics(
            &self.global.client_side,
            &self.global.server_processor,
            &self.global.server_head,
            &self.eval,
            &self.cfg.critical_classes,
        )?;
        let aux_accuracy = if self.cfg.enable_dtd {
            let mut acc_sum = 0.0;
            let empty = LayerStack::default();
            for client in &self.clients {
                let m = compute_metrics(
                    &client.model.auxiliary_extractor,
                    &empty,
                    &client.model.auxiliary_head,
                    &self.eval,
                    &[],
                )?;
                acc_sum += m.accuracy;
            }
            acc_sum / self.clients.len() as f64
        } else {
            0.0
        };

        let mut weights_full = vec![0.0; cfg_clients];
        for (slot, &c) in participants.iter().enumerate() {
            weights_full[c] = weights_active[slot];
        }
        self.prev_weights = vec![None; cfg_clients];
        for (slot, &c) in participants.iter().enumerate() {
            self.prev_weights[c] = Some(weights_active[slot]);
        }
        self.rounds_done = round;

        Ok(RoundReport {
            round,
            weights: weights_full,
            task_loss: total_loss / total_samples.max(1) as f64,
            kd_client_loss: kd_client_sum / kd_passes.max(1) as f64,
            kd_global_loss: kd_global_sum / kd_passes.max(1) as f64,
            global_accuracy: metrics.accuracy,
            aux_accuracy,
            critical_rate: metrics.critical_rate,
            biased_clients: last_biased,
            matching: last_matching,
            skew_pre: last_skew.0,
            skew_post: last_skew.1,
            wall_clock_ms: elapsed_ms(&started, self.cfg.measure_wall_clock),
        })
    }
    pub fn run_all(&mut self) -> Result<Vec<RoundReport>> {
        let mut reports = Vec::with_capacity(self.cfg.rounds as usize);
        for _ in 0..self.cfg.rounds {
            reports.push(self.run_round()?);
        }
        Ok(reports)
    }

    /// Reference round: plain split training with uniform averaging and no
    /// record-based machinery. The full engine with every module disabled
    /// must reproduce this path bit for bit.
    pub fn plain_reference_round(&mut self) -> Result<()> {
        let round = self.rounds_done + 1;
        let schedule = self.schedule(round);
        let num_classes = self.cfg.classes;
        let sampled = sample_clients(
            self.cfg.clients,
            self.cfg.clients_per_round,
            self.cfg.seed,
            round,
        )?;
        let participants: Vec<usize> = sampled
            .into_iter()
            .filter(|&c| !self.clients[c].order.is_empty())
            .collect();
        if participants.is_empty() {
            self.rounds_done = round;
            return Ok(());
        }
        for &c in &participants {
            let client = &mut self.clients[c];
            client.model.client_side = self.global.client_side.clone();
            client.model.server_processor = self.global.server_processor.clone();
            client.model.server_head = self.global.server_head.clone();
        }
        let lr = self.cfg.learning_rate;
        for _step in 0..self.cfg.local_steps {
            for &c in &participants {
                let batch = self.clients[c]
                    .next_batch(&self.train, self.cfg.batch_size)
                    .expect("participants have data");
                let model = &self.clients[c].model;
                let (smashed, client_cache) = forward_client(&model.client_side, &batch)?;
                let (logits, server_cache) =
                    forward_server(&model.server_processor, &model.server_head, &smashed.view())?;
                let inv_b = 1.0 / batch.len() as f64;
                let mut dlogits = Array2::zeros(logits.dim());
                for (row, &label) in batch.labels.iter().enumerate() {
                    let mut y = Array1::zeros(num_classes);
                    y[label] = 1.0;
                    let (_, grad) = evidential_loss_grad(&logits.row(row), &y.view(), &schedule)?;
                    dlogits.row_mut(row).assign(&(&grad * inv_b));
                }
                let (proc_grads, head_grads, smashed_grad) = backward_server(
                    &model.server_processor,
                    &model.server_head,
                    &server_cache,
                    &dlogits.view(),
                )?;
                let (client_grads, _) =
                    backward(&model.client_side, &client_cache, &smashed_grad.view())?;
                let model = &mut self.clients[c].model;
                sgd_step(&mut model.client_side, &client_grads, lr);
                sgd_step(&mut model.server_processor, &proc_grads, lr);
                sgd_step(&mut model.server_head, &head_grads, lr);
            }
        }
        let uniform = vec![1.0 / participants.len() as f64; participants.len()];
        let client_stacks: Vec<&LayerStack> = participants
            .iter()
            .map(|&c| &self.clients[c].model.client_side)
            .collect();
        self.global.client_side = aggregate_params(&client_stacks, &uniform)?;
        let procs: Vec<&LayerStack> = participants
            .iter()
            .map(|&c| &self.clients[c].model.server_processor)
            .collect();
        self.global.server_processor = aggregate_params(&procs, &uniform)?;
        let heads: Vec<&LayerStack> = participants
            .iter()
            .map(|&c| &self.clients[c].model.server_head)
            .collect();
        self.global.server_head = aggregate_params(&heads, &uniform)?;
        self.rounds_done = round;
        Ok(())
    }
}

fn elapsed_ms(started: &Instant, measure: bool) -> f64 {
    if measure {
        started.elapsed().as_secs_f64() * 1e3
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, DenseLayer, DenseParams};
    use ndarray::array;

    fn small_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.clients = 4;
        cfg.clients_per_round = 4;
        cfg.samples_per_class = 30;
        cfg.eval_samples_per_class = 20;
        cfg.rounds = 3;
        cfg.batch_size = 8;
        cfg.learning_rate = 0.05;
        cfg.hidden_dim = 8;
        cfg.aux_hidden_dim = 6;
        cfg
    }

    #[test]
    fn sampling_all_clients_returns_everyone() {
        assert_eq!(sample_clients(5, 5, 9, 3).unwrap(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn sampling_is_deterministic_per_seed_round() {
        let a = sample_clients(10, 4, 7, 2).unwrap();
        let b = sample_clients(10, 4, 7, 2).unwrap();
        assert_eq!(a, b);
        let c = sample_clients(10, 4, 7, 3).unwrap();
        assert_ne!(a, c); // overwhelmingly likely for this seed
    }

    #[test]
    fn sampling_zero_clients_is_config_error() {
        assert!(matches!(sample_clients(5, 0, 0, 0), Err(Error::Config(_))));
        assert!(matches!(sample_clients(5, 6, 0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn perfect_predictor_metrics() {
        // identity pipeline on one-hot inputs predicts the label exactly
        let identity = LayerStack::new(vec![DenseLayer {
            params: DenseParams::identity(3),
            activation: Activation::Linear,
        }]);
        let empty = LayerStack::default();
        let eval = Dataset {
            inputs: array![
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 0.0, 1.0],
                [0.0, 1.0, 0.0]
            ],
            labels: vec![0, 1, 2, 1],
            num_classes: 3,
        };
        let m = compute_metrics(&identity, &empty, &identity, &eval, &[1]).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.critical_rate, 0.0);
        assert!(!m.critical_undefined);
    }

    #[test]
    fn constant_predictor_escapes_critical_class() {
        // zero weights, bias prefers class 0 (non-critical)
        let mut params = DenseParams::zeros(2, 2);
        params.bias = array![1.0, 0.0];
        let constant = LayerStack::new(vec![DenseLayer {
            params,
            activation: Activation::Linear,
        }]);
        let passthrough = LayerStack::new(vec![DenseLayer {
            params: DenseParams::identity(2),
            activation: Activation::Linear,
        }]);
        let empty = LayerStack::default();
        let eval = Dataset {
            inputs: array![[0.3, 0.1], [0.9, 0.4], [0.2, 0.8], [0.5, 0.5]],
            labels: vec![0, 0, 1, 1],
            num_classes: 2,
        };
        let m = compute_metrics(&passthrough, &empty, &constant, &eval, &[1]).unwrap();
        assert_eq!(m.critical_rate, 1.0);
        assert_eq!(m.accuracy, 0.5);
    }

    #[test]
    fn empty_critical_set_reports_zero_with_flag() {
        let identity = LayerStack::new(vec![DenseLayer {
            params: DenseParams::identity(2),
            activation: Activation::Linear,
        }]);
        let empty = LayerStack::default();
        let eval = Dataset {
            inputs: array![[1.0, 0.0], [0.0, 1.0]],
            labels: vec![0, 1],
            num_classes: 2,
        };
        let m = compute_metrics(&identity, &empty, &identity, &eval, &[]).unwrap();
        assert_eq!(m.critical_rate, 0.0);
        assert!(m.critical_undefined);
    }

    #[test]
    fn accuracy_matches_counting_oracle_on_random_model() {
        let cfg = small_cfg();
        let exp = Experiment::new(cfg).unwrap();
        let m = compute_metrics(
            &exp.global.client_side,
            &exp.global.server_processor,
            &exp.global.server_head,
            &exp.eval,
            &[],
        )
        .unwrap();
        // independent naive recount
        let (smashed, _) = forward(&exp.global.client_side, &exp.eval.inputs.view()).unwrap();
        let (logits, _) = forward_server(
            &exp.global.server_processor,
            &exp.global.server_head,
            &smashed.view(),
        )
        .unwrap();
        let mut correct = 0usize;
        for (row, &label) in exp.eval.labels.iter().enumerate() {
            let r = logits.row(row);
            let mut best = 0usize;
            for c in 1..r.len() {
                if r[c] > r[best] {
                    best = c;
                }
            }
            if best == label {
                correct += 1;
            }
        }
        assert_eq!(m.accuracy, correct as f64 / exp.eval.len() as f64);
    }

    #[test]
    fn rta_first_crossing() {
        let history = [0.1, 0.3, 0.5];
        assert_eq!(rta(&history, 0.4), Some(3));
        assert_eq!(rta(&history, 0.0), Some(1));
        assert_eq!(rta(&history, 0.9), None);
    }

    #[test]
    fn delta_estimate_examples() {
        let pg = LabelDistribution::new(array![0.5, 0.5]).unwrap();
        let same = vec![pg.clone(), pg.clone()];
        assert_eq!(delta_bcc_estimate(&[0.5, 0.5], &same, &pg, 2.0), 0.0);
        let p1 = LabelDistribution::new(array![0.7, 0.3]).unwrap();
        let p2 = LabelDistribution::new(array![0.3, 0.7]).unwrap();
        let v = delta_bcc_estimate(&[0.5, 0.5], &[p1.clone(), p2.clone()], &pg, 2.0);
        assert!((v - 0.8).abs() < 1e-12);
        let scaled = delta_bcc_estimate(&[0.5, 0.5], &[p1, p2], &pg, 6.0);
        assert!((scaled - 3.0 * v).abs() < 1e-12);
    }

    #[test]
    fn convergence_bound_shapes() {
        // δ=σ=0: pure decay, doubling T halves it
        let b1 = convergence_bound(2.0, 0.0, 0.01, 10, 0.0, 1.0, 0.0, false).unwrap();
        let b2 = convergence_bound(2.0, 0.0, 0.01, 20, 0.0, 1.0, 0.0, false).unwrap();
        assert!((b1 - 2.0 * b2).abs() < 1e-12);
        // statement vs proof constants
        let proof = convergence_bound(1.0, 0.0, 0.01, 10, 0.5, 1.0, 2.0, false).unwrap();
        let stmt = convergence_bound(1.0, 0.0, 0.01, 10, 0.5, 1.0, 2.0, true).unwrap();
        assert!((proof - (40.0 + 0.75 + 0.08)).abs() < 1e-12);
        assert!((stmt - (40.0 + 1.0 + 0.16)).abs() < 1e-12);
        // eta precondition
        assert!(convergence_bound(1.0, 0.0, 0.3, 10, 0.0, 1.0, 0.0, false).is_err());
    }

    #[test]
    fn degenerate_single_client_round() {
        let mut cfg = small_cfg();
        cfg.clients = 1;
        cfg.clients_per_round = 1;
        let mut exp = Experiment::new(cfg).unwrap();
        let report = exp.run_round().unwrap();
        assert_eq!(report.weights, vec![1.0]);
        assert!(report.matching.is_empty());
        assert!(report.biased_clients.is_empty());
        assert!(report.task_loss.is_finite());
    }

    #[test]
    fn rounds_are_deterministic() {
        let cfg = small_cfg();
        let mut a = Experiment::new(cfg.clone()).unwrap();
        let mut b = Experiment::new(cfg).unwrap();
        for _ in 0..3 {
            let ra = a.run_round().unwrap();
            let rb = b.run_round().unwrap();
            assert_eq!(ra, rb);
        }
        assert_eq!(a.global, b.global);
    }

    #[test]
    fn toy_run_loss_decreases() {
        let mut cfg = small_cfg();
        cfg.clients = 8;
        cfg.clients_per_round = 8;
        cfg.rounds = 30;
        cfg.samples_per_class = 60;
        cfg.seed = 12;
        let mut exp = Experiment::new(cfg).unwrap();
        let reports = exp.run_all().unwrap();
        assert!(
            reports[29].task_loss < reports[0].task_loss,
            "loss did not decrease: {} -> {}",
            reports[0].task_loss,
            reports[29].task_loss
        );
    }

    #[test]
    fn disabled_modules_reduce_to_plain_reference() {
        for local_steps in [1usize, 3] {
            let mut cfg = small_cfg();
            cfg.enable_ea = false;
            cfg.enable_bcc = false;
            cfg.enable_dtd = false;
            cfg.clients_per_round = 3;
            cfg.local_steps = local_steps;
            let mut engine = Experiment::new(cfg.clone()).unwrap();
            let mut reference = Experiment::new(cfg).unwrap();
            for round in 0..4 {
                engine.run_round().unwrap();
                reference.plain_reference_round().unwrap();
                assert_eq!(
                    engine.global.client_side, reference.global.client_side,
                    "client side diverged at round {round} (steps {local_steps})"
                );
                assert_eq!(
                    engine.global.server_processor,
                    reference.global.server_processor
                );
                assert_eq!(engine.global.server_head, reference.global.server_head);
            }
        }
    }

    #[test]
    fn skew_never_increases_with_transfers() {
        let mut cfg = small_cfg();
        cfg.clients = 6;
        cfg.clients_per_round = 6;
        cfg.dirichlet_kappa = 0.1;
        cfg.rounds = 10;
        cfg.seed = 3;
        let mut exp = Experiment::new(cfg).unwrap();
        for _ in 0..10 {
            let report = exp.run_round().unwrap();
            assert!(
                report.skew_post <= report.skew_pre + 1e-12,
                "round {}: skew grew {} -> {}",
                report.round,
                report.skew_pre,
                report.skew_post
            );
        }
    }

    #[test]
    fn replica_shapes_survive_rounds() {
        let mut cfg = small_cfg();
        cfg.processor_layers = 1;
        let mut exp = Experiment::new(cfg).unwrap();
        let shapes_before: Vec<_> = exp
            .global
            .server_processor
            .0
            .iter()
            .chain(exp.global.server_head.0.iter())
            .map(|l| l.params.weight.dim())
            .collect();
        for _ in 0..3 {
            exp.run_round().unwrap();
        }
        let shapes_after: Vec<_> = exp
            .global
            .server_processor
            .0
            .iter()
            .chain(exp.global.server_head.0.iter())
            .map(|l| l.params.weight.dim())
            .collect();
        assert_eq!(shapes_before, shapes_after);
        exp.global.validate().unwrap();
    }

    #[test]
    fn partial_participation_weights_only_selected_clients() {
        let mut cfg = small_cfg();
        cfg.clients = 6;
        cfg.clients_per_round = 2;
        cfg.samples_per_class = 60;
        let mut exp = Experiment::new(cfg).unwrap();
        let mut seen: std::collections::BTreeSet<usize> = std::collections::BTreeSet::new();
        for _ in 0..8 {
            let report = exp.run_round().unwrap();
            let active: Vec<usize> = report
                .weights
                .iter()
                .enumerate()
                .filter(|(_, &w)| w > 0.0)
                .map(|(c, _)| c)
                .collect();
            assert!(active.len() <= 2, "more than two clients weighted");
            let total: f64 = report.weights.iter().sum();
            assert!((total - 1.0).abs() < 1e-12 || total == 0.0);
            seen.extend(active);
        }
        assert!(seen.len() > 2, "sampling never rotated the cohort");
    }

    #[test]
    fn critical_classes_flow_into_reports() {
        let mut cfg = small_cfg();
        cfg.critical_classes = vec![0];
        let mut exp = Experiment::new(cfg).unwrap();
        let report = exp.run_round().unwrap();
        assert!((0.0..=1.0).contains(&report.critical_rate));
    }

    #[test]
    fn opt_in_wall_clock_is_positive() {
        let mut cfg = small_cfg();
        cfg.rounds = 1;
        let mut silent = Experiment::new(cfg.clone()).unwrap();
        assert_eq!(silent.run_round().unwrap().wall_clock_ms, 0.0);
        cfg.measure_wall_clock = true;
        let mut timed = Experiment::new(cfg).unwrap();
        assert!(timed.run_round().unwrap().wall_clock_ms > 0.0);
    }

    #[test]
    fn iid_mode_runs_with_near_uniform_skew() {
        let mut cfg = small_cfg();
        cfg.iid = true;
        cfg.samples_per_class = 120;
        cfg.batch_size = 30;
        let mut exp = Experiment::new(cfg).unwrap();
        let report = exp.run_round().unwrap();
        // IID batches track the global mixture closely, so the weighted skew
        // stays small and nobody is singled out as biased for long
        assert!(report.skew_pre < 0.5, "unexpected skew {}", report.skew_pre);
    }

    #[test]
    fn shared_replica_mode_runs_and_stays_deterministic() {
        let mut cfg = small_cfg();
        cfg.shared_replica = true;
        let mut a = Experiment::new(cfg.clone()).unwrap();
        let mut b = Experiment::new(cfg).unwrap();
        for _ in 0..2 {
            let ra = a.run_round().unwrap();
            let rb = b.run_round().unwrap();
            assert_eq!(ra, rb);
        }
    }

    #[test]
    fn quadratic_toy_respects_convergence_bound() {
        // per-class quadratic losses L_n(w) = ½λ‖w − c_n‖² make the global
        // objective λ-smooth; biased aggregation with enumerable per-round
        // bias must land under the bound
        let lambda = 2.0;
        let eta = 1.0 / (8.0 * lambda);
        let centers = [array![1.0, 0.0], array![0.0, 1.0], array![-1.0, 0.5]];
        let pg = [0.3, 0.4, 0.3];
        let clients = [[0.6, 0.2, 0.2], [0.1, 0.6, 0.3], [0.2, 0.4, 0.4]];
        let w_clients = [0.5, 0.25, 0.25];
        let target: Array1<f64> = centers
            .iter()
            .zip(pg)
            .fold(Array1::zeros(2), |acc, (c, p)| acc + c * p);
        let loss = |w: &Array1<f64>| -> f64 {
            centers
                .iter()
                .zip(pg)
                .map(|(c, p)| {
                    let d = w - c;
                    0.5 * lambda * p * d.iter().map(|v| v * v).sum::<f64>()
                })
                .sum()
        };
        let l_star = loss(&target);
        for rounds in [10u64, 50, 200] {
            let mut w = array![3.0, -2.0];
            let l0 = loss(&w);
            let mut min_grad_sq = f64::INFINITY;
            let mut max_delta = 0.0_f64;
            for _ in 0..rounds {
                // true gradient and biased aggregated gradient
                let mut g_true = Array1::<f64>::zeros(2);
                for (c, p) in centers.iter().zip(pg) {
                    g_true.scaled_add(lambda * p, &(&w - c));
                }
                min_grad_sq = min_grad_sq.min(g_true.iter().map(|v| v * v).sum());
                let mut g_agg = Array1::<f64>::zeros(2);
                for (dist, wk) in clients.iter().zip(w_clients) {
                    for (c, p) in centers.iter().zip(dist) {
                        g_agg.scaled_add(wk * lambda * p, &(&w - c));
                    }
                }
                let g_max = centers
                    .iter()
                    .map(|c| {
                        let d = &w - c;
                        lambda * d.iter().map(|v| v * v).sum::<f64>().sqrt()
                    })
                    .fold(0.0_f64, f64::max);
                let skew: f64 = clients
                    .iter()
                    .zip(w_clients)
                    .map(|(dist, wk)| {
                        wk * dist.iter().zip(pg).map(|(a, b)| (a - b).abs()).sum::<f64>()
                    })
                    .sum();
                max_delta = max_delta.max(g_max * skew);
                w -= &(g_agg * eta);
            }
            let bound =
                convergence_bound(l0, l_star, eta, rounds, max_delta, lambda, 0.0, false).unwrap();
            assert!(
                min_grad_sq <= bound,
                "T={rounds}: min grad² {min_grad_sq} above bound {bound}"
            );
        }
    }
}
