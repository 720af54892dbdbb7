//! Bias compensation between complementary clients.
//!
//! The server detects clients whose label distribution diverges sharply from
//! the global one (largest-gap thresholding over Jensen-Shannon divergences),
//! pairs them on a complementarity graph with a greedy matching, computes a
//! per-class transfer ratio ρ* from a three-case analysis on the previous
//! round's aggregation weights, and builds plans that route selected smashed
//! samples through the partner's server-side replica. Gradients always return
//! to the sample's originating client.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::edl::{evidential_loss_grad, AnnealingSchedule};
use crate::error::{Error, Result};
use crate::nn::{backward_server, forward_server, LayerStack, StackGrads};

/// A probability vector over classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDistribution(Array1<f64>);

impl LabelDistribution {
    pub fn new(p: Array1<f64>) -> Result<Self> {
        validate_simplex(&p.view())?;
        Ok(Self(p))
    }

    /// Distribution of per-class counts; `None` when the record holds no
    /// samples, which signals "skip this client for pairing this round".
    pub fn from_counts(counts: &ArrayView1<f64>) -> Option<Self> {
        let total = counts.sum();
        if total <= 0.0 || counts.iter().any(|&c| c < 0.0) {
            return None;
        }
        Some(Self(counts.mapv(|c| c / total)))
    }

    pub fn probs(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }
}

fn validate_simplex(p: &ArrayView1<f64>) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Domain("distribution is empty".into()));
    }
    if p.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::Domain(
            "distribution entries must be nonnegative".into(),
        ));
    }
    let total = p.sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!(
            "distribution sums to {total}, expected 1"
        )));
    }
    Ok(())
}

/// Jensen-Shannon divergence in natural log:
/// `½KL(P‖M) + ½KL(Q‖M)` with `M = ½(P+Q)` and the `0·log(0/·) = 0`
/// convention. Symmetric and bounded by `ln 2`.
pub fn js_divergence(p: &ArrayView1<f64>, q: &ArrayView1<f64>) -> Result<f64> {
    validate_simplex(p)?;
    validate_simplex(q)?;
    if p.len() != q.len() {
        return Err(Error::Domain("distribution lengths differ".into()));
    }
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q.iter()) {
        let m = 0.5 * (pi + qi);
        if pi > 0.0 {
            acc += 0.5 * pi * (pi / m).ln();
        }
        if qi > 0.0 {
            acc += 0.5 * qi * (qi / m).ln();
        }
    }
    Ok(acc)
}

/// Splits clients into biased and unbiased by the largest consecutive gap in
/// the sorted divergences. The threshold is the value just below the largest
/// gap (smallest index on ties); biased means strictly above it. Fewer than
/// two clients means nothing can be paired, so the set is empty.
pub fn biased_set(divergences: &[(usize, f64)]) -> Vec<usize> {
    if divergences.len() < 2 {
        return Vec::new();
    }
    let mut sorted = divergences.to_vec();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut best_gap = f64::NEG_INFINITY;
    let mut best_idx = 0usize;
    for m in 0..sorted.len() - 1 {
        let gap = sorted[m + 1].1 - sorted[m].1;
        if gap > best_gap {
            best_gap = gap;
            best_idx = m;
        }
    }
    let threshold = sorted[best_idx].1;
    let mut biased: Vec<usize> = divergences
        .iter()
        .filter(|(_, d)| *d > threshold)
        .map(|(c, _)| *c)
        .collect();
    biased.sort_unstable();
    biased
}

/// Complementarity gain of jointly compensating two clients:
/// `‖P_i−P_g‖₁ + ‖P_j−P_g‖₁ − ‖(P_i−P_g)+(P_j−P_g)‖₁`. Nonnegative, zero
/// when the deviations never oppose.
pub fn edge_weight(
    p_i: &LabelDistribution,
    p_j: &LabelDistribution,
    p_g: &LabelDistribution,
) -> f64 {
    let di = p_i.probs() - p_g.probs();
    let dj = p_j.probs() - p_g.probs();
    let l1 = |v: &Array1<f64>| v.iter().map(|x| x.abs()).sum::<f64>();
    l1(&di) + l1(&dj) - l1(&(&di + &dj))
}

/// Weighted graph over the biased clients. Edges are stored with `i < j`.
#[derive(Debug, Clone)]
pub struct ComplementarityGraph {
    pub nodes: Vec<usize>,
    pub edges: Vec<(usize, usize, f64)>,
}

impl ComplementarityGraph {
    pub fn build(
        nodes_with_dists: &[(usize, &LabelDistribution)],
        p_g: &LabelDistribution,
    ) -> Self {
        let nodes: Vec<usize> = nodes_with_dists.iter().map(|(c, _)| *c).collect();
        let mut edges = Vec::new();
        for a in 0..nodes_with_dists.len() {
            for b in a + 1..nodes_with_dists.len() {
                let (ca, pa) = nodes_with_dists[a];
                let (cb, pb) = nodes_with_dists[b];
                let (i, j, pi, pj) = if ca < cb {
                    (ca, cb, pa, pb)
                } else {
                    (cb, ca, pb, pa)
                };
                edges.push((i, j, edge_weight(pi, pj, p_g)));
            }
        }
        Self { nodes, edges }
    }
}

/// Greedy maximum-weight matching: repeatedly pick the heaviest remaining
/// edge (ties broken by lexicographically smallest pair), remove both
/// endpoints. Zero-weight edges are never matched.
pub fn greedy_match(graph: &ComplementarityGraph) -> Vec<(usize, usize)> {
    let mut edges = graph.edges.clone();
    edges.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut used = std::collections::BTreeSet::new();
    let mut matching = Vec::new();
    for (i, j, w) in edges {
        if w <= 0.0 {
            break;
        }
        if used.contains(&i) || used.contains(&j) {
            continue;
        }
        used.insert(i);
        used.insert(j);
        matching.push((i, j));
    }
    matching
}

/// Classes where each side strictly overrepresents the other:
/// (`{n : p_i,n > p_j,n}`, `{n : p_j,n > p_i,n}`). Equal classes fall in
/// neither set.
pub fn overrepresented_classes(
    p_i: &LabelDistribution,
    p_j: &LabelDistribution,
) -> (Vec<usize>, Vec<usize>) {
    let mut i_to_j = Vec::new();
    let mut j_to_i = Vec::new();
    for (n, (&a, &b)) in p_i.probs().iter().zip(p_j.probs().iter()).enumerate() {
        if a > b {
            i_to_j.push(n);
        } else if b > a {
            j_to_i.push(n);
        }
    }
    (i_to_j, j_to_i)
}

/// Weight comparisons within this band count as equal (case 3).
const WEIGHT_TIE_BAND: f64 = 1e-12;

/// Optimal class-`n` transfer ratio for a pair oriented so that the source
/// client overrepresents the class (`p_src ≥ p_dst`). The aggregation
/// weights come from the previous round.
///
/// - source weighted higher: zero out the source's deviation,
///   `ρ = (p_src − p_g)/p_src`;
/// - destination weighted higher: fill the destination's deficit,
///   `ρ = (p_g − p_dst)/p_src`;
/// - tie: any point between the two is optimal, take the midpoint.
///
/// The result is clamped to `[0, 1]`; a source with no mass transfers
/// nothing.
pub fn transfer_ratio(p_src: f64, p_dst: f64, p_g: f64, w_src: f64, w_dst: f64) -> f64 {
    if p_src <= 0.0 {
        return 0.0;
    }
    let fill_src = (p_src - p_g) / p_src;
    let fill_dst = (p_g - p_dst) / p_src;
    let rho = if (w_src - w_dst).abs() <= WEIGHT_TIE_BAND {
        0.5 * (fill_src + fill_dst)
    } else if w_src > w_dst {
        fill_src
    } else {
        fill_dst
    };
    rho.clamp(0.0, 1.0)
}

/// A matched pair's per-direction transfer decisions for one round.
///
/// `selected_*` hold batch row indices into the originating client's current
/// mini-batch; features themselves are never copied between client gradient
/// paths.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferPlan {
    pub pair: (usize, usize),
    pub classes_i_to_j: Vec<usize>,
    pub classes_j_to_i: Vec<usize>,
    pub ratios_i_to_j: Vec<(usize, f64)>,
    pub ratios_j_to_i: Vec<(usize, f64)>,
    pub selected_i_to_j: Vec<usize>,
    pub selected_j_to_i: Vec<usize>,
}

impl TransferPlan {
    pub fn is_empty(&self) -> bool {
        self.selected_i_to_j.is_empty() && self.selected_j_to_i.is_empty()
    }
}

fn select_rows(labels: &[usize], class: usize, rho: f64) -> Vec<usize> {
    let rows: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == class)
        .map(|(r, _)| r)
        .collect();
    let take = (rho * rows.len() as f64).floor() as usize;
    rows.into_iter().take(take).collect()
}

/// Builds the transfer plan for a matched pair from CSR label distributions,
/// previous-round weights, and the two current mini-batches' labels.
/// Selection is deterministic: per class, the `⌊ρ*·count⌋` lowest batch
/// indices.
#[allow(clippy::too_many_arguments)]
pub fn build_transfer_plan(
    pair: (usize, usize),
    p_i: &LabelDistribution,
    p_j: &LabelDistribution,
    p_g: &LabelDistribution,
    w_i: f64,
    w_j: f64,
    labels_i: &[usize],
    labels_j: &[usize],
) -> TransferPlan {
    let (classes_i_to_j, classes_j_to_i) = overrepresented_classes(p_i, p_j);
    let mut ratios_i_to_j = Vec::new();
    let mut selected_i_to_j = Vec::new();
    for &n in &classes_i_to_j {
        let rho = transfer_ratio(p_i.probs()[n], p_j.probs()[n], p_g.probs()[n], w_i, w_j);
        ratios_i_to_j.push((n, rho));
        selected_i_to_j.extend(select_rows(labels_i, n, rho));
    }
    let mut ratios_j_to_i = Vec::new();
    let mut selected_j_to_i = Vec::new();
    for &n in &classes_j_to_i {
        let rho = transfer_ratio(p_j.probs()[n], p_i.probs()[n], p_g.probs()[n], w_j, w_i);
        ratios_j_to_i.push((n, rho));
        selected_j_to_i.extend(select_rows(labels_j, n, rho));
    }
    selected_i_to_j.sort_unstable();
    selected_j_to_i.sort_unstable();
    TransferPlan {
        pair,
        classes_i_to_j,
        classes_j_to_i,
        ratios_i_to_j,
        ratios_j_to_i,
        selected_i_to_j,
        selected_j_to_i,
    }
}

/// Applies a pair's ρ* mass transfer to the label distributions themselves;
/// used for the bias diagnostics. Returns the post-transfer (unnormalized in
/// total mass, per-class exact) deviation carriers (P̂_i, P̂_j).
pub fn apply_mass_transfer(
    p_i: &LabelDistribution,
    p_j: &LabelDistribution,
    p_g: &LabelDistribution,
    w_i: f64,
    w_j: f64,
) -> (Array1<f64>, Array1<f64>) {
    let mut hat_i = p_i.probs().clone();
    let mut hat_j = p_j.probs().clone();
    let (classes_i_to_j, classes_j_to_i) = overrepresented_classes(p_i, p_j);
    for &n in &classes_i_to_j {
        let rho = transfer_ratio(p_i.probs()[n], p_j.probs()[n], p_g.probs()[n], w_i, w_j);
        let moved = rho * p_i.probs()[n];
        hat_i[n] -= moved;
        hat_j[n] += moved;
    }
    for &n in &classes_j_to_i {
        let rho = transfer_ratio(p_j.probs()[n], p_i.probs()[n], p_g.probs()[n], w_j, w_i);
        let moved = rho * p_j.probs()[n];
        hat_j[n] -= moved;
        hat_i[n] += moved;
    }
    (hat_i, hat_j)
}

/// A server-side replica's parameter stacks.
#[derive(Debug, Clone, Copy)]
pub struct ReplicaRefs<'a> {
    pub processor: &'a LayerStack,
    pub head: &'a LayerStack,
}

/// Gradient routing result of one pair's transfers.
///
/// Parameter gradients land on the replica that processed the samples; the
/// smashed-feature gradients are keyed by originating batch row and belong
/// exclusively to the originating client.
#[derive(Debug)]
pub struct TransferOutcome {
    pub grads_replica_i: Option<(StackGrads, StackGrads)>,
    pub grads_replica_j: Option<(StackGrads, StackGrads)>,
    pub smashed_grads_i: Vec<(usize, Array1<f64>)>,
    pub smashed_grads_j: Vec<(usize, Array1<f64>)>,
    /// Summed (unscaled) evidential losses of each client's transferred
    /// samples, computed on the partner replica.
    pub loss_i: f64,
    pub loss_j: f64,
}

fn transfer_direction(
    rows: &[usize],
    smashed: &ArrayView2<f64>,
    labels: &[usize],
    destination: ReplicaRefs<'_>,
    schedule: &AnnealingSchedule,
    num_classes: usize,
    scale: f64,
) -> Result<Option<((StackGrads, StackGrads), Vec<(usize, Array1<f64>)>, f64)>> {
    if rows.is_empty() {
        return Ok(None);
    }
    for &r in rows {
        if r >= smashed.nrows() {
            return Err(Error::Internal(format!(
                "transfer row {r} out of batch range {}",
                smashed.nrows()
            )));
        }
    }
    let sub = smashed.select(Axis(0), rows);
    let (logits, cache) = forward_server(destination.processor, destination.head, &sub.view())?;
    let mut dlogits = Array2::zeros(logits.dim());
    let mut loss_sum = 0.0;
    for (sub_row, &orig_row) in rows.iter().enumerate() {
        let mut y = Array1::zeros(num_classes);
        y[labels[orig_row]] = 1.0;
        let (loss, grad) = evidential_loss_grad(&logits.row(sub_row), &y.view(), schedule)?;
        loss_sum += loss;
        dlogits.row_mut(sub_row).assign(&(&grad * scale));
    }
    let (proc_grads, head_grads, dsub) = backward_server(
        destination.processor,
        destination.head,
        &cache,
        &dlogits.view(),
    )?;
    let routed: Vec<(usize, Array1<f64>)> = rows
        .iter()
        .enumerate()
        .map(|(sub_row, &orig_row)| (orig_row, dsub.row(sub_row).to_owned()))
        .collect();
    Ok(Some(((proc_grads, head_grads), routed, loss_sum)))
}

/// Runs both directions of a plan: each client's selected smashed rows flow
/// through the partner's replica, parameter gradients accrue on that replica,
/// and the smashed-level gradients are returned keyed by the originating
/// client's batch rows. `scale_i`/`scale_j` multiply the per-sample logit
/// gradients (the engine passes 1/batch-size of the owner).
#[allow(clippy::too_many_arguments)]
pub fn apply_transfer(
    plan: &TransferPlan,
    replica_i: ReplicaRefs<'_>,
    replica_j: ReplicaRefs<'_>,
    smashed_i: &ArrayView2<f64>,
    labels_i: &[usize],
    smashed_j: &ArrayView2<f64>,
    labels_j: &[usize],
    schedule: &AnnealingSchedule,
    num_classes: usize,
    scale_i: f64,
    scale_j: f64,
) -> Result<TransferOutcome> {
    let mut outcome = TransferOutcome {
        grads_replica_i: None,
        grads_replica_j: None,
        smashed_grads_i: Vec::new(),
        smashed_grads_j: Vec::new(),
        loss_i: 0.0,
        loss_j: 0.0,
    };
    if let Some((grads, routed, loss)) = transfer_direction(
        &plan.selected_i_to_j,
        smashed_i,
        labels_i,
        replica_j,
        schedule,
        num_classes,
        scale_i,
    )? {
        outcome.grads_replica_j = Some(grads);
        outcome.smashed_grads_i = routed;
        outcome.loss_i = loss;
    }
    if let Some((grads, routed, loss)) = transfer_direction(
        &plan.selected_j_to_i,
        smashed_j,
        labels_j,
        replica_i,
        schedule,
        num_classes,
        scale_j,
    )? {
        outcome.grads_replica_i = Some(grads);
        outcome.smashed_grads_j = routed;
        outcome.loss_j = loss;
    }
    Ok(outcome)
}
