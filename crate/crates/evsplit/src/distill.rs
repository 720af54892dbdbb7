//! Dual-teacher distillation into the client-local auxiliary model.
//!
//! Each auxiliary model learns from its own labels (evidential loss), from
//! the global model at the prediction level (temperature-scaled KL on
//! expected class probabilities), and from the local client-side extractor at
//! the feature level (KL between row-softmaxed pairwise-distance matrices).
//! Teacher parameters are snapshots; a step only updates auxiliary params.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::edl::{evidential_loss_grad, AnnealingSchedule};
use crate::error::{Error, Result};
use crate::nn::{backward, forward, sgd_step, sigmoid, softplus, Batch, LayerStack, StackGrads};

/// Probability floor inside logarithms, applied to the non-reference side.
const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    pub temperature: f64,
    /// Weight of the feature-level (client-teacher) term.
    pub lambda_client: f64,
    /// Weight of the prediction-level (global-teacher) term.
    pub lambda_global: f64,
    /// Teacher-weighted KL (the printed expansion) when true; the reverse
    /// direction otherwise.
    pub teacher_reference: bool,
    /// Row-softmax over negated distances instead of raw ones.
    pub negate_distances: bool,
    /// Temperature-scale raw logits instead of expected probabilities.
    pub probs_from_logits: bool,
}

impl DistillConfig {
    pub fn new(temperature: f64, lambda_client: f64, lambda_global: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::Domain(format!(
                "distillation temperature must be positive, got {temperature}"
            )));
        }
        if lambda_client < 0.0 || lambda_global < 0.0 {
            return Err(Error::Domain(
                "distillation weights must be nonnegative".into(),
            ));
        }
        Ok(Self {
            temperature,
            lambda_client,
            lambda_global,
            teacher_reference: true,
            negate_distances: false,
            probs_from_logits: false,
        })
    }
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self::new(5.0, 0.2, 0.3).expect("defaults are valid")
    }
}

/// Temperature-scaled softmax of a score vector.
pub fn temperature_probs(scores: &ArrayView1<f64>, temperature: f64) -> Result<Array1<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::Domain(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if scores.is_empty() {
        return Err(Error::Domain("score vector is empty".into()));
    }
    Ok(softmax_stable(&scores.mapv(|s| s / temperature).view()))
}

fn softmax_stable(v: &ArrayView1<f64>) -> Array1<f64> {
    let max = v.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let exps = v.mapv(|x| (x - max).exp());
    let total = exps.sum();
    exps.mapv(|e| e / total)
}

/// Prediction-level distillation loss
/// `τ²·Σ_n p_g(log p_g − log p_a)` — the teacher-weighted expansion.
pub fn kd_global_loss(
    p_a: &ArrayView1<f64>,
    p_g: &ArrayView1<f64>,
    temperature: f64,
) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::Domain("temperature must be positive".into()));
    }
    validate_probs(p_a)?;
    validate_probs(p_g)?;
    if p_a.len() != p_g.len() {
        return Err(Error::Domain("probability vector lengths differ".into()));
    }
    let t2 = temperature * temperature;
    let mut acc = 0.0;
    for (&pa, &pg) in p_a.iter().zip(p_g.iter()) {
        if pg > 0.0 {
            acc += pg * (pg.ln() - pa.max(LOG_CLAMP).ln());
        }
    }
    Ok(t2 * acc)
}

fn validate_probs(p: &ArrayView1<f64>) -> Result<()> {
    if p.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::Domain(
            "probabilities must be finite and nonnegative".into(),
        ));
    }
    if (p.sum() - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!(
            "probabilities sum to {}, expected 1",
            p.sum()
        )));
    }
    Ok(())
}

/// Loss and gradient with respect to the raw student scores, with the
/// student tempered inside. The teacher probabilities are already tempered.
///
/// Teacher-reference: `∂L/∂c = τ·(p_s − p_t)`; student-reference:
/// `∂L/∂c_m = τ·p_s_m·(ln(p_s_m/p_t_m) − KL(p_s‖p_t))`.
pub fn kd_global_with_grad(
    student_scores: &ArrayView1<f64>,
    teacher_probs: &ArrayView1<f64>,
    temperature: f64,
    teacher_reference: bool,
) -> Result<(f64, Array1<f64>)> {
    let p_s = temperature_probs(student_scores, temperature)?;
    validate_probs(teacher_probs)?;
    let tau = temperature;
    if teacher_reference {
        let loss = kd_global_loss(&p_s.view(), teacher_probs, tau)?;
        let grad = Array1::from_iter(
            p_s.iter()
                .zip(teacher_probs.iter())
                .map(|(&s, &t)| tau * (s - t)),
        );
        Ok((loss, grad))
    } else {
        let t2 = tau * tau;
        let mut kl = 0.0;
        for (&s, &t) in p_s.iter().zip(teacher_probs.iter()) {
            if s > 0.0 {
                kl += s * (s.ln() - t.max(LOG_CLAMP).ln());
            }
        }
        let grad = Array1::from_iter(p_s.iter().zip(teacher_probs.iter()).map(|(&s, &t)| {
            if s > 0.0 {
                tau * s * ((s.ln() - t.max(LOG_CLAMP).ln()) - kl)
            } else {
                0.0
            }
        }));
        Ok((t2 * kl, grad))
    }
}

/// Squared pairwise Euclidean distances of batch features: symmetric,
/// zero-diagonal, nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationalMatrix(Array2<f64>);

impl RelationalMatrix {
    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }

    /// Wraps a precomputed matrix, checking the invariants.
    pub fn from_raw(m: Array2<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Domain("relational matrix must be square".into()));
        }
        for a in 0..m.nrows() {
            if m[[a, a]] != 0.0 {
                return Err(Error::Domain(
                    "relational matrix diagonal must be zero".into(),
                ));
            }
            for b in 0..m.ncols() {
                if m[[a, b]] < 0.0 || (m[[a, b]] - m[[b, a]]).abs() > 1e-9 {
                    return Err(Error::Domain(
                        "relational matrix must be symmetric and nonnegative".into(),
                    ));
                }
            }
        }
        Ok(Self(m))
    }
}

/// `M[a,b] = ‖z_a − z_b‖²` for every pair of batch rows. Needs at least two
/// rows to carry any relational signal.
pub fn pairwise_distance_matrix(z: &ArrayView2<f64>) -> Result<RelationalMatrix> {
    let b = z.nrows();
    if b < 2 {
        return Err(Error::Domain(format!(
            "relational matrix needs at least 2 rows, got {b}"
        )));
    }
    let mut m = Array2::zeros((b, b));
    for a in 0..b {
        for c in a + 1..b {
            let d: f64 = z
                .row(a)
                .iter()
                .zip(z.row(c).iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            m[[a, c]] = d;
            m[[c, a]] = d;
        }
    }
    Ok(RelationalMatrix(m))
}

/// Row-softmax KL between two equally-shaped matrices, mean over rows, with
/// the gradient with respect to the student matrix:
/// `τ²/B · Σ_a KL(softmax(T_a/τ) ‖ softmax(S_a/τ))`, `∂/∂S = τ/B·(Q − P)`.
fn row_softmax_kl(
    teacher: &ArrayView2<f64>,
    student: &ArrayView2<f64>,
    temperature: f64,
) -> (f64, Array2<f64>) {
    let b = teacher.nrows();
    let tau = temperature;
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(student.dim());
    for a in 0..b {
        let p = softmax_stable(&teacher.row(a).mapv(|v| v / tau).view());
        let q = softmax_stable(&student.row(a).mapv(|v| v / tau).view());
        let mut row_kl = 0.0;
        for (&pv, &qv) in p.iter().zip(q.iter()) {
            if pv > 0.0 {
                row_kl += pv * (pv.ln() - qv.max(LOG_CLAMP).ln());
            }
        }
        loss += row_kl;
        let mut g = grad.row_mut(a);
        for (gi, (&pv, &qv)) in g.iter_mut().zip(p.iter().zip(q.iter())) {
            *gi = tau * inv_b * (qv - pv);
        }
    }
    (tau * tau * loss * inv_b, grad)
}

/// Feature-level distillation loss between the client-teacher and the
/// auxiliary relational matrices.
pub fn kd_feature_loss(
    m_teacher: &RelationalMatrix,
    m_student: &RelationalMatrix,
    temperature: f64,
) -> Result<f64> {
    kd_feature_with_grad(m_teacher, m_student, temperature).map(|(loss, _)| loss)
}

/// Feature-level loss plus its gradient with respect to the student matrix
/// entries.
pub fn kd_feature_with_grad(
    m_teacher: &RelationalMatrix,
    m_student: &RelationalMatrix,
    temperature: f64,
) -> Result<(f64, Array2<f64>)> {
    if !(temperature > 0.0) {
        return Err(Error::Domain("temperature must be positive".into()));
    }
    if m_teacher.0.dim() != m_student.0.dim() {
        return Err(Error::Config(format!(
            "relational matrix shapes differ: {:?} vs {:?}",
            m_teacher.0.dim(),
            m_student.0.dim()
        )));
    }
    Ok(row_softmax_kl(
        &m_teacher.0.view(),
        &m_student.0.view(),
        temperature,
    ))
}

/// `L_total = L_evid + λ_C·L_KD-C + λ_G·L_KD-G`.
pub fn dtd_total_loss(evidential: f64, kd_client: f64, kd_global: f64, cfg: &DistillConfig) -> f64 {
    evidential + cfg.lambda_client * kd_client + cfg.lambda_global * kd_global
}

/// Frozen teacher snapshots for one distillation step. `global` is absent in
/// the warm-up round before any aggregate exists.
#[derive(Debug, Clone, Copy)]
pub struct DtdTeachers<'a> {
    pub client_extractor: &'a LayerStack,
    pub global: Option<GlobalTeacher<'a>>,
}

#[derive(Debug, Clone, Copy)]
pub struct GlobalTeacher<'a> {
    pub client_side: &'a LayerStack,
    pub processor: &'a LayerStack,
    pub head: &'a LayerStack,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DtdLosses {
    pub evidential: f64,
    pub kd_client: f64,
    pub kd_global: f64,
    pub total: f64,
}

/// Per-row student scores entering temperature scaling, and the chain factor
/// back to logits.
fn student_scores_and_chain(
    logits_row: &ArrayView1<f64>,
    probs_from_logits: bool,
) -> (Array1<f64>, Option<(Array1<f64>, f64)>) {
    if probs_from_logits {
        (logits_row.to_owned(), None)
    } else {
        let alpha = logits_row.mapv(|x| softplus(x) + 1.0);
        let strength = alpha.sum();
        let scores = alpha.mapv(|a| a / strength);
        (scores, Some((alpha, strength)))
    }
}

/// Maps a gradient w.r.t. expected probabilities `α/S` back to logits.
fn chain_through_expected_prob(
    g_scores: &Array1<f64>,
    alpha: &Array1<f64>,
    strength: f64,
    logits_row: &ArrayView1<f64>,
) -> Array1<f64> {
    let weighted: f64 = g_scores
        .iter()
        .zip(alpha.iter())
        .map(|(&g, &a)| g * a)
        .sum();
    Array1::from_iter(
        g_scores
            .iter()
            .zip(logits_row.iter())
            .map(|(&g, &x)| (g / strength - weighted / (strength * strength)) * sigmoid(x)),
    )
}

fn teacher_probs_for_batch(
    teacher: &GlobalTeacher<'_>,
    batch: &Batch,
    cfg: &DistillConfig,
) -> Result<Array2<f64>> {
    let (z, _) = forward(teacher.client_side, &batch.inputs.view())?;
    let (hidden, _) = forward(teacher.processor, &z.view())?;
    let (logits, _) = forward(teacher.head, &hidden.view())?;
    let mut probs = Array2::zeros(logits.dim());
    for (b, row) in logits.rows().into_iter().enumerate() {
        let (scores, _) = student_scores_and_chain(&row, cfg.probs_from_logits);
        probs
            .row_mut(b)
            .assign(&temperature_probs(&scores.view(), cfg.temperature)?);
    }
    Ok(probs)
}

/// Full forward/backward of the dual-teacher objective. Returns the loss
/// breakdown plus gradients for the auxiliary extractor and head.
pub fn dtd_backward(
    aux_extractor: &LayerStack,
    aux_head: &LayerStack,
    teachers: &DtdTeachers<'_>,
    batch: &Batch,
    cfg: &DistillConfig,
    schedule: &AnnealingSchedule,
) -> Result<(DtdLosses, StackGrads, StackGrads)> {
    let b = batch.len();
    let inv_b = 1.0 / b as f64;
    let num_classes = aux_head
        .out_dim()
        .ok_or_else(|| Error::Config("auxiliary head is empty".into()))?;

    let (features, ext_cache) = forward(aux_extractor, &batch.inputs.view())?;
    let (logits, head_cache) = forward(aux_head, &features.view())?;

    // supervised evidential term
    let mut dlogits = Array2::zeros(logits.dim());
    let mut evid_sum = 0.0;
    for (row, &label) in batch.labels.iter().enumerate() {
        let mut y = Array1::zeros(num_classes);
        y[label] = 1.0;
        let (loss, grad) = evidential_loss_grad(&logits.row(row), &y.view(), schedule)?;
        evid_sum += loss;
        dlogits.row_mut(row).assign(&(&grad * inv_b));
    }
    let evidential = evid_sum * inv_b;

    // prediction-level term against the global teacher
    let mut kd_global = 0.0;
    if cfg.lambda_global > 0.0 {
        if let Some(global) = &teachers.global {
            let teacher_probs = teacher_probs_for_batch(global, batch, cfg)?;
            let mut kd_sum = 0.0;
            for row in 0..b {
                let logits_row = logits.row(row);
                let (scores, chain) = student_scores_and_chain(&logits_row, cfg.probs_from_logits);
                let (loss, g_scores) = kd_global_with_grad(
                    &scores.view(),
                    &teacher_probs.row(row),
                    cfg.temperature,
                    cfg.teacher_reference,
                )?;
                kd_sum += loss;
                let g_logits = match chain {
                    None => g_scores,
                    Some((alpha, strength)) => {
                        chain_through_expected_prob(&g_scores, &alpha, strength, &logits_row)
                    }
                };
                let mut target = dlogits.row_mut(row);
                target += &(&g_logits * (cfg.lambda_global * inv_b));
            }
            kd_global = kd_sum * inv_b;
        }
    }

    let (head_grads, dfeatures_head) = backward(aux_head, &head_cache, &dlogits.view())?;
    let mut dfeatures = dfeatures_head;

    // feature-level term against the client-side teacher
    let mut kd_client = 0.0;
    if cfg.lambda_client > 0.0 && b >= 2 {
        let (teacher_features, _) = forward(teachers.client_extractor, &batch.inputs.view())?;
        let m_teacher = pairwise_distance_matrix(&teacher_features.view())?;
        let m_student = pairwise_distance_matrix(&features.view())?;
        let (mut t_mat, mut s_mat) = (m_teacher.0, m_student.0);
        if cfg.negate_distances {
            t_mat.mapv_inplace(|v| -v);
            s_mat.mapv_inplace(|v| -v);
        }
        let (loss, g_matrix) = row_softmax_kl(&t_mat.view(), &s_mat.view(), cfg.temperature);
        kd_client = loss;
        let sign = if cfg.negate_distances { -1.0 } else { 1.0 };
        // dM[a,c]/dz_a = 2(z_a − z_c); both (a,c) and (c,a) entries touch z_a
        for a in 0..b {
            let mut dz_row = Array1::zeros(features.ncols());
            for c in 0..b {
                if a == c {
                    continue;
                }
                let coeff = sign * (g_matrix[[a, c]] + g_matrix[[c, a]]) * 2.0;
                for (d, (za, zc)) in features
                    .row(a)
                    .iter()
                    .zip(features.row(c).iter())
                    .enumerate()
                {
                    dz_row[d] += coeff * (za - zc);
                }
            }
            let mut target = dfeatures.row_mut(a);
            target += &(&dz_row * cfg.lambda_client);
        }
    }

    let (ext_grads, _) = backward(aux_extractor, &ext_cache, &dfeatures.view())?;
    let losses = DtdLosses {
        evidential,
        kd_client,
        kd_global,
        total: dtd_total_loss(evidential, kd_client, kd_global, cfg),
    };
    Ok((losses, ext_grads, head_grads))
}

/// The dual-teacher objective value alone.
pub fn dtd_forward_loss(
    aux_extractor: &LayerStack,
    aux_head: &LayerStack,
    teachers: &DtdTeachers<'_>,
    batch: &Batch,
    cfg: &DistillConfig,
    schedule: &AnnealingSchedule,
) -> Result<DtdLosses> {
    dtd_backward(aux_extractor, aux_head, teachers, batch, cfg, schedule).map(|(l, _, _)| l)
}

/// One SGD step on the dual-teacher objective; only the auxiliary parameters
/// move, teachers are read-only snapshots.
pub fn dtd_step(
    aux_extractor: &mut LayerStack,
    aux_head: &mut LayerStack,
    teachers: &DtdTeachers<'_>,
    batch: &Batch,
    cfg: &DistillConfig,
    schedule: &AnnealingSchedule,
    lr: f64,
) -> Result<DtdLosses> {
    let (losses, ext_grads, head_grads) =
        dtd_backward(aux_extractor, aux_head, teachers, batch, cfg, schedule)?;
    sgd_step(aux_extractor, &ext_grads, lr);
    sgd_step(aux_head, &head_grads, lr);
    Ok(losses)
}

/// Reference path for the distillation-free case: plain evidential training
/// of the extractor+head pair. The dual-teacher step with both λ at zero must
/// follow this trajectory bit for bit.
pub fn standalone_evidential_step(
    extractor: &mut LayerStack,
    head: &mut LayerStack,
    batch: &Batch,
    schedule: &AnnealingSchedule,
    lr: f64,
) -> Result<f64> {
    let b = batch.len();
    let inv_b = 1.0 / b as f64;
    let num_classes = head
        .out_dim()
        .ok_or_else(|| Error::Config("head is empty".into()))?;
    let (features, ext_cache) = forward(extractor, &batch.inputs.view())?;
    let (logits, head_cache) = forward(head, &features.view())?;
    let mut dlogits = Array2::zeros(logits.dim());
    let mut loss_sum = 0.0;
    for (row, &label) in batch.labels.iter().enumerate() {
        let mut y = Array1::zeros(num_classes);
        y[label] = 1.0;
        let (loss, grad) = evidential_loss_grad(&logits.row(row), &y.view(), schedule)?;
        loss_sum += loss;
        dlogits.row_mut(row).assign(&(&grad * inv_b));
    }
    let (head_grads, dfeatures) = backward(head, &head_cache, &dlogits.view())?;
    let (ext_grads, _) = backward(extractor, &ext_cache, &dfeatures.view())?;
    sgd_step(extractor, &ext_grads, lr);
    sgd_step(head, &head_grads, lr);
    Ok(loss_sum * inv_b)
}
