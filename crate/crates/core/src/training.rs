//! Symmetric InfoNCE training of the location encoder and projection heads.
//!
//! Gradients are derived by hand: InfoNCE → ℓ2 normalization → MLP layers.
//! The RFF frequency matrices are frozen and receive no gradient.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::{EncoderError, FeatureRecord, GeoModel, Linear, LocationTrace, MlpTrace};
use crate::scalar::{dot, l2_norm, Scalar};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("embedding lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("batch size {batch} exceeds dataset size {dataset}")]
    BatchLargerThanDataset { batch: usize, dataset: usize },
    #[error("parameter/gradient shape mismatch at tensor {0}")]
    ShapeMismatch(usize),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Optimization settings. The default batch size is sized for desk-scale runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Temperature β dividing cosine similarities.
    pub temperature: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Incomplete trailing batches are dropped.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            temperature: 3.99,
            learning_rate: 3e-5,
            weight_decay: 1e-6,
            batch_size: 32,
            epochs: 2,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("invalid AdamW moment parameters");
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWParams {
        AdamWParams {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// The four directional contrastive terms and their halved sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub img_txt: f64,
    pub txt_img: f64,
    pub img_loc: f64,
    pub loc_img: f64,
    pub total: f64,
}

impl LossReport {
    pub fn from_terms(img_txt: f64, txt_img: f64, img_loc: f64, loc_img: f64) -> Self {
        Self {
            img_txt,
            txt_img,
            img_loc,
            loc_img,
            total: 0.5 * (img_txt + txt_img + img_loc + loc_img),
        }
    }
}

fn check_pair<T: Scalar>(a: &[Vec<T>], b: &[Vec<T>]) -> Result<(), TrainError> {
    if a.len() != b.len() {
        return Err(TrainError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let d = a[0].len();
    for row in a.iter().chain(b) {
        if row.len() != d {
            return Err(TrainError::LengthMismatch(d, row.len()));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFinite("embeddings"));
        }
    }
    Ok(())
}

/// Row-wise softmax of `⟨a_i, b_j⟩/β` and the per-row loss `−log p_ii`.
fn softmax_rows<T: Scalar>(a: &[Vec<T>], b: &[Vec<T>], beta: T) -> (Vec<Vec<T>>, Vec<T>) {
    let mut probs = Vec::with_capacity(a.len());
    let mut losses = Vec::with_capacity(a.len());
    for (i, ai) in a.iter().enumerate() {
        let logits: Vec<T> = b.iter().map(|bj| dot(ai, bj) / beta).collect();
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        let log_sum = max + sum.ln();
        losses.push(log_sum - logits[i]);
        probs.push(exps.into_iter().map(|e| e / sum).collect());
    }
    (probs, losses)
}

/// Contrastive loss from modality `a` to `b` with in-batch negatives.
pub fn info_nce<T: Scalar>(a: &[Vec<T>], b: &[Vec<T>], beta: T) -> Result<T, TrainError> {
    check_pair(a, b)?;
    let (_, losses) = softmax_rows(a, b, beta);
    let n = T::of(a.len() as f64);
    let loss = losses.into_iter().sum::<T>() / n;
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(TrainError::NonFinite("loss"))
    }
}

/// `∂L/∂S` where `S_ij = ⟨a_i, b_j⟩/β`.
pub fn logit_gradients<T: Scalar>(a: &[Vec<T>], b: &[Vec<T>], beta: T) -> Result<Vec<Vec<T>>, TrainError> {
    check_pair(a, b)?;
    let (mut probs, _) = softmax_rows(a, b, beta);
    let n = T::of(a.len() as f64);
    for (i, row) in probs.iter_mut().enumerate() {
        row[i] = row[i] - T::one();
        for v in row.iter_mut() {
            *v = *v / n;
        }
    }
    Ok(probs)
}

/// Loss, then gradients with respect to `a` and `b`.
pub type LossWithGrads<T> = (T, Vec<Vec<T>>, Vec<Vec<T>>);

/// Loss and its gradients with respect to both embedding lists.
pub fn info_nce_with_grad<T: Scalar>(
    a: &[Vec<T>],
    b: &[Vec<T>],
    beta: T,
) -> Result<LossWithGrads<T>, TrainError> {
    check_pair(a, b)?;
    let (mut probs, losses) = softmax_rows(a, b, beta);
    let n = T::of(a.len() as f64);
    let loss = losses.into_iter().sum::<T>() / n;
    for (i, row) in probs.iter_mut().enumerate() {
        row[i] = row[i] - T::one();
        for v in row.iter_mut() {
            *v = *v / (n * beta);
        }
    }
    let d = a[0].len();
    let mut da = vec![vec![T::zero(); d]; a.len()];
    let mut db = vec![vec![T::zero(); d]; b.len()];
    for (i, row) in probs.iter().enumerate() {
        for (j, &g) in row.iter().enumerate() {
            for k in 0..d {
                da[i][k] = da[i][k] + g * b[j][k];
                db[j][k] = db[j][k] + g * a[i][k];
            }
        }
    }
    Ok((loss, da, db))
}

/// Normalized embeddings of one batch, one row per record.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEmbeddings<T> {
    pub img_txt: Vec<Vec<T>>,
    pub img_loc: Vec<Vec<T>>,
    pub txt: Vec<Vec<T>>,
    pub loc: Vec<Vec<T>>,
}

/// `½(L_img,txt + L_txt,img + L_img,loc + L_loc,img)`.
pub fn total_loss<T: Scalar>(batch: &BatchEmbeddings<T>, beta: T) -> Result<LossReport, TrainError> {
    Ok(LossReport::from_terms(
        info_nce(&batch.img_txt, &batch.txt, beta)?.as_f64(),
        info_nce(&batch.txt, &batch.img_txt, beta)?.as_f64(),
        info_nce(&batch.img_loc, &batch.loc, beta)?.as_f64(),
        info_nce(&batch.loc, &batch.img_loc, beta)?.as_f64(),
    ))
}

/// Gradients for every trainable tensor of a [`GeoModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub loc: Vec<Vec<Linear<T>>>,
    pub f_txt: Vec<Linear<T>>,
    pub f_loc: Vec<Linear<T>>,
    pub g_txt: Vec<Linear<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(model: &GeoModel<T>) -> Self {
        Self {
            loc: model.encoder.branches().iter().map(|b| b.mlp.zeros_like()).collect(),
            f_txt: model.heads.f_txt.zeros_like(),
            f_loc: model.heads.f_loc.zeros_like(),
            g_txt: model.heads.g_txt.zeros_like(),
        }
    }

    /// Flattened tensors in the order of [`GeoModel::trainable`].
    pub fn tensors(&self) -> Vec<&[T]> {
        self.loc
            .iter()
            .chain([&self.f_txt, &self.f_loc, &self.g_txt])
            .flat_map(|layers| layers.iter().flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()]))
            .collect()
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

struct RecordForward<T> {
    img_txt: (MlpTrace<T>, Vec<T>),
    img_loc: (MlpTrace<T>, Vec<T>),
    txt: (MlpTrace<T>, Vec<T>),
    loc: (LocationTrace<T>, Vec<T>),
}

fn unit<T: Scalar>(raw: &[T]) -> Result<Vec<T>, TrainError> {
    crate::scalar::normalized(raw).ok_or(TrainError::Encoder(EncoderError::DegenerateNormalization))
}

fn forward_record<T: Scalar>(model: &GeoModel<T>, r: &FeatureRecord<T>) -> Result<RecordForward<T>, TrainError> {
    let h = &model.heads;
    let t = h.f_txt.forward_traced(&r.visual)?;
    let l = h.f_loc.forward_traced(&r.visual)?;
    let x = h.g_txt.forward_traced(&r.text_feature)?;
    let g = model.encoder.forward_traced(r.gps)?;
    let (et, el, ex, eg) = (unit(t.output())?, unit(l.output())?, unit(x.output())?, unit(&g.raw)?);
    Ok(RecordForward {
        img_txt: (t, et),
        img_loc: (l, el),
        txt: (x, ex),
        loc: (g, eg),
    })
}

fn forward_batch<T: Scalar>(
    model: &GeoModel<T>,
    batch: &[&FeatureRecord<T>],
) -> Result<(Vec<RecordForward<T>>, BatchEmbeddings<T>), TrainError> {
    let fwd: Vec<RecordForward<T>> = batch
        .par_iter()
        .map(|r| forward_record(model, r))
        .collect::<Result<_, _>>()?;
    let emb = BatchEmbeddings {
        img_txt: fwd.iter().map(|f| f.img_txt.1.clone()).collect(),
        img_loc: fwd.iter().map(|f| f.img_loc.1.clone()).collect(),
        txt: fwd.iter().map(|f| f.txt.1.clone()).collect(),
        loc: fwd.iter().map(|f| f.loc.1.clone()).collect(),
    };
    Ok((fwd, emb))
}

/// Normalized embeddings for a batch (forward pass only).
pub fn embed_batch<T: Scalar>(
    model: &GeoModel<T>,
    batch: &[&FeatureRecord<T>],
) -> Result<BatchEmbeddings<T>, TrainError> {
    Ok(forward_batch(model, batch)?.1)
}

pub fn batch_loss<T: Scalar>(
    model: &GeoModel<T>,
    batch: &[&FeatureRecord<T>],
    beta: T,
) -> Result<LossReport, TrainError> {
    total_loss(&embed_batch(model, batch)?, beta)
}

/// Backpropagates `de` through `e = u/‖u‖`.
fn normalize_backward<T: Scalar>(raw: &[T], e: &[T], de: &[T]) -> Vec<T> {
    let r = l2_norm(raw);
    let proj = dot(e, de);
    e.iter().zip(de).map(|(&ei, &gi)| (gi - ei * proj) / r).collect()
}

fn half_sum<T: Scalar>(x: &[Vec<T>], y: &[Vec<T>]) -> Vec<Vec<T>> {
    let half = T::of(0.5);
    x.iter()
        .zip(y)
        .map(|(a, b)| a.iter().zip(b).map(|(&p, &q)| half * (p + q)).collect())
        .collect()
}

/// Total loss and analytic gradients for one batch.
pub fn loss_and_gradients<T: Scalar>(
    model: &GeoModel<T>,
    batch: &[&FeatureRecord<T>],
    beta: T,
) -> Result<(LossReport, Gradients<T>), TrainError> {
    let (fwd, emb) = forward_batch(model, batch)?;
    let (l1, d_it_1, d_tx_1) = info_nce_with_grad(&emb.img_txt, &emb.txt, beta)?;
    let (l2, d_tx_2, d_it_2) = info_nce_with_grad(&emb.txt, &emb.img_txt, beta)?;
    let (l3, d_il_3, d_lo_3) = info_nce_with_grad(&emb.img_loc, &emb.loc, beta)?;
    let (l4, d_lo_4, d_il_4) = info_nce_with_grad(&emb.loc, &emb.img_loc, beta)?;
    let report = LossReport::from_terms(l1.as_f64(), l2.as_f64(), l3.as_f64(), l4.as_f64());

    let d_img_txt = half_sum(&d_it_1, &d_it_2);
    let d_txt = half_sum(&d_tx_1, &d_tx_2);
    let d_img_loc = half_sum(&d_il_3, &d_il_4);
    let d_loc = half_sum(&d_lo_3, &d_lo_4);

    let mut grads = Gradients::zeros_like(model);
    let h = &model.heads;
    for (i, f) in fwd.iter().enumerate() {
        let (tr, e) = &f.img_txt;
        h.f_txt.backward(tr, &normalize_backward(tr.output(), e, &d_img_txt[i]), &mut grads.f_txt);
        let (tr, e) = &f.img_loc;
        h.f_loc.backward(tr, &normalize_backward(tr.output(), e, &d_img_loc[i]), &mut grads.f_loc);
        let (tr, e) = &f.txt;
        h.g_txt.backward(tr, &normalize_backward(tr.output(), e, &d_txt[i]), &mut grads.g_txt);
        let (lt, e) = &f.loc;
        let du = normalize_backward(&lt.raw, e, &d_loc[i]);
        for ((branch, trace), g) in model
            .encoder
            .branches()
            .iter()
            .zip(&lt.branch_traces)
            .zip(grads.loc.iter_mut())
        {
            branch.mlp.backward(trace, &du, g);
        }
    }
    if grads.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
        return Err(TrainError::NonFinite("gradients"));
    }
    Ok((report, grads))
}

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        TrainConfig::default().adamw()
    }
}

/// First/second moment accumulators mirroring the parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(tensor_lens: &[usize]) -> Self {
        Self {
            m: tensor_lens.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: tensor_lens.iter().map(|&n| vec![T::zero(); n]).collect(),
            step: 0,
        }
    }

    pub fn for_model(model: &GeoModel<T>) -> Self {
        let lens: Vec<usize> = model.trainable().iter().map(|t| t.len()).collect();
        Self::new(&lens)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One decoupled-weight-decay Adam update.
pub fn adamw_step<T: Scalar>(
    params: Vec<&mut [T]>,
    grads: &[&[T]],
    state: &mut AdamWState<T>,
    cfg: &AdamWParams,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::ShapeMismatch(params.len().min(grads.len())));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(TrainError::ShapeMismatch(i));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let bc1 = T::of(1.0 - cfg.beta1.powi(t));
    let bc2 = T::of(1.0 - cfg.beta2.powi(t));
    let lr = T::of(cfg.learning_rate);
    let decay = T::of(cfg.learning_rate * cfg.weight_decay);
    let eps = T::of(cfg.eps);
    let one = T::one();
    for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for k in 0..p.len() {
            m[k] = b1 * m[k] + (one - b1) * g[k];
            v[k] = b2 * v[k] + (one - b2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] = p[k] - decay * p[k] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub report: LossReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: GeoModel<T>,
    pub history: Vec<StepRecord>,
}

impl<T> TrainOutcome<T> {
    /// Mean total loss of each epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        epoch_means(&self.history)
    }
}

pub fn epoch_means(history: &[StepRecord]) -> Vec<f64> {
    let epochs = history.iter().map(|s| s.epoch + 1).max().unwrap_or(0);
    (0..epochs)
        .map(|e| {
            let steps: Vec<f64> = history.iter().filter(|s| s.epoch == e).map(|s| s.report.total).collect();
            steps.iter().sum::<f64>() / steps.len().max(1) as f64
        })
        .collect()
}

/// Trains `model` over `dataset` with seeded per-epoch shuffling.
pub fn train<T: Scalar>(
    dataset: &[FeatureRecord<T>],
    mut model: GeoModel<T>,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if config.batch_size > dataset.len() {
        return Err(TrainError::BatchLargerThanDataset {
            batch: config.batch_size,
            dataset: dataset.len(),
        });
    }
    let d_v = model.heads.visual_dim();
    for r in dataset {
        r.validate(d_v)?;
    }
    let beta = T::of(config.temperature);
    let opt = config.adamw();
    let mut state = AdamWState::for_model(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::new();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks_exact(config.batch_size) {
            let batch: Vec<&FeatureRecord<T>> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (report, grads) = loss_and_gradients(&model, &batch, beta)?;
            adamw_step(model.trainable_mut(), &grads.tensors(), &mut state, &opt)?;
            log::debug!("epoch {epoch} step {} loss {:.6}", history.len(), report.total);
            history.push(StepRecord {
                step: history.len(),
                epoch,
                report,
            });
        }
    }
    Ok(TrainOutcome { model, history })
}

/// Writes the loss curve as CSV: `step,epoch,img_txt,txt_img,img_loc,loc_img,total`.
pub fn write_loss_csv<W: Write>(writer: W, history: &[StepRecord]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["step", "epoch", "img_txt", "txt_img", "img_loc", "loc_img", "total"])?;
    for s in history {
        let r = &s.report;
        w.write_record([
            s.step.to_string(),
            s.epoch.to_string(),
            r.img_txt.to_string(),
            r.txt_img.to_string(),
            r.img_loc.to_string(),
            r.loc_img.to_string(),
            r.total.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
