use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::loss::{contrastive_loss_with_grad, ContrastiveLoss};
use crate::error::{Error, Result};
use crate::ingest::EmbeddingTable;
use crate::rng::Rng;
use crate::types::{BoundingBox, ObjectInstance, SceneGraphAnnotation};

pub const BOX_DELTA_DIM: usize = 8;

/// Geometry of an ordered box pair: center offsets scaled by the subject size,
/// log width/height ratios, IoU, union area and both box areas relative to the
/// image.
pub fn box_delta(
    subj: &BoundingBox,
    obj: &BoundingBox,
    width: f64,
    height: f64,
) -> [f64; BOX_DELTA_DIM] {
    let (sx, sy) = subj.center();
    let (ox, oy) = obj.center();
    let image_area = (width * height).max(f64::MIN_POSITIVE);
    let inter = subj.intersection_area(obj);
    let union = subj.area() + obj.area() - inter;
    [
        (ox - sx) / subj.width(),
        (oy - sy) / subj.height(),
        (obj.width() / subj.width()).ln(),
        (obj.height() / subj.height()).ln(),
        if union > 0.0 { inter / union } else { 0.0 },
        subj.union_box(obj).area() / image_area,
        subj.area() / image_area,
        obj.area() / image_area,
    ]
}

/// Learnable parameters: the region-to-embedding projection and the linear
/// predicate classifier over `[r_subj; r_obj; box_delta]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationModel {
    pub w_proj: Array2<f64>,
    pub w_cls: Array2<f64>,
    pub b_cls: Array1<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    d_roi: usize,
    d_emb: usize,
    num_predicates: usize,
    w_proj: Vec<f64>,
    w_cls: Vec<f64>,
    b_cls: Vec<f64>,
}

const CHECKPOINT_VERSION: u32 = 1;

impl RelationModel {
    pub fn zeros(d_roi: usize, d_emb: usize, num_predicates: usize) -> Self {
        Self {
            w_proj: Array2::zeros((d_roi, d_emb)),
            w_cls: Array2::zeros((2 * d_roi + BOX_DELTA_DIM, num_predicates)),
            b_cls: Array1::zeros(num_predicates),
        }
    }

    /// Gaussian initialization: projection entries with variance `1/d_roi`,
    /// classifier weights with standard deviation 0.01, zero bias.
    pub fn init(d_roi: usize, d_emb: usize, num_predicates: usize, rng: &mut Rng) -> Self {
        let mut m = Self::zeros(d_roi, d_emb, num_predicates);
        let proj = Normal::new(0.0, (1.0 / d_roi.max(1) as f64).sqrt()).expect("finite std");
        m.w_proj.mapv_inplace(|_| proj.sample(rng));
        m.w_cls
            .mapv_inplace(|_| 0.01 * rng.sample::<f64, _>(rand_distr::StandardNormal));
        m
    }

    pub fn d_roi(&self) -> usize {
        self.w_proj.nrows()
    }

    pub fn d_emb(&self) -> usize {
        self.w_proj.ncols()
    }

    pub fn num_predicates(&self) -> usize {
        self.b_cls.len()
    }

    pub fn input_dim(&self) -> usize {
        self.w_cls.nrows()
    }

    pub fn project(&self, feature: &[f64]) -> Array1<f64> {
        ArrayView1::from(feature).dot(&self.w_proj)
    }

    pub fn pair_input(
        &self,
        subj: &ObjectInstance,
        obj: &ObjectInstance,
        width: f64,
        height: f64,
    ) -> Array1<f64> {
        let d = self.d_roi();
        let mut x = Array1::zeros(self.input_dim());
        x.slice_mut(s![..d])
            .assign(&ArrayView1::from(&subj.feature[..]));
        x.slice_mut(s![d..2 * d])
            .assign(&ArrayView1::from(&obj.feature[..]));
        x.slice_mut(s![2 * d..]).assign(&ArrayView1::from(
            &box_delta(&subj.bbox, &obj.bbox, width, height)[..],
        ));
        x
    }

    pub fn logits(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        x.dot(&self.w_cls) + &self.b_cls
    }

    /// Predicate distribution (softmax of the logits) for one ordered pair.
    pub fn predicate_distribution(&self, x: ArrayView1<'_, f64>) -> Vec<f64> {
        let (p, _) = softmax(self.logits(x).view());
        p.to_vec()
    }

    pub fn apply(&mut self, grads: &Gradients, lr: f64) {
        self.w_proj.scaled_add(-lr, &grads.w_proj);
        self.w_cls.scaled_add(-lr, &grads.w_cls);
        self.b_cls.scaled_add(-lr, &grads.b_cls);
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            d_roi: self.d_roi(),
            d_emb: self.d_emb(),
            num_predicates: self.num_predicates(),
            w_proj: self.w_proj.iter().copied().collect(),
            w_cls: self.w_cls.iter().copied().collect(),
            b_cls: self.b_cls.to_vec(),
        };
        fs::write(path, serde_json::to_string(&ck)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::parse(
                path,
                1,
                format!("unsupported checkpoint version {}", ck.version),
            ));
        }
        let shape_err = |e: ndarray::ShapeError| Error::parse(path, 1, e.to_string());
        let model = Self {
            w_proj: Array2::from_shape_vec((ck.d_roi, ck.d_emb), ck.w_proj).map_err(shape_err)?,
            w_cls: Array2::from_shape_vec(
                (2 * ck.d_roi + BOX_DELTA_DIM, ck.num_predicates),
                ck.w_cls,
            )
            .map_err(shape_err)?,
            b_cls: Array1::from_shape_vec(ck.num_predicates, ck.b_cls).map_err(shape_err)?,
        };
        if model
            .w_proj
            .iter()
            .chain(&model.w_cls)
            .chain(&model.b_cls)
            .any(|v| !v.is_finite())
        {
            return Err(Error::parse(path, 1, "non-finite parameter"));
        }
        Ok(model)
    }
}

/// Softmax and log-softmax of one logit vector.
pub(crate) fn softmax(logits: ArrayView1<'_, f64>) -> (Array1<f64>, Array1<f64>) {
    let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let z: f64 = logits.iter().map(|&x| (x - max).exp()).sum();
    let lse = max + z.ln();
    let log_p = logits.mapv(|x| x - lse);
    (log_p.mapv(f64::exp), log_p)
}

/// Unit vector of `v`, or zeros when `v` is zero. Zero projections get zero
/// similarity and no gradient.
fn normalize(v: ArrayView1<'_, f64>) -> (Array1<f64>, f64) {
    let n = v.dot(&v).sqrt();
    if n > 0.0 {
        (v.mapv(|x| x / n), n)
    } else {
        (Array1::zeros(v.len()), 0.0)
    }
}

/// Everything one image contributes to a training step.
#[derive(Debug, Clone)]
pub struct PairBatch {
    /// Raw region features, one row per object.
    pub features: Array2<f64>,
    /// Unit-normalized projections `r_i W_proj`.
    pub projected: Array2<f64>,
    pub projected_norms: Vec<f64>,
    /// Unit-normalized label embeddings, index-aligned with `projected`.
    pub embeddings: Array2<f64>,
    pub sims: Array2<f64>,
    pub pair_inputs: Array2<f64>,
    pub gold: Vec<usize>,
    pub probs: Array2<f64>,
    pub log_probs: Array2<f64>,
}

impl PairBatch {
    pub fn num_objects(&self) -> usize {
        self.features.nrows()
    }

    pub fn num_pairs(&self) -> usize {
        self.gold.len()
    }
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub batch: PairBatch,
    pub contrastive: ContrastiveLoss,
}

impl Forward {
    /// Predicted distribution of every annotated pair, in triple order.
    pub fn distributions(&self) -> Vec<Vec<f64>> {
        self.batch
            .probs
            .rows()
            .into_iter()
            .map(|r| r.to_vec())
            .collect()
    }
}

/// Runs the projection, similarity and classifier passes for one annotation.
/// Negatives for the contrastive loss are the other objects of the same image.
pub fn forward(
    model: &RelationModel,
    annotation: &SceneGraphAnnotation,
    object_embeddings: &EmbeddingTable,
) -> Result<Forward> {
    let n = annotation.objects.len();
    let d_roi = model.d_roi();
    let d_emb = model.d_emb();
    if object_embeddings.dim != d_emb {
        return Err(Error::DimensionMismatch {
            expected: d_emb,
            actual: object_embeddings.dim,
        });
    }

    let mut features = Array2::zeros((n, d_roi));
    let mut projected = Array2::zeros((n, d_emb));
    let mut projected_norms = Vec::with_capacity(n);
    let mut embeddings = Array2::zeros((n, d_emb));
    for (i, o) in annotation.objects.iter().enumerate() {
        if o.feature.len() != d_roi {
            return Err(Error::DimensionMismatch {
                expected: d_roi,
                actual: o.feature.len(),
            });
        }
        features
            .row_mut(i)
            .assign(&ArrayView1::from(&o.feature[..]));
        let (u, norm) = normalize(model.project(&o.feature).view());
        projected.row_mut(i).assign(&u);
        projected_norms.push(norm);
        let e = object_embeddings
            .get(o.label)
            .ok_or_else(|| Error::MissingEmbedding(format!("object label {}", o.label)))?;
        embeddings
            .row_mut(i)
            .assign(&normalize(ArrayView1::from(e)).0);
    }
    let sims = projected.dot(&embeddings.t());
    let contrastive = super::loss::contrastive_loss(sims.view())?;

    let m = annotation.triples.len();
    let c = model.num_predicates();
    let mut pair_inputs = Array2::zeros((m, model.input_dim()));
    let mut gold = Vec::with_capacity(m);
    let mut probs = Array2::zeros((m, c));
    let mut log_probs = Array2::zeros((m, c));
    for (k, t) in annotation.triples.iter().enumerate() {
        let subj = annotation
            .object(t.subj)
            .ok_or(Error::DanglingObject(t.subj))?;
        let obj = annotation
            .object(t.obj)
            .ok_or(Error::DanglingObject(t.obj))?;
        let x = model.pair_input(subj, obj, annotation.width, annotation.height);
        let (p, lp) = softmax(model.logits(x.view()).view());
        pair_inputs.row_mut(k).assign(&x);
        probs.row_mut(k).assign(&p);
        log_probs.row_mut(k).assign(&lp);
        gold.push(t.pred);
    }

    Ok(Forward {
        batch: PairBatch {
            features,
            projected,
            projected_norms,
            embeddings,
            sims,
            pair_inputs,
            gold,
            probs,
            log_probs,
        },
        contrastive,
    })
}

/// Training objective over a mini-batch of images:
/// `contrastive_weight · mean_images(L_c) + mu · L_IW`, where `L_IW` is the
/// per-pair mean of `pred_weights[gold] · (−log p_gold)`.
#[derive(Debug, Clone)]
pub struct Objective {
    pub contrastive_weight: f64,
    pub mu: f64,
    pub pred_weights: Vec<f64>,
}

impl Objective {
    pub fn new(use_jfl: bool, mu: f64, pred_weights: Vec<f64>) -> Self {
        Self {
            contrastive_weight: if use_jfl { 1.0 } else { 0.0 },
            mu,
            pred_weights,
        }
    }
}

/// Batch-level loss values: `(L_c, L_IW, total)`.
pub fn batch_losses(
    batches: &[PairBatch],
    contrastive: &[ContrastiveLoss],
    objective: &Objective,
) -> (f64, f64, f64) {
    let images = batches.len().max(1) as f64;
    let l_c = contrastive.iter().map(|c| c.total).sum::<f64>() / images;
    let pairs: usize = batches.iter().map(PairBatch::num_pairs).sum();
    let mut l_iw = 0.0;
    for b in batches {
        for (k, &g) in b.gold.iter().enumerate() {
            l_iw -= objective.pred_weights[g] * b.log_probs[(k, g)];
        }
    }
    if pairs > 0 {
        l_iw /= pairs as f64;
    }
    (
        l_c,
        l_iw,
        objective.contrastive_weight * l_c + objective.mu * l_iw,
    )
}

/// Evaluates the objective by running [`forward`] on each annotation.
pub fn objective_value(
    model: &RelationModel,
    annotations: &[&SceneGraphAnnotation],
    object_embeddings: &EmbeddingTable,
    objective: &Objective,
) -> Result<(f64, f64, f64)> {
    let mut batches = Vec::with_capacity(annotations.len());
    let mut losses = Vec::with_capacity(annotations.len());
    for a in annotations {
        let f = forward(model, a, object_embeddings)?;
        losses.push(f.contrastive);
        batches.push(f.batch);
    }
    Ok(batch_losses(&batches, &losses, objective))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w_proj: Array2<f64>,
    pub w_cls: Array2<f64>,
    pub b_cls: Array1<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &RelationModel) -> Self {
        Self {
            w_proj: Array2::zeros(model.w_proj.raw_dim()),
            w_cls: Array2::zeros(model.w_cls.raw_dim()),
            b_cls: Array1::zeros(model.b_cls.raw_dim()),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        self.w_proj += &other.w_proj;
        self.w_cls += &other.w_cls;
        self.b_cls += &other.b_cls;
    }

    pub fn max_abs(&self) -> f64 {
        self.w_proj
            .iter()
            .chain(&self.w_cls)
            .chain(&self.b_cls)
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn image_gradients(
    model: &RelationModel,
    batch: &PairBatch,
    contrastive_scale: f64,
    pair_scale: f64,
    objective: &Objective,
) -> Result<Gradients> {
    let mut g = Gradients::zeros_like(model);

    if contrastive_scale != 0.0 && batch.num_objects() > 0 {
        let (_, ds) = contrastive_loss_with_grad(batch.sims.view())?;
        // dL/du_i = Σ_j dS_ij ê_j, then through u = z/‖z‖.
        let du = ds.dot(&batch.embeddings);
        let mut dz = Array2::zeros(du.raw_dim());
        for i in 0..batch.num_objects() {
            let norm = batch.projected_norms[i];
            if norm == 0.0 {
                continue;
            }
            let u = batch.projected.row(i);
            let dui = du.row(i);
            let radial = u.dot(&dui);
            let mut row = dz.row_mut(i);
            row.assign(&((&dui - &(&u * radial)) * (contrastive_scale / norm)));
        }
        g.w_proj = batch.features.t().dot(&dz);
    }

    if pair_scale != 0.0 && batch.num_pairs() > 0 {
        let mut dlogits = batch.probs.clone();
        for (k, &gold) in batch.gold.iter().enumerate() {
            dlogits[(k, gold)] -= 1.0;
            let w = objective.pred_weights[gold] * pair_scale;
            dlogits.row_mut(k).mapv_inplace(|v| v * w);
        }
        g.w_cls = batch.pair_inputs.t().dot(&dlogits);
        g.b_cls = dlogits.sum_axis(Axis(0));
    }
    Ok(g)
}

/// Exact gradients of the [`Objective`] over `batches`. Per-image terms are
/// computed in parallel and summed in image order, so results are
/// bit-reproducible.
pub fn backward(
    model: &RelationModel,
    batches: &[PairBatch],
    objective: &Objective,
) -> Result<Gradients> {
    use rayon::prelude::*;

    let contrastive_scale = objective.contrastive_weight / batches.len().max(1) as f64;
    let pairs: usize = batches.iter().map(PairBatch::num_pairs).sum();
    let pair_scale = if pairs > 0 {
        objective.mu / pairs as f64
    } else {
        0.0
    };

    let parts = batches
        .par_iter()
        .map(|b| image_gradients(model, b, contrastive_scale, pair_scale, objective))
        .collect::<Result<Vec<_>>>()?;
    let mut total = Gradients::zeros_like(model);
    for p in &parts {
        total.add_assign(p);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::types::{fixtures, LabelKind, Triple};

    fn embeddings(c: usize, d: usize) -> EmbeddingTable {
        EmbeddingTable::new(
            LabelKind::Object,
            d,
            (0..c)
                .map(|i| (0..d).map(|k| ((i * 7 + k * 3) % 5) as f64 - 1.5).collect())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn box_delta_of_identical_boxes() {
        let b = BoundingBox::new(0.0, 0.0, 10.0, 20.0);
        let d = box_delta(&b, &b, 100.0, 100.0);
        assert_eq!(d, [0.0, 0.0, 0.0, 0.0, 1.0, 0.02, 0.02, 0.02]);
    }

    #[test]
    fn single_object_image_has_no_contrastive_loss() {
        let model = RelationModel::init(3, 4, 2, &mut rng::substream(1, rng::INIT));
        let a = fixtures::annotation(vec![fixtures::object(0, 1, 3)], vec![]);
        let f = forward(&model, &a, &embeddings(3, 4)).unwrap();
        assert_eq!(f.contrastive.total, 0.0);
        assert_eq!(f.batch.num_pairs(), 0);
    }

    #[test]
    fn empty_image() {
        let model = RelationModel::init(3, 4, 2, &mut rng::substream(1, rng::INIT));
        let f = forward(
            &model,
            &fixtures::annotation(vec![], vec![]),
            &embeddings(3, 4),
        )
        .unwrap();
        assert_eq!(f.contrastive.total, 0.0);
        assert_eq!(f.batch.num_pairs(), 0);
    }

    #[test]
    fn duplicate_objects_give_ln_two() {
        let model = RelationModel::init(3, 4, 2, &mut rng::substream(1, rng::INIT));
        let mut o1 = fixtures::object(1, 2, 3);
        let o0 = fixtures::object(0, 2, 3);
        o1.feature = o0.feature.clone();
        let f = forward(
            &model,
            &fixtures::annotation(vec![o0, o1], vec![]),
            &embeddings(3, 4),
        )
        .unwrap();
        assert!((f.contrastive.total - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_mu_leaves_classifier_untouched() {
        let model = RelationModel::init(3, 4, 2, &mut rng::substream(3, rng::INIT));
        let a = fixtures::annotation(
            vec![fixtures::object(0, 0, 3), fixtures::object(1, 2, 3)],
            vec![Triple {
                subj: 0,
                pred: 1,
                obj: 1,
            }],
        );
        let f = forward(&model, &a, &embeddings(3, 4)).unwrap();
        let with_mu = backward(
            &model,
            std::slice::from_ref(&f.batch),
            &Objective::new(true, 1.2, vec![1.0, 1.0]),
        )
        .unwrap();
        let no_mu = backward(
            &model,
            &[f.batch],
            &Objective::new(true, 0.0, vec![1.0, 1.0]),
        )
        .unwrap();
        assert!(no_mu.w_cls.iter().all(|&v| v == 0.0));
        assert!(no_mu.b_cls.iter().all(|&v| v == 0.0));
        assert_eq!(no_mu.w_proj, with_mu.w_proj);
    }

    #[test]
    fn zero_projection_has_zero_gradient() {
        let model = RelationModel::zeros(3, 4, 3);
        let a = fixtures::annotation(
            vec![fixtures::object(0, 0, 3), fixtures::object(1, 1, 3)],
            vec![Triple {
                subj: 0,
                pred: 0,
                obj: 1,
            }],
        );
        let f = forward(&model, &a, &embeddings(3, 4)).unwrap();
        assert!((f.contrastive.total - 2f64.ln()).abs() < 1e-12);
        let g = backward(&model, &[f.batch], &Objective::new(true, 1.0, vec![1.0; 3])).unwrap();
        assert!(g.w_proj.iter().all(|&v| v == 0.0));
        // Predicates 1 and 2 are interchangeable under a zero classifier.
        assert_eq!(g.w_cls.column(1), g.w_cls.column(2));
        assert_eq!(g.b_cls[1], g.b_cls[2]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = RelationModel::init(3, 4, 5, &mut rng::substream(9, rng::INIT));
        let f = tempfile::NamedTempFile::new().unwrap();
        model.save(f.path()).unwrap();
        assert_eq!(RelationModel::load(f.path()).unwrap(), model);
    }
}
