//! The black-box ranking model: a linear fusion of the user-feature and
//! item-feature vectors followed by fully connected ReLU layers and a
//! sigmoid output. Backprop is implemented by hand so the model can
//! expose exact gradients with respect to its inputs.

use std::collections::HashSet;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::DatasetSplit;
use crate::matrices::FeatureMatrices;

/// How the user and item feature vectors are fused before the dense
/// stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeKind {
    /// Element-wise product of the projected vectors (width `h`).
    Product,
    /// Concatenation of the projected vectors (width `2h`).
    Concat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// out×in weights.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Frozen architecture: `merge(W_U a, W_V b)` → dense ReLU layers →
/// 1-unit output → sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct RankerModel {
    pub merge: MergeKind,
    /// h×r user projection.
    pub w_user: Array2<f64>,
    /// h×r item projection.
    pub w_item: Array2<f64>,
    /// Dense stack; every layer but the last is followed by ReLU, the
    /// last has a single unit followed by sigmoid.
    pub layers: Vec<DenseLayer>,
    pub seed: u64,
}

pub const DEFAULT_HIDDEN: [usize; 2] = [256, 64];

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn xavier(rng: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    use rand::Rng;
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

/// Initialize a model with the default dense stack (256 → 64 → 1).
/// Weights are Xavier-uniform, biases zero; deterministic under `seed`.
pub fn init_model(merge: MergeKind, r: usize, h: usize, seed: u64) -> RankerModel {
    init_model_with_hidden(merge, r, h, &DEFAULT_HIDDEN, seed)
}

/// Initialize with custom hidden widths (the output unit is appended).
pub fn init_model_with_hidden(
    merge: MergeKind,
    r: usize,
    h: usize,
    hidden: &[usize],
    seed: u64,
) -> RankerModel {
    assert!(r >= 1 && h >= 1, "r and h must be at least 1");
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);

    let w_user = xavier(&mut rng, h, r);
    let w_item = xavier(&mut rng, h, r);

    let merged_dim = match merge {
        MergeKind::Product => h,
        MergeKind::Concat => 2 * h,
    };
    let mut dims = vec![merged_dim];
    dims.extend_from_slice(hidden);
    dims.push(1);

    let layers = dims
        .windows(2)
        .map(|w| DenseLayer {
            w: xavier(&mut rng, w[1], w[0]),
            b: Array1::zeros(w[1]),
        })
        .collect();

    RankerModel {
        merge,
        w_user,
        w_item,
        layers,
        seed,
    }
}

impl RankerModel {
    pub fn num_features(&self) -> usize {
        self.w_user.ncols()
    }

    pub fn fusion_width(&self) -> usize {
        self.w_user.nrows()
    }

    pub fn merged_dim(&self) -> usize {
        match self.merge {
            MergeKind::Product => self.fusion_width(),
            MergeKind::Concat => 2 * self.fusion_width(),
        }
    }

    /// Projected user vector `W_U a`.
    pub fn fuse_user(&self, a: &Array1<f64>) -> Array1<f64> {
        self.w_user.dot(a)
    }

    /// Projected item vector `W_V b`.
    pub fn fuse_item(&self, b: &Array1<f64>) -> Array1<f64> {
        self.w_item.dot(b)
    }

    fn merge_fused(&self, fu: &Array1<f64>, fv: &Array1<f64>) -> Array1<f64> {
        match self.merge {
            MergeKind::Product => fu * fv,
            MergeKind::Concat => {
                let mut out = Array1::zeros(fu.len() + fv.len());
                out.slice_mut(ndarray::s![..fu.len()]).assign(fu);
                out.slice_mut(ndarray::s![fu.len()..]).assign(fv);
                out
            }
        }
    }

    /// Score a pair of already-projected vectors. All scoring paths in
    /// the crate go through this one implementation.
    pub fn score_fused(&self, fu: &Array1<f64>, fv: &Array1<f64>) -> f64 {
        let mut x = self.merge_fused(fu, fv);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.w.dot(&x);
            z += &layer.b;
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            x = z;
        }
        sigmoid(x[0])
    }

    /// Predicted ranking score in (0, 1).
    pub fn score(&self, a: &Array1<f64>, b: &Array1<f64>) -> f64 {
        self.score_fused(&self.fuse_user(a), &self.fuse_item(b))
    }

    /// Forward pass retaining the intermediate activations for backprop.
    pub fn forward(&self, a: &Array1<f64>, b: &Array1<f64>) -> ForwardCache {
        let fused_user = self.fuse_user(a);
        let fused_item = self.fuse_item(b);
        self.forward_fused(a.clone(), b.clone(), fused_user, fused_item)
    }

    fn forward_fused(
        &self,
        a: Array1<f64>,
        b: Array1<f64>,
        fused_user: Array1<f64>,
        fused_item: Array1<f64>,
    ) -> ForwardCache {
        let merged = self.merge_fused(&fused_user, &fused_item);
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut x = merged;
        for (i, layer) in self.layers.iter().enumerate() {
            inputs.push(x.clone());
            let mut z = layer.w.dot(&x);
            z += &layer.b;
            pre_activations.push(z.clone());
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            x = z;
        }
        let logit = x[0];
        ForwardCache {
            a,
            b,
            fused_user,
            fused_item,
            inputs,
            pre_activations,
            logit,
            score: sigmoid(logit),
        }
    }

    /// Backpropagate `d_logit` (gradient of some scalar loss with respect
    /// to the output logit) down to the inputs, optionally accumulating
    /// parameter gradients.
    fn backprop(
        &self,
        cache: &ForwardCache,
        d_logit: f64,
        mut params: Option<&mut ParamGrads>,
    ) -> (Array1<f64>, Array1<f64>) {
        let mut dz = Array1::from_elem(1, d_logit);
        for i in (0..self.layers.len()).rev() {
            if let Some(p) = params.as_deref_mut() {
                for (row, &g) in dz.iter().enumerate() {
                    if g != 0.0 {
                        let mut w_row = p.layers[i].w.row_mut(row);
                        w_row.scaled_add(g, &cache.inputs[i]);
                    }
                }
                p.layers[i].b += &dz;
            }
            let mut dx = self.layers[i].w.t().dot(&dz);
            if i > 0 {
                // ReLU mask of the previous layer (derivative 0 at z <= 0).
                let z_prev = &cache.pre_activations[i - 1];
                for (g, &z) in dx.iter_mut().zip(z_prev.iter()) {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            dz = dx;
        }
        let d_merged = dz;

        let h = self.fusion_width();
        let (d_fused_user, d_fused_item) = match self.merge {
            MergeKind::Product => (
                &d_merged * &cache.fused_item,
                &d_merged * &cache.fused_user,
            ),
            MergeKind::Concat => (
                d_merged.slice(ndarray::s![..h]).to_owned(),
                d_merged.slice(ndarray::s![h..]).to_owned(),
            ),
        };

        if let Some(p) = params.as_deref_mut() {
            for (row, &g) in d_fused_user.iter().enumerate() {
                if g != 0.0 {
                    p.w_user.row_mut(row).scaled_add(g, &cache.a);
                }
            }
            for (row, &g) in d_fused_item.iter().enumerate() {
                if g != 0.0 {
                    p.w_item.row_mut(row).scaled_add(g, &cache.b);
                }
            }
        }

        let da = self.w_user.t().dot(&d_fused_user);
        let db = self.w_item.t().dot(&d_fused_item);
        (da, db)
    }

    /// Gradients of a loss with respect to the input vectors, given the
    /// loss gradient at the output logit.
    pub fn input_grads(
        &self,
        cache: &ForwardCache,
        d_logit: f64,
    ) -> (Array1<f64>, Array1<f64>) {
        self.backprop(cache, d_logit, None)
    }

    /// Accumulate parameter gradients for a loss with gradient `d_logit`
    /// at the output logit.
    pub fn accumulate_param_grads(
        &self,
        cache: &ForwardCache,
        d_logit: f64,
        grads: &mut ParamGrads,
    ) {
        self.backprop(cache, d_logit, Some(grads));
    }

    /// Exact gradient of the score with respect to each input vector.
    pub fn grad_wrt_inputs(&self, a: &Array1<f64>, b: &Array1<f64>) -> (Array1<f64>, Array1<f64>) {
        let cache = self.forward(a, b);
        let d_logit = cache.score * (1.0 - cache.score);
        self.input_grads(&cache, d_logit)
    }

    /// FNV hash over the exact bit patterns of all parameters; used to
    /// verify that explanation and evaluation leave the model untouched.
    pub fn params_fingerprint(&self) -> u64 {
        let mut bytes = Vec::new();
        let mut push = |arr: &[f64]| {
            for v in arr {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        };
        push(self.w_user.as_slice().unwrap());
        push(self.w_item.as_slice().unwrap());
        for layer in &self.layers {
            push(layer.w.as_slice().unwrap());
            push(layer.b.as_slice().unwrap());
        }
        crate::seed::stable_hash(&bytes)
    }

    /// Flatten all parameters (canonical order, row-major).
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend(self.w_user.iter().copied());
        out.extend(self.w_item.iter().copied());
        for layer in &self.layers {
            out.extend(layer.w.iter().copied());
            out.extend(layer.b.iter().copied());
        }
        out
    }

    /// Inverse of [`flatten_params`].
    pub fn assign_params(&mut self, flat: &[f64]) -> Result<()> {
        let mut offset = 0;
        let take = |len: usize, offset: &mut usize| -> Result<Vec<f64>> {
            if *offset + len > flat.len() {
                return Err(Error::data("parameter blob too short"));
            }
            let out = flat[*offset..*offset + len].to_vec();
            *offset += len;
            Ok(out)
        };
        let (h, r) = (self.fusion_width(), self.num_features());
        self.w_user = Array2::from_shape_vec((h, r), take(h * r, &mut offset)?)
            .map_err(|e| Error::data(e.to_string()))?;
        self.w_item = Array2::from_shape_vec((h, r), take(h * r, &mut offset)?)
            .map_err(|e| Error::data(e.to_string()))?;
        for layer in &mut self.layers {
            let (o, i) = (layer.w.nrows(), layer.w.ncols());
            layer.w = Array2::from_shape_vec((o, i), take(o * i, &mut offset)?)
                .map_err(|e| Error::data(e.to_string()))?;
            layer.b = Array1::from_vec(take(o, &mut offset)?);
        }
        if offset != flat.len() {
            return Err(Error::data("parameter blob too long"));
        }
        Ok(())
    }
}

/// Intermediate activations of one forward pass.
pub struct ForwardCache {
    pub a: Array1<f64>,
    pub b: Array1<f64>,
    pub fused_user: Array1<f64>,
    pub fused_item: Array1<f64>,
    /// Input of each dense layer.
    pub inputs: Vec<Array1<f64>>,
    /// Pre-activation of each dense layer.
    pub pre_activations: Vec<Array1<f64>>,
    pub logit: f64,
    pub score: f64,
}

/// Parameter-shaped gradient accumulator.
pub struct ParamGrads {
    pub w_user: Array2<f64>,
    pub w_item: Array2<f64>,
    pub layers: Vec<DenseLayer>,
}

impl ParamGrads {
    pub fn zeros_like(model: &RankerModel) -> Self {
        ParamGrads {
            w_user: Array2::zeros(model.w_user.raw_dim()),
            w_item: Array2::zeros(model.w_item.raw_dim()),
            layers: model
                .layers
                .iter()
                .map(|l| DenseLayer {
                    w: Array2::zeros(l.w.raw_dim()),
                    b: Array1::zeros(l.b.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.w_user *= factor;
        self.w_item *= factor;
        for l in &mut self.layers {
            l.w *= factor;
            l.b *= factor;
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend(self.w_user.iter().copied());
        out.extend(self.w_item.iter().copied());
        for layer in &self.layers {
            out.extend(layer.w.iter().copied());
            out.extend(layer.b.iter().copied());
        }
        out
    }
}

/// All users' top-K lists plus the candidate pools they were ranked over.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Slate {
    pub k: usize,
    pub users: Vec<usize>,
    /// Ranked item indices per user, length `k`, score descending with
    /// ties broken by item index ascending.
    pub lists: Vec<Vec<usize>>,
    pub candidates: Vec<Vec<usize>>,
}

impl Slate {
    /// A shallow per-list prefix of this slate.
    pub fn truncated(&self, k: usize) -> Slate {
        assert!(k <= self.k, "cannot extend a slate (k {} > {})", k, self.k);
        Slate {
            k,
            users: self.users.clone(),
            lists: self.lists.iter().map(|l| l[..k].to_vec()).collect(),
            candidates: self.candidates.clone(),
        }
    }
}

/// Rank each user's candidates by model score (descending, ties by item
/// index ascending) and keep the top `k`.
pub fn top_k(
    model: &RankerModel,
    mats: &FeatureMatrices,
    users: &[usize],
    candidates: &[Vec<usize>],
    k: usize,
) -> Slate {
    assert_eq!(users.len(), candidates.len());
    let fused_items: Vec<Array1<f64>> = (0..mats.num_items())
        .map(|v| model.fuse_item(&mats.b.row(v).to_owned()))
        .collect();

    let mut lists = Vec::with_capacity(users.len());
    for (&u, cands) in users.iter().zip(candidates) {
        assert!(k <= cands.len(), "k = {k} exceeds candidate count {}", cands.len());
        let fused_user = model.fuse_user(&mats.a.row(u).to_owned());
        let mut scored: Vec<(usize, f64)> = cands
            .iter()
            .map(|&v| (v, model.score_fused(&fused_user, &fused_items[v])))
            .collect();
        scored.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        lists.push(scored.iter().take(k).map(|&(v, _)| v).collect());
    }
    Slate {
        k,
        users: users.to_vec(),
        lists,
        candidates: candidates.to_vec(),
    }
}

/// Mean ranking quality at one cutoff, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub k: usize,
    /// Mean F1 between precision@k and recall@k, percent.
    pub f1: f64,
    /// Mean NDCG@k with binary relevance, percent.
    pub ndcg: f64,
}

/// Evaluate slates against the held-out positives at each cutoff in
/// `k_list`. Slate lists must be at least `max(k_list)` long and cover
/// every user of the split.
pub fn evaluate_ranking(
    slate: &Slate,
    split: &DatasetSplit,
    k_list: &[usize],
) -> Result<Vec<RankingMetrics>> {
    let m = split.num_users();
    let covered: HashSet<usize> = slate.users.iter().copied().collect();
    for u in 0..m {
        if !covered.contains(&u) {
            return Err(Error::data(format!("user {u} missing from slates")));
        }
    }
    let max_k = k_list.iter().copied().max().unwrap_or(0);
    if max_k > slate.k {
        return Err(Error::data(format!(
            "slates of length {} cannot be evaluated at K = {max_k}",
            slate.k
        )));
    }

    let mut out = Vec::with_capacity(k_list.len());
    for &k in k_list {
        let mut f1_sum = 0.0;
        let mut ndcg_sum = 0.0;
        for (idx, &u) in slate.users.iter().enumerate() {
            let positives: HashSet<usize> = split.test_positives[u].iter().copied().collect();
            let p = positives.len();
            let list = &slate.lists[idx][..k];

            let mut hits = 0usize;
            let mut dcg = 0.0;
            for (pos, v) in list.iter().enumerate() {
                if positives.contains(v) {
                    hits += 1;
                    dcg += 1.0 / ((pos + 2) as f64).log2();
                }
            }
            let idcg: f64 = (0..p.min(k)).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();

            let precision = hits as f64 / k as f64;
            let recall = if p > 0 { hits as f64 / p as f64 } else { 0.0 };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            let ndcg = if idcg > 0.0 { dcg / idcg } else { 0.0 };
            f1_sum += f1;
            ndcg_sum += ndcg;
        }
        out.push(RankingMetrics {
            k,
            f1: 100.0 * f1_sum / m as f64,
            ndcg: 100.0 * ndcg_sum / m as f64,
        });
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    merge: MergeKind,
    r: usize,
    h: usize,
    layer_dims: Vec<usize>,
    seed: u64,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Persist the model: JSON header (merge kind, dimensions, seed) plus the
/// little-endian f64 parameter blob in canonical order.
pub fn save_model(path: &Path, model: &RankerModel, meta: serde_json::Value) -> Result<()> {
    let mut layer_dims = vec![model.merged_dim()];
    layer_dims.extend(model.layers.iter().map(|l| l.w.nrows()));
    let header = ModelHeader {
        merge: model.merge,
        r: model.num_features(),
        h: model.fusion_width(),
        layer_dims,
        seed: model.seed,
        meta,
    };
    crate::checkpoint::write_checkpoint(path, &header, &model.flatten_params())
}

pub fn load_model(path: &Path) -> Result<RankerModel> {
    let (header, blob): (ModelHeader, Vec<f64>) = crate::checkpoint::read_checkpoint(path)?;
    let hidden: Vec<usize> = header.layer_dims[1..header.layer_dims.len() - 1].to_vec();
    let mut model =
        init_model_with_hidden(header.merge, header.r, header.h, &hidden, header.seed);
    model.assign_params(&blob)?;
    Ok(model)
}
