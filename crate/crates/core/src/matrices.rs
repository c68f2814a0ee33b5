//! User-feature attention matrix `A` (m×r) and item-feature quality
//! matrix `B` (n×r), built from sentiment quadruples.
//!
//! Entries are 0 for unmentioned pairs and otherwise rescaled into the
//! open rating interval `(1, M)`:
//!
//! ```text
//! A[u,f] = 1 + (M-1) * (2 / (1 + exp(-t_uf)) - 1)        mention count t_uf
//! B[v,f] = 1 + (M-1) / (1 + exp(-t_vf * mean_s_vf))      mean sentiment in [-1, 1]
//! ```

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Catalog, SentimentQuadruple};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrices {
    /// m×r user-feature attention.
    pub a: Array2<f64>,
    /// n×r item-feature quality.
    pub b: Array2<f64>,
    /// Rating scale M (upper bound of nonzero entries).
    pub rating_scale: f64,
}

impl FeatureMatrices {
    pub fn num_users(&self) -> usize {
        self.a.nrows()
    }

    pub fn num_items(&self) -> usize {
        self.b.nrows()
    }

    pub fn num_features(&self) -> usize {
        self.a.ncols()
    }
}

/// Additive per-feature intervention: `delta_user` shifts column
/// `feature` of `A`, `delta_item` shifts the same column of `B`. Absent
/// components leave the corresponding matrix untouched.
#[derive(Debug, Clone)]
pub struct DeltaIntervention {
    pub feature: usize,
    pub delta_user: Option<Array1<f64>>,
    pub delta_item: Option<Array1<f64>>,
}

impl DeltaIntervention {
    /// Squared L2 norm over all present components.
    pub fn squared_norm(&self) -> f64 {
        let du = self
            .delta_user
            .as_ref()
            .map_or(0.0, |d| d.iter().map(|x| x * x).sum());
        let dv = self
            .delta_item
            .as_ref()
            .map_or(0.0, |d| d.iter().map(|x| x * x).sum());
        du + dv
    }

    /// L2 norm over all present components.
    pub fn norm(&self) -> f64 {
        self.squared_norm().sqrt()
    }
}

/// Build `A` and `B` from quadruples over a catalog.
pub fn build_matrices(
    quadruples: &[SentimentQuadruple],
    catalog: &Catalog,
    rating_scale: f64,
) -> Result<FeatureMatrices> {
    if rating_scale <= 1.0 {
        return Err(Error::data("rating scale must exceed 1"));
    }
    let (m, n, r) = (
        catalog.num_users(),
        catalog.num_items(),
        catalog.num_features(),
    );

    let mut user_counts = Array2::<f64>::zeros((m, r));
    let mut item_counts = Array2::<f64>::zeros((n, r));
    let mut item_sentiment = Array2::<f64>::zeros((n, r));

    for q in quadruples {
        let u = catalog
            .user_idx(&q.user)
            .ok_or_else(|| Error::data(format!("unknown user {:?} in quadruples", q.user)))?;
        let v = catalog
            .item_idx(&q.item)
            .ok_or_else(|| Error::data(format!("unknown item {:?} in quadruples", q.item)))?;
        let f = catalog
            .feature_idx(&q.feature)
            .ok_or_else(|| Error::data(format!("unknown feature {:?} in quadruples", q.feature)))?;
        user_counts[[u, f]] += 1.0;
        item_counts[[v, f]] += 1.0;
        item_sentiment[[v, f]] += f64::from(q.sentiment);
    }

    let scale = rating_scale - 1.0;
    let mut a = Array2::<f64>::zeros((m, r));
    for u in 0..m {
        for f in 0..r {
            let t = user_counts[[u, f]];
            if t > 0.0 {
                a[[u, f]] = 1.0 + scale * (2.0 / (1.0 + (-t).exp()) - 1.0);
            }
        }
    }
    let mut b = Array2::<f64>::zeros((n, r));
    for v in 0..n {
        for f in 0..r {
            let t = item_counts[[v, f]];
            if t > 0.0 {
                let mean_sentiment = item_sentiment[[v, f]] / t;
                b[[v, f]] = 1.0 + scale / (1.0 + (-t * mean_sentiment).exp());
            }
        }
    }

    Ok(FeatureMatrices {
        a,
        b,
        rating_scale,
    })
}

/// Return matrices with the given feature columns zeroed in both `A` and
/// `B`. The input is untouched.
pub fn erase_features(mats: &FeatureMatrices, features: &[usize]) -> Result<FeatureMatrices> {
    let r = mats.num_features();
    let mut out = mats.clone();
    for &f in features {
        if f >= r {
            return Err(Error::data(format!(
                "feature index {f} out of range (r = {r})"
            )));
        }
        out.a.column_mut(f).fill(0.0);
        out.b.column_mut(f).fill(0.0);
    }
    Ok(out)
}

/// Apply an additive intervention to one feature column. Values are not
/// clamped back into `(1, M)`.
pub fn apply_delta(mats: &FeatureMatrices, delta: &DeltaIntervention) -> Result<FeatureMatrices> {
    let r = mats.num_features();
    if delta.feature >= r {
        return Err(Error::data(format!(
            "feature index {} out of range (r = {r})",
            delta.feature
        )));
    }
    let mut out = mats.clone();
    if let Some(du) = &delta.delta_user {
        if du.len() != mats.num_users() {
            return Err(Error::data(format!(
                "delta_user length {} != m = {}",
                du.len(),
                mats.num_users()
            )));
        }
        let mut col = out.a.column_mut(delta.feature);
        col += du;
    }
    if let Some(dv) = &delta.delta_item {
        if dv.len() != mats.num_items() {
            return Err(Error::data(format!(
                "delta_item length {} != n = {}",
                dv.len(),
                mats.num_items()
            )));
        }
        let mut col = out.b.column_mut(delta.feature);
        col += dv;
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct MatricesHeader {
    m: usize,
    n: usize,
    r: usize,
    #[serde(rename = "M")]
    rating_scale: f64,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Persist matrices: JSON header `{m, n, r, M}` plus a row-major
/// little-endian f64 blob (`A` rows, then `B` rows). `meta` is embedded
/// verbatim in the header.
pub fn save_matrices(path: &Path, mats: &FeatureMatrices, meta: serde_json::Value) -> Result<()> {
    let header = MatricesHeader {
        m: mats.num_users(),
        n: mats.num_items(),
        r: mats.num_features(),
        rating_scale: mats.rating_scale,
        meta,
    };
    let mut blob = Vec::with_capacity(mats.a.len() + mats.b.len());
    blob.extend(mats.a.iter().copied());
    blob.extend(mats.b.iter().copied());
    crate::checkpoint::write_checkpoint(path, &header, &blob)
}

pub fn load_matrices(path: &Path) -> Result<FeatureMatrices> {
    let (header, blob): (MatricesHeader, Vec<f64>) = crate::checkpoint::read_checkpoint(path)?;
    let expected = header.m * header.r + header.n * header.r;
    if blob.len() != expected {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            message: format!("expected {expected} values, found {}", blob.len()),
        });
    }
    let (a_flat, b_flat) = blob.split_at(header.m * header.r);
    let a = Array2::from_shape_vec((header.m, header.r), a_flat.to_vec())
        .map_err(|e| Error::data(e.to_string()))?;
    let b = Array2::from_shape_vec((header.n, header.r), b_flat.to_vec())
        .map_err(|e| Error::data(e.to_string()))?;
    Ok(FeatureMatrices {
        a,
        b,
        rating_scale: header.rating_scale,
    })
}

/// CSV dump (one file content per matrix) for manual inspection.
pub fn matrix_csv(matrix: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in matrix.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}
