//! Feature-map norms, per-filter activation thresholds and the binarization
//! table feeding rule induction.
//!
//! Norm and threshold arithmetic always runs in f64 so the analysis side is
//! identical whichever precision the network trains in.

use rayon::prelude::*;

use crate::cnn::{CnnModel, TensorDataset};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Frobenius norm of one feature map.
pub fn feature_norm<T: Scalar>(map: &[T]) -> f64 {
    let mut acc = 0.0f64;
    for &v in map {
        let v = v.as_f64();
        acc += v * v;
    }
    acc.sqrt()
}

/// `n images x K filters` matrix of feature-map norms, with per-row labels.
#[derive(Clone, Debug)]
pub struct NormTable {
    /// Row-major `n x k`.
    values: Vec<f64>,
    pub n: usize,
    pub k: usize,
    pub labels: Vec<usize>,
    pub image_ids: Vec<String>,
}

impl NormTable {
    pub fn get(&self, image: usize, filter: usize) -> f64 {
        self.values[image * self.k + filter]
    }

    pub fn row(&self, image: usize) -> &[f64] {
        &self.values[image * self.k..(image + 1) * self.k]
    }

    pub fn column(&self, filter: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.n).map(move |i| self.get(i, filter))
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::Dataset("norm table needs at least one row".into()));
        }
        let k = rows[0].len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::shape("norm_table", "ragged rows"));
        }
        if labels.len() != n {
            return Err(Error::shape("norm_table", "labels length != row count"));
        }
        let mut values = Vec::with_capacity(n * k);
        for r in rows {
            values.extend(r);
        }
        Ok(NormTable {
            values,
            n,
            k,
            labels,
            image_ids: (0..n).map(|i| i.to_string()).collect(),
        })
    }
}

/// Norms of every last-layer feature map over the dataset, in dataset order.
pub fn build_norm_table<T: Scalar>(model: &CnnModel<T>, data: &TensorDataset<T>) -> Result<NormTable> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot build a norm table from an empty dataset".into()));
    }
    let k = model.config.k;
    let plane = model.config.feature_map_len();
    let rows: Vec<Vec<f64>> = data
        .images
        .par_iter()
        .map(|image| {
            let (maps, _) = model.forward(image)?;
            let d = maps.data();
            Ok((0..k).map(|f| feature_norm(&d[f * plane..(f + 1) * plane])).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut nt = NormTable::from_rows(rows, data.labels.clone())?;
    nt.image_ids = (0..data.len()).map(|i| i.to_string()).collect();
    Ok(nt)
}

/// Weights of the mean and population standard deviation in the threshold.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct BinarizerParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for BinarizerParams {
    fn default() -> Self {
        BinarizerParams { alpha: 0.6, gamma: 0.7 }
    }
}

impl BinarizerParams {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || !self.gamma.is_finite() {
            return Err(Error::Config("binarizer.alpha and binarizer.gamma must be finite".into()));
        }
        Ok(())
    }
}

/// Per-filter activation thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct Thresholds(pub Vec<f64>);

/// `theta_k = alpha * mean_k + gamma * population_std_k` over the table rows.
pub fn compute_thresholds(nt: &NormTable, p: &BinarizerParams) -> Thresholds {
    let n = nt.n as f64;
    let mut thetas = Vec::with_capacity(nt.k);
    for f in 0..nt.k {
        let mean = nt.column(f).sum::<f64>() / n;
        let var = nt.column(f).map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        thetas.push(p.alpha * mean + p.gamma * var.sqrt());
    }
    Thresholds(thetas)
}

/// Binary activation matrix with named filter columns.
#[derive(Clone, Debug)]
pub struct BinarizationTable {
    /// Row-major `n x k`.
    values: Vec<bool>,
    pub n: usize,
    pub k: usize,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub filter_names: Vec<String>,
}

impl BinarizationTable {
    pub fn get(&self, image: usize, filter: usize) -> bool {
        self.values[image * self.k + filter]
    }

    pub fn row(&self, image: usize) -> &[bool] {
        &self.values[image * self.k..(image + 1) * self.k]
    }

    pub fn from_rows(
        rows: Vec<Vec<bool>>,
        labels: Vec<usize>,
        class_names: Vec<String>,
        filter_names: Vec<String>,
    ) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::Dataset("binarization table needs at least one row".into()));
        }
        let k = rows[0].len();
        if rows.iter().any(|r| r.len() != k) || filter_names.len() != k || labels.len() != n {
            return Err(Error::shape("binarization_table", "inconsistent dimensions"));
        }
        if labels.iter().any(|&l| l >= class_names.len()) {
            return Err(Error::Dataset("label out of range of class names".into()));
        }
        let mut values = Vec::with_capacity(n * k);
        for r in rows {
            values.extend(r);
        }
        Ok(BinarizationTable { values, n, k, labels, class_names, filter_names })
    }

    /// CSV with a header of filter names plus `label`; labels are class names.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.filter_names.join(","));
        out.push_str(",label\n");
        for i in 0..self.n {
            for f in 0..self.k {
                out.push(if self.get(i, f) { '1' } else { '0' });
                out.push(',');
            }
            out.push_str(&self.class_names[self.labels[i]]);
            out.push('\n');
        }
        out
    }
}

/// Default raw predicate name for a 0-based filter index.
pub fn raw_filter_name(filter: usize) -> String {
    format!("f{}", filter + 1)
}

/// `b = 1` iff `a > theta` (strictly).
pub fn binarize(nt: &NormTable, th: &Thresholds, class_names: &[String]) -> Result<BinarizationTable> {
    if th.0.len() != nt.k {
        return Err(Error::shape(
            "binarize",
            format!("{} thresholds for {} filters", th.0.len(), nt.k),
        ));
    }
    let rows: Vec<Vec<bool>> = (0..nt.n)
        .map(|i| nt.row(i).iter().zip(th.0.iter()).map(|(&a, &t)| a > t).collect())
        .collect();
    BinarizationTable::from_rows(
        rows,
        nt.labels.clone(),
        class_names.to_vec(),
        (0..nt.k).map(raw_filter_name).collect(),
    )
}

/// Binarized activation vector for a single image, same rule as [`binarize`].
pub fn binarize_image<T: Scalar>(
    model: &CnnModel<T>,
    image: &Tensor<T>,
    th: &Thresholds,
) -> Result<Vec<bool>> {
    if th.0.len() != model.config.k {
        return Err(Error::shape(
            "binarize_image",
            format!("{} thresholds for {} filters", th.0.len(), model.config.k),
        ));
    }
    let (maps, _) = model.forward(image)?;
    let plane = model.config.feature_map_len();
    Ok((0..model.config.k)
        .map(|f| feature_norm(&maps.data()[f * plane..(f + 1) * plane]) > th.0[f])
        .collect())
}
