//! Full-network embedding: multi-layer activation capture, spatial average
//! pooling, feature-wise standardization fitted on train data only, and
//! ternary discretization to {-1, 0, +1}.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{LayerOutput, LayerSelection, LayeredBackbone, SelectionMode};
use crate::container::{self, ContainerEntry, KIND_TENSOR};
use crate::error::{Error, Result};
use crate::task::{ten_crop, Sample, TaskDataset};
use crate::tensor::Matrix;

/// Discretization thresholds over standardized activations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub lo: f64,
    pub hi: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            lo: -0.25,
            hi: 0.15,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        if self.lo >= self.hi {
            return Err(Error::Config(format!(
                "thresholds need lo < hi, got ({}, {})",
                self.lo, self.hi
            )));
        }
        Ok(())
    }
}

/// Per-feature mean and population standard deviation, fitted on train rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub fitted_on: usize,
}

impl Standardizer {
    /// Standardized value of feature `j`; zero-variance features map to 0.
    pub fn transform(&self, j: usize, x: f64) -> f64 {
        if self.stds[j] == 0.0 {
            0.0
        } else {
            (x - self.means[j]) / self.stds[j]
        }
    }
}

/// Fits per-feature mean and population standard deviation.
pub fn fit_standardizer(train_features: &Matrix) -> Result<Standardizer> {
    if train_features.rows < 2 {
        return Err(Error::Fit(format!(
            "standardizer needs at least 2 rows, got {}",
            train_features.rows
        )));
    }
    let n = train_features.rows as f64;
    let cols = train_features.cols;
    let mut means = vec![0.0; cols];
    for i in 0..train_features.rows {
        for (j, &v) in train_features.row(i).iter().enumerate() {
            means[j] += v;
        }
    }
    for m in &mut means {
        *m /= n;
    }
    let mut vars = vec![0.0; cols];
    for i in 0..train_features.rows {
        for (j, &v) in train_features.row(i).iter().enumerate() {
            let d = v - means[j];
            vars[j] += d * d;
        }
    }
    let stds = vars.into_iter().map(|v| (v / n).sqrt()).collect();
    Ok(Standardizer {
        means,
        stds,
        fitted_on: train_features.rows,
    })
}

/// Average pooling over spatial positions: a rank-3 activation with dims
/// `(h, w, c)` collapses to one value per channel; a rank-1 activation
/// passes through unchanged.
pub fn spatial_average_pool(dims: &[usize], data: &[f64]) -> Result<Vec<f64>> {
    let expected: usize = dims.iter().product();
    if expected != data.len() {
        return Err(Error::Shape(format!(
            "dims {dims:?} imply {expected} values, got {}",
            data.len()
        )));
    }
    match dims {
        [_] => Ok(data.to_vec()),
        [h, w, c] => {
            let positions = h * w;
            if positions == 0 || *c == 0 {
                return Err(Error::Shape("empty activation".into()));
            }
            let mut pooled = vec![0.0; *c];
            for pos in 0..positions {
                for ch in 0..*c {
                    pooled[ch] += data[pos * c + ch];
                }
            }
            for v in &mut pooled {
                *v /= positions as f64;
            }
            Ok(pooled)
        }
        other => Err(Error::Shape(format!(
            "pooling accepts rank-1 or rank-3 activations, got rank {}",
            other.len()
        ))),
    }
}

/// Pools a captured layer output.
pub fn pool_output(out: &LayerOutput) -> Result<Vec<f64>> {
    match out {
        LayerOutput::Spatial(t) => spatial_average_pool(&[t.h, t.w, t.c], &t.data),
        LayerOutput::Flat(v) => spatial_average_pool(&[v.len()], v),
    }
}

/// Elementwise ternary mapping: x <= lo -> -1, x >= hi -> +1, else 0.
pub fn discretize(standardized: &Matrix, lo: f64, hi: f64) -> Result<Matrix> {
    Thresholds { lo, hi }.validate()?;
    let mut out = standardized.clone();
    for v in &mut out.data {
        *v = if *v <= lo {
            -1.0
        } else if *v >= hi {
            1.0
        } else {
            0.0
        };
    }
    Ok(out)
}

/// Ternary embedding of one dataset split. Each row is one crop of one
/// sample; `origins[i]` names the sample row `i` came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FnEmbedding {
    pub matrix: Matrix,
    pub labels: Vec<usize>,
    pub origins: Vec<String>,
    /// Per feature: (backbone layer index, channel index within that layer).
    pub feature_map: Vec<(usize, usize)>,
    pub standardizer: Standardizer,
    pub thresholds: Thresholds,
}

impl FnEmbedding {
    pub fn n_features(&self) -> usize {
        self.matrix.cols
    }

    pub fn validate(&self) -> Result<()> {
        if self.matrix.rows != self.labels.len() || self.matrix.rows != self.origins.len() {
            return Err(Error::Shape("row/label/origin counts differ".into()));
        }
        if self.feature_map.len() != self.matrix.cols
            || self.standardizer.means.len() != self.matrix.cols
        {
            return Err(Error::Shape("feature bookkeeping widths differ".into()));
        }
        self.thresholds.validate()?;
        if self.standardizer.fitted_on < 2 {
            return Err(Error::Fit("standardizer fitted on fewer than 2 rows".into()));
        }
        for &v in &self.matrix.data {
            if v != -1.0 && v != 0.0 && v != 1.0 {
                return Err(Error::Shape(format!("non-ternary embedding entry {v}")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&FnEmbeddingHeader {
            labels: self.labels.clone(),
            origins: self.origins.clone(),
            feature_map: self.feature_map.clone(),
            standardizer: self.standardizer.clone(),
            thresholds: self.thresholds,
        })?;
        let entry = ContainerEntry {
            kind: KIND_TENSOR,
            dims: vec![self.matrix.rows as u32, self.matrix.cols as u32],
            values: self.matrix.data.clone(),
            bias: vec![],
        };
        let body = container::encode(&[entry])?;
        let mut f = fs::File::create(path)?;
        f.write_all(&(header.len() as u32).to_le_bytes())?;
        f.write_all(&header)?;
        f.write_all(&body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<FnEmbedding> {
        let mut f = fs::File::open(path)?;
        let mut len_buf = [0u8; 4];
        f.read_exact(&mut len_buf)?;
        let header_len = u32::from_le_bytes(len_buf) as usize;
        let mut header_buf = vec![0u8; header_len];
        f.read_exact(&mut header_buf)?;
        let header: FnEmbeddingHeader = serde_json::from_slice(&header_buf)?;
        let mut body = Vec::new();
        f.read_to_end(&mut body)?;
        let (entries, _) = container::decode(&body)?;
        let entry = entries
            .into_iter()
            .next()
            .ok_or_else(|| Error::Import("embedding container is empty".into()))?;
        if entry.dims.len() != 2 {
            return Err(Error::Import("embedding matrix must be rank 2".into()));
        }
        let emb = FnEmbedding {
            matrix: Matrix {
                rows: entry.dims[0] as usize,
                cols: entry.dims[1] as usize,
                data: entry.values,
            },
            labels: header.labels,
            origins: header.origins,
            feature_map: header.feature_map,
            standardizer: header.standardizer,
            thresholds: header.thresholds,
        };
        emb.validate()?;
        Ok(emb)
    }
}

#[derive(Serialize, Deserialize)]
struct FnEmbeddingHeader {
    labels: Vec<usize>,
    origins: Vec<String>,
    feature_map: Vec<(usize, usize)>,
    standardizer: Standardizer,
    thresholds: Thresholds,
}

/// Embeddings for the three dataset splits, sharing one standardizer.
#[derive(Debug, Clone, PartialEq)]
pub struct FneTriple {
    pub train: FnEmbedding,
    pub val: FnEmbedding,
    pub test: FnEmbedding,
    pub selection: LayerSelection,
}

/// Raw (pre-standardization) pooled feature rows for one split.
struct RawSplit {
    features: Matrix,
    labels: Vec<usize>,
    origins: Vec<String>,
}

fn pool_sample(
    b: &LayeredBackbone,
    sample: &Sample,
    selection: &LayerSelection,
    crop_side: usize,
) -> Result<Vec<(Vec<f64>, String)>> {
    let crops = ten_crop(&sample.image, crop_side)?;
    let mut rows = Vec::with_capacity(crops.len());
    for crop in &crops {
        let captures = b.collect_one(crop, selection)?;
        let mut row = Vec::new();
        for cap in &captures {
            row.extend(pool_output(cap)?);
        }
        rows.push((row, sample.id.clone()));
    }
    Ok(rows)
}

fn raw_split(
    b: &LayeredBackbone,
    samples: &[Sample],
    selection: &LayerSelection,
    crop_side: usize,
) -> Result<RawSplit> {
    let per_sample: Vec<Vec<(Vec<f64>, String)>> = samples
        .par_iter()
        .map(|s| pool_sample(b, s, selection, crop_side))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut origins = Vec::new();
    for (sample, sample_rows) in samples.iter().zip(per_sample) {
        for (row, origin) in sample_rows {
            rows.push(row);
            labels.push(sample.label);
            origins.push(origin);
        }
    }
    Ok(RawSplit {
        features: Matrix::from_rows(rows)?,
        labels,
        origins,
    })
}

/// Feature bookkeeping: for each selected layer (deepest first), one
/// `(layer index, channel index)` pair per channel.
fn feature_map_for(b: &LayeredBackbone, selection: &LayerSelection) -> Vec<(usize, usize)> {
    let last_before_logits = b.layers.len() - 2;
    let mut map = Vec::new();
    for k in 0..selection.resolved_count {
        let layer_idx = last_before_logits - k;
        for ch in 0..b.layers[layer_idx].out_dim {
            map.push((layer_idx, ch));
        }
    }
    map
}

fn finish_split(
    raw: RawSplit,
    std_: &Standardizer,
    thresholds: Thresholds,
    feature_map: &[(usize, usize)],
) -> Result<FnEmbedding> {
    let mut m = raw.features;
    for i in 0..m.rows {
        let row = m.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v = std_.transform(j, *v);
        }
    }
    let matrix = discretize(&m, thresholds.lo, thresholds.hi)?;
    let emb = FnEmbedding {
        matrix,
        labels: raw.labels,
        origins: raw.origins,
        feature_map: feature_map.to_vec(),
        standardizer: std_.clone(),
        thresholds,
    };
    emb.validate()?;
    Ok(emb)
}

/// Builds train/val/test embeddings: suffix-layer capture, average pooling,
/// standardization fitted on the train rows only, then discretization. Each
/// of the 10 crops contributes one row tagged with its origin sample.
pub fn build_fne(
    b: &LayeredBackbone,
    ds: &TaskDataset,
    fraction: f64,
    thresholds: Thresholds,
) -> Result<FneTriple> {
    thresholds.validate()?;
    let selection = LayerSelection::new(SelectionMode::ExtractSuffix, fraction, b.layers.len())?;
    let crop_side = b.input_shape.0.min(b.input_shape.1);
    let train_raw = raw_split(b, &ds.train, &selection, crop_side)?;
    let val_raw = raw_split(b, &ds.val, &selection, crop_side)?;
    let test_raw = raw_split(b, &ds.test, &selection, crop_side)?;
    let std_ = fit_standardizer(&train_raw.features)?;
    let feature_map = feature_map_for(b, &selection);
    if feature_map.len() != train_raw.features.cols {
        return Err(Error::Shape(format!(
            "feature map width {} does not match pooled width {}",
            feature_map.len(),
            train_raw.features.cols
        )));
    }
    Ok(FneTriple {
        train: finish_split(train_raw, &std_, thresholds, &feature_map)?,
        val: finish_split(val_raw, &std_, thresholds, &feature_map)?,
        test: finish_split(test_raw, &std_, thresholds, &feature_map)?,
        selection,
    })
}

/// Split inputs for embeddings built from externally produced features.
pub struct ExternalSplit {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub origins: Vec<String>,
}

/// Builds the embedding triple from already-pooled feature rows, e.g.
/// activations exported by another framework through the tensor-container
/// format. Standardization is still fitted on the train rows only.
pub fn build_fne_from_features(
    train: ExternalSplit,
    val: ExternalSplit,
    test: ExternalSplit,
    feature_map: Vec<(usize, usize)>,
    thresholds: Thresholds,
    selection: LayerSelection,
) -> Result<FneTriple> {
    thresholds.validate()?;
    for split in [&train, &val, &test] {
        if split.features.cols != feature_map.len() {
            return Err(Error::Shape(format!(
                "split width {} does not match feature map width {}",
                split.features.cols,
                feature_map.len()
            )));
        }
        if split.features.rows != split.labels.len() || split.labels.len() != split.origins.len() {
            return Err(Error::Shape("row/label/origin counts differ".into()));
        }
    }
    let std_ = fit_standardizer(&train.features)?;
    let pack = |s: ExternalSplit| RawSplit {
        features: s.features,
        labels: s.labels,
        origins: s.origins,
    };
    Ok(FneTriple {
        train: finish_split(pack(train), &std_, thresholds, &feature_map)?,
        val: finish_split(pack(val), &std_, thresholds, &feature_map)?,
        test: finish_split(pack(test), &std_, thresholds, &feature_map)?,
        selection,
    })
}
