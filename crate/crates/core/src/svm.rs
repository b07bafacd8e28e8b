//! One-vs-rest linear SVM with L2-regularized hinge loss, the fixed
//! classifier over ternary embedding rows.
//!
//! Each binary problem minimizes (1/2)||w||^2 + C * sum max(0, 1 - y(w.x + b))
//! with an unregularized bias, solved in the dual with maximal-violating-pair
//! updates under the equality constraint sum(alpha * y) = 0.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{self, ContainerEntry, KIND_TENSOR};
use crate::error::{Error, Result};
use crate::tensor::{dot, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSvmModel {
    /// Distinct class indices, ascending; one binary problem per class.
    pub classes: Vec<usize>,
    /// Per-class weight vectors, aligned with `classes`.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub c: f64,
    pub tol: f64,
    pub converged: bool,
    /// Largest outer-iteration count among the binary problems.
    pub iterations: usize,
    /// Per-class dual objective values, one entry per outer iteration.
    pub objective_traces: Vec<Vec<f64>>,
}

impl LinearSvmModel {
    pub fn n_features(&self) -> usize {
        self.weights.first().map(|w| w.len()).unwrap_or(0)
    }

    /// Per-class decision values for one row.
    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_features() {
            return Err(Error::Shape(format!(
                "row width {} does not match model width {}",
                x.len(),
                self.n_features()
            )));
        }
        Ok(self
            .weights
            .iter()
            .zip(self.biases.iter())
            .map(|(w, b)| dot(w, x) + b)
            .collect())
    }

    /// Primal hinge objective of the binary problem for `classes[k]`.
    pub fn primal_objective(&self, k: usize, x: &Matrix, y: &[usize]) -> f64 {
        let w = &self.weights[k];
        let b = self.biases[k];
        let mut obj = 0.5 * dot(w, w);
        for i in 0..x.rows {
            let yi = if y[i] == self.classes[k] { 1.0 } else { -1.0 };
            let margin = 1.0 - yi * (dot(w, x.row(i)) + b);
            if margin > 0.0 {
                obj += self.c * margin;
            }
        }
        obj
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&SvmHeader {
            classes: self.classes.clone(),
            c: self.c,
            tol: self.tol,
            converged: self.converged,
            iterations: self.iterations,
            objective_traces: self.objective_traces.clone(),
        })?;
        let entries: Vec<ContainerEntry> = self
            .weights
            .iter()
            .zip(self.biases.iter())
            .map(|(w, &b)| ContainerEntry {
                kind: KIND_TENSOR,
                dims: vec![w.len() as u32],
                values: w.clone(),
                bias: vec![b],
            })
            .collect();
        let body = container::encode(&entries)?;
        let mut f = fs::File::create(path)?;
        f.write_all(&(header.len() as u32).to_le_bytes())?;
        f.write_all(&header)?;
        f.write_all(&body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<LinearSvmModel> {
        let mut f = fs::File::open(path)?;
        let mut len_buf = [0u8; 4];
        f.read_exact(&mut len_buf)?;
        let mut header_buf = vec![0u8; u32::from_le_bytes(len_buf) as usize];
        f.read_exact(&mut header_buf)?;
        let header: SvmHeader = serde_json::from_slice(&header_buf)?;
        let mut body = Vec::new();
        f.read_to_end(&mut body)?;
        let (entries, _) = container::decode(&body)?;
        if entries.len() != header.classes.len() {
            return Err(Error::Import(format!(
                "model container has {} weight vectors for {} classes",
                entries.len(),
                header.classes.len()
            )));
        }
        let mut weights = Vec::with_capacity(entries.len());
        let mut biases = Vec::with_capacity(entries.len());
        for e in entries {
            if e.bias.len() != 1 {
                return Err(Error::Import("weight entry must carry one bias".into()));
            }
            biases.push(e.bias[0]);
            weights.push(e.values);
        }
        Ok(LinearSvmModel {
            classes: header.classes,
            weights,
            biases,
            c: header.c,
            tol: header.tol,
            converged: header.converged,
            iterations: header.iterations,
            objective_traces: header.objective_traces,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SvmHeader {
    classes: Vec<usize>,
    c: f64,
    tol: f64,
    converged: bool,
    iterations: usize,
    objective_traces: Vec<Vec<f64>>,
}

pub const DEFAULT_C: f64 = 1.0;
pub const DEFAULT_TOL: f64 = 1e-3;
pub const DEFAULT_MAX_ITER: usize = 1000;

struct BinarySolution {
    w: Vec<f64>,
    b: f64,
    converged: bool,
    iterations: usize,
    trace: Vec<f64>,
}

/// Dual objective f(alpha) = 0.5 ||w||^2 - sum(alpha), non-increasing under
/// feasible pair updates.
fn dual_objective(w: &[f64], alpha: &[f64]) -> f64 {
    0.5 * dot(w, w) - alpha.iter().sum::<f64>()
}

/// Solves one binary problem by maximal-violating-pair selection. One outer
/// iteration performs up to n pair updates; convergence is declared when the
/// KKT violation gap drops to `tol`.
fn solve_binary(x: &Matrix, y: &[f64], c: f64, tol: f64, max_iter: usize) -> BinarySolution {
    let n = x.rows;
    let d = x.cols;
    let mut alpha = vec![0.0; n];
    let mut w = vec![0.0; d];
    // Gradient of the dual: g_i = y_i * (w . x_i) - 1.
    let mut g: Vec<f64> = vec![-1.0; n];
    let diag: Vec<f64> = (0..n).map(|i| dot(x.row(i), x.row(i))).collect();
    let mut trace = vec![dual_objective(&w, &alpha)];
    let mut converged = false;
    let mut iterations = 0;

    'outer: for _ in 0..max_iter {
        iterations += 1;
        for _ in 0..n {
            // Violating pair over -y*g: i maximizes among the up-set,
            // j minimizes among the low-set.
            let mut m_up = f64::NEG_INFINITY;
            let mut i_up = None;
            let mut m_low = f64::INFINITY;
            let mut i_low = None;
            for t in 0..n {
                let v = -y[t] * g[t];
                let in_up = (y[t] > 0.0 && alpha[t] < c) || (y[t] < 0.0 && alpha[t] > 0.0);
                let in_low = (y[t] > 0.0 && alpha[t] > 0.0) || (y[t] < 0.0 && alpha[t] < c);
                if in_up && v > m_up {
                    m_up = v;
                    i_up = Some(t);
                }
                if in_low && v < m_low {
                    m_low = v;
                    i_low = Some(t);
                }
            }
            let (i, j) = match (i_up, i_low) {
                (Some(i), Some(j)) => (i, j),
                _ => {
                    converged = true;
                    break 'outer;
                }
            };
            if m_up - m_low <= tol {
                converged = true;
                break 'outer;
            }
            // Step along the direction d_i = y_i, d_j = -y_j, which keeps
            // sum(alpha * y) constant. Curvature along d is ||x_i - x_j||^2.
            let quad = diag[i] + diag[j] - 2.0 * dot(x.row(i), x.row(j));
            let quad = quad.max(1e-12);
            let delta = (m_up - m_low) / quad;
            // Feasible step bounds keep 0 <= alpha <= C for both indices.
            let max_i = if y[i] > 0.0 { c - alpha[i] } else { alpha[i] };
            let max_j = if y[j] > 0.0 { alpha[j] } else { c - alpha[j] };
            let step = delta.min(max_i).min(max_j);
            if step <= 0.0 {
                converged = true;
                break 'outer;
            }
            alpha[i] += step * y[i];
            alpha[j] -= step * y[j];
            // w = sum(alpha * y * x) changes by step * (x_i - x_j).
            for (k, wv) in w.iter_mut().enumerate() {
                *wv += step * (x.get(i, k) - x.get(j, k));
            }
            for t in 0..n {
                g[t] += step * y[t] * (dot_cached(x, i, t) - dot_cached(x, j, t));
            }
        }
        trace.push(dual_objective(&w, &alpha));
    }
    trace.push(dual_objective(&w, &alpha));

    // Bias from the KKT conditions: average y_t - w.x_t over free support
    // vectors, else the midpoint of the feasible interval.
    let mut free_sum = 0.0;
    let mut free_count = 0usize;
    for t in 0..n {
        if alpha[t] > 1e-9 && alpha[t] < c - 1e-9 {
            free_sum += y[t] - dot(&w, x.row(t));
            free_count += 1;
        }
    }
    let b = if free_count > 0 {
        free_sum / free_count as f64
    } else {
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for t in 0..n {
            let v = y[t] - dot(&w, x.row(t));
            let at_lower = alpha[t] <= 1e-9;
            if (at_lower && y[t] > 0.0) || (!at_lower && y[t] < 0.0) {
                lo = lo.max(v);
            } else {
                hi = hi.min(v);
            }
        }
        if lo.is_finite() && hi.is_finite() {
            0.5 * (lo + hi)
        } else if lo.is_finite() {
            lo
        } else if hi.is_finite() {
            hi
        } else {
            0.0
        }
    };

    BinarySolution {
        w,
        b,
        converged,
        iterations,
        trace,
    }
}

fn dot_cached(x: &Matrix, a: usize, b: usize) -> f64 {
    dot(x.row(a), x.row(b))
}

/// Trains the one-vs-rest model. Binary problems run in parallel; a solver
/// hitting `max_iter` leaves `converged = false` but the model stays usable.
pub fn train_linear_svm(
    x: &Matrix,
    y: &[usize],
    c: f64,
    tol: f64,
    max_iter: usize,
) -> Result<LinearSvmModel> {
    if x.rows != y.len() {
        return Err(Error::Shape(format!(
            "{} rows but {} labels",
            x.rows,
            y.len()
        )));
    }
    if c <= 0.0 || tol <= 0.0 || max_iter == 0 {
        return Err(Error::Config("need C > 0, tol > 0, max_iter > 0".into()));
    }
    let mut classes: Vec<usize> = y.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Train(format!(
            "need at least 2 distinct classes, got {}",
            classes.len()
        )));
    }
    let solutions: Vec<BinarySolution> = classes
        .par_iter()
        .map(|&cls| {
            let y_bin: Vec<f64> = y
                .iter()
                .map(|&l| if l == cls { 1.0 } else { -1.0 })
                .collect();
            solve_binary(x, &y_bin, c, tol, max_iter)
        })
        .collect();
    let converged = solutions.iter().all(|s| s.converged);
    let iterations = solutions.iter().map(|s| s.iterations).max().unwrap_or(0);
    Ok(LinearSvmModel {
        classes,
        weights: solutions.iter().map(|s| s.w.clone()).collect(),
        biases: solutions.iter().map(|s| s.b).collect(),
        c,
        tol,
        converged,
        iterations,
        objective_traces: solutions.into_iter().map(|s| s.trace).collect(),
    })
}

/// Predicted labels and per-class score rows. The label is the argmax class;
/// exact ties break toward the lowest class index.
pub fn predict(model: &LinearSvmModel, x: &Matrix) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let mut labels = Vec::with_capacity(x.rows);
    let mut scores = Vec::with_capacity(x.rows);
    for i in 0..x.rows {
        let s = model.scores(x.row(i))?;
        let mut best = 0usize;
        for (k, &v) in s.iter().enumerate() {
            if v > s[best] {
                best = k;
            }
        }
        labels.push(model.classes[best]);
        scores.push(s);
    }
    Ok((labels, scores))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn separable_set() -> (Matrix, Vec<usize>) {
        let rows = vec![
            vec![-2.0, 0.3],
            vec![-1.5, -0.8],
            vec![-1.0, 1.0],
            vec![-2.5, 0.0],
            vec![1.0, 0.5],
            vec![1.5, -0.2],
            vec![2.0, 0.9],
            vec![2.5, -1.0],
        ];
        let y = vec![0, 0, 0, 0, 1, 1, 1, 1];
        (Matrix::from_rows(rows).unwrap(), y)
    }

    #[test]
    fn separable_case_reaches_full_train_accuracy() {
        let (x, y) = separable_set();
        let m = train_linear_svm(&x, &y, 1.0, 1e-4, 1000).unwrap();
        assert!(m.converged);
        let (labels, _) = predict(&m, &x).unwrap();
        assert_eq!(labels, y);
    }

    #[test]
    fn single_class_is_train_error() {
        let x = Matrix::from_rows(vec![vec![1.0], vec![2.0]]).unwrap();
        assert!(matches!(
            train_linear_svm(&x, &[3, 3], 1.0, 1e-3, 100),
            Err(Error::Train(_))
        ));
    }

    #[test]
    fn label_row_mismatch_is_shape_error() {
        let x = Matrix::from_rows(vec![vec![1.0], vec![2.0]]).unwrap();
        assert!(matches!(
            train_linear_svm(&x, &[0], 1.0, 1e-3, 100),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn objective_trace_never_increases() {
        let (x, y) = separable_set();
        let m = train_linear_svm(&x, &y, 1.0, 1e-6, 1000).unwrap();
        for trace in &m.objective_traces {
            for pair in trace.windows(2) {
                assert!(
                    pair[1] <= pair[0] + 1e-12,
                    "dual objective increased: {} -> {}",
                    pair[0],
                    pair[1]
                );
            }
        }
    }

    #[test]
    fn argmax_and_tie_break() {
        let m = LinearSvmModel {
            classes: vec![0, 1],
            weights: vec![vec![1.0, 0.0], vec![-1.0, 0.0]],
            biases: vec![0.0, 0.0],
            c: 1.0,
            tol: 1e-3,
            converged: true,
            iterations: 1,
            objective_traces: vec![],
        };
        let x = Matrix::from_rows(vec![vec![2.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let (labels, scores) = predict(&m, &x).unwrap();
        assert_eq!(labels, vec![0, 0]); // second row ties, lowest index wins
        assert_eq!(scores[0], vec![2.0, -2.0]);
        let bad = Matrix::from_rows(vec![vec![1.0]]).unwrap();
        assert!(matches!(predict(&m, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn permuting_samples_leaves_probe_predictions_unchanged() {
        let (x, y) = separable_set();
        let m1 = train_linear_svm(&x, &y, 1.0, 1e-5, 2000).unwrap();
        let order = [5, 2, 7, 0, 3, 6, 1, 4];
        let xp = Matrix::from_rows(order.iter().map(|&i| x.row(i).to_vec()).collect()).unwrap();
        let yp: Vec<usize> = order.iter().map(|&i| y[i]).collect();
        let m2 = train_linear_svm(&xp, &yp, 1.0, 1e-5, 2000).unwrap();
        let probe = Matrix::from_rows(vec![
            vec![-1.2, 0.4],
            vec![0.3, -0.9],
            vec![1.7, 0.1],
            vec![-0.1, 0.0],
        ])
        .unwrap();
        let (l1, _) = predict(&m1, &probe).unwrap();
        let (l2, _) = predict(&m2, &probe).unwrap();
        assert_eq!(l1, l2);
    }

    #[test]
    fn max_iter_cap_leaves_model_usable() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        // overlapping clouds so one sweep cannot reach a 1e-12 gap
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let center = if i % 2 == 0 { -0.3 } else { 0.3 };
                vec![
                    center + rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        let y: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let x = Matrix::from_rows(rows).unwrap();
        let m = train_linear_svm(&x, &y, 1.0, 1e-12, 1).unwrap();
        assert!(!m.converged);
        assert_eq!(m.iterations, 1);
        let (labels, _) = predict(&m, &x).unwrap();
        assert_eq!(labels.len(), y.len());
    }

    #[test]
    fn serialization_round_trips_to_identical_predictions() {
        let (x, y) = separable_set();
        let m = train_linear_svm(&x, &y, 1.0, 1e-4, 1000).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.svm");
        m.save(&path).unwrap();
        let back = LinearSvmModel::load(&path).unwrap();
        assert_eq!(back.classes, m.classes);
        assert_eq!(back.converged, m.converged);
        let (l1, s1) = predict(&m, &x).unwrap();
        let (l2, s2) = predict(&back, &x).unwrap();
        assert_eq!(l1, l2);
        // the container stores f32 values, so scores agree to f32 precision
        for (a, b) in s1.iter().flatten().zip(s2.iter().flatten()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    /// Coarse-to-fine grid minimizer over (w1, w2, b) for 2-feature binary
    /// problems; convexity makes the refinement global.
    fn grid_oracle(x: &Matrix, y_bin: &[f64], c: f64) -> f64 {
        let obj = |w1: f64, w2: f64, b: f64| -> f64 {
            let mut o = 0.5 * (w1 * w1 + w2 * w2);
            for i in 0..x.rows {
                let m = 1.0 - y_bin[i] * (w1 * x.get(i, 0) + w2 * x.get(i, 1) + b);
                if m > 0.0 {
                    o += c * m;
                }
            }
            o
        };
        let (mut cw1, mut cw2, mut cb) = (0.0, 0.0, 0.0);
        let mut half = 10.0;
        let mut best = obj(cw1, cw2, cb);
        for _ in 0..40 {
            let step = half / 10.0;
            let (mut bw1, mut bw2, mut bb) = (cw1, cw2, cb);
            for i in -10..=10 {
                for j in -10..=10 {
                    for k in -10..=10 {
                        let (w1, w2, b) = (
                            cw1 + i as f64 * step,
                            cw2 + j as f64 * step,
                            cb + k as f64 * step,
                        );
                        let v = obj(w1, w2, b);
                        if v < best {
                            best = v;
                            bw1 = w1;
                            bw2 = w2;
                            bb = b;
                        }
                    }
                }
            }
            cw1 = bw1;
            cw2 = bw2;
            cb = bb;
            half = step * 2.0;
        }
        best
    }

    #[test]
    fn objective_matches_grid_oracle_on_small_sets() {
        // a 12-point non-separable 2-class set
        let rows = vec![
            vec![-1.0, 0.0],
            vec![-2.0, 1.0],
            vec![-1.5, -1.0],
            vec![-0.2, 0.3],
            vec![0.4, -0.1],
            vec![-2.2, 0.4],
            vec![1.0, 0.2],
            vec![2.0, -0.5],
            vec![1.4, 1.1],
            vec![0.1, -0.4],
            vec![-0.5, 0.2],
            vec![2.4, 0.3],
        ];
        let y = vec![0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1];
        let x = Matrix::from_rows(rows).unwrap();
        let m = train_linear_svm(&x, &y, 1.0, 1e-6, 5000).unwrap();
        for (k, &cls) in m.classes.iter().enumerate() {
            let y_bin: Vec<f64> = y
                .iter()
                .map(|&l| if l == cls { 1.0 } else { -1.0 })
                .collect();
            let oracle = grid_oracle(&x, &y_bin, 1.0);
            let ours = m.primal_objective(k, &x, &y);
            let rel = (ours - oracle).abs() / oracle.abs().max(1e-12);
            assert!(
                rel < 1e-3,
                "class {cls}: ours {ours}, oracle {oracle}, rel {rel}"
            );
        }
    }
}
