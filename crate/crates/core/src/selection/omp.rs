use super::GradMatrix;
use crate::error::{Error, Result};

/// Reasons OMP stopped before reaching `k` columns or the tolerance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OmpWarning {
    /// Every column is zero, so no column can reduce the residual.
    AllColumnsZero,
    /// The residual is orthogonal to every remaining column.
    Stalled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OmpSolution {
    /// Chosen columns in pick order.
    pub indices: Vec<usize>,
    /// Non-negative weight of each chosen column.
    pub weights: Vec<f32>,
    /// `‖t − Σ wⱼ aⱼ‖₂` for the returned (clamped) weights.
    pub residual_norm: f32,
    /// Residual norm after each refit, before clamping.
    pub residual_history: Vec<f32>,
    pub warning: Option<OmpWarning>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn residual(cols: &[Vec<f64>], chosen: &[usize], w: &[f64], target: &[f64]) -> Vec<f64> {
    let mut r = target.to_vec();
    for (&j, &wj) in chosen.iter().zip(w) {
        for (ri, &a) in r.iter_mut().zip(&cols[j]) {
            *ri -= wj * a;
        }
    }
    r
}

/// Greedy orthogonal matching pursuit over the rows of `columns`.
///
/// Each round picks the unused column with the largest normalized
/// correlation `|⟨aⱼ, r⟩| / ‖aⱼ‖` (lowest index on ties), then refits all
/// weights by ridge least squares `(AᵀA + λI) w = Aᵀt`. Stops after `k`
/// columns, once the residual norm is at most `tol`, or when no column
/// correlates with the residual. Weights are clamped at zero after the
/// final fit. Arithmetic is f64.
pub fn omp_solve(columns: &GradMatrix, target: &[f32], k: usize, lambda: f64, tol: f64) -> Result<OmpSolution> {
    if target.len() != columns.dim {
        return Err(Error::ShapeMismatch {
            name: "omp target".into(),
            expected: vec![columns.dim],
            actual: vec![target.len()],
        });
    }
    if k > columns.rows {
        return Err(Error::SubsetTooLarge { k, n: columns.rows });
    }
    if !(lambda >= 0.0) || !(tol >= 0.0) {
        return Err(Error::InvalidConfig("omp lambda and tol must be >= 0".into()));
    }
    let t: Vec<f64> = target.iter().map(|&v| v as f64).collect();
    let cols: Vec<Vec<f64>> = (0..columns.rows)
        .map(|i| columns.row(i).iter().map(|&v| v as f64).collect())
        .collect();
    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();

    let mut chosen: Vec<usize> = Vec::new();
    let mut used = vec![false; cols.len()];
    // lower-triangular Cholesky factor of AᵀA + λI, packed row by row
    let mut chol: Vec<Vec<f64>> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    let mut w: Vec<f64> = Vec::new();
    let mut r = t.clone();
    let mut rnorm = dot(&r, &r).sqrt();
    let mut history = Vec::new();
    let mut warning = None;

    while chosen.len() < k && rnorm > tol {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..cols.len() {
            if used[j] || norms[j] == 0.0 {
                continue;
            }
            let c = dot(&cols[j], &r).abs() / norms[j];
            if best.is_none_or(|(_, b)| c > b) {
                best = Some((j, c));
            }
        }
        let j = match best {
            None => {
                warning = Some(if norms.iter().all(|&n| n == 0.0) {
                    OmpWarning::AllColumnsZero
                } else {
                    OmpWarning::Stalled
                });
                break;
            }
            Some((_, c)) if c <= 1e-12 * rnorm => {
                warning = Some(OmpWarning::Stalled);
                break;
            }
            Some((j, _)) => j,
        };

        // extend the factor with the new column
        let g: Vec<f64> = chosen.iter().map(|&s| dot(&cols[s], &cols[j])).collect();
        let mut l = Vec::with_capacity(chosen.len() + 1);
        for (i, row) in chol.iter().enumerate() {
            let s: f64 = g[i] - dot(&row[..i], &l[..i]);
            l.push(s / row[i]);
        }
        let d2 = norms[j] * norms[j] + lambda - dot(&l, &l);
        if !(d2 > 1e-12 * (norms[j] * norms[j] + lambda)) {
            warning = Some(OmpWarning::Stalled);
            break;
        }
        l.push(d2.sqrt());
        chol.push(l);
        chosen.push(j);
        used[j] = true;
        rhs.push(dot(&cols[j], &t));

        // solve L Lᵀ w = Aᵀt
        let m = chosen.len();
        let mut y = vec![0.0; m];
        for i in 0..m {
            y[i] = (rhs[i] - dot(&chol[i][..i], &y[..i])) / chol[i][i];
        }
        w = vec![0.0; m];
        for i in (0..m).rev() {
            let mut s = y[i];
            for q in i + 1..m {
                s -= chol[q][i] * w[q];
            }
            w[i] = s / chol[i][i];
        }
        r = residual(&cols, &chosen, &w, &t);
        rnorm = dot(&r, &r).sqrt();
        history.push(rnorm as f32);
    }

    for v in &mut w {
        *v = v.max(0.0);
    }
    let r = residual(&cols, &chosen, &w, &t);
    Ok(OmpSolution {
        indices: chosen,
        weights: w.iter().map(|&v| v as f32).collect(),
        residual_norm: dot(&r, &r).sqrt() as f32,
        residual_history: history,
        warning,
    })
}
