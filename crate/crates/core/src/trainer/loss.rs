//! The three CSS loss terms and their analytic gradients.
//!
//! Batch rows are laid out as pairs: rows `2p` and `2p + 1` hold the two
//! same-class images of pair `p`.

use crate::error::{Error, Result};
use crate::numerics::{dot, log_sum_exp, norm, softmax, Mat};

fn pair_count(rows: usize, op: &'static str) -> Result<usize> {
    if rows < 2 || !rows.is_multiple_of(2) {
        return Err(Error::shape(
            op,
            format!("expected an even number (>= 2) of paired rows, got {rows}"),
        ));
    }
    Ok(rows / 2)
}

/// Normalized-temperature contrastive loss over cosine similarities of
/// concept-score rows.
///
/// For each anchor `a` with positive `p`:
/// `ℓ_a = -sim(a, p)/τ + log Σ_{m ≠ a} exp(sim(a, m)/τ)`, where the sum runs
/// over every other row in the batch, the positive included. Anchors are the
/// first member of each pair; with `symmetric` the second member anchors too.
/// The result is the mean over anchors.
pub fn contrastive_loss(scores: &Mat, tau: f64, symmetric: bool) -> Result<(f64, Mat)> {
    let rows = scores.rows();
    let n = pair_count(rows, "contrastive_loss")?;
    let norms: Vec<f64> = scores.row_iter().map(norm).collect();
    if let Some(r) = norms.iter().position(|&v| v == 0.0) {
        return Err(Error::ZeroNorm {
            what: "concept score row",
            row: r,
        });
    }
    let unit: Vec<Vec<f64>> = scores
        .row_iter()
        .zip(&norms)
        .map(|(r, &nr)| r.iter().map(|v| v / nr).collect())
        .collect();
    let mut sim = vec![vec![0.0; rows]; rows];
    for a in 0..rows {
        for m in a + 1..rows {
            let s = dot(&unit[a], &unit[m]);
            sim[a][m] = s;
            sim[m][a] = s;
        }
    }

    let mut anchors: Vec<(usize, usize)> = (0..n).map(|p| (2 * p, 2 * p + 1)).collect();
    if symmetric {
        anchors.extend((0..n).map(|p| (2 * p + 1, 2 * p)));
    }
    let weight = 1.0 / anchors.len() as f64;

    // d loss / d sim(a, m), accumulated over anchors
    let mut dsim = vec![vec![0.0; rows]; rows];
    let mut loss = 0.0;
    let mut logits = Vec::with_capacity(rows - 1);
    for &(a, pos) in &anchors {
        logits.clear();
        logits.extend((0..rows).filter(|&m| m != a).map(|m| sim[a][m] / tau));
        let lse = log_sum_exp(&logits);
        loss += weight * (lse - sim[a][pos] / tau);
        for (m, &z) in (0..rows).filter(|&m| m != a).zip(&logits) {
            let p = (z - lse).exp();
            let target = if m == pos { 1.0 } else { 0.0 };
            dsim[a][m] += weight * (p - target) / tau;
        }
    }

    // sim(a, m) = u_a · u_m with u = s / |s|:
    //   ∂sim/∂s_a = (u_m - sim · u_a) / |s_a|
    let c = scores.cols();
    let mut grad = Mat::zeros(rows, c);
    for a in 0..rows {
        for m in 0..rows {
            let g = dsim[a][m];
            if g == 0.0 {
                continue;
            }
            let s = sim[a][m];
            {
                let row = grad.row_mut(a);
                for j in 0..c {
                    row[j] += g * (unit[m][j] - s * unit[a][j]) / norms[a];
                }
            }
            let row = grad.row_mut(m);
            for j in 0..c {
                row[j] += g * (unit[a][j] - s * unit[m][j]) / norms[m];
            }
        }
    }
    Ok((loss, grad))
}

/// Mean softmax cross-entropy over rows, with gradient `(softmax - onehot) / rows`.
pub fn ce_loss(logits: &Mat, labels: &[usize]) -> Result<(f64, Mat)> {
    let rows = logits.rows();
    if rows == 0 || labels.len() != rows {
        return Err(Error::shape(
            "ce_loss",
            format!("{rows} logit rows for {} labels", labels.len()),
        ));
    }
    let k = logits.cols();
    if let Some(i) = labels.iter().position(|&y| y >= k) {
        return Err(Error::InvalidValue {
            file: "batch labels".into(),
            index: i,
            reason: format!("class {} out of range for {k} classes", labels[i]),
        });
    }
    let inv = 1.0 / rows as f64;
    let mut loss = 0.0;
    let mut grad = Mat::zeros(rows, k);
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let lse = log_sum_exp(row);
        loss += inv * (lse - row[y]);
        let g = grad.row_mut(r);
        for j in 0..k {
            g[j] = inv * ((row[j] - lse).exp() - if j == y { 1.0 } else { 0.0 });
        }
    }
    Ok((loss, grad))
}

/// L1 alignment between softmax-normalized scores and labels.
///
/// Each supervised row `l` contributes `mean_j |γ (softmax(C_l) - softmax(G_l))_j|`;
/// the sum is divided by the total row count, supervised or not. Gradients flow
/// through `softmax(C_l)` only.
pub fn concept_loss(
    scores: &Mat,
    labels: &Mat,
    supervised: &[bool],
    gamma: f64,
) -> Result<(f64, Mat)> {
    let (rows, c) = scores.shape();
    if labels.shape() != scores.shape() || supervised.len() != rows {
        return Err(Error::shape(
            "concept_loss",
            format!(
                "scores {:?}, labels {:?}, {} flags",
                scores.shape(),
                labels.shape(),
                supervised.len()
            ),
        ));
    }
    let mut grad = Mat::zeros(rows, c);
    if rows == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / (rows as f64 * c as f64);
    let mut loss = 0.0;
    for l in (0..rows).filter(|&l| supervised[l]) {
        let p = softmax(scores.row(l));
        let q = softmax(labels.row(l));
        let mut gp = vec![0.0; c];
        for j in 0..c {
            let d = gamma * (p[j] - q[j]);
            loss += scale * d.abs();
            gp[j] = if d > 0.0 {
                gamma * scale
            } else if d < 0.0 {
                -gamma * scale
            } else {
                0.0
            };
        }
        // softmax Jacobian: dC_k = p_k (gp_k - gp · p)
        let inner = dot(&gp, &p);
        let g = grad.row_mut(l);
        for k in 0..c {
            g[k] = p[k] * (gp[k] - inner);
        }
    }
    Ok((loss, grad))
}
