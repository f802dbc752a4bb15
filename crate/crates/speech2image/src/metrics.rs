//! Evaluation metrics: class-conditional score (exp of mean KL to the
//! marginal), Fréchet distance between Gaussian feature summaries,
//! retrieval mean average precision and recall@k.
//!
//! Everything here is deterministic plain-f64 arithmetic over extracted
//! features; no gradients are involved. The matrix square root inside the
//! Fréchet distance uses a cyclic Jacobi eigendecomposition with eigenvalue
//! clamping, chosen for exactness at the feature widths used here.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images in, per-image class probabilities and embedding features out.
pub trait FeatureExtractor {
    fn n_classes(&self) -> usize;
    fn feature_dim(&self) -> usize;
    /// images [n, 3, r, r] in [-1, 1] -> (probs [n][k], features [n][e]).
    fn extract(&self, images: &Tensor<f32>) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)>;
    /// Stable fingerprint of the extractor weights, for report provenance.
    fn checksum(&self) -> u64;
}

/// Mean and unbiased covariance of a feature sample.
#[derive(Debug, Clone)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major [dim, dim], symmetrized.
    pub cov: Vec<f64>,
    pub dim: usize,
    pub count: usize,
}

pub fn gaussian_stats(feats: &[Vec<f64>]) -> Result<GaussianStats> {
    let n = feats.len();
    if n < 2 {
        return Err(Error::DegenerateBatch(format!(
            "covariance needs >= 2 samples, got {n}"
        )));
    }
    let dim = feats[0].len();
    if feats.iter().any(|f| f.len() != dim) {
        return Err(Error::Contract("ragged feature rows".into()));
    }
    let mut mean = vec![0.0; dim];
    for f in feats {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; dim * dim];
    for f in feats {
        for i in 0..dim {
            let di = f[i] - mean[i];
            for j in i..dim {
                cov[i * dim + j] += di * (f[j] - mean[j]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..dim {
        for j in i..dim {
            let v = cov[i * dim + j] / denom;
            cov[i * dim + j] = v;
            cov[j * dim + i] = v;
        }
    }
    Ok(GaussianStats {
        mean,
        cov,
        dim,
        count: n,
    })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
/// Returns (eigenvalues, eigenvectors as columns of a row-major matrix).
fn sym_eigen(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let off = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += m[i * n + j] * m[i * n + j];
            }
        }
        s
    };
    let norm: f64 = m.iter().map(|x| x * x).sum::<f64>().max(1e-300);
    let tol = 1e-24 * norm;
    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        if off(&m) <= tol {
            let eig: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
            return Ok((eig, v));
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    Err(Error::Numeric(format!(
        "Jacobi eigendecomposition did not converge in {max_sweeps} sweeps \
         (n = {n}, residual off-diagonal {:.3e}, matrix norm {:.3e})",
        off(&m).sqrt(),
        norm.sqrt()
    )))
}

fn matmul_sq(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// Symmetric PSD square root via eigendecomposition with clamping.
fn sym_sqrt(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let (eig, v) = sym_eigen(a, n)?;
    let mut scaled = vec![0.0; n * n]; // V * sqrt(clamp(Lambda))
    for j in 0..n {
        let s = eig[j].max(0.0).sqrt();
        for i in 0..n {
            scaled[i * n + j] = v[i * n + j] * s;
        }
    }
    // scaled * V^T
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += scaled[i * n + k] * v[j * n + k];
            }
            out[i * n + j] = acc;
        }
    }
    Ok(out)
}

/// Fréchet distance between two Gaussian summaries:
/// ||mu_a - mu_b||^2 + tr(cov_a + cov_b - 2 (cov_a cov_b)^(1/2)).
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::Shape {
            op: "fid",
            detail: format!("feature dims {} vs {}", a.dim, b.dim),
        });
    }
    let n = a.dim;
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let tr = |m: &[f64]| (0..n).map(|i| m[i * n + i]).sum::<f64>();

    // tr((A B)^(1/2)) computed as tr((A^(1/2) B A^(1/2))^(1/2)), which is
    // symmetric PSD and safe for the eigen route.
    let sa = sym_sqrt(&a.cov, n)?;
    let inner = matmul_sq(&matmul_sq(&sa, &b.cov, n), &sa, n);
    // Symmetrize against rounding before decomposing.
    let mut inner_sym = inner.clone();
    for i in 0..n {
        for j in 0..n {
            inner_sym[i * n + j] = 0.5 * (inner[i * n + j] + inner[j * n + i]);
        }
    }
    let (eig, _) = sym_eigen(&inner_sym, n)?;
    let tr_sqrt: f64 = eig.iter().map(|&l| l.max(0.0).sqrt()).sum();

    let val = mean_term + tr(&a.cov) + tr(&b.cov) - 2.0 * tr_sqrt;
    // Clamp: tiny negatives (and equally tiny positives) are decomposition
    // noise around zero.
    Ok(if val < 1e-9 { 0.0 } else { val })
}

/// Split-wise exponentiated mean KL between conditional and marginal class
/// distributions. Returns (mean, population std) over splits.
pub fn inception_score(probs: &[Vec<f64>], splits: usize) -> Result<(f64, f64)> {
    let n = probs.len();
    if splits == 0 || n < splits {
        return Err(Error::Contract(format!(
            "need n >= splits >= 1, got n = {n}, splits = {splits}"
        )));
    }
    let k = probs.first().map(|p| p.len()).unwrap_or(0);
    for (i, row) in probs.iter().enumerate() {
        if row.len() != k {
            return Err(Error::Contract(format!("ragged probability row {i}")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-4 || row.iter().any(|&p| !(0.0..=1.0 + 1e-6).contains(&p)) {
            return Err(Error::Contract(format!(
                "row {i} is not a probability distribution (sum {sum})"
            )));
        }
    }

    let mut scores = Vec::with_capacity(splits);
    let base = n / splits;
    let extra = n % splits;
    let mut at = 0;
    for s in 0..splits {
        let len = base + usize::from(s < extra);
        let chunk = &probs[at..at + len];
        at += len;
        let mut marginal = vec![0.0; k];
        for row in chunk {
            for (m, p) in marginal.iter_mut().zip(row) {
                *m += p;
            }
        }
        for m in &mut marginal {
            *m /= len as f64;
        }
        let mut mean_kl = 0.0;
        for row in chunk {
            let mut kl = 0.0;
            for (&p, &q) in row.iter().zip(&marginal) {
                if p > 0.0 {
                    kl += p * (p.ln() - q.ln());
                }
            }
            mean_kl += kl;
        }
        mean_kl /= len as f64;
        scores.push(mean_kl.exp());
    }
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Gallery indices ranked by descending cosine similarity to the query,
/// ties broken by index for determinism.
pub fn rank_by_cosine(query: &[f64], gallery: &[Vec<f64>]) -> Vec<usize> {
    let mut sims: Vec<(usize, f64)> = gallery
        .iter()
        .enumerate()
        .map(|(i, g)| (i, cosine(query, g)))
        .collect();
    sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal)
        .then(a.0.cmp(&b.0)));
    sims.into_iter().map(|(i, _)| i).collect()
}

/// Average precision of one ranked list with class-match relevance.
/// Queries whose class is absent from the gallery score 0.
fn average_precision(ranking: &[usize], g_labels: &[usize], class: usize) -> f64 {
    let relevant = g_labels.iter().filter(|&&l| l == class).count();
    if relevant == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (pos, &gi) in ranking.iter().enumerate() {
        if g_labels[gi] == class {
            hits += 1;
            ap += hits as f64 / (pos + 1) as f64;
        }
    }
    ap / relevant as f64
}

/// Mean average precision of query embeddings against a gallery, relevance
/// defined by class-label equality.
pub fn retrieval_map(
    queries: &[Vec<f64>],
    q_labels: &[usize],
    gallery: &[Vec<f64>],
    g_labels: &[usize],
) -> Result<f64> {
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::Contract("empty retrieval sets".into()));
    }
    if queries.len() != q_labels.len() || gallery.len() != g_labels.len() {
        return Err(Error::Contract("label/embedding count mismatch".into()));
    }
    let mut total = 0.0;
    for (q, &c) in queries.iter().zip(q_labels) {
        let ranking = rank_by_cosine(q, gallery);
        total += average_precision(&ranking, g_labels, c);
    }
    Ok(total / queries.len() as f64)
}

/// Average of the two retrieval directions.
pub fn retrieval_map_bidirectional(
    sp_emb: &[Vec<f64>],
    sp_labels: &[usize],
    img_emb: &[Vec<f64>],
    img_labels: &[usize],
) -> Result<f64> {
    let fwd = retrieval_map(sp_emb, sp_labels, img_emb, img_labels)?;
    let bwd = retrieval_map(img_emb, img_labels, sp_emb, sp_labels)?;
    Ok(0.5 * (fwd + bwd))
}

/// Fraction of queries whose ground-truth gallery item ranks in the top k.
/// Returns the effective k, clamped to the gallery size.
pub fn recall_at_k(
    queries: &[Vec<f64>],
    gallery: &[Vec<f64>],
    ground_truth: &[usize],
    k: usize,
) -> Result<(f64, usize)> {
    if queries.len() != ground_truth.len() {
        return Err(Error::Contract("one ground-truth index per query".into()));
    }
    if gallery.is_empty() || k == 0 {
        return Err(Error::Contract("empty gallery or k = 0".into()));
    }
    let k_eff = k.min(gallery.len());
    let mut hits = 0usize;
    for (q, &truth) in queries.iter().zip(ground_truth) {
        if truth >= gallery.len() {
            return Err(Error::Contract(format!(
                "ground-truth index {truth} outside gallery of {}",
                gallery.len()
            )));
        }
        let ranking = rank_by_cosine(q, gallery);
        if ranking[..k_eff].contains(&truth) {
            hits += 1;
        }
    }
    Ok((hits as f64 / queries.len() as f64, k_eff))
}
