//! Channel-interrelation graph: node embeddings to a dense similarity,
//! per-row top-k sparsification with degree normalization, the
//! self-supervised regression loss, and mid-latent feature fusion.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linear::LinearLayer;
use crate::matrix::{relu, tanh_act, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct GraphConfig {
    pub n_channels: usize,
    pub embed_dim: usize,
    /// Saturation-rate amplifier inside the similarity activations.
    pub amplifier: f64,
    /// Learned neighbors kept per row.
    pub top_k: usize,
    /// Weight of the graph loss in the total objective.
    pub graph_weight: f64,
}

impl GraphConfig {
    pub fn new(n_channels: usize) -> Self {
        GraphConfig {
            n_channels,
            embed_dim: 16,
            amplifier: 2.0,
            top_k: 10.min(n_channels),
            graph_weight: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k < 1 || self.top_k > self.n_channels {
            return Err(Error::InvalidArg(format!(
                "top_k {} must be in 1..={}",
                self.top_k, self.n_channels
            )));
        }
        if self.amplifier <= 0.0 {
            return Err(Error::InvalidArg(format!(
                "amplifier must be positive, got {}",
                self.amplifier
            )));
        }
        if self.graph_weight < 0.0 {
            return Err(Error::InvalidArg(format!(
                "graph_weight must be >= 0, got {}",
                self.graph_weight
            )));
        }
        Ok(())
    }
}

/// Learnable node embeddings plus the projection applied to them.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeEmbedding {
    /// N×embed_dim, one row per channel.
    pub embedding: Matrix,
    pub grad_embedding: Matrix,
    pub proj: LinearLayer,
}

impl NodeEmbedding {
    pub fn new<R: Rng + ?Sized>(n_channels: usize, embed_dim: usize, rng: &mut R) -> Self {
        // Unit-scale random init: the amplifier saturates tanh quickly, so
        // larger embeddings would start the similarity map near ±1 everywhere.
        NodeEmbedding {
            embedding: Matrix::uniform(n_channels, embed_dim, 1.0, rng),
            grad_embedding: Matrix::zeros(n_channels, embed_dim),
            proj: LinearLayer::new(embed_dim, embed_dim, rng),
        }
    }

    pub fn n_channels(&self) -> usize {
        self.embedding.rows()
    }
}

/// Row-stochastic sparse adjacency with per-row kept neighbor sets.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAdjacency {
    /// N×N, every row sums to 1.
    pub weights: Matrix,
    /// Column indices that survived top-k in each row.
    pub kept: Vec<Vec<usize>>,
}

impl SparseAdjacency {
    pub fn identity(n: usize) -> Self {
        SparseAdjacency {
            weights: Matrix::identity(n),
            kept: (0..n).map(|i| vec![i]).collect(),
        }
    }

    pub fn n_channels(&self) -> usize {
        self.weights.rows()
    }

    pub fn is_row_stochastic(&self, tol: f64) -> bool {
        (0..self.weights.rows())
            .all(|i| (self.weights.row(i).iter().sum::<f64>() - 1.0).abs() <= tol)
    }
}

/// Dense similarity `A = ReLU(α·tanh(M·Mᵀ))` with `M = tanh(α·proj(E))`.
///
/// Symmetric with entries in `[0, α)`.
pub fn compute_dense_adjacency(emb: &NodeEmbedding, amplifier: f64) -> Matrix {
    // proj applied row-wise: (W·Eᵀ + b)ᵀ = E·Wᵀ + b per row.
    let projected = emb
        .proj
        .forward(&emb.embedding.transpose())
        .expect("proj dims fixed by construction")
        .transpose();
    let m = tanh_act(&projected.scale(amplifier));
    let sim = m.matmul(&m.transpose());
    relu(&tanh_act(&sim).scale(amplifier))
}

/// Indices of the k largest entries in `row`, ties broken toward the lowest
/// column index. Returned in ascending index order.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    // Stable sort by descending value keeps equal entries in ascending
    // index order, which is exactly the tie-break rule.
    order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).expect("finite entries"));
    let mut kept: Vec<usize> = order.into_iter().take(k).collect();
    kept.sort_unstable();
    kept
}

/// Keep the k largest entries per row of a nonnegative `a`, zero the rest,
/// then return `Ã = D⁻¹(I+A)` with `D = diag(1 + Σ_j A_nj)`.
pub fn sparsify_and_normalize(a: &Matrix, k: usize) -> Result<SparseAdjacency> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::shape(
            "sparsify_and_normalize",
            format!("{n}x{n}"),
            format!("{}x{}", a.rows(), a.cols()),
        ));
    }
    if k < 1 || k > n {
        return Err(Error::InvalidArg(format!("top_k {k} must be in 1..={n}")));
    }

    let mut weights = Matrix::zeros(n, n);
    let mut kept = Vec::with_capacity(n);
    for i in 0..n {
        let keep = top_k_indices(a.row(i), k);
        let mut degree = 1.0;
        for &j in &keep {
            degree += a.get(i, j);
        }
        for &j in &keep {
            weights.set(i, j, a.get(i, j) / degree);
        }
        weights.set(i, i, weights.get(i, i) + 1.0 / degree);
        kept.push(keep);
    }
    Ok(SparseAdjacency { weights, kept })
}

/// Self-supervised regression loss `‖X − Ã·X‖²`.
pub fn graph_loss(x: &Matrix, adj: &SparseAdjacency) -> Result<f64> {
    if adj.n_channels() != x.rows() {
        return Err(Error::shape(
            "graph_loss",
            format!("{} channels", adj.n_channels()),
            format!("{} rows", x.rows()),
        ));
    }
    Ok(x.sub(&adj.weights.matmul(x)).frobenius_sq())
}

/// Mid-latent fusion `H₂ = (1−γ)·H₁ + γ·Ã·H₁`.
pub fn fuse(h1: &Matrix, adj: &SparseAdjacency, gamma: f64) -> Result<Matrix> {
    if adj.n_channels() != h1.rows() {
        return Err(Error::shape(
            "fuse",
            format!("{} channels", adj.n_channels()),
            format!("{} rows", h1.rows()),
        ));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArg(format!(
            "fusion ratio must be in [0,1], got {gamma}"
        )));
    }
    Ok(h1
        .scale(1.0 - gamma)
        .add(&adj.weights.matmul(h1).scale(gamma)))
}
