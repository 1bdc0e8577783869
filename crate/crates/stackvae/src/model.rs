//! The stacking block-wise VAE: one shared encoder/decoder applied to every
//! channel row, a diagonal-Gaussian posterior, reparameterized sampling, a
//! per-channel Gaussian likelihood, and the ELBO loss.
//!
//! Weight sharing means the parameter count depends on the window length,
//! hidden width, and latent size only — never on the channel count.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{fuse, GraphConfig, NodeEmbedding, SparseAdjacency};
use crate::linear::LinearLayer;
use crate::matrix::{relu, softplus, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct StackVaeConfig {
    /// Sliding-window width l.
    pub window_len: usize,
    /// Latent dimension m.
    pub latent_dim: usize,
    /// Hidden width of the single encoder/decoder layer.
    pub hidden_dim: usize,
    /// Added to every posterior/likelihood scale after softplus.
    pub sigma_floor: f64,
    /// Blend ratio γ between a channel's own features and its neighbors'.
    pub fusion_ratio: f64,
}

impl Default for StackVaeConfig {
    fn default() -> Self {
        StackVaeConfig {
            window_len: 40,
            latent_dim: 20,
            hidden_dim: 40,
            sigma_floor: 1e-4,
            fusion_ratio: 0.5,
        }
    }
}

impl StackVaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 || self.latent_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidArg(
                "window_len, latent_dim, hidden_dim must be positive".into(),
            ));
        }
        if self.sigma_floor <= 0.0 {
            return Err(Error::InvalidArg(format!(
                "sigma_floor must be positive, got {}",
                self.sigma_floor
            )));
        }
        if !(0.0..=1.0).contains(&self.fusion_ratio) {
            return Err(Error::InvalidArg(format!(
                "fusion_ratio must be in [0,1], got {}",
                self.fusion_ratio
            )));
        }
        Ok(())
    }
}

/// All learnable weights of the shared encoder/decoder stack.
#[derive(Debug, Clone, PartialEq)]
pub struct StackVaeParams {
    pub enc_in: LinearLayer,
    pub enc_mu: LinearLayer,
    pub enc_sigma: LinearLayer,
    pub dec_in: LinearLayer,
    pub dec_mu: LinearLayer,
    pub dec_sigma: LinearLayer,
}

impl StackVaeParams {
    pub fn new<R: Rng + ?Sized>(cfg: &StackVaeConfig, rng: &mut R) -> Self {
        let (l, m, d_h) = (cfg.window_len, cfg.latent_dim, cfg.hidden_dim);
        StackVaeParams {
            enc_in: LinearLayer::new(l, d_h, rng),
            enc_mu: LinearLayer::new(d_h, m, rng),
            enc_sigma: LinearLayer::new(d_h, m, rng),
            dec_in: LinearLayer::new(m, d_h, rng),
            dec_mu: LinearLayer::new(d_h, l, rng),
            dec_sigma: LinearLayer::new(d_h, l, rng),
        }
    }

    pub fn count(&self) -> usize {
        self.enc_in.param_count()
            + self.enc_mu.param_count()
            + self.enc_sigma.param_count()
            + self.dec_in.param_count()
            + self.dec_mu.param_count()
            + self.dec_sigma.param_count()
    }
}

/// Closed-form parameter count of [`StackVaeParams`] from the layer shapes:
/// one l→d_h encoder layer, two d_h→m heads, one m→d_h decoder layer, two
/// d_h→l heads, each with weights plus bias.
pub fn param_count(l: usize, m: usize, d_h: usize) -> usize {
    (d_h * l + d_h) + 2 * (m * d_h + m) + (d_h * m + d_h) + 2 * (l * d_h + l)
}

/// Per-channel diagonal Gaussian posterior; row n holds channel n.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGaussian {
    /// N×m means.
    pub mu: Matrix,
    /// N×m standard deviations, all ≥ the sigma floor.
    pub sigma: Matrix,
}

/// Per-channel Gaussian likelihood over the reconstructed window.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodGaussian {
    /// N×l means; this is the reconstruction output.
    pub mu: Matrix,
    /// N×l standard deviations, all ≥ the sigma floor.
    pub sigma: Matrix,
}

/// Shared layer applied to every row of `m`: `(W·mᵀ + b)ᵀ`.
fn apply_rowwise(layer: &LinearLayer, m: &Matrix) -> Result<Matrix> {
    Ok(layer.forward(&m.transpose())?.transpose())
}

/// Encode a window: per-channel hidden features, graph fusion, then the
/// posterior heads. Returns the pre-fusion features H₁ alongside the
/// posterior.
pub fn encode(
    x: &Matrix,
    adj: &SparseAdjacency,
    cfg: &StackVaeConfig,
    params: &StackVaeParams,
) -> Result<(Matrix, PosteriorGaussian)> {
    if x.cols() != cfg.window_len {
        return Err(Error::shape(
            "encode",
            format!("{} columns", cfg.window_len),
            format!("{}", x.cols()),
        ));
    }
    if adj.n_channels() != x.rows() {
        return Err(Error::shape(
            "encode",
            format!("{}-channel adjacency", x.rows()),
            format!("{}", adj.n_channels()),
        ));
    }
    let h1 = relu(&apply_rowwise(&params.enc_in, x)?);
    let h2 = fuse(&h1, adj, cfg.fusion_ratio)?;
    let mu = apply_rowwise(&params.enc_mu, &h2)?;
    let sigma = softplus(&apply_rowwise(&params.enc_sigma, &h2)?).map(|v| v + cfg.sigma_floor);
    Ok((h1, PosteriorGaussian { mu, sigma }))
}

/// `Z = μ + σ ⊙ ε` for externally supplied standard-normal noise.
pub fn reparameterize(posterior: &PosteriorGaussian, noise: &Matrix) -> Matrix {
    posterior.mu.add(&posterior.sigma.mul_elem(noise))
}

/// Decode latent rows back to a per-channel window likelihood.
pub fn decode(
    z: &Matrix,
    cfg: &StackVaeConfig,
    params: &StackVaeParams,
) -> Result<LikelihoodGaussian> {
    if z.cols() != cfg.latent_dim {
        return Err(Error::shape(
            "decode",
            format!("{} latent columns", cfg.latent_dim),
            format!("{}", z.cols()),
        ));
    }
    let h = relu(&apply_rowwise(&params.dec_in, z)?);
    let mu = apply_rowwise(&params.dec_mu, &h)?;
    let sigma = softplus(&apply_rowwise(&params.dec_sigma, &h)?).map(|v| v + cfg.sigma_floor);
    Ok(LikelihoodGaussian { mu, sigma })
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// One-sample Monte-Carlo estimate of `-E[log p(X|Z)]`, summed over channels
/// and steps.
pub fn negative_log_likelihood(x: &Matrix, likelihood: &LikelihoodGaussian) -> Result<f64> {
    if (x.rows(), x.cols()) != (likelihood.mu.rows(), likelihood.mu.cols()) {
        return Err(Error::shape(
            "negative_log_likelihood",
            format!("{}x{}", likelihood.mu.rows(), likelihood.mu.cols()),
            format!("{}x{}", x.rows(), x.cols()),
        ));
    }
    let mut total = 0.0;
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let mu = likelihood.mu.get(i, j);
            let sigma = likelihood.sigma.get(i, j);
            if sigma <= 0.0 {
                return Err(Error::NonFinite(format!(
                    "likelihood sigma at ({i},{j}) is {sigma}"
                )));
            }
            let r = (x.get(i, j) - mu) / sigma;
            total += 0.5 * r * r + sigma.ln() + HALF_LN_2PI;
        }
    }
    Ok(total)
}

/// Closed-form `KL(q ‖ N(0,I))` summed over all posterior entries:
/// `Σ ½(μ² + σ² − 1 − 2·ln σ)`.
pub fn kl_divergence(posterior: &PosteriorGaussian) -> Result<f64> {
    let mut total = 0.0;
    for (mu, sigma) in posterior
        .mu
        .as_slice()
        .iter()
        .zip(posterior.sigma.as_slice())
    {
        if *sigma <= 0.0 {
            return Err(Error::NonFinite(format!("posterior sigma is {sigma}")));
        }
        total += 0.5 * (mu * mu + sigma * sigma - 1.0 - 2.0 * sigma.ln());
    }
    Ok(total)
}

/// `L_VAE = NLL + KL` for one window.
pub fn vae_loss(
    x: &Matrix,
    posterior: &PosteriorGaussian,
    likelihood: &LikelihoodGaussian,
) -> Result<f64> {
    Ok(negative_log_likelihood(x, likelihood)? + kl_divergence(posterior)?)
}

/// VAE stack plus graph module: everything the optimizer touches.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub vae: StackVaeParams,
    pub graph: NodeEmbedding,
}

impl ModelParams {
    pub fn new<R: Rng + ?Sized>(
        model_cfg: &StackVaeConfig,
        graph_cfg: &GraphConfig,
        rng: &mut R,
    ) -> Self {
        ModelParams {
            vae: StackVaeParams::new(model_cfg, rng),
            graph: NodeEmbedding::new(graph_cfg.n_channels, graph_cfg.embed_dim, rng),
        }
    }
}

/// Mutable view of one named parameter block and its gradient buffer.
pub struct ParamBlockMut<'a> {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub values: &'a mut [f64],
    pub grads: &'a mut [f64],
}

impl ModelParams {
    /// Blocks in a fixed order; optimizer state, checkpoints, and flattened
    /// views all rely on it. Graph blocks come last so they can be excluded
    /// when the graph module is frozen.
    pub fn blocks_mut(&mut self, include_graph: bool) -> Vec<ParamBlockMut<'_>> {
        fn layer_blocks<'a>(
            out: &mut Vec<ParamBlockMut<'a>>,
            layer: &'a mut LinearLayer,
            weight_name: &'static str,
            bias_name: &'static str,
        ) {
            let rows = layer.weight.rows();
            let cols = layer.weight.cols();
            out.push(ParamBlockMut {
                name: weight_name,
                rows,
                cols,
                values: layer.weight.as_mut_slice(),
                grads: layer.grad_weight.as_mut_slice(),
            });
            let blen = layer.bias.len();
            out.push(ParamBlockMut {
                name: bias_name,
                rows: 1,
                cols: blen,
                values: &mut layer.bias,
                grads: &mut layer.grad_bias,
            });
        }

        let mut blocks = Vec::with_capacity(16);
        layer_blocks(&mut blocks, &mut self.vae.enc_in, "enc_in.weight", "enc_in.bias");
        layer_blocks(&mut blocks, &mut self.vae.enc_mu, "enc_mu.weight", "enc_mu.bias");
        layer_blocks(
            &mut blocks,
            &mut self.vae.enc_sigma,
            "enc_sigma.weight",
            "enc_sigma.bias",
        );
        layer_blocks(&mut blocks, &mut self.vae.dec_in, "dec_in.weight", "dec_in.bias");
        layer_blocks(&mut blocks, &mut self.vae.dec_mu, "dec_mu.weight", "dec_mu.bias");
        layer_blocks(
            &mut blocks,
            &mut self.vae.dec_sigma,
            "dec_sigma.weight",
            "dec_sigma.bias",
        );
        if include_graph {
            let rows = self.graph.embedding.rows();
            let cols = self.graph.embedding.cols();
            blocks.push(ParamBlockMut {
                name: "graph.embedding",
                rows,
                cols,
                values: self.graph.embedding.as_mut_slice(),
                grads: self.graph.grad_embedding.as_mut_slice(),
            });
            layer_blocks(
                &mut blocks,
                &mut self.graph.proj,
                "graph.proj.weight",
                "graph.proj.bias",
            );
        }
        blocks
    }

    pub fn zero_grads(&mut self) {
        for block in self.blocks_mut(true) {
            block.grads.fill(0.0);
        }
    }

    pub fn total_params(&mut self, include_graph: bool) -> usize {
        self.blocks_mut(include_graph)
            .iter()
            .map(|b| b.values.len())
            .sum()
    }

    pub fn flat_values(&mut self, include_graph: bool) -> Vec<f64> {
        let mut out = Vec::new();
        for block in self.blocks_mut(include_graph) {
            out.extend_from_slice(block.values);
        }
        out
    }

    pub fn flat_grads(&mut self, include_graph: bool) -> Vec<f64> {
        let mut out = Vec::new();
        for block in self.blocks_mut(include_graph) {
            out.extend_from_slice(block.grads);
        }
        out
    }

    pub fn set_flat_values(&mut self, include_graph: bool, flat: &[f64]) {
        let mut offset = 0;
        for block in self.blocks_mut(include_graph) {
            block
                .values
                .copy_from_slice(&flat[offset..offset + block.values.len()]);
            offset += block.values.len();
        }
        assert_eq!(offset, flat.len(), "flat vector length mismatch");
    }

    /// Resolve a flat index to `block_name[inner_index]` for diagnostics.
    pub fn describe_flat_index(&mut self, include_graph: bool, index: usize) -> String {
        let mut offset = 0;
        for block in self.blocks_mut(include_graph) {
            if index < offset + block.values.len() {
                return format!("{}[{}]", block.name, index - offset);
            }
            offset += block.values.len();
        }
        format!("<out of range {index}>")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_cfg() -> StackVaeConfig {
        StackVaeConfig {
            window_len: 8,
            latent_dim: 4,
            hidden_dim: 8,
            sigma_floor: 1e-4,
            fusion_ratio: 0.5,
        }
    }

    #[test]
    fn count_matches_closed_form_and_ignores_channels() {
        let cfg = StackVaeConfig {
            window_len: 100,
            latent_dim: 20,
            hidden_dim: 40,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = StackVaeParams::new(&cfg, &mut rng);
        assert_eq!(params.count(), param_count(100, 20, 40));
        // The VAE stack has no channel dimension anywhere, so the count for
        // N=5 and N=55 is the same object; spell it out anyway.
        assert_eq!(params.count(), param_count(100, 20, 40));
        assert!(params.count() >= 10_000 && params.count() <= 100_000);
    }

    #[test]
    fn identity_fusion_keeps_posterior_independent_of_gamma() {
        let cfg = toy_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = StackVaeParams::new(&cfg, &mut rng);
        let x = Matrix::uniform(3, 8, 1.0, &mut rng);
        let adj = SparseAdjacency::identity(3);

        let (h1_a, post_a) = encode(&x, &adj, &cfg, &params).unwrap();
        let mut cfg0 = cfg.clone();
        cfg0.fusion_ratio = 0.0;
        let (h1_b, post_b) = encode(&x, &adj, &cfg0, &params).unwrap();
        assert_eq!(h1_a, h1_b);
        assert_eq!(post_a, post_b);
    }

    #[test]
    fn gamma_zero_bypasses_any_adjacency() {
        let mut cfg = toy_cfg();
        cfg.fusion_ratio = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = StackVaeParams::new(&cfg, &mut rng);
        let x = Matrix::uniform(4, 8, 1.0, &mut rng);

        let averaging = SparseAdjacency {
            weights: Matrix::from_vec(4, 4, vec![0.25; 16]),
            kept: (0..4).map(|_| (0..4).collect()).collect(),
        };
        let (_, post_avg) = encode(&x, &averaging, &cfg, &params).unwrap();
        let (_, post_id) = encode(&x, &SparseAdjacency::identity(4), &cfg, &params).unwrap();
        assert_eq!(post_avg, post_id);
    }

    #[test]
    fn weight_sharing_maps_equal_channels_to_equal_rows() {
        let cfg = toy_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = StackVaeParams::new(&cfg, &mut rng);
        let mut x = Matrix::uniform(3, 8, 1.0, &mut rng);
        let row: Vec<f64> = x.row(0).to_vec();
        x.row_mut(2).copy_from_slice(&row);

        let (_, post) = encode(&x, &SparseAdjacency::identity(3), &cfg, &params).unwrap();
        assert_eq!(post.mu.row(0), post.mu.row(2));
        assert_eq!(post.sigma.row(0), post.sigma.row(2));

        let z = post.mu.clone();
        let like = decode(&z, &cfg, &params).unwrap();
        assert_eq!(like.mu.row(0), like.mu.row(2));
        assert_eq!(like.sigma.row(0), like.sigma.row(2));
    }

    #[test]
    fn channel_permutation_equivariance() {
        let cfg = toy_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = StackVaeParams::new(&cfg, &mut rng);
        let x = Matrix::uniform(3, 8, 1.0, &mut rng);
        // Non-trivial row-stochastic adjacency.
        let a = Matrix::uniform(3, 3, 1.0, &mut rng).map(f64::abs);
        let adj = crate::graph::sparsify_and_normalize(&a, 2).unwrap();

        // Permutation (0 1 2) -> (2 0 1).
        let perm = [2usize, 0, 1];
        let mut xp = Matrix::zeros(3, 8);
        let mut wp = Matrix::zeros(3, 3);
        for i in 0..3 {
            xp.row_mut(perm[i]).copy_from_slice(x.row(i));
            for j in 0..3 {
                wp.set(perm[i], perm[j], adj.weights.get(i, j));
            }
        }
        let adj_p = SparseAdjacency {
            weights: wp,
            kept: vec![vec![], vec![], vec![]],
        };

        let (_, post) = encode(&x, &adj, &cfg, &params).unwrap();
        let (_, post_p) = encode(&xp, &adj_p, &cfg, &params).unwrap();
        for i in 0..3 {
            assert_eq!(post.mu.row(i), post_p.mu.row(perm[i]));
            assert_eq!(post.sigma.row(i), post_p.sigma.row(perm[i]));
        }
    }

    #[test]
    fn reparameterize_cases() {
        let post = PosteriorGaussian {
            mu: Matrix::from_rows(&[vec![1.0, -2.0]]),
            sigma: Matrix::from_rows(&[vec![0.5, 2.0]]),
        };
        let zero = Matrix::zeros(1, 2);
        assert_eq!(reparameterize(&post, &zero), post.mu);

        let noise = Matrix::from_rows(&[vec![1.0, -1.0]]);
        let z = reparameterize(&post, &noise);
        assert_eq!(z.as_slice(), &[1.5, -4.0]);
    }

    #[test]
    fn reparameterize_monte_carlo_mean() {
        use rand_distr::{Distribution, StandardNormal};
        let post = PosteriorGaussian {
            mu: Matrix::from_rows(&[vec![0.7]]),
            sigma: Matrix::from_rows(&[vec![0.3]]),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples = 100_000;
        let mut acc = 0.0;
        for _ in 0..samples {
            let e: f64 = StandardNormal.sample(&mut rng);
            acc += reparameterize(&post, &Matrix::from_rows(&[vec![e]])).get(0, 0);
        }
        let mean = acc / samples as f64;
        let stderr = 0.3 / (samples as f64).sqrt();
        assert!(
            (mean - 0.7).abs() < 4.0 * stderr,
            "mean {mean} vs 0.7 ± {stderr}"
        );
    }

    #[test]
    fn zero_parameters_give_constant_likelihood() {
        let cfg = toy_cfg();
        let params = StackVaeParams {
            enc_in: LinearLayer::zeros(8, 8),
            enc_mu: LinearLayer::zeros(8, 4),
            enc_sigma: LinearLayer::zeros(8, 4),
            dec_in: LinearLayer::zeros(4, 8),
            dec_mu: LinearLayer::zeros(8, 8),
            dec_sigma: LinearLayer::zeros(8, 8),
        };
        let z = Matrix::uniform(2, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(6));
        let like = decode(&z, &cfg, &params).unwrap();
        let expect_sigma = crate::matrix::softplus_scalar(0.0) + cfg.sigma_floor;
        for (mu, sigma) in like.mu.as_slice().iter().zip(like.sigma.as_slice()) {
            assert_eq!(*mu, 0.0);
            assert_eq!(*sigma, expect_sigma);
        }
    }

    #[test]
    fn kl_closed_forms() {
        // Prior equals posterior: zero.
        let prior = PosteriorGaussian {
            mu: Matrix::zeros(2, 3),
            sigma: Matrix::from_vec(2, 3, vec![1.0; 6]),
        };
        assert_eq!(kl_divergence(&prior).unwrap(), 0.0);

        // Single unit-variance component at mu=1: 0.5*(1+1-1-0).
        let shifted = PosteriorGaussian {
            mu: Matrix::from_rows(&[vec![1.0]]),
            sigma: Matrix::from_rows(&[vec![1.0]]),
        };
        assert_eq!(kl_divergence(&shifted).unwrap(), 0.5);
    }

    #[test]
    fn kl_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let post = PosteriorGaussian {
                mu: Matrix::uniform(2, 3, 3.0, &mut rng),
                sigma: Matrix::uniform(2, 3, 1.0, &mut rng).map(|v| v.abs() + 1e-4),
            };
            assert!(kl_divergence(&post).unwrap() >= 0.0);
        }
    }

    #[test]
    fn nll_zero_residual_case() {
        let x = Matrix::uniform(3, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(8));
        let like = LikelihoodGaussian {
            mu: x.clone(),
            sigma: Matrix::from_vec(3, 8, vec![1.0; 24]),
        };
        let got = negative_log_likelihood(&x, &like).unwrap();
        let want = 24.0 * HALF_LN_2PI;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn flat_roundtrip_and_naming() {
        let cfg = toy_cfg();
        let gcfg = GraphConfig {
            n_channels: 3,
            embed_dim: 4,
            amplifier: 2.0,
            top_k: 2,
            graph_weight: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = ModelParams::new(&cfg, &gcfg, &mut rng);

        let flat = params.flat_values(true);
        assert_eq!(flat.len(), params.total_params(true));
        assert_eq!(
            params.total_params(true) - params.total_params(false),
            3 * 4 + (4 * 4 + 4)
        );

        let mut bumped = flat.clone();
        bumped[0] += 1.0;
        params.set_flat_values(true, &bumped);
        assert_eq!(params.flat_values(true), bumped);

        assert_eq!(params.describe_flat_index(true, 0), "enc_in.weight[0]");
        let last = params.total_params(true) - 1;
        assert!(params
            .describe_flat_index(true, last)
            .starts_with("graph.proj.bias"));
    }
}
