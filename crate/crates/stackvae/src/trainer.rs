//! Joint optimization of the VAE stack and the graph module.
//!
//! Each batch: rebuild the adjacency from the current embeddings, run the
//! batch loss on a tape, backpropagate, clip, decay, and take one Adam step.
//! Everything stochastic draws from one seeded stream owned by the run, so a
//! training run is a pure function of (data, config, seed) and can resume
//! from a checkpoint bit-exactly.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::adam::{adam_step, AdamState, TrainHyper};
use crate::data::{apply_normalizer, fit_normalizer, make_windows, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::graph::{
    compute_dense_adjacency, graph_loss, sparsify_and_normalize, GraphConfig, SparseAdjacency,
};
use crate::matrix::Matrix;
use crate::model::{
    decode, encode, reparameterize, vae_loss, ModelParams, StackVaeConfig,
};
use crate::tape::{NodeId, Tape};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Where the fusion adjacency comes from during training.
#[derive(Debug, Clone, PartialEq)]
pub enum GraphMode {
    /// Recompute from the learnable embeddings every batch.
    Learned,
    /// Use a frozen externally supplied adjacency; embeddings never train.
    Fixed(SparseAdjacency),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: StackVaeConfig,
    pub graph: GraphConfig,
    pub hyper: TrainHyper,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub vae: f64,
    pub graph: f64,
    pub total: f64,
}

/// Full state of a training run; checkpoints serialize exactly this.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model_cfg: StackVaeConfig,
    pub graph_cfg: GraphConfig,
    pub hyper: TrainHyper,
    pub graph_mode: GraphMode,
    pub params: ModelParams,
    pub adam: AdamState,
    pub epoch: usize,
    pub loss_history: Vec<EpochLoss>,
    /// Mean zero-noise loss on the held-out tail, one entry per epoch
    /// (empty when the series is too short to hold anything out).
    pub val_history: Vec<f64>,
    pub norm_stats: Vec<(f64, f64)>,
    pub seed: u64,
    pub rng: ChaCha8Rng,
}

impl TrainRun {
    /// Whether the optimizer updates the embedding/projection blocks.
    pub fn trains_graph(&self) -> bool {
        matches!(self.graph_mode, GraphMode::Learned)
            && (self.model_cfg.fusion_ratio > 0.0 || self.graph_cfg.graph_weight > 0.0)
    }

    /// Adjacency used for scoring: learned runs derive it from the current
    /// embeddings once and cache it, fixed runs reuse the frozen one.
    pub fn adjacency(&self) -> Result<SparseAdjacency> {
        match &self.graph_mode {
            GraphMode::Fixed(adj) => Ok(adj.clone()),
            GraphMode::Learned => {
                let dense = compute_dense_adjacency(&self.params.graph, self.graph_cfg.amplifier);
                sparsify_and_normalize(&dense, self.graph_cfg.top_k)
            }
        }
    }
}

/// Mean VAE/graph/total loss of a set of windows with explicit noise.
///
/// Components are summed over the batch and divided by the batch size;
/// `lambda` is the graph-loss weight.
pub fn total_loss(
    windows: &[Matrix],
    noises: &[Matrix],
    adj: &SparseAdjacency,
    cfg: &StackVaeConfig,
    lambda: f64,
    params: &crate::model::StackVaeParams,
) -> Result<(f64, f64, f64)> {
    if windows.is_empty() {
        return Err(Error::InvalidArg("empty batch".into()));
    }
    if windows.len() != noises.len() {
        return Err(Error::shape(
            "total_loss",
            format!("{} noise draws", windows.len()),
            format!("{}", noises.len()),
        ));
    }
    let mut vae_sum = 0.0;
    let mut graph_sum = 0.0;
    for (x, eps) in windows.iter().zip(noises) {
        let (_, posterior) = encode(x, adj, cfg, params)?;
        let z = reparameterize(&posterior, eps);
        let likelihood = decode(&z, cfg, params)?;
        vae_sum += vae_loss(x, &posterior, &likelihood)?;
        graph_sum += graph_loss(x, adj)?;
    }
    let bs = windows.len() as f64;
    let vae = vae_sum / bs;
    let graph = graph_sum / bs;
    Ok((vae + lambda * graph, vae, graph))
}

/// Parameter leaves in block order, mirroring `ModelParams::blocks_mut`.
struct ParamLeaves {
    vae: [NodeId; 12],
    graph: Option<[NodeId; 3]>,
}

impl ParamLeaves {
    fn in_block_order(&self, include_graph: bool) -> Vec<NodeId> {
        let mut ids: Vec<NodeId> = self.vae.to_vec();
        if include_graph {
            let g = self.graph.expect("graph leaves requested but not built");
            ids.extend_from_slice(&g);
        }
        ids
    }
}

fn push_layer_leaves(tape: &mut Tape, layer: &crate::linear::LinearLayer) -> (NodeId, NodeId) {
    let w = tape.leaf(layer.weight.clone());
    let b = tape.leaf(Matrix::row_vector(&layer.bias));
    (w, b)
}

fn build_param_leaves(tape: &mut Tape, params: &ModelParams, with_graph: bool) -> ParamLeaves {
    let (ew, eb) = push_layer_leaves(tape, &params.vae.enc_in);
    let (mw, mb) = push_layer_leaves(tape, &params.vae.enc_mu);
    let (sw, sb) = push_layer_leaves(tape, &params.vae.enc_sigma);
    let (dw, db) = push_layer_leaves(tape, &params.vae.dec_in);
    let (dmw, dmb) = push_layer_leaves(tape, &params.vae.dec_mu);
    let (dsw, dsb) = push_layer_leaves(tape, &params.vae.dec_sigma);
    let graph = with_graph.then(|| {
        let e = tape.leaf(params.graph.embedding.clone());
        let (pw, pb) = push_layer_leaves(tape, &params.graph.proj);
        [e, pw, pb]
    });
    ParamLeaves {
        vae: [ew, eb, mw, mb, sw, sb, dw, db, dmw, dmb, dsw, dsb],
        graph,
    }
}

/// Shared linear layer over channel rows: `X·Wᵀ + b` broadcast over rows.
fn tape_rowwise(tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
    let wt = tape.transpose(w);
    let xw = tape.matmul(x, wt);
    tape.add_row(xw, b)
}

/// Adjacency subgraph `Ã = D⁻¹(I + top_k(A))` from the embedding leaves.
///
/// The top-k selection is a straight-through mask: it is recomputed from the
/// current values but treated as constant for gradients, so only surviving
/// entries backpropagate into the embeddings.
fn build_adjacency(
    tape: &mut Tape,
    leaves: &[NodeId; 3],
    graph_cfg: &GraphConfig,
) -> Result<(NodeId, Vec<Vec<usize>>)> {
    let [embed, proj_w, proj_b] = *leaves;
    let projected = tape_rowwise(tape, embed, proj_w, proj_b);
    let scaled = tape.scale(projected, graph_cfg.amplifier);
    let m = tape.tanh(scaled);
    let mt = tape.transpose(m);
    let sim = tape.matmul(m, mt);
    let sim_t = tape.tanh(sim);
    let sim_a = tape.scale(sim_t, graph_cfg.amplifier);
    let a = tape.relu(sim_a);

    let n = graph_cfg.n_channels;
    let a_val = tape.value(a).clone();
    let mut mask = Matrix::zeros(n, n);
    let mut kept = Vec::with_capacity(n);
    for i in 0..n {
        let keep = crate::graph::top_k_indices(a_val.row(i), graph_cfg.top_k);
        for &j in &keep {
            mask.set(i, j, 1.0);
        }
        kept.push(keep);
    }
    let mask_leaf = tape.leaf(mask);
    let masked = tape.mul(a, mask_leaf);
    let eye = tape.leaf(Matrix::identity(n));
    let b = tape.add(masked, eye);
    let degree = tape.row_sum(b);
    let atilde = tape.div_col(b, degree);
    Ok((atilde, kept))
}

struct BatchGraph {
    total: NodeId,
    vae_mean: NodeId,
    graph_mean: NodeId,
}

/// Full batch loss: `L_total = L_VAE + λ·L_Graph`, both batch means.
fn build_batch_loss(
    tape: &mut Tape,
    leaves: &ParamLeaves,
    atilde: NodeId,
    cfg: &StackVaeConfig,
    lambda: f64,
    windows: &[&Matrix],
    noises: &[Matrix],
) -> BatchGraph {
    let [ew, eb, mw, mb, sw, sb, dw, db, dmw, dmb, dsw, dsb] = leaves.vae;
    let gamma = cfg.fusion_ratio;

    let mut vae_sum: Option<NodeId> = None;
    let mut graph_sum: Option<NodeId> = None;
    for (x, eps) in windows.iter().zip(noises) {
        let n_entries = (x.rows() * x.cols()) as f64;
        let xl = tape.leaf((*x).clone());
        let noise = tape.leaf(eps.clone());

        // Encoder with fusion.
        let pre1 = tape_rowwise(tape, xl, ew, eb);
        let h1 = tape.relu(pre1);
        let own = tape.scale(h1, 1.0 - gamma);
        let prop = tape.matmul(atilde, h1);
        let prop_g = tape.scale(prop, gamma);
        let h2 = tape.add(own, prop_g);
        let mu = tape_rowwise(tape, h2, mw, mb);
        let sig_pre = tape_rowwise(tape, h2, sw, sb);
        let sig_sp = tape.softplus(sig_pre);
        let sigma = tape.add_scalar(sig_sp, cfg.sigma_floor);

        // Reparameterized sample and decoder.
        let scaled_noise = tape.mul(sigma, noise);
        let z = tape.add(mu, scaled_noise);
        let dpre = tape_rowwise(tape, z, dw, db);
        let hd = tape.relu(dpre);
        let xmu = tape_rowwise(tape, hd, dmw, dmb);
        let xsig_pre = tape_rowwise(tape, hd, dsw, dsb);
        let xsig_sp = tape.softplus(xsig_pre);
        let xsigma = tape.add_scalar(xsig_sp, cfg.sigma_floor);

        // NLL: Σ ½((x−μ)/σ)² + ln σ, plus the ½ln2π constant per entry.
        let resid = tape.sub(xl, xmu);
        let r = tape.div(resid, xsigma);
        let r2 = tape.square(r);
        let r2h = tape.scale(r2, 0.5);
        let ln_sig = tape.ln(xsigma);
        let nll_mat = tape.add(r2h, ln_sig);
        let nll_sum = tape.sum(nll_mat);
        let nll = tape.add_scalar(nll_sum, n_entries * HALF_LN_2PI);

        // KL: Σ ½(μ² + σ² − 1 − 2·ln σ).
        let mu2 = tape.square(mu);
        let s2 = tape.square(sigma);
        let msum = tape.add(mu2, s2);
        let m1 = tape.add_scalar(msum, -1.0);
        let ln_s = tape.ln(sigma);
        let two_ln_s = tape.scale(ln_s, 2.0);
        let kl_mat = tape.sub(m1, two_ln_s);
        let kl_sum = tape.sum(kl_mat);
        let kl = tape.scale(kl_sum, 0.5);

        let window_vae = tape.add(nll, kl);
        vae_sum = Some(match vae_sum {
            Some(acc) => tape.add(acc, window_vae),
            None => window_vae,
        });

        // Graph loss ‖X − Ã·X‖².
        let ax = tape.matmul(atilde, xl);
        let gdiff = tape.sub(xl, ax);
        let gsq = tape.square(gdiff);
        let gw = tape.sum(gsq);
        graph_sum = Some(match graph_sum {
            Some(acc) => tape.add(acc, gw),
            None => gw,
        });
    }

    let bs = windows.len() as f64;
    let vae_mean = tape.scale(vae_sum.expect("non-empty batch"), 1.0 / bs);
    let graph_mean = tape.scale(graph_sum.expect("non-empty batch"), 1.0 / bs);
    let weighted = tape.scale(graph_mean, lambda);
    let total = tape.add(vae_mean, weighted);
    BatchGraph {
        total,
        vae_mean,
        graph_mean,
    }
}

/// Initialize a run: fit normalization, seed the RNG, draw parameters.
pub fn init_run(
    dataset: &TimeSeriesDataset,
    cfg: &TrainConfig,
    seed: u64,
    graph_mode: GraphMode,
) -> Result<TrainRun> {
    cfg.model.validate()?;
    cfg.graph.validate()?;
    if cfg.graph.n_channels != dataset.n_channels() {
        return Err(Error::shape(
            "init_run",
            format!("{} channels", dataset.n_channels()),
            format!("{} configured", cfg.graph.n_channels),
        ));
    }
    if let GraphMode::Fixed(adj) = &graph_mode {
        if adj.n_channels() != dataset.n_channels() {
            return Err(Error::shape(
                "init_run",
                format!("{}-channel adjacency", dataset.n_channels()),
                format!("{}", adj.n_channels()),
            ));
        }
        if !adj.is_row_stochastic(1e-6) {
            return Err(Error::InvalidArg(
                "fixed adjacency must be row-stochastic".into(),
            ));
        }
    }
    let norm_stats = fit_normalizer(dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ModelParams::new(&cfg.model, &cfg.graph, &mut rng);
    let mut run = TrainRun {
        model_cfg: cfg.model.clone(),
        graph_cfg: cfg.graph.clone(),
        hyper: cfg.hyper.clone(),
        graph_mode,
        params,
        adam: AdamState::new(0),
        epoch: 0,
        loss_history: Vec::new(),
        val_history: Vec::new(),
        norm_stats,
        seed,
        rng,
    };
    let trains_graph = run.trains_graph();
    run.adam = AdamState::new(run.params.total_params(trains_graph));
    Ok(run)
}

/// Normalize and window the series, holding out the last 10% of steps for
/// validation telemetry.
fn prepare_windows(
    dataset: &TimeSeriesDataset,
    run: &TrainRun,
) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
    let normalized = apply_normalizer(dataset, &run.norm_stats)?;
    let l = run.model_cfg.window_len;
    let t_total = normalized.len();
    let holdout = t_total / 10;
    let t_train = t_total - holdout;
    if t_train < l {
        return Err(Error::InvalidArg(format!(
            "training split of {t_train} steps is shorter than the window {l}"
        )));
    }
    let train_part = TimeSeriesDataset::new(Matrix::from_vec(
        normalized.n_channels(),
        t_train,
        (0..normalized.n_channels())
            .flat_map(|ch| normalized.values.row(ch)[..t_train].to_vec())
            .collect(),
    ));
    let train_windows: Vec<Matrix> = make_windows(&train_part, l, 1)?
        .into_iter()
        .map(|w| w.values)
        .collect();
    let val_windows: Vec<Matrix> = if holdout >= l {
        let val_part = TimeSeriesDataset::new(Matrix::from_vec(
            normalized.n_channels(),
            holdout,
            (0..normalized.n_channels())
                .flat_map(|ch| normalized.values.row(ch)[t_train..].to_vec())
                .collect(),
        ));
        make_windows(&val_part, l, 1)?
            .into_iter()
            .map(|w| w.values)
            .collect()
    } else {
        Vec::new()
    };
    if train_windows.len() < run.hyper.batch_size {
        return Err(Error::InvalidArg(format!(
            "{} training windows but batch size {}",
            train_windows.len(),
            run.hyper.batch_size
        )));
    }
    Ok((train_windows, val_windows))
}

/// Advance the run to `target_epoch`. On a non-finite loss the error is
/// returned with the parameters still at their last good values.
pub fn run_epochs(
    run: &mut TrainRun,
    dataset: &TimeSeriesDataset,
    target_epoch: usize,
) -> Result<()> {
    let (train_windows, val_windows) = prepare_windows(dataset, run)?;
    let n = dataset.n_channels();
    let m = run.model_cfg.latent_dim;
    let lambda = run.graph_cfg.graph_weight;
    let trains_graph = run.trains_graph();
    let learned = matches!(run.graph_mode, GraphMode::Learned);

    while run.epoch < target_epoch {
        let lr = run.hyper.lr_at_epoch(run.epoch);
        let mut order: Vec<usize> = (0..train_windows.len()).collect();
        order.shuffle(&mut run.rng);

        let mut vae_acc = 0.0;
        let mut graph_acc = 0.0;
        let mut total_acc = 0.0;
        for chunk in order.chunks(run.hyper.batch_size) {
            let noises: Vec<Matrix> = chunk
                .iter()
                .map(|_| {
                    let data: Vec<f64> = (0..n * m)
                        .map(|_| StandardNormal.sample(&mut run.rng))
                        .collect();
                    Matrix::from_vec(n, m, data)
                })
                .collect();
            let batch: Vec<&Matrix> = chunk.iter().map(|&i| &train_windows[i]).collect();

            let mut tape = Tape::new();
            let leaves = build_param_leaves(&mut tape, &run.params, learned);
            let atilde = if learned {
                let g = leaves.graph.as_ref().expect("learned mode builds graph leaves");
                build_adjacency(&mut tape, g, &run.graph_cfg)?.0
            } else {
                let GraphMode::Fixed(adj) = &run.graph_mode else {
                    unreachable!()
                };
                tape.leaf(adj.weights.clone())
            };
            let losses = build_batch_loss(
                &mut tape,
                &leaves,
                atilde,
                &run.model_cfg,
                lambda,
                &batch,
                &noises,
            );

            let total = tape.scalar(losses.total);
            if !total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at epoch {} is {total}",
                    run.epoch
                )));
            }
            vae_acc += tape.scalar(losses.vae_mean) * chunk.len() as f64;
            graph_acc += tape.scalar(losses.graph_mean) * chunk.len() as f64;
            total_acc += total * chunk.len() as f64;

            let grads = tape.backward(losses.total)?;
            let leaf_ids = leaves.in_block_order(trains_graph);
            for (block, id) in run.params.blocks_mut(trains_graph).iter_mut().zip(&leaf_ids) {
                let g = grads.wrt(&tape, *id);
                block.grads.copy_from_slice(g.as_slice());
            }

            let mut flat = run.params.flat_values(trains_graph);
            let flat_grads = run.params.flat_grads(trains_graph);
            adam_step(&mut flat, &flat_grads, &mut run.adam, &run.hyper, lr)?;
            run.params.set_flat_values(trains_graph, &flat);
            run.params.zero_grads();
        }

        let total_windows = train_windows.len() as f64;
        run.loss_history.push(EpochLoss {
            vae: vae_acc / total_windows,
            graph: graph_acc / total_windows,
            total: total_acc / total_windows,
        });

        if !val_windows.is_empty() {
            let adj = run.adjacency()?;
            let zero_noises: Vec<Matrix> =
                val_windows.iter().map(|_| Matrix::zeros(n, m)).collect();
            let (val_total, _, _) = total_loss(
                &val_windows,
                &zero_noises,
                &adj,
                &run.model_cfg,
                lambda,
                &run.params.vae,
            )?;
            run.val_history.push(val_total);
        }

        run.epoch += 1;
    }
    Ok(())
}

/// Train from scratch for `cfg.hyper.epochs` epochs with a learned graph.
pub fn train(dataset: &TimeSeriesDataset, cfg: &TrainConfig, seed: u64) -> Result<TrainRun> {
    let mut run = init_run(dataset, cfg, seed, GraphMode::Learned)?;
    let epochs = cfg.hyper.epochs;
    run_epochs(&mut run, dataset, epochs)?;
    Ok(run)
}
