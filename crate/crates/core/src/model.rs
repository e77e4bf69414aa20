//! The SpoT-Mamba forecasting network.
//!
//! Pipeline: walk-sequence embedding into per-node vectors, temporal
//! feature assembly with calendar embeddings, a selective scan along
//! time, per-step transformer mixing over nodes, and an MLP forecast
//! head trained with Huber loss. The walk and temporal scan modules can
//! each be swapped between Mamba blocks and transformer encoders.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{WalkSet, WalkType};
use crate::numerics::{
    uniform_init, NumericsError, PId, ParamSet, Result as NumResult, Tape, Tensor, Var,
};
use crate::ssm::{bidirectional_scan, MambaBlock};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("walk set built for {walkset} nodes but the model has {model}")]
    WalksetMismatch { walkset: usize, model: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanKind {
    Mamba,
    Transformer,
}

impl std::fmt::Display for ScanKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScanKind::Mamba => write!(f, "mamba"),
            ScanKind::Transformer => write!(f, "transformer"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    /// Embedding dimension D.
    pub d: usize,
    /// Walk length K.
    pub k: usize,
    /// Walk repetitions per type M.
    pub m: usize,
    /// Input steps T.
    pub t_in: usize,
    /// Output steps T'.
    pub t_out: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub n_layers: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub steps_per_day: usize,
    pub d_state: usize,
    pub conv_width: usize,
    pub n_heads: usize,
    pub huber_delta: f64,
    pub walk_scan_kind: ScanKind,
    pub temporal_scan_kind: ScanKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 32,
            k: 20,
            m: 2,
            t_in: 12,
            t_out: 12,
            d_in: 1,
            d_out: 1,
            n_layers: 3,
            ff_dim: 256,
            dropout: 0.1,
            steps_per_day: 288,
            d_state: 16,
            conv_width: 4,
            n_heads: 4,
            huber_delta: 1.0,
            walk_scan_kind: ScanKind::Mamba,
            temporal_scan_kind: ScanKind::Mamba,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("d", self.d),
            ("k", self.k),
            ("m", self.m),
            ("t_in", self.t_in),
            ("t_out", self.t_out),
            ("d_in", self.d_in),
            ("d_out", self.d_out),
            ("n_layers", self.n_layers),
            ("ff_dim", self.ff_dim),
            ("steps_per_day", self.steps_per_day),
            ("d_state", self.d_state),
            ("conv_width", self.conv_width),
            ("n_heads", self.n_heads),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::BadConfig(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::BadConfig(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.huber_delta <= 0.0 {
            return Err(ModelError::BadConfig("huber_delta must be positive".into()));
        }
        if self.d % self.n_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "n_heads {} must divide d {}",
                self.n_heads, self.d
            )));
        }
        Ok(())
    }

    /// Width of the joint per-step feature Z.
    pub fn z_width(&self) -> usize {
        4 * self.d
    }
}

/// Mutable forward-pass context: training flag and the dropout stream.
pub struct FwdCtx {
    pub train: bool,
    pub dropout: f64,
    pub rng: ChaCha8Rng,
}

impl FwdCtx {
    pub fn eval() -> Self {
        FwdCtx {
            train: false,
            dropout: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(dropout: f64, seed: u64) -> Self {
        FwdCtx {
            train: true,
            dropout,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn apply_dropout(&mut self, tape: &mut Tape, x: Var) -> Var {
        if self.train && self.dropout > 0.0 {
            tape.dropout(x, self.dropout, &mut self.rng)
        } else {
            x
        }
    }
}

/// Pre-norm transformer encoder layer: multi-head self-attention plus a
/// position-wise feed-forward, both with residual connections.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    ln1_gamma: PId,
    ln1_beta: PId,
    w_q: PId,
    b_q: PId,
    w_k: PId,
    b_k: PId,
    w_v: PId,
    b_v: PId,
    w_o: PId,
    b_o: PId,
    ln2_gamma: PId,
    ln2_beta: PId,
    w_ff1: PId,
    b_ff1: PId,
    w_ff2: PId,
    b_ff2: PId,
    dim: usize,
    n_heads: usize,
}

impl TransformerLayer {
    pub fn new(
        ps: &mut ParamSet,
        prefix: &str,
        dim: usize,
        ff_dim: usize,
        n_heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(dim % n_heads == 0, "n_heads must divide dim");
        let lin = |ps: &mut ParamSet, name: String, din: usize, dout: usize, rng: &mut _| {
            ps.add(name, uniform_init(&[din, dout], din, rng))
        };
        TransformerLayer {
            ln1_gamma: ps.add(format!("{prefix}.ln1.gamma"), Tensor::ones(&[dim])),
            ln1_beta: ps.add(format!("{prefix}.ln1.beta"), Tensor::zeros(&[dim])),
            w_q: lin(ps, format!("{prefix}.w_q"), dim, dim, rng),
            b_q: ps.add(format!("{prefix}.b_q"), Tensor::zeros(&[dim])),
            w_k: lin(ps, format!("{prefix}.w_k"), dim, dim, rng),
            b_k: ps.add(format!("{prefix}.b_k"), Tensor::zeros(&[dim])),
            w_v: lin(ps, format!("{prefix}.w_v"), dim, dim, rng),
            b_v: ps.add(format!("{prefix}.b_v"), Tensor::zeros(&[dim])),
            w_o: lin(ps, format!("{prefix}.w_o"), dim, dim, rng),
            b_o: ps.add(format!("{prefix}.b_o"), Tensor::zeros(&[dim])),
            ln2_gamma: ps.add(format!("{prefix}.ln2.gamma"), Tensor::ones(&[dim])),
            ln2_beta: ps.add(format!("{prefix}.ln2.beta"), Tensor::zeros(&[dim])),
            w_ff1: lin(ps, format!("{prefix}.w_ff1"), dim, ff_dim, rng),
            b_ff1: ps.add(format!("{prefix}.b_ff1"), Tensor::zeros(&[ff_dim])),
            w_ff2: lin(ps, format!("{prefix}.w_ff2"), ff_dim, dim, rng),
            b_ff2: ps.add(format!("{prefix}.b_ff2"), Tensor::zeros(&[dim])),
            dim,
            n_heads,
        }
    }

    fn norm(
        &self,
        tape: &mut Tape,
        pv: &[Var],
        x: Var,
        gamma: PId,
        beta: PId,
    ) -> NumResult<Var> {
        let n = tape.layer_norm(x);
        let n = tape.row_mul(n, pv[gamma.index()])?;
        tape.add_bias(n, pv[beta.index()])
    }

    /// (L x dim) -> (L x dim) over the token axis.
    pub fn forward(
        &self,
        tape: &mut Tape,
        pv: &[Var],
        x: Var,
        ctx: &mut FwdCtx,
    ) -> NumResult<Var> {
        let h = self.norm(tape, pv, x, self.ln1_gamma, self.ln1_beta)?;
        let q = tape.linear(h, pv[self.w_q.index()], pv[self.b_q.index()])?;
        let k = tape.linear(h, pv[self.w_k.index()], pv[self.b_k.index()])?;
        let v = tape.linear(h, pv[self.w_v.index()], pv[self.b_v.index()])?;
        let dk = self.dim / self.n_heads;
        let mut heads = Vec::with_capacity(self.n_heads);
        for hd in 0..self.n_heads {
            let qh = tape.slice(q, 1, hd * dk, dk)?;
            let kh = tape.slice(k, 1, hd * dk, dk)?;
            let vh = tape.slice(v, 1, hd * dk, dk)?;
            let kht = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kht)?;
            let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
            let attn = tape.softmax(scores);
            heads.push(tape.matmul(attn, vh)?);
        }
        let concat = tape.concat(1, &heads)?;
        let out = tape.linear(concat, pv[self.w_o.index()], pv[self.b_o.index()])?;
        let out = ctx.apply_dropout(tape, out);
        let x = tape.add(x, out)?;

        let h2 = self.norm(tape, pv, x, self.ln2_gamma, self.ln2_beta)?;
        let ff = tape.linear(h2, pv[self.w_ff1.index()], pv[self.b_ff1.index()])?;
        let ff = tape.relu(ff);
        let ff = tape.linear(ff, pv[self.w_ff2.index()], pv[self.b_ff2.index()])?;
        let ff = ctx.apply_dropout(tape, ff);
        tape.add(x, ff)
    }
}

/// Standard sinusoidal position table, (len x dim).
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for t in 0..len {
        for j in 0..dim {
            let rate = 10000f64.powf(-((j / 2 * 2) as f64) / dim as f64);
            let angle = t as f64 * rate;
            data[t * dim + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, dim], data)
}

#[derive(Debug, Clone)]
enum SeqStack {
    /// Bidirectional layers: each is a (forward, backward) block pair.
    BiMamba(Vec<(MambaBlock, MambaBlock)>),
    /// Unidirectional causal layers.
    Mamba(Vec<MambaBlock>),
    /// Transformer encoder; `positions` enables sinusoidal encodings.
    Transformer {
        layers: Vec<TransformerLayer>,
        positions: bool,
    },
}

impl SeqStack {
    fn forward(&self, tape: &mut Tape, pv: &[Var], x: Var, ctx: &mut FwdCtx) -> NumResult<Var> {
        match self {
            SeqStack::BiMamba(layers) => {
                let mut cur = x;
                for (fwd, bwd) in layers {
                    cur = bidirectional_scan(tape, pv, fwd, bwd, cur)?;
                }
                Ok(cur)
            }
            SeqStack::Mamba(layers) => {
                let mut cur = x;
                for block in layers {
                    cur = block.forward(tape, pv, cur)?;
                }
                Ok(cur)
            }
            SeqStack::Transformer { layers, positions } => {
                let mut cur = x;
                if *positions {
                    let shape = tape.value(x).shape.clone();
                    let pe = tape.constant(sinusoidal_positions(shape[0], shape[1]));
                    cur = tape.add(cur, pe)?;
                }
                for layer in layers {
                    cur = layer.forward(tape, pv, cur, ctx)?;
                }
                Ok(cur)
            }
        }
    }
}

/// All learnable components of the forecaster plus the ablation switches.
pub struct SpoTModel {
    pub cfg: ModelConfig,
    pub n_nodes: usize,
    pub params: ParamSet,
    node_table: PId,
    walk_stacks: Vec<SeqStack>,
    pointwise_w: Vec<PId>,
    pointwise_b: Vec<PId>,
    fusion_w1: PId,
    fusion_b1: PId,
    fusion_w2: PId,
    fusion_b2: PId,
    input_w: PId,
    input_b: PId,
    tod_table: PId,
    dow_table: PId,
    temporal_stack: SeqStack,
    spatial_layers: Vec<TransformerLayer>,
    head_w1: PId,
    head_b1: PId,
    head_w2: PId,
    head_b2: PId,
}

impl SpoTModel {
    pub fn new(cfg: ModelConfig, n_nodes: usize, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let d = cfg.d;
        let zw = cfg.z_width();

        let node_table = ps.add("node_table", uniform_init(&[n_nodes, d], d, &mut rng));

        let mut walk_stacks = Vec::with_capacity(3);
        let mut pointwise_w = Vec::with_capacity(3);
        let mut pointwise_b = Vec::with_capacity(3);
        for wt in WalkType::ALL {
            let label = wt.label();
            let stack = match cfg.walk_scan_kind {
                ScanKind::Mamba => SeqStack::BiMamba(
                    (0..cfg.n_layers)
                        .map(|l| {
                            (
                                MambaBlock::new(
                                    &mut ps,
                                    &format!("walk.{label}.{l}.fwd"),
                                    d,
                                    cfg.d_state,
                                    cfg.conv_width,
                                    &mut rng,
                                ),
                                MambaBlock::new(
                                    &mut ps,
                                    &format!("walk.{label}.{l}.bwd"),
                                    d,
                                    cfg.d_state,
                                    cfg.conv_width,
                                    &mut rng,
                                ),
                            )
                        })
                        .collect(),
                ),
                ScanKind::Transformer => SeqStack::Transformer {
                    layers: (0..cfg.n_layers)
                        .map(|l| {
                            TransformerLayer::new(
                                &mut ps,
                                &format!("walk.{label}.{l}.tf"),
                                d,
                                cfg.ff_dim,
                                cfg.n_heads,
                                &mut rng,
                            )
                        })
                        .collect(),
                    // no position signal on walk sequences
                    positions: false,
                },
            };
            walk_stacks.push(stack);
            pointwise_w.push(ps.add(
                format!("pointwise.{label}.w"),
                uniform_init(&[1, cfg.m], cfg.m, &mut rng),
            ));
            pointwise_b.push(ps.add(format!("pointwise.{label}.b"), Tensor::zeros(&[1, 1])));
        }

        let fusion_w1 = ps.add("fusion.w1", uniform_init(&[3 * d, d], 3 * d, &mut rng));
        let fusion_b1 = ps.add("fusion.b1", Tensor::zeros(&[d]));
        let fusion_w2 = ps.add("fusion.w2", uniform_init(&[d, d], d, &mut rng));
        let fusion_b2 = ps.add("fusion.b2", Tensor::zeros(&[d]));

        let input_w = ps.add("input_proj.w", uniform_init(&[cfg.d_in, d], cfg.d_in, &mut rng));
        let input_b = ps.add("input_proj.b", Tensor::zeros(&[d]));
        let tod_table = ps.add(
            "tod_table",
            uniform_init(&[cfg.steps_per_day, d], d, &mut rng),
        );
        let dow_table = ps.add("dow_table", uniform_init(&[7, d], d, &mut rng));

        let temporal_stack = match cfg.temporal_scan_kind {
            ScanKind::Mamba => SeqStack::Mamba(
                (0..cfg.n_layers)
                    .map(|l| {
                        MambaBlock::new(
                            &mut ps,
                            &format!("temporal.{l}"),
                            zw,
                            cfg.d_state,
                            cfg.conv_width,
                            &mut rng,
                        )
                    })
                    .collect(),
            ),
            ScanKind::Transformer => SeqStack::Transformer {
                layers: (0..cfg.n_layers)
                    .map(|l| {
                        TransformerLayer::new(
                            &mut ps,
                            &format!("temporal.{l}.tf"),
                            zw,
                            cfg.ff_dim,
                            cfg.n_heads,
                            &mut rng,
                        )
                    })
                    .collect(),
                positions: true,
            },
        };

        let spatial_layers = (0..cfg.n_layers)
            .map(|l| {
                TransformerLayer::new(
                    &mut ps,
                    &format!("spatial.{l}"),
                    zw,
                    cfg.ff_dim,
                    cfg.n_heads,
                    &mut rng,
                )
            })
            .collect();

        let head_in = cfg.t_in * zw;
        let head_out = cfg.t_out * cfg.d_out;
        let head_w1 = ps.add("head.w1", uniform_init(&[head_in, cfg.ff_dim], head_in, &mut rng));
        let head_b1 = ps.add("head.b1", Tensor::zeros(&[cfg.ff_dim]));
        let head_w2 = ps.add(
            "head.w2",
            uniform_init(&[cfg.ff_dim, head_out], cfg.ff_dim, &mut rng),
        );
        let head_b2 = ps.add("head.b2", Tensor::zeros(&[head_out]));

        Ok(SpoTModel {
            cfg,
            n_nodes,
            params: ps,
            node_table,
            walk_stacks,
            pointwise_w,
            pointwise_b,
            fusion_w1,
            fusion_b1,
            fusion_w2,
            fusion_b2,
            input_w,
            input_b,
            tod_table,
            dow_table,
            temporal_stack,
            spatial_layers,
            head_w1,
            head_b1,
            head_w2,
            head_b2,
        })
    }

    /// Walk-sequence embedding: scan each sequence, mean-pool over K,
    /// combine the M repetitions with a pointwise convolution, fuse the
    /// three walk types with an MLP. Output (N x D).
    pub fn embed_walks(
        &self,
        tape: &mut Tape,
        pv: &[Var],
        walkset: &WalkSet,
        ctx: &mut FwdCtx,
    ) -> Result<Var, ModelError> {
        if walkset.n_nodes != self.n_nodes {
            return Err(ModelError::WalksetMismatch {
                walkset: walkset.n_nodes,
                model: self.n_nodes,
            });
        }
        let d = self.cfg.d;
        let table = pv[self.node_table.index()];
        let mut node_rows = Vec::with_capacity(self.n_nodes);
        for node in 0..self.n_nodes {
            let mut type_vecs = Vec::with_capacity(3);
            for wt in WalkType::ALL {
                let ti = wt.index();
                let mut pooled = Vec::with_capacity(walkset.m);
                for m in 0..walkset.m {
                    let seq = walkset.sequence(wt, m, node);
                    let embedded = tape.gather(table, seq)?;
                    let scanned = self.walk_stacks[ti].forward(tape, pv, embedded, ctx)?;
                    let mean = tape.reduce_mean(scanned, Some(0))?;
                    pooled.push(tape.reshape(mean, &[1, d])?);
                }
                let stacked = tape.concat(0, &pooled)?; // (M x D)
                let mixed = tape.matmul(pv[self.pointwise_w[ti].index()], stacked)?; // (1 x D)
                // scalar conv bias, broadcast across the embedding dims
                let ones = tape.constant(Tensor::ones(&[1, d]));
                let bias_row = tape.matmul(pv[self.pointwise_b[ti].index()], ones)?;
                let bias_row = tape.reshape(bias_row, &[1, d])?;
                type_vecs.push(tape.add(mixed, bias_row)?);
            }
            let cat = tape.concat(1, &type_vecs)?; // (1 x 3D)
            let h = tape.linear(cat, pv[self.fusion_w1.index()], pv[self.fusion_b1.index()])?;
            let h = tape.relu(h);
            let w_i = tape.linear(h, pv[self.fusion_w2.index()], pv[self.fusion_b2.index()])?;
            node_rows.push(w_i);
        }
        Ok(tape.concat(0, &node_rows)?)
    }

    /// Per node: rows concat(inputProj(x_t), w_i, tod[t], dow[t]), giving
    /// a (T x 4D) sequence for each of the N nodes.
    pub fn assemble_features(
        &self,
        tape: &mut Tape,
        pv: &[Var],
        inputs: &Tensor,
        tod_idx: &[usize],
        dow_idx: &[usize],
        node_embeddings: Var,
    ) -> Result<Vec<Var>, ModelError> {
        let (t_in, n, d_in) = (inputs.shape[0], inputs.shape[1], inputs.shape[2]);
        assert_eq!(n, self.n_nodes);
        assert_eq!(d_in, self.cfg.d_in);
        assert_eq!(tod_idx.len(), t_in);
        assert_eq!(dow_idx.len(), t_in);
        let tod_rows = tape.gather(pv[self.tod_table.index()], tod_idx)?;
        let dow_rows = tape.gather(pv[self.dow_table.index()], dow_idx)?;
        let ones_t = tape.constant(Tensor::ones(&[t_in, 1]));
        let mut per_node = Vec::with_capacity(n);
        for i in 0..n {
            let mut x_node = Vec::with_capacity(t_in * d_in);
            for t in 0..t_in {
                for ch in 0..d_in {
                    x_node.push(inputs.data[(t * n + i) * d_in + ch]);
                }
            }
            let x = tape.constant(Tensor::new(vec![t_in, d_in], x_node));
            let xp = tape.linear(x, pv[self.input_w.index()], pv[self.input_b.index()])?;
            let w_i = tape.slice(node_embeddings, 0, i, 1)?;
            let w_rep = tape.matmul(ones_t, w_i)?;
            per_node.push(tape.concat(1, &[xp, w_rep, tod_rows, dow_rows])?);
        }
        Ok(per_node)
    }

    /// Scan each node's (T x 4D) sequence along time, independently per
    /// node; causal in the Mamba arm.
    pub fn temporal_scan(
        &self,
        tape: &mut Tape,
        pv: &[Var],
        per_node: &[Var],
        ctx: &mut FwdCtx,
    ) -> Result<Vec<Var>, ModelError> {
        per_node
            .iter()
            .map(|&x| Ok(self.temporal_stack.forward(tape, pv, x, ctx)?))
            .collect()
    }

    /// Per time step, mix the N node tokens with transformer layers.
    /// Input/output: per-node (T x 4D) sequences.
    pub fn spatial_mix(
        &self,
        tape: &mut Tape,
        pv: &[Var],
        per_node: &[Var],
        ctx: &mut FwdCtx,
    ) -> Result<Vec<Var>, ModelError> {
        let t_in = self.cfg.t_in;
        let mut per_step = Vec::with_capacity(t_in);
        for t in 0..t_in {
            let rows: Vec<Var> = per_node
                .iter()
                .map(|&z| tape.slice(z, 0, t, 1))
                .collect::<NumResult<_>>()?;
            let mut z_t = tape.concat(0, &rows)?; // (N x 4D)
            for layer in &self.spatial_layers {
                z_t = layer.forward(tape, pv, z_t, ctx)?;
            }
            per_step.push(z_t);
        }
        // back to per-node layout
        let mut out = Vec::with_capacity(self.n_nodes);
        for i in 0..self.n_nodes {
            let rows: Vec<Var> = per_step
                .iter()
                .map(|&z| tape.slice(z, 0, i, 1))
                .collect::<NumResult<_>>()?;
            out.push(tape.concat(0, &rows)?);
        }
        Ok(out)
    }

    /// Flatten each node's (T x 4D) block and apply the forecast MLP.
    /// Output (N x T_out*D_out).
    pub fn head(&self, tape: &mut Tape, pv: &[Var], per_node: &[Var]) -> Result<Var, ModelError> {
        let flat_dim = self.cfg.t_in * self.cfg.z_width();
        let rows: Vec<Var> = per_node
            .iter()
            .map(|&z| tape.reshape(z, &[1, flat_dim]))
            .collect::<NumResult<_>>()?;
        let stacked = tape.concat(0, &rows)?;
        let h = tape.linear(stacked, pv[self.head_w1.index()], pv[self.head_b1.index()])?;
        let h = tape.relu(h);
        Ok(tape.linear(h, pv[self.head_w2.index()], pv[self.head_b2.index()])?)
    }

    /// Full forward from a precomputed walk embedding. Output layout
    /// (N x T_out*D_out); use `prediction_tensor` for (T_out, N, D_out).
    #[allow(clippy::too_many_arguments)]
    pub fn forecast_from_embeddings(
        &self,
        tape: &mut Tape,
        pv: &[Var],
        node_embeddings: Var,
        inputs: &Tensor,
        tod_idx: &[usize],
        dow_idx: &[usize],
        ctx: &mut FwdCtx,
    ) -> Result<Var, ModelError> {
        let feats = self.assemble_features(tape, pv, inputs, tod_idx, dow_idx, node_embeddings)?;
        let scanned = self.temporal_scan(tape, pv, &feats, ctx)?;
        let mixed = self.spatial_mix(tape, pv, &scanned, ctx)?;
        self.head(tape, pv, &mixed)
    }

    /// Composition embed_walks -> assemble -> temporal scan -> spatial mix
    /// -> head.
    #[allow(clippy::too_many_arguments)]
    pub fn forecast(
        &self,
        tape: &mut Tape,
        pv: &[Var],
        walkset: &WalkSet,
        inputs: &Tensor,
        tod_idx: &[usize],
        dow_idx: &[usize],
        ctx: &mut FwdCtx,
    ) -> Result<Var, ModelError> {
        let w = self.embed_walks(tape, pv, walkset, ctx)?;
        self.forecast_from_embeddings(tape, pv, w, inputs, tod_idx, dow_idx, ctx)
    }

    /// Reorder a head output (N x T_out*D_out) into (T_out, N, D_out).
    pub fn prediction_tensor(&self, head_out: &Tensor) -> Tensor {
        let (n, t_out, d_out) = (self.n_nodes, self.cfg.t_out, self.cfg.d_out);
        let mut data = vec![0.0; t_out * n * d_out];
        for i in 0..n {
            for t in 0..t_out {
                for ch in 0..d_out {
                    data[(t * n + i) * d_out + ch] =
                        head_out.data[i * t_out * d_out + t * d_out + ch];
                }
            }
        }
        Tensor::new(vec![t_out, n, d_out], data)
    }

    /// Rearrange a (T_out, N, D_out) target into the head layout for loss
    /// computation.
    pub fn target_matrix(&self, target: &Tensor) -> Tensor {
        let (t_out, n, d_out) = (target.shape[0], target.shape[1], target.shape[2]);
        let mut data = vec![0.0; n * t_out * d_out];
        for t in 0..t_out {
            for i in 0..n {
                for ch in 0..d_out {
                    data[i * t_out * d_out + t * d_out + ch] =
                        target.data[(t * n + i) * d_out + ch];
                }
            }
        }
        Tensor::new(vec![n, t_out * d_out], data)
    }

    /// Convenience evaluation forward: fresh tape, dropout off.
    pub fn predict(
        &self,
        walkset: &WalkSet,
        inputs: &Tensor,
        tod_idx: &[usize],
        dow_idx: &[usize],
    ) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let pv = self.params.leaves(&mut tape);
        let mut ctx = FwdCtx::eval();
        let out = self.forecast(&mut tape, &pv, walkset, inputs, tod_idx, dow_idx, &mut ctx)?;
        Ok(self.prediction_tensor(tape.value(out)))
    }

    pub fn node_table_id(&self) -> PId {
        self.node_table
    }
}

pub mod checkpoint {
    //! Checkpoint = a directory of named tensors in the flat binary format
    //! plus a JSON manifest with shapes and the model config.

    use std::path::Path;

    use serde::{Deserialize, Serialize};

    use super::{ModelConfig, ModelError, SpoTModel};
    use crate::numerics::{load_tensor, save_tensor};

    #[derive(Debug, Serialize, Deserialize)]
    pub struct CheckpointManifest {
        pub config: ModelConfig,
        pub n_nodes: usize,
        pub tensors: Vec<TensorEntry>,
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct TensorEntry {
        pub name: String,
        pub shape: Vec<usize>,
        pub file: String,
    }

    fn file_name(idx: usize) -> String {
        format!("tensor_{idx:04}.bin")
    }

    pub fn save(model: &SpoTModel, dir: &Path) -> Result<(), ModelError> {
        std::fs::create_dir_all(dir).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut tensors = Vec::new();
        for (idx, (name, tensor)) in model.params.iter().enumerate() {
            let file = file_name(idx);
            save_tensor(&dir.join(&file), tensor)?;
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: tensor.shape.clone(),
                file,
            });
        }
        let manifest = CheckpointManifest {
            config: model.cfg.clone(),
            n_nodes: model.n_nodes,
            tensors,
        };
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest).unwrap(),
        )
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<SpoTModel, ModelError> {
        let manifest_path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| {
            ModelError::Checkpoint(format!("{}: {e}", manifest_path.display()))
        })?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)
            .map_err(|e| ModelError::Checkpoint(format!("manifest: {e}")))?;
        let mut model = SpoTModel::new(manifest.config, manifest.n_nodes, 0)?;
        for entry in &manifest.tensors {
            let tensor = load_tensor(&dir.join(&entry.file))?;
            if tensor.shape != entry.shape {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {} has shape {:?}, manifest says {:?}",
                    entry.name, tensor.shape, entry.shape
                )));
            }
            let mut found = false;
            for (name, value) in model.params.iter_mut() {
                if name == entry.name {
                    if value.shape != tensor.shape {
                        return Err(ModelError::Checkpoint(format!(
                            "tensor {} shape {:?} does not fit model shape {:?}",
                            entry.name, tensor.shape, value.shape
                        )));
                    }
                    *value = tensor.clone();
                    found = true;
                    break;
                }
            }
            if !found {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {} not present in rebuilt model",
                    entry.name
                )));
            }
        }
        Ok(model)
    }
}
