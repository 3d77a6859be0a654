//! Miniature ViT encoder and lightweight decoder for masked-patch
//! reconstruction. The main per-layer weight matrices are supplied as tape
//! nodes (materialized from the template reconstruction during training, or
//! bound directly for a standalone model); everything else lives in
//! `DirectParams`.
//!
//! Blocks are pre-norm: norm -> attention -> residual, norm -> MLP ->
//! residual, with a final norm after the last block. The gated-MLP,
//! RMS-norm, and rotary-position options are independent config flags.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Result, SweetError};
use crate::params::ParamSet;
use crate::template::{LayerWeights, LayoutDescriptor};
use crate::tensor::{DenseMatrix, DenseTensor};

pub const NORM_EPS: f64 = 1e-6;
pub const ROPE_BASE: f64 = 10_000.0;
/// Head size used by the parameter/FLOP cross-check tables.
pub const CLASSIFIER_CLASSES: usize = 1000;

/// Architecture descriptor. `embed_dim` is always `heads * head_dim` and
/// the MLP hidden width is pinned to `4 * embed_dim` so the unified weight
/// layout tiles exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViTConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub embed_dim: usize,
    pub mlp_dim: usize,
    pub patch: usize,
    pub image: usize,
    pub channels: usize,
    pub swiglu: bool,
    pub rmsnorm: bool,
    pub rope: bool,
    pub dec_depth: usize,
    pub dec_dim: usize,
    pub dec_heads: usize,
}

impl ViTConfig {
    pub fn new(
        layers: usize,
        heads: usize,
        head_dim: usize,
        patch: usize,
        image: usize,
        channels: usize,
    ) -> Result<Self> {
        if heads == 0 || head_dim == 0 {
            return Err(SweetError::Argument(
                "heads and head_dim must be >= 1".into(),
            ));
        }
        if patch == 0 || image == 0 || image % patch != 0 {
            return Err(SweetError::Argument(format!(
                "patch {patch} must divide image {image}"
            )));
        }
        if channels == 0 {
            return Err(SweetError::Argument("channels must be >= 1".into()));
        }
        let embed_dim = heads * head_dim;
        let dec_dim = (embed_dim / 2).max(2);
        let mut dec_heads = (heads / 2).max(1);
        while dec_dim % dec_heads != 0 {
            dec_heads -= 1;
        }
        Ok(ViTConfig {
            layers,
            heads,
            head_dim,
            embed_dim,
            mlp_dim: 4 * embed_dim,
            patch,
            image,
            channels,
            swiglu: false,
            rmsnorm: false,
            rope: false,
            dec_depth: 1,
            dec_dim,
            dec_heads,
        })
    }

    pub fn with_flags(mut self, swiglu: bool, rmsnorm: bool, rope: bool) -> Self {
        self.swiglu = swiglu;
        self.rmsnorm = rmsnorm;
        self.rope = rope;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim != self.heads * self.head_dim {
            return Err(SweetError::Argument(format!(
                "embed_dim {} != heads {} * head_dim {}",
                self.embed_dim, self.heads, self.head_dim
            )));
        }
        if self.mlp_dim != 4 * self.embed_dim {
            return Err(SweetError::Argument(format!(
                "mlp_dim {} must equal 4 * embed_dim {}",
                self.mlp_dim, self.embed_dim
            )));
        }
        if self.image % self.patch != 0 {
            return Err(SweetError::Argument(format!(
                "patch {} must divide image {}",
                self.patch, self.image
            )));
        }
        if self.dec_dim == 0 || self.dec_heads == 0 || self.dec_dim % self.dec_heads != 0 {
            return Err(SweetError::Argument(format!(
                "decoder dim {} must be a positive multiple of decoder heads {}",
                self.dec_dim, self.dec_heads
            )));
        }
        if self.rope && (self.head_dim % 2 != 0 || (self.dec_dim / self.dec_heads) % 2 != 0) {
            return Err(SweetError::Argument(
                "rotary positions require even head dims".into(),
            ));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        let g = self.image / self.patch;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn layout(&self) -> Result<LayoutDescriptor> {
        LayoutDescriptor::new(self.layers, self.embed_dim, self.swiglu)
    }
}

/// Everything trained outside the factorization: patch embedding,
/// positional tables, biases, norm gains, the decoder, and the mask token.
///
/// Tensor naming scheme (also the checkpoint directory order):
///   patch_w, patch_b, enc_pos?,
///   enc{l}/{bq,bk,bv,bo,b1?,b2,n1g,n1b?,n2g,n2b?},
///   encf_g, encf_b?,
///   dec_embed_w, dec_embed_b, mask_token, dec_pos?,
///   dec{l}/{wq,wk,wv,wo,win,wout,bq,bk,bv,bo,b1,b2,n1g,n1b?,n2g,n2b?},
///   decf_g, decf_b?, head_w, head_b
#[derive(Debug, Clone, PartialEq)]
pub struct DirectParams {
    pub set: ParamSet,
}

impl DirectParams {
    pub fn init(cfg: &ViTConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).map_err(|e| SweetError::Argument(e.to_string()))?;
        let mut set = ParamSet::new();
        let d = cfg.embed_dim;
        let dd = cfg.dec_dim;
        let n = cfg.n_patches();
        let pd = cfg.patch_dim();

        let mut rand_t = |shape: Vec<usize>| -> DenseTensor {
            let len: usize = shape.iter().product();
            DenseTensor::new(shape, (0..len).map(|_| normal.sample(&mut rng)).collect()).unwrap()
        };
        let zeros = |shape: Vec<usize>| DenseTensor::zeros(shape).unwrap();
        let ones = |len: usize| DenseTensor::new(vec![len], vec![1.0; len]).unwrap();

        set.insert("patch_w", rand_t(vec![pd, d]))?;
        set.insert("patch_b", zeros(vec![d]))?;
        if !cfg.rope {
            set.insert("enc_pos", rand_t(vec![n, d]))?;
        }
        for l in 0..cfg.layers {
            for b in ["bq", "bk", "bv", "bo"] {
                set.insert(&format!("enc{l}/{b}"), zeros(vec![d]))?;
            }
            if !cfg.swiglu {
                set.insert(&format!("enc{l}/b1"), zeros(vec![cfg.mlp_dim]))?;
            }
            set.insert(&format!("enc{l}/b2"), zeros(vec![d]))?;
            set.insert(&format!("enc{l}/n1g"), ones(d))?;
            if !cfg.rmsnorm {
                set.insert(&format!("enc{l}/n1b"), zeros(vec![d]))?;
            }
            set.insert(&format!("enc{l}/n2g"), ones(d))?;
            if !cfg.rmsnorm {
                set.insert(&format!("enc{l}/n2b"), zeros(vec![d]))?;
            }
        }
        set.insert("encf_g", ones(d))?;
        if !cfg.rmsnorm {
            set.insert("encf_b", zeros(vec![d]))?;
        }

        set.insert("dec_embed_w", rand_t(vec![d, dd]))?;
        set.insert("dec_embed_b", zeros(vec![dd]))?;
        set.insert("mask_token", rand_t(vec![dd]))?;
        if !cfg.rope {
            set.insert("dec_pos", rand_t(vec![n, dd]))?;
        }
        for l in 0..cfg.dec_depth {
            set.insert(&format!("dec{l}/wq"), rand_t(vec![dd, dd]))?;
            set.insert(&format!("dec{l}/wk"), rand_t(vec![dd, dd]))?;
            set.insert(&format!("dec{l}/wv"), rand_t(vec![dd, dd]))?;
            set.insert(&format!("dec{l}/wo"), rand_t(vec![dd, dd]))?;
            set.insert(&format!("dec{l}/win"), rand_t(vec![dd, 4 * dd]))?;
            set.insert(&format!("dec{l}/wout"), rand_t(vec![4 * dd, dd]))?;
            for b in ["bq", "bk", "bv", "bo"] {
                set.insert(&format!("dec{l}/{b}"), zeros(vec![dd]))?;
            }
            set.insert(&format!("dec{l}/b1"), zeros(vec![4 * dd]))?;
            set.insert(&format!("dec{l}/b2"), zeros(vec![dd]))?;
            set.insert(&format!("dec{l}/n1g"), ones(dd))?;
            if !cfg.rmsnorm {
                set.insert(&format!("dec{l}/n1b"), zeros(vec![dd]))?;
            }
            set.insert(&format!("dec{l}/n2g"), ones(dd))?;
            if !cfg.rmsnorm {
                set.insert(&format!("dec{l}/n2b"), zeros(vec![dd]))?;
            }
        }
        set.insert("decf_g", ones(dd))?;
        if !cfg.rmsnorm {
            set.insert("decf_b", zeros(vec![dd]))?;
        }
        set.insert("head_w", rand_t(vec![dd, pd]))?;
        set.insert("head_b", zeros(vec![pd]))?;

        Ok(DirectParams { set })
    }
}

/// A fully materialized model: per-layer matrices plus direct parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ViTConfig,
    pub theta: Vec<LayerWeights>,
    pub direct: DirectParams,
}

impl ModelParams {
    pub fn total_scalars(&self) -> usize {
        let theta: usize = self
            .theta
            .iter()
            .map(|lw| {
                lw.wq.data().len()
                    + lw.wk.data().len()
                    + lw.wv.data().len()
                    + lw.wo.data().len()
                    + lw.win.data().len()
                    + lw.wout.data().len()
                    + lw.wgate.as_ref().map_or(0, |g| g.data().len())
            })
            .sum();
        theta + self.direct.set.scalar_count()
    }
}

/// Tape node ids for one layer's factorized matrices.
#[derive(Debug, Clone)]
pub struct LayerWeightNodes {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
    pub win: NodeId,
    pub wout: NodeId,
    pub wgate: Option<NodeId>,
}

/// Assembles per-layer weight-matrix nodes out of a unified-tensor node by
/// slicing mode 1 and concatenating the Win/Wgate column blocks and Wout
/// row blocks.
pub fn weight_nodes_from_unified(
    tape: &mut Tape,
    w: NodeId,
    layout: &LayoutDescriptor,
) -> Result<Vec<LayerWeightNodes>> {
    use crate::template::SliceRole;
    let mut out = Vec::with_capacity(layout.layers);
    for l in 0..layout.layers {
        let find = |role: SliceRole| -> usize {
            layout
                .slice_table
                .iter()
                .position(|&(ll, r)| ll == l && r == role)
                .expect("slice role present")
        };
        let wq = tape.slice_mode1(w, find(SliceRole::Wq))?;
        let wk = tape.slice_mode1(w, find(SliceRole::Wk))?;
        let wv = tape.slice_mode1(w, find(SliceRole::Wv))?;
        let wo = tape.slice_mode1(w, find(SliceRole::Wo))?;
        let win_parts: Vec<NodeId> = (0..4)
            .map(|j| tape.slice_mode1(w, find(SliceRole::Win(j))))
            .collect::<Result<_>>()?;
        let win = tape.concat_cols(&win_parts)?;
        let wgate = if layout.gated_mlp {
            let parts: Vec<NodeId> = (0..4)
                .map(|j| tape.slice_mode1(w, find(SliceRole::Wgate(j))))
                .collect::<Result<_>>()?;
            Some(tape.concat_cols(&parts)?)
        } else {
            None
        };
        let wout_parts: Vec<NodeId> = (0..4)
            .map(|j| tape.slice_mode1(w, find(SliceRole::Wout(j))))
            .collect::<Result<_>>()?;
        let wout = tape.concat_rows(&wout_parts)?;
        out.push(LayerWeightNodes {
            wq,
            wk,
            wv,
            wo,
            win,
            wout,
            wgate,
        });
    }
    Ok(out)
}

/// Binds materialized per-layer matrices as nodes (params when `trainable`).
pub fn weight_nodes_from_theta(
    tape: &mut Tape,
    theta: &[LayerWeights],
    trainable: bool,
) -> Vec<LayerWeightNodes> {
    let mut bind = |name: String, m: &DenseMatrix| -> NodeId {
        if trainable {
            tape.param_matrix(&name, m)
        } else {
            tape.constant_matrix(m)
        }
    };
    theta
        .iter()
        .enumerate()
        .map(|(l, lw)| LayerWeightNodes {
            wq: bind(format!("theta/l{l}/wq"), &lw.wq),
            wk: bind(format!("theta/l{l}/wk"), &lw.wk),
            wv: bind(format!("theta/l{l}/wv"), &lw.wv),
            wo: bind(format!("theta/l{l}/wo"), &lw.wo),
            win: bind(format!("theta/l{l}/win"), &lw.win),
            wout: bind(format!("theta/l{l}/wout"), &lw.wout),
            wgate: lw
                .wgate
                .as_ref()
                .map(|g| bind(format!("theta/l{l}/wgate"), g)),
        })
        .collect()
}

/// Node ids for direct params bound onto a tape.
pub type DirectNodes = BTreeMap<String, NodeId>;

pub fn bind_direct(tape: &mut Tape, direct: &DirectParams, trainable: bool) -> DirectNodes {
    let mut out = DirectNodes::new();
    for (name, value) in direct.set.iter() {
        let id = if trainable {
            tape.param(&format!("direct/{name}"), value.clone())
        } else {
            tape.constant(value.clone())
        };
        out.insert(name.to_string(), id);
    }
    out
}

fn node(nodes: &DirectNodes, name: &str) -> Result<NodeId> {
    nodes
        .get(name)
        .copied()
        .ok_or_else(|| SweetError::Contract(format!("missing direct param node {name}")))
}

fn norm(
    tape: &mut Tape,
    x: NodeId,
    nodes: &DirectNodes,
    gain: &str,
    bias: &str,
    rmsnorm: bool,
) -> Result<NodeId> {
    if rmsnorm {
        tape.rms_norm(x, node(nodes, gain)?, NORM_EPS)
    } else {
        tape.layer_norm(x, node(nodes, gain)?, node(nodes, bias)?, NORM_EPS)
    }
}

/// Per-layer attention internals kept for inspection.
#[derive(Debug, Clone)]
pub struct MsaCache {
    pub q: Vec<NodeId>,
    pub k: Vec<NodeId>,
    pub v: Vec<NodeId>,
    pub attn: Vec<NodeId>,
    pub out: NodeId,
}

/// Multi-head self-attention over `tokens` (rows = sequence positions).
/// Rotary phases are applied to Q and K per head when `positions` is given.
#[allow(clippy::too_many_arguments)]
pub fn msa_forward(
    tape: &mut Tape,
    tokens: NodeId,
    lw: &LayerWeightNodes,
    biases: (NodeId, NodeId, NodeId, NodeId),
    heads: usize,
    head_dim: usize,
    positions: Option<&[usize]>,
) -> Result<MsaCache> {
    let d = heads * head_dim;
    let width = tape.value(tokens).shape()[1];
    if width != d {
        return Err(SweetError::Shape {
            op: "msa_forward",
            expected: format!("token width {d}"),
            got: format!("{width}"),
        });
    }
    let (bq, bk, bv, bo) = biases;
    let qm = tape.matmul(tokens, lw.wq)?;
    let q_full = tape.add_bias(qm, bq)?;
    let km = tape.matmul(tokens, lw.wk)?;
    let k_full = tape.add_bias(km, bk)?;
    let vm = tape.matmul(tokens, lw.wv)?;
    let v_full = tape.add_bias(vm, bv)?;

    let mut cache = MsaCache {
        q: Vec::with_capacity(heads),
        k: Vec::with_capacity(heads),
        v: Vec::with_capacity(heads),
        attn: Vec::with_capacity(heads),
        out: 0,
    };
    let mut head_outs = Vec::with_capacity(heads);
    let scale = 1.0 / (head_dim as f64).sqrt();
    for h in 0..heads {
        let lo = h * head_dim;
        let hi = lo + head_dim;
        let mut q = tape.slice_cols(q_full, lo, hi)?;
        let mut k = tape.slice_cols(k_full, lo, hi)?;
        if let Some(pos) = positions {
            q = tape.rope(q, pos, ROPE_BASE)?;
            k = tape.rope(k, pos, ROPE_BASE)?;
        }
        let v = tape.slice_cols(v_full, lo, hi)?;
        let kt = tape.transpose(k)?;
        let scores_raw = tape.matmul(q, kt)?;
        let scores = tape.scale(scores_raw, scale);
        let attn = tape.softmax_rows(scores)?;
        let ho = tape.matmul(attn, v)?;
        cache.q.push(q);
        cache.k.push(k);
        cache.v.push(v);
        cache.attn.push(attn);
        head_outs.push(ho);
    }
    let concat = tape.concat_cols(&head_outs)?;
    let proj = tape.matmul(concat, lw.wo)?;
    cache.out = tape.add_bias(proj, bo)?;
    Ok(cache)
}

/// Two-projection MLP. Plain path: GELU(x Win + b1) Wout + b2. Gated path:
/// (SiLU(x Wgate) .* (x Win)) Wout + b2.
pub fn mlp_forward(
    tape: &mut Tape,
    tokens: NodeId,
    lw: &LayerWeightNodes,
    b1: Option<NodeId>,
    b2: NodeId,
    swiglu: bool,
) -> Result<NodeId> {
    let hidden = if swiglu {
        let gate_in = tape.matmul(
            tokens,
            lw.wgate
                .ok_or_else(|| SweetError::Contract("gated MLP requires Wgate".into()))?,
        )?;
        let gate = tape.silu(gate_in);
        let lin = tape.matmul(tokens, lw.win)?;
        tape.mul(gate, lin)?
    } else {
        let pre = tape.matmul(tokens, lw.win)?;
        let b1 = b1.ok_or_else(|| SweetError::Contract("plain MLP requires b1".into()))?;
        let biased = tape.add_bias(pre, b1)?;
        tape.gelu(biased)
    };
    let out = tape.matmul(hidden, lw.wout)?;
    tape.add_bias(out, b2)
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub layers: Vec<MsaCache>,
    pub tokens_in: NodeId,
    pub encoder_out: NodeId,
}

/// Embeds the visible patches and runs the pre-norm encoder stack.
/// `patches` is the full N x patch_dim constant for one image; only rows in
/// `visible` enter the encoder.
pub fn encoder_forward(
    tape: &mut Tape,
    cfg: &ViTConfig,
    weights: &[LayerWeightNodes],
    nodes: &DirectNodes,
    patches: NodeId,
    visible: &[usize],
) -> Result<ForwardCache> {
    if weights.len() != cfg.layers {
        return Err(SweetError::Contract(format!(
            "expected {} layer weight sets, got {}",
            cfg.layers,
            weights.len()
        )));
    }
    if visible.is_empty() {
        return Err(SweetError::Argument(
            "encoder requires at least one visible patch".into(),
        ));
    }
    let vis_patches = tape.gather_rows(patches, visible)?;
    let emb = tape.matmul(vis_patches, node(nodes, "patch_w")?)?;
    let emb = tape.add_bias(emb, node(nodes, "patch_b")?)?;
    let mut tokens = if cfg.rope {
        emb
    } else {
        let pos = tape.gather_rows(node(nodes, "enc_pos")?, visible)?;
        tape.add(emb, pos)?
    };
    let tokens_in = tokens;
    let positions: Option<Vec<usize>> = cfg.rope.then(|| visible.to_vec());

    let mut layers = Vec::with_capacity(cfg.layers);
    for (l, lw) in weights.iter().enumerate() {
        let x = norm(
            tape,
            tokens,
            nodes,
            &format!("enc{l}/n1g"),
            &format!("enc{l}/n1b"),
            cfg.rmsnorm,
        )?;
        let biases = (
            node(nodes, &format!("enc{l}/bq"))?,
            node(nodes, &format!("enc{l}/bk"))?,
            node(nodes, &format!("enc{l}/bv"))?,
            node(nodes, &format!("enc{l}/bo"))?,
        );
        let msa = msa_forward(
            tape,
            x,
            lw,
            biases,
            cfg.heads,
            cfg.head_dim,
            positions.as_deref(),
        )?;
        tokens = tape.add(tokens, msa.out)?;
        let x2 = norm(
            tape,
            tokens,
            nodes,
            &format!("enc{l}/n2g"),
            &format!("enc{l}/n2b"),
            cfg.rmsnorm,
        )?;
        let b1 = if cfg.swiglu {
            None
        } else {
            Some(node(nodes, &format!("enc{l}/b1"))?)
        };
        let mlp = mlp_forward(tape, x2, lw, b1, node(nodes, &format!("enc{l}/b2"))?, cfg.swiglu)?;
        tokens = tape.add(tokens, mlp)?;
        layers.push(msa);
    }
    let encoder_out = norm(tape, tokens, nodes, "encf_g", "encf_b", cfg.rmsnorm)?;
    Ok(ForwardCache {
        layers,
        tokens_in,
        encoder_out,
    })
}

/// Projects latents into the decoder width, inserts mask tokens at masked
/// positions, runs the shallow decoder stack, and maps every position to a
/// patch-pixel vector. `latents` is None when all positions are masked.
pub fn decoder_forward(
    tape: &mut Tape,
    cfg: &ViTConfig,
    nodes: &DirectNodes,
    latents: Option<NodeId>,
    visible: &[usize],
) -> Result<NodeId> {
    let n = cfg.n_patches();
    if let Some(&bad) = visible.iter().find(|&&i| i >= n) {
        return Err(SweetError::Argument(format!(
            "visible index {bad} out of range 0..{n}"
        )));
    }
    let projected = match latents {
        Some(l) => {
            let p = tape.matmul(l, node(nodes, "dec_embed_w")?)?;
            Some(tape.add_bias(p, node(nodes, "dec_embed_b")?)?)
        }
        None => None,
    };
    let seq = tape.assemble_tokens(projected, node(nodes, "mask_token")?, visible, n)?;
    let mut tokens = if cfg.rope {
        seq
    } else {
        tape.add(seq, node(nodes, "dec_pos")?)?
    };
    let positions: Option<Vec<usize>> = cfg.rope.then(|| (0..n).collect());
    let dec_head_dim = cfg.dec_dim / cfg.dec_heads;

    for l in 0..cfg.dec_depth {
        let lw = LayerWeightNodes {
            wq: node(nodes, &format!("dec{l}/wq"))?,
            wk: node(nodes, &format!("dec{l}/wk"))?,
            wv: node(nodes, &format!("dec{l}/wv"))?,
            wo: node(nodes, &format!("dec{l}/wo"))?,
            win: node(nodes, &format!("dec{l}/win"))?,
            wout: node(nodes, &format!("dec{l}/wout"))?,
            wgate: None,
        };
        let x = norm(
            tape,
            tokens,
            nodes,
            &format!("dec{l}/n1g"),
            &format!("dec{l}/n1b"),
            cfg.rmsnorm,
        )?;
        let biases = (
            node(nodes, &format!("dec{l}/bq"))?,
            node(nodes, &format!("dec{l}/bk"))?,
            node(nodes, &format!("dec{l}/bv"))?,
            node(nodes, &format!("dec{l}/bo"))?,
        );
        let msa = msa_forward(
            tape,
            x,
            &lw,
            biases,
            cfg.dec_heads,
            dec_head_dim,
            positions.as_deref(),
        )?;
        tokens = tape.add(tokens, msa.out)?;
        let x2 = norm(
            tape,
            tokens,
            nodes,
            &format!("dec{l}/n2g"),
            &format!("dec{l}/n2b"),
            cfg.rmsnorm,
        )?;
        let mlp = mlp_forward(
            tape,
            x2,
            &lw,
            Some(node(nodes, &format!("dec{l}/b1"))?),
            node(nodes, &format!("dec{l}/b2"))?,
            false,
        )?;
        tokens = tape.add(tokens, mlp)?;
    }
    let final_tokens = norm(tape, tokens, nodes, "decf_g", "decf_b", cfg.rmsnorm)?;
    let pred = tape.matmul(final_tokens, node(nodes, "head_w")?)?;
    tape.add_bias(pred, node(nodes, "head_b")?)
}

/// Parameter count of the classification configuration of this encoder:
/// patch embedding, class token, positional table (unless rotary), the
/// transformer blocks, final norm, and optionally a 1000-way linear head.
pub fn count_params(cfg: &ViTConfig, include_head: bool) -> usize {
    let d = cfg.embed_dim;
    let dp = cfg.mlp_dim;
    let n = cfg.n_patches();
    let mut total = 0usize;
    total += cfg.patch_dim() * d + d; // patch embedding
    total += d; // class token
    if !cfg.rope {
        total += (n + 1) * d; // positions for patches + class token
    }
    let norm_params = if cfg.rmsnorm { d } else { 2 * d };
    let attn = 3 * (d * d + d) + d * d + d;
    let mlp = if cfg.swiglu {
        2 * d * dp + dp * d + d // in + gate, out, b2
    } else {
        d * dp + dp + dp * d + d
    };
    total += cfg.layers * (attn + mlp + 2 * norm_params);
    total += norm_params; // final norm
    if include_head {
        total += d * CLASSIFIER_CLASSES + CLASSIFIER_CLASSES;
    }
    total
}

/// Forward cost of the classification configuration, counted as floating
/// point operations (two per multiply-accumulate) over the dense
/// projections: patch embedding, QKV and output projections, the MLP, and
/// the class head. Reported complexity tables for models of this family
/// follow the same projection-only convention, so the attention
/// score/value matmuls are deliberately excluded from this count.
pub fn count_flops(cfg: &ViTConfig) -> u64 {
    let d = cfg.embed_dim as u64;
    let dp = cfg.mlp_dim as u64;
    let n = cfg.n_patches() as u64;
    let tokens = n + 1; // class token included
    let patch_embed = n * cfg.patch_dim() as u64 * d;
    let attn_proj = 4 * tokens * d * d;
    let mlp = if cfg.swiglu { 3 } else { 2 } * tokens * d * dp;
    let head = d * CLASSIFIER_CLASSES as u64;
    2 * (cfg.layers as u64 * (attn_proj + mlp) + patch_embed + head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::template::LayerWeights;
    use rand::Rng;

    fn rngc(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn rand_mat(r: &mut ChaCha12Rng, rows: usize, cols: usize) -> DenseMatrix {
        DenseMatrix::new(
            rows,
            cols,
            (0..rows * cols).map(|_| r.gen_range(-0.5..0.5)).collect(),
        )
        .unwrap()
    }

    fn rand_layer(r: &mut ChaCha12Rng, d: usize, gated: bool) -> LayerWeights {
        LayerWeights {
            wq: rand_mat(r, d, d),
            wk: rand_mat(r, d, d),
            wv: rand_mat(r, d, d),
            wo: rand_mat(r, d, d),
            win: rand_mat(r, d, 4 * d),
            wout: rand_mat(r, 4 * d, d),
            wgate: gated.then(|| rand_mat(r, d, 4 * d)),
        }
    }

    // ---- straight-line oracles, independent of the tape ----

    fn softmax_row(row: &mut [f64]) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }

    /// Naive dense-loop attention: per head Q=xWq, K=xWk, V=xWv (with
    /// biases), scores softmax(QK^T/sqrt(d)), concat, project.
    #[allow(clippy::too_many_arguments)]
    fn attention_oracle(
        x: &[f64],
        n: usize,
        d: usize,
        heads: usize,
        lw: &LayerWeights,
        bq: &[f64],
        bk: &[f64],
        bv: &[f64],
        bo: &[f64],
    ) -> Vec<f64> {
        let hd = d / heads;
        let project = |w: &DenseMatrix, b: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; n * d];
            for i in 0..n {
                for j in 0..d {
                    let mut acc = b[j];
                    for k in 0..d {
                        acc += x[i * d + k] * w.at(k, j);
                    }
                    out[i * d + j] = acc;
                }
            }
            out
        };
        let q = project(&lw.wq, bq);
        let k = project(&lw.wk, bk);
        let v = project(&lw.wv, bv);
        let mut concat = vec![0.0; n * d];
        for h in 0..heads {
            for i in 0..n {
                let mut scores = vec![0.0; n];
                for j in 0..n {
                    let mut acc = 0.0;
                    for t in 0..hd {
                        acc += q[i * d + h * hd + t] * k[j * d + h * hd + t];
                    }
                    scores[j] = acc / (hd as f64).sqrt();
                }
                softmax_row(&mut scores);
                for t in 0..hd {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += scores[j] * v[j * d + h * hd + t];
                    }
                    concat[i * d + h * hd + t] = acc;
                }
            }
        }
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                let mut acc = bo[j];
                for t in 0..d {
                    acc += concat[i * d + t] * lw.wo.at(t, j);
                }
                out[i * d + j] = acc;
            }
        }
        out
    }

    fn gelu_scalar(x: f64) -> f64 {
        0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044_715 * x * x * x)).tanh())
    }

    fn mlp_oracle(x: &[f64], n: usize, d: usize, lw: &LayerWeights, b1: &[f64], b2: &[f64]) -> Vec<f64> {
        let dp = 4 * d;
        let mut hidden = vec![0.0; n * dp];
        for i in 0..n {
            for j in 0..dp {
                let mut acc = b1[j];
                for k in 0..d {
                    acc += x[i * d + k] * lw.win.at(k, j);
                }
                hidden[i * dp + j] = gelu_scalar(acc);
            }
        }
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                let mut acc = b2[j];
                for k in 0..dp {
                    acc += hidden[i * dp + k] * lw.wout.at(k, j);
                }
                out[i * d + j] = acc;
            }
        }
        out
    }

    fn layer_norm_oracle(x: &[f64], n: usize, d: usize, g: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let sigma = (var + NORM_EPS).sqrt();
            for j in 0..d {
                out[i * d + j] = g[j] * (row[j] - mean) / sigma + b[j];
            }
        }
        out
    }

    fn setup_weights(tape: &mut Tape, lw: &LayerWeights) -> LayerWeightNodes {
        LayerWeightNodes {
            wq: tape.constant_matrix(&lw.wq),
            wk: tape.constant_matrix(&lw.wk),
            wv: tape.constant_matrix(&lw.wv),
            wo: tape.constant_matrix(&lw.wo),
            win: tape.constant_matrix(&lw.win),
            wout: tape.constant_matrix(&lw.wout),
            wgate: lw.wgate.as_ref().map(|g| tape.constant_matrix(g)),
        }
    }

    #[test]
    fn msa_zero_weights_zero_output() {
        let mut tape = Tape::new();
        let d = 4;
        let zero = LayerWeights {
            wq: DenseMatrix::zeros(d, d).unwrap(),
            wk: DenseMatrix::zeros(d, d).unwrap(),
            wv: DenseMatrix::zeros(d, d).unwrap(),
            wo: DenseMatrix::zeros(d, d).unwrap(),
            win: DenseMatrix::zeros(d, 4 * d).unwrap(),
            wout: DenseMatrix::zeros(4 * d, d).unwrap(),
            wgate: None,
        };
        let lw = setup_weights(&mut tape, &zero);
        let x = tape.constant(DenseTensor::new(vec![3, 4], (0..12).map(|i| i as f64).collect()).unwrap());
        let zb = tape.constant(DenseTensor::zeros(vec![4]).unwrap());
        let msa = msa_forward(&mut tape, x, &lw, (zb, zb, zb, zb), 2, 2, None).unwrap();
        assert!(tape.value(msa.out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn msa_single_token_reduces_to_value_path() {
        let mut r = rngc(31);
        let d = 4;
        let lwm = rand_layer(&mut r, d, false);
        let mut tape = Tape::new();
        let lw = setup_weights(&mut tape, &lwm);
        let xv: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let x = tape.constant(DenseTensor::new(vec![1, d], xv.clone()).unwrap());
        let zb = tape.constant(DenseTensor::zeros(vec![d]).unwrap());
        let msa = msa_forward(&mut tape, x, &lw, (zb, zb, zb, zb), 2, 2, None).unwrap();
        // softmax over one position is 1, so output = (x Wv) Wo.
        let xv_m = DenseMatrix::new(1, d, xv).unwrap();
        let want = crate::tensor::matmul(&crate::tensor::matmul(&xv_m, &lwm.wv).unwrap(), &lwm.wo)
            .unwrap();
        for (a, b) in tape.value(msa.out).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn msa_matches_dense_loop_oracle() {
        let mut r = rngc(32);
        let (n, d, heads) = (4, 4, 2);
        let lwm = rand_layer(&mut r, d, false);
        let xv: Vec<f64> = (0..n * d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let bq: Vec<f64> = (0..d).map(|_| r.gen_range(-0.2..0.2)).collect();
        let bk: Vec<f64> = (0..d).map(|_| r.gen_range(-0.2..0.2)).collect();
        let bv: Vec<f64> = (0..d).map(|_| r.gen_range(-0.2..0.2)).collect();
        let bo: Vec<f64> = (0..d).map(|_| r.gen_range(-0.2..0.2)).collect();
        let mut tape = Tape::new();
        let lw = setup_weights(&mut tape, &lwm);
        let x = tape.constant(DenseTensor::new(vec![n, d], xv.clone()).unwrap());
        let bqn = tape.constant(DenseTensor::new(vec![d], bq.clone()).unwrap());
        let bkn = tape.constant(DenseTensor::new(vec![d], bk.clone()).unwrap());
        let bvn = tape.constant(DenseTensor::new(vec![d], bv.clone()).unwrap());
        let bon = tape.constant(DenseTensor::new(vec![d], bo.clone()).unwrap());
        let msa = msa_forward(&mut tape, x, &lw, (bqn, bkn, bvn, bon), heads, d / heads, None)
            .unwrap();
        let want = attention_oracle(&xv, n, d, heads, &lwm, &bq, &bk, &bv, &bo);
        for (a, b) in tape.value(msa.out).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        // Attention rows sum to one.
        for attn in &msa.attn {
            let v = tape.value(*attn);
            let (rows, cols) = (v.shape()[0], v.shape()[1]);
            for i in 0..rows {
                let s: f64 = v.data()[i * cols..(i + 1) * cols].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mlp_zero_weights_zero_output() {
        let mut tape = Tape::new();
        let d = 4;
        let zero = LayerWeights {
            wq: DenseMatrix::zeros(d, d).unwrap(),
            wk: DenseMatrix::zeros(d, d).unwrap(),
            wv: DenseMatrix::zeros(d, d).unwrap(),
            wo: DenseMatrix::zeros(d, d).unwrap(),
            win: DenseMatrix::zeros(d, 4 * d).unwrap(),
            wout: DenseMatrix::zeros(4 * d, d).unwrap(),
            wgate: None,
        };
        let lw = setup_weights(&mut tape, &zero);
        let x = tape.constant(DenseTensor::new(vec![2, d], vec![1.0; 2 * d]).unwrap());
        let b1 = tape.constant(DenseTensor::zeros(vec![4 * d]).unwrap());
        let b2 = tape.constant(DenseTensor::zeros(vec![d]).unwrap());
        let out = mlp_forward(&mut tape, x, &lw, Some(b1), b2, false).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mlp_identity_weights_apply_gelu() {
        // Square identity-like Win/Wout on a toy width: first d columns of
        // Win are the identity, rest zero; Wout top block identity.
        let d = 3;
        let mut win = DenseMatrix::zeros(d, 4 * d).unwrap();
        let mut wout = DenseMatrix::zeros(4 * d, d).unwrap();
        for i in 0..d {
            win.set(i, i, 1.0);
            wout.set(i, i, 1.0);
        }
        let lwm = LayerWeights {
            wq: DenseMatrix::zeros(d, d).unwrap(),
            wk: DenseMatrix::zeros(d, d).unwrap(),
            wv: DenseMatrix::zeros(d, d).unwrap(),
            wo: DenseMatrix::zeros(d, d).unwrap(),
            win,
            wout,
            wgate: None,
        };
        let mut tape = Tape::new();
        let lw = setup_weights(&mut tape, &lwm);
        let xv = vec![-1.0, 0.5, 2.0];
        let x = tape.constant(DenseTensor::new(vec![1, d], xv.clone()).unwrap());
        let b1 = tape.constant(DenseTensor::zeros(vec![4 * d]).unwrap());
        let b2 = tape.constant(DenseTensor::zeros(vec![d]).unwrap());
        let out = mlp_forward(&mut tape, x, &lw, Some(b1), b2, false).unwrap();
        for (o, &xi) in tape.value(out).data().iter().zip(&xv) {
            assert!((o - gelu_scalar(xi)).abs() < 1e-14);
        }
    }

    #[test]
    fn mlp_matches_loop_oracle() {
        let mut r = rngc(33);
        let (n, d) = (3, 4);
        let lwm = rand_layer(&mut r, d, false);
        let xv: Vec<f64> = (0..n * d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let b1v: Vec<f64> = (0..4 * d).map(|_| r.gen_range(-0.2..0.2)).collect();
        let b2v: Vec<f64> = (0..d).map(|_| r.gen_range(-0.2..0.2)).collect();
        let mut tape = Tape::new();
        let lw = setup_weights(&mut tape, &lwm);
        let x = tape.constant(DenseTensor::new(vec![n, d], xv.clone()).unwrap());
        let b1 = tape.constant(DenseTensor::new(vec![4 * d], b1v.clone()).unwrap());
        let b2 = tape.constant(DenseTensor::new(vec![d], b2v.clone()).unwrap());
        let out = mlp_forward(&mut tape, x, &lw, Some(b1), b2, false).unwrap();
        let want = mlp_oracle(&xv, n, d, &lwm, &b1v, &b2v);
        for (a, b) in tape.value(out).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    fn tiny_cfg(layers: usize) -> ViTConfig {
        ViTConfig::new(layers, 2, 2, 4, 8, 1).unwrap()
    }

    #[test]
    fn encoder_zero_layers_is_final_norm_only() {
        let cfg = tiny_cfg(0);
        let direct = DirectParams::init(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let nodes = bind_direct(&mut tape, &direct, false);
        let patches = tape.constant(
            DenseTensor::new(vec![4, 16], (0..64).map(|i| i as f64 / 64.0).collect()).unwrap(),
        );
        let cache = encoder_forward(&mut tape, &cfg, &[], &nodes, patches, &[0, 1, 2, 3]).unwrap();
        let tokens_in = tape.value(cache.tokens_in).data().to_vec();
        let want = layer_norm_oracle(
            &tokens_in,
            4,
            4,
            direct.set.get("encf_g").unwrap().data(),
            direct.set.get("encf_b").unwrap().data(),
        );
        for (a, b) in tape.value(cache.encoder_out).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_zero_blocks_pass_residual_through() {
        let cfg = tiny_cfg(2);
        let direct = DirectParams::init(&cfg, 2).unwrap();
        let d = cfg.embed_dim;
        let zero_layer = || LayerWeights {
            wq: DenseMatrix::zeros(d, d).unwrap(),
            wk: DenseMatrix::zeros(d, d).unwrap(),
            wv: DenseMatrix::zeros(d, d).unwrap(),
            wo: DenseMatrix::zeros(d, d).unwrap(),
            win: DenseMatrix::zeros(d, 4 * d).unwrap(),
            wout: DenseMatrix::zeros(4 * d, d).unwrap(),
            wgate: None,
        };
        let theta = vec![zero_layer(), zero_layer()];
        let mut tape = Tape::new();
        let weights = weight_nodes_from_theta(&mut tape, &theta, false);
        let nodes = bind_direct(&mut tape, &direct, false);
        let patches = tape.constant(
            DenseTensor::new(vec![4, 16], (0..64).map(|i| (i as f64).sin()).collect()).unwrap(),
        );
        let cache =
            encoder_forward(&mut tape, &cfg, &weights, &nodes, patches, &[0, 2]).unwrap();
        // Zero blocks contribute zero; output equals final norm of input.
        let tokens_in = tape.value(cache.tokens_in).data().to_vec();
        let want = layer_norm_oracle(
            &tokens_in,
            2,
            4,
            direct.set.get("encf_g").unwrap().data(),
            direct.set.get("encf_b").unwrap().data(),
        );
        for (a, b) in tape.value(cache.encoder_out).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Full encoder against a straight-line recomputation through the
    /// layer oracles.
    #[test]
    fn encoder_matches_straight_line_oracle() {
        let cfg = tiny_cfg(2);
        let direct = DirectParams::init(&cfg, 3).unwrap();
        let mut r = rngc(34);
        let theta: Vec<LayerWeights> = (0..2).map(|_| rand_layer(&mut r, 4, false)).collect();
        let visible = [0usize, 1, 3];
        let patches_v: Vec<f64> = (0..4 * 16).map(|_| r.gen_range(0.0..1.0)).collect();

        let mut tape = Tape::new();
        let weights = weight_nodes_from_theta(&mut tape, &theta, false);
        let nodes = bind_direct(&mut tape, &direct, false);
        let patches = tape.constant(DenseTensor::new(vec![4, 16], patches_v.clone()).unwrap());
        let cache =
            encoder_forward(&mut tape, &cfg, &weights, &nodes, patches, &visible).unwrap();
        let got = tape.value(cache.encoder_out).data().to_vec();

        // Oracle: recompute embedding and blocks with plain loops.
        let (n, d) = (3usize, 4usize);
        let pw = direct.set.get("patch_w").unwrap();
        let pb = direct.set.get("patch_b").unwrap();
        let pos = direct.set.get("enc_pos").unwrap();
        let mut tokens = vec![0.0; n * d];
        for (row, &pi) in visible.iter().enumerate() {
            for j in 0..d {
                let mut acc = pb.data()[j];
                for k in 0..16 {
                    acc += patches_v[pi * 16 + k] * pw.data()[k * d + j];
                }
                tokens[row * d + j] = acc + pos.data()[pi * d + j];
            }
        }
        for l in 0..2 {
            let g1 = direct.set.get(&format!("enc{l}/n1g")).unwrap().data();
            let b1n = direct.set.get(&format!("enc{l}/n1b")).unwrap().data();
            let x = layer_norm_oracle(&tokens, n, d, g1, b1n);
            let zeros = vec![0.0; d];
            let _ = &zeros;
            let bq = direct.set.get(&format!("enc{l}/bq")).unwrap().data();
            let bk = direct.set.get(&format!("enc{l}/bk")).unwrap().data();
            let bv = direct.set.get(&format!("enc{l}/bv")).unwrap().data();
            let bo = direct.set.get(&format!("enc{l}/bo")).unwrap().data();
            let msa = attention_oracle(&x, n, d, 2, &theta[l], bq, bk, bv, bo);
            for i in 0..n * d {
                tokens[i] += msa[i];
            }
            let g2 = direct.set.get(&format!("enc{l}/n2g")).unwrap().data();
            let b2n = direct.set.get(&format!("enc{l}/n2b")).unwrap().data();
            let x2 = layer_norm_oracle(&tokens, n, d, g2, b2n);
            let b1 = direct.set.get(&format!("enc{l}/b1")).unwrap().data();
            let b2 = direct.set.get(&format!("enc{l}/b2")).unwrap().data();
            let mlp = mlp_oracle(&x2, n, d, &theta[l], b1, b2);
            for i in 0..n * d {
                tokens[i] += mlp[i];
            }
        }
        let want = layer_norm_oracle(
            &tokens,
            n,
            d,
            direct.set.get("encf_g").unwrap().data(),
            direct.set.get("encf_b").unwrap().data(),
        );
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn decoder_handles_degenerate_masks() {
        let cfg = tiny_cfg(1);
        let direct = DirectParams::init(&cfg, 4).unwrap();
        // No masked positions: latents for all N patches pass through.
        let mut tape = Tape::new();
        let nodes = bind_direct(&mut tape, &direct, false);
        let latents = tape.constant(
            DenseTensor::new(vec![4, 4], (0..16).map(|i| i as f64 / 16.0).collect()).unwrap(),
        );
        let out = decoder_forward(&mut tape, &cfg, &nodes, Some(latents), &[0, 1, 2, 3]).unwrap();
        assert_eq!(tape.value(out).shape(), &[4, 16]);

        // All positions masked: output depends only on decoder params.
        let mut tape2 = Tape::new();
        let nodes2 = bind_direct(&mut tape2, &direct, false);
        let out2 = decoder_forward(&mut tape2, &cfg, &nodes2, None, &[]).unwrap();
        assert_eq!(tape2.value(out2).shape(), &[4, 16]);
        assert!(tape2.value(out2).data().iter().all(|v| v.is_finite()));

        // Out-of-range visible index is rejected.
        let mut tape3 = Tape::new();
        let nodes3 = bind_direct(&mut tape3, &direct, false);
        let lat3 = tape3.constant(DenseTensor::new(vec![1, 4], vec![0.0; 4]).unwrap());
        assert!(decoder_forward(&mut tape3, &cfg, &nodes3, Some(lat3), &[9]).is_err());
    }

    #[test]
    fn decoder_matches_straight_line_oracle() {
        // The decoder is a standard pre-norm stack; reuse the layer oracles
        // over the assembled token sequence.
        let cfg = tiny_cfg(1);
        let direct = DirectParams::init(&cfg, 5).unwrap();
        let mut r = rngc(35);
        let visible = [1usize, 2];
        let lat_v: Vec<f64> = (0..2 * 4).map(|_| r.gen_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let nodes = bind_direct(&mut tape, &direct, false);
        let latents = tape.constant(DenseTensor::new(vec![2, 4], lat_v.clone()).unwrap());
        let out = decoder_forward(&mut tape, &cfg, &nodes, Some(latents), &visible).unwrap();
        let got = tape.value(out).data().to_vec();

        let (n, dd) = (4usize, 2usize);
        let dw = direct.set.get("dec_embed_w").unwrap().data();
        let db = direct.set.get("dec_embed_b").unwrap().data();
        let mt = direct.set.get("mask_token").unwrap().data();
        let dpos = direct.set.get("dec_pos").unwrap().data();
        let mut tokens = vec![0.0; n * dd];
        for i in 0..n {
            tokens[i * dd..(i + 1) * dd].copy_from_slice(mt);
        }
        for (j, &i) in visible.iter().enumerate() {
            for t in 0..dd {
                let mut acc = db[t];
                for k in 0..4 {
                    acc += lat_v[j * 4 + k] * dw[k * dd + t];
                }
                tokens[i * dd + t] = acc;
            }
        }
        for i in 0..n * dd {
            tokens[i] += dpos[i];
        }
        let dec_weights = LayerWeights {
            wq: direct.set.get("dec0/wq").unwrap().to_matrix().unwrap(),
            wk: direct.set.get("dec0/wk").unwrap().to_matrix().unwrap(),
            wv: direct.set.get("dec0/wv").unwrap().to_matrix().unwrap(),
            wo: direct.set.get("dec0/wo").unwrap().to_matrix().unwrap(),
            win: direct.set.get("dec0/win").unwrap().to_matrix().unwrap(),
            wout: direct.set.get("dec0/wout").unwrap().to_matrix().unwrap(),
            wgate: None,
        };
        let x = layer_norm_oracle(
            &tokens,
            n,
            dd,
            direct.set.get("dec0/n1g").unwrap().data(),
            direct.set.get("dec0/n1b").unwrap().data(),
        );
        let msa = attention_oracle(
            &x,
            n,
            dd,
            cfg.dec_heads,
            &dec_weights,
            direct.set.get("dec0/bq").unwrap().data(),
            direct.set.get("dec0/bk").unwrap().data(),
            direct.set.get("dec0/bv").unwrap().data(),
            direct.set.get("dec0/bo").unwrap().data(),
        );
        for i in 0..n * dd {
            tokens[i] += msa[i];
        }
        let x2 = layer_norm_oracle(
            &tokens,
            n,
            dd,
            direct.set.get("dec0/n2g").unwrap().data(),
            direct.set.get("dec0/n2b").unwrap().data(),
        );
        let mlp = mlp_oracle(
            &x2,
            n,
            dd,
            &dec_weights,
            direct.set.get("dec0/b1").unwrap().data(),
            direct.set.get("dec0/b2").unwrap().data(),
        );
        for i in 0..n * dd {
            tokens[i] += mlp[i];
        }
        let fin = layer_norm_oracle(
            &tokens,
            n,
            dd,
            direct.set.get("decf_g").unwrap().data(),
            direct.set.get("decf_b").unwrap().data(),
        );
        let hw = direct.set.get("head_w").unwrap().data();
        let hb = direct.set.get("head_b").unwrap().data();
        let mut want = vec![0.0; n * 16];
        for i in 0..n {
            for j in 0..16 {
                let mut acc = hb[j];
                for k in 0..dd {
                    acc += fin[i * dd + k] * hw[k * 16 + j];
                }
                want[i * 16 + j] = acc;
            }
        }
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn config_rejects_mismatched_dims() {
        let mut cfg = ViTConfig::new(2, 2, 2, 4, 8, 1).unwrap();
        cfg.embed_dim = 5;
        assert!(cfg.validate().is_err());
        assert!(ViTConfig::new(2, 2, 2, 3, 8, 1).is_err());
    }

    #[test]
    fn table_param_counts() {
        // (layers, heads, expected millions)
        let cases = [
            (6, 6, 11.4e6),
            (12, 6, 22.1e6),
            (12, 3, 5.7e6),
            (3, 12, 22.8e6),
            (6, 12, 44.0e6),
        ];
        for (l, h, want) in cases {
            let cfg = ViTConfig::new(l, h, 64, 16, 224, 3).unwrap();
            let got = count_params(&cfg, true) as f64;
            let rel = (got - want).abs() / want;
            assert!(rel < 0.05, "L{l} H{h}: {got} vs {want} ({rel:.3})");
        }
    }

    #[test]
    fn table_flop_counts() {
        let cases = [
            (6, 6, 4.3e9),
            (12, 6, 8.5e9),
            (12, 3, 2.2e9),
            (3, 12, 8.6e9),
            (6, 12, 17.0e9),
        ];
        for (l, h, want) in cases {
            let cfg = ViTConfig::new(l, h, 64, 16, 224, 3).unwrap();
            let got = count_flops(&cfg) as f64;
            let rel = (got - want).abs() / want;
            assert!(rel < 0.10, "L{l} H{h}: {got} vs {want} ({rel:.3})");
        }
    }

    #[test]
    fn flops_linear_in_depth() {
        let base = ViTConfig::new(0, 6, 64, 16, 224, 3).unwrap();
        let l6 = ViTConfig::new(6, 6, 64, 16, 224, 3).unwrap();
        let l12 = ViTConfig::new(12, 6, 64, 16, 224, 3).unwrap();
        let overhead = count_flops(&base);
        assert_eq!(
            count_flops(&l12) - overhead,
            2 * (count_flops(&l6) - overhead)
        );
    }

    #[test]
    fn param_count_monotone_in_depth_and_heads() {
        let p = |l, h| count_params(&ViTConfig::new(l, h, 64, 16, 224, 3).unwrap(), true);
        assert!(p(7, 6) > p(6, 6));
        assert!(p(6, 7) > p(6, 6));
    }

    #[test]
    fn encoder_permutation_equivariant_without_rope() {
        let cfg = tiny_cfg(1);
        let direct = DirectParams::init(&cfg, 6).unwrap();
        let mut r = rngc(36);
        let theta: Vec<LayerWeights> = vec![rand_layer(&mut r, 4, false)];
        let patches_v: Vec<f64> = (0..4 * 16).map(|_| r.gen_range(0.0..1.0)).collect();

        let run = |visible: &[usize]| {
            let mut tape = Tape::new();
            let weights = weight_nodes_from_theta(&mut tape, &theta, false);
            let nodes = bind_direct(&mut tape, &direct, false);
            let patches = tape.constant(DenseTensor::new(vec![4, 16], patches_v.clone()).unwrap());
            let cache =
                encoder_forward(&mut tape, &cfg, &weights, &nodes, patches, visible).unwrap();
            tape.value(cache.encoder_out).data().to_vec()
        };
        let fwd = run(&[0, 1, 3]);
        let perm = run(&[3, 0, 1]);
        // Row for patch p in the permuted order must match the original.
        let d = 4;
        let order_a = [0usize, 1, 3];
        let order_b = [3usize, 0, 1];
        for (ia, &p) in order_a.iter().enumerate() {
            let ib = order_b.iter().position(|&q| q == p).unwrap();
            for j in 0..d {
                let diff = (fwd[ia * d + j] - perm[ib * d + j]).abs();
                assert!(diff < 1e-10, "patch {p} dim {j}: {diff}");
            }
        }
    }

    #[test]
    fn enhancement_flags_run_and_differ() {
        // Gated MLP + RMS norm + rotary variant must produce a valid
        // forward pass that differs from the vanilla one.
        let cfg = ViTConfig::new(1, 2, 2, 4, 8, 1)
            .unwrap()
            .with_flags(true, true, true);
        cfg.validate().unwrap();
        let direct = DirectParams::init(&cfg, 7).unwrap();
        let mut r = rngc(37);
        let theta = vec![rand_layer(&mut r, 4, true)];
        let mut tape = Tape::new();
        let weights = weight_nodes_from_theta(&mut tape, &theta, false);
        let nodes = bind_direct(&mut tape, &direct, false);
        let patches = tape.constant(
            DenseTensor::new(vec![4, 16], (0..64).map(|i| (i as f64 / 7.0).sin()).collect())
                .unwrap(),
        );
        let cache =
            encoder_forward(&mut tape, &cfg, &weights, &nodes, patches, &[0, 1, 2]).unwrap();
        let out = tape.value(cache.encoder_out);
        assert!(out.data().iter().all(|v| v.is_finite()));
        let latents = cache.encoder_out;
        let pred = decoder_forward(&mut tape, &cfg, &nodes, Some(latents), &[0, 1, 2]).unwrap();
        assert!(tape.value(pred).data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn swiglu_param_count_uses_gate() {
        let plain = ViTConfig::new(6, 6, 64, 16, 224, 3).unwrap();
        let gated = plain.clone().with_flags(true, false, false);
        let diff = count_params(&gated, false) - count_params(&plain, false);
        // Gate matrices add D*D' per layer; dropping b1 removes D' per layer.
        let d = 384;
        assert_eq!(diff, 6 * (d * 4 * d) - 6 * (4 * d));
    }
}
