//! Whole-network assembly: the fork-stage model (shared extractor/decoder +
//! per-distortion experts), the base network that amalgamates expert features
//! with gates, attention and Bi-SGUs, and the expanded network that grows one
//! new expert branch with its own extractor and decoder.
//!
//! Parameter names are prefixed by ownership: `shared.*` is the old expert
//! (experts + base gates + base attention), `base.*` is private to the base
//! network (extractor, Bi-SGUs, fusion, decoder), `expand.*` is private to
//! the expanded network. `fork.*` names exist only in the fork stage.

use ndarray::{Array2, ArrayD};
use std::collections::BTreeSet;

use crate::autograd::VarId;
use crate::blocks::{
    AttentionLayer, Ctx, Decoder, Expert, Extractor, GateLayer, Layer, PixelUp, SequenceFuser,
    Trainable,
};
use crate::error::{RestoreError, Result};
use crate::params::{Checkpoint, ModelConfig, NetworkConfig, ParamStore, Role};
use crate::patch::ImagePatch;

/// Expert-mixing coefficients; every column is a probability vector over
/// experts (unless produced by the uniform-attention ablation).
#[derive(Debug, Clone)]
pub struct AttentionMatrix {
    pub weights: Array2<f64>,
}

impl AttentionMatrix {
    pub fn validate(&self) -> Result<()> {
        let (rows, cols) = self.weights.dim();
        for j in 0..cols {
            let mut sum = 0.0;
            for i in 0..rows {
                let v = self.weights[[i, j]];
                if v < 0.0 {
                    return Err(RestoreError::Invariant(format!(
                        "negative attention weight at ({i}, {j})"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-5 {
                return Err(RestoreError::Invariant(format!(
                    "attention column {j} sums to {sum}"
                )));
            }
        }
        Ok(())
    }
}

/// Weighted mixture of gated per-expert features: out_j = sum_i attn[i,j] * gated[i][j].
/// Plain array arithmetic; the training path builds the same mixture on the tape.
pub fn aggregate(gated: &[Vec<ArrayD<f64>>], attn: &AttentionMatrix) -> Result<Vec<ArrayD<f64>>> {
    let (rows, cols) = attn.weights.dim();
    if gated.len() != rows {
        return Err(RestoreError::ShapeMismatch(format!(
            "{} expert feature lists vs {rows} attention rows",
            gated.len()
        )));
    }
    if gated.iter().any(|g| g.len() != cols) {
        return Err(RestoreError::ShapeMismatch(
            "feature list length vs attention columns".into(),
        ));
    }
    let mut out = Vec::with_capacity(cols);
    for j in 0..cols {
        let mut acc = ArrayD::<f64>::zeros(gated[0][j].raw_dim());
        for (i, feats) in gated.iter().enumerate() {
            if feats[j].shape() != acc.shape() {
                return Err(RestoreError::ShapeMismatch(
                    "gated feature shapes differ across experts".into(),
                ));
            }
            let w = attn.weights[[i, j]];
            acc.zip_mut_with(&feats[j], |a, &v| *a += w * v);
        }
        out.push(acc);
    }
    Ok(out)
}

/// Diagnostics from one forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    pub attn_v: Option<Array2<f64>>,
    pub attn_f: Option<Array2<f64>>,
    /// Gate maps keyed by a short label like `s.e1.l2`.
    pub gate_maps: Vec<(String, ArrayD<f64>)>,
}

impl ForwardTrace {
    pub fn attention_matrices(&self) -> Vec<AttentionMatrix> {
        [&self.attn_v, &self.attn_f]
            .into_iter()
            .flatten()
            .map(|w| AttentionMatrix { weights: w.clone() })
            .collect()
    }
}

/// Which expert-feature stream a gate bank modulates.
#[derive(Clone, Copy, PartialEq)]
enum GateBank {
    HalfScale,
    QuarterScale,
}

fn gate_bank(
    prefix: &str,
    bank: GateBank,
    n_rows: usize,
    cfg: &NetworkConfig,
) -> Vec<Vec<GateLayer>> {
    let (c, c2) = cfg.widths();
    let (cg, cf, tag) = match bank {
        GateBank::HalfScale => (c, c, "gate_s"),
        GateBank::QuarterScale => (c2, c2, "gate_q"),
    };
    let skip = cfg.ablation.no_gates
        || (bank == GateBank::HalfScale && cfg.ablation.no_s_gates);
    if skip {
        return Vec::new();
    }
    (1..=n_rows)
        .map(|i| {
            (1..=cfg.m_blocks / 2)
                .map(|j| GateLayer::new(&format!("{prefix}.{tag}.e{i}.l{j}"), cg, cf, cfg.leaky_slope))
                .collect()
        })
        .collect()
}

/// The base network: extractor, N experts, gates, attention, Bi-SGUs,
/// fusion and decoder.
pub struct BaseNet {
    pub cfg: NetworkConfig,
    pub extractor: Extractor,
    pub experts: Vec<Expert>,
    gates_s: Vec<Vec<GateLayer>>,
    gates_q: Vec<Vec<GateLayer>>,
    attn_v: Option<AttentionLayer>,
    attn_f: Option<AttentionLayer>,
    bisgu_v: SequenceFuser,
    bisgu_f: SequenceFuser,
    f_up: PixelUp,
    fuse: Layer,
    pub decoder: Decoder,
}

impl BaseNet {
    pub fn new(cfg: NetworkConfig) -> Self {
        let (c, c2) = cfg.widths();
        let n = cfg.n_experts;
        let half_m = cfg.m_blocks / 2;
        let experts = (1..=n)
            .map(|i| Expert::new(&format!("shared.expert{i}"), &cfg))
            .collect();
        let attn = if cfg.ablation.uniform_attention {
            (None, None)
        } else {
            (
                Some(AttentionLayer::new("shared.attn_v", c2, n, half_m, cfg.leaky_slope)),
                Some(AttentionLayer::new("shared.attn_f", c2, n, half_m, cfg.leaky_slope)),
            )
        };
        Self {
            extractor: Extractor::new("base.extractor", &cfg),
            experts,
            gates_s: gate_bank("shared", GateBank::HalfScale, n, &cfg),
            gates_q: gate_bank("shared", GateBank::QuarterScale, n, &cfg),
            attn_v: attn.0,
            attn_f: attn.1,
            bisgu_v: SequenceFuser::new("base.bisgu_v", c, half_m, &cfg),
            bisgu_f: SequenceFuser::new("base.bisgu_f", c2, half_m, &cfg),
            f_up: PixelUp::new("base.f_up", c2, c),
            fuse: Layer::conv("base.fuse", 2 * c, c, 3, 1),
            decoder: Decoder::new("base.decoder", &cfg),
            cfg,
        }
    }

    pub fn layers(&self) -> Vec<&Layer> {
        let mut v = self.extractor.layers();
        for e in &self.experts {
            v.extend(e.layers());
        }
        for bank in [&self.gates_s, &self.gates_q] {
            for row in bank {
                for g in row {
                    v.extend(g.layers());
                }
            }
        }
        for a in [&self.attn_v, &self.attn_f].into_iter().flatten() {
            v.extend(a.layers());
        }
        v.extend(self.bisgu_v.layers());
        v.extend(self.bisgu_f.layers());
        v.extend(self.f_up.layers());
        v.push(&self.fuse);
        v.extend(self.decoder.layers());
        v
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        for l in self.layers() {
            l.init_into(&mut store, seed);
        }
        store
    }

    /// Amalgamate expert features for input `xv` given extractor outputs
    /// (h, g). Returns the aggregated half- and quarter-scale sequences.
    /// The shared (old expert) part ends at the aggregated features; the
    /// Bi-SGUs, upsampling, fusion and decoder are base-private.
    fn amalgamate(
        &self,
        ctx: &mut Ctx,
        xv: VarId,
        h: VarId,
        g: VarId,
        trace: &mut ForwardTrace,
    ) -> (Vec<VarId>, Vec<VarId>) {
        let half_m = self.cfg.m_blocks / 2;
        let n = self.cfg.n_experts;

        let h_hw = {
            let v = ctx.tape.value(h);
            (v.shape()[1], v.shape()[2])
        };
        let g_hw = {
            let v = ctx.tape.value(g);
            (v.shape()[1], v.shape()[2])
        };
        let img_h = ctx.tape.resize_bilinear(xv, h_hw.0, h_hw.1);
        let img_g = ctx.tape.resize_bilinear(xv, g_hw.0, g_hw.1);

        let mut s_all = Vec::with_capacity(n);
        let mut q_all = Vec::with_capacity(n);
        for e in &self.experts {
            let (s, q) = e.forward_selected(ctx, h, g);
            s_all.push(s);
            q_all.push(q);
        }

        let gamma = apply_gates(ctx, &self.gates_s, &s_all, h, img_h, "s", trace);
        let eta = apply_gates(ctx, &self.gates_q, &q_all, g, img_g, "q", trace);

        let attn_v = attention_or_uniform(ctx, &self.attn_v, g, n, half_m);
        let attn_f = attention_or_uniform(ctx, &self.attn_f, g, n, half_m);
        trace.attn_v = Some(matrix_of(ctx, attn_v));
        trace.attn_f = Some(matrix_of(ctx, attn_f));

        let vs: Vec<VarId> = (0..half_m)
            .map(|j| {
                let feats: Vec<VarId> = gamma.iter().map(|row| row[j]).collect();
                ctx.tape.mix_column(attn_v, j, &feats)
            })
            .collect();
        let fs: Vec<VarId> = (0..half_m)
            .map(|j| {
                let feats: Vec<VarId> = eta.iter().map(|row| row[j]).collect();
                ctx.tape.mix_column(attn_f, j, &feats)
            })
            .collect();
        (vs, fs)
    }

    /// Full forward pass on the tape. `x` must have dims divisible by 4.
    pub fn forward(&self, ctx: &mut Ctx, x: &ImagePatch) -> Result<(VarId, ForwardTrace)> {
        check_divisible(x.height(), x.width())?;
        let xv = ctx.tape.constant(x.data.clone().into_dyn());
        self.forward_var(ctx, xv)
    }

    /// Forward pass from an input already on the tape (e.g. a generator
    /// output inside the cycle loss); gradients flow through the input.
    pub fn forward_var(&self, ctx: &mut Ctx, xv: VarId) -> Result<(VarId, ForwardTrace)> {
        {
            let v = ctx.tape.value(xv);
            check_divisible(v.shape()[1], v.shape()[2])?;
        }
        let mut trace = ForwardTrace::default();
        let (h, g) = self.extractor.forward(ctx, xv);
        let (vs, fs) = self.amalgamate(ctx, xv, h, g, &mut trace);

        let bv = self.bisgu_v.forward(ctx, &vs);
        let bf = self.bisgu_f.forward(ctx, &fs);
        let up = self.f_up.forward(ctx, bf);
        let cat = ctx.tape.concat_channels(&[bv, up]);
        let fused0 = self.fuse.fwd(ctx, cat);
        let fused = ctx.tape.leaky_relu(fused0, self.cfg.leaky_slope);
        let y = self.decoder.forward(ctx, fused, xv);
        Ok((y, trace))
    }

    pub fn flops(&self, h: usize, w: usize) -> f64 {
        let h_hw = self.extractor.conv1.out_hw((h, w));
        let g_hw = self.extractor.conv2.out_hw(h_hw);
        let half_m = self.cfg.m_blocks / 2;
        let mut f = self.extractor.flops((h, w));
        for e in &self.experts {
            f += e.flops(h_hw);
        }
        for row in &self.gates_s {
            for gl in row {
                f += gl.flops(h_hw);
            }
        }
        for row in &self.gates_q {
            for gl in row {
                f += gl.flops(g_hw);
            }
        }
        for a in [&self.attn_v, &self.attn_f].into_iter().flatten() {
            f += a.flops();
        }
        f += self.bisgu_v.flops(h_hw, half_m);
        f += self.bisgu_f.flops(g_hw, half_m);
        f += self.f_up.flops(g_hw);
        f += self.fuse.flops(h_hw);
        f += self.decoder.flops(h_hw);
        f
    }
}

fn check_divisible(h: usize, w: usize) -> Result<()> {
    if h % 4 != 0 || w % 4 != 0 {
        return Err(RestoreError::ShapeMismatch(format!(
            "input dims must be divisible by 4, got {h}x{w}"
        )));
    }
    Ok(())
}

fn matrix_of(ctx: &Ctx, id: VarId) -> Array2<f64> {
    let v = ctx.tape.value(id);
    let (r, c) = (v.shape()[0], v.shape()[1]);
    Array2::from_shape_fn((r, c), |(i, j)| v[[i, j]])
}

fn attention_or_uniform(
    ctx: &mut Ctx,
    attn: &Option<AttentionLayer>,
    g: VarId,
    rows: usize,
    cols: usize,
) -> VarId {
    match attn {
        Some(a) => a.forward(ctx, g),
        // ablation: every attention weight pinned to exactly 1
        None => ctx.tape.constant(ArrayD::from_elem(ndarray::IxDyn(&[rows, cols]), 1.0)),
    }
}

/// Run a gate bank over per-expert feature lists; pass-through when the bank
/// is disabled by an ablation flag.
fn apply_gates(
    ctx: &mut Ctx,
    bank: &[Vec<GateLayer>],
    feats: &[Vec<VarId>],
    global: VarId,
    image: VarId,
    tag: &str,
    trace: &mut ForwardTrace,
) -> Vec<Vec<VarId>> {
    if bank.is_empty() {
        return feats.to_vec();
    }
    feats
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(j, &f)| {
                    let (gated, map) = bank[i][j].forward(ctx, global, image, f);
                    trace.gate_maps.push((
                        format!("{tag}.e{}.l{}", i + 1, j + 1),
                        ctx.tape.value(map).clone(),
                    ));
                    gated
                })
                .collect()
        })
        .collect()
}

/// The new-task half of the incremental network: extractor E2, expert N+1,
/// two-row gates/attention over (old expert, new expert), Bi-SGUs and D2.
pub struct ExpandParts {
    pub extractor: Extractor,
    pub expert: Expert,
    gates_s: Vec<Vec<GateLayer>>,
    gates_q: Vec<Vec<GateLayer>>,
    attn_v: Option<AttentionLayer>,
    attn_f: Option<AttentionLayer>,
    bisgu_v: SequenceFuser,
    bisgu_f: SequenceFuser,
    f_up: PixelUp,
    fuse: Layer,
    pub decoder: Decoder,
}

impl ExpandParts {
    pub fn new(cfg: &NetworkConfig) -> Self {
        let (c, c2) = cfg.widths();
        let half_m = cfg.m_blocks / 2;
        let attn = if cfg.ablation.uniform_attention {
            (None, None)
        } else {
            (
                Some(AttentionLayer::new("expand.attn_v", c2, 2, half_m, cfg.leaky_slope)),
                Some(AttentionLayer::new("expand.attn_f", c2, 2, half_m, cfg.leaky_slope)),
            )
        };
        Self {
            extractor: Extractor::new("expand.extractor", cfg),
            expert: Expert::new("expand.expert", cfg),
            gates_s: gate_bank("expand", GateBank::HalfScale, 2, cfg),
            gates_q: gate_bank("expand", GateBank::QuarterScale, 2, cfg),
            attn_v: attn.0,
            attn_f: attn.1,
            bisgu_v: SequenceFuser::new("expand.bisgu_v", c, half_m, cfg),
            bisgu_f: SequenceFuser::new("expand.bisgu_f", c2, half_m, cfg),
            f_up: PixelUp::new("expand.f_up", c2, c),
            fuse: Layer::conv("expand.fuse", 2 * c, c, 3, 1),
            decoder: Decoder::new("expand.decoder", cfg),
        }
    }

    pub fn layers(&self) -> Vec<&Layer> {
        let mut v = self.extractor.layers();
        v.extend(self.expert.layers());
        for bank in [&self.gates_s, &self.gates_q] {
            for row in bank {
                for g in row {
                    v.extend(g.layers());
                }
            }
        }
        for a in [&self.attn_v, &self.attn_f].into_iter().flatten() {
            v.extend(a.layers());
        }
        v.extend(self.bisgu_v.layers());
        v.extend(self.bisgu_f.layers());
        v.extend(self.f_up.layers());
        v.push(&self.fuse);
        v.extend(self.decoder.layers());
        v
    }
}

/// Base network plus the expanded branch; the two share the old expert.
pub struct IncrementalNet {
    pub base: BaseNet,
    pub expand: ExpandParts,
}

impl IncrementalNet {
    pub fn new(cfg: NetworkConfig) -> Self {
        let expand = ExpandParts::new(&cfg);
        Self { base: BaseNet::new(cfg), expand }
    }

    pub fn layers(&self) -> Vec<&Layer> {
        let mut v = self.base.layers();
        v.extend(self.expand.layers());
        v
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        for l in self.layers() {
            l.init_into(&mut store, seed);
        }
        store
    }

    /// Forward pass of the expanded network on a new-task input. The old
    /// expert (shared experts + base gates + base attention) consumes the
    /// new extractor's features h2, g2 and is gated with the new image.
    pub fn expanded_forward(&self, ctx: &mut Ctx, x2: &ImagePatch) -> Result<(VarId, ForwardTrace)> {
        check_divisible(x2.height(), x2.width())?;
        let cfg = &self.base.cfg;
        let half_m = cfg.m_blocks / 2;
        let mut trace = ForwardTrace::default();

        let xv = ctx.tape.constant(x2.data.clone().into_dyn());
        let (h2, g2) = self.expand.extractor.forward(ctx, xv);

        // old expert aggregated features on the new input
        let mut old_trace = ForwardTrace::default();
        let (v_hat, f_hat) = self.base.amalgamate(ctx, xv, h2, g2, &mut old_trace);

        // new expert branch
        let (s_new, q_new) = self.expert_features(ctx, h2, g2);

        let h_hw = {
            let v = ctx.tape.value(h2);
            (v.shape()[1], v.shape()[2])
        };
        let g_hw = {
            let v = ctx.tape.value(g2);
            (v.shape()[1], v.shape()[2])
        };
        let img_h = ctx.tape.resize_bilinear(xv, h_hw.0, h_hw.1);
        let img_g = ctx.tape.resize_bilinear(xv, g_hw.0, g_hw.1);

        let xi = apply_gates(ctx, &self.expand.gates_s, &[v_hat, s_new], h2, img_h, "xi", &mut trace);
        let psi = apply_gates(ctx, &self.expand.gates_q, &[f_hat, q_new], g2, img_g, "psi", &mut trace);

        let attn_v = attention_or_uniform(ctx, &self.expand.attn_v, g2, 2, half_m);
        let attn_f = attention_or_uniform(ctx, &self.expand.attn_f, g2, 2, half_m);
        trace.attn_v = Some(matrix_of(ctx, attn_v));
        trace.attn_f = Some(matrix_of(ctx, attn_f));

        let thetas: Vec<VarId> = (0..half_m)
            .map(|j| {
                let feats: Vec<VarId> = xi.iter().map(|row| row[j]).collect();
                ctx.tape.mix_column(attn_v, j, &feats)
            })
            .collect();
        let phis: Vec<VarId> = (0..half_m)
            .map(|j| {
                let feats: Vec<VarId> = psi.iter().map(|row| row[j]).collect();
                ctx.tape.mix_column(attn_f, j, &feats)
            })
            .collect();

        let bv = self.expand.bisgu_v.forward(ctx, &thetas);
        let bf = self.expand.bisgu_f.forward(ctx, &phis);
        let up = self.expand.f_up.forward(ctx, bf);
        let cat = ctx.tape.concat_channels(&[bv, up]);
        let fused0 = self.expand.fuse.fwd(ctx, cat);
        let fused = ctx.tape.leaky_relu(fused0, cfg.leaky_slope);
        let y = self.expand.decoder.forward(ctx, fused, xv);
        Ok((y, trace))
    }

    fn expert_features(&self, ctx: &mut Ctx, h: VarId, g: VarId) -> (Vec<VarId>, Vec<VarId>) {
        self.expand.expert.forward_selected(ctx, h, g)
    }

    /// FLOPs of the expanded (new-task) inference path.
    pub fn expanded_flops(&self, h: usize, w: usize) -> f64 {
        let cfg = &self.base.cfg;
        let h_hw = self.expand.extractor.conv1.out_hw((h, w));
        let g_hw = self.expand.extractor.conv2.out_hw(h_hw);
        let half_m = cfg.m_blocks / 2;

        let mut f = self.expand.extractor.flops((h, w));
        // old expert re-used on the new input
        for e in &self.base.experts {
            f += e.flops(h_hw);
        }
        for row in &self.base.gates_s {
            for gl in row {
                f += gl.flops(h_hw);
            }
        }
        for row in &self.base.gates_q {
            for gl in row {
                f += gl.flops(g_hw);
            }
        }
        for a in [&self.base.attn_v, &self.base.attn_f].into_iter().flatten() {
            f += a.flops();
        }
        // new branch
        f += self.expand.expert.flops(h_hw);
        for row in &self.expand.gates_s {
            for gl in row {
                f += gl.flops(h_hw);
            }
        }
        for row in &self.expand.gates_q {
            for gl in row {
                f += gl.flops(g_hw);
            }
        }
        for a in [&self.expand.attn_v, &self.expand.attn_f].into_iter().flatten() {
            f += a.flops();
        }
        f += self.expand.bisgu_v.flops(h_hw, half_m);
        f += self.expand.bisgu_f.flops(g_hw, half_m);
        f += self.expand.f_up.flops(g_hw);
        f += self.expand.fuse.flops(h_hw);
        f += self.expand.decoder.flops(h_hw);
        f
    }
}

/// Fork-stage model: experts trained per distortion kind behind a shared
/// extractor, fusion head and decoder.
pub struct ForkNet {
    pub cfg: NetworkConfig,
    pub extractor: Extractor,
    pub experts: Vec<Expert>,
    pub f_up: PixelUp,
    pub fuse: Layer,
    pub decoder: Decoder,
    /// Expert parameter prefixes, e.g. `fork.expert1`.
    pub expert_prefixes: Vec<String>,
}

impl ForkNet {
    /// Joint fork model with N indexed expert columns.
    pub fn joint(cfg: NetworkConfig) -> Self {
        let prefixes: Vec<String> =
            (1..=cfg.n_experts).map(|i| format!("fork.expert{i}")).collect();
        Self::with_experts(cfg, prefixes)
    }

    /// A single-expert model as stored in a `single_expert` checkpoint.
    pub fn single(cfg: NetworkConfig) -> Self {
        Self::with_experts(cfg, vec!["fork.expert".to_string()])
    }

    fn with_experts(cfg: NetworkConfig, prefixes: Vec<String>) -> Self {
        let (c, c2) = cfg.widths();
        let experts = prefixes.iter().map(|p| Expert::new(p, &cfg)).collect();
        Self {
            extractor: Extractor::new("fork.extractor", &cfg),
            experts,
            f_up: PixelUp::new("fork.f_up", c2, c),
            fuse: Layer::conv("fork.fuse", 2 * c, c, 3, 1),
            decoder: Decoder::new("fork.decoder", &cfg),
            expert_prefixes: prefixes,
            cfg,
        }
    }

    pub fn layers(&self) -> Vec<&Layer> {
        let mut v = self.extractor.layers();
        for e in &self.experts {
            v.extend(e.layers());
        }
        v.extend(self.f_up.layers());
        v.push(&self.fuse);
        v.extend(self.decoder.layers());
        v
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        for l in self.layers() {
            l.init_into(&mut store, seed);
        }
        store
    }

    /// Restore `x` through expert `idx` only.
    pub fn forward_one(&self, ctx: &mut Ctx, x: &ImagePatch, idx: usize) -> Result<VarId> {
        check_divisible(x.height(), x.width())?;
        let xv = ctx.tape.constant(x.data.clone().into_dyn());
        let (h, g) = self.extractor.forward(ctx, xv);
        let (u_final, p_final) = self.experts[idx].forward_final(ctx, h, g);
        let up = self.f_up.forward(ctx, p_final);
        let cat = ctx.tape.concat_channels(&[u_final, up]);
        let fused0 = self.fuse.fwd(ctx, cat);
        let fused = ctx.tape.leaky_relu(fused0, self.cfg.leaky_slope);
        Ok(self.decoder.forward(ctx, fused, xv))
    }

    pub fn flops_one(&self, h: usize, w: usize) -> f64 {
        let h_hw = self.extractor.conv1.out_hw((h, w));
        let g_hw = self.extractor.conv2.out_hw(h_hw);
        self.extractor.flops((h, w))
            + self.experts[0].flops(h_hw)
            + self.f_up.flops(g_hw)
            + self.fuse.flops(h_hw)
            + self.decoder.flops(h_hw)
    }
}

/// The theta_S / theta_P1 / theta_P2 split of an incremental model.
#[derive(Debug, Clone)]
pub struct ParameterPartition {
    /// Old expert: experts 1..N, base gates, base attention.
    pub shared: BTreeSet<String>,
    /// Base-private: extractor E1, Bi-SGUs, upsampling, fusion, decoder D1.
    pub base_private: BTreeSet<String>,
    /// Expanded-private: expert N+1, E2, D2, expanded gates/attention/Bi-SGUs.
    pub expanded_private: BTreeSet<String>,
}

impl ParameterPartition {
    pub fn total(&self) -> usize {
        self.shared.len() + self.base_private.len() + self.expanded_private.len()
    }
}

/// Classify one parameter name into its partition set.
pub fn classify_param(name: &str) -> Result<PartitionSet> {
    if name.starts_with("shared.") {
        Ok(PartitionSet::Shared)
    } else if name.starts_with("base.") {
        Ok(PartitionSet::BasePrivate)
    } else if name.starts_with("expand.") {
        Ok(PartitionSet::ExpandedPrivate)
    } else {
        Err(RestoreError::Partition(format!(
            "parameter '{name}' does not belong to any partition set"
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionSet {
    Shared,
    BasePrivate,
    ExpandedPrivate,
}

/// Split an incremental checkpoint's parameters into disjoint covering sets.
pub fn partition_params(ckpt: &Checkpoint) -> Result<ParameterPartition> {
    ckpt.require_role(&[Role::Incremental])?;
    let mut p = ParameterPartition {
        shared: BTreeSet::new(),
        base_private: BTreeSet::new(),
        expanded_private: BTreeSet::new(),
    };
    for name in ckpt.params.names() {
        match classify_param(name)? {
            PartitionSet::Shared => p.shared.insert(name.clone()),
            PartitionSet::BasePrivate => p.base_private.insert(name.clone()),
            PartitionSet::ExpandedPrivate => p.expanded_private.insert(name.clone()),
        };
    }
    Ok(p)
}

/// Evaluate the base network of a checkpoint on one patch.
/// The output is not clamped; callers clamp for metrics or serialization.
pub fn base_forward(x: &ImagePatch, ckpt: &Checkpoint) -> Result<(ImagePatch, ForwardTrace)> {
    ckpt.require_role(&[Role::BaseR, Role::Incremental])?;
    let cfg = *ckpt.config.network()?;
    let net = BaseNet::new(cfg);
    let mut ctx = Ctx::new(&ckpt.params, Trainable::Frozen);
    let (y, trace) = net.forward(&mut ctx, x)?;
    let data = ctx
        .tape
        .value(y)
        .clone()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("decoder output is (3, h, w)");
    Ok((ImagePatch { data, id: format!("{}_restored", x.id) }, trace))
}

/// Evaluate the expanded network of a checkpoint on one new-task patch.
pub fn expanded_forward(x2: &ImagePatch, ckpt: &Checkpoint) -> Result<(ImagePatch, ForwardTrace)> {
    ckpt.require_role(&[Role::ExpandedH, Role::Incremental])?;
    let cfg = *ckpt.config.network()?;
    let net = IncrementalNet::new(cfg);
    let mut ctx = Ctx::new(&ckpt.params, Trainable::Frozen);
    let (y, trace) = net.expanded_forward(&mut ctx, x2)?;
    let data = ctx
        .tape
        .value(y)
        .clone()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("decoder output is (3, h, w)");
    Ok((ImagePatch { data, id: format!("{}_restored", x2.id) }, trace))
}

/// Evaluate a single-expert fork checkpoint on one patch.
pub fn single_expert_forward(x: &ImagePatch, ckpt: &Checkpoint) -> Result<ImagePatch> {
    ckpt.require_role(&[Role::SingleExpert])?;
    let cfg = *ckpt.config.network()?;
    let net = ForkNet::single(cfg);
    let mut ctx = Ctx::new(&ckpt.params, Trainable::Frozen);
    let y = net.forward_one(&mut ctx, x, 0)?;
    let data = ctx
        .tape
        .value(y)
        .clone()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("decoder output is (3, h, w)");
    Ok(ImagePatch { data, id: format!("{}_restored", x.id) })
}

/// Build a base-network checkpoint from fork-stage expert checkpoints.
/// Expert columns, extractor and decoder are copied; gates, attention,
/// Bi-SGUs and fusion are freshly initialized. With the `no_expert_init`
/// ablation everything is freshly initialized.
pub fn assemble_base(expert_ckpts: &[Checkpoint], cfg: NetworkConfig, seed: u64) -> Result<Checkpoint> {
    cfg.validate()?;
    let net = BaseNet::new(cfg);
    let mut params = net.init_params(seed);

    if !cfg.ablation.no_expert_init {
        if expert_ckpts.len() != cfg.n_experts {
            return Err(RestoreError::InvalidCheckpoint(format!(
                "need {} expert checkpoints, got {}",
                cfg.n_experts,
                expert_ckpts.len()
            )));
        }
        for (i, ck) in expert_ckpts.iter().enumerate() {
            ck.require_role(&[Role::SingleExpert])?;
            let ck_cfg = ck.config.network()?;
            if ck_cfg.m_blocks != cfg.m_blocks
                || ck_cfg.channels != cfg.channels
                || ck_cfg.ablation.use_se_instead_of_sk != cfg.ablation.use_se_instead_of_sk
            {
                return Err(RestoreError::InvalidCheckpoint(format!(
                    "expert checkpoint {i} architecture does not match"
                )));
            }
            params.copy_prefix(&ck.params, "fork.expert.", &format!("shared.expert{}.", i + 1))?;
        }
        params.copy_prefix(&expert_ckpts[0].params, "fork.extractor.", "base.extractor.")?;
        params.copy_prefix(&expert_ckpts[0].params, "fork.decoder.", "base.decoder.")?;
    }

    Ok(Checkpoint::new(Role::BaseR, ModelConfig::Network(cfg), params))
}

/// Grow an incremental model from a trained base checkpoint: shared and
/// base-private parameters are carried over, the expanded branch is fresh.
pub fn grow_incremental(base: &Checkpoint, seed: u64) -> Result<Checkpoint> {
    base.require_role(&[Role::BaseR])?;
    let cfg = *base.config.network()?;
    let net = IncrementalNet::new(cfg);
    let mut params = net.init_params(seed);
    let mut copied = 0;
    copied += params.copy_prefix(&base.params, "shared.", "shared.")?;
    copied += params.copy_prefix(&base.params, "base.", "base.")?;
    if copied != base.params.len() {
        return Err(RestoreError::InvalidCheckpoint(
            "base checkpoint has parameters outside shared./base.".into(),
        ));
    }
    Ok(Checkpoint::new(Role::Incremental, ModelConfig::Network(cfg), params))
}

/// Total scalar parameter count of a checkpoint.
pub fn count_params(ckpt: &Checkpoint) -> usize {
    ckpt.params.total_len()
}

/// Analytic FLOPs of the checkpoint's inference path at the given input size.
/// Convolutions and fully-connected layers count two per multiply-accumulate;
/// bias terms, nonlinearities and elementwise work are excluded.
pub fn count_flops(ckpt: &Checkpoint, h: usize, w: usize) -> Result<f64> {
    match (&ckpt.role, &ckpt.config) {
        (Role::BaseR, ModelConfig::Network(cfg)) => Ok(BaseNet::new(*cfg).flops(h, w)),
        (Role::ExpandedH | Role::Incremental, ModelConfig::Network(cfg)) => {
            Ok(IncrementalNet::new(*cfg).expanded_flops(h, w))
        }
        (Role::SingleExpert, ModelConfig::Network(cfg)) => {
            Ok(ForkNet::single(*cfg).flops_one(h, w))
        }
        (Role::GeneratorG, ModelConfig::Generator(cfg)) => {
            Ok(crate::gan::Generator::new(*cfg).flops(h, w))
        }
        (Role::DiscriminatorD, ModelConfig::Discriminator(cfg)) => {
            Ok(crate::gan::Discriminator::new(*cfg).flops(h, w))
        }
        _ => Err(RestoreError::InvalidCheckpoint(
            "role/config combination has no FLOP model".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::fd_gradient_check;
    use ndarray::IxDyn;

    fn tiny_cfg() -> NetworkConfig {
        NetworkConfig { n_experts: 2, m_blocks: 2, channels: 4, ..NetworkConfig::default() }
    }

    fn desk_cfg() -> NetworkConfig {
        NetworkConfig { n_experts: 3, m_blocks: 6, channels: 8, ..NetworkConfig::default() }
    }

    #[test]
    fn base_forward_zeroed_decoder_is_identity() {
        let cfg = tiny_cfg();
        let net = BaseNet::new(cfg);
        let params = net.init_params(3); // decoder head is zero-initialized
        let ckpt = Checkpoint::new(Role::BaseR, ModelConfig::Network(cfg), params);
        let x = ImagePatch::synthetic(16, 16, 1);
        let (y, _) = base_forward(&x, &ckpt).unwrap();
        assert_eq!(y.data, x.data);
    }

    #[test]
    fn base_forward_shape_contract() {
        let cfg = tiny_cfg();
        let net = BaseNet::new(cfg);
        let mut params = net.init_params(4);
        // non-trivial head
        params.set(
            "base.decoder.out.w",
            crate::params::he_normal(&[3, 4, 3, 3], 36, "base.decoder.out.w", 9),
        );
        let ckpt = Checkpoint::new(Role::BaseR, ModelConfig::Network(cfg), params);
        for (h, w) in [(16, 16), (16, 24)] {
            let x = ImagePatch::synthetic(h, w, 2);
            let (y, trace) = base_forward(&x, &ckpt).unwrap();
            assert_eq!(y.data.dim(), (3, h, w));
            assert!(y.data.iter().all(|v| v.is_finite()));
            for m in trace.attention_matrices() {
                m.validate().unwrap();
            }
            for (_, map) in &trace.gate_maps {
                assert!(map.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn base_forward_rejects_bad_dims_and_roles() {
        let cfg = tiny_cfg();
        let net = BaseNet::new(cfg);
        let ckpt = Checkpoint::new(Role::BaseR, ModelConfig::Network(cfg), net.init_params(5));
        let x = ImagePatch::synthetic(18, 16, 0);
        assert!(matches!(
            base_forward(&x, &ckpt),
            Err(RestoreError::ShapeMismatch(_))
        ));

        let bad_role = Checkpoint { role: Role::GeneratorG, ..ckpt };
        let x = ImagePatch::synthetic(16, 16, 0);
        assert!(matches!(
            base_forward(&x, &bad_role),
            Err(RestoreError::InvalidCheckpoint(_))
        ));
    }

    #[test]
    fn base_end_to_end_gradients_match_fd() {
        let cfg = tiny_cfg();
        let net = BaseNet::new(cfg);
        let mut params = net.init_params(6);
        params.set(
            "base.decoder.out.w",
            crate::params::he_normal(&[3, 4, 3, 3], 36, "e2e.head", 10),
        );
        let x = ImagePatch::synthetic(8, 8, 3);
        let target = ImagePatch::synthetic(8, 8, 4);
        let report = fd_gradient_check(
            &params,
            |s, train| {
                let mut ctx = Ctx::new(s, train);
                let (y, _) = net.forward(&mut ctx, &x).unwrap();
                let loss = ctx.tape.l1_loss(y, &target.data.clone().into_dyn());
                (ctx, loss)
            },
            1e-4,
            2,
            11,
        );
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }

    #[test]
    fn expanded_forward_zeroed_d2_is_identity_and_columns_sum_to_one() {
        let cfg = tiny_cfg();
        let net = IncrementalNet::new(cfg);
        let params = net.init_params(7);
        let ckpt = Checkpoint::new(Role::Incremental, ModelConfig::Network(cfg), params);
        let x2 = ImagePatch::synthetic(16, 16, 5);
        let (y2, trace) = expanded_forward(&x2, &ckpt).unwrap();
        assert_eq!(y2.data, x2.data);
        let m = trace.attn_v.unwrap();
        assert_eq!(m.dim(), (2, 1));
        for j in 0..m.dim().1 {
            let s: f64 = (0..2).map(|i| m[[i, j]]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn aggregate_one_hot_selects_and_uniform_averages() {
        let mk = |v: f64| ArrayD::from_elem(IxDyn(&[2, 3, 3]), v);
        let gated = vec![
            vec![mk(1.0), mk(2.0)],
            vec![mk(10.0), mk(20.0)],
            vec![mk(100.0), mk(200.0)],
        ];
        // one-hot on expert 2 for column 0, expert 1 for column 1
        let mut w = Array2::<f64>::zeros((3, 2));
        w[[1, 0]] = 1.0;
        w[[0, 1]] = 1.0;
        let attn = AttentionMatrix { weights: w };
        attn.validate().unwrap();
        let out = aggregate(&gated, &attn).unwrap();
        assert_eq!(out[0], mk(10.0));
        assert_eq!(out[1], mk(2.0));

        let uniform = AttentionMatrix {
            weights: Array2::from_elem((3, 2), 1.0 / 3.0),
        };
        let out = aggregate(&gated, &uniform).unwrap();
        for v in out[0].iter() {
            assert!((v - 37.0).abs() < 1e-12);
        }

        // linearity: doubling the features doubles the mixtures
        let doubled: Vec<Vec<ArrayD<f64>>> = gated
            .iter()
            .map(|row| row.iter().map(|a| a * 2.0).collect())
            .collect();
        let out2 = aggregate(&doubled, &uniform).unwrap();
        for (a, b) in out2[0].iter().zip(out[0].iter()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn uniform_attention_ablation_pins_weights_to_one() {
        let cfg = NetworkConfig {
            ablation: crate::params::AblationFlags { uniform_attention: true, ..Default::default() },
            ..tiny_cfg()
        };
        let net = BaseNet::new(cfg);
        let ckpt = Checkpoint::new(Role::BaseR, ModelConfig::Network(cfg), net.init_params(8));
        let x = ImagePatch::synthetic(16, 16, 6);
        let (_, trace) = base_forward(&x, &ckpt).unwrap();
        assert!(trace.attn_v.unwrap().iter().all(|v| *v == 1.0));
        assert!(trace.attn_f.unwrap().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn gate_ablations_change_the_parameter_set() {
        let full = BaseNet::new(tiny_cfg()).init_params(9);
        let no_s = BaseNet::new(NetworkConfig {
            ablation: crate::params::AblationFlags { no_s_gates: true, ..Default::default() },
            ..tiny_cfg()
        })
        .init_params(9);
        let no_all = BaseNet::new(NetworkConfig {
            ablation: crate::params::AblationFlags { no_gates: true, ..Default::default() },
            ..tiny_cfg()
        })
        .init_params(9);
        assert!(no_s.names().all(|n| !n.contains("gate_s")));
        assert!(no_s.names().any(|n| n.contains("gate_q")));
        assert!(no_all.names().all(|n| !n.contains("gate_")));
        assert!(full.names().any(|n| n.contains("gate_s")));
    }

    #[test]
    fn assemble_copies_expert_weights_bit_exactly() {
        let cfg = tiny_cfg();
        let fork = ForkNet::single(cfg);
        let ck1 = Checkpoint::new(Role::SingleExpert, ModelConfig::Network(cfg), fork.init_params(21));
        let ck2 = Checkpoint::new(Role::SingleExpert, ModelConfig::Network(cfg), fork.init_params(22));

        let base = assemble_base(&[ck1.clone(), ck2], cfg, 23).unwrap();
        let src = ck1.params.get("fork.expert.durb1.conv1.w").unwrap();
        let dst = base.params.get("shared.expert1.durb1.conv1.w").unwrap();
        assert_eq!(src, dst);
        let ext_src = ck1.params.get("fork.extractor.conv0.w").unwrap();
        let ext_dst = base.params.get("base.extractor.conv0.w").unwrap();
        assert_eq!(ext_src, ext_dst);

        // no_expert_init: freshly initialized, differs from the checkpoints
        let cfg_fresh = NetworkConfig {
            ablation: crate::params::AblationFlags { no_expert_init: true, ..Default::default() },
            ..cfg
        };
        let fresh = assemble_base(&[], cfg_fresh, 23).unwrap();
        assert_ne!(
            fresh.params.get("shared.expert1.durb1.conv1.w").unwrap(),
            src
        );
    }

    #[test]
    fn partition_is_disjoint_covering_and_stable() {
        let cfg = tiny_cfg();
        let base = assemble_base(
            &[],
            NetworkConfig {
                ablation: crate::params::AblationFlags { no_expert_init: true, ..Default::default() },
                ..cfg
            },
            31,
        )
        .unwrap();
        let inc = grow_incremental(
            &Checkpoint { config: ModelConfig::Network(cfg), ..base },
            32,
        )
        .unwrap();
        let p1 = partition_params(&inc).unwrap();
        let p2 = partition_params(&inc).unwrap();
        assert_eq!(p1.shared, p2.shared);
        assert_eq!(p1.total(), inc.params.len());
        assert!(p1.shared.is_disjoint(&p1.base_private));
        assert!(p1.shared.is_disjoint(&p1.expanded_private));
        assert!(p1.base_private.is_disjoint(&p1.expanded_private));

        assert!(p1.expanded_private.iter().any(|n| n.starts_with("expand.extractor.")));
        assert!(p1.expanded_private.iter().any(|n| n.starts_with("expand.decoder.")));
        assert!(p1.shared.iter().any(|n| n.starts_with("shared.expert1.durb1.")));
        assert!(p1.base_private.iter().any(|n| n.starts_with("base.decoder.")));

        // unknown names fail loudly
        let mut bad = inc.clone();
        bad.params.insert("rogue.w", ArrayD::zeros(IxDyn(&[1])));
        assert!(matches!(
            partition_params(&bad),
            Err(RestoreError::Partition(_))
        ));
    }

    #[test]
    fn partition_requires_incremental_role() {
        let cfg = tiny_cfg();
        let net = BaseNet::new(cfg);
        let ckpt = Checkpoint::new(Role::BaseR, ModelConfig::Network(cfg), net.init_params(33));
        assert!(matches!(
            partition_params(&ckpt),
            Err(RestoreError::InvalidCheckpoint(_))
        ));
    }

    #[test]
    fn flops_ratio_and_scaling() {
        let cfg = desk_cfg();
        let base = BaseNet::new(cfg);
        let inc = IncrementalNet::new(cfg);
        let fb = base.flops(63, 63);
        let fe = inc.expanded_flops(63, 63);
        let ratio = fe / fb;
        assert!(
            (1.18..=1.48).contains(&ratio),
            "expanded/base FLOPs ratio {ratio}"
        );

        // doubling C roughly quadruples conv FLOPs
        let cfg2 = NetworkConfig { channels: 16, ..cfg };
        let fb2 = BaseNet::new(cfg2).flops(63, 63);
        let scale = fb2 / fb;
        assert!((scale - 4.0).abs() < 0.2, "width doubling scale {scale}");
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_cfg();
        let net = BaseNet::new(cfg);
        let ckpt = Checkpoint::new(Role::BaseR, ModelConfig::Network(cfg), net.init_params(41));
        let x = ImagePatch::synthetic(16, 16, 7);
        let (a, _) = base_forward(&x, &ckpt).unwrap();
        let (b, _) = base_forward(&x, &ckpt).unwrap();
        assert_eq!(a.data, b.data);
    }
}
