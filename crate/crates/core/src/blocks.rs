//! Differentiable building blocks of the restorer: selective-kernel units,
//! dual-residual blocks, gate layers, attention, sequential gating units,
//! the two-scale feature extractor and the decoder.
//!
//! Every block owns its layer descriptions (names, shapes) and builds its
//! forward pass on a [`Ctx`]; the same descriptions drive parameter
//! initialization and analytic FLOP counting, so the three can never drift.

use ndarray::ArrayD;
use std::collections::{BTreeSet, HashMap};

use crate::autograd::{conv_out_len, Tape, VarId};
use crate::params::{he_normal, NetworkConfig, ParamStore};

/// Layer primitive: enough to initialize parameters, run the forward pass,
/// and count FLOPs analytically.
#[derive(Debug, Clone)]
pub enum LayerKind {
    Conv { cin: usize, cout: usize, k: usize, stride: usize, pad: [usize; 4], dilation: usize },
    ConvT { cin: usize, cout: usize, k: usize, stride: usize, pad: usize, out_pad: usize },
    Linear { fin: usize, fout: usize },
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub zero_init: bool,
}

impl Layer {
    pub fn conv(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        let p = (k - 1) / 2;
        Self {
            name: name.into(),
            kind: LayerKind::Conv { cin, cout, k, stride, pad: [p; 4], dilation: 1 },
            zero_init: false,
        }
    }

    pub fn conv_dilated(name: impl Into<String>, cin: usize, cout: usize, k: usize, dilation: usize) -> Self {
        let p = dilation * (k - 1) / 2;
        Self {
            name: name.into(),
            kind: LayerKind::Conv { cin, cout, k, stride: 1, pad: [p; 4], dilation },
            zero_init: false,
        }
    }

    pub fn conv_pad(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize, pad: [usize; 4]) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Conv { cin, cout, k, stride, pad, dilation: 1 },
            zero_init: false,
        }
    }

    pub fn conv_t(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, out_pad: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::ConvT { cin, cout, k, stride, pad, out_pad },
            zero_init: false,
        }
    }

    pub fn linear(name: impl Into<String>, fin: usize, fout: usize) -> Self {
        Self { name: name.into(), kind: LayerKind::Linear { fin, fout }, zero_init: false }
    }

    pub fn zeroed(mut self) -> Self {
        self.zero_init = true;
        self
    }

    /// Weight and bias shapes.
    pub fn shapes(&self) -> (Vec<usize>, Vec<usize>) {
        match &self.kind {
            LayerKind::Conv { cin, cout, k, .. } => (vec![*cout, *cin, *k, *k], vec![*cout]),
            LayerKind::ConvT { cin, cout, k, .. } => (vec![*cin, *cout, *k, *k], vec![*cout]),
            LayerKind::Linear { fin, fout } => (vec![*fout, *fin], vec![*fout]),
        }
    }

    fn fan_in(&self) -> usize {
        match &self.kind {
            LayerKind::Conv { cin, k, .. } => cin * k * k,
            LayerKind::ConvT { cin, k, .. } => cin * k * k,
            LayerKind::Linear { fin, .. } => *fin,
        }
    }

    pub fn init_into(&self, store: &mut ParamStore, seed: u64) {
        let (ws, bs) = self.shapes();
        let wname = format!("{}.w", self.name);
        let w = if self.zero_init {
            ArrayD::zeros(ndarray::IxDyn(&ws))
        } else {
            he_normal(&ws, self.fan_in(), &wname, seed)
        };
        store.insert(wname, w);
        store.insert(format!("{}.b", self.name), ArrayD::zeros(ndarray::IxDyn(&bs)));
    }

    pub fn param_count(&self) -> usize {
        let (ws, bs) = self.shapes();
        ws.iter().product::<usize>() + bs.iter().product::<usize>()
    }

    /// Output spatial size for a given input spatial size.
    pub fn out_hw(&self, hw: (usize, usize)) -> (usize, usize) {
        match &self.kind {
            LayerKind::Conv { k, stride, pad, dilation, .. } => (
                conv_out_len(hw.0, *k, *stride, pad[0], pad[1], *dilation),
                conv_out_len(hw.1, *k, *stride, pad[2], pad[3], *dilation),
            ),
            LayerKind::ConvT { k, stride, pad, out_pad, .. } => (
                (hw.0 - 1) * stride + k + out_pad - 2 * pad,
                (hw.1 - 1) * stride + k + out_pad - 2 * pad,
            ),
            LayerKind::Linear { .. } => hw,
        }
    }

    /// Analytic FLOPs at a given input spatial size: two per multiply-accumulate,
    /// bias and elementwise work excluded.
    pub fn flops(&self, hw: (usize, usize)) -> f64 {
        match &self.kind {
            LayerKind::Conv { cin, cout, k, .. } => {
                let (ho, wo) = self.out_hw(hw);
                2.0 * (k * k * cin * cout * ho * wo) as f64
            }
            LayerKind::ConvT { cin, cout, k, .. } => {
                2.0 * (k * k * cin * cout * hw.0 * hw.1) as f64
            }
            LayerKind::Linear { fin, fout } => 2.0 * (fin * fout) as f64,
        }
    }

    pub fn fwd(&self, ctx: &mut Ctx, x: VarId) -> VarId {
        let w = ctx.param(&format!("{}.w", self.name));
        let b = ctx.param(&format!("{}.b", self.name));
        match &self.kind {
            LayerKind::Conv { stride, pad, dilation, .. } => {
                ctx.tape.conv2d(w, b, x, *stride, *pad, *dilation)
            }
            LayerKind::ConvT { stride, pad, out_pad, .. } => {
                ctx.tape.conv_t2d(w, b, x, *stride, *pad, *out_pad)
            }
            LayerKind::Linear { .. } => ctx.tape.linear(w, b, x),
        }
    }
}

/// Which parameters are trainable when building a graph.
#[derive(Clone, Copy)]
pub enum Trainable<'a> {
    All,
    Frozen,
    Subset(&'a BTreeSet<String>),
}

/// Graph-building context: a tape plus the parameter store(s) backing it.
/// Multiple stores let one graph combine, say, a trainable generator with a
/// frozen discriminator and a frozen restorer.
pub struct Ctx<'a> {
    pub tape: Tape,
    sources: Vec<(&'a ParamStore, Trainable<'a>)>,
    cache: HashMap<String, VarId>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, trainable: Trainable<'a>) -> Self {
        Self::multi(vec![(store, trainable)])
    }

    pub fn multi(sources: Vec<(&'a ParamStore, Trainable<'a>)>) -> Self {
        Self { tape: Tape::new(), sources, cache: HashMap::new() }
    }

    /// Fetch a parameter leaf; repeated fetches share one tape node so
    /// gradients from every use accumulate.
    pub fn param(&mut self, name: &str) -> VarId {
        if let Some(&id) = self.cache.get(name) {
            return id;
        }
        let (value, trainable) = self
            .sources
            .iter()
            .find_map(|(store, t)| store.get(name).map(|v| (v, *t)))
            .unwrap_or_else(|| panic!("missing parameter '{name}'"));
        let train = match trainable {
            Trainable::All => true,
            Trainable::Frozen => false,
            Trainable::Subset(set) => set.contains(name),
        };
        let value = value.clone();
        let id = if train {
            self.tape.param(name, value)
        } else {
            self.tape.constant(value)
        };
        self.cache.insert(name.to_string(), id);
        id
    }
}

/// Selective-kernel unit: two receptive-field branches (3x3 and 3x3 with
/// dilation 2) fused by per-channel softmax weights computed from a
/// global-average-pooled bottleneck (reduction 4, hidden floor 8).
#[derive(Debug, Clone)]
pub struct SkUnit {
    pub br_a: Layer,
    pub br_b: Layer,
    pub fc_reduce: Layer,
    pub fc_a: Layer,
    pub fc_b: Layer,
    slope: f64,
}

impl SkUnit {
    pub fn new(prefix: &str, c: usize, slope: f64) -> Self {
        let hidden = (c / 4).max(8);
        Self {
            br_a: Layer::conv(format!("{prefix}.br_a"), c, c, 3, 1),
            br_b: Layer::conv_dilated(format!("{prefix}.br_b"), c, c, 3, 2),
            fc_reduce: Layer::linear(format!("{prefix}.fc_reduce"), c, hidden),
            fc_a: Layer::linear(format!("{prefix}.fc_a"), hidden, c),
            fc_b: Layer::linear(format!("{prefix}.fc_b"), hidden, c),
            slope,
        }
    }

    pub fn layers(&self) -> Vec<&Layer> {
        vec![&self.br_a, &self.br_b, &self.fc_reduce, &self.fc_a, &self.fc_b]
    }

    /// Layers that make the unit output exactly zero when zeroed.
    pub fn identity_zero_layers(&self) -> Vec<&str> {
        vec![&self.br_a.name, &self.br_b.name]
    }

    pub fn forward(&self, ctx: &mut Ctx, x: VarId) -> VarId {
        self.forward_detail(ctx, x).0
    }

    /// Returns (output, branch-weight matrix [2, C]).
    pub fn forward_detail(&self, ctx: &mut Ctx, x: VarId) -> (VarId, VarId) {
        let a = self.br_a.fwd(ctx, x);
        let b = self.br_b.fwd(ctx, x);
        let u = ctx.tape.add(a, b);
        let s = ctx.tape.gap(u);
        let z0 = self.fc_reduce.fwd(ctx, s);
        let z = ctx.tape.leaky_relu(z0, self.slope);
        let la = self.fc_a.fwd(ctx, z);
        let lb = self.fc_b.fwd(ctx, z);
        let logits = ctx.tape.stack2(la, lb);
        let weights = ctx.tape.softmax_cols(logits);
        let wa = ctx.tape.row(weights, 0);
        let wb = ctx.tape.row(weights, 1);
        let sa = ctx.tape.chan_scale(a, wa);
        let sb = ctx.tape.chan_scale(b, wb);
        (ctx.tape.add(sa, sb), weights)
    }

    pub fn flops(&self, hw: (usize, usize)) -> f64 {
        self.layers().iter().map(|l| l.flops(hw)).sum()
    }
}

/// Squeeze-excitation refinement unit (the `use_se_instead_of_sk` ablation).
#[derive(Debug, Clone)]
pub struct SeUnit {
    pub conv: Layer,
    pub fc1: Layer,
    pub fc2: Layer,
    slope: f64,
}

impl SeUnit {
    pub fn new(prefix: &str, c: usize, slope: f64) -> Self {
        let hidden = (c / 4).max(8);
        Self {
            conv: Layer::conv(format!("{prefix}.conv"), c, c, 3, 1),
            fc1: Layer::linear(format!("{prefix}.fc1"), c, hidden),
            fc2: Layer::linear(format!("{prefix}.fc2"), hidden, c),
            slope,
        }
    }

    pub fn layers(&self) -> Vec<&Layer> {
        vec![&self.conv, &self.fc1, &self.fc2]
    }

    pub fn forward(&self, ctx: &mut Ctx, x: VarId) -> VarId {
        let t = self.conv.fwd(ctx, x);
        let s = ctx.tape.gap(t);
        let z0 = self.fc1.fwd(ctx, s);
        let z = ctx.tape.leaky_relu(z0, self.slope);
        let w0 = self.fc2.fwd(ctx, z);
        let w = ctx.tape.sigmoid(w0);
        ctx.tape.chan_scale(t, w)
    }

    pub fn flops(&self, hw: (usize, usize)) -> f64 {
        self.layers().iter().map(|l| l.flops(hw)).sum()
    }
}

#[derive(Debug, Clone)]
pub enum RefineUnit {
    Sk(SkUnit),
    Se(SeUnit),
}

impl RefineUnit {
    fn new(prefix: &str, c: usize, cfg: &NetworkConfig) -> Self {
        if cfg.ablation.use_se_instead_of_sk {
            RefineUnit::Se(SeUnit::new(prefix, c, cfg.leaky_slope))
        } else {
            RefineUnit::Sk(SkUnit::new(prefix, c, cfg.leaky_slope))
        }
    }

    pub fn layers(&self) -> Vec<&Layer> {
        match self {
            RefineUnit::Sk(u) => u.layers(),
            RefineUnit::Se(u) => u.layers(),
        }
    }

    fn identity_zero_layers(&self) -> Vec<&str> {
        match self {
            RefineUnit::Sk(u) => u.identity_zero_layers(),
            RefineUnit::Se(u) => vec![&u.conv.name],
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: VarId) -> VarId {
        match self {
            RefineUnit::Sk(u) => u.forward(ctx, x),
            RefineUnit::Se(u) => u.forward(ctx, x),
        }
    }

    fn flops(&self, hw: (usize, usize)) -> f64 {
        match self {
            RefineUnit::Sk(u) => u.flops(hw),
            RefineUnit::Se(u) => u.flops(hw),
        }
    }
}

/// Dual-residual block on a two-scale feature pair (u at 1/2, p at 1/4).
///
/// Path 1 refines u through conv + refine unit with a residual from u.
/// Path 2 projects the refined u down with a stride-2 conv, adds p, applies
/// the output conv, and adds the residual from p.
#[derive(Debug, Clone)]
pub struct Durb {
    pub conv1: Layer,
    pub refine: RefineUnit,
    pub down: Layer,
    pub out_conv: Layer,
    slope: f64,
}

impl Durb {
    pub fn new(prefix: &str, cfg: &NetworkConfig) -> Self {
        let (c, c2) = cfg.widths();
        Self {
            conv1: Layer::conv(format!("{prefix}.conv1"), c, c, 3, 1),
            refine: RefineUnit::new(&format!("{prefix}.refine"), c, cfg),
            down: Layer::conv(format!("{prefix}.down"), c, c2, 3, 2),
            out_conv: Layer::conv(format!("{prefix}.out_conv"), c2, c2, 3, 1),
            slope: cfg.leaky_slope,
        }
    }

    pub fn layers(&self) -> Vec<&Layer> {
        let mut v = vec![&self.conv1];
        v.extend(self.refine.layers());
        v.push(&self.down);
        v.push(&self.out_conv);
        v
    }

    /// Zeroing these layers makes the block an exact identity.
    pub fn identity_zero_layers(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .refine
            .identity_zero_layers()
            .into_iter()
            .map(String::from)
            .collect();
        v.push(self.out_conv.name.clone());
        v
    }

    pub fn forward(&self, ctx: &mut Ctx, u_prev: VarId, p_prev: VarId) -> (VarId, VarId) {
        let c1 = self.conv1.fwd(ctx, u_prev);
        let c1a = ctx.tape.leaky_relu(c1, self.slope);
        let t = self.refine.forward(ctx, c1a);
        let u = ctx.tape.add(u_prev, t);

        let d0 = self.down.fwd(ctx, u);
        let d = ctx.tape.leaky_relu(d0, self.slope);
        let s = ctx.tape.add(d, p_prev);
        let t2 = self.out_conv.fwd(ctx, s);
        let p = ctx.tape.add(p_prev, t2);
        (u, p)
    }

    pub fn flops(&self, h_hw: (usize, usize)) -> f64 {
        let g_hw = self.down.out_hw(h_hw);
        self.conv1.flops(h_hw)
            + self.refine.flops(h_hw)
            + self.down.flops(h_hw)
            + self.out_conv.flops(g_hw)
    }
}

/// A column of M dual-residual blocks specializing in one degradation factor.
#[derive(Debug, Clone)]
pub struct Expert {
    pub blocks: Vec<Durb>,
}

impl Expert {
    pub fn new(prefix: &str, cfg: &NetworkConfig) -> Self {
        let blocks = (1..=cfg.m_blocks)
            .map(|j| Durb::new(&format!("{prefix}.durb{j}"), cfg))
            .collect();
        Self { blocks }
    }

    pub fn layers(&self) -> Vec<&Layer> {
        self.blocks.iter().flat_map(|b| b.layers()).collect()
    }

    /// Run all M blocks; returns the even-indexed (1-based) u and p features.
    pub fn forward_selected(&self, ctx: &mut Ctx, h: VarId, g: VarId) -> (Vec<VarId>, Vec<VarId>) {
        let (mut u, mut p) = (h, g);
        let mut s = Vec::new();
        let mut q = Vec::new();
        for (j, block) in self.blocks.iter().enumerate() {
            let (nu, np) = block.forward(ctx, u, p);
            u = nu;
            p = np;
            if (j + 1) % 2 == 0 {
                s.push(u);
                q.push(p);
            }
        }
        (s, q)
    }

    /// Final (u, p) pair after all M blocks, for the fork-stage head.
    pub fn forward_final(&self, ctx: &mut Ctx, h: VarId, g: VarId) -> (VarId, VarId) {
        let (mut u, mut p) = (h, g);
        for block in &self.blocks {
            let (nu, np) = block.forward(ctx, u, p);
            u = nu;
            p = np;
        }
        (u, p)
    }

    pub fn flops(&self, h_hw: (usize, usize)) -> f64 {
        self.blocks.iter().map(|b| b.flops(h_hw)).sum()
    }
}

/// Pixel-level gate: the input image (resized), a global feature and the
/// intermediate feature are concatenated and squeezed to one sigmoid map
/// that modulates the feature.
#[derive(Debug, Clone)]
pub struct GateLayer {
    pub conv1: Layer,
    pub conv2: Layer,
    slope: f64,
}

impl GateLayer {
    pub fn new(prefix: &str, c_global: usize, c_feat: usize, slope: f64) -> Self {
        Self {
            conv1: Layer::conv(format!("{prefix}.conv1"), 3 + c_global + c_feat, c_feat, 3, 1),
            conv2: Layer::conv(format!("{prefix}.conv2"), c_feat, 1, 1, 1),
            slope,
        }
    }

    pub fn layers(&self) -> Vec<&Layer> {
        vec![&self.conv1, &self.conv2]
    }

    /// Returns (gated feature, gate map in [0, 1]).
    pub fn forward(&self, ctx: &mut Ctx, global: VarId, image: VarId, feat: VarId) -> (VarId, VarId) {
        let cat = ctx.tape.concat_channels(&[image, global, feat]);
        let h0 = self.conv1.fwd(ctx, cat);
        let h = ctx.tape.leaky_relu(h0, self.slope);
        let m0 = self.conv2.fwd(ctx, h);
        let map = ctx.tape.sigmoid(m0);
        let gated = ctx.tape.mul_map(feat, map);
        (gated, map)
    }

    pub fn flops(&self, hw: (usize, usize)) -> f64 {
        self.conv1.flops(hw) + self.conv2.flops(hw)
    }
}

/// Expert-mixing attention: GAP of the quarter-scale global feature through
/// two fully-connected layers, reshaped (rows, cols) and softmaxed over rows
/// per column, so each column is a probability vector over experts.
#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub fc1: Layer,
    pub fc2: Layer,
    pub rows: usize,
    pub cols: usize,
    slope: f64,
}

impl AttentionLayer {
    pub fn new(prefix: &str, c_in: usize, rows: usize, cols: usize, slope: f64) -> Self {
        let hidden = rows * cols;
        Self {
            fc1: Layer::linear(format!("{prefix}.fc1"), c_in, hidden),
            fc2: Layer::linear(format!("{prefix}.fc2"), hidden, rows * cols),
            rows,
            cols,
            slope,
        }
    }

    pub fn layers(&self) -> Vec<&Layer> {
        vec![&self.fc1, &self.fc2]
    }

    pub fn forward(&self, ctx: &mut Ctx, g_global: VarId) -> VarId {
        let s = ctx.tape.gap(g_global);
        let z0 = self.fc1.fwd(ctx, s);
        let z = ctx.tape.leaky_relu(z0, self.slope);
        let logits = self.fc2.fwd(ctx, z);
        let mat = ctx.tape.reshape(logits, &[self.rows, self.cols]);
        ctx.tape.softmax_cols(mat)
    }

    pub fn flops(&self) -> f64 {
        self.fc1.flops((1, 1)) + self.fc2.flops((1, 1))
    }
}

/// Sequential gating unit: out = sigmoid(conv_a(f_a)) * f_a + sigmoid(conv_b(f_a)) * f_b.
/// With `shared_sgu_gate` both terms reuse conv_a.
#[derive(Debug, Clone)]
pub struct Sgu {
    pub conv_a: Layer,
    pub conv_b: Option<Layer>,
}

impl Sgu {
    pub fn new(prefix: &str, c: usize, shared_gate: bool) -> Self {
        Self {
            conv_a: Layer::conv(format!("{prefix}.conv_a"), c, c, 3, 1),
            conv_b: (!shared_gate).then(|| Layer::conv(format!("{prefix}.conv_b"), c, c, 3, 1)),
        }
    }

    pub fn layers(&self) -> Vec<&Layer> {
        let mut v = vec![&self.conv_a];
        if let Some(b) = &self.conv_b {
            v.push(b);
        }
        v
    }

    pub fn forward(&self, ctx: &mut Ctx, f_active: VarId, f_passive: VarId) -> VarId {
        let ga0 = self.conv_a.fwd(ctx, f_active);
        let ga = ctx.tape.sigmoid(ga0);
        let gb0 = self.conv_b.as_ref().unwrap_or(&self.conv_a).fwd(ctx, f_active);
        let gb = ctx.tape.sigmoid(gb0);
        let ta = ctx.tape.mul(ga, f_active);
        let tb = ctx.tape.mul(gb, f_passive);
        ctx.tape.add(ta, tb)
    }

    pub fn flops(&self, hw: (usize, usize)) -> f64 {
        // with a shared gate the convolution still runs twice
        2.0 * self.conv_a.flops(hw)
    }
}

/// Bidirectional fold of SGUs over a feature sequence, fused by one conv;
/// or plain concat + conv under the `concat_instead_of_bisgu` ablation.
#[derive(Debug, Clone)]
pub enum SequenceFuser {
    BiSgu { fwd: Sgu, bwd: Sgu, fuse: Layer },
    Concat { fuse: Layer },
}

impl SequenceFuser {
    pub fn new(prefix: &str, c: usize, seq_len: usize, cfg: &NetworkConfig) -> Self {
        if cfg.ablation.concat_instead_of_bisgu {
            SequenceFuser::Concat {
                fuse: Layer::conv(format!("{prefix}.fuse"), seq_len * c, c, 3, 1),
            }
        } else {
            SequenceFuser::BiSgu {
                fwd: Sgu::new(&format!("{prefix}.fwd"), c, cfg.shared_sgu_gate),
                bwd: Sgu::new(&format!("{prefix}.bwd"), c, cfg.shared_sgu_gate),
                fuse: Layer::conv(format!("{prefix}.fuse"), 2 * c, c, 3, 1),
            }
        }
    }

    pub fn layers(&self) -> Vec<&Layer> {
        match self {
            SequenceFuser::BiSgu { fwd, bwd, fuse } => {
                let mut v = fwd.layers();
                v.extend(bwd.layers());
                v.push(fuse);
                v
            }
            SequenceFuser::Concat { fuse } => vec![fuse],
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, seq: &[VarId]) -> VarId {
        assert!(!seq.is_empty(), "sequence fuser needs at least one feature");
        match self {
            SequenceFuser::BiSgu { fwd, bwd, fuse } => {
                // forward fold: SGU(v_K, SGU(v_{K-1}, ... SGU(v_2, v_1)))
                let mut f = seq[0];
                for &v in &seq[1..] {
                    f = fwd.forward(ctx, v, f);
                }
                // backward fold: SGU(v_1, SGU(v_2, ... SGU(v_{K-1}, v_K)))
                let mut b = seq[seq.len() - 1];
                for &v in seq[..seq.len() - 1].iter().rev() {
                    b = bwd.forward(ctx, v, b);
                }
                let cat = ctx.tape.concat_channels(&[f, b]);
                fuse.fwd(ctx, cat)
            }
            SequenceFuser::Concat { fuse } => {
                let cat = ctx.tape.concat_channels(seq);
                fuse.fwd(ctx, cat)
            }
        }
    }

    pub fn flops(&self, hw: (usize, usize), seq_len: usize) -> f64 {
        match self {
            SequenceFuser::BiSgu { fwd, bwd, fuse } => {
                let folds = (seq_len.saturating_sub(1)) as f64;
                folds * (fwd.flops(hw) + bwd.flops(hw)) + fuse.flops(hw)
            }
            SequenceFuser::Concat { fuse } => fuse.flops(hw),
        }
    }
}

/// Two-scale feature extractor: full-resolution conv + activation, then a
/// stride-2 conv to the half-scale map h and another to the quarter-scale g.
#[derive(Debug, Clone)]
pub struct Extractor {
    pub conv0: Layer,
    pub conv1: Layer,
    pub conv2: Layer,
    slope: f64,
}

impl Extractor {
    pub fn new(prefix: &str, cfg: &NetworkConfig) -> Self {
        let (c, c2) = cfg.widths();
        Self {
            conv0: Layer::conv(format!("{prefix}.conv0"), 3, c, 3, 1),
            conv1: Layer::conv(format!("{prefix}.conv1"), c, c, 3, 2),
            conv2: Layer::conv(format!("{prefix}.conv2"), c, c2, 3, 2),
            slope: cfg.leaky_slope,
        }
    }

    pub fn layers(&self) -> Vec<&Layer> {
        vec![&self.conv0, &self.conv1, &self.conv2]
    }

    pub fn forward(&self, ctx: &mut Ctx, x: VarId) -> (VarId, VarId) {
        let a0 = self.conv0.fwd(ctx, x);
        let a = ctx.tape.leaky_relu(a0, self.slope);
        let h = self.conv1.fwd(ctx, a);
        let g = self.conv2.fwd(ctx, h);
        (h, g)
    }

    pub fn flops(&self, hw: (usize, usize)) -> f64 {
        let h_hw = self.conv1.out_hw(hw);
        self.conv0.flops(hw) + self.conv1.flops(hw) + self.conv2.flops(h_hw)
    }
}

/// Decoder: conv + PixelShuffle x2 to full resolution, conv to RGB, plus the
/// global residual from the input image. The output conv starts at zero so a
/// fresh decoder is an exact identity.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub up: Layer,
    pub out: Layer,
    slope: f64,
}

impl Decoder {
    pub fn new(prefix: &str, cfg: &NetworkConfig) -> Self {
        let c = cfg.channels;
        Self {
            up: Layer::conv(format!("{prefix}.up"), c, 4 * c, 3, 1),
            out: Layer::conv(format!("{prefix}.out"), c, 3, 3, 1).zeroed(),
            slope: cfg.leaky_slope,
        }
    }

    pub fn layers(&self) -> Vec<&Layer> {
        vec![&self.up, &self.out]
    }

    /// `x` is the (constant) input image var for the global residual.
    pub fn forward(&self, ctx: &mut Ctx, fused: VarId, x: VarId) -> VarId {
        let u = self.up.fwd(ctx, fused);
        let ps = ctx.tape.pixel_shuffle(u, 2);
        let a = ctx.tape.leaky_relu(ps, self.slope);
        let o = self.out.fwd(ctx, a);
        ctx.tape.add(o, x)
    }

    pub fn flops(&self, h_hw: (usize, usize)) -> f64 {
        let full = (h_hw.0 * 2, h_hw.1 * 2);
        self.up.flops(h_hw) + self.out.flops(full)
    }
}

/// Learnable x2 upsampling: conv to 4x channels then PixelShuffle.
#[derive(Debug, Clone)]
pub struct PixelUp {
    pub conv: Layer,
}

impl PixelUp {
    /// Upsamples from `cin` channels to `cout` channels at 2x resolution.
    pub fn new(prefix: &str, cin: usize, cout: usize) -> Self {
        Self { conv: Layer::conv(format!("{prefix}.conv"), cin, 4 * cout, 3, 1) }
    }

    pub fn layers(&self) -> Vec<&Layer> {
        vec![&self.conv]
    }

    pub fn forward(&self, ctx: &mut Ctx, x: VarId) -> VarId {
        let c = self.conv.fwd(ctx, x);
        ctx.tape.pixel_shuffle(c, 2)
    }

    pub fn flops(&self, hw: (usize, usize)) -> f64 {
        self.conv.flops(hw)
    }
}
