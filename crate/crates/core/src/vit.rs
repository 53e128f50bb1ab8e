//! Encoder-only vision transformer hosting softmax or KArAt heads.
//!
//! Pre-norm blocks: `X + MHSA(LN(X))`, then `+ MLP(LN(·))` with a GELU MLP
//! of hidden width `mlp_ratio · d`. The class token is prepended before the
//! positional encoding is added, so the encoding covers `N = HW/p² + 1` rows.

use crate::attention::{
    attention_head_var, make_shared_params, Activation, KaratConfig, OperatorVars,
};
use crate::checkpoint::Checkpoint;
use crate::error::{KaratError, Result};
use crate::tape::{concat_cols, concat_rows, Tape, Var};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

#[derive(Clone, Debug, PartialEq)]
pub enum AttentionKind {
    Softmax,
    Karat(KaratConfig),
}

#[derive(Clone, Debug, PartialEq)]
pub struct VitConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub classes: usize,
    pub mlp_ratio: usize,
    pub attention: AttentionKind,
}

impl VitConfig {
    pub fn new(image_size: usize, channels: usize, patch: usize, dim: usize, heads: usize, depth: usize, classes: usize) -> Self {
        Self {
            image_size,
            channels,
            patch,
            dim,
            heads,
            depth,
            classes,
            mlp_ratio: 4,
            attention: AttentionKind::Softmax,
        }
    }

    /// d=64, h=2, L=4.
    pub fn micro(image_size: usize, channels: usize, patch: usize, classes: usize) -> Self {
        Self::new(image_size, channels, patch, 64, 2, 4, classes)
    }

    /// d=128, h=4, L=6.
    pub fn mini(image_size: usize, channels: usize, patch: usize, classes: usize) -> Self {
        Self::new(image_size, channels, patch, 128, 4, 6, classes)
    }

    pub fn tiny(classes: usize) -> Self {
        Self::new(224, 3, 16, 192, 3, 12, classes)
    }

    pub fn small(classes: usize) -> Self {
        Self::new(224, 3, 16, 384, 6, 12, classes)
    }

    pub fn base(classes: usize) -> Self {
        Self::new(224, 3, 16, 768, 12, 12, classes)
    }

    pub fn with_attention(mut self, attention: AttentionKind) -> Self {
        self.attention = attention;
        self
    }

    pub fn patches(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    /// Token count including the class token.
    pub fn tokens(&self) -> usize {
        self.patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let nonzero = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("patch", self.patch),
            ("dim", self.dim),
            ("heads", self.heads),
            ("depth", self.depth),
            ("classes", self.classes),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((k, _)) = nonzero.iter().find(|(_, v)| *v == 0) {
            return Err(KaratError::config(format!("model.{k} must be positive")));
        }
        if self.image_size % self.patch != 0 {
            return Err(KaratError::config(format!(
                "patch {} does not divide image size {}",
                self.patch, self.image_size
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(KaratError::config(format!(
                "heads {} do not divide dim {}",
                self.heads, self.dim
            )));
        }
        if let AttentionKind::Karat(k) = &self.attention {
            k.validate(self.tokens(), self.heads)?;
        }
        Ok(())
    }

    /// Closed-form parameter count of the softmax backbone.
    pub fn backbone_param_count(&self) -> usize {
        let d = self.dim;
        let hidden = self.mlp_ratio * d;
        let embed = self.patch_dim() * d + d + d + self.tokens() * d;
        let block = 2 * d + 4 * (d * d + d) + (d * hidden + hidden) + (hidden * d + d) + 2 * d;
        embed + self.depth * block + 2 * d + d * self.classes + self.classes
    }
}

/// Splits an `H×W×C` image into non-overlapping `p×p` patches.
///
/// Patches are numbered row-major; each row flattens its patch as
/// (row, column, channel) with channels fastest.
pub fn patchify(image: &Tensor, p: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(KaratError::dim(format!("image must be H×W×C, got {s:?}")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(KaratError::config(format!("patch {p} does not divide {h}×{w}")));
    }
    let (ph, pw) = (h / p, w / p);
    let mut out = Vec::with_capacity(h * w * c);
    let d = image.data();
    for by in 0..ph {
        for bx in 0..pw {
            for y in 0..p {
                let start = ((by * p + y) * w + bx * p) * c;
                out.extend_from_slice(&d[start..start + p * c]);
            }
        }
    }
    Tensor::new(vec![ph * pw, p * p * c], out)
}

/// Flat list of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
}

impl ParamStore {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.values.push(Arc::new(t));
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.values[i])
    }

    pub fn arc(&self, i: usize) -> Arc<Tensor> {
        Arc::clone(&self.values[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    /// All parameters concatenated in store order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.scalar_count());
        for t in &self.values {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.scalar_count() {
            return Err(KaratError::dim("flat parameter vector has the wrong length"));
        }
        let mut off = 0;
        for v in &mut self.values {
            let t = Arc::make_mut(v);
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct BlockSlots {
    ln1: (usize, usize),
    q: (usize, usize),
    k: (usize, usize),
    v: (usize, usize),
    o: (usize, usize),
    ln2: (usize, usize),
    fc1: (usize, usize),
    fc2: (usize, usize),
    /// Operator tensor indices per head, `None` for softmax heads.
    ops: Vec<Option<Vec<usize>>>,
}

#[derive(Clone, Debug)]
struct Slots {
    patch: (usize, usize),
    cls: usize,
    pos: usize,
    blocks: Vec<BlockSlots>,
    norm: (usize, usize),
    head: (usize, usize),
}

/// A transformer instance: geometry plus parameters.
#[derive(Clone, Debug)]
pub struct Vit {
    pub cfg: VitConfig,
    pub params: ParamStore,
    slots: Slots,
}

/// Per-forward switches.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    /// Post-activation matrices `[layer][head]` used instead of `σ(A)`.
    pub attention_override: Option<&'a [Vec<Tensor>]>,
}

/// Recorded forward pass of one image.
pub struct ForwardTrace<'t> {
    pub logits: Var<'t>,
    /// `(pre, post)` activation attention for every `[layer][head]`.
    pub attention: Vec<Vec<(Var<'t>, Var<'t>)>>,
}

impl Vit {
    pub fn new(cfg: VitConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let d = cfg.dim;
        let hidden = cfg.mlp_ratio * d;
        let n = cfg.tokens();
        const STD: f64 = 0.02;

        let linear = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize| {
            let w = store.push(format!("{name}/w"), Tensor::trunc_normal(&[fan_in, fan_out], STD, rng));
            let b = store.push(format!("{name}/b"), Tensor::zeros(&[fan_out]));
            (w, b)
        };
        let norm = |store: &mut ParamStore, name: &str| {
            let g = store.push(format!("{name}/g"), Tensor::filled(&[d], 1.0));
            let b = store.push(format!("{name}/b"), Tensor::zeros(&[d]));
            (g, b)
        };

        let patch = linear(&mut store, &mut rng, "patch", cfg.patch_dim(), d);
        let cls = store.push("cls".into(), Tensor::trunc_normal(&[1, d], STD, &mut rng));
        let pos = store.push("pos".into(), Tensor::randn(&[n, d], STD, &mut rng));

        let mut blocks = Vec::with_capacity(cfg.depth);
        for j in 0..cfg.depth {
            let p = format!("blocks/{j}");
            let ln1 = norm(&mut store, &format!("{p}/ln1"));
            let q = linear(&mut store, &mut rng, &format!("{p}/attn/q"), d, d);
            let k = linear(&mut store, &mut rng, &format!("{p}/attn/k"), d, d);
            let v = linear(&mut store, &mut rng, &format!("{p}/attn/v"), d, d);
            let o = linear(&mut store, &mut rng, &format!("{p}/attn/o"), d, d);
            let ln2 = norm(&mut store, &format!("{p}/ln2"));
            let fc1 = linear(&mut store, &mut rng, &format!("{p}/mlp/fc1"), d, hidden);
            let fc2 = linear(&mut store, &mut rng, &format!("{p}/mlp/fc2"), hidden, d);
            blocks.push(BlockSlots { ln1, q, k, v, o, ln2, fc1, fc2, ops: vec![None; cfg.heads] });
        }
        let norm_slots = norm(&mut store, "norm");
        let head = linear(&mut store, &mut rng, "head", d, cfg.classes);

        if let AttentionKind::Karat(kcfg) = &cfg.attention {
            let op_seed = rand::Rng::gen::<u64>(&mut rng);
            let shared = make_shared_params(kcfg, n, cfg.heads, cfg.depth, op_seed);
            let shapes = kcfg.operator_shapes(n);
            let mut set_slots: Vec<Option<Vec<usize>>> = vec![None; shared.sets.len()];
            for (j, block) in blocks.iter_mut().enumerate() {
                for h in 0..cfg.heads {
                    let Some(s) = shared.slot(j, h) else { continue };
                    if set_slots[s].is_none() {
                        let prefix = match kcfg.sharing {
                            crate::attention::Sharing::Universal => format!("op/H{h}"),
                            crate::attention::Sharing::Blockwise => format!("blocks/{j}/op/H{h}"),
                        };
                        let ids = shared.sets[s]
                            .tensors(kcfg.layout)
                            .into_iter()
                            .zip(&shapes)
                            .map(|(t, (name, _))| store.push(format!("{prefix}/{name}"), t.clone()))
                            .collect();
                        set_slots[s] = Some(ids);
                    }
                    block.ops[h] = set_slots[s].clone();
                }
            }
        }

        Ok(Self {
            cfg,
            params: store,
            slots: Slots { patch, cls, pos, blocks, norm: norm_slots, head },
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Parameters belonging to learnable attention operators.
    pub fn activation_param_count(&self) -> usize {
        (0..self.params.len())
            .filter(|&i| self.is_operator_param(i))
            .map(|i| self.params.get(i).numel())
            .sum()
    }

    pub fn is_operator_param(&self, i: usize) -> bool {
        let name = self.params.name(i);
        name.starts_with("op/") || name.contains("/op/")
    }

    /// Query and key projections (weights and biases).
    pub fn is_query_key_param(&self, i: usize) -> bool {
        let name = self.params.name(i);
        name.contains("/attn/q/") || name.contains("/attn/k/")
    }

    /// Store indices of the operator tensors used by `(layer, head)`.
    pub fn operator_indices(&self, layer: usize, head: usize) -> Option<&[usize]> {
        self.slots.blocks.get(layer)?.ops.get(head)?.as_deref()
    }

    /// One leaf per parameter tensor; `trainable(i)` decides which get gradients.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: impl Fn(usize) -> bool) -> Vec<Var<'t>> {
        (0..self.params.len())
            .map(|i| tape.leaf(self.params.arc(i), trainable(i)))
            .collect()
    }

    /// Image `H×W×C` to the token matrix entering the first block.
    pub fn embed_var<'t>(&self, tape: &'t Tape, vars: &[Var<'t>], image: &Tensor) -> Result<Var<'t>> {
        let c = &self.cfg;
        if image.shape() != [c.image_size, c.image_size, c.channels] {
            return Err(KaratError::dim(format!(
                "image shape {:?} does not match {}×{}×{}",
                image.shape(),
                c.image_size,
                c.image_size,
                c.channels
            )));
        }
        let patches = tape.constant(patchify(image, c.patch)?);
        let s = &self.slots;
        let emb = patches.matmul(vars[s.patch.0])?.add_row(vars[s.patch.1])?;
        concat_rows(&[vars[s.cls], emb])?.add(vars[s.pos])
    }

    /// One pre-norm encoder block.
    pub fn block_var<'t>(
        &self,
        tape: &'t Tape,
        vars: &[Var<'t>],
        layer: usize,
        x: Var<'t>,
        fixed: Option<&[Tensor]>,
        attn_out: Option<&mut Vec<(Var<'t>, Var<'t>)>>,
    ) -> Result<Var<'t>> {
        let b = &self.slots.blocks[layer];
        let lin = |x: Var<'t>, (w, bias): (usize, usize)| x.matmul(vars[w])?.add_row(vars[bias]);
        let h = x.layer_norm(vars[b.ln1.0], vars[b.ln1.1])?;
        let (q, k, v) = (lin(h, b.q)?, lin(h, b.k)?, lin(h, b.v)?);
        let dh = self.cfg.head_dim();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        let mut record = Vec::with_capacity(self.cfg.heads);
        for i in 0..self.cfg.heads {
            let (qi, ki, vi) = (q.slice_cols(i * dh, dh)?, k.slice_cols(i * dh, dh)?, v.slice_cols(i * dh, dh)?);
            let act = if let Some(fixed) = fixed {
                let m = fixed
                    .get(i)
                    .ok_or_else(|| KaratError::config(format!("no transferred attention for head {i}")))?;
                Activation::Fixed(tape.constant(m.clone()))
            } else {
                match (&self.cfg.attention, &b.ops[i]) {
                    (AttentionKind::Karat(kcfg), Some(ids)) => {
                        let ov: Vec<_> = ids.iter().map(|&id| vars[id]).collect();
                        Activation::Karat(kcfg, OperatorVars::from_vars(kcfg.layout, &ov))
                    }
                    _ => Activation::Softmax,
                }
            };
            let out = attention_head_var(qi, ki, vi, act)?;
            record.push((out.logits, out.attention));
            heads.push(out.output);
        }
        if let Some(sink) = attn_out {
            *sink = record;
        }
        let mhsa = lin(concat_cols(&heads)?, b.o)?;
        let x = x.add(mhsa)?;
        let h = x.layer_norm(vars[b.ln2.0], vars[b.ln2.1])?;
        let m = lin(lin(h, b.fc1)?.gelu(), b.fc2)?;
        x.add(m)
    }

    /// Full forward pass of one image on `tape`.
    pub fn forward_var<'t>(
        &self,
        tape: &'t Tape,
        vars: &[Var<'t>],
        image: &Tensor,
        opts: ForwardOptions<'_>,
    ) -> Result<ForwardTrace<'t>> {
        let mut x = self.embed_var(tape, vars, image)?;
        let mut attention = Vec::with_capacity(self.cfg.depth);
        for j in 0..self.cfg.depth {
            let fixed = match opts.attention_override {
                Some(all) => Some(
                    all.get(j)
                        .ok_or_else(|| KaratError::config(format!("no transferred attention for layer {j}")))?
                        .as_slice(),
                ),
                None => None,
            };
            let mut rec = Vec::new();
            x = self.block_var(tape, vars, j, x, fixed, Some(&mut rec))?;
            attention.push(rec);
        }
        let s = &self.slots;
        let cls = x.layer_norm(vars[s.norm.0], vars[s.norm.1])?.select_row(0)?;
        let logits = cls.matmul(vars[s.head.0])?.add_row(vars[s.head.1])?;
        Ok(ForwardTrace { logits, attention })
    }

    /// Logits `1×classes` for one image.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        self.forward_with(image, ForwardOptions::default())
    }

    pub fn forward_with(&self, image: &Tensor, opts: ForwardOptions<'_>) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.bind(&tape, |_| false);
        let trace = self.forward_var(&tape, &vars, image, opts)?;
        Ok((*trace.logits.value()).clone())
    }

    /// Logits `batch×classes`.
    pub fn forward_batch(&self, images: &[Tensor]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(images.len() * self.cfg.classes);
        for img in images {
            data.extend_from_slice(self.forward(img)?.data());
        }
        Tensor::new(vec![images.len(), self.cfg.classes], data)
    }

    /// Applies block `layer` to a token matrix `N×d`.
    pub fn block_forward(&self, layer: usize, x: &Tensor) -> Result<Tensor> {
        if layer >= self.cfg.depth {
            return Err(KaratError::config(format!("layer {layer} out of range")));
        }
        let tape = Tape::new();
        let vars = self.bind(&tape, |_| false);
        let xv = tape.constant(x.clone());
        Ok((*self.block_var(&tape, &vars, layer, xv, None, None)?.value()).clone())
    }

    /// Pre- and post-activation attention `[head]` of block `layer`.
    pub fn extract_attention(&self, image: &Tensor, layer: usize) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        if layer >= self.cfg.depth {
            return Err(KaratError::config(format!(
                "layer {layer} out of range for depth {}",
                self.cfg.depth
            )));
        }
        let all = self.extract_all_attention(image)?;
        Ok(all.into_iter().nth(layer).expect("layer in range"))
    }

    /// Pre- and post-activation attention for every block.
    pub fn extract_all_attention(&self, image: &Tensor) -> Result<Vec<(Vec<Tensor>, Vec<Tensor>)>> {
        let tape = Tape::new();
        let vars = self.bind(&tape, |_| false);
        let trace = self.forward_var(&tape, &vars, image, ForwardOptions::default())?;
        Ok(trace
            .attention
            .iter()
            .map(|heads| {
                heads
                    .iter()
                    .map(|(pre, post)| ((*pre.value()).clone(), (*post.value()).clone()))
                    .unzip()
            })
            .collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        for i in 0..self.params.len() {
            c.insert(self.params.name(i), self.params.get(i).clone());
        }
        c
    }

    /// Replaces parameters from `ckpt`; names and shapes must match exactly.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.len() != self.params.len() {
            return Err(KaratError::config(format!(
                "checkpoint holds {} tensors, model geometry needs {}",
                ckpt.len(),
                self.params.len()
            )));
        }
        for i in 0..self.params.len() {
            let name = self.params.name(i).to_string();
            let t = ckpt
                .get(&name)
                .ok_or_else(|| KaratError::config(format!("checkpoint lacks {name}")))?;
            if t.shape() != self.params.get(i).shape() {
                return Err(KaratError::config(format!(
                    "checkpoint tensor {name} has shape {:?}, model needs {:?}",
                    t.shape(),
                    self.params.get(i).shape()
                )));
            }
            *self.params.get_mut(i) = t.clone();
        }
        Ok(())
    }
}

/// Writes pre/post attention of every block and head as `attn/{pre,post}/L{j}/H{i}`.
pub fn attention_dump(all: &[(Vec<Tensor>, Vec<Tensor>)]) -> Checkpoint {
    let mut c = Checkpoint::new();
    for (j, (pre, post)) in all.iter().enumerate() {
        for (i, t) in pre.iter().enumerate() {
            c.insert(format!("attn/pre/L{j}/H{i}"), t.clone());
        }
        for (i, t) in post.iter().enumerate() {
            c.insert(format!("attn/post/L{j}/H{i}"), t.clone());
        }
    }
    c
}
