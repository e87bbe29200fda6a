//! Divided space-time video transformer with a projection head.

mod config;
pub mod posenc;


use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use config::ModelConfig;

use crate::error::{Error, Result};
use crate::frames::Frames;
use crate::tensor::{Graph, ParamStore, ParamVars, Scalar, Tensor, Var};

/// Patch tokens `[T, N, D]` plus the single class token `[1, D]`.
#[derive(Clone, Copy, Debug)]
pub struct TokenGrid {
    pub patches: Var,
    pub cls: Var,
    pub frames: usize,
    pub rows: usize,
    pub cols: usize,
}

impl TokenGrid {
    pub fn patches_per_frame(&self) -> usize {
        self.rows * self.cols
    }

    pub fn token_count(&self) -> usize {
        self.frames * self.patches_per_frame() + 1
    }
}

/// Result of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// Head output `[1, K]` (logits).
    pub logits: Var,
    /// Unit-norm bottleneck `[1, bottleneck]`.
    pub bottleneck: Var,
    /// Final class token `[1, D]` after the closing layer norm.
    pub cls: Var,
}

/// Cut every frame into `P × P` patches flattened in `(channel, y, x)` order.
/// Returns `[T, N, 3P²]` with patches in row-major grid order, and the grid.
pub fn patchify<F: Scalar>(frames: &Frames, p: usize) -> Result<(Tensor<F>, usize, usize)> {
    let (h, w) = (frames.height(), frames.width());
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape(format!(
            "view {h}×{w} is not divisible by patch size {p}"
        )));
    }
    let (rows, cols) = (h / p, w / p);
    let t = frames.len();
    let dim = 3 * p * p;
    let mut out = Vec::with_capacity(t * rows * cols * dim);
    for ti in 0..t {
        for gy in 0..rows {
            for gx in 0..cols {
                for c in 0..3 {
                    for py in 0..p {
                        for px in 0..p {
                            out.push(F::from_f64(frames.at(ti, c, gy * p + py, gx * p + px) as f64));
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::new(vec![t, rows * cols, dim], out)?, rows, cols))
}

fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, std: f64, n: usize) -> Vec<f32> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break v as f32;
            }
        })
        .collect()
}

/// The backbone plus head. Holds only the configuration; parameters live in a
/// [`ParamStore`].
#[derive(Clone, Debug)]
pub struct VideoTransformer {
    config: ModelConfig,
}

impl VideoTransformer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(VideoTransformer { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Fresh parameters: truncated normal weights (`init_std`), unit layer-norm
    /// gains, zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore<f32> {
        let c = &self.config;
        let d = c.embed_dim;
        let std = c.init_std;
        let mut p = ParamStore::new();
        let weight = |p: &mut ParamStore<f32>, name: String, shape: Vec<usize>, rng: &mut R| {
            let n = shape.iter().product();
            p.insert(name, Tensor::new(shape, trunc_normal(rng, std, n)).expect("valid shape"));
        };
        let zeros = |p: &mut ParamStore<f32>, name: String, n: usize| {
            p.insert(name, Tensor::zeros(vec![n]));
        };
        let norm = |p: &mut ParamStore<f32>, prefix: &str| {
            p.insert(format!("{prefix}.gamma"), Tensor::full(vec![d], 1.0));
            p.insert(format!("{prefix}.beta"), Tensor::zeros(vec![d]));
        };

        let pd = 3 * c.patch_size * c.patch_size;
        weight(&mut p, "patch_embed.weight".into(), vec![pd, d], rng);
        zeros(&mut p, "patch_embed.bias".into(), d);
        weight(&mut p, "cls_token".into(), vec![1, d], rng);
        weight(&mut p, "pos_spatial".into(), vec![c.max_patches(), d], rng);
        weight(&mut p, "pos_temporal".into(), vec![c.max_frames, d], rng);

        for i in 0..c.depth {
            for (n, a) in [("norm_t", "attn_t"), ("norm_s", "attn_s")] {
                norm(&mut p, &format!("blocks.{i}.{n}"));
                weight(&mut p, format!("blocks.{i}.{a}.qkv.weight"), vec![d, 3 * d], rng);
                zeros(&mut p, format!("blocks.{i}.{a}.qkv.bias"), 3 * d);
                weight(&mut p, format!("blocks.{i}.{a}.proj.weight"), vec![d, d], rng);
                zeros(&mut p, format!("blocks.{i}.{a}.proj.bias"), d);
            }
            norm(&mut p, &format!("blocks.{i}.norm_mlp"));
            let hidden = c.mlp_ratio * d;
            weight(&mut p, format!("blocks.{i}.mlp.fc1.weight"), vec![d, hidden], rng);
            zeros(&mut p, format!("blocks.{i}.mlp.fc1.bias"), hidden);
            weight(&mut p, format!("blocks.{i}.mlp.fc2.weight"), vec![hidden, d], rng);
            zeros(&mut p, format!("blocks.{i}.mlp.fc2.bias"), d);
        }
        norm(&mut p, "norm");

        let (hd, bn) = (c.head_hidden_dim, c.head_bottleneck_dim);
        weight(&mut p, "head.fc1.weight".into(), vec![d, hd], rng);
        zeros(&mut p, "head.fc1.bias".into(), hd);
        weight(&mut p, "head.fc2.weight".into(), vec![hd, hd], rng);
        zeros(&mut p, "head.fc2.bias".into(), hd);
        weight(&mut p, "head.fc3.weight".into(), vec![hd, bn], rng);
        zeros(&mut p, "head.fc3.bias".into(), bn);
        weight(&mut p, "head.last.weight".into(), vec![bn, c.out_dim], rng);
        p
    }

    /// Embed a view: linear patch map, spatial and temporal encodings resampled
    /// to the view, class token alongside.
    pub fn patchify_and_embed<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        vars: &ParamVars,
        view: &Frames,
    ) -> Result<TokenGrid> {
        let (patches, rows, cols) = patchify::<F>(view, self.config.patch_size)?;
        let side = self.config.grid_side();
        let table = vars.get("pos_spatial")?;
        if rows > side || cols > side {
            return Err(Error::shape(format!(
                "view {}×{} exceeds the spatial capacity {}",
                view.height(),
                view.width(),
                self.config.spatial_capacity
            )));
        }
        let pos = posenc::spatial_slice(g, table, rows, cols)?;
        self.embed_patches(g, vars, patches, rows, cols, pos)
    }

    /// Embed already-cut patches `[T, N, 3P²]` with an explicit spatial
    /// encoding `[N, D]`.
    pub fn embed_patches<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        vars: &ParamVars,
        patches: Tensor<F>,
        rows: usize,
        cols: usize,
        spatial_pos: Var,
    ) -> Result<TokenGrid> {
        let d = self.config.embed_dim;
        let shape = patches.shape().to_vec();
        let t = shape[0];
        if shape.len() != 3 || shape[1] != rows * cols || shape[2] != 3 * self.config.patch_size.pow(2) {
            return Err(Error::shape(format!(
                "patches {shape:?} do not match a {rows}×{cols} grid of {}-pixel patches",
                self.config.patch_size
            )));
        }
        if t > self.config.max_frames {
            return Err(Error::shape(format!(
                "{t} frames exceed the temporal capacity {}",
                self.config.max_frames
            )));
        }
        let x = g.constant(patches);
        let x = linear(g, vars, "patch_embed", x, true)?;
        let x = g.add(x, spatial_pos)?;
        let tp = posenc::temporal_slice(g, vars.get("pos_temporal")?, t)?;
        let tp = g.reshape(tp, &[t, 1, d])?;
        let x = g.add(x, tp)?;
        Ok(TokenGrid {
            patches: x,
            cls: vars.get("cls_token")?,
            frames: t,
            rows,
            cols,
        })
    }

    /// One divided space-time block: temporal attention at each spatial index,
    /// spatial attention within each frame, then the MLP, each with a residual.
    /// The class token skips temporal attention, joins spatial attention in
    /// every frame and takes the frame average of its updates.
    pub fn block_forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        vars: &ParamVars,
        index: usize,
        z: TokenGrid,
        mut trace: Option<&mut Vec<Var>>,
    ) -> Result<TokenGrid> {
        let c = &self.config;
        let (t, n, d) = (z.frames, z.patches_per_frame(), c.embed_dim);
        let eps = F::from_f64(c.layer_norm_eps);
        let pre = format!("blocks.{index}");
        check_dims(g, z, d)?;

        // time
        let x = g.permute(z.patches, &[1, 0, 2])?;
        let h = layer_norm(g, vars, &format!("{pre}.norm_t"), x, eps)?;
        let a = self.attention(g, vars, &format!("{pre}.attn_t"), h, trace.as_deref_mut())?;
        let a = g.permute(a, &[1, 0, 2])?;
        let patches = g.add(z.patches, a)?;

        // space
        let cls3 = g.reshape(z.cls, &[1, 1, d])?;
        let cls3 = g.expand(cls3, &[t, 1, d])?;
        let x = g.concat(&[cls3, patches], 1)?;
        let h = layer_norm(g, vars, &format!("{pre}.norm_s"), x, eps)?;
        let a = self.attention(g, vars, &format!("{pre}.attn_s"), h, trace.as_deref_mut())?;
        let a_cls = g.narrow(a, 1, 0, 1)?;
        let a_cls = g.mean_axis(a_cls, 0)?;
        let a_cls = g.reshape(a_cls, &[1, d])?;
        let a_patch = g.narrow(a, 1, 1, n)?;
        let cls = g.add(z.cls, a_cls)?;
        let patches = g.add(patches, a_patch)?;

        // mlp over all tokens at once
        let flat = g.reshape(patches, &[t * n, d])?;
        let all = g.concat(&[cls, flat], 0)?;
        let h = layer_norm(g, vars, &format!("{pre}.norm_mlp"), all, eps)?;
        let h = linear(g, vars, &format!("{pre}.mlp.fc1"), h, true)?;
        let h = g.gelu(h);
        let h = linear(g, vars, &format!("{pre}.mlp.fc2"), h, true)?;
        let all = g.add(all, h)?;
        let cls = g.narrow(all, 0, 0, 1)?;
        let flat = g.narrow(all, 0, 1, t * n)?;
        let patches = g.reshape(flat, &[t, n, d])?;

        Ok(TokenGrid { patches, cls, ..z })
    }

    /// Multi-head self-attention over the middle axis of `x: [S, L, D]`.
    /// When tracing, the attention probabilities `[S, heads, L, L]` are pushed.
    fn attention<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        vars: &ParamVars,
        prefix: &str,
        x: Var,
        trace: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let (s, l) = (g.shape(x)[0], g.shape(x)[1]);
        let d = self.config.embed_dim;
        let heads = self.config.num_heads;
        let dh = self.config.head_dim();

        let qkv = linear(g, vars, &format!("{prefix}.qkv"), x, true)?;
        let qkv = g.reshape(qkv, &[s, l, 3, heads, dh])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut part = |i: usize| -> Result<Var> {
            let v = g.narrow(qkv, 0, i, 1)?;
            g.reshape(v, &[s, heads, l, dh])
        };
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let kt = g.permute(k, &[0, 1, 3, 2])?;
        let scores = g.matmul(q, kt)?;
        let probs = g.softmax(scores, F::from_f64((dh as f64).sqrt()))?;
        if let Some(tr) = trace {
            tr.push(probs);
        }
        let out = g.matmul(probs, v)?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        let out = g.reshape(out, &[s, l, d])?;
        linear(g, vars, &format!("{prefix}.proj"), out, true)
    }

    /// Class token `[1, D]` → logits `[1, K]` through the three-layer MLP,
    /// unit-norm bottleneck and a map onto unit-norm prototypes (the columns
    /// of `head.last.weight`), so logits are cosine similarities.
    pub fn head_forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        vars: &ParamVars,
        cls: Var,
    ) -> Result<(Var, Var)> {
        let h = linear(g, vars, "head.fc1", cls, true)?;
        let h = g.gelu(h);
        let h = linear(g, vars, "head.fc2", h, true)?;
        let h = g.gelu(h);
        let h = linear(g, vars, "head.fc3", h, true)?;
        let bottleneck = g.l2_normalize(h, F::from_f64(1e-12))?;
        let w = g.permute(vars.get("head.last.weight")?, &[1, 0])?;
        let w = g.l2_normalize(w, F::from_f64(1e-12))?;
        let w = g.permute(w, &[1, 0])?;
        let logits = g.matmul(bottleneck, w)?;
        Ok((logits, bottleneck))
    }

    /// Blocks, closing layer norm and head on an embedded grid.
    pub fn forward_tokens<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        vars: &ParamVars,
        mut z: TokenGrid,
        mut trace: Option<&mut Vec<Var>>,
    ) -> Result<ModelOutput> {
        for i in 0..self.config.depth {
            z = self.block_forward(g, vars, i, z, trace.as_deref_mut())?;
        }
        let eps = F::from_f64(self.config.layer_norm_eps);
        let cls = layer_norm(g, vars, "norm", z.cls, eps)?;
        let (logits, bottleneck) = self.head_forward(g, vars, cls)?;
        Ok(ModelOutput {
            logits,
            bottleneck,
            cls,
        })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, vars: &ParamVars, view: &Frames) -> Result<ModelOutput> {
        let z = self.patchify_and_embed(g, vars, view)?;
        self.forward_tokens(g, vars, z, None)
    }

    pub fn forward_traced<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        vars: &ParamVars,
        view: &Frames,
        trace: &mut Vec<Var>,
    ) -> Result<ModelOutput> {
        let z = self.patchify_and_embed(g, vars, view)?;
        self.forward_tokens(g, vars, z, Some(trace))
    }

    /// Inference-only feature of one view: `(logits, class token)`.
    pub fn embed(&self, params: &ParamStore<f32>, view: &Frames) -> Result<(Vec<f32>, Vec<f32>)> {
        let mut g = Graph::inference();
        let vars = params.register(&mut g);
        let out = self.forward(&mut g, &vars, view)?;
        Ok((g.value(out.logits).to_vec(), g.value(out.cls).to_vec()))
    }
}

fn check_dims<F: Scalar>(g: &Graph<F>, z: TokenGrid, d: usize) -> Result<()> {
    let p = g.shape(z.patches);
    let n = z.patches_per_frame();
    if p != [z.frames, n, d] || g.shape(z.cls) != [1, d] {
        return Err(Error::shape(format!(
            "token grid {:?} + class {:?} does not match ({}, {n}, {d})",
            p,
            g.shape(z.cls),
            z.frames
        )));
    }
    Ok(())
}

fn linear<F: Scalar>(g: &mut Graph<F>, vars: &ParamVars, prefix: &str, x: Var, bias: bool) -> Result<Var> {
    let y = g.matmul(x, vars.get(&format!("{prefix}.weight"))?)?;
    if bias {
        g.add(y, vars.get(&format!("{prefix}.bias"))?)
    } else {
        Ok(y)
    }
}

fn layer_norm<F: Scalar>(g: &mut Graph<F>, vars: &ParamVars, prefix: &str, x: Var, eps: F) -> Result<Var> {
    let gamma = vars.get(&format!("{prefix}.gamma"))?;
    let beta = vars.get(&format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta, eps)
}
