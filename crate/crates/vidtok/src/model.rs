//! The tokenizer architecture: patchify -> transformer feature encoder ->
//! cross-self triplane encoder -> coordinate-queried transformer decoder ->
//! patch pixels.
//!
//! The latent is a triplane z = [z_xy, z_yt, z_xt]: one content plane over
//! space x space and two motion planes over space x time. The decoder never
//! sees the video, only per-coordinate vectors read out of the planes by
//! bilinear interpolation.

use crate::data::Video;
use crate::diffcore::{multi_head_attention, split_axis, AxisQuery, BilinQuery, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::sampling::{Coord, DecoderGrid};
use crate::scalar::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

const LN_EPS: f64 = 1e-5;
const FFN_MULT: usize = 4;
const INIT_STD: f64 = 0.02;

/// Non-overlapping space-time patch extents along (time, height, width).
/// Encoder and decoder each own an independent spec.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub pt: usize,
    pub ph: usize,
    pub pw: usize,
}

impl PatchSpec {
    pub fn volume(&self) -> usize {
        self.pt * self.ph * self.pw
    }

    /// Grid of patch counts for a video of the given extents.
    pub fn grid_for(&self, t: usize, h: usize, w: usize) -> Result<DecoderGrid> {
        for (name, ext, p) in [("time", t, self.pt), ("height", h, self.ph), ("width", w, self.pw)] {
            if p == 0 || ext % p != 0 {
                return Err(Error::Input(format!(
                    "patch extent {} does not divide video {} axis {}",
                    p, name, ext
                )));
            }
        }
        DecoderGrid::new(t / self.pt, h / self.ph, w / self.pw)
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub enc_patch: PatchSpec,
    pub dec_patch: PatchSpec,
    pub enc_layers: usize,
    pub enc_dim: usize,
    pub enc_heads: usize,
    pub cs_layers: usize,
    pub cs_dim: usize,
    pub cs_heads: usize,
    pub dec_layers: usize,
    pub dec_dim: usize,
    pub dec_heads: usize,
    /// Triplane grid dims: z_xy is plane_h x plane_w, z_yt is plane_w x
    /// plane_t, z_xt is plane_h x plane_t.
    pub plane_h: usize,
    pub plane_w: usize,
    pub plane_t: usize,
    pub d_z: usize,
    /// Each plane's learnable embedding sequence must split into this many
    /// equal chunks.
    pub split_factor: usize,
    /// Video extents the model is configured for (fixes the encoder
    /// positional table and decoder coordinate grids).
    pub video_t: usize,
    pub video_h: usize,
    pub video_w: usize,
}

impl ModelConfig {
    pub fn preset(name: &str) -> Result<ModelConfig> {
        let full = |layers_cs: usize, dim: usize, heads: usize| ModelConfig {
            enc_patch: PatchSpec { pt: 4, ph: 8, pw: 8 },
            dec_patch: PatchSpec { pt: 1, ph: 8, pw: 8 },
            enc_layers: 8,
            enc_dim: dim,
            enc_heads: heads,
            cs_layers: layers_cs,
            cs_dim: dim,
            cs_heads: heads,
            dec_layers: layers_cs,
            dec_dim: dim,
            dec_heads: heads,
            plane_h: 16,
            plane_w: 16,
            plane_t: 32,
            d_z: 8,
            split_factor: 4,
            video_t: 128,
            video_h: 128,
            video_w: 128,
        };
        let cfg = match name {
            "tiny" => ModelConfig {
                enc_patch: PatchSpec { pt: 2, ph: 4, pw: 4 },
                dec_patch: PatchSpec { pt: 2, ph: 4, pw: 4 },
                enc_layers: 2,
                enc_dim: 64,
                enc_heads: 4,
                cs_layers: 2,
                cs_dim: 64,
                cs_heads: 4,
                dec_layers: 2,
                dec_dim: 64,
                dec_heads: 4,
                plane_h: 8,
                plane_w: 8,
                plane_t: 8,
                d_z: 8,
                split_factor: 4,
                video_t: 16,
                video_h: 32,
                video_w: 32,
            },
            "S" | "s" => full(8, 512, 8),
            "B" | "b" => full(12, 768, 12),
            "L" | "l" => full(24, 1024, 16),
            other => return Err(Error::Config(format!("unknown preset '{}'", other))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (what, dim, heads) in [
            ("encoder", self.enc_dim, self.enc_heads),
            ("cross-self", self.cs_dim, self.cs_heads),
            ("decoder", self.dec_dim, self.dec_heads),
        ] {
            if dim == 0 || heads == 0 || dim % heads != 0 {
                return Err(Error::Config(format!(
                    "{} dim {} not divisible by {} heads",
                    what, dim, heads
                )));
            }
        }
        if self.plane_h == 0 || self.plane_w == 0 || self.plane_t == 0 || self.d_z == 0 {
            return Err(Error::Config("plane dims and d_z must be positive".into()));
        }
        if self.split_factor == 0 {
            return Err(Error::Config("split factor must be positive".into()));
        }
        for (name, len) in [
            ("xy", self.plane_h * self.plane_w),
            ("yt", self.plane_w * self.plane_t),
            ("xt", self.plane_h * self.plane_t),
        ] {
            if len % self.split_factor != 0 {
                return Err(Error::Config(format!(
                    "plane {} sequence length {} not divisible into {} chunks",
                    name, len, self.split_factor
                )));
            }
        }
        self.enc_grid()?;
        self.dec_grid()?;
        Ok(())
    }

    pub fn enc_grid(&self) -> Result<DecoderGrid> {
        self.enc_patch.grid_for(self.video_t, self.video_h, self.video_w)
    }

    pub fn dec_grid(&self) -> Result<DecoderGrid> {
        self.dec_patch.grid_for(self.video_t, self.video_h, self.video_w)
    }

    /// Decoder grid for a clip of length `t` (spatial extents fixed).
    pub fn dec_grid_for_t(&self, t: usize) -> Result<DecoderGrid> {
        self.dec_patch.grid_for(t, self.video_h, self.video_w)
    }

    pub fn token_count(&self) -> usize {
        self.plane_h * self.plane_w + self.plane_w * self.plane_t + self.plane_h * self.plane_t
    }
}

/// The latent: three 2D grids of d_z-dim vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplane<F: Scalar> {
    /// plane_h x plane_w x d_z
    pub z_xy: Tensor<F>,
    /// plane_w x plane_t x d_z
    pub z_yt: Tensor<F>,
    /// plane_h x plane_t x d_z
    pub z_xt: Tensor<F>,
}

impl<F: Scalar> Triplane<F> {
    pub fn token_count(&self) -> usize {
        (self.z_xy.numel() + self.z_yt.numel() + self.z_xt.numel()) / self.d_z()
    }

    pub fn d_z(&self) -> usize {
        self.z_xy.shape()[2]
    }
}

/// Named parameter set; names are canonical and stable across runs.
#[derive(Debug, Clone)]
pub struct ParamSet<F: Scalar> {
    pub tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn get(&self, name: &str) -> &Tensor<F> {
        self.tensors.get(name).unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.map_to())).collect(),
        }
    }
}

/// How a parameter tensor starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    /// Truncated normal, std 0.02.
    Normal,
    Zeros,
    Ones,
}

/// Every parameter of the model, in a fixed declaration order:
/// (canonical name, shape, init). Single source of truth for both
/// initialization and checkpoint validation.
pub fn param_specs(cfg: &ModelConfig) -> Result<Vec<(String, Vec<usize>, InitKind)>> {
    cfg.validate()?;
    let mut out: Vec<(String, Vec<usize>, InitKind)> = Vec::new();
    let dense = |out: &mut Vec<(String, Vec<usize>, InitKind)>, name: &str, rows: usize, cols: usize| {
        out.push((format!("{name}.w"), vec![rows, cols], InitKind::Normal));
        out.push((format!("{name}.b"), vec![cols], InitKind::Zeros));
    };
    let ln = |out: &mut Vec<(String, Vec<usize>, InitKind)>, name: &str, dim: usize| {
        out.push((format!("{name}.g"), vec![dim], InitKind::Ones));
        out.push((format!("{name}.b"), vec![dim], InitKind::Zeros));
    };
    let attn = |out: &mut Vec<(String, Vec<usize>, InitKind)>, name: &str, dim: usize| {
        for part in ["wq", "wk", "wv", "wo"] {
            out.push((format!("{name}.{part}.w"), vec![dim, dim], InitKind::Normal));
            out.push((format!("{name}.{part}.b"), vec![dim], InitKind::Zeros));
        }
    };

    // transformer feature encoder
    let enc_grid = cfg.enc_grid()?;
    let in_dim = cfg.enc_patch.volume() * 3;
    dense(&mut out, "enc.embed", in_dim, cfg.enc_dim);
    out.push(("enc.pos".into(), vec![enc_grid.patch_count(), cfg.enc_dim], InitKind::Normal));
    for l in 0..cfg.enc_layers {
        let p = format!("enc.l{l}");
        ln(&mut out, &format!("{p}.ln1"), cfg.enc_dim);
        attn(&mut out, &format!("{p}.attn"), cfg.enc_dim);
        ln(&mut out, &format!("{p}.ln2"), cfg.enc_dim);
        dense(&mut out, &format!("{p}.ffn.fc1"), cfg.enc_dim, cfg.enc_dim * FFN_MULT);
        dense(&mut out, &format!("{p}.ffn.fc2"), cfg.enc_dim * FFN_MULT, cfg.enc_dim);
    }

    // cross-self triplane encoder
    if cfg.enc_dim != cfg.cs_dim {
        // feature projection when encoder and cross-self dims differ
        dense(&mut out, "cs.feat", cfg.enc_dim, cfg.cs_dim);
    }
    for (plane, len) in [
        ("xy", cfg.plane_h * cfg.plane_w),
        ("yt", cfg.plane_w * cfg.plane_t),
        ("xt", cfg.plane_h * cfg.plane_t),
    ] {
        out.push((format!("cs.z0.{plane}"), vec![len, cfg.cs_dim], InitKind::Normal));
        dense(&mut out, &format!("cs.proj.{plane}"), cfg.cs_dim, cfg.d_z);
    }
    for l in 0..cfg.cs_layers {
        let p = format!("cs.l{l}");
        ln(&mut out, &format!("{p}.lnq"), cfg.cs_dim);
        ln(&mut out, &format!("{p}.lnkv"), cfg.cs_dim);
        attn(&mut out, &format!("{p}.cross"), cfg.cs_dim);
        ln(&mut out, &format!("{p}.ln2"), cfg.cs_dim);
        attn(&mut out, &format!("{p}.attn"), cfg.cs_dim);
        ln(&mut out, &format!("{p}.ln3"), cfg.cs_dim);
        dense(&mut out, &format!("{p}.ffn.fc1"), cfg.cs_dim, cfg.cs_dim * FFN_MULT);
        dense(&mut out, &format!("{p}.ffn.fc2"), cfg.cs_dim * FFN_MULT, cfg.cs_dim);
    }

    // coordinate-queried decoder
    let dec_grid = cfg.dec_grid()?;
    dense(&mut out, "dec.embed", 3 * cfg.d_z, cfg.dec_dim);
    for (axis, len) in [("t", dec_grid.g_t), ("h", dec_grid.g_h), ("w", dec_grid.g_w)] {
        out.push((format!("dec.pos.{axis}"), vec![len, 1, cfg.dec_dim], InitKind::Normal));
    }
    for l in 0..cfg.dec_layers {
        let p = format!("dec.l{l}");
        ln(&mut out, &format!("{p}.ln1"), cfg.dec_dim);
        attn(&mut out, &format!("{p}.attn"), cfg.dec_dim);
        ln(&mut out, &format!("{p}.ln2"), cfg.dec_dim);
        dense(&mut out, &format!("{p}.ffn.fc1"), cfg.dec_dim, cfg.dec_dim * FFN_MULT);
        dense(&mut out, &format!("{p}.ffn.fc2"), cfg.dec_dim * FFN_MULT, cfg.dec_dim);
    }
    // zero start: the decoder stack contributes nothing until training
    // moves this off zero, which stabilizes early steps
    out.push(("dec.out.w".into(), vec![cfg.dec_dim, cfg.dec_patch.volume() * 3], InitKind::Zeros));
    out.push(("dec.out.b".into(), vec![cfg.dec_patch.volume() * 3], InitKind::Zeros));
    Ok(out)
}

/// Canonical name -> shape for every parameter.
pub fn param_shapes(cfg: &ModelConfig) -> Result<BTreeMap<String, Vec<usize>>> {
    Ok(param_specs(cfg)?.into_iter().map(|(n, s, _)| (n, s)).collect())
}

/// Truncated-normal init (std 0.02) for projections and embeddings, ones
/// for layer-norm gains, zeros for biases and the final output projection.
/// Normal draws happen in declaration order from one seeded stream.
pub fn init_params<F: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamSet<F>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = F::from_f64(INIT_STD);
    let mut map: BTreeMap<String, Tensor<F>> = BTreeMap::new();
    for (name, shape, kind) in param_specs(cfg)? {
        let t = match kind {
            InitKind::Normal => Tensor::trunc_normal(shape, std, &mut rng),
            InitKind::Zeros => Tensor::zeros(shape),
            InitKind::Ones => Tensor::full(shape, F::one()),
        };
        map.insert(name, t);
    }
    Ok(ParamSet { tensors: map })
}

/// Parameters bound into a graph as leaves.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("unbound parameter '{name}'"))
    }

    pub fn names(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Insert every parameter into the graph, as trainable leaves or constants.
pub fn bind_params<F: Scalar>(g: &mut Graph<F>, params: &ParamSet<F>, trainable: bool) -> Bound {
    let vars = params
        .tensors
        .iter()
        .map(|(k, t)| (k.clone(), if trainable { g.param(t) } else { g.constant(t) }))
        .collect();
    Bound { vars }
}

/// Bind every parameter as a constant except `target`, which is seated from
/// an existing leaf. Finite-difference checks of a single parameter through
/// the full pipeline use this to perturb one tensor while freezing the rest.
pub fn bind_params_substituting<F: Scalar>(
    g: &mut Graph<F>,
    params: &ParamSet<F>,
    target: &str,
    substitute: Var,
) -> Result<Bound> {
    let expected = params
        .tensors
        .get(target)
        .ok_or_else(|| Error::Input(format!("unknown parameter '{target}'")))?
        .shape()
        .to_vec();
    if g.shape(substitute) != expected.as_slice() {
        return Err(Error::Input(format!(
            "substitute for '{target}' has shape {:?}, parameter is {:?}",
            g.shape(substitute),
            expected
        )));
    }
    let vars = params
        .tensors
        .iter()
        .map(|(k, t)| (k.clone(), if k == target { substitute } else { g.constant(t) }))
        .collect();
    Ok(Bound { vars })
}

// ── patch machinery ──────────────────────────────────────────────

/// Flatten a video into rows of non-overlapping space-time patches.
/// Row m is the patch at grid index (t, h, w) in row-major (t outer) order;
/// within a patch, values follow (dt, dy, dx, c) order. Lossless.
pub fn patchify<F: Scalar>(video: &Video, spec: &PatchSpec) -> Result<(Tensor<F>, DecoderGrid)> {
    let grid = spec.grid_for(video.t, video.h, video.w)?;
    let pvol = spec.volume() * 3;
    let m = grid.patch_count();
    let mut out = Vec::with_capacity(m * pvol);
    for gt in 0..grid.g_t {
        for gh in 0..grid.g_h {
            for gw in 0..grid.g_w {
                for dt in 0..spec.pt {
                    for dy in 0..spec.ph {
                        for dx in 0..spec.pw {
                            for c in 0..3 {
                                out.push(F::from_f64(video.at(
                                    gt * spec.pt + dt,
                                    gh * spec.ph + dy,
                                    gw * spec.pw + dx,
                                    c,
                                ) as f64));
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::new(vec![m, pvol], out)?, grid))
}

/// Exact inverse of [`patchify`].
pub fn unpatchify<F: Scalar>(
    patches: &Tensor<F>,
    grid: &DecoderGrid,
    spec: &PatchSpec,
) -> Result<Video> {
    let pvol = spec.volume() * 3;
    if patches.shape() != [grid.patch_count(), pvol] {
        return Err(Error::Shape(format!(
            "unpatchify: {:?} does not match grid {} x patch volume {}",
            patches.shape(),
            grid.patch_count(),
            pvol
        )));
    }
    let (t, h, w) = (grid.g_t * spec.pt, grid.g_h * spec.ph, grid.g_w * spec.pw);
    let mut video = Video::zeros(t, h, w);
    let data = patches.data();
    let mut row = 0usize;
    for gt in 0..grid.g_t {
        for gh in 0..grid.g_h {
            for gw in 0..grid.g_w {
                let mut idx = row * pvol;
                for dt in 0..spec.pt {
                    for dy in 0..spec.ph {
                        for dx in 0..spec.pw {
                            for c in 0..3 {
                                *video.at_mut(
                                    gt * spec.pt + dt,
                                    gh * spec.ph + dy,
                                    gw * spec.pw + dx,
                                    c,
                                ) = data[idx].to_f64_() as f32;
                                idx += 1;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
    Ok(video)
}

// ── building blocks ──────────────────────────────────────────────

fn linear<F: Scalar>(g: &mut Graph<F>, x: Var, b: &Bound, name: &str) -> Result<Var> {
    let y = g.matmul(x, b.var(&format!("{name}.w")))?;
    g.add_bias(y, b.var(&format!("{name}.b")))
}

fn ln<F: Scalar>(g: &mut Graph<F>, x: Var, b: &Bound, name: &str) -> Result<Var> {
    g.layer_norm(x, b.var(&format!("{name}.g")), b.var(&format!("{name}.b")), F::from_f64(LN_EPS))
}

fn ffn<F: Scalar>(g: &mut Graph<F>, x: Var, b: &Bound, prefix: &str) -> Result<Var> {
    let h = linear(g, x, b, &format!("{prefix}.ffn.fc1"))?;
    let h = g.gelu(h);
    linear(g, h, b, &format!("{prefix}.ffn.fc2"))
}

/// q from `x`, k/v from `ctx`, projections and output projection under
/// `name`; result is the attention output (no residual).
fn attention<F: Scalar>(
    g: &mut Graph<F>,
    x: Var,
    ctx: Var,
    b: &Bound,
    name: &str,
    heads: usize,
) -> Result<Var> {
    let q = linear(g, x, b, &format!("{name}.wq"))?;
    let k = linear(g, ctx, b, &format!("{name}.wk"))?;
    let v = linear(g, ctx, b, &format!("{name}.wv"))?;
    let a = multi_head_attention(g, q, k, v, heads)?;
    linear(g, a, b, &format!("{name}.wo"))
}

/// Pre-LN self-attention block plus feed-forward, both residual.
fn self_block<F: Scalar>(
    g: &mut Graph<F>,
    x: Var,
    b: &Bound,
    prefix: &str,
    heads: usize,
) -> Result<Var> {
    let n = ln(g, x, b, &format!("{prefix}.ln1"))?;
    let a = attention(g, n, n, b, &format!("{prefix}.attn"), heads)?;
    let x = g.add(x, a)?;
    let n = ln(g, x, b, &format!("{prefix}.ln2"))?;
    let f = ffn(g, n, b, prefix)?;
    g.add(x, f)
}

// ── encoder ──────────────────────────────────────────────────────

/// Per-patch features: linear patch embedding + learnable positional
/// embedding + self-attention stack.
pub fn encode_features<F: Scalar>(
    g: &mut Graph<F>,
    patches: Var,
    b: &Bound,
    cfg: &ModelConfig,
) -> Result<Var> {
    let m = g.shape(patches)[0];
    let pos = b.var("enc.pos");
    if g.shape(pos)[0] != m {
        return Err(Error::Shape(format!(
            "positional table has {} rows, patch grid has {}",
            g.shape(pos)[0],
            m
        )));
    }
    let x = linear(g, patches, b, "enc.embed")?;
    let mut x = g.add(x, pos)?;
    for l in 0..cfg.enc_layers {
        x = self_block(g, x, b, &format!("enc.l{l}"), cfg.enc_heads)?;
    }
    Ok(x)
}

/// Cross-self stack: the three planes' learnable embeddings (each split
/// into `split_factor` contiguous chunks, all processed as one concatenated
/// sequence) attend to the video features, then to themselves, and are
/// finally projected per plane into the triplane.
pub fn encode_triplane<F: Scalar>(
    g: &mut Graph<F>,
    features: Var,
    b: &Bound,
    cfg: &ModelConfig,
) -> Result<[Var; 3]> {
    let lens = [
        cfg.plane_h * cfg.plane_w,
        cfg.plane_w * cfg.plane_t,
        cfg.plane_h * cfg.plane_t,
    ];
    for (plane, len) in ["xy", "yt", "xt"].iter().zip(lens) {
        if len % cfg.split_factor != 0 {
            return Err(Error::Shape(format!(
                "plane {} sequence length {} not divisible into {} chunks",
                plane, len, cfg.split_factor
            )));
        }
    }
    let e = if cfg.enc_dim != cfg.cs_dim {
        linear(g, features, b, "cs.feat")?
    } else {
        features
    };
    let parts = [b.var("cs.z0.xy"), b.var("cs.z0.yt"), b.var("cs.z0.xt")];
    let mut z = g.concat_rows(&parts)?;
    for l in 0..cfg.cs_layers {
        let p = format!("cs.l{l}");
        let q = ln(g, z, b, &format!("{p}.lnq"))?;
        let kv = ln(g, e, b, &format!("{p}.lnkv"))?;
        let cross = attention(g, q, kv, b, &format!("{p}.cross"), cfg.cs_heads)?;
        z = g.add(z, cross)?;
        let n = ln(g, z, b, &format!("{p}.ln2"))?;
        let a = attention(g, n, n, b, &format!("{p}.attn"), cfg.cs_heads)?;
        z = g.add(z, a)?;
        let n = ln(g, z, b, &format!("{p}.ln3"))?;
        let f = ffn(g, n, b, &p)?;
        z = g.add(z, f)?;
    }
    let mut planes = Vec::with_capacity(3);
    let dims = [
        (cfg.plane_h, cfg.plane_w),
        (cfg.plane_w, cfg.plane_t),
        (cfg.plane_h, cfg.plane_t),
    ];
    let mut start = 0;
    for ((plane, len), (rows, cols)) in ["xy", "yt", "xt"].iter().zip(lens).zip(dims) {
        let s = g.slice_rows(z, start, len)?;
        let p = linear(g, s, b, &format!("cs.proj.{plane}"))?;
        planes.push(g.reshape(p, vec![rows, cols, cfg.d_z])?);
        start += len;
    }
    Ok([planes[0], planes[1], planes[2]])
}

// ── decoder ──────────────────────────────────────────────────────

fn axis_query<F: Scalar>(c: f64, extent: usize) -> AxisQuery<F> {
    split_axis(F::from_f64(c * (extent as f64 - 1.0)), extent)
}

fn plane_queries<F: Scalar>(
    coords: &[Coord],
    pick: impl Fn(&Coord) -> (f64, f64),
    extents: (usize, usize),
) -> Result<Vec<BilinQuery<F>>> {
    coords
        .iter()
        .map(|c| {
            let (u, v) = pick(c);
            if !u.is_finite() || !v.is_finite() {
                return Err(Error::Input("non-finite coordinate".into()));
            }
            Ok(axis_query::<F>(u, extents.0).merge(axis_query::<F>(v, extents.1)))
        })
        .collect()
}

/// Read a coordinate vector h out of the planes: h_xy at (i,j), h_yt at
/// (j,k), h_xt at (i,k), bilinearly interpolated and concatenated.
/// Output is [N, 3*d_z].
pub fn query_triplane<F: Scalar>(
    g: &mut Graph<F>,
    planes: &[Var; 3],
    coords: &[Coord],
) -> Result<Var> {
    let ext = |v: Var, g: &Graph<F>| (g.shape(v)[0], g.shape(v)[1]);
    let (hx, wx) = ext(planes[0], g);
    let (wy, ty) = ext(planes[1], g);
    let (hz, tz) = ext(planes[2], g);
    let q_xy = plane_queries::<F>(coords, |c| (c.i, c.j), (hx, wx))?;
    let q_yt = plane_queries::<F>(coords, |c| (c.j, c.k), (wy, ty))?;
    let q_xt = plane_queries::<F>(coords, |c| (c.i, c.k), (hz, tz))?;
    let h_xy = g.bilinear_gather(planes[0], q_xy)?;
    let h_yt = g.bilinear_gather(planes[1], q_yt)?;
    let h_xt = g.bilinear_gather(planes[2], q_xt)?;
    g.concat_last(&[h_xy, h_yt, h_xt])
}

/// Decode coordinate representations to patch pixels: linear embedding plus
/// a coordinate positional embedding (learnable per-axis grids, bilinearly
/// interpolated at the coordinate), a self-attention stack over the N
/// queries, and a linear projection to the patch. Order-preserving.
pub fn decode_patches<F: Scalar>(
    g: &mut Graph<F>,
    reps: Var,
    coords: &[Coord],
    b: &Bound,
    cfg: &ModelConfig,
) -> Result<Var> {
    let n = coords.len();
    if n == 0 {
        return Err(Error::Input("decode_patches: no coordinates".into()));
    }
    if g.shape(reps) != [n, 3 * cfg.d_z] {
        return Err(Error::Shape(format!(
            "decode_patches: reps {:?}, want [{}, {}]",
            g.shape(reps),
            n,
            3 * cfg.d_z
        )));
    }
    let mut x = linear(g, reps, b, "dec.embed")?;
    for (axis, pick) in [("h", 0usize), ("w", 1), ("t", 2)] {
        let table = b.var(&format!("dec.pos.{axis}"));
        let extent = g.shape(table)[0];
        let queries = plane_queries::<F>(
            coords,
            |c| {
                let u = match pick {
                    0 => c.i,
                    1 => c.j,
                    _ => c.k,
                };
                (u, 0.0)
            },
            (extent, 1),
        )?;
        let pos = g.bilinear_gather(table, queries)?;
        x = g.add(x, pos)?;
    }
    for l in 0..cfg.dec_layers {
        x = self_block(g, x, b, &format!("dec.l{l}"), cfg.dec_heads)?;
    }
    linear(g, x, b, "dec.out")
}

// ── end-to-end paths ─────────────────────────────────────────────

/// Encoder pipeline inside an existing graph.
pub fn encode_video<F: Scalar>(
    g: &mut Graph<F>,
    video: &Video,
    b: &Bound,
    cfg: &ModelConfig,
) -> Result<[Var; 3]> {
    let (patches, _) = patchify::<F>(video, &cfg.enc_patch)?;
    let p = g.constant(&patches);
    let e = encode_features(g, p, b, cfg)?;
    encode_triplane(g, e, b, cfg)
}

/// Video -> triplane, inference only.
pub fn tokenize<F: Scalar>(video: &Video, params: &ParamSet<F>, cfg: &ModelConfig) -> Result<Triplane<F>> {
    let mut g = Graph::new();
    let b = bind_params(&mut g, params, false);
    let planes = encode_video(&mut g, video, &b, cfg)?;
    Ok(Triplane {
        z_xy: g.to_tensor(planes[0]),
        z_yt: g.to_tensor(planes[1]),
        z_xt: g.to_tensor(planes[2]),
    })
}

/// How many coordinates share one decoder attention pass during full
/// reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkMode {
    /// All M patch coordinates in a single pass.
    All,
    /// Independent passes of at most this many coordinates each; the
    /// attention set differs from `All`, so outputs may differ too.
    Size(usize),
}

/// Decode every patch coordinate of the decoder grid and reassemble the
/// video.
pub fn reconstruct_full<F: Scalar>(
    z: &Triplane<F>,
    params: &ParamSet<F>,
    cfg: &ModelConfig,
    t: usize,
    chunk: ChunkMode,
) -> Result<Video> {
    let grid = cfg.dec_grid_for_t(t)?;
    let m = grid.patch_count();
    if m == 0 {
        return Err(Error::Input("reconstruct_full: empty decoder grid".into()));
    }
    let coords = grid.all_coords();
    let chunk_len = match chunk {
        ChunkMode::All => m,
        ChunkMode::Size(s) => {
            if s == 0 {
                return Err(Error::Input("reconstruct_full: chunk size must be positive".into()));
            }
            s
        }
    };
    let pvol = cfg.dec_patch.volume() * 3;
    let mut rows = Vec::with_capacity(m * pvol);
    for chunk_coords in coords.chunks(chunk_len) {
        let mut g = Graph::new();
        let b = bind_params(&mut g, params, false);
        let planes = [g.constant(&z.z_xy), g.constant(&z.z_yt), g.constant(&z.z_xt)];
        let reps = query_triplane(&mut g, &planes, chunk_coords)?;
        let out = decode_patches(&mut g, reps, chunk_coords, &b, cfg)?;
        rows.extend_from_slice(g.data(out));
    }
    let patches = Tensor::new(vec![m, pvol], rows)?;
    unpatchify(&patches, &grid, &cfg.dec_patch)
}
