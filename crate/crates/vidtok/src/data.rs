//! Synthetic video corpus: moving-sprite clips with controllable dynamics,
//! plus resize/center-crop preprocessing and batch assembly.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Dense T x H x W x C pixel array, values in [0,1], C = 3.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub pixels: Vec<f32>,
}

impl Video {
    pub fn new(t: usize, h: usize, w: usize, pixels: Vec<f32>) -> Result<Self> {
        if t == 0 || h == 0 || w == 0 {
            return Err(Error::Input("video extents must be >= 1".into()));
        }
        if pixels.len() != t * h * w * 3 {
            return Err(Error::Shape(format!(
                "video {}x{}x{}x3 needs {} values, got {}",
                t,
                h,
                w,
                t * h * w * 3,
                pixels.len()
            )));
        }
        Ok(Video { t, h, w, c: 3, pixels })
    }

    pub fn zeros(t: usize, h: usize, w: usize) -> Self {
        Video { t, h, w, c: 3, pixels: vec![0.0; t * h * w * 3] }
    }

    #[inline]
    pub fn at(&self, t: usize, h: usize, w: usize, c: usize) -> f32 {
        self.pixels[((t * self.h + h) * self.w + w) * self.c + c]
    }

    #[inline]
    pub fn at_mut(&mut self, t: usize, h: usize, w: usize, c: usize) -> &mut f32 {
        &mut self.pixels[((t * self.h + h) * self.w + w) * self.c + c]
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let fs = self.h * self.w * self.c;
        &self.pixels[t * fs..(t + 1) * fs]
    }

    /// Frames [start, start+len).
    pub fn temporal_crop(&self, start: usize, len: usize) -> Result<Video> {
        if start + len > self.t {
            return Err(Error::Input(format!(
                "crop [{}, {}) of {} frames",
                start,
                start + len,
                self.t
            )));
        }
        let fs = self.h * self.w * self.c;
        Video::new(len, self.h, self.w, self.pixels[start * fs..(start + len) * fs].to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpriteShape {
    Rect,
    Disc,
}

/// Parameters for one synthetic clip.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpriteSceneSpec {
    pub n_sprites: usize,
    pub shapes: Vec<SpriteShape>,
    /// Sprite velocity magnitude in pixels per frame.
    pub speed: f64,
    /// Background: constant gray level.
    pub background: f32,
    pub seed: u64,
}

impl SpriteSceneSpec {
    pub fn new(n_sprites: usize, speed: f64, seed: u64) -> Self {
        SpriteSceneSpec {
            n_sprites,
            shapes: vec![SpriteShape::Rect, SpriteShape::Disc],
            speed,
            background: 0.1,
            seed,
        }
    }
}

struct Sprite {
    shape: SpriteShape,
    cy: f64,
    cx: f64,
    vy: f64,
    vx: f64,
    half: f64,
    color: [f32; 3],
}

/// Deterministic moving-sprite clip. Sprites bounce off frame edges, so the
/// mean frame-to-frame difference grows with the speed parameter.
pub fn gen_sprites(spec: &SpriteSceneSpec, t: usize, h: usize, w: usize) -> Result<Video> {
    if t == 0 || h == 0 || w == 0 {
        return Err(Error::Input("gen_sprites: extents must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut sprites = Vec::with_capacity(spec.n_sprites);
    for s in 0..spec.n_sprites {
        let shape = spec.shapes[s % spec.shapes.len().max(1)];
        let half = rng.gen_range(0.12..0.22) * h.min(w) as f64;
        let cy = rng.gen_range(half..(h as f64 - half).max(half + 1e-9));
        let cx = rng.gen_range(half..(w as f64 - half).max(half + 1e-9));
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let color = [
            rng.gen_range(0.3..1.0f32),
            rng.gen_range(0.3..1.0f32),
            rng.gen_range(0.3..1.0f32),
        ];
        sprites.push(Sprite {
            shape,
            cy,
            cx,
            vy: spec.speed * angle.sin(),
            vx: spec.speed * angle.cos(),
            half,
            color,
        });
    }
    let mut video = Video::zeros(t, h, w);
    for f in 0..t {
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    *video.at_mut(f, y, x, c) = spec.background;
                }
            }
        }
        for sp in &sprites {
            let y0 = (sp.cy - sp.half).floor().max(0.0) as usize;
            let y1 = ((sp.cy + sp.half).ceil() as usize).min(h);
            let x0 = (sp.cx - sp.half).floor().max(0.0) as usize;
            let x1 = ((sp.cx + sp.half).ceil() as usize).min(w);
            for y in y0..y1 {
                for x in x0..x1 {
                    let dy = y as f64 + 0.5 - sp.cy;
                    let dx = x as f64 + 0.5 - sp.cx;
                    let inside = match sp.shape {
                        SpriteShape::Rect => dy.abs() <= sp.half && dx.abs() <= sp.half,
                        SpriteShape::Disc => dy * dy + dx * dx <= sp.half * sp.half,
                    };
                    if inside {
                        for c in 0..3 {
                            *video.at_mut(f, y, x, c) = sp.color[c];
                        }
                    }
                }
            }
        }
        // advance with reflective boundaries
        for sp in &mut sprites {
            sp.cy += sp.vy;
            sp.cx += sp.vx;
            if sp.cy < sp.half {
                sp.cy = 2.0 * sp.half - sp.cy;
                sp.vy = -sp.vy;
            }
            if sp.cy > h as f64 - sp.half {
                sp.cy = 2.0 * (h as f64 - sp.half) - sp.cy;
                sp.vy = -sp.vy;
            }
            if sp.cx < sp.half {
                sp.cx = 2.0 * sp.half - sp.cx;
                sp.vx = -sp.vx;
            }
            if sp.cx > w as f64 - sp.half {
                sp.cx = 2.0 * (w as f64 - sp.half) - sp.cx;
                sp.vx = -sp.vx;
            }
        }
    }
    Ok(video)
}

/// Bilinear resize of the shorter side to the target, then center crop.
pub fn resize_center_crop(video: &Video, h_out: usize, w_out: usize) -> Result<Video> {
    if h_out == 0 || w_out == 0 {
        return Err(Error::Input("resize_center_crop: zero target".into()));
    }
    // scale preserving aspect so both resized extents cover the target
    let scale = (h_out as f64 / video.h as f64).max(w_out as f64 / video.w as f64);
    let rh = ((video.h as f64 * scale).round() as usize).max(h_out);
    let rw = ((video.w as f64 * scale).round() as usize).max(w_out);
    let resized = if rh == video.h && rw == video.w {
        video.clone()
    } else {
        let mut out = Video::zeros(video.t, rh, rw);
        for t in 0..video.t {
            for y in 0..rh {
                // sample positions align pixel centers of source and target
                let sy = ((y as f64 + 0.5) * video.h as f64 / rh as f64 - 0.5)
                    .clamp(0.0, video.h as f64 - 1.0);
                let y0 = (sy.floor() as usize).min(video.h - 1);
                let y1 = (y0 + 1).min(video.h - 1);
                let wy = sy - y0 as f64;
                for x in 0..rw {
                    let sx = ((x as f64 + 0.5) * video.w as f64 / rw as f64 - 0.5)
                        .clamp(0.0, video.w as f64 - 1.0);
                    let x0 = (sx.floor() as usize).min(video.w - 1);
                    let x1 = (x0 + 1).min(video.w - 1);
                    let wx = sx - x0 as f64;
                    for c in 0..3 {
                        let v00 = video.at(t, y0, x0, c) as f64;
                        let v01 = video.at(t, y0, x1, c) as f64;
                        let v10 = video.at(t, y1, x0, c) as f64;
                        let v11 = video.at(t, y1, x1, c) as f64;
                        let v = v00 * (1.0 - wy) * (1.0 - wx)
                            + v01 * (1.0 - wy) * wx
                            + v10 * wy * (1.0 - wx)
                            + v11 * wy * wx;
                        *out.at_mut(t, y, x, c) = v as f32;
                    }
                }
            }
        }
        out
    };
    let oy = (resized.h - h_out) / 2;
    let ox = (resized.w - w_out) / 2;
    let mut out = Video::zeros(video.t, h_out, w_out);
    for t in 0..video.t {
        for y in 0..h_out {
            for x in 0..w_out {
                for c in 0..3 {
                    *out.at_mut(t, y, x, c) = resized.at(t, oy + y, ox + x, c);
                }
            }
        }
    }
    Ok(out)
}

/// Uniform random temporal crops, one per batch slot. The rng is derived
/// from (seed, step) by the caller, so batch composition is reproducible.
pub fn make_batch(
    source: &[Video],
    rng: &mut ChaCha8Rng,
    batch_size: usize,
    clip_len: usize,
) -> Result<Vec<Video>> {
    if source.is_empty() {
        return Err(Error::Input("make_batch: empty source".into()));
    }
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let v = &source[rng.gen_range(0..source.len())];
        if v.t < clip_len {
            return Err(Error::Input(format!(
                "clip_len {} exceeds source length {}",
                clip_len, v.t
            )));
        }
        let start = rng.gen_range(0..=v.t - clip_len);
        out.push(v.temporal_crop(start, clip_len)?);
    }
    Ok(out)
}

/// A synthetic corpus: `n_clips` sprite scenes cycling through `speeds`,
/// each clip seeded from (seed, clip index).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_clips: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub n_sprites: usize,
    pub speeds: Vec<f64>,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_clips: 16,
            t: 16,
            h: 32,
            w: 32,
            n_sprites: 2,
            speeds: vec![0.0, 1.0, 2.0, 4.0],
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clips == 0 || self.t == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::Config("corpus extents must be positive".into()));
        }
        if self.speeds.is_empty() || self.speeds.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::Config("speeds must be nonempty, finite, and >= 0".into()));
        }
        Ok(())
    }
}

pub fn build_corpus(cfg: &DataConfig) -> Result<Vec<Video>> {
    cfg.validate()?;
    (0..cfg.n_clips)
        .map(|i| {
            let speed = cfg.speeds[i % cfg.speeds.len()];
            let spec = SpriteSceneSpec::new(
                cfg.n_sprites,
                speed,
                cfg.seed.wrapping_add(i as u64).wrapping_mul(0x9E3779B97F4A7C15),
            );
            gen_sprites(&spec, cfg.t, cfg.h, cfg.w)
        })
        .collect()
}
