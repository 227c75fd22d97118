//! Binary containers: CVID videos (u8 pixels), CTCK checkpoints (config
//! JSON + named f32 tensors), CTOK token files (the three latent planes).
//!
//! All multi-byte integers are little-endian. Writes go to a temp file in
//! the target directory and are renamed into place, so readers never see a
//! partial file. Readers validate magic, version, and lengths and return
//! typed errors; malformed bytes never panic.

use crate::data::Video;
use crate::diffcore::{AdamW, Tensor};
use crate::error::{Error, Result};
use crate::model::{param_shapes, ModelConfig, ParamSet, Triplane};
use crate::scalar::Scalar;
use crate::train::{TrainConfig, TrainState};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

pub const CVID_MAGIC: &[u8; 4] = b"CVID";
pub const CTCK_MAGIC: &[u8; 4] = b"CTCK";
pub const CTOK_MAGIC: &[u8; 4] = b"CTOK";
pub const CVID_VERSION: u32 = 1;
pub const CTCK_VERSION: u32 = 1;
pub const CTOK_VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const OPT_M: &str = "opt.m.";
const OPT_V: &str = "opt.v.";

// ── byte-level plumbing ──────────────────────────────────────────

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], path: &'a str) -> Self {
        Reader { buf, pos: 0, path }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(
                self.path,
                format!("truncated: needed {} bytes for {}, {} left", n, what, self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != want {
            return Err(Error::format(
                self.path,
                format!("bad magic: expected {:?}, found {:?}", want, got),
            ));
        }
        Ok(())
    }

    fn version(&mut self, want: u32) -> Result<()> {
        let got = self.u32("version")?;
        if got != want {
            return Err(Error::format(
                self.path,
                format!("unsupported version {} (this build reads {})", got, want),
            ));
        }
        Ok(())
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n * 4, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(
                self.path,
                format!("{} trailing bytes after payload", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn put_f32s(out: &mut Vec<u8>, vals: impl Iterator<Item = f32>) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Write bytes via a temp file in the same directory, then rename.
fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp = path.with_extension(format!(
        "{}.tmp{}",
        path.extension().and_then(|e| e.to_str()).unwrap_or(""),
        std::process::id()
    ));
    if let Some(d) = dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d.display().to_string(), e))?;
    }
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path.display().to_string(), e)
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))
}

// ── CVID: quantized video ────────────────────────────────────────

/// Header: magic, version, then T, H, W, C as u32 (24 bytes); payload is
/// T·H·W·C u8 pixels in (t, h, w, c) order, pixel = round(value·255).
pub fn write_cvid(path: &Path, video: &Video) -> Result<()> {
    let mut out = Vec::with_capacity(24 + video.pixels.len());
    out.extend_from_slice(CVID_MAGIC);
    out.extend_from_slice(&CVID_VERSION.to_le_bytes());
    for d in [video.t, video.h, video.w, video.c] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend(video.pixels.iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    atomic_write(path, &out)
}

pub fn read_cvid(path: &Path) -> Result<Video> {
    let buf = read_file(path)?;
    let p = path.display().to_string();
    let mut r = Reader::new(&buf, &p);
    r.magic(CVID_MAGIC)?;
    r.version(CVID_VERSION)?;
    let (t, h, w, c) = (
        r.u32("T")? as usize,
        r.u32("H")? as usize,
        r.u32("W")? as usize,
        r.u32("C")? as usize,
    );
    if c != 3 {
        return Err(Error::format(&p, format!("unsupported channel count {}", c)));
    }
    if t == 0 || h == 0 || w == 0 {
        return Err(Error::format(&p, "zero extent in header".to_string()));
    }
    let n = t
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .and_then(|x| x.checked_mul(c))
        .ok_or_else(|| Error::format(&p, "header extents overflow".to_string()))?;
    let payload = r.take(n, "pixel payload")?;
    r.done()?;
    Video::new(t, h, w, payload.iter().map(|b| *b as f32 / 255.0).collect())
}

// ── CTCK: checkpoint ─────────────────────────────────────────────

/// Optimizer progress and rng position, embedded in the checkpoint's
/// config JSON so a resumed run replays the exact loss sequence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedTrainState {
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub last_l2: f64,
    pub last_perceptual: f64,
}

/// The JSON blob stored inside a CTCK file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub state: Option<SavedTrainState>,
}

#[derive(Debug)]
pub struct LoadedCheckpoint<F: Scalar> {
    pub params: ParamSet<F>,
    pub meta: CheckpointMeta,
    pub state: Option<TrainState<F>>,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: impl Iterator<Item = f32>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F32);
    out.push(shape.len() as u8);
    for d in shape {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    put_f32s(out, data);
}

/// Serialize parameters, optimizer moments ("opt.m.*" / "opt.v.*"), and the
/// config JSON. Tensors are stored f32 regardless of the working precision.
pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    params: &ParamSet<F>,
    mc: &ModelConfig,
    tc: &TrainConfig,
    state: Option<&TrainState<F>>,
) -> Result<()> {
    let meta = CheckpointMeta {
        model: mc.clone(),
        train: tc.clone(),
        state: state.map(|s| SavedTrainState {
            step: s.opt.step,
            rng: s.rng.clone(),
            last_l2: s.last_l2,
            last_perceptual: s.last_perceptual,
        }),
    };
    let blob = serde_json::to_vec(&meta)
        .map_err(|e| Error::Config(format!("checkpoint config does not serialize: {e}")))?;
    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = params
        .tensors
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec(), t.data().iter().map(|v| v.to_f64_() as f32).collect()))
        .collect();
    if let Some(s) = state {
        for (name, (m, v)) in s.opt.moments() {
            let shape = params.get(name).shape().to_vec();
            tensors.push((format!("{OPT_M}{name}"), shape.clone(), m.iter().map(|x| x.to_f64_() as f32).collect()));
            tensors.push((format!("{OPT_V}{name}"), shape, v.iter().map(|x| x.to_f64_() as f32).collect()));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(CTCK_MAGIC);
    out.extend_from_slice(&CTCK_VERSION.to_le_bytes());
    out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    out.extend_from_slice(&blob);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in tensors {
        put_tensor(&mut out, &name, &shape, data.into_iter());
    }
    atomic_write(path, &out)
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<LoadedCheckpoint<F>> {
    let buf = read_file(path)?;
    let p = path.display().to_string();
    let mut r = Reader::new(&buf, &p);
    r.magic(CTCK_MAGIC)?;
    r.version(CTCK_VERSION)?;
    let blob_len = r.u32("config length")? as usize;
    let blob = r.take(blob_len, "config JSON")?;
    let meta: CheckpointMeta = serde_json::from_slice(blob)
        .map_err(|e| Error::format(&p, format!("config JSON does not parse: {e}")))?;
    let expected = param_shapes(&meta.model)?;
    let count = r.u32("tensor count")? as usize;
    let mut raw: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for i in 0..count {
        let nlen = r.u16(&format!("name length of tensor {i}"))? as usize;
        let name = std::str::from_utf8(r.take(nlen, "tensor name")?)
            .map_err(|_| Error::format(&p, format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::format(&p, format!("tensor '{name}': unknown dtype {dtype}")));
        }
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = r.u32("dim")? as usize;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::format(&p, format!("tensor '{name}': dims overflow")))?;
            shape.push(d);
        }
        let data = r.f32s(numel, &format!("payload of '{name}'"))?;
        if raw.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::format(&p, format!("duplicate tensor '{name}'")));
        }
    }
    r.done()?;

    // reconcile against the config: every parameter once, right shape
    let mut tensors: BTreeMap<String, Tensor<F>> = BTreeMap::new();
    for (name, shape) in &expected {
        let t = raw
            .remove(name)
            .ok_or_else(|| Error::format(&p, format!("missing parameter '{name}'")))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::format(
                &p,
                format!("parameter '{name}': shape {:?} does not match config {:?}", t.shape(), shape),
            ));
        }
        tensors.insert(name.clone(), t.map_to());
    }
    let mut moments: BTreeMap<String, (Vec<F>, Vec<F>)> = BTreeMap::new();
    for (name, t) in raw {
        let (which, base) = if let Some(b) = name.strip_prefix(OPT_M) {
            (0, b.to_string())
        } else if let Some(b) = name.strip_prefix(OPT_V) {
            (1, b.to_string())
        } else {
            return Err(Error::format(&p, format!("unknown tensor '{name}'")));
        };
        let shape = expected
            .get(&base)
            .ok_or_else(|| Error::format(&p, format!("moment for unknown parameter '{base}'")))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::format(&p, format!("moment '{name}': shape mismatch")));
        }
        let vals: Vec<F> = t.data().iter().map(|x| F::from_f64(*x as f64)).collect();
        let slot = moments.entry(base).or_insert_with(|| (Vec::new(), Vec::new()));
        if which == 0 {
            slot.0 = vals;
        } else {
            slot.1 = vals;
        }
    }

    let state = match &meta.state {
        None => None,
        Some(s) => {
            let mut opt = AdamW::new(meta.train.opt);
            opt.step = s.step;
            for (base, (m, v)) in moments {
                if m.is_empty() || v.is_empty() {
                    return Err(Error::format(&p, format!("parameter '{base}' has only one moment tensor")));
                }
                opt.restore_moments(&base, m, v);
            }
            let mut st = TrainState::new(&meta.train);
            st.opt = opt;
            st.rng = s.rng.clone();
            st.last_l2 = s.last_l2;
            st.last_perceptual = s.last_perceptual;
            Some(st)
        }
    };
    Ok(LoadedCheckpoint { params: ParamSet { tensors }, meta, state })
}

// ── CTOK: token file ─────────────────────────────────────────────

/// Header: magic, version, H', W', T', D_z as u32; payload is the three
/// planes' f32 values in order xy (H'·W'·D), yt (W'·T'·D), xt (H'·T'·D).
pub fn write_tokens(path: &Path, z: &Triplane<f32>) -> Result<()> {
    let (hp, wp, d) = (z.z_xy.shape()[0], z.z_xy.shape()[1], z.z_xy.shape()[2]);
    let tp = z.z_yt.shape()[1];
    let want_yt = [wp, tp, d];
    let want_xt = [hp, tp, d];
    if z.z_yt.shape() != want_yt || z.z_xt.shape() != want_xt {
        return Err(Error::Shape(format!(
            "inconsistent planes: xy {:?}, yt {:?} (want {:?}), xt {:?} (want {:?})",
            z.z_xy.shape(),
            z.z_yt.shape(),
            want_yt,
            z.z_xt.shape(),
            want_xt
        )));
    }
    let mut out = Vec::new();
    out.extend_from_slice(CTOK_MAGIC);
    out.extend_from_slice(&CTOK_VERSION.to_le_bytes());
    for v in [hp, wp, tp, d] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for plane in [&z.z_xy, &z.z_yt, &z.z_xt] {
        put_f32s(&mut out, plane.data().iter().copied());
    }
    atomic_write(path, &out)
}

pub fn read_tokens(path: &Path) -> Result<Triplane<f32>> {
    let buf = read_file(path)?;
    let p = path.display().to_string();
    let mut r = Reader::new(&buf, &p);
    r.magic(CTOK_MAGIC)?;
    r.version(CTOK_VERSION)?;
    let (hp, wp, tp, d) = (
        r.u32("H'")? as usize,
        r.u32("W'")? as usize,
        r.u32("T'")? as usize,
        r.u32("D_z")? as usize,
    );
    if hp == 0 || wp == 0 || tp == 0 || d == 0 {
        return Err(Error::format(&p, "zero extent in header".to_string()));
    }
    let plane = |a: usize, b: usize, what: &str, r: &mut Reader| -> Result<Tensor<f32>> {
        let n = a
            .checked_mul(b)
            .and_then(|x| x.checked_mul(d))
            .ok_or_else(|| Error::format(&p, "header extents overflow".to_string()))?;
        Tensor::new(vec![a, b, d], r.f32s(n, what)?)
    };
    let z_xy = plane(hp, wp, "plane xy", &mut r)?;
    let z_yt = plane(wp, tp, "plane yt", &mut r)?;
    let z_xt = plane(hp, tp, "plane xt", &mut r)?;
    r.done()?;
    Ok(Triplane { z_xy, z_yt, z_xt })
}

/// Reject token files whose plane dims disagree with a model config.
pub fn check_tokens_match(z: &Triplane<f32>, cfg: &ModelConfig) -> Result<()> {
    let want = [
        [cfg.plane_h, cfg.plane_w, cfg.d_z],
        [cfg.plane_w, cfg.plane_t, cfg.d_z],
        [cfg.plane_h, cfg.plane_t, cfg.d_z],
    ];
    let got = [z.z_xy.shape(), z.z_yt.shape(), z.z_xt.shape()];
    for (name, (g, w)) in ["xy", "yt", "xt"].iter().zip(got.iter().zip(&want)) {
        if *g != w.as_slice() {
            return Err(Error::Shape(format!(
                "token plane {} is {:?}, checkpoint config wants {:?}",
                name, g, w
            )));
        }
    }
    Ok(())
}
