use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// One bilinear lookup into a 2D plane of vectors, weights precomputed.
///
/// value = (1-wu)(1-wv)·P[l,m] + (1-wu)wv·P[l,m1] + wu(1-wv)·P[l1,m] + wu·wv·P[l1,m1]
/// where l1/m1 are the clamped next indices (equal to l/m on extent-1 axes,
/// where the corresponding weight is zero).
#[derive(Debug, Clone, Copy)]
pub struct BilinQuery<F> {
    pub l: usize,
    pub m: usize,
    pub l1: usize,
    pub m1: usize,
    pub wu: F,
    pub wv: F,
}

enum Op<F: Scalar> {
    Leaf,
    Add(usize, usize),
    /// b's shape is a suffix of a's shape; broadcast over leading dims.
    AddBias(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, F),
    Matmul {
        a: usize,
        b: usize,
        trans_b: bool,
        batch: usize,
        a_broadcast: bool,
        b_broadcast: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Gelu(usize),
    BilinearGather {
        plane: usize,
        cols: usize,
        d: usize,
        queries: Vec<BilinQuery<F>>,
    },
    ConcatLast {
        parts: Vec<usize>,
        widths: Vec<usize>,
    },
    ConcatRows {
        parts: Vec<usize>,
        rows: Vec<usize>,
        row: usize,
    },
    SliceRows {
        x: usize,
        start: usize,
        row: usize,
    },
    Reshape(usize),
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Sum(usize),
    Mean(usize),
    ChannelMean(usize),
    Conv3x3 {
        x: usize,
        kernel: [F; 9],
        h: usize,
        w: usize,
    },
    SqrtEps(usize),
}

struct Node<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
    grad: Option<Vec<F>>,
    requires: bool,
    op: Op<F>,
    scope: Option<usize>,
}

/// Reverse-mode differentiation graph with live-element instrumentation.
///
/// Nodes form an arena; handles ([`Var`]) are indices. Parents always precede
/// children, so one reverse sweep implements backward. A fresh graph per
/// training step is the intended usage.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    live: usize,
    peak: usize,
    scopes: Vec<(String, usize, usize)>,
    scope_stack: Vec<usize>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), live: 0, peak: 0, scopes: Vec::new(), scope_stack: Vec::new() }
    }

    fn record_alloc(&mut self, elems: usize, scope: Option<usize>) {
        self.live += elems;
        self.peak = self.peak.max(self.live);
        if let Some(s) = scope {
            let entry = &mut self.scopes[s];
            entry.1 += elems;
            entry.2 = entry.2.max(entry.1);
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<F>, requires: bool, op: Op<F>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let scope = self.scope_stack.last().copied();
        let extra = match &op {
            Op::LayerNorm { xhat, inv_std, .. } => xhat.len() + inv_std.len(),
            _ => 0,
        };
        self.record_alloc(data.len() + extra, scope);
        self.nodes.push(Node { shape, data, grad: None, requires, op, scope });
        Var(self.nodes.len() - 1)
    }

    /// Maximum number of scalar elements simultaneously alive since creation.
    pub fn peak_live_elements(&self) -> usize {
        self.peak
    }

    pub fn live_elements(&self) -> usize {
        self.live
    }

    /// Peak live elements attributed to a named scope (0 if never entered).
    pub fn scope_peak(&self, name: &str) -> usize {
        self.scopes.iter().find(|(n, _, _)| n == name).map(|(_, _, p)| *p).unwrap_or(0)
    }

    /// Run `f` with allocations attributed to `name` (innermost scope wins).
    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        let idx = match self.scopes.iter().position(|(n, _, _)| n == name) {
            Some(i) => i,
            None => {
                self.scopes.push((name.to_string(), 0, 0));
                self.scopes.len() - 1
            }
        };
        self.scope_stack.push(idx);
        let out = f(self);
        self.scope_stack.pop();
        out
    }

    // ── node access ──────────────────────────────────────────────

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[F] {
        &self.nodes[v.0].data
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<F> {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone()).unwrap()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), true, Op::Leaf)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    pub fn scalar(&mut self, v: F) -> Var {
        self.push(vec![], vec![v], false, Op::Leaf)
    }

    fn req2(&self, a: Var, b: Var) -> bool {
        self.nodes[a.0].requires || self.nodes[b.0].requires
    }

    // ── elementwise ──────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| *x + *y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, data, self.req2(a, b), Op::Add(a.0, b.0)))
    }

    /// a + b with b's shape a suffix of a's shape (bias broadcast).
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || &sa[sa.len() - sb.len()..] != sb {
            return Err(Error::Shape(format!("add_bias: {:?} vs {:?}", sa, sb)));
        }
        let bn = self.nodes[b.0].data.len().max(1);
        let data = self.nodes[a.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| *x + self.nodes[b.0].data[i % bn])
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, data, self.req2(a, b), Op::AddBias(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "sub: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| *x - *y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, data, self.req2(a, b), Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "mul: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| *x * *y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, data, self.req2(a, b), Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let data = self.nodes[a.0].data.iter().map(|x| *x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let req = self.nodes[a.0].requires;
        self.push(shape, data, req, Op::Scale(a.0, c))
    }

    // ── matmul ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// a @ bᵀ over the last two axes (b laid out [.., n, k]).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || Error::Shape(format!("matmul: {:?} x {:?} (trans_b={})", sa, sb, trans_b));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, ka) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if ka != kb {
            return Err(err());
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let (batch_dims, a_broadcast, b_broadcast) = if ba == bb {
            (ba.to_vec(), false, false)
        } else if ba.is_empty() {
            (bb.to_vec(), true, false)
        } else if bb.is_empty() {
            (ba.to_vec(), false, true)
        } else {
            return Err(err());
        };
        let batch: usize = batch_dims.iter().product::<usize>().max(1);
        let k = ka;
        let mut out = vec![F::zero(); batch * m * n];
        for bi in 0..batch {
            let ao = if a_broadcast { 0 } else { bi * m * k };
            let bo = if b_broadcast { 0 } else { bi * k * n };
            let co = bi * m * n;
            let av = &self.nodes[a.0].data[ao..ao + m * k];
            let bv = &self.nodes[b.0].data[bo..bo + k * n];
            let cv = &mut out[co..co + m * n];
            if trans_b {
                mm_nt_acc(av, bv, m, k, n, cv);
            } else {
                mm_acc(av, bv, m, k, n, cv);
            }
        }
        let mut shape = batch_dims;
        shape.push(m);
        shape.push(n);
        Ok(self.push(
            shape,
            out,
            self.req2(a, b),
            Op::Matmul { a: a.0, b: b.0, trans_b, batch, a_broadcast, b_broadcast, m, k, n },
        ))
    }

    // ── normalization & activation ───────────────────────────────

    /// Softmax along `axis`, max-subtracted for stability.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis { axis, rank: shape.len() });
        }
        let lane = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = &self.nodes[x.0].data;
        let mut out = vec![F::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lane * inner + i;
                let mut mx = F::neg_infinity();
                for l in 0..lane {
                    mx = mx.max(src[base + l * inner]);
                }
                let mut sum = F::zero();
                for l in 0..lane {
                    let e = (src[base + l * inner] - mx).exp();
                    out[base + l * inner] = e;
                    sum += e;
                }
                for l in 0..lane {
                    out[base + l * inner] /= sum;
                }
            }
        }
        let req = self.nodes[x.0].requires;
        Ok(self.push(shape, out, req, Op::Softmax { x: x.0, axis }))
    }

    /// Per-last-axis-vector normalization with affine gain/bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::Shape("layer_norm: rank 0 input".into()))?;
        if d < 1 {
            return Err(Error::Shape("layer_norm: empty last axis".into()));
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Shape(format!(
                "layer_norm: gain {:?} / bias {:?} vs last extent {}",
                self.shape(gain),
                self.shape(bias),
                d
            )));
        }
        let rows = self.nodes[x.0].data.len() / d;
        let src = &self.nodes[x.0].data;
        let g = &self.nodes[gain.0].data;
        let b = &self.nodes[bias.0].data;
        let mut out = vec![F::zero(); src.len()];
        let mut xhat = vec![F::zero(); src.len()];
        let mut inv_std = vec![F::zero(); rows];
        let dn = F::from_usize_(d);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / dn;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<F>() / dn;
            let is = (var + eps).sqrt().recip();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let req = self.nodes[x.0].requires || self.req2(gain, bias);
        Ok(self.push(shape, out, req, Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, xhat, inv_std }))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.nodes[x.0].data.iter().map(|v| gelu_val(*v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let req = self.nodes[x.0].requires;
        self.push(shape, data, req, Op::Gelu(x.0))
    }

    // ── gather / structure ───────────────────────────────────────

    /// Batched bilinear lookups into a plane shaped [rows, cols, d].
    /// Output is [queries.len(), d]. Weights are constants; gradient flows
    /// into the plane values only.
    pub fn bilinear_gather(&mut self, plane: Var, queries: Vec<BilinQuery<F>>) -> Result<Var> {
        let sp = self.shape(plane).to_vec();
        if sp.len() != 3 {
            return Err(Error::Shape(format!("bilinear_gather: plane must be rank 3, got {:?}", sp)));
        }
        let (rows, cols, d) = (sp[0], sp[1], sp[2]);
        let n = queries.len();
        let src = &self.nodes[plane.0].data;
        let mut out = vec![F::zero(); n * d];
        for (qi, q) in queries.iter().enumerate() {
            if q.l1 >= rows || q.m1 >= cols {
                return Err(Error::Input(format!("bilinear query ({},{}) outside plane {}x{}", q.l1, q.m1, rows, cols)));
            }
            let one = F::one();
            let w00 = (one - q.wu) * (one - q.wv);
            let w01 = (one - q.wu) * q.wv;
            let w10 = q.wu * (one - q.wv);
            let w11 = q.wu * q.wv;
            let o = &mut out[qi * d..(qi + 1) * d];
            for (corner, w) in [
                ((q.l, q.m), w00),
                ((q.l, q.m1), w01),
                ((q.l1, q.m), w10),
                ((q.l1, q.m1), w11),
            ] {
                if w == F::zero() {
                    continue;
                }
                let base = (corner.0 * cols + corner.1) * d;
                for j in 0..d {
                    o[j] += w * src[base + j];
                }
            }
        }
        let req = self.nodes[plane.0].requires;
        Ok(self.push(vec![n, d], out, req, Op::BilinearGather { plane: plane.0, cols, d, queries }))
    }

    /// Single bilinear lookup at fractional grid position (u, w) into a plane
    /// shaped [a, b, d]; u in [0, a-1], w in [0, b-1]. Returns a [d] vector.
    pub fn bilinear_sample(&mut self, plane: Var, u: F, w: F) -> Result<Var> {
        let sp = self.shape(plane).to_vec();
        if sp.len() != 3 {
            return Err(Error::Shape(format!("bilinear_sample: plane must be rank 3, got {:?}", sp)));
        }
        if !u.is_finite() || !w.is_finite() {
            return Err(Error::Input("bilinear_sample: non-finite coordinate".into()));
        }
        let q = split_axis(u, sp[0]).merge(split_axis(w, sp[1]));
        let d = sp[2];
        let out = self.bilinear_gather(plane, vec![q])?;
        self.reshape(out, vec![d])
    }

    /// Concatenate along the last axis; leading dims must match.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_last: no inputs".into()));
        }
        let lead = self.shape(parts[0])[..self.shape(parts[0]).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::Shape(format!("concat_last: leading dims differ: {:?} vs {:?}", lead, s)));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product::<usize>().max(1);
        let total: usize = widths.iter().sum();
        let mut out = vec![F::zero(); rows * total];
        let mut off = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let src = &self.nodes[p.0].data;
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = lead;
        shape.push(total);
        let req = parts.iter().any(|p| self.nodes[p.0].requires);
        Ok(self.push(shape, out, req, Op::ConcatLast { parts: parts.iter().map(|p| p.0).collect(), widths }))
    }

    /// Concatenate along axis 0; trailing dims must match.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows: no inputs".into()));
        }
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut rows = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for p in parts {
            let s = self.shape(*p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::Shape(format!(
                    "concat_rows: trailing dims differ: {:?} vs {:?}",
                    tail, s
                )));
            }
            rows.push(s[0]);
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let row: usize = tail.iter().product::<usize>().max(1);
        let mut shape = vec![rows.iter().sum()];
        shape.extend_from_slice(&tail);
        let req = parts.iter().any(|p| self.nodes[p.0].requires);
        Ok(self.push(
            shape,
            data,
            req,
            Op::ConcatRows { parts: parts.iter().map(|p| p.0).collect(), rows, row },
        ))
    }

    /// Rows [start, start+len) along axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || start + len > s[0] {
            return Err(Error::Shape(format!("slice_rows: [{}, {}) of {:?}", start, start + len, s)));
        }
        let row: usize = s[1..].iter().product::<usize>().max(1);
        let data = self.nodes[x.0].data[start * row..(start + len) * row].to_vec();
        let mut shape = s;
        shape[0] = len;
        let req = self.nodes[x.0].requires;
        Ok(self.push(shape, data, req, Op::SliceRows { x: x.0, start, row }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].data.len() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?}",
                self.shape(x),
                shape
            )));
        }
        let data = self.nodes[x.0].data.clone();
        let req = self.nodes[x.0].requires;
        Ok(self.push(shape, data, req, Op::Reshape(x.0)))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("permute: {:?} on rank {}", perm, s.len())));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let mut out = vec![F::zero(); self.nodes[x.0].data.len()];
        permute_copy(&self.nodes[x.0].data, &s, perm, &mut out);
        let req = self.nodes[x.0].requires;
        Ok(self.push(out_shape, out, req, Op::Permute { x: x.0, perm: perm.to_vec() }))
    }

    // ── reductions ───────────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Var {
        let s: F = self.nodes[x.0].data.iter().copied().sum();
        let req = self.nodes[x.0].requires;
        self.push(vec![], vec![s], req, Op::Sum(x.0))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = F::from_usize_(self.nodes[x.0].data.len());
        let s: F = self.nodes[x.0].data.iter().copied().sum::<F>() / n;
        let req = self.nodes[x.0].requires;
        self.push(vec![], vec![s], req, Op::Mean(x.0))
    }

    /// Mean over the last axis: [.., C] -> [..].
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = *s.last().ok_or_else(|| Error::Shape("channel_mean: rank 0".into()))?;
        let rows = self.nodes[x.0].data.len() / c;
        let cn = F::from_usize_(c);
        let src = &self.nodes[x.0].data;
        let out: Vec<F> = (0..rows)
            .map(|r| src[r * c..(r + 1) * c].iter().copied().sum::<F>() / cn)
            .collect();
        let req = self.nodes[x.0].requires;
        Ok(self.push(s[..s.len() - 1].to_vec(), out, req, Op::ChannelMean(x.0)))
    }

    /// 3x3 convolution with replicate padding over the last two axes,
    /// applied independently per leading index.
    pub fn conv3x3(&mut self, x: Var, kernel: [F; 9]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::Shape(format!("conv3x3: need rank >= 2, got {:?}", s)));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        if h < 1 || w < 1 {
            return Err(Error::Shape("conv3x3: empty spatial extent".into()));
        }
        let frames = self.nodes[x.0].data.len() / (h * w);
        let src = &self.nodes[x.0].data;
        let mut out = vec![F::zero(); src.len()];
        for f in 0..frames {
            let base = f * h * w;
            conv3x3_replicate(&src[base..base + h * w], h, w, &kernel, &mut out[base..base + h * w]);
        }
        let req = self.nodes[x.0].requires;
        Ok(self.push(s, out, req, Op::Conv3x3 { x: x.0, kernel, h, w }))
    }

    /// Elementwise sqrt(x + eps).
    pub fn sqrt_eps(&mut self, x: Var, eps: F) -> Var {
        let data = self.nodes[x.0].data.iter().map(|v| (*v + eps).sqrt()).collect();
        let shape = self.nodes[x.0].shape.clone();
        let req = self.nodes[x.0].requires;
        self.push(shape, data, req, Op::SqrtEps(x.0))
    }

    /// Mean squared error against a constant tensor.
    pub fn mse_against(&mut self, pred: Var, target: &Tensor<F>) -> Result<Var> {
        let t = self.constant(target);
        let d = self.sub(pred, t)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    // ── backward ─────────────────────────────────────────────────

    /// Populate gradients of all reachable requires-grad nodes. Repeated
    /// calls without a fresh graph accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Shape(format!(
                "backward: loss must be scalar, got {:?}",
                self.shape(loss)
            )));
        }
        if self.nodes[loss.0].requires {
            self.accumulate_grad(loss.0, None);
            if let Some(g) = self.nodes[loss.0].grad.as_mut() {
                g[0] += F::one();
            }
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires || self.nodes[i].grad.is_none() {
                continue;
            }
            let contribs = self.node_backward(i);
            for (pid, c) in contribs {
                self.accumulate_grad(pid, Some(c));
            }
            if !matches!(self.nodes[i].op, Op::Leaf) {
                // Intermediate grads are consumed; free them so the meter
                // reflects what must stay resident. Each backward call then
                // seeds the loss afresh, so leaf grads accumulate per call.
                if let Some(g) = self.nodes[i].grad.take() {
                    self.live -= g.len();
                    if let Some(s) = self.nodes[i].scope {
                        self.scopes[s].1 -= g.len();
                    }
                }
            }
        }
        // Zero-fill reachable requires-grad leaves untouched by the sweep.
        for i in 0..self.nodes.len() {
            if self.nodes[i].requires && matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].grad.is_none() {
                self.accumulate_grad(i, None);
            }
        }
        Ok(())
    }

    fn accumulate_grad(&mut self, id: usize, contrib: Option<Vec<F>>) {
        if self.nodes[id].grad.is_none() {
            let n = self.nodes[id].data.len();
            let scope = self.nodes[id].scope;
            self.record_alloc(n, scope);
            self.nodes[id].grad = Some(vec![F::zero(); n]);
        }
        if let Some(c) = contrib {
            let g = self.nodes[id].grad.as_mut().unwrap();
            debug_assert_eq!(g.len(), c.len());
            for (gv, cv) in g.iter_mut().zip(&c) {
                *gv += *cv;
            }
        }
    }

    /// Gradient contributions of node `i` to each requires-grad parent.
    fn node_backward(&self, i: usize) -> Vec<(usize, Vec<F>)> {
        let node = &self.nodes[i];
        let g = node.grad.as_ref().unwrap();
        let req = |id: usize| self.nodes[id].requires;
        let numel = |id: usize| self.nodes[id].data.len();
        let mut out: Vec<(usize, Vec<F>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if req(*a) {
                    out.push((*a, g.clone()));
                }
                if req(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::AddBias(a, b) => {
                if req(*a) {
                    out.push((*a, g.clone()));
                }
                if req(*b) {
                    let bn = numel(*b);
                    let mut db = vec![F::zero(); bn];
                    for (i, gv) in g.iter().enumerate() {
                        db[i % bn] += *gv;
                    }
                    out.push((*b, db));
                }
            }
            Op::Sub(a, b) => {
                if req(*a) {
                    out.push((*a, g.clone()));
                }
                if req(*b) {
                    out.push((*b, g.iter().map(|v| -*v).collect()));
                }
            }
            Op::Mul(a, b) => {
                if req(*a) {
                    out.push((*a, g.iter().zip(&self.nodes[*b].data).map(|(gv, bv)| *gv * *bv).collect()));
                }
                if req(*b) {
                    out.push((*b, g.iter().zip(&self.nodes[*a].data).map(|(gv, av)| *gv * *av).collect()));
                }
            }
            Op::Scale(a, c) => {
                if req(*a) {
                    out.push((*a, g.iter().map(|v| *v * *c).collect()));
                }
            }
            Op::Matmul { a, b, trans_b, batch, a_broadcast, b_broadcast, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let av = &self.nodes[*a].data;
                let bv = &self.nodes[*b].data;
                if req(*a) {
                    let mut da = vec![F::zero(); av.len()];
                    for bi in 0..*batch {
                        let go = bi * m * n;
                        let ao = if *a_broadcast { 0 } else { bi * m * k };
                        let bo = if *b_broadcast { 0 } else { bi * k * n };
                        let gs = &g[go..go + m * n];
                        let bs = &bv[bo..bo + k * n];
                        let ds = &mut da[ao..ao + m * k];
                        if *trans_b {
                            // b is [n,k]: da = g @ b
                            mm_acc(gs, bs, m, n, k, ds);
                        } else {
                            mm_nt_acc(gs, bs, m, n, k, ds);
                        }
                    }
                    out.push((*a, da));
                }
                if req(*b) {
                    let mut db = vec![F::zero(); bv.len()];
                    for bi in 0..*batch {
                        let go = bi * m * n;
                        let ao = if *a_broadcast { 0 } else { bi * m * k };
                        let bo = if *b_broadcast { 0 } else { bi * k * n };
                        let gs = &g[go..go + m * n];
                        let as_ = &av[ao..ao + m * k];
                        let ds = &mut db[bo..bo + k * n];
                        if *trans_b {
                            // db [n,k] = gᵀ @ a
                            mm_tn_acc(gs, as_, m, n, k, ds);
                        } else {
                            mm_tn_acc(as_, gs, m, k, n, ds);
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::Softmax { x, axis } => {
                if req(*x) {
                    let y = &node.data;
                    let shape = &node.shape;
                    let lane = shape[*axis];
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let outer: usize = shape[..*axis].iter().product();
                    let mut dx = vec![F::zero(); y.len()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * lane * inner + ii;
                            let mut dot = F::zero();
                            for l in 0..lane {
                                let idx = base + l * inner;
                                dot += g[idx] * y[idx];
                            }
                            for l in 0..lane {
                                let idx = base + l * inner;
                                dx[idx] = y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = *node.shape.last().unwrap();
                let rows = node.data.len() / d;
                let gw = &self.nodes[*gain].data;
                if req(*gain) {
                    let mut dg = vec![F::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    out.push((*gain, dg));
                }
                if req(*bias) {
                    let mut db = vec![F::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                    out.push((*bias, db));
                }
                if req(*x) {
                    let dn = F::from_usize_(d);
                    let mut dx = vec![F::zero(); node.data.len()];
                    for r in 0..rows {
                        let mut mean_dxh = F::zero();
                        let mut mean_dxh_xh = F::zero();
                        for j in 0..d {
                            let dxh = g[r * d + j] * gw[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xhat[r * d + j];
                        }
                        mean_dxh /= dn;
                        mean_dxh_xh /= dn;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gw[j];
                            dx[r * d + j] = inv_std[r] * (dxh - mean_dxh - xhat[r * d + j] * mean_dxh_xh);
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Gelu(x) => {
                if req(*x) {
                    let dx = self.nodes[*x]
                        .data
                        .iter()
                        .zip(g)
                        .map(|(v, gv)| *gv * gelu_grad(*v))
                        .collect();
                    out.push((*x, dx));
                }
            }
            Op::BilinearGather { plane, cols, d, queries } => {
                if req(*plane) {
                    let mut dp = vec![F::zero(); numel(*plane)];
                    for (qi, q) in queries.iter().enumerate() {
                        let one = F::one();
                        let gs = &g[qi * d..(qi + 1) * d];
                        for (corner, w) in [
                            ((q.l, q.m), (one - q.wu) * (one - q.wv)),
                            ((q.l, q.m1), (one - q.wu) * q.wv),
                            ((q.l1, q.m), q.wu * (one - q.wv)),
                            ((q.l1, q.m1), q.wu * q.wv),
                        ] {
                            if w == F::zero() {
                                continue;
                            }
                            let base = (corner.0 * cols + corner.1) * d;
                            for j in 0..*d {
                                dp[base + j] += w * gs[j];
                            }
                        }
                    }
                    out.push((*plane, dp));
                }
            }
            Op::ConcatLast { parts, widths } => {
                let total: usize = widths.iter().sum();
                let rows = node.data.len() / total;
                let mut off = 0;
                for (p, w) in parts.iter().zip(widths) {
                    if req(*p) {
                        let mut dp = vec![F::zero(); rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w].copy_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        out.push((*p, dp));
                    }
                    off += w;
                }
            }
            Op::ConcatRows { parts, rows, row } => {
                let mut off = 0;
                for (p, r) in parts.iter().zip(rows) {
                    let n = r * row;
                    if req(*p) {
                        out.push((*p, g[off..off + n].to_vec()));
                    }
                    off += n;
                }
            }
            Op::SliceRows { x, start, row } => {
                if req(*x) {
                    let mut dx = vec![F::zero(); numel(*x)];
                    dx[start * row..start * row + g.len()].copy_from_slice(g);
                    out.push((*x, dx));
                }
            }
            Op::Reshape(x) => {
                if req(*x) {
                    out.push((*x, g.clone()));
                }
            }
            Op::Permute { x, perm } => {
                if req(*x) {
                    let mut inv = vec![0usize; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let mut dx = vec![F::zero(); numel(*x)];
                    permute_copy(g, &node.shape, &inv, &mut dx);
                    out.push((*x, dx));
                }
            }
            Op::Sum(x) => {
                if req(*x) {
                    out.push((*x, vec![g[0]; numel(*x)]));
                }
            }
            Op::Mean(x) => {
                if req(*x) {
                    let n = numel(*x);
                    out.push((*x, vec![g[0] / F::from_usize_(n); n]));
                }
            }
            Op::ChannelMean(x) => {
                if req(*x) {
                    let xn = numel(*x);
                    let c = xn / node.data.len();
                    let cn = F::from_usize_(c);
                    let mut dx = vec![F::zero(); xn];
                    for (r, gv) in g.iter().enumerate() {
                        for j in 0..c {
                            dx[r * c + j] = *gv / cn;
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Conv3x3 { x, kernel, h, w } => {
                if req(*x) {
                    let (h, w) = (*h, *w);
                    let frames = numel(*x) / (h * w);
                    let mut dx = vec![F::zero(); numel(*x)];
                    for f in 0..frames {
                        let base = f * h * w;
                        conv3x3_replicate_adjoint(&g[base..base + h * w], h, w, kernel, &mut dx[base..base + h * w]);
                    }
                    out.push((*x, dx));
                }
            }
            Op::SqrtEps(x) => {
                if req(*x) {
                    let half = F::from_f64(0.5);
                    let dx = node
                        .data
                        .iter()
                        .zip(g)
                        .map(|(y, gv)| *gv * half / *y)
                        .collect();
                    out.push((*x, dx));
                }
            }
        }
        out
    }
}

/// Floor index plus fractional weight for one axis, clamped so the upper
/// neighbor stays in range (extent-1 axes use constant lookup).
pub fn split_axis<F: Scalar>(u: F, extent: usize) -> AxisQuery<F> {
    if extent <= 1 {
        return AxisQuery { lo: 0, hi: 0, w: F::zero() };
    }
    let max_lo = extent - 2;
    let lo = u.floor().to_f64_().max(0.0) as usize;
    let lo = lo.min(max_lo);
    let w = (u - F::from_usize_(lo)).max(F::zero()).min(F::one());
    AxisQuery { lo, hi: lo + 1, w }
}

#[derive(Debug, Clone, Copy)]
pub struct AxisQuery<F> {
    pub lo: usize,
    pub hi: usize,
    pub w: F,
}

impl<F: Scalar> AxisQuery<F> {
    pub fn merge(self, other: AxisQuery<F>) -> BilinQuery<F> {
        BilinQuery { l: self.lo, l1: self.hi, wu: self.w, m: other.lo, m1: other.hi, wv: other.w }
    }
}

/// Per-head scaled dot-product attention over [B, L, D] (rank-2 [L, D]
/// inputs are treated as batch 1). Heads are concatenated; the output
/// projection is the caller's.
pub fn multi_head_attention<F: Scalar>(
    g: &mut Graph<F>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<Var> {
    let rank2 = g.shape(q).len() == 2;
    let (q, k, v) = if rank2 {
        let sq = g.shape(q).to_vec();
        let sk = g.shape(k).to_vec();
        let sv = g.shape(v).to_vec();
        (
            g.reshape(q, vec![1, sq[0], sq[1]])?,
            g.reshape(k, vec![1, sk[0], sk[1]])?,
            g.reshape(v, vec![1, sv[0], sv[1]])?,
        )
    } else {
        (q, k, v)
    };
    let (b, lq, d) = {
        let s = g.shape(q);
        (s[0], s[1], s[2])
    };
    let lk = g.shape(k)[1];
    if d % heads != 0 {
        return Err(Error::Shape(format!("attention: dim {} not divisible by {} heads", d, heads)));
    }
    if g.shape(k)[2] != d || g.shape(v)[2] != d || g.shape(v)[1] != lk || g.shape(k)[0] != b || g.shape(v)[0] != b {
        return Err(Error::Shape(format!(
            "attention: q {:?} k {:?} v {:?}",
            g.shape(q),
            g.shape(k),
            g.shape(v)
        )));
    }
    let dh = d / heads;
    let split = |g: &mut Graph<F>, x: Var, l: usize| -> Result<Var> {
        let x = g.reshape(x, vec![b, l, heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, vec![b * heads, l, dh])
    };
    let qh = split(g, q, lq)?;
    let kh = split(g, k, lk)?;
    let vh = split(g, v, lk)?;
    let scores = g.matmul_nt(qh, kh)?;
    let scaled = g.scale(scores, F::from_f64(1.0 / (dh as f64).sqrt()));
    let attn = g.softmax(scaled, 2)?;
    let ctx = g.matmul(attn, vh)?;
    let ctx = g.reshape(ctx, vec![b, heads, lq, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let out = g.reshape(ctx, vec![b, lq, d])?;
    if rank2 {
        g.reshape(out, vec![lq, d])
    } else {
        Ok(out)
    }
}

// ── kernels ──────────────────────────────────────────────────────

/// out[i,j] += sum_p a[i,p] * b[p,j]
fn mm_acc<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, av) in arow.iter().enumerate() {
            if *av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += *av * *bv;
            }
        }
    }
}

/// b laid out [n,k]: out[i,j] += sum_p a[i,p] * b[j,p]
fn mm_nt_acc<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for (av, bv) in arow.iter().zip(brow) {
                acc += *av * *bv;
            }
            orow[j] += acc;
        }
    }
}

/// a laid out [r,m], b laid out [r,n]: out[i,j] += sum_r a[r,i] * b[r,j]
fn mm_tn_acc<F: Scalar>(a: &[F], b: &[F], r: usize, m: usize, n: usize, out: &mut [F]) {
    for ri in 0..r {
        let arow = &a[ri * m..(ri + 1) * m];
        let brow = &b[ri * n..(ri + 1) * n];
        for (i, av) in arow.iter().enumerate() {
            if *av == F::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += *av * *bv;
            }
        }
    }
}

fn permute_copy<F: Scalar>(src: &[F], in_shape: &[usize], perm: &[usize], dst: &mut [F]) {
    let rank = in_shape.len();
    if rank == 0 {
        dst[0] = src[0];
        return;
    }
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut idx = vec![0usize; rank];
    for o in dst.iter_mut() {
        let mut src_off = 0;
        for (d, &i) in idx.iter().enumerate() {
            src_off += i * in_strides[perm[d]];
        }
        *o = src[src_off];
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn clampi(v: isize, hi: usize) -> usize {
    v.clamp(0, hi as isize - 1) as usize
}

fn conv3x3_replicate<F: Scalar>(src: &[F], h: usize, w: usize, kernel: &[F; 9], out: &mut [F]) {
    for i in 0..h {
        for j in 0..w {
            let mut acc = F::zero();
            for di in 0..3 {
                let si = clampi(i as isize + di as isize - 1, h);
                for dj in 0..3 {
                    let sj = clampi(j as isize + dj as isize - 1, w);
                    acc += kernel[di * 3 + dj] * src[si * w + sj];
                }
            }
            out[i * w + j] = acc;
        }
    }
}

fn conv3x3_replicate_adjoint<F: Scalar>(g: &[F], h: usize, w: usize, kernel: &[F; 9], dx: &mut [F]) {
    for i in 0..h {
        for j in 0..w {
            let gv = g[i * w + j];
            if gv == F::zero() {
                continue;
            }
            for di in 0..3 {
                let si = clampi(i as isize + di as isize - 1, h);
                for dj in 0..3 {
                    let sj = clampi(j as isize + dj as isize - 1, w);
                    dx[si * w + sj] += kernel[di * 3 + dj] * gv;
                }
            }
        }
    }
}

fn gelu_val<F: Scalar>(x: F) -> F {
    let c = F::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::from_f64(0.7978845608028654);
    let a = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f64>::new();
        let i2 = g.constant(&t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let a = g.constant(&t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let c = g.matmul(i2, a).unwrap();
        assert_eq!(g.data(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_case() {
        // [[1,2]] x [[3],[4]] = [[11]]
        let mut g = Graph::<f64>::new();
        let a = g.constant(&t(vec![1, 2], vec![1.0, 2.0]));
        let b = g.constant(&t(vec![2, 1], vec![3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[11.0]);
    }

    #[test]
    fn matmul_zero() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(&Tensor::zeros(vec![2, 3]));
        let b = g.constant(&t(vec![3, 2], vec![1.0; 6]));
        let c = g.matmul(z, b).unwrap();
        assert!(g.data(c).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(&Tensor::zeros(vec![2, 3]));
        let b = g.constant(&Tensor::zeros(vec![4, 2]));
        let e = g.matmul(a, b).unwrap_err().to_string();
        assert!(e.contains("[2, 3]") && e.contains("[4, 2]"), "{e}");
    }

    #[test]
    fn softmax_symmetry_and_shift() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&t(vec![2], vec![0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.data(y), &[0.5, 0.5]);
        let x2 = g.constant(&t(vec![2], vec![1000.0, 1000.0]));
        let y2 = g.softmax(x2, 0).unwrap();
        assert_eq!(g.data(y2), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_closed_form() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&t(vec![2], vec![0.0, 3.0f64.ln()]));
        let y = g.softmax(x, 0).unwrap();
        assert!((g.data(y)[0] - 0.25).abs() < 1e-12);
        assert!((g.data(y)[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_axis_out_of_range() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&t(vec![2], vec![0.0, 1.0]));
        assert!(matches!(g.softmax(x, 1), Err(Error::Axis { axis: 1, rank: 1 })));
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::<f64>::new();
        let one = g.constant(&t(vec![2], vec![1.0, 1.0]));
        let zero = g.constant(&t(vec![2], vec![0.0, 0.0]));
        // constant vector -> zeros
        let x = g.constant(&t(vec![2], vec![5.0, 5.0]));
        let y = g.layer_norm(x, one, zero, 1e-5).unwrap();
        assert!(g.data(y).iter().all(|v| v.abs() < 1e-9));
        // [1,3] -> ~[-1,1]
        let x2 = g.constant(&t(vec![2], vec![1.0, 3.0]));
        let y2 = g.layer_norm(x2, one, zero, 1e-5).unwrap();
        assert!((g.data(y2)[0] + 1.0).abs() < 1e-4);
        assert!((g.data(y2)[1] - 1.0).abs() < 1e-4);
        // gain 0 -> bias broadcast
        let b = g.constant(&t(vec![2], vec![0.3, -0.7]));
        let y3 = g.layer_norm(x2, zero, b, 1e-5).unwrap();
        assert_eq!(g.data(y3), &[0.3, -0.7]);
    }

    #[test]
    fn gelu_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&t(vec![3], vec![0.0, 10.0, 1.0]));
        let y = g.gelu(x);
        assert_eq!(g.data(y)[0], 0.0);
        assert!((g.data(y)[1] - 10.0).abs() < 1e-6);
        // independent scalar evaluation of the tanh form at x=1
        let expect = 0.5 * (1.0 + (0.7978845608028654f64 * (1.0 + 0.044715)).tanh());
        assert!((g.data(y)[2] - expect).abs() < 1e-12);
    }

    #[test]
    fn attention_single_token_returns_value() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(&t(vec![1, 4], vec![0.3, -0.2, 1.0, 0.5]));
        let v = g.constant(&t(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]));
        let out = multi_head_attention(&mut g, q, q, v, 2).unwrap();
        for (a, b) in g.data(out).iter().zip(g.data(v)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_identical_keys_mean_of_values() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(&t(vec![1, 2], vec![0.7, -0.1]));
        let k = g.constant(&t(vec![3, 2], vec![0.4, 0.4, 0.4, 0.4, 0.4, 0.4]));
        let v = g.constant(&t(vec![3, 2], vec![1.0, 0.0, 2.0, 3.0, 6.0, 0.0]));
        let out = multi_head_attention(&mut g, q, k, v, 1).unwrap();
        assert!((g.data(out)[0] - 3.0).abs() < 1e-12);
        assert!((g.data(out)[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn attention_matches_dense_oracle_two_tokens() {
        // brute-force single-head attention for a 2-token sequence
        let qd = [0.2, -0.5, 0.1, 0.9];
        let kd = [0.3, 0.8, -0.4, 0.2];
        let vd = [1.0, 2.0, -1.0, 0.5];
        let d = 2.0f64;
        let mut expect = [0.0f64; 4];
        for i in 0..2 {
            let mut logits = [0.0f64; 2];
            for j in 0..2 {
                logits[j] = (qd[i * 2] * kd[j * 2] + qd[i * 2 + 1] * kd[j * 2 + 1]) / d.sqrt();
            }
            let mx = logits[0].max(logits[1]);
            let e0 = (logits[0] - mx).exp();
            let e1 = (logits[1] - mx).exp();
            let s = e0 + e1;
            expect[i * 2] = (e0 * vd[0] + e1 * vd[2]) / s;
            expect[i * 2 + 1] = (e0 * vd[1] + e1 * vd[3]) / s;
        }
        let mut g = Graph::<f64>::new();
        let q = g.constant(&t(vec![2, 2], qd.to_vec()));
        let k = g.constant(&t(vec![2, 2], kd.to_vec()));
        let v = g.constant(&t(vec![2, 2], vd.to_vec()));
        let out = multi_head_attention(&mut g, q, k, v, 1).unwrap();
        for (a, b) in g.data(out).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_head_divisibility() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(&Tensor::zeros(vec![2, 3]));
        assert!(multi_head_attention(&mut g, q, q, q, 2).is_err());
    }

    #[test]
    fn bilinear_node_exact_and_constant() {
        let mut g = Graph::<f64>::new();
        let plane = g.constant(&t(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]));
        let v = g.bilinear_sample(plane, 1.0, 0.0).unwrap();
        assert_eq!(g.data(v), &[3.0]);
        // cell center = average of the 4 corners
        let c = g.bilinear_sample(plane, 0.5, 0.5).unwrap();
        assert!((g.data(c)[0] - 2.5).abs() < 1e-12);
        let konst = g.constant(&Tensor::full(vec![3, 4, 2], 7.0));
        let k = g.bilinear_sample(konst, 1.3, 2.7).unwrap();
        assert!(g.data(k).iter().all(|v| (*v - 7.0).abs() < 1e-12));
    }

    #[test]
    fn bilinear_rejects_non_finite() {
        let mut g = Graph::<f64>::new();
        let plane = g.constant(&Tensor::zeros(vec![2, 2, 1]));
        assert!(g.bilinear_sample(plane, f64::NAN, 0.0).is_err());
    }

    #[test]
    fn backward_square() {
        let mut g = Graph::<f64>::new();
        let x = g.param(&Tensor::scalar(3.0));
        let x2 = g.reshape(x, vec![1]).unwrap();
        let y = g.mul(x2, x2).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert!((g.grad(x).unwrap()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn backward_sum_ones_and_constant() {
        let mut g = Graph::<f64>::new();
        let x = g.param(&t(vec![3], vec![1.0, -2.0, 0.5]));
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g2 = Graph::<f64>::new();
        let p = g2.param(&t(vec![2], vec![1.0, 2.0]));
        let c = g2.constant(&Tensor::scalar(5.0));
        g2.backward(c).unwrap();
        assert_eq!(g2.grad(p).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_accumulates_on_repeat() {
        let mut g = Graph::<f64>::new();
        let x = g.param(&t(vec![2], vec![1.0, 2.0]));
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param(&t(vec![2], vec![1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn meter_counts_allocations() {
        let mut g = Graph::<f64>::new();
        assert_eq!(g.peak_live_elements(), 0);
        g.constant(&Tensor::zeros(vec![10]));
        assert!(g.peak_live_elements() >= 10);
    }

    #[test]
    fn permute_roundtrip() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&t(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = g.permute(x, &[1, 0]).unwrap();
        assert_eq!(g.shape(y), &[3, 2]);
        assert_eq!(g.data(y), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let z = g.permute(y, &[1, 0]).unwrap();
        assert_eq!(g.data(z), g.data(x));
    }

    #[test]
    fn concat_and_slice() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(&t(vec![2, 1], vec![1.0, 2.0]));
        let b = g.constant(&t(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]));
        let c = g.concat_last(&[a, b]).unwrap();
        assert_eq!(g.data(c), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = g.slice_rows(c, 1, 1).unwrap();
        assert_eq!(g.data(s), &[2.0, 5.0, 6.0]);
    }
}
