//! Pre-norm transformer over a window of observation frames, with gradients
//! derived layer by layer. All parameters live in one flat vector.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::obs::{OBS_DIM, OMEGA_DIM};
use crate::seeds::substream;
use crate::skills::N_SKILLS;
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub obs_dim: usize,
    pub n_skills: usize,
    pub omega_dim: usize,
    pub window: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
}

impl ModelConfig {
    pub fn new(window: usize, d_model: usize, layers: usize, heads: usize) -> Self {
        Self {
            obs_dim: OBS_DIM,
            n_skills: N_SKILLS,
            omega_dim: OMEGA_DIM,
            window,
            d_model,
            layers,
            heads,
            d_ff: 2 * d_model,
        }
    }

    /// Output row: `[logits_L, logits_R, omega_L, omega_R]`.
    pub fn out_dim(&self) -> usize {
        2 * self.n_skills + 2 * self.omega_dim
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.obs_dim > 0
            && self.window >= 1
            && self.d_model >= 1
            && self.heads >= 1
            && self.d_model % self.heads == 0
            && self.d_ff >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid model shape: window {} d_model {} heads {} d_ff {}",
                self.window, self.d_model, self.heads, self.d_ff
            )))
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockLayout {
    ln1_g: usize,
    ln1_b: usize,
    w_qkv: usize,
    b_qkv: usize,
    w_o: usize,
    b_o: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    w_e: usize,
    b_e: usize,
    pos: usize,
    blocks: Vec<BlockLayout>,
    lnf_g: usize,
    lnf_b: usize,
    w_h: usize,
    b_h: usize,
    tensors: Vec<(String, usize, usize)>,
    len: usize,
}

impl Layout {
    fn new(c: &ModelConfig) -> Self {
        let d = c.d_model;
        let mut tensors = Vec::new();
        let mut len = 0;
        let mut alloc = |name: String, n: usize| {
            let off = len;
            tensors.push((name, off, n));
            len += n;
            off
        };
        let w_e = alloc("embed.w".into(), c.obs_dim * d);
        let b_e = alloc("embed.b".into(), d);
        let pos = alloc("pos".into(), c.window * d);
        let blocks = (0..c.layers)
            .map(|l| BlockLayout {
                ln1_g: alloc(format!("block{l}.ln1.g"), d),
                ln1_b: alloc(format!("block{l}.ln1.b"), d),
                w_qkv: alloc(format!("block{l}.qkv.w"), d * 3 * d),
                b_qkv: alloc(format!("block{l}.qkv.b"), 3 * d),
                w_o: alloc(format!("block{l}.out.w"), d * d),
                b_o: alloc(format!("block{l}.out.b"), d),
                ln2_g: alloc(format!("block{l}.ln2.g"), d),
                ln2_b: alloc(format!("block{l}.ln2.b"), d),
                w1: alloc(format!("block{l}.ff1.w"), d * c.d_ff),
                b1: alloc(format!("block{l}.ff1.b"), c.d_ff),
                w2: alloc(format!("block{l}.ff2.w"), c.d_ff * d),
                b2: alloc(format!("block{l}.ff2.b"), d),
            })
            .collect();
        let lnf_g = alloc("final.ln.g".into(), d);
        let lnf_b = alloc("final.ln.b".into(), d);
        let w_h = alloc("heads.w".into(), d * c.out_dim());
        let b_h = alloc("heads.b".into(), c.out_dim());
        Self {
            w_e,
            b_e,
            pos,
            blocks,
            lnf_g,
            lnf_b,
            w_h,
            b_h,
            tensors,
            len,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    layout: Layout,
    pub params: Vec<f64>,
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

struct BlockCache {
    x: Vec<f64>,
    ln1: LnCache,
    z1: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    att: Vec<f64>,
    ln2: LnCache,
    z2: Vec<f64>,
    u: Vec<f64>,
    a: Vec<f64>,
}

/// Activations kept by `forward_cached` for `backward`.
pub struct Cache {
    batch: usize,
    input: Vec<f64>,
    blocks: Vec<BlockCache>,
    lnf: LnCache,
    zf: Vec<f64>,
}

impl Model {
    /// Random initialization: weights N(0, 1/fan_in), biases zero, norm gains
    /// one, positional table N(0, 0.1²).
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let mut params = vec![0.0; layout.len];
        let mut rng = substream(seed, "scheduler-init");
        let d = cfg.d_model;
        let mut fill = |params: &mut [f64], off: usize, n: usize, sd: f64| {
            let dist = Normal::new(0.0, sd).expect("positive sd");
            for p in &mut params[off..off + n] {
                *p = dist.sample(&mut rng);
            }
        };
        fill(&mut params, layout.w_e, cfg.obs_dim * d, (cfg.obs_dim as f64).powf(-0.5));
        fill(&mut params, layout.pos, cfg.window * d, 0.1);
        for b in &layout.blocks {
            fill(&mut params, b.w_qkv, d * 3 * d, (d as f64).powf(-0.5));
            fill(&mut params, b.w_o, d * d, (d as f64).powf(-0.5));
            fill(&mut params, b.w1, d * cfg.d_ff, (d as f64).powf(-0.5));
            fill(&mut params, b.w2, cfg.d_ff * d, (cfg.d_ff as f64).powf(-0.5));
        }
        fill(&mut params, layout.w_h, d * cfg.out_dim(), (d as f64).powf(-0.5));
        for b in &layout.blocks {
            params[b.ln1_g..b.ln1_g + d].fill(1.0);
            params[b.ln2_g..b.ln2_g + d].fill(1.0);
        }
        params[layout.lnf_g..layout.lnf_g + d].fill(1.0);
        Ok(Self { cfg, layout, params })
    }

    /// Builds a model around existing parameters.
    pub fn from_params(cfg: ModelConfig, params: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        if params.len() != layout.len {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                layout.len,
                params.len()
            )));
        }
        Ok(Self { cfg, layout, params })
    }

    pub fn n_params(&self) -> usize {
        self.layout.len
    }

    /// Named parameter tensors as `(name, offset, len)`.
    pub fn tensors(&self) -> &[(String, usize, usize)] {
        &self.layout.tensors
    }

    fn p(&self, off: usize, n: usize) -> &[f64] {
        &self.params[off..off + n]
    }

    /// Outputs for `batch` windows stored row-major as `batch × window × obs_dim`.
    pub fn forward(&self, input: &[f64], batch: usize) -> Vec<f64> {
        self.forward_cached(input, batch).0
    }

    pub fn forward_cached(&self, input: &[f64], batch: usize) -> (Vec<f64>, Cache) {
        let c = &self.cfg;
        let (h, d, f) = (c.window, c.d_model, c.d_ff);
        let n = batch * h;
        assert_eq!(input.len(), n * c.obs_dim, "window shape mismatch");
        let lay = &self.layout;

        let mut x = vec![0.0; n * d];
        gemm(n, c.obs_dim, d, input, false, self.p(lay.w_e, c.obs_dim * d), false, &mut x, 0.0);
        let b_e = self.p(lay.b_e, d);
        let pos = self.p(lay.pos, h * d);
        for (r, row) in x.chunks_mut(d).enumerate() {
            let t = r % h;
            for j in 0..d {
                row[j] += b_e[j] + pos[t * d + j];
            }
        }

        let mut blocks = Vec::with_capacity(c.layers);
        for bl in &lay.blocks {
            let (z1, ln1) = layer_norm(&x, d, self.p(bl.ln1_g, d), self.p(bl.ln1_b, d));
            let mut qkv = vec![0.0; n * 3 * d];
            gemm(n, d, 3 * d, &z1, false, self.p(bl.w_qkv, d * 3 * d), false, &mut qkv, 0.0);
            add_bias(&mut qkv, self.p(bl.b_qkv, 3 * d));
            let (att, probs) = attention(&qkv, batch, h, d, c.heads);
            let mut x1 = x.clone();
            gemm(n, d, d, &att, false, self.p(bl.w_o, d * d), false, &mut x1, 1.0);
            add_bias(&mut x1, self.p(bl.b_o, d));

            let (z2, ln2) = layer_norm(&x1, d, self.p(bl.ln2_g, d), self.p(bl.ln2_b, d));
            let mut u = vec![0.0; n * f];
            gemm(n, d, f, &z2, false, self.p(bl.w1, d * f), false, &mut u, 0.0);
            add_bias(&mut u, self.p(bl.b1, f));
            let a: Vec<f64> = u.iter().map(|&v| gelu(v)).collect();
            let mut out = x1;
            gemm(n, f, d, &a, false, self.p(bl.w2, f * d), false, &mut out, 1.0);
            add_bias(&mut out, self.p(bl.b2, d));

            let x_in = std::mem::replace(&mut x, out);
            blocks.push(BlockCache {
                x: x_in,
                ln1,
                z1,
                qkv,
                probs,
                att,
                ln2,
                z2,
                u,
                a,
            });
        }

        let mut last = vec![0.0; batch * d];
        for s in 0..batch {
            let r = s * h + h - 1;
            last[s * d..(s + 1) * d].copy_from_slice(&x[r * d..(r + 1) * d]);
        }
        let (zf, lnf) = layer_norm(&last, d, self.p(lay.lnf_g, d), self.p(lay.lnf_b, d));
        let o = c.out_dim();
        let mut out = vec![0.0; batch * o];
        gemm(batch, d, o, &zf, false, self.p(lay.w_h, d * o), false, &mut out, 0.0);
        add_bias(&mut out, self.p(lay.b_h, o));
        let cache = Cache {
            batch,
            input: input.to_vec(),
            blocks,
            lnf,
            zf,
        };
        (out, cache)
    }

    /// Accumulates into `grad` the gradient of a scalar whose derivative with
    /// respect to the outputs is `d_out`.
    pub fn backward(&self, cache: &Cache, d_out: &[f64], grad: &mut [f64]) {
        let c = &self.cfg;
        let (h, d, f, o) = (c.window, c.d_model, c.d_ff, c.out_dim());
        let batch = cache.batch;
        let n = batch * h;
        let lay = &self.layout;
        assert_eq!(d_out.len(), batch * o);
        assert_eq!(grad.len(), lay.len);

        gemm(d, batch, o, &cache.zf, true, d_out, false, &mut grad[lay.w_h..lay.w_h + d * o], 1.0);
        col_sum(d_out, o, &mut grad[lay.b_h..lay.b_h + o]);
        let mut dzf = vec![0.0; batch * d];
        gemm(batch, o, d, d_out, false, self.p(lay.w_h, d * o), true, &mut dzf, 0.0);
        let mut dlast = vec![0.0; batch * d];
        {
            let (dg, db) = split_pair(grad, lay.lnf_g, lay.lnf_b, d);
            layer_norm_back(&dzf, &cache.lnf, d, self.p(lay.lnf_g, d), dg, db, &mut dlast);
        }
        let mut dx = vec![0.0; n * d];
        for s in 0..batch {
            let r = s * h + h - 1;
            dx[r * d..(r + 1) * d].copy_from_slice(&dlast[s * d..(s + 1) * d]);
        }

        for (bl, bc) in lay.blocks.iter().zip(&cache.blocks).rev() {
            // Feedforward branch.
            gemm(f, n, d, &bc.a, true, &dx, false, &mut grad[bl.w2..bl.w2 + f * d], 1.0);
            col_sum(&dx, d, &mut grad[bl.b2..bl.b2 + d]);
            let mut du = vec![0.0; n * f];
            gemm(n, d, f, &dx, false, self.p(bl.w2, f * d), true, &mut du, 0.0);
            for (g, &u) in du.iter_mut().zip(&bc.u) {
                *g *= gelu_grad(u);
            }
            gemm(d, n, f, &bc.z2, true, &du, false, &mut grad[bl.w1..bl.w1 + d * f], 1.0);
            col_sum(&du, f, &mut grad[bl.b1..bl.b1 + f]);
            let mut dz2 = vec![0.0; n * d];
            gemm(n, f, d, &du, false, self.p(bl.w1, d * f), true, &mut dz2, 0.0);
            let mut dx1 = dx;
            {
                let (dg, db) = split_pair(grad, bl.ln2_g, bl.ln2_b, d);
                layer_norm_back(&dz2, &bc.ln2, d, self.p(bl.ln2_g, d), dg, db, &mut dx1);
            }

            // Attention branch.
            gemm(d, n, d, &bc.att, true, &dx1, false, &mut grad[bl.w_o..bl.w_o + d * d], 1.0);
            col_sum(&dx1, d, &mut grad[bl.b_o..bl.b_o + d]);
            let mut datt = vec![0.0; n * d];
            gemm(n, d, d, &dx1, false, self.p(bl.w_o, d * d), true, &mut datt, 0.0);
            let dqkv = attention_back(&datt, &bc.qkv, &bc.probs, batch, h, d, c.heads);
            gemm(d, n, 3 * d, &bc.z1, true, &dqkv, false, &mut grad[bl.w_qkv..bl.w_qkv + 3 * d * d], 1.0);
            col_sum(&dqkv, 3 * d, &mut grad[bl.b_qkv..bl.b_qkv + 3 * d]);
            let mut dz1 = vec![0.0; n * d];
            gemm(n, 3 * d, d, &dqkv, false, self.p(bl.w_qkv, 3 * d * d), true, &mut dz1, 0.0);
            let mut dx_in = dx1;
            {
                let (dg, db) = split_pair(grad, bl.ln1_g, bl.ln1_b, d);
                layer_norm_back(&dz1, &bc.ln1, d, self.p(bl.ln1_g, d), dg, db, &mut dx_in);
            }
            debug_assert_eq!(bc.x.len(), dx_in.len());
            dx = dx_in;
        }

        gemm(
            c.obs_dim,
            n,
            d,
            &cache.input,
            true,
            &dx,
            false,
            &mut grad[lay.w_e..lay.w_e + c.obs_dim * d],
            1.0,
        );
        col_sum(&dx, d, &mut grad[lay.b_e..lay.b_e + d]);
        let gpos = &mut grad[lay.pos..lay.pos + h * d];
        for (r, row) in dx.chunks(d).enumerate() {
            let t = r % h;
            for j in 0..d {
                gpos[t * d + j] += row[j];
            }
        }
    }
}

/// `c = op(a)·op(b) + beta·c` for row-major operands; `op(a)` is `m × k` and
/// `op(b)` is `k × n`. A transposed operand is stored with its dimensions
/// swapped.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold at least the extents implied by the strides,
    // checked above, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn add_bias(x: &mut [f64], b: &[f64]) {
    for row in x.chunks_mut(b.len()) {
        for (v, bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
}

fn col_sum(x: &[f64], width: usize, out: &mut [f64]) {
    for row in x.chunks(width) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// Disjoint mutable views of two adjacent equal-length tensors.
fn split_pair(grad: &mut [f64], first: usize, second: usize, n: usize) -> (&mut [f64], &mut [f64]) {
    assert_eq!(second, first + n);
    let (a, b) = grad[first..second + n].split_at_mut(n);
    (a, b)
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

fn layer_norm(x: &[f64], d: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, LnCache) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let xh = (row[j] - mean) * rs;
            xhat[r * d + j] = xh;
            y[r * d + j] = g[j] * xh + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Adds the input gradient into `dx`.
fn layer_norm_back(dy: &[f64], cache: &LnCache, d: usize, g: &[f64], dg: &mut [f64], db: &mut [f64], dx: &mut [f64]) {
    let mut dxhat = vec![0.0; d];
    for (r, &rs) in cache.rstd.iter().enumerate() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..d {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
            m1 += dxhat[j];
            m2 += dxhat[j] * xh[j];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        for j in 0..d {
            dx[r * d + j] += rs * (dxhat[j] - m1 - xh[j] * m2);
        }
    }
}

/// Full (bidirectional) multi-head attention within each window.
fn attention(qkv: &[f64], batch: usize, h: usize, d: usize, heads: usize) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut att = vec![0.0; batch * h * d];
    let mut probs = vec![0.0; batch * heads * h * h];
    let row = |s: usize, i: usize| (s * h + i) * 3 * d;
    for s in 0..batch {
        for hd in 0..heads {
            let base = (s * heads + hd) * h * h;
            for i in 0..h {
                let q = &qkv[row(s, i) + hd * dh..row(s, i) + (hd + 1) * dh];
                let p = &mut probs[base + i * h..base + (i + 1) * h];
                for j in 0..h {
                    let k = &qkv[row(s, j) + d + hd * dh..row(s, j) + d + (hd + 1) * dh];
                    p[j] = scale * q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>();
                }
                softmax_in_place(p);
                let out = &mut att[(s * h + i) * d + hd * dh..(s * h + i) * d + (hd + 1) * dh];
                for j in 0..h {
                    let v = &qkv[row(s, j) + 2 * d + hd * dh..row(s, j) + 2 * d + (hd + 1) * dh];
                    for (o, vv) in out.iter_mut().zip(v) {
                        *o += p[j] * vv;
                    }
                }
            }
        }
    }
    (att, probs)
}

fn attention_back(datt: &[f64], qkv: &[f64], probs: &[f64], batch: usize, h: usize, d: usize, heads: usize) -> Vec<f64> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dqkv = vec![0.0; qkv.len()];
    let row = |s: usize, i: usize| (s * h + i) * 3 * d;
    let mut dp = vec![0.0; h];
    for s in 0..batch {
        for hd in 0..heads {
            let base = (s * heads + hd) * h * h;
            for i in 0..h {
                let p = &probs[base + i * h..base + (i + 1) * h];
                let da = &datt[(s * h + i) * d + hd * dh..(s * h + i) * d + (hd + 1) * dh];
                for j in 0..h {
                    let vo = row(s, j) + 2 * d + hd * dh;
                    dp[j] = da.iter().zip(&qkv[vo..vo + dh]).map(|(a, b)| a * b).sum();
                    for c in 0..dh {
                        dqkv[vo + c] += p[j] * da[c];
                    }
                }
                let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                let qo = row(s, i) + hd * dh;
                for j in 0..h {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let ko = row(s, j) + d + hd * dh;
                    for c in 0..dh {
                        dqkv[qo + c] += ds * qkv[ko + c];
                        dqkv[ko + c] += ds * qkv[qo + c];
                    }
                }
            }
        }
    }
    dqkv
}

pub(crate) fn softmax_in_place(x: &mut [f64]) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in x.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in x.iter_mut() {
        *v /= z;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> Model {
        let mut cfg = ModelConfig::new(2, 8, 1, 2);
        cfg.obs_dim = 5;
        cfg.n_skills = 3;
        cfg.omega_dim = 2;
        Model::new(cfg, 3).unwrap()
    }

    #[test]
    fn shapes_follow_config() {
        let m = Model::new(ModelConfig::new(8, 64, 2, 4), 0).unwrap();
        assert_eq!(m.cfg.out_dim(), 2 * N_SKILLS + 2 * OMEGA_DIM);
        let total: usize = m.tensors().iter().map(|t| t.2).sum();
        assert_eq!(total, m.n_params());
        let out = m.forward(&vec![0.1; 3 * 8 * OBS_DIM], 3);
        assert_eq!(out.len(), 3 * m.cfg.out_dim());
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn batch_rows_are_independent() {
        let m = tiny();
        let mut rng = substream(1, "t");
        let x: Vec<f64> = (0..3 * 2 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let all = m.forward(&x, 3);
        for s in 0..3 {
            let one = m.forward(&x[s * 10..(s + 1) * 10], 1);
            let o = m.cfg.out_dim();
            for (a, b) in one.iter().zip(&all[s * o..(s + 1) * o]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn rejects_indivisible_heads() {
        assert!(Model::new(ModelConfig::new(2, 10, 1, 3), 0).is_err());
    }
}
