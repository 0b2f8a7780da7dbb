//! Token-attention noise predictor `eps_theta(z_t, t, c)`.
//!
//! The latent is cut into `tokens` rows of `channels` values, lifted to
//! `width` features, and offset by a learned positional table and a projected
//! sinusoidal timestep embedding. Each conditioning block then runs
//!
//! ```text
//! Q = X W_q,  K = [c W_k; k_null],  V = [c W_v; v_null]
//! X <- X + softmax(Q Kᵀ / sqrt(width)) V W_o
//! X <- X + tanh(X W_1 + b_1) W_2 + b_2
//! ```
//!
//! and a dense readout maps the flattened tokens back to the latent. Keys and
//! values of the condition depend on `c` and the weights only, never on the
//! latent or the timestep.
//!
//! Gradients are obtained by a hand-written reverse pass over a cached
//! forward pass ([`DenoiserParams::forward`] / [`DenoiserParams::backward`]).

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::Mat;
use crate::rng::{gaussian_vec, rng_from_seed};

const IN_W: usize = 0;
const IN_B: usize = 1;
const POS: usize = 2;
const TIME_W: usize = 3;
const NULL_COND: usize = 4;
const OUT_W: usize = 5;
const OUT_B: usize = 6;
const GLOBAL_COUNT: usize = 7;

const Q: usize = 0;
const K: usize = 1;
const V: usize = 2;
const NULL_K: usize = 3;
const NULL_V: usize = 4;
const O: usize = 5;
const FF1_W: usize = 6;
const FF1_B: usize = 7;
const FF2_W: usize = 8;
const FF2_B: usize = 9;
const PER_BLOCK: usize = 10;
const BLOCK_NAMES: [&str; PER_BLOCK] = [
    "q", "k", "v", "null_k", "null_v", "o", "ff1.w", "ff1.b", "ff2.w", "ff2.b",
];

/// Block matrices that a surgical mask may unfreeze: attention projections and feed-forward.
pub const MASKABLE_BLOCK_MATRICES: [&str; 7] = ["q", "k", "v", "ff1.w", "ff1.b", "ff2.w", "ff2.b"];

/// Architecture and initialization of a denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserSpec {
    pub tokens: usize,
    pub width: usize,
    pub blocks: usize,
    pub ff_hidden: usize,
    pub init_seed: u64,
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        Self {
            tokens: 4,
            width: 32,
            blocks: 4,
            ff_hidden: 32,
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub latent_dim: usize,
    pub tokens: usize,
    pub channels: usize,
    pub width: usize,
    pub cond_dim: usize,
    pub ff_hidden: usize,
    pub blocks: usize,
}

impl Dims {
    fn shapes(&self) -> Vec<(String, usize, usize)> {
        let (n, ch, h, d, f, m) = (
            self.tokens,
            self.channels,
            self.width,
            self.cond_dim,
            self.ff_hidden,
            self.latent_dim,
        );
        let mut out = vec![
            ("in.w".to_string(), ch, h),
            ("in.b".to_string(), 1, h),
            ("pos".to_string(), n, h),
            ("time.w".to_string(), h, h),
            ("null_cond".to_string(), 1, d),
            ("out.w".to_string(), n * h, m),
            ("out.b".to_string(), 1, m),
        ];
        for b in 0..self.blocks {
            let tag = block_tag(b);
            let shapes = [
                (h, h),
                (d, h),
                (d, h),
                (1, h),
                (1, h),
                (h, h),
                (h, f),
                (1, f),
                (f, h),
                (1, h),
            ];
            for (name, (r, c)) in BLOCK_NAMES.iter().zip(shapes) {
                out.push((format!("{tag}.{name}"), r, c));
            }
        }
        out
    }
}

/// Tag of the `b`-th conditioning block (0-based): `L1`, `L2`, ...
pub fn block_tag(b: usize) -> String {
    format!("L{}", b + 1)
}

/// Denoiser weights, stored as named matrices in a fixed order.
///
/// The same type doubles as a gradient accumulator (see [`zeros_like`](Self::zeros_like)).
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    dims: Dims,
    names: Vec<String>,
    mats: Vec<Mat>,
}

impl DenoiserParams {
    pub fn init(spec: &DenoiserSpec, latent_dim: usize, cond_dim: usize) -> Result<Self> {
        if spec.tokens == 0 || !latent_dim.is_multiple_of(spec.tokens) {
            return invalid(format!(
                "latent dimension {latent_dim} is not divisible into {} tokens",
                spec.tokens
            ));
        }
        if spec.width == 0 || spec.blocks == 0 || spec.ff_hidden == 0 || cond_dim == 0 {
            return invalid("width, blocks, ff_hidden and cond_dim must be positive");
        }
        let dims = Dims {
            latent_dim,
            tokens: spec.tokens,
            channels: latent_dim / spec.tokens,
            width: spec.width,
            cond_dim,
            ff_hidden: spec.ff_hidden,
            blocks: spec.blocks,
        };
        let mut rng = rng_from_seed(spec.init_seed);
        let mut names = Vec::new();
        let mut mats = Vec::new();
        for (name, r, c) in dims.shapes() {
            let local = name.rsplit_once('.').map(|(_, s)| s).unwrap_or(&name);
            let is_bias = local == "b" || name.ends_with(".b");
            let std = if is_bias {
                0.0
            } else if name == "pos" {
                0.1
            } else if name == "null_cond" || name.ends_with("null_k") || name.ends_with("null_v") {
                1.0 / (c as f64).sqrt()
            } else if name == "out.w" {
                0.1 / (r as f64).sqrt()
            } else {
                1.0 / (r as f64).sqrt()
            };
            let data = if std == 0.0 {
                vec![0.0; r * c]
            } else {
                gaussian_vec(&mut rng, r * c)
                    .into_iter()
                    .map(|x| x * std)
                    .collect()
            };
            names.push(name);
            mats.push(Mat::from_vec(r, c, data));
        }
        Ok(Self { dims, names, mats })
    }

    /// Rebuilds parameters from named matrices in canonical order, inferring dimensions from shapes.
    pub fn from_named(named: Vec<(String, Mat)>) -> Result<Self> {
        if named.len() < GLOBAL_COUNT || !(named.len() - GLOBAL_COUNT).is_multiple_of(PER_BLOCK) {
            return invalid("unexpected number of matrices for a denoiser");
        }
        let get = |i: usize| &named[i].1;
        let dims = Dims {
            latent_dim: get(OUT_B).cols,
            tokens: get(POS).rows,
            channels: get(IN_W).rows,
            width: get(IN_W).cols,
            cond_dim: get(NULL_COND).cols,
            ff_hidden: if named.len() > GLOBAL_COUNT {
                get(GLOBAL_COUNT + FF1_W).cols
            } else {
                1
            },
            blocks: (named.len() - GLOBAL_COUNT) / PER_BLOCK,
        };
        for ((name, mat), (want, r, c)) in named.iter().zip(dims.shapes()) {
            if *name != want || mat.rows != r || mat.cols != c {
                return invalid(format!(
                    "matrix `{name}` ({}x{}) does not match expected `{want}` ({r}x{c})",
                    mat.rows, mat.cols
                ));
            }
        }
        let (names, mats) = named.into_iter().unzip();
        Ok(Self { dims, names, mats })
    }

    pub fn dims(&self) -> &Dims {
        &self.dims
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn mats(&self) -> &[Mat] {
        &self.mats
    }

    pub fn mats_mut(&mut self) -> &mut [Mat] {
        &mut self.mats
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn matrix(&self, name: &str) -> Option<&Mat> {
        self.index_of(name).map(|i| &self.mats[i])
    }

    pub fn matrix_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.index_of(name).map(move |i| &mut self.mats[i])
    }

    pub fn block_tags(&self) -> Vec<String> {
        (0..self.dims.blocks).map(block_tag).collect()
    }

    /// Index of a block-local matrix, e.g. `("L2", "k")`.
    pub fn block_matrix_index(&self, tag: &str, local: &str) -> Option<usize> {
        self.index_of(&format!("{tag}.{local}"))
    }

    pub fn param_count(&self) -> usize {
        self.mats.iter().map(Mat::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            dims: self.dims,
            names: self.names.clone(),
            mats: self
                .mats
                .iter()
                .map(|m| Mat::zeros(m.rows, m.cols))
                .collect(),
        }
    }

    /// Flattened view in canonical matrix order.
    pub fn flatten(&self) -> Vec<f64> {
        self.mats
            .iter()
            .flat_map(|m| m.data.iter().copied())
            .collect()
    }

    pub fn add_scaled(&mut self, other: &Self, s: f64) {
        for (a, b) in self.mats.iter_mut().zip(&other.mats) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += s * y;
            }
        }
    }

    /// Squared L2 norm over every matrix.
    pub fn sq_norm(&self) -> f64 {
        self.mats.iter().flat_map(|m| &m.data).map(|x| x * x).sum()
    }

    pub fn null_condition(&self) -> &[f64] {
        &self.mats[NULL_COND].data
    }

    fn block(&self, b: usize, local: usize) -> &Mat {
        &self.mats[GLOBAL_COUNT + b * PER_BLOCK + local]
    }

    fn block_grad(&mut self, b: usize, local: usize) -> &mut Mat {
        &mut self.mats[GLOBAL_COUNT + b * PER_BLOCK + local]
    }

    fn check_inputs(&self, z: &[f64], c: &[f64]) -> Result<()> {
        if z.len() != self.dims.latent_dim {
            return invalid(format!(
                "latent has dimension {}, expected {}",
                z.len(),
                self.dims.latent_dim
            ));
        }
        if c.len() != self.dims.cond_dim {
            return invalid(format!(
                "condition has dimension {}, expected {}",
                c.len(),
                self.dims.cond_dim
            ));
        }
        Ok(())
    }

    /// `eps_theta(z_t, t, c)`.
    pub fn predict(&self, z: &[f64], t: usize, c: &[f64]) -> Result<Vec<f64>> {
        self.check_inputs(z, c)?;
        Ok(self.run(z, t, c, false).0)
    }

    /// Forward pass that keeps the activations needed by [`backward`](Self::backward).
    pub fn forward(&self, z: &[f64], t: usize, c: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_inputs(z, c)?;
        let (out, cache) = self.run(z, t, c, true);
        Ok((out, cache.expect("cache requested")))
    }

    fn run(&self, z: &[f64], t: usize, c: &[f64], keep: bool) -> (Vec<f64>, Option<ForwardCache>) {
        let Dims {
            tokens: n,
            channels: ch,
            width: h,
            ..
        } = self.dims;
        let z_tok = Mat::from_vec(n, ch, z.to_vec());
        let temb = timestep_embedding(t, h);
        let time_row = self.mats[TIME_W].vec_mul(&temb);
        let mut x = z_tok.matmul(&self.mats[IN_W]);
        for r in 0..n {
            for j in 0..h {
                let v =
                    x.get(r, j) + self.mats[IN_B].data[j] + self.mats[POS].get(r, j) + time_row[j];
                x.set(r, j, v);
            }
        }
        let scale = 1.0 / (h as f64).sqrt();
        let mut blocks = Vec::with_capacity(if keep { self.dims.blocks } else { 0 });
        for b in 0..self.dims.blocks {
            let q = x.matmul(self.block(b, Q));
            let (keys, vals) = self.keys_values(b, c);
            let mut p = q.matmul_t(&keys);
            for r in 0..n {
                let row = &mut p.data[r * 2..r * 2 + 2];
                let (s0, s1) = (row[0] * scale, row[1] * scale);
                let mx = s0.max(s1);
                let (e0, e1) = ((s0 - mx).exp(), (s1 - mx).exp());
                row[0] = e0 / (e0 + e1);
                row[1] = e1 / (e0 + e1);
            }
            let o = p.matmul(&vals);
            let mut x_mid = o.matmul(self.block(b, O));
            x_mid.add_assign(&x);
            let mut pre = x_mid.matmul(self.block(b, FF1_W));
            let b1 = &self.block(b, FF1_B).data;
            for r in 0..n {
                for (v, bias) in pre.data[r * pre.cols..(r + 1) * pre.cols]
                    .iter_mut()
                    .zip(b1)
                {
                    *v = (*v + bias).tanh();
                }
            }
            let act = pre;
            let mut x_out = act.matmul(self.block(b, FF2_W));
            let b2 = &self.block(b, FF2_B).data;
            for r in 0..n {
                for j in 0..h {
                    let v = x_out.get(r, j) + b2[j] + x_mid.get(r, j);
                    x_out.set(r, j, v);
                }
            }
            if keep {
                blocks.push(BlockCache {
                    x_in: x,
                    q,
                    keys,
                    vals,
                    p,
                    o,
                    x_mid,
                    act,
                });
            }
            x = x_out;
        }
        let mut out = self.mats[OUT_W].vec_mul(&x.data);
        for (o, b) in out.iter_mut().zip(&self.mats[OUT_B].data) {
            *o += b;
        }
        let cache = keep.then(|| ForwardCache {
            z_tok,
            temb,
            cond: c.to_vec(),
            blocks,
            x_final: x,
        });
        (out, cache)
    }

    fn keys_values(&self, b: usize, c: &[f64]) -> (Mat, Mat) {
        let h = self.dims.width;
        let mut keys = self.block(b, K).vec_mul(c);
        keys.extend_from_slice(&self.block(b, NULL_K).data);
        let mut vals = self.block(b, V).vec_mul(c);
        vals.extend_from_slice(&self.block(b, NULL_V).data);
        (Mat::from_vec(2, h, keys), Mat::from_vec(2, h, vals))
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d output`,
    /// and returns `d loss / d c`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_out: &[f64],
        grads: &mut DenoiserParams,
    ) -> Vec<f64> {
        let Dims {
            tokens: n,
            width: h,
            ..
        } = self.dims;
        let scale = 1.0 / (h as f64).sqrt();
        // readout
        accumulate_outer(&mut grads.mats[OUT_W], &cache.x_final.data, grad_out);
        add_into(&mut grads.mats[OUT_B].data, grad_out);
        let mut gx = Mat::from_vec(n, h, self.mats[OUT_W].mul_vec(grad_out));
        let mut g_cond = vec![0.0; self.dims.cond_dim];

        for b in (0..self.dims.blocks).rev() {
            let bc = &cache.blocks[b];
            // feed-forward: x_out = x_mid + act W2 + b2
            grads.block_grad(b, FF2_W).add_assign(&bc.act.t_matmul(&gx));
            add_into(&mut grads.block_grad(b, FF2_B).data, &col_sums(&gx));
            let mut g_pre = gx.matmul_t(self.block(b, FF2_W));
            for (g, a) in g_pre.data.iter_mut().zip(&bc.act.data) {
                *g *= 1.0 - a * a;
            }
            grads
                .block_grad(b, FF1_W)
                .add_assign(&bc.x_mid.t_matmul(&g_pre));
            add_into(&mut grads.block_grad(b, FF1_B).data, &col_sums(&g_pre));
            let mut g_mid = g_pre.matmul_t(self.block(b, FF1_W));
            g_mid.add_assign(&gx);

            // attention: x_mid = x_in + (P vals) W_o
            grads.block_grad(b, O).add_assign(&bc.o.t_matmul(&g_mid));
            let g_o = g_mid.matmul_t(self.block(b, O));
            let g_p = g_o.matmul_t(&bc.vals);
            let g_vals = bc.p.t_matmul(&g_o);
            let mut g_s = Mat::zeros(n, 2);
            for r in 0..n {
                let (p0, p1) = (bc.p.get(r, 0), bc.p.get(r, 1));
                let (gp0, gp1) = (g_p.get(r, 0), g_p.get(r, 1));
                let dotp = p0 * gp0 + p1 * gp1;
                g_s.set(r, 0, p0 * (gp0 - dotp) * scale);
                g_s.set(r, 1, p1 * (gp1 - dotp) * scale);
            }
            let g_q = g_s.matmul(&bc.keys);
            let g_keys = g_s.t_matmul(&bc.q);

            accumulate_outer(grads.block_grad(b, K), &cache.cond, g_keys.row(0));
            add_into(&mut grads.block_grad(b, NULL_K).data, g_keys.row(1));
            accumulate_outer(grads.block_grad(b, V), &cache.cond, g_vals.row(0));
            add_into(&mut grads.block_grad(b, NULL_V).data, g_vals.row(1));
            add_into(&mut g_cond, &self.block(b, K).mul_vec(g_keys.row(0)));
            add_into(&mut g_cond, &self.block(b, V).mul_vec(g_vals.row(0)));

            grads.block_grad(b, Q).add_assign(&bc.x_in.t_matmul(&g_q));
            let mut g_in = g_q.matmul_t(self.block(b, Q));
            g_in.add_assign(&g_mid);
            gx = g_in;
        }

        // input: x = z_tok W_in + b_in + pos + temb W_time
        grads.mats[IN_W].add_assign(&cache.z_tok.t_matmul(&gx));
        let sums = col_sums(&gx);
        add_into(&mut grads.mats[IN_B].data, &sums);
        grads.mats[POS].add_assign(&gx);
        accumulate_outer(&mut grads.mats[TIME_W], &cache.temb, &sums);
        g_cond
    }

    /// Adds a condition gradient to the null-embedding gradient (used when the
    /// forward pass was conditioned on [`null_condition`](Self::null_condition)).
    pub fn accumulate_null_grad(grads: &mut DenoiserParams, g_cond: &[f64]) {
        add_into(&mut grads.mats[NULL_COND].data, g_cond);
    }

    /// Per-block key and value activations of the condition token.
    pub fn kv_activations(&self, c: &[f64]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        if c.len() != self.dims.cond_dim {
            return invalid("condition has the wrong dimension");
        }
        Ok((0..self.dims.blocks)
            .map(|b| (self.block(b, K).vec_mul(c), self.block(b, V).vec_mul(c)))
            .collect())
    }

    /// Full per-block activations for one forward pass.
    pub fn block_activations(
        &self,
        z: &[f64],
        t: usize,
        c: &[f64],
    ) -> Result<Vec<BlockActivations>> {
        let (_, cache) = self.forward(z, t, c)?;
        Ok(cache
            .blocks
            .into_iter()
            .map(|bc| BlockActivations {
                query: bc.q,
                key: bc.keys.row(0).to_vec(),
                value: bc.vals.row(0).to_vec(),
            })
            .collect())
    }
}

/// Activations of one conditioning block for the condition token.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockActivations {
    pub query: Mat,
    pub key: Vec<f64>,
    pub value: Vec<f64>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    x_in: Mat,
    q: Mat,
    keys: Mat,
    vals: Mat,
    p: Mat,
    o: Mat,
    x_mid: Mat,
    act: Mat,
}

/// Activations saved by [`DenoiserParams::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    z_tok: Mat,
    temb: Vec<f64>,
    cond: Vec<f64>,
    blocks: Vec<BlockCache>,
    x_final: Mat,
}

/// Sinusoidal embedding of the timestep: sines then cosines over geometric frequencies.
pub fn timestep_embedding(t: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for j in 0..half {
        let freq = (-(10_000f64.ln()) * j as f64 / half as f64).exp();
        let angle = t as f64 * freq;
        out[j] = angle.sin();
        out[half + j] = angle.cos();
    }
    out
}

fn col_sums(m: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; m.cols];
    for r in 0..m.rows {
        add_into(&mut out, m.row(r));
    }
    out
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// `m += u vᵀ`.
fn accumulate_outer(m: &mut Mat, u: &[f64], v: &[f64]) {
    for (i, &a) in u.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        for (o, b) in m.data[i * m.cols..(i + 1) * m.cols].iter_mut().zip(v) {
            *o += a * b;
        }
    }
}
