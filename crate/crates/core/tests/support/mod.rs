//! A plain reference implementation of the model for oracle tests.
//!
//! It works on an explicit `h×w×C` map, realizes the shifted partition by
//! literally rolling the map, runs every kept window on its own with scalar
//! loops, and counts each multiply-accumulate it performs. It shares no
//! code with the library beyond reading parameters by name.

#![allow(dead_code, clippy::needless_range_loop)]

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt::Debug;

use num_traits::Float;
use winprune::model::{ModelConfig, ModelParams};
use winprune::{SparsityConfig, Tensor};

pub trait Real: Float + Debug + std::iter::Sum {
    fn erf(self) -> Self;
    fn lit(v: f64) -> Self {
        Self::from(v).unwrap()
    }
    fn to64(self) -> f64 {
        self.to_f64().unwrap()
    }
}

impl Real for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Real for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// A dense row-major matrix.
#[derive(Clone, Debug)]
pub struct Mat<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Real> Mat<F> {
    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }
}

/// Keep sets per stage, per block, `[regular, shifted]`.
pub type Keeps = Vec<Vec<[Vec<usize>; 2]>>;

pub struct RefModel<F> {
    pub cfg: ModelConfig,
    pub p: HashMap<String, Mat<F>>,
    pub macs: Cell<u64>,
}

impl<F: Real> RefModel<F> {
    pub fn new(cfg: &ModelConfig, params: &ModelParams) -> Self {
        let mut p = HashMap::new();
        for (name, t) in params.named() {
            let (rows, cols) = match *t.shape() {
                [n] => (1, n),
                [r, c] => (r, c),
                _ => panic!("unexpected rank"),
            };
            let data = t.data().iter().map(|&v| F::lit(v as f64)).collect();
            p.insert(name, Mat { rows, cols, data });
        }
        RefModel {
            cfg: cfg.clone(),
            p,
            macs: Cell::new(0),
        }
    }

    fn w(&self, name: &str) -> &Mat<F> {
        self.p.get(name).unwrap_or_else(|| panic!("missing {name}"))
    }

    /// `x[n×in] · W[in×out] + b`, counting `n·in·out` MACs.
    fn linear(&self, x: &[F], n: usize, wname: &str, bname: &str) -> Vec<F> {
        let w = self.w(wname);
        let b = self.w(bname);
        assert_eq!(x.len(), n * w.rows);
        let mut out = vec![F::zero(); n * w.cols];
        for i in 0..n {
            for j in 0..w.cols {
                let mut acc = F::zero();
                for k in 0..w.rows {
                    acc = acc + x[i * w.rows + k] * w.at(k, j);
                    self.macs.set(self.macs.get() + 1);
                }
                out[i * w.cols + j] = acc + b.data[j];
            }
        }
        out
    }

    fn layer_norm(&self, x: &[F], c: usize, g: &str, b: &str) -> Vec<F> {
        let (g, b) = (self.w(g), self.w(b));
        let eps = F::lit(self.cfg.eps as f64);
        let cf = F::lit(c as f64);
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(c) {
            let mean = row.iter().copied().sum::<F>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / cf;
            let denom = (var + eps).sqrt();
            for j in 0..c {
                out.push((row[j] - mean) / denom * g.data[j] + b.data[j]);
            }
        }
        out
    }

    fn gelu(v: F) -> F {
        let half = F::lit(0.5);
        half * v * (F::one() + (v / F::lit(2.0).sqrt()).erf())
    }

    /// One sub-layer on one window's `n×c` tokens.
    pub fn sublayer(&self, x: &[F], n: usize, c: usize, heads: usize, prefix: &str) -> Vec<F> {
        let name = |s: &str| format!("{prefix}.{s}");
        let h = self.layer_norm(x, c, &name("norm1.weight"), &name("norm1.bias"));
        let qkv = self.linear(&h, n, &name("attn.qkv.weight"), &name("attn.qkv.bias"));
        let d = c / heads;
        let scale = F::one() / F::lit(d as f64).sqrt();
        let mut merged = vec![F::zero(); n * c];
        for head in 0..heads {
            let q = |i: usize, e: usize| qkv[i * 3 * c + head * d + e];
            let k = |i: usize, e: usize| qkv[i * 3 * c + c + head * d + e];
            let v = |i: usize, e: usize| qkv[i * 3 * c + 2 * c + head * d + e];
            for i in 0..n {
                let mut logits = vec![F::zero(); n];
                for (j, l) in logits.iter_mut().enumerate() {
                    let mut acc = F::zero();
                    for e in 0..d {
                        acc = acc + q(i, e) * k(j, e);
                        self.macs.set(self.macs.get() + 1);
                    }
                    *l = acc * scale;
                }
                let m = logits.iter().copied().fold(F::neg_infinity(), F::max);
                let exps: Vec<F> = logits.iter().map(|&l| (l - m).exp()).collect();
                let z = exps.iter().copied().sum::<F>();
                for e in 0..d {
                    let mut acc = F::zero();
                    for j in 0..n {
                        acc = acc + exps[j] / z * v(j, e);
                        self.macs.set(self.macs.get() + 1);
                    }
                    merged[i * c + head * d + e] = acc;
                }
            }
        }
        let a = self.linear(
            &merged,
            n,
            &name("attn.proj.weight"),
            &name("attn.proj.bias"),
        );
        let x1: Vec<F> = x.iter().zip(&a).map(|(&u, &v)| u + v).collect();
        let h = self.layer_norm(&x1, c, &name("norm2.weight"), &name("norm2.bias"));
        let f = self.linear(&h, n, &name("mlp.fc1.weight"), &name("mlp.fc1.bias"));
        let f: Vec<F> = f.into_iter().map(Self::gelu).collect();
        let f = self.linear(&f, n, &name("mlp.fc2.weight"), &name("mlp.fc2.bias"));
        x1.iter().zip(&f).map(|(&u, &v)| u + v).collect()
    }

    pub fn patch_embed(&self, image: &Tensor) -> (Vec<F>, usize, usize) {
        let (hh, ww, cin) = (image.shape()[0], image.shape()[1], image.shape()[2]);
        let p = self.cfg.patch_size;
        let (h, w) = (hh / p, ww / p);
        let mut patches = Vec::with_capacity(h * w * p * p * cin);
        for py in 0..h {
            for px in 0..w {
                for dy in 0..p {
                    for dx in 0..p {
                        for ch in 0..cin {
                            let v = image.data()[((py * p + dy) * ww + px * p + dx) * cin + ch];
                            patches.push(F::lit(v as f64));
                        }
                    }
                }
            }
        }
        let out = self.linear(&patches, h * w, "patch_embed.weight", "patch_embed.bias");
        (out, h, w)
    }

    pub fn add_position(&self, x: &mut [F], h: usize, w: usize, c: usize) {
        let half = c / 2;
        for y in 0..h {
            for xx in 0..w {
                for j in 0..c {
                    // same f32 arithmetic as the library so f32 runs agree closely
                    let u = (y as f32 + 0.5) / h as f32;
                    let v = (xx as f32 + 0.5) / w as f32;
                    let (coord, k) = if j < half {
                        (u, j + 1)
                    } else {
                        (v, j - half + 1)
                    };
                    let val = (std::f32::consts::PI * k as f32 * coord).cos();
                    let idx = (y * w + xx) * c + j;
                    x[idx] = x[idx] + F::lit(val as f64);
                }
            }
        }
    }

    pub fn patch_merge(&self, x: &[F], h: usize, w: usize, c: usize, s: usize) -> Vec<F> {
        let (oh, ow) = (h / 2, w / 2);
        let mut cat = Vec::with_capacity(oh * ow * 4 * c);
        for y in 0..oh {
            for xx in 0..ow {
                for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let t = (2 * y + dy) * w + 2 * xx + dx;
                    cat.extend_from_slice(&x[t * c..(t + 1) * c]);
                }
            }
        }
        self.linear(
            &cat,
            oh * ow,
            &format!("stages.{s}.merge.weight"),
            &format!("stages.{s}.merge.bias"),
        )
    }

    /// Windows of the map in row-major window order, each as token indices of
    /// the map, after rolling the map by `(-shift, -shift)`.
    pub fn windows(h: usize, w: usize, m: usize, shift: usize) -> Vec<Vec<usize>> {
        // rolled[y][x] = map[(y + shift) % h][(x + shift) % w]
        let rolled: Vec<usize> = (0..h * w)
            .map(|i| ((i / w + shift) % h) * w + (i % w + shift) % w)
            .collect();
        let mut out = Vec::new();
        for wr in 0..h / m {
            for wc in 0..w / m {
                let mut toks = Vec::new();
                for ty in 0..m {
                    for tx in 0..m {
                        toks.push(rolled[(wr * m + ty) * w + wc * m + tx]);
                    }
                }
                out.push(toks);
            }
        }
        out
    }

    /// Keep sets computed from scratch: L2 scores on the stage input, sorted
    /// descending with ties to the lower index, prefix of `⌈(1−s)W⌉` (≥1).
    pub fn keep_sets(
        x: &[F],
        h: usize,
        w: usize,
        c: usize,
        m: usize,
        tenths: &[u8],
    ) -> Vec<[Vec<usize>; 2]> {
        let orders: Vec<Vec<usize>> = [0, m / 2]
            .iter()
            .map(|&shift| {
                let wins = Self::windows(h, w, m, shift);
                let scores: Vec<f64> = wins
                    .iter()
                    .map(|toks| {
                        toks.iter()
                            .flat_map(|&t| &x[t * c..(t + 1) * c])
                            .map(|v| v.to64() * v.to64())
                            .sum::<f64>()
                            .sqrt()
                    })
                    .collect();
                let mut idx: Vec<usize> = (0..wins.len()).collect();
                idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
                idx
            })
            .collect();
        tenths
            .iter()
            .map(|&t| {
                let nw = orders[0].len();
                let keep = (((10 - t as usize) as f64 / 10.0 * nw as f64) - 1e-9)
                    .ceil()
                    .max(1.0) as usize;
                [orders[0][..keep].to_vec(), orders[1][..keep].to_vec()]
            })
            .collect()
    }

    /// Logits of one image. `fixed` overrides the keep-set computation.
    pub fn forward(
        &self,
        image: &Tensor,
        sparsity: &SparsityConfig,
        fixed: Option<&Keeps>,
    ) -> (Vec<F>, Keeps) {
        let (mut x, mut h, mut w) = self.patch_embed(image);
        let mut c = self.cfg.stages[0].dim;
        self.add_position(&mut x, h, w, c);
        let mut used: Keeps = Vec::new();
        for (s, st) in self.cfg.stages.iter().enumerate() {
            let m = st.window_size;
            let keeps = match fixed {
                Some(k) => k[s].clone(),
                None => Self::keep_sets(&x, h, w, c, m, sparsity.stage(s)),
            };
            for (b, keep) in keeps.iter().enumerate() {
                for (part, shift) in [(0, 0), (1, m / 2)] {
                    let wins = Self::windows(h, w, m, shift);
                    let prefix = format!(
                        "stages.{s}.blocks.{b}.{}",
                        if part == 0 { "regular" } else { "shifted" }
                    );
                    let mut next = x.clone();
                    for &win in &keep[part] {
                        let toks = &wins[win];
                        let input: Vec<F> = toks
                            .iter()
                            .flat_map(|&t| x[t * c..(t + 1) * c].to_vec())
                            .collect();
                        let out = self.sublayer(&input, toks.len(), c, st.heads, &prefix);
                        for (i, &t) in toks.iter().enumerate() {
                            next[t * c..(t + 1) * c].copy_from_slice(&out[i * c..(i + 1) * c]);
                        }
                    }
                    x = next;
                }
            }
            used.push(keeps);
            if s + 1 < self.cfg.stages.len() {
                x = self.patch_merge(&x, h, w, c, s);
                h /= 2;
                w /= 2;
                c *= 2;
            }
        }
        let n = F::lit((h * w) as f64);
        let pooled: Vec<F> = (0..c)
            .map(|j| (0..h * w).map(|t| x[t * c + j]).sum::<F>() / n)
            .collect();
        (self.linear(&pooled, 1, "head.weight", "head.bias"), used)
    }

    /// Mean cross-entropy over a batch with fixed keep sets.
    pub fn loss(
        &self,
        images: &[&Tensor],
        labels: &[usize],
        sparsity: &SparsityConfig,
        keeps: &[Keeps],
    ) -> F {
        let mut total = F::zero();
        for ((im, &y), k) in images.iter().zip(labels).zip(keeps) {
            let (logits, _) = self.forward(im, sparsity, Some(k));
            let m = logits.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = logits.iter().map(|&l| (l - m).exp()).sum::<F>().ln() + m;
            total = total + lse - logits[y];
        }
        total / F::lit(images.len() as f64)
    }
}

/// Converts the library's trace into plain keep-set lists.
pub fn keeps_from_trace(trace: &winprune::model::ForwardTrace) -> Keeps {
    trace
        .stages
        .iter()
        .map(|st| {
            st.keep
                .blocks
                .iter()
                .map(|b| [b[0].0.clone(), b[1].0.clone()])
                .collect()
        })
        .collect()
}

pub fn random_image(side: usize, channels: usize, seed: u64) -> Tensor {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::rand_uniform(&[side, side, channels], 0.0, 1.0, &mut rng)
}

pub fn random_params(cfg: &ModelConfig, seed: u64) -> ModelParams {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::init(cfg, &mut rng).unwrap();
    // Non-trivial LN affine terms and biases so every parameter matters.
    use rand::Rng;
    for t in p.tensors_mut() {
        if t.rank() == 1 {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
    }
    p
}

pub struct GradReport {
    pub worst: f64,
    pub checked: usize,
    pub failures: Vec<String>,
}

/// Library gradients of a 3-image batch loss on the reference config against
/// central differences of the f64 reference, on up to five entries of every
/// parameter tensor. Keep sets are frozen from the library's own trace.
pub fn model_grad_check(tenths: u8, seed: u64, step: f64) -> GradReport {
    use rand::{Rng, SeedableRng};
    use winprune::model::Model;
    use winprune::train::loss_and_grads;

    let cfg = ModelConfig::reference();
    let model = Model {
        config: cfg.clone(),
        params: random_params(&cfg, seed),
    };
    let sparsity = SparsityConfig::uniform(&cfg.depths(), tenths).unwrap();
    let images: Vec<Tensor> = (0..3).map(|i| random_image(32, 1, seed * 10 + i)).collect();
    let refs: Vec<&Tensor> = images.iter().collect();
    let labels = [0usize, 3, 1];

    let (_, traces) = model.forward_batch(&refs, &sparsity).unwrap();
    let keeps: Vec<Keeps> = traces.iter().map(keeps_from_trace).collect();
    let (_, _, grads) = loss_and_grads(&model, &refs, &labels, &sparsity).unwrap();

    let mut reference = RefModel::<f64>::new(&cfg, &model.params);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport {
        worst: 0.0,
        checked: 0,
        failures: Vec::new(),
    };
    if tenths > 0 && !keeps.iter().flatten().flatten().any(|b| b[0].len() < 16) {
        report.failures.push("no window was pruned".into());
    }
    for ((name, tensor), grad) in model.params.named().iter().zip(&grads) {
        // key-projection biases shift every logit of a row equally, so their
        // gradient is zero by construction; they get an absolute check
        let c = tensor.shape()[0] / 3;
        let is_key_bias = |j: usize| name.ends_with("qkv.bias") && (c..2 * c).contains(&j);
        let mut picks: Vec<usize> = (0..tensor.numel()).filter(|&j| !is_key_bias(j)).collect();
        while picks.len() > 5 {
            picks.swap_remove(rng.gen_range(0..picks.len()));
        }
        for j in picks {
            let orig = reference.p[name].data[j];
            reference.p.get_mut(name).unwrap().data[j] = orig + step;
            let up = reference.loss(&refs, &labels, &sparsity, &keeps);
            reference.p.get_mut(name).unwrap().data[j] = orig - step;
            let down = reference.loss(&refs, &labels, &sparsity, &keeps);
            reference.p.get_mut(name).unwrap().data[j] = orig;
            let fd = (up - down) / (2.0 * step);
            let a = grad.data()[j] as f64;
            let scale = a.abs().max(fd.abs());
            let err = if scale < 1e-7 {
                0.0
            } else {
                (a - fd).abs() / scale
            };
            report.worst = report.worst.max(err);
            report.checked += 1;
            if err > 1e-3 {
                report
                    .failures
                    .push(format!("{name}[{j}]: analytic {a:e}, fd {fd:e}"));
            }
        }
        if name.ends_with("qkv.bias") {
            let max = grad.data()[c..2 * c]
                .iter()
                .fold(0.0f32, |m, v| m.max(v.abs()));
            if max > 1e-6 {
                report
                    .failures
                    .push(format!("{name}: key bias gradient {max:e}"));
            }
        }
    }
    report
}
