//! Learned weights, generic over the storage so the same layout can hold
//! plain tensors or tape handles.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One attention sub-layer: LN → MHSA → residual → LN → FFN → residual.
#[derive(Debug, Clone, PartialEq)]
pub struct SubLayerParams<T> {
    pub norm1_weight: T,
    pub norm1_bias: T,
    pub qkv_weight: T,
    pub qkv_bias: T,
    pub proj_weight: T,
    pub proj_bias: T,
    pub norm2_weight: T,
    pub norm2_bias: T,
    pub fc1_weight: T,
    pub fc1_bias: T,
    pub fc2_weight: T,
    pub fc2_bias: T,
}

/// A block runs its regular-partition sub-layer, then its shifted one.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub regular: SubLayerParams<T>,
    pub shifted: SubLayerParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeParams<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageParams<T> {
    pub blocks: Vec<BlockParams<T>>,
    /// Patch merging into the next stage; absent on the last stage.
    pub merge: Option<MergeParams<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub patch_weight: T,
    pub patch_bias: T,
    pub stages: Vec<StageParams<T>>,
    pub head_weight: T,
    pub head_bias: T,
}

impl<T> SubLayerParams<T> {
    fn entries(&self) -> [(&'static str, &T); 12] {
        [
            ("norm1.weight", &self.norm1_weight),
            ("norm1.bias", &self.norm1_bias),
            ("attn.qkv.weight", &self.qkv_weight),
            ("attn.qkv.bias", &self.qkv_bias),
            ("attn.proj.weight", &self.proj_weight),
            ("attn.proj.bias", &self.proj_bias),
            ("norm2.weight", &self.norm2_weight),
            ("norm2.bias", &self.norm2_bias),
            ("mlp.fc1.weight", &self.fc1_weight),
            ("mlp.fc1.bias", &self.fc1_bias),
            ("mlp.fc2.weight", &self.fc2_weight),
            ("mlp.fc2.bias", &self.fc2_bias),
        ]
    }

    fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut impl FnMut(&str, &T) -> std::result::Result<U, E>,
    ) -> std::result::Result<SubLayerParams<U>, E> {
        let mut g = |suffix: &str, t: &T| f(&format!("{prefix}.{suffix}"), t);
        Ok(SubLayerParams {
            norm1_weight: g("norm1.weight", &self.norm1_weight)?,
            norm1_bias: g("norm1.bias", &self.norm1_bias)?,
            qkv_weight: g("attn.qkv.weight", &self.qkv_weight)?,
            qkv_bias: g("attn.qkv.bias", &self.qkv_bias)?,
            proj_weight: g("attn.proj.weight", &self.proj_weight)?,
            proj_bias: g("attn.proj.bias", &self.proj_bias)?,
            norm2_weight: g("norm2.weight", &self.norm2_weight)?,
            norm2_bias: g("norm2.bias", &self.norm2_bias)?,
            fc1_weight: g("mlp.fc1.weight", &self.fc1_weight)?,
            fc1_bias: g("mlp.fc1.bias", &self.fc1_bias)?,
            fc2_weight: g("mlp.fc2.weight", &self.fc2_weight)?,
            fc2_bias: g("mlp.fc2.bias", &self.fc2_bias)?,
        })
    }
}

impl<T> ModelParams<T> {
    /// Visits every parameter with its canonical name, in canonical order.
    pub fn for_each(&self, mut f: impl FnMut(&str, &T)) {
        f("patch_embed.weight", &self.patch_weight);
        f("patch_embed.bias", &self.patch_bias);
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.blocks.iter().enumerate() {
                for (part, sub) in [("regular", &block.regular), ("shifted", &block.shifted)] {
                    for (suffix, t) in sub.entries() {
                        f(&format!("stages.{s}.blocks.{b}.{part}.{suffix}"), t);
                    }
                }
            }
            if let Some(m) = &stage.merge {
                f(&format!("stages.{s}.merge.weight"), &m.weight);
                f(&format!("stages.{s}.merge.bias"), &m.bias);
            }
        }
        f("head.weight", &self.head_weight);
        f("head.bias", &self.head_bias);
    }

    /// Structure-preserving map in canonical order.
    pub fn try_map<U, E>(
        &self,
        mut f: impl FnMut(&str, &T) -> std::result::Result<U, E>,
    ) -> std::result::Result<ModelParams<U>, E> {
        let patch_weight = f("patch_embed.weight", &self.patch_weight)?;
        let patch_bias = f("patch_embed.bias", &self.patch_bias)?;
        let mut stages = Vec::with_capacity(self.stages.len());
        for (s, stage) in self.stages.iter().enumerate() {
            let mut blocks = Vec::with_capacity(stage.blocks.len());
            for (b, block) in stage.blocks.iter().enumerate() {
                let regular = block
                    .regular
                    .try_map(&format!("stages.{s}.blocks.{b}.regular"), &mut f)?;
                let shifted = block
                    .shifted
                    .try_map(&format!("stages.{s}.blocks.{b}.shifted"), &mut f)?;
                blocks.push(BlockParams { regular, shifted });
            }
            let merge = match &stage.merge {
                Some(m) => Some(MergeParams {
                    weight: f(&format!("stages.{s}.merge.weight"), &m.weight)?,
                    bias: f(&format!("stages.{s}.merge.bias"), &m.bias)?,
                }),
                None => None,
            };
            stages.push(StageParams { blocks, merge });
        }
        let head_weight = f("head.weight", &self.head_weight)?;
        let head_bias = f("head.bias", &self.head_bias)?;
        Ok(ModelParams {
            patch_weight,
            patch_bias,
            stages,
            head_weight,
            head_bias,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> ModelParams<U> {
        self.try_map(|n, t| Ok::<_, std::convert::Infallible>(f(n, t)))
            .unwrap_or_else(|e| match e {})
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each(|n, _| names.push(n.to_string()));
        names
    }

    /// References to every parameter in canonical order.
    pub fn to_vec(&self) -> Vec<&T> {
        let mut out: Vec<&T> = vec![&self.patch_weight, &self.patch_bias];
        for stage in &self.stages {
            for block in &stage.blocks {
                for sub in [&block.regular, &block.shifted] {
                    out.extend(sub.entries().into_iter().map(|(_, t)| t));
                }
            }
            if let Some(m) = &stage.merge {
                out.extend([&m.weight, &m.bias]);
            }
        }
        out.extend([&self.head_weight, &self.head_bias]);
        out
    }
}

impl ModelParams<Tensor> {
    /// Xavier-uniform weights, unit LN scales, zero biases.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let shapes = Self::expected_shapes(cfg);
        let mut it = shapes.into_iter();
        let skeleton = Self::skeleton(cfg);
        skeleton.try_map(|name, _| {
            let (n, shape) = it.next().expect("one shape per parameter");
            debug_assert_eq!(n, name);
            Ok::<_, Error>(init_tensor(name, &shape, rng))
        })
    }

    /// Canonical `(name, shape)` list for a config.
    pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        Self::skeleton(cfg).for_each(|n, s| out.push((n.to_string(), s.clone())));
        out
    }

    fn skeleton(cfg: &ModelConfig) -> ModelParams<Vec<usize>> {
        let c0 = cfg.stages[0].dim;
        let sub = |c: usize| SubLayerParams {
            norm1_weight: vec![c],
            norm1_bias: vec![c],
            qkv_weight: vec![c, 3 * c],
            qkv_bias: vec![3 * c],
            proj_weight: vec![c, c],
            proj_bias: vec![c],
            norm2_weight: vec![c],
            norm2_bias: vec![c],
            fc1_weight: vec![c, cfg.ffn_ratio * c],
            fc1_bias: vec![cfg.ffn_ratio * c],
            fc2_weight: vec![cfg.ffn_ratio * c, c],
            fc2_bias: vec![c],
        };
        let last = cfg.stages.len() - 1;
        let stages = cfg
            .stages
            .iter()
            .enumerate()
            .map(|(s, st)| StageParams {
                blocks: (0..st.depth)
                    .map(|_| BlockParams {
                        regular: sub(st.dim),
                        shifted: sub(st.dim),
                    })
                    .collect(),
                merge: (s < last).then(|| MergeParams {
                    weight: vec![4 * st.dim, 2 * st.dim],
                    bias: vec![2 * st.dim],
                }),
            })
            .collect();
        ModelParams {
            patch_weight: vec![cfg.patch_dim(), c0],
            patch_bias: vec![c0],
            stages,
            head_weight: vec![cfg.final_dim(), cfg.num_classes],
            head_bias: vec![cfg.num_classes],
        }
    }

    /// Rebuilds params from named tensors, checking names and shapes.
    pub fn from_named(cfg: &ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        cfg.validate()?;
        let expected = Self::expected_shapes(cfg);
        if expected.len() != tensors.len() {
            return Err(Error::Format(format!(
                "expected {} tensors for this model config, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        Self::skeleton(cfg).try_map(|name, shape| {
            let (n, t) = it.next().expect("lengths checked");
            if n != name {
                return Err(Error::Format(format!("expected tensor {name}, found {n}")));
            }
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    name: n,
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
            Ok(t)
        })
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.for_each(|n, t| out.push((n.to_string(), t.clone())));
        out
    }

    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, t| n += t.numel());
        n
    }

    /// Mutable references in canonical order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.patch_weight, &mut self.patch_bias];
        for stage in &mut self.stages {
            for block in &mut stage.blocks {
                for sub in [&mut block.regular, &mut block.shifted] {
                    out.extend([
                        &mut sub.norm1_weight,
                        &mut sub.norm1_bias,
                        &mut sub.qkv_weight,
                        &mut sub.qkv_bias,
                        &mut sub.proj_weight,
                        &mut sub.proj_bias,
                        &mut sub.norm2_weight,
                        &mut sub.norm2_bias,
                        &mut sub.fc1_weight,
                        &mut sub.fc1_bias,
                        &mut sub.fc2_weight,
                        &mut sub.fc2_bias,
                    ]);
                }
            }
            if let Some(m) = &mut stage.merge {
                out.extend([&mut m.weight, &mut m.bias]);
            }
        }
        out.extend([&mut self.head_weight, &mut self.head_bias]);
        out
    }
}

fn init_tensor<R: Rng + ?Sized>(name: &str, shape: &[usize], rng: &mut R) -> Tensor {
    if name.ends_with("bias") {
        return Tensor::zeros(shape);
    }
    if shape.len() == 1 {
        // LayerNorm scale
        return Tensor::full(shape, 1.0);
    }
    let (fan_in, fan_out) = (shape[0] as f32, shape[1] as f32);
    let bound = (6.0 / (fan_in + fan_out)).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    Tensor::from_fn(shape, |_| dist.sample(rng))
}
