use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::kernels::{mm, Scalar, Tensor};
use crate::model::config::{ModelConfig, Variant};

pub const INIT_STD: f64 = 0.02;

/// `y = x · weight + bias` with `weight` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(d_in: usize, d_out: usize, bias: bool) -> Self {
        Self {
            weight: Tensor::zeros(vec![d_in, d_out]),
            bias: bias.then(|| Tensor::zeros(vec![d_out])),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Forward over `rows` stacked inputs.
    pub fn forward(&self, x: &[T], rows: usize) -> Vec<T> {
        let (d_in, d_out) = (self.d_in(), self.d_out());
        let mut y = mm(x, self.weight.data(), rows, d_in, d_out);
        if let Some(b) = &self.bias {
            for r in 0..rows {
                for (o, &bv) in y[r * d_out..(r + 1) * d_out].iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
        }
        y
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b));
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((format!("{prefix}.bias"), b));
        }
    }
}

/// Two-layer GELU MLP `d → hidden → d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ffn<T> {
    pub up: Linear<T>,
    pub down: Linear<T>,
}

impl<T: Scalar> Ffn<T> {
    pub fn zeros(d: usize, hidden: usize) -> Self {
        Self {
            up: Linear::zeros(d, hidden, true),
            down: Linear::zeros(hidden, d, true),
        }
    }

    pub fn hidden(&self) -> usize {
        self.up.d_out()
    }

    pub fn forward(&self, x: &[T], rows: usize) -> Vec<T> {
        let mut act = self.up.forward(x, rows);
        act.iter_mut().for_each(|v| *v = v.gelu());
        self.down.forward(&act, rows)
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.up.visit(&format!("{prefix}.up"), out);
        self.down.visit(&format!("{prefix}.down"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.up.visit_mut(&format!("{prefix}.up"), out);
        self.down.visit_mut(&format!("{prefix}.down"), out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    /// `d → 3d`, columns laid out `[q | k | v]`, heads contiguous within each.
    pub qkv: Linear<T>,
    pub out: Linear<T>,
}

/// One transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub attn: AttentionParams<T>,
    pub input_norm: Tensor<T>,
    pub post_attn_norm: Tensor<T>,
    pub shared: Option<Ffn<T>>,
    pub routed: Vec<Ffn<T>>,
    /// `N × d`, one row `r_j` per expert, no bias.
    pub router: Option<Tensor<T>>,
    pub expert_norm: Option<Tensor<T>>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let ones = || {
            let mut t = Tensor::zeros(vec![d]);
            t.fill(T::one());
            t
        };
        let has_router = cfg.variant != Variant::Dense;
        Self {
            attn: AttentionParams {
                qkv: Linear::zeros(d, 3 * d, true),
                out: Linear::zeros(d, d, true),
            },
            input_norm: ones(),
            post_attn_norm: ones(),
            shared: (cfg.d_shared > 0).then(|| Ffn::zeros(d, cfg.d_shared)),
            routed: if has_router {
                (0..cfg.n_experts).map(|_| Ffn::zeros(d, cfg.d_routed)).collect()
            } else {
                Vec::new()
            },
            router: has_router.then(|| Tensor::zeros(vec![cfg.n_experts, d])),
            expert_norm: (cfg.variant == Variant::Mole).then(ones),
        }
    }

    pub fn n_experts(&self) -> usize {
        self.router.as_ref().map_or(0, |r| r.rows())
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.attn.qkv.visit(&format!("{prefix}.attn.qkv"), out);
        self.attn.out.visit(&format!("{prefix}.attn.out"), out);
        out.push((format!("{prefix}.input_norm"), &self.input_norm));
        out.push((format!("{prefix}.post_attn_norm"), &self.post_attn_norm));
        if let Some(s) = &self.shared {
            s.visit(&format!("{prefix}.shared"), out);
        }
        for (j, e) in self.routed.iter().enumerate() {
            e.visit(&format!("{prefix}.routed.{j}"), out);
        }
        if let Some(r) = &self.router {
            out.push((format!("{prefix}.router"), r));
        }
        if let Some(n) = &self.expert_norm {
            out.push((format!("{prefix}.expert_norm"), n));
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.attn.qkv.visit_mut(&format!("{prefix}.attn.qkv"), out);
        self.attn.out.visit_mut(&format!("{prefix}.attn.out"), out);
        out.push((format!("{prefix}.input_norm"), &mut self.input_norm));
        out.push((format!("{prefix}.post_attn_norm"), &mut self.post_attn_norm));
        if let Some(s) = &mut self.shared {
            s.visit_mut(&format!("{prefix}.shared"), out);
        }
        for (j, e) in self.routed.iter_mut().enumerate() {
            e.visit_mut(&format!("{prefix}.routed.{j}"), out);
        }
        if let Some(r) = &mut self.router {
            out.push((format!("{prefix}.router"), r));
        }
        if let Some(n) = &mut self.expert_norm {
            out.push((format!("{prefix}.expert_norm"), n));
        }
    }
}

/// Full model weights. The output head is untied from the embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    /// `vocab × d`
    pub embedding: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Tensor<T>,
    /// `d × vocab`
    pub lm_head: Tensor<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// All projections zero, norm gains one.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        let config = config.clone().normalized()?;
        let d = config.d_model;
        let mut final_norm = Tensor::zeros(vec![d]);
        final_norm.fill(T::one());
        Ok(Self {
            embedding: Tensor::zeros(vec![config.vocab, d]),
            layers: (0..config.n_layers).map(|_| LayerParams::zeros(&config)).collect(),
            final_norm,
            lm_head: Tensor::zeros(vec![d, config.vocab]),
            config,
        })
    }

    /// Normal(0, 0.02) projections, unit gains, zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::init_with_std(config, seed, INIT_STD)
    }

    pub fn init_with_std(config: &ModelConfig, seed: u64, std: f64) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("std is finite and non-negative");
        for (name, t) in params.tensors_mut() {
            if is_matrix_name(&name) {
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = T::lit(normal.sample(&mut rng)));
            }
        }
        Ok(params)
    }

    /// Same shapes, every entry zero (gradient accumulator layout).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(T::zero());
        }
        z
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (l, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("layers.{l}"), &mut out);
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![("embedding".to_string(), &mut self.embedding)];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("layers.{l}"), &mut out);
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out.push(("lm_head".to_string(), &mut self.lm_head));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// True once routed experts have been replaced by lookup tables.
    pub fn is_lut_form(&self) -> bool {
        self.config.variant == Variant::Mole && self.layers.iter().all(|l| l.routed.is_empty())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros(&self.config).expect("config already validated");
        if self.is_lut_form() {
            for layer in &mut out.layers {
                layer.routed.clear();
                layer.expert_norm = None;
            }
        }
        for ((_, dst), (_, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            *dst = src.cast();
        }
        out
    }
}

/// Matrices get random init and weight decay; gains and biases do not.
pub(crate) fn is_matrix_name(name: &str) -> bool {
    name == "embedding" || name == "lm_head" || name.ends_with(".weight") || name.ends_with(".router")
}
