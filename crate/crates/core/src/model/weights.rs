use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{HolaError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

/// Checkpoint for a pre-norm decoder with learned positions.
///
/// Projection matrices are stored input-major (`x · W`), so `wq` is
/// `d_model × d_model` and `w_up` is `d_model × 4·d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    pub output_projection: Tensor,
}

const LAYER_PARTS: [&str; 10] = [
    "ln1.gain", "ln1.bias", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "ln2.gain", "ln2.bias",
    "mlp.up", "mlp.down",
];

const QUANTIZABLE_PARTS: [&str; 6] = [
    "attn.wq", "attn.wk", "attn.wv", "attn.wo", "mlp.up", "mlp.down",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    TokenEmbedding,
    PositionEmbedding,
    Layer(usize, usize),
    FinalGain,
    FinalBias,
    OutputProjection,
}

fn parse_slot(config: &ModelConfig, name: &str) -> Option<Slot> {
    match name {
        "tok_embedding" => return Some(Slot::TokenEmbedding),
        "pos_embedding" => return Some(Slot::PositionEmbedding),
        "final_ln.gain" => return Some(Slot::FinalGain),
        "final_ln.bias" => return Some(Slot::FinalBias),
        "lm_head" => return Some(Slot::OutputProjection),
        _ => {}
    }
    let rest = name.strip_prefix("layers.")?;
    let (idx_str, part) = rest.split_once('.')?;
    let idx: usize = idx_str.parse().ok()?;
    if idx >= config.n_layers || idx.to_string() != idx_str {
        return None;
    }
    let part_idx = LAYER_PARTS.iter().position(|p| *p == part)?;
    Some(Slot::Layer(idx, part_idx))
}

impl ModelConfig {
    /// Canonical tensor names, in file order.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["tok_embedding".to_string(), "pos_embedding".to_string()];
        for i in 0..self.n_layers {
            names.extend(LAYER_PARTS.iter().map(|p| format!("layers.{i}.{p}")));
        }
        names.extend(["final_ln.gain", "final_ln.bias", "lm_head"].map(String::from));
        names
    }

    /// Attention and MLP projection matrices; everything else stays f32.
    pub fn quantizable_names(&self) -> Vec<String> {
        (0..self.n_layers)
            .flat_map(|i| QUANTIZABLE_PARTS.iter().map(move |p| format!("layers.{i}.{p}")))
            .collect()
    }

    pub fn is_quantizable(&self, name: &str) -> bool {
        matches!(parse_slot(self, name), Some(Slot::Layer(_, p)) if QUANTIZABLE_PARTS.contains(&LAYER_PARTS[p]))
    }

    /// Layer index a tensor belongs to, if any.
    pub fn layer_of(&self, name: &str) -> Option<usize> {
        match parse_slot(self, name)? {
            Slot::Layer(i, _) => Some(i),
            _ => None,
        }
    }

    pub fn expected_shape(&self, name: &str) -> Option<Vec<usize>> {
        let d = self.d_model;
        let shape = match parse_slot(self, name)? {
            Slot::TokenEmbedding => vec![self.vocab_size, d],
            Slot::PositionEmbedding => vec![self.max_seq_len, d],
            Slot::FinalGain | Slot::FinalBias => vec![d],
            Slot::OutputProjection => vec![d, self.vocab_size],
            Slot::Layer(_, p) => match LAYER_PARTS[p] {
                "mlp.up" => vec![d, self.d_ff()],
                "mlp.down" => vec![self.d_ff(), d],
                part if part.starts_with("attn.") => vec![d, d],
                _ => vec![d],
            },
        };
        Some(shape)
    }
}

impl LayerWeights {
    fn part(&self, idx: usize) -> &Tensor {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_up,
            &self.w_down,
        ][idx]
    }

    fn part_mut(&mut self, idx: usize) -> &mut Tensor {
        match idx {
            0 => &mut self.ln1_gain,
            1 => &mut self.ln1_bias,
            2 => &mut self.wq,
            3 => &mut self.wk,
            4 => &mut self.wv,
            5 => &mut self.wo,
            6 => &mut self.ln2_gain,
            7 => &mut self.ln2_bias,
            8 => &mut self.w_up,
            _ => &mut self.w_down,
        }
    }
}

impl ModelWeights {
    /// Builds a checkpoint from every tensor drawn by `fill`, in canonical order.
    fn build(config: ModelConfig, mut fill: impl FnMut(&str, &[usize]) -> Tensor) -> Result<Self> {
        config.validate()?;
        let mut take = |name: &str| {
            let shape = config.expected_shape(name).expect("canonical name");
            fill(name, &shape)
        };
        let token_embedding = take("tok_embedding");
        let position_embedding = take("pos_embedding");
        let layers = (0..config.n_layers)
            .map(|i| {
                let mut t = |part: &str| take(&format!("layers.{i}.{part}"));
                LayerWeights {
                    ln1_gain: t("ln1.gain"),
                    ln1_bias: t("ln1.bias"),
                    wq: t("attn.wq"),
                    wk: t("attn.wk"),
                    wv: t("attn.wv"),
                    wo: t("attn.wo"),
                    ln2_gain: t("ln2.gain"),
                    ln2_bias: t("ln2.bias"),
                    w_up: t("mlp.up"),
                    w_down: t("mlp.down"),
                }
            })
            .collect();
        let final_gain = take("final_ln.gain");
        let final_bias = take("final_ln.bias");
        let output_projection = take("lm_head");
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            layers,
            final_gain,
            final_bias,
            output_projection,
        })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        Self::build(config, |_, shape| Tensor::zeros(shape))
    }

    /// Seeded initialization: matrices and embeddings ~ N(0, 1/d_model),
    /// layer-norm gains 1 and biases 0.
    pub fn init_random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 1.0 / (config.d_model as f32).sqrt())
            .map_err(|e| HolaError::Config(e.to_string()))?;
        Self::build(config, |name, shape| {
            if name.ends_with(".gain") {
                Tensor::filled(shape, 1.0)
            } else if name.ends_with(".bias") {
                Tensor::zeros(shape)
            } else {
                let n = shape.iter().product();
                let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
                Tensor::new(shape.to_vec(), data).expect("shape from config")
            }
        })
    }

    /// Assembles weights from named tensors, auditing every shape.
    pub fn from_named(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config
            .validate()
            .map_err(|e| HolaError::ShapeAudit(e.to_string()))?;
        let mut by_name = std::collections::HashMap::with_capacity(tensors.len());
        for (name, t) in tensors {
            let expected = config
                .expected_shape(&name)
                .ok_or_else(|| HolaError::ShapeAudit(format!("unknown tensor {name:?}")))?;
            if t.shape() != expected.as_slice() {
                return Err(HolaError::ShapeAudit(format!(
                    "{name}: expected shape {expected:?}, found {:?}",
                    t.shape()
                )));
            }
            if by_name.insert(name.clone(), t).is_some() {
                return Err(HolaError::ShapeAudit(format!("duplicate tensor {name:?}")));
            }
        }
        let mut missing = None;
        let weights = Self::build(config, |name, shape| match by_name.remove(name) {
            Some(t) => t,
            None => {
                missing.get_or_insert_with(|| name.to_string());
                Tensor::zeros(shape)
            }
        })?;
        if let Some(name) = missing {
            return Err(HolaError::ShapeAudit(format!("missing tensor {name:?}")));
        }
        Ok(weights)
    }

    fn slot(&self, name: &str) -> Option<Slot> {
        parse_slot(&self.config, name)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        Some(match self.slot(name)? {
            Slot::TokenEmbedding => &self.token_embedding,
            Slot::PositionEmbedding => &self.position_embedding,
            Slot::Layer(i, p) => self.layers.get(i)?.part(p),
            Slot::FinalGain => &self.final_gain,
            Slot::FinalBias => &self.final_bias,
            Slot::OutputProjection => &self.output_projection,
        })
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        Some(match self.slot(name)? {
            Slot::TokenEmbedding => &mut self.token_embedding,
            Slot::PositionEmbedding => &mut self.position_embedding,
            Slot::Layer(i, p) => self.layers.get_mut(i)?.part_mut(p),
            Slot::FinalGain => &mut self.final_gain,
            Slot::FinalBias => &mut self.final_bias,
            Slot::OutputProjection => &mut self.output_projection,
        })
    }

    /// `(name, tensor)` pairs in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.config
            .tensor_names()
            .into_iter()
            .map(|n| {
                let t = self.tensor(&n).expect("canonical name resolves");
                (n, t)
            })
            .collect()
    }

    /// Checks every tensor against the shape implied by the config.
    pub fn audit(&self) -> Result<()> {
        if self.layers.len() != self.config.n_layers {
            return Err(HolaError::ShapeAudit(format!(
                "config declares {} layers, found {}",
                self.config.n_layers,
                self.layers.len()
            )));
        }
        for (name, t) in self.named_tensors() {
            let expected = self.config.expected_shape(&name).expect("canonical name");
            if t.shape() != expected.as_slice() {
                return Err(HolaError::ShapeAudit(format!(
                    "{name}: expected shape {expected:?}, found {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Size of all parameters stored as 32-bit floats.
    pub fn f32_bytes(&self) -> usize {
        self.parameter_count() * std::mem::size_of::<f32>()
    }
}
