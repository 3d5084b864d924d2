//! The switch-routed hurdle forecaster: configuration, parameter set, and
//! checkpoint format. Graph construction lives in [`forward`].

pub mod forward;

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{seeded_stream, streams};
use crate::tensor::{Parameter, Tape, Tensor};
use crate::{Error, Result};

pub use forward::{
    balance_loss, decode, encoder_forward, expert_forward, forward, step_params_values, ste_gate,
    BatchInput, Bound, DecodeOutput, DecodePlan, EncoderOutput, ForwardOutput, RunMode, StepParams,
};

const CHECKPOINT_MAGIC: &[u8] = b"switch-hurdle-v1\n";

/// How the router's probabilities turn into mixing weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Hard top-1 selection forward, soft probabilities backward.
    SteTop1,
    /// Dense mixture weighted by the probabilities themselves.
    Soft,
}

/// Feed-forward nonlinearity inside each expert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertActivation {
    /// Gated: (silu(x W1) * (x W2)) W3.
    Swiglu,
    /// Ungated ablation: gelu(x W1) W3, no W2.
    Gelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_experts: usize,
    pub d_ff: usize,
    /// Encoder context length in days.
    pub context_len: usize,
    /// Forecast horizon in days.
    pub horizon: usize,
    pub n_past_covariates: usize,
    pub n_future_covariates: usize,
    pub gate_mode: GateMode,
    pub expert_activation: ExpertActivation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_encoder_layers: 2,
            n_experts: 4,
            d_ff: 128,
            context_len: 56,
            horizon: 28,
            n_past_covariates: 0,
            n_future_covariates: 0,
            gate_mode: GateMode::SteTop1,
            expert_activation: ExpertActivation::Swiglu,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_experts < 2 {
            return Err(Error::Config(format!(
                "need at least 2 experts, got {}",
                self.n_experts
            )));
        }
        if self.n_encoder_layers == 0 || self.d_ff == 0 {
            return Err(Error::Config(
                "encoder layers and d_ff must be positive".into(),
            ));
        }
        if self.context_len == 0 || self.horizon == 0 {
            return Err(Error::Config(format!(
                "context_len {} and horizon {} must be at least 1",
                self.context_len, self.horizon
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Index of a parameter in the model's flat parameter list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy)]
pub(crate) struct NormIds {
    pub scale: ParamId,
    pub shift: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct ExpertIds {
    pub w1: ParamId,
    pub w2: Option<ParamId>,
    pub w3: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerIds {
    pub attn_norm: NormIds,
    pub attn: AttnIds,
    pub moe_norm: NormIds,
    pub router: ParamId,
    pub experts: Vec<ExpertIds>,
}

/// Wiring from named roles to flat parameter indices.
#[derive(Debug, Clone)]
pub(crate) struct Arch {
    pub embed_demand: ParamId,
    pub embed_covariates: Option<ParamId>,
    pub enc_positional: ParamId,
    pub layers: Vec<LayerIds>,
    pub dec_embed_prev: ParamId,
    pub dec_embed_future: Option<ParamId>,
    pub dec_positional: ParamId,
    pub dec_attn: AttnIds,
    pub dec_out_norm: NormIds,
    pub head_w_p: ParamId,
    pub head_w_mu: ParamId,
    pub head_w_alpha: ParamId,
    pub head_b_mu: ParamId,
    pub head_b_alpha: ParamId,
}

pub struct Model {
    pub config: ModelConfig,
    pub params: Vec<Parameter>,
    pub(crate) arch: Arch,
}

struct Builder {
    params: Vec<Parameter>,
}

impl Builder {
    fn add(&mut self, name: String, value: Tensor) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    fn xavier(&mut self, rng: &mut ChaCha8Rng, name: String, rows: usize, cols: usize) -> ParamId {
        self.xavier_scaled(rng, name, rows, cols, 1.0)
    }

    fn xavier_scaled(
        &mut self,
        rng: &mut ChaCha8Rng,
        name: String,
        rows: usize,
        cols: usize,
        scale: f64,
    ) -> ParamId {
        let bound = scale * (6.0 / (rows + cols) as f64).sqrt();
        let values = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.add(
            name,
            Tensor {
                shape: vec![rows, cols],
                values,
            },
        )
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIds {
        NormIds {
            scale: self.add(format!("{prefix}.scale"), Tensor::full(&[d], 1.0)),
            shift: self.zeros(format!("{prefix}.shift"), &[d]),
        }
    }

    fn attn(&mut self, rng: &mut ChaCha8Rng, prefix: &str, d: usize) -> AttnIds {
        AttnIds {
            wq: self.xavier(rng, format!("{prefix}.wq"), d, d),
            wk: self.xavier(rng, format!("{prefix}.wk"), d, d),
            wv: self.xavier(rng, format!("{prefix}.wv"), d, d),
            wo: self.xavier(rng, format!("{prefix}.wo"), d, d),
        }
    }
}

impl Model {
    /// Fresh model with deterministic initialization: Xavier-uniform weight
    /// matrices, zero positional tables and biases, unit norm scales, and a
    /// router drawn at a tenth of Xavier scale so routing starts
    /// near-uniform.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_stream(seed, streams::PARAM_INIT);
        let c = config;
        let mut b = Builder { params: Vec::new() };

        let embed_demand = b.xavier(&mut rng, "embed.demand".into(), 1, c.d_model);
        let embed_covariates = (c.n_past_covariates > 0).then(|| {
            b.xavier(
                &mut rng,
                "embed.covariates".into(),
                c.n_past_covariates,
                c.d_model,
            )
        });
        let enc_positional = b.zeros("encoder.positional".into(), &[c.context_len, c.d_model]);

        let mut layers = Vec::with_capacity(c.n_encoder_layers);
        for i in 0..c.n_encoder_layers {
            let attn_norm = b.norm(&format!("layers.{i}.attn_norm"), c.d_model);
            let attn = b.attn(&mut rng, &format!("layers.{i}.attn"), c.d_model);
            let moe_norm = b.norm(&format!("layers.{i}.moe_norm"), c.d_model);
            let router = b.xavier_scaled(
                &mut rng,
                format!("layers.{i}.router"),
                c.d_model,
                c.n_experts,
                0.1,
            );
            let mut experts = Vec::with_capacity(c.n_experts);
            for e in 0..c.n_experts {
                let w1 = b.xavier(
                    &mut rng,
                    format!("layers.{i}.experts.{e}.w1"),
                    c.d_model,
                    c.d_ff,
                );
                let w2 = matches!(c.expert_activation, ExpertActivation::Swiglu).then(|| {
                    b.xavier(
                        &mut rng,
                        format!("layers.{i}.experts.{e}.w2"),
                        c.d_model,
                        c.d_ff,
                    )
                });
                let w3 = b.xavier(
                    &mut rng,
                    format!("layers.{i}.experts.{e}.w3"),
                    c.d_ff,
                    c.d_model,
                );
                experts.push(ExpertIds { w1, w2, w3 });
            }
            layers.push(LayerIds {
                attn_norm,
                attn,
                moe_norm,
                router,
                experts,
            });
        }

        let dec_embed_prev = b.xavier(&mut rng, "decoder.embed_prev".into(), 1, c.d_model);
        let dec_embed_future = (c.n_future_covariates > 0).then(|| {
            b.xavier(
                &mut rng,
                "decoder.embed_future".into(),
                c.n_future_covariates,
                c.d_model,
            )
        });
        let dec_positional = b.zeros("decoder.positional".into(), &[c.horizon, c.d_model]);
        let dec_attn = b.attn(&mut rng, "decoder.attn", c.d_model);
        let dec_out_norm = b.norm("decoder.out_norm", c.d_model);

        let head_w_p = b.xavier(&mut rng, "head.w_p".into(), c.d_model, 1);
        let head_w_mu = b.xavier(&mut rng, "head.w_mu".into(), c.d_model, 1);
        let head_w_alpha = b.xavier(&mut rng, "head.w_alpha".into(), c.d_model, 1);
        let head_b_mu = b.zeros("head.b_mu".into(), &[1]);
        let head_b_alpha = b.zeros("head.b_alpha".into(), &[1]);

        Ok(Self {
            config: config.clone(),
            params: b.params,
            arch: Arch {
                embed_demand,
                embed_covariates,
                enc_positional,
                layers,
                dec_embed_prev,
                dec_embed_future,
                dec_positional,
                dec_attn,
                dec_out_norm,
                head_w_p,
                head_w_mu,
                head_w_alpha,
                head_b_mu,
                head_b_alpha,
            },
        })
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Register every parameter as a tape leaf, in parameter order.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            ids: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone()))
                .collect(),
        }
    }

    /// Serialize config and parameters. The format is a magic line, the
    /// config as length-prefixed JSON, then each parameter as
    /// length-prefixed name, rank, dims, and raw little-endian f64 values.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        let config = serde_json::to_vec(&self.config)
            .map_err(|e| Error::Format(format!("config serialization failed: {e}")))?;
        w.write_all(&(config.len() as u64).to_le_bytes())?;
        w.write_all(&config)?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            let name = p.name.as_bytes();
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(p.value.shape.len() as u64).to_le_bytes())?;
            for &d in &p.value.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in &p.value.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let bad = |what: &str| Error::Format(format!("checkpoint {}: {what}", path.display()));

        let mut magic = vec![0u8; CHECKPOINT_MAGIC.len()];
        r.read_exact(&mut magic).map_err(|_| bad("missing magic"))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(bad("unrecognized magic bytes"));
        }
        let config_len = read_u64(&mut r).ok_or_else(|| bad("truncated config length"))?;
        let mut config_bytes = vec![0u8; config_len as usize];
        r.read_exact(&mut config_bytes)
            .map_err(|_| bad("truncated config"))?;
        let config: ModelConfig = serde_json::from_slice(&config_bytes)
            .map_err(|e| bad(&format!("config does not parse: {e}")))?;

        let mut model = Model::init(&config, 0)?;
        let by_name: HashMap<String, usize> = model
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();

        let n = read_u64(&mut r).ok_or_else(|| bad("truncated parameter count"))? as usize;
        if n != model.params.len() {
            return Err(bad(&format!(
                "holds {n} parameters but the config implies {}",
                model.params.len()
            )));
        }
        let mut seen = vec![false; n];
        for _ in 0..n {
            let name_len = read_u64(&mut r).ok_or_else(|| bad("truncated name length"))? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)
                .map_err(|_| bad("truncated name"))?;
            let name = String::from_utf8(name_bytes).map_err(|_| bad("name is not utf-8"))?;
            let rank = read_u64(&mut r).ok_or_else(|| bad("truncated rank"))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r).ok_or_else(|| bad("truncated dims"))? as usize);
            }
            let idx = *by_name
                .get(&name)
                .ok_or_else(|| bad(&format!("unknown parameter {name:?}")))?;
            if seen[idx] {
                return Err(bad(&format!("duplicate parameter {name:?}")));
            }
            seen[idx] = true;
            if shape != model.params[idx].value.shape {
                return Err(bad(&format!(
                    "parameter {name:?} has shape {:?}, expected {:?}",
                    shape, model.params[idx].value.shape
                )));
            }
            let numel: usize = shape.iter().product();
            let mut values = Vec::with_capacity(numel);
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut buf).map_err(|_| bad("truncated values"))?;
                values.push(f64::from_le_bytes(buf));
            }
            model.params[idx].value = Tensor { shape, values };
        }
        Ok(model)
    }
}

fn read_u64<R: Read>(r: &mut R) -> Option<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).ok()?;
    Some(u64::from_le_bytes(buf))
}
