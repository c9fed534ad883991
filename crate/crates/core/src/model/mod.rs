//! Gated encoder-decoder with a flow-transported latent code.

mod decode;
mod gate;
mod transformer;
mod vocab;

pub use decode::{beam_search, greedy, length_normalized, BeamConfig, Hypothesis, StepScorer};
pub use gate::{refined_gate, Gate, GateInit, GateOutput, NEAR_ZERO_GATE};
pub use transformer::{gelu, positions, Attention, DecoderBlock, EncoderBlock, FeedForward};
pub use vocab::{is_special, tokenize, Batch, Example, Vocab, BOS, EOS, PAD, RESERVED, UNK};

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::{FlowKind, FlowSpec, FlowStack};
use crate::latent::{mean_latent, sample_latent, InferenceNet, LatentDraw};
use crate::numcore::{Activation, LayerNorm, Linear, Param, ParamId, Parameterized, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub latent_dim: usize,
    pub inference_hidden: usize,
    pub inference_dropout: f64,
    pub flow: FlowKind,
    pub flow_layers: usize,
    /// Conditioner hidden widths; `None` uses the per-kind default.
    pub flow_hidden: Option<Vec<usize>>,
    pub flow_activation: Activation,
    pub spline_bins: usize,
    pub spline_bound: f64,
    pub gate_init: GateInit,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 200,
            d_model: 64,
            embed_dim: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ffn_dim: 128,
            dropout: 0.1,
            latent_dim: 32,
            inference_hidden: 64,
            inference_dropout: 0.1,
            flow: FlowKind::Rqnsf,
            flow_layers: 4,
            flow_hidden: None,
            flow_activation: Activation::Tanh,
            spline_bins: 4,
            spline_bound: 3.0,
            gate_init: GateInit::Standard,
        }
    }
}

impl ModelConfig {
    pub fn flow_spec(&self) -> FlowSpec {
        let mut spec = FlowSpec::new(self.flow, self.latent_dim);
        spec.activation = self.flow_activation;
        spec.bins = self.spline_bins;
        spec.bound = self.spline_bound;
        match &self.flow_hidden {
            Some(h) => spec.with_hidden(h.clone()),
            None => spec,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("latent_dim", self.latent_dim),
            ("inference_hidden", self.inference_hidden),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if self.vocab_size <= RESERVED.len() {
            return Err(Error::Config("vocab_size must exceed the reserved ids".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        for (k, p) in [("dropout", self.dropout), ("inference_dropout", self.inference_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{k} must lie in [0, 1)")));
            }
        }
        Ok(())
    }
}

/// The full summarizer: embeddings, encoder, decoder, gate, LM head, and the
/// variational components.
#[derive(Clone, Debug)]
pub struct SumModel {
    pub config: ModelConfig,
    pub embed: Param,
    pub in_proj: Option<Linear>,
    pub encoder: Vec<EncoderBlock>,
    pub enc_norm: LayerNorm,
    pub decoder: Vec<DecoderBlock>,
    pub dec_norm: LayerNorm,
    pub gate: Gate,
    pub lm_head: Linear,
    pub inference: InferenceNet,
    pub flows: FlowStack,
}

/// How the latent is drawn during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentMode {
    /// Reparameterized draw with fresh noise.
    Sample,
    /// `ε = 0`: the transport of `μ0`.
    Mean,
}

/// Tape handles from one teacher-forced pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub draw: LatentDraw,
    pub gate: GateOutput,
}

impl SumModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let embed = Param::new("embed", Tensor::randn(&[c.vocab_size, c.embed_dim], 1.0, rng));
        let in_proj = (c.embed_dim != c.d_model).then(|| Linear::new("in_proj", c.embed_dim, c.d_model, rng));
        let encoder = (0..c.enc_layers)
            .map(|i| EncoderBlock::new(&format!("enc.{i}"), c.d_model, c.heads, c.ffn_dim, rng))
            .collect::<Result<_>>()?;
        let decoder = (0..c.dec_layers)
            .map(|i| DecoderBlock::new(&format!("dec.{i}"), c.d_model, c.heads, c.ffn_dim, rng))
            .collect::<Result<_>>()?;
        let gate = Gate::new(c.d_model, c.latent_dim, c.gate_init, rng);
        let lm_head = Linear::new("lm_head", c.d_model, c.vocab_size, rng);
        let inference = InferenceNet::new(c.embed_dim, c.inference_hidden, c.latent_dim, c.inference_dropout, rng)?;
        let flows = if c.flow_layers == 0 {
            FlowStack::identity(c.latent_dim)
        } else {
            FlowStack::new(&c.flow_spec(), c.flow_layers, rng)?
        };
        Ok(SumModel {
            enc_norm: LayerNorm::new("enc_norm", c.d_model),
            dec_norm: LayerNorm::new("dec_norm", c.d_model),
            config,
            embed,
            in_proj,
            encoder,
            decoder,
            gate,
            lm_head,
            inference,
            flows,
        })
    }

    /// Ids of the variational parameters (inference network and flows).
    pub fn variational_ids(&self) -> HashSet<ParamId> {
        self.inference
            .params()
            .into_iter()
            .chain(self.flows.params())
            .map(Param::id)
            .collect()
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::EmptyInput("token sequence is empty".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::Contract(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn embed_tokens<R: Rng + ?Sized>(&self, tape: &mut Tape, ids: &[usize], training: bool, rng: &mut R) -> Result<Var> {
        self.check_ids(ids)?;
        let table = tape.param(&self.embed)?;
        let mut x = tape.embedding(table, ids)?;
        if let Some(p) = &self.in_proj {
            x = p.forward(tape, x)?;
        }
        let pos = tape.constant(positions(ids.len(), self.config.d_model))?;
        let x = tape.add(x, pos)?;
        tape.dropout(x, self.config.dropout, training, rng)
    }

    /// Encoder states `[m, d]`.
    pub fn encode<R: Rng + ?Sized>(&self, tape: &mut Tape, source: &[usize], training: bool, rng: &mut R) -> Result<Var> {
        let mut h = self.embed_tokens(tape, source, training, rng)?;
        for block in &self.encoder {
            h = block.forward(tape, h, self.config.dropout, training, rng)?;
        }
        self.enc_norm.forward(tape, h)
    }

    /// Final decoder states `[n, d]`, after the terminal layer norm.
    pub fn decode_hidden<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        memory: Var,
        decoder_input: &[usize],
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let mut h = self.embed_tokens(tape, decoder_input, training, rng)?;
        for block in &self.decoder {
            h = block.forward(tape, h, memory, self.config.dropout, training, rng)?;
        }
        self.dec_norm.forward(tape, h)
    }

    /// Mean embedding `[1, e]` weighted by bag-of-words counts.
    pub fn bow_embedding(&self, tape: &mut Tape, bow: &[(usize, f64)]) -> Result<Var> {
        let table = tape.param(&self.embed)?;
        bow_embedding(tape, table, bow)
    }

    /// `(μ0, log σ0)`, each `[1, ℓ]`.
    pub fn posterior<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bow: &[(usize, f64)],
        training: bool,
        rng: &mut R,
    ) -> Result<(Var, Var)> {
        let x_bar = self.bow_embedding(tape, bow)?;
        self.inference.forward(tape, x_bar, training, rng)
    }

    pub fn draw_latent<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bow: &[(usize, f64)],
        mode: LatentMode,
        training: bool,
        rng: &mut R,
    ) -> Result<LatentDraw> {
        let (mu, ls) = self.posterior(tape, bow, training, rng)?;
        match mode {
            LatentMode::Sample => sample_latent(tape, mu, ls, &self.flows, rng),
            LatentMode::Mean => mean_latent(tape, mu, ls, &self.flows),
        }
    }

    /// Logits `[n, V]` from decoder states fused with `zk: [1, ℓ]`.
    pub fn head(&self, tape: &mut Tape, hidden: Var, zk: Var) -> Result<(Var, GateOutput)> {
        let g = self.gate.forward(tape, hidden, zk)?;
        let logits = self.lm_head.forward(tape, g.fused)?;
        Ok((logits, g))
    }

    /// Teacher-forced logits given an explicit latent `zk: [1, ℓ]`.
    pub fn forward_with_latent<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        example: &Example,
        zk: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<(Var, GateOutput)> {
        let memory = self.encode(tape, &example.source, training, rng)?;
        let hidden = self.decode_hidden(tape, memory, &example.decoder_input(), training, rng)?;
        self.head(tape, hidden, zk)
    }

    /// Plain encoder-decoder logits with no latent fusion.
    pub fn forward_plain<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        example: &Example,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let memory = self.encode(tape, &example.source, training, rng)?;
        let hidden = self.decode_hidden(tape, memory, &example.decoder_input(), training, rng)?;
        self.lm_head.forward(tape, hidden)
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        example: &Example,
        mode: LatentMode,
        training: bool,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let draw = self.draw_latent(tape, &example.bow, mode, training, rng)?;
        let (logits, gate) = self.forward_with_latent(tape, example, draw.zk, training, rng)?;
        Ok(ForwardOutput { logits, draw, gate })
    }

    /// Eval-mode scorer with the encoder output and `zK = f(μ0)` fixed.
    pub fn scorer(&self, source: &[usize], bow: &[(usize, f64)]) -> Result<ModelScorer<'_>> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let memory = self.encode(&mut tape, source, false, &mut rng)?;
        let draw = self.draw_latent(&mut tape, bow, LatentMode::Mean, false, &mut rng)?;
        Ok(ModelScorer {
            model: self,
            memory: tape.value(memory).clone(),
            zk: tape.value(draw.zk).clone(),
        })
    }

    pub fn summarize(&self, example: &Example, cfg: &BeamConfig) -> Result<Hypothesis> {
        let scorer = self.scorer(&example.source, &example.bow)?;
        beam_search(&scorer, cfg)
    }
}

/// Values-only weighted mean of embedding rows.
pub fn bow_embedding(tape: &mut Tape, table: Var, bow: &[(usize, f64)]) -> Result<Var> {
    let total: f64 = bow.iter().map(|(_, c)| c).sum();
    if bow.is_empty() || total <= 0.0 {
        return Err(Error::EmptyInput("document has no counted tokens".into()));
    }
    let ids: Vec<usize> = bow.iter().map(|(i, _)| *i).collect();
    let weights = Tensor::new(vec![1, ids.len()], bow.iter().map(|(_, c)| c / total).collect())?;
    let rows = tape.embedding(table, &ids)?;
    let w = tape.constant(weights)?;
    tape.matmul(w, rows)
}

/// Decoder scorer over fixed encoder memory and latent.
pub struct ModelScorer<'a> {
    model: &'a SumModel,
    memory: Tensor,
    zk: Tensor,
}

impl StepScorer for ModelScorer<'_> {
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let memory = tape.constant(self.memory.clone())?;
        let zk = tape.constant(self.zk.clone())?;
        let hidden = self.model.decode_hidden(&mut tape, memory, prefix, false, &mut rng)?;
        let last = tape.slice(hidden, 0, prefix.len() - 1, prefix.len())?;
        let (logits, _) = self.model.head(&mut tape, last, zk)?;
        let lp = tape.log_softmax(logits)?;
        Ok(tape.data(lp).to_vec())
    }
}

impl Parameterized for SumModel {
    fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.embed];
        v.extend(self.in_proj.params());
        v.extend(self.encoder.params());
        v.extend(self.enc_norm.params());
        v.extend(self.decoder.params());
        v.extend(self.dec_norm.params());
        v.extend(self.gate.params());
        v.extend(self.lm_head.params());
        v.extend(self.inference.params());
        v.extend(self.flows.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.embed];
        v.extend(self.in_proj.params_mut());
        v.extend(self.encoder.params_mut());
        v.extend(self.enc_norm.params_mut());
        v.extend(self.decoder.params_mut());
        v.extend(self.dec_norm.params_mut());
        v.extend(self.gate.params_mut());
        v.extend(self.lm_head.params_mut());
        v.extend(self.inference.params_mut());
        v.extend(self.flows.params_mut());
        v
    }
}
