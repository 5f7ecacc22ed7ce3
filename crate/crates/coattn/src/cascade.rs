//! The co-attention module and its two depth-`n` cascades.
//!
//! A single module runs self-attention over each modality, then exchanges
//! information through two guided-attention units: text queries attend the
//! audio frames (and the result is folded back onto every frame), while
//! pooled audio queries attend the text. The stacking cascade chains whole
//! modules. The iterating cascade first finishes the text tower with `n`
//! self-attention layers, then guides each of `n` audio layers with that
//! fixed text output, so the text result never depends on the audio input.

use crate::attention::{AttendedFeatures, AttentionBlock};
use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use crate::numerics::param::ParamStore;
use crate::numerics::tape::{Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Single,
    Stacking,
    Iterating,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Single => "single",
            Variant::Stacking => "stacking",
            Variant::Iterating => "iterating",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Variant::Single),
            "stacking" => Ok(Variant::Stacking),
            "iterating" => Ok(Variant::Iterating),
            other => Err(Error::Config(format!(
                "unknown cascade variant `{other}` (expected single|stacking|iterating)"
            ))),
        }
    }
}

pub const MAX_DEPTH: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    pub variant: Variant,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    /// Drop the residual adds inside every attention block (the closing
    /// layer normalization is kept).
    pub no_residual: bool,
}

impl CascadeConfig {
    pub fn new(variant: Variant, depth: usize, dim: usize, heads: usize) -> Self {
        CascadeConfig {
            variant,
            depth,
            dim,
            heads,
            no_residual: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 || self.depth > MAX_DEPTH {
            return Err(Error::Config(format!(
                "cascade depth must be in 1..={MAX_DEPTH}, got {}",
                self.depth
            )));
        }
        if self.variant == Variant::Single && self.depth != 1 {
            return Err(Error::Config(format!(
                "the single variant requires depth 1, got {}",
                self.depth
            )));
        }
        if self.dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        crate::attention::head_dim(self.dim, self.heads)?;
        Ok(())
    }
}

/// Per-layer features captured by [`Cascade::forward_trace`]: entry 0 holds
/// the raw inputs, entry `k` the outputs of layer `k`, so both lists have
/// `depth + 1` entries. For the iterating variant the text entries walk the
/// self-attention tower.
#[derive(Debug, Clone)]
pub struct CascadeState {
    pub audio_layers: Vec<Matrix>,
    pub text_layers: Vec<Matrix>,
}

impl CascadeState {
    pub fn depth(&self) -> usize {
        self.audio_layers.len() - 1
    }

    pub fn final_audio(&self) -> &Matrix {
        self.audio_layers.last().expect("at least the input entry")
    }

    pub fn final_text(&self) -> &Matrix {
        self.text_layers.last().expect("at least the input entry")
    }
}

/// Blocks of one cascade layer. `ga_text` is absent in the iterating
/// variant, whose text tower is self-attention only.
#[derive(Debug, Clone)]
struct Layer {
    sa_audio: AttentionBlock,
    sa_text: AttentionBlock,
    ga_audio: AttentionBlock,
    ga_text: Option<AttentionBlock>,
}

/// A configured cascade whose parameters live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Cascade {
    config: CascadeConfig,
    layers: Vec<Layer>,
}

impl Cascade {
    pub fn init<R: Rng>(store: &mut ParamStore, config: CascadeConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let residual = !config.no_residual;
        let mut layers = Vec::with_capacity(config.depth);
        for k in 0..config.depth {
            let sa_audio = AttentionBlock::init(
                store,
                &format!("layer{k}.sa_audio"),
                config.dim,
                config.heads,
                residual,
                rng,
            )?;
            let sa_text = AttentionBlock::init(
                store,
                &format!("layer{k}.sa_text"),
                config.dim,
                config.heads,
                residual,
                rng,
            )?;
            let ga_audio = AttentionBlock::init(
                store,
                &format!("layer{k}.ga_audio"),
                config.dim,
                config.heads,
                residual,
                rng,
            )?;
            let ga_text = if config.variant == Variant::Iterating {
                None
            } else {
                Some(AttentionBlock::init(
                    store,
                    &format!("layer{k}.ga_text"),
                    config.dim,
                    config.heads,
                    residual,
                    rng,
                )?)
            };
            layers.push(Layer {
                sa_audio,
                sa_text,
                ga_audio,
                ga_text,
            });
        }
        Ok(Cascade { config, layers })
    }

    pub fn config(&self) -> &CascadeConfig {
        &self.config
    }

    /// Run the configured variant on one audio/text pair. `audio` is
    /// `n x d`, `text` is `1 x d`; output shapes match the inputs.
    pub fn forward_t(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        audio: Var,
        text: Var,
    ) -> Result<(Var, Var)> {
        self.check_input(tape.value(audio), tape.value(text))?;
        match self.config.variant {
            Variant::Single | Variant::Stacking => {
                let mut a = audio;
                let mut t = text;
                for layer in &self.layers {
                    (a, t) = self.module_forward_t(tape, store, layer, a, t)?;
                }
                Ok((a, t))
            }
            Variant::Iterating => {
                // Text tower first; its output guides every audio layer.
                let mut t = text;
                for layer in &self.layers {
                    t = layer.sa_text.self_forward_t(tape, store, t)?;
                }
                let mut a = audio;
                for layer in &self.layers {
                    let attended = layer.sa_audio.self_forward_t(tape, store, a)?;
                    a = self.fold_guided_audio_t(tape, store, &layer.ga_audio, attended, t)?;
                }
                Ok((a, t))
            }
        }
    }

    /// One co-attention module: self-attention on both modalities, then the
    /// two guided exchanges.
    fn module_forward_t(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        layer: &Layer,
        audio: Var,
        text: Var,
    ) -> Result<(Var, Var)> {
        let a1 = layer.sa_audio.self_forward_t(tape, store, audio)?;
        let t1 = layer.sa_text.self_forward_t(tape, store, text)?;
        let a_out = self.fold_guided_audio_t(tape, store, &layer.ga_audio, a1, t1)?;
        let ga_text = layer
            .ga_text
            .as_ref()
            .expect("single/stacking layers always carry a text-side guided block");
        let pooled = tape.mean_rows(a1)?;
        let t_out = ga_text.guided_forward_t(tape, store, t1, pooled)?;
        Ok((a_out, t_out))
    }

    /// Text-guided audio exchange: the `1 x d` guided-attention output is
    /// broadcast back over all frames of the audio path.
    fn fold_guided_audio_t(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ga: &AttentionBlock,
        audio: Var,
        guide: Var,
    ) -> Result<Var> {
        let frames = tape.value(audio).rows();
        let g = ga.guided_forward_t(tape, store, audio, guide)?;
        let spread = tape.broadcast_rows(g, frames)?;
        tape.add(audio, spread)
    }

    fn check_input(&self, audio: &Matrix, text: &Matrix) -> Result<()> {
        if audio.cols() != self.config.dim || text.cols() != self.config.dim {
            return Err(Error::dimension(
                "cascade input",
                format!("dim {}", self.config.dim),
                format!("audio {} text {}", audio.shape_string(), text.shape_string()),
            ));
        }
        if text.rows() != 1 {
            return Err(Error::dimension(
                "cascade text input",
                "1 row".to_string(),
                text.shape_string(),
            ));
        }
        if audio.rows() == 0 {
            return Err(Error::Contract("audio input has zero frames".into()));
        }
        Ok(())
    }

    /// Value-level forward on a fresh tape.
    pub fn forward(
        &self,
        store: &ParamStore,
        audio: &Matrix,
        text: &Matrix,
    ) -> Result<AttendedFeatures> {
        let mut tape = Tape::new();
        let a = tape.input(audio.clone());
        let t = tape.input(text.clone());
        let (ao, to) = self.forward_t(&mut tape, store, a, t)?;
        AttendedFeatures::new(tape.value(ao).clone(), tape.value(to).clone())
    }

    /// Forward pass that keeps every layer's features. Runs the same
    /// arithmetic as [`Cascade::forward`], so the final entries match it
    /// bit for bit.
    pub fn forward_trace(
        &self,
        store: &ParamStore,
        audio: &Matrix,
        text: &Matrix,
    ) -> Result<CascadeState> {
        self.check_input(audio, text)?;
        let mut tape = Tape::new();
        let mut audio_layers = vec![audio.clone()];
        let mut text_layers = vec![text.clone()];
        match self.config.variant {
            Variant::Single | Variant::Stacking => {
                let mut a = tape.input(audio.clone());
                let mut t = tape.input(text.clone());
                for layer in &self.layers {
                    (a, t) = self.module_forward_t(&mut tape, store, layer, a, t)?;
                    audio_layers.push(tape.value(a).clone());
                    text_layers.push(tape.value(t).clone());
                }
            }
            Variant::Iterating => {
                let mut t = tape.input(text.clone());
                for layer in &self.layers {
                    t = layer.sa_text.self_forward_t(&mut tape, store, t)?;
                    text_layers.push(tape.value(t).clone());
                }
                let mut a = tape.input(audio.clone());
                for layer in &self.layers {
                    let attended = layer.sa_audio.self_forward_t(&mut tape, store, a)?;
                    a = self.fold_guided_audio_t(&mut tape, store, &layer.ga_audio, attended, t)?;
                    audio_layers.push(tape.value(a).clone());
                }
            }
        }
        Ok(CascadeState {
            audio_layers,
            text_layers,
        })
    }
}
