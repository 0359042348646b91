//! The full grounding model: encoders, fusion, head, discriminators,
//! reconstruction decoder and mask token, all in one parameter store.

use amda_autodiff::{Tape, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{Encoder, FeatureSequence, MaskToken, MaskedVideo};
use crate::error::{AmdaError, Result};
use crate::fusion::Fusion;
use crate::head::{infer_boundary, PredictorHead, ScoreMap, TemporalBoundary};
use crate::objectives::{Discriminators, ReconDecoder};
use crate::params::{Bound, Fwd, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub visual_dim: usize,
    pub text_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    /// Sinusoidal position codes on the video encoder.
    pub positional: bool,
}

#[derive(Debug, Clone)]
pub struct AmdaModel {
    pub dims: ModelDims,
    pub store: ParamStore,
    pub visual: Encoder,
    pub textual: Encoder,
    pub fusion: Fusion,
    pub head: PredictorHead,
    pub disc: Discriminators,
    pub recon: ReconDecoder,
    pub mask_token: MaskToken,
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct SampleForward {
    pub v: Var,
    pub q: Var,
    pub f: Var,
    pub f_tilde: Var,
}

impl AmdaModel {
    /// Every module is always built so the parameter layout does not depend
    /// on the training regime.
    pub fn new(dims: ModelDims, rng: &mut ChaCha8Rng) -> Result<Self> {
        let ModelDims {
            visual_dim,
            text_dim,
            hidden,
            heads,
            layers,
            positional,
        } = dims;
        let mut store = ParamStore::new();
        let mut visual = Encoder::new(&mut store, "enc_v", visual_dim, hidden, heads, layers, rng)?;
        visual.positional = positional;
        let textual = Encoder::new(&mut store, "enc_q", text_dim, hidden, heads, layers, rng)?;
        let fusion = Fusion::new(&mut store, "fusion", hidden, heads, rng)?;
        let head = PredictorHead::new(&mut store, "head", hidden, rng);
        let disc = Discriminators::new(&mut store, "disc", hidden, rng);
        let recon = ReconDecoder::new(&mut store, "recon", hidden, visual_dim, rng);
        let mask_token = MaskToken::new(&mut store, "mask", visual_dim, rng);
        Ok(Self {
            dims,
            store,
            visual,
            textual,
            fusion,
            head,
            disc,
            recon,
            mask_token,
        })
    }

    fn check_inputs(&self, video: &FeatureSequence, query: &FeatureSequence) -> Result<()> {
        if video.dim() != self.dims.visual_dim || query.dim() != self.dims.text_dim {
            return Err(AmdaError::Dimension(format!(
                "model expects visual/text widths {}/{}, sample has {}/{}",
                self.dims.visual_dim,
                self.dims.text_dim,
                video.dim(),
                query.dim()
            )));
        }
        Ok(())
    }

    pub fn forward(
        &self,
        fx: &mut Fwd,
        video: &FeatureSequence,
        query: &FeatureSequence,
        rng: &mut ChaCha8Rng,
    ) -> Result<SampleForward> {
        self.check_inputs(video, query)?;
        let v = self.visual.encode(fx, video, rng)?;
        let q = self.textual.encode(fx, query, rng)?;
        let (f, f_tilde) = self.fusion.forward(fx, v, q, video.valid(), query.valid(), rng)?;
        Ok(SampleForward { v, q, f, f_tilde })
    }

    /// Encodes the masked video and fuses it with an already encoded query.
    /// Returns `(Ṽ_m, F_m)`.
    pub fn forward_masked(
        &self,
        fx: &mut Fwd,
        masked: &MaskedVideo,
        q: Var,
        query_valid: &[bool],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Var)> {
        let token = fx.p(self.mask_token.vector);
        let input = masked.input_var(fx.tape, token)?;
        let valid = masked.original.valid();
        let v_m = self.visual.encode_var(fx, input, valid, rng)?;
        let sims = crate::fusion::similarity(fx.tape, v_m, q, valid, query_valid)?;
        let (a_v, a_q) = crate::fusion::context_query_attention(fx.tape, v_m, q, &sims)?;
        let f_m = self.fusion.fuse(fx, v_m, a_v, a_q, valid)?;
        Ok((v_m, f_m))
    }
}

/// Eval-mode predictor that binds the parameters once and reuses the tape.
pub struct Predictor<'m> {
    model: &'m AmdaModel,
    tape: Tape,
    bound: Bound,
    base: usize,
}

impl<'m> Predictor<'m> {
    pub fn new(model: &'m AmdaModel) -> Self {
        let mut tape = Tape::new();
        let bound = model.store.bind_frozen(&mut tape);
        let base = tape.len();
        Self {
            model,
            tape,
            bound,
            base,
        }
    }

    pub fn score_map(&mut self, video: &FeatureSequence, query: &FeatureSequence) -> Result<ScoreMap> {
        self.tape.truncate(self.base);
        let mut fx = Fwd {
            tape: &mut self.tape,
            params: &self.bound,
            train: false,
            dropout: 0.0,
        };
        // eval mode never draws from the generator
        let mut unused = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let out = self.model.forward(&mut fx, video, query, &mut unused)?;
        let map = self.model.head.score_map(&mut fx, out.f_tilde)?;
        ScoreMap::new(self.tape.value(map).clone())
    }

    pub fn predict(&mut self, video: &FeatureSequence, query: &FeatureSequence) -> Result<TemporalBoundary> {
        Ok(infer_boundary(&self.score_map(video, query)?))
    }
}
