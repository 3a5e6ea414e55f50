//! The complete recognizer: encoder, collapse, decoder and label scores,
//! with checkpoint files that carry the configuration that built them.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::collapse::{
    iterate_collapse, iterate_collapse_backward, standard_collapse, standard_collapse_backward, AttentionMap,
    AttentionNet, CollapseMode, IterateCache,
};
use crate::config::{DecoderKind, ExperimentConfig};
use crate::ctc::{best_path_decode, ctc_loss, ctc_per_line, LabelSeq, LogitSeq};
use crate::data::Alphabet;
use crate::error::{Error, Result};
use crate::layers::{Blstm, BlstmCache, Encoder, EncoderCache, FeatureMap, ImagePlane, Linear};
use crate::optim::{Objective, Progress};
use crate::tensor::{read_parameters, write_parameters, GradStore, ParamStore};

const TRAILER_MAGIC: &[u8; 8] = b"PHTRCFG\0";

/// Parameter name prefixes of the four components.
pub const ENCODER: &str = "encoder";
pub const ATTENTION: &str = "attention";
pub const DECODER: &str = "decoder";
pub const OUTPUT: &str = "output";

#[derive(Debug, Clone)]
pub struct Model {
    config: ExperimentConfig,
    alphabet: Alphabet,
    params: ParamStore,
    encoder: Encoder,
    attention: AttentionNet,
    decoder: Option<(Blstm, Linear)>,
    mode: CollapseMode,
    steps: usize,
}

enum CollapseCache {
    Standard { height: usize },
    Attention(IterateCache),
}

pub struct ForwardCache {
    encoder: EncoderCache,
    features: FeatureMap,
    collapse: CollapseCache,
    collapsed: Vec<f64>,
    decoder: Option<BlstmCache>,
}

impl ForwardCache {
    pub fn attention(&self) -> Option<&AttentionMap> {
        match &self.collapse {
            CollapseCache::Attention(c) => Some(c.attention()),
            CollapseCache::Standard { .. } => None,
        }
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    collapse: CollapseMode,
    steps: usize,
    next_phase: usize,
    next_epoch: usize,
    config: ExperimentConfig,
}

fn component_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Model {
    /// Fresh parameters drawn from `config.seed`. Starts in standard-collapse
    /// mode.
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let alphabet = config.alphabet()?;
        let labels = alphabet.len() + 1;
        let mut params = ParamStore::new();
        let final_dim = config.encoder.final_dim.unwrap_or(labels);
        let encoder = Encoder::new(&mut params, ENCODER, &config.encoder, final_dim, &mut component_rng(config.seed, 1))?;
        let attention = AttentionNet::new(
            &mut params,
            ATTENTION,
            final_dim,
            config.attention.units,
            &mut component_rng(config.seed, 2),
        );
        let decoder = match config.decoder.kind {
            DecoderKind::Blstm => {
                let blstm = Blstm::new(&mut params, DECODER, final_dim, config.decoder.units, &mut component_rng(config.seed, 3));
                let out = Linear::new(&mut params, OUTPUT, 2 * config.decoder.units, labels, &mut component_rng(config.seed, 4));
                Some((blstm, out))
            }
            DecoderKind::Softmax => None,
        };
        Ok(Model {
            config: config.clone(),
            alphabet,
            params,
            encoder,
            attention,
            decoder,
            mode: CollapseMode::Standard,
            steps: config.attention.steps.unwrap_or(1),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn mode(&self) -> CollapseMode {
        self.mode
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn set_collapse(&mut self, mode: CollapseMode, steps: usize) {
        self.mode = mode;
        self.steps = steps.max(1);
    }

    /// `(height, width)` image pixels per feature-map cell.
    pub fn downsampling(&self) -> (usize, usize) {
        self.encoder.config.downsampling()
    }

    /// Redraws the attention weights exactly as [`Model::new`] drew them and
    /// clears their optimizer state.
    pub fn reinit_attention(&mut self) -> Result<()> {
        let mut fresh = ParamStore::new();
        AttentionNet::new(
            &mut fresh,
            ATTENTION,
            self.attention.feature_depth,
            self.config.attention.units,
            &mut component_rng(self.config.seed, 2),
        );
        self.params.load_matching(&fresh)?;
        Ok(())
    }

    /// Checksum of everything outside the attention network.
    pub fn shared_checksum(&self) -> String {
        self.params.checksum(|name| !name.starts_with(ATTENTION))
    }

    pub fn checksum(&self) -> String {
        self.params.checksum(|_| true)
    }

    fn check_image(&self, image: &ImagePlane) -> Result<()> {
        let (dh, dw) = self.downsampling();
        if image.height() < dh || image.width() < dw {
            return Err(Error::dim(
                "transcribe",
                format!(
                    "image {}x{} is smaller than one {dh}x{dw} encoder cell",
                    image.height(),
                    image.width()
                ),
            ));
        }
        if image.channels() != 1 {
            return Err(Error::dim("transcribe", format!("expected grayscale, got {} channels", image.channels())));
        }
        Ok(())
    }

    /// Label scores for a normalized image.
    pub fn forward(&self, image: &ImagePlane) -> Result<(LogitSeq, ForwardCache)> {
        self.check_image(image)?;
        let ps = &self.params;
        let (features, encoder) = self.encoder.forward(ps, image)?;
        let (collapsed, collapse) = match self.mode {
            CollapseMode::Standard => {
                (standard_collapse(&features)?, CollapseCache::Standard { height: features.height() })
            }
            CollapseMode::Attention => {
                let (z, cache) = iterate_collapse(ps, &self.attention, &features, self.steps)?;
                (z, CollapseCache::Attention(cache))
            }
        };
        let frames = collapsed.len();
        let collapsed = collapsed.data().to_vec();
        let (scores, decoder) = match &self.decoder {
            Some((blstm, out)) => {
                let cache = blstm.forward(ps, &collapsed)?;
                (out.forward(ps, cache.output())?, Some(cache))
            }
            None => (collapsed.clone(), None),
        };
        let logits = LogitSeq::new(frames, self.alphabet.len() + 1, scores)?;
        Ok((logits, ForwardCache { encoder, features, collapse, collapsed, decoder }))
    }

    /// Accumulates parameter gradients for `dL/dlogits`.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &[f64], gs: &mut GradStore) {
        let ps = &self.params;
        let dz = match (&self.decoder, &cache.decoder) {
            (Some((blstm, out)), Some(dc)) => {
                let dh = out.backward(ps, dc.output(), dlogits, gs);
                blstm.backward(ps, dc, &dh, gs)
            }
            _ => dlogits.to_vec(),
        };
        let da = match &cache.collapse {
            CollapseCache::Standard { height } => standard_collapse_backward(*height, &dz),
            CollapseCache::Attention(ic) => {
                iterate_collapse_backward(ps, &self.attention, &cache.features, ic, &dz, gs)
            }
        };
        debug_assert_eq!(cache.collapsed.len(), dz.len());
        self.encoder.backward(ps, &cache.encoder, &da, gs);
    }

    /// CTC loss of one sample and its parameter gradient. `lines` is only
    /// read by the per-line objective.
    pub fn loss_and_grad(
        &self,
        image: &ImagePlane,
        target: &LabelSeq,
        lines: &[LabelSeq],
        objective: Objective,
    ) -> Result<(f64, LogitSeq, GradStore)> {
        let (logits, cache) = self.forward(image)?;
        let (loss, dlogits) = match (objective, self.mode) {
            (Objective::Line, CollapseMode::Attention) => {
                let w = cache.features.width();
                let classes = logits.classes();
                let segments = (0..self.steps)
                    .map(|t| LogitSeq::new(w, classes, logits.data()[t * w * classes..(t + 1) * w * classes].to_vec()))
                    .collect::<Result<Vec<_>>>()?;
                let (loss, grads) = ctc_per_line(&segments, lines)?;
                (loss, grads.concat())
            }
            _ => ctc_loss(&logits, target)?,
        };
        let mut gs = self.params.zero_grads();
        self.backward(&cache, &dlogits, &mut gs);
        Ok((loss, logits, gs))
    }

    /// Best-path transcription of a normalized image.
    pub fn transcribe(&self, image: &ImagePlane) -> Result<(String, Option<AttentionMap>)> {
        let (logits, cache) = self.forward(image)?;
        let text = self.alphabet.decode(best_path_decode(&logits).labels());
        Ok((text, cache.attention().cloned()))
    }

    pub fn save(&self, path: &Path, progress: Progress) -> Result<()> {
        let mut bytes = Vec::new();
        write_parameters(&mut bytes, &self.params).map_err(|e| Error::io(path, e))?;
        let meta = CheckpointMeta {
            collapse: self.mode,
            steps: self.steps,
            next_phase: progress.phase,
            next_epoch: progress.epoch,
            config: ExperimentConfig { out: None, ..self.config.clone() },
        };
        let text = toml::to_string(&meta).expect("checkpoint metadata serializes");
        bytes.extend_from_slice(TRAILER_MAGIC);
        bytes.extend_from_slice(&(text.len() as u64).to_le_bytes());
        bytes.extend_from_slice(text.as_bytes());
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Rebuilds the model from a checkpoint; also returns where training
    /// should resume.
    pub fn load(path: &Path) -> Result<(Model, Progress)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let source = path.display().to_string();
        let mut rest: &[u8] = &bytes;
        let stored = read_parameters(&mut rest, &source)?;
        if rest.len() < 16 || &rest[..8] != TRAILER_MAGIC {
            return Err(Error::format(path, "missing configuration trailer"));
        }
        let len = u64::from_le_bytes(rest[8..16].try_into().expect("8 bytes")) as usize;
        let text = rest
            .get(16..16 + len)
            .and_then(|b| std::str::from_utf8(b).ok())
            .ok_or_else(|| Error::format(path, "truncated configuration trailer"))?;
        let meta: CheckpointMeta = toml::from_str(text).map_err(|e| Error::format(path, e.to_string()))?;
        let mut model = Model::new(&meta.config).map_err(|e| Error::format(path, e.to_string()))?;
        let matched = model.params.load_matching(&stored).map_err(|e| Error::format(path, e.to_string()))?;
        if matched != model.params.len() || stored.len() != model.params.len() {
            return Err(Error::format(
                path,
                format!("{} stored parameters, model has {}, {matched} matched", stored.len(), model.params.len()),
            ));
        }
        model.set_collapse(meta.collapse, meta.steps);
        Ok((model, Progress { phase: meta.next_phase, epoch: meta.next_epoch }))
    }
}
