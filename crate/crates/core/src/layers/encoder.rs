use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mdlstm::sum_directions;
use super::{tile, Conv, ConvCache, FeatureMap, ImagePlane, Linear, MdLstmBlock, MdLstmCache};
use crate::error::{Error, Result};
use crate::tensor::{GradStore, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Window {
    pub width: usize,
    pub height: usize,
}

impl Window {
    pub const fn new(width: usize, height: usize) -> Self {
        Window { width, height }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub tile: Window,
    pub mdlstm_units: Vec<usize>,
    pub conv_filters: Vec<usize>,
    /// One kernel per convolution; stride equals the kernel.
    pub conv_kernels: Vec<Window>,
    /// Depth of the final linear layer; the label count when unset.
    pub final_dim: Option<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            tile: Window::new(2, 2),
            mdlstm_units: vec![4, 20, 100],
            conv_filters: vec![12, 32],
            conv_kernels: vec![Window::new(2, 4), Window::new(2, 4)],
            final_dim: None,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("encoder: {m}")));
        if self.mdlstm_units.is_empty() {
            return bad("at least one MDLSTM layer is required".into());
        }
        if self.conv_filters.len() + 1 != self.mdlstm_units.len() {
            return bad(format!(
                "{} MDLSTM layers need {} convolutions, got {}",
                self.mdlstm_units.len(),
                self.mdlstm_units.len() - 1,
                self.conv_filters.len()
            ));
        }
        if self.conv_kernels.len() != self.conv_filters.len() {
            return bad(format!(
                "{} convolutions but {} kernels",
                self.conv_filters.len(),
                self.conv_kernels.len()
            ));
        }
        let windows = std::iter::once(&self.tile).chain(&self.conv_kernels);
        if windows.into_iter().any(|w| w.width == 0 || w.height == 0)
            || self.mdlstm_units.iter().chain(&self.conv_filters).any(|&n| n == 0)
            || self.final_dim == Some(0)
        {
            return bad("sizes must be positive".into());
        }
        Ok(())
    }

    /// Cumulative `(height, width)` downsampling from image to feature map.
    pub fn downsampling(&self) -> (usize, usize) {
        self.conv_kernels
            .iter()
            .fold((self.tile.height, self.tile.width), |(h, w), k| (h * k.height, w * k.width))
    }
}

/// Tiling, alternating MDLSTM blocks and non-overlapping convolutions, a sum
/// over the four directions of the top block, and a final linear layer.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub blocks: Vec<MdLstmBlock>,
    pub convs: Vec<Conv>,
    pub out: Linear,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    blocks: Vec<Vec<MdLstmCache>>,
    convs: Vec<ConvCache>,
    top: FeatureMap,
}

impl Encoder {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        config: &EncoderConfig,
        final_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut depth = config.tile.width * config.tile.height;
        let mut blocks = Vec::new();
        let mut convs = Vec::new();
        for (k, &units) in config.mdlstm_units.iter().enumerate() {
            blocks.push(MdLstmBlock::new(ps, &format!("{name}/mdlstm{k}"), depth, units, rng));
            depth = units;
            if let (Some(&filters), Some(kernel)) = (config.conv_filters.get(k), config.conv_kernels.get(k)) {
                convs.push(Conv::new(ps, &format!("{name}/conv{k}"), depth, kernel.width, kernel.height, filters, rng));
                depth = filters;
            }
        }
        let out = Linear::new(ps, &format!("{name}/linear"), depth, final_dim, rng);
        Ok(Encoder { config: config.clone(), blocks, convs, out })
    }

    pub fn output_dim(&self) -> usize {
        self.out.output
    }

    pub fn forward(&self, ps: &ParamStore, image: &ImagePlane) -> Result<(FeatureMap, EncoderCache)> {
        let mut x = tile(image, self.config.tile.height, self.config.tile.width)?;
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        let mut conv_caches = Vec::with_capacity(self.convs.len());
        for (k, block) in self.blocks.iter().enumerate() {
            let caches = block.forward(ps, &x)?;
            if let Some(conv) = self.convs.get(k) {
                let maps: Vec<FeatureMap> = caches.iter().map(|c| c.output().clone()).collect();
                let cc = conv.forward(ps, &maps)?;
                x = cc.output().clone();
                conv_caches.push(cc);
            }
            block_caches.push(caches);
        }
        let top = sum_directions(block_caches.last().expect("at least one block"))?;
        let a = self.out.forward(ps, top.data())?;
        let fm = FeatureMap::new(top.height(), top.width(), self.output_dim(), a)?;
        Ok((fm, EncoderCache { blocks: block_caches, convs: conv_caches, top }))
    }

    /// Accumulates parameter gradients given `dL/da` over the output map.
    pub fn backward(&self, ps: &ParamStore, cache: &EncoderCache, grad_out: &[f64], gs: &mut GradStore) {
        let dtop = self.out.backward(ps, cache.top.data(), grad_out, gs);
        let mut grads = vec![dtop; 4];
        for k in (0..self.blocks.len()).rev() {
            let dx = self.blocks[k].backward(ps, &cache.blocks[k], &grads, gs);
            if k > 0 {
                grads = self.convs[k - 1].backward(ps, &cache.convs[k - 1], &dx, gs);
            }
        }
    }
}
