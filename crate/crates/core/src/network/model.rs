use ndarray::{concatenate, s, Array1, Array2, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backbone::{Backbone, BackboneCache, BackboneSpec};
use crate::attention::{
    ChannelAttention, ChannelAttentionConfig, ChannelCache, SpatialAttention,
    SpatialAttentionConfig, SpatialCache,
};
use crate::error::{invalid, Result};
use crate::freq::{
    decompose_backward, decompose_batch, BandGeometry, DecomposeCache, FilterBank, MaskInit,
    N_BANDS,
};
use crate::nn::{
    bilinear_resize, bilinear_resize_backward, global_avg_pool, global_avg_pool_backward, relu,
    relu_backward, Conv2d, Init, Linear, Mode, Module, Param,
};
use crate::tensor::{sigmoid, Scalar};

/// Which head drives the per-video decision score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VideoScore {
    #[default]
    Binary,
    PixelMean,
    /// Average of the binary probability and the pixel-map mean.
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneSpec,
    /// Adds the frequency-decomposition stream.
    pub use_mfd: bool,
    /// Adds the attention taps; without them stage features are fused plainly.
    pub use_ham: bool,
    pub reduction_ratio: usize,
    pub spatial_kernels: [usize; 2],
    pub input_size: usize,
    pub in_channels: usize,
    pub pixel_map_size: usize,
    pub band_geometry: BandGeometry,
    pub mask_init: MaskInit,
    pub video_score: VideoScore,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneSpec::tiny(),
            use_mfd: true,
            use_ham: true,
            reduction_ratio: 16,
            spatial_kernels: [7, 5],
            input_size: 224,
            in_channels: 3,
            pixel_map_size: 14,
            band_geometry: BandGeometry::AntiDiagonal,
            mask_init: MaskInit::Zeros,
            video_score: VideoScore::Binary,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate(self.input_size)?;
        if self.in_channels == 0 || self.pixel_map_size == 0 {
            return invalid("input channels and pixel map size must be positive");
        }
        if self.use_ham {
            SpatialAttentionConfig::new(self.spatial_kernels[0])?;
            SpatialAttentionConfig::new(self.spatial_kernels[1])?;
            ChannelAttentionConfig::new(self.backbone.stage_channels[2], self.reduction_ratio)?;
        }
        let cat: usize = self.backbone.stage_channels[..3].iter().sum();
        if cat < 4 {
            return invalid("pixel head needs at least 4 concatenated channels");
        }
        Ok(())
    }

    pub fn n_streams(&self) -> usize {
        if self.use_mfd {
            2
        } else {
            1
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.n_streams() * self.backbone.stage_channels[3]
    }
}

/// Per-frame model output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub frame_id: String,
    /// Sigmoid pixel map, row-major `pixel_map_size^2` values.
    pub pixel_map: Vec<f64>,
    pub binary_prob: f64,
    /// Concatenated pooled S4 features, pre-classifier.
    pub embedding: Vec<f32>,
}

impl Prediction {
    pub fn pixel_mean(&self) -> f64 {
        self.pixel_map.iter().sum::<f64>() / self.pixel_map.len().max(1) as f64
    }
}

/// Elementwise sum of two stage features.
pub fn fuse_stage<T: Scalar>(rgb: &Array4<T>, mfd: &Array4<T>) -> Result<Array4<T>> {
    if rgb.dim() != mfd.dim() {
        return invalid(format!("cannot fuse {:?} with {:?}", rgb.dim(), mfd.dim()));
    }
    Ok(rgb + mfd)
}

/// Mean-rule fusion of frame-level binary probabilities.
pub fn predict_video(frames: &[Prediction]) -> Result<f64> {
    predict_video_with(frames, VideoScore::Binary)
}

pub fn predict_video_with(frames: &[Prediction], source: VideoScore) -> Result<f64> {
    if frames.is_empty() {
        return invalid("a video needs at least one frame");
    }
    let frame_score = |p: &Prediction| match source {
        VideoScore::Binary => p.binary_prob,
        VideoScore::PixelMean => p.pixel_mean(),
        VideoScore::Both => 0.5 * (p.binary_prob + p.pixel_mean()),
    };
    Ok(frames.iter().map(frame_score).sum::<f64>() / frames.len() as f64)
}

#[derive(Debug, Clone)]
pub struct Ham<T> {
    pub spatial1: SpatialAttention<T>,
    pub spatial2: SpatialAttention<T>,
    pub channel3: ChannelAttention<T>,
}

#[derive(Debug, Clone)]
pub struct PixelHead<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
}

/// Raw (pre-sigmoid) outputs of a batch.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// `[N, 1, S, S]` pixel logits.
    pub pixel_logits: Array4<T>,
    /// `[N]` binary logits.
    pub binary_logits: Array1<T>,
    /// `[N, E]` pooled S4 features.
    pub embedding: Array2<T>,
}

impl<T: Scalar> ForwardOutput<T> {
    pub fn pixel_probs(&self) -> Array4<T> {
        self.pixel_logits.mapv(sigmoid)
    }

    pub fn binary_probs(&self) -> Array1<T> {
        self.binary_logits.mapv(sigmoid)
    }

    pub fn predictions(&self, frame_ids: &[String]) -> Vec<Prediction> {
        let pix = self.pixel_probs();
        let bin = self.binary_probs();
        frame_ids
            .iter()
            .enumerate()
            .map(|(i, id)| Prediction {
                frame_id: id.clone(),
                pixel_map: pix
                    .slice(s![i, 0, .., ..])
                    .iter()
                    .map(|v| v.f64())
                    .collect(),
                binary_prob: bin[i].f64(),
                embedding: self
                    .embedding
                    .row(i)
                    .iter()
                    .map(|v| v.f64() as f32)
                    .collect(),
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
enum TapCache<T> {
    Spatial(SpatialCache<T>),
    Channel(ChannelCache<T>),
    Plain,
}

/// Everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct ModelCache<T> {
    rgb: BackboneCache<T>,
    mfd: Option<(BackboneCache<T>, Option<DecomposeCache<T>>)>,
    taps: Vec<TapCache<T>>,
    tap_dims: Vec<(usize, usize)>,
    concat: Array4<T>,
    head_hidden: Array4<T>,
    embedding: Array2<T>,
}

impl<T: Scalar> ModelCache<T> {
    /// Spatial attention maps `[N, H, W]` of the first two taps, if present.
    pub fn spatial_maps(&self) -> Vec<&ndarray::Array3<T>> {
        self.taps
            .iter()
            .filter_map(|t| match t {
                TapCache::Spatial(c) => Some(&c.map),
                _ => None,
            })
            .collect()
    }
}

/// The dual-stream presentation attack detector.
#[derive(Debug, Clone)]
pub struct LmfdModel<T: Scalar> {
    pub config: ModelConfig,
    pub filter_bank: Option<FilterBank<T>>,
    pub rgb: Backbone<T>,
    pub mfd: Option<Backbone<T>>,
    pub ham: Option<Ham<T>>,
    pub pixel_head: PixelHead<T>,
    pub binary_head: Linear<T>,
}

impl<T: Scalar> LmfdModel<T> {
    /// Builds a model with parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = &config.backbone;
        let size = config.input_size;
        let rgb = Backbone::new(spec, "rgb.", config.in_channels, &mut rng);
        let (filter_bank, mfd) = if config.use_mfd {
            let bank = FilterBank::new(
                size,
                size,
                config.band_geometry,
                config.mask_init,
                seed ^ 0x6d66_645f,
            )?;
            let mfd = Backbone::new(spec, "mfd.", N_BANDS * config.in_channels, &mut rng);
            (Some(bank), Some(mfd))
        } else {
            (None, None)
        };
        let ch = spec.stage_channels;
        let ham = if config.use_ham {
            Some(Ham {
                spatial1: SpatialAttention::new(
                    "ham.spatial1",
                    SpatialAttentionConfig::new(config.spatial_kernels[0])?,
                    &mut rng,
                ),
                spatial2: SpatialAttention::new(
                    "ham.spatial2",
                    SpatialAttentionConfig::new(config.spatial_kernels[1])?,
                    &mut rng,
                ),
                channel3: ChannelAttention::new(
                    "ham.channel3",
                    ChannelAttentionConfig::new(ch[2], config.reduction_ratio)?,
                    &mut rng,
                ),
            })
        } else {
            None
        };
        let cat = ch[0] + ch[1] + ch[2];
        let pixel_head = PixelHead {
            conv1: Conv2d::new(
                "pixel_head.conv1",
                cat,
                cat / 4,
                3,
                1,
                1,
                true,
                Init::KaimingFanOut,
                &mut rng,
            ),
            conv2: Conv2d::new(
                "pixel_head.conv2",
                cat / 4,
                1,
                3,
                1,
                1,
                true,
                Init::UniformFanIn,
                &mut rng,
            ),
        };
        let binary_head = Linear::new(
            "binary_head",
            config.embedding_dim(),
            1,
            Init::UniformFanIn,
            &mut rng,
        );
        Ok(Self {
            config,
            filter_bank,
            rgb,
            mfd,
            ham,
            pixel_head,
            binary_head,
        })
    }

    fn check_input(&self, x: &Array4<T>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        let size = self.config.input_size;
        if c != self.config.in_channels || h != size || w != size {
            return invalid(format!(
                "expected input [N, {}, {size}, {size}], got {:?}",
                self.config.in_channels,
                x.dim()
            ));
        }
        Ok(())
    }

    /// Forward pass from normalised RGB frames; decomposes them internally.
    pub fn forward(
        &self,
        rgb: &Array4<T>,
        mode: Mode,
    ) -> Result<(ForwardOutput<T>, ModelCache<T>)> {
        self.check_input(rgb)?;
        match &self.filter_bank {
            Some(bank) => {
                let (stack, dcache) = decompose_batch(rgb, bank)?;
                self.forward_streams(rgb, Some((stack, Some(dcache))), mode)
            }
            None => self.forward_streams(rgb, None, mode),
        }
    }

    /// Forward pass with a precomputed decomposition stack `[N, 4C, H, W]`.
    ///
    /// Gradients do not reach the filter bank through this entry point.
    pub fn forward_with_stack(
        &self,
        rgb: &Array4<T>,
        stack: &Array4<T>,
        mode: Mode,
    ) -> Result<(ForwardOutput<T>, ModelCache<T>)> {
        self.check_input(rgb)?;
        let (n, c, h, w) = stack.dim();
        if n != rgb.dim().0
            || c != N_BANDS * self.config.in_channels
            || (h, w) != (rgb.dim().2, rgb.dim().3)
        {
            return invalid(format!(
                "decomposition stack {:?} does not match input {:?}",
                stack.dim(),
                rgb.dim()
            ));
        }
        if self.mfd.is_none() {
            return invalid("model was built without the frequency stream");
        }
        self.forward_streams(rgb, Some((stack.clone(), None)), mode)
    }

    fn forward_streams(
        &self,
        rgb: &Array4<T>,
        mfd_input: Option<(Array4<T>, Option<DecomposeCache<T>>)>,
        mode: Mode,
    ) -> Result<(ForwardOutput<T>, ModelCache<T>)> {
        let rgb_cache = self.rgb.forward(rgb, mode);
        let mfd = match (&self.mfd, mfd_input) {
            (Some(trunk), Some((stack, dcache))) => Some((trunk.forward(&stack, mode), dcache)),
            _ => None,
        };
        let size = self.config.pixel_map_size;
        let mut taps = Vec::with_capacity(3);
        let mut tap_dims = Vec::with_capacity(3);
        let mut resized = Vec::with_capacity(3);
        for k in 0..3 {
            let fused = match &mfd {
                Some((m, _)) => fuse_stage(rgb_cache.tap(k), m.tap(k))?,
                None => rgb_cache.tap(k).clone(),
            };
            let (attended, cache) = match &self.ham {
                Some(ham) => match k {
                    0 => {
                        let (y, c) = ham.spatial1.forward(&fused);
                        (y, TapCache::Spatial(c))
                    }
                    1 => {
                        let (y, c) = ham.spatial2.forward(&fused);
                        (y, TapCache::Spatial(c))
                    }
                    _ => {
                        let (y, c) = ham.channel3.forward(&fused)?;
                        (y, TapCache::Channel(c))
                    }
                },
                None => (fused, TapCache::Plain),
            };
            tap_dims.push((attended.dim().2, attended.dim().3));
            resized.push(bilinear_resize(&attended, size, size));
            taps.push(cache);
        }
        let concat = concatenate(
            Axis(1),
            &[resized[0].view(), resized[1].view(), resized[2].view()],
        )
        .expect("same batch and spatial size");
        let head_hidden = relu(&self.pixel_head.conv1.forward(&concat));
        let pixel_logits = self.pixel_head.conv2.forward(&head_hidden);

        let mut pooled = vec![global_avg_pool(rgb_cache.tap(3))];
        if let Some((m, _)) = &mfd {
            pooled.push(global_avg_pool(m.tap(3)));
        }
        let views: Vec<_> = pooled.iter().map(|p| p.view()).collect();
        let embedding = concatenate(Axis(1), &views).expect("same batch");
        let binary_logits = self.binary_head.forward(&embedding).column(0).to_owned();
        Ok((
            ForwardOutput {
                pixel_logits,
                binary_logits,
                embedding: embedding.clone(),
            },
            ModelCache {
                rgb: rgb_cache,
                mfd,
                taps,
                tap_dims,
                concat,
                head_hidden,
                embedding,
            },
        ))
    }

    /// Backpropagates logit gradients into every parameter's `grad`.
    ///
    /// Returns the gradient w.r.t. the decomposition stack when the cache came
    /// from [`LmfdModel::forward_with_stack`] (otherwise it is consumed by the
    /// filter bank and `None` is returned).
    pub fn backward(
        &mut self,
        cache: &ModelCache<T>,
        d_pixel_logits: &Array4<T>,
        d_binary_logits: &Array1<T>,
    ) -> Option<Array4<T>> {
        let ch = self.config.backbone.stage_channels;
        let d_logit = d_binary_logits.clone().insert_axis(Axis(1));
        let d_embedding = self.binary_head.backward(&cache.embedding, &d_logit);
        let (h4, w4) = (cache.rgb.tap(3).dim().2, cache.rgb.tap(3).dim().3);
        let d_s4_rgb =
            global_avg_pool_backward(&d_embedding.slice(s![.., 0..ch[3]]).to_owned(), h4, w4);
        let d_s4_mfd = cache.mfd.as_ref().map(|_| {
            global_avg_pool_backward(&d_embedding.slice(s![.., ch[3]..]).to_owned(), h4, w4)
        });

        let d_hidden = self
            .pixel_head
            .conv2
            .backward(&cache.head_hidden, d_pixel_logits, true)
            .expect("dx");
        let d_pre = relu_backward(&cache.head_hidden, &d_hidden);
        let d_concat = self
            .pixel_head
            .conv1
            .backward(&cache.concat, &d_pre, true)
            .expect("dx");

        let mut d_fused: Vec<Array4<T>> = Vec::with_capacity(3);
        let mut offset = 0;
        for k in 0..3 {
            let d_resized = d_concat
                .slice(s![.., offset..offset + ch[k], .., ..])
                .to_owned();
            offset += ch[k];
            let (h, w) = cache.tap_dims[k];
            let d_att = bilinear_resize_backward(&d_resized, h, w);
            let d = match (&mut self.ham, &cache.taps[k]) {
                (Some(ham), TapCache::Spatial(c)) if k == 0 => ham.spatial1.backward(c, &d_att),
                (Some(ham), TapCache::Spatial(c)) => ham.spatial2.backward(c, &d_att),
                (Some(ham), TapCache::Channel(c)) => ham.channel3.backward(c, &d_att),
                _ => d_att,
            };
            d_fused.push(d);
        }

        let mfd_taps = d_s4_mfd.map(|d4| {
            [
                Some(d_fused[0].clone()),
                Some(d_fused[1].clone()),
                Some(d_fused[2].clone()),
                Some(d4),
            ]
        });
        let [f0, f1, f2]: [Array4<T>; 3] = d_fused.try_into().expect("three taps");
        self.rgb.backward(
            &cache.rgb,
            [Some(f0), Some(f1), Some(f2), Some(d_s4_rgb)],
            false,
        );
        match (&mut self.mfd, &cache.mfd, mfd_taps) {
            (Some(trunk), Some((mcache, dcache)), Some(taps)) => {
                let d_stack = trunk.backward(mcache, taps, true).expect("dx requested");
                let Some(dcache) = dcache else {
                    return Some(d_stack);
                };
                let bank = self
                    .filter_bank
                    .as_mut()
                    .expect("frequency stream has a filter bank");
                decompose_backward(bank, dcache, &d_stack, false);
                None
            }
            _ => None,
        }
    }

    /// Evaluation-mode frame predictions.
    pub fn predict(&self, rgb: &Array4<T>, frame_ids: &[String]) -> Result<Vec<Prediction>> {
        let (out, _) = self.forward(rgb, Mode::Eval)?;
        Ok(out.predictions(frame_ids))
    }

    /// Parameters in a stable order.
    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |p| names.push(p.name.clone()));
        names
    }
}

impl<T: Scalar> Module<T> for LmfdModel<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        if let Some(bank) = &self.filter_bank {
            bank.visit(f);
        }
        self.rgb.visit(f);
        if let Some(m) = &self.mfd {
            m.visit(f);
        }
        if let Some(ham) = &self.ham {
            ham.spatial1.visit(f);
            ham.spatial2.visit(f);
            ham.channel3.visit(f);
        }
        self.pixel_head.conv1.visit(f);
        self.pixel_head.conv2.visit(f);
        self.binary_head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        if let Some(bank) = &mut self.filter_bank {
            bank.visit_mut(f);
        }
        self.rgb.visit_mut(f);
        if let Some(m) = &mut self.mfd {
            m.visit_mut(f);
        }
        if let Some(ham) = &mut self.ham {
            ham.spatial1.visit_mut(f);
            ham.spatial2.visit_mut(f);
            ham.channel3.visit_mut(f);
        }
        self.pixel_head.conv1.visit_mut(f);
        self.pixel_head.conv2.visit_mut(f);
        self.binary_head.visit_mut(f);
    }
}
