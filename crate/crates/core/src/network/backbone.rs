//! Convolutional trunks exposing four tap points S1..S4.
//!
//! S1 is the output of the first convolution block (after its downsampling),
//! S2..S4 the outputs of the following three stages. For a 224x224 input both
//! trunks deliver S1..S4 at 56, 28, 14 and 7 pixels.

use std::collections::HashMap;
use std::path::PathBuf;

use ndarray::{Array4, ArrayD, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{
    relu, relu_backward, BatchNorm2d, BnCache, Conv2d, Init, MaxPool2d, MaxPoolCache, Mode, Module,
    Param,
};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Resnet50,
    Tiny,
}

/// Architecture contract of a trunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: BackboneKind,
    pub stage_channels: [usize; 4],
    pub stage_spatial: [usize; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained_weights_path: Option<PathBuf>,
}

impl BackboneSpec {
    /// Desk-scale trunk: two 3x3 conv blocks per stage, stride-2 downsampling.
    pub fn tiny() -> Self {
        Self::tiny_with_channels([16, 32, 64, 128])
    }

    pub fn tiny_with_channels(stage_channels: [usize; 4]) -> Self {
        Self {
            name: BackboneKind::Tiny,
            stage_channels,
            stage_spatial: [56, 28, 14, 7],
            pretrained_weights_path: None,
        }
    }

    pub fn resnet50() -> Self {
        Self {
            name: BackboneKind::Resnet50,
            stage_channels: [64, 512, 1024, 2048],
            stage_spatial: [56, 28, 14, 7],
            pretrained_weights_path: None,
        }
    }

    /// Spatial sizes of S1..S4 for a square input.
    pub fn expected_spatial(input: usize) -> [usize; 4] {
        // Both trunks halve the input five times; each stride-2 3x3 (pad 1) or
        // 7x7 (pad 3) step maps n -> ceil(n / 2).
        let mut sizes = [0; 4];
        let mut n = input;
        for step in 0..5 {
            n = n.div_ceil(2);
            if step >= 1 {
                sizes[step - 1] = n;
            }
        }
        sizes
    }

    pub fn validate(&self, input_size: usize) -> Result<()> {
        if self.stage_channels.contains(&0) {
            return invalid("stage channels must be positive");
        }
        if self.name == BackboneKind::Resnet50 && self.stage_channels != [64, 512, 1024, 2048] {
            return invalid(format!(
                "resnet50 stage channels are fixed at [64, 512, 1024, 2048], got {:?}",
                self.stage_channels
            ));
        }
        let expected = Self::expected_spatial(input_size);
        if self.stage_spatial != expected {
            return invalid(format!(
                "stage spatial sizes {:?} do not match {:?} for {input_size}px input",
                self.stage_spatial, expected
            ));
        }
        if !self.stage_spatial.windows(2).all(|w| w[0] > w[1]) {
            return invalid("stage spatial sizes must strictly decrease");
        }
        Ok(())
    }
}

/// Convolution followed by batch normalisation.
#[derive(Debug, Clone)]
pub struct ConvBn<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

impl<T: Scalar> ConvBn<T> {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng>(
        conv_name: &str,
        bn_name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::new(
                conv_name,
                cin,
                cout,
                k,
                stride,
                pad,
                false,
                Init::KaimingFanOut,
                rng,
            ),
            bn: BatchNorm2d::new(bn_name, cout),
        }
    }

    fn forward(&self, x: &Array4<T>, mode: Mode) -> (Array4<T>, BnCache<T>) {
        let z = self.conv.forward(x);
        self.bn.forward(&z, mode)
    }

    fn backward(
        &mut self,
        x: &Array4<T>,
        cache: &BnCache<T>,
        dy: &Array4<T>,
        need_dx: bool,
    ) -> Option<Array4<T>> {
        let dz = self.bn.backward(cache, dy);
        self.conv.backward(x, &dz, need_dx)
    }
}

impl<T: Scalar> Module<T> for ConvBn<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.conv.visit(f);
        self.bn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv.visit_mut(f);
        self.bn.visit_mut(f);
    }
}

/// Four stages of two conv-bn-relu blocks; the first block of each stage has stride 2.
#[derive(Debug, Clone)]
pub struct TinyBackbone<T> {
    blocks: Vec<ConvBn<T>>,
}

impl<T: Scalar> TinyBackbone<T> {
    fn new<R: Rng>(prefix: &str, in_channels: usize, channels: [usize; 4], rng: &mut R) -> Self {
        let mut blocks = Vec::with_capacity(8);
        let mut cin = in_channels;
        for (stage, &c) in channels.iter().enumerate() {
            for j in 0..2 {
                // Stage 1 downsamples twice so that S1 lands at input / 4.
                let stride = if j == 0 || stage == 0 { 2 } else { 1 };
                let base = format!("{prefix}stage{}.{j}", stage + 1);
                blocks.push(ConvBn::new(
                    &format!("{base}.conv"),
                    &format!("{base}.bn"),
                    cin,
                    c,
                    3,
                    stride,
                    1,
                    rng,
                ));
                cin = c;
            }
        }
        Self { blocks }
    }
}

/// Torchvision-layout bottleneck block (stride on the 3x3 convolution).
#[derive(Debug, Clone)]
pub struct Bottleneck<T> {
    c1: ConvBn<T>,
    c2: ConvBn<T>,
    c3: ConvBn<T>,
    downsample: Option<ConvBn<T>>,
}

#[derive(Debug, Clone)]
struct BottleneckCache<T> {
    x: Array4<T>,
    bn1: BnCache<T>,
    a1: Array4<T>,
    bn2: BnCache<T>,
    a2: Array4<T>,
    bn3: BnCache<T>,
    ds: Option<BnCache<T>>,
    out: Array4<T>,
}

impl<T: Scalar> Bottleneck<T> {
    fn new<R: Rng>(name: &str, cin: usize, width: usize, stride: usize, rng: &mut R) -> Self {
        let cout = width * 4;
        let downsample = (stride != 1 || cin != cout).then(|| {
            ConvBn::new(
                &format!("{name}.downsample.0"),
                &format!("{name}.downsample.1"),
                cin,
                cout,
                1,
                stride,
                0,
                rng,
            )
        });
        Self {
            c1: ConvBn::new(
                &format!("{name}.conv1"),
                &format!("{name}.bn1"),
                cin,
                width,
                1,
                1,
                0,
                rng,
            ),
            c2: ConvBn::new(
                &format!("{name}.conv2"),
                &format!("{name}.bn2"),
                width,
                width,
                3,
                stride,
                1,
                rng,
            ),
            c3: ConvBn::new(
                &format!("{name}.conv3"),
                &format!("{name}.bn3"),
                width,
                cout,
                1,
                1,
                0,
                rng,
            ),
            downsample,
        }
    }

    fn forward(&self, x: &Array4<T>, mode: Mode) -> (Array4<T>, BottleneckCache<T>) {
        let (z1, bn1) = self.c1.forward(x, mode);
        let a1 = relu(&z1);
        let (z2, bn2) = self.c2.forward(&a1, mode);
        let a2 = relu(&z2);
        let (mut z3, bn3) = self.c3.forward(&a2, mode);
        let ds = match &self.downsample {
            Some(d) => {
                let (idn, cache) = d.forward(x, mode);
                z3 += &idn;
                Some(cache)
            }
            None => {
                z3 += x;
                None
            }
        };
        let out = relu(&z3);
        (
            out.clone(),
            BottleneckCache {
                x: x.clone(),
                bn1,
                a1,
                bn2,
                a2,
                bn3,
                ds,
                out,
            },
        )
    }

    fn backward(
        &mut self,
        cache: &BottleneckCache<T>,
        dy: &Array4<T>,
        need_dx: bool,
    ) -> Option<Array4<T>> {
        let d_sum = relu_backward(&cache.out, dy);
        let d_a2 = self
            .c3
            .backward(&cache.a2, &cache.bn3, &d_sum, true)
            .expect("dx");
        let d_z2 = relu_backward(&cache.a2, &d_a2);
        let d_a1 = self
            .c2
            .backward(&cache.a1, &cache.bn2, &d_z2, true)
            .expect("dx");
        let d_z1 = relu_backward(&cache.a1, &d_a1);
        let dx_main = self.c1.backward(&cache.x, &cache.bn1, &d_z1, need_dx);
        let dx_skip = match (&mut self.downsample, &cache.ds) {
            (Some(d), Some(c)) => d.backward(&cache.x, c, &d_sum, need_dx),
            _ => need_dx.then(|| d_sum.clone()),
        };
        match (dx_main, dx_skip) {
            (Some(mut a), Some(b)) => {
                a += &b;
                Some(a)
            }
            _ => None,
        }
    }
}

impl<T: Scalar> Module<T> for Bottleneck<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.c1.visit(f);
        self.c2.visit(f);
        self.c3.visit(f);
        if let Some(d) = &self.downsample {
            d.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.c1.visit_mut(f);
        self.c2.visit_mut(f);
        self.c3.visit_mut(f);
        if let Some(d) = &mut self.downsample {
            d.visit_mut(f);
        }
    }
}

/// ResNet-50 trunk (without the classifier), 3/4/6/3 bottlenecks.
#[derive(Debug, Clone)]
pub struct ResNet50<T> {
    stem: ConvBn<T>,
    pool: MaxPool2d,
    layers: [Vec<Bottleneck<T>>; 4],
}

impl<T: Scalar> ResNet50<T> {
    fn new<R: Rng>(prefix: &str, in_channels: usize, rng: &mut R) -> Self {
        let stem = ConvBn::new(
            &format!("{prefix}conv1"),
            &format!("{prefix}bn1"),
            in_channels,
            64,
            7,
            2,
            3,
            rng,
        );
        let mut cin = 64;
        let counts = [3, 4, 6, 3];
        let widths = [64, 128, 256, 512];
        let layers = std::array::from_fn(|l| {
            (0..counts[l])
                .map(|b| {
                    let stride = if b == 0 && l > 0 { 2 } else { 1 };
                    let block = Bottleneck::new(
                        &format!("{prefix}layer{}.{b}", l + 1),
                        cin,
                        widths[l],
                        stride,
                        rng,
                    );
                    cin = widths[l] * 4;
                    block
                })
                .collect()
        });
        Self {
            stem,
            pool: MaxPool2d {
                kernel: 3,
                stride: 2,
                padding: 1,
            },
            layers,
        }
    }
}

/// A trunk instance.
#[derive(Debug, Clone)]
pub enum Backbone<T> {
    Tiny(TinyBackbone<T>),
    ResNet50(Box<ResNet50<T>>),
}

#[derive(Debug, Clone)]
enum CacheKind<T> {
    Tiny {
        /// `acts[0]` is the input, `acts[i + 1]` the output of block `i`.
        acts: Vec<Array4<T>>,
        bns: Vec<BnCache<T>>,
    },
    ResNet {
        input: Array4<T>,
        stem_bn: BnCache<T>,
        stem_out: Array4<T>,
        pool: MaxPoolCache,
        s1: Array4<T>,
        blocks: [Vec<BottleneckCache<T>>; 4],
    },
}

/// Forward state of a trunk; holds the four taps.
#[derive(Debug, Clone)]
pub struct BackboneCache<T> {
    kind: CacheKind<T>,
}

impl<T: Scalar> BackboneCache<T> {
    /// Tap `k` in 0..4 (S1..S4).
    pub fn tap(&self, k: usize) -> &Array4<T> {
        match &self.kind {
            CacheKind::Tiny { acts, .. } => &acts[2 * (k + 1)],
            CacheKind::ResNet { s1, blocks, .. } => {
                if k == 0 {
                    s1
                } else {
                    &blocks[k].last().expect("non-empty layer").out
                }
            }
        }
    }
}

impl<T: Scalar> Backbone<T> {
    /// Builds a trunk; `prefix` namespaces its parameters (e.g. `"rgb."`).
    pub fn new<R: Rng>(spec: &BackboneSpec, prefix: &str, in_channels: usize, rng: &mut R) -> Self {
        match spec.name {
            BackboneKind::Tiny => Backbone::Tiny(TinyBackbone::new(
                prefix,
                in_channels,
                spec.stage_channels,
                rng,
            )),
            BackboneKind::Resnet50 => {
                Backbone::ResNet50(Box::new(ResNet50::new(prefix, in_channels, rng)))
            }
        }
    }

    pub fn forward(&self, x: &Array4<T>, mode: Mode) -> BackboneCache<T> {
        match self {
            Backbone::Tiny(t) => {
                let mut acts = Vec::with_capacity(t.blocks.len() + 1);
                let mut bns = Vec::with_capacity(t.blocks.len());
                acts.push(x.clone());
                for block in &t.blocks {
                    let (z, bn) = block.forward(acts.last().expect("input"), mode);
                    acts.push(relu(&z));
                    bns.push(bn);
                }
                BackboneCache {
                    kind: CacheKind::Tiny { acts, bns },
                }
            }
            Backbone::ResNet50(r) => {
                let (z, stem_bn) = r.stem.forward(x, mode);
                let stem_out = relu(&z);
                let (s1, pool) = r.pool.forward(&stem_out);
                let mut current = s1.clone();
                let blocks = std::array::from_fn(|l| {
                    r.layers[l]
                        .iter()
                        .map(|b| {
                            let (out, cache) = b.forward(&current, mode);
                            current = out;
                            cache
                        })
                        .collect()
                });
                BackboneCache {
                    kind: CacheKind::ResNet {
                        input: x.clone(),
                        stem_bn,
                        stem_out,
                        pool,
                        s1,
                        blocks,
                    },
                }
            }
        }
    }

    /// Backpropagates gradients arriving at the taps.
    ///
    /// Batch-norm running statistics are committed here for train-mode caches,
    /// so a forward pass alone never mutates the model.
    pub fn backward(
        &mut self,
        cache: &BackboneCache<T>,
        tap_grads: [Option<Array4<T>>; 4],
        need_dx: bool,
    ) -> Option<Array4<T>> {
        let [g1, g2, g3, g4] = tap_grads;
        let mut taps = [g1, g2, g3, g4];
        match (self, &cache.kind) {
            (Backbone::Tiny(t), CacheKind::Tiny { acts, bns }) => {
                let mut grad: Option<Array4<T>> = None;
                for i in (0..t.blocks.len()).rev() {
                    if (i + 1) % 2 == 0 {
                        if let Some(g) = taps[i.div_ceil(2) - 1].take() {
                            grad = Some(match grad {
                                Some(mut acc) => {
                                    acc += &g;
                                    acc
                                }
                                None => g,
                            });
                        }
                    }
                    let Some(dy) = grad.take() else { continue };
                    let dz = relu_backward(&acts[i + 1], &dy);
                    let want_dx = i > 0 || need_dx;
                    grad = t.blocks[i].backward(&acts[i], &bns[i], &dz, want_dx);
                }
                grad
            }
            (
                Backbone::ResNet50(r),
                CacheKind::ResNet {
                    input,
                    stem_bn,
                    stem_out,
                    pool,
                    blocks,
                    ..
                },
            ) => {
                fn accumulate<T: Scalar>(
                    grad: Option<Array4<T>>,
                    extra: Option<Array4<T>>,
                ) -> Option<Array4<T>> {
                    match (grad, extra) {
                        (Some(mut a), Some(b)) => {
                            a += &b;
                            Some(a)
                        }
                        (a, b) => a.or(b),
                    }
                }
                // Layer l (1..=3) ends at tap l; layer 0 sits between S1 and S2 untapped.
                let mut grad: Option<Array4<T>> = None;
                for l in (0..4).rev() {
                    if l > 0 {
                        grad = accumulate(grad, taps[l].take());
                    }
                    for (b, block_cache) in r.layers[l].iter_mut().zip(blocks[l].iter()).rev() {
                        let Some(dy) = grad.take() else { break };
                        grad = b.backward(block_cache, &dy, true);
                    }
                }
                let grad = accumulate(grad, taps[0].take())?;
                let d_stem = r.pool.backward(pool, &grad);
                let dz = relu_backward(stem_out, &d_stem);
                r.stem.backward(input, stem_bn, &dz, need_dx)
            }
            _ => unreachable!("cache produced by a different backbone kind"),
        }
    }

    /// Copies matching tensors from a name -> tensor map (names without stream prefix).
    ///
    /// A first convolution with more input channels than the source (the
    /// frequency stream) receives the source kernel tiled across channels and
    /// rescaled to keep activation magnitudes.
    pub fn load_pretrained(
        &mut self,
        prefix: &str,
        tensors: &HashMap<String, ArrayD<f32>>,
    ) -> Result<usize> {
        let mut loaded = 0;
        let mut error = None;
        self.visit_mut(&mut |p| {
            if error.is_some() {
                return;
            }
            let key = p.name.strip_prefix(prefix).unwrap_or(&p.name);
            let Some(src) = tensors.get(key) else { return };
            if src.shape() == p.value.shape() {
                Zip::from(&mut p.value)
                    .and(src)
                    .for_each(|d, &s| *d = T::of(s as f64));
                loaded += 1;
            } else if p.value.ndim() == 4
                && src.ndim() == 4
                && src.shape()[0] == p.value.shape()[0]
                && src.shape()[2..] == p.value.shape()[2..]
            {
                let cin_src = src.shape()[1];
                let cin = p.value.shape()[1];
                let scale = cin_src as f64 / cin as f64;
                let shape = p.value.shape().to_vec();
                for o in 0..shape[0] {
                    for c in 0..cin {
                        for i in 0..shape[2] {
                            for j in 0..shape[3] {
                                p.value[[o, c, i, j]] =
                                    T::of(src[[o, c % cin_src, i, j]] as f64 * scale);
                            }
                        }
                    }
                }
                loaded += 1;
            } else {
                error = Some(Error::Checkpoint(format!(
                    "pretrained tensor {key} has shape {:?}, expected {:?}",
                    src.shape(),
                    p.value.shape()
                )));
            }
        });
        match error {
            Some(e) => Err(e),
            None => Ok(loaded),
        }
    }
}

impl<T: Scalar> Module<T> for Backbone<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        match self {
            Backbone::Tiny(t) => t.blocks.iter().for_each(|b| b.visit(f)),
            Backbone::ResNet50(r) => {
                r.stem.visit(f);
                r.layers.iter().flatten().for_each(|b| b.visit(f));
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            Backbone::Tiny(t) => t.blocks.iter_mut().for_each(|b| b.visit_mut(f)),
            Backbone::ResNet50(r) => {
                r.stem.visit_mut(f);
                r.layers.iter_mut().flatten().for_each(|b| b.visit_mut(f));
            }
        }
    }
}
