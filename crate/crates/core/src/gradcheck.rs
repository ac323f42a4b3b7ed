//! Central-difference checks of the hand-written backward passes.
//!
//! Each check perturbs randomly chosen parameters and inputs, compares the
//! numeric slope of a scalar loss against the analytic gradient and reports
//! the worst relative error. Used by the test suites; cheap enough to run on
//! demand after touching a backward pass.

use ndarray::{Array1, Array4, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{
    ChannelAttention, ChannelAttentionConfig, SpatialAttention, SpatialAttentionConfig,
};
use crate::error::Result;
use crate::freq::{decompose_backward, decompose_batch, BandGeometry, FilterBank, MaskInit};
use crate::losses::{
    batch_loss, bce_grad, bce_loss, focal_grad, focal_loss, smooth_l1, smooth_l1_grad, LossKind,
    LossWeights,
};
use crate::network::{BackboneSpec, LmfdModel, ModelConfig};
use crate::nn::{Mode, Module, Param};

/// Worst relative error of one check against its tolerance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheck {
    fn new(name: impl Into<String>, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            checked: 0,
            max_rel_err: 0.0,
            tolerance,
        }
    }

    fn record(&mut self, numeric: f64, analytic: f64) {
        self.checked += 1;
        let e = rel_err(numeric, analytic);
        self.max_rel_err = self.max_rel_err.max(if e.is_nan() { f64::INFINITY } else { e });
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < self.tolerance
    }
}

/// Relative error with a small floor so exact zeros compare cleanly.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn random4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn weighted_sum(y: &Array4<f64>, w: &Array4<f64>) -> f64 {
    (y * w).sum()
}

fn param<T: crate::Scalar>(m: &dyn Module<T>, name: &str, grad: bool) -> ArrayD<T> {
    let mut v = None;
    m.visit(&mut |p: &Param<T>| {
        if p.name == name {
            v = Some(if grad { p.grad.clone() } else { p.value.clone() });
        }
    });
    v.unwrap_or_else(|| panic!("no parameter named {name}"))
}

fn nudge(m: &mut dyn Module<f64>, name: &str, idx: usize, delta: f64) {
    m.visit_mut(&mut |p: &mut Param<f64>| {
        if p.name == name {
            p.value.as_slice_mut().expect("contiguous parameter")[idx] += delta;
        }
    });
}

fn trainable_names<T: crate::Scalar>(m: &dyn Module<T>) -> Vec<String> {
    let mut names = Vec::new();
    m.visit(&mut |p: &Param<T>| {
        if p.trainable {
            names.push(p.name.clone());
        }
    });
    names
}

fn random_index(rng: &mut ChaCha8Rng, d: (usize, usize, usize, usize)) -> (usize, usize, usize, usize) {
    (
        rng.random_range(0..d.0),
        rng.random_range(0..d.1),
        rng.random_range(0..d.2),
        rng.random_range(0..d.3),
    )
}

/// Scalar losses and the batch loss with respect to its logits.
pub fn losses() -> Result<GradCheck> {
    const H: f64 = 1e-6;
    let central = |f: &dyn Fn(f64) -> f64, x: f64| (f(x + H) - f(x - H)) / (2.0 * H);
    let mut out = GradCheck::new("losses", 1e-6);
    for &p in &[0.03, 0.2, 0.5, 0.81, 0.97] {
        for &y in &[0.0, 1.0] {
            for &g in &[0.0, 0.5, 2.0] {
                let fd = central(&|q| focal_loss(q, y, g).unwrap_or(f64::NAN), p);
                out.record(fd, focal_grad(p, y, g)?);
            }
            let fd = central(&|q| bce_loss(q, y).unwrap_or(f64::NAN), p);
            out.record(fd, bce_grad(p, y)?);
        }
    }
    let gt = [1.0, 0.0, 1.0, 0.0];
    let pred = [0.3, 0.4, -1.7, 2.2];
    let g = smooth_l1_grad(&pred, &gt)?;
    for k in 0..pred.len() {
        let f = |v: f64| {
            let mut q = pred;
            q[k] = v;
            smooth_l1(&q, &gt).unwrap_or(f64::NAN)
        };
        out.record(central(&f, pred[k]), g[k]);
    }

    let pix = Array4::from_shape_fn((2, 1, 3, 3), |(n, _, i, j)| {
        (n as f64 - 0.5) * 0.7 + 0.3 * i as f64 - 0.2 * j as f64
    });
    let bin = Array1::from(vec![0.4, -1.1]);
    let labels = [1.0, 0.0];
    for (kind, epoch) in [(LossKind::FocalSl, 0), (LossKind::FocalSl, 7), (LossKind::Bce, 0)] {
        let w = LossWeights {
            kind,
            ..Default::default()
        };
        let base = batch_loss(&pix, &bin, &labels, epoch, &w)?;
        let total = |p: &Array4<f64>, b: &Array1<f64>| {
            batch_loss(p, b, &labels, epoch, &w).map_or(f64::NAN, |l| l.total)
        };
        for idx in [(0, 0, 1, 2), (1, 0, 2, 0), (0, 0, 0, 0)] {
            let mut a = pix.clone();
            a[idx] += H;
            let mut b = pix.clone();
            b[idx] -= H;
            out.record((total(&a, &bin) - total(&b, &bin)) / (2.0 * H), base.d_pixel_logits[idx]);
        }
        for i in 0..2 {
            let mut a = bin.clone();
            a[i] += H;
            let mut b = bin.clone();
            b[i] -= H;
            out.record((total(&pix, &a) - total(&pix, &b)) / (2.0 * H), base.d_binary_logits[i]);
        }
    }
    Ok(out)
}

/// Learnable masks and the input of the frequency decomposition.
pub fn decomposition(seed: u64) -> Result<GradCheck> {
    const H: f64 = 1e-6;
    let mut out = GradCheck::new("decomposition", 1e-4);
    let mut bank = FilterBank::<f64>::new(
        8,
        10,
        BandGeometry::AntiDiagonal,
        MaskInit::Uniform { scale: 0.8 },
        seed,
    )?;
    let x = random4((2, 3, 8, 10), seed + 1);
    let (stack, cache) = decompose_batch(&x, &bank)?;
    let w = random4(stack.dim(), seed + 2);
    let dx = decompose_backward(&mut bank, &cache, &w, true).expect("input gradient requested");
    let loss = |bank: &FilterBank<f64>, x: &Array4<f64>| {
        decompose_batch(x, bank).map_or(f64::NAN, |(y, _)| weighted_sum(&y, &w))
    };

    let name = "filter_bank.learnable";
    let grad = param(&bank, name, true);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
    for _ in 0..25 {
        let idx = rng.random_range(0..grad.len());
        let mut plus = bank.clone();
        nudge(&mut plus, name, idx, H);
        let mut minus = bank.clone();
        nudge(&mut minus, name, idx, -H);
        let numeric = (loss(&plus, &x) - loss(&minus, &x)) / (2.0 * H);
        out.record(numeric, grad.as_slice().expect("contiguous")[idx]);
    }
    for _ in 0..25 {
        let i = random_index(&mut rng, x.dim());
        let mut plus = x.clone();
        plus[i] += H;
        let mut minus = x.clone();
        minus[i] -= H;
        out.record((loss(&bank, &plus) - loss(&bank, &minus)) / (2.0 * H), dx[i]);
    }
    // Base masks are buffers: any gradient there is a bug.
    if param(&bank, "filter_bank.base", true).iter().any(|&g| g != 0.0) {
        out.max_rel_err = f64::INFINITY;
    }
    Ok(out)
}

fn check_block<M: Module<f64> + Clone>(
    out: &mut GradCheck,
    block: &mut M,
    x: &Array4<f64>,
    forward: impl Fn(&M, &Array4<f64>) -> Array4<f64>,
    backward: impl Fn(&mut M, &Array4<f64>, &Array4<f64>) -> Array4<f64>,
    seed: u64,
) {
    const H: f64 = 1e-6;
    let y = forward(block, x);
    let w = random4(y.dim(), seed);
    let dx = backward(block, x, &w);
    let loss = |m: &M, x: &Array4<f64>| weighted_sum(&forward(m, x), &w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for name in trainable_names(block) {
        let value = param(block, &name, false);
        let grad = param(block, &name, true);
        for _ in 0..4 {
            let idx = rng.random_range(0..value.len());
            let mut plus = block.clone();
            nudge(&mut plus, &name, idx, H);
            let mut minus = block.clone();
            nudge(&mut minus, &name, idx, -H);
            let numeric = (loss(&plus, x) - loss(&minus, x)) / (2.0 * H);
            out.record(numeric, grad.as_slice().expect("contiguous")[idx]);
        }
    }
    for _ in 0..20 {
        let i = random_index(&mut rng, x.dim());
        let mut plus = x.clone();
        plus[i] += H;
        let mut minus = x.clone();
        minus[i] -= H;
        out.record((loss(block, &plus) - loss(block, &minus)) / (2.0 * H), dx[i]);
    }
}

/// Spatial attention with kernel size `k` on a `2 x 4 x 8 x 8` input.
pub fn spatial_attention(k: usize, seed: u64) -> Result<GradCheck> {
    let mut out = GradCheck::new(format!("spatial_attention_k{k}"), 1e-4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut block = SpatialAttention::<f64>::new("sa", SpatialAttentionConfig::new(k)?, &mut rng);
    let x = random4((2, 4, 8, 8), seed + 1);
    check_block(
        &mut out,
        &mut block,
        &x,
        |b, x| b.forward(x).0,
        |b, x, dy| {
            let (_, cache) = b.forward(x);
            b.backward(&cache, dy)
        },
        seed + 2,
    );
    Ok(out)
}

/// Channel attention with reduction 4 on a `2 x 16 x 8 x 8` input.
pub fn channel_attention(seed: u64) -> Result<GradCheck> {
    let mut out = GradCheck::new("channel_attention", 1e-4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut block = ChannelAttention::<f64>::new("ca", ChannelAttentionConfig::new(16, 4)?, &mut rng);
    let x = random4((2, 16, 8, 8), seed + 1);
    check_block(
        &mut out,
        &mut block,
        &x,
        |b, x| b.forward(x).expect("valid input").0,
        |b, x, dy| {
            let (_, cache) = b.forward(x).expect("valid input");
            b.backward(&cache, dy)
        },
        seed + 2,
    );
    Ok(out)
}

/// Narrow tiny-backbone model used by the end-to-end check.
pub fn end_to_end_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneSpec::tiny_with_channels([8, 8, 16, 16]),
        reduction_ratio: 4,
        ..Default::default()
    }
}

/// Whole-model gradients computed in `f32`, checked against `f64` central
/// differences of the same weights and input, on `samples` random parameters.
pub fn end_to_end_single_precision(seed: u64, samples: usize) -> Result<GradCheck> {
    const H: f64 = 1e-5;
    let mut out = GradCheck::new("end_to_end_f32", 1e-3);
    let cfg = end_to_end_config();
    let mut model32 = LmfdModel::<f32>::new(cfg.clone(), seed)?;
    let mut model64 = LmfdModel::<f64>::new(cfg, seed)?;
    let mut values = Vec::new();
    model32.visit(&mut |p| values.push(p.value.mapv(f64::from)));
    let mut k = 0;
    model64.visit_mut(&mut |p| {
        p.value = values[k].clone();
        k += 1;
    });

    let x64 = random4((2, 3, 224, 224), seed + 1).mapv(|v| f64::from(v as f32));
    let x32 = x64.mapv(|v| v as f32);
    let labels = [1.0, 0.0];
    let weights = LossWeights::default();
    let (y, cache) = model32.forward(&x32, Mode::Train)?;
    let loss = batch_loss(&y.pixel_logits, &y.binary_logits, &labels, 0, &weights)?;
    model32.backward(&cache, &loss.d_pixel_logits, &loss.d_binary_logits);

    let total = |m: &LmfdModel<f64>| -> f64 {
        m.forward(&x64, Mode::Train)
            .and_then(|(y, _)| batch_loss(&y.pixel_logits, &y.binary_logits, &labels, 0, &weights))
            .map_or(f64::NAN, |l| l.total)
    };
    let names = trainable_names(&model32);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    for _ in 0..samples {
        let name = &names[rng.random_range(0..names.len())];
        let grad = param(&model32, name, true);
        let idx = rng.random_range(0..grad.len());
        let analytic = f64::from(grad.as_slice().expect("contiguous")[idx]);
        let mut plus = model64.clone();
        nudge(&mut plus, name, idx, H);
        let mut minus = model64.clone();
        nudge(&mut minus, name, idx, -H);
        out.record((total(&plus) - total(&minus)) / (2.0 * H), analytic);
    }
    Ok(out)
}

/// Every check with its default seed.
pub fn all() -> Result<Vec<GradCheck>> {
    Ok(vec![
        losses()?,
        decomposition(1)?,
        spatial_attention(7, 10)?,
        spatial_attention(5, 20)?,
        channel_attention(30)?,
        end_to_end_single_precision(5, 10)?,
    ])
}
