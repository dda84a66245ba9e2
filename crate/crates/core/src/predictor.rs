//! Hierarchical two-range prediction head with analytic gradients and Adam training.
//!
//! Short head: per-cell affine `C → 2` producing the pre-output maps `P`,
//! followed by a depthwise `k × k` smoothing kernel. Micro head: per-cell
//! affine over `crop(F) ‖ crop(P)`, nearest-neighbour ×4 upsampling and a
//! depthwise 3×3 refinement. Output channel 0 is risk (clamped to `[0, 1]`),
//! channel 1 is normalised elevation (×25 for meters).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bevproject::{BevFeatureGrid, ChannelManifest};
use crate::error::{Error, Result};
use crate::gridmap::{crop_geometry, micro_spec_for, GridMap, Layer, RangeId, ELEVATION, ELEVATION_LIMIT_M, RESOLUTION_RATIO, RISK};
use crate::losses::{evaluate, LossReport, LossTerms, LossWeights, RangeOutputs, RangeTarget, TargetPair};

/// Kernel size of the micro refinement stage.
pub const REFINE_KERNEL: usize = 3;
const OUTPUTS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictorMode {
    /// Short head feeding the micro head.
    Hierarchical,
    /// Short head only.
    ShortOnly,
    /// Micro head on the cropped feature grid, without short-range coupling.
    MicroOnly,
}

impl PredictorMode {
    pub fn code(self) -> u8 {
        match self {
            PredictorMode::Hierarchical => 0,
            PredictorMode::ShortOnly => 1,
            PredictorMode::MicroOnly => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(PredictorMode::Hierarchical),
            1 => Some(PredictorMode::ShortOnly),
            2 => Some(PredictorMode::MicroOnly),
            _ => None,
        }
    }

    fn has_short(self) -> bool {
        self != PredictorMode::MicroOnly
    }

    fn has_micro(self) -> bool {
        self != PredictorMode::ShortOnly
    }
}

/// Offsets of each parameter block inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub in_channels: usize,
    pub micro_inputs: usize,
    pub smooth_kernel: usize,
    pub short_w: usize,
    pub short_b: usize,
    pub short_k: usize,
    pub micro_w: usize,
    pub micro_b: usize,
    pub micro_k: usize,
    pub len: usize,
}

impl ParamLayout {
    pub fn new(mode: PredictorMode, in_channels: usize, smooth_kernel: usize) -> Self {
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let (s_w, s_b, s_k) = if mode.has_short() {
            (OUTPUTS * in_channels, OUTPUTS, OUTPUTS * smooth_kernel * smooth_kernel)
        } else {
            (0, 0, 0)
        };
        let micro_inputs = match mode {
            PredictorMode::Hierarchical => in_channels + OUTPUTS,
            PredictorMode::MicroOnly => in_channels,
            PredictorMode::ShortOnly => 0,
        };
        let (m_w, m_b, m_k) = if mode.has_micro() {
            (OUTPUTS * micro_inputs, OUTPUTS, OUTPUTS * REFINE_KERNEL * REFINE_KERNEL)
        } else {
            (0, 0, 0)
        };
        let short_w = take(s_w);
        let short_b = take(s_b);
        let short_k = take(s_k);
        let micro_w = take(m_w);
        let micro_b = take(m_b);
        let micro_k = take(m_k);
        ParamLayout {
            in_channels,
            micro_inputs,
            smooth_kernel,
            short_w,
            short_b,
            short_k,
            micro_w,
            micro_b,
            micro_k,
            len: take(0),
        }
    }
}

/// Trainable head parameters plus a fixed per-channel input scale.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    pub mode: PredictorMode,
    pub manifest: ChannelManifest,
    pub smooth_kernel: usize,
    /// Multiplies each input channel before the affine maps; not trained.
    pub input_scale: Vec<f64>,
    pub values: Vec<f64>,
}

impl PredictorParams {
    /// All-zero parameters (smoothing kernels included).
    pub fn zeros(mode: PredictorMode, manifest: ChannelManifest, smooth_kernel: usize) -> Result<Self> {
        if smooth_kernel % 2 == 0 {
            return Err(Error::InvalidConfig(format!("smoothing kernel must be odd, got {smooth_kernel}")));
        }
        let layout = ParamLayout::new(mode, manifest.total(), smooth_kernel);
        Ok(PredictorParams {
            mode,
            manifest,
            smooth_kernel,
            input_scale: vec![1.0; manifest.total()],
            values: vec![0.0; layout.len],
        })
    }

    /// Identity kernels, zero risk head, and elevation heads that pass the
    /// raw-elevation channel through. Starting point for training.
    pub fn elevation_passthrough(mode: PredictorMode, manifest: ChannelManifest, smooth_kernel: usize) -> Result<Self> {
        let mut p = Self::zeros(mode, manifest, smooth_kernel)?;
        let l = p.layout();
        let raw = manifest.raw_elevation_channel();
        let c = manifest.total();
        if mode.has_short() {
            p.values[l.short_w + c + raw] = 1.0;
            for o in 0..OUTPUTS {
                let r = smooth_kernel / 2;
                p.values[l.short_k + o * smooth_kernel * smooth_kernel + r * smooth_kernel + r] = 1.0;
            }
        }
        if mode.has_micro() {
            p.values[l.micro_w + l.micro_inputs + raw] = 1.0;
            for o in 0..OUTPUTS {
                p.values[l.micro_k + o * REFINE_KERNEL * REFINE_KERNEL + REFINE_KERNEL + 1] = 1.0;
            }
        }
        Ok(p)
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self.mode, self.manifest.total(), self.smooth_kernel)
    }

    /// Sets `input_scale` to the inverse RMS of each channel over `grids`.
    /// Raw elevation and validity stay unscaled.
    pub fn fit_input_scale<'a>(&mut self, grids: impl IntoIterator<Item = &'a BevFeatureGrid>) {
        let c = self.manifest.total();
        let mut sq = vec![0.0f64; c];
        let mut count = 0usize;
        for g in grids {
            let n = g.spec.cell_count();
            for (ch, acc) in sq.iter_mut().enumerate() {
                *acc += g.data[ch * n..(ch + 1) * n].iter().map(|&v| f64::from(v).powi(2)).sum::<f64>();
            }
            count += n;
        }
        if count == 0 {
            return;
        }
        for ch in 0..c {
            let rms = (sq[ch] / count as f64).sqrt();
            self.input_scale[ch] = if ch >= self.manifest.raw_elevation_channel() || rms < 1e-9 {
                1.0
            } else {
                1.0 / rms
            };
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.layout();
        if self.values.len() != l.len {
            return Err(Error::dims(l.len, self.values.len()));
        }
        if self.input_scale.len() != self.manifest.total() {
            return Err(Error::dims(self.manifest.total(), self.input_scale.len()));
        }
        if self.values.iter().chain(&self.input_scale).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("predictor parameters".into()));
        }
        Ok(())
    }

    fn check_features(&self, f: &BevFeatureGrid) -> Result<()> {
        if f.manifest != self.manifest {
            return Err(Error::ChannelMismatch(format!(
                "features have {} camera + {} pillar channels, parameters expect {} + {}",
                f.manifest.camera, f.manifest.pillar, self.manifest.camera, self.manifest.pillar
            )));
        }
        if f.spec.cells % 2 != 0 || f.data.len() != f.manifest.total() * f.spec.cell_count() {
            return Err(Error::dims(f.manifest.total() * f.spec.cell_count(), f.data.len()));
        }
        self.validate()
    }
}

/// Same-size 2D correlation with zero padding.
fn conv2d(input: &[f64], n: usize, kernel: &[f64], k: usize) -> Vec<f64> {
    let r = k / 2;
    let mut out = vec![0.0; n * n];
    for a in 0..k {
        for b in 0..k {
            let w = kernel[a * k + b];
            if w == 0.0 {
                continue;
            }
            let (i0, i1) = (r.saturating_sub(a), (n + r).saturating_sub(a).min(n));
            let (j0, j1) = (r.saturating_sub(b), (n + r).saturating_sub(b).min(n));
            for i in i0..i1 {
                let src = (i + a - r) * n;
                let row = &mut out[i * n + j0..i * n + j1];
                let inp = &input[src + j0 + b - r..src + j1 + b - r];
                for (o, &x) in row.iter_mut().zip(inp) {
                    *o += w * x;
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d`] w.r.t. its input and kernel.
fn conv2d_backward(input: &[f64], n: usize, kernel: &[f64], k: usize, dout: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let r = k / 2;
    let mut din = vec![0.0; n * n];
    let mut dk = vec![0.0; k * k];
    for a in 0..k {
        for b in 0..k {
            let w = kernel[a * k + b];
            let (i0, i1) = (r.saturating_sub(a), (n + r).saturating_sub(a).min(n));
            let (j0, j1) = (r.saturating_sub(b), (n + r).saturating_sub(b).min(n));
            let mut acc = 0.0;
            for i in i0..i1 {
                let src = (i + a - r) * n;
                let g = &dout[i * n + j0..i * n + j1];
                let inp = &input[src + j0 + b - r..src + j1 + b - r];
                for (&gv, &x) in g.iter().zip(inp) {
                    acc += gv * x;
                }
                if w != 0.0 {
                    let d = &mut din[src + j0 + b - r..src + j1 + b - r];
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv += w * gv;
                    }
                }
            }
            dk[a * k + b] = acc;
        }
    }
    (din, dk)
}

fn upsample4(q: &[f64], s: usize) -> Vec<f64> {
    let m = s * RESOLUTION_RATIO;
    let mut u = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            u[i * m + j] = q[(i / RESOLUTION_RATIO) * s + j / RESOLUTION_RATIO];
        }
    }
    u
}

fn upsample4_backward(du: &[f64], s: usize) -> Vec<f64> {
    let m = s * RESOLUTION_RATIO;
    let mut dq = vec![0.0; s * s];
    for i in 0..m {
        for j in 0..m {
            dq[(i / RESOLUTION_RATIO) * s + j / RESOLUTION_RATIO] += du[i * m + j];
        }
    }
    dq
}

fn clamp01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

fn clamp_grad(x: f64) -> f64 {
    if (0.0..=1.0).contains(&x) {
        1.0
    } else {
        0.0
    }
}

/// Intermediate tensors of one forward pass (channel-major, f64).
struct Forward {
    n: usize,
    crop_off: usize,
    crop: usize,
    /// Scaled input channels.
    x: Vec<f64>,
    /// Short pre-output maps and smoothed outputs.
    p: Vec<f64>,
    s: Vec<f64>,
    /// Micro head inputs (cropped), upsampled maps and refined outputs.
    xm: Vec<f64>,
    u: Vec<f64>,
    m: Vec<f64>,
}

impl Forward {
    fn run(features: &BevFeatureGrid, params: &PredictorParams) -> Result<Self> {
        params.check_features(features)?;
        let l = params.layout();
        let c = l.in_channels;
        let n = features.spec.cells;
        let nn = n * n;
        let (crop_off, crop) = crop_geometry(n);
        let v = &params.values;
        let x: Vec<f64> = features
            .data
            .iter()
            .enumerate()
            .map(|(i, &f)| f64::from(f) * params.input_scale[i / nn])
            .collect();

        let mut p = Vec::new();
        let mut s = Vec::new();
        if params.mode.has_short() {
            p = vec![0.0; OUTPUTS * nn];
            for o in 0..OUTPUTS {
                let out = &mut p[o * nn..(o + 1) * nn];
                out.iter_mut().for_each(|e| *e = v[l.short_b + o]);
                for f in 0..c {
                    let w = v[l.short_w + o * c + f];
                    if w != 0.0 {
                        for (e, &xi) in out.iter_mut().zip(&x[f * nn..(f + 1) * nn]) {
                            *e += w * xi;
                        }
                    }
                }
            }
            let kk = l.smooth_kernel * l.smooth_kernel;
            for o in 0..OUTPUTS {
                s.extend(conv2d(&p[o * nn..(o + 1) * nn], n, &v[l.short_k + o * kk..l.short_k + (o + 1) * kk], l.smooth_kernel));
            }
        }

        let mut xm = Vec::new();
        let mut u = Vec::new();
        let mut m = Vec::new();
        if params.mode.has_micro() {
            let ss = crop * crop;
            xm = Vec::with_capacity(l.micro_inputs * ss);
            for f in 0..c {
                xm.extend(crate::gridmap::crop_window(&x[f * nn..(f + 1) * nn], n, crop_off, crop));
            }
            if params.mode == PredictorMode::Hierarchical {
                for o in 0..OUTPUTS {
                    xm.extend(crate::gridmap::crop_window(&p[o * nn..(o + 1) * nn], n, crop_off, crop));
                }
            }
            let mi = l.micro_inputs;
            let mcells = crop * RESOLUTION_RATIO;
            let kk = REFINE_KERNEL * REFINE_KERNEL;
            for o in 0..OUTPUTS {
                let mut q = vec![v[l.micro_b + o]; ss];
                for f in 0..mi {
                    let w = v[l.micro_w + o * mi + f];
                    if w != 0.0 {
                        for (e, &xi) in q.iter_mut().zip(&xm[f * ss..(f + 1) * ss]) {
                            *e += w * xi;
                        }
                    }
                }
                let up = upsample4(&q, crop);
                m.extend(conv2d(&up, mcells, &v[l.micro_k + o * kk..l.micro_k + (o + 1) * kk], REFINE_KERNEL));
                u.extend(up);
            }
        }
        Ok(Forward {
            n,
            crop_off,
            crop,
            x,
            p,
            s,
            xm,
            u,
            m,
        })
    }

    fn short_outputs(&self) -> Option<RangeOutputs> {
        if self.s.is_empty() {
            return None;
        }
        let nn = self.n * self.n;
        Some(RangeOutputs {
            risk: self.s[..nn].iter().map(|&v| clamp01(v)).collect(),
            elevation: self.s[nn..].to_vec(),
        })
    }

    fn micro_outputs(&self) -> Option<RangeOutputs> {
        if self.m.is_empty() {
            return None;
        }
        let mm = self.m.len() / OUTPUTS;
        Some(RangeOutputs {
            risk: self.m[..mm].iter().map(|&v| clamp01(v)).collect(),
            elevation: self.m[mm..].to_vec(),
        })
    }

    /// Reverse pass from output-layer gradients to parameter gradients.
    fn backward(&self, params: &PredictorParams, g_short: Option<&RangeOutputs>, g_micro: Option<&RangeOutputs>) -> Vec<f64> {
        let l = params.layout();
        let v = &params.values;
        let c = l.in_channels;
        let n = self.n;
        let nn = n * n;
        let mut grad = vec![0.0; l.len];
        let mut dp = vec![0.0; if params.mode.has_short() { OUTPUTS * nn } else { 0 }];

        if let (true, Some(gm)) = (params.mode.has_micro(), g_micro) {
            let crop = self.crop;
            let ss = crop * crop;
            let mcells = crop * RESOLUTION_RATIO;
            let mm = mcells * mcells;
            let mi = l.micro_inputs;
            let kk = REFINE_KERNEL * REFINE_KERNEL;
            for o in 0..OUTPUTS {
                let dm: Vec<f64> = if o == 0 {
                    gm.risk.iter().zip(&self.m[..mm]).map(|(&g, &x)| g * clamp_grad(x)).collect()
                } else {
                    gm.elevation.clone()
                };
                let kernel = &v[l.micro_k + o * kk..l.micro_k + (o + 1) * kk];
                let (du, dk) = conv2d_backward(&self.u[o * mm..(o + 1) * mm], mcells, kernel, REFINE_KERNEL, &dm);
                grad[l.micro_k + o * kk..l.micro_k + (o + 1) * kk].copy_from_slice(&dk);
                let dq = upsample4_backward(&du, crop);
                grad[l.micro_b + o] = dq.iter().sum();
                for f in 0..mi {
                    let xf = &self.xm[f * ss..(f + 1) * ss];
                    grad[l.micro_w + o * mi + f] = dq.iter().zip(xf).map(|(a, b)| a * b).sum();
                }
                if params.mode == PredictorMode::Hierarchical {
                    for po in 0..OUTPUTS {
                        let w = v[l.micro_w + o * mi + c + po];
                        if w == 0.0 {
                            continue;
                        }
                        for bi in 0..crop {
                            let row = (bi + self.crop_off) * n + self.crop_off;
                            for bj in 0..crop {
                                dp[po * nn + row + bj] += w * dq[bi * crop + bj];
                            }
                        }
                    }
                }
            }
        }

        if params.mode.has_short() {
            let k = l.smooth_kernel;
            let kk = k * k;
            if let Some(gs) = g_short {
                for o in 0..OUTPUTS {
                    let ds: Vec<f64> = if o == 0 {
                        gs.risk.iter().zip(&self.s[..nn]).map(|(&g, &x)| g * clamp_grad(x)).collect()
                    } else {
                        gs.elevation.clone()
                    };
                    let kernel = &v[l.short_k + o * kk..l.short_k + (o + 1) * kk];
                    let (dpo, dk) = conv2d_backward(&self.p[o * nn..(o + 1) * nn], n, kernel, k, &ds);
                    grad[l.short_k + o * kk..l.short_k + (o + 1) * kk].copy_from_slice(&dk);
                    for (a, b) in dp[o * nn..(o + 1) * nn].iter_mut().zip(&dpo) {
                        *a += b;
                    }
                }
            }
            for o in 0..OUTPUTS {
                let d = &dp[o * nn..(o + 1) * nn];
                grad[l.short_b + o] = d.iter().sum();
                for f in 0..c {
                    grad[l.short_w + o * c + f] = d.iter().zip(&self.x[f * nn..(f + 1) * nn]).map(|(a, b)| a * b).sum();
                }
            }
        }
        grad
    }
}

fn to_map(outputs: &RangeOutputs, spec: crate::gridmap::RangeSpec, features: &BevFeatureGrid) -> Result<GridMap> {
    let n = spec.cells;
    let risk = Layer::from_parts(n, outputs.risk.iter().map(|&v| v as f32).collect(), vec![true; n * n])?;
    let ele = Layer::from_parts(
        n,
        outputs.elevation.iter().map(|&v| (v * ELEVATION_LIMIT_M) as f32).collect(),
        vec![true; n * n],
    )?;
    GridMap::new(spec, features.origin, features.timestamp)
        .with_layer(RISK, risk)?
        .with_layer(ELEVATION, ele)
}

/// Predicted micro and short maps for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionPair {
    pub micro: GridMap,
    pub short: GridMap,
}

/// Runs both heads of a hierarchical predictor.
pub fn predict(features: &BevFeatureGrid, params: &PredictorParams) -> Result<PredictionPair> {
    if params.mode != PredictorMode::Hierarchical {
        return Err(Error::InvalidConfig(format!("predict needs a hierarchical predictor, got {:?}", params.mode)));
    }
    let fwd = Forward::run(features, params)?;
    Ok(PredictionPair {
        micro: to_map(&fwd.micro_outputs().expect("micro head"), micro_spec_for(&features.spec), features)?,
        short: to_map(&fwd.short_outputs().expect("short head"), features.spec, features)?,
    })
}

/// Map of a single range. Hierarchical parameters serve either range;
/// single-range parameters only their own.
pub fn predict_single_range(features: &BevFeatureGrid, params: &PredictorParams, range: RangeId) -> Result<GridMap> {
    let supported = match (params.mode, range) {
        (PredictorMode::Hierarchical, _) => true,
        (PredictorMode::ShortOnly, RangeId::Short) => true,
        (PredictorMode::MicroOnly, RangeId::Micro) => true,
        _ => false,
    };
    if !supported {
        return Err(Error::InvalidConfig(format!("{:?} parameters cannot produce the {range} range", params.mode)));
    }
    if range == RangeId::Short && params.mode == PredictorMode::Hierarchical {
        // The short path does not depend on the micro head.
        let mut short_only = params.clone();
        short_only.mode = PredictorMode::ShortOnly;
        let l = params.layout();
        short_only.values = params.values[..l.micro_w].to_vec();
        return predict_single_range(features, &short_only, range);
    }
    let fwd = Forward::run(features, params)?;
    match range {
        RangeId::Short => to_map(&fwd.short_outputs().expect("short head"), features.spec, features),
        RangeId::Micro => to_map(&fwd.micro_outputs().expect("micro head"), micro_spec_for(&features.spec), features),
    }
}

/// Loss report plus gradients w.r.t. the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub loss: LossReport,
    pub params: Vec<f64>,
}

/// Forward pass, losses and reverse-mode parameter gradients for one sample.
pub fn parameter_gradients(features: &BevFeatureGrid, params: &PredictorParams, gt: &TargetPair, weights: &LossWeights) -> Result<GradientReport> {
    let fwd = Forward::run(features, params)?;
    let short = fwd.short_outputs();
    let micro = fwd.micro_outputs();
    let check = |t: &RangeTarget, o: &Option<RangeOutputs>| match o {
        Some(o) if o.risk.len() != t.risk.len() => Err(Error::dims(o.risk.len(), t.risk.len())),
        _ => Ok(()),
    };
    check(&gt.short, &short)?;
    check(&gt.micro, &micro)?;
    let loss = evaluate(micro.as_ref().map(|m| (m, &gt.micro)), short.as_ref().map(|s| (s, &gt.short)), weights)?;
    let grads = fwd.backward(params, loss.grad_short.as_ref(), loss.grad_micro.as_ref());
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("parameter gradients".into()));
    }
    Ok(GradientReport { loss, params: grads })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub final_lr: f64,
    /// Fraction of steps spent warming up.
    pub warmup_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            batch_size: 4,
            peak_lr: 5e-4,
            final_lr: 5e-6,
            warmup_fraction: 0.3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if !(self.peak_lr >= 0.0 && self.final_lr >= 0.0 && (0.0..=1.0).contains(&self.warmup_fraction)) {
            return Err(Error::InvalidConfig("learning rates must be >= 0 and warmup fraction in [0, 1]".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return Err(Error::InvalidConfig("Adam betas must be in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }
}

/// One-cycle schedule: linear warmup from `peak/25` to `peak`, then cosine decay to `final_lr`.
pub fn one_cycle_lr(step: usize, total: usize, cfg: &TrainConfig) -> f64 {
    let warm = ((total as f64) * cfg.warmup_fraction).round() as usize;
    let start = cfg.peak_lr / 25.0;
    if step < warm {
        return start + (cfg.peak_lr - start) * step as f64 / warm as f64;
    }
    let span = total.saturating_sub(warm).max(1) as f64;
    let t = ((step - warm) as f64 / span).min(1.0);
    cfg.final_lr + 0.5 * (cfg.peak_lr - cfg.final_lr) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Parameters plus Adam moments at a given step. All values are kept at
/// f32 precision so a checkpoint round trip resumes bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: PredictorParams,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: usize,
}

impl TrainState {
    pub fn new(mut params: PredictorParams) -> Self {
        round_f32(&mut params.values);
        round_f32(&mut params.input_scale);
        let n = params.values.len();
        TrainState {
            params,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

fn round_f32(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = f64::from(*x as f32));
}

/// Per-step averaged loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub terms: LossTerms,
    pub total: f64,
}

/// A training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub features: BevFeatureGrid,
    pub targets: TargetPair,
}

/// Batch indices for `step`, a pure function of `(seed, step)`.
pub fn batch_indices(seed: u64, step: usize, samples: usize, batch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut idx = sample(&mut rng, samples, batch.min(samples)).into_vec();
    idx.sort_unstable();
    idx
}

/// Runs Adam from `state` until `state.step == stop` (at most `cfg.steps`),
/// returning the loss curve of the steps taken.
pub fn train_from(samples: &[TrainSample], state: &mut TrainState, cfg: &TrainConfig, stop: usize) -> Result<Vec<LossRow>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    let stop = stop.min(cfg.steps);
    let mut curve = Vec::with_capacity(stop.saturating_sub(state.step));
    while state.step < stop {
        let step = state.step;
        let idx = batch_indices(cfg.seed, step, samples.len(), cfg.batch_size);
        let reports: Vec<Result<GradientReport>> = idx
            .par_iter()
            .map(|&i| parameter_gradients(&samples[i].features, &state.params, &samples[i].targets, &cfg.weights))
            .collect();
        let mut grad = vec![0.0; state.params.values.len()];
        let mut row = LossRow {
            step,
            terms: LossTerms::default(),
            total: 0.0,
        };
        let inv = 1.0 / idx.len() as f64;
        for r in reports {
            let r = r.map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { step },
                other => other,
            })?;
            for (g, d) in grad.iter_mut().zip(&r.params) {
                *g += d * inv;
            }
            let t = r.loss.terms;
            row.terms.micro.trav += t.micro.trav * inv;
            row.terms.micro.ele += t.micro.ele * inv;
            row.terms.short.trav += t.short.trav * inv;
            row.terms.short.ele += t.short.ele * inv;
            row.terms.cons += t.cons * inv;
            row.total += r.loss.total * inv;
        }
        if !row.total.is_finite() {
            return Err(Error::Diverged { step });
        }
        let lr = one_cycle_lr(step, cfg.steps, cfg);
        let t = (step + 1) as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for k in 0..grad.len() {
            let g = grad[k];
            state.m[k] = f64::from((cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g) as f32);
            state.v[k] = f64::from((cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * g * g) as f32);
            let update = lr * (state.m[k] / bc1) / ((state.v[k] / bc2).sqrt() + cfg.eps);
            state.params.values[k] = f64::from((state.params.values[k] - update) as f32);
        }
        if state.params.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step });
        }
        curve.push(row);
        state.step += 1;
    }
    Ok(curve)
}

/// Loss terms and total averaged over every sample (no gradients kept).
pub fn dataset_loss(samples: &[TrainSample], params: &PredictorParams, weights: &LossWeights) -> Result<LossRow> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("loss evaluation set"));
    }
    let reports: Vec<Result<GradientReport>> = samples
        .par_iter()
        .map(|s| parameter_gradients(&s.features, params, &s.targets, weights))
        .collect();
    let inv = 1.0 / samples.len() as f64;
    let mut row = LossRow {
        step: 0,
        terms: LossTerms::default(),
        total: 0.0,
    };
    for r in reports {
        let r = r?;
        let t = r.loss.terms;
        row.terms.micro.trav += t.micro.trav * inv;
        row.terms.micro.ele += t.micro.ele * inv;
        row.terms.short.trav += t.short.trav * inv;
        row.terms.short.ele += t.short.ele * inv;
        row.terms.cons += t.cons * inv;
        row.total += r.loss.total * inv;
    }
    Ok(row)
}

/// Trains fresh from `params0`.
pub fn train(samples: &[TrainSample], params0: PredictorParams, cfg: &TrainConfig) -> Result<(PredictorParams, Vec<LossRow>)> {
    let mut state = TrainState::new(params0);
    let curve = train_from(samples, &mut state, cfg, cfg.steps)?;
    Ok((state.params, curve))
}
