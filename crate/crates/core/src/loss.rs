//! The four loss components and their weighted total, with analytic
//! gradients with respect to per-pixel log-depth, per-source twist
//! increments, and per-pixel explainability-mask logits.
//!
//! Per-pixel terms are evaluated in parallel and collected in index order;
//! every sum over pixels then goes through [`pairwise_sum`], so values and
//! gradients are bit-identical for any number of worker threads.

use rayon::prelude::*;

use crate::geometry::{compute_warp, CameraPose, DepthField, Intrinsics, WarpField, DEFAULT_Z_MIN};
use crate::imgcore::{bilinear_sample_channel, to_grayscale, BilinearCell, ImageBuffer};
use crate::reduce::{pairwise_sum, pairwise_sum_vec};
use crate::sift::{compute_dense_grid, detect_keypoints, DescriptorGrid, KeypointSet, DESCRIPTOR_LEN};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 1.0,
            gamma: 0.5,
            delta: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma), ("delta", self.delta)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }

    /// `alpha*key + beta*photo + gamma*smooth + delta*expl`, summed left to right.
    pub fn combine(&self, key: f64, photo: f64, smooth: f64, expl: f64) -> f64 {
        self.alpha * key + self.beta * photo + self.gamma * smooth + self.delta * expl
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + exp(-z)) = -ln(sigmoid(z))` without overflow.
#[inline]
fn neg_log_sigmoid(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// Per-pixel weights `sigmoid(logit)` in `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplainabilityMask {
    pub width: usize,
    pub height: usize,
    pub logits: Vec<f64>,
}

impl ExplainabilityMask {
    pub fn constant(width: usize, height: usize, logit: f64) -> Self {
        Self {
            width,
            height,
            logits: vec![logit; width * height],
        }
    }

    #[inline]
    pub fn weight(&self, index: usize) -> f64 {
        sigmoid(self.logits[index])
    }

    pub fn weights(&self) -> Vec<f64> {
        self.logits.iter().map(|&z| sigmoid(z)).collect()
    }
}

/// Mean over valid terms (default) or the raw sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    fn divisor(self, count: usize) -> f64 {
        match self {
            Reduction::Mean => count as f64,
            Reduction::Sum => 1.0,
        }
    }
}

/// Gradient of one component.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentGradient {
    pub logdepth: Vec<f64>,
    pub twist: [f64; 6],
    pub mask_logits: Vec<f64>,
}

impl ComponentGradient {
    pub fn zeros(n: usize) -> Self {
        Self {
            logdepth: vec![0.0; n],
            twist: [0.0; 6],
            mask_logits: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    pub grad: ComponentGradient,
    /// Number of pixels or anchors that contributed.
    pub support: usize,
}

impl LossTerm {
    fn empty(n: usize) -> Self {
        Self {
            value: 0.0,
            grad: ComponentGradient::zeros(n),
            support: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.support == 0
    }
}

#[inline]
fn l1_sign(r: f64) -> f64 {
    if r > 0.0 {
        1.0
    } else if r < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-pixel residual data shared by the two warp-based losses.
struct PixelResidual {
    residual: f64,
    d_du: f64,
    d_dv: f64,
}

/// Assembles value and gradients from per-pixel residuals that depend on
/// the pixel's warped coordinates.
fn assemble_warped(
    residuals: Vec<Option<PixelResidual>>,
    warp: &WarpField,
    mask: Option<&ExplainabilityMask>,
    reduction: Reduction,
) -> LossTerm {
    let n = residuals.len();
    let support = residuals.iter().filter(|r| r.is_some()).count();
    if support == 0 {
        return LossTerm::empty(n);
    }
    let scale = 1.0 / reduction.divisor(support);

    let terms: Vec<(f64, f64, [f64; 6], f64)> = residuals
        .par_iter()
        .enumerate()
        .map(|(p, r)| match r {
            None => (0.0, 0.0, [0.0; 6], 0.0),
            Some(r) => {
                let w = mask.map_or(1.0, |m| m.weight(p));
                let gu = w * r.d_du * scale;
                let gv = w * r.d_dv * scale;
                let [ju, jv] = warp.j_twist[p];
                let g_twist = std::array::from_fn(|k| gu * ju[k] + gv * jv[k]);
                let g_depth = gu * warp.j_depth[p][0] + gv * warp.j_depth[p][1];
                let g_mask = if mask.is_some() { w * (1.0 - w) * r.residual * scale } else { 0.0 };
                (w * r.residual, g_depth, g_twist, g_mask)
            }
        })
        .collect();

    let values: Vec<f64> = terms.iter().map(|t| t.0).collect();
    let twists: Vec<[f64; 6]> = terms.iter().map(|t| t.2).collect();
    LossTerm {
        value: pairwise_sum(&values) * scale,
        grad: ComponentGradient {
            logdepth: terms.iter().map(|t| t.1).collect(),
            twist: pairwise_sum_vec(&twists),
            mask_logits: terms.iter().map(|t| t.3).collect(),
        },
        support,
    }
}

fn check_same_dims(what: &str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::Config(format!(
            "{what}: dimensions {}x{} and {}x{} differ",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

/// Mean (or sum) over valid pixels of `w * |sample(source, u*, v*) - target|`,
/// with the per-pixel residual averaged over channels.
pub fn photometric_loss(
    target: &ImageBuffer,
    source: &ImageBuffer,
    warp: &WarpField,
    mask: Option<&ExplainabilityMask>,
    reduction: Reduction,
) -> Result<LossTerm> {
    check_same_dims("photometric target/warp", (target.width(), target.height()), (warp.width, warp.height))?;
    if target.channels() != source.channels() {
        return Err(Error::Config("photometric target and source channel counts differ".into()));
    }
    if let Some(m) = mask {
        check_same_dims("photometric mask", (m.width, m.height), (warp.width, warp.height))?;
    }
    let channels = target.channels();
    let inv_c = 1.0 / channels as f64;
    let w = target.width();
    let residuals: Vec<Option<PixelResidual>> = (0..warp.coords.len())
        .into_par_iter()
        .map(|p| {
            if !warp.valid[p] {
                return None;
            }
            let [u, v] = warp.coords[p];
            let (mut residual, mut d_du, mut d_dv) = (0.0, 0.0, 0.0);
            for c in 0..channels {
                let s = bilinear_sample_channel(source, c, u, v);
                if !s.in_bounds {
                    return None;
                }
                let diff = s.value - target.get(p / w, p % w, c);
                let sign = l1_sign(diff);
                residual += diff.abs() * inv_c;
                d_du += sign * s.d_du * inv_c;
                d_dv += sign * s.d_dv * inv_c;
            }
            Some(PixelResidual { residual, d_du, d_dv })
        })
        .collect();
    Ok(assemble_warped(residuals, warp, mask, reduction))
}

/// L1 distance over the 128 descriptor entries between the target grid at
/// each anchor pixel and the source grid sampled at the anchor's warped
/// position. Anchors are all pixels, or only the keypoint pixels when
/// `keypoints` is given. Descriptors are constants; gradients flow through
/// the sampling coordinates only.
pub fn keypoint_similarity_loss(
    grid_t: &DescriptorGrid,
    grid_s: &DescriptorGrid,
    warp: &WarpField,
    keypoints: Option<&KeypointSet>,
    mask: Option<&ExplainabilityMask>,
    reduction: Reduction,
) -> Result<LossTerm> {
    let dims = (grid_t.width(), grid_t.height());
    check_same_dims("keypoint target grid/warp", dims, (warp.width, warp.height))?;
    if let Some(m) = mask {
        check_same_dims("keypoint mask", (m.width, m.height), dims)?;
    }
    let n = dims.0 * dims.1;
    let mut is_anchor = vec![keypoints.is_none(); n];
    if let Some(kps) = keypoints {
        for idx in kps.pixel_indices(dims.0, dims.1) {
            is_anchor[idx] = true;
        }
    }
    let (sw, sh) = (grid_s.width(), grid_s.height());
    let source = grid_s.data();
    let residuals: Vec<Option<PixelResidual>> = (0..n)
        .into_par_iter()
        .map(|p| {
            if !is_anchor[p] || !warp.valid[p] {
                return None;
            }
            let [u, v] = warp.coords[p];
            let cell = BilinearCell::locate(sw, sh, u, v)?;
            let anchor = grid_t.at(p / dims.0, p % dims.0);
            let (mut residual, mut d_du, mut d_dv) = (0.0, 0.0, 0.0);
            for (l, t) in anchor.iter().enumerate() {
                let (s, du, dv) = cell.interpolate(source, sw, DESCRIPTOR_LEN, l);
                let diff = s - t;
                let sign = l1_sign(diff);
                residual += diff.abs();
                d_du += sign * du;
                d_dv += sign * dv;
            }
            Some(PixelResidual { residual, d_du, d_dv })
        })
        .collect();
    Ok(assemble_warped(residuals, warp, mask, reduction))
}

/// Edge-aware smoothness of mean-normalized inverse depth:
/// mean over pixels of `|dx dn| exp(-|dx I|) + |dy dn| exp(-|dy I|)` with
/// forward differences and `dn = (1/d) / mean(1/d)`.
pub fn smooth_loss(depth: &DepthField, target: &ImageBuffer) -> Result<LossTerm> {
    let (w, h) = (depth.width(), depth.height());
    check_same_dims("smoothness depth/image", (w, h), (target.width(), target.height()))?;
    let n = w * h;
    let gray = to_grayscale(target);
    let intensity = gray.data();
    let inv: Vec<f64> = depth.log_depth().iter().map(|l| (-l).exp()).collect();
    let mean_inv = pairwise_sum(&inv) / n as f64;
    let norm: Vec<f64> = inv.iter().map(|q| q / mean_inv).collect();

    // per pixel: (loss contribution, d loss / d norm[p] from terms it starts)
    // the terms ending at p are added from the neighbour's side below
    let mut values = vec![0.0; n];
    let mut d_norm = vec![0.0; n];
    let inv_n = 1.0 / n as f64;
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let mut value = 0.0;
            if j + 1 < w {
                let q = p + 1;
                let edge = (-(intensity[q] - intensity[p]).abs()).exp();
                let diff = norm[q] - norm[p];
                value += diff.abs() * edge;
                let g = l1_sign(diff) * edge * inv_n;
                d_norm[q] += g;
                d_norm[p] -= g;
            }
            if i + 1 < h {
                let q = p + w;
                let edge = (-(intensity[q] - intensity[p]).abs()).exp();
                let diff = norm[q] - norm[p];
                value += diff.abs() * edge;
                let g = l1_sign(diff) * edge * inv_n;
                d_norm[q] += g;
                d_norm[p] -= g;
            }
            values[p] = value;
        }
    }
    // d norm[p] / d log_depth[k] = -delta_pk norm[p] + norm[p] norm[k] / n
    let weighted: Vec<f64> = d_norm.iter().zip(&norm).map(|(g, q)| g * q).collect();
    let coupling = pairwise_sum(&weighted) * inv_n;
    let logdepth = norm.iter().zip(&d_norm).map(|(q, g)| -g * q + q * coupling).collect();
    Ok(LossTerm {
        value: pairwise_sum(&values) * inv_n,
        grad: ComponentGradient {
            logdepth,
            twist: [0.0; 6],
            mask_logits: vec![0.0; n],
        },
        support: n,
    })
}

/// Mean over pixels of `-ln(w)`, cross-entropy against an all-ones mask.
pub fn explainability_loss(mask: &ExplainabilityMask) -> LossTerm {
    let n = mask.logits.len();
    let inv_n = 1.0 / n as f64;
    let values: Vec<f64> = mask.logits.iter().map(|&z| neg_log_sigmoid(z)).collect();
    LossTerm {
        value: pairwise_sum(&values) * inv_n,
        grad: ComponentGradient {
            logdepth: vec![0.0; n],
            twist: [0.0; 6],
            mask_logits: mask.logits.iter().map(|&z| (sigmoid(z) - 1.0) * inv_n).collect(),
        },
        support: n,
    }
}

/// Which ablation axes are switched on.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossModes {
    /// Restrict the keypoint loss to detected keypoints.
    pub detector: bool,
    /// Use the mask in the data terms and add the explainability loss.
    pub explainability: bool,
    /// Whether the mask also weights the keypoint residuals.
    pub mask_gates_keypoints: bool,
    pub reduction: Reduction,
}

impl Default for LossModes {
    fn default() -> Self {
        Self {
            detector: true,
            explainability: true,
            mask_gates_keypoints: true,
            reduction: Reduction::Mean,
        }
    }
}

/// Detector settings used when preparing observations.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DetectorConfig {
    pub max_count: usize,
    pub contrast_threshold: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            max_count: crate::sift::DEFAULT_MAX_KEYPOINTS,
            contrast_threshold: crate::sift::DEFAULT_CONTRAST_THRESHOLD,
        }
    }
}

/// Everything the objective needs that does not change during
/// optimization: images, precomputed descriptor grids, target keypoints.
#[derive(Debug, Clone)]
pub struct Observations {
    pub target: ImageBuffer,
    pub sources: Vec<ImageBuffer>,
    pub intrinsics: Intrinsics,
    pub grid_target: DescriptorGrid,
    pub grid_sources: Vec<DescriptorGrid>,
    pub keypoints: KeypointSet,
    pub patch_size: f64,
    pub z_min: f64,
}

impl Observations {
    pub fn new(
        target: ImageBuffer,
        sources: Vec<ImageBuffer>,
        intrinsics: Intrinsics,
        patch_size: f64,
        detector: DetectorConfig,
    ) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::Config("at least one source view is required".into()));
        }
        intrinsics.validate()?;
        let grid_target = compute_dense_grid(&target, patch_size)?;
        let grid_sources = sources
            .iter()
            .map(|s| compute_dense_grid(s, patch_size))
            .collect::<Result<Vec<_>>>()?;
        let keypoints = detect_keypoints(&target, detector.max_count, detector.contrast_threshold)?;
        let obs = Self {
            target,
            sources,
            intrinsics,
            grid_target,
            grid_sources,
            keypoints,
            patch_size,
            z_min: DEFAULT_Z_MIN,
        };
        obs.validate()?;
        Ok(obs)
    }

    pub fn width(&self) -> usize {
        self.target.width()
    }

    pub fn height(&self) -> usize {
        self.target.height()
    }

    pub fn pixel_count(&self) -> usize {
        self.width() * self.height()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = (self.width(), self.height());
        check_same_dims("target grid", dims, (self.grid_target.width(), self.grid_target.height()))?;
        if self.sources.len() != self.grid_sources.len() {
            return Err(Error::Config("one descriptor grid per source is required".into()));
        }
        for (s, g) in self.sources.iter().zip(&self.grid_sources) {
            check_same_dims("source image", dims, (s.width(), s.height()))?;
            check_same_dims("source grid", dims, (g.width(), g.height()))?;
            if s.channels() != self.target.channels() {
                return Err(Error::Config("source and target channel counts differ".into()));
            }
        }
        Ok(())
    }
}

/// The optimization variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Variables {
    pub depth: DepthField,
    pub poses: Vec<CameraPose>,
    pub mask: ExplainabilityMask,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct SourceLoss {
    pub l_key: f64,
    pub l_photo: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct LossBreakdown {
    pub l_key: f64,
    pub l_photo: f64,
    pub l_smooth: f64,
    pub l_expl: f64,
    pub total: f64,
    pub per_source: Vec<SourceLoss>,
    /// Conditions worth surfacing, e.g. a source with no valid pixels.
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub g_logdepth: Vec<f64>,
    pub g_twist: Vec<[f64; 6]>,
    pub g_mask_logits: Vec<f64>,
}

impl GradientSet {
    pub fn zeros(pixels: usize, sources: usize) -> Self {
        Self {
            g_logdepth: vec![0.0; pixels],
            g_twist: vec![[0.0; 6]; sources],
            g_mask_logits: vec![0.0; pixels],
        }
    }

    /// `[log-depth..., twists..., mask logits...]`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.g_logdepth.clone();
        out.extend(self.g_twist.iter().flatten());
        out.extend(&self.g_mask_logits);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|g| g.is_finite())
    }

    fn accumulate(&mut self, weight: f64, source: Option<usize>, grad: &ComponentGradient) {
        for (g, c) in self.g_logdepth.iter_mut().zip(&grad.logdepth) {
            *g += weight * c;
        }
        for (g, c) in self.g_mask_logits.iter_mut().zip(&grad.mask_logits) {
            *g += weight * c;
        }
        if let Some(s) = source {
            for (g, c) in self.g_twist[s].iter_mut().zip(&grad.twist) {
                *g += weight * c;
            }
        }
    }
}

/// Evaluates every component for the current variables. `L_key` and
/// `L_photo` are sums over sources of the per-source terms.
pub fn total_loss(
    obs: &Observations,
    vars: &Variables,
    weights: &LossWeights,
    modes: &LossModes,
) -> Result<(LossBreakdown, GradientSet)> {
    weights.validate()?;
    obs.validate()?;
    let dims = (obs.width(), obs.height());
    check_same_dims("depth field", dims, (vars.depth.width(), vars.depth.height()))?;
    check_same_dims("mask", dims, (vars.mask.width, vars.mask.height))?;
    if vars.poses.len() != obs.sources.len() {
        return Err(Error::Config(format!(
            "{} poses given for {} sources",
            vars.poses.len(),
            obs.sources.len()
        )));
    }

    let n = obs.pixel_count();
    let mut grads = GradientSet::zeros(n, obs.sources.len());
    let mut diagnostics = Vec::new();
    let mask = modes.explainability.then_some(&vars.mask);
    let key_mask = if modes.mask_gates_keypoints { mask } else { None };
    let anchors = modes.detector.then_some(&obs.keypoints);
    if modes.detector && obs.keypoints.is_empty() {
        diagnostics.push("detector selected no keypoints; keypoint loss is zero".to_string());
    }

    let mut per_source = Vec::with_capacity(obs.sources.len());
    let (mut l_key, mut l_photo) = (0.0, 0.0);
    for (s, pose) in vars.poses.iter().enumerate() {
        let warp = compute_warp(&vars.depth, &obs.intrinsics, pose, dims, obs.z_min);
        let photo = photometric_loss(&obs.target, &obs.sources[s], &warp, mask, modes.reduction)?;
        let key = keypoint_similarity_loss(
            &obs.grid_target,
            &obs.grid_sources[s],
            &warp,
            anchors,
            key_mask,
            modes.reduction,
        )?;
        if photo.is_empty() {
            diagnostics.push(format!("source {s}: no valid warped pixels"));
        }
        grads.accumulate(weights.alpha, Some(s), &key.grad);
        grads.accumulate(weights.beta, Some(s), &photo.grad);
        l_key += key.value;
        l_photo += photo.value;
        per_source.push(SourceLoss {
            l_key: key.value,
            l_photo: photo.value,
        });
    }

    let smooth = smooth_loss(&vars.depth, &obs.target)?;
    grads.accumulate(weights.gamma, None, &smooth.grad);
    let l_expl = if modes.explainability {
        let expl = explainability_loss(&vars.mask);
        grads.accumulate(weights.delta, None, &expl.grad);
        expl.value
    } else {
        0.0
    };

    let breakdown = LossBreakdown {
        l_key,
        l_photo,
        l_smooth: smooth.value,
        l_expl,
        total: weights.combine(l_key, l_photo, smooth.value, l_expl),
        per_source,
        diagnostics,
    };
    for (name, value) in [
        ("keypoint", breakdown.l_key),
        ("photometric", breakdown.l_photo),
        ("smoothness", breakdown.l_smooth),
        ("explainability", breakdown.l_expl),
    ] {
        if !value.is_finite() {
            return Err(Error::NonFinite { component: name, value });
        }
    }
    Ok((breakdown, grads))
}
