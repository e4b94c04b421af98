//! The fusion network: a siamese extraction path with dense connections and
//! channel squeeze-excitation, spatial-frequency activity maps, a decision
//! path with spatial squeeze-excitation, guided-filter smoothing of the
//! uncertain band, and the final pixel-wise blend.

mod weights;

use std::rc::Rc;

pub use weights::{read_u32, read_u64, round_to_f32, Bound, WeightStore, FORMAT_VERSION, MAGIC};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractionConfig {
    pub num_layers: usize,
    pub channels_per_layer: usize,
    pub kernel_size: usize,
    pub se_reduction: usize,
    pub sf_radius: usize,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            num_layers: 4,
            channels_per_layer: 16,
            kernel_size: 3,
            se_reduction: 4,
            sf_radius: 5,
        }
    }
}

impl ExtractionConfig {
    /// Input channel count of extraction layer `layer` under dense connectivity.
    pub fn input_channels(&self, layer: usize) -> usize {
        1 + layer * self.channels_per_layer
    }

    pub fn reduced_channels(&self) -> usize {
        (self.channels_per_layer / self.se_reduction).max(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidedFilterConfig {
    pub radius: usize,
    pub eps: f64,
    pub threshold_low: f64,
    pub threshold_high: f64,
}

impl Default for GuidedFilterConfig {
    fn default() -> Self {
        GuidedFilterConfig {
            radius: 4,
            eps: 0.1,
            threshold_low: 0.1,
            threshold_high: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub extraction: ExtractionConfig,
    /// Output widths of the decision convolutions; the last must be 1.
    pub decision_channels: Vec<usize>,
    pub sse_kernel: usize,
    pub guided: GuidedFilterConfig,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            extraction: ExtractionConfig::default(),
            decision_channels: vec![32, 16, 8, 1],
            sse_kernel: 7,
            guided: GuidedFilterConfig::default(),
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.extraction;
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if e.num_layers != 4 {
            return bad("extraction path has exactly 4 layers");
        }
        if e.channels_per_layer == 0 || e.se_reduction == 0 {
            return bad("channel widths and SE reduction must be positive");
        }
        if e.kernel_size.is_multiple_of(2) || self.sse_kernel.is_multiple_of(2) {
            return bad("kernel sizes must be odd");
        }
        if self.decision_channels.len() != 4 || self.decision_channels[3] != 1 {
            return bad("decision path has 4 convolutions ending in 1 channel");
        }
        if self.decision_channels.contains(&0) {
            return bad("decision widths must be positive");
        }
        let g = &self.guided;
        if g.radius == 0 || g.eps <= 0.0 {
            return bad("guided filter needs radius > 0 and eps > 0");
        }
        if !(0.0 <= g.threshold_low
            && g.threshold_low < g.threshold_high
            && g.threshold_high <= 1.0)
        {
            return bad("boundary thresholds must satisfy 0 <= low < high <= 1");
        }
        Ok(())
    }

    /// Minimum image side accepted by the spatial-frequency window.
    pub fn min_side(&self) -> usize {
        2 * self.extraction.sf_radius + 1
    }

    /// Every parameter name with its shape, in a fixed order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let e = &self.extraction;
        let (c, k, red) = (e.channels_per_layer, e.kernel_size, e.reduced_channels());
        let mut out = Vec::new();
        for l in 0..e.num_layers {
            out.push((
                format!("ext.conv{l}.weight"),
                vec![c, e.input_channels(l), k, k],
            ));
            out.push((format!("ext.conv{l}.bias"), vec![c]));
            out.push((format!("ext.cse{l}.fc1.weight"), vec![red, c]));
            out.push((format!("ext.cse{l}.fc1.bias"), vec![red]));
            out.push((format!("ext.cse{l}.fc2.weight"), vec![c, red]));
            out.push((format!("ext.cse{l}.fc2.bias"), vec![c]));
        }
        let mut cin = e.num_layers;
        for (l, &cout) in self.decision_channels.iter().enumerate() {
            out.push((format!("dec.conv{l}.weight"), vec![cout, cin, k, k]));
            out.push((format!("dec.conv{l}.bias"), vec![cout]));
            if l + 1 < self.decision_channels.len() {
                let s = self.sse_kernel;
                out.push((format!("dec.sse{l}.weight"), vec![1, cout, s, s]));
                out.push((format!("dec.sse{l}.bias"), vec![1]));
            }
            cin = cout;
        }
        out
    }

    pub fn init_weights(&self, seed: u64) -> WeightStore {
        WeightStore::kaiming_uniform(&self.layout(), seed)
    }
}

/// Channel squeeze-excitation: `x * sigmoid(fc2(relu(fc1(gap(x)))))` per channel.
pub fn channel_se<'t>(x: &Var<'t>, prefix: &str, w: &Bound<'t>) -> Result<Var<'t>> {
    let p = |s: &str| w.get(&format!("{prefix}.{s}"));
    let squeezed = x.global_avg_pool()?;
    let hidden = squeezed.dense(p("fc1.weight")?, p("fc1.bias")?)?.relu();
    let gate = hidden.dense(p("fc2.weight")?, p("fc2.bias")?)?.sigmoid();
    x.scale_channels(&gate)
}

/// Spatial squeeze-excitation: one `C -> 1` convolution gates every pixel.
pub fn spatial_se<'t>(x: &Var<'t>, prefix: &str, w: &Bound<'t>) -> Result<Var<'t>> {
    let gate = x
        .conv2d(
            w.get(&format!("{prefix}.weight"))?,
            w.get(&format!("{prefix}.bias"))?,
        )?
        .sigmoid();
    x.scale_spatial(&gate)
}

/// The four densely connected extraction layers for one grayscale image.
pub fn extract_features<'t>(
    img: &Var<'t>,
    cfg: &ExtractionConfig,
    w: &Bound<'t>,
) -> Result<Vec<Var<'t>>> {
    let (_, ch, h, wd) = img.value().dims4()?;
    if ch != 1 {
        return Err(Error::shape(
            "extract_features",
            format!("expected 1 channel, got {ch}"),
        ));
    }
    let min = 2 * cfg.sf_radius + 1;
    if h < min || wd < min {
        return Err(Error::InvalidArgument(format!(
            "image {h}x{wd} is smaller than the {min}x{min} spatial-frequency window"
        )));
    }
    let mut inputs = vec![img.clone()];
    let mut scales = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let x = if inputs.len() == 1 {
            inputs[0].clone()
        } else {
            Var::concat_channels(&inputs)?
        };
        let y = x
            .conv2d(
                w.get(&format!("ext.conv{l}.weight"))?,
                w.get(&format!("ext.conv{l}.bias"))?,
            )?
            .relu();
        let y = channel_se(&y, &format!("ext.cse{l}"), w)?;
        inputs.push(y.clone());
        scales.push(y);
    }
    Ok(scales)
}

/// Spatial-frequency maps of every scale, `[1, 1, H, W]` each.
pub fn activity_maps<'t>(scales: &[Var<'t>], radius: usize) -> Result<Vec<Var<'t>>> {
    scales.iter().map(|s| s.spatial_frequency(radius)).collect()
}

/// Per-scale `SF_A - SF_B`, concatenated along channels.
pub fn activity_difference<'t>(sf_a: &[Var<'t>], sf_b: &[Var<'t>]) -> Result<Var<'t>> {
    if sf_a.len() != sf_b.len() || sf_a.is_empty() {
        return Err(Error::shape(
            "activity_difference",
            format!("{} scales vs {}", sf_a.len(), sf_b.len()),
        ));
    }
    let diffs = sf_a
        .iter()
        .zip(sf_b)
        .map(|(a, b)| a.sub(b))
        .collect::<Result<Vec<_>>>()?;
    Var::concat_channels(&diffs)
}

/// Decision path: initial decision map in `[0, 1]`, `[1, 1, H, W]`.
pub fn decide<'t>(activity: &Var<'t>, cfg: &FusionConfig, w: &Bound<'t>) -> Result<Var<'t>> {
    let mut x = activity.clone();
    let last = cfg.decision_channels.len() - 1;
    for l in 0..=last {
        x = x.conv2d(
            w.get(&format!("dec.conv{l}.weight"))?,
            w.get(&format!("dec.conv{l}.bias"))?,
        )?;
        if l < last {
            x = spatial_se(&x.relu(), &format!("dec.sse{l}"), w)?;
        }
    }
    Ok(x.sigmoid())
}

/// Pixels whose initial probability lies in the closed uncertain band.
pub fn boundary_region(dm: &Tensor, cfg: &GuidedFilterConfig) -> Vec<bool> {
    dm.data()
        .iter()
        .map(|&p| cfg.threshold_low <= p && p <= cfg.threshold_high)
        .collect()
}

/// Guided filter of the initial map, clamped to `[0, 1]`.
pub fn guided_smooth<'t>(
    dm: &Var<'t>,
    guide: &Tensor,
    cfg: &GuidedFilterConfig,
) -> Result<Var<'t>> {
    Ok(dm
        .guided_filter(guide, cfg.radius, cfg.eps)?
        .clamp(0.0, 1.0))
}

/// Smooth map inside the boundary band, initial map elsewhere.
pub fn compose_final_dm<'t>(
    initial: &Var<'t>,
    smooth: &Var<'t>,
    boundary: Rc<Vec<bool>>,
) -> Result<Var<'t>> {
    Var::select(boundary, smooth, initial)
}

/// `p * A + (1 - p) * B`, differentiable in all three.
pub fn fuse<'t>(dm: &Var<'t>, a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
    dm.mul(a)?.add(&dm.one_minus().mul(b)?)
}

/// Guide image for the smoothing step: the pixel-wise mean of both sources.
pub fn guide_image(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.same_shape(b, "guide_image")?;
    Tensor::new(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| 0.5 * (x + y))
            .collect(),
    )
}

/// Everything the two-image pipeline produces.
pub struct Outputs<'t> {
    pub initial: Var<'t>,
    pub smooth: Var<'t>,
    pub boundary: Rc<Vec<bool>>,
    pub final_dm: Var<'t>,
    pub fused: Var<'t>,
}

/// Decision maps from precomputed per-scale activity maps.
pub fn decision_from_activity<'t>(
    sf_a: &[Var<'t>],
    sf_b: &[Var<'t>],
    guide: &Tensor,
    cfg: &FusionConfig,
    w: &Bound<'t>,
) -> Result<(Var<'t>, Var<'t>, Rc<Vec<bool>>, Var<'t>)> {
    let activity = activity_difference(sf_a, sf_b)?;
    let initial = decide(&activity, cfg, w)?;
    let smooth = guided_smooth(&initial, guide, &cfg.guided)?;
    let boundary = Rc::new(boundary_region(initial.value(), &cfg.guided));
    let final_dm = compose_final_dm(&initial, &smooth, Rc::clone(&boundary))?;
    Ok((initial, smooth, boundary, final_dm))
}

/// Full forward pass for grayscale `[1, 1, H, W]` sources.
pub fn forward<'t>(
    a: &Var<'t>,
    b: &Var<'t>,
    cfg: &FusionConfig,
    w: &Bound<'t>,
) -> Result<Outputs<'t>> {
    a.value().same_shape(b.value(), "forward")?;
    let r = cfg.extraction.sf_radius;
    let sf_a = activity_maps(&extract_features(a, &cfg.extraction, w)?, r)?;
    let sf_b = activity_maps(&extract_features(b, &cfg.extraction, w)?, r)?;
    let guide = guide_image(a.value(), b.value())?;
    let (initial, smooth, boundary, final_dm) =
        decision_from_activity(&sf_a, &sf_b, &guide, cfg, w)?;
    let fused = fuse(&final_dm, a, b)?;
    Ok(Outputs {
        initial,
        smooth,
        boundary,
        final_dm,
        fused,
    })
}

/// Blend `[1, C, H, W]` sources with a `[1, 1, H, W]` map shared by all channels.
///
/// Each output pixel is clamped into the source range so the blend never
/// overshoots through rounding.
pub fn fuse_images(dm: &Tensor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.same_shape(b, "fuse")?;
    let (n, c, h, w) = a.dims4()?;
    let (dn, dc, dh, dw) = dm.dims4()?;
    if n != 1 || dn != 1 || dc != 1 || (dh, dw) != (h, w) {
        return Err(Error::shape(
            "fuse",
            format!(
                "decision map {:?} does not match images {:?}",
                dm.shape(),
                a.shape()
            ),
        ));
    }
    let plane = h * w;
    let p = dm.data();
    let data = (0..c * plane)
        .map(|i| {
            let (x, y, q) = (a.data()[i], b.data()[i], p[i % plane]);
            (q * x + (1.0 - q) * y).clamp(x.min(y), x.max(y))
        })
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Decision maps for one source pair at inference time.
#[derive(Clone, Debug)]
pub struct DecisionMaps {
    pub initial: Tensor,
    pub smooth: Tensor,
    pub boundary: Vec<bool>,
    pub final_dm: Tensor,
}

/// Configuration plus validated weights; read-only at inference.
#[derive(Clone, Debug)]
pub struct FusionNet {
    config: FusionConfig,
    weights: WeightStore,
}

impl FusionNet {
    pub fn new(config: FusionConfig, weights: WeightStore) -> Result<Self> {
        config.validate()?;
        weights.validate(&config.layout())?;
        Ok(FusionNet { config, weights })
    }

    pub fn init(config: FusionConfig, seed: u64) -> Result<Self> {
        let weights = config.init_weights(seed);
        Self::new(config, weights)
    }

    pub fn load(config: FusionConfig, path: &std::path::Path) -> Result<Self> {
        let weights = WeightStore::load(path)?;
        Self::new(config, weights).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn weights(&self) -> &WeightStore {
        &self.weights
    }

    /// Extraction path plus spatial frequency for one grayscale image.
    pub fn activity_maps(&self, img: &Tensor) -> Result<Vec<Tensor>> {
        let tape = Tape::no_grad();
        let w = self.weights.bind_const(&tape);
        let x = tape.constant(img.clone());
        let scales = extract_features(&x, &self.config.extraction, &w)?;
        let maps = activity_maps(&scales, self.config.extraction.sf_radius)?;
        Ok(maps.iter().map(|m| m.value().clone()).collect())
    }

    /// Decision path for a pair of cached activity stacks.
    pub fn decide(&self, sf_a: &[Tensor], sf_b: &[Tensor], guide: &Tensor) -> Result<DecisionMaps> {
        let tape = Tape::no_grad();
        let w = self.weights.bind_const(&tape);
        let a: Vec<Var<'_>> = sf_a.iter().map(|t| tape.constant(t.clone())).collect();
        let b: Vec<Var<'_>> = sf_b.iter().map(|t| tape.constant(t.clone())).collect();
        let (initial, smooth, boundary, final_dm) =
            decision_from_activity(&a, &b, guide, &self.config, &w)?;
        Ok(DecisionMaps {
            initial: initial.value().clone(),
            smooth: smooth.value().clone(),
            boundary: boundary.to_vec(),
            final_dm: final_dm.value().clone(),
        })
    }

    /// Decision maps for two grayscale `[1, 1, H, W]` sources.
    pub fn decision_maps(&self, a: &Tensor, b: &Tensor) -> Result<DecisionMaps> {
        a.same_shape(b, "decision_maps")?;
        let sf_a = self.activity_maps(a)?;
        let sf_b = self.activity_maps(b)?;
        self.decide(&sf_a, &sf_b, &guide_image(a, b)?)
    }

    /// Fuse two grayscale sources.
    pub fn fuse_gray(&self, a: &Tensor, b: &Tensor) -> Result<(Tensor, DecisionMaps)> {
        let maps = self.decision_maps(a, b)?;
        let fused = fuse_images(&maps.final_dm, a, b)?;
        Ok((fused, maps))
    }

    /// Fuse two `[1, C, H, W]` sources; the map is computed on their luma.
    pub fn fuse_color(&self, a: &Tensor, b: &Tensor) -> Result<(Tensor, DecisionMaps)> {
        a.same_shape(b, "fuse_color")?;
        let maps = self.decision_maps(&crate::io::to_gray(a)?, &crate::io::to_gray(b)?)?;
        let fused = fuse_images(&maps.final_dm, a, b)?;
        Ok((fused, maps))
    }
}

/// Blend RGB (or any channel count) sources with a map computed elsewhere.
pub fn fuse_color(dm: &Tensor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    fuse_images(dm, a, b)
}
