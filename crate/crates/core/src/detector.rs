//! Single-stage anchor-based detector: CBS stem, C3 backbone stages (with
//! CBAM-modified blocks at the configured sites), SPPF, a top-down plus
//! bottom-up fusion neck and one 1x1 prediction conv per scale.

use pavescan_tensor::{sigmoid, Real, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{BoundingBox, Detection};
use crate::layers::{C3Block, C3Cbam, Cbs, Conv, Sppf, C3};
use crate::params::{Builder, Mode, ParamStore, Session};

/// Number of per-anchor box/objectness outputs before the class logits.
pub const BOX_OUTPUTS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Square input extent in pixels.
    pub input_size: usize,
    pub num_classes: usize,
    pub width_multiple: f64,
    pub depth_multiple: f64,
    pub stem_channels: usize,
    /// Base channels of each backbone stage; stage `j` has stride `2^(j+2)`.
    pub stage_channels: Vec<usize>,
    /// Base bottleneck count per C3 block.
    pub bottlenecks: usize,
    /// Detection scales, taken from the deepest stages (1 to 3).
    pub num_scales: usize,
    /// Anchor `[w, h]` in input pixels, per scale from finest to coarsest.
    pub anchors: Vec<Vec<[f32; 2]>>,
    /// Names of C3 blocks built as CBAM-modified blocks.
    pub cbam_sites: Vec<String>,
    pub cbam_reduction: usize,
    pub sppf_kernel: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl NetworkConfig {
    /// Desk-scale configuration: 160x160 input, three scales.
    pub fn toy() -> Self {
        let stage_channels = vec![32, 64, 96, 128];
        let cbam_sites = (0..stage_channels.len()).map(|j| format!("backbone.{j}")).collect();
        Self {
            input_size: 160,
            num_classes: crate::data::NUM_CLASSES,
            width_multiple: 0.5,
            depth_multiple: 1.0,
            stem_channels: 16,
            stage_channels,
            bottlenecks: 1,
            num_scales: 3,
            anchors: vec![
                vec![[10.0, 13.0], [16.0, 30.0], [33.0, 23.0]],
                vec![[30.0, 61.0], [62.0, 45.0], [59.0, 119.0]],
                vec![[116.0, 90.0], [156.0, 198.0], [373.0, 326.0]],
            ]
            .into_iter()
            .map(|level| level.into_iter().map(|[w, h]| [w / 4.0, h / 4.0]).collect())
            .collect(),
            cbam_sites,
            cbam_reduction: crate::cbam::DEFAULT_REDUCTION,
            sppf_kernel: 5,
        }
    }

    pub fn width(&self, base: usize) -> usize {
        ((base as f64 * self.width_multiple).round() as usize).max(1)
    }

    pub fn depth(&self) -> usize {
        ((self.bottlenecks as f64 * self.depth_multiple).round() as usize).max(1)
    }

    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn anchors_per_scale(&self) -> usize {
        self.anchors.first().map_or(0, Vec::len)
    }

    pub fn outputs_per_anchor(&self) -> usize {
        BOX_OUTPUTS + self.num_classes
    }

    /// Stride of detection scale `s` (0 is the finest).
    pub fn stride(&self, scale: usize) -> usize {
        let stage = self.num_stages() - self.num_scales + scale;
        1 << (stage + 2)
    }

    pub fn grid(&self, scale: usize) -> usize {
        self.input_size / self.stride(scale)
    }

    /// Names of every C3 block the configuration builds.
    pub fn c3_block_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.num_stages()).map(|j| format!("backbone.{j}")).collect();
        names.extend((0..self.num_scales.saturating_sub(1)).map(|l| format!("neck.td.{l}")));
        names.extend((1..self.num_scales).map(|l| format!("neck.bu.{l}")));
        names
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 {
            return fail("num_classes must be positive".into());
        }
        if self.width_multiple <= 0.0 || self.depth_multiple <= 0.0 {
            return fail("width/depth multipliers must be positive".into());
        }
        if self.stem_channels == 0 || self.stage_channels.iter().any(|&c| c == 0) {
            return fail("channel counts must be positive".into());
        }
        if !(1..=3).contains(&self.num_scales) || self.num_scales > self.num_stages() {
            return fail(format!(
                "num_scales must be 1..=3 and at most the {} stages, got {}",
                self.num_stages(),
                self.num_scales
            ));
        }
        let max_stride = 1usize << (self.num_stages() + 1);
        if self.input_size == 0 || self.input_size % max_stride != 0 {
            return fail(format!(
                "input_size {} must be a positive multiple of {max_stride}",
                self.input_size
            ));
        }
        if self.anchors.len() != self.num_scales {
            return fail(format!("{} anchor sets for {} scales", self.anchors.len(), self.num_scales));
        }
        let a = self.anchors_per_scale();
        if a == 0 || self.anchors.iter().any(|l| l.len() != a) {
            return fail("every scale needs the same positive number of anchors".into());
        }
        if self.anchors.iter().flatten().any(|[w, h]| !(*w > 0.0 && *h > 0.0)) {
            return fail("anchors must be strictly positive".into());
        }
        let names = self.c3_block_names();
        if let Some(bad) = self.cbam_sites.iter().find(|s| !names.contains(s)) {
            return fail(format!("cbam site {bad:?} is not a C3 block (known: {names:?})"));
        }
        if self.sppf_kernel % 2 == 0 {
            return fail("sppf_kernel must be odd".into());
        }
        Ok(())
    }
}

/// Raw head outputs, one `[N, A*(5+C), H_s, W_s]` tensor per scale.
///
/// Per anchor the channel block is `(tx, ty, tw, th, objectness, class logits...)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPrediction<T> {
    pub scales: Vec<Tensor<T>>,
}

/// Location of one prediction in the raw output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AnchorSite {
    pub image: usize,
    pub scale: usize,
    pub anchor: usize,
    pub gy: usize,
    pub gx: usize,
}

impl AnchorSite {
    /// Flat index of output channel `k` of this site in its scale tensor.
    pub fn index(&self, config: &NetworkConfig, k: usize) -> usize {
        let g = config.grid(self.scale);
        let per_image = config.anchors_per_scale() * config.outputs_per_anchor();
        let ch = self.anchor * config.outputs_per_anchor() + k;
        ((self.image * per_image + ch) * g + self.gy) * g + self.gx
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub detection: Detection,
    pub site: AnchorSite,
}

/// Per-image candidates with confidence `σ(obj)·max σ(cls) ≥ threshold`.
///
/// Boxes use `cx = (2σ(tx) − 0.5 + gx)·stride`, `w = (2σ(tw))²·anchor_w`
/// (likewise for y/h), clipped to the input square.
pub fn decode_candidates<T: Real>(
    raw: &RawPrediction<T>,
    config: &NetworkConfig,
    conf_threshold: f64,
) -> Result<Vec<Vec<Candidate>>> {
    if !(0.0..=1.0).contains(&conf_threshold) {
        return Err(Error::Invalid(format!("confidence threshold {conf_threshold} outside [0, 1]")));
    }
    if raw.scales.len() != config.num_scales {
        return Err(Error::Invalid("raw prediction scale count mismatch".into()));
    }
    let n = raw.scales[0].shape()[0];
    let mut out = vec![Vec::new(); n];
    // Sigmoid products never reach 1.
    if conf_threshold >= 1.0 {
        return Ok(out);
    }
    let size = config.input_size as f64;
    let no = config.outputs_per_anchor();
    for (scale, t) in raw.scales.iter().enumerate() {
        let g = config.grid(scale);
        let stride = config.stride(scale) as f64;
        let d = t.data();
        let expect = [n, config.anchors_per_scale() * no, g, g];
        if t.shape() != expect {
            return Err(Error::Invalid(format!("scale {scale} has shape {:?}, expected {expect:?}", t.shape())));
        }
        for image in 0..n {
            for (anchor, &[aw, ah]) in config.anchors[scale].iter().enumerate() {
                for gy in 0..g {
                    for gx in 0..g {
                        let site = AnchorSite { image, scale, anchor, gy, gx };
                        let at = |k: usize| d[site.index(config, k)].as_f64();
                        let obj = sigmoid(at(4));
                        let (class_id, cls) = (0..config.num_classes)
                            .map(|c| (c, sigmoid(at(BOX_OUTPUTS + c))))
                            .fold((0, f64::MIN), |best, cur| if cur.1 > best.1 { cur } else { best });
                        let confidence = obj * cls;
                        if confidence < conf_threshold {
                            continue;
                        }
                        let cx = (2.0 * sigmoid(at(0)) - 0.5 + gx as f64) * stride;
                        let cy = (2.0 * sigmoid(at(1)) - 0.5 + gy as f64) * stride;
                        let w = (2.0 * sigmoid(at(2))).powi(2) * aw as f64;
                        let h = (2.0 * sigmoid(at(3))).powi(2) * ah as f64;
                        let x1 = (cx - w / 2.0).clamp(0.0, size);
                        let x2 = (cx + w / 2.0).clamp(0.0, size);
                        let y1 = (cy - h / 2.0).clamp(0.0, size);
                        let y2 = (cy + h / 2.0).clamp(0.0, size);
                        let Ok(bbox) = BoundingBox::new(x1, y1, x2, y2) else { continue };
                        out[image].push(Candidate {
                            detection: Detection {
                                bbox,
                                class_id,
                                confidence: confidence.clamp(0.0, 1.0),
                            },
                            site,
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn decode<T: Real>(
    raw: &RawPrediction<T>,
    config: &NetworkConfig,
    conf_threshold: f64,
) -> Result<Vec<Vec<Detection>>> {
    Ok(decode_candidates(raw, config, conf_threshold)?
        .into_iter()
        .map(|c| c.into_iter().map(|c| c.detection).collect())
        .collect())
}

#[derive(Clone)]
struct Stage {
    down: Cbs,
    block: C3Block,
}

#[derive(Clone)]
struct TopDown {
    lateral: Cbs,
    block: C3Block,
}

#[derive(Clone)]
struct BottomUp {
    down: Cbs,
    block: C3Block,
}

#[derive(Clone)]
pub struct Detector<T: Real> {
    config: NetworkConfig,
    params: ParamStore<T>,
    stem: Cbs,
    stages: Vec<Stage>,
    sppf: Sppf,
    top_down: Vec<TopDown>,
    bottom_up: Vec<BottomUp>,
    heads: Vec<Conv>,
}

fn build_c3<T: Real>(b: &mut Builder<'_, T>, cfg: &NetworkConfig, name: &str, cin: usize, cout: usize) -> Result<C3Block> {
    let n = cfg.depth();
    b.scoped(name, |b| {
        Ok(if cfg.cbam_sites.iter().any(|s| s == name) {
            C3Block::Cbam(C3Cbam::build(b, cin, cout, n, true, cfg.cbam_reduction)?)
        } else {
            C3Block::Plain(C3::build(b, cin, cout, n, true))
        })
    })
}

impl<T: Real> Detector<T> {
    /// Builds the network with freshly initialised weights.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut b = Builder::new(&mut params, &mut rng);
        let cfg = &config;
        let stem_c = cfg.width(cfg.stem_channels);
        let stem = Cbs::build(&mut b, "stem", 3, stem_c, 3, 2);
        let chans: Vec<usize> = cfg.stage_channels.iter().map(|&c| cfg.width(c)).collect();
        let mut stages = Vec::new();
        let mut prev = stem_c;
        for (j, &c) in chans.iter().enumerate() {
            let name = format!("backbone.{j}");
            let down = Cbs::build(&mut b, &format!("{name}.down"), prev, c, 3, 2);
            let block = build_c3(&mut b, cfg, &name, c, c)?;
            stages.push(Stage { down, block });
            prev = c;
        }
        let sppf = b.scoped("sppf", |b| Sppf::build(b, prev, prev, cfg.sppf_kernel));

        let s = cfg.num_scales;
        let level_c: Vec<usize> = chans[chans.len() - s..].to_vec();
        let mut top_down = Vec::new();
        let mut x_c = level_c[s - 1];
        for l in (0..s - 1).rev() {
            let name = format!("neck.td.{l}");
            let lateral = Cbs::build(&mut b, &format!("{name}.lateral"), x_c, level_c[l], 1, 1);
            let block = build_c3(&mut b, cfg, &name, 2 * level_c[l], level_c[l])?;
            top_down.push(TopDown { lateral, block });
            x_c = level_c[l];
        }
        top_down.reverse();
        let mut bottom_up = Vec::new();
        for l in 1..s {
            let name = format!("neck.bu.{l}");
            let down = Cbs::build(&mut b, &format!("{name}.down"), x_c, level_c[l - 1], 3, 2);
            let block = build_c3(&mut b, cfg, &name, 2 * level_c[l - 1], level_c[l])?;
            bottom_up.push(BottomUp { down, block });
            x_c = level_c[l];
        }

        let a = cfg.anchors_per_scale();
        let no = cfg.outputs_per_anchor();
        let mut heads = Vec::new();
        for (l, &c) in level_c.iter().enumerate() {
            let conv = b.scoped(&format!("head.{l}"), |b| Conv::build(b, c, a * no, 1, 1, true));
            // Objectness and class priors: a few objects per image, balanced classes.
            let cells = (cfg.input_size / cfg.stride(l)).pow(2) as f64;
            let obj_prior = (8.0 / cells).ln();
            let cls_prior = (0.6 / (cfg.num_classes as f64 - 0.99).max(0.01)).ln();
            let bias = b.store.get_mut(conv.bias.expect("head conv has bias"));
            for anchor in 0..a {
                let d = bias.data_mut();
                d[anchor * no + 4] += T::of(obj_prior);
                for c in 0..cfg.num_classes {
                    d[anchor * no + BOX_OUTPUTS + c] += T::of(cls_prior);
                }
            }
            heads.push(conv);
        }
        Ok(Self {
            config,
            params,
            stem,
            stages,
            sppf,
            top_down,
            bottom_up,
            heads,
        })
    }

    /// Builds the topology for `config` and installs `params`, which must
    /// match it entry for entry.
    pub fn from_params(config: NetworkConfig, params: ParamStore<T>) -> Result<Self> {
        let mut d = Self::new(config, 0)?;
        d.params.load_from(&params)?;
        Ok(d)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> Detector<U> {
        Detector::from_params(self.config.clone(), self.params.cast()).expect("same topology")
    }

    /// Names of the C3 blocks that carry CBAM.
    pub fn cbam_blocks(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (j, s) in self.stages.iter().enumerate() {
            if s.block.has_cbam() {
                out.push(format!("backbone.{j}"));
            }
        }
        for (l, t) in self.top_down.iter().enumerate() {
            if t.block.has_cbam() {
                out.push(format!("neck.td.{l}"));
            }
        }
        for (i, t) in self.bottom_up.iter().enumerate() {
            if t.block.has_cbam() {
                out.push(format!("neck.bu.{}", i + 1));
            }
        }
        out
    }

    /// Default Grad-CAM layer: the output of the last backbone C3 block.
    pub fn default_cam_layer(&self) -> String {
        format!("backbone.{}", self.stages.len() - 1)
    }

    /// Runs the network on `images` (`[N, 3, S, S]`), returning one raw
    /// output variable per scale.
    pub fn forward(&self, s: &mut Session<'_, T>, images: Var) -> Result<Vec<Var>> {
        let shape = s.tape.shape(images);
        let size = self.config.input_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != size || shape[3] != size {
            return Err(Error::Invalid(format!(
                "detector expects [N, 3, {size}, {size}] input, got {shape:?}"
            )));
        }
        let mut x = self.stem.forward(s, images)?;
        s.tap("stem".into(), x);
        let mut feats = Vec::new();
        for (j, stage) in self.stages.iter().enumerate() {
            x = stage.down.forward(s, x)?;
            s.tap(format!("backbone.{j}.down"), x);
            x = stage.block.forward(s, x)?;
            s.tap(format!("backbone.{j}"), x);
            feats.push(x);
        }
        x = self.sppf.forward(s, x)?;
        s.tap("sppf".into(), x);
        let last = feats.len() - 1;
        feats[last] = x;

        let levels = self.config.num_scales;
        let feats = &feats[feats.len() - levels..];
        let mut laterals = vec![None; levels];
        let mut x = feats[levels - 1];
        for l in (0..levels - 1).rev() {
            let td = &self.top_down[l];
            let lat = td.lateral.forward(s, x)?;
            s.tap(format!("neck.td.{l}.lateral"), lat);
            laterals[l] = Some(lat);
            let up = s.tape.upsample_nearest(lat, 2)?;
            let cat = s.tape.concat(&[up, feats[l]], 1)?;
            x = td.block.forward(s, cat)?;
            s.tap(format!("neck.td.{l}"), x);
        }
        let mut outs = vec![x];
        for l in 1..levels {
            let bu = &self.bottom_up[l - 1];
            let d = bu.down.forward(s, x)?;
            let lat = laterals[l - 1].expect("lateral recorded");
            let cat = s.tape.concat(&[d, lat], 1)?;
            x = bu.block.forward(s, cat)?;
            s.tap(format!("neck.bu.{l}"), x);
            outs.push(x);
        }
        let mut raw = Vec::with_capacity(levels);
        for (l, (head, feat)) in self.heads.iter().zip(outs).enumerate() {
            let y = head.forward(s, feat)?;
            s.tap(format!("head.{l}"), y);
            raw.push(y);
        }
        Ok(raw)
    }

    /// Evaluation-mode forward without gradient tracking.
    pub fn predict(&self, images: &Tensor<T>) -> Result<RawPrediction<T>> {
        let tape = Tape::new();
        let mut s = Session::new(&tape, &self.params, Mode::Eval, false);
        let x = tape.constant(images.clone());
        let outs = self.forward(&mut s, x)?;
        Ok(RawPrediction {
            scales: outs.into_iter().map(|v| tape.value(v).clone()).collect(),
        })
    }
}
