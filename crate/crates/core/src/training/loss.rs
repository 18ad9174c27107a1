use pavescan_tensor::{Real, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::targets::Targets;
use crate::detector::{NetworkConfig, BOX_OUTPUTS};
use crate::error::{Error, Result};

const CIOU_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub box_weight: f64,
    pub obj_weight: f64,
    pub cls_weight: f64,
    /// Per-scale objectness weights, finest first.
    pub balance: Vec<f64>,
    /// Objectness target at positives: detached IoU (soft) or 1 (hard).
    pub soft_objectness: bool,
    pub anchor_threshold: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            box_weight: 0.05,
            obj_weight: 1.0,
            cls_weight: 0.5,
            balance: vec![4.0, 1.0, 0.4],
            soft_objectness: true,
            anchor_threshold: super::targets::ANCHOR_THRESHOLD,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, scales: usize) -> Result<()> {
        if [self.box_weight, self.obj_weight, self.cls_weight].iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Config("loss weights must be positive".into()));
        }
        if self.balance.len() < scales || self.balance[..scales].iter().any(|&b| !(b > 0.0)) {
            return Err(Error::Config(format!("need {scales} positive objectness balance weights")));
        }
        if !(self.anchor_threshold > 1.0) {
            return Err(Error::Config("anchor threshold must exceed 1".into()));
        }
        Ok(())
    }
}

/// Loss components; `total = λ_box·box + λ_obj·obj + λ_cls·cls`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "box")]
    pub box_loss: f64,
    pub obj: f64,
    pub cls: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(box_loss: f64, obj: f64, cls: f64, cfg: &LossConfig) -> Self {
        Self {
            box_loss,
            obj,
            cls,
            total: cfg.box_weight * box_loss + cfg.obj_weight * obj + cfg.cls_weight * cls,
        }
    }

    pub fn components(&self) -> [(&'static str, f64); 3] {
        [("box", self.box_loss), ("obj", self.obj), ("cls", self.cls)]
    }
}

pub struct LossOutput {
    /// Differentiable weighted total.
    pub total: Var,
    pub breakdown: LossBreakdown,
}

fn constant<T: Real>(tape: &Tape<T>, v: Vec<f64>) -> Result<Var> {
    let n = v.len();
    Ok(tape.constant(Tensor::new([n], v.into_iter().map(T::of).collect())?))
}

/// Complete IoU of center-form boxes given as equal-length vectors.
pub fn ciou<T: Real>(tape: &Tape<T>, pred: [Var; 4], target: [Var; 4]) -> Result<Var> {
    let eps = T::of(CIOU_EPS);
    let half = T::of(0.5);
    let corners = |b: [Var; 4]| -> Result<[Var; 4]> {
        let hw = tape.scale(b[2], half);
        let hh = tape.scale(b[3], half);
        Ok([tape.sub(b[0], hw)?, tape.sub(b[1], hh)?, tape.add(b[0], hw)?, tape.add(b[1], hh)?])
    };
    let [px1, py1, px2, py2] = corners(pred)?;
    let [tx1, ty1, tx2, ty2] = corners(target)?;
    let iw = tape.sub(tape.minimum(px2, tx2)?, tape.maximum(px1, tx1)?)?;
    let ih = tape.sub(tape.minimum(py2, ty2)?, tape.maximum(py1, ty1)?)?;
    let iw = tape.clamp(iw, Some(T::zero()), None);
    let ih = tape.clamp(ih, Some(T::zero()), None);
    let inter = tape.mul(iw, ih)?;
    let area_p = tape.mul(pred[2], pred[3])?;
    let area_t = tape.mul(target[2], target[3])?;
    let union = tape.sub(tape.add(area_p, area_t)?, inter)?;
    let union = tape.affine(union, T::one(), eps);
    let iou = tape.div(inter, union)?;

    let cw = tape.sub(tape.maximum(px2, tx2)?, tape.minimum(px1, tx1)?)?;
    let ch = tape.sub(tape.maximum(py2, ty2)?, tape.minimum(py1, ty1)?)?;
    let c2 = tape.add(tape.square(cw), tape.square(ch))?;
    let c2 = tape.affine(c2, T::one(), eps);
    let dx = tape.sub(pred[0], target[0])?;
    let dy = tape.sub(pred[1], target[1])?;
    let rho2 = tape.add(tape.square(dx), tape.square(dy))?;
    let dist = tape.div(rho2, c2)?;

    let at = tape.atan(tape.div(target[2], tape.affine(target[3], T::one(), eps))?);
    let ap = tape.atan(tape.div(pred[2], tape.affine(pred[3], T::one(), eps))?);
    let v = tape.scale(tape.square(tape.sub(at, ap)?), T::of(4.0 / (std::f64::consts::PI * std::f64::consts::PI)));
    // alpha = v / (v − iou + 1 + eps)
    let denom = tape.affine(tape.sub(v, iou)?, T::one(), T::one() + eps);
    let alpha = tape.div(v, denom)?;
    let penalty = tape.add(dist, tape.mul(v, alpha)?)?;
    Ok(tape.sub(iou, penalty)?)
}

/// Box, objectness and class losses of raw head outputs against assigned
/// targets.
pub fn compute_loss<T: Real>(
    tape: &Tape<T>,
    raw: &[Var],
    targets: &Targets,
    net: &NetworkConfig,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    if raw.len() != net.num_scales || targets.scales.len() != net.num_scales {
        return Err(Error::Invalid("loss: scale count mismatch".into()));
    }
    let no = net.outputs_per_anchor();
    let a = net.anchors_per_scale();
    let nc = net.num_classes;
    for (s, &r) in raw.iter().enumerate() {
        let g = net.grid(s);
        let want = [targets.batch, a * no, g, g];
        if tape.shape(r) != want {
            return Err(Error::Invalid(format!("loss: scale {s} shape {:?}, expected {want:?}", tape.shape(r))));
        }
    }

    // Box regression and class logits at positives, all scales together.
    let mut parts: [Vec<Var>; 4] = Default::default();
    let mut tgt: [Vec<f64>; 4] = Default::default();
    let mut cls_logits = Vec::new();
    let mut cls_targets = Vec::new();
    for (s, st) in targets.scales.iter().enumerate() {
        if st.positives.is_empty() {
            continue;
        }
        let gathered: Vec<Var> = (0..4)
            .map(|k| {
                let idx: Vec<usize> = st.positives.iter().map(|p| p.site.index(net, k)).collect();
                tape.gather(raw[s], &idx)
            })
            .collect::<std::result::Result<_, _>>()?;
        for k in 0..2 {
            let sig = tape.sigmoid(gathered[k]);
            parts[k].push(tape.affine(sig, T::of(2.0), T::of(-0.5)));
        }
        for k in 2..4 {
            let sig = tape.sigmoid(gathered[k]);
            let sq = tape.square(tape.scale(sig, T::of(2.0)));
            let anchors = constant(tape, st.positives.iter().map(|p| p.anchor[k - 2]).collect())?;
            parts[k].push(tape.mul(sq, anchors)?);
        }
        for (k, t) in tgt.iter_mut().enumerate() {
            t.extend(st.positives.iter().map(|p| p.target[k]));
        }
        let idx: Vec<usize> = st
            .positives
            .iter()
            .flat_map(|p| (0..nc).map(move |c| p.site.index(net, BOX_OUTPUTS + c)))
            .collect();
        cls_logits.push(tape.gather(raw[s], &idx)?);
        cls_targets.extend(st.positives.iter().flat_map(|p| (0..nc).map(move |c| if c == p.class_id { 1.0 } else { 0.0 })));
    }

    let total_pos = targets.num_positives();
    let mut ious = Vec::new();
    let (box_var, cls_var) = if total_pos == 0 {
        (None, None)
    } else {
        let join = |v: &[Var]| -> Result<Var> { if v.len() == 1 { Ok(v[0]) } else { Ok(tape.concat(v, 0)?) } };
        let pred = [join(&parts[0])?, join(&parts[1])?, join(&parts[2])?, join(&parts[3])?];
        let target = [
            constant(tape, tgt[0].clone())?,
            constant(tape, tgt[1].clone())?,
            constant(tape, tgt[2].clone())?,
            constant(tape, tgt[3].clone())?,
        ];
        let c = ciou(tape, pred, target)?;
        ious = tape.value(c).data().iter().map(|v| v.as_f64()).collect();
        let one_minus = tape.affine(c, -T::one(), T::one());
        let box_loss = tape.mean(one_minus);
        let logits = join(&cls_logits)?;
        let t = Tensor::new([cls_targets.len()], cls_targets.iter().map(|&v| T::of(v)).collect())?;
        let cls = tape.mean(tape.bce_with_logits(logits, &t)?);
        (Some(box_loss), Some(cls))
    };

    // Objectness over every site, balanced across scales.
    let balance_sum: f64 = cfg.balance[..net.num_scales].iter().sum();
    let mut obj_terms = Vec::new();
    let mut offset = 0;
    for (s, st) in targets.scales.iter().enumerate() {
        let g = net.grid(s);
        let mut idx = Vec::with_capacity(targets.batch * a * g * g);
        for image in 0..targets.batch {
            for anchor in 0..a {
                let base = (image * a * no + anchor * no + 4) * g * g;
                idx.extend(base..base + g * g);
            }
        }
        let mut t = vec![0.0f64; idx.len()];
        for (k, p) in st.positives.iter().enumerate() {
            let site = p.site;
            let flat = ((site.image * a + site.anchor) * g + site.gy) * g + site.gx;
            let value = if cfg.soft_objectness { ious[offset + k].clamp(0.0, 1.0) } else { 1.0 };
            t[flat] = t[flat].max(value);
        }
        offset += st.positives.len();
        let logits = tape.gather(raw[s], &idx)?;
        let t = Tensor::new([t.len()], t.into_iter().map(T::of).collect())?;
        let bce = tape.mean(tape.bce_with_logits(logits, &t)?);
        obj_terms.push(tape.scale(bce, T::of(cfg.balance[s] / balance_sum)));
    }
    let mut obj = obj_terms[0];
    for &o in &obj_terms[1..] {
        obj = tape.add(obj, o)?;
    }

    let val = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).data()[0].as_f64());
    let breakdown = LossBreakdown::new(val(box_var), val(Some(obj)), val(cls_var), cfg);
    let mut total = tape.scale(obj, T::of(cfg.obj_weight));
    if let Some(b) = box_var {
        total = tape.add(total, tape.scale(b, T::of(cfg.box_weight)))?;
    }
    if let Some(c) = cls_var {
        total = tape.add(total, tape.scale(c, T::of(cfg.cls_weight)))?;
    }
    Ok(LossOutput { total, breakdown })
}
