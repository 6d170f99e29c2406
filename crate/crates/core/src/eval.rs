//! Localization and faithfulness metrics for saliency maps.
//!
//! All perturbations operate on the normalized model input, where the dataset
//! mean colour is exactly zero, so "replace with the mean" means writing 0.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model_io::Normalization;
use crate::numerics::{softmax_in_place, Tensor};
use crate::render::normalize_grid;
use crate::vit::VisionTransformer;

/// Half-open pixel box `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::InvalidArgument(format!(
                "empty box ({x0}, {y0}, {x1}, {y1})"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x1 <= width && self.y1 <= height
    }

    /// Parses the sidecar format: one line `x0 y0 x1 y1`.
    pub fn parse_sidecar(text: &str) -> Result<Self> {
        let line = text
            .lines()
            .map(str::trim)
            .find(|l| !l.is_empty())
            .ok_or_else(|| Error::InvalidArgument("empty bounding-box file".into()))?;
        let nums = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite() && *v >= 0.0)
                    .map(|v| v.round() as usize)
                    .ok_or_else(|| Error::InvalidArgument(format!("bad box coordinate `{t}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        match nums.as_slice() {
            [x0, y0, x1, y1] => Self::new(*x0, *y0, *x1, *y1),
            _ => Err(Error::InvalidArgument(format!(
                "expected 4 box coordinates, got `{line}`"
            ))),
        }
    }
}

/// Binarizes at `threshold_frac × max`, takes the largest 4-connected
/// foreground component (first in row-major scan on ties) and returns its
/// tight box.
pub fn estimate_bbox(saliency: &Tensor, threshold_frac: f64) -> Result<BBox> {
    let (h, w) = saliency.dims2()?;
    let max = saliency.max();
    if !(max > 0.0) {
        return Err(Error::Degenerate("saliency map has no positive values".into()));
    }
    let thr = threshold_frac * max;
    let fg: Vec<bool> = saliency.data().iter().map(|&v| v >= thr && v > 0.0).collect();
    let mut seen = vec![false; h * w];
    let mut best: Option<(usize, BBox)> = None;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !fg[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut area, mut x0, mut y0, mut x1, mut y1) = (0, w, h, 0, 0);
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            area += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            let mut visit = |q: usize| {
                if fg[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        if best.is_none_or(|(a, _)| area > a) {
            best = Some((area, BBox { x0, y0, x1, y1 }));
        }
    }
    best.map(|(_, b)| b)
        .ok_or_else(|| Error::Degenerate("no foreground after thresholding".into()))
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = a.x1.min(b.x1).saturating_sub(a.x0.max(b.x0));
    let iy = a.y1.min(b.y1).saturating_sub(a.y0.max(b.y0));
    let inter = (ix * iy) as f64;
    let union = (a.area() + b.area()) as f64 - inter;
    if union == 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Fraction of IoUs at or above 0.5.
pub fn localization_accuracy(ious: &[f64]) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::InvalidArgument("no IoU values".into()));
    }
    Ok(ious.iter().filter(|&&v| v >= 0.5).count() as f64 / ious.len() as f64)
}

/// A measurement series over increasing perturbation fractions.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    fractions: Vec<f64>,
    values: Vec<f64>,
}

impl Curve {
    pub fn new(fractions: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if fractions.len() != values.len() {
            return Err(Error::InvalidArgument(format!(
                "{} fractions but {} values",
                fractions.len(),
                values.len()
            )));
        }
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::InvalidArgument("fractions must lie in [0, 1]".into()));
        }
        if fractions.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("fractions must be strictly increasing".into()));
        }
        Ok(Self { fractions, values })
    }

    pub fn fractions(&self) -> &[f64] {
        &self.fractions
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Trapezoidal area divided by the fraction span.
pub fn auc(curve: &Curve) -> Result<f64> {
    let (f, v) = (&curve.fractions, &curve.values);
    if f.len() < 2 {
        return Err(Error::InvalidArgument("AUC needs at least two points".into()));
    }
    let area: f64 = (1..f.len())
        .map(|i| (f[i] - f[i - 1]) * (v[i] + v[i - 1]) / 2.0)
        .sum();
    Ok(area / (f[f.len() - 1] - f[0]))
}

/// `{0, 0.1, …, 0.9}`.
pub fn perturbation_steps() -> Vec<f64> {
    (0..10).map(|i| i as f64 / 10.0).collect()
}

/// `{0, 0.1, …, 1.0}`.
pub fn insertion_steps() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// Anything that produces class logits for a `[C×H×W]` input.
pub trait Classifier {
    fn logits(&self, image: &Tensor) -> Result<Vec<f64>>;

    fn probabilities(&self, image: &Tensor) -> Result<Vec<f64>> {
        let mut p = self.logits(image)?;
        softmax_in_place(&mut p);
        Ok(p)
    }
}

impl Classifier for VisionTransformer {
    fn logits(&self, image: &Tensor) -> Result<Vec<f64>> {
        self.forward(image)?
            .logits
            .map(Tensor::into_data)
            .ok_or(Error::MissingHead)
    }
}

fn argmax(v: &[f64]) -> usize {
    Tensor::from_vec(v.to_vec()).argmax().unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbOrder {
    /// Most salient pixels first.
    Positive,
    /// Least salient pixels first.
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsDelKind {
    Insertion,
    Deletion,
}

/// Pixel indices (row-major) ordered by saliency; ties keep index order in
/// both directions.
pub fn pixel_ranking(saliency: &Tensor, order: PerturbOrder) -> Vec<usize> {
    let s = saliency.data();
    let mut idx: Vec<usize> = (0..s.len()).collect();
    match order {
        PerturbOrder::Positive => idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b))),
        PerturbOrder::Negative => idx.sort_by(|&a, &b| s[a].total_cmp(&s[b]).then(a.cmp(&b))),
    }
    idx
}

fn check_saliency(image: &Tensor, saliency: &Tensor) -> Result<(usize, usize)> {
    let [c, h, w] = image.shape() else {
        return Err(Error::Shape {
            op: "saliency metric",
            expected: vec![3, 0, 0],
            actual: image.shape().to_vec(),
        });
    };
    if saliency.shape() != [*h, *w] {
        return Err(Error::Shape {
            op: "saliency metric",
            expected: vec![*h, *w],
            actual: saliency.shape().to_vec(),
        });
    }
    Ok((*c, h * w))
}

fn count_for(fraction: f64, pixels: usize) -> usize {
    ((fraction * pixels as f64).round() as usize).min(pixels)
}

/// Copies the first `count` ranked pixels (all channels) from `src` into `dst`.
fn copy_pixels(dst: &mut Tensor, src: &Tensor, ranking: &[usize], count: usize, channels: usize) {
    let plane = ranking.len();
    for &p in &ranking[..count] {
        for c in 0..channels {
            dst.data_mut()[c * plane + p] = src.data()[c * plane + p];
        }
    }
}

/// Top-1 correctness as ranked pixels are replaced by the mean colour.
pub fn perturbation_curve(
    model: &dyn Classifier,
    image: &Tensor,
    saliency: &Tensor,
    order: PerturbOrder,
    target: usize,
    steps: &[f64],
) -> Result<Curve> {
    let (channels, pixels) = check_saliency(image, saliency)?;
    let ranking = pixel_ranking(saliency, order);
    let blank = Tensor::zeros(image.shape());
    let mut values = Vec::with_capacity(steps.len());
    for &f in steps {
        let mut x = image.clone();
        copy_pixels(&mut x, &blank, &ranking, count_for(f, pixels), channels);
        let correct = argmax(&model.logits(&x)?) == target;
        values.push(if correct { 1.0 } else { 0.0 });
    }
    Curve::new(steps.to_vec(), values)
}

/// Separable Gaussian blur of each channel, radius `ceil(3σ)`, edges clamped.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Result<Tensor> {
    let [c, h, w] = image.shape() else {
        return Err(Error::Shape {
            op: "gaussian_blur",
            expected: vec![3, 0, 0],
            actual: image.shape().to_vec(),
        });
    };
    let (c, h, w) = (*c, *h, *w);
    if !(sigma > 0.0) {
        return Ok(image.clone());
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let src = image.data();
    let mut tmp = vec![0.0; c * h * w];
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let xx = (x as isize + k as isize - r).clamp(0, w as isize - 1) as usize;
                    acc += kv * src[base + y * w + xx];
                }
                tmp[base + y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let yy = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[base + yy * w + x];
                }
                out[base + y * w + x] = acc;
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Blur used as the insertion starting point: `σ = image_size / 112`.
pub fn insertion_sigma(image_size: usize) -> f64 {
    image_size as f64 / 112.0
}

/// Target-class probability as top-ranked pixels are deleted (set to the
/// mean) or inserted (restored onto a blurred copy).
pub fn insertion_deletion_curve(
    model: &dyn Classifier,
    image: &Tensor,
    saliency: &Tensor,
    kind: InsDelKind,
    target: usize,
    steps: &[f64],
) -> Result<Curve> {
    let (channels, pixels) = check_saliency(image, saliency)?;
    let ranking = pixel_ranking(saliency, PerturbOrder::Positive);
    let size = image.shape()[1];
    let (start, source) = match kind {
        InsDelKind::Deletion => (image.clone(), Tensor::zeros(image.shape())),
        InsDelKind::Insertion => (gaussian_blur(image, insertion_sigma(size))?, image.clone()),
    };
    let mut values = Vec::with_capacity(steps.len());
    for &f in steps {
        let mut x = start.clone();
        copy_pixels(&mut x, &source, &ranking, count_for(f, pixels), channels);
        let p = model.probabilities(&x)?;
        let v = *p.get(target).ok_or(Error::ClassOutOfRange {
            class: target,
            num_classes: p.len(),
        })?;
        values.push(v);
    }
    Curve::new(steps.to_vec(), values)
}

/// Multiplies the un-normalized image by the min-max saliency and
/// re-normalizes, producing the input for ADP and PIC.
pub fn saliency_masked_image(image: &Tensor, saliency: &Tensor, norm: &Normalization) -> Result<Tensor> {
    let (channels, pixels) = check_saliency(image, saliency)?;
    if channels != 3 {
        return Err(Error::InvalidArgument(format!(
            "saliency masking needs 3 channels, got {channels}"
        )));
    }
    let mask = normalize_grid(saliency);
    let mut out = image.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let c = i / pixels;
        let raw = norm.denormalize(c, *v) * mask.data()[i % pixels];
        *v = norm.normalize(c, raw);
    }
    Ok(out)
}

fn check_pairs(full: &[f64], masked: &[f64]) -> Result<()> {
    if full.len() != masked.len() {
        return Err(Error::InvalidArgument(format!(
            "{} full scores but {} masked scores",
            full.len(),
            masked.len()
        )));
    }
    if full.is_empty() {
        return Err(Error::InvalidArgument("no scores".into()));
    }
    Ok(())
}

/// Average drop percentage: `100/n · Σ max(0, Y−O)/Y`.
pub fn adp(scores_full: &[f64], scores_masked: &[f64]) -> Result<f64> {
    check_pairs(scores_full, scores_masked)?;
    let mut total = 0.0;
    for (&y, &o) in scores_full.iter().zip(scores_masked) {
        if !(y > 0.0) {
            return Err(Error::InvalidArgument(format!("full score {y} is not positive")));
        }
        total += (y - o).max(0.0) / y;
    }
    Ok(100.0 * total / scores_full.len() as f64)
}

/// Percentage of samples whose score rises under masking.
pub fn pic(scores_full: &[f64], scores_masked: &[f64]) -> Result<f64> {
    check_pairs(scores_full, scores_masked)?;
    let up = scores_full
        .iter()
        .zip(scores_masked)
        .filter(|(y, o)| o > y)
        .count();
    Ok(100.0 * up as f64 / scores_full.len() as f64)
}

/// Metrics the evaluation report can contain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Metric {
    Iou,
    Ins,
    Del,
    Pos,
    Neg,
    Adp,
    Pic,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Iou => "iou",
            Metric::Ins => "ins",
            Metric::Del => "del",
            Metric::Pos => "pos",
            Metric::Neg => "neg",
            Metric::Adp => "adp",
            Metric::Pic => "pic",
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "iou" => Metric::Iou,
            "ins" => Metric::Ins,
            "del" => Metric::Del,
            "pos" => Metric::Pos,
            "neg" => Metric::Neg,
            "adp" => Metric::Adp,
            "pic" => Metric::Pic,
            other => return Err(Error::InvalidArgument(format!("unknown metric `{other}`"))),
        })
    }
}

/// Parses a comma-separated metric list, keeping the given order.
pub fn parse_metrics(list: &str) -> Result<Vec<Metric>> {
    let mut out = Vec::new();
    for part in list.split(',').filter(|p| !p.trim().is_empty()) {
        let m: Metric = part.parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument("no metrics requested".into()));
    }
    Ok(out)
}

/// Per-image inputs for [`evaluate_image`].
pub struct ImageEval<'a> {
    pub model: &'a dyn Classifier,
    /// Normalized model input `[3×H×W]`.
    pub image: &'a Tensor,
    /// Saliency at input resolution `[H×W]`.
    pub saliency: &'a Tensor,
    pub target: usize,
    pub ground_truth: Option<BBox>,
    pub norm: &'a Normalization,
}

/// Bounding-box binarization threshold relative to the map maximum.
pub const BBOX_THRESHOLD: f64 = 0.1;

/// One value per requested metric. Curve metrics report their AUC; ADP and
/// PIC report the per-image term whose mean is the aggregate.
pub fn evaluate_image(input: &ImageEval<'_>, metrics: &[Metric]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(metrics.len());
    let mut full_and_masked: Option<(f64, f64)> = None;
    for &m in metrics {
        let v = match m {
            Metric::Iou => {
                let gt = input.ground_truth.ok_or_else(|| {
                    Error::InvalidArgument("IoU requested without a ground-truth box".into())
                })?;
                match estimate_bbox(input.saliency, BBOX_THRESHOLD) {
                    Ok(est) => iou(&est, &gt),
                    Err(Error::Degenerate(_)) => 0.0,
                    Err(e) => return Err(e),
                }
            }
            Metric::Ins | Metric::Del => {
                let kind = if m == Metric::Ins {
                    InsDelKind::Insertion
                } else {
                    InsDelKind::Deletion
                };
                auc(&insertion_deletion_curve(
                    input.model,
                    input.image,
                    input.saliency,
                    kind,
                    input.target,
                    &insertion_steps(),
                )?)?
            }
            Metric::Pos | Metric::Neg => {
                let order = if m == Metric::Pos {
                    PerturbOrder::Positive
                } else {
                    PerturbOrder::Negative
                };
                auc(&perturbation_curve(
                    input.model,
                    input.image,
                    input.saliency,
                    order,
                    input.target,
                    &perturbation_steps(),
                )?)?
            }
            Metric::Adp | Metric::Pic => {
                let (y, o) = match full_and_masked {
                    Some(p) => p,
                    None => {
                        let y = input.model.probabilities(input.image)?[input.target];
                        let masked = saliency_masked_image(input.image, input.saliency, input.norm)?;
                        let o = input.model.probabilities(&masked)?[input.target];
                        full_and_masked = Some((y, o));
                        (y, o)
                    }
                };
                if m == Metric::Adp {
                    adp(&[y], &[o])?
                } else {
                    pic(&[y], &[o])?
                }
            }
        };
        out.push(v);
    }
    Ok(out)
}

/// Writes the CSV report: header `image,<metric>…`, one row per image, then
/// a `mean` row. Values use six decimals so reruns are byte-identical.
pub fn format_report(metrics: &[Metric], rows: &[(String, Vec<f64>)]) -> String {
    let mut out = String::from("image");
    for m in metrics {
        out.push(',');
        out.push_str(m.name());
    }
    out.push('\n');
    for (name, vals) in rows {
        out.push_str(&csv_field(name));
        for v in vals {
            let _ = write!(out, ",{v:.6}");
        }
        out.push('\n');
    }
    out.push_str("mean");
    for i in 0..metrics.len() {
        let mean = if rows.is_empty() {
            f64::NAN
        } else {
            rows.iter().map(|r| r.1[i]).sum::<f64>() / rows.len() as f64
        };
        let _ = write!(out, ",{mean:.6}");
    }
    out.push('\n');
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
