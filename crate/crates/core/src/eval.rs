//! Confusion matrices, per-class IoU and the report files written after a run.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confmask::pseudo_labels_batch;
use crate::nets::{generator_forward, GeneratorParams, NetError};
use crate::tensor::{Graph, TensorError};
use crate::toyscenes::{load_labeled, LabelMap, Sample, SceneError, CLASS_NAMES, VOID};
use crate::trainer::{image_batch, Checkpoint, CheckpointError, TrainLog};

pub const METRICS_FILE: &str = "metrics.json";
pub const PER_CLASS_FILE: &str = "per_class.csv";
pub const LOSS_PLOT_FILE: &str = "loss_curves.svg";
pub const MASK_PLOT_FILE: &str = "mask_fraction.svg";

const EVAL_BATCH: usize = 8;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("label {label} at pixel {pixel} is outside 0..{num_classes}")]
    Label {
        label: u8,
        pixel: usize,
        num_classes: usize,
    },
    #[error("prediction is {pred_h}x{pred_w} but ground truth is {gt_h}x{gt_w}")]
    Shape {
        pred_h: usize,
        pred_w: usize,
        gt_h: usize,
        gt_w: usize,
    },
    #[error("checkpoint has no generator classifier; cannot infer the class count")]
    NoGenerator,
    #[error("checkpoint predicts {checkpoint} classes but the dataset has {dataset}")]
    ClassCount { checkpoint: usize, dataset: usize },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, EvalError>;

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Self {
        assert_eq!(counts.len(), num_classes * num_classes, "confusion matrix size");
        ConfusionMatrix { num_classes, counts }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every non-void pixel of `gt` to the matrix.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(EvalError::Shape {
                pred_h: pred.height(),
                pred_w: pred.width(),
                gt_h: gt.height(),
                gt_w: gt.width(),
            });
        }
        let c = self.num_classes;
        let check = |label: u8, pixel: usize| {
            if (label as usize) < c {
                Ok(label as usize)
            } else {
                Err(EvalError::Label {
                    label,
                    pixel,
                    num_classes: c,
                })
            }
        };
        // Validate first so a bad map leaves the matrix untouched.
        for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
            if g != VOID {
                check(g, i)?;
                check(p, i)?;
            }
        }
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g != VOID {
                self.counts[g as usize * c + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes, "merging confusion matrices");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

/// Per-class IoU (`None` when the class is absent from both prediction and
/// ground truth) and the mean over the classes that are present.
#[derive(Debug, Clone, PartialEq)]
pub struct Iou {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

pub fn miou(cm: &ConfusionMatrix) -> Iou {
    let c = cm.num_classes;
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let tp = cm.get(k, k);
            let row: u64 = (0..c).map(|j| cm.get(k, j)).sum();
            let col: u64 = (0..c).map(|i| cm.get(i, k)).sum();
            let union = row + col - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Iou { per_class, mean }
}

/// Arg-max predictions of `generator` for each image, in order.
pub fn predict(generator: &GeneratorParams, samples: &[&crate::tensor::Tensor]) -> Result<Vec<LabelMap>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let batch = image_batch(chunk.iter().copied())?;
        let mut g = Graph::new();
        let bound = generator.bind(&mut g, false);
        let x = g.constant(batch);
        let probs = generator_forward(&mut g, generator, &bound, x)?;
        out.extend(pseudo_labels_batch(g.value(probs))?);
    }
    Ok(out)
}

pub fn confusion(generator: &GeneratorParams, samples: &[Sample]) -> Result<ConfusionMatrix> {
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let preds = predict(generator, &images)?;
    let mut cm = ConfusionMatrix::new(generator.num_classes());
    for (pred, sample) in preds.iter().zip(samples) {
        cm.accumulate(pred, &sample.labels)?;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class: String,
    pub iou: Option<f64>,
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub checkpoint: String,
    pub dataset: String,
    pub per_class: Vec<ClassIou>,
    pub miou: f64,
    pub pixels_evaluated: u64,
}

pub fn class_name(index: usize) -> String {
    CLASS_NAMES
        .get(index)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("class{index}"))
}

impl Metrics {
    pub fn from_confusion(cm: &ConfusionMatrix, checkpoint: &str, dataset: &str) -> Self {
        let iou = miou(cm);
        Metrics {
            checkpoint: checkpoint.to_string(),
            dataset: dataset.to_string(),
            per_class: iou
                .per_class
                .iter()
                .enumerate()
                .map(|(i, &v)| ClassIou {
                    class: class_name(i),
                    iou: v,
                })
                .collect(),
            miou: iou.mean,
            pixels_evaluated: cm.total(),
        }
    }
}

pub fn evaluate_generator(
    generator: &GeneratorParams,
    samples: &[Sample],
    checkpoint: &str,
    dataset: &str,
) -> Result<Metrics> {
    if let Some(s) = samples.first() {
        if s.num_classes != generator.num_classes() {
            return Err(EvalError::ClassCount {
                checkpoint: generator.num_classes(),
                dataset: s.num_classes,
            });
        }
    }
    let cm = confusion(generator, samples)?;
    Ok(Metrics::from_confusion(&cm, checkpoint, dataset))
}

pub fn evaluate_checkpoint(checkpoint: &Path, dataset_dir: &Path) -> Result<Metrics> {
    let ck = Checkpoint::read(checkpoint)?;
    let num_classes = ck.num_classes().ok_or(EvalError::NoGenerator)?;
    let generator = ck.generator(num_classes)?;
    let samples = load_labeled(dataset_dir)?;
    evaluate_generator(
        &generator,
        &samples,
        &checkpoint.display().to_string(),
        &dataset_dir.display().to_string(),
    )
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn metrics_json(metrics: &Metrics) -> String {
    serde_json::to_string_pretty(metrics).expect("metrics serialize") + "\n"
}

pub fn per_class_csv(metrics: Option<&Metrics>) -> String {
    let mut s = String::from("class,iou\n");
    for c in metrics.map(|m| m.per_class.as_slice()).unwrap_or_default() {
        match c.iou {
            Some(v) => {
                let _ = writeln!(s, "{},{}", c.class, v);
            }
            None => {
                let _ = writeln!(s, "{},", c.class);
            }
        }
    }
    s
}

const PLOT_W: f64 = 640.0;
const PLOT_H: f64 = 360.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

/// Static line chart. `log_scale` plots `log10(1 + y)`.
pub fn line_plot_svg(title: &str, series: &[(&str, Vec<(f64, f64)>)], log_scale: bool) -> String {
    let ty = |y: f64| if log_scale { (1.0 + y.max(0.0)).log10() } else { y };
    let points = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        let y = ty(y);
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (PLOT_W - 2.0 * MARGIN);
    let py = |y: f64| PLOT_H - MARGIN - (ty(y) - y0) / (y1 - y0) * (PLOT_H - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{PLOT_W}" height="{PLOT_H}" viewBox="0 0 {PLOT_W} {PLOT_H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{PLOT_W}" height="{PLOT_H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        PLOT_W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{m} {b} H{r} M{m} {b} V{m}" stroke="black" fill="none"/>"#,
        m = MARGIN,
        b = PLOT_H - MARGIN,
        r = PLOT_W - MARGIN
    );
    let scale_note = if log_scale { "log10(1+y)" } else { "y" };
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN}" y="{}" font-family="sans-serif" font-size="10">x: {:.0} to {:.0}; {scale_note}: {:.4} to {:.4}</text>"#,
        PLOT_H - 16.0,
        x0,
        x1,
        y0,
        y1
    );
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="{color}">{}</text>"#,
            PLOT_W - MARGIN - 90.0,
            MARGIN + 14.0 * i as f64,
            escape(name)
        );
        if pts.is_empty() {
            continue;
        }
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1" points="{}"/>"#,
            coords.join(" ")
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Writes `metrics.json` (when metrics are given), the per-class CSV, and the
/// loss and mask-fraction plots into `out_dir`.
pub fn emit_report(log: &TrainLog, metrics: Option<&Metrics>, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|source| EvalError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    if let Some(m) = metrics {
        write(&out_dir.join(METRICS_FILE), &metrics_json(m))?;
    }
    write(&out_dir.join(PER_CLASS_FILE), &per_class_csv(metrics))?;

    let column = |f: fn(&crate::trainer::StepRecord) -> f64| -> Vec<(f64, f64)> {
        log.records.iter().map(|r| (r.step as f64, f(r))).collect()
    };
    let losses = [
        ("l_g1", column(|r| r.l_g1)),
        ("l_g2_s", column(|r| r.l_g2_s)),
        ("l_g2_t", column(|r| r.l_g2_t)),
        ("l_g3", column(|r| r.l_g3)),
        ("l_d", column(|r| r.l_d)),
    ];
    write(
        &out_dir.join(LOSS_PLOT_FILE),
        &line_plot_svg("loss terms", &losses, true),
    )?;
    let mask = [("mask_fraction", column(|r| r.mask_fraction))];
    write(
        &out_dir.join(MASK_PLOT_FILE),
        &line_plot_svg("grown mask fraction", &mask, false),
    )?;
    Ok(())
}
