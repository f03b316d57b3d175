//! Reliability masks for self-teaching.
//!
//! Discriminator confidence above `t_u` seeds a mask. Each seed carries the
//! class `c*` that `G` assigns to it, and the mask grows into an adjacent
//! pixel `q` when `G`'s probability for `c*` at `q` exceeds `t_r`. Regions of
//! different classes may overlap, which keeps the grown mask monotone in both
//! thresholds. Each grown pixel reports the `c*` of the first region to reach
//! it, with seeds scanned in row-major order and a FIFO frontier.
//!
//! The reliability weight of a pixel is the discriminator confidence on the
//! grown mask and zero elsewhere.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::tensor::{Tensor, TensorError};
use crate::toyscenes::{LabelMap, VOID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Four,
    Eight,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            other => Err(format!("connectivity must be 4 or 8, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}

impl Connectivity {
    /// Neighbor offsets `(dy, dx)` in visiting order.
    pub fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (0, -1), (0, 1), (1, 0)],
            Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
        }
    }
}

pub const DEFAULT_T_U: f64 = 0.2;
pub const DEFAULT_T_R: f64 = 1.0 - 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub t_u: f64,
    pub t_r: f64,
    pub connectivity: Connectivity,
    /// `None` grows to a fixpoint; `Some(k)` stops after `k` expansion rounds.
    pub max_growth_rounds: Option<usize>,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            t_u: DEFAULT_T_U,
            t_r: DEFAULT_T_R,
            connectivity: Connectivity::Four,
            max_growth_rounds: None,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.t_u > 0.0 && self.t_u < 1.0) {
            return Err(format!("mask.t_u must lie in (0, 1), got {}", self.t_u));
        }
        if !(self.t_r > 0.0 && self.t_r < 1.0) {
            return Err(format!("mask.t_r must lie in (0, 1), got {}", self.t_r));
        }
        Ok(())
    }
}

/// Binary `H × W` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), height * width, "mask size");
        Mask { height, width, data }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![false; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.len() == other.data.len() && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }
}

/// A grown mask with the class each selected pixel was admitted under.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrownMask {
    pub mask: Mask,
    /// Inherited `c*` per pixel, [`VOID`] outside the mask.
    pub classes: LabelMap,
}

/// `1` where `confidence > t_u`. `confidence` is one `H × W` plane.
pub fn threshold_mask(confidence: &[f64], height: usize, width: usize, t_u: f64) -> Mask {
    assert_eq!(confidence.len(), height * width, "confidence plane size");
    Mask::new(height, width, confidence.iter().map(|&c| c > t_u).collect())
}

/// Argmax over channels of a `[C, H, W]` map, lowest class on ties.
pub fn pseudo_labels(probs: &Tensor) -> Result<LabelMap, TensorError> {
    let (c, h, w) = match probs.shape() {
        &[c, h, w] => (c, h, w),
        other => {
            return Err(TensorError::InvalidShape {
                shape: other.to_vec(),
                reason: "pseudo_labels expects [C, H, W]".into(),
            })
        }
    };
    Ok(LabelMap::new(h, w, argmax_plane(probs.data(), c, h * w)))
}

/// Per-item pseudo-labels of a `[B, C, H, W]` map.
pub fn pseudo_labels_batch(probs: &Tensor) -> Result<Vec<LabelMap>, TensorError> {
    let [b, c, h, w] = probs.dims4("pseudo_labels_batch")?;
    let per = c * h * w;
    Ok((0..b)
        .map(|n| LabelMap::new(h, w, argmax_plane(&probs.data()[n * per..(n + 1) * per], c, h * w)))
        .collect())
}

fn argmax_plane(data: &[f64], channels: usize, plane: usize) -> Vec<u8> {
    assert!(channels <= usize::from(VOID), "too many classes for u8 labels");
    (0..plane)
        .map(|p| {
            let mut best = 0;
            for c in 1..channels {
                if data[c * plane + p] > data[best * plane + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Grows `seeds` over a `[C, H, W]` probability map.
///
/// Each seed starts a region of its argmax class. A region of class `c`
/// spreads to a neighbor whose probability for `c` exceeds `t_r`, and keeps
/// spreading through pixels another region reached first. A pixel's
/// reported class is the first region to reach it in breadth-first order
/// (seeds scanned row-major, neighbors in [`Connectivity::offsets`] order).
/// `max_rounds` bounds the path length from a seed.
pub fn grow_mask(
    seeds: &Mask,
    probs: &Tensor,
    t_r: f64,
    connectivity: Connectivity,
    max_rounds: Option<usize>,
) -> Result<GrownMask, TensorError> {
    let (h, w) = (seeds.height, seeds.width);
    let channels = match probs.shape() {
        &[c, ph, pw] if (ph, pw) == (h, w) => c,
        other => {
            return Err(TensorError::ShapeMismatch {
                op: "grow_mask",
                left: vec![h, w],
                right: other.to_vec(),
            })
        }
    };
    let plane = h * w;
    let data = probs.data();
    let argmax = argmax_plane(data, channels, plane);
    let mut selected = seeds.data.clone();
    let mut classes = vec![VOID; plane];
    // `reached[c * plane + p]`: the class-`c` region contains `p`.
    let mut reached = vec![false; channels * plane];
    let mut frontier = VecDeque::new();
    for p in 0..plane {
        if selected[p] {
            classes[p] = argmax[p];
            reached[usize::from(argmax[p]) * plane + p] = true;
            frontier.push_back((p, argmax[p], 0usize));
        }
    }
    while let Some((p, cls, depth)) = frontier.pop_front() {
        if max_rounds.is_some_and(|k| depth >= k) {
            continue;
        }
        let base = usize::from(cls) * plane;
        let (y, x) = ((p / w) as isize, (p % w) as isize);
        for &(dy, dx) in connectivity.offsets() {
            let (ny, nx) = (y + dy, x + dx);
            if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                continue;
            }
            let q = ny as usize * w + nx as usize;
            if !reached[base + q] && data[base + q] > t_r {
                reached[base + q] = true;
                if !selected[q] {
                    selected[q] = true;
                    classes[q] = cls;
                }
                frontier.push_back((q, cls, depth + 1));
            }
        }
    }
    Ok(GrownMask {
        mask: Mask::new(h, w, selected),
        classes: LabelMap::new(h, w, classes),
    })
}

/// `mask · confidence`, elementwise.
pub fn reliability_weights(mask: &Mask, confidence: &[f64]) -> Vec<f64> {
    assert_eq!(mask.data.len(), confidence.len(), "mask and confidence differ in size");
    mask.data
        .iter()
        .zip(confidence)
        .map(|(&m, &c)| if m { c } else { 0.0 })
        .collect()
}

/// How the reliability map is built from the pieces above.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReliabilityMode {
    pub region_growing: bool,
    /// Weight selected pixels by confidence; otherwise by a constant 1.
    pub disc_weighting: bool,
}

/// Weight map for a batch plus the fraction of pixels it selects.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchWeights {
    /// `[B, 1, H, W]`.
    pub weights: Tensor,
    pub selected_fraction: f64,
}

/// Seeds, growth and weighting for a `[B, C, H, W]` probability map and its
/// `[B, 1, H, W]` confidence map.
pub fn batch_reliability(
    probs: &Tensor,
    confidence: &Tensor,
    config: &MaskConfig,
    mode: ReliabilityMode,
) -> Result<BatchWeights, TensorError> {
    let [b, c, h, w] = probs.dims4("batch_reliability")?;
    if confidence.shape() != [b, 1, h, w] {
        return Err(TensorError::ShapeMismatch {
            op: "batch_reliability",
            left: probs.shape().to_vec(),
            right: confidence.shape().to_vec(),
        });
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(b * plane);
    let mut selected = 0;
    for n in 0..b {
        let conf = &confidence.data()[n * plane..(n + 1) * plane];
        let seeds = threshold_mask(conf, h, w, config.t_u);
        let mask = if mode.region_growing {
            let item = Tensor::new(vec![c, h, w], probs.data()[n * c * plane..(n + 1) * c * plane].to_vec())?;
            grow_mask(&seeds, &item, config.t_r, config.connectivity, config.max_growth_rounds)?.mask
        } else {
            seeds
        };
        selected += mask.count();
        if mode.disc_weighting {
            out.extend(reliability_weights(&mask, conf));
        } else {
            out.extend(mask.data.iter().map(|&m| if m { 1.0 } else { 0.0 }));
        }
    }
    Ok(BatchWeights {
        weights: Tensor::new(vec![b, 1, h, w], out)?,
        selected_fraction: selected as f64 / (b * plane) as f64,
    })
}
