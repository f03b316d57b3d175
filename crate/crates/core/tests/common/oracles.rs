//! Straightforward reimplementations used as references. None of these share
//! code with the library beyond plain data types.

use std::collections::BTreeSet;

/// Level-by-level breadth-first growth written directly from the rule: a
/// pixel belonging to the region of class `c` proposes each neighbor, and
/// the neighbor joins that region when its probability for `c` exceeds
/// `t_r`. Regions of different classes may overlap. Pixels keep the class of
/// the first region listing them, scanning each level in admission order.
///
/// `probs` is `[C, H, W]` row-major; returns (selected, class per pixel).
#[allow(clippy::too_many_arguments)]
pub fn bfs_grow(
    seeds: &[bool],
    probs: &[f64],
    classes: usize,
    h: usize,
    w: usize,
    t_r: f64,
    eight: bool,
    max_levels: Option<usize>,
) -> (Vec<bool>, Vec<Option<usize>>) {
    let at = |c: usize, y: usize, x: usize| probs[c * h * w + y * w + x];
    let mut label: Vec<Vec<Option<usize>>> = vec![vec![None; w]; h];
    let mut member: BTreeSet<(usize, usize, usize)> = BTreeSet::new();
    let mut level: Vec<(usize, usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if seeds[y * w + x] {
                let mut best = 0;
                for c in 1..classes {
                    if at(c, y, x) > at(best, y, x) {
                        best = c;
                    }
                }
                label[y][x] = Some(best);
                member.insert((best, y, x));
                level.push((best, y, x));
            }
        }
    }
    let mut neighbors: Vec<(i64, i64)> = vec![(-1, 0), (0, -1), (0, 1), (1, 0)];
    if eight {
        neighbors = vec![(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];
    }
    let mut depth = 0;
    while !level.is_empty() && max_levels.is_none_or(|m| depth < m) {
        let mut next = Vec::new();
        for &(cls, y, x) in &level {
            for &(dy, dx) in &neighbors {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if !(0..h as i64).contains(&ny) || !(0..w as i64).contains(&nx) {
                    continue;
                }
                let (ny, nx) = (ny as usize, nx as usize);
                if !member.contains(&(cls, ny, nx)) && at(cls, ny, nx) > t_r {
                    member.insert((cls, ny, nx));
                    label[ny][nx].get_or_insert(cls);
                    next.push((cls, ny, nx));
                }
            }
        }
        level = next;
        depth += 1;
    }
    let classes: Vec<Option<usize>> = label.into_iter().flatten().collect();
    (classes.iter().map(Option::is_some).collect(), classes)
}

/// `−(1/B) Σ_n Σ_p Σ_c Y log max(G, floor)` with explicit loops.
pub fn ce(probs: &[f64], onehot: &[f64], b: usize, c: usize, hw: usize) -> f64 {
    let mut total = 0.0;
    for n in 0..b {
        for k in 0..c {
            for p in 0..hw {
                let i = (n * c + k) * hw + p;
                total += onehot[i] * probs[i].max(1e-12).ln();
            }
        }
    }
    -total / b as f64
}

pub fn adversarial(d: &[f64], b: usize) -> f64 {
    -d.iter().map(|&v| v.max(1e-12).ln()).sum::<f64>() / b as f64
}

pub fn discriminator(d_fake: &[f64], bf: usize, d_real: &[f64], br: usize) -> f64 {
    let fake: f64 = d_fake.iter().map(|&v| (1.0 - v).max(1e-12).ln()).sum();
    let real: f64 = d_real.iter().map(|&v| v.max(1e-12).ln()).sum();
    -fake / bf as f64 - real / br as f64
}

/// Self-teaching loss with the pseudo-label found by a first-maximum scan.
pub fn self_teach(probs: &[f64], weights: &[f64], class_weights: &[f64], b: usize, c: usize, hw: usize) -> f64 {
    let mut total = 0.0;
    for n in 0..b {
        for p in 0..hw {
            let mut best = 0;
            for k in 1..c {
                if probs[(n * c + k) * hw + p] > probs[(n * c + best) * hw + p] {
                    best = k;
                }
            }
            let g = probs[(n * c + best) * hw + p];
            total += weights[n * hw + p] * class_weights[best] * g.max(1e-12).ln();
        }
    }
    -total / b as f64
}

pub fn full(l_g1: f64, l_g2_s: f64, l_g2_t: f64, l_g3: f64, w_s: f64, w_t: f64, w_prime: f64) -> f64 {
    l_g1 + w_s * l_g2_s + w_t * l_g2_t + w_prime * l_g3
}

/// IoU from explicit pixel-index sets; `None` when the union is empty.
pub fn set_iou(pred: &[u8], gt: &[u8], classes: usize, void: u8) -> (Vec<Option<f64>>, f64) {
    let mut per_class = Vec::new();
    for k in 0..classes as u8 {
        let in_pred: BTreeSet<usize> = (0..gt.len()).filter(|&i| gt[i] != void && pred[i] == k).collect();
        let in_gt: BTreeSet<usize> = (0..gt.len()).filter(|&i| gt[i] == k).collect();
        let inter = in_pred.intersection(&in_gt).count();
        let union = in_pred.union(&in_gt).count();
        per_class.push((union > 0).then(|| inter as f64 / union as f64));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    (per_class, mean)
}
