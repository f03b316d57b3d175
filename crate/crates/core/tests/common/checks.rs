//! Property and oracle checks shared by the acceptance runner and the
//! ordinary integration tests. Each returns an [`Outcome`] with a one-line
//! summary instead of panicking, so a runner can report every failure.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uda_forge::confmask::{grow_mask, threshold_mask, Connectivity, Mask};
use uda_forge::eval::{miou, ConfusionMatrix};
use uda_forge::losses::{
    loss_adversarial, loss_discriminator, loss_full, loss_self_teach, loss_supervised_ce, LossParts, LossWeights,
};
use uda_forge::tensor::{Graph, Tensor};
use uda_forge::toyscenes::{
    decode_sample, encode_sample, generate_scene, read_image_only, read_sample, write_sample, ClassWeights, Domain,
    LabelMap, SceneError, SceneSpec, VOID,
};
use uda_forge::trainer::{
    poly_lr, train, train_in_memory, Checkpoint, CheckpointError, Preset, TrainConfig, FINAL_CHECKPOINT, LOG_CSV,
};

use super::gradcheck::{composite_cases, max_relative_error, op_cases, random_composition, TOLERANCE};
use super::oracles;

#[derive(Debug, Clone)]
pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Outcome {
            passed,
            detail: detail.into(),
        }
    }
}

/// Every op, every loss and both networks, plus `compositions` random
/// chains of depth at most six, against central differences.
pub fn gradient_suite(compositions: u64) -> Outcome {
    let started = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut failures = Vec::new();
    let mut checked = 0;
    for case in op_cases().into_iter().chain(composite_cases()) {
        let err = max_relative_error(&case.inputs, case.build.as_ref(), case.max_checked, 1);
        checked += 1;
        if err >= TOLERANCE || !err.is_finite() {
            failures.push(format!("{} ({err:.2e})", case.name));
        }
        if err > worst.0 {
            worst = (err, case.name.to_string());
        }
    }
    for seed in 0..compositions {
        let comp = random_composition(seed);
        let err = max_relative_error(&comp.inputs, comp.build.as_ref(), 400, seed);
        checked += 1;
        if err >= TOLERANCE || !err.is_finite() {
            failures.push(format!("composition {seed} [{}] ({err:.2e})", comp.description));
        }
        if err > worst.0 {
            worst = (err, format!("composition {seed}"));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let passed = failures.is_empty() && secs < 60.0;
    let mut detail = format!(
        "{checked} checks, worst relative error {:.2e} ({}), {secs:.1}s",
        worst.0, worst.1
    );
    if !failures.is_empty() {
        detail.push_str(&format!("; failed: {}", failures.join(", ")));
    }
    Outcome::new(passed, detail)
}

/// A random region-growing instance: `[C, H, W]` probabilities peaked
/// enough that some exceed high thresholds.
pub struct GrowInstance {
    pub classes: usize,
    pub h: usize,
    pub w: usize,
    pub probs: Vec<f64>,
    pub confidence: Vec<f64>,
    pub t_u: f64,
    pub t_r: f64,
    pub connectivity: Connectivity,
}

pub fn grow_instance(seed: u64, h: usize, w: usize) -> GrowInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = rng.random_range(2..=5);
    let sharpness = [1.0, 4.0, 12.0, 25.0][rng.random_range(0..4)];
    let plane = h * w;
    let mut probs = vec![0.0; classes * plane];
    for p in 0..plane {
        let logits: Vec<f64> = (0..classes).map(|_| sharpness * rng.random::<f64>()).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for (c, l) in logits.iter().enumerate() {
            probs[c * plane + p] = (l - m).exp() / z;
        }
    }
    let confidence = (0..plane).map(|_| rng.random::<f64>()).collect();
    let t_u = rng.random_range(0.5..0.98);
    let t_r = match rng.random_range(0..3) {
        0 => rng.random_range(0.05..0.5),
        1 => rng.random_range(0.5..0.95),
        _ => 1.0 - 10f64.powf(-rng.random_range(1.0..6.0)),
    };
    let connectivity = if rng.random_bool(0.5) {
        Connectivity::Four
    } else {
        Connectivity::Eight
    };
    GrowInstance {
        classes,
        h,
        w,
        probs,
        confidence,
        t_u,
        t_r,
        connectivity,
    }
}

impl GrowInstance {
    pub fn probs_tensor(&self) -> Tensor {
        Tensor::new(vec![self.classes, self.h, self.w], self.probs.clone()).unwrap()
    }

    pub fn seeds(&self, t_u: f64) -> Mask {
        threshold_mask(&self.confidence, self.h, self.w, t_u)
    }

    pub fn grow(&self, seeds: &Mask, t_r: f64, max_rounds: Option<usize>) -> Mask {
        grow_mask(seeds, &self.probs_tensor(), t_r, self.connectivity, max_rounds)
            .unwrap()
            .mask
    }
}

pub fn region_growing_oracle(instances: u64) -> Outcome {
    let started = Instant::now();
    let mut mismatches = Vec::new();
    let mut grown_total = 0usize;
    let mut growth_instances = 0;
    for seed in 0..instances {
        let inst = grow_instance(seed, 16, 16);
        let seeds = inst.seeds(inst.t_u);
        let rounds = (seed % 5 == 4).then_some((seed % 3) as usize + 1);
        let got = grow_mask(&seeds, &inst.probs_tensor(), inst.t_r, inst.connectivity, rounds).unwrap();
        let (sel, cls) = oracles::bfs_grow(
            seeds.data(),
            &inst.probs,
            inst.classes,
            16,
            16,
            inst.t_r,
            inst.connectivity == Connectivity::Eight,
            rounds,
        );
        let got_cls: Vec<Option<usize>> = got
            .classes
            .data()
            .iter()
            .map(|&c| (c != VOID).then_some(c as usize))
            .collect();
        if got.mask.data() != sel.as_slice() || got_cls != cls {
            mismatches.push(seed);
        }
        grown_total += got.mask.count() - seeds.count();
        if got.mask.count() > seeds.count() {
            growth_instances += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    Outcome::new(
        mismatches.is_empty() && secs < 10.0,
        format!(
            "{instances} instances, {} mismatches {:?}, growth in {growth_instances} ({grown_total} pixels added), {secs:.2}s",
            mismatches.len(),
            &mismatches[..mismatches.len().min(5)]
        ),
    )
}

pub fn mask_monotonicity(instances: u64) -> Outcome {
    let mut violations = Vec::new();
    for seed in 0..instances {
        let inst = grow_instance(10_000 + seed, 16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b): (f64, f64) = (rng.random_range(0.05..0.999), rng.random_range(0.05..0.999));
        let (t_r1, t_r2) = (a.min(b), a.max(b));
        let (a, b): (f64, f64) = (rng.random_range(0.05..0.95), rng.random_range(0.05..0.95));
        let (t_u1, t_u2) = (a.min(b), a.max(b));

        let seeds = inst.seeds(inst.t_u);
        let g1 = inst.grow(&seeds, t_r1, None);
        let g2 = inst.grow(&seeds, t_r2, None);
        if !seeds.is_subset_of(&g1) || !seeds.is_subset_of(&g2) {
            violations.push(format!("{seed}: seeds not kept"));
        }
        if !g2.is_subset_of(&g1) {
            violations.push(format!("{seed}: t_r {t_r1:.3} <= {t_r2:.3} but masks do not nest"));
        }
        let s1 = inst.seeds(t_u1);
        let s2 = inst.seeds(t_u2);
        if !s2.is_subset_of(&s1) {
            violations.push(format!("{seed}: threshold masks do not nest in t_u"));
        }
        // Nesting of grown masks in t_u holds whenever competing regions
        // cannot meet, which a growth threshold above 1/2 guarantees.
        let t_r = t_r2.max(0.5 + 1e-9);
        if !inst.grow(&s2, t_r, None).is_subset_of(&inst.grow(&s1, t_r, None)) {
            violations.push(format!("{seed}: grown masks do not nest in t_u"));
        }
    }
    Outcome::new(
        violations.is_empty(),
        format!(
            "{instances} instances, {} violations{}",
            violations.len(),
            violations.first().map(|v| format!(" (first: {v})")).unwrap_or_default()
        ),
    )
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

fn softmax_planes(rng: &mut ChaCha8Rng, b: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * c * hw];
    for n in 0..b {
        for p in 0..hw {
            let logits: Vec<f64> = (0..c).map(|_| 3.0 * rng.random::<f64>() - 1.5).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for k in 0..c {
                out[(n * c + k) * hw + p] = logits[k].exp() / z;
            }
        }
    }
    out
}

/// Each loss against its scalar-loop oracle, plus linearity of the
/// self-teaching loss in the reliability weights.
pub fn loss_oracles(instances: u64) -> Outcome {
    let mut worst = 0.0f64;
    let mut worst_linearity = 0.0f64;
    let mut failures = Vec::new();
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, c) = (rng.random_range(1..=3), rng.random_range(2..=5));
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let hw = h * w;
        let probs = softmax_planes(&mut rng, b, c, hw);
        let mut onehot = vec![0.0; b * c * hw];
        for n in 0..b {
            for p in 0..hw {
                if rng.random_bool(0.9) {
                    onehot[(n * c + rng.random_range(0..c)) * hw + p] = 1.0;
                }
            }
        }
        let shape = vec![b, c, h, w];
        let d_t: Vec<f64> = (0..b * hw).map(|_| rng.random_range(0.001..0.999)).collect();
        let bf = rng.random_range(1..=4);
        let d_f: Vec<f64> = (0..bf * hw).map(|_| rng.random_range(0.001..0.999)).collect();
        let weights_a: Vec<f64> = (0..b * hw)
            .map(|_| rng.random::<f64>() * rng.random_range(0..2) as f64)
            .collect();
        let weights_b: Vec<f64> = (0..b * hw).map(|_| rng.random::<f64>()).collect();
        let cw: Vec<f64> = (0..c).map(|_| rng.random::<f64>()).collect();
        let lw = LossWeights {
            w_s: rng.random::<f64>(),
            w_t: rng.random::<f64>() * 0.1,
            w_prime: rng.random::<f64>(),
        };
        let class_weights = ClassWeights::from_weights(cw.clone());

        let mut g = Graph::new();
        let pv = g.constant(Tensor::new(shape.clone(), probs.clone()).unwrap());
        let yv = g.constant(Tensor::new(shape.clone(), onehot.clone()).unwrap());
        let dt = g.constant(Tensor::new(vec![b, 1, h, w], d_t.clone()).unwrap());
        let df = g.constant(Tensor::new(vec![bf, 1, h, w], d_f.clone()).unwrap());
        let l1 = loss_supervised_ce(&mut g, pv, yv).unwrap();
        let l2 = loss_adversarial(&mut g, dt).unwrap();
        let ld = loss_discriminator(&mut g, df, dt).unwrap();
        let wa = Tensor::new(vec![b, 1, h, w], weights_a.clone()).unwrap();
        let wb = Tensor::new(vec![b, 1, h, w], weights_b.clone()).unwrap();
        let l3 = loss_self_teach(&mut g, pv, &wa, &class_weights).unwrap();
        let l3b = loss_self_teach(&mut g, pv, &wb, &class_weights).unwrap();
        let (alpha, beta) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let mixed: Vec<f64> = weights_a
            .iter()
            .zip(&weights_b)
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        let l3m = loss_self_teach(
            &mut g,
            pv,
            &Tensor::new(vec![b, 1, h, w], mixed).unwrap(),
            &class_weights,
        )
        .unwrap();
        let l2s = loss_adversarial(&mut g, df).unwrap();
        let parts = LossParts {
            l_g1: l1,
            l_g2_s: Some(l2s),
            l_g2_t: Some(l2),
            l_g3: Some(l3),
        };
        let lf = loss_full(&mut g, &parts, &lw, 10, 5).unwrap();
        let lf_warm = loss_full(&mut g, &parts, &lw, 4, 5).unwrap();

        let v = |x| g.value(x).item();
        let expected = [
            ("ce", v(l1), oracles::ce(&probs, &onehot, b, c, hw)),
            ("adversarial", v(l2), oracles::adversarial(&d_t, b)),
            ("discriminator", v(ld), oracles::discriminator(&d_f, bf, &d_t, b)),
            (
                "self_teach",
                v(l3),
                oracles::self_teach(&probs, &weights_a, &cw, b, c, hw),
            ),
            (
                "full",
                v(lf),
                oracles::full(
                    oracles::ce(&probs, &onehot, b, c, hw),
                    oracles::adversarial(&d_f, bf),
                    oracles::adversarial(&d_t, b),
                    oracles::self_teach(&probs, &weights_a, &cw, b, c, hw),
                    lw.w_s,
                    lw.w_t,
                    lw.w_prime,
                ),
            ),
            (
                "full (warm-up)",
                v(lf_warm),
                oracles::full(
                    oracles::ce(&probs, &onehot, b, c, hw),
                    oracles::adversarial(&d_f, bf),
                    oracles::adversarial(&d_t, b),
                    0.0,
                    lw.w_s,
                    lw.w_t,
                    lw.w_prime,
                ),
            ),
        ];
        for (name, got, want) in expected {
            worst = worst.max(rel(got, want));
            if !close(got, want, 1e-10) {
                failures.push(format!("{seed}/{name}: {got} vs {want}"));
            }
        }
        let lin_want = alpha * v(l3) + beta * v(l3b);
        let lin_err = rel(v(l3m), lin_want);
        worst_linearity = worst_linearity.max(lin_err);
        if !close(v(l3m), lin_want, 1e-12) {
            failures.push(format!("{seed}/linearity: {} vs {lin_want}", v(l3m)));
        }
    }
    Outcome::new(
        failures.is_empty(),
        format!(
            "{instances} instances x 6 losses, worst relative error {worst:.1e}, linearity {worst_linearity:.1e}{}",
            failures
                .first()
                .map(|f| format!("; first failure {f}"))
                .unwrap_or_default()
        ),
    )
}

/// Short training configuration used by the trajectory checks.
pub fn short_config(steps: usize, warmup: usize, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        total_steps: steps,
        warmup_steps: Some(warmup),
        seed,
        checkpoint_every: 0,
        log_wall_time: false,
        ..TrainConfig::default()
    };
    Preset::Full.apply(&mut cfg);
    cfg
}

/// Generator parameters after every step must agree bit for bit with a run
/// whose self-teaching weight is zero, for every step before warm-up ends.
pub fn warmup_equivalence(spec: &SceneSpec, steps: usize, warmup: usize) -> Outcome {
    let source: Vec<_> = (0..6).map(|i| generate_scene(spec, Domain::Source, 100 + i)).collect();
    let target: Vec<_> = (0..6)
        .map(|i| generate_scene(spec, Domain::Target, 200 + i).without_labels())
        .collect();
    let run = |w_prime: f64| {
        let mut cfg = short_config(steps, warmup, 3);
        cfg.loss_weights.w_prime = w_prime;
        let mut snapshots: Vec<Vec<u64>> = Vec::new();
        let out = train_in_memory(&cfg, &source, &target, None, &mut |_, gen| {
            snapshots.push(
                gen.params()
                    .tensors()
                    .iter()
                    .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
                    .collect(),
            );
        })
        .unwrap();
        (snapshots, out.log)
    };
    let (with, log_with) = run(LossWeights::default().w_prime);
    let (without, _) = run(0.0);
    // Step `s` updates G with `w'` gated iff `s < warmup`.
    let identical = (0..warmup).all(|s| with[s] == without[s]);
    let diverges_after = (warmup..steps).any(|s| with[s] != without[s]);
    let zero_column = log_with.records.iter().take(warmup).all(|r| r.l_g3 == 0.0);
    Outcome::new(
        identical && zero_column,
        format!(
            "{warmup} warm-up steps bit-identical: {identical}; l_g3 logged as 0 during warm-up: {zero_column}; trajectories separate after warm-up: {diverges_after}"
        ),
    )
}

/// Trains on a clean target split and on a copy whose label bytes are
/// random garbage, then compares logs and checkpoints byte for byte.
pub fn target_label_firewall(root: &Path, spec: &SceneSpec, steps: usize) -> Outcome {
    super::write_splits(root, spec, [6, 6, 0], 21);
    let clean = root.join("target");
    let garbage = root.join("target_garbage");
    fs::create_dir_all(&garbage).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let label_bytes = spec.height * spec.width;
    let mut corrupted = 0;
    for entry in fs::read_dir(&clean).unwrap() {
        let path = entry.unwrap().path();
        let mut bytes = fs::read(&path).unwrap();
        if path.extension().is_some_and(|e| e == "udas") {
            let n = bytes.len();
            for b in &mut bytes[n - label_bytes..] {
                *b = rng.random();
            }
            corrupted += 1;
        }
        fs::write(garbage.join(path.file_name().unwrap()), bytes).unwrap();
    }
    let labels_unreadable = fs::read_dir(&garbage)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "udas"))
        .any(|e| read_sample(&e.path()).is_err());

    let cfg = short_config(steps, steps / 2, 5);
    let out_clean = root.join("run_clean");
    let out_garbage = root.join("run_garbage");
    let a = train(&cfg, &root.join("source"), &clean, &out_clean, &mut |_, _| {});
    let b = train(&cfg, &root.join("source"), &garbage, &out_garbage, &mut |_, _| {});
    let (Ok(_), Ok(_)) = (a.as_ref(), b.as_ref()) else {
        return Outcome::new(false, format!("training failed: {:?} / {:?}", a.err(), b.err()));
    };
    let same = |f: &str| fs::read(out_clean.join(f)).unwrap() == fs::read(out_garbage.join(f)).unwrap();
    let (log_same, ck_same) = (same(LOG_CSV), same(FINAL_CHECKPOINT));
    Outcome::new(
        log_same && ck_same && corrupted > 0,
        format!(
            "{corrupted} target files with garbage labels (decodable as labeled: {}); TrainLog identical: {log_same}; checkpoint identical: {ck_same}",
            !labels_unreadable
        ),
    )
}

pub fn lr_schedule() -> Outcome {
    let cfg = TrainConfig::default();
    let start = poly_lr(0, &cfg);
    let end = poly_lr(cfg.total_steps, &cfg);
    let seq: Vec<f64> = (0..=cfg.total_steps).map(|s| poly_lr(s, &cfg)).collect();
    let monotone = seq.windows(2).all(|w| w[1] <= w[0]);
    let mid = poly_lr(cfg.total_steps / 2, &cfg);
    let mid_want = (cfg.lr_start - cfg.lr_end) * 0.5f64.powf(cfg.lr_power) + cfg.lr_end;
    let mid_ok = (mid - mid_want).abs() < 1e-12;
    Outcome::new(
        start == 1e-4 && end == 1e-6 && monotone && mid_ok,
        format!(
            "lr(0) = {start:e}, lr({}) = {end:e}, monotone over {} steps: {monotone}, midpoint within 1e-12 of the formula: {mid_ok}",
            cfg.total_steps,
            seq.len()
        ),
    )
}

pub fn miou_oracle(pairs: u64) -> Outcome {
    let mut mismatches = Vec::new();
    for seed in 0..pairs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = rng.random_range(2..=6);
        let (h, w) = (rng.random_range(1..=20), rng.random_range(1..=20));
        // Skewed class draws so some classes are absent or never predicted.
        let used = rng.random_range(1..=c);
        let gt: Vec<u8> = (0..h * w)
            .map(|_| {
                if rng.random_bool(0.1) {
                    VOID
                } else {
                    rng.random_range(0..used) as u8
                }
            })
            .collect();
        let pred: Vec<u8> = gt
            .iter()
            .map(|&g| {
                if g != VOID && rng.random_bool(0.6) {
                    g
                } else {
                    rng.random_range(0..c) as u8
                }
            })
            .collect();
        let mut cm = ConfusionMatrix::new(c);
        cm.accumulate(&LabelMap::new(h, w, pred.clone()), &LabelMap::new(h, w, gt.clone()))
            .unwrap();
        let got = miou(&cm);
        let (per_class, mean) = oracles::set_iou(&pred, &gt, c, VOID);
        if got.per_class != per_class || got.mean != mean {
            mismatches.push(seed);
        }
    }
    Outcome::new(
        mismatches.is_empty(),
        format!("{pairs} pairs, {} mismatches {:?}", mismatches.len(), mismatches),
    )
}

/// Lossless round trips and structured errors for damaged files.
pub fn formats(dir: &Path) -> Outcome {
    let mut problems = Vec::new();
    let spec = SceneSpec::default();
    for (i, domain) in [Domain::Source, Domain::Target].into_iter().enumerate() {
        let sample = generate_scene(&spec, domain, 77 + i as u64);
        let path = dir.join(format!("s{i}.udas"));
        write_sample(&sample, &path).unwrap();
        match read_sample(&path) {
            Ok(back) if back == sample => {}
            Ok(_) => problems.push(format!("{domain:?} sample changed in round trip")),
            Err(e) => problems.push(format!("{domain:?} sample unreadable: {e}")),
        }
        match read_image_only(&path) {
            Ok(u) if u.image == sample.image => {}
            _ => problems.push("image-only read differs".into()),
        }
        let bytes = encode_sample(&sample);
        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        if !matches!(decode_sample(&path, &bad), Err(SceneError::BadMagic { .. })) {
            problems.push("sample with bad magic not rejected as BadMagic".into());
        }
        for cut in [0, 5, 20, 27, bytes.len() / 2, bytes.len() - 1] {
            let r = std::panic::catch_unwind(|| decode_sample(&path, &bytes[..cut]));
            match r {
                Ok(Err(SceneError::Truncated { .. })) => {}
                Ok(other) => problems.push(format!("sample cut at {cut}: {:?}", other.err())),
                Err(_) => problems.push(format!("sample cut at {cut} panicked")),
            }
        }
    }

    let g = uda_forge::nets::GeneratorParams::init(5, 1);
    let d = uda_forge::nets::DiscriminatorParams::init(5, 2);
    let ck = Checkpoint::from_networks(&g, Some(&d), 123);
    let path = dir.join("c.udac");
    ck.write(&path).unwrap();
    match Checkpoint::read(&path) {
        Ok(back) => {
            let bits = |c: &Checkpoint| -> Vec<u64> {
                c.tensors
                    .iter()
                    .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
                    .collect()
            };
            if back != ck || bits(&back) != bits(&ck) || back.generator(5).ok() != Some(g.clone()) {
                problems.push("checkpoint changed in round trip".into());
            }
        }
        Err(e) => problems.push(format!("checkpoint unreadable: {e}")),
    }
    let bytes = ck.encode();
    let mut bad = bytes.clone();
    bad[2] = b'X';
    if !matches!(Checkpoint::decode(&path, &bad), Err(CheckpointError::BadMagic { .. })) {
        problems.push("checkpoint with bad magic not rejected as BadMagic".into());
    }
    for cut in [0, 4, 9, 40, bytes.len() / 3, bytes.len() - 3] {
        let r = std::panic::catch_unwind(|| Checkpoint::decode(&path, &bytes[..cut]));
        match r {
            Ok(Err(CheckpointError::Truncated { .. })) => {}
            Ok(other) => problems.push(format!("checkpoint cut at {cut}: {:?}", other.err())),
            Err(_) => problems.push(format!("checkpoint cut at {cut} panicked")),
        }
    }
    Outcome::new(
        problems.is_empty(),
        if problems.is_empty() {
            "samples (both domains) and checkpoints round-trip bit-exactly; bad magic and 12 truncations give structured errors".to_string()
        } else {
            problems.join("; ")
        },
    )
}
