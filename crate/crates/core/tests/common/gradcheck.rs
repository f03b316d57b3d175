//! Central finite-difference checks of the tape's reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use uda_forge::tensor::{Graph, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

pub fn randn(shape: Vec<usize>, rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, data).unwrap()
}

pub fn uniform(shape: Vec<usize>, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Builds the checked function from leaf variables.
pub type Builder<'a> = dyn Fn(&mut Graph, &[Var]) -> Var + 'a;

fn projected_loss(
    inputs: &[Tensor],
    build: &Builder<'_>,
    projection: Option<&Tensor>,
    grad: bool,
) -> (Graph, Vec<Var>, Var, Tensor) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), grad)).collect();
    let out = build(&mut g, &vars);
    let r = match projection {
        Some(r) => r.clone(),
        None => {
            // Fixed pseudo-random projection so every output element matters.
            // Mixed signs keep constant sums (softmax rows) from inflating the
            // loss and with it the rounding noise of the differences.
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
            let shape = g.value(out).shape().to_vec();
            let mut r = uniform(shape, &mut rng, 0.5, 1.5);
            for v in r.data_mut() {
                if rng.random_bool(0.5) {
                    *v = -*v;
                }
            }
            r
        }
    };
    let rv = g.constant(r.clone());
    let prod = g.mul(out, rv).unwrap();
    let loss = g.sum(prod);
    (g, vars, loss, r)
}

/// Largest element-wise relative error between analytic and central-difference
/// gradients over all inputs. Inputs with more than `max_checked` elements are
/// probed at that many pseudo-randomly chosen positions.
///
/// Relative error is `|a − n| / max(|a|, |n|, 1e-3·‖n‖∞, 1e-10)`, where the
/// last two terms keep near-zero entries from dividing by rounding noise.
pub fn max_relative_error(inputs: &[Tensor], build: &Builder<'_>, max_checked: usize, seed: u64) -> f64 {
    let (mut g, vars, loss, r) = projected_loss(inputs, build, None, true);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; g.value(v).numel()])
        })
        .collect();

    let eval = |inputs: &[Tensor]| -> f64 {
        let (g, _, loss, _) = projected_loss(inputs, build, Some(&r), false);
        g.value(loss).item()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let positions: Vec<usize> = if n <= max_checked {
            (0..n).collect()
        } else {
            (0..max_checked).map(|_| rng.random_range(0..n)).collect()
        };
        let mut numeric = Vec::with_capacity(positions.len());
        for &j in &positions {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            numeric.push((eval(&plus) - eval(&minus)) / (2.0 * STEP));
        }
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (&j, &num) in positions.iter().zip(&numeric) {
            let a = analytic[i][j];
            let denom = a.abs().max(num.abs()).max(1e-3 * scale).max(1e-10);
            worst = worst.max((a - num).abs() / denom);
        }
    }
    worst
}

/// A named single-op check.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Box<Builder<'static>>,
    pub max_checked: usize,
}

/// One case per differentiable operation (and per distinct configuration of
/// the more intricate ones).
pub fn op_cases() -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut cases = Vec::new();
    let mut push = |name, inputs, build: Box<Builder<'static>>| {
        cases.push(OpCase {
            name,
            inputs,
            build,
            max_checked: 400,
        })
    };

    for (name, k, stride, pad) in [
        ("conv2d 3x3 s1 p1", 3, 1, 1),
        ("conv2d 3x3 s2 p1", 3, 2, 1),
        ("conv2d 4x4 s2 p1", 4, 2, 1),
        ("conv2d 1x1 s1 p0", 1, 1, 0),
        ("conv2d 3x3 s1 p0", 3, 1, 0),
    ] {
        let x = randn(vec![2, 3, 6, 6], &mut rng, 1.0);
        let w = randn(vec![4, 3, k, k], &mut rng, 0.5);
        let b = randn(vec![4], &mut rng, 0.5);
        push(
            name,
            vec![x, w, b],
            Box::new(move |g, v| g.conv2d(v[0], v[1], v[2], stride, pad).unwrap()),
        );
    }
    for slope in [0.1, 0.2] {
        let x = away_from_zero(randn(vec![2, 3, 4, 4], &mut rng, 1.0));
        push(
            if slope == 0.1 {
                "leaky_relu 0.1"
            } else {
                "leaky_relu 0.2"
            },
            vec![x],
            Box::new(move |g, v| g.leaky_relu(v[0], slope)),
        );
    }
    push(
        "sigmoid",
        vec![randn(vec![2, 2, 3, 3], &mut rng, 2.0)],
        Box::new(|g, v| g.sigmoid(v[0])),
    );
    push(
        "softmax_channels",
        vec![randn(vec![2, 5, 3, 3], &mut rng, 2.0)],
        Box::new(|g, v| g.softmax_channels(v[0]).unwrap()),
    );
    for (name, ih, iw, oh, ow) in [
        ("bilinear_upsample x2", 4, 4, 8, 8),
        ("bilinear_upsample x8", 2, 2, 16, 16),
        ("bilinear_upsample 2x3 to 5x7", 2, 3, 5, 7),
    ] {
        push(
            name,
            vec![randn(vec![2, 2, ih, iw], &mut rng, 1.0)],
            Box::new(move |g, v| g.bilinear_upsample(v[0], oh, ow).unwrap()),
        );
    }
    push(
        "ln_clamped",
        vec![uniform(vec![2, 3, 3, 3], &mut rng, 0.05, 1.0)],
        Box::new(|g, v| g.ln_clamped(v[0], 1e-12)),
    );
    push(
        "affine",
        vec![randn(vec![2, 3, 3], &mut rng, 1.0)],
        Box::new(|g, v| g.affine(v[0], -1.5, 0.25)),
    );
    push(
        "scale",
        vec![randn(vec![4, 3], &mut rng, 1.0)],
        Box::new(|g, v| g.scale(v[0], 2.5)),
    );
    push(
        "mul",
        vec![randn(vec![2, 3, 3], &mut rng, 1.0), randn(vec![2, 3, 3], &mut rng, 1.0)],
        Box::new(|g, v| g.mul(v[0], v[1]).unwrap()),
    );
    push(
        "mul (same operand)",
        vec![randn(vec![2, 3, 3], &mut rng, 1.0)],
        Box::new(|g, v| g.mul(v[0], v[0]).unwrap()),
    );
    push(
        "sum",
        vec![randn(vec![2, 2, 3, 3], &mut rng, 1.0)],
        Box::new(|g, v| g.sum(v[0])),
    );
    push(
        "linear",
        vec![randn(vec![3, 4], &mut rng, 1.0), randn(vec![3, 4], &mut rng, 1.0)],
        Box::new(|g, v| g.linear(&[(v[0], 0.7), (v[1], -2.0), (v[0], 0.5)]).unwrap()),
    );
    cases
}

/// Nudges values off the leaky-relu kink so the difference quotient is valid.
fn away_from_zero(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        if v.abs() < 1e-2 {
            *v = if *v < 0.0 { -0.1 } else { 0.1 };
        }
    }
    t
}

#[derive(Debug, Clone, Copy)]
enum Step {
    Conv {
        k: usize,
        stride: usize,
        pad: usize,
        out: usize,
    },
    Leaky(f64),
    Sigmoid,
    Softmax,
    Upsample,
    Affine,
    Scale,
    MulLeaf,
    Square,
    LinearLeaf,
    Ln,
}

/// A random composition of at most six ops over a `[2, C, S, S]` input with
/// its own parameter leaves.
pub struct Composition {
    pub description: String,
    pub inputs: Vec<Tensor>,
    pub build: Box<Builder<'static>>,
}

pub fn random_composition(seed: u64) -> Composition {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.random_range(1..=6);
    let c0 = rng.random_range(1..=3);
    let s0 = rng.random_range(3..=6);
    let mut inputs = vec![randn(vec![2, c0, s0, s0], &mut rng, 1.0)];
    let (mut c, mut s) = (c0, s0);
    let mut positive = false;
    let mut plan: Vec<(Step, Vec<usize>)> = Vec::new();
    while plan.len() < depth {
        let step = match rng.random_range(0..11) {
            0 => {
                let k = [1, 3, 4][rng.random_range(0..3)];
                let stride = if s >= 6 { rng.random_range(1..=2) } else { 1 };
                let pad = if k == 1 { 0 } else { 1 };
                let out_s = (s + 2 * pad - k) / stride + 1;
                if out_s < 2 {
                    continue;
                }
                Step::Conv {
                    k,
                    stride,
                    pad,
                    out: rng.random_range(1..=4),
                }
            }
            1 => Step::Leaky([0.1, 0.2][rng.random_range(0..2)]),
            2 => Step::Sigmoid,
            3 if c >= 2 => Step::Softmax,
            4 if s <= 6 => Step::Upsample,
            5 => Step::Affine,
            6 => Step::Scale,
            7 => Step::MulLeaf,
            8 => Step::Square,
            9 => Step::LinearLeaf,
            10 if positive => Step::Ln,
            _ => continue,
        };
        let mut leaves = Vec::new();
        match step {
            Step::Conv { k, stride, pad, out } => {
                leaves.push(inputs.len());
                inputs.push(randn(vec![out, c, k, k], &mut rng, 0.6));
                leaves.push(inputs.len());
                inputs.push(randn(vec![out], &mut rng, 0.3));
                s = (s + 2 * pad - k) / stride + 1;
                c = out;
                positive = false;
            }
            Step::Leaky(_) | Step::Affine | Step::Scale | Step::LinearLeaf => positive = false,
            Step::Sigmoid | Step::Softmax => positive = true,
            Step::Upsample => s = s * 2 + 1,
            Step::MulLeaf => {
                leaves.push(inputs.len());
                inputs.push(uniform(vec![2, c, s, s], &mut rng, 0.5, 1.5));
            }
            Step::Square => {}
            Step::Ln => positive = false,
        }
        if let Step::LinearLeaf = step {
            leaves.push(inputs.len());
            inputs.push(randn(vec![2, c, s, s], &mut rng, 1.0));
        }
        plan.push((step, leaves));
    }
    let description = plan
        .iter()
        .map(|(s, _)| format!("{s:?}"))
        .collect::<Vec<_>>()
        .join(" -> ");
    let build = move |g: &mut Graph, v: &[Var]| -> Var {
        let mut x = v[0];
        for (step, leaves) in &plan {
            x = match *step {
                Step::Conv { stride, pad, .. } => g.conv2d(x, v[leaves[0]], v[leaves[1]], stride, pad).unwrap(),
                Step::Leaky(slope) => g.leaky_relu(x, slope),
                Step::Sigmoid => g.sigmoid(x),
                Step::Softmax => g.softmax_channels(x).unwrap(),
                Step::Upsample => {
                    let [_, _, h, w] = g.value(x).dims4("test").unwrap();
                    g.bilinear_upsample(x, 2 * h + 1, 2 * w + 1).unwrap()
                }
                Step::Affine => g.affine(x, 0.8, -0.1),
                Step::Scale => g.scale(x, -1.3),
                Step::MulLeaf => g.mul(x, v[leaves[0]]).unwrap(),
                Step::Square => g.mul(x, x).unwrap(),
                Step::LinearLeaf => g.linear(&[(x, 1.0), (v[leaves[0]], 0.5)]).unwrap(),
                Step::Ln => g.ln_clamped(x, 1e-12),
            };
        }
        x
    };
    Composition {
        description,
        inputs,
        build: Box::new(build),
    }
}

/// Losses and the two networks, checked through the same machinery. The
/// network cases probe a sample of parameter positions.
pub fn composite_cases() -> Vec<OpCase> {
    use uda_forge::losses::{loss_adversarial, loss_discriminator, loss_self_teach, loss_supervised_ce};
    use uda_forge::nets::{discriminator_forward, generator_forward, DiscriminatorParams, GeneratorParams};
    use uda_forge::toyscenes::ClassWeights;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut cases = Vec::new();

    let logits = randn(vec![2, 4, 3, 3], &mut rng, 1.5);
    let mut onehot = vec![0.0; 2 * 4 * 9];
    for n in 0..2 {
        for p in 0..9 {
            onehot[(n * 4 + rng.random_range(0..4)) * 9 + p] = 1.0;
        }
    }
    let onehot = Tensor::new(vec![2, 4, 3, 3], onehot).unwrap();
    cases.push(OpCase {
        name: "loss_supervised_ce",
        inputs: vec![logits.clone()],
        build: Box::new(move |g, v| {
            let p = g.softmax_channels(v[0]).unwrap();
            let y = g.constant(onehot.clone());
            loss_supervised_ce(g, p, y).unwrap()
        }),
        max_checked: 400,
    });
    cases.push(OpCase {
        name: "loss_adversarial",
        inputs: vec![randn(vec![2, 1, 4, 4], &mut rng, 1.5)],
        build: Box::new(|g, v| {
            let d = g.sigmoid(v[0]);
            loss_adversarial(g, d).unwrap()
        }),
        max_checked: 400,
    });
    cases.push(OpCase {
        name: "loss_discriminator",
        inputs: vec![
            randn(vec![4, 1, 3, 3], &mut rng, 1.5),
            randn(vec![2, 1, 3, 3], &mut rng, 1.5),
        ],
        build: Box::new(|g, v| {
            let f = g.sigmoid(v[0]);
            let r = g.sigmoid(v[1]);
            loss_discriminator(g, f, r).unwrap()
        }),
        max_checked: 400,
    });
    let weights = uniform(vec![2, 1, 3, 3], &mut rng, 0.0, 1.0);
    let cw = ClassWeights::from_weights(vec![0.2, 0.9, 0.5, 0.7]);
    cases.push(OpCase {
        name: "loss_self_teach",
        inputs: vec![randn(vec![2, 4, 3, 3], &mut rng, 2.0)],
        build: Box::new(move |g, v| {
            let p = g.softmax_channels(v[0]).unwrap();
            loss_self_teach(g, p, &weights, &cw).unwrap()
        }),
        max_checked: 400,
    });

    let gen = GeneratorParams::init(3, 5);
    let mut inputs = vec![uniform(vec![1, 3, 16, 16], &mut rng, 0.0, 1.0)];
    inputs.extend(gen.params().tensors().iter().cloned());
    cases.push(OpCase {
        name: "generator_forward",
        inputs,
        build: Box::new(move |g, v| forward_with(g, &gen, &v[1..], v[0], generator_forward)),
        max_checked: 24,
    });

    let disc = DiscriminatorParams::init(3, 6);
    let mut inputs = vec![uniform(vec![1, 3, 32, 32], &mut rng, 0.0, 1.0)];
    inputs.extend(disc.params().tensors().iter().cloned());
    cases.push(OpCase {
        name: "discriminator_forward",
        inputs,
        build: Box::new(move |g, v| forward_with(g, &disc, &v[1..], v[0], discriminator_forward)),
        max_checked: 24,
    });
    cases
}

/// Runs a network forward with its parameters bound to existing leaves.
fn forward_with<P>(
    g: &mut Graph,
    params: &P,
    leaves: &[Var],
    input: Var,
    forward: fn(&mut Graph, &P, &uda_forge::nets::Bound, Var) -> Result<Var, uda_forge::nets::NetError>,
) -> Var {
    let bound = uda_forge::nets::Bound::from_vars(leaves.to_vec());
    forward(g, params, &bound, input).unwrap()
}
