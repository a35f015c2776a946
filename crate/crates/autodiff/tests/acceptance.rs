//! Acceptance: reverse-mode gradients of every op match central finite
//! differences of an independent f64 reference, over randomized inputs.
//!
//! The reference implementations below are deliberately written from the
//! mathematical definitions (plain f64 loops) and never call into the
//! library's forward path.

use occa_autodiff::{Graph, Tensor};
use std::time::Instant;

const SEEDS: u64 = 100;
const FD_STEP: f64 = 1e-3;
const TOL: f64 = 1e-4;

// ── tiny deterministic rng (test-only) ──────────────────────────────

struct Rng(u64);

impl Rng {
    fn new(seed: u64) -> Self {
        Rng(seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1))
    }
    fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }
    fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        let u = (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        lo + (hi - lo) * u as f32
    }
}

#[derive(Clone, Copy)]
enum Domain {
    /// [-2, 2]
    Signed,
    /// [-2, 2] excluding a band around the listed kink points
    AwayFrom(&'static [f32]),
    /// [0.5, 2]
    Positive,
    /// magnitude in [0.5, 2], random sign
    NonZero,
    /// {0, 1}
    Binary,
}

fn sample(rng: &mut Rng, d: Domain) -> f32 {
    match d {
        Domain::Signed => rng.uniform(-2.0, 2.0),
        Domain::AwayFrom(kinks) => loop {
            let v = rng.uniform(-2.0, 2.0);
            if kinks.iter().all(|k| (v - k).abs() > 0.02) {
                return v;
            }
        },
        Domain::Positive => rng.uniform(0.5, 2.0),
        Domain::NonZero => {
            let v = rng.uniform(0.5, 2.0);
            if rng.next_u64() & 1 == 0 {
                v
            } else {
                -v
            }
        }
        Domain::Binary => {
            if rng.next_u64() & 1 == 0 {
                0.0
            } else {
                1.0
            }
        }
    }
}

struct Case {
    name: &'static str,
    /// (shape, domain, differentiable) per input
    inputs: Vec<(Vec<usize>, Domain, bool)>,
    /// forward through the library, returning the op output
    forward: Box<dyn Fn(&mut Graph, &[Tensor]) -> Tensor>,
    /// f64 reference of the same function
    reference: Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>,
}

/// Weighted sum collapses the op output to a scalar so a single backward
/// pass yields every input gradient.
fn weighted_loss(g: &mut Graph, y: &Tensor, w: &[f32]) -> Tensor {
    let wt = Tensor::from_vec(w.to_vec(), &[y.numel()]);
    let prod = g.mul(&y.reshaped(&[y.numel()]), &wt);
    g.sum(&prod)
}

fn check_case(case: &Case, seed: u64) -> f64 {
    let mut rng = Rng::new(seed * 1000 + case.name.len() as u64);
    let inputs: Vec<Vec<f32>> = case
        .inputs
        .iter()
        .map(|(shape, d, _)| (0..shape.iter().product()).map(|_| sample(&mut rng, *d)).collect())
        .collect();

    // library forward + backward
    let mut g = Graph::new();
    let tensors: Vec<Tensor> = inputs
        .iter()
        .zip(case.inputs.iter())
        .map(|(data, (shape, _, diff))| {
            let t = Tensor::from_vec(data.clone(), shape);
            if *diff {
                g.leaf(&t)
            } else {
                t
            }
        })
        .collect();
    let y = (case.forward)(&mut g, &tensors);
    let w: Vec<f32> = (0..y.numel()).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let loss = weighted_loss(&mut g, &y, &w);
    g.backward(&loss);

    // f64 oracle: central differences of the reference
    let loss64 = |xs: &[Vec<f64>]| -> f64 {
        let out = (case.reference)(xs);
        out.iter().zip(w.iter()).map(|(v, wi)| v * *wi as f64).sum()
    };
    let xs64: Vec<Vec<f64>> = inputs.iter().map(|v| v.iter().map(|&x| x as f64).collect()).collect();

    let mut worst: f64 = 0.0;
    for (ti, (_, _, diff)) in case.inputs.iter().enumerate() {
        if !diff {
            continue;
        }
        let grad = g
            .grad(&tensors[ti])
            .unwrap_or_else(|| panic!("{}: no gradient for input {}", case.name, ti));
        for i in 0..xs64[ti].len() {
            let mut plus = xs64.clone();
            plus[ti][i] += FD_STEP;
            let mut minus = xs64.clone();
            minus[ti][i] -= FD_STEP;
            let fd = (loss64(&plus) - loss64(&minus)) / (2.0 * FD_STEP);
            let got = grad[i] as f64;
            let rel = (got - fd).abs() / fd.abs().max(got.abs()).max(1.0);
            if rel > worst {
                worst = rel;
            }
            assert!(
                rel < TOL,
                "{} seed {} input {} coord {}: grad {} vs fd {} (rel {:.2e})",
                case.name,
                seed,
                ti,
                i,
                got,
                fd,
                rel
            );
        }
    }
    worst
}

// ── f64 references ──────────────────────────────────────────────────

fn ref_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

fn ref_conv2d(
    input: &[f64],
    kernel: &[f64],
    bias: &[f64],
    c: usize,
    h: usize,
    w: usize,
    o: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; o * h * w];
    for oc in 0..o {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut s = bias[oc];
                for ic in 0..c {
                    for ky in -1..=1isize {
                        for kx in -1..=1isize {
                            let (sy, sx) = (y + ky, x + kx);
                            if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                continue;
                            }
                            s += input[ic * h * w + sy as usize * w + sx as usize]
                                * kernel[((oc * c + ic) * 3 + (ky + 1) as usize) * 3
                                    + (kx + 1) as usize];
                        }
                    }
                }
                out[oc * h * w + (y as usize) * w + x as usize] = s;
            }
        }
    }
    out
}

fn ref_upsample2x(input: &[f64], c: usize, h: usize, w: usize, bilinear: bool) -> Vec<f64> {
    let (oh, ow) = (h * 2, w * 2);
    let taps = |dst: usize, len: usize| -> [(usize, f64); 2] {
        let s = (dst as f64 + 0.5) / 2.0 - 0.5;
        if s < 0.0 {
            return [(0, 1.0), (0, 0.0)];
        }
        let i0 = (s.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        let f = s - s.floor();
        [(i0, 1.0 - f), (i1, f)]
    };
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out[ch * oh * ow + y * ow + x] = if bilinear {
                    let (ty, tx) = (taps(y, h), taps(x, w));
                    let mut v = 0.0;
                    for (yi, wy) in ty {
                        for (xi, wx) in tx {
                            v += wy * wx * input[ch * h * w + yi * w + xi];
                        }
                    }
                    v
                } else {
                    input[ch * h * w + (y / 2) * w + x / 2]
                };
            }
        }
    }
    out
}

fn elementwise_case(
    name: &'static str,
    domain: Domain,
    fwd: fn(&mut Graph, &Tensor) -> Tensor,
    rf: fn(f64) -> f64,
) -> Case {
    Case {
        name,
        inputs: vec![(vec![7], domain, true)],
        forward: Box::new(move |g, xs| fwd(g, &xs[0])),
        reference: Box::new(move |xs| xs[0].iter().map(|&v| rf(v)).collect()),
    }
}

fn binary_case(
    name: &'static str,
    b_domain: Domain,
    fwd: fn(&mut Graph, &Tensor, &Tensor) -> Tensor,
    rf: fn(f64, f64) -> f64,
) -> Case {
    Case {
        name,
        inputs: vec![(vec![6], Domain::Signed, true), (vec![6], b_domain, true)],
        forward: Box::new(move |g, xs| fwd(g, &xs[0], &xs[1])),
        reference: Box::new(move |xs| {
            xs[0].iter().zip(xs[1].iter()).map(|(&a, &b)| rf(a, b)).collect()
        }),
    }
}

fn cases() -> Vec<Case> {
    let mut cases: Vec<Case> = vec![
        binary_case("add", Domain::Signed, |g, a, b| g.add(a, b), |a, b| a + b),
        binary_case("sub", Domain::Signed, |g, a, b| g.sub(a, b), |a, b| a - b),
        binary_case("mul", Domain::Signed, |g, a, b| g.mul(a, b), |a, b| a * b),
        binary_case("div", Domain::NonZero, |g, a, b| g.div(a, b), |a, b| a / b),
        elementwise_case("neg", Domain::Signed, |g, x| g.neg(x), |v| -v),
        elementwise_case("exp", Domain::Signed, |g, x| g.exp(x), f64::exp),
        elementwise_case("log", Domain::Positive, |g, x| g.log(x), f64::ln),
        elementwise_case("relu", Domain::AwayFrom(&[0.0]), |g, x| g.relu(x), |v| v.max(0.0)),
        elementwise_case("sigmoid", Domain::Signed, |g, x| g.sigmoid(x), |v| 1.0 / (1.0 + (-v).exp())),
        elementwise_case("tanh", Domain::Signed, |g, x| g.tanh(x), f64::tanh),
        elementwise_case("softplus", Domain::Signed, |g, x| g.softplus(x), |v| v.exp().ln_1p()),
        elementwise_case("abs", Domain::AwayFrom(&[0.0]), |g, x| g.abs(x), f64::abs),
        elementwise_case("powi2", Domain::Signed, |g, x| g.powi(x, 2), |v| v * v),
        elementwise_case("powi3", Domain::Signed, |g, x| g.powi(x, 3), |v| v * v * v),
        elementwise_case(
            "clamp01",
            Domain::AwayFrom(&[0.0, 1.0]),
            |g, x| g.clamp01(x),
            |v| v.clamp(0.0, 1.0),
        ),
        elementwise_case("scale", Domain::Signed, |g, x| g.scale(x, 1.7), |v| v * 1.7),
        elementwise_case("add_const", Domain::Signed, |g, x| g.add_const(x, 0.3), |v| v + 0.3),
    ];

    cases.push(Case {
        name: "add_scalar_broadcast",
        inputs: vec![(vec![6], Domain::Signed, true), (vec![1], Domain::Signed, true)],
        forward: Box::new(|g, xs| g.add(&xs[0], &xs[1])),
        reference: Box::new(|xs| xs[0].iter().map(|&a| a + xs[1][0]).collect()),
    });
    cases.push(Case {
        name: "mul_scalar_broadcast",
        inputs: vec![(vec![1], Domain::Signed, true), (vec![6], Domain::Signed, true)],
        forward: Box::new(|g, xs| g.mul(&xs[0], &xs[1])),
        reference: Box::new(|xs| xs[1].iter().map(|&b| xs[0][0] * b).collect()),
    });
    cases.push(Case {
        name: "matmul_4x5_5x3",
        inputs: vec![(vec![4, 5], Domain::Signed, true), (vec![5, 3], Domain::Signed, true)],
        forward: Box::new(|g, xs| g.matmul(&xs[0], &xs[1])),
        reference: Box::new(|xs| ref_matmul(&xs[0], &xs[1], 4, 5, 3)),
    });
    cases.push(Case {
        name: "conv2d_2x8x8",
        inputs: vec![
            (vec![2, 8, 8], Domain::Signed, true),
            (vec![4, 2, 3, 3], Domain::Signed, true),
            (vec![4], Domain::Signed, true),
        ],
        forward: Box::new(|g, xs| g.conv2d(&xs[0], &xs[1], Some(&xs[2]))),
        reference: Box::new(|xs| ref_conv2d(&xs[0], &xs[1], &xs[2], 2, 8, 8, 4)),
    });
    cases.push(Case {
        name: "upsample2x_nearest",
        inputs: vec![(vec![2, 3, 4], Domain::Signed, true)],
        forward: Box::new(|g, xs| g.upsample2x_nearest(&xs[0])),
        reference: Box::new(|xs| ref_upsample2x(&xs[0], 2, 3, 4, false)),
    });
    cases.push(Case {
        name: "upsample2x_bilinear",
        inputs: vec![(vec![2, 3, 4], Domain::Signed, true)],
        forward: Box::new(|g, xs| g.upsample2x_bilinear(&xs[0])),
        reference: Box::new(|xs| ref_upsample2x(&xs[0], 2, 3, 4, true)),
    });
    cases.push(Case {
        name: "tile_rows",
        inputs: vec![(vec![5], Domain::Signed, true)],
        forward: Box::new(|g, xs| g.tile_rows(&xs[0], 4)),
        reference: Box::new(|xs| {
            let mut out = Vec::new();
            for _ in 0..4 {
                out.extend_from_slice(&xs[0]);
            }
            out
        }),
    });
    cases.push(Case {
        name: "concat_then_slice",
        inputs: vec![(vec![3, 2], Domain::Signed, true), (vec![3, 4], Domain::Signed, true)],
        forward: Box::new(|g, xs| {
            let cat = g.concat_cols(&[&xs[0], &xs[1]]);
            g.slice_cols(&cat, 1, 3)
        }),
        reference: Box::new(|xs| {
            let mut out = Vec::new();
            for r in 0..3 {
                let row = [xs[0][r * 2], xs[0][r * 2 + 1], xs[1][r * 4], xs[1][r * 4 + 1], xs[1][r * 4 + 2], xs[1][r * 4 + 3]];
                out.extend_from_slice(&row[1..4]);
            }
            out
        }),
    });
    cases.push(Case {
        name: "slice_rows",
        inputs: vec![(vec![5, 3], Domain::Signed, true)],
        forward: Box::new(|g, xs| g.slice_rows(&xs[0], 1, 3)),
        reference: Box::new(|xs| xs[0][3..12].to_vec()),
    });
    cases.push(Case {
        name: "max_rows",
        inputs: vec![(vec![5, 3], Domain::Signed, true)],
        forward: Box::new(|g, xs| g.max_rows(&xs[0])),
        reference: Box::new(|xs| {
            (0..3)
                .map(|c| (0..5).map(|r| xs[0][r * 3 + c]).fold(f64::NEG_INFINITY, f64::max))
                .collect()
        }),
    });
    cases.push(Case {
        name: "sum",
        inputs: vec![(vec![9], Domain::Signed, true)],
        forward: Box::new(|g, xs| g.sum(&xs[0])),
        reference: Box::new(|xs| vec![xs[0].iter().sum()]),
    });
    cases.push(Case {
        name: "mean",
        inputs: vec![(vec![9], Domain::Signed, true)],
        forward: Box::new(|g, xs| g.mean(&xs[0])),
        reference: Box::new(|xs| vec![xs[0].iter().sum::<f64>() / 9.0]),
    });
    cases.push(Case {
        name: "bce_with_logits",
        inputs: vec![(vec![8], Domain::Signed, true), (vec![8], Domain::Binary, false)],
        forward: Box::new(|g, xs| g.bce_with_logits(&xs[0], &xs[1])),
        reference: Box::new(|xs| {
            let n = xs[0].len() as f64;
            vec![xs[0]
                .iter()
                .zip(xs[1].iter())
                .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
                .sum::<f64>()
                / n]
        }),
    });
    // composition: two-layer MLP with bias tiling and mse head
    cases.push(Case {
        name: "mlp_composition",
        inputs: vec![
            (vec![4, 3], Domain::Signed, true),
            (vec![3, 5], Domain::Signed, true),
            (vec![5], Domain::Signed, true),
            (vec![5, 2], Domain::Signed, true),
            (vec![4, 2], Domain::Signed, false),
        ],
        forward: Box::new(|g, xs| {
            let h = g.matmul(&xs[0], &xs[1]);
            let b = g.tile_rows(&xs[2], 4);
            let hb = g.add(&h, &b);
            let a = g.tanh(&hb);
            let o = g.matmul(&a, &xs[3]);
            let s = g.sigmoid(&o);
            g.mse_loss(&s, &xs[4])
        }),
        reference: Box::new(|xs| {
            let h = ref_matmul(&xs[0], &xs[1], 4, 3, 5);
            let a: Vec<f64> = h
                .iter()
                .enumerate()
                .map(|(i, &v)| (v + xs[2][i % 5]).tanh())
                .collect();
            let o = ref_matmul(&a, &xs[3], 4, 5, 2);
            let s: Vec<f64> = o.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
            let mse =
                s.iter().zip(xs[4].iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 8.0;
            vec![mse]
        }),
    });
    cases
}

#[test]
fn acceptance_autodiff_gradients_match_finite_differences() {
    let t0 = Instant::now();
    let cases = cases();
    let mut worst: f64 = 0.0;
    let mut worst_name = "";
    for seed in 0..SEEDS {
        for case in &cases {
            // relu kinks: skip seeds whose fd interval straddles a kink is
            // handled by the sampling domain, so every seed is checked.
            let rel = check_case(case, seed);
            if rel > worst {
                worst = rel;
                worst_name = case.name;
            }
        }
    }
    let dt = t0.elapsed();
    println!(
        "[PASS] autodiff gradcheck: {} ops x {} seeds, worst rel err {:.2e} ({}) in {:.1}s (< 120s)",
        cases.len(),
        SEEDS,
        worst,
        worst_name,
        dt.as_secs_f64()
    );
    assert!(dt.as_secs_f64() < 120.0, "gradcheck took {:.1}s", dt.as_secs_f64());
}

#[test]
fn acceptance_backward_determinism() {
    let grads = || {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::from_vec((0..12).map(|i| (i as f32 * 0.37).sin()).collect(), &[3, 4]));
        let w = g.leaf(&Tensor::from_vec((0..8).map(|i| (i as f32 * 0.11).cos()).collect(), &[4, 2]));
        let h = g.matmul(&x, &w);
        let a = g.sigmoid(&h);
        let l = g.mean(&a);
        g.backward(&l);
        (
            g.grad(&x).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            g.grad(&w).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        )
    };
    assert_eq!(grads(), grads());
    println!("[PASS] autodiff determinism: rebuilt graphs give bit-identical gradients");
}
