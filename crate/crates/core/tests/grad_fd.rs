//! Finite-difference audits of every graph operator: analytic gradients from
//! `backward` are compared against central differences at 64-bit precision.

use chorus_core::grad::{Graph, Tensor, TensorId};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
struct Operand {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Operand {
    fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape: shape.to_vec(),
            data,
        }
    }
}

/// Deterministic non-uniform probe weights so the pullback through the
/// operator under test is not a constant vector.
fn probe_weights(n: usize) -> Vec<f64> {
    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    (0..n)
        .map(|_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}

/// Scalar loss: sum of the output weighted by fixed probe weights.
fn weighted_loss(g: &mut Graph, out: TensorId) -> TensorId {
    let shape = g.shape(out).to_vec();
    let w = g.input(Tensor::new(&shape, probe_weights(g.data(out).len())).unwrap());
    let prod = g.mul(out, w).unwrap();
    g.sum_all(prod)
}

/// Worst relative error between analytic and central finite-difference
/// gradients across every element of every operand.
fn fd_audit<F>(operands: &[Operand], h: f64, build: F) -> f64
where
    F: Fn(&mut Graph, &[TensorId]) -> TensorId,
{
    let forward = |vals: &[Vec<f64>]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = operands
            .iter()
            .zip(vals)
            .map(|(o, v)| g.input(Tensor::new(&o.shape, v.clone()).unwrap()))
            .collect();
        let loss = build(&mut g, &ids);
        g.data(loss)[0]
    };

    let mut g = Graph::new();
    let ids: Vec<TensorId> = operands
        .iter()
        .map(|o| g.param(Tensor::new(&o.shape, o.data.clone()).unwrap()))
        .collect();
    let loss = build(&mut g, &ids);
    let grads = g.backward(loss).expect("backward");

    let base: Vec<Vec<f64>> = operands.iter().map(|o| o.data.clone()).collect();
    let mut worst = 0.0f64;
    for (pi, o) in operands.iter().enumerate() {
        let analytic = grads.get(ids[pi]).expect("grad for operand");
        for ei in 0..o.data.len() {
            let mut up = base.clone();
            up[pi][ei] += h;
            let mut dn = base.clone();
            dn[pi][ei] -= h;
            let fd = (forward(&up) - forward(&dn)) / (2.0 * h);
            let rel = (analytic[ei] - fd).abs() / analytic[ei].abs().max(fd.abs()).max(1.0);
            worst = worst.max(rel);
        }
    }
    worst
}

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn vals(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(lo..hi, n)
}

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig {
        cases: n,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(cases(24))]

    #[test]
    fn fd_matmul_and_dense(
        (m, k, n) in (1usize..5, 1usize..5, 1usize..5),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Operand::new(&[m, k], (0..m * k).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let b = Operand::new(&[k, n], (0..k * n).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let bias = Operand::new(&[m], (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let err = fd_audit(&[a, b, bias], H, |g, ids| {
            let y = g.dense(ids[0], ids[1], Some(ids[2])).unwrap();
            weighted_loss(g, y)
        });
        prop_assert!(err < TOL, "max rel err {err}");
    }

    #[test]
    fn fd_smooth_elementwise(data in vals(6, 0.1, 2.0)) {
        let ops: Vec<(&str, Box<dyn Fn(&mut Graph, TensorId) -> TensorId>)> = vec![
            ("sigmoid", Box::new(|g: &mut Graph, x| g.sigmoid(x))),
            ("exp", Box::new(|g: &mut Graph, x| g.exp(x))),
            ("log", Box::new(|g: &mut Graph, x| g.log(x).unwrap())),
            ("log10", Box::new(|g: &mut Graph, x| g.log10(x).unwrap())),
            ("sqrt", Box::new(|g: &mut Graph, x| g.powf_const(x, 0.5).unwrap())),
            ("pow2.3", Box::new(|g: &mut Graph, x| g.powf_const(x, 2.3).unwrap())),
            ("affine", Box::new(|g: &mut Graph, x| {
                let y = g.mul_const(x, -1.7);
                g.add_const(y, 0.3)
            })),
            ("softplus", Box::new(|g: &mut Graph, x| g.softplus(x).unwrap())),
        ];
        for (name, op) in &ops {
            let operand = Operand::new(&[2, 3], data.clone());
            let err = fd_audit(&[operand], H, |g, ids| {
                let y = op(g, ids[0]);
                weighted_loss(g, y)
            });
            prop_assert!(err < TOL, "{name}: max rel err {err}");
        }
    }

    #[test]
    fn fd_relu_away_from_kink(
        data in vals(8, -2.0, 2.0).prop_filter("kink", |v| v.iter().all(|x| x.abs() > 1e-2))
    ) {
        let operand = Operand::new(&[8], data);
        let err = fd_audit(&[operand], H, |g, ids| {
            let y = g.relu(ids[0]);
            weighted_loss(g, y)
        });
        prop_assert!(err < TOL, "max rel err {err}");
    }

    #[test]
    fn fd_binary_elementwise(a in vals(6, -2.0, 2.0), b in vals(6, -2.0, 2.0)) {
        for which in 0..4 {
            let oa = Operand::new(&[3, 2], a.clone());
            let ob = Operand::new(&[3, 2], b.clone());
            let err = fd_audit(&[oa, ob], H, |g, ids| {
                let y = match which {
                    0 => g.add(ids[0], ids[1]).unwrap(),
                    1 => g.sub(ids[0], ids[1]).unwrap(),
                    2 => g.mul(ids[0], ids[1]).unwrap(),
                    // shared operand: both slots feed the same tensor
                    _ => g.mul(ids[0], ids[0]).unwrap(),
                };
                weighted_loss(g, y)
            });
            prop_assert!(err < TOL, "case {which}: max rel err {err}");
        }
    }

    #[test]
    fn fd_reductions(
        data in vals(12, -2.0, 2.0).prop_filter("max gap", |v| {
            let mut s = v.clone();
            s.sort_by(|a, b| b.partial_cmp(a).unwrap());
            s[0] - s[1] > 1e-3
        })
    ) {
        for which in 0..7 {
            let operand = Operand::new(&[3, 4], data.clone());
            let err = fd_audit(&[operand], H, |g, ids| {
                let x = ids[0];
                let y = match which {
                    0 => g.sum_all(x),
                    1 => g.mean_all(x),
                    2 => g.max_all(x).unwrap(),
                    3 => g.sum_axis(x, 0).unwrap(),
                    4 => g.sum_axis(x, 1).unwrap(),
                    5 => g.mean_axis(x, 0).unwrap(),
                    _ => g.mean_axis(x, 1).unwrap(),
                };
                if g.data(y).len() == 1 { y } else { weighted_loss(g, y) }
            });
            prop_assert!(err < TOL, "case {which}: max rel err {err}");
        }
    }

    #[test]
    fn fd_softmax_rows(data in vals(12, -3.0, 3.0)) {
        let operand = Operand::new(&[3, 4], data);
        let err = fd_audit(&[operand], H, |g, ids| {
            let y = g.softmax_rows(ids[0]).unwrap();
            weighted_loss(g, y)
        });
        prop_assert!(err < TOL, "max rel err {err}");
    }

    #[test]
    fn fd_scalar_broadcasts(
        data in vals(8, -2.0, 2.0),
        s in prop_oneof![(-2.0f64..-0.5), (0.5f64..2.0)],
    ) {
        for which in 0..3 {
            let ox = Operand::new(&[2, 4], data.clone());
            let os = Operand::new(&[1], vec![s]);
            let err = fd_audit(&[ox, os], H, |g, ids| {
                let y = match which {
                    0 => g.scale(ids[0], ids[1]).unwrap(),
                    1 => g.sub_scalar(ids[0], ids[1]).unwrap(),
                    _ => g.div_scalar(ids[0], ids[1]).unwrap(),
                };
                weighted_loss(g, y)
            });
            prop_assert!(err < TOL, "case {which}: max rel err {err}");
        }
    }

    #[test]
    fn fd_row_ops(x in vals(12, -2.0, 2.0), v in vals(3, -2.0, 2.0)) {
        for which in 0..2 {
            let ox = Operand::new(&[3, 4], x.clone());
            let ov = Operand::new(&[3], v.clone());
            let err = fd_audit(&[ox, ov], H, |g, ids| {
                let y = match which {
                    0 => g.row_scale(ids[0], ids[1]).unwrap(),
                    _ => g.row_add(ids[0], ids[1]).unwrap(),
                };
                weighted_loss(g, y)
            });
            prop_assert!(err < TOL, "case {which}: max rel err {err}");
        }
    }

    #[test]
    fn fd_structure_ops(a in vals(12, -2.0, 2.0), b in vals(8, -2.0, 2.0)) {
        // transpose, reshape, concat, slices
        let oa = Operand::new(&[3, 4], a.clone());
        let ob = Operand::new(&[2, 4], b.clone());
        let err = fd_audit(&[oa, ob], H, |g, ids| {
            let t = g.transpose(ids[0]).unwrap();
            let r = g.reshape(t, &[3, 4]).unwrap();
            let cat = g.concat_rows(r, ids[1]).unwrap();
            let rows = g.slice_rows(cat, 1, 4).unwrap();
            let flat = g.reshape(rows, &[12]).unwrap();
            let piece = g.slice1d(flat, 2, 9).unwrap();
            weighted_loss(g, piece)
        });
        prop_assert!(err < TOL, "max rel err {err}");
    }

    #[test]
    fn fd_frame_overlap_add(
        (win, hop_m1, extra) in (2usize..6, 0usize..4, 0usize..8),
        seed in any::<u64>(),
    ) {
        let hop = (hop_m1 % win) + 1;
        let len = win + extra;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Operand::new(&[len], (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let err = fd_audit(&[x], H, |g, ids| {
            let f = g.frame(ids[0], win, hop).unwrap();
            let y = g.overlap_add(f, hop).unwrap();
            weighted_loss(g, y)
        });
        prop_assert!(err < TOL, "win {win} hop {hop} len {len}: max rel err {err}");
    }

    #[test]
    fn fd_conv1d(
        (cin, cout_per_g, k, stride, dilation, pad, depthwise) in
            (1usize..4, 1usize..3, 1usize..4, 1usize..3, 1usize..3, 0usize..3, any::<bool>()),
        seed in any::<u64>(),
    ) {
        let groups = if depthwise { cin } else { 1 };
        let cg = cin / groups;
        let cout = cout_per_g * groups;
        let span = dilation * (k - 1) + 1;
        let t_in = span + 5;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Operand::new(&[cin, t_in], (0..cin * t_in).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let w = Operand::new(&[cout, cg, k], (0..cout * cg * k).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let bias = Operand::new(&[cout], (0..cout).map(|_| rng.gen_range(-0.5..0.5)).collect());
        let err = fd_audit(&[x, w, bias], H, |g, ids| {
            let y = g.conv1d(ids[0], ids[1], Some(ids[2]), stride, dilation, pad, groups).unwrap();
            weighted_loss(g, y)
        });
        prop_assert!(err < TOL, "max rel err {err}");
    }

    #[test]
    fn fd_conv2d_and_pool(
        (cin, cout, kh, kw, stride, pad) in (1usize..3, 1usize..3, 1usize..3, 1usize..3, 1usize..3, 0usize..2),
        seed in any::<u64>(),
    ) {
        let h = kh + 4;
        let w = kw + 4;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Operand::new(&[cin, h, w], (0..cin * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let wt = Operand::new(&[cout, cin, kh, kw], (0..cout * cin * kh * kw).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let bias = Operand::new(&[cout], (0..cout).map(|_| rng.gen_range(-0.5..0.5)).collect());
        let err = fd_audit(&[x, wt, bias], H, |g, ids| {
            let y = g.conv2d(ids[0], ids[1], Some(ids[2]), stride, pad).unwrap();
            let p = g.avg_pool2d(y, 2.min(g.shape(y)[1]), 2.min(g.shape(y)[2]), 1, 1).unwrap();
            weighted_loss(g, p)
        });
        prop_assert!(err < TOL, "max rel err {err}");
    }

    #[test]
    fn fd_global_ln(data in vals(10, -2.0, 2.0).prop_filter("spread", |v| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64 > 0.05
    })) {
        let operand = Operand::new(&[2, 5], data);
        let err = fd_audit(&[operand], H, |g, ids| {
            let y = g.global_ln(ids[0], 1e-8).unwrap();
            weighted_loss(g, y)
        });
        prop_assert!(err < TOL, "max rel err {err}");
    }
}

/// Three dilated conv layers with interleaved nonlinearities, audited
/// element by element against central differences.
#[test]
fn conv_net_fd_audit_under_1e4() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let t_in = 16;
    let mut draw = |n: usize, a: f64| -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-a..a)).collect()
    };
    let x = Operand::new(&[2, t_in], draw(2 * t_in, 1.5));
    let w1 = Operand::new(&[4, 2, 3], draw(24, 0.8));
    let b1 = Operand::new(&[4], draw(4, 0.3));
    let w2 = Operand::new(&[4, 4, 3], draw(48, 0.8));
    let b2 = Operand::new(&[4], draw(4, 0.3));
    let w3 = Operand::new(&[1, 4, 3], draw(12, 0.8));
    let b3 = Operand::new(&[1], draw(1, 0.3));
    let operands = [x, w1, b1, w2, b2, w3, b3];
    let err = fd_audit(&operands, 1e-5, |g, ids| {
        let h1 = g.conv1d(ids[0], ids[1], Some(ids[2]), 1, 1, 1, 1).unwrap();
        let a1 = g.sigmoid(h1);
        let h2 = g.conv1d(a1, ids[3], Some(ids[4]), 1, 2, 2, 1).unwrap();
        let a2 = g.sigmoid(h2);
        let h3 = g.conv1d(a2, ids[5], Some(ids[6]), 1, 4, 4, 1).unwrap();
        g.mean_all(h3)
    });
    assert!(err < 1e-4, "max rel err {err}");
}

/// Forward and backward stay finite for inputs across [-10, 10] through a
/// representative composite of the operator set.
#[test]
fn no_nan_inf_for_bounded_inputs() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..32).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let w: Vec<f64> = (0..12).map(|_| rng.gen_range(-0.7..0.7)).collect();
        let mut g = Graph::new();
        let xi = g.param(Tensor::new(&[2, 16], x).unwrap());
        let wi = g.param(Tensor::new(&[2, 2, 3], w).unwrap());
        let normed = g.global_ln(xi, 1e-8).unwrap();
        let h = g.conv1d(normed, wi, None, 1, 1, 1, 1).unwrap();
        let a = g.sigmoid(h);
        let s = g.softmax_rows(a).unwrap();
        let sp = g.softplus(s).unwrap();
        let loss = g.mean_all(sp);
        assert!(g.data(loss)[0].is_finite());
        let grads = g.backward(loss).unwrap();
        for id in [xi, wi] {
            assert!(grads.get(id).unwrap().iter().all(|v| v.is_finite()), "seed {seed}");
        }
    }
}
