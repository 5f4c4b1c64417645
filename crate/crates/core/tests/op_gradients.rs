//! Every differentiable op against a central-difference oracle evaluated on an
//! independent f64 reference of the same function.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use yoloe26::gradcheck::finite_diff_check_against;
use yoloe26::{Graph, Result, Tensor, Var};

const BOUND: f64 = 1e-3;
const STEP: f64 = 1e-3;

fn random(shape: &[usize], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}

fn sig(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Runs the op on five random inputs; the checked scalar is `Σ w ⊙ op(x)` with
/// fixed random weights so every output coordinate contributes.
fn check(
    name: &str,
    shape: &[usize],
    op: impl Fn(&mut Graph, Var) -> Result<Var>,
    reference: impl Fn(&[f64]) -> Vec<f64>,
) {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(shape, -1.0, 1.0, &mut rng);
        let out_len = reference(&f64s(&x)).len();
        let w: Vec<f32> = (0..out_len).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let w64: Vec<f64> = w.iter().map(|&v| f64::from(v)).collect();
        let err = finite_diff_check_against(
            |g, v| {
                let y = op(g, v)?;
                let wv = g.constant(Tensor::new(g.shape(y).to_vec(), w.clone())?);
                let p = g.mul(y, wv)?;
                g.sum_all(p)
            },
            |x| reference(x).iter().zip(&w64).map(|(a, b)| a * b).sum(),
            &x,
            STEP,
        )
        .unwrap();
        assert!(err <= BOUND, "{name} seed {seed}: relative error {err:e}");
    }
}

fn ref_l2_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    for r in 0..rows {
        let n = (0..cols).map(|c| x[r * cols + c].powi(2)).sum::<f64>().sqrt().max(1e-12);
        for c in 0..cols {
            out[r * cols + c] /= n;
        }
    }
    out
}

fn ref_softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        for c in 0..cols {
            out[r * cols + c] = (row[c] - m).exp() / z;
        }
    }
    out
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn ref_conv(
    x: &[f64],
    (ci, h, w): (usize, usize, usize),
    k: &[f64],
    (co, ks): (usize, usize),
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = (h + 2 * pad - ks) / stride + 1;
    let wo = (w + 2 * pad - ks) / stride + 1;
    let mut out = vec![0.0; co * ho * wo];
    for o in 0..co {
        for y in 0..ho {
            for xo in 0..wo {
                let mut acc = bias.map_or(0.0, |b| b[o]);
                for c in 0..ci {
                    for ky in 0..ks {
                        for kx in 0..ks {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            let ix = (xo * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += k[((o * ci + c) * ks + ky) * ks + kx]
                                    * x[(c * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                }
                out[(o * ho + y) * wo + xo] = acc;
            }
        }
    }
    out
}

fn ref_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

#[test]
fn unary_ops() {
    check("sigmoid", &[3, 4], |g, x| g.sigmoid(x), |x| x.iter().map(|&v| sig(v)).collect());
    check("silu", &[3, 4], |g, x| g.silu(x), |x| x.iter().map(|&v| v * sig(v)).collect());
    check(
        "softplus",
        &[3, 4],
        |g, x| g.softplus(x),
        |x| x.iter().map(|&v| (1.0 + v.exp()).ln()).collect(),
    );
    check("mul_scalar", &[5], |g, x| g.mul_scalar(x, -2.5), |x| x.iter().map(|v| v * -2.5).collect());
    check("add_scalar", &[5], |g, x| g.add_scalar(x, 0.7), |x| x.iter().map(|v| v + 0.7).collect());
    check("l2_normalize rows", &[4, 5], |g, x| g.l2_normalize(x, 1), |x| ref_l2_rows(x, 4, 5));
    check(
        "l2_normalize cols",
        &[4, 5],
        |g, x| g.l2_normalize(x, 0),
        |x| transpose(&ref_l2_rows(&transpose(x, 4, 5), 5, 4), 5, 4),
    );
    check("softmax", &[3, 6], |g, x| g.softmax(x, 1), |x| ref_softmax_rows(x, 3, 6));
    check(
        "softmax axis0",
        &[3, 6],
        |g, x| g.softmax(x, 0),
        |x| transpose(&ref_softmax_rows(&transpose(x, 3, 6), 6, 3), 6, 3),
    );
    check(
        "upsample",
        &[2, 3, 3],
        |g, x| g.upsample_nearest(x, 2),
        |x| {
            let mut out = Vec::new();
            for c in 0..2 {
                for y in 0..6 {
                    for xx in 0..6 {
                        out.push(x[(c * 3 + y / 2) * 3 + xx / 2]);
                    }
                }
            }
            out
        },
    );
    check("transpose", &[3, 5], |g, x| g.transpose(x), |x| transpose(x, 3, 5));
    check("reshape", &[3, 4], |g, x| g.reshape(x, &[2, 6]), |x| x.to_vec());
    check(
        "slice",
        &[4, 5],
        |g, x| g.slice(x, 1, 1, 3),
        |x| (0..4).flat_map(|r| (1..4).map(move |c| (r, c))).map(|(r, c)| x[r * 5 + c]).collect(),
    );
    check(
        "gather",
        &[5, 3],
        |g, x| g.gather_rows(x, &[4, 0, 4, 2]),
        |x| [4, 0, 4, 2].iter().flat_map(|&r| x[r * 3..r * 3 + 3].to_vec()).collect(),
    );
    check(
        "reduce_sum",
        &[3, 4, 2],
        |g, x| g.reduce_sum(x, 1),
        |x| {
            (0..3)
                .flat_map(|a| (0..2).map(move |c| (a, c)))
                .map(|(a, c)| (0..4).map(|b| x[(a * 4 + b) * 2 + c]).sum())
                .collect()
        },
    );
    check(
        "reduce_mean",
        &[3, 4, 2],
        |g, x| g.reduce_mean(x, 2),
        |x| x.chunks(2).map(|p| (p[0] + p[1]) / 2.0).collect(),
    );
    check(
        "reduce_max",
        &[3, 4],
        |g, x| g.reduce_max(x, 1),
        |x| x.chunks(4).map(|r| r.iter().cloned().fold(f64::MIN, f64::max)).collect(),
    );
    check("mean_all", &[2, 5], |g, x| g.mean_all(x), |x| vec![x.iter().sum::<f64>() / 10.0]);
}

#[test]
fn relu_away_from_kink() {
    check(
        "relu",
        &[12],
        |g, x| {
            let y = g.add_scalar(x, 0.013)?;
            g.relu(y)
        },
        |x| x.iter().map(|v| (v + 0.013).max(0.0)).collect(),
    );
}

#[test]
fn binary_ops_both_sides() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let other = random(&[3, 4], 0.5, 1.5, &mut rng);
    let o64 = f64s(&other);
    let with = |g: &mut Graph| g.constant(other.clone());
    check("add", &[3, 4], |g, x| {
        let c = with(g);
        g.add(c, x)
    }, |x| x.iter().zip(&o64).map(|(a, b)| a + b).collect());
    check("sub", &[3, 4], |g, x| {
        let c = with(g);
        g.sub(c, x)
    }, |x| x.iter().zip(&o64).map(|(a, b)| b - a).collect());
    check("mul", &[3, 4], |g, x| {
        let c = with(g);
        g.mul(x, c)
    }, |x| x.iter().zip(&o64).map(|(a, b)| a * b).collect());
    check("div numerator", &[3, 4], |g, x| {
        let c = with(g);
        g.div(x, c)
    }, |x| x.iter().zip(&o64).map(|(a, b)| a / b).collect());
    check("div denominator", &[3, 4], |g, x| {
        let c = with(g);
        let d = g.add_scalar(x, 3.0)?;
        g.div(c, d)
    }, |x| x.iter().zip(&o64).map(|(a, b)| b / (a + 3.0)).collect());
    check("maximum", &[3, 4], |g, x| {
        let c = with(g);
        let y = g.mul_scalar(x, 2.0)?;
        g.maximum(y, c)
    }, |x| x.iter().zip(&o64).map(|(a, b)| (2.0 * a).max(*b)).collect());
    check("minimum", &[3, 4], |g, x| {
        let c = with(g);
        let y = g.mul_scalar(x, 2.0)?;
        g.minimum(c, y)
    }, |x| x.iter().zip(&o64).map(|(a, b)| (2.0 * a).min(*b)).collect());
}

#[test]
fn matmul_both_operands() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let b = random(&[4, 3], -1.0, 1.0, &mut rng);
    let a = random(&[5, 4], -1.0, 1.0, &mut rng);
    let (a64, b64) = (f64s(&a), f64s(&b));
    check("matmul lhs", &[5, 4], |g, x| {
        let c = g.constant(b.clone());
        g.matmul(x, c)
    }, |x| ref_matmul(x, &b64, 5, 4, 3));
    check("matmul rhs", &[4, 3], |g, x| {
        let c = g.constant(a.clone());
        g.matmul(c, x)
    }, |x| ref_matmul(&a64, x, 5, 4, 3));
}

#[test]
fn conv_input_kernel_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let kernel = random(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
    let input = random(&[2, 6, 6], -1.0, 1.0, &mut rng);
    let (k64, i64_) = (f64s(&kernel), f64s(&input));
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        check("conv input", &[2, 6, 6], |g, x| {
            let c = g.constant(kernel.clone());
            g.conv2d(x, c, None, stride, pad)
        }, |x| ref_conv(x, (2, 6, 6), &k64, (3, 3), None, stride, pad));
        check("conv kernel", &[3, 2, 3, 3], |g, x| {
            let c = g.constant(input.clone());
            g.conv2d(c, x, None, stride, pad)
        }, |x| ref_conv(&i64_, (2, 6, 6), x, (3, 3), None, stride, pad));
        check("conv bias", &[3], |g, x| {
            let ci = g.constant(input.clone());
            let ck = g.constant(kernel.clone());
            g.conv2d(ci, ck, Some(x), stride, pad)
        }, |x| ref_conv(&i64_, (2, 6, 6), &k64, (3, 3), Some(x), stride, pad));
    }
    let pw = random(&[4, 2, 1, 1], -1.0, 1.0, &mut rng);
    let pw64 = f64s(&pw);
    check("pointwise conv", &[2, 5, 4], |g, x| {
        let c = g.constant(pw.clone());
        g.conv2d(x, c, None, 1, 0)
    }, |x| ref_conv(x, (2, 5, 4), &pw64, (4, 1), None, 1, 0));
}

#[test]
fn scale_row_bias_concat_bce() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let m = random(&[3, 4], -1.0, 1.0, &mut rng);
    let m64 = f64s(&m);
    check("scale by scalar var", &[1], |g, s| {
        let c = g.constant(m.clone());
        g.scale(c, s)
    }, |s| m64.iter().map(|v| v * s[0]).collect());
    check("row bias", &[4], |g, b| {
        let c = g.constant(m.clone());
        g.add_row_bias(c, b)
    }, |b| m64.iter().enumerate().map(|(i, v)| v + b[i % 4]).collect());
    check("concat", &[2, 3], |g, x| {
        let c = g.constant(m.clone().reshape(&[2, 6]).unwrap());
        let y = g.concat(&[x, c, x], 1)?;
        g.sigmoid(y)
    }, |x| {
        let mut out = Vec::new();
        for r in 0..2 {
            out.extend(x[r * 3..r * 3 + 3].iter().map(|&v| sig(v)));
            out.extend(m64[r * 6..r * 6 + 6].iter().map(|&v| sig(v)));
            out.extend(x[r * 3..r * 3 + 3].iter().map(|&v| sig(v)));
        }
        out
    });
    let t = random(&[4, 3], 0.0, 1.0, &mut rng);
    let t64 = f64s(&t);
    check("bce_with_logits", &[4, 3], |g, x| g.bce_with_logits(x, &t), |x| {
        x.iter()
            .zip(&t64)
            .map(|(&v, &tt)| -(tt * sig(v).ln() + (1.0 - tt) * (1.0 - sig(v)).ln()))
            .collect()
    });
}

#[test]
fn split_batch_gradients_sum_to_full() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let w = random(&[3, 4], -1.0, 1.0, &mut rng);
    let xs = random(&[8, 3], -1.0, 1.0, &mut rng);
    let loss = |rows: &[usize]| {
        let mut g = Graph::new();
        let wv = g.param(w.clone());
        let x = g.constant(xs.clone());
        let x = g.gather_rows(x, rows).unwrap();
        let y = g.matmul(x, wv).unwrap();
        let y = g.silu(y).unwrap();
        let l = g.sum_all(y).unwrap();
        g.backward(l).unwrap().take(wv).unwrap()
    };
    let full = loss(&[0, 1, 2, 3, 4, 5, 6, 7]);
    let a = loss(&[0, 1, 2, 3]);
    let b = loss(&[4, 5, 6, 7]);
    for i in 0..full.len() {
        assert!((full[i] - (a[i] + b[i])).abs() <= 1e-5);
    }
}

#[test]
fn forward_is_bit_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let x = random(&[3, 9, 9], -1.0, 1.0, &mut rng);
    let k = random(&[5, 3, 3, 3], -1.0, 1.0, &mut rng);
    let run = || {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let kv = g.constant(k.clone());
        let y = g.conv2d(xv, kv, None, 2, 1).unwrap();
        let y = g.silu(y).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run().data(), run().data());
}

#[test]
fn all_f32_check_passes_on_well_conditioned_sum_of_squares() {
    use yoloe26::gradcheck::{finite_diff_check, DEFAULT_STEP};
    let x = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
    let err = finite_diff_check(
        |g, v| {
            let s = g.mul(v, v)?;
            g.sum_all(s)
        },
        &x,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err <= 1e-3, "{err:e}");
}
