use ndgrad::check::{finite_difference, max_relative_error};
use ndgrad::ops::conv::reflect;
use ndgrad::{GradError, Grid, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_grid(rng: &mut ChaCha8Rng, shape: &[usize]) -> Grid<f64> {
    Grid::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

/// Checks reverse-mode gradients of `sum(out * r)` against central differences
/// for every input, where `r` is a fixed random weighting.
fn grad_check(inputs: &[Grid<f64>], build: &Build, seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|g| tape.leaf(g.clone(), true)).collect();
    let out = build(&mut tape, &vars);
    let out_shape = tape.shape(out).unwrap().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = rand_grid(&mut rng, &out_shape);
    let loss_of = |tape: &mut Tape<f64>, out: Var| {
        let w = tape.constant(weights.clone());
        let p = tape.mul(out, w).unwrap();
        tape.sum(p).unwrap()
    };
    let loss = loss_of(&mut tape, out);
    let grads = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).expect("gradient for every input").clone();
        let numeric = finite_difference(input, 1e-4, |probe| {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, g)| t.leaf(if i == j { probe.clone() } else { g.clone() }, false))
                .collect();
            let o = build(&mut t, &vs);
            let l = loss_of(&mut t, o);
            t.value(l).unwrap().item().unwrap()
        });
        worst = worst.max(max_relative_error(&analytic, &numeric, 1e-3));
    }
    worst
}

const FD_TOL: f64 = 1e-4;

#[test]
fn conv2d_identity_and_constant_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_grid(&mut rng, &[2, 5, 4, 3]);
    let mut eye = vec![0.0; 9];
    for c in 0..3 {
        eye[c * 3 + c] = 1.0;
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = tape.constant(Grid::from_vec(&[1, 1, 3, 3], eye).unwrap());
    let b = tape.constant(Grid::zeros(&[3]).unwrap());
    let y = tape.conv2d(xv, w, b).unwrap();
    assert_eq!(tape.value(y).unwrap(), &x);

    // constant input c with a kernel whose weights sum to s -> c*s everywhere
    let c = 0.7;
    let xc = tape.constant(Grid::full(&[1, 6, 6, 2], c).unwrap());
    let wk = rand_grid(&mut rng, &[3, 3, 2, 1]);
    let s = wk.sum();
    let wv = tape.constant(wk);
    let b0 = tape.constant(Grid::zeros(&[1]).unwrap());
    let y = tape.conv2d(xc, wv, b0).unwrap();
    for &v in tape.value(y).unwrap().data() {
        assert!((v - c * s).abs() < 1e-12);
    }
}

fn naive_conv2d(x: &Grid<f64>, w: &Grid<f64>, b: &Grid<f64>) -> Grid<f64> {
    let [f, h, wd, cin] = *x.shape() else { panic!() };
    let [k, _, _, cout] = *w.shape() else { panic!() };
    let p = (k / 2) as isize;
    let mut out = Grid::zeros(&[f, h, wd, cout]).unwrap();
    for fi in 0..f {
        for y in 0..h {
            for xx in 0..wd {
                for co in 0..cout {
                    let mut acc = b.data()[co];
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = reflect(y as isize + ky as isize - p, h);
                            let ix = reflect(xx as isize + kx as isize - p, wd);
                            for ci in 0..cin {
                                acc += x.data()[((fi * h + iy) * wd + ix) * cin + ci]
                                    * w.data()[((ky * k + kx) * cin + ci) * cout + co];
                            }
                        }
                    }
                    out.data_mut()[((fi * h + y) * wd + xx) * cout + co] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for k in [1, 3, 5] {
        let x = rand_grid(&mut rng, &[1, 8, 8, 2]);
        let w = rand_grid(&mut rng, &[k, k, 2, 3]);
        let b = rand_grid(&mut rng, &[3]);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(xv, wv, bv).unwrap();
        let want = naive_conv2d(&x, &w, &b);
        assert!(max_relative_error(tape.value(y).unwrap(), &want, 1.0) <= 1e-10);
    }
}

#[test]
fn conv2d_rejects_channel_mismatch_and_even_kernels() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Grid::zeros(&[1, 4, 4, 2]).unwrap());
    let w = tape.constant(Grid::zeros(&[3, 3, 3, 1]).unwrap());
    let b = tape.constant(Grid::zeros(&[1]).unwrap());
    assert!(matches!(tape.conv2d(x, w, b), Err(GradError::Shape(_))));
    let w2 = tape.constant(Grid::zeros(&[2, 2, 2, 1]).unwrap());
    assert!(matches!(tape.conv2d(x, w2, b), Err(GradError::Shape(_))));
}

fn naive_temporal(x: &Grid<f64>, w: &Grid<f64>) -> Grid<f64> {
    let [f, h, wd, c] = *x.shape() else { panic!() };
    let [k, _, cout] = *w.shape() else { panic!() };
    let p = (k / 2) as isize;
    let mut out = Grid::zeros(&[f, h, wd, cout]).unwrap();
    for fo in 0..f {
        for s in 0..h * wd {
            for co in 0..cout {
                let mut acc = 0.0;
                for j in 0..k {
                    let src = reflect(fo as isize + j as isize - p, f);
                    for ci in 0..c {
                        acc += x.data()[(src * h * wd + s) * c + ci] * w.data()[(j * c + ci) * cout + co];
                    }
                }
                out.data_mut()[(fo * h * wd + s) * cout + co] = acc;
            }
        }
    }
    out
}

#[test]
fn temporal_conv_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_grid(&mut rng, &[5, 3, 2, 2]);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    // k = 1 identity weights
    let id = tape.constant(Grid::from_vec(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let y = tape.temporal_conv(xv, id).unwrap();
    assert_eq!(tape.value(y).unwrap(), &x);

    // frame-constant video stays frame-constant
    let frame = rand_grid(&mut rng, &[1, 3, 2, 2]);
    let rep: Vec<f64> = (0..4).flat_map(|_| frame.data().to_vec()).collect();
    let xc = tape.constant(Grid::from_vec(&[4, 3, 2, 2], rep).unwrap());
    let w = tape.constant(rand_grid(&mut rng, &[3, 2, 3]));
    let y = tape.temporal_conv(xc, w).unwrap();
    let yv = tape.value(y).unwrap();
    let per = 3 * 2 * 3;
    for fi in 1..4 {
        assert_eq!(&yv.data()[fi * per..][..per], &yv.data()[..per]);
    }

    for k in [1, 3, 5] {
        let x = rand_grid(&mut rng, &[6, 2, 3, 2]);
        let w = rand_grid(&mut rng, &[k, 2, 3]);
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let y = tape.temporal_conv(xv, wv).unwrap();
        assert!(max_relative_error(tape.value(y).unwrap(), &naive_temporal(&x, &w), 1.0) <= 1e-10);
    }
}

#[test]
fn mean_over_axes_cases() {
    let mut tape = Tape::new();
    let c = tape.constant(Grid::full(&[2, 3, 4], 1.25).unwrap());
    let m = tape.mean_over_axes(c, &[0, 2]).unwrap();
    assert_eq!(tape.shape(m).unwrap(), &[3]);
    assert!(tape.value(m).unwrap().data().iter().all(|&v| v == 1.25));

    let v = tape.constant(Grid::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let all = tape.mean_over_axes(v, &[0, 1]).unwrap();
    assert_eq!(tape.value(all).unwrap().item(), Some(2.5));

    let same = tape.mean_over_axes(v, &[]).unwrap();
    assert_eq!(same, v);
    assert!(tape.mean_over_axes(v, &[0, 0]).is_err());
    assert!(tape.mean_over_axes(v, &[2]).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_grid(&mut rng, &[3, 4, 5, 2]);
    let xv = tape.constant(x.clone());
    let m = tape.mean_over_axes(xv, &[1, 2]).unwrap();
    let got = tape.value(m).unwrap();
    assert_eq!(got.shape(), &[3, 2]);
    for f in 0..3 {
        for c in 0..2 {
            let mut acc = 0.0;
            for i in 0..4 {
                for j in 0..5 {
                    acc += x.data()[((f * 4 + i) * 5 + j) * 2 + c];
                }
            }
            assert!((got.data()[f * 2 + c] - acc / 20.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn backward_linear_and_quadratic_cases() {
    let x0 = Grid::from_vec(&[2, 2], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone(), true);
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));

    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone(), true);
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &x0.map(|v| 2.0 * v));
}

#[test]
fn backward_usage_errors() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Grid::zeros(&[3]).unwrap(), true);
    assert!(matches!(tape.backward(x), Err(GradError::Usage(_))));
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(GradError::Usage(_))));
    assert!(matches!(tape.sum(x), Err(GradError::Usage(_))));
}

#[test]
fn gradients_only_for_requesting_leaves() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(Grid::full(&[2], 1.0).unwrap(), true);
    let b = tape.constant(Grid::full(&[2], 3.0).unwrap());
    let p = tape.mul(a, b).unwrap();
    let s = tape.sum(p).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(a).unwrap().data(), &[3.0, 3.0]);
    assert!(g.get(b).is_none());
}

#[test]
fn fd_elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = rand_grid(&mut rng, &[2, 3, 2]);
    let b = rand_grid(&mut rng, &[2, 3, 2]);
    let c = rand_grid(&mut rng, &[2]);
    let ins = [a.clone(), b.clone()];
    assert!(grad_check(&ins, &|t, v| t.add(v[0], v[1]).unwrap(), 1) < FD_TOL);
    assert!(grad_check(&ins, &|t, v| t.sub(v[0], v[1]).unwrap(), 2) < FD_TOL);
    assert!(grad_check(&ins, &|t, v| t.mul(v[0], v[1]).unwrap(), 3) < FD_TOL);
    assert!(grad_check(std::slice::from_ref(&a), &|t, v| t.scale(v[0], 1.7).unwrap(), 4) < FD_TOL);
    assert!(grad_check(std::slice::from_ref(&a), &|t, v| t.add_scalar(v[0], -0.3).unwrap(), 5) < FD_TOL);
    assert!(grad_check(std::slice::from_ref(&a), &|t, v| t.silu(v[0]).unwrap(), 6) < FD_TOL);
    assert!(grad_check(&[a.clone(), c], &|t, v| t.add_bias(v[0], v[1]).unwrap(), 7) < FD_TOL);
    assert!(grad_check(std::slice::from_ref(&a), &|t, v| t.reshape(v[0], &[3, 4]).unwrap(), 8) < FD_TOL);
    assert!(grad_check(&ins, &|t, v| t.concat_channels(v[0], v[1]).unwrap(), 9) < FD_TOL);
}

#[test]
fn fd_dense_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_grid(&mut rng, &[2, 3, 4]);
    let w = rand_grid(&mut rng, &[4, 5]);
    let b = rand_grid(&mut rng, &[5]);
    assert!(grad_check(&[x.clone(), w.clone(), b], &|t, v| t.linear(v[0], v[1], Some(v[2])).unwrap(), 1) < FD_TOL);
    assert!(grad_check(&[x.clone(), w], &|t, v| t.linear(v[0], v[1], None).unwrap(), 2) < FD_TOL);
    assert!(grad_check(std::slice::from_ref(&x), &|t, v| t.mean_over_axes(v[0], &[0, 2]).unwrap(), 3) < FD_TOL);
    assert!(grad_check(std::slice::from_ref(&x), &|t, v| t.sum(v[0]).unwrap(), 4) < FD_TOL);
    let phi = rand_grid(&mut rng, &[4, 3]);
    assert!(grad_check(&[phi], &|t, v| t.pairwise_diff(v[0]).unwrap(), 5) < FD_TOL);
    let table = rand_grid(&mut rng, &[4, 3]);
    assert!(grad_check(&[table], &|t, v| t.embed_row(v[0], 2).unwrap(), 6) < FD_TOL);
    let logits = rand_grid(&mut rng, &[3, 4]);
    assert!(grad_check(&[logits], &|t, v| t.softmax_cross_entropy(v[0], &[0, 3, 1]).unwrap(), 7) < FD_TOL);
}

#[test]
fn fd_convolutions() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_grid(&mut rng, &[2, 5, 4, 2]);
    let w = rand_grid(&mut rng, &[3, 3, 2, 3]);
    let b = rand_grid(&mut rng, &[3]);
    assert!(grad_check(&[x.clone(), w, b], &|t, v| t.conv2d(v[0], v[1], v[2]).unwrap(), 1) < FD_TOL);
    let w1 = rand_grid(&mut rng, &[1, 1, 2, 3]);
    let b1 = rand_grid(&mut rng, &[3]);
    assert!(grad_check(&[x.clone(), w1, b1], &|t, v| t.conv2d(v[0], v[1], v[2]).unwrap(), 2) < FD_TOL);
    let x3 = rand_grid(&mut rng, &[4, 2, 3, 2]);
    let wt = rand_grid(&mut rng, &[3, 2, 3]);
    assert!(grad_check(&[x3, wt], &|t, v| t.temporal_conv(v[0], v[1]).unwrap(), 3) < FD_TOL);
}

#[test]
fn fd_norm_resample_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_grid(&mut rng, &[2, 4, 4, 4]);
    let gamma = rand_grid(&mut rng, &[4]);
    let beta = rand_grid(&mut rng, &[4]);
    assert!(grad_check(&[x.clone(), gamma, beta], &|t, v| t.group_norm(v[0], v[1], v[2], 2).unwrap(), 1) < FD_TOL);
    assert!(grad_check(std::slice::from_ref(&x), &|t, v| t.upsample_nearest(v[0], 2).unwrap(), 2) < FD_TOL);
    assert!(grad_check(std::slice::from_ref(&x), &|t, v| t.avg_pool(v[0], 2).unwrap(), 3) < FD_TOL);
    let q = rand_grid(&mut rng, &[3, 2, 2, 4]);
    let k = rand_grid(&mut rng, &[3, 2, 2, 4]);
    let vv = rand_grid(&mut rng, &[3, 2, 2, 4]);
    assert!(grad_check(&[q, k, vv], &|t, v| t.frame_attention(v[0], v[1], v[2]).unwrap(), 4) < FD_TOL);
    let ws: Vec<Grid<f64>> = (0..4).map(|_| rand_grid(&mut rng, &[4, 4])).collect();
    let mut ins = vec![rand_grid(&mut rng, &[3, 2, 2, 4])];
    ins.extend(ws);
    assert!(
        grad_check(&ins, &|t, v| t.temporal_self_attention(v[0], v[1], v[2], v[3], v[4]).unwrap(), 5) < FD_TOL
    );
}

#[test]
fn fd_conv_norm_silu_mean_stack() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let ins = [
        rand_grid(&mut rng, &[2, 6, 6, 2]),
        rand_grid(&mut rng, &[3, 3, 2, 4]),
        rand_grid(&mut rng, &[4]),
        rand_grid(&mut rng, &[4]),
        rand_grid(&mut rng, &[4]),
    ];
    let build = |t: &mut Tape<f64>, v: &[Var]| {
        let h = t.conv2d(v[0], v[1], v[2]).unwrap();
        let h = t.group_norm(h, v[3], v[4], 2).unwrap();
        let h = t.silu(h).unwrap();
        t.mean_over_axes(h, &[1, 2]).unwrap()
    };
    assert!(grad_check(&ins, &build, 1) < FD_TOL);
}

#[test]
fn forward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = rand_grid(&mut rng, &[3, 8, 8, 4]);
    let w = rand_grid(&mut rng, &[3, 3, 4, 4]);
    let b = rand_grid(&mut rng, &[4]);
    let run = || {
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
        let h = t.conv2d(xv, wv, bv).unwrap();
        let h = t.avg_pool(h, 2).unwrap();
        let h = t.frame_attention(h, h, h).unwrap();
        t.value(h).unwrap().clone()
    };
    let (a, b2) = (run(), run());
    assert!(a.data().iter().zip(b2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

fn swap_frames(g: &Grid<f64>) -> Grid<f64> {
    let per = g.len() / g.shape()[0];
    let mut d = g.data().to_vec();
    let (a, b) = d.split_at_mut(per);
    a.swap_with_slice(&mut b[..per]);
    Grid::from_vec(g.shape(), d).unwrap()
}

#[test]
fn spatial_ops_commute_with_frame_swap() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = rand_grid(&mut rng, &[2, 4, 4, 3]);
    let w = rand_grid(&mut rng, &[3, 3, 3, 2]);
    let b = rand_grid(&mut rng, &[2]);
    let ops: Vec<Box<Build>> = vec![
        Box::new(|t, v| t.conv2d(v[0], v[1], v[2]).unwrap()),
        Box::new(|t, v| t.mean_over_axes(v[0], &[1, 2]).unwrap()),
        Box::new(|t, v| t.upsample_nearest(v[0], 2).unwrap()),
        Box::new(|t, v| t.avg_pool(v[0], 2).unwrap()),
    ];
    for op in &ops {
        let mut t = Tape::new();
        let v = [t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone())];
        let direct = op(&mut t, &v);
        let vs = [t.constant(swap_frames(&x)), v[1], v[2]];
        let swapped = op(&mut t, &vs);
        assert_eq!(&swap_frames(t.value(direct).unwrap()), t.value(swapped).unwrap());
    }
}

#[test]
fn group_norm_rejects_indivisible_groups() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Grid::zeros(&[1, 2, 2, 6]).unwrap());
    let g = t.constant(Grid::full(&[6], 1.0).unwrap());
    let b = t.constant(Grid::zeros(&[6]).unwrap());
    assert!(t.group_norm(x, g, b, 4).is_err());
    assert!(t.group_norm(x, g, b, 3).is_ok());
}

#[test]
fn attention_with_single_frame_returns_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut t = Tape::new();
    let q = t.constant(rand_grid(&mut rng, &[1, 2, 2, 3]));
    let k = t.constant(rand_grid(&mut rng, &[1, 2, 2, 3]));
    let vg = rand_grid(&mut rng, &[1, 2, 2, 3]);
    let v = t.constant(vg.clone());
    let o = t.frame_attention(q, k, v).unwrap();
    assert!(max_relative_error(t.value(o).unwrap(), &vg, 1.0) < 1e-15);
}
