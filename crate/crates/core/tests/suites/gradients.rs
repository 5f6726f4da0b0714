//! Finite-difference checks of every tape operation, layer and both
//! networks, in 64-bit with central differences.

use std::cell::RefCell;

use crate::common::*;
use popmap_core::autodiff::{Tape, Var};
use popmap_core::gradcheck::grad_check;
use popmap_core::nn::*;
use popmap_core::pada::{DomainClassifier, PadaConfig};
use popmap_core::pgnet::{Pgnet, PgnetConfig};
use popmap_core::stnet::{Stnet, StnetConfig};
use popmap_core::{ParamStore, Result, Tensor};

fn check<F>(name: &str, x: &Tensor<f64>, f: F)
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let err = grad_check(f, x, EPS).unwrap();
    assert!(err <= GRAD_TOL, "{name}: relative error {err:e}");
}

fn check_params<F>(name: &str, store: &mut ParamStore<f64>, f: F)
where
    F: Fn(&mut Ctx<f64>) -> Result<Var>,
{
    let err = param_check(store, f).unwrap();
    assert!(err <= GRAD_TOL, "{name} parameters: relative error {err:e}");
}

pub fn sum_gradient_is_exact() {
    let x = uniform(&[3, 4], -2.0, 2.0, &mut rng(1));
    let err = grad_check(|t, v| t.sum_all(v), &x, EPS).unwrap();
    assert!(err <= 1e-9, "{err:e}");
}

pub fn relu_example() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[2], vec![-1.0, 3.0]).unwrap());
    let y = tape.relu(x).unwrap();
    let l = tape.sum_all(y).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap(), &[0.0, 1.0]);
}

pub fn elementwise_ops() {
    let mut r = rng(2);
    let x = away_from_zero(&[2, 3, 4], &mut r);
    let pos = uniform(&[2, 3, 4], 0.5, 2.0, &mut r);
    let other = away_from_zero(&[2, 3, 4], &mut r);
    let row = away_from_zero(&[3, 1], &mut r);
    check("sigmoid", &x, |t, v| {
        let y = t.sigmoid(v)?;
        project(t, y, 1)
    });
    check("tanh", &x, |t, v| {
        let y = t.tanh(v)?;
        project(t, y, 2)
    });
    check("exp", &x, |t, v| {
        let y = t.exp(v)?;
        project(t, y, 3)
    });
    check("log", &pos, |t, v| {
        let y = t.log(v)?;
        project(t, y, 4)
    });
    check("relu", &x, |t, v| {
        let y = t.relu(v)?;
        project(t, y, 5)
    });
    check("neg/scale/add_scalar", &x, |t, v| {
        let y = t.neg(v)?;
        let y = t.scale(y, 2.5)?;
        let y = t.add_scalar(y, 0.3)?;
        project(t, y, 6)
    });
    check("clamp", &x, |t, v| {
        let y = t.clamp(v, -1.0, 1.0)?;
        project(t, y, 7)
    });
    for (name, k) in [("add", 0), ("sub", 1), ("mul", 2), ("div", 3)] {
        let o = other.clone();
        let op = move |t: &mut Tape<f64>, a: Var, b: Var| match k {
            0 => t.add(a, b),
            1 => t.sub(a, b),
            2 => t.mul(a, b),
            _ => t.div(a, b),
        };
        check(&format!("{name} lhs"), &x, |t, v| {
            let b = t.constant(o.clone());
            let y = op(t, v, b)?;
            project(t, y, 8)
        });
        check(&format!("{name} rhs"), &other, |t, v| {
            let a = t.constant(x.clone());
            let y = op(t, a, v)?;
            project(t, y, 9)
        });
        check(&format!("{name} broadcast rhs"), &row, |t, v| {
            let a = t.constant(x.clone());
            let y = op(t, a, v)?;
            project(t, y, 10)
        });
    }
}

pub fn reductions_and_shape_ops() {
    let mut r = rng(3);
    let x = away_from_zero(&[2, 4, 4, 4], &mut r);
    check("reduce_sum", &x, |t, v| {
        let y = t.reduce_sum(v, &[1, 3], true)?;
        project(t, y, 1)
    });
    check("reduce_sum squeeze", &x, |t, v| {
        let y = t.reduce_sum(v, &[0], false)?;
        project(t, y, 2)
    });
    check("mean_all", &x, |t, v| {
        let y = t.mul(v, v)?;
        t.mean_all(y)
    });
    check("reshape", &x, |t, v| {
        let y = t.reshape(v, &[8, 16])?;
        project(t, y, 3)
    });
    check("pixel_shuffle", &x, |t, v| {
        let y = t.pixel_shuffle(v, 2)?;
        project(t, y, 4)
    });
    check("pixel_unshuffle", &x, |t, v| {
        let y = t.pixel_unshuffle(v, 2)?;
        project(t, y, 5)
    });
    check("concat", &x, |t, v| {
        let c = t.constant(Tensor::full(&[2, 1, 4, 4], 0.7)?);
        let y = t.concat(&[c, v, v], 1)?;
        project(t, y, 6)
    });
    check("narrow", &x, |t, v| {
        let y = t.narrow(v, 1, 1, 2)?;
        project(t, y, 7)
    });
    check("select", &x, |t, v| {
        let y = t.select(v, 2, 3)?;
        project(t, y, 8)
    });
    check("sum_pool", &x, |t, v| {
        let y = t.sum_pool(v, 2)?;
        project(t, y, 9)
    });
    check("upsample_nearest", &x, |t, v| {
        let y = t.upsample_nearest(v, 3)?;
        project(t, y, 10)
    });
    check("subsample", &x, |t, v| {
        let y = t.subsample(v, 2)?;
        project(t, y, 11)
    });
}

pub fn detach_stops_gradient() {
    let x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let d = tape.detach(v);
    let y = tape.mul(v, d).unwrap();
    let l = tape.sum_all(y).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(v).unwrap(), x.data());
}

pub fn matmul_both_operands() {
    let mut r = rng(4);
    let a = away_from_zero(&[3, 5], &mut r);
    let b = away_from_zero(&[5, 2], &mut r);
    check("matmul lhs", &a, |t, v| {
        let w = t.constant(b.clone());
        let y = t.matmul(v, w)?;
        project(t, y, 1)
    });
    check("matmul rhs", &b, |t, v| {
        let x = t.constant(a.clone());
        let y = t.matmul(x, v)?;
        project(t, y, 2)
    });
}

pub fn conv2d_all_operands() {
    let mut r = rng(5);
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 2, 5), (1, 0, 1)] {
        let x = away_from_zero(&[2, 3, 6, 6], &mut r);
        let w = away_from_zero(&[4, 3, k, k], &mut r);
        let b = away_from_zero(&[4], &mut r);
        let tag = format!("conv2d s{stride} p{pad} k{k}");
        check(&format!("{tag} input"), &x, |t, v| {
            let wv = t.constant(w.clone());
            let bv = t.constant(b.clone());
            let y = t.conv2d(v, wv, Some(bv), stride, pad)?;
            project(t, y, 1)
        });
        check(&format!("{tag} weight"), &w, |t, v| {
            let xv = t.constant(x.clone());
            let y = t.conv2d(xv, v, None, stride, pad)?;
            project(t, y, 2)
        });
        check(&format!("{tag} bias"), &b, |t, v| {
            let xv = t.constant(x.clone());
            let wv = t.constant(w.clone());
            let y = t.conv2d(xv, wv, Some(v), stride, pad)?;
            project(t, y, 3)
        });
    }
}

pub fn conv3d_all_operands() {
    let mut r = rng(6);
    let x = away_from_zero(&[2, 2, 6, 4, 4], &mut r);
    let w = away_from_zero(&[3, 2, 3, 3, 3], &mut r);
    let b = away_from_zero(&[3], &mut r);
    check("conv3d input", &x, |t, v| {
        let wv = t.constant(w.clone());
        let bv = t.constant(b.clone());
        let y = t.conv3d_temporal(v, wv, Some(bv), 3, 1)?;
        project(t, y, 1)
    });
    check("conv3d weight", &w, |t, v| {
        let xv = t.constant(x.clone());
        let y = t.conv3d_temporal(xv, v, None, 3, 1)?;
        project(t, y, 2)
    });
    check("conv3d bias", &b, |t, v| {
        let xv = t.constant(x.clone());
        let wv = t.constant(w.clone());
        let y = t.conv3d_temporal(xv, wv, Some(v), 3, 1)?;
        project(t, y, 3)
    });
}

pub fn batch_norm_operands() {
    let mut r = rng(7);
    let x = uniform(&[3, 2, 3, 3], -2.0, 2.0, &mut r);
    let gamma = uniform(&[2], 0.5, 1.5, &mut r);
    let beta = away_from_zero(&[2], &mut r);
    let stats = (vec![0.3, -0.2], vec![1.5, 0.7]);
    check("batch_norm train input", &x, |t, v| {
        let g = t.constant(gamma.clone());
        let b = t.constant(beta.clone());
        let (y, _, _) = t.batch_norm(v, g, b, 1e-5, None)?;
        project(t, y, 1)
    });
    check("batch_norm eval input", &x, |t, v| {
        let g = t.constant(gamma.clone());
        let b = t.constant(beta.clone());
        let (y, _, _) = t.batch_norm(v, g, b, 1e-5, Some((&stats.0, &stats.1)))?;
        project(t, y, 2)
    });
    check("batch_norm gamma", &gamma, |t, v| {
        let xv = t.constant(x.clone());
        let b = t.constant(beta.clone());
        let (y, _, _) = t.batch_norm(xv, v, b, 1e-5, None)?;
        project(t, y, 3)
    });
    check("batch_norm beta", &beta, |t, v| {
        let xv = t.constant(x.clone());
        let g = t.constant(gamma.clone());
        let (y, _, _) = t.batch_norm(xv, g, v, 1e-5, None)?;
        project(t, y, 4)
    });
}

pub fn n2_normalize_both_inputs() {
    let mut r = rng(8);
    let raw = uniform(&[2, 1, 4, 4], 0.1, 2.0, &mut r);
    let coarse = uniform(&[2, 1, 2, 2], 1.0, 10.0, &mut r);
    check("n2 raw", &raw, |t, v| {
        let c = t.constant(coarse.clone());
        let y = n2_normalize(t, v, c, 2)?;
        project(t, y, 1)
    });
    check("n2 coarse", &coarse, |t, v| {
        let rv = t.constant(raw.clone());
        let y = n2_normalize(t, rv, v, 2)?;
        project(t, y, 2)
    });
}

pub fn losses() {
    let mut r = rng(9);
    let pred = uniform(&[4, 3], 0.1, 0.9, &mut r);
    let target = Tensor::from_fn(&[4, 3], |i| if i % 3 == 0 { 1.0 } else { 0.2 }).unwrap();
    let y = uniform(&[4, 3], -1.0, 1.0, &mut r);
    check("mse", &pred, |t, v| {
        let yv = t.constant(y.clone());
        mse(t, v, yv)
    });
    check("bce", &pred, |t, v| {
        let yv = t.constant(target.clone());
        bce(t, v, yv)
    });
}

pub fn conv_layers() {
    let mut r = rng(10);
    let mut store = ParamStore::new();
    let conv = Conv2d::new(&mut store, "c", 2, 3, 3, 1, &mut r);
    let strided = Conv2d::new(&mut store, "s", 3, 2, 3, 2, &mut r);
    jitter_biases(&mut store, 10);
    let x = away_from_zero(&[2, 2, 5, 5], &mut r);
    check_params("conv2d layers", &mut store, |cx| {
        let xv = cx.tape.constant(x.clone());
        let y = conv.forward(cx, xv)?;
        let y = strided.forward(cx, y)?;
        project(cx.tape, y, 1)
    });
    let mut store = ParamStore::new();
    let c3 = Conv3dTemporal::new(&mut store, "t", 1, 2, 2, 3, &mut r);
    let x = away_from_zero(&[1, 1, 4, 4, 4], &mut r);
    check_params("conv3d layer", &mut store, |cx| {
        let xv = cx.tape.constant(x.clone());
        let y = c3.forward(cx, xv)?;
        project(cx.tape, y, 2)
    });
}

pub fn linear_and_embedding() {
    let mut r = rng(11);
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", 4, 3, &mut r);
    let emb = Embedding::new(&mut store, "emb", 5, 4, &mut r);
    let x = away_from_zero(&[2, 4], &mut r);
    check_params("linear+embedding", &mut store, |cx| {
        let row = emb.lookup(cx, 3)?;
        let row = cx.tape.reshape(row, &[1, 4])?;
        let xv = cx.tape.constant(x.clone());
        let both = cx.tape.concat(&[xv, row], 0)?;
        let y = lin.forward(cx, both)?;
        project(cx.tape, y, 3)
    });
    check("linear input", &x, |t, v| {
        let mut s = store.clone();
        let mut cx = Ctx::new(t, &mut s, true);
        let y = lin.forward(&mut cx, v)?;
        project(cx.tape, y, 4)
    });
}

pub fn batch_norm_layer_train_and_eval() {
    let mut r = rng(12);
    let mut store = ParamStore::new();
    let bn = BatchNorm2d::new(&mut store, "bn", 3);
    let x = uniform(&[2, 3, 3, 3], -1.0, 2.0, &mut r);
    check_params("batchnorm train", &mut store, |cx| {
        let xv = cx.tape.constant(x.clone());
        let y = bn.forward(cx, xv)?;
        project(cx.tape, y, 5)
    });
    let frozen = RefCell::new(store.clone());
    check("batchnorm eval input", &x, |t, v| {
        let mut s = frozen.borrow_mut();
        let mut cx = Ctx::new(t, &mut s, false);
        let y = bn.forward(&mut cx, v)?;
        project(cx.tape, y, 6)
    });
}

pub fn lstm_layer() {
    let mut r = rng(13);
    let mut store = ParamStore::new();
    let lstm = Lstm::new(&mut store, "lstm", 3, 4, &mut r);
    let steps: Vec<Tensor<f64>> = (0..3).map(|_| away_from_zero(&[2, 3], &mut r)).collect();
    check_params("lstm", &mut store, |cx| {
        let vs: Vec<Var> = steps.iter().map(|s| cx.tape.constant(s.clone())).collect();
        let h = lstm.forward_steps(cx, &vs)?;
        project(cx.tape, h, 7)
    });
    check("lstm first input", &steps[0], |t, v| {
        let mut s = store.clone();
        let mut cx = Ctx::new(t, &mut s, true);
        let rest: Vec<Var> = steps[1..].iter().map(|x| cx.tape.constant(x.clone())).collect();
        let mut all = vec![v];
        all.extend(rest);
        let h = lstm.forward_steps(&mut cx, &all)?;
        project(cx.tape, h, 8)
    });
}

pub fn composite_blocks() {
    let mut r = rng(14);
    let mut store = ParamStore::new();
    let unit = FeatureUnit::new(&mut store, "fu", 1, 2, &mut r);
    let dense = DenseBlock::new(&mut store, "db", 4, 2, &mut r);
    let up = UpsampleUnit::new(&mut store, "up", 2, &mut r);
    let res = ResBlock::new(&mut store, "res", 2, 1, &mut r);
    let res2 = ResBlock::new(&mut store, "res2", 2, 2, &mut r);
    jitter_biases(&mut store, 14);
    let x = uniform(&[2, 1, 4, 4], 0.5, 2.0, &mut r);
    let extra = uniform(&[2, 2, 4, 4], 0.5, 2.0, &mut r);
    let build = |cx: &mut Ctx<f64>, xv: Var| -> Result<Var> {
        let f = unit.forward(cx, xv)?;
        let e = cx.tape.constant(extra.clone());
        let d = dense.forward(cx, &[f, e])?;
        let d = res.forward(cx, d)?;
        let u = up.forward(cx, d)?;
        let u = res2.forward(cx, u)?;
        project(cx.tape, u, 9)
    };
    check_params("feature/dense/upsample/res blocks", &mut store, |cx| {
        let xv = cx.tape.constant(x.clone());
        build(cx, xv)
    });
    let s = RefCell::new(store.clone());
    check("blocks input", &x, |t, v| {
        let mut s = s.borrow_mut();
        let mut cx = Ctx::new(t, &mut s, true);
        build(&mut cx, v)
    });
}

pub fn domain_classifier() {
    let cfg = PadaConfig { classifier_channels: 3, hidden: 3, trunk_blocks: 1, ..PadaConfig::default() };
    let mut clf = DomainClassifier::<f64>::new(2, &cfg, 3);
    let feats = uniform(&[2, 2, 4, 4], -1.0, 1.0, &mut rng(15));
    let arch = clf.arch.clone();
    check_params("domain classifier", &mut clf.store, |cx| {
        let f = cx.tape.constant(feats.clone());
        let p = arch.forward(cx, f)?;
        project(cx.tape, p, 10)
    });
    let c = RefCell::new(clf);
    check("domain classifier input", &feats, |t, v| {
        let p = c.borrow_mut().forward(t, v)?;
        project(t, p, 11)
    });
}

fn tiny_stnet(temporal: bool) -> StnetConfig {
    StnetConfig {
        seq_len: 4,
        time_stride: 2,
        base_channels: 2,
        time_channels: 2,
        block_width: 2,
        upscale: 2,
        temporal,
    }
}

pub fn stnet_full_network() {
    let x = uniform(&[2, 4, 3, 3], 0.5, 2.0, &mut rng(16));
    for temporal in [true, false] {
        let mut model = Stnet::<f64>::new(&tiny_stnet(temporal), 21).unwrap();
        jitter_biases(&mut model.store, 21);
        let arch = model.arch.clone();
        check_params(&format!("stnet temporal={temporal}"), &mut model.store, |cx| {
            let xv = cx.tape.constant(x.clone());
            let (f, last) = arch.features(cx, xv, temporal)?;
            let y = arch.predict(cx, f, last)?;
            project(cx.tape, y, 12)
        });
        let m = RefCell::new(model);
        check(&format!("stnet input temporal={temporal}"), &x, |t, v| {
            let y = m.borrow_mut().forward_mode(t, v, true, temporal)?;
            project(t, y, 13)
        });
    }
}

pub fn pgnet_generator_and_discriminator() {
    let cfg = PgnetConfig {
        gen_channels: 2,
        embed_dim: 3,
        lstm_context: 3,
        disc_channels: 2,
        disc_layers: 2,
        poi_categories: 3,
        ..PgnetConfig::desk(4, 4, 2)
    };
    let mut r = rng(17);
    let mut model = Pgnet::<f64>::new(&cfg, 5).unwrap();
    jitter_biases(&mut model.gen_store, 5);
    jitter_biases(&mut model.disc_store, 6);
    let poi = uniform(&[2, 3, 4, 4], 0.1, 1.5, &mut r);
    let slots = [7, 30];
    let generator = model.generator.clone();
    check_params("pgnet generator", &mut model.gen_store, |cx| {
        let p = cx.tape.constant(poi.clone());
        let y = generator.forward(cx, &slots, p)?;
        project(cx.tape, y, 14)
    });
    let disc = model.discriminator.clone();
    let frames = uniform(&[2, 1, 4, 4], 0.0, 2.0, &mut r);
    check_params("pgnet discriminator", &mut model.disc_store, |cx| {
        let f = cx.tape.constant(frames.clone());
        let p = disc.forward(cx, f)?;
        project(cx.tape, p, 15)
    });
    let m = RefCell::new(model);
    check("pgnet generator poi input", &poi, |t, v| {
        let y = m.borrow_mut().generate(t, &slots, v)?;
        project(t, y, 16)
    });
    check("pgnet discriminator input", &frames, |t, v| {
        let p = m.borrow_mut().discriminate(t, v)?;
        project(t, p, 17)
    });
}
