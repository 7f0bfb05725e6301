use std::sync::Arc;

use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::error::Result;
use crate::rng;

fn f64s(v: &[f64]) -> Vec<f64> {
    v.to_vec()
}

#[test]
fn matmul_matches_hand_case() {
    let g = Graph::<f64>::new();
    let a = g.constant(f64s(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), &[2, 3]).unwrap();
    let b = g.constant(f64s(&[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]), &[3, 2]).unwrap();
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.shape(), &[2, 2]);
    assert_eq!(c.to_vec(), vec![58.0, 64.0, 139.0, 154.0]);
}

#[test]
fn matmul_identity_is_noop() {
    let g = Graph::<f64>::new();
    let mut r = rng::stream(7, "t/matmul");
    let data: Vec<f64> = (0..12).map(|_| r.gen_range(-2.0..2.0)).collect();
    let a = g.constant(data.clone(), &[3, 4]).unwrap();
    let mut eye = vec![0.0; 16];
    for i in 0..4 {
        eye[i * 4 + i] = 1.0;
    }
    let i4 = g.constant(eye, &[4, 4]).unwrap();
    let c = a.matmul(&i4).unwrap();
    for (x, y) in c.to_vec().iter().zip(&data) {
        assert!((x - y).abs() < 1e-12);
    }
}

/// Independent triple-loop reference for matmul.
fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

#[test]
fn matmul_matches_oracle_on_random_inputs() {
    let mut r = rng::stream(11, "t/matmul_oracle");
    for _ in 0..20 {
        let (m, k, n) = (r.gen_range(1..6), r.gen_range(1..6), r.gen_range(1..6));
        let a: Vec<f64> = (0..m * k).map(|_| r.gen_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| r.gen_range(-3.0..3.0)).collect();
        let g = Graph::<f64>::new();
        let ta = g.constant(a.clone(), &[m, k]).unwrap();
        let tb = g.constant(b.clone(), &[k, n]).unwrap();
        let c = ta.matmul(&tb).unwrap().to_vec();
        let want = matmul_oracle(&a, &b, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }
}

#[test]
fn matmul_rejects_mismatched_inner_dims() {
    let g = Graph::<f64>::new();
    let a = g.constant(vec![0.0; 6], &[2, 3]).unwrap();
    let b = g.constant(vec![0.0; 8], &[4, 2]).unwrap();
    assert!(a.matmul(&b).is_err());
}

#[test]
fn ops_reject_cross_graph_operands() {
    let g1 = Graph::<f64>::new();
    let g2 = Graph::<f64>::new();
    let a = g1.constant(vec![1.0], &[1]).unwrap();
    let b = g2.constant(vec![1.0], &[1]).unwrap();
    assert!(a.add(&b).is_err());
}

#[test]
fn softmax_is_stable_for_large_logits() {
    let g = Graph::<f64>::new();
    let x = g.constant(vec![1000.0, 1001.0], &[1, 2]).unwrap();
    let y = x.softmax_rows().unwrap().to_vec();
    assert!(y.iter().all(|v| v.is_finite()));
    let e = std::f64::consts::E;
    assert!((y[1] / y[0] - e).abs() < 1e-9);
    assert!((y[0] + y[1] - 1.0).abs() < 1e-12);
}

#[test]
fn masked_softmax_zeroes_disallowed_and_matches_plain_when_open() {
    let g = Graph::<f64>::new();
    let x = g.constant(vec![0.3, -1.0, 2.0, 0.5, 0.5, 0.5], &[2, 3]).unwrap();
    let allowed = Arc::new(vec![true, false, true, true, true, true]);
    let y = x.masked_softmax_rows(&allowed).unwrap().to_vec();
    assert_eq!(y[1], 0.0);
    assert!((y[0] + y[2] - 1.0).abs() < 1e-12);
    // Fully open row equals plain softmax.
    let plain = x.softmax_rows().unwrap().to_vec();
    for j in 3..6 {
        assert!((y[j] - plain[j]).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_standardizes_rows() {
    let g = Graph::<f64>::new();
    let mut r = rng::stream(3, "t/ln");
    let data: Vec<f64> = (0..14).map(|_| r.gen_range(-5.0..5.0)).collect();
    let x = g.constant(data, &[2, 7]).unwrap();
    let gain = g.constant(vec![1.0; 7], &[7]).unwrap();
    let bias = g.constant(vec![0.0; 7], &[7]).unwrap();
    let y = x.layer_norm(&gain, &bias, 1e-9).unwrap().to_vec();
    for i in 0..2 {
        let row = &y[i * 7..(i + 1) * 7];
        let mean: f64 = row.iter().sum::<f64>() / 7.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
        assert!(mean.abs() < 1e-9, "row mean {mean}");
        assert!((var - 1.0).abs() < 1e-6, "row var {var}");
    }
}

/// Independent 6-loop reference for 3x3 conv with zero padding.
fn conv_oracle(x: &[f64], w: &[f64], b: &[f64], ci: usize, co: usize, h: usize, wd: usize) -> Vec<f64> {
    let mut out = vec![0.0; co * h * wd];
    for o in 0..co {
        for y in 0..h {
            for xx in 0..wd {
                let mut s = b[o];
                for c in 0..ci {
                    for dy in 0..3i64 {
                        for dx in 0..3i64 {
                            let sy = y as i64 + dy - 1;
                            let sx = xx as i64 + dx - 1;
                            if sy < 0 || sy >= h as i64 || sx < 0 || sx >= wd as i64 {
                                continue;
                            }
                            s += w[((o * ci + c) * 3 + dy as usize) * 3 + dx as usize]
                                * x[(c * h + sy as usize) * wd + sx as usize];
                        }
                    }
                }
                out[(o * h + y) * wd + xx] = s;
            }
        }
    }
    out
}

#[test]
fn conv3x3_matches_oracle() {
    let mut r = rng::stream(5, "t/conv");
    for _ in 0..5 {
        let (ci, co, h, wd) = (2, 3, 5, 4);
        let x: Vec<f64> = (0..ci * h * wd).map(|_| r.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..co * ci * 9).map(|_| r.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..co).map(|_| r.gen_range(-1.0..1.0)).collect();
        let g = Graph::<f64>::new();
        let tx = g.constant(x.clone(), &[ci, h, wd]).unwrap();
        let tw = g.constant(w.clone(), &[co, ci, 3, 3]).unwrap();
        let tb = g.constant(b.clone(), &[co]).unwrap();
        let got = tx.conv3x3(&tw, &tb).unwrap().to_vec();
        let want = conv_oracle(&x, &w, &b, ci, co, h, wd);
        for (a, e) in got.iter().zip(&want) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn avg_pool_halves_each_dim() {
    let g = Graph::<f64>::new();
    let x = g.constant(f64s(&[1.0, 2.0, 3.0, 4.0]), &[1, 2, 2]).unwrap();
    let y = x.avg_pool2().unwrap();
    assert_eq!(y.shape(), &[1, 1, 1]);
    assert!((y.item() - 2.5).abs() < 1e-12);
}

#[test]
fn bilinear_2x2_to_4x4_matches_hand_computation() {
    let g = Graph::<f64>::new();
    let x = g.constant(f64s(&[0.0, 1.0, 2.0, 3.0]), &[1, 2, 2]).unwrap();
    let y = x.bilinear(4, 4).unwrap().to_vec();
    #[rustfmt::skip]
    let want = [
        0.0, 0.25, 0.75, 1.0,
        0.5, 0.75, 1.25, 1.5,
        1.5, 1.75, 2.25, 2.5,
        2.0, 2.25, 2.75, 3.0,
    ];
    for (a, e) in y.iter().zip(&want) {
        assert!((a - e).abs() < 1e-12, "{a} vs {e}");
    }
}

#[test]
fn bilinear_same_size_is_identity() {
    let mut r = rng::stream(9, "t/bilin");
    let data: Vec<f64> = (0..2 * 3 * 5).map(|_| r.gen_range(-1.0..1.0)).collect();
    let g = Graph::<f64>::new();
    let x = g.constant(data.clone(), &[2, 3, 5]).unwrap();
    let y = x.bilinear(3, 5).unwrap().to_vec();
    for (a, e) in y.iter().zip(&data) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn mask_pool_is_weighted_average() {
    let g = Graph::<f64>::new();
    let x = g.constant(f64s(&[1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0]), &[2, 2, 2]).unwrap();
    // Pool over the two left pixels with equal weight.
    let w = Arc::new(vec![0.5, 0.0, 0.5, 0.0]);
    let y = x.mask_pool(w).unwrap();
    assert_eq!(y.shape(), &[1, 2]);
    let v = y.to_vec();
    assert!((v[0] - 2.0).abs() < 1e-12);
    assert!((v[1] - 20.0).abs() < 1e-12);
}

#[test]
fn bce_hand_values() {
    let g = Graph::<f64>::new();
    let x = g.constant(vec![0.0], &[1]).unwrap();
    let l = x.bce_with_logits(&[1.0], &[1.0]).unwrap();
    assert!((l.item() - std::f64::consts::LN_2).abs() < 1e-12);
    let x2 = g.constant(vec![30.0], &[1]).unwrap();
    let l2 = x2.bce_with_logits(&[1.0], &[1.0]).unwrap();
    assert!(l2.item() < 1e-12);
    let l3 = x2.bce_with_logits(&[0.0], &[1.0]).unwrap();
    assert!((l3.item() - 30.0).abs() < 1e-6);
}

#[test]
fn softmax_ce_hand_values() {
    let g = Graph::<f64>::new();
    let x = g.constant(vec![0.0; 4], &[1, 4]).unwrap();
    let l = x.softmax_ce_rows(&[2], &[1.0]).unwrap();
    assert!((l.item() - 4.0f64.ln()).abs() < 1e-12);
    // Weighted rows: weight 0 rows contribute nothing.
    let x2 = g.constant(vec![0.0, 0.0, 5.0, -5.0], &[2, 2]).unwrap();
    let l2 = x2.softmax_ce_rows(&[0, 0], &[1.0, 0.0]).unwrap();
    assert!((l2.item() - 2.0f64.ln()).abs() < 1e-12);
}

#[test]
fn backward_requires_scalar_loss() {
    let g = Graph::<f64>::new();
    let x = g.leaf(vec![1.0, 2.0], &[2], true).unwrap();
    let y = x.scale(2.0);
    assert!(g.backward(&y).is_err());
}

#[test]
fn fan_out_gradients_accumulate() {
    let g = Graph::<f64>::new();
    let x = g.leaf(vec![3.0], &[1], true).unwrap();
    let y = x.add(&x).unwrap().sum_all();
    g.backward(&y).unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0]);
}

#[test]
fn lifted_param_reuse_accumulates_into_one_leaf() {
    let mut store = ParamStore::<f64>::new(0);
    store.register("w", &[2, 2], Init::Ones).unwrap();
    let g = Graph::<f64>::new();
    let w1 = store.lift(&g, "w").unwrap();
    let w2 = store.lift(&g, "w").unwrap();
    let a = g.constant(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
    let loss = w1.matmul(&a).unwrap().sum_all().add(&w2.mul(&w2).unwrap().sum_all()).unwrap();
    g.backward(&loss).unwrap();
    // d/dw [sum(w.a) + sum(w*w)] = col-sums broadcast + 2w
    let grad = g.lifted_grad("w").unwrap();
    assert_eq!(grad, vec![3.0 + 2.0, 7.0 + 2.0, 3.0 + 2.0, 7.0 + 2.0]);
}

#[test]
fn frozen_leaves_get_no_grad() {
    let g = Graph::<f64>::new();
    let x = g.leaf(vec![1.0], &[1], false).unwrap();
    let y = x.scale(3.0).sum_all();
    g.backward(&y).unwrap();
    assert!(x.grad().is_none());
}

// ---- grad_check targets ----------------------------------------------------

struct Square;
impl GradTarget for Square {
    fn loss<E: Elem>(&self, g: &Graph<E>, p: &ParamStore<E>) -> Result<Tensor<E>> {
        let x = p.lift(g, "x")?;
        Ok(x.mul(&x)?.sum_all())
    }
}

#[test]
fn grad_check_square_at_3() {
    let mut store = ParamStore::<f64>::new(0);
    store.register("x", &[1], Init::Const(3.0)).unwrap();
    // Analytic gradient is exactly 6.
    let g = Graph::<f64>::new();
    let loss = Square.loss(&g, &store).unwrap();
    g.backward(&loss).unwrap();
    assert!((g.lifted_grad("x").unwrap()[0] - 6.0).abs() < 1e-12);
    let report = grad_check(&Square, &store, &GradCheckOpts::for_dtype("f64")).unwrap();
    assert!(report.max_rel_error < 1e-6, "{report}");
}

struct SoftmaxSum;
impl GradTarget for SoftmaxSum {
    fn loss<E: Elem>(&self, g: &Graph<E>, p: &ParamStore<E>) -> Result<Tensor<E>> {
        let x = p.lift(g, "x")?;
        Ok(x.softmax_rows()?.sum_all())
    }
}

#[test]
fn softmax_sum_has_zero_gradient() {
    let mut store = ParamStore::<f64>::new(1);
    store.register("x", &[2, 5], Init::Normal(1.0)).unwrap();
    let g = Graph::<f64>::new();
    let loss = SoftmaxSum.loss(&g, &store).unwrap();
    g.backward(&loss).unwrap();
    for v in g.lifted_grad("x").unwrap() {
        assert!(v.abs() < 1e-12, "grad {v} should vanish");
    }
}

struct Mlp;
impl GradTarget for Mlp {
    fn loss<E: Elem>(&self, g: &Graph<E>, p: &ParamStore<E>) -> Result<Tensor<E>> {
        let x = g.constant(
            (0..8).map(|i| E::from_f64((i as f64 * 0.37).sin())).collect(),
            &[2, 4],
        )?;
        let h = x.matmul(&p.lift(g, "w1")?)?.add_bias(&p.lift(g, "b1")?)?.relu();
        let ln = h.layer_norm(&p.lift(g, "gain")?, &p.lift(g, "bias")?, E::from_f64(1e-5))?;
        let out = ln.matmul(&p.lift(g, "w2")?)?;
        let t = vec![E::one(), E::zero(), E::zero(), E::one(), E::one(), E::zero()];
        let w = vec![E::one(); 6];
        out.bce_with_logits(&t, &w)
    }
}

fn mlp_store<E: Elem>() -> ParamStore<E> {
    let mut s = ParamStore::<E>::new(42);
    s.register("w1", &[4, 5], Init::Normal(0.5)).unwrap();
    s.register("b1", &[5], Init::Normal(0.2)).unwrap();
    s.register("gain", &[5], Init::Ones).unwrap();
    s.register("bias", &[5], Init::Zeros).unwrap();
    s.register("w2", &[5, 3], Init::Normal(0.5)).unwrap();
    s
}

#[test]
fn grad_check_mlp_f64() {
    let store = mlp_store::<f64>();
    let mut opts = GradCheckOpts::for_dtype("f64");
    opts.probes_per_param = 64;
    let report = grad_check(&Mlp, &store, &opts).unwrap();
    assert!(report.max_rel_error < 1e-5, "{report}");
}

#[test]
fn grad_check_mlp_f32() {
    let store = mlp_store::<f32>();
    let mut opts = GradCheckOpts::for_dtype("f32");
    opts.probes_per_param = 64;
    let report = grad_check(&Mlp, &store, &opts).unwrap();
    assert!(report.max_rel_error < 1e-3, "{report}");
}

struct ConvChain;
impl GradTarget for ConvChain {
    fn loss<E: Elem>(&self, g: &Graph<E>, p: &ParamStore<E>) -> Result<Tensor<E>> {
        let img = g.constant(
            (0..2 * 8 * 8).map(|i| E::from_f64((i as f64 * 0.11).cos())).collect(),
            &[2, 8, 8],
        )?;
        let f = img.conv3x3(&p.lift(g, "cw")?, &p.lift(g, "cb")?)?.relu();
        let pooled = f.avg_pool2()?; // [3,4,4]
        let up = pooled.bilinear(8, 8)?;
        let mut w = vec![E::zero(); 64];
        for y in 2..6 {
            for x in 2..6 {
                w[y * 8 + x] = E::from_f64(1.0 / 16.0);
            }
        }
        let pooled_vec = up.mask_pool(Arc::new(w))?; // [1,3]
        let t = vec![E::one(), E::zero(), E::one()];
        let wt = vec![E::one(); 3];
        pooled_vec.bce_with_logits(&t, &wt)
    }
}

#[test]
fn grad_check_conv_pool_resize_chain() {
    let mut store = ParamStore::<f64>::new(7);
    store.register("cw", &[3, 2, 3, 3], Init::Normal(0.3)).unwrap();
    store.register("cb", &[3], Init::Normal(0.1)).unwrap();
    let mut opts = GradCheckOpts::for_dtype("f64");
    opts.probes_per_param = 64;
    let report = grad_check(&ConvChain, &store, &opts).unwrap();
    assert!(report.max_rel_error < 1e-5, "{report}");
}

struct AttentionLike;
impl GradTarget for AttentionLike {
    fn loss<E: Elem>(&self, g: &Graph<E>, p: &ParamStore<E>) -> Result<Tensor<E>> {
        let x = g.constant(
            (0..5 * 4).map(|i| E::from_f64(((i * 7 % 11) as f64 - 5.0) * 0.2)).collect(),
            &[5, 4],
        )?;
        let q = x.matmul(&p.lift(g, "wq")?)?;
        let k = x.matmul(&p.lift(g, "wk")?)?;
        let v = x.matmul(&p.lift(g, "wv")?)?;
        let scores = q.matmul(&k.transpose()?)?.scale(E::from_f64(0.5));
        // Lower-triangular mask.
        let mut allowed = vec![false; 25];
        for i in 0..5 {
            for j in 0..=i {
                allowed[i * 5 + j] = true;
            }
        }
        let attn = scores.masked_softmax_rows(&Arc::new(allowed))?;
        let out = attn.matmul(&v)?;
        let tgt: Vec<usize> = vec![0, 1, 2, 0, 1];
        let wts = vec![E::one(); 5];
        out.softmax_ce_rows(&tgt, &wts)
    }
}

#[test]
fn grad_check_masked_attention_block() {
    let mut store = ParamStore::<f64>::new(13);
    store.register("wq", &[4, 3], Init::Normal(0.5)).unwrap();
    store.register("wk", &[4, 3], Init::Normal(0.5)).unwrap();
    store.register("wv", &[4, 3], Init::Normal(0.5)).unwrap();
    let mut opts = GradCheckOpts::for_dtype("f64");
    opts.probes_per_param = 36;
    let report = grad_check(&AttentionLike, &store, &opts).unwrap();
    assert!(report.max_rel_error < 1e-5, "{report}");
}

struct GatherConcatSlice;
impl GradTarget for GatherConcatSlice {
    fn loss<E: Elem>(&self, g: &Graph<E>, p: &ParamStore<E>) -> Result<Tensor<E>> {
        let table = p.lift(g, "emb")?;
        let rows = table.gather_rows(&[2, 0, 2, 1])?; // repeated index: grads must accumulate
        let head = rows.slice_rows(0, 2)?;
        let tail = rows.slice_rows(2, 2)?;
        let both = concat_cols(&[head, tail])?;
        let sq = both.mul(&both)?;
        Ok(sq.slice_cols(1, 4)?.mean_all())
    }
}

#[test]
fn grad_check_gather_slice_concat() {
    let mut store = ParamStore::<f64>::new(21);
    store.register("emb", &[4, 3], Init::Normal(1.0)).unwrap();
    let mut opts = GradCheckOpts::for_dtype("f64");
    opts.probes_per_param = 12;
    let report = grad_check(&GatherConcatSlice, &store, &opts).unwrap();
    assert!(report.max_rel_error < 1e-5, "{report}");
}

struct DivMeanChain;
impl GradTarget for DivMeanChain {
    fn loss<E: Elem>(&self, g: &Graph<E>, p: &ParamStore<E>) -> Result<Tensor<E>> {
        let x = p.lift(g, "x")?;
        let s = x.sigmoid();
        let num = s.mul(&s)?.sum_all().scale(E::from_f64(2.0)).add_const(E::from_f64(0.5));
        let den = s.sum_all().add_const(E::from_f64(1.5));
        let frac = num.div(&den)?;
        let m = x.mean_rows()?.sum_all();
        frac.add(&m)?.add_scalar_t(&p.lift(g, "c")?)
    }
}

#[test]
fn grad_check_scalar_ratio_chain() {
    let mut store = ParamStore::<f64>::new(33);
    store.register("x", &[3, 4], Init::Normal(0.8)).unwrap();
    store.register("c", &[1], Init::Const(0.3)).unwrap();
    let mut opts = GradCheckOpts::for_dtype("f64");
    opts.probes_per_param = 13;
    let report = grad_check(&DivMeanChain, &store, &opts).unwrap();
    assert!(report.max_rel_error < 1e-5, "{report}");
}

// ---- store behavior ---------------------------------------------------------

#[test]
fn init_is_order_independent_and_seeded() {
    let mut a = ParamStore::<f64>::new(5);
    a.register("p", &[8], Init::Normal(1.0)).unwrap();
    a.register("q", &[8], Init::Normal(1.0)).unwrap();
    let mut b = ParamStore::<f64>::new(5);
    b.register("q", &[8], Init::Normal(1.0)).unwrap();
    b.register("p", &[8], Init::Normal(1.0)).unwrap();
    assert_eq!(a.get("p").unwrap().data, b.get("p").unwrap().data);
    assert_eq!(a.get("q").unwrap().data, b.get("q").unwrap().data);
    let mut c = ParamStore::<f64>::new(6);
    c.register("p", &[8], Init::Normal(1.0)).unwrap();
    assert_ne!(a.get("p").unwrap().data, c.get("p").unwrap().data);
}

#[test]
fn freeze_predicate_controls_grads() {
    let mut store = ParamStore::<f64>::new(0);
    store.register("vision/w", &[2], Init::Ones).unwrap();
    store.register("lm/w", &[2], Init::Ones).unwrap();
    store.set_trainable_where(|n| !n.starts_with("vision/"));
    let g = Graph::<f64>::new();
    let a = store.lift(&g, "vision/w").unwrap();
    let b = store.lift(&g, "lm/w").unwrap();
    let loss = a.mul(&b).unwrap().sum_all();
    g.backward(&loss).unwrap();
    assert!(g.lifted_grad("vision/w").is_none());
    assert_eq!(g.lifted_grad("lm/w").unwrap(), vec![1.0, 1.0]);
}

#[test]
fn snapshot_restore_roundtrip() {
    let mut a = ParamStore::<f32>::new(9);
    a.register("w", &[3, 2], Init::Normal(1.0)).unwrap();
    a.register("b", &[2], Init::Uniform(-1.0, 1.0)).unwrap();
    let snap = a.snapshot();
    let mut b = ParamStore::<f32>::new(1234);
    b.register("w", &[3, 2], Init::Zeros).unwrap();
    b.register("b", &[2], Init::Zeros).unwrap();
    b.restore(&snap).unwrap();
    assert_eq!(a.get("w").unwrap().data, b.get("w").unwrap().data);
    assert_eq!(a.get("b").unwrap().data, b.get("b").unwrap().data);
    // Shape mismatch is rejected.
    let mut c = ParamStore::<f32>::new(0);
    c.register("w", &[2, 3], Init::Zeros).unwrap();
    c.register("b", &[2], Init::Zeros).unwrap();
    assert!(c.restore(&snap).is_err());
}

// ---- properties --------------------------------------------------------------

proptest! {
    #[test]
    fn softmax_rows_always_normalize(rows in 1usize..4, cols in 1usize..8, seed in 0u64..1000) {
        let mut r = rng::stream(seed, "prop/softmax");
        let data: Vec<f64> = (0..rows * cols).map(|_| r.gen_range(-60.0..60.0)).collect();
        let g = Graph::<f64>::new();
        let x = g.constant(data, &[rows, cols]).unwrap();
        let y = x.softmax_rows().unwrap().to_vec();
        for i in 0..rows {
            let s: f64 = y[i * cols..(i + 1) * cols].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(y[i * cols..(i + 1) * cols].iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn masked_softmax_rows_normalize_over_allowed(seed in 0u64..1000) {
        let mut r = rng::stream(seed, "prop/masked");
        let (rows, cols) = (3usize, 6usize);
        let data: Vec<f64> = (0..rows * cols).map(|_| r.gen_range(-30.0..30.0)).collect();
        let mask: Vec<bool> = (0..rows * cols).map(|_| r.gen_bool(0.6)).collect();
        let g = Graph::<f64>::new();
        let x = g.constant(data, &[rows, cols]).unwrap();
        let y = x.masked_softmax_rows(&Arc::new(mask.clone())).unwrap().to_vec();
        for i in 0..rows {
            let any = mask[i * cols..(i + 1) * cols].iter().any(|&b| b);
            let s: f64 = y[i * cols..(i + 1) * cols].iter().sum();
            if any {
                prop_assert!((s - 1.0).abs() < 1e-9);
            } else {
                prop_assert_eq!(s, 0.0);
            }
            for j in 0..cols {
                if !mask[i * cols + j] {
                    prop_assert_eq!(y[i * cols + j], 0.0);
                }
            }
        }
    }

    #[test]
    fn backward_populates_every_trainable_leaf_it_reaches(seed in 0u64..200) {
        let mut store = ParamStore::<f64>::new(seed);
        store.register("a", &[2, 3], Init::Normal(1.0)).unwrap();
        store.register("b", &[3, 2], Init::Normal(1.0)).unwrap();
        let g = Graph::<f64>::new();
        let a = store.lift(&g, "a").unwrap();
        let b = store.lift(&g, "b").unwrap();
        let loss = a.matmul(&b).unwrap().sigmoid().mean_all();
        g.backward(&loss).unwrap();
        prop_assert!(g.lifted_grad("a").is_some());
        prop_assert!(g.lifted_grad("b").is_some());
        prop_assert!(g.lifted_grad("a").unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn transpose_roundtrips(rows in 1usize..5, cols in 1usize..5, seed in 0u64..100) {
        let mut r = rng::stream(seed, "prop/transpose");
        let data: Vec<f64> = (0..rows * cols).map(|_| r.gen_range(-9.0..9.0)).collect();
        let g = Graph::<f64>::new();
        let x = g.constant(data.clone(), &[rows, cols]).unwrap();
        let y = x.transpose().unwrap().transpose().unwrap();
        prop_assert_eq!(y.to_vec(), data);
    }
}

#[test]
fn backward_twice_is_deterministic() {
    let store = mlp_store::<f32>();
    let run = || {
        let g = Graph::<f32>::new();
        let loss = Mlp.loss(&g, &store).unwrap();
        g.backward(&loss).unwrap();
        (loss.item(), g.lifted_grad("w1").unwrap())
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1, l2);
    assert_eq!(g1, g2);
}
