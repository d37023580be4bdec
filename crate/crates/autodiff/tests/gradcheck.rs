//! Central finite-difference checks for every primitive and for a full
//! pre-norm transformer block.

use dtppo_autodiff::nn::{init_transformer_block, transformer_block};
use dtppo_autodiff::{truncated_normal, AttentionLayout, Graph, ParamStore, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Relative error with a 1e-6 floor on the denominator; central differences
/// at h = 1e-5 carry ~1e-11 absolute noise, which swamps smaller gradients.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Checks d(loss)/d(inputs) of `f` against central differences.
fn check_inputs<F>(inputs: Vec<Tensor>, f: F)
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Var,
{
    let store = ParamStore::new();
    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new(&store);
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };
    let mut g = Graph::new(&store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].rows(), inputs[i].cols()));
        for j in 0..inputs[i].len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= H;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(analytic.data()[j], fd));
        }
    }
    assert!(worst < TOL, "max relative error {worst}");
}

fn rand_tensor(seed: u64, rows: usize, cols: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    truncated_normal(&mut rng, rows, cols, 0.7)
}

/// Weighted sum so every output entry gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph<'_>, y: Var, seed: u64) -> Var {
    let [r, c] = g.shape(y);
    let w = g.constant(rand_tensor(seed, r, c));
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

#[test]
fn elementwise_and_broadcast_ops() {
    check_inputs(
        vec![rand_tensor(1, 3, 4), rand_tensor(2, 3, 4), rand_tensor(3, 1, 4)],
        |g, v| {
            let a = g.add(v[0], v[1]).unwrap();
            let b = g.mul(a, v[0]).unwrap();
            let c = g.sub(b, v[1]).unwrap();
            let d = g.add_row(c, v[2]).unwrap();
            let e = g.mul_row(d, v[2]).unwrap();
            let f = g.tanh(e);
            let h = g.sigmoid(f);
            let i = g.gelu(h);
            let j = g.exp(i);
            let k = g.scale(j, -1.7);
            let l = g.add_scalar(k, 0.3);
            weighted_sum(g, l, 9)
        },
    );
}

#[test]
fn matmul_layer_norm_softmax() {
    check_inputs(
        vec![rand_tensor(4, 3, 5), rand_tensor(5, 5, 4), rand_tensor(6, 1, 4), rand_tensor(7, 1, 4)],
        |g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            let y = g.layer_norm(y, v[2], v[3]).unwrap();
            let y = g.softmax_rows(y);
            weighted_sum(g, y, 10)
        },
    );
}

#[test]
fn structural_ops() {
    check_inputs(
        vec![rand_tensor(11, 4, 3), rand_tensor(12, 4, 2), rand_tensor(13, 2, 3)],
        |g, v| {
            let cc = g.concat_cols(&[v[0], v[1]]).unwrap();
            let sc = g.slice_cols(cc, 1, 3).unwrap();
            let cr = g.concat_rows(&[sc, v[2]]).unwrap();
            let gathered = g.gather_rows(cr, &[Some(5), None, Some(0), Some(5), Some(2)]).unwrap();
            let masked = g.mask_rows(gathered, &[true, true, false, true, true]).unwrap();
            let sums = g.sum_cols(masked);
            let m = g.mean(sums);
            let s = weighted_sum(g, masked, 14);
            g.add(m, s).unwrap()
        },
    );
    check_inputs(vec![rand_tensor(15, 6, 3), rand_tensor(16, 2, 3)], |g, v| {
        let y = g.add_tiled(v[0], v[1]).unwrap();
        weighted_sum(g, y, 17)
    });
}

#[test]
fn clamp_and_minimum_away_from_kinks() {
    let a = Tensor::row(&[-2.0, -0.3, 0.4, 1.9]);
    let b = Tensor::row(&[-1.5, 0.5, 0.1, 3.0]);
    check_inputs(vec![a, b], |g, v| {
        let c = g.clamp(v[0], -1.0, 1.0);
        let m = g.minimum(c, v[1]).unwrap();
        weighted_sum(g, m, 18)
    });
}

#[test]
fn masked_causal_attention() {
    let layout = AttentionLayout {
        seq_len: 4,
        heads: 2,
        valid: vec![true, true, false, true, true, true, true, false],
        causal: true,
    };
    check_inputs(
        vec![rand_tensor(20, 8, 6), rand_tensor(21, 8, 6), rand_tensor(22, 8, 6)],
        move |g, v| {
            let y = g.attention(v[0], v[1], v[2], layout.clone()).unwrap();
            weighted_sum(g, y, 23)
        },
    );
}

#[test]
fn transformer_block_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let mut store = ParamStore::new();
    init_transformer_block(&mut store, &mut rng, "blk", 5, 2).unwrap();
    // Move away from the zero-bias initialization so every path is exercised.
    let names: Vec<String> = store.names().to_vec();
    for name in &names {
        let id = store.id(name).unwrap();
        let noise = truncated_normal(&mut rng, store.value(id).rows(), store.value(id).cols(), 0.3);
        store.value_mut(id).add_assign(&noise);
    }
    let x = rand_tensor(31, 6, 5);
    let layout = AttentionLayout {
        seq_len: 3,
        heads: 2,
        valid: vec![true, true, true, true, false, true],
        causal: false,
    };
    let loss_of = |s: &ParamStore| -> (f64, Vec<Tensor>) {
        let mut g = Graph::new(s);
        let xv = g.constant(x.clone());
        let y = transformer_block(&mut g, xv, "blk", &layout).unwrap();
        let y = g.mask_rows(y, &layout.valid).unwrap();
        let l = weighted_sum(&mut g, y, 32);
        let grads = g.backward(l).unwrap().for_store(s);
        (g.value(l).item(), grads)
    };
    let (_, analytic) = loss_of(&store);
    let mut worst: f64 = 0.0;
    for (pi, name) in names.iter().enumerate() {
        let id = store.id(name).unwrap();
        for j in 0..store.value(id).len() {
            let mut plus = store.clone();
            plus.value_mut(id).data_mut()[j] += H;
            let mut minus = store.clone();
            minus.value_mut(id).data_mut()[j] -= H;
            let fd = (loss_of(&plus).0 - loss_of(&minus).0) / (2.0 * H);
            worst = worst.max(rel_err(analytic[pi].data()[j], fd));
        }
    }
    assert!(worst < TOL, "max relative error {worst}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn masked_key_values_never_leak(seed in 0u64..10_000, noise in -50.0f64..50.0) {
        let store = ParamStore::new();
        let q = rand_tensor(seed, 6, 4);
        let k = rand_tensor(seed + 1, 6, 4);
        let v = rand_tensor(seed + 2, 6, 4);
        let layout = AttentionLayout {
            seq_len: 3,
            heads: 2,
            valid: vec![true, false, true, true, true, false],
            causal: false,
        };
        let run = |k: &Tensor, v: &Tensor| {
            let mut g = Graph::new(&store);
            let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
            let o = g.attention(qv, kv, vv, layout.clone()).unwrap();
            g.value(o).clone()
        };
        let base = run(&k, &v);
        let (mut k2, mut v2) = (k.clone(), v.clone());
        for row in [1usize, 5] {
            for c in 0..4 {
                k2.set(row, c, noise + c as f64);
                v2.set(row, c, -noise * c as f64);
            }
        }
        prop_assert_eq!(base, run(&k2, &v2));
    }
}
