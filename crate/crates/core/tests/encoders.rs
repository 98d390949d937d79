mod common;

use cvl::encoders::{
    co_attention_block, dual_stream_encode, multi_head_attention, scaled_dot_attention,
    self_attention_block, single_stream_encode, AttentionBlockParams, CoAttentionParams,
    DualStreamParams, Pooler, SingleStreamParams, StreamOutput,
};
use cvl::engine::{grad_check, EngineError, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: usize = 8;
const HEADS: usize = 2;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], common::random_vec(rng, rows * cols)).unwrap()
}

fn block(store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng) -> AttentionBlockParams {
    AttentionBlockParams::new(store, name, H, HEADS, 0.3, 1e-12, rng).unwrap()
}

fn dual(
    store: &mut ParamStore,
    layers: usize,
    co: usize,
    rng: &mut ChaCha8Rng,
) -> DualStreamParams {
    DualStreamParams {
        text_blocks: (0..layers)
            .map(|i| block(store, &format!("t{i}"), rng))
            .collect(),
        visual_blocks: (0..layers)
            .map(|i| block(store, &format!("v{i}"), rng))
            .collect(),
        co_blocks: (0..co)
            .map(|i| CoAttentionParams {
                text: block(store, &format!("ct{i}"), rng),
                visual: block(store, &format!("cv{i}"), rng),
            })
            .collect(),
        text_pooler: Pooler::new(store, "tp", H, 0.3, rng).unwrap(),
        visual_pooler: Pooler::new(store, "vp", H, 0.3, rng).unwrap(),
    }
}

fn single(store: &mut ParamStore, layers: usize, rng: &mut ChaCha8Rng) -> SingleStreamParams {
    SingleStreamParams {
        blocks: (0..layers)
            .map(|i| block(store, &format!("s{i}"), rng))
            .collect(),
        pooler: Pooler::new(store, "sp", H, 0.3, rng).unwrap(),
    }
}

struct Encoded {
    text: Tensor,
    visual: Tensor,
    pooled: Tensor,
}

fn materialize(tape: &Tape<'_>, out: StreamOutput) -> Encoded {
    Encoded {
        text: tape.tensor(out.text_hidden),
        visual: tape.tensor(out.visual_hidden),
        pooled: tape.tensor(out.pooled),
    }
}

fn run_dual(
    store: &ParamStore,
    p: &DualStreamParams,
    l: &Tensor,
    v: &Tensor,
    tm: &[u8],
    rm: &[u8],
) -> Encoded {
    let mut tape = Tape::inference();
    let (lv, vv) = (tape.constant(l.clone()), tape.constant(v.clone()));
    let out = dual_stream_encode(&mut tape, store, lv, vv, tm, rm, p).unwrap();
    materialize(&tape, out)
}

fn run_single(
    store: &ParamStore,
    p: &SingleStreamParams,
    l: &Tensor,
    v: &Tensor,
    tm: &[u8],
    rm: &[u8],
) -> Encoded {
    let mut tape = Tape::inference();
    let (lv, vv) = (tape.constant(l.clone()), tape.constant(v.clone()));
    let out = single_stream_encode(&mut tape, store, lv, vv, tm, rm, p).unwrap();
    materialize(&tape, out)
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "coordinate {i}: {x} vs {y}");
    }
}

#[test]
fn one_unmasked_key_returns_its_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut tape = Tape::new();
    let q = tape.constant(random(&mut rng, 3, H));
    let k = tape.constant(random(&mut rng, 4, H));
    let v = tape.constant(random(&mut rng, 4, H));
    let vt = tape.tensor(v);
    let att = scaled_dot_attention(&mut tape, q, k, v, &[0, 0, 1, 0], HEADS).unwrap();
    let ctx = tape.tensor(att.context);
    for r in 0..3 {
        assert_eq!(ctx.row(r), vt.row(2));
    }
}

#[test]
fn attention_weights_are_distributions_over_unmasked_keys() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mask = [1, 0, 1, 1, 0];
    let mut tape = Tape::new();
    let q = tape.constant(random(&mut rng, 4, H));
    let k = tape.constant(random(&mut rng, 5, H));
    let v = tape.constant(random(&mut rng, 5, H));
    let att = scaled_dot_attention(&mut tape, q, k, v, &mask, HEADS).unwrap();
    assert_eq!(att.weights.len(), HEADS);
    for w in att.weights {
        let w = tape.tensor(w);
        for r in 0..4 {
            let row = w.row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (j, &m) in mask.iter().enumerate() {
                if m == 0 {
                    assert!(row[j] < 1e-40);
                }
            }
        }
    }
}

#[test]
fn stacked_blocks_keep_shape_and_reject_full_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let blocks: Vec<_> = (0..3)
        .map(|i| block(&mut store, &format!("b{i}"), &mut rng))
        .collect();
    let x0 = random(&mut rng, 5, H);
    let mut tape = Tape::inference();
    let mut x = tape.constant(x0);
    for b in &blocks {
        x = self_attention_block(&mut tape, &store, x, &[1, 1, 1, 0, 0], b).unwrap();
    }
    assert_eq!(tape.shape(x), &[5, H]);

    let err = self_attention_block(&mut tape, &store, x, &[0; 5], &blocks[0]).unwrap_err();
    assert_eq!(err.kind(), "contract");
}

#[test]
fn masked_query_rows_pass_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let b = block(&mut store, "b", &mut rng);
    let x0 = random(&mut rng, 4, H);
    let mut tape = Tape::inference();
    let x = tape.constant(x0.clone());
    let y = self_attention_block(&mut tape, &store, x, &[1, 1, 0, 0], &b).unwrap();
    let y = tape.tensor(y);
    assert_eq!(y.row(2), x0.row(2));
    assert_eq!(y.row(3), x0.row(3));
    assert_ne!(y.row(0), x0.row(0));
}

#[test]
fn constant_keys_give_constant_attention_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let b = block(&mut store, "b", &mut rng);
    let row = common::random_vec(&mut rng, H);
    let y = Tensor::new(vec![3, H], row.repeat(3)).unwrap();

    // without projections the context is the shared row itself
    let mut tape = Tape::inference();
    let q = tape.constant(random(&mut rng, 5, H));
    let yv = tape.constant(y.clone());
    let att = scaled_dot_attention(&mut tape, q, yv, yv, &[1, 1, 0], HEADS).unwrap();
    let ctx = tape.tensor(att.context);
    for r in 0..5 {
        assert_close(ctx.row(r), &row, 1e-12);
    }

    // with projections every query still receives the same vector
    let mut tape = Tape::inference();
    let xv = tape.constant(random(&mut rng, 5, H));
    let yv = tape.constant(y);
    let out = multi_head_attention(&mut tape, &store, xv, yv, &[1, 1, 1], &b).unwrap();
    let out = tape.tensor(out);
    for r in 1..5 {
        assert_close(out.row(r), out.row(0), 1e-12);
    }
}

#[test]
fn co_attention_is_symmetric_in_its_roles() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let (px, py) = (
        block(&mut store, "x", &mut rng),
        block(&mut store, "y", &mut rng),
    );
    let (x0, y0) = (random(&mut rng, 4, H), random(&mut rng, 3, H));
    let (mx, my) = ([1, 1, 1, 0], [1, 0, 1]);

    let mut tape = Tape::inference();
    let (x, y) = (tape.constant(x0.clone()), tape.constant(y0.clone()));
    let (ox, oy) = co_attention_block(&mut tape, &store, x, y, &mx, &my, &px, &py).unwrap();
    let (ox, oy) = (tape.tensor(ox), tape.tensor(oy));

    let mut tape = Tape::inference();
    let (y, x) = (tape.constant(y0), tape.constant(x0));
    let (sy, sx) = co_attention_block(&mut tape, &store, y, x, &my, &mx, &py, &px).unwrap();
    assert_eq!(common::bits(tape.value(sx)), common::bits(ox.data()));
    assert_eq!(common::bits(tape.value(sy)), common::bits(oy.data()));
    assert_eq!(ox.shape(), &[4, H]);
    assert_eq!(oy.shape(), &[3, H]);
}

#[test]
fn co_attention_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let (px, py) = (
        block(&mut store, "x", &mut rng),
        block(&mut store, "y", &mut rng),
    );
    let store: &'static ParamStore = Box::leak(Box::new(store));
    let inputs = [random(&mut rng, 3, H), random(&mut rng, 4, H)];
    let weights = random(&mut rng, 7, H);
    let err = grad_check(
        |t, v| {
            let (ox, oy) =
                co_attention_block(t, store, v[0], v[1], &[1, 1, 0], &[1, 0, 1, 1], &px, &py)
                    .map_err(|e| EngineError::Contract(e.to_string()))?;
            let both = t.concat(&[ox, oy], 0)?;
            let w = t.constant(weights.clone());
            let p = t.mul(both, w)?;
            Ok(t.sum(p))
        },
        &inputs,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn dual_stream_gradients_match_on_two_layers() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let p = dual(&mut store, 2, 2, &mut rng);
    let store: &'static ParamStore = Box::leak(Box::new(store));
    let inputs = [random(&mut rng, 5, H), random(&mut rng, 3, H)];
    let weights = random(&mut rng, 1, H);
    let err = grad_check(
        |t, v| {
            let out = dual_stream_encode(t, store, v[0], v[1], &[1, 1, 1, 1, 0], &[1, 1, 0], &p)
                .map_err(|e| EngineError::Contract(e.to_string()))?;
            let w = t.constant(weights.clone());
            let y = t.mul(out.pooled, w)?;
            let s = t.sum(y);
            let h = t.sum(out.text_hidden);
            let h = t.scale(h, 0.1);
            t.add(s, h)
        },
        &inputs,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn stream_output_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let d = dual(&mut store, 1, 1, &mut rng);
    let s = single(&mut store, 2, &mut rng);
    let (l, v) = (random(&mut rng, 6, H), random(&mut rng, 4, H));
    let (tm, rm) = ([1, 1, 1, 0, 0, 0], [1, 1, 1, 1]);
    for out in [
        run_dual(&store, &d, &l, &v, &tm, &rm),
        run_single(&store, &s, &l, &v, &tm, &rm),
    ] {
        assert_eq!(out.text.shape(), &[6, H]);
        assert_eq!(out.visual.shape(), &[4, H]);
        assert_eq!(out.pooled.shape(), &[1, H]);
    }
}

#[test]
fn zero_output_projection_leaves_the_feed_forward_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let s = single(&mut store, 1, &mut rng);
    let b = &s.blocks[0];
    store.get_mut(b.output.weight).data_mut().fill(0.0);
    store.get_mut(b.output.bias).data_mut().fill(0.0);
    let (l, v) = (random(&mut rng, 3, H), random(&mut rng, 2, H));
    let out = run_single(&store, &s, &l, &v, &[1, 1, 1], &[1, 1]);

    let mut tape = Tape::inference();
    let x = tape.constant(Tensor::new(vec![5, H], [l.data(), v.data()].concat()).unwrap());
    let n = b.ln_ffn.apply(&mut tape, &store, x, b.eps).unwrap();
    let hdn = b.ffn_in.apply(&mut tape, &store, n).unwrap();
    let hdn = tape.gelu(hdn);
    let f = b.ffn_out.apply(&mut tape, &store, hdn).unwrap();
    let expected = tape.add(x, f).unwrap();
    let expected = tape.tensor(expected);
    assert_close(out.text.data(), &expected.data()[..3 * H], 1e-12);
    assert_close(out.visual.data(), &expected.data()[3 * H..], 1e-12);
}

#[test]
fn without_co_attention_the_streams_are_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::new();
    let d = dual(&mut store, 1, 0, &mut rng);
    let l = random(&mut rng, 4, H);
    let (v1, v2) = (random(&mut rng, 3, H), random(&mut rng, 3, H));
    let a = run_dual(&store, &d, &l, &v1, &[1, 1, 1, 0], &[1, 1, 1]);
    let b = run_dual(&store, &d, &l, &v2, &[1, 1, 1, 0], &[1, 1, 1]);
    assert_eq!(common::bits(a.text.data()), common::bits(b.text.data()));
    assert_ne!(a.visual.data(), b.visual.data());
}

#[test]
fn encoders_are_deterministic_for_a_seed() {
    let build = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let d = dual(&mut store, 1, 1, &mut rng);
        let s = single(&mut store, 2, &mut rng);
        let (l, v) = (random(&mut rng, 4, H), random(&mut rng, 3, H));
        let a = run_dual(&store, &d, &l, &v, &[1, 1, 0, 0], &[1, 1, 0]);
        let b = run_single(&store, &s, &l, &v, &[1, 1, 0, 0], &[1, 1, 0]);
        [a.text, a.visual, a.pooled, b.text, b.visual, b.pooled]
    };
    let (x, y) = (build(), build());
    for (a, b) in x.iter().zip(&y) {
        assert_eq!(common::bits(a.data()), common::bits(b.data()));
    }
}

fn masks(rng: &mut ChaCha8Rng, t: usize, r: usize) -> (Vec<u8>, Vec<u8>) {
    let real_t = rng.random_range(1..=t);
    let real_r = rng.random_range(1..=r);
    let tm = (0..t).map(|i| u8::from(i < real_t)).collect();
    let rm = (0..r).map(|i| u8::from(i < real_r)).collect();
    (tm, rm)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn masked_positions_never_reach_unmasked_outputs(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = dual(&mut store, 1, 1, &mut rng);
        let s = single(&mut store, 2, &mut rng);
        let (t, r) = (rng.random_range(1..=7), rng.random_range(1..=5));
        let (tm, rm) = masks(&mut rng, t, r);
        let (l, v) = (random(&mut rng, t, H), random(&mut rng, r, H));
        let (mut l2, mut v2) = (l.clone(), v.clone());
        for (i, &m) in tm.iter().enumerate() {
            if m == 0 {
                l2.data_mut()[i * H..(i + 1) * H].iter_mut().for_each(|x| *x += rng.random_range(-5.0..5.0));
            }
        }
        for (i, &m) in rm.iter().enumerate() {
            if m == 0 {
                v2.data_mut()[i * H..(i + 1) * H].iter_mut().for_each(|x| *x += rng.random_range(-5.0..5.0));
            }
        }
        let pairs = [
            (run_dual(&store, &d, &l, &v, &tm, &rm), run_dual(&store, &d, &l2, &v2, &tm, &rm)),
            (run_single(&store, &s, &l, &v, &tm, &rm), run_single(&store, &s, &l2, &v2, &tm, &rm)),
        ];
        for (a, b) in pairs {
            for (x, y) in a.pooled.data().iter().zip(b.pooled.data()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
            for (mask, ha, hb) in [(&tm, &a.text, &b.text), (&rm, &a.visual, &b.visual)] {
                for (i, &m) in mask.iter().enumerate() {
                    if m == 1 {
                        for (x, y) in ha.row(i).iter().zip(hb.row(i)) {
                            prop_assert!((x - y).abs() <= 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn permuting_regions_permutes_visual_states(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = dual(&mut store, 1, 1, &mut rng);
        let s = single(&mut store, 2, &mut rng);
        let (t, r) = (rng.random_range(1..=6), rng.random_range(2..=6));
        let (tm, rm) = masks(&mut rng, t, r);
        let (l, v) = (random(&mut rng, t, H), random(&mut rng, r, H));
        let mut perm: Vec<usize> = (0..r).collect();
        for i in (1..r).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let pv = Tensor::new(vec![r, H], perm.iter().flat_map(|&i| v.row(i).to_vec()).collect()).unwrap();
        let prm: Vec<u8> = perm.iter().map(|&i| rm[i]).collect();
        let pairs = [
            (run_dual(&store, &d, &l, &v, &tm, &rm), run_dual(&store, &d, &l, &pv, &tm, &prm)),
            (run_single(&store, &s, &l, &v, &tm, &rm), run_single(&store, &s, &l, &pv, &tm, &prm)),
        ];
        for (a, b) in pairs {
            for (x, y) in a.pooled.data().iter().zip(b.pooled.data()) {
                prop_assert!((x - y).abs() <= 1e-10);
            }
            for (x, y) in a.text.data().iter().zip(b.text.data()) {
                prop_assert!((x - y).abs() <= 1e-10);
            }
            for (k, &i) in perm.iter().enumerate() {
                for (x, y) in a.visual.row(i).iter().zip(b.visual.row(k)) {
                    prop_assert!((x - y).abs() <= 1e-10);
                }
            }
        }
    }
}
