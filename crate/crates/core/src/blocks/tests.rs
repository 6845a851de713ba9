use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{finite_diff_grad, relative_error};

fn sasp_setup<T: Scalar>(
    geom: &BlockGeometry,
    n_blocks: usize,
    policy: SharePolicy,
    seed: u64,
) -> (ParamStore<T>, BlockStack) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let stack = BlockStack::init(&mut store, "enc", BlockKind::Sasp, n_blocks, policy, geom, &mut rng).unwrap();
    (store, stack)
}

fn randomize<T: Scalar>(store: &mut ParamStore<T>, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        let name = store.name(id).to_string();
        let mut t = Tensor::randn(&shape, std, &mut rng);
        if name.ends_with("gain") || name.ends_with("alpha") || name.ends_with("beta") || name.ends_with("gamma") {
            for v in t.data_mut() {
                *v = *v + T::one();
            }
        }
        *store.get_mut(id) = t;
    }
}

#[test]
fn shaped_attention_is_identity_at_init() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let d = heads * rng.random_range(1..9);
        let n = rng.random_range(1..20);
        let geom = BlockGeometry::new(d, heads);
        let mut store = ParamStore::<f32>::new();
        let mixer = ShapedMixerParams::init(&mut store, "m", &geom, &mut rng).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store, None);
        let mv = mixer.bind(&mut tape, &mut binder);
        let x_val = Tensor::<f32>::randn(&[n, d], 3.0, &mut rng);
        let x = tape.constant(x_val.clone());
        let out = shaped_attention(&mut tape, x, &mv, n, &geom).unwrap();
        assert_eq!(tape.value(out.out), &x_val);
        let maps = tape.value(out.maps);
        assert_eq!(maps.shape(), &[heads * n, n]);
        for h in 0..heads {
            for i in 0..n {
                for j in 0..n {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert_eq!(maps.at(h * n + i, j), want);
                }
            }
        }
    }
}

#[test]
fn pure_identity_shape_ignores_weights() {
    let geom = BlockGeometry::new(8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f64>::new();
    let mixer = ShapedMixerParams::init(&mut store, "m", &geom, &mut rng).unwrap();
    *store.get_mut(mixer.w_q) = Tensor::randn(&[8, 8], 1.0, &mut rng);
    *store.get_mut(mixer.beta) = Tensor::zeros(&[2]);
    *store.get_mut(mixer.gamma) = Tensor::zeros(&[2]);
    let mut tape = Tape::new();
    let mut binder = Binder::new(&store, None);
    let mv = mixer.bind(&mut tape, &mut binder);
    let x_val = Tensor::randn(&[5, 8], 1.0, &mut rng);
    let x = tape.constant(x_val.clone());
    let out = shaped_attention(&mut tape, x, &mv, 5, &geom).unwrap();
    assert_eq!(tape.value(out.out), &x_val);
}

#[test]
fn shaped_rows_sum_to_alpha_plus_beta_minus_gamma() {
    let geom = BlockGeometry::new(12, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let mixer = ShapedMixerParams::init(&mut store, "m", &geom, &mut rng).unwrap();
    *store.get_mut(mixer.w_q) = Tensor::randn(&[12, 12], 1.0, &mut rng);
    let alpha = Tensor::uniform(&[3], -2.0, 2.0, &mut rng);
    let beta = Tensor::uniform(&[3], -2.0, 2.0, &mut rng);
    let gamma = Tensor::uniform(&[3], -2.0, 2.0, &mut rng);
    *store.get_mut(mixer.alpha) = alpha.clone();
    *store.get_mut(mixer.beta) = beta.clone();
    *store.get_mut(mixer.gamma) = gamma.clone();
    let mut tape = Tape::new();
    let mut binder = Binder::new(&store, None);
    let mv = mixer.bind(&mut tape, &mut binder);
    let n = 6;
    let x = tape.constant(Tensor::randn(&[2 * n, 12], 1.0, &mut rng));
    let out = shaped_attention(&mut tape, x, &mv, n, &geom).unwrap();
    let maps = tape.value(out.maps);
    for g in 0..2 * 3 {
        let h = g % 3;
        let want = alpha.data()[h] + beta.data()[h] - gamma.data()[h];
        for i in 0..n {
            let s: f64 = maps.row(g * n + i).iter().sum();
            assert!((s - want).abs() < 1e-12, "{s} vs {want}");
        }
    }
}

#[test]
fn sasp_block_is_layer_norm_at_init() {
    let geom = BlockGeometry::new(16, 4);
    for n in [1usize, 7, 64] {
        let (store, stack) = sasp_setup::<f32>(&geom, 1, SharePolicy::None, n as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + n as u64);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store, None);
        let x = tape.constant(Tensor::randn(&[n, 16], 2.0, &mut rng));
        let y = stack.forward(&mut tape, &mut binder, x, n, None).unwrap();
        let BlockParams::Sasp(p) = &stack.blocks[0] else { unreachable!() };
        let ln = p.ln.apply(&mut tape, &mut binder, x, geom.ln_eps).unwrap();
        assert_eq!(tape.shape(y), &[n, 16]);
        assert_eq!(tape.value(y), tape.value(ln));
    }
}

#[test]
fn preln_zero_weights_pass_through() {
    let geom = BlockGeometry::new(8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    let stack = BlockStack::init(&mut store, "t", BlockKind::Preln, 2, SharePolicy::None, &geom, &mut rng).unwrap();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::zeros(&shape);
    }
    let mut tape = Tape::new();
    let mut binder = Binder::new(&store, None);
    let x_val = Tensor::randn(&[10, 8], 1.0, &mut rng);
    let x = tape.constant(x_val.clone());
    let y = stack.forward(&mut tape, &mut binder, x, 5, None).unwrap();
    assert_eq!(tape.value(y), &x_val);
}

/// Gradient of `Σ r ∘ stack(x)` w.r.t. every parameter and the input,
/// analytic against central differences.
fn stack_gradcheck(kind: BlockKind, seed: u64) -> f64 {
    let geom = BlockGeometry::new(8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let stack = BlockStack::init(&mut store, "s", kind, 1, SharePolicy::None, &geom, &mut rng).unwrap();
    randomize(&mut store, seed + 1, 0.5);
    let x_val = Tensor::<f64>::randn(&[4, 8], 1.0, &mut rng);
    let r = Tensor::<f64>::randn(&[4, 8], 1.0, &mut rng);

    let eval = |store: &ParamStore<f64>, x_val: &Tensor<f64>, grads: bool| {
        let mask = vec![true; store.len()];
        let mut tape = Tape::new();
        let mut binder = Binder::new(store, grads.then_some(&mask[..]));
        let x = tape.leaf(x_val.clone(), grads);
        let y = stack.forward(&mut tape, &mut binder, x, 4, None).unwrap();
        let rv = tape.constant(r.clone());
        let p = tape.mul(y, rv).unwrap();
        let l = tape.sum(p).unwrap();
        if grads {
            tape.backward(l).unwrap();
            let mut gs = binder.grads(&tape);
            gs.push(tape.grad(x).cloned());
            (tape.value(l).item(), gs)
        } else {
            (tape.value(l).item(), Vec::new())
        }
    };

    let (_, analytic) = eval(&store, &x_val, true);
    let mut worst: f64 = 0.0;
    for (i, id) in store.ids().enumerate() {
        let numeric = finite_diff_grad(
            |t| {
                let mut s = store.clone();
                *s.get_mut(id) = t.clone();
                Ok(eval(&s, &x_val, false).0)
            },
            store.get(id),
            1e-6,
        )
        .unwrap();
        let a = analytic[i].clone().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        worst = worst.max(relative_error(&a, &numeric));
    }
    let numeric = finite_diff_grad(|t| Ok(eval(&store, t, false).0), &x_val, 1e-6).unwrap();
    worst.max(relative_error(analytic.last().unwrap().as_ref().unwrap(), &numeric))
}

#[test]
fn sasp_block_gradients_match_finite_differences() {
    let err = stack_gradcheck(BlockKind::Sasp, 10);
    assert!(err <= 1e-6, "{err:e}");
}

#[test]
fn preln_block_gradients_match_finite_differences() {
    let err = stack_gradcheck(BlockKind::Preln, 20);
    assert!(err <= 1e-6, "{err:e}");
}

#[test]
fn share_policies_count_groups() {
    let geom = BlockGeometry::new(8, 2);
    let count = |n, p| sasp_setup::<f32>(&geom, n, p, 0).1.registry.unwrap().unique_mixers();
    assert_eq!(count(4, SharePolicy::AdjacentPairs), 2);
    assert_eq!(count(5, SharePolicy::AdjacentPairs), 3);
    assert_eq!(count(6, SharePolicy::AdjacentPairs), 3);
    assert_eq!(count(5, SharePolicy::None), 5);
    assert_eq!(count(5, SharePolicy::All), 1);
    assert_eq!(share_mixers(5, SharePolicy::AdjacentPairs).unwrap(), vec![0, 0, 1, 1, 2]);
    assert!(share_mixers(0, SharePolicy::None).is_err());
}

#[test]
fn shared_mixer_writes_are_visible_through_partner() {
    let geom = BlockGeometry::new(8, 2);
    let (mut store, stack) = sasp_setup::<f32>(&geom, 4, SharePolicy::AdjacentPairs, 5);
    let reg = stack.registry.as_ref().unwrap();
    let w = reg.mixer_for(2).w_q;
    store.get_mut(w).data_mut()[3] = 7.5;
    assert_eq!(store.get(reg.mixer_for(3).w_q).data()[3], 7.5);
    assert_ne!(store.get(reg.mixer_for(1).w_q).data()[3], 7.5);
}

#[test]
fn shared_gradient_is_sum_of_unshared_gradients() {
    let geom = BlockGeometry::new(8, 2);
    let (mut shared_store, shared) = sasp_setup::<f64>(&geom, 2, SharePolicy::AdjacentPairs, 6);
    randomize(&mut shared_store, 60, 0.4);
    let (mut split_store, split) = sasp_setup::<f64>(&geom, 2, SharePolicy::None, 6);
    // copy every shared tensor into the unshared layout
    let shared_reg = shared.registry.as_ref().unwrap();
    let split_reg = split.registry.as_ref().unwrap();
    for (name, id) in split_store.iter().map(|(id, n, _)| (n.to_string(), id)).collect::<Vec<_>>() {
        let src = if name.contains(".mixers.") {
            let field = name.rsplit('.').next().unwrap();
            let g = &shared_reg.groups[0];
            let sid = [g.w_q, g.w_k, g.alpha, g.beta, g.gamma]
                .into_iter()
                .find(|&i| shared_store.name(i).ends_with(field))
                .unwrap();
            shared_store.get(sid).clone()
        } else {
            shared_store.by_name(&name).unwrap().clone()
        };
        *split_store.get_mut(id) = src;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let x_val = Tensor::<f64>::randn(&[6, 8], 1.0, &mut rng);

    let grads = |store: &ParamStore<f64>, stack: &BlockStack| {
        let mask = vec![true; store.len()];
        let mut tape = Tape::new();
        let mut binder = Binder::new(store, Some(&mask));
        let x = tape.constant(x_val.clone());
        let y = stack.forward(&mut tape, &mut binder, x, 3, None).unwrap();
        let y2 = tape.mul(y, y).unwrap();
        let l = tape.sum(y2).unwrap();
        tape.backward(l).unwrap();
        (tape.value(l).item(), binder.grads(&tape))
    };
    let (l_shared, g_shared) = grads(&shared_store, &shared);
    let (l_split, g_split) = grads(&split_store, &split);
    assert!((l_shared - l_split).abs() < 1e-12);
    let s = &shared_reg.groups[0];
    let (u0, u1) = (&split_reg.groups[0], &split_reg.groups[1]);
    for ((a, b), c) in s.ids().iter().zip(u0.ids()).zip(u1.ids()) {
        let gs = g_shared[a.index()].as_ref().unwrap();
        let g0 = g_split[b.index()].as_ref().unwrap();
        let g1 = g_split[c.index()].as_ref().unwrap();
        for ((x, y), z) in gs.data().iter().zip(g0.data()).zip(g1.data()) {
            assert!((x - (y + z)).abs() <= 1e-10 * (1.0 + x.abs()));
        }
    }
}

#[test]
fn parameter_counts() {
    let geom = BlockGeometry::new(64, 4);
    assert_eq!(count_mixer_params(BlockKind::Preln, &geom).unwrap(), 16384);
    assert_eq!(count_mixer_params(BlockKind::Sasp, &geom).unwrap(), 8204);

    // enumeration cross-check
    let (store, stack) = sasp_setup::<f32>(&geom, 4, SharePolicy::AdjacentPairs, 0);
    let mixer_numel: usize = stack
        .registry
        .unwrap()
        .groups
        .iter()
        .flat_map(|g| g.ids())
        .map(|id| store.get(id).numel())
        .sum();
    assert_eq!(mixer_numel, 2 * 8204);
    assert_eq!(
        store.numel(),
        count_stack_params(BlockKind::Sasp, &geom, 4, SharePolicy::AdjacentPairs).unwrap()
    );

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut pstore = ParamStore::<f32>::new();
    BlockStack::init(&mut pstore, "p", BlockKind::Preln, 3, SharePolicy::None, &geom, &mut rng).unwrap();
    assert_eq!(
        pstore.numel(),
        count_stack_params(BlockKind::Preln, &geom, 3, SharePolicy::None).unwrap()
    );

    for d in 2..40 {
        for heads in (1..=d).filter(|h| d % h == 0) {
            let g = BlockGeometry::new(d, heads);
            assert!(
                count_block_params(BlockKind::Sasp, &g).unwrap()
                    < count_block_params(BlockKind::Preln, &g).unwrap()
            );
        }
    }
    assert!(count_block_params(BlockKind::Sasp, &BlockGeometry::new(10, 4)).is_err());
}
