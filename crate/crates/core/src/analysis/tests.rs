use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::encoders::{FreezePolicy, ImageEncoderConfig, ModelConfig, StemStage, TextEncoderConfig};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_stochastic(n: usize, r: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut data: Vec<f64> = (0..n * n).map(|_| r.random::<f64>().powi(3)).collect();
    for row in data.chunks_mut(n) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::new(&[n, n], data).unwrap()
}

fn tiny_config(kind: BlockKind) -> ModelConfig {
    ModelConfig {
        block_kind: kind,
        geometry: BlockGeometry::new(16, 2),
        embed_dim: 8,
        image: ImageEncoderConfig {
            image_size: 8,
            stem: vec![StemStage { channels: 4, stride: 2 }, StemStage { channels: 16, stride: 2 }],
            n_blocks: 4,
        },
        text: TextEncoderConfig {
            vocab_size: 10,
            max_len: 5,
            n_blocks: 1,
        },
        ..Default::default()
    }
}

#[test]
fn js_of_identical_is_zero() {
    let p = random_stochastic(6, &mut rng(1));
    assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
}

#[test]
fn js_of_disjoint_rows_is_ln2() {
    let p = Tensor::<f64>::from_f64(&[1, 2], &[1.0, 0.0]).unwrap();
    let q = Tensor::<f64>::from_f64(&[1, 2], &[0.0, 1.0]).unwrap();
    let js = js_divergence(&p, &q).unwrap();
    assert!((js - std::f64::consts::LN_2).abs() < 1e-9, "{js}");
    let bits = js_divergence_detailed(&p, &q, JsUnit::Bits).unwrap().js;
    assert!((bits - 1.0).abs() < 1e-9);
}

#[test]
fn js_symmetric_and_bounded() {
    let mut r = rng(2);
    for _ in 0..1000 {
        let n = r.random_range(2..6);
        let p = random_stochastic(n, &mut r);
        let q = random_stochastic(n, &mut r);
        let a = js_divergence(&p, &q).unwrap();
        let b = js_divergence(&q, &p).unwrap();
        assert!((a - b).abs() <= 1e-12);
        assert!((0.0..=std::f64::consts::LN_2).contains(&a));
    }
}

#[test]
fn js_clamps_negative_mass() {
    let p = Tensor::<f64>::from_f64(&[1, 3], &[0.6, 0.5, -0.1]).unwrap();
    let q = Tensor::<f64>::from_f64(&[1, 3], &[0.5, 0.5, 0.0]).unwrap();
    let v = js_divergence_detailed(&p, &q, JsUnit::Nats).unwrap();
    assert!((v.clipped_mass - 0.05).abs() < 1e-12);
    assert!(v.js > 0.0 && v.js.is_finite());
}

#[test]
fn js_rejects_bad_input() {
    let p = Tensor::<f64>::from_f64(&[1, 2], &[0.0, 0.0]).unwrap();
    let q = Tensor::<f64>::from_f64(&[1, 2], &[0.5, 0.5]).unwrap();
    assert!(matches!(js_divergence(&p, &q), Err(Error::Degenerate(_))));
    let r = Tensor::<f64>::from_f64(&[1, 3], &[0.2, 0.3, 0.5]).unwrap();
    assert!(matches!(js_divergence(&q, &r), Err(Error::Shape { .. })));
}

#[test]
fn head_average_is_mean() {
    let n = 4;
    let eye = Tensor::<f64>::eye(n);
    let uni = Tensor::<f64>::full(&[n, n], 0.25);
    let mut data = eye.data().to_vec();
    data.extend_from_slice(uni.data());
    let stack = Tensor::new(&[2 * n, n], data).unwrap();
    let avg = avg_attention_matrix(&stack, n).unwrap();
    for i in 0..n {
        for j in 0..n {
            let want = 0.5 * (if i == j { 1.0 } else { 0.0 } + 0.25);
            assert!((avg.at(i, j) - want).abs() < 1e-15);
        }
    }
    assert!(avg_attention_matrix(&Tensor::<f64>::zeros(&[n + 1, n]), n).is_err());
}

#[test]
fn profile_length_and_sasp_init_identity() {
    let bundle = ModelBundle::<f64>::new(tiny_config(BlockKind::Sasp), &mut rng(3)).unwrap();
    let probe = Tensor::uniform(&[3, 3, 8, 8], 0.0, 1.0, &mut rng(4));
    let prof = adjacent_js_profile(&bundle, &probe).unwrap();
    assert_eq!(prof.len(), 3);
    // every block starts as the identity map
    assert!(prof.iter().all(|p| p.js_nats < 1e-12 && p.clipped_mass == 0.0), "{prof:?}");

    let preln = ModelBundle::<f64>::new(tiny_config(BlockKind::Preln), &mut rng(3)).unwrap();
    let prof = adjacent_js_profile(&preln, &probe).unwrap();
    assert_eq!(prof.len(), 3);
    assert!(prof.iter().all(|p| p.js_nats > 0.0));
    assert!(js_profile(&[Tensor::eye(2)]).is_err());
}

#[test]
fn param_report_partitions_counts() {
    let mut bundle = ModelBundle::<f32>::new(tiny_config(BlockKind::Sasp), &mut rng(5)).unwrap();
    bundle.apply_freeze(FreezePolicy::InheritedFrozen);
    let rows = bundle_param_report(&bundle);
    let total = rows.last().unwrap();
    assert_eq!(total.module, "total");
    assert_eq!(total.total, bundle.store.numel());
    assert_eq!(total.trainable, bundle.trainable_count());
    for r in &rows {
        assert_eq!(r.trainable + r.frozen, r.total);
    }
    let sum: usize = rows[..rows.len() - 1].iter().map(|r| r.total).sum();
    assert_eq!(sum, total.total);
    assert!(rows.iter().any(|r| r.module == "image.blocks" && r.frozen == 0));
    assert!(rows.iter().any(|r| r.module == "image.stem" && r.trainable == 0));
}

#[test]
fn empty_store_reports_zero() {
    let store = ParamStore::<f32>::new();
    let rows = param_report(&store, &FreezeMask(vec![]));
    assert_eq!(rows, vec![ParamRow { module: "total".into(), ..Default::default() }]);
}

#[test]
fn module_grouping() {
    assert_eq!(module_of("image.mixers.0.w_q"), "image.blocks");
    assert_eq!(module_of("text.blocks.1.ln.gain"), "text.blocks");
    assert_eq!(module_of("image.stem.0.weight"), "image.stem");
    assert_eq!(module_of("log_tau"), "log_tau");
    assert_eq!(module_of("pm.i2t.weight"), "pm");
}

#[test]
fn bench_excludes_warmup_and_validates() {
    let mut cfg = BenchConfig::new(BlockKind::Sasp, 16, 2, 4, 2);
    cfg.n_blocks = 2;
    cfg.iters = 3;
    cfg.warmup = 2;
    let rep = throughput_bench::<f32>(&cfg).unwrap();
    assert_eq!(rep.times.len(), 3);
    assert!(rep.items_per_sec > 0.0);
    cfg.iters = 0;
    assert!(throughput_bench::<f32>(&cfg).is_err());
    cfg.iters = 3;
    cfg.warmup = 0;
    assert!(throughput_bench::<f32>(&cfg).is_err());
}

#[test]
fn csv_writers() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("js.csv");
    write_js_csv(&p, &[JsPair { pair_index: 0, js_nats: 0.5, clipped_mass: 0.0 }]).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert!(text.starts_with("pair_index,js_nats,clipped_mass\n0,0.5"));
}
