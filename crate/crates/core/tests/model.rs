mod common;

use common::*;
use proptest::prelude::*;
use spikeattn::autodiff::Graph;
use spikeattn::kernels::ConvGeom;
use spikeattn::model::{s3a_head_tensor, tdc, Component, ForwardOptions, Projection, TokenGrid};
use spikeattn::spiking::LifParams;
use spikeattn::{Error, Model, Model64, ModelConfig, Tensor, Tensor64};

#[test]
fn patch_embed_full_scale_shape() {
    let cfg = ModelConfig::default();
    let model = Model64::new(cfg, 1).unwrap();
    let x = uniform01::<f64>(&mut rng(0), &[3, 160, 128, 128]);
    let y = model.patch_embed(&x).unwrap();
    assert_eq!(y.shape(), &[96, 40, 4, 4]);
    assert_eq!(40 * 4 * 4, 640);
}

#[test]
fn patch_embed_toy_shape() {
    let model = Model64::new(ModelConfig::toy(24, 2, 4, [80, 32, 32]), 1).unwrap();
    let x = uniform01::<f64>(&mut rng(0), &[3, 80, 32, 32]);
    assert_eq!(model.patch_embed(&x).unwrap().shape(), &[24, 20, 1, 1]);
}

#[test]
fn patch_embed_zero_input_is_zero() {
    // eval-mode BN with fresh statistics is the identity, so zeros stay zero
    let model = Model64::new(tiny_config(8, 1, 2), 3).unwrap();
    let y = model.patch_embed(&Tensor::zeros(&[3, 16, 32, 32])).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn geometry_errors_name_the_axis() {
    for (geom, axis) in [([81, 32, 32], "T"), ([80, 48, 32], "H"), ([80, 32, 40], "W")] {
        match Model64::new(ModelConfig::toy(8, 1, 2, geom), 0) {
            Err(Error::Geometry { axis: a, .. }) => assert_eq!(a, axis),
            other => panic!("expected geometry error for {geom:?}, got {other:?}"),
        }
    }
    let model = Model64::new(tiny_config(8, 1, 2), 0).unwrap();
    assert!(model.predict(&Tensor::zeros(&[3, 16, 32, 64])).is_err());
}

fn tdc_value(x: &Tensor64, w: &Tensor64, theta: f64) -> Tensor64 {
    let mut g = Graph::inference();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = tdc(&mut g, xv, wv, theta).unwrap();
    g.value(y).clone()
}

fn conv_value(x: &Tensor64, w: &Tensor64) -> Tensor64 {
    let mut g = Graph::inference();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv3d(xv, wv, ConvGeom { stride: [1; 3], pad: [1; 3] }).unwrap();
    g.value(y).clone()
}

#[test]
fn tdc_single_voxel() {
    let mut x = Tensor64::zeros(&[1, 1, 3, 3, 3]);
    x.data_mut()[13] = 1.0;
    let w = Tensor64::ones(&[1, 1, 3, 3, 3]);
    let y = tdc_value(&x, &w, 0.7);
    assert!((y.at(&[0, 0, 1, 1, 1]) - (-11.6)).abs() < 1e-12);
}

#[test]
fn tdc_degenerate_cases() {
    let mut r = rng(5);
    let x = normal::<f64>(&mut r, &[2, 3, 4, 5, 5], 1.0);
    let w = normal::<f64>(&mut r, &[4, 3, 3, 3, 3], 0.3);
    assert_eq!(tdc_value(&x, &w, 0.0), conv_value(&x, &w));
    let mut wz = w.clone();
    for co in 0..4 {
        for ci in 0..3 {
            for kt in [0, 2] {
                for k in 0..9 {
                    wz.data_mut()[(((co * 3 + ci) * 3 + kt) * 9) + k] = 0.0;
                }
            }
        }
    }
    let plain = conv_value(&x, &wz);
    for theta in [0.3, 0.7, 1.5] {
        assert!(tdc_value(&x, &wz, theta).max_abs_diff(&plain) < 1e-12);
    }
    let mut g = Graph::<f64>::inference();
    let (xv, wv) = (g.constant(x), g.constant(Tensor::zeros(&[4, 3, 1, 3, 3])));
    assert!(tdc(&mut g, xv, wv, 0.7).is_err());
}

#[test]
fn s3a_hand_example() {
    let q = Tensor64::from_f64(&[1, 2, 2], &[1.0, 1.0, 1.0, 0.0]).unwrap();
    let k = Tensor64::ones(&[1, 2, 2]);
    let v = Tensor64::from_f64(&[1, 2, 2], &[1.0, 1.0, 0.0, 1.0]).unwrap();
    let (vhat, gate) = s3a_head_tensor(&q, &k, &v, &LifParams::default()).unwrap();
    assert_eq!(gate.data(), &[1.0, 0.0]);
    assert_eq!(vhat.data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn s3a_zero_query_annihilates() {
    let mut r = rng(9);
    let k = spikes::<f64>(&mut r, &[4, 6, 3], 0.5);
    let v = spikes::<f64>(&mut r, &[4, 6, 3], 0.5);
    let (vhat, gate) = s3a_head_tensor(&Tensor::zeros(&[4, 6, 3]), &k, &v, &LifParams::default()).unwrap();
    assert!(vhat.data().iter().chain(gate.data()).all(|&x| x == 0.0));
    assert!(s3a_head_tensor(&k, &v, &Tensor::zeros(&[4, 5, 3]), &LifParams::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn s3a_masks_channels(seed in any::<u64>(), t in 1usize..5, n in 1usize..9, d in 1usize..6, p in 0.1f64..0.9) {
        let mut r = rng(seed);
        let q = spikes::<f64>(&mut r, &[t, n, d], p);
        let k = spikes::<f64>(&mut r, &[t, n, d], p);
        let v = spikes::<f64>(&mut r, &[t, n, d], p);
        let (vhat, gate) = s3a_head_tensor(&q, &k, &v, &LifParams::default()).unwrap();
        prop_assert!(is_binary(&gate));
        for ti in 0..t {
            for c in 0..d {
                let g = gate.at(&[ti, c]);
                for i in 0..n {
                    let want = if g == 1.0 { v.at(&[ti, i, c]) } else { 0.0 };
                    prop_assert_eq!(vhat.at(&[ti, i, c]), want);
                }
            }
        }
        let ones = |x: &Tensor64| x.data().iter().filter(|&&v| v != 0.0).count();
        prop_assert!(ones(&vhat) <= ones(&v));
    }

    #[test]
    fn seq2vid_inverts_vid2seq(seed in any::<u64>(), t_s in 1usize..4, d in 1usize..5, t in 1usize..4, h in 1usize..3, w in 1usize..3) {
        let x = normal::<f64>(&mut rng(seed), &[t_s, d, t, h, w], 1.0);
        let grid = TokenGrid::vid2seq(&x).unwrap();
        prop_assert_eq!(grid.tokens.shape(), &[t_s, t * h * w, d]);
        prop_assert_eq!(grid.seq2vid().unwrap(), x);
    }
}

fn block_input(cfg: &ModelConfig, seed: u64) -> Tensor64 {
    let g = cfg.grid();
    normal(&mut rng(seed), &[cfg.t_s, cfg.d_model, g[0], g[1], g[2]], 1.5)
}

#[test]
fn qkv_projection_properties() {
    let cfg = tiny_config(8, 1, 2);
    let model = Model64::new(cfg.clone(), 4).unwrap();
    let g = cfg.grid();
    let shape = [cfg.t_s, cfg.d_model, g[0], g[1], g[2]];
    let (q, k, v, v_macs) = model.project_qkv(0, &Tensor::zeros(&shape)).unwrap();
    assert!(q.data().iter().chain(k.data()).chain(v.data()).all(|&x| x == 0.0));
    assert_eq!(v_macs, 0);
    let mut r = rng(2);
    for _ in 0..10 {
        let s = spikes::<f64>(&mut r, &shape, 0.4);
        let (q, k, v, _) = model.project_qkv(0, &s).unwrap();
        assert_eq!(q.shape(), &[2, cfg.n_tokens(), 8]);
        assert!(is_binary(&q) && is_binary(&k) && is_binary(&v));
    }
    let bad = ModelConfig { v_proj: Projection::Tdc, ..cfg };
    assert!(matches!(Model64::new(bad, 0), Err(Error::UnsupportedVariant(_))));
}

#[test]
fn single_head_matches_s3a() {
    let cfg = ModelConfig { n_heads: 1, ..tiny_config(8, 1, 3) };
    let model = Model64::new(cfg.clone(), 8).unwrap();
    let mut r = rng(3);
    let shape = [3, cfg.n_tokens(), 8];
    let (q, k, v) = (spikes(&mut r, &shape, 0.6), spikes(&mut r, &shape, 0.6), spikes(&mut r, &shape, 0.5));
    let (out, vhat) = model.mhs3a(0, &q, &k, &v).unwrap();
    let (want, _) = s3a_head_tensor(&q, &k, &v, &cfg.lif).unwrap();
    assert_eq!(vhat, want);
    let g = cfg.grid();
    assert_eq!(out.shape(), &[3, 8, g[0], g[1], g[2]]);
}

#[test]
fn heads_are_independent() {
    let cfg = tiny_config(8, 1, 3);
    assert_eq!(cfg.n_heads, 4);
    let model = Model64::new(cfg.clone(), 8).unwrap();
    let mut r = rng(4);
    let shape = [3, cfg.n_tokens(), 8];
    let (q, k, v) = (spikes::<f64>(&mut r, &shape, 0.7), spikes(&mut r, &shape, 0.7), spikes(&mut r, &shape, 0.6));
    let (_, base) = model.mhs3a(0, &q, &k, &v).unwrap();
    let mut q1 = q.clone();
    for (i, x) in q1.data_mut().iter_mut().enumerate() {
        if (2..4).contains(&(i % 8)) {
            *x = 0.0;
        }
    }
    let (_, changed) = model.mhs3a(0, &q1, &k, &v).unwrap();
    for (i, (a, b)) in base.data().iter().zip(changed.data()).enumerate() {
        if !(2..4).contains(&(i % 8)) {
            assert_eq!(a, b, "channel {} moved", i % 8);
        } else {
            assert_eq!(*b, 0.0);
        }
    }
}

fn combine(cfg: &ModelConfig, u: &Tensor64, mlp: &Tensor64, sa: &Tensor64) -> Tensor64 {
    let mut out = u.map(|x| cfg.alpha_comb * x);
    out.add_assign(&mlp.map(|x| cfg.beta_ff * x));
    out.add_assign(&sa.map(|x| cfg.beta_sa * x));
    out
}

#[test]
fn parallel_block_is_sum_of_terms() {
    for (seed, gains) in [(1, (1.0, 1.0, 1.0)), (2, (0.0, 1.0, 1.0)), (3, (0.5, 2.0, -0.75))] {
        let cfg = ModelConfig {
            alpha_comb: gains.0,
            beta_ff: gains.1,
            beta_sa: gains.2,
            ..tiny_config(8, 1, 2)
        };
        let cfg = ModelConfig { input_geometry: [64, 64, 64], ..cfg };
        let model = active_attention(Model64::new(cfg.clone(), seed).unwrap());
        let u = block_input(&cfg, seed);
        let out = model.transformer_block(0, &u).unwrap();
        let (mlp, sa) = model.block_branches(0, &u).unwrap();
        assert!(sa.data().iter().any(|&x| x != 0.0) && mlp.data().iter().any(|&x| x != 0.0));
        assert_eq!(out, combine(&cfg, &u, &mlp, &sa));
    }
}

#[test]
fn zeroed_branch_outputs_leave_identity() {
    let cfg = tiny_config(8, 1, 2);
    let mut model = Model64::new(cfg.clone(), 2).unwrap();
    for name in ["blocks.0.mlp.fc2.weight", "blocks.0.attn.proj.weight"] {
        model.params_mut().get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let u = block_input(&cfg, 3);
    assert_eq!(model.transformer_block(0, &u).unwrap(), u);
}

/// Fresh eval-mode BN passes binary spikes through at unit scale, which a
/// tau = 2 neuron never integrates up to threshold. Large gains on the
/// norms that feed neurons make the block active.
fn active_attention(mut m: Model64) -> Model64 {
    for i in 0..m.config().n_blocks {
        for which in ["attn.q_bn", "attn.k_bn", "attn.v_bn", "mlp.bn1"] {
            let name = format!("blocks.{i}.{which}.gamma");
            m.params_mut().get_mut(&name).unwrap().data_mut().fill(8.0);
        }
    }
    m
}

#[test]
fn doubling_sa_gain_doubles_its_contribution() {
    let base = ModelConfig::toy(8, 1, 2, [64, 64, 64]);
    let at = |beta: f64| {
        let cfg = ModelConfig { beta_sa: beta, ..base.clone() };
        let m = active_attention(Model64::new(cfg.clone(), 1).unwrap());
        m.transformer_block(0, &block_input(&cfg, 1)).unwrap()
    };
    let (z, one, two) = (at(0.0), at(1.0), at(2.0));
    let d1 = one.zip_map(&z, |a, b| a - b).unwrap();
    let d2 = two.zip_map(&z, |a, b| a - b).unwrap();
    assert!(d1.data().iter().any(|&x| x != 0.0));
    assert!(d2.max_abs_diff(&d1.map(|x| 2.0 * x)) < 1e-12);
}

#[test]
fn sequential_block_runs() {
    let cfg = ModelConfig { parallel: false, ..tiny_config(8, 2, 2) };
    let model = Model64::new(cfg.clone(), 1).unwrap();
    let u = block_input(&cfg, 1);
    assert_eq!(model.transformer_block(1, &u).unwrap().shape(), u.shape());
    let (y, _) = model.predict(&uniform01(&mut rng(1), &[3, 16, 32, 32])).unwrap();
    assert_eq!(y.len(), 16);
}

#[test]
fn forward_contract() {
    for (t_s, pe, head) in [
        (1, Component::Ann, Component::Ann),
        (3, Component::Snn, Component::Ann),
        (2, Component::Ann, Component::Snn),
    ] {
        let cfg = ModelConfig { pe, head, ..tiny_config(8, 2, t_s) };
        let model = Model64::new(cfg, 5).unwrap();
        let x = normal::<f64>(&mut rng(7), &[3, 16, 32, 32], 1.0);
        let (y, diag) = model.predict(&x).unwrap();
        assert_eq!(y.len(), 16);
        assert!(y.iter().all(|v| v.is_finite()));
        assert_eq!(diag.blocks.len(), 2);
        assert_eq!(model.predict(&x).unwrap().0, y);
        for b in &diag.blocks {
            assert!(is_binary(&b.v) && is_binary(&b.vhat) && is_binary(&b.gate));
            assert!(b.vhat_fr <= b.v_fr);
        }
    }
}

#[test]
fn recorded_spikes_are_binary() {
    let model = Model64::new(tiny_config(8, 2, 2), 5).unwrap();
    let x = normal::<f64>(&mut rng(8), &[1, 3, 16, 32, 32], 2.0);
    let opts = ForwardOptions { record_spikes: true, ..ForwardOptions::eval() };
    let (_, diag) = model.predict_with(&x, opts).unwrap();
    assert!(!diag.spikes.is_empty());
    for (name, t) in &diag.spikes {
        assert!(is_binary(t), "{name}");
    }
}

#[test]
fn checkpoint_round_trip() {
    let cfg = ModelConfig {
        q_proj: Projection::Conv3d,
        k_proj: Projection::Tdc,
        v_proj: Projection::Conv3d,
        parallel: false,
        alpha_ff: 0.5,
        alpha_sa: 0.25,
        tdc_theta: 0.3,
        mlp_ratio: 2,
        attn_out_v_th: 0.75,
        ..tiny_config(8, 1, 2)
    };
    let mut model = Model::<f32>::new(cfg, 12).unwrap();
    model.params_mut().get_mut("head.out.bias").unwrap().data_mut()[0] = 0.125;
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let back = Model::<f32>::load(dir.path()).unwrap();
    assert_eq!(back.config(), model.config());
    let x = normal::<f32>(&mut rng(1), &[3, 16, 32, 32], 1.0);
    assert_eq!(back.predict(&x).unwrap().0, model.predict(&x).unwrap().0);

    assert!(matches!(Model64::load(dir.path()), Err(Error::CorruptCheckpoint(_))));
    let blob = dir.path().join("weights.bin");
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(Model::<f32>::load(dir.path()), Err(Error::CorruptCheckpoint(_))));
    let mut longer = bytes.clone();
    longer.extend_from_slice(&[0; 4]);
    std::fs::write(&blob, longer).unwrap();
    assert!(matches!(Model::<f32>::load(dir.path()), Err(Error::CorruptCheckpoint(_))));
}

#[test]
fn param_count_matches_manifest() {
    let model = Model64::new(ModelConfig::toy(24, 2, 4, [80, 32, 32]), 1).unwrap();
    let (params, _) = model.params().manifest();
    let n: usize = params.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    assert_eq!(model.param_count(), n);
}

