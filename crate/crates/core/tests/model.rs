mod common;

use autodiff::{ParamSet, Tape, Tensor};
use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std4d::checkpoint;
use std4d::model::{
    denoise_spatial, denoise_temporal, disentangle, fuse_ffn, merge_unified, Condition,
    ModelConfig, Std4dModel, UnifiedDenoiser,
};
use std4d::nn::grad_check_params;

fn mini() -> ModelConfig {
    ModelConfig {
        views: 2,
        frames: 3,
        latent_size: 8,
        latent_channels: 2,
        spatial_channels: 2,
        temporal_channels: 2,
        hidden: 4,
        fusion_hidden: 5,
        cond_dim: 3,
        time_dim: 4,
        tap_dim: 3,
        temporal_pos_enc: false,
    }
}

/// Replaces every tensor with seeded normal values (no zero layers).
fn randomize(p: &mut ParamSet, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in p.iter_mut() {
        *t = Tensor::randn(t.shape().to_vec(), std, &mut rng);
    }
}

fn random_model(cfg: ModelConfig, seed: u64) -> Std4dModel {
    let mut m = Std4dModel::new(cfg, seed).unwrap();
    randomize(&mut m.spatial, seed + 1, 0.4);
    randomize(&mut m.temporal, seed + 2, 0.4);
    randomize(&mut m.fusion, seed + 3, 0.4);
    m
}

fn latent(cfg: &ModelConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(cfg.latent_shape().to_vec(), 1.0, &mut rng)
}

fn mean_axis_ref(z: &Tensor, axis: usize) -> Tensor {
    let [v, t, h, w, c]: [usize; 5] = z.shape().try_into().unwrap();
    let (n, shape) = if axis == 1 {
        (t, [v, h, w, c])
    } else {
        (v, [t, h, w, c])
    };
    let mut out = Tensor::zeros(shape);
    for a in 0..shape[0] {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut s = 0.0;
                    for k in 0..n {
                        let idx = if axis == 1 {
                            [a, k, y, x, ch]
                        } else {
                            [k, a, y, x, ch]
                        };
                        s += z.get(&idx).unwrap();
                    }
                    out.set(&[a, y, x, ch], s / n as f64).unwrap();
                }
            }
        }
    }
    out
}

#[test]
fn disentangle_zero_in_zero_out() {
    let cfg = ModelConfig::default();
    let m = Std4dModel::new(cfg, 1).unwrap();
    let tape = Tape::new();
    let mb = m.bind_frozen(&tape);
    let z = tape.constant(Tensor::zeros(cfg.latent_shape()));
    let (s, t) = disentangle(&mb.spatial, &mb.temporal, &z).unwrap();
    assert!(s.value().data().iter().all(|&v| v == 0.0));
    assert!(t.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn disentangle_rejects_single_frame() {
    let m = Std4dModel::new(ModelConfig::default(), 1).unwrap();
    let tape = Tape::new();
    let mb = m.bind_frozen(&tape);
    let z = tape.constant(Tensor::zeros([4, 1, 8, 8, 8]));
    assert!(disentangle(&mb.spatial, &mb.temporal, &z).is_err());
}

#[test]
fn disentangle_matches_scalar_oracle() {
    let cfg = ModelConfig::default();
    let m = random_model(cfg, 3);
    let z = latent(&cfg, 3);
    let tape = Tape::new();
    let mb = m.bind_frozen(&tape);
    let (s, t) = disentangle(&mb.spatial, &mb.temporal, &tape.constant(z.clone())).unwrap();
    let s_ref = conv_ref(
        &mean_axis_ref(&z, 1),
        m.spatial.get("dis.w").unwrap(),
        m.spatial.get("dis.b").unwrap(),
        1,
    );
    let t_ref = conv_ref(
        &mean_axis_ref(&z, 0),
        m.temporal.get("dis.w").unwrap(),
        m.temporal.get("dis.b").unwrap(),
        1,
    );
    assert!(max_diff(&s.value(), &s_ref) < 1e-12);
    assert!(max_diff(&t.value(), &t_ref) < 1e-12);
}

fn permute_axis(z: &Tensor, axis: usize, perm: &[usize]) -> Tensor {
    let s = z.shape().to_vec();
    Tensor::from_fn(s.clone(), |i| {
        let mut idx = vec![0; 5];
        let mut r = i;
        for d in (0..5).rev() {
            idx[d] = r % s[d];
            r /= s[d];
        }
        idx[axis] = perm[idx[axis]];
        z.get(&idx).unwrap()
    })
}

#[test]
fn pooling_invariants_are_exact() {
    let cfg = ModelConfig::default();
    let m = random_model(cfg, 4);
    let z = latent(&cfg, 8);
    let run = |z: &Tensor| {
        let tape = Tape::new();
        let mb = m.bind_frozen(&tape);
        let (zs, zt) = disentangle(&mb.spatial, &mb.temporal, &tape.constant(z.clone())).unwrap();
        let s = denoise_spatial(&mb.spatial, &cfg, &zs, 5).unwrap();
        let t = denoise_temporal(&mb.temporal, &cfg, &zt, 5).unwrap();
        ((*s.out.value()).clone(), (*t.out.value()).clone())
    };
    let (s0, t0) = run(&z);
    let (s1, _) = run(&permute_axis(&z, 1, &[3, 1, 7, 0, 2, 6, 5, 4]));
    let (_, t2) = run(&permute_axis(&z, 0, &[2, 0, 3, 1]));
    assert_eq!(s0, s1);
    assert_eq!(t0, t2);
}

#[test]
fn untrained_channels_predict_zero() {
    let cfg = ModelConfig::default();
    let m = Std4dModel::new(cfg, 2).unwrap();
    let tape = Tape::new();
    let b = m.bind_frozen(&tape);
    let zs = tape.constant(Tensor::ones([4, 8, 8, 8]));
    let zt = tape.constant(Tensor::ones([8, 8, 8, 8]));
    let s = denoise_spatial(&b.spatial, &cfg, &zs, 3).unwrap();
    let t = denoise_temporal(&b.temporal, &cfg, &zt, 3).unwrap();
    assert!(s.out.value().data().iter().all(|&v| v == 0.0));
    assert!(t.out.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn temporal_channel_is_reversal_equivariant_without_positions() {
    let cfg = ModelConfig {
        temporal_pos_enc: false,
        ..ModelConfig::default()
    };
    let m = random_model(cfg, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let zt = Tensor::randn([8, 8, 8, 8], 1.0, &mut rng);
    let reverse = |x: &Tensor| {
        let parts: Vec<Tensor> = (0..8).rev().map(|i| x.index_axis0(i).unwrap()).collect();
        Tensor::stack(&parts).unwrap()
    };
    let run = |x: &Tensor| {
        let tape = Tape::new();
        let b = m.bind_frozen(&tape);
        (*denoise_temporal(&b.temporal, &cfg, &tape.constant(x.clone()), 4)
            .unwrap()
            .out
            .value())
        .clone()
    };
    let a = reverse(&run(&zt));
    let b = run(&reverse(&zt));
    assert!(max_diff(&a, &b) < 1e-12);
}

#[test]
fn fuse_zero_and_determinism() {
    let cfg = ModelConfig::default();
    let m = Std4dModel::new(cfg, 9).unwrap();
    let tape = Tape::new();
    let b = m.bind_frozen(&tape);
    let zs = tape.constant(Tensor::zeros([4, 8, 8, 8]));
    let zt = tape.constant(Tensor::zeros([8, 8, 8, 8]));
    let skip = tape.constant(Tensor::zeros(cfg.latent_shape()));
    let null = tape.constant(Condition::null(cfg.cond_dim).tokens);
    let out = fuse_ffn(&b.fusion, &cfg, &zs, &zt, &null, &skip, 7).unwrap();
    assert_eq!(out.shape(), cfg.latent_shape());
    assert!(out.value().data().iter().all(|&v| v == 0.0));

    let m = random_model(cfg, 9);
    let b = m.bind_frozen(&tape);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let zs = tape.constant(Tensor::randn([4, 8, 8, 8], 1.0, &mut rng));
    let zt = tape.constant(Tensor::randn([8, 8, 8, 8], 1.0, &mut rng));
    let tok = Tensor::randn([5, 16], 1.0, &mut rng);
    let c1 = tape.constant(tok.clone());
    let c2 = tape.constant(tok);
    let a = fuse_ffn(&b.fusion, &cfg, &zs, &zt, &c1, &skip, 2).unwrap();
    let bb = fuse_ffn(&b.fusion, &cfg, &zs, &zt, &c2, &skip, 2).unwrap();
    assert_eq!(*a.value(), *bb.value());
    let bad = tape.constant(Tensor::zeros([2, 7]));
    assert!(fuse_ffn(&b.fusion, &cfg, &zs, &zt, &bad, &skip, 2).is_err());
}

#[test]
fn fuse_matches_scalar_oracle() {
    let cfg = mini();
    let m = random_model(cfg, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let [v, tf, n, _, c] = cfg.latent_shape();
    let (cs, ct, f) = (
        cfg.spatial_channels,
        cfg.temporal_channels,
        cfg.fusion_hidden,
    );
    let zs = Tensor::randn([v, n, n, cs], 1.0, &mut rng);
    let zt = Tensor::randn([tf, n, n, ct], 1.0, &mut rng);
    let skip = Tensor::randn(cfg.latent_shape(), 1.0, &mut rng);
    let cond = Tensor::randn([4, cfg.cond_dim], 1.0, &mut rng);
    let t = 6;

    let tape = Tape::new();
    let b = m.bind_frozen(&tape);
    let got = fuse_ffn(
        &b.fusion,
        &cfg,
        &tape.constant(zs.clone()),
        &tape.constant(zt.clone()),
        &tape.constant(cond.clone()),
        &tape.constant(skip.clone()),
        t,
    )
    .unwrap();

    let p = |name: &str| m.fusion.get(name).unwrap().clone();
    let skip_frames = skip.clone().reshape([v * tf, n, n, c]).unwrap();
    let skip_h = conv_ref(&skip_frames, &p("skip.w"), &p("skip.b"), 1);
    let temb = Tensor::new([cfg.time_dim], temb_ref(t, cfg.time_dim)).unwrap();
    let film = linear_ref(&temb, &p("temb.w"), &p("temb.b"));
    let keys = rows(&linear_ref(&cond, &p("k.w"), &p("k.b")));
    let vals = rows(&linear_ref(&cond, &p("v.w"), &p("v.b")));
    let mut max_err = 0.0f64;
    for vi in 0..v {
        for ti in 0..tf {
            for y in 0..n {
                for x in 0..n {
                    let mut cat = Vec::new();
                    for ch in 0..cs {
                        cat.push(zs.get(&[vi, y, x, ch]).unwrap());
                    }
                    for ch in 0..ct {
                        cat.push(zt.get(&[ti, y, x, ch]).unwrap());
                    }
                    let cat = Tensor::new([cs + ct], cat).unwrap();
                    let lin = linear_ref(&cat, &p("cat.w"), &p("cat.b"));
                    let h: Vec<f64> = (0..f)
                        .map(|j| {
                            let s = skip_h.get(&[vi * tf + ti, y, x, j]).unwrap();
                            silu((lin.data()[j] + s) * (1.0 + film.data()[j]))
                        })
                        .collect();
                    let ht = Tensor::new([f], h.clone()).unwrap();
                    let q = linear_ref(&ht, &p("q.w"), &p("q.b"));
                    let a = attention_ref(&[q.data().to_vec()], &keys, &vals).remove(0);
                    let a = linear_ref(
                        &Tensor::new([cfg.cond_dim], a).unwrap(),
                        &p("o.w"),
                        &p("o.b"),
                    );
                    let h2: Vec<f64> = h.iter().zip(a.data()).map(|(x, y)| x + y).collect();
                    let out = linear_ref(&Tensor::new([f], h2).unwrap(), &p("out.w"), &p("out.b"));
                    for ch in 0..c {
                        let g = got.value().get(&[vi, ti, y, x, ch]).unwrap();
                        max_err = max_err.max((g - out.data()[ch]).abs());
                    }
                }
            }
        }
    }
    assert!(max_err < 1e-12, "fusion oracle mismatch {max_err}");
}

#[test]
fn merged_equals_composed() {
    let cfg = ModelConfig::default();
    let m = random_model(cfg, 11);
    let u = merge_unified(cfg, &m.spatial, &m.temporal, &m.fusion).unwrap();
    let cond = Condition::null(cfg.cond_dim).tokens;
    for k in 0..20 {
        let z = latent(&cfg, 100 + k);
        let t = (k as usize) % 20;
        let a = u.predict(&z, t, &cond).unwrap();
        let tape = Tape::new();
        let b = m.bind_frozen(&tape);
        let zv = tape.constant(z.clone());
        let (zs, zt) = disentangle(&b.spatial, &b.temporal, &zv).unwrap();
        let s = denoise_spatial(&b.spatial, &cfg, &zs, t).unwrap();
        let tt = denoise_temporal(&b.temporal, &cfg, &zt, t).unwrap();
        let e = fuse_ffn(
            &b.fusion,
            &cfg,
            &s.out,
            &tt.out,
            &tape.constant(cond.clone()),
            &zv,
            t,
        )
        .unwrap();
        assert!(max_diff(&a, &e.value()) <= 1e-12);
    }
    let bytes = checkpoint::encode(&u.params);
    let back = UnifiedDenoiser::from_params(cfg, checkpoint::decode(&bytes).unwrap()).unwrap();
    assert_eq!(checkpoint::encode(&back.params), bytes);
    assert_eq!(back, u);
}

#[test]
fn merge_rejects_incompatible_channels() {
    let cfg = ModelConfig::default();
    let m = Std4dModel::new(cfg, 1).unwrap();
    let other = Std4dModel::new(
        ModelConfig {
            hidden: 8,
            fusion_hidden: 12,
            ..cfg
        },
        1,
    )
    .unwrap();
    assert!(merge_unified(cfg, &m.spatial, &other.temporal, &m.fusion).is_err());
    assert!(merge_unified(cfg, &m.spatial, &m.temporal, &other.fusion).is_err());
    assert!(merge_unified(cfg, &m.spatial, &m.temporal, &m.fusion).is_ok());
}

#[test]
fn end_to_end_denoiser_gradient() {
    let cfg = mini();
    let m = random_model(cfg, 21);
    let z = latent(&cfg, 22);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let probe = Tensor::randn(cfg.latent_shape().to_vec(), 1.0, &mut rng);
    let cond = Tensor::randn([2, cfg.cond_dim], 1.0, &mut rng);
    let params = m.to_params();
    let err = grad_check_params(
        |b| {
            let tape = b.tape();
            let mb = std4d::model::ModelBound {
                config: cfg,
                spatial: b.scope("spatial."),
                temporal: b.scope("temporal."),
                fusion: b.scope("fusion."),
            };
            let out = mb.forward(&tape.constant(z.clone()), 4, &tape.constant(cond.clone()))?;
            let (fs, ft) = mb.taps(&out)?;
            Ok(out
                .eps
                .mul(&tape.constant(probe.clone()))?
                .mean()
                .add(&fs.mean().add(&ft.mean())?.scale(0.1))?)
        },
        &params,
        1e-4,
    )
    .unwrap();
    println!("denoiser gradient relative error {err:.3e}");
    assert!(err < 1e-4, "denoiser gradient relative error {err}");
}
