mod common;

use autodiff::{Adam, AdamConfig, ParamSet, Tape, Tensor};
use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std4d::consistency::FeatureExtractor;
use std4d::gs4d::*;
use std4d::nn::grad_check_params;

type Raw = ([f64; 3], [f64; 4], [f64; 3], f64, [f64; 3]);

fn random_gaussians(seed: u64, n: usize) -> Vec<Gaussian3D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let p = [0; 3].map(|_| rng.random_range(-0.6..0.6));
            let q = [0; 4].map(|_| rng.random_range(-1.0..1.0));
            let s = [0; 3].map(|_| rng.random_range(0.12..0.3));
            let c = [0; 3].map(|_| rng.random_range(0.0..1.0));
            Gaussian3D::new(p, q, s, rng.random_range(0.3..0.8), c).unwrap()
        })
        .collect()
}

fn raw(gs: &[Gaussian3D]) -> Vec<Raw> {
    gs.iter()
        .map(|g| (g.position, g.rotation, g.scale, g.opacity, g.color))
        .collect()
}

fn check_against_oracle(gs: &[Gaussian3D], cam: &Camera, bg: [f64; 3]) -> f64 {
    let set = GaussianSet::new(gs).unwrap();
    let (rgb, depth, alpha) = render_set(&set, cam, bg).unwrap();
    let want = render_ref(
        &raw(gs),
        cam.azimuth,
        cam.elevation,
        cam.radius,
        cam.focal,
        cam.width,
        bg,
    );
    let mut worst: f64 = 0.0;
    for (p, w) in want.iter().enumerate() {
        for ch in 0..3 {
            worst = worst.max((rgb.data()[3 * p + ch] - w[ch]).abs());
        }
        worst = worst.max((depth.data()[p] - w[3]).abs());
        worst = worst.max((alpha.data()[p] - w[4]).abs());
    }
    worst
}

#[test]
fn render_matches_scalar_oracle() {
    let cam = Camera::looking_at_origin(0.7, 0.3, 3.0, 16).unwrap();
    let gs = random_gaussians(3, 3);
    assert!(check_against_oracle(&gs, &cam, [0.1, 0.2, 0.3]) < 1e-10);
    for seed in 0..5 {
        let gs = random_gaussians(100 + seed, 5);
        let cam = Camera::looking_at_origin(seed as f64, -0.2, 2.5, 16).unwrap();
        assert!(check_against_oracle(&gs, &cam, [0.0; 3]) < 1e-10);
    }
}

#[test]
fn zero_opacity_renders_background() {
    let mut gs = random_gaussians(4, 4);
    gs.iter_mut().for_each(|g| g.opacity = 0.0);
    let cam = Camera::looking_at_origin(0.0, 0.0, 3.0, 16).unwrap();
    let (rgb, depth, alpha) =
        render_set(&GaussianSet::new(&gs).unwrap(), &cam, [0.2, 0.4, 0.6]).unwrap();
    assert!(alpha.data().iter().all(|&a| a == 0.0));
    assert!(depth.data().iter().all(|&d| d == 0.0));
    for p in rgb.data().chunks(3) {
        assert_eq!(p, [0.2, 0.4, 0.6]);
    }
}

#[test]
fn centered_gaussian_peaks_at_principal_point() {
    let g = Gaussian3D::isotropic([0.0; 3], 0.2, 0.95, [1.0, 1.0, 1.0]).unwrap();
    let cam = Camera::looking_at_origin(0.4, 0.25, 3.0, 17).unwrap();
    let (rgb, _, _) = render_set(&GaussianSet::new(&[g]).unwrap(), &cam, [0.0; 3]).unwrap();
    let best = (0..17 * 17)
        .max_by(|&a, &b| rgb.data()[3 * a].total_cmp(&rgb.data()[3 * b]))
        .unwrap();
    assert_eq!((best / 17, best % 17), (8, 8));
}

#[test]
fn gaussians_behind_camera_give_background() {
    let cam = Camera::looking_at_origin(0.0, 0.0, 3.0, 8).unwrap();
    // the camera sits at +z looking toward -z
    let g = Gaussian3D::isotropic([0.0, 0.0, 5.0], 0.3, 0.9, [1.0, 0.0, 0.0]).unwrap();
    let (rgb, _, alpha) = render_set(&GaussianSet::new(&[g]).unwrap(), &cam, [0.5; 3]).unwrap();
    assert!(alpha.data().iter().all(|&a| a == 0.0));
    assert!(rgb.data().iter().all(|&v| v == 0.5));
}

#[test]
fn render_rejects_bad_inputs() {
    let g = Gaussian3D::isotropic([0.0; 3], 0.3, 0.9, [1.0, 0.0, 0.0]).unwrap();
    let set = GaussianSet::new(&[g]).unwrap();
    let mut cam = Camera::looking_at_origin(0.0, 0.0, 3.0, 8).unwrap();
    cam.width = 4;
    assert!(render_set(&set, &cam, [0.0; 3]).is_err());
    assert!(Camera::looking_at_origin(0.0, 0.0, -1.0, 16).is_err());
    assert!(GaussianSet::new(&[]).is_err());
    assert!(Gaussian3D::new([0.0; 3], [0.0; 4], [1.0; 3], 0.5, [0.0; 3]).is_err());
    assert!(Gaussian3D::new(
        [0.0; 3],
        [1.0, 0.0, 0.0, 0.0],
        [1.0, -1.0, 1.0],
        0.5,
        [0.0; 3]
    )
    .is_err());
}

fn probe_loss<'t>(
    g: &GaussianVars<'t>,
    cam: &Camera,
    probes: &(Tensor, Tensor, Tensor),
) -> std4d::Result<autodiff::Var<'t>> {
    let tape = g.position.tape();
    let out = render(g, cam, [0.3, 0.1, 0.2])?;
    let a = out.rgb.mul(&tape.constant(probes.0.clone()))?.mean();
    let b = out
        .depth
        .mul(&tape.constant(probes.1.clone()))?
        .mean()
        .scale(0.1);
    let c = out.alpha.mul(&tape.constant(probes.2.clone()))?.mean();
    Ok(a.add(&b)?.add(&c)?)
}

#[test]
fn render_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let probes = (
        Tensor::randn([16, 16, 3], 1.0, &mut rng),
        Tensor::randn([16, 16], 1.0, &mut rng),
        Tensor::randn([16, 16], 1.0, &mut rng),
    );
    for (seed, n) in [(5u64, 3usize), (6, 5)] {
        let set = GaussianSet::new(&random_gaussians(seed, n)).unwrap();
        let cam = Camera::looking_at_origin(0.3 * seed as f64, 0.2, 3.0, 16).unwrap();
        let err = grad_check_params(
            |b| probe_loss(&GaussianVars::from_bound(b)?, &cam, &probes),
            &set.to_params(),
            1e-6,
        )
        .unwrap();
        assert!(err < 5e-4, "seed {seed}: {err}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn composited_alpha_is_a_fraction(seed in 0u64..10_000, n in 1usize..12, az in 0.0f64..6.3) {
        let mut gs = random_gaussians(seed, n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for g in &mut gs {
            g.opacity = rng.random_range(0.0..1.0);
        }
        let cam = Camera::looking_at_origin(az, 0.1, 2.0, 12).unwrap();
        let (_, _, alpha) = render_set(&GaussianSet::new(&gs).unwrap(), &cam, [0.0; 3]).unwrap();
        prop_assert!(alpha.data().iter().all(|a| (0.0..=1.0).contains(a)));
    }
}

fn small_field(seed: u64, with_priors: bool) -> DeformField {
    let cfg = HexPlaneConfig {
        resolution: 5,
        feature_dim: 3,
        hidden: 4,
        fusion_depth: 2,
        prior_dim: 3,
        bound: 1.5,
    };
    let mut f = DeformField::new(cfg, with_priors, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    for (name, t) in f.params.iter_mut() {
        if name.starts_with("plane.") {
            *t = Tensor::uniform(t.shape().to_vec(), 0.2, 1.4, &mut rng);
        }
    }
    f
}

fn bilinear_ref(plane: &Tensor, u: f64, v: f64) -> Vec<f64> {
    let (r0, r1, d) = (plane.shape()[0], plane.shape()[1], plane.shape()[2]);
    let (u, v) = (
        u.clamp(0.0, 1.0) * (r0 - 1) as f64,
        v.clamp(0.0, 1.0) * (r1 - 1) as f64,
    );
    let (i, j) = (
        (u.floor() as usize).min(r0 - 2),
        (v.floor() as usize).min(r1 - 2),
    );
    let (fu, fv) = (u - i as f64, v - j as f64);
    (0..d)
        .map(|c| {
            let at = |a: usize, b: usize| plane.get(&[a, b, c]).unwrap();
            at(i, j) * (1.0 - fu) * (1.0 - fv)
                + at(i + 1, j) * fu * (1.0 - fv)
                + at(i, j + 1) * (1.0 - fu) * fv
                + at(i + 1, j + 1) * fu * fv
        })
        .collect()
}

fn query_ref(f: &DeformField, p: [f64; 3], t: f64) -> Vec<f64> {
    let b = f.config.bound;
    let q = [
        (p[0] + b) / (2.0 * b),
        (p[1] + b) / (2.0 * b),
        (p[2] + b) / (2.0 * b),
        t,
    ];
    let mut feat = vec![1.0; f.config.feature_dim];
    for (k, &(i, j)) in PLANES.iter().enumerate() {
        let v = bilinear_ref(f.params.get(&format!("plane.{k}")).unwrap(), q[i], q[j]);
        feat.iter_mut().zip(v).for_each(|(a, b)| *a *= b);
    }
    let mut h = Tensor::new([1, feat.len()], feat).unwrap();
    for l in 0..f.config.fusion_depth {
        if l > 0 {
            h = h.map(silu);
        }
        let w = f.params.get(&format!("fuse.{l}.w")).unwrap();
        let bias = f.params.get(&format!("fuse.{l}.b")).unwrap();
        h = linear_ref(&h, w, bias);
    }
    h.into_data()
}

#[test]
fn hexplane_trivial_cases() {
    let cfg = HexPlaneConfig {
        resolution: 4,
        feature_dim: 3,
        hidden: 3,
        fusion_depth: 1,
        prior_dim: 3,
        bound: 1.0,
    };
    let mut f = DeformField::new(cfg, false, 1).unwrap();
    for (name, t) in f.params.iter_mut() {
        if name.starts_with("plane.") {
            *t = Tensor::ones(t.shape().to_vec());
        }
    }
    *f.params.get_mut("fuse.0.w").unwrap() =
        Tensor::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    assert_eq!(
        hexplane_query(&f, 0.3, -0.2, 0.9, 0.4).unwrap(),
        vec![1.0; 3]
    );
    // (-0.75, 0, 1.5, 0.25) sits on lattice node (1, 2, 4, 1)
    let f = {
        let mut f = small_field(2, false);
        f.config.resolution = 5;
        f
    };
    let got = hexplane_query(&f, -0.75, 0.0, 1.5, 0.25).unwrap();
    let node = |k: usize, a: usize, b: usize| -> Vec<f64> {
        (0..3)
            .map(|c| {
                f.params
                    .get(&format!("plane.{k}"))
                    .unwrap()
                    .get(&[a, b, c])
                    .unwrap()
            })
            .collect()
    };
    let idx = [1usize, 2, 4, 1];
    let mut feat = vec![1.0; 3];
    for (k, &(i, j)) in PLANES.iter().enumerate() {
        feat.iter_mut()
            .zip(node(k, idx[i], idx[j]))
            .for_each(|(a, b)| *a *= b);
    }
    let mut h = Tensor::new([1, 3], feat).unwrap();
    h = linear_ref(
        &h,
        f.params.get("fuse.0.w").unwrap(),
        f.params.get("fuse.0.b").unwrap(),
    )
    .map(silu);
    h = linear_ref(
        &h,
        f.params.get("fuse.1.w").unwrap(),
        f.params.get("fuse.1.b").unwrap(),
    );
    assert_eq!(got.len(), 4);
    assert!(got.iter().zip(h.data()).all(|(a, b)| (a - b).abs() < 1e-15));
}

#[test]
fn hexplane_matches_scalar_oracle() {
    let f = small_field(37, false);
    let got = hexplane_query(&f, 0.3, 0.7, 0.1, 0.5).unwrap();
    let want = query_ref(&f, [0.3, 0.7, 0.1], 0.5);
    assert!(got.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-13));
    // outside the domain is clamped
    let a = hexplane_query(&f, 9.0, 0.7, -9.0, 2.0).unwrap();
    let b = hexplane_query(&f, 1.5, 0.7, -1.5, 1.0).unwrap();
    assert_eq!(a, b);
}

#[test]
fn hexplane_is_continuous() {
    let f = small_field(38, false);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let p: [f64; 4] = [0; 4].map(|_| rng.random_range(-1.4..1.4));
        let t = p[3].abs() / 1.4;
        let a = hexplane_query(&f, p[0], p[1], p[2], t).unwrap();
        let b = hexplane_query(&f, p[0] + 1e-9, p[1] - 1e-9, p[2] + 1e-9, t).unwrap();
        let d: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(d < 1e-6);
    }
}

#[test]
fn prior_attention_cases() {
    let f = small_field(40, true);
    let tape = Tape::new();
    let b = f.params.bind_frozen(&tape);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let feat = Tensor::randn([5, 4], 1.0, &mut rng);
    let fv = tape.constant(feat.clone());
    let token = Tensor::new([1, 3], vec![0.2, -0.7, 1.1]).unwrap();
    let one = PriorBank::new(token.clone(), token.clone()).unwrap();
    let (vs, vt) = st_hexplane_attend(&b, &fv, &one).unwrap();
    for row in vs
        .value()
        .data()
        .chunks(3)
        .chain(vt.value().data().chunks(3))
    {
        assert!(row
            .iter()
            .zip(token.data())
            .all(|(a, b)| (a - b).abs() < 1e-15));
    }
    let same = Tensor::from_fn([4, 3], |i| token.data()[i % 3]);
    let (vs, _) =
        st_hexplane_attend(&b, &fv, &PriorBank::new(same.clone(), same).unwrap()).unwrap();
    assert!(vs
        .value()
        .data()
        .iter()
        .enumerate()
        .all(|(i, v)| (v - token.data()[i % 3]).abs() < 1e-15));

    let os = Tensor::randn([6, 3], 1.0, &mut rng);
    let ot = Tensor::randn([7, 3], 1.0, &mut rng);
    let (vs, vt) =
        st_hexplane_attend(&b, &fv, &PriorBank::new(os.clone(), ot.clone()).unwrap()).unwrap();
    let q = linear_ref(
        &feat,
        f.params.get("query.w").unwrap(),
        f.params.get("query.b").unwrap(),
    );
    for (got, bank) in [(vs, &os), (vt, &ot)] {
        let want = attention_ref(&rows(&q), &rows(bank), &rows(bank));
        let flat: Vec<f64> = want.into_iter().flatten().collect();
        assert!(got
            .value()
            .data()
            .iter()
            .zip(&flat)
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }
    assert!(st_hexplane_attend(&b, &fv, &PriorBank::empty(3)).is_err());
}

fn priors(seed: u64, n: usize, d: usize) -> PriorBank {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PriorBank::new(
        Tensor::randn([n, d], 1.0, &mut rng),
        Tensor::randn([n, d], 1.0, &mut rng),
    )
    .unwrap()
}

fn randomize_heads(f: &mut DeformField, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in f.params.iter_mut() {
        if name.starts_with("head.") {
            *t = Tensor::randn(t.shape().to_vec(), std, &mut rng);
        }
    }
}

#[test]
fn zero_heads_are_the_identity() {
    let f = small_field(42, true);
    let bank = priors(1, 4, 3);
    for g in random_gaussians(9, 6) {
        // against the log-scale round trip; the output quaternion is
        // renormalized, which may move it by an ulp
        let stored = GaussianSet::new(&[g]).unwrap().get(0).unwrap();
        let d = deform(&g, &f, &bank, 0.6).unwrap();
        assert_eq!(
            (d.position, d.scale, d.opacity, d.color),
            (stored.position, stored.scale, stored.opacity, stored.color)
        );
        assert!(d
            .rotation
            .iter()
            .zip(g.rotation)
            .all(|(a, b)| (a - b).abs() < 1e-15));
    }
    let mut f = small_field(43, false);
    f.params.get_mut("head.dp.b").unwrap().data_mut()[0] = 0.1;
    let g = Gaussian3D::new(
        [0.25, -0.5, 0.125],
        [1.0, 0.0, 0.0, 0.0],
        [0.2; 3],
        0.5,
        [0.1; 3],
    )
    .unwrap();
    let d = deform(&g, &f, &PriorBank::empty(3), 0.3).unwrap();
    assert_eq!(d.position, [0.25 + 0.1, -0.5, 0.125]);
    let stored = GaussianSet::new(&[g]).unwrap().get(0).unwrap();
    assert_eq!(
        (d.scale, d.opacity, d.color),
        (stored.scale, g.opacity, g.color)
    );
}

fn quat_mul_ref(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

#[test]
fn deform_matches_composed_oracle() {
    let mut f = small_field(44, true);
    randomize_heads(&mut f, 45, 0.3);
    let bank = priors(46, 5, 3);
    let g = random_gaussians(47, 1)[0];
    let got = deform(&g, &f, &bank, 0.35).unwrap();

    let feat = query_ref(&f, g.position, 0.35);
    let ft = Tensor::new([1, 4], feat.clone()).unwrap();
    let q = linear_ref(
        &ft,
        f.params.get("query.w").unwrap(),
        f.params.get("query.b").unwrap(),
    );
    let vs = attention_ref(&rows(&q), &rows(&bank.o_s), &rows(&bank.o_s));
    let vt = attention_ref(&rows(&q), &rows(&bank.o_t), &rows(&bank.o_t));
    let input: Vec<f64> = feat
        .into_iter()
        .chain(vs[0].clone())
        .chain(vt[0].clone())
        .collect();
    let x = Tensor::new([1, input.len()], input).unwrap();
    let head = |n: &str| {
        linear_ref(
            &x,
            f.params.get(&format!("head.{n}.w")).unwrap(),
            f.params.get(&format!("head.{n}.b")).unwrap(),
        )
        .into_data()
    };
    let (dp, dr, ds) = (head("dp"), head("dr"), head("ds"));
    let qd = [1.0 + dr[0], dr[1], dr[2], dr[3]];
    let n = qd.iter().map(|v| v * v).sum::<f64>().sqrt();
    let q = quat_mul_ref(qd.map(|v| v / n), g.rotation);
    let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    for i in 0..3 {
        assert!((got.position[i] - (g.position[i] + dp[i])).abs() < 1e-12);
        assert!((got.scale[i] - (g.scale[i].ln() + ds[i]).exp()).abs() < 1e-12);
    }
    for i in 0..4 {
        assert!((got.rotation[i] - q[i] / qn).abs() < 1e-12);
    }
    assert!((got.rotation.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
}

#[test]
fn field_and_deform_gradients() {
    let mut f = small_field(48, true);
    randomize_heads(&mut f, 49, 0.3);
    let bank = priors(50, 5, 3);
    let set = GaussianSet::new(&random_gaussians(51, 4)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let probe = Tensor::randn([4, 4], 1.0, &mut rng);
    let err = grad_check_params(
        |b| {
            let tape = b.tape();
            let p = tape.constant(set.position.clone());
            Ok(hexplane_query_var(b, &f.config, &p, 0.4)?
                .mul(&tape.constant(probe.clone()))?
                .mean())
        },
        &f.params,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "hexplane {err}");
    let probes = [3usize, 4, 3].map(|w| Tensor::randn([4, w], 1.0, &mut rng));
    let err = grad_check_params(
        |b| {
            let tape = b.tape();
            let d = deform_var(b, &f, &set.bind_frozen(tape), &bank, 0.7)?;
            let mut acc = tape.scalar(0.0);
            for (v, p) in [d.position, d.rotation, d.log_scale].iter().zip(&probes) {
                acc = acc.add(&v.mul(&tape.constant(p.clone()))?.mean())?;
            }
            Ok(acc)
        },
        &f.params,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "deform {err}");
}

#[test]
fn identity_deformation_renders_bit_identically() {
    let f = DeformField::new(HexPlaneConfig::default(), true, 3).unwrap();
    let bank = priors(4, 8, 16);
    let set = GaussianSet::new(&random_gaussians(53, 20)).unwrap();
    let cam = Camera::looking_at_origin(0.5, 0.2, 3.0, 16).unwrap();
    let (still, _, _) = render_set(&set, &cam, [0.0; 3]).unwrap();
    for t in [0.0, 0.5, 1.0] {
        let tape = Tape::new();
        let b = f.params.bind_frozen(&tape);
        let d = deform_var(&b, &f, &set.bind_frozen(&tape), &bank, t).unwrap();
        let out = render(&d, &cam, [0.0; 3]).unwrap();
        assert_eq!(*out.rgb.value(), still);
    }
}

#[test]
fn depth_loss_conventions() {
    let tape = Tape::new();
    let ramp = tape.constant(Tensor::from_fn([2, 5, 6], |i| (i % 6) as f64));
    assert!((loss_dep(&ramp).unwrap().item().unwrap() - 1.0).abs() < 1e-15);
    let flat = tape.constant(Tensor::full([3, 4], 2.5));
    assert_eq!(loss_dep(&flat).unwrap().item().unwrap(), 0.0);
    assert!(loss_dep(&tape.constant(Tensor::zeros([1, 5]))).is_err());
}

#[test]
fn gs_loss_cases() {
    let fx = FeatureExtractor::with_layers(2, 16, &[(4, 1), (4, 2)]);
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let gt = Tensor::uniform([2, 16, 16, 3], 0.0, 1.0, &mut rng);
    let tape = Tape::new();
    let w = GsWeights {
        lambda_l1: 1.0,
        lambda_lpips: 0.1,
        lambda_dep: 0.05,
        lambda_hex: 1.0,
    };
    let perfect = tape.constant(gt.clone());
    let flat = tape.constant(Tensor::full([2, 16, 16], 3.0));
    assert_eq!(
        loss_gs(&perfect, &gt, &flat, None, &w, &fx)
            .unwrap()
            .item()
            .unwrap(),
        0.0
    );

    let pred = Tensor::uniform([2, 16, 16, 3], 0.0, 1.0, &mut rng);
    let depth = Tensor::uniform([2, 16, 16], 2.0, 4.0, &mut rng);
    let hex = tape.scalar(0.37);
    let got = loss_gs(
        &tape.constant(pred.clone()),
        &gt,
        &tape.constant(depth.clone()),
        Some(&hex),
        &w,
        &fx,
    )
    .unwrap()
    .item()
    .unwrap();
    let l1 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / pred.numel() as f64;
    let perc: f64 = {
        let feats = |x: &Tensor| {
            let mut h = x.clone();
            let mut out = Vec::new();
            for i in 0..fx.num_layers() {
                let (wt, b, s) = fx.layer(i).unwrap();
                h = conv_ref(&h, wt, b, s).map(silu);
                out.push(h.clone());
            }
            out
        };
        feats(&pred)
            .iter()
            .zip(feats(&gt))
            .map(|(a, b)| mse(a.data(), b.data()))
            .sum()
    };
    let mut dh = 0.0;
    let mut dv = 0.0;
    for n in 0..2 {
        for y in 0..16 {
            for x in 0..16 {
                let d = |yy: usize, xx: usize| depth.get(&[n, yy, xx]).unwrap();
                if x + 1 < 16 {
                    dh += (d(y, x + 1) - d(y, x)).powi(2);
                }
                if y + 1 < 16 {
                    dv += (d(y + 1, x) - d(y, x)).powi(2);
                }
            }
        }
    }
    let dep = dh / (2.0 * 16.0 * 15.0) + dv / (2.0 * 15.0 * 16.0);
    let want = l1 + 0.1 * perc + 0.05 * dep + 0.37;
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    let neg = GsWeights {
        lambda_dep: -1.0,
        ..w
    };
    assert!(loss_gs(&perfect, &gt, &flat, None, &neg, &fx).is_err());
}

fn scene(seed: u64) -> GaussianSet {
    GaussianSet::new(&random_gaussians(seed, 12)).unwrap()
}

#[test]
fn hex_loss_self_consistency_and_single_frame() {
    let set = scene(70);
    let cam = Camera::looking_at_origin(0.0, 0.2, 3.0, 16).unwrap();
    let f = DeformField::new(HexPlaneConfig::default(), false, 1).unwrap();
    let (img, _, _) = render_set(&set, &cam, [0.0; 3]).unwrap();
    let video = Tensor::stack(&[img.clone(), img.clone(), img.clone()]).unwrap();
    let tape = Tape::new();
    let b = f.params.bind_frozen(&tape);
    let g = set.bind_frozen(&tape);
    let none = PriorBank::empty(16);
    assert_eq!(
        loss_hex(&b, &f, &g, &none, &video, &cam, None, [0.0; 3])
            .unwrap()
            .item()
            .unwrap(),
        0.0
    );

    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let target = Tensor::uniform([1, 16, 16, 3], 0.0, 1.0, &mut rng);
    let got = loss_hex(&b, &f, &g, &none, &target, &cam, None, [0.0; 3])
        .unwrap()
        .item()
        .unwrap();
    let want = mse(img.data(), target.data());
    assert!((got - want).abs() < 1e-12);
    assert!(loss_hex(&b, &f, &g, &none, &video, &cam, Some(&[3]), [0.0; 3]).is_err());
}

#[test]
fn hex_loss_decreases_on_shifted_target() {
    let set = scene(72);
    let cam = Camera::looking_at_origin(0.0, 0.2, 3.0, 16).unwrap();
    let mut shifted = set.clone();
    for p in shifted.position.data_mut().chunks_mut(3) {
        p[0] += 0.15;
    }
    let (img, _, _) = render_set(&shifted, &cam, [0.0; 3]).unwrap();
    let video = Tensor::stack(&[img.clone(), img]).unwrap();
    let f = DeformField::new(HexPlaneConfig::default(), false, 1).unwrap();
    let none = PriorBank::empty(16);
    let mut cur = set;
    let mut opt = Adam::new(AdamConfig {
        lr: 2e-3,
        clip_norm: None,
        ..AdamConfig::default()
    });
    let mut last = f64::INFINITY;
    for _ in 0..50 {
        let tape = Tape::new();
        let b = f.params.bind_frozen(&tape);
        let gb = cur.to_params().bind(&tape);
        let loss = loss_hex(
            &b,
            &f,
            &GaussianVars::from_bound(&gb).unwrap(),
            &none,
            &video,
            &cam,
            None,
            [0.0; 3],
        )
        .unwrap();
        let l = loss.item().unwrap();
        assert!(l > 0.0 && l < last, "{l} after {last}");
        last = l;
        let grads = gb.grads(loss).unwrap();
        let mut ps = cur.to_params();
        opt.step(&mut ps, &grads).unwrap();
        cur = GaussianSet::from_params(&ps).unwrap();
        cur.project();
    }
}

#[test]
fn quaternions_stay_normalized() {
    let mut set = scene(80);
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let mut opt = Adam::new(AdamConfig {
        lr: 5e-2,
        clip_norm: None,
        ..AdamConfig::default()
    });
    for _ in 0..10_000 {
        let mut ps = ParamSet::new();
        ps.insert("rotation", set.rotation.clone());
        let mut g = ParamSet::new();
        g.insert(
            "rotation",
            Tensor::randn(set.rotation.shape().to_vec(), 1.0, &mut rng),
        );
        opt.step(&mut ps, &g).unwrap();
        set.rotation = ps.get("rotation").unwrap().clone();
        set.project();
        for q in set.rotation.data().chunks(4) {
            assert!((q.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
        }
    }
}

fn toy_video(set: &GaussianSet, cams: &[Camera], frames: usize) -> (Tensor, Tensor) {
    let mut views = Vec::new();
    let mut stills = Vec::new();
    for cam in cams {
        let mut seq = Vec::new();
        for tau in 0..frames {
            let mut s = set.clone();
            for p in s.position.data_mut().chunks_mut(3) {
                p[1] += 0.1 * tau as f64 / (frames - 1) as f64;
            }
            seq.push(render_set(&s, cam, [0.0; 3]).unwrap().0);
        }
        stills.push(seq[0].clone());
        views.push(Tensor::stack(&seq).unwrap());
    }
    (
        Tensor::stack(&views).unwrap(),
        Tensor::stack(&stills).unwrap(),
    )
}

#[test]
fn zero_iteration_construction_returns_initial_state() {
    let cams = Camera::orbit(2, 0.2, 3.0, 16).unwrap();
    let (video, stills) = toy_video(&scene(90), &cams, 3);
    let fx = FeatureExtractor::new(1, 16);
    let cfg = ConstructConfig {
        coarse_iters: 0,
        fine_iters: 0,
        num_points: 64,
        ..ConstructConfig::default()
    };
    let none = PriorBank::empty(16);
    let out = construct_4d(&video, &stills, &cams, &none, &fx, &cfg).unwrap();
    assert!(out.records.is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = std4d::gs4d::init_anchors(&stills.index_axis0(0).unwrap(), &cams[0], &cfg, &mut rng)
        .unwrap();
    assert_eq!(out.gaussians, init);
    assert_eq!(
        out.field,
        DeformField::new(cfg.field, false, cfg.seed + 1).unwrap()
    );
    assert_eq!(out.psnr.len(), 2);
    assert_eq!(out.psnr[0].len(), 3);
}

#[test]
fn short_construction_improves_the_fit() {
    let cams = Camera::orbit(2, 0.2, 3.0, 16).unwrap();
    let (video, stills) = toy_video(&scene(91), &cams, 3);
    let fx = FeatureExtractor::new(1, 16);
    let cfg = ConstructConfig {
        coarse_iters: 40,
        fine_iters: 20,
        num_points: 96,
        batch: 2,
        ..ConstructConfig::default()
    };
    let bank = priors(5, 6, 16);
    let base = construct_4d(
        &video,
        &stills,
        &cams,
        &bank,
        &fx,
        &ConstructConfig {
            coarse_iters: 0,
            fine_iters: 0,
            ..cfg.clone()
        },
    )
    .unwrap();
    let out = construct_4d(&video, &stills, &cams, &bank, &fx, &cfg).unwrap();
    assert_eq!(out.records.len(), 60);
    assert!(
        out.mean_psnr() > base.mean_psnr() + 1.0,
        "{} vs {}",
        out.mean_psnr(),
        base.mean_psnr()
    );
    let again = construct_4d(&video, &stills, &cams, &bank, &fx, &cfg).unwrap();
    assert_eq!(again.gaussians, out.gaussians);
    assert!(construct_4d(&video, &stills, &cams[..1], &bank, &fx, &cfg).is_err());
    assert!(construct_4d(&video, &stills, &cams, &priors(5, 6, 8), &fx, &cfg).is_err());
}
