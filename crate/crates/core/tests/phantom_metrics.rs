use dmrigen::metrics::{difference_map, fa_map, nmse, ssim};
use dmrigen::phantom::{
    add_rician_noise, brain_mask, fa_from_eigenvalues, generate_pair, isotropic_tensor, load_pair,
    save_pair, simulate_signal, stick_tensor, tensor_fa, Compartment, PhantomConfig, VoxelModel,
    FIBER_EIGENVALUES,
};
use dmrigen::sh::{compute_rish, compute_scale_map, fit_sh, DEFAULT_LAMBDA_LB};
use dmrigen::volume::{
    fibonacci_hemisphere, resample4_trilinear, seeded_rng, GradientTable, Volume3, Volume4,
};
use nalgebra::{Rotation3, Vector3};
use rand::Rng;

fn single(tensor: nalgebra::Matrix3<f64>) -> Vec<VoxelModel> {
    vec![VoxelModel {
        s0: 1000.0,
        compartments: vec![Compartment { fraction: 1.0, tensor }],
    }]
}

fn small_config() -> PhantomConfig {
    let mut c = PhantomConfig::default();
    c.source.dims = [10; 3];
    c.source.voxel_size = 2.0;
    c.target.dims = [12; 3];
    c.target.voxel_size = 20.0 / 12.0;
    c
}

#[test]
fn same_seed_same_pair() {
    let c = small_config();
    assert_eq!(generate_pair(&c, 5).unwrap(), generate_pair(&c, 5).unwrap());
    assert_ne!(generate_pair(&c, 5).unwrap().source, generate_pair(&c, 6).unwrap().source);
}

#[test]
fn noiseless_identical_domains_agree() {
    let mut c = small_config();
    c.target = c.source.clone();
    c.source.snr = f64::INFINITY;
    c.target.snr = f64::INFINITY;
    c.contrast_gains = [1.0; 3];
    c.contrast_amplitude = 0.0;
    let p = generate_pair(&c, 11).unwrap();
    let rs = compute_rish(&fit_sh(&p.source.data, &p.source.gtab, 4, DEFAULT_LAMBDA_LB).unwrap()).unwrap();
    let rt = compute_rish(&fit_sh(&p.target.data, &p.target.gtab, 4, DEFAULT_LAMBDA_LB).unwrap()).unwrap();
    for (a, b) in rs.volume().data().iter().zip(rt.volume().data()) {
        assert!((a - b).abs() < 1e-4);
    }
    let lam = compute_scale_map(&rt, &rs, 1e-8).unwrap();
    let mask = brain_mask(&p.source);
    let n = mask.len();
    for q in 0..3 {
        for v in (0..n).filter(|&v| mask[v]) {
            if rs.volume().get(v, q) >= 1e-4 {
                assert!((lam.volume().get(v, q) - 1.0).abs() < 1e-4);
            }
        }
    }
}

#[test]
fn default_contrast_gives_nontrivial_scale_maps() {
    let c = PhantomConfig::default();
    let p = generate_pair(&c, 3).unwrap();
    let rs = compute_rish(&fit_sh(&p.source.data, &p.source.gtab, 4, DEFAULT_LAMBDA_LB).unwrap()).unwrap();
    let rt = compute_rish(&fit_sh(&p.target.data, &p.target.gtab, 4, DEFAULT_LAMBDA_LB).unwrap()).unwrap();
    let rt_down = resample4_trilinear(rt.volume(), c.source.dims).unwrap();
    let rt_down = dmrigen::sh::RishFeatures::new(4, rt_down).unwrap();
    let lam = compute_scale_map(&rt_down, &rs, 1e-8).unwrap();
    let mask = brain_mask(&p.source);
    let inside: Vec<usize> = (0..mask.len()).filter(|&v| mask[v]).collect();
    for q in 0..3 {
        let off = inside
            .iter()
            .filter(|&&v| (lam.volume().get(v, q) - 1.0).abs() >= 0.1)
            .count();
        let frac = off as f64 / inside.len() as f64;
        assert!(frac >= 0.2, "order {}: {frac}", 2 * q);
    }
}

#[test]
fn rayleigh_mean_of_pure_noise() {
    let n = 100_000;
    let v = Volume4::zeros([n, 1, 1, 1], [1.0; 3]).unwrap();
    let out = add_rician_noise(&v, 10.0, 1000.0, &mut seeded_rng(1)).unwrap();
    let mean = out.data().iter().sum::<f64>() / n as f64;
    let expected = 100.0 * (std::f64::consts::PI / 2.0).sqrt();
    assert!((mean - expected).abs() / expected < 0.02, "{mean} vs {expected}");
}

#[test]
fn signal_minimum_lies_along_principal_axis() {
    let mut rng = seeded_rng(4);
    for _ in 0..5 {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        let dense = fibonacci_hemisphere(4000);
        let g = GradientTable::single_shell(1000.0, 0, &dense).unwrap();
        let s = simulate_signal([1, 1, 1], [1.0; 3], &single(stick_tensor(axis, FIBER_EIGENVALUES)), &g).unwrap();
        let kmin = (0..g.len()).min_by(|&a, &b| s.get(0, a).total_cmp(&s.get(0, b))).unwrap();
        let d = Vector3::from(dense[kmin]);
        // Principal eigenvector from the tensor itself.
        let eig = nalgebra::SymmetricEigen::new(stick_tensor(axis, FIBER_EIGENVALUES));
        let imax = (0..3).max_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b])).unwrap();
        let e1 = eig.eigenvectors.column(imax).into_owned();
        let angle = d.dot(&e1).abs().min(1.0).acos().to_degrees();
        assert!(angle < 5.0, "{angle}");
    }
}

fn scheme() -> GradientTable {
    GradientTable::single_shell(1000.0, 2, &fibonacci_hemisphere(30)).unwrap()
}

#[test]
fn fa_of_isotropic_and_analytic_tensors() {
    let g = scheme();
    let iso = simulate_signal([1, 1, 1], [1.0; 3], &single(isotropic_tensor(0.8e-3)), &g).unwrap();
    assert!(fa_map(&iso, &g).unwrap().data()[0] < 1e-6);
    let rot = Rotation3::from_euler_angles(0.3, -0.7, 1.1);
    let d = rot.matrix() * nalgebra::Matrix3::from_diagonal(&Vector3::new(1.7e-3, 0.3e-3, 0.3e-3)) * rot.matrix().transpose();
    let s = simulate_signal([1, 1, 1], [1.0; 3], &single(d), &g).unwrap();
    let closed = (0.5f64).sqrt() * (2.0 * 1.4f64.powi(2)).sqrt() / (1.7f64.powi(2) + 0.18).sqrt();
    assert!((fa_map(&s, &g).unwrap().data()[0] - closed).abs() < 1e-3);
    assert!((fa_from_eigenvalues(FIBER_EIGENVALUES) - closed).abs() < 1e-12);
}

#[test]
fn fa_of_noiseless_phantom_voxel_matches_its_tensor() {
    let c = small_config();
    let p = generate_pair(&c, 9).unwrap();
    let models = p.voxel_models(&c, false);
    let g = scheme();
    let mut checked = 0;
    for vm in models.iter().filter(|m| m.s0 > 0.0) {
        // Dominant compartment alone, as a single-tensor voxel.
        let dom = vm.compartments.iter().max_by(|a, b| a.fraction.total_cmp(&b.fraction)).unwrap();
        let s = simulate_signal([1, 1, 1], [1.0; 3], &single(dom.tensor), &g).unwrap();
        let fa = fa_map(&s, &g).unwrap().data()[0];
        assert!((fa - tensor_fa(&dom.tensor)).abs() < 1e-6);
        checked += 1;
        if checked > 50 {
            break;
        }
    }
    assert!(checked > 0);
}

#[test]
fn fa_stays_in_unit_interval_on_noisy_data() {
    let c = small_config();
    let p = generate_pair(&c, 2).unwrap();
    let fa = fa_map(&p.source.data, &p.source.gtab).unwrap();
    assert!(fa.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

fn textured(dims: [usize; 3], seed: u64) -> Volume3 {
    let mut rng = seeded_rng(seed);
    Volume3::from_fn(dims, [1.0; 3], |x, y, z| {
        ((x as f64) * 0.7).sin() + ((y + z) as f64 * 0.4).cos() + rng.random_range(0.0..0.3) + 3.0
    })
    .unwrap()
}

#[test]
fn ssim_luminance_collapse_symmetry_and_scaling() {
    let t = textured([8, 8, 8], 1);
    let mask = vec![true; t.len()];
    let range = t.max() - t.min();
    let shifted = t.map(|v| v + 1000.0 * range).unwrap();
    assert!(ssim(&shifted, &t, &mask).unwrap() < 0.5);
    // Mirrored copy: same value set, hence same dynamic range both ways.
    let d = t.dims();
    let mirrored = Volume3::from_fn(d, [1.0; 3], |x, y, z| t.get(d[0] - 1 - x, y, z)).unwrap();
    let ab = ssim(&t, &mirrored, &mask).unwrap();
    let ba = ssim(&mirrored, &t, &mask).unwrap();
    assert!((ab - ba).abs() < 1e-9);
    let noisy = textured([8, 8, 8], 2);
    let base = ssim(&noisy, &t, &mask).unwrap();
    for k in [0.01, 3.0, 250.0] {
        let s = ssim(&noisy.map(|v| k * v).unwrap(), &t.map(|v| k * v).unwrap(), &mask).unwrap();
        assert!((s - base).abs() < 1e-6);
    }
}

#[test]
fn difference_maps_follow_nmse_ordering() {
    let t = textured([6, 6, 6], 3);
    let mask = vec![true; t.len()];
    assert!(difference_map(&t, &t).unwrap().data().iter().all(|&v| v == 0.0));
    let plus = difference_map(&t.map(|v| v + 0.1).unwrap(), &t).unwrap();
    assert!(plus.data().iter().all(|&v| (v - 0.1).abs() < 1e-12));
    let close = t.map(|v| v * 1.02).unwrap();
    let far = t.map(|v| v * 0.9).unwrap();
    let mad = |p: &Volume3| difference_map(p, &t).unwrap().data().iter().map(|v| v.abs()).sum::<f64>();
    let (nc, nf) = (nmse(&close, &t, &mask).unwrap(), nmse(&far, &t, &mask).unwrap());
    assert!(nc < nf);
    assert!(mad(&close) < mad(&far));
    for k in [0.0, 0.5, 1.3, 2.0] {
        let n = nmse(&t.map(|v| k * v).unwrap(), &t, &mask).unwrap();
        assert!((n - (k - 1.0f64).powi(2)).abs() < 1e-12);
    }
}

#[test]
fn sidecar_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_config();
    let p = generate_pair(&c, 1).unwrap();
    save_pair(dir.path(), "sub-000", &c, &p).unwrap();
    let (side, s, t) = load_pair(dir.path(), "sub-000").unwrap();
    assert_eq!(s, p.source);
    assert_eq!(t, p.target);
    assert_eq!(side.geometry, p.geometry);
    assert_eq!(side.seed, 1);
}
