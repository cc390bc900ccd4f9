//! Stage-level benchmarks along the estimation path: geometry
//! primitives, the patch renderer, one net forward pass and the full
//! consensus solve. Run with `cargo bench -p monocone-bench`.

use criterion::{black_box, criterion_group, criterion_main, Criterion};

use monocone_core::cone::{canonical_keypoints, ConeGeometry, CR_3D};
use monocone_core::config::RunConfig;
use monocone_core::geometry::{cross_ratio_2d, project, Point2, Point3};
use monocone_core::pnp::{depth_init, ransac_pnp, refine_lm};
use monocone_core::regressor::{NetConfig, RegressorNet};
use monocone_core::synth::{project_cone_keypoints, render_patch, simulate_detection};

fn bench_geometry(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let cam = cfg.camera_model().unwrap();
    let p = Point3::new(1.2, 0.8, 9.5);
    c.bench_function("project_point", |b| {
        b.iter(|| project(black_box(&cam), black_box(p)).unwrap())
    });

    let quad = [
        Point2::new(410.0, 120.0),
        Point2::new(421.5, 163.0),
        Point2::new(430.2, 196.0),
        Point2::new(443.0, 240.0),
    ];
    c.bench_function("cross_ratio_2d", |b| {
        b.iter(|| cross_ratio_2d(black_box(&quad)).unwrap())
    });
}

fn bench_solver(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let cam = cfg.camera_model().unwrap();
    let g = cfg.cone_geometry().unwrap();
    let ransac = cfg.ransac_config();
    let model = canonical_keypoints(&g);
    let position = Point3::new(1.5, cfg.experiment.ground_y, 9.0);
    let kps = project_cone_keypoints(&cam, position, &g).unwrap();
    let init = depth_init(&cam, &kps, &g).unwrap();

    c.bench_function("depth_init", |b| {
        b.iter(|| depth_init(black_box(&cam), black_box(&kps), black_box(&g)).unwrap())
    });
    c.bench_function("refine_lm_7pt", |b| {
        b.iter(|| {
            refine_lm(black_box(&cam), black_box(&model), black_box(&kps.points), &init, None)
                .unwrap()
        })
    });
    c.bench_function("ransac_pnp_35_subsets", |b| {
        b.iter(|| {
            ransac_pnp(black_box(&cam), black_box(&model), black_box(&kps.points), &init, &ransac)
                .unwrap()
        })
    });
}

fn bench_renderer(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let cam = cfg.camera_model().unwrap();
    let g = cfg.cone_geometry().unwrap();
    let noise = cfg.noise_params();
    let position = Point3::new(0.4, cfg.experiment.ground_y, 7.0);

    c.bench_function("simulate_detection", |b| {
        b.iter(|| {
            simulate_detection(black_box(&cam), black_box(position), &g, 0.15).unwrap()
        })
    });
    c.bench_function("render_patch_80px", |b| {
        let mut seed = 0u64;
        b.iter(|| {
            seed = seed.wrapping_add(1);
            render_patch(black_box(&cam), black_box(position), &g, &noise, 0.15, seed).unwrap()
        })
    });
}

fn bench_net(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let cam = cfg.camera_model().unwrap();
    let g = cfg.cone_geometry().unwrap();
    let noise = cfg.noise_params();
    let position = Point3::new(0.4, cfg.experiment.ground_y, 7.0);
    let sample = render_patch(&cam, position, &g, &noise, 0.15, 7).unwrap();

    for width in [4, 8] {
        let net =
            RegressorNet::new(&NetConfig { base_width: width, ..NetConfig::default() }, 0).unwrap();
        c.bench_function(&format!("net_forward_width{width}"), |b| {
            b.iter(|| net.forward(black_box(&sample.patch)).unwrap())
        });
    }
}

fn bench_loss(c: &mut Criterion) {
    use monocone_core::regressor::{canonical_patch_layout, keypoint_loss_and_gradient};
    let layout = canonical_patch_layout(&ConeGeometry::default(), 0.15);
    let mut pred = layout;
    for (i, v) in pred.iter_mut().enumerate() {
        *v += (i as f64) * 0.37 - 2.0;
    }
    c.bench_function("loss_and_gradient", |b| {
        b.iter(|| keypoint_loss_and_gradient(black_box(&pred), black_box(&layout), 1.0, CR_3D))
    });
}

criterion_group!(
    benches,
    bench_geometry,
    bench_solver,
    bench_renderer,
    bench_net,
    bench_loss
);
criterion_main!(benches);
