use depthdiff_core::data::{Scene, SceneSpec, Shape};
use depthdiff_core::denoiser::GaussianDenoiser;
use depthdiff_core::depthnorm::IdentityCodec;
use depthdiff_core::experiments::default_schedule;
use depthdiff_core::pipeline::infer_from;
use depthdiff_core::rng::derive_seed;
use depthdiff_core::schedule::respace;
use depthdiff_core::{Grid2, RgbImage};

/// With i.i.d. Gaussian data the posterior-mean denoiser makes each DDIM
/// step affine, so the sampler maps `z` to `m z + c` pixelwise. Frozen from
/// an independent closed-form propagation of `(m, c)` through the
/// scaled-linear schedule with 50 uniformly respaced steps.
const DDIM50_SHIFT: f64 = 0.296_483_794_452_333_64;
const DDIM50_GAIN: f64 = 0.171_694_131_506_577_56;

#[test]
fn gaussian_ddim_is_the_closed_form_affine_map() {
    let sched = default_schedule();
    let plan = respace(sched.steps(), 50).unwrap();
    let model = GaussianDenoiser { mu: 0.3, sigma: 0.2 };
    let image = RgbImage::new(Grid2::zeros(2, 2), Grid2::zeros(2, 2), Grid2::zeros(2, 2)).unwrap();
    let at = |z: f64| {
        infer_from(&image, &model, &sched, &plan, Grid2::filled(2, 2, z), &IdentityCodec).unwrap()
    };
    let (zero, one, neg) = (at(0.0), at(1.0), at(-2.0));
    for p in 0..4 {
        let c = zero.values()[p];
        assert!((c - DDIM50_SHIFT).abs() < 1e-9, "{c}");
        assert!((one.values()[p] - c - DDIM50_GAIN).abs() < 1e-9);
        assert!((neg.values()[p] - (c - 2.0 * DDIM50_GAIN)).abs() < 1e-9);
    }
}

/// Whether `p` lies inside or behind some primitive, as seen from the origin.
fn occupied(scene: &Scene, p: [f64; 3]) -> bool {
    scene.primitives.iter().any(|prim| match prim.shape {
        Shape::Plane { normal, offset } => {
            let side = normal[0] * p[0] + normal[1] * p[1] + normal[2] * p[2] - offset;
            // the camera sits at the origin, where the plane function is -offset
            side * -offset < 0.0
        }
        Shape::Cuboid { min, max } => (0..3).all(|i| min[i] <= p[i] && p[i] <= max[i]),
    })
}

/// First occupied z along the ray by fine marching and bisection.
fn marched_depth(scene: &Scene, dir: [f64; 3], far: f64) -> f64 {
    let at = |z: f64| [dir[0] * z, dir[1] * z, dir[2] * z];
    let step = 1e-3;
    let mut z = step;
    while z <= far {
        if occupied(scene, at(z)) {
            let (mut lo, mut hi) = (z - step, z);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if occupied(scene, at(mid)) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return hi.min(far);
        }
        z += step;
    }
    far
}

#[test]
fn rendered_depth_matches_marching_oracle() {
    let mut checked = 0;
    for seed in 0..4u64 {
        let spec = if seed % 2 == 0 {
            SceneSpec::indoor(32, 40, seed)
        } else {
            SceneSpec::outdoor(32, 40, seed)
        };
        let scene = Scene::build(spec).unwrap();
        let sample = scene.render().unwrap();
        for k in 0..25u64 {
            let r = derive_seed(seed, "pixel", k);
            let (y, x) = ((r % 32) as usize, ((r >> 16) % 40) as usize);
            let dir = scene.ray(x as f64, y as f64);
            let oracle = marched_depth(&scene, dir, spec.far_plane);
            let depth = sample.depth.get(y, x);
            assert!((depth - oracle).abs() < 1e-6, "seed {seed} ({y}, {x}): {depth} vs {oracle}");
            checked += 1;
        }
    }
    assert_eq!(checked, 100);
}
