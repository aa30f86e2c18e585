//! Analytic ray-cast scenes of planes and axis-aligned boxes.
//!
//! Camera at the origin looking down +z with y pointing down. Ray
//! directions are scaled so their z component is 1, which makes the ray
//! parameter at a hit equal to the z-depth.

use rand::Rng;

use super::{Domain, Sample};
use crate::error::{Error, Result};
use crate::geometry::Intrinsics;
use crate::grids::{Grid2, Mask, RgbImage};
use crate::rng::stream;

/// Focal length as a fraction of image width.
pub const FOCAL_SCALE: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub domain: Domain,
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub seed: u64,
    /// Depth clamp in meters.
    pub far_plane: f64,
}

impl SceneSpec {
    pub fn indoor(height: usize, width: usize, seed: u64) -> Self {
        Self {
            domain: Domain::Indoor,
            height,
            width,
            min_objects: 2,
            max_objects: 5,
            seed,
            far_plane: 20.0,
        }
    }

    pub fn outdoor(height: usize, width: usize, seed: u64) -> Self {
        Self {
            domain: Domain::Outdoor,
            height,
            width,
            min_objects: 3,
            max_objects: 8,
            seed,
            far_plane: 80.0,
        }
    }

    pub fn for_domain(domain: Domain, height: usize, width: usize, seed: u64) -> Self {
        match domain {
            Domain::Indoor => Self::indoor(height, width, seed),
            Domain::Outdoor => Self::outdoor(height, width, seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::InvalidRange(format!(
                "scene resolution {}x{} below 16x16",
                self.height, self.width
            )));
        }
        if !(self.far_plane > 0.0) {
            return Err(Error::InvalidRange("far plane must be positive".into()));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::InvalidRange("min_objects > max_objects".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Points `p` with `normal . p = offset`; `normal` faces the camera.
    Plane { normal: [f64; 3], offset: f64 },
    /// Axis-aligned box.
    Cuboid { min: [f64; 3], max: [f64; 3] },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub albedo: [f64; 3],
}

#[derive(Debug, Clone, Copy)]
pub struct Hit {
    pub depth: f64,
    pub normal: [f64; 3],
    pub albedo: [f64; 3],
}

/// A fully specified scene: geometry, camera, lighting and atmosphere.
#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: SceneSpec,
    pub intrinsics: Intrinsics,
    pub primitives: Vec<Primitive>,
    /// Unit vector pointing towards the light.
    pub light: [f64; 3],
    /// Distance over which surface colour fades into `fog_color`.
    pub fog_length: f64,
    pub fog_color: [f64; 3],
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn random_albedo(rng: &mut impl Rng, lo: f64, hi: f64) -> [f64; 3] {
    [uniform(rng, lo, hi), uniform(rng, lo, hi), uniform(rng, lo, hi)]
}

impl Scene {
    pub fn build(spec: SceneSpec) -> Result<Scene> {
        spec.validate()?;
        let mut rng = stream(spec.seed, "scene", 0);
        let intrinsics = Intrinsics::centered(spec.height, spec.width, FOCAL_SCALE);
        let count = if spec.max_objects == 0 {
            0
        } else {
            rng.random_range(spec.min_objects..=spec.max_objects)
        };
        let mut primitives = Vec::new();
        let scene = match spec.domain {
            Domain::Indoor => {
                let cam_height = uniform(&mut rng, 1.2, 1.8);
                let back = uniform(&mut rng, 6.0, 10.0);
                let side = uniform(&mut rng, 1.5, 3.5);
                primitives.push(Primitive {
                    shape: Shape::Plane {
                        normal: [0.0, -1.0, 0.0],
                        offset: -cam_height,
                    },
                    albedo: random_albedo(&mut rng, 0.4, 0.8),
                });
                primitives.push(Primitive {
                    shape: Shape::Plane {
                        normal: [0.0, 0.0, -1.0],
                        offset: -back,
                    },
                    albedo: random_albedo(&mut rng, 0.5, 0.9),
                });
                primitives.push(Primitive {
                    shape: Shape::Plane {
                        normal: [1.0, 0.0, 0.0],
                        offset: -side,
                    },
                    albedo: random_albedo(&mut rng, 0.5, 0.9),
                });
                for _ in 0..count {
                    let (w, h, d) = (
                        uniform(&mut rng, 0.4, 1.5),
                        uniform(&mut rng, 0.4, 1.8),
                        uniform(&mut rng, 0.4, 1.5),
                    );
                    let x = uniform(&mut rng, -side + w / 2.0, 2.0);
                    let z = uniform(&mut rng, 2.0, back - d / 2.0 - 0.1);
                    primitives.push(Primitive {
                        shape: Shape::Cuboid {
                            min: [x - w / 2.0, cam_height - h, z - d / 2.0],
                            max: [x + w / 2.0, cam_height, z + d / 2.0],
                        },
                        albedo: random_albedo(&mut rng, 0.2, 0.9),
                    });
                }
                Scene {
                    spec,
                    intrinsics,
                    primitives,
                    light: normalize([-0.3, -0.8, -0.5]),
                    fog_length: 6.0,
                    fog_color: [0.05, 0.05, 0.06],
                }
            }
            Domain::Outdoor => {
                let cam_height = uniform(&mut rng, 1.4, 1.8);
                primitives.push(Primitive {
                    shape: Shape::Plane {
                        normal: [0.0, -1.0, 0.0],
                        offset: -cam_height,
                    },
                    albedo: random_albedo(&mut rng, 0.25, 0.45),
                });
                for _ in 0..count {
                    let (w, h, d) = (
                        uniform(&mut rng, 1.5, 5.0),
                        uniform(&mut rng, 1.5, 10.0),
                        uniform(&mut rng, 1.5, 5.0),
                    );
                    let x = uniform(&mut rng, -15.0, 15.0);
                    let z = uniform(&mut rng, 6.0, 70.0);
                    primitives.push(Primitive {
                        shape: Shape::Cuboid {
                            min: [x - w / 2.0, cam_height - h, z - d / 2.0],
                            max: [x + w / 2.0, cam_height, z + d / 2.0],
                        },
                        albedo: random_albedo(&mut rng, 0.2, 0.9),
                    });
                }
                Scene {
                    spec,
                    intrinsics,
                    primitives,
                    light: normalize([0.4, -0.8, -0.3]),
                    fog_length: 60.0,
                    fog_color: [0.7, 0.76, 0.85],
                }
            }
        };
        Ok(scene)
    }

    /// Ray through pixel `(u, v)`, scaled to unit z.
    pub fn ray(&self, u: f64, v: f64) -> [f64; 3] {
        let k = &self.intrinsics;
        [(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0]
    }

    /// Nearest surface hit along `dir` (z component 1), if any.
    pub fn intersect(&self, dir: [f64; 3]) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for prim in &self.primitives {
            let hit = match prim.shape {
                Shape::Plane { normal, offset } => {
                    let denom = dot(normal, dir);
                    if denom.abs() < 1e-12 {
                        None
                    } else {
                        let s = offset / denom;
                        (s > 0.0).then_some((s, normal))
                    }
                }
                Shape::Cuboid { min, max } => ray_box(dir, min, max),
            };
            if let Some((depth, normal)) = hit {
                if best.is_none_or(|b| depth < b.depth) {
                    best = Some(Hit {
                        depth,
                        normal,
                        albedo: prim.albedo,
                    });
                }
            }
        }
        best
    }

    fn shade(&self, hit: Option<&Hit>) -> [f64; 3] {
        let Some(hit) = hit else {
            return self.fog_color;
        };
        let lambert = dot(hit.normal, self.light).max(0.0);
        let light = 0.3 + 0.7 * lambert;
        let transmit = (-hit.depth / self.fog_length).exp();
        let mut c = [0.0; 3];
        for i in 0..3 {
            c[i] = (hit.albedo[i] * light * transmit + self.fog_color[i] * (1.0 - transmit))
                .clamp(0.0, 1.0);
        }
        c
    }

    pub fn render(&self) -> Result<Sample> {
        let (h, w) = (self.spec.height, self.spec.width);
        let far = self.spec.far_plane;
        let mut depth = Vec::with_capacity(h * w);
        let mut rgb = [
            Vec::with_capacity(h * w),
            Vec::with_capacity(h * w),
            Vec::with_capacity(h * w),
        ];
        for y in 0..h {
            for x in 0..w {
                let hit = self.intersect(self.ray(x as f64, y as f64));
                depth.push(hit.map_or(far, |h| h.depth.min(far)));
                let c = self.shade(hit.as_ref());
                for i in 0..3 {
                    rgb[i].push(c[i]);
                }
            }
        }
        let [r, g, b] = rgb;
        Ok(Sample {
            image: RgbImage::new(Grid2::new(h, w, r)?, Grid2::new(h, w, g)?, Grid2::new(h, w, b)?)?,
            depth: Grid2::new(h, w, depth)?,
            mask: Mask::all_valid(h, w),
            domain: self.spec.domain,
            intrinsics: self.intrinsics,
        })
    }
}

/// Slab test; returns entry distance and the outward face normal.
fn ray_box(dir: [f64; 3], min: [f64; 3], max: [f64; 3]) -> Option<(f64, [f64; 3])> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut axis = 0;
    let mut sign = 1.0;
    for i in 0..3 {
        if dir[i].abs() < 1e-15 {
            if 0.0 < min[i] || 0.0 > max[i] {
                return None;
            }
            continue;
        }
        let (t0, t1) = ((min[i]) / dir[i], (max[i]) / dir[i]);
        let (lo, hi) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
        if lo > t_near {
            t_near = lo;
            axis = i;
            sign = if dir[i] > 0.0 { -1.0 } else { 1.0 };
        }
        t_far = t_far.min(hi);
    }
    if t_near > t_far || t_near <= 0.0 {
        return None;
    }
    let mut normal = [0.0; 3];
    normal[axis] = sign;
    Some((t_near, normal))
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let l = dot(v, v).sqrt();
    [v[0] / l, v[1] / l, v[2] / l]
}

pub fn render_scene(spec: SceneSpec) -> Result<Sample> {
    Scene::build(spec)?.render()
}
