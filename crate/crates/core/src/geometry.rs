//! Pinhole unprojection and per-pixel normals from 3x3 least-squares plane
//! fits.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grids::{Grid2, Latent3, Mask};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidRange(format!(
                "focal lengths must be positive, got {fx}, {fy}"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Centred principal point with equal focal lengths of `focal_scale * width`.
    pub fn centered(height: usize, width: usize, focal_scale: f64) -> Self {
        let f = focal_scale * width as f64;
        Self {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
        }
    }

    /// Camera-space point at z-depth `z` behind pixel `(u, v)`.
    #[inline]
    pub fn unproject_pixel(&self, u: f64, v: f64, z: f64) -> [f64; 3] {
        [(u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z]
    }

    #[inline]
    pub fn project(&self, p: [f64; 3]) -> (f64, f64) {
        (p[0] * self.fx / p[2] + self.cx, p[1] * self.fy / p[2] + self.cy)
    }
}

/// Per-pixel camera-space points; invalid pixels hold zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub height: usize,
    pub width: usize,
    pub points: Vec<[f64; 3]>,
    pub mask: Mask,
}

impl PointCloud {
    pub fn point(&self, y: usize, x: usize) -> [f64; 3] {
        self.points[y * self.width + x]
    }
}

pub fn unproject(depth: &Grid2, mask: &Mask, k: &Intrinsics) -> Result<PointCloud> {
    mask.check_shape(depth)?;
    let (h, w) = depth.shape();
    let mut points = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            if !mask.is_valid(y, x) {
                points.push([0.0; 3]);
                continue;
            }
            let z = depth.get(y, x);
            if !(z > 0.0) {
                return Err(Error::NonPositiveDepth(z));
            }
            points.push(k.unproject_pixel(x as f64, y as f64, z));
        }
    }
    Ok(PointCloud {
        height: h,
        width: w,
        points,
        mask: mask.clone(),
    })
}

/// Unit normals as three channels (x, y, z) with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    pub normals: Latent3,
    pub mask: Mask,
}

impl NormalMap {
    pub fn normal(&self, y: usize, x: usize) -> [f64; 3] {
        let [a, b, c] = self.normals.channels();
        [a.get(y, x), b.get(y, x), c.get(y, x)]
    }
}

/// Normal of the least-squares plane through each valid pixel's 3x3
/// neighbourhood, oriented towards the camera. Pixels whose window has
/// fewer than three non-collinear valid points are marked invalid.
pub fn normals_from_depth(depth: &Grid2, mask: &Mask, k: &Intrinsics) -> Result<NormalMap> {
    let cloud = unproject(depth, mask, k)?;
    let (h, w) = depth.shape();
    let mut nx = Grid2::zeros(h, w);
    let mut ny = Grid2::zeros(h, w);
    let mut nz = Grid2::zeros(h, w);
    let mut out_mask = Mask::new(h, w, vec![false; h * w])?;
    let mut window = Vec::with_capacity(9);
    for y in 0..h {
        for x in 0..w {
            if !mask.is_valid(y, x) {
                continue;
            }
            window.clear();
            for wy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for wx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    if mask.is_valid(wy, wx) {
                        window.push(cloud.point(wy, wx));
                    }
                }
            }
            if let Some(n) = fit_plane_normal(&window) {
                nx.set(y, x, n[0]);
                ny.set(y, x, n[1]);
                nz.set(y, x, n[2]);
                out_mask.set(y, x, true);
            }
        }
    }
    Ok(NormalMap {
        normals: Latent3::new(nx, ny, nz)?,
        mask: out_mask,
    })
}

/// Unit normal of the total-least-squares plane through `points`, with
/// `n . centroid < 0`. `None` for fewer than three points or a (near)
/// collinear set.
pub fn fit_plane_normal(points: &[[f64; 3]]) -> Option<[f64; 3]> {
    if points.len() < 3 {
        return None;
    }
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points {
        for i in 0..3 {
            c[i] += p[i] / n;
        }
    }
    let mut cov = [[0.0; 3]; 3];
    for p in points {
        let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += d[i] * d[j];
            }
        }
    }
    let [l_max, l_mid, l_min] = symmetric_eigenvalues(&cov);
    if !(l_mid > 1e-12 * l_max.max(f64::MIN_POSITIVE)) {
        return None;
    }
    let mut normal = eigenvector(&cov, l_min)?;
    if dot(normal, c) > 0.0 {
        normal = [-normal[0], -normal[1], -normal[2]];
    }
    Some(normal)
}

/// Eigenvalues of a symmetric 3x3 matrix in descending order
/// (trigonometric closed form).
pub fn symmetric_eigenvalues(a: &[[f64; 3]; 3]) -> [f64; 3] {
    let p1 = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
    let q = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
    let p2 = (a[0][0] - q).powi(2) + (a[1][1] - q).powi(2) + (a[2][2] - q).powi(2) + 2.0 * p1;
    if p2 == 0.0 {
        return [q, q, q];
    }
    if p1 == 0.0 {
        let mut d = [a[0][0], a[1][1], a[2][2]];
        d.sort_by(|x, y| y.total_cmp(x));
        return d;
    }
    let p = (p2 / 6.0).sqrt();
    let mut b = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            b[i][j] = (a[i][j] - if i == j { q } else { 0.0 }) / p;
        }
    }
    let det = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1])
        - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
        + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
    let r = (det / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let e1 = q + 2.0 * p * phi.cos();
    let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    [e1, 3.0 * q - e1 - e3, e3]
}

/// Unit eigenvector for a simple eigenvalue `lambda`: the longest cross
/// product between rows of `A - lambda I`.
fn eigenvector(a: &[[f64; 3]; 3], lambda: f64) -> Option<[f64; 3]> {
    let rows = [
        [a[0][0] - lambda, a[0][1], a[0][2]],
        [a[1][0], a[1][1] - lambda, a[1][2]],
        [a[2][0], a[2][1], a[2][2] - lambda],
    ];
    let candidates = [
        cross(rows[0], rows[1]),
        cross(rows[0], rows[2]),
        cross(rows[1], rows[2]),
    ];
    let best = candidates
        .into_iter()
        .max_by(|u, v| dot(*u, *u).total_cmp(&dot(*v, *v)))?;
    let len = dot(best, best).sqrt();
    (len > 0.0).then(|| [best[0] / len, best[1] / len, best[2] / len])
}

#[inline]
fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// ASCII PLY with one vertex per valid pixel.
pub fn write_ply(cloud: &PointCloud, path: &Path) -> Result<()> {
    let valid: Vec<_> = cloud
        .points
        .iter()
        .zip(cloud.mask.valid())
        .filter_map(|(p, ok)| ok.then_some(*p))
        .collect();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "ply\nformat ascii 1.0")?;
    writeln!(out, "element vertex {}", valid.len())?;
    writeln!(out, "property float x\nproperty float y\nproperty float z\nend_header")?;
    for p in valid {
        writeln!(out, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32)?;
    }
    out.flush()?;
    Ok(())
}

/// 8-bit RGB PNG with `[-1, 1]` mapped to `[0, 255]`; invalid pixels black.
pub fn write_normal_png(normals: &NormalMap, path: &Path) -> Result<()> {
    let (h, w) = normals.normals.shape();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = if normals.mask.is_valid(y, x) {
                let n = normals.normal(y, x);
                let to_u8 = |v: f64| (((v + 1.0) * 0.5).clamp(0.0, 1.0) * 255.0).round() as u8;
                [to_u8(n[0]), to_u8(n[1]), to_u8(n[2])]
            } else {
                [0, 0, 0]
            };
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::MalformedFile(e.to_string()))
}
