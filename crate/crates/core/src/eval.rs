//! Least-squares scale/shift alignment and the AbsRel / delta1 metrics.

use crate::error::{Error, Result};
use crate::grids::{Grid2, Mask};

/// Smallest admissible aligned disparity before inversion to depth.
pub const MIN_DISPARITY: f64 = 1e-8;
pub const DELTA1_THRESHOLD: f64 = 1.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignSpace {
    Depth,
    /// Fit against `1 / gt`, then invert the aligned disparity.
    Disparity,
}

impl std::str::FromStr for AlignSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "depth" => Ok(Self::Depth),
            "disparity" => Ok(Self::Disparity),
            other => Err(Error::InvalidRange(format!("unknown alignment space `{other}`"))),
        }
    }
}

impl std::fmt::Display for AlignSpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Depth => "depth",
            Self::Disparity => "disparity",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPrediction {
    pub s: f64,
    pub t: f64,
    /// Aligned depth, always in depth units.
    pub aligned: Grid2,
    pub space: AlignSpace,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub absrel: f64,
    pub delta1: f64,
    pub valid_pixels: usize,
    pub s: f64,
    pub t: f64,
    /// The least-squares scale came out negative.
    pub negative_scale: bool,
}

/// Closed-form `(s, t)` minimising `sum (s p + t - g)^2`.
fn fit(pred: &[f64], target: &[f64]) -> Result<(f64, f64)> {
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mg = target.iter().sum::<f64>() / n;
    let (mut spp, mut spg) = (0.0, 0.0);
    for (p, g) in pred.iter().zip(target) {
        spp += (p - mp) * (p - mp);
        spg += (p - mp) * (g - mg);
    }
    let var = spp / n;
    if !(var >= 1e-12) {
        return Err(Error::SingularFit(var));
    }
    let s = spg / spp;
    Ok((s, mg - s * mp))
}

pub fn lsq_align(pred: &Grid2, gt: &Grid2, mask: &Mask, space: AlignSpace) -> Result<AlignedPrediction> {
    pred.ensure_shape(gt.shape())?;
    mask.check_shape(gt)?;
    let p = mask.select(pred)?;
    let g = mask.select(gt)?;
    if p.is_empty() {
        return Err(Error::EmptyMask);
    }
    if let Some(v) = p.iter().chain(&g).find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(*v));
    }
    let (s, t, aligned) = match space {
        AlignSpace::Depth => {
            let (s, t) = fit(&p, &g)?;
            (s, t, pred.map(|v| s * v + t))
        }
        AlignSpace::Disparity => {
            if let Some(v) = g.iter().find(|v| **v <= 0.0) {
                return Err(Error::NonPositiveGroundTruth(*v));
            }
            let inv: Vec<f64> = g.iter().map(|v| 1.0 / v).collect();
            let (s, t) = fit(&p, &inv)?;
            (s, t, pred.map(|v| 1.0 / (s * v + t).max(MIN_DISPARITY)))
        }
    };
    Ok(AlignedPrediction {
        s,
        t,
        aligned,
        space,
    })
}

pub fn absrel(aligned: &Grid2, gt: &Grid2, mask: &Mask) -> Result<f64> {
    aligned.ensure_shape(gt.shape())?;
    let a = mask.select(aligned)?;
    let g = mask.select(gt)?;
    if g.is_empty() {
        return Err(Error::EmptyMask);
    }
    if let Some(v) = g.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::NonPositiveGroundTruth(*v));
    }
    Ok(a.iter().zip(&g).map(|(a, g)| (a - g).abs() / g).sum::<f64>() / g.len() as f64)
}

/// Fraction of valid pixels with `max(a/g, g/a) < threshold`; pixels with a
/// non-positive aligned value count as failures.
pub fn delta_accuracy(aligned: &Grid2, gt: &Grid2, mask: &Mask, threshold: f64) -> Result<f64> {
    aligned.ensure_shape(gt.shape())?;
    let a = mask.select(aligned)?;
    let g = mask.select(gt)?;
    if g.is_empty() {
        return Err(Error::EmptyMask);
    }
    if let Some(v) = g.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::NonPositiveGroundTruth(*v));
    }
    let hits = a
        .iter()
        .zip(&g)
        .filter(|(a, g)| **a > 0.0 && (**a / **g).max(**g / **a) < threshold)
        .count();
    Ok(hits as f64 / g.len() as f64)
}

pub fn delta1(aligned: &Grid2, gt: &Grid2, mask: &Mask) -> Result<f64> {
    delta_accuracy(aligned, gt, mask, DELTA1_THRESHOLD)
}

pub fn evaluate(pred: &Grid2, gt: &Grid2, mask: &Mask, space: AlignSpace) -> Result<MetricReport> {
    let al = lsq_align(pred, gt, mask, space)?;
    Ok(MetricReport {
        absrel: absrel(&al.aligned, gt, mask)?,
        delta1: delta1(&al.aligned, gt, mask)?,
        valid_pixels: mask.count(),
        s: al.s,
        t: al.t,
        negative_scale: al.s < 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mrnoise::gaussian_noise;
    use proptest::prelude::*;

    fn g(vals: &[f64]) -> Grid2 {
        Grid2::new(1, vals.len(), vals.to_vec()).unwrap()
    }

    fn positive(h: usize, w: usize, seed: u64) -> Grid2 {
        gaussian_noise(h, w, seed).map(|v| 3.0 + v.abs() * 2.0)
    }

    #[test]
    fn self_alignment_is_identity() {
        let gt = positive(4, 5, 0);
        let m = Mask::all_valid(4, 5);
        let al = lsq_align(&gt, &gt, &m, AlignSpace::Depth).unwrap();
        assert!((al.s - 1.0).abs() < 1e-12 && al.t.abs() < 1e-12);
        for (a, b) in al.aligned.values().iter().zip(gt.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_affine_model_recovered() {
        let gt = positive(4, 5, 1);
        let m = Mask::all_valid(4, 5);
        let pred = gt.map(|v| 2.0 * v + 3.0);
        let al = lsq_align(&pred, &gt, &m, AlignSpace::Depth).unwrap();
        assert!((al.s - 0.5).abs() < 1e-12);
        assert!((al.t + 1.5).abs() < 1e-12);
        for (a, b) in al.aligned.values().iter().zip(gt.values()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    fn sse(p: &[f64], gt: &[f64], s: f64, t: f64) -> f64 {
        p.iter().zip(gt).map(|(p, g)| (s * p + t - g).powi(2)).sum()
    }

    /// Coordinate-wise golden-section refinement around a coarse grid optimum.
    fn grid_oracle(p: &[f64], gt: &[f64]) -> (f64, f64) {
        let (mut bs, mut bt, mut best) = (0.0, 0.0, f64::INFINITY);
        for i in 0..=400 {
            for j in 0..=400 {
                let s = -4.0 + 8.0 * i as f64 / 400.0;
                let t = -8.0 + 16.0 * j as f64 / 400.0;
                let v = sse(p, gt, s, t);
                if v < best {
                    (bs, bt, best) = (s, t, v);
                }
            }
        }
        let golden = |f: &dyn Fn(f64) -> f64, mut lo: f64, mut hi: f64| {
            let r = (5f64.sqrt() - 1.0) / 2.0;
            for _ in 0..200 {
                let (a, b) = (hi - r * (hi - lo), lo + r * (hi - lo));
                if f(a) < f(b) {
                    hi = b;
                } else {
                    lo = a;
                }
            }
            (lo + hi) / 2.0
        };
        for _ in 0..200 {
            bs = golden(&|s| sse(p, gt, s, bt), bs - 0.05, bs + 0.05);
            bt = golden(&|t| sse(p, gt, bs, t), bt - 0.05, bt + 0.05);
        }
        (bs, bt)
    }

    #[test]
    fn matches_grid_search_oracle() {
        let gt = positive(4, 4, 7);
        let pred = gaussian_noise(4, 4, 8).zip_map(&gt, |n, g| 0.7 * g - 1.0 + 0.3 * n).unwrap();
        let m = Mask::all_valid(4, 4);
        let al = lsq_align(&pred, &gt, &m, AlignSpace::Depth).unwrap();
        let (s, t) = grid_oracle(pred.values(), gt.values());
        assert!((al.s - s).abs() < 1e-6, "{} {s}", al.s);
        assert!((al.t - t).abs() < 1e-6, "{} {t}", al.t);
        let probed = sse(pred.values(), gt.values(), s, t);
        assert!(sse(pred.values(), gt.values(), al.s, al.t) <= probed * (1.0 + 1e-12));
    }

    #[test]
    fn absrel_examples() {
        let m = Mask::all_valid(1, 3);
        let gt = g(&[1.0, 2.0, 4.0]);
        assert_eq!(absrel(&gt, &gt, &m).unwrap(), 0.0);
        assert!((absrel(&gt.map(|v| 1.1 * v), &gt, &m).unwrap() - 0.1).abs() < 1e-15);
        assert!((absrel(&g(&[1.5, 2.0, 3.0]), &gt, &m).unwrap() - 0.25).abs() < 1e-15);
        assert!(matches!(
            absrel(&gt, &g(&[1.0, 0.0, 2.0]), &m),
            Err(Error::NonPositiveGroundTruth(_))
        ));
    }

    #[test]
    fn delta1_examples() {
        let m = Mask::all_valid(1, 4);
        let gt = g(&[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(delta1(&gt, &gt, &m).unwrap(), 1.0);
        assert_eq!(delta1(&gt.map(|v| v * 1.25), &gt, &m).unwrap(), 0.0);
        assert_eq!(delta1(&g(&[1.2, 0.81, 1.3, -1.0]), &gt, &m).unwrap(), 0.5);
    }

    #[test]
    fn evaluate_affine_prediction_and_constant() {
        let gt = positive(6, 6, 3);
        let m = Mask::all_valid(6, 6);
        let r = evaluate(&gt.map(|v| 0.2 * v - 7.0), &gt, &m, AlignSpace::Depth).unwrap();
        assert!(r.absrel < 1e-12);
        assert_eq!(r.delta1, 1.0);
        assert!(!r.negative_scale);
        assert!(matches!(
            evaluate(&Grid2::filled(6, 6, 2.0), &gt, &m, AlignSpace::Depth),
            Err(Error::SingularFit(_))
        ));
        let flipped = evaluate(&gt.map(|v| -v), &gt, &m, AlignSpace::Depth).unwrap();
        assert!(flipped.negative_scale);
    }

    #[test]
    fn disparity_branch() {
        let gt = positive(5, 5, 4);
        let m = Mask::all_valid(5, 5);
        let disp = gt.map(|v| 3.0 / v + 0.5);
        let r = evaluate(&disp, &gt, &m, AlignSpace::Disparity).unwrap();
        assert!(r.absrel < 1e-10);
        assert_eq!(r.delta1, 1.0);
        // a fitted disparity that crosses zero is clamped, never inverted to a negative
        let al = lsq_align(&g(&[0.0, 1.0]), &g(&[1e9, 1.0]), &Mask::all_valid(1, 2), AlignSpace::Disparity)
            .unwrap();
        assert!(al.aligned.values().iter().all(|v| *v > 0.0));
    }

    /// Straight-line re-implementation of the protocol.
    fn clean_room(pred: &Grid2, gt: &Grid2) -> (f64, f64) {
        let p = pred.values();
        let d = gt.values();
        let n = p.len() as f64;
        let (sx, sy) = (p.iter().sum::<f64>(), d.iter().sum::<f64>());
        let sxx: f64 = p.iter().map(|v| v * v).sum();
        let sxy: f64 = p.iter().zip(d).map(|(a, b)| a * b).sum();
        let det = n * sxx - sx * sx;
        let s = (n * sxy - sx * sy) / det;
        let t = (sxx * sy - sx * sxy) / det;
        let mut rel = 0.0;
        let mut ok = 0.0;
        for (pv, dv) in p.iter().zip(d) {
            let a = s * pv + t;
            rel += (a - dv).abs() / dv;
            if a > 0.0 && f64::max(a / dv, dv / a) < 1.25 {
                ok += 1.0;
            }
        }
        (rel / n, ok / n)
    }

    #[test]
    fn matches_clean_room_implementation() {
        for seed in 0..10 {
            let gt = positive(8, 8, seed);
            let pred = gaussian_noise(8, 8, seed + 100).zip_map(&gt, |n, g| g + 0.8 * n).unwrap();
            let r = evaluate(&pred, &gt, &Mask::all_valid(8, 8), AlignSpace::Depth).unwrap();
            let (a, d) = clean_room(&pred, &gt);
            assert!((r.absrel - a).abs() < 1e-12);
            assert!((r.delta1 - d).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn metrics_invariant_under_positive_affine(seed in 0u64..1000, alpha in 0.01f64..100.0,
                                                    beta in -50.0f64..50.0) {
            let gt = positive(6, 7, seed);
            let pred = gaussian_noise(6, 7, seed + 1).zip_map(&gt, |n, g| g + n).unwrap();
            let m = Mask::all_valid(6, 7);
            let a = evaluate(&pred, &gt, &m, AlignSpace::Depth).unwrap();
            let b = evaluate(&pred.map(|v| alpha * v + beta), &gt, &m, AlignSpace::Depth).unwrap();
            prop_assert!((a.absrel - b.absrel).abs() < 1e-10);
            prop_assert!((a.delta1 - b.delta1).abs() < 1e-10);
        }

        #[test]
        fn delta_monotone_in_threshold(seed in 0u64..1000, th1 in 1.0f64..1.25, th2 in 1.0f64..1.25) {
            let gt = positive(6, 6, seed);
            let a = gaussian_noise(6, 6, seed + 3).zip_map(&gt, |n, g| g * (1.0 + 0.15 * n)).unwrap();
            let m = Mask::all_valid(6, 6);
            let (lo, hi) = if th1 <= th2 { (th1, th2) } else { (th2, th1) };
            prop_assert!(delta_accuracy(&a, &gt, &m, lo).unwrap() <= delta_accuracy(&a, &gt, &m, hi).unwrap());
            prop_assert!(delta_accuracy(&a, &gt, &m, hi).unwrap() <= delta1(&a, &gt, &m).unwrap());
        }

        #[test]
        fn masked_pixels_never_matter(seed in 0u64..1000, junk in -1e6f64..1e6) {
            let gt = positive(5, 5, seed);
            let pred = gaussian_noise(5, 5, seed + 9).zip_map(&gt, |n, g| g + n).unwrap();
            let mut m = Mask::all_valid(5, 5);
            m.set(2, 3, false);
            m.set(0, 0, false);
            let mut pred2 = pred.clone();
            let mut gt2 = gt.clone();
            pred2.set(2, 3, junk);
            gt2.set(0, 0, -junk.abs());
            gt2.set(2, 3, f64::NAN);
            for space in [AlignSpace::Depth, AlignSpace::Disparity] {
                let a = evaluate(&pred, &gt, &m, space).unwrap();
                let b = evaluate(&pred2, &gt2, &m, space).unwrap();
                prop_assert_eq!(a.absrel.to_bits(), b.absrel.to_bits());
                prop_assert_eq!(a.delta1.to_bits(), b.delta1.to_bits());
            }
        }
    }
}
