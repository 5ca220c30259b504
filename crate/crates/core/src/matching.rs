//! Nearest-neighbour distance ratio matching and RANSAC affine estimation.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{AffineTransform, FrameFeatures};

pub const DEFAULT_NNDR: f64 = 0.8;

/// Correspondence between a previous-frame and a current-frame feature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchPair {
    pub idx_prev: usize,
    pub idx_curr: usize,
    pub dist_ratio: f64,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Ratio-test matching over raw descriptor lists. For every `curr` descriptor
/// the nearest and second-nearest `prev` descriptors are found; the pair is
/// kept when their distance ratio is below `t`. Ties go to the lower index.
pub fn match_descriptors<P, C>(prev: &[P], curr: &[C], t: f64) -> Vec<MatchPair>
where
    P: AsRef<[f32]>,
    C: AsRef<[f32]>,
{
    if prev.len() < 2 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for (j, q) in curr.iter().enumerate() {
        let q = q.as_ref();
        let (mut best, mut best_d, mut second_d) = (usize::MAX, f64::INFINITY, f64::INFINITY);
        for (i, p) in prev.iter().enumerate() {
            let d = sq_dist(p.as_ref(), q);
            if d < best_d {
                second_d = best_d;
                best_d = d;
                best = i;
            } else if d < second_d {
                second_d = d;
            }
        }
        if second_d == 0.0 {
            // ambiguous: two exact duplicates
            continue;
        }
        let ratio = (best_d / second_d).sqrt();
        if ratio < t {
            out.push(MatchPair {
                idx_prev: best,
                idx_curr: j,
                dist_ratio: ratio,
            });
        }
    }
    out
}

fn descriptors(frame: &FrameFeatures) -> Result<Vec<&[f32]>> {
    frame
        .features
        .iter()
        .map(|f| f.descriptor.as_deref().ok_or(Error::MissingDescriptors))
        .collect()
}

pub fn nndr_match(prev: &FrameFeatures, curr: &FrameFeatures, t: f64) -> Result<Vec<MatchPair>> {
    let p = descriptors(prev)?;
    let c = descriptors(curr)?;
    if let (Some(a), Some(b)) = (p.first(), c.first()) {
        if p.iter().any(|d| d.len() != a.len()) || c.iter().any(|d| d.len() != b.len()) || a.len() != b.len() {
            return Err(Error::MissingDescriptors);
        }
    }
    Ok(match_descriptors(&p, &c, t))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    /// Inlier reprojection threshold in pixels.
    pub r_tol: f64,
    pub max_iterations: usize,
    /// Early-exit confidence.
    pub confidence: f64,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            r_tol: 3.0,
            max_iterations: 1000,
            confidence: 0.99,
            min_inliers: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineFit {
    pub transform: AffineTransform,
    pub inliers: Vec<MatchPair>,
    pub num_iterations: usize,
}

type Point = (f64, f64);

/// Exact affine through three correspondences, `None` when (nearly) collinear.
pub fn affine_from_three(src: [Point; 3], dst: [Point; 3]) -> Option<AffineTransform> {
    let m = Matrix3::new(
        src[0].0, src[0].1, 1.0, //
        src[1].0, src[1].1, 1.0, //
        src[2].0, src[2].1, 1.0,
    );
    if m.determinant().abs() < 1e-6 {
        return None;
    }
    let lu = m.lu();
    let row0 = lu.solve(&Vector3::new(dst[0].0, dst[1].0, dst[2].0))?;
    let row1 = lu.solve(&Vector3::new(dst[0].1, dst[1].1, dst[2].1))?;
    Some(AffineTransform::new(
        row0[0], row0[1], row1[0], row1[1], row0[2], row1[2],
    ))
}

/// Least-squares affine over all correspondences.
pub fn affine_least_squares(src: &[Point], dst: &[Point]) -> Option<AffineTransform> {
    let n = src.len();
    if n < 3 {
        return None;
    }
    // centre for conditioning
    let (mx, my) = src.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0, b + p.1));
    let (mx, my) = (mx / n as f64, my / n as f64);
    let a = DMatrix::from_fn(n, 3, |i, j| match j {
        0 => src[i].0 - mx,
        1 => src[i].1 - my,
        _ => 1.0,
    });
    let bx = DVector::from_fn(n, |i, _| dst[i].0);
    let by = DVector::from_fn(n, |i, _| dst[i].1);
    let svd = a.svd(true, true);
    if svd.singular_values.iter().any(|&s| s < 1e-9) {
        return None;
    }
    let px = svd.solve(&bx, 1e-12).ok()?;
    let py = svd.solve(&by, 1e-12).ok()?;
    let (ta, tb, tc, td) = (px[0], px[1], py[0], py[1]);
    Some(AffineTransform::new(
        ta,
        tb,
        tc,
        td,
        px[2] - ta * mx - tb * my,
        py[2] - tc * mx - td * my,
    ))
}

pub fn reprojection_error(t: &AffineTransform, src: Point, dst: Point) -> f64 {
    let (x, y) = t.apply(src.0, src.1);
    (x - dst.0).hypot(y - dst.1)
}

/// Outcome of RANSAC on raw point lists.
#[derive(Debug, Clone, PartialEq)]
pub struct PointFit {
    pub transform: AffineTransform,
    /// Best minimal-sample model, before the least-squares refit.
    pub minimal: AffineTransform,
    pub inliers: Vec<usize>,
    pub num_iterations: usize,
}

pub fn ransac_points(src: &[Point], dst: &[Point], cfg: &RansacConfig) -> Result<PointFit> {
    let n = src.len();
    if n < 3 {
        return Err(Error::FitFailure("fewer than three correspondences"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(AffineTransform, Vec<usize>)> = None;
    let mut limit = cfg.max_iterations;
    let mut iterations = 0;
    while iterations < limit {
        iterations += 1;
        let s = index::sample(&mut rng, n, 3);
        let (i, j, k) = (s.index(0), s.index(1), s.index(2));
        let Some(model) = affine_from_three([src[i], src[j], src[k]], [dst[i], dst[j], dst[k]]) else {
            continue;
        };
        let inliers: Vec<usize> = (0..n)
            .filter(|&m| reprojection_error(&model, src[m], dst[m]) <= cfg.r_tol)
            .collect();
        if best.as_ref().is_none_or(|(_, b)| inliers.len() > b.len()) {
            let w = inliers.len() as f64 / n as f64;
            best = Some((model, inliers));
            let needed = if w >= 1.0 {
                1.0
            } else {
                (1.0 - cfg.confidence).ln() / (1.0 - w.powi(3)).ln()
            };
            if needed.is_finite() {
                limit = limit.min((needed.ceil() as usize).max(1));
            }
        }
    }
    let Some((minimal, inliers)) = best else {
        return Err(Error::FitFailure("all samples collinear"));
    };
    if inliers.len() < cfg.min_inliers {
        return Err(Error::FitFailure("too few inliers"));
    }
    let s: Vec<Point> = inliers.iter().map(|&m| src[m]).collect();
    let d: Vec<Point> = inliers.iter().map(|&m| dst[m]).collect();
    let transform = affine_least_squares(&s, &d).unwrap_or(minimal);
    Ok(PointFit {
        transform,
        minimal,
        inliers,
        num_iterations: iterations,
    })
}

/// Affine transform mapping previous-frame locations onto current-frame ones.
pub fn ransac_affine(
    matches: &[MatchPair],
    prev: &FrameFeatures,
    curr: &FrameFeatures,
    cfg: &RansacConfig,
) -> Result<AffineFit> {
    let src: Vec<Point> = matches
        .iter()
        .map(|m| {
            let k = &prev.features[m.idx_prev].keypoint;
            (k.x, k.y)
        })
        .collect();
    let dst: Vec<Point> = matches
        .iter()
        .map(|m| {
            let k = &curr.features[m.idx_curr].keypoint;
            (k.x, k.y)
        })
        .collect();
    let fit = ransac_points(&src, &dst, cfg)?;
    Ok(AffineFit {
        transform: fit.transform,
        inliers: fit.inliers.iter().map(|&i| matches[i]).collect(),
        num_iterations: fit.num_iterations,
    })
}
