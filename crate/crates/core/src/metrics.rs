//! Spatial-structure metrics over token grids, collapse diagnostics and a
//! Gaussian Fréchet distance.
//!
//! Token similarity is cosine similarity with norms floored at
//! [`COS_EPS`]. Pairs are unordered and exclude self-pairs. Distances are
//! Manhattan distances between grid coordinates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;

pub const COS_EPS: f64 = 1e-8;
const CORR_EPS: f64 = 1e-12;

/// Token features `[L, d]` laid out row-major on a `side x side` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    features: Tensor,
    side: usize,
}

impl TokenGrid {
    pub fn new(features: Tensor, side: usize) -> Result<Self> {
        let (l, _) = features.dims2()?;
        if side * side != l || l == 0 {
            return Err(Error::dim(format!("{l} tokens do not fill a {side}x{side} grid")));
        }
        Ok(TokenGrid { features, side })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.side * self.side
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coords(&self, t: usize) -> (usize, usize) {
        (t / self.side, t % self.side)
    }

    pub fn distance(&self, a: usize, b: usize) -> usize {
        let (ra, ca) = self.coords(a);
        let (rb, cb) = self.coords(b);
        ra.abs_diff(rb) + ca.abs_diff(cb)
    }

    /// Cosine similarity matrix `[L, L]`.
    pub fn similarity(&self) -> Tensor {
        let (l, d) = self.features.dims2().expect("2-D features");
        let mut unit = self.features.clone();
        for r in 0..l {
            let row = &mut unit.data_mut()[r * d..(r + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(COS_EPS);
            row.iter_mut().for_each(|v| *v /= norm);
        }
        unit.matmul(&unit.transpose2().expect("2-D")).expect("square gram")
    }

    /// Mean similarity per realized distance `delta >= 1`.
    pub fn correlogram(&self) -> Vec<(usize, f64)> {
        let k = self.similarity();
        let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        let l = self.len();
        for a in 0..l {
            for b in a + 1..l {
                let e = acc.entry(self.distance(a, b)).or_insert((0.0, 0));
                e.0 += k.at2(a, b);
                e.1 += 1;
            }
        }
        acc.into_iter().map(|(d, (s, n))| (d, s / n as f64)).collect()
    }
}

/// Mean similarity of pairs closer than `r_near` minus that of pairs at
/// least `r_far` apart.
pub fn lds(grid: &TokenGrid, r_near: usize, r_far: usize) -> Result<f64> {
    if r_near > r_far {
        return Err(Error::config("r_near", format!("r_near {r_near} exceeds r_far {r_far}")));
    }
    let k = grid.similarity();
    let l = grid.len();
    let (mut near, mut n_near, mut far, mut n_far) = (0.0, 0usize, 0.0, 0usize);
    for a in 0..l {
        for b in a + 1..l {
            let d = grid.distance(a, b);
            if d < r_near {
                near += k.at2(a, b);
                n_near += 1;
            } else if d >= r_far {
                far += k.at2(a, b);
                n_far += 1;
            }
        }
    }
    if n_near == 0 {
        return Err(Error::config("r_near", "no token pairs closer than r_near"));
    }
    if n_far == 0 {
        return Err(Error::config("r_far", "no token pairs at distance r_far or more"));
    }
    Ok(near / n_near as f64 - far / n_far as f64)
}

/// Negated least-squares slope of a correlogram.
pub fn cds_from_correlogram(points: &[(usize, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::Stats(format!(
            "correlation decay fit needs at least 2 distances, got {}",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 as f64 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 as f64 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Stats("correlation decay fit has a single distance value".into()));
    }
    Ok(-sxy / sxx)
}

pub fn cds(grid: &TokenGrid) -> Result<f64> {
    cds_from_correlogram(&grid.correlogram())
}

/// RMS deviation of unit-normalized tokens from their mean. Zero-norm
/// tokens are an error.
pub fn rmsc(grid: &TokenGrid) -> Result<f64> {
    rmsc_impl(grid, None)
}

/// [`rmsc`] with token norms floored at `eps`.
pub fn rmsc_guarded(grid: &TokenGrid, eps: f64) -> Result<f64> {
    rmsc_impl(grid, Some(eps))
}

fn rmsc_impl(grid: &TokenGrid, eps: Option<f64>) -> Result<f64> {
    let (l, d) = grid.features.dims2()?;
    let mut unit = Vec::with_capacity(l * d);
    for t in 0..l {
        let row = grid.features.row(t);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let norm = match eps {
            Some(e) => norm.max(e),
            None if norm == 0.0 => return Err(Error::ZeroNorm { index: t }),
            None => norm,
        };
        unit.extend(row.iter().map(|v| v / norm));
    }
    // shifted by the first token, so identical tokens give exactly zero
    let shifted: Vec<f64> = (0..l * d).map(|k| unit[k] - unit[k % d]).collect();
    let mut mean = vec![0.0; d];
    for t in 0..l {
        for j in 0..d {
            mean[j] += shifted[t * d + j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= l as f64);
    let ss: f64 = (0..l)
        .map(|t| (0..d).map(|j| (shifted[t * d + j] - mean[j]).powi(2)).sum::<f64>())
        .sum();
    Ok((ss / l as f64).sqrt())
}

/// `(offdiag_cov_mass, effective_rank)` of pooled token vectors.
///
/// The off-diagonal mass is `(1/d) sum_{i != j} C_ij^2` on the channel
/// correlation matrix. The effective rank is `exp(H(p))` with `p` the
/// normalized covariance eigenvalues.
pub fn collapse_diagnostics(batch: &Tensor) -> Result<(f64, f64)> {
    let rows = batch.flatten_rows()?;
    let (n, d) = rows.dims2()?;
    if n < 2 {
        return Err(Error::Stats(format!("collapse diagnostics need 2 vectors, got {n}")));
    }
    let (_, cov) = linalg::mean_covariance(&rows)?;
    let std: Vec<f64> = (0..d).map(|i| cov.at2(i, i).max(0.0).sqrt()).collect();
    let mut mass = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i != j {
                let c = cov.at2(i, j) / (std[i] * std[j] + CORR_EPS);
                mass += c * c;
            }
        }
    }
    let (eig, _) = linalg::symmetric_eigen(&cov)?;
    let eig: Vec<f64> = eig.into_iter().map(|v| v.max(0.0)).collect();
    let total: f64 = eig.iter().sum();
    let rank = if total <= 0.0 {
        1.0
    } else {
        let h: f64 = eig
            .iter()
            .filter(|&&v| v > 0.0)
            .map(|&v| {
                let p = v / total;
                -p * p.ln()
            })
            .sum();
        h.exp()
    };
    Ok((mass / d as f64, rank))
}

/// Fréchet distance between Gaussians fitted to two row sets `[n, k]`.
pub fn frechet_gaussian(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (ma, ca) = linalg::mean_covariance(a)?;
    let (mb, cb) = linalg::mean_covariance(b)?;
    frechet_from_stats(&ma, &ca, &mb, &cb)
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a^{1/2} S_b S_a^{1/2})^{1/2})`.
pub fn frechet_from_stats(mu_a: &[f64], cov_a: &Tensor, mu_b: &[f64], cov_b: &Tensor) -> Result<f64> {
    if mu_a.len() != mu_b.len() || cov_a.shape() != cov_b.shape() {
        return Err(Error::dim("Fréchet statistics have mismatched dimensions"));
    }
    let mean_term: f64 = mu_a.iter().zip(mu_b).map(|(x, y)| (x - y).powi(2)).sum();
    let ra = linalg::sqrt_psd(cov_a)?;
    let inner = ra.matmul(cov_b)?.matmul(&ra)?;
    let sym = inner.zip_map(&inner.transpose2()?, |x, y| 0.5 * (x + y))?;
    let (eig, _) = linalg::symmetric_eigen(&sym)?;
    let cross: f64 = eig.iter().map(|v| v.max(0.0).sqrt()).sum();
    let k = mu_a.len();
    let trace = |m: &Tensor| (0..k).map(|i| m.at2(i, i)).sum::<f64>();
    Ok((mean_term + trace(cov_a) + trace(cov_b) - 2.0 * cross).max(0.0))
}

/// Batch-averaged metrics of representation tokens.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub lds: f64,
    pub cds: f64,
    pub rmsc: f64,
    pub offdiag_cov_mass: f64,
    pub effective_rank: f64,
}

impl MetricReport {
    /// Spatial metrics averaged over samples of `batch [B, L, d]`;
    /// collapse diagnostics over the pooled tokens.
    pub fn from_batch(batch: &Tensor, side: usize, r_near: usize, r_far: usize) -> Result<Self> {
        let b = match batch.shape() {
            &[b, _, _] if b > 0 => b,
            s => return Err(Error::dim(format!("metrics expect [B, L, d], got {s:?}"))),
        };
        let (mut l_sum, mut c_sum, mut r_sum) = (0.0, 0.0, 0.0);
        for i in 0..b {
            let grid = TokenGrid::new(batch.index0(i)?, side)?;
            l_sum += lds(&grid, r_near, r_far)?;
            c_sum += cds(&grid)?;
            r_sum += rmsc_guarded(&grid, COS_EPS)?;
        }
        let (offdiag_cov_mass, effective_rank) = collapse_diagnostics(batch)?;
        Ok(MetricReport {
            lds: l_sum / b as f64,
            cds: c_sum / b as f64,
            rmsc: r_sum / b as f64,
            offdiag_cov_mass,
            effective_rank,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn grid(rows: Vec<Vec<f64>>, side: usize) -> TokenGrid {
        TokenGrid::new(Tensor::from_rows(&rows).unwrap(), side).unwrap()
    }

    #[test]
    fn identical_tokens() {
        let g = grid(vec![vec![1.0, 2.0]; 16], 4);
        assert!(lds(&g, 2, 4).unwrap().abs() < 1e-15);
        assert!(cds(&g).unwrap().abs() < 1e-14);
        assert!(rmsc(&g).unwrap() < 1e-15);
    }

    #[test]
    fn one_hot_tokens_have_zero_lds() {
        let rows = (0..16)
            .map(|t| (0..16).map(|j| if j == t { 1.0 } else { 0.0 }).collect())
            .collect();
        assert_eq!(lds(&grid(rows, 4), 2, 4).unwrap(), 0.0);
    }

    #[test]
    fn bad_radii() {
        let g = grid(vec![vec![1.0]; 4], 2);
        assert!(matches!(lds(&g, 3, 2), Err(Error::Config { .. })));
        assert_eq!(lds(&g, 2, 2).unwrap(), 0.0);
        // 2x2 grid has no pair at distance 4
        assert!(matches!(lds(&g, 2, 4), Err(Error::Config { .. })));
    }

    #[test]
    fn linear_correlogram() {
        let pts: Vec<(usize, f64)> = (1..=6).map(|d| (d, 1.0 - 0.1 * d as f64)).collect();
        assert!((cds_from_correlogram(&pts).unwrap() - 0.1).abs() < 1e-12);
        let shifted: Vec<(usize, f64)> = pts.iter().map(|&(d, g)| (d, g + 3.0)).collect();
        let a = cds_from_correlogram(&pts).unwrap();
        let b = cds_from_correlogram(&shifted).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn single_distance_is_degenerate() {
        assert!(matches!(cds_from_correlogram(&[(1, 0.5)]), Err(Error::Stats(_))));
        let g = grid(vec![vec![1.0]], 1);
        assert!(matches!(cds(&g), Err(Error::Stats(_))));
    }

    #[test]
    fn antipodal_rmsc() {
        let g = TokenGrid::new(Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap(), 1);
        assert!(g.is_err());
        let g = TokenGrid {
            features: Tensor::from_rows(&[vec![3.0, 0.0], vec![-2.0, 0.0]]).unwrap(),
            side: 1,
        };
        assert_eq!(rmsc(&g).unwrap(), 1.0);
    }

    #[test]
    fn identical_tokens_rmsc_is_exactly_zero() {
        for side in [1, 3, 5] {
            let g = grid(vec![vec![0.3, -1.2, 2.0]; side * side], side);
            assert_eq!(rmsc(&g).unwrap(), 0.0);
        }
    }

    #[test]
    fn zero_norm_token() {
        let g = grid(vec![vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]], 2);
        assert!(matches!(rmsc(&g), Err(Error::ZeroNorm { index: 1 })));
        assert!(rmsc_guarded(&g, 1e-8).unwrap().is_finite());
    }

    #[test]
    fn collapse_cases() {
        let mut rng = seeded(1);
        let iso = Tensor::randn(&[64, 64, 6], &mut rng);
        let (mass, rank) = collapse_diagnostics(&iso).unwrap();
        assert!((rank - 6.0).abs() <= 0.3, "{rank}");
        assert!(mass < 0.01);
        let base = Tensor::randn(&[8, 16, 1], &mut rng);
        let same: Vec<f64> = base.data().iter().flat_map(|&v| [v; 4]).collect();
        let (_, rank) = collapse_diagnostics(&Tensor::new(&[8, 16, 4], same).unwrap()).unwrap();
        assert!((rank - 1.0).abs() < 1e-6);
    }

    #[test]
    fn diagonal_covariance_has_no_offdiag_mass() {
        let z = Tensor::new(&[1, 4, 2], vec![1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0]).unwrap();
        let (mass, rank) = collapse_diagnostics(&z).unwrap();
        assert!(mass.abs() < 1e-20);
        assert!((rank - 2.0).abs() < 1e-12);
    }

    #[test]
    fn frechet_closed_forms() {
        let id = Tensor::identity(1);
        assert!((frechet_from_stats(&[0.0], &id, &[1.0], &id).unwrap() - 1.0).abs() < 1e-12);
        let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![4.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let f = frechet_from_stats(&[0.0, 0.0], &a, &[0.0, 0.0], &b).unwrap();
        assert!((f - 2.0).abs() < 1e-10, "{f}");
        let x = Tensor::randn(&[50, 3], &mut seeded(2));
        assert!(frechet_gaussian(&x, &x).unwrap() < 1e-10);
    }

    #[test]
    fn report_fields() {
        let z = Tensor::randn(&[4, 16, 3], &mut seeded(3));
        let r = MetricReport::from_batch(&z, 4, 2, 4).unwrap();
        assert!(r.rmsc >= 0.0);
        assert!(r.effective_rank >= 1.0 && r.effective_rank <= 3.0);
    }
}
