//! Scalar quality metrics: SQNR, kernel MMD² and rank correlation.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `10·log10(Σ‖ref‖² / Σ‖ref − q‖²)` in decibels over paired tensors.
/// Exactly zero error yields `f64::INFINITY`.
pub fn sqnr(reference: &[Tensor], quantized: &[Tensor]) -> Result<f64> {
    if reference.is_empty() || reference.len() != quantized.len() {
        return Err(Error::Shape(format!(
            "sqnr needs matching nonempty sequences, got {} and {}",
            reference.len(),
            quantized.len()
        )));
    }
    let mut signal = 0.0;
    let mut noise = 0.0;
    for (r, q) in reference.iter().zip(quantized) {
        signal += r.sq_norm();
        noise += r.sq_dist(q)?;
    }
    if signal == 0.0 {
        return Err(Error::Contract("sqnr of an all-zero reference is undefined".into()));
    }
    if noise == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (signal / noise).log10())
}

fn sq_dist_rows(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median Euclidean distance over all distinct pairs of the pooled rows.
pub fn median_pairwise_distance(a: &Tensor, b: &Tensor) -> f64 {
    let rows: Vec<&[f64]> = (0..a.rows()).map(|r| a.row(r)).chain((0..b.rows()).map(|r| b.row(r))).collect();
    let mut d = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(sq_dist_rows(rows[i], rows[j]));
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    let mid = d.len() / 2;
    let odd = d.len() % 2 == 1;
    let (lower, &mut upper, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    if odd {
        return upper.sqrt();
    }
    let below = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    0.5 * (below.sqrt() + upper.sqrt())
}

/// Unbiased MMD² between the row sets `a` and `b` under an RBF kernel whose
/// bandwidth is the median pairwise distance of the pooled set.
pub fn mmd2(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.cols() {
        return Err(Error::Shape(format!("mmd2 needs two point sets, got {:?} and {:?}", a.shape(), b.shape())));
    }
    let (n, m) = (a.rows(), b.rows());
    if n < 2 || m < 2 {
        return Err(Error::Contract("mmd2 needs at least two points per set".into()));
    }
    let mut bw = median_pairwise_distance(a, b);
    if bw == 0.0 {
        bw = 1.0;
    }
    let gamma = 1.0 / (2.0 * bw * bw);
    let k = |x: &[f64], y: &[f64]| (-gamma * sq_dist_rows(x, y)).exp();
    let within = |t: &Tensor| {
        let mut s = 0.0;
        for i in 0..t.rows() {
            for j in i + 1..t.rows() {
                s += k(t.row(i), t.row(j));
            }
        }
        2.0 * s / (t.rows() * (t.rows() - 1)) as f64
    };
    let mut cross = 0.0;
    for i in 0..n {
        for j in 0..m {
            cross += k(a.row(i), b.row(j));
        }
    }
    Ok(within(a) + within(b) - 2.0 * cross / (n * m) as f64)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Shape("spearman needs two equal-length series of at least 2".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[[f64; 2]]) -> Tensor {
        Tensor::from_rows(&v.iter().map(|p| p.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn sqnr_hand_values() {
        let r = Tensor::new(vec![1], vec![10.0]).unwrap();
        let q = Tensor::new(vec![1], vec![9.0]).unwrap();
        assert!((sqnr(&[r.clone()], &[q.clone()]).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(sqnr(&[r.clone()], &[r.clone()]).unwrap(), f64::INFINITY);
        let scaled = sqnr(&[r.scale(-3.0)], &[q.scale(-3.0)]).unwrap();
        assert!((scaled - 20.0).abs() < 1e-12);
        assert!(matches!(sqnr(&[Tensor::zeros(&[2])], &[Tensor::zeros(&[2])]), Err(Error::Contract(_))));
        assert!(sqnr(&[], &[]).is_err());
    }

    #[test]
    fn mmd_matches_naive_double_loop() {
        let a = pts(&[[0.0, 0.0], [0.1, 0.2], [-0.3, 0.1]]);
        let b = pts(&[[5.0, 5.0], [5.2, 4.9], [4.8, 5.1], [5.0, 5.3]]);
        let pooled: Vec<Vec<f64>> = (0..3).map(|r| a.row(r).to_vec()).chain((0..4).map(|r| b.row(r).to_vec())).collect();
        let mut d = Vec::new();
        for i in 0..7 {
            for j in i + 1..7 {
                d.push(sq_dist_rows(&pooled[i], &pooled[j]).sqrt());
            }
        }
        d.sort_by(f64::total_cmp);
        let bw = d[d.len() / 2];
        let k = |x: &[f64], y: &[f64]| (-sq_dist_rows(x, y) / (2.0 * bw * bw)).exp();
        let mut xx = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    xx += k(a.row(i), a.row(j));
                }
            }
        }
        let mut yy = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    yy += k(b.row(i), b.row(j));
                }
            }
        }
        let mut xy = 0.0;
        for i in 0..3 {
            for j in 0..4 {
                xy += k(a.row(i), b.row(j));
            }
        }
        let want = xx / 6.0 + yy / 12.0 - 2.0 * xy / 12.0;
        assert!((mmd2(&a, &b).unwrap() - want).abs() < 1e-6);
    }

    #[test]
    fn mmd_same_set_and_permutation() {
        let a = pts(&[[0.0, 1.0], [1.0, 0.0], [0.5, 0.5], [2.0, -1.0]]);
        let same = mmd2(&a, &a).unwrap();
        assert!(same <= 1.0 / 4.0);
        let shuffled = a.select_rows(&[2, 0, 3, 1]);
        let b = pts(&[[0.2, 0.1], [0.0, 0.0], [1.0, 1.0]]);
        assert!((mmd2(&a, &b).unwrap() - mmd2(&shuffled, &b).unwrap()).abs() < 1e-12);
        assert!(mmd2(&pts(&[[0.0, 0.0]]), &b).is_err());
    }

    #[test]
    fn spearman_cases() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 2.0], &[5.0, 5.0]).unwrap(), 0.0);
        assert_eq!(ranks(&[1.0, 1.0, 3.0]), vec![1.5, 1.5, 3.0]);
    }
}
