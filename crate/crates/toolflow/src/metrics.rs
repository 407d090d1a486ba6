//! Evaluation metrics over displacement sequences: average / final
//! displacement error on integrated trajectories, and Spearman rank
//! correlation for monotonicity checks.

use crate::scene::DisplacementSequence;

/// Average and final displacement error between two sequences, computed on
/// integrated trajectories (cumulative displacements from the first frame).
/// ADE averages the per-point error over all queries and steps; FDE averages
/// the last-step error over queries.
pub fn ade_fde(pred: &DisplacementSequence, gt: &DisplacementSequence) -> (f64, f64) {
    assert_eq!(pred.n_q(), gt.n_q(), "ade_fde: query counts differ");
    assert_eq!(pred.m(), gt.m(), "ade_fde: step counts differ");
    let (n_q, m) = (pred.n_q(), pred.m());
    let tp = pred.trajectories();
    let tg = gt.trajectories();
    let err = |i: usize, t: usize| {
        let base = (i * m + t) * 3;
        let dx = tp[base] - tg[base];
        let dy = tp[base + 1] - tg[base + 1];
        let dz = tp[base + 2] - tg[base + 2];
        (dx * dx + dy * dy + dz * dz).sqrt()
    };
    let mut ade = 0.0;
    let mut fde = 0.0;
    for i in 0..n_q {
        for t in 0..m {
            ade += err(i, t);
        }
        fde += err(i, m - 1);
    }
    (ade / (n_q * m) as f64, fde / n_q as f64)
}

/// Fractional ranks with ties averaged.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("non-finite value in ranks"));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either input is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "spearman: length mismatch");
    assert!(xs.len() >= 2, "spearman: need at least 2 points");
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx.sqrt() * vy.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn seq(steps: Vec<f64>, n_q: usize, m: usize) -> DisplacementSequence {
        DisplacementSequence::new(steps, n_q, m, vec![1; n_q]).unwrap()
    }

    #[test]
    fn ade_fde_zero_for_identical() {
        let mut rng = Rng::new(1);
        let s = rng.normal_vec(5 * 3 * 3);
        let a = seq(s.clone(), 5, 3);
        let b = seq(s, 5, 3);
        let (ade, fde) = ade_fde(&a, &b);
        assert_eq!((ade, fde), (0.0, 0.0));
    }

    #[test]
    fn ade_fde_matches_naive_oracle() {
        let mut rng = Rng::new(7);
        let (n_q, m) = (6, 3);
        let a = seq(rng.normal_vec(n_q * m * 3), n_q, m);
        let b = seq(rng.normal_vec(n_q * m * 3), n_q, m);
        // oracle: integrate positions step by step per query, in the dumbest
        // possible way
        let pos = |s: &DisplacementSequence, i: usize, t: usize| {
            let mut p = [0.0f64; 3];
            for tt in 0..=t {
                let st = s.step(i, tt);
                p[0] += st.x;
                p[1] += st.y;
                p[2] += st.z;
            }
            p
        };
        let mut errs = Vec::new();
        let mut finals = Vec::new();
        for i in 0..n_q {
            for t in 0..m {
                let pa = pos(&a, i, t);
                let pb = pos(&b, i, t);
                let e = ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2) + (pa[2] - pb[2]).powi(2))
                    .sqrt();
                errs.push(e);
                if t == m - 1 {
                    finals.push(e);
                }
            }
        }
        let want_ade = errs.iter().sum::<f64>() / errs.len() as f64;
        let want_fde = finals.iter().sum::<f64>() / finals.len() as f64;
        let (ade, fde) = ade_fde(&a, &b);
        assert!((ade - want_ade).abs() < 1e-12);
        assert!((fde - want_fde).abs() < 1e-12);
    }

    #[test]
    fn constant_offset_in_last_step_only_hits_fde_harder() {
        let n_q = 4;
        let m = 3;
        let zeros = vec![0.0; n_q * m * 3];
        let mut off = zeros.clone();
        for i in 0..n_q {
            off[(i * m + (m - 1)) * 3] = 0.3; // x offset in final step only
        }
        let (ade, fde) = ade_fde(&seq(off, n_q, m), &seq(zeros, n_q, m));
        assert!((fde - 0.3).abs() < 1e-12);
        assert!((ade - 0.1).abs() < 1e-12); // error only in 1 of 3 steps
    }

    #[test]
    fn spearman_monotone_and_reversed() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let ys = [2.0, 4.0, 9.0, 16.0, 100.0]; // monotone, nonlinear
        assert!((spearman(&xs, &ys) - 1.0).abs() < 1e-12);
        let rev: Vec<f64> = ys.iter().rev().copied().collect();
        assert!((spearman(&xs, &rev) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_ties_and_constant() {
        let xs = [1.0, 1.0, 2.0, 2.0];
        let ys = [3.0, 3.0, 5.0, 5.0];
        assert!((spearman(&xs, &ys) - 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), 0.0);
        // brute-force oracle on random data: compare with direct Pearson on
        // hand-computed ranks
        let mut rng = Rng::new(3);
        let xs: Vec<f64> = rng.normal_vec(50);
        let ys: Vec<f64> = rng.normal_vec(50);
        let r = spearman(&xs, &ys);
        assert!(r.abs() < 0.5, "random data should be weakly correlated, got {r}");
    }
}
