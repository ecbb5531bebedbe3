//! Distance matrices and gated greedy matching for data association.
//!
//! The combined metric is `D = D_mah + alpha .* (D_feat - (0.5 + beta))`:
//! with `alpha` identically zero it degrades bit-exactly to the Mahalanobis
//! distance, which is the ablation baseline. Matching rejects pairs whose
//! combined distance exceeds the gate (default 11).

use nalgebra::{DMatrix, DVector};

use crate::linalg::{self, CholFactor};
use crate::types::{Observation, ObsMat, ObsVec, ANGLE_IDX, OBS_DIM};
use crate::{Error, Result};

/// Default association gate on the combined distance.
pub const DEFAULT_GATE: f64 = 11.0;

/// The distance matrices of one association round, detections along rows,
/// tracks along columns.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceBundle {
    pub d_mah: DMatrix<f64>,
    pub d_feat: DMatrix<f64>,
    pub alpha: DMatrix<f64>,
    pub beta: DMatrix<f64>,
    pub d_combined: DMatrix<f64>,
}

/// Outcome of one matching round over an `N x M` distance matrix.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchingResult {
    /// `(detection index, track index, distance)`, in assignment order.
    pub matches: Vec<(usize, usize, f64)>,
    pub unmatched_detections: Vec<usize>,
    pub unmatched_tracks: Vec<usize>,
}

/// Mahalanobis distance of every detection against every track's predicted
/// observation, heading residual wrapped. Entry `(n, m)` is
/// `sqrt((o_n - o_hat_m)^T S_m^-1 (o_n - o_hat_m))`.
pub fn mahalanobis_matrix(
    detections: &[Observation],
    tracks: &[(Observation, ObsMat)],
) -> Result<DMatrix<f64>> {
    let mut factors = Vec::with_capacity(tracks.len());
    for (m, (_, s)) in tracks.iter().enumerate() {
        let d = DMatrix::from_iterator(OBS_DIM, OBS_DIM, s.iter().copied());
        let f = CholFactor::new(&d).map_err(|e| {
            Error::Numerics(format!("track {m}: innovation covariance not SPD ({e})"))
        })?;
        factors.push(f);
    }
    let mut out = DMatrix::zeros(detections.len(), tracks.len());
    for (n, det) in detections.iter().enumerate() {
        let ov = det.to_vector();
        for (m, (o_hat, _)) in tracks.iter().enumerate() {
            let mut resid: ObsVec = ov - o_hat.to_vector();
            resid[ANGLE_IDX] = linalg::wrap(resid[ANGLE_IDX]);
            let v = DVector::from_column_slice(resid.as_slice());
            out[(n, m)] = factors[m].quad_form(&v).max(0.0).sqrt();
        }
    }
    Ok(out)
}

/// Elementwise combination `D = D_mah + alpha .* (D_feat - (0.5 + beta))`.
pub fn combine(
    d_mah: &DMatrix<f64>,
    d_feat: &DMatrix<f64>,
    alpha: &DMatrix<f64>,
    beta: &DMatrix<f64>,
) -> Result<DistanceBundle> {
    let shape = d_mah.shape();
    for (name, m) in [("d_feat", d_feat), ("alpha", alpha), ("beta", beta)] {
        if m.shape() != shape {
            return Err(Error::Config(format!(
                "combine: {name} is {:?}, expected {:?}",
                m.shape(),
                shape
            )));
        }
    }
    let mut d = d_mah.clone();
    for i in 0..shape.0 {
        for j in 0..shape.1 {
            d[(i, j)] += alpha[(i, j)] * (d_feat[(i, j)] - (0.5 + beta[(i, j)]));
        }
    }
    Ok(DistanceBundle {
        d_mah: d_mah.clone(),
        d_feat: d_feat.clone(),
        alpha: alpha.clone(),
        beta: beta.clone(),
        d_combined: d,
    })
}

/// Greedy matching: pairs are taken in globally nondecreasing distance order
/// (ties broken by detection index, then track index), skipping pairs whose
/// detection or track is already taken and pairs beyond the gate.
pub fn greedy_match(d: &DMatrix<f64>, gate: f64) -> MatchingResult {
    let (n, m) = d.shape();
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            if d[(i, j)] <= gate {
                pairs.push((i, j));
            }
        }
    }
    pairs.sort_by(|&(i1, j1), &(i2, j2)| {
        d[(i1, j1)]
            .total_cmp(&d[(i2, j2)])
            .then(i1.cmp(&i2))
            .then(j1.cmp(&j2))
    });

    let mut det_used = vec![false; n];
    let mut trk_used = vec![false; m];
    let mut result = MatchingResult::default();
    for (i, j) in pairs {
        if det_used[i] || trk_used[j] {
            continue;
        }
        det_used[i] = true;
        trk_used[j] = true;
        result.matches.push((i, j, d[(i, j)]));
    }
    result.unmatched_detections = (0..n).filter(|&i| !det_used[i]).collect();
    result.unmatched_tracks = (0..m).filter(|&j| !trk_used[j]).collect();
    result
}

/// Reference matcher that rescans the whole matrix for the global minimum at
/// every step. O(k * N * M); used as the oracle for [`greedy_match`].
pub fn greedy_match_rescan(d: &DMatrix<f64>, gate: f64) -> MatchingResult {
    let (n, m) = d.shape();
    let mut det_used = vec![false; n];
    let mut trk_used = vec![false; m];
    let mut result = MatchingResult::default();
    loop {
        let mut best: Option<(usize, usize)> = None;
        for i in 0..n {
            if det_used[i] {
                continue;
            }
            for j in 0..m {
                if trk_used[j] || d[(i, j)] > gate {
                    continue;
                }
                best = match best {
                    None => Some((i, j)),
                    Some((bi, bj)) => {
                        if d[(i, j)] < d[(bi, bj)] {
                            Some((i, j))
                        } else {
                            Some((bi, bj))
                        }
                    }
                };
            }
        }
        match best {
            Some((i, j)) => {
                det_used[i] = true;
                trk_used[j] = true;
                result.matches.push((i, j, d[(i, j)]));
            }
            None => break,
        }
    }
    result.unmatched_detections = (0..n).filter(|&i| !det_used[i]).collect();
    result.unmatched_tracks = (0..m).filter(|&j| !trk_used[j]).collect();
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn obs_at(x: f64, y: f64) -> Observation {
        let mut v = ObsVec::zeros();
        v[0] = x;
        v[1] = y;
        v[4] = 1.0;
        v[5] = 1.0;
        v[6] = 1.0;
        Observation::new(v).unwrap()
    }

    #[test]
    fn mahalanobis_zero_residual() {
        let o = obs_at(2.0, 3.0);
        let d = mahalanobis_matrix(&[o], &[(o, ObsMat::identity())]).unwrap();
        assert_abs_diff_eq!(d[(0, 0)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn mahalanobis_diagonal_case() {
        // Residual (3, 4) on two axes, S = 4I: sqrt((9 + 16) / 4) = 2.5.
        let det = obs_at(3.0, 4.0);
        let trk = obs_at(0.0, 0.0);
        let d = mahalanobis_matrix(&[det], &[(trk, ObsMat::identity() * 4.0)]).unwrap();
        assert_abs_diff_eq!(d[(0, 0)], 2.5, epsilon = 1e-12);
    }

    #[test]
    fn mahalanobis_matches_explicit_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let a = ObsMat::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let s = a * a.transpose() + ObsMat::identity() * 0.3;
            let mut dv = ObsVec::from_fn(|_, _| rng.random_range(-2.0..2.0));
            dv[4] = dv[4].abs() + 1.0;
            dv[5] = dv[5].abs() + 1.0;
            dv[6] = dv[6].abs() + 1.0;
            dv[ANGLE_IDX] = rng.random_range(-1.0..1.0);
            let det = Observation::new(dv).unwrap();
            let trk = obs_at(0.5, -0.5);

            let got = mahalanobis_matrix(&[det], &[(trk, s)]).unwrap()[(0, 0)];

            let mut resid = det.to_vector() - trk.to_vector();
            resid[ANGLE_IDX] = crate::linalg::wrap(resid[ANGLE_IDX]);
            let s_inv = s.try_inverse().unwrap();
            let expected = (resid.transpose() * s_inv * resid)[(0, 0)].sqrt();
            assert_abs_diff_eq!(got, expected, epsilon = 1e-8);
        }
    }

    #[test]
    fn mahalanobis_names_singular_track() {
        let det = obs_at(0.0, 0.0);
        let good = (obs_at(1.0, 1.0), ObsMat::identity());
        let bad = (obs_at(2.0, 2.0), ObsMat::zeros());
        let err = mahalanobis_matrix(&[det], &[good, bad]).unwrap_err();
        assert!(err.to_string().contains("track 1"), "{err}");
    }

    #[test]
    fn combine_alpha_zero_is_mahalanobis() {
        let d_mah = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let d_feat = DMatrix::from_element(2, 2, 0.9);
        let zero = DMatrix::zeros(2, 2);
        let bundle = combine(&d_mah, &d_feat, &zero, &zero).unwrap();
        assert_eq!(bundle.d_combined, d_mah);
    }

    #[test]
    fn combine_zero_correction_when_feat_matches_bias() {
        let d_mah = DMatrix::from_element(2, 3, 5.0);
        let beta = DMatrix::from_element(2, 3, 0.2);
        let d_feat = DMatrix::from_element(2, 3, 0.7); // = 0.5 + beta
        let alpha = DMatrix::from_element(2, 3, 3.0);
        let bundle = combine(&d_mah, &d_feat, &alpha, &beta).unwrap();
        for v in bundle.d_combined.iter() {
            assert_abs_diff_eq!(*v, 5.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn combine_arithmetic_example() {
        let d_mah = DMatrix::from_element(1, 1, 7.0);
        let d_feat = DMatrix::from_element(1, 1, 0.9);
        let alpha = DMatrix::from_element(1, 1, 2.0);
        let beta = DMatrix::from_element(1, 1, 0.1);
        let bundle = combine(&d_mah, &d_feat, &alpha, &beta).unwrap();
        assert_abs_diff_eq!(bundle.d_combined[(0, 0)], 7.6, epsilon = 1e-12);
    }

    #[test]
    fn combine_rejects_shape_mismatch() {
        let d_mah = DMatrix::zeros(2, 2);
        let other = DMatrix::zeros(2, 3);
        assert!(combine(&d_mah, &other, &d_mah.clone(), &d_mah.clone()).is_err());
    }

    #[test]
    fn greedy_walks_sort_order() {
        let d = DMatrix::from_row_slice(2, 2, &[1.0, 5.0, 2.0, 0.5]);
        let r = greedy_match(&d, DEFAULT_GATE);
        assert_eq!(
            r.matches
                .iter()
                .map(|&(i, j, _)| (i, j))
                .collect::<Vec<_>>(),
            vec![(1, 1), (0, 0)]
        );
        assert!(r.unmatched_detections.is_empty());
        assert!(r.unmatched_tracks.is_empty());
    }

    #[test]
    fn greedy_gates_remainder() {
        let d = DMatrix::from_row_slice(2, 2, &[1.0, 0.9, 1.1, 12.0]);
        let r = greedy_match(&d, DEFAULT_GATE);
        assert_eq!(
            r.matches
                .iter()
                .map(|&(i, j, _)| (i, j))
                .collect::<Vec<_>>(),
            vec![(0, 1), (1, 0)]
        );
    }

    #[test]
    fn greedy_full_gating() {
        let d = DMatrix::from_element(3, 2, 100.0);
        let r = greedy_match(&d, DEFAULT_GATE);
        assert!(r.matches.is_empty());
        assert_eq!(r.unmatched_detections, vec![0, 1, 2]);
        assert_eq!(r.unmatched_tracks, vec![0, 1]);
    }

    #[test]
    fn matched_distances_nondecreasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let d = DMatrix::from_fn(6, 6, |_, _| rng.random_range(0.0..20.0));
            let r = greedy_match(&d, DEFAULT_GATE);
            for w in r.matches.windows(2) {
                assert!(w[0].2 <= w[1].2);
            }
        }
    }

    proptest! {
        #[test]
        fn greedy_equals_rescan_oracle(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(0usize..=8);
            let m = rng.random_range(0usize..=8);
            let d = DMatrix::from_fn(n, m, |_, _| rng.random_range(0.0..16.0));
            let fast = greedy_match(&d, DEFAULT_GATE);
            let slow = greedy_match_rescan(&d, DEFAULT_GATE);
            prop_assert_eq!(fast, slow);
        }

        #[test]
        fn greedy_invariant_under_monotone_transform(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = DMatrix::from_fn(5, 5, |_, _| rng.random_range(0.0..16.0));
            let gate = 9.0;
            let f = |x: f64| x.powi(3) + 2.0 * x; // strictly increasing
            let td = d.map(f);
            let base = greedy_match(&d, gate);
            let trans = greedy_match(&td, f(gate));
            let key = |r: &MatchingResult| {
                (r.matches.iter().map(|&(i, j, _)| (i, j)).collect::<Vec<_>>(),
                 r.unmatched_detections.clone(),
                 r.unmatched_tracks.clone())
            };
            prop_assert_eq!(key(&base), key(&trans));
        }
    }
}
