//! Euclidean projections onto (masked) probability simplices.

/// Projects `v` onto `{x : x ≥ 0, Σx = total}` in place.
pub fn project_simplex(v: &mut [f64], total: f64) {
    if v.is_empty() {
        return;
    }
    let mut sorted: Vec<f64> = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        cumsum += x;
        let t = (cumsum - total) / (i + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    for x in v.iter_mut() {
        *x = (*x - theta).max(0.0);
    }
}

/// Projects `v` onto the simplex restricted to coordinates where `mask` is
/// set; all other coordinates are zeroed.
pub fn project_masked_simplex(v: &mut [f64], mask: &[bool]) {
    debug_assert_eq!(v.len(), mask.len());
    let idx: Vec<usize> = (0..v.len()).filter(|&i| mask[i]).collect();
    let mut sub: Vec<f64> = idx.iter().map(|&i| v[i]).collect();
    project_simplex(&mut sub, 1.0);
    v.iter_mut().for_each(|x| *x = 0.0);
    for (k, &i) in idx.iter().enumerate() {
        v[i] = sub[k];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn already_in_simplex_is_fixed() {
        let mut v = vec![0.2, 0.3, 0.5];
        project_simplex(&mut v, 1.0);
        assert!((v[0] - 0.2).abs() < 1e-15 && (v[2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn masked_projection_zeroes_outside() {
        let mut v = vec![1.0, 5.0, 1.0, -2.0];
        project_masked_simplex(&mut v, &[true, false, true, true]);
        assert_eq!(v[1], 0.0);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((v[0] - 0.5).abs() < 1e-12 && (v[2] - 0.5).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn projection_is_feasible_and_optimal(v in prop::collection::vec(-3.0f64..3.0, 1..12)) {
            let mut p = v.clone();
            project_simplex(&mut p, 1.0);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            // optimality: <v - p, y - p> <= 0 for every vertex y
            for j in 0..v.len() {
                let mut dot = 0.0;
                for i in 0..v.len() {
                    let y = if i == j { 1.0 } else { 0.0 };
                    dot += (v[i] - p[i]) * (y - p[i]);
                }
                prop_assert!(dot <= 1e-10);
            }
        }
    }
}
