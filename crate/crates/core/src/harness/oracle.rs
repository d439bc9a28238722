//! Exact reference values for the homogeneous walk (unit conductance on
//! every edge), used to cross-check the generic solvers.
//!
//! The discrete-time simple random walk factorizes along the diagonals:
//! with `u = x1 + x2` and `v = x1 - x2`, the rotated coordinates perform
//! independent one-dimensional simple random walks, so the k-step return
//! probabilities obey `p_k(x) = q_k(u) q_k(v)` where `q` is the 1D kernel.
//! That turns the potential kernel
//!
//! `a(x) = sum_k [p_k(0) - p_k(x)]`
//!
//! into a sum over a single 1D dynamic program — no spatial truncation,
//! no sampling. The partial sums `A_N` approach the limit like `c / N`,
//! so the Richardson combination `2 A_{2N} - A_N` is exact to `O(1/N^2)`.
//! The continuous-time walk with unit conductances jumps at rate 4, which
//! scales the potential kernel by its mean holding time `1/4`.

use std::f64::consts::{LN_2, PI};

/// Potential kernel of the continuous-time walk with unit conductances,
/// evaluated exactly at each point. `n_steps` is the coarse partial-sum
/// length `N`; the DP runs to `2N` for the Richardson combination.
/// `a(0) = 0`; values grow like `ln|x| / (2 pi)`.
///
/// The Richardson step cancels the `1/N` tail only once the walk has
/// thoroughly mixed past the target, so the truncation error is about
/// `0.008 (|x|^2 / N)^2` (measured): keep `N` a good multiple of `|x|^2`.
pub fn classical_potential(points: &[[i64; 2]], n_steps: usize) -> Vec<f64> {
    assert!(n_steps >= 2, "need at least two partial-sum terms");
    let diag: Vec<(i64, i64)> =
        points.iter().map(|&[x1, x2]| (x1 + x2, x1 - x2)).collect();
    let reach = diag
        .iter()
        .map(|&(u, v)| u.unsigned_abs().max(v.unsigned_abs()) as usize)
        .max()
        .unwrap_or(0);

    let total = 2 * n_steps;
    // q[offset + j] = q_k(j); the support after k steps is |j| <= k, but we
    // only ever read |j| <= max(total, reach), so size the array once.
    let width = total.max(reach) + 2;
    let offset = width as i64;
    let mut q = vec![0.0f64; 2 * width + 1];
    let mut next = vec![0.0f64; 2 * width + 1];
    q[offset as usize] = 1.0;

    let mut partial = vec![0.0f64; points.len()];
    let mut coarse = vec![0.0f64; points.len()];
    for k in 0..total {
        if k == n_steps {
            coarse.copy_from_slice(&partial);
        }
        let q0 = q[offset as usize];
        for (i, &(u, v)) in diag.iter().enumerate() {
            let qu = q[(offset + u) as usize];
            let qv = q[(offset + v) as usize];
            partial[i] += q0 * q0 - qu * qv;
        }
        // One DP step: q_{k+1}(j) = (q_k(j-1) + q_k(j+1)) / 2. The write
        // range covers the support of q_{k+1} and everything stale in the
        // swapped-out buffer (support of q_{k-1}), so no zeroing is needed.
        let lo = (offset as usize) - (k + 1);
        let hi = (offset as usize) + (k + 1);
        for j in lo..=hi {
            next[j] = 0.5 * (q[j - 1] + q[j + 1]);
        }
        std::mem::swap(&mut q, &mut next);
    }

    points
        .iter()
        .enumerate()
        .map(|(i, _)| (2.0 * partial[i] - coarse[i]) / 4.0)
        .collect()
}

/// The additive constant in `a(x) = ln|x| / (2 pi) + const + O(|x|^{-2})`
/// for the unit-conductance walk.
pub fn classical_expansion_constant() -> f64 {
    (2.0 * statrs::consts::EULER_MASCHERONI + 3.0 * LN_2) / (4.0 * PI)
}

#[cfg(test)]
mod tests {
    use super::*;

    // The three nearest values have closed forms; the DP with the
    // Richardson tail must hit them to near machine precision relative to
    // the O(1/N^2) truncation.
    #[test]
    fn matches_the_closed_forms_at_small_separations() {
        let got = classical_potential(&[[0, 0], [1, 0], [1, 1], [2, 0]], 4096);
        let want = [0.0, 0.25, 1.0 / PI, 1.0 - 2.0 / PI];
        for (g, w) in got.iter().zip(want) {
            assert!(
                (g - w).abs() < 1e-6,
                "classical potential {g} vs closed form {w}"
            );
        }
    }

    // At radii 16-23 the lattice correction to the expansion is below
    // 6e-5 and N = 16384 puts the DP truncation below 1e-7, so the
    // additive constant must match to 1e-4.
    #[test]
    fn approaches_the_logarithmic_expansion() {
        let pts = [[16, 0], [0, 23], [16, 16], [20, 9]];
        let got = classical_potential(&pts, 16384);
        let kappa = classical_expansion_constant();
        for (&[x, y], a) in pts.iter().zip(got) {
            let r = ((x * x + y * y) as f64).sqrt();
            let c = a - r.ln() / (2.0 * PI);
            assert!(
                (c - kappa).abs() < 1e-4,
                "expansion constant at ({x},{y}): {c} vs {kappa}"
            );
        }
    }

    #[test]
    fn richardson_is_stable_in_the_cutoff() {
        // The truncation residue scales like (|z|^2 / n)^2, so quadrupling
        // the cutoff at |z|^2 = 29 moves the value by a few parts in 1e6.
        let pts = [[5, 2]];
        let a1 = classical_potential(&pts, 1024)[0];
        let a2 = classical_potential(&pts, 4096)[0];
        assert!((a1 - a2).abs() < 2e-5, "cutoff drift {}", (a1 - a2).abs());
    }

    #[test]
    fn symmetry_of_the_lattice_is_exact() {
        let pts = [[3, 4], [4, 3], [-3, 4], [3, -4], [-4, -3]];
        let got = classical_potential(&pts, 512);
        for w in got.windows(2) {
            assert_eq!(w[0], w[1], "dihedral images must agree bit for bit");
        }
    }
}
