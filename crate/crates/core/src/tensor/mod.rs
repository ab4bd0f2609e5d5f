//! Dense f64 arrays, a small reverse-mode tape, MLP forward passes,
//! optimizers, and the checkpoint file format.

mod array;
mod checkpoint;
mod mlp;
mod optim;
mod store;
mod tape;

pub use array::NumArray;
pub(crate) use array::centroid;
pub use checkpoint::{file_hash, hex_string, load_checkpoint, save_checkpoint, Checkpoint};
pub use mlp::{forward_mlp, forward_mlp_on_tape, init_mlp_params, Activation};
pub use optim::{optim_step, OptimConfig, OptimKind};
pub use store::ParamStore;
pub use tape::{NodeId, Tape};

/// Solve `A x = b` for several right-hand sides by Gaussian elimination with
/// partial pivoting. `a` is row-major `n x n`, `rhs` is row-major `n x m`;
/// returns the row-major `n x m` solution.
pub fn solve_linear(a: &[f64], rhs: &[f64], n: usize, m: usize) -> crate::Result<Vec<f64>> {
    assert_eq!(a.len(), n * n);
    assert_eq!(rhs.len(), n * m);
    let mut lhs = a.to_vec();
    let mut out = rhs.to_vec();
    let scale = a.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(1.0);
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if lhs[row * n + col].abs() > lhs[pivot * n + col].abs() {
                pivot = row;
            }
        }
        if lhs[pivot * n + col].abs() < 1e-13 * scale {
            return Err(crate::Error::Singular {
                context: "solve_linear".into(),
                hint: "matrix is rank-deficient; add a ridge term".into(),
            });
        }
        if pivot != col {
            for k in 0..n {
                lhs.swap(col * n + k, pivot * n + k);
            }
            for k in 0..m {
                out.swap(col * m + k, pivot * m + k);
            }
        }
        let diag = lhs[col * n + col];
        for row in col + 1..n {
            let factor = lhs[row * n + col] / diag;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                lhs[row * n + k] -= factor * lhs[col * n + k];
            }
            for k in 0..m {
                out[row * m + k] -= factor * out[col * m + k];
            }
        }
    }
    for col in (0..n).rev() {
        let diag = lhs[col * n + col];
        for k in 0..m {
            let mut acc = out[col * m + k];
            for j in col + 1..n {
                acc -= lhs[col * n + j] * out[j * m + k];
            }
            out[col * m + k] = acc / diag;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod solve_tests {
    use super::solve_linear;

    #[test]
    fn solves_small_system() {
        // A = [[2,1],[1,3]], b = [5, 10] -> x = [1, 3]
        let x = solve_linear(&[2.0, 1.0, 1.0, 3.0], &[5.0, 10.0], 2, 1).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert!((x[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_singular() {
        let r = solve_linear(&[1.0, 2.0, 2.0, 4.0], &[1.0, 2.0], 2, 1);
        assert!(r.is_err());
    }
}
