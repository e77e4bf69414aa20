//! Central finite-difference gradient oracle.
//!
//! Independent of the tape: evaluates the given function twice per
//! coordinate and never touches recorded adjoints, so it can serve as
//! the reference that `Tape::backward` is checked against.

use super::tensor::Tensor;

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// (f(x + h e_i) - f(x - h e_i)) / (2h) per coordinate.
pub fn finite_difference_gradient(
    mut f: impl FnMut(&Tensor) -> f64,
    x: &Tensor,
    h: f64,
) -> Tensor {
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.numel()];
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let fp = f(&probe);
        probe.data[i] = orig - h;
        let fm = f(&probe);
        probe.data[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Tensor::new(x.shape.clone(), grad)
}

/// Same oracle restricted to a subset of coordinates; untouched entries
/// are reported as NaN so accidental use is loud.
pub fn finite_difference_gradient_at(
    mut f: impl FnMut(&Tensor) -> f64,
    x: &Tensor,
    coords: &[usize],
    h: f64,
) -> Tensor {
    let mut probe = x.clone();
    let mut grad = vec![f64::NAN; x.numel()];
    for &i in coords {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let fp = f(&probe);
        probe.data[i] = orig - h;
        let fm = f(&probe);
        probe.data[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Tensor::new(x.shape.clone(), grad)
}
