//! State-space sequence layers.
//!
//! The linear time-invariant half (continuous parameters, bilinear and
//! zero-order-hold discretization, recurrent scan, convolutional kernel)
//! works on plain f64 buffers and exists mainly to cross-check the
//! selective path. The selective half (input-dependent step size and
//! projections, gated Mamba block) runs on the autodiff tape.

use rand::Rng;
use thiserror::Error;

use crate::numerics::{
    softplus_inverse, uniform_init, PId, ParamSet, Result as NumResult, Tape, Tensor, Var,
};

#[derive(Debug, Error)]
pub enum SsmError {
    #[error("singular (I - delta/2 * A): min pivot {min_pivot:e} at column {col}")]
    Singular { min_pivot: f64, col: usize },
    #[error("zero-order hold requires a diagonal state matrix")]
    NotDiagonal,
    #[error("step size must be positive, got {0}")]
    NonPositiveDelta(f64),
}

/// State matrix, dense or diagonal.
#[derive(Debug, Clone)]
pub enum StateMatrix {
    /// Row-major (n x n).
    Dense(Vec<f64>),
    Diag(Vec<f64>),
}

impl StateMatrix {
    pub fn dim(&self) -> usize {
        match self {
            StateMatrix::Dense(m) => (m.len() as f64).sqrt() as usize,
            StateMatrix::Diag(d) => d.len(),
        }
    }

    fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        match self {
            StateMatrix::Dense(m) => {
                let n = v.len();
                (0..n)
                    .map(|i| (0..n).map(|j| m[i * n + j] * v[j]).sum())
                    .collect()
            }
            StateMatrix::Diag(d) => d.iter().zip(v).map(|(a, x)| a * x).collect(),
        }
    }
}

/// Continuous-time system h' = A h + B x, y = C h + D x with step size delta.
#[derive(Debug, Clone)]
pub struct SsmParams {
    pub a: StateMatrix,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: f64,
    pub delta: f64,
}

/// Discretized system h_t = A_bar h_{t-1} + B_bar x_t, y_t = C_bar h_t + D x_t.
#[derive(Debug, Clone)]
pub struct DiscreteSsm {
    pub a_bar: StateMatrix,
    pub b_bar: Vec<f64>,
    pub c_bar: Vec<f64>,
    pub d: f64,
}

/// Solve M X = RHS for several right-hand sides, Gaussian elimination with
/// partial pivoting. M is (n x n) row-major, rhs columns are given as rows
/// of `rhs` (k x n). Returns the solutions in the same layout.
fn solve_multi(m: &[f64], n: usize, rhs: &[Vec<f64>]) -> std::result::Result<Vec<Vec<f64>>, SsmError> {
    let k = rhs.len();
    let mut aug = vec![0.0; n * (n + k)];
    for i in 0..n {
        for j in 0..n {
            aug[i * (n + k) + j] = m[i * n + j];
        }
        for (r, col) in rhs.iter().enumerate() {
            aug[i * (n + k) + n + r] = col[i];
        }
    }
    let w = n + k;
    let mut min_pivot = f64::INFINITY;
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&a, &b| {
                aug[a * w + col]
                    .abs()
                    .partial_cmp(&aug[b * w + col].abs())
                    .unwrap()
            })
            .unwrap();
        let pivot = aug[pivot_row * w + col];
        if pivot.abs() < 1e-12 {
            return Err(SsmError::Singular {
                min_pivot: pivot.abs(),
                col,
            });
        }
        min_pivot = min_pivot.min(pivot.abs());
        if pivot_row != col {
            for j in 0..w {
                aug.swap(pivot_row * w + j, col * w + j);
            }
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let f = aug[row * w + col] / aug[col * w + col];
            if f != 0.0 {
                for j in col..w {
                    aug[row * w + j] -= f * aug[col * w + j];
                }
            }
        }
    }
    let mut out = vec![vec![0.0; n]; k];
    for (r, col) in out.iter_mut().enumerate() {
        for i in 0..n {
            col[i] = aug[i * w + n + r] / aug[i * w + i];
        }
    }
    Ok(out)
}

/// Bilinear (Tustin) discretization:
/// A_bar = (I - d/2 A)^-1 (I + d/2 A), B_bar = (I - d/2 A)^-1 d B, C_bar = C.
pub fn discretize_bilinear(p: &SsmParams) -> std::result::Result<DiscreteSsm, SsmError> {
    if p.delta <= 0.0 {
        return Err(SsmError::NonPositiveDelta(p.delta));
    }
    let h = p.delta / 2.0;
    match &p.a {
        StateMatrix::Diag(a) => {
            let mut a_bar = Vec::with_capacity(a.len());
            let mut b_bar = Vec::with_capacity(a.len());
            for (i, &ai) in a.iter().enumerate() {
                let den = 1.0 - h * ai;
                if den.abs() < 1e-12 {
                    return Err(SsmError::Singular {
                        min_pivot: den.abs(),
                        col: i,
                    });
                }
                a_bar.push((1.0 + h * ai) / den);
                b_bar.push(p.delta * p.b[i] / den);
            }
            Ok(DiscreteSsm {
                a_bar: StateMatrix::Diag(a_bar),
                b_bar,
                c_bar: p.c.clone(),
                d: p.d,
            })
        }
        StateMatrix::Dense(a) => {
            let n = p.b.len();
            // left = I - h A, right columns = columns of (I + h A) then delta B
            let mut left = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    left[i * n + j] = if i == j { 1.0 } else { 0.0 } - h * a[i * n + j];
                }
            }
            let mut rhs: Vec<Vec<f64>> = (0..n)
                .map(|j| {
                    (0..n)
                        .map(|i| if i == j { 1.0 } else { 0.0 } + h * a[i * n + j])
                        .collect()
                })
                .collect();
            rhs.push(p.b.iter().map(|bi| p.delta * bi).collect());
            let sol = solve_multi(&left, n, &rhs)?;
            let mut a_bar = vec![0.0; n * n];
            for j in 0..n {
                for i in 0..n {
                    a_bar[i * n + j] = sol[j][i];
                }
            }
            Ok(DiscreteSsm {
                a_bar: StateMatrix::Dense(a_bar),
                b_bar: sol[n].clone(),
                c_bar: p.c.clone(),
                d: p.d,
            })
        }
    }
}

/// Zero-order hold on a diagonal system:
/// a_bar = exp(d a), b_bar = (exp(d a) - 1)/a * b, with b_bar -> d*b as a -> 0.
pub fn discretize_zoh(p: &SsmParams) -> std::result::Result<DiscreteSsm, SsmError> {
    if p.delta < 0.0 {
        return Err(SsmError::NonPositiveDelta(p.delta));
    }
    let a = match &p.a {
        StateMatrix::Diag(a) => a,
        StateMatrix::Dense(_) => return Err(SsmError::NotDiagonal),
    };
    let mut a_bar = Vec::with_capacity(a.len());
    let mut b_bar = Vec::with_capacity(a.len());
    for (i, &ai) in a.iter().enumerate() {
        let da = p.delta * ai;
        a_bar.push(da.exp());
        let factor = if ai.abs() < 1e-12 {
            p.delta
        } else {
            da.exp_m1() / ai
        };
        b_bar.push(factor * p.b[i]);
    }
    Ok(DiscreteSsm {
        a_bar: StateMatrix::Diag(a_bar),
        b_bar,
        c_bar: p.c.clone(),
        d: p.d,
    })
}

impl DiscreteSsm {
    /// Recurrent evaluation with h_0 = 0.
    pub fn scan_recurrent(&self, x: &[f64]) -> Vec<f64> {
        let n = self.b_bar.len();
        let mut h = vec![0.0; n];
        let mut y = Vec::with_capacity(x.len());
        for &xt in x {
            let mut hn = self.a_bar.mul_vec(&h);
            for i in 0..n {
                hn[i] += self.b_bar[i] * xt;
            }
            h = hn;
            let out: f64 = self.c_bar.iter().zip(&h).map(|(c, hi)| c * hi).sum();
            y.push(out + self.d * xt);
        }
        y
    }

    /// Convolutional kernel K[j] = C A^j B of length l.
    pub fn build_kernel(&self, l: usize) -> Vec<f64> {
        assert!(l >= 1);
        let mut v = self.b_bar.clone();
        let mut k = Vec::with_capacity(l);
        for j in 0..l {
            k.push(self.c_bar.iter().zip(&v).map(|(c, vi)| c * vi).sum());
            if j + 1 < l {
                v = self.a_bar.mul_vec(&v);
            }
        }
        k
    }

    /// Spectral radius of a_bar in diagonal mode.
    pub fn diag_radius(&self) -> Option<f64> {
        match &self.a_bar {
            StateMatrix::Diag(d) => Some(d.iter().map(|v| v.abs()).fold(0.0, f64::max)),
            StateMatrix::Dense(_) => None,
        }
    }
}

/// Causal convolution y_t = sum_{j<=t} k[j] x_{t-j} (+ d x_t skip).
pub fn apply_kernel(kernel: &[f64], x: &[f64], d: f64) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (t, out) in y.iter_mut().enumerate() {
        let mut acc = d * x[t];
        for j in 0..=t.min(kernel.len() - 1) {
            acc += kernel[j] * x[t - j];
        }
        *out = acc;
    }
    y
}

/// Input-dependent scan parameters for one Mamba inner width.
///
/// delta_t = softplus(x_t W_delta + b_delta), B_t = x_t W_b + b_b,
/// C_t = x_t W_c + b_c; the state decay is A = -softplus(a_raw) per
/// (channel, state).
#[derive(Debug, Clone)]
pub struct SelectiveParams {
    pub a_raw: PId,
    pub w_delta: PId,
    pub b_delta: PId,
    pub w_b: PId,
    pub b_b: PId,
    pub w_c: PId,
    pub b_c: PId,
    pub d_skip: PId,
    pub d_inner: usize,
    pub d_state: usize,
}

impl SelectiveParams {
    pub fn new(
        ps: &mut ParamSet,
        prefix: &str,
        d_inner: usize,
        d_state: usize,
        rng: &mut impl Rng,
    ) -> Self {
        // -a spans [1, d_state] log-uniformly along the state axis
        let mut a_raw = Vec::with_capacity(d_inner * d_state);
        for _ in 0..d_inner {
            for s in 0..d_state {
                let frac = if d_state > 1 {
                    s as f64 / (d_state - 1) as f64
                } else {
                    0.0
                };
                let neg_a = (frac * (d_state as f64).ln()).exp();
                a_raw.push(softplus_inverse(neg_a));
            }
        }
        // softplus(b_delta) lands log-uniformly in [1e-3, 1e-1]
        let b_delta: Vec<f64> = (0..d_inner)
            .map(|_| {
                let dt = (rng.gen_range(1e-3f64.ln()..1e-1f64.ln())).exp();
                softplus_inverse(dt)
            })
            .collect();
        SelectiveParams {
            a_raw: ps.add(
                format!("{prefix}.a_raw"),
                Tensor::new(vec![d_inner, d_state], a_raw),
            ),
            w_delta: ps.add(
                format!("{prefix}.w_delta"),
                uniform_init(&[d_inner, d_inner], d_inner, rng),
            ),
            b_delta: ps.add(format!("{prefix}.b_delta"), Tensor::from_vec(b_delta)),
            w_b: ps.add(
                format!("{prefix}.w_b"),
                uniform_init(&[d_inner, d_state], d_inner, rng),
            ),
            b_b: ps.add(format!("{prefix}.b_b"), Tensor::zeros(&[d_state])),
            w_c: ps.add(
                format!("{prefix}.w_c"),
                uniform_init(&[d_inner, d_state], d_inner, rng),
            ),
            b_c: ps.add(format!("{prefix}.b_c"), Tensor::zeros(&[d_state])),
            d_skip: ps.add(format!("{prefix}.d_skip"), Tensor::ones(&[d_inner])),
            d_inner,
            d_state,
        }
    }

    /// Selective scan of a (L x d_inner) sequence.
    pub fn forward(&self, tape: &mut Tape, pv: &[Var], x: Var) -> NumResult<Var> {
        let pre_delta = tape.linear(x, pv[self.w_delta.index()], pv[self.b_delta.index()])?;
        let delta = tape.softplus(pre_delta);
        let b_seq = tape.linear(x, pv[self.w_b.index()], pv[self.b_b.index()])?;
        let c_seq = tape.linear(x, pv[self.w_c.index()], pv[self.b_c.index()])?;
        let sp = tape.softplus(pv[self.a_raw.index()]);
        let a_diag = tape.scale(sp, -1.0);
        tape.selective_scan(x, delta, a_diag, b_seq, c_seq, pv[self.d_skip.index()])
    }
}

/// Gated Mamba block with pre-normalization and a residual connection.
#[derive(Debug, Clone)]
pub struct MambaBlock {
    pub ln_gamma: PId,
    pub ln_beta: PId,
    pub w_in: PId,
    pub b_in: PId,
    pub conv_w: PId,
    pub conv_b: PId,
    pub selective: SelectiveParams,
    pub w_out: PId,
    pub b_out: PId,
    pub dim: usize,
    pub d_inner: usize,
    pub conv_width: usize,
}

impl MambaBlock {
    pub fn new(
        ps: &mut ParamSet,
        prefix: &str,
        dim: usize,
        d_state: usize,
        conv_width: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let d_inner = 2 * dim;
        MambaBlock {
            ln_gamma: ps.add(format!("{prefix}.ln.gamma"), Tensor::ones(&[dim])),
            ln_beta: ps.add(format!("{prefix}.ln.beta"), Tensor::zeros(&[dim])),
            w_in: ps.add(
                format!("{prefix}.w_in"),
                uniform_init(&[dim, 2 * d_inner], dim, rng),
            ),
            b_in: ps.add(format!("{prefix}.b_in"), Tensor::zeros(&[2 * d_inner])),
            conv_w: ps.add(
                format!("{prefix}.conv_w"),
                uniform_init(&[d_inner, conv_width], conv_width, rng),
            ),
            conv_b: ps.add(format!("{prefix}.conv_b"), Tensor::zeros(&[d_inner])),
            selective: SelectiveParams::new(
                ps,
                &format!("{prefix}.sel"),
                d_inner,
                d_state,
                rng,
            ),
            w_out: ps.add(
                format!("{prefix}.w_out"),
                uniform_init(&[d_inner, dim], d_inner, rng),
            ),
            b_out: ps.add(format!("{prefix}.b_out"), Tensor::zeros(&[dim])),
            dim,
            d_inner,
            conv_width,
        }
    }

    /// (L x dim) -> (L x dim), causal.
    pub fn forward(&self, tape: &mut Tape, pv: &[Var], x: Var) -> NumResult<Var> {
        let normed = tape.layer_norm(x);
        let normed = tape.row_mul(normed, pv[self.ln_gamma.index()])?;
        let normed = tape.add_bias(normed, pv[self.ln_beta.index()])?;
        let proj = tape.linear(normed, pv[self.w_in.index()], pv[self.b_in.index()])?;
        let u = tape.slice(proj, 1, 0, self.d_inner)?;
        let gate = tape.slice(proj, 1, self.d_inner, self.d_inner)?;
        let u = tape.causal_conv1d(u, pv[self.conv_w.index()], pv[self.conv_b.index()])?;
        let u = tape.silu(u);
        let scanned = self.selective.forward(tape, pv, u)?;
        let gate = tape.silu(gate);
        let gated = tape.mul(scanned, gate)?;
        let out = tape.linear(gated, pv[self.w_out.index()], pv[self.b_out.index()])?;
        tape.add(x, out)
    }
}

/// forward(x) + reverse(backward(reverse(x))); both blocks carry their own
/// residual paths.
pub fn bidirectional_scan(
    tape: &mut Tape,
    pv: &[Var],
    forward: &MambaBlock,
    backward: &MambaBlock,
    x: Var,
) -> NumResult<Var> {
    let fwd = forward.forward(tape, pv, x)?;
    let rev_in = tape.reverse(x, 0)?;
    let bwd = backward.forward(tape, pv, rev_in)?;
    let bwd = tape.reverse(bwd, 0)?;
    tape.add(fwd, bwd)
}
