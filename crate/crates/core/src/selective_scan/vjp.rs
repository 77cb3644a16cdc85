use num_traits::Float;

use super::ScanLane;

/// Gradients of `Σ_t dy_t·y_t` with respect to every lane input.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneGrads<T> {
    pub abar: Vec<T>,
    pub bx: Vec<T>,
    pub c: Vec<T>,
    pub x_raw: Vec<T>,
    pub d_skip: T,
}

/// Reverse pass of the diagonal recurrence.
///
/// The adjoint runs backwards from `λ_{T+1} = 0`:
/// `λ_t = C_t·dy_t + Ā_{t+1} ⊙ λ_{t+1}`. States are recomputed forward.
pub fn scan_vjp<T: Float>(lane: &ScanLane<T>, dy: &[T]) -> LaneGrads<T> {
    lane.check();
    assert_eq!(dy.len(), lane.len, "dy length");
    let n = lane.state;
    let len = lane.len;
    let hs = lane.states();

    let mut d_abar = vec![T::zero(); len * n];
    let mut d_bx = vec![T::zero(); len * n];
    let mut d_c = vec![T::zero(); len * n];
    let mut lambda = vec![T::zero(); n];
    for t in (0..len).rev() {
        let c = &lane.c[t * n..(t + 1) * n];
        for s in 0..n {
            let carry = if t + 1 < len {
                lane.abar[(t + 1) * n + s] * lambda[s]
            } else {
                T::zero()
            };
            lambda[s] = c[s] * dy[t] + carry;
            d_bx[t * n + s] = lambda[s];
            let h_prev = if t == 0 { T::zero() } else { hs[(t - 1) * n + s] };
            d_abar[t * n + s] = lambda[s] * h_prev;
            d_c[t * n + s] = dy[t] * hs[t * n + s];
        }
    }
    let x_raw = dy.iter().map(|&g| lane.d_skip * g).collect();
    let d_skip = dy
        .iter()
        .zip(&lane.x_raw)
        .fold(T::zero(), |acc, (&g, &x)| acc + g * x);
    LaneGrads {
        abar: d_abar,
        bx: d_bx,
        c: d_c,
        x_raw,
        d_skip,
    }
}
