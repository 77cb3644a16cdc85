use num_traits::Float;

use crate::linalg::ceil_log2;

/// One `(batch, channel)` sequence of discretized recurrence inputs.
///
/// All per-step arrays are `len x state`, step-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanLane<T> {
    pub len: usize,
    pub state: usize,
    pub abar: Vec<T>,
    pub bx: Vec<T>,
    pub c: Vec<T>,
    pub x_raw: Vec<T>,
    pub d_skip: T,
}

impl<T: Float> ScanLane<T> {
    pub fn check(&self) {
        let n = self.len * self.state;
        assert!(self.len >= 1, "scan lane must have at least one step");
        assert_eq!(self.abar.len(), n, "abar shape");
        assert_eq!(self.bx.len(), n, "bx shape");
        assert_eq!(self.c.len(), n, "c shape");
        assert_eq!(self.x_raw.len(), self.len, "x_raw shape");
    }

    #[inline]
    fn readout(&self, t: usize, h: &[T]) -> T {
        let c = &self.c[t * self.state..(t + 1) * self.state];
        let dot = c.iter().zip(h).fold(T::zero(), |acc, (&c, &h)| acc + c * h);
        dot + self.d_skip * self.x_raw[t]
    }

    /// Hidden states `h_1..h_T` (step-major) from the sequential recurrence.
    pub fn states(&self) -> Vec<T> {
        let n = self.state;
        let mut hs = Vec::with_capacity(self.len * n);
        let mut h = vec![T::zero(); n];
        for t in 0..self.len {
            let a = &self.abar[t * n..(t + 1) * n];
            let b = &self.bx[t * n..(t + 1) * n];
            for s in 0..n {
                h[s] = a[s] * h[s] + b[s];
            }
            hs.extend_from_slice(&h);
        }
        hs
    }
}

/// `h_t = Ā_t ⊙ h_{t-1} + B̄x_t`, `y_t = ⟨C_t, h_t⟩ + D·x_t`, from `h_0 = 0`.
pub fn scan_sequential<T: Float>(lane: &ScanLane<T>) -> Vec<T> {
    lane.check();
    let n = lane.state;
    let mut h = vec![T::zero(); n];
    let mut y = Vec::with_capacity(lane.len);
    for t in 0..lane.len {
        let a = &lane.abar[t * n..(t + 1) * n];
        let b = &lane.bx[t * n..(t + 1) * n];
        for s in 0..n {
            h[s] = a[s] * h[s] + b[s];
        }
        y.push(lane.readout(t, &h));
    }
    y
}

/// An element of the recurrence monoid: the affine map `h -> a ⊙ h + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanElement<T> {
    pub a: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Float> ScanElement<T> {
    pub fn identity(state: usize) -> Self {
        Self {
            a: vec![T::one(); state],
            b: vec![T::zero(); state],
        }
    }
}

/// `earlier ⊕ later = (a_later ⊙ a_earlier, a_later ⊙ b_earlier + b_later)`.
pub fn combine<T: Float>(earlier: &ScanElement<T>, later: &ScanElement<T>) -> ScanElement<T> {
    let mut out = later.clone();
    combine_into(&earlier.a, &earlier.b, &mut out.a, &mut out.b);
    out
}

/// In-place `later := earlier ⊕ later`.
#[inline]
fn combine_into<T: Float>(ea: &[T], eb: &[T], la: &mut [T], lb: &mut [T]) {
    for s in 0..la.len() {
        lb[s] = la[s] * eb[s] + lb[s];
        la[s] = la[s] * ea[s];
    }
}

/// Sequential combine rounds of the up-sweep plus down-sweep.
pub fn parallel_depth(len: usize) -> usize {
    2 * ceil_log2(len) as usize
}

/// Work-efficient (Blelloch) scan over the recurrence monoid.
///
/// The sequence is padded with identity elements to the next power of two.
/// The inclusive prefix at step `t` is read from the exclusive prefix at
/// `t + 1` (or the saved root for the last slot), so the round count is
/// exactly `2·ceil(log2 T)`. Returns the outputs and that round count.
pub fn scan_parallel<T: Float>(lane: &ScanLane<T>) -> (Vec<T>, usize) {
    lane.check();
    let n = lane.state;
    let len = lane.len;
    let padded = len.next_power_of_two();
    let levels = ceil_log2(len) as usize;

    let mut a = vec![T::one(); padded * n];
    let mut b = vec![T::zero(); padded * n];
    a[..len * n].copy_from_slice(&lane.abar);
    b[..len * n].copy_from_slice(&lane.bx);

    let mut rounds = 0;
    // Up-sweep: node i accumulates its left sibling subtree.
    for level in 0..levels {
        let stride = 1 << (level + 1);
        let half = stride / 2;
        let mut i = stride - 1;
        while i < padded {
            let left = i - half;
            let (lo, hi) = split_pair(&mut a, &mut b, left, i, n);
            combine_into(lo.0, lo.1, hi.0, hi.1);
            i += stride;
        }
        rounds += 1;
    }

    let root_b = b[(padded - 1) * n..].to_vec();
    a[(padded - 1) * n..].fill(T::one());
    b[(padded - 1) * n..].fill(T::zero());

    // Down-sweep: left child takes the parent's prefix, right child takes
    // the parent's prefix followed by the left subtree total.
    for level in (0..levels).rev() {
        let stride = 1 << (level + 1);
        let half = stride / 2;
        let mut i = stride - 1;
        while i < padded {
            let left = i - half;
            let left_a = a[left * n..(left + 1) * n].to_vec();
            let left_b = b[left * n..(left + 1) * n].to_vec();
            a.copy_within(i * n..(i + 1) * n, left * n);
            b.copy_within(i * n..(i + 1) * n, left * n);
            // parent prefix (now also at `left`) ⊕ left subtree total
            let mut na = left_a;
            let mut nb = left_b;
            combine_into(&a[left * n..(left + 1) * n], &b[left * n..(left + 1) * n], &mut na, &mut nb);
            a[i * n..(i + 1) * n].copy_from_slice(&na);
            b[i * n..(i + 1) * n].copy_from_slice(&nb);
            i += stride;
        }
        rounds += 1;
    }

    let mut y = Vec::with_capacity(len);
    for t in 0..len {
        let h = if t + 1 < padded {
            &b[(t + 1) * n..(t + 2) * n]
        } else {
            &root_b[..]
        };
        y.push(lane.readout(t, h));
    }
    (y, rounds)
}

type Pair<'a, T> = (&'a [T], &'a [T]);
type PairMut<'a, T> = (&'a mut [T], &'a mut [T]);

/// Borrows element `lo` immutably and element `hi` mutably (`lo < hi`).
fn split_pair<'a, T>(
    a: &'a mut [T],
    b: &'a mut [T],
    lo: usize,
    hi: usize,
    n: usize,
) -> (Pair<'a, T>, PairMut<'a, T>) {
    let (a_lo, a_hi) = a.split_at_mut(hi * n);
    let (b_lo, b_hi) = b.split_at_mut(hi * n);
    (
        (&a_lo[lo * n..(lo + 1) * n], &b_lo[lo * n..(lo + 1) * n]),
        (&mut a_hi[..n], &mut b_hi[..n]),
    )
}

/// Reverses a step-major sequence of `width`-wide records.
pub fn reverse_sequence<T: Copy>(seq: &[T], width: usize) -> Vec<T> {
    assert!(width > 0 && seq.len() % width == 0);
    seq.chunks_exact(width).rev().flatten().copied().collect()
}
