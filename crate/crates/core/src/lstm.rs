//! Kernels for one LSTM direction over a batch of univariate series:
//! forward with saved activations, and backpropagation through time.
//!
//! Gate order inside the `4H` pre-activation is input, forget, cell, output.

use alloc::vec;
use alloc::vec::Vec;

use crate::array::matmul_into;
use crate::real::Real;

/// Saved forward state, indexed by time step `t` (not processing order).
#[derive(Debug)]
pub(crate) struct LstmCache<F> {
    /// `T × n × 4H` post-activation gates.
    pub gates: Vec<F>,
    /// `T × n × H` cell states.
    pub cells: Vec<F>,
    /// `T × n × H` tanh of the cell states.
    pub cell_tanh: Vec<F>,
    /// `T × n × H` hidden states.
    pub hidden: Vec<F>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Dims {
    pub n: usize,
    pub steps: usize,
    pub hidden: usize,
    pub reverse: bool,
}

impl Dims {
    fn time(&self, k: usize) -> usize {
        if self.reverse {
            self.steps - 1 - k
        } else {
            k
        }
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// `x` is `n × T`, `w_ih` is `1 × 4H`, `w_hh` is `H × 4H`, `b` is `1 × 4H`.
pub(crate) fn forward<F: Real>(x: &[F], w_ih: &[F], w_hh: &[F], b: &[F], d: Dims) -> LstmCache<F> {
    let (n, h) = (d.n, d.hidden);
    let g4 = 4 * h;
    let mut gates = vec![F::zero(); d.steps * n * g4];
    let mut cells = vec![F::zero(); d.steps * n * h];
    let mut cell_tanh = vec![F::zero(); d.steps * n * h];
    let mut hidden = vec![F::zero(); d.steps * n * h];
    let mut z = vec![F::zero(); n * g4];
    for k in 0..d.steps {
        let t = d.time(k);
        let prev = (k > 0).then(|| d.time(k - 1));
        match prev {
            Some(p) => matmul_into(&hidden[p * n * h..(p + 1) * n * h], w_hh, &mut z, n, h, g4, false, false),
            None => z.iter_mut().for_each(|v| *v = F::zero()),
        }
        for r in 0..n {
            let xv = x[r * d.steps + t];
            let zr = &z[r * g4..(r + 1) * g4];
            let gr = &mut gates[(t * n + r) * g4..(t * n + r + 1) * g4];
            for j in 0..g4 {
                let pre = zr[j] + xv * w_ih[j] + b[j];
                gr[j] = if (2 * h..3 * h).contains(&j) { pre.tanh() } else { sigmoid(pre) };
            }
            for j in 0..h {
                let (i, f, g, o) = (gr[j], gr[h + j], gr[2 * h + j], gr[3 * h + j]);
                let c_prev = prev.map_or(F::zero(), |p| cells[(p * n + r) * h + j]);
                let c = f * c_prev + i * g;
                let idx = (t * n + r) * h + j;
                cells[idx] = c;
                cell_tanh[idx] = c.tanh();
                hidden[idx] = o * cell_tanh[idx];
            }
        }
    }
    LstmCache { gates, cells, cell_tanh, hidden }
}

/// Parameter and input gradients of one direction.
pub(crate) struct LstmGrads {
    pub w_ih: Vec<f64>,
    pub w_hh: Vec<f64>,
    pub b: Vec<f64>,
    pub x: Vec<f64>,
}

/// `dh_out(t, r, j)` is the upstream gradient of hidden unit `j` of row `r`
/// at time `t`.
pub(crate) fn backward<F: Real>(
    x: &[F],
    w_ih: &[F],
    w_hh: &[F],
    cache: &LstmCache<F>,
    d: Dims,
    dh_out: impl Fn(usize, usize, usize) -> F,
) -> LstmGrads {
    let (n, h) = (d.n, d.hidden);
    let g4 = 4 * h;
    let mut out = LstmGrads { w_ih: vec![0.0; g4], w_hh: vec![0.0; h * g4], b: vec![0.0; g4], x: vec![0.0; n * d.steps] };
    let mut dh_next = vec![F::zero(); n * h];
    let mut dc_next = vec![0.0f64; n * h];
    let mut dz = vec![F::zero(); n * g4];
    let mut tmp = vec![F::zero(); h * g4];
    for k in (0..d.steps).rev() {
        let t = d.time(k);
        let prev = (k > 0).then(|| d.time(k - 1));
        for r in 0..n {
            let gr = &cache.gates[(t * n + r) * g4..(t * n + r + 1) * g4];
            for j in 0..h {
                let (i, f, g, o) = (gr[j].f64(), gr[h + j].f64(), gr[2 * h + j].f64(), gr[3 * h + j].f64());
                let idx = r * h + j;
                let dh = dh_out(t, r, j).f64() + dh_next[idx].f64();
                let tc = cache.cell_tanh[(t * n + r) * h + j].f64();
                let d_o = dh * tc;
                let dc = dc_next[idx] + dh * o * (1.0 - tc * tc);
                let c_prev = prev.map_or(0.0, |p| cache.cells[(p * n + r) * h + j].f64());
                dc_next[idx] = dc * f;
                let zr = &mut dz[r * g4..(r + 1) * g4];
                zr[j] = F::of(dc * g * i * (1.0 - i));
                zr[h + j] = F::of(dc * c_prev * f * (1.0 - f));
                zr[2 * h + j] = F::of(dc * i * (1.0 - g * g));
                zr[3 * h + j] = F::of(d_o * o * (1.0 - o));
            }
            let xv = x[r * d.steps + t].f64();
            let mut dx = 0.0;
            for (j, &v) in dz[r * g4..(r + 1) * g4].iter().enumerate() {
                let v = v.f64();
                out.b[j] += v;
                out.w_ih[j] += xv * v;
                dx += v * w_ih[j].f64();
            }
            out.x[r * d.steps + t] = dx;
        }
        match prev {
            Some(p) => {
                let h_prev = &cache.hidden[p * n * h..(p + 1) * n * h];
                matmul_into(h_prev, &dz, &mut tmp, h, n, g4, true, false);
                for (a, &v) in out.w_hh.iter_mut().zip(&tmp) {
                    *a += v.f64();
                }
                matmul_into(&dz, w_hh, &mut dh_next, n, g4, h, false, true);
            }
            None => dh_next.iter_mut().for_each(|v| *v = F::zero()),
        }
    }
    out
}
