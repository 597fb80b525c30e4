//! Minimal dense-layer toolkit with explicit backward passes.
//!
//! Activations are channel-last maps; convolution weights are laid out
//! `[tap][in][out]` so the innermost loops run over contiguous output
//! channels.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::{Float, FromPrimitive};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::seed::Rng;

pub trait Real:
    Float + FromPrimitive + Sum + AddAssign + MulAssign + Send + Sync + Debug + Default + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }
    fn f64(self) -> f64 {
        self.to_f64().expect("finite")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Channel-last activation map.
#[derive(Clone, Debug, PartialEq)]
pub struct Act<F> {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<F>,
}

impl<F: Real> Act<F> {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![F::zero(); h * w * c],
        }
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn px(&self, p: usize) -> &[F] {
        &self.data[p * self.c..(p + 1) * self.c]
    }

    pub fn add_assign(&mut self, other: &Act<F>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

#[inline]
fn axpy<F: Real>(out: &mut [F], a: F, x: &[F]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += a * *v;
    }
}

#[inline]
fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

pub fn silu<F: Real>(x: &Act<F>) -> Act<F> {
    Act {
        data: x.data.iter().map(|&v| v * sigmoid(v)).collect(),
        ..*x
    }
}

pub fn silu_vec<F: Real>(x: &[F]) -> Vec<F> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

#[inline]
fn silu_grad<F: Real>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::one() + x * (F::one() - s))
}

/// `dx = dout * silu'(x)`.
pub fn silu_backward<F: Real>(x: &Act<F>, dout: &Act<F>) -> Act<F> {
    Act {
        data: x
            .data
            .iter()
            .zip(&dout.data)
            .map(|(&v, &d)| d * silu_grad(v))
            .collect(),
        ..*x
    }
}

pub fn silu_vec_backward<F: Real>(x: &[F], dout: &[F]) -> Vec<F> {
    x.iter().zip(dout).map(|(&v, &d)| d * silu_grad(v)).collect()
}

/// Same-padding 3x3 convolution. `weight` is `[9][cin][cout]`.
pub fn conv3x3<F: Real>(x: &Act<F>, weight: &[F], bias: &[F]) -> Act<F> {
    let cout = bias.len();
    let cin = x.c;
    debug_assert_eq!(weight.len(), 9 * cin * cout);
    let (h, w) = (x.h, x.w);
    let mut out = Act::zeros(h, w, cout);
    for y in 0..h {
        for xx in 0..w {
            let o = &mut out.data[(y * w + xx) * cout..(y * w + xx + 1) * cout];
            o.copy_from_slice(bias);
            for ky in 0..3 {
                let sy = y + ky;
                if sy < 1 || sy > h {
                    continue;
                }
                let sy = sy - 1;
                for kx in 0..3 {
                    let sx = xx + kx;
                    if sx < 1 || sx > w {
                        continue;
                    }
                    let sx = sx - 1;
                    let input = &x.data[(sy * w + sx) * cin..(sy * w + sx + 1) * cin];
                    let tap = &weight[(ky * 3 + kx) * cin * cout..(ky * 3 + kx + 1) * cin * cout];
                    for (&v, wrow) in input.iter().zip(tap.chunks_exact(cout)) {
                        axpy(o, v, wrow);
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `need_dx`.
pub fn conv3x3_backward<F: Real>(
    x: &Act<F>,
    weight: &[F],
    dout: &Act<F>,
    dweight: &mut [F],
    dbias: &mut [F],
    need_dx: bool,
) -> Option<Act<F>> {
    let cout = dout.c;
    let cin = x.c;
    let (h, w) = (x.h, x.w);
    // [tap][cout][cin] for the input-gradient axpy.
    let transposed: Vec<F> = if need_dx {
        let mut t = vec![F::zero(); weight.len()];
        for tap in 0..9 {
            for ci in 0..cin {
                for co in 0..cout {
                    t[(tap * cout + co) * cin + ci] = weight[(tap * cin + ci) * cout + co];
                }
            }
        }
        t
    } else {
        Vec::new()
    };
    let mut dx = need_dx.then(|| Act::zeros(h, w, cin));
    for y in 0..h {
        for xx in 0..w {
            let d = &dout.data[(y * w + xx) * cout..(y * w + xx + 1) * cout];
            for (b, &g) in dbias.iter_mut().zip(d) {
                *b += g;
            }
            for ky in 0..3 {
                let sy = y + ky;
                if sy < 1 || sy > h {
                    continue;
                }
                let sy = sy - 1;
                for kx in 0..3 {
                    let sx = xx + kx;
                    if sx < 1 || sx > w {
                        continue;
                    }
                    let sx = sx - 1;
                    let tap = ky * 3 + kx;
                    let src = (sy * w + sx) * cin;
                    let input = &x.data[src..src + cin];
                    let dw = &mut dweight[tap * cin * cout..(tap + 1) * cin * cout];
                    for (&v, dwrow) in input.iter().zip(dw.chunks_exact_mut(cout)) {
                        axpy(dwrow, v, d);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let di = &mut dx.data[src..src + cin];
                        let wt = &transposed[tap * cout * cin..(tap + 1) * cout * cin];
                        for (&g, wrow) in d.iter().zip(wt.chunks_exact(cin)) {
                            axpy(di, g, wrow);
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Pointwise linear map. `weight` is `[cin][cout]`.
pub fn conv1x1<F: Real>(x: &Act<F>, weight: &[F], bias: &[F]) -> Act<F> {
    let cout = bias.len();
    debug_assert_eq!(weight.len(), x.c * cout);
    let mut out = Act::zeros(x.h, x.w, cout);
    for (o, input) in out.data.chunks_exact_mut(cout).zip(x.data.chunks_exact(x.c)) {
        o.copy_from_slice(bias);
        for (&v, wrow) in input.iter().zip(weight.chunks_exact(cout)) {
            axpy(o, v, wrow);
        }
    }
    out
}

pub fn conv1x1_backward<F: Real>(
    x: &Act<F>,
    weight: &[F],
    dout: &Act<F>,
    dweight: &mut [F],
    dbias: &mut [F],
    need_dx: bool,
) -> Option<Act<F>> {
    let (cin, cout) = (x.c, dout.c);
    let mut dx = need_dx.then(|| Act::zeros(x.h, x.w, cin));
    for (p, (input, d)) in x
        .data
        .chunks_exact(cin)
        .zip(dout.data.chunks_exact(cout))
        .enumerate()
    {
        for (b, &g) in dbias.iter_mut().zip(d) {
            *b += g;
        }
        for (&v, dwrow) in input.iter().zip(dweight.chunks_exact_mut(cout)) {
            axpy(dwrow, v, d);
        }
        if let Some(dx) = dx.as_mut() {
            let di = &mut dx.data[p * cin..(p + 1) * cin];
            for (dv, wrow) in di.iter_mut().zip(weight.chunks_exact(cout)) {
                *dv = wrow.iter().zip(d).map(|(&a, &b)| a * b).sum();
            }
        }
    }
    dx
}

/// Dense layer on a vector. `weight` is `[in][out]`.
pub fn linear<F: Real>(x: &[F], weight: &[F], bias: &[F]) -> Vec<F> {
    let mut out = bias.to_vec();
    for (&v, wrow) in x.iter().zip(weight.chunks_exact(bias.len())) {
        axpy(&mut out, v, wrow);
    }
    out
}

pub fn linear_backward<F: Real>(
    x: &[F],
    weight: &[F],
    dout: &[F],
    dweight: &mut [F],
    dbias: &mut [F],
) -> Vec<F> {
    for (b, &g) in dbias.iter_mut().zip(dout) {
        *b += g;
    }
    let cout = dout.len();
    for (&v, dwrow) in x.iter().zip(dweight.chunks_exact_mut(cout)) {
        axpy(dwrow, v, dout);
    }
    weight
        .chunks_exact(cout)
        .map(|wrow| wrow.iter().zip(dout).map(|(&a, &b)| a * b).sum())
        .collect()
}

/// 2x2 average pooling.
pub fn avg_pool2<F: Real>(x: &Act<F>) -> Act<F> {
    let (oh, ow, c) = (x.h / 2, x.w / 2, x.c);
    let quarter = F::of(0.25);
    let mut out = Act::zeros(oh, ow, c);
    for y in 0..oh {
        for xx in 0..ow {
            let o = &mut out.data[(y * ow + xx) * c..(y * ow + xx + 1) * c];
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let s = ((2 * y + dy) * x.w + 2 * xx + dx) * c;
                axpy(o, quarter, &x.data[s..s + c]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward<F: Real>(dout: &Act<F>, h: usize, w: usize) -> Act<F> {
    let c = dout.c;
    let quarter = F::of(0.25);
    let mut dx = Act::zeros(h, w, c);
    for y in 0..h {
        for xx in 0..w {
            let s = ((y / 2) * dout.w + xx / 2) * c;
            let d = &mut dx.data[(y * w + xx) * c..(y * w + xx + 1) * c];
            axpy(d, quarter, &dout.data[s..s + c]);
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<F: Real>(x: &Act<F>) -> Act<F> {
    let (oh, ow, c) = (x.h * 2, x.w * 2, x.c);
    let mut out = Act::zeros(oh, ow, c);
    for y in 0..oh {
        for xx in 0..ow {
            let s = ((y / 2) * x.w + xx / 2) * c;
            out.data[(y * ow + xx) * c..(y * ow + xx + 1) * c].copy_from_slice(&x.data[s..s + c]);
        }
    }
    out
}

pub fn upsample2_backward<F: Real>(dout: &Act<F>) -> Act<F> {
    let (h, w, c) = (dout.h / 2, dout.w / 2, dout.c);
    let mut dx = Act::zeros(h, w, c);
    for y in 0..dout.h {
        for xx in 0..dout.w {
            let s = (y * dout.w + xx) * c;
            let d = &mut dx.data[((y / 2) * w + xx / 2) * c..((y / 2) * w + xx / 2 + 1) * c];
            axpy(d, F::one(), &dout.data[s..s + c]);
        }
    }
    dx
}

/// Channel concatenation `[a, b]`.
pub fn concat<F: Real>(a: &Act<F>, b: &Act<F>) -> Act<F> {
    debug_assert_eq!((a.h, a.w), (b.h, b.w));
    let c = a.c + b.c;
    let mut data = Vec::with_capacity(a.pixels() * c);
    for (pa, pb) in a.data.chunks_exact(a.c).zip(b.data.chunks_exact(b.c)) {
        data.extend_from_slice(pa);
        data.extend_from_slice(pb);
    }
    Act { h: a.h, w: a.w, c, data }
}

/// Inverse of [`concat`] for gradients.
pub fn split<F: Real>(x: &Act<F>, ca: usize) -> (Act<F>, Act<F>) {
    let cb = x.c - ca;
    let mut a = Vec::with_capacity(x.pixels() * ca);
    let mut b = Vec::with_capacity(x.pixels() * cb);
    for px in x.data.chunks_exact(x.c) {
        a.extend_from_slice(&px[..ca]);
        b.extend_from_slice(&px[ca..]);
    }
    (
        Act { h: x.h, w: x.w, c: ca, data: a },
        Act { h: x.h, w: x.w, c: cb, data: b },
    )
}

/// `y = x * (1 + scale[c]) + shift[c]`.
pub fn scale_shift<F: Real>(x: &Act<F>, scale: &[F], shift: &[F]) -> Act<F> {
    let mut out = x.clone();
    for px in out.data.chunks_exact_mut(x.c) {
        for ((v, &s), &b) in px.iter_mut().zip(scale).zip(shift) {
            *v = *v * (F::one() + s) + b;
        }
    }
    out
}

/// Returns `(dx, dscale, dshift)`.
pub fn scale_shift_backward<F: Real>(
    x: &Act<F>,
    scale: &[F],
    dout: &Act<F>,
) -> (Act<F>, Vec<F>, Vec<F>) {
    let c = x.c;
    let mut dx = dout.clone();
    let mut ds = vec![F::zero(); c];
    let mut db = vec![F::zero(); c];
    for (dpx, xpx) in dx.data.chunks_exact_mut(c).zip(x.data.chunks_exact(c)) {
        for ch in 0..c {
            let g = dpx[ch];
            ds[ch] += g * xpx[ch];
            db[ch] += g;
            dpx[ch] = g * (F::one() + scale[ch]);
        }
    }
    (dx, ds, db)
}

/// Fill with `N(0, std^2)` draws.
pub fn normal_fill<F: Real>(data: &mut [F], std: f64, rng: &mut Rng) {
    for v in data {
        let z: f64 = rng.sample(StandardNormal);
        *v = F::of(z * std);
    }
}

/// Named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

/// Ordered collection of parameter tensors; gradients, optimizer moments
/// and EMA shadows share the same layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<F> {
    pub tensors: Vec<Param<F>>,
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            tensors: Vec::new(),
        }
    }

    /// Append a zero tensor and return its index.
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        let len = shape.iter().product();
        self.tensors.push(Param {
            name: name.into(),
            shape: shape.to_vec(),
            data: vec![F::zero(); len],
        });
        self.tensors.len() - 1
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: vec![F::zero(); p.data.len()],
                })
                .collect(),
        }
    }

    pub fn get(&self, i: usize) -> &[F] {
        &self.tensors[i].data
    }

    pub fn get_mut(&mut self, i: usize) -> &mut [F] {
        &mut self.tensors[i].data
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|p| p.data.len()).sum()
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn values(&self) -> impl Iterator<Item = &F> {
        self.tensors.iter().flat_map(|p| p.data.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut F> {
        self.tensors.iter_mut().flat_map(|p| p.data.iter_mut())
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, factor: F) {
        for v in self.values_mut() {
            *v *= factor;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.values().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt()
    }

    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| G::of(v.f64())).collect(),
                })
                .collect(),
        }
    }
}

impl<F: Real> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adaptive-moment optimizer state.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: ParamSet<F>,
    v: ParamSet<F>,
}

impl<F: Real> Adam<F> {
    pub fn new(params: &ParamSet<F>) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Restart moments and bias correction.
    pub fn reset(&mut self) {
        self.step = 0;
        self.m.scale(F::zero());
        self.v.scale(F::zero());
    }

    pub fn update(&mut self, params: &mut ParamSet<F>, grads: &ParamSet<F>, lr: f64) {
        self.step += 1;
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = F::of(lr * c2.sqrt() / c1);
        let eps = F::of(self.eps * c2.sqrt());
        for (((p, g), m), v) in params
            .values_mut()
            .zip(grads.values())
            .zip(self.m.values_mut())
            .zip(self.v.values_mut())
        {
            *m = b1 * *m + (F::one() - b1) * *g;
            *v = b2 * *v + (F::one() - b2) * *g * *g;
            *p = *p - step_size * *m / (v.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rand_act(h: usize, w: usize, c: usize, rng: &mut Rng) -> Act<f64> {
        let mut a = Act::zeros(h, w, c);
        normal_fill(&mut a.data, 1.0, rng);
        a
    }

    /// Loss = sum(out * probe); checks analytic input and weight gradients.
    #[test]
    fn conv3x3_gradients() {
        let mut rng = Rng::seed_from_u64(1);
        let x = rand_act(3, 4, 2, &mut rng);
        let mut w = vec![0.0; 9 * 2 * 3];
        normal_fill(&mut w, 1.0, &mut rng);
        let b = vec![0.1, -0.2, 0.3];
        let probe = rand_act(3, 4, 3, &mut rng);
        let loss = |x: &Act<f64>, w: &[f64]| -> f64 {
            conv3x3(x, w, &b).data.iter().zip(&probe.data).map(|(a, p)| a * p).sum()
        };
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; 3];
        let dx = conv3x3_backward(&x, &w, &probe, &mut dw, &mut db, true).unwrap();
        let h = 1e-6;
        for i in 0..x.data.len() {
            let mut a = x.clone();
            a.data[i] += h;
            let mut c = x.clone();
            c.data[i] -= h;
            let fd = (loss(&a, &w) - loss(&c, &w)) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-6);
        }
        for i in 0..w.len() {
            let mut a = w.clone();
            a[i] += h;
            let mut c = w.clone();
            c[i] -= h;
            let fd = (loss(&x, &a) - loss(&x, &c)) / (2.0 * h);
            assert!((fd - dw[i]).abs() < 1e-6);
        }
        let sums: Vec<f64> = (0..3)
            .map(|c| probe.data.chunks_exact(3).map(|p| p[c]).sum())
            .collect();
        for (a, b) in db.iter().zip(sums) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_and_upsampling_are_adjoint() {
        let mut rng = Rng::seed_from_u64(2);
        let x = rand_act(4, 6, 3, &mut rng);
        let y = rand_act(2, 3, 3, &mut rng);
        // <pool(x), y> == <x, pool^T(y)>
        let lhs: f64 = avg_pool2(&x).data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x
            .data
            .iter()
            .zip(&avg_pool2_backward(&y, 4, 6).data)
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let lhs: f64 = upsample2(&y).data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = y
            .data
            .iter()
            .zip(&upsample2_backward(&x).data)
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn concat_split_roundtrip() {
        let mut rng = Rng::seed_from_u64(3);
        let a = rand_act(2, 2, 3, &mut rng);
        let b = rand_act(2, 2, 2, &mut rng);
        let (a2, b2) = split(&concat(&a, &b), 3);
        assert_eq!((a2, b2), (a, b));
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = ParamSet::<f64>::new();
        let i = p.push("x", &[2]);
        p.get_mut(i).copy_from_slice(&[3.0, -2.0]);
        let mut opt = Adam::new(&p);
        for _ in 0..2000 {
            let mut g = p.zeros_like();
            for (gv, pv) in g.get_mut(i).iter_mut().zip(p.get(i)) {
                *gv = 2.0 * pv;
            }
            opt.update(&mut p, &g, 0.01);
        }
        assert!(p.get(i).iter().all(|v| v.abs() < 1e-2));
    }
}
