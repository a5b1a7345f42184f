//! Differentiable operations. Each method computes the forward value and, when
//! any input is attached to the graph, records a node whose closure routes the
//! output gradient back to the inputs.
//!
//! Binary arithmetic broadcasts like NumPy (shapes aligned from the right,
//! size-1 axes stretch); the backward pass sums the gradient back down to each
//! input's shape. Shape errors panic: they are bugs in graph-building code,
//! and the public model entry points validate their inputs before reaching
//! this layer.

use std::rc::Rc;

use ndarray::{s, Array3, Array4, Axis, IxDyn, Slice, Zip};

use super::tape::{Arr, Tape, T};

/// Broadcast result shape for two operand shapes, NumPy rules.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            (x, y) => panic!("cannot broadcast {a:?} with {b:?} (axis {i}: {x} vs {y})"),
        };
    }
    out
}

/// Sums a broadcast-shaped gradient back down to `target`.
pub fn reduce_to_shape(mut g: Arr, target: &[usize]) -> Arr {
    while g.ndim() > target.len() {
        g = g.sum_axis(Axis(0));
    }
    for (i, &t) in target.iter().enumerate() {
        if t == 1 && g.shape()[i] != 1 {
            g = g.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    g
}

fn bcast_zip(a: &Arr, b: &Arr, f: impl Fn(f64, f64) -> f64) -> Arr {
    let shape = broadcast_shapes(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("broadcast lhs");
    let bv = b.broadcast(IxDyn(&shape)).expect("broadcast rhs");
    Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y))
}

impl Tape {
    fn record_rc(&self, v: Rc<Arr>, bw: Box<dyn Fn(&Arr, &mut super::tape::Sink)>) -> T {
        let t = self.record(Arr::zeros(IxDyn(&[0])), bw);
        T { v, ..t }
    }

    fn unary_with(
        &self,
        x: &T,
        out: Arr,
        df: impl Fn(&Arr, &Arr, &Arr) -> Arr + 'static,
    ) -> T {
        // df(grad, input, output) -> grad wrt input
        let out = Rc::new(out);
        match self.node_of(x) {
            None => T { v: out, node: None, tape_id: 0 },
            Some(xid) => {
                let xin = x.v.clone();
                let oc = out.clone();
                self.record_rc(out, Box::new(move |g, sink| sink(xid, df(g, &xin, &oc))))
            }
        }
    }

    // ---- binary arithmetic -------------------------------------------------

    pub fn add(&self, a: &T, b: &T) -> T {
        let out = bcast_zip(&a.v, &b.v, |x, y| x + y);
        let (an, bn) = (self.node_of(a), self.node_of(b));
        if an.is_none() && bn.is_none() {
            return T::constant(out);
        }
        let (ash, bsh) = (a.shape().to_vec(), b.shape().to_vec());
        self.record(
            out,
            Box::new(move |g, sink| {
                if let Some(ai) = an {
                    sink(ai, reduce_to_shape(g.clone(), &ash));
                }
                if let Some(bi) = bn {
                    sink(bi, reduce_to_shape(g.clone(), &bsh));
                }
            }),
        )
    }

    pub fn sub(&self, a: &T, b: &T) -> T {
        let out = bcast_zip(&a.v, &b.v, |x, y| x - y);
        let (an, bn) = (self.node_of(a), self.node_of(b));
        if an.is_none() && bn.is_none() {
            return T::constant(out);
        }
        let (ash, bsh) = (a.shape().to_vec(), b.shape().to_vec());
        self.record(
            out,
            Box::new(move |g, sink| {
                if let Some(ai) = an {
                    sink(ai, reduce_to_shape(g.clone(), &ash));
                }
                if let Some(bi) = bn {
                    sink(bi, reduce_to_shape(-g.clone(), &bsh));
                }
            }),
        )
    }

    pub fn mul(&self, a: &T, b: &T) -> T {
        let out = bcast_zip(&a.v, &b.v, |x, y| x * y);
        let (an, bn) = (self.node_of(a), self.node_of(b));
        if an.is_none() && bn.is_none() {
            return T::constant(out);
        }
        let (ash, bsh) = (a.shape().to_vec(), b.shape().to_vec());
        let (av, bv) = (a.v.clone(), b.v.clone());
        self.record(
            out,
            Box::new(move |g, sink| {
                if let Some(ai) = an {
                    sink(ai, reduce_to_shape(bcast_zip(g, &bv, |gv, y| gv * y), &ash));
                }
                if let Some(bi) = bn {
                    sink(bi, reduce_to_shape(bcast_zip(g, &av, |gv, x| gv * x), &bsh));
                }
            }),
        )
    }

    pub fn div(&self, a: &T, b: &T) -> T {
        let out = bcast_zip(&a.v, &b.v, |x, y| x / y);
        let (an, bn) = (self.node_of(a), self.node_of(b));
        if an.is_none() && bn.is_none() {
            return T::constant(out);
        }
        let (ash, bsh) = (a.shape().to_vec(), b.shape().to_vec());
        let (av, bv) = (a.v.clone(), b.v.clone());
        self.record(
            out,
            Box::new(move |g, sink| {
                if let Some(ai) = an {
                    sink(ai, reduce_to_shape(bcast_zip(g, &bv, |gv, y| gv / y), &ash));
                }
                if let Some(bi) = bn {
                    let num = bcast_zip(g, &av, |gv, x| gv * x);
                    sink(bi, reduce_to_shape(bcast_zip(&num, &bv, |n, y| -n / (y * y)), &bsh));
                }
            }),
        )
    }

    // ---- elementwise unaries ----------------------------------------------

    pub fn neg(&self, x: &T) -> T {
        self.unary_with(x, x.v.mapv(|v| -v), |g, _, _| -g.clone())
    }

    pub fn exp(&self, x: &T) -> T {
        self.unary_with(x, x.v.mapv(f64::exp), |g, _, o| g * o)
    }

    /// Natural log. The caller is responsible for flooring the input.
    pub fn ln(&self, x: &T) -> T {
        self.unary_with(x, x.v.mapv(f64::ln), |g, x, _| {
            Zip::from(g).and(x).map_collect(|&gv, &xv| gv / xv)
        })
    }

    pub fn sqrt(&self, x: &T) -> T {
        self.unary_with(x, x.v.mapv(f64::sqrt), |g, _, o| {
            Zip::from(g).and(o).map_collect(|&gv, &ov| gv / (2.0 * ov))
        })
    }

    pub fn tanh(&self, x: &T) -> T {
        self.unary_with(x, x.v.mapv(f64::tanh), |g, _, o| {
            Zip::from(g).and(o).map_collect(|&gv, &ov| gv * (1.0 - ov * ov))
        })
    }

    pub fn sigmoid(&self, x: &T) -> T {
        let out = x.v.mapv(|v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        self.unary_with(x, out, |g, _, o| {
            Zip::from(g).and(o).map_collect(|&gv, &ov| gv * ov * (1.0 - ov))
        })
    }

    pub fn abs(&self, x: &T) -> T {
        self.unary_with(x, x.v.mapv(f64::abs), |g, x, _| {
            Zip::from(g).and(x).map_collect(|&gv, &xv| {
                if xv > 0.0 {
                    gv
                } else if xv < 0.0 {
                    -gv
                } else {
                    0.0
                }
            })
        })
    }

    pub fn relu(&self, x: &T) -> T {
        self.unary_with(x, x.v.mapv(|v| v.max(0.0)), |g, x, _| {
            Zip::from(g).and(x).map_collect(|&gv, &xv| if xv > 0.0 { gv } else { 0.0 })
        })
    }

    pub fn leaky_relu(&self, x: &T, alpha: f64) -> T {
        self.unary_with(
            x,
            x.v.mapv(|v| if v > 0.0 { v } else { alpha * v }),
            move |g, x, _| {
                Zip::from(g).and(x).map_collect(
                    move |&gv, &xv| if xv > 0.0 { gv } else { alpha * gv },
                )
            },
        )
    }

    /// Elementwise power with a constant exponent.
    pub fn powf(&self, x: &T, p: f64) -> T {
        self.unary_with(x, x.v.mapv(|v| v.powf(p)), move |g, x, _| {
            Zip::from(g).and(x).map_collect(move |&gv, &xv| gv * p * xv.powf(p - 1.0))
        })
    }

    pub fn scale(&self, x: &T, c: f64) -> T {
        self.unary_with(x, x.v.mapv(|v| v * c), move |g, _, _| g.mapv(|gv| gv * c))
    }

    pub fn add_scalar(&self, x: &T, c: f64) -> T {
        self.unary_with(x, x.v.mapv(|v| v + c), |g, _, _| g.clone())
    }

    /// `max(x, c)`; gradient passes where the input is not clamped.
    pub fn clamp_min(&self, x: &T, c: f64) -> T {
        self.unary_with(x, x.v.mapv(|v| v.max(c)), move |g, x, _| {
            Zip::from(g).and(x).map_collect(move |&gv, &xv| if xv >= c { gv } else { 0.0 })
        })
    }

    /// `min(x, c)`; gradient passes where the input is not clamped.
    pub fn clamp_max(&self, x: &T, c: f64) -> T {
        self.unary_with(x, x.v.mapv(|v| v.min(c)), move |g, x, _| {
            Zip::from(g).and(x).map_collect(move |&gv, &xv| if xv <= c { gv } else { 0.0 })
        })
    }

    // ---- reductions --------------------------------------------------------

    /// Sum of all elements, as a 0-d scalar.
    pub fn sum_all(&self, x: &T) -> T {
        let out = super::tape::scalar(x.v.sum());
        let shape = x.shape().to_vec();
        self.unary_with(x, out, move |g, _, _| {
            Arr::from_elem(IxDyn(&shape), *g.first().expect("scalar grad"))
        })
    }

    /// Mean of all elements, as a 0-d scalar.
    pub fn mean_all(&self, x: &T) -> T {
        let n = x.v.len() as f64;
        let s = self.sum_all(x);
        self.scale(&s, 1.0 / n)
    }

    /// Sums over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(&self, x: &T, axes: &[usize]) -> T {
        let mut out: Arr = (*x.v).clone();
        let mut sorted: Vec<usize> = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        for &ax in &sorted {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
        let shape = x.shape().to_vec();
        self.unary_with(x, out, move |g, _, _| {
            g.broadcast(IxDyn(&shape)).expect("reduce backward broadcast").to_owned()
        })
    }

    /// Means over `axes`, keeping them as size-1 dimensions.
    pub fn mean_axes(&self, x: &T, axes: &[usize]) -> T {
        let n: usize = axes.iter().map(|&a| x.shape()[a]).product();
        let s = self.sum_axes(x, axes);
        self.scale(&s, 1.0 / n as f64)
    }

    // ---- shape operations --------------------------------------------------

    pub fn reshape(&self, x: &T, shape: &[usize]) -> T {
        let n: usize = shape.iter().product();
        assert_eq!(n, x.v.len(), "reshape {:?} -> {shape:?}", x.shape());
        let out = to_shape(&x.v, shape);
        let orig = x.shape().to_vec();
        self.unary_with(x, out, move |g, _, _| to_shape(g, &orig))
    }

    pub fn permute(&self, x: &T, perm: &[usize]) -> T {
        assert_eq!(perm.len(), x.ndim(), "permute rank mismatch");
        let out = x.v.view().permuted_axes(perm).to_owned();
        let mut inv = vec![0usize; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        self.unary_with(x, out, move |g, _, _| g.view().permuted_axes(&inv[..]).to_owned())
    }

    /// Contiguous sub-range along one axis.
    pub fn narrow(&self, x: &T, axis: usize, start: usize, len: usize) -> T {
        assert!(start + len <= x.shape()[axis], "narrow out of range");
        let out = x.v.slice_axis(Axis(axis), Slice::from(start..start + len)).to_owned();
        let shape = x.shape().to_vec();
        self.unary_with(x, out, move |g, _, _| {
            let mut dx = Arr::zeros(IxDyn(&shape));
            dx.slice_axis_mut(Axis(axis), Slice::from(start..start + len)).assign(g);
            dx
        })
    }

    /// Strided sub-range along one axis: elements `start, start+step, ...`
    /// (`len` of them).
    pub fn step_slice(&self, x: &T, axis: usize, start: usize, step: usize, len: usize) -> T {
        assert!(step >= 1 && len >= 1);
        let last = start + step * (len - 1);
        assert!(last < x.shape()[axis], "step_slice out of range");
        let sl = Slice::new(start as isize, Some(last as isize + 1), step as isize);
        let out = x.v.slice_axis(Axis(axis), sl).to_owned();
        let shape = x.shape().to_vec();
        self.unary_with(x, out, move |g, _, _| {
            let mut dx = Arr::zeros(IxDyn(&shape));
            dx.slice_axis_mut(Axis(axis), sl).assign(g);
            dx
        })
    }

    /// Zero padding along one axis.
    pub fn pad_zeros(&self, x: &T, axis: usize, before: usize, after: usize) -> T {
        let mut shape = x.shape().to_vec();
        let len = shape[axis];
        shape[axis] += before + after;
        let mut out = Arr::zeros(IxDyn(&shape));
        out.slice_axis_mut(Axis(axis), Slice::from(before..before + len)).assign(&x.v);
        self.unary_with(x, out, move |g, _, _| {
            g.slice_axis(Axis(axis), Slice::from(before..before + len)).to_owned()
        })
    }

    /// Concatenation along one axis.
    pub fn concat(&self, axis: usize, parts: &[&T]) -> T {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let views: Vec<_> = parts.iter().map(|p| p.v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let nodes: Vec<Option<usize>> = parts.iter().map(|p| self.node_of(p)).collect();
        if nodes.iter().all(Option::is_none) {
            return T::constant(out);
        }
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        self.record(
            out,
            Box::new(move |g, sink| {
                let mut off = 0;
                for (node, &sz) in nodes.iter().zip(&sizes) {
                    if let Some(id) = node {
                        let piece =
                            g.slice_axis(Axis(axis), Slice::from(off..off + sz)).to_owned();
                        sink(*id, piece);
                    }
                    off += sz;
                }
            }),
        )
    }

    // ---- scans -------------------------------------------------------------

    /// Running sum along `axis` (inclusive).
    pub fn cumsum(&self, x: &T, axis: usize) -> T {
        let mut out: Arr = (*x.v).clone();
        out.accumulate_axis_inplace(Axis(axis), |&prev, cur| *cur += prev);
        self.unary_with(x, out, move |g, _, _| {
            let mut r = g.clone();
            r.invert_axis(Axis(axis));
            r.accumulate_axis_inplace(Axis(axis), |&prev, cur| *cur += prev);
            r.invert_axis(Axis(axis));
            r
        })
    }

    // ---- linear algebra ----------------------------------------------------

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, a: &T, b: &T) -> T {
        let a2 = a.v.view().into_dimensionality::<ndarray::Ix2>().expect("matmul lhs not 2-d");
        let b2 = b.v.view().into_dimensionality::<ndarray::Ix2>().expect("matmul rhs not 2-d");
        assert_eq!(a2.ncols(), b2.nrows(), "matmul inner dim mismatch");
        let out = a2.dot(&b2).into_dyn();
        let (an, bn) = (self.node_of(a), self.node_of(b));
        if an.is_none() && bn.is_none() {
            return T::constant(out);
        }
        let (av, bv) = (a.v.clone(), b.v.clone());
        self.record(
            out,
            Box::new(move |g, sink| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().expect("matmul grad");
                if let Some(ai) = an {
                    let b2 = bv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    sink(ai, g2.dot(&b2.t()).into_dyn());
                }
                if let Some(bi) = bn {
                    let a2 = av.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    sink(bi, a2.t().dot(&g2).into_dyn());
                }
            }),
        )
    }

    // ---- framing -----------------------------------------------------------

    /// Slices `[B, N]` into overlapping frames `[B, T, win]` with
    /// `T = 1 + (N - win) / hop`.
    pub fn frame(&self, x: &T, win: usize, hop: usize) -> T {
        let xv = x.v.view().into_dimensionality::<ndarray::Ix2>().expect("frame input not 2-d");
        let (b, n) = (xv.nrows(), xv.ncols());
        assert!(n >= win, "frame: input shorter than one window");
        let t_frames = 1 + (n - win) / hop;
        let mut out = Array3::<f64>::zeros((b, t_frames, win));
        for t in 0..t_frames {
            out.slice_mut(s![.., t, ..]).assign(&xv.slice(s![.., t * hop..t * hop + win]));
        }
        self.unary_with(x, out.into_dyn(), move |g, x, _| {
            let g3 = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let mut dx = ndarray::Array2::<f64>::zeros((b, x.shape()[1]));
            for t in 0..t_frames {
                let mut sl = dx.slice_mut(s![.., t * hop..t * hop + win]);
                sl += &g3.slice(s![.., t, ..]);
            }
            dx.into_dyn()
        })
    }

    /// Overlap-adds frames `[B, T, win]` into `[B, (T-1)*hop + win]`. Adjoint
    /// of [`frame`](Self::frame).
    pub fn overlap_add(&self, x: &T, hop: usize) -> T {
        let xv = x.v.view().into_dimensionality::<ndarray::Ix3>().expect("overlap_add not 3-d");
        let (b, t_frames, win) = xv.dim();
        assert!(t_frames >= 1);
        let n = (t_frames - 1) * hop + win;
        let mut out = ndarray::Array2::<f64>::zeros((b, n));
        for t in 0..t_frames {
            let mut sl = out.slice_mut(s![.., t * hop..t * hop + win]);
            sl += &xv.slice(s![.., t, ..]);
        }
        self.unary_with(x, out.into_dyn(), move |g, _, _| {
            let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let mut dx = Array3::<f64>::zeros((b, t_frames, win));
            for t in 0..t_frames {
                dx.slice_mut(s![.., t, ..]).assign(&g2.slice(s![.., t * hop..t * hop + win]));
            }
            dx.into_dyn()
        })
    }

    // ---- depthwise convolution --------------------------------------------

    /// Depthwise 2-D convolution (correlation): input `[B, C, F, T]`, kernel
    /// `[C, kf, kt]`, frequency stride `stride_f`, time dilation `dil_t`,
    /// VALID padding (callers pad beforehand). Output
    /// `[B, C, (F-kf)/stride_f + 1, T - dil_t*(kt-1)]`.
    pub fn depthwise_conv2d(&self, x: &T, w: &T, stride_f: usize, dil_t: usize) -> T {
        let xv = x.v.view().into_dimensionality::<ndarray::Ix4>().expect("dwconv input not 4-d");
        let wv = w.v.view().into_dimensionality::<ndarray::Ix3>().expect("dwconv kernel not 3-d");
        let (b, c, fi, ti) = xv.dim();
        let (wc, kf, kt) = wv.dim();
        assert_eq!(c, wc, "dwconv channel mismatch");
        assert!(fi >= kf && ti >= dil_t * (kt - 1) + 1, "dwconv input smaller than kernel");
        let fo = (fi - kf) / stride_f + 1;
        let to = ti - dil_t * (kt - 1);
        let mut out = Array4::<f64>::zeros((b, c, fo, to));
        for i in 0..kf {
            for j in 0..kt {
                let xs = xv.slice(s![.., .., i..i + stride_f * (fo - 1) + 1; stride_f, j * dil_t..j * dil_t + to]);
                let wtap = wv.slice(s![.., i, j]);
                let wb = wtap.insert_axis(Axis(0)).insert_axis(Axis(2)).insert_axis(Axis(3));
                Zip::from(&mut out)
                    .and(&xs)
                    .and_broadcast(&wb)
                    .for_each(|o, &xv, &wv| *o += xv * wv);
            }
        }
        let (xn, wn) = (self.node_of(x), self.node_of(w));
        if xn.is_none() && wn.is_none() {
            return T::constant(out.into_dyn());
        }
        let (xrc, wrc) = (x.v.clone(), w.v.clone());
        self.record(
            out.into_dyn(),
            Box::new(move |g, sink| {
                let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let xv = xrc.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let wv = wrc.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                if let Some(wi) = wn {
                    let mut dw = Array3::<f64>::zeros((c, kf, kt));
                    for i in 0..kf {
                        for j in 0..kt {
                            let xs = xv.slice(s![.., .., i..i + stride_f * (fo - 1) + 1; stride_f, j * dil_t..j * dil_t + to]);
                            let prod = &g4 * &xs;
                            let per_c = prod.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                            dw.slice_mut(s![.., i, j]).assign(&per_c);
                        }
                    }
                    sink(wi, dw.into_dyn());
                }
                if let Some(xi) = xn {
                    let mut dx = Array4::<f64>::zeros((b, c, fi, ti));
                    for i in 0..kf {
                        for j in 0..kt {
                            let wtap = wv.slice(s![.., i, j]);
                            let wb = wtap
                                .insert_axis(Axis(0))
                                .insert_axis(Axis(2))
                                .insert_axis(Axis(3));
                            let mut ds = dx.slice_mut(s![.., .., i..i + stride_f * (fo - 1) + 1; stride_f, j * dil_t..j * dil_t + to]);
                            Zip::from(&mut ds)
                                .and(&g4)
                                .and_broadcast(&wb)
                                .for_each(|d, &gv, &wv| *d += gv * wv);
                        }
                    }
                    sink(xi, dx.into_dyn());
                }
            }),
        )
    }
}

fn to_shape(a: &Arr, shape: &[usize]) -> Arr {
    a.as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(shape))
        .expect("reshape size mismatch")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check::{gradcheck, random_arr};
    use crate::nn::tape::Tape;

    fn t(shape: &[usize], seed: u64) -> Arr {
        random_arr(shape, -1.0, 1.0, seed)
    }

    fn tpos(shape: &[usize], seed: u64) -> Arr {
        random_arr(shape, 0.5, 2.0, seed)
    }

    #[test]
    fn add_broadcast_values() {
        let tape = Tape::inference();
        let a = tape.constant(t(&[2, 3], 1));
        let b = tape.constant(t(&[3], 2));
        let c = tape.add(&a, &b);
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.v[[1, 2]], a.v[[1, 2]] + b.v[[2]]);
    }

    #[test]
    #[should_panic(expected = "cannot broadcast")]
    fn add_shape_mismatch_panics() {
        let tape = Tape::inference();
        let a = tape.constant(t(&[2, 3], 1));
        let b = tape.constant(t(&[4], 2));
        tape.add(&a, &b);
    }

    #[test]
    fn grads_binary_broadcast() {
        gradcheck(&[("a", t(&[2, 3, 4], 1)), ("b", t(&[3, 1], 2))], 1e-4, |tp, i| {
            tp.add(&i["a"], &i["b"])
        });
        gradcheck(&[("a", t(&[2, 3], 3)), ("b", t(&[2, 3], 4))], 1e-4, |tp, i| {
            tp.sub(&i["a"], &i["b"])
        });
        gradcheck(&[("a", t(&[2, 3, 4], 5)), ("b", t(&[4], 6))], 1e-4, |tp, i| {
            tp.mul(&i["a"], &i["b"])
        });
        gradcheck(&[("a", t(&[3, 4], 7)), ("b", tpos(&[3, 1], 8))], 1e-4, |tp, i| {
            tp.div(&i["a"], &i["b"])
        });
    }

    #[test]
    fn grads_unaries() {
        gradcheck(&[("x", t(&[3, 4], 1))], 1e-4, |tp, i| tp.neg(&i["x"]));
        gradcheck(&[("x", t(&[3, 4], 2))], 1e-4, |tp, i| tp.exp(&i["x"]));
        gradcheck(&[("x", tpos(&[3, 4], 3))], 1e-4, |tp, i| tp.ln(&i["x"]));
        gradcheck(&[("x", tpos(&[3, 4], 4))], 1e-4, |tp, i| tp.sqrt(&i["x"]));
        gradcheck(&[("x", t(&[3, 4], 5))], 1e-4, |tp, i| tp.tanh(&i["x"]));
        gradcheck(&[("x", t(&[3, 4], 6))], 1e-4, |tp, i| tp.sigmoid(&i["x"]));
        gradcheck(&[("x", tpos(&[3, 4], 7))], 1e-4, |tp, i| tp.powf(&i["x"], 0.3));
        gradcheck(&[("x", t(&[3, 4], 8))], 1e-4, |tp, i| tp.scale(&i["x"], -2.5));
        gradcheck(&[("x", t(&[3, 4], 9))], 1e-4, |tp, i| tp.add_scalar(&i["x"], 3.0));
    }

    #[test]
    fn grads_piecewise_unaries() {
        // keep inputs away from the kinks
        let shifted = |s: u64| t(&[4, 5], s).mapv(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        gradcheck(&[("x", shifted(1))], 1e-4, |tp, i| tp.abs(&i["x"]));
        gradcheck(&[("x", shifted(2))], 1e-4, |tp, i| tp.relu(&i["x"]));
        gradcheck(&[("x", shifted(3))], 1e-4, |tp, i| tp.leaky_relu(&i["x"], 0.2));
        gradcheck(&[("x", shifted(4))], 1e-4, |tp, i| tp.clamp_min(&i["x"], 0.0));
        gradcheck(&[("x", shifted(5))], 1e-4, |tp, i| tp.clamp_max(&i["x"], 0.0));
    }

    #[test]
    fn grads_reductions() {
        gradcheck(&[("x", t(&[3, 4, 2], 1))], 1e-4, |tp, i| tp.sum_all(&i["x"]));
        gradcheck(&[("x", t(&[3, 4, 2], 2))], 1e-4, |tp, i| tp.mean_all(&i["x"]));
        gradcheck(&[("x", t(&[3, 4, 2], 3))], 1e-4, |tp, i| tp.sum_axes(&i["x"], &[0, 2]));
        gradcheck(&[("x", t(&[3, 4, 2], 4))], 1e-4, |tp, i| tp.mean_axes(&i["x"], &[1]));
    }

    #[test]
    fn sum_axes_keeps_dims() {
        let tape = Tape::inference();
        let x = tape.constant(t(&[3, 4, 2], 1));
        let s = tape.sum_axes(&x, &[1]);
        assert_eq!(s.shape(), &[3, 1, 2]);
    }

    #[test]
    fn grads_shape_ops() {
        gradcheck(&[("x", t(&[3, 4], 1))], 1e-4, |tp, i| tp.reshape(&i["x"], &[2, 6]));
        gradcheck(&[("x", t(&[2, 3, 4], 2))], 1e-4, |tp, i| tp.permute(&i["x"], &[2, 0, 1]));
        gradcheck(&[("x", t(&[3, 8], 3))], 1e-4, |tp, i| tp.narrow(&i["x"], 1, 2, 4));
        gradcheck(&[("x", t(&[3, 9], 4))], 1e-4, |tp, i| tp.step_slice(&i["x"], 1, 1, 3, 3));
        gradcheck(&[("x", t(&[3, 4], 5))], 1e-4, |tp, i| tp.pad_zeros(&i["x"], 1, 2, 3));
        gradcheck(&[("a", t(&[2, 3], 6)), ("b", t(&[2, 5], 7))], 1e-4, |tp, i| {
            tp.concat(1, &[&i["a"], &i["b"]])
        });
        gradcheck(&[("x", t(&[2, 5], 8))], 1e-4, |tp, i| tp.cumsum(&i["x"], 1));
    }

    #[test]
    fn permute_then_reshape_matches_manual() {
        let tape = Tape::inference();
        let x = tape.constant(ndarray::arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let p = tape.permute(&x, &[1, 0]);
        assert_eq!(p.v[[0, 1]], 3.0);
        let r = tape.reshape(&p, &[4]);
        assert_eq!(r.v.as_slice().unwrap(), &[1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn grads_matmul() {
        gradcheck(&[("a", t(&[3, 4], 1)), ("b", t(&[4, 2], 2))], 1e-4, |tp, i| {
            tp.matmul(&i["a"], &i["b"])
        });
    }

    #[test]
    fn matmul_matches_manual() {
        let tape = Tape::inference();
        let a = tape.constant(ndarray::arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = tape.constant(ndarray::arr2(&[[5.0], [6.0]]).into_dyn());
        let c = tape.matmul(&a, &b);
        assert_eq!(c.v[[0, 0]], 17.0);
        assert_eq!(c.v[[1, 0]], 39.0);
    }

    #[test]
    fn grads_framing() {
        gradcheck(&[("x", t(&[2, 11], 1))], 1e-4, |tp, i| tp.frame(&i["x"], 4, 2));
        gradcheck(&[("x", t(&[2, 3, 4], 2))], 1e-4, |tp, i| tp.overlap_add(&i["x"], 2));
    }

    #[test]
    fn frame_then_overlap_add_weights_interior() {
        // with a rectangular window and 50% overlap, OLA(frame(x)) doubles
        // every fully-overlapped sample
        let tape = Tape::inference();
        let x = tape.constant(Arr::ones(IxDyn(&[1, 8])));
        let f = tape.frame(&x, 4, 2);
        assert_eq!(f.shape(), &[1, 3, 4]);
        let y = tape.overlap_add(&f, 2);
        assert_eq!(y.shape(), &[1, 8]);
        assert_eq!(y.v[[0, 0]], 1.0);
        assert_eq!(y.v[[0, 3]], 2.0);
    }

    #[test]
    fn grads_depthwise_conv() {
        gradcheck(
            &[("x", t(&[2, 3, 6, 7], 1)), ("w", t(&[3, 2, 3], 2))],
            1e-4,
            |tp, i| tp.depthwise_conv2d(&i["x"], &i["w"], 2, 2),
        );
        gradcheck(
            &[("x", t(&[1, 2, 5, 5], 3)), ("w", t(&[2, 5, 1], 4))],
            1e-4,
            |tp, i| tp.depthwise_conv2d(&i["x"], &i["w"], 1, 1),
        );
    }

    #[test]
    fn depthwise_conv_matches_manual() {
        let tape = Tape::inference();
        // single batch, single channel, 3x3 input, 2x2 kernel, stride 1
        let x = tape.constant(
            ndarray::arr2(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]])
                .into_shape_with_order((1, 1, 3, 3))
                .unwrap()
                .into_dyn(),
        );
        let w = tape.constant(
            ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]])
                .into_shape_with_order((1, 2, 2))
                .unwrap()
                .into_dyn(),
        );
        let y = tape.depthwise_conv2d(&x, &w, 1, 1);
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.v[[0, 0, 0, 0]], 1.0 + 5.0);
        assert_eq!(y.v[[0, 0, 1, 1]], 5.0 + 9.0);
    }

    #[test]
    fn cumsum_values() {
        let tape = Tape::inference();
        let x = tape.constant(ndarray::arr2(&[[1.0, 2.0, 3.0]]).into_dyn());
        let c = tape.cumsum(&x, 1);
        assert_eq!(c.v.as_slice().unwrap(), &[1.0, 3.0, 6.0]);
    }

    #[test]
    fn no_grad_records_nothing() {
        let tape = Tape::inference();
        let a = tape.constant(t(&[4, 4], 1));
        let b = tape.constant(t(&[4, 4], 2));
        let c = tape.mul(&tape.add(&a, &b), &b);
        assert!(c.node.is_none());
        assert_eq!(tape.num_nodes(), 0);
    }

    #[test]
    fn grad_accumulates_over_reuse() {
        // y = x*x + x -> dy/dx = 2x + 1
        let tape = Tape::new();
        let xv = Arr::from_elem(IxDyn(&[1]), 3.0);
        let x = tape.param("x", std::rc::Rc::new(xv));
        let y = tape.sum_all(&tape.add(&tape.mul(&x, &x), &x));
        let grads = tape.backward(&y).unwrap();
        let gx = grads.get("x").unwrap();
        assert!((gx[[0]] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn backward_on_nonscalar_errors() {
        let tape = Tape::new();
        let x = tape.param("x", std::rc::Rc::new(t(&[2, 2], 1)));
        let y = tape.add(&x, &x);
        assert!(tape.backward(&y).is_err());
    }

    #[test]
    fn backward_on_constant_errors() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1], 1));
        assert!(tape.backward(&x).is_err());
    }

    #[test]
    #[should_panic(expected = "different tape")]
    fn cross_tape_use_panics() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let x = t1.param("x", std::rc::Rc::new(t(&[2], 1)));
        let y = t2.param("y", std::rc::Rc::new(t(&[2], 2)));
        t1.add(&x, &y);
    }

    #[test]
    fn clip_global_norm_scales() {
        let tape = Tape::new();
        let x = tape.param("x", std::rc::Rc::new(Arr::from_elem(IxDyn(&[4]), 2.0)));
        let y = tape.sum_all(&tape.mul(&x, &x));
        let mut grads = tape.backward(&y).unwrap();
        // grad = 4.0 each, norm = 8
        let norm = grads.clip_global_norm(1.0);
        assert!((norm - 8.0).abs() < 1e-12);
        assert!((grads.global_norm() - 1.0).abs() < 1e-12);
    }
}
