//! Graph-recorded layers: convolution, activations, pooling, resampling,
//! concatenation and a few reductions.

use super::graph::{Graph, Operation, Var};
use super::kernels::{conv2d_backward, conv2d_forward, ConvGeometry};
use super::{Real, Shape4, Tensor};
use crate::error::{Error, Result};

/// Convolution parameters bound on a graph. Weights are `(out_c, in_c, k, k)`,
/// bias is `1 x out_c x 1 x 1`; padding is zero padding.
#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    /// Stride 1 with "same" padding for an odd kernel.
    pub fn same(weight: Var, bias: Var, kernel: usize) -> Self {
        Self {
            weight,
            bias,
            stride: 1,
            padding: (kernel - 1) / 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
}

impl Activation {
    fn apply<T: Real>(self, v: T) -> T {
        match self {
            Activation::Relu => {
                if v > T::zero() {
                    v
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu(slope) => {
                if v > T::zero() {
                    v
                } else {
                    v * T::from_f64(slope)
                }
            }
            Activation::Sigmoid => sigmoid(v),
        }
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

struct Conv2dOp {
    geometry: ConvGeometry,
}

impl<T: Real> Operation<T> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let grads = conv2d_backward(
            inputs[0],
            inputs[1],
            grad_output,
            &self.geometry,
            [needs[0], needs[1], needs[2]],
        );
        vec![grads.input, grads.weight, grads.bias]
    }
}

struct ActivationOp(Activation);

impl<T: Real> Operation<T> for ActivationOp {
    fn name(&self) -> &'static str {
        match self.0 {
            Activation::Relu => "relu",
            Activation::LeakyRelu(_) => "leaky_relu",
            Activation::Sigmoid => "sigmoid",
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0].data();
        let y = output.data();
        let go = grad_output.data();
        let data: Vec<T> = match self.0 {
            Activation::Relu => x
                .iter()
                .zip(go)
                .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                .collect(),
            Activation::LeakyRelu(slope) => {
                let s = T::from_f64(slope);
                x.iter()
                    .zip(go)
                    .map(|(&x, &g)| if x > T::zero() { g } else { g * s })
                    .collect()
            }
            Activation::Sigmoid => y.iter().zip(go).map(|(&y, &g)| g * y * (T::one() - y)).collect(),
        };
        vec![Some(Tensor::from_vec(output.shape(), data).expect("same shape"))]
    }

    fn branches(&self, inputs: &[&Tensor<T>], emit: &mut dyn FnMut(u64)) {
        if matches!(self.0, Activation::Sigmoid) {
            return;
        }
        for chunk in inputs[0].data().chunks(64) {
            emit(
                chunk
                    .iter()
                    .enumerate()
                    .fold(0u64, |acc, (i, &v)| acc | (((v > T::zero()) as u64) << i)),
            );
        }
    }
}

struct MaxPool2Op {
    /// Flat input index of each output's window maximum.
    argmax: Vec<usize>,
}

impl<T: Real> Operation<T> for MaxPool2Op {
    fn name(&self) -> &'static str {
        "maxpool2"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let mut dx = Tensor::zeros(inputs[0].shape());
        let d = dx.data_mut();
        for (&src, &g) in self.argmax.iter().zip(grad_output.data()) {
            d[src] = d[src] + g;
        }
        vec![Some(dx)]
    }

    fn branches(&self, _inputs: &[&Tensor<T>], emit: &mut dyn FnMut(u64)) {
        self.argmax.iter().for_each(|&i| emit(i as u64));
    }
}

/// Per-axis source indices and weights for 2x half-pixel bilinear upsampling.
#[derive(Clone, Debug)]
struct AxisTable {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl AxisTable {
    fn new(size: usize) -> Self {
        let out = 2 * size;
        let mut t = AxisTable {
            lo: Vec::with_capacity(out),
            hi: Vec::with_capacity(out),
            frac: Vec::with_capacity(out),
        };
        let max = (size - 1) as f64;
        for i in 0..out {
            let src = ((i as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, max);
            let lo = src.floor() as usize;
            t.lo.push(lo);
            t.hi.push((lo + 1).min(size - 1));
            t.frac.push(src - lo as f64);
        }
        t
    }
}

struct UpsampleOp {
    rows: AxisTable,
    cols: AxisTable,
}

impl<T: Real> Operation<T> for UpsampleOp {
    fn name(&self) -> &'static str {
        "upsample_bilinear2"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let s = inputs[0].shape();
        let os = output.shape();
        let mut dx = Tensor::zeros(s);
        let (ip, op) = (s.plane(), os.plane());
        let go = grad_output.data();
        let d = dx.data_mut();
        for plane in 0..s.n * s.c {
            let src = &go[plane * op..(plane + 1) * op];
            let dst = &mut d[plane * ip..(plane + 1) * ip];
            for oy in 0..os.h {
                let (y0, y1) = (self.rows.lo[oy], self.rows.hi[oy]);
                let fy = T::from_f64(self.rows.frac[oy]);
                for ox in 0..os.w {
                    let (x0, x1) = (self.cols.lo[ox], self.cols.hi[ox]);
                    let fx = T::from_f64(self.cols.frac[ox]);
                    let g = src[oy * os.w + ox];
                    let gy0 = g * (T::one() - fy);
                    let gy1 = g * fy;
                    dst[y0 * s.w + x0] = dst[y0 * s.w + x0] + gy0 * (T::one() - fx);
                    dst[y0 * s.w + x1] = dst[y0 * s.w + x1] + gy0 * fx;
                    dst[y1 * s.w + x0] = dst[y1 * s.w + x0] + gy1 * (T::one() - fx);
                    dst[y1 * s.w + x1] = dst[y1 * s.w + x1] + gy1 * fx;
                }
            }
        }
        vec![Some(dx)]
    }
}

struct ConcatOp;

impl<T: Real> Operation<T> for ConcatOp {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let os = output.shape();
        let plane = os.plane();
        let mut offset = 0;
        inputs
            .iter()
            .zip(needs)
            .map(|(inp, &need)| {
                let s = inp.shape();
                let start = offset;
                offset += s.c;
                need.then(|| {
                    let mut data = Vec::with_capacity(s.numel());
                    for n in 0..s.n {
                        let from = (n * os.c + start) * plane;
                        data.extend_from_slice(&grad_output.data()[from..from + s.c * plane]);
                    }
                    Tensor::from_vec(s, data).expect("slice shape")
                })
            })
            .collect()
    }
}

struct SliceChannelsOp {
    start: usize,
}

impl<T: Real> Operation<T> for SliceChannelsOp {
    fn name(&self) -> &'static str {
        "slice_channels"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let s = inputs[0].shape();
        let os = output.shape();
        let plane = s.plane();
        let mut dx = Tensor::zeros(s);
        for n in 0..s.n {
            let to = (n * s.c + self.start) * plane;
            let from = n * os.c * plane;
            dx.data_mut()[to..to + os.c * plane].copy_from_slice(&grad_output.data()[from..from + os.c * plane]);
        }
        vec![Some(dx)]
    }
}

struct AddOp;

impl<T: Real> Operation<T> for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        needs.iter().map(|&n| n.then(|| grad_output.clone())).collect()
    }
}

struct WeightedSumOp<T> {
    weights: Option<Vec<T>>,
}

impl<T: Real> Operation<T> for WeightedSumOp<T> {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let g = grad_output.data()[0];
        let s = inputs[0].shape();
        let data = match &self.weights {
            Some(w) => w.iter().map(|&w| w * g).collect(),
            None => vec![g; s.numel()],
        };
        vec![Some(Tensor::from_vec(s, data).expect("shape"))]
    }
}

impl<T: Real> Graph<T> {
    /// Zero-padded cross-correlation.
    pub fn conv2d(&mut self, input: Var, params: ConvParams) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(params.weight);
        let b = self.value(params.bias);
        let (xs, ws, bs) = (x.shape(), w.shape(), b.shape());
        if ws.c != xs.c || ws.h != ws.w {
            return Err(Error::shape(
                "conv2d",
                format!("weight with {} input channels and square kernel for input {xs}", xs.c),
                format!("weight {ws}"),
            ));
        }
        if bs.numel() != ws.n {
            return Err(Error::shape(
                "conv2d",
                format!("bias with {} entries", ws.n),
                format!("bias {bs}"),
            ));
        }
        if params.stride == 0 {
            return Err(Error::Config("conv2d: stride must be positive".into()));
        }
        let out_h = ConvGeometry::out_size(xs.h, ws.h, params.stride, params.padding);
        let out_w = ConvGeometry::out_size(xs.w, ws.w, params.stride, params.padding);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input whose padded size minus kernel {} is a non-negative multiple of stride {}",
                    ws.h, params.stride
                ),
                format!("input {xs} with padding {}", params.padding),
            ));
        };
        let geometry = ConvGeometry {
            in_c: xs.c,
            h: xs.h,
            w: xs.w,
            k: ws.h,
            stride: params.stride,
            pad: params.padding,
            out_h,
            out_w,
        };
        let out = conv2d_forward(x, w, b, &geometry);
        Ok(self.record(Conv2dOp { geometry }, &[input, params.weight, params.bias], out))
    }

    pub fn activation(&mut self, input: Var, mode: Activation) -> Var {
        let out = self.value(input).map(|v| mode.apply(v));
        self.record(ActivationOp(mode), &[input], out)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid)
    }

    /// 2x2 max pooling with stride 2; ties resolve to the first element in
    /// row-major window order.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let s = x.shape();
        if s.h % 2 != 0 || s.w % 2 != 0 {
            return Err(Error::OddSpatial { h: s.h, w: s.w });
        }
        let os = Shape4::new(s.n, s.c, s.h / 2, s.w / 2);
        let mut out = Vec::with_capacity(os.numel());
        let mut argmax = Vec::with_capacity(os.numel());
        let d = x.data();
        for plane in 0..s.n * s.c {
            let base = plane * s.plane();
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut best = base + 2 * oy * s.w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * s.w + 2 * ox + dx;
                        if d[i] > d[best] {
                            best = i;
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::from_vec(os, out)?;
        Ok(self.record(MaxPool2Op { argmax }, &[input], out))
    }

    /// 2x bilinear upsampling. Output pixel `i` samples the input at
    /// `(i + 0.5) / 2 - 0.5`, clamped to `[0, size - 1]`.
    pub fn upsample_bilinear2(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let s = x.shape();
        let rows = AxisTable::new(s.h);
        let cols = AxisTable::new(s.w);
        let os = Shape4::new(s.n, s.c, 2 * s.h, 2 * s.w);
        let mut out = Vec::with_capacity(os.numel());
        for plane in x.data().chunks(s.plane().max(1)).take(s.n * s.c) {
            for oy in 0..os.h {
                let (y0, y1) = (rows.lo[oy], rows.hi[oy]);
                let fy = T::from_f64(rows.frac[oy]);
                for ox in 0..os.w {
                    let (x0, x1) = (cols.lo[ox], cols.hi[ox]);
                    let fx = T::from_f64(cols.frac[ox]);
                    let top = plane[y0 * s.w + x0] * (T::one() - fx) + plane[y0 * s.w + x1] * fx;
                    let bot = plane[y1 * s.w + x0] * (T::one() - fx) + plane[y1 * s.w + x1] * fx;
                    out.push(top * (T::one() - fy) + bot * fy);
                }
            }
        }
        let out = Tensor::from_vec(os, out).expect("upsample shape");
        self.record(UpsampleOp { rows, cols }, &[input], out)
    }

    /// Concatenates along the channel axis in argument order.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::shape("concat_channels", "at least one input", "none"))?;
        if inputs.len() == 1 {
            return Ok(first);
        }
        let s0 = self.shape(first);
        let mut total_c = 0;
        for (i, &v) in inputs.iter().enumerate() {
            let s = self.shape(v);
            if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
                return Err(Error::SpatialMismatch {
                    op: "concat_channels",
                    index: i,
                    expected: format!("n={} h={} w={}", s0.n, s0.h, s0.w),
                    got: format!("n={} h={} w={}", s.n, s.h, s.w),
                });
            }
            total_c += s.c;
        }
        let os = Shape4::new(s0.n, total_c, s0.h, s0.w);
        let plane = s0.plane();
        let mut out = Vec::with_capacity(os.numel());
        for n in 0..s0.n {
            for &v in inputs {
                let t = self.value(v);
                let c = t.shape().c;
                out.extend_from_slice(&t.data()[n * c * plane..(n + 1) * c * plane]);
            }
        }
        let out = Tensor::from_vec(os, out)?;
        Ok(self.record(ConcatOp, inputs, out))
    }

    /// Channels `[start, start + count)`.
    pub fn slice_channels(&mut self, input: Var, start: usize, count: usize) -> Result<Var> {
        let s = self.shape(input);
        if start + count > s.c {
            return Err(Error::shape(
                "slice_channels",
                format!("channel range within {}", s.c),
                format!("{start}..{}", start + count),
            ));
        }
        let plane = s.plane();
        let os = Shape4::new(s.n, count, s.h, s.w);
        let mut out = Vec::with_capacity(os.numel());
        let d = self.value(input).data();
        for n in 0..s.n {
            let from = (n * s.c + start) * plane;
            out.extend_from_slice(&d[from..from + count * plane]);
        }
        let out = Tensor::from_vec(os, out)?;
        Ok(self.record(SliceChannelsOp { start }, &[input], out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("add", sa, sb));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.record(AddOp, &[a, b], out))
    }

    /// Sum of all elements as a 1x1x1x1 tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).sum();
        self.record(WeightedSumOp { weights: None }, &[input], Tensor::scalar(s))
    }

    /// `sum(weights * input)` with constant weights.
    pub fn weighted_sum(&mut self, input: Var, weights: &Tensor<T>) -> Result<Var> {
        let s = self.shape(input);
        if weights.shape() != s {
            return Err(Error::shape("weighted_sum", s, weights.shape()));
        }
        let v: T = self
            .value(input)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&x, &w)| x * w)
            .sum();
        Ok(self.record(
            WeightedSumOp {
                weights: Some(weights.data().to_vec()),
            },
            &[input],
            Tensor::scalar(v),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(shape: [usize; 4]) -> Tensor<f64> {
        Tensor::full(shape, 1.0)
    }

    #[test]
    fn conv_counts_overlapping_taps() {
        let mut g = Graph::new();
        let x = g.leaf(ones([1, 1, 3, 3]), false);
        let w = g.leaf(ones([1, 1, 3, 3]), false);
        let b = g.leaf(Tensor::zeros([1, 1, 1, 1]), false);
        let y = g.conv2d(x, ConvParams::same(w, b, 3)).unwrap();
        let out = g.value(y);
        assert_eq!(out.at(0, 0, 1, 1), 9.0);
        assert_eq!(out.at(0, 0, 0, 0), 4.0);
        assert_eq!(out.at(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = crate::rng::seeded(3);
        let input = Tensor::<f64>::randn([2, 1, 5, 7], 1.0, &mut rng);
        let mut kernel = Tensor::zeros([1, 1, 3, 3]);
        kernel.set(0, 0, 1, 1, 1.0);
        let mut g = Graph::new();
        let x = g.leaf(input.clone(), false);
        let w = g.leaf(kernel, false);
        let b = g.leaf(Tensor::zeros([1, 1, 1, 1]), false);
        let y = g.conv2d(x, ConvParams::same(w, b, 3)).unwrap();
        assert_eq!(g.value(y), &input);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros([1, 2, 4, 4]), false);
        let w = g.leaf(Tensor::zeros([1, 3, 3, 3]), false);
        let b = g.leaf(Tensor::zeros([1, 1, 1, 1]), false);
        let err = g.conv2d(x, ConvParams::same(w, b, 3)).unwrap_err().to_string();
        assert!(err.contains("1x2x4x4") && err.contains("1x3x3x3"), "{err}");
    }

    #[test]
    fn activations_unit_values() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec([1, 1, 1, 3], vec![-1.0, 0.0, -2.0]).unwrap(), false);
        let r = g.relu(x);
        let s = g.sigmoid(x);
        let l = g.activation(x, Activation::LeakyRelu(0.1));
        assert_eq!(g.value(r).data()[0], 0.0);
        assert_eq!(g.value(s).data()[1], 0.5);
        assert!((g.value(l).data()[2] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn maxpool_window_and_constant() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false);
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);

        let c = g.leaf(Tensor::full([1, 2, 4, 6], 0.3), false);
        let p = g.maxpool2(c).unwrap();
        assert_eq!(g.value(p), &Tensor::full([1, 2, 2, 3], 0.3));
    }

    #[test]
    fn maxpool_rejects_odd_size() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros([1, 1, 3, 4]), false);
        let err = g.maxpool2(x).unwrap_err().to_string();
        assert!(err.contains("pad or crop"), "{err}");
    }

    #[test]
    fn maxpool_tie_routes_to_first() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full([1, 1, 2, 2], 1.0), true);
        let y = g.maxpool2(x).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_contract() {
        let mut g = Graph::<f64>::new();
        let c = g.leaf(Tensor::full([1, 2, 3, 5], 0.7), false);
        let uc = g.upsample_bilinear2(c);
        assert_eq!(g.value(uc).shape(), Shape4::new(1, 2, 6, 10));
        assert!(g.value(uc).data().iter().all(|&v| v == 0.7));

        let single = g.leaf(Tensor::full([1, 1, 1, 1], 2.5), false);
        let us = g.upsample_bilinear2(single);
        assert_eq!(g.value(us).data(), &[2.5; 4]);

        let row = g.leaf(Tensor::from_vec([1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap(), false);
        let ur = g.upsample_bilinear2(row);
        for y in 0..4 {
            let r: Vec<f64> = (0..4).map(|x| g.value(ur).at(0, 0, y, x)).collect();
            assert_eq!(r, vec![0.0, 0.25, 0.75, 1.0]);
        }
    }

    #[test]
    fn concat_shapes_and_gradients() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::full([1, 4, 8, 8], 1.0), true);
        let b = g.leaf(Tensor::full([1, 8, 8, 8], 2.0), true);
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.shape(c), Shape4::new(1, 12, 8, 8));
        assert_eq!(g.concat_channels(&[a]).unwrap(), a);
        let loss = g.sum(c);
        g.backward(loss).unwrap();
        assert!(g.grad(a).data().iter().all(|&v| v == 1.0));
        assert!(g.grad(b).data().iter().all(|&v| v == 1.0));

        let bad = g.leaf(Tensor::full([1, 1, 4, 8], 0.0), false);
        let err = g.concat_channels(&[a, b, bad]).unwrap_err();
        assert!(matches!(err, Error::SpatialMismatch { index: 2, .. }), "{err}");
    }

    #[test]
    fn backward_sum_and_fan_out() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full([1, 2, 3, 3], 0.5), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(x).data().iter().all(|&v| v == 1.0));

        let xx = g.add(x, x).unwrap();
        let s2 = g.sum(xx);
        g.backward(s2).unwrap();
        assert!(g.grad(x).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn backward_rejects_non_scalar_and_zeroes_unreached() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full([1, 1, 2, 2], 1.0), true);
        let unrelated = g.leaf(Tensor::full([1, 1, 2, 2], 1.0), true);
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(unrelated).data().iter().all(|&v| v == 0.0));
    }
}
