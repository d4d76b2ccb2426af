//! Tensor operations: eager forward + recorded backward.

use super::graph::concat_shape;
use super::kernels as k;
use super::{numel_of, Elem, GradFn, Tensor};
use crate::error::{Error, Result};
use std::sync::Arc;

fn same_shape<T: Elem>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shapes(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn tracked<T: Elem>(ts: &[&Tensor<T>]) -> bool {
    ts.iter().any(|t| t.requires_grad())
}

impl<T: Elem> Tensor<T> {
    fn unary(&self, data: Vec<T>, grad_fn: impl FnOnce() -> GradFn<T>) -> Tensor<T> {
        if self.requires_grad() {
            Tensor::from_op(self.shape().to_vec(), data, grad_fn())
        } else {
            Tensor::untracked(self.shape().to_vec(), data)
        }
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a + b).collect();
        Ok(if tracked(&[self, other]) {
            Tensor::from_op(self.shape().to_vec(), data, GradFn::Add { a: self.clone(), b: other.clone() })
        } else {
            Tensor::untracked(self.shape().to_vec(), data)
        })
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("sub", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a - b).collect();
        Ok(if tracked(&[self, other]) {
            Tensor::from_op(self.shape().to_vec(), data, GradFn::Sub { a: self.clone(), b: other.clone() })
        } else {
            Tensor::untracked(self.shape().to_vec(), data)
        })
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
        Ok(if tracked(&[self, other]) {
            Tensor::from_op(self.shape().to_vec(), data, GradFn::Mul { a: self.clone(), b: other.clone() })
        } else {
            Tensor::untracked(self.shape().to_vec(), data)
        })
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("div", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a / b).collect();
        Ok(if tracked(&[self, other]) {
            Tensor::from_op(self.shape().to_vec(), data, GradFn::Div { a: self.clone(), b: other.clone() })
        } else {
            Tensor::untracked(self.shape().to_vec(), data)
        })
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        let data = self.data().iter().map(|&v| v + c).collect();
        self.unary(data, || GradFn::AddScalar { a: self.clone() })
    }

    pub fn mul_scalar(&self, c: T) -> Tensor<T> {
        let data = self.data().iter().map(|&v| v * c).collect();
        self.unary(data, || GradFn::MulScalar { a: self.clone(), c })
    }

    pub fn neg(&self) -> Tensor<T> {
        self.mul_scalar(-T::ONE)
    }

    /// Row-broadcast add: self [R,C] + bias [C].
    pub fn add_bias(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let cols = *self.shape().last().ok_or_else(|| Error::invalid("add_bias", "scalar lhs"))?;
        if bias.shape() != [cols] {
            return Err(Error::shapes("add_bias", self.shape(), bias.shape()));
        }
        let data: Vec<T> = self
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(bias.data()).map(|(&a, &b)| a + b))
            .collect();
        Ok(if tracked(&[self, bias]) {
            Tensor::from_op(
                self.shape().to_vec(),
                data,
                GradFn::AddBias { a: self.clone(), bias: bias.clone(), cols },
            )
        } else {
            Tensor::untracked(self.shape().to_vec(), data)
        })
    }

    /// Scale each row of self [R,C] by w [R].
    pub fn mul_rows(&self, w: &Tensor<T>) -> Result<Tensor<T>> {
        let cols = *self.shape().last().ok_or_else(|| Error::invalid("mul_rows", "scalar lhs"))?;
        let rows = self.numel() / cols;
        if w.numel() != rows {
            return Err(Error::shapes("mul_rows", self.shape(), w.shape()));
        }
        let data: Vec<T> = self
            .data()
            .chunks(cols)
            .zip(w.data())
            .flat_map(|(row, &wv)| row.iter().map(move |&a| a * wv))
            .collect();
        Ok(if tracked(&[self, w]) {
            Tensor::from_op(
                self.shape().to_vec(),
                data,
                GradFn::MulRows { a: self.clone(), w: w.clone(), cols },
            )
        } else {
            Tensor::untracked(self.shape().to_vec(), data)
        })
    }

    /// self [m,k] · other [k,n]
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape().len() != 2 || other.shape().len() != 2 || self.shape()[1] != other.shape()[0] {
            return Err(Error::shapes("matmul", self.shape(), other.shape()));
        }
        let (m, kk, n) = (self.shape()[0], self.shape()[1], other.shape()[1]);
        let data = k::matmul_nn(self.data(), other.data(), m, kk, n);
        Ok(if tracked(&[self, other]) {
            Tensor::from_op(
                vec![m, n],
                data,
                GradFn::Matmul { a: self.clone(), b: other.clone(), m, k: kk, n },
            )
        } else {
            Tensor::untracked(vec![m, n], data)
        })
    }

    pub fn transpose2d(&self) -> Result<Tensor<T>> {
        if self.shape().len() != 2 {
            return Err(Error::invalid("transpose2d", format!("need 2-d, got {:?}", self.shape())));
        }
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        let mut data = vec![T::ZERO; self.numel()];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = self.data()[r * cols + c];
            }
        }
        Ok(if self.requires_grad() {
            Tensor::from_op(vec![cols, rows], data, GradFn::Transpose2d { a: self.clone(), rows, cols })
        } else {
            Tensor::untracked(vec![cols, rows], data)
        })
    }

    /// self [ci,h,w] ⊛ weight [co,ci,kh,kw] (+ bias [co]) with zero padding.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        if self.shape().len() != 3 || weight.shape().len() != 4 || self.shape()[0] != weight.shape()[1] {
            return Err(Error::shapes("conv2d", self.shape(), weight.shape()));
        }
        let (ci, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (co, kh, kw) = (weight.shape()[0], weight.shape()[2], weight.shape()[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw || stride == 0 {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {kh}x{kw} stride {stride} does not fit {h}x{w} with pad {pad}"),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [co] {
                return Err(Error::shapes("conv2d bias", b.shape(), &[co]));
            }
        }
        let oh = k::conv2d_out_dim(h, kh, stride, pad);
        let ow = k::conv2d_out_dim(w, kw, stride, pad);
        let data = k::conv2d_fwd(
            self.data(),
            weight.data(),
            bias.map(|b| b.data()),
            ci,
            h,
            w,
            co,
            kh,
            kw,
            stride,
            pad,
        );
        let track = self.requires_grad()
            || weight.requires_grad()
            || bias.map(|b| b.requires_grad()).unwrap_or(false);
        Ok(if track {
            Tensor::from_op(
                vec![co, oh, ow],
                data,
                GradFn::Conv2d {
                    input: self.clone(),
                    weight: weight.clone(),
                    bias: bias.cloned(),
                    stride,
                    pad,
                },
            )
        } else {
            Tensor::untracked(vec![co, oh, ow], data)
        })
    }

    pub fn relu(&self) -> Tensor<T> {
        let data = self.data().iter().map(|&v| v.maximum(T::ZERO)).collect();
        self.unary(data, || GradFn::Relu { a: self.clone() })
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&v| T::ONE / (T::ONE + (-v).exp())).collect();
        if self.requires_grad() {
            let y = Arc::new(data.clone());
            Tensor::from_op(self.shape().to_vec(), data, GradFn::Sigmoid { a: self.clone(), y })
        } else {
            Tensor::untracked(self.shape().to_vec(), data)
        }
    }

    pub fn abs(&self) -> Tensor<T> {
        let data = self.data().iter().map(|&v| v.abs()).collect();
        self.unary(data, || GradFn::Abs { a: self.clone() })
    }

    /// Numerically stable softmax along `axis`. Rejects NaN/+inf inputs
    /// (fail fast); -inf is allowed and yields exact zero weight, which is
    /// how masked attention excludes positions.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.shape().len() {
            return Err(Error::invalid("softmax", format!("axis {axis} of {:?}", self.shape())));
        }
        for &v in self.data().iter() {
            if v.is_nan() || (!v.is_finite() && v > T::ZERO) {
                return Err(Error::NonFinite { op: "softmax" });
            }
        }
        let data = k::softmax_fwd(self.data(), self.shape(), axis);
        Ok(if self.requires_grad() {
            let y = Arc::new(data.clone());
            Tensor::from_op(self.shape().to_vec(), data, GradFn::Softmax { a: self.clone(), y, axis })
        } else {
            Tensor::untracked(self.shape().to_vec(), data)
        })
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.shape().len() {
            return Err(Error::invalid("log_softmax", format!("axis {axis} of {:?}", self.shape())));
        }
        for &v in self.data().iter() {
            if v.is_nan() || (!v.is_finite() && v > T::ZERO) {
                return Err(Error::NonFinite { op: "log_softmax" });
            }
        }
        let data = k::log_softmax_fwd(self.data(), self.shape(), axis);
        Ok(if self.requires_grad() {
            let y = Arc::new(data.clone());
            Tensor::from_op(self.shape().to_vec(), data, GradFn::LogSoftmax { a: self.clone(), y, axis })
        } else {
            Tensor::untracked(self.shape().to_vec(), data)
        })
    }

    pub fn sum(&self) -> Tensor<T> {
        let mut acc = T::ZERO;
        for &v in self.data().iter() {
            acc += v;
        }
        if self.requires_grad() {
            Tensor::from_op(vec![], vec![acc], GradFn::Sum { a: self.clone() })
        } else {
            Tensor::scalar(acc)
        }
    }

    pub fn mean(&self) -> Tensor<T> {
        self.sum().mul_scalar(T::ONE / T::from_f64(self.numel() as f64))
    }

    /// Sum out one axis; the axis is removed from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.shape().len() {
            return Err(Error::invalid("sum_axis", format!("axis {axis} of {:?}", self.shape())));
        }
        let (outer, len, inner) = k::axis_split(self.shape(), axis);
        let mut data = vec![T::ZERO; outer * inner];
        for o in 0..outer {
            for x in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += self.data()[(o * len + x) * inner + i];
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Ok(if self.requires_grad() {
            Tensor::from_op(shape, data, GradFn::SumAxis { a: self.clone(), axis })
        } else {
            Tensor::untracked(shape, data)
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel_of(shape) != self.numel() {
            return Err(Error::shapes("reshape", self.shape(), shape));
        }
        let data = self.data().to_vec();
        Ok(if self.requires_grad() {
            Tensor::from_op(shape.to_vec(), data, GradFn::Reshape { a: self.clone() })
        } else {
            Tensor::untracked(shape.to_vec(), data)
        })
    }

    pub fn flatten(&self) -> Tensor<T> {
        self.reshape(&[self.numel()]).expect("flatten cannot fail")
    }

    pub fn concat(inputs: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        if inputs.is_empty() {
            return Err(Error::invalid("concat", "empty input list"));
        }
        let rank = inputs[0].shape().len();
        if axis >= rank {
            return Err(Error::invalid("concat", format!("axis {axis} of rank {rank}")));
        }
        for t in &inputs[1..] {
            if t.shape().len() != rank
                || t.shape()
                    .iter()
                    .zip(inputs[0].shape())
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shapes("concat", inputs[0].shape(), t.shape()));
            }
        }
        let shape = concat_shape(inputs, axis);
        let (outer, _, inner) = k::axis_split(&shape, axis);
        let out_axis = shape[axis];
        let mut data = vec![T::ZERO; numel_of(&shape)];
        let mut start = 0usize;
        for t in inputs {
            let len = t.shape()[axis];
            for o in 0..outer {
                for x in 0..len {
                    let dst = (o * out_axis + start + x) * inner;
                    let src = (o * len + x) * inner;
                    data[dst..dst + inner].copy_from_slice(&t.data()[src..src + inner]);
                }
            }
            start += len;
        }
        Ok(if inputs.iter().any(|t| t.requires_grad()) {
            Tensor::from_op(shape, data, GradFn::Concat { inputs: inputs.to_vec(), axis })
        } else {
            Tensor::untracked(shape, data)
        })
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.shape().len() || start + len > self.shape()[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("[{start}, {start}+{len}) on axis {axis} of {:?}", self.shape()),
            ));
        }
        let (outer, full, inner) = k::axis_split(self.shape(), axis);
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let mut data = vec![T::ZERO; outer * len * inner];
        for o in 0..outer {
            for x in 0..len {
                let src = (o * full + start + x) * inner;
                let dst = (o * len + x) * inner;
                data[dst..dst + inner].copy_from_slice(&self.data()[src..src + inner]);
            }
        }
        Ok(if self.requires_grad() {
            Tensor::from_op(shape, data, GradFn::Narrow { a: self.clone(), axis, start })
        } else {
            Tensor::untracked(shape, data)
        })
    }

    /// Bilinear read of self [c,h,w] at continuous pixel points [n,2] (x,y);
    /// integer coordinates land on texels, reads outside the map are zero.
    /// Differentiable in both the map and the points.
    pub fn grid_sample(&self, points: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape().len() != 3 {
            return Err(Error::invalid("grid_sample", format!("map must be [c,h,w], got {:?}", self.shape())));
        }
        if points.shape().len() != 2 || points.shape()[1] != 2 {
            return Err(Error::invalid("grid_sample", format!("points must be [n,2], got {:?}", points.shape())));
        }
        if points.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "grid_sample" });
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let n = points.shape()[0];
        let data = k::grid_sample_fwd(self.data(), c, h, w, points.data());
        Ok(if tracked(&[self, points]) {
            Tensor::from_op(
                vec![n, c],
                data,
                GradFn::GridSample { map: self.clone(), points: points.clone() },
            )
        } else {
            Tensor::untracked(vec![n, c], data)
        })
    }

    /// Align-corners-false bilinear resize of self [c,h,w] to [c,oh,ow].
    /// Resizing to the same size returns the input unchanged.
    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Result<Tensor<T>> {
        if self.shape().len() != 3 {
            return Err(Error::invalid("resize_bilinear", format!("need [c,h,w], got {:?}", self.shape())));
        }
        if oh == 0 || ow == 0 {
            return Err(Error::invalid("resize_bilinear", format!("target {oh}x{ow}")));
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        if (oh, ow) == (h, w) {
            return Ok(self.clone());
        }
        let data = k::resize_bilinear_fwd(self.data(), c, h, w, oh, ow);
        Ok(if self.requires_grad() {
            Tensor::from_op(vec![c, oh, ow], data, GradFn::ResizeBilinear { a: self.clone(), oh, ow })
        } else {
            Tensor::untracked(vec![c, oh, ow], data)
        })
    }

    /// Layer normalization over the last axis with learnable gain/bias.
    pub fn layer_norm(&self, gain: &Tensor<T>, bias: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        let width = *self.shape().last().ok_or_else(|| Error::invalid("layer_norm", "scalar input"))?;
        if gain.shape() != [width] || bias.shape() != [width] {
            return Err(Error::shapes("layer_norm", gain.shape(), &[width]));
        }
        let (y, xhat, inv_std) = k::layer_norm_fwd(self.data(), width, gain.data(), bias.data(), eps);
        Ok(if tracked(&[self, gain, bias]) {
            Tensor::from_op(
                self.shape().to_vec(),
                y,
                GradFn::LayerNorm {
                    a: self.clone(),
                    gain: gain.clone(),
                    bias: bias.clone(),
                    xhat: Arc::new(xhat),
                    inv_std: Arc::new(inv_std),
                },
            )
        } else {
            Tensor::untracked(self.shape().to_vec(), y)
        })
    }

    /// Elementwise binary cross-entropy with logits against constant targets,
    /// in the stable form max(x,0) - x·t + ln(1 + e^{-|x|}).
    pub fn bce_with_logits(&self, targets: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("bce_with_logits", self, targets)?;
        let data: Vec<T> = self
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| x.maximum(T::ZERO) - x * t + (T::ONE + (-x.abs()).exp()).ln())
            .collect();
        Ok(if self.requires_grad() {
            Tensor::from_op(
                self.shape().to_vec(),
                data,
                GradFn::BceLogits { logits: self.clone(), targets: targets.data_arc() },
            )
        } else {
            Tensor::untracked(self.shape().to_vec(), data)
        })
    }

    /// Gather one column per row: self [n,c], idx [n] → [n].
    pub fn take_index(&self, idx: &[usize]) -> Result<Tensor<T>> {
        if self.shape().len() != 2 || idx.len() != self.shape()[0] {
            return Err(Error::invalid(
                "take_index",
                format!("{} indices for shape {:?}", idx.len(), self.shape()),
            ));
        }
        let cols = self.shape()[1];
        for &j in idx {
            if j >= cols {
                return Err(Error::invalid("take_index", format!("index {j} out of range {cols}")));
            }
        }
        let data: Vec<T> = idx.iter().enumerate().map(|(r, &j)| self.data()[r * cols + j]).collect();
        Ok(if self.requires_grad() {
            Tensor::from_op(
                vec![idx.len()],
                data,
                GradFn::TakeIndex { a: self.clone(), idx: Arc::new(idx.to_vec()), cols },
            )
        } else {
            Tensor::untracked(vec![idx.len()], data)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    fn p(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::param(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_passthrough() {
        let eye = t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let x = t(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = eye.matmul(&x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn relu_definition() {
        let x = t(&[3], vec![-1.0, 0.0, 2.0]);
        assert_eq!(x.relu().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_names_primitive_and_shapes() {
        let a = t(&[2], vec![1.0, 2.0]);
        let b = t(&[3], vec![1.0, 2.0, 3.0]);
        let err = a.add(&b).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
        assert!(err.contains("[2]") && err.contains("[3]"), "{err}");
    }

    #[test]
    fn softmax_trivial_cases() {
        let two = t(&[2], vec![0.0, 0.0]).softmax(0).unwrap();
        assert_eq!(two.data(), &[0.5, 0.5]);
        let one = t(&[1], vec![5.0]).softmax(0).unwrap();
        assert_eq!(one.data(), &[1.0]);
    }

    #[test]
    fn softmax_rejects_nan() {
        let x = t(&[2], vec![f64::NAN, 0.0]);
        assert!(matches!(x.softmax(0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn softmax_allows_neg_inf_with_exact_zero() {
        let x = t(&[3], vec![0.0, f64::NEG_INFINITY, 0.0]).softmax(0).unwrap();
        assert_eq!(x.data()[1], 0.0);
        assert_eq!(x.data()[0], 0.5);
    }

    #[test]
    fn grid_sample_rejects_non_finite_points() {
        let map = t(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]);
        let pts = t(&[1, 2], vec![f64::INFINITY, 0.0]);
        assert!(matches!(map.grid_sample(&pts), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn resize_same_size_is_identity_bitwise() {
        let x = t(&[2, 2, 3], (0..12).map(|v| v as f64 * 0.17).collect());
        let y = x.resize_bilinear(2, 3).unwrap();
        assert_eq!(x.data(), y.data());
        assert!(x.resize_bilinear(0, 3).is_err());
    }

    #[test]
    fn backward_sum_of_squares() {
        let x = p(&[2], vec![1.0, 2.0]);
        let loss = x.mul(&x).unwrap().sum();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_constant_loss_has_no_grads() {
        let loss = Tensor::<f64>::scalar(3.0);
        let grads = loss.backward().unwrap();
        assert!(grads.is_empty());
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let x = p(&[2], vec![1.0, 2.0]);
        assert!(x.backward().is_err());
    }

    #[test]
    fn backward_shared_subexpression_accumulates() {
        // loss = sum(x*x + x*x) → grad 4x
        let x = p(&[2], vec![1.0, 3.0]);
        let sq = x.mul(&x).unwrap();
        let loss = sq.add(&sq).unwrap().sum();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[4.0, 12.0]);
    }

    #[test]
    fn concat_narrow_roundtrip() {
        let a = t(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], vec![5.0, 6.0]);
        let c = Tensor::concat(&[a.clone(), b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let a2 = c.narrow(1, 0, 2).unwrap();
        assert_eq!(a2.data(), a.data());
    }

    #[test]
    fn take_index_gathers_rows() {
        let x = t(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = x.take_index(&[2, 0]).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);
        assert!(x.take_index(&[3, 0]).is_err());
    }

    #[test]
    fn bce_with_logits_examples() {
        let x = t(&[2], vec![0.0, 0.0]);
        let tgt = t(&[2], vec![1.0, 0.0]);
        let l = x.bce_with_logits(&tgt).unwrap();
        for &v in l.data() {
            assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        }
        // saturated logits stay finite and near zero loss
        let x = t(&[2], vec![40.0, -40.0]);
        let tgt = t(&[2], vec![1.0, 0.0]);
        let l = x.bce_with_logits(&tgt).unwrap();
        for &v in l.data() {
            assert!(v.is_finite() && v < 1e-12, "{v}");
        }
    }
}
