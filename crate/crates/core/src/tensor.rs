//! Dense row-major tensors of `f64`.
//!
//! Activations are laid out channels-first (`C×D×H×W`, optionally with a
//! leading batch axis), kernels as `Cout×Cin×kd×kh×kw`. The last axis always
//! has stride 1.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Argmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadCrop {
    /// Insert zeros at the low/high end of each axis.
    ZeroPad,
    /// Remove the given margins from the low/high end of each axis.
    Crop,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("tensor rank must be at least 1"));
    }
    if let Some(ax) = shape.iter().position(|&e| e == 0) {
        return Err(Error::shape(format!(
            "extent of axis {ax} is zero in shape {shape:?}"
        )));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::shape(format!("shape {shape:?} overflows usize")))
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::fill(shape, 0.0)
    }

    pub fn fill(shape: &[usize], value: f64) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    pub fn from_values(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != values.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} values but {} were given",
                values.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: values,
        })
    }

    /// One-element tensor of shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self {
            shape: other.shape.clone(),
            data: vec![0.0; other.data.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::shape(format!(
                "expected a single element, found shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.rank() {
            return Err(Error::shape(format!(
                "index {index:?} has wrong rank for shape {:?}",
                self.shape
            )));
        }
        let mut off = 0;
        for (ax, (&i, &e)) in index.iter().zip(&self.shape).enumerate() {
            if i >= e {
                return Err(Error::shape(format!(
                    "index {i} out of range on axis {ax} (extent {e})"
                )));
            }
            off = off * e + i;
        }
        Ok(off)
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: f64) -> Result<()> {
        let off = self.offset(index)?;
        self.data[off] = value;
        Ok(())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| v.max(0.0))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_broadcast(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_broadcast(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_broadcast(other, |a, b| a * b)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        self.map(|v| v + s)
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// Elementwise `a ⊕ b` where `b` either matches `a`'s shape, or has
    /// extent 1 on the leading axis and/or the channel axis (axis 1 of a
    /// rank ≥ 2 tensor) where `a` does not.
    pub fn zip_broadcast(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Ok(Tensor {
                shape: self.shape.clone(),
                data,
            });
        }
        let map = BroadcastMap::new(&self.shape, &other.shape)?;
        let mut data = Vec::with_capacity(self.data.len());
        for (i, &a) in self.data.iter().enumerate() {
            data.push(f(a, other.data[map.source(i)]));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Adds `other` into `self` in place; shapes must match exactly.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "cannot accumulate {:?} into {:?}",
                other.shape, self.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Sum of all elements in buffer order.
    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean_all(&self) -> f64 {
        self.sum_all() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reduces along `axis`. Sums run in increasing index order along the
    /// reduced axis; argmax returns the first maximal index.
    pub fn reduce(&self, op: ReduceOp, axis: usize, keep_dim: bool) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::shape(format!(
                "axis {axis} out of range for rank {}",
                self.rank()
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let extent = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| self.data[(o * extent + k) * inner + i];
                let v = match op {
                    ReduceOp::Sum => (0..extent).map(at).sum(),
                    ReduceOp::Mean => (0..extent).map(at).sum::<f64>() / extent as f64,
                    ReduceOp::Argmax => {
                        let mut best = 0;
                        for k in 1..extent {
                            if at(k) > at(best) {
                                best = k;
                            }
                        }
                        best as f64
                    }
                };
                data.push(v);
            }
        }
        let mut shape = self.shape.clone();
        if keep_dim || shape.len() == 1 {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Ok(Tensor { shape, data })
    }

    /// Zero-pads or crops every axis by the given `(low, high)` amounts.
    pub fn pad_crop(&self, amounts: &[(usize, usize)], mode: PadCrop) -> Result<Tensor> {
        if amounts.len() != self.rank() {
            return Err(Error::shape(format!(
                "{} pad/crop pairs given for rank {}",
                amounts.len(),
                self.rank()
            )));
        }
        let mut out_shape = Vec::with_capacity(self.rank());
        for (ax, (&e, &(lo, hi))) in self.shape.iter().zip(amounts).enumerate() {
            match mode {
                PadCrop::ZeroPad => out_shape.push(e + lo + hi),
                PadCrop::Crop => {
                    if lo + hi >= e {
                        return Err(Error::shape(format!(
                            "cannot crop ({lo},{hi}) from axis {ax} of extent {e}"
                        )));
                    }
                    out_shape.push(e - lo - hi);
                }
            }
        }
        let mut out = Tensor::zeros(&out_shape)?;
        let lows: Vec<usize> = amounts.iter().map(|a| a.0).collect();
        match mode {
            PadCrop::ZeroPad => copy_region(self, &mut out, &vec![0; self.rank()], &lows, &self.shape),
            PadCrop::Crop => copy_region(self, &mut out, &lows, &vec![0; self.rank()], &out_shape.clone()),
        }
        Ok(out)
    }

    /// Center-crops the trailing axes to `target` (leading axes untouched).
    pub fn center_crop(&self, target: &[usize]) -> Result<Tensor> {
        let lead = self
            .rank()
            .checked_sub(target.len())
            .ok_or_else(|| Error::shape("crop target has higher rank than tensor"))?;
        let mut amounts = vec![(0, 0); lead];
        for (&e, &t) in self.shape[lead..].iter().zip(target) {
            if t > e {
                return Err(Error::shape(format!(
                    "cannot center-crop extent {e} to {t}"
                )));
            }
            let lo = (e - t) / 2;
            amounts.push((lo, e - t - lo));
        }
        if amounts.iter().all(|&(l, h)| l == 0 && h == 0) {
            return Ok(self.clone());
        }
        self.pad_crop(&amounts, PadCrop::Crop)
    }

    /// Copies the sub-block starting at `origin` with extents `size`.
    pub fn slice_block(&self, origin: &[usize], size: &[usize]) -> Result<Tensor> {
        if origin.len() != self.rank() || size.len() != self.rank() {
            return Err(Error::shape("block rank mismatch"));
        }
        for ax in 0..self.rank() {
            if origin[ax] + size[ax] > self.shape[ax] {
                return Err(Error::shape(format!(
                    "block {origin:?}+{size:?} exceeds shape {:?}",
                    self.shape
                )));
            }
        }
        let mut out = Tensor::zeros(size)?;
        copy_region(self, &mut out, origin, &vec![0; self.rank()], size);
        Ok(out)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.6}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for ax in (0..shape.len().saturating_sub(1)).rev() {
        strides[ax] = strides[ax + 1] * shape[ax + 1];
    }
    strides
}

/// Copies a `size` block from `src` at `src_origin` into `dst` at `dst_origin`.
fn copy_region(src: &Tensor, dst: &mut Tensor, src_origin: &[usize], dst_origin: &[usize], size: &[usize]) {
    let rank = size.len();
    let ss = src.strides();
    let ds = dst.strides();
    let row = size[rank - 1];
    let rows: usize = size[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    for _ in 0..rows {
        let mut so = src_origin[rank - 1];
        let mut d_off = dst_origin[rank - 1];
        for ax in 0..rank - 1 {
            so += (src_origin[ax] + idx[ax]) * ss[ax];
            d_off += (dst_origin[ax] + idx[ax]) * ds[ax];
        }
        dst.data[d_off..d_off + row].copy_from_slice(&src.data[so..so + row]);
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < size[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

/// Index map from a full shape onto a restricted-broadcast operand.
pub(crate) struct BroadcastMap {
    full: Vec<usize>,
    src_strides: Vec<usize>,
}

impl BroadcastMap {
    pub(crate) fn new(full: &[usize], operand: &[usize]) -> Result<Self> {
        let err = || {
            Error::shape(format!(
                "shapes {full:?} and {operand:?} are not broadcast-compatible"
            ))
        };
        if full.len() != operand.len() {
            return Err(err());
        }
        let strides = strides_of(operand);
        let mut src_strides = Vec::with_capacity(full.len());
        for ax in 0..full.len() {
            if operand[ax] == full[ax] {
                src_strides.push(strides[ax]);
            } else if operand[ax] == 1 && ax <= 1 {
                src_strides.push(0);
            } else {
                return Err(err());
            }
        }
        Ok(Self {
            full: full.to_vec(),
            src_strides,
        })
    }

    pub(crate) fn source(&self, mut flat: usize) -> usize {
        let mut src = 0;
        for ax in (0..self.full.len()).rev() {
            let e = self.full[ax];
            src += (flat % e) * self.src_strides[ax];
            flat /= e;
        }
        src
    }

    /// Sums a full-shape tensor down onto the operand shape.
    pub(crate) fn reduce_into(&self, full: &Tensor, operand_shape: &[usize]) -> Tensor {
        let mut out = Tensor::zeros(operand_shape).expect("operand shape already validated");
        for (i, &v) in full.data.iter().enumerate() {
            out.data[self.source(i)] += v;
        }
        out
    }
}
