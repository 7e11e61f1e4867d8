use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of 64-bit reals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {n} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    /// `(batch, channels, frames)` of a rank-3 array.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [b, c, t] => Ok((b, c, t)),
            _ => Err(Error::shape("dims3", format!("expected rank 3, got {:?}", self.shape))),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape("dims2", format!("expected rank 2, got {:?}", self.shape))),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| f(*x)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn check_ranges(&self, ranges: &[Range<usize>]) -> Result<()> {
        if ranges.len() != self.shape.len()
            || ranges.iter().zip(&self.shape).any(|(r, n)| r.start > r.end || r.end > *n)
        {
            return Err(Error::shape(
                "slice",
                format!("ranges {ranges:?} out of bounds for {:?}", self.shape),
            ));
        }
        Ok(())
    }

    /// Copies the sub-block selected by one range per axis.
    pub fn slice(&self, ranges: &[Range<usize>]) -> Result<Tensor> {
        self.check_ranges(ranges)?;
        let shape: Vec<usize> = ranges.iter().map(|r| r.len()).collect();
        let mut out = Vec::with_capacity(shape.iter().product());
        for_each_row(&self.shape, ranges, |src, len| {
            out.extend_from_slice(&self.data[src..src + len]);
        });
        Tensor::new(shape, out)
    }

    /// Adds `src` into the sub-block selected by `ranges`.
    pub fn add_into_slice(&mut self, ranges: &[Range<usize>], src: &Tensor) -> Result<()> {
        self.check_ranges(ranges)?;
        let mut pos = 0;
        let data = &mut self.data;
        for_each_row(&self.shape, ranges, |dst, len| {
            for (d, s) in data[dst..dst + len].iter_mut().zip(&src.data[pos..pos + len]) {
                *d += s;
            }
            pos += len;
        });
        Ok(())
    }

    /// Overwrites the sub-block selected by `ranges` with `src`.
    pub fn assign_slice(&mut self, ranges: &[Range<usize>], src: &Tensor) -> Result<()> {
        self.check_ranges(ranges)?;
        let mut pos = 0;
        let data = &mut self.data;
        for_each_row(&self.shape, ranges, |dst, len| {
            data[dst..dst + len].copy_from_slice(&src.data[pos..pos + len]);
            pos += len;
        });
        Ok(())
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::shape("concat", format!("axis {axis} for rank {rank}")));
        }
        for p in parts {
            if p.rank() != rank
                || p.shape.iter().zip(&first.shape).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} along axis {axis}", p.shape, first.shape),
                ));
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Tensor::new(shape, data)
    }
}

/// Visits each contiguous innermost row of a sub-block, passing the flat
/// offset of its first element and the row length.
fn for_each_row(shape: &[usize], ranges: &[Range<usize>], mut f: impl FnMut(usize, usize)) {
    let rank = shape.len();
    if rank == 0 {
        f(0, 1);
        return;
    }
    if ranges.iter().any(|r| r.is_empty()) {
        return;
    }
    let mut strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let last = &ranges[rank - 1];
    let mut idx: Vec<usize> = ranges[..rank - 1].iter().map(|r| r.start).collect();
    loop {
        let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum::<usize>() + last.start;
        f(base, last.len());
        // odometer increment over the leading axes
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < ranges[axis].end {
                break;
            }
            idx[axis] = ranges[axis].start;
        }
    }
}
