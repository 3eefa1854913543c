use crate::error::{Error, Result};

/// Dense row-major tensor of doubles with an optional gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
            grad: None,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns of a rank-2 tensor; a vector is treated as one row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [n] => Ok((1, *n)),
            s => Err(Error::shape(format!("expected rank <= 2, got {s:?}"))),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().map(|d| d.0).unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.dims2().map(|d| d.1).unwrap_or(0)
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient accumulator, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape(format!(
                "gradient of length {} for tensor of {} values",
                g.len(),
                self.data.len()
            )));
        }
        let acc = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (a, b) in acc.iter_mut().zip(g) {
            *a += b;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Plain matrix product without recording.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dims {k} and {k2} differ"
        )));
    }
    let mut out = vec![0.0; m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// `out += a[m×k] · b[k×n]`, row-major.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Softmax along `axis` (0 or 1 for matrices, 0 for vectors).
pub fn softmax(logits: &Tensor, axis: usize) -> Result<Tensor> {
    if !logits.all_finite() {
        return Err(Error::numeric("softmax input is not finite"));
    }
    let rank = logits.shape().len();
    let (rows, cols) = logits.dims2()?;
    let mut out = logits.clone();
    out.zero_grad();
    match (rank, axis) {
        (1, 0) | (2, 1) => {
            for r in 0..rows {
                softmax_in_place(&mut out.data[r * cols..(r + 1) * cols]);
            }
        }
        (2, 0) => {
            let mut col = vec![0.0; rows];
            for c in 0..cols {
                for r in 0..rows {
                    col[r] = logits.data[r * cols + c];
                }
                softmax_in_place(&mut col);
                for r in 0..rows {
                    out.data[r * cols + c] = col[r];
                }
            }
        }
        _ => {
            return Err(Error::shape(format!(
                "softmax axis {axis} invalid for rank {rank}"
            )))
        }
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_examples() {
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(matmul(&Tensor::identity(3), &m).unwrap(), m);

        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);

        assert!(matches!(matmul(&a, &m), Err(Error::Shape(_))));
        let x = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 4.0], vec![9.0, 1.0]]).unwrap();
        let z = matmul(&Tensor::zeros(&[2, 3]), &x).unwrap();
        assert_eq!(z.shape(), &[2, 2]);
        assert!(z.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::vector(vec![0.0; 3]), 0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&Tensor::vector(vec![1000.0, 0.0]), 0).unwrap();
        assert!(s.all_finite());
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] >= 0.0 && s.data()[1] < 1e-300);

        let s = softmax(
            &Tensor::vector(vec![1f64.ln(), 2f64.ln(), 7f64.ln()]),
            0,
        )
        .unwrap();
        for (v, e) in s.data().iter().zip([0.1, 0.2, 0.7]) {
            assert!((v - e).abs() < 1e-15);
        }
        assert!(matches!(
            softmax(&Tensor::vector(vec![f64::NAN, 0.0]), 0),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn softmax_axis_zero_matches_transpose() {
        let t = Tensor::from_rows(&[vec![1.0, 5.0], vec![2.0, -1.0], vec![0.0, 3.0]]).unwrap();
        let s = softmax(&t, 0).unwrap();
        for c in 0..2 {
            let sum: f64 = (0..3).map(|r| s.at(r, c)).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_accumulator() {
        let mut t = Tensor::zeros(&[2]);
        assert!(t.grad().is_none());
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
        assert!(t.accumulate_grad(&[1.0]).is_err());
    }
}
