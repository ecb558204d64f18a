//! Dense row-major f64 tensors.
//!
//! Shapes are dynamic (`Vec<usize>`); all math is CPU f64. Shape mismatches
//! are programming errors and panic.

/// Dense row-major tensor of f64 values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "shape {:?} does not match data len {}", shape, data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.numel(), "reshape {:?} -> {:?}", self.shape, shape);
        Tensor { shape: shape.to_vec(), data: self.data.clone() }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    /// Row-major 2-D matrix product: (m,k) x (k,n) -> (m,n).
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (m, k) = dims2(self);
        let (k2, n) = dims2(other);
        assert_eq!(k, k2, "matmul inner dims {} vs {}", k, k2);
        let mut out = vec![0.0; m * n];
        let a = &self.data;
        let b = &other.data;
        for i in 0..m {
            let row_out = &mut out[i * n..(i + 1) * n];
            let row_a = &a[i * k..(i + 1) * k];
            for (p, &aip) in row_a.iter().enumerate() {
                if aip == 0.0 {
                    continue;
                }
                let row_b = &b[p * n..(p + 1) * n];
                for (o, &bpj) in row_out.iter_mut().zip(row_b) {
                    *o += aip * bpj;
                }
            }
        }
        Tensor { shape: vec![m, n], data: out }
    }

    /// (m,k) x (n,k)^T -> (m,n).
    pub fn matmul_nt(&self, other: &Tensor) -> Tensor {
        let (m, k) = dims2(self);
        let (n, k2) = dims2(other);
        assert_eq!(k, k2, "matmul_nt inner dims {} vs {}", k, k2);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row_a = &self.data[i * k..(i + 1) * k];
            let row_out = &mut out[i * n..(i + 1) * n];
            for (j, o) in row_out.iter_mut().enumerate() {
                let row_b = &other.data[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for (&x, &y) in row_a.iter().zip(row_b) {
                    acc += x * y;
                }
                *o = acc;
            }
        }
        Tensor { shape: vec![m, n], data: out }
    }

    /// (k,m)^T x (k,n) -> (m,n).
    pub fn matmul_tn(&self, other: &Tensor) -> Tensor {
        let (k, m) = dims2(self);
        let (k2, n) = dims2(other);
        assert_eq!(k, k2, "matmul_tn inner dims {} vs {}", k, k2);
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let row_a = &self.data[p * m..(p + 1) * m];
            let row_b = &other.data[p * n..(p + 1) * n];
            for (i, &aip) in row_a.iter().enumerate() {
                if aip == 0.0 {
                    continue;
                }
                let row_out = &mut out[i * n..(i + 1) * n];
                for (o, &bpj) in row_out.iter_mut().zip(row_b) {
                    *o += aip * bpj;
                }
            }
        }
        Tensor { shape: vec![m, n], data: out }
    }

    pub fn transpose2d(&self) -> Tensor {
        let (m, n) = dims2(self);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor { shape: vec![n, m], data: out }
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    assert_eq!(t.shape.len(), 2, "expected 2-D tensor, got shape {:?}", t.shape);
    (t.shape[0], t.shape[1])
}
