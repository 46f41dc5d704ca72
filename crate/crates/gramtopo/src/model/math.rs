//! Dense f64 matrices and the elementwise functions used by the encoder.

use rand::Rng;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// self (m×k) · b (k×n) → (m×n)
    pub fn matmul(&self, b: &Matrix) -> Matrix {
        assert_eq!(self.cols, b.rows, "matmul inner dims");
        let mut out = Matrix::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (k, &a_ik) in a_row.iter().enumerate() {
                if a_ik == 0.0 {
                    continue;
                }
                let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
                for (o, &b_kj) in out_row.iter_mut().zip(b_row) {
                    *o += a_ik * b_kj;
                }
            }
        }
        out
    }

    /// self (m×k) · bᵀ where b is (n×k) → (m×n)
    pub fn matmul_tb(&self, b: &Matrix) -> Matrix {
        assert_eq!(self.cols, b.cols, "matmul_tb inner dims");
        let mut out = Matrix::zeros(self.rows, b.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for j in 0..b.rows {
                let b_row = b.row(j);
                let mut acc = 0.0;
                for (&x, &y) in a_row.iter().zip(b_row) {
                    acc += x * y;
                }
                out_row[j] = acc;
            }
        }
        out
    }

    /// selfᵀ · b where self is (k×m), b is (k×n) → (m×n)
    pub fn matmul_ta(&self, b: &Matrix) -> Matrix {
        assert_eq!(self.rows, b.rows, "matmul_ta inner dims");
        let mut out = Matrix::zeros(self.cols, b.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (i, &a_ki) in a_row.iter().enumerate() {
                if a_ki == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
                for (o, &b_kj) in out_row.iter_mut().zip(b_row) {
                    *o += a_ki * b_kj;
                }
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "add_assign shape");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    /// Adds a 1×cols row vector to every row.
    pub fn add_row_broadcast(&mut self, v: &Matrix) {
        assert_eq!(v.rows, 1, "broadcast vector");
        assert_eq!(v.cols, self.cols, "broadcast width");
        for i in 0..self.rows {
            for (a, &b) in self.row_mut(i).iter_mut().zip(&v.data) {
                *a += b;
            }
        }
    }

    /// Column sums as a 1×cols matrix.
    pub fn col_sums(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for i in 0..self.rows {
            for (o, &x) in out.data.iter_mut().zip(self.row(i)) {
                *o += x;
            }
        }
        out
    }

    /// Copies columns `lo..hi` into a new matrix.
    pub fn slice_cols(&self, lo: usize, hi: usize) -> Matrix {
        assert!(lo <= hi && hi <= self.cols, "column slice range");
        Matrix::from_fn(self.rows, hi - lo, |i, j| self.get(i, lo + j))
    }

    /// Adds `m` into columns `lo..lo+m.cols` of self.
    pub fn add_into_cols(&mut self, lo: usize, m: &Matrix) {
        assert_eq!(self.rows, m.rows, "add_into_cols rows");
        assert!(lo + m.cols <= self.cols, "add_into_cols range");
        for i in 0..self.rows {
            for j in 0..m.cols {
                self.data[i * self.cols + lo + j] += m.get(i, j);
            }
        }
    }
}

/// Gaussian sample via Box–Muller.
pub fn sample_normal(rng: &mut impl Rng, mean: f64, std: f64) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    mean + std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044715;

/// tanh-form GeLU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// In-place softmax over each row.
pub fn softmax_rows(m: &mut Matrix) {
    for i in 0..m.rows {
        let row = m.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
}

/// log softmax of one row.
pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|&x| x - log_sum).collect()
}

pub const LN_EPS: f64 = 1e-12;

/// Per-row layer norm `gain ⊙ (x − μ)/√(σ² + ε) + bias`. Returns the output
/// along with the normalized rows and per-row 1/√(σ²+ε) needed by backward.
pub fn layer_norm_rows(x: &Matrix, gain: &Matrix, bias: &Matrix) -> (Matrix, Matrix, Vec<f64>) {
    let d = x.cols;
    let mut out = Matrix::zeros(x.rows, d);
    let mut xhat = Matrix::zeros(x.rows, d);
    let mut rstds = Vec::with_capacity(x.rows);
    for i in 0..x.rows {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        rstds.push(rstd);
        for j in 0..d {
            let h = (row[j] - mean) * rstd;
            xhat.set(i, j, h);
            out.set(i, j, gain.data[j] * h + bias.data[j]);
        }
    }
    (out, xhat, rstds)
}

/// Gradient of [`layer_norm_rows`]: given d(out), returns (dx, dgain, dbias).
pub fn layer_norm_backward(
    dy: &Matrix,
    xhat: &Matrix,
    rstds: &[f64],
    gain: &Matrix,
) -> (Matrix, Matrix, Matrix) {
    let d = dy.cols;
    let mut dx = Matrix::zeros(dy.rows, d);
    let mut dgain = Matrix::zeros(1, d);
    let mut dbias = Matrix::zeros(1, d);
    for i in 0..dy.rows {
        let dy_row = dy.row(i);
        let xh_row = xhat.row(i);
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for j in 0..d {
            let g = gain.data[j] * dy_row[j];
            sum_g += g;
            sum_gx += g * xh_row[j];
            dgain.data[j] += dy_row[j] * xh_row[j];
            dbias.data[j] += dy_row[j];
        }
        let inv_d = 1.0 / d as f64;
        for j in 0..d {
            let g = gain.data[j] * dy_row[j];
            dx.set(i, j, rstds[i] * (g - inv_d * sum_g - xh_row[j] * inv_d * sum_gx));
        }
    }
    (dx, dgain, dbias)
}
