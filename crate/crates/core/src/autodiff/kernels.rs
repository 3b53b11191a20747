//! Forward kernels shared by the graph and by graph-free evaluation paths.

use crate::autodiff::Tensor;
use crate::error::{shape_err, Error, Result};

/// Added to cosine-similarity denominators.
pub const COSINE_EPS: f64 = 1e-12;

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let values = a.values().iter().map(|&v| f(v)).collect();
    Tensor::new(a.shape().to_vec(), values).expect("shape preserved")
}

fn zip(a: &Tensor, b: &Tensor, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    same_shape(a, b, what)?;
    let values = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), values)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return shape_err(format!("matmul: {m}x{k} by {k2}x{n}"));
    }
    let av = a.values();
    let bv = b.values();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = av[i * k + p];
            if s == 0.0 {
                continue;
            }
            let brow = &bv[p * n..(p + 1) * n];
            for (o, &bb) in orow.iter_mut().zip(brow) {
                *o += s * bb;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.dims2()?;
    let av = a.values();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = av[i * c + j];
        }
    }
    Tensor::matrix(c, r, out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip(a, b, "add", |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip(a, b, "subtract", |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip(a, b, "multiply", |x, y| x * y)
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    map(a, |v| v * s)
}

pub fn mean_all(a: &Tensor) -> Tensor {
    let n = a.len() as f64;
    Tensor::scalar(a.values().iter().sum::<f64>() / n)
}

/// Per-row mean, `r x c -> r x 1`.
pub fn mean_rows(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.dims2()?;
    let values = (0..r)
        .map(|i| a.row(i).iter().sum::<f64>() / c as f64)
        .collect();
    Tensor::matrix(r, 1, values)
}

pub fn abs(a: &Tensor) -> Tensor {
    map(a, f64::abs)
}

pub fn log(a: &Tensor) -> Result<Tensor> {
    if let Some(v) = a.values().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
        return Err(Error::Domain(format!("log of non-positive value {v}")));
    }
    Ok(map(a, f64::ln))
}

pub fn exp(a: &Tensor) -> Tensor {
    map(a, f64::exp)
}

pub fn tanh(a: &Tensor) -> Tensor {
    map(a, f64::tanh)
}

pub fn relu(a: &Tensor) -> Tensor {
    map(a, |v| v.max(0.0))
}

/// Softmax over each row, max-shifted.
pub fn row_softmax(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.dims2()?;
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = a.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut s = 0.0;
        for &v in row {
            let e = (v - m).exp();
            s += e;
            out.push(e);
        }
        for o in &mut out[start..] {
            *o /= s;
        }
    }
    Tensor::matrix(r, c, out)
}

pub(crate) fn row_norms(a: &Tensor, what: &str) -> Result<Vec<f64>> {
    let (r, _) = a.dims2()?;
    (0..r)
        .map(|i| {
            let n = a.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                Err(Error::DegenerateInput(format!("{what}: row {i} is zero")))
            } else {
                Ok(n)
            }
        })
        .collect()
}

pub fn row_l2_normalize(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.dims2()?;
    let norms = row_norms(a, "row-l2-normalize")?;
    let mut out = Vec::with_capacity(r * c);
    for (i, n) in norms.iter().enumerate() {
        out.extend(a.row(i).iter().map(|v| v / n));
    }
    Tensor::matrix(r, c, out)
}

/// Pairwise cosine similarity between the rows of `a` (`r x d`) and `b` (`m x d`).
pub fn cosine_matrix(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (r, d) = a.dims2()?;
    let (m, d2) = b.dims2()?;
    if d != d2 {
        return shape_err(format!("cosine: widths {d} and {d2} differ"));
    }
    let na = row_norms(a, "cosine")?;
    let nb = row_norms(b, "cosine")?;
    let mut out = Vec::with_capacity(r * m);
    for i in 0..r {
        let ai = a.row(i);
        for j in 0..m {
            let dot: f64 = ai.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
            out.push(dot / (na[i] * nb[j] + COSINE_EPS));
        }
    }
    Tensor::matrix(r, m, out)
}

pub fn concat_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (r1, c1) = a.dims2()?;
    let (r2, c2) = b.dims2()?;
    if c1 != c2 {
        return shape_err(format!("concat: widths {c1} and {c2} differ"));
    }
    let mut values = Vec::with_capacity((r1 + r2) * c1);
    values.extend_from_slice(a.values());
    values.extend_from_slice(b.values());
    Tensor::matrix(r1 + r2, c1, values)
}
