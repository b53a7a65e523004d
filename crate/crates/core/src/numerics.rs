//! Dense row-major tensors over `f64` and the seeded generator everything
//! downstream draws from.
//!
//! Every public operation checks shapes up front and refuses to hand back a
//! non-finite element. Matrix products accumulate in a fixed order (for each
//! output row, over the inner index ascending, then across the output row),
//! so results are bit-reproducible no matter how callers schedule the work.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking extents and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!(
                "non-finite element {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let mut t = Tensor::zeros(shape)?;
        t.data.fill(value);
        Tensor::new(t.shape, t.data)
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Tensor::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    /// Builds a tensor from a generator over flat indices.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Result<Self> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor rank is at least one")
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    /// Elementwise map; fails if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination of two equally shaped tensors.
    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other, "zip_with")?;
        Tensor::new(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Result<Self> {
        self.map(|v| v * s)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn mean_squared_error(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other, "mean_squared_error")?;
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Slice of the `index`-th block along the leading axis.
    pub fn outer(&self, index: usize) -> &[f64] {
        let stride = self.data.len() / self.shape[0];
        &self.data[index * stride..(index + 1) * stride]
    }

    /// Iterates the last-axis rows.
    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.last_dim())
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::contract(format!(
            "tensor shape {shape:?} must have at least one axis and positive extents"
        )));
    }
    Ok(())
}

fn expect_matrix(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::contract(format!(
            "{op} expects a matrix, got shape {:?}",
            t.shape()
        ))),
    }
}

/// `a · b` for an `m×k` and a `k×n` matrix.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = expect_matrix(a, "matmul")?;
    let (k2, n) = expect_matrix(b, "matmul")?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    matmul_into(&a.data, &b.data, &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// Raw kernel behind [`matmul`]: `out[m×n] += a[m×k] · b[k×n]`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// Softmax over the last axis, max-subtracted.
pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    let mut data = x.data.clone();
    for row in data.chunks_exact_mut(x.last_dim()) {
        softmax_in_place(row);
    }
    Tensor::new(x.shape.clone(), data)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Divides each frame (leading-axis block; the whole tensor when rank 1) by
/// its own maximum.
pub fn maxnorm_frame(x: &Tensor) -> Result<Tensor> {
    let frames = if x.rank() == 1 { 1 } else { x.shape[0] };
    let stride = x.len() / frames;
    let mut data = x.data.clone();
    for (f, frame) in data.chunks_exact_mut(stride).enumerate() {
        let max = frame.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max <= 0.0 {
            return Err(Error::contract(format!(
                "frame {f} has maximum {max}; cannot max-normalize"
            )));
        }
        for v in frame.iter_mut() {
            *v /= max;
        }
    }
    Tensor::new(x.shape.clone(), data)
}

/// Concatenates two tensors along the leading axis.
pub fn concat_outer(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape[1..] != b.shape[1..] {
        return Err(Error::Shape {
            op: "concat_outer",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut shape = a.shape.clone();
    shape[0] += b.shape[0];
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::new(shape, data)
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// Zero-mean, unit-variance normalization of each last-axis row.
pub fn layer_norm_rows(x: &Tensor) -> Result<Tensor> {
    let mut data = x.data.clone();
    for row in data.chunks_exact_mut(x.last_dim()) {
        layer_norm_in_place(row);
    }
    Tensor::new(x.shape.clone(), data)
}

pub(crate) fn layer_norm_in_place(row: &mut [f64]) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for v in row.iter_mut() {
        *v = (*v - mean) * inv;
    }
}

/// Seeded pseudorandom source: ChaCha8 keyed by `ChaCha8Rng::seed_from_u64`.
///
/// The ChaCha stream is specified independently of platform and word size, so
/// a seed pins every downstream draw.
#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl SeededRng {
    pub const ALGORITHM: &'static str = "ChaCha8 (rand_chacha), seed_from_u64 expansion";

    pub fn new(seed: u64) -> Self {
        SeededRng {
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `(0, 1]` from the top 53 bits.
    pub fn next_unit(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via the Box–Muller transform; both outputs of each
    /// pair are used, in order.
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        let u1 = self.next_unit();
        let u2 = self.next_unit();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

/// Tensor of independent standard-normal draws.
pub fn gaussian(rng: &mut SeededRng, shape: &[usize]) -> Result<Tensor> {
    Tensor::from_fn(shape, |_| rng.next_gaussian())
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_dot() {
        let m = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let i = Tensor::identity(2).unwrap();
        assert_eq!(matmul(&i, &m).unwrap(), m);
        let a = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = SeededRng::new(11);
        let a = gaussian(&mut rng, &[5, 7]).unwrap();
        let b = gaussian(&mut rng, &[7, 3]).unwrap();
        let got = matmul(&a, &b).unwrap();
        for (g, w) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((g - w).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]).unwrap();
        let b = Tensor::zeros(&[2, 3]).unwrap();
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(matmul(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_lastdim(&Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        // exp(k) / (e + e^2 + e^3), evaluated in closed form
        let e = std::f64::consts::E;
        let z = e + e * e + e * e * e;
        let s = softmax_lastdim(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let want = [e / z, e * e / z, e * e * e / z];
        for (g, w) in s.data().iter().zip(want) {
            assert!((g - w).abs() < 1e-15);
        }
        for (g, w) in s.data().iter().zip([0.0900306, 0.2447285, 0.6652410]) {
            assert!((g - w).abs() < 5e-8);
        }

        let s = softmax_lastdim(&Tensor::full(&[3], 1000.0).unwrap()).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_tensors_are_rejected() {
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn maxnorm_examples() {
        let x = Tensor::new(vec![2], vec![0.2, 0.4]).unwrap();
        assert_eq!(maxnorm_frame(&x).unwrap().data(), &[0.5, 1.0]);

        let u = Tensor::full(&[1, 4], 0.3).unwrap();
        assert!(maxnorm_frame(&u).unwrap().data().iter().all(|&v| v == 1.0));

        let two = Tensor::new(vec![2, 2], vec![1.0, 2.0, 8.0, 4.0]).unwrap();
        let got = maxnorm_frame(&two).unwrap();
        let want = [1.0 / 2.0, 2.0 / 2.0, 8.0 / 8.0, 4.0 / 8.0];
        assert_eq!(got.data(), &want);

        let zero = Tensor::new(vec![2, 2], vec![1.0, 2.0, 0.0, 0.0]).unwrap();
        assert!(matches!(maxnorm_frame(&zero), Err(Error::Contract(_))));
    }

    #[test]
    fn gaussian_statistics_and_determinism() {
        let a = gaussian(&mut SeededRng::new(7), &[64]).unwrap();
        let b = gaussian(&mut SeededRng::new(7), &[64]).unwrap();
        assert_eq!(a, b);

        let big = gaussian(&mut SeededRng::new(7), &[100_000]).unwrap();
        let n = big.len() as f64;
        let mean = big.data().iter().sum::<f64>() / n;
        let var = big.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.02, "std {}", var.sqrt());

        let c = gaussian(&mut SeededRng::new(8), &[1000]).unwrap();
        let d = gaussian(&mut SeededRng::new(9), &[1000]).unwrap();
        let differing = c.data().iter().zip(d.data()).filter(|(x, y)| x != y).count();
        assert!(differing >= 990);
    }

    #[test]
    fn concat_and_layer_norm() {
        let a = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = concat_outer(&a, &b).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(concat_outer(&a, &Tensor::zeros(&[1, 3]).unwrap()).is_err());

        let n = layer_norm_rows(&b).unwrap();
        for row in n.rows() {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }
}
