//! Dense row-major matrices and the handful of differentiable primitives the
//! models need. Every primitive with a backward pass is covered by
//! [`grad_check`] in the tests.

use serde::{Deserialize, Serialize};

use crate::distributions::Categorical;
use crate::error::{Error, Result};

/// Floor applied to probabilities before taking a logarithm.
pub const LOG_CLIP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                format!("{rows}x{cols} (= {})", rows * cols),
                format!("data of length {}", data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite matrix entry {v}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::dim(
                format!("row of length {cols}"),
                format!("row of length {}", bad.len()),
            ));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }
}

/// A value together with the gradient of some scalar objective with respect to it.
#[derive(Debug, Clone, PartialEq)]
pub struct GradPair {
    pub value: Tensor2,
    pub grad: Tensor2,
}

impl GradPair {
    pub fn new(value: Tensor2, grad: Tensor2) -> Result<Self> {
        if value.shape() != grad.shape() {
            return Err(Error::dim(value.shape_str(), grad.shape_str()));
        }
        Ok(Self { value, grad })
    }
}

pub fn matmul(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    if a.cols != b.rows {
        return Err(Error::dim(
            format!("lhs {}", a.shape_str()),
            format!("rhs {}", b.shape_str()),
        ));
    }
    let mut out = Tensor2::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// `a^T b` without materializing the transpose.
pub fn matmul_tn(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    if a.rows != b.rows {
        return Err(Error::dim(
            format!("lhs^T of {}", a.shape_str()),
            format!("rhs {}", b.shape_str()),
        ));
    }
    let mut out = Tensor2::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let a_row = a.row(r);
        let b_row = b.row(r);
        for (i, &av) in a_row.iter().enumerate() {
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// `a b^T` without materializing the transpose.
pub fn matmul_nt(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    if a.cols != b.cols {
        return Err(Error::dim(
            format!("lhs {}", a.shape_str()),
            format!("rhs^T of {}", b.shape_str()),
        ));
    }
    let mut out = Tensor2::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(a.row(i), b.row(j));
        }
    }
    Ok(out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Max-shifted softmax on a raw slice. Callers guarantee finiteness.
pub(crate) fn softmax_raw(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

pub fn softmax(logits: &[f64]) -> Result<Categorical> {
    if logits.len() < 2 {
        return Err(Error::arg(format!(
            "softmax needs at least 2 logits, got {}",
            logits.len()
        )));
    }
    if let Some(v) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logit {v}")));
    }
    Ok(Categorical::from_trusted(softmax_raw(logits)))
}

/// Vector-Jacobian product of softmax: given `s = softmax(l)` and `g = dL/ds`,
/// returns `dL/dl = s ⊙ (g − ⟨g, s⟩)`.
pub fn softmax_vjp(s: &[f64], g: &[f64]) -> Vec<f64> {
    let inner = dot(s, g);
    s.iter().zip(g).map(|(&si, &gi)| si * (gi - inner)).collect()
}

/// `-ln p[label]` with the probability clipped below at [`LOG_CLIP`].
pub fn cross_entropy(probs: &[f64], label: usize) -> f64 {
    -probs[label].max(LOG_CLIP).ln()
}

pub fn tanh_forward(x: &Tensor2) -> Tensor2 {
    x.map(f64::tanh)
}

/// Backward of tanh given its output `y = tanh(x)` and upstream gradient.
pub fn tanh_backward(y: &Tensor2, upstream: &Tensor2) -> Tensor2 {
    let data = y
        .data
        .iter()
        .zip(&upstream.data)
        .map(|(&yv, &g)| g * (1.0 - yv * yv))
        .collect();
    Tensor2 {
        rows: y.rows,
        cols: y.cols,
        data,
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for positive targets.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Unbiased sample covariance of the rows (observations) of `x`.
pub fn covariance(x: &Tensor2) -> Result<Tensor2> {
    if x.rows < 2 {
        return Err(Error::arg(format!("covariance needs ≥ 2 observations, got {}", x.rows)));
    }
    let n = x.rows as f64;
    let mut mean = vec![0.0; x.cols];
    for r in 0..x.rows {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v / n;
        }
    }
    let mut out = Tensor2::zeros(x.cols, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        for i in 0..x.cols {
            let di = row[i] - mean[i];
            for j in 0..x.cols {
                out.data[i * x.cols + j] += di * (row[j] - mean[j]) / (n - 1.0);
            }
        }
    }
    Ok(out)
}

/// Determinant by Gaussian elimination with partial pivoting.
pub fn determinant(a: &Tensor2) -> Result<f64> {
    if a.rows != a.cols {
        return Err(Error::dim(a.shape_str(), "a square matrix"));
    }
    let n = a.rows;
    let mut m = a.data.clone();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .unwrap_or(col);
        if m[pivot * n + col] == 0.0 {
            return Ok(0.0);
        }
        if pivot != col {
            for k in 0..n {
                m.swap(col * n + k, pivot * n + k);
            }
            det = -det;
        }
        let p = m[col * n + col];
        det *= p;
        for r in col + 1..n {
            let f = m[r * n + col] / p;
            for k in col..n {
                m[r * n + k] -= f * m[col * n + k];
            }
        }
    }
    Ok(det)
}

/// Compares an analytic gradient against central finite differences.
///
/// `f` returns the objective value and its analytic gradient at the given
/// parameters. The result is the maximum over coordinates of
/// `|analytic − numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, theta: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    if !(h > 0.0 && h <= 1e-2) {
        return Err(Error::arg(format!("step {h} outside (0, 1e-2]")));
    }
    let (value, analytic) = f(theta);
    if !value.is_finite() {
        return Err(Error::Numeric(format!("objective is {value} at theta")));
    }
    if analytic.len() != theta.len() {
        return Err(Error::dim(
            format!("{} parameters", theta.len()),
            format!("gradient of length {}", analytic.len()),
        ));
    }
    let mut probe = theta.to_vec();
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let plus = f(&probe).0;
        probe[i] = theta[i] - h;
        let minus = f(&probe).0;
        probe[i] = theta[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "objective non-finite at coordinate {i} ± {h}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor2 {
        let data = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor2::new(rows, cols, data).unwrap()
    }

    fn triple_loop(a: &Tensor2, b: &Tensor2) -> Tensor2 {
        let mut out = Tensor2::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_trivial() {
        let m = Tensor2::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Tensor2::identity(2), &m).unwrap(), m);
        let a = Tensor2::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = Tensor2::from_rows(&[vec![0.0], vec![5.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = random(3, 4, &mut rng);
            let b = random(4, 2, &mut rng);
            let fast = matmul(&a, &b).unwrap();
            let slow = triple_loop(&a, &b);
            for (x, y) in fast.data().iter().zip(slow.data()) {
                assert!((x - y).abs() < 1e-12);
            }
            let tn = matmul_tn(&a.transpose(), &b).unwrap();
            let nt = matmul_nt(&a, &b.transpose()).unwrap();
            for ((x, y), z) in tn.data().iter().zip(nt.data()).zip(slow.data()) {
                assert!((x - z).abs() < 1e-12 && (y - z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor2::zeros(2, 3), &Tensor2::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("rhs 2x3"), "{msg}");
    }

    #[test]
    fn tensor_rejects_bad_length_and_nan() {
        assert!(matches!(
            Tensor2::new(2, 2, vec![0.0; 3]),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            Tensor2::new(1, 2, vec![0.0, f64::NAN]),
            Err(Error::Numeric(_))
        ));
        assert!(GradPair::new(Tensor2::zeros(2, 2), Tensor2::zeros(2, 1)).is_err());
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for &v in p.probs() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!((p.probs()[0] - 1.0).abs() < 1e-15);
        assert!(p.probs()[1] >= 0.0 && p.probs()[1] < 1e-300);
        assert!(softmax(&[f64::INFINITY, 0.0]).is_err());
        assert!(softmax(&[f64::NAN, 0.0]).is_err());
    }

    /// Oracle: log-sum-exp evaluated with Neumaier-compensated summation over
    /// terms sorted by magnitude, independent of the max-shift path.
    fn softmax_oracle(logits: &[f64]) -> Vec<f64> {
        let mut terms: Vec<f64> = logits.iter().map(|l| l.exp()).collect();
        terms.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for t in terms {
            let s = sum + t;
            if sum.abs() >= t.abs() {
                comp += (sum - s) + t;
            } else {
                comp += (t - s) + sum;
            }
            sum = s;
        }
        let total = sum + comp;
        logits.iter().map(|l| l.exp() / total).collect()
    }

    #[test]
    fn softmax_matches_compensated_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let logits: Vec<f64> = (0..5).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let p = softmax(&logits).unwrap();
            for (a, b) in p.probs().iter().zip(softmax_oracle(&logits)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grad_check_trivial_cases() {
        let err = grad_check(|t| (t[0] * t[0], vec![2.0 * t[0]]), &[3.0], 1e-5).unwrap();
        assert!(err < 1e-8);
        let err = grad_check(|_| (4.0, vec![0.0, 0.0]), &[1.0, -1.0], 1e-5).unwrap();
        assert_eq!(err, 0.0);
        assert!(grad_check(|t| (t[0], vec![1.0]), &[0.0], 0.0).is_err());
        assert!(grad_check(|t| (t[0], vec![1.0]), &[0.0], 0.1).is_err());
        let blowup = grad_check(
            |t| (if t[0] > 0.0 { f64::NAN } else { 0.0 }, vec![0.0]),
            &[0.0],
            1e-5,
        );
        assert!(matches!(blowup, Err(Error::Numeric(_))));
    }

    /// Tiny two-layer tanh MLP with softmax cross-entropy, all parameters
    /// packed in one vector; backward pass written with the primitives above.
    fn mlp_loss(theta: &[f64], x: &Tensor2, labels: &[usize]) -> (f64, Vec<f64>) {
        let (d_in, d_hid, c) = (x.cols(), 5, 3);
        let w1 = Tensor2::new(d_in, d_hid, theta[..d_in * d_hid].to_vec()).unwrap();
        let off = d_in * d_hid;
        let w2 = Tensor2::new(d_hid, c, theta[off..off + d_hid * c].to_vec()).unwrap();
        let h = tanh_forward(&matmul(x, &w1).unwrap());
        let logits = matmul(&h, &w2).unwrap();
        let n = x.rows() as f64;
        let mut loss = 0.0;
        let mut dlogits = Tensor2::zeros(x.rows(), c);
        for (i, &y) in labels.iter().enumerate() {
            let s = softmax_raw(logits.row(i));
            loss += cross_entropy(&s, y) / n;
            let mut g = vec![0.0; c];
            g[y] = -1.0 / (s[y] * n);
            dlogits.row_mut(i).copy_from_slice(&softmax_vjp(&s, &g));
        }
        let dw2 = matmul_tn(&h, &dlogits).unwrap();
        let dh = matmul_nt(&dlogits, &w2).unwrap();
        let dpre = tanh_backward(&h, &dh);
        let dw1 = matmul_tn(x, &dpre).unwrap();
        let mut grad = dw1.into_data();
        grad.extend(dw2.into_data());
        (loss, grad)
    }

    #[test]
    fn mlp_cross_entropy_gradient_passes_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let x = random(6, 4, &mut rng);
            let labels: Vec<usize> = (0..6).map(|_| rng.gen_range(0..3)).collect();
            let theta: Vec<f64> = (0..4 * 5 + 5 * 3).map(|_| rng.gen_range(-0.8..0.8)).collect();
            let err = grad_check(|t| mlp_loss(t, &x, &labels), &theta, 1e-5).unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn covariance_and_determinant() {
        let x = Tensor2::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0], vec![5.0, 10.0]]).unwrap();
        let cov = covariance(&x).unwrap();
        assert_eq!(cov.data(), &[4.0, 8.0, 8.0, 16.0]);
        assert_eq!(determinant(&cov).unwrap(), 0.0);
        let a = Tensor2::from_rows(&[vec![0.0, 2.0, 1.0], vec![1.0, 1.0, 0.0], vec![3.0, 0.0, 1.0]]).unwrap();
        // Cofactor expansion along the first row: 0·1 − 2·(1 − 0) + 1·(0 − 3) = −5.
        assert!((determinant(&a).unwrap() + 5.0).abs() < 1e-12);
        assert!(covariance(&Tensor2::zeros(1, 2)).is_err());
    }

    #[test]
    fn softplus_roundtrip_and_sigmoid() {
        for &y in &[1e-4, 0.05, 1.0, 10.0, 40.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() / y < 1e-10);
        }
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(3, 4, &mut rng);
            let b = random(4, 5, &mut rng);
            let c = random(5, 2, &mut rng);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }

        #[test]
        fn softmax_valid_and_shift_invariant(
            logits in prop::collection::vec(-1000.0f64..1000.0, 2..10),
            shift in -50.0f64..50.0,
        ) {
            let p = softmax(&logits).unwrap();
            let sum: f64 = p.probs().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(p.probs().iter().all(|&v| v >= 0.0));
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.probs().iter().zip(q.probs()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
