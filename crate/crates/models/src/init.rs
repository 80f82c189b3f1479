//! Parameter initialization. Weights draw from U(-1/sqrt(fan_in),
//! 1/sqrt(fan_in)); recurrent matrices are orthogonalized; biases start at
//! zero.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use threetank_autodiff::Tensor;

/// Uniform fan-in initialization for a weight tensor.
pub fn uniform_fan_in(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    assert!(fan_in > 0, "fan_in must be positive");
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape/data agree by construction")
}

/// Square orthogonal matrix [n, n] via Gram-Schmidt on a random Gaussian
/// matrix. Rows are orthonormal.
pub fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    assert!(n > 0, "orthogonal size must be positive");
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| gaussian(rng)).collect();
        for prev in &rows {
            let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (vi, pi) in v.iter_mut().zip(prev) {
                *vi -= dot * pi;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        // Near-zero residual means the draw was (numerically) dependent on
        // earlier rows; redraw.
        if norm < 1e-8 {
            continue;
        }
        for vi in &mut v {
            *vi /= norm;
        }
        rows.push(v);
    }
    let data: Vec<f64> = rows.into_iter().flatten().collect();
    Tensor::new(&[n, n], data).expect("n*n values")
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}
