use mmsc_tensor::Tensor;
use rand::Rng;

/// Glorot-uniform `rows × cols` matrix.
pub fn xavier<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

/// Uniform vector in `[-bound, bound)`.
pub fn uniform_vector<R: Rng + ?Sized>(len: usize, bound: f64, rng: &mut R) -> Tensor {
    let data = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::vector(data).expect("positive length")
}
