//! Dense matrix exponential by scaling and squaring with a Taylor kernel.
//!
//! The argument is scaled by a power of two until its Frobenius norm is at
//! most 0.5, the series is summed to machine precision (it converges in
//! under twenty terms at that norm), and the result is squared back up.

use ndarray::Array2;

pub fn expm(m: &Array2<f64>) -> Array2<f64> {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "expm requires a square matrix");
    let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    let squarings = if norm <= 0.5 {
        0
    } else {
        (norm / 0.5).log2().ceil() as u32
    };
    let scaled = m.mapv(|v| v / f64::powi(2.0, squarings as i32));

    let mut result = Array2::<f64>::eye(n);
    let mut term = Array2::<f64>::eye(n);
    for k in 1..=60 {
        term = term.dot(&scaled).mapv(|v| v / k as f64);
        result = result + &term;
        let term_norm = term.iter().map(|v| v * v).sum::<f64>().sqrt();
        let result_norm = result.iter().map(|v| v * v).sum::<f64>().sqrt();
        if term_norm <= f64::EPSILON * result_norm {
            break;
        }
    }
    for _ in 0..squarings {
        result = result.dot(&result);
    }
    result
}
