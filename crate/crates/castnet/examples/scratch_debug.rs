use castnet::conformal::{CalibrationWindow, ConformalConfig};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn stream_of(
    n: usize,
    h: usize,
    steps: usize,
    drift_per_step: f64,
    seed: u64,
) -> Vec<(Array2<f64>, Array2<f64>)> {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    for (i, b) in b"conformal-stream".iter().enumerate() {
        key[8 + i] = *b;
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    let scales: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 2.3f64).exp()).collect();
    let mut out = Vec::with_capacity(steps);
    for t in 0..steps {
        let drift = drift_per_step * t as f64;
        let mut y = Array2::zeros((n, h));
        let yhat = Array2::zeros((n, h));
        for i in 0..n {
            let shock = standard_normal(&mut rng);
            for s in 0..h {
                let noise = 0.6 * shock + 0.8 * standard_normal(&mut rng);
                let sigma_step = 1.0 + 0.15 * s as f64;
                y[[i, s]] = scales[i] * (noise * sigma_step + drift);
            }
        }
        out.push((y, yhat));
    }
    out
}

fn main() {
    let n = 40;
    let h = 2;
    let stream = stream_of(n, h, 400, 0.004, 31);
    let neighbors: Vec<Vec<usize>> = (0..n).map(|i| vec![(i + 1) % n]).collect();
    for c in [-4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0] {
        let config = ConformalConfig { n_calib: 150, c_adj: c, ..ConformalConfig::default() };
        let mut window = CalibrationWindow::new(neighbors.clone(), h, config).unwrap();
        let mut covered = 0usize;
        let mut total = 0usize;
        let mut width_sum = 0.0;
        for (y, yhat) in &stream {
            if window.buffer_len(0) > 0 {
                for (step, sr) in window.regions(yhat).unwrap().into_iter().enumerate() {
                    for (i, region) in sr.regions.iter().enumerate() {
                        total += 1;
                        width_sum += region.width();
                        if region.covers(y[[i, step]]) {
                            covered += 1;
                        }
                    }
                }
            }
            window.push_block(y, yhat).unwrap();
        }
        println!(
            "c_adj {c:>5}: coverage {:.4} width {:.3}",
            covered as f64 / total as f64,
            width_sum / total as f64
        );
    }
}
