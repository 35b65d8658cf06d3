//! Multidimensional FFTs on arrays laid out with axis 1 fastest.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

/// In-place d-dimensional FFT (unnormalized in both directions).
pub fn fft_nd(data: &mut [Complex64], shape: &[usize], inverse: bool) {
    let n: usize = shape.iter().product();
    assert_eq!(data.len(), n, "buffer does not match shape");
    let mut planner = FftPlanner::<f64>::new();
    let mut stride = 1usize;
    let mut line = Vec::new();
    for &len in shape {
        let fft = if inverse { planner.plan_fft_inverse(len) } else { planner.plan_fft_forward(len) };
        if stride == 1 {
            fft.process(data);
        } else {
            line.resize(len, Complex64::new(0.0, 0.0));
            let block = stride * len;
            for start in (0..n).step_by(block) {
                for k in 0..stride {
                    for (c, v) in line.iter_mut().enumerate() {
                        *v = data[start + c * stride + k];
                    }
                    fft.process(&mut line);
                    for (c, v) in line.iter().enumerate() {
                        data[start + c * stride + k] = *v;
                    }
                }
            }
        }
        stride *= len;
    }
}

/// Forward FFT of a real array.
pub fn forward_real(values: &[f64], shape: &[usize]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_nd(&mut buf, shape, false);
    buf
}

/// Inverse FFT returning the real part, normalized by the number of points.
pub fn inverse_real(mut spectrum: Vec<Complex64>, shape: &[usize]) -> Vec<f64> {
    fft_nd(&mut spectrum, shape, true);
    let n = spectrum.len() as f64;
    spectrum.iter().map(|c| c.re / n).collect()
}

/// Angular frequency `2 pi k / L` of index `k`, in `(-pi, pi]`.
pub fn frequency(k: usize, len: usize) -> f64 {
    let kk = if 2 * k > len { k as f64 - len as f64 } else { k as f64 };
    2.0 * std::f64::consts::PI * kk / len as f64
}

/// Calls `f(linear index, wave vector)` for every Fourier mode.
pub fn for_each_mode(shape: &[usize], mut f: impl FnMut(usize, &[f64])) {
    let d = shape.len();
    let n: usize = shape.iter().product();
    let mut k = vec![0usize; d];
    let mut w = vec![0.0; d];
    for idx in 0..n {
        for i in 0..d {
            w[i] = frequency(k[i], shape[i]);
        }
        f(idx, &w);
        for i in 0..d {
            k[i] += 1;
            if k[i] < shape[i] {
                break;
            }
            k[i] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let shape = [4, 3, 5];
        let vals: Vec<f64> = (0..60).map(|i| (i as f64 * 0.7).sin()).collect();
        let back = inverse_real(forward_real(&vals, &shape), &shape);
        for (a, b) in vals.iter().zip(&back) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn matches_direct_dft() {
        let shape = [3, 4];
        let vals: Vec<f64> = (0..12).map(|i| ((i * 5) % 7) as f64).collect();
        let spec = forward_real(&vals, &shape);
        for (idx, c) in spec.iter().enumerate() {
            let (k0, k1) = (idx % 3, idx / 3);
            let mut acc = Complex64::new(0.0, 0.0);
            for x1 in 0..4 {
                for x0 in 0..3 {
                    let ph = -2.0 * std::f64::consts::PI * ((k0 * x0) as f64 / 3.0 + (k1 * x1) as f64 / 4.0);
                    acc += Complex64::from_polar(vals[x0 + 3 * x1], ph);
                }
            }
            assert!((acc - c).norm() < 1e-12);
        }
    }

    #[test]
    fn frequencies_are_centered() {
        assert_eq!(frequency(0, 8), 0.0);
        assert!((frequency(4, 8) - std::f64::consts::PI).abs() < 1e-15);
        assert!(frequency(5, 8) < 0.0);
    }
}
