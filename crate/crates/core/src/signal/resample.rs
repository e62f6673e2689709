//! Kaiser-windowed polyphase sinc resampler.
//!
//! Rate ratios are reduced to a rational p/q with denominator <= 1000; the
//! prototype lowpass has 64 taps per phase and each polyphase branch is
//! normalized to unit DC gain, so passband amplitudes survive the rate
//! change.

use super::SignalError;

const TAPS_PER_PHASE: usize = 64;
const KAISER_BETA: f64 = 8.6;

/// Resample `x` from `from_hz` to `to_hz`. Output length is
/// `floor(len * p / q)` for the reduced ratio `p/q = to/from`.
pub fn resample(x: &[f64], from_hz: f64, to_hz: f64) -> Result<Vec<f64>, SignalError> {
    if from_hz <= 0.0 || to_hz <= 0.0 {
        return Err(SignalError::BadSampleRate {
            rate: from_hz.min(to_hz),
        });
    }
    if (from_hz - to_hz).abs() < 1e-9 * from_hz {
        return Ok(x.to_vec());
    }
    let (p, q) = rational_approx(to_hz / from_hz, 1000).ok_or(SignalError::BadRateRatio {
        from: from_hz,
        to: to_hz,
    })?;
    let half = (TAPS_PER_PHASE / 2) * p; // prototype half-width in upsampled samples
    let proto = prototype(p, q, half);
    // per-phase DC normalization
    let mut phase_sums = vec![0f64; p];
    for (j, &h) in proto.iter().enumerate() {
        phase_sums[j % p] += h;
    }

    let pad = TAPS_PER_PHASE / 2 + 1;
    let n = x.len();
    if n < pad + 1 {
        return Err(SignalError::TooShortForPad { len: n, pad });
    }
    let mut padded = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        padded.push(x[i]);
    }
    padded.extend_from_slice(x);
    for i in 0..pad {
        padded.push(x[n - 2 - i]);
    }

    let n_out = n * p / q;
    let mut out = Vec::with_capacity(n_out);
    let center = half as isize;
    for m in 0..n_out {
        let up_pos = m * q; // position on the upsampled grid
        let phase = up_pos % p;
        let norm = phase_sums[phase];
        // taps h[up_pos - i*p + half] for input samples i
        let i_min = ((up_pos as isize - center) + p as isize - 1).div_euclid(p as isize);
        let i_max = (up_pos as isize + center).div_euclid(p as isize);
        let mut acc = 0f64;
        for i in i_min..=i_max {
            let tap = (up_pos as isize - i * p as isize + center) as usize;
            let xi = padded[(i + pad as isize) as usize];
            acc += xi * proto[tap];
        }
        out.push(acc / norm);
    }
    Ok(out)
}

/// Windowed-sinc prototype lowpass at the upsampled rate, length `2*half+1`.
fn prototype(p: usize, q: usize, half: usize) -> Vec<f64> {
    let fc = 0.5 / (p.max(q) as f64); // cycles per upsampled sample
    let denom = bessel_i0(KAISER_BETA);
    (0..=2 * half)
        .map(|t| {
            let j = t as f64 - half as f64;
            let u = j / half as f64;
            let w = bessel_i0(KAISER_BETA * (1.0 - u * u).max(0.0).sqrt()) / denom;
            2.0 * fc * sinc(2.0 * fc * j) * w * p as f64
        })
        .collect()
}

fn sinc(u: f64) -> f64 {
    if u.abs() < 1e-12 {
        1.0
    } else {
        let pu = std::f64::consts::PI * u;
        pu.sin() / pu
    }
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < 1e-16 * sum {
            break;
        }
    }
    sum
}

/// Best rational approximation p/q of `x` with `q <= max_den`, by continued
/// fractions.
fn rational_approx(x: f64, max_den: u64) -> Option<(usize, usize)> {
    if !(x.is_finite() && x > 0.0) {
        return None;
    }
    let (mut h0, mut k0, mut h1, mut k1) = (0u64, 1u64, 1u64, 0u64);
    let mut frac = x;
    for _ in 0..64 {
        let a = frac.floor() as u64;
        let h2 = a.checked_mul(h1).and_then(|v| v.checked_add(h0))?;
        let k2 = a.checked_mul(k1).and_then(|v| v.checked_add(k0))?;
        if k2 > max_den {
            break;
        }
        h0 = h1;
        k0 = k1;
        h1 = h2;
        k1 = k2;
        let rem = frac - a as f64;
        if rem.abs() < 1e-12 {
            break;
        }
        frac = 1.0 / rem;
    }
    if h1 == 0 || k1 == 0 {
        return None;
    }
    Some((h1 as usize, k1 as usize))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, rate: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / rate).sin())
            .collect()
    }

    #[test]
    fn ratio_reduction() {
        assert_eq!(rational_approx(0.5, 1000), Some((1, 2)));
        assert_eq!(rational_approx(128.0 / 250.0, 1000), Some((64, 125)));
        assert_eq!(rational_approx(2.0, 1000), Some((2, 1)));
    }

    #[test]
    fn identity_when_rates_match() {
        let x = sine(10.0, 128.0, 256);
        let y = resample(&x, 128.0, 128.0).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn halving_preserves_a_passband_tone() {
        let x = sine(10.0, 256.0, 2048);
        let y = resample(&x, 256.0, 128.0).unwrap();
        assert_eq!(y.len(), 1024);
        let want = sine(10.0, 128.0, 1024);
        let err: f64 = y
            .iter()
            .zip(&want)
            .skip(64)
            .take(896)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / 896.0;
        assert!(err.sqrt() < 1e-3, "rmse {}", err.sqrt());
    }

    #[test]
    fn fractional_ratio_preserves_amplitude() {
        let x = sine(10.0, 250.0, 2500);
        let y = resample(&x, 250.0, 128.0).unwrap();
        assert_eq!(y.len(), 2500 * 64 / 125);
        let interior = &y[y.len() / 4..3 * y.len() / 4];
        let peak = interior.iter().fold(0f64, |m, v| m.max(v.abs()));
        assert!((peak - 1.0).abs() < 0.01, "peak {peak}");
    }

    #[test]
    fn dc_is_preserved() {
        let x = vec![3.25; 1000];
        let y = resample(&x, 256.0, 128.0).unwrap();
        for v in &y[10..y.len() - 10] {
            assert!((v - 3.25).abs() < 1e-9, "{v}");
        }
    }
}
