//! Preprocessing and frequency-band decomposition.
//!
//! The whole pipeline is a single linear-phase frequency-domain operation
//! per channel: reflect-pad, real FFT, multiply by a gain curve, inverse
//! FFT, crop. The gain curve is either the 0.5–45 Hz bandpass combined with
//! a power-line notch (preprocessing) or one of the five band masks
//! (decomposition). Adjacent band masks crossfade with raised cosines that
//! sum to one, so the five band outputs reconstruct the bandpassed signal.

mod resample;

pub use resample::resample;

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Canonical EEG frequency bands, in vocabulary order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BandId {
    Delta,
    Theta,
    Alpha,
    Beta,
    Gamma,
}

impl BandId {
    pub const ALL: [BandId; 5] = [
        BandId::Delta,
        BandId::Theta,
        BandId::Alpha,
        BandId::Beta,
        BandId::Gamma,
    ];

    pub fn index(self) -> usize {
        match self {
            BandId::Delta => 0,
            BandId::Theta => 1,
            BandId::Alpha => 2,
            BandId::Beta => 3,
            BandId::Gamma => 4,
        }
    }

    pub fn from_index(i: usize) -> Option<BandId> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            BandId::Delta => "delta",
            BandId::Theta => "theta",
            BandId::Alpha => "alpha",
            BandId::Beta => "beta",
            BandId::Gamma => "gamma",
        }
    }

    /// Band edges in Hz.
    pub fn edges(self) -> (f64, f64) {
        match self {
            BandId::Delta => (0.5, 4.0),
            BandId::Theta => (4.0, 8.0),
            BandId::Alpha => (8.0, 13.0),
            BandId::Beta => (13.0, 30.0),
            BandId::Gamma => (30.0, 45.0),
        }
    }
}

impl std::fmt::Display for BandId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for BandId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "delta" => Ok(BandId::Delta),
            "theta" => Ok(BandId::Theta),
            "alpha" => Ok(BandId::Alpha),
            "beta" => Ok(BandId::Beta),
            "gamma" => Ok(BandId::Gamma),
            other => Err(format!("unknown band `{other}`")),
        }
    }
}

/// Recording context carried alongside the waveform. Free-form strings here;
/// the `tokens` module maps them onto fixed vocabularies.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordingMeta {
    pub subject: String,
    pub reference: String,
    pub task_label: String,
    pub phase: String,
    pub line_freq: f64,
}

/// Multi-channel EEG segment: channels x time samples, a sample rate, montage
/// labels, and recording metadata. Samples are microvolts on ingestion and
/// scaled units after [`preprocess`].
#[derive(Debug, Clone, PartialEq)]
pub struct EegSegment {
    pub samples: Vec<Vec<f64>>,
    pub sample_rate: f64,
    pub channel_names: Vec<String>,
    pub meta: RecordingMeta,
}

impl EegSegment {
    pub fn new(
        samples: Vec<Vec<f64>>,
        sample_rate: f64,
        channel_names: Vec<String>,
        meta: RecordingMeta,
    ) -> Result<Self, SignalError> {
        if sample_rate <= 0.0 {
            return Err(SignalError::BadSampleRate { rate: sample_rate });
        }
        if channel_names.len() != samples.len() {
            return Err(SignalError::ChannelNameCount {
                names: channel_names.len(),
                channels: samples.len(),
            });
        }
        let len = samples.first().map(|c| c.len()).unwrap_or(0);
        if samples.iter().any(|c| c.len() != len) {
            return Err(SignalError::RaggedChannels);
        }
        Ok(EegSegment {
            samples,
            sample_rate,
            channel_names,
            meta,
        })
    }

    pub fn num_channels(&self) -> usize {
        self.samples.len()
    }

    pub fn num_samples(&self) -> usize {
        self.samples.first().map(|c| c.len()).unwrap_or(0)
    }
}

/// One band's frequency mask: unity strictly inside the band, raised-cosine
/// ramps of width `taper_lo`/`taper_hi` centered on the edges, zero outside.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandSpec {
    pub band: BandId,
    pub lo: f64,
    pub hi: f64,
    pub taper_lo: f64,
    pub taper_hi: f64,
}

/// Default crossfade width in Hz. The delta low edge uses a narrower taper
/// so the ramp stays above 0 Hz.
pub const TAPER_WIDTH: f64 = 1.0;
pub const DELTA_EDGE_TAPER: f64 = 0.5;

impl BandSpec {
    /// Canonical spec for a band: shared 1 Hz crossfades at interior edges,
    /// 0.5 Hz at the 0.5 Hz delta edge.
    pub fn canonical(band: BandId) -> BandSpec {
        let (lo, hi) = band.edges();
        let taper_lo = if band == BandId::Delta {
            DELTA_EDGE_TAPER
        } else {
            TAPER_WIDTH
        };
        BandSpec {
            band,
            lo,
            hi,
            taper_lo,
            taper_hi: TAPER_WIDTH,
        }
    }

    pub fn canonical_all() -> [BandSpec; 5] {
        BandId::ALL.map(BandSpec::canonical)
    }

    fn validate(&self) -> Result<(), SignalError> {
        if !(self.lo > 0.0 && self.lo < self.hi) {
            return Err(SignalError::BadBandEdges {
                lo: self.lo,
                hi: self.hi,
            });
        }
        if (self.taper_lo + self.taper_hi) / 2.0 >= self.hi - self.lo {
            return Err(SignalError::TaperTooWide {
                taper: self.taper_lo.max(self.taper_hi),
                width: self.hi - self.lo,
            });
        }
        Ok(())
    }

    /// Mask gain at frequency `f` in Hz.
    pub fn gain(&self, f: f64) -> f64 {
        raised_cosine_gain(f, self.lo, self.taper_lo, self.hi, self.taper_hi)
    }
}

/// One band-limited channel set, same shape as its source segment.
#[derive(Debug, Clone, PartialEq)]
pub struct BandWaveform {
    pub band: BandId,
    pub samples: Vec<Vec<f64>>,
    pub sample_rate: f64,
}

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("sample rate {rate} Hz is not positive")]
    BadSampleRate { rate: f64 },
    #[error("{names} channel names for {channels} channels")]
    ChannelNameCount { names: usize, channels: usize },
    #[error("channels have unequal lengths")]
    RaggedChannels,
    #[error("non-finite sample in channel {channel}")]
    NonFiniteSample { channel: usize },
    #[error("sample rate {rate} Hz below the Nyquist requirement {need} Hz")]
    BelowNyquist { rate: f64, need: f64 },
    #[error("line frequency {freq} Hz is not 50 or 60")]
    BadLineFreq { freq: f64 },
    #[error("band edges {lo}..{hi} Hz are invalid")]
    BadBandEdges { lo: f64, hi: f64 },
    #[error("taper width {taper} Hz too wide for band width {width} Hz")]
    TaperTooWide { taper: f64, width: f64 },
    #[error("channel length {len} shorter than pad length {pad}")]
    TooShortForPad { len: usize, pad: usize },
    #[error("scale factor {s} is not positive")]
    BadScale { s: f64 },
    #[error("cannot represent rate ratio {from} -> {to} with denominator <= 1000")]
    BadRateRatio { from: f64, to: f64 },
}

/// Raised-cosine edge pair: 0 below `lo - taper_lo/2`, ramp to 1 at
/// `lo + taper_lo/2`, flat, ramp down around `hi`, 0 above `hi + taper_hi/2`.
/// Crossfades centered on a shared edge sum to one.
fn raised_cosine_gain(f: f64, lo: f64, taper_lo: f64, hi: f64, taper_hi: f64) -> f64 {
    let lo_a = lo - taper_lo / 2.0;
    let lo_b = lo + taper_lo / 2.0;
    let hi_a = hi - taper_hi / 2.0;
    let hi_b = hi + taper_hi / 2.0;
    if f <= lo_a || f >= hi_b {
        0.0
    } else if f < lo_b {
        0.5 * (1.0 - (std::f64::consts::PI * (f - lo_a) / taper_lo).cos())
    } else if f <= hi_a {
        1.0
    } else {
        0.5 * (1.0 + (std::f64::consts::PI * (f - hi_a) / taper_hi).cos())
    }
}

/// Sampled band mask over real-FFT bins: `num_bins` bins spaced `bin_hz`
/// apart, starting at DC.
pub fn band_mask(num_bins: usize, bin_hz: f64, spec: &BandSpec) -> Result<Vec<f64>, SignalError> {
    spec.validate()?;
    Ok((0..num_bins).map(|i| spec.gain(i as f64 * bin_hz)).collect())
}

/// 0.5–45 Hz bandpass gain with the same edge tapers as the canonical band
/// set, so the five band masks sum to this curve inside the passband.
pub fn bandpass_gain(f: f64) -> f64 {
    raised_cosine_gain(f, 0.5, DELTA_EDGE_TAPER, 45.0, TAPER_WIDTH)
}

/// Cosine-tapered notch: zero at `line_freq`, unity beyond +-1 Hz.
fn notch_gain(f: f64, line_freq: f64) -> f64 {
    let d = (f - line_freq).abs();
    if d >= 1.0 {
        1.0
    } else {
        0.5 * (1.0 - (std::f64::consts::PI * d).cos())
    }
}

fn reflect_pad(x: &[f64], pad: usize) -> Result<Vec<f64>, SignalError> {
    let n = x.len();
    if n < pad + 1 {
        return Err(SignalError::TooShortForPad { len: n, pad });
    }
    let mut out = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        out.push(x[i]);
    }
    out.extend_from_slice(x);
    for i in 0..pad {
        out.push(x[n - 2 - i]);
    }
    Ok(out)
}

/// Reflect-pad with the channel mean removed and the pads cosine-faded to
/// zero. The fade makes the FFT's periodic extension continuous, which keeps
/// boundary leakage out of neighboring bands; the mean is outside the
/// passband in every use of this pipeline, so removing it up front only
/// improves the pad behavior.
fn prepare_padded(x: &[f64], pad: usize) -> Result<Vec<f64>, SignalError> {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n.max(1) as f64;
    let centered: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let mut padded = reflect_pad(&centered, pad)?;
    for j in 0..pad {
        let w = 0.5 * (1.0 - (std::f64::consts::PI * j as f64 / pad as f64).cos());
        padded[j] *= w;
        padded[n + 2 * pad - 1 - j] *= w;
    }
    Ok(padded)
}

/// Reflect-pad, FFT, multiply the spectrum by `gain(f)`, inverse FFT, crop.
fn filter_channel(
    x: &[f64],
    sample_rate: f64,
    pad: usize,
    gain: &dyn Fn(f64) -> f64,
) -> Result<Vec<f64>, SignalError> {
    let padded = prepare_padded(x, pad)?;
    let n = padded.len();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let ifft = planner.plan_fft_inverse(n);
    let mut buf: Vec<Complex<f64>> = padded.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft.process(&mut buf);
    let bin_hz = sample_rate / n as f64;
    for (i, c) in buf.iter_mut().enumerate() {
        let f = (i.min(n - i)) as f64 * bin_hz;
        let g = gain(f);
        *c = *c * g;
    }
    ifft.process(&mut buf);
    let scale = 1.0 / n as f64;
    Ok(buf[pad..pad + x.len()].iter().map(|c| c.re * scale).collect())
}

/// Notch at the power-line frequency, bandpass to 0.5–45 Hz, resample to
/// `target_rate`, and divide by the scale factor `s`.
///
/// The notch and bandpass share one FFT pass at the original rate; the
/// resampler is a Kaiser-windowed polyphase sinc interpolator.
pub fn preprocess(
    raw: &EegSegment,
    line_freq: f64,
    target_rate: f64,
    s: f64,
) -> Result<EegSegment, SignalError> {
    if line_freq != 50.0 && line_freq != 60.0 {
        return Err(SignalError::BadLineFreq { freq: line_freq });
    }
    if raw.sample_rate < 2.0 * 45.0 {
        return Err(SignalError::BelowNyquist {
            rate: raw.sample_rate,
            need: 90.0,
        });
    }
    if s <= 0.0 {
        return Err(SignalError::BadScale { s });
    }
    for (ch, row) in raw.samples.iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(SignalError::NonFiniteSample { channel: ch });
        }
    }
    let pad = raw.sample_rate.round() as usize;
    let gain = |f: f64| bandpass_gain(f) * notch_gain(f, line_freq);
    let mut out = Vec::with_capacity(raw.samples.len());
    for row in &raw.samples {
        let filtered = filter_channel(row, raw.sample_rate, pad, &gain)?;
        let resampled = resample(&filtered, raw.sample_rate, target_rate)?;
        out.push(resampled.iter().map(|v| v / s).collect());
    }
    EegSegment::new(
        out,
        target_rate,
        raw.channel_names.clone(),
        raw.meta.clone(),
    )
}

/// Decompose every channel into the five canonical bands. Output lengths
/// equal the input length; summing the five outputs reconstructs the
/// 0.5–45 Hz bandpassed input.
pub fn band_decompose(seg: &EegSegment) -> Result<[BandWaveform; 5], SignalError> {
    let pad = seg.sample_rate.round() as usize;
    let specs = BandSpec::canonical_all();
    for spec in &specs {
        spec.validate()?;
    }
    let n_ch = seg.num_channels();
    let mut bands: Vec<BandWaveform> = specs
        .iter()
        .map(|spec| BandWaveform {
            band: spec.band,
            samples: Vec::with_capacity(n_ch),
            sample_rate: seg.sample_rate,
        })
        .collect();
    let mut planner = FftPlanner::new();
    for row in &seg.samples {
        let padded = prepare_padded(row, pad)?;
        let n = padded.len();
        let fft = planner.plan_fft_forward(n);
        let ifft = planner.plan_fft_inverse(n);
        let mut spectrum: Vec<Complex<f64>> =
            padded.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft.process(&mut spectrum);
        let bin_hz = seg.sample_rate / n as f64;
        let scale = 1.0 / n as f64;
        for (b, spec) in specs.iter().enumerate() {
            let mut buf: Vec<Complex<f64>> = spectrum
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let f = (i.min(n - i)) as f64 * bin_hz;
                    *c * spec.gain(f)
                })
                .collect();
            ifft.process(&mut buf);
            bands[b]
                .samples
                .push(buf[pad..pad + row.len()].iter().map(|c| c.re * scale).collect());
        }
    }
    let mut iter = bands.into_iter();
    Ok([
        iter.next().unwrap(),
        iter.next().unwrap(),
        iter.next().unwrap(),
        iter.next().unwrap(),
        iter.next().unwrap(),
    ])
}

/// Apply only the 0.5–45 Hz bandpass (no notch, no resampling). This is the
/// reference the summed band outputs are compared against.
pub fn bandpass(seg: &EegSegment) -> Result<EegSegment, SignalError> {
    let pad = seg.sample_rate.round() as usize;
    let mut out = Vec::with_capacity(seg.samples.len());
    for row in &seg.samples {
        out.push(filter_channel(row, seg.sample_rate, pad, &bandpass_gain)?);
    }
    EegSegment::new(
        out,
        seg.sample_rate,
        seg.channel_names.clone(),
        seg.meta.clone(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(rows: Vec<Vec<f64>>, rate: f64) -> EegSegment {
        let names = (0..rows.len()).map(|i| format!("ch{i}")).collect();
        EegSegment::new(rows, rate, names, RecordingMeta::default()).unwrap()
    }

    fn sine(freq: f64, rate: f64, n: usize, amp: f64) -> Vec<f64> {
        (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / rate).sin())
            .collect()
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    #[test]
    fn dc_input_is_removed() {
        let raw = seg(vec![vec![100.0; 1024]], 256.0);
        let out = preprocess(&raw, 50.0, 128.0, 1.0).unwrap();
        let peak = out.samples[0].iter().fold(0f64, |m, v| m.max(v.abs()));
        assert!(peak < 1.0, "residual DC peak {peak}");
    }

    #[test]
    fn line_frequency_is_notched() {
        let raw = seg(vec![sine(50.0, 256.0, 2048, 1.0)], 256.0);
        let out = preprocess(&raw, 50.0, 128.0, 1.0).unwrap();
        let residual = rms(&out.samples[0]);
        let input = rms(&raw.samples[0]);
        assert!(residual <= 0.05 * input, "residual {residual}");
    }

    #[test]
    fn passband_amplitude_scales_by_s() {
        // 200 uV at 10 Hz with s = 100 -> peak ~ 2.0 in scaled units
        let raw = seg(vec![sine(10.0, 256.0, 2048, 200.0)], 256.0);
        let out = preprocess(&raw, 50.0, 128.0, 100.0).unwrap();
        let n = out.samples[0].len();
        let interior = &out.samples[0][n / 4..3 * n / 4];
        let peak = interior.iter().fold(0f64, |m, v| m.max(v.abs()));
        assert!((peak - 2.0).abs() < 0.05, "peak {peak}");
    }

    #[test]
    fn rejects_sub_nyquist_rate() {
        let raw = seg(vec![vec![0.0; 512]], 80.0);
        assert!(matches!(
            preprocess(&raw, 50.0, 128.0, 100.0),
            Err(SignalError::BelowNyquist { .. })
        ));
    }

    #[test]
    fn rejects_non_finite_samples() {
        let raw = seg(vec![vec![0.0, f64::NAN, 0.0, 0.0]], 256.0);
        assert!(matches!(
            preprocess(&raw, 60.0, 128.0, 100.0),
            Err(SignalError::NonFiniteSample { channel: 0 })
        ));
    }

    #[test]
    fn alpha_mask_values() {
        let spec = BandSpec::canonical(BandId::Alpha);
        assert_eq!(spec.gain(10.0), 1.0);
        assert!((spec.gain(8.0) - 0.5).abs() < 1e-12);
        assert_eq!(spec.gain(20.0), 0.0);
    }

    #[test]
    fn band_mask_is_sampled_gain() {
        let spec = BandSpec::canonical(BandId::Alpha);
        let mask = band_mask(65, 0.5, &spec).unwrap();
        assert_eq!(mask.len(), 65);
        assert_eq!(mask[20], 1.0); // 10 Hz
        assert!((mask[16] - 0.5).abs() < 1e-12); // 8 Hz
        assert_eq!(mask[40], 0.0); // 20 Hz
    }

    #[test]
    fn overwide_taper_is_an_error() {
        let spec = BandSpec {
            band: BandId::Theta,
            lo: 4.0,
            hi: 8.0,
            taper_lo: 4.5,
            taper_hi: 4.5,
        };
        assert!(matches!(
            band_mask(100, 0.5, &spec),
            Err(SignalError::TaperTooWide { .. })
        ));
    }

    #[test]
    fn masks_partition_unity_inside_passband() {
        let specs = BandSpec::canonical_all();
        let mut f = 0.76;
        while f < 44.5 {
            let total: f64 = specs.iter().map(|s| s.gain(f)).sum();
            assert!(
                (total - 1.0).abs() < 1e-12,
                "partition broken at {f} Hz: {total}"
            );
            f += 0.01;
        }
    }

    #[test]
    fn ten_hz_tone_lands_in_alpha() {
        // 4 s unit 10 Hz sinusoid at 128 Hz
        let tone: Vec<f64> = (0..512)
            .map(|i| (2.0 * std::f64::consts::PI * 10.0 * i as f64 / 128.0).cos())
            .collect();
        let raw = seg(vec![tone], 128.0);
        let bands = band_decompose(&raw).unwrap();
        let energies: Vec<f64> = bands
            .iter()
            .map(|b| b.samples[0].iter().map(|v| v * v).sum::<f64>())
            .collect();
        let total: f64 = energies.iter().sum();
        assert!(
            energies[BandId::Alpha.index()] >= 0.99 * total,
            "alpha share {}",
            energies[BandId::Alpha.index()] / total
        );
        for (i, e) in energies.iter().enumerate() {
            if i != BandId::Alpha.index() {
                assert!(e / total <= 0.01, "band {i} share {}", e / total);
            }
        }
    }

    #[test]
    fn tone_leakage_is_confined_to_segment_edges() {
        // Away from the reflection boundaries the band split is essentially
        // exact regardless of tone phase.
        for phase in [0.0, 0.7, 1.9, 4.1] {
            let tone: Vec<f64> = (0..512)
                .map(|i| (2.0 * std::f64::consts::PI * 10.0 * i as f64 / 128.0 + phase).sin())
                .collect();
            let raw = seg(vec![tone], 128.0);
            let bands = band_decompose(&raw).unwrap();
            let interior = 128..384;
            let energies: Vec<f64> = bands
                .iter()
                .map(|b| b.samples[0][interior.clone()].iter().map(|v| v * v).sum::<f64>())
                .collect();
            let total: f64 = energies.iter().sum();
            let share = energies[BandId::Alpha.index()] / total;
            assert!(share >= 0.999, "phase {phase}: interior alpha share {share}");
        }
    }

    #[test]
    fn bands_sum_to_bandpassed_input_on_noise() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let noise: Vec<f64> = (0..1024).map(|_| rng.random_range(-1.0..1.0)).collect();
        let raw = seg(vec![noise], 128.0);
        let bands = band_decompose(&raw).unwrap();
        let reference = bandpass(&raw).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for t in 0..1024 {
            let summed: f64 = bands.iter().map(|b| b.samples[0][t]).sum();
            let want = reference.samples[0][t];
            num += (summed - want) * (summed - want);
            den += want * want;
        }
        let rel = (num / den).sqrt();
        assert!(rel <= 1e-3, "relative L2 {rel}");
    }

    #[test]
    fn zero_in_zero_out() {
        let raw = seg(vec![vec![0.0; 256], vec![0.0; 256]], 128.0);
        let bands = band_decompose(&raw).unwrap();
        for b in &bands {
            for row in &b.samples {
                assert!(row.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn decompose_is_linear() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..512).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..512).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (a, b) = (1.7, -0.4);
        let combo: Vec<f64> = x.iter().zip(&y).map(|(xv, yv)| a * xv + b * yv).collect();
        let dx = band_decompose(&seg(vec![x], 128.0)).unwrap();
        let dy = band_decompose(&seg(vec![y], 128.0)).unwrap();
        let dc = band_decompose(&seg(vec![combo], 128.0)).unwrap();
        for band in 0..5 {
            let mut num = 0.0;
            let mut den = 0.0;
            for t in 0..512 {
                let want = a * dx[band].samples[0][t] + b * dy[band].samples[0][t];
                let got = dc[band].samples[0][t];
                num += (got - want) * (got - want);
                den += want * want;
            }
            if den > 0.0 {
                assert!((num / den).sqrt() < 1e-6, "band {band}");
            }
        }
    }

    #[test]
    fn impulse_position_is_preserved() {
        let mut x = vec![0.0; 512];
        x[200] = 1.0;
        let raw = seg(vec![x], 128.0);
        let bands = band_decompose(&raw).unwrap();
        let summed: Vec<f64> = (0..512)
            .map(|t| bands.iter().map(|b| b.samples[0][t]).sum())
            .collect();
        let argmax = summed
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .unwrap()
            .0;
        assert!((argmax as isize - 200).abs() <= 1, "peak at {argmax}");
    }

    #[test]
    fn too_short_channel_is_an_error() {
        let raw = seg(vec![vec![0.0; 100]], 128.0);
        assert!(matches!(
            band_decompose(&raw),
            Err(SignalError::TooShortForPad { .. })
        ));
    }
}
