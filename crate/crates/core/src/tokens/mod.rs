//! Discrete token vocabularies: quantized absolute log-power tokens, the
//! metadata taxonomy, the unified global code vocabulary with band offsets,
//! and construction of per-band token streams from preprocessed segments.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::{band_decompose, BandId, BandWaveform, EegSegment, SignalError};
use crate::vq::{tokenize, TrainedTokenizer, VqError, WaveToken};

#[derive(Debug, Error)]
pub enum TokensError {
    #[error("non-finite value in power token input")]
    NonFinitePower,
    #[error("local index {local} out of range for band {band} (K = {k})")]
    LocalOutOfRange { band: BandId, local: usize, k: usize },
    #[error("global index {global} out of range (V = {v})")]
    GlobalOutOfRange { global: u32, v: usize },
    #[error("segment has {len} samples, shorter than one token ({token_len})")]
    SegmentTooShort { len: usize, token_len: usize },
    #[error("rule file line {line}: expected `pattern<TAB>family`")]
    BadRuleLine { line: usize },
    #[error("rule file line {line}: unknown family `{family}`")]
    BadRuleFamily { line: usize, family: String },
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Vq(#[from] VqError),
}

// ---- power tokens ----

/// Number of uniform power bins.
pub const POWER_BINS: u16 = 128;
/// The dedicated mask identifier (one extra embedding row).
pub const MASK_POWER: u16 = POWER_BINS;
/// Log-power clipping range.
pub const POWER_LOG_MIN: f64 = -0.1;
pub const POWER_LOG_MAX: f64 = 4.0;
/// Floor inside the log.
pub const POWER_EPS: f64 = 1e-8;

/// Quantized absolute log-power bin of a raw (unnormalized) token.
///
/// `p = mean square`, `a = log10(max(p, eps))` clipped to `[-0.1, 4.0]`,
/// then uniformly binned into [`POWER_BINS`] half-open bins.
pub fn power_token(raw_token: &[f64]) -> Result<u16, TokensError> {
    if raw_token.is_empty() || raw_token.iter().any(|v| !v.is_finite()) {
        return Err(TokensError::NonFinitePower);
    }
    let p = raw_token.iter().map(|v| v * v).sum::<f64>() / raw_token.len() as f64;
    Ok(power_bin_of_mean_square(p))
}

/// Binning step shared by pretraining and downstream preparation.
pub fn power_bin_of_mean_square(p: f64) -> u16 {
    let a = p.max(POWER_EPS).log10().clamp(POWER_LOG_MIN, POWER_LOG_MAX);
    let span = POWER_LOG_MAX - POWER_LOG_MIN;
    let bin = ((a - POWER_LOG_MIN) / span * POWER_BINS as f64).floor() as i64;
    bin.min(POWER_BINS as i64 - 1).max(0) as u16
}

// ---- global code vocabulary ----

/// Unified code vocabulary: per-band sizes, strictly increasing offsets,
/// and the dedicated mask code one past the last real index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub sizes: [usize; 5],
    pub offsets: [usize; 5],
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary {
            sizes: [512, 512, 512, 768, 1024],
            offsets: [0, 512, 1024, 1536, 2304],
        }
    }
}

/// Total global vocabulary size V.
pub const GLOBAL_VOCAB: usize = 3328;
/// The dedicated mask-code identifier (== V).
pub const MASK_CODE: u32 = GLOBAL_VOCAB as u32;

impl Vocabulary {
    pub fn total(&self) -> usize {
        self.offsets[4] + self.sizes[4]
    }

    pub fn size(&self, band: BandId) -> usize {
        self.sizes[band.index()]
    }

    pub fn offset(&self, band: BandId) -> usize {
        self.offsets[band.index()]
    }

    pub fn mask_code(&self) -> u32 {
        self.total() as u32
    }

    /// Global index of a band-local code.
    pub fn to_global(&self, band: BandId, local: usize) -> Result<u32, TokensError> {
        let k = self.size(band);
        if local >= k {
            return Err(TokensError::LocalOutOfRange { band, local, k });
        }
        Ok((self.offset(band) + local) as u32)
    }

    /// Band and local index of a global code.
    pub fn split_global(&self, global: u32) -> Result<(BandId, usize), TokensError> {
        let g = global as usize;
        for band in BandId::ALL.iter().rev() {
            let off = self.offset(*band);
            if g >= off {
                let local = g - off;
                if local < self.size(*band) {
                    return Ok((*band, local));
                }
                break;
            }
        }
        Err(TokensError::GlobalOutOfRange {
            global,
            v: self.total(),
        })
    }
}

// ---- metadata vocabularies ----

/// Reference schemes; UNKNOWN is last.
pub const REFERENCE_VOCAB: [&str; 8] = [
    "common_average",
    "linked_mastoids",
    "mastoid_single",
    "cz",
    "earlobe",
    "nose",
    "bipolar",
    "unknown",
];
pub const UNKNOWN_REFERENCE: u16 = 7;

/// Trial phases; UNKNOWN is last.
pub const PHASE_VOCAB: [&str; 6] = ["baseline", "cue", "task", "feedback", "rest", "unknown"];
pub const UNKNOWN_PHASE: u16 = 5;

/// Task families: 11 real categories, UNKNOWN, and 4 reserved slots.
pub const TASK_FAMILY_VOCAB: [&str; 16] = [
    "resting",
    "cognitive",
    "language",
    "sensorimotor",
    "bci",
    "sensory",
    "affective",
    "mobility",
    "clinical",
    "artifact",
    "sleep",
    "unknown",
    "reserved12",
    "reserved13",
    "reserved14",
    "reserved15",
];
pub const UNKNOWN_TASK_FAMILY: u16 = 11;

/// Five real bands plus UNKNOWN (used by metadata dropout).
pub const BAND_VOCAB_SIZE: usize = 6;
pub const UNKNOWN_BAND: u16 = 5;

/// Identifier quadruple carried by every sequence: reference, band, task
/// family, phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetadataIds {
    pub reference_id: u16,
    pub band_id: u16,
    pub task_family_id: u16,
    pub phase_id: u16,
}

impl MetadataIds {
    pub fn unknown() -> Self {
        MetadataIds {
            reference_id: UNKNOWN_REFERENCE,
            band_id: UNKNOWN_BAND,
            task_family_id: UNKNOWN_TASK_FAMILY,
            phase_id: UNKNOWN_PHASE,
        }
    }
}

fn normalize_label(label: &str) -> String {
    let mut out = String::with_capacity(label.len());
    let mut last_sep = false;
    for ch in label.chars() {
        if ch.is_ascii_alphanumeric() {
            out.push(ch.to_ascii_lowercase());
            last_sep = false;
        } else if !last_sep && !out.is_empty() {
            out.push('_');
            last_sep = true;
        }
    }
    while out.ends_with('_') {
        out.pop();
    }
    out
}

/// Reference label to id; unrecognized labels map to UNKNOWN.
pub fn map_reference(label: &str) -> u16 {
    let norm = normalize_label(label);
    match norm.as_str() {
        "common_average" | "car" | "average" | "avg" => 0,
        "linked_mastoids" | "linked_ears" | "a1a2" | "m1m2" => 1,
        "mastoid_single" | "mastoid" | "m1" | "m2" | "a1" | "a2" => 2,
        "cz" | "vertex" => 3,
        "earlobe" | "ear" => 4,
        "nose" | "nasion" => 5,
        "bipolar" => 6,
        _ => UNKNOWN_REFERENCE,
    }
}

/// Phase label to id; unrecognized labels map to UNKNOWN.
pub fn map_phase(label: &str) -> u16 {
    let norm = normalize_label(label);
    PHASE_VOCAB
        .iter()
        .position(|p| *p == norm)
        .map(|i| i as u16)
        .unwrap_or(UNKNOWN_PHASE)
}

// ---- task family rules ----

/// Ordered substring rules mapping event labels onto the task-family
/// taxonomy; first match wins, no match means UNKNOWN. Shipped as a
/// versioned plain-text file and loadable from a replacement file.
#[derive(Debug, Clone)]
pub struct TaskRules {
    rules: Vec<(String, u16)>,
}

impl Default for TaskRules {
    fn default() -> Self {
        TaskRules::parse(include_str!("task_rules.txt")).expect("bundled rule table parses")
    }
}

impl TaskRules {
    pub fn parse(text: &str) -> Result<Self, TokensError> {
        let mut rules = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (pattern, family) = trimmed
                .split_once('\t')
                .ok_or(TokensError::BadRuleLine { line: line_no })?;
            let family = family.trim();
            let id = TASK_FAMILY_VOCAB
                .iter()
                .position(|f| *f == family)
                .ok_or_else(|| TokensError::BadRuleFamily {
                    line: line_no,
                    family: family.to_string(),
                })? as u16;
            rules.push((pattern.trim().to_string(), id));
        }
        Ok(TaskRules { rules })
    }

    /// Map an event label to a task family id. Total: every label maps
    /// somewhere, UNKNOWN when nothing matches.
    pub fn map(&self, event_label: &str) -> u16 {
        let norm = normalize_label(event_label);
        if norm.is_empty() {
            return UNKNOWN_TASK_FAMILY;
        }
        for (pattern, id) in &self.rules {
            if norm.contains(pattern.as_str()) {
                return *id;
            }
        }
        UNKNOWN_TASK_FAMILY
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

// ---- channel registry ----

/// Extended 10-20 montage labels (74 names) plus UNKNOWN with id 74.
pub const CHANNEL_NAMES: [&str; 74] = [
    "Fp1", "Fpz", "Fp2", "AF7", "AF3", "AFz", "AF4", "AF8", "F7", "F5", "F3", "F1", "Fz", "F2",
    "F4", "F6", "F8", "FT9", "FT7", "FC5", "FC3", "FC1", "FCz", "FC2", "FC4", "FC6", "FT8",
    "FT10", "T9", "T7", "C5", "C3", "C1", "Cz", "C2", "C4", "C6", "T8", "T10", "TP9", "TP7",
    "CP5", "CP3", "CP1", "CPz", "CP2", "CP4", "CP6", "TP8", "TP10", "P9", "P7", "P5", "P3", "P1",
    "Pz", "P2", "P4", "P6", "P8", "P10", "PO7", "PO3", "POz", "PO4", "PO8", "O1", "Oz", "O2",
    "A1", "A2", "M1", "M2", "Iz",
];

pub const UNKNOWN_CHANNEL: u16 = CHANNEL_NAMES.len() as u16;
/// Embedding-table size: all registry names plus UNKNOWN.
pub const CHANNEL_VOCAB: usize = CHANNEL_NAMES.len() + 1;

/// Case-insensitive montage-name registry.
#[derive(Debug, Clone)]
pub struct ChannelRegistry {
    lower: Vec<String>,
}

impl Default for ChannelRegistry {
    fn default() -> Self {
        ChannelRegistry {
            lower: CHANNEL_NAMES.iter().map(|n| n.to_ascii_lowercase()).collect(),
        }
    }
}

impl ChannelRegistry {
    /// Registry id for a montage label; unknown names map to
    /// [`UNKNOWN_CHANNEL`] rather than erroring.
    pub fn id(&self, name: &str) -> u16 {
        let needle = name.trim().to_ascii_lowercase();
        self.lower
            .iter()
            .position(|n| *n == needle)
            .map(|i| i as u16)
            .unwrap_or(UNKNOWN_CHANNEL)
    }

    pub fn name(&self, id: u16) -> &str {
        CHANNEL_NAMES.get(id as usize).copied().unwrap_or("UNKNOWN")
    }
}

// ---- token streams ----

/// One band's discrete sequence for a segment: global code indices and
/// power bins in time-major order (`i = t*C + c`), channel registry ids,
/// and the metadata quadruple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenStream {
    pub band: BandId,
    pub channels: u16,
    pub time_steps: u32,
    pub codes: Vec<u32>,
    pub powers: Vec<u16>,
    pub channel_ids: Vec<u16>,
    pub meta: MetadataIds,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.channels as usize * self.time_steps as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flattened position of (time, channel) under time-major order.
    pub fn flat_index(&self, t: usize, c: usize) -> usize {
        t * self.channels as usize + c
    }

    /// Force every metadata field to its UNKNOWN id (the "w/o metadata"
    /// ablation switch).
    pub fn strip_metadata(&mut self) {
        self.meta = MetadataIds::unknown();
    }

    /// Force every power bin to a constant (the "w/o meta+power" ablation
    /// switch pairs this with [`TokenStream::strip_metadata`]).
    pub fn flatten_power(&mut self, bin: u16) {
        self.powers.iter_mut().for_each(|p| *p = bin);
    }
}

/// Center-crop a segment's channels to a multiple of the token length.
pub fn center_crop(seg: &EegSegment, token_len: usize) -> Result<EegSegment, TokensError> {
    let n = seg.num_samples();
    if n < token_len {
        return Err(TokensError::SegmentTooShort {
            len: n,
            token_len,
        });
    }
    let keep = (n / token_len) * token_len;
    let start = (n - keep) / 2;
    let samples: Vec<Vec<f64>> = seg
        .samples
        .iter()
        .map(|row| row[start..start + keep].to_vec())
        .collect();
    Ok(EegSegment::new(
        samples,
        seg.sample_rate,
        seg.channel_names.clone(),
        seg.meta.clone(),
    )?)
}

/// Metadata ids for a segment in one band.
pub fn metadata_for(seg: &EegSegment, band: BandId, rules: &TaskRules) -> MetadataIds {
    MetadataIds {
        reference_id: map_reference(&seg.meta.reference),
        band_id: band.index() as u16,
        task_family_id: rules.map(&seg.meta.task_label),
        phase_id: map_phase(&seg.meta.phase),
    }
}

/// Token stream for one already-decomposed band waveform.
pub fn stream_from_band(
    band_wave: &BandWaveform,
    meta: MetadataIds,
    channel_names: &[String],
    tokenizer: &TrainedTokenizer,
    vocab: &Vocabulary,
    registry: &ChannelRegistry,
) -> Result<TokenStream, TokensError> {
    let l = tokenizer.net.cfg.token_len;
    let tokens: Vec<WaveToken> = tokenize(band_wave, l)?;
    let c = band_wave.samples.len();
    let t = if c == 0 { 0 } else { tokens.len() / c };
    let locals = tokenizer.encode_and_quantize(&tokens)?;
    let mut codes = vec![0u32; c * t];
    let mut powers = vec![0u16; c * t];
    for (tok, &local) in tokens.iter().zip(&locals) {
        let flat = tok.time_index * c + tok.channel_index;
        codes[flat] = vocab.to_global(band_wave.band, local)?;
        powers[flat] = power_token(&tok.values)?;
    }
    Ok(TokenStream {
        band: band_wave.band,
        channels: c as u16,
        time_steps: t as u32,
        codes,
        powers,
        channel_ids: channel_names.iter().map(|n| registry.id(n)).collect(),
        meta,
    })
}

/// Build one band's token stream from a preprocessed segment: center-crop,
/// band-decompose, tokenize, encode + quantize to global indices, compute
/// power bins from the raw band tokens, and attach channel/metadata ids.
pub fn build_token_stream(
    seg: &EegSegment,
    band: BandId,
    tokenizer: &TrainedTokenizer,
    vocab: &Vocabulary,
    registry: &ChannelRegistry,
    rules: &TaskRules,
) -> Result<TokenStream, TokensError> {
    let cropped = center_crop(seg, tokenizer.net.cfg.token_len)?;
    let bands = band_decompose(&cropped)?;
    let meta = metadata_for(seg, band, rules);
    stream_from_band(
        &bands[band.index()],
        meta,
        &cropped.channel_names,
        tokenizer,
        vocab,
        registry,
    )
}

/// All five band streams of a segment, decomposing once.
pub fn build_all_streams(
    seg: &EegSegment,
    tokenizers: &[TrainedTokenizer; 5],
    vocab: &Vocabulary,
    registry: &ChannelRegistry,
    rules: &TaskRules,
) -> Result<[TokenStream; 5], TokensError> {
    let cropped = center_crop(seg, tokenizers[0].net.cfg.token_len)?;
    let bands = band_decompose(&cropped)?;
    let mut out = Vec::with_capacity(5);
    for band in BandId::ALL {
        let meta = metadata_for(seg, band, rules);
        out.push(stream_from_band(
            &bands[band.index()],
            meta,
            &cropped.channel_names,
            &tokenizers[band.index()],
            vocab,
            registry,
        )?);
    }
    Ok(out.try_into().expect("five bands"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_bin_examples() {
        // p = 1.0 -> a = 0 -> floor(0.1/4.1 * 128) = 3
        assert_eq!(power_bin_of_mean_square(1.0), 3);
        // p >= 1e4 -> clipped to 4.0 -> top bin
        assert_eq!(power_bin_of_mean_square(1e4), 127);
        assert_eq!(power_bin_of_mean_square(1e9), 127);
        // zero token -> floor eps -> a = -8 clipped to -0.1 -> bin 0
        assert_eq!(power_token(&[0.0; 16]).unwrap(), 0);
    }

    #[test]
    fn power_is_monotone_in_mean_square() {
        let mut prev = 0u16;
        let mut p = 1e-9;
        while p < 1e5 {
            let bin = power_bin_of_mean_square(p);
            assert!(bin >= prev, "p {p}: {bin} < {prev}");
            prev = bin;
            p *= 1.2;
        }
    }

    #[test]
    fn non_finite_power_input_is_an_error() {
        assert!(power_token(&[1.0, f64::NAN]).is_err());
        assert!(power_token(&[]).is_err());
    }

    #[test]
    fn global_offsets_match_the_fixed_table() {
        let v = Vocabulary::default();
        assert_eq!(v.total(), GLOBAL_VOCAB);
        assert_eq!(v.to_global(BandId::Delta, 0).unwrap(), 0);
        assert_eq!(v.to_global(BandId::Gamma, 0).unwrap(), 2304);
        assert_eq!(v.split_global(1540).unwrap(), (BandId::Beta, 4));
        assert!(v.to_global(BandId::Delta, 512).is_err());
        assert!(v.split_global(3328).is_err());
    }

    #[test]
    fn global_local_bijection_over_full_vocabulary() {
        let v = Vocabulary::default();
        let mut seen = vec![false; GLOBAL_VOCAB];
        for band in BandId::ALL {
            for local in 0..v.size(band) {
                let g = v.to_global(band, local).unwrap();
                assert!(!seen[g as usize], "duplicate global {g}");
                seen[g as usize] = true;
                assert_eq!(v.split_global(g).unwrap(), (band, local));
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn task_rules_examples() {
        let rules = TaskRules::default();
        assert_eq!(
            rules.map("eyes_closed_rest"),
            TASK_FAMILY_VOCAB.iter().position(|f| *f == "resting").unwrap() as u16
        );
        assert_eq!(rules.map(""), UNKNOWN_TASK_FAMILY);
        assert_eq!(
            rules.map("left_hand_imagery"),
            TASK_FAMILY_VOCAB.iter().position(|f| *f == "bci").unwrap() as u16
        );
        assert_eq!(rules.map("totally novel label 123"), UNKNOWN_TASK_FAMILY);
        // priority: imagery (bci) outranks hand (sensorimotor)
        assert_eq!(rules.map("Right Hand Motor Execution"), 3);
        assert_eq!(rules.map("word_generation"), 2);
    }

    #[test]
    fn rule_table_rejects_bad_lines() {
        assert!(TaskRules::parse("pattern_without_tab").is_err());
        assert!(TaskRules::parse("x\tnot_a_family").is_err());
        let ok = TaskRules::parse("# comment\nfoo\tsleep\n").unwrap();
        assert_eq!(ok.len(), 1);
        assert_eq!(ok.map("foo_bar"), 10);
    }

    #[test]
    fn registry_is_case_insensitive_with_unknown_fallback() {
        let reg = ChannelRegistry::default();
        assert_eq!(reg.id("Cz"), reg.id("CZ"));
        assert_eq!(reg.id("cz"), reg.id("Cz"));
        assert_ne!(reg.id("C3"), reg.id("C4"));
        assert_eq!(reg.id("NotAnElectrode"), UNKNOWN_CHANNEL);
        assert_eq!(CHANNEL_NAMES.len(), 74);
        assert_eq!(CHANNEL_VOCAB, 75);
    }

    #[test]
    fn reference_and_phase_mapping() {
        assert_eq!(map_reference("Common Average"), 0);
        assert_eq!(map_reference("CAR"), 0);
        assert_eq!(map_reference("???"), UNKNOWN_REFERENCE);
        assert_eq!(map_phase("task"), 2);
        assert_eq!(map_phase("Feedback"), 3);
        assert_eq!(map_phase("mystery"), UNKNOWN_PHASE);
    }

    #[test]
    fn ablation_switches() {
        let mut s = TokenStream {
            band: BandId::Alpha,
            channels: 2,
            time_steps: 2,
            codes: vec![1, 2, 3, 4],
            powers: vec![9, 8, 7, 6],
            channel_ids: vec![0, 1],
            meta: MetadataIds {
                reference_id: 0,
                band_id: 2,
                task_family_id: 1,
                phase_id: 2,
            },
        };
        s.strip_metadata();
        assert_eq!(s.meta, MetadataIds::unknown());
        s.flatten_power(0);
        assert!(s.powers.iter().all(|&p| p == 0));
        assert_eq!(s.codes, vec![1, 2, 3, 4]);
    }
}
