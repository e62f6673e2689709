//! Region-based masking.
//!
//! Channels are annotated into (anatomical region, laterality) groups from
//! their montage names. At every time index the sampler draws a fixed
//! number of lateral and midline groups (ceil of the mask fraction times
//! the group count) and masks every channel in the drawn groups, replacing
//! code and power tokens with the dedicated mask identifiers.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::stream;
use crate::tokens::TokenStream;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("mask plan is {plan_c} x {plan_t} but stream is {c} x {t}")]
    DimMismatch {
        plan_c: u16,
        plan_t: u32,
        c: u16,
        t: u32,
    },
    #[error("targets length {got} does not match stream length {want}")]
    TargetLength { got: usize, want: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    Frontal,
    Central,
    Temporal,
    Parietal,
    Occipital,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Laterality {
    Left,
    Right,
    Midline,
    Unknown,
}

/// Region/laterality annotation of one channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelAnnotation {
    pub name: String,
    pub region: Region,
    pub laterality: Laterality,
}

/// Longest-prefix region table over the electrode letter part.
const REGION_PREFIXES: [(&str, Region); 12] = [
    ("FP", Region::Frontal),
    ("AF", Region::Frontal),
    ("F", Region::Frontal),
    ("FC", Region::Central),
    ("C", Region::Central),
    ("FT", Region::Temporal),
    ("T", Region::Temporal),
    ("TP", Region::Temporal),
    ("CP", Region::Parietal),
    ("P", Region::Parietal),
    ("PO", Region::Occipital),
    ("O", Region::Occipital),
];

/// Annotate montage labels. Laterality follows electrode-name parity: odd
/// trailing number left, even right, trailing `z` midline. Unrecognized
/// names fall back to UNKNOWN rather than erroring.
pub fn annotate(channel_names: &[String]) -> Vec<ChannelAnnotation> {
    channel_names
        .iter()
        .map(|name| {
            let trimmed = name.trim();
            let upper = trimmed.to_ascii_uppercase();
            let letters_end = upper
                .find(|ch: char| ch.is_ascii_digit())
                .unwrap_or(upper.len());
            let (letters, suffix) = upper.split_at(letters_end);
            // a trailing Z belongs to the laterality, not the region prefix
            let (letters, has_z) = if suffix.is_empty() && letters.len() > 1 && letters.ends_with('Z')
            {
                (&letters[..letters.len() - 1], true)
            } else {
                (letters, false)
            };
            let mut region = Region::Unknown;
            let mut best = 0usize;
            for (prefix, r) in REGION_PREFIXES {
                if letters == prefix {
                    region = r;
                    best = usize::MAX;
                } else if best != usize::MAX
                    && letters.starts_with(prefix)
                    && prefix.len() > best
                {
                    region = r;
                    best = prefix.len();
                }
            }
            let laterality = if has_z {
                Laterality::Midline
            } else if !suffix.is_empty() && suffix.chars().all(|c| c.is_ascii_digit()) {
                match suffix.parse::<u32>() {
                    Ok(n) if n % 2 == 1 => Laterality::Left,
                    Ok(_) => Laterality::Right,
                    Err(_) => Laterality::Unknown,
                }
            } else {
                Laterality::Unknown
            };
            ChannelAnnotation {
                name: trimmed.to_string(),
                region,
                laterality,
            }
        })
        .collect()
}

/// Which channel-time positions are masked, plus the sampling parameters
/// that produced the plan. The mask is stored time-major (`i = t*C + c`)
/// to line up with [`TokenStream`] flattening.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub channels: u16,
    pub time_steps: u32,
    pub mask: Vec<bool>,
    pub p_mask: f64,
    pub seed: u64,
}

impl MaskPlan {
    pub fn masked(&self, t: usize, c: usize) -> bool {
        self.mask[t * self.channels as usize + c]
    }

    pub fn num_masked(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Default mask fraction.
pub const P_MASK: f64 = 0.5;

/// Sample a region mask plan: at each time index, draw
/// `ceil(p_mask * |G_lat|)` lateral and `ceil(p_mask * |G_mid|)` midline
/// groups without replacement and mask all their channels. Groups with
/// UNKNOWN region or laterality still form groups (midline class only when
/// laterality is midline), so every channel stays maskable.
pub fn sample_mask(
    annotations: &[ChannelAnnotation],
    time_steps: usize,
    p_mask: f64,
    seed: u64,
) -> MaskPlan {
    let c = annotations.len();
    // canonical sorted group lists
    let mut lat_groups: Vec<(Region, Laterality)> = Vec::new();
    let mut mid_groups: Vec<(Region, Laterality)> = Vec::new();
    for a in annotations {
        let key = (a.region, a.laterality);
        let bucket = if a.laterality == Laterality::Midline {
            &mut mid_groups
        } else {
            &mut lat_groups
        };
        if !bucket.contains(&key) {
            bucket.push(key);
        }
    }
    lat_groups.sort();
    mid_groups.sort();
    let k_lat = (p_mask * lat_groups.len() as f64).ceil() as usize;
    let k_mid = (p_mask * mid_groups.len() as f64).ceil() as usize;

    let mut rng = stream(seed, &[0x6d_61_73_6b]);
    let mut mask = vec![false; c * time_steps];
    let mut scratch: Vec<usize> = Vec::new();
    for t in 0..time_steps {
        let mut selected: Vec<(Region, Laterality)> = Vec::new();
        for (groups, k) in [(&lat_groups, k_lat), (&mid_groups, k_mid)] {
            scratch.clear();
            scratch.extend(0..groups.len());
            scratch.shuffle(&mut rng);
            selected.extend(scratch.iter().take(k).map(|&i| groups[i]));
        }
        for (ch, a) in annotations.iter().enumerate() {
            if selected.contains(&(a.region, a.laterality)) {
                mask[t * c + ch] = true;
            }
        }
    }
    MaskPlan {
        channels: c as u16,
        time_steps: time_steps as u32,
        mask,
        p_mask,
        seed,
    }
}

/// Replace codes/powers at masked positions with the mask identifiers.
/// Returns the masked stream and a full-length target vector holding the
/// original global codes (entries at unmasked positions are never read by
/// the loss).
pub fn apply_mask(
    stream: &TokenStream,
    plan: &MaskPlan,
    mask_code: u32,
    mask_power: u16,
) -> Result<(TokenStream, Vec<u32>), MaskError> {
    if plan.channels != stream.channels || plan.time_steps != stream.time_steps {
        return Err(MaskError::DimMismatch {
            plan_c: plan.channels,
            plan_t: plan.time_steps,
            c: stream.channels,
            t: stream.time_steps,
        });
    }
    let targets = stream.codes.clone();
    let mut masked = stream.clone();
    for (i, &m) in plan.mask.iter().enumerate() {
        if m {
            masked.codes[i] = mask_code;
            masked.powers[i] = mask_power;
        }
    }
    Ok((masked, targets))
}

/// Undo [`apply_mask`] using the saved targets and original powers.
pub fn restore_mask(
    masked: &TokenStream,
    plan: &MaskPlan,
    targets: &[u32],
    original_powers: &[u16],
) -> Result<TokenStream, MaskError> {
    if targets.len() != masked.codes.len() || original_powers.len() != masked.powers.len() {
        return Err(MaskError::TargetLength {
            got: targets.len(),
            want: masked.codes.len(),
        });
    }
    let mut restored = masked.clone();
    for (i, &m) in plan.mask.iter().enumerate() {
        if m {
            restored.codes[i] = targets[i];
            restored.powers[i] = original_powers[i];
        }
    }
    Ok(restored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::BandId;
    use crate::tokens::{MetadataIds, MASK_CODE, MASK_POWER};

    fn names(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn annotation_examples() {
        let anns = annotate(&names(&["C3", "Pz", "FC6", "Fp1", "TP8", "PO3", "Iz", "X99"]));
        assert_eq!((anns[0].region, anns[0].laterality), (Region::Central, Laterality::Left));
        assert_eq!((anns[1].region, anns[1].laterality), (Region::Parietal, Laterality::Midline));
        assert_eq!((anns[2].region, anns[2].laterality), (Region::Central, Laterality::Right));
        assert_eq!((anns[3].region, anns[3].laterality), (Region::Frontal, Laterality::Left));
        assert_eq!((anns[4].region, anns[4].laterality), (Region::Temporal, Laterality::Right));
        assert_eq!((anns[5].region, anns[5].laterality), (Region::Occipital, Laterality::Left));
        assert_eq!((anns[6].region, anns[6].laterality), (Region::Unknown, Laterality::Midline));
        assert_eq!(anns[7].region, Region::Unknown);
        assert_eq!(anns[7].laterality, Laterality::Left);
    }

    #[test]
    fn ten_suffix_is_right_hemisphere() {
        let anns = annotate(&names(&["T10", "T9", "FT10"]));
        assert_eq!(anns[0].laterality, Laterality::Right);
        assert_eq!(anns[1].laterality, Laterality::Left);
        assert_eq!(anns[2].laterality, Laterality::Right);
        assert_eq!(anns[2].region, Region::Temporal);
    }

    #[test]
    fn ceil_rule_examples() {
        // p = 0.5, 8 lateral groups, 3 midline -> k_lat 4, k_mid 2
        let chans = names(&[
            "F3", "F4", "C3", "C4", "P3", "P4", "O1", "O2", // 8 lateral groups
            "Fz", "Cz", "Pz", // 3 midline groups
        ]);
        let anns = annotate(&chans);
        let plan = sample_mask(&anns, 1, 0.5, 7);
        // count masked lateral/midline channels; each group has one channel
        let masked_lat = (0..8).filter(|&c| plan.masked(0, c)).count();
        let masked_mid = (8..11).filter(|&c| plan.masked(0, c)).count();
        assert_eq!(masked_lat, 4);
        assert_eq!(masked_mid, 2);
    }

    #[test]
    fn full_and_empty_masking() {
        let anns = annotate(&names(&["F3", "C4", "Pz", "Oz"]));
        let all = sample_mask(&anns, 3, 1.0, 1);
        assert_eq!(all.num_masked(), 4 * 3);
        let none = sample_mask(&anns, 3, 0.0, 1);
        assert_eq!(none.num_masked(), 0);
    }

    #[test]
    fn same_seed_same_plan() {
        let anns = annotate(&names(&["F3", "F4", "C3", "C4", "Cz", "Pz"]));
        let a = sample_mask(&anns, 16, 0.5, 99);
        let b = sample_mask(&anns, 16, 0.5, 99);
        assert_eq!(a, b);
        let c = sample_mask(&anns, 16, 0.5, 100);
        assert_ne!(a, c);
    }

    #[test]
    fn masked_positions_belong_to_sampled_groups() {
        // channels sharing a group mask together at every time index
        let anns = annotate(&names(&["F3", "F5", "C4", "C6", "Pz"]));
        let plan = sample_mask(&anns, 32, 0.5, 5);
        for t in 0..32 {
            assert_eq!(plan.masked(t, 0), plan.masked(t, 1), "F3/F5 split at {t}");
            assert_eq!(plan.masked(t, 2), plan.masked(t, 3), "C4/C6 split at {t}");
        }
    }

    fn toy_stream() -> TokenStream {
        TokenStream {
            band: BandId::Alpha,
            channels: 3,
            time_steps: 2,
            codes: vec![1024, 1025, 1026, 1027, 1028, 1029],
            powers: vec![10, 11, 12, 13, 14, 15],
            channel_ids: vec![0, 1, 2],
            meta: MetadataIds::unknown(),
        }
    }

    #[test]
    fn apply_all_true_then_restore_roundtrips() {
        let s = toy_stream();
        let plan = MaskPlan {
            channels: 3,
            time_steps: 2,
            mask: vec![true; 6],
            p_mask: 1.0,
            seed: 0,
        };
        let (masked, targets) = apply_mask(&s, &plan, MASK_CODE, MASK_POWER).unwrap();
        assert!(masked.codes.iter().all(|&c| c == MASK_CODE));
        assert!(masked.powers.iter().all(|&p| p == MASK_POWER));
        assert_eq!(targets, s.codes);
        let restored = restore_mask(&masked, &plan, &targets, &s.powers).unwrap();
        assert_eq!(restored, s);
    }

    #[test]
    fn apply_all_false_is_identity() {
        let s = toy_stream();
        let plan = MaskPlan {
            channels: 3,
            time_steps: 2,
            mask: vec![false; 6],
            p_mask: 0.0,
            seed: 0,
        };
        let (masked, _) = apply_mask(&s, &plan, MASK_CODE, MASK_POWER).unwrap();
        assert_eq!(masked, s);
    }

    #[test]
    fn single_position_lands_at_time_major_index() {
        let s = toy_stream();
        let mut mask = vec![false; 6];
        let (t, c) = (1usize, 2usize);
        mask[t * 3 + c] = true;
        let plan = MaskPlan {
            channels: 3,
            time_steps: 2,
            mask,
            p_mask: 0.1,
            seed: 0,
        };
        let (masked, _) = apply_mask(&s, &plan, MASK_CODE, MASK_POWER).unwrap();
        let changed: Vec<usize> = (0..6).filter(|&i| masked.codes[i] != s.codes[i]).collect();
        assert_eq!(changed, vec![5]);
        assert_eq!(masked.powers[5], MASK_POWER);
    }

    #[test]
    fn dim_mismatch_is_an_error() {
        let s = toy_stream();
        let plan = MaskPlan {
            channels: 2,
            time_steps: 2,
            mask: vec![false; 4],
            p_mask: 0.5,
            seed: 0,
        };
        assert!(matches!(
            apply_mask(&s, &plan, MASK_CODE, MASK_POWER),
            Err(MaskError::DimMismatch { .. })
        ));
    }

    #[test]
    fn empirical_group_fraction_matches_ceiling_rule() {
        // 6 lateral groups of one channel each, 2 midline groups
        let chans = names(&["F3", "F4", "C3", "C4", "O1", "O2", "Fz", "Oz"]);
        let anns = annotate(&chans);
        let (mut lat_masked, mut mid_masked, mut total_t) = (0usize, 0usize, 0usize);
        for seed in 0..1000 {
            let plan = sample_mask(&anns, 4, 0.5, seed);
            for t in 0..4 {
                lat_masked += (0..6).filter(|&c| plan.masked(t, c)).count();
                mid_masked += (6..8).filter(|&c| plan.masked(t, c)).count();
                total_t += 1;
            }
        }
        // k_lat = 3 of 6, k_mid = 1 of 2: exact per draw
        let lat_frac = lat_masked as f64 / (total_t * 6) as f64;
        let mid_frac = mid_masked as f64 / (total_t * 2) as f64;
        assert!((lat_frac - 0.5).abs() < 0.02, "lateral fraction {lat_frac}");
        assert!((mid_frac - 0.5).abs() < 0.02, "midline fraction {mid_frac}");
    }
}
