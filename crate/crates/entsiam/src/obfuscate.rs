//! NOP-insertion obfuscation.
//!
//! Variants of a binary are produced by inserting a filler byte (0x90 by
//! default, the x86 NOP) at positions drawn uniformly over the whole file.
//! Insertion never rewrites existing bytes, so the original is always a
//! subsequence of the variant; the insertion count ("frequency") controls
//! how strongly the byte-level entropy is diluted.

use crate::binfeed::{CorpusError, Lineage, Manifest, ManifestEntry, RawBinary, SampleSource};
use crate::seeds;
use rand::Rng;
use std::sync::Arc;
use thiserror::Error;

/// x86 NOP, the default filler byte.
pub const DEFAULT_NOP_BYTE: u8 = 0x90;

/// Insertion counts used when expanding a corpus unless overridden.
pub const DEFAULT_FREQUENCIES: [u32; 3] = [200, 400, 600];

#[derive(Debug, Error)]
pub enum ObfuscateError {
    #[error("plan holds {got} positions but frequency says {want}")]
    FrequencyMismatch { got: usize, want: usize },
    #[error("insertion position {pos} exceeds input length {len}")]
    PositionOutOfRange { pos: usize, len: usize },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// A reproducible set of insertions for one binary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NopPlan {
    /// Number of insertions.
    pub frequency: u32,
    /// Byte inserted at every position.
    pub nop_byte: u8,
    /// Sorted insertion offsets into the *original* byte sequence; an offset
    /// of `len` appends. Repeats are allowed.
    pub positions: Vec<usize>,
    /// Seed the plan was drawn from.
    pub seed: u64,
}

/// Draw an insertion plan for `original`.
///
/// Positions are uniform over `0..=len` and the draw is a pure function of
/// the original bytes, the frequency, the filler byte and the seed.
pub fn plan_nops(original: &RawBinary, frequency: u32, nop_byte: u8, seed: u64) -> NopPlan {
    let len = original.bytes.len();
    let mut rng = seeds::rng(
        seed,
        &[
            "nop-plan",
            &format!("{:016x}", seeds::fingerprint(&original.bytes)),
            &frequency.to_string(),
            &nop_byte.to_string(),
        ],
    );
    let mut positions: Vec<usize> = (0..frequency).map(|_| rng.gen_range(0..=len)).collect();
    positions.sort_unstable();
    NopPlan {
        frequency,
        nop_byte,
        positions,
        seed,
    }
}

/// Apply `plan` to `original`, yielding the obfuscated sibling.
pub fn apply_nops(original: &RawBinary, plan: &NopPlan) -> Result<RawBinary, ObfuscateError> {
    if plan.positions.len() != plan.frequency as usize {
        return Err(ObfuscateError::FrequencyMismatch {
            got: plan.positions.len(),
            want: plan.frequency as usize,
        });
    }
    let len = original.bytes.len();
    if let Some(&pos) = plan.positions.last() {
        if pos > len {
            return Err(ObfuscateError::PositionOutOfRange { pos, len });
        }
    }
    let mut out = Vec::with_capacity(len + plan.positions.len());
    let mut next = plan.positions.iter().peekable();
    for (i, &b) in original.bytes.iter().enumerate() {
        while next.peek() == Some(&&i) {
            out.push(plan.nop_byte);
            next.next();
        }
        out.push(b);
    }
    // Offsets equal to len append after the last byte.
    out.extend(next.map(|_| plan.nop_byte));
    Ok(RawBinary {
        origin_id: format!("{}.nop{}", original.origin_id, plan.frequency),
        family: original.family.clone(),
        bytes: out,
        lineage: Lineage::Obfuscated {
            frequency: plan.frequency,
            parent: original.origin_id.clone(),
        },
    })
}

/// Expand a corpus with one obfuscated sibling per original entry and
/// frequency. Originals are retained; each sibling is appended right after
/// its parent. Per-entry randomness derives from `(seed, origin_id)`.
pub fn obfuscate_corpus(
    manifest: &Manifest,
    frequencies: &[u32],
    nop_byte: u8,
    seed: u64,
) -> Result<Manifest, ObfuscateError> {
    let mut entries = Vec::with_capacity(manifest.len() * (1 + frequencies.len()));
    for (i, e) in manifest.entries().iter().enumerate() {
        entries.push(e.clone());
        if !e.lineage.is_original() {
            continue;
        }
        let raw = manifest.load_raw(i)?;
        let entry_seed = seeds::derive(seed, &["obfuscate", &e.origin_id]);
        for &freq in frequencies {
            let plan = plan_nops(&raw, freq, nop_byte, entry_seed);
            let variant = apply_nops(&raw, &plan)?;
            entries.push(ManifestEntry {
                origin_id: variant.origin_id.clone(),
                family: variant.family.clone(),
                source: SampleSource::Inline(Arc::new(variant.bytes)),
                lineage: variant.lineage,
            });
        }
    }
    Ok(Manifest::from_entries(
        manifest.root().map(|p| p.to_path_buf()),
        entries,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binfeed::{synth_corpus, SynthSpec};
    use proptest::prelude::*;
    use rand::Rng;

    fn raw(bytes: Vec<u8>) -> RawBinary {
        RawBinary {
            origin_id: "probe".into(),
            family: "famA".into(),
            bytes,
            lineage: Lineage::Original,
        }
    }

    /// Replay oracle: strip the planned insertions back out. The j-th planned
    /// offset p_j lands at output index p_j + j, since j earlier insertions
    /// shifted everything right.
    fn strip_plan(output: &[u8], plan: &NopPlan) -> Vec<u8> {
        let mut inserted = vec![false; output.len()];
        for (j, &p) in plan.positions.iter().enumerate() {
            let at = p + j;
            assert_eq!(output[at], plan.nop_byte, "planned slot holds foreign byte");
            inserted[at] = true;
        }
        output
            .iter()
            .zip(&inserted)
            .filter(|(_, &ins)| !ins)
            .map(|(&b, _)| b)
            .collect()
    }

    #[test]
    fn frequency_zero_is_identity() {
        let original = raw(vec![1, 2, 3, 4]);
        let plan = plan_nops(&original, 0, DEFAULT_NOP_BYTE, 9);
        assert!(plan.positions.is_empty());
        let out = apply_nops(&original, &plan).unwrap();
        assert_eq!(out.bytes, original.bytes);
    }

    #[test]
    fn single_insertion_lands_where_planned() {
        let original = raw(vec![0x41, 0x42, 0x43]);
        let plan = NopPlan {
            frequency: 1,
            nop_byte: 0x90,
            positions: vec![1],
            seed: 0,
        };
        let out = apply_nops(&original, &plan).unwrap();
        assert_eq!(out.bytes, vec![0x41, 0x90, 0x42, 0x43]);
    }

    #[test]
    fn append_position_is_allowed() {
        let original = raw(vec![7, 8]);
        let plan = NopPlan {
            frequency: 2,
            nop_byte: 0x90,
            positions: vec![0, 2],
            seed: 0,
        };
        let out = apply_nops(&original, &plan).unwrap();
        assert_eq!(out.bytes, vec![0x90, 7, 8, 0x90]);
    }

    #[test]
    fn positions_beyond_len_are_rejected() {
        let original = raw(vec![1, 2]);
        let plan = NopPlan {
            frequency: 1,
            nop_byte: 0x90,
            positions: vec![3],
            seed: 0,
        };
        assert!(matches!(
            apply_nops(&original, &plan),
            Err(ObfuscateError::PositionOutOfRange { pos: 3, len: 2 })
        ));
    }

    #[test]
    fn plan_is_deterministic_and_seed_sensitive() {
        let original = raw((0..255).collect());
        let a = plan_nops(&original, 50, DEFAULT_NOP_BYTE, 4);
        let b = plan_nops(&original, 50, DEFAULT_NOP_BYTE, 4);
        assert_eq!(a, b);
        let c = plan_nops(&original, 50, DEFAULT_NOP_BYTE, 5);
        assert_ne!(a.positions, c.positions);
    }

    #[test]
    fn plan_depends_on_content() {
        let a = plan_nops(&raw(vec![0; 4096]), 50, DEFAULT_NOP_BYTE, 4);
        let b = plan_nops(&raw(vec![1; 4096]), 50, DEFAULT_NOP_BYTE, 4);
        assert_ne!(a.positions, b.positions);
    }

    #[test]
    fn length_grows_by_exactly_the_frequency() {
        let original = raw(vec![0xAA; 1024]);
        let plan = plan_nops(&original, 200, DEFAULT_NOP_BYTE, 1);
        let out = apply_nops(&original, &plan).unwrap();
        assert_eq!(out.bytes.len(), 1224);
    }

    #[test]
    fn stripping_insertions_recovers_the_original() {
        let mut rng = seeds::rng(3, &["test-strip"]);
        let bytes: Vec<u8> = (0..4096).map(|_| rng.gen()).collect();
        let original = raw(bytes);
        for freq in [1u32, 37, 200, 600] {
            let plan = plan_nops(&original, freq, DEFAULT_NOP_BYTE, 77);
            let out = apply_nops(&original, &plan).unwrap();
            assert_eq!(strip_plan(&out.bytes, &plan), original.bytes, "freq {freq}");
        }
    }

    #[test]
    fn positions_are_uniform_over_the_file() {
        // 10 KiB input, frequency 200, pooled over 50 seeds. Chi-square over
        // 10 equal offset buckets, 9 degrees of freedom; 21.666 is the 0.01
        // critical value. Seeds are fixed, so this is not a flaky test.
        let original = raw(vec![0x5A; 10 * 1024]);
        let len = original.bytes.len();
        let mut buckets = [0u64; 10];
        for seed in 0..50 {
            let plan = plan_nops(&original, 200, DEFAULT_NOP_BYTE, seed);
            assert_eq!(plan.positions.len(), 200);
            for &p in &plan.positions {
                assert!(p <= len);
                buckets[p * 10 / (len + 1)] += 1;
            }
        }
        let total: u64 = buckets.iter().sum();
        assert_eq!(total, 10_000);
        let expected = total as f64 / 10.0;
        let chi2: f64 = buckets
            .iter()
            .map(|&o| {
                let d = o as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 21.666, "chi-square {chi2:.2} rejects uniformity");
    }

    #[test]
    fn corpus_expansion_appends_one_sibling_per_frequency() {
        let spec = SynthSpec {
            n_families: 2,
            samples_per_family: 3,
            len_range: 512..=1024,
            segments: 6,
        };
        let m = synth_corpus(&spec, 5).unwrap();
        let one = obfuscate_corpus(&m, &[200], DEFAULT_NOP_BYTE, 9).unwrap();
        assert_eq!(one.len(), 12);
        let three = obfuscate_corpus(&m, &DEFAULT_FREQUENCIES, DEFAULT_NOP_BYTE, 9).unwrap();
        assert_eq!(three.len(), 24);
        // Siblings follow their parents and carry the right lineage.
        let e = &three.entries()[1];
        assert_eq!(e.origin_id, "fam00-s000.nop200");
        assert_eq!(
            e.lineage,
            Lineage::Obfuscated {
                frequency: 200,
                parent: "fam00-s000".into()
            }
        );
        // Re-running obfuscation on an expanded corpus only touches originals.
        let again = obfuscate_corpus(&one, &[200], DEFAULT_NOP_BYTE, 10);
        assert!(matches!(
            again,
            Err(ObfuscateError::Corpus(CorpusError::DuplicateOriginId(_)))
        ));
    }

    #[test]
    fn corpus_expansion_is_seed_deterministic() {
        let spec = SynthSpec {
            n_families: 2,
            samples_per_family: 2,
            len_range: 512..=1024,
            segments: 6,
        };
        let m = synth_corpus(&spec, 5).unwrap();
        let a = obfuscate_corpus(&m, &[200, 400], DEFAULT_NOP_BYTE, 9).unwrap();
        let b = obfuscate_corpus(&m, &[200, 400], DEFAULT_NOP_BYTE, 9).unwrap();
        for i in 0..a.len() {
            assert_eq!(a.load_bytes(i).unwrap(), b.load_bytes(i).unwrap());
        }
    }

    proptest! {
        #[test]
        fn insertion_preserves_the_original_multiset(
            bytes in proptest::collection::vec(any::<u8>(), 1..512),
            freq in 0u32..64,
            seed in 0u64..1000,
        ) {
            let original = raw(bytes);
            let plan = plan_nops(&original, freq, DEFAULT_NOP_BYTE, seed);
            let out = apply_nops(&original, &plan).unwrap();
            prop_assert_eq!(out.bytes.len(), original.bytes.len() + freq as usize);
            let mut want = [0i64; 256];
            for &b in &original.bytes {
                want[b as usize] += 1;
            }
            want[DEFAULT_NOP_BYTE as usize] += freq as i64;
            let mut got = [0i64; 256];
            for &b in &out.bytes {
                got[b as usize] += 1;
            }
            prop_assert_eq!(&want[..], &got[..]);
            // And order is preserved: original is a subsequence.
            prop_assert_eq!(strip_plan(&out.bytes, &plan), original.bytes);
        }
    }
}
