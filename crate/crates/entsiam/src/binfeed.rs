//! Corpus ingestion and sample bookkeeping.
//!
//! A corpus is a set of labeled binaries, tracked in a [`Manifest`]: one
//! entry per sample with a stable `origin_id`, a family label, where the
//! bytes live, and a [`Lineage`] describing how the sample was derived
//! (original file, NOP-obfuscated variant, or rotation-augmented copy).
//! Manifests serialize to a line-oriented tab-separated file so corpus
//! builds diff cleanly and replay deterministically.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::seeds;
use rand::Rng;
use thiserror::Error;

/// Current manifest schema version, written as the first field of every record.
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Rotations available for augmentation, in the order slots are assigned.
pub const AUGMENT_ROTATIONS: [u32; 3] = [90, 180, 270];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}: file is empty")]
    ZeroLength(PathBuf),
    #[error("{0}: not a directory")]
    NotADirectory(PathBuf),
    #[error("{0}: no family subdirectories with samples")]
    EmptyRoot(PathBuf),
    #[error("synthetic corpus needs at least {need} families, got {found}")]
    TooFewFamilies { found: usize, need: usize },
    #[error(
        "family {family}: cannot reach {requested} samples; \
         {originals} originals allow at most {capacity}"
    )]
    InsufficientAugmentation {
        family: String,
        originals: usize,
        capacity: usize,
        requested: usize,
    },
    #[error("duplicate origin_id {0}")]
    DuplicateOriginId(String),
    #[error("invalid name {0:?}: must be non-empty [A-Za-z0-9._-]")]
    InvalidName(String),
    #[error("entry {child} references unknown parent {parent}")]
    UnknownParent { child: String, parent: String },
    #[error("entry {0} holds in-memory bytes; materialize the manifest before saving")]
    UnmaterializedEntry(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("unsupported rotation {0}; expected one of 90/180/270")]
    BadRotation(u32),
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// How a sample came to exist.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Lineage {
    /// Ingested or synthesized directly.
    Original,
    /// NOP bytes inserted into `parent` at the given frequency.
    Obfuscated { frequency: u32, parent: String },
    /// Image-space rotation of `parent` by 90/180/270 degrees.
    Augmented { rotation: u32, parent: String },
}

impl Lineage {
    pub fn parent(&self) -> Option<&str> {
        match self {
            Lineage::Original => None,
            Lineage::Obfuscated { parent, .. } | Lineage::Augmented { parent, .. } => {
                Some(parent)
            }
        }
    }

    pub fn is_original(&self) -> bool {
        matches!(self, Lineage::Original)
    }
}

impl fmt::Display for Lineage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Lineage::Original => write!(f, "original"),
            Lineage::Obfuscated { frequency, .. } => write!(f, "obfuscated:{frequency}"),
            Lineage::Augmented { .. } => write!(f, "augmented"),
        }
    }
}

/// Where a sample's bytes live.
#[derive(Debug, Clone)]
pub enum SampleSource {
    /// Path relative to the manifest root.
    Path(PathBuf),
    /// Bytes held in memory (synthetic or freshly obfuscated samples).
    Inline(Arc<Vec<u8>>),
}

/// A labeled binary held in memory.
#[derive(Debug, Clone)]
pub struct RawBinary {
    pub origin_id: String,
    pub family: String,
    pub bytes: Vec<u8>,
    pub lineage: Lineage,
}

/// One manifest record.
#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub origin_id: String,
    pub family: String,
    pub source: SampleSource,
    pub lineage: Lineage,
}

/// An ordered corpus listing with a family index.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    root: Option<PathBuf>,
    entries: Vec<ManifestEntry>,
    class_index: BTreeMap<String, Vec<usize>>,
    id_index: HashMap<String, usize>,
}

/// `true` when `name` is usable as an origin_id or family label.
pub fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'))
}

/// Replace illegal characters so an arbitrary file name becomes a valid id.
fn sanitize_name(name: &str) -> String {
    let out: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '-'
            }
        })
        .collect();
    if out.is_empty() {
        "sample".to_string()
    } else {
        out
    }
}

impl Manifest {
    /// Build a manifest from entries, validating ids, families and parents.
    pub fn from_entries(
        root: Option<PathBuf>,
        entries: Vec<ManifestEntry>,
    ) -> Result<Self, CorpusError> {
        let mut id_index = HashMap::with_capacity(entries.len());
        let mut class_index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, e) in entries.iter().enumerate() {
            if !valid_name(&e.origin_id) {
                return Err(CorpusError::InvalidName(e.origin_id.clone()));
            }
            if !valid_name(&e.family) {
                return Err(CorpusError::InvalidName(e.family.clone()));
            }
            if let Lineage::Augmented { rotation, .. } = e.lineage {
                if !AUGMENT_ROTATIONS.contains(&rotation) {
                    return Err(CorpusError::BadRotation(rotation));
                }
            }
            if id_index.insert(e.origin_id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateOriginId(e.origin_id.clone()));
            }
            class_index.entry(e.family.clone()).or_default().push(i);
        }
        for e in &entries {
            if let Some(p) = e.lineage.parent() {
                if !id_index.contains_key(p) {
                    return Err(CorpusError::UnknownParent {
                        child: e.origin_id.clone(),
                        parent: p.to_string(),
                    });
                }
            }
        }
        Ok(Manifest {
            root,
            entries,
            class_index,
            id_index,
        })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    /// Families in sorted order with the indices of their entries.
    pub fn class_index(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.class_index
    }

    /// Family names in sorted order.
    pub fn families(&self) -> Vec<String> {
        self.class_index.keys().cloned().collect()
    }

    pub fn index_of(&self, origin_id: &str) -> Option<usize> {
        self.id_index.get(origin_id).copied()
    }

    /// Index of the original ancestor of entry `idx` (itself when original).
    pub fn root_of(&self, idx: usize) -> usize {
        let mut cur = idx;
        while let Some(parent) = self.entries[cur].lineage.parent() {
            cur = self.id_index[parent];
        }
        cur
    }

    /// Read the raw bytes backing entry `idx`.
    pub fn load_bytes(&self, idx: usize) -> Result<Vec<u8>, CorpusError> {
        match &self.entries[idx].source {
            SampleSource::Inline(bytes) => Ok(bytes.as_ref().clone()),
            SampleSource::Path(rel) => {
                let path = match &self.root {
                    Some(root) => root.join(rel),
                    None => rel.clone(),
                };
                let bytes = std::fs::read(&path).map_err(|e| io_err(&path, e))?;
                if bytes.is_empty() {
                    return Err(CorpusError::ZeroLength(path));
                }
                Ok(bytes)
            }
        }
    }

    /// Load entry `idx` as a [`RawBinary`].
    pub fn load_raw(&self, idx: usize) -> Result<RawBinary, CorpusError> {
        let e = &self.entries[idx];
        Ok(RawBinary {
            origin_id: e.origin_id.clone(),
            family: e.family.clone(),
            bytes: self.load_bytes(idx)?,
            lineage: e.lineage.clone(),
        })
    }

    /// Append entries, revalidating the combined listing.
    pub fn extend(&self, extra: Vec<ManifestEntry>) -> Result<Manifest, CorpusError> {
        let mut entries = self.entries.clone();
        entries.extend(extra);
        Manifest::from_entries(self.root.clone(), entries)
    }

    /// Write inline samples to `<root>/<family>/<origin_id>.bin` and switch
    /// their sources to paths. Entries already on disk are left alone.
    pub fn materialize(&mut self, root: &Path) -> Result<(), CorpusError> {
        std::fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
        for e in &mut self.entries {
            if let SampleSource::Inline(bytes) = &e.source {
                let rel = PathBuf::from(&e.family).join(format!("{}.bin", e.origin_id));
                let path = root.join(&rel);
                if let Some(dir) = path.parent() {
                    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
                }
                write_atomic(&path, bytes)?;
                e.source = SampleSource::Path(rel);
            }
        }
        self.root = Some(root.to_path_buf());
        Ok(())
    }

    /// Serialize to a tab-separated file, one record per line. `comments`
    /// are written first as `#`-prefixed lines (provenance, resolved config).
    pub fn save(&self, path: &Path, comments: &[String]) -> Result<(), CorpusError> {
        let mut out = String::new();
        for c in comments {
            out.push_str("# ");
            out.push_str(c);
            out.push('\n');
        }
        for e in &self.entries {
            let rel = match &e.source {
                SampleSource::Path(p) => p.to_string_lossy().into_owned(),
                SampleSource::Inline(_) => {
                    return Err(CorpusError::UnmaterializedEntry(e.origin_id.clone()))
                }
            };
            let (parent, rotation) = match &e.lineage {
                Lineage::Original => ("-".to_string(), "-".to_string()),
                Lineage::Obfuscated { parent, .. } => (parent.clone(), "-".to_string()),
                Lineage::Augmented { parent, rotation } => {
                    (parent.clone(), rotation.to_string())
                }
            };
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                MANIFEST_SCHEMA_VERSION, e.origin_id, e.family, rel, e.lineage, parent, rotation
            ));
        }
        write_atomic(path, out.as_bytes())
    }

    /// Load a manifest. Sample paths resolve against `root` when given,
    /// otherwise against the manifest file's own directory.
    pub fn load(path: &Path, root: Option<&Path>) -> Result<Manifest, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let root = root
            .map(Path::to_path_buf)
            .or_else(|| path.parent().map(Path::to_path_buf));
        let parse = |line: usize, msg: String| CorpusError::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let lineno = lineno + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 7 {
                return Err(parse(lineno, format!("expected 7 fields, got {}", fields.len())));
            }
            let version: u32 = fields[0]
                .parse()
                .map_err(|_| parse(lineno, format!("bad schema version {:?}", fields[0])))?;
            if version != MANIFEST_SCHEMA_VERSION {
                return Err(parse(
                    lineno,
                    format!("unsupported schema version {version}"),
                ));
            }
            let origin_id = fields[1].to_string();
            let family = fields[2].to_string();
            let source = SampleSource::Path(PathBuf::from(fields[3]));
            let parent = fields[5];
            let rotation = fields[6];
            let lineage = if fields[4] == "original" {
                Lineage::Original
            } else if let Some(freq) = fields[4].strip_prefix("obfuscated:") {
                let frequency = freq
                    .parse()
                    .map_err(|_| parse(lineno, format!("bad frequency {freq:?}")))?;
                Lineage::Obfuscated {
                    frequency,
                    parent: parent.to_string(),
                }
            } else if fields[4] == "augmented" {
                let rotation: u32 = rotation
                    .parse()
                    .map_err(|_| parse(lineno, format!("bad rotation {rotation:?}")))?;
                Lineage::Augmented {
                    rotation,
                    parent: parent.to_string(),
                }
            } else {
                return Err(parse(lineno, format!("unknown lineage {:?}", fields[4])));
            };
            entries.push(ManifestEntry {
                origin_id,
                family,
                source,
                lineage,
            });
        }
        Manifest::from_entries(root, entries)
    }
}

/// Write a file via a temp-then-rename so readers never see partial output.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CorpusError> {
    let tmp = path.with_extension("tmp~");
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
        f.sync_all().map_err(|e| io_err(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Read one binary from disk as an original sample of `family`.
pub fn load_binary(path: &Path, family: &str) -> Result<RawBinary, CorpusError> {
    if !valid_name(family) {
        return Err(CorpusError::InvalidName(family.to_string()));
    }
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.is_empty() {
        return Err(CorpusError::ZeroLength(path.to_path_buf()));
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(RawBinary {
        origin_id: sanitize_name(&name),
        family: family.to_string(),
        bytes,
        lineage: Lineage::Original,
    })
}

/// Walk `root`, treating each subdirectory as one family of samples.
///
/// Families and files are visited in sorted order so the resulting manifest
/// is stable. Empty family directories are logged and skipped.
pub fn scan_corpus(root: &Path) -> Result<Manifest, CorpusError> {
    if !root.is_dir() {
        return Err(CorpusError::NotADirectory(root.to_path_buf()));
    }
    let mut families: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| io_err(root, e))?
        .filter_map(|r| r.ok().map(|d| d.path()))
        .filter(|p| p.is_dir())
        .collect();
    families.sort();

    let mut entries = Vec::new();
    for fam_dir in &families {
        let family = sanitize_name(&fam_dir.file_name().unwrap_or_default().to_string_lossy());
        let mut files: Vec<PathBuf> = std::fs::read_dir(fam_dir)
            .map_err(|e| io_err(fam_dir, e))?
            .filter_map(|r| r.ok().map(|d| d.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        if files.is_empty() {
            log::warn!("family directory {} has no samples; skipping", fam_dir.display());
            continue;
        }
        for file in files {
            let meta = std::fs::metadata(&file).map_err(|e| io_err(&file, e))?;
            if meta.len() == 0 {
                return Err(CorpusError::ZeroLength(file));
            }
            let name = file.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let origin_id = sanitize_name(&format!("{family}.{name}"));
            let rel = file.strip_prefix(root).unwrap_or(&file).to_path_buf();
            entries.push(ManifestEntry {
                origin_id,
                family: family.clone(),
                source: SampleSource::Path(rel),
                lineage: Lineage::Original,
            });
        }
    }
    if entries.is_empty() {
        return Err(CorpusError::EmptyRoot(root.to_path_buf()));
    }
    Manifest::from_entries(Some(root.to_path_buf()), entries)
}

/// Shape of a synthetic corpus.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n_families: usize,
    pub samples_per_family: usize,
    /// Uniformly sampled length of each binary, in bytes.
    pub len_range: std::ops::RangeInclusive<usize>,
    /// Entropy segments per binary; each family gets a fixed per-segment profile.
    pub segments: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_families: 8,
            samples_per_family: 40,
            // Large enough that a 105-block-wide entropy image spans
            // several rows, so the segment profile shows up as 2-D bands.
            len_range: 192 * 1024..=384 * 1024,
            segments: 12,
        }
    }
}

/// Byte-alphabet sizes a segment can draw from. Alphabet size controls the
/// per-block entropy and therefore the stripe's gray level: 1 renders black,
/// 16 dark gray, 256 bright.
const SYNTH_PALETTE: [usize; 3] = [1, 16, 256];

/// Minimum number of differing segments between two family profiles.
const MIN_PROFILE_DISTANCE: usize = 4;

fn profile_distance(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Generate a deterministic synthetic corpus with class-separable entropy
/// structure: each family draws a fixed per-segment alphabet-size profile
/// (re-drawn until it differs from every earlier family in at least
/// [`MIN_PROFILE_DISTANCE`] segments), and each sample fills its segments
/// with bytes from those alphabets.
pub fn synth_corpus(spec: &SynthSpec, seed: u64) -> Result<Manifest, CorpusError> {
    if spec.n_families < 2 {
        return Err(CorpusError::TooFewFamilies {
            found: spec.n_families,
            need: 2,
        });
    }
    assert!(spec.segments >= 1, "segments must be >= 1");
    assert!(*spec.len_range.start() >= 1, "samples must be non-empty");

    // Family profiles, drawn greedily with a salt counter on collision.
    let mut profiles: Vec<Vec<usize>> = Vec::with_capacity(spec.n_families);
    for fam in 0..spec.n_families {
        let mut salt = 0u32;
        let profile = loop {
            let mut rng = seeds::rng(
                seed,
                &["synth-profile", &fam.to_string(), &salt.to_string()],
            );
            let cand: Vec<usize> = (0..spec.segments)
                .map(|_| SYNTH_PALETTE[rng.gen_range(0..SYNTH_PALETTE.len())])
                .collect();
            if profiles
                .iter()
                .all(|p| profile_distance(p, &cand) >= MIN_PROFILE_DISTANCE)
            {
                break cand;
            }
            salt += 1;
            assert!(salt < 10_000, "profile space exhausted");
        };
        profiles.push(profile);
    }

    let mut entries = Vec::with_capacity(spec.n_families * spec.samples_per_family);
    for (fam, profile) in profiles.iter().enumerate() {
        let family = format!("fam{fam:02}");
        for s in 0..spec.samples_per_family {
            let mut rng = seeds::rng(seed, &["synth-sample", &fam.to_string(), &s.to_string()]);
            let len = rng.gen_range(spec.len_range.clone());
            let mut bytes = Vec::with_capacity(len);
            let seg_len = len / spec.segments;
            for (si, &alphabet) in profile.iter().enumerate() {
                let this_len = if si + 1 == spec.segments {
                    len - seg_len * (spec.segments - 1)
                } else {
                    seg_len
                };
                if alphabet == 1 {
                    // Constant filler byte, family-keyed for realism.
                    let b = (fam * 37 % 251) as u8;
                    bytes.extend(std::iter::repeat(b).take(this_len));
                } else {
                    for _ in 0..this_len {
                        bytes.push(rng.gen_range(0..alphabet) as u8);
                    }
                }
            }
            entries.push(ManifestEntry {
                origin_id: format!("{family}-s{s:03}"),
                family: family.clone(),
                source: SampleSource::Inline(Arc::new(bytes)),
                lineage: Lineage::Original,
            });
        }
    }
    Manifest::from_entries(None, entries)
}

/// Top up every class to at least `min_per_class` entries by rotating
/// originals. Rotation slots are assigned round-robin: all parents at 90
/// degrees, then 180, then 270, skipping (parent, rotation) pairs that
/// already exist. Existing entries are never removed or reordered.
pub fn augment_to_minimum(
    manifest: &Manifest,
    min_per_class: usize,
) -> Result<Manifest, CorpusError> {
    let mut extra = Vec::new();
    for (family, members) in manifest.class_index() {
        let have = members.len();
        if have >= min_per_class {
            continue;
        }
        let originals: Vec<usize> = members
            .iter()
            .copied()
            .filter(|&i| manifest.entries[i].lineage.is_original())
            .collect();
        let existing: HashSet<(String, u32)> = members
            .iter()
            .filter_map(|&i| match &manifest.entries[i].lineage {
                Lineage::Augmented { rotation, parent } => Some((parent.clone(), *rotation)),
                _ => None,
            })
            .collect();
        let capacity = originals.len() * (1 + AUGMENT_ROTATIONS.len());
        if capacity < min_per_class {
            return Err(CorpusError::InsufficientAugmentation {
                family: family.clone(),
                originals: originals.len(),
                capacity,
                requested: min_per_class,
            });
        }
        let mut needed = min_per_class - have;
        'fill: for &rotation in &AUGMENT_ROTATIONS {
            for &pi in &originals {
                if needed == 0 {
                    break 'fill;
                }
                let parent = &manifest.entries[pi];
                if existing.contains(&(parent.origin_id.clone(), rotation)) {
                    continue;
                }
                extra.push(ManifestEntry {
                    origin_id: format!("{}.rot{}", parent.origin_id, rotation),
                    family: family.clone(),
                    source: parent.source.clone(),
                    lineage: Lineage::Augmented {
                        rotation,
                        parent: parent.origin_id.clone(),
                    },
                });
                needed -= 1;
            }
        }
        debug_assert_eq!(needed, 0);
    }
    manifest.extend(extra)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use sha2::{Digest, Sha256};

    fn entry(id: &str, family: &str, lineage: Lineage) -> ManifestEntry {
        ManifestEntry {
            origin_id: id.to_string(),
            family: family.to_string(),
            source: SampleSource::Inline(Arc::new(vec![1, 2, 3])),
            lineage,
        }
    }

    #[test]
    fn load_binary_is_a_passthrough() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probe.bin");
        std::fs::write(&path, [0x4d, 0x5a]).unwrap();
        let raw = load_binary(&path, "famA").unwrap();
        assert_eq!(raw.bytes, vec![0x4d, 0x5a]);
        assert_eq!(raw.family, "famA");
        assert_eq!(raw.origin_id, "probe.bin");
        assert!(raw.lineage.is_original());
    }

    #[test]
    fn load_binary_rejects_empty_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.bin");
        std::fs::write(&path, []).unwrap();
        assert!(matches!(
            load_binary(&path, "famA"),
            Err(CorpusError::ZeroLength(_))
        ));
    }

    #[test]
    fn large_files_survive_ingestion_bit_for_bit() {
        // Independent check: hash what went to disk, hash what came back.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.bin");
        let mut rng = seeds::rng(11, &["test-large-file"]);
        let bytes: Vec<u8> = (0..1024 * 1024).map(|_| rng.gen()).collect();
        std::fs::write(&path, &bytes).unwrap();
        let raw = load_binary(&path, "famA").unwrap();
        assert_eq!(raw.bytes.len(), bytes.len());
        assert_eq!(
            Sha256::digest(&raw.bytes)[..],
            Sha256::digest(&bytes)[..],
            "ingested bytes differ from source"
        );
    }

    #[test]
    fn scan_collects_family_directories() {
        let dir = tempfile::tempdir().unwrap();
        for fam in ["famA", "famB"] {
            std::fs::create_dir(dir.path().join(fam)).unwrap();
            for i in 0..3 {
                std::fs::write(dir.path().join(fam).join(format!("s{i}.bin")), [i as u8 + 1]).unwrap();
            }
        }
        let m = scan_corpus(dir.path()).unwrap();
        assert_eq!(m.len(), 6);
        assert_eq!(m.families(), vec!["famA", "famB"]);
        assert_eq!(m.class_index()["famA"].len(), 3);
        assert!(m.entries().iter().all(|e| e.lineage.is_original()));
    }

    #[test]
    fn scan_skips_empty_family_dirs() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("famA")).unwrap();
        std::fs::write(dir.path().join("famA/s.bin"), [1]).unwrap();
        std::fs::create_dir(dir.path().join("empty")).unwrap();
        let m = scan_corpus(dir.path()).unwrap();
        assert_eq!(m.families(), vec!["famA"]);
    }

    #[test]
    fn scan_reproduces_reference_class_counts() {
        // Mirrors the class sizes of a published ransomware corpus.
        let counts: [(&str, usize); 11] = [
            ("Bitman", 99),
            ("Cerber", 91),
            ("Dalexis", 9),
            ("Gandcrab", 100),
            ("Locky", 96),
            ("Petya", 6),
            ("Teslacrypt", 91),
            ("Upatre", 18),
            ("Virlock", 162),
            ("Wannacry", 178),
            ("Zerber", 198),
        ];
        let dir = tempfile::tempdir().unwrap();
        for (fam, n) in counts {
            let fam_dir = dir.path().join(fam);
            std::fs::create_dir(&fam_dir).unwrap();
            for i in 0..n {
                std::fs::write(fam_dir.join(format!("{i:03}.bin")), [1, 2]).unwrap();
            }
        }
        let m = scan_corpus(dir.path()).unwrap();
        assert_eq!(m.len(), counts.iter().map(|(_, n)| n).sum::<usize>());
        for (fam, n) in counts {
            assert_eq!(m.class_index()[fam].len(), n, "family {fam}");
        }
    }

    #[test]
    fn synth_is_deterministic_in_args_and_seed() {
        let spec = SynthSpec {
            n_families: 3,
            samples_per_family: 4,
            len_range: 2048..=4096,
            segments: 12,
        };
        let a = synth_corpus(&spec, 7).unwrap();
        let b = synth_corpus(&spec, 7).unwrap();
        assert_eq!(a.len(), b.len());
        for i in 0..a.len() {
            assert_eq!(a.entries()[i].origin_id, b.entries()[i].origin_id);
            assert_eq!(a.load_bytes(i).unwrap(), b.load_bytes(i).unwrap());
        }
        let c = synth_corpus(&spec, 8).unwrap();
        let differs = (0..a.len()).any(|i| a.load_bytes(i).unwrap() != c.load_bytes(i).unwrap());
        assert!(differs, "different seed should change corpus content");
    }

    #[test]
    fn synth_rejects_single_family() {
        let spec = SynthSpec {
            n_families: 1,
            ..SynthSpec::default()
        };
        assert!(matches!(
            synth_corpus(&spec, 1),
            Err(CorpusError::TooFewFamilies { found: 1, need: 2 })
        ));
    }

    #[test]
    fn synth_lengths_stay_in_range() {
        let spec = SynthSpec {
            n_families: 2,
            samples_per_family: 6,
            len_range: 1000..=2000,
            segments: 12,
        };
        let m = synth_corpus(&spec, 3).unwrap();
        for i in 0..m.len() {
            let n = m.load_bytes(i).unwrap().len();
            assert!((1000..=2000).contains(&n), "len {n} out of range");
        }
    }

    #[test]
    fn augment_tops_up_to_minimum_without_duplicates() {
        let entries: Vec<ManifestEntry> =
            (0..9).map(|i| entry(&format!("a{i}"), "famA", Lineage::Original)).collect();
        let m = Manifest::from_entries(None, entries).unwrap();
        let out = augment_to_minimum(&m, 30).unwrap();
        assert_eq!(out.class_index()["famA"].len(), 30);
        let augmented: Vec<_> = out
            .entries()
            .iter()
            .filter_map(|e| match &e.lineage {
                Lineage::Augmented { rotation, parent } => Some((parent.clone(), *rotation)),
                _ => None,
            })
            .collect();
        assert_eq!(augmented.len(), 21);
        let unique: HashSet<_> = augmented.iter().cloned().collect();
        assert_eq!(unique.len(), 21, "duplicate (parent, rotation) pair");
        // Round-robin: 9 at 90, 9 at 180, remaining 3 at 270.
        let by_rot = |r: u32| augmented.iter().filter(|(_, rot)| *rot == r).count();
        assert_eq!((by_rot(90), by_rot(180), by_rot(270)), (9, 9, 3));
    }

    #[test]
    fn augment_leaves_large_classes_alone() {
        let entries: Vec<ManifestEntry> =
            (0..35).map(|i| entry(&format!("a{i}"), "famA", Lineage::Original)).collect();
        let m = Manifest::from_entries(None, entries).unwrap();
        let out = augment_to_minimum(&m, 30).unwrap();
        assert_eq!(out.len(), 35);
    }

    #[test]
    fn augment_fails_when_capacity_is_short() {
        let entries: Vec<ManifestEntry> =
            (0..6).map(|i| entry(&format!("a{i}"), "famA", Lineage::Original)).collect();
        let m = Manifest::from_entries(None, entries).unwrap();
        match augment_to_minimum(&m, 30) {
            Err(CorpusError::InsufficientAugmentation {
                originals, capacity, requested, ..
            }) => {
                assert_eq!((originals, capacity, requested), (6, 24, 30));
            }
            other => panic!("expected InsufficientAugmentation, got {other:?}"),
        }
    }

    #[test]
    fn manifest_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_families: 2,
            samples_per_family: 3,
            len_range: 512..=1024,
            segments: 6,
        };
        let mut m = synth_corpus(&spec, 5).unwrap();
        m.materialize(dir.path()).unwrap();
        let m = augment_to_minimum(&m, 4).unwrap();
        let manifest_path = dir.path().join("manifest.tsv");
        m.save(&manifest_path, &["written by test".into()]).unwrap();
        let back = Manifest::load(&manifest_path, None).unwrap();
        assert_eq!(back.len(), m.len());
        for i in 0..m.len() {
            assert_eq!(back.entries()[i].origin_id, m.entries()[i].origin_id);
            assert_eq!(back.entries()[i].family, m.entries()[i].family);
            assert_eq!(back.entries()[i].lineage, m.entries()[i].lineage);
            assert_eq!(back.load_bytes(i).unwrap(), m.load_bytes(i).unwrap());
        }
        // Saving the reloaded manifest reproduces the records verbatim.
        let again = dir.path().join("manifest2.tsv");
        back.save(&again, &["written by test".into()]).unwrap();
        assert_eq!(
            std::fs::read(&manifest_path).unwrap(),
            std::fs::read(&again).unwrap()
        );
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let entries = vec![
            entry("same", "famA", Lineage::Original),
            entry("same", "famB", Lineage::Original),
        ];
        assert!(matches!(
            Manifest::from_entries(None, entries),
            Err(CorpusError::DuplicateOriginId(_))
        ));
    }

    #[test]
    fn unknown_parents_are_rejected()  {
        let entries = vec![entry(
            "child",
            "famA",
            Lineage::Obfuscated {
                frequency: 200,
                parent: "ghost".into(),
            },
        )];
        assert!(matches!(
            Manifest::from_entries(None, entries),
            Err(CorpusError::UnknownParent { .. })
        ));
    }

    #[test]
    fn root_of_follows_parent_chain() {
        let entries = vec![
            entry("orig", "famA", Lineage::Original),
            entry(
                "orig.nop200",
                "famA",
                Lineage::Obfuscated {
                    frequency: 200,
                    parent: "orig".into(),
                },
            ),
            entry(
                "orig.rot90",
                "famA",
                Lineage::Augmented {
                    rotation: 90,
                    parent: "orig".into(),
                },
            ),
        ];
        let m = Manifest::from_entries(None, entries).unwrap();
        assert_eq!(m.root_of(0), 0);
        assert_eq!(m.root_of(1), 0);
        assert_eq!(m.root_of(2), 0);
    }

    proptest! {
        #[test]
        fn class_index_partitions_entries(fams in 1usize..5, per in 1usize..6) {
            let mut entries = Vec::new();
            for f in 0..fams {
                for i in 0..per {
                    entries.push(entry(&format!("f{f}s{i}"), &format!("fam{f}"), Lineage::Original));
                }
            }
            let m = Manifest::from_entries(None, entries).unwrap();
            let mut seen = vec![false; m.len()];
            for (family, members) in m.class_index() {
                for &i in members {
                    prop_assert_eq!(&m.entries()[i].family, family);
                    prop_assert!(!seen[i], "index {} listed twice", i);
                    seen[i] = true;
                }
            }
            prop_assert!(seen.iter().all(|&s| s));
        }

        #[test]
        fn sanitize_always_yields_valid_names(name in ".{0,32}") {
            prop_assert!(valid_name(&sanitize_name(&name)));
        }
    }
}
