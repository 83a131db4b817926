//! Embedding-bank persistence.
//!
//! A bank travels as two files. `x.bank` holds the 8 magic bytes
//! `LAPTEMB1`, a little-endian `u32` dimension, a little-endian `u32` row
//! count and then the rows as row-major little-endian `f32`. The sidecar
//! `x.manifest.jsonl` holds one JSON object per row:
//!
//! ```text
//! {"index":0,"label":"cat","group":"id","provenance":"external"}
//! ```
//!
//! Rows are stored as written; on load every row must have norm within
//! `1 +- 1e-3`, and [`EmbeddingBank::features`] re-normalizes in `f64`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numeric::{l2_normalize_in_place, norm, FeatureMatrix};

pub const MAGIC: &[u8; 8] = b"LAPTEMB1";
pub const HEADER_LEN: usize = 16;
/// Accepted deviation of a stored row norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Group {
    Id,
    Neg,
    Corpus,
    TestId,
    TestOod,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Real,
    Synthetic,
    External,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Real => "real",
            Provenance::Synthetic => "synthetic",
            Provenance::External => "external",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub index: usize,
    pub label: String,
    pub group: Group,
    pub provenance: Provenance,
}

/// Unit-norm rows stored at 32-bit precision plus their manifest, ordered
/// by row index.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBank {
    dim: usize,
    values: Vec<f32>,
    manifest: Vec<ManifestEntry>,
}

/// Header and payload of a `.bank` file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawBank {
    pub dim: usize,
    pub rows: usize,
    pub values: Vec<f32>,
}

/// Row metadata without an index; the index is assigned by position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowMeta {
    pub label: String,
    pub group: Group,
    pub provenance: Provenance,
}

impl RowMeta {
    pub fn new(label: impl Into<String>, group: Group, provenance: Provenance) -> Self {
        Self {
            label: label.into(),
            group,
            provenance,
        }
    }
}

impl EmbeddingBank {
    /// Normalizes each row in `f64` and narrows it to `f32`.
    pub fn from_features(features: &FeatureMatrix, meta: Vec<RowMeta>) -> Result<Self> {
        if features.len() != meta.len() {
            return Err(Error::ManifestMismatch(format!(
                "{} rows but {} manifest entries",
                features.len(),
                meta.len()
            )));
        }
        let dim = features.dim();
        let mut values = Vec::with_capacity(dim * features.len());
        let mut scratch = vec![0.0; dim];
        for row in features.rows() {
            scratch.copy_from_slice(row);
            l2_normalize_in_place(&mut scratch)?;
            values.extend(scratch.iter().map(|&x| x as f32));
        }
        let manifest = meta
            .into_iter()
            .enumerate()
            .map(|(index, m)| ManifestEntry {
                index,
                label: m.label,
                group: m.group,
                provenance: m.provenance,
            })
            .collect();
        let bank = Self {
            dim,
            values,
            manifest,
        };
        bank.check_norms()?;
        Ok(bank)
    }

    /// Combines a decoded payload and manifest, validating both.
    pub fn from_parts(raw: RawBank, mut manifest: Vec<ManifestEntry>) -> Result<Self> {
        if manifest.len() != raw.rows {
            return Err(Error::ManifestMismatch(format!(
                "payload has {} rows, manifest declares {}",
                raw.rows,
                manifest.len()
            )));
        }
        manifest.sort_by_key(|e| e.index);
        for (expected, entry) in manifest.iter().enumerate() {
            if entry.index != expected {
                return Err(Error::ManifestMismatch(format!(
                    "manifest indices are not a permutation of 0..{}",
                    raw.rows
                )));
            }
        }
        let bank = Self {
            dim: raw.dim,
            values: raw.values,
            manifest,
        };
        bank.check_norms()?;
        Ok(bank)
    }

    fn check_norms(&self) -> Result<()> {
        for (row, chunk) in self.values.chunks_exact(self.dim).enumerate() {
            let wide: Vec<f64> = chunk.iter().map(|&x| f64::from(x)).collect();
            let n = norm(&wide);
            if !((1.0 - NORM_TOLERANCE)..=(1.0 + NORM_TOLERANCE)).contains(&n) {
                return Err(Error::NormViolation { row, norm: n });
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    pub fn manifest(&self) -> &[ManifestEntry] {
        &self.manifest
    }

    pub fn raw_row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows widened to `f64` and re-normalized.
    pub fn features(&self) -> FeatureMatrix {
        let mut out = FeatureMatrix::with_capacity(self.dim, self.len());
        let mut scratch = vec![0.0; self.dim];
        for chunk in self.values.chunks_exact(self.dim) {
            for (dst, &src) in scratch.iter_mut().zip(chunk) {
                *dst = f64::from(src);
            }
            l2_normalize_in_place(&mut scratch).expect("bank rows are validated unit-norm");
            out.push_row(&scratch)
                .expect("row width matches bank dimension");
        }
        out
    }

    /// Indices of rows in `group`, in row order.
    pub fn indices_in(&self, group: Group) -> Vec<usize> {
        self.manifest
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.index)
            .collect()
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> + '_ {
        self.manifest.iter().map(|e| e.label.as_str())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn encode_manifest(&self) -> String {
        let mut out = String::new();
        for entry in &self.manifest {
            out.push_str(&serde_json::to_string(entry).expect("manifest entries serialize"));
            out.push('\n');
        }
        out
    }

    pub fn decode(bank: &[u8], manifest: &str) -> Result<Self> {
        let raw = decode_payload(bank)?;
        let entries = parse_manifest(manifest)?;
        Self::from_parts(raw, entries)
    }

    /// SHA-256 over the encoded payload followed by the manifest text.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.encode());
        hasher.update(self.encode_manifest().as_bytes());
        hex::encode(hasher.finalize())
    }

    /// Writes `path` and its manifest sidecar, each through a temporary
    /// file and a rename.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_atomic(path, &self.encode())?;
        write_atomic(&manifest_path(path), self.encode_manifest().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mpath = manifest_path(path);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        Self::decode(&bytes, &text)
    }
}

/// `x.bank` -> `x.manifest.jsonl`; any other name gets the suffix appended.
pub fn manifest_path(bank_path: &Path) -> PathBuf {
    let name = bank_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let stem = name.strip_suffix(".bank").unwrap_or(&name);
    bank_path.with_file_name(format!("{stem}.manifest.jsonl"))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Parses the binary part of a bank. Does not check row norms.
pub fn decode_payload(bytes: &[u8]) -> Result<RawBank> {
    let magic_len = bytes.len().min(MAGIC.len());
    if bytes[..magic_len] != MAGIC[..magic_len] {
        return Err(Error::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedFile {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().expect("4-byte slice")) as usize;
    let rows = u32::from_le_bytes(bytes[12..16].try_into().expect("4-byte slice")) as usize;
    if dim == 0 {
        return Err(Error::Config("bank dimension must be positive".into()));
    }
    let expected = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Range(format!("bank of {rows} x {dim} rows is too large")))?;
    let found = bytes.len();
    if found < expected {
        return Err(Error::TruncatedFile { expected, found });
    }
    if found > expected {
        return Err(Error::ManifestMismatch(format!(
            "{} trailing bytes after a {rows} x {dim} payload",
            found - expected
        )));
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    Ok(RawBank { dim, rows, values })
}

/// Parses a JSON-lines manifest. Blank lines are ignored.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn three_row_bank() -> EmbeddingBank {
        let f = FeatureMatrix::from_rows(3, &[[1.0, 0.0, 0.0], [0.6, 0.8, 0.0], [1.0, 1.0, 1.0]])
            .unwrap();
        EmbeddingBank::from_features(
            &f,
            vec![
                RowMeta::new("cat", Group::Id, Provenance::External),
                RowMeta::new("dog", Group::TestId, Provenance::Real),
                RowMeta::new("rock", Group::Neg, Provenance::Synthetic),
            ],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_reproduces_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bank");
        let bank = three_row_bank();
        bank.save(&path).unwrap();
        assert!(dir.path().join("x.manifest.jsonl").exists());
        let loaded = EmbeddingBank::load(&path).unwrap();
        assert_eq!(loaded, bank);
        let first = fs::read(&path).unwrap();
        loaded.save(&path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
    }

    #[test]
    fn manifest_line_format() {
        let text = three_row_bank().encode_manifest();
        let first = text.lines().next().unwrap();
        assert_eq!(
            first,
            r#"{"index":0,"label":"cat","group":"id","provenance":"external"}"#
        );
        assert!(text.contains(r#""group":"test-id""#));
    }

    #[test]
    fn header_layout() {
        let bytes = three_row_bank().encode();
        assert_eq!(&bytes[..8], b"LAPTEMB1");
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 3 * 3 * 4);
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
    }

    #[test]
    fn wrong_magic() {
        let bank = three_row_bank();
        let mut bytes = bank.encode();
        bytes[0] = b'X';
        assert!(matches!(
            EmbeddingBank::decode(&bytes, &bank.encode_manifest()),
            Err(Error::BadMagic)
        ));
        assert!(matches!(decode_payload(b"NOPE"), Err(Error::BadMagic)));
    }

    #[test]
    fn truncation() {
        let bank = three_row_bank();
        let bytes = bank.encode();
        for cut in [4, 12, 20, bytes.len() - 1] {
            assert!(
                matches!(
                    decode_payload(&bytes[..cut]),
                    Err(Error::TruncatedFile { .. })
                ),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn manifest_declaring_extra_row() {
        let f = FeatureMatrix::from_rows(2, &[[1.0, 0.0]; 4]).unwrap();
        let meta = (0..4)
            .map(|i| RowMeta::new(format!("r{i}"), Group::Id, Provenance::Real))
            .collect();
        let bank = EmbeddingBank::from_features(&f, meta).unwrap();
        let mut manifest = bank.encode_manifest();
        manifest.push_str(r#"{"index":4,"label":"r4","group":"id","provenance":"real"}"#);
        manifest.push('\n');
        assert!(matches!(
            EmbeddingBank::decode(&bank.encode(), &manifest),
            Err(Error::ManifestMismatch(_))
        ));
    }

    #[test]
    fn manifest_indices_must_be_a_permutation() {
        let bank = three_row_bank();
        let manifest = bank
            .encode_manifest()
            .replace(r#""index":2"#, r#""index":0"#);
        assert!(matches!(
            EmbeddingBank::decode(&bank.encode(), &manifest),
            Err(Error::ManifestMismatch(_))
        ));
        // shuffled order is fine
        let text = bank.encode_manifest();
        let mut lines: Vec<&str> = text.lines().collect();
        lines.reverse();
        let reversed = lines.join("\n");
        assert_eq!(
            EmbeddingBank::decode(&bank.encode(), &reversed).unwrap(),
            bank
        );
    }

    #[test]
    fn unknown_manifest_values_are_rejected() {
        assert!(
            parse_manifest(r#"{"index":0,"label":"a","group":"train","provenance":"real"}"#)
                .is_err()
        );
        assert!(parse_manifest(
            r#"{"index":0,"label":"a","group":"id","provenance":"real","x":1}"#
        )
        .is_err());
    }

    #[test]
    fn non_unit_rows_are_rejected() {
        let mut bytes = Vec::from(&MAGIC[..]);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&0.5f32.to_le_bytes());
        bytes.extend_from_slice(&0.5f32.to_le_bytes());
        let manifest = r#"{"index":0,"label":"a","group":"id","provenance":"real"}"#;
        assert!(matches!(
            EmbeddingBank::decode(&bytes, manifest),
            Err(Error::NormViolation { row: 0, .. })
        ));
        let nan = {
            let mut b = bytes.clone();
            b[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
            b
        };
        assert!(matches!(
            EmbeddingBank::decode(&nan, manifest),
            Err(Error::NormViolation { .. })
        ));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = three_row_bank().encode();
        bytes.push(0);
        assert!(decode_payload(&bytes).is_err());
    }

    #[test]
    fn sidecar_naming() {
        assert_eq!(
            manifest_path(Path::new("/a/b/test_id.bank")),
            PathBuf::from("/a/b/test_id.manifest.jsonl")
        );
        assert_eq!(
            manifest_path(Path::new("plain")),
            PathBuf::from("plain.manifest.jsonl")
        );
    }

    proptest! {
        #[test]
        fn encode_decode_identity(rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 5), 0..8)) {
            let rows: Vec<Vec<f64>> = rows.into_iter().filter(|r| norm(r) > 1e-3).collect();
            let f = FeatureMatrix::from_rows(5, &rows).unwrap();
            let meta = (0..rows.len()).map(|i| RowMeta::new(format!("l{i}"), Group::Corpus, Provenance::External)).collect();
            let bank = EmbeddingBank::from_features(&f, meta).unwrap();
            let back = EmbeddingBank::decode(&bank.encode(), &bank.encode_manifest()).unwrap();
            prop_assert_eq!(&back, &bank);
            let feats = back.features();
            for (a, b) in feats.rows().zip(f.rows()) {
                let nb = norm(b);
                for (x, y) in a.iter().zip(b) {
                    prop_assert!((x - y / nb).abs() < 1e-6);
                }
            }
        }
    }
}
