//! The anchor datastore: cached next-token distributions keyed to gold labels.
//!
//! On disk a store named `sst2` is four files next to each other:
//!
//! - `sst2.manifest.json`: format version, shapes, CRC-32 checksums, metadata
//! - `sst2.keys.f32`: row-major little-endian float32, one row per entry
//! - `sst2.labels.json`: `[{"anchor_id", "label"}]` in entry order
//! - `sst2.hidden.f32`: optional hidden-state rows, same layout as the keys

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{Backend, HiddenRepr, VocabDistribution};
use crate::error::{Error, Result};
use crate::prompting::{build_prompt, LabeledExample, TaskSpec};

pub const FORMAT_VERSION: u32 = 1;

const SPLIT_STREAM: u64 = 1;

/// Demonstrations (prompt prefix) and anchors (datastore entries).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub demos: Vec<LabeledExample>,
    pub anchors: Vec<LabeledExample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreEntry {
    pub key: VocabDistribution,
    pub label: String,
    pub anchor_id: String,
}

/// Provenance of a store. `demos` holds the prompt prefix so a saved store
/// can serve queries without the original split.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StoreMetadata {
    pub model_id: String,
    pub task: String,
    pub demo_ids_hash: String,
    pub seed: u64,
    #[serde(default)]
    pub created_at_unix: Option<u64>,
    #[serde(default)]
    pub demos: Vec<LabeledExample>,
}

/// An immutable set of `(key distribution, gold label)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorStore {
    entries: Vec<StoreEntry>,
    vocab_size: usize,
    hidden_keys: Option<Vec<HiddenRepr>>,
    metadata: StoreMetadata,
}

impl AnchorStore {
    pub fn new(
        entries: Vec<StoreEntry>,
        hidden_keys: Option<Vec<HiddenRepr>>,
        metadata: StoreMetadata,
    ) -> Result<Self> {
        let vocab_size = entries
            .first()
            .map(|e| e.key.vocab_size())
            .ok_or_else(|| Error::InsufficientData("a store needs at least one entry".into()))?;
        if let Some(e) = entries.iter().find(|e| e.key.vocab_size() != vocab_size) {
            return Err(Error::ShapeMismatch {
                expected: vocab_size,
                actual: e.key.vocab_size(),
            });
        }
        if let Some(hidden) = &hidden_keys {
            if hidden.len() != entries.len() {
                return Err(Error::ShapeMismatch {
                    expected: entries.len(),
                    actual: hidden.len(),
                });
            }
            let width = hidden[0].len();
            if let Some(h) = hidden.iter().find(|h| h.len() != width) {
                return Err(Error::ShapeMismatch {
                    expected: width,
                    actual: h.len(),
                });
            }
        }
        Ok(Self {
            entries,
            vocab_size,
            hidden_keys,
            metadata,
        })
    }

    pub fn entries(&self) -> &[StoreEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn hidden_keys(&self) -> Option<&[HiddenRepr]> {
        self.hidden_keys.as_deref()
    }

    pub fn metadata(&self) -> &StoreMetadata {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut StoreMetadata {
        &mut self.metadata
    }

    /// Distinct labels in order of first appearance.
    pub fn classes(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.entries
            .iter()
            .filter(|e| seen.insert(e.label.as_str()))
            .map(|e| e.label.clone())
            .collect()
    }
}

/// SHA-256 over the ordered demonstration ids.
pub fn demo_ids_hash(demos: &[LabeledExample]) -> String {
    let mut h = Sha256::new();
    for d in demos {
        h.update((d.id.len() as u64).to_le_bytes());
        h.update(d.id.as_bytes());
    }
    hex::encode(h.finalize())
}

/// Seeded split of a training set into demonstrations and anchors.
///
/// Classes are taken in order of first appearance. Demonstrations come out
/// in seeded random order; anchors keep training-set order.
pub fn split_demo_anchor(
    train: &[LabeledExample],
    demo_per_class: usize,
    seed: u64,
) -> Result<Split> {
    if demo_per_class == 0 {
        return Err(Error::InsufficientData("demo_per_class must be at least 1".into()));
    }
    let mut classes: Vec<(&str, Vec<usize>)> = Vec::new();
    for (i, ex) in train.iter().enumerate() {
        match classes.iter_mut().find(|(l, _)| *l == ex.label) {
            Some((_, members)) => members.push(i),
            None => classes.push((&ex.label, vec![i])),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    let mut chosen = Vec::with_capacity(classes.len() * demo_per_class);
    for (label, members) in &classes {
        if members.len() < demo_per_class {
            return Err(Error::InsufficientData(format!(
                "class `{label}` has {} examples, {demo_per_class} demonstrations requested",
                members.len()
            )));
        }
        chosen.extend(
            index::sample(&mut rng, members.len(), demo_per_class)
                .iter()
                .map(|j| members[j]),
        );
    }
    chosen.shuffle(&mut rng);
    let taken: HashSet<usize> = chosen.iter().copied().collect();
    Ok(Split {
        demos: chosen.iter().map(|&i| train[i].clone()).collect(),
        anchors: train
            .iter()
            .enumerate()
            .filter(|(i, _)| !taken.contains(i))
            .map(|(_, e)| e.clone())
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BuildOptions {
    /// Also cache hidden states (needed for the L2 distance).
    pub want_hidden: bool,
    /// Concurrent backend queries; 1 means sequential.
    pub parallelism: usize,
    pub seed: u64,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            want_hidden: false,
            parallelism: 1,
            seed: 0,
        }
    }
}

/// Query the backend once per anchor and cache the full distributions.
pub fn build_store<B: Backend + ?Sized>(
    task: &TaskSpec,
    split: &Split,
    backend: &B,
    opts: BuildOptions,
) -> Result<AnchorStore> {
    if split.demos.is_empty() {
        return Err(Error::InsufficientData("the demonstration set is empty".into()));
    }
    if split.anchors.is_empty() {
        return Err(Error::InsufficientData("the anchor set is empty".into()));
    }
    let demo_ids: HashSet<&str> = split.demos.iter().map(|d| d.id.as_str()).collect();
    if let Some(a) = split.anchors.iter().find(|a| demo_ids.contains(a.id.as_str())) {
        return Err(Error::DuplicateId(a.id.clone()));
    }
    for a in &split.anchors {
        task.class_index(&a.label)?;
    }

    let query = |anchor: &LabeledExample| -> Result<(VocabDistribution, Option<HiddenRepr>)> {
        let prompt = build_prompt(task, &split.demos, anchor, backend)?;
        backend
            .query_distribution(&prompt, opts.want_hidden)
            .map_err(|e| e.context(format!("anchor `{}`", anchor.id)))
    };
    let results: Vec<Result<_>> = if opts.parallelism > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.parallelism)
            .build()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        pool.install(|| split.anchors.par_iter().map(query).collect())
    } else {
        split.anchors.iter().map(query).collect()
    };

    let mut entries = Vec::with_capacity(results.len());
    let mut hidden = opts.want_hidden.then(|| Vec::with_capacity(results.len()));
    for (anchor, r) in split.anchors.iter().zip(results) {
        let (key, h) = r?;
        if let Some(hs) = hidden.as_mut() {
            hs.push(h.ok_or_else(|| {
                Error::InvalidConfig(format!("no hidden state for anchor `{}`", anchor.id))
            })?);
        }
        entries.push(StoreEntry {
            key,
            label: anchor.label.clone(),
            anchor_id: anchor.id.clone(),
        });
    }
    let metadata = StoreMetadata {
        model_id: backend.info().model_id.clone(),
        task: task.name.clone(),
        demo_ids_hash: demo_ids_hash(&split.demos),
        seed: opts.seed,
        created_at_unix: None,
        demos: split.demos.clone(),
    };
    AnchorStore::new(entries, hidden, metadata)
}

/// Replace each class's anchors with one anchor at their mean distribution.
pub fn centroid_normalize(store: &AnchorStore) -> Result<AnchorStore> {
    let v = store.vocab_size();
    let mut entries = Vec::new();
    let mut hidden = store.hidden_keys().map(|_| Vec::new());
    for class in store.classes() {
        let members: Vec<usize> = (0..store.len())
            .filter(|&i| store.entries[i].label == class)
            .collect();
        let mut acc = vec![0.0f64; v];
        for &i in &members {
            for (a, &p) in acc.iter_mut().zip(store.entries[i].key.probs()) {
                *a += f64::from(p);
            }
        }
        let n = members.len() as f64;
        let mass: f64 = acc.iter().sum::<f64>() / n;
        let key = if members.len() == 1 && (mass - 1.0).abs() <= 1e-6 {
            store.entries[members[0]].key.clone()
        } else {
            VocabDistribution::from_weights(&acc)?
        };
        if let (Some(out), Some(src)) = (hidden.as_mut(), store.hidden_keys()) {
            let width = src[0].len();
            let mut h = vec![0.0f64; width];
            for &i in &members {
                for (a, &x) in h.iter_mut().zip(src[i].values()) {
                    *a += f64::from(x);
                }
            }
            out.push(HiddenRepr::new(h.iter().map(|x| (x / n) as f32).collect())?);
        }
        entries.push(StoreEntry {
            key,
            anchor_id: format!("centroid:{class}"),
            label: class,
        });
    }
    AnchorStore::new(entries, hidden, store.metadata.clone())
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    name: String,
    entries: usize,
    vocab_size: usize,
    hidden_size: Option<usize>,
    keys_file: String,
    labels_file: String,
    hidden_file: Option<String>,
    keys_crc32: u32,
    hidden_crc32: Option<u32>,
    metadata: StoreMetadata,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    anchor_id: String,
    label: String,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

/// `dir/name` for a base path; accepts `dir/name.manifest.json` too.
fn split_base(base: &Path) -> Result<(PathBuf, String)> {
    let file = base
        .file_name()
        .and_then(|f| f.to_str())
        .ok_or_else(|| Error::InvalidConfig(format!("bad store path {}", base.display())))?;
    let name = file.strip_suffix(".manifest.json").unwrap_or(file).to_string();
    let dir = base.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((dir, name))
}

fn write_rows<'a>(path: &Path, rows: impl Iterator<Item = &'a [f32]>) -> Result<u32> {
    let mut out = BufWriter::with_capacity(1 << 20, File::create(path)?);
    let mut crc = crc32fast::Hasher::new();
    let mut buf = Vec::new();
    for row in rows {
        buf.clear();
        buf.extend(row.iter().flat_map(|x| x.to_le_bytes()));
        crc.update(&buf);
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(crc.finalize())
}

fn read_rows(path: &Path, rows: usize, width: usize, crc: u32) -> Result<Vec<Vec<f32>>> {
    let bytes = fs::read(path)
        .map_err(|e| Error::CorruptStore(format!("{}: {e}", path.display())))?;
    let expected = rows * width * 4;
    if bytes.len() != expected {
        return Err(Error::CorruptStore(format!(
            "{} has {} bytes, manifest implies {expected}",
            path.display(),
            bytes.len()
        )));
    }
    if crc32fast::hash(&bytes) != crc {
        return Err(Error::CorruptStore(format!("{}: checksum mismatch", path.display())));
    }
    if width == 0 {
        return Ok(vec![Vec::new(); rows]);
    }
    Ok(bytes
        .chunks_exact(width * 4)
        .map(|row| {
            row.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()
        })
        .collect())
}

/// Write the store next to `base` (e.g. `stores/sst2` → `stores/sst2.manifest.json`).
pub fn save_store(store: &AnchorStore, base: impl AsRef<Path>) -> Result<PathBuf> {
    let (dir, name) = split_base(base.as_ref())?;
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(&dir)?;
    }
    let keys_file = format!("{name}.keys.f32");
    let labels_file = format!("{name}.labels.json");
    let keys_crc32 = write_rows(&dir.join(&keys_file), store.entries.iter().map(|e| e.key.probs()))?;
    let (hidden_file, hidden_crc32, hidden_size) = match store.hidden_keys() {
        Some(h) => {
            let file = format!("{name}.hidden.f32");
            let crc = write_rows(&dir.join(&file), h.iter().map(HiddenRepr::values))?;
            (Some(file), Some(crc), Some(h[0].len()))
        }
        None => (None, None, None),
    };
    let labels: Vec<LabelRow> = store
        .entries
        .iter()
        .map(|e| LabelRow {
            anchor_id: e.anchor_id.clone(),
            label: e.label.clone(),
        })
        .collect();
    fs::write(dir.join(&labels_file), serde_json::to_vec(&labels)?)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        name: name.clone(),
        entries: store.len(),
        vocab_size: store.vocab_size,
        hidden_size,
        keys_file,
        labels_file,
        hidden_file,
        keys_crc32,
        hidden_crc32,
        metadata: store.metadata.clone(),
    };
    let manifest_path = dir.join(format!("{name}.manifest.json"));
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest_path)
}

/// Load and integrity-check a store written by [`save_store`].
pub fn load_store(base: impl AsRef<Path>) -> Result<AnchorStore> {
    let (dir, name) = split_base(base.as_ref())?;
    let manifest_path = dir.join(format!("{name}.manifest.json"));
    let raw = fs::read(&manifest_path)?;
    let probe: VersionProbe = serde_json::from_slice(&raw)
        .map_err(|e| Error::CorruptStore(format!("manifest: {e}")))?;
    if probe.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: probe.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_slice(&raw)
        .map_err(|e| Error::CorruptStore(format!("manifest: {e}")))?;
    if manifest.entries == 0 || manifest.vocab_size == 0 {
        return Err(Error::CorruptStore("manifest declares an empty store".into()));
    }

    let keys = read_rows(
        &dir.join(&manifest.keys_file),
        manifest.entries,
        manifest.vocab_size,
        manifest.keys_crc32,
    )?;
    let labels: Vec<LabelRow> = serde_json::from_slice(
        &fs::read(dir.join(&manifest.labels_file))
            .map_err(|e| Error::CorruptStore(format!("labels: {e}")))?,
    )
    .map_err(|e| Error::CorruptStore(format!("labels: {e}")))?;
    if labels.len() != manifest.entries {
        return Err(Error::CorruptStore(format!(
            "{} labels for {} entries",
            labels.len(),
            manifest.entries
        )));
    }
    let hidden = match (&manifest.hidden_file, manifest.hidden_size, manifest.hidden_crc32) {
        (Some(file), Some(width), Some(crc)) => Some(
            read_rows(&dir.join(file), manifest.entries, width, crc)?
                .into_iter()
                .map(|h| HiddenRepr::new(h).map_err(|e| Error::CorruptStore(e.to_string())))
                .collect::<Result<Vec<_>>>()?,
        ),
        (None, None, None) => None,
        _ => return Err(Error::CorruptStore("incomplete hidden-state description".into())),
    };
    let entries = keys
        .into_iter()
        .zip(labels)
        .map(|(k, l)| {
            Ok(StoreEntry {
                key: VocabDistribution::new(k).map_err(|e| {
                    Error::CorruptStore(format!("key for `{}`: {e}", l.anchor_id))
                })?,
                label: l.label,
                anchor_id: l.anchor_id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    AnchorStore::new(entries, hidden, manifest.metadata)
}
