//! On-disk dump format and the in-memory types the analyses work on.
//!
//! A dump is one directory per run:
//!
//! ```text
//! manifest.json                 RunManifest
//! layer_{l}.f32                 n × d, l = 0 (embedding output) ..= L
//! unembed.f32                   V' × d, optional
//! vocab.json                    V' token strings, optional
//! attn_manifest.json            optional, see AttentionDump
//! attn_{i}.f32                  L × N_h × s × s per probe prompt
//! head_out_manifest.json        optional, see HeadOutputDump
//! head_out_{l}_{h}.f32          d floats per head
//! ```
//!
//! Matrices are raw little-endian `f32`, row-major, without a header. Values
//! stay `f32` in memory so that a round trip is byte-identical; analyses
//! convert to `f64` when they build a [`LabeledMatrix`] or
//! [`UnembeddingView`].

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const UNEMBED_FILE: &str = "unembed.f32";
pub const VOCAB_FILE: &str = "vocab.json";
pub const ATTN_MANIFEST_FILE: &str = "attn_manifest.json";
pub const HEAD_OUT_MANIFEST_FILE: &str = "head_out_manifest.json";

/// Attention rows may sum to slightly more than one after `f32` rounding.
const ATTN_ROW_SUM_SLACK: f32 = 1e-3;

pub fn layer_file(l: usize) -> String {
    format!("layer_{l}.f32")
}

pub fn attn_file(i: usize) -> String {
    format!("attn_{i}.f32")
}

pub fn head_out_file(head: HeadId) -> String {
    format!("head_out_{}_{}.f32", head.0, head.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ZeroShot,
    Icl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoSelection {
    Random,
    Knn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelStyle {
    Natural,
    Symbolic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Setting {
    pub mode: Mode,
    pub num_demos: usize,
    pub demo_selection: DemoSelection,
    pub label_style: LabelStyle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnembeddingScope {
    Full,
    Subset,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub schema_version: u32,
    pub model_name: String,
    pub dataset_name: String,
    pub setting: Setting,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_queries: usize,
    pub labels: Vec<String>,
    pub query_label_ids: Vec<usize>,
    pub label_token_ids: Vec<usize>,
    pub vocab_size: usize,
    pub unembedding_scope: UnembeddingScope,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset_token_ids: Option<Vec<usize>>,
    /// Whether hidden states were taken after the final layer norm. Recorded
    /// by the extractor; never interpreted here.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_norm: Option<bool>,
}

impl RunManifest {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::manifest(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, found {}", self.schema_version),
            ));
        }
        if self.hidden_dim == 0 {
            return Err(Error::manifest("hidden_dim", "must be at least 1"));
        }
        if self.num_queries < 2 {
            return Err(Error::manifest("num_queries", "must be at least 2"));
        }
        if self.setting.mode == Mode::ZeroShot && self.setting.num_demos != 0 {
            return Err(Error::manifest(
                "setting.num_demos",
                "zero_shot runs have no demonstrations",
            ));
        }
        if self.labels.is_empty() {
            return Err(Error::manifest("labels", "must not be empty"));
        }
        if let Some(dup) = first_duplicate(&self.labels) {
            return Err(Error::manifest(
                "labels",
                format!("duplicate label {dup:?}"),
            ));
        }
        if self.query_label_ids.len() != self.num_queries {
            return Err(Error::manifest(
                "query_label_ids",
                format!(
                    "expected {} entries, found {}",
                    self.num_queries,
                    self.query_label_ids.len()
                ),
            ));
        }
        if let Some((i, &y)) = self
            .query_label_ids
            .iter()
            .enumerate()
            .find(|(_, &y)| y >= self.labels.len())
        {
            return Err(Error::manifest(
                format!("query_label_ids[{i}]"),
                format!("label id {y} out of range for {} labels", self.labels.len()),
            ));
        }
        if self.label_token_ids.len() != self.labels.len() {
            return Err(Error::manifest(
                "label_token_ids",
                format!(
                    "expected one token per label ({}), found {}",
                    self.labels.len(),
                    self.label_token_ids.len()
                ),
            ));
        }
        if let Some(dup) = first_duplicate(&self.label_token_ids) {
            return Err(Error::manifest(
                "label_token_ids",
                format!("duplicate label token id {dup}"),
            ));
        }
        if let Some(&t) = self.label_token_ids.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::manifest(
                "label_token_ids",
                format!("token id {t} outside vocab of size {}", self.vocab_size),
            ));
        }
        match (self.unembedding_scope, &self.subset_token_ids) {
            (UnembeddingScope::Full, Some(_)) => {
                return Err(Error::manifest(
                    "subset_token_ids",
                    "only allowed when unembedding_scope is subset",
                ));
            }
            (UnembeddingScope::Subset, None) => {
                return Err(Error::manifest(
                    "subset_token_ids",
                    "required when unembedding_scope is subset",
                ));
            }
            (UnembeddingScope::Subset, Some(ids)) => {
                if ids.is_empty() {
                    return Err(Error::manifest("subset_token_ids", "must not be empty"));
                }
                if let Some(dup) = first_duplicate(ids) {
                    return Err(Error::manifest(
                        "subset_token_ids",
                        format!("duplicate token id {dup}"),
                    ));
                }
                if let Some(&t) = ids.iter().find(|&&t| t >= self.vocab_size) {
                    return Err(Error::manifest(
                        "subset_token_ids",
                        format!("token id {t} outside vocab of size {}", self.vocab_size),
                    ));
                }
                if let Some(&t) = self.label_token_ids.iter().find(|t| !ids.contains(t)) {
                    return Err(Error::manifest(
                        "subset_token_ids",
                        format!("label token id {t} missing from subset"),
                    ));
                }
            }
            (UnembeddingScope::Full, None) => {}
        }
        Ok(())
    }

    /// Number of rows stored in `unembed.f32`.
    pub fn unembed_rows(&self) -> usize {
        match &self.subset_token_ids {
            Some(ids) => ids.len(),
            None => self.vocab_size,
        }
    }

    /// Vocabulary id of row `r` of the unembedding file.
    pub fn token_id_of_row(&self, r: usize) -> usize {
        match &self.subset_token_ids {
            Some(ids) => ids[r],
            None => r,
        }
    }
}

fn first_duplicate<T: Ord + Clone>(items: &[T]) -> Option<T> {
    let mut seen = BTreeSet::new();
    items.iter().find(|x| !seen.insert((*x).clone())).cloned()
}

/// Unembedding rows as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Unembedding {
    /// `V' × d`, row-major.
    pub rows: Vec<f32>,
    /// One string per row when `vocab.json` is present.
    pub token_strings: Option<Vec<String>>,
}

/// A (layer, head) pair; serializes as the JSON array `[layer, head]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId(pub usize, pub usize);

impl HeadId {
    pub fn layer(self) -> usize {
        self.0
    }

    pub fn head(self) -> usize {
        self.1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionPromptMeta {
    pub length: usize,
    pub label_positions: Vec<usize>,
    pub final_position: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionManifest {
    pub num_layers: usize,
    pub num_heads: usize,
    pub prompts: Vec<AttentionPromptMeta>,
}

/// Attention weights for one probe prompt.
///
/// `weights` is laid out `[layer][head][query][key]`: entry
/// `(l, h, q, k)` is how much position `q` attends to position `k`. Positions
/// are 0-based.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPrompt {
    pub meta: AttentionPromptMeta,
    pub weights: Vec<f32>,
}

impl AttentionPrompt {
    pub fn at(&self, num_heads: usize, l: usize, h: usize, q: usize, k: usize) -> f32 {
        let s = self.meta.length;
        self.weights[((l * num_heads + h) * s + q) * s + k]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDump {
    pub num_layers: usize,
    pub num_heads: usize,
    pub prompts: Vec<AttentionPrompt>,
}

impl AttentionDump {
    pub fn manifest(&self) -> AttentionManifest {
        AttentionManifest {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            prompts: self.prompts.iter().map(|p| p.meta.clone()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 {
            return Err(Error::manifest(
                "num_layers/num_heads",
                "attention dumps need at least one layer and one head",
            ));
        }
        if self.prompts.is_empty() {
            return Err(Error::manifest(
                "prompts",
                "at least one prompt is required",
            ));
        }
        for (i, p) in self.prompts.iter().enumerate() {
            let m = &p.meta;
            let field = |f: &str| format!("prompts[{i}].{f}");
            if m.length == 0 {
                return Err(Error::manifest(field("length"), "must be positive"));
            }
            if m.final_position >= m.length {
                return Err(Error::manifest(
                    field("final_position"),
                    format!("{} is not below length {}", m.final_position, m.length),
                ));
            }
            if let Some(&bad) = m.label_positions.iter().find(|&&k| k >= m.final_position) {
                return Err(Error::manifest(
                    field("label_positions"),
                    format!(
                        "position {bad} is not before final position {}",
                        m.final_position
                    ),
                ));
            }
            let s = m.length;
            let expected = self.num_layers * self.num_heads * s * s;
            if p.weights.len() != expected {
                return Err(Error::SizeMismatch {
                    file: attn_file(i),
                    expected: 4 * expected as u64,
                    actual: 4 * p.weights.len() as u64,
                });
            }
            check_finite(&attn_file(i), &p.weights)?;
            if let Some(j) = p.weights.iter().position(|&w| w < 0.0) {
                return Err(Error::invalid(format!(
                    "{}: negative attention weight at byte offset {}",
                    attn_file(i),
                    4 * j
                )));
            }
            for (r, row) in p.weights.chunks_exact(s).enumerate() {
                let sum: f32 = row.iter().sum();
                if sum > 1.0 + ATTN_ROW_SUM_SLACK {
                    return Err(Error::invalid(format!(
                        "{}: attention row at byte offset {} sums to {sum}",
                        attn_file(i),
                        4 * r * s
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadOutputManifest {
    pub hidden_dim: usize,
    pub prompt_count: usize,
    pub heads: Vec<HeadId>,
}

/// Mean per-head outputs at the final token, averaged over probe prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputDump {
    pub hidden_dim: usize,
    pub prompt_count: usize,
    pub outputs: BTreeMap<HeadId, Vec<f32>>,
}

impl HeadOutputDump {
    pub fn validate(&self) -> Result<()> {
        if self.prompt_count == 0 {
            return Err(Error::manifest("prompt_count", "must be at least 1"));
        }
        if self.hidden_dim == 0 {
            return Err(Error::manifest("hidden_dim", "must be at least 1"));
        }
        for (&head, v) in &self.outputs {
            let file = head_out_file(head);
            if v.len() != self.hidden_dim {
                return Err(Error::SizeMismatch {
                    file,
                    expected: 4 * self.hidden_dim as u64,
                    actual: 4 * v.len() as u64,
                });
            }
            check_finite(&file, v)?;
        }
        Ok(())
    }

    pub fn manifest(&self) -> HeadOutputManifest {
        HeadOutputManifest {
            hidden_dim: self.hidden_dim,
            prompt_count: self.prompt_count,
            heads: self.outputs.keys().copied().collect(),
        }
    }
}

/// One run: the manifest, `L + 1` layer matrices and optional extras.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStateDump {
    pub manifest: RunManifest,
    /// `layers[l]` is `n × d`, row-major.
    pub layers: Vec<Vec<f32>>,
    pub unembedding: Option<Unembedding>,
    pub attention: Option<AttentionDump>,
    pub head_outputs: Option<HeadOutputDump>,
}

impl HiddenStateDump {
    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        m.validate()?;
        if self.layers.len() != m.num_layers + 1 {
            return Err(Error::manifest(
                "num_layers",
                format!(
                    "declares {} layers ({} files) but {} matrices are present",
                    m.num_layers,
                    m.num_layers + 1,
                    self.layers.len()
                ),
            ));
        }
        let nd = m.num_queries * m.hidden_dim;
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.len() != nd {
                return Err(Error::SizeMismatch {
                    file: layer_file(l),
                    expected: 4 * nd as u64,
                    actual: 4 * layer.len() as u64,
                });
            }
            check_finite(&layer_file(l), layer)?;
        }
        if let Some(u) = &self.unembedding {
            let expected = m.unembed_rows() * m.hidden_dim;
            if u.rows.len() != expected {
                return Err(Error::SizeMismatch {
                    file: UNEMBED_FILE.into(),
                    expected: 4 * expected as u64,
                    actual: 4 * u.rows.len() as u64,
                });
            }
            check_finite(UNEMBED_FILE, &u.rows)?;
            if let Some(strings) = &u.token_strings {
                if strings.len() != m.unembed_rows() {
                    return Err(Error::manifest(
                        VOCAB_FILE,
                        format!(
                            "expected {} token strings, found {}",
                            m.unembed_rows(),
                            strings.len()
                        ),
                    ));
                }
            }
        }
        if let Some(a) = &self.attention {
            a.validate()?;
        }
        if let Some(h) = &self.head_outputs {
            h.validate()?;
            if h.hidden_dim != m.hidden_dim {
                return Err(Error::manifest(
                    "head_out_manifest.hidden_dim",
                    format!(
                        "{} differs from the run's hidden_dim {}",
                        h.hidden_dim, m.hidden_dim
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.manifest.num_layers
    }

    /// Layer `l` in `f64` with the manifest's query labels.
    pub fn layer_matrix(&self, l: usize) -> Result<LabeledMatrix> {
        let m = &self.manifest;
        let data = self.layers.get(l).ok_or_else(|| {
            Error::invalid(format!("layer {l} out of range 0..={}", m.num_layers))
        })?;
        let rows = DMatrix::from_row_iterator(
            m.num_queries,
            m.hidden_dim,
            data.iter().map(|&x| f64::from(x)),
        );
        LabeledMatrix::new(rows, m.query_label_ids.clone(), l)
    }

    /// The unembedding view, or `None` when the dump has no `unembed.f32`.
    pub fn unembedding_view(&self) -> Option<UnembeddingView> {
        let u = self.unembedding.as_ref()?;
        let m = &self.manifest;
        let v = m.unembed_rows();
        let matrix =
            DMatrix::from_row_iterator(v, m.hidden_dim, u.rows.iter().map(|&x| f64::from(x)));
        let token_ids: Vec<usize> = (0..v).map(|r| m.token_id_of_row(r)).collect();
        let token_strings = match &u.token_strings {
            Some(s) => s.clone(),
            None => token_ids.iter().map(|t| format!("<{t}>")).collect(),
        };
        let row_of: BTreeMap<usize, usize> =
            token_ids.iter().enumerate().map(|(r, &t)| (t, r)).collect();
        let label_rows = m.label_token_ids.iter().map(|t| row_of[t]).collect();
        Some(
            UnembeddingView::new(
                matrix,
                token_ids,
                token_strings,
                label_rows,
                m.unembedding_scope,
            )
            .expect("validated manifest yields a valid unembedding view"),
        )
    }
}

fn check_finite(file: &str, values: &[f32]) -> Result<()> {
    match values.iter().position(|x| !x.is_finite()) {
        Some(j) => Err(Error::NonFinite {
            file: file.to_string(),
            offset: 4 * j as u64,
        }),
        None => Ok(()),
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile {
            path: path.to_path_buf(),
        },
        _ => Error::io(path, e),
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads exactly `count` little-endian `f32` values, rejecting NaN and ±Inf.
pub fn read_f32_file(path: &Path, count: usize) -> Result<Vec<f32>> {
    let bytes = read_bytes(path)?;
    let name = display_name(path);
    let expected = 4 * count as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            file: name,
            expected,
            actual: bytes.len() as u64,
        });
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    check_finite(&name, &values)?;
    Ok(values)
}

pub fn write_f32_file(path: &Path, values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(4 * values.len());
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn display_name(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Loads and fully validates a dump directory.
pub fn load_dump(dir: impl AsRef<Path>) -> Result<HiddenStateDump> {
    let dir = dir.as_ref();
    let manifest: RunManifest = read_json(&dir.join(MANIFEST_FILE))?;
    manifest.validate()?;
    let nd = manifest.num_queries * manifest.hidden_dim;
    let layers = (0..=manifest.num_layers)
        .map(|l| read_f32_file(&dir.join(layer_file(l)), nd))
        .collect::<Result<Vec<_>>>()?;

    let unembed_path = dir.join(UNEMBED_FILE);
    let vocab_path = dir.join(VOCAB_FILE);
    let unembedding = if unembed_path.exists() {
        let rows = read_f32_file(&unembed_path, manifest.unembed_rows() * manifest.hidden_dim)?;
        let token_strings = if vocab_path.exists() {
            Some(read_json::<Vec<String>>(&vocab_path)?)
        } else {
            None
        };
        Some(Unembedding {
            rows,
            token_strings,
        })
    } else if vocab_path.exists() {
        return Err(Error::MissingFile { path: unembed_path });
    } else {
        None
    };

    let attention = if dir.join(ATTN_MANIFEST_FILE).exists() {
        Some(load_attention(dir)?)
    } else {
        None
    };
    let head_outputs = if dir.join(HEAD_OUT_MANIFEST_FILE).exists() {
        Some(load_head_outputs(dir)?)
    } else {
        None
    };

    let dump = HiddenStateDump {
        manifest,
        layers,
        unembedding,
        attention,
        head_outputs,
    };
    dump.validate()?;
    Ok(dump)
}

/// Validates the whole dump, then writes it. Nothing is written when
/// validation fails.
pub fn write_dump(dump: &HiddenStateDump, dir: impl AsRef<Path>) -> Result<()> {
    dump.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join(MANIFEST_FILE), &dump.manifest)?;
    for (l, layer) in dump.layers.iter().enumerate() {
        write_f32_file(&dir.join(layer_file(l)), layer)?;
    }
    if let Some(u) = &dump.unembedding {
        write_f32_file(&dir.join(UNEMBED_FILE), &u.rows)?;
        if let Some(strings) = &u.token_strings {
            write_json(&dir.join(VOCAB_FILE), strings)?;
        }
    }
    if let Some(a) = &dump.attention {
        write_attention_files(a, dir)?;
    }
    if let Some(h) = &dump.head_outputs {
        write_head_output_files(h, dir)?;
    }
    Ok(())
}

/// Loads `attn_manifest.json` and its `attn_{i}.f32` files from `dir`.
pub fn load_attention(dir: impl AsRef<Path>) -> Result<AttentionDump> {
    let dir = dir.as_ref();
    let manifest: AttentionManifest = read_json(&dir.join(ATTN_MANIFEST_FILE))?;
    let prompts = manifest
        .prompts
        .iter()
        .enumerate()
        .map(|(i, meta)| {
            let s = meta.length;
            let count = manifest.num_layers * manifest.num_heads * s * s;
            Ok(AttentionPrompt {
                meta: meta.clone(),
                weights: read_f32_file(&dir.join(attn_file(i)), count)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let dump = AttentionDump {
        num_layers: manifest.num_layers,
        num_heads: manifest.num_heads,
        prompts,
    };
    dump.validate()?;
    Ok(dump)
}

pub fn write_attention(dump: &AttentionDump, dir: impl AsRef<Path>) -> Result<()> {
    dump.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_attention_files(dump, dir)
}

fn write_attention_files(dump: &AttentionDump, dir: &Path) -> Result<()> {
    write_json(&dir.join(ATTN_MANIFEST_FILE), &dump.manifest())?;
    for (i, p) in dump.prompts.iter().enumerate() {
        write_f32_file(&dir.join(attn_file(i)), &p.weights)?;
    }
    Ok(())
}

/// Loads `head_out_manifest.json` and the per-head vectors from `dir`.
pub fn load_head_outputs(dir: impl AsRef<Path>) -> Result<HeadOutputDump> {
    let dir = dir.as_ref();
    let manifest: HeadOutputManifest = read_json(&dir.join(HEAD_OUT_MANIFEST_FILE))?;
    if let Some(dup) = first_duplicate(&manifest.heads) {
        return Err(Error::manifest(
            "heads",
            format!("head [{}, {}] listed twice", dup.0, dup.1),
        ));
    }
    let mut outputs = BTreeMap::new();
    for &head in &manifest.heads {
        let v = read_f32_file(&dir.join(head_out_file(head)), manifest.hidden_dim)?;
        outputs.insert(head, v);
    }
    let dump = HeadOutputDump {
        hidden_dim: manifest.hidden_dim,
        prompt_count: manifest.prompt_count,
        outputs,
    };
    dump.validate()?;
    Ok(dump)
}

pub fn write_head_outputs(dump: &HeadOutputDump, dir: impl AsRef<Path>) -> Result<()> {
    dump.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_head_output_files(dump, dir)
}

fn write_head_output_files(dump: &HeadOutputDump, dir: &Path) -> Result<()> {
    write_json(&dir.join(HEAD_OUT_MANIFEST_FILE), &dump.manifest())?;
    for (&head, v) in &dump.outputs {
        write_f32_file(&dir.join(head_out_file(head)), v)?;
    }
    Ok(())
}

/// Reads a JSON array of `[layer, head]` pairs.
pub fn read_head_list(path: impl AsRef<Path>) -> Result<Vec<HeadId>> {
    read_json(path.as_ref())
}

pub fn write_head_list(path: impl AsRef<Path>, heads: &[HeadId]) -> Result<()> {
    write_json(path.as_ref(), &heads)
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_json(path, value)
}

pub fn read_json_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    read_json(path)
}

/// One layer's hidden states with a label id per row, in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix {
    pub rows: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub layer_index: usize,
}

impl LabeledMatrix {
    pub fn new(rows: DMatrix<f64>, labels: Vec<usize>, layer_index: usize) -> Result<Self> {
        if rows.nrows() < 2 {
            return Err(Error::invalid(format!(
                "a labeled matrix needs at least 2 rows, found {}",
                rows.nrows()
            )));
        }
        if rows.ncols() == 0 {
            return Err(Error::invalid("a labeled matrix needs at least 1 column"));
        }
        if labels.len() != rows.nrows() {
            return Err(Error::invalid(format!(
                "{} labels for {} rows",
                labels.len(),
                rows.nrows()
            )));
        }
        if let Some(j) = rows.iter().position(|x| !x.is_finite()) {
            let (r, c) = (j % rows.nrows(), j / rows.nrows());
            return Err(Error::invalid(format!(
                "non-finite entry at row {r}, column {c}"
            )));
        }
        Ok(Self {
            rows,
            labels,
            layer_index,
        })
    }

    /// Builds from row vectors. Convenient for small fixtures.
    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<usize>, layer_index: usize) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("rows have different lengths"));
        }
        let m = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
        Self::new(m, labels, layer_index)
    }

    pub fn n(&self) -> usize {
        self.rows.nrows()
    }

    pub fn d(&self) -> usize {
        self.rows.ncols()
    }

    /// Distinct label ids, ascending.
    pub fn label_set(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.labels.iter().copied().collect();
        set.into_iter().collect()
    }

    pub fn count_of(&self, label: usize) -> usize {
        self.labels.iter().filter(|&&y| y == label).count()
    }

    /// Row indices carrying `label`, ascending.
    pub fn indices_of(&self, label: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.labels[i] == label).collect()
    }

    /// The two labels of a binary matrix, lower id first.
    pub fn binary_labels(&self) -> Result<(usize, usize)> {
        match self.label_set()[..] {
            [a, b] => Ok((a, b)),
            ref other => Err(Error::invalid(format!(
                "expected exactly two labels, found {}",
                other.len()
            ))),
        }
    }

    /// Rows labeled `a` or `b`, in their original order.
    pub fn slice_pair(&self, a: usize, b: usize) -> Result<LabeledMatrix> {
        if a == b {
            return Err(Error::invalid(format!(
                "pair needs two distinct labels, got ({a}, {a})"
            )));
        }
        for y in [a, b] {
            if self.count_of(y) == 0 {
                return Err(Error::LabelAbsent(y));
            }
        }
        let keep: Vec<usize> = (0..self.n())
            .filter(|&i| self.labels[i] == a || self.labels[i] == b)
            .collect();
        Ok(self.select_rows(&keep))
    }

    pub(crate) fn select_rows(&self, keep: &[usize]) -> LabeledMatrix {
        LabeledMatrix {
            rows: self.rows.select_rows(keep),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
            layer_index: self.layer_index,
        }
    }

    pub fn with_rows(&self, rows: DMatrix<f64>) -> Result<LabeledMatrix> {
        LabeledMatrix::new(rows, self.labels.clone(), self.layer_index)
    }
}

/// Unembedding rows in `f64` with their vocabulary ids and strings.
#[derive(Debug, Clone, PartialEq)]
pub struct UnembeddingView {
    /// `V' × d`.
    pub matrix: DMatrix<f64>,
    pub token_ids: Vec<usize>,
    pub token_strings: Vec<String>,
    /// `label_rows[y]` is the row holding label `y`'s token.
    pub label_rows: Vec<usize>,
    pub scope: UnembeddingScope,
}

impl UnembeddingView {
    pub fn new(
        matrix: DMatrix<f64>,
        token_ids: Vec<usize>,
        token_strings: Vec<String>,
        label_rows: Vec<usize>,
        scope: UnembeddingScope,
    ) -> Result<Self> {
        let v = matrix.nrows();
        if token_ids.len() != v || token_strings.len() != v {
            return Err(Error::invalid(format!(
                "{v} unembedding rows but {} token ids and {} strings",
                token_ids.len(),
                token_strings.len()
            )));
        }
        if let Some(dup) = first_duplicate(&token_ids) {
            return Err(Error::invalid(format!(
                "duplicate token id {dup} in unembedding"
            )));
        }
        if let Some(&r) = label_rows.iter().find(|&&r| r >= v) {
            return Err(Error::invalid(format!(
                "label row {r} out of range for {v} rows"
            )));
        }
        if let Some(dup) = first_duplicate(&label_rows) {
            return Err(Error::invalid(format!(
                "two labels share unembedding row {dup}"
            )));
        }
        if matrix.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("non-finite unembedding entry"));
        }
        Ok(Self {
            matrix,
            token_ids,
            token_strings,
            label_rows,
            scope,
        })
    }

    /// A full-scope view over the given rows with ids `0..V` and names
    /// `t0, t1, ...`. Convenient for small fixtures.
    pub fn from_rows(rows: &[Vec<f64>], label_rows: Vec<usize>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("unembedding rows have different lengths"));
        }
        let matrix = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
        let ids: Vec<usize> = (0..rows.len()).collect();
        let names = ids.iter().map(|i| format!("t{i}")).collect();
        Self::new(matrix, ids, names, label_rows, UnembeddingScope::Full)
    }

    pub fn vocab_len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn row(&self, r: usize) -> Vec<f64> {
        crate::linalg::row(&self.matrix, r)
    }

    pub fn label_row(&self, label: usize) -> Result<usize> {
        self.label_rows
            .get(label)
            .copied()
            .ok_or(Error::LabelAbsent(label))
    }

    /// Rotates every row by `q` (`E ← E Qᵀ`), matching `h ← Q h`.
    pub fn transformed(&self, q: &DMatrix<f64>) -> UnembeddingView {
        UnembeddingView {
            matrix: &self.matrix * q.transpose(),
            ..self.clone()
        }
    }
}

/// True when `dir` looks like a dump rather than an analysis output.
pub fn is_dump_dir(dir: &Path) -> bool {
    dir.join(MANIFEST_FILE).exists()
}
