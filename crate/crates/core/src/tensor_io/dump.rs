//! Attention dumps: one NPY tensor per image partition plus a `manifest.json`
//! describing the partition geometry.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use super::npy::{self, NpyError, Tensor3};
use crate::geometry::{GeometryError, Grid, PartitionLayout};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DUMP_VERSION: u64 = 1;

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("{}: manifest missing", .0.display())]
    ManifestMissing(PathBuf),
    #[error("{field}: {reason}")]
    ManifestInvalid { field: String, reason: String },
    #[error("partition {id}: {source}")]
    Partition {
        id: usize,
        #[source]
        source: NpyError,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl DumpError {
    fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::ManifestInvalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for failures caused by the filesystem rather than content.
    pub fn is_io(&self) -> bool {
        match self {
            DumpError::Io(_) | DumpError::ManifestMissing(_) => true,
            DumpError::Partition { source, .. } => matches!(source, NpyError::Io(_)),
            DumpError::ManifestInvalid { .. } => false,
        }
    }
}

impl From<GeometryError> for DumpError {
    fn from(e: GeometryError) -> Self {
        DumpError::invalid("grid", e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Full,
    Sub,
}

impl Role {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(Role::Full),
            "sub" => Some(Role::Sub),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub id: usize,
    pub role: Role,
    pub tensor: Tensor3,
}

/// Everything about a dump except the attention values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DumpMeta {
    pub image_size: (usize, usize),
    /// `None` when the dump holds only the full image.
    pub grid: Option<Grid>,
    pub patch_grid: Grid,
    pub num_heads: usize,
    /// Model layer index captured in each tensor slot, strictly increasing.
    pub layers_captured: Vec<usize>,
}

impl DumpMeta {
    pub fn k(&self) -> usize {
        self.grid.map_or(0, Grid::area)
    }

    pub fn tokens_per_partition(&self) -> usize {
        self.patch_grid.area()
    }

    pub fn tensor_shape(&self) -> [usize; 3] {
        [
            self.layers_captured.len(),
            self.num_heads,
            self.tokens_per_partition(),
        ]
    }

    fn validate(&self) -> Result<(), DumpError> {
        let (w, h) = self.image_size;
        if w == 0 {
            return Err(DumpError::invalid("image_width", "must be positive"));
        }
        if h == 0 {
            return Err(DumpError::invalid("image_height", "must be positive"));
        }
        if let Some(g) = self.grid {
            if g.w == 0 || g.h == 0 {
                return Err(DumpError::invalid(
                    "grid",
                    format!("grid ({}, {}) is empty", g.w, g.h),
                ));
            }
        }
        if self.patch_grid.w == 0 || self.patch_grid.h == 0 {
            return Err(DumpError::invalid("patch_grid", "patch grid is empty"));
        }
        if self.num_heads == 0 {
            return Err(DumpError::invalid("num_heads", "must be at least 1"));
        }
        if self.layers_captured.is_empty() {
            return Err(DumpError::invalid("layers_captured", "no layers listed"));
        }
        if self.layers_captured.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DumpError::invalid(
                "layers_captured",
                "must be strictly increasing",
            ));
        }
        Ok(())
    }
}

/// Attention inputs for one image: partition 0 is the full image, partitions
/// `1..=k` are the sub-images in row-major grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDump {
    meta: DumpMeta,
    partitions: Vec<Partition>,
}

impl AttentionDump {
    /// Builds a dump from in-memory tensors, `tensors[i]` belonging to
    /// partition `i`. Applies every check the on-disk loader applies.
    pub fn new(meta: DumpMeta, tensors: Vec<Tensor3>) -> Result<Self, DumpError> {
        meta.validate()?;
        let expected = meta.k() + 1;
        if tensors.len() != expected {
            return Err(DumpError::invalid(
                "partitions",
                format!("expected {expected} partitions, got {}", tensors.len()),
            ));
        }
        let shape = meta.tensor_shape();
        let mut partitions = Vec::with_capacity(tensors.len());
        for (id, tensor) in tensors.into_iter().enumerate() {
            if tensor.shape() != shape {
                return Err(DumpError::invalid(
                    format!("partitions[{id}]"),
                    format!(
                        "tensor shape {:?} does not match declared {:?}",
                        tensor.shape(),
                        shape
                    ),
                ));
            }
            tensor
                .validate_attention()
                .map_err(|source| DumpError::Partition { id, source })?;
            let role = if id == 0 { Role::Full } else { Role::Sub };
            partitions.push(Partition { id, role, tensor });
        }
        Ok(Self { meta, partitions })
    }

    pub fn meta(&self) -> &DumpMeta {
        &self.meta
    }

    pub fn partitions(&self) -> &[Partition] {
        &self.partitions
    }

    pub fn partition(&self, id: usize) -> Option<&Partition> {
        self.partitions.get(id)
    }

    pub fn k(&self) -> usize {
        self.meta.k()
    }

    pub fn num_heads(&self) -> usize {
        self.meta.num_heads
    }

    pub fn tokens_per_partition(&self) -> usize {
        self.meta.tokens_per_partition()
    }

    pub fn layers_captured(&self) -> &[usize] {
        &self.meta.layers_captured
    }

    /// Tensor slot holding model layer `layer`, if it was captured.
    pub fn layer_slot(&self, layer: usize) -> Option<usize> {
        self.meta.layers_captured.binary_search(&layer).ok()
    }

    pub fn layout(&self) -> Result<PartitionLayout, GeometryError> {
        PartitionLayout::new(self.meta.grid, self.meta.patch_grid, self.meta.image_size)
    }

    /// Multiplies every attention value by `factor`.
    pub fn scaled(&self, factor: f32) -> Self {
        let mut out = self.clone();
        for p in &mut out.partitions {
            p.tensor.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
        out
    }
}

#[derive(Serialize)]
struct ManifestOut<'a> {
    version: u64,
    image_width: usize,
    image_height: usize,
    grid: Option<Grid>,
    patch_grid: Grid,
    num_heads: usize,
    layers_captured: &'a [usize],
    partitions: Vec<PartitionEntry>,
}

#[derive(Serialize)]
struct PartitionEntry {
    id: usize,
    role: Role,
    path: String,
}

fn partition_file(id: usize) -> String {
    format!("partition_{id}.npy")
}

/// Writes `manifest.json` and one `partition_<id>.npy` per partition.
pub fn save_attention_dump(dump: &AttentionDump, dir: impl AsRef<Path>) -> Result<(), DumpError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let meta = &dump.meta;
    let manifest = ManifestOut {
        version: DUMP_VERSION,
        image_width: meta.image_size.0,
        image_height: meta.image_size.1,
        grid: meta.grid,
        patch_grid: meta.patch_grid,
        num_heads: meta.num_heads,
        layers_captured: &meta.layers_captured,
        partitions: dump
            .partitions
            .iter()
            .map(|p| PartitionEntry {
                id: p.id,
                role: p.role,
                path: partition_file(p.id),
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(dir.join(MANIFEST_FILE), text)?;
    for p in &dump.partitions {
        npy::write_npy(&p.tensor, dir.join(partition_file(p.id)))
            .map_err(|source| DumpError::Partition { id: p.id, source })?;
    }
    Ok(())
}

fn field<'a>(obj: &'a Value, path: &str, key: &str) -> Result<&'a Value, DumpError> {
    obj.get(key)
        .ok_or_else(|| DumpError::invalid(join(path, key), "missing"))
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

fn as_usize(v: &Value, path: &str) -> Result<usize, DumpError> {
    v.as_u64()
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| DumpError::invalid(path, "expected a nonnegative integer"))
}

fn as_pair(v: &Value, path: &str) -> Result<Grid, DumpError> {
    match v.as_array().map(Vec::as_slice) {
        Some([w, h]) => Ok(Grid::new(
            as_usize(w, &format!("{path}[0]"))?,
            as_usize(h, &format!("{path}[1]"))?,
        )),
        _ => Err(DumpError::invalid(path, "expected a [width, height] pair")),
    }
}

struct EntryIn {
    id: usize,
    role: Role,
    path: String,
}

fn parse_manifest(root: &Value) -> Result<(DumpMeta, Vec<EntryIn>), DumpError> {
    if !root.is_object() {
        return Err(DumpError::invalid("$", "manifest must be a JSON object"));
    }
    let version = as_usize(field(root, "", "version")?, "version")?;
    if version as u64 != DUMP_VERSION {
        return Err(DumpError::invalid(
            "version",
            format!("unsupported version {version}"),
        ));
    }
    let image_size = (
        as_usize(field(root, "", "image_width")?, "image_width")?,
        as_usize(field(root, "", "image_height")?, "image_height")?,
    );
    let grid = match root.get("grid") {
        None | Some(Value::Null) => None,
        Some(v) => Some(as_pair(v, "grid")?),
    };
    let patch_grid = as_pair(field(root, "", "patch_grid")?, "patch_grid")?;
    let num_heads = as_usize(field(root, "", "num_heads")?, "num_heads")?;
    let layers_captured = field(root, "", "layers_captured")?
        .as_array()
        .ok_or_else(|| DumpError::invalid("layers_captured", "expected an array"))?
        .iter()
        .enumerate()
        .map(|(i, v)| as_usize(v, &format!("layers_captured[{i}]")))
        .collect::<Result<Vec<_>, _>>()?;
    let meta = DumpMeta {
        image_size,
        grid,
        patch_grid,
        num_heads,
        layers_captured,
    };
    meta.validate()?;

    let raw = field(root, "", "partitions")?
        .as_array()
        .ok_or_else(|| DumpError::invalid("partitions", "expected an array"))?;
    let mut entries = Vec::with_capacity(raw.len());
    for (i, e) in raw.iter().enumerate() {
        let at = format!("partitions[{i}]");
        let id = as_usize(field(e, &at, "id")?, &join(&at, "id"))?;
        let role_path = join(&at, "role");
        let role = field(e, &at, "role")?
            .as_str()
            .and_then(Role::parse)
            .ok_or_else(|| DumpError::invalid(&role_path, "expected \"full\" or \"sub\""))?;
        let path = field(e, &at, "path")?
            .as_str()
            .ok_or_else(|| DumpError::invalid(join(&at, "path"), "expected a string"))?
            .to_string();
        entries.push(EntryIn { id, role, path });
    }
    entries.sort_by_key(|e| e.id);

    let expected = meta.k() + 1;
    if entries.len() != expected {
        return Err(DumpError::invalid(
            "partitions",
            format!(
                "grid implies {expected} partitions (1 full + {} sub), manifest lists {}",
                meta.k(),
                entries.len()
            ),
        ));
    }
    for (expected_id, e) in entries.iter().enumerate() {
        if e.id != expected_id {
            return Err(DumpError::invalid(
                format!("partitions[id={}]", e.id),
                format!("ids must be contiguous from 0, expected {expected_id}"),
            ));
        }
        let want = if e.id == 0 { Role::Full } else { Role::Sub };
        if e.role != want {
            return Err(DumpError::invalid(
                format!("partitions[id={}].role", e.id),
                format!("partition {} must have role {:?}", e.id, want),
            ));
        }
    }
    Ok((meta, entries))
}

/// Loads and cross-validates a dump directory.
pub fn load_attention_dump(dir: impl AsRef<Path>) -> Result<AttentionDump, DumpError> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = match fs::read_to_string(&manifest_path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(DumpError::ManifestMissing(manifest_path))
        }
        Err(e) => return Err(e.into()),
    };
    let root: Value = serde_json::from_str(&text)
        .map_err(|e| DumpError::invalid("$", format!("not valid JSON: {e}")))?;
    let (meta, entries) = parse_manifest(&root)?;

    let shape = meta.tensor_shape();
    let mut tensors = Vec::with_capacity(entries.len());
    for e in &entries {
        let tensor = npy::read_npy(dir.join(&e.path))
            .map_err(|source| DumpError::Partition { id: e.id, source })?;
        if tensor.shape() != shape {
            return Err(DumpError::invalid(
                format!("partitions[id={}]", e.id),
                format!(
                    "{} has shape {:?}, manifest declares {:?}",
                    e.path,
                    tensor.shape(),
                    shape
                ),
            ));
        }
        tensors.push(tensor);
    }
    AttentionDump::new(meta, tensors)
}
