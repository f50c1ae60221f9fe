//! File formats: NPY tensors, attention dump directories, selection
//! manifests, and synthetic dump generation.

mod dump;
mod manifest;
mod npy;
mod synth;

pub use dump::{
    load_attention_dump, save_attention_dump, AttentionDump, DumpError, DumpMeta, Partition, Role,
    DUMP_VERSION, MANIFEST_FILE,
};
pub use manifest::{
    read_selection_manifest, write_selection_manifest, ManifestError, PartitionRecord,
    SelectionManifest, SELECTION_MANIFEST_VERSION,
};
pub use npy::{decode_npy, encode_npy, read_npy, write_npy, NpyError, Tensor3, MAGIC};
pub use synth::{generate_synthetic_dump, generate_with_meta};
