//! Dense f32 tensors and the on-disk bundle interchange format.
//!
//! A bundle is a directory holding `manifest.json` and one or more blob
//! files (`data.bin` by default). The manifest is
//!
//! ```json
//! { "version": 1,
//!   "tensors": [ { "name": "v", "dtype": "f32", "shape": [2],
//!                  "file": "data.bin", "offset": 0, "length": 8,
//!                  "sha256": "<hex>" } ] }
//! ```
//!
//! Blobs hold little-endian IEEE-754 binary32 elements in row-major order.
//! Every region is covered by a SHA-256 hash that is checked on read.

mod bundle;
mod tensor;

pub use bundle::{
    read_bundle, read_manifest, validate_bundle, write_bundle, EntryStatus, Manifest,
    ManifestEntry, ManifestSummary, TensorMap, ValidationEntry, ValidationReport, DATA_FILE,
    FORMAT_VERSION, MANIFEST_FILE,
};
pub use tensor::Tensor;
