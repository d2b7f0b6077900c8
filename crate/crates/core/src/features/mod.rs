//! Feature datasets on disk and the preprocessing that turns one sample's
//! maps into stacked tokens.

mod blob;
mod dataset;
mod manifest;
mod preprocess;
mod selection;

pub(crate) use blob::write_atomic;
pub use blob::{blob_file_name, decode_blob, encode_blob, BLOB_HEADER_LEN, BLOB_MAGIC, BLOB_VERSION};
pub use dataset::FeatureDataset;
pub use manifest::{
    grid_side, BackboneMeta, Manifest, Protocol, Split, Splits, MANIFEST_FILE, MANIFEST_VERSION,
};
pub use preprocess::{
    interpolate_map, naive_stack_param_count, naive_stack_param_count_for, normalize_map,
    stack_bundle, FeatureBundle, FeatureMap, NaiveStackCount, StackedTokens, NORM_EPS,
};
pub use selection::{FeatureSelection, LayerSubset};
