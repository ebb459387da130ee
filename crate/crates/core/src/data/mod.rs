//! Feature and weight matrices, the WPFT tensor format, and dataset bundles.

mod bundle;
mod matrix;
mod tensor;

pub use bundle::{
    load_bundle, load_head, read_meta, save_bundle, write_meta, DatasetBundle, OodKind, OodSet,
    Role, Tag, TensorMeta,
};
pub use matrix::{FeatureMatrix, Matrix, WeightMatrix};
pub use tensor::{
    decode_tensor, encode_tensor, load_tensor, save_tensor, save_values, DTYPE_F32, HEADER_LEN,
    MAGIC, VERSION,
};
