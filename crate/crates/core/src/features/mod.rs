//! Feature maps from disk or from the built-in extractor.

mod handcrafted;
mod io;

pub use handcrafted::{extract_handcrafted_features, HANDCRAFTED_CHANNELS};
pub use io::{
    decode_feature_map, encode_feature_map, feature_file_name, read_feature_map, write_feature_map, FeatureFileHeader,
    FORMAT_VERSION, HEADER_LEN, MAGIC,
};
