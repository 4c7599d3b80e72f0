//! File formats: binary PLY clouds, binary feature files and text pose
//! graphs.

mod features;
mod graph_text;
mod ply;

pub use features::{decode_features, encode_features, read_features, write_features};
pub use graph_text::{format_graph, parse_graph, read_graph, write_graph};
pub use ply::{encode_ply, parse_ply, read_ply, write_ply};
