//! Synthetic paired supervision and every on-disk format: procedural scene
//! corpus, affine perturbation into flow/change/validity ground truth, PNG
//! and binary-flow containers, and the split/manifest dataset layout.

mod flo;
mod pair;
pub mod png;
mod store;
mod toy;

pub use flo::{read_flo, write_flo};
pub use pair::{generate_pair, SamplePair};
pub use store::{
    generate_split, generate_toy_split, load_dir_corpus, load_split, read_sample, write_sample,
    DatasetManifest, SampleFiles, SampleMeta, SampleRecord, GENERATOR_VERSION,
};
pub use toy::{make_toy_corpus, CorpusItem};
