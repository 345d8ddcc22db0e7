//! The frozen world: synthetic embeddings, the surrogate text encoder and the
//! on-disk store format.

mod format;
mod store;
mod surrogate;
mod synth;

pub(crate) use format::OffsetReader;
pub use format::{load_store, read_store, save_store, write_store, STORE_MAGIC, STORE_VERSION};
pub use store::{ClassId, ClassRecord, Dataset, EmbeddingStore, Split, TOKEN_NORM_TOL};
pub use surrogate::SurrogateEncoder;
pub use synth::{synth_world, SynthConfig};
