//! Fixture records, JSON Lines loading, and the synthetic scene generator.

mod loader;
mod records;
mod synthetic;

pub use loader::{
    load_dir, load_fixtures, parse_jsonl, parse_texts, parse_videos, to_jsonl, write_dir, TEXTS_FILE, VIDEOS_FILE,
};
pub(crate) use loader::write_file;
pub use records::{DatasetSplit, EntityDetection, RecordLimits, RoleEntity, TextRecord, VideoRecord};
pub use synthetic::{
    generate_synthetic, Scene, SceneWorld, SyntheticConfig, Vocab, VocabConfig, VocabSpec, EOS, FIRST_CONTENT_TOKEN,
    ROLE_AGENT, ROLE_LOCATION, ROLE_PATIENT, TOKEN_A, TOKEN_IN, TOKEN_THE,
};
