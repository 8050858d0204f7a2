//! Synthetic corpus forge: glyph rendering, example synthesis,
//! vocabularies and dataset I/O.

pub mod corpus;
pub mod font;
pub mod manifest;
pub mod render;
pub mod synth;
pub mod vocab;

pub use corpus::{bundled_pairs, bundled_pairs_for, Lang, ParallelPair};
pub use manifest::{load_dataset, read_manifest, write_dataset, ManifestRecord};
pub use render::{fit_font_size, render_text_line, FontSpec, FontStyle, RenderError};
pub use synth::{
    filter_example, make_example, synthesize, synthesize_one, RejectReason, TrainingExample, Verdict,
    CANVAS_CHANNELS, CANVAS_HEIGHT, CANVAS_WIDTH,
};
pub use vocab::{train_bpe, VocabKind, Vocabulary};
