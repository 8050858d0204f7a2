//! Translation quality metrics: recognizer-mediated BLEU and character
//! accuracy, Fréchet distance over image features, and golden-mode scoring.

pub mod bleu;
pub mod fid;
mod recognizer;
pub mod report;

pub use bleu::{corpus_bleu, tokenize_13a, BleuStats};
pub use fid::{default_extractor, fid, fid_from_features, frechet_distance, FeatureExtractor};
pub use recognizer::{train_recognizer, Recognizer, RecognizerConfig};
pub use report::{char_accuracy, evaluate_system, EvalMode, EvalSetup, MetricsReport, Recognize};
