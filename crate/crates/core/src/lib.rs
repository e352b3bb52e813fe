//! Named-entity recognition posed as reading comprehension in which a single
//! encoder pass answers one question per entity type.

pub mod bench;
pub mod dataops;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod heads;
pub mod kv;
pub mod model;
pub mod numerics;
pub mod packing;
pub mod tokenizer;
pub mod training;

pub use encoder::{EncoderConfig, EncoderOutput};
pub use error::{Error, Result};
pub use evaluation::{EntityTexts, EvalReport};
pub use heads::{BioLabel, HeadKind, InteractionKind};
pub use model::{Checkpoint, EntityPrediction, Mode, Model, ModelConfig};
pub use numerics::{ParamStore, Tape, Tensor, Var};
pub use packing::{EntityAnnotation, PackedSequence, QueryMap, Sample, Span};
pub use tokenizer::Vocab;
pub use training::{TrainConfig, TrainReport};
