pub mod autodiff;
pub mod data;
pub mod decoding;
pub mod error;
pub mod fisher;
pub mod labelspace;
pub mod methods;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod train;
pub mod transformer;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use labelspace::{DescriptorScheme, Label, LabelCatalog, LabelSet, LabelVocabulary, Level};
pub use params::{ParamId, ParamStore};
pub use rng::Prng;
pub use tensor::Tensor;
pub use tokenizer::Tokenizer;
pub use transformer::{AttentionScheme, ModelConfig, SizePreset, Transformer};
pub use decoding::{Decoding, Hypothesis};
pub use methods::{Classifier, LabelScores, MethodKind, MethodOptions, Prediction};
pub use data::{Dataset, DatasetSpec, Document, Split, SplitMode};
pub use fisher::{fisher_exact_p, ContingencyTable};
pub use metrics::{Counts, MetricsReport, Summary};
pub use optim::Adafactor;
pub use train::{TrainConfig, TrainOutcome};
