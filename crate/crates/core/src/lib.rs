pub mod corpus;
pub mod diffmath;
pub mod distributions;
pub mod evaluation;
pub mod inference;
pub mod markov;
pub mod networks;
pub mod objectives;
pub mod scalar;
pub mod training;
pub mod vocab;

pub use scalar::Scalar;

pub type Tensor64 = diffmath::Tensor<f64>;
pub type Tensor32 = diffmath::Tensor<f32>;
pub type Graph64 = diffmath::Graph<f64>;
pub type ParamStore64 = diffmath::ParamStore<f64>;
pub type ChordVae64 = networks::ChordVae<f64>;
pub type ChordVae32 = networks::ChordVae<f32>;
pub type TransitionModel64 = markov::TransitionModel<f64>;
pub type LabelPrior64 = objectives::LabelPrior<f64>;
