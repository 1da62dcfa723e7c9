//! Search-augmented worldwide image geolocalization.

pub mod clients;
pub mod encoders;
pub mod geocoding;
pub mod geodesy;
pub mod linalg;
pub mod pipeline;
pub mod refine;
pub mod retrieval;
pub mod training;
pub mod websearch;
pub mod scalar;
pub mod synth;

pub type GeoModelF32 = encoders::GeoModel<f32>;
pub type GeoModelF64 = encoders::GeoModel<f64>;
pub type LocationEncoderF32 = encoders::LocationEncoder<f32>;
pub type LocationEncoderF64 = encoders::LocationEncoder<f64>;
pub type ProjectionHeadsF32 = encoders::ProjectionHeads<f32>;
pub type ProjectionHeadsF64 = encoders::ProjectionHeads<f64>;
pub type FeatureRecordF32 = encoders::FeatureRecord<f32>;
pub type FeatureRecordF64 = encoders::FeatureRecord<f64>;
pub type PipelineF32 = pipeline::Pipeline<f32>;
pub type PipelineF64 = pipeline::Pipeline<f64>;
pub type QueryRecordF32 = pipeline::QueryRecord<f32>;
pub type QueryRecordF64 = pipeline::QueryRecord<f64>;
