//! Trainable representation stack.
//!
//! The location encoder projects a coordinate to ECEF, scales it onto the unit
//! ball, and sums `K` branches of random Fourier features followed by a
//! scale-specific MLP. Projection heads map precomputed backbone features into
//! the shared embedding space. Every emitted embedding is ℓ2-normalized.

mod mlp;
mod rff;
mod weights;

pub use mlp::{Activation, Linear, Mlp, MlpTrace};
pub use rff::{rff_map, RffLayer};
pub use weights::{load_weights, save_weights, WEIGHTS_MAGIC, WEIGHTS_VERSION};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodesy::{ecef_project, GpsCoordinate, WGS84};
use crate::scalar::{normalized, Scalar};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding has zero norm and cannot be normalized")]
    DegenerateNormalization,
    #[error("location encoder has no branches")]
    Uninitialized,
    #[error("non-finite value in encoder input")]
    NonFinite,
    #[error("invalid encoder configuration: {0}")]
    InvalidConfig(String),
    #[error("weight file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture of the location encoder and projection heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Backbone feature width `D_v`.
    pub visual_dim: usize,
    /// Shared embedding width `D_e`.
    pub embed_dim: usize,
    /// Random Fourier features per branch (`F`); each branch emits `2F` values.
    pub rff_features: usize,
    /// Frequency scale of each branch; its length is the branch count `K`.
    pub sigmas: Vec<f64>,
    /// Hidden widths of each branch MLP.
    pub location_hidden: Vec<usize>,
    /// Hidden widths of each projection head.
    pub head_hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl EncoderConfig {
    /// Default architecture for the given backbone and embedding widths.
    pub fn with_dims(visual_dim: usize, embed_dim: usize) -> Self {
        Self {
            visual_dim,
            embed_dim,
            rff_features: 256,
            sigmas: vec![1.0, 16.0, 256.0],
            location_hidden: vec![1024],
            head_hidden: vec![visual_dim],
            activation: Activation::Relu,
        }
    }

    /// Small architecture for desk-scale experiments and tests.
    pub fn toy(visual_dim: usize, embed_dim: usize) -> Self {
        Self {
            visual_dim,
            embed_dim,
            rff_features: 32,
            sigmas: vec![1.0, 16.0, 256.0],
            location_hidden: vec![64],
            head_hidden: vec![visual_dim],
            activation: Activation::Relu,
        }
    }

    pub fn branch_count(&self) -> usize {
        self.sigmas.len()
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: &str| Err(EncoderError::InvalidConfig(m.to_string()));
        if self.visual_dim == 0 || self.embed_dim == 0 || self.rff_features == 0 {
            return bad("dimensions must be positive");
        }
        if self.sigmas.is_empty() {
            return bad("at least one rff branch is required");
        }
        if self.sigmas.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return bad("rff sigmas must be positive");
        }
        if self.location_hidden.contains(&0) || self.head_hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        Ok(())
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::with_dims(768, 512)
    }
}

/// One scale of the location encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationBranch<T> {
    pub rff: RffLayer<T>,
    pub mlp: Mlp<T>,
}

/// Multi-scale random-Fourier-feature location encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationEncoder<T> {
    branches: Vec<LocationBranch<T>>,
}

/// Forward pass of the location encoder kept for backpropagation.
#[derive(Debug, Clone)]
pub struct LocationTrace<T> {
    pub branch_traces: Vec<MlpTrace<T>>,
    pub raw: Vec<T>,
}

impl<T: Scalar> LocationEncoder<T> {
    pub fn new(branches: Vec<LocationBranch<T>>) -> Result<Self, EncoderError> {
        if let Some(first) = branches.first() {
            let d = first.mlp.output_dim();
            for b in &branches {
                if b.mlp.input_dim() != b.rff.output_dim() {
                    return Err(EncoderError::DimensionMismatch {
                        expected: b.rff.output_dim(),
                        got: b.mlp.input_dim(),
                    });
                }
                if b.mlp.output_dim() != d {
                    return Err(EncoderError::DimensionMismatch {
                        expected: d,
                        got: b.mlp.output_dim(),
                    });
                }
            }
        }
        Ok(Self { branches })
    }

    pub fn branches(&self) -> &[LocationBranch<T>] {
        &self.branches
    }

    pub fn branches_mut(&mut self) -> &mut [LocationBranch<T>] {
        &mut self.branches
    }

    pub fn embed_dim(&self) -> usize {
        self.branches.first().map_or(0, |b| b.mlp.output_dim())
    }

    /// ECEF position divided by the semi-major axis.
    pub fn scaled_ecef(coord: GpsCoordinate) -> [T; 3] {
        let e = ecef_project(coord, 0.0);
        let a = WGS84.semi_major_a;
        [T::of(e.x / a), T::of(e.y / a), T::of(e.z / a)]
    }

    pub fn forward_traced(&self, coord: GpsCoordinate) -> Result<LocationTrace<T>, EncoderError> {
        if self.branches.is_empty() {
            return Err(EncoderError::Uninitialized);
        }
        let p = Self::scaled_ecef(coord);
        let mut raw = vec![T::zero(); self.embed_dim()];
        let mut branch_traces = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let gamma = b.rff.map(&p)?;
            let trace = b.mlp.forward_traced(&gamma)?;
            for (r, &v) in raw.iter_mut().zip(trace.output()) {
                *r = *r + v;
            }
            branch_traces.push(trace);
        }
        Ok(LocationTrace { branch_traces, raw })
    }

    /// Sum of branch outputs before normalization.
    pub fn embed_raw(&self, coord: GpsCoordinate) -> Result<Vec<T>, EncoderError> {
        Ok(self.forward_traced(coord)?.raw)
    }

    /// Unit-norm location embedding `e_loc`.
    pub fn encode(&self, coord: GpsCoordinate) -> Result<Vec<T>, EncoderError> {
        normalized(&self.embed_raw(coord)?).ok_or(EncoderError::DegenerateNormalization)
    }
}

/// Free-function form of [`LocationEncoder::encode`].
pub fn encode_location<T: Scalar>(
    coord: GpsCoordinate,
    encoder: &LocationEncoder<T>,
) -> Result<Vec<T>, EncoderError> {
    encoder.encode(coord)
}

/// Trainable heads over precomputed backbone features.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHeads<T> {
    /// Image features to the text-aligned space.
    pub f_txt: Mlp<T>,
    /// Image features to the location-aligned space.
    pub f_loc: Mlp<T>,
    /// Text features to the shared space.
    pub g_txt: Mlp<T>,
}

impl<T: Scalar> ProjectionHeads<T> {
    pub fn new(f_txt: Mlp<T>, f_loc: Mlp<T>, g_txt: Mlp<T>) -> Result<Self, EncoderError> {
        let d_v = f_txt.input_dim();
        let d_e = f_txt.output_dim();
        for m in [&f_loc, &g_txt] {
            if m.input_dim() != d_v {
                return Err(EncoderError::DimensionMismatch {
                    expected: d_v,
                    got: m.input_dim(),
                });
            }
            if m.output_dim() != d_e {
                return Err(EncoderError::DimensionMismatch {
                    expected: d_e,
                    got: m.output_dim(),
                });
            }
        }
        Ok(Self { f_txt, f_loc, g_txt })
    }

    pub fn visual_dim(&self) -> usize {
        self.f_txt.input_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.f_txt.output_dim()
    }

    /// Returns `(e_img_txt, e_img_loc)` for a visual backbone feature.
    pub fn project_image(&self, visual: &[T]) -> Result<(Vec<T>, Vec<T>), EncoderError> {
        check_finite(visual)?;
        let t = normalized(&self.f_txt.forward(visual)?).ok_or(EncoderError::DegenerateNormalization)?;
        let l = normalized(&self.f_loc.forward(visual)?).ok_or(EncoderError::DegenerateNormalization)?;
        Ok((t, l))
    }

    /// Location-aligned image embedding only.
    pub fn image_location_embedding(&self, visual: &[T]) -> Result<Vec<T>, EncoderError> {
        check_finite(visual)?;
        normalized(&self.f_loc.forward(visual)?).ok_or(EncoderError::DegenerateNormalization)
    }

    /// Text embedding `e_txt` for a text backbone feature.
    pub fn encode_text(&self, text: &[T]) -> Result<Vec<T>, EncoderError> {
        check_finite(text)?;
        normalized(&self.g_txt.forward(text)?).ok_or(EncoderError::DegenerateNormalization)
    }
}

fn check_finite<T: Scalar>(v: &[T]) -> Result<(), EncoderError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(EncoderError::NonFinite)
    }
}

/// Location encoder and projection heads trained together.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoModel<T> {
    pub encoder: LocationEncoder<T>,
    pub heads: ProjectionHeads<T>,
}

impl<T: Scalar> GeoModel<T> {
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self, EncoderError> {
        let (encoder, heads) = init_parameters(config, seed)?;
        Ok(Self { encoder, heads })
    }

    fn trainable_mlps(&self) -> Vec<&Mlp<T>> {
        let mut out: Vec<&Mlp<T>> = self.encoder.branches.iter().map(|b| &b.mlp).collect();
        out.extend([&self.heads.f_txt, &self.heads.f_loc, &self.heads.g_txt]);
        out
    }

    /// Names of the trainable tensors, in the order used by
    /// [`GeoModel::trainable_mut`] and [`crate::training::Gradients::tensors`].
    pub fn trainable_names(&self) -> Vec<String> {
        let mut prefixes: Vec<String> = (0..self.encoder.branches.len())
            .map(|i| format!("loc.{i}.mlp"))
            .collect();
        prefixes.extend(["heads.f_txt", "heads.f_loc", "heads.g_txt"].map(String::from));
        let mut names = Vec::new();
        for (prefix, mlp) in prefixes.iter().zip(self.trainable_mlps()) {
            for j in 0..mlp.layers().len() {
                names.push(format!("{prefix}.{j}.weight"));
                names.push(format!("{prefix}.{j}.bias"));
            }
        }
        names
    }

    pub fn trainable(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for mlp in self.trainable_mlps() {
            for l in mlp.layers() {
                out.push(l.weight.as_slice());
                out.push(l.bias.as_slice());
            }
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut [T]> {
        let mut mlps: Vec<&mut Mlp<T>> = self.encoder.branches.iter_mut().map(|b| &mut b.mlp).collect();
        mlps.push(&mut self.heads.f_txt);
        mlps.push(&mut self.heads.f_loc);
        mlps.push(&mut self.heads.g_txt);
        let mut out = Vec::new();
        for mlp in mlps {
            for l in mlp.layers_mut() {
                out.push(l.weight.as_mut_slice());
                out.push(l.bias.as_mut_slice());
            }
        }
        out
    }
}

/// Seeded initialization: RFF frequencies `~ N(0, σ_i)`, Kaiming-uniform MLP weights, zero biases.
pub fn init_parameters<T: Scalar>(
    config: &EncoderConfig,
    seed: u64,
) -> Result<(LocationEncoder<T>, ProjectionHeads<T>), EncoderError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut branches = Vec::with_capacity(config.sigmas.len());
    for &sigma in &config.sigmas {
        let rff = RffLayer::sample(sigma, config.rff_features, &mut rng)?;
        let mut dims = vec![rff.output_dim()];
        dims.extend(&config.location_hidden);
        dims.push(config.embed_dim);
        let mlp = Mlp::kaiming(&dims, config.activation, &mut rng)?;
        branches.push(LocationBranch { rff, mlp });
    }
    let mut head_dims = vec![config.visual_dim];
    head_dims.extend(&config.head_hidden);
    head_dims.push(config.embed_dim);
    let f_txt = Mlp::kaiming(&head_dims, config.activation, &mut rng)?;
    let f_loc = Mlp::kaiming(&head_dims, config.activation, &mut rng)?;
    let g_txt = Mlp::kaiming(&head_dims, config.activation, &mut rng)?;
    Ok((LocationEncoder::new(branches)?, ProjectionHeads::new(f_txt, f_loc, g_txt)?))
}

/// Precomputed backbone outputs for one reference image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord<T> {
    pub id: String,
    /// Visual backbone feature `V(I)`.
    pub visual: Vec<T>,
    /// Text backbone feature of the location description.
    pub text_feature: Vec<T>,
    pub gps: GpsCoordinate,
    pub description: Option<String>,
}

impl<T: Scalar> FeatureRecord<T> {
    pub fn validate(&self, visual_dim: usize) -> Result<(), EncoderError> {
        for v in [&self.visual, &self.text_feature] {
            if v.len() != visual_dim {
                return Err(EncoderError::DimensionMismatch {
                    expected: visual_dim,
                    got: v.len(),
                });
            }
            check_finite(v)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::scalar::l2_norm;
    use rand::Rng;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            visual_dim: 12,
            embed_dim: 6,
            rff_features: 8,
            sigmas: vec![1.0, 8.0],
            location_hidden: vec![10],
            head_hidden: vec![12],
            activation: Activation::Relu,
        }
    }

    fn gps(lat: f64, lon: f64) -> GpsCoordinate {
        GpsCoordinate::new(lat, lon).unwrap()
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = GeoModel::<f64>::init(&small_config(), 5).unwrap();
        let b = GeoModel::<f64>::init(&small_config(), 5).unwrap();
        assert_eq!(a, b);
        let c = GeoModel::<f64>::init(&small_config(), 6).unwrap();
        assert_ne!(
            a.encoder.branches()[0].rff.frequencies(),
            c.encoder.branches()[0].rff.frequencies()
        );
    }

    #[test]
    fn rff_sample_variance_tracks_sigma() {
        let mut cfg = small_config();
        cfg.rff_features = 4096;
        cfg.sigmas = vec![2.0];
        let (enc, _) = init_parameters::<f64>(&cfg, 9).unwrap();
        let w = enc.branches()[0].rff.frequencies().as_slice();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        assert!((var - 4.0).abs() <= 0.4, "variance {var}");
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = small_config();
        cfg.embed_dim = 0;
        assert!(matches!(init_parameters::<f64>(&cfg, 0), Err(EncoderError::InvalidConfig(_))));
        let mut cfg = small_config();
        cfg.sigmas.clear();
        assert!(init_parameters::<f32>(&cfg, 0).is_err());
    }

    #[test]
    fn location_embedding_is_unit_and_deterministic() {
        let m = GeoModel::<f64>::init(&small_config(), 1).unwrap();
        let a = m.encoder.encode(gps(48.85, 2.29)).unwrap();
        let b = encode_location(gps(48.85, 2.29), &m.encoder).unwrap();
        assert_eq!(a, b);
        assert!((l2_norm(&a) - 1.0).abs() < 1e-12);
        assert_eq!(m.encoder.encode(gps(10.0, 170.0)).unwrap(), m.encoder.encode(gps(10.0, -190.0)).unwrap());
    }

    #[test]
    fn zero_branch_is_degenerate() {
        let rff = RffLayer::new(1.0f64, Matrix::zeros(2, 3)).unwrap();
        let mlp = Mlp::new(vec![Linear::zeros(4, 3)], Activation::Relu).unwrap();
        let enc = LocationEncoder::new(vec![LocationBranch { rff, mlp }]).unwrap();
        assert_eq!(enc.embed_raw(gps(1.0, 2.0)).unwrap(), vec![0.0; 3]);
        assert!(matches!(enc.encode(gps(1.0, 2.0)), Err(EncoderError::DegenerateNormalization)));
        let empty = LocationEncoder::<f64>::new(vec![]).unwrap();
        assert!(matches!(empty.encode(gps(0.0, 0.0)), Err(EncoderError::Uninitialized)));
    }

    #[test]
    fn linear_branch_sum_matches_matrix_products() {
        let mut cfg = small_config();
        cfg.activation = Activation::Identity;
        let m = GeoModel::<f64>::init(&cfg, 3).unwrap();
        let c = gps(-12.5, 130.25);
        let p = LocationEncoder::<f64>::scaled_ecef(c);
        let mut expected = vec![0.0; cfg.embed_dim];
        for b in m.encoder.branches() {
            let mut h = b.rff.map(&p).unwrap();
            for l in b.mlp.layers() {
                h = (0..l.output_dim())
                    .map(|r| (0..l.input_dim()).map(|k| l.weight.get(r, k) * h[k]).sum::<f64>() + l.bias[r])
                    .collect();
            }
            for (e, v) in expected.iter_mut().zip(&h) {
                *e += v;
            }
        }
        let raw = m.encoder.embed_raw(c).unwrap();
        for (a, b) in raw.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn heads_emit_unit_vectors() {
        let m = GeoModel::<f32>::init(&small_config(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let v: Vec<f32> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (t, l) = m.heads.project_image(&v).unwrap();
            let e = m.heads.encode_text(&v).unwrap();
            for x in [&t, &l, &e] {
                assert!((l2_norm(x) - 1.0).abs() < 1e-6);
            }
            assert_eq!(m.heads.project_image(&v).unwrap(), (t, l));
        }
        assert!(matches!(
            m.heads.project_image(&[0.0; 3]),
            Err(EncoderError::DimensionMismatch { expected: 12, got: 3 })
        ));
    }

    #[test]
    fn zero_heads_are_degenerate() {
        let zero = || Mlp::<f64>::new(vec![Linear::zeros(4, 2)], Activation::Relu).unwrap();
        let heads = ProjectionHeads::new(zero(), zero(), zero()).unwrap();
        assert!(matches!(heads.project_image(&[1.0; 4]), Err(EncoderError::DegenerateNormalization)));
        assert!(matches!(heads.encode_text(&[1.0; 4]), Err(EncoderError::DegenerateNormalization)));
    }

    #[test]
    fn trainable_views_align() {
        let mut m = GeoModel::<f64>::init(&small_config(), 2).unwrap();
        let names = m.trainable_names();
        let lens: Vec<usize> = m.trainable().iter().map(|t| t.len()).collect();
        assert_eq!(names.len(), lens.len());
        assert_eq!(m.trainable_mut().len(), lens.len());
        assert_eq!(names[0], "loc.0.mlp.0.weight");
        assert_eq!(lens[0], 10 * 16);
        assert_eq!(names.last().unwrap(), "heads.g_txt.1.bias");
    }

    proptest::proptest! {
        #[test]
        fn location_embedding_depends_only_on_position(lat in -90.0f64..=90.0, k in -184_320i64..184_320) {
            let lon = k as f64 / 1024.0;
            let model = GeoModel::<f64>::init(&small_config(), 9).unwrap();
            let e = model.encoder.encode(gps(lat, lon)).unwrap();
            proptest::prop_assert!((l2_norm(&e) - 1.0).abs() <= 1e-6);
            proptest::prop_assert_eq!(e, model.encoder.encode(gps(lat, lon + 360.0)).unwrap());
        }
    }
}
