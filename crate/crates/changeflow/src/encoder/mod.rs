//! Frozen feature extraction. A small denoiser is pretrained to predict
//! injected noise, then its encoder path is queried at several noise
//! timesteps to build a multi-scale, multi-timestep feature pyramid for
//! each image. Pyramids can also be imported from files produced by an
//! external extractor.

pub mod denoiser;
pub mod harmonize;
pub mod import;
pub mod schedule;

use std::fs;
use std::path::Path;

use ndarray::{Array3, Ix3};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{blobs_from_store, blobs_to_snapshots, ParamBlob};
use crate::error::{Error, Result};
use crate::seeding;
use crate::tensor::{Graph, ParamStore, Tensor};

pub use denoiser::{pretrain, Denoiser, DEFAULT_WIDTHS, NUM_SCALES};
pub use harmonize::Harmonizer;
pub use import::{read_feature, write_feature, FeatureImportDir};
pub use schedule::NoiseSchedule;

/// Noise timesteps probed by default, fine to coarse semantic content.
pub const DEFAULT_TIMESTEPS: [usize; 3] = [50, 400, 650];

/// Multi-timestep, multi-scale features for one image. `maps[i][s]` is the
/// `[C_s, H / 2^s, W / 2^s]` activation at `timesteps[i]` and scale `s`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    timesteps: Vec<usize>,
    maps: Vec<Vec<Array3<f64>>>,
}

impl FeaturePyramid {
    pub fn new(timesteps: Vec<usize>, maps: Vec<Vec<Array3<f64>>>) -> Result<Self> {
        if timesteps.len() != maps.len() || timesteps.is_empty() {
            return Err(Error::validation(format!(
                "pyramid needs one scale list per timestep, got {} timesteps and {} lists",
                timesteps.len(),
                maps.len()
            )));
        }
        let scales = maps[0].len();
        if scales == 0 || maps.iter().any(|m| m.len() != scales) {
            return Err(Error::validation(
                "pyramid timesteps disagree on scale count",
            ));
        }
        Ok(FeaturePyramid { timesteps, maps })
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn num_timesteps(&self) -> usize {
        self.timesteps.len()
    }

    pub fn num_scales(&self) -> usize {
        self.maps[0].len()
    }

    pub fn map(&self, t_idx: usize, scale: usize) -> &Array3<f64> {
        &self.maps[t_idx][scale]
    }

    /// The coarsest map at the largest timestep, the single most abstract
    /// summary the pyramid holds.
    pub fn coarsest(&self) -> &Array3<f64> {
        &self.maps[self.num_timesteps() - 1][self.num_scales() - 1]
    }
}

/// On-disk form of a pretrained extractor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendFile {
    pub version: String,
    pub schedule: NoiseSchedule,
    pub widths: Vec<usize>,
    pub seed: u64,
    pub params: Vec<ParamBlob>,
}

pub const BACKEND_VERSION: &str = "changeflow-encoder/1";

/// A frozen denoiser plus its noise schedule. All parameters are marked
/// frozen the moment pretraining ends; nothing downstream can thaw them.
pub struct EncoderBackend {
    schedule: NoiseSchedule,
    widths: Vec<usize>,
    seed: u64,
    store: ParamStore,
    denoiser: Denoiser,
}

impl EncoderBackend {
    /// Pretrains a fresh denoiser on `corpus` and freezes it. `steps == 0`
    /// freezes the random initialization instead, which keeps the whole
    /// pipeline runnable when no pretraining budget exists.
    pub fn pretrained(
        corpus: &[Array3<f64>],
        schedule: NoiseSchedule,
        widths: &[usize],
        steps: usize,
        lr: f64,
        seed: u64,
    ) -> Result<(Self, Vec<f64>)> {
        let mut store = ParamStore::new();
        let den = Denoiser::register(&mut store, seed, widths)?;
        let losses = pretrain(&mut store, &den, corpus, &schedule, steps, lr, seed)?;
        store.freeze_matching(|n| n.starts_with("enc."));
        Ok((
            EncoderBackend {
                schedule,
                widths: widths.to_vec(),
                seed,
                store,
                denoiser: den,
            },
            losses,
        ))
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Digest over the frozen weights; unchanged digests prove downstream
    /// training never touched the extractor.
    pub fn digest(&self) -> String {
        self.store.digest(|n| n.starts_with("enc."))
    }

    /// Builds the feature pyramid for one `[3, H, W]` image in `[0, 1]`.
    /// `H` and `W` must be divisible by 16 so every scale lands on whole
    /// pixels. The noise drawn at timestep `t` comes from a sub-seed of
    /// `eps_seed`, so a fixed `eps_seed` makes extraction a pure function
    /// of the image.
    pub fn extract(
        &self,
        image: &Array3<f64>,
        timesteps: &[usize],
        eps_seed: u64,
    ) -> Result<FeaturePyramid> {
        let (c, h, w) = image.dim();
        if c != 3 {
            return Err(Error::validation(format!("expected 3 channels, got {c}")));
        }
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::validation(format!(
                "image sides must be divisible by 16, got {h}x{w}"
            )));
        }
        if timesteps.is_empty() {
            return Err(Error::validation("need at least one timestep"));
        }
        if timesteps.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::validation(format!(
                "timesteps must be strictly increasing, got {timesteps:?}"
            )));
        }
        let mut maps = Vec::with_capacity(timesteps.len());
        for &t in timesteps {
            if t >= self.schedule.len() {
                return Err(Error::validation(format!(
                    "timestep {t} exceeds schedule length {}",
                    self.schedule.len()
                )));
            }
            let x_t = self.schedule.forward_noise(
                image,
                t,
                seeding::derive_seed(eps_seed, &format!("t/{t}")),
            )?;
            let g = Graph::new(&self.store);
            let feats = self
                .denoiser
                .features(&g, &Tensor::constant(x_t.into_dyn()), t);
            maps.push(
                feats
                    .iter()
                    .map(|f| {
                        f.value()
                            .clone()
                            .into_dimensionality::<Ix3>()
                            .expect("feature maps are rank 3")
                    })
                    .collect(),
            );
        }
        FeaturePyramid::new(timesteps.to_vec(), maps)
    }

    pub fn to_file(&self) -> BackendFile {
        BackendFile {
            version: BACKEND_VERSION.to_string(),
            schedule: self.schedule.clone(),
            widths: self.widths.clone(),
            seed: self.seed,
            params: blobs_from_store(&self.store, false, |n| n.starts_with("enc.")),
        }
    }

    pub fn from_file(mut file: BackendFile) -> Result<Self> {
        if file.version != BACKEND_VERSION {
            return Err(Error::validation(format!(
                "unsupported extractor version {:?}, expected {BACKEND_VERSION:?}",
                file.version
            )));
        }
        file.schedule.fill_alpha_bar();
        let mut store = ParamStore::new();
        let den = Denoiser::register(&mut store, file.seed, &file.widths)?;
        store.restore(&blobs_to_snapshots(&file.params)?)?;
        store.freeze_matching(|n| n.starts_with("enc."));
        Ok(EncoderBackend {
            schedule: file.schedule,
            widths: file.widths,
            seed: file.seed,
            store,
            denoiser: den,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.to_file())
            .map_err(|e| Error::json(path, e.to_string()))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: BackendFile =
            serde_json::from_str(&text).map_err(|e| Error::json(path, e.to_string()))?;
        EncoderBackend::from_file(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn small_backend(seed: u64) -> EncoderBackend {
        let schedule = NoiseSchedule::linear(100, 1e-4, 2e-2).unwrap();
        let corpus = vec![Array3::from_elem((3, 16, 16), 0.4)];
        EncoderBackend::pretrained(&corpus, schedule, &[2, 3, 4, 5, 6], 0, 1e-3, seed)
            .unwrap()
            .0
    }

    #[test]
    fn pyramid_obeys_the_resolution_ladder() {
        let backend = small_backend(1);
        let image = Array3::from_elem((3, 32, 48), 0.5);
        let pyr = backend.extract(&image, &[10, 60], 7).unwrap();
        assert_eq!(pyr.num_timesteps(), 2);
        assert_eq!(pyr.num_scales(), 5);
        let dims = [(2, 32, 48), (3, 16, 24), (4, 8, 12), (5, 4, 6), (6, 2, 3)];
        for (s, &d) in dims.iter().enumerate() {
            assert_eq!(pyr.map(0, s).dim(), d);
            assert_eq!(pyr.map(1, s).dim(), d);
        }
        assert_eq!(pyr.coarsest().dim(), (6, 2, 3));
    }

    #[test]
    fn extraction_is_a_pure_function_of_image_and_seed() {
        let backend = small_backend(2);
        let image = Array3::from_shape_fn((3, 16, 16), |(c, y, x)| {
            ((c + 2 * y + 3 * x) % 7) as f64 / 7.0
        });
        let a = backend.extract(&image, &[10, 60], 5).unwrap();
        let b = backend.extract(&image, &[10, 60], 5).unwrap();
        let c = backend.extract(&image, &[10, 60], 6).unwrap();
        assert_eq!(a.map(0, 0), b.map(0, 0));
        assert_eq!(a.map(1, 4), b.map(1, 4));
        assert_ne!(a.map(0, 0), c.map(0, 0));
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let backend = small_backend(3);
        let odd = Array3::from_elem((3, 24, 16), 0.5);
        assert!(backend.extract(&odd, &[10], 1).is_err());
        let ok = Array3::from_elem((3, 16, 16), 0.5);
        assert!(backend.extract(&ok, &[], 1).is_err());
        assert!(backend.extract(&ok, &[60, 10], 1).is_err());
        assert!(backend.extract(&ok, &[10, 10], 1).is_err());
        assert!(backend.extract(&ok, &[10, 100], 1).is_err());
    }

    #[test]
    fn every_parameter_ends_up_frozen() {
        let backend = small_backend(4);
        let names: Vec<String> = backend.store.names().map(str::to_string).collect();
        assert!(!names.is_empty());
        for n in &names {
            assert!(backend.store.is_frozen(n), "{n} is not frozen");
        }
    }

    #[test]
    fn save_load_round_trip_reproduces_features_exactly() {
        let schedule = NoiseSchedule::linear(100, 1e-4, 2e-2).unwrap();
        let corpus = vec![Array3::from_elem((3, 16, 16), 0.4)];
        let (backend, _) =
            EncoderBackend::pretrained(&corpus, schedule, &[2, 3, 4, 5, 6], 5, 1e-3, 9).unwrap();
        let path = std::env::temp_dir().join(format!(
            "changeflow-backend-{}-{:x}.json",
            std::process::id(),
            rand::random::<u64>()
        ));
        backend.save(&path).unwrap();
        let loaded = EncoderBackend::load(&path).unwrap();
        std::fs::remove_file(&path).ok();
        assert_eq!(backend.digest(), loaded.digest());
        let image = Array3::from_shape_fn((3, 16, 16), |(c, y, x)| {
            ((c + y + x) % 5) as f64 / 5.0
        });
        let a = backend.extract(&image, &[10, 60], 11).unwrap();
        let b = loaded.extract(&image, &[10, 60], 11).unwrap();
        for t in 0..2 {
            for s in 0..5 {
                assert_eq!(a.map(t, s), b.map(t, s));
            }
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let backend = small_backend(5);
        let mut file = backend.to_file();
        file.version = "changeflow-encoder/9".into();
        assert!(EncoderBackend::from_file(file).is_err());
    }
}
