//! Run configuration and checkpoint files.
//!
//! Both are JSON. Checkpoint float payloads are base64 of little-endian `f32`
//! values laid out row-major in manifest order. Every file is written to a
//! temporary sibling and renamed into place.

use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::BinSpec;
use crate::latent::{EditDelta, LatentEditor, LatentVector};
use crate::models::ModelBundle;
use crate::optim::AdamState;
use crate::rng::RngState;
use crate::toyworld::{OracleEditor, ToyConfig, ToyWorld};
use crate::trainer::TrainConfig;
use crate::transforms::{ParamManifest, TransformKind, TransformModule};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Checkpoint kind for a trained or initialized transform.
pub const KIND_TRANSFORM: &str = "transform";
/// Checkpoint kind standing for the toy world's closed-form oracle editor.
pub const KIND_TOY_ORACLE: &str = "toy-oracle";

/// Write `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidValue {
            field: "path".into(),
            reason: format!("{} has no file name", path.display()),
        })?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            checkpoint_dir: "checkpoints".into(),
            report_dir: "reports".into(),
        }
    }
}

/// Everything a command needs to rebuild a run.
///
/// `seed` is the single source of randomness; it overrides `train.seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// `"toy"`, or the id of an external model adapter.
    pub world: String,
    pub toy: ToyConfig,
    pub transform: TransformKind,
    /// Fixed direction length, when set.
    pub normalization: Option<f64>,
    pub train: TrainConfig,
    pub bins: BinSpec,
    pub paths: Paths,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world: "toy".into(),
            toy: ToyConfig::default(),
            transform: TransformKind::GlobalLinear,
            normalization: None,
            train: TrainConfig::toy(),
            bins: BinSpec::default(),
            paths: Paths::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config {
            field: "config".into(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            field: "config".into(),
            reason: format!("{}: {e}", path.display()),
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.world != "toy" {
            return Err(Error::Config {
                field: "world".into(),
                reason: format!("no adapter registered for `{}`", self.world),
            });
        }
        self.toy.validate()?;
        if let Some(s) = self.normalization {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config {
                    field: "normalization".into(),
                    reason: format!("{s} must be positive"),
                });
            }
        }
        self.train
            .validate(ToyWorld::NUM_ATTRIBUTES)
            .map_err(|e| match e {
                Error::Config { field, reason } => Error::Config {
                    field: format!("train.{field}"),
                    reason,
                },
                other => other,
            })?;
        self.bins.validate()
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn bundle(&self) -> Result<ModelBundle> {
        self.validate()?;
        ModelBundle::toy(self.toy.clone())
    }
}

fn encode_f32(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    STANDARD.encode(bytes)
}

fn decode_f32(field: &str, text: &str, expected: usize) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::Checkpoint(format!("{field}: {e}")))?;
    if bytes.len() != expected * 4 {
        return Err(Error::Checkpoint(format!(
            "{field}: payload holds {} bytes, manifest needs {}",
            bytes.len(),
            expected * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformHeader {
    pub kind: TransformKind,
    pub latent_dim: usize,
    pub num_attributes: usize,
    pub normalization: Option<f64>,
    pub leaky_slope: f64,
    pub manifest: ParamManifest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerPayload {
    pub step: u64,
    pub m: String,
    pub v: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: String,
    pub transform: Option<TransformHeader>,
    pub params: Option<String>,
    pub optimizer: Option<OptimizerPayload>,
    pub config: Option<RunConfig>,
    pub rng: Option<RngState>,
    /// Completed training iterations.
    #[serde(default)]
    pub iteration: u64,
}

impl Checkpoint {
    pub fn for_transform(t: &TransformModule) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            kind: KIND_TRANSFORM.into(),
            transform: Some(TransformHeader {
                kind: t.kind(),
                latent_dim: t.latent_dim(),
                num_attributes: t.num_attributes(),
                normalization: t.normalization(),
                leaky_slope: t.leaky_slope(),
                manifest: t.manifest().clone(),
            }),
            params: Some(encode_f32(t.params())),
            optimizer: None,
            config: None,
            rng: None,
            iteration: 0,
        }
    }

    pub fn toy_oracle() -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            kind: KIND_TOY_ORACLE.into(),
            transform: None,
            params: None,
            optimizer: None,
            config: None,
            rng: None,
            iteration: 0,
        }
    }

    pub fn with_optimizer(mut self, state: &AdamState) -> Self {
        self.optimizer = Some(OptimizerPayload {
            step: state.step,
            m: encode_f32(&state.m),
            v: encode_f32(&state.v),
        });
        self
    }

    pub fn with_config(mut self, config: &RunConfig) -> Self {
        self.config = Some(config.clone());
        self
    }

    pub fn with_rng(mut self, rng: RngState) -> Self {
        self.rng = Some(rng);
        self
    }

    pub fn with_iteration(mut self, iteration: u64) -> Self {
        self.iteration = iteration;
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                c.version
            )));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn transform(&self) -> Result<TransformModule> {
        if self.kind != KIND_TRANSFORM {
            return Err(Error::Checkpoint(format!("kind `{}` carries no transform", self.kind)));
        }
        let h = self
            .transform
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("missing transform header".into()))?;
        let expected = ParamManifest::for_kind(h.kind, h.latent_dim, h.num_attributes);
        if expected != h.manifest {
            return Err(Error::Checkpoint("manifest does not match transform kind and dims".into()));
        }
        let payload = self
            .params
            .as_deref()
            .ok_or_else(|| Error::Checkpoint("missing parameter payload".into()))?;
        let params = decode_f32("params", payload, h.manifest.total())?;
        TransformModule::from_parts(h.kind, h.latent_dim, h.num_attributes, h.normalization, h.leaky_slope, params)
    }

    pub fn optimizer_state(&self) -> Result<Option<AdamState>> {
        let Some(o) = &self.optimizer else {
            return Ok(None);
        };
        let n = self
            .transform
            .as_ref()
            .map(|h| h.manifest.total())
            .ok_or_else(|| Error::Checkpoint("optimizer state without transform".into()))?;
        Ok(Some(AdamState {
            step: o.step,
            m: decode_f32("optimizer.m", &o.m, n)?,
            v: decode_f32("optimizer.v", &o.v, n)?,
        }))
    }

    pub fn editor(&self) -> Result<LoadedEditor> {
        match self.kind.as_str() {
            KIND_TRANSFORM => Ok(LoadedEditor::Transform(self.transform()?)),
            KIND_TOY_ORACLE => Ok(LoadedEditor::ToyOracle),
            other => Err(Error::Checkpoint(format!("unknown checkpoint kind `{other}`"))),
        }
    }
}

/// An editor restored from a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub enum LoadedEditor {
    Transform(TransformModule),
    ToyOracle,
}

impl LoadedEditor {
    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::load(path)?.editor()
    }

    /// Fail with a dimension error unless the editor fits `bundle`.
    pub fn check_compatible(&self, bundle: &ModelBundle) -> Result<()> {
        crate::error::check_dim("editor latent dim", bundle.latent_dim(), self.latent_dim())?;
        crate::error::check_dim("editor attributes", bundle.num_attributes(), self.num_attributes())
    }
}

impl LatentEditor for LoadedEditor {
    fn latent_dim(&self) -> usize {
        match self {
            LoadedEditor::Transform(t) => t.latent_dim(),
            LoadedEditor::ToyOracle => OracleEditor.latent_dim(),
        }
    }

    fn num_attributes(&self) -> usize {
        match self {
            LoadedEditor::Transform(t) => t.num_attributes(),
            LoadedEditor::ToyOracle => OracleEditor.num_attributes(),
        }
    }

    fn edit(&self, z: &LatentVector, delta: &EditDelta) -> Result<LatentVector> {
        match self {
            LoadedEditor::Transform(t) => t.edit(z, delta),
            LoadedEditor::ToyOracle => OracleEditor.edit(z, delta),
        }
    }
}
