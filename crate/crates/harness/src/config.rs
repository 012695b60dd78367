//! Experiment configuration: one TOML file, schema-validated with unknown
//! keys rejected. Every artifact a run emits carries the hash of the parsed
//! config plus the seed, so a run directory is reproducible from its file.

use anomap_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Paper-scale epoch counts (1000/2000/4000) instead of desk-scale.
    pub paper_scale: bool,
    pub data: DataConfig,
    pub augmentation: AugmentationConfig,
    pub vqvae: VqVaeSection,
    pub rae: RaeSection,
    pub ddim: DdimSection,
    pub classifier: ClassifierSection,
    pub guidance: GuidanceSection,
    pub anomaly: AnomalySection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            out_dir: PathBuf::from("runs/default"),
            paper_scale: false,
            data: DataConfig::default(),
            augmentation: AugmentationConfig::default(),
            vqvae: VqVaeSection::default(),
            rae: RaeSection::default(),
            ddim: DdimSection::default(),
            classifier: ClassifierSection::default(),
            guidance: GuidanceSection::default(),
            anomaly: AnomalySection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// EU subjects in the training split (the split itself is EU-only).
    pub train_eu: usize,
    /// EU subjects in the evaluation split.
    pub eval_eu: usize,
    /// Subjects per DS subgroup (noAD, prodromal, AD) in the evaluation split.
    pub eval_ds_per_group: usize,
    /// Slices per subject (2k+1 around the MSP); 5 matches the protocol.
    pub slices_per_subject: usize,
    /// Dataset tag used in metric tables.
    pub dataset_tag: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_eu: 24,
            eval_eu: 8,
            eval_ds_per_group: 6,
            slices_per_subject: 5,
            dataset_tag: "phantom".to_string(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    /// Rotation half-range in degrees applied during training.
    pub rotation_deg: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig { rotation_deg: 10.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct VqVaeSection {
    pub epochs: usize,
    pub paper_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for VqVaeSection {
    fn default() -> Self {
        VqVaeSection {
            epochs: 80,
            paper_epochs: 1000,
            learning_rate: 5e-4,
            batch_size: 16,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RaeSection {
    pub epochs: usize,
    pub paper_epochs: usize,
    pub learning_rate: f64,
    pub learning_rate_min: f64,
    pub batch_size: usize,
}

impl Default for RaeSection {
    fn default() -> Self {
        RaeSection {
            epochs: 45,
            paper_epochs: 2000,
            learning_rate: 5e-4,
            learning_rate_min: 1e-6,
            batch_size: 16,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DdimSection {
    pub epochs: usize,
    pub paper_epochs: usize,
    /// Desk-scale rate; the paper-scale value is 2e-5.
    pub learning_rate: f64,
    pub paper_learning_rate: f64,
    pub batch_size: usize,
    pub t_total: usize,
    pub inference_steps: usize,
}

impl Default for DdimSection {
    fn default() -> Self {
        DdimSection {
            epochs: 80,
            paper_epochs: 4000,
            learning_rate: 7e-4,
            paper_learning_rate: 2e-5,
            batch_size: 16,
            t_total: 1000,
            inference_steps: 100,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    pub epochs: usize,
    pub paper_epochs: usize,
    pub learning_rate: f64,
    pub paper_learning_rate: f64,
    pub batch_size: usize,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        ClassifierSection {
            epochs: 50,
            paper_epochs: 4000,
            learning_rate: 6e-4,
            paper_learning_rate: 2e-5,
            batch_size: 16,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSection {
    /// Noise level L in inference-step units.
    pub noise_level: usize,
    /// Classifier gradient scale s.
    pub scale: f64,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        GuidanceSection {
            noise_level: 25,
            scale: 2.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AnomalySection {
    pub w_pix: f64,
    pub w_per: f64,
}

impl Default for AnomalySection {
    fn default() -> Self {
        AnomalySection { w_pix: 0.5, w_per: 0.5 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Cap on evaluated subjects per split (0 = all).
    pub max_subjects: usize,
    pub histogram_bins: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            max_subjects: 0,
            histogram_bins: 256,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Other(format!("{}: {e}", path.display())))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::Other(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.slices_per_subject % 2 == 0 || self.data.slices_per_subject == 0 {
            return Err(Error::validation(
                "data.slices_per_subject",
                "must be odd (2k+1 slices around the MSP)",
            ));
        }
        if self.data.train_eu == 0 || self.data.eval_eu == 0 {
            return Err(Error::validation("data", "train_eu and eval_eu must be >= 1"));
        }
        if (self.anomaly.w_pix + self.anomaly.w_per - 1.0).abs() > 1e-9 {
            return Err(Error::validation("anomaly", "w_pix + w_per must equal 1"));
        }
        if self.ddim.t_total % self.ddim.inference_steps != 0 {
            return Err(Error::validation(
                "ddim.inference_steps",
                "must divide t_total evenly",
            ));
        }
        if self.guidance.noise_level < 1 || self.guidance.noise_level > self.ddim.inference_steps {
            return Err(Error::validation(
                "guidance.noise_level",
                "must be within 1..=ddim.inference_steps",
            ));
        }
        if self.eval.histogram_bins < 2 {
            return Err(Error::validation("eval.histogram_bins", "must be >= 2"));
        }
        Ok(())
    }

    /// Stable hash of the parsed config (canonical JSON of the struct).
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn epochs_for(&self, family: ModelFamily) -> usize {
        match (family, self.paper_scale) {
            (ModelFamily::VqVae, false) => self.vqvae.epochs,
            (ModelFamily::VqVae, true) => self.vqvae.paper_epochs,
            (ModelFamily::Rae, false) => self.rae.epochs,
            (ModelFamily::Rae, true) => self.rae.paper_epochs,
            (ModelFamily::Ddim, false) => self.ddim.epochs,
            (ModelFamily::Ddim, true) => self.ddim.paper_epochs,
            (ModelFamily::Classifier, false) => self.classifier.epochs,
            (ModelFamily::Classifier, true) => self.classifier.paper_epochs,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    VqVae,
    Rae,
    Ddim,
    Classifier,
}

impl ModelFamily {
    pub fn name(self) -> &'static str {
        match self {
            ModelFamily::VqVae => "vqvae",
            ModelFamily::Rae => "rae",
            ModelFamily::Ddim => "ddim",
            ModelFamily::Classifier => "classifier",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vqvae" => Ok(ModelFamily::VqVae),
            "rae" => Ok(ModelFamily::Rae),
            "ddim" => Ok(ModelFamily::Ddim),
            "classifier" => Ok(ModelFamily::Classifier),
            other => Err(Error::validation(
                "family",
                format!("unknown model family '{other}' (vqvae|rae|ddim|classifier)"),
            )),
        }
    }
}

/// Training variant of the histogram ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainVariant {
    Base,
    HTrained,
}

impl TrainVariant {
    pub fn name(self) -> &'static str {
        match self {
            TrainVariant::Base => "base",
            TrainVariant::HTrained => "h_trained",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(TrainVariant::Base),
            "h_trained" => Ok(TrainVariant::HTrained),
            other => Err(Error::validation(
                "variant",
                format!("unknown variant '{other}' (base|h_trained)"),
            )),
        }
    }
}

/// The four evaluation variants of the histogram ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationVariant {
    Base,
    HTrained,
    HistM,
    HTrainedPlusHistM,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::Base,
        AblationVariant::HTrained,
        AblationVariant::HistM,
        AblationVariant::HTrainedPlusHistM,
    ];

    pub fn trained_on_template(self) -> bool {
        matches!(self, AblationVariant::HTrained | AblationVariant::HTrainedPlusHistM)
    }

    pub fn output_matched(self) -> bool {
        matches!(self, AblationVariant::HistM | AblationVariant::HTrainedPlusHistM)
    }

    pub fn label(self, family: &str) -> String {
        let fam = match family {
            "vqvae" => "VQ-VAE",
            "rae" => "RAE",
            "ddim" => "DM",
            other => other,
        };
        match self {
            AblationVariant::Base => fam.to_string(),
            AblationVariant::HTrained => format!("H{fam}"),
            AblationVariant::HistM => format!("{fam} + HIST M"),
            AblationVariant::HTrainedPlusHistM => format!("H{fam} + HIST M"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let toml_text = "seed = 1\nnot_a_key = true\n";
        let parsed: std::result::Result<ExperimentConfig, _> = toml::from_str(toml_text);
        assert!(parsed.is_err());
    }

    #[test]
    fn section_unknown_keys_rejected() {
        let toml_text = "[vqvae]\nepochs = 5\nbogus = 1\n";
        let parsed: std::result::Result<ExperimentConfig, _> = toml::from_str(toml_text);
        assert!(parsed.is_err());
    }

    #[test]
    fn hash_stable_and_sensitive() {
        let a = ExperimentConfig::default();
        let mut b = ExperimentConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.seed = 43;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn even_slice_count_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.data.slices_per_subject = 4;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn ablation_labels() {
        assert_eq!(AblationVariant::Base.label("vqvae"), "VQ-VAE");
        assert_eq!(AblationVariant::HTrained.label("rae"), "HRAE");
        assert_eq!(AblationVariant::HistM.label("vqvae"), "VQ-VAE + HIST M");
        assert_eq!(
            AblationVariant::HTrainedPlusHistM.label("rae"),
            "HRAE + HIST M"
        );
        assert_eq!(AblationVariant::ALL.len(), 4);
    }
}
