use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use dgad::autograd::PadMode;
use dgad::data_io::DatasetSpec;
use dgad::evaluation::{AblationVariant, EvalOptions, Scorer};
use dgad::pretext::Protocol;
use dgad::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScoreChoice {
    Rec,
    Dir,
    #[default]
    Both,
}

impl ScoreChoice {
    pub fn scorers(self) -> Vec<Scorer> {
        match self {
            ScoreChoice::Rec => vec![Scorer::SRec],
            ScoreChoice::Dir => vec![Scorer::SDir],
            ScoreChoice::Both => vec![Scorer::SRec, Scorer::SDir],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub run_dir: PathBuf,
    /// Normal classes to train and test, one model each.
    pub classes: Vec<u32>,
    pub score: ScoreChoice,
    /// Also report discriminator transformation accuracy on normal-only and all test images.
    pub discriminator_accuracy: bool,
    pub variants: Vec<AblationVariant>,
    /// Run ablation cells on separate threads.
    pub parallel: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            run_dir: PathBuf::from("runs/default"),
            classes: vec![0],
            score: ScoreChoice::Both,
            discriminator_accuracy: false,
            variants: AblationVariant::ALL.to_vec(),
            parallel: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub data: DatasetSpec,
    pub eval: EvalOptions,
    pub run: RunSection,
}

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub test_object: Option<u32>,
    pub protocol: Option<u8>,
    pub padding: Option<PadMode>,
    pub coord: bool,
    pub no_compactness: bool,
    pub score: Option<ScoreChoice>,
    pub seed: Option<u64>,
    pub run_dir: Option<PathBuf>,
    pub iterations: Option<u64>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn apply(mut self, o: &Overrides) -> Result<Self> {
        if let Some(k) = o.test_object {
            self.run.classes = vec![k];
        }
        if let Some(p) = o.protocol {
            self.train.protocol = Protocol::from_number(p)?;
        }
        if let Some(p) = o.padding {
            self.train.net.padding_mode = p;
        }
        if o.coord {
            self.train.net.use_coord = true;
        }
        if o.no_compactness {
            self.train.compactness_enabled = false;
        }
        if let Some(s) = o.score {
            self.run.score = s;
        }
        if let Some(s) = o.seed {
            self.train.seed = s;
        }
        if let Some(d) = &o.run_dir {
            self.run.run_dir = d.clone();
        }
        if let Some(n) = o.iterations {
            self.train.iterations = n;
            self.train.epochs = None;
        }
        self.resolved()
    }

    /// Validate cross-section consistency and fill derived fields.
    pub fn resolved(mut self) -> Result<Self> {
        self.train = self.train.resolved()?;
        if self.data.image_size != self.train.net.image_size {
            bail!(
                "data.image_size {} differs from train.net.image_size {}",
                self.data.image_size,
                self.train.net.image_size
            );
        }
        match self.data.channels {
            None => self.data.channels = Some(self.train.net.image_channels),
            Some(c) if c != self.train.net.image_channels => bail!(
                "data.channels {c} differs from train.net.image_channels {}",
                self.train.net.image_channels
            ),
            Some(_) => {}
        }
        if self.run.classes.is_empty() {
            bail!("run.classes must name at least one normal class");
        }
        if self.eval.batch_size == 0 {
            bail!("eval.batch_size must be positive");
        }
        Ok(self)
    }

    pub fn class_dir(&self, class: u32) -> PathBuf {
        self.run.run_dir.join(format!("class_{class}"))
    }

    pub fn results_dir(&self, class: u32) -> PathBuf {
        self.run.run_dir.join("results").join(format!("class_{class}"))
    }
}
