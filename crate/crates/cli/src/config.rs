//! Run configuration: one versioned TOML file, resolved against a profile
//! preset per section, then overridden from the command line.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use skinmap_core::anchors::AnchorTrainConfig;
use skinmap_core::heatmap::DEFAULT_ALPHA;
use skinmap_core::pavit::{BackboneSource, ModelConfig, TrainConfig};
use skinmap_core::synthgen::SynthConfig;

pub const CONFIG_VERSION: i64 = 1;

const SECTIONS: [&str; 7] = ["synth", "augment", "model", "train", "anchors", "eval", "heatmap"];

/// Seeds that come from the global `seed` and may not be set per section.
const DERIVED_SEEDS: [(&str, &str); 4] = [
    ("synth", "seed"),
    ("model", "init_seed"),
    ("train", "seed"),
    ("anchors", "seed"),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub enable_lighting: bool,
    pub enable_geometric: bool,
    /// Augmentation stream seed; the global seed when unset.
    pub seed: Option<u64>,
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self {
            enable_lighting: false,
            enable_geometric: true,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorsSection {
    /// Synthetic (landmarks, anchors) pairs drawn when no pairs file is given.
    pub train_pairs: usize,
    pub eval_pairs: usize,
    pub hidden: usize,
    pub embed: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for AnchorsSection {
    fn default() -> Self {
        let d = AnchorTrainConfig::default();
        Self {
            train_pairs: 512,
            eval_pairs: 128,
            hidden: d.hidden,
            embed: d.embed,
            epochs: d.epochs,
            batch: d.batch,
            lr: d.lr,
        }
    }
}

impl AnchorsSection {
    pub fn train_config(&self, seed: u64) -> AnchorTrainConfig {
        AnchorTrainConfig {
            hidden: self.hidden,
            embed: self.embed,
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub bin_width: f64,
    /// Panelists held out by `ablation`; the last third when empty.
    pub test_panelists: Vec<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            bin_width: 1.0,
            test_panelists: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapSection {
    pub alpha: f64,
    pub legend: bool,
    pub legend_height: u32,
}

impl Default for HeatmapSection {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            legend: true,
            legend_height: 24,
        }
    }
}

/// Fully resolved configuration, as recorded in run manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: i64,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub synth: SynthConfig,
    pub augment: AugmentSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub anchors: AnchorsSection,
    pub eval: EvalSection,
    pub heatmap: HeatmapSection,
}

fn model_profile(name: &str) -> Result<ModelConfig> {
    match name {
        "toy" => Ok(ModelConfig::toy()),
        "tiny" => Ok(ModelConfig::tiny()),
        "paper" | "full" => Ok(ModelConfig::paper()),
        other => bail!("unknown model profile {other:?} (toy, tiny, full)"),
    }
}

fn train_profile(name: &str) -> Result<TrainConfig> {
    match name {
        "toy" | "tiny" => Ok(TrainConfig::toy()),
        "paper" | "full" => Ok(TrainConfig::default()),
        other => bail!("unknown train profile {other:?} (toy, full)"),
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn resolve<T: Serialize + DeserializeOwned>(name: &str, base: &T, over: Table) -> Result<T> {
    let mut table = Table::try_from(base).with_context(|| format!("serializing [{name}] defaults"))?;
    merge(&mut table, over);
    table
        .try_into()
        .map_err(|e: toml::de::Error| anyhow!("[{name}]: {}", e.message()))
}

fn take_table(root: &mut Table, key: &str) -> Result<Table> {
    match root.remove(key) {
        None => Ok(Table::new()),
        Some(Value::Table(t)) => Ok(t),
        Some(other) => bail!("[{key}] must be a table, found {}", other.type_str()),
    }
}

fn take_profile(section: &mut Table, name: &str) -> Result<String> {
    match section.remove("profile") {
        None => Ok("toy".into()),
        Some(Value::String(s)) => Ok(s),
        Some(_) => bail!("[{name}] profile must be a string"),
    }
}

/// Parses `section.key=value` (the value in TOML syntax; bare words are strings).
pub fn parse_override(s: &str) -> Result<(Vec<String>, Value)> {
    let (path, raw) = s
        .split_once('=')
        .ok_or_else(|| anyhow!("override {s:?} is not of the form key=value"))?;
    let path: Vec<String> = path.trim().split('.').map(str::to_string).collect();
    if path.iter().any(|p| p.is_empty()) {
        bail!("override {s:?} has an empty key");
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    };
    Ok((path, value))
}

fn apply_override(root: &mut Table, path: &[String], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("nonempty path");
    let mut cur = root;
    for p in parents {
        let entry = cur.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override path {} crosses a non-table", path.join(".")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Overrides from flags, applied on top of the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub set: Vec<String>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, ov: &Overrides) -> Result<Self> {
        let root: Table = text.parse().map_err(|e: toml::de::Error| anyhow!("config: {}", e.message()))?;
        Self::from_table(root, ov)
    }

    pub fn load(path: Option<&Path>, ov: &Overrides) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::from_toml_str(&text, ov).with_context(|| format!("in {}", p.display()))
            }
            None => {
                let mut root = Table::new();
                root.insert("version".into(), Value::Integer(CONFIG_VERSION));
                Self::from_table(root, ov)
            }
        }
    }

    fn from_table(mut root: Table, ov: &Overrides) -> Result<Self> {
        for s in &ov.set {
            let (path, value) = parse_override(s)?;
            apply_override(&mut root, &path, value)?;
        }
        match root.remove("version") {
            Some(Value::Integer(CONFIG_VERSION)) => {}
            Some(v) => bail!("unsupported config version {v}; this build reads version {CONFIG_VERSION}"),
            None => bail!("config is missing `version = {CONFIG_VERSION}`"),
        }
        let seed = match root.remove("seed") {
            None => 0,
            Some(Value::Integer(s)) if s >= 0 => s as u64,
            Some(v) => bail!("seed must be a nonnegative integer, got {v}"),
        };
        let seed = ov.seed.unwrap_or(seed);
        let output_dir = match root.remove("output_dir") {
            None => PathBuf::from("runs"),
            Some(Value::String(s)) => PathBuf::from(s),
            Some(v) => bail!("output_dir must be a string, got {v}"),
        };
        let output_dir = ov.output_dir.clone().unwrap_or(output_dir);

        let mut sections: Vec<Table> = SECTIONS
            .iter()
            .map(|s| take_table(&mut root, s))
            .collect::<Result<_>>()?;
        if let Some(k) = root.keys().next() {
            bail!("unknown top-level key {k:?}");
        }
        for (sec, key) in DERIVED_SEEDS {
            let idx = SECTIONS.iter().position(|s| *s == sec).expect("known section");
            if sections[idx].contains_key(key) {
                bail!("[{sec}] {key} is derived from the global seed; set `seed` instead");
            }
        }
        let train_idx = SECTIONS.iter().position(|s| *s == "train").expect("known section");
        if let Some(Value::Table(flags)) = sections[train_idx].get("flags") {
            for key in ["use_augmentation", "use_lighting_augmentation"] {
                if flags.contains_key(key) {
                    bail!("[train.flags] {key} is set through the [augment] section");
                }
            }
        }
        let [synth, augment, mut model, mut train, anchors, eval, heatmap]: [Table; 7] =
            std::mem::take(&mut sections).try_into().expect("seven sections");
        let model_base = model_profile(&take_profile(&mut model, "model")?)?;
        let train_base = train_profile(&take_profile(&mut train, "train")?)?;

        let mut cfg = RunConfig {
            version: CONFIG_VERSION,
            seed,
            output_dir,
            synth: resolve("synth", &SynthConfig::default(), synth)?,
            augment: resolve("augment", &AugmentSection::default(), augment)?,
            model: resolve("model", &model_base, model)?,
            train: resolve("train", &train_base, train)?,
            anchors: resolve("anchors", &AnchorsSection::default(), anchors)?,
            eval: resolve("eval", &EvalSection::default(), eval)?,
            heatmap: resolve("heatmap", &HeatmapSection::default(), heatmap)?,
        };
        cfg.synth.seed = seed;
        cfg.model.init_seed = seed;
        cfg.train.seed = seed;
        cfg.train.augment_seed = cfg.augment.seed;
        cfg.train.flags.use_augmentation = cfg.augment.enable_geometric;
        cfg.train.flags.use_lighting_augmentation = cfg.augment.enable_lighting;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads back a resolved config written by [`RunConfig::to_toml`].
    #[cfg(test)]
    pub fn from_snapshot(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| anyhow!("config snapshot: {}", e.message()))?;
        if cfg.version != CONFIG_VERSION {
            bail!("unsupported snapshot version {}", cfg.version);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate().context("[synth]")?;
        self.model.validate().context("[model]")?;
        self.train.validate().context("[train]")?;
        if let BackboneSource::Safetensors(p) = BackboneSource::parse(&self.model.backbone.source)? {
            if !Path::new(&p).is_file() {
                bail!("[model] backbone weights {p} do not exist");
            }
        }
        if !(self.eval.bin_width > 0.0) {
            bail!("[eval] bin_width must be positive");
        }
        if !(0.0..=1.0).contains(&self.heatmap.alpha) {
            bail!("[heatmap] alpha must lie in [0, 1]");
        }
        if self.anchors.train_pairs == 0 || self.anchors.eval_pairs == 0 {
            bail!("[anchors] pair counts must be positive");
        }
        Ok(())
    }

    pub fn anchor_config(&self) -> AnchorTrainConfig {
        self.anchors.train_config(self.seed)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing resolved config")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::from_toml_str(text, &Overrides::default())
    }

    #[test]
    fn minimal_file_resolves_to_toy_profile() {
        let c = parse("version = 1").unwrap();
        assert_eq!(c.model, ModelConfig::toy());
        assert_eq!(c.train.lr, TrainConfig::toy().lr);
        assert_eq!(c.eval.bin_width, 1.0);
        assert_eq!(c.heatmap.alpha, 0.6);
    }

    #[test]
    fn partial_section_keeps_profile_defaults() {
        let c = parse("version = 1\n[model]\nprofile = \"full\"\n[model.backbone]\ndepth = 6\n").unwrap();
        assert_eq!(c.model.backbone.depth, 6);
        assert_eq!(c.model.backbone.dim, 768);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse("version = 1\nbogus = 3").is_err());
        assert!(parse("version = 1\n[train]\nlearning_rate = 0.1").is_err());
        assert!(parse("version = 1\n[nope]\nx = 1").is_err());
        assert!(parse("version = 1\n[model.backbone]\nwidth = 3").is_err());
    }

    #[test]
    fn version_is_required() {
        assert!(parse("seed = 3").is_err());
        assert!(parse("version = 2").is_err());
    }

    #[test]
    fn global_seed_reaches_every_section() {
        let c = RunConfig::from_toml_str(
            "version = 1\nseed = 5",
            &Overrides {
                seed: Some(9),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!((c.seed, c.synth.seed, c.train.seed, c.model.init_seed), (9, 9, 9, 9));
        assert_eq!(c.anchor_config().seed, 9);
        assert!(parse("version = 1\n[train]\nseed = 2").is_err());
        assert!(parse("version = 1\n[train.flags]\nuse_augmentation = false").is_err());
    }

    #[test]
    fn set_overrides_file_values() {
        let ov = Overrides {
            set: vec!["train.epochs=3".into(), "synth.lightings=[\"white\"]".into(), "eval.bin_width=2.5".into()],
            ..Default::default()
        };
        let c = RunConfig::from_toml_str("version = 1\n[train]\nepochs = 40", &ov).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.eval.bin_width, 2.5);
        assert_eq!(c.synth.lightings.len(), 1);
        assert!(parse_override("nokey").is_err());
        assert_eq!(parse_override("train.kind=sh").unwrap().1, Value::String("sh".into()));
    }

    #[test]
    fn augment_section_drives_flags() {
        let c = parse("version = 1\n[augment]\nenable_lighting = true\nenable_geometric = false\nseed = 4").unwrap();
        assert!(c.train.flags.use_lighting_augmentation);
        assert!(!c.train.flags.use_augmentation);
        assert_eq!(c.train.augment_seed, Some(4));
    }

    #[test]
    fn validation_runs_before_compute() {
        assert!(parse("version = 1\n[train]\nbatch = 3").is_err());
        assert!(parse("version = 1\n[heatmap]\nalpha = 2.0").is_err());
        assert!(parse("version = 1\n[model.backbone]\nsource = \"safetensors:/no/such/file\"").is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let c = parse("version = 1\nseed = 3\n[train]\nkind = \"sh\"").unwrap();
        assert_eq!(RunConfig::from_snapshot(&c.to_toml().unwrap()).unwrap(), c);
    }
}
