//! Line-based `key = value` run configuration.
//!
//! Keys are dotted (`train.lr`). A `[train]` line prefixes the keys that
//! follow it until the next header. `#` starts a comment. Relative paths
//! resolve against the directory of the file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pyrad_core::ablation::Experiment;
use pyrad_core::data::{DatasetKind, DatasetSpec, SyntheticSpec};
use pyrad_core::{LossConfig, ModelConfig, TrainConfig, WeightDecay};

/// Every accepted key with a one-line description, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "required; initialization, shuffling and perceptual-net seed"),
    ("out_dir", "output directory of `train` (overridden by --out)"),
    ("model.preset", "required; mvtec120, mnist28 or miniN (N a power of two >= 16)"),
    ("model.encoders", "number of pyramid branches, 1..=6 (default 4)"),
    ("model.backbone_weights", "checkpoint holding `backbone.*` tensors"),
    ("train.lr", "Adam step size (default 1e-4)"),
    ("train.beta1", "default 0.9"),
    ("train.beta2", "default 0.999"),
    ("train.eps", "default 1e-8"),
    ("train.weight_decay", "default 1e-4"),
    ("train.decay", "l2 or decoupled (default l2)"),
    ("train.batch_size", "default 120"),
    ("train.epochs", "default 600"),
    ("train.checkpoint_every", "epochs between checkpoints, 0 = only at the end"),
    ("loss.lambda", "perceptual weight (default 1)"),
    ("loss.perceptual_channels", "comma-separated widths of the feature net, first 3"),
    ("loss.perceptual_seed", "defaults to `seed`"),
    ("loss.perceptual_weights", "checkpoint holding `perceptual.*` tensors"),
    ("data.kind", "required; idx, directory or synthetic"),
    ("data.root", "required for idx and directory"),
    ("data.normal_class", "digit treated as normal (idx, default 0)"),
    ("data.synthetic.seed", "default 1"),
    ("data.synthetic.n_train", "default 64"),
    ("data.synthetic.n_test_normal", "default 32"),
    ("data.synthetic.n_test_anomalous", "default 32"),
    ("data.synthetic.size", "default 32"),
];

const REQUIRED: &[&str] = &["seed", "model.preset", "data.kind"];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub preset: String,
    pub encoders: usize,
    pub model: ModelConfig,
    pub backbone_weights: Option<PathBuf>,
    pub train: TrainConfig,
    pub loss: LossConfig,
    /// `None` follows `seed`.
    pub perceptual_seed: Option<u64>,
    pub data: DatasetSpec,
}

/// All problems found in one file, each prefixed with its line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<String>);

impl std::fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0.join("\n"))
    }
}

struct Entry {
    line: usize,
    value: String,
}

struct Fields<'a> {
    entries: &'a BTreeMap<String, Entry>,
    base: &'a Path,
    errors: Vec<String>,
}

impl Fields<'_> {
    fn raw(&self, key: &str) -> Option<&Entry> {
        self.entries.get(key)
    }

    fn get<T: FromStr>(&mut self, key: &str, default: T) -> T
    where
        T::Err: std::fmt::Display,
    {
        self.opt(key).unwrap_or(default)
    }

    fn opt<T: FromStr>(&mut self, key: &str) -> Option<T>
    where
        T::Err: std::fmt::Display,
    {
        let e = self.entries.get(key)?;
        match e.value.parse() {
            Ok(v) => Some(v),
            Err(err) => {
                self.errors.push(format!("line {}: `{key}`: invalid value `{}`: {err}", e.line, e.value));
                None
            }
        }
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.entries.get(key).map(|e| self.base.join(&e.value))
    }

    fn ensure(&mut self, key: &str, ok: bool, msg: &str) {
        if let (false, Some(e)) = (ok, self.entries.get(key)) {
            self.errors.push(format!("line {}: `{key}`: {msg}, got `{}`", e.line, e.value));
        }
    }

    fn check(&mut self, key: &str, r: pyrad_core::Result<()>) {
        if let Err(e) = r {
            match self.entries.get(key) {
                Some(entry) => self.errors.push(format!("line {}: `{key}`: {e}", entry.line)),
                None => self.errors.push(format!("`{key}`: {e}")),
            }
        }
    }
}

fn parse_list(s: &str) -> Result<Vec<usize>, std::num::ParseIntError> {
    s.split(',').map(|p| p.trim().parse()).collect()
}

impl RunConfig {
    pub fn read(path: &Path) -> Result<Self, ConfigErrors> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigErrors(vec![format!("cannot read config {}: {e}", path.display())]))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|ConfigErrors(errs)| {
            ConfigErrors(errs.into_iter().map(|e| format!("{}: {e}", path.display())).collect())
        })
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigErrors> {
        let mut entries = BTreeMap::new();
        let mut errors = Vec::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let Some((k, v)) = content.split_once('=') else {
                errors.push(format!("line {line}: expected `key = value`, got `{content}`"));
                continue;
            };
            let (k, v) = (k.trim(), v.trim());
            let key = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
            if !KEYS.iter().any(|(name, _)| *name == key) {
                errors.push(format!("line {line}: unknown key `{key}`"));
                continue;
            }
            if let Some(prev) = entries.get(&key) {
                let prev: &Entry = prev;
                errors.push(format!("line {line}: duplicate key `{key}` (first set on line {})", prev.line));
                continue;
            }
            entries.insert(key, Entry { line, value: v.to_string() });
        }
        let mut missing: Vec<&str> = REQUIRED.iter().copied().filter(|k| !entries.contains_key(*k)).collect();
        let synthetic = entries.get("data.kind").is_some_and(|e| e.value == "synthetic");
        if entries.contains_key("data.kind") && !synthetic && !entries.contains_key("data.root") {
            missing.push("data.root");
        }
        if !missing.is_empty() {
            errors.push(format!("missing required keys: {}", missing.join(", ")));
        }

        let mut f = Fields { entries: &entries, base, errors };
        let seed = f.get("seed", 0u64);
        let preset: String = f.get("model.preset", String::new());
        let encoders = f.get("model.encoders", 4usize);
        let mut model = ModelConfig::miniature(16).expect("valid preset");
        if f.raw("model.preset").is_some() {
            match ModelConfig::preset(&preset) {
                Ok(m) => match m.with_encoders(encoders) {
                    Ok(m) => model = m,
                    Err(e) => f.check("model.encoders", Err(e)),
                },
                Err(e) => f.check("model.preset", Err(e)),
            }
        }

        let mut train = TrainConfig { seed, ..Default::default() };
        train.adam.lr = f.get("train.lr", train.adam.lr);
        train.adam.beta1 = f.get("train.beta1", train.adam.beta1);
        train.adam.beta2 = f.get("train.beta2", train.adam.beta2);
        train.adam.eps = f.get("train.eps", train.adam.eps);
        train.adam.weight_decay = f.get("train.weight_decay", train.adam.weight_decay);
        train.adam.decay = f.get::<WeightDecay>("train.decay", train.adam.decay);
        train.batch_size = f.get("train.batch_size", train.batch_size);
        train.epochs = f.get("train.epochs", train.epochs);
        train.checkpoint_every = f.get("train.checkpoint_every", train.checkpoint_every);
        let a = train.adam;
        f.ensure("train.lr", a.lr.is_finite() && a.lr > 0.0, "must be positive");
        f.ensure("train.beta1", (0.0..1.0).contains(&a.beta1), "must lie in [0, 1)");
        f.ensure("train.beta2", (0.0..1.0).contains(&a.beta2), "must lie in [0, 1)");
        f.ensure("train.eps", a.eps.is_finite() && a.eps > 0.0, "must be positive");
        f.ensure("train.weight_decay", a.weight_decay.is_finite() && a.weight_decay >= 0.0, "must be >= 0");
        f.ensure("train.batch_size", train.batch_size >= 2, "must be >= 2 for batch norm");
        f.ensure("train.epochs", train.epochs >= 1, "must be >= 1");

        let perceptual_seed = f.opt("loss.perceptual_seed");
        let mut loss = LossConfig {
            perceptual_seed: perceptual_seed.unwrap_or(seed),
            perceptual_weights: f.path("loss.perceptual_weights"),
            ..Default::default()
        };
        loss.lambda = f.get("loss.lambda", loss.lambda);
        if let Some(e) = f.raw("loss.perceptual_channels") {
            let (line, value) = (e.line, e.value.clone());
            match parse_list(&value) {
                Ok(c) => loss.perceptual_channels = c,
                Err(err) => f.errors.push(format!("line {line}: `loss.perceptual_channels`: invalid list `{value}`: {err}")),
            }
        }
        f.ensure("loss.lambda", loss.lambda.is_finite() && loss.lambda >= 0.0, "must be finite and >= 0");
        let ch = &loss.perceptual_channels;
        f.ensure("loss.perceptual_channels", ch.first() == Some(&3) && !ch.contains(&0), "must start with 3 and be positive");

        let defaults = SyntheticSpec::default();
        let synthetic_spec = SyntheticSpec {
            seed: f.get("data.synthetic.seed", defaults.seed),
            n_train: f.get("data.synthetic.n_train", defaults.n_train),
            n_test_normal: f.get("data.synthetic.n_test_normal", defaults.n_test_normal),
            n_test_anomalous: f.get("data.synthetic.n_test_anomalous", defaults.n_test_anomalous),
            size: f.get("data.synthetic.size", defaults.size),
        };
        let data = DatasetSpec {
            kind: f.get("data.kind", DatasetKind::Synthetic),
            root: f.path("data.root").unwrap_or_default(),
            normal_class: f.get("data.normal_class", 0u8),
            resize_to: Some(model.input_size),
            synthetic: synthetic_spec,
        };
        let r = data.validate();
        f.check("data.normal_class", r);

        let out = RunConfig {
            seed,
            out_dir: f.path("out_dir"),
            preset,
            encoders,
            model,
            backbone_weights: f.path("model.backbone_weights"),
            train,
            loss,
            perceptual_seed,
            data,
        };
        if f.errors.is_empty() {
            Ok(out)
        } else {
            Err(ConfigErrors(f.errors))
        }
    }

    /// Replace the run seed; the perceptual seed follows unless it was set.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        if self.perceptual_seed.is_none() {
            self.loss.perceptual_seed = seed;
        }
        self
    }

    pub fn experiment(&self) -> Experiment {
        Experiment {
            model: self.model.clone(),
            train: self.train.clone(),
            loss: self.loss.clone(),
            init_seed: self.seed,
            backbone_weights: self.backbone_weights.clone(),
        }
    }

    /// Fully resolved form; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        if let Some(p) = &self.out_dir {
            kv("out_dir", p.display().to_string());
        }
        kv("model.preset", self.preset.clone());
        kv("model.encoders", self.encoders.to_string());
        if let Some(p) = &self.backbone_weights {
            kv("model.backbone_weights", p.display().to_string());
        }
        let a = &self.train.adam;
        kv("train.lr", a.lr.to_string());
        kv("train.beta1", a.beta1.to_string());
        kv("train.beta2", a.beta2.to_string());
        kv("train.eps", a.eps.to_string());
        kv("train.weight_decay", a.weight_decay.to_string());
        kv("train.decay", a.decay.to_string());
        kv("train.batch_size", self.train.batch_size.to_string());
        kv("train.epochs", self.train.epochs.to_string());
        kv("train.checkpoint_every", self.train.checkpoint_every.to_string());
        kv("loss.lambda", self.loss.lambda.to_string());
        let ch: Vec<String> = self.loss.perceptual_channels.iter().map(usize::to_string).collect();
        kv("loss.perceptual_channels", ch.join(","));
        if let Some(p) = self.perceptual_seed {
            kv("loss.perceptual_seed", p.to_string());
        }
        if let Some(p) = &self.loss.perceptual_weights {
            kv("loss.perceptual_weights", p.display().to_string());
        }
        let kind = match self.data.kind {
            DatasetKind::Idx => "idx",
            DatasetKind::Directory => "directory",
            DatasetKind::Synthetic => "synthetic",
        };
        kv("data.kind", kind.into());
        if self.data.kind != DatasetKind::Synthetic {
            kv("data.root", self.data.root.display().to_string());
        }
        kv("data.normal_class", self.data.normal_class.to_string());
        let sy = &self.data.synthetic;
        kv("data.synthetic.seed", sy.seed.to_string());
        kv("data.synthetic.n_train", sy.n_train.to_string());
        kv("data.synthetic.n_test_normal", sy.n_test_normal.to_string());
        kv("data.synthetic.n_test_anomalous", sy.n_test_anomalous.to_string());
        kv("data.synthetic.size", sy.size.to_string());
        s
    }
}
