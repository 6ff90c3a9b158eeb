//! Flat `key = value` configuration files.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Training keys use the [`TrainConfig`] field names. Data and encoder keys
//! carry `data.` / `encoder.` prefixes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::encoders::{MlpConfig, VitConfig};
use crate::error::{Error, Result};
use crate::synth::{ClusterModel, ImageClassSpec, SphereClusterSpec};

/// Parses `key = value` text, rejecting malformed and duplicate keys.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = match line.find('#') {
            Some(i) => &line[..i],
            None => line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
        }
    }
    Ok(out)
}

/// Typed, consuming view over parsed keys; leftovers are reported as unknown.
pub(crate) struct Keys(BTreeMap<String, String>);

impl Keys {
    pub(crate) fn new(map: BTreeMap<String, String>) -> Self {
        Keys(map)
    }

    pub(crate) fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.0.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`"))),
        }
    }

    pub(crate) fn or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.take(key)?.unwrap_or(default))
    }

    pub(crate) fn require<T: FromStr>(&mut self, key: &str) -> Result<T> {
        self.take(key)?
            .ok_or_else(|| Error::Config(format!("missing key `{key}`")))
    }

    pub(crate) fn has(&self, key: &str) -> bool {
        self.0.contains_key(key)
    }

    pub(crate) fn finish(self) -> Result<()> {
        if let Some(k) = self.0.keys().next() {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
        Ok(())
    }
}

/// Batch size per iteration: `size` or `size, size@iteration, ...`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchSchedule(Vec<(u64, usize)>);

impl BatchSchedule {
    pub fn constant(size: usize) -> Self {
        BatchSchedule(vec![(0, size)])
    }

    pub fn at(&self, iteration: u64) -> usize {
        self.0
            .iter()
            .rev()
            .find(|(start, _)| *start <= iteration)
            .map(|&(_, s)| s)
            .unwrap_or(self.0[0].1)
    }
}

impl FromStr for BatchSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut out = Vec::new();
        for (i, part) in s.split(',').enumerate() {
            let part = part.trim();
            let (size, start) = match part.split_once('@') {
                Some((a, b)) => (a.trim(), b.trim().parse::<u64>().ok()),
                None if i == 0 => (part, Some(0)),
                None => (part, None),
            };
            let size: usize = size
                .parse()
                .ok()
                .filter(|&s| s > 0)
                .ok_or_else(|| Error::Config(format!("batch_size: bad entry `{part}`")))?;
            let start = start.ok_or_else(|| Error::Config(format!("batch_size: `{part}` needs `@iteration`")))?;
            if out.last().is_some_and(|&(prev, _)| prev >= start) || (i == 0 && start != 0) {
                return Err(Error::Config("batch_size: starts must begin at 0 and increase".into()));
            }
            out.push((start, size));
        }
        Ok(BatchSchedule(out))
    }
}

impl std::fmt::Display for BatchSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, (start, size)) in self.0.iter().enumerate() {
            if i == 0 {
                write!(f, "{size}")?;
            } else {
                write!(f, ", {size}@{start}")?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Three-stage progressive cluster optimization.
    Pco,
    /// Single-stage CosFace over all classes, for comparison.
    CosfaceBaseline,
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pco" => Ok(TrainMode::Pco),
            "cosface" => Ok(TrainMode::CosfaceBaseline),
            _ => Err(Error::Config(format!("unknown mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Pco => "pco",
            TrainMode::CosfaceBaseline => "cosface",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub s: f64,
    /// Stage-1 cosine margin.
    pub m: f64,
    /// Stage-2/3 classifier margin.
    pub m1: f64,
    /// Stage-2/3 prototype margin.
    pub m2: f64,
    /// Negative sub-sampling ratio.
    pub r: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub learning_rate: f64,
    /// Learning rate at `max_iterations` as a fraction of `learning_rate`;
    /// linear in between. `1` disables decay.
    pub lr_final_ratio: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub batch_size: BatchSchedule,
    pub seed: u64,
    pub max_iterations: u64,
    pub css_smoothing: f64,
    /// Standard deviation of the normal initialization of encoder weights.
    pub init_std: f64,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            s: 64.0,
            m: 0.4,
            m1: 0.4,
            m2: 0.4,
            r: 0.1,
            delta1: 0.2,
            delta2: 0.35,
            learning_rate: 1e-3,
            lr_final_ratio: 1.0,
            betas: (0.9, 0.999),
            weight_decay: 0.1,
            batch_size: BatchSchedule::constant(32),
            seed: 0,
            max_iterations: 1000,
            css_smoothing: 0.9,
            init_std: 0.01,
            mode: TrainMode::Pco,
        }
    }
}

fn parse_betas(s: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => match (a.parse(), b.parse()) {
            (Ok(a), Ok(b)) => Ok((a, b)),
            _ => Err(Error::Config(format!("betas: cannot parse `{s}`"))),
        },
        _ => Err(Error::Config("betas: expected `beta1, beta2`".into())),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        let checks = [
            (pos(self.s), "s must be positive"),
            (
                self.m >= 0.0 && self.m1 >= 0.0 && self.m2 >= 0.0,
                "margins must be non-negative",
            ),
            (self.r > 0.0 && self.r <= 1.0, "r must lie in (0, 1]"),
            (
                0.0 < self.delta1 && self.delta1 <= self.delta2 && self.delta2 <= 1.0,
                "need 0 < delta1 <= delta2 <= 1",
            ),
            (pos(self.learning_rate), "learning_rate must be positive"),
            (
                (0.0..=1.0).contains(&self.lr_final_ratio),
                "lr_final_ratio must lie in [0, 1]",
            ),
            (
                (0.0..1.0).contains(&self.betas.0) && (0.0..1.0).contains(&self.betas.1),
                "betas must lie in [0, 1)",
            ),
            (self.weight_decay >= 0.0, "weight_decay must be non-negative"),
            (
                (0.0..1.0).contains(&self.css_smoothing),
                "css_smoothing must lie in [0, 1)",
            ),
            (pos(self.init_std), "init_std must be positive"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }

    /// Learning rate used at `iteration`.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        if self.lr_final_ratio == 1.0 || self.max_iterations == 0 {
            return self.learning_rate;
        }
        let frac = (iteration as f64 / self.max_iterations as f64).min(1.0);
        self.learning_rate * (1.0 - (1.0 - self.lr_final_ratio) * frac)
    }

    pub(crate) fn from_keys(k: &mut Keys) -> Result<Self> {
        let d = TrainConfig::default();
        let betas = match k.take::<String>("betas")? {
            Some(s) => parse_betas(&s)?,
            None => d.betas,
        };
        let cfg = TrainConfig {
            s: k.or("s", d.s)?,
            m: k.or("m", d.m)?,
            m1: k.or("m1", d.m1)?,
            m2: k.or("m2", d.m2)?,
            r: k.or("r", d.r)?,
            delta1: k.or("delta1", d.delta1)?,
            delta2: k.or("delta2", d.delta2)?,
            learning_rate: k.or("learning_rate", d.learning_rate)?,
            lr_final_ratio: k.or("lr_final_ratio", d.lr_final_ratio)?,
            betas,
            weight_decay: k.or("weight_decay", d.weight_decay)?,
            batch_size: k.or("batch_size", d.batch_size)?,
            seed: k.or("seed", d.seed)?,
            max_iterations: k.or("max_iterations", d.max_iterations)?,
            css_smoothing: k.or("css_smoothing", d.css_smoothing)?,
            init_std: k.or("init_std", d.init_std)?,
            mode: k.or("mode", d.mode)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn write_kv(&self, out: &mut String) {
        let _ = writeln!(out, "s = {}", self.s);
        let _ = writeln!(out, "m = {}", self.m);
        let _ = writeln!(out, "m1 = {}", self.m1);
        let _ = writeln!(out, "m2 = {}", self.m2);
        let _ = writeln!(out, "r = {}", self.r);
        let _ = writeln!(out, "delta1 = {}", self.delta1);
        let _ = writeln!(out, "delta2 = {}", self.delta2);
        let _ = writeln!(out, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(out, "lr_final_ratio = {}", self.lr_final_ratio);
        let _ = writeln!(out, "betas = {}, {}", self.betas.0, self.betas.1);
        let _ = writeln!(out, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(out, "batch_size = {}", self.batch_size);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "max_iterations = {}", self.max_iterations);
        let _ = writeln!(out, "css_smoothing = {}", self.css_smoothing);
        let _ = writeln!(out, "init_std = {}", self.init_std);
        let _ = writeln!(out, "mode = {}", self.mode);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
    All,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            "all" => Ok(Split::All),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSpec {
    Sphere(SphereClusterSpec),
    Image(ImageClassSpec),
}

impl DataSpec {
    pub(crate) fn from_keys(k: &mut Keys) -> Result<Option<Self>> {
        let Some(kind) = k.take::<String>("data")? else {
            return Ok(None);
        };
        let spec = match kind.as_str() {
            "sphere" => {
                let model = match k.or("data.model", "vmf".to_string())?.as_str() {
                    "vmf" => ClusterModel::Vmf,
                    "gaussian" => ClusterModel::Gaussian,
                    other => return Err(Error::Config(format!("unknown data.model `{other}`"))),
                };
                let spec = SphereClusterSpec {
                    classes: k.require("data.classes")?,
                    dim: k.require("data.dim")?,
                    kappa: k.require("data.kappa")?,
                    samples_per_class: k.require("data.samples_per_class")?,
                    seed: k.or("data.seed", 0)?,
                    model,
                };
                spec.validate()?;
                DataSpec::Sphere(spec)
            }
            "image" => {
                let spec = ImageClassSpec {
                    classes: k.require("data.classes")?,
                    width: k.require("data.width")?,
                    channels: k.or("data.channels", 1)?,
                    train_per_class: k.require("data.train_per_class")?,
                    eval_per_class: k.or("data.eval_per_class", 0)?,
                    noise: k.or("data.noise", 0.0)?,
                    jitter: k.or("data.jitter", 0)?,
                    seed: k.or("data.seed", 0)?,
                };
                spec.validate()?;
                DataSpec::Image(spec)
            }
            other => return Err(Error::Config(format!("unknown data kind `{other}`"))),
        };
        Ok(Some(spec))
    }

    /// Reads a standalone data spec file (the `data` keys only, plus an
    /// optional `data.split`).
    pub fn parse(text: &str) -> Result<(Self, Split)> {
        let mut k = Keys::new(parse_kv(text)?);
        let spec = DataSpec::from_keys(&mut k)?.ok_or_else(|| Error::Config("missing key `data`".into()))?;
        let split = k.or("data.split", Split::All)?;
        k.finish()?;
        Ok((spec, split))
    }

    pub fn classes(&self) -> usize {
        match self {
            DataSpec::Sphere(s) => s.classes,
            DataSpec::Image(s) => s.classes,
        }
    }

    fn write_kv(&self, out: &mut String) {
        match self {
            DataSpec::Sphere(s) => {
                let _ = writeln!(out, "data = sphere");
                let _ = writeln!(out, "data.classes = {}", s.classes);
                let _ = writeln!(out, "data.dim = {}", s.dim);
                let _ = writeln!(out, "data.kappa = {}", s.kappa);
                let _ = writeln!(out, "data.samples_per_class = {}", s.samples_per_class);
                let _ = writeln!(out, "data.seed = {}", s.seed);
                let model = match s.model {
                    ClusterModel::Vmf => "vmf",
                    ClusterModel::Gaussian => "gaussian",
                };
                let _ = writeln!(out, "data.model = {model}");
            }
            DataSpec::Image(s) => {
                let _ = writeln!(out, "data = image");
                let _ = writeln!(out, "data.classes = {}", s.classes);
                let _ = writeln!(out, "data.width = {}", s.width);
                let _ = writeln!(out, "data.channels = {}", s.channels);
                let _ = writeln!(out, "data.train_per_class = {}", s.train_per_class);
                let _ = writeln!(out, "data.eval_per_class = {}", s.eval_per_class);
                let _ = writeln!(out, "data.noise = {}", s.noise);
                let _ = writeln!(out, "data.jitter = {}", s.jitter);
                let _ = writeln!(out, "data.seed = {}", s.seed);
            }
        }
    }
}

/// Encoder architecture; input width comes from the data.
#[derive(Clone, Debug, PartialEq)]
pub enum EncoderSpec {
    Mlp {
        hidden: usize,
        output_dim: usize,
    },
    Vit {
        patch_stride: usize,
        token_dim: usize,
        layers: usize,
        heads: usize,
        ffn_hidden: usize,
        head_hidden: usize,
        output_dim: usize,
    },
}

impl EncoderSpec {
    pub(crate) fn from_keys(k: &mut Keys) -> Result<Option<Self>> {
        let Some(kind) = k.take::<String>("encoder")? else {
            return Ok(None);
        };
        let spec = match kind.as_str() {
            "mlp" => EncoderSpec::Mlp {
                hidden: k.require("encoder.hidden")?,
                output_dim: k.require("encoder.output_dim")?,
            },
            "vit" => {
                let output_dim = k.require("encoder.output_dim")?;
                EncoderSpec::Vit {
                    patch_stride: k.require("encoder.patch_stride")?,
                    token_dim: k.require("encoder.token_dim")?,
                    layers: k.require("encoder.layers")?,
                    heads: k.require("encoder.heads")?,
                    ffn_hidden: k.require("encoder.ffn_hidden")?,
                    head_hidden: k.or("encoder.head_hidden", output_dim)?,
                    output_dim,
                }
            }
            other => return Err(Error::Config(format!("unknown encoder `{other}`"))),
        };
        Ok(Some(spec))
    }

    pub fn output_dim(&self) -> usize {
        match self {
            EncoderSpec::Mlp { output_dim, .. } | EncoderSpec::Vit { output_dim, .. } => *output_dim,
        }
    }

    pub fn mlp_config(&self, input_dim: usize) -> Option<MlpConfig> {
        match *self {
            EncoderSpec::Mlp { hidden, output_dim } => Some(MlpConfig {
                input_dim,
                hidden,
                output_dim,
            }),
            _ => None,
        }
    }

    pub fn vit_config(&self, width: usize, channels: usize) -> Option<VitConfig> {
        match *self {
            EncoderSpec::Vit {
                patch_stride,
                token_dim,
                layers,
                heads,
                ffn_hidden,
                head_hidden,
                output_dim,
            } => Some(VitConfig {
                image_width: width,
                patch_stride,
                channels,
                token_dim,
                layers,
                heads,
                ffn_hidden,
                head_hidden,
                output_dim,
            }),
            _ => None,
        }
    }

    fn write_kv(&self, out: &mut String) {
        match self {
            EncoderSpec::Mlp { hidden, output_dim } => {
                let _ = writeln!(out, "encoder = mlp");
                let _ = writeln!(out, "encoder.hidden = {hidden}");
                let _ = writeln!(out, "encoder.output_dim = {output_dim}");
            }
            EncoderSpec::Vit {
                patch_stride,
                token_dim,
                layers,
                heads,
                ffn_hidden,
                head_hidden,
                output_dim,
            } => {
                let _ = writeln!(out, "encoder = vit");
                let _ = writeln!(out, "encoder.patch_stride = {patch_stride}");
                let _ = writeln!(out, "encoder.token_dim = {token_dim}");
                let _ = writeln!(out, "encoder.layers = {layers}");
                let _ = writeln!(out, "encoder.heads = {heads}");
                let _ = writeln!(out, "encoder.ffn_hidden = {ffn_hidden}");
                let _ = writeln!(out, "encoder.head_hidden = {head_hidden}");
                let _ = writeln!(out, "encoder.output_dim = {output_dim}");
            }
        }
    }
}

/// Everything a `train` invocation reads from its config file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: Option<DataSpec>,
    pub encoder: Option<EncoderSpec>,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
    /// Write the checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: u64,
}

impl RunConfig {
    pub fn new(train: TrainConfig) -> Self {
        RunConfig {
            train,
            data: None,
            encoder: None,
            checkpoint: None,
            log: None,
            checkpoint_every: 0,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut k = Keys::new(parse_kv(text)?);
        let train = TrainConfig::from_keys(&mut k)?;
        let data = DataSpec::from_keys(&mut k)?;
        let encoder = EncoderSpec::from_keys(&mut k)?;
        let checkpoint = k.take::<String>("checkpoint")?.map(PathBuf::from);
        let log = k.take::<String>("log")?.map(PathBuf::from);
        let checkpoint_every = k.or("checkpoint_every", 0)?;
        if k.has("data.split") {
            return Err(Error::Config("`data.split` is only valid in data spec files".into()));
        }
        k.finish()?;
        Ok(RunConfig {
            train,
            data,
            encoder,
            checkpoint,
            log,
            checkpoint_every,
        })
    }

    /// Canonical text form; [`RunConfig::parse`] reads it back unchanged.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        self.train.write_kv(&mut out);
        if let Some(d) = &self.data {
            d.write_kv(&mut out);
        }
        if let Some(e) = &self.encoder {
            e.write_kv(&mut out);
        }
        if let Some(p) = &self.checkpoint {
            let _ = writeln!(out, "checkpoint = {}", p.display());
        }
        if let Some(p) = &self.log {
            let _ = writeln!(out, "log = {}", p.display());
        }
        let _ = writeln!(out, "checkpoint_every = {}", self.checkpoint_every);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_setup() {
        let c = TrainConfig::default();
        assert_eq!((c.s, c.m, c.r, c.delta1, c.delta2), (64.0, 0.4, 0.1, 0.2, 0.35));
        assert_eq!((c.learning_rate, c.betas, c.weight_decay), (1e-3, (0.9, 0.999), 0.1));
    }

    #[test]
    fn parses_comments_and_rejects_junk() {
        let text = "# header\n s = 32 # inline\n\nr=0.5\nbatch_size = 384, 128@60000\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.train.s, 32.0);
        assert_eq!(cfg.train.r, 0.5);
        assert_eq!(cfg.train.batch_size.at(0), 384);
        assert_eq!(cfg.train.batch_size.at(59_999), 384);
        assert_eq!(cfg.train.batch_size.at(60_000), 128);

        assert!(RunConfig::parse("s 3").is_err());
        assert!(RunConfig::parse("s = 1\ns = 2").is_err());
        assert!(RunConfig::parse("bogus = 1").is_err());
        assert!(RunConfig::parse("delta1 = 0.5\ndelta2 = 0.4").is_err());
        assert!(RunConfig::parse("r = 0").is_err());
        assert!(RunConfig::parse("batch_size = 4, 2").is_err());
    }

    #[test]
    fn text_roundtrip() {
        let text = "seed = 9\nbetas = 0.8, 0.99\nmode = cosface\nlr_final_ratio = 0.1\n\
                    data = image\ndata.classes = 16\ndata.width = 24\ndata.train_per_class = 10\n\
                    data.noise = 0.15\nencoder = vit\nencoder.patch_stride = 6\nencoder.token_dim = 16\n\
                    encoder.layers = 2\nencoder.heads = 2\nencoder.ffn_hidden = 32\nencoder.output_dim = 16\n\
                    checkpoint = run.ckpt\nlog = run.csv\n";
        let a = RunConfig::parse(text).unwrap();
        let b = RunConfig::parse(&a.to_text()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.mode, TrainMode::CosfaceBaseline);
    }

    #[test]
    fn linear_lr_decay() {
        let c = TrainConfig {
            lr_final_ratio: 0.5,
            max_iterations: 100,
            ..TrainConfig::default()
        };
        assert_eq!(c.lr_at(0), 1e-3);
        assert!((c.lr_at(50) - 7.5e-4).abs() < 1e-18);
        assert!((c.lr_at(100) - 5e-4).abs() < 1e-18);
    }

    #[test]
    fn data_spec_file() {
        let (spec, split) = DataSpec::parse("data = sphere\ndata.classes = 3\ndata.dim = 4\ndata.kappa = 5\ndata.samples_per_class = 2\ndata.split = eval\n").unwrap();
        assert_eq!(spec.classes(), 3);
        assert_eq!(split, Split::Eval);
        assert!(DataSpec::parse("data = cubes").is_err());
    }
}
