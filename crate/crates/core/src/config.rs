//! Run configuration: `[section]` headers, `key = value` lines and `#`
//! comments. Every default reproduces the published training recipe on a
//! full-width ResNet-50 with P3D-C blocks and STRF in stages 2 and 3.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::{BlockVariant, NetworkSpec, RESNET50_BLOCKS};
use crate::error::{Error, Result};
use crate::kernels::PoolMode;
use crate::reid::Tracklet;
use crate::strf::{Branch, BranchSet, Integration, StrfConfig};
use crate::synth::{render, Normalize, SynthSpec};
use crate::train::TrainConfig;

/// Training identities of the largest public video re-id benchmark; used
/// when the class count is left to the data and no data is at hand.
pub const DEFAULT_CLASSES: usize = 625;

/// ImageNet channel statistics.
pub const IMAGENET: Normalize = Normalize {
    mean: [0.485, 0.456, 0.406],
    std: [0.229, 0.224, 0.225],
};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: BlockVariant,
    /// 1-based stages built from `variant` blocks; the rest are C2D.
    pub variant_stages: Vec<usize>,
    pub strf_stages: Vec<usize>,
    pub width_divisor: usize,
    pub blocks: [usize; 4],
    pub strf: StrfConfig,
    /// `None` takes the identity count of the training split.
    pub classes: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: BlockVariant::P3DC,
            variant_stages: vec![2, 3],
            strf_stages: vec![2, 3],
            width_divisor: 1,
            blocks: RESNET50_BLOCKS,
            strf: StrfConfig::default(),
            classes: None,
        }
    }
}

impl ModelConfig {
    /// The small network used for desk-scale experiments.
    pub fn toy(variant: BlockVariant, strf: bool) -> Self {
        Self {
            variant,
            strf_stages: if strf { vec![2, 3] } else { vec![] },
            width_divisor: 16,
            blocks: [1; 4],
            ..Self::default()
        }
    }

    pub fn network_spec(&self, classes: usize) -> Result<NetworkSpec> {
        let mut spec = NetworkSpec::scaled(
            self.width_divisor,
            self.blocks,
            self.variant,
            &self.variant_stages,
            &self.strf_stages,
            self.classes.unwrap_or(classes),
        )?;
        spec.strf = self.strf;
        spec.validate()?;
        Ok(spec)
    }

    /// Same layout without any STRF unit.
    pub fn baseline(&self) -> Self {
        Self {
            strf_stages: vec![],
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Dataset manifest; when absent the synthetic spec is rendered in memory.
    pub manifest: Option<PathBuf>,
    pub synth: SynthSpec,
    pub normalize: Normalize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            synth: SynthSpec::default(),
            normalize: IMAGENET,
        }
    }
}

impl DataConfig {
    pub fn tracklets(&self) -> Result<Vec<Tracklet>> {
        if let Some(m) = &self.manifest {
            return crate::synth::load(m, self.normalize);
        }
        let mut data = render(&self.synth)?;
        for t in &mut data {
            t.frames.iter_mut().for_each(|f| self.normalize.apply(f));
        }
        Ok(data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub ranks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ranks: vec![1, 5, 10, 20] }
    }
}

/// One-factor-at-a-time ablation axes around the `[model]` STRF setting.
#[derive(Debug, Clone, PartialEq)]
pub struct AblateConfig {
    pub integrations: Vec<Integration>,
    /// (temporal, spatial) pool kinds.
    pub pools: Vec<(PoolMode, PoolMode)>,
    pub branches: Vec<BranchSet>,
    /// (dynamic, static) resolutions.
    pub resolutions: Vec<(usize, usize)>,
    /// Training steps per configuration.
    pub steps: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        use PoolMode::{Avg, Max};
        Self {
            integrations: Integration::ALL.to_vec(),
            pools: vec![(Max, Max), (Max, Avg), (Avg, Max), (Avg, Avg)],
            branches: Branch::ALL.iter().map(|b| BranchSet::only(&[*b])).collect(),
            resolutions: vec![(1, 1), (1, 3), (1, 5), (3, 5)],
            steps: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

fn list<T>(s: &str, item: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, String> {
    let s = s.trim();
    if s.is_empty() || s == "none" {
        return Ok(vec![]);
    }
    s.split(',').map(|p| item(p.trim())).collect()
}

fn num<T: FromStr>(s: &str) -> Result<T, String> {
    s.parse().map_err(|_| format!("`{s}` is not a valid number"))
}

fn parsed<T: FromStr<Err = Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: Error| match e {
        Error::Config(m) => m,
        other => other.to_string(),
    })
}

fn pair<A: FromStr, B: FromStr>(s: &str, a: impl Fn(&str) -> Result<A, String>, b: impl Fn(&str) -> Result<B, String>) -> Result<(A, B), String> {
    let (x, y) = s
        .split_once('/')
        .ok_or_else(|| format!("`{s}` must have the form a/b"))?;
    Ok((a(x.trim())?, b(y.trim())?))
}

fn array<const N: usize, T: FromStr>(s: &str) -> Result<[T; N], String> {
    let v = list(s, num::<T>)?;
    let n = v.len();
    v.try_into().map_err(|_| format!("expected {N} values, got {n}"))
}

fn probability(s: &str) -> Result<f64, String> {
    let p: f64 = num(s)?;
    if (0.0..=1.0).contains(&p) {
        Ok(p)
    } else {
        Err(format!("probability {p} outside [0, 1]"))
    }
}

fn positive(s: &str) -> Result<usize, String> {
    match num(s)? {
        0 => Err("must be positive".into()),
        n => Ok(n),
    }
}

impl RunConfig {
    /// Parse config text; `path` only labels error messages.
    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let err = |msg: String| Error::ConfigLine {
                path: path.to_string(),
                line: i + 1,
                msg,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| err(format!("malformed section header `{line}`")))?
                    .trim();
                if !["model", "train", "data", "eval", "ablate"].contains(&name) {
                    return Err(err(format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, found `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let section = section
                .as_deref()
                .ok_or_else(|| err(format!("key `{key}` appears before any section header")))?;
            cfg.set(section, key, value).map_err(|m| err(format!("[{section}] {key}: {m}")))?;
        }
        cfg.validate().map_err(|e| Error::ConfigLine {
            path: path.to_string(),
            line: 0,
            msg: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> Result<(), String> {
        let (m, t, d) = (&mut self.model, &mut self.train, &mut self.data);
        match (section, key) {
            ("model", "variant") => m.variant = parsed(v)?,
            ("model", "variant_stages") => m.variant_stages = list(v, num)?,
            ("model", "strf_stages") => m.strf_stages = list(v, num)?,
            ("model", "width_divisor") => m.width_divisor = positive(v)?,
            ("model", "blocks") => m.blocks = array(v)?,
            ("model", "r_dynamic") => m.strf.r_dynamic = num(v)?,
            ("model", "r_static") => m.strf.r_static = num(v)?,
            ("model", "temporal_pool") => m.strf.temporal_pool = parsed(v)?,
            ("model", "spatial_pool") => m.strf.spatial_pool = parsed(v)?,
            ("model", "integration") => m.strf.integration = parsed(v)?,
            ("model", "branches") => m.strf.branches = parsed(v)?,
            ("model", "reduction") => m.strf.reduction = positive(v)?,
            ("model", "temperature") => m.strf.temperature = num(v)?,
            ("model", "classes") => m.classes = if v == "auto" { None } else { Some(positive(v)?) },
            ("train", "lr") => t.lr = num(v)?,
            ("train", "weight_decay") => t.weight_decay = num(v)?,
            ("train", "epochs") => t.epochs = num(v)?,
            ("train", "lr_decay_period") => t.lr_decay_period = positive(v)?,
            ("train", "lr_decay_factor") => t.lr_decay_factor = num(v)?,
            ("train", "p") => t.p = positive(v)?,
            ("train", "k") => t.k = positive(v)?,
            ("train", "t") => t.t = positive(v)?,
            ("train", "stride") => t.stride = positive(v)?,
            ("train", "margin") => t.margin = num(v)?,
            ("train", "seed") => t.seed = num(v)?,
            ("train", "max_steps") => t.max_steps = if v == "none" { None } else { Some(num(v)?) },
            ("train", "flip_probability") => t.flip_probability = probability(v)?,
            ("train", "erase_probability") => t.erase_probability = probability(v)?,
            ("data", "manifest") => d.manifest = if v == "none" { None } else { Some(PathBuf::from(v)) },
            ("data", "mean") => d.normalize.mean = array(v)?,
            ("data", "std") => d.normalize.std = array(v)?,
            ("data", "identities") => d.synth.identities = positive(v)?,
            ("data", "tracklets_per_identity") => d.synth.tracklets_per_identity = positive(v)?,
            ("data", "frames") => d.synth.frames = positive(v)?,
            ("data", "frame_size") => d.synth.frame_size = array(v)?,
            ("data", "twins_per_palette") => d.synth.twins_per_palette = positive(v)?,
            ("data", "motion_amplitude") => d.synth.motion_amplitude = num(v)?,
            ("data", "occlusion_probability") => d.synth.occlusion_probability = probability(v)?,
            ("data", "occluder_size") => d.synth.occluder_size = array(v)?,
            ("data", "jitter") => d.synth.jitter = num(v)?,
            ("data", "cameras") => d.synth.cameras = positive(v)?,
            ("data", "seed") => d.synth.seed = num(v)?,
            ("eval", "ranks") => self.eval.ranks = list(v, positive)?,
            ("ablate", "integrations") => self.ablate.integrations = list(v, parsed)?,
            ("ablate", "pools") => self.ablate.pools = list(v, |p| pair(p, parsed, parsed))?,
            ("ablate", "branches") => self.ablate.branches = list(v, parsed)?,
            ("ablate", "resolutions") => self.ablate.resolutions = list(v, |p| pair(p, num, num))?,
            ("ablate", "steps") => self.ablate.steps = positive(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Cross-field checks that do not depend on the data.
    pub fn validate(&self) -> Result<()> {
        self.model.network_spec(DEFAULT_CLASSES)?;
        self.data.synth.validate()?;
        if self.data.normalize.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        if self.eval.ranks.is_empty() {
            return Err(Error::Config("at least one rank must be reported".into()));
        }
        Ok(())
    }

    /// Text that parses back to this configuration.
    pub fn to_ini(&self) -> String {
        fn join<T: fmt::Display>(v: impl IntoIterator<Item = T>) -> String {
            let s: Vec<String> = v.into_iter().map(|x| x.to_string()).collect();
            if s.is_empty() {
                "none".into()
            } else {
                s.join(",")
            }
        }
        let (m, t, d, s, a) = (&self.model, &self.train, &self.data, &self.data.synth, &self.ablate);
        let mut o = String::new();
        let _ = writeln!(o, "[model]");
        let _ = writeln!(o, "variant = {}", m.variant);
        let _ = writeln!(o, "variant_stages = {}", join(&m.variant_stages));
        let _ = writeln!(o, "strf_stages = {}", join(&m.strf_stages));
        let _ = writeln!(o, "width_divisor = {}", m.width_divisor);
        let _ = writeln!(o, "blocks = {}", join(m.blocks));
        let _ = writeln!(o, "r_dynamic = {}", m.strf.r_dynamic);
        let _ = writeln!(o, "r_static = {}", m.strf.r_static);
        let _ = writeln!(o, "temporal_pool = {}", m.strf.temporal_pool);
        let _ = writeln!(o, "spatial_pool = {}", m.strf.spatial_pool);
        let _ = writeln!(o, "integration = {}", m.strf.integration);
        let _ = writeln!(o, "branches = {}", m.strf.branches.to_string().replace('+', ","));
        let _ = writeln!(o, "reduction = {}", m.strf.reduction);
        let _ = writeln!(o, "temperature = {:?}", m.strf.temperature);
        let _ = writeln!(o, "classes = {}", m.classes.map_or("auto".into(), |c| c.to_string()));
        let _ = writeln!(o, "\n[train]");
        let _ = writeln!(o, "lr = {:?}", t.lr);
        let _ = writeln!(o, "weight_decay = {:?}", t.weight_decay);
        let _ = writeln!(o, "epochs = {}", t.epochs);
        let _ = writeln!(o, "lr_decay_period = {}", t.lr_decay_period);
        let _ = writeln!(o, "lr_decay_factor = {:?}", t.lr_decay_factor);
        let _ = writeln!(o, "p = {}", t.p);
        let _ = writeln!(o, "k = {}", t.k);
        let _ = writeln!(o, "t = {}", t.t);
        let _ = writeln!(o, "stride = {}", t.stride);
        let _ = writeln!(o, "margin = {:?}", t.margin);
        let _ = writeln!(o, "seed = {}", t.seed);
        let _ = writeln!(o, "max_steps = {}", t.max_steps.map_or("none".into(), |n| n.to_string()));
        let _ = writeln!(o, "flip_probability = {:?}", t.flip_probability);
        let _ = writeln!(o, "erase_probability = {:?}", t.erase_probability);
        let _ = writeln!(o, "\n[data]");
        let _ = writeln!(
            o,
            "manifest = {}",
            d.manifest.as_ref().map_or("none".into(), |p| p.display().to_string())
        );
        let _ = writeln!(o, "mean = {}", join(d.normalize.mean.map(|x| format!("{x:?}"))));
        let _ = writeln!(o, "std = {}", join(d.normalize.std.map(|x| format!("{x:?}"))));
        let _ = writeln!(o, "identities = {}", s.identities);
        let _ = writeln!(o, "tracklets_per_identity = {}", s.tracklets_per_identity);
        let _ = writeln!(o, "frames = {}", s.frames);
        let _ = writeln!(o, "frame_size = {}", join(s.frame_size));
        let _ = writeln!(o, "twins_per_palette = {}", s.twins_per_palette);
        let _ = writeln!(o, "motion_amplitude = {}", s.motion_amplitude);
        let _ = writeln!(o, "occlusion_probability = {:?}", s.occlusion_probability);
        let _ = writeln!(o, "occluder_size = {}", join(s.occluder_size));
        let _ = writeln!(o, "jitter = {}", s.jitter);
        let _ = writeln!(o, "cameras = {}", s.cameras);
        let _ = writeln!(o, "seed = {}", s.seed);
        let _ = writeln!(o, "\n[eval]");
        let _ = writeln!(o, "ranks = {}", join(&self.eval.ranks));
        let _ = writeln!(o, "\n[ablate]");
        let _ = writeln!(o, "integrations = {}", join(&a.integrations));
        let _ = writeln!(o, "pools = {}", join(a.pools.iter().map(|(t, s)| format!("{t}/{s}"))));
        let _ = writeln!(o, "branches = {}", join(&a.branches));
        let _ = writeln!(o, "resolutions = {}", join(a.resolutions.iter().map(|(x, y)| format!("{x}/{y}"))));
        let _ = writeln!(o, "steps = {}", a.steps);
        o
    }
}
