use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One Ghost module: `m = out/ratio` intrinsic maps from a primary
/// convolution, then `(ratio-1)·m` ghost maps from a depthwise cheap op.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GhostModuleConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub ratio: usize,
    pub primary_kernel: usize,
    pub cheap_kernel: usize,
    pub dilation: usize,
    pub relu: bool,
}

impl GhostModuleConfig {
    /// Ratio 2, 1×1 primary conv, 3×3 cheap op, no dilation, with ReLU.
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            ratio: 2,
            primary_kernel: 1,
            cheap_kernel: 3,
            dilation: 1,
            relu: true,
        }
    }

    pub fn intrinsic(&self) -> usize {
        self.out_channels / self.ratio
    }

    pub fn ghost_channels(&self) -> usize {
        (self.ratio - 1) * self.intrinsic()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratio == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(format!("degenerate ghost module {self:?}")));
        }
        if self.out_channels % self.ratio != 0 {
            return Err(Error::Config(format!(
                "ghost module output {} not divisible by ratio {}",
                self.out_channels, self.ratio
            )));
        }
        if self.primary_kernel % 2 == 0 || self.cheap_kernel % 2 == 0 || self.dilation == 0 {
            return Err(Error::Config(format!(
                "ghost module kernels must be odd and dilation >= 1: {self:?}"
            )));
        }
        Ok(())
    }
}

/// One Ghost bottleneck of the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BottleneckEntry {
    #[serde(rename = "in")]
    pub in_channels: usize,
    #[serde(rename = "mid")]
    pub mid_channels: usize,
    #[serde(rename = "out")]
    pub out_channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    pub stride: usize,
    #[serde(with = "se_flag")]
    pub se: bool,
    #[serde(default = "default_dilation")]
    pub dilation: usize,
    /// 1-based stage index, used by dilation schemes and stage reporting.
    #[serde(default)]
    pub stage: usize,
}

fn default_kernel() -> usize {
    3
}

fn default_dilation() -> usize {
    1
}

mod se_flag {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(*v as u8)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(serde::de::Error::custom(format!("se flag must be 0 or 1, got {other}"))),
        }
    }
}

impl BottleneckEntry {
    pub fn has_identity_shortcut(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }
}

/// The "a-b" dilation scheme: rate `early` on stages 1-4, `late` on stage 5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DilationScheme {
    pub early: usize,
    pub late: usize,
}

impl DilationScheme {
    pub const NONE: DilationScheme = DilationScheme { early: 1, late: 1 };

    pub fn uniform(rate: usize) -> Self {
        Self {
            early: rate,
            late: rate,
        }
    }

    /// The seven schemes swept in dilation comparisons.
    pub fn survey_set() -> Vec<DilationScheme> {
        ["1", "2", "3", "4", "5", "5-2", "5-3"]
            .iter()
            .map(|s| s.parse().expect("static scheme"))
            .collect()
    }

    pub fn rate_for_stage(&self, stage: usize) -> usize {
        if stage >= 5 {
            self.late
        } else {
            self.early
        }
    }
}

impl FromStr for DilationScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse = |p: &str| -> Result<usize> {
            match p.trim().parse::<usize>() {
                Ok(v) if v >= 1 => Ok(v),
                _ => Err(Error::Config(format!("bad dilation scheme {s:?}"))),
            }
        };
        match s.split_once('-') {
            Some((a, b)) => Ok(Self {
                early: parse(a)?,
                late: parse(b)?,
            }),
            None => Ok(Self::uniform(parse(s)?)),
        }
    }
}

impl fmt::Display for DilationScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.early == self.late {
            write!(f, "{}", self.early)
        } else {
            write!(f, "{}-{}", self.early, self.late)
        }
    }
}

/// Full backbone description. Widths are stored unscaled; apply
/// [`GhostCnnConfig::scaled`] before building.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GhostCnnConfig {
    #[serde(rename = "stem")]
    pub stem_channels: usize,
    pub stages: Vec<BottleneckEntry>,
    #[serde(rename = "final_conv")]
    pub final_channels: usize,
    pub channel_multiplier: f64,
    #[serde(default = "default_ratio")]
    pub ghost_ratio: usize,
    #[serde(default = "default_se_reduction")]
    pub se_reduction: usize,
    #[serde(default = "default_primary_kernel")]
    pub primary_kernel: usize,
}

fn default_ratio() -> usize {
    2
}
fn default_se_reduction() -> usize {
    4
}
fn default_primary_kernel() -> usize {
    1
}

/// `(in, mid, out, stride, se)` per stage.
const LAYOUT: [&[(usize, usize, usize, usize, bool)]; 5] = [
    &[(24, 24, 24, 1, false), (24, 48, 40, 2, false)],
    &[(40, 80, 40, 1, false), (40, 120, 112, 2, true)],
    &[(112, 224, 112, 1, true), (112, 336, 160, 2, false)],
    &[
        (160, 320, 160, 1, false),
        (160, 320, 160, 1, false),
        (160, 320, 160, 1, false),
        (160, 480, 160, 1, true),
        (160, 480, 160, 1, true),
        (160, 672, 160, 2, true),
    ],
    &[
        (160, 960, 160, 1, false),
        (160, 960, 160, 1, true),
        (160, 960, 160, 1, false),
        (160, 960, 160, 1, true),
    ],
];

/// Rounds `v` to the nearest multiple of `divisor` without dropping more
/// than 10% below `v`.
pub fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut out = (((v + d / 2.0) / d).floor() * d).max(d);
    if out < 0.9 * v {
        out += d;
    }
    out as usize
}

impl GhostCnnConfig {
    /// The five-stage layout with the given dilation scheme.
    pub fn standard(scheme: DilationScheme) -> Self {
        let mut stages = Vec::new();
        for (si, stage) in LAYOUT.iter().enumerate() {
            for &(i, m, o, s, se) in stage.iter() {
                stages.push(BottleneckEntry {
                    in_channels: i,
                    mid_channels: m,
                    out_channels: o,
                    kernel: 3,
                    stride: s,
                    se,
                    dilation: scheme.rate_for_stage(si + 1),
                    stage: si + 1,
                });
            }
        }
        Self {
            stem_channels: 24,
            stages,
            final_channels: 960,
            channel_multiplier: 1.0,
            ghost_ratio: 2,
            se_reduction: 4,
            primary_kernel: 1,
        }
    }

    pub fn with_multiplier(mut self, m: f64) -> Self {
        self.channel_multiplier = m;
        self
    }

    pub fn with_scheme(mut self, scheme: DilationScheme) -> Self {
        for e in &mut self.stages {
            e.dilation = scheme.rate_for_stage(e.stage);
        }
        self
    }

    /// Bottlenecks grouped by stage index.
    pub fn stage_entries(&self, stage: usize) -> Vec<BottleneckEntry> {
        self.stages
            .iter()
            .copied()
            .filter(|e| e.stage == stage)
            .collect()
    }

    pub fn num_stages(&self) -> usize {
        self.stages.iter().map(|e| e.stage).max().unwrap_or(0)
    }

    /// Copy with every width multiplied by `channel_multiplier` (rounded to a
    /// multiple of 4) and the multiplier reset to 1.
    pub fn scaled(&self) -> Self {
        if self.channel_multiplier == 1.0 {
            return self.clone();
        }
        let s = |c: usize| make_divisible(c as f64 * self.channel_multiplier, 4);
        Self {
            stem_channels: s(self.stem_channels),
            stages: self
                .stages
                .iter()
                .map(|e| BottleneckEntry {
                    in_channels: s(e.in_channels),
                    mid_channels: s(e.mid_channels),
                    out_channels: s(e.out_channels),
                    ..*e
                })
                .collect(),
            final_channels: s(self.final_channels),
            channel_multiplier: 1.0,
            ..self.clone()
        }
    }

    /// Product of all strides (stem included).
    pub fn total_stride(&self) -> usize {
        2 * self.stages.iter().map(|e| e.stride).product::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = self.scaled();
        if cfg.stages.is_empty() {
            return Err(Error::Config("backbone has no bottlenecks".into()));
        }
        let mut c = cfg.stem_channels;
        for (i, e) in cfg.stages.iter().enumerate() {
            if e.in_channels != c {
                return Err(Error::Config(format!(
                    "bottleneck {i} expects {} input channels, previous layer gives {c}",
                    e.in_channels
                )));
            }
            if e.stride != 1 && e.stride != 2 {
                return Err(Error::Config(format!("bottleneck {i}: stride must be 1 or 2")));
            }
            if e.dilation == 0 || e.kernel % 2 == 0 {
                return Err(Error::Config(format!(
                    "bottleneck {i}: odd kernel and dilation >= 1 required"
                )));
            }
            if e.mid_channels % cfg.ghost_ratio != 0 || e.out_channels % cfg.ghost_ratio != 0 {
                return Err(Error::Config(format!(
                    "bottleneck {i}: widths must be divisible by the ghost ratio"
                )));
            }
            if e.se && e.mid_channels % cfg.se_reduction != 0 {
                return Err(Error::Config(format!(
                    "bottleneck {i}: SE width {} not divisible by {}",
                    e.mid_channels, cfg.se_reduction
                )));
            }
            c = e.out_channels;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(s).map_err(|e| Error::Config(format!("backbone config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scheme_parsing() {
        assert_eq!("1".parse::<DilationScheme>().unwrap(), DilationScheme::NONE);
        let s: DilationScheme = "5-2".parse().unwrap();
        assert_eq!((s.early, s.late), (5, 2));
        assert_eq!(s.to_string(), "5-2");
        assert!("0".parse::<DilationScheme>().is_err());
        assert!("a-b".parse::<DilationScheme>().is_err());
        assert_eq!(DilationScheme::survey_set().len(), 7);
    }

    #[test]
    fn standard_strides_and_se_flags() {
        let cfg = GhostCnnConfig::standard(DilationScheme::NONE);
        let se: Vec<Vec<u8>> = (1..=5)
            .map(|s| cfg.stage_entries(s).iter().map(|e| e.se as u8).collect())
            .collect();
        assert_eq!(
            se,
            vec![
                vec![0, 0],
                vec![0, 1],
                vec![1, 0],
                vec![0, 0, 0, 1, 1, 1],
                vec![0, 1, 0, 1]
            ]
        );
        let strides: Vec<Vec<usize>> = (1..=5)
            .map(|s| cfg.stage_entries(s).iter().map(|e| e.stride).collect())
            .collect();
        assert_eq!(
            strides,
            vec![
                vec![1, 2],
                vec![1, 2],
                vec![1, 2],
                vec![1, 1, 1, 1, 1, 2],
                vec![1, 1, 1, 1]
            ]
        );
        let counts: Vec<usize> = (1..=5).map(|s| cfg.stage_entries(s).len()).collect();
        assert_eq!(counts, vec![2, 2, 2, 6, 4]);
        assert_eq!(cfg.stem_channels, 24);
        assert_eq!(cfg.final_channels, 960);
        assert_eq!(cfg.total_stride(), 32);
        cfg.validate().unwrap();
        for e in &cfg.stages {
            assert!(e.mid_channels >= e.out_channels);
        }
    }

    #[test]
    fn scheme_rates_per_stage() {
        let cfg = GhostCnnConfig::standard("5-2".parse().unwrap());
        for e in &cfg.stages {
            assert_eq!(e.dilation, if e.stage == 5 { 2 } else { 5 });
        }
        let base = GhostCnnConfig::standard(DilationScheme::NONE);
        assert!(base.stages.iter().all(|e| e.dilation == 1));
    }

    #[test]
    fn quarter_width_is_valid() {
        let cfg = GhostCnnConfig::standard(DilationScheme::NONE).with_multiplier(0.25);
        cfg.validate().unwrap();
        let s = cfg.scaled();
        assert_eq!(s.stem_channels, 8);
        assert_eq!(s.final_channels, 240);
        assert_eq!(make_divisible(30.0, 4), 32);
        assert_eq!(make_divisible(6.0, 4), 8);
    }

    #[test]
    fn json_keys_and_roundtrip() {
        let cfg = GhostCnnConfig::standard("5-3".parse().unwrap());
        let js = cfg.to_json();
        let v: serde_json::Value = serde_json::from_str(&js).unwrap();
        for key in ["stem", "stages", "final_conv", "channel_multiplier"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        let e = &v["stages"][3];
        for key in ["in", "mid", "out", "kernel", "stride", "se", "dilation"] {
            assert!(e.get(key).is_some(), "missing stages[].{key}");
        }
        assert_eq!(e["se"], 1);
        assert_eq!(GhostCnnConfig::from_json(&js).unwrap(), cfg);
    }

    #[test]
    fn chain_mismatch_rejected() {
        let mut cfg = GhostCnnConfig::standard(DilationScheme::NONE);
        cfg.stages[3].in_channels = 41;
        assert!(cfg.validate().is_err());
    }
}
