//! Run configuration: a flat `key = value` file overridden by flags.
//!
//! Keys: `data`, `stats`, `conf`, `nms_iou`, `seed`, `jobs`, `x_range`,
//! `y_range`, `z_range` (two numbers, `lo hi` or `lo,hi`). `#` starts a
//! comment.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bev_erpn_core::bev::GridSpec;
use bev_erpn_core::erpn::ClassStats;

pub const DATA_ENV: &str = "BEV_ERPN_DATA";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    pub data: Option<PathBuf>,
    pub stats: Option<PathBuf>,
    pub conf: Option<f64>,
    pub nms_iou: Option<f64>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub x_range: Option<(f64, f64)>,
    pub y_range: Option<(f64, f64)>,
    pub z_range: Option<(f64, f64)>,
}

fn range(v: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = v.split([',', ' ']).filter(|s| !s.is_empty()).collect();
    let [lo, hi] = parts.as_slice() else {
        bail!("expected two numbers, got `{v}`");
    };
    Ok((lo.parse()?, hi.parse()?))
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = || format!("config line {}", i + 1);
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("{}: expected key = value", at()))?;
            let value = value.trim();
            match key.trim() {
                "data" => c.data = Some(value.into()),
                "stats" => c.stats = Some(value.into()),
                "conf" => c.conf = Some(value.parse().with_context(at)?),
                "nms_iou" => c.nms_iou = Some(value.parse().with_context(at)?),
                "seed" => c.seed = Some(value.parse().with_context(at)?),
                "jobs" => c.jobs = Some(value.parse().with_context(at)?),
                "x_range" => c.x_range = Some(range(value).with_context(at)?),
                "y_range" => c.y_range = Some(range(value).with_context(at)?),
                "z_range" => c.z_range = Some(range(value).with_context(at)?),
                other => bail!("{}: unknown key `{other}`", at()),
            }
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }
}

/// Settings after merging flags, the config file, the environment and defaults.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub grid: GridSpec,
    pub stats: ClassStats,
    pub conf: f64,
    pub nms_iou: f64,
    pub seed: u64,
    pub jobs: usize,
}

/// Values given on the command line; `None` when the flag was absent.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub data: Option<PathBuf>,
    pub conf: Option<f64>,
    pub nms_iou: Option<f64>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
}

impl RunConfig {
    pub fn resolve(flags: &Overrides, file: &ConfigFile, env_data: Option<PathBuf>) -> Result<Self> {
        let data = flags.data.clone().or_else(|| file.data.clone()).or(env_data);
        if let Some(d) = &data {
            if !d.is_dir() {
                bail!("dataset root {} is not a directory", d.display());
            }
        }
        let stats = match &file.stats {
            Some(p) => fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))?
                .parse()
                .with_context(|| format!("in {}", p.display()))?,
            None => ClassStats::builtin(),
        };
        let mut grid = GridSpec::default();
        grid.x_range = file.x_range.unwrap_or(grid.x_range);
        grid.y_range = file.y_range.unwrap_or(grid.y_range);
        grid.z_range = file.z_range.unwrap_or(grid.z_range);
        grid.validate()?;
        let conf = flags.conf.or(file.conf).unwrap_or(0.3);
        let nms_iou = flags.nms_iou.or(file.nms_iou).unwrap_or(0.4);
        for (name, v) in [("conf", conf), ("nms_iou", nms_iou)] {
            if !(0.0..=1.0).contains(&v) {
                bail!("{name} must be in [0, 1], got {v}");
            }
        }
        let jobs = flags.jobs.or(file.jobs).unwrap_or(1);
        if jobs == 0 {
            bail!("jobs must be at least 1");
        }
        Ok(Self {
            data,
            grid,
            stats,
            conf,
            nms_iou,
            seed: flags.seed.or(file.seed).unwrap_or(0),
            jobs,
        })
    }

    pub fn data_root(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .with_context(|| format!("no dataset root: pass --data, set `data` in the config or {DATA_ENV}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_keys() {
        let c = ConfigFile::parse("# run\nconf = 0.5\nz_range = -2.5, 1.0\nseed=7 # inline\n\n").unwrap();
        assert_eq!(c.conf, Some(0.5));
        assert_eq!(c.z_range, Some((-2.5, 1.0)));
        assert_eq!(c.seed, Some(7));
        assert!(ConfigFile::parse("colour = red")
            .unwrap_err()
            .to_string()
            .contains("line 1"));
        assert!(ConfigFile::parse("conf 0.5").is_err());
    }

    #[test]
    fn flags_beat_file_beats_defaults() {
        let file = ConfigFile::parse("conf = 0.5\nnms_iou = 0.2").unwrap();
        let flags = Overrides {
            conf: Some(0.6),
            ..Overrides::default()
        };
        let r = RunConfig::resolve(&flags, &file, None).unwrap();
        assert_eq!((r.conf, r.nms_iou, r.seed, r.jobs), (0.6, 0.2, 0, 1));
        let bad = ConfigFile::parse("conf = 1.5").unwrap();
        assert!(RunConfig::resolve(&Overrides::default(), &bad, None).is_err());
    }
}
