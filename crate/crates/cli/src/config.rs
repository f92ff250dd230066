//! Key-value run configuration: defaults, an optional config file, and
//! `--set key=value` overrides, resolved into one snapshot that is embedded
//! in every run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use volprop_core::error::{Error, Result};
use volprop_core::kernels::ConvEngine;
use volprop_core::net::NetworkConfig;
use volprop_core::trainer::TrainConfig;

/// Every recognized key with its default, the single source of truth for
/// both parsing and the manifest snapshot.
const DEFAULTS: &[(&str, &str)] = &[
    ("engine", "gemm"),
    ("net.crop_side", "128"),
    ("net.group_channels", "24,32,64,64,64"),
    ("net.blocks_per_group", "2,2,3,3,3"),
    ("net.anchors_mm", "10,30,60"),
    ("net.init_seed", "1"),
    ("train.initial_lr", "0.01"),
    ("train.epochs", "100"),
    ("train.lr_drop_epochs", "50,80"),
    ("train.lr_drop_factor", "0.1"),
    ("train.momentum", "0.9"),
    ("train.weight_decay", "0.0001"),
    ("train.batch_size", "1"),
    ("train.crops_per_epoch", "16"),
    ("train.rng_seed", "0"),
    ("train.checkpoint_every", "10"),
    ("train.nodule_fraction", "0.7"),
    ("train.jitter_frac", "0.25"),
    ("eval.score_threshold", "0.15"),
    ("eval.nms_iou", "0.25"),
];

/// The resolved configuration map.
#[derive(Debug, Clone)]
pub struct Settings {
    map: BTreeMap<String, String>,
}

impl Settings {
    /// Defaults, then the config file (if any), then `--set` overrides.
    pub fn resolve(config_path: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut settings = Settings {
            map: DEFAULTS.iter().map(|&(k, v)| (k.to_string(), v.to_string())).collect(),
        };
        if let Some(path) = config_path {
            let text = fs::read_to_string(path)?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    Error::Config(format!(
                        "{}:{}: expected key = value, got {line:?}",
                        path.display(),
                        lineno + 1
                    ))
                })?;
                settings.put(key.trim(), value.trim())?;
            }
        }
        for set in sets {
            let (key, value) = set.split_once('=').ok_or_else(|| {
                Error::Config(format!("--set needs key=value, got {set:?}"))
            })?;
            settings.put(key.trim(), value.trim())?;
        }
        // Fail on inconsistent values up front, not mid-pipeline.
        settings.network()?;
        settings.trainer()?;
        settings.engine()?;
        Ok(settings)
    }

    fn put(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.map.contains_key(key) {
            return Err(Error::Config(format!(
                "unknown configuration key {key:?}; known keys: {}",
                DEFAULTS.iter().map(|&(k, _)| k).collect::<Vec<_>>().join(", ")
            )));
        }
        self.map.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// The full resolved map, for the manifest.
    pub fn snapshot(&self) -> &BTreeMap<String, String> {
        &self.map
    }

    fn raw(&self, key: &str) -> &str {
        &self.map[key]
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.raw(key).parse().map_err(|_| {
            Error::Config(format!("key {key} has unparsable value {:?}", self.raw(key)))
        })
    }

    fn parse_list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw = self.raw(key);
        if raw.trim().is_empty() {
            // A blank value is an empty list, e.g. disabling lr drops.
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|part| {
                part.trim().parse().map_err(|_| {
                    Error::Config(format!("key {key} has unparsable element {part:?}"))
                })
            })
            .collect()
    }

    pub fn network(&self) -> Result<NetworkConfig> {
        let widths: Vec<usize> = self.parse_list("net.group_channels")?;
        let blocks: Vec<usize> = self.parse_list("net.blocks_per_group")?;
        let to_five = |name: &str, v: Vec<usize>| -> Result<[usize; 5]> {
            v.try_into()
                .map_err(|_| Error::Config(format!("{name} needs exactly five entries")))
        };
        let cfg = NetworkConfig {
            group_channels: to_five("net.group_channels", widths)?,
            blocks_per_group: to_five("net.blocks_per_group", blocks)?,
            anchors_mm: self.parse_list("net.anchors_mm")?,
            crop_side: self.parse("net.crop_side")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn trainer(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            initial_lr: self.parse("train.initial_lr")?,
            epochs: self.parse("train.epochs")?,
            lr_drop_epochs: self.parse_list("train.lr_drop_epochs")?,
            lr_drop_factor: self.parse("train.lr_drop_factor")?,
            momentum: self.parse("train.momentum")?,
            weight_decay: self.parse("train.weight_decay")?,
            batch_size: self.parse("train.batch_size")?,
            crops_per_epoch: self.parse("train.crops_per_epoch")?,
            rng_seed: self.parse("train.rng_seed")?,
            checkpoint_every: self.parse("train.checkpoint_every")?,
            nodule_fraction: self.parse("train.nodule_fraction")?,
            jitter_frac: self.parse("train.jitter_frac")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn engine(&self) -> Result<ConvEngine> {
        match self.raw("engine") {
            "gemm" => Ok(ConvEngine::GemmLowering),
            "slice" => Ok(ConvEngine::SliceDecomposed),
            "naive" => Ok(ConvEngine::NaiveReference),
            other => Err(Error::Config(format!(
                "engine {other:?} is not one of gemm, slice, naive"
            ))),
        }
    }

    pub fn init_seed(&self) -> Result<u64> {
        self.parse("net.init_seed")
    }

    pub fn score_threshold(&self) -> Result<f32> {
        self.parse("eval.score_threshold")
    }

    pub fn nms_iou(&self) -> Result<f64> {
        self.parse("eval.nms_iou")
    }
}
