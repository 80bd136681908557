//! Trained parameters and their on-disk format.
//!
//! A model file is an ASCII header followed by raw little-endian `f64`
//! values:
//!
//! ```text
//! STRACK-MODEL 1
//! config patch_extent=96
//! ...
//! tensor backbone.spatial.0.weight 16,3,3,3
//! ...
//! data
//! <binary payload, tensors in header order>
//! ```

use std::fs;
use std::path::Path;

use crate::backbone::{make_toy_backbone, BackboneMode, BackboneParams};
use crate::error::{Error, Result};
use crate::estimator::IouHeadParams;
use crate::fam::FamParams;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tracker::TrackerConfig;

pub const MAGIC: &str = "STRACK-MODEL";
pub const FORMAT_VERSION: u32 = 1;
pub const HEAD_HIDDEN: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    /// Defaults for tracking; the architecture fields must match the
    /// tensors below.
    pub config: TrackerConfig,
    pub spatial: BackboneParams<T>,
    pub temporal: BackboneParams<T>,
    /// Shallow-tap and deep-tap modules.
    pub fam: (FamParams<T>, FamParams<T>),
    pub head: IouHeadParams<T>,
}

impl<T: Scalar> Model<T> {
    /// Untrained model: random frozen backbones, fresh FAM modules and head.
    pub fn fresh(config: &TrackerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let c = config.channels;
        let spatial = make_toy_backbone(
            rng.next_u64(),
            BackboneMode::Spatial,
            c,
            config.downsample_factors,
            config.patch_extent,
            1,
        )?;
        let temporal = make_toy_backbone(
            rng.next_u64(),
            BackboneMode::Temporal,
            c,
            config.downsample_factors,
            config.patch_extent,
            config.clip_len,
        )?;
        let fam = (
            FamParams::init(config.fusion_mode, c, &mut rng)?,
            FamParams::init(config.fusion_mode, c, &mut rng)?,
        );
        let head = IouHeadParams::init(c, c, HEAD_HIDDEN, &mut rng);
        Ok(Model {
            config: config.clone(),
            spatial,
            temporal,
            fam,
            head,
        })
    }

    /// The tracking configuration must describe the same architecture.
    pub fn check_compatible(&self, config: &TrackerConfig) -> Result<()> {
        let m = &self.config;
        let mismatch = |what: &str, model: String, cfg: String| {
            Err(Error::Model(format!("{what} is {model} in the model but {cfg} in the configuration")))
        };
        if m.patch_extent != config.patch_extent {
            return mismatch("patch_extent", m.patch_extent.to_string(), config.patch_extent.to_string());
        }
        if m.channels != config.channels {
            return mismatch("channels", m.channels.to_string(), config.channels.to_string());
        }
        if m.downsample_factors != config.downsample_factors {
            return mismatch(
                "downsample_factors",
                format!("{:?}", m.downsample_factors),
                format!("{:?}", config.downsample_factors),
            );
        }
        if m.clip_len != config.clip_len {
            return mismatch("clip_len", m.clip_len.to_string(), config.clip_len.to_string());
        }
        if self.fam.0.mode != config.fusion_mode {
            return mismatch("fusion_mode", self.fam.0.mode.to_string(), config.fusion_mode.to_string());
        }
        Ok(())
    }

    /// Calls `f` on every stored tensor in file order.
    fn visit(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [T]) -> Result<()>) -> Result<()> {
        for (name, bb) in [("spatial", &mut self.spatial), ("temporal", &mut self.temporal)] {
            for (i, k) in bb.stages.iter_mut().enumerate() {
                let shape = k.weights.shape().to_vec();
                f(&format!("backbone.{name}.{i}.weight"), &shape, k.weights.data_mut())?;
                if let Some(b) = &mut k.bias {
                    let shape = b.shape().to_vec();
                    f(&format!("backbone.{name}.{i}.bias"), &shape, b.data_mut())?;
                }
            }
        }
        for (name, p) in [("shallow", &mut self.fam.0), ("deep", &mut self.fam.1)] {
            if let Some(k) = &mut p.fusion_conv {
                let shape = k.weights.shape().to_vec();
                f(&format!("fam.{name}.fusion.weight"), &shape, k.weights.data_mut())?;
                if let Some(b) = &mut k.bias {
                    let shape = b.shape().to_vec();
                    f(&format!("fam.{name}.fusion.bias"), &shape, b.data_mut())?;
                }
            }
            let shape = p.awp_conv.weights.shape().to_vec();
            f(&format!("fam.{name}.awp.weight"), &shape, p.awp_conv.weights.data_mut())?;
            if let Some(b) = &mut p.awp_conv.bias {
                let shape = b.shape().to_vec();
                f(&format!("fam.{name}.awp.bias"), &shape, b.data_mut())?;
            }
            f(&format!("fam.{name}.amplification"), &[1], std::slice::from_mut(&mut p.amplification))?;
            let shape = p.attn_kernel.shape().to_vec();
            f(&format!("fam.{name}.attention.kernel"), &shape, p.attn_kernel.data_mut())?;
            f(&format!("fam.{name}.attention.bias"), &[1], std::slice::from_mut(&mut p.attn_bias))?;
        }
        let h = &mut self.head;
        for (name, g) in [("w1", &mut h.w1), ("b1", &mut h.b1), ("w2", &mut h.w2), ("b2", &mut h.b2)] {
            let shape = g.shape().to_vec();
            f(&format!("head.{name}"), &shape, g.data_mut())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{MAGIC} {FORMAT_VERSION}\n");
        for (k, v) in config_entries(&self.config) {
            header.push_str(&format!("config {k}={v}\n"));
        }
        let mut payload = Vec::new();
        let mut copy = self.clone();
        copy.visit(&mut |name, shape, data| {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("tensor {name} {}\n", dims.join(",")));
            for v in data.iter() {
                payload.extend_from_slice(&v.as_f64().to_le_bytes());
            }
            Ok(())
        })
        .expect("serialization visitor does not fail");
        header.push_str("data\n");
        let mut out = header.into_bytes();
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut next_line = || -> Result<String> {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Model("truncated header".into()))?;
            let line = std::str::from_utf8(&bytes[pos..pos + end])
                .map_err(|_| Error::Model("header is not ASCII".into()))?
                .to_string();
            pos += end + 1;
            Ok(line)
        };
        let first = next_line()?;
        let version = first
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| Error::Model("not a model file".into()))?;
        if version != FORMAT_VERSION.to_string() {
            return Err(Error::Model(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let mut config = TrackerConfig::default();
        let mut tensors: Vec<(String, Vec<usize>)> = Vec::new();
        loop {
            let line = next_line()?;
            if line == "data" {
                break;
            }
            if let Some(kv) = line.strip_prefix("config ") {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::Model(format!("bad config line `{line}`")))?;
                set_config_entry(&mut config, k, v)?;
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let (name, dims) = rest
                    .split_once(' ')
                    .ok_or_else(|| Error::Model(format!("bad tensor line `{line}`")))?;
                let shape = dims
                    .split(',')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::Model(format!("bad shape in `{line}`")))?;
                tensors.push((name.to_string(), shape));
            } else {
                return Err(Error::Model(format!("unexpected header line `{line}`")));
            }
        }
        let payload = &bytes[pos..];
        let mut model = Model::fresh(&config, 0)?;
        let mut idx = 0;
        let mut off = 0;
        model.visit(&mut |name, shape, data| {
            let (n, s) = tensors
                .get(idx)
                .ok_or_else(|| Error::Model(format!("missing tensor {name}")))?;
            if n != name || s != shape {
                return Err(Error::Model(format!(
                    "tensor {idx}: expected {name} {shape:?}, found {n} {s:?}"
                )));
            }
            idx += 1;
            for v in data.iter_mut() {
                let chunk = payload
                    .get(off..off + 8)
                    .ok_or_else(|| Error::Model("payload truncated".into()))?;
                *v = T::of(f64::from_le_bytes(chunk.try_into().expect("8 bytes")));
                off += 8;
            }
            Ok(())
        })?;
        if idx != tensors.len() {
            return Err(Error::Model(format!("{} unexpected extra tensors", tensors.len() - idx)));
        }
        if off != payload.len() {
            return Err(Error::Model(format!("{} trailing payload bytes", payload.len() - off)));
        }
        Ok(model)
    }

    pub fn store(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Model::from_bytes(&bytes).map_err(|e| match e {
            Error::Model(m) => Error::Model(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn config_entries(c: &TrackerConfig) -> Vec<(&'static str, String)> {
    vec![
        ("patch_extent", c.patch_extent.to_string()),
        ("search_scale", c.search_scale.to_string()),
        ("clip_len", c.clip_len.to_string()),
        ("update_period", c.update_period.to_string()),
        ("init_augmentations", c.init_augmentations.to_string()),
        ("stream_mode", c.stream_mode.to_string()),
        ("fusion_mode", c.fusion_mode.to_string()),
        ("attention", if c.attention { "on" } else { "off" }.to_string()),
        ("pooling", c.pooling.to_string()),
        ("scorer", c.scorer.to_string()),
        ("seed", c.seed.to_string()),
        ("channels", c.channels.to_string()),
        (
            "downsample_factors",
            format!("{},{}", c.downsample_factors.0, c.downsample_factors.1),
        ),
        ("proposals", c.proposals.to_string()),
        ("proposal_noise", c.proposal_noise.to_string()),
        ("lost_ratio", c.lost_ratio.to_string()),
        ("window_influence", c.window_influence.to_string()),
    ]
}

pub fn parse_switch(v: &str) -> Result<bool> {
    match v {
        "on" => Ok(true),
        "off" => Ok(false),
        _ => Err(Error::InvalidArgument(format!("expected on|off, got `{v}`"))),
    }
}

fn set_config_entry(c: &mut TrackerConfig, k: &str, v: &str) -> Result<()> {
    fn num<N: std::str::FromStr>(k: &str, v: &str) -> Result<N> {
        v.parse()
            .map_err(|_| Error::Model(format!("bad value `{v}` for config key {k}")))
    }
    match k {
        "patch_extent" => c.patch_extent = num(k, v)?,
        "search_scale" => c.search_scale = num(k, v)?,
        "clip_len" => c.clip_len = num(k, v)?,
        "update_period" => c.update_period = num(k, v)?,
        "init_augmentations" => c.init_augmentations = num(k, v)?,
        "stream_mode" => c.stream_mode = v.parse()?,
        "fusion_mode" => c.fusion_mode = v.parse()?,
        "attention" => c.attention = parse_switch(v)?,
        "pooling" => c.pooling = v.parse()?,
        "scorer" => c.scorer = v.parse()?,
        "seed" => c.seed = num(k, v)?,
        "channels" => c.channels = num(k, v)?,
        "downsample_factors" => {
            let (a, b) = v
                .split_once(',')
                .ok_or_else(|| Error::Model(format!("bad downsample_factors `{v}`")))?;
            c.downsample_factors = (num(k, a)?, num(k, b)?);
        }
        "proposals" => c.proposals = num(k, v)?,
        "proposal_noise" => c.proposal_noise = num(k, v)?,
        "lost_ratio" => c.lost_ratio = num(k, v)?,
        "window_influence" => c.window_influence = num(k, v)?,
        _ => return Err(Error::Model(format!("unknown config key `{k}`"))),
    }
    Ok(())
}
