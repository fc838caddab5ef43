//! `key = value` configuration files over [`ModelConfig`] field names.
//!
//! Blank lines and `#` comments are skipped. Unknown or repeated keys and
//! unparsable values are errors; absent keys keep their defaults.
//! `pretrained = none` (or an empty value) clears the checkpoint path.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use dbsam_core::ModelConfig;

use crate::{Error, Result};

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Format(format!("config key {key}: cannot parse {raw:?}")))
}

macro_rules! fields {
    ($($f:ident),* $(,)?) => {
        /// Every accepted key, in declaration order.
        pub const KEYS: &[&str] = &[$(stringify!($f),)* "pretrained"];

        fn set(c: &mut ModelConfig, key: &str, raw: &str) -> Result<()> {
            match key {
                $(stringify!($f) => c.$f = value(key, raw)?,)*
                "pretrained" => {
                    c.pretrained = match raw {
                        "" | "none" => None,
                        p => Some(p.to_string()),
                    }
                }
                _ => return Err(Error::Format(format!("unknown config key {key:?}"))),
            }
            Ok(())
        }

        /// Writes every key, so the text reproduces `c` exactly.
        pub fn to_string(c: &ModelConfig) -> String {
            let mut s = String::new();
            $(writeln!(s, "{} = {}", stringify!($f), c.$f).unwrap();)*
            writeln!(s, "pretrained = {}", c.pretrained.as_deref().unwrap_or("none")).unwrap();
            s
        }

        // fails to compile when a field is missing from the list
        #[allow(dead_code)]
        fn exhaustive(c: ModelConfig) {
            let ModelConfig { $($f: _,)* pretrained: _ } = c;
        }
    };
}

fields!(
    image_size_vit,
    patch_size,
    embed_dim,
    num_heads,
    depth,
    num_stages,
    mlp_ratio,
    se_reduction,
    drop_path_rate,
    vit_seed,
    image_size_conv,
    out_channels,
    deform_heads,
    num_points,
    offset_scale,
    gate_reduction,
    use_channel_attention,
    use_bilateral,
    use_fusion,
    drop_rate,
    lr0,
    epochs,
    poly_power,
    weight_decay,
    beta1,
    beta2,
    batch_size,
    seed,
    max_shift,
    tolerance,
);

/// Applies the assignments in `text` on top of `base`, then validates.
pub fn parse_onto(base: ModelConfig, text: &str) -> Result<ModelConfig> {
    let mut c = base;
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, raw) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected `key = value`", i + 1)))?;
        let key = key.trim();
        if !seen.insert(key.to_string()) {
            return Err(Error::Format(format!("line {}: duplicate key {key:?}", i + 1)));
        }
        set(&mut c, key, raw.trim()).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("line {}: {m}", i + 1)),
            e => e,
        })?;
    }
    c.validate()?;
    Ok(c)
}

pub fn parse(text: &str) -> Result<ModelConfig> {
    parse_onto(ModelConfig::default(), text)
}

pub fn load(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::at(path, e))?;
    parse(&text).map_err(|e| e.in_file(path))
}

pub fn save(path: &Path, c: &ModelConfig) -> Result<()> {
    std::fs::write(path, to_string(c)).map_err(|e| Error::at(path, e))
}
