//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Model and training keys may be
//! overridden for one ensemble member with a `member.<i>.` prefix (1-based),
//! for example `member.2.learning_rate = 0.0005`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::{ExtractConfig, SizePolicy};
use crate::ensemble::{member_configs, Fusion, MemberConfig};
use crate::error::{Error, Result};
use crate::losses::{FtlExponent, LossConfig, LossKind};
use crate::network::{ModelSpec, Variant};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub extract: ExtractConfig,
    pub fusion: Fusion,
    pub vote_threshold: f32,
    /// Raw per-member overrides keyed by 1-based member index.
    pub member_overrides: BTreeMap<usize, Vec<(String, String)>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            extract: ExtractConfig::default(),
            fusion: Fusion::Majority,
            vote_threshold: 0.5,
            member_overrides: BTreeMap::new(),
        }
    }
}

fn parse_num<V: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<V, String> {
    v.parse().map_err(|_| format!("{key}: cannot parse `{v}`"))
}

fn parse_bool(key: &str, v: &str) -> std::result::Result<bool, String> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("{key}: expected a boolean, got `{v}`")),
    }
}

/// Applies one model or training key. Returns `Ok(false)` when the key is
/// not a model/training key.
fn apply_member_key(model: &mut ModelSpec, train: &mut TrainConfig, key: &str, v: &str) -> std::result::Result<bool, String> {
    match key {
        "variant" => model.variant = Variant::parse(v).map_err(|e| format!("{key}: {e}"))?,
        "base_channels" => model.base_channels = parse_num(key, v)?,
        "dilation_rates" => {
            model.dilation_rates =
                v.split(',').map(|s| parse_num(key, s.trim())).collect::<std::result::Result<Vec<usize>, _>>()?
        }
        "input_size" => {
            let parts: Vec<&str> = v.split(['x', 'X']).map(str::trim).collect();
            model.input_size = match parts.as_slice() {
                [s] => (parse_num(key, s)?, parse_num(key, s)?),
                [h, w] => (parse_num(key, h)?, parse_num(key, w)?),
                _ => return Err(format!("{key}: expected N or HxW, got `{v}`")),
            }
        }
        "init_seed" => model.init_seed = parse_num(key, v)?,
        "dropout_p" => model.dropout_p = parse_num(key, v)?,
        "batch_size" => train.batch_size = parse_num(key, v)?,
        "epochs" => train.epochs = parse_num(key, v)?,
        "learning_rate" => train.learning_rate = parse_num(key, v)?,
        "seed" => train.seed = parse_num(key, v)?,
        "infected_oversample" => train.infected_oversample = parse_num(key, v)?,
        "threshold" => train.threshold = parse_num(key, v)?,
        "loss" => {
            let kind = LossKind::parse(v).ok_or_else(|| format!("{key}: unknown loss `{v}`"))?;
            train.loss = LossConfig::new(kind);
        }
        "loss.alpha" => train.loss.alpha = parse_num(key, v)?,
        "loss.beta" => train.loss.beta = parse_num(key, v)?,
        "loss.gamma" => train.loss.gamma = parse_num(key, v)?,
        "loss.smooth" => train.loss.smooth = parse_num(key, v)?,
        "loss.ftl_exponent" => {
            train.loss.ftl_exponent = match v.to_ascii_lowercase().as_str() {
                "reciprocal" => FtlExponent::Reciprocal,
                "direct" => FtlExponent::Direct,
                _ => return Err(format!("{key}: expected reciprocal or direct, got `{v}`")),
            }
        }
        "augment" => train.augment.enabled = parse_bool(key, v)?,
        "augment.rotation_deg" => train.augment.rotation_deg = parse_num(key, v)?,
        "augment.shift_frac" => train.augment.shift_frac = parse_num(key, v)?,
        "augment.zoom_frac" => train.augment.zoom_frac = parse_num(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// `loss` resets the loss parameters, so it is applied before its sub-keys.
fn key_rank(key: &str) -> u8 {
    (key != "loss") as u8
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut problems = Vec::new();
        let mut entries: Vec<(usize, String, String)> = Vec::new();
        let mut seen = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                problems.push(format!("line {}: expected `key = value`", n + 1));
                continue;
            };
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if let Some(prev) = seen.insert(k.clone(), n + 1) {
                problems.push(format!("line {}: `{k}` already set on line {prev}", n + 1));
                continue;
            }
            entries.push((n + 1, k, v));
        }
        entries.sort_by_key(|(line, k, _)| (key_rank(k), *line));

        let mut cfg = RunConfig::default();
        for (line, key, v) in &entries {
            let res = if let Some(rest) = key.strip_prefix("member.") {
                match rest.split_once('.') {
                    Some((idx, sub)) => match idx.parse::<usize>() {
                        Ok(i) if i >= 1 => {
                            let mut m = cfg.model.clone();
                            let mut t = cfg.train.clone();
                            match apply_member_key(&mut m, &mut t, sub, v) {
                                Ok(true) => {
                                    cfg.member_overrides.entry(i).or_default().push((sub.to_string(), v.clone()));
                                    Ok(())
                                }
                                Ok(false) => Err(format!("unknown member key `{sub}`")),
                                Err(e) => Err(e),
                            }
                        }
                        _ => Err(format!("bad member index `{idx}`")),
                    },
                    None => Err("member override needs `member.<i>.<key>`".to_string()),
                }
            } else {
                match apply_member_key(&mut cfg.model, &mut cfg.train, key, v) {
                    Ok(true) => Ok(()),
                    Err(e) => Err(e),
                    Ok(false) => cfg.apply_run_key(key, v),
                }
            };
            if let Err(e) = res {
                problems.push(format!("line {line}: {e}"));
            }
        }
        if let Err(e) = cfg.model.validate() {
            problems.extend(flatten(e));
        }
        if let Err(e) = cfg.train.validate() {
            problems.extend(flatten(e));
        }
        if cfg.extract.patch_size != cfg.model.input_size.0 || cfg.model.input_size.0 != cfg.model.input_size.1 {
            problems.push(format!(
                "input_size {:?} must be square and equal to patch.size {}",
                cfg.model.input_size, cfg.extract.patch_size
            ));
        }
        if !(0.0..=1.0).contains(&cfg.vote_threshold) {
            problems.push(format!("vote_threshold must lie in [0, 1], got {}", cfg.vote_threshold));
        }
        match problems.len() {
            0 => Ok(cfg),
            1 => Err(Error::Config(problems.remove(0))),
            _ => Err(Error::ConfigKeys(problems)),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn apply_run_key(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "patch.size" => self.extract.patch_size = parse_num(key, v)?,
            "patch.roi_boxes" => self.extract.roi_boxes = parse_num(key, v)?,
            "patch.boundary" => self.extract.boundary_patches = parse_bool(key, v)?,
            "patch.non_infected" => self.extract.non_infected_patches = parse_num(key, v)?,
            "size_policy" => self.extract.size_policy = SizePolicy::parse(v).map_err(|e| format!("{key}: {e}"))?,
            "fusion" => self.fusion = Fusion::parse(v).map_err(|e| format!("{key}: {e}"))?,
            "vote_threshold" => self.vote_threshold = parse_num(key, v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Member configurations: seeds offset by member index, then any
    /// `member.<i>.` overrides.
    pub fn members(&self, n: usize) -> Result<Vec<MemberConfig>> {
        let mut out = member_configs(&self.model, &self.train, n);
        if let Some(&i) = self.member_overrides.keys().find(|&&i| i > n) {
            return Err(Error::config(format!("override for member {i} but only {n} members")));
        }
        for (i, m) in out.iter_mut().enumerate() {
            for (k, v) in self.member_overrides.get(&(i + 1)).into_iter().flatten() {
                apply_member_key(&mut m.spec, &mut m.train, k, v).map_err(Error::Config)?;
            }
            m.spec.validate()?;
            m.train.validate()?;
        }
        Ok(out)
    }

    /// Canonical text form; parsing it yields an equal configuration.
    pub fn render(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let rates: Vec<String> = m.dilation_rates.iter().map(usize::to_string).collect();
        let mut lines = vec![
            format!("variant = {}", m.variant.name()),
            format!("base_channels = {}", m.base_channels),
            format!("dilation_rates = {}", rates.join(",")),
            format!("input_size = {}x{}", m.input_size.0, m.input_size.1),
            format!("init_seed = {}", m.init_seed),
            format!("dropout_p = {:?}", m.dropout_p),
            format!("batch_size = {}", t.batch_size),
            format!("epochs = {}", t.epochs),
            format!("learning_rate = {:?}", t.learning_rate),
            format!("seed = {}", t.seed),
            format!("infected_oversample = {}", t.infected_oversample),
            format!("threshold = {:?}", t.threshold),
            format!("loss = {}", t.loss.kind.name()),
            format!("loss.alpha = {:?}", t.loss.alpha),
            format!("loss.beta = {:?}", t.loss.beta),
            format!("loss.gamma = {:?}", t.loss.gamma),
            format!("loss.smooth = {:?}", t.loss.smooth),
            format!(
                "loss.ftl_exponent = {}",
                match t.loss.ftl_exponent {
                    FtlExponent::Reciprocal => "reciprocal",
                    FtlExponent::Direct => "direct",
                }
            ),
            format!("augment = {}", t.augment.enabled),
            format!("augment.rotation_deg = {:?}", t.augment.rotation_deg),
            format!("augment.shift_frac = {:?}", t.augment.shift_frac),
            format!("augment.zoom_frac = {:?}", t.augment.zoom_frac),
            format!("patch.size = {}", self.extract.patch_size),
            format!("patch.roi_boxes = {}", self.extract.roi_boxes),
            format!("patch.boundary = {}", self.extract.boundary_patches),
            format!("patch.non_infected = {}", self.extract.non_infected_patches),
            format!(
                "size_policy = {}",
                match self.extract.size_policy {
                    SizePolicy::Reject => "reject",
                    SizePolicy::Resample => "resample",
                }
            ),
            format!("fusion = {}", self.fusion.name()),
            format!("vote_threshold = {:?}", self.vote_threshold),
        ];
        for (i, kv) in &self.member_overrides {
            for (k, v) in kv {
                lines.push(format!("member.{i}.{k} = {v}"));
            }
        }
        lines.join("\n") + "\n"
    }
}

fn flatten(e: Error) -> Vec<String> {
    match e {
        Error::ConfigKeys(v) => v,
        Error::Config(s) => vec![s],
        other => vec![other.to_string()],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_round_trips() {
        let text = "# toy run\nvariant = UNET\nbase_channels = 4\ninput_size = 32\npatch.size = 32\n\
                    loss.alpha = 0.6\nloss = TL\nepochs = 3\nmember.2.learning_rate = 0.0005\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.model.variant, Variant::UNet);
        assert_eq!(cfg.train.loss.kind, LossKind::Tversky);
        assert_eq!((cfg.train.loss.alpha, cfg.train.loss.beta), (0.6, 0.3));
        assert_eq!(RunConfig::parse(&cfg.render()).unwrap(), cfg);
        let members = cfg.members(3).unwrap();
        assert_eq!(members[1].train.learning_rate, 0.0005);
        assert_eq!(members[2].train.learning_rate, 0.001);
        assert_ne!(members[0].spec.init_seed, members[1].spec.init_seed);
        assert!(cfg.members(1).is_err());
    }

    #[test]
    fn enumerates_every_bad_key() {
        let text = "epochs = many\nfoo = 1\nbatch_size = 0\nvariant = r2unet\nnot a pair\nmember.x.epochs = 2\n";
        match RunConfig::parse(text) {
            Err(Error::ConfigKeys(p)) => {
                assert_eq!(p.len(), 6, "{p:?}");
                assert!(p.iter().any(|s| s.contains("foo")));
                assert!(p.iter().any(|s| s.contains("batch_size")));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
