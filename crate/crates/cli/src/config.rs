//! Flat `key = value` experiment configuration.
//!
//! `#` starts a comment, blank lines are ignored and every key has a
//! default, so an empty file is a complete config. Rendering writes every
//! key, and floats use the shortest round-tripping form, so
//! `parse(render(c)) == c`.

use anyhow::{anyhow, bail, Context, Result};
use falcon_lab::adaptation::{AblationSwitches, TrainConfig};
use falcon_lab::scenes::DatasetConfig;
use std::collections::HashSet;
use std::path::{Path, PathBuf};

/// Settings of the bound verifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundsSettings {
    /// Monte-Carlo samples per verifier.
    pub samples: usize,
    /// Probe pairs per radius for the loss-difference bound.
    pub pairs: usize,
    /// Symmetric noise rate of the transition matrix.
    pub noise_rate: f64,
    pub num_classes: usize,
    pub tau: f64,
    /// Replaces λ in the classification bound when set. Only useful for
    /// exercising the failure path.
    pub claimed_lambda: Option<f64>,
}

impl Default for BoundsSettings {
    fn default() -> Self {
        BoundsSettings {
            samples: 100_000,
            pairs: 10_000,
            noise_rate: 0.2,
            num_classes: 3,
            tau: 0.5,
            claimed_lambda: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub switches: AblationSwitches,
    pub dataset: DatasetConfig,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Training seeds used by `sweep`.
    pub seeds: Vec<u64>,
    pub eval_iou: f64,
    pub bounds: BoundsSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train: TrainConfig::default(),
            switches: AblationSwitches::default(),
            dataset: DatasetConfig::default(),
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            seeds: vec![0, 1, 2],
            eval_iou: 0.5,
            bounds: BoundsSettings::default(),
        }
    }
}

/// A value that can live on the right of `key = value`.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Option<Self>;
    fn render_value(&self) -> String;
}

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok().filter(|v: &f64| v.is_finite())
    }
    fn render_value(&self) -> String {
        format!("{self:?}")
    }
}

macro_rules! int_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn render_value(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
int_value!(usize, u64);

impl ConfigValue for bool {
    fn parse_value(s: &str) -> Option<Self> {
        match s {
            "true" => Some(true),
            "false" => Some(false),
            _ => None,
        }
    }
    fn render_value(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for PathBuf {
    fn parse_value(s: &str) -> Option<Self> {
        (!s.is_empty()).then(|| PathBuf::from(s))
    }
    fn render_value(&self) -> String {
        self.to_string_lossy().into_owned()
    }
}

impl<T: ConfigValue> ConfigValue for Option<T> {
    fn parse_value(s: &str) -> Option<Self> {
        if s == "none" {
            Some(None)
        } else {
            T::parse_value(s).map(Some)
        }
    }
    fn render_value(&self) -> String {
        self.as_ref().map_or_else(|| "none".into(), T::render_value)
    }
}

/// Comma-separated, at least one element.
impl<T: ConfigValue> ConfigValue for Vec<T> {
    fn parse_value(s: &str) -> Option<Self> {
        s.split(',').map(|p| T::parse_value(p.trim())).collect::<Option<Vec<T>>>().filter(|v| !v.is_empty())
    }
    fn render_value(&self) -> String {
        self.iter().map(T::render_value).collect::<Vec<_>>().join(",")
    }
}

impl<A: ConfigValue, B: ConfigValue> ConfigValue for (A, B) {
    fn parse_value(s: &str) -> Option<Self> {
        let (a, b) = s.split_once(',')?;
        Some((A::parse_value(a.trim())?, B::parse_value(b.trim())?))
    }
    fn render_value(&self) -> String {
        format!("{},{}", self.0.render_value(), self.1.render_value())
    }
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+),* $(,)?) => {
        /// Every accepted key, in rendering order.
        pub const KEYS: &[&str] = &[$($key),*];

        impl ExperimentConfig {
            /// Parses `value` into the field named by `key`.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => {
                        self.$($field).+ = ConfigValue::parse_value(value)
                            .ok_or_else(|| anyhow!("invalid value {value:?} for key {key}"))?;
                    })*
                    _ => bail!("unknown config key {key:?}"),
                }
                Ok(())
            }

            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, self.$($field).+.render_value())),*]
            }
        }
    };
}

config_keys! {
    "seed" => train.seed,
    "seeds" => seeds,
    "data_dir" => data_dir,
    "out_dir" => out_dir,
    "eval_iou" => eval_iou,

    "train.lr_source" => train.lr_source,
    "train.lr_adapt" => train.lr_adapt,
    "train.batch" => train.batch,
    "train.ema_delta" => train.ema_delta,
    "train.score_threshold" => train.score_threshold,
    "train.nms_iou" => train.nms_iou,
    "train.steps_source" => train.steps_source,
    "train.steps_adapt" => train.steps_adapt,
    "train.bg_sample_count" => train.bg_sample_count,
    "train.ema_per_epoch" => train.ema_per_epoch,
    "train.noisy_prior" => train.noisy_prior,
    "train.pretrain_spar" => train.pretrain_spar,

    "irpl.m" => train.irpl.m,
    "irpl.alpha" => train.irpl.alpha,
    "irpl.beta" => train.irpl.beta,
    "irpl.gamma" => train.irpl.gamma,
    "irpl.w_fg" => train.irpl.w_fg,
    "irpl.w_bg" => train.irpl.w_bg,
    "irpl.peak_adjust" => train.irpl.peak_adjust,

    "spar.lambda1" => train.spar.lambda1,
    "spar.lambda2" => train.spar.lambda2,
    "spar.epsilon" => train.spar.epsilon,

    "ablation.use_spar" => switches.use_spar,
    "ablation.use_irpl" => switches.use_irpl,
    "ablation.use_peak_adjust" => switches.use_peak_adjust,
    "ablation.use_fgbg_weighting" => switches.use_fgbg_weighting,
    "ablation.use_kl" => switches.use_kl,
    "ablation.mask_filter_only" => switches.mask_filter_only,

    "data.seed" => dataset.seed,
    "data.source_train" => dataset.source_train,
    "data.source_val" => dataset.source_val,
    "data.target_train" => dataset.target_train,
    "data.target_val" => dataset.target_val,

    "source.min_objects" => dataset.source_spec.min_objects,
    "source.max_objects" => dataset.source_spec.max_objects,
    "source.class_weights" => dataset.source_spec.class_weights,
    "source.min_size" => dataset.source_spec.min_size,
    "source.max_size" => dataset.source_spec.max_size,
    "source.intensity_min" => dataset.source_spec.intensity_min,
    "source.intensity_max" => dataset.source_spec.intensity_max,
    "source.background" => dataset.source_spec.background,
    "source.max_pair_iou" => dataset.source_spec.max_pair_iou,

    "target.min_objects" => dataset.target_spec.min_objects,
    "target.max_objects" => dataset.target_spec.max_objects,
    "target.class_weights" => dataset.target_spec.class_weights,
    "target.min_size" => dataset.target_spec.min_size,
    "target.max_size" => dataset.target_spec.max_size,
    "target.intensity_min" => dataset.target_spec.intensity_min,
    "target.intensity_max" => dataset.target_spec.intensity_max,
    "target.background" => dataset.target_spec.background,
    "target.max_pair_iou" => dataset.target_spec.max_pair_iou,

    "shift.fog_alpha" => dataset.shift.fog_alpha,
    "shift.clutter_count" => dataset.shift.clutter_count,
    "shift.clutter_intensity" => dataset.shift.clutter_intensity,
    "shift.clutter_size" => dataset.shift.clutter_size,
    "shift.brightness_offset" => dataset.shift.brightness_offset,

    "bounds.samples" => bounds.samples,
    "bounds.pairs" => bounds.pairs,
    "bounds.noise_rate" => bounds.noise_rate,
    "bounds.num_classes" => bounds.num_classes,
    "bounds.tau" => bounds.tau,
    "bounds.claimed_lambda" => bounds.claimed_lambda,
}

impl ExperimentConfig {
    /// Parses config text on top of the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected key = value", i + 1))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                bail!("line {}: duplicate key {key}", i + 1);
            }
            cfg.set(key, value.trim()).with_context(|| format!("line {}", i + 1))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("config {}", path.display()))
    }

    pub fn render(&self) -> String {
        let mut out = String::from("# falcon-lab experiment config\n");
        for (key, value) in self.entries() {
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.switches.validate()?;
        self.dataset.source_spec.validate()?;
        self.dataset.target_spec.validate()?;
        self.dataset.shift.validate()?;
        if !(self.eval_iou > 0.0 && self.eval_iou <= 1.0) {
            bail!("eval_iou must lie in (0, 1]");
        }
        if self.seeds.is_empty() {
            bail!("seeds must not be empty");
        }
        let b = &self.bounds;
        if b.samples == 0 || b.num_classes < 2 {
            bail!("bounds need samples and at least two classes");
        }
        if !(0.0..1.0).contains(&b.noise_rate) {
            bail!("bounds.noise_rate must lie in [0, 1)");
        }
        if !(b.tau > 0.0 && b.tau <= 1.0) {
            bail!("bounds.tau must lie in (0, 1]");
        }
        if b.claimed_lambda.is_some_and(|l| !(l > 0.0)) {
            bail!("bounds.claimed_lambda must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text_is_the_default() {
        assert_eq!(ExperimentConfig::parse("").unwrap(), ExperimentConfig::default());
        assert_eq!(ExperimentConfig::parse("# only a comment\n\n").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn every_key_is_rendered_once() {
        let text = ExperimentConfig::default().render();
        let keys: Vec<&str> = text.lines().skip(1).map(|l| l.split(" = ").next().unwrap()).collect();
        assert_eq!(keys, KEYS);
    }

    #[test]
    fn default_round_trip() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&cfg.render()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_spacing() {
        let cfg = ExperimentConfig::parse("seed=7 # trailing\n  spar.lambda1 =  0.5\nseeds = 1, 2\n").unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.train.spar.lambda1, 0.5);
        assert_eq!(cfg.seeds, vec![1, 2]);
    }

    #[test]
    fn errors_name_the_line() {
        for (text, needle) in [
            ("nope = 1", "unknown config key"),
            ("seed = x", "invalid value"),
            ("seed 1", "expected key = value"),
            ("seed = 1\nseed = 2", "duplicate key"),
            ("train.ema_delta = 1.5", "invalid configuration"),
            ("irpl.m = 0", "margin"),
            ("bounds.claimed_lambda = -1", "claimed_lambda"),
            ("ablation.mask_filter_only = true", "mask_filter_only"),
        ] {
            let err = format!("{:#}", ExperimentConfig::parse(text).unwrap_err());
            assert!(err.contains(needle), "{text:?}: {err}");
        }
    }

    #[test]
    fn optional_and_tuple_values() {
        let cfg = ExperimentConfig::parse("bounds.claimed_lambda = 0.5\nshift.clutter_size = 2,6").unwrap();
        assert_eq!(cfg.bounds.claimed_lambda, Some(0.5));
        assert_eq!(cfg.dataset.shift.clutter_size, (2, 6));
        let back = ExperimentConfig::parse(&cfg.render()).unwrap();
        assert_eq!(back, cfg);
        assert!(ExperimentConfig::parse("seeds = ").is_err());
        assert!(ExperimentConfig::parse("train.lr_source = inf").is_err());
    }

    fn unit() -> impl Strategy<Value = f64> {
        prop_oneof![0.0f64..=1.0, Just(0.1), Just(1.0 / 3.0), Just(1e-7)]
    }

    prop_compose! {
        fn valid_config()(
            seed in any::<u64>(),
            seeds in prop::collection::vec(any::<u64>(), 1..4),
            lr in 1e-6f64..1.0,
            ema in unit(),
            thr in unit(),
            steps in 0usize..5000,
            bg in 0usize..64,
            flags in prop::collection::vec(any::<bool>(), 7),
            m in 1e-3f64..1e6,
            lambdas in (0.0f64..5.0, 0.0f64..5.0),
            weights in prop::collection::vec(0.01f64..3.0, 3),
            fog in unit(),
            clutter in (0usize..20, 1usize..10),
            claimed in prop::option::of(0.01f64..2.0),
            dir in "[a-z][a-z0-9_/]{0,12}",
        ) -> ExperimentConfig {
            let mut c = ExperimentConfig::default();
            c.train.seed = seed;
            c.seeds = seeds;
            c.train.lr_adapt = lr;
            c.train.ema_delta = ema;
            c.train.score_threshold = thr;
            c.train.steps_adapt = steps;
            c.train.bg_sample_count = bg;
            c.train.ema_per_epoch = flags[0];
            c.train.irpl.m = m;
            c.train.spar.lambda1 = lambdas.0;
            c.train.spar.lambda2 = lambdas.1;
            c.switches.use_spar = flags[1] && !flags[6];
            c.switches.use_irpl = flags[2];
            c.switches.use_peak_adjust = flags[3];
            c.switches.use_fgbg_weighting = flags[4];
            c.switches.use_kl = flags[5];
            c.switches.mask_filter_only = flags[6];
            c.dataset.target_spec.class_weights = weights;
            c.dataset.shift.fog_alpha = fog;
            c.dataset.shift.clutter_count = clutter.0;
            c.dataset.shift.clutter_size = (clutter.1, clutter.1 + 3);
            c.bounds.claimed_lambda = claimed;
            c.out_dir = PathBuf::from(dir);
            c
        }
    }

    proptest! {
        #[test]
        fn parse_render_round_trip(cfg in valid_config()) {
            prop_assume!(cfg.validate().is_ok());
            let text = cfg.render();
            prop_assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
        }
    }
}
