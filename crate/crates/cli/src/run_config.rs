//! Run configuration: one flat file with `synth.`, `global.`, `local.`,
//! `frame.` and `train.` keys. Unknown keys are rejected.

use std::path::Path;

use kneealign::config::FlatConfig;
use kneealign::hourglass::HourglassConfig;
use kneealign::pipeline::{ReferenceFrameSpec, DEFAULT_SPAN};
use kneealign::synth::PhantomRanges;
use kneealign::{Error, Result};

/// Reference-point jitter (image pixels) applied to local training frames.
pub const DEFAULT_JITTER_SD: f64 = 1.5;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub n: Option<usize>,
    pub ranges: PhantomRanges,
    pub global: HourglassConfig,
    pub local: HourglassConfig,
    pub frame: ReferenceFrameSpec,
    pub jitter_sd: f64,
}

fn known(key: &str) -> bool {
    let under = |prefix: &str, keys: &[&str]| key.strip_prefix(prefix).is_some_and(|k| keys.contains(&k));
    matches!(
        key,
        "seed" | "synth.n" | "frame.height" | "frame.width" | "frame.span" | "train.jitter_sd"
    ) || under("synth.", &PhantomRanges::KEYS)
        || under("global.", &HourglassConfig::KEYS)
        || under("local.", &HourglassConfig::KEYS)
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let c = match path {
            Some(p) => {
                if !p.is_file() {
                    return Err(Error::Config(format!("config `{}` not found", p.display())));
                }
                FlatConfig::load(p)?
            }
            None => FlatConfig::new(),
        };
        Self::from_config(&c)
    }

    pub fn from_config(c: &FlatConfig) -> Result<Self> {
        c.reject_unknown(known)?;
        let ranges = PhantomRanges::from_config(c, "synth.")?;
        let local_base = HourglassConfig::local_default(ranges.landmark_count);
        let local = HourglassConfig::from_config(c, "local.", &local_base)?;
        let height = c.get("frame.height")?.unwrap_or(local.height);
        let width = c.get("frame.width")?.unwrap_or(local.input_width);
        let span = c.get("frame.span")?.unwrap_or(DEFAULT_SPAN);
        let jitter_sd: f64 = c.get("train.jitter_sd")?.unwrap_or(DEFAULT_JITTER_SD);
        if jitter_sd.is_nan() || jitter_sd < 0.0 {
            return Err(Error::Config("train.jitter_sd must be non-negative".into()));
        }
        let global = HourglassConfig::from_config(c, "global.", &HourglassConfig::global_default())?;
        if global.landmarks != 2 {
            return Err(Error::Config("global.landmarks must be 2".into()));
        }
        Ok(Self {
            seed: c.get("seed")?,
            n: c.get("synth.n")?,
            ranges,
            global,
            local,
            frame: ReferenceFrameSpec::centered(height, width, span)?,
            jitter_sd,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let c = FlatConfig::parse("seed = 4\nglobal.epochs = 3\nframe.span = 0.3\nsynth.atfa = -5 5\n").unwrap();
        let r = RunConfig::from_config(&c).unwrap();
        assert_eq!(r.seed, Some(4));
        assert_eq!(r.global.epochs, 3);
        assert_eq!(r.ranges.atfa, (-5.0, 5.0));
        assert!((r.frame.q1.x - r.frame.q0.x - 0.3 * 96.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["bogus = 1", "global.depthh = 3", "synth.nn = 2"] {
            let c = FlatConfig::parse(text).unwrap();
            assert!(RunConfig::from_config(&c).is_err(), "{text}");
        }
    }
}
