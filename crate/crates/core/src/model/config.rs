use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel width multiplier, kept as an exact fraction so channel counts
/// never depend on float rounding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Width {
    num: u32,
    den: u32,
}

impl Width {
    pub const FULL: Width = Width { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::Config(format!("width multiplier {num}/{den} must be positive")));
        }
        let g = gcd(num, den);
        Ok(Width {
            num: num / g,
            den: den / g,
        })
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Scaled channel count, rounded to nearest and at least 1.
    pub fn scale(self, channels: usize) -> usize {
        let den = self.den as usize;
        ((channels * self.num as usize + den / 2) / den).max(1)
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl fmt::Display for Width {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for Width {
    type Err = Error;

    /// Accepts `"1/8"` or a decimal such as `"0.125"`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse width multiplier {s:?}"));
        let s = s.trim();
        if let Some((n, d)) = s.split_once('/') {
            return Width::new(n.trim().parse().map_err(|_| bad())?, d.trim().parse().map_err(|_| bad())?);
        }
        let v: f64 = s.parse().map_err(|_| bad())?;
        if !(v > 0.0) || !v.is_finite() {
            return Err(bad());
        }
        // Decimal widths are snapped to a denominator of at most 64.
        let den = 64u32;
        let num = (v * den as f64).round() as u32;
        if num == 0 || ((num as f64 / den as f64) - v).abs() > 1e-9 {
            return Err(Error::Config(format!("width multiplier {s} is not a multiple of 1/64")));
        }
        Width::new(num, den)
    }
}

impl Serialize for Width {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Width {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Number(f64),
        }
        let text = match Raw::deserialize(d)? {
            Raw::Text(t) => t,
            Raw::Number(n) => n.to_string(),
        };
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// Switches for the ablation study; a disabled module is replaced by a
/// cheap bypass rather than removed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModuleToggles {
    pub gcm_abc_enabled: bool,
    pub gcm_cde_enabled: bool,
    pub refine_enabled: bool,
    pub agg_init_enabled: bool,
    pub agg_final_enabled: bool,
}

impl Default for ModuleToggles {
    fn default() -> Self {
        Self::all_enabled()
    }
}

impl ModuleToggles {
    pub const NAMES: [&'static str; 5] = ["gcm_abc", "gcm_cde", "refine", "agg_init", "agg_final"];

    pub fn all_enabled() -> Self {
        ModuleToggles {
            gcm_abc_enabled: true,
            gcm_cde_enabled: true,
            refine_enabled: true,
            agg_init_enabled: true,
            agg_final_enabled: true,
        }
    }

    pub fn all_disabled() -> Self {
        ModuleToggles {
            gcm_abc_enabled: false,
            gcm_cde_enabled: false,
            refine_enabled: false,
            agg_init_enabled: false,
            agg_final_enabled: false,
        }
    }

    /// All modules on except the one named (see [`Self::NAMES`]).
    pub fn without(name: &str) -> Result<Self> {
        let mut t = Self::all_enabled();
        let flag = match name {
            "gcm_abc" => &mut t.gcm_abc_enabled,
            "gcm_cde" => &mut t.gcm_cde_enabled,
            "refine" => &mut t.refine_enabled,
            "agg_init" => &mut t.agg_init_enabled,
            "agg_final" => &mut t.agg_final_enabled,
            other => return Err(Error::Config(format!("unknown module {other:?}"))),
        };
        *flag = false;
        Ok(t)
    }
}

/// Everything that determines the parameter layout of one network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub width: Width,
    pub decoder_width: usize,
    #[serde(default)]
    pub toggles: ModuleToggles,
}

impl ModelConfig {
    /// Full-module network whose decoder width follows the encoder:
    /// `64 * w`, rounded to a multiple of 4 and at least 4.
    pub fn for_width(width: Width) -> Self {
        ModelConfig {
            width,
            decoder_width: Self::default_decoder_width(width),
            toggles: ModuleToggles::default(),
        }
    }

    pub fn default_decoder_width(width: Width) -> usize {
        let raw = 64.0 * width.as_f64();
        (((raw / 4.0).round() as usize) * 4).max(4)
    }

    pub fn with_toggles(mut self, toggles: ModuleToggles) -> Self {
        self.toggles = toggles;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.decoder_width < 4 || self.decoder_width % 4 != 0 {
            return Err(Error::Config(format!(
                "decoder_width {} must be >= 4 and divisible by 4",
                self.decoder_width
            )));
        }
        Ok(())
    }

    /// Encoder channel counts per level.
    pub fn encoder_channels(&self) -> [usize; 5] {
        [64, 128, 256, 512, 512].map(|c| self.width.scale(c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn width_parsing_and_scaling() {
        let w: Width = "1/8".parse().unwrap();
        assert_eq!(w, "0.125".parse().unwrap());
        assert_eq!(w.scale(512), 64);
        assert_eq!(w.scale(64), 8);
        assert_eq!(Width::new(2, 8).unwrap().to_string(), "1/4");
        assert!("0".parse::<Width>().is_err());
        assert!("abc".parse::<Width>().is_err());
        assert_eq!(Width::new(1, 1024).unwrap().scale(64), 1);
    }

    #[test]
    fn default_decoder_width_tracks_width() {
        assert_eq!(ModelConfig::for_width(Width::FULL).decoder_width, 64);
        assert_eq!(ModelConfig::for_width(Width::new(1, 4).unwrap()).decoder_width, 16);
        assert_eq!(ModelConfig::for_width(Width::new(1, 8).unwrap()).decoder_width, 8);
        assert_eq!(ModelConfig::for_width(Width::new(1, 32).unwrap()).decoder_width, 4);
    }

    #[test]
    fn serde_round_trip() {
        let c = ModelConfig::for_width(Width::new(1, 4).unwrap()).with_toggles(ModuleToggles::without("refine").unwrap());
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"1/4\""));
        let back: ModelConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
        let numeric: ModelConfig = serde_json::from_str(r#"{"width":0.25,"decoder_width":16}"#).unwrap();
        assert_eq!(numeric.width, Width::new(1, 4).unwrap());
        assert!(numeric.toggles.refine_enabled);
    }
}
