//! Scene-level metadata and the rule-based scene filter used to select
//! source scenes that resemble a given target dataset.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Minutes since midnight, written `HH:MM`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimeOfDay(pub u16);

impl TimeOfDay {
    pub fn hm(hours: u16, minutes: u16) -> Self {
        Self(hours * 60 + minutes)
    }

    pub fn minutes(self) -> u16 {
        self.0
    }
}

impl std::str::FromStr for TimeOfDay {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("time {s:?} is not HH:MM"));
        let (h, m) = s.trim().split_once(':').ok_or_else(bad)?;
        let h: u16 = h.parse().map_err(|_| bad())?;
        let m: u16 = m.parse().map_err(|_| bad())?;
        if h >= 24 || m >= 60 {
            return Err(bad());
        }
        Ok(Self::hm(h, m))
    }
}

impl fmt::Display for TimeOfDay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{:02}", self.0 / 60, self.0 % 60)
    }
}

impl Serialize for TimeOfDay {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TimeOfDay {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Weather categories: 0 clear, 1 clouds, 2 rain, 3 foggy, 4 thunder,
/// 5 overcast, 6 extra sunny.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub level: u8,
    pub time: TimeOfDay,
    pub weather: u8,
    pub count: u32,
    pub ratio: f64,
}

impl SceneMeta {
    pub fn validate(&self) -> Result<()> {
        if self.level > 8 {
            return Err(Error::InvalidArgument(format!("level {} not in 0..=8", self.level)));
        }
        if self.weather > 6 {
            return Err(Error::InvalidArgument(format!("weather {} not in 0..=6", self.weather)));
        }
        if self.time.0 >= 1440 {
            return Err(Error::InvalidArgument(format!("time {} past midnight", self.time.0)));
        }
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::InvalidArgument(format!("ratio {} not in [0, 1]", self.ratio)));
        }
        Ok(())
    }
}

/// One row of a scene-selection table. All ranges are closed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterRule {
    pub levels: BTreeSet<u8>,
    pub time: (TimeOfDay, TimeOfDay),
    pub weathers: BTreeSet<u8>,
    pub count: (u32, u32),
    pub ratio: (f64, f64),
}

impl FilterRule {
    pub fn validate(&self) -> Result<()> {
        if self.time.0 > self.time.1 {
            return Err(Error::Config(format!("time window {}..{} is reversed", self.time.0, self.time.1)));
        }
        if self.count.0 > self.count.1 {
            return Err(Error::Config(format!("count range {:?} is reversed", self.count)));
        }
        if self.ratio.0 > self.ratio.1 {
            return Err(Error::Config(format!("ratio range {:?} is reversed", self.ratio)));
        }
        Ok(())
    }

    /// Parse a rule from a TOML table such as
    ///
    /// ```toml
    /// levels = [1, 2, 3, 4, 5]
    /// time = ["6:00", "19:59"]
    /// weathers = [0, 1, 5, 6]
    /// count = [10, 600]
    /// ratio = [0.3, 1.0]
    /// ```
    pub fn from_toml(text: &str) -> Result<Self> {
        let rule: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        rule.validate()?;
        Ok(rule)
    }

    fn preset(levels: &[u8], time: (TimeOfDay, TimeOfDay), count: (u32, u32), ratio: (f64, f64)) -> Self {
        Self {
            levels: levels.iter().copied().collect(),
            time,
            weathers: [0, 1, 5, 6].into_iter().collect(),
            count,
            ratio,
        }
    }

    pub fn shanghai_tech_b() -> Self {
        Self::preset(&[1, 2, 3, 4, 5], (TimeOfDay::hm(6, 0), TimeOfDay::hm(19, 59)), (10, 600), (0.3, 1.0))
    }

    pub fn world_expo() -> Self {
        Self::preset(&[2, 3, 4, 5, 6], (TimeOfDay::hm(6, 0), TimeOfDay::hm(18, 59)), (0, 1000), (0.0, 1.0))
    }

    pub fn mall() -> Self {
        Self::preset(&[1, 2, 3, 4], (TimeOfDay::hm(8, 0), TimeOfDay::hm(18, 59)), (0, 200), (0.0, 1.0))
    }

    pub fn ucsd() -> Self {
        Self::mall()
    }

    /// Look up a preset by target dataset name.
    pub fn named(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().replace(['-', '_', ' '], "").as_str() {
            "shtb" | "shanghaitechb" | "shanghaitechpartb" => Some(Self::shanghai_tech_b()),
            "worldexpo" | "worldexpo10" => Some(Self::world_expo()),
            "mall" => Some(Self::mall()),
            "ucsd" => Some(Self::ucsd()),
            _ => None,
        }
    }
}

pub fn scene_filter(meta: &SceneMeta, rule: &FilterRule) -> bool {
    rule.levels.contains(&meta.level)
        && (rule.time.0..=rule.time.1).contains(&meta.time)
        && rule.weathers.contains(&meta.weather)
        && (rule.count.0..=rule.count.1).contains(&meta.count)
        && meta.ratio >= rule.ratio.0
        && meta.ratio <= rule.ratio.1
}
