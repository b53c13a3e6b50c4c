//! Experimental settings: which modalities are fused and where CESM comes from.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Setting {
    /// FFDM views only.
    F,
    /// Real CESM views only.
    C,
    /// Synthetic CESM views only.
    Chat,
    FplusC,
    FplusChat,
    /// CESM with the given percentage of test patients switched to synthetic.
    Cstar(u8),
    FplusCstar(u8),
}

/// Where each test patient's CESM views come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CesmSource {
    Real,
    Synthetic,
    Mixed(u8),
}

impl Setting {
    pub fn uses_ffdm(self) -> bool {
        matches!(self, Setting::F | Setting::FplusC | Setting::FplusChat | Setting::FplusCstar(_))
    }

    pub fn uses_cesm(self) -> bool {
        self != Setting::F
    }

    pub fn cesm_source(self) -> CesmSource {
        match self {
            Setting::F | Setting::C | Setting::FplusC => CesmSource::Real,
            Setting::Chat | Setting::FplusChat => CesmSource::Synthetic,
            Setting::Cstar(n) | Setting::FplusCstar(n) => CesmSource::Mixed(n),
        }
    }

    pub fn is_starred(self) -> bool {
        matches!(self, Setting::Cstar(_) | Setting::FplusCstar(_))
    }

    /// Setting name without the percentage, used for plot series.
    pub fn family(self) -> &'static str {
        match self {
            Setting::F => "F",
            Setting::C => "C",
            Setting::Chat => "Chat",
            Setting::FplusC => "FplusC",
            Setting::FplusChat => "FplusChat",
            Setting::Cstar(_) => "Cstar",
            Setting::FplusCstar(_) => "FplusCstar",
        }
    }

    pub fn validate(self) -> Result<()> {
        match self {
            Setting::Cstar(n) | Setting::FplusCstar(n) if n > 100 => Err(Error::InvalidConfig(
                format!("synthetic percentage {n} exceeds 100"),
            )),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Setting::Cstar(n) | Setting::FplusCstar(n) => write!(f, "{}({n})", self.family()),
            _ => f.write_str(self.family()),
        }
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let invalid = || Error::InvalidEnum {
            field: "setting".into(),
            value: s.to_owned(),
        };
        let plain = match s {
            "F" => Some(Setting::F),
            "C" => Some(Setting::C),
            "Chat" => Some(Setting::Chat),
            "FplusC" => Some(Setting::FplusC),
            "FplusChat" => Some(Setting::FplusChat),
            _ => None,
        };
        if let Some(p) = plain {
            return Ok(p);
        }
        let (family, rest) = s.split_once('(').ok_or_else(invalid)?;
        let n: u8 = rest
            .strip_suffix(')')
            .and_then(|d| d.parse().ok())
            .filter(|n| *n <= 100)
            .ok_or_else(invalid)?;
        match family {
            "Cstar" => Ok(Setting::Cstar(n)),
            "FplusCstar" => Ok(Setting::FplusCstar(n)),
            _ => Err(invalid()),
        }
    }
}

impl TryFrom<String> for Setting {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Setting> for String {
    fn from(s: Setting) -> String {
        s.to_string()
    }
}
