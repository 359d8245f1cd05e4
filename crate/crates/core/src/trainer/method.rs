use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    Finetune,
    LwfLogitKd,
    Mib,
    RcOnly,
    PcdOnly,
    RcPcd,
}

impl MethodName {
    pub const ALL: [MethodName; 6] = [
        MethodName::Finetune,
        MethodName::LwfLogitKd,
        MethodName::Mib,
        MethodName::RcOnly,
        MethodName::PcdOnly,
        MethodName::RcPcd,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MethodName::Finetune => "finetune",
            MethodName::LwfLogitKd => "lwf_logit_kd",
            MethodName::Mib => "mib",
            MethodName::RcOnly => "rc_only",
            MethodName::PcdOnly => "pcd_only",
            MethodName::RcPcd => "rc_pcd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|m| m.as_str()).collect();
                Error::Config(format!("unknown method {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CeKind {
    Plain,
    Unbiased,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogitKdKind {
    Off,
    /// Old-head softmax matched to the teacher.
    Plain,
    /// Background absorbs the new classes.
    Unbiased,
}

/// Which model and loss terms a method uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MethodSpec {
    pub name: MethodName,
    pub rc: bool,
    pub ce: CeKind,
    pub logit_kd: LogitKdKind,
    pub feature_kd: bool,
}

impl MethodSpec {
    pub fn get(name: MethodName) -> Self {
        let (rc, ce, logit_kd, feature_kd) = match name {
            MethodName::Finetune => (false, CeKind::Plain, LogitKdKind::Off, false),
            MethodName::LwfLogitKd => (false, CeKind::Plain, LogitKdKind::Plain, false),
            MethodName::Mib => (false, CeKind::Unbiased, LogitKdKind::Unbiased, false),
            MethodName::RcOnly => (true, CeKind::Unbiased, LogitKdKind::Unbiased, false),
            MethodName::PcdOnly => (false, CeKind::Unbiased, LogitKdKind::Unbiased, true),
            MethodName::RcPcd => (true, CeKind::Unbiased, LogitKdKind::Unbiased, true),
        };
        MethodSpec { name, rc, ce, logit_kd, feature_kd }
    }
}
