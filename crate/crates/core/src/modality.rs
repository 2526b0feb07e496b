//! Modalities, fused modality pairs and the twelve retrieval task directions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Visual,
    Tactile,
    Pose,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Visual, Modality::Tactile, Modality::Pose];

    pub fn letter(self) -> char {
        match self {
            Modality::Visual => 'V',
            Modality::Tactile => 'T',
            Modality::Pose => 'P',
        }
    }

    fn from_letter(c: char) -> Option<Self> {
        match c {
            'V' => Some(Modality::Visual),
            'T' => Some(Modality::Tactile),
            'P' => Some(Modality::Pose),
            _ => None,
        }
    }
}

/// Two modalities fused into one embedding; concatenation order is `first` then `second`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FusionPair {
    VisualPose,
    TactilePose,
    VisualTactile,
}

impl FusionPair {
    pub const ALL: [FusionPair; 3] = [FusionPair::VisualPose, FusionPair::TactilePose, FusionPair::VisualTactile];

    pub fn parts(self) -> (Modality, Modality) {
        match self {
            FusionPair::VisualPose => (Modality::Visual, Modality::Pose),
            FusionPair::TactilePose => (Modality::Tactile, Modality::Pose),
            FusionPair::VisualTactile => (Modality::Visual, Modality::Tactile),
        }
    }

    /// The modality not covered by this pair.
    pub fn complement(self) -> Modality {
        match self {
            FusionPair::VisualPose => Modality::Tactile,
            FusionPair::TactilePose => Modality::Visual,
            FusionPair::VisualTactile => Modality::Pose,
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            FusionPair::VisualPose => "VP",
            FusionPair::TactilePose => "TP",
            FusionPair::VisualTactile => "VT",
        }
    }

    pub fn from_key(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.key() == s)
    }
}

/// One side of a retrieval task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Single(Modality),
    Fused(FusionPair),
}

impl Side {
    pub fn modalities(self) -> Vec<Modality> {
        match self {
            Side::Single(m) => vec![m],
            Side::Fused(p) => {
                let (a, b) = p.parts();
                vec![a, b]
            }
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Side::Single(m) => write!(f, "{}", m.letter()),
            Side::Fused(p) => f.write_str(p.key()),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown retrieval task `{0}` (expected e.g. V->T, VP->T, T->VP)")]
pub struct TaskParseError(pub String);

impl FromStr for Side {
    type Err = TaskParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || TaskParseError(s.to_owned());
        let letters: Vec<Modality> = s
            .chars()
            .map(|c| Modality::from_letter(c.to_ascii_uppercase()).ok_or_else(err))
            .collect::<Result<_, _>>()?;
        match letters.as_slice() {
            [m] => Ok(Side::Single(*m)),
            [a, b] => FusionPair::ALL
                .into_iter()
                .find(|p| p.parts() == (*a, *b))
                .map(Side::Fused)
                .ok_or_else(err),
            _ => Err(err()),
        }
    }
}

/// A query side retrieving a target side. Only the six bimodal and six
/// trimodal directions are constructible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RetrievalTask {
    query: Side,
    target: Side,
}

impl RetrievalTask {
    pub fn new(query: Side, target: Side) -> Result<Self, TaskParseError> {
        let ok = match (query, target) {
            (Side::Single(a), Side::Single(b)) => a != b,
            (Side::Fused(p), Side::Single(m)) | (Side::Single(m), Side::Fused(p)) => p.complement() == m,
            (Side::Fused(_), Side::Fused(_)) => false,
        };
        if ok {
            Ok(Self { query, target })
        } else {
            Err(TaskParseError(format!("{query}->{target}")))
        }
    }

    pub fn query(&self) -> Side {
        self.query
    }

    pub fn target(&self) -> Side {
        self.target
    }

    pub fn is_trimodal(&self) -> bool {
        matches!(self.query, Side::Fused(_)) || matches!(self.target, Side::Fused(_))
    }

    /// The same pairing with query and target swapped.
    pub fn reversed(&self) -> Self {
        Self {
            query: self.target,
            target: self.query,
        }
    }

    pub fn bimodal() -> Vec<RetrievalTask> {
        ["V->T", "T->V", "T->P", "P->T", "V->P", "P->V"]
            .iter()
            .map(|s| s.parse().expect("valid task"))
            .collect()
    }

    pub fn trimodal() -> Vec<RetrievalTask> {
        ["VP->T", "T->VP", "TP->V", "V->TP", "VT->P", "P->VT"]
            .iter()
            .map(|s| s.parse().expect("valid task"))
            .collect()
    }

    pub fn all() -> Vec<RetrievalTask> {
        let mut v = Self::bimodal();
        v.extend(Self::trimodal());
        v
    }

    /// One representative per unordered side pairing (the contrastive loss is symmetric).
    pub fn loss_pairings() -> Vec<RetrievalTask> {
        ["V->T", "T->P", "V->P", "VP->T", "TP->V", "VT->P"]
            .iter()
            .map(|s| s.parse().expect("valid task"))
            .collect()
    }
}

impl fmt::Display for RetrievalTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.query, self.target)
    }
}

impl FromStr for RetrievalTask {
    type Err = TaskParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().replace('→', "->");
        let (q, t) = norm.split_once("->").ok_or_else(|| TaskParseError(s.to_owned()))?;
        let q: Side = q.trim().parse().map_err(|_| TaskParseError(s.to_owned()))?;
        let t: Side = t.trim().parse().map_err(|_| TaskParseError(s.to_owned()))?;
        Self::new(q, t).map_err(|_| TaskParseError(s.to_owned()))
    }
}

impl Serialize for RetrievalTask {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RetrievalTask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exactly_twelve_directions() {
        let all = RetrievalTask::all();
        assert_eq!(all.len(), 12);
        let mut dedup = all.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), 12);
        assert_eq!(all.iter().filter(|t| t.is_trimodal()).count(), 6);
    }

    #[test]
    fn parse_forms() {
        let t: RetrievalTask = "VP→T".parse().unwrap();
        assert_eq!(t.query(), Side::Fused(FusionPair::VisualPose));
        assert_eq!(t.to_string(), "VP->T");
        assert_eq!("p->vt".parse::<RetrievalTask>().unwrap().to_string(), "P->VT");
        assert_eq!(t.reversed().to_string(), "T->VP");
    }

    #[test]
    fn rejects_invalid() {
        for bad in ["QX->T", "V->V", "VP->P", "VP->VT", "PV->T", "VTP->V", "V", ""] {
            assert!(bad.parse::<RetrievalTask>().is_err(), "{bad}");
        }
    }

    #[test]
    fn serde_as_string() {
        let t: RetrievalTask = "TP->V".parse().unwrap();
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(s, "\"TP->V\"");
        assert_eq!(serde_json::from_str::<RetrievalTask>(&s).unwrap(), t);
    }
}
