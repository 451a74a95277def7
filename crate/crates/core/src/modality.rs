use std::fmt;
use std::ops::{Index, IndexMut};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// The three input streams. The discriminant is the discriminator's class
/// label: a = 0, t = 1, v = 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio = 0,
    Text = 1,
    Video = 2,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Audio, Modality::Text, Modality::Video];

    pub fn label(self) -> usize {
        self as usize
    }

    pub fn from_label(label: usize) -> Option<Self> {
        Self::ALL.get(label).copied()
    }

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Audio => "a",
            Modality::Text => "t",
            Modality::Video => "v",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "a" | "audio" => Ok(Modality::Audio),
            "t" | "text" => Ok(Modality::Text),
            "v" | "video" => Ok(Modality::Video),
            other => Err(Error::config(format!("unknown modality tag {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerModality<T> {
    pub audio: T,
    pub text: T,
    pub video: T,
}

impl<T> PerModality<T> {
    pub fn new(audio: T, text: T, video: T) -> Self {
        Self { audio, text, video }
    }

    pub fn from_fn(mut f: impl FnMut(Modality) -> T) -> Self {
        Self {
            audio: f(Modality::Audio),
            text: f(Modality::Text),
            video: f(Modality::Video),
        }
    }

    pub fn try_from_fn<E>(mut f: impl FnMut(Modality) -> Result<T, E>) -> Result<Self, E> {
        Ok(Self {
            audio: f(Modality::Audio)?,
            text: f(Modality::Text)?,
            video: f(Modality::Video)?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(Modality, &T) -> U) -> PerModality<U> {
        PerModality::from_fn(|m| f(m, &self[m]))
    }
}

impl<T> Index<Modality> for PerModality<T> {
    type Output = T;

    fn index(&self, m: Modality) -> &T {
        match m {
            Modality::Audio => &self.audio,
            Modality::Text => &self.text,
            Modality::Video => &self.video,
        }
    }
}

impl<T> IndexMut<Modality> for PerModality<T> {
    fn index_mut(&mut self, m: Modality) -> &mut T {
        match m {
            Modality::Audio => &mut self.audio,
            Modality::Text => &mut self.text,
            Modality::Video => &mut self.video,
        }
    }
}
