//! Five-frame smoothing of network outputs into light-mode announcements and
//! orientation and position instructions.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::class::{argmax, LightClass};
use crate::error::{Error, Result};
use crate::geometry::{measure_midline, Homography, Resolution};
use crate::training::Endpoints;

/// Light mode as announced to the user. The two countdown classes collapse
/// into `Countdown`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Light {
    Red,
    Green,
    Countdown,
    #[serde(rename = "none")]
    NoLight,
    Uncertain,
}

impl Light {
    /// Decidable modes in merged-mass order.
    pub const MODES: [Light; 4] = [Light::Red, Light::Green, Light::Countdown, Light::NoLight];

    pub fn of_class(c: LightClass) -> Self {
        match c {
            LightClass::Red => Light::Red,
            LightClass::Green => Light::Green,
            LightClass::CountdownGreen | LightClass::CountdownBlank => Light::Countdown,
            LightClass::None => Light::NoLight,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    RotateLeft,
    RotateRight,
    Aligned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    MoveLeft,
    MoveRight,
    Centered,
}

pub fn decide_orientation(dtheta: f64, threshold: f64) -> Orientation {
    if dtheta < -threshold {
        Orientation::RotateLeft
    } else if dtheta > threshold {
        Orientation::RotateRight
    } else {
        Orientation::Aligned
    }
}

/// Band of `band · w` either side of the midline `(w − 1) / 2`.
pub fn decide_position(x_int: f64, w: f64, band: f64) -> Position {
    let m = (w - 1.0) / 2.0;
    if x_int > m + band * w {
        Position::MoveLeft
    } else if x_int < m - band * w {
        Position::MoveRight
    } else {
        Position::Centered
    }
}

/// Adds the two countdown probabilities: `[red, green, countdown, none]`.
pub fn merge_countdown(p: &[f64; 5]) -> [f64; 4] {
    [p[0], p[1], p[2] + p[3], p[4]]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub homography: Homography,
    /// Frame normalized endpoints are scaled into before mapping.
    pub resolution: Resolution,
    pub window: usize,
    /// Merged mass must be strictly greater than this.
    pub threshold: f64,
    /// Degrees.
    pub angle_threshold: f64,
    /// Fraction of the width either side of the midline.
    pub position_band: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            homography: Homography::default(),
            resolution: Resolution::default(),
            window: 5,
            threshold: 0.8,
            angle_threshold: 10.0,
            position_band: 0.085,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceOutput {
    pub light: Light,
    pub announce: bool,
    /// `None` when the averaged midline cannot be measured.
    pub orientation: Option<Orientation>,
    pub position: Option<Position>,
    pub dtheta: Option<f64>,
    pub x_int: Option<f64>,
    /// Argmax of the averaged five-class probabilities, before merging.
    pub raw_class: LightClass,
    /// Frames currently buffered.
    pub frames: usize,
}

/// Decision state for one stream of frames.
#[derive(Clone, Debug)]
pub struct GuidanceState {
    config: GuidanceConfig,
    probs: VecDeque<[f64; 5]>,
    endpoints: VecDeque<Endpoints>,
    announced: Option<Light>,
}

impl GuidanceState {
    pub fn new(config: GuidanceConfig) -> Result<Self> {
        if config.window == 0 {
            return Err(Error::invalid("guidance window must be positive"));
        }
        Ok(Self {
            config,
            probs: VecDeque::with_capacity(config.window),
            endpoints: VecDeque::with_capacity(config.window),
            announced: None,
        })
    }

    pub fn config(&self) -> &GuidanceConfig {
        &self.config
    }

    pub fn buffered(&self) -> usize {
        self.probs.len()
    }

    pub fn last_announced(&self) -> Option<Light> {
        self.announced
    }

    /// Buffered probability vectors averaged per class.
    pub fn averaged_probs(&self) -> [f64; 5] {
        std::array::from_fn(|c| order_free_mean(self.probs.iter().map(|p| p[c])))
    }

    pub fn averaged_endpoints(&self) -> Endpoints {
        let mean = |f: fn(&Endpoints) -> f64| order_free_mean(self.endpoints.iter().map(f));
        Endpoints::new(mean(|e| e.x1), mean(|e| e.y1), mean(|e| e.x2), mean(|e| e.y2))
    }

    pub fn push_frame(&mut self, probs: &[f64], endpoints: Endpoints) -> Result<GuidanceOutput> {
        let p = check_probs(probs)?;
        if endpoints.to_array().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("endpoints must be finite"));
        }
        if self.probs.len() == self.config.window {
            self.probs.pop_front();
            self.endpoints.pop_front();
        }
        self.probs.push_back(p);
        self.endpoints.push_back(endpoints);

        let avg = self.averaged_probs();
        let light = if self.probs.len() < self.config.window {
            Light::Uncertain
        } else {
            let merged = merge_countdown(&avg);
            Light::MODES
                .into_iter()
                .zip(merged)
                .find(|&(_, m)| m > self.config.threshold)
                .map_or(Light::Uncertain, |(l, _)| l)
        };
        let announce = light != Light::Uncertain && self.announced != Some(light);
        if announce {
            self.announced = Some(light);
        }

        let midline = measure_midline(&self.averaged_endpoints(), &self.config.resolution, &self.config.homography).ok();
        let w = self.config.resolution.width;
        Ok(GuidanceOutput {
            light,
            announce,
            orientation: midline.map(|m| decide_orientation(m.dtheta, self.config.angle_threshold)),
            position: midline.map(|m| decide_position(m.x_int, w, self.config.position_band)),
            dtheta: midline.map(|m| m.dtheta),
            x_int: midline.map(|m| m.x_int),
            raw_class: LightClass::from_index(argmax(&avg)).expect("five classes"),
            frames: self.probs.len(),
        })
    }
}

/// Mean that does not depend on the order of the values.
fn order_free_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

fn check_probs(p: &[f64]) -> Result<[f64; 5]> {
    let arr: [f64; 5] = p
        .try_into()
        .map_err(|_| Error::invalid(format!("expected 5 probabilities, got {}", p.len())))?;
    if arr.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid(format!("probabilities must be finite and non-negative: {arr:?}")));
    }
    let sum: f64 = arr.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("probabilities sum to {sum}, not 1")));
    }
    Ok(arr)
}

/// One line of a replay file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayFrame {
    pub probs: Vec<f64>,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl ReplayFrame {
    pub fn endpoints(&self) -> Endpoints {
        Endpoints::new(self.x1, self.y1, self.x2, self.y2)
    }
}

pub fn parse_replay(text: &str) -> Result<Vec<ReplayFrame>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .enumerate()
        .map(|(index, (line_no, line))| {
            serde_json::from_str(line).map_err(|e| Error::Record {
                index,
                message: format!("line {}: {e}", line_no + 1),
            })
        })
        .collect()
}

/// Runs a fresh state over `frames` in order.
pub fn replay(frames: &[ReplayFrame], config: GuidanceConfig) -> Result<Vec<GuidanceOutput>> {
    let mut state = GuidanceState::new(config)?;
    frames
        .iter()
        .enumerate()
        .map(|(index, f)| {
            state.push_frame(&f.probs, f.endpoints()).map_err(|e| Error::Record {
                index,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn outputs_to_jsonl(outputs: &[GuidanceOutput]) -> String {
    let mut s = String::new();
    for o in outputs {
        s.push_str(&serde_json::to_string(o).expect("guidance output serializes"));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn centred() -> Endpoints {
        Endpoints::new(0.5, 0.718, 0.5, 0.476)
    }

    #[test]
    fn unanimous_red_announces_on_fifth() {
        let mut s = GuidanceState::new(GuidanceConfig::default()).unwrap();
        for i in 0..5 {
            let out = s.push_frame(&[1.0, 0.0, 0.0, 0.0, 0.0], centred()).unwrap();
            assert_eq!(out.announce, i == 4);
            assert_eq!(out.light, if i == 4 { Light::Red } else { Light::Uncertain });
        }
        let out = s.push_frame(&[1.0, 0.0, 0.0, 0.0, 0.0], centred()).unwrap();
        assert_eq!(out.light, Light::Red);
        assert!(!out.announce);
    }

    #[test]
    fn countdown_merge() {
        let mut s = GuidanceState::new(GuidanceConfig::default()).unwrap();
        let mut out = None;
        for _ in 0..5 {
            out = Some(s.push_frame(&[0.05, 0.05, 0.45, 0.40, 0.05], centred()).unwrap());
        }
        let out = out.unwrap();
        assert_eq!(out.light, Light::Countdown);
        assert_eq!(out.raw_class, LightClass::CountdownGreen);
    }

    #[test]
    fn bands() {
        assert_eq!(decide_position(460.0, 768.0, 0.085), Position::MoveLeft);
        assert_eq!(decide_position(383.5, 768.0, 0.085), Position::Centered);
        assert_eq!(decide_position(300.0, 768.0, 0.085), Position::MoveRight);
        assert_eq!(decide_orientation(-15.0, 10.0), Orientation::RotateLeft);
        assert_eq!(decide_orientation(0.0, 10.0), Orientation::Aligned);
        assert_eq!(decide_orientation(10.0, 10.0), Orientation::Aligned);
        assert_eq!(decide_orientation(10.5, 10.0), Orientation::RotateRight);
    }

    #[test]
    fn rejects_bad_probs() {
        let mut s = GuidanceState::new(GuidanceConfig::default()).unwrap();
        assert!(s.push_frame(&[0.5, 0.5, 0.0, 0.0], centred()).is_err());
        assert!(s.push_frame(&[0.5, 0.6, 0.0, 0.0, 0.0], centred()).is_err());
        assert!(s.push_frame(&[1.5, -0.5, 0.0, 0.0, 0.0], centred()).is_err());
        assert_eq!(s.buffered(), 0);
    }

    #[test]
    fn light_serializes_lowercase() {
        assert_eq!(serde_json::to_string(&Light::NoLight).unwrap(), "\"none\"");
        assert_eq!(serde_json::to_string(&Orientation::RotateLeft).unwrap(), "\"rotate_left\"");
    }
}
