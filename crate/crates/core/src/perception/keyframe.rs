//! Keyframe gating: group estimation runs only when the frame with the most
//! visible people in the trailing window changes.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::world::Vec2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSnapshot {
    pub track_id: u32,
    pub position: Vec2,
    pub velocity: Vec2,
}

/// Snapshot of all confirmed tracks at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub timestamp: f64,
    pub entries: Vec<TrackSnapshot>,
}

impl Keyframe {
    pub fn count(&self) -> usize {
        self.entries.len()
    }
}

#[derive(Debug, Clone)]
pub struct KeyframeBuffer {
    window: f64,
    frames: VecDeque<Keyframe>,
    current: Option<Keyframe>,
}

impl KeyframeBuffer {
    pub fn new(window: f64) -> Self {
        KeyframeBuffer {
            window,
            frames: VecDeque::new(),
            current: None,
        }
    }

    pub fn current(&self) -> Option<&Keyframe> {
        self.current.as_ref()
    }

    /// Adds the frame observed at `frame.timestamp` and re-evaluates.
    pub fn push(&mut self, frame: Keyframe) -> Option<Keyframe> {
        let now = frame.timestamp;
        self.frames.push_back(frame);
        self.update(now)
    }

    /// Returns the new keyframe when it changed (the estimator should be
    /// queried), `None` otherwise.
    ///
    /// The incumbent is kept while it is inside the window and no frame
    /// shows strictly more people. Otherwise the max-count frame wins, ties
    /// going to the newest.
    pub fn update(&mut self, now: f64) -> Option<Keyframe> {
        while self
            .frames
            .front()
            .is_some_and(|f| now - f.timestamp > self.window)
        {
            self.frames.pop_front();
        }
        // max_by_key keeps the last maximum, i.e. the newest
        let best = self.frames.iter().max_by_key(|f| f.count()).cloned();
        let Some(best) = best.filter(|b| b.count() > 0) else {
            self.current = None;
            return None;
        };
        if let Some(cur) = &self.current {
            let alive = now - cur.timestamp <= self.window;
            if alive && cur.count() >= best.count() {
                return None;
            }
            if cur.timestamp == best.timestamp {
                return None;
            }
        }
        self.current = Some(best.clone());
        Some(best)
    }
}
