use crate::robot::{RootState, Vec3};
use crate::{Result, SimError};

/// One reference sample at the control rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub root_pos: Vec3,
    pub pitch: f64,
    pub root_vel: Vec3,
    pub pitch_rate: f64,
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    /// World positions of the key bodies.
    pub key_pos: Vec<Vec3>,
    pub gravity: Vec3,
    pub height: f64,
    /// Left, right foot.
    pub contacts: [bool; 2],
}

impl Frame {
    pub fn root(&self) -> RootState {
        RootState {
            pos: self.root_pos,
            pitch: self.pitch,
            vel: self.root_vel,
            pitch_rate: self.pitch_rate,
        }
    }

    pub fn scalar_count(num_joints: usize) -> usize {
        14 + 2 * num_joints + 3 * (num_joints + 2)
    }

    pub(crate) fn push_scalars(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.root_pos);
        out.push(self.pitch);
        out.extend_from_slice(&self.root_vel);
        out.push(self.pitch_rate);
        out.extend_from_slice(&self.q);
        out.extend_from_slice(&self.qd);
        for p in &self.key_pos {
            out.extend_from_slice(p);
        }
        out.extend_from_slice(&self.gravity);
        out.push(self.height);
        out.extend(self.contacts.iter().map(|&c| if c { 1.0 } else { 0.0 }));
    }

    pub(crate) fn from_scalars(j: usize, s: &[f64]) -> Result<Frame> {
        if s.len() != Self::scalar_count(j) {
            return Err(SimError::Format(format!("frame holds {} values", s.len())));
        }
        let v3 = |i: usize| [s[i], s[i + 1], s[i + 2]];
        let mut i = 8 + 2 * j;
        let key_pos = (0..j + 2)
            .map(|_| {
                let p = v3(i);
                i += 3;
                p
            })
            .collect();
        let contact = |x: f64| -> Result<bool> {
            match x {
                0.0 => Ok(false),
                1.0 => Ok(true),
                _ => Err(SimError::Format(format!("contact flag {x}"))),
            }
        };
        Ok(Frame {
            root_pos: v3(0),
            pitch: s[3],
            root_vel: v3(4),
            pitch_rate: s[7],
            q: s[8..8 + j].to_vec(),
            qd: s[8 + j..8 + 2 * j].to_vec(),
            key_pos,
            gravity: v3(i),
            height: s[i + 3],
            contacts: [contact(s[i + 4])?, contact(s[i + 5])?],
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionClip {
    pub id: String,
    /// Dataset tag used to group clips for macro averaging.
    pub source: String,
    pub fps: f64,
    pub num_joints: usize,
    pub frames: Vec<Frame>,
}

impl MotionClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.fps
    }

    /// Frame `i`, holding the last frame past the end.
    pub fn frame(&self, i: usize) -> &Frame {
        &self.frames[i.min(self.frames.len() - 1)]
    }

    pub fn validate(&self, min_frames: usize) -> Result<()> {
        let err = |reason: String| {
            Err(SimError::Clip {
                id: self.id.clone(),
                reason,
            })
        };
        if self.id.is_empty() || self.source.is_empty() {
            return err("id and source must be non-empty".into());
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return err(format!("frame rate {}", self.fps));
        }
        if self.frames.len() < min_frames {
            return err(format!("{} frames, need at least {min_frames}", self.frames.len()));
        }
        let j = self.num_joints;
        let mut buf = Vec::new();
        for (t, f) in self.frames.iter().enumerate() {
            if f.q.len() != j || f.qd.len() != j || f.key_pos.len() != j + 2 {
                return err(format!("frame {t} has inconsistent sizes"));
            }
            buf.clear();
            f.push_scalars(&mut buf);
            if buf.iter().any(|v| !v.is_finite()) {
                return err(format!("frame {t} is not finite"));
            }
        }
        Ok(())
    }
}
