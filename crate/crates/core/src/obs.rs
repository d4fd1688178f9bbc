//! The 55-entry observation vector shared by the latent sampler, the safety
//! filter and the simulator.
//!
//! Layout (all positions relative to the ego):
//! - `[0..2)`   distance to the lower / upper boundary of the ego's lane
//! - `[2..4)`   ego longitudinal and lateral velocity
//! - `[4]`      ego heading
//! - `[5..55)`  ten nearest obstacles, each `(rel x, rel y, v_x, v_y, heading)`,
//!   sorted by Euclidean distance; unused slots are sentinel-padded.

use alloc::vec::Vec;

/// Total observation length.
pub const OBS_DIM: usize = 55;
/// Number of obstacle slots.
pub const OBS_SLOTS: usize = 10;
/// Entries per obstacle slot.
pub const SLOT_DIM: usize = 5;
/// Sentinel relative-x used to pad empty obstacle slots.
pub const PAD_RELATIVE_X: f64 = 100.0;

/// Fixed-layout observation vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    values: [f64; OBS_DIM],
}

impl Observation {
    pub fn new(values: [f64; OBS_DIM]) -> Self {
        Self { values }
    }

    /// Build from the individual pieces; `obstacles` must already be sorted
    /// by distance and is truncated / padded to [`OBS_SLOTS`].
    pub fn compose(
        lane_bounds: (f64, f64),
        ego_vel: (f64, f64),
        ego_heading: f64,
        obstacles: &[[f64; SLOT_DIM]],
    ) -> Self {
        let mut values = [0.0; OBS_DIM];
        values[0] = lane_bounds.0;
        values[1] = lane_bounds.1;
        values[2] = ego_vel.0;
        values[3] = ego_vel.1;
        values[4] = ego_heading;
        for slot in 0..OBS_SLOTS {
            let base = 5 + slot * SLOT_DIM;
            if slot < obstacles.len() {
                values[base..base + SLOT_DIM].copy_from_slice(&obstacles[slot]);
            } else {
                values[base] = PAD_RELATIVE_X;
                // remaining entries stay zero
            }
        }
        Self { values }
    }

    pub fn values(&self) -> &[f64; OBS_DIM] {
        &self.values
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.values.to_vec()
    }

    pub fn from_slice(slice: &[f64]) -> Option<Self> {
        if slice.len() != OBS_DIM {
            return None;
        }
        let mut values = [0.0; OBS_DIM];
        values.copy_from_slice(slice);
        Some(Self { values })
    }

    pub fn lane_bounds(&self) -> (f64, f64) {
        (self.values[0], self.values[1])
    }

    pub fn ego_vel(&self) -> (f64, f64) {
        (self.values[2], self.values[3])
    }

    pub fn ego_heading(&self) -> f64 {
        self.values[4]
    }

    /// Obstacle slot fields `(rel x, rel y, v_x, v_y, heading)`.
    pub fn obstacle(&self, slot: usize) -> [f64; SLOT_DIM] {
        debug_assert!(slot < OBS_SLOTS);
        let base = 5 + slot * SLOT_DIM;
        let mut out = [0.0; SLOT_DIM];
        out.copy_from_slice(&self.values[base..base + SLOT_DIM]);
        out
    }

    /// True when the slot holds the sentinel padding.
    pub fn slot_is_padding(&self, slot: usize) -> bool {
        self.obstacle(slot)[0] >= PAD_RELATIVE_X
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compose_pads_missing_slots() {
        let o = Observation::compose((2.0, 2.0), (10.0, 0.0), 0.0, &[[5.0, 1.0, 8.0, 0.0, 0.0]]);
        assert_eq!(o.lane_bounds(), (2.0, 2.0));
        assert_eq!(o.obstacle(0), [5.0, 1.0, 8.0, 0.0, 0.0]);
        assert!(o.slot_is_padding(1));
        assert_eq!(o.obstacle(1), [PAD_RELATIVE_X, 0.0, 0.0, 0.0, 0.0]);
        assert!(o.slot_is_padding(9));
    }

    #[test]
    fn roundtrip_through_slice() {
        let o = Observation::compose((1.0, 3.0), (5.0, -0.5), 0.1, &[]);
        let v = o.to_vec();
        assert_eq!(v.len(), OBS_DIM);
        let back = Observation::from_slice(&v).unwrap();
        assert_eq!(back, o);
    }
}
