use ndarray::{Array2, ArrayView2, Axis};

use super::ClipAnnotation;
use crate::error::{Error, Result};

/// Tolerance used when mapping event boundaries in seconds onto frame indices.
const FRAME_EPS: f64 = 1e-9;

/// Binary activity matrix `[classes, frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRoll {
    pub active: Array2<bool>,
    pub frame_hop: f64,
}

impl EventRoll {
    pub fn zeros(n_classes: usize, n_frames: usize, frame_hop: f64) -> Self {
        Self {
            active: Array2::from_elem((n_classes, n_frames), false),
            frame_hop,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.active.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.active.ncols()
    }

    /// Activity as 0.0 / 1.0 targets.
    pub fn as_targets(&self) -> Array2<f64> {
        self.active.mapv(|a| if a { 1.0 } else { 0.0 })
    }
}

/// Frame `t` (covering `[t·hop, t·hop + hop)`) is active for class `n` iff it
/// overlaps an annotated event of class `n`.
pub fn rasterize(
    annotation: &ClipAnnotation,
    n_frames: usize,
    frame_hop: f64,
    n_classes: usize,
) -> Result<EventRoll> {
    if n_frames == 0 {
        return Err(Error::Config("rasterize needs at least one frame".into()));
    }
    if !(frame_hop > 0.0) {
        return Err(Error::Config(format!("frame hop {frame_hop} must be positive")));
    }
    let mut roll = EventRoll::zeros(n_classes, n_frames, frame_hop);
    for ev in &annotation.events {
        if ev.class_index >= n_classes {
            return Err(Error::ClassOutOfRange {
                index: ev.class_index,
                n_classes,
            });
        }
        if !(ev.offset > ev.onset) {
            continue;
        }
        let first = (ev.onset / frame_hop + FRAME_EPS).floor().max(0.0) as usize;
        let end = (ev.offset / frame_hop - FRAME_EPS).ceil().max(0.0) as usize;
        let end = end.min(n_frames);
        for t in first..end {
            roll.active[[ev.class_index, t]] = true;
        }
    }
    Ok(roll)
}

/// Max-pools a roll along time by `factor`; a trailing partial window is
/// pooled over the frames it has.
pub fn pool_labels(roll: &EventRoll, factor: usize) -> Result<EventRoll> {
    if factor < 1 {
        return Err(Error::Config("pooling factor must be at least 1".into()));
    }
    let n_out = roll.n_frames().div_ceil(factor);
    let mut out = EventRoll::zeros(roll.n_classes(), n_out, roll.frame_hop * factor as f64);
    for (src, mut dst) in roll.active.outer_iter().zip(out.active.outer_iter_mut()) {
        for (window, slot) in src.axis_chunks_iter(Axis(0), factor).zip(dst.iter_mut()) {
            *slot = window.iter().any(|&a| a);
        }
    }
    Ok(out)
}

/// Repeats every column of `[rows, frames]` `factor` times and truncates to
/// `n_frames` columns.
pub fn upsample_frames<T: Clone>(values: ArrayView2<'_, T>, factor: usize, n_frames: usize) -> Array2<T> {
    assert!(factor >= 1);
    assert!(values.ncols() * factor >= n_frames, "not enough frames to upsample");
    Array2::from_shape_fn((values.nrows(), n_frames), |(r, t)| {
        values[[r, t / factor]].clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::EventInstance;
    use proptest::prelude::*;

    fn clip(events: Vec<EventInstance>) -> ClipAnnotation {
        ClipAnnotation {
            clip_id: "c".into(),
            duration: 10.0,
            events,
        }
    }

    /// Brute-force interval-overlap oracle.
    fn oracle(ann: &ClipAnnotation, n_frames: usize, hop: f64, n: usize) -> Array2<bool> {
        Array2::from_shape_fn((n, n_frames), |(c, t)| {
            let (lo, hi) = (t as f64 * hop, (t + 1) as f64 * hop);
            ann.events
                .iter()
                .any(|e| e.class_index == c && e.onset < hi - 1e-9 && e.offset > lo + 1e-9)
        })
    }

    #[test]
    fn first_five_frames_for_100ms_event() {
        let ann = clip(vec![EventInstance::new(0, 0.0, 0.1)]);
        let roll = rasterize(&ann, 20, 0.02, 2).unwrap();
        let active: Vec<usize> = (0..20).filter(|&t| roll.active[[0, t]]).collect();
        assert_eq!(active, vec![0, 1, 2, 3, 4]);
        assert_eq!(roll.active, oracle(&ann, 20, 0.02, 2));
        assert!(!roll.active.row(1).iter().any(|&a| a));
    }

    #[test]
    fn empty_events_give_zero_roll() {
        let roll = rasterize(&clip(vec![]), 7, 0.02, 3).unwrap();
        assert!(roll.active.iter().all(|&a| !a));
    }

    #[test]
    fn overlapping_instances_union() {
        let a = clip(vec![
            EventInstance::new(1, 0.10, 0.50),
            EventInstance::new(1, 0.30, 0.90),
        ]);
        let b = clip(vec![EventInstance::new(1, 0.10, 0.90)]);
        assert_eq!(
            rasterize(&a, 60, 0.02, 2).unwrap(),
            rasterize(&b, 60, 0.02, 2).unwrap()
        );
    }

    #[test]
    fn class_out_of_range_is_error() {
        let ann = clip(vec![EventInstance::new(3, 0.0, 1.0)]);
        assert!(matches!(
            rasterize(&ann, 10, 0.02, 3),
            Err(Error::ClassOutOfRange { index: 3, n_classes: 3 })
        ));
        assert!(rasterize(&clip(vec![]), 0, 0.02, 3).is_err());
    }

    #[test]
    fn pooling_examples() {
        let mut roll = EventRoll::zeros(1, 8, 0.02);
        roll.active[[0, 2]] = true;
        let pooled = pool_labels(&roll, 8).unwrap();
        assert_eq!(pooled.active.as_slice().unwrap(), &[true]);
        assert_eq!(pool_labels(&roll, 1).unwrap().active, roll.active);
        let long = EventRoll::zeros(2, 499, 0.02);
        assert_eq!(pool_labels(&long, 32).unwrap().n_frames(), 16);
        assert!(pool_labels(&long, 0).is_err());
    }

    #[test]
    fn partial_window_is_pooled() {
        let mut roll = EventRoll::zeros(1, 10, 0.02);
        roll.active[[0, 9]] = true;
        let pooled = pool_labels(&roll, 4).unwrap();
        assert_eq!(pooled.active.as_slice().unwrap(), &[false, false, true]);
    }

    #[test]
    fn upsample_repeats_and_truncates() {
        let v = ndarray::array![[1, 2, 3]];
        let up = upsample_frames(v.view(), 2, 5);
        assert_eq!(up, ndarray::array![[1, 1, 2, 2, 3]]);
    }

    fn arb_clip() -> impl Strategy<Value = ClipAnnotation> {
        prop::collection::vec((0usize..3, 0u32..150, 1u32..60), 0..6).prop_map(|evs| {
            clip(
                evs.into_iter()
                    .map(|(c, on, len)| {
                        EventInstance::new(c, on as f64 * 0.01, (on + len) as f64 * 0.01)
                    })
                    .collect(),
            )
        })
    }

    proptest! {
        #[test]
        fn matches_overlap_oracle(ann in arb_clip()) {
            let roll = rasterize(&ann, 120, 0.02, 3).unwrap();
            prop_assert_eq!(roll.active, oracle(&ann, 120, 0.02, 3));
        }

        #[test]
        fn shifting_events_shifts_roll(ann in arb_clip(), k in 0usize..10) {
            let hop = 0.02;
            let shifted = ClipAnnotation {
                events: ann.events.iter().map(|e| EventInstance::new(
                    e.class_index, e.onset + k as f64 * hop, e.offset + k as f64 * hop)).collect(),
                ..ann.clone()
            };
            let base = rasterize(&ann, 100, hop, 3).unwrap();
            let moved = rasterize(&shifted, 100 + k, hop, 3).unwrap();
            for c in 0..3 {
                for t in 0..100 {
                    prop_assert_eq!(base.active[[c, t]], moved.active[[c, t + k]]);
                }
            }
        }

        #[test]
        fn pooling_is_monotone(bits in prop::collection::vec(any::<bool>(), 1..64),
                               extra in prop::collection::vec(any::<bool>(), 64),
                               factor in 1usize..9) {
            let n = bits.len();
            let a = EventRoll { active: Array2::from_shape_vec((1, n), bits.clone()).unwrap(), frame_hop: 0.02 };
            let more: Vec<bool> = bits.iter().zip(&extra).map(|(x, y)| *x || *y).collect();
            let b = EventRoll { active: Array2::from_shape_vec((1, n), more).unwrap(), frame_hop: 0.02 };
            let (pa, pb) = (pool_labels(&a, factor).unwrap(), pool_labels(&b, factor).unwrap());
            for (x, y) in pa.active.iter().zip(pb.active.iter()) {
                prop_assert!(!*x || *y);
            }
        }
    }
}
