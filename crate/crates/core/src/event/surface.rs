use serde::{Deserialize, Serialize};

use super::stream::{Event, EventStream, SensorSize};
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Timing of one RGB frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameIndex {
    pub frame_id: u64,
    /// Frame timestamp in µs.
    pub t_rgb: u64,
    /// Exposure `Δt` in µs.
    pub exposure: u64,
    pub bbox_gt: Option<BBox>,
}

impl FrameIndex {
    /// Checks positive exposures and strictly increasing timestamps.
    pub fn validate_sequence(frames: &[FrameIndex]) -> Result<()> {
        for f in frames {
            if f.exposure == 0 {
                return Err(Error::Validation(format!(
                    "frame {} has zero exposure",
                    f.frame_id
                )));
            }
        }
        if let Some(w) = frames.windows(2).find(|w| w[1].t_rgb <= w[0].t_rgb) {
            return Err(Error::Validation(format!(
                "frame {} timestamp {} does not follow {}",
                w[1].frame_id, w[1].t_rgb, w[0].t_rgb
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSurface {
    /// `[height × width]`.
    pub grid: Tensor,
    pub frame_id: u64,
}

fn weight(e: &Event, t_rgb: u64, dt: f64) -> f64 {
    let dist = e.t.abs_diff(t_rgb) as f64;
    (1.0 - dist / dt).max(0.0)
}

/// `V(x, y) = Σ_j p_j·max(0, 1 − |t_rgb − t_j| / Δt)`.
pub fn time_surface(events: &EventStream, frame: &FrameIndex, sensor: SensorSize) -> Result<TimeSurface> {
    if frame.exposure == 0 {
        return Err(Error::Validation("exposure must be positive".into()));
    }
    let (w, h) = (sensor.width as usize, sensor.height as usize);
    let mut grid = Tensor::zeros([h, w]);
    let dt = frame.exposure as f64;
    let lo = frame.t_rgb.saturating_sub(frame.exposure);
    let hi = frame.t_rgb.saturating_add(frame.exposure);
    for e in events.window(lo, hi) {
        grid.data_mut()[e.y as usize * w + e.x as usize] += e.p.sign() * weight(e, frame.t_rgb, dt);
    }
    Ok(TimeSurface {
        grid,
        frame_id: frame.frame_id,
    })
}

/// `bins` time surfaces over equal slices of `[t_rgb − Δt, t_rgb + Δt]`,
/// shape `[bins × height × width]`. Each event keeps its full-window
/// weight, so the bins sum to [`time_surface`].
pub fn event_voxel(
    events: &EventStream,
    frame: &FrameIndex,
    sensor: SensorSize,
    bins: usize,
) -> Result<Tensor> {
    if frame.exposure == 0 {
        return Err(Error::Validation("exposure must be positive".into()));
    }
    if bins == 0 {
        return Err(Error::Config("at least one temporal bin".into()));
    }
    let (w, h) = (sensor.width as usize, sensor.height as usize);
    let mut vox = Tensor::zeros([bins, h, w]);
    let dt = frame.exposure as f64;
    let start = frame.t_rgb as f64 - dt;
    let lo = frame.t_rgb.saturating_sub(frame.exposure);
    let hi = frame.t_rgb.saturating_add(frame.exposure);
    for e in events.window(lo, hi) {
        let frac = (e.t as f64 - start) / (2.0 * dt);
        let b = ((frac * bins as f64) as usize).min(bins - 1);
        vox.data_mut()[(b * h + e.y as usize) * w + e.x as usize] +=
            e.p.sign() * weight(e, frame.t_rgb, dt);
    }
    Ok(vox)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::stream::Polarity;
    use proptest::prelude::*;

    const SENSOR: SensorSize = SensorSize { width: 4, height: 3 };

    fn frame(t: u64, dt: u64) -> FrameIndex {
        FrameIndex {
            frame_id: 0,
            t_rgb: t,
            exposure: dt,
            bbox_gt: None,
        }
    }

    fn ev(x: u32, y: u32, t: u64, p: i64) -> Event {
        Event {
            x,
            y,
            t,
            p: Polarity::from_sign(p).unwrap(),
        }
    }

    /// Direct evaluation of the summation over the raw list.
    fn brute(events: &[Event], f: &FrameIndex) -> Vec<f64> {
        let mut g = vec![0.0; 12];
        for e in events {
            let d = (f.t_rgb as f64 - e.t as f64).abs();
            g[e.y as usize * 4 + e.x as usize] +=
                e.p.sign() * f64::max(0.0, 1.0 - d / f.exposure as f64);
        }
        g
    }

    #[test]
    fn coincident_event_has_unit_weight() {
        let s = EventStream::new(vec![ev(1, 2, 500, 1)], SENSOR).unwrap();
        let ts = time_surface(&s, &frame(500, 100), SENSOR).unwrap();
        assert_eq!(ts.grid.at2(2, 1), 1.0);
        assert_eq!(ts.grid.sum(), 1.0);
    }

    #[test]
    fn boundary_event_contributes_zero() {
        let s = EventStream::new(vec![ev(1, 1, 400, 1), ev(2, 1, 600, -1)], SENSOR).unwrap();
        let ts = time_surface(&s, &frame(500, 100), SENSOR).unwrap();
        assert!(ts.grid.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn opposite_events_at_one_pixel() {
        let events = vec![ev(3, 0, 450, 1), ev(3, 0, 525, -1)];
        let f = frame(500, 100);
        let s = EventStream::new(events.clone(), SENSOR).unwrap();
        let ts = time_surface(&s, &f, SENSOR).unwrap();
        let oracle = brute(&events, &f);
        assert!((oracle[3] - (-0.25)).abs() < 1e-15);
        assert!((ts.grid.at2(0, 3) - oracle[3]).abs() < 1e-15);
    }

    #[test]
    fn zero_exposure_rejected() {
        let s = EventStream::default();
        assert!(time_surface(&s, &frame(5, 0), SENSOR).is_err());
        let bad = [frame(5, 1), frame(5, 1)];
        assert!(FrameIndex::validate_sequence(&bad).is_err());
    }

    fn arb_events() -> impl Strategy<Value = Vec<Event>> {
        proptest::collection::vec(
            (0u32..4, 0u32..3, 0u64..2000, prop::bool::ANY)
                .prop_map(|(x, y, t, pos)| ev(x, y, t, if pos { 1 } else { -1 })),
            0..40,
        )
    }

    proptest! {
        #[test]
        fn matches_brute_force(events in arb_events(), t in 0u64..2000, dt in 1u64..600) {
            let f = frame(t, dt);
            let s = EventStream::new(events.clone(), SENSOR).unwrap();
            let ts = time_surface(&s, &f, SENSOR).unwrap();
            for (a, b) in ts.grid.data().iter().zip(brute(&events, &f)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn linear_in_the_stream(a in arb_events(), b in arb_events(), t in 0u64..2000, dt in 1u64..600) {
            let f = frame(t, dt);
            let sa = time_surface(&EventStream::new(a.clone(), SENSOR).unwrap(), &f, SENSOR).unwrap();
            let sb = time_surface(&EventStream::new(b.clone(), SENSOR).unwrap(), &f, SENSOR).unwrap();
            let both: Vec<Event> = a.into_iter().chain(b).collect();
            let sab = time_surface(&EventStream::new(both, SENSOR).unwrap(), &f, SENSOR).unwrap();
            for i in 0..12 {
                prop_assert!((sab.grid.data()[i] - sa.grid.data()[i] - sb.grid.data()[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn flipping_polarity_negates(events in arb_events(), t in 0u64..2000, dt in 1u64..600) {
            let f = frame(t, dt);
            let flipped: Vec<Event> = events.iter().map(|e| Event { p: e.p.flipped(), ..*e }).collect();
            let s = time_surface(&EventStream::new(events, SENSOR).unwrap(), &f, SENSOR).unwrap();
            let sf = time_surface(&EventStream::new(flipped, SENSOR).unwrap(), &f, SENSOR).unwrap();
            for (a, b) in s.grid.data().iter().zip(sf.grid.data()) {
                prop_assert_eq!(*a, -*b);
            }
        }

        #[test]
        fn distant_events_change_nothing(events in arb_events(), extra in arb_events(), dt in 1u64..300) {
            let f = frame(1000, dt);
            let base = time_surface(&EventStream::new(events.clone(), SENSOR).unwrap(), &f, SENSOR).unwrap();
            let far: Vec<Event> = extra.into_iter()
                .map(|e| Event { t: if e.t % 2 == 0 { 1000 + dt + e.t } else { (1000 - dt).saturating_sub(e.t) }, ..e })
                .collect();
            let all: Vec<Event> = events.into_iter().chain(far).collect();
            let with = time_surface(&EventStream::new(all, SENSOR).unwrap(), &f, SENSOR).unwrap();
            prop_assert_eq!(base.grid, with.grid);
        }

        #[test]
        fn voxel_bins_sum_to_surface(events in arb_events(), t in 0u64..2000, dt in 1u64..600, bins in 1usize..6) {
            let f = frame(t, dt);
            let s = EventStream::new(events, SENSOR).unwrap();
            let ts = time_surface(&s, &f, SENSOR).unwrap();
            let vox = event_voxel(&s, &f, SENSOR, bins).unwrap();
            for i in 0..12 {
                let total: f64 = (0..bins).map(|b| vox.data()[b * 12 + i]).sum();
                prop_assert!((total - ts.grid.data()[i]).abs() < 1e-12);
            }
        }
    }
}
