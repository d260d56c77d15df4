use proptest::prelude::*;

use evlign::dataset::{
    segment_stream, select_max_event_segment, select_top_k_segments, WindowIndex,
};
use evlign::events::{
    read_bin, read_csv, write_bin, write_csv, Event, EventStream, Polarity, SensorGeometry,
};
use evlign::metrics::{auc, failure_rate, nme, LandmarkSet, Normalization};
use evlign::representations::{
    build_frame, build_timesurface, build_voxel, signed_sum, TimeWindow,
};
use evlign::simulator::{frames_to_events, FrameSequence, SimulatorConfig, DEFAULT_LOG_EPS};
use evlign::tensor::Tensor;

fn stream_strategy() -> impl Strategy<Value = EventStream> {
    (1u32..24, 1u32..24).prop_flat_map(|(w, h)| {
        prop::collection::vec((0u64..500, 0..w, 0..h, any::<bool>()), 0..300).prop_map(move |raw| {
            let mut t = 0;
            let events = raw
                .into_iter()
                .map(|(dt, x, y, on)| {
                    t += dt;
                    let p = if on {
                        Polarity::Positive
                    } else {
                        Polarity::Negative
                    };
                    Event::new(t, x as u16, y as u16, p)
                })
                .collect();
            EventStream::new(SensorGeometry::new(w, h).unwrap(), events).unwrap()
        })
    })
}

fn five_points() -> impl Strategy<Value = Vec<[f64; 2]>> {
    prop::collection::vec(
        (-100.0f64..100.0, -100.0f64..100.0).prop_map(|(x, y)| [x, y]),
        5,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn slicing_is_idempotent(s in stream_strategy(), t0 in 0u64..20_000, dt in 0u64..20_000) {
        let once = s.slice_window(t0, dt);
        let twice = once.slice_window(t0, dt);
        prop_assert_eq!(once.events(), twice.events());
        prop_assert_eq!(once.len(), s.count_in_window(t0, dt));
        prop_assert!(once.events().iter().all(|e| e.t >= t0 && e.t < t0 + dt));
    }

    #[test]
    fn segments_partition_the_stream(s in stream_strategy(), fps in 5.0f64..500.0) {
        prop_assume!(!s.is_empty());
        let index = segment_stream(&s, fps).unwrap();
        prop_assert_eq!(index.counts.iter().sum::<usize>(), s.len());
        for pair in index.windows.windows(2) {
            prop_assert_eq!(pair[0].end(), pair[1].t0);
        }
    }

    #[test]
    fn top_k_starts_with_the_busiest(counts in prop::collection::vec(0usize..10, 1..40), k in 1usize..10) {
        let windows = (0..counts.len()).map(|i| TimeWindow::new(i as u64 * 10, 10)).collect();
        let index = WindowIndex::from_counts(windows, counts.clone()).unwrap();
        let top = select_top_k_segments(&index, k).unwrap();
        prop_assert_eq!(top[0], select_max_event_segment(&index).unwrap());
        prop_assert_eq!(top.len(), k.min(counts.len()));
        let chosen: Vec<usize> = top.iter().map(|&i| counts[i]).collect();
        prop_assert!(chosen.windows(2).all(|p| p[0] >= p[1]));
    }

    #[test]
    fn binary_round_trip(s in stream_strategy()) {
        let mut buf = Vec::new();
        write_bin(&mut buf, &s).unwrap();
        let (g, events) = read_bin(buf.as_slice()).unwrap();
        prop_assert_eq!(g, s.geometry());
        prop_assert_eq!(events.as_slice(), s.events());
    }

    #[test]
    fn csv_round_trip(s in stream_strategy()) {
        let mut buf = Vec::new();
        write_csv(&mut buf, &s).unwrap();
        let events = read_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(events.as_slice(), s.events());
    }

    #[test]
    fn tensor_round_trip(dims in prop::collection::vec(1usize..5, 1..4), seed in any::<u32>()) {
        let n: usize = dims.iter().product();
        let data: Vec<f32> = (0..n).map(|i| (i as f32 * 0.37 + seed as f32).sin()).collect();
        let t = Tensor::new(dims, data).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        prop_assert_eq!(Tensor::read_from(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn representations_conserve_mass(s in stream_strategy(), bins in 1usize..9) {
        prop_assume!(!s.is_empty());
        prop_assert_eq!(build_frame(&s).total(), s.len() as u64);
        let v = build_voxel(&s, bins).unwrap();
        prop_assert!((v.total() - signed_sum(&s) as f64).abs() <= 1e-9 * s.len() as f64);
    }

    #[test]
    fn time_surface_is_bounded(s in stream_strategy(), tau in 1.0f64..5000.0) {
        prop_assume!(!s.is_empty());
        let ts = build_timesurface(&s, s.last_t().unwrap(), tau).unwrap();
        prop_assert!(ts.grid.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn constant_video_is_silent(v in 0.0f64..1.0, frames in 2usize..6, factor in 1usize..4) {
        let seq = FrameSequence::new(3, 2, vec![vec![v; 6]; frames], 30.0).unwrap();
        let cfg = SimulatorConfig { interpolation_factor: factor, ..SimulatorConfig::default() };
        prop_assert!(frames_to_events(&seq, &cfg).unwrap().is_empty());
    }

    #[test]
    fn ramp_counts_follow_the_lattice(a in -4.0f64..0.0, b in -4.0f64..0.0) {
        let frames = vec![vec![a.exp() - DEFAULT_LOG_EPS], vec![b.exp() - DEFAULT_LOG_EPS]];
        let seq = FrameSequence::new(1, 1, frames, 25.0).unwrap();
        let s = frames_to_events(&seq, &SimulatorConfig::default()).unwrap();
        let levels: Vec<f64> = seq.frames().iter().map(|f| (f[0] + DEFAULT_LOG_EPS).ln()).collect();
        let r = (levels[1] - levels[0]) / 0.2;
        let expected = if r >= 0.0 { r.floor() } else { -r.ceil() } as usize;
        prop_assert_eq!(s.len(), expected);
        let want = if r > 0.0 { Polarity::Positive } else { Polarity::Negative };
        prop_assert!(s.events().iter().all(|e| e.polarity == want));
    }

    #[test]
    fn nme_is_similarity_invariant(
        gt in five_points(),
        pred in five_points(),
        scale in 0.1f64..10.0,
        angle in 0.0f64..std::f64::consts::TAU,
        shift in (-50.0f64..50.0, -50.0f64..50.0),
    ) {
        let g = LandmarkSet::new(gt.clone()).unwrap();
        prop_assume!(g.norm_distance(Normalization::InterPupil).is_ok_and(|d| d > 1e-3));
        let base = nme(&LandmarkSet::new(pred.clone()).unwrap(), &g, Normalization::InterPupil).unwrap();
        let (c, s) = (angle.cos(), angle.sin());
        let map = |p: &Vec<[f64; 2]>| -> LandmarkSet {
            LandmarkSet::new(
                p.iter().map(|q| [scale * (c * q[0] - s * q[1]) + shift.0, scale * (s * q[0] + c * q[1]) + shift.1]).collect(),
            )
            .unwrap()
        };
        let moved = nme(&map(&pred), &map(&gt), Normalization::InterPupil).unwrap();
        prop_assert!((base - moved).abs() <= 1e-9 * base.max(1.0));
    }

    #[test]
    fn aggregate_metrics_ignore_order(mut nmes in prop::collection::vec(0.0f64..0.3, 1..50)) {
        let (a, f) = (auc(&nmes, 0.1).unwrap(), failure_rate(&nmes, 0.1).unwrap());
        nmes.reverse();
        prop_assert!((auc(&nmes, 0.1).unwrap() - a).abs() < 1e-12);
        prop_assert_eq!(failure_rate(&nmes, 0.1).unwrap(), f);
        prop_assert!((0.0..=1.0).contains(&a));
    }
}
