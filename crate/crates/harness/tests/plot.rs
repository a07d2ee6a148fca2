use damavl_harness::plot::{read_series, render_svg, smooth, PlotSpec, Series};
use proptest::prelude::*;

#[test]
fn empty_input_renders_bare_axes() {
    let svg = render_svg(&Series::new(), &PlotSpec::default());
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert!(svg.contains("<line"));
    assert!(!svg.contains("<polyline"));
}

#[test]
fn long_format_gives_one_line_per_arm() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("r.csv");
    let mut text = String::from("run_id,variant,seed,episode,agent,metric,value\n");
    for (run, variant) in [("damavl-s1", "damavl"), ("damavl-s2", "damavl"), ("naive-s1", "naive")] {
        for e in [100, 200] {
            text.push_str(&format!("{run},{variant},1,{e},all,gap,0.5\n{run},{variant},1,{e},0,v_pi,1.0\n"));
        }
    }
    std::fs::write(&csv, text).unwrap();
    let series = read_series(&csv).unwrap();
    assert_eq!(series.keys().collect::<Vec<_>>(), ["damavl", "naive"]);
    assert_eq!(series["damavl"], vec![(100.0, 0.5), (200.0, 0.5)]);
    let svg = render_svg(&series, &PlotSpec::default());
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert!(svg.contains(">damavl</text>") && svg.contains(">naive</text>"));
}

#[test]
fn short_format_is_averaged_per_episode() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("s.csv");
    std::fs::write(&csv, "episode,series,gap\n1,a,0.2\n1,a,0.4\n2,a,1.0\n").unwrap();
    let series = read_series(&csv).unwrap();
    assert_eq!(series["a"].len(), 2);
    assert!((series["a"][0].1 - 0.3).abs() < 1e-15);
    std::fs::write(&csv, "episode,series,gap\nx,a,0.2\n").unwrap();
    assert!(read_series(&csv).is_err());
}

#[test]
fn trailing_average_example() {
    let pts = [(1.0, 1.0), (2.0, 3.0), (3.0, 5.0)];
    assert_eq!(smooth(&pts, 2), vec![(1.0, 1.0), (2.0, 2.0), (3.0, 4.0)]);
}

proptest! {
    #[test]
    fn unit_window_is_the_identity(ys in prop::collection::vec(-10.0f64..10.0, 0..50)) {
        let pts: Vec<(f64, f64)> = ys.iter().enumerate().map(|(i, &y)| (i as f64, y)).collect();
        prop_assert_eq!(smooth(&pts, 1), pts);
    }

    #[test]
    fn smoothing_stays_within_the_data_range(ys in prop::collection::vec(-10.0f64..10.0, 1..50), w in 1usize..20) {
        let pts: Vec<(f64, f64)> = ys.iter().enumerate().map(|(i, &y)| (i as f64, y)).collect();
        let lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (x, y) in smooth(&pts, w) {
            prop_assert!(y >= lo - 1e-9 && y <= hi + 1e-9);
            prop_assert!(x >= 0.0);
        }
    }
}
