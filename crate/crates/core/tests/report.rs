use steerscope::config::RunConfig;
use steerscope::report::svg::{bar_chart, heatmap, line_chart, Series};
use steerscope::report::{schema, Table};

fn well_formed(svg: &str) {
    let doc = roxmltree::Document::parse(svg).unwrap_or_else(|e| panic!("{e}\n{svg}"));
    assert_eq!(doc.root_element().tag_name().name(), "svg");
}

#[test]
fn figures_are_well_formed_xml() {
    let series = vec![
        Series {
            name: "dim <harmful> & co".into(),
            points: vec![(0.0, 0.2), (50.0, 0.9), (100.0, 1.0)],
            dashed: false,
        },
        Series {
            name: "empty".into(),
            points: vec![],
            dashed: true,
        },
    ];
    well_formed(&line_chart("F \"by\" size", "x", "y", &series, Some((0.0, 1.0)), Some(0.85)));
    well_formed(&line_chart("nothing", "x", "y", &[], None, None));
    let labels = vec!["a<b".to_string(), "c&d".to_string()];
    let values = vec![vec![Some(1.0), None], vec![Some(-0.5), Some(0.0)]];
    let text = vec![vec!["x>1".to_string(), String::new()], vec!["'q'".into(), "z".into()]];
    well_formed(&heatmap("overlap", &labels, &labels, &values, Some(&text)));
    well_formed(&heatmap("overlap", &labels, &labels, &values, None));
    let bars = vec![("dim-ntp".to_string(), vec![Some(0.3), None]), ("dim-po".into(), vec![Some(1.0), Some(0.0)])];
    well_formed(&bar_chart("IoU", "IoU", &["τ=0".into(), "τ=1".into()], &bars, Some((0.0, 1.0))));
}

#[test]
fn figures_are_deterministic() {
    let s = vec![Series {
        name: "a".into(),
        points: vec![(0.1, 1.0 / 3.0)],
        dashed: false,
    }];
    assert_eq!(line_chart("t", "x", "y", &s, None, None), line_chart("t", "x", "y", &s, None, None));
}

#[test]
fn tables_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Table::new(schema::IOU);
    t.push(vec!["0.5".into(), "dim-po".into(), "0.25".into(), String::new()]);
    t.push(vec!["1".into(), "a,b \"quoted\"".into(), "1".into(), "1e-300".into()]);
    let p = dir.path().join("iou.csv");
    t.write(&p).unwrap();
    let (header, rows) = Table::read(&p).unwrap();
    assert_eq!(header, schema::IOU);
    assert_eq!(rows, t.rows);

    let empty = dir.path().join("empty.csv");
    Table::new(schema::SWEEP).write(&empty).unwrap();
    let (header, rows) = Table::read(&empty).unwrap();
    assert_eq!(header, schema::SWEEP);
    assert!(rows.is_empty());
}

#[test]
#[should_panic(expected = "row width")]
fn rows_must_match_the_schema() {
    Table::new(schema::NODES).push(vec!["dim".into()]);
}

#[test]
fn config_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        seed: 3,
        patch_metric: "dir-kl".into(),
        dirkl_threshold: 0.01,
        ablations: vec!["none".into(), "qk-freeze".into()],
        ..RunConfig::default()
    };
    let p = dir.path().join("run.toml");
    cfg.save(&p).unwrap();
    assert_eq!(RunConfig::load(&p).unwrap(), cfg);
}
