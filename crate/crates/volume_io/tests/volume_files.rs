use im2grid::grid::SamplingGrid;
use im2grid_synth::seeded_pair;
use im2grid_volume_io::*;

#[test]
fn pair_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let pair = seeded_pair::<f32>(3, &[12, 10, 8], 3, 1.0, 1.0).unwrap();
    let p = |n: &str| dir.path().join(n);
    write_image(&p("f.vol"), &pair.fixed).unwrap();
    write_labels(&p("l.vol"), &pair.fixed_labels).unwrap();
    write_grid(&p("g.grid"), &pair.ground_truth).unwrap();
    assert_eq!(read_image::<f32>(&p("f.vol")).unwrap(), pair.fixed);
    assert_eq!(read_labels(&p("l.vol")).unwrap(), pair.fixed_labels);
    assert_eq!(read_grid::<f32>(&p("g.grid")).unwrap(), pair.ground_truth);
    // kinds are not interchangeable
    assert!(read_labels(&p("f.vol")).is_err());
    assert!(read_image::<f32>(&p("l.vol")).is_err());
    assert!(read_grid::<f32>(&p("f.vol")).is_err());
    // no temporary files are left behind
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 3);
}

#[test]
fn missing_file_reports_its_path() {
    let err = read_image::<f32>(std::path::Path::new("/nonexistent/x.vol")).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/x.vol"), "{err}");
}

#[test]
fn pgm_export_has_a_valid_header() {
    let dir = tempfile::tempdir().unwrap();
    let pair = seeded_pair::<f32>(3, &[12, 10, 8], 3, 1.0, 1.0).unwrap();
    let path = dir.path().join("s.pgm");
    let grid = SamplingGrid::<f32>::identity(&[12, 10, 8]).unwrap();
    export_slice(&path, &pair.moving, Some(SliceSpec { axis: 2, index: 4 }), Some(Overlay { grid: &grid, spacing: 3 })).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let header = b"P5\n10 12\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(bytes.len(), header.len() + 12 * 10);
    assert!(export_slice(&path, &pair.moving, None, None).is_err());
    assert!(export_slice(&path, &pair.moving, Some(SliceSpec { axis: 2, index: 8 }), None).is_err());
}
