mod common;

use common::{max_abs_diff, pattern, random};
use gacn::net::fuse_images;
use gacn::stack::{
    bench, calibrated_fuse, decision_volume, fuse_stack, select_sources, serial_fuse, FocalStack,
    Strategy, DV_EPS,
};
use gacn::{FusionConfig, FusionNet, Tensor};

fn net() -> FusionNet {
    FusionNet::init(FusionConfig::default(), 21).unwrap()
}

fn stack(n: usize, size: usize, seed: u64) -> FocalStack {
    let images = (0..n)
        .map(|j| random(&[1, 1, size, size], 0.0, 1.0, seed + j as u64))
        .collect();
    FocalStack::new(images, (0..n).map(|j| format!("img{j}")).collect()).unwrap()
}

#[test]
fn stack_validation() {
    let a = pattern(16, 16, 0);
    assert!(FocalStack::new(vec![a.clone()], vec!["a".into()]).is_err());
    assert!(FocalStack::new(vec![], vec![]).is_err());
    assert!(FocalStack::new(
        vec![a.clone(), pattern(16, 15, 1)],
        vec!["a".into(), "b".into()]
    )
    .is_err());
    assert!(FocalStack::new(vec![a.clone(), a.clone()], vec!["a".into()]).is_err());
    let s = FocalStack::new(vec![a.clone(), a], vec!["a".into(), "b".into()]).unwrap();
    assert_eq!(s.len(), 2);
    assert_eq!(s.ids(), ["a", "b"]);
}

#[test]
fn path_counters() {
    let net = net();
    for (n, serial_ext, cal_ext) in [(2, 2, 2), (3, 4, 3), (5, 8, 5)] {
        let s = stack(n, 16, 10 * n as u64);
        let (_, cs) = serial_fuse(&s, &net).unwrap();
        let c = calibrated_fuse(&s, &net).unwrap();
        assert_eq!((cs.extraction, cs.decision), (serial_ext, n - 1));
        assert_eq!((c.counts.extraction, c.counts.decision), (cal_ext, n - 1));
    }
}

#[test]
fn counter_arithmetic_at_ten_images() {
    let s = stack(10, 12, 3);
    let report = bench(&s, &net(), 1).unwrap();
    assert_eq!(report.serial.extraction_count, 18);
    assert_eq!(report.calibrated.extraction_count, 10);
    assert_eq!(report.serial.decision_count, 9);
    assert_eq!(report.calibrated.decision_count, 9);
    assert!((report.extraction_saving_percent() - 400.0 / 9.0).abs() < 1e-12);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bench.csv");
    report.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "strategy,N,extraction_count,decision_count,wall_ms_total,wall_ms_per_image"
    );
    assert!(lines[1].starts_with("serial,10,18,9,"));
    assert!(lines[2].starts_with("calibrated,10,10,9,"));
    assert!(bench(&s, &net(), 0).is_err());
}

fn maps(ps: &[&[f64]]) -> Vec<Tensor> {
    ps.iter()
        .map(|p| Tensor::new([1, 1, 1, p.len()], p.to_vec()).unwrap())
        .collect()
}

#[test]
fn decision_volume_formula() {
    let dv = decision_volume(&maps(&[&[0.9], &[0.4]])).unwrap();
    assert!((dv[0][0] - 0.9).abs() < 1e-15);
    assert!((dv[1][0] - 0.1).abs() < 1e-15);
    assert!((dv[2][0] - 1.35).abs() < 1e-12);
    assert_eq!(select_sources(&dv), vec![2]);
}

#[test]
fn decision_volume_clamps_extremes() {
    let dv = decision_volume(&maps(&[&[0.7, 0.0, 1.0], &[0.0, 0.5, 1.0]])).unwrap();
    assert!((dv[2][0] - 0.7 * (1.0 - DV_EPS) / DV_EPS).abs() < 1e-3);
    for plane in &dv {
        assert!(plane.iter().all(|v| v.is_finite() && *v >= 0.0));
    }
    assert!(decision_volume(&[]).is_err());
    assert!(decision_volume(&maps(&[&[0.5, 0.5], &[0.5]])).is_err());
}

#[test]
fn selection_ties_go_to_the_lowest_index() {
    let dv = vec![
        vec![0.5, 0.2, 0.3],
        vec![0.5, 0.7, 0.3],
        vec![0.1, 0.7, 0.3],
    ];
    assert_eq!(select_sources(&dv), vec![0, 1, 0]);
    // two-image case: image 1 wins exactly when p > 0.5
    let dv = decision_volume(&maps(&[&[0.5, 0.5 + 1e-12, 0.2, 0.999]])).unwrap();
    assert_eq!(select_sources(&dv), vec![0, 0, 1, 0]);
}

#[test]
fn two_image_calibration_matches_binarized_pipeline() {
    let net = net();
    for seed in 0..3 {
        let s = stack(2, 20, 100 + seed);
        let c = calibrated_fuse(&s, &net).unwrap();
        let (a, b) = (&s.images()[0], &s.images()[1]);
        let (_, m) = net.fuse_gray(a, b).unwrap();
        let hard = m.final_dm.map(|p| if p > 0.5 { 1.0 } else { 0.0 });
        assert_eq!(c.fused, fuse_images(&hard, a, b).unwrap());
    }
}

#[test]
fn calibrated_pixels_come_from_one_source() {
    let s = stack(4, 18, 7);
    let c = calibrated_fuse(&s, &net()).unwrap();
    assert_eq!(c.volume.len(), 4);
    for (i, (&v, &j)) in c.fused.data().iter().zip(&c.selection).enumerate() {
        assert_eq!(v, s.images()[j].data()[i]);
    }
}

#[test]
fn identical_images_fuse_to_themselves() {
    let img = pattern(20, 20, 9);
    let s = FocalStack::new(
        vec![img.clone(); 4],
        (0..4).map(|j| j.to_string()).collect(),
    )
    .unwrap();
    let net = net();
    for strategy in [Strategy::Serial, Strategy::Calibrated] {
        let (fused, _) = fuse_stack(&s, &net, strategy).unwrap();
        assert!(
            max_abs_diff(fused.data(), img.data()) < 1.0 / 255.0,
            "{strategy:?}"
        );
    }
}

#[test]
fn color_stacks_select_whole_pixels() {
    let images: Vec<Tensor> = (0..3)
        .map(|j| random(&[1, 3, 16, 16], 0.0, 1.0, 40 + j))
        .collect();
    let s = FocalStack::new(images, vec!["r".into(), "g".into(), "b".into()]).unwrap();
    let c = calibrated_fuse(&s, &net()).unwrap();
    assert_eq!(c.fused.shape(), &[1, 3, 16, 16]);
    for ch in 0..3 {
        for i in 0..256 {
            let k = ch * 256 + i;
            assert_eq!(c.fused.data()[k], s.images()[c.selection[i]].data()[k]);
        }
    }
    let (serial, _) = serial_fuse(&s, &net()).unwrap();
    assert_eq!(serial.shape(), &[1, 3, 16, 16]);
}

#[test]
fn strategy_names_parse() {
    for s in [Strategy::Serial, Strategy::Calibrated] {
        assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
    }
    assert!("parallel".parse::<Strategy>().is_err());
}

#[test]
fn stacks_load_from_a_directory_in_name_order() {
    let dir = tempfile::tempdir().unwrap();
    let imgs: Vec<Tensor> = (0..3).map(|j| pattern(12, 12, j)).collect();
    for (name, img) in ["b.png", "a.png", "c.pgm"].iter().zip(&imgs) {
        gacn::io::write_image(&dir.path().join(name), img).unwrap();
    }
    std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
    let s = FocalStack::from_dir(dir.path()).unwrap();
    assert_eq!(s.ids(), ["a", "b", "c"]);
    assert!(max_abs_diff(s.images()[1].data(), imgs[0].data()) <= 0.5 / 255.0 + 1e-12);
    let lonely = tempfile::tempdir().unwrap();
    gacn::io::write_image(&lonely.path().join("x.png"), &imgs[0]).unwrap();
    assert!(FocalStack::from_dir(lonely.path()).is_err());
}
