use std::path::Path;
use std::process::{Command, Output};

use adjmove_cli::idx::{self, encode_images, encode_labels, ingest_idx, IdxError};

fn adjmove(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adjmove")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn rows(o: &Output) -> Vec<String> {
    stdout(o).lines().skip(1).map(str::to_string).collect()
}

#[test]
fn broadcast_passes_with_exit_zero() {
    let o = adjmove(&["adjoint-test", "--op", "broadcast", "--workers", "3", "--shape", "7", "--trials", "100", "--seed", "1", "--epsilon", "1e-12"]);
    assert!(o.status.success());
    let r = rows(&o);
    assert_eq!(r.len(), 1);
    assert!(r[0].starts_with("broadcast, 100, ") && r[0].ends_with(", PASS"), "{}", r[0]);
}

#[test]
fn identity_error_is_zero() {
    let o = adjmove(&["adjoint-test", "--op", "identity"]);
    let r = rows(&o);
    let err: f64 = r[0].split(", ").nth(2).unwrap().parse().unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn all_operators_pass() {
    let o = adjmove(&["adjoint-test", "--all", "--workers", "4"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let r = rows(&o);
    assert!(r.len() >= 15);
    assert!(r.iter().all(|l| l.ends_with("PASS")));
}

#[test]
fn corrupt_broadcast_exits_nonzero() {
    let o = adjmove(&["adjoint-test", "--op", "broadcast_corrupt", "--workers", "3", "--shape", "7"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(rows(&o)[0].ends_with("FAIL"));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(adjmove(&["adjoint-test"]).status.code(), Some(2));
    assert_eq!(adjmove(&["adjoint-test", "--op", "fft"]).status.code(), Some(2));
    assert_eq!(adjmove(&["train"]).status.code(), Some(2));
}

fn halo_rows(args: &[&str]) -> Vec<(usize, usize, usize, usize)> {
    let o = adjmove(&[&["halo"], args].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().next().unwrap(), "worker, dim, bulk_range, left_halo, right_halo, left_trim, right_trim");
    rows(&o)
        .iter()
        .map(|l| {
            let f: Vec<usize> = l.split(", ").skip(3).map(|v| v.parse().unwrap()).collect();
            (f[0], f[1], f[2], f[3])
        })
        .collect()
}

#[test]
fn halo_uniform_example() {
    assert_eq!(
        halo_rows(&["--shape", "11", "--kernel", "5", "--pad", "2", "--partition", "3"]),
        vec![(0, 2, 0, 0), (2, 2, 0, 0), (2, 0, 0, 0)]
    );
}

#[test]
fn halo_unpadded_example() {
    assert_eq!(
        halo_rows(&["--shape", "11", "--kernel", "5", "--partition", "3"]),
        vec![(0, 3, 0, 0), (1, 1, 0, 0), (3, 0, 0, 0)]
    );
}

#[test]
fn halo_strided_example() {
    assert_eq!(
        halo_rows(&["--shape", "20", "--kernel", "2", "--stride", "2", "--partition", "6"]),
        vec![(0, 0, 0, 0), (0, 0, 0, 0), (0, 1, 0, 0), (0, 2, 1, 0), (0, 1, 2, 0), (0, 0, 1, 0)]
    );
}

#[test]
fn halo_too_fine_is_an_error() {
    let o = adjmove(&["halo", "--shape", "6", "--kernel", "5", "--pad", "2", "--partition", "6"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("too fine"));
}

#[test]
fn verify_seed_seven_passes() {
    let o = adjmove(&["verify", "--seed", "7"]);
    assert!(o.status.success(), "{}", stdout(&o));
}

#[test]
fn verify_reports_injected_fault() {
    let o = adjmove(&["verify", "--seed", "7", "--fault", "C5.w@1"]);
    assert_eq!(o.status.code(), Some(1));
    let first = rows(&o).into_iter().find(|l| l.ends_with("FAIL")).unwrap();
    assert!(first.starts_with("C5, "), "{first}");
}

fn losses(text: &str, mode: &str) -> Vec<f64> {
    text.lines()
        .filter(|l| l.starts_with(mode))
        .map(|l| l.split(", ").nth(3).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn synthetic_training_descends_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("metrics.csv");
    let args = ["train", "--synthetic", "--mode", "both", "--epochs", "2", "--batch", "32", "--synthetic-size", "256", "--metrics", m.to_str().unwrap()];
    let a = adjmove(&args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let text = stdout(&a);
    assert!(text.trim_end().lines().last().unwrap().starts_with("loss_divergence, "));
    let seq = losses(&text, "sequential");
    assert_eq!(seq.len(), 16);
    assert!(seq[15] < seq[0]);
    assert_eq!(losses(&text, "distributed").len(), 16);
    let file = std::fs::read_to_string(&m).unwrap();
    assert_eq!(file.lines().count(), 33);
    assert_eq!(stdout(&adjmove(&args)), text);
}

fn write_fixture(dir: &Path, images: &str, labels: &str, n: usize, side: usize) {
    let pixels: Vec<u8> = (0..n * side * side).map(|i| (i * 37 % 256) as u8).collect();
    let lab: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    std::fs::write(dir.join(images), encode_images(side, side, &pixels)).unwrap();
    std::fs::write(dir.join(labels), encode_labels(&lab)).unwrap();
}

#[test]
fn two_image_fixture_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let (im, lb) = (dir.path().join("im"), dir.path().join("lb"));
    std::fs::write(&im, encode_images(2, 2, &[0, 64, 128, 255, 255, 0, 0, 255])).unwrap();
    std::fs::write(&lb, encode_labels(&[7, 1])).unwrap();
    let d = ingest_idx(&im, &lb).unwrap();
    assert_eq!(d.shape(), [2, 1, 2, 2]);
    assert_eq!(d.labels.len(), 2);
    assert_eq!(d.images[3], 1.0);
    assert!(d.images.iter().all(|p| (0.0..=1.0).contains(p)));
}

#[test]
fn ingest_errors_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let (im, lb) = (dir.path().join("im"), dir.path().join("lb"));
    let bytes = encode_images(2, 2, &[0; 8]);
    std::fs::write(&im, &bytes[..20]).unwrap();
    std::fs::write(&lb, encode_labels(&[1, 2])).unwrap();
    let e = ingest_idx(&im, &lb).unwrap_err();
    assert!(matches!(e, IdxError::Truncated { .. }) && e.to_string().contains("truncated"), "{e}");

    std::fs::write(&im, &bytes).unwrap();
    std::fs::write(&lb, encode_labels(&[1, 2, 3])).unwrap();
    assert!(matches!(ingest_idx(&im, &lb), Err(IdxError::CountMismatch { images: 2, labels: 3 })));

    assert!(matches!(ingest_idx(&lb, &im), Err(IdxError::BadMagic { .. })));
    assert!(matches!(ingest_idx(&dir.path().join("missing"), &lb), Err(IdxError::Io { .. })));
}

#[test]
fn trains_from_idx_directory() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), idx::TRAIN_IMAGES, idx::TRAIN_LABELS, 10, 28);
    write_fixture(dir.path(), idx::TEST_IMAGES, idx::TEST_LABELS, 4, 28);
    let o = adjmove(&["train", "--dataset", dir.path().to_str().unwrap(), "--epochs", "2", "--batch", "4", "--mode", "sequential"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    // 10 samples in batches of 4: two steps per epoch, the remainder dropped
    let r = rows(&o);
    assert_eq!(r.len(), 4);
    assert!(r[1].starts_with("sequential, 1, 2, ") && !r[1].ends_with("nan"));
}

#[test]
fn config_file_sets_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# defaults\nop = broadcast\nworkers = 3\nshape = 7\ntrials = 5\n").unwrap();
    let o = adjmove(&["adjoint-test", "--config", cfg.to_str().unwrap(), "--trials", "9"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(rows(&o)[0].starts_with("broadcast, 9, "));

    std::fs::write(&cfg, "epochs = 1\n").unwrap();
    let o = adjmove(&["--config", cfg.to_str().unwrap(), "adjoint-test", "--all"]);
    assert_eq!(o.status.code(), Some(2));
}
