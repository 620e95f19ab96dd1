//! Wire-contract tests for the external adapter protocol, using the
//! reference adapters shipped in the CLI binary plus deliberately broken
//! shell-script adapters.

use std::path::{Path, PathBuf};

use mitokit::cascade::{
    extract_crops, finalize, run_stage1, run_stage2, CascadeConfig, CascadeError,
    ClassifierAdapter, DetectorAdapter, SourceImage, StderrCapture,
};
use mitokit::ensemble::DetectionSet;
use mitokit::refdetect::BlobParams;
use mitokit::stain::{MacenkoConfig, StainModel};
use mitokit::synthetic::{planted_blob_scene, SceneParams, RUIFROK_EOSIN, RUIFROK_HEMATOXYLIN};
use mitokit::tiling::PatchShape;

fn mitokit_bin() -> String {
    env!("CARGO_BIN_EXE_mitokit").to_string()
}

fn scene() -> SourceImage {
    let model = StainModel {
        stain_vectors: [RUIFROK_HEMATOXYLIN, RUIFROK_EOSIN],
        max_concentrations: [1.0, 1.0],
    };
    let s = planted_blob_scene(
        "wire",
        &SceneParams::default(),
        &model,
        &[(100, 100), (400, 300)],
        &[(300, 120)],
    );
    SourceImage { id: "wire".into(), image: s.image }
}

fn cascade_cfg() -> CascadeConfig {
    CascadeConfig {
        crop_size: 32,
        patch: PatchShape { width: 256, height: 192 },
        ..Default::default()
    }
}

fn write_script(dir: &Path, name: &str, body: &str) -> PathBuf {
    use std::os::unix::fs::PermissionsExt;
    let path = dir.join(name);
    let prologue = r#"#!/bin/sh
OUT=""
MANIFEST=""
while [ $# -gt 0 ]; do
  case "$1" in
    --out) OUT="$2"; shift 2 ;;
    --manifest) MANIFEST="$2"; shift 2 ;;
    *) shift ;;
  esac
done
"#;
    std::fs::write(&path, format!("{prologue}{body}\n")).unwrap();
    let mut perms = std::fs::metadata(&path).unwrap().permissions();
    perms.set_mode(0o755);
    std::fs::set_permissions(&path, perms).unwrap();
    path
}

#[test]
fn external_detector_matches_builtin_results() {
    let src = scene();
    let cfg = cascade_cfg();
    let blob = BlobParams { conc_threshold: 0.25, ..Default::default() };
    let mut sink = StderrCapture::default();

    let builtin = DetectorAdapter::BuiltinBlob {
        blob,
        macenko: MacenkoConfig::default(),
    };
    let inproc = run_stage1(
        std::slice::from_ref(&src),
        &builtin,
        &cfg,
        None,
        &mut sink,
    )
    .unwrap();

    let work = tempfile::tempdir().unwrap();
    let external = DetectorAdapter::External {
        command: vec![
            mitokit_bin(),
            "adapter-detect".into(),
            "--conc-threshold".into(),
            "0.25".into(),
        ],
    };
    let subproc = run_stage1(
        std::slice::from_ref(&src),
        &external,
        &cfg,
        Some(work.path()),
        &mut sink,
    )
    .unwrap();

    assert_eq!(inproc[0].boxes.len(), subproc[0].boxes.len());
    // planted squares give integer bounds: geometry must agree exactly;
    // scores differ only by how the stain model was pooled
    for (a, b) in inproc[0].boxes.iter().zip(&subproc[0].boxes) {
        assert_eq!((a.x1, a.y1, a.x2, a.y2), (b.x1, b.y1, b.x2, b.y2));
        assert!((a.score - b.score).abs() < 1e-3, "{} vs {}", a.score, b.score);
    }
}

#[test]
fn external_classifier_matches_builtin_darkness() {
    let src = scene();
    let mut dets = DetectionSet::new("wire");
    dets.boxes.push(mitokit::ensemble::DetectionBox {
        x1: 84.0,
        y1: 84.0,
        x2: 116.0,
        y2: 116.0,
        score: 0.7,
        model_id: 0,
        label: 0,
    });
    dets.boxes.push(mitokit::ensemble::DetectionBox {
        x1: 284.0,
        y1: 104.0,
        x2: 316.0,
        y2: 136.0,
        score: 0.2,
        model_id: 0,
        label: 0,
    });
    let crops = extract_crops(&src.image, &dets, 32).unwrap();
    let mut sink = StderrCapture::default();

    let inproc = run_stage2(&crops, &ClassifierAdapter::BuiltinDarkness, None, &mut sink).unwrap();

    let work = tempfile::tempdir().unwrap();
    let external = ClassifierAdapter::External {
        command: vec![mitokit_bin(), "adapter-classify".into()],
    };
    let subproc = run_stage2(&crops, &external, Some(work.path()), &mut sink).unwrap();

    // PNG is lossless and JSON carries full f64 precision
    assert_eq!(inproc, subproc);

    // and the scores behave: dark blob crop far above the pale decoy crop
    assert!(subproc[0] > 0.5, "dark crop score {}", subproc[0]);
    assert!(subproc[1] < 0.5, "decoy crop score {}", subproc[1]);

    // finalize keeps only the dark one at the default threshold
    let kept = finalize(&dets, &subproc, &CascadeConfig::default()).unwrap();
    assert_eq!(kept.boxes.len(), 1);
    assert_eq!(kept.boxes[0].x1, 84.0);
}

fn expect_adapter_failure(result: Result<Vec<DetectionSet>, CascadeError>, needle: &str) {
    match result {
        Err(CascadeError::AdapterFailure { message, .. }) => {
            assert!(
                message.contains(needle),
                "failure message {message:?} missing {needle:?}"
            );
        }
        Err(other) => panic!("expected AdapterFailure, got {other:?}"),
        Ok(_) => panic!("expected AdapterFailure, got success"),
    }
}

#[test]
fn nonzero_exit_is_adapter_failure_with_stderr() {
    let src = scene();
    let dir = tempfile::tempdir().unwrap();
    let script = write_script(
        dir.path(),
        "dies.sh",
        "echo 'model file not found' >&2\nexit 7",
    );
    let adapter = DetectorAdapter::External {
        command: vec![script.display().to_string()],
    };
    let mut sink = StderrCapture::default();
    let result = run_stage1(
        std::slice::from_ref(&src),
        &adapter,
        &cascade_cfg(),
        Some(dir.path()),
        &mut sink,
    );
    match result {
        Err(CascadeError::AdapterFailure { message, stderr }) => {
            assert!(message.contains("exited with"), "{message}");
            assert!(stderr.contains("model file not found"), "{stderr}");
        }
        other => panic!("expected AdapterFailure, got {other:?}"),
    }
}

#[test]
fn malformed_output_names_the_line() {
    let src = scene();
    let dir = tempfile::tempdir().unwrap();
    let script = write_script(
        dir.path(),
        "garbage.sh",
        r#"printf '%s\n' 'this is not json' > "$OUT""#,
    );
    let adapter = DetectorAdapter::External {
        command: vec![script.display().to_string()],
    };
    let mut sink = StderrCapture::default();
    let result = run_stage1(
        std::slice::from_ref(&src),
        &adapter,
        &cascade_cfg(),
        Some(dir.path()),
        &mut sink,
    );
    expect_adapter_failure(result, "line 1");
}

#[test]
fn inverted_box_is_rejected_with_the_offending_line() {
    let src = scene();
    let dir = tempfile::tempdir().unwrap();
    let script = write_script(
        dir.path(),
        "inverted.sh",
        r#"printf '%s\n' '{"patch_id":0,"x1":5.0,"y1":1.0,"x2":3.0,"y2":2.0,"score":0.5,"label":0}' > "$OUT""#,
    );
    let adapter = DetectorAdapter::External {
        command: vec![script.display().to_string()],
    };
    let mut sink = StderrCapture::default();
    let result = run_stage1(
        std::slice::from_ref(&src),
        &adapter,
        &cascade_cfg(),
        Some(dir.path()),
        &mut sink,
    );
    expect_adapter_failure(result, "x1 < x2");
}

#[test]
fn unknown_patch_id_is_rejected() {
    let src = scene();
    let dir = tempfile::tempdir().unwrap();
    let script = write_script(
        dir.path(),
        "badpatch.sh",
        r#"printf '%s\n' '{"patch_id":99,"x1":1.0,"y1":1.0,"x2":3.0,"y2":2.0,"score":0.5,"label":0}' > "$OUT""#,
    );
    let adapter = DetectorAdapter::External {
        command: vec![script.display().to_string()],
    };
    let mut sink = StderrCapture::default();
    let result = run_stage1(
        std::slice::from_ref(&src),
        &adapter,
        &cascade_cfg(),
        Some(dir.path()),
        &mut sink,
    );
    expect_adapter_failure(result, "unknown patch_id");
}

#[test]
fn classifier_count_mismatch() {
    let src = scene();
    let mut dets = DetectionSet::new("wire");
    for i in 0..3 {
        dets.boxes.push(mitokit::ensemble::DetectionBox {
            x1: 50.0 + i as f64 * 60.0,
            y1: 50.0,
            x2: 70.0 + i as f64 * 60.0,
            y2: 70.0,
            score: 0.5,
            model_id: 0,
            label: 0,
        });
    }
    let crops = extract_crops(&src.image, &dets, 32).unwrap();
    let dir = tempfile::tempdir().unwrap();
    // answers only two of the three crops
    let script = write_script(
        dir.path(),
        "short.sh",
        r#"printf '%s\n%s\n' '{"box_id":0,"score":0.5}' '{"box_id":1,"score":0.25}' > "$OUT""#,
    );
    let adapter = ClassifierAdapter::External {
        command: vec![script.display().to_string()],
    };
    let mut sink = StderrCapture::default();
    match run_stage2(&crops, &adapter, Some(dir.path()), &mut sink) {
        Err(CascadeError::CountMismatch { expected: 3, got: 2 }) => {}
        other => panic!("expected CountMismatch, got {other:?}"),
    }
}

#[test]
fn classifier_rejects_bad_scores_and_ids() {
    let src = scene();
    let mut dets = DetectionSet::new("wire");
    dets.boxes.push(mitokit::ensemble::DetectionBox {
        x1: 50.0,
        y1: 50.0,
        x2: 70.0,
        y2: 70.0,
        score: 0.5,
        model_id: 0,
        label: 0,
    });
    let crops = extract_crops(&src.image, &dets, 32).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut sink = StderrCapture::default();

    let overflow = write_script(
        dir.path(),
        "overflow.sh",
        r#"printf '%s\n' '{"box_id":0,"score":1.5}' > "$OUT""#,
    );
    let adapter = ClassifierAdapter::External {
        command: vec![overflow.display().to_string()],
    };
    match run_stage2(&crops, &adapter, Some(dir.path().join("a").as_path()), &mut sink) {
        Err(CascadeError::AdapterFailure { message, .. }) => {
            assert!(message.contains("outside [0, 1]"), "{message}");
        }
        other => panic!("{other:?}"),
    }

    let stranger = write_script(
        dir.path(),
        "stranger.sh",
        r#"printf '%s\n' '{"box_id":42,"score":0.5}' > "$OUT""#,
    );
    let adapter = ClassifierAdapter::External {
        command: vec![stranger.display().to_string()],
    };
    match run_stage2(&crops, &adapter, Some(dir.path().join("b").as_path()), &mut sink) {
        Err(CascadeError::AdapterFailure { message, .. }) => {
            assert!(message.contains("unknown box_id"), "{message}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn missing_command_is_adapter_failure() {
    let src = scene();
    let dir = tempfile::tempdir().unwrap();
    let adapter = DetectorAdapter::External {
        command: vec!["/nonexistent/detector".into()],
    };
    let mut sink = StderrCapture::default();
    let result = run_stage1(
        std::slice::from_ref(&src),
        &adapter,
        &cascade_cfg(),
        Some(dir.path()),
        &mut sink,
    );
    expect_adapter_failure(result, "failed to spawn");
}

#[test]
fn adapter_stderr_is_captured_on_success() {
    let src = scene();
    let dir = tempfile::tempdir().unwrap();
    let script = write_script(
        dir.path(),
        "chatty.sh",
        "echo 'loaded weights v3' >&2\n: > \"$OUT\"",
    );
    let adapter = DetectorAdapter::External {
        command: vec![script.display().to_string()],
    };
    let mut sink = StderrCapture::default();
    let sets = run_stage1(
        std::slice::from_ref(&src),
        &adapter,
        &cascade_cfg(),
        Some(dir.path()),
        &mut sink,
    )
    .unwrap();
    assert!(sets[0].boxes.is_empty());
    assert_eq!(sink.entries.len(), 1);
    assert_eq!(sink.entries[0].stage, "stage1");
    assert!(sink.entries[0].stderr.contains("loaded weights v3"));
}

#[test]
fn padded_patch_boxes_are_clipped_to_the_image() {
    // an adapter that reports a box hugging the padded bottom-right corner
    // of the last patch: the global box must be clipped to the image
    let src = scene(); // 512x384 with 256x192 patches -> 4 patches, none padded
    let small = SourceImage {
        id: "pad".into(),
        image: image::imageops::crop_imm(&src.image, 0, 0, 300, 200).to_image(),
    };
    let dir = tempfile::tempdir().unwrap();
    let script = write_script(
        dir.path(),
        "padbox.sh",
        r#"printf '%s\n' '{"patch_id":3,"x1":30.0,"y1":4.0,"x2":80.0,"y2":60.0,"score":0.9,"label":0}' > "$OUT""#,
    );
    let adapter = DetectorAdapter::External {
        command: vec![script.display().to_string()],
    };
    let mut sink = StderrCapture::default();
    // patch 3 origin (256, 192): valid region 44 x 8
    let sets = run_stage1(
        std::slice::from_ref(&small),
        &adapter,
        &cascade_cfg(),
        Some(dir.path()),
        &mut sink,
    )
    .unwrap();
    assert_eq!(sets[0].boxes.len(), 1);
    let b = sets[0].boxes[0];
    assert!(b.x2 <= 300.0 && b.y2 <= 200.0, "box not clipped: {b:?}");
    assert!(b.x1 < b.x2 && b.y1 < b.y2);
}
