//! Serialization and eye-constraint behavior of the scene model.

use rgsplat::scene::presets::{eye_scene, random_cloud};
use rgsplat::scene::{
    apply_eye_constraints, blend_field, export_json, load_scene, save_scene, Group,
};
use rgsplat::{Error, Vec3};

#[test]
fn binary_round_trip_is_bit_exact() {
    let cloud = random_cloud(1000, 7);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scene.rgsc");
    save_scene(&cloud, &path).unwrap();
    let loaded = load_scene(&path).unwrap();
    assert_eq!(cloud.len(), loaded.len());
    for i in 0..cloud.len() {
        // Bit-level equality, not approximate: every f64 must survive.
        let (a, b) = (&cloud.gaussians[i], &loaded.gaussians[i]);
        assert_eq!(a.pos.map(f64::to_bits), b.pos.map(f64::to_bits), "pos {i}");
        assert_eq!(a.quat.map(f64::to_bits), b.quat.map(f64::to_bits), "quat {i}");
        assert_eq!(a.log_scale.map(f64::to_bits), b.log_scale.map(f64::to_bits));
        assert_eq!(a.opacity_logit.to_bits(), b.opacity_logit.to_bits());
        assert_eq!(a.group, b.group);
        let (ta, tb) = (&cloud.transfer[i], &loaded.transfer[i]);
        assert_eq!(ta, tb, "transfer {i}");
    }
    assert_eq!(cloud.eye_left, loaded.eye_left);
    assert_eq!(cloud.eye_right, loaded.eye_right);
    assert_eq!(cloud.eyes_frozen, loaded.eyes_frozen);
}

#[test]
fn eye_cloud_round_trip_preserves_eyeballs_and_flags() {
    let cloud = eye_scene(64, 16, 3).unwrap();
    assert!(cloud.eyes_frozen);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("eyes.rgsc");
    save_scene(&cloud, &path).unwrap();
    let loaded = load_scene(&path).unwrap();
    assert_eq!(cloud, loaded);
    assert!(loaded.eye_left.is_some() && loaded.eye_right.is_some());
    for i in loaded.group_indices(Group::LeftEye) {
        assert!(loaded.transfer[i].albedo_view.is_some());
    }
    for i in loaded.group_indices(Group::Head) {
        assert!(loaded.transfer[i].albedo_view.is_none());
    }
}

#[test]
fn saving_non_finite_values_names_the_field_and_index() {
    let mut cloud = random_cloud(10, 1);
    cloud.transfer[7].d_m[3] = f64::NAN;
    let dir = tempfile::tempdir().unwrap();
    let err = save_scene(&cloud, &dir.path().join("bad.rgsc")).unwrap_err();
    match err {
        Error::NonFinite(loc) => {
            assert!(loc.contains("d_m") && loc.contains('7'), "location was {loc:?}");
        }
        other => panic!("expected NonFinite, got {other:?}"),
    }

    let mut cloud = random_cloud(10, 2);
    cloud.gaussians[4].pos.y = f64::INFINITY;
    let err = save_scene(&cloud, &dir.path().join("bad2.rgsc")).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("pos") && msg.contains('4'), "message was {msg:?}");
}

#[test]
fn wrong_magic_and_version_are_rejected_with_context() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scene.rgsc");
    save_scene(&random_cloud(5, 1), &path).unwrap();

    let good = std::fs::read(&path).unwrap();

    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    std::fs::write(&path, &bad_magic).unwrap();
    let msg = load_scene(&path).unwrap_err().to_string();
    assert!(msg.to_lowercase().contains("magic"), "message was {msg:?}");

    let mut bad_version = good.clone();
    bad_version[4] = 99;
    std::fs::write(&path, &bad_version).unwrap();
    let msg = load_scene(&path).unwrap_err().to_string();
    assert!(msg.contains("version") && msg.contains("99"), "message was {msg:?}");
}

#[test]
fn truncated_file_reports_where_data_ran_out() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scene.rgsc");
    save_scene(&random_cloud(20, 4), &path).unwrap();
    let good = std::fs::read(&path).unwrap();
    // Chop the file in the middle of the parameter blocks.
    std::fs::write(&path, &good[..good.len() / 2]).unwrap();
    let err = load_scene(&path).unwrap_err();
    let msg = err.to_string();
    assert!(
        msg.contains("truncated") || msg.contains("eof") || msg.contains("unexpected end"),
        "message was {msg:?}"
    );
}

#[test]
fn trailing_garbage_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scene.rgsc");
    save_scene(&random_cloud(5, 5), &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.extend_from_slice(&[0u8; 16]);
    std::fs::write(&path, &bytes).unwrap();
    let msg = load_scene(&path).unwrap_err().to_string();
    assert!(msg.contains("trailing"), "message was {msg:?}");
}

#[test]
fn corrupt_payload_with_nan_names_field_on_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scene.rgsc");
    save_scene(&random_cloud(8, 6), &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    // Overwrite the last 8 bytes of payload (an albedo_view coefficient of
    // the final Gaussian) with a NaN bit pattern.
    let n = bytes.len();
    bytes[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
    std::fs::write(&path, &bytes).unwrap();
    let msg = load_scene(&path).unwrap_err().to_string();
    assert!(msg.contains("albedo_view") && msg.contains('7'), "message was {msg:?}");
}

#[test]
fn json_export_is_valid_and_complete() {
    let cloud = eye_scene(16, 8, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scene.json");
    export_json(&cloud, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(doc["gaussians"].as_array().unwrap().len(), cloud.len());
    assert!(doc["eye_left"].is_object());
    // Spot-check one scalar field survives the trip.
    let p0 = doc["gaussians"][0]["pos"].as_array().unwrap();
    assert!((p0[0].as_f64().unwrap() - cloud.gaussians[0].pos.x).abs() < 1e-12);
}

#[test]
fn eye_constraints_are_idempotent_and_leave_head_untouched() {
    let mut cloud = eye_scene(32, 12, 11).unwrap();
    // Perturb eye positions off the surface, then re-apply.
    let eye_idx = cloud.group_indices(Group::LeftEye);
    for &i in &eye_idx {
        cloud.gaussians[i].pos += Vec3::new(0.01, -0.02, 0.015);
    }
    let head_before: Vec<_> = cloud
        .group_indices(Group::Head)
        .into_iter()
        .map(|i| (cloud.gaussians[i].clone(), cloud.transfer[i].clone()))
        .collect();
    apply_eye_constraints(&mut cloud).unwrap();
    let left = cloud.eye_left.clone().unwrap();
    for &i in &eye_idx {
        assert!(blend_field(&left, cloud.gaussians[i].pos).abs() < 1e-6);
        assert_eq!(cloud.transfer[i].dn_view, [Vec3::zeros(); 9]);
    }
    for (k, i) in cloud.group_indices(Group::Head).into_iter().enumerate() {
        assert_eq!(cloud.gaussians[i], head_before[k].0, "head gaussian {i} changed");
        assert_eq!(cloud.transfer[i], head_before[k].1, "head transfer {i} changed");
    }
    // A second application must reproduce the same state exactly.
    let snapshot = cloud.clone();
    apply_eye_constraints(&mut cloud).unwrap();
    assert_eq!(snapshot, cloud);
}
