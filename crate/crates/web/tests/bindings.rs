use camoforge_web::{scene_rgba, score_json, texture_rgba};

#[test]
fn textures_respect_constraints() {
    let px = texture_rgba("PixFc", 3).unwrap();
    assert_eq!(px.len(), 512 * 512 * 4);
    let colors: std::collections::BTreeSet<&[u8]> = px.chunks_exact(4).collect();
    assert!(colors.len() <= 5);
    // 16x16 blocks
    assert_eq!(&px[0..4], &px[15 * 4..16 * 4]);
    assert!(texture_rgba("LcFc", 0).is_err());
}

#[test]
fn scenes_render_and_respond_to_inputs() {
    let a = scene_rgba(4, 64, "", 0.0).unwrap();
    assert_eq!(a.len(), 64 * 64 * 4);
    assert_eq!(a, scene_rgba(4, 64, "", 0.0).unwrap());
    assert_ne!(a, scene_rgba(4, 64, "Pix", 0.0).unwrap());
    assert_ne!(a, scene_rgba(4, 64, "", 0.5).unwrap());
    assert!(scene_rgba(4, 8, "", 0.0).is_err());
    assert!(scene_rgba(4, 64, "", 1.5).is_err());
}

#[test]
fn scores_follow_the_metric_definitions() {
    let v: serde_json::Value = serde_json::from_str(&score_json(12, 8, 1, 0, "PixFc", "combined", 0.4).unwrap()).unwrap();
    assert_eq!(v["label"], "C-PixFc");
    assert!((v["easr"].as_f64().unwrap() - 0.35).abs() < 1e-12);
    assert_eq!(v["practicality"]["total"], -2);
    let p1 = 2.0 * 0.35 * 0.6 / 0.95;
    assert!((v["p1"].as_f64().unwrap() - p1).abs() < 1e-12);
    let none: serde_json::Value = serde_json::from_str(&score_json(0, 0, 2, 3, "U", "texture", 0.0).unwrap()).unwrap();
    assert!(none["easr"].is_null());
    assert!(score_json(1, 1, 1, 1, "U", "other", 0.0).is_err());
}
