mod common;

use std::collections::HashSet;

use skybench::geometry::*;
use skybench::scene::*;

fn reduced_config() -> SiteConfig {
    SiteConfig {
        site_id: "reduced".into(),
        seed: 5,
        ground: GroundConfig { n: 10, ..Default::default() },
        aerial: AerialConfig::with_frames([2, 4, 6]),
        satellite: SatelliteConfig { n: 8, ..Default::default() },
        ..Default::default()
    }
}

#[test]
fn default_site_counts_and_bands() {
    let site = generate_site(&SiteConfig::default()).unwrap();
    let m = &site.manifest;
    assert_eq!(m.count(Modality::Satellite), 120);
    assert_eq!(m.count(Modality::Aerial), 1080);
    assert!((50..=250).contains(&m.count(Modality::Ground)));

    for cam in RIG_NAMES {
        let n = m.views.iter().filter(|v| v.id.starts_with(&format!("aerial_{cam}_"))).count();
        assert_eq!(n, 360, "{cam}");
    }
    for (band, expected) in [("high", 180), ("medium", 360), ("low", 540)] {
        let n = m.views.iter().filter(|v| v.id.contains(&format!("_{band}_"))).count();
        assert_eq!(n, expected, "{band}");
    }

    let ids: HashSet<&str> = m.views.iter().map(|v| v.id.as_str()).collect();
    assert_eq!(ids.len(), m.views.len());

    for v in &m.views {
        let (lo, hi) = v.modality.altitude_band();
        assert!((lo..=hi).contains(&v.altitude_agl), "{} at {}", v.id, v.altitude_agl);
        let c = v.pose().center();
        let agl = c.z - site.scene.height(c.x, c.y);
        assert!((agl - v.altitude_agl).abs() < 1.0, "{}: {agl} vs {}", v.id, v.altitude_agl);
        assert!(!v.is_real);
    }
}

#[test]
fn aerial_side_cameras_are_yawed_center_cameras() {
    let site = generate_site(&SiteConfig::default()).unwrap();
    let m = &site.manifest;
    let mut checked = 0;
    for center in m.views.iter().filter(|v| v.id.starts_with("aerial_center_")) {
        let suffix = &center.id["aerial_center_".len()..];
        let rc = center.pose().rotation;
        for (cam, yaw) in [("left", -20.0f64), ("right", 20.0)] {
            let side = m.view(&format!("aerial_{cam}_{suffix}")).unwrap();
            let expected = rc * Rotation3::rz(yaw.to_radians());
            assert!(common::max_abs_diff(&side.pose().rotation, &expected) < 1e-9);
            assert_eq!(side.pose().center().map(|v| (v * 1e6).round()), center.pose().center().map(|v| (v * 1e6).round()));
            // Yaw about the world vertical keeps the camera's pitch.
            let tilt = |r: &Rotation3| r.matrix().row(2)[2];
            assert!((tilt(&side.pose().rotation) - tilt(&rc)).abs() < 1e-9);
            checked += 1;
        }
    }
    assert_eq!(checked, 720);
}

#[test]
fn ground_cameras_look_at_landmark() {
    let scene = HeightfieldScene::generate(&SceneConfig::default(), 9).unwrap();
    let cfg = GroundConfig { n: 50, altitude: 5.0, ..Default::default() };
    let views = ground_circle(&scene, &cfg).unwrap();
    assert_eq!(views.len(), 50);
    let target = scene.landmark_center();
    for v in &views {
        assert_eq!(v.altitude_agl, 5.0);
        let pose = v.pose();
        let c = pose.center();
        let axis = pose.principal_axis();
        let to_target = target - c;
        let miss = (to_target - axis * axis.dot(&to_target)).norm();
        assert!(miss < 1e-6 * cfg.radius, "{}: {miss}", v.id);
        let horizontal = ((c.x - target.x).powi(2) + (c.y - target.y).powi(2)).sqrt();
        assert!((horizontal - cfg.radius).abs() < 1e-9);
    }
}

#[test]
fn satellite_grid_default_and_nadir() {
    let scene = HeightfieldScene::generate(&SceneConfig::default(), 2).unwrap();
    let views = satellite_grid(&scene, &SatelliteConfig::default(), 2).unwrap();
    assert_eq!(views.len(), 120);
    let h = scene.half_extent();
    for v in &views {
        assert_eq!(v.pose().principal_axis(), -Vec3::z());
        let c = v.pose().center();
        assert!(c.x.abs() <= h && c.y.abs() <= h);
    }
    let err = satellite_grid(&scene, &SatelliteConfig { altitude: 2500.0, ..Default::default() }, 0).unwrap_err();
    assert!(matches!(err, SceneError::InvalidInput(_)));
}

#[test]
fn flat_scene_nadir_depth_is_altitude() {
    let scene = HeightfieldScene::flat(4000.0, 0.0, None);
    let k = CameraIntrinsics::from_hfov(40f64.to_radians(), 64, 64).unwrap();
    for h in [1000.0, 1500.0, 2000.0] {
        let pose = Pose::from_center(nadir_rotation(), &Vec3::new(30.0, -12.0, h));
        let d = render_depth(&scene, &pose, &k).unwrap();
        assert!(d.data.iter().all(|v| (*v as f64 - h).abs() < 1e-6), "altitude {h}");
    }
}

#[test]
fn box_footprint_depth() {
    let b = 37.0;
    let scene = HeightfieldScene::flat(4000.0, 0.0, Some(Landmark { half_x: 60.0, half_y: 40.0, height: b }));
    let k = CameraIntrinsics::from_hfov(30f64.to_radians(), 48, 48).unwrap();
    let h = 300.0;
    let pose = Pose::from_center(nadir_rotation(), &Vec3::new(0.0, 0.0, h));
    let d = render_depth(&scene, &pose, &k).unwrap();
    let rt = pose.rotation.matrix().transpose();
    let (mut on_box, mut off_box) = (0, 0);
    for v in 0..48 {
        for u in 0..48 {
            let dir = rt * k.ray(u as f64 + 0.5, v as f64 + 0.5);
            // Where the ray meets the box top plane.
            let p = pose.center() + dir * ((h - b) / -dir.z);
            let depth = d.get(u, v) as f64;
            if p.x.abs() < 59.0 && p.y.abs() < 39.0 {
                assert!((depth - (h - b)).abs() < 1e-6);
                on_box += 1;
            } else if p.x.abs() > 61.0 || p.y.abs() > 41.0 {
                assert!(depth > h - b + 1e-3);
                off_box += 1;
            }
        }
    }
    assert!(on_box > 100 && off_box > 100);
}

/// Every valid pixel, unprojected with its depth, lies on the terrain or on
/// a landmark wall.
fn check_depth_consistency(scene: &HeightfieldScene, view: &ViewRecord, depth: &skybench::raster::DepthMap) -> (usize, usize) {
    let pose = view.pose();
    let k = view.intrinsics();
    let rt = pose.rotation.matrix().transpose();
    let c = pose.center();
    let lm = scene.landmark;
    let (mut surface, mut wall) = (0, 0);
    for v in 0..k.height {
        for u in 0..k.width {
            let d = depth.get(u, v) as f64;
            if d == 0.0 {
                continue;
            }
            let p = c + rt * (k.ray(u as f64 + 0.5, v as f64 + 0.5) * d);
            if (p.z - scene.height(p.x, p.y)).abs() < 1e-3 {
                surface += 1;
                continue;
            }
            let on_face = ((p.x.abs() - lm.half_x).abs() < 1e-3 && p.y.abs() <= lm.half_y + 1e-3)
                || ((p.y.abs() - lm.half_y).abs() < 1e-3 && p.x.abs() <= lm.half_x + 1e-3);
            let smooth = scene.smooth_height(p.x, p.y);
            assert!(
                on_face && p.z >= smooth - 1e-3 && p.z <= smooth + lm.height + 1e-3,
                "{} pixel ({u}, {v}): point {p:?} off the surface by {}",
                view.id,
                p.z - scene.height(p.x, p.y)
            );
            wall += 1;
        }
    }
    (surface, wall)
}

#[test]
fn depth_unprojection_is_consistent() {
    let site = generate_site(&SiteConfig::default()).unwrap();
    let (mut surface, mut wall) = (0, 0);
    for v in site.manifest.views.iter().step_by(25) {
        let depth = render_depth(&site.scene, &v.pose(), &v.intrinsics()).unwrap();
        let (s, w) = check_depth_consistency(&site.scene, v, &depth);
        surface += s;
        wall += w;
    }
    assert!(surface > 100_000);
    assert!(wall > 0, "ground views should see landmark walls");
}

#[test]
fn camera_below_terrain_is_rejected() {
    let scene = HeightfieldScene::generate(&SceneConfig::default(), 1).unwrap();
    let k = CameraIntrinsics::from_hfov(1.0, 8, 8).unwrap();
    let c = Vec3::new(100.0, 100.0, scene.height(100.0, 100.0) - 1.0);
    let err = render_depth(&scene, &Pose::from_center(nadir_rotation(), &c), &k).unwrap_err();
    assert!(matches!(err, SceneError::InvalidCamera(_)));
}

fn satellite_view(id: &str, rotation: &Rotation3, center: Vec3, base: f64) -> ViewRecord {
    let k = CameraIntrinsics::from_hfov(40f64.to_radians(), 64, 64).unwrap();
    ViewRecord::new(id.into(), Modality::Satellite, rotation, &center, &k, center.z - base)
}

#[test]
fn nadir_ortho_is_a_uniform_scaling() {
    let scene = HeightfieldScene::flat(4000.0, 0.0, None);
    let v = satellite_view("s0", &nadir_rotation(), Vec3::new(10.0, -20.0, 1500.0), 0.0);
    let k = v.intrinsics();
    let c = v.pose().center();
    let ortho = ortho_rectify(&scene, &v, 5.0).unwrap();
    let mut n = 0;
    for row in 0..ortho.height {
        for col in 0..ortho.width {
            let idx = row * ortho.width + col;
            if !ortho.valid[idx] {
                continue;
            }
            let (x, y) = ortho.cell_center(col, row);
            let (u, vv) = ortho.source_uv[idx];
            let eu = k.cx + k.fx * (x - c.x) / c.z;
            let ev = k.cy - k.fy * (y - c.y) / c.z;
            assert!((u - eu).abs() < 0.5 && (vv - ev).abs() < 0.5);
            assert!((u - eu).abs() < 1e-9 && (vv - ev).abs() < 1e-9);
            n += 1;
        }
    }
    assert!(n > 10_000);
}

#[test]
fn two_views_rectify_to_the_same_terrain() {
    for scene in [HeightfieldScene::flat(4000.0, 12.5, None), HeightfieldScene::generate(&SceneConfig::default(), 4).unwrap()] {
        let base = scene.height(0.0, 0.0);
        let a = satellite_view("a", &nadir_rotation(), Vec3::new(-80.0, 40.0, base + 1500.0), base);
        let b = satellite_view("b", &nadir_rotation(), Vec3::new(120.0, -60.0, base + 1800.0), base);
        let (ra, rb) = (ortho_rectify(&scene, &a, 4.0).unwrap(), ortho_rectify(&scene, &b, 4.0).unwrap());
        let mut overlap = 0;
        for row in 0..ra.height {
            for col in 0..ra.width {
                let ia = row * ra.width + col;
                let (x, y) = ra.cell_center(col, row);
                let Some((cb, rbw)) = rb.cell_of(x, y) else { continue };
                let ib = rbw * rb.width + cb;
                if ra.valid[ia] && rb.valid[ib] {
                    let (xb, yb) = rb.cell_center(cb, rbw);
                    assert!((x - xb).abs() < 1e-9 && (y - yb).abs() < 1e-9);
                    assert!((ra.heights[ia] - rb.heights[ib]).abs() < 1e-6, "({x}, {y})");
                    overlap += 1;
                }
            }
        }
        assert!(overlap > 10_000);
    }
}

#[test]
fn off_nadir_ortho_keeps_grid_lines_straight() {
    let scene = HeightfieldScene::flat(4000.0, 0.0, None);
    let tilted = Rotation3::rx(5f64.to_radians()) * nadir_rotation();
    let v = satellite_view("tilt", &tilted, Vec3::new(0.0, 0.0, 1500.0), 0.0);
    let ortho = ortho_rectify(&scene, &v, 8.0).unwrap();
    let deviation = |pts: &[(f64, f64)]| -> f64 {
        let (a, b) = (pts[0], pts[pts.len() - 1]);
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len = (dx * dx + dy * dy).sqrt();
        pts.iter().map(|p| ((p.0 - a.0) * dy - (p.1 - a.1) * dx).abs() / len).fold(0.0, f64::max)
    };
    let mut lines = 0;
    for row in 0..ortho.height {
        let pts: Vec<(f64, f64)> =
            (0..ortho.width).map(|c| row * ortho.width + c).filter(|&i| ortho.valid[i]).map(|i| ortho.source_uv[i]).collect();
        if pts.len() > 10 {
            assert!(deviation(&pts) < 0.5);
            lines += 1;
        }
    }
    for col in 0..ortho.width {
        let pts: Vec<(f64, f64)> =
            (0..ortho.height).map(|r| r * ortho.width + col).filter(|&i| ortho.valid[i]).map(|i| ortho.source_uv[i]).collect();
        if pts.len() > 10 {
            assert!(deviation(&pts) < 0.5);
            lines += 1;
        }
    }
    assert!(lines > 100);
}

#[test]
fn full_default_manifest_round_trips_bit_identically() {
    let site = generate_site(&SiteConfig::default()).unwrap();
    assert!(site.manifest.views.len() >= 1250);
    let dir = tempfile::tempdir().unwrap();
    let path = write_manifest(&site.manifest, dir.path()).unwrap();
    let back = read_manifest(dir.path()).unwrap();
    assert_eq!(back, site.manifest);
    let bits = |m: &SiteManifest| -> Vec<u64> {
        m.views
            .iter()
            .flat_map(|v| {
                let mut f = v.quat_wxyz.wxyz().to_vec();
                f.extend(v.translation_xyz);
                f.extend([v.fx, v.fy, v.cx, v.cy, v.altitude_agl]);
                f
            })
            .map(f64::to_bits)
            .collect()
    };
    assert_eq!(bits(&back), bits(&site.manifest));
    assert_eq!(std::fs::read_to_string(path).unwrap(), manifest_to_json(&back));
}

#[test]
fn generation_is_deterministic() {
    let cfg = reduced_config();
    let (a, b) = (generate_site(&cfg).unwrap(), generate_site(&cfg).unwrap());
    assert_eq!(manifest_to_json(&a.manifest), manifest_to_json(&b.manifest));
    let (da, db) = (render_site_depths(&a).unwrap(), render_site_depths(&b).unwrap());
    for (x, y) in da.iter().zip(&db) {
        assert_eq!(x.to_bytes(), y.to_bytes());
    }
    let other = generate_site(&SiteConfig { seed: 6, ..cfg }).unwrap();
    assert_ne!(manifest_to_json(&other.manifest), manifest_to_json(&a.manifest));
}

#[test]
fn written_site_has_manifest_and_depths() {
    let site = generate_site(&reduced_config()).unwrap();
    let m = &site.manifest;
    assert_eq!((m.count(Modality::Ground), m.count(Modality::Aerial), m.count(Modality::Satellite)), (10, 36, 8));
    let dir = tempfile::tempdir().unwrap();
    write_site(&site, dir.path()).unwrap();
    let back = read_manifest(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(&back, m);
    for v in m.views.iter().step_by(7) {
        let d = skybench::raster::DepthMap::read(&dir.path().join(&v.depth_path)).unwrap();
        assert_eq!((d.width, d.height), (v.width, v.height));
        assert_eq!(d, render_depth(&site.scene, &v.pose(), &v.intrinsics()).unwrap());
    }
}

#[test]
fn manifest_schema_violations_name_the_field() {
    let site = generate_site(&reduced_config()).unwrap();
    let text = manifest_to_json(&site.manifest);
    let bad = text.replacen("\"modality\": \"ground\"", "\"modality\": \"underground\"", 1);
    match manifest_from_json(&bad).unwrap_err() {
        SceneError::ManifestParse { path, .. } => assert_eq!(path, "views[0].modality"),
        e => panic!("{e}"),
    }
    let bad = text.replacen("\"altitude_agl\": 5.0", "\"altitude_agl\": 500.0", 1);
    match manifest_from_json(&bad).unwrap_err() {
        SceneError::ManifestParse { path, .. } => assert_eq!(path, "views[0].altitude_agl"),
        e => panic!("{e}"),
    }
}
