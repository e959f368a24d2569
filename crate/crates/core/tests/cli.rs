use std::path::Path;
use std::process::{Command, Output};

use reflectance::brdf::ReflectanceParams;
use reflectance::dataset::{default_light_dir, viewpoint_grid, Manifest};
use reflectance::imaging::LinearImage;
use reflectance::renderer::sphere_map;
use reflectance::Rgb;

fn refl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_refl")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn usage_errors_exit_2() {
    for args in [&[][..], &["bogus"], &["round-trip", "--nope"], &["fit-map"]] {
        let o = refl(args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"), "{args:?}");
    }
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = refl(&["aggregate", "--scene", dir.path().to_str().unwrap(), "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("poses.txt"));
    let o = refl(&["round-trip", "--params", "0.1,0.2"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gen_dataset_writes_24_views_per_material() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = refl(&["--seed", "3", "gen-dataset", "--materials", "100", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(Manifest::load(&out).unwrap().rows.len(), 2400);
}

#[test]
fn flags_override_config_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# small dataset\nmaterials = 2\nformat = pfm\n").unwrap();
    let a = dir.path().join("a");
    let o = refl(&["--config", cfg.to_str().unwrap(), "gen-dataset", "--out", a.to_str().unwrap()]);
    assert!(o.status.success());
    let m = Manifest::load(&a).unwrap();
    assert_eq!(m.rows.len(), 48);
    assert!(m.rows[0].path.ends_with(".pfm"));

    let b = dir.path().join("b");
    let o = refl(&["--config", cfg.to_str().unwrap(), "gen-dataset", "--materials", "1", "--out", b.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(Manifest::load(&b).unwrap().rows.len(), 24);

    std::fs::write(&cfg, "materials = many\n").unwrap();
    let o = refl(&["--config", cfg.to_str().unwrap(), "gen-dataset", "--out", b.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));
}

#[test]
fn fit_map_recovers_a_sphere_material() {
    let dir = tempfile::tempdir().unwrap();
    let cam = &viewpoint_grid()[9];
    let p = ReflectanceParams::new([0.6, 0.3, 0.2], [0.8, 0.8, 0.8], 0.3).unwrap();
    let path = dir.path().join("m.rmap");
    sphere_map(&p, cam, &default_light_dir()).unwrap().save(&path).unwrap();
    let eye = cam.center();
    let l = default_light_dir();
    let o = refl(&[
        "fit-map",
        "--map",
        path.to_str().unwrap(),
        "--eye",
        &format!("{},{},{}", eye.x, eye.y, eye.z),
        "--light-dir",
        &format!("{},{},{}", l.x, l.y, l.z),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let field = |name: &str| -> Vec<f64> {
        let line = text.lines().find(|l| l.starts_with(name)).unwrap();
        line.split('\t').skip(1).map(|v| v.parse().unwrap()).collect()
    };
    let got: Vec<f64> = [field("kd"), field("ks"), field("roughness")].concat();
    for (g, t) in got.iter().zip(p.to_array()) {
        assert!((g - t).abs() < 0.02, "{got:?}");
    }
}

fn write_ramp(path: &Path, scale: f64) {
    let px = (0..64).map(|i| Rgb::repeat(scale * (i % 8) as f64 / 8.0)).collect();
    LinearImage::from_pixels(8, 8, px).save(path).unwrap();
}

#[test]
fn evaluate_prints_the_report_format() {
    let dir = tempfile::tempdir().unwrap();
    let (r, t) = (dir.path().join("ref"), dir.path().join("test"));
    std::fs::create_dir_all(&r).unwrap();
    std::fs::create_dir_all(&t).unwrap();
    write_ramp(&r.join("a.pfm"), 1.0);
    write_ramp(&t.join("a.pfm"), 1.0);
    write_ramp(&r.join("b.pfm"), 1.0);
    write_ramp(&t.join("b.pfm"), 0.5);
    let o = refl(&["evaluate", "--reference", r.to_str().unwrap(), "--test", t.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "pair_id\tpsnr\tnrmse\tdssim");
    assert_eq!(lines[1], "a.pfm\t100.000000\t0.000000\t0.000000");
    let b: Vec<&str> = lines[2].split('\t').collect();
    assert_eq!(b[0], "b.pfm");
    let mse = (0..8).map(|i| (i as f64 / 16.0).powi(2)).sum::<f64>() / 8.0;
    assert_eq!(b[1], format!("{:.6}", -10.0 * mse.log10()));
    assert_eq!(lines.len(), 3);

    std::fs::remove_file(t.join("b.pfm")).unwrap();
    let o = refl(&["evaluate", "--reference", r.to_str().unwrap(), "--test", t.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn scene_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_str().unwrap().to_owned();
    let o = refl(&["round-trip", "--subdivisions", "2", "--resolution", "96", "--out", &d("rt")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("psnr\t"));

    let o = refl(&["aggregate", "--scene", &d("rt/scene"), "--out", &d("maps")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let l = default_light_dir();
    let light = format!("{},{},{}", l.x, l.y, l.z);
    let o = refl(&[
        "estimate",
        "--maps",
        &d("maps"),
        "--mesh",
        &d("rt/scene/mesh.obj"),
        "--out",
        &d("table.tsv"),
        "--light-dir",
        &light,
        "--min-samples",
        "3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(d("table.tsv")).unwrap();
    assert!(table.starts_with("triangle_id\tkd_r"));
    assert!(table.contains("\tfit\t"));

    let o = refl(&["relight", "--scene", &d("rt/scene"), "--table", &d("table.tsv"), "--out", &d("relit"), "--light-dir", &light]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = refl(&["evaluate", "--reference", &d("rt/scene/images"), "--test", &d("relit")]);
    assert!(o.status.success());
    let rows: Vec<String> = stdout(&o).lines().skip(1).map(str::to_owned).collect();
    assert_eq!(rows.len(), 8);
    for row in rows {
        let psnr: f64 = row.split('\t').nth(1).unwrap().parse().unwrap();
        assert!(psnr > 30.0, "{row}");
    }
}
