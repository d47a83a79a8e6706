//! End-to-end tests that drive the compiled `pixl` binary as a subprocess,
//! checking artifacts, determinism, and the exit-code contract.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pixl_core::imgcore::{self, FloatBuffer};
use pixl_core::intrinsics::{
    build_conditioning, passes_to_intrinsics, percentile_rescale, IntrinsicTriplet,
};
use pixl_core::scenegen::{generate_scene, render_passes, sample_lighting};

const PASS_NAMES: [&str; 12] = [
    "diffuse_color",
    "diffuse_direct",
    "diffuse_indirect",
    "glossy_color",
    "glossy_direct",
    "glossy_indirect",
    "transmission_color",
    "transmission_direct",
    "transmission_indirect",
    "volume_direct",
    "volume_indirect",
    "emission",
];

fn pixl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pixl"))
}

fn output_of(cmd: &mut Command) -> Output {
    cmd.output().expect("spawning pixl")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Sorted (relative path, bytes) listing of a directory tree.
fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut entries = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).expect("read_dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).expect("under root").to_path_buf();
                entries.push((rel, fs::read(&path).expect("read file")));
            }
        }
    }
    entries.sort();
    entries
}

fn gen_data(dir: &Path, scenes: usize, conditions: usize, resolution: usize, seed: u64) {
    let out = output_of(pixl().args([
        "gen-data",
        "--scenes",
        &scenes.to_string(),
        "--conditions",
        &conditions.to_string(),
        "--seed",
        &seed.to_string(),
        "--resolution",
        &resolution.to_string(),
        "--out",
        dir.to_str().unwrap(),
    ]));
    assert_ok(&out);
}

fn micro_run_config(run_dir: &Path, data_dir: &Path, iterations: usize, warmup: usize) -> String {
    format!(
        r#"output = "{run}"

[model]
d = 16
trunk_depth = 2
heads = 2
patch_size = 4
n_registers = 2
readout_indices = [0, 1]
source_encoder_depth = 1
intrinsics_encoder_depth = 1

[train]
iterations = {iterations}
batch_size = 1
warmup_steps = {warmup}
eval_interval = 1
dataset = "{data}"
"#,
        run = run_dir.display(),
        data = data_dir.display(),
    )
}

#[test]
fn gen_data_is_deterministic_and_layout_complete() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen_data(&a, 2, 3, 24, 7);
    gen_data(&b, 2, 3, 24, 7);
    assert_eq!(tree(&a), tree(&b), "same seed must give byte-identical trees");

    let names: Vec<String> = tree(&a)
        .iter()
        .map(|(path, _)| path.to_string_lossy().into_owned())
        .collect();
    assert!(names.contains(&"manifest.txt".to_string()));
    assert_eq!(names.iter().filter(|n| n.ends_with(".png")).count(), 6);
    assert_eq!(names.iter().filter(|n| n.ends_with("albedo.pfm")).count(), 2);
    for k in 0..3 {
        assert!(names.contains(&format!("scenes/scene_000/cond_{k}.shading.pfm")));
        assert!(names.contains(&format!("scenes/scene_001/cond_{k}.residual.pfm")));
    }
}

#[test]
fn gen_data_rejects_single_condition() {
    let tmp = tempfile::tempdir().unwrap();
    let out = output_of(pixl().args([
        "gen-data",
        "--scenes",
        "1",
        "--conditions",
        "1",
        "--out",
        tmp.path().join("d").to_str().unwrap(),
    ]));
    assert_code(&out, 1);
    assert!(
        stderr_of(&out).contains("pairing requires at least 2 conditions"),
        "stderr: {}",
        stderr_of(&out)
    );
}

#[test]
fn gen_data_refuses_to_overwrite_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("d");
    gen_data(&dir, 1, 2, 8, 1);

    let rerun = output_of(pixl().args([
        "gen-data",
        "--scenes",
        "1",
        "--conditions",
        "2",
        "--resolution",
        "8",
        "--out",
        dir.to_str().unwrap(),
    ]));
    assert_code(&rerun, 1);
    assert!(stderr_of(&rerun).contains("not empty"), "stderr: {}", stderr_of(&rerun));

    let forced = output_of(pixl().args([
        "gen-data",
        "--scenes",
        "1",
        "--conditions",
        "2",
        "--resolution",
        "8",
        "--out",
        dir.to_str().unwrap(),
        "--force",
    ]));
    assert_ok(&forced);
}

#[test]
fn train_eval_relight_pipeline_produces_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data, 1, 2, 16, 3);

    let run_dir = tmp.path().join("run");
    let config_path = tmp.path().join("run.toml");
    fs::write(&config_path, micro_run_config(&run_dir, &data, 2, 1)).unwrap();
    let trained = output_of(pixl().args(["train", "--config", config_path.to_str().unwrap()]));
    assert_ok(&trained);

    assert!(run_dir.join("config.toml").exists());
    assert!(run_dir.join("checkpoint.bin").exists());
    let log = fs::read_to_string(run_dir.join("log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "step,loss,l1,perceptual,grad_norm,lr");
    assert_eq!(lines.len(), 3, "header plus one row per iteration");

    let csv_path = tmp.path().join("eval.csv");
    let evaled = output_of(pixl().args([
        "eval",
        "--checkpoint",
        run_dir.join("checkpoint.bin").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        csv_path.to_str().unwrap(),
    ]));
    assert_ok(&evaled);
    let stdout = String::from_utf8_lossy(&evaled.stdout).into_owned();
    assert!(stdout.contains("copy-source"), "stdout: {stdout}");
    assert!(stdout.contains("after 2 warm-ups"), "stdout: {stdout}");
    let csv = fs::read_to_string(&csv_path).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert!(rows[0].starts_with("scene,source,target,"));
    assert_eq!(rows.len(), 3, "one scene with 2 conditions has 2 ordered pairs");

    let scene_path = tmp.path().join("scene.toml");
    let lights_path = tmp.path().join("lights.toml");
    fs::write(&scene_path, "resolution = 16\nseed = 5\n").unwrap();
    fs::write(&lights_path, "seed = 9\n").unwrap();
    let source = data.join("scenes/scene_000/cond_0.png");
    let relight = |out_png: &Path| {
        output_of(pixl().args([
            "relight",
            "--checkpoint",
            run_dir.join("checkpoint.bin").to_str().unwrap(),
            "--source",
            source.to_str().unwrap(),
            "--scene",
            scene_path.to_str().unwrap(),
            "--lights",
            lights_path.to_str().unwrap(),
            "--out",
            out_png.to_str().unwrap(),
        ]))
    };
    let (png_a, png_b) = (tmp.path().join("a.png"), tmp.path().join("b.png"));
    assert_ok(&relight(&png_a));
    assert_ok(&relight(&png_b));
    let bytes = fs::read(&png_a).unwrap();
    assert!(!bytes.is_empty());
    assert_eq!(bytes, fs::read(&png_b).unwrap(), "relight must be deterministic");

    let mismatched = tmp.path().join("scene24.toml");
    fs::write(&mismatched, "resolution = 24\nseed = 5\n").unwrap();
    let bad = output_of(pixl().args([
        "relight",
        "--checkpoint",
        run_dir.join("checkpoint.bin").to_str().unwrap(),
        "--source",
        source.to_str().unwrap(),
        "--scene",
        mismatched.to_str().unwrap(),
        "--lights",
        lights_path.to_str().unwrap(),
        "--out",
        tmp.path().join("c.png").to_str().unwrap(),
    ]));
    assert_code(&bad, 1);
    assert!(stderr_of(&bad).contains("source image"), "stderr: {}", stderr_of(&bad));
}

#[test]
fn train_rejects_unknown_config_keys() {
    let tmp = tempfile::tempdir().unwrap();
    for body in ["nonsense = 1\n", "[train]\nnot_a_key = 3\n"] {
        let path = tmp.path().join("bad.toml");
        fs::write(&path, body).unwrap();
        let out = output_of(pixl().args(["train", "--config", path.to_str().unwrap()]));
        assert_code(&out, 1);
        assert!(stderr_of(&out).contains("unknown field"), "stderr: {}", stderr_of(&out));
    }
}

#[test]
fn train_with_one_iteration_writes_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data, 1, 2, 16, 4);
    let run_dir = tmp.path().join("run");
    let config_path = tmp.path().join("run.toml");
    fs::write(&config_path, micro_run_config(&run_dir, &data, 1, 0)).unwrap();
    let out = output_of(pixl().args(["train", "--config", config_path.to_str().unwrap()]));
    assert_ok(&out);
    assert!(run_dir.join("checkpoint.bin").exists());
}

#[test]
fn augment_preview_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data, 1, 2, 16, 6);
    let stack_dir = data.join("scenes/scene_000");
    let preview = |seed: &str, out_png: &Path| {
        output_of(pixl().args([
            "augment-preview",
            "--seed",
            seed,
            "--in",
            stack_dir.to_str().unwrap(),
            "--condition",
            "1",
            "--out",
            out_png.to_str().unwrap(),
        ]))
    };
    let (a, b) = (tmp.path().join("a.png"), tmp.path().join("b.png"));
    assert_ok(&preview("11", &a));
    assert_ok(&preview("11", &b));
    let bytes = fs::read(&a).unwrap();
    assert!(!bytes.is_empty());
    assert_eq!(bytes, fs::read(&b).unwrap(), "same seed must give identical previews");
}

#[test]
fn compose_matches_the_library_and_zero_passes_give_zero_outputs() {
    let tmp = tempfile::tempdir().unwrap();

    let zero_dir = tmp.path().join("passes0");
    fs::create_dir_all(&zero_dir).unwrap();
    let zero = FloatBuffer::zeros(3, 8, 8);
    for name in PASS_NAMES {
        imgcore::save_pfm(&zero, &zero_dir.join(format!("{name}.pfm"))).unwrap();
    }
    let out0 = tmp.path().join("out0");
    assert_ok(&output_of(pixl().args([
        "compose",
        "--passes",
        zero_dir.to_str().unwrap(),
        "--out",
        out0.to_str().unwrap(),
    ])));
    for file in [
        "albedo.pfm",
        "shading.pfm",
        "residual.pfm",
        "conditioning_albedo.pfm",
        "conditioning_shading.pfm",
        "conditioning_residual.pfm",
    ] {
        let buf = imgcore::load_pfm(&out0.join(file)).unwrap();
        assert!(buf.data().iter().all(|&v| v == 0.0), "{file} must be all zero");
    }

    let scene = generate_scene(5, 16);
    let lights = sample_lighting(2);
    let passes = render_passes(&scene, &lights).unwrap();
    let pass_dir = tmp.path().join("passes1");
    fs::create_dir_all(&pass_dir).unwrap();
    let fields: [(&str, &FloatBuffer); 12] = [
        ("diffuse_color", &passes.diffuse_color),
        ("diffuse_direct", &passes.diffuse_direct),
        ("diffuse_indirect", &passes.diffuse_indirect),
        ("glossy_color", &passes.glossy_color),
        ("glossy_direct", &passes.glossy_direct),
        ("glossy_indirect", &passes.glossy_indirect),
        ("transmission_color", &passes.transmission_color),
        ("transmission_direct", &passes.transmission_direct),
        ("transmission_indirect", &passes.transmission_indirect),
        ("volume_direct", &passes.volume_direct),
        ("volume_indirect", &passes.volume_indirect),
        ("emission", &passes.emission),
    ];
    for (name, buffer) in fields {
        imgcore::save_pfm(buffer, &pass_dir.join(format!("{name}.pfm"))).unwrap();
    }
    let out1 = tmp.path().join("out1");
    assert_ok(&output_of(pixl().args([
        "compose",
        "--passes",
        pass_dir.to_str().unwrap(),
        "--out",
        out1.to_str().unwrap(),
    ])));

    let triplet = passes_to_intrinsics(&passes).unwrap();
    assert_eq!(imgcore::load_pfm(&out1.join("albedo.pfm")).unwrap().data(), triplet.albedo.data());
    assert_eq!(
        imgcore::load_pfm(&out1.join("shading.pfm")).unwrap().data(),
        triplet.shading.data()
    );
    assert_eq!(
        imgcore::load_pfm(&out1.join("residual.pfm")).unwrap().data(),
        triplet.residual.data()
    );
    let (shading, residual) =
        percentile_rescale(&triplet.shading, &triplet.residual, 0.98, 1e-4).unwrap();
    let rescaled = IntrinsicTriplet { albedo: triplet.albedo.clone(), shading, residual };
    let stack = build_conditioning(&rescaled).unwrap();
    let plane = 16 * 16 * 3;
    for (group, file) in
        ["conditioning_albedo.pfm", "conditioning_shading.pfm", "conditioning_residual.pfm"]
            .iter()
            .enumerate()
    {
        let buf = imgcore::load_pfm(&out1.join(file)).unwrap();
        assert_eq!(buf.data(), &stack.buffer().data()[group * plane..(group + 1) * plane]);
    }

    let missing_dir = tmp.path().join("passes2");
    fs::create_dir_all(&missing_dir).unwrap();
    for name in PASS_NAMES.iter().filter(|n| **n != "volume_direct") {
        imgcore::save_pfm(&zero, &missing_dir.join(format!("{name}.pfm"))).unwrap();
    }
    let missing = output_of(pixl().args([
        "compose",
        "--passes",
        missing_dir.to_str().unwrap(),
        "--out",
        tmp.path().join("out2").to_str().unwrap(),
    ]));
    assert_code(&missing, 1);
    assert!(stderr_of(&missing).contains("volume_direct"), "stderr: {}", stderr_of(&missing));
}

#[test]
fn violated_internal_invariant_exits_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data, 1, 2, 16, 4);
    let run_dir = tmp.path().join("run");
    let config_path = tmp.path().join("run.toml");
    fs::write(&config_path, micro_run_config(&run_dir, &data, 1, 0)).unwrap();
    assert_ok(&output_of(pixl().args(["train", "--config", config_path.to_str().unwrap()])));

    // 18 is not divisible by the checkpoint's patch size of 4; the shape
    // invariant trips inside the forward pass, not in input validation.
    let odd_data = tmp.path().join("data18");
    gen_data(&odd_data, 1, 2, 18, 4);
    let out = output_of(pixl().args([
        "eval",
        "--checkpoint",
        run_dir.join("checkpoint.bin").to_str().unwrap(),
        "--data",
        odd_data.to_str().unwrap(),
        "--out",
        tmp.path().join("eval.csv").to_str().unwrap(),
    ]));
    assert_code(&out, 2);
    assert!(stderr_of(&out).contains("internal error"), "stderr: {}", stderr_of(&out));
}

#[test]
fn pixl_threads_is_validated() {
    let tmp = tempfile::tempdir().unwrap();
    for bad in ["0", "many"] {
        let out = output_of(
            pixl().env("PIXL_THREADS", bad).args([
                "gen-data",
                "--scenes",
                "1",
                "--conditions",
                "2",
                "--resolution",
                "8",
                "--out",
                tmp.path().join("x").to_str().unwrap(),
            ]),
        );
        assert_code(&out, 1);
        assert!(stderr_of(&out).contains("PIXL_THREADS"), "stderr: {}", stderr_of(&out));
    }
    let ok = output_of(
        pixl().env("PIXL_THREADS", "3").args([
            "gen-data",
            "--scenes",
            "1",
            "--conditions",
            "2",
            "--resolution",
            "8",
            "--out",
            tmp.path().join("y").to_str().unwrap(),
        ]),
    );
    assert_ok(&ok);
}
