use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn heatlens(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_heatlens"))
        .args(args)
        .output()
        .expect("spawn heatlens")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn field(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| {
            l.strip_prefix(key)?
                .trim()
                .strip_prefix('=')?
                .trim()
                .parse()
                .ok()
        })
        .unwrap_or_else(|| panic!("no `{key}` in {text}"))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_writes_pair_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = heatlens(&[
            "--seed",
            "3",
            "synth",
            "--count",
            "1",
            "--size",
            "32",
            "--out",
            p(d),
        ]);
        assert!(o.status.success(), "{o:?}");
    }
    let mut names: Vec<_> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names, ["pair_0_opt.ppm", "pair_0_sar.pgm"]);
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap());
    }
}

#[test]
fn mask_and_hco_on_synthetic_image() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(heatlens(&["synth", "--size", "32", "--out", p(d)])
        .status
        .success());
    let img = d.join("pair_0_sar.pgm");

    let out = d.join("mask");
    let o = heatlens(&[
        "--seed",
        "9",
        "mask",
        "--input",
        p(&img),
        "--out",
        p(&out),
        "--dump-tensors",
    ]);
    assert!(o.status.success(), "{o:?}");
    for n in [
        "pair_0_sar_low.pgm",
        "pair_0_sar_high.pgm",
        "pair_0_sar_mask.txt",
        "pair_0_sar_low.rsvh",
    ] {
        assert!(out.join(n).exists(), "{n}");
    }
    let side = stdout(&o);
    let rate = field(&side, "realized_rate");
    assert!((0.19..=0.31).contains(&rate), "{rate}");
    assert!(field(&side, "recombination_max_abs_err") < 1e-10);

    let o = heatlens(&[
        "hco",
        "--input",
        p(&img),
        "--k",
        "0.5",
        "--t",
        "1.0",
        "--out",
        p(&d.join("hot.pgm")),
    ]);
    assert!(o.status.success(), "{o:?}");
    let s = stdout(&o);
    assert!((field(&s, "input_mean") - field(&s, "output_mean")).abs() < 1e-12);
}

#[test]
fn dump_then_load_reports_shape() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(heatlens(&["synth", "--size", "16", "--out", p(d)])
        .status
        .success());
    let rsvh = d.join("opt.rsvh");
    assert!(heatlens(&[
        "dump",
        "--input",
        p(&d.join("pair_0_opt.ppm")),
        "--out",
        p(&rsvh)
    ])
    .status
    .success());
    let back = d.join("back.ppm");
    let o = heatlens(&["load", "--input", p(&rsvh), "--out", p(&back)]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("shape = [3, 16, 16]"));
    assert_eq!(
        fs::read(d.join("pair_0_opt.ppm")).unwrap(),
        fs::read(back).unwrap()
    );
}

#[test]
fn gradcheck_fault_fails_with_name() {
    let o = heatlens(&["gradcheck", "--scope", "block"]);
    assert!(o.status.success(), "{o:?}");
    let o = heatlens(&["gradcheck", "--scope", "ops", "--fault", "matmul"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("matmul"));
}

#[test]
fn bench_flops_and_oracle() {
    let o = heatlens(&["bench", "--mode", "flops"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("# crossover side"));
    let o = heatlens(&["bench", "--mode", "oracle"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 4);
}

#[test]
fn pretrain_and_resume_with_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("run.cfg");
    fs::write(
        &cfg,
        "image_size = 32\nstage_widths = 4,8,8,8\ndtype = f64\nbatch_size = 2\ncheckpoint_every = 2\n",
    )
    .unwrap();
    let run = d.join("run");
    let o = heatlens(&[
        "--config",
        p(&cfg),
        "pretrain",
        "--steps",
        "4",
        "--out",
        p(&run),
    ]);
    assert!(o.status.success(), "{o:?}");
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(
        metrics.lines().next(),
        Some("step,lr,l_total,l_con,l_spa,l_fre")
    );
    assert_eq!(metrics.lines().count(), 5);

    let resumed = d.join("resumed");
    let o = heatlens(&[
        "pretrain",
        "--steps",
        "4",
        "--resume",
        p(&run.join("step_000002.ckpt")),
        "--out",
        p(&resumed),
    ]);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(
        fs::read(run.join("final.ckpt")).unwrap(),
        fs::read(resumed.join("final.ckpt")).unwrap()
    );
}

#[test]
fn bad_arguments_exit_two() {
    assert_eq!(heatlens(&["mask"]).status.code(), Some(2));
    assert_eq!(
        heatlens(&["--dtype", "f16", "synth", "--out", "x"])
            .status
            .code(),
        Some(2)
    );
}
