use std::path::Path;
use std::process::{Command, Output};

fn bsdelab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bsdelab")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn csv_body(text: &str) -> Vec<String> {
    text.lines().filter(|l| !l.starts_with('#')).map(String::from).collect()
}

#[test]
fn negative_path_count_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "a.cfg", "generator.name = linear\nn_paths = -10\n");
    let out = bsdelab(&["solve", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert_eq!(err.lines().count(), 1);
    assert!(err.contains("status=INVALID_PARAMETER"), "{err}");
}

#[test]
fn unknown_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "a.cfg", "generator.name = linear\nn_pahts = 10\n");
    let out = bsdelab(&["solve", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("status=UNKNOWN_KEY"));
}

#[test]
fn unordered_converse_pair_exits_2_with_hypothesis_tag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "a.cfg",
        "generator1.name = linear\n\
         generator2.name = linear\n\
         generator2.param.c = 0.5\n\
         n_paths = 2000\n",
    );
    let out = bsdelab(&["converse", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("HYPOTHESIS_FAIL"));
}

#[test]
fn failed_assertion_exits_4_and_still_writes_csv() {
    // one implicit step is far from the PDE solution
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "a.cfg", "problem = semilinear\nn_paths = 5000\nn_steps = 1\n");
    let out_path = dir.path().join("fk.csv");
    let out = bsdelab(&["fk", "--config", &cfg, "--out", out_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    assert!(stderr(&out).contains("status=EXPERIMENT_FAIL"));
    let body = csv_body(&std::fs::read_to_string(out_path).unwrap());
    assert_eq!(body[0], "t,x,u_mc,sd,u_fd,diff,pass");
    assert!(body[1].ends_with(",false"));
}

#[test]
fn manifest_and_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "a.cfg", "n_paths = 300\nn_steps = 5\nseed = 3\n");
    let a = bsdelab(&["simulate", "--config", &cfg]);
    let b = bsdelab(&["simulate", "--config", &cfg, "--seed", "4"]);
    assert_eq!(a.status.code(), Some(0));
    let (a, b) = (String::from_utf8(a.stdout).unwrap(), String::from_utf8(b.stdout).unwrap());
    let head: Vec<&str> = a.lines().take_while(|l| l.starts_with('#')).collect();
    assert_eq!(head[0], "# schema_version=1");
    assert_eq!(head[1], "# subcommand=simulate");
    assert_eq!(head[2], "# seed=3");
    assert!(head[3].starts_with("# config_sha256=") && head[3].len() == "# config_sha256=".len() + 64);
    assert!(head[4].starts_with("# version=bsdelab "));
    assert!(b.contains("# seed=4"));
    assert_ne!(csv_body(&a)[2], csv_body(&b)[2]);
}

#[test]
fn help_documents_every_column() {
    let cases: [(&str, &[&str]); 7] = [
        ("simulate", &["step", "mean_x_1", "sd_x_1", "stopped_fraction"]),
        ("solve", &["meanY", "sdY", "meanZ_1", "picard_iters_max", "cond_number"]),
        ("envelope", &["alpha", "lower", "upper", "combined", "bound"]),
        ("represent", &["eps", "quotient_mean", "sd", "target", "l1_err", "l2_err", "rate"]),
        ("converse", &["point_id", "mean1", "mean2", "se_diff", "verdict"]),
        ("fk", &["u_mc", "sd", "u_fd", "diff", "pass"]),
        ("touch", &["mode", "residual_direct", "residual_quotient", "pass"]),
    ];
    for (sub, columns) in cases {
        let out = bsdelab(&[sub, "--help"]);
        assert_eq!(out.status.code(), Some(0));
        let text = String::from_utf8(out.stdout).unwrap();
        for c in columns {
            assert!(text.contains(c), "`{sub} --help` does not mention {c}");
        }
    }
}

#[test]
fn represent_linear_emits_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "a.cfg",
        "generator.name = linear\ngenerator.param.a = 1\ny = 1\nn_paths = 5000\n",
    );
    let out = bsdelab(&["represent", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let body = csv_body(&String::from_utf8(out.stdout).unwrap());
    assert_eq!(body[0], "t,y,z,eps,quotient_mean,sd,target,l1_err,l2_err,rate");
    assert_eq!(body.len(), 5);
}

#[test]
fn touch_and_envelope_succeed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "t.cfg", "problem = semilinear\nphi = bump\nn_paths = 4000\n");
    let out = bsdelab(&["touch", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let body = csv_body(&String::from_utf8(out.stdout).unwrap());
    assert!(body[1].contains(",sub,") && body[1].ends_with(",true"));

    let cfg = write_config(
        dir.path(),
        "e.cfg",
        "generator.name = paper_example\ngenerator.param.delta = 0.1\nx = 0.5\nu_resolution = 1e-3\n",
    );
    let out = bsdelab(&["envelope", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
}
