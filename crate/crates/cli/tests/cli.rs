use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_manipdiff"))
        .args(args)
        .output()
        .unwrap()
}

fn scenario_path() -> String {
    format!(
        "{}/../../scenarios/plate_wipe.json",
        env!("CARGO_MANIFEST_DIR")
    )
}

fn workdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("manipdiff-cli-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen(dir: &Path, n: &str) -> PathBuf {
    let out = dir.join("demos");
    let o = bin(&[
        "gen-demos",
        "--scenario",
        &scenario_path(),
        "--seed",
        "3",
        "--num-demos",
        n,
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

#[test]
fn validation_errors_exit_with_two() {
    let dir = workdir("validation");
    let out = dir.join("x");
    let no_seed = bin(&[
        "gen-demos",
        "--scenario",
        &scenario_path(),
        "--out",
        s(&out),
    ]);
    assert_eq!(no_seed.status.code(), Some(2));
    assert!(stderr(&no_seed).starts_with("ERROR:"));

    let zero = bin(&[
        "gen-demos",
        "--scenario",
        &scenario_path(),
        "--seed",
        "1",
        "--num-demos",
        "0",
        "--out",
        s(&out),
    ]);
    assert_eq!(zero.status.code(), Some(2));

    let missing = bin(&[
        "fit-gmm",
        "--seed",
        "1",
        "--demos",
        s(&dir.join("nope")),
        "--out",
        s(&out),
    ]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(stderr(&missing).contains("does not exist"));
}

#[test]
fn unreachable_waypoint_is_named() {
    let dir = workdir("unreachable");
    let mut json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(scenario_path()).unwrap()).unwrap();
    json["task"]["end"] = serde_json::json!([-0.3, 2.0]);
    let path = dir.join("far.json");
    std::fs::write(&path, json.to_string()).unwrap();
    let o = bin(&[
        "gen-demos",
        "--scenario",
        s(&path),
        "--seed",
        "1",
        "--num-demos",
        "1",
        "--out",
        s(&dir.join("d")),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("step"), "{}", stderr(&o));
}

#[test]
fn demo_schema_mismatch_is_refused_with_hint() {
    let dir = workdir("schema");
    let demos = gen(&dir, "1");
    let file = demos.join("demo_000.jsonl");
    let text = std::fs::read_to_string(&file).unwrap();
    let first = text.lines().next().unwrap();
    let mut header: serde_json::Value = serde_json::from_str(first).unwrap();
    header["schema"] = serde_json::json!(99);
    std::fs::write(&file, text.replacen(first, &header.to_string(), 1)).unwrap();
    let o = bin(&[
        "fit-gmm",
        "--seed",
        "1",
        "--demos",
        s(&demos),
        "--out",
        s(&dir.join("g")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("regenerate"), "{}", stderr(&o));
}

#[test]
fn fit_reduces_components_and_exports_one_center_per_component() {
    let dir = workdir("fit");
    let demos = gen(&dir, "2");
    let gmm = dir.join("gmm");
    let o = bin(&[
        "fit-gmm",
        "--seed",
        "1",
        "--components",
        "5",
        "--baseline",
        "--demos",
        s(&demos),
        "--out",
        s(&gmm),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("WARNING"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(gmm.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["requested_components"], 5);
    assert_eq!(report["components"], 2);
    let mra = std::fs::read_to_string(gmm.join("mra.csv")).unwrap();
    assert!(mra.starts_with("time,mra_affine_invariant,mra_euclidean\n"));

    let single = dir.join("single");
    let o = bin(&[
        "fit-gmm",
        "--seed",
        "1",
        "--components",
        "1",
        "--demos",
        s(&demos),
        "--out",
        s(&single),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let plots = dir.join("plots");
    let model = single.join("model.json");
    let args = [
        "export-plots",
        "--seed",
        "1",
        "--demos",
        s(&demos),
        "--model",
        s(&model),
        "--out",
        s(&plots),
    ];
    assert!(bin(&args).status.success());
    let centers = std::fs::read_to_string(plots.join("centers.csv")).unwrap();
    assert_eq!(centers.lines().count(), 2);
    let first = std::fs::read(plots.join("gmr_ellipses.csv")).unwrap();
    assert!(bin(&args).status.success());
    assert_eq!(
        first,
        std::fs::read(plots.join("gmr_ellipses.csv")).unwrap()
    );
}

#[test]
fn zero_scale_eval_matches_unguided() {
    let dir = workdir("eval");
    let demos = gen(&dir, "2");
    let gmm = dir.join("gmm");
    let train = dir.join("train");
    assert!(bin(&[
        "fit-gmm",
        "--seed",
        "1",
        "--components",
        "2",
        "--demos",
        s(&demos),
        "--out",
        s(&gmm)
    ])
    .status
    .success());
    assert!(bin(&[
        "train",
        "--seed",
        "1",
        "--train-steps",
        "100",
        "--demos",
        s(&demos),
        "--out",
        s(&train)
    ])
    .status
    .success());
    let eval = |out: &str, extra: &[&str]| {
        let out = dir.join(out);
        let model = gmm.join("model.json");
        let ck = train.join("checkpoint.json");
        let mut args = vec!["eval", "--seed", "5", "--trials", "2", "--scenario"];
        let scen = scenario_path();
        args.push(&scen);
        args.extend([
            "--model",
            s(&model),
            "--checkpoint",
            s(&ck),
            "--out",
            s(&out),
        ]);
        args.extend(extra);
        let o = bin(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read_to_string(out.join("metrics.csv")).unwrap()
    };
    let zero = eval("zero", &["--lambda", "0"]);
    let off = eval("off", &["--no-guidance"]);
    let rows: Vec<&str> = zero.lines().collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(off, format!("{}\n{}\n", rows[0], rows[1]));
    assert_eq!(
        rows[1].replacen("unguided", "", 1),
        rows[2].replacen("guided", "", 1)
    );
}
