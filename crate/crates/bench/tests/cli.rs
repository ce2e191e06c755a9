use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fadnest_bench::BenchReport;

const GRID: &str = r#"
repeat = 3

[[grid]]
widths = [2, 16, 16, 1]
activation = "swish"
batch = 16
seed = 1

[[grid]]
widths = [3, 8, 8, 2]
activation = "gelu"
batch = 8
seed = 2
"#;

const SWISH_GRAPH: &str = "\
FORWARD
x = input(; name=x, shape=4)
s = sigmoid(x)
y = mul(s, x)
l = reduce_sum(y)
BACKWARD
gl = seed(; of=l)
dy = vjp(gl; of=l, op=reduce_sum, slot=0)
gy = grad(dy; of=y)
ds = vjp(gy, s, x; of=y, op=mul, slot=0)
dx1 = vjp(gy, s, x; of=y, op=mul, slot=1)
gs = grad(ds; of=s)
dx2 = vjp(gs, s; of=s, op=sigmoid, slot=0)
gx = grad(dx1, dx2; of=x)
SAVE-EDGES
s -> ds
x -> ds
s -> dx1
x -> dx1
s -> dx2
OUTPUTS
l
gx
";

fn bench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bench"))
        .args(args)
        .env("FADNEST_BENCH_WORKERS", "2")
        .output()
        .expect("spawn bench")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_grid(dir: &Path) -> String {
    let p = dir.join("grid.toml");
    fs::write(&p, GRID).unwrap();
    p.to_str().unwrap().to_string()
}

fn without_timing(r: &BenchReport) -> BenchReport {
    let mut r = r.clone();
    for row in &mut r.rows {
        row.wall_ns = 0;
    }
    r
}

#[test]
fn csv_and_json_reports_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_grid(dir.path());
    let csv = ok(&bench(&["run", "--config", &cfg]));
    let json = ok(&bench(&["run", "--config", &cfg, "--format", "json"]));
    let a = BenchReport::read_csv(csv.as_bytes()).unwrap();
    let b = BenchReport::read_json(&json).unwrap();
    assert_eq!(a.rows.len(), 6);
    assert_eq!(without_timing(&a), without_timing(&b));
}

#[test]
fn report_columns_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_grid(dir.path());
    let out = dir.path().join("r.csv");
    ok(&bench(&[
        "run",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
    ]));
    let r = BenchReport::read_csv(fs::File::open(&out).unwrap()).unwrap();
    for cell in r.rows.chunks(3) {
        let [bp, rc, fad] = cell else {
            panic!("three modes per entry")
        };
        assert_eq!(
            (bp.mode.as_str(), rc.mode.as_str(), fad.mode.as_str()),
            ("bp", "recompute", "fad")
        );
        for x in [rc, fad] {
            let rel =
                (x.grad_checksum - bp.grad_checksum).abs() / bp.grad_checksum.abs().max(1e-300);
            assert!(
                rel <= 1e-10,
                "{} checksum {} vs {}",
                x.mode,
                x.grad_checksum,
                bp.grad_checksum
            );
        }
        assert_eq!(fad.forward_kernel_count, bp.forward_kernel_count);
        assert_eq!(
            rc.forward_kernel_count,
            bp.forward_kernel_count + rc.recompute_count
        );
        assert_eq!(bp.recompute_count, 0);
        assert!(fad.im_act_bytes < bp.im_act_bytes);
        assert!(fad.peak_retained_bytes < bp.peak_retained_bytes);
    }
}

#[test]
fn reruns_are_identical_apart_from_timing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_grid(dir.path());
    let a = BenchReport::read_csv(ok(&bench(&["run", "--config", &cfg])).as_bytes()).unwrap();
    let b = BenchReport::read_csv(ok(&bench(&["run", "--config", &cfg])).as_bytes()).unwrap();
    assert_eq!(without_timing(&a), without_timing(&b));
}

#[test]
fn rewrite_collapses_swish_to_one_save_edge() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("swish.fg");
    let output = dir.path().join("out.fg");
    fs::write(&input, SWISH_GRAPH).unwrap();
    let out = bench(&[
        "rewrite",
        "--in",
        input.to_str().unwrap(),
        "--out",
        output.to_str().unwrap(),
    ]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("save-edges 5 -> 1"));
    let text = fs::read_to_string(&output).unwrap();
    let edges: Vec<&str> = text
        .lines()
        .skip_while(|l| *l != "SAVE-EDGES")
        .skip(1)
        .take_while(|l| *l != "OUTPUTS")
        .collect();
    assert_eq!(edges.len(), 1, "{text}");
    assert!(edges[0].ends_with("x.acc"), "{text}");
}

#[test]
fn rewrite_of_empty_graph_is_empty() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("empty.fg");
    let output = dir.path().join("out.fg");
    fs::write(&input, "").unwrap();
    ok(&bench(&[
        "rewrite",
        "--in",
        input.to_str().unwrap(),
        "--out",
        output.to_str().unwrap(),
    ]));
    assert_eq!(fs::read_to_string(&output).unwrap(), "");
}

#[test]
fn malformed_graph_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.fg");
    fs::write(&input, "FORWARD\nx = input(; shape=2)\ny = sigmoid(x\n").unwrap();
    let out = bench(&[
        "rewrite",
        "--in",
        input.to_str().unwrap(),
        "--out",
        "/dev/null",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("line 3"),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn bad_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    fs::write(
        &p,
        "[[grid]]\nwidths = [2, 1]\nactivation = \"elu\"\nbatch = 1\n",
    )
    .unwrap();
    let out = bench(&["run", "--config", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn ops_lists_the_registry() {
    let text = ok(&bench(&["ops"]));
    assert_eq!(text.lines().count(), fadnest::OpKind::ALL.len());
    assert!(text
        .lines()
        .any(|l| l.starts_with("sigmoid") && l.contains("fad-unary") && l.ends_with("out")));
    assert!(text
        .lines()
        .any(|l| l.starts_with("matmul") && l.contains("nfad")));
}

#[test]
fn trace_is_checked() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_grid(dir.path());
    let text = ok(&bench(&["trace", "--config", &cfg]));
    assert_eq!(text.lines().filter(|l| *l == "# trace ok").count(), 2);
    assert!(text.lines().any(|l| l.contains(", YY,")));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_grid(dir.path());
    let text = ok(&bench(&["gradcheck", "--config", &cfg]));
    assert_eq!(text.lines().count(), 6);
    for l in text.lines() {
        let err: f64 = l.rsplit('=').next().unwrap().parse().unwrap();
        assert!(err < 1e-5, "{l}");
    }
}
