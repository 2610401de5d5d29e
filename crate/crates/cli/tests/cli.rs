use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const MP_CONFIG: &str = r#"
design = "sample_covariance"
n = 400
p = 200
[[noise]]
kind = "isotropic"
sigma2 = 1.0
[grid]
min = -0.5
max = 3.5
step = 0.01
"#;

fn bbp_config(scale: f64) -> String {
    format!("{MP_CONFIG}[[signal]]\ncomponent = 1\nbasis = 1\nscale = {scale}\n")
}

fn manova(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_manova")).args(args).output().unwrap()
}

struct Run {
    dir: TempDir,
}

impl Run {
    fn new(config: &str) -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("run.toml"), config).unwrap();
        Self { dir }
    }

    fn file(&self, name: &str, contents: &str) {
        fs::write(self.dir.path().join(name), contents).unwrap();
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn exec(&self, sub: &str, extra: &[&str]) -> Output {
        let config = self.dir.path().join("run.toml");
        let out = self.out();
        let mut args = vec![sub, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        manova(&args)
    }

    fn read(&self, name: &str) -> String {
        fs::read_to_string(self.out().join(name)).unwrap()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Data rows of a CSV file, skipping the schema line and the column header.
fn rows(text: &str) -> Vec<Vec<String>> {
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# schema_version="));
    lines.next().unwrap();
    lines.map(|l| l.split(',').map(str::to_string).collect()).collect()
}

fn density_rows(text: &str) -> Vec<(f64, f64)> {
    rows(text)
        .into_iter()
        .map(|r| (r[0].parse().unwrap(), r[1].parse().unwrap()))
        .collect()
}

fn mp_density(gamma: f64, x: f64) -> f64 {
    let (a, b) = ((1.0 - gamma.sqrt()).powi(2), (1.0 + gamma.sqrt()).powi(2));
    if x <= a || x >= b {
        return 0.0;
    }
    ((b - x) * (x - a)).sqrt() / (2.0 * std::f64::consts::PI * gamma * x)
}

fn manifest(run: &Run) -> serde_json::Value {
    serde_json::from_str(&run.read("manifest.json")).unwrap()
}

#[test]
fn density_matches_marchenko_pastur() {
    let run = Run::new(MP_CONFIG);
    let o = run.exec("density", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (a, b) = ((1.0 - 0.5f64.sqrt()).powi(2), (1.0 + 0.5f64.sqrt()).powi(2));
    for (x, d) in density_rows(&run.read("density.csv")) {
        if x > a + 0.05 && x < b - 0.05 {
            assert!((d - mp_density(0.5, x)).abs() < 2e-3, "{x}: {d}");
        }
    }
    let support = rows(&run.read("support.csv"));
    assert_eq!(support.len(), 1);
    let (lo, hi): (f64, f64) = (support[0][0].parse().unwrap(), support[0][1].parse().unwrap());
    assert!((lo - a).abs() <= 0.01 + 1e-9 && (hi - b).abs() <= 0.01 + 1e-9, "{lo} {hi}");
    let m = manifest(&run);
    assert_eq!(m["status"], "complete");
    let names: Vec<&str> = m["outputs"].as_array().unwrap().iter().map(|f| f["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["density.csv", "support.csv"]);
}

#[test]
fn empty_noise_has_no_density() {
    let run = Run::new(&MP_CONFIG.replace("sigma2 = 1.0", "sigma2 = 0.0"));
    let o = run.exec("density", &["--grid-min", "-1", "--grid-max", "1", "--grid-step", "0.05"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(density_rows(&run.read("density.csv")).iter().all(|&(_, d)| d.abs() < 1e-8));
}

#[test]
fn bbp_root_table() {
    let run = Run::new(&bbp_config(2.0));
    let o = run.exec("align", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let roots = rows(&run.read("roots.csv"));
    assert_eq!(roots.len(), 1);
    let lambda: f64 = roots[0][0].parse().unwrap();
    assert!((lambda - 5.625).abs() < 1e-6, "{lambda}");
    assert_eq!(rows(&run.read("alignments.csv")).len(), 1);
}

#[test]
fn no_signal_gives_an_empty_root_table() {
    let run = Run::new(MP_CONFIG);
    let o = run.exec("outliers", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(rows(&run.read("roots.csv")).is_empty());
}

#[test]
fn subcritical_spike_gives_an_empty_root_table() {
    let run = Run::new(&bbp_config(0.5f64.sqrt()));
    let o = run.exec("outliers", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(rows(&run.read("roots.csv")).is_empty());
}

/// The one-way kernel estimates the first component only.
#[test]
fn one_way_layout_validates() {
    let config = "design = \"one_way\"\nn_pairs = 20\np = 10\n[[noise]]\nkind = \"isotropic\"\nsigma2 = 1.0\n\
         [[noise]]\nkind = \"isotropic\"\nsigma2 = 1.0\n";
    let first = Run::new(&format!("target = 1\n{config}"));
    let o = first.exec("validate", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(first.read("validation.csv").starts_with("# schema_version=1 kind=validation target=1 pass=true"));
    let second = Run::new(&format!("target = 2\n{config}"));
    assert_eq!(code(&second.exec("validate", &[])), 2);
}

fn matrix_file(m: &[Vec<f64>]) -> String {
    let mut s = format!("{} {}\n", m.len(), m[0].len());
    for row in m {
        s.push_str(&row.iter().map(f64::to_string).collect::<Vec<_>>().join(" "));
        s.push('\n');
    }
    s
}

fn identity(n: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| if i == j { scale } else { 0.0 }).collect()).collect()
}

fn custom_run(kernel_scale: f64, fixed_effects: bool) -> Run {
    let n = 6;
    let mut config = "design = \"custom\"\np = 3\n[custom]\nincidence = [\"u.txt\"]\nkernel = \"b.txt\"\n".to_string();
    if fixed_effects {
        config.push_str("fixed_effects = \"x.txt\"\n");
    }
    config.push_str("[[noise]]\nkind = \"isotropic\"\nsigma2 = 1.0\n");
    let run = Run::new(&config);
    run.file("u.txt", &matrix_file(&identity(n, 1.0)));
    run.file("b.txt", &matrix_file(&identity(n, kernel_scale / n as f64)));
    run.file("x.txt", &matrix_file(&vec![vec![1.0]; n]));
    run
}

#[test]
fn validate_flags_broken_designs() {
    let ok = custom_run(1.0, false);
    assert_eq!(code(&ok.exec("validate", &[])), 0);
    let scaled = custom_run(2.0, false);
    let o = scaled.exec("validate", &[]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(scaled.read("validation.csv").contains("pass=false"));
    let fixed = custom_run(1.0, true);
    let o = fixed.exec("validate", &[]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(fixed.read("validation.csv").contains("bx_residual"));
    assert_eq!(manifest(&fixed)["status"], "partial");
}

#[test]
fn reruns_are_byte_identical() {
    let config = format!("{}[simulation]\nreplicates = 4\nseed = 7\n", bbp_config(2.0));
    let (a, b) = (Run::new(&config), Run::new(&config));
    for run in [&a, &b] {
        let o = run.exec("compare", &["--threads", "1", "--bins", "20"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let m = manifest(&a);
    let outputs = m["outputs"].as_array().unwrap();
    assert_eq!(outputs.len(), 8);
    for f in outputs {
        let name = f["name"].as_str().unwrap();
        let bytes = fs::read(a.out().join(name)).unwrap();
        assert_eq!(bytes, fs::read(b.out().join(name)).unwrap(), "{name}");
        let digest = sha256(&bytes);
        assert_eq!(f["sha256"].as_str().unwrap(), digest, "{name}");
    }
    assert_eq!(a.read("manifest.json"), b.read("manifest.json").replace(&path_str(b.dir.path()), &path_str(a.dir.path())));
    let c = Run::new(&config.replace("seed = 7", "seed = 8"));
    c.exec("simulate", &["--bins", "20"]);
    assert_ne!(a.read("empirical_outliers.csv"), c.read("empirical_outliers.csv"));
}

fn path_str(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn sha256(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn json_format_wraps_the_data() {
    let run = Run::new(&bbp_config(2.0));
    let o = run.exec("outliers", &["--format", "json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc: serde_json::Value = serde_json::from_str(&run.read("roots.json")).unwrap();
    assert_eq!(doc["schema_version"], 1);
    assert_eq!(doc["kind"], "outlier_roots");
}

#[test]
fn dry_run_writes_nothing() {
    let run = Run::new(&bbp_config(2.0));
    let o = run.exec("compare", &["--dry-run", "--reps", "3", "--seed", "9"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let plan: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(plan["simulation"]["replicates"], 3);
    assert_eq!(plan["simulation"]["seed"], 9);
    assert_eq!(plan["grid"]["epsilon"], 1e-8);
    assert!(!run.out().exists());
}

#[test]
fn config_errors_exit_with_two() {
    let run = Run::new("design = \"one_way\"\np = 4\n");
    let o = run.exec("density", &[]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let unknown = Run::new(&format!("{MP_CONFIG}bogus = 1\n"));
    assert_eq!(code(&unknown.exec("density", &[])), 2);
    let missing = manova(&["density", "--config", "/nonexistent/run.toml"]);
    assert_eq!(code(&missing), 2);
    let bad_xi = Run::new(MP_CONFIG);
    assert_eq!(code(&bad_xi.exec("simulate", &["--xi", "cauchy"])), 2);
}

#[test]
fn expand_reports_the_bias_expansion() {
    let config = "design = \"one_way\"\nn_pairs = 20\np = 80\n\
         [[noise]]\nkind = \"exponential\"\nzeroed = 4\nseed = 11\n\
         [[noise]]\nkind = \"exponential\"\nzeroed = 4\nseed = 22\n\
         [[signal]]\ncomponent = 1\nbasis = 1\nscale = 10.0\n";
    let run = Run::new(config);
    let o = run.exec("expand", &["--grid-step", "0.05"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = rows(&run.read("expansion.csv"));
    assert!(table.iter().any(|r| r[0] == "largest_root"), "{table:?}");
}
