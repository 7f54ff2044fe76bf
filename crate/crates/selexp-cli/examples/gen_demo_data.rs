//! Regenerates demo/synthetic.csv: a small tabular classification dataset
//! with a nonlinear decision rule, suitable for exercising the full pipeline
//! in minutes.
//!
//! Usage: cargo run -p selexp-cli --example gen_demo_data [path]


use selexp::rng::{standard_normal, RngSpec};
use std::fmt::Write as _;

fn main() {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "demo/synthetic.csv".into());
    let d = 6;
    let n = 600;
    let mut rng = RngSpec::from_seed(20240517).rng();

    let mut csv = String::new();
    for j in 0..d {
        let _ = write!(csv, "f{j},");
    }
    csv.push_str("label\n");
    for _ in 0..n {
        let x: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
        let score = x[0] + 0.8 * x[1] - 0.6 * x[2] + 0.9 * x[3] * x[4] + 0.3 * x[5]
            + 0.25 * standard_normal(&mut rng);
        let label = usize::from(score > 0.0);
        for v in &x {
            // Truncate to keep the file small; the label was already drawn.
            let _ = write!(csv, "{:.6},", v);
        }
        let _ = writeln!(csv, "{label}");
    }
    if let Some(parent) = std::path::Path::new(&path).parent() {
        std::fs::create_dir_all(parent).expect("create demo dir");
    }
    std::fs::write(&path, csv).expect("write demo csv");
    println!("wrote {path} ({n} rows, {d} features)");
}
