//! Runs the quarter-image benchmark on a PGM.
//!
//! ```text
//! cargo run --release -p pcagmm --example benchmark -- image.pgm [components] [em_iters] [sigma]
//! ```

use std::path::PathBuf;

use pcagmm::em::EmConfig;
use pcagmm::io::read_image;
use pcagmm::protocol::{run_benchmark, BenchmarkConfig};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let path = PathBuf::from(args.next().expect("usage: benchmark IMAGE.pgm [K] [EM_ITERS] [SIGMA]"));
    let mut config = BenchmarkConfig::default();
    if let Some(k) = args.next() {
        config.components = k.parse().expect("K");
    }
    if let Some(iters) = args.next() {
        config.em = EmConfig { max_iters: iters.parse().expect("EM_ITERS"), ..Default::default() };
    }
    if let Some(sigma) = args.next() {
        config.sigma = sigma.parse().expect("SIGMA");
    }
    let image = read_image(&path).expect("readable image");
    let start = std::time::Instant::now();
    for row in run_benchmark(&image, &config).expect("benchmark runs") {
        println!("{:<14} {:6.2} dB  ({} EM iterations)", row.method, row.psnr, row.em_iterations);
    }
    println!("elapsed {:.0} s", start.elapsed().as_secs_f64());
}
