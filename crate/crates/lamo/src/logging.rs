//! Line-delimited stderr logging: level, seconds since start, module, message.

use std::sync::OnceLock;
use std::time::Instant;

static START: OnceLock<Instant> = OnceLock::new();

fn elapsed() -> f64 {
    START.get_or_init(Instant::now).elapsed().as_secs_f64()
}

pub fn info(module: &str, msg: &str) {
    eprintln!("level=info t={:.1}s module={module} {msg}", elapsed());
}

pub fn warn(module: &str, msg: &str) {
    eprintln!("level=warn t={:.1}s module={module} {msg}", elapsed());
}
