//! Logger writing to stderr and, once a run directory exists, to `run.log`.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use log::{Level, LevelFilter, Log, Metadata, Record};

struct RunLogger {
    level: LevelFilter,
    file: Mutex<Option<File>>,
}

static LOGGER: RunLogger = RunLogger {
    level: LevelFilter::Trace,
    file: Mutex::new(None),
};

impl Log for RunLogger {
    fn enabled(&self, meta: &Metadata) -> bool {
        meta.level() <= log::max_level() && meta.target().starts_with("unirestore")
    }

    fn log(&self, record: &Record) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let line = format!("[{}] {}", record.level(), record.args());
        eprintln!("{line}");
        if let Some(f) = self.file.lock().unwrap().as_mut() {
            let _ = writeln!(f, "{line}");
        }
    }

    fn flush(&self) {
        if let Some(f) = self.file.lock().unwrap().as_mut() {
            let _ = f.flush();
        }
    }
}

pub fn init(verbose: u8) {
    let level = match verbose {
        0 => Level::Info,
        1 => Level::Debug,
        _ => Level::Trace,
    };
    let _ = log::set_logger(&LOGGER);
    log::set_max_level(level.to_level_filter().min(LOGGER.level));
}

/// Mirrors subsequent log lines into `dir/run.log`.
pub fn attach(dir: &Path) {
    if let Ok(f) = OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("run.log"))
    {
        *LOGGER.file.lock().unwrap() = Some(f);
    }
}
