#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn golden(name: &str) -> PathBuf {
    fixture("golden").join(name)
}

pub fn care(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_care"))
        .args(args)
        .env("CARE_THREADS", "1")
        .output()
        .expect("spawn care")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// JSON text with the wall-time field zeroed.
pub fn without_wall_time(bytes: &[u8]) -> String {
    let mut value: serde_json::Value = serde_json::from_slice(bytes).expect("json");
    if let Some(obj) = value.as_object_mut() {
        if obj.contains_key("wall_time_secs") {
            obj.insert("wall_time_secs".into(), serde_json::json!(0.0));
        }
    }
    serde_json::to_string_pretty(&value).unwrap() + "\n"
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
