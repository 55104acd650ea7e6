#![allow(dead_code)]

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Output};

use enroute_core::backbone::{save_checkpoint, MlpConfig, ModelParams};
use enroute_core::datagen::{generate, write_routes, GenConfig};
use enroute_core::Route;
use serde_json::Value;

pub fn enroute() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_enroute"));
    for var in ["ENROUTE_CONFIG", "ENROUTE_DATA", "ENROUTE_MODEL", "ENROUTE_SEED", "ENROUTE_ADDR", "ENROUTE_REPORT"] {
        cmd.env_remove(var);
    }
    cmd
}

pub fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(out.status.success(), "{:?} failed: {}", cmd, String::from_utf8_lossy(&out.stderr));
    out
}

pub fn small_routes(n: usize, seed: u64) -> Vec<Route> {
    generate(&GenConfig { routes: n, min_segments: 12, max_segments: 20, seed, ..GenConfig::default() }).unwrap()
}

pub fn write_dataset(path: &Path, n: usize, seed: u64) -> Vec<Route> {
    let routes = small_routes(n, seed);
    write_routes(path, &routes).unwrap();
    routes
}

pub fn small_model(seed: u64) -> ModelParams {
    ModelParams::init(MlpConfig::standard(8, 1), seed).unwrap()
}

/// Zero weights with output biases chosen so that every interval has lower
/// bound 0 and an upper bound far above any plausible travel time.
pub fn wide_model() -> ModelParams {
    let cfg = MlpConfig::standard(8, 1);
    let mut values = vec![0.0; cfg.param_count()];
    let n = values.len();
    // output biases are the last three values: point, lower offset, upper offset
    values[n - 3] = 0.5;
    values[n - 2] = 30.0;
    values[n - 1] = 60.0;
    ModelParams::from_values(cfg, 0, values).unwrap()
}

pub fn write_model(path: &Path, params: &ModelParams) {
    save_checkpoint(params, path).unwrap();
}

pub fn read_json_lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

/// One line-delimited JSON client connection.
pub struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Client {
    pub fn connect(addr: impl std::net::ToSocketAddrs) -> Self {
        let stream = TcpStream::connect(addr).unwrap();
        Client { writer: stream.try_clone().unwrap(), reader: BufReader::new(stream) }
    }

    pub fn send_raw(&mut self, line: &str) -> Value {
        self.write(line);
        self.read()
    }

    /// Sends a request without waiting for its response.
    pub fn write(&mut self, line: &str) {
        self.writer.write_all(format!("{line}\n").as_bytes()).unwrap();
    }

    pub fn send(&mut self, req: &Value) -> Value {
        self.send_raw(&req.to_string())
    }

    pub fn read(&mut self) -> Value {
        let mut line = String::new();
        self.reader.read_line(&mut line).unwrap();
        serde_json::from_str(&line).unwrap_or_else(|e| panic!("bad response {line:?}: {e}"))
    }
}
