#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

pub const BIN: &str = env!("CARGO_BIN_EXE_manifold-id");

pub fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("MANIFOLD_ID_THREADS", "1")
        .output()
        .expect("binary runs")
}

pub fn run_config(config: &Path, args: &[&str]) -> Output {
    let mut all = vec!["--config", config.to_str().unwrap()];
    all.extend_from_slice(args);
    run(&all)
}

pub fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

pub struct PanelFixture {
    pub countries: usize,
    pub days: usize,
    pub start: &'static str,
    pub variables: Vec<&'static str>,
    /// Countries below one million people, dropped by the population filter.
    pub small: Vec<usize>,
    /// Countries missing every other day, dropped by the missingness filter.
    pub sparse: Vec<usize>,
    /// Countries whose first variable is constant.
    pub constant: Vec<usize>,
    /// Whether `countries.csv` carries lat/lon.
    pub centroids: bool,
}

impl PanelFixture {
    pub fn new(countries: usize, days: usize) -> Self {
        Self {
            countries,
            days,
            start: "2020-03-01",
            variables: vec!["cases", "deaths", "stringency"],
            small: vec![],
            sparse: vec![],
            constant: vec![],
            centroids: true,
        }
    }

    pub fn id(c: usize) -> String {
        format!("C{c:02}")
    }

    fn value(&self, v: usize, c: usize, t: usize) -> f64 {
        let (cf, tf) = (c as f64, t as f64);
        let phase = 0.37 * cf + 1.3 * v as f64;
        let trend = (1.0 + cf % 3.0) * (tf / self.days as f64);
        (tf / (20.0 + 3.0 * cf) + phase).sin() + trend + 0.05 * ((7 * c + 3 * t + v) % 11) as f64
    }

    /// Writes `<var>.csv`, `countries.csv` and `config.json` into `dir`.
    pub fn write(&self, dir: &Path, extra: Value) -> PathBuf {
        std::fs::create_dir_all(dir).unwrap();
        let start = chrono::NaiveDate::parse_from_str(self.start, "%Y-%m-%d").unwrap();
        let ids: Vec<String> = (0..self.countries).map(Self::id).collect();
        let mut vars = Vec::new();
        for (v, name) in self.variables.iter().enumerate() {
            let mut s = format!("date,{}\n", ids.join(","));
            for t in 0..self.days {
                let date = start + chrono::Duration::days(t as i64);
                s.push_str(&date.format("%Y-%m-%d").to_string());
                for c in 0..self.countries {
                    if self.sparse.contains(&c) && t % 2 == 1 {
                        s.push_str(",NA");
                    } else if v == 0 && self.constant.contains(&c) {
                        s.push_str(",1.5");
                    } else {
                        write!(s, ",{}", self.value(v, c, t)).unwrap();
                    }
                }
                s.push('\n');
            }
            let file = format!("{name}.csv");
            std::fs::write(dir.join(&file), s).unwrap();
            vars.push(serde_json::json!({"name": name, "path": file}));
        }
        let mut meta = String::from("id,name,population,income_group,lat,lon\n");
        for c in 0..self.countries {
            let pop = if self.small.contains(&c) {
                5.0e5
            } else {
                2.0e6 + 1.0e5 * c as f64
            };
            let (lat, lon) = if self.centroids {
                (
                    (-40.0 + 7.0 * c as f64).to_string(),
                    (-120.0 + 19.0 * c as f64).to_string(),
                )
            } else {
                (String::new(), String::new())
            };
            writeln!(
                meta,
                "{},Country {c},{pop},{},{lat},{lon}",
                Self::id(c),
                ["low", "high"][c % 2]
            )
            .unwrap();
        }
        std::fs::write(dir.join("countries.csv"), meta).unwrap();
        let mut cfg = serde_json::json!({
            "inputs": {"variables": vars, "metadata": "countries.csv"},
            "out": "out",
        });
        merge(&mut cfg, extra);
        let path = dir.join("config.json");
        std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        path
    }
}

pub fn merge(base: &mut Value, extra: Value) {
    match (base, extra) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn write_synth_config(dir: &Path, specs: Value, extra: Value) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let mut cfg = serde_json::json!({"synth": {"specs": specs, "separation": 5.0}, "out": "out"});
    merge(&mut cfg, extra);
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

/// Relative path -> bytes for every file under `root`.
pub fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Checks `value` against the subset of draft-07 used by the report schema.
pub fn validate(schema: &Value, value: &Value, root: &Value, at: &str) -> Vec<String> {
    let mut errs = Vec::new();
    if let Some(r) = schema.get("$ref").and_then(Value::as_str) {
        let target = r
            .trim_start_matches("#/")
            .split('/')
            .fold(root, |node, key| &node[key]);
        return validate(target, value, root, at);
    }
    if let Some(alts) = schema.get("anyOf").and_then(Value::as_array) {
        if alts
            .iter()
            .all(|s| !validate(s, value, root, at).is_empty())
        {
            errs.push(format!("{at}: matches no alternative"));
        }
        return errs;
    }
    if let Some(t) = schema.get("type").and_then(Value::as_str) {
        let ok = match t {
            "object" => value.is_object(),
            "array" => value.is_array(),
            "string" => value.is_string(),
            "number" => value.is_number(),
            "integer" => value.is_u64() || value.is_i64(),
            "boolean" => value.is_boolean(),
            "null" => value.is_null(),
            _ => false,
        };
        if !ok {
            errs.push(format!("{at}: expected {t}, got {value}"));
            return errs;
        }
    }
    if let Some(e) = schema.get("enum").and_then(Value::as_array) {
        if !e.contains(value) {
            errs.push(format!("{at}: {value} not in enum"));
        }
    }
    if let Some(x) = value.as_f64() {
        if schema
            .get("minimum")
            .and_then(Value::as_f64)
            .is_some_and(|m| x < m)
        {
            errs.push(format!("{at}: {x} below minimum"));
        }
        if schema
            .get("maximum")
            .and_then(Value::as_f64)
            .is_some_and(|m| x > m)
        {
            errs.push(format!("{at}: {x} above maximum"));
        }
    }
    if let Some(obj) = value.as_object() {
        for key in schema
            .get("required")
            .and_then(Value::as_array)
            .into_iter()
            .flatten()
        {
            if !obj.contains_key(key.as_str().unwrap()) {
                errs.push(format!("{at}: missing {key}"));
            }
        }
        let props = schema.get("properties").and_then(Value::as_object);
        for (k, v) in obj {
            match props.and_then(|p| p.get(k)) {
                Some(s) => errs.extend(validate(s, v, root, &format!("{at}.{k}"))),
                None if schema.get("additionalProperties") == Some(&Value::Bool(false)) => {
                    errs.push(format!("{at}: unexpected {k}"))
                }
                None => {}
            }
        }
    }
    if let Some(arr) = value.as_array() {
        if let Some(m) = schema.get("minItems").and_then(Value::as_u64) {
            if (arr.len() as u64) < m {
                errs.push(format!("{at}: fewer than {m} items"));
            }
        }
        if let Some(items) = schema.get("items") {
            for (i, v) in arr.iter().enumerate() {
                errs.extend(validate(items, v, root, &format!("{at}[{i}]")));
            }
        }
    }
    errs
}

pub fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Data rows of a CSV file (header excluded).
pub fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    rdr.records()
        .map(|r| r.unwrap().iter().map(str::to_string).collect())
        .collect()
}
