//! Plain-text checkpoints.
//!
//! ```text
//! ghcrnn-checkpoint
//! version 1
//! config nodes=30 pooling=15,8 f_in=1 f_out=1 hidden=16 cheb_k=2 t_in=12 t_out=3 embed_width=8
//! scaler 3.25 1.5
//! param enc_conv0.theta 2 16
//! <one line of space-separated values per row>
//! end
//! ```

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, Pooling};
use crate::training::Scaler;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "ghcrnn-checkpoint";

pub fn config_line(c: &ModelConfig) -> String {
    let pooling = match c.pooling {
        Pooling::Disabled => "none".to_string(),
        Pooling::Learned { m1, m2 } => format!("{m1},{m2}"),
    };
    format!(
        "nodes={} pooling={pooling} f_in={} f_out={} hidden={} cheb_k={} t_in={} t_out={} embed_width={}",
        c.nodes, c.f_in, c.f_out, c.hidden, c.cheb_k, c.t_in, c.t_out, c.embed_width
    )
}

pub fn to_string(params: &ModelParams, scaler: &Scaler) -> String {
    let mut s = format!("{MAGIC}\nversion {FORMAT_VERSION}\nconfig {}\n", config_line(&params.config));
    let _ = writeln!(s, "scaler {} {}", scaler.mean, scaler.std);
    for (name, m) in params.set.names().iter().zip(params.set.values()) {
        let _ = writeln!(s, "param {name} {} {}", m.nrows(), m.ncols());
        for row in m.rows() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
    }
    s.push_str("end\n");
    s
}

pub fn save(path: impl AsRef<Path>, params: &ModelParams, scaler: &Scaler) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_string(params, scaler)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(ModelParams, Scaler)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, path)
}

fn parse_config(fields: &str, err: &dyn Fn(&str) -> Error) -> Result<ModelConfig> {
    let mut c = ModelConfig::new(0, Pooling::Disabled);
    let mut seen = 0;
    for field in fields.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| err(&format!("config field '{field}' is not key=value")))?;
        let num = |v: &str| v.parse::<usize>().map_err(|_| err(&format!("{key}: '{v}' is not a count")));
        match key {
            "nodes" => c.nodes = num(value)?,
            "f_in" => c.f_in = num(value)?,
            "f_out" => c.f_out = num(value)?,
            "hidden" => c.hidden = num(value)?,
            "cheb_k" => c.cheb_k = num(value)?,
            "t_in" => c.t_in = num(value)?,
            "t_out" => c.t_out = num(value)?,
            "embed_width" => c.embed_width = num(value)?,
            "pooling" => {
                c.pooling = match value.split_once(',') {
                    None if value == "none" => Pooling::Disabled,
                    Some((a, b)) => Pooling::Learned { m1: num(a)?, m2: num(b)? },
                    None => return Err(err(&format!("pooling '{value}'"))),
                }
            }
            other => return Err(err(&format!("unknown config key '{other}'"))),
        }
        seen += 1;
    }
    if seen != 9 {
        return Err(err("config line must list all nine fields"));
    }
    Ok(c)
}

pub fn parse(text: &str, path: &Path) -> Result<(ModelParams, Scaler)> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let fail = |line: usize, msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.to_string(),
    };
    let mut next = |what: &str| -> Result<(usize, &str)> {
        lines.next().ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: format!("unexpected end of file, expected {what}"),
        })
    };

    let (n, l) = next("header")?;
    if l != MAGIC {
        return Err(fail(n, "not a checkpoint file"));
    }
    let (n, l) = next("version")?;
    let version = l
        .strip_prefix("version ")
        .and_then(|v| v.trim().parse::<u32>().ok())
        .ok_or_else(|| fail(n, "missing version"))?;
    if version != FORMAT_VERSION {
        return Err(fail(n, &format!("unsupported checkpoint version {version} (expected {FORMAT_VERSION})")));
    }
    let (n, l) = next("config")?;
    let fields = l.strip_prefix("config ").ok_or_else(|| fail(n, "missing config"))?;
    let config = parse_config(fields, &|m| fail(n, m))?;
    config.validate().map_err(|e| fail(n, &e.to_string()))?;

    let (n, l) = next("scaler")?;
    let nums: Vec<f64> = l
        .strip_prefix("scaler ")
        .ok_or_else(|| fail(n, "missing scaler"))?
        .split_whitespace()
        .map(|v| v.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| fail(n, "scaler values must be numbers"))?;
    let [mean, std] = nums[..] else {
        return Err(fail(n, "scaler needs mean and std"));
    };
    if !(std > 0.0 && mean.is_finite() && std.is_finite()) {
        return Err(fail(n, "scaler std must be positive and finite"));
    }

    let template = ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut set = template.set.clone();
    let mut filled = vec![false; set.len()];
    let end_line = loop {
        let (n, l) = next("param or end")?;
        if l == "end" {
            break n;
        }
        let mut parts = l.split_whitespace();
        if parts.next() != Some("param") {
            return Err(fail(n, "expected 'param' or 'end'"));
        }
        let name = parts.next().ok_or_else(|| fail(n, "param without a name"))?;
        let dims: Vec<usize> = parts
            .map(|v| v.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| fail(n, "param dimensions must be counts"))?;
        let [rows, cols] = dims[..] else {
            return Err(fail(n, "param needs rows and cols"));
        };
        let idx = set
            .position(name)
            .ok_or_else(|| fail(n, &format!("unknown parameter '{name}'")))?;
        if set.values()[idx].dim() != (rows, cols) {
            return Err(fail(
                n,
                &format!("parameter {name} is {rows}×{cols}, config implies {:?}", set.values()[idx].dim()),
            ));
        }
        let mut m = Array2::zeros((rows, cols));
        for r in 0..rows {
            let (rn, rl) = next("matrix row")?;
            let vals: Vec<f64> = rl
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| fail(rn, "non-numeric matrix entry"))?;
            if vals.len() != cols {
                return Err(fail(rn, &format!("row has {} values, expected {cols}", vals.len())));
            }
            m.row_mut(r).assign(&ndarray::ArrayView1::from(&vals));
        }
        set.values_mut()[idx] = m;
        filled[idx] = true;
    };
    if let Some(missing) = filled.iter().position(|f| !f) {
        return Err(fail(end_line, &format!("parameter {} missing", set.names()[missing])));
    }
    Ok((template.with_values(&set)?, Scaler { mean, std }))
}
