//! Text dump of named 2-d tensors, used for model checkpoints.
//!
//! ```text
//! tensors 1
//! tensor <name> <rows> <cols>
//! <cols values>        (one line per row)
//! ...
//! end
//! ```
//!
//! Values are written in shortest round-trip form, so a dump reloads to
//! bit-identical parameters.

use std::fmt::Write as _;
use std::path::Path;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: &str, rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor `{name}` shape mismatch");
        Tensor {
            name: name.to_string(),
            rows,
            cols,
            data,
        }
    }
}

pub fn to_text(tensors: &[Tensor]) -> String {
    let mut out = String::from("tensors 1\n");
    for t in tensors {
        let _ = writeln!(out, "tensor {} {} {}", t.name, t.rows, t.cols);
        for row in t.data.chunks(t.cols.max(1)) {
            let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", vals.join(" "));
        }
    }
    out.push_str("end\n");
    out
}

pub fn from_text(text: &str) -> Result<Vec<Tensor>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut last = 0;
    let mut next = |last: &mut usize| {
        let (n, l) = lines
            .next()
            .ok_or_else(|| Error::parse(*last + 1, "unexpected end of file"))?;
        *last = n;
        Ok::<_, Error>((n, l))
    };
    let (n, header) = next(&mut last)?;
    if header != "tensors 1" {
        return Err(Error::parse(n, "missing `tensors 1` header"));
    }
    let mut out = Vec::new();
    loop {
        let (n, line) = next(&mut last)?;
        if line == "end" {
            return Ok(out);
        }
        let parts: Vec<&str> = line.split(' ').collect();
        let (name, rows, cols) = match parts.as_slice() {
            ["tensor", name, rows, cols] => (
                *name,
                rows.parse::<usize>()
                    .map_err(|_| Error::parse(n, "bad row count"))?,
                cols.parse::<usize>()
                    .map_err(|_| Error::parse(n, "bad column count"))?,
            ),
            _ => return Err(Error::parse(n, "expected `tensor <name> <rows> <cols>`")),
        };
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (n, row) = next(&mut last)?;
            let vals = row
                .split(' ')
                .filter(|v| !v.is_empty())
                .map(|v| v.parse::<f64>().map_err(|_| Error::parse(n, format!("bad number `{v}`"))))
                .collect::<Result<Vec<f64>>>()?;
            if vals.len() != cols {
                return Err(Error::parse(n, format!("expected {cols} values, found {}", vals.len())));
            }
            data.extend(vals);
        }
        out.push(Tensor {
            name: name.to_string(),
            rows,
            cols,
            data,
        });
    }
}

pub fn save(path: &Path, tensors: &[Tensor]) -> Result<()> {
    std::fs::write(path, to_text(tensors)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<Tensor>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_text(&text)
}

/// Removes the tensor called `name` from `tensors`, checking its shape.
pub fn take(tensors: &mut Vec<Tensor>, name: &str, rows: usize, cols: usize) -> Result<Vec<f64>> {
    let pos = tensors
        .iter()
        .position(|t| t.name == name)
        .ok_or_else(|| Error::invalid(format!("checkpoint lacks tensor `{name}`")))?;
    let t = tensors.remove(pos);
    if t.rows != rows || t.cols != cols {
        return Err(Error::invalid(format!(
            "tensor `{name}` is {}x{}, expected {rows}x{cols}",
            t.rows, t.cols
        )));
    }
    Ok(t.data)
}
