//! Text format for named real arrays, used by predictor checkpoints and
//! calibration offsets.
//!
//! ```text
//! # dcbf-arrays v1
//! arch=mlp history=3 dim=8 taus=0.1,0.2 hidden=64,64 seed=0
//! w1 24x64 0.013 -0.2 ...
//! b1 1x64 ...
//! ```
//!
//! Line two holds whitespace-separated `key=value` metadata. Each following
//! line is `name RxC` and `R*C` row-major values printed with the shortest
//! representation that parses back to the identical `f64`.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

const MAGIC: &str = "# dcbf-arrays v1";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArrays {
    pub meta: Vec<(String, String)>,
    pub arrays: Vec<(String, Array2<f64>)>,
}

impl NamedArrays {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn array(&self, name: &str) -> Option<&Array2<f64>> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from(MAGIC);
        s.push('\n');
        let meta: Vec<String> = self.meta.iter().map(|(k, v)| format!("{k}={v}")).collect();
        s.push_str(&meta.join(" "));
        s.push('\n');
        for (name, a) in &self.arrays {
            write!(s, "{name} {}x{}", a.nrows(), a.ncols()).unwrap();
            for v in a.iter() {
                write!(s, " {v}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(MAGIC) {
            return Err(Error::parse(path, format!("expected '{MAGIC}' header")));
        }
        let meta_line = lines
            .next()
            .ok_or_else(|| Error::parse(path, "missing metadata line"))?;
        let mut meta = Vec::new();
        for tok in meta_line.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::parse(path, format!("bad metadata token '{tok}'")))?;
            meta.push((k.to_string(), v.to_string()));
        }
        let mut arrays = Vec::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 3;
            let mut toks = line.split_whitespace();
            let Some(name) = toks.next() else { continue };
            let shape = toks
                .next()
                .ok_or_else(|| Error::parse(path, format!("line {lineno}: missing shape")))?;
            let (r, c) = shape
                .split_once('x')
                .and_then(|(r, c)| Some((r.parse::<usize>().ok()?, c.parse::<usize>().ok()?)))
                .ok_or_else(|| Error::parse(path, format!("line {lineno}: bad shape '{shape}'")))?;
            let data = toks
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| Error::parse(path, format!("line {lineno}: bad number '{t}'")))
                })
                .collect::<Result<Vec<_>>>()?;
            if data.len() != r * c {
                return Err(Error::parse(
                    path,
                    format!("line {lineno}: {name} declares {r}x{c} but has {} values", data.len()),
                ));
            }
            let a = Array2::from_shape_vec((r, c), data).expect("length checked");
            arrays.push((name.to_string(), a));
        }
        Ok(Self { meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}

pub(crate) fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub(crate) fn split<T: std::str::FromStr>(s: &str, key: &str, path: &Path) -> Result<Vec<T>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| {
            t.parse()
                .map_err(|_| Error::parse(path, format!("bad entry '{t}' in {key}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip_is_bit_exact() {
        let a = NamedArrays {
            meta: vec![("kind".into(), "test".into())],
            arrays: vec![
                ("w".into(), array![[0.1, -1e-300], [std::f64::consts::PI, 3.0]]),
                ("b".into(), array![[1.0 / 3.0]]),
            ],
        };
        let back = NamedArrays::from_text(&a.to_text(), Path::new("m")).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.meta("kind"), Some("test"));
        assert_eq!(back.array("b").unwrap()[[0, 0]].to_bits(), (1.0f64 / 3.0).to_bits());
    }

    #[test]
    fn rejects_bad_shapes() {
        let p = Path::new("m");
        assert!(NamedArrays::from_text("nope\n", p).is_err());
        let t = format!("{MAGIC}\nk=v\nw 2x2 1 2 3\n");
        assert!(NamedArrays::from_text(&t, p).is_err());
        let t = format!("{MAGIC}\nk=v\nw 2y2 1 2 3 4\n");
        assert!(NamedArrays::from_text(&t, p).is_err());
    }
}
