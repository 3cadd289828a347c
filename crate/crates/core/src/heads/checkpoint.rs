//! Model checkpoints as text.
//!
//! A `key=value` header describing the architecture, then one shape line
//! and one comma-separated value line per parameter tensor, in
//! [`PolicyModel::params`] order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{HeadKind, ModelSpec, PolicyModel};
use crate::autodiff::{mlp_init, RngStream, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: &str = "stochact-model v1";

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl PolicyModel {
    pub fn to_text(&self) -> String {
        let s = &self.spec;
        let mut out = String::new();
        writeln!(out, "{CHECKPOINT_VERSION}").unwrap();
        writeln!(out, "head={}", s.kind).unwrap();
        writeln!(out, "fingerprint={}", s.fingerprint).unwrap();
        writeln!(out, "obs_len={}", s.obs_len).unwrap();
        writeln!(out, "act_dims={}", join(&s.act_dims)).unwrap();
        writeln!(out, "trunk={}", join(&s.trunk)).unwrap();
        writeln!(out, "head_hidden={}", s.head_hidden).unwrap();
        writeln!(out, "latent={}", s.latent).unwrap();
        writeln!(out, "tau={:?}", s.tau).unwrap();
        writeln!(out, "beta={:?}", s.beta).unwrap();
        writeln!(out, "straight_through={}", s.straight_through).unwrap();
        writeln!(out, "noise_dim={}", s.noise_dim).unwrap();
        let params = self.params();
        writeln!(out, "tensors={}", params.len()).unwrap();
        for p in params {
            writeln!(out, "{}", join(p.shape())).unwrap();
            let vals: Vec<String> = p.data().iter().map(|x| format!("{x:?}")).collect();
            writeln!(out, "{}", vals.join(",")).unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<PolicyModel> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| Error::Parse {
                line: 0,
                message: format!("checkpoint ends before {what}"),
            })
        };
        let (n, first) = next("the version line")?;
        if first != CHECKPOINT_VERSION {
            return Err(Error::Parse {
                line: n,
                message: format!("expected `{CHECKPOINT_VERSION}`, found `{first}`"),
            });
        }
        let mut field = |key: &str| -> Result<(usize, String)> {
            let (n, line) = next(key)?;
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix('='))
                .map(|v| (n, v.to_string()))
                .ok_or_else(|| Error::Parse {
                    line: n,
                    message: format!("expected `{key}=...`"),
                })
        };
        fn parse<T: std::str::FromStr>((n, v): (usize, String)) -> Result<T> {
            v.parse().map_err(|_| Error::Parse {
                line: n,
                message: format!("bad value `{v}`"),
            })
        }
        fn list<T: std::str::FromStr>((n, v): (usize, String)) -> Result<Vec<T>> {
            v.split(',')
                .map(|x| x.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Parse {
                    line: n,
                    message: format!("bad list `{v}`"),
                })
        }
        let (hn, head) = field("head")?;
        let kind: HeadKind = head.parse().map_err(|_| Error::Parse {
            line: hn,
            message: format!("unknown head `{head}`"),
        })?;
        let spec = ModelSpec {
            kind,
            fingerprint: field("fingerprint")?.1,
            obs_len: parse(field("obs_len")?)?,
            act_dims: list(field("act_dims")?)?,
            trunk: list(field("trunk")?)?,
            head_hidden: parse(field("head_hidden")?)?,
            latent: parse(field("latent")?)?,
            tau: parse(field("tau")?)?,
            beta: parse(field("beta")?)?,
            straight_through: parse(field("straight_through")?)?,
            noise_dim: parse(field("noise_dim")?)?,
        };
        let count: usize = parse(field("tensors")?)?;
        spec.validate()?;
        // build the architecture, then overwrite every tensor
        let mut model = PolicyModel {
            trunk: mlp_init(&spec.trunk, &mut RngStream::new(0))?,
            heads: spec
                .head_layouts()
                .iter()
                .map(|s| mlp_init(s, &mut RngStream::new(0)))
                .collect::<Result<_>>()?,
            spec,
        };
        let mut slots = model.params_mut();
        if slots.len() != count {
            return Err(Error::Parse {
                line: 13,
                message: format!("architecture has {} tensors, file declares {count}", slots.len()),
            });
        }
        for slot in slots.iter_mut() {
            let shape: Vec<usize> = list(next("a tensor shape").map(|(n, l)| (n, l.to_string()))?)?;
            let (vn, vline) = next("tensor values")?;
            let data: Vec<f64> = list((vn, vline.to_string()))?;
            if shape != slot.shape() {
                return Err(Error::Parse {
                    line: vn - 1,
                    message: format!("tensor shape {shape:?}, architecture wants {:?}", slot.shape()),
                });
            }
            **slot = Tensor::new(shape, data).map_err(|e| Error::Parse {
                line: vn,
                message: e.to_string(),
            })?;
        }
        if let Some((n, extra)) = lines_rest(next) {
            return Err(Error::Parse {
                line: n,
                message: format!("unexpected trailing line `{extra}`"),
            });
        }
        Ok(model)
    }
}

fn lines_rest<'a>(mut next: impl FnMut(&str) -> Result<(usize, &'a str)>) -> Option<(usize, &'a str)> {
    next("").ok()
}

pub fn write_model(model: &PolicyModel, path: &Path) -> Result<()> {
    fs::write(path, model.to_text()).map_err(|e| Error::io(path, e))
}

pub fn read_model(path: &Path) -> Result<PolicyModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    PolicyModel::from_text(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_every_head() {
        for kind in HeadKind::ALL {
            let mut spec = ModelSpec::new(kind, "grid-reach;grid=9x9;budget=200", 7, &[3, 3, 2]);
            spec.tau = 0.3;
            let m = PolicyModel::new(spec, &mut RngStream::new(5)).unwrap();
            let back = PolicyModel::from_text(&m.to_text()).unwrap();
            assert_eq!(back, m, "{kind}");
        }
    }

    #[test]
    fn corrupted_values_are_reported() {
        let m = PolicyModel::new(ModelSpec::new(HeadKind::Independent, "x", 3, &[2]), &mut RngStream::new(1)).unwrap();
        let text = m.to_text().replacen("stochact-model v1", "stochact-model v0", 1);
        assert!(matches!(PolicyModel::from_text(&text), Err(Error::Parse { line: 1, .. })));
        let mut lines: Vec<String> = m.to_text().lines().map(String::from).collect();
        lines[14] = "1,2,oops".into();
        assert!(matches!(
            PolicyModel::from_text(&lines.join("\n")),
            Err(Error::Parse { line: 15, .. })
        ));
    }
}
